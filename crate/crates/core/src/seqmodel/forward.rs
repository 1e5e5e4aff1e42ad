use super::params::{Adaptation, BaseModel, Layer, LoraAdapter, LoraFactors};
use crate::datagen::{Example, ItemId};
use crate::error::{Error, Result};
use crate::numkernel::{dot, log_sum_exp, softmax, Matrix, RngStream};

/// `W x + scale · B (A x)`.
pub fn lora_linear(w: &Matrix, b: &Matrix, a: &Matrix, scale: f64, x: &[f64]) -> Result<Vec<f64>> {
    let (d_out, d_in) = w.shape();
    if x.len() != d_in || b.rows() != d_out || a.cols() != d_in || b.cols() != a.rows() {
        return Err(Error::Shape(format!(
            "lora_linear: W {:?}, B {:?}, A {:?}, x of length {}",
            w.shape(),
            b.shape(),
            a.shape(),
            x.len()
        )));
    }
    let mut y = w.matvec_unchecked(x);
    let mid = a.matvec_unchecked(x);
    for (yi, bi) in y.iter_mut().zip(b.as_slice().chunks_exact(b.cols().max(1))) {
        *yi += scale * dot(bi, &mid);
    }
    Ok(y)
}

#[derive(Clone, Copy)]
enum LayerAdapt<'a> {
    Frozen,
    Lora { f: &'a LoraFactors, scale: f64 },
    Dense(&'a Matrix),
}

fn layer_adapt(adapt: Adaptation<'_>, layer: Layer) -> LayerAdapt<'_> {
    match adapt {
        Adaptation::None => LayerAdapt::Frozen,
        Adaptation::Lora(a) => LayerAdapt::Lora {
            f: a.factors(layer),
            scale: a.scale(),
        },
        Adaptation::Dense(d) => LayerAdapt::Dense(d.layer(layer)),
    }
}

/// Inverted dropout on the LoRA branch input.
struct Dropout<'r> {
    p: f64,
    rng: &'r mut RngStream,
}

impl Dropout<'_> {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.p);
        (0..n)
            .map(|_| if self.rng.bernoulli(self.p) { 0.0 } else { keep })
            .collect()
    }
}

struct LinearCache {
    input: Vec<f64>,
    /// Dropout mask applied to the LoRA branch input, if any.
    mask: Option<Vec<f64>>,
    /// `A ũ` for LoRA layers.
    mid: Vec<f64>,
}

impl LinearCache {
    fn lora_input(&self) -> Vec<f64> {
        match &self.mask {
            Some(m) => self.input.iter().zip(m).map(|(x, k)| x * k).collect(),
            None => self.input.clone(),
        }
    }
}

fn linear_forward(
    w: &Matrix,
    adapt: LayerAdapt<'_>,
    input: Vec<f64>,
    dropout: &mut Option<Dropout<'_>>,
) -> (Vec<f64>, LinearCache) {
    let mut y = w.matvec_unchecked(&input);
    let mut cache = LinearCache {
        input,
        mask: None,
        mid: Vec::new(),
    };
    match adapt {
        LayerAdapt::Frozen => {}
        LayerAdapt::Dense(delta) => {
            for (yi, d) in y.iter_mut().zip(delta.matvec_unchecked(&cache.input)) {
                *yi += d;
            }
        }
        LayerAdapt::Lora { f, scale } => {
            cache.mask = dropout.as_mut().map(|d| d.mask(cache.input.len()));
            let u = cache.lora_input();
            cache.mid = f.a.matvec_unchecked(&u);
            for (yi, d) in y.iter_mut().zip(f.b.matvec_unchecked(&cache.mid)) {
                *yi += scale * d;
            }
        }
    }
    (y, cache)
}

/// Where gradients of one linear layer go.
struct LinearGrads<'g> {
    lora: Option<&'g mut LoraFactors>,
    base: Option<&'g mut Matrix>,
    want_input: bool,
}

fn linear_backward(
    w: &Matrix,
    adapt: LayerAdapt<'_>,
    cache: &LinearCache,
    dy: &[f64],
    grads: LinearGrads<'_>,
) -> Option<Vec<f64>> {
    if let Some(g) = grads.base {
        g.add_outer(1.0, dy, &cache.input);
    }
    let mut bt_dy = None;
    if let (Some(g), LayerAdapt::Lora { f, scale }) = (grads.lora, adapt) {
        let btdy = f.b.matvec_t_unchecked(dy);
        g.b.add_outer(scale, dy, &cache.mid);
        g.a.add_outer(scale, &btdy, &cache.lora_input());
        bt_dy = Some(btdy);
    }
    if !grads.want_input {
        return None;
    }
    let mut du = w.matvec_t_unchecked(dy);
    match adapt {
        LayerAdapt::Frozen => {}
        LayerAdapt::Dense(delta) => {
            for (d, e) in du.iter_mut().zip(delta.matvec_t_unchecked(dy)) {
                *d += e;
            }
        }
        LayerAdapt::Lora { f, scale } => {
            let btdy = bt_dy.unwrap_or_else(|| f.b.matvec_t_unchecked(dy));
            let back = f.a.matvec_t_unchecked(&btdy);
            for (i, (d, e)) in du.iter_mut().zip(back).enumerate() {
                let m = cache.mask.as_ref().map_or(1.0, |m| m[i]);
                *d += scale * m * e;
            }
        }
    }
    Some(du)
}

/// Intermediate values of one forward pass.
struct Trace {
    window: Vec<ItemId>,
    cq: LinearCache,
    q: Vec<f64>,
    ck: Vec<LinearCache>,
    keys: Vec<Vec<f64>>,
    cv: Vec<LinearCache>,
    values: Vec<Vec<f64>>,
    attn: Vec<f64>,
    co: LinearCache,
    cz: LinearCache,
    logits: Vec<f64>,
}

fn window<'p>(base: &BaseModel, prefix: &'p [ItemId]) -> Result<&'p [ItemId]> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    let vocab = base.vocab_size();
    if let Some(&bad) = prefix.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::UnknownItem(bad));
    }
    let start = prefix.len().saturating_sub(base.max_seq_len.max(1));
    Ok(&prefix[start..])
}

fn forward_trace(
    base: &BaseModel,
    adapt: Adaptation<'_>,
    prefix: &[ItemId],
    mut dropout: Option<Dropout<'_>>,
) -> Result<Trace> {
    let window = window(base, prefix)?;
    let embed = |i: ItemId| base.item_embeddings.row(i as usize).to_vec();
    let last = embed(*window.last().expect("window is non-empty"));

    let (q, cq) = linear_forward(&base.w_q, layer_adapt(adapt, Layer::Query), last.clone(), &mut dropout);
    let mut keys = Vec::with_capacity(window.len());
    let mut ck = Vec::with_capacity(window.len());
    let mut values = Vec::with_capacity(window.len());
    let mut cv = Vec::with_capacity(window.len());
    for &item in window {
        let x = embed(item);
        let (k, c) = linear_forward(&base.w_k, layer_adapt(adapt, Layer::Key), x.clone(), &mut dropout);
        keys.push(k);
        ck.push(c);
        let (v, c) = linear_forward(&base.w_v, layer_adapt(adapt, Layer::Value), x, &mut dropout);
        values.push(v);
        cv.push(c);
    }

    let inv_sqrt_d = 1.0 / (base.dim as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| dot(&q, k) * inv_sqrt_d).collect();
    let attn = softmax(&scores);
    let mut context = vec![0.0; base.dim];
    for (a, v) in attn.iter().zip(&values) {
        for (c, x) in context.iter_mut().zip(v) {
            *c += a * x;
        }
    }
    let (o, co) = linear_forward(&base.w_o, layer_adapt(adapt, Layer::Output), context, &mut dropout);
    let hidden: Vec<f64> = last.iter().zip(&o).map(|(x, y)| x + y).collect();
    let (logits, cz) = linear_forward(&base.w_out, layer_adapt(adapt, Layer::Readout), hidden, &mut dropout);

    Ok(Trace {
        window: window.to_vec(),
        cq,
        q,
        ck,
        keys,
        cv,
        values,
        attn,
        co,
        cz,
        logits,
    })
}

/// Next-item logits over the whole vocabulary. Prefixes longer than
/// `max_seq_len` are truncated to their most recent items.
pub fn forward(base: &BaseModel, adapt: Adaptation<'_>, prefix: &[ItemId]) -> Result<Vec<f64>> {
    Ok(forward_trace(base, adapt, prefix, None)?.logits)
}

/// Cross-entropy of `softmax(logits)` at `target`.
pub fn cross_entropy(logits: &[f64], target: ItemId) -> f64 {
    log_sum_exp(logits) - logits[target as usize]
}

/// Gradients of the adapter parameters, laid out like [`LoraAdapter::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub layers: Vec<LoraFactors>,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        Self {
            layers: adapter
                .layers
                .iter()
                .map(|f| LoraFactors {
                    b: Matrix::zeros(f.b.rows(), f.b.cols()),
                    a: Matrix::zeros(f.a.rows(), f.a.cols()),
                })
                .collect(),
        }
    }

    /// Same ordering as [`LoraAdapter::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|f| f.b.as_slice().iter().chain(f.a.as_slice()).copied())
            .collect()
    }

    fn scale(&mut self, s: f64) {
        for f in &mut self.layers {
            f.a.scale_in_place(s);
            f.b.scale_in_place(s);
        }
    }
}

/// Gradients of every base parameter (pretraining only).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseGrads {
    pub item_embeddings: Matrix,
    /// Indexed by [`Layer::index`].
    pub weights: Vec<Matrix>,
}

impl BaseGrads {
    pub fn zeros_like(base: &BaseModel) -> Self {
        Self {
            item_embeddings: Matrix::zeros(base.vocab_size(), base.dim),
            weights: Layer::ALL
                .iter()
                .map(|&l| {
                    let (r, c) = base.layer_shape(l);
                    Matrix::zeros(r, c)
                })
                .collect(),
        }
    }

    /// Same ordering as [`BaseModel::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.item_embeddings.as_slice().to_vec();
        for w in &self.weights {
            out.extend_from_slice(w.as_slice());
        }
        out
    }

    fn scale(&mut self, s: f64) {
        self.item_embeddings.scale_in_place(s);
        self.weights.iter_mut().for_each(|w| w.scale_in_place(s));
    }
}

enum Sink<'g> {
    Adapter(&'g mut AdapterGrads),
    Base(&'g mut BaseGrads),
}

impl Sink<'_> {
    fn layer(&mut self, layer: Layer, want_input: bool) -> LinearGrads<'_> {
        match self {
            Sink::Adapter(g) => LinearGrads {
                lora: Some(&mut g.layers[layer.index()]),
                base: None,
                want_input,
            },
            Sink::Base(g) => LinearGrads {
                lora: None,
                base: Some(&mut g.weights[layer.index()]),
                want_input: true,
            },
        }
    }
}

fn backward(base: &BaseModel, adapt: Adaptation<'_>, trace: &Trace, dz: &[f64], sink: &mut Sink<'_>) {
    let train_base = matches!(sink, Sink::Base(_));
    let dim = base.dim;
    let n = trace.window.len();
    let inv_sqrt_d = 1.0 / (dim as f64).sqrt();

    let dh = linear_backward(
        &base.w_out,
        layer_adapt(adapt, Layer::Readout),
        &trace.cz,
        dz,
        sink.layer(Layer::Readout, true),
    )
    .expect("input gradient requested");
    // h = x_L + W_o c
    let dc = linear_backward(
        &base.w_o,
        layer_adapt(adapt, Layer::Output),
        &trace.co,
        &dh,
        sink.layer(Layer::Output, true),
    )
    .expect("input gradient requested");

    let d_attn: Vec<f64> = trace.values.iter().map(|v| dot(&dc, v)).collect();
    let mean: f64 = trace.attn.iter().zip(&d_attn).map(|(a, d)| a * d).sum();
    let d_scores: Vec<f64> = trace.attn.iter().zip(&d_attn).map(|(a, d)| a * (d - mean)).collect();

    let mut dq = vec![0.0; dim];
    let mut dx: Vec<Vec<f64>> = vec![Vec::new(); n];
    for j in 0..n {
        let ds = d_scores[j] * inv_sqrt_d;
        for (g, k) in dq.iter_mut().zip(&trace.keys[j]) {
            *g += ds * k;
        }
        let dk: Vec<f64> = trace.q.iter().map(|q| ds * q).collect();
        let dv: Vec<f64> = dc.iter().map(|c| trace.attn[j] * c).collect();
        let gk = linear_backward(
            &base.w_k,
            layer_adapt(adapt, Layer::Key),
            &trace.ck[j],
            &dk,
            sink.layer(Layer::Key, false),
        );
        let gv = linear_backward(
            &base.w_v,
            layer_adapt(adapt, Layer::Value),
            &trace.cv[j],
            &dv,
            sink.layer(Layer::Value, false),
        );
        if let (Some(gk), Some(gv)) = (gk, gv) {
            dx[j] = gk.iter().zip(&gv).map(|(a, b)| a + b).collect();
        }
    }
    let gq = linear_backward(
        &base.w_q,
        layer_adapt(adapt, Layer::Query),
        &trace.cq,
        &dq,
        sink.layer(Layer::Query, false),
    );

    if let Sink::Base(g) = sink {
        debug_assert!(train_base);
        let gq = gq.expect("base gradients request inputs");
        let last = n - 1;
        for (i, (a, b)) in gq.iter().zip(&dh).enumerate() {
            dx[last][i] += a + b;
        }
        for (item, d) in trace.window.iter().zip(&dx) {
            for (e, v) in g.item_embeddings.row_mut(*item as usize).iter_mut().zip(d) {
                *e += v;
            }
        }
    }
}

/// `softmax(z) − onehot(target)`.
fn logit_grad(logits: &[f64], target: ItemId) -> Vec<f64> {
    let mut g = softmax(logits);
    g[target as usize] -= 1.0;
    g
}

fn check_batch(base: &BaseModel, batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(bad) = batch.iter().find(|e| e.target as usize >= base.vocab_size()) {
        return Err(Error::UnknownItem(bad.target));
    }
    Ok(())
}

/// Mean next-item cross-entropy over a batch.
pub fn mean_loss(base: &BaseModel, adapt: Adaptation<'_>, batch: &[Example]) -> Result<f64> {
    check_batch(base, batch)?;
    let mut total = 0.0;
    for ex in batch {
        total += cross_entropy(&forward(base, adapt, &ex.prefix)?, ex.target);
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and its gradient with respect to the adapter factors only.
/// The base model is read, never differentiated.
pub fn loss_and_grads(base: &BaseModel, adapter: &LoraAdapter, batch: &[Example]) -> Result<(f64, AdapterGrads)> {
    adapter_grads(base, adapter, batch, None)
}

/// As [`loss_and_grads`], with the adapter's dropout applied to every LoRA
/// branch input. Masks are drawn from `rng`.
pub fn loss_and_grads_with_dropout(
    base: &BaseModel,
    adapter: &LoraAdapter,
    batch: &[Example],
    rng: &mut RngStream,
) -> Result<(f64, AdapterGrads)> {
    adapter_grads(base, adapter, batch, Some(rng))
}

fn adapter_grads(
    base: &BaseModel,
    adapter: &LoraAdapter,
    batch: &[Example],
    mut rng: Option<&mut RngStream>,
) -> Result<(f64, AdapterGrads)> {
    check_batch(base, batch)?;
    adapter.check_against(base)?;
    let adapt = Adaptation::Lora(adapter);
    let mut grads = AdapterGrads::zeros_like(adapter);
    let mut total = 0.0;
    for ex in batch {
        let dropout = match (&mut rng, adapter.dropout > 0.0) {
            (Some(r), true) => Some(Dropout {
                p: adapter.dropout,
                rng: r,
            }),
            _ => None,
        };
        let trace = forward_trace(base, adapt, &ex.prefix, dropout)?;
        total += cross_entropy(&trace.logits, ex.target);
        let dz = logit_grad(&trace.logits, ex.target);
        backward(base, adapt, &trace, &dz, &mut Sink::Adapter(&mut grads));
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Mean loss and gradients of all base parameters, used for pretraining.
pub fn base_loss_and_grads(base: &BaseModel, batch: &[Example]) -> Result<(f64, BaseGrads)> {
    check_batch(base, batch)?;
    let mut grads = BaseGrads::zeros_like(base);
    let mut total = 0.0;
    for ex in batch {
        let trace = forward_trace(base, Adaptation::None, &ex.prefix, None)?;
        total += cross_entropy(&trace.logits, ex.target);
        let dz = logit_grad(&trace.logits, ex.target);
        backward(base, Adaptation::None, &trace, &dz, &mut Sink::Base(&mut grads));
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}
