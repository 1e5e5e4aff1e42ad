//! Instruments for studying merged adapters: source/target mixture
//! sampling, a linear-probe estimate of the H-divergence between two
//! domains, 2-D performance landscapes over adapter space and
//! interpolation sweeps between the target and hybrid adapters.

use serde::{Deserialize, Serialize};

use crate::datagen::{CandidatePool, Example, ItemId, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, Aggregates, Metric};
use crate::merger::pair_interpolate;
use crate::numkernel::{dot, RngStream};
use crate::seqmodel::{Adaptation, BaseModel, LoraAdapter};

/// One draw of a mixture stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw<T> {
    pub from_source: bool,
    pub value: T,
}

/// Draws `n` items: each comes from `source` with probability `λ/(1+λ)`
/// and from `target` otherwise, uniformly within the chosen side.
pub fn mixture_sample<T: Clone>(
    target: &[T],
    source: &[T],
    lambda: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<Draw<T>>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "mixing weight must be >= 0, got {lambda}"
        )));
    }
    let p = lambda / (1.0 + lambda);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let from_source = rng.bernoulli(p);
        let side = if from_source { source } else { target };
        if side.is_empty() {
            let which = if from_source { "source" } else { "target" };
            return Err(Error::InvalidArgument(format!("{which} stream is empty")));
        }
        out.push(Draw {
            from_source,
            value: side[rng.below(side.len())].clone(),
        });
    }
    Ok(out)
}

/// The item sequence an example describes: its prefix followed by the target.
pub fn example_sequence(example: &Example) -> Vec<ItemId> {
    let mut seq = example.prefix.clone();
    seq.push(example.target);
    seq
}

/// Maps a sequence to the probe's feature vector.
#[derive(Clone, Copy, Debug)]
pub enum Featurizer<'a> {
    /// Normalized bag of items followed by the mean frozen-base embedding.
    ItemAffinity(&'a BaseModel),
    /// Normalized histogram over within-domain item positions
    /// (`item mod items_per_domain`), blind to which catalog an id is from.
    LocalIndex { items_per_domain: usize },
}

impl Featurizer<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Featurizer::ItemAffinity(base) => base.vocab_size() + base.dim,
            Featurizer::LocalIndex { items_per_domain } => *items_per_domain,
        }
    }

    pub fn features(&self, seq: &[ItemId]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::EmptyPrefix);
        }
        let w = 1.0 / seq.len() as f64;
        let mut x = vec![0.0; self.dim()];
        match self {
            Featurizer::ItemAffinity(base) => {
                let v = base.vocab_size();
                for &item in seq {
                    let i = item as usize;
                    if i >= v {
                        return Err(Error::UnknownItem(item));
                    }
                    x[i] += w;
                    for (acc, &e) in x[v..].iter_mut().zip(base.item_embeddings.row(i)) {
                        *acc += w * e;
                    }
                }
            }
            Featurizer::LocalIndex { items_per_domain } => {
                if *items_per_domain == 0 {
                    return Err(Error::InvalidArgument("items_per_domain must be positive".into()));
                }
                for &item in seq {
                    x[item as usize % items_per_domain] += w;
                }
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Fraction of each (balanced) side used to fit the probe.
    pub train_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Per-side cap on the number of sequences used.
    pub max_per_side: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-3,
            max_per_side: Some(2000),
        }
    }
}

/// Minimum number of sequences per side.
pub const MIN_PROBE_EXAMPLES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    pub first: String,
    pub second: String,
    /// Held-out accuracy of the domain probe.
    pub accuracy: f64,
    /// `1 - accuracy`, the probe's domain-classification error.
    pub error: f64,
    /// `2 (2 · accuracy - 1)` clipped to `[0, 2]`.
    pub d_hat: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
}

/// Full-batch L2-regularized logistic regression on standardized features.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticProbe {
    pub fn fit(xs: &[Vec<f64>], ys: &[bool], config: &ProbeConfig) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::InvalidArgument("probe needs one label per feature row".into()));
        }
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // Constant columns carry no signal and are zeroed out.
        let inv_std = var
            .iter()
            .map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let mut probe = Self {
            mean,
            inv_std,
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardize(x)).collect();
        for _ in 0..config.epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (z, &y) in zs.iter().zip(ys) {
                let r = sigmoid(dot(&probe.weights, z) + probe.bias) - if y { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(z) {
                    *g += r * v;
                }
                gb += r;
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= config.learning_rate * (g / n + config.l2 * *w);
            }
            probe.bias -= config.learning_rate * gb / n;
        }
        Ok(probe)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, &self.standardize(x)) + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.probability(x) >= 0.5
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len().max(1) as f64
    }
}

/// Proxy `d_H` between two sequence samples: a linear probe is trained to
/// tell them apart and its held-out accuracy is mapped to `2 (2 acc - 1)`.
/// Both sides are subsampled to the same size so chance accuracy is ½.
pub fn estimate_h_divergence(
    first: (&str, &[Vec<ItemId>]),
    second: (&str, &[Vec<ItemId>]),
    featurizer: Featurizer<'_>,
    config: &ProbeConfig,
    seed: u64,
) -> Result<DivergenceEstimate> {
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::InvalidArgument("train_fraction must lie in (0, 1)".into()));
    }
    let mut per_side = first.1.len().min(second.1.len());
    if let Some(cap) = config.max_per_side {
        per_side = per_side.min(cap);
    }
    if per_side < MIN_PROBE_EXAMPLES {
        return Err(Error::InvalidArgument(format!(
            "divergence probe needs at least {MIN_PROBE_EXAMPLES} sequences per side, got {} and {}",
            first.1.len(),
            second.1.len()
        )));
    }
    let n_train = ((per_side as f64) * config.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, per_side - 1);
    let rng = RngStream::new(seed);

    let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, (name, seqs)) in [(false, first), (true, second)] {
        let picked = rng
            .split(&format!("probe/{}", label as u8))
            .sample_indices(seqs.len(), per_side);
        for (k, &i) in picked.iter().enumerate() {
            let x = featurizer
                .features(&seqs[i])
                .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))?;
            if k < n_train {
                train_x.push(x);
                train_y.push(label);
            } else {
                test_x.push(x);
                test_y.push(label);
            }
        }
    }
    let probe = LogisticProbe::fit(&train_x, &train_y, config)?;
    let accuracy = probe.accuracy(&test_x, &test_y);
    Ok(DivergenceEstimate {
        first: first.0.to_string(),
        second: second.0.to_string(),
        accuracy,
        error: 1.0 - accuracy,
        d_hat: (2.0 * (2.0 * accuracy - 1.0)).clamp(0.0, 2.0),
        n_train: train_x.len(),
        n_test: test_x.len(),
        probe: config.clone(),
        seed,
    })
}

/// A named checkpoint position in landscape coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub name: String,
    pub s: f64,
    pub t: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub metric: String,
    pub s_coords: Vec<f64>,
    pub t_coords: Vec<f64>,
    /// `values[j][i]` is the metric at `(s_coords[i], t_coords[j])`.
    pub values: Vec<Vec<f64>>,
    /// Cells evaluated at the exact coordinates of the three checkpoints.
    pub anchors: Vec<Anchor>,
    pub u_norm: f64,
}

impl LandscapeGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,t,metric\n");
        for (j, t) in self.t_coords.iter().enumerate() {
            for (i, s) in self.s_coords.iter().enumerate() {
                out.push_str(&format!("{s},{t},{}\n", self.values[j][i]));
            }
        }
        out
    }
}

/// Grid extent along each axis, in units of the anchor spacing.
pub const LANDSCAPE_RANGE: (f64, f64) = (-0.5, 1.5);

/// Relative norm below which the second direction counts as collinear.
pub const DEGENERATE_TOL: f64 = 1e-6;

/// Plane through three adapters in factor space with `u = θ_b − θ_a` and
/// `v` the part of `θ_c − θ_a` orthogonal to `u`, rescaled to `‖u‖`.
#[derive(Clone, Debug)]
pub struct LandscapePlane {
    origin: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    pub c_coords: (f64, f64),
    pub u_norm: f64,
}

impl LandscapePlane {
    pub fn new(a: &LoraAdapter, b: &LoraAdapter, c: &LoraAdapter) -> Result<Self> {
        if !a.is_compatible(b) || !a.is_compatible(c) {
            return Err(Error::Shape("landscape anchors differ in shape".into()));
        }
        let origin = a.to_flat();
        let diff = |x: &LoraAdapter| -> Vec<f64> { x.to_flat().iter().zip(&origin).map(|(p, q)| p - q).collect() };
        let u = diff(b);
        let w = diff(c);
        let uu = dot(&u, &u);
        let u_norm = uu.sqrt();
        if u_norm == 0.0 {
            return Err(Error::Degenerate("first and second anchors coincide".into()));
        }
        let proj = dot(&w, &u) / uu;
        let perp: Vec<f64> = w.iter().zip(&u).map(|(wi, ui)| wi - proj * ui).collect();
        let perp_norm = dot(&perp, &perp).sqrt();
        if perp_norm <= DEGENERATE_TOL * u_norm.max(dot(&w, &w).sqrt()) {
            return Err(Error::Degenerate("third anchor is collinear with the first two".into()));
        }
        let v = perp.iter().map(|x| x * u_norm / perp_norm).collect();
        Ok(Self {
            origin,
            u,
            v,
            c_coords: (proj, perp_norm / u_norm),
            u_norm,
        })
    }

    pub fn point(&self, template: &LoraAdapter, s: f64, t: f64) -> Result<LoraAdapter> {
        let flat: Vec<f64> = self
            .origin
            .iter()
            .zip(&self.u)
            .zip(&self.v)
            .map(|((o, u), v)| o + s * u + t * v)
            .collect();
        template.with_flat(&flat)
    }
}

/// Evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Evaluates `metric` over a `grid_res × grid_res` grid of the plane through
/// `a`, `b` and `c`, plus one cell at each anchor's exact coordinates.
#[allow(clippy::too_many_arguments)]
pub fn landscape_grid(
    base: &BaseModel,
    a: &LoraAdapter,
    b: &LoraAdapter,
    c: &LoraAdapter,
    grid_res: usize,
    split: &SplitDataset,
    pool: &CandidatePool,
    metric: Metric,
) -> Result<LandscapeGrid> {
    if grid_res < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid_res must be at least 2, got {grid_res}"
        )));
    }
    let plane = LandscapePlane::new(a, b, c)?;
    let eval_at = |s: f64, t: f64| -> Result<f64> {
        let adapter = plane.point(a, s, t)?;
        Ok(evaluate(base, Adaptation::Lora(&adapter), split, pool, "landscape")?
            .aggregates
            .get(metric))
    };
    let coords = linspace(LANDSCAPE_RANGE.0, LANDSCAPE_RANGE.1, grid_res);
    let values = coords
        .iter()
        .map(|&t| coords.iter().map(|&s| eval_at(s, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let (cs, ct) = plane.c_coords;
    let anchors = [("a", 0.0, 0.0), ("b", 1.0, 0.0), ("c", cs, ct)]
        .into_iter()
        .map(|(name, s, t)| {
            Ok(Anchor {
                name: name.to_string(),
                s,
                t,
                value: eval_at(s, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid {
        metric: metric.name().to_string(),
        s_coords: coords.clone(),
        t_coords: coords,
        values,
        anchors,
        u_norm: plane.u_norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub aggregates: Aggregates,
}

/// Evaluates `(1 − α)·target + α·hybrid` for every `α`.
pub fn interpolation_sweep(
    base: &BaseModel,
    target: &LoraAdapter,
    hybrid: &LoraAdapter,
    alphas: &[f64],
    split: &SplitDataset,
    pool: &CandidatePool,
) -> Result<Vec<SweepPoint>> {
    alphas
        .iter()
        .map(|&alpha| {
            let merged = pair_interpolate(target, hybrid, alpha)?;
            let report = evaluate(base, Adaptation::Lora(&merged), split, pool, &format!("alpha={alpha}"))?;
            Ok(SweepPoint {
                alpha,
                aggregates: report.aggregates,
            })
        })
        .collect()
}

/// `α ∈ {0, 1/steps, …, 1}`.
pub fn alpha_grid(steps: usize) -> Vec<f64> {
    linspace(0.0, 1.0, steps + 1)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("alpha");
    for m in Metric::ALL {
        out.push(',');
        out.push_str(&m.name().replace('@', ""));
    }
    out.push('\n');
    for p in points {
        out.push_str(&p.alpha.to_string());
        for m in Metric::ALL {
            out.push_str(&format!(",{}", p.aggregates.get(m)));
        }
        out.push('\n');
    }
    out
}
