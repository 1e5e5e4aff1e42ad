//! Parameter-space merge operators over adapters and dense deltas.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datagen::ItemId;
use crate::error::{Error, Result};
use crate::numkernel::{softmax, Matrix, RngStream};
use crate::seqmodel::{forward, Adaptation, AdapterMeta, BaseModel, DenseDelta, LoraAdapter, LoraFactors};

/// Tolerance on `Σλ = 1`.
pub const LAMBDA_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    /// Average `B` and `A` separately.
    Factor,
    /// Average the materialised products `scale · B A`.
    Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MergeMethod {
    WeightAverage,
    Ties { trim_fraction: f64 },
    DareAverage { drop_prob: f64, seed: u64 },
    Lego { target_rank: usize, seed: u64 },
    Learned { steps: usize, step_size: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub lambdas: Vec<f64>,
    pub mode: MergeMode,
    pub method: MergeMethod,
}

impl MergeSpec {
    /// Uniform `1/n` weight average in factor mode.
    pub fn uniform(n: usize) -> Self {
        Self {
            lambdas: uniform_lambdas(n),
            mode: MergeMode::Factor,
            method: MergeMethod::WeightAverage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambdas(&self.lambdas)
    }
}

pub fn uniform_lambdas(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("no merge coefficients".into()));
    }
    if lambdas.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("merge coefficients".into()));
    }
    let sum: f64 = lambdas.iter().sum();
    if (sum - 1.0).abs() >= LAMBDA_SUM_TOL {
        return Err(Error::LambdaSum { sum });
    }
    Ok(())
}

/// Result of a merge, with enough provenance to replay it.
#[derive(Clone, Debug, PartialEq)]
pub enum MergedAdapter {
    Factor(LoraAdapter),
    Product(DenseDelta),
}

impl MergedAdapter {
    pub fn adaptation(&self) -> Adaptation<'_> {
        match self {
            MergedAdapter::Factor(a) => Adaptation::Lora(a),
            MergedAdapter::Product(d) => Adaptation::Dense(d),
        }
    }

    pub fn meta(&self) -> &AdapterMeta {
        match self {
            MergedAdapter::Factor(a) => &a.meta,
            MergedAdapter::Product(d) => &d.meta,
        }
    }

    pub fn meta_mut(&mut self) -> &mut AdapterMeta {
        match self {
            MergedAdapter::Factor(a) => &mut a.meta,
            MergedAdapter::Product(d) => &mut d.meta,
        }
    }

    /// Number of parameters touched at inference.
    pub fn param_count(&self) -> usize {
        match self {
            MergedAdapter::Factor(a) => a.param_count(),
            MergedAdapter::Product(d) => d.param_count(),
        }
    }

    /// Records the merge recipe and input hashes.
    pub fn with_provenance(mut self, spec: &MergeSpec, input_hashes: &[String]) -> Self {
        self.meta_mut().provenance = Some(json!({ "spec": spec, "inputs": input_hashes }));
        self
    }
}

fn lineage<'a>(metas: impl Iterator<Item = &'a AdapterMeta>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for m in metas {
        for d in &m.domain_lineage {
            if !out.contains(d) {
                out.push(d.clone());
            }
        }
    }
    out
}

fn check_adapters(adapters: &[&LoraAdapter], lambdas: &[f64]) -> Result<()> {
    if adapters.is_empty() {
        return Err(Error::InvalidArgument("nothing to merge".into()));
    }
    if adapters.len() != lambdas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} adapters but {} coefficients",
            adapters.len(),
            lambdas.len()
        )));
    }
    let first = adapters[0];
    for a in &adapters[1..] {
        if !first.is_compatible(a) || first.alpha != a.alpha {
            return Err(Error::Shape("adapters differ in rank, scaling or layer shapes".into()));
        }
    }
    Ok(())
}

/// `Σ λᵢ Mᵢ`, skipping zero coefficients so that selector weights return
/// their input unchanged.
fn weighted_sum<'a>(mats: impl Iterator<Item = &'a Matrix>, lambdas: &[f64]) -> Matrix {
    let mats: Vec<&Matrix> = mats.collect();
    let mut out = Matrix::zeros(mats[0].rows(), mats[0].cols());
    let mut first = true;
    for (m, &l) in mats.iter().zip(lambdas) {
        if l == 0.0 {
            continue;
        }
        if first && l == 1.0 {
            out = (*m).clone();
        } else {
            for (o, &x) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *o += l * x;
            }
        }
        first = false;
    }
    out
}

/// Factor-wise weighted average: `B = Σ λᵢ Bᵢ`, `A = Σ λᵢ Aᵢ` per layer.
pub fn weight_average(adapters: &[&LoraAdapter], lambdas: &[f64]) -> Result<LoraAdapter> {
    check_lambdas(lambdas)?;
    check_adapters(adapters, lambdas)?;
    let first = adapters[0];
    let layers = (0..first.layers.len())
        .map(|l| LoraFactors {
            b: weighted_sum(adapters.iter().map(|a| &a.layers[l].b), lambdas),
            a: weighted_sum(adapters.iter().map(|a| &a.layers[l].a), lambdas),
        })
        .collect();
    Ok(LoraAdapter {
        rank: first.rank,
        alpha: first.alpha,
        dropout: first.dropout,
        layers,
        meta: AdapterMeta {
            domain_lineage: lineage(adapters.iter().map(|a| &a.meta)),
            training_seed: None,
            provenance: None,
        },
    })
}

/// Product-mode average: `Σ λᵢ · scale · Bᵢ Aᵢ` per layer.
pub fn product_average(adapters: &[&LoraAdapter], lambdas: &[f64]) -> Result<DenseDelta> {
    check_lambdas(lambdas)?;
    check_adapters(adapters, lambdas)?;
    let deltas: Vec<DenseDelta> = adapters.iter().map(|a| to_task_vector(a)).collect();
    let refs: Vec<&DenseDelta> = deltas.iter().collect();
    task_arithmetic(&refs, lambdas)
}

/// Merge according to `spec.mode` and `spec.method`.
pub fn merge(adapters: &[&LoraAdapter], spec: &MergeSpec) -> Result<MergedAdapter> {
    spec.validate()?;
    let merged = match (&spec.method, spec.mode) {
        (MergeMethod::WeightAverage | MergeMethod::Learned { .. }, MergeMode::Factor) => {
            MergedAdapter::Factor(weight_average(adapters, &spec.lambdas)?)
        }
        (MergeMethod::WeightAverage | MergeMethod::Learned { .. }, MergeMode::Product) => {
            MergedAdapter::Product(product_average(adapters, &spec.lambdas)?)
        }
        (MergeMethod::Ties { trim_fraction }, _) => {
            let deltas: Vec<DenseDelta> = adapters.iter().map(|a| to_task_vector(a)).collect();
            let refs: Vec<&DenseDelta> = deltas.iter().collect();
            MergedAdapter::Product(ties_merge(&refs, *trim_fraction, &spec.lambdas)?)
        }
        (MergeMethod::DareAverage { drop_prob, seed }, _) => {
            check_adapters(adapters, &spec.lambdas)?;
            let root = RngStream::new(*seed);
            let deltas = adapters
                .iter()
                .enumerate()
                .map(|(i, a)| dare(&to_task_vector(a), *drop_prob, &mut root.split(&format!("dare/{i}"))))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&DenseDelta> = deltas.iter().collect();
            MergedAdapter::Product(task_arithmetic(&refs, &spec.lambdas)?)
        }
        (MergeMethod::Lego { target_rank, seed }, _) => {
            MergedAdapter::Factor(lego_merge(adapters, *target_rank, &mut RngStream::new(*seed))?)
        }
    };
    Ok(merged)
}

/// `M = α · hybrid + (1 − α) · target`, factor-wise.
pub fn pair_interpolate(target: &LoraAdapter, hybrid: &LoraAdapter, alpha: f64) -> Result<LoraAdapter> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    weight_average(&[target, hybrid], &[1.0 - alpha, alpha])
}

/// Per-layer `ΔW = scale · B A`.
pub fn to_task_vector(adapter: &LoraAdapter) -> DenseDelta {
    adapter.to_dense()
}

/// `Σ wᵢ ΔWᵢ` with unconstrained signed weights.
pub fn task_arithmetic(deltas: &[&DenseDelta], weights: &[f64]) -> Result<DenseDelta> {
    if deltas.is_empty() || deltas.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} deltas but {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    if deltas.iter().any(|d| !deltas[0].is_compatible(d)) {
        return Err(Error::Shape("task vectors differ in shape".into()));
    }
    let layers = (0..deltas[0].layers.len())
        .map(|l| weighted_sum(deltas.iter().map(|d| &d.layers[l]), weights))
        .collect();
    Ok(DenseDelta {
        layers,
        meta: AdapterMeta {
            domain_lineage: lineage(deltas.iter().map(|d| &d.meta)),
            ..AdapterMeta::default()
        },
    })
}

/// Keeps the `trim_fraction` largest-magnitude coordinates of `values`.
fn trim_mask(values: &[f64], trim_fraction: f64) -> Vec<bool> {
    let n = values.len();
    let keep = ((trim_fraction * n as f64).ceil() as usize).min(n);
    if keep == n {
        return vec![true; n];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // Stable: larger magnitude first, lower index first among equals.
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &idx[..keep] {
        mask[i] = true;
    }
    mask
}

/// Trim, elect sign, disjoint mean.
///
/// Trimming is done per delta over all of its coordinates. The elected sign
/// is the sign of the λ-weighted sum of the surviving values; when that sum
/// is exactly zero the output coordinate is zero.
pub fn ties_merge(deltas: &[&DenseDelta], trim_fraction: f64, lambdas: &[f64]) -> Result<DenseDelta> {
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction must be in (0, 1], got {trim_fraction}"
        )));
    }
    if deltas.is_empty() || deltas.len() != lambdas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} deltas but {} coefficients",
            deltas.len(),
            lambdas.len()
        )));
    }
    if deltas.iter().any(|d| !deltas[0].is_compatible(d)) {
        return Err(Error::Shape("task vectors differ in shape".into()));
    }
    let flat: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| d.layers.iter().flat_map(|m| m.as_slice().iter().copied()).collect())
        .collect();
    let masks: Vec<Vec<bool>> = flat.iter().map(|v| trim_mask(v, trim_fraction)).collect();
    let n = flat[0].len();
    let mut merged = vec![0.0; n];
    for (j, out) in merged.iter_mut().enumerate() {
        let elect: f64 = (0..deltas.len())
            .filter(|&i| masks[i][j])
            .map(|i| lambdas[i] * flat[i][j])
            .sum();
        if elect == 0.0 {
            continue;
        }
        let sign = elect.signum();
        let agreeing: Vec<f64> = (0..deltas.len())
            .filter(|&i| masks[i][j] && flat[i][j] != 0.0 && flat[i][j].signum() == sign)
            .map(|i| flat[i][j])
            .collect();
        if !agreeing.is_empty() {
            *out = agreeing.iter().sum::<f64>() / agreeing.len() as f64;
        }
    }
    let mut offset = 0;
    let layers = deltas[0]
        .layers
        .iter()
        .map(|m| {
            let len = m.len();
            let out = Matrix::from_vec(m.rows(), m.cols(), merged[offset..offset + len].to_vec()).expect("sizes agree");
            offset += len;
            out
        })
        .collect();
    Ok(DenseDelta {
        layers,
        meta: AdapterMeta {
            domain_lineage: lineage(deltas.iter().map(|d| &d.meta)),
            ..AdapterMeta::default()
        },
    })
}

/// Drop-and-rescale: each coordinate is zeroed with probability `p` and the
/// survivors are multiplied by `1/(1−p)`.
pub fn dare(delta: &DenseDelta, drop_prob: f64, rng: &mut RngStream) -> Result<DenseDelta> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidArgument(format!(
            "drop probability must be in [0, 1), got {drop_prob}"
        )));
    }
    if drop_prob == 0.0 {
        return Ok(delta.clone());
    }
    let keep = 1.0 / (1.0 - drop_prob);
    let layers = delta
        .layers
        .iter()
        .map(|m| {
            let mut out = m.clone();
            for v in out.as_mut_slice() {
                *v = if rng.bernoulli(drop_prob) { 0.0 } else { *v * keep };
            }
            out
        })
        .collect();
    Ok(DenseDelta {
        layers,
        meta: delta.meta.clone(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns one label per point.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut RngStream, iterations: usize) -> Vec<usize> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.below(n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let next = if d2.iter().sum::<f64>() > 0.0 {
            rng.weighted_index(&d2)
        } else {
            // Every point coincides with a centroid; take the next unused index.
            (0..n)
                .find(|i| !centroids.iter().any(|c| c == &points[*i]))
                .unwrap_or(centroids.len() % n)
        };
        centroids.push(points[next].clone());
    }
    let mut labels = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centroids[a]).total_cmp(&sq_dist(p, &centroids[b])))
                .expect("k >= 1");
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in centroid.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Simplified LoRA-LEGO: pool the rank-1 units of every adapter, cluster
/// them into `target_rank` groups and rebuild one adapter from the cluster
/// centroids.
///
/// Each unit `(bⱼ, aⱼ)` is normalised so `‖aⱼ‖ = 1` with the magnitude moved
/// into `bⱼ`; the delta `bⱼ aⱼᵀ` is unchanged. Units are clustered on
/// `[bⱼ; aⱼ]` and each cluster becomes one unit `(w · mean b, mean a)` with
/// `w = cluster size / number of adapters`, so the result approximates the
/// average of the input deltas.
pub fn lego_merge(adapters: &[&LoraAdapter], target_rank: usize, rng: &mut RngStream) -> Result<LoraAdapter> {
    check_adapters(adapters, &uniform_lambdas(adapters.len()))?;
    let pooled = adapters.len() * adapters[0].rank;
    if target_rank == 0 || target_rank > pooled {
        return Err(Error::InvalidArgument(format!(
            "target rank {target_rank} must be between 1 and the {pooled} pooled units"
        )));
    }
    let n_adapters = adapters.len() as f64;
    let first = adapters[0];
    let mut layers = Vec::with_capacity(first.layers.len());
    for l in 0..first.layers.len() {
        let (d_out, d_in) = (first.layers[l].b.rows(), first.layers[l].a.cols());
        let mut units: Vec<Vec<f64>> = Vec::with_capacity(pooled);
        for a in adapters {
            let f = &a.layers[l];
            for j in 0..a.rank {
                let row = f.a.row(j);
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let (mut bs, mut an) = if norm > 0.0 { (norm, 1.0 / norm) } else { (1.0, 1.0) };
                // (b, a) and (−b, −a) are the same unit; make the largest |a| entry positive.
                let pivot = row
                    .iter()
                    .copied()
                    .fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
                if pivot < 0.0 {
                    bs = -bs;
                    an = -an;
                }
                let mut u: Vec<f64> = (0..d_out).map(|r| f.b.get(r, j) * bs).collect();
                u.extend(row.iter().map(|x| x * an));
                units.push(u);
            }
        }
        let labels = kmeans(&units, target_rank, &mut rng.split(&format!("layer/{l}")), 100);
        let mut b = Matrix::zeros(d_out, target_rank);
        let mut a = Matrix::zeros(target_rank, d_in);
        for c in 0..target_rank {
            let members: Vec<&Vec<f64>> = units
                .iter()
                .zip(&labels)
                .filter(|(_, &x)| x == c)
                .map(|(u, _)| u)
                .collect();
            if members.is_empty() {
                continue;
            }
            let count = members.len() as f64;
            let weight = count / n_adapters;
            for r in 0..d_out {
                b.set(r, c, weight * members.iter().map(|m| m[r]).sum::<f64>() / count);
            }
            for k in 0..d_in {
                a.set(c, k, members.iter().map(|m| m[d_out + k]).sum::<f64>() / count);
            }
        }
        layers.push(LoraFactors { b, a });
    }
    // Keep the per-unit scale of the inputs: scale = alpha / rank is held fixed
    // by rescaling alpha to the new rank.
    let scale = first.scale();
    Ok(LoraAdapter {
        rank: target_rank,
        alpha: scale * target_rank as f64,
        dropout: first.dropout,
        layers,
        meta: AdapterMeta {
            domain_lineage: lineage(adapters.iter().map(|a| &a.meta)),
            ..AdapterMeta::default()
        },
    })
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // Remove the rounding residue so the sum passes the 1e-12 check.
    let sum: f64 = out.iter().sum();
    if let Some(i) = (0..out.len()).max_by(|&a, &b| out[a].total_cmp(&out[b])) {
        out[i] += 1.0 - sum;
    }
    out
}

/// Mean Shannon entropy of the merged model's next-item distribution.
pub fn mean_prediction_entropy(
    base: &BaseModel,
    adapters: &[&LoraAdapter],
    lambdas: &[f64],
    prefixes: &[Vec<ItemId>],
    candidates: Option<&[Vec<ItemId>]>,
) -> Result<f64> {
    let merged = weight_average(adapters, lambdas)?;
    let mut total = 0.0;
    for (i, prefix) in prefixes.iter().enumerate() {
        let logits = forward(base, Adaptation::Lora(&merged), prefix)?;
        let logits = match candidates {
            Some(c) => c[i].iter().map(|&j| logits[j as usize]).collect(),
            None => logits,
        };
        total -= softmax(&logits)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
    }
    Ok(total / prefixes.len() as f64)
}

/// Entropy-minimising coefficient search on unlabeled prefixes: projected
/// gradient descent on the simplex with central finite-difference gradients.
/// Returns the lowest-entropy λ seen.
pub fn learn_lambdas(
    base: &BaseModel,
    adapters: &[&LoraAdapter],
    prefixes: &[Vec<ItemId>],
    candidates: Option<&[Vec<ItemId>]>,
    steps: usize,
    step_size: f64,
) -> Result<MergeSpec> {
    if prefixes.is_empty() {
        return Err(Error::InvalidArgument(
            "learn_lambdas needs at least one unlabeled prefix".into(),
        ));
    }
    let n = adapters.len();
    let spec = |lambdas: Vec<f64>| MergeSpec {
        lambdas,
        mode: MergeMode::Factor,
        method: MergeMethod::Learned { steps, step_size },
    };
    if n == 1 {
        return Ok(spec(vec![1.0]));
    }
    let objective = |l: &[f64]| mean_prediction_entropy(base, adapters, l, prefixes, candidates);
    let eps = 1e-4;
    let mut lambdas = uniform_lambdas(n);
    let mut best = (objective(&lambdas)?, lambdas.clone());
    for _ in 0..steps {
        let mut grad = vec![0.0; n];
        for (i, g) in grad.iter_mut().enumerate() {
            // Perturb along eᵢ − mean direction to stay on Σλ = 1.
            let dir: Vec<f64> = (0..n)
                .map(|j| if j == i { 1.0 } else { 0.0 } - 1.0 / n as f64)
                .collect();
            let plus: Vec<f64> = lambdas.iter().zip(&dir).map(|(l, d)| l + eps * d).collect();
            let minus: Vec<f64> = lambdas.iter().zip(&dir).map(|(l, d)| l - eps * d).collect();
            let fix = |v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                let mut v = v;
                v[0] += 1.0 - s;
                v
            };
            *g = (objective(&fix(plus))? - objective(&fix(minus))?) / (2.0 * eps);
        }
        let stepped: Vec<f64> = lambdas.iter().zip(&grad).map(|(l, g)| l - step_size * g).collect();
        lambdas = project_to_simplex(&stepped);
        let value = objective(&lambdas)?;
        if value < best.0 {
            best = (value, lambdas.clone());
        }
    }
    Ok(spec(best.1))
}

/// Every point of the simplex over `n` coefficients on a grid of `resolution`.
pub fn simplex_grid(n: usize, resolution: f64) -> Vec<Vec<f64>> {
    let steps = (1.0 / resolution).round() as usize;
    fn rec(n: usize, remaining: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=remaining {
            prefix.push(k);
            rec(n - 1, remaining - k, prefix, out);
            prefix.pop();
        }
    }
    if n == 0 {
        return Vec::new();
    }
    let mut raw = Vec::new();
    rec(n, steps, &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|ks| {
            let mut v: Vec<f64> = ks.iter().map(|&k| k as f64 / steps as f64).collect();
            let s: f64 = v.iter().sum();
            let last = v.len() - 1;
            v[last] += 1.0 - s;
            v
        })
        .collect()
}
