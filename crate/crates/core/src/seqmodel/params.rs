use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{gaussian_init, matmul, Matrix, RngStream};

/// The adaptable projections of the recommender.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    Query,
    Key,
    Value,
    Output,
    Readout,
}

impl Layer {
    pub const ALL: [Layer; 5] = [Layer::Query, Layer::Key, Layer::Value, Layer::Output, Layer::Readout];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Query => "q",
            Layer::Key => "k",
            Layer::Value => "v",
            Layer::Output => "o",
            Layer::Readout => "out",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

/// Frozen recommender: single-head causal attention over item embeddings
/// with a last-position readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub dim: usize,
    pub max_seq_len: usize,
    pub item_embeddings: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_out: Matrix,
}

impl BaseModel {
    pub fn init(vocab_size: usize, dim: usize, max_seq_len: usize, rng: &mut RngStream) -> Self {
        let proj = 1.0 / (dim as f64).sqrt();
        Self {
            dim,
            max_seq_len,
            item_embeddings: gaussian_init(vocab_size, dim, 0.1, &mut rng.split("embeddings")),
            w_q: gaussian_init(dim, dim, proj, &mut rng.split("w_q")),
            w_k: gaussian_init(dim, dim, proj, &mut rng.split("w_k")),
            w_v: gaussian_init(dim, dim, proj, &mut rng.split("w_v")),
            w_o: gaussian_init(dim, dim, proj, &mut rng.split("w_o")),
            w_out: gaussian_init(vocab_size, dim, 0.1, &mut rng.split("w_out")),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.item_embeddings.rows()
    }

    pub fn weight(&self, layer: Layer) -> &Matrix {
        match layer {
            Layer::Query => &self.w_q,
            Layer::Key => &self.w_k,
            Layer::Value => &self.w_v,
            Layer::Output => &self.w_o,
            Layer::Readout => &self.w_out,
        }
    }

    pub fn weight_mut(&mut self, layer: Layer) -> &mut Matrix {
        match layer {
            Layer::Query => &mut self.w_q,
            Layer::Key => &mut self.w_k,
            Layer::Value => &mut self.w_v,
            Layer::Output => &mut self.w_o,
            Layer::Readout => &mut self.w_out,
        }
    }

    /// `(d_out, d_in)` of a layer.
    pub fn layer_shape(&self, layer: Layer) -> (usize, usize) {
        self.weight(layer).shape()
    }

    pub fn param_count(&self) -> usize {
        self.item_embeddings.len() + Layer::ALL.iter().map(|&l| self.weight(l).len()).sum::<usize>()
    }

    /// Flattened parameters: embeddings, then each layer in [`Layer::ALL`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.item_embeddings.as_slice());
        for layer in Layer::ALL {
            out.extend_from_slice(self.weight(layer).as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, base model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let n = self.item_embeddings.len();
        self.item_embeddings.as_mut_slice().copy_from_slice(&flat[..n]);
        let mut offset = n;
        for layer in Layer::ALL {
            let m = self.weight_mut(layer);
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Standard deviation of the Gaussian initialisation of `A`.
    pub init_sigma: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
            init_sigma: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraFactors {
    /// `d_out × r`
    pub b: Matrix,
    /// `r × d_in`
    pub a: Matrix,
}

/// Bookkeeping carried with adapters into checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub domain_lineage: Vec<String>,
    pub training_seed: Option<u64>,
    /// Merge provenance (method, coefficients, input hashes) for merged artifacts.
    pub provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Indexed by [`Layer::index`].
    pub layers: Vec<LoraFactors>,
    pub meta: AdapterMeta,
}

impl LoraAdapter {
    /// Fresh adapter: `A ~ N(0, σ²)`, `B = 0`, so the adapted model starts out
    /// identical to the base.
    pub fn init(base: &BaseModel, config: &LoraConfig, rng: &mut RngStream) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::InvalidArgument("LoRA rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0, 1), got {}",
                config.dropout
            )));
        }
        let layers = Layer::ALL
            .iter()
            .map(|&layer| {
                let (d_out, d_in) = base.layer_shape(layer);
                LoraFactors {
                    b: Matrix::zeros(d_out, config.rank),
                    a: gaussian_init(config.rank, d_in, config.init_sigma, &mut rng.split(layer.name())),
                }
            })
            .collect();
        Ok(Self {
            rank: config.rank,
            alpha: config.alpha,
            dropout: config.dropout,
            layers,
            meta: AdapterMeta::default(),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn factors(&self, layer: Layer) -> &LoraFactors {
        &self.layers[layer.index()]
    }

    pub fn factors_mut(&mut self, layer: Layer) -> &mut LoraFactors {
        &mut self.layers[layer.index()]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|f| f.a.len() + f.b.len()).sum()
    }

    /// Flattened parameters: for each layer in order, `B` then `A`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for f in &self.layers {
            out.extend_from_slice(f.b.as_slice());
            out.extend_from_slice(f.a.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, adapter has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for f in &mut self.layers {
            for m in [&mut f.b, &mut f.a] {
                let n = m.len();
                m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_flat(flat)?;
        Ok(out)
    }

    /// `scale · B · A` for one layer.
    pub fn delta(&self, layer: Layer) -> Matrix {
        let f = self.factors(layer);
        matmul(&f.b, &f.a)
            .expect("factor shapes are consistent")
            .scale(self.scale())
    }

    /// Materialises every layer's `scale · B · A`.
    pub fn to_dense(&self) -> DenseDelta {
        DenseDelta {
            layers: Layer::ALL.iter().map(|&l| self.delta(l)).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Same rank and per-layer factor shapes.
    pub fn is_compatible(&self, other: &Self) -> bool {
        self.rank == other.rank
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(x, y)| x.a.shape() == y.a.shape() && x.b.shape() == y.b.shape())
    }

    pub fn check_against(&self, base: &BaseModel) -> Result<()> {
        if self.layers.len() != Layer::ALL.len() {
            return Err(Error::Shape(format!("adapter has {} layers", self.layers.len())));
        }
        for layer in Layer::ALL {
            let (d_out, d_in) = base.layer_shape(layer);
            let f = self.factors(layer);
            if f.b.shape() != (d_out, self.rank) || f.a.shape() != (self.rank, d_in) {
                return Err(Error::Shape(format!(
                    "layer {}: B {:?}, A {:?} do not adapt a {d_out}x{d_in} weight at rank {}",
                    layer.name(),
                    f.b.shape(),
                    f.a.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer dense weight deltas (task vector view of an adapter).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseDelta {
    /// Indexed by [`Layer::index`].
    pub layers: Vec<Matrix>,
    pub meta: AdapterMeta,
}

impl DenseDelta {
    pub fn zeros_like(base: &BaseModel) -> Self {
        Self {
            layers: Layer::ALL
                .iter()
                .map(|&l| {
                    let (r, c) = base.layer_shape(l);
                    Matrix::zeros(r, c)
                })
                .collect(),
            meta: AdapterMeta::default(),
        }
    }

    pub fn layer(&self, layer: Layer) -> &Matrix {
        &self.layers[layer.index()]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Matrix::len).sum()
    }

    pub fn is_compatible(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_against(&self, base: &BaseModel) -> Result<()> {
        if self.layers.len() != Layer::ALL.len() {
            return Err(Error::Shape(format!("delta has {} layers", self.layers.len())));
        }
        for layer in Layer::ALL {
            if self.layer(layer).shape() != base.layer_shape(layer) {
                return Err(Error::Shape(format!(
                    "delta for layer {} has wrong shape",
                    layer.name()
                )));
            }
        }
        Ok(())
    }
}

/// What to add on top of the frozen base.
#[derive(Clone, Copy, Debug)]
pub enum Adaptation<'a> {
    None,
    Lora(&'a LoraAdapter),
    Dense(&'a DenseDelta),
}

impl<'a> From<&'a LoraAdapter> for Adaptation<'a> {
    fn from(a: &'a LoraAdapter) -> Self {
        Adaptation::Lora(a)
    }
}

impl<'a> From<&'a DenseDelta> for Adaptation<'a> {
    fn from(d: &'a DenseDelta) -> Self {
        Adaptation::Dense(d)
    }
}
