//! Fully connected base network with frozen weights, per-layer low-rank
//! adapters, and the masked forward/backward passes.
//!
//! Layer `l` maps a batch `x` (rows are samples) to
//! `z = x · (W + δ·α·B·A)ᵀ`, followed by ReLU on every layer but the last.
//! The adapter branch is evaluated in factored form, `α · (x·Aᵀ)·Bᵀ`, so the
//! dense update is never materialized during training.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndcore::{softmax_cross_entropy, GradPair, Matrix, ParamId, ParamSet};
use crate::schedule::{streams, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct BaseNet {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    source_accuracy: Option<f64>,
}

impl BaseNet {
    pub fn new(dims: Vec<usize>, weights: Vec<Matrix>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("need at least one layer, got dims {dims:?}")));
        }
        if weights.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} weight matrices for {} layers",
                weights.len(),
                dims.len() - 1
            )));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.shape() != (dims[l + 1], dims[l]) {
                return Err(Error::dim("BaseNet layer", w.shape(), (dims[l + 1], dims[l])));
            }
        }
        Ok(BaseNet { dims, weights, source_accuracy: None })
    }

    /// He-initialized weights, `N(0, 2 / fan_in)`.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive: {dims:?}")));
        }
        let mut rng = RngStream::new(seed, streams::BASE_INIT);
        let mut weights = Vec::with_capacity(dims.len().saturating_sub(1));
        for pair in dims.windows(2) {
            let normal = Normal::new(0.0, (2.0 / pair[0] as f64).sqrt()).expect("positive std");
            weights.push(Matrix::from_fn(pair[1], pair[0], |_, _| normal.sample(&mut rng))?);
        }
        Self::new(dims.to_vec(), weights)
    }

    pub fn with_source_accuracy(mut self, acc: f64) -> Self {
        self.source_accuracy = Some(acc);
        self
    }

    pub fn source_accuracy(&self) -> Option<f64> {
        self.source_accuracy
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum()
    }
}

/// `ΔW = scale · B · A` with `A: r × n` and `B: m × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    scale: f64,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        let r = a.rows();
        if b.cols() != r {
            return Err(Error::dim("LoraAdapter", b.shape(), a.shape()));
        }
        if r > b.rows().min(a.cols()) {
            return Err(Error::Config(format!(
                "rank {r} exceeds min(m, n) = {}",
                b.rows().min(a.cols())
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("lora scale must be positive, got {scale}")));
        }
        Ok(LoraAdapter { a, b, scale })
    }

    /// Builds an adapter without the `r ≤ min(m, n)` check. Used for stacked
    /// (mixture) adapters whose combined rank may exceed the layer size.
    pub(crate) fn stacked(a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::dim("stacked adapter", b.shape(), a.shape()));
        }
        Ok(LoraAdapter { a, b, scale })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Host layer shape `(m, n)`.
    pub fn host_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn effective_delta(&self) -> Result<Matrix> {
        self.b.matmul(&self.a)?.scale(self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterMeta {
    pub seed: u64,
    pub strategy: String,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
    pub meta: AdapterMeta,
}

impl AdapterSet {
    pub fn new(adapters: Vec<LoraAdapter>, meta: AdapterMeta) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Config("adapter set needs at least one layer".into()));
        }
        Ok(AdapterSet { adapters, meta })
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn layers(&self) -> usize {
        self.adapters.len()
    }

    pub fn rank(&self) -> usize {
        self.adapters[0].rank()
    }

    pub fn scale(&self) -> f64 {
        self.adapters[0].scale()
    }

    pub fn check_compatible(&self, base: &BaseNet) -> Result<()> {
        if self.layers() != base.layers() {
            return Err(Error::Config(format!(
                "adapter set has {} layers, base has {}",
                self.layers(),
                base.layers()
            )));
        }
        for (ad, w) in self.adapters.iter().zip(base.weights()) {
            if ad.host_shape() != w.shape() {
                return Err(Error::dim("adapter vs base layer", ad.host_shape(), w.shape()));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    /// All adapter entries, layer by layer, `A` before `B`, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for ad in &self.adapters {
            out.extend_from_slice(ad.a.data());
            out.extend_from_slice(ad.b.data());
        }
        out
    }

    pub fn effective_deltas(&self) -> Result<Vec<Matrix>> {
        self.adapters.iter().map(LoraAdapter::effective_delta).collect()
    }
}

/// Fresh adapters: `A ~ N(0, 1/n)` entrywise, `B = 0`, so the initial update
/// is exactly zero.
pub fn init_adapters(base: &BaseNet, rank: usize, scale: f64, seed: u64) -> Result<AdapterSet> {
    let min_dim = base.dims().iter().copied().min().unwrap_or(0);
    if rank == 0 || rank > min_dim {
        return Err(Error::Config(format!(
            "rank {rank} must be in [1, {min_dim}] (smallest layer width)"
        )));
    }
    let mut rng = RngStream::new(seed, streams::ADAPTER_INIT);
    let mut adapters = Vec::with_capacity(base.layers());
    for w in base.weights() {
        let (m, n) = w.shape();
        let normal = Normal::new(0.0, (1.0 / n as f64).sqrt()).expect("positive std");
        let a = Matrix::from_fn(rank, n, |_, _| normal.sample(&mut rng))?;
        adapters.push(LoraAdapter::new(a, Matrix::zeros(m, rank), scale)?);
    }
    AdapterSet::new(adapters, AdapterMeta { seed, strategy: "init".into(), step: 0 })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerMask {
    bits: Vec<bool>,
}

impl LayerMask {
    pub fn new(bits: Vec<bool>) -> Self {
        LayerMask { bits }
    }

    pub fn all(layers: usize) -> Self {
        LayerMask { bits: vec![true; layers] }
    }

    pub fn none(layers: usize) -> Self {
        LayerMask { bits: vec![false; layers] }
    }

    /// Mask whose bit `l` is bit `l` of `subset`.
    pub fn from_bits(layers: usize, subset: u64) -> Self {
        LayerMask { bits: (0..layers).map(|l| subset >> l & 1 == 1).collect() }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_active(&self, layer: usize) -> bool {
        self.bits[layer]
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// How one layer's weight is modified in a forward pass.
#[derive(Clone, Copy)]
enum Update<'a> {
    None,
    LowRank(&'a LoraAdapter),
    Dense(&'a Matrix),
}

struct Cache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    /// `x · Aᵀ` for layers whose adapter branch was active.
    lora_u: Vec<Option<Matrix>>,
}

fn run_forward<'a>(
    base: &'a BaseNet,
    update: impl Fn(usize) -> Update<'a>,
    x: &Matrix,
    keep: bool,
) -> Result<(Matrix, Option<Cache>)> {
    if x.cols() != base.input_dim() {
        return Err(Error::dim("forward input", x.shape(), (x.rows(), base.input_dim())));
    }
    let layers = base.layers();
    let mut cache = Cache { inputs: Vec::new(), pre: Vec::new(), lora_u: Vec::new() };
    let mut h = x.clone();
    for (l, w) in base.weights().iter().enumerate() {
        let (z, u) = match update(l) {
            Update::None => (h.matmul_nt(w)?, None),
            Update::LowRank(ad) => {
                let mut z = h.matmul_nt(w)?;
                let u = h.matmul_nt(&ad.a)?;
                let v = u.matmul_nt(&ad.b)?;
                z.add_scaled(ad.scale, &v)?;
                (z, Some(u))
            }
            Update::Dense(d) => (h.matmul_nt(&w.add(d)?)?, None),
        };
        let next = if l + 1 < layers { z.relu() } else { z.clone() };
        if keep {
            cache.inputs.push(h);
            cache.pre.push(z);
            cache.lora_u.push(u);
        }
        h = next;
    }
    Ok((h, keep.then_some(cache)))
}

fn check_mask(adapters: &AdapterSet, mask: &LayerMask) -> Result<()> {
    if mask.len() != adapters.layers() {
        return Err(Error::Config(format!(
            "mask has {} entries for {} layers",
            mask.len(),
            adapters.layers()
        )));
    }
    Ok(())
}

pub fn forward_base(base: &BaseNet, x: &Matrix) -> Result<Matrix> {
    Ok(run_forward(base, |_| Update::None, x, false)?.0)
}

pub fn forward(base: &BaseNet, adapters: &AdapterSet, mask: &LayerMask, x: &Matrix) -> Result<Matrix> {
    adapters.check_compatible(base)?;
    check_mask(adapters, mask)?;
    let update = |l: usize| {
        if mask.is_active(l) {
            Update::LowRank(&adapters.adapters[l])
        } else {
            Update::None
        }
    };
    Ok(run_forward(base, update, x, false)?.0)
}

/// Forward pass with explicit dense per-layer updates `W_l + ΔW_l`.
pub fn forward_dense(base: &BaseNet, deltas: &[Matrix], x: &Matrix) -> Result<Matrix> {
    if deltas.len() != base.layers() {
        return Err(Error::Config(format!("{} deltas for {} layers", deltas.len(), base.layers())));
    }
    Ok(run_forward(base, |l| Update::Dense(&deltas[l]), x, false)?.0)
}

/// Gradient of the loss with respect to one layer's adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Matrix,
    pub b: Matrix,
}

struct Backward {
    loss: f64,
    weight_grads: Vec<Matrix>,
    adapter_grads: Vec<AdapterGrad>,
}

fn run_backward(
    base: &BaseNet,
    adapters: Option<(&AdapterSet, &LayerMask)>,
    x: &Matrix,
    labels: &[usize],
    want_weights: bool,
) -> Result<Backward> {
    let update = |l: usize| match adapters {
        Some((set, mask)) if mask.is_active(l) => Update::LowRank(&set.adapters[l]),
        _ => Update::None,
    };
    let (logits, cache) = run_forward(base, update, x, true)?;
    let cache = cache.expect("cache requested");
    let (loss, mut g) = softmax_cross_entropy(&logits, labels)?;

    let layers = base.layers();
    let mut weight_grads = Vec::new();
    let mut adapter_grads = Vec::new();
    for l in (0..layers).rev() {
        let input = &cache.inputs[l];
        let w = &base.weights()[l];
        if want_weights {
            weight_grads.push(g.matmul_tn(input)?);
        }
        let mut dx = if l > 0 { Some(g.matmul(w)?) } else { None };
        if let Some((set, _)) = adapters {
            let ad = &set.adapters[l];
            match &cache.lora_u[l] {
                Some(u) => {
                    let gb = g.matmul(&ad.b)?;
                    let db = g.matmul_tn(u)?.scale(ad.scale)?;
                    let da = gb.matmul_tn(input)?.scale(ad.scale)?;
                    if let Some(dx) = dx.as_mut() {
                        dx.add_scaled(ad.scale, &gb.matmul(&ad.a)?)?;
                    }
                    adapter_grads.push(AdapterGrad { a: da, b: db });
                }
                None => adapter_grads.push(AdapterGrad {
                    a: Matrix::zeros(ad.a.rows(), ad.a.cols()),
                    b: Matrix::zeros(ad.b.rows(), ad.b.cols()),
                }),
            }
        }
        if let Some(dx) = dx {
            g = cache.pre[l - 1].relu_backward(&dx)?;
        }
    }
    weight_grads.reverse();
    adapter_grads.reverse();
    Ok(Backward { loss, weight_grads, adapter_grads })
}

/// Mean cross-entropy and adapter gradients. Layers with `δ_l = 0` get
/// exactly-zero gradients.
pub fn loss_and_grads(
    base: &BaseNet,
    adapters: &AdapterSet,
    mask: &LayerMask,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, Vec<AdapterGrad>)> {
    adapters.check_compatible(base)?;
    check_mask(adapters, mask)?;
    let out = run_backward(base, Some((adapters, mask)), x, labels, false)?;
    Ok((out.loss, out.adapter_grads))
}

/// Mean cross-entropy and gradients with respect to the base weights; used
/// only for pretraining.
pub fn base_loss_and_grads(base: &BaseNet, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Matrix>)> {
    let out = run_backward(base, None, x, labels, true)?;
    Ok((out.loss, out.weight_grads))
}

/// Loss and adapter adjoints packaged as a [`GradPair`] keyed by
/// [`ParamId::LoraA`] / [`ParamId::LoraB`].
pub fn adapter_grad_pair(
    base: &BaseNet,
    adapters: &AdapterSet,
    mask: &LayerMask,
    x: &Matrix,
    labels: &[usize],
) -> Result<GradPair> {
    let (loss, grads) = loss_and_grads(base, adapters, mask, x, labels)?;
    let mut adj = ParamSet::new();
    for (l, g) in grads.into_iter().enumerate() {
        adj.insert(ParamId::LoraA(l), g.a);
        adj.insert(ParamId::LoraB(l), g.b);
    }
    GradPair::scalar(loss, adj)
}

/// The adapter factors as a [`ParamSet`].
pub fn adapter_params(adapters: &AdapterSet) -> ParamSet {
    let mut p = ParamSet::new();
    for (l, ad) in adapters.adapters.iter().enumerate() {
        p.insert(ParamId::LoraA(l), ad.a.clone());
        p.insert(ParamId::LoraB(l), ad.b.clone());
    }
    p
}

/// Rebuilds an adapter set from `params`, keeping scale and metadata.
pub fn adapters_from_params(template: &AdapterSet, params: &ParamSet) -> Result<AdapterSet> {
    let mut out = template.clone();
    for (l, ad) in out.adapters.iter_mut().enumerate() {
        let a = params.get(&ParamId::LoraA(l)).ok_or_else(|| Error::Index(format!("missing A{l}")))?;
        let b = params.get(&ParamId::LoraB(l)).ok_or_else(|| Error::Index(format!("missing B{l}")))?;
        if a.shape() != ad.a.shape() || b.shape() != ad.b.shape() {
            return Err(Error::dim("adapters_from_params", a.shape(), ad.a.shape()));
        }
        ad.a = a.clone();
        ad.b = b.clone();
    }
    Ok(out)
}
