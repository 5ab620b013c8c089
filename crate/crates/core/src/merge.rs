//! Merging algebra for adapter sets.
//!
//! * fusion averages the factors, `B_f = Σ cᵢBᵢ`, `A_f = Σ cᵢAᵢ`, and stays rank `r`;
//! * mixture averages the dense updates, `ΔW_m = Σ cᵢ·α·BᵢAᵢ`;
//! * alignment re-parametrizes one adapter as `(B·P, Pᵀ·A)` with an orthogonal
//!   `P` chosen by orthogonal Procrustes, which leaves its update unchanged
//!   while bringing its factors as close as possible to a reference.
//!
//! Merge coefficients are called `c` throughout; `α` is always the adapter's
//! own scale.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::model::{AdapterMeta, AdapterSet, LoraAdapter};
use crate::ndcore::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights(Vec<f64>);

impl MergeWeights {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() < 2 {
            return Err(Error::Merge(format!("need at least two coefficients, got {}", coefficients.len())));
        }
        if coefficients.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(Error::Merge(format!("coefficients must be non-negative: {coefficients:?}")));
        }
        let sum: f64 = coefficients.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Merge(format!("coefficients sum to {sum}, expected 1")));
        }
        Ok(MergeWeights(coefficients))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    /// `(1 − c, c)`: `c = 0` selects the first input, `c = 1` the second.
    pub fn pair(c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Merge(format!("interpolation coefficient {c} outside [0, 1]")));
        }
        Self::new(vec![1.0 - c, c])
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest coefficient (first on ties).
    fn anchor(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.0.iter().enumerate() {
            if c > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Dense per-layer updates, e.g. the result of a mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet(pub Vec<Matrix>);

impl Deref for DeltaSet {
    type Target = [Matrix];
    fn deref(&self) -> &[Matrix] {
        &self.0
    }
}

/// Per-layer orthogonal `r × r` maps produced by [`align`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlignMap(pub Vec<Matrix>);

impl AlignMap {
    pub fn identity(layers: usize, rank: usize) -> Self {
        AlignMap(vec![Matrix::identity(rank); layers])
    }
}

#[derive(Debug, Clone)]
pub struct Aligned {
    pub adapters: AdapterSet,
    pub map: AlignMap,
    /// Layers where the SVD failed and `P = I` was used instead.
    pub fallback_layers: Vec<usize>,
}

fn check_compatible(sets: &[&AdapterSet], w: Option<&MergeWeights>) -> Result<()> {
    let first = sets.first().ok_or_else(|| Error::Merge("no adapter sets to merge".into()))?;
    if let Some(w) = w {
        if w.len() != sets.len() {
            return Err(Error::Merge(format!("{} coefficients for {} adapter sets", w.len(), sets.len())));
        }
    }
    for s in &sets[1..] {
        if s.layers() != first.layers() {
            return Err(Error::Merge(format!("layer counts differ: {} vs {}", first.layers(), s.layers())));
        }
        for (l, (a, b)) in first.adapters().iter().zip(s.adapters()).enumerate() {
            if a.a().shape() != b.a().shape() || a.b().shape() != b.b().shape() {
                return Err(Error::Merge(format!(
                    "layer {l}: shapes A {:?}/{:?}, B {:?}/{:?}",
                    a.a().shape(),
                    b.a().shape(),
                    a.b().shape(),
                    b.b().shape()
                )));
            }
            if a.scale() != b.scale() {
                return Err(Error::Merge(format!("layer {l}: lora scales {} vs {}", a.scale(), b.scale())));
            }
        }
    }
    Ok(())
}

/// `Σ cᵢ Xᵢ` evaluated as `X_j + Σ_{i≠j} cᵢ (Xᵢ − X_j)` around the largest
/// weight `j`. Equal to the plain sum when `Σ cᵢ = 1`; in floating point it
/// returns `X_j` exactly when every other input equals it or has weight 0.
fn anchored_combination(items: &[&Matrix], w: &MergeWeights) -> Result<Matrix> {
    let j = w.anchor();
    let mut out = items[j].clone();
    for (i, (&x, &c)) in items.iter().zip(w.coefficients()).enumerate() {
        if i != j {
            out.add_scaled(c, &x.sub(items[j])?)?;
        }
    }
    Ok(out)
}

/// Fusion: per layer `B_f = Σ cᵢBᵢ`, `A_f = Σ cᵢAᵢ`.
pub fn fuse(sets: &[&AdapterSet], w: &MergeWeights) -> Result<AdapterSet> {
    check_compatible(sets, Some(w))?;
    let first = sets[0];
    let mut adapters = Vec::with_capacity(first.layers());
    for l in 0..first.layers() {
        let a_items: Vec<&Matrix> = sets.iter().map(|s| s.adapters()[l].a()).collect();
        let b_items: Vec<&Matrix> = sets.iter().map(|s| s.adapters()[l].b()).collect();
        let a = anchored_combination(&a_items, w)?;
        let b = anchored_combination(&b_items, w)?;
        adapters.push(LoraAdapter::new(a, b, first.scale())?);
    }
    let anchor = sets[w.anchor()];
    let meta = AdapterMeta { seed: anchor.meta.seed, strategy: format!("fusion({})", anchor.meta.strategy), step: anchor.meta.step };
    AdapterSet::new(adapters, meta)
}

/// Mixture: per layer `ΔW = Σ cᵢ·α·BᵢAᵢ` as dense matrices.
pub fn mix(sets: &[&AdapterSet], w: &MergeWeights) -> Result<DeltaSet> {
    check_compatible(sets, Some(w))?;
    let mut out = Vec::with_capacity(sets[0].layers());
    for l in 0..sets[0].layers() {
        let deltas = sets.iter().map(|s| s.adapters()[l].effective_delta()).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = deltas.iter().collect();
        out.push(anchored_combination(&refs, w)?);
    }
    Ok(DeltaSet(out))
}

/// The mixture as a stacked low-rank adapter of rank `k·r`:
/// `B = [c₁B₁ | … | c_kB_k]`, `A = [A₁; …; A_k]`, so that
/// `α·B·A = Σ cᵢ·α·BᵢAᵢ`. Evaluating this keeps the factored forward path,
/// and a weight of exactly 1 on one input reproduces that input's forward
/// pass bit for bit.
pub fn mix_stacked(sets: &[&AdapterSet], w: &MergeWeights) -> Result<AdapterSet> {
    check_compatible(sets, Some(w))?;
    let first = sets[0];
    let mut adapters = Vec::with_capacity(first.layers());
    for l in 0..first.layers() {
        let mut b = first.adapters()[l].b().scale(w.coefficients()[0])?;
        let mut a = first.adapters()[l].a().clone();
        for (s, &c) in sets.iter().zip(w.coefficients()).skip(1) {
            b = b.hstack(&s.adapters()[l].b().scale(c)?)?;
            a = a.vstack(s.adapters()[l].a())?;
        }
        adapters.push(LoraAdapter::stacked(a, b, first.scale())?);
    }
    let meta = AdapterMeta { seed: first.meta.seed, strategy: format!("mixture({})", first.meta.strategy), step: first.meta.step };
    AdapterSet::new(adapters, meta)
}

fn pair_weights(c: f64) -> Result<MergeWeights> {
    MergeWeights::new(vec![c, 1.0 - c])
}

/// Per-layer `‖ΔW_f − ΔW_m‖_F` for weights `(c, 1 − c)` on `(a1, a2)`.
pub fn fusion_mixture_gap(a1: &AdapterSet, a2: &AdapterSet, c: f64) -> Result<Vec<f64>> {
    let w = pair_weights(c)?;
    let fused = fuse(&[a1, a2], &w)?.effective_deltas()?;
    let mixed = mix(&[a1, a2], &w)?;
    fused.iter().zip(mixed.iter()).map(|(f, m)| Ok(f.sub(m)?.frobenius_norm())).collect()
}

/// Closed form of the fusion/mixture difference for weights `(c, 1 − c)`:
/// `ΔW_f − ΔW_m = −c(1 − c)·α·(B₁ − B₂)(A₁ − A₂)`.
pub fn gap_closed_form(a1: &AdapterSet, a2: &AdapterSet, c: f64) -> Result<Vec<Matrix>> {
    check_compatible(&[a1, a2], None)?;
    a1.adapters()
        .iter()
        .zip(a2.adapters())
        .map(|(x, y)| {
            let db = x.b().sub(y.b())?;
            let da = x.a().sub(y.a())?;
            db.matmul(&da)?.scale(-c * (1.0 - c) * x.scale())
        })
        .collect()
}

/// Per-layer `c(1 − c)·α·‖B₁ − B₂‖_F·‖A₁ − A₂‖_F`, which always bounds the gap.
pub fn product_bound(a1: &AdapterSet, a2: &AdapterSet, c: f64) -> Result<Vec<f64>> {
    check_compatible(&[a1, a2], None)?;
    a1.adapters()
        .iter()
        .zip(a2.adapters())
        .map(|(x, y)| {
            let db = x.b().sub(y.b())?.frobenius_norm();
            let da = x.a().sub(y.a())?.frobenius_norm();
            Ok(c * (1.0 - c) * x.scale() * db * da)
        })
        .collect()
}

/// Per-layer Procrustes objective `‖B₁ − B₂P‖²_F + ‖A₁ − PᵀA₂‖²_F`.
pub fn align_objective(reference: &AdapterSet, other: &AdapterSet, map: &AlignMap) -> Result<Vec<f64>> {
    check_compatible(&[reference, other], None)?;
    reference
        .adapters()
        .iter()
        .zip(other.adapters())
        .zip(&map.0)
        .map(|((r, o), p)| {
            let db = r.b().sub(&o.b().matmul(p)?)?.frobenius_norm();
            let da = r.a().sub(&p.matmul_tn(o.a())?)?.frobenius_norm();
            Ok(db * db + da * da)
        })
        .collect()
}

/// Orthogonal Procrustes alignment of `other` onto `reference`.
///
/// Per layer, `M = B₂ᵀB₁ + A₂A₁ᵀ = UΣVᵀ` and `P = UVᵀ` maximizes `tr(PᵀM)`,
/// i.e. minimizes [`align_objective`] over orthogonal `P`. The returned
/// adapters are `(B₂P, PᵀA₂)`, which have the same update as `other`.
pub fn align(reference: &AdapterSet, other: &AdapterSet) -> Result<Aligned> {
    check_compatible(&[reference, other], None)?;
    let mut maps = Vec::with_capacity(reference.layers());
    let mut adapters = Vec::with_capacity(reference.layers());
    let mut fallback_layers = Vec::new();
    for (l, (r, o)) in reference.adapters().iter().zip(other.adapters()).enumerate() {
        let m = o.b().matmul_tn(r.b())?.add(&o.a().matmul_nt(r.a())?)?;
        let p = match m.svd() {
            Some(svd) => svd.u.matmul(&svd.v_t)?,
            None => {
                fallback_layers.push(l);
                Matrix::identity(o.rank())
            }
        };
        let b = o.b().matmul(&p)?;
        let a = p.matmul_tn(o.a())?;
        adapters.push(LoraAdapter::new(a, b, o.scale())?);
        maps.push(p);
    }
    let mut meta = other.meta.clone();
    meta.strategy = format!("aligned({})", other.meta.strategy);
    Ok(Aligned { adapters: AdapterSet::new(adapters, meta)?, map: AlignMap(maps), fallback_layers })
}

/// Per-layer `c(1 − c)·α·(‖B₁ − B₂P‖_F + ‖A₁ − PᵀA₂‖_F)`.
///
/// This sum-form expression is reported as a diagnostic only: it does not
/// bound the gap in general (see [`product_bound`] for a bound that does).
pub fn upper_bound(a1: &AdapterSet, a2: &AdapterSet, c: f64, map: &AlignMap) -> Result<Vec<f64>> {
    check_compatible(&[a1, a2], None)?;
    if map.0.len() != a1.layers() {
        return Err(Error::Merge(format!("align map has {} layers, adapters {}", map.0.len(), a1.layers())));
    }
    a1.adapters()
        .iter()
        .zip(a2.adapters())
        .zip(&map.0)
        .map(|((x, y), p)| {
            let db = x.b().sub(&y.b().matmul(p)?)?.frobenius_norm();
            let da = x.a().sub(&p.matmul_tn(y.a())?)?.frobenius_norm();
            Ok(c * (1.0 - c) * x.scale() * (db + da))
        })
        .collect()
}
