//! Structured (whole-layer) and unstructured (global magnitude) pruning of
//! adapter sets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::DeltaSet;
use crate::model::{AdapterSet, LayerMask};
use crate::ndcore::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuredSpec {
    All,
    /// Keep layers 1, 3, 5, … (1-based).
    #[serde(rename = "everyother")]
    EveryOther,
    /// Keep the first third of the stack, layers `1..=floor(L/3)`.
    Low,
    /// Keep layers `floor(L/3)+1..=floor(2L/3)`.
    Mid,
    /// Keep layers `floor(2L/3)+1..=L`.
    High,
    /// Keep exactly these 1-based layers.
    Custom(Vec<usize>),
}

impl fmt::Display for StructuredSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructuredSpec::All => write!(f, "all"),
            StructuredSpec::EveryOther => write!(f, "everyother"),
            StructuredSpec::Low => write!(f, "low"),
            StructuredSpec::Mid => write!(f, "mid"),
            StructuredSpec::High => write!(f, "high"),
            StructuredSpec::Custom(keep) => {
                let parts: Vec<String> = keep.iter().map(ToString::to_string).collect();
                write!(f, "custom[{}]", parts.join(" "))
            }
        }
    }
}

impl StructuredSpec {
    pub fn standard_variants() -> Vec<StructuredSpec> {
        vec![StructuredSpec::All, StructuredSpec::EveryOther, StructuredSpec::Low, StructuredSpec::Mid, StructuredSpec::High]
    }

    /// The layers kept for an `L`-layer stack, as a mask.
    pub fn kept(&self, layers: usize) -> Result<LayerMask> {
        let third = layers / 3;
        let two_thirds = 2 * layers / 3;
        let keep = |l: usize| -> bool {
            // l is 1-based here
            match self {
                StructuredSpec::All => true,
                StructuredSpec::EveryOther => l % 2 == 1,
                StructuredSpec::Low => l <= third,
                StructuredSpec::Mid => l > third && l <= two_thirds,
                StructuredSpec::High => l > two_thirds,
                StructuredSpec::Custom(list) => list.contains(&l),
            }
        };
        if let StructuredSpec::Custom(list) = self {
            if let Some(&bad) = list.iter().find(|&&l| l == 0 || l > layers) {
                return Err(Error::Config(format!("layer {bad} outside 1..={layers}")));
            }
        }
        let mask = LayerMask::new((1..=layers).map(keep).collect());
        if mask.active_count() == 0 {
            return Err(Error::Config(format!("pruning spec {self} keeps no layer of {layers}")));
        }
        Ok(mask)
    }
}

/// Zeroes `B` on every layer outside the kept set; kept layers and every `A`
/// are left as they are.
pub fn structured_prune(adapters: &AdapterSet, spec: &StructuredSpec) -> Result<AdapterSet> {
    let mask = spec.kept(adapters.layers())?;
    let mut out = adapters.clone();
    for (l, ad) in out.adapters_mut().iter_mut().enumerate() {
        if !mask.is_active(l) {
            let (m, r) = ad.b().shape();
            *ad.b_mut() = Matrix::zeros(m, r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySpec(f64);

impl SparsitySpec {
    pub fn new(rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!("sparsity {rho} outside [0, 1)")));
        }
        Ok(SparsitySpec(rho))
    }

    pub fn rho(&self) -> f64 {
        self.0
    }

    /// Entries to zero out of `total`.
    pub fn count(&self, total: usize) -> usize {
        ((self.0 * total as f64).floor() as usize).min(total)
    }
}

/// Positions of the `count` smallest-magnitude entries across `mats`, ties
/// broken by position in the given order.
fn smallest_positions(mats: &[&Matrix], count: usize) -> Vec<(usize, usize)> {
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (k, m) in mats.iter().enumerate() {
        entries.extend(m.data().iter().enumerate().map(|(i, v)| (v.abs(), k, i)));
    }
    entries.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    entries.into_iter().take(count).map(|(_, k, i)| (k, i)).collect()
}

fn zero_positions(mats: &mut [&mut Matrix], positions: &[(usize, usize)]) {
    for &(k, i) in positions {
        let v = &mut mats[k].data_mut()[i];
        if *v != 0.0 {
            *v = 0.0;
        }
    }
}

/// Global magnitude pruning over every entry of every `A_l` and `B_l`: the
/// `floor(ρ·N)` smallest `|value|` entries become zero, ties broken by
/// (layer, `A` before `B`, row-major index). Entries that are already zero
/// are left untouched, which makes the operation idempotent.
pub fn unstructured_prune(adapters: &AdapterSet, spec: SparsitySpec) -> Result<AdapterSet> {
    let mut out = adapters.clone();
    let positions = {
        let mats: Vec<&Matrix> = out.adapters().iter().flat_map(|ad| [ad.a(), ad.b()]).collect();
        let total: usize = mats.iter().map(|m| m.len()).sum();
        smallest_positions(&mats, spec.count(total))
    };
    let mut mats: Vec<&mut Matrix> = Vec::new();
    for ad in out.adapters_mut() {
        let (a, b) = ad.factors_mut();
        mats.push(a);
        mats.push(b);
    }
    zero_positions(&mut mats, &positions);
    Ok(out)
}

/// Magnitude pruning of the dense updates `α·B_l·A_l` instead of the factors.
pub fn unstructured_prune_dense(adapters: &AdapterSet, spec: SparsitySpec) -> Result<DeltaSet> {
    let mut deltas = adapters.effective_deltas()?;
    let positions = {
        let refs: Vec<&Matrix> = deltas.iter().collect();
        let total: usize = refs.iter().map(|m| m.len()).sum();
        smallest_positions(&refs, spec.count(total))
    };
    let mut refs: Vec<&mut Matrix> = deltas.iter_mut().collect();
    zero_positions(&mut refs, &positions);
    Ok(DeltaSet(deltas))
}

/// Fraction of adapter entries equal to zero.
pub fn zero_fraction(adapters: &AdapterSet) -> f64 {
    let flat = adapters.flatten();
    flat.iter().filter(|&&v| v == 0.0).count() as f64 / flat.len() as f64
}
