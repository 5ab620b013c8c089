//! Linear-mode-connectivity sweeps over the merge coefficient.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::merge::{align, fuse, mix_stacked, MergeWeights};
use crate::model::{AdapterSet, BaseNet, LayerMask};
use crate::train::{evaluate, EvalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Fusion,
    Mixture,
    /// Procrustes-align the second adapter set to the first, then fuse.
    FusionAlign,
}

impl MergeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            MergeMethod::Fusion => "fusion",
            MergeMethod::Mixture => "mixture",
            MergeMethod::FusionAlign => "fusion+align",
        }
    }
}

/// Curve value used for the barrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    #[default]
    Accuracy,
    /// Negated mean cross-entropy, so that higher is better as for accuracy.
    NegLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpCurve {
    pub grid: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
    pub method: MergeMethod,
}

impl InterpCurve {
    pub fn values(&self, metric: CurveMetric) -> Vec<f64> {
        match metric {
            CurveMetric::Accuracy => self.accuracy.clone(),
            CurveMetric::NegLoss => self.loss.iter().map(|l| -l).collect(),
        }
    }

    /// Rows `c,accuracy,method,seed_pair` without a header.
    pub fn csv_rows(&self, seed_pair: &str) -> String {
        let mut s = String::new();
        for (c, a) in self.grid.iter().zip(&self.accuracy) {
            let _ = writeln!(s, "{c},{a},{},{seed_pair}", self.method.name());
        }
        s
    }
}

pub const CURVE_CSV_HEADER: &str = "c,accuracy,method,seed_pair\n";

/// `0, 0.1, …, 1.0`, computed as `i / (n − 1)` so the endpoints are exact.
pub fn uniform_grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::Config(format!("grid needs at least 2 points, got {points}")));
    }
    Ok((0..points).map(|i| i as f64 / (points - 1) as f64).collect())
}

pub fn default_grid() -> Vec<f64> {
    uniform_grid(11).expect("11 points")
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) {
        return Err(Error::Config("grid must start at 0 and end at 1".into()));
    }
    if grid.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::Config("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// The adapters evaluated at coefficient `c` (weights `(1 − c, c)`).
pub fn merged_at(a1: &AdapterSet, a2: &AdapterSet, method: MergeMethod, c: f64) -> Result<AdapterSet> {
    let w = MergeWeights::pair(c)?;
    match method {
        MergeMethod::Fusion => fuse(&[a1, a2], &w),
        MergeMethod::Mixture => mix_stacked(&[a1, a2], &w),
        MergeMethod::FusionAlign => {
            let aligned = align(a1, a2)?;
            fuse(&[a1, &aligned.adapters], &w)
        }
    }
}

/// Evaluates the merged model at every grid coefficient. At `c = 0` the
/// merge returns `a1` unchanged, so the first point equals `evaluate(a1)`
/// exactly for every method.
pub fn interpolation_sweep(
    base: &BaseNet,
    a1: &AdapterSet,
    a2: &AdapterSet,
    method: MergeMethod,
    grid: &[f64],
    data: &Dataset,
) -> Result<InterpCurve> {
    check_grid(grid)?;
    a1.check_compatible(base)?;
    a2.check_compatible(base)?;
    let second = match method {
        MergeMethod::FusionAlign => align(a1, a2)?.adapters,
        _ => a2.clone(),
    };
    let method_inner = match method {
        MergeMethod::FusionAlign => MergeMethod::Fusion,
        m => m,
    };
    let mask = LayerMask::all(base.layers());
    let mut accuracy = Vec::with_capacity(grid.len());
    let mut loss = Vec::with_capacity(grid.len());
    for &c in grid {
        let merged = merged_at(a1, &second, method_inner, c)?;
        let EvalResult { accuracy: acc, loss: l } = evaluate(base, &merged, &mask, data)?;
        accuracy.push(acc);
        loss.push(l);
    }
    Ok(InterpCurve { grid: grid.to_vec(), accuracy, loss, method })
}

/// Largest shortfall below the chord between the endpoints,
/// `max_c [(1 − c)·v(0) + c·v(1) − v(c)]`, floored at zero.
pub fn barrier_of(grid: &[f64], values: &[f64]) -> f64 {
    let (Some(&v0), Some(&v1)) = (values.first(), values.last()) else {
        return 0.0;
    };
    grid.iter()
        .zip(values)
        .map(|(&c, &v)| v0 + c * (v1 - v0) - v)
        .fold(0.0, f64::max)
}

pub fn barrier(curve: &InterpCurve) -> f64 {
    barrier_of(&curve.grid, &curve.accuracy)
}

pub fn barrier_with(curve: &InterpCurve, metric: CurveMetric) -> f64 {
    barrier_of(&curve.grid, &curve.values(metric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(grid: Vec<f64>, accuracy: Vec<f64>) -> InterpCurve {
        let loss = vec![0.0; grid.len()];
        InterpCurve { grid, accuracy, loss, method: MergeMethod::Fusion }
    }

    #[test]
    fn barrier_examples() {
        assert_eq!(barrier(&curve(vec![0.0, 0.5, 1.0], vec![0.8, 0.8, 0.8])), 0.0);
        assert_eq!(barrier(&curve(default_grid(), vec![0.805; 11])), 0.0);
        let b = barrier(&curve(vec![0.0, 0.5, 1.0], vec![0.9, 0.7, 0.9]));
        assert!((b - 0.2).abs() < 1e-12);
        assert_eq!(barrier(&curve(vec![0.0, 0.5, 1.0], vec![0.5, 0.95, 0.7])), 0.0);
    }

    #[test]
    fn barrier_against_sloped_chord() {
        // chord at 0.25 is 0.75·0.4 + 0.25·0.8 = 0.5
        let b = barrier(&curve(vec![0.0, 0.25, 1.0], vec![0.4, 0.3, 0.8]));
        assert!((b - 0.2).abs() < 1e-12);
    }

    #[test]
    fn grids() {
        let g = default_grid();
        assert_eq!(g.len(), 11);
        assert_eq!((g[0], g[10]), (0.0, 1.0));
        assert!((g[3] - 0.3).abs() < 1e-15);
        assert!(check_grid(&[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(check_grid(&[0.1, 1.0]).is_err());
        assert!(uniform_grid(1).is_err());
    }
}
