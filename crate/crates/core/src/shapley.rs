//! Layerwise Shapley values.
//!
//! Each adapter layer is a player and `v(S)` is the performance of the model
//! with adapters active exactly on `S`. Two estimators are provided: exact
//! enumeration over all `2^L` coalitions, and the multilinear-extension
//! sampler `φᵢ = ∫₀¹ eᵢ(q) dq` with `eᵢ(q) = E[v(Eᵢ ∪ {i}) − v(Eᵢ)]`, where
//! `Eᵢ` includes every other player independently with probability `q`.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AdapterSet, BaseNet, LayerMask};
use crate::schedule::RngStream;
use crate::train::evaluate;

/// Largest game the exact method will enumerate.
pub const MAX_EXACT_PLAYERS: usize = 12;

/// A cooperative game over players `0..players()`; coalitions are bitmasks.
pub trait CoalitionGame {
    fn players(&self) -> usize;
    fn value(&self, coalition: u64) -> Result<f64>;
}

/// A game given by its full table of `2^L` values, indexed by bitmask.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGame {
    players: usize,
    values: Vec<f64>,
}

impl TableGame {
    pub fn new(players: usize, values: Vec<f64>) -> Result<Self> {
        if players == 0 || players > 24 || values.len() != 1 << players {
            return Err(Error::Config(format!("table of {} values for {players} players", values.len())));
        }
        Ok(TableGame { players, values })
    }

    pub fn from_fn(players: usize, f: impl Fn(u64) -> f64) -> Result<Self> {
        Self::new(players, (0..1u64 << players).map(f).collect())
    }
}

impl CoalitionGame for TableGame {
    fn players(&self) -> usize {
        self.players
    }

    fn value(&self, coalition: u64) -> Result<f64> {
        Ok(self.values[coalition as usize])
    }
}

/// Wraps a game and counts calls to `value`.
pub struct CountingGame<'a, G: CoalitionGame> {
    inner: &'a G,
    calls: Cell<usize>,
}

impl<'a, G: CoalitionGame> CountingGame<'a, G> {
    pub fn new(inner: &'a G) -> Self {
        CountingGame { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<G: CoalitionGame> CoalitionGame for CountingGame<'_, G> {
    fn players(&self) -> usize {
        self.inner.players()
    }

    fn value(&self, coalition: u64) -> Result<f64> {
        self.calls.set(self.calls.get() + 1);
        self.inner.value(coalition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueMetric {
    /// Test accuracy of the masked model.
    #[default]
    Accuracy,
    /// Negated mean cross-entropy of the masked model.
    NegLoss,
}

/// `v(S)` = performance of `base` with `adapters` active exactly on `S`. No
/// baseline is subtracted, so `v(∅)` is the base model's score.
pub struct ModelGame<'a> {
    pub base: &'a BaseNet,
    pub adapters: &'a AdapterSet,
    pub data: &'a Dataset,
    pub metric: ValueMetric,
}

impl CoalitionGame for ModelGame<'_> {
    fn players(&self) -> usize {
        self.adapters.layers()
    }

    fn value(&self, coalition: u64) -> Result<f64> {
        eval_subset(self.base, self.adapters, &LayerMask::from_bits(self.players(), coalition), self.data, self.metric)
    }
}

pub fn eval_subset(base: &BaseNet, adapters: &AdapterSet, subset: &LayerMask, data: &Dataset, metric: ValueMetric) -> Result<f64> {
    let r = evaluate(base, adapters, subset, data)?;
    Ok(match metric {
        ValueMetric::Accuracy => r.accuracy,
        ValueMetric::NegLoss => -r.loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    Multilinear,
}

impl ShapleyMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ShapleyMethod::Exact => "exact",
            ShapleyMethod::Multilinear => "multilinear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyResult {
    pub phi: Vec<f64>,
    pub stderr: Vec<f64>,
    pub method: ShapleyMethod,
    /// Number of distinct coalitions evaluated.
    pub evaluations: usize,
    /// `(q grid points, samples per point)` for the sampler.
    pub budget: Option<(usize, usize)>,
}

pub const SHAPLEY_CSV_HEADER: &str = "layer,phi,stderr,method\n";

impl ShapleyResult {
    /// Rows `layer,phi,stderr,method` (1-based layers) without a header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (i, (p, e)) in self.phi.iter().zip(&self.stderr).enumerate() {
            let _ = writeln!(s, "{},{p},{e},{}", i + 1, self.method.name());
        }
        s
    }
}

/// Exact Shapley values from all `2^L` coalition values; each coalition is
/// evaluated exactly once.
pub fn exact_shapley<G: CoalitionGame + ?Sized>(game: &G) -> Result<ShapleyResult> {
    let n = game.players();
    if n == 0 {
        return Err(Error::Config("game has no players".into()));
    }
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::Budget(format!(
            "exact enumeration of {n} players needs 2^{n} evaluations (limit {MAX_EXACT_PLAYERS}); use the multilinear sampler"
        )));
    }
    let values = (0..1u64 << n).map(|s| game.value(s)).collect::<Result<Vec<f64>>>()?;
    // weight(s) = s! (n − s − 1)! / n!
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for s in 0..1u64 << n {
            if s & bit == 0 {
                *p += weight[s.count_ones() as usize] * (values[(s | bit) as usize] - values[s as usize]);
            }
        }
    }
    Ok(ShapleyResult { phi, stderr: vec![0.0; n], method: ShapleyMethod::Exact, evaluations: values.len(), budget: None })
}

/// Multilinear-extension estimate on a uniform grid of `q_points` values of
/// `q ∈ [0, 1]` with `samples` draws per point, integrated by the trapezoid
/// rule.
///
/// Each draw samples one inclusion vector `z` shared by all players; player
/// `i` uses `Eᵢ = z \ {i}`. Coalition values are cached, so repeated
/// coalitions cost one evaluation. `stderr` propagates the per-point sample
/// variance through the quadrature weights.
pub fn mle_shapley<G: CoalitionGame + ?Sized>(game: &G, q_points: usize, samples: usize, rng: &mut RngStream) -> Result<ShapleyResult> {
    let n = game.players();
    if n == 0 || n > 63 {
        return Err(Error::Config(format!("sampler supports 1..=63 players, got {n}")));
    }
    if q_points < 2 || samples < 1 {
        return Err(Error::Config(format!("need q_points >= 2 and samples >= 1, got {q_points}, {samples}")));
    }
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut value = |s: u64| -> Result<f64> {
        if let Some(&v) = cache.get(&s) {
            return Ok(v);
        }
        let v = game.value(s)?;
        cache.insert(s, v);
        Ok(v)
    };
    let h = 1.0 / (q_points - 1) as f64;
    let mut phi = vec![0.0; n];
    let mut var_acc = vec![0.0; n];
    let mut marginals = vec![0.0; samples * n];
    for j in 0..q_points {
        let q = j as f64 * h;
        let w = if j == 0 || j == q_points - 1 { h / 2.0 } else { h };
        for m in 0..samples {
            let mut z = 0u64;
            for i in 0..n {
                if rng.next_f64() < q {
                    z |= 1 << i;
                }
            }
            for i in 0..n {
                let bit = 1u64 << i;
                marginals[m * n + i] = value(z | bit)? - value(z & !bit)?;
            }
        }
        for i in 0..n {
            let mean = (0..samples).map(|m| marginals[m * n + i]).sum::<f64>() / samples as f64;
            let var = if samples > 1 {
                (0..samples).map(|m| (marginals[m * n + i] - mean).powi(2)).sum::<f64>() / (samples - 1) as f64
            } else {
                0.0
            };
            phi[i] += w * mean;
            var_acc[i] += w * w * var / samples as f64;
        }
    }
    Ok(ShapleyResult {
        phi,
        stderr: var_acc.into_iter().map(f64::sqrt).collect(),
        method: ShapleyMethod::Multilinear,
        evaluations: cache.len(),
        budget: Some((q_points, samples)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::streams;

    fn two_player() -> TableGame {
        // {} -> 0, {1} -> 1, {2} -> 2, {1,2} -> 4
        TableGame::new(2, vec![0.0, 1.0, 2.0, 4.0]).unwrap()
    }

    #[test]
    fn exact_two_player_table() {
        let r = exact_shapley(&two_player()).unwrap();
        assert_eq!(r.phi, vec![1.5, 2.5]);
        assert_eq!(r.stderr, vec![0.0, 0.0]);
    }

    #[test]
    fn exact_axioms() {
        let symmetric = TableGame::from_fn(5, |s| (s.count_ones() as f64).powi(2)).unwrap();
        let r = exact_shapley(&symmetric).unwrap();
        assert!(r.phi.iter().all(|p| (p - r.phi[0]).abs() < 1e-12));
        assert!((r.phi.iter().sum::<f64>() - 25.0).abs() < 1e-9);

        let w = [0.5, -1.0, 2.0, 0.25];
        let additive = TableGame::from_fn(4, |s| (0..4).filter(|i| s >> i & 1 == 1).map(|i| w[i]).sum()).unwrap();
        let r = exact_shapley(&additive).unwrap();
        for (p, wi) in r.phi.iter().zip(w) {
            assert!((p - wi).abs() < 1e-12);
        }

        // player 2 never changes the value
        let dummy = TableGame::from_fn(4, |s| {
            let s = s & !0b100;
            ((s * 2654435761) % 97) as f64 / 97.0
        })
        .unwrap();
        assert!(exact_shapley(&dummy).unwrap().phi[2].abs() < 1e-12);
    }

    #[test]
    fn exact_evaluates_each_coalition_once() {
        let g = TableGame::from_fn(6, |s| s as f64).unwrap();
        let counting = CountingGame::new(&g);
        exact_shapley(&counting).unwrap();
        assert_eq!(counting.calls(), 64);
    }

    #[test]
    fn exact_refuses_large_games() {
        let g = TableGame::from_fn(13, |_| 0.0).unwrap();
        assert!(matches!(exact_shapley(&g), Err(Error::Budget(_))));
    }

    #[test]
    fn sampler_on_two_player_table() {
        // e₁(q) = (1 − q)·1 + q·2 = 1 + q, integral 1.5
        let mut rng = RngStream::new(11, streams::SHAPLEY);
        let r = mle_shapley(&two_player(), 11, 256, &mut rng).unwrap();
        assert!((r.phi[0] - 1.5).abs() <= 3.0 * r.stderr[0], "{r:?}");
        assert!((r.phi[1] - 2.5).abs() <= 3.0 * r.stderr[1], "{r:?}");
    }

    #[test]
    fn sampler_is_exact_on_additive_games() {
        let w = [0.5, -1.0, 2.0];
        let additive = TableGame::from_fn(3, |s| (0..3).filter(|i| s >> i & 1 == 1).map(|i| w[i]).sum()).unwrap();
        let mut rng = RngStream::new(12, streams::SHAPLEY);
        let r = mle_shapley(&additive, 5, 16, &mut rng).unwrap();
        for ((p, e), wi) in r.phi.iter().zip(&r.stderr).zip(w) {
            assert!((p - wi).abs() < 1e-12);
            assert!(*e < 1e-12);
        }
    }

    #[test]
    fn sampler_is_reproducible() {
        let g = TableGame::from_fn(5, |s| ((s * 7919) % 31) as f64).unwrap();
        let a = mle_shapley(&g, 7, 20, &mut RngStream::new(1, streams::SHAPLEY)).unwrap();
        let b = mle_shapley(&g, 7, 20, &mut RngStream::new(1, streams::SHAPLEY)).unwrap();
        assert_eq!(a, b);
        assert!(mle_shapley(&g, 1, 20, &mut RngStream::new(1, 0)).is_err());
    }
}
