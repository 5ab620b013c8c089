//! Progressive drop-probability schedule, per-step Bernoulli layer masks, and
//! the counter-based random streams every stochastic component draws from.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerMask;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream identifiers. Each consumer of randomness owns one so that no
/// consumer's draw count can perturb another's.
pub mod streams {
    pub const ADAPTER_INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const BASE_INIT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SHAPLEY: u64 = 7;
    pub const SHARD: u64 = 8;
}

/// A SplitMix64-style counter-based generator: output number `counter` of
/// stream `stream_id` under `global_seed` is a pure function of the triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    global_seed: u64,
    stream_id: u64,
    counter: u64,
    key: u64,
}

impl RngStream {
    pub fn new(global_seed: u64, stream_id: u64) -> Self {
        Self::at_counter(global_seed, stream_id, 0)
    }

    pub fn at_counter(global_seed: u64, stream_id: u64, counter: u64) -> Self {
        let key = mix64(global_seed ^ mix64(stream_id.wrapping_mul(GOLDEN_GAMMA).wrapping_add(0x632b_e59b_d9b4_e019)));
        RngStream { global_seed, stream_id, counter, key }
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Output at an arbitrary counter position without advancing.
    pub fn peek(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let out = self.peek(self.counter);
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `p = min(4t / 3T, 1)`
    Copra,
    FixedP(f64),
    /// Standard LoRA: every layer active at every step.
    Full,
}

impl ScheduleMode {
    pub fn tag(&self) -> String {
        match self {
            ScheduleMode::Copra => "copra".into(),
            ScheduleMode::Full => "lora".into(),
            ScheduleMode::FixedP(p) => format!("fixed_p{p}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropSchedule {
    total_steps: usize,
    mode: ScheduleMode,
}

impl DropSchedule {
    pub fn new(total_steps: usize, mode: ScheduleMode) -> Result<Self> {
        match mode {
            ScheduleMode::Copra if total_steps < 4 => {
                return Err(Error::Config(format!("copra schedule needs T >= 4, got {total_steps}")))
            }
            ScheduleMode::FixedP(p) if !(0.0..=1.0).contains(&p) => {
                return Err(Error::Config(format!("fixed drop probability {p} outside [0, 1]")))
            }
            _ if total_steps == 0 => return Err(Error::Config("schedule needs T >= 1".into())),
            _ => {}
        }
        Ok(DropSchedule { total_steps, mode })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    /// First step of the all-active stage, `ceil(3T / 4)`.
    pub fn stage_two_start(&self) -> usize {
        (3 * self.total_steps).div_ceil(4)
    }

    pub fn prob_at(&self, t: usize) -> Result<f64> {
        if t >= self.total_steps {
            return Err(Error::Index(format!("step {t} outside schedule of {} steps", self.total_steps)));
        }
        Ok(match self.mode {
            ScheduleMode::Copra => (4.0 * t as f64 / (3.0 * self.total_steps as f64)).min(1.0),
            ScheduleMode::FixedP(p) => p,
            ScheduleMode::Full => 1.0,
        })
    }

    /// Draws one independent Bernoulli(`prob_at(t)`) activation per layer,
    /// advancing `rng` by exactly `layers` draws.
    pub fn sample_mask(&self, t: usize, layers: usize, rng: &mut RngStream) -> Result<LayerMask> {
        let p = self.prob_at(t)?;
        let bits = (0..layers).map(|_| rng.next_f64() < p).collect();
        Ok(LayerMask::new(bits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copra_probability_examples() {
        let s = DropSchedule::new(1000, ScheduleMode::Copra).unwrap();
        assert_eq!(s.prob_at(0).unwrap(), 0.0);
        assert_eq!(s.prob_at(750).unwrap(), 1.0);
        assert_eq!(s.prob_at(500).unwrap(), 2.0 / 3.0);
        assert_eq!(s.prob_at(749).unwrap(), 4.0 * 749.0 / 3000.0);
        assert!(s.prob_at(1000).is_err());
    }

    #[test]
    fn stage_two_boundary_uses_ceiling() {
        for t_total in 4..200usize {
            let s = DropSchedule::new(t_total, ScheduleMode::Copra).unwrap();
            let start = s.stage_two_start();
            #[allow(clippy::manual_div_ceil)] // independent formula on purpose
            let want = (3 * t_total + 3) / 4;
            assert_eq!(start, want);
            for t in 0..t_total {
                let p = s.prob_at(t).unwrap();
                if t >= start {
                    assert_eq!(p, 1.0, "T={t_total} t={t}");
                } else {
                    assert!(p < 1.0, "T={t_total} t={t}");
                }
            }
            assert!(start < t_total);
        }
    }

    #[test]
    fn other_modes() {
        let full = DropSchedule::new(10, ScheduleMode::Full).unwrap();
        assert!((0..10).all(|t| full.prob_at(t).unwrap() == 1.0));
        let fixed = DropSchedule::new(10, ScheduleMode::FixedP(0.25)).unwrap();
        assert_eq!(fixed.prob_at(9).unwrap(), 0.25);
        assert!(DropSchedule::new(3, ScheduleMode::Copra).is_err());
        assert!(DropSchedule::new(3, ScheduleMode::Full).is_ok());
        assert!(DropSchedule::new(10, ScheduleMode::FixedP(1.5)).is_err());
    }

    #[test]
    fn masks_at_the_extremes() {
        let s = DropSchedule::new(100, ScheduleMode::Copra).unwrap();
        let mut rng = RngStream::new(5, streams::MASK);
        for _ in 0..100 {
            assert_eq!(s.sample_mask(0, 6, &mut rng).unwrap().active_count(), 0);
            assert_eq!(s.sample_mask(75, 6, &mut rng).unwrap().active_count(), 6);
        }
    }

    #[test]
    fn mask_consumes_one_draw_per_layer() {
        let s = DropSchedule::new(100, ScheduleMode::Copra).unwrap();
        let mut rng = RngStream::new(1, streams::MASK);
        s.sample_mask(40, 7, &mut rng).unwrap();
        assert_eq!(rng.counter(), 7);
        let mut a = RngStream::at_counter(9, 2, 123);
        let mut b = RngStream::at_counter(9, 2, 123);
        assert_eq!(s.sample_mask(50, 6, &mut a).unwrap(), s.sample_mask(50, 6, &mut b).unwrap());
    }

    #[test]
    fn empirical_activation_rate_at_two_thirds() {
        let s = DropSchedule::new(1000, ScheduleMode::Copra).unwrap();
        let mut rng = RngStream::new(2024, streams::MASK);
        let hits: usize = (0..10_000).map(|_| s.sample_mask(500, 1, &mut rng).unwrap().active_count()).sum();
        let mean = hits as f64 / 10_000.0;
        assert!((mean - 2.0 / 3.0).abs() < 0.015, "mean {mean}");
    }

    #[test]
    fn streams_are_independent_of_call_order() {
        let mut a = RngStream::new(3, streams::MASK);
        let mut b = RngStream::new(3, streams::SHUFFLE);
        let a0 = a.next_u64();
        let b0 = b.next_u64();
        assert_ne!(a0, b0);
        assert_eq!(RngStream::new(3, streams::MASK).peek(0), a0);
        assert_eq!(RngStream::at_counter(3, streams::SHUFFLE, 0).next_u64(), b0);
    }
}
