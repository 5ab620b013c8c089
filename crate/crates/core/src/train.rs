//! Adam optimization of masked adapters with cosine learning-rate decay,
//! evaluation, metric logging and checkpoint capture.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, init_adapters, AdapterSet, BaseNet, LayerMask};
use crate::ndcore::{softmax_cross_entropy, Matrix};
use crate::schedule::{streams, DropSchedule, RngStream, ScheduleMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment buffers and step count for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamParam {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
}

impl AdamParam {
    pub fn for_param(p: &Matrix) -> Self {
        AdamParam { m: Matrix::zeros(p.rows(), p.cols()), v: Matrix::zeros(p.rows(), p.cols()), t: 0 }
    }

    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix, lr: f64, s: &AdamSettings) -> Result<()> {
        if grad.shape() != param.shape() {
            return Err(Error::dim("adam", param.shape(), grad.shape()));
        }
        self.t += 1;
        let c1 = 1.0 - s.beta1.powi(self.t as i32);
        let c2 = 1.0 - s.beta2.powi(self.t as i32);
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
            *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + s.epsilon);
        }
        param.ensure_finite("adam update")
    }
}

/// Cycles through shuffled epochs of `0..n`, reshuffling whenever fewer than
/// `batch` indices remain.
#[derive(Debug, Clone)]
pub struct Batcher {
    perm: Vec<usize>,
    batch: usize,
    cursor: usize,
    rng: RngStream,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, rng: RngStream) -> Result<Self> {
        if batch == 0 || n < batch {
            return Err(Error::Config(format!("batch size {batch} needs between 1 and {n} samples")));
        }
        let mut b = Batcher { perm: (0..n).collect(), batch, cursor: 0, rng };
        b.perm.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.perm[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Cosine,
    Constant,
}

/// What happens to the Adam state of a layer that is dropped for a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InactiveAdam {
    /// Moments and step count untouched.
    Freeze,
    /// Moments untouched, step count still advanced (bias correction keeps
    /// pace with the global step).
    AdvanceCounter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub schedule: ScheduleMode,
    pub seed: u64,
    pub rank: usize,
    pub lora_scale: f64,
    pub adam: AdamSettings,
    pub lr_decay: LrDecay,
    pub inactive_adam: InactiveAdam,
    /// Extra checkpoint steps; `floor(T/4)` ("early") and `T` ("final") are
    /// always captured.
    pub checkpoint_steps: Vec<usize>,
    /// Evaluate train/test accuracy every this many steps (0 = only at
    /// checkpoints).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            total_steps: 500,
            batch_size: 32,
            schedule: ScheduleMode::Copra,
            seed: 0,
            rank: 2,
            lora_scale: 1.0,
            adam: AdamSettings::default(),
            lr_decay: LrDecay::Cosine,
            inactive_adam: InactiveAdam::Freeze,
            checkpoint_steps: Vec::new(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.total_steps < 4 {
            return Err(Error::Config(format!("need at least 4 steps, got {}", self.total_steps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(&s) = self.checkpoint_steps.iter().find(|&&s| s > self.total_steps) {
            return Err(Error::Config(format!("checkpoint step {s} beyond T = {}", self.total_steps)));
        }
        DropSchedule::new(self.total_steps, self.schedule)?;
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::Cosine => {
                let frac = t as f64 / self.total_steps as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn early_step(&self) -> usize {
        self.total_steps / 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub p: f64,
    pub active_layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl MetricLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,loss,p,active_layers\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.p, r.active_layers);
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = String::from("step,train_acc,test_acc\n");
        for r in &self.evals {
            let _ = writeln!(s, "{},{},{}", r.step, r.train_acc, r.test_acc);
        }
        s
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub label: String,
    pub step: usize,
    pub adapters: AdapterSet,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub log: MetricLog,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, label: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 512;

/// Accuracy (argmax, ties to the lowest class) and mean cross-entropy of the
/// logits produced by `logits_of` over `data`.
pub fn evaluate_with(data: &Dataset, mut logits_of: impl FnMut(&Matrix) -> Result<Matrix>) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let n = data.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (x, y) = data.batch(&idx)?;
        let logits = logits_of(&x)?;
        let (loss, _) = softmax_cross_entropy(&logits, &y)?;
        loss_sum += loss * idx.len() as f64;
        for (r, &label) in y.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(EvalResult { accuracy: correct as f64 / n as f64, loss: loss_sum / n as f64 })
}

pub fn evaluate(base: &BaseNet, adapters: &AdapterSet, mask: &LayerMask, data: &Dataset) -> Result<EvalResult> {
    evaluate_with(data, |x| model::forward(base, adapters, mask, x))
}

pub fn evaluate_base(base: &BaseNet, data: &Dataset) -> Result<EvalResult> {
    evaluate_with(data, |x| model::forward_base(base, x))
}

pub fn evaluate_dense(base: &BaseNet, deltas: &[Matrix], data: &Dataset) -> Result<EvalResult> {
    evaluate_with(data, |x| model::forward_dense(base, deltas, x))
}

struct LayerAdam {
    a: AdamParam,
    b: AdamParam,
}

/// Runs `config.total_steps` optimization steps of the adapters on `train`.
///
/// Each step draws one layer mask from the schedule, computes the loss on
/// the next shuffled batch, and applies Adam only to the active layers.
/// Inactive layers keep their factors and moment buffers unchanged.
pub fn train(base: &BaseNet, config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.dim() != base.input_dim() || test_set.dim() != base.input_dim() {
        return Err(Error::Config(format!(
            "dataset width {} does not match network input {}",
            train_set.dim(),
            base.input_dim()
        )));
    }
    let layers = base.layers();
    let total = config.total_steps;
    let schedule = DropSchedule::new(total, config.schedule)?;
    let mut adapters = init_adapters(base, config.rank, config.lora_scale, config.seed)?;
    adapters.meta.strategy = config.schedule.tag();
    let mut adam: Vec<LayerAdam> = adapters
        .adapters()
        .iter()
        .map(|ad| LayerAdam { a: AdamParam::for_param(ad.a()), b: AdamParam::for_param(ad.b()) })
        .collect();
    let mut mask_rng = RngStream::new(config.seed, streams::MASK);
    let mut batcher = Batcher::new(train_set.len(), config.batch_size, RngStream::new(config.seed, streams::SHUFFLE))?;

    let mut labels: BTreeMap<usize, String> = config.checkpoint_steps.iter().map(|&s| (s, format!("step{s}"))).collect();
    labels.insert(config.early_step(), "early".into());
    labels.insert(total, "final".into());

    let mut log = MetricLog::default();
    let mut checkpoints = Vec::new();
    let full = LayerMask::all(layers);
    let capture = |step: usize, adapters: &AdapterSet, log: &mut MetricLog, checkpoints: &mut Vec<Checkpoint>| -> Result<()> {
        let is_cp = labels.contains_key(&step);
        if is_cp || (config.eval_every > 0 && step.is_multiple_of(config.eval_every)) {
            log.evals.push(EvalRecord {
                step,
                train_acc: evaluate(base, adapters, &full, train_set)?.accuracy,
                test_acc: evaluate(base, adapters, &full, test_set)?.accuracy,
            });
        }
        if let Some(label) = labels.get(&step) {
            let mut snap = adapters.clone();
            snap.meta.step = step;
            checkpoints.push(Checkpoint { label: label.clone(), step, adapters: snap });
        }
        Ok(())
    };
    capture(0, &adapters, &mut log, &mut checkpoints)?;

    for t in 0..total {
        let mask = schedule.sample_mask(t, layers, &mut mask_rng)?;
        let (x, y) = train_set.batch(&batcher.next_batch())?;
        let (loss, grads) = model::loss_and_grads(base, &adapters, &mask, &x, &y).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step: t, loss: f64::NAN },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, loss });
        }
        let lr = config.lr_at(t);
        for (l, (ad, g)) in adapters.adapters_mut().iter_mut().zip(&grads).enumerate() {
            let st = &mut adam[l];
            if mask.is_active(l) {
                let diverged = |_| Error::Diverged { step: t, loss };
                st.a.step(ad.a_mut(), &g.a, lr, &config.adam).map_err(diverged)?;
                st.b.step(ad.b_mut(), &g.b, lr, &config.adam).map_err(diverged)?;
            } else if config.inactive_adam == InactiveAdam::AdvanceCounter {
                st.a.t += 1;
                st.b.t += 1;
            }
        }
        log.steps.push(StepRecord { step: t, loss, p: schedule.prob_at(t)?, active_layers: mask.active_count() });
        adapters.meta.step = t + 1;
        capture(t + 1, &adapters, &mut log, &mut checkpoints)?;
    }

    Ok(TrainOutcome { adapters, log, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, gen_spirals, pretrain_base, PretrainConfig};

    fn toy() -> (BaseNet, Dataset, Dataset) {
        let src = gen_blobs(3, 2, 40, 0.4, 1).unwrap();
        let base = pretrain_base(&[2, 8, 8, 3], &src, &PretrainConfig { steps: 100, ..Default::default() }).unwrap();
        let task = gen_spirals(3, 40, 0.1, 2).unwrap();
        let (tr, te) = task.split(0.25, 3).unwrap();
        (base, tr, te)
    }

    #[test]
    fn cosine_decay_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), cfg.learning_rate);
        assert!(cfg.lr_at(cfg.total_steps - 1) < 1e-4 * cfg.learning_rate);
        assert!((cfg.lr_at(250) - 0.5 * cfg.learning_rate).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Matrix::new(1, 2, vec![1.0, -1.0]).unwrap();
        let g = Matrix::new(1, 2, vec![0.3, -5.0]).unwrap();
        let mut st = AdamParam::for_param(&p);
        st.step(&mut p, &g, 0.1, &AdamSettings::default()).unwrap();
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(10, 3, RngStream::new(0, streams::SHUFFLE)).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(Batcher::new(2, 3, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn training_is_deterministic_and_leaves_base_frozen() {
        let (base, tr, te) = toy();
        let snapshot = base.clone();
        let cfg = TrainConfig { total_steps: 40, schedule: ScheduleMode::Full, seed: 3, eval_every: 10, ..Default::default() };
        let a = train(&base, &cfg, &tr, &te).unwrap();
        let b = train(&base, &cfg, &tr, &te).unwrap();
        assert_eq!(a.adapters, b.adapters);
        assert_eq!(a.log, b.log);
        assert_eq!(base, snapshot);
        assert!(a.log.steps.iter().all(|r| r.p == 1.0 && r.active_layers == 3));
    }

    #[test]
    fn checkpoints_include_early_and_final() {
        let (base, tr, te) = toy();
        let cfg = TrainConfig { total_steps: 41, checkpoint_steps: vec![0, 5], ..Default::default() };
        let out = train(&base, &cfg, &tr, &te).unwrap();
        let steps: Vec<(&str, usize)> = out.checkpoints.iter().map(|c| (c.label.as_str(), c.step)).collect();
        assert_eq!(steps, vec![("step0", 0), ("step5", 5), ("early", 10), ("final", 41)]);
        assert_eq!(out.checkpoint("final").unwrap().adapters, out.adapters);
        assert_eq!(out.checkpoint("early").unwrap().adapters.meta.step, 10);
    }

    #[test]
    fn copra_and_full_share_stage_two_masks() {
        let (base, tr, te) = toy();
        let mk = |mode| TrainConfig { total_steps: 40, schedule: mode, seed: 9, ..Default::default() };
        let copra = train(&base, &mk(ScheduleMode::Copra), &tr, &te).unwrap();
        let full = train(&base, &mk(ScheduleMode::Full), &tr, &te).unwrap();
        for (c, f) in copra.log.steps.iter().zip(&full.log.steps).skip(30) {
            assert_eq!(c.active_layers, 3);
            assert_eq!(f.active_layers, 3);
            assert_eq!(c.p, 1.0);
        }
        let sched = DropSchedule::new(40, ScheduleMode::Copra).unwrap();
        for r in &copra.log.steps {
            assert_eq!(r.p, sched.prob_at(r.step).unwrap());
        }
        assert_eq!(copra.log.steps[0].active_layers, 0);
    }

    #[test]
    fn inactive_layers_are_bitwise_untouched() {
        let (base, tr, te) = toy();
        // p = 1/2 for every step, replayed one step at a time through
        // prefix runs of increasing length.
        let mk = |steps| TrainConfig {
            total_steps: steps,
            schedule: ScheduleMode::FixedP(0.5),
            lr_decay: LrDecay::Constant,
            seed: 4,
            ..Default::default()
        };
        let runs: Vec<_> = (5..12).map(|t| train(&base, &mk(t), &tr, &te).unwrap()).collect();
        let mut checked = 0;
        for pair in runs.windows(2) {
            let (before, after) = (&pair[0], &pair[1]);
            let t = before.log.steps.len();
            let mut rng = RngStream::new(4, streams::MASK);
            let sched = DropSchedule::new(12, ScheduleMode::FixedP(0.5)).unwrap();
            let mut mask = LayerMask::none(3);
            for s in 0..=t {
                mask = sched.sample_mask(s, 3, &mut rng).unwrap();
            }
            for l in 0..3 {
                let (x, y) = (&before.adapters.adapters()[l], &after.adapters.adapters()[l]);
                if !mask.is_active(l) {
                    assert_eq!(x.a(), y.a());
                    assert_eq!(x.b(), y.b());
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn training_reduces_loss() {
        let (base, tr, te) = toy();
        let cfg = TrainConfig { total_steps: 300, learning_rate: 1e-2, schedule: ScheduleMode::Full, ..Default::default() };
        let out = train(&base, &cfg, &tr, &te).unwrap();
        let head: f64 = out.log.steps[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let tail: f64 = out.log.steps[280..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn evaluate_examples() {
        let (base, _, te) = toy();
        let fresh = init_adapters(&base, 2, 1.0, 0).unwrap();
        let a0 = evaluate_base(&base, &te).unwrap().accuracy;
        assert_eq!(evaluate(&base, &fresh, &LayerMask::all(3), &te).unwrap().accuracy, a0);
        // all-zero logits pick class 0
        let flat = evaluate_with(&te, |x| Ok(Matrix::zeros(x.rows(), 3))).unwrap();
        let zeros = te.labels().iter().filter(|&&y| y == 0).count() as f64 / te.len() as f64;
        assert_eq!(flat.accuracy, zeros);
        let onehot = {
            let labels = te.labels().to_vec();
            let mut cursor = 0usize;
            evaluate_with(&te, move |x| {
                let m = Matrix::from_fn(x.rows(), 3, |r, c| if labels[cursor + r] == c { 10.0 } else { 0.0 })?;
                cursor += x.rows();
                Ok(m)
            })
            .unwrap()
        };
        assert_eq!(onehot.accuracy, 1.0);
    }

    #[test]
    fn random_network_is_near_chance() {
        // binomial band: n = 2000, p = 1/4, sigma ~ 0.0097
        let data = gen_blobs(4, 2, 500, 1.0, 8).unwrap();
        let mut accs = Vec::new();
        for seed in 0..8 {
            let net = BaseNet::random(&[2, 16, 4], 100 + seed).unwrap();
            let shuffled: Vec<usize> = {
                let mut v: Vec<usize> = data.labels().to_vec();
                v.shuffle(&mut RngStream::new(seed, 0));
                v
            };
            let ds = Dataset::new(data.features().clone(), shuffled, 4, "rand", 0).unwrap();
            accs.push(evaluate_base(&net, &ds).unwrap().accuracy);
        }
        for a in accs {
            assert!((a - 0.25).abs() < 3.0 * (0.25f64 * 0.75 / 2000.0).sqrt(), "{a}");
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (base, tr, te) = toy();
        let cfg = TrainConfig {
            total_steps: 200,
            learning_rate: 1e200,
            schedule: ScheduleMode::Full,
            lr_decay: LrDecay::Constant,
            ..Default::default()
        };
        match train(&base, &cfg, &tr, &te) {
            Err(Error::Diverged { step, .. }) => assert!(step < 200),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log.steps.len())),
        }
    }
}
