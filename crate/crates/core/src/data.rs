//! Synthetic classification tasks, CSV ingestion, base-network pretraining
//! and the on-disk checkpoint format.
//!
//! Checkpoints are pretty-printed JSON. Floats are written in the shortest
//! decimal form that parses back to the identical `f64` (and parsed with a
//! correctly rounded parser), so `load(save(x)) == x` bit for bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterMeta, AdapterSet, BaseNet, LoraAdapter};
use crate::ndcore::Matrix;
use crate::schedule::{streams, RngStream};
use crate::train::{evaluate_base, AdamParam, AdamSettings, Batcher};

pub const FORMAT_VERSION: u32 = 1;
pub const FLOAT_ENCODING: &str = "shortest round-trip decimal (IEEE-754 binary64, bit-exact on reload)";

/// Outer radius of the spiral arms.
pub const SPIRAL_RADIUS: f64 = 3.0;
/// Revolutions each spiral arm completes between the center and the rim.
///
/// The networks here have no biases, so they are positively homogeneous and
/// classify a 2-D point by its angle alone. Arms that sweep more than `1/K`
/// of a turn share angles with a neighbour and cannot be told apart; a
/// quarter turn is the limit for four arms.
pub const SPIRAL_TURNS: f64 = 0.25;
/// Radius of the outermost ring; inner rings are evenly spaced inside it.
pub const RING_RADIUS: f64 = 3.0;
/// Distance of blob centers from the origin.
pub const BLOB_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    pub name: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, name: impl Into<String>, seed: u64) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::dim("Dataset", features.shape(), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index(format!("label {bad} with {num_classes} classes")));
        }
        Ok(Dataset { features, labels, num_classes, name: name.into(), seed })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Matrix, Vec<usize>)> {
        let x = self.features.select_rows(idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let (x, y) = self.batch(idx)?;
        Dataset::new(x, y, self.num_classes, name, self.seed)
    }

    /// Disjoint random `(train, test)` split; the permutation comes from its
    /// own stream under `split_seed`.
    pub fn split(&self, test_fraction: f64, split_seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
            return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
        }
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= self.len() {
            return Err(Error::Config(format!("cannot split {} samples with fraction {test_fraction}", self.len())));
        }
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut RngStream::new(split_seed, streams::SPLIT));
        let (test_idx, train_idx) = perm.split_at(n_test);
        Ok((
            self.subset(train_idx, format!("{}/train", self.name))?,
            self.subset(test_idx, format!("{}/test", self.name))?,
        ))
    }
}

fn check_counts(k: usize, n_per_class: usize) -> Result<()> {
    if k < 2 || n_per_class < 1 {
        return Err(Error::Config(format!("need K >= 2 and n_per_class >= 1, got K={k}, n={n_per_class}")));
    }
    Ok(())
}

fn check_noise(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
    }
    Ok(())
}

fn gaussian(rng: &mut RngStream) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian clusters around `K` random directions scaled to
/// [`BLOB_RADIUS`], with per-coordinate standard deviation `spread`.
pub fn gen_blobs(k: usize, d: usize, n_per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    check_counts(k, n_per_class)?;
    check_noise("spread", spread)?;
    if d == 0 {
        return Err(Error::Config("blob dimension must be positive".into()));
    }
    let mut rng = RngStream::new(seed, streams::DATA);
    let mut centers = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        c.iter_mut().for_each(|v| *v *= BLOB_RADIUS / norm);
        centers.push(c);
    }
    let mut data = Vec::with_capacity(k * n_per_class * d);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(c.iter().map(|&m| m + spread * gaussian(&mut rng)));
            labels.push(class);
        }
    }
    Dataset::new(Matrix::new(k * n_per_class, d, data)?, labels, k, "blobs", seed)
}

/// `K` interleaved Archimedean arms in the plane: radius grows linearly with
/// the arm parameter while the angle sweeps [`SPIRAL_TURNS`] revolutions.
pub fn gen_spirals(k: usize, n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_counts(k, n_per_class)?;
    check_noise("noise", noise)?;
    let mut rng = RngStream::new(seed, streams::DATA);
    let mut data = Vec::with_capacity(2 * k * n_per_class);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for class in 0..k {
        let offset = std::f64::consts::TAU * class as f64 / k as f64;
        for i in 0..n_per_class {
            let t = (i as f64 + 0.5) / n_per_class as f64;
            let r = SPIRAL_RADIUS * t;
            let theta = offset + std::f64::consts::TAU * SPIRAL_TURNS * t;
            data.push(r * theta.cos() + noise * gaussian(&mut rng));
            data.push(r * theta.sin() + noise * gaussian(&mut rng));
            labels.push(class);
        }
    }
    Dataset::new(Matrix::new(k * n_per_class, 2, data)?, labels, k, "spirals", seed)
}

/// `K` concentric circles with radii `(c + 1) · RING_RADIUS / K` and radial
/// Gaussian noise.
///
/// The class depends on the radius only, which a bias-free network cannot
/// see (see [`SPIRAL_TURNS`]); expect chance accuracy from such models.
pub fn gen_rings(k: usize, n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_counts(k, n_per_class)?;
    check_noise("noise", noise)?;
    let mut rng = RngStream::new(seed, streams::DATA);
    let mut data = Vec::with_capacity(2 * k * n_per_class);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for class in 0..k {
        let radius = (class + 1) as f64 * RING_RADIUS / k as f64;
        for _ in 0..n_per_class {
            let theta = std::f64::consts::TAU * rng.next_f64();
            let r = radius + noise * gaussian(&mut rng);
            data.push(r * theta.cos());
            data.push(r * theta.sin());
            labels.push(class);
        }
    }
    Dataset::new(Matrix::new(k * n_per_class, 2, data)?, labels, k, "rings", seed)
}

/// Source task for the base network: 4 blobs in the plane.
pub fn source_task() -> Result<Dataset> {
    gen_blobs(4, 2, 250, 0.5, 6)
}

/// First target task: 4-arm spirals.
pub fn task_a() -> Result<Dataset> {
    let mut d = gen_spirals(4, 250, 0.15, 7)?;
    d.name = "task_a".into();
    Ok(d)
}

/// Second target task: 4 concentric rings.
pub fn task_b() -> Result<Dataset> {
    let mut d = gen_rings(4, 250, 0.1, 11)?;
    d.name = "task_b".into();
    Ok(d)
}

/// Parses rows of `d` decimal features followed by one integer label.
/// `num_classes` defaults to `max label + 1`.
pub fn parse_csv(text: &str, has_header: bool, num_classes: Option<usize>, name: &str) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (line_no, line) in text.lines().enumerate() {
        let row = line_no + 1;
        if (has_header && line_no == 0) || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Ingest { row, col: 1, msg: "need at least one feature and a label".into() });
        }
        let d = fields.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(Error::Ingest { row, col: fields.len(), msg: format!("expected {} columns, found {}", w + 1, d + 1) })
            }
            _ => {}
        }
        for (c, f) in fields[..d].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Ingest { row, col: c + 1, msg: format!("invalid number {f:?}") })?;
            if !v.is_finite() {
                return Err(Error::Ingest { row, col: c + 1, msg: "non-finite value".into() });
            }
            data.push(v);
        }
        let label: usize = fields[d]
            .parse()
            .map_err(|_| Error::Ingest { row, col: d + 1, msg: format!("invalid label {:?}", fields[d]) })?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(Error::Ingest { row, col: d + 1, msg: format!("label {label} with {k} classes") });
            }
        }
        labels.push(label);
    }
    let d = width.ok_or_else(|| Error::Ingest { row: 0, col: 0, msg: "no data rows".into() })?;
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1)).max(1);
    Dataset::new(Matrix::new(labels.len(), d, data)?, labels, k, name, 0)
}

pub fn load_csv(path: &Path, has_header: bool, num_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    parse_csv(&text, has_header, num_classes, &name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub test_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, learning_rate: 1e-3, batch_size: 32, seed: 0, split_seed: 1, test_fraction: 0.2 }
    }
}

/// Default base architecture: five hidden layers of width 32.
pub fn default_dims(input: usize, classes: usize) -> Vec<usize> {
    vec![input, 32, 32, 32, 32, 32, classes]
}

/// Full-parameter Adam training of a fresh network on `source`. The returned
/// network records its accuracy on the held-out part of `source`.
pub fn pretrain_base(dims: &[usize], source: &Dataset, cfg: &PretrainConfig) -> Result<BaseNet> {
    if dims.first() != Some(&source.dim()) {
        return Err(Error::Config(format!("input width {:?} does not match feature width {}", dims.first(), source.dim())));
    }
    if dims.last() != Some(&source.num_classes()) {
        return Err(Error::Config(format!("output width {:?} does not match {} classes", dims.last(), source.num_classes())));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs lr > 0 and batch_size >= 1".into()));
    }
    let (train, test) = source.split(cfg.test_fraction, cfg.split_seed)?;
    let mut net = BaseNet::random(dims, cfg.seed)?;
    let adam = AdamSettings::default();
    let mut states: Vec<AdamParam> = net.weights().iter().map(AdamParam::for_param).collect();
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, RngStream::new(cfg.seed, streams::SHUFFLE))?;
    for step in 0..cfg.steps {
        let (x, y) = train.batch(&batcher.next_batch())?;
        let (loss, grads) = crate::model::base_loss_and_grads(&net, &x, &y).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        for ((w, g), st) in net.weights_mut().iter_mut().zip(&grads).zip(&mut states) {
            st.step(w, g, cfg.learning_rate, &adam)?;
        }
    }
    let acc = evaluate_base(&net, &test)?.accuracy;
    Ok(net.with_source_accuracy(acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    float_encoding: String,
    kind: String,
    dims: Vec<usize>,
    rank: usize,
    lora_scale: f64,
    strategy: String,
    step: usize,
    rng_seed: u64,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseFile {
    format_version: u32,
    float_encoding: String,
    kind: String,
    dims: Vec<usize>,
    source_accuracy: Option<f64>,
    weights: Vec<Vec<Vec<f64>>>,
}

fn check_header(version: u32, kind: &str, expected: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format_version {version} is not supported (expected {FORMAT_VERSION})")));
    }
    if kind != expected {
        return Err(Error::Checkpoint(format!("file holds a {kind:?}, expected {expected:?}")));
    }
    Ok(())
}

pub fn checkpoint_to_string(adapters: &AdapterSet, dims: &[usize]) -> Result<String> {
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        float_encoding: FLOAT_ENCODING.into(),
        kind: "adapters".into(),
        dims: dims.to_vec(),
        rank: adapters.rank(),
        lora_scale: adapters.scale(),
        strategy: adapters.meta.strategy.clone(),
        step: adapters.meta.step,
        rng_seed: adapters.meta.seed,
        layers: adapters
            .adapters()
            .iter()
            .map(|ad| LayerFile { a: ad.a().to_rows(), b: ad.b().to_rows() })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

/// Parses a checkpoint, returning the adapters and the base dims they were
/// trained against.
pub fn checkpoint_from_str(text: &str) -> Result<(AdapterSet, Vec<usize>)> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    check_header(file.format_version, &file.kind, "adapters")?;
    if file.layers.len() + 1 != file.dims.len() {
        return Err(Error::Checkpoint(format!("{} layers for dims {:?}", file.layers.len(), file.dims)));
    }
    let mut adapters = Vec::with_capacity(file.layers.len());
    for (l, layer) in file.layers.into_iter().enumerate() {
        let a = Matrix::from_rows(&layer.a)?;
        let b = Matrix::from_rows(&layer.b)?;
        if a.rows() != file.rank || b.shape() != (file.dims[l + 1], file.rank) || a.cols() != file.dims[l] {
            return Err(Error::Checkpoint(format!("layer {l} shapes {:?}/{:?} disagree with header", a.shape(), b.shape())));
        }
        adapters.push(LoraAdapter::new(a, b, file.lora_scale)?);
    }
    let meta = AdapterMeta { seed: file.rng_seed, strategy: file.strategy, step: file.step };
    Ok((AdapterSet::new(adapters, meta)?, file.dims))
}

pub fn save_checkpoint(path: &Path, adapters: &AdapterSet, dims: &[usize]) -> Result<()> {
    fs::write(path, checkpoint_to_string(adapters, dims)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AdapterSet, Vec<usize>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    checkpoint_from_str(&text)
}

pub fn base_to_string(base: &BaseNet) -> Result<String> {
    let file = BaseFile {
        format_version: FORMAT_VERSION,
        float_encoding: FLOAT_ENCODING.into(),
        kind: "base".into(),
        dims: base.dims().to_vec(),
        source_accuracy: base.source_accuracy(),
        weights: base.weights().iter().map(Matrix::to_rows).collect(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn base_from_str(text: &str) -> Result<BaseNet> {
    let file: BaseFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed base file: {e}")))?;
    check_header(file.format_version, &file.kind, "base")?;
    let weights = file.weights.iter().map(|w| Matrix::from_rows(w)).collect::<Result<Vec<_>>>()?;
    let net = BaseNet::new(file.dims, weights)?;
    Ok(match file.source_accuracy {
        Some(a) => net.with_source_accuracy(a),
        None => net,
    })
}

pub fn save_base(path: &Path, base: &BaseNet) -> Result<()> {
    fs::write(path, base_to_string(base)?)?;
    Ok(())
}

pub fn load_base(path: &Path) -> Result<BaseNet> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    base_from_str(&text)
}

/// Normal draws with the given standard deviation; exposed for callers that
/// want to perturb adapters reproducibly.
pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Result<Matrix> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_adapters;

    #[test]
    fn generators_are_deterministic_and_balanced() {
        for ds in [
            gen_blobs(3, 4, 20, 0.3, 5).unwrap(),
            gen_spirals(4, 25, 0.15, 7).unwrap(),
            gen_rings(5, 10, 0.1, 11).unwrap(),
        ] {
            assert!(ds.class_histogram().iter().all(|&c| c == ds.len() / ds.num_classes()));
        }
        assert_eq!(gen_spirals(4, 25, 0.15, 7).unwrap(), gen_spirals(4, 25, 0.15, 7).unwrap());
        assert_ne!(gen_spirals(4, 25, 0.15, 7).unwrap(), gen_spirals(4, 25, 0.15, 8).unwrap());
        assert_eq!(gen_rings(4, 9, 0.1, 1).unwrap(), gen_rings(4, 9, 0.1, 1).unwrap());
        assert_eq!(gen_blobs(4, 2, 9, 0.1, 1).unwrap(), gen_blobs(4, 2, 9, 0.1, 1).unwrap());
    }

    #[test]
    fn generator_argument_errors() {
        assert!(gen_blobs(1, 2, 10, 0.1, 0).is_err());
        assert!(gen_spirals(3, 0, 0.1, 0).is_err());
        assert!(gen_rings(3, 5, -1.0, 0).is_err());
    }

    #[test]
    fn zero_spread_blobs_sit_on_the_sphere() {
        let ds = gen_blobs(4, 3, 5, 0.0, 2).unwrap();
        for r in 0..ds.len() {
            let n = ds.features().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - BLOB_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let ds = gen_blobs(4, 2, 50, 0.5, 1).unwrap();
        let (tr, te) = ds.split(0.2, 9).unwrap();
        assert_eq!((tr.len(), te.len()), (160, 40));
        let key = |d: &Dataset| (0..d.len()).map(|i| d.features().row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        let train_rows = key(&tr);
        assert!(key(&te).iter().all(|row| !train_rows.contains(row)));
        assert_eq!(ds.split(0.2, 9).unwrap(), (tr, te));
    }

    #[test]
    fn csv_single_row() {
        let ds = parse_csv("1.0,2.0,1", false, None, "x").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), &[1]);
        assert_eq!(ds.features().row(0), &[1.0, 2.0]);
    }

    #[test]
    fn csv_errors_carry_location() {
        let err = parse_csv("x,y,label\n1,2,0\n1,oops,1\n", true, None, "x").unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 3, col: 2, .. }), "{err}");
        let err = parse_csv("1,2,0\n1,2\n", false, None, "x").unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 2, .. }), "{err}");
        let err = parse_csv("1,2,7\n", false, Some(3), "x").unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 1, col: 3, .. }), "{err}");
        assert!(parse_csv("", false, None, "x").is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let base = BaseNet::random(&[2, 8, 8, 4], 3).unwrap();
        let mut set = init_adapters(&base, 2, 1.0, 4).unwrap();
        let mut rng = RngStream::new(5, 0);
        for ad in set.adapters_mut() {
            let (m, r) = ad.b().shape();
            *ad.b_mut() = normal_matrix(m, r, 1e-3, &mut rng).unwrap();
        }
        set.meta = AdapterMeta { seed: u64::MAX, strategy: "copra".into(), step: 17 };
        let text = checkpoint_to_string(&set, base.dims()).unwrap();
        let (back, dims) = checkpoint_from_str(&text).unwrap();
        assert_eq!(back, set);
        assert_eq!(dims, base.dims());
        assert_eq!(checkpoint_to_string(&back, &dims).unwrap(), text);

        let base_text = base_to_string(&base.clone().with_source_accuracy(0.975)).unwrap();
        let base_back = base_from_str(&base_text).unwrap();
        assert_eq!(base_back.weights(), base.weights());
        assert_eq!(base_to_string(&base_back).unwrap(), base_text);
    }

    #[test]
    fn checkpoint_version_and_kind_are_checked() {
        let base = BaseNet::random(&[2, 4, 3], 3).unwrap();
        let set = init_adapters(&base, 1, 1.0, 4).unwrap();
        let text = checkpoint_to_string(&set, base.dims()).unwrap();
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(checkpoint_from_str(&bumped), Err(Error::Checkpoint(_))));
        assert!(matches!(base_from_str(&text), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn pretraining_zero_steps_is_random_init() {
        let ds = gen_blobs(4, 2, 50, 0.5, 1).unwrap();
        let cfg = PretrainConfig { steps: 0, ..Default::default() };
        let net = pretrain_base(&[2, 8, 4], &ds, &cfg).unwrap();
        assert_eq!(net.weights(), BaseNet::random(&[2, 8, 4], cfg.seed).unwrap().weights());
        assert!(net.source_accuracy().is_some());
        assert!(pretrain_base(&[3, 8, 4], &ds, &cfg).is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let ds = gen_blobs(4, 2, 40, 0.5, 1).unwrap();
        let cfg = PretrainConfig { steps: 50, ..Default::default() };
        let a = pretrain_base(&[2, 8, 4], &ds, &cfg).unwrap();
        let b = pretrain_base(&[2, 8, 4], &ds, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
