use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde_json::{json, Value};

use copra_core::connect::{barrier_with, interpolation_sweep, uniform_grid, MergeMethod, CURVE_CSV_HEADER};
use copra_core::data::checkpoint_to_string;
use copra_core::merge::{self, align, align_objective, fuse, mix_stacked, MergeWeights};
use copra_core::prune::{structured_prune, unstructured_prune, zero_fraction, SparsitySpec};
use copra_core::schedule::{streams, RngStream};
use copra_core::shapley::{exact_shapley, mle_shapley, ModelGame, ShapleyResult, SHAPLEY_CSV_HEADER};
use copra_core::train::evaluate;
use copra_core::{AdapterSet, BaseNet, LayerMask};

use crate::config::{load_adapters, load_split, InterpCmd, MergeCmd, PruneCmd, ShapleyChoice, ShapleyCmd};
use crate::output::{mean, RunDir};

fn label_of(path: &Path) -> String {
    path.display().to_string()
}

fn load_all(paths: &[PathBuf], base: &BaseNet) -> Result<Vec<AdapterSet>> {
    paths.iter().map(|p| load_adapters(p, base)).collect()
}

/// Merges `sets` with `method`. Alignment maps every set onto the first.
pub fn merge_sets(sets: &[AdapterSet], w: &MergeWeights, method: MergeMethod) -> Result<AdapterSet> {
    let merged = match method {
        MergeMethod::Fusion => fuse(&sets.iter().collect::<Vec<_>>(), w)?,
        MergeMethod::Mixture => mix_stacked(&sets.iter().collect::<Vec<_>>(), w)?,
        MergeMethod::FusionAlign => {
            let mut aligned = vec![sets[0].clone()];
            for s in &sets[1..] {
                aligned.push(align(&sets[0], s)?.adapters);
            }
            fuse(&aligned.iter().collect::<Vec<_>>(), w)?
        }
    };
    Ok(merged)
}

pub fn cmd_merge(cfg: &MergeCmd, out: &Path) -> Result<Value> {
    if cfg.adapters.len() < 2 {
        bail!("merge needs at least two adapter checkpoints, got {}", cfg.adapters.len());
    }
    let base = cfg.base.load()?;
    let sets = load_all(&cfg.adapters, &base)?;
    let weights = match &cfg.weights {
        Some(w) => MergeWeights::new(w.clone())?,
        None => MergeWeights::uniform(sets.len())?,
    };
    let (_, test_set) = load_split(&cfg.task, &cfg.split)?;
    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;

    let merged = merge_sets(&sets, &weights, cfg.method)?;
    if cfg.method != MergeMethod::Mixture {
        dir.write("merged.json", &checkpoint_to_string(&merged, base.dims())?)?;
    }
    let mask = LayerMask::all(base.layers());
    let mut csv = String::from("model,weight,accuracy,loss\n");
    let mut inputs = Vec::new();
    for ((set, path), c) in sets.iter().zip(&cfg.adapters).zip(weights.coefficients()) {
        let r = evaluate(&base, set, &mask, &test_set)?;
        let _ = writeln!(csv, "{},{c},{},{}", label_of(path), r.accuracy, r.loss);
        inputs.push(r.accuracy);
    }
    let m = evaluate(&base, &merged, &mask, &test_set)?;
    let _ = writeln!(csv, "merged:{},,{},{}", cfg.method.name(), m.accuracy, m.loss);
    dir.write("results.csv", &csv)?;

    let mut summary = json!({
        "method": cfg.method.name(),
        "weights": weights.coefficients(),
        "input_accuracy": inputs,
        "mean_input_accuracy": mean(&inputs),
        "merged_accuracy": m.accuracy,
        "merged_loss": m.loss,
    });
    if sets.len() == 2 {
        let c = weights.coefficients()[0];
        let gap = merge::fusion_mixture_gap(&sets[0], &sets[1], c)?;
        let closed = merge::gap_closed_form(&sets[0], &sets[1], c)?;
        let bound = merge::product_bound(&sets[0], &sets[1], c)?;
        let aligned = align(&sets[0], &sets[1])?;
        let before = align_objective(&sets[0], &sets[1], &merge::AlignMap::identity(base.layers(), sets[0].rank()))?;
        let after = align_objective(&sets[0], &sets[1], &aligned.map)?;
        let diag = merge::upper_bound(&sets[0], &sets[1], c, &aligned.map)?;
        let fused = fuse(&[&sets[0], &sets[1]], &weights)?.effective_deltas()?;
        let mixed = merge::mix(&[&sets[0], &sets[1]], &weights)?;
        let mut g = String::from("layer,gap,product_bound,identity_residual,align_objective_before,align_objective_after,sum_form_diagnostic\n");
        for l in 0..base.layers() {
            let residual = fused[l].sub(&mixed[l])?.sub(&closed[l])?.frobenius_norm();
            let _ = writeln!(g, "{},{},{},{residual},{},{},{}", l + 1, gap[l], bound[l], before[l], after[l], diag[l]);
        }
        dir.write("gap.csv", &g)?;
        summary["align_fallback_layers"] = json!(aligned.fallback_layers.iter().map(|l| l + 1).collect::<Vec<_>>());
    }
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}

pub fn cmd_interp(cfg: &InterpCmd, out: &Path) -> Result<Value> {
    if cfg.pairs.is_empty() || cfg.methods.is_empty() {
        bail!("interp needs at least one pair and one method");
    }
    let base = cfg.base.load()?;
    let grid = uniform_grid(cfg.grid_points)?;
    let (_, test_set) = load_split(&cfg.task, &cfg.split)?;
    let loaded = cfg
        .pairs
        .iter()
        .map(|p| Ok((load_adapters(&p.a1, &base)?, load_adapters(&p.a2, &base)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;

    let mut curves = String::from(CURVE_CSV_HEADER);
    let mut barriers = String::from("seed_pair,method,barrier,acc_c0,acc_c1,min_accuracy\n");
    let mut per_method = serde_json::Map::new();
    for &method in &cfg.methods {
        let mut values = Vec::new();
        let mut rows = Vec::new();
        for (i, (pair, (a1, a2))) in cfg.pairs.iter().zip(&loaded).enumerate() {
            let label = pair.label.clone().unwrap_or_else(|| format!("pair{i}"));
            let curve = interpolation_sweep(&base, a1, a2, method, &grid, &test_set)?;
            let b = barrier_with(&curve, cfg.metric);
            curves.push_str(&curve.csv_rows(&label));
            let lo = curve.accuracy.iter().copied().fold(f64::INFINITY, f64::min);
            let (first, last) = (curve.accuracy[0], curve.accuracy[curve.accuracy.len() - 1]);
            let _ = writeln!(barriers, "{label},{},{b},{first},{last},{lo}", method.name());
            values.push(b);
            rows.push(json!({ "seed_pair": label, "barrier": b, "endpoints": [first, last], "accuracy": curve.accuracy }));
        }
        per_method.insert(method.name().to_string(), json!({ "mean_barrier": mean(&values), "pairs": rows }));
    }
    dir.write("curve.csv", &curves)?;
    dir.write("barriers.csv", &barriers)?;
    let summary = json!({ "grid": grid, "metric": cfg.metric, "methods": per_method });
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}

/// Layers where the sampler estimate is within `k` standard errors of the
/// exact value.
pub fn within_stderr(sampled: &ShapleyResult, exact: &ShapleyResult, k: f64) -> Vec<bool> {
    sampled.phi.iter().zip(&sampled.stderr).zip(&exact.phi).map(|((s, e), x)| (s - x).abs() <= k * e).collect()
}

pub fn cmd_shapley(cfg: &ShapleyCmd, out: &Path) -> Result<Value> {
    if cfg.adapters.is_empty() {
        bail!("shapley needs at least one adapter checkpoint");
    }
    let base = cfg.base.load()?;
    let sets = load_all(&cfg.adapters, &base)?;
    let (_, test_set) = load_split(&cfg.task, &cfg.split)?;
    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;

    let mut csv = String::from("checkpoint,");
    csv.push_str(SHAPLEY_CSV_HEADER);
    let mut reports = Vec::new();
    for (set, path) in sets.iter().zip(&cfg.adapters) {
        let game = ModelGame { base: &base, adapters: set, data: &test_set, metric: cfg.metric };
        let label = label_of(path);
        let exact = match cfg.method {
            ShapleyChoice::Exact | ShapleyChoice::Both => Some(exact_shapley(&game)?),
            ShapleyChoice::Multilinear => None,
        };
        let sampled = match cfg.method {
            ShapleyChoice::Multilinear | ShapleyChoice::Both => {
                let mut rng = RngStream::new(cfg.seed, streams::SHAPLEY);
                Some(mle_shapley(&game, cfg.q_points, cfg.samples, &mut rng)?)
            }
            ShapleyChoice::Exact => None,
        };
        let mut report = json!({ "checkpoint": label });
        for r in exact.iter().chain(&sampled) {
            for line in r.csv_rows().lines() {
                let _ = writeln!(csv, "{label},{line}");
            }
            report[r.method.name()] = json!({ "phi": r.phi, "stderr": r.stderr, "evaluations": r.evaluations });
        }
        if let (Some(e), Some(s)) = (&exact, &sampled) {
            let ok = within_stderr(s, e, 3.0);
            report["within_3_stderr"] = json!(ok);
            report["all_within_3_stderr"] = json!(ok.iter().all(|&b| b));
        }
        reports.push(report);
    }
    dir.write("shapley.csv", &csv)?;
    let summary = json!({ "q_points": cfg.q_points, "samples": cfg.samples, "metric": cfg.metric, "checkpoints": reports });
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}

pub fn cmd_prune(cfg: &PruneCmd, out: &Path) -> Result<Value> {
    if cfg.adapters.is_empty() {
        bail!("prune needs at least one adapter checkpoint");
    }
    let mut specs = cfg.sparsities.iter().map(|&r| SparsitySpec::new(r)).collect::<copra_core::Result<Vec<_>>>()?;
    specs.sort_by(|a, b| a.rho().total_cmp(&b.rho()));
    let base = cfg.base.load()?;
    let sets = load_all(&cfg.adapters, &base)?;
    let (_, test_set) = load_split(&cfg.task, &cfg.split)?;
    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;

    let mask = LayerMask::all(base.layers());
    let mut structured = String::from("checkpoint,variant,kept_layers,accuracy,drop\n");
    let mut unstructured = String::from("checkpoint,rho,accuracy,drop,zero_fraction\n");
    let mut reports = Vec::new();
    for (set, path) in sets.iter().zip(&cfg.adapters) {
        let label = label_of(path);
        let full = evaluate(&base, set, &mask, &test_set)?.accuracy;
        let mut variants = serde_json::Map::new();
        for spec in &cfg.structured {
            let kept = spec.kept(base.layers())?;
            let layers: Vec<String> = (0..base.layers()).filter(|&l| kept.is_active(l)).map(|l| (l + 1).to_string()).collect();
            let acc = evaluate(&base, &structured_prune(set, spec)?, &mask, &test_set)?.accuracy;
            let _ = writeln!(structured, "{label},{spec},{},{acc},{}", layers.join(" "), full - acc);
            variants.insert(spec.to_string(), json!({ "accuracy": acc, "drop": full - acc }));
        }
        let mut curve = Vec::new();
        for spec in &specs {
            let pruned = unstructured_prune(set, *spec)?;
            let acc = evaluate(&base, &pruned, &mask, &test_set)?.accuracy;
            let _ = writeln!(unstructured, "{label},{},{acc},{},{}", spec.rho(), full - acc, zero_fraction(&pruned));
            curve.push(json!({ "rho": spec.rho(), "accuracy": acc }));
        }
        let accs: Vec<f64> = curve.iter().map(|c| c["accuracy"].as_f64().unwrap_or(f64::NAN)).collect();
        reports.push(json!({
            "checkpoint": label,
            "accuracy": full,
            "structured": variants,
            "unstructured": curve,
            "unstructured_monotone": accs.windows(2).all(|w| w[1] <= w[0]),
        }));
    }
    dir.write("structured.csv", &structured)?;
    dir.write("unstructured.csv", &unstructured)?;
    let summary = json!({ "checkpoints": reports });
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}
