use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::{json, Value};

use copra_core::data::{self, checkpoint_to_string};
use copra_core::train::{evaluate, train, TrainOutcome};
use copra_core::{AdapterSet, BaseNet, LayerMask};

use crate::config::{load_split, PretrainCmd, TrainCmd};
use crate::output::{mean, RunDir};

/// Accuracy a pretrained base must reach on its source task before target
/// experiments are meaningful.
pub const BASE_GATE: f64 = 0.95;

pub fn base_summary(base: &BaseNet) -> Value {
    let acc = base.source_accuracy();
    json!({
        "dims": base.dims(),
        "source_accuracy": acc,
        "gate_passed": acc.map(|a| a >= BASE_GATE),
    })
}

pub fn cmd_pretrain(cfg: &PretrainCmd, out: &Path) -> Result<Value> {
    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;
    let base = cfg.build()?;
    dir.write("base.json", &data::base_to_string(&base)?)?;

    let (train_set, test_set) = cfg.source.load()?.split(cfg.recipe.test_fraction, cfg.recipe.split_seed)?;
    let mut csv = String::from("split,accuracy,loss\n");
    for (name, ds) in [("train", &train_set), ("test", &test_set)] {
        let r = copra_core::train::evaluate_base(&base, ds)?;
        let _ = writeln!(csv, "{name},{},{}", r.accuracy, r.loss);
    }
    dir.write("accuracy.csv", &csv)?;

    let summary = json!({
        "base": base_summary(&base),
        "gate_threshold": BASE_GATE,
        "parameter_count": base.parameter_count(),
    });
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}

/// Directory name of one training run inside the output directory.
pub fn run_name(tag: &str, seed: u64) -> String {
    format!("{tag}_seed{seed}")
}

pub fn checkpoint_file(tag: &str, seed: u64, label: &str) -> String {
    format!("{}/checkpoint_{label}.json", run_name(tag, seed))
}

pub fn params_row(prefix: &str, set: &AdapterSet) -> String {
    let mut row = prefix.to_string();
    for v in set.flatten() {
        let _ = write!(row, ",{v}");
    }
    row.push('\n');
    row
}

pub fn params_header(count: usize) -> String {
    let mut h = String::from("strategy,seed,checkpoint");
    for i in 0..count {
        let _ = write!(h, ",p{i}");
    }
    h.push('\n');
    h
}

pub fn cmd_train(cfg: &TrainCmd, out: &Path) -> Result<Value> {
    cfg.train.validate()?;
    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;
    let base = cfg.base.load()?;
    let (train_set, test_set) = load_split(&cfg.task, &cfg.split)?;
    let seeds = if cfg.seeds.is_empty() { vec![cfg.train.seed] } else { cfg.seeds.clone() };
    let tag = cfg.train.schedule.tag();

    let outcomes: Vec<Result<TrainOutcome>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            train(&base, &tc, &train_set, &test_set).with_context(|| format!("training seed {seed}"))
        })
        .collect();

    dir.write("base.json", &data::base_to_string(&base)?)?;
    let mask = LayerMask::all(base.layers());
    let mut results = String::from("strategy,seed,checkpoint,step,train_acc,test_acc,test_loss\n");
    let mut params = String::new();
    let mut runs = Vec::new();
    let mut finals = Vec::new();
    for (&seed, outcome) in seeds.iter().zip(outcomes) {
        let outcome = outcome?;
        let name = run_name(&tag, seed);
        dir.write(&format!("{name}/steps.csv"), &outcome.log.steps_csv())?;
        dir.write(&format!("{name}/evals.csv"), &outcome.log.evals_csv())?;
        let mut ckpts = serde_json::Map::new();
        for ck in &outcome.checkpoints {
            dir.write(&checkpoint_file(&tag, seed, &ck.label), &checkpoint_to_string(&ck.adapters, base.dims())?)?;
            let tr = evaluate(&base, &ck.adapters, &mask, &train_set)?;
            let te = evaluate(&base, &ck.adapters, &mask, &test_set)?;
            let _ = writeln!(results, "{tag},{seed},{},{},{},{},{}", ck.label, ck.step, tr.accuracy, te.accuracy, te.loss);
            if cfg.export_params {
                params.push_str(&params_row(&format!("{tag},{seed},{}", ck.label), &ck.adapters));
            }
            ckpts.insert(ck.label.clone(), json!(te.accuracy));
            if ck.label == "final" {
                finals.push(te.accuracy);
            }
        }
        runs.push(json!({ "seed": seed, "dir": name, "test_accuracy": ckpts }));
    }
    dir.write("results.csv", &results)?;
    if cfg.export_params {
        let count = outcome_param_count(&base, &cfg.train)?;
        dir.write("params.csv", &(params_header(count) + &params))?;
    }

    let summary = json!({
        "strategy": tag,
        "base": base_summary(&base),
        "runs": runs,
        "final_test_accuracy": {
            "mean": mean(&finals),
            "best": finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        },
    });
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}

fn outcome_param_count(base: &BaseNet, tc: &copra_core::train::TrainConfig) -> Result<usize> {
    Ok(copra_core::model::init_adapters(base, tc.rank, tc.lora_scale, 0)?.parameter_count())
}
