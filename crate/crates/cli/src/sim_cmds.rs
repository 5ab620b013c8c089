use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde_json::{json, Value};

use copra_core::connect::MergeMethod;
use copra_core::data::Dataset;
use copra_core::merge::MergeWeights;
use copra_core::schedule::{streams, RngStream, ScheduleMode};
use copra_core::train::{evaluate, train, TrainConfig, TrainOutcome};
use copra_core::{AdapterSet, BaseNet, Error, LayerMask};

use crate::analysis_cmds::merge_sets;
use crate::config::{load_split, AblateCmd, FedCmd, MtlCmd};
use crate::output::{mean, RunDir};
use crate::train_cmds::base_summary;

fn test_accuracy(base: &BaseNet, set: &AdapterSet, data: &Dataset) -> Result<f64> {
    Ok(evaluate(base, set, &LayerMask::all(base.layers()), data)?.accuracy)
}

/// `k` disjoint random shards of `0..n`, sizes differing by at most one.
pub fn shard_indices(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngStream::new(seed, streams::SHARD));
    let (q, r) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = q + usize::from(i < r);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Training seed of client `i` in the replicate seeded `seed`.
pub fn client_seed(seed: u64, client: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(client as u64)
}

struct Client {
    seed: u64,
    shard: usize,
    outcome: TrainOutcome,
}

pub fn cmd_fedsim(cfg: &FedCmd, out: &Path) -> Result<Value> {
    if cfg.clients == 0 {
        bail!("fedsim needs at least one client");
    }
    if cfg.seeds.is_empty() || cfg.strategies.is_empty() {
        bail!("fedsim needs at least one seed and one strategy");
    }
    cfg.train.validate()?;
    let base = cfg.base.load()?;
    let (train_set, test_set) = load_split(&cfg.task, &cfg.split)?;

    // (strategy, replicate) -> client datasets
    let mut shards = Vec::new();
    for &seed in &cfg.seeds {
        let parts = if cfg.identical_clients {
            vec![(0..train_set.len()).collect::<Vec<_>>(); cfg.clients]
        } else {
            shard_indices(train_set.len(), cfg.clients, seed)
        };
        let mut sets = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            if p.len() < cfg.train.batch_size {
                bail!("client {i} of replicate {seed} holds {} samples, fewer than batch size {}", p.len(), cfg.train.batch_size);
            }
            sets.push(train_set.subset(p, format!("{}_shard{i}", train_set.name))?);
        }
        shards.push(sets);
    }

    let mut jobs = Vec::new();
    for (si, &mode) in cfg.strategies.iter().enumerate() {
        for (ri, &seed) in cfg.seeds.iter().enumerate() {
            for c in 0..cfg.clients {
                let s = if cfg.identical_clients { seed } else { client_seed(seed, c) };
                jobs.push((si, ri, c, mode, s));
            }
        }
    }
    let trained: Vec<Result<Client>> = jobs
        .par_iter()
        .map(|&(_, ri, c, mode, s)| {
            let tc = TrainConfig { schedule: mode, seed: s, ..cfg.train.clone() };
            let data = &shards[ri][c];
            let outcome = train(&base, &tc, data, &test_set).with_context(|| format!("client {c} seed {s}"))?;
            Ok(Client { seed: s, shard: data.len(), outcome })
        })
        .collect();
    let mut trained = trained.into_iter();

    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;
    let mut clients_csv = String::from("strategy,replicate,client,seed,shard_size,test_acc\n");
    let mut results_csv = String::from("strategy,replicate,origin,merge\n");
    let mut per_strategy = serde_json::Map::new();
    let method = if cfg.align { MergeMethod::FusionAlign } else { MergeMethod::Fusion };
    for &mode in &cfg.strategies {
        let tag = mode.tag();
        let (mut origins, mut merges) = (Vec::new(), Vec::new());
        for (ri, &seed) in cfg.seeds.iter().enumerate() {
            let clients: Vec<Client> = (0..cfg.clients).map(|_| trained.next().expect("one result per job")).collect::<Result<_>>()?;
            let mut accs = Vec::new();
            for (i, cl) in clients.iter().enumerate() {
                let acc = test_accuracy(&base, &cl.outcome.adapters, &test_set)?;
                let _ = writeln!(clients_csv, "{tag},{seed},{i},{},{},{acc}", cl.seed, cl.shard);
                accs.push(acc);
            }
            let sets: Vec<AdapterSet> = clients.into_iter().map(|c| c.outcome.adapters).collect();
            let merged = if sets.len() == 1 {
                sets[0].clone()
            } else {
                let w = if cfg.weight_by_shard {
                    let sizes: Vec<f64> = shards[ri].iter().map(|d| d.len() as f64).collect();
                    let total: f64 = sizes.iter().sum();
                    MergeWeights::new(sizes.iter().map(|s| s / total).collect())?
                } else {
                    MergeWeights::uniform(sets.len())?
                };
                merge_sets(&sets, &w, method)?
            };
            let origin = mean(&accs);
            let merge = test_accuracy(&base, &merged, &test_set)?;
            let _ = writeln!(results_csv, "{tag},{seed},{origin},{merge}");
            origins.push(origin);
            merges.push(merge);
        }
        per_strategy.insert(tag, json!({ "origin": origins, "merge": merges, "mean_origin": mean(&origins), "mean_merge": mean(&merges) }));
    }
    dir.write("clients.csv", &clients_csv)?;
    dir.write("results.csv", &results_csv)?;
    let summary = json!({ "clients": cfg.clients, "merge_method": method.name(), "base": base_summary(&base), "strategies": per_strategy });
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}

pub fn cmd_mtlsim(cfg: &MtlCmd, out: &Path) -> Result<Value> {
    if cfg.seeds.is_empty() || cfg.strategies.is_empty() {
        bail!("mtlsim needs at least one seed and one strategy");
    }
    cfg.train.validate()?;
    let base = cfg.base.load()?;
    let (tr_a, te_a) = load_split(&cfg.tasks[0], &cfg.split)?;
    let (tr_b, te_b) = load_split(&cfg.tasks[1], &cfg.split)?;
    for ds in [&tr_a, &tr_b] {
        if ds.dim() != base.input_dim() || ds.num_classes() != base.num_classes() {
            bail!(
                "task {} has {} features and {} classes; the base expects {} and {}",
                ds.name,
                ds.dim(),
                ds.num_classes(),
                base.input_dim(),
                base.num_classes()
            );
        }
    }
    let weights = MergeWeights::pair(cfg.c)?;

    let mut jobs = Vec::new();
    for &mode in &cfg.strategies {
        for &seed in &cfg.seeds {
            jobs.push((mode, seed, 0usize));
            jobs.push((mode, seed, 1usize));
        }
    }
    let trained: Vec<Result<AdapterSet>> = jobs
        .par_iter()
        .map(|&(mode, seed, task)| {
            let tc = TrainConfig { schedule: mode, seed, ..cfg.train.clone() };
            let (tr, te) = if task == 0 { (&tr_a, &te_a) } else { (&tr_b, &te_b) };
            Ok(train(&base, &tc, tr, te).with_context(|| format!("task {task} seed {seed}"))?.adapters)
        })
        .collect();
    let mut trained = trained.into_iter();

    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;
    let mut csv = String::from("strategy,seed,origin_a,origin_b,merged_a,merged_b,origin,merge\n");
    let mut per_strategy = serde_json::Map::new();
    for &mode in &cfg.strategies {
        let tag = mode.tag();
        let (mut origins, mut merges) = (Vec::new(), Vec::new());
        let mut rows = Vec::new();
        for &seed in &cfg.seeds {
            let a = trained.next().expect("task a result")?;
            let b = trained.next().expect("task b result")?;
            let merged = copra_core::merge::fuse(&[&a, &b], &weights)?;
            let oa = test_accuracy(&base, &a, &te_a)?;
            let ob = test_accuracy(&base, &b, &te_b)?;
            let ma = test_accuracy(&base, &merged, &te_a)?;
            let mb = test_accuracy(&base, &merged, &te_b)?;
            let (origin, merge) = ((oa + ob) / 2.0, (ma + mb) / 2.0);
            let _ = writeln!(csv, "{tag},{seed},{oa},{ob},{ma},{mb},{origin},{merge}");
            origins.push(origin);
            merges.push(merge);
            rows.push(json!({ "seed": seed, "origin": [oa, ob], "merged": [ma, mb] }));
        }
        per_strategy.insert(tag, json!({ "mean_origin": mean(&origins), "mean_merge": mean(&merges), "replicates": rows }));
    }
    dir.write("results.csv", &csv)?;
    let summary = json!({ "c": cfg.c, "base": base_summary(&base), "strategies": per_strategy });
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}

/// Evenly spaced steps `round(T·i/n)` for `i = 1..=n`, deduplicated.
pub fn series_steps(total: usize, points: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (1..=points.max(1)).map(|i| ((total * i) as f64 / points.max(1) as f64).round() as usize).filter(|&t| t > 0).collect();
    s.dedup();
    s
}

enum Cell {
    Done { outcomes: Box<[TrainOutcome; 2]> },
    Diverged { step: usize },
}

pub fn cmd_ablate(cfg: &AblateCmd, out: &Path) -> Result<Value> {
    if cfg.learning_rates.is_empty() || cfg.steps.is_empty() || cfg.strategies.is_empty() {
        bail!("ablate needs nonempty learning_rates, steps and strategies");
    }
    let base = cfg.base.load()?;
    let (train_set, test_set) = load_split(&cfg.task, &cfg.split)?;

    let mut cells = Vec::new();
    for &mode in &cfg.strategies {
        for &lr in &cfg.learning_rates {
            for &steps in &cfg.steps {
                cells.push((mode, lr, steps));
            }
        }
    }
    let run_cell = |&(mode, lr, steps): &(ScheduleMode, f64, usize)| -> Result<Cell> {
        let mut first_bad: Option<usize> = None;
        let mut done = Vec::new();
        for seed in cfg.seeds {
            let tc = TrainConfig {
                schedule: mode,
                learning_rate: lr,
                total_steps: steps,
                seed,
                checkpoint_steps: series_steps(steps, cfg.series_points),
                ..cfg.train.clone()
            };
            match train(&base, &tc, &train_set, &test_set) {
                Ok(o) => done.push(o),
                Err(Error::Diverged { step, .. }) => first_bad = Some(first_bad.map_or(step, |s: usize| s.min(step))),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(match first_bad {
            Some(step) => Cell::Diverged { step },
            None => {
                let b = done.pop().expect("two runs");
                let a = done.pop().expect("two runs");
                Cell::Done { outcomes: Box::new([a, b]) }
            }
        })
    };
    let results: Vec<Result<Cell>> = cells.par_iter().map(run_cell).collect();

    let mut dir = RunDir::create(out)?;
    dir.write_json("resolved_config.json", cfg)?;
    let half = MergeWeights::pair(0.5)?;
    let mut grid = String::from("strategy,learning_rate,steps,acc_seed_a,acc_seed_b,mean_acc,merged_acc,diverged,diverged_step\n");
    let mut series = String::from("strategy,learning_rate,steps,step,merged_acc\n");
    let mut best: Vec<Option<(f64, usize)>> = vec![None; cfg.strategies.len()];
    let mut finished = Vec::with_capacity(cells.len());
    let mut diverged = Vec::new();
    for (i, (&(mode, lr, steps), res)) in cells.iter().zip(results).enumerate() {
        let tag = mode.tag();
        match res? {
            Cell::Diverged { step } => {
                let _ = writeln!(grid, "{tag},{lr:e},{steps},,,,,true,{step}");
                diverged.push(json!({ "strategy": tag, "learning_rate": lr, "steps": steps, "step": step }));
                finished.push(None);
            }
            Cell::Done { outcomes } => {
                let acc_a = test_accuracy(&base, &outcomes[0].adapters, &test_set)?;
                let acc_b = test_accuracy(&base, &outcomes[1].adapters, &test_set)?;
                let merged = copra_core::merge::fuse(&[&outcomes[0].adapters, &outcomes[1].adapters], &half)?;
                let m = test_accuracy(&base, &merged, &test_set)?;
                let _ = writeln!(grid, "{tag},{lr:e},{steps},{acc_a},{acc_b},{},{m},false,", (acc_a + acc_b) / 2.0);
                let si = cfg.strategies.iter().position(|s| *s == mode).expect("strategy in list");
                if best[si].is_none_or(|(b, _)| m > b) {
                    best[si] = Some((m, i));
                }
                finished.push(Some(*outcomes));
            }
        }
    }
    let mut best_cells = Vec::new();
    for entry in best.iter().flatten() {
        let (m, i) = *entry;
        let (mode, lr, steps) = cells[i];
        let [a, b] = finished[i].as_ref().expect("best cell finished");
        let mut points = Vec::new();
        for ck in a.checkpoints.iter().filter(|c| c.label != "early") {
            let Some(other) = b.checkpoints.iter().find(|c| c.step == ck.step && c.label != "early") else {
                continue;
            };
            if points.iter().any(|(s, _)| *s == ck.step) {
                continue;
            }
            let merged = copra_core::merge::fuse(&[&ck.adapters, &other.adapters], &half)?;
            let acc = test_accuracy(&base, &merged, &test_set)?;
            points.push((ck.step, acc));
        }
        points.sort_by_key(|p| p.0);
        for (step, acc) in &points {
            let _ = writeln!(series, "{},{lr:e},{steps},{step},{acc}", mode.tag());
        }
        best_cells.push(json!({ "strategy": mode.tag(), "learning_rate": lr, "steps": steps, "merged_accuracy": m, "series": points }));
    }
    dir.write("grid.csv", &grid)?;
    dir.write("series.csv", &series)?;
    let summary = json!({ "cells": cells.len(), "diverged": diverged, "best": best_cells });
    dir.write_json("summary.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}
