//! Subcommand implementations.

use std::path::PathBuf;

use anyhow::{Context, Result};
use instantft::cache::CacheMode;
use instantft::checkpoint::{load_model, save_model};
use instantft::cost::{emit_table, CostTable};
use instantft::data::{load_split, Dataset, Split};
use instantft::experiment::{bench, fill_cache, mean_std, run_seeds, BENCH_INFERENCE};
use instantft::model::{Model, Variant};
use instantft::peft::{Arithmetic, Method, PhaseTimes};
use instantft::pretrain::{evaluate, pretrain};
use serde::Serialize;

use crate::config::Resolved;
use crate::output::{write_atomic, write_csv};
use crate::Failure;

fn load_data(cfg: &Resolved, split: Split) -> Result<Dataset> {
    load_split(&cfg.data_dir, split)
        .with_context(|| format!("loading {:?} split from {}", split, cfg.data_dir.display()))
        .map_err(|e| Failure::Data(e).into())
}

fn load_checkpoint(cfg: &Resolved) -> Result<Model<f32>> {
    let model = load_model(&cfg.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint.display()))
        .map_err(Failure::Data)?;
    if model.spec().variant() != Some(cfg.variant) {
        return Err(Failure::Config(format!(
            "checkpoint {} does not hold the {} variant",
            cfg.checkpoint.display(),
            cfg.variant
        ))
        .into());
    }
    Ok(model)
}

fn out_path(cfg: &Resolved, name: &str) -> PathBuf {
    cfg.raw.out.join(name)
}

#[derive(Serialize)]
struct PretrainRow {
    epoch: usize,
    loss: f64,
    train_acc: f64,
    test_acc: Option<f64>,
    time_ms: f64,
}

pub fn cmd_pretrain(cfg: &Resolved) -> Result<()> {
    let train = load_data(cfg, Split::Train)?;
    let test = load_data(cfg, Split::Test)?;
    let pc = cfg.pretrain_config();
    let init = Model::init(cfg.variant.spec(), pc.seed);
    let (model, log) = pretrain(init, &train, &pc)?;
    let test_acc = evaluate(&model, &test)?;
    if let Some(dir) = cfg
        .checkpoint
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
    {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_model(&cfg.checkpoint, &model)?;
    let last = log.len();
    let rows: Vec<_> = log
        .iter()
        .map(|e| PretrainRow {
            epoch: e.epoch + 1,
            loss: e.loss,
            train_acc: e.train_acc,
            test_acc: (e.epoch + 1 == last).then_some(test_acc),
            time_ms: e.time_ms,
        })
        .collect();
    write_csv(&out_path(cfg, "pretrain.csv"), &rows)?;
    for e in &log {
        println!(
            "epoch {:>2}  loss {:.4}  train acc {:.2}%",
            e.epoch + 1,
            e.loss,
            100.0 * e.train_acc
        );
    }
    println!("test accuracy {:.2}%", 100.0 * test_acc);
    println!("checkpoint written to {}", cfg.checkpoint.display());
    Ok(())
}

/// One line of a fine-tuning record. `kind` is `epoch` (epoch 0 is the state
/// before training), `run` (per-seed totals and phase timings) or `summary`
/// (mean and standard deviation of final accuracy over seeds).
#[derive(Clone, Default, Serialize)]
struct FinetuneRow {
    kind: &'static str,
    method: String,
    cache: String,
    arithmetic: String,
    theta: u32,
    train_count: usize,
    seed: Option<u64>,
    epoch: Option<usize>,
    loss: Option<f64>,
    train_acc: Option<f64>,
    eval_acc: Option<f64>,
    eval_acc_std: Option<f64>,
    time_ms: Option<f64>,
    base_forward_calls: Option<u64>,
    cache_hits: Option<u64>,
    cache_misses: Option<u64>,
    saturation_events: Option<u64>,
    base_forward_ms: Option<f64>,
    adapter_forward_ms: Option<f64>,
    backward_ms: Option<f64>,
    cache_io_ms: Option<f64>,
}

fn with_phases(mut row: FinetuneRow, p: &PhaseTimes) -> FinetuneRow {
    row.base_forward_ms = Some(p.base_forward_ms);
    row.adapter_forward_ms = Some(p.adapter_forward_ms);
    row.backward_ms = Some(p.backward_ms);
    row.cache_io_ms = Some(p.cache_io_ms);
    row
}

pub fn finetune_file_name(cfg: &Resolved) -> String {
    let fc = cfg.finetune_config(0);
    format!(
        "finetune-{}-{}-{}-theta{}.csv",
        cfg.method, fc.cache, cfg.arithmetic, cfg.raw.theta
    )
}

pub fn cmd_finetune(cfg: &Resolved) -> Result<()> {
    let model = load_checkpoint(cfg)?;
    let source = load_data(cfg, Split::Test)?;
    let fc = cfg.finetune_config(cfg.raw.seeds[0]);
    let sweep = run_seeds(&model, &fc, &source, &cfg.protocol(), &cfg.raw.seeds)?;
    let base = FinetuneRow {
        method: cfg.method.to_string(),
        cache: fc.cache.to_string(),
        arithmetic: cfg.arithmetic.to_string(),
        theta: cfg.raw.theta,
        train_count: cfg.raw.train_count,
        ..FinetuneRow::default()
    };
    let mut rows = Vec::new();
    for run in &sweep.runs {
        let o = &run.outcome;
        rows.push(FinetuneRow {
            kind: "epoch",
            seed: Some(run.seed),
            epoch: Some(0),
            eval_acc: Some(o.initial_eval_acc),
            ..base.clone()
        });
        for e in &o.epochs {
            rows.push(FinetuneRow {
                kind: "epoch",
                seed: Some(run.seed),
                epoch: Some(e.epoch + 1),
                loss: Some(e.train_loss),
                train_acc: Some(e.train_acc),
                eval_acc: e.eval_acc,
                time_ms: Some(e.time_ms),
                base_forward_calls: Some(e.base_forward_calls),
                cache_hits: Some(e.cache_hits),
                cache_misses: Some(e.cache_misses),
                saturation_events: Some(e.saturation_events),
                ..base.clone()
            });
        }
        let row = FinetuneRow {
            kind: "run",
            seed: Some(run.seed),
            epoch: Some(o.epochs.len()),
            loss: o.epochs.last().map(|e| e.train_loss),
            train_acc: o.epochs.last().map(|e| e.train_acc),
            eval_acc: Some(o.final_eval_acc),
            time_ms: Some(o.train_ms),
            base_forward_calls: Some(o.counters.base_forward_calls),
            cache_hits: o.cache.map(|c| c.hits),
            cache_misses: o.cache.map(|c| c.misses),
            saturation_events: Some(o.counters.saturation_events),
            ..base.clone()
        };
        rows.push(with_phases(row, &o.phases));
    }
    let (mean, std) = sweep.summary();
    let (before, _) = mean_std(&sweep.initial_accuracies());
    let times: Vec<f64> = sweep.runs.iter().map(|r| r.outcome.train_ms).collect();
    let mean_phase = |f: fn(&PhaseTimes) -> f64| {
        mean_std(
            &sweep
                .runs
                .iter()
                .map(|r| f(&r.outcome.phases))
                .collect::<Vec<_>>(),
        )
        .0
    };
    let phases = PhaseTimes {
        base_forward_ms: mean_phase(|p| p.base_forward_ms),
        adapter_forward_ms: mean_phase(|p| p.adapter_forward_ms),
        backward_ms: mean_phase(|p| p.backward_ms),
        cache_io_ms: mean_phase(|p| p.cache_io_ms),
    };
    let summary = FinetuneRow {
        kind: "summary",
        epoch: Some(cfg.raw.epochs),
        eval_acc: Some(mean),
        eval_acc_std: Some(std),
        time_ms: Some(mean_std(&times).0),
        ..base.clone()
    };
    rows.push(with_phases(summary, &phases));
    let path = out_path(cfg, &finetune_file_name(cfg));
    write_csv(&path, &rows)?;
    println!(
        "{} theta={} seeds={}: accuracy {:.2}% +/- {:.2} (before fine-tuning {:.2}%), mean train time {:.1} ms",
        cfg.method,
        cfg.raw.theta,
        sweep.runs.len(),
        100.0 * mean,
        100.0 * std,
        100.0 * before,
        mean_std(&times).0
    );
    println!("record written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchCsvRow {
    label: String,
    method: String,
    cache: String,
    train_ms: f64,
    speedup_vs_lora_all: f64,
    base_forward_calls: u64,
    base_forward_ms: f64,
    adapter_forward_ms: f64,
    backward_ms: f64,
    cache_io_ms: f64,
}

pub fn cmd_bench(cfg: &Resolved) -> Result<()> {
    let model = load_checkpoint(cfg)?;
    let source = load_data(cfg, Split::Test)?;
    let seed = cfg.raw.seeds[0];
    let (train, eval) = cfg.protocol().split(&source, seed)?;
    let mut base = cfg.finetune_config(seed);
    base.arithmetic = Arithmetic::Float;
    let report = bench(&model, &base, &train, &eval, cfg.raw.repeats)?;
    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| BenchCsvRow {
            label: r.label.clone(),
            method: r
                .method
                .map_or_else(|| "none".to_string(), |m| m.to_string()),
            cache: r.cache.to_string(),
            train_ms: r.train_ms,
            speedup_vs_lora_all: report.speedup(&r.label, "lora-all").unwrap_or(f64::NAN),
            base_forward_calls: r.base_forward_calls,
            base_forward_ms: r.phases.base_forward_ms,
            adapter_forward_ms: r.phases.adapter_forward_ms,
            backward_ms: r.phases.backward_ms,
            cache_io_ms: r.phases.cache_io_ms,
        })
        .collect();
    let path = out_path(cfg, "bench.csv");
    write_csv(&path, &rows)?;
    for r in &rows {
        println!(
            "{:<18} {:>10.1} ms  {:>6.2}x vs lora-all  base forwards {}",
            r.label, r.train_ms, r.speedup_vs_lora_all, r.base_forward_calls
        );
    }
    if let (Some(fp32), Some(nf4), Some(off)) = (
        report.row("instantft-fp32"),
        report.row("instantft-nf4"),
        report.row("instantft-nocache"),
    ) {
        println!(
            "cache speedup (off / fp32): {:.2}x",
            off.train_ms / fp32.train_ms
        );
        println!(
            "nf4 overhead vs fp32: {:+.1}%",
            100.0 * (nf4.train_ms / fp32.train_ms - 1.0)
        );
    }
    if let Some(inf) = report.row(BENCH_INFERENCE) {
        println!("inference-only baseline: {:.1} ms", inf.train_ms);
    }
    println!("timings written to {}", path.display());
    Ok(())
}

pub fn cmd_costs(cfg: &Resolved) -> Result<()> {
    let table: CostTable = emit_table(&Variant::ALL, &Method::ALL);
    let path = out_path(cfg, "costs.csv");
    write_atomic(&path, table.to_csv().as_bytes())?;
    print!("{}", table.render());
    println!("table written to {}", path.display());
    if !table.all_params_match() {
        return Err(Failure::Check(
            "trainable-parameter counts disagree with the reference table".into(),
        )
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct CacheRow {
    mode: String,
    entries: usize,
    entry_bytes: usize,
    bytes: usize,
    megabytes: f64,
    compression_ratio: f64,
    spill_file: String,
    spill_bytes: u64,
}

pub fn cmd_cache_stats(cfg: &Resolved) -> Result<()> {
    let model = load_checkpoint(cfg)?;
    let source = load_data(cfg, Split::Test)?;
    let (train, _) = cfg.protocol().split(&source, cfg.raw.seeds[0])?;
    let mut rows = Vec::new();
    for mode in [CacheMode::Fp32, CacheMode::Nf4] {
        let cache = fill_cache(&model, &train, mode)?;
        let report = cache.report();
        let spill = out_path(cfg, &format!("cache-{mode}.bin"));
        std::fs::create_dir_all(&cfg.raw.out)?;
        cache.save(&spill)?;
        rows.push(CacheRow {
            mode: mode.to_string(),
            entries: report.entries,
            entry_bytes: cache.entry_bytes(),
            bytes: report.bytes,
            megabytes: report.bytes as f64 / 1e6,
            compression_ratio: report.compression_ratio,
            spill_file: spill.display().to_string(),
            spill_bytes: std::fs::metadata(&spill)?.len(),
        });
    }
    let path = out_path(cfg, "cache_stats.csv");
    write_csv(&path, &rows)?;
    for r in &rows {
        println!(
            "{:<5} {} entries x {} B = {:.3} MB (ratio {:.3}x)",
            r.mode, r.entries, r.entry_bytes, r.megabytes, r.compression_ratio
        );
    }
    println!("stats written to {}", path.display());
    Ok(())
}
