//! Multi-seed fine-tuning runs, wall-clock benchmarks and cache statistics.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use crate::cache::{CacheMode, CacheReport, ForwardCache};
use crate::data::{rotated_split, Dataset};
use crate::error::Result;
use crate::model::Model;
use crate::peft::{
    finetune, frozen_payload, with_pool, Counters, FinetuneConfig, FinetuneOutcome, Method,
    PhaseTimes,
};

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "INSTANTFT_DATA";

/// Dataset root: `$INSTANTFT_DATA`, else `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rotated fine-tuning protocol: each seed draws disjoint fine-tuning and
/// evaluation subsets, rotates both and fine-tunes with that seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RotatedProtocol {
    pub degrees: u32,
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for RotatedProtocol {
    fn default() -> Self {
        Self {
            degrees: 90,
            train_count: 1024,
            eval_count: 1024,
        }
    }
}

impl RotatedProtocol {
    pub fn split(&self, source: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
        rotated_split(
            source,
            self.degrees,
            self.train_count,
            self.eval_count,
            seed,
        )
    }
}

#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: FinetuneOutcome,
}

#[derive(Debug)]
pub struct SeedSweep {
    pub method: Method,
    pub degrees: u32,
    pub runs: Vec<SeedRun>,
}

impl SeedSweep {
    pub fn final_accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.outcome.final_eval_acc).collect()
    }

    pub fn initial_accuracies(&self) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| r.outcome.initial_eval_acc)
            .collect()
    }

    /// Mean and standard deviation of final accuracy over seeds.
    pub fn summary(&self) -> (f64, f64) {
        mean_std(&self.final_accuracies())
    }
}

/// Runs `cfg` once per seed under `protocol`, overriding `cfg.seed`.
pub fn run_seeds(
    model: &Model<f32>,
    cfg: &FinetuneConfig,
    source: &Dataset,
    protocol: &RotatedProtocol,
    seeds: &[u64],
) -> Result<SeedSweep> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train, eval) = protocol.split(source, seed)?;
        let cfg = FinetuneConfig {
            seed,
            ..cfg.clone()
        };
        runs.push(SeedRun {
            seed,
            outcome: finetune(model, &cfg, &train, &eval)?,
        });
    }
    Ok(SeedSweep {
        method: cfg.method,
        degrees: protocol.degrees,
        runs,
    })
}

/// One benchmarked configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub method: Option<Method>,
    pub cache: CacheMode,
    /// Median training wall-clock over the repeats.
    pub train_ms: f64,
    pub base_forward_calls: u64,
    pub phases: PhaseTimes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, label: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// `time(reference) / time(label)`.
    pub fn speedup(&self, label: &str, reference: &str) -> Option<f64> {
        Some(self.row(reference)?.train_ms / self.row(label)?.train_ms)
    }
}

pub const BENCH_INFERENCE: &str = "inference-only";

/// Benchmarked configurations: label, method and cache mode.
pub fn bench_suite() -> Vec<(&'static str, Method, CacheMode)> {
    vec![
        ("instantft-nocache", Method::InstantFt, CacheMode::Off),
        ("instantft-fp32", Method::InstantFt, CacheMode::Fp32),
        ("instantft-nf4", Method::InstantFt, CacheMode::Nf4),
        ("lora-all", Method::LoraAll, CacheMode::Off),
        ("ft-last", Method::FtLast, CacheMode::Off),
    ]
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times every configuration of [`bench_suite`] plus one epoch-count of
/// inference-only base forwards over `train`. Each timing is the median of
/// `repeats` runs.
pub fn bench(
    model: &Model<f32>,
    base: &FinetuneConfig,
    train: &Dataset,
    eval: &Dataset,
    repeats: usize,
) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    let mut rows = Vec::new();
    for (label, method, cache) in bench_suite() {
        let cfg = FinetuneConfig {
            method,
            cache,
            eval_each_epoch: false,
            ..base.clone()
        };
        let mut times = Vec::with_capacity(repeats);
        let mut last = None;
        for _ in 0..repeats {
            let out = finetune(model, &cfg, train, eval)?;
            times.push(out.train_ms);
            last = Some(out);
        }
        let out = last.expect("at least one repeat");
        rows.push(BenchRow {
            label: label.to_string(),
            method: Some(method),
            cache,
            train_ms: median(times),
            base_forward_calls: out.counters.base_forward_calls,
            phases: out.phases,
        });
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        times.push(inference_ms(model, train, base.epochs, base.threads)?);
    }
    rows.push(BenchRow {
        label: BENCH_INFERENCE.to_string(),
        method: None,
        cache: CacheMode::Off,
        train_ms: median(times),
        base_forward_calls: (train.len() * base.epochs) as u64,
        phases: PhaseTimes::default(),
    });
    Ok(BenchReport { rows })
}

/// Wall-clock of `epochs` plain forward passes over `ds`.
fn inference_ms(model: &Model<f32>, ds: &Dataset, epochs: usize, threads: usize) -> Result<f64> {
    with_pool(threads, || {
        let start = Instant::now();
        for _ in 0..epochs {
            (0..ds.len())
                .into_par_iter()
                .map(|i| model.predict(&ds.image_tensor(i), &[]).map(|_| ()))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    })
}

/// Fills a fresh cache of `mode` with the frozen payload of every sample.
pub fn fill_cache(model: &Model<f32>, ds: &Dataset, mode: CacheMode) -> Result<ForwardCache> {
    let cache = ForwardCache::new(mode, ds.len(), model.spec().cache_payload_len())?;
    let counters = Counters::default();
    (0..ds.len())
        .into_par_iter()
        .map(|i| frozen_payload(model, &ds.image_tensor(i), Some(&cache), i, &counters).map(|_| ()))
        .collect::<Result<Vec<_>>>()?;
    Ok(cache)
}

/// Cache footprint of `ds` under each storage mode.
pub fn cache_stats(model: &Model<f32>, ds: &Dataset) -> Result<Vec<(CacheMode, CacheReport)>> {
    [CacheMode::Fp32, CacheMode::Nf4]
        .into_iter()
        .map(|mode| Ok((mode, fill_cache(model, ds, mode)?.report())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let images = (0..n * 784)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new("toy", [1, 28, 28], images, labels).unwrap()
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn seed_sweep_is_reproducible() {
        let model = Model::init(Variant::Mnist.spec(), 1);
        let src = toy(60);
        let protocol = RotatedProtocol {
            degrees: 45,
            train_count: 20,
            eval_count: 20,
        };
        let mut cfg = FinetuneConfig::new(Method::InstantFt);
        cfg.epochs = 2;
        let a = run_seeds(&model, &cfg, &src, &protocol, &[0, 1]).unwrap();
        let b = run_seeds(&model, &cfg, &src, &protocol, &[0, 1]).unwrap();
        assert_eq!(a.final_accuracies(), b.final_accuracies());
        assert_eq!(a.runs[1].seed, 1);
        assert_eq!(a.runs[0].outcome.peft, b.runs[0].outcome.peft);
        assert_ne!(a.runs[0].outcome.peft, a.runs[1].outcome.peft);
    }

    #[test]
    fn bench_counts_base_forwards() {
        let model = Model::init(Variant::Mnist.spec(), 1);
        let ds = toy(10);
        let mut cfg = FinetuneConfig::new(Method::InstantFt);
        cfg.epochs = 3;
        let report = bench(&model, &cfg, &ds, &ds, 1).unwrap();
        assert_eq!(
            report.row("instantft-nocache").unwrap().base_forward_calls,
            30
        );
        assert_eq!(report.row("instantft-fp32").unwrap().base_forward_calls, 10);
        assert_eq!(report.row("instantft-nf4").unwrap().base_forward_calls, 10);
        assert!(report.speedup("instantft-fp32", "lora-all").unwrap() > 0.0);
        assert!(report.row(BENCH_INFERENCE).is_some());
    }

    #[test]
    fn cache_stats_report_both_modes() {
        let model = Model::init(Variant::Mnist.spec(), 1);
        let stats = cache_stats(&model, &toy(8)).unwrap();
        assert_eq!(stats[0].1.bytes, 8 * 1790 * 4);
        assert_eq!(stats[1].1.bytes, 8 * 1008);
        assert!(stats.iter().all(|(_, r)| r.entries == 8 && r.hits == 0));
    }
}
