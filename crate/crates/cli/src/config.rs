//! Experiment configuration: a flat TOML key/value file, validated up front.
//!
//! Precedence, highest first: command-line flags, the config file, the
//! `INSTANTFT_DATA` environment variable (dataset root only), built-in
//! defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use instantft::cache::CacheMode;
use instantft::data::ROTATION_ANGLES;
use instantft::experiment::{data_root, RotatedProtocol};
use instantft::model::Variant;
use instantft::peft::{Arithmetic, FinetuneConfig, Method};
use instantft::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Deserialize, PartialEq, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset root; unset falls back to `$INSTANTFT_DATA`, then `./data`.
    pub data_root: Option<PathBuf>,
    /// Subdirectory of the dataset root holding the IDX files.
    pub dataset: String,
    pub variant: String,
    /// Model checkpoint, relative to `out` unless absolute.
    pub checkpoint: PathBuf,
    pub method: String,
    /// Rotation angle in degrees.
    pub theta: u32,
    pub train_count: usize,
    pub eval_count: usize,
    pub rank: usize,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub cache: String,
    pub arithmetic: String,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub out: PathBuf,
    /// Timing repeats per benchmarked configuration (median reported).
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            dataset: "mnist".into(),
            variant: "mnist".into(),
            checkpoint: "mnist.ckpt".into(),
            method: "instantft".into(),
            theta: 90,
            train_count: 1024,
            eval_count: 1024,
            rank: 4,
            lr: 0.1,
            epochs: 10,
            batch: 20,
            seeds: (0..10).collect(),
            cache: "fp32".into(),
            arithmetic: "float".into(),
            threads: 0,
            out: "out".into(),
            repeats: 3,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

/// Settings after parsing and validation.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub raw: ExperimentConfig,
    pub variant: Variant,
    pub method: Method,
    pub cache: CacheMode,
    pub arithmetic: Arithmetic,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    /// Applies `--set key=value` pairs (TOML values) and the dedicated flags.
    pub fn apply(mut self, ov: &Overrides) -> Result<Self> {
        if !ov.set.is_empty() {
            let mut table = toml::Table::try_from(&self)?;
            for kv in &ov.set {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("`--set {kv}` is not key=value"))?;
                let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {v}"))
                    .or_else(|_| toml::from_str::<toml::Table>(&format!("v = {v:?}")))
                    .with_context(|| format!("bad value in `--set {kv}`"))?
                    .remove("v")
                    .expect("parsed key");
                table.insert(k.trim().to_string(), value);
            }
            self = table.try_into()?;
        }
        if let Some(seed) = ov.seed {
            self.seeds = vec![seed];
        }
        if let Some(t) = ov.threads {
            self.threads = t;
        }
        if let Some(out) = &ov.out {
            self.out = out.clone();
        }
        Ok(self)
    }

    pub fn resolve(self) -> Result<Resolved> {
        let variant: Variant = self.variant.parse()?;
        let method: Method = self.method.parse()?;
        let cache: CacheMode = self.cache.parse()?;
        let arithmetic: Arithmetic = self.arithmetic.parse()?;
        if !ROTATION_ANGLES.contains(&self.theta) {
            bail!("theta {} is not one of {ROTATION_ANGLES:?}", self.theta);
        }
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.train_count == 0 || self.eval_count == 0 {
            bail!("train_count and eval_count must be positive");
        }
        let data_dir = self
            .data_root
            .clone()
            .unwrap_or_else(data_root)
            .join(&self.dataset);
        let checkpoint = if self.checkpoint.is_absolute() {
            self.checkpoint.clone()
        } else {
            self.out.join(&self.checkpoint)
        };
        let resolved = Resolved {
            raw: self,
            variant,
            method,
            cache,
            arithmetic,
            data_dir,
            checkpoint,
        };
        // Cache mode only applies to InstantFT; other methods ignore it.
        resolved.finetune_config(resolved.raw.seeds[0]).validate()?;
        Ok(resolved)
    }
}

impl Resolved {
    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            method: self.method,
            rank: self.raw.rank,
            lr: self.raw.lr,
            epochs: self.raw.epochs,
            batch: self.raw.batch,
            seed,
            cache: if self.method == Method::InstantFt {
                self.cache
            } else {
                CacheMode::Off
            },
            arithmetic: self.arithmetic,
            threads: self.raw.threads,
            eval_each_epoch: true,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.raw.epochs,
            batch: self.raw.batch,
            lr: self.raw.lr,
            seed: self.raw.seeds[0],
            threads: self.raw.threads,
        }
    }

    pub fn protocol(&self) -> RotatedProtocol {
        RotatedProtocol {
            degrees: self.raw.theta,
            train_count: self.raw.train_count,
            eval_count: self.raw.eval_count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn keys_and_comments_parse() {
        let c = ExperimentConfig::parse(
            "# run\nmethod = \"lora-all\"\ntheta = 60 # degrees\nseeds = [1, 2]\n",
        )
        .unwrap();
        assert_eq!(c.method, "lora-all");
        assert_eq!(c.theta, 60);
        assert_eq!(c.seeds, vec![1, 2]);
    }

    #[test]
    fn shipped_configs_resolve() {
        for text in [
            include_str!("../../../configs/rotmnist.toml"),
            include_str!("../../../configs/smoke.toml"),
        ] {
            ExperimentConfig::parse(text).unwrap().resolve().unwrap();
        }
        let full = ExperimentConfig::parse(include_str!("../../../configs/rotmnist.toml")).unwrap();
        assert_eq!(
            ExperimentConfig {
                data_root: None,
                ..full
            },
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("metod = \"lora-all\"").is_err());
    }

    #[test]
    fn flags_override_file() {
        let c = ExperimentConfig::parse("seeds = [1, 2]\nthreads = 3\nout = \"a\"").unwrap();
        let ov = Overrides {
            seed: Some(7),
            threads: Some(1),
            out: Some("b".into()),
            set: vec![
                "method=lora-last".into(),
                "epochs=2".into(),
                "lr=0.025".into(),
            ],
        };
        let c = c.apply(&ov).unwrap();
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.threads, 1);
        assert_eq!(c.out, PathBuf::from("b"));
        assert_eq!(c.method, "lora-last");
        assert_eq!(c.epochs, 2);
        assert_eq!(c.lr, 0.025);
        let bad = Overrides {
            set: vec!["nope=1".into()],
            ..Overrides::default()
        };
        assert!(ExperimentConfig::default().apply(&bad).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        for text in [
            "method = \"lora-some\"",
            "theta = 20",
            "cache = \"zip\"",
            "seeds = []",
            "batch = 0",
            "arithmetic = \"fixed\"\nmethod = \"lora-all\"",
        ] {
            assert!(
                ExperimentConfig::parse(text).unwrap().resolve().is_err(),
                "{text}"
            );
        }
        let r = ExperimentConfig::parse("method = \"ft-last\"")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(r.finetune_config(0).cache, CacheMode::Off);
    }

    #[test]
    fn checkpoint_resolves_against_out() {
        let r = ExperimentConfig::parse("out = \"runs\"\ncheckpoint = \"m.ckpt\"")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(r.checkpoint, PathBuf::from("runs/m.ckpt"));
        let r = ExperimentConfig::parse("checkpoint = \"/tmp/m.ckpt\"")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(r.checkpoint, PathBuf::from("/tmp/m.ckpt"));
    }
}
