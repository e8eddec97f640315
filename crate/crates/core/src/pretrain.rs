//! Full-network SGD training of the backbone.

use std::time::Instant;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::peft::{mean_grads, with_pool, Method, PeftModel};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub threads: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 20,
            lr: 0.1,
            seed: 0,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub time_ms: f64,
}

/// Mean-reduced mini-batch SGD on softmax cross-entropy over every parameter.
pub fn pretrain(
    model: Model<f32>,
    train: &Dataset,
    cfg: &PretrainConfig,
) -> Result<(Model<f32>, Vec<PretrainEpoch>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || cfg.batch == 0 {
        return Err(Error::Config(format!(
            "invalid pretraining settings: lr {} batch {}",
            cfg.lr, cfg.batch
        )));
    }
    if train.shape() != model.spec().input_shape() {
        return Err(Error::shape(
            "pretrain dataset",
            &model.spec().input_shape(),
            &train.shape(),
        ));
    }
    with_pool(cfg.threads, || {
        let mut net = PeftModel::new(Method::FtAll, model, 1, cfg.seed);
        let mut log = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let start = Instant::now();
            let (mut loss, mut correct) = (0.0f64, 0usize);
            for batch in train.batches(cfg.batch, cfg.seed, epoch as u64)? {
                let results = batch
                    .indices
                    .par_iter()
                    .zip(&batch.labels)
                    .map(|(&i, &label)| net.sample_grads(&train.image_tensor(i), label))
                    .collect::<Result<Vec<_>>>()?;
                let mut per_sample = Vec::with_capacity(results.len());
                for r in results {
                    loss += r.loss;
                    correct += usize::from(r.correct);
                    per_sample.push(r.grads);
                }
                net.apply_sgd(&mean_grads(per_sample)?, cfg.lr)?;
            }
            log.push(PretrainEpoch {
                epoch,
                loss: loss / train.len() as f64,
                train_acc: correct as f64 / train.len() as f64,
                time_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok((net.model, log))
    })
}

/// Base-network accuracy on `ds`.
pub fn evaluate(model: &Model<f32>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            Ok(usize::from(
                model.predict(&ds.image_tensor(i), &[])? == ds.label(i),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two classes of MNIST-like strokes on a dark background: a vertical
    /// bar versus a horizontal bar at a random offset.
    fn two_class(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut images = vec![0f32; n * 784];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            let at = rng.random_range(8..20usize);
            let img = &mut images[i * 784..(i + 1) * 784];
            for t in 4..24 {
                for w in at..at + 3 {
                    let (y, x) = if label == 0 { (t, w) } else { (w, t) };
                    img[y * 28 + x] = rng.random_range(0.7f32..1.0);
                }
            }
            labels.push(label);
        }
        Dataset::new("two-class", [1, 28, 28], images, labels).unwrap()
    }

    #[test]
    fn toy_pretraining_fits() {
        let ds = two_class(64);
        let cfg = PretrainConfig::default();
        let (model, log) = pretrain(Model::init(Variant::Mnist.spec(), 1), &ds, &cfg).unwrap();
        assert_eq!(log.len(), 10);
        assert!(evaluate(&model, &ds).unwrap() >= 0.95);
        assert!(log.last().unwrap().loss < log[0].loss);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let ds = two_class(20);
        let init = Model::init(Variant::Mnist.spec(), 1);
        let cfg = PretrainConfig {
            epochs: 2,
            lr: 0.0,
            ..PretrainConfig::default()
        };
        let (model, _) = pretrain(init.clone(), &ds, &cfg).unwrap();
        assert_eq!(model, init);
    }

    #[test]
    fn pretraining_is_reproducible() {
        let ds = two_class(40);
        let cfg = PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        };
        let a = pretrain(Model::init(Variant::Mnist.spec(), 3), &ds, &cfg)
            .unwrap()
            .0;
        let b = pretrain(Model::init(Variant::Mnist.spec(), 3), &ds, &cfg)
            .unwrap()
            .0;
        assert_eq!(a, b);
    }
}
