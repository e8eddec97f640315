//! Fine-tuning strategies over a frozen (or partly trainable) backbone.
//!
//! Six methods share one batch loop: per-sample gradients are computed in
//! parallel, reduced in sample-index order, averaged, and applied with plain
//! SGD. InstantFT takes a dedicated path that never touches the frozen
//! network's backward pass and can serve the frozen activations from a
//! [`ForwardCache`].

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapter::{Adapter, AdapterGrads};
use crate::cache::{CacheMode, CacheReport, ForwardCache};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{argmax, softmax_xent};
use crate::model::{BackwardPlan, Model, ModelSpec, NUM_CLASSES, NUM_LAYERS};
use crate::tensor::{lit, Real, Tensor};

pub const DEFAULT_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    FtAll,
    FtLast,
    FtBias,
    LoraAll,
    LoraLast,
    InstantFt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FtAll,
        Method::FtLast,
        Method::FtBias,
        Method::LoraAll,
        Method::LoraLast,
        Method::InstantFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FtAll => "ft-all",
            Method::FtLast => "ft-last",
            Method::FtBias => "ft-bias",
            Method::LoraAll => "lora-all",
            Method::LoraLast => "lora-last",
            Method::InstantFt => "instantft",
        }
    }

    /// `(src tap, dst layer)` pairs of the method's adapters.
    pub fn wiring(self) -> Vec<(usize, usize)> {
        match self {
            Method::LoraAll => (1..=NUM_LAYERS).map(|k| (k - 1, k)).collect(),
            Method::LoraLast => vec![(NUM_LAYERS - 1, NUM_LAYERS)],
            Method::InstantFt => (0..NUM_LAYERS).map(|i| (i, NUM_LAYERS)).collect(),
            _ => Vec::new(),
        }
    }

    /// Which frozen-network parameters train, and how deep backward goes.
    pub fn plan(self) -> BackwardPlan {
        let none = [false; NUM_LAYERS];
        let last = {
            let mut v = none;
            v[NUM_LAYERS - 1] = true;
            v
        };
        match self {
            Method::FtAll => BackwardPlan {
                weights: [true; NUM_LAYERS],
                biases: [true; NUM_LAYERS],
                lowest: 0,
            },
            Method::FtLast => BackwardPlan {
                weights: last,
                biases: last,
                lowest: NUM_LAYERS - 1,
            },
            Method::FtBias => BackwardPlan {
                weights: none,
                biases: [true; NUM_LAYERS],
                lowest: 0,
            },
            Method::LoraAll => BackwardPlan {
                weights: none,
                biases: none,
                lowest: 0,
            },
            Method::LoraLast | Method::InstantFt => BackwardPlan {
                weights: none,
                biases: none,
                lowest: NUM_LAYERS - 1,
            },
        }
    }

    pub fn uses_adapters(self) -> bool {
        !self.wiring().is_empty()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || (norm == "instant-ft" && *m == Method::InstantFt))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arithmetic {
    Float,
    Fixed,
}

impl Arithmetic {
    pub fn name(self) -> &'static str {
        match self {
            Arithmetic::Float => "float",
            Arithmetic::Fixed => "fixed",
        }
    }
}

impl fmt::Display for Arithmetic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arithmetic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "float" => Ok(Arithmetic::Float),
            "fixed" => Ok(Arithmetic::Fixed),
            other => Err(Error::Config(format!("unknown arithmetic `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub method: Method,
    pub rank: usize,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub cache: CacheMode,
    pub arithmetic: Arithmetic,
    /// Worker threads; 0 uses the ambient rayon pool.
    pub threads: usize,
    /// Evaluate after every epoch, not only at the end.
    pub eval_each_epoch: bool,
}

impl FinetuneConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            rank: DEFAULT_RANK,
            lr: 0.1,
            epochs: 10,
            batch: 20,
            seed: 0,
            cache: CacheMode::Off,
            arithmetic: Arithmetic::Float,
            threads: 0,
            eval_each_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cache != CacheMode::Off && self.method != Method::InstantFt {
            return Err(Error::Config(format!(
                "cache mode {} requires instantft, not {}",
                self.cache, self.method
            )));
        }
        if self.arithmetic == Arithmetic::Fixed && self.method != Method::InstantFt {
            return Err(Error::Config(format!(
                "fixed-point arithmetic requires instantft, not {}",
                self.method
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.rank == 0 && self.method.uses_adapters() {
            return Err(Error::Config("rank must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is invalid",
                self.lr
            )));
        }
        Ok(())
    }
}

/// A backbone plus the adapters (if any) of one fine-tuning method.
#[derive(Clone, Debug, PartialEq)]
pub struct PeftModel<T = f32> {
    pub method: Method,
    pub model: Model<T>,
    pub adapters: Vec<Adapter<T>>,
}

/// Per-sample (or batch-mean) gradients in trainable-tensor order.
pub type Grads<T> = Vec<Tensor<T>>;

impl<T: Real> PeftModel<T> {
    /// Attaches freshly initialized adapters (`A` Gaussian, `B = 0`).
    pub fn new(method: Method, model: Model<T>, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let spec = *model.spec();
        let adapters = method
            .wiring()
            .into_iter()
            .map(|(src, dst)| {
                let (d_in, d_out) = adapter_dims(&spec, src, dst);
                Adapter::init(src, dst, d_in, d_out, rank, &mut rng)
            })
            .collect();
        Self {
            method,
            model,
            adapters,
        }
    }

    pub fn from_parts(method: Method, model: Model<T>, adapters: Vec<Adapter<T>>) -> Result<Self> {
        let want = method.wiring();
        let got: Vec<(usize, usize)> = adapters.iter().map(|a| (a.src, a.dst)).collect();
        if want != got {
            return Err(Error::InvalidArgument(format!(
                "{method} expects adapters {want:?}, got {got:?}"
            )));
        }
        let spec = *model.spec();
        for ad in &adapters {
            let (d_in, d_out) = adapter_dims(&spec, ad.src, ad.dst);
            if ad.d_in() != d_in || ad.d_out() != d_out || ad.b.shape()[1] != ad.rank() {
                return Err(Error::shape(
                    "adapter",
                    &[d_in, d_out],
                    &[ad.d_in(), ad.d_out()],
                ));
            }
        }
        Ok(Self {
            method,
            model,
            adapters,
        })
    }

    pub fn trainable_params(&self) -> usize {
        self.trainable_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    fn trainable_shapes(&self) -> Vec<Vec<usize>> {
        let plan = self.method.plan();
        let mut out = Vec::new();
        for (k, layer) in self.model.layers().iter().enumerate() {
            if plan.weights[k] {
                out.push(layer.weight.shape().to_vec());
            }
            if plan.biases[k] {
                out.push(layer.bias.shape().to_vec());
            }
        }
        for ad in &self.adapters {
            out.push(ad.a.shape().to_vec());
            out.push(ad.b.shape().to_vec());
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let plan = self.method.plan();
        let mut out = Vec::new();
        for (k, layer) in self.model.layers_mut().iter_mut().enumerate() {
            if plan.weights[k] {
                out.push(&mut layer.weight);
            }
            if plan.biases[k] {
                out.push(&mut layer.bias);
            }
        }
        for ad in &mut self.adapters {
            out.push(&mut ad.a);
            out.push(&mut ad.b);
        }
        out
    }

    pub fn logits(&self, x0: &Tensor<T>) -> Result<Tensor<T>> {
        self.model.logits(x0, &self.adapters)
    }

    /// Loss and gradients for one sample through the generic backward pass.
    pub fn sample_grads(&self, x0: &Tensor<T>, label: usize) -> Result<SampleGrads<T>> {
        let trace = self.model.forward_trace(x0, &self.adapters)?;
        let sx = softmax_xent(trace.logits(), label)?;
        let plan = self.method.plan();
        let g = self
            .model
            .backward(&trace, &sx.dlogits, &plan, &self.adapters)?;
        let mut grads = Vec::new();
        for k in 0..NUM_LAYERS {
            if plan.weights[k] {
                grads.push(g.dw[k].clone().expect("planned weight gradient"));
            }
            if plan.biases[k] {
                grads.push(g.db[k].clone().expect("planned bias gradient"));
            }
        }
        push_adapter_grads(&mut grads, g.adapters);
        Ok(SampleGrads {
            loss: sx.loss.to_f64().unwrap_or(f64::NAN),
            correct: argmax(trace.logits().data()) == label,
            grads,
            activation_grads: g.activation_grads,
        })
    }

    /// `theta -= lr * grad` over every trainable tensor. Returns the number
    /// of parameter entries written.
    pub fn apply_sgd(&mut self, grads: &[Tensor<T>], lr: T) -> Result<usize> {
        let params = self.trainable_mut();
        if params.len() != grads.len() {
            return Err(Error::shape("apply_sgd", &[params.len()], &[grads.len()]));
        }
        let mut written = 0;
        for (p, g) in params.into_iter().zip(grads) {
            p.sgd_step(g, lr)?;
            written += g.len();
        }
        Ok(written)
    }
}

impl PeftModel<f32> {
    pub fn predict(&self, x0: &Tensor<f32>) -> Result<usize> {
        self.model.predict(x0, &self.adapters)
    }

    /// Fraction of `ds` classified correctly.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        let correct = (0..ds.len())
            .into_par_iter()
            .map(|i| {
                Ok(usize::from(
                    self.predict(&ds.image_tensor(i))? == ds.label(i),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(correct.iter().sum::<usize>() as f64 / ds.len() as f64)
    }
}

pub struct SampleGrads<T> {
    pub loss: f64,
    pub correct: bool,
    pub grads: Grads<T>,
    pub activation_grads: u64,
}

fn push_adapter_grads<T: Real>(out: &mut Grads<T>, grads: Vec<AdapterGrads<T>>) {
    for g in grads {
        out.push(g.da);
        out.push(g.db);
    }
}

/// Adapter `(d_in, d_out)`: flattened tap width in, layer output width out.
pub fn adapter_dims(spec: &ModelSpec, src: usize, dst: usize) -> (usize, usize) {
    (spec.tap_dims()[src], spec.layer_out_dims()[dst - 1])
}

/// Sum of per-sample gradients in order, divided by the batch size.
pub fn mean_grads<T: Real>(per_sample: Vec<Grads<T>>) -> Result<Grads<T>> {
    let n = per_sample.len();
    let mut it = per_sample.into_iter();
    let mut acc = it.next().ok_or(Error::EmptyDataset)?;
    for g in it {
        if g.len() != acc.len() {
            return Err(Error::shape("mean_grads", &[acc.len()], &[g.len()]));
        }
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b)?;
        }
    }
    let inv = T::one() / lit::<T>(n as f64);
    acc.iter_mut().for_each(|t| t.scale(inv));
    Ok(acc)
}

/// What InstantFT's backward pass needs from the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct InstantSaved<T = f32> {
    /// Flattened taps x0..x4.
    pub taps: Vec<Vec<T>>,
    /// `h = A x` per adapter.
    pub hs: Vec<Vec<T>>,
    /// `B h` per adapter.
    pub deltas: Vec<Vec<T>>,
    pub base_logits: Vec<T>,
}

/// InstantFT output from a frozen-network payload `[x1 | x2 | x3 | x4 | logits]`:
/// `logits = base + sum_i B_i A_i x_i`, summed in adapter order.
pub fn instantft_from_payload<T: Real>(
    adapters: &[Adapter<T>],
    x0: &[T],
    payload: &[T],
) -> Result<(Tensor<T>, InstantSaved<T>)> {
    if adapters.len() != NUM_LAYERS {
        return Err(Error::InvalidArgument(format!(
            "instantft needs {NUM_LAYERS} adapters, got {}",
            adapters.len()
        )));
    }
    let mut taps = vec![x0.to_vec()];
    let mut off = 0;
    for ad in &adapters[1..] {
        let d = ad.d_in();
        if payload.len() < off + d {
            return Err(Error::shape(
                "instantft payload",
                &[off + d],
                &[payload.len()],
            ));
        }
        taps.push(payload[off..off + d].to_vec());
        off += d;
    }
    if payload.len() != off + NUM_CLASSES {
        return Err(Error::shape(
            "instantft payload",
            &[off + NUM_CLASSES],
            &[payload.len()],
        ));
    }
    let base_logits = payload[off..].to_vec();
    let mut logits = base_logits.clone();
    let mut hs = Vec::with_capacity(NUM_LAYERS);
    let mut deltas = Vec::with_capacity(NUM_LAYERS);
    for (i, ad) in adapters.iter().enumerate() {
        if ad.src != i || ad.dst != NUM_LAYERS {
            return Err(Error::InvalidArgument(format!(
                "instantft adapter {i} is wired {} -> {}",
                ad.src, ad.dst
            )));
        }
        let (h, delta) = ad.forward(&taps[i])?;
        if delta.len() != NUM_CLASSES {
            return Err(Error::shape(
                "instantft delta",
                &[NUM_CLASSES],
                delta.shape(),
            ));
        }
        for (l, d) in logits.iter_mut().zip(delta.data()) {
            *l += *d;
        }
        hs.push(h.into_data());
        deltas.push(delta.into_data());
    }
    Ok((
        Tensor::vector(logits),
        InstantSaved {
            taps,
            hs,
            deltas,
            base_logits,
        },
    ))
}

/// Adapter gradients from `dlogits` alone. No activation gradient below the
/// output is formed.
pub fn instantft_grads<T: Real>(
    adapters: &[Adapter<T>],
    dlogits: &[T],
    saved: &InstantSaved<T>,
) -> Result<Vec<AdapterGrads<T>>> {
    if saved.taps.len() != adapters.len() || saved.hs.len() != adapters.len() {
        return Err(Error::InvalidArgument(
            "saved tensors do not match the adapters".into(),
        ));
    }
    adapters
        .iter()
        .enumerate()
        .map(|(i, ad)| ad.backward(dlogits, &saved.taps[i], &saved.hs[i], false))
        .collect()
}

/// Batch-mean InstantFT update: `A -= lr * mean(dA)`, `B -= lr * mean(dB)`.
pub fn instantft_backward<T: Real>(
    adapters: &mut [Adapter<T>],
    batch: &[(Vec<T>, InstantSaved<T>)],
    lr: T,
) -> Result<()> {
    let per_sample = batch
        .iter()
        .map(|(dl, saved)| {
            let mut g = Vec::with_capacity(2 * adapters.len());
            push_adapter_grads(&mut g, instantft_grads(adapters, dl, saved)?);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_grads(per_sample)?;
    for (ad, g) in adapters.iter_mut().zip(mean.chunks(2)) {
        ad.a.sgd_step(&g[0], lr)?;
        ad.b.sgd_step(&g[1], lr)?;
    }
    Ok(())
}

/// Engine instrumentation. Phase timings are summed over workers.
#[derive(Debug, Default)]
pub struct Counters {
    pub base_forward_calls: AtomicU64,
    pub activation_grads: AtomicU64,
    pub updated_entries: AtomicU64,
    pub saturation_events: AtomicU64,
    pub base_forward_ns: AtomicU64,
    pub adapter_forward_ns: AtomicU64,
    pub backward_ns: AtomicU64,
    pub cache_io_ns: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub base_forward_calls: u64,
    pub activation_grads: u64,
    pub updated_entries: u64,
    pub saturation_events: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub base_forward_ms: f64,
    pub adapter_forward_ms: f64,
    pub backward_ms: f64,
    pub cache_io_ms: f64,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            base_forward_calls: self.base_forward_calls.load(Ordering::Relaxed),
            activation_grads: self.activation_grads.load(Ordering::Relaxed),
            updated_entries: self.updated_entries.load(Ordering::Relaxed),
            saturation_events: self.saturation_events.load(Ordering::Relaxed),
        }
    }

    pub fn phase_times(&self) -> PhaseTimes {
        let ms = |a: &AtomicU64| a.load(Ordering::Relaxed) as f64 / 1e6;
        PhaseTimes {
            base_forward_ms: ms(&self.base_forward_ns),
            adapter_forward_ms: ms(&self.adapter_forward_ns),
            backward_ms: ms(&self.backward_ns),
            cache_io_ms: ms(&self.cache_io_ns),
        }
    }

    pub(crate) fn time<R>(slot: &AtomicU64, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let r = f();
        slot.fetch_add(t.elapsed().as_nanos() as u64, Ordering::Relaxed);
        r
    }
}

/// Frozen-network payload for sample `index`, from the cache when possible.
/// On a miss (or with no cache) the base network runs once and the result is
/// stored; the returned payload is always what the cache will serve later.
pub fn frozen_payload(
    model: &Model<f32>,
    x0: &Tensor<f32>,
    cache: Option<&ForwardCache>,
    index: usize,
    counters: &Counters,
) -> Result<Vec<f32>> {
    if let Some(c) = cache {
        if let Some(p) = Counters::time(&counters.cache_io_ns, || c.get(index))? {
            return Ok(p);
        }
    }
    counters.base_forward_calls.fetch_add(1, Ordering::Relaxed);
    let payload =
        Counters::time(&counters.base_forward_ns, || model.base_forward(x0))?.to_payload();
    match cache {
        Some(c) => Counters::time(&counters.cache_io_ns, || c.put_and_read(index, &payload)),
        None => Ok(payload),
    }
}

/// InstantFT forward for one sample, serving the frozen network from `cache`.
pub fn instantft_forward(
    model: &Model<f32>,
    adapters: &[Adapter<f32>],
    x0: &Tensor<f32>,
    cache: Option<&ForwardCache>,
    index: usize,
    counters: &Counters,
) -> Result<(Tensor<f32>, InstantSaved<f32>)> {
    let payload = frozen_payload(model, x0, cache, index, counters)?;
    Counters::time(&counters.adapter_forward_ns, || {
        instantft_from_payload(adapters, x0.data(), &payload)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when per-epoch evaluation is off and this is not the last epoch.
    pub eval_acc: Option<f64>,
    pub time_ms: f64,
    pub base_forward_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub saturation_events: u64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub peft: PeftModel<f32>,
    pub initial_eval_acc: f64,
    pub final_eval_acc: f64,
    pub epochs: Vec<EpochMetrics>,
    pub counters: CounterSnapshot,
    pub phases: PhaseTimes,
    pub cache: Option<CacheReport>,
    /// Wall-clock of the training loop, evaluation excluded.
    pub train_ms: f64,
}

/// Runs `cfg.method` on `train`, evaluating on `eval`.
pub fn finetune(
    model: &Model<f32>,
    cfg: &FinetuneConfig,
    train: &Dataset,
    eval: &Dataset,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for ds in [train, eval] {
        if ds.shape() != model.spec().input_shape() {
            return Err(Error::shape(
                "finetune dataset",
                &model.spec().input_shape(),
                &ds.shape(),
            ));
        }
    }
    with_pool(cfg.threads, || match cfg.arithmetic {
        Arithmetic::Float => finetune_float(model, cfg, train, eval),
        Arithmetic::Fixed => crate::fixed::finetune_fixed(model, cfg, train, eval),
    })
}

pub(crate) fn with_pool<R: Send>(
    threads: usize,
    f: impl FnOnce() -> Result<R> + Send,
) -> Result<R> {
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(f)
}

/// Frozen-network payloads for every sample of `ds`, computed once.
pub(crate) fn eval_payloads(model: &Model<f32>, ds: &Dataset) -> Result<Vec<Vec<f32>>> {
    (0..ds.len())
        .into_par_iter()
        .map(|i| Ok(model.base_forward(&ds.image_tensor(i))?.to_payload()))
        .collect()
}

fn instant_eval(adapters: &[Adapter<f32>], ds: &Dataset, payloads: &[Vec<f32>]) -> Result<f64> {
    let correct = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let (logits, _) = instantft_from_payload(adapters, ds.image(i), &payloads[i])?;
            Ok(usize::from(argmax(logits.data()) == ds.label(i)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / ds.len() as f64)
}

fn finetune_float(
    model: &Model<f32>,
    cfg: &FinetuneConfig,
    train: &Dataset,
    eval: &Dataset,
) -> Result<FinetuneOutcome> {
    let mut peft = PeftModel::new(cfg.method, model.clone(), cfg.rank, cfg.seed);
    let instant = cfg.method == Method::InstantFt;
    let cache = match cfg.cache {
        CacheMode::Off => None,
        mode => Some(ForwardCache::new(
            mode,
            train.len(),
            model.spec().cache_payload_len(),
        )?),
    };
    let counters = Counters::default();
    let eval_base = if instant {
        Some(eval_payloads(model, eval)?)
    } else {
        None
    };
    let evaluate = |p: &PeftModel<f32>| match &eval_base {
        Some(payloads) => instant_eval(&p.adapters, eval, payloads),
        None => p.accuracy(eval),
    };
    let initial_eval_acc = evaluate(&peft)?;
    let mut final_eval_acc = initial_eval_acc;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut train_ms = 0.0;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in train.batches(cfg.batch, cfg.seed, epoch as u64)? {
            let results = batch
                .indices
                .par_iter()
                .zip(&batch.labels)
                .map(|(&i, &label)| {
                    if instant {
                        instant_sample(&peft, train, cache.as_ref(), i, label, &counters)
                    } else {
                        let x0 = train.image_tensor(i);
                        Counters::time(&counters.backward_ns, || peft.sample_grads(&x0, label))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut per_sample = Vec::with_capacity(results.len());
            for r in results {
                loss_sum += r.loss;
                correct += usize::from(r.correct);
                counters
                    .activation_grads
                    .fetch_add(r.activation_grads, Ordering::Relaxed);
                per_sample.push(r.grads);
            }
            let mean = mean_grads(per_sample)?;
            let written = peft.apply_sgd(&mean, cfg.lr)?;
            counters
                .updated_entries
                .fetch_add(written as u64, Ordering::Relaxed);
        }
        let time_ms = start.elapsed().as_secs_f64() * 1e3;
        train_ms += time_ms;
        let last = epoch + 1 == cfg.epochs;
        let eval_acc = if cfg.eval_each_epoch || last {
            let acc = evaluate(&peft)?;
            final_eval_acc = acc;
            Some(acc)
        } else {
            None
        };
        let report = cache.as_ref().map(ForwardCache::report);
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            eval_acc,
            time_ms,
            base_forward_calls: counters.base_forward_calls.load(Ordering::Relaxed),
            cache_hits: report.map_or(0, |r| r.hits),
            cache_misses: report.map_or(0, |r| r.misses),
            saturation_events: 0,
        });
    }
    Ok(FinetuneOutcome {
        peft,
        initial_eval_acc,
        final_eval_acc,
        epochs,
        counters: counters.snapshot(),
        phases: counters.phase_times(),
        cache: cache.as_ref().map(ForwardCache::report),
        train_ms,
    })
}

fn instant_sample(
    peft: &PeftModel<f32>,
    train: &Dataset,
    cache: Option<&ForwardCache>,
    index: usize,
    label: usize,
    counters: &Counters,
) -> Result<SampleGrads<f32>> {
    let x0 = train.image_tensor(index);
    let (logits, saved) =
        instantft_forward(&peft.model, &peft.adapters, &x0, cache, index, counters)?;
    Counters::time(&counters.backward_ns, || {
        let sx = softmax_xent(&logits, label)?;
        let mut grads = Vec::with_capacity(2 * NUM_LAYERS);
        push_adapter_grads(
            &mut grads,
            instantft_grads(&peft.adapters, sx.dlogits.data(), &saved)?,
        );
        Ok(SampleGrads {
            loss: sx.loss as f64,
            correct: argmax(logits.data()) == label,
            grads,
            activation_grads: 0,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<f32> = (0..n * 784)
            .map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0))
            .collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new("toy", [1, 28, 28], images, labels).unwrap()
    }

    #[test]
    fn trainable_counts_per_method() {
        let want_mnist = [61706, 850, 236, 36328, 376, 10456];
        let want_svhn = [62006, 850, 236, 45480, 376, 19608];
        for (m, (a, b)) in Method::ALL.iter().zip(want_mnist.iter().zip(&want_svhn)) {
            let pm = PeftModel::<f32>::new(*m, Model::zeros(Variant::Mnist.spec()), 4, 0);
            assert_eq!(pm.trainable_params(), *a, "{m}");
            let ps = PeftModel::<f32>::new(*m, Model::zeros(Variant::Svhn.spec()), 4, 0);
            assert_eq!(ps.trainable_params(), *b, "{m}");
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("INSTANT_FT".parse::<Method>().unwrap(), Method::InstantFt);
        assert!("lora-some".parse::<Method>().is_err());
    }

    #[test]
    fn config_rejects_invalid_combinations() {
        let mut c = FinetuneConfig::new(Method::LoraAll);
        c.cache = CacheMode::Fp32;
        assert!(c.validate().is_err());
        let mut c = FinetuneConfig::new(Method::FtLast);
        c.arithmetic = Arithmetic::Fixed;
        assert!(c.validate().is_err());
        let mut c = FinetuneConfig::new(Method::InstantFt);
        c.cache = CacheMode::Nf4;
        c.arithmetic = Arithmetic::Fixed;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_b_adapters_leave_outputs_unchanged() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 3);
        let x = toy_data(1, 1).image_tensor(0);
        let base = model.logits(&x, &[]).unwrap();
        for m in [Method::LoraAll, Method::LoraLast, Method::InstantFt] {
            let p = PeftModel::new(m, model.clone(), 4, 9);
            assert_eq!(p.logits(&x).unwrap(), base, "{m}");
        }
    }

    #[test]
    fn instant_path_matches_generic_path() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 4);
        let mut p = PeftModel::new(Method::InstantFt, model.clone(), 4, 2);
        for ad in &mut p.adapters {
            ad.b.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 0.1);
        }
        let x = toy_data(1, 5).image_tensor(0);
        let counters = Counters::default();
        let (logits, saved) =
            instantft_forward(&model, &p.adapters, &x, None, 0, &counters).unwrap();
        assert_eq!(logits, p.logits(&x).unwrap());
        let sx = softmax_xent(&logits, 3).unwrap();
        let fast = instantft_grads(&p.adapters, sx.dlogits.data(), &saved).unwrap();
        let generic = p.sample_grads(&x, 3).unwrap();
        assert_eq!(generic.activation_grads, 0);
        for (i, g) in fast.iter().enumerate() {
            assert_eq!(g.da, generic.grads[2 * i]);
            assert_eq!(g.db, generic.grads[2 * i + 1]);
            assert!(g.dx.is_none());
        }
    }

    #[test]
    fn zero_dlogits_leave_adapters_unchanged() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 4);
        let mut p = PeftModel::new(Method::InstantFt, model.clone(), 4, 2);
        let x = toy_data(1, 5).image_tensor(0);
        let (_, saved) =
            instantft_forward(&model, &p.adapters, &x, None, 0, &Counters::default()).unwrap();
        let before = p.adapters.clone();
        instantft_backward(&mut p.adapters, &[(vec![0.0; 10], saved)], 0.1).unwrap();
        assert_eq!(p.adapters, before);
    }

    #[test]
    fn frozen_tensors_stay_bit_identical() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 6);
        let train = toy_data(40, 7);
        for m in Method::ALL {
            let mut cfg = FinetuneConfig::new(m);
            cfg.epochs = 1;
            let out = finetune(&model, &cfg, &train, &train).unwrap();
            let plan = m.plan();
            for (k, (a, b)) in model
                .layers()
                .iter()
                .zip(out.peft.model.layers())
                .enumerate()
            {
                if !plan.weights[k] {
                    assert_eq!(a.weight, b.weight, "{m} layer {k}");
                }
                if !plan.biases[k] {
                    assert_eq!(a.bias, b.bias, "{m} layer {k}");
                }
            }
            if m == Method::InstantFt {
                assert_eq!(out.counters.activation_grads, 0);
            }
        }
    }

    #[test]
    fn epochs_zero_returns_init() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 6);
        let data = toy_data(30, 8);
        let mut cfg = FinetuneConfig::new(Method::InstantFt);
        cfg.epochs = 0;
        let out = finetune(&model, &cfg, &data, &data).unwrap();
        assert!(out.epochs.is_empty());
        assert_eq!(
            out.peft,
            PeftModel::new(Method::InstantFt, model.clone(), 4, 0)
        );
        let base = PeftModel::new(Method::FtAll, model, 4, 0)
            .accuracy(&data)
            .unwrap();
        assert_eq!(out.initial_eval_acc, base);
    }

    #[test]
    fn cache_serves_every_epoch_after_the_first() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 6);
        let data = toy_data(50, 9);
        for mode in [CacheMode::Off, CacheMode::Fp32, CacheMode::Nf4] {
            let mut cfg = FinetuneConfig::new(Method::InstantFt);
            cfg.epochs = 3;
            cfg.cache = mode;
            let out = finetune(&model, &cfg, &data, &data).unwrap();
            let want = if mode == CacheMode::Off { 150 } else { 50 };
            assert_eq!(out.counters.base_forward_calls, want, "{mode}");
            if let Some(r) = out.cache {
                assert_eq!((r.hits, r.misses, r.entries), (100, 50, 50));
            }
        }
    }

    #[test]
    fn fp32_cache_matches_uncached_run() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 6);
        let data = toy_data(45, 10);
        let mut cfg = FinetuneConfig::new(Method::InstantFt);
        cfg.epochs = 2;
        let off = finetune(&model, &cfg, &data, &data).unwrap();
        cfg.cache = CacheMode::Fp32;
        let on = finetune(&model, &cfg, &data, &data).unwrap();
        assert_eq!(off.peft, on.peft);
        let losses =
            |o: &FinetuneOutcome| o.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>();
        assert_eq!(losses(&off), losses(&on));
    }

    #[test]
    fn runs_are_thread_count_invariant() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 6);
        let data = toy_data(45, 11);
        let mut cfg = FinetuneConfig::new(Method::LoraAll);
        cfg.epochs = 1;
        cfg.threads = 1;
        let a = finetune(&model, &cfg, &data, &data).unwrap();
        cfg.threads = 3;
        let b = finetune(&model, &cfg, &data, &data).unwrap();
        assert_eq!(a.peft, b.peft);
        assert_eq!(a.epochs[0].train_loss, b.epochs[0].train_loss);
    }

    #[test]
    fn sgd_writes_every_trainable_entry() {
        let model = Model::<f32>::init(Variant::Mnist.spec(), 6);
        let data = toy_data(20, 12);
        for m in Method::ALL {
            let mut cfg = FinetuneConfig::new(m);
            cfg.epochs = 1;
            let out = finetune(&model, &cfg, &data, &data).unwrap();
            assert_eq!(
                out.counters.updated_entries as usize,
                out.peft.trainable_params(),
                "{m}"
            );
        }
    }
}
