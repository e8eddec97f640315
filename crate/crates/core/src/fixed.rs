//! Bit-exact integer model of the InstantFT datapath.
//!
//! Activations are Q8.16 (8 integer bits including sign, 16 fraction bits,
//! held in an `i32`), parameters and gradients are Q4.12 (held in an `i16`).
//! Every narrowing step rounds half to even and saturates; saturations are
//! counted, never silent. Dot products accumulate exactly in `i64` and are
//! rescaled once.
//!
//! Softmax uses two tables: `exp` samples `e^z` on `[-16, 0]` (512 entries,
//! nearest entry), and `recip` samples `1/m` at bin centres of `[1, 2)`
//! (256 entries) after a power-of-two range reduction of the sum.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::Ordering;
use std::time::Instant;

use rayon::prelude::*;

use crate::adapter::Adapter;
use crate::cache::{CacheMode, ForwardCache};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, KERNEL, NUM_CLASSES, NUM_LAYERS};
use crate::peft::{Counters, EpochMetrics, FinetuneConfig, FinetuneOutcome, Method, PeftModel};

/// Signed fixed-point layout: `int_bits` includes the sign bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QFormat {
    pub int_bits: u32,
    pub frac_bits: u32,
}

pub const Q8_16: QFormat = QFormat {
    int_bits: 8,
    frac_bits: 16,
};
pub const Q4_12: QFormat = QFormat {
    int_bits: 4,
    frac_bits: 12,
};

impl QFormat {
    pub fn bits(self) -> u32 {
        self.int_bits + self.frac_bits
    }

    pub fn max_raw(self) -> i64 {
        (1i64 << (self.bits() - 1)) - 1
    }

    pub fn min_raw(self) -> i64 {
        -(1i64 << (self.bits() - 1))
    }

    pub fn one(self) -> i64 {
        1i64 << self.frac_bits
    }

    pub fn to_f64(self, raw: i64) -> f64 {
        raw as f64 / self.one() as f64
    }

    /// Clamps to the representable range, counting a saturation if needed.
    pub fn saturate(self, v: i64, sat: &mut u64) -> i64 {
        if v > self.max_raw() {
            *sat += 1;
            self.max_raw()
        } else if v < self.min_raw() {
            *sat += 1;
            self.min_raw()
        } else {
            v
        }
    }
}

/// A fixed-point scalar tagged with its format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fix {
    pub raw: i64,
    pub fmt: QFormat,
}

impl Fix {
    pub fn to_f64(self) -> f64 {
        self.fmt.to_f64(self.raw)
    }
}

/// `v / 2^s`, rounded half to even.
pub fn shr_rne(v: i64, s: u32) -> i64 {
    if s == 0 {
        return v;
    }
    let q = v >> s;
    let r = v - (q << s);
    let half = 1i64 << (s - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// `num / den` for `den > 0`, rounded half to even.
pub fn div_rne(num: i64, den: i64) -> i64 {
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q & 1 == 1 => q + 1,
        _ => q,
    }
}

fn rescale(raw: i64, from: u32, to: u32) -> i64 {
    if from >= to {
        shr_rne(raw, from - to)
    } else {
        raw << (to - from)
    }
}

pub fn fx_convert(x: f64, fmt: QFormat, sat: &mut u64) -> Result<Fix> {
    if x.is_nan() {
        return Err(Error::NonFinite("fx_convert"));
    }
    let scaled = (x * fmt.one() as f64).round_ties_even();
    let raw = if scaled >= fmt.max_raw() as f64 + 1.0 {
        *sat += 1;
        fmt.max_raw()
    } else if scaled < fmt.min_raw() as f64 {
        *sat += 1;
        fmt.min_raw()
    } else {
        scaled as i64
    };
    Ok(Fix { raw, fmt })
}

/// Saturating sum in `a`'s format (`b` is rescaled first).
pub fn fx_add(a: Fix, b: Fix, sat: &mut u64) -> Fix {
    let b_raw = rescale(b.raw, b.fmt.frac_bits, a.fmt.frac_bits);
    Fix {
        raw: a.fmt.saturate(a.raw + b_raw, sat),
        fmt: a.fmt,
    }
}

/// Full-width product rescaled once into `out`.
pub fn fx_mul(a: Fix, b: Fix, out: QFormat, sat: &mut u64) -> Fix {
    let wide = a.raw as i128 * b.raw as i128;
    let shift = a.fmt.frac_bits + b.fmt.frac_bits;
    let raw = if shift >= out.frac_bits {
        let s = shift - out.frac_bits;
        // Round half even on the 128-bit product, then clamp.
        let q = wide >> s;
        let r = wide - (q << s);
        let half = if s == 0 { 0 } else { 1i128 << (s - 1) };
        if s > 0 && (r > half || (r == half && q & 1 == 1)) {
            q + 1
        } else {
            q
        }
    } else {
        wide << (out.frac_bits - shift)
    };
    let clamped = raw.clamp(out.min_raw() as i128, out.max_raw() as i128);
    if clamped != raw {
        *sat += 1;
    }
    Fix {
        raw: clamped as i64,
        fmt: out,
    }
}

fn act(v: i64, sat: &mut u64) -> i32 {
    Q8_16.saturate(v, sat) as i32
}

fn param(v: i64, sat: &mut u64) -> i16 {
    Q4_12.saturate(v, sat) as i16
}

pub fn to_act(x: f32, sat: &mut u64) -> Result<i32> {
    Ok(fx_convert(x as f64, Q8_16, sat)?.raw as i32)
}

pub fn to_param(x: f32, sat: &mut u64) -> Result<i16> {
    Ok(fx_convert(x as f64, Q4_12, sat)?.raw as i16)
}

/// Q8.16 values are exact in `f32` (24 significant bits).
pub fn act_to_f32(raw: i32) -> f32 {
    raw as f32 / Q8_16.one() as f32
}

pub fn param_to_f32(raw: i16) -> f32 {
    raw as f32 / Q4_12.one() as f32
}

/// First index of the maximum.
pub fn argmax_raw(v: &[i32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn dot(w: &[i16], x: &[i32]) -> i64 {
    w.iter().zip(x).map(|(&a, &b)| a as i64 * b as i64).sum()
}

pub const EXP_ENTRIES: usize = 512;
pub const RECIP_ENTRIES: usize = 256;
pub const EXP_DOMAIN: f64 = 16.0;
const LUT_MAGIC: &[u8; 4] = b"IFTL";
const LUT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SoftmaxLut {
    /// `exp[k] = e^(-16 k / 511)` in Q8.16.
    pub exp: Vec<i32>,
    /// `recip[i] = 1 / (1 + (i + 0.5) / 256)` in Q8.16.
    pub recip: Vec<i32>,
}

impl Default for SoftmaxLut {
    fn default() -> Self {
        Self::new()
    }
}

impl SoftmaxLut {
    pub fn new() -> Self {
        let q = |v: f64| (v * Q8_16.one() as f64).round_ties_even() as i32;
        let step = EXP_DOMAIN / (EXP_ENTRIES - 1) as f64;
        Self {
            exp: (0..EXP_ENTRIES)
                .map(|k| q((-(k as f64) * step).exp()))
                .collect(),
            recip: (0..RECIP_ENTRIES)
                .map(|i| q(1.0 / (1.0 + (i as f64 + 0.5) / RECIP_ENTRIES as f64)))
                .collect(),
        }
    }

    /// `e^z` for Q8.16 `z <= 0`; anything below the domain reads the last entry.
    pub fn exp_of(&self, z: i32) -> i32 {
        let neg = -(z.min(0) as i64);
        let k = div_rne(
            neg * (EXP_ENTRIES as i64 - 1),
            EXP_DOMAIN as i64 * Q8_16.one(),
        );
        self.exp[(k as usize).min(EXP_ENTRIES - 1)]
    }

    /// Probabilities in Q8.16.
    pub fn softmax(&self, logits: &[i32]) -> Vec<i32> {
        let max = logits.iter().copied().max().unwrap_or(0);
        // z = logit - max is at least -2^24, well inside i64.
        let es: Vec<i64> = logits
            .iter()
            .map(|&l| self.exp_of((l as i64 - max as i64).max(i32::MIN as i64) as i32) as i64)
            .collect();
        let sum: i64 = es.iter().sum();
        // sum >= 1.0 because the max entry contributes e^0.
        let top = 63 - sum.leading_zeros();
        let s = top - Q8_16.frac_bits;
        let idx = ((sum >> (top - 8)) - RECIP_ENTRIES as i64) as usize;
        let r = self.recip[idx] as i64;
        es.iter()
            .map(|&e| shr_rne(e * r, Q8_16.frac_bits + s) as i32)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(LUT_MAGIC).map_err(io)?;
        for v in [LUT_VERSION, self.exp.len() as u32, self.recip.len() as u32] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in self.exp.iter().chain(&self.recip) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::Format {
            what: "softmax LUT",
            detail: detail.into(),
        };
        if bytes.len() < 16 || &bytes[..4] != LUT_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4"));
        if word(4) != LUT_VERSION {
            return Err(bad("unsupported version"));
        }
        let (n_exp, n_recip) = (word(8) as usize, word(12) as usize);
        if n_exp != EXP_ENTRIES || n_recip != RECIP_ENTRIES {
            return Err(bad("unexpected table sizes"));
        }
        if bytes.len() != 16 + 4 * (n_exp + n_recip) {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: "softmax LUT entries".into(),
            });
        }
        let vals: Vec<i32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        Ok(Self {
            exp: vals[..n_exp].to_vec(),
            recip: vals[n_exp..].to_vec(),
        })
    }
}

/// Frozen backbone with Q4.12 parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedModel {
    spec: ModelSpec,
    weights: Vec<Vec<i16>>,
    biases: Vec<Vec<i16>>,
    shapes: Vec<Vec<usize>>,
}

/// Output of [`FixedModel::forward`]: taps x1..x4 and logits, all Q8.16.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedBase {
    pub taps: Vec<Vec<i32>>,
    pub logits: Vec<i32>,
}

impl FixedBase {
    /// Exact float image of the payload `[x1 | x2 | x3 | x4 | logits]`.
    pub fn to_payload(&self) -> Vec<f32> {
        self.taps
            .iter()
            .flatten()
            .chain(&self.logits)
            .map(|&v| act_to_f32(v))
            .collect()
    }
}

impl FixedModel {
    pub fn from_model(model: &Model<f32>, sat: &mut u64) -> Result<Self> {
        let mut weights = Vec::with_capacity(NUM_LAYERS);
        let mut biases = Vec::with_capacity(NUM_LAYERS);
        let mut shapes = Vec::with_capacity(NUM_LAYERS);
        for layer in model.layers() {
            weights.push(
                layer
                    .weight
                    .data()
                    .iter()
                    .map(|&w| to_param(w, sat))
                    .collect::<Result<_>>()?,
            );
            biases.push(
                layer
                    .bias
                    .data()
                    .iter()
                    .map(|&b| to_param(b, sat))
                    .collect::<Result<_>>()?,
            );
            shapes.push(layer.weight.shape().to_vec());
        }
        Ok(Self {
            spec: *model.spec(),
            weights,
            biases,
            shapes,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn conv(
        &self,
        k: usize,
        x: &[i32],
        [c_in, h, w]: [usize; 3],
        pad: usize,
        sat: &mut u64,
    ) -> Vec<i32> {
        let c_out = self.shapes[k][0];
        let (oh, ow) = (h + 2 * pad + 1 - KERNEL, w + 2 * pad + 1 - KERNEL);
        let wt = &self.weights[k];
        let mut acc = vec![0i64; c_out * oh * ow];
        for co in 0..c_out {
            let out = &mut acc[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..c_in {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = wt[((co * c_in + ci) * KERNEL + ky) * KERNEL + kx] as i64;
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let row = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = ox + kx;
                                if ix >= pad && ix - pad < w {
                                    *o += wv * row[ix - pad] as i64;
                                }
                            }
                        }
                    }
                }
            }
        }
        let bias = &self.biases[k];
        acc.iter()
            .enumerate()
            .map(|(i, &a)| {
                let b = (bias[i / (oh * ow)] as i64) << Q8_16.frac_bits;
                act(shr_rne(a + b, Q4_12.frac_bits), sat)
            })
            .collect()
    }

    fn fc(&self, k: usize, x: &[i32], sat: &mut u64) -> Vec<i32> {
        let d_in = self.shapes[k][1];
        self.weights[k]
            .chunks(d_in)
            .zip(&self.biases[k])
            .map(|(row, &b)| {
                let wide = dot(row, x) + ((b as i64) << Q8_16.frac_bits);
                act(shr_rne(wide, Q4_12.frac_bits), sat)
            })
            .collect()
    }

    /// Frozen forward pass; `x0` is the flattened input in Q8.16.
    pub fn forward(&self, x0: &[i32], sat: &mut u64) -> Result<FixedBase> {
        if x0.len() != self.spec.input_len() {
            return Err(Error::shape(
                "fixed_forward",
                &[self.spec.input_len()],
                &[x0.len()],
            ));
        }
        let relu = |v: Vec<i32>| v.into_iter().map(|x| x.max(0)).collect::<Vec<_>>();
        let c1 = relu(self.conv(
            0,
            x0,
            [self.spec.in_channels, self.spec.height, self.spec.width],
            self.spec.conv1_padding,
            sat,
        ));
        let x1 = pool(&c1, self.shapes[0][0], 28, 28);
        let c2 = relu(self.conv(1, &x1, [self.shapes[0][0], 14, 14], 0, sat));
        let x2 = pool(&c2, self.shapes[1][0], 10, 10);
        let x3 = relu(self.fc(2, &x2, sat));
        let x4 = relu(self.fc(3, &x3, sat));
        let logits = self.fc(4, &x4, sat);
        Ok(FixedBase {
            taps: vec![x1, x2, x3, x4],
            logits,
        })
    }
}

fn pool(x: &[i32], c: usize, h: usize, w: usize) -> Vec<i32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out.push(p[i].max(p[i + 1]).max(p[i + w]).max(p[i + w + 1]));
            }
        }
    }
    out
}

/// One skip adapter `x_src -> logits` with Q4.12 factors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedAdapter {
    pub src: usize,
    pub rank: usize,
    pub d_in: usize,
    /// `[rank, d_in]`
    pub a: Vec<i16>,
    /// `[10, rank]`
    pub b: Vec<i16>,
}

impl FixedAdapter {
    pub fn from_float(ad: &Adapter<f32>, sat: &mut u64) -> Result<Self> {
        if ad.dst != NUM_LAYERS || ad.d_out() != NUM_CLASSES {
            return Err(Error::InvalidArgument(
                "fixed adapters must feed the logits".into(),
            ));
        }
        Ok(Self {
            src: ad.src,
            rank: ad.rank(),
            d_in: ad.d_in(),
            a: ad
                .a
                .data()
                .iter()
                .map(|&v| to_param(v, sat))
                .collect::<Result<_>>()?,
            b: ad
                .b
                .data()
                .iter()
                .map(|&v| to_param(v, sat))
                .collect::<Result<_>>()?,
        })
    }

    pub fn to_float(&self) -> Adapter<f32> {
        let t = |v: &[i16], shape: &[usize]| {
            crate::tensor::Tensor::new(shape, v.iter().map(|&r| param_to_f32(r)).collect())
                .expect("sized")
        };
        Adapter {
            a: t(&self.a, &[self.rank, self.d_in]),
            b: t(&self.b, &[NUM_CLASSES, self.rank]),
            src: self.src,
            dst: NUM_LAYERS,
        }
    }
}

/// One sample entering the fixed datapath: taps x0..x4 and base logits.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedInput {
    pub taps: Vec<Vec<i32>>,
    pub base_logits: Vec<i32>,
    pub label: usize,
}

impl FixedInput {
    /// Converts the raw input and a float payload to Q8.16.
    pub fn from_payload(
        x0: &[f32],
        payload: &[f32],
        spec: &ModelSpec,
        label: usize,
        sat: &mut u64,
    ) -> Result<Self> {
        let dims = spec.tap_dims();
        if payload.len() != spec.cache_payload_len() {
            return Err(Error::shape(
                "fixed payload",
                &[spec.cache_payload_len()],
                &[payload.len()],
            ));
        }
        let conv = |v: &[f32], sat: &mut u64| {
            v.iter()
                .map(|&x| to_act(x, sat))
                .collect::<Result<Vec<_>>>()
        };
        let mut taps = vec![conv(x0, sat)?];
        let mut off = 0;
        for d in &dims[1..] {
            taps.push(conv(&payload[off..off + d], sat)?);
            off += d;
        }
        Ok(Self {
            taps,
            base_logits: conv(&payload[off..], sat)?,
            label,
        })
    }
}

/// Every intermediate of one fixed-point sample, for diffing against the
/// float engine.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedTrace {
    pub hs: Vec<Vec<i32>>,
    /// `B h` per adapter, rounded to Q8.16 (the logits use the exact sum).
    pub deltas: Vec<Vec<i32>>,
    pub logits: Vec<i32>,
    pub probs: Vec<i32>,
    /// Q4.12
    pub dlogits: Vec<i16>,
    /// Per adapter `(dA, dB)` in Q4.12.
    pub grads: Vec<(Vec<i16>, Vec<i16>)>,
    pub saturations: u64,
}

impl FixedTrace {
    /// Named float views of the trace tensors.
    pub fn to_float(&self) -> Vec<(String, Vec<f32>)> {
        let a = |v: &[i32]| v.iter().map(|&r| act_to_f32(r)).collect::<Vec<_>>();
        let p = |v: &[i16]| v.iter().map(|&r| param_to_f32(r)).collect::<Vec<_>>();
        let mut out = Vec::new();
        for (i, h) in self.hs.iter().enumerate() {
            out.push((format!("h{i}"), a(h)));
        }
        for (i, d) in self.deltas.iter().enumerate() {
            out.push((format!("delta{i}"), a(d)));
        }
        out.push(("logits".into(), a(&self.logits)));
        out.push(("probs".into(), a(&self.probs)));
        out.push(("dlogits".into(), p(&self.dlogits)));
        for (i, (da, db)) in self.grads.iter().enumerate() {
            out.push((format!("dA{i}"), p(da)));
            out.push((format!("dB{i}"), p(db)));
        }
        out
    }
}

fn adapter_hidden(ad: &FixedAdapter, x: &[i32], sat: &mut u64) -> Vec<i32> {
    ad.a.chunks(ad.d_in)
        .map(|row| act(shr_rne(dot(row, x), Q4_12.frac_bits), sat))
        .collect()
}

/// `B h` per class, exact (fraction bits 28).
fn adapter_delta_wide(ad: &FixedAdapter, h: &[i32]) -> Vec<i64> {
    ad.b.chunks(ad.rank).map(|row| dot(row, h)).collect()
}

/// Forward, LUT softmax, and per-adapter gradients for one sample. Adapters
/// are visited in `order`; the result does not depend on it.
pub fn fixed_sample(
    adapters: &[FixedAdapter],
    input: &FixedInput,
    lut: &SoftmaxLut,
    order: &[usize],
) -> Result<FixedTrace> {
    if order.len() != adapters.len() || adapters.len() != NUM_LAYERS {
        return Err(Error::InvalidArgument(
            "adapter order must cover all five adapters".into(),
        ));
    }
    let mut sat = 0u64;
    let n = adapters.len();
    let mut hs = vec![Vec::new(); n];
    let mut wide = vec![Vec::new(); n];
    for &i in order {
        let ad = &adapters[i];
        let x = input
            .taps
            .get(ad.src)
            .ok_or(Error::InvalidArgument("missing tap".into()))?;
        if x.len() != ad.d_in {
            return Err(Error::shape("fixed adapter", &[ad.d_in], &[x.len()]));
        }
        hs[i] = adapter_hidden(ad, x, &mut sat);
        wide[i] = adapter_delta_wide(ad, &hs[i]);
    }
    let mut logit_wide: Vec<i64> = input
        .base_logits
        .iter()
        .map(|&l| (l as i64) << Q4_12.frac_bits)
        .collect();
    for &i in order {
        for (acc, d) in logit_wide.iter_mut().zip(&wide[i]) {
            *acc += d;
        }
    }
    let logits: Vec<i32> = logit_wide
        .iter()
        .map(|&v| act(shr_rne(v, Q4_12.frac_bits), &mut sat))
        .collect();
    let deltas = wide
        .iter()
        .map(|w| {
            w.iter()
                .map(|&v| act(shr_rne(v, Q4_12.frac_bits), &mut sat))
                .collect()
        })
        .collect();
    let probs = lut.softmax(&logits);
    if input.label >= NUM_CLASSES {
        return Err(Error::LabelOutOfRange {
            label: input.label,
            classes: NUM_CLASSES,
        });
    }
    let shift = Q8_16.frac_bits - Q4_12.frac_bits;
    let dlogits: Vec<i16> = probs
        .iter()
        .enumerate()
        .map(|(o, &p)| {
            let t = if o == input.label { Q8_16.one() } else { 0 };
            param(shr_rne(p as i64 - t, shift), &mut sat)
        })
        .collect();

    let mut grads = vec![(Vec::new(), Vec::new()); n];
    for &i in order {
        let ad = &adapters[i];
        let h = &hs[i];
        let x = &input.taps[ad.src];
        let db: Vec<i16> = dlogits
            .iter()
            .flat_map(|&g| h.iter().map(move |&hv| (g, hv)))
            .map(|(g, hv)| param(shr_rne(g as i64 * hv as i64, Q8_16.frac_bits), &mut sat))
            .collect();
        let dh: Vec<i64> = (0..ad.rank)
            .map(|r| {
                let wide: i64 = (0..NUM_CLASSES)
                    .map(|o| ad.b[o * ad.rank + r] as i64 * dlogits[o] as i64)
                    .sum();
                Q4_12.saturate(shr_rne(wide, Q4_12.frac_bits), &mut sat)
            })
            .collect();
        let mut da = Vec::with_capacity(ad.rank * ad.d_in);
        for &g in &dh {
            for &xv in x {
                da.push(param(shr_rne(g * xv as i64, Q8_16.frac_bits), &mut sat));
            }
        }
        grads[i] = (da, db);
    }
    Ok(FixedTrace {
        hs,
        deltas,
        logits,
        probs,
        dlogits,
        grads,
        saturations: sat,
    })
}

/// Fixed logits only (inference).
pub fn fixed_logits(adapters: &[FixedAdapter], input: &FixedInput) -> Vec<i32> {
    let mut sat = 0;
    let mut logit_wide: Vec<i64> = input
        .base_logits
        .iter()
        .map(|&l| (l as i64) << Q4_12.frac_bits)
        .collect();
    for ad in adapters {
        let h = adapter_hidden(ad, &input.taps[ad.src], &mut sat);
        for (acc, d) in logit_wide.iter_mut().zip(adapter_delta_wide(ad, &h)) {
            *acc += d;
        }
    }
    logit_wide
        .iter()
        .map(|&v| act(shr_rne(v, Q4_12.frac_bits), &mut sat))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FixedStepStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub saturations: u64,
}

/// One mini-batch of fixed-point InstantFT: per-sample gradients summed
/// exactly in sample order, then `p -= eta * sum / batch`, rounded once.
pub fn fixed_instantft_step(
    adapters: &mut [FixedAdapter],
    batch: &[FixedInput],
    eta: i16,
    lut: &SoftmaxLut,
    order: &[usize],
) -> Result<FixedStepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let traces = batch
        .par_iter()
        .map(|s| fixed_sample(adapters, s, lut, order))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = FixedStepStats::default();
    for (t, s) in traces.iter().zip(batch) {
        stats.saturations += t.saturations;
        let p = Q8_16
            .to_f64(t.probs[s.label] as i64)
            .max(1.0 / Q8_16.one() as f64);
        stats.loss_sum -= p.ln();
        stats.correct += usize::from(argmax_raw(&t.logits) == s.label);
    }
    let den = batch.len() as i64 * Q4_12.one();
    let mut sat = 0u64;
    for &i in order {
        let ad = &mut adapters[i];
        let update = |params: &mut [i16], pick: &dyn Fn(&FixedTrace) -> &[i16], sat: &mut u64| {
            for (j, p) in params.iter_mut().enumerate() {
                let sum: i64 = traces.iter().map(|t| pick(t)[j] as i64).sum();
                let step = div_rne(eta as i64 * sum, den);
                *p = param(*p as i64 - step, sat);
            }
        };
        update(&mut ad.a, &|t: &FixedTrace| &t.grads[i].0, &mut sat);
        update(&mut ad.b, &|t: &FixedTrace| &t.grads[i].1, &mut sat);
    }
    stats.saturations += sat;
    Ok(stats)
}

fn fixed_eval(adapters: &[FixedAdapter], inputs: &[FixedInput]) -> f64 {
    let correct: usize = inputs
        .par_iter()
        .map(|s| usize::from(argmax_raw(&fixed_logits(adapters, s)) == s.label))
        .sum();
    correct as f64 / inputs.len() as f64
}

fn image_to_act(x: &[f32], sat: &mut u64) -> Result<Vec<i32>> {
    x.iter().map(|&v| to_act(v, sat)).collect()
}

/// InstantFT with the whole datapath in fixed point. The frozen network on a
/// cache miss also runs in fixed point; its Q8.16 outputs are stored as
/// exact floats and converted back on every read.
pub(crate) fn finetune_fixed(
    model: &Model<f32>,
    cfg: &FinetuneConfig,
    train: &Dataset,
    eval: &Dataset,
) -> Result<FinetuneOutcome> {
    if cfg.method != Method::InstantFt {
        return Err(Error::Config(
            "fixed-point arithmetic requires instantft".into(),
        ));
    }
    let spec = *model.spec();
    let counters = Counters::default();
    let mut setup_sat = 0u64;
    let fixed_model = FixedModel::from_model(model, &mut setup_sat)?;
    let float_init = PeftModel::new(Method::InstantFt, model.clone(), cfg.rank, cfg.seed);
    let mut adapters = float_init
        .adapters
        .iter()
        .map(|a| FixedAdapter::from_float(a, &mut setup_sat))
        .collect::<Result<Vec<_>>>()?;
    let eta = to_param(cfg.lr, &mut setup_sat)?;
    let lut = SoftmaxLut::new();
    let order: Vec<usize> = (0..NUM_LAYERS).collect();
    let cache = match cfg.cache {
        CacheMode::Off => None,
        mode => Some(ForwardCache::new(
            mode,
            train.len(),
            spec.cache_payload_len(),
        )?),
    };

    let eval_inputs = (0..eval.len())
        .into_par_iter()
        .map(|i| {
            let mut sat = 0;
            let x0 = image_to_act(eval.image(i), &mut sat)?;
            let base = fixed_model.forward(&x0, &mut sat)?;
            FixedInput::from_payload(
                eval.image(i),
                &base.to_payload(),
                &spec,
                eval.label(i),
                &mut sat,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let initial_eval_acc = fixed_eval(&adapters, &eval_inputs);
    let mut final_eval_acc = initial_eval_acc;
    counters
        .saturation_events
        .fetch_add(setup_sat, Ordering::Relaxed);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut train_ms = 0.0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in train.batches(cfg.batch, cfg.seed, epoch as u64)? {
            let inputs = batch
                .indices
                .par_iter()
                .zip(&batch.labels)
                .map(|(&i, &label)| {
                    let mut sat = 0u64;
                    let x0 = image_to_act(train.image(i), &mut sat)?;
                    let payload =
                        fixed_payload(&fixed_model, &x0, cache.as_ref(), i, &counters, &mut sat)?;
                    let input = Counters::time(&counters.cache_io_ns, || {
                        FixedInput::from_payload(train.image(i), &payload, &spec, label, &mut sat)
                    })?;
                    counters.saturation_events.fetch_add(sat, Ordering::Relaxed);
                    Ok(input)
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = Counters::time(&counters.backward_ns, || {
                fixed_instantft_step(&mut adapters, &inputs, eta, &lut, &order)
            })?;
            loss_sum += stats.loss_sum;
            correct += stats.correct;
            counters
                .saturation_events
                .fetch_add(stats.saturations, Ordering::Relaxed);
            let written: usize = adapters.iter().map(|a| a.a.len() + a.b.len()).sum();
            counters
                .updated_entries
                .fetch_add(written as u64, Ordering::Relaxed);
        }
        let time_ms = start.elapsed().as_secs_f64() * 1e3;
        train_ms += time_ms;
        let last = epoch + 1 == cfg.epochs;
        let eval_acc = if cfg.eval_each_epoch || last {
            final_eval_acc = fixed_eval(&adapters, &eval_inputs);
            Some(final_eval_acc)
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
            saturation_events: counters.saturation_events.load(Ordering::Relaxed),
        });
    }
    let peft = PeftModel::from_parts(
        Method::InstantFt,
        model.clone(),
        adapters.iter().map(FixedAdapter::to_float).collect(),
    )?;
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

fn fixed_payload(
    model: &FixedModel,
    x0: &[i32],
    cache: Option<&ForwardCache>,
    index: usize,
    counters: &Counters,
    sat: &mut u64,
) -> Result<Vec<f32>> {
    if let Some(c) = cache {
        if let Some(p) = Counters::time(&counters.cache_io_ns, || c.get(index))? {
            return Ok(p);
        }
    }
    counters.base_forward_calls.fetch_add(1, Ordering::Relaxed);
    let payload =
        Counters::time(&counters.base_forward_ns, || model.forward(x0, sat))?.to_payload();
    match cache {
        Some(c) => Counters::time(&counters.cache_io_ns, || c.put_and_read(index, &payload)),
        None => Ok(payload),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::softmax;
    use crate::model::Variant;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conversions_and_identities() {
        let mut sat = 0;
        assert_eq!(fx_convert(1.0, Q8_16, &mut sat).unwrap().raw, 65536);
        let one_p = Fix {
            raw: 4096,
            fmt: Q4_12,
        };
        let one_a = Fix {
            raw: 65536,
            fmt: Q8_16,
        };
        assert_eq!(fx_mul(one_p, one_a, Q8_16, &mut sat).raw, 65536);
        assert_eq!(sat, 0);
        assert_eq!(
            fx_convert(200.0, Q8_16, &mut sat).unwrap().raw,
            (1 << 23) - 1
        );
        assert_eq!(sat, 1);
        assert_eq!(fx_convert(-9.0, Q4_12, &mut sat).unwrap().raw, -(1 << 15));
        assert!(fx_convert(f64::NAN, Q8_16, &mut sat).is_err());
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(shr_rne(3, 1), 2); // 1.5 -> 2
        assert_eq!(shr_rne(5, 1), 2); // 2.5 -> 2
        assert_eq!(shr_rne(-3, 1), -2);
        assert_eq!(shr_rne(-5, 1), -2);
        assert_eq!(shr_rne(7, 2), 2); // 1.75 -> 2
        assert_eq!(div_rne(5, 2), 2);
        assert_eq!(div_rne(7, 2), 4);
        assert_eq!(div_rne(-7, 2), -4);
        assert_eq!(div_rne(10, 4), 2);
        let mut sat = 0;
        assert_eq!(fx_convert(0.5 / 65536.0, Q8_16, &mut sat).unwrap().raw, 0);
        assert_eq!(fx_convert(1.5 / 65536.0, Q8_16, &mut sat).unwrap().raw, 2);
    }

    #[test]
    fn lut_entries_are_exact_and_monotone() {
        let lut = SoftmaxLut::new();
        assert_eq!(lut.exp[0], 65536);
        assert!(lut.exp.windows(2).all(|w| w[0] >= w[1]));
        assert!(lut.recip.windows(2).all(|w| w[0] > w[1]));
        for k in [0usize, 1, 100, 511] {
            let want = (-(k as f64) * 16.0 / 511.0).exp() * 65536.0;
            assert_eq!(lut.exp[k] as f64, want.round_ties_even());
        }
        assert_eq!(lut.exp_of(0), 65536);
        assert_eq!(lut.exp_of(-16 * 65536), lut.exp[511]);
        assert_eq!(lut.exp_of(i32::MIN / 2), lut.exp[511]);
    }

    #[test]
    fn lut_softmax_cases() {
        let lut = SoftmaxLut::new();
        let tol = 1.0 / 256.0;
        for p in lut.softmax(&[12345; 10]) {
            assert!((Q8_16.to_f64(p as i64) - 0.1).abs() <= tol);
        }
        let mut dom = vec![-16 * 65536; 10];
        dom[0] = 0;
        let p = lut.softmax(&dom);
        assert!((Q8_16.to_f64(p[0] as i64) - 1.0).abs() <= tol);
    }

    #[test]
    fn lut_softmax_tracks_float_softmax() {
        let lut = SoftmaxLut::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let scale: f64 = rng.random_range(0.1..12.0);
            let raw: Vec<i32> = (0..10)
                .map(|_| (rng.random_range(-1.0..1.0) * scale * 65536.0) as i32)
                .collect();
            let float: Vec<f64> = softmax(
                &raw.iter()
                    .map(|&r| Q8_16.to_f64(r as i64))
                    .collect::<Vec<_>>(),
            );
            let fixed = lut.softmax(&raw);
            let sum: f64 = fixed.iter().map(|&p| Q8_16.to_f64(p as i64)).sum();
            assert!((sum - 1.0).abs() <= 1.0 / 256.0, "sum {sum}");
            for (f, q) in float.iter().zip(&fixed) {
                let q = Q8_16.to_f64(*q as i64);
                assert!((0.0..=1.0).contains(&q));
                worst = worst.max((f - q).abs());
            }
        }
        assert!(worst <= 1.0 / 64.0, "worst deviation {worst}");
    }

    #[test]
    fn lut_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lut.bin");
        let lut = SoftmaxLut::new();
        lut.save(&p).unwrap();
        assert_eq!(SoftmaxLut::load(&p).unwrap(), lut);
        std::fs::write(&p, b"nope").unwrap();
        assert!(SoftmaxLut::load(&p).is_err());
    }

    fn toy_input(seed: u64) -> FixedInput {
        let spec = Variant::Mnist.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<f32> = (0..784).map(|_| rng.random_range(0.0..1.0)).collect();
        let model = Model::<f32>::init(spec, seed);
        let mut sat = 0;
        let fm = FixedModel::from_model(&model, &mut sat).unwrap();
        let base = fm
            .forward(&image_to_act(&x0, &mut sat).unwrap(), &mut sat)
            .unwrap();
        FixedInput::from_payload(
            &x0,
            &base.to_payload(),
            &spec,
            (seed % 10) as usize,
            &mut sat,
        )
        .unwrap()
    }

    fn toy_adapters(seed: u64, b_scale: f32) -> Vec<FixedAdapter> {
        let model = Model::<f32>::zeros(Variant::Mnist.spec());
        let mut p = PeftModel::new(Method::InstantFt, model, 4, seed);
        for ad in &mut p.adapters {
            ad.b.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i as f32 * 0.7 + seed as f32).sin() * b_scale);
        }
        let mut sat = 0;
        p.adapters
            .iter()
            .map(|a| FixedAdapter::from_float(a, &mut sat).unwrap())
            .collect()
    }

    #[test]
    fn zero_b_zero_eta_is_identity() {
        let input = toy_input(1);
        let mut ads = toy_adapters(1, 0.0);
        let before = ads.clone();
        let lut = SoftmaxLut::new();
        let t = fixed_sample(&ads, &input, &lut, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(t.logits, input.base_logits);
        fixed_instantft_step(&mut ads, &[input], 0, &lut, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(ads, before);
    }

    #[test]
    fn adapter_order_does_not_change_updates() {
        let lut = SoftmaxLut::new();
        let batch: Vec<FixedInput> = (0..6).map(toy_input).collect();
        let mut fwd = toy_adapters(3, 0.2);
        let mut rev = fwd.clone();
        for _ in 0..3 {
            let a = fixed_instantft_step(&mut fwd, &batch, 410, &lut, &[0, 1, 2, 3, 4]).unwrap();
            let b = fixed_instantft_step(&mut rev, &batch, 410, &lut, &[4, 3, 2, 1, 0]).unwrap();
            assert_eq!(fwd, rev);
            assert_eq!(a, b);
        }
        assert_ne!(fwd, toy_adapters(3, 0.2));
    }

    #[test]
    fn fixed_base_tracks_float_base() {
        let spec = Variant::Mnist.spec();
        let model = Model::<f32>::init(spec, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0: Vec<f32> = (0..784).map(|_| rng.random_range(0.0..1.0)).collect();
        let float = model
            .base_forward(&crate::tensor::Tensor::new(&[1, 28, 28], x0.clone()).unwrap())
            .unwrap()
            .to_payload();
        let mut sat = 0;
        let fm = FixedModel::from_model(&model, &mut sat).unwrap();
        let fixed = fm
            .forward(&image_to_act(&x0, &mut sat).unwrap(), &mut sat)
            .unwrap()
            .to_payload();
        assert_eq!(sat, 0);
        let worst = float
            .iter()
            .zip(&fixed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 0.02, "worst {worst}");
    }

    #[test]
    fn trace_exposes_named_tensors() {
        let t = fixed_sample(
            &toy_adapters(2, 0.1),
            &toy_input(2),
            &SoftmaxLut::new(),
            &[0, 1, 2, 3, 4],
        )
        .unwrap();
        let names: Vec<String> = t.to_float().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"logits".to_string()) && names.contains(&"dA4".to_string()));
    }

    proptest! {
        #[test]
        fn ops_saturate_instead_of_wrapping(a in any::<i32>(), b in any::<i32>()) {
            let fa = Fix { raw: Q8_16.saturate(a as i64, &mut 0), fmt: Q8_16 };
            let fb = Fix { raw: Q8_16.saturate(b as i64, &mut 0), fmt: Q8_16 };
            let mut sat = 0;
            let s = fx_add(fa, fb, &mut sat);
            let exact = fa.raw + fb.raw;
            prop_assert_eq!(s.raw, exact.clamp(Q8_16.min_raw(), Q8_16.max_raw()));
            let m = fx_mul(fa, fb, Q8_16, &mut sat);
            let real = fa.to_f64() * fb.to_f64();
            prop_assert!(m.raw >= Q8_16.min_raw() && m.raw <= Q8_16.max_raw());
            if real.abs() < 127.0 {
                prop_assert!((m.to_f64() - real).abs() <= 0.5 / 65536.0 + 1e-12);
            } else {
                prop_assert_eq!(m.raw.signum(), real.signum() as i64);
            }
            let p = Fix { raw: (a as i16) as i64, fmt: Q4_12 };
            let q = fx_mul(p, p, Q4_12, &mut sat);
            prop_assert!(q.raw >= 0 && q.raw <= Q4_12.max_raw());
        }

        #[test]
        fn convert_is_idempotent(x in -300.0f64..300.0) {
            for fmt in [Q8_16, Q4_12] {
                let a = fx_convert(x, fmt, &mut 0).unwrap();
                let b = fx_convert(a.to_f64(), fmt, &mut 0).unwrap();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn lut_softmax_is_a_distribution(raw in proptest::collection::vec(-(1i32 << 23)..(1 << 23), 10)) {
            let lut = SoftmaxLut::new();
            let p = lut.softmax(&raw);
            let sum: f64 = p.iter().map(|&v| Q8_16.to_f64(v as i64)).sum();
            prop_assert!((sum - 1.0).abs() <= 1.0 / 256.0);
            for v in p {
                prop_assert!((0..=65536).contains(&v));
            }
        }
    }
}
