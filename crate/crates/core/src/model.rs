//! LeNet-5-style backbone and its dataset-shape variants.
//!
//! ```text
//! x0 -> conv1(5x5) -> relu -> pool -> x1 -> conv2(5x5) -> relu -> pool -> x2
//!    -> fc1 -> relu -> x3 -> fc2 -> relu -> x4 -> fc3 -> logits
//! ```
//!
//! Layers are indexed 0..5 in code; adapters address them 1-based through
//! their `dst` field. Tap `j` is the (flattened) input of layer `j`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{Adapter, AdapterGrads};
use crate::error::{Error, Result};
use crate::kernels::{
    conv2d_backward_with, conv2d_forward, fc_backward_with, fc_forward, maxpool2x2_backward,
    maxpool2x2_forward, relu_backward, relu_forward, GradRequest, PoolMask,
};
use crate::tensor::{lit, LayerParams, Real, Tensor};

pub const NUM_LAYERS: usize = 5;
pub const NUM_CLASSES: usize = 10;
pub const KERNEL: usize = 5;
const CONV1_OUT: usize = 6;
const CONV2_OUT: usize = 16;
const FC1_OUT: usize = 120;
const FC2_OUT: usize = 84;

/// Input-shape variants of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// 1x28x28 input, conv1 padding 2 (MNIST, Fashion-MNIST).
    Mnist,
    /// 3x32x32 input, conv1 padding 0 (SVHN).
    Svhn,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Mnist, Variant::Svhn];

    pub fn spec(self) -> ModelSpec {
        match self {
            Variant::Mnist => ModelSpec::new(1, 28, 28, 2).expect("valid"),
            Variant::Svhn => ModelSpec::new(3, 32, 32, 0).expect("valid"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mnist => "mnist",
            Variant::Svhn => "svhn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" | "fmnist" => Ok(Variant::Mnist),
            "svhn" => Ok(Variant::Svhn),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_padding: usize,
}

impl ModelSpec {
    /// Conv1 must produce a 28x28 map so that the downstream shapes match.
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        conv1_padding: usize,
    ) -> Result<Self> {
        let spec = Self {
            in_channels,
            height,
            width,
            conv1_padding,
        };
        if in_channels == 0 || height + 2 * conv1_padding != 32 || width + 2 * conv1_padding != 32 {
            return Err(Error::InvalidArgument(format!(
                "unsupported input {in_channels}x{height}x{width} with padding {conv1_padding}"
            )));
        }
        Ok(spec)
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.spec() == *self)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Flattened adapter tap widths `d_0..d_4`.
    pub fn tap_dims(&self) -> [usize; NUM_LAYERS] {
        [
            self.input_len(),
            CONV1_OUT * 14 * 14,
            CONV2_OUT * 5 * 5,
            FC1_OUT,
            FC2_OUT,
        ]
    }

    /// Flattened pre-pool output width of each layer.
    pub fn layer_out_dims(&self) -> [usize; NUM_LAYERS] {
        [
            CONV1_OUT * 28 * 28,
            CONV2_OUT * 10 * 10,
            FC1_OUT,
            FC2_OUT,
            NUM_CLASSES,
        ]
    }

    pub fn weight_shapes(&self) -> [Vec<usize>; NUM_LAYERS] {
        [
            vec![CONV1_OUT, self.in_channels, KERNEL, KERNEL],
            vec![CONV2_OUT, CONV1_OUT, KERNEL, KERNEL],
            vec![FC1_OUT, CONV2_OUT * 5 * 5],
            vec![FC2_OUT, FC1_OUT],
            vec![NUM_CLASSES, FC2_OUT],
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>() + s[0])
            .sum()
    }

    /// Floats in one cache entry: taps x1..x4 followed by the base logits.
    pub fn cache_payload_len(&self) -> usize {
        self.tap_dims()[1..].iter().sum::<usize>() + NUM_CLASSES
    }
}

/// Frozen (or trainable) backbone parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    layers: Vec<LayerParams<T>>,
}

/// Output of the frozen network: taps x1..x4 and the base logits.
#[derive(Clone, Debug)]
pub struct BaseOutput<T = f32> {
    pub taps: [Tensor<T>; 4],
    pub logits: Tensor<T>,
}

impl<T: Real> BaseOutput<T> {
    /// Concatenated cache payload `[x1 | x2 | x3 | x4 | logits]`.
    pub fn to_payload(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.taps.iter().map(Tensor::len).sum::<usize>() + 10);
        for t in &self.taps {
            out.extend_from_slice(t.data());
        }
        out.extend_from_slice(self.logits.data());
        out
    }
}

/// Everything a backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    /// Tap `j` is the input of layer `j` (x0 in its image shape).
    pub taps: Vec<Tensor<T>>,
    /// Pre-activation output of every layer, adapter deltas included.
    pub pre: Vec<Tensor<T>>,
    pub pool_masks: Vec<PoolMask>,
    /// `h = A x` for each adapter, aligned with the adapter slice.
    pub hs: Vec<Tensor<T>>,
}

impl<T: Real> Trace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        &self.pre[NUM_LAYERS - 1]
    }
}

/// Which parameter gradients to form and how deep to propagate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardPlan {
    pub weights: [bool; NUM_LAYERS],
    pub biases: [bool; NUM_LAYERS],
    /// Lowest layer whose output gradient is needed; nothing below is touched.
    pub lowest: usize,
}

#[derive(Clone, Debug)]
pub struct ModelGrads<T = f32> {
    pub dw: Vec<Option<Tensor<T>>>,
    pub db: Vec<Option<Tensor<T>>>,
    pub adapters: Vec<AdapterGrads<T>>,
    /// Number of activation-gradient tensors formed below the output.
    pub activation_grads: u64,
}

impl<T: Real> Model<T> {
    pub fn zeros(spec: ModelSpec) -> Self {
        let layers = spec
            .weight_shapes()
            .iter()
            .map(|s| LayerParams::zeros(s))
            .collect();
        Self { spec, layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(spec);
        for layer in &mut model.layers {
            let shape = layer.weight.shape().to_vec();
            let receptive: usize = shape[2..].iter().product();
            let fan_in = shape[1] * receptive;
            let fan_out = shape[0] * receptive;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = lit(rng.random_range(-bound..bound));
            }
        }
        model
    }

    pub fn from_layers(spec: ModelSpec, layers: Vec<LayerParams<T>>) -> Result<Self> {
        let shapes = spec.weight_shapes();
        if layers.len() != NUM_LAYERS {
            return Err(Error::shape(
                "Model::from_layers",
                &[NUM_LAYERS],
                &[layers.len()],
            ));
        }
        for (l, s) in layers.iter().zip(&shapes) {
            l.weight.expect_shape("Model::from_layers", s)?;
            l.bias.expect_shape("Model::from_layers", &s[..1])?;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec,
            layers: self.layers.iter().map(LayerParams::cast).collect(),
        }
    }

    fn check_input(&self, x0: &Tensor<T>) -> Result<()> {
        x0.expect_shape("model_forward", &self.spec.input_shape())
    }

    /// Frozen-network forward pass returning taps x1..x4 and base logits.
    pub fn base_forward(&self, x0: &Tensor<T>) -> Result<BaseOutput<T>> {
        let trace = self.forward_trace(x0, &[])?;
        let mut taps = trace.taps.into_iter().skip(1);
        let mut next = || taps.next().expect("four taps");
        Ok(BaseOutput {
            taps: [next(), next(), next(), next()],
            logits: trace.pre.into_iter().last().expect("logits"),
        })
    }

    pub fn logits(&self, x0: &Tensor<T>, adapters: &[Adapter<T>]) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x0, adapters)?.pre.pop().expect("logits"))
    }

    /// Forward pass keeping everything backward needs. Each adapter adds
    /// `B A x^src` into the pre-activation output of layer `dst`.
    pub fn forward_trace(&self, x0: &Tensor<T>, adapters: &[Adapter<T>]) -> Result<Trace<T>> {
        self.check_input(x0)?;
        for ad in adapters {
            if ad.dst == 0 || ad.dst > NUM_LAYERS || ad.src >= ad.dst {
                return Err(Error::InvalidArgument(format!(
                    "adapter wiring {} -> {} is invalid",
                    ad.src, ad.dst
                )));
            }
        }
        let mut taps: Vec<Tensor<T>> = vec![x0.clone()];
        let mut pre: Vec<Tensor<T>> = Vec::with_capacity(NUM_LAYERS);
        let mut pool_masks = Vec::with_capacity(2);
        let mut hs: Vec<Option<Tensor<T>>> = vec![None; adapters.len()];

        for k in 0..NUM_LAYERS {
            let input = &taps[k];
            let mut out = match k {
                0 => conv2d_forward(input, &self.layers[0], self.spec.conv1_padding)?,
                1 => conv2d_forward(input, &self.layers[1], 0)?,
                _ => fc_forward(input, &self.layers[k])?,
            };
            for (i, ad) in adapters.iter().enumerate() {
                if ad.dst != k + 1 {
                    continue;
                }
                let (h, delta) = ad.forward(taps[ad.src].data())?;
                if delta.len() != out.len() {
                    return Err(Error::shape("adapter delta", out.shape(), delta.shape()));
                }
                for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
                    *o += *d;
                }
                hs[i] = Some(h);
            }
            if k < NUM_LAYERS - 1 {
                let act = relu_forward(&out);
                let next = if k < 2 {
                    let (pooled, mask) = maxpool2x2_forward(&act)?;
                    pool_masks.push(mask);
                    pooled
                } else {
                    act
                };
                taps.push(next);
            }
            pre.push(out);
        }
        Ok(Trace {
            taps,
            pre,
            pool_masks,
            hs: hs
                .into_iter()
                .map(|h| h.expect("every adapter ran"))
                .collect(),
        })
    }

    /// Backpropagates `dlogits` through the layers `plan.lowest..5`, forming
    /// only the gradients the plan asks for. Adapter input gradients are
    /// accumulated into their source tap when that tap is still above
    /// `plan.lowest`.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        dlogits: &Tensor<T>,
        plan: &BackwardPlan,
        adapters: &[Adapter<T>],
    ) -> Result<ModelGrads<T>> {
        dlogits.expect_shape("model_backward", &[NUM_CLASSES])?;
        if plan.lowest >= NUM_LAYERS {
            return Err(Error::InvalidArgument(
                "backward plan lowest layer out of range".into(),
            ));
        }
        let mut dw = vec![None; NUM_LAYERS];
        let mut db = vec![None; NUM_LAYERS];
        let mut ad_grads: Vec<Option<AdapterGrads<T>>> = vec![None; adapters.len()];
        // Adapter input gradients waiting for their source tap.
        let mut pending: BTreeMap<usize, Vec<Tensor<T>>> = BTreeMap::new();
        let mut activation_grads = 0u64;
        let mut dpre = dlogits.clone();

        for k in (plan.lowest..NUM_LAYERS).rev() {
            let want_input = k > plan.lowest;
            let req = GradRequest {
                weight: plan.weights[k],
                bias: plan.biases[k],
                input: want_input,
            };
            let x = &trace.taps[k];
            let g = if k < 2 {
                let pad = if k == 0 { self.spec.conv1_padding } else { 0 };
                conv2d_backward_with(&dpre, x, &self.layers[k], pad, req)?
            } else {
                fc_backward_with(&dpre, x, &self.layers[k], req)?
            };
            dw[k] = g.dw;
            db[k] = g.db;

            for (i, ad) in adapters.iter().enumerate() {
                if ad.dst != k + 1 {
                    continue;
                }
                let want_dx = ad.src > plan.lowest;
                let grads = ad.backward(
                    dpre.data(),
                    trace.taps[ad.src].data(),
                    trace.hs[i].data(),
                    want_dx,
                )?;
                if let Some(dx) = &grads.dx {
                    pending.entry(ad.src).or_default().push(dx.clone());
                }
                ad_grads[i] = Some(grads);
            }

            if !want_input {
                break;
            }
            // Gradient w.r.t. tap k, then through relu (and pool) of layer k-1.
            let mut dtap = g.dx.expect("input gradient requested");
            if let Some(extra) = pending.remove(&k) {
                for e in extra {
                    for (a, b) in dtap.data_mut().iter_mut().zip(e.data()) {
                        *a += *b;
                    }
                }
            }
            activation_grads += 1;
            let below = k - 1;
            let dact = if below < 2 {
                let pooled_shape = trace.taps[k].shape().to_vec();
                let dtap = dtap.reshape(&pooled_shape)?;
                maxpool2x2_backward(&dtap, &trace.pool_masks[below])?
            } else {
                dtap
            };
            dpre = relu_backward(&dact, &trace.pre[below])?;
        }

        let adapters = ad_grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "adapter {i} targets a layer below the backward plan"
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelGrads {
            dw,
            db,
            adapters,
            activation_grads,
        })
    }
}

impl Model<f32> {
    /// Argmax of the logits; ties go to the smallest class index.
    pub fn predict(&self, x0: &Tensor<f32>, adapters: &[Adapter<f32>]) -> Result<usize> {
        Ok(crate::kernels::argmax(self.logits(x0, adapters)?.data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_variants_and_param_counts() {
        let m = Variant::Mnist.spec();
        assert_eq!(m.tap_dims(), [784, 1176, 400, 120, 84]);
        assert_eq!(m.param_count(), 61706);
        let s = Variant::Svhn.spec();
        assert_eq!(s.tap_dims(), [3072, 1176, 400, 120, 84]);
        assert_eq!(s.param_count(), 62006);
        assert_eq!(m.layer_out_dims(), s.layer_out_dims());
        assert_eq!(m.cache_payload_len(), 1790);
        assert_eq!(Model::<f32>::init(m, 0).param_count(), 61706);
    }

    #[test]
    fn spec_rejects_mismatched_geometry() {
        assert!(ModelSpec::new(1, 28, 28, 0).is_err());
        assert!(ModelSpec::new(3, 32, 32, 0).is_ok());
    }

    #[test]
    fn zero_model_gives_zero_outputs() {
        for v in Variant::ALL {
            let spec = v.spec();
            let model = Model::<f32>::zeros(spec);
            let x = Tensor::new(&spec.input_shape(), vec![0.5; spec.input_len()]).unwrap();
            let out = model.base_forward(&x).unwrap();
            let dims: Vec<usize> = out.taps.iter().map(Tensor::len).collect();
            assert_eq!(dims, vec![1176, 400, 120, 84]);
            assert!(out.taps.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
            assert!(out.logits.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn input_shape_is_checked() {
        let model = Model::<f32>::zeros(Variant::Mnist.spec());
        assert!(model.base_forward(&Tensor::zeros(&[3, 32, 32])).is_err());
    }

    #[test]
    fn init_is_seed_stable() {
        let a = Model::<f32>::init(Variant::Mnist.spec(), 11);
        let b = Model::<f32>::init(Variant::Mnist.spec(), 11);
        let c = Model::<f32>::init(Variant::Mnist.spec(), 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_logits_predict_class_zero() {
        let model = Model::<f32>::zeros(Variant::Mnist.spec());
        assert_eq!(model.predict(&Tensor::zeros(&[1, 28, 28]), &[]).unwrap(), 0);
    }
}
