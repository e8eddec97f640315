//! Central finite-difference checks, in f64, of every backward kernel and of
//! both adapter-gradient paths (the generic backward pass and InstantFT's
//! output-only path).
//!
//! A probe whose perturbation flips a ReLU sign or a max-pool selection
//! straddles a non-differentiable point. It is retried with a much smaller
//! step and excluded only if that still straddles.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::Adapter;
use crate::kernels::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool2x2_backward,
    maxpool2x2_forward, relu_backward, relu_forward, softmax_xent, PoolMask,
};
use crate::model::{Model, Variant, NUM_LAYERS};
use crate::peft::{instantft_from_payload, instantft_grads, Method, PeftModel};
use crate::tensor::{LayerParams, Tensor};

pub const STEP: f64 = 1e-3;
/// Retry step for probes whose `STEP` perturbation crosses a kink.
pub const FINE_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;
/// Gradients below this magnitude on both sides count as agreeing zeros.
pub const ZERO_FLOOR: f64 = 1e-9;
/// Largest tolerated share of excluded probes.
pub const MAX_EXCLUDED_SHARE: f64 = 0.1;
const PROBES_PER_TENSOR: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub probes: usize,
    pub excluded: usize,
    pub worst_rel_err: f64,
}

impl GradCheck {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            probes: 0,
            excluded: 0,
            worst_rel_err: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.probes > 0
            && self.worst_rel_err <= REL_TOL
            && (self.excluded as f64) <= MAX_EXCLUDED_SHARE * self.probes as f64
    }

    /// Central difference at `point[idx]`. `f` returns the loss and whether
    /// the activation pattern matches the unperturbed one.
    fn probe(
        &mut self,
        analytic: f64,
        point: &[f64],
        idx: usize,
        f: &mut dyn FnMut(&[f64]) -> (f64, bool),
    ) {
        self.probes += 1;
        let mut v = point.to_vec();
        for step in [STEP, FINE_STEP] {
            v[idx] = point[idx] + step;
            let (up, same_up) = f(&v);
            v[idx] = point[idx] - step;
            let (down, same_down) = f(&v);
            if same_up && same_down {
                let numeric = (up - down) / (2.0 * step);
                self.worst_rel_err = self.worst_rel_err.max(rel_err(analytic, numeric));
                return;
            }
        }
        self.excluded += 1;
    }

    fn probe_all(
        &mut self,
        analytic: &[f64],
        point: &[f64],
        f: &mut dyn FnMut(&[f64]) -> (f64, bool),
    ) {
        assert_eq!(analytic.len(), point.len(), "one gradient per probed entry");
        for (idx, &a) in analytic.iter().enumerate() {
            self.probe(a, point, idx, f);
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape(), data.to_vec()).expect("same shape")
}

/// Fully-connected layer 5 -> 3: weight, bias and input gradients.
pub fn check_fc(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = LayerParams {
        weight: uniform(&mut rng, &[3, 5], -1.0, 1.0),
        bias: uniform(&mut rng, &[3], -1.0, 1.0),
    };
    let x = uniform(&mut rng, &[5], -1.0, 1.0);
    let r = uniform(&mut rng, &[3], -1.0, 1.0);
    let g = fc_backward(&r, &x, &p).expect("fc backward");
    let mut c = GradCheck::new("fc 5->3");
    let loss = |x: &Tensor<f64>, p: &LayerParams<f64>| dot(&fc_forward(x, p).expect("fc"), &r);
    c.probe_all(g.dw.expect("dw").data(), p.weight.data(), &mut |w| {
        (
            loss(
                &x,
                &LayerParams {
                    weight: with_data(&p.weight, w),
                    bias: p.bias.clone(),
                },
            ),
            true,
        )
    });
    c.probe_all(g.db.expect("db").data(), p.bias.data(), &mut |b| {
        (
            loss(
                &x,
                &LayerParams {
                    weight: p.weight.clone(),
                    bias: with_data(&p.bias, b),
                },
            ),
            true,
        )
    });
    c.probe_all(g.dx.expect("dx").data(), x.data(), &mut |v| {
        (loss(&with_data(&x, v), &p), true)
    });
    c
}

/// Convolution over a 2x6x6 input with three 5x5 filters at `padding`.
pub fn check_conv(seed: u64, padding: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = LayerParams {
        weight: uniform(&mut rng, &[3, 2, 5, 5], -1.0, 1.0),
        bias: uniform(&mut rng, &[3], -1.0, 1.0),
    };
    let x = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let y = conv2d_forward(&x, &p, padding).expect("conv");
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = conv2d_backward(&r, &x, &p, padding).expect("conv backward");
    let mut c = GradCheck::new(format!("conv 2x6x6 k5 pad{padding}"));
    let loss = |x: &Tensor<f64>, p: &LayerParams<f64>| {
        dot(&conv2d_forward(x, p, padding).expect("conv"), &r)
    };
    c.probe_all(g.dw.expect("dw").data(), p.weight.data(), &mut |w| {
        (
            loss(
                &x,
                &LayerParams {
                    weight: with_data(&p.weight, w),
                    bias: p.bias.clone(),
                },
            ),
            true,
        )
    });
    c.probe_all(g.db.expect("db").data(), p.bias.data(), &mut |b| {
        (
            loss(
                &x,
                &LayerParams {
                    weight: p.weight.clone(),
                    bias: with_data(&p.bias, b),
                },
            ),
            true,
        )
    });
    c.probe_all(g.dx.expect("dx").data(), x.data(), &mut |v| {
        (loss(&with_data(&x, v), &p), true)
    });
    c
}

/// 2x2 max pool over 2x4x4.
pub fn check_maxpool(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let (y, mask) = maxpool2x2_forward(&x).expect("pool");
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let dx = maxpool2x2_backward(&r, &mask).expect("pool backward");
    let mut c = GradCheck::new("maxpool 2x4x4");
    c.probe_all(dx.data(), x.data(), &mut |v| {
        let (y, m) = maxpool2x2_forward(&with_data(&x, v)).expect("pool");
        (dot(&y, &r), m == mask)
    });
    c
}

pub fn check_relu(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[24], -1.0, 1.0);
    let r = uniform(&mut rng, &[24], -1.0, 1.0);
    let dx = relu_backward(&r, &x).expect("relu backward");
    let signs = |t: &Tensor<f64>| t.data().iter().map(|v| *v > 0.0).collect::<Vec<_>>();
    let base = signs(&x);
    let mut c = GradCheck::new("relu 24");
    c.probe_all(dx.data(), x.data(), &mut |v| {
        let t = with_data(&x, v);
        (dot(&relu_forward(&t), &r), signs(&t) == base)
    });
    c
}

pub fn check_softmax_xent(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&mut rng, &[10], -3.0, 3.0);
    let label = rng.random_range(0..10);
    let sx = softmax_xent(&logits, label).expect("xent");
    let mut c = GradCheck::new("softmax cross-entropy");
    c.probe_all(sx.dlogits.data(), logits.data(), &mut |v| {
        (
            softmax_xent(&with_data(&logits, v), label)
                .expect("xent")
                .loss,
            true,
        )
    });
    c
}

/// Adapter `B A x` with input gradient: A, B and x.
pub fn check_adapter(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ad = Adapter::<f64>::init(0, 1, 9, 6, 3, &mut rng);
    ad.b = uniform(&mut rng, &[6, 3], -1.0, 1.0);
    let x = uniform(&mut rng, &[9], -1.0, 1.0);
    let r = uniform(&mut rng, &[6], -1.0, 1.0);
    let (h, _) = ad.forward(x.data()).expect("adapter");
    let g = ad
        .backward(r.data(), x.data(), h.data(), true)
        .expect("adapter backward");
    let loss = |ad: &Adapter<f64>, x: &[f64]| dot(&ad.forward(x).expect("adapter").1, &r);
    let mut c = GradCheck::new("adapter 9->6 r3");
    c.probe_all(g.da.data(), ad.a.data(), &mut |a| {
        (
            loss(
                &Adapter {
                    a: with_data(&ad.a, a),
                    ..ad.clone()
                },
                x.data(),
            ),
            true,
        )
    });
    c.probe_all(g.db.data(), ad.b.data(), &mut |b| {
        (
            loss(
                &Adapter {
                    b: with_data(&ad.b, b),
                    ..ad.clone()
                },
                x.data(),
            ),
            true,
        )
    });
    c.probe_all(g.dx.expect("dx").data(), x.data(), &mut |v| {
        (loss(&ad, v), true)
    });
    c
}

/// Backbone with nonzero biases and adapters with nonzero B.
fn random_peft(method: Method, variant: Variant, seed: u64) -> PeftModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f32>::init(variant.spec(), seed).cast::<f64>();
    for layer in model.layers_mut() {
        layer
            .bias
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let mut peft = PeftModel::new(method, model, 4, seed);
    for ad in &mut peft.adapters {
        ad.b.data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    peft
}

fn random_input(rng: &mut ChaCha8Rng, variant: Variant) -> Tensor<f64> {
    uniform(rng, &variant.spec().input_shape(), 0.0, 1.0)
}

type Pattern = (Vec<bool>, Vec<PoolMask>);

fn activation_pattern(peft: &PeftModel<f64>, x: &Tensor<f64>) -> Pattern {
    let trace = peft
        .model
        .forward_trace(x, &peft.adapters)
        .expect("forward");
    let signs = trace.pre[..NUM_LAYERS - 1]
        .iter()
        .flat_map(|t| t.data().iter().map(|v| *v > 0.0))
        .collect();
    (signs, trace.pool_masks)
}

/// Trainable tensors in the order the engine reports their gradients.
fn trainable(peft: &mut PeftModel<f64>) -> Vec<&mut Tensor<f64>> {
    let plan = peft.method.plan();
    let mut out = Vec::new();
    for (k, layer) in peft.model.layers_mut().iter_mut().enumerate() {
        if plan.weights[k] {
            out.push(&mut layer.weight);
        }
        if plan.biases[k] {
            out.push(&mut layer.bias);
        }
    }
    for ad in &mut peft.adapters {
        out.push(&mut ad.a);
        out.push(&mut ad.b);
    }
    out
}

/// Engine gradients of `method` through the whole network, probing a random
/// subset of every trainable tensor.
pub fn check_method(method: Method, variant: Variant, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut peft = random_peft(method, variant, seed);
    let x = random_input(&mut rng, variant);
    let label = rng.random_range(0..10);
    let analytic = peft.sample_grads(&x, label).expect("grads").grads;
    let base = activation_pattern(&peft, &x);
    let mut c = GradCheck::new(format!("{method} {variant} seed {seed}"));
    let n = trainable(&mut peft).len();
    assert_eq!(analytic.len(), n, "gradient list matches trainable tensors");
    for (t, grad) in analytic.iter().enumerate() {
        let point = trainable(&mut peft)[t].data().to_vec();
        for idx in sample(&mut rng, point.len(), PROBES_PER_TENSOR.min(point.len())) {
            let mut probe_model = peft.clone();
            c.probe(grad.data()[idx], &point, idx, &mut |v| {
                trainable(&mut probe_model)[t].data_mut().copy_from_slice(v);
                let loss = softmax_xent(&probe_model.logits(&x).expect("logits"), label)
                    .expect("xent")
                    .loss;
                (loss, activation_pattern(&probe_model, &x) == base)
            });
        }
    }
    c
}

/// InstantFT's output-only gradient path from a frozen payload.
pub fn check_instantft_path(variant: Variant, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let peft = random_peft(Method::InstantFt, variant, seed);
    let x = random_input(&mut rng, variant);
    let label = rng.random_range(0..10);
    let payload = peft.model.base_forward(&x).expect("base").to_payload();
    let (logits, saved) =
        instantft_from_payload(&peft.adapters, x.data(), &payload).expect("instant");
    let sx = softmax_xent(&logits, label).expect("xent");
    let grads = instantft_grads(&peft.adapters, sx.dlogits.data(), &saved).expect("grads");
    let loss = |ads: &[Adapter<f64>]| {
        let (l, _) = instantft_from_payload(ads, x.data(), &payload).expect("instant");
        softmax_xent(&l, label).expect("xent").loss
    };
    let mut c = GradCheck::new(format!("instantft path {variant} seed {seed}"));
    for (i, g) in grads.iter().enumerate() {
        for (which, analytic) in [(0, &g.da), (1, &g.db)] {
            let t = if which == 0 {
                &peft.adapters[i].a
            } else {
                &peft.adapters[i].b
            };
            let point = t.data().to_vec();
            for idx in sample(&mut rng, point.len(), PROBES_PER_TENSOR.min(point.len())) {
                c.probe(analytic.data()[idx], &point, idx, &mut |v| {
                    let mut ads = peft.adapters.clone();
                    let slot = if which == 0 {
                        &mut ads[i].a
                    } else {
                        &mut ads[i].b
                    };
                    slot.data_mut().copy_from_slice(v);
                    (loss(&ads), true)
                });
            }
        }
    }
    c
}

/// Every check: kernels, the adapter, each method on both variants and the
/// InstantFT path.
pub fn full_suite(seeds: u64) -> Vec<GradCheck> {
    let mut out = Vec::new();
    for s in 0..seeds {
        out.push(check_fc(s));
        out.push(check_conv(s, 0));
        out.push(check_conv(s, 2));
        out.push(check_maxpool(s));
        out.push(check_relu(s));
        out.push(check_softmax_xent(s));
        out.push(check_adapter(s));
        for variant in Variant::ALL {
            for method in Method::ALL {
                out.push(check_method(method, variant, s));
            }
            out.push(check_instantft_path(variant, s));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_checks_pass() {
        for s in 0..3 {
            for c in [
                check_fc(s),
                check_conv(s, 0),
                check_conv(s, 2),
                check_maxpool(s),
                check_relu(s),
                check_softmax_xent(s),
                check_adapter(s),
            ] {
                assert!(c.passed(), "{c:?}");
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut c = GradCheck::new("planted");
        c.probe(1.0, &[0.5], 0, &mut |v| (3.0 * v[0], true));
        assert!((c.worst_rel_err - 2.0 / 3.0).abs() < 1e-9);
        assert!(!c.passed());
    }

    #[test]
    fn kinks_are_excluded_not_compared() {
        let mut c = GradCheck::new("kink");
        c.probe(0.0, &[0.0], 0, &mut |v| (v[0].max(0.0), v[0] <= 0.0));
        assert_eq!((c.probes, c.excluded, c.worst_rel_err), (1, 1, 0.0));
        assert!(!c.passed());
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1e-12, -1e-12), 0.0);
        assert_eq!(rel_err(1.0, 0.5), 0.5);
    }
}
