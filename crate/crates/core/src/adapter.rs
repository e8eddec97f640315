//! Low-rank adapter pairs.
//!
//! An adapter reads activation tap `src` (flattened) and adds `B A x` to the
//! output of layer `dst` (1-based, so `dst == src + 1` is a classic LoRA
//! adapter and `dst == 5` with `src < 4` is a skip adapter into the logits).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{flops, lit, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T = f32> {
    /// `[r, d_in]`
    pub a: Tensor<T>,
    /// `[d_out, r]`
    pub b: Tensor<T>,
    pub src: usize,
    pub dst: usize,
}

#[derive(Clone, Debug)]
pub struct AdapterGrads<T = f32> {
    pub da: Tensor<T>,
    pub db: Tensor<T>,
    pub dx: Option<Tensor<T>>,
}

impl<T: Real> Adapter<T> {
    /// `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn init(
        src: usize,
        dst: usize,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive sigma");
        let a = (0..rank * d_in).map(|_| lit(normal.sample(rng))).collect();
        Self {
            a: Tensor::new(&[rank, d_in], a).expect("sized"),
            b: Tensor::zeros(&[d_out, rank]),
            src,
            dst,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn cast<U: Real>(&self) -> Adapter<U> {
        Adapter {
            a: self.a.cast(),
            b: self.b.cast(),
            src: self.src,
            dst: self.dst,
        }
    }

    /// Returns `(h, delta)` with `h = A x` and `delta = B h`.
    pub fn forward(&self, x: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (r, d_in, d_out) = (self.rank(), self.d_in(), self.d_out());
        if x.len() != d_in {
            return Err(Error::shape("adapter_forward", &[d_in], &[x.len()]));
        }
        let h = matvec(self.a.data(), x, r, d_in);
        let delta = matvec(self.b.data(), &h, d_out, r);
        flops::add((2 * r * d_in + 2 * d_out * r) as u64);
        let h = Tensor::vector(h);
        let delta = Tensor::vector(delta);
        h.check_finite("adapter_forward")?;
        delta.check_finite("adapter_forward")?;
        Ok((h, delta))
    }

    /// Adapter gradients given the output gradient `dy`, the input `x` and
    /// the saved `h = A x`:
    ///
    /// ```text
    /// dB = dy h^T
    /// dh = B^T dy
    /// dA = dh x^T
    /// dx = A^T dh        (only when `want_dx`)
    /// ```
    pub fn backward(&self, dy: &[T], x: &[T], h: &[T], want_dx: bool) -> Result<AdapterGrads<T>> {
        let (r, d_in, d_out) = (self.rank(), self.d_in(), self.d_out());
        if dy.len() != d_out || x.len() != d_in || h.len() != r {
            return Err(Error::shape(
                "adapter_backward",
                &[d_out, d_in, r],
                &[dy.len(), x.len(), h.len()],
            ));
        }
        let db = outer(dy, h);
        let dh = matvec_t(self.b.data(), dy, d_out, r);
        let da = outer(&dh, x);
        flops::add((2 * d_out * r * 2 + 2 * r * d_in) as u64);
        let dx = if want_dx {
            flops::add((2 * r * d_in) as u64);
            Some(Tensor::vector(matvec_t(self.a.data(), &dh, r, d_in)))
        } else {
            None
        };
        let grads = AdapterGrads {
            da: Tensor::new(&[r, d_in], da)?,
            db: Tensor::new(&[d_out, r], db)?,
            dx,
        };
        grads.da.check_finite("adapter_backward")?;
        grads.db.check_finite("adapter_backward")?;
        Ok(grads)
    }
}

/// `m[rows, cols] * v[cols]`
pub(crate) fn matvec<T: Real>(m: &[T], v: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|i| {
            let mut acc = T::zero();
            for (a, b) in m[i * cols..(i + 1) * cols].iter().zip(v) {
                acc += *a * *b;
            }
            acc
        })
        .collect()
}

/// `m[rows, cols]^T * v[rows]`, accumulated row by row.
pub(crate) fn matvec_t<T: Real>(m: &[T], v: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for (i, &g) in v.iter().enumerate().take(rows) {
        for (acc, a) in out.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *acc += *a * g;
        }
    }
    out
}

pub(crate) fn outer<T: Real>(u: &[T], v: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        out.extend(v.iter().map(|&b| a * b));
    }
    out
}
