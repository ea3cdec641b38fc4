//! Minimal CPU convolutional network toolkit.
//!
//! Layers keep their parameters and gradient buffers; `forward` returns the
//! output together with an explicit cache, so the same layer can be applied
//! several times in one step (as the translation generators are) and each
//! application back-propagated independently. `infer` is the cache-free
//! evaluation path (dropout off, batch norm on running statistics).

mod layers;
mod optim;

pub use layers::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, InstanceNorm2d, Layer, LayerCache, MaxPool2d, PadMode, Sequential,
    SequentialCache,
};
pub use optim::{clip_grad_norm, grad_norm, Adam, AdamConfig, Sgd, SgdConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Dense NCHW `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "tensor add shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along channels.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        for i in 0..a.n {
            let dst = out.item_mut(i);
            dst[..a.item_len()].copy_from_slice(a.item(i));
            dst[a.item_len()..].copy_from_slice(b.item(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
        let mut a = Tensor::zeros(t.n, first, t.h, t.w);
        let mut b = Tensor::zeros(t.n, t.c - first, t.h, t.w);
        for i in 0..t.n {
            let src = t.item(i);
            let split = first * t.plane();
            a.item_mut(i).copy_from_slice(&src[..split]);
            b.item_mut(i).copy_from_slice(&src[split..]);
        }
        (a, b)
    }
}

/// A parameter (or persistent buffer) with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Buffers such as batch-norm running statistics are saved but not optimized.
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self {
            trainable: false,
            ..Self::new(shape, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, std)`, the classic GAN initialization.
    Normal(f32),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn,
}

impl Init {
    pub(crate) fn sample(self, len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..len).map(|_| d.sample(rng)).collect()
            }
            Init::FanIn => {
                let b = 1.0 / (fan_in.max(1) as f32).sqrt();
                let d = Uniform::new_inclusive(-b, b);
                (0..len).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

/// Per-forward state: training flag and the dropout RNG.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { train: true, rng }
    }

    pub(crate) fn bernoulli(&mut self, p: f32) -> bool {
        self.rng.gen::<f32>() < p
    }
}

/// Anything holding parameters.
pub trait Module {
    /// Visits parameters in a fixed order with hierarchical names.
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Snapshot of every parameter value, in visit order.
    fn state(&mut self) -> Vec<(String, Param)> {
        self.params_mut().into_iter().map(|(n, p)| (n, p.clone())).collect()
    }

    fn parameter_count(&mut self) -> usize {
        self.params_mut()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    fn all_finite(&mut self) -> bool {
        self.params_mut()
            .iter()
            .all(|(_, p)| p.value.iter().all(|v| v.is_finite()))
    }

    /// Loads values by name; every parameter must be present with a matching shape.
    fn load_state(&mut self, state: &[(String, Vec<usize>, Vec<f32>)]) -> Result<(), String> {
        let lookup: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f32>)> =
            state.iter().map(|(n, s, v)| (n.as_str(), (s, v))).collect();
        for (name, p) in self.params_mut() {
            let (shape, vals) = lookup
                .get(name.as_str())
                .ok_or_else(|| format!("missing parameter `{name}`"))?;
            if **shape != p.shape {
                return Err(format!("shape mismatch for `{name}`: {:?} vs {:?}", shape, p.shape));
            }
            p.value.copy_from_slice(vals);
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `C = A·B + beta·C` with optional transposes; `A` is `m×k`, `B` is `k×n`
/// after transposition, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand sizes"
    );
    // Packing dominates for these shapes; contiguous dot / axpy loops are faster.
    if b_trans && !a_trans && k >= 256 {
        for i in 0..m {
            let ai = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let cij = &mut c[i * n + j];
                *cij = beta * *cij + dot(ai, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    if (m <= 2 || k <= 2) && !b_trans {
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            if beta == 0.0 {
                ci.fill(0.0);
            } else if beta != 1.0 {
                ci.iter_mut().for_each(|v| *v *= beta);
            }
            for t in 0..k {
                let av = if a_trans { a[t * m + i] } else { a[i * k + t] };
                for (cv, &bv) in ci.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index implied by the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}
