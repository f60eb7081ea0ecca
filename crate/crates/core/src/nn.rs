//! Dense ReLU network with a sigmoid head, written for batched CPU
//! evaluation. Rows of every activation matrix are samples; weights are
//! stored `in × out` row-major so a layer is `Y = X·W + b`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::Rng;

/// Floating-point element type of a network (f32 for inference and
/// training, f64 for gradient checking).
pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;

    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    ///
    /// # Safety
    /// The strided views must stay inside the buffers behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// How an operand is read by [`gemm`].
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `C(m×n) = op(A)·op(B) + beta·C` on dense row-major buffers, where `A`
/// is stored `m×k` (or `k×m` when transposed) and `B` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], op_a: Op, b: &[T], op_b: Op, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k, "A too small");
    assert!(b.len() >= k * n, "B too small");
    assert!(c.len() >= m * n, "C too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
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
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `in_dim × out_dim`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::ZERO; in_dim * out_dim],
            bias: vec![T::ZERO; out_dim],
        }
    }

    fn uniform(in_dim: usize, out_dim: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let weight = (0..in_dim * out_dim)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![T::ZERO; out_dim],
        }
    }

    /// `out = x·W + b` for `rows` samples.
    fn apply(&self, x: &[T], rows: usize, out: &mut [T]) {
        let out = &mut out[..rows * self.out_dim];
        for row in out.chunks_exact_mut(self.out_dim) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            rows,
            self.in_dim,
            self.out_dim,
            x,
            Op::N,
            &self.weight,
            Op::N,
            T::ONE,
            out,
        );
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// ReLU hidden layers followed by a sigmoid output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

/// Activations kept from a forward pass for backpropagation.
pub struct ForwardCache<T> {
    rows: usize,
    /// Post-activation output of every layer; the last entry is the sigmoid output.
    acts: Vec<Vec<T>>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("at least one layer")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    T::ONE / (T::ONE + (-z).exp())
}

impl<T: Real> Mlp<T> {
    /// `hidden` ReLU layers of `width` channels between `in_dim` and `out_dim`.
    pub fn new_random(in_dim: usize, hidden: usize, width: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut fan_in = in_dim;
        for _ in 0..hidden {
            // He-uniform for ReLU
            let bound = (6.0 / fan_in as f64).sqrt();
            layers.push(Dense::uniform(fan_in, width, bound, rng));
            fan_in = width;
        }
        let bound = (6.0 / (fan_in + out_dim) as f64).sqrt();
        layers.push(Dense::uniform(fan_in, out_dim, bound, rng));
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weight: l.weight.iter().map(|w| U::from_f64(w.to_f64())).collect(),
                    bias: l.bias.iter().map(|w| U::from_f64(w.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Inference without keeping activations. `scratch` is reused between calls.
    pub fn forward_into(&self, x: &[T], rows: usize, out: &mut Vec<T>, scratch: &mut Vec<T>) {
        let width = self.layers.iter().map(|l| l.out_dim).max().unwrap_or(0);
        out.resize(rows * width, T::ZERO);
        scratch.resize(rows * width, T::ZERO);
        let last = self.layers.len() - 1;
        // ping-pong between the two buffers; the final layer must land in `out`
        let mut in_out = last % 2 == 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (src, dst): (&[T], &mut [T]) = if i == 0 {
                (x, if in_out { &mut out[..] } else { &mut scratch[..] })
            } else if in_out {
                (&scratch[..], &mut out[..])
            } else {
                (&out[..], &mut scratch[..])
            };
            layer.apply(src, rows, dst);
            let dst = &mut dst[..rows * layer.out_dim];
            if i == last {
                dst.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                dst.iter_mut().for_each(|v| {
                    if *v < T::ZERO {
                        *v = T::ZERO
                    }
                });
            }
            in_out = !in_out;
        }
        out.truncate(rows * self.out_dim());
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let mut out = Vec::new();
        let mut scratch = Vec::new();
        self.forward_into(x, rows, &mut out, &mut scratch);
        out
    }

    pub fn forward_cached(&self, x: &[T], rows: usize) -> ForwardCache<T> {
        let last = self.layers.len() - 1;
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = vec![T::ZERO; rows * layer.out_dim];
            let src = if i == 0 { x } else { &acts[i - 1][..] };
            layer.apply(src, rows, &mut y);
            if i == last {
                y.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                y.iter_mut().for_each(|v| {
                    if *v < T::ZERO {
                        *v = T::ZERO
                    }
                });
            }
            acts.push(y);
        }
        ForwardCache { rows, acts }
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// with respect to the sigmoid outputs.
    pub fn backward(&self, x: &[T], cache: &ForwardCache<T>, d_out: &[T], grads: &mut Mlp<T>) {
        let rows = cache.rows;
        let last = self.layers.len() - 1;
        let out = cache.output();
        let mut delta: Vec<T> = d_out.iter().zip(out).map(|(&g, &s)| g * s * (T::ONE - s)).collect();
        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let input = if i == 0 { x } else { &cache.acts[i - 1][..] };
            let g = &mut grads.layers[i];
            gemm(
                layer.in_dim,
                rows,
                layer.out_dim,
                input,
                Op::T,
                &delta,
                Op::N,
                T::ONE,
                &mut g.weight,
            );
            for row in delta.chunks_exact(layer.out_dim) {
                for (b, &d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if i == 0 {
                break;
            }
            let mut d_in = vec![T::ZERO; rows * layer.in_dim];
            gemm(
                rows,
                layer.out_dim,
                layer.in_dim,
                &delta,
                Op::N,
                &layer.weight,
                Op::T,
                T::ZERO,
                &mut d_in,
            );
            // ReLU mask from the stored post-activation
            for (d, &a) in d_in.iter_mut().zip(&cache.acts[i - 1]) {
                if a <= T::ZERO {
                    *d = T::ZERO;
                }
            }
            delta = d_in;
        }
    }

    /// Visits every parameter slice paired with the matching slice of `other`.
    pub fn zip_params_mut<'a>(&'a mut self, other: &'a Mlp<T>) -> impl Iterator<Item = (&'a mut [T], &'a [T])> {
        self.layers
            .iter_mut()
            .zip(&other.layers)
            .flat_map(|(a, b)| [(&mut a.weight[..], &b.weight[..]), (&mut a.bias[..], &b.bias[..])])
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Mlp<f32>,
    v: Mlp<f32>,
}

impl Adam {
    pub fn new(net: &Mlp<f32>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: net.zeros_like(),
            v: net.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut Mlp<f32>, grads: &Mlp<f32>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let params = net.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((p, m), v), &g) in params.zip(ms).zip(vs).zip(grads.params()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / (v.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Op::N, &b, Op::N, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // Aᵀ stored k×m
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, Op::T, &b, Op::N, 0.0, &mut c2);
        assert_eq!(c, c2);
        // Bᵀ stored n×k
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c3 = vec![0.0; m * n];
        gemm(m, k, n, &a, Op::N, &bt, Op::T, 0.0, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn cached_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: Mlp<f32> = Mlp::new_random(5, 3, 16, 4, &mut rng);
        let x: Vec<f32> = (0..7 * 5).map(|i| (i as f32 * 0.37).sin()).collect();
        let plain = net.forward(&x, 7);
        let cached = net.forward_cached(&x, 7);
        assert_eq!(plain, cached.output());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net: Mlp<f64> = Mlp::new_random(3, 2, 6, 4, &mut rng);
        let rows = 5;
        let x: Vec<f64> = (0..rows * 3).map(|i| (i as f64 * 0.71).cos()).collect();
        // loss = Σ out²/2 so d_out = out
        let loss = |n: &Mlp<f64>| n.forward(&x, rows).iter().map(|v| 0.5 * v * v).sum::<f64>();
        let cache = net.forward_cached(&x, rows);
        let mut grads = net.zeros_like();
        net.backward(&x, &cache, cache.output(), &mut grads);
        let analytic: Vec<f64> = grads.params().copied().collect();
        let eps = 1e-6;
        for (i, &g) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            *plus.params_mut().nth(i).unwrap() += eps;
            let mut minus = net.clone();
            *minus.params_mut().nth(i).unwrap() -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            assert!((fd - g).abs() < 1e-7 + 1e-5 * g.abs(), "param {i}: {fd} vs {g}");
        }
    }

    #[test]
    fn adam_with_zero_lr_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: Mlp<f32> = Mlp::new_random(3, 1, 4, 4, &mut rng);
        let before = net.clone();
        let mut grads = net.zeros_like();
        grads.params_mut().for_each(|g| *g = 0.3);
        let mut adam = Adam::new(&net);
        adam.step(&mut net, &grads, 0.0);
        assert_eq!(net, before);
    }
}
