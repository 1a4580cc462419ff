//! Dense layers with hand-written reverse-mode gradients.
//!
//! Activations are row-major `rows x features` buffers and every layer keeps
//! what its backward pass needs in an explicit cache, so a forward/backward
//! pair is a plain function of (parameters, inputs, upstream gradient). The
//! scalar type is generic so that the training path can run in `f32` and the
//! finite-difference checks in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Serialize
    + DeserializeOwned
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a * b + beta * c` with arbitrary strides; `a` is `m x k`, `b` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a too small");
                assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b too small");
                assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c too small");
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Fully connected layer `y = x W^T + b`, with `W` stored `out x in` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Linear<F: Real> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![F::ZERO; inputs * outputs],
            bias: vec![F::ZERO; outputs],
        }
    }

    /// Uniform init in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || F::from_f64(rng.random_range(-bound..bound));
        let weight = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Linear {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.inputs, self.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        debug_assert_eq!(x.len(), rows * self.inputs);
        let mut y = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias);
        }
        F::gemm(
            rows,
            self.inputs,
            self.outputs,
            F::ONE,
            x,
            self.inputs,
            1,
            &self.weight,
            1,
            self.inputs,
            F::ONE,
            &mut y,
            self.outputs,
            1,
        );
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when requested.
    pub fn backward(&self, x: &[F], dy: &[F], rows: usize, grad: &mut Linear<F>, want_dx: bool) -> Option<Vec<F>> {
        debug_assert_eq!(dy.len(), rows * self.outputs);
        // dW += dy^T x
        F::gemm(
            self.outputs,
            rows,
            self.inputs,
            F::ONE,
            dy,
            1,
            self.outputs,
            x,
            self.inputs,
            1,
            F::ONE,
            &mut grad.weight,
            self.inputs,
            1,
        );
        for row in dy.chunks_exact(self.outputs) {
            for (g, d) in grad.bias.iter_mut().zip(row) {
                *g += *d;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![F::ZERO; rows * self.inputs];
            F::gemm(
                rows,
                self.outputs,
                self.inputs,
                F::ONE,
                dy,
                self.outputs,
                1,
                &self.weight,
                self.inputs,
                1,
                F::ZERO,
                &mut dx,
                self.inputs,
                1,
            );
            dx
        })
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Linear<G> {
        Linear {
            inputs: self.inputs,
            outputs: self.outputs,
            weight: self.weight.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            bias: self.bias.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

pub fn relu_inplace<F: Real>(x: &mut [F]) {
    for v in x {
        if *v < F::ZERO {
            *v = F::ZERO;
        }
    }
}

/// Masks `grad` where the ReLU output was zero.
pub fn relu_backward_inplace<F: Real>(grad: &mut [F], out: &[F]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= F::ZERO {
            *g = F::ZERO;
        }
    }
}

/// Row-wise concatenation of two matrices.
pub fn concat_cols<F: Real>(a: &[F], a_cols: usize, b: &[F], b_cols: usize, rows: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * (a_cols + b_cols));
    for r in 0..rows {
        out.extend_from_slice(&a[r * a_cols..(r + 1) * a_cols]);
        out.extend_from_slice(&b[r * b_cols..(r + 1) * b_cols]);
    }
    out
}

/// Splits row-wise concatenated columns back into two matrices.
pub fn split_cols<F: Real>(x: &[F], a_cols: usize, b_cols: usize, rows: usize) -> (Vec<F>, Vec<F>) {
    let w = a_cols + b_cols;
    let mut a = Vec::with_capacity(rows * a_cols);
    let mut b = Vec::with_capacity(rows * b_cols);
    for r in 0..rows {
        a.extend_from_slice(&x[r * w..r * w + a_cols]);
        b.extend_from_slice(&x[r * w + a_cols..(r + 1) * w]);
    }
    (a, b)
}

/// Anything with an ordered list of parameter tensors.
pub trait ParamSet<F: Real> {
    fn tensors(&self) -> Vec<&[F]>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.fill(F::ZERO);
        }
    }
}

impl<F: Real> ParamSet<F> for Linear<F> {
    fn tensors(&self) -> Vec<&[F]> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<F: Real> ParamSet<F> for Vec<Linear<F>> {
    fn tensors(&self) -> Vec<&[F]> {
        self.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Plain ReLU multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<F: Real> {
    pub layers: Vec<Linear<F>>,
    pub output_activation: OutputActivation,
}

/// Per-layer inputs recorded by [`Mlp::forward`].
pub struct MlpCache<F: Real> {
    inputs: Vec<Vec<F>>,
    output: Vec<F>,
    rows: usize,
}

impl<F: Real> MlpCache<F> {
    pub fn output(&self) -> &[F] {
        &self.output
    }
}

impl<F: Real> Mlp<F> {
    /// `widths` lists every layer width including input and output.
    pub fn new(widths: &[usize], output_activation: OutputActivation, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Shape(format!("invalid MLP widths {widths:?}")));
        }
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Ok(Mlp { layers, output_activation })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
            output_activation: self.output_activation,
        }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Result<MlpCache<F>> {
        if x.len() != rows * self.inputs() {
            return Err(Error::Shape(format!(
                "MLP input has {} values, expected {} x {}",
                x.len(),
                rows,
                self.inputs()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h, rows);
            if i < last {
                relu_inplace(&mut y);
            } else if self.output_activation == OutputActivation::Tanh {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        Ok(MlpCache { inputs, output: h, rows })
    }

    pub fn predict(&self, x: &[F], rows: usize) -> Result<Vec<F>> {
        Ok(self.forward(x, rows)?.output)
    }

    /// Accumulates gradients for upstream `d_out` (w.r.t. the activated output).
    pub fn backward(&self, cache: &MlpCache<F>, d_out: &[F], grad: &mut Mlp<F>) {
        let rows = cache.rows;
        let mut d = d_out.to_vec();
        if self.output_activation == OutputActivation::Tanh {
            for (g, y) in d.iter_mut().zip(&cache.output) {
                *g *= F::ONE - *y * *y;
            }
        }
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            let dx = self.layers[i].backward(x, &d, rows, &mut grad.layers[i], i > 0);
            if let Some(mut dx) = dx {
                // layer i's input is layer i-1's ReLU output
                relu_backward_inplace(&mut dx, x);
                d = dx;
            }
        }
    }
}

impl<F: Real> ParamSet<F> for Mlp<F> {
    fn tensors(&self) -> Vec<&[F]> {
        self.layers.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.layers.tensors_mut()
    }
}
