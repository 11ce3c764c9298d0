//! Convolutional instance encoder: `conv3x3 -> ReLU -> avgpool2` blocks
//! followed by a final `conv3x3 -> ReLU -> global average pool`.
//!
//! Kernels are generic over the compute scalar so training can run in `f32`
//! while gradient checks run the identical code path in `f64`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Sub};

use image::RgbImage;

pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C = alpha * A B + beta * C` for strided row/column layouts; `A` is
    /// `m x k`, `B` is `k x n`, `C` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn check_strided(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        (rsa, csa): (usize, usize),
        b: &[Self],
        (rsb, csb): (usize, usize),
        beta: Self,
        c: &mut [Self],
        (rsc, csc): (usize, usize),
    ) {
        check_strided(a.len(), m, k, rsa, csa);
        check_strided(b.len(), k, n, rsb, csb);
        check_strided(c.len(), m, n, rsc, csc);
        // SAFETY: every operand was bounds-checked against its strides above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
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

impl Real for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        (rsa, csa): (usize, usize),
        b: &[Self],
        (rsb, csb): (usize, usize),
        beta: Self,
        c: &mut [Self],
        (rsc, csc): (usize, usize),
    ) {
        check_strided(a.len(), m, k, rsa, csa);
        check_strided(b.len(), k, n, rsb, csb);
        check_strided(c.len(), m, n, rsc, csc);
        // SAFETY: every operand was bounds-checked against its strides above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
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

/// CHW input tensor with intensities mapped to [-0.5, 0.5].
pub fn input_from_rgb<T: Real>(image: &RgbImage) -> Vec<T> {
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![T::ZERO; 3 * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = T::from_f64(px[c] as f64 / 255.0 - 0.5);
        }
    }
    out
}

/// Shape of one 3x3 same-padding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub side: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * 9
    }
}

#[inline]
fn tap_ranges(side: usize, k: usize) -> (usize, usize, isize) {
    // output positions o with 0 <= o + k - 1 < side
    let d = k as isize - 1;
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { side - 1 } else { side };
    (lo, hi, d)
}

/// Unfolds the zero-padded 3x3 neighbourhoods into a `(in_channels * 9) x side^2`
/// matrix, row `ic * 9 + ky * 3 + kx`.
fn im2col<T: Real>(shape: ConvShape, input: &[T]) -> Vec<T> {
    let s = shape.side;
    let plane = s * s;
    let mut col = vec![T::ZERO; shape.in_channels * 9 * plane];
    for ic in 0..shape.in_channels {
        let in_plane = &input[ic * plane..(ic + 1) * plane];
        for ky in 0..3 {
            let (y0, y1, dy) = tap_ranges(s, ky);
            for kx in 0..3 {
                let (x0, x1, dx) = tap_ranges(s, kx);
                let row = &mut col[(ic * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let src = &in_plane[iy * s..(iy + 1) * s]
                        [(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                    row[y * s + x0..y * s + x1].copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulating into `grad_input`.
fn col2im<T: Real>(shape: ConvShape, col: &[T], grad_input: &mut [T]) {
    let s = shape.side;
    let plane = s * s;
    for ic in 0..shape.in_channels {
        let gi = &mut grad_input[ic * plane..(ic + 1) * plane];
        for ky in 0..3 {
            let (y0, y1, dy) = tap_ranges(s, ky);
            for kx in 0..3 {
                let (x0, x1, dx) = tap_ranges(s, kx);
                let row = &col[(ic * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let dst = &mut gi[iy * s..(iy + 1) * s]
                        [(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                    for (d, g) in dst.iter_mut().zip(&row[y * s + x0..y * s + x1]) {
                        *d += *g;
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Real>(
    shape: ConvShape,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let plane = shape.side * shape.side;
    let k = shape.in_channels * 9;
    for (oc, b) in bias.iter().enumerate().take(shape.out_channels) {
        out[oc * plane..(oc + 1) * plane].fill(*b);
    }
    let col = im2col(shape, input);
    T::gemm(
        shape.out_channels,
        k,
        plane,
        weight,
        (k, 1),
        &col,
        (plane, 1),
        T::from_f64(1.0),
        out,
        (plane, 1),
    );
}

/// Accumulates weight/bias gradients and, when requested, the input gradient.
pub fn conv_backward<T: Real>(
    shape: ConvShape,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut [T]>,
) {
    let plane = shape.side * shape.side;
    let k = shape.in_channels * 9;
    for oc in 0..shape.out_channels {
        let mut gb = T::ZERO;
        for v in &grad_out[oc * plane..(oc + 1) * plane] {
            gb += *v;
        }
        grad_bias[oc] += gb;
    }
    let col = im2col(shape, input);
    // dW += dOut * col^T
    T::gemm(
        shape.out_channels,
        plane,
        k,
        grad_out,
        (plane, 1),
        &col,
        (1, plane),
        T::from_f64(1.0),
        grad_weight,
        (k, 1),
    );
    if let Some(gi) = grad_input {
        // dcol = W^T * dOut
        let mut dcol = vec![T::ZERO; k * plane];
        T::gemm(
            k,
            shape.out_channels,
            plane,
            weight,
            (1, k),
            grad_out,
            (plane, 1),
            T::ZERO,
            &mut dcol,
            (plane, 1),
        );
        col2im(shape, &dcol, gi);
    }
}

fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::ZERO {
            *x = T::ZERO;
        }
    }
}

fn avgpool2<T: Real>(input: &[T], channels: usize, side: usize) -> Vec<T> {
    let half = side / 2;
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; channels * half * half];
    for c in 0..channels {
        let ip = &input[c * side * side..(c + 1) * side * side];
        let op = &mut out[c * half * half..(c + 1) * half * half];
        for y in 0..half {
            for x in 0..half {
                let a = ip[2 * y * side + 2 * x] + ip[2 * y * side + 2 * x + 1];
                let b = ip[(2 * y + 1) * side + 2 * x] + ip[(2 * y + 1) * side + 2 * x + 1];
                op[y * half + x] = (a + b) * quarter;
            }
        }
    }
    out
}

fn avgpool2_backward<T: Real>(grad: &[T], channels: usize, side: usize) -> Vec<T> {
    let half = side / 2;
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; channels * side * side];
    for c in 0..channels {
        let gp = &grad[c * half * half..(c + 1) * half * half];
        let op = &mut out[c * side * side..(c + 1) * side * side];
        for y in 0..side {
            for x in 0..side {
                op[y * side + x] = gp[(y / 2) * half + x / 2] * quarter;
            }
        }
    }
    out
}

/// Encoder weights cast to the compute scalar, shared across a batch.
#[derive(Debug, Clone)]
pub struct EncoderView<T> {
    pub(crate) shapes: Vec<ConvShape>,
    pub(crate) weights: Vec<Vec<T>>,
    pub(crate) biases: Vec<Vec<T>>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    /// Input to each conv layer.
    inputs: Vec<Vec<T>>,
    /// Post-ReLU output of each conv layer.
    outputs: Vec<Vec<T>>,
    pub features: Vec<T>,
}

/// Per-layer gradient accumulators in the compute scalar.
#[derive(Debug, Clone)]
pub struct EncoderGrads<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> EncoderView<T> {
    pub fn feature_dim(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.out_channels)
    }

    pub fn input_len(&self) -> usize {
        let s = self.shapes[0];
        s.in_channels * s.side * s.side
    }

    pub fn zero_grads(&self) -> EncoderGrads<T> {
        EncoderGrads {
            weights: self.weights.iter().map(|w| vec![T::ZERO; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![T::ZERO; b.len()]).collect(),
        }
    }

    pub fn forward(&self, input: &[T]) -> EncoderTrace<T> {
        let n = self.shapes.len();
        let mut inputs = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        let mut x = input.to_vec();
        for (l, shape) in self.shapes.iter().enumerate() {
            let mut out = vec![T::ZERO; shape.out_channels * shape.side * shape.side];
            conv_forward(*shape, &x, &self.weights[l], &self.biases[l], &mut out);
            relu_inplace(&mut out);
            inputs.push(std::mem::take(&mut x));
            if l + 1 < n {
                x = avgpool2(&out, shape.out_channels, shape.side);
            }
            outputs.push(out);
        }
        let last = self.shapes[n - 1];
        let plane = last.side * last.side;
        let scale = T::from_f64(1.0 / plane as f64);
        let features = outputs[n - 1]
            .chunks(plane)
            .map(|c| {
                let mut acc = T::ZERO;
                for v in c {
                    acc += *v;
                }
                acc * scale
            })
            .collect();
        EncoderTrace {
            inputs,
            outputs,
            features,
        }
    }

    /// Backpropagates `grad_features` through the encoder, accumulating into
    /// `grads`. Returns the gradient w.r.t. the input when `want_input` is set.
    pub fn backward(
        &self,
        trace: &EncoderTrace<T>,
        grad_features: &[T],
        grads: &mut EncoderGrads<T>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let n = self.shapes.len();
        let last = self.shapes[n - 1];
        let plane = last.side * last.side;
        let scale = T::from_f64(1.0 / plane as f64);
        let mut grad: Vec<T> = grad_features
            .iter()
            .flat_map(|g| std::iter::repeat_n(*g * scale, plane))
            .collect();
        for l in (0..n).rev() {
            let shape = self.shapes[l];
            // ReLU: pass gradient where the output was positive
            for (g, o) in grad.iter_mut().zip(&trace.outputs[l]) {
                if *o <= T::ZERO {
                    *g = T::ZERO;
                }
            }
            let need_input = l > 0 || want_input;
            let mut grad_in = if need_input {
                vec![T::ZERO; shape.in_channels * shape.side * shape.side]
            } else {
                Vec::new()
            };
            conv_backward(
                shape,
                &trace.inputs[l],
                &self.weights[l],
                &grad,
                &mut grads.weights[l],
                &mut grads.biases[l],
                need_input.then_some(grad_in.as_mut_slice()),
            );
            if l == 0 {
                return want_input.then_some(grad_in);
            }
            let prev = self.shapes[l - 1];
            grad = avgpool2_backward(&grad_in, prev.out_channels, prev.side);
        }
        None
    }
}
