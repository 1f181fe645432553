//! The seven layer kinds of the surrogate and their exact gradients.
//!
//! Convolutions run as im2col + GEMM. Backward passes take both the
//! layer's input and its recorded output, so activations reuse the
//! forward result instead of recomputing transcendentals.

use super::tensor::{Scalar, Tensor4Of};
use super::SurrogateError;

/// Negative-side slope of [`Layer::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S: Scalar> {
    /// 3x3 convolution, stride 1, zero padding 1; weight (out, in, 3, 3).
    Conv3x3 { weight: Tensor4Of<S>, bias: Vec<S> },
    Relu,
    LeakyRelu,
    MaxPool2,
    Upsample2Nearest,
    Sigmoid,
    /// pi * tanh, the phase head's output range.
    ScaledTanh,
}

/// Parameter gradients for one layer; empty vectors for parameterless kinds.
#[derive(Debug, Clone)]
pub struct LayerGrad<S> {
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv3x3 { weight, bias } => weight.numel() + bias.len(),
            _ => 0,
        }
    }

    pub fn zero_grad(&self) -> LayerGrad<S> {
        match self {
            Layer::Conv3x3 { weight, bias } => LayerGrad {
                weight: vec![S::zero(); weight.numel()],
                bias: vec![S::zero(); bias.len()],
            },
            _ => LayerGrad { weight: Vec::new(), bias: Vec::new() },
        }
    }

    pub fn out_shape(
        &self,
        shape: (usize, usize, usize, usize),
    ) -> Result<(usize, usize, usize, usize), SurrogateError> {
        let (b, c, h, w) = shape;
        match self {
            Layer::Conv3x3 { weight, bias } => {
                let (oc, ic, kh, kw) = weight.shape();
                if ic != c || kh != 3 || kw != 3 || bias.len() != oc {
                    return Err(SurrogateError::ShapeMismatch {
                        context: "conv3x3 weight vs input channels",
                        expected: (oc, c, 3, 3),
                        got: weight.shape(),
                    });
                }
                Ok((b, oc, h, w))
            }
            Layer::MaxPool2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(SurrogateError::ShapeMismatch {
                        context: "maxpool2 needs even extent",
                        expected: (b, c, h / 2 * 2, w / 2 * 2),
                        got: shape,
                    });
                }
                Ok((b, c, h / 2, w / 2))
            }
            Layer::Upsample2Nearest => Ok((b, c, 2 * h, 2 * w)),
            _ => Ok(shape),
        }
    }

    pub fn forward(&self, input: &Tensor4Of<S>) -> Result<Tensor4Of<S>, SurrogateError> {
        let out_shape = self.out_shape(input.shape())?;
        let (nb, c, h, w) = input.shape();
        let mut out = Tensor4Of::zeros(out_shape);
        match self {
            Layer::Conv3x3 { weight, bias } => {
                let oc = out_shape.1;
                let hw = h * w;
                let k = c * 9;
                let mut cols = vec![S::zero(); k * hw];
                for b in 0..nb {
                    im2col(input.batch(b), c, h, w, &mut cols);
                    let ob = out.batch_mut(b);
                    for (ci, &bv) in bias.iter().enumerate() {
                        ob[ci * hw..(ci + 1) * hw].fill(bv);
                    }
                    S::gemm(
                        oc,
                        k,
                        hw,
                        S::one(),
                        weight.data(),
                        k as isize,
                        1,
                        &cols,
                        hw as isize,
                        1,
                        S::one(),
                        ob,
                        hw as isize,
                        1,
                    );
                }
            }
            Layer::Relu => {
                for (o, &v) in out.data_mut().iter_mut().zip(input.data()) {
                    *o = if v > S::zero() { v } else { S::zero() };
                }
            }
            Layer::LeakyRelu => {
                let slope = S::from_f64(LEAKY_SLOPE);
                for (o, &v) in out.data_mut().iter_mut().zip(input.data()) {
                    *o = if v > S::zero() { v } else { slope * v };
                }
            }
            Layer::MaxPool2 => {
                let (oh, ow) = (h / 2, w / 2);
                for b in 0..nb {
                    let ib = input.batch(b);
                    let ob = out.batch_mut(b);
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let base = ci * h * w + 2 * oy * w + 2 * ox;
                                let mut best = ib[base];
                                for &off in &[1, w, w + 1] {
                                    if ib[base + off] > best {
                                        best = ib[base + off];
                                    }
                                }
                                ob[ci * oh * ow + oy * ow + ox] = best;
                            }
                        }
                    }
                }
            }
            Layer::Upsample2Nearest => {
                for b in 0..nb {
                    let ib = input.batch(b);
                    let ob = out.batch_mut(b);
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                ob[ci * 4 * h * w + y * 2 * w + x] =
                                    ib[ci * h * w + (y / 2) * w + x / 2];
                            }
                        }
                    }
                }
            }
            Layer::Sigmoid => {
                for (o, &v) in out.data_mut().iter_mut().zip(input.data()) {
                    *o = S::one() / (S::one() + (-v).exp());
                }
            }
            Layer::ScaledTanh => {
                let pi = S::from_f64(std::f64::consts::PI);
                for (o, &v) in out.data_mut().iter_mut().zip(input.data()) {
                    *o = pi * v.tanh();
                }
            }
        }
        Ok(out)
    }

    /// Exact reverse-mode step: accumulates parameter gradients into
    /// `grad` and returns the gradient with respect to the input.
    /// `output` must be the tensor `forward` produced for this `input`.
    pub fn backward(
        &self,
        input: &Tensor4Of<S>,
        output: &Tensor4Of<S>,
        grad_out: &Tensor4Of<S>,
        grad: &mut LayerGrad<S>,
    ) -> Tensor4Of<S> {
        let (nb, c, h, w) = input.shape();
        let mut gin = Tensor4Of::zeros(input.shape());
        match self {
            Layer::Conv3x3 { weight, .. } => {
                let oc = output.shape().1;
                let hw = h * w;
                let k = c * 9;
                let mut cols = vec![S::zero(); k * hw];
                let mut dcols = vec![S::zero(); k * hw];
                for b in 0..nb {
                    im2col(input.batch(b), c, h, w, &mut cols);
                    let gob = grad_out.batch(b);
                    for ci in 0..oc {
                        let mut s = S::zero();
                        for &g in &gob[ci * hw..(ci + 1) * hw] {
                            s = s + g;
                        }
                        grad.bias[ci] = grad.bias[ci] + s;
                    }
                    // dW += dY . cols^T   (transpose as swapped strides)
                    S::gemm(
                        oc,
                        hw,
                        k,
                        S::one(),
                        gob,
                        hw as isize,
                        1,
                        &cols,
                        1,
                        hw as isize,
                        S::one(),
                        &mut grad.weight,
                        k as isize,
                        1,
                    );
                    // dcols = W^T . dY
                    S::gemm(
                        k,
                        oc,
                        hw,
                        S::one(),
                        weight.data(),
                        1,
                        k as isize,
                        gob,
                        hw as isize,
                        1,
                        S::zero(),
                        &mut dcols,
                        hw as isize,
                        1,
                    );
                    col2im_add(&dcols, c, h, w, gin.batch_mut(b));
                }
            }
            Layer::Relu => {
                for ((gi, &v), &g) in
                    gin.data_mut().iter_mut().zip(input.data()).zip(grad_out.data())
                {
                    *gi = if v > S::zero() { g } else { S::zero() };
                }
            }
            Layer::LeakyRelu => {
                let slope = S::from_f64(LEAKY_SLOPE);
                for ((gi, &v), &g) in
                    gin.data_mut().iter_mut().zip(input.data()).zip(grad_out.data())
                {
                    *gi = if v > S::zero() { g } else { slope * g };
                }
            }
            Layer::MaxPool2 => {
                let (oh, ow) = (h / 2, w / 2);
                for b in 0..nb {
                    let ib = input.batch(b);
                    let gob = grad_out.batch(b);
                    let gib = gin.batch_mut(b);
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let base = ci * h * w + 2 * oy * w + 2 * ox;
                                // first maximum wins, matching forward
                                let mut arg = base;
                                for &off in &[1, w, w + 1] {
                                    if ib[base + off] > ib[arg] {
                                        arg = base + off;
                                    }
                                }
                                gib[arg] = gib[arg] + gob[ci * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                }
            }
            Layer::Upsample2Nearest => {
                for b in 0..nb {
                    let gob = grad_out.batch(b);
                    let gib = gin.batch_mut(b);
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let t = ci * h * w + (y / 2) * w + x / 2;
                                gib[t] = gib[t] + gob[ci * 4 * h * w + y * 2 * w + x];
                            }
                        }
                    }
                }
            }
            Layer::Sigmoid => {
                for ((gi, &y), &g) in
                    gin.data_mut().iter_mut().zip(output.data()).zip(grad_out.data())
                {
                    *gi = g * y * (S::one() - y);
                }
            }
            Layer::ScaledTanh => {
                let pi = S::from_f64(std::f64::consts::PI);
                for ((gi, &y), &g) in
                    gin.data_mut().iter_mut().zip(output.data()).zip(grad_out.data())
                {
                    // y = pi tanh(x); dy/dx = pi (1 - tanh^2) = pi - y^2/pi
                    *gi = g * (pi - y * y / pi);
                }
            }
        }
        gin
    }
}

/// Unfolds (c, h, w) into a (c*9, h*w) patch matrix, zero padding 1.
fn im2col<S: Scalar>(input: &[S], c: usize, h: usize, w: usize, cols: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy < 1 || iy > h {
                        cols[row + oy * w..row + (oy + 1) * w].fill(S::zero());
                        continue;
                    }
                    let src = ci * hw + (iy - 1) * w;
                    let dst = row + oy * w;
                    // kx shifts the row by one pixel either way
                    match kx {
                        0 => {
                            cols[dst] = S::zero();
                            cols[dst + 1..dst + w].copy_from_slice(&input[src..src + w - 1]);
                        }
                        1 => cols[dst..dst + w].copy_from_slice(&input[src..src + w]),
                        _ => {
                            cols[dst..dst + w - 1].copy_from_slice(&input[src + 1..src + w]);
                            cols[dst + w - 1] = S::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the patch matrix back onto (c, h, w).
fn col2im_add<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, out: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let dst = ci * hw + (iy - 1) * w;
                    let src = row + oy * w;
                    match kx {
                        0 => {
                            for x in 0..w - 1 {
                                out[dst + x] = out[dst + x] + cols[src + x + 1];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                out[dst + x] = out[dst + x] + cols[src + x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                out[dst + x + 1] = out[dst + x + 1] + cols[src + x];
                            }
                        }
                    }
                }
            }
        }
    }
}
