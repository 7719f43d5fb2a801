//! Forward and backward kernels on raw tensors. The tape calls into these;
//! they are public so reference checks can exercise them without a tape.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, wc_in, k, k2) = match *weight.shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("conv2d weight", input.shape(), weight.shape())),
        };
        if wc_in != c_in || k != k2 {
            return Err(Error::shape("conv2d", input.shape(), weight.shape()));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape("conv2d bias", weight.shape(), bias.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::invalid(format!(
                "conv2d kernel {k} larger than padded input {:?} (padding {padding})",
                input.shape()
            )));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1 stride-1 unpadded convolution reads the input directly as its
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds `input` into a `[C_in*k*k, H_out*W_out]` column matrix.
fn im2col(g: &ConvGeom, input: &[f32]) -> Vec<f32> {
    let plane = g.out_plane();
    let mut cols = vec![0.0f32; g.patch_len() * plane];
    for c in 0..g.c_in {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column-matrix gradient back onto the input grid (accumulating).
fn col2im(g: &ConvGeom, cols: &[f32], grad_input: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dst = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strided GEMM: `c = alpha * a @ b + beta * c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
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
            n as isize,
            1,
        );
    }
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, weight, bias, stride, padding)?;
    let plane = g.out_plane();
    let mut out = vec![0.0f32; g.c_out * plane];
    for (co, row) in out.chunks_mut(plane).enumerate() {
        row.fill(bias.data()[co]);
    }
    let owned;
    let cols: &[f32] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(&g, input.data());
        &owned
    };
    let kk = g.patch_len();
    gemm(g.c_out, kk, plane, weight.data(), (kk, 1), cols, (plane, 1), 1.0, &mut out);
    Tensor::new([g.c_out, g.h_out, g.w_out], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input, weight, bias, stride, padding)?;
    let plane = g.out_plane();
    let kk = g.patch_len();
    let dy = grad_out.data();

    let weight_grad = if need[1] {
        let owned;
        let cols: &[f32] = if g.is_pointwise() {
            input.data()
        } else {
            owned = im2col(&g, input.data());
            &owned
        };
        let mut dw = vec![0.0f32; g.c_out * kk];
        gemm(g.c_out, plane, kk, dy, (plane, 1), cols, (1, plane), 0.0, &mut dw);
        Some(Tensor::new(weight.shape().to_vec(), dw)?)
    } else {
        None
    };

    let bias_grad = need[2].then(|| {
        Tensor::from_fn([g.c_out], |co| dy[co * plane..(co + 1) * plane].iter().sum())
    });

    let input_grad = if need[0] {
        let mut dcols = vec![0.0f32; kk * plane];
        gemm(kk, g.c_out, plane, weight.data(), (1, kk), dy, (plane, 1), 0.0, &mut dcols);
        let dx = if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0f32; g.c_in * g.h * g.w];
            col2im(&g, &dcols, &mut dx);
            dx
        };
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}

fn dense_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (d_out, d_in) = match *weight.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::shape("dense weight", input.shape(), weight.shape())),
    };
    if input.shape() != [d_in] {
        return Err(Error::shape("dense", input.shape(), weight.shape()));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape("dense bias", weight.shape(), bias.shape()));
    }
    Ok((d_out, d_in))
}

pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = dense_dims(input, weight, bias)?;
    let x = input.data();
    let w = weight.data();
    Ok(Tensor::from_fn([d_out], |o| {
        let row = &w[o * d_in..(o + 1) * d_in];
        bias.data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
    }))
}

pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<[Option<Tensor>; 3]> {
    let (d_out, d_in) = dense_dims(input, weight, bias)?;
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();
    let dx = need[0].then(|| {
        Tensor::from_fn([d_in], |i| (0..d_out).map(|o| w[o * d_in + i] * gy[o]).sum())
    });
    let dw = need[1].then(|| Tensor::from_fn([d_out, d_in], |idx| gy[idx / d_in] * x[idx % d_in]));
    let db = need[2].then(|| grad_out.clone());
    Ok([dx, dw, db])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
    Sigmoid,
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    #[inline]
    pub fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = self.apply(*v));
        y
    }

    pub fn backward(self, x: &Tensor, y: &Tensor, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for ((gv, &xv), &yv) in g.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
            *gv *= self.derivative(xv, yv);
        }
        g
    }
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let n = (h * w) as f32;
    Ok(Tensor::from_fn([c], |ci| input.channel(ci).iter().sum::<f32>() / n))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane: usize = input_shape[1..].iter().product();
    let n = plane as f32;
    Tensor::from_fn(input_shape.to_vec(), |i| grad_out.data()[i / plane] / n)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

fn check_channelwise(features: &Tensor, scale: &Tensor) -> Result<usize> {
    let (c, _, _) = features.dims3()?;
    if scale.shape() != [c] {
        return Err(Error::shape("mul_channelwise", features.shape(), scale.shape()));
    }
    Ok(c)
}

pub fn mul_channelwise(features: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let c = check_channelwise(features, scale)?;
    let mut out = features.clone();
    let plane = out.numel() / c;
    for (ci, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let s = scale.data()[ci];
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

pub fn mul_channelwise_backward(
    features: &Tensor,
    scale: &Tensor,
    grad_out: &Tensor,
    need: [bool; 2],
) -> Result<[Option<Tensor>; 2]> {
    let c = check_channelwise(features, scale)?;
    let plane = features.numel() / c;
    let df = if need[0] {
        Some(mul_channelwise(grad_out, scale)?)
    } else {
        None
    };
    let ds = need[1].then(|| {
        Tensor::from_fn([c], |ci| {
            let f = &features.data()[ci * plane..(ci + 1) * plane];
            let g = &grad_out.data()[ci * plane..(ci + 1) * plane];
            f.iter().zip(g).map(|(a, b)| a * b).sum()
        })
    });
    Ok([df, ds])
}
