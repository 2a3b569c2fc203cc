//! Dense row-major `f32` tensors and the handful of kernels the rest of the
//! crate needs.
//!
//! 4-D tensors use `N, C, H, W` order. Every kernel accumulates each output
//! element sequentially in a fixed order, so results do not depend on how work
//! is scheduled.

use crate::error::{MwqError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(MwqError::InvalidShape {
            shape: shape.to_vec(),
            reason: "at least one dimension is required".into(),
        });
    }
    if shape.contains(&0) {
        return Err(MwqError::InvalidShape {
            shape: shape.to_vec(),
            reason: "all extents must be >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], fill: f32) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(MwqError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("{} elements do not fill {} slots", data.len(), len),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    /// Inverse of [`Tensor::flat_index`].
    pub fn unravel_index(&self, mut flat: usize) -> Vec<usize> {
        let mut index = vec![0; self.shape.len()];
        for (slot, &d) in index.iter_mut().zip(&self.shape).rev() {
            *slot = flat % d;
            flat /= d;
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.flat_index(index)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(MwqError::ShapeMismatch {
                expected: self.shape.clone(),
                actual: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(MwqError::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f32)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, &v)| (i, v))
    }
}

/// Geometry shared by the convolution kernels.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(MwqError::InvalidShape {
                shape: if input.len() != 4 {
                    input.to_vec()
                } else {
                    kernel.to_vec()
                },
                reason: "conv2d expects 4-D input [N,C,H,W] and kernel [Cout,Cin,kh,kw]".into(),
            });
        }
        if input[1] != kernel[1] {
            return Err(MwqError::ShapeMismatch {
                expected: vec![kernel[0], input[1], kernel[2], kernel[3]],
                actual: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(MwqError::Config("conv2d stride must be >= 1".into()));
        }
        let (h, w) = (input[2], input[3]);
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(MwqError::InvalidShape {
                shape: kernel.to_vec(),
                reason: format!("kernel larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            });
        }
        Ok(ConvGeom {
            n: input[0],
            cin: input[1],
            h,
            w,
            cout: kernel[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for patch row `k` at output position `p`, if inside the image.
    #[inline]
    fn source(&self, k: usize, p: usize) -> Option<(usize, usize, usize)> {
        let kx = k % self.kw;
        let ky = (k / self.kw) % self.kh;
        let c = k / (self.kw * self.kh);
        let ox = p % self.wo;
        let oy = p / self.wo;
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((c, y as usize, x as usize))
        }
    }

    /// Unfold one image into a `[patch_len, positions]` matrix.
    fn im2col(&self, image: &[f32]) -> Vec<f32> {
        let (pl, np) = (self.patch_len(), self.positions());
        let mut cols = vec![0.0f32; pl * np];
        for k in 0..pl {
            let row = &mut cols[k * np..(k + 1) * np];
            for (p, slot) in row.iter_mut().enumerate() {
                if let Some((c, y, x)) = self.source(k, p) {
                    *slot = image[(c * self.h + y) * self.w + x];
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f32], image: &mut [f32]) {
        let (pl, np) = (self.patch_len(), self.positions());
        for k in 0..pl {
            for p in 0..np {
                if let Some((c, y, x)) = self.source(k, p) {
                    image[(c * self.h + y) * self.w + x] += cols[k * np + p];
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// Output extent per spatial axis is `floor((H + 2*pad - kh) / stride) + 1`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let (pl, np) = (g.patch_len(), g.positions());
    let image_len = g.cin * g.h * g.w;
    let mut out = vec![0.0f32; g.n * g.cout * np];
    let k = kernel.data();
    for n in 0..g.n {
        let cols = g.im2col(&input.data()[n * image_len..(n + 1) * image_len]);
        let out_n = &mut out[n * g.cout * np..(n + 1) * g.cout * np];
        for co in 0..g.cout {
            let acc = &mut out_n[co * np..(co + 1) * np];
            for kk in 0..pl {
                let wv = k[co * pl + kk];
                let col = &cols[kk * np..(kk + 1) * np];
                for (a, &c) in acc.iter_mut().zip(col) {
                    *a += wv * c;
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let expected = [g.n, g.cout, g.ho, g.wo];
    if grad_out.shape() != expected {
        return Err(MwqError::ShapeMismatch {
            expected: expected.to_vec(),
            actual: grad_out.shape().to_vec(),
        });
    }
    let (pl, np) = (g.patch_len(), g.positions());
    let image_len = g.cin * g.h * g.w;
    let k = kernel.data();
    let mut grad_in = vec![0.0f32; input.len()];
    let mut grad_k = vec![0.0f32; kernel.len()];
    let mut grad_cols = vec![0.0f32; pl * np];
    for n in 0..g.n {
        let cols = g.im2col(&input.data()[n * image_len..(n + 1) * image_len]);
        let go = &grad_out.data()[n * g.cout * np..(n + 1) * g.cout * np];
        for co in 0..g.cout {
            let go_c = &go[co * np..(co + 1) * np];
            for kk in 0..pl {
                let col = &cols[kk * np..(kk + 1) * np];
                let s: f32 = go_c.iter().zip(col).map(|(a, b)| a * b).sum();
                grad_k[co * pl + kk] += s;
            }
        }
        grad_cols.iter_mut().for_each(|v| *v = 0.0);
        for co in 0..g.cout {
            let go_c = &go[co * np..(co + 1) * np];
            for kk in 0..pl {
                let wv = k[co * pl + kk];
                let gc = &mut grad_cols[kk * np..(kk + 1) * np];
                for (a, &b) in gc.iter_mut().zip(go_c) {
                    *a += wv * b;
                }
            }
        }
        g.col2im_add(&grad_cols, &mut grad_in[n * image_len..(n + 1) * image_len]);
    }
    Ok((
        Tensor::from_vec(input.shape(), grad_in)?,
        Tensor::from_vec(kernel.shape(), grad_k)?,
    ))
}

/// `x[N, in] · w[out, in]^T -> [N, out]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(MwqError::ShapeMismatch {
            expected: vec![x.shape()[0], w.shape().get(1).copied().unwrap_or(0)],
            actual: x.shape().to_vec(),
        });
    }
    let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut out = vec![0.0f32; n * dout];
    for i in 0..n {
        let xr = &x.data()[i * din..(i + 1) * din];
        for o in 0..dout {
            let wr = &w.data()[o * din..(o + 1) * din];
            out[i * dout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::from_vec(&[n, dout], out)
}

/// Gradients of [`linear`]: `(grad_x, grad_w)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    if grad_out.shape() != [n, dout] {
        return Err(MwqError::ShapeMismatch {
            expected: vec![n, dout],
            actual: grad_out.shape().to_vec(),
        });
    }
    let mut gx = vec![0.0f32; n * din];
    let mut gw = vec![0.0f32; dout * din];
    for i in 0..n {
        let xr = &x.data()[i * din..(i + 1) * din];
        let gr = &grad_out.data()[i * dout..(i + 1) * dout];
        let gxr = &mut gx[i * din..(i + 1) * din];
        for (o, &g) in gr.iter().enumerate() {
            let wr = &w.data()[o * din..(o + 1) * din];
            let gwr = &mut gw[o * din..(o + 1) * din];
            for j in 0..din {
                gxr[j] += g * wr[j];
                gwr[j] += g * xr[j];
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
    ))
}
