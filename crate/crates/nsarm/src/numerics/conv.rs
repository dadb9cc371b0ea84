//! 2D convolution as im2col + matmul, with the matching gradient kernels.
//!
//! Layouts: activations are (h, w, c) row-major; kernels are stored as a
//! 2D matrix (kh*kw*cin, cout) so forward, weight-grad, and input-grad all
//! reduce to the dense kernels in [`super::linalg`].

use crate::error::{Error, Result};

use super::linalg;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvSpec {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }
}

/// Expand input patches into rows: (oh*ow, kh*kw*cin). Out-of-bounds taps
/// read zero (zero padding).
pub fn im2col(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if c != spec.cin {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, image has {c}",
            spec.cin
        )));
    }
    let (oh, ow) = spec.out_size(h, w);
    let plen = spec.patch_len();
    let mut cols = vec![0.0f32; oh * ow * plen];
    let xd = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            let mut slot = 0;
            for ky in 0..spec.kernel {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                for kx in 0..spec.kernel {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let base = (iy as usize * w + ix as usize) * c;
                        row[slot..slot + c].copy_from_slice(&xd[base..base + c]);
                    }
                    slot += c;
                }
            }
        }
    }
    Tensor::from_vec(vec![oh * ow, plen], cols)
}

/// Scatter-add of column gradients back to the input image: adjoint of im2col.
pub fn col2im(cols: &Tensor, spec: &ConvSpec, h: usize, w: usize) -> Result<Tensor> {
    let (oh, ow) = spec.out_size(h, w);
    let plen = spec.patch_len();
    let c = spec.cin;
    let mut out = vec![0.0f32; h * w * c];
    let cd = cols.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cd[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            let mut slot = 0;
            for ky in 0..spec.kernel {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                for kx in 0..spec.kernel {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let base = (iy as usize * w + ix as usize) * c;
                        for ch in 0..c {
                            out[base + ch] += row[slot + ch];
                        }
                    }
                    slot += c;
                }
            }
        }
    }
    Tensor::from_vec(vec![h, w, c], out)
}

/// Forward convolution. Returns (output (oh, ow, cout), cached im2col matrix).
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor)> {
    let (h, w, _) = x.dims3()?;
    let (rows, cols_w) = weight.dims2()?;
    if rows != spec.patch_len() || cols_w != spec.cout {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {:?} does not match spec ({}x{})",
            weight.shape(),
            spec.patch_len(),
            spec.cout
        )));
    }
    let cols = im2col(x, spec)?;
    let (oh, ow) = spec.out_size(h, w);
    let m = oh * ow;
    let mut out = vec![0.0f32; m * spec.cout];
    linalg::mm_nn(cols.data(), weight.data(), &mut out, m, spec.patch_len(), spec.cout);
    if let Some(b) = bias {
        if b.numel() != spec.cout {
            return Err(Error::ShapeMismatch("conv bias length".into()));
        }
        for row in out.chunks_mut(spec.cout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok((Tensor::from_vec(vec![oh, ow, spec.cout], out)?, cols))
}

/// Gradients of conv2d given the cached im2col matrix.
/// Returns (dx, dweight, dbias).
pub fn conv2d_backward(
    grad_out: &Tensor,
    cols: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    in_h: usize,
    in_w: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (oh, ow, _) = grad_out.dims3()?;
    let m = oh * ow;
    let plen = spec.patch_len();

    // dW = cols^T (m x plen)^T * gout (m x cout)
    let mut dw = vec![0.0f32; plen * spec.cout];
    linalg::mm_tn(cols.data(), grad_out.data(), &mut dw, plen, m, spec.cout);

    // db = column sums of gout, accumulated in f64.
    let mut db = vec![0.0f64; spec.cout];
    for row in grad_out.data().chunks(spec.cout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();

    // dcols = gout (m x cout) * W^T (cout x plen), then scatter back.
    let mut dcols = vec![0.0f32; m * plen];
    linalg::mm_nt(grad_out.data(), weight.data(), &mut dcols, m, spec.cout, plen);
    let dx = col2im(&Tensor::from_vec(vec![m, plen], dcols)?, spec, in_h, in_w)?;

    Ok((
        dx,
        Tensor::from_vec(vec![plen, spec.cout], dw)?,
        Tensor::from_vec(vec![spec.cout], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_through() {
        // 1x1 kernel, identity weight matrix: output == input.
        let spec = ConvSpec { kernel: 1, stride: 1, pad: 0, cin: 2, cout: 2 };
        let x = Tensor::from_fn(&[3, 3, 2], |i| i as f32);
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (y, _) = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn stride_two_shape() {
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 1, cin: 3, cout: 4 };
        assert_eq!(spec.out_size(64, 64), (32, 32));
        assert_eq!(spec.out_size(16, 16), (8, 8));
    }

    #[test]
    fn box_filter_averages() {
        let spec = ConvSpec { kernel: 2, stride: 2, pad: 0, cin: 1, cout: 1 };
        let x = Tensor::from_vec(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full(&[4, 1], 0.25);
        let (y, _) = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 1, cin: 2, cout: 1 };
        let mut rng = crate::numerics::rng::Rng::seeded(3);
        let x = rng.fill_normal(&[5, 4, 2], 1.0);
        let cols = im2col(&x, &spec).unwrap();
        let y = rng.fill_normal(cols.shape(), 1.0);
        let aty = col2im(&y, &spec, 5, 4).unwrap();
        let lhs: f64 = cols
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(aty.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
