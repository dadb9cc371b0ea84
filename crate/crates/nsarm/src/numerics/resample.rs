use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Sparse 1D resampling operator: each output index reads a short run of
/// input indices with fixed weights. Both the area (down) and corner-aligned
/// bilinear (up) kernels are separable, so 2D resizing applies one of these
/// per axis. The transpose is the exact adjoint, used by the gradient path.
#[derive(Clone, Debug)]
pub struct Weights1d {
    pub src: usize,
    pub dst: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl Weights1d {
    /// Area-average weights for dst <= src. Output cell i covers the source
    /// span [i*src/dst, (i+1)*src/dst); each overlapped source cell is
    /// weighted by its covered fraction.
    pub fn area(src: usize, dst: usize) -> Self {
        debug_assert!(dst <= src && dst >= 1);
        let ratio = src as f64 / dst as f64;
        let rows = (0..dst)
            .map(|i| {
                let lo = i as f64 * ratio;
                let hi = (i + 1) as f64 * ratio;
                let j0 = lo.floor() as usize;
                let j1 = (hi.ceil() as usize).min(src);
                let mut w: Vec<f64> = (j0..j1)
                    .map(|j| {
                        let cell_lo = j as f64;
                        let cell_hi = (j + 1) as f64;
                        (hi.min(cell_hi) - lo.max(cell_lo)).max(0.0)
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                for v in &mut w {
                    *v /= total;
                }
                (j0, w)
            })
            .collect();
        Weights1d { src, dst, rows }
    }

    /// Corner-aligned bilinear weights for dst >= src: output i samples the
    /// source at coordinate i*(src-1)/(dst-1), so the endpoints map exactly.
    pub fn bilinear(src: usize, dst: usize) -> Self {
        debug_assert!(dst >= src && src >= 1);
        let rows = (0..dst)
            .map(|i| {
                if src == 1 {
                    return (0, vec![1.0]);
                }
                let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
                let j0 = (pos.floor() as usize).min(src - 2);
                let frac = pos - j0 as f64;
                if frac == 0.0 {
                    (j0, vec![1.0])
                } else {
                    (j0, vec![1.0 - frac, frac])
                }
            })
            .collect();
        Weights1d { src, dst, rows }
    }

    /// y[i] = sum_j w[i][j] * x[j], over strided element groups. `stride` is
    /// the number of interleaved channels (innermost), `groups` the number of
    /// independent lines (outermost).
    fn apply(&self, x: &[f32], y: &mut [f32], groups: usize, stride: usize) {
        debug_assert_eq!(x.len(), groups * self.src * stride);
        debug_assert_eq!(y.len(), groups * self.dst * stride);
        for g in 0..groups {
            let xg = &x[g * self.src * stride..(g + 1) * self.src * stride];
            let yg = &mut y[g * self.dst * stride..(g + 1) * self.dst * stride];
            for (i, (j0, w)) in self.rows.iter().enumerate() {
                for c in 0..stride {
                    let mut acc = 0.0f64;
                    for (dj, &wv) in w.iter().enumerate() {
                        acc += wv * xg[(j0 + dj) * stride + c] as f64;
                    }
                    yg[i * stride + c] = acc as f32;
                }
            }
        }
    }

    /// x[j] += sum_i w[i][j] * y[i]: the adjoint of `apply`.
    fn apply_transposed(&self, y: &[f32], x: &mut [f32], groups: usize, stride: usize) {
        debug_assert_eq!(y.len(), groups * self.dst * stride);
        debug_assert_eq!(x.len(), groups * self.src * stride);
        for g in 0..groups {
            let yg = &y[g * self.dst * stride..(g + 1) * self.dst * stride];
            let xg = &mut x[g * self.src * stride..(g + 1) * self.src * stride];
            for (i, (j0, w)) in self.rows.iter().enumerate() {
                for c in 0..stride {
                    let gy = yg[i * stride + c] as f64;
                    for (dj, &wv) in w.iter().enumerate() {
                        let slot = &mut xg[(j0 + dj) * stride + c];
                        *slot = (*slot as f64 + wv * gy) as f32;
                    }
                }
            }
        }
    }
}

fn resize_with(
    x: &Tensor,
    target: (usize, usize),
    make: impl Fn(usize, usize) -> Weights1d,
) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let (th, tw) = target;
    if (th, tw) == (h, w) {
        return Ok(x.clone());
    }
    let wr = make(h, th);
    let wc = make(w, tw);
    // Rows first: (h, w, c) -> (th, w, c); then columns: -> (th, tw, c).
    let mut mid = vec![0.0f32; th * w * c];
    wr.apply(x.data(), &mut mid, 1, w * c);
    let mut out = vec![0.0f32; th * tw * c];
    wc.apply(&mid, &mut out, th, c);
    Tensor::from_vec(vec![th, tw, c], out)
}

/// Adjoint of `resize_with`, shared by the autodiff tape.
pub(crate) fn resize_transposed(
    grad_out: &Tensor,
    source: (usize, usize),
    down: bool,
) -> Result<Tensor> {
    let (th, tw, c) = grad_out.dims3()?;
    let (h, w) = source;
    if (th, tw) == (h, w) {
        return Ok(grad_out.clone());
    }
    let make = if down { Weights1d::area } else { Weights1d::bilinear };
    let wr = make(h, th);
    let wc = make(w, tw);
    let mut mid = vec![0.0f32; th * w * c];
    wc.apply_transposed(grad_out.data(), &mut mid, th, c);
    let mut out = vec![0.0f32; h * w * c];
    wr.apply_transposed(&mid, &mut out, 1, w * c);
    Tensor::from_vec(vec![h, w, c], out)
}

/// Area-average downsampling of an (h, w, c) tensor. Identity when the
/// target equals the source shape.
pub fn resize_down(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w, _) = x.dims3()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument("resize_down target has a zero dimension".into()));
    }
    if th > h || tw > w {
        return Err(Error::InvalidArgument(format!(
            "resize_down target ({th},{tw}) larger than source ({h},{w})"
        )));
    }
    let out = resize_with(x, target, Weights1d::area)?;
    out.check_finite("resize_down")?;
    Ok(out)
}

/// Corner-aligned bilinear upsampling of an (h, w, c) tensor. Identity when
/// the target equals the source shape.
pub fn resize_up(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w, _) = x.dims3()?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::InvalidArgument(format!(
            "resize_up target ({th},{tw}) smaller than source ({h},{w})"
        )));
    }
    let out = resize_with(x, target, Weights1d::bilinear)?;
    out.check_finite("resize_up")?;
    Ok(out)
}
