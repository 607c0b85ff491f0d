//! Standalone kernels and graph-free entry points for the feature-map operators.

use super::{dim_err, Graph, Real, Tensor, TensorError, STATS_EPS};

/// Per-channel mean and standard deviation of a `[N, C, H, W]` map, pooled
/// over batch and space. The deviation is `sqrt(population variance + 1e-5)`.
pub fn channel_stats<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>), TensorError> {
    let [n, c, h, w] = x.dims4()?;
    let m = n * h * w;
    if m == 0 || c == 0 {
        return Err(dim_err(format!(
            "channel_stats of an empty map {:?}",
            x.shape()
        )));
    }
    let hw = h * w;
    let mut means = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for ci in 0..c {
        let planes =
            || (0..n).flat_map(move |b| x.data()[(b * c + ci) * hw..(b * c + ci + 1) * hw].iter());
        let mean = planes().map(|v| v.as_f64()).sum::<f64>() / m as f64;
        let var = planes().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
        means.push(T::of(mean));
        stds.push(T::of((var + STATS_EPS).sqrt()));
    }
    Ok((means, stds))
}

/// Standardizes each channel of `x` with [`channel_stats`].
pub fn normalize<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.normalize_channels(v)?;
    Ok(g.value(y).clone())
}

/// `out[:, c] = sigma[c] * x[:, c] + mu[c]`.
pub fn apply_style<T: Real>(
    x: &Tensor<T>,
    mu: &[T],
    sigma: &[T],
) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let m = g.constant(Tensor::new(&[mu.len()], mu.to_vec())?);
    let s = g.constant(Tensor::new(&[sigma.len()], sigma.to_vec())?);
    let y = g.apply_style(v, m, s)?;
    Ok(g.value(y).clone())
}

/// Mean cosine similarity between the projected channel vectors of `a` and the
/// embedding `b`; `proj` is `[D, C]`.
pub fn cosine_sim_map<T: Real>(a: &Tensor<T>, b: &[T], proj: &Tensor<T>) -> Result<T, TensorError> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let pv = g.constant(proj.clone());
    let bv = g.constant(Tensor::new(&[b.len()], b.to_vec())?);
    let projected = g.project_channels(av, pv)?;
    let s = g.channel_cosine(projected, bv)?;
    Ok(g.value(s).item())
}

/// Mean channelwise cosine similarity between two maps of the same shape.
pub fn map_cosine<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T, TensorError> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let s = g.channel_cosine(av, bv)?;
    Ok(g.value(s).item())
}

pub(crate) fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Window `[start, end)` of output cell `i` when pooling `len` cells into `out`.
pub(crate) fn pool_bounds(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

#[derive(Clone, Copy)]
pub(crate) struct Im2Col {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Im2Col {
    /// Source pixel index for column `(oy, ox)` of kernel tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds one image `[Cin, H, W]` into `[Cin*KH*KW, OH*OW]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &Im2Col, cols: &mut [T]) {
    let l = g.oh * g.ow;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        cols[row + oy * g.ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, xx)) => x[(c * g.h + y) * g.w + xx],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Im2Col, x: &mut [T]) {
    let l = g.oh * g.ow;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            x[(c * g.h + y) * g.w + xx] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * *bv);
        }
    }
}
