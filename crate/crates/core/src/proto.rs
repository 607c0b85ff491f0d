//! Class-specific prototype clustering.
//!
//! Pixels are softly assigned to `K` learnable centers; assignment-weighted
//! residuals against those centers are normalized, mixed by a linear layer,
//! averaged over clusters and broadcast back over the map, then fused with the
//! original features by a 1×1 convolution.

use rand::Rng;

use crate::layers::{Conv2d, Linear};
use crate::tensor::{Bindings, Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// `[K, C]` cluster centers.
    pub centers: ParamId,
    /// 1×1 convolution `C → K` producing assignment logits.
    pub assign: Conv2d,
    /// Linear map on the flattened `K·C` residual vector.
    pub out_linear: Linear,
    /// 1×1 convolution `2C → C` over `[f, F_p^3]`.
    pub fuse: Conv2d,
    pub k: usize,
    pub c: usize,
}

impl PrototypeBank {
    /// Centers ~ N(0, `center_std`²), assignment weights ~ N(0, 1),
    /// `out_linear` the identity and `fuse` selecting the first `C` channels,
    /// so a fresh bank leaves its input unchanged.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        c: usize,
        center_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        if k < 2 || c == 0 {
            return Err(TensorError::Dimension(format!(
                "prototype bank needs K >= 2 and C >= 1, got K = {k}, C = {c}"
            )));
        }
        let centers = store.add(
            format!("{name}.centers"),
            Tensor::randn(&[k, c], center_std, rng),
        );
        let aw = store.add(
            format!("{name}.assign.weight"),
            Tensor::randn(&[k, c, 1, 1], 1.0, rng),
        );
        let kc = k * c;
        let lw = store.add(
            format!("{name}.out_linear.weight"),
            Tensor::from_fn(&[kc, kc], |i| {
                if i / kc == i % kc {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        );
        let fw = store.add(
            format!("{name}.fuse.weight"),
            Tensor::from_fn(&[c, 2 * c, 1, 1], |i| {
                if i / (2 * c) == i % (2 * c) {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        );
        Ok(Self {
            centers,
            assign: Conv2d::from_weight(store, &format!("{name}.assign"), aw, 1, 0, true),
            out_linear: Linear::from_weight(store, &format!("{name}.out_linear"), lw, true),
            fuse: Conv2d::from_weight(store, &format!("{name}.fuse"), fw, 1, 0, false),
            k,
            c,
        })
    }

    fn check(&self, g: &Graph<impl Real>, f: Var) -> Result<(), TensorError> {
        let [_, c, _, _] = g.value(f).dims4()?;
        if c != self.c {
            return Err(TensorError::Dimension(format!(
                "prototype bank expects {} channels, got {c}",
                self.c
            )));
        }
        Ok(())
    }
}

/// `θ = softmax_K(assign(l2_normalize_channels(f)))`, shape `[N, K, H, W]`.
pub fn soft_assign<T: Real>(
    g: &mut Graph<T>,
    p: &Bindings,
    f: Var,
    bank: &PrototypeBank,
) -> Result<Var, TensorError> {
    bank.check(g, f)?;
    let fnorm = g.l2_normalize_channels(f)?;
    let logits = bank.assign.forward(g, p, fnorm)?;
    g.softmax_channels(logits)
}

/// Residuals of the channel-normalized features against every center,
/// weighted by `theta` and summed over pixels; each cluster block is then
/// unit-normalized, the blocks flattened to `[N, K·C]` and the whole vector
/// unit-normalized.
pub fn weighted_residuals<T: Real>(
    g: &mut Graph<T>,
    p: &Bindings,
    f: Var,
    theta: Var,
    bank: &PrototypeBank,
) -> Result<Var, TensorError> {
    bank.check(g, f)?;
    let n = g.value(f).shape()[0];
    let fnorm = g.l2_normalize_channels(f)?;
    let r = g.assignment_residuals(fnorm, theta, p[bank.centers])?;
    let r = g.l2_normalize_rows(r)?;
    let flat = g.reshape(r, &[n, bank.k * bank.c])?;
    g.l2_normalize_rows(flat)
}

/// `out_linear(r)` reshaped to `[N, K, C]`, averaged over `K` and broadcast
/// to `[N, C, h, w]`.
pub fn project_prototypes<T: Real>(
    g: &mut Graph<T>,
    p: &Bindings,
    r: Var,
    bank: &PrototypeBank,
    h: usize,
    w: usize,
) -> Result<Var, TensorError> {
    let n = g.value(r).shape()[0];
    let y = bank.out_linear.forward(g, p, r)?;
    let y = g.reshape(y, &[n, bank.k, bank.c])?;
    g.mean_broadcast_spatial(y, h, w)
}

/// `fuse([f, F_p^3])` with `F_p^3` from the full assignment pipeline. The
/// output has the shape of `f`.
pub fn enhance<T: Real>(
    g: &mut Graph<T>,
    p: &Bindings,
    f: Var,
    bank: &PrototypeBank,
) -> Result<Var, TensorError> {
    let [_, _, h, w] = g.value(f).dims4()?;
    let theta = soft_assign(g, p, f, bank)?;
    let r = weighted_residuals(g, p, f, theta, bank)?;
    let fp3 = project_prototypes(g, p, r, bank, h, w)?;
    let cat = g.concat_channels(f, fp3)?;
    bank.fuse.forward(g, p, cat)
}
