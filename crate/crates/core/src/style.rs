//! AdaIN-style re-styling driven by text embeddings.
//!
//! A [`StyleParams`] is a per-channel `(mu, sigma)` pair. It is learned by
//! minimizing the text-visual consistency loss
//! `1 - mean cos(P · (sigma * normalize(F) + mu), f_t)` over source feature
//! maps, where `P` is a frozen projection from feature channels to the
//! embedding dimension. Learned entries are collected in an append-only
//! [`StyleBank`] from which the transfer stage samples.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{StyleBankFile, StyleBankRecord};
use crate::prompt::Embedding;
use crate::tensor::{sgd_step, Graph, Real, SgdConfig, Tensor, TensorError, Var};
use crate::{rng, Error, Result};

pub use crate::tensor::ops::{apply_style, channel_stats, normalize};

/// Lower bound applied to every scale after each update.
pub const SIGMA_MIN: f32 = 1e-4;

/// One learned style: per-channel mean and scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    /// Identifier of the prompt chain the style was learned from.
    pub provenance: String,
}

impl StyleParams {
    /// The identity style `(0, 1)`.
    pub fn identity(channels: usize, provenance: impl Into<String>) -> Self {
        Self {
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
            provenance: provenance.into(),
        }
    }

    pub fn new(mu: Vec<f32>, sigma: Vec<f32>, provenance: impl Into<String>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(TensorError::Dimension(format!(
                "style params need equal non-empty lengths, got {} and {}",
                mu.len(),
                sigma.len()
            ))
            .into());
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::config(format!("style scale {s} is not positive")));
        }
        Ok(Self {
            mu,
            sigma,
            provenance: provenance.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// `sigma * normalize(x) + mu`.
    pub fn restyle(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(apply_style(&normalize(x)?, &self.mu, &self.sigma)?)
    }

    fn clamp(&mut self) {
        for s in &mut self.sigma {
            *s = s.max(SIGMA_MIN);
        }
    }
}

/// Append-only collection of learned styles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StyleBank {
    entries: Vec<StyleParams>,
}

impl StyleBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; all entries must share one channel count.
    pub fn push(&mut self, p: StyleParams) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.channels() != p.channels() {
                return Err(TensorError::Dimension(format!(
                    "bank holds {}-channel styles, got {}",
                    first.channels(),
                    p.channels()
                ))
                .into());
            }
        }
        self.entries.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StyleParams] {
        &self.entries
    }

    pub fn channels(&self) -> Option<usize> {
        self.entries.first().map(StyleParams::channels)
    }

    /// Uniform draw from `rng`.
    pub fn sample_with(&self, rng: &mut impl Rng) -> Result<&StyleParams> {
        if self.entries.is_empty() {
            return Err(Error::state("cannot sample from an empty style bank"));
        }
        Ok(&self.entries[rng.random_range(0..self.entries.len())])
    }

    /// Uniform draw reproducible under `seed`.
    pub fn sample(&self, seed: u64) -> Result<&StyleParams> {
        self.sample_with(&mut rng::derive(seed, "style-sample"))
    }

    /// SHA-256 over provenance strings and the bits of every value.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update((e.provenance.len() as u64).to_le_bytes());
            h.update(e.provenance.as_bytes());
            for v in e.mu.iter().chain(&e.sigma) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn to_file(&self) -> Result<StyleBankFile> {
        let channels = self.channels().unwrap_or(0);
        Ok(StyleBankFile {
            channels: u32::try_from(channels)
                .map_err(|_| Error::state("channel count exceeds u32"))?,
            entries: self
                .entries
                .iter()
                .map(|e| StyleBankRecord {
                    provenance: e.provenance.clone(),
                    mu: e.mu.clone(),
                    sigma: e.sigma.clone(),
                })
                .collect(),
        })
    }

    pub fn from_file(file: StyleBankFile) -> Result<Self> {
        let mut bank = Self::new();
        for r in file.entries {
            bank.push(StyleParams::new(r.mu, r.sigma, r.provenance)?)?;
        }
        Ok(bank)
    }
}

/// Frozen `[D, C]` map from feature channels to the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub matrix: Tensor<f32>,
}

impl Projection {
    pub fn identity(c: usize) -> Self {
        Self {
            matrix: Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }),
        }
    }

    /// Random matrix with orthonormal columns (Gram-Schmidt on Gaussian
    /// columns, in f64). Needs `d >= c`.
    pub fn random_orthonormal(d: usize, c: usize, rng: &mut impl Rng) -> Result<Self> {
        if d < c || c == 0 {
            return Err(Error::config(format!(
                "cannot embed {c} channels orthonormally into {d} dimensions"
            )));
        }
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(c);
        while cols.len() < c {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            for _ in 0..2 {
                for u in &cols {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        Ok(Self {
            matrix: Tensor::from_fn(&[d, c], |i| cols[i % c][i / c] as f32),
        })
    }

    /// Identity when `d == c`, otherwise random orthonormal columns.
    pub fn for_dims(d: usize, c: usize, seed: u64) -> Result<Self> {
        if d == c {
            Ok(Self::identity(c))
        } else {
            Self::random_orthonormal(d, c, &mut rng::derive(seed, "text-projection"))
        }
    }

    pub fn channels(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// `1 - mean cos(proj · f_i, f_t)` on a graph. `f_t` is `[D]`, `proj` `[D, C]`.
pub fn loss_tc<T: Real>(
    g: &mut Graph<T>,
    f_i: Var,
    f_t: Var,
    proj: Var,
) -> Result<Var, TensorError> {
    let projected = g.project_channels(f_i, proj)?;
    let sim = g.channel_cosine(projected, f_t)?;
    Ok(g.affine(sim, -T::one(), T::one()))
}

/// Value of [`loss_tc`] for a concrete map and embedding.
pub fn loss_tc_value(f_i: &Tensor<f32>, f_t: &Embedding, proj: &Projection) -> Result<f32> {
    let mut g = Graph::new();
    let (a, b, p) = (
        g.constant(f_i.clone()),
        g.constant(Tensor::new(&[f_t.dim()], f_t.0.clone())?),
        g.constant(proj.matrix.clone()),
    );
    let l = loss_tc(&mut g, a, b, p)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTrainConfig {
    pub steps: usize,
    pub optim: SgdConfig,
    /// Feature maps per step.
    pub batch: usize,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            optim: SgdConfig::default(),
            batch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleTrainOutcome {
    pub params: StyleParams,
    /// Loss of every step, evaluated before that step's update.
    pub losses: Vec<f32>,
    /// Mean loss of the returned parameters over all batches of the stream.
    pub final_loss: f32,
}

fn batches(feats: &[Tensor<f32>], batch: usize) -> Result<Vec<Tensor<f32>>> {
    let n = feats.len();
    (0..n.div_ceil(batch))
        .map(|b| {
            let parts: Vec<_> = (0..batch)
                .map(|i| feats[(b * batch + i) % n].clone())
                .collect();
            Ok(Tensor::cat_batch(&parts)?)
        })
        .collect()
}

/// Loss of `p` on one batch, plus gradients for `(mu, sigma)` when asked.
fn step_loss(
    x: &Tensor<f32>,
    p: &StyleParams,
    f_t: &Tensor<f32>,
    proj: &Tensor<f32>,
    grads: bool,
) -> Result<(f32, Option<(Vec<f32>, Vec<f32>)>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let c = p.channels();
    let mk = |g: &mut Graph<f32>, v: &[f32]| {
        let t = Tensor::new(&[c], v.to_vec())?;
        Ok::<_, TensorError>(if grads { g.leaf(t) } else { g.constant(t) })
    };
    let mu = mk(&mut g, &p.mu)?;
    let sigma = mk(&mut g, &p.sigma)?;
    let (tv, pv) = (g.constant(f_t.clone()), g.constant(proj.clone()));
    let norm = g.normalize_channels(xv)?;
    let styled = g.apply_style(norm, mu, sigma)?;
    let loss = loss_tc(&mut g, styled, tv, pv)?;
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, None));
    }
    let gr = g.backward(loss)?;
    Ok((
        value,
        Some((gr.get(mu).into_data(), gr.get(sigma).into_data())),
    ))
}

/// Learns one [`StyleParams`] for the text feature `f_t` from a stream of
/// source feature maps `[n, C, H, W]`. Starts at `(0, 1)`, runs `cfg.steps`
/// SGD steps over batches of `cfg.batch` consecutive maps (cycling through the
/// stream) and clamps every scale at [`SIGMA_MIN`] after each update.
pub fn train_style_params(
    f_t: &Embedding,
    provenance: impl Into<String>,
    source_feats: &[Tensor<f32>],
    proj: &Projection,
    cfg: &StyleTrainConfig,
) -> Result<StyleTrainOutcome> {
    if source_feats.is_empty() {
        return Err(Error::config(
            "style training needs at least one source feature map",
        ));
    }
    if cfg.batch == 0 {
        return Err(Error::config("style batch must be positive"));
    }
    let c = source_feats[0].dims4()?[1];
    if proj.channels() != c || proj.dim() != f_t.dim() {
        return Err(TensorError::Dimension(format!(
            "projection {:?} does not map {c} channels to {} dimensions",
            proj.matrix.shape(),
            f_t.dim()
        ))
        .into());
    }
    let batches = batches(source_feats, cfg.batch)?;
    let target = Tensor::new(&[f_t.dim()], f_t.0.clone())?;
    let mut p = StyleParams::identity(c, provenance);
    let (mut v_mu, mut v_sigma) = (vec![0.0f32; c], vec![0.0f32; c]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x = &batches[step % batches.len()];
        let (loss, grads) = step_loss(x, &p, &target, &proj.matrix, true)?;
        let (g_mu, g_sigma) = grads.expect("gradients requested");
        losses.push(loss);
        sgd_step(&mut p.mu, &g_mu, &mut v_mu, &cfg.optim)?;
        sgd_step(&mut p.sigma, &g_sigma, &mut v_sigma, &cfg.optim)?;
        p.clamp();
    }
    let mut total = 0.0f64;
    for x in &batches {
        total += step_loss(x, &p, &target, &proj.matrix, false)?.0 as f64;
    }
    Ok(StyleTrainOutcome {
        params: p,
        losses,
        final_loss: (total / batches.len() as f64) as f32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_columns() {
        let p = Projection::random_orthonormal(12, 5, &mut rng::from_seed(1)).unwrap();
        let m = p.matrix.data();
        for a in 0..5 {
            for b in 0..5 {
                let dot: f32 = (0..12).map(|r| m[r * 5 + a] * m[r * 5 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5);
            }
        }
        assert!(Projection::random_orthonormal(3, 5, &mut rng::from_seed(1)).is_err());
    }

    #[test]
    fn bank_rejects_mixed_channels_and_empty_sampling() {
        let mut bank = StyleBank::new();
        assert!(matches!(bank.sample(0), Err(Error::State(_))));
        bank.push(StyleParams::identity(4, "a")).unwrap();
        assert!(bank.push(StyleParams::identity(3, "b")).is_err());
        assert_eq!(bank.sample(7).unwrap().provenance, "a");
    }

    #[test]
    fn params_reject_bad_scales() {
        assert!(StyleParams::new(vec![0.0], vec![0.0], "x").is_err());
        assert!(StyleParams::new(vec![0.0, 1.0], vec![1.0], "x").is_err());
        assert!(StyleParams::new(vec![0.0], vec![2.0], "x").is_ok());
    }

    #[test]
    fn zero_steps_return_identity() {
        let x = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f32);
        let f = Embedding(vec![1.0, 0.0, 0.0]);
        let cfg = StyleTrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = train_style_params(&f, "x", &[x], &Projection::identity(3), &cfg).unwrap();
        assert_eq!(out.params, StyleParams::identity(3, "x"));
        assert!(out.losses.is_empty());
    }

    #[test]
    fn empty_stream_is_a_config_error() {
        let f = Embedding(vec![1.0, 0.0]);
        let r = train_style_params(&f, "x", &[], &Projection::identity(2), &Default::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
