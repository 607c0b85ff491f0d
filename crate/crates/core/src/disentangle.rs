//! Style/content disentanglement of first-layer features.
//!
//! Two extractors split `F_1` into a style stream `F_s` and a content stream
//! `F_c`. Three losses supervise the split:
//!
//! - [`loss_d`]: a two-way softmax over `sim(F_1, F_s)` and `sim(F_1, F_c)`
//!   that favours the style stream,
//! - [`loss_sc`]: style features against the source-domain text feature,
//! - [`loss_gc`]: prototype-enhanced deep features, brought to `F_c`'s shape
//!   by a [`Matcher`], against the content stream.
//!
//! After re-styling, the streams are merged by a [`Fuser`].

use rand::Rng;

use crate::layers::Conv2d;
use crate::tensor::{Bindings, Graph, ParamStore, Real, Tensor, TensorError, Var};

/// How an [`Extractor`] starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtractorInit {
    /// Computes the identity, plus Gaussian weight noise of the given deviation.
    Identity { noise: f64 },
    /// All weights and biases zero.
    Zero,
    /// He-normal weights.
    Random,
}

/// Two 3×3 convolutions `C → 2C → C` with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Extractor {
    /// Identity initialisation uses `relu(x) - relu(-x) = x`: the first layer's
    /// centre tap is `[I; -I]` and the second's is `[I, -I]`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        init: ExtractorInit,
        rng: &mut impl Rng,
    ) -> Self {
        let (w1, w2) = match init {
            ExtractorInit::Random => {
                let s1 = (2.0 / (c * 9) as f64).sqrt();
                let s2 = (2.0 / (2 * c * 9) as f64).sqrt();
                (
                    Tensor::randn(&[2 * c, c, 3, 3], s1, rng),
                    Tensor::randn(&[c, 2 * c, 3, 3], s2, rng),
                )
            }
            ExtractorInit::Zero => (
                Tensor::zeros(&[2 * c, c, 3, 3]),
                Tensor::zeros(&[c, 2 * c, 3, 3]),
            ),
            ExtractorInit::Identity { noise } => {
                let mut w1 = Tensor::<T>::randn(&[2 * c, c, 3, 3], noise, rng);
                let mut w2 = Tensor::<T>::randn(&[c, 2 * c, 3, 3], noise, rng);
                for i in 0..c {
                    // centre tap of a 3×3 kernel is element 4
                    w1.data_mut()[(i * c + i) * 9 + 4] += T::one();
                    w1.data_mut()[((c + i) * c + i) * 9 + 4] -= T::one();
                    w2.data_mut()[(i * 2 * c + i) * 9 + 4] += T::one();
                    w2.data_mut()[(i * 2 * c + c + i) * 9 + 4] -= T::one();
                }
                (w1, w2)
            }
        };
        let id1 = store.add(format!("{name}.conv1.weight"), w1);
        let id2 = store.add(format!("{name}.conv2.weight"), w2);
        Self {
            conv1: Conv2d::from_weight(store, &format!("{name}.conv1"), id1, 1, 1, true),
            conv2: Conv2d::from_weight(store, &format!("{name}.conv2"), id2, 1, 1, true),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h);
        self.conv2.forward(g, p, h)
    }
}

/// `F_1` with its style and content streams, all of one shape.
#[derive(Debug, Clone, Copy)]
pub struct DisentangledPair {
    pub source: Var,
    pub style: Var,
    pub content: Var,
}

/// `F_s = E_style(F_1)`, `F_c = E_content(F_1)`.
pub fn split<T: Real>(
    g: &mut Graph<T>,
    p: &Bindings,
    f1: Var,
    e_style: &Extractor,
    e_content: &Extractor,
) -> Result<DisentangledPair, TensorError> {
    let style = e_style.forward(g, p, f1)?;
    let content = e_content.forward(g, p, f1)?;
    Ok(DisentangledPair {
        source: f1,
        style,
        content,
    })
}

/// `-log softmax([sim(F_1,F_s), sim(F_1,F_c)] / tau)[0]`.
pub fn loss_d<T: Real>(
    g: &mut Graph<T>,
    pair: &DisentangledPair,
    tau: f64,
) -> Result<Var, TensorError> {
    if !(tau > 0.0) {
        return Err(TensorError::Contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let s_style = g.channel_cosine(pair.source, pair.style)?;
    let s_content = g.channel_cosine(pair.source, pair.content)?;
    let logits = g.stack_scalars(&[s_style, s_content])?;
    let logits = g.scale(logits, T::of(1.0 / tau));
    g.cross_entropy(logits, &[0])
}

/// Closed form of [`loss_d`] for given similarities: `ln(1 + exp((s_c - s_s) / tau))`.
pub fn loss_d_from_sims(s_style: f64, s_content: f64, tau: f64) -> f64 {
    ((s_content - s_style) / tau).exp().ln_1p()
}

/// `1 - sim(F_s, F_t^s)` with `proj` mapping channels to the text dimension.
pub fn loss_sc<T: Real>(
    g: &mut Graph<T>,
    style: Var,
    f_ts: Var,
    proj: Var,
) -> Result<Var, TensorError> {
    crate::style::loss_tc(g, style, f_ts, proj)
}

/// Brings a deep feature map to the channel count and spatial size of the
/// content stream: adaptive average pooling, then a fixed linear channel map.
#[derive(Debug, Clone, PartialEq)]
pub struct Matcher {
    /// `[C_out, C_in]`.
    pub map: Tensor<f32>,
    pub out_h: usize,
    pub out_w: usize,
}

impl Matcher {
    pub fn random(
        c_in: usize,
        c_out: usize,
        out_h: usize,
        out_w: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            map: Tensor::randn(&[c_out, c_in], (1.0 / c_in as f64).sqrt(), rng),
            out_h,
            out_w,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let pooled = g.adaptive_avg_pool(x, self.out_h, self.out_w)?;
        let m = g.constant(self.map.cast());
        g.project_channels(pooled, m)
    }
}

/// `1 - sim(matcher(F_p), F_c)`.
pub fn loss_gc<T: Real>(
    g: &mut Graph<T>,
    f_p: Var,
    f_c: Var,
    matcher: &Matcher,
) -> Result<Var, TensorError> {
    let m = matcher.apply(g, f_p)?;
    let sim = g.channel_cosine(m, f_c)?;
    Ok(g.affine(sim, -T::one(), T::one()))
}

/// Merges two streams: elementwise sum followed by a 1×1 convolution that
/// starts as the identity.
#[derive(Debug, Clone)]
pub struct Fuser {
    pub conv: Conv2d,
}

impl Fuser {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            Tensor::from_fn(&[c, c, 1, 1], |i| {
                if i / c == i % c {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        );
        Self {
            conv: Conv2d::from_weight(store, name, w, 1, 0, true),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        styled: Var,
        content: Var,
    ) -> Result<Var, TensorError> {
        let sum = g.add(styled, content)?;
        self.conv.forward(g, p, sum)
    }
}
