use sha2::{Digest, Sha256};

use crate::disentangle::{self, DisentangledPair, Extractor, ExtractorInit, Fuser, Matcher};
use crate::io::config::{Flags, RunConfig};
use crate::layers::{Conv2d, Linear};
use crate::proto::{self, PrototypeBank};
use crate::style::StyleParams;
use crate::tensor::{Bindings, Graph, ParamStore, Tensor, Var};
use crate::{rng, Result};

/// Architecture hyper-parameters of a [`TinyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArch {
    pub classes: usize,
    pub image_size: usize,
    /// Layer-1 (and style) channels.
    pub width: usize,
    /// Channels of layers 2–4.
    pub deep_width: usize,
    pub flags: Flags,
    pub proto_k: usize,
    pub init_noise_std: f64,
    pub center_init_std: f64,
}

impl ModelArch {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            classes: cfg.data.classes,
            image_size: cfg.data.image_size,
            width: cfg.model.width,
            deep_width: cfg.model.deep_width,
            flags: cfg.flags(),
            proto_k: cfg.proto_k(),
            init_noise_std: cfg.disentangle.init_noise_std,
            center_init_std: cfg.proto.center_init_std,
        }
    }

    /// Spatial size of layer-1 features.
    pub fn f1_size(&self) -> usize {
        self.image_size / 2
    }
}

/// Style and content extractors plus the stream fuser.
#[derive(Debug, Clone)]
pub struct Disentangler {
    pub style: Extractor,
    pub content: Extractor,
    pub fuser: Fuser,
}

/// Small classifier standing in for a detector backbone.
///
/// `layer1` is a stride-2 convolution whose pre-activation output is `F_1`.
/// Layers 2 and 3 are ReLU + stride-2 convolutions, layer 4 a stride-1
/// convolution, and the head a linear classifier on globally pooled features.
///
/// Components enabled by the flags: extractors and fuser (`sdm`), a prototype
/// bank on the content stream and one on layer-4 features plus the matcher for
/// their consistency loss (`cpcm`).
#[derive(Debug, Clone)]
pub struct TinyModel {
    pub arch: ModelArch,
    pub store: ParamStore<f32>,
    pub layer1: Conv2d,
    pub layer2: Conv2d,
    pub layer3: Conv2d,
    pub layer4: Conv2d,
    pub head: Linear,
    pub disentangler: Option<Disentangler>,
    pub content_proto: Option<PrototypeBank>,
    pub deep_proto: Option<PrototypeBank>,
    pub matcher: Option<Matcher>,
}

/// Inputs of the auxiliary losses.
#[derive(Debug, Clone, Copy)]
pub struct AuxInputs {
    /// Source-domain text feature `[D]`.
    pub source_text: Var,
    /// `[D, C]` projection shared with the style engine.
    pub proj: Var,
    pub tau: f64,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub logits: Var,
    pub f1: Var,
    pub loss_d: Option<Var>,
    pub loss_sc: Option<Var>,
    pub loss_gc: Option<Var>,
}

const EARLY: [&str; 3] = ["layer1.", "layer2.", "layer3."];

impl TinyModel {
    /// Every component draws its initial values from its own stream under
    /// `seed`, so the backbone starts identically whatever the flags.
    pub fn new(arch: ModelArch, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let (c1, c) = (arch.width, arch.deep_width);
        let r = |name: &str| rng::derive(seed, &format!("init:{name}"));
        let layer1 = Conv2d::new(&mut store, "layer1", (3, c1, 3), 2, true, &mut r("layer1"));
        let layer2 = Conv2d::new(&mut store, "layer2", (c1, c, 3), 2, true, &mut r("layer2"));
        let layer3 = Conv2d::new(&mut store, "layer3", (c, c, 3), 2, true, &mut r("layer3"));
        let layer4 = Conv2d::new(&mut store, "layer4", (c, c, 3), 1, true, &mut r("layer4"));
        let hw = store.add(
            "head.weight",
            Tensor::randn(&[arch.classes, c], (1.0 / c as f64).sqrt(), &mut r("head")),
        );
        let head = Linear::from_weight(&mut store, "head", hw, true);
        let disentangler = arch.flags.sdm.then(|| {
            let init = ExtractorInit::Identity {
                noise: arch.init_noise_std,
            };
            Disentangler {
                style: Extractor::new(
                    &mut store,
                    "style_extractor",
                    c1,
                    init,
                    &mut r("style_extractor"),
                ),
                content: Extractor::new(
                    &mut store,
                    "content_extractor",
                    c1,
                    init,
                    &mut r("content_extractor"),
                ),
                fuser: Fuser::new(&mut store, "fuser", c1),
            }
        });
        let (mut content_proto, mut deep_proto, mut matcher) = (None, None, None);
        if arch.flags.cpcm {
            let k = arch.proto_k;
            content_proto = Some(PrototypeBank::new(
                &mut store,
                "content_proto",
                k,
                c1,
                arch.center_init_std,
                &mut r("content_proto"),
            )?);
            deep_proto = Some(PrototypeBank::new(
                &mut store,
                "deep_proto",
                k,
                c,
                arch.center_init_std,
                &mut r("deep_proto"),
            )?);
            let s = arch.f1_size();
            matcher = Some(Matcher::random(c, c1, s, s, &mut r("matcher")));
        }
        Ok(Self {
            arch,
            store,
            layer1,
            layer2,
            layer3,
            layer4,
            head,
            disentangler,
            content_proto,
            deep_proto,
            matcher,
        })
    }

    /// Freezes or thaws layers 1–3.
    pub fn set_freeze_early(&mut self, frozen: bool) {
        for p in EARLY {
            self.store.set_frozen_prefix(p, frozen);
        }
    }

    /// SHA-256 over the bits of the layer 1–3 parameters.
    pub fn early_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (_, name, t) in self.store.iter() {
            if EARLY.iter().any(|p| name.starts_with(p)) {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    /// `F_1` for a batch of images, outside of any training graph.
    pub fn layer1_features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(images.clone());
        let f1 = self.layer1.forward(&mut g, &p, x)?;
        Ok(g.value(f1).clone())
    }

    /// Records the forward pass on `g`. `style` re-styles the style stream
    /// (or `F_1` itself without the split); `aux` requests the auxiliary
    /// losses of the enabled components.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        p: &Bindings,
        x: Var,
        style: Option<&StyleParams>,
        aux: Option<&AuxInputs>,
    ) -> Result<ForwardOut> {
        let f1 = self.layer1.forward(g, p, x)?;
        let mut out = ForwardOut {
            logits: f1,
            f1,
            loss_d: None,
            loss_sc: None,
            loss_gc: None,
        };
        let (style_stream, content) = match &self.disentangler {
            Some(d) => {
                let pair = disentangle::split(g, p, f1, &d.style, &d.content)?;
                if let Some(a) = aux {
                    out.loss_d = Some(disentangle::loss_d(g, &pair, a.tau)?);
                    out.loss_sc = Some(disentangle::loss_sc(g, pair.style, a.source_text, a.proj)?);
                }
                let DisentangledPair { style, content, .. } = pair;
                (style, Some(content))
            }
            None => (f1, None),
        };
        let styled = match style {
            Some(s) => {
                let c = s.channels();
                let mu = g.constant(Tensor::new(&[c], s.mu.clone())?);
                let sigma = g.constant(Tensor::new(&[c], s.sigma.clone())?);
                let n = g.normalize_channels(style_stream)?;
                g.apply_style(n, mu, sigma)?
            }
            None => style_stream,
        };
        let merged = match (&self.disentangler, content) {
            (Some(d), Some(c)) => {
                let c = match &self.content_proto {
                    Some(bank) => proto::enhance(g, p, c, bank)?,
                    None => c,
                };
                d.fuser.forward(g, p, styled, c)?
            }
            _ => styled,
        };
        let h = g.relu(merged);
        let h = self.layer2.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.layer3.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.layer4.forward(g, p, h)?;
        let mut top = g.relu(h);
        if let Some(bank) = &self.deep_proto {
            let fp = proto::enhance(g, p, top, bank)?;
            if let (Some(_), Some(m)) = (aux, &self.matcher) {
                // the prototypes supervise the content stream, so they are a
                // fixed target here
                let target = g.value(fp).clone();
                let target = g.constant(target);
                out.loss_gc = Some(disentangle::loss_gc(g, target, content.unwrap_or(f1), m)?);
            }
            top = fp;
        }
        let pooled = g.global_avg_pool(top)?;
        out.logits = self.head.forward(g, p, pooled)?;
        Ok(out)
    }

    /// Predicted class per image, evaluated in chunks of `chunk` images.
    pub fn predict(&self, images: &Tensor<f32>, chunk: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let mut preds = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let x = g.constant(images.slice_batch(start..end)?);
            let out = self.forward(&mut g, &p, x, None, None)?;
            let logits = g.value(out.logits);
            let k = logits.shape()[1];
            for row in logits.data().chunks(k) {
                // first maximum wins ties
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                preds.push(best);
            }
            start = end;
        }
        Ok(preds)
    }
}
