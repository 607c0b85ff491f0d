use crate::io::config::{EncoderKind, RunConfig};
use crate::io::EmbeddingFile;
use crate::prompt::{
    sum_encodings, ChainLevel, Embedding, FakeEncoder, FileEncoder, PromptChain, PromptTemplates,
    TextEncoder, VocabularySet,
};
use crate::style::{train_style_params, Projection, StyleBank, StyleTrainConfig};
use crate::tensor::Tensor;
use crate::{rng, Error, Result};

/// Number of source feature maps the style trainer cycles through.
pub const STYLE_SOURCE_MAPS: usize = 16;

/// Encoder, vocabularies, projection and source text feature of one run.
pub struct TextSetup {
    pub encoder: Box<dyn TextEncoder>,
    pub vocab: VocabularySet,
    pub templates: PromptTemplates,
    pub projection: Projection,
    /// Level-1 sum of the source-domain description words.
    pub source_text: Embedding,
}

impl TextSetup {
    /// Builds the text side of a run. The projection is drawn from `seed`
    /// (identity when the encoder dimension equals `model.width`).
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let encoder: Box<dyn TextEncoder> = match cfg.prompt.encoder {
            EncoderKind::Fake => {
                Box::new(FakeEncoder::new(cfg.fake_dim(), cfg.prompt.encoder_seed)?)
            }
            EncoderKind::File => {
                let path = cfg.prompt.embeddings.as_ref().ok_or_else(|| {
                    Error::config("prompt.encoder = file needs prompt.embeddings")
                })?;
                Box::new(FileEncoder::from_file(
                    EmbeddingFile::read(path)?,
                    path.display().to_string(),
                ))
            }
        };
        let (vocab, templates) = match &cfg.prompt.vocab_file {
            Some(p) => VocabularySet::load(p)?,
            None => crate::prompt::default_vocab(),
        };
        let projection = Projection::for_dims(encoder.dim(), cfg.model.width, seed)?;
        let source_text = sum_encodings(&cfg.prompt.source_words, encoder.as_ref())?;
        Ok(Self {
            encoder,
            vocab,
            templates,
            projection,
            source_text,
        })
    }
}

/// Which text feature each bank entry is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleSource {
    /// Accumulated chain feature at the given level.
    Chain(ChainLevel),
    /// The level-3 sentence encoded in a single call.
    OneStep,
}

#[derive(Debug, Clone)]
pub struct Evolution {
    pub bank: StyleBank,
    pub chains: Vec<PromptChain>,
    /// Text feature each entry was trained on.
    pub targets: Vec<Embedding>,
    pub final_losses: Vec<f32>,
    pub loss_histories: Vec<Vec<f32>>,
}

/// Seed of the `i`-th chain drawn by an evolution phase seeded with `seed`.
pub fn chain_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, &format!("chain:{i}"))
}

/// Trains `cfg.style.bank_size` style entries, one per prompt chain, against
/// `source_feats` (layer-1 maps of source images).
pub fn run_style_evolution(
    cfg: &RunConfig,
    text: &TextSetup,
    source: StyleSource,
    source_feats: &[Tensor<f32>],
    seed: u64,
) -> Result<Evolution> {
    if cfg.style.bank_size == 0 {
        return Err(Error::config("style.bank_size must be at least 1"));
    }
    let train_cfg = StyleTrainConfig {
        steps: cfg.style.steps,
        optim: cfg.style.optim,
        batch: cfg.style.batch,
    };
    let level = match source {
        StyleSource::Chain(l) => l,
        StyleSource::OneStep => ChainLevel::Sentence,
    };
    let mut out = Evolution {
        bank: StyleBank::new(),
        chains: Vec::new(),
        targets: Vec::new(),
        final_losses: Vec::new(),
        loss_histories: Vec::new(),
    };
    for i in 0..cfg.style.bank_size {
        let chain_seed = chain_seed(seed, i);
        let enc = text.encoder.as_ref();
        let chain = PromptChain::compose(&text.vocab, &text.templates, enc, chain_seed, level)?;
        let (target, provenance) = match source {
            StyleSource::Chain(l) => (
                chain
                    .feature(l)
                    .cloned()
                    .expect("chain composed to its level"),
                chain.identifier(l),
            ),
            StyleSource::OneStep => (
                chain.one_step_feature(enc)?,
                format!("oneshot:{chain_seed}"),
            ),
        };
        let trained = train_style_params(
            &target,
            provenance,
            source_feats,
            &text.projection,
            &train_cfg,
        )?;
        log::debug!("style entry {i}: final loss {:.4}", trained.final_loss);
        out.bank.push(trained.params)?;
        out.final_losses.push(trained.final_loss);
        out.loss_histories.push(trained.losses);
        out.targets.push(target);
        out.chains.push(chain);
    }
    Ok(out)
}
