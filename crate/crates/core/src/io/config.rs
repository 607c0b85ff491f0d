//! `key = value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment; blank lines are
//! ignored. Unknown keys, malformed lines and values of the wrong type are
//! rejected with their line number. A repeated key keeps its last value and
//! logs a warning. Absent keys take the defaults below.
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 0 |
//! | `prompt.vocab_file` | shipped vocabulary |
//! | `prompt.encoder` | `fake` (or `file`) |
//! | `prompt.embeddings` | none; required for `file` |
//! | `prompt.dim` | `model.width` (fake encoder dimension) |
//! | `prompt.encoder_seed` | 0 |
//! | `prompt.level` | 3 |
//! | `prompt.source_words` | `sunny, day, realistic` |
//! | `style.bank_size` | 8 |
//! | `style.steps` | 300 |
//! | `style.lr`, `style.momentum`, `style.weight_decay` | 1.0, 0.9, 0.0005 |
//! | `style.batch` | 2 |
//! | `disentangle.tau` | 1.0 |
//! | `disentangle.loss_weights` | `1.0, 1.0, 1.0` (style split, source text, prototype) |
//! | `disentangle.init_noise_std` | 0.01 |
//! | `proto.k` | the class count |
//! | `proto.center_init_std` | 0.1 |
//! | `model.width` | 16 (layer-1 and style channels) |
//! | `model.deep_width` | 32 (layer-4 channels) |
//! | `data.classes` | 4 |
//! | `data.image_size` | 32 |
//! | `data.train_samples` | 256 |
//! | `data.eval_samples` | 200 |
//! | `train.variant` | `full` |
//! | `train.epochs` | 2 |
//! | `train.batch` | 2 |
//! | `train.lr`, `train.momentum`, `train.weight_decay` | 0.01, 0.9, 0.0005 |
//! | `train.freeze_early` | true (layers 1–3 keep their initial weights) |
//! | `train.style_prob` | 0.5 |
//! | `expert.one_step`, `expert.cgse`, `expert.sdm`, `expert.cpcm` | false |
//! | `ablation.seeds` | `0, 1, 2, 3, 4` |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::SgdConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    Fake,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub vocab_file: Option<PathBuf>,
    pub encoder: EncoderKind,
    pub embeddings: Option<PathBuf>,
    /// Fake encoder dimension; `None` matches `model.width`.
    pub dim: Option<usize>,
    pub encoder_seed: u64,
    pub level: u8,
    pub source_words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleConfig {
    pub bank_size: usize,
    pub steps: usize,
    pub optim: SgdConfig,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangleConfig {
    pub tau: f64,
    /// Weights of the split, source-text and prototype consistency losses.
    pub loss_weights: [f64; 3],
    pub init_noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoConfig {
    /// `None` means one prototype per class.
    pub k: Option<usize>,
    pub center_init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub deep_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
}

/// Which pipeline components are active during transfer training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flags {
    /// Style bank trained on the single-call sentence encoding.
    pub one_step: bool,
    /// Style bank trained on the accumulated chain encoding.
    pub cgse: bool,
    /// Style/content split with its consistency losses.
    pub sdm: bool,
    /// Prototype enhancement with its consistency loss.
    pub cpcm: bool,
}

impl Flags {
    pub fn uses_bank(&self) -> bool {
        self.one_step || self.cgse
    }

    pub fn is_baseline(&self) -> bool {
        *self == Flags::default()
    }
}

/// The five ablation rows, plus free-form flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    OneStep,
    Cgse,
    CgseSdm,
    Full,
    Expert(Flags),
}

impl Variant {
    pub const ROWS: [Variant; 5] = [
        Variant::Baseline,
        Variant::OneStep,
        Variant::Cgse,
        Variant::CgseSdm,
        Variant::Full,
    ];

    pub fn flags(self) -> Flags {
        let f = |one_step, cgse, sdm, cpcm| Flags {
            one_step,
            cgse,
            sdm,
            cpcm,
        };
        match self {
            Variant::Baseline => f(false, false, false, false),
            Variant::OneStep => f(true, false, false, false),
            Variant::Cgse => f(false, true, false, false),
            Variant::CgseSdm => f(false, true, true, false),
            Variant::Full => f(false, true, true, true),
            Variant::Expert(flags) => flags,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::OneStep => "one_step",
            Variant::Cgse => "cgse",
            Variant::CgseSdm => "cgse_sdm",
            Variant::Full => "full",
            Variant::Expert(_) => "expert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch: usize,
    pub optim: SgdConfig,
    pub freeze_early: bool,
    /// Probability that a batch goes through the sampled style rather than
    /// its own statistics.
    pub style_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub prompt: PromptConfig,
    pub style: StyleConfig,
    pub disentangle: DisentangleConfig,
    pub proto: ProtoConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt: PromptConfig {
                vocab_file: None,
                encoder: EncoderKind::Fake,
                embeddings: None,
                dim: None,
                encoder_seed: 0,
                level: 3,
                source_words: vec!["sunny".into(), "day".into(), "realistic".into()],
            },
            style: StyleConfig {
                bank_size: 8,
                steps: 300,
                optim: SgdConfig::default(),
                batch: 2,
            },
            disentangle: DisentangleConfig {
                tau: 1.0,
                loss_weights: [1.0; 3],
                init_noise_std: 0.01,
            },
            proto: ProtoConfig {
                k: None,
                center_init_std: 0.1,
            },
            model: ModelConfig {
                width: 16,
                deep_width: 32,
            },
            data: DataConfig {
                classes: 4,
                image_size: 32,
                train_samples: 256,
                eval_samples: 200,
            },
            train: TrainConfig {
                variant: Variant::Full,
                epochs: 2,
                batch: 2,
                optim: SgdConfig {
                    lr: 0.01,
                    momentum: 0.9,
                    weight_decay: 0.0005,
                },
                freeze_early: true,
                style_prob: 0.5,
            },
            ablation: AblationConfig {
                seeds: (0..5).collect(),
            },
        }
    }
}

impl RunConfig {
    pub fn proto_k(&self) -> usize {
        self.proto.k.unwrap_or(self.data.classes)
    }

    pub fn fake_dim(&self) -> usize {
        self.prompt.dim.unwrap_or(self.model.width)
    }

    pub fn flags(&self) -> Flags {
        self.train.variant.flags()
    }

    /// Cross-field checks that do not belong to any single key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("style.batch", self.style.batch),
            ("model.width", self.model.width),
            ("model.deep_width", self.model.deep_width),
            ("data.image_size", self.data.image_size),
            ("data.train_samples", self.data.train_samples),
            ("data.eval_samples", self.data.eval_samples),
            ("train.batch", self.train.batch),
            ("prompt.dim", self.fake_dim()),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{k} must be positive")));
            }
        }
        if self.data.classes < 2 {
            return Err(Error::config("data.classes must be at least 2"));
        }
        if self.proto_k() < 2 {
            return Err(Error::config("proto.k must be at least 2"));
        }
        if !self.data.image_size.is_multiple_of(8) {
            return Err(Error::config("data.image_size must be a multiple of 8"));
        }
        if !(self.disentangle.tau > 0.0) {
            return Err(Error::config("disentangle.tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train.style_prob) {
            return Err(Error::config("train.style_prob must lie in [0, 1]"));
        }
        let f = self.flags();
        if f.one_step && f.cgse {
            return Err(Error::config(
                "one_step and cgse are alternative style sources",
            ));
        }
        if self.prompt.encoder == EncoderKind::File && self.prompt.embeddings.is_none() {
            return Err(Error::config(
                "prompt.encoder = file needs prompt.embeddings",
            ));
        }
        if self.prompt.encoder == EncoderKind::Fake && self.fake_dim() < self.model.width {
            return Err(Error::config("prompt.dim must be at least model.width"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds is empty"));
        }
        Ok(())
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str, line: usize, kind: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("line {line}: {key} expects {kind}, got {v:?}")))
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "line {line}: {key} expects true or false, got {v:?}"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str, line: usize, kind: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| parse_num(key, s.trim(), line, kind))
        .collect()
}

fn expert<'a>(cfg: &'a mut RunConfig, key: &str, line: usize) -> Result<&'a mut Flags> {
    match &mut cfg.train.variant {
        Variant::Expert(f) => Ok(f),
        _ => Err(Error::config(format!(
            "line {line}: {key} needs train.variant = expert earlier in the file"
        ))),
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str, line: usize, base: &Path) -> Result<()> {
        let float = |v: &str| parse_num::<f64>(key, v, line, "a number");
        let uint = |v: &str| parse_num::<usize>(key, v, line, "a non-negative integer");
        let path = |v: &str| {
            let p = PathBuf::from(unquote(v));
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        match key {
            "seed" => self.seed = parse_num(key, v, line, "an unsigned integer")?,
            "prompt.vocab_file" => self.prompt.vocab_file = Some(path(v)),
            "prompt.encoder" => {
                self.prompt.encoder = match unquote(v) {
                    "fake" => EncoderKind::Fake,
                    "file" => EncoderKind::File,
                    _ => {
                        return Err(Error::config(format!(
                            "line {line}: {key} expects fake or file, got {v:?}"
                        )))
                    }
                }
            }
            "prompt.embeddings" => self.prompt.embeddings = Some(path(v)),
            "prompt.dim" => self.prompt.dim = Some(uint(v)?),
            "prompt.encoder_seed" => {
                self.prompt.encoder_seed = parse_num(key, v, line, "an unsigned integer")?
            }
            "prompt.level" => {
                let l: u8 = parse_num(key, v, line, "1, 2 or 3")?;
                if !(1..=3).contains(&l) {
                    return Err(Error::config(format!(
                        "line {line}: {key} expects 1, 2 or 3, got {l}"
                    )));
                }
                self.prompt.level = l;
            }
            "prompt.source_words" => {
                self.prompt.source_words = unquote(v)
                    .split(',')
                    .map(|w| w.trim().to_string())
                    .collect();
                if self.prompt.source_words.iter().any(|w| w.is_empty()) {
                    return Err(Error::config(format!(
                        "line {line}: {key} has an empty word"
                    )));
                }
            }
            "style.bank_size" => self.style.bank_size = uint(v)?,
            "style.steps" => self.style.steps = uint(v)?,
            "style.lr" => self.style.optim.lr = float(v)?,
            "style.momentum" => self.style.optim.momentum = float(v)?,
            "style.weight_decay" => self.style.optim.weight_decay = float(v)?,
            "style.batch" => self.style.batch = uint(v)?,
            "disentangle.tau" => self.disentangle.tau = float(v)?,
            "disentangle.loss_weights" => {
                let w: Vec<f64> = parse_list(key, v, line, "three comma-separated numbers")?;
                self.disentangle.loss_weights = w.try_into().map_err(|_| {
                    Error::config(format!(
                        "line {line}: {key} expects three comma-separated numbers"
                    ))
                })?;
            }
            "disentangle.init_noise_std" => self.disentangle.init_noise_std = float(v)?,
            "proto.k" => self.proto.k = Some(uint(v)?),
            "proto.center_init_std" => self.proto.center_init_std = float(v)?,
            "model.width" => self.model.width = uint(v)?,
            "model.deep_width" => self.model.deep_width = uint(v)?,
            "data.classes" => self.data.classes = uint(v)?,
            "data.image_size" => self.data.image_size = uint(v)?,
            "data.train_samples" => self.data.train_samples = uint(v)?,
            "data.eval_samples" => self.data.eval_samples = uint(v)?,
            "train.variant" => {
                let name = unquote(v);
                self.train.variant = match name {
                    "expert" => Variant::Expert(Flags::default()),
                    _ => *Variant::ROWS.iter().find(|r| r.name() == name).ok_or_else(|| {
                        Error::config(format!(
                            "line {line}: {key} expects baseline, one_step, cgse, cgse_sdm, full or expert, got {v:?}"
                        ))
                    })?,
                };
            }
            "train.epochs" => self.train.epochs = uint(v)?,
            "train.batch" => self.train.batch = uint(v)?,
            "train.lr" => self.train.optim.lr = float(v)?,
            "train.momentum" => self.train.optim.momentum = float(v)?,
            "train.weight_decay" => self.train.optim.weight_decay = float(v)?,
            "train.freeze_early" => self.train.freeze_early = parse_bool(key, v, line)?,
            "train.style_prob" => self.train.style_prob = float(v)?,
            "expert.one_step" => expert(self, key, line)?.one_step = parse_bool(key, v, line)?,
            "expert.cgse" => expert(self, key, line)?.cgse = parse_bool(key, v, line)?,
            "expert.sdm" => expert(self, key, line)?.sdm = parse_bool(key, v, line)?,
            "expert.cpcm" => expert(self, key, line)?.cpcm = parse_bool(key, v, line)?,
            "ablation.seeds" => {
                self.ablation.seeds = parse_list(key, v, line, "comma-separated integers")?
            }
            _ => return Err(Error::config(format!("line {line}: unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Parses configuration text. Relative paths resolve against `base`.
pub fn parse_config_in(text: &str, base: &Path) -> Result<RunConfig> {
    let mut entries: BTreeMap<String, usize> = BTreeMap::new();
    let mut assignments = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "line {line}: expected `key = value`, got {content:?}"
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::config(format!("line {line}: malformed key {key:?}")));
        }
        if let Some(prev) = entries.insert(key.to_string(), line) {
            log::warn!("config key {key} on line {line} overrides line {prev}");
        }
        assignments.push((key, value, line));
    }
    let mut cfg = RunConfig::default();
    for (key, value, line) in assignments {
        cfg.set(key, value, line, base)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses configuration text with paths relative to the working directory.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    parse_config_in(text, Path::new("."))
}

/// Reads and parses a configuration file; relative paths inside it resolve
/// against the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_in(&text, base)
}
