use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Embedding, TextEncoder};
use super::vocab::{PromptTemplates, Vocabulary, VocabularySet};
use crate::{rng, Error, Result};

/// How far along the chain the text feature is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChainLevel {
    Words = 1,
    Phrase = 2,
    Sentence = 3,
}

impl ChainLevel {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::Words),
            2 => Ok(Self::Phrase),
            3 => Ok(Self::Sentence),
            _ => Err(Error::config(format!(
                "chain level must be 1, 2 or 3, got {n}"
            ))),
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

/// Sums the encodings of `words` left to right, starting from a zero vector.
pub fn sum_encodings(words: &[String], enc: &dyn TextEncoder) -> Result<Embedding> {
    let mut acc = Embedding::zeros(enc.dim());
    for w in words {
        acc = &acc + &enc.encode(w)?;
    }
    Ok(acc)
}

/// Draws one word per vocabulary and sums their encodings.
pub fn compose_level1(
    vocabs: &[Vocabulary],
    enc: &dyn TextEncoder,
    rng: &mut impl Rng,
) -> Result<(Vec<String>, Embedding)> {
    let mut words = Vec::with_capacity(vocabs.len());
    for v in vocabs {
        if v.words.is_empty() {
            return Err(Error::config(format!("vocabulary [{}] is empty", v.name)));
        }
        words.push(v.words[rng.random_range(0..v.words.len())].clone());
    }
    let f_t1 = sum_encodings(&words, enc)?;
    Ok((words, f_t1))
}

fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// One sampled chain: the drawn words, the rendered phrase and sentence, and
/// the embeddings accumulated so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptChain {
    pub seed: u64,
    /// One word per vocabulary, in vocabulary order.
    pub words: Vec<String>,
    /// Second detail word used by the sentence template.
    pub extra_detail: String,
    pub phrase: String,
    pub sentence: String,
    pub f_t1: Embedding,
    pub f_t2: Option<Embedding>,
    pub f_t3: Option<Embedding>,
}

impl PromptChain {
    /// Level 1: draws the words (and template choices) from `seed` and sets `f_t1`.
    /// The phrase and sentence texts are rendered from these same draws.
    pub fn level1(
        vocab: &VocabularySet,
        templates: &PromptTemplates,
        enc: &dyn TextEncoder,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng::derive(seed, "prompt-chain");
        let (words, f_t1) = compose_level1(vocab.as_slice(), enc, &mut rng)?;
        let detail = &vocab.as_slice()[4].words;
        let first = detail.iter().position(|w| *w == words[4]).unwrap_or(0);
        let extra_detail = if detail.len() > 1 {
            let j = rng.random_range(0..detail.len() - 1);
            detail[if j >= first { j + 1 } else { j }].clone()
        } else {
            detail[0].clone()
        };
        let pt = &templates.phrase[rng.random_range(0..templates.phrase.len())];
        let st = &templates.sentence[rng.random_range(0..templates.sentence.len())];
        let mut slots: Vec<(&str, &str)> = vocab
            .as_slice()
            .iter()
            .zip(&words)
            .map(|(v, w)| (v.name.as_str(), w.as_str()))
            .collect();
        slots.push(("detail2", extra_detail.as_str()));
        let phrase = render(pt, &slots);
        slots.push(("phrase", phrase.as_str()));
        let sentence = render(st, &slots);
        Ok(Self {
            seed,
            words,
            extra_detail,
            phrase,
            sentence,
            f_t1,
            f_t2: None,
            f_t3: None,
        })
    }

    /// Level 2: `f_t2 = encode(phrase) + f_t1`.
    pub fn compose_level2(&mut self, enc: &dyn TextEncoder) -> Result<&Embedding> {
        let e = enc.encode(&self.phrase)?;
        Ok(self.f_t2.insert(&e + &self.f_t1))
    }

    /// Level 3: `f_t3 = encode(sentence) + f_t2`.
    pub fn compose_level3(&mut self, enc: &dyn TextEncoder) -> Result<&Embedding> {
        let e = enc.encode(&self.sentence)?;
        let f_t2 = self
            .f_t2
            .as_ref()
            .ok_or_else(|| Error::state("level 3 composed before level 2"))?;
        let f_t3 = &e + f_t2;
        Ok(self.f_t3.insert(f_t3))
    }

    /// Samples a chain and composes it up to `level`.
    pub fn compose(
        vocab: &VocabularySet,
        templates: &PromptTemplates,
        enc: &dyn TextEncoder,
        seed: u64,
        level: ChainLevel,
    ) -> Result<Self> {
        let mut chain = Self::level1(vocab, templates, enc, seed)?;
        if level >= ChainLevel::Phrase {
            chain.compose_level2(enc)?;
        }
        if level >= ChainLevel::Sentence {
            chain.compose_level3(enc)?;
        }
        Ok(chain)
    }

    /// Accumulated text feature at `level`, if composed that far.
    pub fn feature(&self, level: ChainLevel) -> Option<&Embedding> {
        match level {
            ChainLevel::Words => Some(&self.f_t1),
            ChainLevel::Phrase => self.f_t2.as_ref(),
            ChainLevel::Sentence => self.f_t3.as_ref(),
        }
    }

    /// The single-prompt alternative: the full sentence encoded in one call,
    /// with no accumulation.
    pub fn one_step_feature(&self, enc: &dyn TextEncoder) -> Result<Embedding> {
        enc.encode(&self.sentence)
    }

    /// Short label used as style provenance.
    pub fn identifier(&self, level: ChainLevel) -> String {
        format!("chain:{}:L{}", self.seed, level.number())
    }

    /// Every string the chain encodes: words, phrase and sentence.
    pub fn texts(&self) -> Vec<String> {
        let mut t = self.words.clone();
        t.push(self.phrase.clone());
        t.push(self.sentence.clone());
        t
    }
}
