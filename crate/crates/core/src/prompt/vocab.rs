use std::collections::HashSet;

use crate::{Error, Result};

/// Vocabulary names in the order their words are drawn.
pub const VOCABULARY_NAMES: [&str; 5] = ["weather", "time", "style", "action", "detail"];

const DEFAULT_FILE: &str = include_str!("../../data/vocab.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub name: String,
    pub words: Vec<String>,
}

impl Vocabulary {
    pub fn new(name: impl Into<String>, words: Vec<String>) -> Result<Self> {
        let name = name.into();
        if words.is_empty() {
            return Err(Error::config(format!("vocabulary [{name}] is empty")));
        }
        let mut seen = HashSet::new();
        for w in &words {
            if w.trim().is_empty() {
                return Err(Error::config(format!(
                    "vocabulary [{name}] contains a blank word"
                )));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::config(format!("vocabulary [{name}] repeats {w:?}")));
            }
        }
        Ok(Self { name, words })
    }
}

/// The five vocabularies: weather, time, style, action and detail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabularySet {
    vocabs: Vec<Vocabulary>,
}

impl VocabularySet {
    /// Accepts exactly the five named vocabularies, in any order.
    pub fn new(mut vocabs: Vec<Vocabulary>) -> Result<Self> {
        if vocabs.len() != VOCABULARY_NAMES.len() {
            return Err(Error::config(format!(
                "expected {} vocabularies ({}), got {}",
                VOCABULARY_NAMES.len(),
                VOCABULARY_NAMES.join(", "),
                vocabs.len()
            )));
        }
        let mut ordered = Vec::with_capacity(VOCABULARY_NAMES.len());
        for name in VOCABULARY_NAMES {
            let i = vocabs
                .iter()
                .position(|v| v.name == name)
                .ok_or_else(|| Error::config(format!("missing vocabulary [{name}]")))?;
            ordered.push(vocabs.swap_remove(i));
        }
        Ok(Self { vocabs: ordered })
    }

    pub fn as_slice(&self) -> &[Vocabulary] {
        &self.vocabs
    }

    pub fn get(&self, name: &str) -> Option<&Vocabulary> {
        self.vocabs.iter().find(|v| v.name == name)
    }
}

/// Phrase and sentence templates. Placeholders are the vocabulary names in
/// braces plus `{detail2}` (a second detail word) and, in sentences, `{phrase}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub phrase: Vec<String>,
    pub sentence: Vec<String>,
}

const PLACEHOLDERS: [&str; 7] = [
    "weather", "time", "style", "action", "detail", "detail2", "phrase",
];

fn check_template(t: &str, allow_phrase: bool) -> Result<()> {
    let mut rest = t;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::config(format!("unclosed placeholder in template {t:?}")))?;
        let key = &rest[open + 1..open + close];
        if !PLACEHOLDERS.contains(&key) || (key == "phrase" && !allow_phrase) {
            return Err(Error::config(format!(
                "unknown placeholder {{{key}}} in template {t:?}"
            )));
        }
        rest = &rest[open + close + 1..];
    }
    Ok(())
}

impl PromptTemplates {
    pub fn new(phrase: Vec<String>, sentence: Vec<String>) -> Result<Self> {
        if phrase.is_empty() || sentence.is_empty() {
            return Err(Error::config(
                "need at least one [phrase] and one [sentence] template",
            ));
        }
        for t in &phrase {
            check_template(t, false)?;
        }
        for t in &sentence {
            check_template(t, true)?;
        }
        Ok(Self { phrase, sentence })
    }
}

/// Parses a sectioned vocabulary/template file.
pub fn parse_vocab_file(text: &str) -> Result<(VocabularySet, PromptTemplates)> {
    let mut sections: Vec<(String, Vec<String>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if sections.iter().any(|(n, _)| n == name) {
                return Err(Error::config(format!(
                    "line {}: section [{name}] repeated",
                    lineno + 1
                )));
            }
            sections.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        match sections.last_mut() {
            Some((_, entries)) => entries.push(line.to_string()),
            None => {
                return Err(Error::config(format!(
                    "line {}: entry {line:?} before any section header",
                    lineno + 1
                )))
            }
        }
    }
    let mut vocabs = Vec::new();
    let (mut phrase, mut sentence) = (Vec::new(), Vec::new());
    for (name, entries) in sections {
        match name.as_str() {
            "phrase" => phrase = entries,
            "sentence" => sentence = entries,
            n if VOCABULARY_NAMES.contains(&n) => vocabs.push(Vocabulary::new(name, entries)?),
            other => return Err(Error::config(format!("unknown section [{other}]"))),
        }
    }
    Ok((
        VocabularySet::new(vocabs)?,
        PromptTemplates::new(phrase, sentence)?,
    ))
}

/// The vocabularies and templates shipped with the crate.
pub fn default_vocab() -> (VocabularySet, PromptTemplates) {
    parse_vocab_file(DEFAULT_FILE).expect("shipped vocabulary file is valid")
}

impl VocabularySet {
    pub fn shipped() -> Self {
        default_vocab().0
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, PromptTemplates)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary file {}", path.display()), e))?;
        parse_vocab_file(&text)
    }
}

impl PromptTemplates {
    pub fn shipped() -> Self {
        default_vocab().1
    }
}
