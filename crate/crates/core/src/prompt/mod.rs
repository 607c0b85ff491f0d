//! Three-level prompt chains and their accumulated text embeddings.
//!
//! A chain draws one word from each vocabulary (level 1), renders a phrase
//! from those words (level 2) and extends it into a sentence with detail
//! words (level 3). Embeddings accumulate additively:
//!
//! ```text
//! f_t1 = Σ encode(word_i)
//! f_t2 = encode(phrase)   + f_t1
//! f_t3 = encode(sentence) + f_t2
//! ```

mod chain;
mod encoder;
mod vocab;

pub use chain::{compose_level1, sum_encodings, ChainLevel, PromptChain};
pub use encoder::{Embedding, FakeEncoder, FileEncoder, TextEncoder};
pub use vocab::{
    default_vocab, parse_vocab_file, PromptTemplates, Vocabulary, VocabularySet, VOCABULARY_NAMES,
};
