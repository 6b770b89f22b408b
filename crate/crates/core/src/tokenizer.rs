//! Whitespace-word tokenizer with character fallback.
//!
//! The vocabulary is built from training corpora: two specials (`[MASK]`,
//! `[UNK]`), every single character observed, then whole words ranked by
//! frequency until the cap. A word missing from the vocabulary is encoded
//! as its characters, so unseen dialect forms still get (degraded) token
//! coverage instead of a blanket unknown. Each word's first token index is
//! recorded so tag heads can classify exactly one position per word.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// The token list alone determines behavior; the index is derived.
impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

/// One encoded sentence: token ids plus the index of each word's first token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub word_starts: Vec<usize>,
}

impl Tokenizer {
    /// Build from sentences, keeping at most `max_vocab` entries. Characters
    /// always survive the cap; whole words are kept by descending frequency
    /// (ties broken lexicographically) until the budget runs out.
    pub fn build<'a, I>(sentences: I, max_vocab: usize) -> Tokenizer
    where
        I: IntoIterator<Item = &'a Vec<String>>,
    {
        let mut word_counts: HashMap<String, u64> = HashMap::new();
        let mut chars: Vec<char> = Vec::new();
        for sent in sentences {
            for w in sent {
                *word_counts.entry(w.clone()).or_insert(0) += 1;
                for c in w.chars() {
                    if !chars.contains(&c) {
                        chars.push(c);
                    }
                }
            }
        }
        chars.sort_unstable();

        let mut tokens: Vec<String> = vec![MASK_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(chars.iter().map(|c| c.to_string()));

        let mut ranked: Vec<(String, u64)> = word_counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (w, _) in ranked {
            if tokens.len() >= max_vocab {
                break;
            }
            if w.chars().count() > 1 && !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Tokenizer::from_tokens(tokens)
    }

    /// Reconstruct from a saved token list (checkpoint metadata).
    pub fn from_tokens(tokens: Vec<String>) -> Tokenizer {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Tokenizer { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mask_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, words: &[String]) -> Encoded {
        let mut ids = Vec::with_capacity(words.len());
        let mut word_starts = Vec::with_capacity(words.len());
        for w in words {
            word_starts.push(ids.len());
            if let Some(&id) = self.index.get(w) {
                ids.push(id);
            } else {
                for c in w.chars() {
                    ids.push(
                        self.index
                            .get(&c.to_string())
                            .copied()
                            .unwrap_or(self.unk_id()),
                    );
                }
            }
        }
        Encoded { ids, word_starts }
    }
}

/// Rebuild the lookup index after deserialization.
pub fn rehydrate(t: &mut Tokenizer) {
    t.index = t
        .tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| (tok.clone(), i))
        .collect();
}
