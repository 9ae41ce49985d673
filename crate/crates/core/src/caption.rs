//! Caption side: whitespace vocabulary, fixed-length tokenization with a
//! leading CLS token, and a bidirectional transformer whose CLS output is the
//! caption embedding `CAP(y)`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::config::CaptionConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::EncoderLayer;
use crate::tensor::{Init, ParamId, ParamStore, Real, Tape, Var};

pub const CLS: usize = 0;
pub const PAD: usize = 1;
pub const UNK: usize = 2;
const SPECIALS: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

/// Lowercased words with every non-alphanumeric character removed.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    /// id order, specials first
    tokens: Vec<String>,
    counts: Vec<usize>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// count and then alphabetically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::config("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in normalize_words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_entries(kept))
    }

    fn from_entries(entries: Vec<(String, usize)>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIALS.len()];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, counts, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a normalized word, or `UNK`.
    pub fn id(&self, word: &str) -> usize {
        match self.ids.get(word) {
            Some(&i) if i >= SPECIALS.len() => i,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Corpus tokens (specials excluded) in id order.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    /// One `token<TAB>count` line per corpus token, in id order.
    pub fn to_text(&self) -> String {
        self.corpus_tokens()
            .iter()
            .zip(&self.counts[SPECIALS.len()..])
            .map(|(t, c)| format!("{t}\t{c}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary", format!("line {} has no tab", n + 1)))?;
            let count = count
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {} has a bad count", n + 1)))?;
            entries.push((tok.to_string(), count));
        }
        let vocab = Self::from_entries(entries);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::format("vocabulary", "duplicate token"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&crate::config::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionTokens {
    /// `max_len + 1` ids, `CLS` first
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl CaptionTokens {
    /// Positions that take part in attention.
    pub fn valid_positions(&self) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// `[CLS] w_1 .. w_M [PAD]..`, truncated to `max_len` words.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> CaptionTokens {
    let mut ids = vec![CLS];
    ids.extend(normalize_words(text).iter().take(max_len).map(|w| vocab.id(w)));
    ids.resize(max_len + 1, PAD);
    let mask = ids.iter().map(|&i| i != PAD).collect();
    CaptionTokens { ids, mask }
}

#[derive(Clone, Debug)]
pub struct CaptionEncoder {
    pub config: CaptionConfig,
    pub vocab_size: usize,
    pub token_table: ParamId,
    pub position_table: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl CaptionEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: &CaptionConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        let d = config.dim;
        Ok(Self {
            config: config.clone(),
            vocab_size,
            token_table: store.add("caption.token_embedding", &[vocab_size, d], Init::weights(), rng)?,
            position_table: store.add("caption.position_embedding", &[config.max_len + 1, d], Init::weights(), rng)?,
            layers: (0..config.layers)
                .map(|i| {
                    EncoderLayer::new(
                        store,
                        rng,
                        &format!("caption.layer{i}"),
                        d,
                        config.heads,
                        config.mlp_ratio,
                        config.dropout,
                    )
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Token plus position embeddings for every position, `[M + 1, d]`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<'_, T>, tokens: &CaptionTokens) -> Result<Var> {
        if tokens.ids.len() > self.config.max_len + 1 || tokens.ids.first() != Some(&CLS) {
            return Err(Error::shape(format!(
                "caption of {} ids must start with CLS and hold at most {}",
                tokens.ids.len(),
                self.config.max_len + 1
            )));
        }
        let table = tape.param(self.token_table)?;
        let pos_table = tape.param(self.position_table)?;
        let tok = tape.embedding_lookup(table, &tokens.ids)?;
        let positions: Vec<usize> = (0..tokens.ids.len()).collect();
        let pos = tape.embedding_lookup(pos_table, &positions)?;
        tape.add(tok, pos)
    }

    /// `CAP(y)`: the CLS row after the encoder layers, `[1, d]`. Padding
    /// positions never serve as attention keys.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, tokens: &CaptionTokens) -> Result<Var> {
        let mut x = self.embed(tape, tokens)?;
        let valid = tokens.valid_positions();
        let keys = (valid.len() < tokens.ids.len()).then_some(valid.as_slice());
        for layer in &self.layers {
            x = layer.forward(tape, x, keys)?;
        }
        tape.gather_rows(x, &[0])
    }
}
