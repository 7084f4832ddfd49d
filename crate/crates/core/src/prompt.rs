//! Token prompts: the conditioning signal for the denoisers.
//!
//! A prompt is an ordered list of concept tokens framed by `<bos>`/`<eos>`,
//! each carrying a cross-attention scale in `[-2, 2]`. The unconditional
//! prompt is the single token `<null>`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const NULL: u32 = 2;

pub const MIN_SCALE: f64 = -2.0;
pub const MAX_SCALE: f64 = 2.0;

const RESERVED: [&str; 3] = ["<bos>", "<eos>", "<null>"];

/// Fixed word list. Ids 0..3 are the reserved framing tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(concepts: &[S]) -> Result<Self> {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for c in concepts {
            let c = c.as_ref();
            if c.is_empty() || c.contains(char::is_whitespace) || c.contains(':') {
                return Err(Error::config(format!("invalid vocabulary word `{c}`")));
            }
            if words.iter().any(|w| w == c) {
                return Err(Error::config(format!("duplicate vocabulary word `{c}`")));
            }
            words.push(c.to_string());
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Non-reserved words in id order.
    pub fn concepts(&self) -> impl Iterator<Item = (u32, &str)> {
        self.words
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, w)| (i as u32, w.as_str()))
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.words.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    tokens: Vec<u32>,
    scales: Vec<f64>,
}

impl Prompt {
    pub fn null() -> Self {
        Self {
            tokens: vec![NULL],
            scales: vec![1.0],
        }
    }

    /// Builds `<bos> concepts... <eos>` with unit scales.
    pub fn from_concepts(concepts: &[u32]) -> Self {
        if concepts.is_empty() {
            return Self::null();
        }
        let mut tokens = Vec::with_capacity(concepts.len() + 2);
        tokens.push(BOS);
        tokens.extend_from_slice(concepts);
        tokens.push(EOS);
        let scales = vec![1.0; tokens.len()];
        Self { tokens, scales }
    }

    pub fn new(tokens: Vec<u32>, scales: Vec<f64>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidPrompt("prompt has no tokens".into()));
        }
        if tokens.len() != scales.len() {
            return Err(Error::InvalidPrompt(format!(
                "{} tokens but {} scales",
                tokens.len(),
                scales.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| !vocab.contains(**t)) {
            return Err(Error::InvalidPrompt(format!("token id {t} not in vocabulary")));
        }
        for &s in &scales {
            check_scale(s)?;
        }
        Ok(Self { tokens, scales })
    }

    /// Parses `word[:scale] word[:scale] ...`. Empty text is the null prompt.
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut concepts = Vec::new();
        let mut concept_scales = Vec::new();
        for item in text.split_whitespace() {
            let (word, scale) = match item.split_once(':') {
                Some((w, s)) => {
                    let v: f64 = s.parse().map_err(|_| {
                        Error::InvalidPrompt(format!("bad scale `{s}` for `{w}`"))
                    })?;
                    (w, v)
                }
                None => (item, 1.0),
            };
            check_scale(scale)?;
            if word == RESERVED[NULL as usize] {
                continue;
            }
            let id = vocab
                .id(word)
                .filter(|&id| id > NULL)
                .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
            concepts.push(id);
            concept_scales.push(scale);
        }
        let mut p = Self::from_concepts(&concepts);
        if !concepts.is_empty() {
            p.scales[1..=concepts.len()].copy_from_slice(&concept_scales);
        }
        Ok(p)
    }

    /// Canonical text form; `parse(format(p)) == p`.
    pub fn format(&self, vocab: &Vocabulary) -> String {
        self.concepts()
            .map(|(i, id)| {
                let word = vocab.word(id).unwrap_or("?");
                let s = self.scales[i];
                if s == 1.0 {
                    word.to_string()
                } else {
                    format!("{word}:{s}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.tokens == [NULL]
    }

    /// `(position, token)` of every non-framing token.
    pub fn concepts(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t > NULL)
            .map(|(i, &t)| (i, t))
    }

    pub fn has_negative_scale(&self) -> bool {
        self.scales.iter().any(|&s| s < 0.0)
    }

    pub fn all_unit_scales(&self) -> bool {
        self.scales.iter().all(|&s| s == 1.0)
    }

    /// Same tokens with every scale reset to 1.
    pub fn unscaled(&self) -> Self {
        Self {
            tokens: self.tokens.clone(),
            scales: vec![1.0; self.tokens.len()],
        }
    }

    pub fn with_scale(mut self, position: usize, scale: f64) -> Result<Self> {
        check_scale(scale)?;
        let slot = self
            .scales
            .get_mut(position)
            .ok_or_else(|| Error::InvalidPrompt(format!("no token at position {position}")))?;
        *slot = scale;
        Ok(self)
    }

    /// Sets `scale` on the annotated concept tokens (scale != 1), or on every
    /// concept token when none is annotated.
    pub fn with_target_scale(&self, scale: f64) -> Result<Self> {
        check_scale(scale)?;
        let annotated: Vec<usize> = self
            .concepts()
            .filter(|(i, _)| self.scales[*i] != 1.0)
            .map(|(i, _)| i)
            .collect();
        let targets: Vec<usize> = if annotated.is_empty() {
            self.concepts().map(|(i, _)| i).collect()
        } else {
            annotated
        };
        let mut out = self.clone();
        for i in targets {
            out.scales[i] = scale;
        }
        Ok(out)
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .tokens
            .iter()
            .zip(&self.scales)
            .map(|(t, s)| format!("{t}:{s}"))
            .collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

fn check_scale(s: f64) -> Result<()> {
    if !s.is_finite() || !(MIN_SCALE..=MAX_SCALE).contains(&s) {
        return Err(Error::InvalidPrompt(format!(
            "scale {s} outside [{MIN_SCALE}, {MAX_SCALE}]"
        )));
    }
    Ok(())
}
