use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{format_err, Result};
use crate::transformer::UNK;

/// Reserved symbols at ids 0..=3: pad, bos, eos, unk.
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Word,
    Char,
}

impl TokenMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            other => Err(format_err("token mode", other)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenMode::Word => "word",
            TokenMode::Char => "char",
        }
    }
}

/// Source-side token that conditions a shared model on `task`.
pub fn task_token(task: &str) -> String {
    format!("<2{task}>")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    mode: TokenMode,
}

fn units(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Word => text.split_whitespace().map(str::to_string).collect(),
        TokenMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

/// Frequency-ranked vocabulary over `texts`. Ties break lexicographically;
/// `specials` (e.g. task tokens) follow the reserved ids; `max_size` caps the
/// total including reserved and special entries.
pub fn build_vocab<'a, I>(texts: I, mode: TokenMode, max_size: usize, specials: &[String]) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for u in units(t, mode) {
            *counts.entry(u).or_default() += 1;
        }
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    for s in specials {
        if !tokens.contains(s) {
            tokens.push(s.clone());
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(k, _)| !tokens.contains(k))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = max_size.saturating_sub(tokens.len());
    tokens.extend(ranked.into_iter().take(room).map(|(k, _)| k));
    Vocab::from_tokens(tokens, mode)
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>, mode: TokenMode) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word-level lookup with per-character fallback for unknown words.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for u in units(text, self.mode) {
            match self.id(&u) {
                Some(i) => out.push(i),
                None => out.extend(
                    u.chars()
                        .map(|c| self.id(&c.to_string()).unwrap_or(UNK)),
                ),
            }
        }
        out
    }

    /// Space-joined tokens, skipping pad/bos/eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        let sep = match self.mode {
            TokenMode::Word => " ",
            TokenMode::Char => "",
        };
        ids.iter()
            .filter(|&&i| i > 2)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(sep)
    }

    /// One token per line, preceded by a `mode=` line.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = format!("mode={}\n", self.mode.as_str());
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| format_err("vocab", e.to_string()))?;
        let mut lines = text.lines();
        let mode = lines
            .next()
            .and_then(|l| l.strip_prefix("mode="))
            .ok_or_else(|| format_err("vocab", "missing mode line"))?;
        let mode = TokenMode::parse(mode)?;
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(format_err("vocab", "reserved tokens missing"));
        }
        Ok(Vocab::from_tokens(tokens, mode))
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_by_frequency_then_lexicographic() {
        let v = build_vocab(["b a c", "a b", "d a"], TokenMode::Word, 100, &[]);
        assert_eq!(&v.tokens()[4..], &["a", "b", "c", "d"]);
        let capped = build_vocab(["b a c", "a b", "d a"], TokenMode::Word, 6, &[]);
        assert_eq!(capped.len(), 6);
    }

    #[test]
    fn specials_follow_reserved() {
        let v = build_vocab(["x y"], TokenMode::Word, 100, &[task_token("fr")]);
        assert_eq!(v.id("<2fr>"), Some(4));
        assert_eq!(v.id("<pad>"), Some(0));
    }

    #[test]
    fn char_fallback_and_unk() {
        let v = build_vocab(["ab a b"], TokenMode::Word, 100, &[]);
        // "ba" is unknown as a word but both characters exist
        let ids = v.encode("ab ba z");
        assert_eq!(ids, vec![v.id("ab").unwrap(), v.id("b").unwrap(), v.id("a").unwrap(), UNK]);
        assert_eq!(v.decode(&ids), "ab b a <unk>");
    }

    #[test]
    fn char_mode() {
        let v = build_vocab(["abba"], TokenMode::Char, 100, &[]);
        assert_eq!(&v.tokens()[4..], &["a", "b"]);
        assert_eq!(v.decode(&v.encode("ab")), "ab");
    }

    #[test]
    fn serialization_is_stable() {
        let a = build_vocab(["q w e r", "w e"], TokenMode::Word, 100, &[]);
        let b = build_vocab(["q w e r", "w e"], TokenMode::Word, 100, &[]);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(Vocab::from_bytes(&a.to_bytes()).unwrap(), a);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}
