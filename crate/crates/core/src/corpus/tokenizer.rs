// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer over the closed template vocabulary with a
//! per-character fallback for anything outside it.
//!
//! Email addresses split at `.` and `@`, so an address such as
//! `karen.arnold@enron.com` becomes seven tokens.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use regex::Regex;

use super::templates::*;
use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const UNK: u32 = 1;

const SPECIALS: [&str; 2] = ["<bos>", "<unk>"];

const PRE_TOKEN: &str =
    r"\[mailto:|-----Original|Message-----|\n|[A-Za-z]+:|[A-Za-z]+|[0-9]|[^\sA-Za-z0-9]";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    pre: Regex,
}

impl Tokenizer {
    /// The deterministic vocabulary covering every template, name, and address piece.
    pub fn standard() -> Self {
        let pre = Regex::new(PRE_TOKEN).expect("static regex");
        let mut words = BTreeSet::new();
        let placeholder = Regex::new(r"\{[A-Z]\}|\[NAME\]").expect("static regex");
        for t in PII_TEMPLATES
            .iter()
            .chain(FILLER_TEMPLATES)
            .chain(ADV_TEMPLATES.iter())
        {
            let stripped = placeholder.replace_all(t, " ");
            for m in pre.find_iter(&stripped) {
                words.insert(m.as_str().to_string());
            }
        }
        for name in FIRST_NAMES.iter().chain(LAST_NAMES) {
            words.insert(name.to_string());
            words.insert(name.to_lowercase());
        }
        for w in DOMAINS
            .iter()
            .chain(TLDS)
            .chain(ITEMS)
            .chain(DAYS)
            .chain(TEAMS)
        {
            words.insert(w.to_string());
        }
        for c in ('a'..='z').chain('A'..='Z').chain('0'..='9') {
            words.insert(c.to_string());
        }
        for p in [".", ",", "@", "[", "]", ":", "-", "_", "<", ">", "\n"] {
            words.insert(p.to_string());
        }
        let vocab: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                words
                    .into_iter()
                    .filter(|w| !SPECIALS.contains(&w.as_str())),
            )
            .collect();
        Self::from_vocab(vocab).expect("standard vocabulary is well formed")
    }

    /// Rebuilds a tokenizer from a stored vocabulary.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < 2 || vocab[0] != SPECIALS[0] || vocab[1] != SPECIALS[1] {
            return Err(Error::Parameter(
                "vocabulary must start with <bos>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Parameter(format!(
                    "duplicate vocabulary entry {w:?}"
                )));
            }
        }
        Ok(Self {
            vocab,
            index,
            pre: Regex::new(PRE_TOKEN).expect("static regex"),
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Tokens with the byte range of `text` each one covers.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<(u32, Range<usize>)> {
        let mut out = Vec::new();
        for m in self.pre.find_iter(text) {
            if let Some(id) = self.id(m.as_str()) {
                out.push((id, m.range()));
                continue;
            }
            for (off, ch) in m.as_str().char_indices() {
                let mut buf = [0u8; 4];
                let s = ch.encode_utf8(&mut buf);
                let start = m.start() + off;
                out.push((self.id(s).unwrap_or(UNK), start..start + s.len()));
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text)
            .into_iter()
            .map(|(id, _)| id)
            .collect()
    }

    /// `encode` with a leading `<bos>`.
    pub fn encode_doc(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids
    }

    /// Renders tokens back to text. `.` and `@` attach to both neighbours,
    /// so generated addresses read as contiguous strings.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut glue_next = true;
        for &id in ids {
            if id == BOS {
                continue;
            }
            let tok = self.token(id).unwrap_or("<unk>");
            let glue_left = matches!(tok, "." | "@" | "," | "]" | "\n" | ":");
            if !glue_next && !glue_left {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = matches!(tok, "." | "@" | "[" | "[mailto:" | "\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emails_split_into_pieces() {
        let tok = Tokenizer::standard();
        let ids = tok.encode("karen.arnold@enron.com");
        let pieces: Vec<&str> = ids.iter().map(|&i| tok.token(i).unwrap()).collect();
        assert_eq!(pieces, ["karen", ".", "arnold", "@", "enron", ".", "com"]);
        assert_eq!(tok.decode(&ids), "karen.arnold@enron.com");
    }

    #[test]
    fn prompt_templates_tokenize_without_unknowns() {
        let tok = Tokenizer::standard();
        for t in ADV_TEMPLATES {
            let text = t.replace("[NAME]", "Karen Arnold");
            assert!(!tok.encode(&text).contains(&UNK), "{text:?}");
        }
        let ids = tok.encode("-----Original Message-----\nFrom: Karen Arnold [mailto:");
        assert_eq!(tok.token(ids[0]), Some("-----Original"));
        assert_eq!(tok.token(*ids.last().unwrap()), Some("[mailto:"));
    }

    #[test]
    fn unknown_words_fall_back_to_characters() {
        let tok = Tokenizer::standard();
        let ids = tok.encode("zq");
        assert_eq!(ids, vec![tok.id("z").unwrap(), tok.id("q").unwrap()]);
        assert_eq!(tok.encode("é"), vec![UNK]);
    }

    #[test]
    fn offsets_cover_source_text() {
        let tok = Tokenizer::standard();
        let text = "name: Karen Arnold, email: karen.arnold@enron.com";
        for (id, r) in tok.encode_with_offsets(text) {
            assert_eq!(tok.token(id), Some(&text[r]));
        }
    }

    #[test]
    fn vocabulary_round_trips() {
        let tok = Tokenizer::standard();
        let again = Tokenizer::from_vocab(tok.vocab().to_vec()).unwrap();
        assert_eq!(again.vocab(), tok.vocab());
        assert!(Tokenizer::from_vocab(vec!["x".into()]).is_err());
    }
}
