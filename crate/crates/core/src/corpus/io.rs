// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tab-separated storage for a [`DatasetSplit`] and its vocabulary.
//!
//! Text fields escape `\\`, `\t` and `\n`; token lists are space-separated ids.

use std::fs;
use std::path::Path;

use super::{AdvPrompt, ClozeItem, CorpusDoc, DatasetSplit, Subject, Tokenizer, TopkEntry};
use crate::error::{Error, Result};

/// Files written by [`write_split`], relative to the split directory.
pub const SPLIT_FILES: [&str; 9] = [
    "vocab.tsv",
    "subjects.tsv",
    "corpus.tsv",
    "heldout.tsv",
    "d_prob.tsv",
    "d_topk.tsv",
    "d_adv.tsv",
    "sae_docs.tsv",
    "cloze.tsv",
];

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => return Err(format!("bad escape sequence \\{other:?}")),
        }
    }
    Ok(out)
}

fn join_ids<T: ToString>(ids: &[T], sep: &str) -> String {
    ids.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn write_docs(path: &Path, docs: &[CorpusDoc]) -> Result<()> {
    let mut s = String::new();
    for d in docs {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            d.id,
            u8::from(d.contains_pii),
            join_ids(&d.subject_ids, ","),
            join_ids(&d.tokens, " "),
            escape(&d.text)
        ));
    }
    Ok(fs::write(path, s)?)
}

/// Writes every dataset and the vocabulary into `dir`.
pub fn write_split(dir: &Path, split: &DatasetSplit, tok: &Tokenizer) -> Result<()> {
    fs::create_dir_all(dir)?;
    let vocab: String = tok.vocab().iter().map(|w| escape(w) + "\n").collect();
    fs::write(dir.join("vocab.tsv"), vocab)?;

    let subjects: String = split
        .subjects
        .iter()
        .map(|s| format!("{}\t{}\t{}\t{}\n", s.id, s.first, s.last, s.email))
        .collect();
    fs::write(dir.join("subjects.tsv"), subjects)?;
    write_docs(&dir.join("corpus.tsv"), &split.train_corpus)?;
    write_docs(&dir.join("heldout.tsv"), &split.heldout)?;

    let prob: String = split
        .d_prob
        .iter()
        .map(|(id, l)| format!("{id}\t{}\n", u8::from(*l)))
        .collect();
    fs::write(dir.join("d_prob.tsv"), prob)?;
    let topk: String = split
        .d_topk
        .iter()
        .map(|e| format!("{}\t{}\n", e.doc_id, e.email_start))
        .collect();
    fs::write(dir.join("d_topk.tsv"), topk)?;
    let adv: String = split
        .d_adv
        .iter()
        .map(|p| {
            format!(
                "{}\t{}\t{}\t{}\n",
                p.template_id,
                p.subject_id,
                p.expected_pii,
                escape(&p.prompt_text)
            )
        })
        .collect();
    fs::write(dir.join("d_adv.tsv"), adv)?;
    let sae: String = split.sae_docs.iter().map(|id| format!("{id}\n")).collect();
    fs::write(dir.join("sae_docs.tsv"), sae)?;
    let cloze: String = split
        .cloze
        .iter()
        .map(|c| format!("{}\t{}\n", c.doc_id, c.position))
        .collect();
    fs::write(dir.join("cloze.tsv"), cloze)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

struct Rows {
    path: std::path::PathBuf,
    text: String,
}

impl Rows {
    fn open(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path)?;
        Ok(Self { path, text })
    }

    /// Parses each non-empty line with `f`, which receives the tab fields.
    fn parse<T>(
        &self,
        width: usize,
        f: impl Fn(&[&str]) -> std::result::Result<T, String>,
    ) -> Result<Vec<T>> {
        self.text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(n, line)| {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != width {
                    return Err(Error::format(
                        &self.path,
                        format!(
                            "line {}: expected {width} fields, got {}",
                            n + 1,
                            fields.len()
                        ),
                    ));
                }
                f(&fields).map_err(|e| Error::format(&self.path, format!("line {}: {e}", n + 1)))
            })
            .collect()
    }
}

fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("not a number: {s:?}"))
}

fn flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("expected 0 or 1, got {s:?}")),
    }
}

fn list<T: std::str::FromStr>(s: &str, sep: char) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep).map(num).collect()
}

fn read_docs(dir: &Path, name: &str) -> Result<Vec<CorpusDoc>> {
    Rows::open(dir, name)?.parse(5, |f| {
        Ok(CorpusDoc {
            id: num(f[0])?,
            contains_pii: flag(f[1])?,
            subject_ids: list(f[2], ',')?,
            tokens: list(f[3], ' ')?,
            text: unescape(f[4])?,
        })
    })
}

/// Reads a split written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<(DatasetSplit, Tokenizer)> {
    let vocab_rows = Rows::open(dir, "vocab.tsv")?;
    let vocab = vocab_rows
        .text
        .lines()
        .map(|l| unescape(l).map_err(|e| Error::format(&vocab_rows.path, e)))
        .collect::<Result<Vec<_>>>()?;
    let tok = Tokenizer::from_vocab(vocab)?;

    let subjects = Rows::open(dir, "subjects.tsv")?.parse(4, |f| {
        Ok(Subject {
            id: num(f[0])?,
            first: f[1].to_string(),
            last: f[2].to_string(),
            email: f[3].to_string(),
        })
    })?;
    let train_corpus = read_docs(dir, "corpus.tsv")?;
    if let Some((i, d)) = train_corpus
        .iter()
        .enumerate()
        .find(|(i, d)| d.id as usize != *i)
    {
        return Err(Error::format(
            dir.join("corpus.tsv"),
            format!("row {i} has id {}, expected ids in order", d.id),
        ));
    }
    let heldout = read_docs(dir, "heldout.tsv")?;
    let d_prob = Rows::open(dir, "d_prob.tsv")?.parse(2, |f| Ok((num(f[0])?, flag(f[1])?)))?;
    let d_topk = Rows::open(dir, "d_topk.tsv")?.parse(2, |f| {
        Ok(TopkEntry {
            doc_id: num(f[0])?,
            email_start: num(f[1])?,
        })
    })?;
    let d_adv = Rows::open(dir, "d_adv.tsv")?.parse(4, |f| {
        Ok(AdvPrompt {
            template_id: num(f[0])?,
            subject_id: num(f[1])?,
            expected_pii: f[2].to_string(),
            prompt_text: unescape(f[3])?,
        })
    })?;
    let sae_docs = Rows::open(dir, "sae_docs.tsv")?.parse(1, |f| num(f[0]))?;
    let cloze = Rows::open(dir, "cloze.tsv")?.parse(2, |f| {
        Ok(ClozeItem {
            doc_id: num(f[0])?,
            position: num(f[1])?,
        })
    })?;
    let split = DatasetSplit {
        subjects,
        train_corpus,
        d_prob,
        d_topk,
        d_adv,
        sae_docs,
        heldout,
        cloze,
    };
    Ok((split, tok))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_round_trip() {
        for s in ["plain", "tab\there", "line\nbreak", "back\\slash\\n"] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
            assert!(!escape(s).contains('\t') && !escape(s).contains('\n'));
        }
        assert!(unescape("bad\\x").is_err());
    }
}
