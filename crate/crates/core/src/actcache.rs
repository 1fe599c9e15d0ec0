// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-token residual activations harvested from the LM.
//!
//! On disk: one JSON header line, then fixed-width little-endian records of
//! `doc_id u32, token_index u32, d_emb × f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusDoc;
use crate::error::{Error, Result};
use crate::lm::{LmModel, Session};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub layer: usize,
    pub d_emb: usize,
    pub count: usize,
    pub corpus_hash: String,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActCache {
    pub header: CacheHeader,
    doc_ids: Vec<u32>,
    token_index: Vec<u32>,
    data: Vec<f64>,
    doc_index: BTreeMap<u32, Range<usize>>,
}

impl ActCache {
    fn empty(layer: usize, d_emb: usize) -> Self {
        Self {
            header: CacheHeader {
                layer,
                d_emb,
                count: 0,
                corpus_hash: String::new(),
                model_hash: String::new(),
            },
            doc_ids: Vec::new(),
            token_index: Vec::new(),
            data: Vec::new(),
            doc_index: BTreeMap::new(),
        }
    }

    fn push_doc(&mut self, doc_id: u32, rows: &[f64]) -> Result<()> {
        let d = self.header.d_emb;
        let start = self.doc_ids.len();
        let n = rows.len() / d;
        if self.doc_index.contains_key(&doc_id) {
            return Err(Error::Data(format!("doc {doc_id} harvested twice")));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite activation in doc {doc_id}"
            )));
        }
        self.doc_ids.extend(std::iter::repeat_n(doc_id, n));
        self.token_index.extend(0..n as u32);
        self.data.extend_from_slice(rows);
        self.doc_index.insert(doc_id, start..start + n);
        self.header.count = self.doc_ids.len();
        Ok(())
    }

    pub fn layer(&self) -> usize {
        self.header.layer
    }

    pub fn d_emb(&self) -> usize {
        self.header.d_emb
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// `(doc_id, token_index, vector)` of record `i`.
    pub fn record(&self, i: usize) -> (u32, u32, &[f64]) {
        let d = self.header.d_emb;
        (
            self.doc_ids[i],
            self.token_index[i],
            &self.data[i * d..(i + 1) * d],
        )
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.doc_index.keys().copied()
    }

    /// Token vectors of one document as a `t×d_emb` slice.
    pub fn doc_rows(&self, doc_id: u32) -> Result<&[f64]> {
        let r = self
            .doc_index
            .get(&doc_id)
            .ok_or_else(|| Error::Lookup(format!("doc {doc_id} not in activation cache")))?;
        let d = self.header.d_emb;
        Ok(&self.data[r.start * d..r.end * d])
    }

    /// Restricts the cache to `docs`, keeping their relative order.
    pub fn subset(&self, docs: &[u32]) -> Result<Self> {
        let mut out = Self::empty(self.header.layer, self.header.d_emb);
        out.header.corpus_hash = self.header.corpus_hash.clone();
        out.header.model_hash = self.header.model_hash.clone();
        for &id in docs {
            out.push_doc(id, self.doc_rows(id)?)?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let d = self.header.d_emb;
        let mut buf = serde_json::to_vec(&self.header)?;
        buf.push(b'\n');
        buf.reserve(self.len() * (8 + 8 * d));
        for i in 0..self.len() {
            let (doc, tok, v) = self.record(i);
            buf.extend_from_slice(&doc.to_le_bytes());
            buf.extend_from_slice(&tok.to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing header line"))?;
        let header: CacheHeader = serde_json::from_slice(&bytes[..nl])?;
        let d = header.d_emb;
        let width = 8 + 8 * d;
        let body = &bytes[nl + 1..];
        if d == 0 || body.len() != header.count * width {
            return Err(Error::format(
                path,
                format!(
                    "expected {} records of {width} bytes, found {} bytes",
                    header.count,
                    body.len()
                ),
            ));
        }
        let mut out = Self::empty(header.layer, d);
        let mut rows = Vec::new();
        let mut current: Option<u32> = None;
        for rec in body.chunks_exact(width) {
            let doc = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes"));
            let tok = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes"));
            if current != Some(doc) {
                if let Some(prev) = current {
                    out.push_doc(prev, &rows)?;
                }
                rows.clear();
                current = Some(doc);
            }
            if tok as usize != rows.len() / d {
                return Err(Error::format(
                    path,
                    format!("doc {doc}: token {tok} out of order"),
                ));
            }
            rows.extend(
                rec[8..]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))),
            );
        }
        if let Some(prev) = current {
            out.push_doc(prev, &rows)?;
        }
        out.header = header;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Harvests the residual stream after every block in `layers` in one pass
/// per document.
pub fn harvest_layers(
    model: &LmModel,
    docs: &[&CorpusDoc],
    layers: &[usize],
) -> Result<Vec<ActCache>> {
    let c = model.config();
    if let Some(&bad) = layers.iter().find(|&&l| l >= c.n_layers) {
        return Err(Error::Parameter(format!(
            "layer {bad} out of range for {} layers",
            c.n_layers
        )));
    }
    let mut caches: Vec<ActCache> = layers
        .iter()
        .map(|&l| ActCache::empty(l, c.d_emb))
        .collect();
    for doc in docs {
        if doc.tokens.len() > c.context_length {
            return Err(Error::Input(format!(
                "doc {} has {} tokens, context is {}",
                doc.id,
                doc.tokens.len(),
                c.context_length
            )));
        }
        let (_, resid) = Session::new(model).prefill(&doc.tokens, None, true)?;
        for (cache, &l) in caches.iter_mut().zip(layers) {
            cache.push_doc(doc.id, resid[l].data())?;
        }
    }
    Ok(caches)
}

pub fn harvest(model: &LmModel, docs: &[&CorpusDoc], layer: usize) -> Result<ActCache> {
    Ok(harvest_layers(model, docs, &[layer])?.remove(0))
}

/// Mean of a document's token vectors.
pub fn mean_pool(cache: &ActCache, doc_id: u32) -> Result<Tensor> {
    let d = cache.d_emb();
    let rows = cache.doc_rows(doc_id)?;
    let n = (rows.len() / d) as f64;
    let mut out = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        out.iter_mut().zip(r).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= n);
    Tensor::vector(out)
}

/// One epoch of record batches, shuffled deterministically under `shuffle_seed`.
pub fn stream_batches(
    cache: &ActCache,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..cache.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(Batches {
        cache,
        order,
        batch_size,
        at: 0,
    })
}

pub struct Batches<'a> {
    cache: &'a ActCache,
    order: Vec<usize>,
    batch_size: usize,
    at: usize,
}

impl Iterator for Batches<'_> {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        if self.at >= self.order.len() {
            return None;
        }
        let end = (self.at + self.batch_size).min(self.order.len());
        let d = self.cache.d_emb();
        let mut data = Vec::with_capacity((end - self.at) * d);
        for &i in &self.order[self.at..end] {
            data.extend_from_slice(self.cache.record(i).2);
        }
        let rows = end - self.at;
        self.at = end;
        Some(Tensor::matrix(rows, d, data).expect("cache vectors are finite"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache_from(docs: &[(u32, Vec<Vec<f64>>)]) -> ActCache {
        let d = docs[0].1[0].len();
        let mut c = ActCache::empty(0, d);
        for (id, rows) in docs {
            c.push_doc(*id, &rows.concat()).unwrap();
        }
        c
    }

    #[test]
    fn mean_pool_examples() {
        let c = cache_from(&[
            (4, vec![vec![1.0, 1.0], vec![3.0, 3.0]]),
            (7, vec![vec![5.0, -1.0]]),
        ]);
        assert_eq!(mean_pool(&c, 4).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(mean_pool(&c, 7).unwrap().data(), &[5.0, -1.0]);
        assert!(matches!(mean_pool(&c, 99), Err(Error::Lookup(_))));
    }

    #[test]
    fn batches_cover_records_once() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let c = cache_from(&[(0, rows)]);
        let sizes: Vec<usize> = stream_batches(&c, 4, 1)
            .unwrap()
            .map(|b| b.rows())
            .collect();
        assert_eq!(sizes, [4, 4, 2]);
        let mut seen: Vec<f64> = stream_batches(&c, 4, 1)
            .unwrap()
            .flat_map(Tensor::into_data)
            .collect();
        let again: Vec<f64> = stream_batches(&c, 4, 1)
            .unwrap()
            .flat_map(Tensor::into_data)
            .collect();
        assert_eq!(seen, again);
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(f64::from).collect::<Vec<_>>());
        assert!(stream_batches(&c, 0, 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actcache");
        let mut c = cache_from(&[
            (2, vec![vec![0.1, -0.2], vec![1e-9, 4.0]]),
            (9, vec![vec![7.0, 8.0]]),
        ]);
        c.header.model_hash = "abc".into();
        c.write(&path).unwrap();
        assert_eq!(ActCache::read(&path).unwrap(), c);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(ActCache::read(&path), Err(Error::Format { .. })));
    }
}
