// SPDX-License-Identifier: MIT OR Apache-2.0

//! k-sparse autoencoder over residual activations, with an auxiliary loss
//! that revives dead latents, plus magnitude ranking of PII features.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::actcache::ActCache;
use crate::binio;
use crate::corpus::{email_token_span, CorpusDoc, Tokenizer};
use crate::error::{Error, Result};
use crate::lm::{LmModel, Session};
use crate::numerics::{kernels, Adam, AdamConfig, Graph, Tensor, Var};
use crate::rng;

const MAGIC: &[u8; 4] = b"LGSA";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    /// Latent width as a multiple of `d_emb`.
    pub expansion: usize,
    pub k: usize,
    pub k_aux: usize,
    pub alpha_aux: f64,
    /// Tokens without firing after which a latent counts as dead.
    pub dead_threshold: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            expansion: 8,
            k: 32,
            k_aux: 32,
            alpha_aux: 1.0 / 32.0,
            dead_threshold: 10_000,
            lr: 1e-3,
            batch_size: 256,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Header {
    d_emb: usize,
    h: usize,
    k: usize,
    k_aux: usize,
    alpha_aux: f64,
    layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `h×d_emb`.
    pub w_enc: Tensor,
    /// `d_emb×h`, unit-norm columns.
    pub w_dec: Tensor,
    pub b_pre: Tensor,
    pub k: usize,
    pub k_aux: usize,
    pub alpha_aux: f64,
    pub h: usize,
    /// Residual layer the autoencoder was trained on.
    pub layer: usize,
}

impl SaeParams {
    pub fn d_emb(&self) -> usize {
        self.b_pre.numel()
    }

    /// Pre-activations `W_enc (a - b_pre)`.
    pub fn pre_activation(&self, a: &[f64]) -> Result<Vec<f64>> {
        let d = self.d_emb();
        if a.len() != d {
            return Err(Error::Dimension {
                op: "encode",
                lhs: vec![a.len()],
                rhs: vec![d],
            });
        }
        let centred: Vec<f64> = a
            .iter()
            .zip(self.b_pre.data())
            .map(|(x, b)| x - b)
            .collect();
        Ok(self
            .w_enc
            .data()
            .chunks_exact(d)
            .map(|row| kernels::dot(row, &centred))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            d_emb: self.d_emb(),
            h: self.h,
            k: self.k,
            k_aux: self.k_aux,
            alpha_aux: self.alpha_aux,
            layer: self.layer,
        };
        binio::write_checkpoint(
            path,
            MAGIC,
            &header,
            &[&self.w_enc, &self.w_dec, &self.b_pre],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (hd, mut t): (Header, Vec<Tensor>) = binio::read_checkpoint(path, MAGIC)?;
        let ok = t.len() == 3
            && t[0].shape() == [hd.h, hd.d_emb]
            && t[1].shape() == [hd.d_emb, hd.h]
            && t[2].shape() == [hd.d_emb];
        if !ok {
            return Err(Error::format(path, "tensor shapes do not match header"));
        }
        let b_pre = t.pop().expect("three tensors");
        let w_dec = t.pop().expect("three tensors");
        let w_enc = t.pop().expect("three tensors");
        Ok(Self {
            w_enc,
            w_dec,
            b_pre,
            k: hd.k,
            k_aux: hd.k_aux,
            alpha_aux: hd.alpha_aux,
            h: hd.h,
            layer: hd.layer,
        })
    }
}

/// `TopK(W_enc (a - b_pre))`: at most `k` nonzeros.
pub fn encode(params: &SaeParams, a: &[f64]) -> Result<Tensor> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite activation".into()));
    }
    let pre = params.pre_activation(a)?;
    let mut z = vec![0.0; params.h];
    for i in kernels::topk_indices(&pre, params.k, None) {
        z[i] = pre[i];
    }
    Tensor::vector(z)
}

/// `W_dec z + b_pre`.
pub fn decode(params: &SaeParams, z: &[f64]) -> Result<Tensor> {
    if z.len() != params.h {
        return Err(Error::Dimension {
            op: "decode",
            lhs: vec![z.len()],
            rhs: vec![params.h],
        });
    }
    let h = params.h;
    let mut out = params.b_pre.data().to_vec();
    for (o, row) in out.iter_mut().zip(params.w_dec.data().chunks_exact(h)) {
        *o += kernels::dot(row, z);
    }
    Tensor::vector(out)
}

// ---------------------------------------------------------------------------
// Dead latents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadLatentTracker {
    pub tokens_since_fire: Vec<usize>,
    pub threshold: usize,
}

impl DeadLatentTracker {
    pub fn new(h: usize, threshold: usize) -> Self {
        Self {
            tokens_since_fire: vec![0; h],
            threshold,
        }
    }

    /// Records one batch of `tokens` rows; `fired[i]` if latent `i` was
    /// nonzero in any of them.
    pub fn update(&mut self, fired: &[bool], tokens: usize) {
        for (c, &f) in self.tokens_since_fire.iter_mut().zip(fired) {
            *c = if f { 0 } else { *c + tokens };
        }
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        self.tokens_since_fire
            .iter()
            .map(|&c| c >= self.threshold)
            .collect()
    }

    pub fn dead_count(&self) -> usize {
        self.tokens_since_fire
            .iter()
            .filter(|&&c| c >= self.threshold)
            .count()
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeLog {
    /// Mean per-token squared reconstruction error, per epoch.
    pub mse: Vec<f64>,
    pub aux_loss: Vec<f64>,
    /// Fraction of dead latents at the end of each epoch.
    pub dead_fraction: Vec<f64>,
    pub initial_mse: f64,
}

/// One batch of the objective. Returns `(total, mse, aux)` nodes and the
/// latents of the main path.
fn batch_loss(
    g: &mut Graph,
    vars: [Var; 3],
    x: Tensor,
    k: usize,
    k_aux: usize,
    alpha_aux: f64,
    dead: &[bool],
) -> Result<(Var, Var, Option<Var>, Var)> {
    let [w_enc, w_dec, b_pre] = vars;
    let n = x.rows() as f64;
    let x = g.constant(x);
    let neg_b = g.scale(b_pre, -1.0);
    let xc = g.add_row(x, neg_b)?;
    let pre = g.matmul_t(xc, w_enc)?;
    let z = g.topk(pre, k, None)?;
    let dec = g.matmul_t(z, w_dec)?;
    let xhat = g.add_row(dec, b_pre)?;
    let diff = g.sub(x, xhat)?;
    let sq = g.sum_squares(diff);
    let mse = g.scale(sq, 1.0 / n);
    let n_dead = dead.iter().filter(|&&d| d).count();
    if n_dead == 0 || alpha_aux == 0.0 {
        return Ok((mse, mse, None, z));
    }
    // Residual target is held fixed; only the auxiliary reconstruction learns from it.
    let e = g.constant(g.value(diff).clone());
    let z_aux = g.topk(pre, k_aux.min(n_dead), Some(dead))?;
    let e_hat = g.matmul_t(z_aux, w_dec)?;
    let ed = g.sub(e, e_hat)?;
    let aux_sq = g.sum_squares(ed);
    let aux = g.scale(aux_sq, 1.0 / n);
    let weighted = g.scale(aux, alpha_aux);
    let total = g.add(mse, weighted)?;
    Ok((total, mse, Some(aux), z))
}

fn normalize_columns(w_dec: &mut Tensor) {
    let (d, h) = (w_dec.rows(), w_dec.cols());
    let data = w_dec.data_mut();
    for j in 0..h {
        let norm = (0..d).map(|i| data[i * h + j].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            (0..d).for_each(|i| data[i * h + j] /= norm);
        }
    }
}

/// Mean squared reconstruction error over every record.
pub fn reconstruction_mse(params: &SaeParams, cache: &ActCache) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..cache.len() {
        let a = cache.record(i).2;
        let rec = decode(params, encode(params, a)?.data())?;
        total += a
            .iter()
            .zip(rec.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>();
    }
    Ok(total / cache.len().max(1) as f64)
}

/// Fraction of variance unexplained: `Σ‖a - â‖² / Σ‖a - b_pre‖²`.
pub fn fvu(params: &SaeParams, cache: &ActCache) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..cache.len() {
        let a = cache.record(i).2;
        let rec = decode(params, encode(params, a)?.data())?;
        num += a
            .iter()
            .zip(rec.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>();
        den += a
            .iter()
            .zip(params.b_pre.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>();
    }
    Ok(num / den.max(f64::MIN_POSITIVE))
}

/// Trains an autoencoder on every record of `cache`.
pub fn train_sae(
    cache: &ActCache,
    cfg: &SaeConfig,
) -> Result<(SaeParams, SaeLog, DeadLatentTracker)> {
    if cache.is_empty() {
        return Err(Error::Data("empty activation cache".into()));
    }
    let d = cache.d_emb();
    let h = cfg.expansion * d;
    if cfg.expansion < 1
        || cfg.k < 1
        || cfg.k > h
        || cfg.k_aux < 1
        || cfg.k_aux > h
        || cfg.batch_size == 0
    {
        return Err(Error::Parameter(format!(
            "invalid autoencoder config {cfg:?} for d_emb {d}"
        )));
    }
    if !(cfg.alpha_aux >= 0.0) {
        return Err(Error::Parameter("alpha_aux must be non-negative".into()));
    }
    let mut rng = rng::stream(cfg.seed, "sae-init");
    let w_enc = Tensor::randn(&[h, d], 1.0 / (d as f64).sqrt(), &mut rng);
    let mut w_dec_data = vec![0.0; d * h];
    for j in 0..h {
        for i in 0..d {
            w_dec_data[i * h + j] = w_enc.data()[j * d + i];
        }
    }
    let mut w_dec = Tensor::matrix(d, h, w_dec_data)?;
    normalize_columns(&mut w_dec);
    let mut mean = vec![0.0; d];
    for i in 0..cache.len() {
        mean.iter_mut()
            .zip(cache.record(i).2)
            .for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= cache.len() as f64);
    let mut params = SaeParams {
        w_enc,
        w_dec,
        b_pre: Tensor::vector(mean)?,
        k: cfg.k,
        k_aux: cfg.k_aux,
        alpha_aux: cfg.alpha_aux,
        h,
        layer: cache.layer(),
    };
    let mut log = SaeLog {
        initial_mse: reconstruction_mse(&params, cache)?,
        ..SaeLog::default()
    };
    let mut tracker = DeadLatentTracker::new(h, cfg.dead_threshold);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &[&params.w_enc, &params.w_dec, &params.b_pre],
    );
    let mut order: Vec<usize> = (0..cache.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut mse_sum, mut aux_sum, mut rows) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                data.extend_from_slice(cache.record(i).2);
            }
            let x = Tensor::matrix(batch.len(), d, data)?;
            let dead = tracker.dead_mask();
            let mut g = Graph::new();
            let vars = [
                g.param(std::mem::replace(&mut params.w_enc, Tensor::zeros(&[1]))),
                g.param(std::mem::replace(&mut params.w_dec, Tensor::zeros(&[1]))),
                g.param(std::mem::replace(&mut params.b_pre, Tensor::zeros(&[1]))),
            ];
            let (total, mse, aux, z) =
                batch_loss(&mut g, vars, x, cfg.k, cfg.k_aux, cfg.alpha_aux, &dead)?;
            let loss = g.value(total).data()[0];
            if !loss.is_finite() {
                return Err(Error::Training { step, loss });
            }
            let mut fired = vec![false; h];
            for row in g.value(z).data().chunks_exact(h) {
                row.iter()
                    .zip(fired.iter_mut())
                    .for_each(|(v, f)| *f |= *v != 0.0);
            }
            tracker.update(&fired, batch.len());
            mse_sum += g.value(mse).data()[0] * batch.len() as f64;
            aux_sum += aux.map_or(0.0, |a| g.value(a).data()[0]) * batch.len() as f64;
            rows += batch.len();
            g.backward(total)?;
            params.w_enc = g.take(vars[0]);
            params.w_dec = g.take(vars[1]);
            params.b_pre = g.take(vars[2]);
            opt.step(&mut [&mut params.w_enc, &mut params.w_dec, &mut params.b_pre])?;
            params.w_enc.clear_grad();
            params.w_dec.clear_grad();
            params.b_pre.clear_grad();
            normalize_columns(&mut params.w_dec);
            step += 1;
        }
        log.mse.push(mse_sum / rows as f64);
        log.aux_loss.push(aux_sum / rows as f64);
        log.dead_fraction
            .push(tracker.dead_count() as f64 / h as f64);
        log::info!(
            "sae epoch {}: mse {:.5}, dead {:.3}",
            log.mse.len(),
            log.mse.last().unwrap_or(&f64::NAN),
            log.dead_fraction.last().unwrap_or(&f64::NAN)
        );
    }
    Ok((params, log, tracker))
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureRanking {
    /// `(index, aggregate magnitude)`, descending; ties by lower index.
    pub entries: Vec<(usize, f64)>,
}

impl FeatureRanking {
    /// Sums `|v_i|` over all vectors and sorts.
    pub fn from_vectors<'a>(dim: usize, vectors: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut agg = vec![0.0; dim];
        for v in vectors {
            agg.iter_mut().zip(v).for_each(|(a, x)| *a += x.abs());
        }
        let mut entries: Vec<(usize, f64)> = agg.into_iter().enumerate().collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self { entries }
    }

    /// The first `k` indices, in ranking order.
    pub fn top(&self, k: usize) -> Vec<usize> {
        self.entries.iter().take(k).map(|e| e.0).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s: String = self
            .entries
            .iter()
            .map(|(i, v)| format!("{i}\t{v:e}\n"))
            .collect();
        Ok(fs::write(path, s)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || {
                Error::format(
                    path,
                    format!("line {}: expected index<TAB>aggregate", n + 1),
                )
            };
            let (i, v) = line.split_once('\t').ok_or_else(bad)?;
            entries.push((i.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?));
        }
        Ok(Self { entries })
    }
}

/// Residual activations at `layer` for each document's email tokens, from
/// the first address token through the last.
pub fn email_activations(
    model: &LmModel,
    docs: &[&CorpusDoc],
    layer: usize,
    tok: &Tokenizer,
) -> Result<Vec<Vec<f64>>> {
    let d = model.config().d_emb;
    if layer >= model.config().n_layers {
        return Err(Error::Parameter(format!("layer {layer} out of range")));
    }
    let mut out = Vec::new();
    for doc in docs {
        let (first, last) = email_token_span(tok, &doc.text)
            .ok_or_else(|| Error::Data(format!("doc {} has no email span", doc.id)))?;
        let (_, resid) = Session::new(model).prefill(&doc.tokens, None, true)?;
        for t in first..=last {
            out.push(resid[layer].data()[t * d..(t + 1) * d].to_vec());
        }
    }
    Ok(out)
}

/// Latents ranked by `Σ |z_i|` over the email tokens of `docs`.
pub fn rank_pii_features(
    params: &SaeParams,
    model: &LmModel,
    docs: &[&CorpusDoc],
    tok: &Tokenizer,
) -> Result<FeatureRanking> {
    let acts = email_activations(model, docs, params.layer, tok)?;
    let latents = acts
        .iter()
        .map(|a| encode(params, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureRanking::from_vectors(
        params.h,
        latents.iter().map(Tensor::data),
    ))
}

/// Residual dimensions ranked by `Σ |a_i|` over the email tokens of `docs`.
pub fn rank_pii_neurons(
    model: &LmModel,
    docs: &[&CorpusDoc],
    layer: usize,
    tok: &Tokenizer,
) -> Result<FeatureRanking> {
    let acts = email_activations(model, docs, layer, tok)?;
    Ok(FeatureRanking::from_vectors(
        model.config().d_emb,
        acts.iter().map(Vec::as_slice),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(d: usize, h: usize, k: usize) -> SaeParams {
        let mut rng = rng::stream(3, "toy");
        let w_enc = Tensor::randn(&[h, d], 1.0, &mut rng);
        let mut w_dec = Tensor::randn(&[d, h], 1.0, &mut rng);
        normalize_columns(&mut w_dec);
        SaeParams {
            w_enc,
            w_dec,
            b_pre: Tensor::randn(&[d], 1.0, &mut rng),
            k,
            k_aux: k,
            alpha_aux: 0.0,
            h,
            layer: 0,
        }
    }

    #[test]
    fn encode_centred_input_is_zero() {
        let p = toy(4, 8, 2);
        let z = encode(&p, p.b_pre.data()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(decode(&p, z.data()).unwrap(), p.b_pre);
    }

    #[test]
    fn one_hot_decodes_to_column() {
        let p = toy(4, 8, 2);
        let mut z = vec![0.0; 8];
        z[5] = 2.5;
        let out = decode(&p, &z).unwrap();
        for i in 0..4 {
            let expect = 2.5 * p.w_dec.data()[i * 8 + 5] + p.b_pre.data()[i];
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tracker_counts_and_resets() {
        let mut t = DeadLatentTracker::new(3, 10);
        t.update(&[true, false, false], 6);
        t.update(&[false, false, true], 6);
        assert_eq!(t.tokens_since_fire, vec![6, 12, 0]);
        assert_eq!(t.dead_mask(), vec![false, true, false]);
        assert_eq!(t.dead_count(), 1);
    }

    #[test]
    fn ranking_ties_prefer_lower_index() {
        let v = [vec![0.0, 2.0, -2.0, 1.0]];
        let r = FeatureRanking::from_vectors(4, v.iter().map(Vec::as_slice));
        assert_eq!(r.top(3), vec![1, 2, 3]);
        assert_eq!(r.entries[0], (1, 2.0));
    }

    #[test]
    fn ranking_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.tsv");
        let r = FeatureRanking {
            entries: vec![(3, 1.25e-3), (0, 1e-300), (1, 0.0)],
        };
        r.write(&path).unwrap();
        assert_eq!(FeatureRanking::read(&path).unwrap(), r);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.bin");
        let p = toy(4, 8, 3);
        p.save(&path).unwrap();
        assert_eq!(SaeParams::load(&path).unwrap(), p);
    }

    #[test]
    fn zero_alpha_total_is_mse() {
        let p = toy(4, 8, 2);
        let mut rng = rng::stream(1, "x");
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let vars = [
            g.param(p.w_enc.clone()),
            g.param(p.w_dec.clone()),
            g.param(p.b_pre.clone()),
        ];
        let dead = vec![true; 8];
        let (total, mse, aux, _) = batch_loss(&mut g, vars, x, 2, 2, 0.0, &dead).unwrap();
        assert_eq!(g.value(total).data(), g.value(mse).data());
        assert!(aux.is_none());
    }
}
