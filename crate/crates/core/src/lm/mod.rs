// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small decoder-only transformer with residual-stream hooks.
//!
//! Pre-norm blocks, learned positional embeddings and a tied unembedding.
//! Training runs through the autodiff [`Graph`]; inference runs through the
//! incremental [`Session`] in [`engine`].

mod engine;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use engine::{forward_with_hooks, generate, score_tokens, Interventor, Session};

use crate::binio;
use crate::corpus::CONTEXT_LENGTH;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::rng;

const MAGIC: &[u8; 4] = b"LGLM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_emb: 64,
            n_layers: 6,
            n_heads: 4,
            d_ff: 256,
            context_length: CONTEXT_LENGTH,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_emb == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Parameter(format!(
                "degenerate model config {self:?}"
            )));
        }
        if self.n_heads == 0 || !self.d_emb.is_multiple_of(self.n_heads) {
            return Err(Error::Parameter(format!(
                "d_emb {} not divisible by n_heads {}",
                self.d_emb, self.n_heads
            )));
        }
        if self.context_length != CONTEXT_LENGTH {
            return Err(Error::Parameter(format!(
                "context_length must be {CONTEXT_LENGTH}, got {}",
                self.context_length
            )));
        }
        Ok(())
    }
}

/// Residual stream after block `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookPoint {
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualActivation {
    pub layer: usize,
    pub token_index: usize,
    pub vector: Tensor,
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

const PER_BLOCK: usize = 12;

/// Offsets of a block's tensors within [`LmModel::params`].
#[derive(Debug, Clone, Copy)]
pub(crate) enum BlockParam {
    Ln1Gain,
    Ln1Bias,
    Qkv,
    QkvBias,
    Out,
    OutBias,
    Ln2Gain,
    Ln2Bias,
    Up,
    UpBias,
    Down,
    DownBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmModel {
    config: LmConfig,
    /// `tok_emb, pos_emb`, twelve tensors per block, then `lnf_gain, lnf_bias`.
    params: Vec<Tensor>,
}

impl LmModel {
    /// Random initialisation, `N(0, 0.02)` with residual outputs scaled by `1/sqrt(2L)`.
    pub fn init(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "lm-init");
        let (d, f) = (config.d_emb, config.d_ff);
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let mut params = vec![
            Tensor::randn(&[config.vocab_size, d], std, &mut rng),
            Tensor::randn(&[config.context_length, d], std, &mut rng),
        ];
        for _ in 0..config.n_layers {
            params.extend([
                Tensor::full(&[d], 1.0),
                Tensor::zeros(&[d]),
                Tensor::randn(&[d, 3 * d], std, &mut rng),
                Tensor::zeros(&[3 * d]),
                Tensor::randn(&[d, d], resid_std, &mut rng),
                Tensor::zeros(&[d]),
                Tensor::full(&[d], 1.0),
                Tensor::zeros(&[d]),
                Tensor::randn(&[d, f], std, &mut rng),
                Tensor::zeros(&[f]),
                Tensor::randn(&[f, d], resid_std, &mut rng),
                Tensor::zeros(&[d]),
            ]);
        }
        params.push(Tensor::full(&[d], 1.0));
        params.push(Tensor::zeros(&[d]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn tok_emb(&self) -> &Tensor {
        &self.params[0]
    }

    pub(crate) fn pos_emb(&self) -> &Tensor {
        &self.params[1]
    }

    pub(crate) fn block(&self, layer: usize, p: BlockParam) -> &Tensor {
        &self.params[2 + layer * PER_BLOCK + p as usize]
    }

    pub(crate) fn final_norm(&self) -> (&Tensor, &Tensor) {
        let n = self.params.len();
        (&self.params[n - 2], &self.params[n - 1])
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.context_length {
            return Err(Error::Input(format!(
                "{} tokens exceed context length {}",
                tokens.len(),
                self.config.context_length
            )));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token {bad} out of vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let refs: Vec<&Tensor> = self.params.iter().collect();
        binio::write_checkpoint(path, MAGIC, &self.config, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params): (LmConfig, _) = binio::read_checkpoint(path, MAGIC)?;
        config.validate()?;
        let expected = Self::init(config)?;
        let shapes_match = expected.params.len() == params.len()
            && expected
                .params
                .iter()
                .zip(&params)
                .all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::format(
                path,
                "parameter shapes do not match the stored config",
            ));
        }
        Ok(Self { config, params })
    }
}

// ---------------------------------------------------------------------------
// Graph forward
// ---------------------------------------------------------------------------

/// Packed batch forward: returns per-row logits and per-layer residuals.
pub(crate) fn graph_forward(
    g: &mut Graph,
    vars: &[Var],
    config: &LmConfig,
    docs: &[&[u32]],
) -> Result<(Var, Vec<Var>)> {
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::with_capacity(docs.len());
    for d in docs {
        segments.push((ids.len(), d.len()));
        ids.extend(d.iter().map(|&t| t as usize));
        pos.extend(0..d.len());
    }
    let te = g.embedding(vars[0], &ids)?;
    let pe = g.embedding(vars[1], &pos)?;
    let mut x = g.add(te, pe)?;
    let mut resid = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |b: BlockParam| vars[2 + l * PER_BLOCK + b as usize];
        let h = g.layer_norm(x, p(BlockParam::Ln1Gain), p(BlockParam::Ln1Bias))?;
        let qkv = g.matmul(h, p(BlockParam::Qkv))?;
        let qkv = g.add_row(qkv, p(BlockParam::QkvBias))?;
        let a = g.causal_attention(qkv, config.n_heads, &segments)?;
        let o = g.matmul(a, p(BlockParam::Out))?;
        let o = g.add_row(o, p(BlockParam::OutBias))?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, p(BlockParam::Ln2Gain), p(BlockParam::Ln2Bias))?;
        let u = g.matmul(h, p(BlockParam::Up))?;
        let u = g.add_row(u, p(BlockParam::UpBias))?;
        let u = g.gelu(u);
        let dn = g.matmul(u, p(BlockParam::Down))?;
        let dn = g.add_row(dn, p(BlockParam::DownBias))?;
        x = g.add(x, dn)?;
        resid.push(x);
    }
    let n = vars.len();
    let h = g.layer_norm(x, vars[n - 2], vars[n - 1])?;
    let logits = g.matmul_t(h, vars[0])?;
    Ok((logits, resid))
}

fn next_token_targets(docs: &[&[u32]]) -> Vec<Option<usize>> {
    let mut t = Vec::new();
    for d in docs {
        for i in 0..d.len() {
            t.push(d.get(i + 1).map(|&x| x as usize));
        }
    }
    t
}

/// Mean next-token cross-entropy (nats) over `docs`.
pub fn mean_loss(model: &LmModel, docs: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for d in docs {
        model.check_tokens(d)?;
        let lp = score_tokens(model, d, None)?;
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    if count == 0 {
        return Err(Error::Data("no predictable tokens".into()));
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Documents are packed into batches of at most this many tokens.
    pub batch_tokens: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 14,
            lr: 3e-3,
            warmup_steps: 100,
            batch_tokens: 512,
            min_lr_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_heldout_loss: f64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Held-out loss after each epoch.
    pub heldout_loss: Vec<f64>,
}

fn pack_batches(docs: &[Vec<u32>], order: &[usize], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut n = 0;
    for &i in order {
        let len = docs[i].len();
        if n + len > batch_tokens && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
            n = 0;
        }
        cur.push(i);
        n += len;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn lr_at(tc: &TrainConfig, step: usize, total: usize) -> f64 {
    if step < tc.warmup_steps {
        return tc.lr * (step + 1) as f64 / tc.warmup_steps as f64;
    }
    let span = total.saturating_sub(tc.warmup_steps).max(1);
    let progress = ((step - tc.warmup_steps) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    tc.lr * (tc.min_lr_ratio + (1.0 - tc.min_lr_ratio) * cos)
}

/// Trains a fresh model on `train` (token ids with `<bos>`), reporting
/// held-out loss on `heldout` before training and after every epoch.
pub fn train_lm(
    config: LmConfig,
    train: &[Vec<u32>],
    heldout: &[Vec<u32>],
    tc: &TrainConfig,
) -> Result<(LmModel, TrainLog)> {
    if train.iter().all(|d| d.len() < 2) {
        return Err(Error::Data(
            "training corpus has no predictable tokens".into(),
        ));
    }
    let mut model = LmModel::init(config)?;
    for d in train.iter().chain(heldout) {
        model.check_tokens(d)?;
    }
    let mut log = TrainLog::default();
    if !heldout.is_empty() {
        log.initial_heldout_loss = mean_loss(&model, heldout)?;
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: tc.lr,
            ..AdamConfig::default()
        },
        &model.params.iter().collect::<Vec<_>>(),
    );
    let mut rng = rng::stream(config.seed, "lm-batches");
    let mut order: Vec<usize> = (0..train.len()).filter(|&i| train[i].len() >= 2).collect();
    let steps_per_epoch = pack_batches(train, &order, tc.batch_tokens).len();
    let total = steps_per_epoch * tc.epochs;
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let batches = pack_batches(train, &order, tc.batch_tokens);
        for batch in &batches {
            let docs: Vec<&[u32]> = batch.iter().map(|&i| train[i].as_slice()).collect();
            let mut g = Graph::new();
            let vars: Vec<Var> = model.params.drain(..).map(|p| g.param(p)).collect();
            let (logits, _) = graph_forward(&mut g, &vars, &config, &docs)?;
            let loss = g.cross_entropy(logits, &next_token_targets(&docs))?;
            let value = g.value(loss).data()[0];
            g.backward(loss)?;
            model.params = vars.iter().map(|&v| g.take(v)).collect();
            if !value.is_finite() {
                return Err(Error::Training { step, loss: value });
            }
            opt.set_lr(lr_at(tc, step, total));
            let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
            opt.step(&mut refs)?;
            model.params.iter_mut().for_each(Tensor::clear_grad);
            sum += value;
            step += 1;
        }
        log.train_loss.push(sum / batches.len() as f64);
        if !heldout.is_empty() {
            log.heldout_loss.push(mean_loss(&model, heldout)?);
        }
        log::info!(
            "lm epoch {}: train {:.4}, held-out {:.4}",
            epoch + 1,
            log.train_loss[epoch],
            log.heldout_loss.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> LmConfig {
        LmConfig {
            vocab_size: 11,
            d_emb: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            context_length: CONTEXT_LENGTH,
            seed: 5,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let mut c = tiny_config();
        c.context_length = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let model = LmModel::init(tiny_config()).unwrap();
        let docs = vec![vec![0, 3, 4, 5, 6, 7, 8], vec![0, 9, 10, 2]];
        let loss = mean_loss(&model, &docs).unwrap();
        let uniform = (11f64).ln();
        assert!(
            (loss - uniform).abs() < 0.05 * uniform,
            "{loss} vs {uniform}"
        );
    }

    #[test]
    fn graph_and_engine_logits_agree() {
        let model = LmModel::init(tiny_config()).unwrap();
        let doc: Vec<u32> = vec![0, 4, 2, 9, 9, 1];
        let mut g = Graph::new();
        let vars: Vec<Var> = model.params.iter().map(|p| g.constant(p.clone())).collect();
        let (logits, resid) = graph_forward(&mut g, &vars, model.config(), &[&doc]).unwrap();
        let (engine_logits, hooks) =
            forward_with_hooks(&model, &doc, &[HookPoint { layer: 1 }]).unwrap();
        for (a, b) in g.value(logits).data().iter().zip(engine_logits.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let acts = &hooks[&HookPoint { layer: 1 }];
        for (t, act) in acts.iter().enumerate() {
            for (a, b) in act.vector.data().iter().zip(g.value(resid[1]).row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn training_reduces_loss_on_repeated_pattern() {
        let docs: Vec<Vec<u32>> = (0..20).map(|i| vec![0, 3 + (i % 2), 5, 6, 7, 8]).collect();
        let tc = TrainConfig {
            epochs: 15,
            lr: 1e-2,
            warmup_steps: 5,
            batch_tokens: 24,
            min_lr_ratio: 0.1,
        };
        let (_, log) = train_lm(tiny_config(), &docs, &docs[..4], &tc).unwrap();
        let last = *log.heldout_loss.last().unwrap();
        assert!(last < 0.7 * log.initial_heldout_loss, "{log:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.bin");
        let model = LmModel::init(tiny_config()).unwrap();
        model.save(&path).unwrap();
        assert_eq!(LmModel::load(&path).unwrap(), model);
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let tc = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            min_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((lr_at(&tc, 0, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(&tc, 9, 100) - 1.0).abs() < 1e-12);
        assert!((lr_at(&tc, 100, 100) - 0.1).abs() < 1e-12);
        assert!(lr_at(&tc, 50, 100) < lr_at(&tc, 20, 100));
    }
}
