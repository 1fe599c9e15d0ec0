// SPDX-License-Identifier: MIT OR Apache-2.0

//! Incremental inference with cached keys and values.
//!
//! Every block runs through one routine whether it processes a whole prompt
//! or a single new token, so hooked and unhooked passes, and identity and
//! absent interventions, produce bit-identical results.

use std::collections::BTreeMap;

use super::{BlockParam, HookPoint, LmModel, ResidualActivation};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};

/// Rewrites the residual activation of the newest token after one block.
pub trait Interventor {
    /// Block whose output is rewritten.
    fn layer(&self) -> usize;

    fn apply(&self, activation: &mut [f64]);

    /// Also rewrite prompt positions and keep the rewritten values in the
    /// cache. Off by default: only the newest token at each step is changed
    /// and later steps attend to clean keys and values.
    fn intervene_prefix(&self) -> bool {
        false
    }
}

/// A model plus the key/value cache of the tokens consumed so far.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m LmModel,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m LmModel) -> Self {
        let c = model.config();
        let size = c.context_length * c.d_emb;
        Self {
            model,
            keys: vec![vec![0.0; size]; c.n_layers],
            values: vec![vec![0.0; size]; c.n_layers],
            len: 0,
        }
    }

    /// Number of tokens consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check_room(&self, n: usize) -> Result<()> {
        let ctx = self.model.config().context_length;
        if self.len + n > ctx {
            return Err(Error::Input(format!(
                "{} tokens exceed context length {ctx}",
                self.len + n
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.model.config().d_emb;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            let te = self.model.tok_emb().row(t as usize);
            let pe = self.model.pos_emb().row(self.len + i);
            x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        x
    }

    /// Runs block `l` over `x` (`t` rows at positions `p0..p0+t`), writing
    /// their keys and values into the cache.
    fn run_block(&mut self, l: usize, x: &mut [f64], p0: usize) {
        let m = self.model;
        let c = m.config();
        let (d, f, heads) = (c.d_emb, c.d_ff, c.n_heads);
        let t = x.len() / d;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = |b: BlockParam| m.block(l, b).data();

        let mut h = vec![0.0; t * d];
        for (xr, hr) in x.chunks_exact(d).zip(h.chunks_exact_mut(d)) {
            kernels::layer_norm_row(xr, p(BlockParam::Ln1Gain), p(BlockParam::Ln1Bias), hr);
        }
        let mut qkv = vec![0.0; t * 3 * d];
        gemm_bias(
            t,
            d,
            3 * d,
            &h,
            p(BlockParam::Qkv),
            p(BlockParam::QkvBias),
            &mut qkv,
        );
        for i in 0..t {
            let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
            let at = (p0 + i) * d;
            self.keys[l][at..at + d].copy_from_slice(&row[d..2 * d]);
            self.values[l][at..at + d].copy_from_slice(&row[2 * d..]);
        }
        let (keys, values) = (&self.keys[l], &self.values[l]);
        let mut att = vec![0.0; t * d];
        let mut scores = Vec::with_capacity(p0 + t);
        for i in 0..t {
            let pos = p0 + i;
            for hd in 0..heads {
                let q = &qkv[i * 3 * d + hd * dh..][..dh];
                scores.clear();
                for j in 0..=pos {
                    scores.push(kernels::dot(q, &keys[j * d + hd * dh..][..dh]) * scale);
                }
                kernels::softmax_in_place(&mut scores);
                let out = &mut att[i * d + hd * dh..][..dh];
                for (j, &pj) in scores.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(&values[j * d + hd * dh..][..dh]) {
                        *o += pj * v;
                    }
                }
            }
        }
        let mut o = vec![0.0; t * d];
        gemm_bias(
            t,
            d,
            d,
            &att,
            p(BlockParam::Out),
            p(BlockParam::OutBias),
            &mut o,
        );
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        for (xr, hr) in x.chunks_exact(d).zip(h.chunks_exact_mut(d)) {
            kernels::layer_norm_row(xr, p(BlockParam::Ln2Gain), p(BlockParam::Ln2Bias), hr);
        }
        let mut u = vec![0.0; t * f];
        gemm_bias(
            t,
            d,
            f,
            &h,
            p(BlockParam::Up),
            p(BlockParam::UpBias),
            &mut u,
        );
        u.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        gemm_bias(
            t,
            f,
            d,
            &u,
            p(BlockParam::Down),
            p(BlockParam::DownBias),
            &mut o,
        );
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.model.config();
        let (d, v) = (c.d_emb, c.vocab_size);
        let t = x.len() / d;
        let (g, b) = self.model.final_norm();
        let mut h = vec![0.0; t * d];
        for (xr, hr) in x.chunks_exact(d).zip(h.chunks_exact_mut(d)) {
            kernels::layer_norm_row(xr, g.data(), b.data(), hr);
        }
        let mut out = vec![0.0; t * v];
        kernels::gemm(
            t,
            d,
            v,
            &h,
            false,
            self.model.tok_emb().data(),
            true,
            &mut out,
            0.0,
        );
        out
    }

    /// Consumes `tokens`, returning logits for each (`t×vocab`) and, when
    /// `capture` is set, the post-block residuals for every layer (`t×d`).
    ///
    /// An interventor is applied here only when it rewrites the prefix.
    pub fn prefill(
        &mut self,
        tokens: &[u32],
        interventor: Option<&dyn Interventor>,
        capture: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if tokens.is_empty() {
            return Err(Error::Input("prefill with no tokens".into()));
        }
        self.check_room(tokens.len())?;
        self.model.check_tokens(tokens)?;
        let iv = interventor.filter(|iv| iv.intervene_prefix());
        if let Some(iv) = iv {
            check_layer(self.model, iv.layer())?;
        }
        let c = *self.model.config();
        let t = tokens.len();
        let p0 = self.len;
        let mut x = self.embed(tokens);
        let mut resid = Vec::new();
        for l in 0..c.n_layers {
            self.run_block(l, &mut x, p0);
            if let Some(iv) = iv.filter(|iv| iv.layer() == l) {
                x.chunks_exact_mut(c.d_emb).for_each(|r| iv.apply(r));
            }
            if capture {
                resid.push(Tensor::from_parts(vec![t, c.d_emb], x.clone()));
            }
        }
        self.len += t;
        let logits = Tensor::from_parts(vec![t, c.vocab_size], self.logits(&x));
        Ok((logits, resid))
    }

    /// Consumes one token and returns next-token logits.
    ///
    /// With an interventor the token's activation after its layer is
    /// rewritten and the remaining blocks run on the rewritten vector to
    /// produce the logits, while the cache keeps the clean keys and values
    /// (unless the interventor rewrites the prefix too).
    pub fn step(&mut self, token: u32, interventor: Option<&dyn Interventor>) -> Result<Vec<f64>> {
        self.check_room(1)?;
        self.model.check_tokens(&[token])?;
        let c = *self.model.config();
        let pos = self.len;
        let mut x = self.embed(&[token]);
        let Some(iv) = interventor else {
            for l in 0..c.n_layers {
                self.run_block(l, &mut x, pos);
            }
            self.len += 1;
            return Ok(self.logits(&x));
        };
        let at = check_layer(self.model, iv.layer())?;
        for l in 0..=at {
            self.run_block(l, &mut x, pos);
        }
        let mut dirty = x.clone();
        iv.apply(&mut dirty);
        if iv.intervene_prefix() {
            for l in at + 1..c.n_layers {
                self.run_block(l, &mut dirty, pos);
            }
            self.len += 1;
            return Ok(self.logits(&dirty));
        }
        for l in at + 1..c.n_layers {
            self.run_block(l, &mut x, pos);
        }
        // Rerun the upper blocks on the rewritten vector, then restore the
        // clean cache entries it overwrote.
        let d = c.d_emb;
        let saved: Vec<(Vec<f64>, Vec<f64>)> = (at + 1..c.n_layers)
            .map(|l| {
                (
                    self.keys[l][pos * d..(pos + 1) * d].to_vec(),
                    self.values[l][pos * d..(pos + 1) * d].to_vec(),
                )
            })
            .collect();
        for l in at + 1..c.n_layers {
            self.run_block(l, &mut dirty, pos);
        }
        for (l, (k, v)) in (at + 1..c.n_layers).zip(saved) {
            self.keys[l][pos * d..(pos + 1) * d].copy_from_slice(&k);
            self.values[l][pos * d..(pos + 1) * d].copy_from_slice(&v);
        }
        self.len += 1;
        Ok(self.logits(&dirty))
    }
}

fn gemm_bias(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    kernels::gemm(m, k, n, a, false, w, false, out, 1.0);
}

fn check_layer(model: &LmModel, layer: usize) -> Result<usize> {
    let n = model.config().n_layers;
    if layer >= n {
        return Err(Error::Parameter(format!(
            "layer {layer} out of range for {n} layers"
        )));
    }
    Ok(layer)
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Logits for every position plus the residual activations at `hooks`.
pub fn forward_with_hooks(
    model: &LmModel,
    tokens: &[u32],
    hooks: &[HookPoint],
) -> Result<(Tensor, BTreeMap<HookPoint, Vec<ResidualActivation>>)> {
    for h in hooks {
        check_layer(model, h.layer)?;
    }
    let mut s = Session::new(model);
    let (logits, resid) = s.prefill(tokens, None, !hooks.is_empty())?;
    let mut out = BTreeMap::new();
    for &h in hooks {
        let m = &resid[h.layer];
        let acts = (0..tokens.len())
            .map(|t| ResidualActivation {
                layer: h.layer,
                token_index: t,
                vector: Tensor::from_parts(vec![m.cols()], m.row(t).to_vec()),
            })
            .collect();
        out.insert(h, acts);
    }
    Ok((logits, out))
}

/// Greedy continuation of `prompt` (which should start with `<bos>`).
///
/// Stops after `max_new` tokens or when prompt plus continuation fill the
/// context. At each step
/// the newest token's activation passes through `interventor`.
pub fn generate(
    model: &LmModel,
    prompt: &[u32],
    max_new: usize,
    interventor: Option<&dyn Interventor>,
) -> Result<Vec<u32>> {
    let (&last, head) = prompt
        .split_last()
        .ok_or_else(|| Error::Input("empty prompt".into()))?;
    model.check_tokens(prompt)?;
    let mut s = Session::new(model);
    if !head.is_empty() {
        s.prefill(head, interventor, false)?;
    }
    let mut out = Vec::with_capacity(max_new);
    let mut cur = last;
    while out.len() < max_new && prompt.len() + out.len() < model.config().context_length {
        let logits = s.step(cur, interventor)?;
        cur = kernels::argmax(&logits) as u32;
        out.push(cur);
    }
    Ok(out)
}

/// Teacher-forced log-probabilities `log p(tokens[t+1] | tokens[..=t])`.
///
/// With an interventor each position is processed as a generation step, so
/// only that position's activation is rewritten when it predicts.
pub fn score_tokens(
    model: &LmModel,
    tokens: &[u32],
    interventor: Option<&dyn Interventor>,
) -> Result<Vec<f64>> {
    model.check_tokens(tokens)?;
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    let v = model.config().vocab_size;
    let mut s = Session::new(model);
    let rows: Vec<Vec<f64>> = match interventor {
        None => {
            let (logits, _) = s.prefill(&tokens[..tokens.len() - 1], None, false)?;
            logits.data().chunks_exact(v).map(<[f64]>::to_vec).collect()
        }
        Some(iv) => tokens[..tokens.len() - 1]
            .iter()
            .map(|&t| s.step(t, Some(iv)))
            .collect::<Result<_>>()?,
    };
    Ok(rows
        .iter()
        .zip(&tokens[1..])
        .map(|(row, &next)| row[next as usize] - kernels::log_sum_exp(row))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;

    struct Scale(usize, f64, bool);

    impl Interventor for Scale {
        fn layer(&self) -> usize {
            self.0
        }
        fn apply(&self, a: &mut [f64]) {
            a.iter_mut().for_each(|x| *x *= self.1);
        }
        fn intervene_prefix(&self) -> bool {
            self.2
        }
    }

    fn model() -> LmModel {
        let mut cfg = tiny_config();
        cfg.seed = 17;
        let mut m = LmModel::init(cfg).unwrap();
        // Larger weights give a less flat distribution to decode from.
        for p in &mut m.params {
            p.data_mut().iter_mut().for_each(|x| *x *= 20.0);
        }
        m
    }

    #[test]
    fn hooks_do_not_change_logits() {
        let m = model();
        let toks = [0, 3, 4, 5];
        let (a, _) = forward_with_hooks(&m, &toks, &[]).unwrap();
        let (b, acts) =
            forward_with_hooks(&m, &toks, &[HookPoint { layer: 0 }, HookPoint { layer: 1 }])
                .unwrap();
        assert_eq!(a, b);
        assert_eq!(acts[&HookPoint { layer: 0 }].len(), 4);
        let (_, again) =
            forward_with_hooks(&m, &toks, &[HookPoint { layer: 0 }, HookPoint { layer: 1 }])
                .unwrap();
        assert_eq!(acts, again);
    }

    #[test]
    fn incremental_steps_match_full_forward() {
        let m = model();
        let toks = [0, 3, 4, 5, 9, 2];
        let (full, _) = forward_with_hooks(&m, &toks, &[]).unwrap();
        let mut s = Session::new(&m);
        for (t, &tok) in toks.iter().enumerate() {
            let row = s.step(tok, None).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_intervention_is_bit_exact() {
        let m = model();
        let prompt = [0, 3, 4];
        let base = generate(&m, &prompt, 10, None).unwrap();
        for layer in 0..2 {
            let id = Scale(layer, 1.0, false);
            assert_eq!(generate(&m, &prompt, 10, Some(&id)).unwrap(), base);
        }
        let plain = score_tokens(&m, &[0, 3, 4, 5], None).unwrap();
        let with_id = score_tokens(&m, &[0, 3, 4, 5], Some(&Scale(1, 1.0, false))).unwrap();
        for (a, b) in plain.iter().zip(&with_id) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zeroing_changes_output_and_matches_recompute() {
        let m = model();
        let zero = Scale(0, 0.0, false);
        let prompt = [0u32, 3, 4];
        let out = generate(&m, &prompt, 5, Some(&zero)).unwrap();
        // Oracle: recompute every step from scratch with only the newest
        // position rewritten.
        let mut seq = prompt.to_vec();
        for &tok in &out {
            let mut s = Session::new(&m);
            s.prefill(&seq[..seq.len() - 1], None, false).unwrap();
            let logits = s.step(*seq.last().unwrap(), Some(&zero)).unwrap();
            assert_eq!(kernels::argmax(&logits) as u32, tok);
            seq.push(tok);
        }
        let mut differs = false;
        for a in 2..11u32 {
            let p = [0, a, 4];
            differs |=
                generate(&m, &p, 5, None).unwrap() != generate(&m, &p, 5, Some(&zero)).unwrap();
        }
        assert!(differs);
    }

    #[test]
    fn intervention_leaves_lower_layers_untouched() {
        let m = model();
        let mut a = Session::new(&m);
        let mut b = Session::new(&m);
        a.prefill(&[0, 3], None, false).unwrap();
        b.prefill(&[0, 3], None, false).unwrap();
        a.step(4, None).unwrap();
        b.step(4, Some(&Scale(1, 0.0, false))).unwrap();
        assert_eq!(a.keys, b.keys);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn generation_is_prefix_invariant() {
        let m = model();
        let out = generate(&m, &[0, 3], 6, None).unwrap();
        let mut longer = vec![0, 3];
        longer.extend_from_slice(&out[..3]);
        assert_eq!(generate(&m, &longer, 3, None).unwrap(), out[3..]);
    }

    #[test]
    fn prefix_flag_changes_cached_state() {
        let m = model();
        let mut s = Session::new(&m);
        s.prefill(&[0, 3], Some(&Scale(0, 0.0, true)), false)
            .unwrap();
        let mut clean = Session::new(&m);
        clean
            .prefill(&[0, 3], Some(&Scale(0, 0.0, false)), false)
            .unwrap();
        assert_ne!(s.keys[1], clean.keys[1]);
        assert_eq!(s.keys[0], clean.keys[0]);
    }

    #[test]
    fn limits_and_errors() {
        let m = model();
        assert!(generate(&m, &[0, 3], 0, None).unwrap().is_empty());
        assert!(matches!(
            generate(&m, &[0, 99], 1, None),
            Err(Error::Input(_))
        ));
        assert!(matches!(generate(&m, &[], 1, None), Err(Error::Input(_))));
        let long = vec![3u32; 65];
        assert!(matches!(
            forward_with_hooks(&m, &long, &[]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            forward_with_hooks(&m, &[0], &[HookPoint { layer: 2 }]),
            Err(Error::Parameter(_))
        ));
        let full = vec![3u32; 60];
        assert_eq!(generate(&m, &full, 16, None).unwrap().len(), 4);
    }
}
