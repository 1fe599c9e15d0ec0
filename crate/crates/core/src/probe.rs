// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes for PII presence and layer selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::actcache::{harvest_layers, mean_pool};
use crate::corpus::CorpusDoc;
use crate::error::{Error, Result};
use crate::lm::LmModel;
use crate::numerics::{kernels, Tensor};
use crate::rng;

/// Coordinate system a probe was trained in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeSpace {
    Residual,
    LatentFull,
    /// A subset of SAE latents, sorted ascending.
    LatentTopk(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub theta: Tensor,
    pub bias: f64,
    pub space: ProbeSpace,
}

impl ProbeModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        kernels::dot(self.theta.data(), x) + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.logit(x) > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub val_loss: f64,
    /// Percent in `[0, 100]`.
    pub val_acc: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            max_epochs: 1000,
            patience: 10,
            val_fraction: 0.2,
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        self.t += 1;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Mean logistic loss and accuracy (percent) of `(w, b)` on rows `idx`.
fn evaluate(features: &[(Tensor, bool)], idx: &[usize], w: &[f64], b: f64) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0;
    for &i in idx {
        let (x, y) = &features[i];
        let z = kernels::dot(w, x.data()) + b;
        let yf = f64::from(u8::from(*y));
        loss += kernels::softplus(z) - yf * z;
        if (z > 0.0) == *y {
            correct += 1;
        }
    }
    let n = idx.len() as f64;
    (loss / n, 100.0 * correct as f64 / n)
}

/// Stratified split: `val_fraction` of each class goes to validation.
fn stratified_split(
    features: &[(Tensor, bool)],
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::stream(seed, "probe-split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..features.len())
            .filter(|&i| features[i].1 == class)
            .collect();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64) * val_fraction).round().max(1.0) as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Logistic regression with a bias, trained full-batch on a stratified
/// split and early-stopped on validation loss. Returns the parameters with
/// the best validation loss.
pub fn train_probe(
    features: &[(Tensor, bool)],
    space: ProbeSpace,
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, ProbeMetrics)> {
    let positives = features.iter().filter(|f| f.1).count();
    if positives < 2 || features.len() - positives < 2 {
        return Err(Error::Data(format!(
            "probe needs both classes with at least two examples, got {positives} positive of {}",
            features.len()
        )));
    }
    let d = features[0].0.numel();
    if features.iter().any(|f| f.0.numel() != d) {
        return Err(Error::Shape(
            "probe features have differing dimensions".into(),
        ));
    }
    if let ProbeSpace::LatentTopk(idx) = &space {
        if idx.len() != d || idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!(
                "top-k probe needs {d} sorted unique indices, got {idx:?}"
            )));
        }
    }
    let (train, val) = stratified_split(features, cfg.val_fraction, split_seed);
    // theta followed by the bias.
    let mut params = vec![0.0; d + 1];
    let mut opt = Moments::new(d + 1);
    let mut grad = vec![0.0; d + 1];
    let (mut best_loss, _) = evaluate(features, &val, &params[..d], 0.0);
    let mut best = params.clone();
    let mut since_best = 0;
    let mut epochs = 0;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in &train {
            let (x, y) = &features[i];
            let z = kernels::dot(&params[..d], x.data()) + params[d];
            let r = kernels::sigmoid(z) - f64::from(u8::from(*y));
            for (g, xv) in grad[..d].iter_mut().zip(x.data()) {
                *g += r * xv;
            }
            grad[d] += r;
        }
        let n = train.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        opt.update(&mut params, &grad, cfg.lr);
        let (loss, _) = evaluate(features, &val, &params[..d], params[d]);
        if !loss.is_finite() {
            return Err(Error::Training { step: epochs, loss });
        }
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (val_loss, val_acc) = evaluate(features, &val, &best[..d], best[d]);
    let model = ProbeModel {
        theta: Tensor::vector(best[..d].to_vec())?,
        bias: best[d],
        space,
    };
    Ok((
        model,
        ProbeMetrics {
            val_loss,
            val_acc,
            epochs,
        },
    ))
}

/// Unit-norm steering direction `theta / ‖theta‖`.
pub fn probe_direction(p: &ProbeModel) -> Result<Tensor> {
    let norm = p.theta.l2_norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateProbe);
    }
    Tensor::vector(p.theta.data().iter().map(|x| x / norm).collect())
}

// ---------------------------------------------------------------------------
// Layer selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub rows: Vec<LayerRow>,
    pub selected_layer: usize,
}

impl LayerReport {
    /// Aligned text table: block, test loss, test accuracy.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>10} {:>10}\n", "block", "test loss", "test acc");
        for r in &self.rows {
            let mark = if r.layer == self.selected_layer {
                " *"
            } else {
                ""
            };
            s.push_str(&format!(
                "{:<8} {:>10.4} {:>9.3}%{mark}\n",
                format!("block{}", r.layer),
                r.val_loss,
                r.val_acc
            ));
        }
        s
    }

    /// One JSON object per layer.
    pub fn records(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Trains one probe per layer on the supplied features; the selected layer
/// has the highest validation accuracy, ties going to the lowest layer.
pub fn probe_layers(
    per_layer: &[Vec<(Tensor, bool)>],
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<(LayerReport, Vec<ProbeModel>)> {
    if per_layer.is_empty() {
        return Err(Error::Data("no layers to probe".into()));
    }
    let mut rows = Vec::with_capacity(per_layer.len());
    let mut probes = Vec::with_capacity(per_layer.len());
    for (layer, features) in per_layer.iter().enumerate() {
        let (p, m) = train_probe(features, ProbeSpace::Residual, split_seed, cfg)?;
        rows.push(LayerRow {
            layer,
            val_loss: m.val_loss,
            val_acc: m.val_acc,
        });
        probes.push(p);
    }
    let mut selected = 0;
    for r in &rows {
        if r.val_acc > rows[selected].val_acc {
            selected = r.layer;
        }
    }
    Ok((
        LayerReport {
            rows,
            selected_layer: selected,
        },
        probes,
    ))
}

/// Mean-pooled residual features of `docs` at every layer.
pub fn pooled_features(
    model: &LmModel,
    docs: &[(&CorpusDoc, bool)],
) -> Result<Vec<Vec<(Tensor, bool)>>> {
    let layers: Vec<usize> = (0..model.config().n_layers).collect();
    let refs: Vec<&CorpusDoc> = docs.iter().map(|d| d.0).collect();
    let caches = harvest_layers(model, &refs, &layers)?;
    caches
        .iter()
        .map(|c| {
            docs.iter()
                .map(|(d, y)| Ok((mean_pool(c, d.id)?, *y)))
                .collect()
        })
        .collect()
}

/// Probes every layer of `model` on the labelled probing documents.
pub fn probe_all_layers(
    model: &LmModel,
    d_prob: &[(&CorpusDoc, bool)],
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<(LayerReport, Vec<ProbeModel>)> {
    if d_prob.is_empty() {
        return Err(Error::Data("empty probing set".into()));
    }
    probe_layers(&pooled_features(model, d_prob)?, split_seed, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_set(n: usize, d: usize, shift: f64, seed: u64) -> Vec<(Tensor, bool)> {
        let mut rng = rng::stream(seed, "test");
        (0..n)
            .map(|i| {
                let y = i % 2 == 0;
                let mut v: Vec<f64> = (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if y {
                    v[0] += shift;
                }
                (Tensor::vector(v).unwrap(), y)
            })
            .collect()
    }

    #[test]
    fn separable_set_reaches_full_accuracy() {
        let data: Vec<(Tensor, bool)> = (0..100)
            .map(|i| {
                let y = i % 2 == 0;
                let x = (i as f64) * 0.01;
                let v = if y {
                    vec![1.0 + x, 2.0]
                } else {
                    vec![-1.0 - x, -0.5]
                };
                (Tensor::vector(v).unwrap(), y)
            })
            .collect();
        let (p, m) = train_probe(&data, ProbeSpace::Residual, 0, &ProbeConfig::default()).unwrap();
        assert_eq!(m.val_acc, 100.0);
        assert!(p.predict(&[3.0, 1.0]));
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut data = gaussian_set(4000, 2, 0.0, 1);
        let mut rng = rng::stream(2, "labels");
        for d in &mut data {
            d.1 = rng.gen_bool(0.5);
        }
        let (_, m) = train_probe(&data, ProbeSpace::Residual, 0, &ProbeConfig::default()).unwrap();
        assert!((m.val_acc - 50.0).abs() <= 5.0, "{}", m.val_acc);
    }

    #[test]
    fn single_class_is_data_error() {
        let data: Vec<(Tensor, bool)> = (0..10)
            .map(|i| (Tensor::vector(vec![i as f64]).unwrap(), true))
            .collect();
        assert!(matches!(
            train_probe(&data, ProbeSpace::Residual, 0, &ProbeConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn direction_is_unit_and_scale_free() {
        let p = |t: Vec<f64>| ProbeModel {
            theta: Tensor::vector(t).unwrap(),
            bias: 0.5,
            space: ProbeSpace::Residual,
        };
        assert_eq!(
            probe_direction(&p(vec![3.0, 4.0])).unwrap().data(),
            &[0.6, 0.8]
        );
        let a = probe_direction(&p(vec![0.3, -1.7, 2.2])).unwrap();
        let b = probe_direction(&p(vec![3.0, -17.0, 22.0])).unwrap();
        assert!((a.l2_norm() - 1.0).abs() < 1e-12);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            probe_direction(&p(vec![0.0, 0.0])),
            Err(Error::DegenerateProbe)
        ));
    }

    #[test]
    fn planted_signal_layer_is_selected() {
        let noise = |s| gaussian_set(400, 4, 0.0, s);
        let layers = vec![noise(1), noise(2), gaussian_set(400, 4, 4.0, 3), noise(4)];
        let (report, _) = probe_layers(&layers, 0, &ProbeConfig::default()).unwrap();
        assert_eq!(report.selected_layer, 2);
        assert!(report.table().contains("block2"));
        assert_eq!(report.records().unwrap().lines().count(), 4);
    }

    #[test]
    fn identical_layers_select_first() {
        let data = gaussian_set(200, 3, 2.0, 7);
        let layers = vec![data.clone(), data.clone(), data];
        let (report, _) = probe_layers(&layers, 0, &ProbeConfig::default()).unwrap();
        assert_eq!(report.selected_layer, 0);
    }

    #[test]
    fn topk_space_requires_matching_indices() {
        let data = gaussian_set(20, 2, 3.0, 1);
        let bad = ProbeSpace::LatentTopk(vec![5, 1]);
        assert!(matches!(
            train_probe(&data, bad, 0, &ProbeConfig::default()),
            Err(Error::Parameter(_))
        ));
        assert!(train_probe(
            &data,
            ProbeSpace::LatentTopk(vec![1, 5]),
            0,
            &ProbeConfig::default()
        )
        .is_ok());
    }
}
