// SPDX-License-Identifier: MIT OR Apache-2.0

//! Defenses as [`Interventor`]s: latent or neuron ablation, and steering
//! along probe, top-k probe or mean-difference directions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Interventor;
use crate::numerics::Tensor;
use crate::probe::{probe_direction, train_probe, ProbeConfig, ProbeSpace};
use crate::sae::{decode, encode, FeatureRanking, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Ablation,
    SteerProbe,
    SteerTopkProbe,
    SteerMeanDiff,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::None => "No defense",
            Method::Ablation => "Ablation",
            Method::SteerProbe => "Steering (probe)",
            Method::SteerTopkProbe => "Steering (top-k probe)",
            Method::SteerMeanDiff => "Steering (mean diff)",
        }
    }

    pub fn source(self) -> Option<SteeringSource> {
        match self {
            Method::SteerProbe => Some(SteeringSource::Probe),
            Method::SteerTopkProbe => Some(SteeringSource::TopkProbe),
            Method::SteerMeanDiff => Some(SteeringSource::MeanDiff),
            Method::None | Method::Ablation => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub use_sae: bool,
    /// Overrides the probed layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Fraction of the ranking and probing documents used to build the defense.
    #[serde(default = "one")]
    pub data_fraction: f64,
    #[serde(default)]
    pub intervene_prefix: bool,
}

impl InterventionSpec {
    pub fn new(method: Method, use_sae: bool) -> Self {
        Self {
            method,
            k: None,
            alpha: None,
            use_sae,
            layer: None,
            data_fraction: 1.0,
            intervene_prefix: false,
        }
    }

    pub fn ablation(k: usize, use_sae: bool) -> Self {
        Self {
            k: Some(k),
            ..Self::new(Method::Ablation, use_sae)
        }
    }

    pub fn steering(method: Method, alpha: f64, k: Option<usize>, use_sae: bool) -> Self {
        Self {
            alpha: Some(alpha),
            k,
            ..Self::new(method, use_sae)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need_k = matches!(self.method, Method::Ablation | Method::SteerTopkProbe);
        if need_k && self.k.is_none_or(|k| k == 0) {
            return Err(Error::Config(format!("{} needs a positive k", self.method)));
        }
        if self.method.source().is_some() && self.alpha.is_none_or(|a| !a.is_finite()) {
            return Err(Error::Config(format!(
                "{} needs a finite alpha",
                self.method
            )));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction must be in (0, 1], got {}",
                self.data_fraction
            )));
        }
        Ok(())
    }

    /// Intervention strength used to order rows within a method.
    pub fn strength(&self) -> f64 {
        match self.method {
            Method::None => 0.0,
            Method::Ablation => self.k.unwrap_or(0) as f64,
            _ => self.alpha.unwrap_or(0.0).abs(),
        }
    }
}

// ---------------------------------------------------------------------------
// Latent operations
// ---------------------------------------------------------------------------

/// Zeroes `indices` of `z`.
pub fn ablate(z: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let mut out = z.data().to_vec();
    for &i in indices {
        *out.get_mut(i).ok_or_else(|| {
            Error::Parameter(format!("ablation index {i} out of range {}", z.numel()))
        })? = 0.0;
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// `z + alpha * v` on the nonzero coordinates of `z` only.
pub fn steer(z: &Tensor, v: &Tensor, alpha: f64) -> Result<Tensor> {
    if z.shape() != v.shape() {
        return Err(Error::Dimension {
            op: "steer",
            lhs: z.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let out = z
        .data()
        .iter()
        .zip(v.data())
        .map(|(&zi, &vi)| if zi != 0.0 { zi + alpha * vi } else { zi })
        .collect();
    Tensor::new(z.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringSource {
    Probe,
    TopkProbe,
    MeanDiff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub v: Tensor,
    pub source: SteeringSource,
}

/// Builds a steering direction from labelled pooled features (latents or
/// residuals). `topk_indices` is required for [`SteeringSource::TopkProbe`].
pub fn build_steering_vector(
    source: SteeringSource,
    features: &[(Tensor, bool)],
    topk_indices: Option<&[usize]>,
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<SteeringVector> {
    let pos = features.iter().filter(|f| f.1).count();
    if pos == 0 || pos == features.len() {
        return Err(Error::Data("steering vector needs both classes".into()));
    }
    let dim = features[0].0.numel();
    let v = match source {
        SteeringSource::Probe => {
            let (p, _) = train_probe(features, ProbeSpace::Residual, split_seed, cfg)?;
            probe_direction(&p)?
        }
        SteeringSource::TopkProbe => {
            let mut idx = topk_indices
                .ok_or_else(|| Error::Config("top-k probe needs ranked indices".into()))?
                .to_vec();
            idx.sort_unstable();
            idx.dedup();
            if let Some(&bad) = idx.iter().find(|&&i| i >= dim) {
                return Err(Error::Parameter(format!("index {bad} out of range {dim}")));
            }
            let restricted: Vec<(Tensor, bool)> = features
                .iter()
                .map(|(x, y)| {
                    Ok((
                        Tensor::vector(idx.iter().map(|&i| x.data()[i]).collect())?,
                        *y,
                    ))
                })
                .collect::<Result<_>>()?;
            let (p, _) = train_probe(
                &restricted,
                ProbeSpace::LatentTopk(idx.clone()),
                split_seed,
                cfg,
            )?;
            let unit = probe_direction(&p)?;
            let mut full = vec![0.0; dim];
            for (&i, &x) in idx.iter().zip(unit.data()) {
                full[i] = x;
            }
            Tensor::vector(full)?
        }
        SteeringSource::MeanDiff => {
            let mut diff = vec![0.0; dim];
            let neg = features.len() - pos;
            for (x, y) in features {
                let w = if *y {
                    1.0 / pos as f64
                } else {
                    -1.0 / neg as f64
                };
                diff.iter_mut().zip(x.data()).for_each(|(d, v)| *d += w * v);
            }
            Tensor::vector(diff)?
        }
    };
    Ok(SteeringVector { v, source })
}

/// Mean SAE latent of each document's token activations.
pub fn pooled_latents(params: &SaeParams, rows: &[f64]) -> Result<Tensor> {
    let d = params.d_emb();
    let n = rows.len() / d;
    if n == 0 {
        return Err(Error::Data("no activations to pool".into()));
    }
    let mut acc = vec![0.0; params.h];
    for a in rows.chunks_exact(d) {
        let z = encode(params, a)?;
        acc.iter_mut().zip(z.data()).for_each(|(s, v)| *s += v);
    }
    acc.iter_mut().for_each(|s| *s /= n as f64);
    Tensor::vector(acc)
}

// ---------------------------------------------------------------------------
// Interventors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Action {
    Identity,
    Ablate(Vec<usize>),
    Steer(Tensor, f64),
}

/// A configured defense applied at one layer.
#[derive(Debug, Clone)]
pub struct Defense {
    layer: usize,
    prefix: bool,
    sae: Option<SaeParams>,
    action: Action,
}

impl Defense {
    /// Applies the defense to one activation vector.
    pub fn transform(&self, a: &[f64]) -> Result<Vec<f64>> {
        let Some(sae) = &self.sae else {
            let x = Tensor::vector(a.to_vec())?;
            let out = match &self.action {
                Action::Identity => x,
                Action::Ablate(idx) => ablate(&x, idx)?,
                Action::Steer(v, alpha) => steer(&x, v, *alpha)?,
            };
            return Ok(out.into_data());
        };
        let z = encode(sae, a)?;
        let z = match &self.action {
            Action::Identity => z,
            Action::Ablate(idx) => ablate(&z, idx)?,
            Action::Steer(v, alpha) => steer(&z, v, *alpha)?,
        };
        Ok(decode(sae, z.data())?.into_data())
    }
}

impl Interventor for Defense {
    fn layer(&self) -> usize {
        self.layer
    }

    fn apply(&self, activation: &mut [f64]) {
        // Inputs come from the model's own forward pass, so they are finite
        // and sized; a failure here is a construction bug.
        let out = self
            .transform(activation)
            .expect("defense was validated at construction");
        activation.copy_from_slice(&out);
    }

    fn intervene_prefix(&self) -> bool {
        self.prefix
    }
}

/// Builds the interventor for `spec` at `layer`.
///
/// `ranking` must rank SAE latents when `spec.use_sae` and residual
/// coordinates otherwise; likewise `vector` lives in the matching space.
pub fn make_interventor(
    spec: &InterventionSpec,
    layer: usize,
    sae: Option<&SaeParams>,
    vector: Option<&SteeringVector>,
    ranking: Option<&FeatureRanking>,
) -> Result<Defense> {
    spec.validate()?;
    let sae = if spec.use_sae {
        let p = sae.ok_or_else(|| {
            Error::Config("spec uses the SAE but no trained SAE is available".into())
        })?;
        if p.layer != layer {
            return Err(Error::Config(format!(
                "SAE was trained on layer {} but the intervention targets layer {layer}",
                p.layer
            )));
        }
        Some(p.clone())
    } else {
        None
    };
    let action = match spec.method {
        Method::None => Action::Identity,
        Method::Ablation => {
            let r =
                ranking.ok_or_else(|| Error::Config("ablation needs a feature ranking".into()))?;
            Action::Ablate(r.top(spec.k.expect("validated")))
        }
        m => {
            let v = vector.ok_or_else(|| Error::Config(format!("{m} needs a steering vector")))?;
            if Some(v.source) != m.source() {
                return Err(Error::Config(format!("{m} given a {:?} vector", v.source)));
            }
            Action::Steer(v.v.clone(), spec.alpha.expect("validated"))
        }
    };
    let width = sae.as_ref().map(|p| p.h);
    if let (Some(h), Action::Steer(v, _)) = (width, &action) {
        if v.numel() != h {
            return Err(Error::Config(format!(
                "steering vector has {} entries, SAE has {h}",
                v.numel()
            )));
        }
    }
    Ok(Defense {
        layer,
        prefix: spec.intervene_prefix,
        sae,
        action,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn ablate_examples() {
        assert_eq!(
            ablate(&t(&[5.0, 0.0, 2.0, 7.0]), &[0, 3]).unwrap().data(),
            &[0.0, 0.0, 2.0, 0.0]
        );
        assert_eq!(ablate(&t(&[5.0, 1.0]), &[]).unwrap().data(), &[5.0, 1.0]);
        assert!(matches!(ablate(&t(&[1.0]), &[1]), Err(Error::Parameter(_))));
    }

    #[test]
    fn steer_examples() {
        assert_eq!(
            steer(&t(&[2.0, 0.0]), &t(&[1.0, 1.0]), -1.0)
                .unwrap()
                .data(),
            &[1.0, 0.0]
        );
        assert_eq!(
            steer(&t(&[2.0, 0.0]), &t(&[1.0, 1.0]), 0.0).unwrap().data(),
            &[2.0, 0.0]
        );
    }

    #[test]
    fn mean_diff_arithmetic() {
        let f = vec![
            (t(&[1.0, 0.0]), true),
            (t(&[3.0, 0.0]), true),
            (t(&[0.0, 2.0]), false),
            (t(&[0.0, 4.0]), false),
        ];
        let v = build_steering_vector(
            SteeringSource::MeanDiff,
            &f,
            None,
            0,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(v.v.data(), &[2.0, -3.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(InterventionSpec::new(Method::Ablation, true)
            .validate()
            .is_err());
        assert!(InterventionSpec::ablation(4, true).validate().is_ok());
        assert!(InterventionSpec::new(Method::SteerProbe, false)
            .validate()
            .is_err());
        assert!(
            InterventionSpec::steering(Method::SteerTopkProbe, -2.0, None, true)
                .validate()
                .is_err()
        );
        let spec = InterventionSpec::steering(Method::SteerMeanDiff, -2.0, None, false);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            serde_json::from_str::<InterventionSpec>(&json).unwrap(),
            spec
        );
    }

    #[test]
    fn missing_sae_is_config_error() {
        let spec = InterventionSpec::new(Method::None, true);
        assert!(matches!(
            make_interventor(&spec, 0, None, None, None),
            Err(Error::Config(_))
        ));
        let abl = InterventionSpec::ablation(2, false);
        assert!(matches!(
            make_interventor(&abl, 0, None, None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_without_sae_returns_input() {
        let d = make_interventor(
            &InterventionSpec::new(Method::None, false),
            1,
            None,
            None,
            None,
        )
        .unwrap();
        let mut a = vec![0.5, -1.5, 3.0];
        d.apply(&mut a);
        assert_eq!(a, vec![0.5, -1.5, 3.0]);
    }
}
