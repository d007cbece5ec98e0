//! Extreme Value Machine: Weibull tail fitting on cross-class distances,
//! greedy model reduction, per-class inclusion probabilities, and open-set
//! classification.
//!
//! Each retained training point (extreme vector) carries a two-parameter
//! Weibull inclusion distribution `psi(d) = exp(-(d/scale)^shape)`, which is
//! 1 at distance 0 and decays to 0. The probability of a point under a class
//! is the maximum inclusion probability over that class's extreme vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_stream::FeatureSet;

/// Two-parameter Weibull in inclusion form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    /// Scale (lambda), in distance units.
    pub scale: f64,
    /// Shape (kappa), dimensionless.
    pub shape: f64,
}

impl WeibullParams {
    pub fn new(scale: f64, shape: f64) -> Result<Self> {
        if !(scale > 0.0 && shape > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weibull params must be positive, got ({scale}, {shape})"
            )));
        }
        Ok(WeibullParams { scale, shape })
    }

    /// Radial inclusion probability at distance `d >= 0`.
    pub fn inclusion(&self, d: f64) -> f64 {
        (-(d / self.scale).powf(self.shape)).exp()
    }
}

const MLE_MAX_ITER: usize = 100;
const MLE_TOL: f64 = 1e-10;

/// Maximum-likelihood fit of a two-parameter Weibull.
///
/// Newton iteration on the shape via the profile likelihood, with the scale
/// in closed form given the shape. Input distances are normalized by their
/// maximum for conditioning; the scale is mapped back afterwards.
pub fn weibull_fit(tail_distances: &[f64]) -> Result<WeibullParams> {
    let n = tail_distances.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "weibull fit needs at least 2 distances, got {n}"
        )));
    }
    if let Some(d) = tail_distances.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "weibull fit requires positive distances, got {d}"
        )));
    }
    let max = tail_distances.iter().cloned().fold(f64::MIN, f64::max);
    let min = tail_distances.iter().cloned().fold(f64::MAX, f64::min);
    if max == min {
        return Err(Error::Degenerate(
            "all tail distances equal; weibull shape diverges".into(),
        ));
    }
    let t: Vec<f64> = tail_distances.iter().map(|d| d / max).collect();
    let logs: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let sum_log: f64 = logs.iter().sum();
    let nf = n as f64;

    // Initial guess from the log-sample spread (method of moments on ln t).
    let log_mean = sum_log / nf;
    let log_var = logs.iter().map(|l| (l - log_mean) * (l - log_mean)).sum::<f64>() / nf;
    let mut kappa = (std::f64::consts::PI / (6.0f64.sqrt() * log_var.sqrt())).clamp(0.05, 50.0);

    for _ in 0..MLE_MAX_ITER {
        let mut s0 = 0.0; // sum t^k
        let mut s1 = 0.0; // sum t^k ln t
        let mut s2 = 0.0; // sum t^k (ln t)^2
        for (v, l) in t.iter().zip(&logs) {
            let p = v.powf(kappa);
            s0 += p;
            s1 += p * l;
            s2 += p * l * l;
        }
        let f = nf / kappa + sum_log - nf * s1 / s0;
        let fp = -nf / (kappa * kappa) - nf * (s2 * s0 - s1 * s1) / (s0 * s0);
        if fp == 0.0 {
            break;
        }
        let mut step = f / fp;
        // Keep kappa positive.
        while kappa - step <= 0.0 {
            step *= 0.5;
        }
        kappa -= step;
        if step.abs() < MLE_TOL * (1.0 + kappa) {
            break;
        }
    }
    if !kappa.is_finite() || kappa <= 0.0 {
        return Err(Error::NoConvergence {
            iterations: MLE_MAX_ITER,
            residual: kappa,
        });
    }
    let s0: f64 = t.iter().map(|v| v.powf(kappa)).sum();
    let lambda = (s0 / nf).powf(1.0 / kappa) * max;
    WeibullParams::new(lambda, kappa)
}

/// A retained training point with its fitted inclusion distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeVector {
    pub location: Vec<f64>,
    #[serde(flatten)]
    pub weibull: WeibullParams,
}

/// EVM training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvmHyper {
    /// Number of smallest cross-class distances fitted per point
    /// (min-clamped to the available negatives).
    pub tail_size: usize,
    /// Scalar applied to tail distances before fitting.
    pub distance_multiplier: f64,
    /// Minimum inclusion probability at which an extreme vector covers a
    /// same-class point during model reduction.
    pub cover_threshold: f64,
}

impl Default for EvmHyper {
    fn default() -> Self {
        EvmHyper {
            tail_size: 33_998,
            distance_multiplier: 0.45,
            cover_threshold: 0.7,
        }
    }
}

impl EvmHyper {
    pub fn validate(&self) -> Result<()> {
        if self.tail_size < 2 {
            return Err(Error::InvalidArgument("tail_size must be >= 2".into()));
        }
        if !(self.distance_multiplier > 0.0) {
            return Err(Error::InvalidArgument("distance_multiplier must be > 0".into()));
        }
        if !(self.cover_threshold > 0.0 && self.cover_threshold < 1.0) {
            return Err(Error::InvalidArgument("cover_threshold must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// A trained Extreme Value Machine. Immutable after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvmModel {
    pub feature_dim: usize,
    pub hyper: EvmHyper,
    /// Class label (>= 1) to retained extreme vectors.
    pub classes: BTreeMap<u32, Vec<ExtremeVector>>,
}

/// Open-set decision for one feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvmDecision {
    /// `m(x)`: maximum class probability.
    pub prob: f64,
    /// `z(x)`: argmax class label.
    pub argmax_label: u32,
    /// Final label; 0 means unknown.
    pub label: u32,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Train an EVM on a labeled feature set.
///
/// Per point: smallest `min(tail_size, #negatives)` cross-class distances,
/// scaled by the distance multiplier, are Weibull-fitted into a candidate
/// extreme vector. Per class, candidates are reduced by greedy set cover at
/// the cover threshold; cover ties break toward the lowest candidate index,
/// so training is deterministic for a fixed input order.
pub fn evm_train(features: &FeatureSet, hyper: EvmHyper) -> Result<EvmModel> {
    hyper.validate()?;
    if let Some(s) = features.samples.iter().find(|s| s.label == 0) {
        return Err(Error::InvalidArgument(format!(
            "training sample {:?} has label 0, which is reserved for unknown",
            s.sample_id
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in features.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "EVM training requires >= 2 classes, got {}",
            by_class.len()
        )));
    }

    let mut classes = BTreeMap::new();
    for (&label, members) in &by_class {
        let negatives: Vec<usize> = features
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label != label)
            .map(|(i, _)| i)
            .collect();
        if negatives.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "class {label} has no negatives"
            )));
        }
        // Fit one candidate extreme vector per member.
        let mut candidates: Vec<ExtremeVector> = Vec::with_capacity(members.len());
        for &i in members {
            let x = &features.samples[i].values;
            let mut dists: Vec<f64> = negatives
                .iter()
                .map(|&j| euclidean(x, &features.samples[j].values))
                .collect();
            let tail = hyper.tail_size.min(dists.len());
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists.truncate(tail);
            for d in dists.iter_mut() {
                *d *= hyper.distance_multiplier;
                // Guard coincident cross-class points.
                if *d <= 0.0 {
                    *d = f64::MIN_POSITIVE;
                }
            }
            let weibull = weibull_fit(&dists)?;
            candidates.push(ExtremeVector {
                location: x.clone(),
                weibull,
            });
        }
        // Greedy set cover over same-class points.
        let covers: Vec<Vec<bool>> = candidates
            .iter()
            .map(|ev| {
                members
                    .iter()
                    .map(|&j| {
                        let d = euclidean(&ev.location, &features.samples[j].values);
                        ev.weibull.inclusion(d) >= hyper.cover_threshold
                    })
                    .collect()
            })
            .collect();
        let mut covered = vec![false; members.len()];
        let mut kept: Vec<usize> = Vec::new();
        while covered.iter().any(|c| !c) {
            let mut best = None;
            let mut best_gain = 0usize;
            for (ci, cover) in covers.iter().enumerate() {
                let gain = cover
                    .iter()
                    .zip(&covered)
                    .filter(|(covers_it, already)| **covers_it && !**already)
                    .count();
                if gain > best_gain {
                    best_gain = gain;
                    best = Some(ci);
                }
            }
            // Self-coverage (inclusion 1 at distance 0) guarantees progress.
            let ci = best.expect("uncovered point with no covering candidate");
            kept.push(ci);
            for (c, cov) in covered.iter_mut().zip(&covers[ci]) {
                *c |= *cov;
            }
        }
        kept.sort_unstable();
        classes.insert(label, kept.into_iter().map(|ci| candidates[ci].clone()).collect());
    }
    Ok(EvmModel {
        feature_dim: features.dim,
        hyper,
        classes,
    })
}

/// Per-class inclusion probabilities for a feature vector.
pub fn class_probs(model: &EvmModel, x: &[f64]) -> Result<BTreeMap<u32, f64>> {
    if x.len() != model.feature_dim {
        return Err(Error::InvalidArgument(format!(
            "feature dimension mismatch: model {}, input {}",
            model.feature_dim,
            x.len()
        )));
    }
    let mut probs = BTreeMap::new();
    for (&label, evs) in &model.classes {
        let p = evs
            .iter()
            .map(|ev| ev.weibull.inclusion(euclidean(x, &ev.location)))
            .fold(0.0f64, f64::max);
        probs.insert(label, p);
    }
    Ok(probs)
}

/// Open-set classification: label is the argmax class when the maximum
/// probability reaches `tau`, otherwise 0 (unknown). A score exactly at the
/// threshold counts as known. Argmax ties break toward the lowest label.
pub fn classify(model: &EvmModel, x: &[f64], tau: f64) -> Result<EvmDecision> {
    let probs = class_probs(model, x)?;
    let (&argmax_label, &prob) = probs
        .iter()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
        .ok_or_else(|| Error::InvalidArgument("model has no classes".into()))?;
    let label = if prob >= tau { argmax_label } else { 0 };
    Ok(EvmDecision {
        prob,
        argmax_label,
        label,
    })
}

/// Emit `m(x)` per sample in input order, filling the `max_evm` column of a
/// score stream.
pub fn evm_score_stream(model: &EvmModel, features: &FeatureSet) -> Result<Vec<f64>> {
    features
        .samples
        .iter()
        .map(|s| {
            class_probs(model, &s.values)
                .map(|p| p.values().cloned().fold(0.0f64, f64::max))
        })
        .collect()
}

/// Serialize a model to JSON.
pub fn write_model(path: impl AsRef<std::path::Path>, model: &EvmModel) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, model)?;
    Ok(())
}

/// Deserialize a model from JSON.
pub fn read_model(path: impl AsRef<std::path::Path>) -> Result<EvmModel> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(file)?)
}
