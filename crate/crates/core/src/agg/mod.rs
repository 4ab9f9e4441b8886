//! Server-side aggregation: KLAW and PRAW weight computation, the KLPWA
//! combination, Sparse Activation Skipping, and the FedAvg / cosine-distance
//! baselines. Weight strategies live behind [`strategy::WeightStrategy`] and
//! are selected by name at runtime.

pub mod strategy;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::losses::kl_divergence;
use crate::nnet::{forward, NetConfig};
use crate::params::{linear_combine, ParamVector, PruneMask};

pub use strategy::{create_strategy, AggInputs, WeightStrategy, STRATEGY_NAMES};

/// One client's round upload: masked sparse parameters, the mask itself,
/// the pruning ratio, the raw KLAW scalar, and the dataset size.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: u16,
    pub model: ParamVector,
    pub mask: PruneMask,
    pub pruning_ratio: f32,
    pub klaw_raw: f32,
    pub dataset_size: usize,
}

/// What aggregation writes to a coordinate no client contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyCoordRule {
    /// Keep the previous global value (default).
    Retain,
    Zero,
}

/// Batch-mean of the per-sample softmax over the embedding coordinates,
/// clamped to >= 1e-8 and renormalized. Returns the distribution plus the
/// clamp flags, which the KL gradient needs.
pub(crate) fn mean_softmax_with_flags(emb: &Array2<f64>) -> (Vec<f64>, Vec<bool>) {
    let (b, d) = emb.dim();
    let mut mean = vec![0.0f64; d];
    for i in 0..b {
        let row = emb.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..d {
            mean[j] += exps[j] / sum / b as f64;
        }
    }
    let clamped: Vec<bool> = mean.iter().map(|&v| v < 1e-8).collect();
    let c: Vec<f64> = mean.iter().map(|&v| v.max(1e-8)).collect();
    let s: f64 = c.iter().sum();
    (c.into_iter().map(|v| v / s).collect(), clamped)
}

/// Feature distribution of an embedding batch: probability vector of
/// dimension `d`, summing to 1 within 1e-9.
pub fn feature_distribution(emb: &Array2<f64>) -> Result<Vec<f64>> {
    if emb.nrows() == 0 {
        return Err(Error::EmptyInput("feature_distribution batch"));
    }
    Ok(mean_softmax_with_flags(emb).0)
}

/// Feature distribution of a model evaluated on a fixed batch.
pub fn model_distribution(
    net: &NetConfig,
    model: &ParamVector,
    batch: &Array2<f64>,
) -> Result<Vec<f64>> {
    feature_distribution(&forward(net, model, batch)?)
}

/// Raw KLAW scalar `f_k`: divergence of the newly trained model's feature
/// distribution from the previously received personalized model's, both on
/// the client's fixed validation batch.
pub fn klaw_raw(
    net: &NetConfig,
    prev_model: &ParamVector,
    new_model: &ParamVector,
    batch: &Array2<f64>,
) -> Result<f64> {
    prev_model.check_structure(new_model)?;
    let new_dist = model_distribution(net, new_model, batch)?;
    let prev_dist = model_distribution(net, prev_model, batch)?;
    kl_divergence(&new_dist, &prev_dist)
}

fn normalized_or_uniform(raw: &[f64], label: &'static str) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::EmptyInput(label));
    }
    if raw.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "{label} inputs must be finite and >= 0"
        )));
    }
    let sum: f64 = raw.iter().sum();
    if sum < 1e-12 {
        return Ok(vec![1.0 / raw.len() as f64; raw.len()]);
    }
    Ok(raw.iter().map(|&v| v / sum).collect())
}

/// Normalizes raw KLAW scalars to weights summing to 1, falling back to
/// uniform when every scalar is (numerically) zero.
pub fn klaw_weights(raw: &[f64]) -> Result<Vec<f64>> {
    normalized_or_uniform(raw, "klaw_weights")
}

/// Squared-ratio PRAW weights, uniform fallback for the pre-pruning rounds
/// where every ratio is still zero.
pub fn praw_weights(ratios: &[f64]) -> Result<Vec<f64>> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::InvalidParameter(
            "pruning ratios must lie in [0, 1]".into(),
        ));
    }
    let squared: Vec<f64> = ratios.iter().map(|&r| r * r).collect();
    normalized_or_uniform(&squared, "praw_weights")
}

/// Convex combination `a_k = gamma*klaw_k + delta*praw_k`.
pub fn klpwa_client_weights(
    klaw: &[f64],
    praw: &[f64],
    gamma: f64,
    delta: f64,
) -> Result<Vec<f64>> {
    if (gamma + delta - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "aggregation.gamma + aggregation.delta must equal 1, got {} + {}",
            gamma, delta
        )));
    }
    if klaw.len() != praw.len() {
        return Err(Error::InvalidParameter(format!(
            "{} klaw weights vs {} praw weights",
            klaw.len(),
            praw.len()
        )));
    }
    Ok(klaw
        .iter()
        .zip(praw)
        .map(|(k, p)| gamma * k + delta * p)
        .collect())
}

/// Weights proportional to the cosine distance between each client's
/// previous and new mean feature vectors; uniform when nothing moved.
pub fn cosine_weights(prev_feats: &[Vec<f64>], new_feats: &[Vec<f64>]) -> Result<Vec<f64>> {
    if prev_feats.len() != new_feats.len() {
        return Err(Error::InvalidParameter(format!(
            "{} prev features vs {} new features",
            prev_feats.len(),
            new_feats.len()
        )));
    }
    let distances: Vec<f64> = prev_feats
        .iter()
        .zip(new_feats)
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            1.0 - dot
        })
        .collect();
    if distances.iter().all(|&d| d.abs() < 1e-12) {
        return Ok(vec![1.0 / distances.len() as f64; distances.len()]);
    }
    normalized_or_uniform(&distances, "cosine_weights")
}

fn check_reports(reports: &[ClientReport]) -> Result<()> {
    let first = reports
        .first()
        .ok_or(Error::EmptyInput("aggregate reports"))?;
    for r in &reports[1..] {
        first.model.check_structure(&r.model)?;
    }
    for r in reports {
        r.mask.check_structure_params(&r.model)?;
    }
    Ok(())
}

fn check_weight_sum(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::WeightSum(sum));
    }
    Ok(())
}

/// Sparse Activation Skipping: each coordinate averages only the clients
/// whose mask retains it, renormalized by the remaining weight mass. A
/// coordinate nobody retains follows `empty_rule`.
pub fn sas_aggregate(
    reports: &[ClientReport],
    weights: &[f64],
    prev_global: &ParamVector,
    empty_rule: EmptyCoordRule,
) -> Result<ParamVector> {
    check_reports(reports)?;
    if weights.len() != reports.len() {
        return Err(Error::InvalidParameter(format!(
            "{} weights for {} reports",
            weights.len(),
            reports.len()
        )));
    }
    check_weight_sum(weights)?;
    reports[0].model.check_structure(prev_global)?;

    let mut out = prev_global.zeros_like();
    for li in 0..out.layers.len() {
        for ci in 0..out.layers[li].values.len() {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (r, &w) in reports.iter().zip(weights) {
                if r.mask.layers[li].bits[ci] {
                    num += w * f64::from(r.model.layers[li].values[ci]);
                    den += w;
                }
            }
            out.layers[li].values[ci] = if den > 0.0 {
                (num / den) as f32
            } else {
                match empty_rule {
                    EmptyCoordRule::Retain => prev_global.layers[li].values[ci],
                    EmptyCoordRule::Zero => 0.0,
                }
            };
        }
    }
    Ok(out)
}

/// Dense weighted average of the uploaded models.
pub fn dense_aggregate(reports: &[ClientReport], weights: &[f64]) -> Result<ParamVector> {
    check_reports(reports)?;
    if weights.len() != reports.len() {
        return Err(Error::InvalidParameter(format!(
            "{} weights for {} reports",
            weights.len(),
            reports.len()
        )));
    }
    check_weight_sum(weights)?;
    let terms: Vec<(f64, &ParamVector)> = weights
        .iter()
        .zip(reports)
        .map(|(&w, r)| (w, &r.model))
        .collect();
    linear_combine(&terms)
}

/// FedAvg: dense average weighted by dataset size.
pub fn fedavg_aggregate(reports: &[ClientReport]) -> Result<ParamVector> {
    let total: usize = reports.iter().map(|r| r.dataset_size).sum();
    if total == 0 {
        return Err(Error::EmptyInput("fedavg dataset sizes"));
    }
    let weights: Vec<f64> = reports
        .iter()
        .map(|r| r.dataset_size as f64 / total as f64)
        .collect();
    dense_aggregate(reports, &weights)
}
