//! Memory bank maintenance and the training objective: intra-camera,
//! inter-camera and camera-aware contrastive losses plus KL-divergence
//! regularization, each with exact gradients with respect to the batch
//! embeddings.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::agg::mean_softmax_with_flags;
use crate::error::{Error, Result};
use crate::nnet::{forward, NetConfig};
use crate::params::ParamVector;
use crate::pseudo::PseudoLabeling;

/// Proxy feature matrix (`d x Z`, unit-norm columns) updated by momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub features: Array2<f64>,
    /// Momentum kept on the old entry: `M <- mu*M + (1-mu)*f`, renormalized.
    pub mu: f64,
    /// Softmax temperature of every contrastive term.
    pub tau: f64,
}

/// Loss mixing ratios. `k_hard` is the hard-negative count, truncated to
/// what is available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_ca: f64,
    pub delta_kl: f64,
    pub k_hard: usize,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("losses.alpha", self.alpha),
            ("losses.beta", self.beta),
            ("losses.gamma_ca", self.gamma_ca),
            ("losses.delta_kl", self.delta_kl),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.k_hard == 0 {
            return Err(Error::InvalidParameter("losses.k_hard must be >= 1".into()));
        }
        Ok(())
    }
}

fn normalize_or_basis(col: &mut [f64]) {
    let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[0] = 1.0;
    } else {
        col.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Rebuilds the bank from scratch: each column is the unit-normalized mean
/// embedding of its subcluster. Done after every re-clustering.
pub fn build_bank(
    emb: &Array2<f64>,
    lab: &PseudoLabeling,
    mu: f64,
    tau: f64,
) -> Result<MemoryBank> {
    let d = emb.ncols();
    if emb.nrows() != lab.pid.len() {
        return Err(Error::InvalidParameter(format!(
            "{} embeddings vs {} labels",
            emb.nrows(),
            lab.pid.len()
        )));
    }
    let mut features = Array2::zeros((d, lab.z_total));
    let mut counts = vec![0usize; lab.z_total];
    for (row, proxy) in lab.proxy.iter().enumerate() {
        if let Some(z) = proxy {
            counts[*z] += 1;
            for c in 0..d {
                features[[c, *z]] += emb[[row, c]];
            }
        }
    }
    for z in 0..lab.z_total {
        let mut col: Vec<f64> = (0..d)
            .map(|c| features[[c, z]] / counts[z].max(1) as f64)
            .collect();
        normalize_or_basis(&mut col);
        for (c, v) in col.iter().enumerate() {
            features[[c, z]] = *v;
        }
    }
    Ok(MemoryBank { features, mu, tau })
}

/// Momentum update of one proxy column, renormalized to unit length.
pub fn memory_update(bank: &mut MemoryBank, proxy: usize, feature: ArrayView1<f64>) -> Result<()> {
    let z = bank.features.ncols();
    if proxy >= z {
        return Err(Error::InvalidParameter(format!(
            "proxy {proxy} out of range (Z = {z})"
        )));
    }
    let d = bank.features.nrows();
    if feature.len() != d {
        return Err(Error::InvalidParameter(format!(
            "feature dim {} vs bank dim {d}",
            feature.len()
        )));
    }
    let mut col: Vec<f64> = (0..d)
        .map(|c| bank.mu * bank.features[[c, proxy]] + (1.0 - bank.mu) * feature[c])
        .collect();
    normalize_or_basis(&mut col);
    for (c, v) in col.iter().enumerate() {
        bank.features[[c, proxy]] = *v;
    }
    Ok(())
}

/// `-log softmax` over a candidate proxy list with the sample's own entries
/// in `positives` (indices into `candidates`), plus the gradient of the term
/// with respect to the embedding. Shared by all three contrastive losses.
fn group_softmax_term(
    bank: &MemoryBank,
    e: ArrayView1<f64>,
    candidates: &[usize],
    positives: &[usize],
) -> (f64, Vec<f64>) {
    let d = bank.features.nrows();
    let logits: Vec<f64> = candidates
        .iter()
        .map(|&z| {
            let mut dot = 0.0;
            for c in 0..d {
                dot += bank.features[[c, z]] * e[c];
            }
            dot / bank.tau
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();

    let mean_pos_logit: f64 =
        positives.iter().map(|&i| logits[i]).sum::<f64>() / positives.len() as f64;
    let term = lse - mean_pos_logit;

    // d term / d e = sum_k p_k M_k / tau - mean over positives of M_p / tau
    let mut grad = vec![0.0; d];
    for (i, &z) in candidates.iter().enumerate() {
        let p = exps[i] / sum;
        for (c, g) in grad.iter_mut().enumerate() {
            *g += p * bank.features[[c, z]] / bank.tau;
        }
    }
    let w = 1.0 / positives.len() as f64;
    for &i in positives {
        let z = candidates[i];
        for (c, g) in grad.iter_mut().enumerate() {
            *g -= w * bank.features[[c, z]] / bank.tau;
        }
    }
    (term, grad)
}

fn check_batch(
    bank: &MemoryBank,
    emb: &Array2<f64>,
    proxies: &[usize],
    lab: &PseudoLabeling,
) -> Result<()> {
    if emb.nrows() != proxies.len() {
        return Err(Error::InvalidParameter(format!(
            "{} embeddings vs {} proxies",
            emb.nrows(),
            proxies.len()
        )));
    }
    if emb.ncols() != bank.features.nrows() {
        return Err(Error::InvalidParameter(format!(
            "embedding dim {} vs bank dim {}",
            emb.ncols(),
            bank.features.nrows()
        )));
    }
    if bank.features.ncols() != lab.z_total {
        return Err(Error::InvalidParameter(format!(
            "bank holds {} proxies, labeling {}",
            bank.features.ncols(),
            lab.z_total
        )));
    }
    if let Some(&p) = proxies.iter().find(|&&p| p >= lab.z_total) {
        return Err(Error::InvalidParameter(format!(
            "batch proxy {p} out of range (Z = {})",
            lab.z_total
        )));
    }
    Ok(())
}

/// Intra-camera loss: softmax restricted to the proxies of the sample's own
/// camera, averaged within each camera and summed over cameras.
pub fn intra_loss(
    bank: &MemoryBank,
    emb: &Array2<f64>,
    proxies: &[usize],
    cams: &[usize],
    lab: &PseudoLabeling,
) -> Result<(f64, Array2<f64>)> {
    check_batch(bank, emb, proxies, lab)?;
    let mut per_cam_count = vec![0usize; lab.cameras.len()];
    for &c in cams {
        per_cam_count[c] += 1;
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(emb.dim());
    for i in 0..emb.nrows() {
        let cam = cams[i];
        let range = lab.camera_range(cam);
        if range.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "camera index {cam} has zero proxies"
            )));
        }
        let candidates: Vec<usize> = range.clone().collect();
        let own = proxies[i];
        let pos = match candidates.iter().position(|&z| z == own) {
            Some(p) => p,
            None => {
                return Err(Error::InvalidParameter(format!(
                    "proxy {own} does not belong to camera index {cam}"
                )))
            }
        };
        let (term, g) = group_softmax_term(bank, emb.row(i), &candidates, &[pos]);
        let w = 1.0 / per_cam_count[cam] as f64;
        loss += w * term;
        for c in 0..emb.ncols() {
            grad[[i, c]] += w * g[c];
        }
    }
    Ok((loss, grad))
}

/// Picks the `k` most similar proxies among `pool`, ties broken by lower
/// proxy id.
fn hardest(bank: &MemoryBank, e: ArrayView1<f64>, pool: &[usize], k: usize) -> Vec<usize> {
    let d = bank.features.nrows();
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .map(|&z| {
            let mut dot = 0.0;
            for c in 0..d {
                dot += bank.features[[c, z]] * e[c];
            }
            (dot, z)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, z)| z).collect()
}

/// Inter-camera loss: positives are every proxy sharing the sample's pid
/// (own proxy included), negatives are the `k_hard` most similar proxies of
/// other pids. Mean over the batch.
pub fn inter_loss(
    bank: &MemoryBank,
    emb: &Array2<f64>,
    proxies: &[usize],
    lab: &PseudoLabeling,
    k_hard: usize,
) -> Result<(f64, Array2<f64>)> {
    check_batch(bank, emb, proxies, lab)?;
    let b = emb.nrows();
    let mut loss = 0.0;
    let mut grad = Array2::zeros(emb.dim());
    for i in 0..b {
        let own = proxies[i];
        let pid = lab.pid_of_proxy[own];
        let mut candidates: Vec<usize> = Vec::new();
        let mut negatives: Vec<usize> = Vec::new();
        for z in 0..lab.z_total {
            if lab.pid_of_proxy[z] == pid {
                candidates.push(z);
            } else {
                negatives.push(z);
            }
        }
        let positives: Vec<usize> = (0..candidates.len()).collect();
        candidates.extend(hardest(bank, emb.row(i), &negatives, k_hard));
        let (term, g) = group_softmax_term(bank, emb.row(i), &candidates, &positives);
        loss += term / b as f64;
        for c in 0..emb.ncols() {
            grad[[i, c]] += g[c] / b as f64;
        }
    }
    Ok((loss, grad))
}

/// Camera-aware loss: the positive set is the sample's own proxy plus the
/// single most similar proxy from every other camera; negatives are the
/// `k_hard` hardest remaining proxies. Mean over the batch.
pub fn camera_aware_loss(
    bank: &MemoryBank,
    emb: &Array2<f64>,
    proxies: &[usize],
    cams: &[usize],
    lab: &PseudoLabeling,
    k_hard: usize,
) -> Result<(f64, Array2<f64>)> {
    check_batch(bank, emb, proxies, lab)?;
    let b = emb.nrows();
    let mut loss = 0.0;
    let mut grad = Array2::zeros(emb.dim());
    for i in 0..b {
        let own = proxies[i];
        let own_cam = cams[i];
        let mut candidates = vec![own];
        for ci in 0..lab.cameras.len() {
            if ci == own_cam || lab.z_per_camera[ci] == 0 {
                continue;
            }
            let pool: Vec<usize> = lab.camera_range(ci).collect();
            candidates.push(hardest(bank, emb.row(i), &pool, 1)[0]);
        }
        let positives: Vec<usize> = (0..candidates.len()).collect();
        let remaining: Vec<usize> = (0..lab.z_total)
            .filter(|z| !candidates.contains(z))
            .collect();
        candidates.extend(hardest(bank, emb.row(i), &remaining, k_hard));
        let (term, g) = group_softmax_term(bank, emb.row(i), &candidates, &positives);
        loss += term / b as f64;
        for c in 0..emb.ncols() {
            grad[[i, c]] += g[c] / b as f64;
        }
    }
    Ok((loss, grad))
}

/// `D_KL(P || Q)` in nats. Inputs must be distributions within 1e-6; both
/// are clamped to >= 1e-8 and renormalized before evaluation.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidParameter(format!(
            "distribution lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::EmptyInput("kl_divergence"));
    }
    for (name, d) in [("P", p), ("Q", q)] {
        if d.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} has negative or non-finite mass"
            )));
        }
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "{name} sums to {sum}, not 1"
            )));
        }
    }
    let clamp = |d: &[f64]| -> Vec<f64> {
        let c: Vec<f64> = d.iter().map(|&v| v.max(1e-8)).collect();
        let s: f64 = c.iter().sum();
        c.into_iter().map(|v| v / s).collect()
    };
    let pp = clamp(p);
    let qq = clamp(q);
    Ok(pp.iter().zip(&qq).map(|(a, b)| a * (a / b).ln()).sum())
}

/// KL regularization value and its gradient with respect to the local
/// embeddings, for a fixed reference distribution `ref_dist` (no gradient
/// flows through the reference side).
pub fn kll_from_embeddings(
    local_emb: &Array2<f64>,
    ref_dist: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let d = local_emb.ncols();
    if ref_dist.len() != d {
        return Err(Error::InvalidParameter(format!(
            "reference distribution dim {} vs embedding dim {d}",
            ref_dist.len()
        )));
    }
    let b = local_emb.nrows();
    if b == 0 {
        return Err(Error::EmptyInput("kll batch"));
    }
    let (p, clamped) = mean_softmax_with_flags(local_emb);
    let value: f64 = p.iter().zip(ref_dist).map(|(a, q)| a * (a / q).ln()).sum();

    // Per-sample softmax rows, needed for the jacobian chain.
    let mut softmax_rows = Array2::zeros((b, d));
    for i in 0..b {
        let row = local_emb.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..d {
            softmax_rows[[i, j]] = exps[j] / sum;
        }
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..b).map(|i| softmax_rows[[i, j]]).sum::<f64>() / b as f64)
        .collect();
    let s_after_clamp: f64 = mean.iter().map(|&v| v.max(1e-8)).sum();

    let g: Vec<f64> = (0..d)
        .map(|j| {
            if clamped[j] {
                0.0
            } else {
                ((p[j] / ref_dist[j]).ln() - value) / s_after_clamp
            }
        })
        .collect();
    let mut grad = Array2::zeros((b, d));
    for i in 0..b {
        let inner: f64 = (0..d).map(|j| g[j] * softmax_rows[[i, j]]).sum();
        for k in 0..d {
            grad[[i, k]] = softmax_rows[[i, k]] * (g[k] - inner) / b as f64;
        }
    }
    Ok((value, grad))
}

/// KL regularization between the feature distributions of a local model and
/// a frozen reference model on the same batch. The gradient is taken with
/// respect to the local embeddings only.
pub fn kll_term(
    net: &NetConfig,
    local: &ParamVector,
    reference: &ParamVector,
    batch: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    local.check_structure(reference)?;
    let local_emb = forward(net, local, batch)?;
    let ref_emb = forward(net, reference, batch)?;
    let (ref_dist, _) = mean_softmax_with_flags(&ref_emb);
    kll_from_embeddings(&local_emb, &ref_dist)
}

/// Weighted sum of the four component losses and their embedding gradients.
pub fn total_loss(
    w: &LossWeights,
    intra: &(f64, Array2<f64>),
    inter: &(f64, Array2<f64>),
    ca: &(f64, Array2<f64>),
    kl: &(f64, Array2<f64>),
) -> (f64, Array2<f64>) {
    let value = w.alpha * intra.0 + w.beta * inter.0 + w.gamma_ca * ca.0 + w.delta_kl * kl.0;
    let grad = &intra.1 * w.alpha + &inter.1 * w.beta + &ca.1 * w.gamma_ca + &kl.1 * w.delta_kl;
    (value, grad)
}
