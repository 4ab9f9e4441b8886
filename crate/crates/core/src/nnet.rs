//! Small embedding MLP with exact analytic gradients and an Adam optimizer.
//!
//! Parameters are stored as `f32` in a [`ParamVector`]; all forward and
//! backward arithmetic runs in `f64` so gradient checks stay tight.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{apply_mask, ParamLayer, ParamVector, PruneMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Embedding network shape. `embed_dim` is the feature dimension `d` used by
/// the memory bank and all distribution computations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidParameter(
                "net.input_dim must be positive".into(),
            ));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidParameter(
                "net.hidden_dims needs at least one positive entry".into(),
            ));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidParameter("net.embed_dim must be >= 2".into()));
        }
        Ok(())
    }

    /// Layer widths from input to embedding.
    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }

    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

/// Seeded uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out));
/// biases start at zero. Weight matrices are prunable, biases are not.
pub fn init_params(cfg: &NetConfig) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.dims();
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values: Vec<f32> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-a..a) as f32)
            .collect();
        layers.push(ParamLayer {
            name: format!("fc{i}.weight"),
            shape: vec![fan_out, fan_in],
            values,
            prunable: true,
        });
        layers.push(ParamLayer {
            name: format!("fc{i}.bias"),
            shape: vec![fan_out],
            values: vec![0.0; fan_out],
            prunable: false,
        });
    }
    ParamVector { layers }
}

fn weight_view(p: &ParamVector, i: usize) -> Array2<f64> {
    let l = &p.layers[2 * i];
    Array2::from_shape_vec(
        (l.shape[0], l.shape[1]),
        l.values.iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("shape checked at construction")
}

fn bias_view(p: &ParamVector, i: usize) -> Array1<f64> {
    Array1::from_iter(p.layers[2 * i + 1].values.iter().map(|&v| f64::from(v)))
}

fn activate(cfg: &NetConfig, z: &Array2<f64>) -> Array2<f64> {
    match cfg.activation {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Tanh => z.mapv(f64::tanh),
    }
}

fn activate_grad(cfg: &NetConfig, z: &Array2<f64>) -> Array2<f64> {
    match cfg.activation {
        Activation::Relu => z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Activation::Tanh => z.mapv(|v| 1.0 - v.tanh() * v.tanh()),
    }
}

/// Pre-normalization embeddings with norm below this substitute the first
/// standard basis vector, keeping downstream softmax math finite.
const NORM_GUARD: f64 = 1e-12;

/// Intermediate state kept by [`forward_cached`] for the backward pass.
pub struct ForwardCache {
    /// Input to each linear layer (first entry is the batch itself).
    acts: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre_acts: Vec<Array2<f64>>,
    raw_embed: Array2<f64>,
    norms: Vec<f64>,
    guarded: Vec<bool>,
    pub embeddings: Array2<f64>,
}

/// Forward pass returning row-L2-normalized embeddings plus the cache needed
/// to backpropagate.
pub fn forward_cached(
    cfg: &NetConfig,
    p: &ParamVector,
    batch: &Array2<f64>,
) -> Result<ForwardCache> {
    if batch.ncols() != cfg.input_dim {
        return Err(Error::InvalidParameter(format!(
            "batch has {} columns, net expects {}",
            batch.ncols(),
            cfg.input_dim
        )));
    }
    let n_layers = cfg.hidden_dims.len() + 1;
    if p.layers.len() != 2 * n_layers {
        return Err(Error::StructuralMismatch(format!(
            "params have {} layers, net expects {}",
            p.layers.len(),
            2 * n_layers
        )));
    }
    let mut acts = vec![batch.clone()];
    let mut pre_acts = Vec::new();
    for i in 0..n_layers - 1 {
        let z = acts[i].dot(&weight_view(p, i).t()) + &bias_view(p, i);
        acts.push(activate(cfg, &z));
        pre_acts.push(z);
    }
    let raw =
        acts[n_layers - 1].dot(&weight_view(p, n_layers - 1).t()) + &bias_view(p, n_layers - 1);

    let rows = raw.nrows();
    let mut embeddings = Array2::zeros((rows, cfg.embed_dim));
    let mut norms = Vec::with_capacity(rows);
    let mut guarded = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = raw.row(r);
        let norm = row.dot(&row).sqrt();
        if norm < NORM_GUARD {
            embeddings[[r, 0]] = 1.0;
            norms.push(0.0);
            guarded.push(true);
        } else {
            for c in 0..cfg.embed_dim {
                embeddings[[r, c]] = row[c] / norm;
            }
            norms.push(norm);
            guarded.push(false);
        }
    }
    Ok(ForwardCache {
        acts,
        pre_acts,
        raw_embed: raw,
        norms,
        guarded,
        embeddings,
    })
}

/// Row-normalized embeddings, one per input row.
pub fn forward(cfg: &NetConfig, p: &ParamVector, batch: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward_cached(cfg, p, batch)?.embeddings)
}

/// Backpropagates `upstream` (the loss gradient with respect to the
/// normalized embeddings) through a cached forward pass.
pub fn backward_cached(
    cfg: &NetConfig,
    p: &ParamVector,
    cache: &ForwardCache,
    upstream: &Array2<f64>,
) -> Result<ParamVector> {
    if upstream.dim() != cache.embeddings.dim() {
        return Err(Error::InvalidParameter(format!(
            "upstream gradient has shape {:?}, embeddings {:?}",
            upstream.dim(),
            cache.embeddings.dim()
        )));
    }
    let n_layers = cfg.hidden_dims.len() + 1;
    let rows = upstream.nrows();

    // Through row normalization: e = r/|r|, de/dr = (I - e e^T)/|r|.
    let mut delta = Array2::zeros(cache.raw_embed.dim());
    for r in 0..rows {
        if cache.guarded[r] {
            continue; // guard output is constant
        }
        let e = cache.embeddings.row(r);
        let g = upstream.row(r);
        let proj = g.dot(&e);
        for c in 0..cfg.embed_dim {
            delta[[r, c]] = (g[c] - proj * e[c]) / cache.norms[r];
        }
    }

    let mut grad = p.zeros_like();
    for i in (0..n_layers).rev() {
        let gw = delta.t().dot(&cache.acts[i]);
        let gb = delta.sum_axis(Axis(0));
        {
            let wl = &mut grad.layers[2 * i];
            for (dst, src) in wl.values.iter_mut().zip(gw.iter()) {
                *dst = *src as f32;
            }
            let bl = &mut grad.layers[2 * i + 1];
            for (dst, src) in bl.values.iter_mut().zip(gb.iter()) {
                *dst = *src as f32;
            }
        }
        if i > 0 {
            delta = delta.dot(&weight_view(p, i)) * activate_grad(cfg, &cache.pre_acts[i - 1]);
        }
    }
    Ok(grad)
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the normalized embeddings.
pub fn backward(
    cfg: &NetConfig,
    p: &ParamVector,
    batch: &Array2<f64>,
    upstream: &Array2<f64>,
) -> Result<ParamVector> {
    let cache = forward_cached(cfg, p, batch)?;
    backward_cached(cfg, p, &cache, upstream)
}

/// Adam optimizer state. Moment accumulators mirror the model structure.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamVector,
    pub v: ParamVector,
}

impl AdamState {
    pub fn new(model: &ParamVector, lr: f64, beta1: f64, beta2: f64, eps: f64) -> AdamState {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update, with the mask re-applied afterwards so
/// pruned coordinates stay exactly zero.
pub fn adam_step(
    state: &mut AdamState,
    model: &mut ParamVector,
    grad: &ParamVector,
    mask: &PruneMask,
) -> Result<()> {
    model.check_structure(grad)?;
    mask.check_structure_params(model)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for li in 0..model.layers.len() {
        let g = &grad.layers[li].values;
        let m = &mut state.m.layers[li].values;
        let v = &mut state.v.layers[li].values;
        let w = &mut model.layers[li].values;
        for ci in 0..w.len() {
            let gi = f64::from(g[ci]);
            let mi = state.beta1 * f64::from(m[ci]) + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * f64::from(v[ci]) + (1.0 - state.beta2) * gi * gi;
            m[ci] = mi as f32;
            v[ci] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            w[ci] = (f64::from(w[ci]) - state.lr * m_hat / (v_hat.sqrt() + state.eps)) as f32;
        }
    }
    *model = apply_mask(model, mask)?;
    Ok(())
}
