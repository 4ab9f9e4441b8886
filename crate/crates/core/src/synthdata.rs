//! Synthetic non-IID retrieval data (identities x cameras x clients with
//! label, feature and quantity skew) and the Rank-1 / mAP / CMC metrics.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;

/// Generator knobs. Ranges are sampled per client, which is where the
/// quantity and feature skew come from.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewSpec {
    pub input_dim: usize,
    pub identities_min: usize,
    pub identities_max: usize,
    pub images_per_identity_min: usize,
    pub images_per_identity_max: usize,
    pub cameras_min: usize,
    pub cameras_max: usize,
    /// Magnitude of the per-camera affine shift (feature skew).
    pub camera_shift: f64,
    pub noise_scale: f64,
    /// Fraction of samples held out as queries; the rest form the gallery
    /// and the training set.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl SkewSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities_min == 0 || self.identities_min > self.identities_max {
            return Err(Error::Config(
                "data.identities_min must be in [1, identities_max]".into(),
            ));
        }
        if self.images_per_identity_min < 2
            || self.images_per_identity_min > self.images_per_identity_max
        {
            return Err(Error::Config(
                "data.images_per_identity_min must be in [2, images_per_identity_max]".into(),
            ));
        }
        if self.cameras_min < 2 || self.cameras_min > self.cameras_max {
            return Err(Error::Config(
                "data.cameras_min must be in [2, cameras_max]".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) || self.holdout_fraction <= 0.0 {
            return Err(Error::Config(
                "data.holdout_fraction must lie in (0, 0.5)".into(),
            ));
        }
        if self.camera_shift < 0.0 || self.noise_scale < 0.0 {
            return Err(Error::Config(
                "data.camera_shift and data.noise_scale must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One client's private data. Identity ids are globally disjoint across
/// clients; the query flags carve out the held-out retrieval split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub samples: Array2<f32>,
    pub identity: Vec<usize>,
    pub camera: Vec<usize>,
    pub is_query: Vec<bool>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }
}

/// Draws `k` clients: per-client identity latents, camera shift vectors and
/// Gaussian image noise, all from one seeded stream per client.
pub fn generate_clients(spec: &SkewSpec, k: usize) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    if k == 0 {
        return Err(Error::Config("clients must be >= 1".into()));
    }
    let d = spec.input_dim;
    let mut next_identity = 0usize;
    let mut out = Vec::with_capacity(k);
    for client in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xDA7A, client as u64]));
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let n_ids = rng.gen_range(spec.identities_min..=spec.identities_max);
        let n_cams = rng.gen_range(spec.cameras_min..=spec.cameras_max);

        let shifts: Vec<Vec<f64>> = (0..n_cams)
            .map(|_| {
                let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x *= spec.camera_shift / norm);
                v
            })
            .collect();

        let mut rows: Vec<f32> = Vec::new();
        let mut identity = Vec::new();
        let mut camera = Vec::new();
        for id in 0..n_ids {
            let latent: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let n_img = rng.gen_range(spec.images_per_identity_min..=spec.images_per_identity_max);
            for img in 0..n_img {
                let cam = img % n_cams;
                for c in 0..d {
                    let v = latent[c] + shifts[cam][c] + spec.noise_scale * normal.sample(&mut rng);
                    rows.push(v as f32);
                }
                identity.push(next_identity + id);
                camera.push(cam);
            }
        }
        next_identity += n_ids;

        let n = identity.len();
        let n_queries = ((n as f64 * spec.holdout_fraction).round() as usize).max(1);
        let mut picks: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates: the first n_queries entries are the queries
        for i in 0..n_queries {
            let j = rng.gen_range(i..n);
            picks.swap(i, j);
        }
        let mut is_query = vec![false; n];
        for &i in &picks[..n_queries] {
            is_query[i] = true;
        }

        out.push(ClientDataset {
            samples: Array2::from_shape_vec((n, d), rows).expect("row count matches"),
            identity,
            camera,
            is_query,
        });
    }
    Ok(out)
}

/// Dumps one client's samples as a raw little-endian `f32` matrix next to a
/// textual manifest (dims, seed, generator spec, per-sample labels) so runs
/// can be audited outside the simulator.
pub fn dump_dataset(
    dir: &std::path::Path,
    name: &str,
    data: &ClientDataset,
    spec: &SkewSpec,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * data.samples.len());
    for v in data.samples.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(format!("{name}.mat")), bytes)?;

    let mut manifest = String::new();
    manifest.push_str(&format!(
        "rows={} cols={} seed={}\n",
        data.samples.nrows(),
        data.samples.ncols(),
        spec.seed
    ));
    manifest.push_str(&format!(
        "identities={}..{} images_per_identity={}..{} cameras={}..{}\n",
        spec.identities_min,
        spec.identities_max,
        spec.images_per_identity_min,
        spec.images_per_identity_max,
        spec.cameras_min,
        spec.cameras_max
    ));
    manifest.push_str(&format!(
        "camera_shift={} noise_scale={} holdout_fraction={}\n",
        spec.camera_shift, spec.noise_scale, spec.holdout_fraction
    ));
    manifest.push_str("row,identity,camera,is_query\n");
    for i in 0..data.len() {
        manifest.push_str(&format!(
            "{i},{},{},{}\n",
            data.identity[i], data.camera[i], data.is_query[i] as u8
        ));
    }
    std::fs::write(dir.join(format!("{name}.manifest")), manifest)?;
    Ok(())
}

/// Reads a matrix written by [`dump_dataset`].
pub fn read_matrix(path: &std::path::Path, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != 4 * rows * cols {
        return Err(Error::InvalidParameter(format!(
            "matrix file holds {} bytes, expected {}",
            bytes.len(),
            4 * rows * cols
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub map: f64,
    /// Cumulative match curve; `cmc[0]` equals `rank1`.
    pub cmc: Vec<f64>,
}

/// Standard retrieval protocol: for each query the gallery drops
/// same-identity-same-camera entries, candidates rank by cosine similarity
/// (ties toward the lower gallery index), and queries without any valid
/// cross-camera match are excluded from every metric.
pub fn evaluate_retrieval(
    embeddings: &Array2<f64>,
    identities: &[usize],
    cameras: &[usize],
    is_query: &[bool],
) -> Result<RetrievalMetrics> {
    let n = embeddings.nrows();
    if identities.len() != n || cameras.len() != n || is_query.len() != n {
        return Err(Error::InvalidParameter(
            "metrics inputs must have one entry per embedding row".into(),
        ));
    }
    let queries: Vec<usize> = (0..n).filter(|&i| is_query[i]).collect();
    let gallery: Vec<usize> = (0..n).filter(|&i| !is_query[i]).collect();

    let mut first_hit_ranks = Vec::new();
    let mut aps = Vec::new();
    let mut max_candidates = 0usize;
    for &q in &queries {
        let candidates: Vec<usize> = gallery
            .iter()
            .copied()
            .filter(|&g| !(identities[g] == identities[q] && cameras[g] == cameras[q]))
            .collect();
        let relevant = candidates
            .iter()
            .filter(|&&g| identities[g] == identities[q])
            .count();
        if relevant == 0 {
            continue; // no valid match, excluded from both metrics
        }
        let mut scored: Vec<(f64, usize)> = candidates
            .iter()
            .map(|&g| (embeddings.row(q).dot(&embeddings.row(g)), g))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite sims")
                .then(a.1.cmp(&b.1))
        });
        max_candidates = max_candidates.max(scored.len());

        let mut hits = 0usize;
        let mut ap = 0.0f64;
        let mut first_hit = None;
        for (rank0, &(_, g)) in scored.iter().enumerate() {
            if identities[g] == identities[q] {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0 + 1);
                }
            }
        }
        aps.push(ap / relevant as f64);
        first_hit_ranks.push(first_hit.expect("relevant > 0 implies a hit"));
    }
    if aps.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let q_count = aps.len();
    // integer counts first so rank1 equals cmc[0] exactly
    let mut hits_by_rank = vec![0usize; max_candidates];
    for &r in &first_hit_ranks {
        for slot in hits_by_rank[(r - 1)..].iter_mut() {
            *slot += 1;
        }
    }
    let cmc: Vec<f64> = hits_by_rank
        .into_iter()
        .map(|h| h as f64 / q_count as f64)
        .collect();
    Ok(RetrievalMetrics {
        rank1: cmc[0],
        map: aps.iter().sum::<f64>() / q_count as f64,
        cmc,
    })
}
