//! Independent oracles shared by the integration suites: brute-force
//! DBSCAN reachability, brute-force retrieval metrics, and finite-difference
//! gradient checks. Nothing here calls the implementation paths it verifies.
//!
//! Each test binary compiles this module separately, so not every item is
//! used everywhere.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// -- brute-force DBSCAN reachability ---------------------------------------

pub struct ReachabilityOracle {
    pub core: Vec<bool>,
    pub noise: Vec<bool>,
    /// Union-find representative per core point.
    component: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
}

fn find(parent: &mut Vec<usize>, i: usize) -> usize {
    if parent[i] != i {
        let root = find(parent, parent[i]);
        parent[i] = root;
    }
    parent[i]
}

pub fn reachability_oracle(points: &Array2<f64>, eps: f64, min_pts: usize) -> ReachabilityOracle {
    let n = points.nrows();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    let d2: f64 = points
                        .row(i)
                        .iter()
                        .zip(points.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    d2 <= eps2
                })
                .collect()
        })
        .collect();
    let core: Vec<bool> = (0..n).map(|i| neighbors[i].len() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &j in &neighbors[i] {
            if core[j] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let component: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let noise: Vec<bool> = (0..n)
        .map(|i| !core[i] && !neighbors[i].iter().any(|&j| core[j]))
        .collect();
    ReachabilityOracle {
        core,
        noise,
        component,
        neighbors,
    }
}

/// Partition equality up to cluster ids and border-point ties.
pub fn check_labels_against_oracle(
    labels: &[i32],
    oracle: &ReachabilityOracle,
) -> Result<(), String> {
    let n = labels.len();
    for (i, &label) in labels.iter().enumerate() {
        let is_noise = label == -1;
        if is_noise != oracle.noise[i] {
            return Err(format!(
                "point {i}: noise {is_noise} vs oracle {}",
                oracle.noise[i]
            ));
        }
    }
    for i in 0..n {
        if !oracle.core[i] {
            continue;
        }
        for j in (i + 1)..n {
            if !oracle.core[j] {
                continue;
            }
            let same_impl = labels[i] == labels[j];
            let same_oracle = oracle.component[i] == oracle.component[j];
            if same_impl != same_oracle {
                return Err(format!(
                    "core pair ({i},{j}): impl same-cluster {same_impl}, oracle {same_oracle}"
                ));
            }
        }
    }
    for i in 0..n {
        if oracle.core[i] || oracle.noise[i] {
            continue;
        }
        // border point: must carry the label of one adjacent core point
        let ok = oracle.neighbors[i]
            .iter()
            .any(|&j| oracle.core[j] && labels[j] == labels[i]);
        if !ok {
            return Err(format!(
                "border point {i} labeled {} without adjacent core",
                labels[i]
            ));
        }
    }
    Ok(())
}

// -- brute-force retrieval metrics ------------------------------------------

pub struct OracleMetrics {
    pub rank1: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
}

/// Rank computation by counting, average precision by definition; no sorting
/// anywhere. Returns `None` when no query has a valid match.
pub fn brute_force_retrieval(
    emb: &Array2<f64>,
    ids: &[usize],
    cams: &[usize],
    is_query: &[bool],
) -> Option<OracleMetrics> {
    let n = emb.nrows();
    let gallery: Vec<usize> = (0..n).filter(|&i| !is_query[i]).collect();
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    let mut max_cand = 0usize;
    for q in (0..n).filter(|&i| is_query[i]) {
        let cand: Vec<usize> = gallery
            .iter()
            .copied()
            .filter(|&g| !(ids[g] == ids[q] && cams[g] == cams[q]))
            .collect();
        let relevant: Vec<usize> = cand.iter().copied().filter(|&g| ids[g] == ids[q]).collect();
        if relevant.is_empty() {
            continue;
        }
        max_cand = max_cand.max(cand.len());
        let sim = |g: usize| emb.row(q).dot(&emb.row(g));
        let rank_of = |g: usize| -> usize {
            1 + cand
                .iter()
                .filter(|&&h| {
                    let (sh, sg) = (sim(h), sim(g));
                    sh > sg || (sh == sg && h < g)
                })
                .count()
        };
        let ranks: Vec<usize> = relevant.iter().map(|&g| rank_of(g)).collect();
        let first = *ranks.iter().min().expect("non-empty");
        let ap: f64 = ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&x| x <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / relevant.len() as f64;
        first_hits.push(first);
        aps.push(ap);
    }
    if aps.is_empty() {
        return None;
    }
    let q = aps.len() as f64;
    let mut cmc = vec![0.0; max_cand];
    for (k, slot) in cmc.iter_mut().enumerate() {
        *slot = first_hits.iter().filter(|&&r| r <= k + 1).count() as f64 / q;
    }
    Some(OracleMetrics {
        rank1: first_hits.iter().filter(|&&r| r == 1).count() as f64 / q,
        map: aps.iter().sum::<f64>() / q,
        cmc,
    })
}

// -- finite differences ------------------------------------------------------

/// Central finite differences of `f` with respect to every entry of `e`.
pub fn fd_embedding_grad<F: Fn(&Array2<f64>) -> f64>(f: F, e: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut g = Array2::zeros(e.dim());
    for r in 0..e.nrows() {
        for c in 0..e.ncols() {
            let mut plus = e.clone();
            plus[[r, c]] += h;
            let mut minus = e.clone();
            minus[[r, c]] -= h;
            g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    g
}

pub fn assert_grads_close(analytic: &Array2<f64>, fd: &Array2<f64>, label: &str) {
    for (a, f) in analytic.iter().zip(fd.iter()) {
        let tol = 1e-4 * a.abs().max(f.abs()) + 1e-7;
        assert!(
            (a - f).abs() <= tol,
            "{label}: analytic {a} vs finite difference {f}"
        );
    }
}

// -- seeded random helpers ----------------------------------------------------

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

pub fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = random_matrix(rng, rows, cols, 1.0);
    for r in 0..rows {
        let norm = m.row(r).dot(&m.row(r)).sqrt().max(1e-9);
        for c in 0..cols {
            m[[r, c]] /= norm;
        }
    }
    m
}
