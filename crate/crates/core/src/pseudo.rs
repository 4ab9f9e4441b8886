//! Unsupervised pseudo-labeling: DBSCAN over embeddings, outlier removal,
//! and per-camera proxy assignment.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const NOISE: i32 = -1;

/// Plain DBSCAN with Euclidean distance. Core points have at least
/// `min_pts` neighbors within `eps` (self included); border points join the
/// first core point that reaches them in scan order; noise is labeled -1.
/// Cluster ids are assigned in discovery order starting at 0.
pub fn dbscan(points: &Array2<f64>, eps: f64, min_pts: usize) -> Result<Vec<i32>> {
    if points.nrows() == 0 {
        return Err(Error::EmptyInput("dbscan points"));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "dbscan eps {eps} must be > 0"
        )));
    }
    if min_pts == 0 {
        return Err(Error::InvalidParameter(
            "dbscan min_pts must be >= 1".into(),
        ));
    }
    let n = points.nrows();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        let pi = points.row(i);
        (0..n)
            .filter(|&j| {
                let d2: f64 = pi
                    .iter()
                    .zip(points.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2 <= eps2
            })
            .collect()
    };

    const UNVISITED: i32 = -2;
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0i32;
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        let ni = neighbors(i);
        if ni.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        let mut queue: std::collections::VecDeque<usize> = ni.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster; // border point
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            let nq = neighbors(q);
            if nq.len() >= min_pts {
                queue.extend(nq);
            }
        }
        cluster += 1;
    }
    Ok(labels)
}

/// Pseudo-labels of one epoch: pid per sample (-1 for outliers), proxy id
/// per non-outlier sample, and the per-camera proxy bookkeeping the
/// contrastive losses index into.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeling {
    pub pid: Vec<i32>,
    /// Global proxy id per sample; `None` for outliers.
    pub proxy: Vec<Option<usize>>,
    /// Dense camera index per sample (position in `cameras`).
    pub camera_idx: Vec<usize>,
    /// Distinct camera values, ascending.
    pub cameras: Vec<usize>,
    /// Proxy count per camera, aligned with `cameras`.
    pub z_per_camera: Vec<usize>,
    pub z_total: usize,
    /// First proxy id of each camera's contiguous block.
    pub camera_offset: Vec<usize>,
    pub pid_of_proxy: Vec<i32>,
    pub camera_of_proxy: Vec<usize>,
}

impl PseudoLabeling {
    /// Proxy id range `[offset, offset + z_c)` of one camera.
    pub fn camera_range(&self, cam_idx: usize) -> std::ops::Range<usize> {
        let start = self.camera_offset[cam_idx];
        start..start + self.z_per_camera[cam_idx]
    }
}

/// Groups non-outlier samples into per-camera subclusters of one pid and
/// enumerates proxies contiguously, ordered by (camera, pid).
pub fn assign_proxies(pids: &[i32], cameras: &[usize]) -> Result<PseudoLabeling> {
    if pids.len() != cameras.len() {
        return Err(Error::InvalidParameter(format!(
            "{} pids vs {} cameras",
            pids.len(),
            cameras.len()
        )));
    }
    if pids.iter().all(|&p| p == NOISE) {
        return Err(Error::EmptyEpoch);
    }

    let mut cams: Vec<usize> = cameras.to_vec();
    cams.sort_unstable();
    cams.dedup();

    // Distinct (camera, pid) pairs over non-outliers, in proxy-id order.
    let mut pairs: Vec<(usize, i32)> = pids
        .iter()
        .zip(cameras)
        .filter(|(p, _)| **p != NOISE)
        .map(|(&p, &c)| (c, p))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();

    let proxy_of_pair = |cam: usize, pid: i32| -> usize {
        pairs
            .binary_search(&(cam, pid))
            .expect("pair present by construction")
    };

    let mut z_per_camera = vec![0usize; cams.len()];
    for &(c, _) in &pairs {
        let ci = cams.binary_search(&c).expect("camera present");
        z_per_camera[ci] += 1;
    }
    let mut camera_offset = Vec::with_capacity(cams.len());
    let mut acc = 0;
    for &z in &z_per_camera {
        camera_offset.push(acc);
        acc += z;
    }

    let proxy: Vec<Option<usize>> = pids
        .iter()
        .zip(cameras)
        .map(|(&p, &c)| (p != NOISE).then(|| proxy_of_pair(c, p)))
        .collect();
    let camera_idx: Vec<usize> = cameras
        .iter()
        .map(|c| cams.binary_search(c).expect("camera present"))
        .collect();

    Ok(PseudoLabeling {
        pid: pids.to_vec(),
        proxy,
        camera_idx,
        z_total: pairs.len(),
        pid_of_proxy: pairs.iter().map(|&(_, p)| p).collect(),
        camera_of_proxy: pairs
            .iter()
            .map(|&(c, _)| cams.binary_search(&c).expect("camera present"))
            .collect(),
        cameras: cams,
        z_per_camera,
        camera_offset,
    })
}
