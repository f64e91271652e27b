//! Descriptor correspondences and RANSAC outlier rejection.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Descriptor, DESCRIPTOR_LEN};
use crate::geometry::{estimate_rigid_svd, CorrespondenceSet, Point3, RigidTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("no features to match (model: {model}, data: {data})")]
    NoFeatures { model: usize, data: usize },
    #[error("need at least 3 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("best hypothesis has {found} inliers, need {required}")]
    ConsensusFailure { found: usize, required: usize },
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub model_index: usize,
    pub data_index: usize,
    /// Euclidean descriptor distance.
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    /// Keep only pairs that are nearest neighbours of each other.
    pub mutual: bool,
    /// Use the kd-tree index instead of the linear scan (same results).
    pub kdtree: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            mutual: true,
            kdtree: false,
        }
    }
}

/// Nearest model descriptor for every data descriptor (ties go to the lower
/// model index), optionally restricted to mutual nearest neighbours. Output is
/// ordered by data index.
pub fn match_nn(
    model: &[Descriptor],
    data: &[Descriptor],
    cfg: &MatcherConfig,
) -> Result<Vec<Match>, MatchError> {
    if model.is_empty() || data.is_empty() {
        return Err(MatchError::NoFeatures {
            model: model.len(),
            data: data.len(),
        });
    }
    let forward: Vec<(usize, f64)>;
    let backward: Option<Vec<(usize, f64)>>;
    if cfg.kdtree {
        let model_tree = KdTree::build(model);
        forward = data.par_iter().map(|d| model_tree.nearest(d)).collect();
        backward = cfg.mutual.then(|| {
            let data_tree = KdTree::build(data);
            model.par_iter().map(|m| data_tree.nearest(m)).collect()
        });
    } else {
        forward = data.par_iter().map(|d| brute_nearest(model, d)).collect();
        backward = cfg
            .mutual
            .then(|| model.par_iter().map(|m| brute_nearest(data, m)).collect());
    }
    Ok(forward
        .into_iter()
        .enumerate()
        .filter(|(j, (i, _))| backward.as_ref().is_none_or(|b| b[*i].0 == *j))
        .map(|(j, (i, d2))| Match {
            model_index: i,
            data_index: j,
            distance: d2.sqrt(),
        })
        .collect())
}

/// Index and squared distance of the closest candidate; lowest index on ties.
pub fn brute_nearest(candidates: &[Descriptor], query: &Descriptor) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let d = query.distance_squared(c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

const LEAF_SIZE: usize = 8;

enum Node {
    Leaf(Vec<usize>),
    Split {
        dim: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Exact kd-tree over descriptors. Returns the same neighbour as
/// [`brute_nearest`], including the tie-break.
pub struct KdTree<'a> {
    points: &'a [Descriptor],
    root: Node,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Descriptor]) -> Self {
        let idx: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, idx);
        Self { points, root }
    }

    fn build_node(points: &[Descriptor], mut idx: Vec<usize>) -> Node {
        if idx.len() <= LEAF_SIZE {
            return Node::Leaf(idx);
        }
        let mut best_dim = 0;
        let mut best_spread = -1.0;
        for dim in 0..DESCRIPTOR_LEN {
            let (lo, hi) = idx
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = points[i].0[dim];
                    (lo.min(v), hi.max(v))
                });
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_dim = dim;
            }
        }
        if best_spread <= 0.0 {
            return Node::Leaf(idx);
        }
        idx.sort_by(|&a, &b| points[a].0[best_dim].total_cmp(&points[b].0[best_dim]));
        let mid = idx.len() / 2;
        let value = points[idx[mid]].0[best_dim];
        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| points[i].0[best_dim] < value);
        if left.is_empty() || right.is_empty() {
            let mut all = left;
            all.extend(right);
            return Node::Leaf(all);
        }
        Node::Split {
            dim: best_dim,
            value,
            left: Box::new(Self::build_node(points, left)),
            right: Box::new(Self::build_node(points, right)),
        }
    }

    pub fn nearest(&self, query: &Descriptor) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.root, query, &mut best);
        best
    }

    fn search(&self, node: &Node, q: &Descriptor, best: &mut (usize, f64)) {
        match node {
            Node::Leaf(idx) => {
                for &i in idx {
                    let d = q.distance_squared(&self.points[i]);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q.0[*dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                // `<=` keeps equal-distance candidates with lower indices reachable.
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    /// Meters.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    /// Set from the pipeline seed; not read from configuration files.
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.5,
            max_iterations: 1000,
            min_inliers: 5,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.inlier_threshold > 0.0) {
            return Err(MatchError::InvalidConfig(
                "inlier_threshold must be positive".into(),
            ));
        }
        if self.max_iterations < 1 {
            return Err(MatchError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if self.min_inliers < 3 {
            return Err(MatchError::InvalidConfig(
                "min_inliers must be at least 3".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RansacOutcome {
    /// Model/data point pairs of the winning hypothesis' inliers.
    pub inliers: CorrespondenceSet,
    /// Per input match (in the caller's order): inlier of the winning hypothesis.
    pub inlier_flags: Vec<bool>,
    /// Transform fitted to the winning minimal sample.
    pub hypothesis: RigidTransform,
    /// Least-squares refit on all inliers; maps data points into the model frame.
    pub transform: RigidTransform,
    /// RMS of `‖model − transform(data)‖` over the inliers.
    pub residual_rms: f64,
    pub iterations: usize,
}

impl RansacOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }
}

/// Three model points closer to a line than `1e-6` relative cross-product magnitude.
fn collinear(a: &Point3, b: &Point3, c: &Point3) -> bool {
    let ab = b - a;
    let ac = c - a;
    let scale = ab.norm() * ac.norm();
    scale == 0.0 || ab.cross(&ac).norm() <= 1e-6 * scale
}

/// RANSAC over 3-point samples of `matches`, scoring hypotheses by how many
/// transformed data points land within `inlier_threshold` of their model point.
///
/// Matches are sorted by (model index, data index) before sampling, so the
/// outcome does not depend on the order they are passed in. The winner has the
/// most inliers; ties go to the lower inlier RMS, then the earlier iteration.
pub fn ransac_filter(
    matches: &[Match],
    model_points: &[Point3],
    data_points: &[Point3],
    cfg: &RansacConfig,
) -> Result<RansacOutcome, MatchError> {
    cfg.validate()?;
    let n = matches.len();
    if n < 3 {
        return Err(MatchError::InsufficientMatches(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (matches[i].model_index, matches[i].data_index));
    let pairs: Vec<(Point3, Point3)> = order
        .iter()
        .map(|&i| {
            let m = &matches[i];
            (model_points[m.model_index], data_points[m.data_index])
        })
        .collect();

    let thr2 = cfg.inlier_threshold * cfg.inlier_threshold;
    let score = |t: &RigidTransform| -> (Vec<bool>, usize, f64) {
        let mut flags = vec![false; n];
        let (mut count, mut sum) = (0usize, 0.0);
        for (k, (m, d)) in pairs.iter().enumerate() {
            let r2 = (m - t.apply(d)).norm_squared();
            if r2 <= thr2 {
                flags[k] = true;
                count += 1;
                sum += r2;
            }
        }
        let rms = if count > 0 {
            (sum / count as f64).sqrt()
        } else {
            f64::INFINITY
        };
        (flags, count, rms)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(usize, f64, RigidTransform, Vec<bool>)> = None;
    for _ in 0..cfg.max_iterations {
        let s = sample(&mut rng, n, 3);
        let (a, b, c) = (s.index(0), s.index(1), s.index(2));
        if collinear(&pairs[a].0, &pairs[b].0, &pairs[c].0) {
            continue;
        }
        let minimal = CorrespondenceSet::new(vec![pairs[a], pairs[b], pairs[c]]);
        let Ok(t) = estimate_rigid_svd(&minimal) else {
            continue;
        };
        let (flags, count, rms) = score(&t);
        let better = match &best {
            None => true,
            Some((bc, brms, _, _)) => count > *bc || (count == *bc && rms < *brms),
        };
        if better {
            best = Some((count, rms, t, flags));
        }
    }

    let Some((count, _, hypothesis, flags)) = best else {
        return Err(MatchError::ConsensusFailure {
            found: 0,
            required: cfg.min_inliers,
        });
    };
    if count < cfg.min_inliers {
        return Err(MatchError::ConsensusFailure {
            found: count,
            required: cfg.min_inliers,
        });
    }
    let inliers = CorrespondenceSet::new(
        pairs
            .iter()
            .zip(&flags)
            .filter(|(_, f)| **f)
            .map(|(p, _)| *p)
            .collect(),
    );
    let transform = estimate_rigid_svd(&inliers).unwrap_or(hypothesis);
    let mut inlier_flags = vec![false; n];
    for (k, &i) in order.iter().enumerate() {
        inlier_flags[i] = flags[k];
    }
    Ok(RansacOutcome {
        residual_rms: inliers.rms_residual(&transform),
        inliers,
        inlier_flags,
        hypothesis,
        transform,
        iterations: cfg.max_iterations,
    })
}
