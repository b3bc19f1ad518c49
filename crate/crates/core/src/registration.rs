//! 6-DoF pose recovery from soft correspondences.
//!
//! Two paths: hard mutual-argmax matches fed through a seeded RANSAC loop
//! (the default), and a soft path that aligns keypoints against their
//! mass-weighted plan projections in one weighted SVD solve.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, derive_stream, PipelineConfig};
use crate::correspondence::{
    apply_weights, ground_weights, soft_projection, solve_uot, TransportPlan,
};
use crate::error::{Error, Result};
use crate::features::{compute_descriptors, cost_matrix, sample_keypoints, KeypointSet};
use crate::geometry::{PointCloud, RigidTransform};
use crate::ground::{annotate_ground, remove_ground};

/// Hard correspondences extracted from a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseMethod {
    SvdSoft,
    RansacHard,
}

impl PoseMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoseMethod::SvdSoft => "svd_soft",
            PoseMethod::RansacHard => "ransac_hard",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inlier_count: usize,
    pub residual_rms: f64,
    pub method: PoseMethod,
}

/// Weighted Kabsch alignment: the rigid transform minimizing
/// `Σ wᵢ ‖R·srcᵢ + t − dstᵢ‖²`. Needs at least three positively weighted,
/// non-collinear pairs; the reflection case is folded back into SO(3).
pub fn kabsch_weighted(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "kabsch inputs",
            left: src.len(),
            right: dst.len().max(weights.len()),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("kabsch weights", "must be finite and ≥ 0"));
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < 3 {
        return Err(Error::DegenerateGeometry(
            "fewer than 3 positively weighted pairs",
        ));
    }
    let wsum: f64 = weights.iter().sum();
    let mut s_bar = Vector3::zeros();
    let mut d_bar = Vector3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        s_bar += w * s;
        d_bar += w * d;
    }
    s_bar /= wsum;
    d_bar /= wsum;

    let mut h = Matrix3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        h += w * (s - s_bar) * (d - d_bar).transpose();
    }

    let svd = h.svd(true, true);
    let sigma = svd.singular_values;
    if sigma[0] <= 0.0 || sigma[1] <= 1e-12 * sigma[0] {
        return Err(Error::DegenerateGeometry(
            "weighted configuration is collinear",
        ));
    }
    let u = svd.u.ok_or(Error::DegenerateGeometry("svd failed"))?;
    let v_t = svd.v_t.ok_or(Error::DegenerateGeometry("svd failed"))?;
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * u.transpose();
    let translation = d_bar - rotation * s_bar;
    Ok(RigidTransform::from_parts(rotation, translation))
}

/// Mutual-argmax match extraction: row `i` pairs with its best column `j*`
/// when the entry clears `min_weight` and column `j*` points back at `i`.
/// Ties break toward the lower index on both sides.
pub fn extract_matches(plan: &TransportPlan, min_weight: f64) -> MatchSet {
    let values = plan.values();
    let (rows, cols) = values.shape();
    if rows == 0 || cols == 0 {
        return MatchSet::default();
    }

    let mut col_argmax = vec![0usize; cols];
    for j in 0..cols {
        let mut best = 0usize;
        let mut best_v = values[(0, j)];
        for i in 1..rows {
            if values[(i, j)] > best_v {
                best_v = values[(i, j)];
                best = i;
            }
        }
        col_argmax[j] = best;
    }

    let mut matches = Vec::new();
    for i in 0..rows {
        let mut jstar = 0usize;
        let mut best_v = values[(i, 0)];
        for j in 1..cols {
            if values[(i, j)] > best_v {
                best_v = values[(i, j)];
                jstar = j;
            }
        }
        if best_v > 0.0 && best_v >= min_weight && col_argmax[jstar] == i {
            matches.push(Match {
                source: i,
                target: jstar,
                weight: best_v,
            });
        }
    }
    MatchSet { matches }
}

/// Seeded RANSAC over minimal 3-match samples, scoring by inliers within
/// `inlier_radius` under the hypothesis, then refitting on the best inlier
/// set with the match weights. Deterministic for a fixed seed; ties in the
/// inlier count keep the earlier iteration.
pub fn ransac_register(
    keys_a: &KeypointSet,
    keys_b: &KeypointSet,
    matches: &MatchSet,
    iters: usize,
    inlier_radius: f64,
    seed: u64,
) -> Result<RegistrationResult> {
    if matches.len() < 3 {
        return Err(Error::InsufficientMatches {
            required: 3,
            got: matches.len(),
        });
    }
    let src: Vec<Vector3<f64>> = matches
        .matches
        .iter()
        .map(|m| keys_a.positions()[m.source])
        .collect();
    let dst: Vec<Vector3<f64>> = matches
        .matches
        .iter()
        .map(|m| keys_b.positions()[m.target])
        .collect();

    let mut best: Option<(usize, RigidTransform)> = None;
    for it in 0..iters {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_stream(seed, it as u64));
        let sample = rand::seq::index::sample(&mut rng, matches.len(), 3);
        let s: Vec<Vector3<f64>> = sample.iter().map(|k| src[k]).collect();
        let d: Vec<Vector3<f64>> = sample.iter().map(|k| dst[k]).collect();
        let Ok(hyp) = kabsch_weighted(&s, &d, &[1.0, 1.0, 1.0]) else {
            continue;
        };
        let inliers = src
            .iter()
            .zip(&dst)
            .filter(|(s, d)| (hyp.apply(s) - **d).norm() <= inlier_radius)
            .count();
        if best.as_ref().is_none_or(|(c, _)| inliers > *c) {
            best = Some((inliers, hyp));
        }
    }
    let (inlier_count, hypothesis) = best.ok_or(Error::DegenerateGeometry(
        "no valid RANSAC hypothesis; matches may be collinear",
    ))?;

    let inlier_idx: Vec<usize> = (0..matches.len())
        .filter(|&k| (hypothesis.apply(&src[k]) - dst[k]).norm() <= inlier_radius)
        .collect();
    let s: Vec<Vector3<f64>> = inlier_idx.iter().map(|&k| src[k]).collect();
    let d: Vec<Vector3<f64>> = inlier_idx.iter().map(|&k| dst[k]).collect();
    let w: Vec<f64> = inlier_idx
        .iter()
        .map(|&k| matches.matches[k].weight)
        .collect();
    let transform = kabsch_weighted(&s, &d, &w).unwrap_or(hypothesis);

    let residual_rms = if inlier_idx.is_empty() {
        0.0
    } else {
        let ss: f64 = inlier_idx
            .iter()
            .map(|&k| (transform.apply(&src[k]) - dst[k]).norm_squared())
            .sum();
        (ss / inlier_idx.len() as f64).sqrt()
    };

    Ok(RegistrationResult {
        transform,
        inlier_count,
        residual_rms,
        method: PoseMethod::RansacHard,
    })
}

/// Soft pose path: weighted SVD of keypoints against their plan projections,
/// using row masses as weights.
pub fn soft_register(
    keys_a: &KeypointSet,
    keys_b: &KeypointSet,
    plan: &TransportPlan,
) -> Result<RegistrationResult> {
    let proj = soft_projection(plan, keys_b)?;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut w = Vec::new();
    for (i, &ok) in proj.valid.iter().enumerate() {
        if ok {
            src.push(keys_a.positions()[i]);
            dst.push(proj.points[i]);
            w.push(proj.row_mass[i]);
        }
    }
    let transform = kabsch_weighted(&src, &dst, &w)?;
    let wsum: f64 = w.iter().sum();
    let ss: f64 = src
        .iter()
        .zip(&dst)
        .zip(&w)
        .map(|((s, d), &wi)| wi * (transform.apply(s) - d).norm_squared())
        .sum();
    Ok(RegistrationResult {
        transform,
        inlier_count: src.len(),
        residual_rms: (ss / wsum).sqrt(),
        method: PoseMethod::SvdSoft,
    })
}

/// Everything the pair pipeline produced, for diagnostics and evaluation.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub result: RegistrationResult,
    pub keys_a: KeypointSet,
    pub keys_b: KeypointSet,
    /// The final (possibly ground-weighted) plan the pose came from.
    pub plan: TransportPlan,
    pub match_count: usize,
}

fn prepare_cloud(
    cloud: &PointCloud,
    config: &PipelineConfig,
    stage: &'static str,
) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Empty("cloud for registration"));
    }
    let annotated = annotate_ground(cloud, &config.grid.to_grid(), &config.ground.to_params());
    if !config.ground.removal {
        return Ok(annotated);
    }
    let filtered = remove_ground(&annotated, &config.ground.to_params())?;
    if filtered.is_empty() {
        return Err(Error::Pipeline {
            stage,
            reason: "ground removal left no points".into(),
        });
    }
    Ok(filtered)
}

/// Full pairwise inference: ground annotation (and optional removal),
/// keypoints, descriptors, transport plan, ground weighting, and pose
/// recovery. Returns the intermediate artifacts along with the result.
pub fn register_pair_detailed(
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    config: &PipelineConfig,
) -> Result<PairOutcome> {
    let a = prepare_cloud(cloud_a, config, "ground removal (A)")?;
    let b = prepare_cloud(cloud_b, config, "ground removal (B)")?;

    let keys_a = sample_keypoints(
        &a,
        config.features.keypoints,
        derive_seed(config.seed, "keypoints-a"),
    )?;
    let keys_b = sample_keypoints(
        &b,
        config.features.keypoints,
        derive_seed(config.seed, "keypoints-b"),
    )?;
    let n = keys_a.len().min(keys_b.len());
    if n < 3 {
        return Err(Error::Pipeline {
            stage: "keypoints",
            reason: format!("only {n} keypoints available"),
        });
    }
    let keys_a = keys_a.truncated(n);
    let keys_b = keys_b.truncated(n);

    let desc_a = compute_descriptors(&a, &keys_a, config.features.descriptor_radius)?;
    let desc_b = compute_descriptors(&b, &keys_b, config.features.descriptor_radius)?;
    let cost = cost_matrix(&desc_a, &desc_b)?;

    let mut plan = solve_uot(&cost, &config.uot.to_params())?;
    if config.ground.weighting {
        let w = ground_weights(&keys_a, &keys_b)?;
        plan = apply_weights(&plan, &w)?;
    }

    let (result, match_count) = match config.registration.method {
        PoseMethod::RansacHard => {
            let min_weight = config
                .registration
                .min_match_weight
                .unwrap_or(1.0 / (2.0 * n as f64));
            let matches = extract_matches(&plan, min_weight);
            let match_count = matches.len();
            let result = ransac_register(
                &keys_a,
                &keys_b,
                &matches,
                config.registration.ransac_iters,
                config.registration.inlier_radius,
                derive_seed(config.seed, "ransac"),
            )?;
            (result, match_count)
        }
        PoseMethod::SvdSoft => {
            let result = soft_register(&keys_a, &keys_b, &plan)?;
            let count = result.inlier_count;
            (result, count)
        }
    };

    Ok(PairOutcome {
        result,
        keys_a,
        keys_b,
        plan,
        match_count,
    })
}

/// Pose between two clouds; see [`register_pair_detailed`] for the artifacts.
pub fn register_pair(
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    config: &PipelineConfig,
) -> Result<RegistrationResult> {
    register_pair_detailed(cloud_a, cloud_b, config).map(|o| o.result)
}
