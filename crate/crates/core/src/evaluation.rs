//! Loop-closure and registration metrics: pair labeling by pose distance,
//! average precision in two flavors, max F1, recall@k, pose errors, and the
//! success-rate / RME / TME summary.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::global_desc::{query_candidates, DescriptorDatabase};

/// A registration counts as a success below 5° and 2 m.
pub const ROTATION_SUCCESS_DEG: f64 = 5.0;
pub const TRANSLATION_SUCCESS_M: f64 = 2.0;

/// Positive / negative pair sets under the two-radius protocol; pairs whose
/// distance falls between the radii stay unlabeled.
#[derive(Debug, Clone)]
pub struct PairLabels {
    pub positives: BTreeSet<(usize, usize)>,
    pub negatives: BTreeSet<(usize, usize)>,
    pub positive_radius: f64,
    pub negative_radius: f64,
    pub exclusion_window: usize,
}

impl PairLabels {
    pub fn is_positive(&self, query: usize, candidate: usize) -> bool {
        self.positives.contains(&(query, candidate))
    }

    /// Queries that have at least one positive candidate.
    pub fn queries_with_positives(&self) -> BTreeSet<usize> {
        self.positives.iter().map(|(q, _)| *q).collect()
    }
}

/// Labels every (query, earlier candidate) pair outside the exclusion window
/// by the Euclidean distance between pose translations: positive below
/// `positive_radius`, negative above `negative_radius`.
pub fn label_pairs(
    poses: &[RigidTransform],
    positive_radius: f64,
    negative_radius: f64,
    exclusion_window: usize,
) -> Result<PairLabels> {
    if poses.is_empty() {
        return Err(Error::Empty("poses for labeling"));
    }
    if !(positive_radius > 0.0) || positive_radius > negative_radius {
        return Err(Error::invalid(
            "pair labeling radii",
            "need 0 < positive_radius ≤ negative_radius",
        ));
    }
    let mut positives = BTreeSet::new();
    let mut negatives = BTreeSet::new();
    for q in 0..poses.len() {
        let Some(limit) = q.checked_sub(exclusion_window) else {
            continue;
        };
        for c in 0..=limit {
            if c == q {
                continue;
            }
            let d = (poses[q].translation() - poses[c].translation()).norm();
            if d < positive_radius {
                positives.insert((q, c));
            } else if d > negative_radius {
                negatives.insert((q, c));
            }
        }
    }
    Ok(PairLabels {
        positives,
        negatives,
        positive_radius,
        negative_radius,
        exclusion_window,
    })
}

/// One scored loop-closure decision.
#[derive(Debug, Clone, Copy)]
pub struct DetectionRecord {
    pub query: usize,
    pub candidate: usize,
    pub score: f64,
    pub is_true_positive: bool,
}

/// Step-interpolated average precision of a record list:
/// `AP = Σ (Rₙ − Rₙ₋₁)·Pₙ` over the descending-score sweep, with recall
/// normalized by the number of positive records. All-negative lists score 0.
pub fn average_precision(records: &[DetectionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("average precision of no records"));
    }
    let mut sorted: Vec<&DetectionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.query.cmp(&b.query))
            .then(a.candidate.cmp(&b.candidate))
    });
    let total_tp = sorted.iter().filter(|r| r.is_true_positive).count();
    if total_tp == 0 {
        return Ok(0.0);
    }
    let mut ap = 0.0;
    let mut tp = 0usize;
    for (n, rec) in sorted.iter().enumerate() {
        if rec.is_true_positive {
            tp += 1;
            let precision = tp as f64 / (n + 1) as f64;
            ap += precision / total_tp as f64; // ΔR = 1/total_tp at each TP
        }
    }
    Ok(ap)
}

/// (recall, precision) curve points along the descending-score sweep.
pub fn pr_curve(records: &[DetectionRecord]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<&DetectionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.query.cmp(&b.query))
            .then(a.candidate.cmp(&b.candidate))
    });
    let total_tp = sorted.iter().filter(|r| r.is_true_positive).count();
    let mut out = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (n, rec) in sorted.iter().enumerate() {
        if rec.is_true_positive {
            tp += 1;
        }
        let recall = if total_tp > 0 {
            tp as f64 / total_tp as f64
        } else {
            0.0
        };
        out.push((recall, tp as f64 / (n + 1) as f64));
    }
    out
}

/// Top-1 records: for every query with at least one labeled candidate, the
/// highest-similarity labeled candidate and whether that pair is positive.
pub fn top1_detection_records(
    db: &DescriptorDatabase,
    labels: &PairLabels,
) -> Vec<DetectionRecord> {
    let mut records = Vec::new();
    for (q, qdesc) in db.entries() {
        let mut best: Option<DetectionRecord> = None;
        for (c, cdesc) in db.entries() {
            let labeled =
                labels.is_positive(*q, *c) || labels.negatives.contains(&(*q, *c));
            if !labeled {
                continue;
            }
            let score = qdesc.similarity(cdesc);
            let better = match &best {
                None => true,
                Some(b) => score > b.score || (score == b.score && *c < b.candidate),
            };
            if better {
                best = Some(DetectionRecord {
                    query: *q,
                    candidate: *c,
                    score,
                    is_true_positive: labels.is_positive(*q, *c),
                });
            }
        }
        if let Some(rec) = best {
            records.push(rec);
        }
    }
    records
}

/// All-pair records: every labeled (query, candidate) pair with its
/// similarity.
pub fn all_pair_detection_records(
    db: &DescriptorDatabase,
    labels: &PairLabels,
) -> Vec<DetectionRecord> {
    let mut records = Vec::new();
    for (q, qdesc) in db.entries() {
        for (c, cdesc) in db.entries() {
            let positive = labels.is_positive(*q, *c);
            if !positive && !labels.negatives.contains(&(*q, *c)) {
                continue;
            }
            records.push(DetectionRecord {
                query: *q,
                candidate: *c,
                score: qdesc.similarity(cdesc),
                is_true_positive: positive,
            });
        }
    }
    records
}

/// AP over each query's single best labeled candidate.
pub fn ap_metric_1(db: &DescriptorDatabase, labels: &PairLabels) -> Result<f64> {
    average_precision(&top1_detection_records(db, labels))
}

/// AP over every labeled candidate pair.
pub fn ap_metric_2(db: &DescriptorDatabase, labels: &PairLabels) -> Result<f64> {
    average_precision(&all_pair_detection_records(db, labels))
}

/// Maximum F1 over thresholds placed at the record scores, with the
/// threshold that attains it (ties resolve to the lowest threshold).
/// Recall is against all positive records.
pub fn max_f1(records: &[DetectionRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("max F1 of no records"));
    }
    let total_tp = records.iter().filter(|r| r.is_true_positive).count();
    if total_tp == 0 {
        let lowest = records
            .iter()
            .map(|r| r.score)
            .fold(f64::INFINITY, f64::min);
        return Ok((0.0, lowest));
    }
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.score).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    thresholds.dedup();

    let mut best = (0.0f64, thresholds[0]);
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for r in records {
            if r.score >= t {
                if r.is_true_positive {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = tp as f64 / total_tp as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

/// Percentage of queries (among those with a positive candidate) whose top-k
/// retrieved list holds at least one true positive. Retrieval runs over all
/// eligible prior scans, labeled or not.
pub fn recall_at_k(db: &DescriptorDatabase, labels: &PairLabels, k: usize) -> Result<f64> {
    let queries = labels.queries_with_positives();
    if queries.is_empty() {
        return Err(Error::UndefinedMetric("recall@k without positive pairs"));
    }
    let mut hits = 0usize;
    for q in &queries {
        let Some(qdesc) = db.get(*q) else { continue };
        let retrieved = query_candidates(db, qdesc, *q, k, labels.exclusion_window);
        if retrieved.iter().any(|(c, _)| labels.is_positive(*q, *c)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / queries.len() as f64)
}

/// Rotation error in degrees (angle of `R_est · R_gtᵀ`) and Euclidean
/// translation error in meters.
pub fn pose_errors(t_est: &RigidTransform, t_gt: &RigidTransform) -> (f64, f64) {
    let e = t_est.compose(&t_gt.inverse());
    let cos = ((e.rotation().trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rot_deg = cos.acos().to_degrees();
    let trans = (t_est.translation() - t_gt.translation()).norm();
    (rot_deg, trans)
}

pub fn is_registration_success(rot_deg: f64, trans_m: f64) -> bool {
    rot_deg < ROTATION_SUCCESS_DEG && trans_m < TRANSLATION_SUCCESS_M
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryMode {
    /// Mean errors over successful registrations only (the default).
    SuccessfulOnly,
    /// Mean errors over every pair.
    AllPairs,
}

#[derive(Debug, Clone, Copy)]
pub struct RegistrationSummary {
    pub success_rate_pct: f64,
    /// Undefined (None) when no pair qualifies for averaging.
    pub rme_deg: Option<f64>,
    pub tme_m: Option<f64>,
}

/// Success rate plus mean rotation/translation errors of (estimate, truth)
/// pose pairs.
pub fn registration_summary(
    pairs: &[(RigidTransform, RigidTransform)],
    mode: SummaryMode,
) -> Result<RegistrationSummary> {
    if pairs.is_empty() {
        return Err(Error::Empty("registration results"));
    }
    let errors: Vec<(f64, f64)> = pairs
        .iter()
        .map(|(est, gt)| pose_errors(est, gt))
        .collect();
    let successes: Vec<&(f64, f64)> = errors
        .iter()
        .filter(|(r, t)| is_registration_success(*r, *t))
        .collect();
    let success_rate_pct = 100.0 * successes.len() as f64 / pairs.len() as f64;

    let pool: Vec<(f64, f64)> = match mode {
        SummaryMode::SuccessfulOnly => successes.iter().map(|e| **e).collect(),
        SummaryMode::AllPairs => errors.clone(),
    };
    let (rme_deg, tme_m) = if pool.is_empty() {
        (None, None)
    } else {
        let n = pool.len() as f64;
        (
            Some(pool.iter().map(|(r, _)| r).sum::<f64>() / n),
            Some(pool.iter().map(|(_, t)| t).sum::<f64>() / n),
        )
    };
    Ok(RegistrationSummary {
        success_rate_pct,
        rme_deg,
        tme_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::global_desc::GlobalDescriptor;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn translation_pose(x: f64, y: f64) -> RigidTransform {
        RigidTransform::from_yaw(0.0, Vector3::new(x, y, 0.0))
    }

    #[test]
    fn labeling_thresholds() {
        // Query 2 sits 3 m from pose 0; query 4 is 7 m and query 6 is 11 m
        // from their candidates.
        let poses = vec![
            translation_pose(0.0, 0.0),
            translation_pose(100.0, 0.0),
            translation_pose(3.0, 0.0),
            translation_pose(200.0, 0.0),
            translation_pose(7.0, 0.0),
            translation_pose(300.0, 0.0),
            translation_pose(11.0, 0.0),
        ];
        let labels = label_pairs(&poses, 4.0, 10.0, 2).unwrap();
        assert!(labels.is_positive(2, 0));
        assert!(!labels.is_positive(4, 0));
        assert!(!labels.negatives.contains(&(4, 0)));
        assert!(labels.negatives.contains(&(6, 0)));
        // Window: (2, 1) is only 1 apart when window = 2 ⇒ not labeled.
        assert!(!labels.is_positive(2, 1) && !labels.negatives.contains(&(2, 1)));
    }

    #[test]
    fn labeling_boundaries_are_unlabeled() {
        let poses = vec![
            translation_pose(0.0, 0.0),
            translation_pose(4.0, 0.0),
            translation_pose(10.0, 0.0),
        ];
        let labels = label_pairs(&poses, 4.0, 10.0, 1).unwrap();
        // Exactly 4 m: neither; exactly 10 m: neither.
        assert!(!labels.is_positive(1, 0) && !labels.negatives.contains(&(1, 0)));
        assert!(!labels.is_positive(2, 0) && !labels.negatives.contains(&(2, 0)));
    }

    fn rec(score: f64, tp: bool) -> DetectionRecord {
        DetectionRecord {
            query: (score * 1000.0) as usize,
            candidate: 0,
            score,
            is_true_positive: tp,
        }
    }

    #[test]
    fn ap_hand_computed_four_records() {
        let records = vec![
            rec(0.9, true),
            rec(0.8, false),
            rec(0.7, true),
            rec(0.6, false),
        ];
        let ap = average_precision(&records).unwrap();
        assert_relative_eq!(ap, 1.0 * 0.5 + (2.0 / 3.0) * 0.5, epsilon = 1e-12);
        assert_relative_eq!(ap, 0.8333, epsilon = 1e-4);
    }

    #[test]
    fn ap_extremes() {
        let all_tp = vec![rec(0.9, true), rec(0.8, true)];
        assert_relative_eq!(average_precision(&all_tp).unwrap(), 1.0);
        let all_fp = vec![rec(0.9, false), rec(0.8, false)];
        assert_relative_eq!(average_precision(&all_fp).unwrap(), 0.0);
        assert!(average_precision(&[]).is_err());
    }

    #[test]
    fn ap_is_rank_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let records: Vec<DetectionRecord> = (0..200)
            .map(|i| DetectionRecord {
                query: i,
                candidate: 0,
                score: rng.random_range(0.0..1.0),
                is_true_positive: rng.random_bool(0.4),
            })
            .collect();
        let transformed: Vec<DetectionRecord> = records
            .iter()
            .map(|r| DetectionRecord {
                score: (r.score * 3.0).exp(), // strictly increasing map
                ..*r
            })
            .collect();
        assert_relative_eq!(
            average_precision(&records).unwrap(),
            average_precision(&transformed).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ap_of_random_scores_matches_positive_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let records: Vec<DetectionRecord> = (0..n)
            .map(|i| DetectionRecord {
                query: i,
                candidate: 0,
                score: rng.random_range(0.0..1.0),
                is_true_positive: i % 2 == 0,
            })
            .collect();
        let ap = average_precision(&records).unwrap();
        assert!((ap - 0.5).abs() < 0.05, "AP {ap} should be near 0.5");
    }

    #[test]
    fn max_f1_cases() {
        let all_tp = vec![rec(0.9, true), rec(0.5, true)];
        let (f1, _) = max_f1(&all_tp).unwrap();
        assert_relative_eq!(f1, 1.0);

        // FP scored above the single TP: keeping both is optimal.
        let records = vec![rec(0.9, false), rec(0.5, true)];
        let (f1, threshold) = max_f1(&records).unwrap();
        assert_relative_eq!(f1, 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(threshold, 0.5, epsilon = 1e-12);

        let none = vec![rec(0.9, false)];
        assert_relative_eq!(max_f1(&none).unwrap().0, 0.0);
    }

    #[test]
    fn max_f1_dominates_sampled_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let records: Vec<DetectionRecord> = (0..50)
            .map(|i| DetectionRecord {
                query: i,
                candidate: 0,
                score: rng.random_range(0.0..1.0),
                is_true_positive: rng.random_bool(0.5),
            })
            .collect();
        let (best, _) = max_f1(&records).unwrap();
        let total_tp = records.iter().filter(|r| r.is_true_positive).count();
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let tp = records
                .iter()
                .filter(|r| r.score >= t && r.is_true_positive)
                .count();
            let kept = records.iter().filter(|r| r.score >= t).count();
            let p = if kept > 0 { tp as f64 / kept as f64 } else { 0.0 };
            let r = tp as f64 / total_tp as f64;
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            assert!(best >= f1 - 1e-12);
        }
    }

    fn basis_db(entries: &[(usize, usize)], dim: usize) -> DescriptorDatabase {
        let mut db = DescriptorDatabase::new();
        for (idx, hot) in entries {
            let mut v = vec![0.0; dim];
            v[*hot] = 1.0;
            db.insert(*idx, GlobalDescriptor::from_vector(v).unwrap())
                .unwrap();
        }
        db
    }

    #[test]
    fn recall_at_k_enumeration() {
        // Scans 0..2 are the map; 3, 4, 5 are queries.
        // Query 3 matches scan 0 (positive), query 4 matches scan 1,
        // query 5's positive is scan 2 but its descriptor matches scan 0.
        let db = basis_db(&[(0, 0), (1, 1), (2, 2), (3, 0), (4, 1), (5, 0)], 3);
        let poses = vec![
            translation_pose(0.0, 0.0),
            translation_pose(50.0, 0.0),
            translation_pose(100.0, 0.0),
            translation_pose(1.0, 0.0),   // near scan 0
            translation_pose(51.0, 0.0),  // near scan 1
            translation_pose(101.0, 0.0), // near scan 2
        ];
        let labels = label_pairs(&poses, 4.0, 10.0, 3).unwrap();
        let r1 = recall_at_k(&db, &labels, 1).unwrap();
        assert_relative_eq!(r1, 66.66666666666667, epsilon = 1e-9);
        // Query 5's true match ranks below the two scans tied at score 1.0
        // and 0.0-scored ties; with k = db size every positive is found.
        let r_all = recall_at_k(&db, &labels, db.len()).unwrap();
        assert_relative_eq!(r_all, 100.0);
        // Monotone in k.
        let r3 = recall_at_k(&db, &labels, 3).unwrap();
        assert!(r3 >= r1);
    }

    #[test]
    fn top1_prefers_highest_scoring_labeled_candidate() {
        let db = basis_db(&[(0, 0), (1, 1), (2, 0)], 2);
        let poses = vec![
            translation_pose(0.0, 0.0),
            translation_pose(100.0, 0.0),
            translation_pose(1.0, 0.0),
        ];
        let labels = label_pairs(&poses, 4.0, 10.0, 1).unwrap();
        let recs = top1_detection_records(&db, &labels);
        // Only query 2 has labeled candidates (0 positive, 1 negative).
        assert_eq!(recs.len(), 2); // query 1 also has candidate 0 (negative)
        let q2 = recs.iter().find(|r| r.query == 2).unwrap();
        assert_eq!(q2.candidate, 0);
        assert!(q2.is_true_positive);
        assert_relative_eq!(q2.score, 1.0);
    }

    #[test]
    fn pose_error_cases() {
        let id = RigidTransform::identity();
        let (r, t) = pose_errors(&id, &id);
        assert_relative_eq!(r, 0.0, epsilon = 1e-12);
        assert_relative_eq!(t, 0.0, epsilon = 1e-12);

        let yaw180 = RigidTransform::from_yaw(std::f64::consts::PI, Vector3::zeros());
        let (r, t) = pose_errors(&yaw180, &id);
        assert_relative_eq!(r, 180.0, epsilon = 1e-9);
        assert_relative_eq!(t, 0.0, epsilon = 1e-12);

        let five_two = RigidTransform::from_yaw(5f64.to_radians(), Vector3::new(2.0, 0.0, 0.0));
        let (r, t) = pose_errors(&five_two, &id);
        assert_relative_eq!(r, 5.0, epsilon = 1e-9);
        assert_relative_eq!(t, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_error_rotation_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let a = crate::test_util::random_transform(&mut rng);
            let b = crate::test_util::random_transform(&mut rng);
            let (r_ab, _) = pose_errors(&a, &b);
            let (r_ba, _) = pose_errors(&b, &a);
            assert_relative_eq!(r_ab, r_ba, epsilon = 1e-9);
        }
    }

    #[test]
    fn success_thresholds_are_strict() {
        assert!(!is_registration_success(5.0, 0.0));
        assert!(!is_registration_success(0.0, 2.0));
        assert!(is_registration_success(4.999, 1.999));
    }

    #[test]
    fn summary_hand_case() {
        let id = RigidTransform::identity();
        let ok = RigidTransform::from_yaw(4f64.to_radians(), Vector3::new(1.0, 0.0, 0.0));
        let bad = RigidTransform::from_yaw(10f64.to_radians(), Vector3::new(5.0, 0.0, 0.0));
        let summary =
            registration_summary(&[(ok, id), (bad, id)], SummaryMode::SuccessfulOnly).unwrap();
        assert_relative_eq!(summary.success_rate_pct, 50.0);
        assert_relative_eq!(summary.rme_deg.unwrap(), 4.0, epsilon = 1e-9);
        assert_relative_eq!(summary.tme_m.unwrap(), 1.0, epsilon = 1e-9);

        let exact = registration_summary(&[(id, id)], SummaryMode::SuccessfulOnly).unwrap();
        assert_relative_eq!(exact.success_rate_pct, 100.0);
        assert_relative_eq!(exact.rme_deg.unwrap(), 0.0, epsilon = 1e-12);

        let none = registration_summary(&[(bad, id)], SummaryMode::SuccessfulOnly).unwrap();
        assert_relative_eq!(none.success_rate_pct, 0.0);
        assert!(none.rme_deg.is_none() && none.tme_m.is_none());

        let all = registration_summary(&[(ok, id), (bad, id)], SummaryMode::AllPairs).unwrap();
        assert_relative_eq!(all.rme_deg.unwrap(), 7.0, epsilon = 1e-9);
    }
}
