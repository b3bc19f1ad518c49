//! Batch entry points behind the `loopmatch` binary: per-scan ground
//! annotation, pairwise registration, sequence evaluation, and the synthetic
//! ablation benchmark. Everything here is deterministic for a fixed config;
//! all output rows are sorted before writing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{derive_seed, derive_stream, PipelineConfig};
use crate::correspondence::{correspondence_aux_residual, geometric_weights};
use crate::error::{Error, Result};
use crate::evaluation::{
    all_pair_detection_records, average_precision, is_registration_success, label_pairs, max_f1,
    pose_errors, pr_curve, recall_at_k, top1_detection_records, DetectionRecord,
};
use crate::features::{compute_descriptors, sample_keypoints, DescriptorSet};
use crate::geometry::{PointCloud, RigidTransform};
use crate::global_desc::{aggregate, train_vocabulary, DescriptorDatabase};
use crate::ground::annotate_ground;
use crate::io;
use crate::registration::{register_pair_detailed, PairOutcome};
use crate::synth::{generate_scene, make_pair, SceneSpec};

/// Runs `f` inside a rayon pool sized by the config (0 = rayon default).
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool")
            .install(f)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        Some(x) if x.is_infinite() => "inf".to_string(),
        _ => "undefined".to_string(),
    }
}

/// Annotates one scan and writes `x,y,z,ground_prob` CSV (meters,
/// probability). Returns the CSV so callers can route it to stdout.
pub fn cmd_ground(scan: &Path, config: &PipelineConfig, out: Option<&Path>) -> Result<String> {
    let cloud = io::load_scan(scan)?;
    let annotated = annotate_ground(&cloud, &config.grid.to_grid(), &config.ground.to_params());
    let mut csv = String::from("x_m,y_m,z_m,ground_prob\n");
    let probs = annotated.ground_prob().expect("annotated cloud");
    for (p, g) in annotated.points().iter().zip(probs) {
        let _ = writeln!(csv, "{:.6},{:.6},{:.6},{:.6}", p.x, p.y, p.z, g);
    }
    if let Some(path) = out {
        io::write_text(path, &csv)?;
    }
    Ok(csv)
}

/// Registers two scans and renders the result record as JSON.
pub fn cmd_register(scan_a: &Path, scan_b: &Path, config: &PipelineConfig) -> Result<String> {
    let a = io::load_scan(scan_a)?;
    let b = io::load_scan(scan_b)?;
    let outcome = with_workers(config.workers, || register_pair_detailed(&a, &b, config))?;
    Ok(register_json(&outcome))
}

fn register_json(outcome: &PairOutcome) -> String {
    let r = &outcome.result;
    let rot: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| r.transform.rotation()[(i, j)]).collect())
        .collect();
    let t = r.transform.translation();
    serde_json::json!({
        "rotation": rot,
        "translation": [t.x, t.y, t.z],
        "inlier_count": r.inlier_count,
        "match_count": outcome.match_count,
        "residual_rms_m": r.residual_rms,
        "method": r.method.as_str(),
        "uot_converged": outcome.plan.converged,
        "uot_iterations": outcome.plan.iterations_used,
    })
    .to_string()
}

/// Sequence-level metric values (None = undefined for this sequence).
#[derive(Debug, Clone)]
pub struct SequenceMetrics {
    pub ap_metric_1: Option<f64>,
    pub ap_metric_2: Option<f64>,
    pub max_f1: Option<f64>,
    pub f1_threshold: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub registered_pairs: usize,
    pub success_rate_pct: Option<f64>,
    pub rme_deg: Option<f64>,
    pub tme_m: Option<f64>,
    /// Fraction of positive pairs among all labeled pairs (the chance
    /// baseline for AP metric 2).
    pub positive_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SequenceReport {
    pub metrics: SequenceMetrics,
    pub metrics_csv: String,
    pub pairs_csv: String,
    pub pr_metric1_csv: String,
    pub pr_metric2_csv: String,
}

struct RegisteredPair {
    record: DetectionRecord,
    outcome: Option<PairOutcome>,
    rot_err_deg: Option<f64>,
    trans_err_m: Option<f64>,
    aux_residual_m: Option<f64>,
}

fn scan_descriptors(
    path: &Path,
    index: usize,
    config: &PipelineConfig,
) -> Result<DescriptorSet> {
    let stage_err = |e: Error| Error::Pipeline {
        stage: "sequence scan",
        reason: format!("scan {index} ({}): {e}", path.display()),
    };
    let cloud = io::load_scan(path).map_err(stage_err)?;
    let annotated = annotate_ground(&cloud, &config.grid.to_grid(), &config.ground.to_params());
    let filtered = if config.ground.removal {
        crate::ground::remove_ground(&annotated, &config.ground.to_params()).map_err(stage_err)?
    } else {
        annotated
    };
    if filtered.is_empty() {
        return Err(stage_err(Error::Empty("scan after ground removal")));
    }
    let keys = sample_keypoints(
        &filtered,
        config.features.keypoints,
        derive_seed(config.seed, "keypoints-seq"),
    )
    .map_err(stage_err)?;
    compute_descriptors(&filtered, &keys, config.features.descriptor_radius).map_err(stage_err)
}

/// Full sequence protocol: per-scan descriptors, vocabulary, retrieval
/// metrics, and registration of every query whose best labeled candidate is
/// a true loop.
pub fn evaluate_sequence(
    dir: &Path,
    config: &PipelineConfig,
) -> Result<SequenceReport> {
    let calib = match &config.calib {
        Some(p) => Some(io::load_calib(p)?),
        None => None,
    };
    let meta = io::load_sequence(dir, calib.as_ref())?;
    let sequence_name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());

    with_workers(config.workers, || {
        let sets: Vec<DescriptorSet> = meta
            .scan_paths()
            .par_iter()
            .enumerate()
            .map(|(i, p)| scan_descriptors(p, i, config))
            .collect::<Result<_>>()?;

        let vocab = train_vocabulary(
            &sets,
            config.retrieval.vocab_k,
            derive_seed(config.seed, "vocab"),
            config.retrieval.vocab_iters,
        )?;
        let mut db = DescriptorDatabase::new();
        for (i, set) in sets.iter().enumerate() {
            let g = aggregate(set, &vocab).map_err(|e| Error::Pipeline {
                stage: "aggregation",
                reason: format!("scan {i}: {e}"),
            })?;
            db.insert(i, g)?;
        }

        let labels = label_pairs(
            meta.poses(),
            config.eval.positive_radius,
            config.eval.negative_radius,
            config.retrieval.exclusion_window,
        )?;
        let records1 = top1_detection_records(&db, &labels);
        let records2 = all_pair_detection_records(&db, &labels);

        let ap1 = average_precision(&records1).ok();
        let ap2 = average_precision(&records2).ok();
        let f1 = max_f1(&records1).ok();
        let r1 = recall_at_k(&db, &labels, 1).ok();
        let r5 = recall_at_k(&db, &labels, 5).ok();
        let positive_fraction = if records2.is_empty() {
            None
        } else {
            Some(
                records2.iter().filter(|r| r.is_true_positive).count() as f64
                    / records2.len() as f64,
            )
        };

        // Register every detected loop (top-1 candidate that is a positive).
        let loop_records: Vec<&DetectionRecord> =
            records1.iter().filter(|r| r.is_true_positive).collect();
        let registered: Vec<RegisteredPair> = loop_records
            .par_iter()
            .map(|rec| {
                let t_gt = meta.poses()[rec.candidate]
                    .inverse()
                    .compose(&meta.poses()[rec.query]);
                let run = || -> Result<(PairOutcome, f64, f64, Option<f64>)> {
                    let a = io::load_scan(&meta.scan_paths()[rec.query])?;
                    let b = io::load_scan(&meta.scan_paths()[rec.candidate])?;
                    let outcome = register_pair_detailed(&a, &b, config)?;
                    let (rot, trans) = pose_errors(&outcome.result.transform, &t_gt);
                    let aux = geometric_weights(
                        &outcome.keys_a,
                        &outcome.keys_b,
                        &t_gt,
                        config.eval.overlap_radius,
                    )
                    .and_then(|w| {
                        correspondence_aux_residual(
                            &outcome.plan,
                            &w,
                            &outcome.keys_a,
                            &outcome.keys_b,
                            &t_gt,
                        )
                    })
                    .ok();
                    Ok((outcome, rot, trans, aux))
                };
                match run() {
                    Ok((outcome, rot, trans, aux)) => RegisteredPair {
                        record: **rec,
                        outcome: Some(outcome),
                        rot_err_deg: Some(rot),
                        trans_err_m: Some(trans),
                        aux_residual_m: aux,
                    },
                    Err(_) => RegisteredPair {
                        record: **rec,
                        outcome: None,
                        rot_err_deg: None,
                        trans_err_m: None,
                        aux_residual_m: None,
                    },
                }
            })
            .collect();

        let attempted = registered.len();
        let successes: Vec<(f64, f64)> = registered
            .iter()
            .filter_map(|p| Some((p.rot_err_deg?, p.trans_err_m?)))
            .filter(|(r, t)| is_registration_success(*r, *t))
            .collect();
        let success_rate = if attempted > 0 {
            Some(100.0 * successes.len() as f64 / attempted as f64)
        } else {
            None
        };
        let error_pool: Vec<(f64, f64)> = if config.eval.rme_tme_all_pairs {
            registered
                .iter()
                .filter_map(|p| Some((p.rot_err_deg?, p.trans_err_m?)))
                .collect()
        } else {
            successes.clone()
        };
        let (rme, tme) = if error_pool.is_empty() {
            (None, None)
        } else {
            let n = error_pool.len() as f64;
            (
                Some(error_pool.iter().map(|(r, _)| r).sum::<f64>() / n),
                Some(error_pool.iter().map(|(_, t)| t).sum::<f64>() / n),
            )
        };

        let metrics = SequenceMetrics {
            ap_metric_1: ap1,
            ap_metric_2: ap2,
            max_f1: f1.map(|(v, _)| v),
            f1_threshold: f1.map(|(_, t)| t),
            recall_at_1: r1,
            recall_at_5: r5,
            registered_pairs: attempted,
            success_rate_pct: success_rate,
            rme_deg: rme,
            tme_m: tme,
            positive_fraction,
        };

        let mut metrics_csv = String::from("metric,sequence,value\n");
        for (name, value) in [
            ("ap_metric_1", fmt_opt(metrics.ap_metric_1)),
            ("ap_metric_2", fmt_opt(metrics.ap_metric_2)),
            ("max_f1", fmt_opt(metrics.max_f1)),
            ("max_f1_threshold", fmt_opt(metrics.f1_threshold)),
            ("recall_at_1_pct", fmt_opt(metrics.recall_at_1)),
            ("recall_at_5_pct", fmt_opt(metrics.recall_at_5)),
            ("registered_pairs", format!("{attempted}")),
            ("success_rate_pct", fmt_opt(metrics.success_rate_pct)),
            ("rme_deg", fmt_opt(metrics.rme_deg)),
            ("tme_m", fmt_opt(metrics.tme_m)),
            ("positive_fraction", fmt_opt(metrics.positive_fraction)),
        ] {
            let _ = writeln!(metrics_csv, "{name},{sequence_name},{value}");
        }

        let mut pairs_csv = String::from(
            "query,candidate,similarity,is_positive,registered,rot_err_deg,trans_err_m,\
             success,inlier_count,match_count,residual_rms_m,aux_residual_m,method\n",
        );
        let mut rows: Vec<&DetectionRecord> = records1.iter().collect();
        rows.sort_by_key(|r| (r.query, r.candidate));
        for rec in rows {
            let reg = registered
                .iter()
                .find(|p| p.record.query == rec.query && p.record.candidate == rec.candidate);
            match reg {
                Some(p) => {
                    let success = match (p.rot_err_deg, p.trans_err_m) {
                        (Some(r), Some(t)) => u8::from(is_registration_success(r, t)).to_string(),
                        _ => "0".to_string(),
                    };
                    let (inliers, matches, residual, method) = match &p.outcome {
                        Some(o) => (
                            o.result.inlier_count.to_string(),
                            o.match_count.to_string(),
                            format!("{:.6}", o.result.residual_rms),
                            o.result.method.as_str().to_string(),
                        ),
                        None => (String::new(), String::new(), String::new(), "error".into()),
                    };
                    let _ = writeln!(
                        pairs_csv,
                        "{},{},{:.6},{},1,{},{},{},{},{},{},{},{}",
                        rec.query,
                        rec.candidate,
                        rec.score,
                        u8::from(rec.is_true_positive),
                        fmt_opt(p.rot_err_deg),
                        fmt_opt(p.trans_err_m),
                        success,
                        inliers,
                        matches,
                        residual,
                        fmt_opt(p.aux_residual_m),
                        method,
                    );
                }
                None => {
                    let _ = writeln!(
                        pairs_csv,
                        "{},{},{:.6},{},0,,,,,,,,",
                        rec.query,
                        rec.candidate,
                        rec.score,
                        u8::from(rec.is_true_positive),
                    );
                }
            }
        }

        let render_pr = |records: &[DetectionRecord]| {
            let mut csv = String::from("recall,precision\n");
            for (r, p) in pr_curve(records) {
                let _ = writeln!(csv, "{r:.6},{p:.6}");
            }
            csv
        };

        Ok(SequenceReport {
            metrics,
            metrics_csv,
            pairs_csv,
            pr_metric1_csv: render_pr(&records1),
            pr_metric2_csv: render_pr(&records2),
        })
    })
}

/// Evaluates a sequence directory and writes metrics.csv, pairs.csv and the
/// two PR curves into `out_dir`.
pub fn cmd_eval_sequence(dir: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<SequenceReport> {
    let report = evaluate_sequence(dir, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    io::write_text(out_dir.join("metrics.csv"), &report.metrics_csv)?;
    io::write_text(out_dir.join("pairs.csv"), &report.pairs_csv)?;
    io::write_text(out_dir.join("pr_metric1.csv"), &report.pr_metric1_csv)?;
    io::write_text(out_dir.join("pr_metric2.csv"), &report.pr_metric2_csv)?;
    Ok(report)
}

/// Ablation variants: ground removal and plan weighting toggled independently.
pub const BENCH_VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("removal", true, false),
    ("weighting", false, true),
    ("removal+weighting", true, true),
];

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial: usize,
    pub variant: &'static str,
    /// Infinite when the pipeline failed outright.
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
    pub success: bool,
    pub inlier_count: usize,
    pub match_count: usize,
    pub inlier_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct VariantSummary {
    pub variant: &'static str,
    pub trials: usize,
    pub successes: usize,
    pub success_rate_pct: f64,
    pub median_rme_deg: f64,
    pub median_tme_m: f64,
    /// Means over successful trials only; None when nothing succeeded.
    pub rme_deg: Option<f64>,
    pub tme_m: Option<f64>,
    pub mean_inlier_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<VariantSummary>,
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Runs `trials` seeded scene-pair registrations for every ablation variant.
pub fn run_synth_bench(
    spec: &SceneSpec,
    trials: usize,
    config: &PipelineConfig,
) -> Result<BenchReport> {
    spec.validate()?;
    config.validate()?;

    let records: Vec<Vec<TrialRecord>> = with_workers(config.workers, || {
        (0..trials)
            .into_par_iter()
            .map(|trial| -> Result<Vec<TrialRecord>> {
                let scene_spec = SceneSpec {
                    seed: derive_stream(spec.seed, trial as u64),
                    ..*spec
                };
                let scene = generate_scene(&scene_spec)?;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(scene_spec.seed, "pose"));
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let t_gt = RigidTransform::from_yaw(
                    yaw,
                    nalgebra::Vector3::new(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-0.2..0.2),
                    ),
                );
                let pair = make_pair(&scene, &t_gt, &scene_spec);

                let mut out = Vec::with_capacity(BENCH_VARIANTS.len());
                for (name, removal, weighting) in BENCH_VARIANTS {
                    let mut cfg = config.clone();
                    cfg.seed = derive_stream(config.seed, trial as u64);
                    cfg.ground.removal = removal;
                    cfg.ground.weighting = weighting;
                    let rec = match register_pair_detailed(&pair.cloud_a, &pair.cloud_b, &cfg) {
                        Ok(outcome) => {
                            let (rot, trans) =
                                pose_errors(&outcome.result.transform, &pair.t_gt);
                            let ratio = if outcome.match_count > 0 {
                                outcome.result.inlier_count as f64 / outcome.match_count as f64
                            } else {
                                0.0
                            };
                            TrialRecord {
                                trial,
                                variant: name,
                                rot_err_deg: rot,
                                trans_err_m: trans,
                                success: is_registration_success(rot, trans),
                                inlier_count: outcome.result.inlier_count,
                                match_count: outcome.match_count,
                                inlier_ratio: ratio,
                            }
                        }
                        Err(_) => TrialRecord {
                            trial,
                            variant: name,
                            rot_err_deg: f64::INFINITY,
                            trans_err_m: f64::INFINITY,
                            success: false,
                            inlier_count: 0,
                            match_count: 0,
                            inlier_ratio: 0.0,
                        },
                    };
                    out.push(rec);
                }
                Ok(out)
            })
            .collect::<Result<_>>()
    })?;
    let records: Vec<TrialRecord> = records.into_iter().flatten().collect();

    let summaries = BENCH_VARIANTS
        .iter()
        .map(|(name, _, _)| {
            let of_variant: Vec<&TrialRecord> =
                records.iter().filter(|r| r.variant == *name).collect();
            let successes = of_variant.iter().filter(|r| r.success).count();
            let succ_rot: Vec<f64> = of_variant
                .iter()
                .filter(|r| r.success)
                .map(|r| r.rot_err_deg)
                .collect();
            let succ_trans: Vec<f64> = of_variant
                .iter()
                .filter(|r| r.success)
                .map(|r| r.trans_err_m)
                .collect();
            VariantSummary {
                variant: name,
                trials: of_variant.len(),
                successes,
                success_rate_pct: if of_variant.is_empty() {
                    0.0
                } else {
                    100.0 * successes as f64 / of_variant.len() as f64
                },
                median_rme_deg: median(of_variant.iter().map(|r| r.rot_err_deg).collect()),
                median_tme_m: median(of_variant.iter().map(|r| r.trans_err_m).collect()),
                rme_deg: (!succ_rot.is_empty())
                    .then(|| succ_rot.iter().sum::<f64>() / succ_rot.len() as f64),
                tme_m: (!succ_trans.is_empty())
                    .then(|| succ_trans.iter().sum::<f64>() / succ_trans.len() as f64),
                mean_inlier_ratio: if of_variant.is_empty() {
                    0.0
                } else {
                    of_variant.iter().map(|r| r.inlier_ratio).sum::<f64>()
                        / of_variant.len() as f64
                },
            }
        })
        .collect();

    Ok(BenchReport { records, summaries })
}

impl BenchReport {
    pub fn summary_csv(&self) -> String {
        let mut csv = String::from(
            "variant,trials,successes,success_rate_pct,median_rme_deg,median_tme_m,\
             rme_deg,tme_m,mean_inlier_ratio\n",
        );
        for s in &self.summaries {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                s.variant,
                s.trials,
                s.successes,
                fmt_opt(Some(s.success_rate_pct)),
                fmt_opt(Some(s.median_rme_deg)),
                fmt_opt(Some(s.median_tme_m)),
                fmt_opt(s.rme_deg),
                fmt_opt(s.tme_m),
                fmt_opt(Some(s.mean_inlier_ratio)),
            );
        }
        csv
    }

    pub fn trials_csv(&self) -> String {
        let mut csv = String::from(
            "trial,variant,rot_err_deg,trans_err_m,success,inlier_count,match_count,inlier_ratio\n",
        );
        let mut rows: Vec<&TrialRecord> = self.records.iter().collect();
        rows.sort_by_key(|r| (r.trial, BENCH_VARIANTS.iter().position(|(n, _, _)| *n == r.variant)));
        for r in rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                r.trial,
                r.variant,
                fmt_opt(Some(r.rot_err_deg)),
                fmt_opt(Some(r.trans_err_m)),
                u8::from(r.success),
                r.inlier_count,
                r.match_count,
                fmt_opt(Some(r.inlier_ratio)),
            );
        }
        csv
    }
}

/// Loads a scene spec, runs the ablation benchmark, writes
/// `variants.csv` and `trials.csv` into `out_dir`.
pub fn cmd_synth_bench(
    spec_path: &Path,
    trials: usize,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<BenchReport> {
    let spec = SceneSpec::load(spec_path)?;
    let report = run_synth_bench(&spec, trials, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    io::write_text(out_dir.join("variants.csv"), &report.summary_csv())?;
    io::write_text(out_dir.join("trials.csv"), &report.trials_csv())?;
    Ok(report)
}

/// Loads either the given config or the defaults.
pub fn load_config(path: Option<&PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Exit code mapping: 1 usage/config, 2 data, 3 pipeline degeneracy.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Invalid { .. } => 1,
        Error::Io { .. } | Error::Format { .. } | Error::NotAnnotated => 2,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{export_scene, LabeledScene};

    fn tiny_config() -> PipelineConfig {
        let mut c = PipelineConfig::synthetic();
        c.features.keypoints = 96;
        c.registration.ransac_iters = 300;
        c.workers = 2;
        c
    }

    fn tiny_scene(seed: u64) -> (LabeledScene, SceneSpec) {
        let spec = SceneSpec {
            seed,
            ground_extent: 12.0,
            ground_points: 900,
            walls: 3,
            poles: 5,
            boxes: 1,
            surface_density: 10.0,
            ..SceneSpec::default()
        };
        (generate_scene(&spec).unwrap(), spec)
    }

    #[test]
    fn ground_command_produces_csv() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, _) = tiny_scene(1);
        let scan = dir.path().join("scene.bin");
        export_scene(&scene, &scan, dir.path().join("labels.csv")).unwrap();

        let csv = cmd_ground(&scan, &tiny_config(), None).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x_m,y_m,z_m,ground_prob");
        assert_eq!(lines.len(), scene.cloud.len() + 1);
    }

    #[test]
    fn ground_command_empty_scan_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let scan = dir.path().join("empty.bin");
        std::fs::write(&scan, b"").unwrap();
        let csv = cmd_ground(&scan, &tiny_config(), None).unwrap();
        assert_eq!(csv, "x_m,y_m,z_m,ground_prob\n");
    }

    #[test]
    fn ground_command_missing_file_is_io_error() {
        let err = cmd_ground(Path::new("/no/such.bin"), &tiny_config(), None).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("/no/such.bin"));
    }

    #[test]
    fn register_command_identity_on_identical_scans() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, _) = tiny_scene(2);
        let scan = dir.path().join("scene.bin");
        crate::io::write_scan(&scan, &scene.cloud).unwrap();
        let json = cmd_register(&scan, &scan, &tiny_config()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let t = v["translation"].as_array().unwrap();
        for c in t {
            assert!(c.as_f64().unwrap().abs() < 1e-6);
        }
        let r = &v["rotation"];
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r[i][j].as_f64().unwrap() - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn synth_bench_zero_trials_gives_header_only() {
        let report = run_synth_bench(&SceneSpec::default(), 0, &tiny_config()).unwrap();
        assert!(report.records.is_empty());
        let csv = report.summary_csv();
        assert!(csv.starts_with("variant,"));
        // Four variant rows with zero trials each.
        assert_eq!(csv.lines().count(), 1 + BENCH_VARIANTS.len());
    }

    #[test]
    fn synth_bench_zero_overlap_records_failures() {
        let spec = SceneSpec {
            seed: 3,
            ground_extent: 10.0,
            ground_points: 400,
            walls: 2,
            poles: 3,
            boxes: 0,
            overlap_fraction: 0.0,
            surface_density: 8.0,
            ..SceneSpec::default()
        };
        let mut cfg = tiny_config();
        cfg.features.keypoints = 64;
        cfg.registration.ransac_iters = 100;
        let report = run_synth_bench(&spec, 2, &cfg).unwrap();
        for s in &report.summaries {
            assert_eq!(s.successes, 0, "variant {} succeeded with no overlap", s.variant);
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![1.0, f64::INFINITY, f64::INFINITY]).is_infinite());
    }

    #[test]
    fn eval_sequence_on_tiny_synthetic_loop() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::synth::LoopSpec {
            num_scans: 16,
            laps: 2,
            radius: 10.0,
            sensor_range: 18.0,
            world: SceneSpec {
                ground_extent: 20.0,
                ground_points: 3000,
                walls: 6,
                poles: 8,
                boxes: 3,
                surface_density: 8.0,
                ..SceneSpec::default()
            },
            ..crate::synth::LoopSpec::default()
        };
        let (scans, poses) = crate::synth::generate_loop_sequence(&spec).unwrap();
        let mut pose_lines = String::new();
        for (i, (scan, pose)) in scans.iter().zip(&poses).enumerate() {
            crate::io::write_scan(dir.path().join(format!("{i:06}.bin")), scan).unwrap();
            let r = pose.rotation();
            let t = pose.translation();
            pose_lines.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {} {} {}\n",
                r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
                r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
                r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            ));
        }
        std::fs::write(dir.path().join("poses.txt"), pose_lines).unwrap();

        let mut cfg = tiny_config();
        cfg.retrieval.exclusion_window = 4;
        cfg.retrieval.vocab_k = 16;
        let out = dir.path().join("out");
        let report = cmd_eval_sequence(dir.path(), &cfg, &out).unwrap();
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("pairs.csv").exists());
        // The second lap revisits the first: loops must exist and be found.
        assert!(report.metrics.ap_metric_1.is_some());
        assert!(report.metrics.registered_pairs > 0);

        // Determinism: a second run writes byte-identical CSVs.
        let out2 = dir.path().join("out2");
        cmd_eval_sequence(dir.path(), &cfg, &out2).unwrap();
        assert_eq!(
            std::fs::read(out.join("metrics.csv")).unwrap(),
            std::fs::read(out2.join("metrics.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(out.join("pairs.csv")).unwrap(),
            std::fs::read(out2.join("pairs.csv")).unwrap()
        );
    }
}
