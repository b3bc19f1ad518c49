use loopmatch::cli::run_synth_bench;
use loopmatch::config::PipelineConfig;
use loopmatch::synth::SceneSpec;

fn main() {
    for radius in [1.5f64, 2.0, 3.0] {
        for noise in [0.02f64, 0.04] {
            let spec = SceneSpec {
                seed: 1234,
                ground_extent: 14.0,
                ground_points: 3200,
                walls: 2,
                poles: 4,
                boxes: 0,
                noise_sigma: noise,
                overlap_fraction: 1.0,
                surface_density: 12.0,
                ..SceneSpec::default()
            };
            let mut cfg = PipelineConfig::synthetic();
            cfg.uot.lambda = 0.005;
            cfg.uot.max_iters = 800;
            cfg.features.descriptor_radius = radius;
            let report = run_synth_bench(&spec, 16, &cfg).unwrap();
            let base = report.summaries.iter().find(|s| s.variant == "baseline").unwrap();
            let weighted = report.summaries.iter().find(|s| s.variant == "weighting").unwrap();
            let mut higher = 0;
            for t in 0..16 {
                let b = report.records.iter().find(|r| r.trial == t && r.variant == "baseline").unwrap();
                let w = report.records.iter().find(|r| r.trial == t && r.variant == "weighting").unwrap();
                if w.inlier_ratio > b.inlier_ratio { higher += 1; }
            }
            println!(
                "radius={radius} noise={noise}: base med=({:.3}°,{:.3}m) succ={}/16 | weight med=({:.3}°,{:.3}m) succ={}/16 | ratio higher {}/16",
                base.median_rme_deg, base.median_tme_m, base.successes,
                weighted.median_rme_deg, weighted.median_tme_m, weighted.successes,
                higher
            );
        }
    }
}
