//! Pipeline configuration: one TOML file of key/value sections covering every
//! tunable, plus the seed-derivation scheme all stages share.
//!
//! Seed fan-out: each stage derives its own seed as the FNV-1a hash of the
//! stage name folded over the little-endian bytes of the master seed
//! ([`derive_seed`]); numbered streams (RANSAC iterations, trials) come from
//! a splitmix64 step over `seed ^ index` ([`derive_stream`]). Both are stable
//! across platforms and documented here so runs can be reproduced elsewhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correspondence::UotParams;
use crate::error::{Error, Result};
use crate::ground::{GroundParams, PatchGrid};
use crate::registration::PoseMethod;

/// FNV-1a over the master seed bytes then the stage name.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x00000100000001b3;
    let mut h = OFFSET;
    for b in master.to_le_bytes().into_iter().chain(stage.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// splitmix64 finalizer over `seed ^ index`, for per-iteration streams.
pub fn derive_stream(seed: u64, index: u64) -> u64 {
    let mut z = (seed ^ index.wrapping_mul(0x9e3779b97f4a7c15)).wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rings: usize,
    pub sectors: usize,
    pub max_range: f64,
    pub min_points_per_patch: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        let g = PatchGrid::default();
        Self {
            rings: g.num_rings,
            sectors: g.num_sectors,
            max_range: g.max_range,
            min_points_per_patch: g.min_points_per_patch,
        }
    }
}

impl GridConfig {
    pub fn to_grid(&self) -> PatchGrid {
        PatchGrid {
            num_rings: self.rings,
            num_sectors: self.sectors,
            max_range: self.max_range,
            min_points_per_patch: self.min_points_per_patch,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundConfig {
    pub uprightness_sharpness: f64,
    /// Expected ground height in the sensor frame; −1.7 m suits a roof-mounted
    /// scanner, 0 suits the synthetic scenes.
    pub elevation_mean: f64,
    pub elevation_sigma: f64,
    pub flatness_sigma: f64,
    pub threshold: f64,
    /// Drop likely-ground points before keypoint sampling.
    pub removal: bool,
    /// Multiply the transport plan by the non-ground factors.
    pub weighting: bool,
}

impl Default for GroundConfig {
    fn default() -> Self {
        let p = GroundParams::default();
        Self {
            uprightness_sharpness: p.uprightness_sharpness,
            elevation_mean: p.elevation_mean,
            elevation_sigma: p.elevation_sigma,
            flatness_sigma: p.flatness_sigma,
            threshold: p.ground_prob_threshold,
            removal: false,
            weighting: true,
        }
    }
}

impl GroundConfig {
    pub fn to_params(&self) -> GroundParams {
        GroundParams {
            uprightness_sharpness: self.uprightness_sharpness,
            elevation_mean: self.elevation_mean,
            elevation_sigma: self.elevation_sigma,
            flatness_sigma: self.flatness_sigma,
            ground_prob_threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub keypoints: usize,
    pub descriptor_radius: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            keypoints: 4096,
            descriptor_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UotConfig {
    pub lambda: f64,
    pub rho: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for UotConfig {
    fn default() -> Self {
        let p = UotParams::default();
        Self {
            lambda: p.lambda,
            rho: p.rho,
            max_iters: p.max_iters,
            tolerance: p.tolerance,
        }
    }
}

impl UotConfig {
    pub fn to_params(&self) -> UotParams {
        UotParams {
            lambda: self.lambda,
            rho: self.rho,
            max_iters: self.max_iters,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// "ransac" or "svd_soft".
    #[serde(with = "pose_method_serde")]
    pub method: PoseMethod,
    /// Minimum plan entry for a mutual match; defaults to 1/(2N) at runtime.
    pub min_match_weight: Option<f64>,
    pub ransac_iters: usize,
    pub inlier_radius: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            method: PoseMethod::RansacHard,
            min_match_weight: None,
            ransac_iters: 1000,
            inlier_radius: 0.6,
        }
    }
}

mod pose_method_serde {
    use super::PoseMethod;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &PoseMethod, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match m {
            PoseMethod::RansacHard => "ransac",
            PoseMethod::SvdSoft => "svd_soft",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PoseMethod, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "ransac" => Ok(PoseMethod::RansacHard),
            "svd_soft" => Ok(PoseMethod::SvdSoft),
            other => Err(serde::de::Error::custom(format!(
                "unknown pose method '{other}' (expected 'ransac' or 'svd_soft')"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub vocab_k: usize,
    pub vocab_iters: usize,
    pub exclusion_window: usize,
    pub top_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            vocab_k: 32,
            vocab_iters: 50,
            exclusion_window: 100,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub positive_radius: f64,
    pub negative_radius: f64,
    /// Overlap radius of the geometric weights (evaluation-time only).
    pub overlap_radius: f64,
    /// Average RME/TME over all registered pairs instead of successes only.
    pub rme_tme_all_pairs: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            positive_radius: 4.0,
            negative_radius: 10.0,
            overlap_radius: 0.5,
            rme_tme_all_pairs: false,
        }
    }
}

/// Every tunable of the pipeline in one place. All fields have defaults, so a
/// config file only needs the overrides.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for sequence evaluation; 0 uses the rayon default.
    pub workers: usize,
    /// Optional sensor-to-reference calibration file (12-value line).
    pub calib: Option<PathBuf>,
    pub grid: GridConfig,
    pub ground: GroundConfig,
    pub features: FeatureConfig,
    pub uot: UotConfig,
    pub registration: RegistrationConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every numeric constraint of the owning modules and that
    /// referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        self.grid.to_grid().validate()?;
        self.ground.to_params().validate()?;
        self.uot.to_params().validate()?;
        if self.features.keypoints < 3 {
            return Err(Error::Config("features.keypoints must be at least 3".into()));
        }
        if !(self.features.descriptor_radius > 0.0) {
            return Err(Error::Config(
                "features.descriptor_radius must be positive".into(),
            ));
        }
        if self.registration.ransac_iters < 1 {
            return Err(Error::Config(
                "registration.ransac_iters must be at least 1".into(),
            ));
        }
        if !(self.registration.inlier_radius > 0.0) {
            return Err(Error::Config(
                "registration.inlier_radius must be positive".into(),
            ));
        }
        if let Some(w) = self.registration.min_match_weight {
            if !(w > 0.0) {
                return Err(Error::Config(
                    "registration.min_match_weight must be positive".into(),
                ));
            }
        }
        if self.retrieval.vocab_k < 1 {
            return Err(Error::Config("retrieval.vocab_k must be at least 1".into()));
        }
        if self.retrieval.top_k < 1 {
            return Err(Error::Config("retrieval.top_k must be at least 1".into()));
        }
        if !(self.eval.positive_radius > 0.0)
            || self.eval.positive_radius > self.eval.negative_radius
        {
            return Err(Error::Config(
                "eval radii must satisfy 0 < positive ≤ negative".into(),
            ));
        }
        if !(self.eval.overlap_radius > 0.0) {
            return Err(Error::Config("eval.overlap_radius must be positive".into()));
        }
        if let Some(calib) = &self.calib {
            if !calib.exists() {
                return Err(Error::Config(format!(
                    "calib path {} does not exist",
                    calib.display()
                )));
            }
        }
        Ok(())
    }

    /// Defaults adjusted for the synthetic scenes: ground at z = 0, desk-scale
    /// patch grid, and 256 keypoints.
    pub fn synthetic() -> Self {
        let mut c = Self::default();
        c.ground.elevation_mean = 0.0;
        c.grid = GridConfig {
            rings: 6,
            sectors: 16,
            max_range: 40.0,
            min_points_per_patch: 8,
        };
        c.features.keypoints = 256;
        c
    }
}
