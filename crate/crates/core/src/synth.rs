//! Deterministic synthetic scenes with ground-truth labels, transforms and
//! correspondences, so every pipeline stage can be tested against an oracle
//! without real datasets.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, derive_stream};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::io;

/// Scene recipe: a jittered ground disk plus walls, poles and boxes placed by
/// a seeded PRNG.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Radius of the ground disk in meters.
    pub ground_extent: f64,
    pub ground_points: usize,
    pub walls: usize,
    pub poles: usize,
    pub boxes: usize,
    /// Per-coordinate jitter applied to every generated point.
    pub noise_sigma: f64,
    /// Fraction of scene points surviving into the paired cloud.
    pub overlap_fraction: f64,
    /// Surface sampling density for walls and boxes, points per m².
    pub surface_density: f64,
    /// Sampling density along poles, points per meter.
    pub pole_linear_density: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            ground_extent: 20.0,
            ground_points: 4000,
            walls: 4,
            poles: 8,
            boxes: 2,
            noise_sigma: 0.0,
            overlap_fraction: 1.0,
            surface_density: 12.0,
            pole_linear_density: 25.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ground_extent > 0.0) {
            return Err(Error::invalid("scene spec", "ground_extent must be positive"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("scene spec", "noise_sigma must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::invalid("scene spec", "overlap_fraction must be in [0,1]"));
        }
        if !(self.surface_density > 0.0) || !(self.pole_linear_density > 0.0) {
            return Err(Error::invalid("scene spec", "densities must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SceneSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A generated cloud with its per-point ground flags.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    pub is_ground: Vec<bool>,
}

struct Jitter {
    dist: Option<Normal<f64>>,
}

impl Jitter {
    fn new(sigma: f64) -> Self {
        Self {
            dist: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("valid sigma")),
        }
    }

    fn apply(&self, p: Vector3<f64>, rng: &mut impl Rng) -> Vector3<f64> {
        match &self.dist {
            Some(d) => Vector3::new(
                p.x + d.sample(rng),
                p.y + d.sample(rng),
                p.z + d.sample(rng),
            ),
            None => p,
        }
    }
}

fn disk_point(rng: &mut impl Rng, inner: f64, outer: f64) -> (f64, f64) {
    let u: f64 = rng.random_range(0.0..1.0);
    let r = (u * (outer * outer - inner * inner) + inner * inner).sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    (r * a.cos(), r * a.sin())
}

fn sample_wall(
    rng: &mut impl Rng,
    jitter: &Jitter,
    center: Vector3<f64>,
    dir: Vector3<f64>,
    width: f64,
    height: f64,
    density: f64,
    out: &mut Vec<Vector3<f64>>,
) {
    let count = (width * height * density).ceil() as usize;
    for _ in 0..count {
        let u: f64 = rng.random_range(-0.5..0.5);
        let v: f64 = rng.random_range(0.0..1.0);
        let p = center + u * width * dir + Vector3::new(0.0, 0.0, v * height);
        out.push(jitter.apply(p, rng));
    }
}

/// Deterministic scene for a spec: same seed, same bits.
pub fn generate_scene(spec: &SceneSpec) -> Result<LabeledScene> {
    spec.validate()?;
    let jitter = Jitter::new(spec.noise_sigma);
    let mut points = Vec::new();
    let mut is_ground = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "ground"));
    for _ in 0..spec.ground_points {
        let (x, y) = disk_point(&mut rng, 0.0, spec.ground_extent);
        points.push(jitter.apply(Vector3::new(x, y, 0.0), &mut rng));
        is_ground.push(true);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "walls"));
    for _ in 0..spec.walls {
        let (x, y) = disk_point(&mut rng, 0.25 * spec.ground_extent, 0.85 * spec.ground_extent);
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let width = rng.random_range(4.0..10.0);
        let height = rng.random_range(2.2..4.0);
        let before = points.len();
        sample_wall(
            &mut rng,
            &jitter,
            Vector3::new(x, y, 0.0),
            dir,
            width,
            height,
            spec.surface_density,
            &mut points,
        );
        is_ground.extend(std::iter::repeat(false).take(points.len() - before));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "poles"));
    for _ in 0..spec.poles {
        let (x, y) = disk_point(&mut rng, 0.15 * spec.ground_extent, 0.9 * spec.ground_extent);
        let height = rng.random_range(2.0..5.0);
        let count = (height * spec.pole_linear_density).ceil() as usize;
        for _ in 0..count {
            let v: f64 = rng.random_range(0.0..1.0);
            let p = Vector3::new(
                x + rng.random_range(-0.03..0.03),
                y + rng.random_range(-0.03..0.03),
                v * height,
            );
            points.push(jitter.apply(p, &mut rng));
            is_ground.push(false);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "boxes"));
    for _ in 0..spec.boxes {
        let (x, y) = disk_point(&mut rng, 0.2 * spec.ground_extent, 0.8 * spec.ground_extent);
        let (hx, hy) = (rng.random_range(0.4..1.2), rng.random_range(0.4..1.2));
        let hz = rng.random_range(0.8..2.4);
        // Four side faces plus the top, sampled by area.
        let faces = [
            (2.0 * hy * hz, 0usize),
            (2.0 * hy * hz, 1),
            (2.0 * hx * hz, 2),
            (2.0 * hx * hz, 3),
            (4.0 * hx * hy, 4),
        ];
        for (area, face) in faces {
            let count = (area * spec.surface_density).ceil() as usize;
            for _ in 0..count {
                let (u, v): (f64, f64) =
                    (rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0));
                let p = match face {
                    0 => Vector3::new(x + hx, y + u * hy, v * hz),
                    1 => Vector3::new(x - hx, y + u * hy, v * hz),
                    2 => Vector3::new(x + u * hx, y + hy, v * hz),
                    3 => Vector3::new(x + u * hx, y - hy, v * hz),
                    _ => Vector3::new(x + u * hx, y + (2.0 * v - 1.0) * hy, hz),
                };
                points.push(jitter.apply(p, &mut rng));
                is_ground.push(false);
            }
        }
    }

    Ok(LabeledScene {
        cloud: PointCloud::new(points)?,
        is_ground,
    })
}

/// A registered scan pair with ground truth.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub cloud_a: PointCloud,
    pub cloud_b: PointCloud,
    pub t_gt: RigidTransform,
    /// Index pairs (i in A, j in B) that survived into the pair.
    pub correspondences: Vec<(usize, usize)>,
    pub is_ground_a: Vec<bool>,
    pub is_ground_b: Vec<bool>,
}

/// Builds the paired cloud: a seeded `overlap_fraction` subset of the scene
/// is transformed by `t` (with fresh jitter), the remainder is replaced by
/// structure points outside the overlap region, and the result is shuffled.
pub fn make_pair(scene: &LabeledScene, t: &RigidTransform, spec: &SceneSpec) -> ScenePair {
    let n = scene.cloud.len();
    let keep_count = (spec.overlap_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "pair"));
    let jitter = Jitter::new(spec.noise_sigma);

    let mut kept: Vec<usize> = rand::seq::index::sample(&mut rng, n, keep_count).into_vec();
    kept.sort_unstable();

    let mut b_points: Vec<Vector3<f64>> = Vec::with_capacity(n);
    let mut b_ground: Vec<bool> = Vec::with_capacity(n);
    for &i in &kept {
        let p = t.apply(&scene.cloud.points()[i]);
        b_points.push(jitter.apply(p, &mut rng));
        b_ground.push(scene.is_ground[i]);
    }
    // Replacement structure outside the scene disk, then into B's frame.
    let missing = n - keep_count;
    if missing > 0 {
        let clusters = missing.div_ceil(40);
        let mut produced = 0usize;
        for _ in 0..clusters {
            let (x, y) = disk_point(
                &mut rng,
                spec.ground_extent + 6.0,
                spec.ground_extent + 12.0,
            );
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
            let count = 40.min(missing - produced);
            for _ in 0..count {
                let u: f64 = rng.random_range(-1.0..1.0);
                let v: f64 = rng.random_range(0.0..2.0);
                let p = Vector3::new(x, y, 0.0) + u * dir + Vector3::new(0.0, 0.0, v);
                b_points.push(jitter.apply(t.apply(&p), &mut rng));
                b_ground.push(false);
            }
            produced += count;
        }
    }

    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    let mut final_points = vec![Vector3::zeros(); n];
    let mut final_ground = vec![false; n];
    for (s, &dst) in slots.iter().enumerate() {
        final_points[dst] = b_points[s];
        final_ground[dst] = b_ground[s];
    }
    let correspondences: Vec<(usize, usize)> = kept
        .iter()
        .enumerate()
        .map(|(s, &i)| (i, slots[s]))
        .collect();

    ScenePair {
        cloud_a: scene.cloud.clone(),
        cloud_b: PointCloud::new(final_points).expect("finite synthetic points"),
        t_gt: *t,
        correspondences,
        is_ground_a: scene.is_ground.clone(),
        is_ground_b: final_ground,
    }
}

/// Writes a scene in the scan binary format plus a sidecar label CSV
/// (`index,is_ground`).
pub fn export_scene(
    scene: &LabeledScene,
    scan_path: impl AsRef<std::path::Path>,
    labels_path: impl AsRef<std::path::Path>,
) -> Result<()> {
    io::write_scan(scan_path, &scene.cloud)?;
    let mut csv = String::from("index,is_ground\n");
    for (i, g) in scene.is_ground.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", u8::from(*g)));
    }
    io::write_text(labels_path, &csv)
}

/// Recipe for a closed-loop scan sequence through one fixed world.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSpec {
    pub seed: u64,
    pub num_scans: usize,
    pub laps: usize,
    /// Trajectory circle radius in meters.
    pub radius: f64,
    /// Lateral offset of each revisit lap, so loop pairs are near but not
    /// identical.
    pub lap_offset: f64,
    /// Planar sensor range cut for each scan.
    pub sensor_range: f64,
    /// Fresh per-scan jitter, applied in the sensor frame.
    pub noise_sigma: f64,
    pub world: SceneSpec,
}

impl Default for LoopSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scans: 50,
            laps: 2,
            radius: 18.0,
            lap_offset: 1.0,
            sensor_range: 30.0,
            noise_sigma: 0.02,
            world: SceneSpec {
                ground_extent: 35.0,
                ground_points: 12_000,
                walls: 12,
                poles: 16,
                boxes: 6,
                surface_density: 10.0,
                ..SceneSpec::default()
            },
        }
    }
}

/// Generates sensor-frame scans along a multi-lap circular trajectory through
/// one world scene, with the matching world-frame poses. Revisit laps pass
/// within `lap_offset` of the first lap, so loop pairs exist by construction.
pub fn generate_loop_sequence(spec: &LoopSpec) -> Result<(Vec<PointCloud>, Vec<RigidTransform>)> {
    if spec.num_scans == 0 || spec.laps == 0 || spec.num_scans % spec.laps != 0 {
        return Err(Error::invalid(
            "loop spec",
            "num_scans must be a positive multiple of laps",
        ));
    }
    let world = generate_scene(&SceneSpec {
        seed: derive_seed(spec.seed, "world"),
        ..spec.world
    })?;

    let per_lap = spec.num_scans / spec.laps;
    let mut scans = Vec::with_capacity(spec.num_scans);
    let mut poses = Vec::with_capacity(spec.num_scans);
    for t in 0..spec.num_scans {
        let lap = t / per_lap;
        let phase = (t % per_lap) as f64 / per_lap as f64 * std::f64::consts::TAU;
        let radius = spec.radius + lap as f64 * spec.lap_offset;
        let position = Vector3::new(radius * phase.cos(), radius * phase.sin(), 0.0);
        let pose = RigidTransform::from_yaw(phase + std::f64::consts::FRAC_PI_2, position);
        let into_sensor = pose.inverse();

        let jitter = Jitter::new(spec.noise_sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_stream(spec.seed, t as u64));
        let mut pts = Vec::new();
        for p in world.cloud.points() {
            let dx = p.x - position.x;
            let dy = p.y - position.y;
            if (dx * dx + dy * dy).sqrt() <= spec.sensor_range {
                pts.push(jitter.apply(into_sensor.apply(p), &mut rng));
            }
        }
        scans.push(PointCloud::new(pts)?);
        poses.push(pose);
    }
    Ok((scans, poses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_structures_means_all_ground() {
        let spec = SceneSpec {
            walls: 0,
            poles: 0,
            boxes: 0,
            ground_points: 500,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        assert_eq!(scene.cloud.len(), 500);
        assert!(scene.is_ground.iter().all(|&g| g));
    }

    #[test]
    fn zero_ground_means_no_ground_labels() {
        let spec = SceneSpec {
            ground_points: 0,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        assert!(!scene.cloud.is_empty());
        assert!(scene.is_ground.iter().all(|&g| !g));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec {
            noise_sigma: 0.05,
            ..SceneSpec::default()
        };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.is_ground, b.is_ground);
    }

    #[test]
    fn full_overlap_zero_noise_pair_is_exact() {
        let spec = SceneSpec {
            ground_points: 800,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let t = RigidTransform::from_yaw(1.2, Vector3::new(3.0, -2.0, 0.1));
        let pair = make_pair(&scene, &t, &spec);
        assert_eq!(pair.correspondences.len(), scene.cloud.len());
        for &(i, j) in &pair.correspondences {
            let moved = t.apply(&scene.cloud.points()[i]);
            assert_eq!(moved, pair.cloud_b.points()[j]);
            assert_eq!(pair.is_ground_a[i], pair.is_ground_b[j]);
        }
    }

    #[test]
    fn overlap_fraction_counts() {
        let spec = SceneSpec {
            ground_points: 1000,
            walls: 0,
            poles: 0,
            boxes: 0,
            overlap_fraction: 0.6,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let pair = make_pair(&scene, &RigidTransform::identity(), &spec);
        assert_eq!(pair.correspondences.len(), 600);
        assert_eq!(pair.cloud_b.len(), 1000);

        let none = SceneSpec {
            overlap_fraction: 0.0,
            ..spec
        };
        let pair = make_pair(&scene, &RigidTransform::identity(), &none);
        assert!(pair.correspondences.is_empty());
    }

    #[test]
    fn replacement_points_sit_outside_the_scene() {
        let spec = SceneSpec {
            ground_points: 400,
            walls: 0,
            poles: 0,
            boxes: 0,
            overlap_fraction: 0.5,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let t = RigidTransform::identity();
        let pair = make_pair(&scene, &t, &spec);
        let matched: std::collections::BTreeSet<usize> =
            pair.correspondences.iter().map(|&(_, j)| j).collect();
        for (j, p) in pair.cloud_b.points().iter().enumerate() {
            if !matched.contains(&j) {
                let range = (p.x * p.x + p.y * p.y).sqrt();
                assert!(range > spec.ground_extent + 4.0, "distractor at {range}");
            }
        }
    }

    #[test]
    fn loop_sequence_shape_and_revisits() {
        let spec = LoopSpec {
            num_scans: 20,
            laps: 2,
            world: SceneSpec {
                ground_points: 2000,
                walls: 4,
                poles: 6,
                boxes: 2,
                ground_extent: 30.0,
                surface_density: 6.0,
                ..SceneSpec::default()
            },
            ..LoopSpec::default()
        };
        let (scans, poses) = generate_loop_sequence(&spec).unwrap();
        assert_eq!(scans.len(), 20);
        assert_eq!(poses.len(), 20);
        // Second-lap poses revisit first-lap poses within lap_offset.
        for t in 10..20 {
            let d = (poses[t].translation() - poses[t - 10].translation()).norm();
            assert!(d <= spec.lap_offset + 1e-9);
        }
        assert!(scans.iter().all(|s| s.len() > 200));
    }
}
