//! Patch-wise ground probability model.
//!
//! The cloud is partitioned into polar ring/sector patches; each patch gets a
//! plane fit and a ground probability that is the product of an uprightness,
//! an elevation, and a flatness factor. Points inherit the probability of
//! their patch so downstream stages can weaken ground-dominated
//! correspondences or drop ground points outright.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Polar partition of the cloud: rings equally spaced in planar range up to
/// `max_range`, sectors equally spaced in azimuth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchGrid {
    pub num_rings: usize,
    pub num_sectors: usize,
    pub max_range: f64,
    pub min_points_per_patch: usize,
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self {
            num_rings: 4,
            num_sectors: 16,
            max_range: 80.0,
            min_points_per_patch: 10,
        }
    }
}

impl PatchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.num_rings < 1 || self.num_sectors < 1 {
            return Err(Error::invalid("patch grid", "needs at least one ring and sector"));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::invalid("patch grid", "max_range must be positive"));
        }
        Ok(())
    }

    /// Bin of a point, or `None` beyond `max_range`.
    pub fn bin(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        let range = (p.x * p.x + p.y * p.y).sqrt();
        if range > self.max_range {
            return None;
        }
        let ring_width = self.max_range / self.num_rings as f64;
        let ring = ((range / ring_width) as usize).min(self.num_rings - 1);
        let mut azimuth = p.y.atan2(p.x);
        if azimuth < 0.0 {
            azimuth += std::f64::consts::TAU;
        }
        let sector_width = std::f64::consts::TAU / self.num_sectors as f64;
        let sector = ((azimuth / sector_width) as usize).min(self.num_sectors - 1);
        Some((ring, sector))
    }
}

/// Plane statistics of one patch: PCA of the member points.
#[derive(Debug, Clone, Copy)]
pub struct PatchStats {
    pub centroid: Vector3<f64>,
    /// Unit normal along the smallest-eigenvalue direction, oriented so the
    /// z component is nonnegative (ties broken toward the first nonnegative
    /// nonzero component).
    pub normal: Vector3<f64>,
    /// Covariance eigenvalues sorted descending, in m².
    pub eigenvalues: [f64; 3],
    pub point_count: usize,
}

/// Parameters of the three ground-probability factors plus the removal
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundParams {
    /// Exponent on max(0, normal_z); larger is stricter about verticality.
    pub uprightness_sharpness: f64,
    /// Expected ground height (sensor frame); patches above it are penalized.
    pub elevation_mean: f64,
    pub elevation_sigma: f64,
    /// Scale of the exponential flatness penalty on λ3, in m².
    pub flatness_sigma: f64,
    pub ground_prob_threshold: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            uprightness_sharpness: 4.0,
            elevation_mean: -1.7,
            elevation_sigma: 0.3,
            flatness_sigma: 0.01,
            ground_prob_threshold: 0.5,
        }
    }
}

impl GroundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.elevation_sigma > 0.0) || !(self.flatness_sigma > 0.0) {
            return Err(Error::invalid("ground params", "sigmas must be positive"));
        }
        if !(self.uprightness_sharpness > 0.0) {
            return Err(Error::invalid(
                "ground params",
                "uprightness_sharpness must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.ground_prob_threshold) {
            return Err(Error::invalid("ground params", "threshold must be in [0,1]"));
        }
        Ok(())
    }
}

/// One polar patch: its bin, member indices, and the plane fit when the patch
/// has enough points and is non-degenerate.
#[derive(Debug, Clone)]
pub struct Patch {
    pub ring: usize,
    pub sector: usize,
    pub indices: Vec<usize>,
    pub stats: Option<PatchStats>,
}

/// Partitions a cloud into polar patches. Patches below
/// `min_points_per_patch` (or with a degenerate fit) carry no stats; points
/// beyond `max_range` belong to no patch. Patches are emitted in
/// (ring, sector) order.
pub fn segment_patches(cloud: &PointCloud, grid: &PatchGrid) -> Vec<Patch> {
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); grid.num_rings * grid.num_sectors];
    for (i, p) in cloud.points().iter().enumerate() {
        if let Some((ring, sector)) = grid.bin(p) {
            bins[ring * grid.num_sectors + sector].push(i);
        }
    }
    let mut patches = Vec::new();
    for ring in 0..grid.num_rings {
        for sector in 0..grid.num_sectors {
            let indices = std::mem::take(&mut bins[ring * grid.num_sectors + sector]);
            if indices.is_empty() {
                continue;
            }
            let stats = if indices.len() >= grid.min_points_per_patch {
                let pts: Vec<Vector3<f64>> =
                    indices.iter().map(|&i| cloud.points()[i]).collect();
                fit_plane_pca(&pts).ok()
            } else {
                None
            };
            patches.push(Patch {
                ring,
                sector,
                indices,
                stats,
            });
        }
    }
    patches
}

/// PCA plane fit: centroid, covariance eigenvalues (descending), and the
/// smallest-eigenvalue normal oriented with nonnegative z.
pub fn fit_plane_pca(points: &[Vector3<f64>]) -> Result<PatchStats> {
    if points.len() < 3 {
        return Err(Error::DegeneratePatch("fewer than 3 points"));
    }
    let n = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues = [
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    ];
    if eigenvalues[1] <= 1e-12 {
        return Err(Error::DegeneratePatch("rank-deficient covariance"));
    }

    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[2]).into();
    normal /= normal.norm();
    if normal.z < 0.0 {
        normal = -normal;
    } else if normal.z == 0.0 {
        // Vertical plane: deterministic sign via the first nonzero component.
        if normal.x < 0.0 || (normal.x == 0.0 && normal.y < 0.0) {
            normal = -normal;
        }
    }

    Ok(PatchStats {
        centroid,
        normal,
        eigenvalues,
        point_count: points.len(),
    })
}

/// Ground probability of a patch: product of uprightness, one-sided
/// elevation, and flatness factors, each in [0,1].
pub fn patch_ground_probability(stats: &PatchStats, params: &GroundParams) -> f64 {
    let p_upright = stats.normal.z.max(0.0).powf(params.uprightness_sharpness);
    let over = (stats.centroid.z - params.elevation_mean).max(0.0);
    let p_elev = (-over * over / (2.0 * params.elevation_sigma * params.elevation_sigma)).exp();
    let p_flat = (-stats.eigenvalues[2] / params.flatness_sigma).exp();
    p_upright * p_elev * p_flat
}

/// Annotates every point with the ground probability of its patch. Points in
/// patches without stats, or beyond the grid, get probability 0.
pub fn annotate_ground(cloud: &PointCloud, grid: &PatchGrid, params: &GroundParams) -> PointCloud {
    let mut probs = vec![0.0f64; cloud.len()];
    for patch in segment_patches(cloud, grid) {
        if let Some(stats) = &patch.stats {
            let p = patch_ground_probability(stats, params);
            for &i in &patch.indices {
                probs[i] = p;
            }
        }
    }
    let mut out = cloud.clone();
    out.set_ground_prob(probs)
        .expect("probability column matches cloud length");
    out
}

/// Keeps points whose ground probability is strictly below the threshold.
/// The cloud must have been annotated first.
pub fn remove_ground(cloud: &PointCloud, params: &GroundParams) -> Result<PointCloud> {
    let probs = cloud.ground_prob().ok_or(Error::NotAnnotated)?;
    let keep: Vec<usize> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p < params.ground_prob_threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(cloud.select(&keep))
}
