//! Keypoint sampling and handcrafted local descriptors.
//!
//! Descriptors concatenate the normalized covariance eigenvalue triple of the
//! neighborhood, a histogram of point offsets along the local plane normal,
//! and a histogram of neighbor distances, so they are invariant under rigid
//! motion of the cloud. They stand in for a learned backbone: distinctive
//! enough to exercise the correspondence machinery without training.

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Descriptor layout: 3 eigenvalue ratios + 8 height bins + 8 distance bins.
pub const DESCRIPTOR_DIM: usize = 19;
const HIST_BINS: usize = 8;
const MIN_NEIGHBORS: usize = 5;

/// Keypoints with their source indices and inherited ground probabilities.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    positions: Vec<Vector3<f64>>,
    source_indices: Vec<usize>,
    ground_prob: Vec<f64>,
}

impl KeypointSet {
    /// Builds a keypoint set from cloud indices; ground probabilities are
    /// inherited from the cloud (0 when the cloud is unannotated).
    pub fn from_cloud(cloud: &PointCloud, indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; cloud.len()];
        for &i in &indices {
            if i >= cloud.len() {
                return Err(Error::invalid("keypoint set", format!("index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::invalid("keypoint set", format!("duplicate index {i}")));
            }
            seen[i] = true;
        }
        let positions = indices.iter().map(|&i| cloud.points()[i]).collect();
        let ground_prob = match cloud.ground_prob() {
            Some(g) => indices.iter().map(|&i| g[i]).collect(),
            None => vec![0.0; indices.len()],
        };
        Ok(Self {
            positions,
            source_indices: indices,
            ground_prob,
        })
    }

    /// Keypoints given directly by position, with explicit ground
    /// probabilities (used by evaluation oracles and bindings).
    pub fn from_positions(positions: Vec<Vector3<f64>>, ground_prob: Vec<f64>) -> Result<Self> {
        if positions.len() != ground_prob.len() {
            return Err(Error::DimensionMismatch {
                context: "keypoint ground probabilities",
                left: ground_prob.len(),
                right: positions.len(),
            });
        }
        if ground_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("keypoint set", "ground_prob outside [0,1]"));
        }
        let source_indices = (0..positions.len()).collect();
        Ok(Self {
            positions,
            source_indices,
            ground_prob,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn ground_prob(&self) -> &[f64] {
        &self.ground_prob
    }

    /// First `n` keypoints in selection order.
    pub fn truncated(&self, n: usize) -> KeypointSet {
        KeypointSet {
            positions: self.positions[..n.min(self.len())].to_vec(),
            source_indices: self.source_indices[..n.min(self.len())].to_vec(),
            ground_prob: self.ground_prob[..n.min(self.len())].to_vec(),
        }
    }
}

/// Farthest-point sampling of `m` keypoints, starting from the point nearest
/// the centroid. Ties break toward the lowest index, so the result is fully
/// deterministic; the seed is reserved for randomized sampling strategies.
pub fn sample_keypoints(cloud: &PointCloud, m: usize, _seed: u64) -> Result<KeypointSet> {
    if cloud.is_empty() {
        return Err(Error::Empty("cloud for keypoint sampling"));
    }
    let n = cloud.len();
    if n <= m {
        return KeypointSet::from_cloud(cloud, (0..n).collect());
    }
    let pts = cloud.points();
    let centroid = cloud.centroid().expect("nonempty cloud");

    let mut start = 0usize;
    let mut best = f64::INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = (p - centroid).norm_squared();
        if d < best {
            best = d;
            start = i;
        }
    }

    let mut selected = Vec::with_capacity(m);
    selected.push(start);
    let mut min_d2: Vec<f64> = pts.iter().map(|p| (p - pts[start]).norm_squared()).collect();
    while selected.len() < m {
        let mut next = 0usize;
        let mut far = -1.0f64;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > far {
                far = d;
                next = i;
            }
        }
        selected.push(next);
        for (i, d) in min_d2.iter_mut().enumerate() {
            let cand = (pts[i] - pts[next]).norm_squared();
            if cand < *d {
                *d = cand;
            }
        }
    }
    KeypointSet::from_cloud(cloud, selected)
}

/// Fixed-dimension L2-normalized local descriptors, one per keypoint.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    data: Vec<f64>,
    dim: usize,
}

impl DescriptorSet {
    pub fn from_rows(rows: Vec<Vec<f64>>, dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "descriptor row",
                    left: row.len(),
                    right: dim,
                });
            }
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "descriptor set",
                    format!("row {i} has norm {norm}, expected 1"),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// First `n` descriptors.
    pub fn truncated(&self, n: usize) -> DescriptorSet {
        let n = n.min(self.len());
        DescriptorSet {
            data: self.data[..n * self.dim].to_vec(),
            dim: self.dim,
        }
    }
}

/// Reserved descriptor for keypoints without enough neighbors.
pub fn null_descriptor() -> [f64; DESCRIPTOR_DIM] {
    let mut d = [0.0; DESCRIPTOR_DIM];
    d[0] = 1.0;
    d
}

/// Uniform hash grid over 3D cells of side `cell`, for radius queries.
struct VoxelGrid {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl VoxelGrid {
    fn build(points: &[Vector3<f64>], cell: f64) -> Self {
        let mut map: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, map }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices within `radius` of `center`, excluding `exclude`, sorted
    /// ascending so accumulation order is reproducible.
    fn neighbors_within(
        &self,
        points: &[Vector3<f64>],
        center: &Vector3<f64>,
        radius: f64,
        exclude: Option<usize>,
    ) -> Vec<usize> {
        let (cx, cy, cz) = Self::key(center, self.cell);
        let reach = (radius / self.cell).ceil() as i64;
        let mut out = Vec::new();
        let r2 = radius * radius;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(bucket) = self.map.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in bucket {
                            if Some(i) == exclude {
                                continue;
                            }
                            if (points[i] - center).norm_squared() <= r2 {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn descriptor_for(
    points: &[Vector3<f64>],
    key_pos: &Vector3<f64>,
    neighbors: &[usize],
    radius: f64,
) -> [f64; DESCRIPTOR_DIM] {
    if neighbors.len() < MIN_NEIGHBORS {
        return null_descriptor();
    }

    let n = neighbors.len() as f64;
    let mean: Vector3<f64> = neighbors.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for &i in neighbors {
        let d = points[i] - mean;
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
    let lam = [
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    ];
    let lam_sum = lam[0] + lam[1] + lam[2];

    let mut out = [0.0; DESCRIPTOR_DIM];
    if lam_sum > 1e-30 {
        out[0] = lam[0] / lam_sum;
        out[1] = lam[1] / lam_sum;
        out[2] = lam[2] / lam_sum;
    }

    // Heights are measured along the neighborhood plane normal, not the world
    // z axis, so the descriptor survives arbitrary rigid motion. The sign of
    // the normal is fixed by the mean offset of the neighborhood.
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[2]).into();
    let norm = normal.norm();
    if norm > 1e-30 {
        normal /= norm;
    }
    let mean_height: f64 = neighbors
        .iter()
        .map(|&i| (points[i] - key_pos).dot(&normal))
        .sum();
    if mean_height < 0.0 {
        normal = -normal;
    }

    // Soft (linearly interpolated) votes; hard bin edges would let jitter of
    // a fraction of a bin width rewrite the histogram.
    let mut vote = |base: usize, x: f64| {
        let pos = (x * HIST_BINS as f64 - 0.5).clamp(0.0, (HIST_BINS - 1) as f64);
        let lower = pos.floor() as usize;
        let frac = pos - lower as f64;
        out[base + lower] += 1.0 - frac;
        if frac > 0.0 {
            out[base + lower + 1] += frac;
        }
    };
    for &i in neighbors {
        let offset = points[i] - key_pos;
        let h = offset.dot(&normal);
        vote(3, ((h + radius) / (2.0 * radius)).clamp(0.0, 1.0));
        vote(3 + HIST_BINS, (offset.norm() / radius).clamp(0.0, 1.0));
    }
    for hist in [3..3 + HIST_BINS, 3 + HIST_BINS..DESCRIPTOR_DIM] {
        let total: f64 = out[hist.clone()].iter().sum();
        if total > 0.0 {
            for v in &mut out[hist] {
                *v /= total;
            }
        }
    }

    let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut out {
        *v /= norm;
    }
    out
}

/// Computes one descriptor per keypoint from the neighborhood within
/// `radius`. Keypoints with fewer than 5 neighbors (the keypoint itself
/// excluded) get the reserved null descriptor.
pub fn compute_descriptors(
    cloud: &PointCloud,
    keys: &KeypointSet,
    radius: f64,
) -> Result<DescriptorSet> {
    if !(radius > 0.0) {
        return Err(Error::invalid("descriptor radius", "must be positive"));
    }
    let points = cloud.points();
    let grid = VoxelGrid::build(points, radius.max(1e-6));

    let rows: Vec<[f64; DESCRIPTOR_DIM]> = keys
        .positions()
        .par_iter()
        .zip(keys.source_indices().par_iter())
        .map(|(pos, &src)| {
            let exclude = if src < points.len() { Some(src) } else { None };
            let neighbors = grid.neighbors_within(points, pos, radius, exclude);
            descriptor_for(points, pos, &neighbors, radius)
        })
        .collect();

    let mut data = Vec::with_capacity(rows.len() * DESCRIPTOR_DIM);
    for row in rows {
        data.extend_from_slice(&row);
    }
    Ok(DescriptorSet {
        data,
        dim: DESCRIPTOR_DIM,
    })
}

/// Nonnegative matching costs between two descriptor sets.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    values: DMatrix<f64>,
}

impl CostMatrix {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("cost matrix", "entries must be finite and ≥ 0"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// Cosine matching cost `K_ij = 1 − ⟨f_i, f_j⟩`, clamped to [0, 2].
pub fn cost_matrix(fa: &DescriptorSet, fb: &DescriptorSet) -> Result<CostMatrix> {
    if fa.dim() != fb.dim() {
        return Err(Error::DimensionMismatch {
            context: "descriptor dimensions",
            left: fa.dim(),
            right: fb.dim(),
        });
    }
    let values = DMatrix::from_fn(fa.len(), fb.len(), |i, j| {
        let dot: f64 = fa.get(i).iter().zip(fb.get(j)).map(|(a, b)| a * b).sum();
        (1.0 - dot).clamp(0.0, 2.0)
    });
    Ok(CostMatrix { values })
}
