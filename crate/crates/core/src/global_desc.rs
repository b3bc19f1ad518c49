//! Global place descriptors: VLAD aggregation of local descriptors against a
//! k-means vocabulary, plus the retrieval database for loop candidates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::DescriptorSet;

/// Cluster centers in raw descriptor space.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    centroids: Vec<Vec<f64>>,
    dim: usize,
}

impl Vocabulary {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn from_centroids(centroids: Vec<Vec<f64>>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Empty("vocabulary centroids"));
        }
        let dim = centroids[0].len();
        if centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("vocabulary", "centroid dimensions differ"));
        }
        Ok(Self { centroids, dim })
    }

    /// Index of the nearest centroid; ties break to the lowest index.
    pub fn assign(&self, v: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c_idx, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c_idx;
            }
        }
        best
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means over all descriptors with seeded k-means++ initialization.
/// Assignment ties break to the lowest centroid index; empty clusters keep
/// their previous centroid; stops on an assignment fixpoint or `max_iters`.
pub fn train_vocabulary(
    sets: &[DescriptorSet],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vocabulary> {
    let data: Vec<&[f64]> = sets.iter().flat_map(|s| s.rows()).collect();
    if k == 0 {
        return Err(Error::invalid("vocabulary", "k must be at least 1"));
    }
    if data.len() < k {
        return Err(Error::invalid(
            "vocabulary",
            format!("{} descriptors for k = {k}", data.len()),
        ));
    }
    let dim = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: D²-weighted picks; falls back to the first unchosen
    // point when every remaining distance is zero (duplicates).
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..data.len());
    centroids.push(data[first].to_vec());
    let mut d2: Vec<f64> = data.iter().map(|v| dist2(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            d2.iter().position(|&w| w == 0.0).unwrap_or(0)
        };
        centroids.push(data[next].to_vec());
        for (i, v) in data.iter().enumerate() {
            d2[i] = d2[i].min(dist2(v, centroids.last().unwrap()));
        }
    }

    let mut assignment = vec![usize::MAX; data.len()];
    for _ in 0..max_iters {
        let vocab = Vocabulary {
            centroids: centroids.clone(),
            dim,
        };
        let mut changed = false;
        for (i, v) in data.iter().enumerate() {
            let a = vocab.assign(v);
            if a != assignment[i] {
                assignment[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, v) in data.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, x) in sums[assignment[i]].iter_mut().zip(*v) {
                *s += x;
            }
        }
        for (c, (sum, count)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if *count > 0 {
                for (dst, s) in c.iter_mut().zip(sum) {
                    *dst = s / *count as f64;
                }
            }
        }
    }

    Ok(Vocabulary { centroids, dim })
}

/// L2-normalized global place descriptor of dimension k·d.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    vector: Vec<f64>,
}

impl GlobalDescriptor {
    pub fn from_vector(vector: Vec<f64>) -> Result<Self> {
        let norm: f64 = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(
                "global descriptor",
                format!("norm {norm}, expected 1"),
            ));
        }
        Ok(Self { vector })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn similarity(&self, other: &GlobalDescriptor) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// VLAD aggregation: per-centroid residual sums, intra-block L2 normalization
/// (zero blocks stay zero), then global L2 normalization. Empty descriptor
/// sets and all-zero aggregates are errors.
pub fn aggregate(descriptors: &DescriptorSet, vocab: &Vocabulary) -> Result<GlobalDescriptor> {
    if descriptors.is_empty() {
        return Err(Error::Empty("descriptor set for aggregation"));
    }
    if descriptors.dim() != vocab.dim() {
        return Err(Error::DimensionMismatch {
            context: "aggregation descriptor dim",
            left: descriptors.dim(),
            right: vocab.dim(),
        });
    }
    let d = vocab.dim();
    let mut blocks = vec![0.0f64; vocab.k() * d];
    for row in descriptors.rows() {
        let c = vocab.assign(row);
        let centroid = &vocab.centroids()[c];
        for (i, (f, m)) in row.iter().zip(centroid).enumerate() {
            blocks[c * d + i] += f - m;
        }
    }
    for c in 0..vocab.k() {
        let block = &mut blocks[c * d..(c + 1) * d];
        let norm: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in block {
                *v /= norm;
            }
        }
    }
    let norm: f64 = blocks.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(Error::invalid(
            "global descriptor",
            "all residuals are zero; nothing to aggregate",
        ));
    }
    for v in &mut blocks {
        *v /= norm;
    }
    Ok(GlobalDescriptor { vector: blocks })
}

/// Scan-indexed store of global descriptors, ordered by scan index.
#[derive(Debug, Clone, Default)]
pub struct DescriptorDatabase {
    entries: Vec<(usize, GlobalDescriptor)>,
}

impl DescriptorDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scan indices must arrive strictly increasing.
    pub fn insert(&mut self, scan_index: usize, descriptor: GlobalDescriptor) -> Result<()> {
        if let Some((last, _)) = self.entries.last() {
            if scan_index <= *last {
                return Err(Error::invalid(
                    "descriptor database",
                    format!("scan index {scan_index} not greater than {last}"),
                ));
            }
        }
        self.entries.push((scan_index, descriptor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, GlobalDescriptor)] {
        &self.entries
    }

    pub fn get(&self, scan_index: usize) -> Option<&GlobalDescriptor> {
        self.entries
            .binary_search_by_key(&scan_index, |(i, _)| *i)
            .ok()
            .map(|pos| &self.entries[pos].1)
    }
}

/// Ranked loop candidates for a query: cosine similarity against every entry
/// whose scan index is at most `query_index − exclusion_window`, descending,
/// ties toward the lower scan index, truncated to `top_k`.
pub fn query_candidates(
    db: &DescriptorDatabase,
    query: &GlobalDescriptor,
    query_index: usize,
    top_k: usize,
    exclusion_window: usize,
) -> Vec<(usize, f64)> {
    let Some(limit) = query_index.checked_sub(exclusion_window) else {
        return Vec::new();
    };
    let mut scored: Vec<(usize, f64)> = db
        .entries()
        .iter()
        .filter(|(idx, _)| *idx <= limit && *idx != query_index)
        .map(|(idx, d)| (*idx, query.similarity(d)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(top_k);
    scored
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: Vec<Vec<f64>>) -> DescriptorSet {
        let dim = rows[0].len();
        let rows = rows
            .into_iter()
            .map(|r| {
                let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.into_iter().map(|v| v / n).collect()
            })
            .collect();
        DescriptorSet::from_rows(rows, dim).unwrap()
    }

    #[test]
    fn k1_vocabulary_is_the_mean() {
        let set = unit_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let vocab = train_vocabulary(&[set.clone()], 1, 0, 50).unwrap();
        let mean: Vec<f64> = (0..3)
            .map(|i| set.rows().map(|r| r[i]).sum::<f64>() / 3.0)
            .collect();
        for (a, b) in vocab.centroids()[0].iter().zip(&mean) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn separated_blobs_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        for _ in 0..40 {
            let eps: f64 = rng.random_range(-1e-4..1e-4);
            rows.push(vec![1.0, eps, 0.0]);
        }
        for _ in 0..40 {
            let eps: f64 = rng.random_range(-1e-4..1e-4);
            rows.push(vec![0.0, eps, 1.0]);
        }
        let set = unit_rows(rows);
        let vocab = train_vocabulary(&[set.clone()], 2, 9, 100).unwrap();
        // Each centroid should sit within 1e-3 of one blob center.
        let centers = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for c in vocab.centroids() {
            let close = centers
                .iter()
                .any(|t| dist2(c, t) < 1e-6);
            assert!(close, "centroid {c:?} not near a blob center");
        }
    }

    #[test]
    fn k_equals_distinct_count_gives_zero_quantization() {
        let set = unit_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let vocab = train_vocabulary(&[set.clone()], 3, 1, 100).unwrap();
        for row in set.rows() {
            let c = vocab.assign(row);
            assert!(dist2(row, &vocab.centroids()[c]) < 1e-20);
        }
    }

    #[test]
    fn too_few_descriptors_error() {
        let set = unit_rows(vec![vec![1.0, 0.0]]);
        assert!(train_vocabulary(&[set], 2, 0, 10).is_err());
    }

    #[test]
    fn aggregate_single_descriptor_is_normalized_residual() {
        let vocab = Vocabulary::from_centroids(vec![vec![0.0, 0.5, 0.0]]).unwrap();
        let set = unit_rows(vec![vec![0.0, 1.0, 0.0]]);
        let g = aggregate(&set, &vocab).unwrap();
        // Residual (0, 0.5, 0) normalizes to (0, 1, 0).
        assert_relative_eq!(g.vector()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn aggregate_zero_residual_errors() {
        let vocab = Vocabulary::from_centroids(vec![vec![1.0, 0.0]]).unwrap();
        let set = unit_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!(aggregate(&set, &vocab).is_err());

        let empty = DescriptorSet::from_rows(vec![], 2).unwrap();
        assert!(matches!(aggregate(&empty, &vocab), Err(Error::Empty(_))));
    }

    #[test]
    fn aggregate_is_order_and_duplication_invariant() {
        let vocab = Vocabulary::from_centroids(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let rows = vec![
            vec![0.8, 0.6, 0.0],
            vec![0.0, 0.6, 0.8],
            vec![0.6, 0.8, 0.0],
        ];
        let a = aggregate(&unit_rows(rows.clone()), &vocab).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let b = aggregate(&unit_rows(rev), &vocab).unwrap();
        for (x, y) in a.vector().iter().zip(b.vector()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        // Duplicating the whole set scales residuals uniformly; the
        // normalizations cancel it.
        let mut doubled = rows.clone();
        doubled.extend(rows);
        let c = aggregate(&unit_rows(doubled), &vocab).unwrap();
        for (x, y) in a.vector().iter().zip(c.vector()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn self_similarity_is_one_and_symmetric() {
        let vocab = Vocabulary::from_centroids(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = aggregate(&unit_rows(vec![vec![0.6, 0.8]]), &vocab).unwrap();
        let b = aggregate(&unit_rows(vec![vec![0.9, 0.1]]), &vocab).unwrap();
        assert_relative_eq!(a.similarity(&a), 1.0, epsilon = 1e-6);
        assert_relative_eq!(a.similarity(&b), b.similarity(&a), epsilon = 1e-12);
    }

    fn unit_global(dim: usize, hot: usize) -> GlobalDescriptor {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        GlobalDescriptor::from_vector(v).unwrap()
    }

    #[test]
    fn query_ranks_by_similarity_with_window() {
        let mut db = DescriptorDatabase::new();
        db.insert(0, unit_global(4, 0)).unwrap();
        db.insert(1, unit_global(4, 1)).unwrap();
        db.insert(2, unit_global(4, 2)).unwrap();
        db.insert(10, unit_global(4, 0)).unwrap();

        // Query identical to scans 0 and 10; window keeps only index ≤ 5.
        let hits = query_candidates(&db, &unit_global(4, 0), 10, 10, 5);
        assert_eq!(hits[0], (0, 1.0));
        assert_eq!(hits.len(), 3);

        // Window larger than the query index: nothing eligible.
        assert!(query_candidates(&db, &unit_global(4, 0), 2, 10, 5).is_empty());
    }

    #[test]
    fn query_hand_computed_ordering() {
        let d0 = GlobalDescriptor::from_vector(vec![1.0, 0.0]).unwrap();
        let d1 = GlobalDescriptor::from_vector(vec![0.6, 0.8]).unwrap();
        let d2 = GlobalDescriptor::from_vector(vec![0.0, 1.0]).unwrap();
        let mut db = DescriptorDatabase::new();
        db.insert(0, d0).unwrap();
        db.insert(1, d1).unwrap();
        db.insert(2, d2).unwrap();
        let q = GlobalDescriptor::from_vector(vec![0.8, 0.6]).unwrap();
        let hits = query_candidates(&db, &q, 3, 3, 1);
        // Similarities: 0.8, 0.96, 0.6 → order 1, 0, 2.
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![1, 0, 2]);
        assert_relative_eq!(hits[0].1, 0.96, epsilon = 1e-12);
        // top_k = db size returns a total order.
        assert_eq!(hits.len(), 3);
    }

    #[test]
    fn database_rejects_non_increasing_indices() {
        let mut db = DescriptorDatabase::new();
        db.insert(3, unit_global(2, 0)).unwrap();
        assert!(db.insert(3, unit_global(2, 1)).is_err());
        assert!(db.insert(1, unit_global(2, 1)).is_err());
    }
}
