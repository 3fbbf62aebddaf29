//! Point-cloud sampling kernels: farthest point sampling, k-nearest
//! neighbors, patchification, and the sampling-variation generator.
//!
//! All tie-breaking is by smallest point index so results are bitwise
//! reproducible across platforms.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> PointCloud {
        PointCloud { points, label: None }
    }

    pub fn with_label(points: Vec<Point3>, label: usize) -> PointCloud {
        PointCloud {
            points,
            label: Some(label),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// FPS centers with their KNN patches for one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point3>,
    /// N×K×3 grouped coordinates.
    pub patches: Vec<Vec<Point3>>,
    pub center_indices: Vec<usize>,
    pub variation_seed: u64,
}

/// One sampling variation of a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Variation {
    pub patch_sets: Vec<PatchSet>,
    pub seed: u64,
}

/// The V sampled representations of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationSet {
    pub variations: Vec<Variation>,
}

impl VariationSet {
    pub fn seeds(&self) -> Vec<u64> {
        self.variations.iter().map(|v| v.seed).collect()
    }
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// SplitMix64 finalizer; the fixed 64-bit mix used to derive per-variation
/// seeds as mix(base_seed + v). Identical on every platform.
pub fn mix_seed(base_seed: u64, stream: u64) -> u64 {
    let mut z = base_seed
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Greedy farthest point sampling. `result[0] = start_index`; each next index
/// maximizes the minimum Euclidean distance to the already-selected centers,
/// ties broken by smallest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m > n || m == 0 {
        return Err(Error::Size(format!("fps: M={m} out of range for {n} points")));
    }
    if start_index >= n {
        return Err(Error::Size(format!("fps: start_index {start_index} ≥ {n}")));
    }
    let mut selected = Vec::with_capacity(m);
    selected.push(start_index);
    // min squared distance from each point to the selected set
    let mut min_d2: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| dist2(p, &cloud.points[start_index]))
        .collect();
    let mut taken = vec![false; n];
    taken[start_index] = true;
    for _ in 1..m {
        let mut best_idx = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if !taken[i] && d2 > best_d2 {
                best_d2 = d2;
                best_idx = i;
            }
        }
        taken[best_idx] = true;
        selected.push(best_idx);
        let c = cloud.points[best_idx];
        for (i, d2) in min_d2.iter_mut().enumerate() {
            let d = dist2(&cloud.points[i], &c);
            if d < *d2 {
                *d2 = d;
            }
        }
    }
    Ok(selected)
}

/// Indices of the K points nearest to `query`, sorted by (distance, index).
pub fn knn(cloud: &PointCloud, query: &Point3, k: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k > n || k == 0 {
        return Err(Error::Size(format!("knn: K={k} out of range for {n} points")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let da = dist2(&cloud.points[a], query);
        let db = dist2(&cloud.points[b], query);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// FPS centers plus a K-nearest patch around each. The start index is drawn
/// uniformly from the seed's generator; K=1 keeps only the centers.
pub fn patchify(cloud: &PointCloud, m: usize, k: usize, seed: u64) -> Result<PatchSet> {
    let n = cloud.len();
    if k > n {
        return Err(Error::Size(format!("patchify: K={k} > {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..n);
    let center_indices = farthest_point_sample(cloud, m, start)?;
    let centers: Vec<Point3> = center_indices.iter().map(|&i| cloud.points[i]).collect();
    let patches = if k == 1 {
        centers.iter().map(|c| vec![*c]).collect()
    } else {
        let mut patches = Vec::with_capacity(m);
        for c in &centers {
            let idx = knn(cloud, c, k)?;
            patches.push(idx.into_iter().map(|i| cloud.points[i]).collect());
        }
        patches
    };
    Ok(PatchSet {
        centers,
        patches,
        center_indices,
        variation_seed: seed,
    })
}

/// V sampling variations of a batch; variation v uses seed mix(base_seed, v).
pub fn generate_variations(
    batch: &[PointCloud],
    v: usize,
    m: usize,
    k: usize,
    base_seed: u64,
) -> Result<VariationSet> {
    if v == 0 {
        return Err(Error::Size("generate_variations: V must be ≥ 1".into()));
    }
    let mut variations = Vec::with_capacity(v);
    for i in 0..v {
        let seed = mix_seed(base_seed, i as u64);
        let patch_sets = batch
            .iter()
            .map(|cloud| patchify(cloud, m, k, seed))
            .collect::<Result<Vec<_>>>()?;
        variations.push(Variation { patch_sets, seed });
    }
    Ok(VariationSet { variations })
}

/// Center the cloud at its centroid and scale so the max point norm is 1.
/// Degenerate clouds (all points identical) are centered but not scaled.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &cloud.points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for a in 0..3 {
        centroid[a] /= n;
    }
    let mut centered: Vec<Point3> = cloud
        .points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm > 0.0 {
        for p in &mut centered {
            for a in 0..3 {
                p[a] /= max_norm;
            }
        }
    }
    PointCloud {
        points: centered,
        label: cloud.label,
    }
}

/// Repeat points cyclically until the cloud has at least `min_points`.
/// Corruptions that drop points can leave fewer than the model's FPS count.
pub fn cycle_pad(cloud: &PointCloud, min_points: usize) -> PointCloud {
    if cloud.len() >= min_points {
        return cloud.clone();
    }
    let mut points = cloud.points.clone();
    let mut i = 0;
    while points.len() < min_points {
        points.push(cloud.points[i % cloud.len()]);
        i += 1;
    }
    PointCloud {
        points,
        label: cloud.label,
    }
}

/// Stack the centers of one patch set per cloud into a B×M×3 tensor
/// (the K=1 model input).
pub fn centers_tensor(patch_sets: &[PatchSet]) -> Tensor {
    let b = patch_sets.len();
    let m = if b == 0 { 0 } else { patch_sets[0].centers.len() };
    let mut data = Vec::with_capacity(b * m * 3);
    for ps in patch_sets {
        debug_assert_eq!(ps.centers.len(), m);
        for c in &ps.centers {
            data.extend_from_slice(c);
        }
    }
    Tensor {
        shape: vec![b, m, 3],
        data,
        dtype: crate::numerics::Dtype::F64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec())
    }

    #[test]
    fn fps_picks_farthest_point() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_exhaustion_is_permutation() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [5.0, 1.0, 0.0]]);
        let mut idx = farthest_point_sample(&c, 4, 1).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_m1_is_start() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 1, 1).unwrap(), vec![1]);
    }

    #[test]
    fn fps_m_too_large_errors() {
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(farthest_point_sample(&c, 2, 0).is_err());
    }

    #[test]
    fn fps_min_distance_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(4..40);
            let c = PointCloud::new(
                (0..n)
                    .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                    .collect(),
            );
            let idx = farthest_point_sample(&c, n, 0).unwrap();
            let mut prev = f64::INFINITY;
            for i in 1..idx.len() {
                let d = idx[..i]
                    .iter()
                    .map(|&j| dist2(&c.points[idx[i]], &c.points[j]))
                    .fold(f64::INFINITY, f64::min);
                assert!(d <= prev + 1e-12);
                prev = d;
            }
        }
    }

    #[test]
    fn knn_self_nearest() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(knn(&c, &[1.0, 0.0, 0.0], 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_collinear() {
        let c = cloud(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ]);
        assert_eq!(knn(&c, &[1.1, 0.0, 0.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn knn_all_points_sorted_by_distance() {
        let c = cloud(&[
            [3.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
        ]);
        assert_eq!(knn(&c, &[0.0, 0.0, 0.0], 3).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn patchify_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = PointCloud::new(
            (0..32)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect(),
        );
        let a = patchify(&c, 8, 4, 42).unwrap();
        let b = patchify(&c, 8, 4, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patchify_k1_patches_are_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = PointCloud::new(
            (0..64)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect(),
        );
        let ps = patchify(&c, 16, 1, 9).unwrap();
        for (patch, center) in ps.patches.iter().zip(&ps.centers) {
            assert_eq!(patch.len(), 1);
            assert_eq!(&patch[0], center);
        }
    }

    #[test]
    fn different_seeds_give_different_starts() {
        // asymmetric cloud: every start index yields a distinct FPS sequence
        let c = cloud(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 4.0],
            [3.0, 3.0, 0.0],
            [5.0, 0.0, 1.0],
            [0.0, 5.0, 2.0],
            [2.0, 2.0, 2.0],
            [7.0, 1.0, 0.0],
            [1.0, 7.0, 3.0],
        ]);
        let vs = generate_variations(std::slice::from_ref(&c), 6, 4, 1, 1234).unwrap();
        let seeds = vs.seeds();
        let unique: std::collections::HashSet<_> = seeds.iter().collect();
        assert_eq!(unique.len(), seeds.len());
        let distinct = vs
            .variations
            .iter()
            .map(|v| v.patch_sets[0].center_indices.clone())
            .collect::<std::collections::HashSet<_>>();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn variations_v1_matches_patchify() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let vs = generate_variations(std::slice::from_ref(&c), 1, 2, 1, 99).unwrap();
        let direct = patchify(&c, 2, 1, mix_seed(99, 0)).unwrap();
        assert_eq!(vs.variations[0].patch_sets[0], direct);
    }

    #[test]
    fn normalize_idempotent_and_similarity_invariant() {
        let c = cloud(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [-2.0, 0.0, 1.0]]);
        let n1 = normalize_cloud(&c);
        let n2 = normalize_cloud(&n1);
        for (a, b) in n1.points.iter().zip(&n2.points) {
            for ax in 0..3 {
                assert!((a[ax] - b[ax]).abs() < 1e-12);
            }
        }
        let scaled = PointCloud::new(
            c.points
                .iter()
                .map(|p| [5.0 * p[0] + 2.0, 5.0 * p[1] + 2.0, 5.0 * p[2] + 2.0])
                .collect(),
        );
        let n3 = normalize_cloud(&scaled);
        for (a, b) in n1.points.iter().zip(&n3.points) {
            for ax in 0..3 {
                assert!((a[ax] - b[ax]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_single_point_to_origin() {
        let n = normalize_cloud(&cloud(&[[3.0, 4.0, 5.0]]));
        assert_eq!(n.points[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn cycle_pad_reaches_count() {
        let c = cloud(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let p = cycle_pad(&c, 5);
        assert_eq!(p.len(), 5);
        assert_eq!(p.points[2], [1.0, 0.0, 0.0]);
        assert_eq!(p.points[4], [1.0, 0.0, 0.0]);
    }
}
