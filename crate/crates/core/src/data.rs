//! Procedural synthetic point-cloud dataset: eight surface-sampled shape
//! classes with per-instance rotation/scale nuisance, binary dataset I/O,
//! and seeded batching.

use crate::error::{Error, Result};
use crate::geometry::{mix_seed, normalize_cloud, Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"PCD3";
pub const SPLIT_MAGIC: &[u8; 4] = b"PSPL";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Helix,
    Pyramid,
}

pub const NUM_CLASSES: usize = 8;

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Plane,
        ShapeClass::Helix,
        ShapeClass::Pyramid,
    ];

    pub fn index(&self) -> usize {
        ShapeClass::ALL.iter().position(|c| c == self).unwrap()
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Plane => "plane",
            ShapeClass::Helix => "helix",
            ShapeClass::Pyramid => "pyramid",
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// One point on the class's canonical surface (no nuisance transform).
fn surface_point(class: ShapeClass, rng: &mut ChaCha8Rng) -> Point3 {
    match class {
        ShapeClass::Sphere => {
            let v = [normal(rng), normal(rng), normal(rng)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            [v[0] / n, v[1] / n, v[2] / n]
        }
        ShapeClass::Cube => {
            let face = rng.gen_range(0..6);
            let u = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(-1.0..1.0);
            match face {
                0 => [1.0, u, v],
                1 => [-1.0, u, v],
                2 => [u, 1.0, v],
                3 => [u, -1.0, v],
                4 => [u, v, 1.0],
                _ => [u, v, -1.0],
            }
        }
        ShapeClass::Cylinder => {
            // lateral area 4π vs two caps 2π
            let theta = rng.gen_range(0.0..TAU);
            if rng.gen::<f64>() < 2.0 / 3.0 {
                [theta.cos(), theta.sin(), rng.gen_range(-1.0..1.0)]
            } else {
                let r = rng.gen::<f64>().sqrt();
                let z = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        ShapeClass::Cone => {
            let theta = rng.gen_range(0.0..TAU);
            if rng.gen::<f64>() < 0.7 {
                // slant surface: radius grows from apex (0,0,1) to base at z=-1
                let t = rng.gen::<f64>().sqrt();
                [t * theta.cos(), t * theta.sin(), 1.0 - 2.0 * t]
            } else {
                let r = rng.gen::<f64>().sqrt();
                [r * theta.cos(), r * theta.sin(), -1.0]
            }
        }
        ShapeClass::Torus => {
            let (big_r, small_r) = (1.0, 0.4);
            let u = rng.gen_range(0.0..TAU);
            let v = rng.gen_range(0.0..TAU);
            let ring = big_r + small_r * v.cos();
            [ring * u.cos(), ring * u.sin(), small_r * v.sin()]
        }
        ShapeClass::Plane => [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0],
        ShapeClass::Helix => {
            let t = rng.gen_range(0.0..4.0 * PI);
            let jitter = 0.05;
            [
                t.cos() + jitter * normal(rng),
                t.sin() + jitter * normal(rng),
                t / (2.0 * PI) - 1.0 + jitter * normal(rng),
            ]
        }
        ShapeClass::Pyramid => {
            // square base [-1,1]² at z=-0.5, apex at (0,0,1)
            if rng.gen::<f64>() < 0.4 {
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), -0.5]
            } else {
                let face = rng.gen_range(0..4);
                let (mut a, mut b) = (rng.gen::<f64>(), rng.gen::<f64>());
                if a + b > 1.0 {
                    a = 1.0 - a;
                    b = 1.0 - b;
                }
                let apex = [0.0, 0.0, 1.0];
                let (c1, c2): (Point3, Point3) = match face {
                    0 => ([-1.0, -1.0, -0.5], [1.0, -1.0, -0.5]),
                    1 => ([1.0, -1.0, -0.5], [1.0, 1.0, -0.5]),
                    2 => ([1.0, 1.0, -0.5], [-1.0, 1.0, -0.5]),
                    _ => ([-1.0, 1.0, -0.5], [-1.0, -1.0, -0.5]),
                };
                let mut p = [0.0; 3];
                for ax in 0..3 {
                    p[ax] = apex[ax] + a * (c1[ax] - apex[ax]) + b * (c2[ax] - apex[ax]);
                }
                p
            }
        }
    }
}

/// Canonical surface sampling without nuisance transforms.
pub fn sample_surface(class: ShapeClass, n_points: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n_points).map(|_| surface_point(class, &mut rng)).collect();
    PointCloud::with_label(points, class.index())
}

/// Surface sampling plus per-instance random rotation and anisotropic scale,
/// then unit normalization.
pub fn generate_shape(class: ShapeClass, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::Size("generate_shape needs n_points ≥ 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Point3> = (0..n_points).map(|_| surface_point(class, &mut rng)).collect();
    // nuisance: anisotropic scale then a random rotation about a random axis
    let scale = [
        rng.gen_range(0.6..1.4),
        rng.gen_range(0.6..1.4),
        rng.gen_range(0.6..1.4),
    ];
    let axis = {
        let v = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let angle = rng.gen_range(0.0..TAU);
    let (s, c) = angle.sin_cos();
    for p in &mut points {
        for ax in 0..3 {
            p[ax] *= scale[ax];
        }
        let dot = axis[0] * p[0] + axis[1] * p[1] + axis[2] * p[2];
        let cross = [
            axis[1] * p[2] - axis[2] * p[1],
            axis[2] * p[0] - axis[0] * p[2],
            axis[0] * p[1] - axis[1] * p[0],
        ];
        let mut q = [0.0; 3];
        for ax in 0..3 {
            q[ax] = p[ax] * c + cross[ax] * s + axis[ax] * dot * (1.0 - c);
        }
        *p = q;
    }
    let mut cloud = normalize_cloud(&PointCloud::new(points));
    cloud.label = Some(class.index());
    Ok(cloud)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_indices,
            Split::Test => &self.test_indices,
        }
    }
}

/// Balanced dataset with disjoint train/test splits.
pub fn make_dataset(
    num_per_class_train: usize,
    num_per_class_test: usize,
    n_points: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_per_class_train == 0 || num_per_class_test == 0 {
        return Err(Error::Size("per-class counts must be ≥ 1".into()));
    }
    let mut clouds = Vec::new();
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    let mut instance = 0u64;
    for class in ShapeClass::ALL {
        for i in 0..num_per_class_train + num_per_class_test {
            let cloud = generate_shape(class, n_points, mix_seed(seed, instance))?;
            if i < num_per_class_train {
                train_indices.push(clouds.len());
            } else {
                test_indices.push(clouds.len());
            }
            clouds.push(cloud);
            instance += 1;
        }
    }
    Ok(Dataset {
        clouds,
        train_indices,
        test_indices,
        num_classes: NUM_CLASSES,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Binary I/O (little-endian regardless of host)
// ---------------------------------------------------------------------------

pub fn dataset_to_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.clouds.len() as u32).to_le_bytes());
    for cloud in &dataset.clouds {
        buf.extend_from_slice(&(cloud.label.unwrap_or(0) as u32).to_le_bytes());
        buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
        for p in &cloud.points {
            for &v in p {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    buf
}

pub fn split_to_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SPLIT_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for indices in [&dataset.train_indices, &dataset.test_indices] {
        buf.extend_from_slice(&(indices.len() as u32).to_le_bytes());
        for &i in indices.iter() {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.data.len() {
            return Err(Error::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn dataset_from_bytes(data: &[u8], split: &[u8], seed: u64) -> Result<Dataset> {
    let mut r = Cursor { data, offset: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a dataset file".into(),
        });
    }
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let num_classes = r.u32("num_classes")? as usize;
    let num_clouds = r.u32("num_clouds")? as usize;
    let mut clouds = Vec::with_capacity(num_clouds);
    for _ in 0..num_clouds {
        let label = r.u32("label")? as usize;
        let n = r.u32("n_points")? as usize;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push([
                r.f32("x")? as f64,
                r.f32("y")? as f64,
                r.f32("z")? as f64,
            ]);
        }
        clouds.push(PointCloud::with_label(points, label));
    }
    if r.offset != data.len() {
        return Err(Error::Format {
            offset: r.offset,
            msg: "trailing bytes after dataset".into(),
        });
    }

    let mut s = Cursor {
        data: split,
        offset: 0,
    };
    if s.take(4, "split magic")? != SPLIT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a split file".into(),
        });
    }
    let version = s.u16("split version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let mut splits = Vec::new();
    for what in ["train indices", "test indices"] {
        let count = s.u32(what)? as usize;
        let mut idx = Vec::with_capacity(count);
        for _ in 0..count {
            let i = s.u32(what)? as usize;
            if i >= clouds.len() {
                return Err(Error::Format {
                    offset: s.offset,
                    msg: format!("split index {i} ≥ {} clouds", clouds.len()),
                });
            }
            idx.push(i);
        }
        splits.push(idx);
    }
    let test_indices = splits.pop().unwrap();
    let train_indices = splits.pop().unwrap();
    Ok(Dataset {
        clouds,
        train_indices,
        test_indices,
        num_classes,
        seed,
    })
}

/// Writes `<path>` and the split sidecar `<path>.split`.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::File::create(path)?.write_all(&dataset_to_bytes(dataset))?;
    let split_path = sidecar_path(path);
    std::fs::File::create(split_path)?.write_all(&split_to_bytes(dataset))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut split = Vec::new();
    std::fs::File::open(sidecar_path(path))?.read_to_end(&mut split)?;
    dataset_from_bytes(&data, &split, 0)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".split");
    std::path::PathBuf::from(os)
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// True when this is a trailing batch smaller than the batch size.
    pub is_remainder: bool,
}

/// Seeded Fisher–Yates shuffle of the split, then fixed-size batches.
pub fn batch_iter(dataset: &Dataset, split: Split, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Size("batch_size must be ≥ 2".into()));
    }
    let mut order: Vec<usize> = dataset.split_indices(split).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            is_remainder: chunk.len() < batch_size,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_surface_on_unit_sphere() {
        let c = sample_surface(ShapeClass::Sphere, 256, 1);
        for p in &c.points {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
        // normalization recenters on the sample centroid, so norms spread out
        // but stay bounded by 1
        let n = normalize_cloud(&c);
        for p in &n.points {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!(norm <= 1.0 + 1e-12 && norm >= 0.5);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shape(ShapeClass::Torus, 128, 42).unwrap();
        let b = generate_shape(ShapeClass::Torus, 128, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classes_are_statistically_separable() {
        // 1-nearest-centroid on simple shape statistics separates cube vs
        // sphere; Mahalanobis norms undo the nuisance scale and rotation
        let feat = |c: &PointCloud| -> [f64; 2] {
            let n = c.points.len() as f64;
            let mut mean = [0.0; 3];
            for p in &c.points {
                for a in 0..3 {
                    mean[a] += p[a] / n;
                }
            }
            let mut cov = [[0.0; 3]; 3];
            for p in &c.points {
                let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] += d[a] * d[b] / n;
                    }
                }
            }
            // closed-form 3×3 inverse via the adjugate
            let det = cov[0][0] * (cov[1][1] * cov[2][2] - cov[1][2] * cov[2][1])
                - cov[0][1] * (cov[1][0] * cov[2][2] - cov[1][2] * cov[2][0])
                + cov[0][2] * (cov[1][0] * cov[2][1] - cov[1][1] * cov[2][0]);
            let mut inv = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let (a1, a2) = ((a + 1) % 3, (a + 2) % 3);
                    let (b1, b2) = ((b + 1) % 3, (b + 2) % 3);
                    inv[b][a] = (cov[a1][b1] * cov[a2][b2] - cov[a1][b2] * cov[a2][b1]) / det;
                }
            }
            let norms: Vec<f64> = c
                .points
                .iter()
                .map(|p| {
                    let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
                    let mut q = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            q += d[a] * inv[a][b] * d[b];
                        }
                    }
                    q.sqrt()
                })
                .collect();
            let m = norms.iter().sum::<f64>() / n;
            let var = norms.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            [m, var]
        };
        let mut centroids = [[0.0; 2]; 2];
        for (k, class) in [ShapeClass::Cube, ShapeClass::Sphere].iter().enumerate() {
            for i in 0..20 {
                let f = feat(&generate_shape(*class, 1024, 1000 + i).unwrap());
                centroids[k][0] += f[0] / 20.0;
                centroids[k][1] += f[1] / 20.0;
            }
        }
        let mut correct = 0;
        let total = 40;
        for (k, class) in [ShapeClass::Cube, ShapeClass::Sphere].iter().enumerate() {
            for i in 0..total / 2 {
                let f = feat(&generate_shape(*class, 1024, 5000 + i).unwrap());
                let d: Vec<f64> = centroids
                    .iter()
                    .map(|c| (c[0] - f[0]).powi(2) + (c[1] - f[1]).powi(2))
                    .collect();
                let pred = if d[0] < d[1] { 0 } else { 1 };
                if pred == k {
                    correct += 1;
                }
            }
        }
        assert!(
            correct as f64 / total as f64 > 0.95,
            "separability {}/{}",
            correct,
            total
        );
    }

    #[test]
    fn dataset_counts_and_balance() {
        let ds = make_dataset(5, 2, 64, 7).unwrap();
        assert_eq!(ds.clouds.len(), 8 * 7);
        assert_eq!(ds.train_indices.len(), 40);
        assert_eq!(ds.test_indices.len(), 16);
        let mut per_class = [0usize; 8];
        for &i in &ds.train_indices {
            per_class[ds.clouds[i].label.unwrap()] += 1;
        }
        assert!(per_class.iter().all(|&c| c == 5));
        // disjoint splits
        for i in &ds.train_indices {
            assert!(!ds.test_indices.contains(i));
        }
    }

    #[test]
    fn dataset_roundtrip_bitwise() {
        let ds = make_dataset(2, 1, 32, 3).unwrap();
        let bytes = dataset_to_bytes(&ds);
        let split = split_to_bytes(&ds);
        let back = dataset_from_bytes(&bytes, &split, ds.seed).unwrap();
        assert_eq!(dataset_to_bytes(&back), bytes);
        assert_eq!(split_to_bytes(&back), split);
    }

    #[test]
    fn truncation_reports_offset() {
        let ds = make_dataset(2, 1, 32, 3).unwrap();
        let bytes = dataset_to_bytes(&ds);
        let split = split_to_bytes(&ds);
        match dataset_from_bytes(&bytes[..bytes.len() - 3], &split, 0) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn batches_partition_split() {
        let ds = make_dataset(4, 2, 32, 9).unwrap();
        let batches = batch_iter(&ds, Split::Train, 12, 5).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        let mut expect = ds.train_indices.clone();
        expect.sort();
        assert_eq!(seen, expect);
        assert!(batches.last().unwrap().is_remainder);
        assert_eq!(
            batch_iter(&ds, Split::Train, 12, 5).unwrap(),
            batches,
            "same seed, same order"
        );
    }
}
