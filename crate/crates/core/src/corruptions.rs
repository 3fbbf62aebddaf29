//! Severity-parameterized corruption transforms for building shifted test
//! streams, plus the augmentation alternatives used in the ablations.
//! Every transform is a pure function of (cloud, spec).

use crate::error::{Error, Result};
use crate::geometry::{dist2, mix_seed, Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Uniform,
    Gaussian,
    Background,
    Impulse,
    Upsampling,
    Shear,
    Rotation,
    Cutout,
    DensityDec,
    DensityInc,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::Uniform,
        CorruptionKind::Gaussian,
        CorruptionKind::Background,
        CorruptionKind::Impulse,
        CorruptionKind::Upsampling,
        CorruptionKind::Shear,
        CorruptionKind::Rotation,
        CorruptionKind::Cutout,
        CorruptionKind::DensityDec,
        CorruptionKind::DensityInc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::Uniform => "uniform",
            CorruptionKind::Gaussian => "gaussian",
            CorruptionKind::Background => "background",
            CorruptionKind::Impulse => "impulse",
            CorruptionKind::Upsampling => "upsampling",
            CorruptionKind::Shear => "shear",
            CorruptionKind::Rotation => "rotation",
            CorruptionKind::Cutout => "cutout",
            CorruptionKind::DensityDec => "density-dec",
            CorruptionKind::DensityInc => "density-inc",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<CorruptionKind> {
        CorruptionKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<CorruptionSpec> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity {severity} outside 1–5")));
        }
        Ok(CorruptionSpec { kind, severity, seed })
    }

    /// Parse "kind:severity", e.g. "gaussian:3". The seed is set separately.
    pub fn parse(s: &str, seed: u64) -> Result<CorruptionSpec> {
        let (kind, sev) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("corruption '{s}' is not kind:severity")))?;
        let severity: u8 = sev
            .parse()
            .map_err(|_| Error::Config(format!("bad severity in '{s}'")))?;
        CorruptionSpec::new(kind.parse()?, severity, seed)
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.kind.name(), self.severity)
    }

    pub fn with_seed(&self, seed: u64) -> CorruptionSpec {
        CorruptionSpec { seed, ..*self }
    }
}

/// Severity schedules, all strictly increasing in s.
pub mod severity {
    /// Noise amplitude for uniform/impulse displacement.
    pub fn amplitude(s: u8) -> f64 {
        0.01 * s as f64
    }

    /// Gaussian noise sigma.
    pub fn sigma(s: u8) -> f64 {
        0.01 * s as f64
    }

    /// Point-count ratio for background/upsampling/impulse subsets.
    pub fn ratio(s: u8) -> f64 {
        0.04 * s as f64
    }

    /// Shear off-diagonal magnitude.
    pub fn shear(s: u8) -> f64 {
        0.05 * s as f64
    }

    /// Rotation angle in radians (6° per severity step).
    pub fn angle(s: u8) -> f64 {
        (6.0 * s as f64).to_radians()
    }

    /// Cutout removal radius.
    pub fn cutout_radius(s: u8) -> f64 {
        0.1 + 0.04 * s as f64
    }

    /// Fraction of points kept by density-dec.
    pub fn keep_fraction(s: u8) -> f64 {
        1.0 - 0.12 * s as f64
    }
}

/// Box–Muller standard normal.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform direction on the unit sphere.
fn random_axis(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = [normal(rng), normal(rng), normal(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Rodrigues rotation of `p` about unit `axis` by `angle`.
fn rotate_point(p: &Point3, axis: &Point3, angle: f64) -> Point3 {
    let (s, c) = angle.sin_cos();
    let dot = axis[0] * p[0] + axis[1] * p[1] + axis[2] * p[2];
    let cross = [
        axis[1] * p[2] - axis[2] * p[1],
        axis[2] * p[0] - axis[0] * p[2],
        axis[0] * p[1] - axis[1] * p[0],
    ];
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = p[a] * c + cross[a] * s + axis[a] * dot * (1.0 - c);
    }
    out
}

/// Distinct random subset of size `k` from `0..n` (partial Fisher–Yates).
fn random_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k.min(n));
    idx
}

fn extra_count(n: usize, s: u8) -> usize {
    (severity::ratio(s) * n as f64).ceil() as usize
}

/// Apply one corruption. Input is assumed unit-normalized. Deterministic
/// given the spec's seed; at least one point is always retained.
pub fn apply_corruption(cloud: &PointCloud, spec: &CorruptionSpec) -> Result<PointCloud> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::Config(format!("severity {} outside 1–5", spec.severity)));
    }
    if cloud.is_empty() {
        return Err(Error::Size("corruption on empty cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.severity;
    let n = cloud.len();
    let mut points = cloud.points.clone();
    match spec.kind {
        CorruptionKind::Uniform => {
            let a = severity::amplitude(s);
            for p in &mut points {
                for ax in 0..3 {
                    p[ax] += rng.gen_range(-a..=a);
                }
            }
        }
        CorruptionKind::Gaussian => {
            let sigma = severity::sigma(s);
            for p in &mut points {
                for ax in 0..3 {
                    p[ax] += sigma * normal(&mut rng);
                }
            }
        }
        CorruptionKind::Background => {
            for _ in 0..extra_count(n, s) {
                points.push([
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                ]);
            }
        }
        CorruptionKind::Impulse => {
            let a = severity::amplitude(s);
            for i in random_subset(&mut rng, n, extra_count(n, s)) {
                let axis = rng.gen_range(0..3);
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                points[i][axis] += sign * a;
            }
        }
        CorruptionKind::Upsampling => {
            for _ in 0..extra_count(n, s) {
                let src = points[rng.gen_range(0..n)];
                let mut dup = src;
                for ax in 0..3 {
                    dup[ax] += 0.01 * normal(&mut rng);
                }
                points.push(dup);
            }
        }
        CorruptionKind::Shear => {
            // upper-triangular, unit diagonal: determinant 1
            let b = severity::shear(s);
            let sxy = if rng.gen::<bool>() { b } else { -b };
            let sxz = if rng.gen::<bool>() { b } else { -b };
            let syz = if rng.gen::<bool>() { b } else { -b };
            for p in &mut points {
                let (x, y, z) = (p[0], p[1], p[2]);
                p[0] = x + sxy * y + sxz * z;
                p[1] = y + syz * z;
            }
        }
        CorruptionKind::Rotation => {
            let axis = random_axis(&mut rng);
            let angle = severity::angle(s);
            for p in &mut points {
                *p = rotate_point(p, &axis, angle);
            }
        }
        CorruptionKind::Cutout => {
            let anchor = points[rng.gen_range(0..n)];
            let r2 = severity::cutout_radius(s).powi(2);
            let kept: Vec<Point3> = points
                .iter()
                .filter(|p| dist2(p, &anchor) > r2)
                .copied()
                .collect();
            points = if kept.is_empty() {
                // keep the point farthest from the anchor
                let far = cloud
                    .points
                    .iter()
                    .max_by(|a, b| dist2(a, &anchor).partial_cmp(&dist2(b, &anchor)).unwrap())
                    .unwrap();
                vec![*far]
            } else {
                kept
            };
        }
        CorruptionKind::DensityDec => {
            let keep = ((severity::keep_fraction(s) * n as f64).floor() as usize).max(1);
            let mut idx = random_subset(&mut rng, n, keep);
            idx.sort();
            points = idx.into_iter().map(|i| points[i]).collect();
        }
        CorruptionKind::DensityInc => {
            let anchor = points[rng.gen_range(0..n)];
            let k = extra_count(n, s);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                dist2(&points[a], &anchor)
                    .partial_cmp(&dist2(&points[b], &anchor))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for &i in order.iter().take(k.min(n)).cycle().take(k) {
                let mut dup = points[i];
                for ax in 0..3 {
                    dup[ax] += 0.01 * normal(&mut rng);
                }
                points.push(dup);
            }
        }
    }
    let out = PointCloud {
        points,
        label: cloud.label,
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationKind {
    Jitter,
    RotationZ,
    HorizontalFlip,
    UniformScale,
}

impl AugmentationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentationKind::Jitter => "jitter",
            AugmentationKind::RotationZ => "rotation-z",
            AugmentationKind::HorizontalFlip => "horizontal-flip",
            AugmentationKind::UniformScale => "uniform-scale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub seed: u64,
}

/// Jitter with explicit parameters (sigma 0 is the identity hook).
pub fn jitter_cloud(cloud: &PointCloud, sigma: f64, clip: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            for ax in 0..3 {
                q[ax] += (sigma * normal(rng)).clamp(-clip, clip);
            }
            q
        })
        .collect();
    PointCloud {
        points,
        label: cloud.label,
    }
}

/// Apply one augmentation to every cloud in a batch, each cloud with its own
/// seed stream. Defaults: jitter N(0, 0.01²) clipped ±0.05; rotation-z a
/// uniform angle; flip negates x; scale a uniform factor in [0.8, 1.25].
pub fn apply_augmentation(batch: &[PointCloud], spec: &AugmentationSpec) -> Vec<PointCloud> {
    batch
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, i as u64));
            match spec.kind {
                AugmentationKind::Jitter => jitter_cloud(cloud, 0.01, 0.05, &mut rng),
                AugmentationKind::RotationZ => {
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    let (s, c) = angle.sin_cos();
                    PointCloud {
                        points: cloud
                            .points
                            .iter()
                            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
                            .collect(),
                        label: cloud.label,
                    }
                }
                AugmentationKind::HorizontalFlip => PointCloud {
                    points: cloud.points.iter().map(|p| [-p[0], p[1], p[2]]).collect(),
                    label: cloud.label,
                },
                AugmentationKind::UniformScale => {
                    let f = rng.gen_range(0.8..1.25);
                    PointCloud {
                        points: cloud
                            .points
                            .iter()
                            .map(|p| [f * p[0], f * p[1], f * p[2]])
                            .collect(),
                        label: cloud.label,
                    }
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| random_axis(&mut rng)).collect();
        crate::geometry::normalize_cloud(&PointCloud::new(pts))
    }

    #[test]
    fn deterministic_per_spec() {
        let c = unit_cloud(100, 1);
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 3, 7).unwrap();
            let a = apply_corruption(&c, &spec).unwrap();
            let b = apply_corruption(&c, &spec).unwrap();
            assert_eq!(a, b, "{}", kind.name());
        }
    }

    #[test]
    fn count_contracts() {
        let c = unit_cloud(100, 2);
        for s in 1..=5u8 {
            let extra = (0.04 * s as f64 * 100.0).ceil() as usize;
            for kind in [CorruptionKind::Background, CorruptionKind::Upsampling] {
                let out = apply_corruption(&c, &CorruptionSpec::new(kind, s, 3).unwrap()).unwrap();
                assert_eq!(out.len(), 100 + extra);
            }
            for kind in [
                CorruptionKind::Uniform,
                CorruptionKind::Gaussian,
                CorruptionKind::Impulse,
                CorruptionKind::Shear,
                CorruptionKind::Rotation,
            ] {
                let out = apply_corruption(&c, &CorruptionSpec::new(kind, s, 3).unwrap()).unwrap();
                assert_eq!(out.len(), 100);
            }
            for kind in [CorruptionKind::Cutout, CorruptionKind::DensityDec] {
                let out = apply_corruption(&c, &CorruptionSpec::new(kind, s, 3).unwrap()).unwrap();
                assert!(!out.is_empty());
                assert!(out.len() <= 100);
            }
        }
    }

    #[test]
    fn background_count_formula() {
        let c = unit_cloud(1000, 4);
        let spec = CorruptionSpec::parse("background:3", 5).unwrap();
        // severity 3 → ρ = 0.12 → ⌈0.12·1000⌉ = 120 extra points
        assert_eq!(apply_corruption(&c, &spec).unwrap().len(), 1120);
    }

    #[test]
    fn rotation_is_isometry() {
        let c = unit_cloud(50, 6);
        let out =
            apply_corruption(&c, &CorruptionSpec::new(CorruptionKind::Rotation, 5, 11).unwrap())
                .unwrap();
        assert_eq!(out.len(), c.len());
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                let before = dist2(&c.points[i], &c.points[j]).sqrt();
                let after = dist2(&out.points[i], &out.points[j]).sqrt();
                assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn severity_schedules_strictly_increase() {
        for s in 1..5u8 {
            assert!(severity::amplitude(s + 1) > severity::amplitude(s));
            assert!(severity::sigma(s + 1) > severity::sigma(s));
            assert!(severity::ratio(s + 1) > severity::ratio(s));
            assert!(severity::shear(s + 1) > severity::shear(s));
            assert!(severity::angle(s + 1) > severity::angle(s));
            assert!(severity::cutout_radius(s + 1) > severity::cutout_radius(s));
            assert!(severity::keep_fraction(s + 1) < severity::keep_fraction(s));
        }
    }

    #[test]
    fn severity_out_of_range_rejected() {
        assert!(CorruptionSpec::new(CorruptionKind::Gaussian, 0, 1).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Gaussian, 6, 1).is_err());
        assert!(CorruptionSpec::parse("gaussian:9", 1).is_err());
        assert!(CorruptionSpec::parse("fog:2", 1).is_err());
        assert!(CorruptionSpec::parse("gaussian3", 1).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let batch = vec![unit_cloud(30, 8), unit_cloud(30, 9)];
        let spec = AugmentationSpec {
            kind: AugmentationKind::HorizontalFlip,
            seed: 0,
        };
        let once = apply_augmentation(&batch, &spec);
        let twice = apply_augmentation(&once, &spec);
        assert_eq!(batch, twice);
    }

    #[test]
    fn jitter_zero_sigma_is_identity() {
        let c = unit_cloud(30, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(jitter_cloud(&c, 0.0, 0.05, &mut rng), c);
    }

    #[test]
    fn scale_preserves_direction() {
        let batch = vec![unit_cloud(30, 12)];
        let spec = AugmentationSpec {
            kind: AugmentationKind::UniformScale,
            seed: 3,
        };
        let out = apply_augmentation(&batch, &spec);
        let n_in = crate::geometry::normalize_cloud(&batch[0]);
        let n_out = crate::geometry::normalize_cloud(&out[0]);
        for (a, b) in n_in.points.iter().zip(&n_out.points) {
            for ax in 0..3 {
                assert!((a[ax] - b[ax]).abs() < 1e-9);
            }
        }
    }
}
