//! Raw point clouds: KITTI velodyne `.bin` I/O and synthetic generators.
//!
//! The KITTI format is a headerless sequence of records, each holding four
//! little-endian `f32` values:
//!
//! ```text
//! ┌───────┬───────┬───────┬─────────────┐
//! │ x:f32 │ y:f32 │ z:f32 │ reflectance │
//! │ 4B    │ 4B    │ 4B    │ 4B (f32)    │
//! └───────┴───────┴───────┴─────────────┘
//! ```
//!
//! Values are widened to `f64` on load and narrowed on write.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const KITTI_RECORD: usize = 16;

pub const KITTI_CHANNELS: [&str; 4] = ["x", "y", "z", "reflectance"];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    channels: Vec<String>,
    source: String,
}

impl PointCloud {
    /// Builds a cloud from row-major `M × channels.len()` values.
    pub fn new(points: Vec<f64>, channels: Vec<String>, source: impl Into<String>) -> Result<Self> {
        let c = channels.len();
        if c < 3 {
            return Err(Error::ChannelCount {
                expected: 3,
                actual: c,
            });
        }
        if !points.len().is_multiple_of(c) {
            return Err(Error::Shape(format!(
                "{} values do not divide into rows of {c}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                point: i / c,
                channel: i % c,
            });
        }
        Ok(Self {
            points,
            channels,
            source: source.into(),
        })
    }

    /// A cloud with the standard KITTI channel layout.
    pub fn kitti(points: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        Self::new(
            points,
            KITTI_CHANNELS.iter().map(|s| s.to_string()).collect(),
            source,
        )
    }

    pub fn empty_kitti() -> Self {
        Self::kitti(Vec::new(), "empty").expect("empty cloud is valid")
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channels
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn values(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let c = self.channels.len();
        &self.points[i * c..(i + 1) * c]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.channels.len())
    }

    /// Returns a cloud with rows reordered so that row `i` is `self.point(order[i])`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let mut points = Vec::with_capacity(self.points.len());
        for &i in order {
            points.extend_from_slice(self.point(i));
        }
        Self {
            points,
            channels: self.channels.clone(),
            source: self.source.clone(),
        }
    }
}

pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % KITTI_RECORD != 0 {
        return Err(Error::BadLength {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 4);
    for (i, word) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([word[0], word[1], word[2], word[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                point: i / 4,
                channel: i % 4,
            });
        }
        points.push(v as f64);
    }
    PointCloud::kitti(points, path.display().to_string())
}

pub fn encode_kitti(cloud: &PointCloud) -> Result<Vec<u8>> {
    if cloud.channel_count() != 4 {
        return Err(Error::ChannelCount {
            expected: 4,
            actual: cloud.channel_count(),
        });
    }
    let mut out = Vec::with_capacity(cloud.values().len() * 4);
    for (i, &v) in cloud.values().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NotSinglePrecision {
                point: i / 4,
                value: v,
            });
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn write_kitti_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_kitti(cloud)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    UniformBox,
    GaussianClusters,
    EqualExtremesPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent {
    pub fn unit() -> Self {
        Self {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    fn contains(&self, p: &[f64]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Parameters for [`generate_synthetic`]. Serialized as JSON with keys
/// `kind`, `extent`, `count`, `seed`, `label` (plus optional cluster settings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCloudSpec {
    pub kind: GeneratorKind,
    pub extent: Extent,
    pub count: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
    /// Cluster centers for `gaussian-clusters`; defaults to the extent center.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centers: Vec<[f64; 3]>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    0.1
}

impl SyntheticCloudSpec {
    pub fn new(kind: GeneratorKind, extent: Extent, count: usize, seed: u64) -> Self {
        Self {
            kind,
            extent,
            count,
            seed,
            label: None,
            centers: Vec::new(),
            sigma: default_sigma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidSpec("point count must be at least 1".into()));
        }
        for a in 0..3 {
            let (lo, hi) = (self.extent.min[a], self.extent.max[a]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidSpec(format!(
                    "extent axis {a} must satisfy min < max, got [{lo}, {hi}]"
                )));
            }
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidSpec("sigma must be finite and >= 0".into()));
        }
        if self.kind == GeneratorKind::EqualExtremesPair {
            if self.count < 2 {
                return Err(Error::InvalidSpec(
                    "equal-extremes-pair needs at least 2 points for the anchors".into(),
                ));
            }
            if self.label.is_some_and(|l| l > 1) {
                return Err(Error::InvalidSpec(
                    "equal-extremes-pair label must be 0 or 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Fraction of each axis occupied by one mode of the bimodal class.
pub(crate) const BIMODAL_WIDTH: f64 = 0.15;

/// Samples one interior coordinate in `[0, 1]` for the equal-extremes classes:
/// class 0 is uniform, class 1 is concentrated near both ends.
pub(crate) fn equal_extremes_unit<R: Rng>(rng: &mut R, class: u32) -> f64 {
    let u: f64 = rng.random();
    if class == 0 {
        u
    } else if rng.random::<bool>() {
        u * BIMODAL_WIDTH
    } else {
        1.0 - u * BIMODAL_WIDTH
    }
}

pub fn generate_synthetic(spec: &SyntheticCloudSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = spec.extent;
    let lerp = |a: usize, t: f64| ext.min[a] + t * (ext.max[a] - ext.min[a]);
    let mut points = Vec::with_capacity(spec.count * 4);
    match spec.kind {
        GeneratorKind::UniformBox => {
            for _ in 0..spec.count {
                for a in 0..3 {
                    points.push(lerp(a, rng.random()));
                }
                points.push(rng.random());
            }
        }
        GeneratorKind::GaussianClusters => {
            let centers = if spec.centers.is_empty() {
                vec![[0, 1, 2].map(|a| 0.5 * (ext.min[a] + ext.max[a]))]
            } else {
                spec.centers.clone()
            };
            let normal =
                Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidSpec(format!("sigma: {e}")))?;
            for i in 0..spec.count {
                let center = centers[i % centers.len()];
                for (a, c) in center.iter().enumerate() {
                    let v = c + normal.sample(&mut rng);
                    points.push(v.clamp(ext.min[a], ext.max[a]));
                }
                points.push(rng.random());
            }
        }
        GeneratorKind::EqualExtremesPair => {
            let class = spec.label.unwrap_or(0);
            // Anchors pin every channel's min and max regardless of class.
            for t in [0.0, 1.0] {
                for a in 0..3 {
                    points.push(lerp(a, t));
                }
                points.push(t);
            }
            for _ in 2..spec.count {
                for a in 0..3 {
                    points.push(lerp(a, equal_extremes_unit(&mut rng, class)));
                }
                points.push(equal_extremes_unit(&mut rng, class));
            }
        }
    }
    let cloud = PointCloud::kitti(points, format!("synthetic:{:?}:seed={}", spec.kind, spec.seed))?;
    debug_assert!(cloud.iter().all(|p| ext.contains(p)));
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kitti_bytes(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn decodes_hand_built_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.bin");
        fs::write(&path, kitti_bytes(&[1.0, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.25])).unwrap();
        let cloud = load_kitti_bin(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.values(), &[1.0, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.25]);
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        fs::write(&path, []).unwrap();
        assert_eq!(load_kitti_bin(&path).unwrap().len(), 0);
        write_kitti_bin(&PointCloud::empty_kitti(), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 0);
    }

    #[test]
    fn single_point_encodes_to_known_bytes() {
        let cloud = PointCloud::kitti(vec![1.0, 2.0, 3.0, 0.5], "t").unwrap();
        let bytes = encode_kitti(&cloud).unwrap();
        assert_eq!(
            bytes,
            [
                0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x40, 0x40, 0x00, 0x00, 0x00,
                0x3f
            ]
        );
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_kitti_bin(dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
        let odd = dir.path().join("odd.bin");
        fs::write(&odd, [0u8; 17]).unwrap();
        assert!(matches!(
            load_kitti_bin(&odd),
            Err(Error::BadLength { len: 17, .. })
        ));
        let nan = dir.path().join("nan.bin");
        fs::write(&nan, kitti_bytes(&[0.0, 0.0, 0.0, 0.0, 1.0, f32::NAN, 0.0, 0.0])).unwrap();
        assert!(matches!(
            load_kitti_bin(&nan),
            Err(Error::NonFinite { point: 1, channel: 1 })
        ));
    }

    #[test]
    fn write_rejects_wrong_channels_and_overflow() {
        let three =
            PointCloud::new(vec![1.0, 2.0, 3.0], vec!["x".into(), "y".into(), "z".into()], "t").unwrap();
        assert!(matches!(
            encode_kitti(&three),
            Err(Error::ChannelCount {
                expected: 4,
                actual: 3
            })
        ));
        let huge = PointCloud::kitti(vec![1e300, 0.0, 0.0, 0.0], "t").unwrap();
        assert!(matches!(
            encode_kitti(&huge),
            Err(Error::NotSinglePrecision { .. })
        ));
    }

    #[test]
    fn cloud_rejects_non_finite_and_narrow() {
        assert!(PointCloud::kitti(vec![0.0, f64::INFINITY, 0.0, 0.0], "t").is_err());
        assert!(PointCloud::new(vec![0.0, 0.0], vec!["x".into(), "y".into()], "t").is_err());
    }

    #[test]
    fn uniform_box_is_deterministic_and_contained() {
        let spec = SyntheticCloudSpec::new(GeneratorKind::UniformBox, Extent::unit(), 10, 7);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 10);
        assert!(a
            .values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().all(|p| p[..3].iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn degenerate_gaussian_sits_at_center() {
        let mut spec = SyntheticCloudSpec::new(
            GeneratorKind::GaussianClusters,
            Extent {
                min: [-1.0; 3],
                max: [1.0; 3],
            },
            25,
            3,
        );
        spec.centers = vec![[0.0; 3]];
        spec.sigma = 0.0;
        let cloud = generate_synthetic(&spec).unwrap();
        assert!(cloud.iter().all(|p| p[..3] == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn equal_extremes_classes_share_min_max() {
        let ext = Extent {
            min: [-2.0, 0.0, 1.0],
            max: [2.0, 5.0, 1.5],
        };
        let scan = |cloud: &PointCloud| {
            let mut lo = [f64::INFINITY; 4];
            let mut hi = [f64::NEG_INFINITY; 4];
            for p in cloud.iter() {
                for c in 0..4 {
                    lo[c] = lo[c].min(p[c]);
                    hi[c] = hi[c].max(p[c]);
                }
            }
            (lo, hi)
        };
        for seed in 0..20 {
            let mut spec = SyntheticCloudSpec::new(GeneratorKind::EqualExtremesPair, ext, 50, seed);
            spec.label = Some(0);
            let a = generate_synthetic(&spec).unwrap();
            spec.label = Some(1);
            let b = generate_synthetic(&spec).unwrap();
            assert_eq!(scan(&a), scan(&b));
            assert_ne!(a, b);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SyntheticCloudSpec::new(GeneratorKind::UniformBox, Extent::unit(), 0, 1);
        assert!(generate_synthetic(&spec).is_err());
        spec.count = 3;
        spec.extent.max[2] = 0.0;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn spec_json_keys() {
        let json = r#"{"kind":"equal-extremes-pair","extent":{"min":[0,0,0],"max":[1,1,1]},"count":8,"seed":4,"label":1}"#;
        let spec: SyntheticCloudSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.kind, GeneratorKind::EqualExtremesPair);
        assert_eq!(spec.label, Some(1));
        assert_eq!(spec.count, 8);
    }
}
