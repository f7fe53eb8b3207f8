//! Synthetic separable datasets.
//!
//! Normal frames are drawn around one unit-norm centroid; each anomaly class
//! has its own centroid at exactly `cluster_separation` from it (offset
//! orthogonal to the normal centroid). Frames are `centroid + noise·z`,
//! then L2-normalized. Every abnormal video holds one contiguous anomalous
//! segment with length uniform in `[10%, 40%]` of the video and a uniform
//! start.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::features::write_features;
use crate::datamodel::manifest::{DatasetManifest, GtSegment, VideoRecord};
use crate::error::{Error, Result};
use crate::rng::{gaussian, seeded, shuffle, ChaCha8Rng};
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEST_MANIFEST_FILE: &str = "test_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub anomaly_ratio: f64,
    pub cluster_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Extra held-out videos drawn from the same centroids, written to a
    /// second manifest.
    #[serde(default)]
    pub test_videos: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_videos", self.n_videos),
            ("frames_per_video", self.frames_per_video),
            ("dim", self.dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::schema(field, "must be positive"));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::schema("n_classes", "at least two classes required"));
        }
        if !(0.0..=1.0).contains(&self.anomaly_ratio) {
            return Err(Error::schema("anomaly_ratio", "must lie in [0, 1]"));
        }
        if !(self.cluster_separation >= 0.0) || !self.cluster_separation.is_finite() {
            return Err(Error::schema("cluster_separation", "must be finite and nonnegative"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::schema("noise_scale", "must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        std::iter::once("normal".to_owned())
            .chain((1..self.n_classes).map(|c| format!("anomaly_{c}")))
            .collect()
    }
}

/// In-memory result of a synthesis run.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: DatasetManifest,
    pub test: Option<DatasetManifest>,
    /// Generated frames keyed by video id, in generation order.
    pub features: Vec<(String, Matrix<f32>)>,
    /// Row 0 is the normal centroid, row `c` the centroid of class `c`.
    pub centroids: Vec<Vec<f64>>,
}

impl SynthDataset {
    /// Records of `split` paired with their generated frames.
    pub fn paired(&self, split: &DatasetManifest) -> Vec<(VideoRecord, Matrix<f32>)> {
        split
            .videos
            .iter()
            .filter_map(|r| {
                self.features
                    .iter()
                    .find(|(id, _)| *id == r.id)
                    .map(|(_, m)| (r.clone(), m.clone()))
            })
            .collect()
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn class_centroids(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = spec.dim;
    let mut normal: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    unit(&mut normal);
    let mut out = vec![normal.clone()];
    for _ in 1..spec.n_classes {
        let mut dir: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        if d > 1 {
            let proj: f64 = dir.iter().zip(&normal).map(|(a, b)| a * b).sum();
            dir.iter_mut().zip(&normal).for_each(|(x, n)| *x -= proj * n);
        }
        unit(&mut dir);
        out.push(
            normal
                .iter()
                .zip(&dir)
                .map(|(n, u)| n + spec.cluster_separation * u)
                .collect(),
        );
    }
    out
}

fn sample_frame(centroid: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut v: Vec<f64> = centroid.iter().map(|c| c + noise * gaussian(rng)).collect();
    unit(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

fn generate_split(
    spec: &SynthSpec,
    n: usize,
    prefix: &str,
    centroids: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    features: &mut Vec<(String, Matrix<f32>)>,
) -> Vec<VideoRecord> {
    let n_abnormal = (n as f64 * spec.anomaly_ratio).round() as usize;
    let n_anomaly_classes = spec.n_classes - 1;
    let mut categories: Vec<usize> = (0..n)
        .map(|i| if i < n_abnormal { 1 + i % n_anomaly_classes } else { 0 })
        .collect();
    shuffle(&mut categories, rng);

    let frames_n = spec.frames_per_video;
    let mut records = Vec::with_capacity(n);
    for (i, &category) in categories.iter().enumerate() {
        let id = format!("{prefix}_{i:03}");
        let segment = (category != 0).then(|| {
            let lo = ((0.1 * frames_n as f64).ceil() as usize).max(1);
            let hi = ((0.4 * frames_n as f64).floor() as usize).max(lo);
            let len = rng.gen_range(lo..=hi).min(frames_n);
            let start = rng.gen_range(0..=frames_n - len);
            GtSegment {
                start,
                end: start + len - 1,
                category,
            }
        });
        let mut data = Vec::with_capacity(frames_n * spec.dim);
        for f in 0..frames_n {
            let c = match segment {
                Some(s) if (s.start..=s.end).contains(&f) => s.category,
                _ => 0,
            };
            data.extend(sample_frame(&centroids[c], spec.noise_scale, rng));
        }
        let frames = Matrix::from_vec(frames_n, spec.dim, data).expect("sized above");
        records.push(VideoRecord {
            id: id.clone(),
            feature_file: format!("features/{id}.dsaf"),
            n_frames: frames_n,
            dim: spec.dim,
            y: u8::from(category != 0),
            category,
            gt_segments: segment.into_iter().collect(),
            feature_path: Default::default(),
        });
        features.push((id, frames));
    }
    records
}

/// Generates the dataset in memory; deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let centroids = class_centroids(spec, &mut rng);
    let mut features = Vec::new();
    let classes = spec.class_names();
    let train = DatasetManifest {
        classes: classes.clone(),
        videos: generate_split(spec, spec.n_videos, "video", &centroids, &mut rng, &mut features),
    };
    let test = (spec.test_videos > 0).then(|| DatasetManifest {
        classes,
        videos: generate_split(spec, spec.test_videos, "test", &centroids, &mut rng, &mut features),
    });
    Ok(SynthDataset {
        train,
        test,
        features,
        centroids,
    })
}

/// Generates and writes `manifest.json`, optionally `test_manifest.json`,
/// and `features/<id>.dsaf` under `out`.
pub fn synthesize_dataset(spec: &SynthSpec, out: &Path) -> Result<SynthDataset> {
    let mut ds = generate(spec)?;
    let feat_dir = out.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::Io {
        path: feat_dir.clone(),
        source: e,
    })?;
    for (id, frames) in &ds.features {
        write_features(&feat_dir.join(format!("{id}.dsaf")), frames)?;
    }
    let write = |name: &str, m: &DatasetManifest| {
        let p = out.join(name);
        fs::write(&p, m.to_json()).map_err(|e| Error::Io { path: p, source: e })
    };
    write(MANIFEST_FILE, &ds.train)?;
    if let Some(t) = &ds.test {
        write(TEST_MANIFEST_FILE, t)?;
    }
    for v in ds.train.videos.iter_mut().chain(ds.test.iter_mut().flat_map(|t| t.videos.iter_mut())) {
        v.feature_path = out.join(&v.feature_file);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{load_features, load_manifest};

    fn spec() -> SynthSpec {
        SynthSpec {
            n_videos: 20,
            frames_per_video: 24,
            dim: 8,
            n_classes: 3,
            anomaly_ratio: 0.5,
            cluster_separation: 4.0,
            noise_scale: 0.25,
            seed: 7,
            test_videos: 4,
        }
    }

    fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synthesize_dataset(&spec(), a.path()).unwrap();
        synthesize_dataset(&spec(), b.path()).unwrap();
        assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    }

    #[test]
    fn abnormal_count_is_exact() {
        let ds = generate(&spec()).unwrap();
        assert_eq!(ds.train.videos.iter().filter(|v| v.y == 1).count(), 10);
        assert_eq!(ds.test.unwrap().videos.iter().filter(|v| v.y == 1).count(), 2);
    }

    #[test]
    fn segments_follow_labels() {
        let ds = generate(&spec()).unwrap();
        for v in &ds.train.videos {
            if v.y == 1 {
                assert_eq!(v.gt_segments.len(), 1);
                let s = v.gt_segments[0];
                let len = s.end - s.start + 1;
                assert!((3..=9).contains(&len), "{len}");
                assert_eq!(s.category, v.category);
            } else {
                assert!(v.gt_segments.is_empty());
            }
        }
        ds.train.validate().unwrap();
    }

    #[test]
    fn zero_separation_collapses_centroids() {
        let ds = generate(&SynthSpec {
            cluster_separation: 0.0,
            ..spec()
        })
        .unwrap();
        for c in &ds.centroids[1..] {
            assert_eq!(c, &ds.centroids[0]);
        }
    }

    #[test]
    fn separation_distance_holds() {
        let ds = generate(&spec()).unwrap();
        for c in &ds.centroids[1..] {
            let d: f64 = c
                .iter()
                .zip(&ds.centroids[0])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(&spec(), dir.path()).unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.videos.len(), 20);
        for (rec, (id, frames)) in m.videos.iter().zip(&ds.features) {
            assert_eq!(&rec.id, id);
            let f = load_features::<f32>(rec).unwrap();
            assert_eq!(&f.frames, frames);
        }
        let t = load_manifest(&dir.path().join(TEST_MANIFEST_FILE)).unwrap();
        assert_eq!(t.videos.len(), 4);
    }

    #[test]
    fn frames_are_unit_norm() {
        let ds = generate(&spec()).unwrap();
        let (_, f) = &ds.features[0];
        for i in 0..f.rows() {
            assert!((f.row_norm(i) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate(&SynthSpec {
            anomaly_ratio: 1.5,
            ..spec()
        })
        .is_err());
        assert!(generate(&SynthSpec { dim: 0, ..spec() }).is_err());
    }
}
