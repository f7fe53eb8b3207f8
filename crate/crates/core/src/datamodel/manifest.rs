use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive frame interval `[start, end]` labeled with an anomaly class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct GtSegment {
    pub start: usize,
    pub end: usize,
    pub category: usize,
}

impl From<[usize; 3]> for GtSegment {
    fn from([start, end, category]: [usize; 3]) -> Self {
        Self {
            start,
            end,
            category,
        }
    }
}

impl From<GtSegment> for [usize; 3] {
    fn from(s: GtSegment) -> Self {
        [s.start, s.end, s.category]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub feature_file: String,
    pub n_frames: usize,
    pub dim: usize,
    pub y: u8,
    pub category: usize,
    #[serde(default)]
    pub gt_segments: Vec<GtSegment>,
    /// `feature_file` resolved against the manifest directory.
    #[serde(skip)]
    pub feature_path: PathBuf,
}

impl VideoRecord {
    pub fn is_abnormal(&self) -> bool {
        self.y == 1
    }

    /// Per-frame binary labels from the ground-truth segments.
    pub fn frame_labels(&self) -> Vec<bool> {
        let mut labels = vec![false; self.n_frames];
        for s in &self.gt_segments {
            for l in &mut labels[s.start..=s.end.min(self.n_frames - 1)] {
                *l = true;
            }
        }
        labels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Feature dimension shared by every video, if the manifest is non-empty.
    pub fn dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::schema("classes", "at least two classes required"));
        }
        if self.classes[0] != "normal" {
            return Err(Error::schema("classes[0]", "class 0 must be \"normal\""));
        }
        let mut seen = HashSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if !seen.insert(c.as_str()) {
                return Err(Error::schema(format!("classes[{i}]"), format!("duplicate class name {c:?}")));
            }
        }
        let mut ids = HashSet::new();
        let dim = self.dim();
        for (i, v) in self.videos.iter().enumerate() {
            let field = |f: &str| format!("videos[{i}].{f}");
            if !ids.insert(v.id.as_str()) {
                return Err(Error::schema(field("id"), format!("duplicate video id {:?}", v.id)));
            }
            if v.n_frames == 0 {
                return Err(Error::schema(field("n_frames"), "must be positive"));
            }
            if v.dim == 0 || Some(v.dim) != dim {
                return Err(Error::schema(field("dim"), "must be positive and equal across videos"));
            }
            if v.y > 1 {
                return Err(Error::schema(field("y"), "must be 0 or 1"));
            }
            if v.category >= self.classes.len() {
                return Err(Error::schema(field("category"), "index out of range"));
            }
            if (v.y == 0) != (v.category == 0) {
                return Err(Error::InconsistentLabel {
                    video: v.id.clone(),
                    y: v.y,
                    category: v.category,
                });
            }
            for (j, s) in v.gt_segments.iter().enumerate() {
                let f = field(&format!("gt_segments[{j}]"));
                if s.start > s.end || s.end >= v.n_frames {
                    return Err(Error::schema(f, "segment must satisfy start <= end < n_frames"));
                }
                if s.category == 0 || s.category >= self.classes.len() {
                    return Err(Error::schema(f, "segment category must be an anomaly class"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, root: &Path) -> Result<Self> {
        let mut m: DatasetManifest = serde_json::from_str(text)
            .map_err(|e| Error::schema(json_field(&e), e.to_string()))?;
        m.validate()?;
        for v in &mut m.videos {
            v.feature_path = root.join(&v.feature_file);
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    // serde reports "missing field `x`" / "unknown field `x`".
    msg.split('`').nth(1).map_or_else(|| "manifest".to_owned(), str::to_owned)
}

/// Reads and validates a manifest. `path` may be the JSON file or a
/// directory containing `manifest.json`.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let root = file.parent().unwrap_or(Path::new("."));
    DatasetManifest::from_json(&text, root)
}
