//! Corpus manifests.
//!
//! A manifest is a JSON document; relative paths resolve against the
//! manifest's directory:
//!
//! ```json
//! {
//!   "version": 1,
//!   "feature_dim": 32,
//!   "class_count": 10,
//!   "anchors": "anchors.aant",
//!   "attribute_map": "attribute_map.json",
//!   "videos": [
//!     {"id": "v0000", "features": "features/v0000.aanf", "split": "train",
//!      "labels": "labels/v0000.json"},
//!     {"id": "v0001", "features": "features/v0001.aanf", "split": "val",
//!      "labels": [{"class": 3, "start": 0, "end": 9}]}
//!   ]
//! }
//! ```
//!
//! `labels` is either an inline interval list or the path of a JSON
//! [`IntervalLabelSet`] file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::formats::{missing_or_io, read_anchor_file, read_feature_file, AnchorSet, FeatureSequence};
use crate::data::labels::{AttributeMap, DenseLabels, Interval, IntervalLabelSet};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSource {
    Inline(Vec<Interval>),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub split: Split,
    pub labels: LabelSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub feature_dim: usize,
    pub class_count: usize,
    pub anchors: PathBuf,
    pub attribute_map: PathBuf,
    pub videos: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub split: Split,
    pub features: FeatureSequence,
    pub labels: IntervalLabelSet,
    pub dense: DenseLabels,
}

impl VideoRecord {
    pub fn new(split: Split, features: FeatureSequence, labels: IntervalLabelSet) -> Result<Self> {
        let dense = labels.densify(features.frames)?;
        Ok(Self {
            split,
            features,
            labels,
            dense,
        })
    }

    pub fn id(&self) -> &str {
        &self.features.video_id
    }

    pub fn frames(&self) -> usize {
        self.features.frames
    }
}

/// Validated, fully loaded corpus. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub class_count: usize,
    pub anchors: AnchorSet,
    pub attribute_map: AttributeMap,
    pub videos: Vec<VideoRecord>,
}

impl Corpus {
    pub fn new(anchors: AnchorSet, attribute_map: AttributeMap, videos: Vec<VideoRecord>) -> Result<Self> {
        let corpus = Self {
            feature_dim: anchors.dim,
            class_count: attribute_map.class_count(),
            anchors,
            attribute_map,
            videos,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        self.attribute_map.validate(self.attribute_count())?;
        for v in &self.videos {
            if v.features.dim != self.feature_dim {
                return Err(Error::Corpus(format!(
                    "video `{}` has D0={} but the corpus uses D0={}",
                    v.id(),
                    v.features.dim,
                    self.feature_dim
                )));
            }
            if v.labels.class_count != self.class_count {
                return Err(Error::Corpus(format!(
                    "video `{}` labels use {} classes, the attribute map {}",
                    v.id(),
                    v.labels.class_count,
                    self.class_count
                )));
            }
        }
        if self.split(Split::Train).next().is_none() {
            return Err(Error::Corpus("train split is empty".into()));
        }
        Ok(())
    }

    pub fn attribute_count(&self) -> usize {
        self.anchors.attribute_count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> + '_ {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.videos.len()).filter(|&i| self.videos[i].split == split).collect()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn read_attribute_map(path: &Path) -> Result<AttributeMap> {
    read_json(path)
}

pub fn read_label_file(path: &Path) -> Result<IntervalLabelSet> {
    read_json(path)
}

/// Loads and validates a manifest together with every file it references.
pub fn read_manifest(path: &Path) -> Result<Corpus> {
    let manifest: Manifest = read_json(path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let base = path.parent().unwrap_or(Path::new("."));

    // Existence and dimension checks happen before any payload is parsed.
    for entry in &manifest.videos {
        let fp = resolve(base, &entry.features);
        if !fp.is_file() {
            return Err(Error::MissingFile(fp));
        }
        let (_, dim) = crate::data::formats::read_feature_header(&fp)?;
        if dim != manifest.feature_dim {
            return Err(Error::Corpus(format!(
                "video `{}` has D0={dim}, manifest declares D0={}",
                entry.id, manifest.feature_dim
            )));
        }
    }

    let anchors = read_anchor_file(&resolve(base, &manifest.anchors))?;
    if anchors.dim != manifest.feature_dim {
        return Err(Error::Corpus(format!(
            "anchors have D0={}, manifest declares D0={}",
            anchors.dim, manifest.feature_dim
        )));
    }
    let attribute_map = read_attribute_map(&resolve(base, &manifest.attribute_map))?;
    if attribute_map.class_count() != manifest.class_count {
        return Err(Error::Corpus(format!(
            "attribute map covers {} classes, manifest declares {}",
            attribute_map.class_count(),
            manifest.class_count
        )));
    }

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let mut features = read_feature_file(&resolve(base, &entry.features))?;
        features.video_id = entry.id.clone();
        let labels = match &entry.labels {
            LabelSource::Inline(intervals) => IntervalLabelSet {
                video_id: entry.id.clone(),
                class_count: manifest.class_count,
                intervals: intervals.clone(),
            },
            LabelSource::File(p) => {
                let mut set = read_label_file(&resolve(base, p))?;
                set.video_id = entry.id.clone();
                set
            }
        };
        videos.push(VideoRecord::new(entry.split, features, labels)?);
    }
    Corpus::new(anchors, attribute_map, videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::formats::{write_anchor_file, write_feature_file};

    fn write_corpus(dir: &Path, dims: &[usize], splits: &[&str]) -> PathBuf {
        fs::create_dir_all(dir.join("features")).unwrap();
        let anchors = AnchorSet::new(
            vec!["a".into(), "b".into()],
            vec!["A photo of {}".into()],
            dims[0],
            (0..2 * dims[0]).map(|i| 1.0 + i as f32).collect(),
        )
        .unwrap();
        write_anchor_file(&dir.join("anchors.aant"), &anchors).unwrap();
        fs::write(dir.join("map.json"), r#"{"class_to_attributes": [[0], [1]]}"#).unwrap();
        let mut videos = Vec::new();
        for (i, (&d, split)) in dims.iter().zip(splits).enumerate() {
            let seq = FeatureSequence::new(format!("v{i}"), 3, d, vec![0.5; 3 * d]).unwrap();
            write_feature_file(&dir.join(format!("features/v{i}.aanf")), &seq).unwrap();
            videos.push(serde_json::json!({
                "id": format!("v{i}"),
                "features": format!("features/v{i}.aanf"),
                "split": split,
                "labels": [{"class": 1, "start": 0, "end": 1}],
            }));
        }
        let manifest = serde_json::json!({
            "version": 1, "feature_dim": dims[0], "class_count": 2,
            "anchors": "anchors.aant", "attribute_map": "map.json", "videos": videos,
        });
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        path
    }

    #[test]
    fn two_video_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[4, 4], &["train", "val"]);
        let corpus = read_manifest(&path).unwrap();
        assert_eq!(corpus.videos.len(), 2);
        assert_eq!(corpus.videos[1].split, Split::Val);
        assert!(corpus.videos[0].dense.active(1, 1));
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[768, 512], &["train", "train"]);
        assert!(matches!(read_manifest(&path), Err(Error::Corpus(_))));
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[4, 4], &["val", "test"]);
        assert!(matches!(read_manifest(&path), Err(Error::Corpus(_))));
    }

    #[test]
    fn dangling_path_is_a_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[4], &["train"]);
        fs::remove_file(dir.path().join("features/v0.aanf")).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::MissingFile(_))));
        assert!(matches!(
            read_manifest(&dir.path().join("nope.json")),
            Err(Error::MissingFile(_))
        ));
    }
}
