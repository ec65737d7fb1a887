//! Seeded synthetic corpora.
//!
//! Each attribute gets a random unit anchor. Every action class maps to one
//! or two attributes. Videos receive random action intervals; some class
//! pairs are planted to co-occur on identical intervals. A frame's feature
//! is the sum of the anchors of its active attributes, each scaled by a
//! per-video salience, plus Gaussian noise,
//! and a class is labelled active wherever all of its attributes are.
//! With `occlusion > 0` each active attribute is independently hidden on a
//! frame with that probability, so that single frames can miss evidence
//! that neighbouring frames still carry.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::formats::{write_anchor_file, write_feature_file, AnchorSet, FeatureSequence};
use crate::data::labels::{AttributeMap, DenseLabels, Interval, IntervalLabelSet};
use crate::data::manifest::{Corpus, LabelSource, Manifest, ManifestEntry, Split, VideoRecord, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::rng;

pub const PROMPT_TEMPLATES: [&str; 4] = ["A photo of {}", "There is a {}", "An image of {}", "A photo with a {}"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub attributes: usize,
    pub classes: usize,
    pub dim: usize,
    pub max_frames: usize,
    pub min_frames: usize,
    pub videos: usize,
    pub noise_sigma: f64,
    pub occlusion: f64,
    /// Scales the number of action intervals drawn per video.
    pub activity: f64,
    /// Range of the per-video scale of each attribute's anchor.
    pub salience: [f64; 2],
    /// Classes `0..single_classes` take one attribute each, the rest two.
    pub single_classes: usize,
    /// Probability that the partner of a planted pair joins its lead's interval.
    pub pair_rate: f64,
    /// Number of planted (lead, partner) class pairs.
    pub planted_pairs: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub prompts: usize,
    /// Per-dimension spread of the non-canonical prompt anchors around the
    /// canonical one, relative to unit norm.
    pub prompt_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            attributes: 8,
            classes: 10,
            dim: 32,
            max_frames: 64,
            min_frames: 32,
            videos: 250,
            noise_sigma: 0.1,
            occlusion: 0.3,
            activity: 1.0,
            salience: [0.5, 2.0],
            single_classes: 4,
            pair_rate: 0.8,
            planted_pairs: 2,
            val_fraction: 0.2,
            test_fraction: 0.0,
            prompts: PROMPT_TEMPLATES.len(),
            prompt_jitter: 0.2,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.attributes < 2 {
            return fail("synthetic corpus needs at least 2 attributes");
        }
        if self.classes < 2 {
            return fail("synthetic corpus needs at least 2 classes");
        }
        if self.dim == 0 || self.videos == 0 || self.prompts == 0 {
            return fail("dim, videos and prompts must be positive");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail("need 1 <= min_frames <= max_frames");
        }
        if 2 * self.planted_pairs > self.classes {
            return fail("planted pairs must use disjoint classes");
        }
        if self.single_classes > self.attributes.min(self.classes) {
            return fail("single_classes exceeds the attribute or class count");
        }
        if self.classes - self.single_classes > self.attributes * (self.attributes - 1) / 2 {
            return fail("too many classes for distinct 2-attribute signatures");
        }
        if !(self.activity.is_finite() && self.activity >= 0.0) {
            return fail("activity must be finite and non-negative");
        }
        let [lo, hi] = self.salience;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return fail("salience must satisfy 0 < lo <= hi");
        }
        for (name, p) in [
            ("occlusion", self.occlusion),
            ("pair_rate", self.pair_rate),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.occlusion >= 1.0 {
            return fail("occlusion must be below 1");
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return fail("noise_sigma must be finite and non-negative");
        }
        let held_out = self.split_counts();
        if held_out.0 == 0 {
            return fail("split fractions leave no training video");
        }
        Ok(())
    }

    /// `(train, val, test)` video counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let val = (self.videos as f64 * self.val_fraction).round() as usize;
        let test = (self.videos as f64 * self.test_fraction).round() as usize;
        (self.videos.saturating_sub(val + test), val, test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SynthSpec,
    pub corpus: Corpus,
    /// `(lead, partner)` class pairs planted to co-occur.
    pub planted_pairs: Vec<(usize, usize)>,
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn make_anchors(spec: &SynthSpec, rng: &mut impl Rng) -> Result<AnchorSet> {
    let mut values = Vec::with_capacity(spec.attributes * spec.prompts * spec.dim);
    for _ in 0..spec.attributes {
        let base = unit_gaussian(rng, spec.dim);
        values.extend(base.iter().map(|&v| v as f32));
        let jitter = spec.prompt_jitter / (spec.dim as f64).sqrt();
        for _ in 1..spec.prompts {
            let v: Vec<f64> = base
                .iter()
                .map(|&b| {
                    let z: f64 = StandardNormal.sample(rng);
                    b + jitter * z
                })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            values.extend(v.iter().map(|&x| (x / norm) as f32));
        }
    }
    let names = (0..spec.attributes).map(|i| format!("attribute_{i:02}")).collect();
    let prompts = (0..spec.prompts)
        .map(|p| PROMPT_TEMPLATES.get(p).map_or_else(|| format!("Prompt {p} of {{}}"), |s| s.to_string()))
        .collect();
    AnchorSet::new(names, prompts, spec.dim, values)
}

/// Classes below `single_classes` take attribute `c` alone; later classes
/// take a distinct random pair, preferring pairs that contain `c mod N`.
fn make_attribute_map(spec: &SynthSpec, rng: &mut impl Rng) -> AttributeMap {
    let n = spec.attributes;
    let mut used: Vec<Vec<usize>> = Vec::new();
    for c in 0..spec.classes {
        if c < spec.single_classes {
            used.push(vec![c]);
            continue;
        }
        let free: Vec<Vec<usize>> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| vec![a, b]))
            .filter(|p| !used.contains(p))
            .collect();
        let preferred: Vec<&Vec<usize>> = free.iter().filter(|p| p.contains(&(c % n))).collect();
        let pick = if preferred.is_empty() {
            free[rng.random_range(0..free.len())].clone()
        } else {
            preferred[rng.random_range(0..preferred.len())].clone()
        };
        used.push(pick);
    }
    AttributeMap {
        class_to_attributes: used,
    }
}

pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[0x5f37]);
    let anchors = make_anchors(spec, &mut rng)?;
    let attribute_map = make_attribute_map(spec, &mut rng);

    let mut classes: Vec<usize> = (0..spec.classes).collect();
    classes.shuffle(&mut rng);
    let planted_pairs: Vec<(usize, usize)> = (0..spec.planted_pairs)
        .map(|i| (classes[2 * i], classes[2 * i + 1]))
        .collect();
    let partner_of = |c: usize| planted_pairs.iter().find(|p| p.0 == c).map(|p| p.1);

    let (train, val, _) = spec.split_counts();
    let mut videos = Vec::with_capacity(spec.videos);
    for vi in 0..spec.videos {
        let id = format!("v{vi:04}");
        let frames = rng.random_range(spec.min_frames..=spec.max_frames);
        let min_len = (frames / 8).max(3).min(frames);
        let max_len = (frames / 3).max(min_len);
        let count = ((1 + frames / 24) as f64 * spec.activity).round() as usize + rng.random_range(0..=1usize);
        let mut intervals = Vec::new();
        for _ in 0..count {
            let class = rng.random_range(0..spec.classes);
            let len = rng.random_range(min_len..=max_len);
            let start = rng.random_range(0..=frames - len);
            let iv = Interval {
                class,
                start,
                end: start + len - 1,
            };
            intervals.push(iv);
            if let Some(partner) = partner_of(class) {
                if rng.random_bool(spec.pair_rate) {
                    intervals.push(Interval { class: partner, ..iv });
                }
            }
        }
        let sources = IntervalLabelSet {
            video_id: id.clone(),
            class_count: spec.classes,
            intervals,
        }
        .densify(frames)?;
        let labels = IntervalLabelSet {
            video_id: id.clone(),
            class_count: spec.classes,
            intervals: implied_intervals(&sources, &attribute_map, spec.attributes),
        };
        let [lo, hi] = spec.salience;
        let scale: Vec<f64> = (0..spec.attributes)
            .map(|_| if lo < hi { rng.random_range(lo..hi) } else { lo })
            .collect();
        let mut features = Vec::with_capacity(frames * spec.dim);
        let mut row = vec![0f64; spec.dim];
        for t in 0..frames {
            row.iter_mut().for_each(|v| *v = 0.0);
            let active = attribute_map.active_attributes(sources.row(t), spec.attributes);
            for (a, _) in active.iter().enumerate().filter(|(_, &on)| on) {
                if spec.occlusion > 0.0 && rng.random_bool(spec.occlusion) {
                    continue;
                }
                for (r, &v) in row.iter_mut().zip(anchors.anchor(a, 0)) {
                    *r += scale[a] * v as f64;
                }
            }
            if spec.noise_sigma > 0.0 {
                for r in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *r += spec.noise_sigma * z;
                }
            }
            features.extend(row.iter().map(|&v| v as f32));
        }
        let split = if vi < train {
            Split::Train
        } else if vi < train + val {
            Split::Val
        } else {
            Split::Test
        };
        let seq = FeatureSequence::new(id, frames, spec.dim, features)?;
        videos.push(VideoRecord::new(split, seq, labels)?);
    }
    let corpus = Corpus::new(anchors, attribute_map, videos)?;
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        corpus,
        planted_pairs,
    })
}

/// Labels every class whose attributes are all present on a frame, so that a
/// class is active exactly when its anchors are mixed in. Runs become intervals.
fn implied_intervals(sources: &DenseLabels, map: &AttributeMap, attributes: usize) -> Vec<Interval> {
    let present: Vec<Vec<bool>> = (0..sources.frames)
        .map(|t| map.active_attributes(sources.row(t), attributes))
        .collect();
    let mut out = Vec::new();
    for (class, attrs) in map.class_to_attributes.iter().enumerate() {
        let mut start = None;
        for t in 0..=sources.frames {
            let on = t < sources.frames && attrs.iter().all(|&a| present[t][a]);
            match (on, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    out.push(Interval { class, start: s, end: t - 1 });
                    start = None;
                }
                _ => {}
            }
        }
    }
    out
}

/// Writes features, anchors, labels, attribute map and manifest under `dir`.
/// Returns the manifest path.
pub fn write_corpus_dir(dir: &Path, corpus: &Corpus) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir.join("features"))?;
    fs::create_dir_all(dir.join("labels"))?;
    write_anchor_file(&dir.join("anchors.aant"), &corpus.anchors)?;
    fs::write(
        dir.join("attribute_map.json"),
        serde_json::to_string_pretty(&corpus.attribute_map)? + "\n",
    )?;
    let mut entries = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        let feat = format!("features/{}.aanf", v.id());
        let lab = format!("labels/{}.json", v.id());
        write_feature_file(&dir.join(&feat), &v.features)?;
        fs::write(dir.join(&lab), serde_json::to_string_pretty(&v.labels)? + "\n")?;
        entries.push(ManifestEntry {
            id: v.id().to_string(),
            features: feat.into(),
            split: v.split,
            labels: LabelSource::File(lab.into()),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        feature_dim: corpus.feature_dim,
        class_count: corpus.class_count,
        anchors: "anchors.aant".into(),
        attribute_map: "attribute_map.json".into(),
        videos: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::read_manifest;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            videos: 12,
            max_frames: 20,
            min_frames: 10,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn rejects_single_attribute() {
        let spec = SynthSpec {
            attributes: 1,
            ..small(1)
        };
        assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_single_attribute_frame_equals_anchor() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            occlusion: 0.0,
            salience: [1.0, 1.0],
            ..small(3)
        };
        let s = generate_synthetic_corpus(&spec).unwrap();
        let c = &s.corpus;
        let mut checked = 0;
        for v in &c.videos {
            for t in 0..v.frames() {
                let active = c.attribute_map.active_attributes(v.dense.row(t), c.attribute_count());
                let on: Vec<usize> = (0..active.len()).filter(|&a| active[a]).collect();
                if on.len() == 1 {
                    assert_eq!(v.features.row(t), c.anchors.anchor(on[0], 0));
                    checked += 1;
                }
                if on.is_empty() {
                    assert!(v.features.row(t).iter().all(|&x| x == 0.0));
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic_corpus(&small(9)).unwrap();
        let b = generate_synthetic_corpus(&small(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&small(10)).unwrap();
        assert_ne!(a.corpus.videos[0].features, c.corpus.videos[0].features);
    }

    #[test]
    fn attribute_signatures_are_distinct() {
        let s = generate_synthetic_corpus(&small(5)).unwrap();
        let m = &s.corpus.attribute_map.class_to_attributes;
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                assert_ne!(m[i], m[j]);
            }
        }
    }

    #[test]
    fn written_directory_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic_corpus(&small(2)).unwrap();
        let path = write_corpus_dir(dir.path(), &s.corpus).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, s.corpus);
    }
}
