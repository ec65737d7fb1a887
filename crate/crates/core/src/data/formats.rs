//! Binary payload files.
//!
//! All multi-byte fields are little endian. Feature (`AANF`) and score
//! (`AANS`) files share one layout:
//!
//! ```text
//! magic[4] version:u16 rows:u32 cols:u32 values:f32[rows*cols]
//! ```
//!
//! Anchor files (`AANT`):
//!
//! ```text
//! magic[4] version:u16 N:u32 P:u32 D0:u32
//! N attribute names, then P prompt templates, each u32 byte length + UTF-8
//! values:f32[N*P*D0]   (attribute-major, then prompt, then dimension)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"AANF";
pub const SCORE_MAGIC: &[u8; 4] = b"AANS";
pub const ANCHOR_MAGIC: &[u8; 4] = b"AANT";
pub const FORMAT_VERSION: u16 = 1;

/// One video's stacked frame embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub frames: usize,
    pub dim: usize,
    /// `frames × dim`, row-major.
    pub features: Vec<f32>,
    /// `true` marks a valid frame.
    pub mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, frames: usize, dim: usize, features: Vec<f32>) -> Result<Self> {
        let video_id = video_id.into();
        if frames == 0 || dim == 0 || features.len() != frames * dim {
            return Err(Error::Format {
                path: video_id,
                msg: format!("{} values do not form a {frames}x{dim} matrix", features.len()),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                path: video_id,
                msg: "non-finite feature value".into(),
            });
        }
        Ok(Self {
            video_id,
            frames,
            dim,
            features,
            mask: vec![true; frames],
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Length {
                path: self.path.display().to_string(),
                expected: self.pos + n,
                actual: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_err(self.path, "invalid UTF-8 in name block"))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.bytes(4)?;
        if found != magic {
            return Err(format_err(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(format_err(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    /// Reads exactly `count` floats and requires the file to end there.
    fn floats(&mut self, count: usize) -> Result<Vec<f32>> {
        let expected = self.pos + count * 4;
        if self.buf.len() != expected {
            return Err(Error::Length {
                path: self.path.display().to_string(),
                expected,
                actual: self.buf.len(),
            });
        }
        let raw = self.bytes(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_floats(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_matrix(magic: &[u8; 4], rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + values.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    put_floats(&mut out, values);
    out
}

fn decode_matrix(path: &Path, buf: &[u8], magic: &[u8; 4]) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = Reader { path, buf, pos: 0 };
    r.header(magic)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let values = r.floats(rows * cols)?;
    Ok((rows, cols, values))
}

/// Reads only the `(rows, cols)` header of a feature file.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut buf = [0u8; 14];
    let mut f = fs::File::open(path).map_err(|e| missing_or_io(path, e))?;
    let n = f.read(&mut buf)?;
    let mut r = Reader {
        path,
        buf: &buf[..n],
        pos: 0,
    };
    r.header(FEATURE_MAGIC)?;
    Ok((r.u32()? as usize, r.u32()? as usize))
}

pub(crate) fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let buf = fs::read(path).map_err(|e| missing_or_io(path, e))?;
    let (rows, cols, values) = decode_matrix(path, &buf, FEATURE_MAGIC)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(id, rows, cols, values).map_err(|_| format_err(path, "empty or non-finite feature matrix"))
}

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_matrix(FEATURE_MAGIC, seq.frames, seq.dim, &seq.features))?;
    Ok(())
}

/// Per-frame class scores, `frames × classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub frames: usize,
    pub classes: usize,
    pub scores: Vec<f32>,
}

pub fn read_score_file(path: &Path) -> Result<ScoreMatrix> {
    let buf = fs::read(path).map_err(|e| missing_or_io(path, e))?;
    let (frames, classes, scores) = decode_matrix(path, &buf, SCORE_MAGIC)?;
    Ok(ScoreMatrix {
        frames,
        classes,
        scores,
    })
}

pub fn write_score_file(path: &Path, scores: &ScoreMatrix) -> Result<()> {
    fs::write(path, encode_matrix(SCORE_MAGIC, scores.frames, scores.classes, &scores.scores))?;
    Ok(())
}

/// Text anchor embeddings: one vector per attribute per prompt template.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub attribute_names: Vec<String>,
    pub prompt_templates: Vec<String>,
    pub dim: usize,
    /// `N × P × D0`.
    pub anchors: Vec<f32>,
}

impl AnchorSet {
    pub fn new(
        attribute_names: Vec<String>,
        prompt_templates: Vec<String>,
        dim: usize,
        anchors: Vec<f32>,
    ) -> Result<Self> {
        let set = Self {
            attribute_names,
            prompt_templates,
            dim,
            anchors,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Format {
            path: "anchor set".into(),
            msg,
        };
        let (n, p) = (self.attribute_count(), self.prompt_count());
        if n == 0 || p == 0 || self.dim == 0 {
            return Err(bad(format!("empty anchor set (N={n}, P={p}, D0={})", self.dim)));
        }
        if self.anchors.len() != n * p * self.dim {
            return Err(bad(format!("{} values for N={n}, P={p}, D0={}", self.anchors.len(), self.dim)));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.attribute_names.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(bad(format!("duplicate attribute name `{dup}`")));
        }
        for (i, v) in self.anchors.chunks(self.dim).enumerate() {
            if v.iter().any(|x| !x.is_finite()) || v.iter().all(|&x| x == 0.0) {
                return Err(bad(format!(
                    "anchor for attribute {} prompt {} is zero or non-finite",
                    i / p,
                    i % p
                )));
            }
        }
        Ok(())
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_templates.len()
    }

    pub fn anchor(&self, attribute: usize, prompt: usize) -> &[f32] {
        let off = (attribute * self.prompt_count() + prompt) * self.dim;
        &self.anchors[off..off + self.dim]
    }
}

pub fn read_anchor_file(path: &Path) -> Result<AnchorSet> {
    let buf = fs::read(path).map_err(|e| missing_or_io(path, e))?;
    let mut r = Reader {
        path,
        buf: &buf,
        pos: 0,
    };
    r.header(ANCHOR_MAGIC)?;
    let n = r.u32()? as usize;
    let p = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let names = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let prompts = (0..p).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let anchors = r.floats(n * p * dim)?;
    AnchorSet::new(names, prompts, dim, anchors).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_anchor_file(path: &Path, set: &AnchorSet) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(ANCHOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [set.attribute_count(), set.prompt_count(), set.dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in set.attribute_names.iter().chain(&set.prompt_templates) {
        put_string(&mut out, s);
    }
    put_floats(&mut out, &set.anchors);
    fs::write(path, out)?;
    Ok(())
}
