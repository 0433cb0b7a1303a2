//! Frame-feature matrices, their binary file format, manifests and copy annotations.
//!
//! Feature file layout (little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `PVCF`                            |
//! | 2     | version, u16 = 1                        |
//! | 4     | dim, u32                                |
//! | 4     | frame_count, u32                        |
//! | ...   | frame_count × dim f32, row-major        |
//!
//! Files carry no video id. A manifest CSV (`video_id,relative_path`) binds ids to files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"PVCF";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 14;

/// Per-video sequence of frame features, one row per extracted frame.
///
/// Row `i` is the frame at time `i / fps` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub fps: f64,
    dim: usize,
    data: Vec<f32>,
}

impl VideoFeatures {
    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn new(video_id: impl Into<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("feature matrix has no frames".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "{} values do not fill rows of dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value in row {}",
                pos / dim
            )));
        }
        Ok(Self {
            video_id: video_id.into(),
            fps: 1.0,
            dim,
            data,
        })
    }

    pub fn from_rows(video_id: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::Dimension(format!(
                "row {i} has length {} but row 0 has {dim}",
                rows[i].len()
            )));
        }
        Self::new(video_id, dim, rows.concat())
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = fps;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Frames `start..end` as a new matrix with the same id and rate.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frame_count() {
            return Err(Error::InvalidArgument(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frame_count()
            )));
        }
        Ok(Self {
            video_id: self.video_id.clone(),
            fps: self.fps,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        })
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(mut self) -> Result<Self> {
        let dim = self.dim;
        for (i, row) in self.data.chunks_exact_mut(dim).enumerate() {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!(
                    "row {i} of video {:?} is all zeros",
                    self.video_id
                )));
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Ok(self)
    }

    /// Serializes to the binary feature format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.frame_count() as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary feature format. The returned matrix is not normalized.
    pub fn from_bytes(video_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(
                bytes.len() as u64,
                format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            ));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::format(0, "bad magic, expected PVCF"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FEATURE_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(Error::format(6, "dim is 0"));
        }
        if count == 0 {
            return Err(Error::format(10, "frame_count is 0"));
        }
        let expected = HEADER_LEN + dim * count * 4;
        if bytes.len() < expected {
            let whole_rows = (bytes.len() - HEADER_LEN) / (dim * 4);
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated payload: row {whole_rows} incomplete, expected {expected} bytes"),
            ));
        }
        if bytes.len() > expected {
            return Err(Error::format(
                expected as u64,
                format!("{} trailing bytes after payload", bytes.len() - expected),
            ));
        }
        let mut data = Vec::with_capacity(dim * count);
        for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(
                    (HEADER_LEN + 4 * k) as u64,
                    format!("non-finite value in row {}", k / dim),
                ));
            }
            data.push(v);
        }
        Self::new(video_id, dim, data)
    }
}

/// Reads a feature file. The video id defaults to the file stem.
pub fn load_feature_file(path: impl AsRef<Path>) -> Result<VideoFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoFeatures::from_bytes(id, &bytes)
}

pub fn save_feature_file(features: &VideoFeatures, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, features.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a `video_id,relative_path` manifest. Paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, fields) in csv_lines(&text) {
        if fields.len() != 2 {
            return Err(Error::parse(n, format!("expected 2 fields, found {}", fields.len())));
        }
        if n == 1 && fields[0] == "video_id" {
            continue;
        }
        entries.push((fields[0].to_string(), base.join(&fields[1])));
    }
    Ok(entries)
}

/// Loads every video named in a manifest, assigning manifest ids. Rows are not normalized.
pub fn load_manifest_videos(path: impl AsRef<Path>) -> Result<Vec<VideoFeatures>> {
    load_manifest(path)?
        .into_iter()
        .map(|(id, p)| {
            let mut v = load_feature_file(&p)?;
            v.video_id = id;
            Ok(v)
        })
        .collect()
}

/// An annotated copy: `video_a[a_start..=a_end]` is copied in `video_b[b_start..=b_end]`.
///
/// Times are in seconds and both spans are closed intervals.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CopyAnnotation {
    pub video_a: String,
    pub video_b: String,
    pub a_start: f64,
    pub a_end: f64,
    pub b_start: f64,
    pub b_end: f64,
}

impl CopyAnnotation {
    pub fn new(
        video_a: impl Into<String>,
        video_b: impl Into<String>,
        a: (f64, f64),
        b: (f64, f64),
    ) -> Result<Self> {
        let ann = Self {
            video_a: video_a.into(),
            video_b: video_b.into(),
            a_start: a.0,
            a_end: a.1,
            b_start: b.0,
            b_end: b.1,
        };
        ann.validate().map_err(Error::InvalidArgument)?;
        Ok(ann)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let spans = [(self.a_start, self.a_end), (self.b_start, self.b_end)];
        for (start, end) in spans {
            if !(start >= 0.0 && start <= end) {
                return Err(format!("invalid span {start}..{end}"));
            }
        }
        Ok(())
    }
}

/// Parses `HH:MM:SS` into whole seconds.
pub fn parse_timestamp(s: &str) -> Option<f64> {
    let mut parts = s.trim().split(':');
    let (h, m, sec) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() {
        return None;
    }
    let field = |p: &str| -> Option<u64> {
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        p.parse().ok()
    };
    let (h, m, sec) = (field(h)?, field(m)?, field(sec)?);
    if m >= 60 || sec >= 60 {
        return None;
    }
    Some((h * 3600 + m * 60 + sec) as f64)
}

pub fn format_timestamp(seconds: f64) -> String {
    let s = seconds.max(0.0).round() as u64;
    format!("{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
}

/// Parses annotation CSV text, one `video_a,video_b,a_start,a_end,b_start,b_end` record per line.
pub fn parse_annotations(text: &str) -> Result<Vec<CopyAnnotation>> {
    let mut out = Vec::new();
    for (n, fields) in csv_lines(text) {
        if fields.len() != 6 {
            return Err(Error::parse(n, format!("expected 6 fields, found {}", fields.len())));
        }
        if n == 1 && fields[0] == "video_a" {
            continue;
        }
        let mut times = [0.0; 4];
        for (slot, raw) in times.iter_mut().zip(&fields[2..]) {
            *slot = parse_timestamp(raw)
                .ok_or_else(|| Error::parse(n, format!("malformed timestamp {raw:?}")))?;
        }
        let ann = CopyAnnotation {
            video_a: fields[0].to_string(),
            video_b: fields[1].to_string(),
            a_start: times[0],
            a_end: times[1],
            b_start: times[2],
            b_end: times[3],
        };
        ann.validate().map_err(|m| Error::parse(n, m))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<CopyAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[CopyAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for a in annotations {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            a.video_a,
            a.video_b,
            format_timestamp(a.a_start),
            format_timestamp(a.a_end),
            format_timestamp(a.b_start),
            format_timestamp(a.b_end)
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-empty CSV records with their 1-based line numbers.
fn csv_lines(text: &str) -> impl Iterator<Item = (usize, Vec<String>)> + '_ {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let records: Vec<_> = reader
        .records()
        .filter_map(|r| r.ok())
        .map(|r| {
            let line = r.position().map_or(0, |p| p.line() as usize);
            (line, r.iter().map(str::to_string).collect::<Vec<_>>())
        })
        .filter(|(_, f)| !(f.len() == 1 && f[0].is_empty()))
        .collect();
    records.into_iter()
}
