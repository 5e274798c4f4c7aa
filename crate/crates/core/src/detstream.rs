//! Detection-stream data model and its line-delimited JSON file format.
//!
//! A stream file starts with one header record followed by one record per
//! frame:
//!
//! ```text
//! {"type":"header","C":3,"D":4,"categories":["a","b","c"]}
//! {"type":"frame","frame_id":0,"detections":[...],"proposals":[...]}
//! ```
//!
//! Floats are written with shortest round-trip formatting, so
//! `parse_stream(write_stream(s)) == s` holds bit for bit.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File extension used for detection streams.
pub const STREAM_EXTENSION: &str = "dstream.jsonl";

/// Axis-aligned box in pixel coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    /// Finite with strictly positive width and height.
    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.as_array()
    }
}

/// One prediction of the frozen source detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub det_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub logits: Vec<f64>,
    #[serde(rename = "feature")]
    pub region_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "feature")]
    pub region_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    #[serde(rename = "categories")]
    pub category_names: Vec<String>,
}

impl StreamHeader {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            category_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStream {
    pub header: StreamHeader,
    pub frames: Vec<Frame>,
}

impl DetectionStream {
    pub fn new(header: StreamHeader) -> Self {
        Self { header, frames: Vec::new() }
    }

    pub fn num_detections(&self) -> usize {
        self.frames.iter().map(|f| f.detections.len()).sum()
    }

    /// Iterates `(frame_id, detection)` over the whole stream in order.
    pub fn detections(&self) -> impl Iterator<Item = (u64, &Detection)> {
        self.frames
            .iter()
            .flat_map(|f| f.detections.iter().map(move |d| (f.frame_id, d)))
    }
}

/// Which invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    HeaderCategoryCount,
    ZeroAreaBox,
    NonFiniteBox,
    ScoreRange,
    NonFinite,
    LogitsDimension,
    FeatureDimension,
    FrameOrder,
    DuplicateDetId,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::HeaderCategoryCount => "category names do not match C",
            Rule::ZeroAreaBox => "box must have x1 < x2 and y1 < y2",
            Rule::NonFiniteBox => "box coordinates must be finite",
            Rule::ScoreRange => "score must lie in [0, 1]",
            Rule::NonFinite => "vector entries must be finite",
            Rule::LogitsDimension => "logits length must equal C",
            Rule::FeatureDimension => "feature length must equal D",
            Rule::FrameOrder => "frame ids must be strictly increasing",
            Rule::DuplicateDetId => "det_id must be unique across the stream",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub frame_id: Option<u64>,
    pub det_id: Option<u64>,
    /// Index into the frame's proposal list, when the violation is on a proposal.
    pub proposal: Option<usize>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(fid) = self.frame_id {
            write!(f, "frame {fid}: ")?;
        }
        if let Some(did) = self.det_id {
            write!(f, "det {did}: ")?;
        }
        if let Some(p) = self.proposal {
            write!(f, "proposal {p}: ")?;
        }
        write!(f, "{}", self.rule)
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {violation}")]
    Invalid { line: usize, violation: Violation },
}

impl StreamError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Header(StreamHeader),
    Frame(Frame),
}

// Borrowing twin of `Record` so writing does not clone frames.
#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum RecordRef<'a> {
    Header(&'a StreamHeader),
    Frame(&'a Frame),
}

fn check_vector(values: &[f64], expected: usize, dim_rule: Rule) -> Option<Rule> {
    if values.len() != expected {
        Some(dim_rule)
    } else if values.iter().any(|v| !v.is_finite()) {
        Some(Rule::NonFinite)
    } else {
        None
    }
}

fn check_box(b: &BoundingBox) -> Option<Rule> {
    if !b.is_finite() {
        Some(Rule::NonFiniteBox)
    } else if !(b.x1 < b.x2 && b.y1 < b.y2) {
        Some(Rule::ZeroAreaBox)
    } else {
        None
    }
}

/// Checks a single frame against the header; `seen` and `prev_frame` carry
/// cross-frame state.
fn frame_violations(
    header: &StreamHeader,
    frame: &Frame,
    prev_frame: Option<u64>,
    seen: &mut HashSet<u64>,
    out: &mut Vec<Violation>,
) {
    let fid = Some(frame.frame_id);
    if let Some(prev) = prev_frame {
        if frame.frame_id <= prev {
            out.push(Violation { frame_id: fid, det_id: None, proposal: None, rule: Rule::FrameOrder });
        }
    }
    for det in &frame.detections {
        let mut push = |rule| {
            out.push(Violation { frame_id: fid, det_id: Some(det.det_id), proposal: None, rule })
        };
        if !seen.insert(det.det_id) {
            push(Rule::DuplicateDetId);
        }
        if let Some(rule) = check_box(&det.bbox) {
            push(rule);
        }
        if !(0.0..=1.0).contains(&det.score) {
            push(Rule::ScoreRange);
        }
        if let Some(rule) = check_vector(&det.logits, header.num_classes, Rule::LogitsDimension) {
            push(rule);
        }
        if let Some(rule) =
            check_vector(&det.region_feature, header.feature_dim, Rule::FeatureDimension)
        {
            push(rule);
        }
    }
    for (i, p) in frame.proposals.iter().enumerate() {
        let mut push =
            |rule| out.push(Violation { frame_id: fid, det_id: None, proposal: Some(i), rule });
        if let Some(rule) = check_box(&p.bbox) {
            push(rule);
        }
        if let Some(rule) =
            check_vector(&p.region_feature, header.feature_dim, Rule::FeatureDimension)
        {
            push(rule);
        }
    }
}

/// Lists every invariant violation in `stream`. Empty means valid.
pub fn validate_stream(stream: &DetectionStream) -> Vec<Violation> {
    let mut out = Vec::new();
    if stream.header.category_names.len() != stream.header.num_classes {
        out.push(Violation {
            frame_id: None,
            det_id: None,
            proposal: None,
            rule: Rule::HeaderCategoryCount,
        });
    }
    let mut seen = HashSet::new();
    let mut prev = None;
    for frame in &stream.frames {
        frame_violations(&stream.header, frame, prev, &mut seen, &mut out);
        prev = Some(frame.frame_id);
    }
    out
}

/// Reads and validates a stream file. The first violation aborts parsing
/// and reports the offending line.
pub fn parse_stream(path: impl AsRef<Path>) -> Result<DetectionStream, StreamError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| StreamError::io(path, e))?;
    read_stream(BufReader::new(file)).map_err(|e| match e {
        StreamError::Io { source, .. } => StreamError::io(path, source),
        other => other,
    })
}

/// Same as [`parse_stream`] but over any buffered reader.
pub fn read_stream<R: BufRead>(reader: R) -> Result<DetectionStream, StreamError> {
    let mut header: Option<StreamHeader> = None;
    let mut frames = Vec::new();
    let mut seen = HashSet::new();
    let mut prev = None;
    let mut scratch = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| StreamError::Io { path: String::new(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| StreamError::Malformed { line: line_no, message: e.to_string() })?;
        match (record, &header) {
            (Record::Header(h), None) => {
                if h.category_names.len() != h.num_classes {
                    return Err(StreamError::Invalid {
                        line: line_no,
                        violation: Violation {
                            frame_id: None,
                            det_id: None,
                            proposal: None,
                            rule: Rule::HeaderCategoryCount,
                        },
                    });
                }
                header = Some(h);
            }
            (Record::Header(_), Some(_)) => {
                return Err(StreamError::Malformed {
                    line: line_no,
                    message: "duplicate header record".into(),
                })
            }
            (Record::Frame(_), None) => {
                return Err(StreamError::Malformed {
                    line: line_no,
                    message: "frame record before header".into(),
                })
            }
            (Record::Frame(frame), Some(h)) => {
                scratch.clear();
                frame_violations(h, &frame, prev, &mut seen, &mut scratch);
                if let Some(violation) = scratch.drain(..).next() {
                    return Err(StreamError::Invalid { line: line_no, violation });
                }
                prev = Some(frame.frame_id);
                frames.push(frame);
            }
        }
    }
    let header = header.ok_or(StreamError::Malformed { line: 1, message: "missing header".into() })?;
    Ok(DetectionStream { header, frames })
}

pub fn write_stream(stream: &DetectionStream, path: impl AsRef<Path>) -> Result<(), StreamError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| StreamError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_stream_to(stream, &mut w).map_err(|e| StreamError::io(path, e))?;
    w.flush().map_err(|e| StreamError::io(path, e))
}

pub fn write_stream_to<W: Write>(stream: &DetectionStream, w: &mut W) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &RecordRef::Header(&stream.header))?;
    w.write_all(b"\n")?;
    for frame in &stream.frames {
        serde_json::to_writer(&mut *w, &RecordRef::Frame(frame))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
