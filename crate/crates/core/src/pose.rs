//! Keypoint labels: loading, occlusion repair and skeleton geometry.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_KEYPOINTS: usize = 15;

/// Floor applied to the reference scale so PCK never divides by zero.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("labels row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("labels: {0}")]
    Csv(#[from] csv::Error),
    #[error("keypoint '{keypoint}' has no valid frame in session '{session}'")]
    EmptyTrack { keypoint: String, session: String },
    #[error("skeleton topology: {0}")]
    Topology(String),
    #[error("skeleton topology json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PoseError>;

/// Keypoint names and the bone tree used by the bone loss and scale factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

const STANDARD_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "mid_hip",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
];

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::standard()
    }
}

impl SkeletonTopology {
    /// OpenPose body order for the first 15 joints, with the canonical
    /// 14-bone tree over them.
    pub fn standard() -> Self {
        let edges = vec![
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 4),
            (1, 5),
            (5, 6),
            (6, 7),
            (1, 8),
            (8, 9),
            (9, 10),
            (10, 11),
            (8, 12),
            (12, 13),
            (13, 14),
        ];
        SkeletonTopology {
            names: STANDARD_NAMES.iter().map(|s| s.to_string()).collect(),
            edges,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let topo: SkeletonTopology = serde_json::from_str(text)?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks 15 distinct names (including the two reference joints) and
    /// 14 in-range edges forming a spanning tree.
    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        if n != NUM_KEYPOINTS {
            return Err(PoseError::Topology(format!(
                "expected {NUM_KEYPOINTS} names, got {n}"
            )));
        }
        let unique: HashSet<&String> = self.names.iter().collect();
        if unique.len() != n {
            return Err(PoseError::Topology("duplicate keypoint names".into()));
        }
        if self.edges.len() != n - 1 {
            return Err(PoseError::Topology(format!(
                "expected {} edges, got {}",
                n - 1,
                self.edges.len()
            )));
        }
        // union-find: n-1 edges without a cycle span the tree
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for &(a, b) in &self.edges {
            if a >= n || b >= n {
                return Err(PoseError::Topology(format!("edge ({a}, {b}) out of range")));
            }
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra == rb {
                return Err(PoseError::Topology(format!(
                    "edge ({a}, {b}) closes a cycle"
                )));
            }
            parent[ra] = rb;
        }
        self.scale_pair()?;
        Ok(())
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Indices of the right shoulder and left hip.
    pub fn scale_pair(&self) -> Result<(usize, usize)> {
        let find = |name: &str| {
            self.index(name)
                .ok_or_else(|| PoseError::Topology(format!("missing keypoint name '{name}'")))
        };
        Ok((find("right_shoulder")?, find("left_hip")?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub keypoints: [[f64; 2]; NUM_KEYPOINTS],
    pub confidence: [f64; NUM_KEYPOINTS],
    pub frame_index: u64,
    pub subject_id: String,
    pub session_id: String,
}

impl PoseSample {
    pub fn new(frame_index: u64, keypoints: [[f64; 2]; NUM_KEYPOINTS]) -> Self {
        PoseSample {
            keypoints,
            confidence: [1.0; NUM_KEYPOINTS],
            frame_index,
            subject_id: String::new(),
            session_id: String::new(),
        }
    }
}

pub type MissingMask = Vec<[bool; NUM_KEYPOINTS]>;

/// Labels of one session in frame order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabelSequence {
    pub subject_id: String,
    pub session_id: String,
    pub samples: Vec<PoseSample>,
}

impl LabelSequence {
    pub fn new(subject_id: &str, session_id: &str, samples: Vec<PoseSample>) -> Self {
        LabelSequence {
            subject_id: subject_id.to_string(),
            session_id: session_id.to_string(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn header() -> Vec<String> {
    let mut h = vec!["frame_index".to_string()];
    for name in STANDARD_NAMES {
        for suffix in ["x", "y", "c"] {
            h.push(format!("{name}_{suffix}"));
        }
    }
    h
}

/// Reads `labels.csv`: a header row, then `frame_index` followed by 15
/// `(x, y, confidence)` triples. Rows with 15 `(x, y)` pairs only are
/// accepted and get confidence 1.
pub fn read_labels(reader: impl Read, subject_id: &str, session_id: &str) -> Result<LabelSequence> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut samples: Vec<PoseSample> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let stride = match rec.len() {
            l if l == 1 + 3 * NUM_KEYPOINTS => 3,
            l if l == 1 + 2 * NUM_KEYPOINTS => 2,
            l => {
                return Err(PoseError::Row {
                    row,
                    msg: format!(
                        "expected {} or {} columns, got {l}",
                        1 + 3 * NUM_KEYPOINTS,
                        1 + 2 * NUM_KEYPOINTS
                    ),
                })
            }
        };
        let num = |col: usize| -> Result<f64> {
            let v: f64 = rec[col].parse().map_err(|_| PoseError::Row {
                row,
                msg: format!("column {col}: '{}' is not a number", &rec[col]),
            })?;
            if !v.is_finite() {
                return Err(PoseError::Row {
                    row,
                    msg: format!("column {col} is not finite"),
                });
            }
            Ok(v)
        };
        let frame_index: u64 = rec[0].parse().map_err(|_| PoseError::Row {
            row,
            msg: format!("frame_index '{}' is not a non-negative integer", &rec[0]),
        })?;
        if let Some(prev) = samples.last() {
            if frame_index <= prev.frame_index {
                return Err(PoseError::Row {
                    row,
                    msg: format!("frame_index {frame_index} does not increase"),
                });
            }
        }
        let mut s = PoseSample::new(frame_index, [[0.0; 2]; NUM_KEYPOINTS]);
        for k in 0..NUM_KEYPOINTS {
            let base = 1 + stride * k;
            s.keypoints[k] = [num(base)?, num(base + 1)?];
            if stride == 3 {
                let c = num(base + 2)?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(PoseError::Row {
                        row,
                        msg: format!("confidence {c} outside [0, 1]"),
                    });
                }
                s.confidence[k] = c;
            }
        }
        s.subject_id = subject_id.to_string();
        s.session_id = session_id.to_string();
        samples.push(s);
    }
    Ok(LabelSequence::new(subject_id, session_id, samples))
}

pub fn load_labels(path: &Path, subject_id: &str, session_id: &str) -> Result<LabelSequence> {
    read_labels(std::fs::File::open(path)?, subject_id, session_id)
}

pub fn write_labels(writer: impl Write, seq: &LabelSequence) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header())?;
    for s in &seq.samples {
        let mut rec = Vec::with_capacity(1 + 3 * NUM_KEYPOINTS);
        rec.push(s.frame_index.to_string());
        for k in 0..NUM_KEYPOINTS {
            rec.push(s.keypoints[k][0].to_string());
            rec.push(s.keypoints[k][1].to_string());
            rec.push(s.confidence[k].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_labels(path: &Path, seq: &LabelSequence) -> Result<()> {
    write_labels(std::io::BufWriter::new(std::fs::File::create(path)?), seq)
}

/// A keypoint is missing when both coordinates are exactly zero or its
/// confidence is exactly zero.
pub fn detect_missing(seq: &LabelSequence) -> MissingMask {
    seq.samples
        .iter()
        .map(|s| {
            let mut m = [false; NUM_KEYPOINTS];
            for k in 0..NUM_KEYPOINTS {
                let [x, y] = s.keypoints[k];
                m[k] = (x == 0.0 && y == 0.0) || s.confidence[k] == 0.0;
            }
            m
        })
        .collect()
}

/// Linear interpolation weight of frame `t` between `t_prev` and `t_next`.
pub fn interpolation_factor(t: u64, t_prev: u64, t_next: u64) -> f64 {
    (t - t_prev) as f64 / (t_next - t_prev) as f64
}

/// Fills every missing keypoint from its nearest valid neighbors in time.
/// Interior gaps are linearly interpolated on frame index; leading and
/// trailing gaps copy the nearest valid value. Confidence is filled the
/// same way so the result has an empty missing mask.
pub fn interpolate_missing(seq: &LabelSequence, topo: &SkeletonTopology) -> Result<LabelSequence> {
    let mask = detect_missing(seq);
    let mut out = seq.clone();
    if seq.is_empty() {
        return Ok(out);
    }
    for k in 0..NUM_KEYPOINTS {
        let valid: Vec<usize> = (0..seq.len()).filter(|&i| !mask[i][k]).collect();
        if valid.is_empty() {
            return Err(PoseError::EmptyTrack {
                keypoint: topo.names.get(k).cloned().unwrap_or_else(|| k.to_string()),
                session: seq.session_id.clone(),
            });
        }
        if valid.len() == seq.len() {
            continue;
        }
        let mut next_pos = 0;
        for i in 0..seq.len() {
            if !mask[i][k] {
                continue;
            }
            while next_pos < valid.len() && valid[next_pos] < i {
                next_pos += 1;
            }
            let prev = next_pos.checked_sub(1).map(|p| valid[p]);
            let next = valid.get(next_pos).copied();
            let (kp, conf) = match (prev, next) {
                (Some(p), Some(n)) => {
                    let sp = &seq.samples[p];
                    let sn = &seq.samples[n];
                    let a = interpolation_factor(
                        seq.samples[i].frame_index,
                        sp.frame_index,
                        sn.frame_index,
                    );
                    let lerp = |u: f64, v: f64| (1.0 - a) * u + a * v;
                    (
                        [
                            lerp(sp.keypoints[k][0], sn.keypoints[k][0]),
                            lerp(sp.keypoints[k][1], sn.keypoints[k][1]),
                        ],
                        lerp(sp.confidence[k], sn.confidence[k]),
                    )
                }
                (Some(j), None) | (None, Some(j)) => {
                    (seq.samples[j].keypoints[k], seq.samples[j].confidence[k])
                }
                (None, None) => unreachable!("track has at least one valid frame"),
            };
            out.samples[i].keypoints[k] = kp;
            out.samples[i].confidence[k] = conf;
        }
    }
    Ok(out)
}

/// Right-shoulder to left-hip distance, floored at [`SCALE_FLOOR`].
pub fn reference_scale(pose: &PoseSample, topo: &SkeletonTopology) -> f64 {
    let (a, b) = topo.scale_pair().unwrap_or((2, 12));
    dist(pose.keypoints[a], pose.keypoints[b]).max(SCALE_FLOOR)
}

pub fn bone_lengths(pose: &PoseSample, topo: &SkeletonTopology) -> Vec<f64> {
    topo.edges
        .iter()
        .map(|&(a, b)| dist(pose.keypoints[a], pose.keypoints[b]))
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}
