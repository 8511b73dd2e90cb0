//! CSI capture ingestion: record parsing, amplitude extraction, link
//! fusion into the channel axis, windowing and per-window standardization.

mod bfee;
pub mod dataset;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bfee::{
    decode_bfee, encode_bfee, pack_csi, parse_dat_stream, payload_len, rx_permutation, BfeeRecord,
    ParseReport, BFEE_CODE,
};

pub const SUBCARRIERS: usize = 30;

#[derive(Debug, Error)]
pub enum CsiError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("receiver {0} missing for this tick")]
    MissingReceiver(usize),
    #[error("link layout: {0}")]
    Layout(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("dataset {path}: {msg}")]
    Dataset { path: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Pose(#[from] crate::pose::PoseError),
}

pub type Result<T> = std::result::Result<T, CsiError>;

/// Complex CSI of one packet at one receiver, integer valued. Entry
/// `[re, im]` is indexed by `(subcarrier, rx antenna, tx antenna)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsiFrame {
    pub n_rx: usize,
    pub n_tx: usize,
    pub values: Vec<[i8; 2]>,
    pub timestamp: u32,
    pub receiver_id: usize,
}

impl CsiFrame {
    pub fn zeros(n_rx: usize, n_tx: usize, timestamp: u32, receiver_id: usize) -> Self {
        CsiFrame {
            n_rx,
            n_tx,
            values: vec![[0, 0]; SUBCARRIERS * n_rx * n_tx],
            timestamp,
            receiver_id,
        }
    }

    fn index(&self, sc: usize, rx: usize, tx: usize) -> usize {
        (sc * self.n_rx + rx) * self.n_tx + tx
    }

    pub fn get(&self, sc: usize, rx: usize, tx: usize) -> [i8; 2] {
        self.values[self.index(sc, rx, tx)]
    }

    pub fn set(&mut self, sc: usize, rx: usize, tx: usize, v: [i8; 2]) {
        let i = self.index(sc, rx, tx);
        self.values[i] = v;
    }
}

/// Entrywise modulus, same `(subcarrier, rx, tx)` layout as the frame.
pub fn amplitude(frame: &CsiFrame) -> Vec<f32> {
    frame
        .values
        .iter()
        .map(|&[re, im]| (re as f32).hypot(im as f32))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub receiver: usize,
    pub tx: usize,
    pub rx: usize,
}

/// Link order along the channel axis: link `links[b]` fills channels
/// `30*b .. 30*b + 30`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkLayout {
    pub links: Vec<Link>,
}

impl Default for LinkLayout {
    fn default() -> Self {
        Self::receiver_major(2, 3, 3)
    }
}

impl LinkLayout {
    pub fn new(links: Vec<Link>) -> Result<Self> {
        if links.is_empty() {
            return Err(CsiError::Layout("no links".into()));
        }
        let mut seen = HashSet::new();
        for l in &links {
            if l.tx >= 3 || l.rx >= 3 {
                return Err(CsiError::Layout(format!(
                    "antenna index out of range in {l:?}"
                )));
            }
            if !seen.insert(*l) {
                return Err(CsiError::Layout(format!("link {l:?} listed twice")));
            }
        }
        Ok(LinkLayout { links })
    }

    /// Receiver, then transmit antenna, then receive antenna.
    pub fn receiver_major(receivers: usize, n_tx: usize, n_rx: usize) -> Self {
        let mut links = Vec::new();
        for receiver in 0..receivers {
            for tx in 0..n_tx {
                for rx in 0..n_rx {
                    links.push(Link { receiver, tx, rx });
                }
            }
        }
        LinkLayout { links }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: LinkLayout = serde_json::from_str(text)?;
        Self::new(raw.links)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn channels(&self) -> usize {
        SUBCARRIERS * self.links.len()
    }

    pub fn receivers(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.links.iter().map(|l| l.receiver).collect();
        r.sort_unstable();
        r.dedup();
        r
    }
}

/// Fuses one tick's frames into a `30 * links` amplitude vector.
pub fn assemble_links(frames: &BTreeMap<usize, CsiFrame>, layout: &LinkLayout) -> Result<Vec<f32>> {
    let mut out = vec![0f32; layout.channels()];
    for (b, l) in layout.links.iter().enumerate() {
        let f = frames
            .get(&l.receiver)
            .ok_or(CsiError::MissingReceiver(l.receiver))?;
        if l.rx >= f.n_rx || l.tx >= f.n_tx {
            return Err(CsiError::InvalidRecord(format!(
                "receiver {} reports {}x{} antennas, layout needs rx {} tx {}",
                l.receiver, f.n_rx, f.n_tx, l.rx, l.tx
            )));
        }
        for sc in 0..SUBCARRIERS {
            let [re, im] = f.get(sc, l.rx, l.tx);
            out[SUBCARRIERS * b + sc] = (re as f32).hypot(im as f32);
        }
    }
    Ok(out)
}

/// Amplitude series of one session, `channels x ticks` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSeries {
    pub channels: usize,
    pub ticks: usize,
    pub data: Vec<f32>,
}

impl CsiSeries {
    pub fn new(channels: usize, ticks: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * ticks {
            return Err(CsiError::Config(format!(
                "{channels} x {ticks} series needs {} values, got {}",
                channels * ticks,
                data.len()
            )));
        }
        Ok(CsiSeries {
            channels,
            ticks,
            data,
        })
    }

    /// Transposes per-tick channel vectors into a series.
    pub fn from_ticks(channels: usize, ticks: &[Vec<f32>]) -> Result<Self> {
        let n = ticks.len();
        let mut data = vec![0f32; channels * n];
        for (t, v) in ticks.iter().enumerate() {
            if v.len() != channels {
                return Err(CsiError::Config(format!(
                    "tick {t} has {} channels, expected {channels}",
                    v.len()
                )));
            }
            for (c, &x) in v.iter().enumerate() {
                data[c * n + t] = x;
            }
        }
        Self::new(channels, n, data)
    }
}

/// Result of fusing per-receiver record streams into ticks.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub series: CsiSeries,
    pub dropped: usize,
}

/// Pairs the `i`-th record of every receiver stream into tick `i` and
/// fuses each tick with `layout`. `streams[r]` holds receiver `r`'s
/// records. Ticks where any receiver is absent or undecodable are dropped.
pub fn ingest_streams(streams: &[Vec<BfeeRecord>], layout: &LinkLayout) -> Result<Ingested> {
    let longest = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut ticks = Vec::with_capacity(longest);
    let mut dropped = 0;
    for i in 0..longest {
        let mut frames = BTreeMap::new();
        for (r, s) in streams.iter().enumerate() {
            if let Some(rec) = s.get(i) {
                match decode_bfee(rec, r) {
                    Ok(f) => {
                        frames.insert(r, f);
                    }
                    Err(e) => tracing::warn!(tick = i, receiver = r, "{e}"),
                }
            }
        }
        match assemble_links(&frames, layout) {
            Ok(v) => ticks.push(v),
            Err(CsiError::MissingReceiver(_)) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(Ingested {
        series: CsiSeries::from_ticks(layout.channels(), &ticks)?,
        dropped,
    })
}

/// One network input: `channels x t` amplitudes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiWindow {
    pub values: Vec<f32>,
    pub channels: usize,
    pub t: usize,
    pub start_tick: usize,
    pub subject_id: String,
    pub session_id: String,
}

pub fn window_count(ticks: usize, t: usize, stride: usize) -> usize {
    if ticks < t || stride == 0 {
        0
    } else {
        (ticks - t) / stride + 1
    }
}

/// Window `j` covers ticks `[j*stride, j*stride + t)`.
pub fn window_at(series: &CsiSeries, t: usize, start: usize) -> CsiWindow {
    let mut values = Vec::with_capacity(series.channels * t);
    for c in 0..series.channels {
        let row = &series.data[c * series.ticks..(c + 1) * series.ticks];
        values.extend_from_slice(&row[start..start + t]);
    }
    CsiWindow {
        values,
        channels: series.channels,
        t,
        start_tick: start,
        subject_id: String::new(),
        session_id: String::new(),
    }
}

pub fn window(series: &CsiSeries, t: usize, stride: usize) -> Result<Vec<CsiWindow>> {
    if stride == 0 {
        return Err(CsiError::Config("window stride must be >= 1".into()));
    }
    if t == 0 {
        return Err(CsiError::Config("window length must be >= 1".into()));
    }
    Ok((0..window_count(series.ticks, t, stride))
        .map(|j| window_at(series, t, j * stride))
        .collect())
}

/// Zero mean, unit variance over all entries of the window.
pub fn normalize(w: &CsiWindow) -> CsiWindow {
    let mut out = w.clone();
    normalize_in_place(&mut out.values);
    out
}

pub fn normalize_in_place(values: &mut [f32]) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let inv = 1.0 / var.max(1e-8).sqrt();
    for v in values {
        *v = ((*v as f64 - mean) * inv) as f32;
    }
}

/// CSI packets per label frame.
pub fn align_streams(csi_hz: u32, label_fps: u32) -> Result<usize> {
    if csi_hz == 0 || label_fps == 0 || csi_hz % label_fps != 0 {
        return Err(CsiError::Config(format!(
            "CSI rate {csi_hz} Hz is not an integer multiple of label rate {label_fps} fps"
        )));
    }
    Ok((csi_hz / label_fps) as usize)
}
