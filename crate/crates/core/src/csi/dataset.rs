//! Portable on-disk dataset: one directory per session holding
//! `csi.f32` (row-major `channels x N` little-endian floats),
//! `labels.csv` and `meta.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CsiError, CsiSeries, Result};
use crate::pose::{self, LabelSequence};

pub const CSI_FILE: &str = "csi.f32";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "meta.json";

fn default_channels() -> usize {
    540
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub subject_id: String,
    pub session_id: String,
    pub action: String,
    pub csi_rate_hz: u32,
    pub label_fps: u32,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub meta: SessionMeta,
    pub csi: CsiSeries,
    pub labels: LabelSequence,
}

fn ds_err(path: &Path, msg: impl Into<String>) -> CsiError {
    CsiError::Dataset {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn write_csi(path: &Path, series: &CsiSeries) -> Result<()> {
    let mut bytes = Vec::with_capacity(series.data.len() * 4);
    for v in &series.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_csi(path: &Path, channels: usize) -> Result<CsiSeries> {
    let bytes = fs::read(path)?;
    if channels == 0 || bytes.len() % (4 * channels) != 0 {
        return Err(ds_err(
            path,
            format!(
                "{} bytes is not a whole number of {channels}-channel ticks",
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(ds_err(path, format!("non-finite value at index {i}")));
    }
    CsiSeries::new(channels, data.len() / channels, data)
}

pub fn read_meta(dir: &Path) -> Result<SessionMeta> {
    let p = dir.join(META_FILE);
    let text = fs::read_to_string(&p).map_err(|e| ds_err(&p, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| ds_err(&p, e.to_string()))
}

pub fn write_meta(dir: &Path, meta: &SessionMeta) -> Result<()> {
    let mut f = fs::File::create(dir.join(META_FILE))?;
    serde_json::to_writer_pretty(&mut f, meta)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_session(dir: &Path) -> Result<Session> {
    let meta = read_meta(dir)?;
    let csi = read_csi(&dir.join(CSI_FILE), meta.channels)?;
    let labels = pose::load_labels(&dir.join(LABELS_FILE), &meta.subject_id, &meta.session_id)
        .map_err(|e| ds_err(&dir.join(LABELS_FILE), e.to_string()))?;
    Ok(Session { meta, csi, labels })
}

/// Writes a session directory, creating it. Fails if it already exists.
pub fn write_session(dir: &Path, session: &Session) -> Result<()> {
    if dir.exists() {
        return Err(ds_err(dir, "already exists"));
    }
    if session.csi.channels != session.meta.channels {
        return Err(ds_err(
            dir,
            format!(
                "meta declares {} channels, series has {}",
                session.meta.channels, session.csi.channels
            ),
        ));
    }
    fs::create_dir_all(dir)?;
    write_csi(&dir.join(CSI_FILE), &session.csi)?;
    pose::save_labels(&dir.join(LABELS_FILE), &session.labels)?;
    write_meta(dir, &session.meta)?;
    Ok(())
}

/// Session directories under `root` in name order. `root` itself counts
/// when it holds a `meta.json`.
pub fn list_sessions(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(META_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| ds_err(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(ds_err(root, "no session directories found"));
    }
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<Session>> {
    list_sessions(root)?
        .iter()
        .map(|d| read_session(d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{PoseSample, NUM_KEYPOINTS};

    #[test]
    fn session_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("s01_walk");
        let meta = SessionMeta {
            subject_id: "s01".into(),
            session_id: "s01_walk".into(),
            action: "walking".into(),
            csi_rate_hz: 600,
            label_fps: 30,
            channels: 3,
        };
        let csi = CsiSeries::new(3, 4, (0..12).map(|v| v as f32 * 0.5).collect()).unwrap();
        let mut p = PoseSample::new(0, [[1.5, -2.0]; NUM_KEYPOINTS]);
        p.subject_id = "s01".into();
        p.session_id = "s01_walk".into();
        let labels = LabelSequence::new("s01", "s01_walk", vec![p]);
        let s = Session { meta, csi, labels };
        write_session(&dir, &s).unwrap();
        assert_eq!(read_session(&dir).unwrap(), s);
        assert!(write_session(&dir, &s).is_err());
        assert_eq!(list_sessions(tmp.path()).unwrap(), vec![dir.clone()]);
        assert_eq!(list_sessions(&dir).unwrap(), vec![dir]);
    }

    #[test]
    fn ragged_csi_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("csi.f32");
        fs::write(&p, [0u8; 10]).unwrap();
        assert!(read_csi(&p, 2).is_err());
    }
}
