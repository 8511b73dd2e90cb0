//! Pairs CSI windows with the label frame each one ends in.

use std::collections::HashMap;

use super::split::SessionKey;
use super::{Result, TrainError};
use crate::csi::dataset::Session;
use crate::csi::{align_streams, normalize_in_place, window_count};
use crate::pose::{detect_missing, reference_scale, SkeletonTopology, NUM_KEYPOINTS};
use crate::tensor::Tensor;

/// Label frame paired with the window starting at tick `start`: the frame
/// containing the window's last tick.
pub fn label_frame(start: usize, t: usize, ticks_per_frame: usize) -> u64 {
    ((start + t - 1) / ticks_per_frame) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub session: usize,
    pub start: usize,
    /// Index into the session's label samples.
    pub label: usize,
}

/// Every window of a set of sessions, resolved to its label.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    pub sessions: Vec<&'a Session>,
    pub items: Vec<WindowRef>,
    pub t: usize,
}

/// One mini-batch in network layout.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B x C x T`, each window normalized on its own.
    pub input: Tensor<f32>,
    /// Flattened `B x K x 2`.
    pub target: Vec<f64>,
    pub scales: Vec<f64>,
}

fn data_err(s: &Session, msg: impl Into<String>) -> TrainError {
    TrainError::Data {
        session: s.meta.session_id.clone(),
        msg: msg.into(),
    }
}

/// Sessions named by `keys`, in that order.
pub fn select<'a>(sessions: &'a [Session], keys: &[SessionKey]) -> Result<Vec<&'a Session>> {
    keys.iter()
        .map(|k| {
            sessions
                .iter()
                .find(|s| s.meta.session_id == k.session_id && s.meta.subject_id == k.subject_id)
                .ok_or_else(|| {
                    TrainError::Split(format!("session {} not in dataset", k.session_id))
                })
        })
        .collect()
}

pub fn session_keys(sessions: &[Session]) -> Vec<SessionKey> {
    sessions
        .iter()
        .map(|s| SessionKey::new(&s.meta.subject_id, &s.meta.session_id))
        .collect()
}

impl<'a> WindowSet<'a> {
    pub fn build(
        sessions: Vec<&'a Session>,
        t: usize,
        stride: usize,
        channels: usize,
    ) -> Result<Self> {
        let mut items = Vec::new();
        for (si, s) in sessions.iter().enumerate() {
            if s.csi.channels != channels {
                return Err(data_err(
                    s,
                    format!("{} channels, model expects {channels}", s.csi.channels),
                ));
            }
            if let Some((i, m)) = detect_missing(&s.labels)
                .iter()
                .enumerate()
                .find(|(_, m)| m.iter().any(|&x| x))
            {
                let k = m.iter().position(|&x| x).unwrap_or(0);
                return Err(data_err(
                    s,
                    format!(
                        "keypoint {k} missing at frame {}; clean the labels first",
                        s.labels.samples[i].frame_index
                    ),
                ));
            }
            let ppl = align_streams(s.meta.csi_rate_hz, s.meta.label_fps)?;
            let by_frame: HashMap<u64, usize> = s
                .labels
                .samples
                .iter()
                .enumerate()
                .map(|(i, p)| (p.frame_index, i))
                .collect();
            for j in 0..window_count(s.csi.ticks, t, stride) {
                let start = j * stride;
                let frame = label_frame(start, t, ppl);
                let label = *by_frame.get(&frame).ok_or_else(|| {
                    data_err(
                        s,
                        format!("no label for frame {frame} (window at tick {start})"),
                    )
                })?;
                items.push(WindowRef {
                    session: si,
                    start,
                    label,
                });
            }
        }
        Ok(WindowSet { sessions, items, t })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Human-readable identity of window `i`.
    pub fn describe(&self, i: usize) -> String {
        let w = self.items[i];
        format!("{}@{}", self.sessions[w.session].meta.session_id, w.start)
    }

    pub fn batch(&self, ids: &[usize], topo: &SkeletonTopology) -> Batch {
        let t = self.t;
        let channels = self.sessions.first().map_or(0, |s| s.csi.channels);
        let mut input = Vec::with_capacity(ids.len() * channels * t);
        let mut target = Vec::with_capacity(ids.len() * NUM_KEYPOINTS * 2);
        let mut scales = Vec::with_capacity(ids.len());
        for &i in ids {
            let w = self.items[i];
            let s = self.sessions[w.session];
            let at = input.len();
            for c in 0..channels {
                let row = &s.csi.data[c * s.csi.ticks..][..s.csi.ticks];
                input.extend_from_slice(&row[w.start..w.start + t]);
            }
            normalize_in_place(&mut input[at..]);
            let pose = &s.labels.samples[w.label];
            target.extend(pose.keypoints.iter().flatten());
            scales.push(reference_scale(pose, topo));
        }
        Batch {
            input: Tensor::new(vec![ids.len(), channels, t], input).expect("batch layout"),
            target,
            scales,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_pairs_with_frame_of_last_tick() {
        // 20 ticks per frame, T = 20: windows at stride 20 end in frame j
        assert_eq!(label_frame(0, 20, 20), 0);
        assert_eq!(label_frame(20, 20, 20), 1);
        // stride 1: the window over ticks 1..=20 ends in frame 1
        assert_eq!(label_frame(1, 20, 20), 1);
        assert_eq!(label_frame(0, 5, 20), 0);
    }
}
