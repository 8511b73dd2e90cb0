//! Synthetic CSI/pose pairs: cartoon motions driven through a multipath
//! channel `H = H_s + sum_n alpha_n exp(-j 2 pi d_n / lambda)` whose path
//! lengths are affine in keypoint coordinates.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csi::dataset::{write_session, Session, SessionMeta};
use crate::csi::{align_streams, CsiError, CsiSeries};
use crate::pose::{LabelSequence, PoseSample, NUM_KEYPOINTS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown action '{0}'")]
    UnknownAction(String),
    #[error("synth config: {0}")]
    Config(String),
    #[error("{0} already exists")]
    Collision(PathBuf),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub type Keypoints = [[f64; 2]; NUM_KEYPOINTS];

/// Frames per second of generated trajectories.
pub const POSE_FPS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Walking,
    RaisingHands,
    Squatting,
    HandsUp,
    Kicking,
    Waving,
    Turning,
    Jumping,
}

pub const ACTIONS: [Action; 8] = [
    Action::Walking,
    Action::RaisingHands,
    Action::Squatting,
    Action::HandsUp,
    Action::Kicking,
    Action::Waving,
    Action::Turning,
    Action::Jumping,
];

impl Action {
    pub fn tag(self) -> &'static str {
        match self {
            Action::Walking => "walking",
            Action::RaisingHands => "raising_hands",
            Action::Squatting => "squatting",
            Action::HandsUp => "hands_up",
            Action::Kicking => "kicking",
            Action::Waving => "waving",
            Action::Turning => "turning",
            Action::Jumping => "jumping",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Action {
    type Err = SynthError;

    /// Accepts `raising_hands`, `Raising Hands`, `raising-hands`, ...
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace([' ', '-'], "_");
        ACTIONS
            .iter()
            .copied()
            .find(|a| a.tag() == norm)
            .ok_or_else(|| SynthError::UnknownAction(s.to_string()))
    }
}

/// Parent of each keypoint in the kinematic tree; mid-hip (8) is the root.
const PARENT: [usize; NUM_KEYPOINTS] = [1, 8, 1, 2, 3, 1, 5, 6, 8, 8, 9, 10, 8, 12, 13];
/// Order in which keypoints can be placed (parents first).
const FK_ORDER: [usize; 14] = [1, 0, 2, 3, 4, 5, 6, 7, 9, 10, 11, 12, 13, 14];
/// Rest direction of the bone ending at each keypoint, degrees from +x
/// with y pointing up.
const REST_ANGLE: [f64; NUM_KEYPOINTS] = [
    90.0, 90.0, 180.0, -90.0, -90.0, 0.0, -90.0, -90.0, 0.0, 180.0, -90.0, -90.0, 0.0, -90.0, -90.0,
];
/// Template bone lengths in meters (entry 8 is unused).
const TEMPLATE_LENGTH: [f64; NUM_KEYPOINTS] = [
    0.22, 0.50, 0.18, 0.28, 0.25, 0.18, 0.28, 0.25, 0.0, 0.10, 0.42, 0.40, 0.10, 0.42, 0.40,
];

/// Bone lengths of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub length: [f64; NUM_KEYPOINTS],
}

impl Body {
    pub fn template() -> Self {
        Body {
            length: TEMPLATE_LENGTH,
        }
    }

    /// Template scaled by a per-subject factor with left/right-symmetric
    /// per-bone jitter.
    pub fn for_subject(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0D1);
        let scale = rng.random_range(0.9..1.1);
        let mut length = TEMPLATE_LENGTH;
        // right/left pairs share a factor
        for (r, l) in [(2, 5), (3, 6), (4, 7), (9, 12), (10, 13), (11, 14)] {
            let j = rng.random_range(0.97..1.03);
            length[r] *= scale * j;
            length[l] *= scale * j;
        }
        for k in [0, 1] {
            length[k] *= scale * rng.random_range(0.97..1.03);
        }
        Body { length }
    }

    fn hip_height(&self) -> f64 {
        self.length[10] + self.length[11]
    }
}

fn smooth_cycle(phase: f64) -> f64 {
    (1.0 - phase.cos()) / 2.0
}

/// Quintic ease from 0 to 1 with zero first and second derivatives at
/// both ends.
fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

/// Per-session motion parameters.
#[derive(Clone, Copy, Debug)]
struct Motion {
    freq: f64,
    amp: f64,
    slow: f64,
    ramp: f64,
}

fn place(body: &Body, root: [f64; 2], delta: &[f64; NUM_KEYPOINTS]) -> Keypoints {
    let mut kp = [[0.0; 2]; NUM_KEYPOINTS];
    let mut angle = [0.0; NUM_KEYPOINTS];
    kp[8] = root;
    angle[8] = delta[8];
    for &k in &FK_ORDER {
        let p = PARENT[k];
        // deltas accumulate down the tree; the rest angle is absolute
        angle[k] = angle[p] + delta[k];
        let phi = (REST_ANGLE[k] + angle[k]).to_radians();
        kp[k] = [
            kp[p][0] + body.length[k] * phi.cos(),
            kp[p][1] + body.length[k] * phi.sin(),
        ];
    }
    kp
}

fn pose_at(action: Action, body: &Body, m: &Motion, t: f64) -> Keypoints {
    let w = 2.0 * PI * m.freq * t;
    let s = smooth_cycle(w);
    let mut d = [0.0; NUM_KEYPOINTS];
    let mut root = [0.0, body.hip_height()];
    match action {
        Action::Walking => {
            root[0] = m.slow * (2.0 * PI * 0.1 * t).sin();
            root[1] += 0.02 * smooth_cycle(2.0 * w);
            d[10] = 25.0 * m.amp * w.sin();
            d[13] = -25.0 * m.amp * w.sin();
            d[11] = 10.0 * m.amp * smooth_cycle(w);
            d[14] = -10.0 * m.amp * smooth_cycle(w + PI);
            d[3] = -20.0 * m.amp * w.sin();
            d[6] = -20.0 * m.amp * w.sin();
        }
        Action::RaisingHands => {
            // arms sweep from hanging to overhead through the sides
            d[3] = -180.0 * m.amp * s;
            d[6] = 180.0 * m.amp * s;
        }
        Action::Squatting => {
            let th = 60.0 * m.amp * s;
            d[10] = -th;
            d[11] = th;
            d[13] = th;
            d[14] = -th;
            d[3] = -40.0 * s;
            d[6] = 40.0 * s;
            // keep the ankles on the floor
            let drop = body.length[10] * (1.0 - th.to_radians().cos());
            root[1] -= drop;
        }
        Action::HandsUp => {
            let r = smootherstep(t / m.ramp);
            d[3] = -170.0 * m.amp * r + 5.0 * r * w.sin();
            d[6] = 170.0 * m.amp * r - 5.0 * r * w.sin();
        }
        Action::Kicking => {
            d[10] = -60.0 * m.amp * s;
            d[11] = 30.0 * m.amp * s;
            d[6] = 25.0 * s;
            d[3] = -10.0 * s;
        }
        Action::Waving => {
            let r = smootherstep(t / m.ramp);
            d[3] = -130.0 * r;
            d[4] = 35.0 * m.amp * r * w.sin();
        }
        Action::Turning => {
            d[1] = 12.0 * m.amp * w.sin();
            root[0] = m.slow * 0.3 * (w / 2.0).sin();
            d[3] = -30.0 * m.amp * w.sin();
            d[6] = -30.0 * m.amp * w.sin();
        }
        Action::Jumping => {
            root[1] += 0.25 * m.amp * s;
            d[10] = -15.0 * s;
            d[11] = 30.0 * s;
            d[13] = 15.0 * s;
            d[14] = -30.0 * s;
            d[3] = -120.0 * m.amp * s;
            d[6] = 120.0 * m.amp * s;
        }
    }
    place(body, root, &d)
}

/// A generated keypoint track at [`POSE_FPS`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Keypoints>,
    /// Frames per motion cycle. Every cyclic action starts at its rest
    /// phase, so the first half cycle is the rising half.
    pub period_frames: f64,
}

pub fn gen_trajectory(action: Action, frames: usize, body: &Body, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = match action {
        Action::Walking => (0.8, 1.2),
        Action::RaisingHands => (0.2, 0.35),
        Action::Squatting => (0.2, 0.4),
        Action::HandsUp => (0.3, 0.5),
        Action::Kicking => (0.4, 0.7),
        Action::Waving => (1.0, 2.0),
        Action::Turning => (0.2, 0.4),
        Action::Jumping => (0.6, 0.9),
    };
    let m = Motion {
        freq: rng.random_range(lo..hi),
        amp: rng.random_range(0.85..1.0),
        slow: rng.random_range(0.5..1.0),
        ramp: rng.random_range(0.8..1.5),
    };
    Trajectory {
        frames: (0..frames)
            .map(|f| pose_at(action, body, &m, f as f64 / POSE_FPS))
            .collect(),
        period_frames: POSE_FPS / m.freq,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    pub channels: usize,
    /// Range of `|H_s|` per channel.
    pub static_magnitude: [f64; 2],
    pub paths_per_channel: usize,
    /// Range of `|alpha_n|`.
    pub alpha: [f64; 2],
    /// Keypoints whose coordinates drive each path length.
    pub keypoints_per_path: usize,
    /// Largest absolute coefficient of a coordinate in a path length.
    pub coupling: f64,
    pub noise_std: f64,
    pub csi_rate_hz: u32,
    pub label_fps: u32,
    pub subjects: usize,
    /// Sessions per subject.
    pub sessions: usize,
    /// CSI ticks per session, truncated to whole label frames.
    pub ticks: usize,
    /// Probability that a labeled keypoint is blanked as occluded.
    pub label_dropout: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            wavelength: 0.06,
            channels: 540,
            static_magnitude: [1.0, 2.0],
            paths_per_channel: 3,
            alpha: [0.1, 0.5],
            keypoints_per_path: 2,
            coupling: 0.2,
            noise_std: 0.01,
            csi_rate_hz: 600,
            label_fps: 30,
            subjects: 2,
            sessions: 4,
            ticks: 12_000,
            label_dropout: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if !(self.wavelength > 0.0) {
            return bad("wavelength must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.paths_per_channel > 0 && self.keypoints_per_path == 0 {
            return bad("keypoints_per_path must be >= 1");
        }
        if self.paths_per_channel > 0 && self.channels * self.paths_per_channel < NUM_KEYPOINTS {
            return bad("too few paths to drive every keypoint");
        }
        if !(self.static_magnitude[0] >= 0.0
            && self.static_magnitude[0] <= self.static_magnitude[1])
        {
            return bad("static_magnitude must be an ordered non-negative range");
        }
        if !(self.alpha[0] >= 0.0 && self.alpha[0] <= self.alpha[1]) {
            return bad("alpha must be an ordered non-negative range");
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return bad("label_dropout must lie in [0, 1)");
        }
        align_streams(self.csi_rate_hz, self.label_fps)?;
        Ok(())
    }
}

/// One dynamic path: `d(t) = offset + sum(ax * x_k + ay * y_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSpec {
    pub alpha: f64,
    pub offset: f64,
    pub terms: Vec<(usize, f64, f64)>,
}

impl PathSpec {
    pub fn length(&self, kp: &Keypoints) -> f64 {
        self.offset
            + self
                .terms
                .iter()
                .map(|&(k, ax, ay)| ax * kp[k][0] + ay * kp[k][1])
                .sum::<f64>()
    }
}

/// Static components and dynamic paths of every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Room {
    pub wavelength: f64,
    /// `H_s` per channel as (re, im).
    pub statics: Vec<[f64; 2]>,
    pub paths: Vec<Vec<PathSpec>>,
}

/// `|H_s + sum alpha_n exp(-j 2 pi d_n / lambda)|` for `(alpha_n, d_n)` pairs.
pub fn channel_amplitude(hs: [f64; 2], paths: &[(f64, f64)], wavelength: f64) -> f64 {
    let (mut re, mut im) = (hs[0], hs[1]);
    for &(alpha, d) in paths {
        let phi = -2.0 * PI * d / wavelength;
        re += alpha * phi.cos();
        im += alpha * phi.sin();
    }
    re.hypot(im)
}

impl Room {
    pub fn generate(cfg: &SynthConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x800A);
        let mut statics = Vec::with_capacity(cfg.channels);
        let mut paths = Vec::with_capacity(cfg.channels);
        let mut driven = 0usize;
        for _ in 0..cfg.channels {
            let mag = rng.random_range(cfg.static_magnitude[0]..=cfg.static_magnitude[1]);
            let ph = rng.random_range(0.0..2.0 * PI);
            statics.push([mag * ph.cos(), mag * ph.sin()]);
            let mut ch = Vec::with_capacity(cfg.paths_per_channel);
            for _ in 0..cfg.paths_per_channel {
                let mut terms = Vec::with_capacity(cfg.keypoints_per_path);
                // the first keypoint walks round-robin so every joint is driven
                terms.push(driven % NUM_KEYPOINTS);
                driven += 1;
                while terms.len() < cfg.keypoints_per_path.min(NUM_KEYPOINTS) {
                    let k = rng.random_range(0..NUM_KEYPOINTS);
                    if !terms.contains(&k) {
                        terms.push(k);
                    }
                }
                ch.push(PathSpec {
                    alpha: rng.random_range(cfg.alpha[0]..=cfg.alpha[1]),
                    offset: rng.random_range(1.0..5.0),
                    terms: terms
                        .into_iter()
                        .map(|k| {
                            (
                                k,
                                rng.random_range(-cfg.coupling..=cfg.coupling),
                                rng.random_range(-cfg.coupling..=cfg.coupling),
                            )
                        })
                        .collect(),
                });
            }
            paths.push(ch);
        }
        Room {
            wavelength: cfg.wavelength,
            statics,
            paths,
        }
    }

    /// Noise-free amplitude of every channel for one pose.
    pub fn amplitudes(&self, kp: &Keypoints) -> Vec<f64> {
        let mut buf = Vec::new();
        self.statics
            .iter()
            .zip(&self.paths)
            .map(|(&hs, ps)| {
                buf.clear();
                buf.extend(ps.iter().map(|p| (p.alpha, p.length(kp))));
                channel_amplitude(hs, &buf, self.wavelength)
            })
            .collect()
    }
}

fn lerp_pose(a: &Keypoints, b: &Keypoints, w: f64) -> Keypoints {
    let mut out = *a;
    for k in 0..NUM_KEYPOINTS {
        for c in 0..2 {
            out[k][c] = (1.0 - w) * a[k][c] + w * b[k][c];
        }
    }
    out
}

/// Amplitudes at `ticks_per_frame` ticks per pose frame; poses are
/// linearly interpolated between frames and Gaussian noise is added.
pub fn gen_csi_from_pose(
    poses: &[Keypoints],
    room: &Room,
    ticks_per_frame: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> CsiSeries {
    let channels = room.statics.len();
    let n = poses.len() * ticks_per_frame;
    let mut data = vec![0f32; channels * n];
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    for i in 0..n {
        let f = i / ticks_per_frame;
        let w = (i % ticks_per_frame) as f64 / ticks_per_frame as f64;
        let kp = match poses.get(f + 1) {
            Some(next) => lerp_pose(&poses[f], next, w),
            None => poses[f],
        };
        for (c, a) in room.amplitudes(&kp).into_iter().enumerate() {
            let v = if noise_std > 0.0 {
                a + noise.sample(rng)
            } else {
                a
            };
            data[c * n + i] = v as f32;
        }
    }
    CsiSeries::new(channels, n, data).expect("series layout")
}

fn session_seed(seed: u64, subject: usize, session: usize) -> u64 {
    seed ^ ((subject as u64) << 32 | session as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One generated session; no files touched.
pub fn gen_session(
    cfg: &SynthConfig,
    room: &Room,
    subject: usize,
    session: usize,
) -> Result<Session> {
    let ppf = align_streams(cfg.csi_rate_hz, cfg.label_fps)?;
    let frames = cfg.ticks / ppf;
    let action = ACTIONS[(subject + session) % ACTIONS.len()];
    let subject_id = format!("s{:02}", subject + 1);
    let session_id = format!("{subject_id}_{:02}_{}", session + 1, action.tag());
    let seed = session_seed(cfg.seed, subject, session);
    let body = Body::for_subject(cfg.seed ^ (subject as u64 + 1));
    let track = gen_trajectory(action, frames, &body, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC51);
    let csi = gen_csi_from_pose(&track.frames, room, ppf, cfg.noise_std, &mut rng);
    let samples = track
        .frames
        .iter()
        .enumerate()
        .map(|(f, kp)| {
            let mut p = PoseSample::new(f as u64, *kp);
            p.subject_id = subject_id.clone();
            p.session_id = session_id.clone();
            for k in 0..NUM_KEYPOINTS {
                if cfg.label_dropout > 0.0 && rng.random::<f64>() < cfg.label_dropout {
                    p.keypoints[k] = [0.0, 0.0];
                    p.confidence[k] = 0.0;
                }
            }
            p
        })
        .collect();
    Ok(Session {
        meta: SessionMeta {
            subject_id: subject_id.clone(),
            session_id: session_id.clone(),
            action: action.tag().to_string(),
            csi_rate_hz: cfg.csi_rate_hz,
            label_fps: cfg.label_fps,
            channels: cfg.channels,
        },
        csi,
        labels: LabelSequence::new(&subject_id, &session_id, samples),
    })
}

/// Every session of the configured dataset, in memory.
pub fn gen_sessions(cfg: &SynthConfig) -> Result<Vec<Session>> {
    cfg.validate()?;
    let room = Room::generate(cfg, cfg.seed);
    let mut out = Vec::new();
    for subject in 0..cfg.subjects {
        for session in 0..cfg.sessions {
            out.push(gen_session(cfg, &room, subject, session)?);
        }
    }
    Ok(out)
}

/// Writes the dataset under `root` in the portable layout, one directory
/// per session. Fails before writing anything if a target exists.
pub fn make_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    let sessions = gen_sessions(cfg)?;
    let dirs: Vec<PathBuf> = sessions
        .iter()
        .map(|s| root.join(&s.meta.session_id))
        .collect();
    if let Some(d) = dirs.iter().find(|d| d.exists()) {
        return Err(SynthError::Collision(d.clone()));
    }
    std::fs::create_dir_all(root)?;
    for (s, d) in sessions.iter().zip(&dirs) {
        write_session(d, s)?;
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{bone_lengths, SkeletonTopology};

    #[test]
    fn tags_parse_loosely() {
        assert_eq!(
            "Raising Hands".parse::<Action>().unwrap(),
            Action::RaisingHands
        );
        assert_eq!("hands-up".parse::<Action>().unwrap(), Action::HandsUp);
        assert!("moonwalk".parse::<Action>().is_err());
        for a in ACTIONS {
            assert_eq!(a.tag().parse::<Action>().unwrap(), a);
        }
    }

    #[test]
    fn zero_frames_is_empty() {
        assert!(gen_trajectory(Action::Jumping, 0, &Body::template(), 1)
            .frames
            .is_empty());
    }

    #[test]
    fn rest_pose_has_template_lengths() {
        let kp = place(&Body::template(), [0.0, 0.82], &[0.0; NUM_KEYPOINTS]);
        let topo = SkeletonTopology::standard();
        let lens = bone_lengths(&PoseSample::new(0, kp), &topo);
        for (&(a, b), l) in topo.edges.iter().zip(lens) {
            let child = if PARENT[b] == a { b } else { a };
            assert!((l - TEMPLATE_LENGTH[child]).abs() < 1e-12);
        }
        // standing on the floor
        assert!(kp[11][1].abs() < 1e-12 && kp[14][1].abs() < 1e-12);
    }

    #[test]
    fn squat_keeps_feet_on_floor() {
        let body = Body::for_subject(3);
        let tr = gen_trajectory(Action::Squatting, 120, &body, 4);
        for kp in &tr.frames {
            assert!(kp[11][1].abs() < 1e-9, "{}", kp[11][1]);
        }
    }

    #[test]
    fn static_only_channel_is_constant() {
        let cfg = SynthConfig {
            channels: 4,
            paths_per_channel: 0,
            noise_std: 0.0,
            ..Default::default()
        };
        let room = Room::generate(&cfg, 1);
        let tr = gen_trajectory(Action::Walking, 10, &Body::template(), 2);
        let s = gen_csi_from_pose(
            &tr.frames,
            &room,
            20,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        for c in 0..4 {
            let row = &s.data[c * s.ticks..(c + 1) * s.ticks];
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }
}
