//! Session-level dataset partitions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    RandomSession,
    Loso,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Train, validation and test fractions for the random mode.
    pub ratios: [f64; 3],
    pub test_subject: Option<String>,
    /// Train and validation fractions of the pool left after removing
    /// the test subject.
    pub pool_ratio: [f64; 2],
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::RandomSession,
            ratios: [0.70, 0.15, 0.15],
            test_subject: None,
            pool_ratio: [0.90, 0.10],
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        check_ratios("split.ratios", &self.ratios)?;
        check_ratios("split.pool_ratio", &self.pool_ratio)?;
        if self.mode == SplitMode::Loso && self.test_subject.is_none() {
            return Err(TrainError::Split("loso split needs a test subject".into()));
        }
        Ok(())
    }
}

fn check_ratios(what: &str, r: &[f64]) -> Result<()> {
    if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::Split(format!(
            "{what} must be non-negative and sum to 1, got {r:?}"
        )));
    }
    Ok(())
}

/// Identity of one recording session.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub subject_id: String,
    pub session_id: String,
}

impl SessionKey {
    pub fn new(subject_id: &str, session_id: &str) -> Self {
        SessionKey {
            subject_id: subject_id.into(),
            session_id: session_id.into(),
        }
    }
}

/// Session assignment written next to every run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<SessionKey>,
    pub val: Vec<SessionKey>,
    pub test: Vec<SessionKey>,
}

impl SplitManifest {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Fails unless the three sets are disjoint and cover `all` exactly.
    pub fn check_partition(&self, all: &[SessionKey]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for k in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(k) {
                return Err(TrainError::Split(format!(
                    "session {} appears in more than one set",
                    k.session_id
                )));
            }
        }
        let want: BTreeSet<&SessionKey> = all.iter().collect();
        if seen != want {
            return Err(TrainError::Split(
                "split does not cover the session list exactly".into(),
            ));
        }
        Ok(())
    }
}

/// Splits `n` items by `ratios` with the largest-remainder rule; ties go
/// to the earlier set.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

fn shuffled(sessions: &[SessionKey], seed: u64) -> Vec<SessionKey> {
    let mut v = sessions.to_vec();
    v.sort();
    v.dedup();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

fn sorted(mut v: Vec<SessionKey>) -> Vec<SessionKey> {
    v.sort();
    v
}

/// Shuffles whole sessions and cuts them into train/val/test.
pub fn split_random_session(
    sessions: &[SessionKey],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitManifest> {
    check_ratios("ratios", &ratios)?;
    let order = shuffled(sessions, seed);
    if order.len() < 3 {
        return Err(TrainError::Split(format!(
            "need at least 3 sessions, got {}",
            order.len()
        )));
    }
    let sizes = largest_remainder(order.len(), &ratios);
    let (train, rest) = order.split_at(sizes[0]);
    let (val, test) = rest.split_at(sizes[1]);
    Ok(SplitManifest {
        train: sorted(train.to_vec()),
        val: sorted(val.to_vec()),
        test: sorted(test.to_vec()),
    })
}

/// Holds out every session of `test_subject`; the rest is split into
/// train/val by `pool_ratio`.
pub fn split_loso(
    sessions: &[SessionKey],
    test_subject: &str,
    pool_ratio: [f64; 2],
    seed: u64,
) -> Result<SplitManifest> {
    check_ratios("pool_ratio", &pool_ratio)?;
    let order = shuffled(sessions, seed);
    let (test, pool): (Vec<SessionKey>, Vec<SessionKey>) = order
        .into_iter()
        .partition(|k| k.subject_id == test_subject);
    if test.is_empty() {
        return Err(TrainError::Split(format!(
            "subject {test_subject} has no sessions"
        )));
    }
    let sizes = largest_remainder(pool.len(), &pool_ratio);
    let (train, val) = pool.split_at(sizes[0]);
    Ok(SplitManifest {
        train: sorted(train.to_vec()),
        val: sorted(val.to_vec()),
        test: sorted(test),
    })
}

pub fn split_sessions(
    sessions: &[SessionKey],
    spec: &SplitSpec,
    seed: u64,
) -> Result<SplitManifest> {
    spec.validate()?;
    let m = match spec.mode {
        SplitMode::RandomSession => split_random_session(sessions, spec.ratios, seed)?,
        SplitMode::Loso => split_loso(
            sessions,
            spec.test_subject.as_deref().unwrap_or_default(),
            spec.pool_ratio,
            seed,
        )?,
    };
    m.check_partition(&shuffled(sessions, 0))?;
    Ok(m)
}
