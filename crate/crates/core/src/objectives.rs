//! Training losses and evaluation metrics over `N x K x 2` keypoint batches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::SkeletonTopology;
use crate::tensor::{Float, TensorError, Var};

pub use crate::tensor::smooth_l1_value as smooth_l1_h;

/// PCK thresholds reported everywhere, as fractions of the reference scale.
pub const PCK_ALPHAS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("{what}: prediction has {pred} values, target has {gt}")]
    Shape {
        what: &'static str,
        pred: usize,
        gt: usize,
    },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta_main: f64,
    pub beta_bone: f64,
    pub lambda_bone: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta_main: 0.1,
            beta_bone: 0.05,
            lambda_bone: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_main > 0.0) {
            return Err(ObjectiveError::Config("beta_main must be > 0".into()));
        }
        if !(self.beta_bone > 0.0) {
            return Err(ObjectiveError::Config("beta_bone must be > 0".into()));
        }
        if !(self.lambda_bone >= 0.0) {
            return Err(ObjectiveError::Config("lambda_bone must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_pair<F: Float>(what: &'static str, pred: &Var<'_, F>, gt: &Var<'_, F>) -> Result<()> {
    let (ps, gs) = (pred.shape(), gt.shape());
    if ps != gs {
        return Err(TensorError::ShapeMismatch {
            op: what,
            lhs: ps,
            rhs: gs,
        }
        .into());
    }
    if ps.len() != 3 || ps[2] != 2 {
        return Err(TensorError::invalid(what, format!("expected N x K x 2, got {ps:?}")).into());
    }
    Ok(())
}

/// Mean over samples and keypoints of `h(dx) + h(dy)`.
pub fn keypoint_loss<'t, F: Float>(
    pred: &Var<'t, F>,
    gt: &Var<'t, F>,
    beta: f64,
) -> Result<Var<'t, F>> {
    check_pair("keypoint_loss", pred, gt)?;
    let s = pred.shape();
    let joints = (s[0] * s[1]).max(1);
    Ok(pred
        .sub(gt)?
        .smooth_l1(beta)
        .sum()
        .scale(1.0 / joints as f64))
}

fn bone_vectors<'t, F: Float>(p: &Var<'t, F>, topo: &SkeletonTopology) -> Result<Var<'t, F>> {
    let from: Vec<usize> = topo.edges.iter().map(|e| e.0).collect();
    let to: Vec<usize> = topo.edges.iter().map(|e| e.1).collect();
    Ok(p.index_select(1, &from)?
        .sub(&p.index_select(1, &to)?)?
        .norm_last()?)
}

/// Mean over samples and edges of `h(|predicted bone| - |true bone|)`.
pub fn bone_loss<'t, F: Float>(
    pred: &Var<'t, F>,
    gt: &Var<'t, F>,
    topo: &SkeletonTopology,
    beta: f64,
) -> Result<Var<'t, F>> {
    check_pair("bone_loss", pred, gt)?;
    let lp = bone_vectors(pred, topo)?;
    let lg = bone_vectors(gt, topo)?;
    Ok(lp.sub(&lg)?.smooth_l1(beta).mean())
}

/// Loss terms of one batch; `total = keypoint + lambda * bone`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t, F: Float> {
    pub total: Var<'t, F>,
    pub keypoint: Var<'t, F>,
    pub bone: Var<'t, F>,
}

pub fn total_loss<'t, F: Float>(
    pred: &Var<'t, F>,
    gt: &Var<'t, F>,
    topo: &SkeletonTopology,
    cfg: &LossConfig,
) -> Result<LossTerms<'t, F>> {
    let keypoint = keypoint_loss(pred, gt, cfg.beta_main)?;
    let bone = bone_loss(pred, gt, topo, cfg.beta_bone)?;
    let total = keypoint.add(&bone.scale(cfg.lambda_bone))?;
    Ok(LossTerms {
        total,
        keypoint,
        bone,
    })
}

fn check_len(what: &'static str, pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() % 2 != 0 {
        return Err(ObjectiveError::Shape {
            what,
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

fn joint_errors<'a>(pred: &'a [f64], gt: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    pred.chunks_exact(2)
        .zip(gt.chunks_exact(2))
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
}

/// Fraction of joints whose error divided by the sample's reference scale
/// is at most `alpha`. `pred`/`gt` are flattened `N x K x 2` with
/// `N = scales.len()`.
pub fn pck(pred: &[f64], gt: &[f64], scales: &[f64], alpha: f64) -> Result<f64> {
    check_len("pck", pred, gt)?;
    let n = scales.len();
    if n == 0 {
        return Ok(0.0);
    }
    if pred.len() % (2 * n) != 0 {
        return Err(ObjectiveError::Shape {
            what: "pck scales",
            pred: pred.len(),
            gt: n,
        });
    }
    let k = pred.len() / (2 * n);
    let hits = joint_errors(pred, gt)
        .enumerate()
        .filter(|&(j, e)| e / scales[j / k.max(1)] <= alpha)
        .count();
    Ok(hits as f64 / (n * k).max(1) as f64)
}

/// Mean Euclidean joint error over all joints.
pub fn mpjpe(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len("mpjpe", pred, gt)?;
    let joints = pred.len() / 2;
    if joints == 0 {
        return Ok(0.0);
    }
    Ok(joint_errors(pred, gt).sum::<f64>() / joints as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pck10: f64,
    pub pck20: f64,
    pub pck30: f64,
    pub pck40: f64,
    pub pck50: f64,
    pub mpjpe: f64,
    pub sample_count: usize,
}

impl MetricReport {
    pub fn pck_values(&self) -> [f64; 5] {
        [self.pck10, self.pck20, self.pck30, self.pck40, self.pck50]
    }
}

/// Exact streaming accumulation of PCK hits and joint errors, so shards
/// can be merged without averaging artefacts.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    hits: [u64; 5],
    error_sum: f64,
    joints: u64,
    samples: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `N = scales.len()` samples of flattened `N x K x 2` keypoints.
    pub fn add(&mut self, pred: &[f64], gt: &[f64], scales: &[f64]) -> Result<()> {
        check_len("metrics", pred, gt)?;
        let n = scales.len();
        if n == 0 {
            return Ok(());
        }
        if pred.len() % (2 * n) != 0 {
            return Err(ObjectiveError::Shape {
                what: "metric scales",
                pred: pred.len(),
                gt: n,
            });
        }
        let k = pred.len() / (2 * n);
        for (j, e) in joint_errors(pred, gt).enumerate() {
            let r = e / scales[j / k];
            for (h, &a) in self.hits.iter_mut().zip(&PCK_ALPHAS) {
                if r <= a {
                    *h += 1;
                }
            }
            self.error_sum += e;
        }
        self.joints += (n * k) as u64;
        self.samples += n;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (a, b) in self.hits.iter_mut().zip(other.hits) {
            *a += b;
        }
        self.error_sum += other.error_sum;
        self.joints += other.joints;
        self.samples += other.samples;
    }

    /// `unit_scale` converts label units for MPJPE (1 keeps label units).
    pub fn report(&self, unit_scale: f64) -> MetricReport {
        let j = self.joints.max(1) as f64;
        let p = self.hits.map(|h| h as f64 / j);
        MetricReport {
            pck10: p[0],
            pck20: p[1],
            pck30: p[2],
            pck40: p[3],
            pck50: p[4],
            mpjpe: unit_scale * self.error_sum / j,
            sample_count: self.samples,
        }
    }
}

/// Loss values of a batch as plain numbers.
pub fn loss_values<F: Float>(terms: &LossTerms<'_, F>) -> [f64; 3] {
    [
        terms.total.value().item().f64(),
        terms.keypoint.value().item().f64(),
        terms.bone.value().item().f64(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn vars<'t>(
        tape: &'t Tape<f64>,
        p: &[f64],
        g: &[f64],
        n: usize,
    ) -> (Var<'t, f64>, Var<'t, f64>) {
        let k = p.len() / (2 * n);
        (
            tape.constant(Tensor::from_f64(vec![n, k, 2], p).unwrap()),
            tape.constant(Tensor::from_f64(vec![n, k, 2], g).unwrap()),
        )
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1_h(0.0, 0.1), 0.0);
        assert!((smooth_l1_h(0.05, 0.1) - 0.0125).abs() < 1e-15);
        assert!((smooth_l1_h(1.0, 0.1) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn keypoint_loss_single_joint() {
        let tape = Tape::<f64>::new();
        let (p, g) = vars(&tape, &[0.05, 0.0], &[0.0, 0.0], 1);
        let l = keypoint_loss(&p, &g, 0.1).unwrap().value().item();
        assert!((l - 0.0125).abs() < 1e-12);
    }

    #[test]
    fn one_elongated_bone() {
        let topo = SkeletonTopology::standard();
        let mut gt = vec![0.0; 30];
        for k in 0..15 {
            gt[2 * k] = k as f64;
            gt[2 * k + 1] = (k * k) as f64 * 0.1;
        }
        // ankle is a leaf: moving it only stretches the knee-ankle bone
        let mut pred = gt.clone();
        let (knee, ankle) = (13, 14);
        let dx = gt[2 * ankle] - gt[2 * knee];
        let dy = gt[2 * ankle + 1] - gt[2 * knee + 1];
        let len = dx.hypot(dy);
        pred[2 * ankle] += 0.2 * dx / len;
        pred[2 * ankle + 1] += 0.2 * dy / len;
        let tape = Tape::<f64>::new();
        let (p, g) = vars(&tape, &pred, &gt, 1);
        let l = bone_loss(&p, &g, &topo, 0.05).unwrap().value().item();
        assert!((l - 0.0125).abs() < 1e-12, "{l}");
    }

    #[test]
    fn total_is_linear_combination() {
        let topo = SkeletonTopology::standard();
        let tape = Tape::<f64>::new();
        let pred: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let gt: Vec<f64> = (0..60).map(|i| (i as f64 * 0.11).cos()).collect();
        let (p, g) = vars(&tape, &pred, &gt, 2);
        let cfg = LossConfig::default();
        let t = total_loss(&p, &g, &topo, &cfg).unwrap();
        let [tot, h, b] = loss_values(&t);
        assert!((tot - (h + 0.2 * b)).abs() < 1e-15);
        let zero = LossConfig {
            lambda_bone: 0.0,
            ..cfg
        };
        let t0 = total_loss(&p, &g, &topo, &zero).unwrap();
        assert_eq!(t0.total.value().item(), t0.keypoint.value().item());
    }

    #[test]
    fn pck_boundary_cases() {
        let gt = [0.0, 0.0, 0.0, 0.0];
        let pred = [1.0, 0.0, 0.0, 9.0];
        assert_eq!(pck(&pred, &gt, &[10.0], 0.5).unwrap(), 0.5);
        assert_eq!(pck(&pred, &gt, &[10.0], 0.0).unwrap(), 0.0);
        assert_eq!(pck(&gt, &gt, &[10.0], 0.0).unwrap(), 1.0);
        // exactly on the threshold counts
        assert_eq!(pck(&[5.0, 0.0], &[0.0, 0.0], &[10.0], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn mpjpe_uniform_shift() {
        let gt: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let pred: Vec<f64> = gt
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i % 2 == 0 { 3.0 } else { 4.0 })
            .collect();
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn accumulator_matches_direct_functions() {
        let pred: Vec<f64> = (0..90).map(|i| (i as f64 * 0.7).sin()).collect();
        let gt: Vec<f64> = (0..90).map(|i| (i as f64 * 0.3).cos()).collect();
        let scales = [1.5, 2.0, 0.7];
        let mut acc = MetricAccumulator::new();
        acc.add(&pred[..60], &gt[..60], &scales[..2]).unwrap();
        let mut tail = MetricAccumulator::new();
        tail.add(&pred[60..], &gt[60..], &scales[2..]).unwrap();
        acc.merge(&tail);
        let r = acc.report(1.0);
        assert_eq!(r.sample_count, 3);
        for (v, a) in r.pck_values().iter().zip(PCK_ALPHAS) {
            assert!((v - pck(&pred, &gt, &scales, a).unwrap()).abs() < 1e-12);
        }
        assert!((r.mpjpe - mpjpe(&pred, &gt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            beta_bone: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
