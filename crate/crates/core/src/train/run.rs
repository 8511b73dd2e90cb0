use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::{select, WindowSet};
use super::optim::{AdamW, PlateauScheduler};
use super::split::SplitManifest;
use super::{Result, TrainError};
use crate::csi::dataset::Session;
use crate::model::{forward, save_checkpoint, Model};
use crate::objectives::{loss_values, total_loss, LossConfig, MetricAccumulator, MetricReport};
use crate::pose::SkeletonTopology;
use crate::tensor::{NormMode, Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
const NONFINITE_DUMP: &str = "nonfinite_batch.json";
const SHUFFLE_SALT: u64 = 0x5348_5546;

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_h: f64,
    pub loss_b: f64,
    pub pck10: f64,
    pub pck20: f64,
    pub pck30: f64,
    pub pck40: f64,
    pub pck50: f64,
    pub mpjpe: f64,
    pub lr: f64,
}

impl MetricsRow {
    fn new(epoch: usize, split: &str, losses: [f64; 3], r: &MetricReport, lr: f64) -> Self {
        MetricsRow {
            epoch,
            split: split.to_string(),
            loss_total: losses[0],
            loss_h: losses[1],
            loss_b: losses[2],
            pck10: r.pck10,
            pck20: r.pck20,
            pck30: r.pck30,
            pck40: r.pck40,
            pck50: r.pck50,
            mpjpe: r.mpjpe,
            lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub report: MetricReport,
    /// Window-weighted means of total, keypoint and bone loss.
    pub losses: [f64; 3],
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Eval-mode metrics and losses over every window of `set`.
pub fn evaluate(
    model: &mut Model,
    set: &WindowSet<'_>,
    batch_size: usize,
    loss: &LossConfig,
    topo: &SkeletonTopology,
) -> Result<EvalResult> {
    if set.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let ids: Vec<usize> = (0..set.len()).collect();
    let mut acc = MetricAccumulator::new();
    let mut sums = [0f64; 3];
    for chunk in ids.chunks(batch_size.max(1)) {
        let b = set.batch(chunk, topo);
        let tape = Tape::new();
        let bound = model.store.bind(&tape, false);
        let x = tape.constant(b.input);
        let gt = tape.constant(Tensor::from_f64(
            vec![chunk.len(), model.config.keypoints, 2],
            &b.target,
        )?);
        let pred = forward(
            &model.config,
            &bound,
            &mut model.store.norms,
            x,
            NormMode::Eval,
            None,
        )?;
        let terms = total_loss(&pred, &gt, topo, loss)?;
        for (s, v) in sums.iter_mut().zip(loss_values(&terms)) {
            *s += v * chunk.len() as f64;
        }
        acc.add(&to_f64(&pred.value()), &b.target, &b.scales)?;
    }
    let n = set.len() as f64;
    Ok(EvalResult {
        report: acc.report(1.0),
        losses: sums.map(|s| s / n),
    })
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation MPJPE.
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub best_val_mpjpe: f64,
    pub history: Vec<MetricsRow>,
    pub steps: usize,
    pub skipped_steps: u64,
    pub test: Option<EvalResult>,
}

#[derive(Serialize)]
struct Summary<'a> {
    best_epoch: usize,
    best_val_mpjpe: f64,
    steps: usize,
    skipped_steps: u64,
    train_windows: usize,
    val_windows: usize,
    test_windows: usize,
    test: Option<&'a MetricReport>,
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg.epochs` epochs of AdamW on the train split starting from
/// `model`, validating after each epoch. With `run_dir` the config echo,
/// split manifest, metrics, checkpoints and a summary are written there.
/// Zero epochs evaluates the validation (and test) split only.
pub fn train(
    mut model: Model,
    sessions: &[Session],
    split: &SplitManifest,
    cfg: &TrainConfig,
    topo: &SkeletonTopology,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config != cfg.model {
        return Err(TrainError::Config {
            key: "model".into(),
            msg: "starting model was built from a different model config".into(),
        });
    }
    let (t, channels) = (cfg.model.window_t, cfg.model.input_channels);
    let train_set = WindowSet::build(select(sessions, &split.train)?, t, cfg.stride, channels)?;
    let val_set = WindowSet::build(select(sessions, &split.val)?, t, cfg.stride, channels)?;
    let test_set = WindowSet::build(select(sessions, &split.test)?, t, cfg.stride, channels)?;
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_ECHO), cfg.to_flat_json() + "\n")?;
        fs::write(
            dir.join(SPLIT_FILE),
            serde_json::to_string_pretty(split)? + "\n",
        )?;
    }
    tracing::info!(
        train = train_set.len(),
        val = val_set.len(),
        test = test_set.len(),
        params = model.param_count(),
        "windows per split"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.scheduler);
    let mut history = Vec::new();
    let mut steps = 0usize;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_mpjpe = f64::INFINITY;

    if cfg.epochs == 0 {
        let v = evaluate(&mut model, &val_set, cfg.eval_batch_size, &cfg.loss, topo)?;
        history.push(MetricsRow::new(0, "val", v.losses, &v.report, sched.lr));
        best_mpjpe = v.report.mpjpe;
        best = model.clone();
    }

    for epoch in 1..=cfg.epochs {
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let lr = sched.lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = MetricAccumulator::new();
        let mut sums = [0f64; 3];
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            // batch statistics of a single window are degenerate
            if chunk.len() < 2 && cfg.batch_size > 1 {
                continue;
            }
            let b = train_set.batch(chunk, topo);
            let tape = Tape::new();
            let bound = model.store.bind(&tape, true);
            let x = tape.constant(b.input);
            let gt = tape.constant(Tensor::from_f64(
                vec![chunk.len(), cfg.model.keypoints, 2],
                &b.target,
            )?);
            let pred = forward(
                &cfg.model,
                &bound,
                &mut model.store.norms,
                x,
                NormMode::Train,
                None,
            )?;
            let terms = total_loss(&pred, &gt, topo, &cfg.loss)?;
            let values = loss_values(&terms);
            if values.iter().any(|v| !v.is_finite()) {
                let windows: Vec<String> = chunk.iter().map(|&i| train_set.describe(i)).collect();
                if let Some(dir) = run_dir {
                    let dump = serde_json::json!({
                        "epoch": epoch,
                        "batch": bi,
                        "loss": values.to_vec(),
                        "windows": windows,
                    });
                    fs::write(
                        dir.join(NONFINITE_DUMP),
                        serde_json::to_string_pretty(&dump)?,
                    )?;
                }
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("losses {values:?}, windows {}", windows.join(" ")),
                });
            }
            let pred_values = to_f64(&pred.value());
            let mut grads = tape.backward(terms.total)?;
            let named: BTreeMap<String, Tensor<f32>> = bound
                .vars
                .iter()
                .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
                .collect();
            opt.update(&mut model.store.params, &named, lr, cfg.weight_decay);
            steps += 1;
            acc.add(&pred_values, &b.target, &b.scales)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * chunk.len() as f64;
            }
            seen += chunk.len();
        }
        let train_losses = sums.map(|s| s / seen.max(1) as f64);
        history.push(MetricsRow::new(
            epoch,
            "train",
            train_losses,
            &acc.report(1.0),
            lr,
        ));

        let v = evaluate(&mut model, &val_set, cfg.eval_batch_size, &cfg.loss, topo)?;
        history.push(MetricsRow::new(epoch, "val", v.losses, &v.report, lr));
        tracing::info!(
            epoch,
            steps,
            train_loss = train_losses[0],
            val_mpjpe = v.report.mpjpe,
            val_pck20 = v.report.pck20,
            lr,
            "epoch done"
        );
        sched.observe(v.report.mpjpe);
        if v.report.mpjpe < best_mpjpe {
            best_mpjpe = v.report.mpjpe;
            best_epoch = epoch;
            best = model.clone();
            if let Some(dir) = run_dir {
                save_checkpoint(&best, &dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(dir) = run_dir {
            save_checkpoint(&model, &dir.join(LAST_CHECKPOINT))?;
            write_metrics(&dir.join(METRICS_FILE), &history)?;
        }
    }

    let test = if test_set.is_empty() {
        None
    } else {
        let r = evaluate(
            &mut best.clone(),
            &test_set,
            cfg.eval_batch_size,
            &cfg.loss,
            topo,
        )?;
        history.push(MetricsRow::new(
            best_epoch, "test", r.losses, &r.report, sched.lr,
        ));
        Some(r)
    };
    if let Some(dir) = run_dir {
        write_metrics(&dir.join(METRICS_FILE), &history)?;
        if cfg.epochs == 0 {
            save_checkpoint(&best, &dir.join(BEST_CHECKPOINT))?;
        }
        let summary = Summary {
            best_epoch,
            best_val_mpjpe: best_mpjpe,
            steps,
            skipped_steps: opt.skipped,
            train_windows: train_set.len(),
            val_windows: val_set.len(),
            test_windows: test_set.len(),
            test: test.as_ref().map(|r| &r.report),
        };
        fs::write(
            dir.join(SUMMARY_FILE),
            serde_json::to_string_pretty(&summary)? + "\n",
        )?;
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        best_val_mpjpe: best_mpjpe,
        history,
        steps,
        skipped_steps: opt.skipped,
        test,
    })
}
