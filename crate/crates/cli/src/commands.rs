use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use serde_json::{json, Value};
use wiflow::checks::{run_suite, SuiteOptions, SuiteRow};
use wiflow::csi::dataset::{
    list_sessions, read_dataset, read_meta, write_session, Session, SessionMeta, LABELS_FILE,
};
use wiflow::csi::{ingest_streams, parse_dat_stream, LinkLayout};
use wiflow::model::{count_flops, format_trace, forward, load_checkpoint, Model};
use wiflow::pose::{
    detect_missing, interpolate_missing, load_labels, save_labels, LabelSequence, SkeletonTopology,
};
use wiflow::synth::{make_dataset, SynthConfig};
use wiflow::tensor::{NormMode, Tape, Tensor};
use wiflow::train::{
    evaluate, select, session_keys, split_sessions, train, SplitManifest, TrainConfig, WindowSet,
    SUMMARY_FILE,
};

use crate::args::{overrides, synth_keys, train_keys};

/// Largest relative error `gradcheck` accepts at each precision.
const GRADCHECK_TOL_64: f64 = 1e-4;
const GRADCHECK_TOL_32: f64 = 1e-3;

pub fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("parse", s)) => parse(s),
        Some(("synth", s)) => synth(s),
        Some(("clean-labels", s)) => clean_labels(s),
        Some(("train", s)) => train_cmd(s),
        Some(("eval", s)) => eval(s),
        Some(("gradcheck", s)) => gradcheck(s),
        Some(("inspect", s)) => inspect(s),
        _ => unreachable!("clap requires a known subcommand"),
    }
}

fn path_arg(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<String>(name).map(PathBuf::from)
}

fn required(m: &ArgMatches, name: &str) -> PathBuf {
    path_arg(m, name).expect("clap enforces required arguments")
}

fn topology(m: &ArgMatches) -> Result<SkeletonTopology> {
    match path_arg(m, "topology") {
        Some(p) => SkeletonTopology::load(&p).with_context(|| format!("topology {}", p.display())),
        None => Ok(SkeletonTopology::standard()),
    }
}

fn train_config(m: &ArgMatches) -> Result<TrainConfig> {
    let base = match path_arg(m, "config") {
        Some(p) => TrainConfig::load(&p).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let mut flat = overrides(m, &train_keys());
    if let Some(mode) = m.try_get_one::<String>("split").ok().flatten() {
        let mode = if mode == "random" {
            "random_session"
        } else {
            "loso"
        };
        flat.insert("split.mode".into(), json!(mode));
    }
    if let Some(s) = m.try_get_one::<String>("test-subject").ok().flatten() {
        flat.insert("split.test_subject".into(), json!(s));
    }
    Ok(base.merged(&flat)?)
}

fn parse(m: &ArgMatches) -> Result<()> {
    let layout = match path_arg(m, "layout") {
        Some(p) => LinkLayout::load(&p).with_context(|| format!("layout {}", p.display()))?,
        None => LinkLayout::default(),
    };
    let out = required(m, "out");
    let mut streams = Vec::new();
    for (r, p) in m.get_many::<String>("in").into_iter().flatten().enumerate() {
        let bytes = fs::read(p).with_context(|| format!("reading {p}"))?;
        let report = parse_dat_stream(&bytes);
        tracing::info!(
            receiver = r,
            records = report.records.len(),
            skipped = report.skipped,
            invalid = report.invalid,
            truncated = report.truncated,
            "parsed {p}"
        );
        if let Some(e) = &report.error {
            tracing::warn!(receiver = r, "{e}");
        }
        streams.push(report.records);
    }
    let ingested = ingest_streams(&streams, &layout)?;
    let subject = m.get_one::<String>("subject").expect("has default").clone();
    let session = match m.get_one::<String>("session") {
        Some(s) => s.clone(),
        None => out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .context("cannot derive a session id from --out")?,
    };
    let labels = match path_arg(m, "labels") {
        Some(p) => load_labels(&p, &subject, &session)?,
        None => LabelSequence::new(&subject, &session, vec![]),
    };
    let s = Session {
        meta: SessionMeta {
            subject_id: subject,
            session_id: session,
            action: m.get_one::<String>("action").expect("has default").clone(),
            csi_rate_hz: *m.get_one::<u32>("csi-rate").expect("has default"),
            label_fps: *m.get_one::<u32>("label-fps").expect("has default"),
            channels: layout.channels(),
        },
        csi: ingested.series,
        labels,
    };
    write_session(&out, &s)?;
    println!(
        "{}: {} ticks x {} channels, {} ticks dropped, {} label frames",
        out.display(),
        s.csi.ticks,
        s.csi.channels,
        ingested.dropped,
        s.labels.len()
    );
    Ok(())
}

fn synth(m: &ArgMatches) -> Result<()> {
    let mut base = match path_arg(m, "config") {
        Some(p) => serde_json::from_str::<Value>(&fs::read_to_string(&p)?)
            .with_context(|| format!("config {}", p.display()))?,
        None => serde_json::to_value(SynthConfig::default())?,
    };
    let Value::Object(obj) = &mut base else {
        bail!("synth config must be a JSON object");
    };
    obj.extend(overrides(m, &synth_keys()));
    let cfg: SynthConfig = serde_json::from_value(base).context("synth config")?;
    let out = required(m, "out");
    let dirs = make_dataset(&out, &cfg)?;
    println!("wrote {} sessions under {}", dirs.len(), out.display());
    Ok(())
}

fn clean_labels(m: &ArgMatches) -> Result<()> {
    let topo = topology(m)?;
    for dir in list_sessions(&required(m, "data"))? {
        let meta = read_meta(&dir)?;
        let file = dir.join(LABELS_FILE);
        let seq = load_labels(&file, &meta.subject_id, &meta.session_id)?;
        let missing: usize = detect_missing(&seq)
            .iter()
            .map(|f| f.iter().filter(|&&x| x).count())
            .sum();
        if missing > 0 {
            save_labels(&file, &interpolate_missing(&seq, &topo)?)?;
        }
        println!(
            "{}: {} keypoint entries filled over {} frames",
            meta.session_id,
            missing,
            seq.len()
        );
    }
    Ok(())
}

fn ensure_fresh(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("{} exists and is not empty", dir.display());
    }
    Ok(())
}

fn train_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = train_config(m)?;
    let topo = topology(m)?;
    let out = required(m, "out");
    ensure_fresh(&out)?;
    let sessions = read_dataset(&required(m, "data"))?;
    let split = split_sessions(&session_keys(&sessions), &cfg.split, cfg.seed)?;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let outcome = train(model, &sessions, &split, &cfg, &topo, Some(&out))?;
    println!("{}", fs::read_to_string(out.join(SUMMARY_FILE))?.trim_end());
    tracing::info!(
        steps = outcome.steps,
        best_epoch = outcome.best_epoch,
        "run written to {}",
        out.display()
    );
    Ok(())
}

fn eval(m: &ArgMatches) -> Result<()> {
    let cfg = match path_arg(m, "config") {
        Some(_) => train_config(m)?,
        None => TrainConfig::default(),
    };
    let topo = topology(m)?;
    let mut model = load_checkpoint(&required(m, "ckpt"))?;
    let sessions = read_dataset(&required(m, "data"))?;
    let split = SplitManifest::load(&required(m, "split-file"))?;
    let set = m.get_one::<String>("set").expect("has default").as_str();
    let keys = match set {
        "train" => &split.train,
        "val" => &split.val,
        _ => &split.test,
    };
    let windows = WindowSet::build(
        select(&sessions, keys)?,
        model.config.window_t,
        cfg.stride,
        model.config.input_channels,
    )?;
    let r = evaluate(&mut model, &windows, cfg.eval_batch_size, &cfg.loss, &topo)?;
    let report = json!({
        "set": set,
        "windows": windows.len(),
        "loss_total": r.losses[0],
        "loss_h": r.losses[1],
        "loss_b": r.losses[2],
        "pck10": r.report.pck10,
        "pck20": r.report.pck20,
        "pck30": r.report.pck30,
        "pck40": r.report.pck40,
        "pck50": r.report.pck50,
        "mpjpe": r.report.mpjpe,
    });
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = path_arg(m, "out") {
        fs::write(&p, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn print_rows(rows: &[SuiteRow]) -> f64 {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    println!(
        "{:<width$}  {:>5}  {:>8}  max_rel_error",
        "check", "seeds", "entries"
    );
    for r in rows {
        println!(
            "{:<width$}  {:>5}  {:>8}  {:.3e}",
            r.name, r.seeds, r.checked, r.max_rel_error
        );
    }
    rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

fn gradcheck(m: &ArgMatches) -> Result<()> {
    let opts = SuiteOptions {
        seeds: *m.get_one::<u64>("seeds").expect("has default"),
        full_network: !m.get_flag("skip-full"),
        ..Default::default()
    };
    let (rows, tol) = match m.get_one::<String>("bits").expect("has default").as_str() {
        "32" => (run_suite::<f32>(&opts)?, GRADCHECK_TOL_32),
        _ => (run_suite::<f64>(&opts)?, GRADCHECK_TOL_64),
    };
    let worst = print_rows(&rows);
    println!("max relative error {worst:.3e} (tolerance {tol:e})");
    if !(worst < tol) {
        bail!("gradient check failed: {worst:e} >= {tol:e}");
    }
    Ok(())
}

fn inspect(m: &ArgMatches) -> Result<()> {
    let cfg = train_config(m)?.model;
    let mut model = Model::init(cfg.clone(), 0)?;
    let tape = Tape::new();
    let bound = model.store.bind(&tape, false);
    let x = tape.constant(Tensor::<f32>::zeros(vec![
        1,
        cfg.input_channels,
        cfg.window_t,
    ]));
    let mut trace = Vec::new();
    forward(
        &cfg,
        &bound,
        &mut model.store.norms,
        x,
        NormMode::Eval,
        Some(&mut trace),
    )?;
    print!("{}", format_trace(&trace));
    let flops = count_flops(&cfg);
    println!(
        "parameters {} ({:.2} M)",
        model.param_count(),
        model.param_count() as f64 / 1e6
    );
    println!(
        "MACs per window {} ({:.3} G): tcn {}, spatial {}, attention {}, decoder {}",
        flops.total,
        flops.total as f64 / 1e9,
        flops.tcn,
        flops.spatial,
        flops.attention,
        flops.decoder
    );
    Ok(())
}
