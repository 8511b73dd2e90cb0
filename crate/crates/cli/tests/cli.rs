use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wiflow::csi::dataset::read_session;
use wiflow::csi::{encode_bfee, pack_csi, BfeeRecord, CsiFrame, LinkLayout};
use wiflow::synth::SynthConfig;
use wiflow::train::TrainConfig;

fn wiflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wiflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let none = wiflow(&[], tmp.path());
    assert_eq!(none.status.code(), Some(2));
    assert!(stderr(&none).contains("Usage"));
    for args in [
        &["frobnicate"][..],
        &["inspect", "--no-such-flag", "1"],
        &["train", "--data", "d"],
        &["gradcheck", "--bits", "16"],
        &["train", "--data", "d", "--out", "o", "--split", "kfold"],
    ] {
        let o = wiflow(args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(wiflow(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--data", "missing", "--out", "run"][..],
        &["inspect", "--epochs=-3"],
        &["inspect", "--model.keypoints", "14"],
        &["inspect", "--config", "nope.json"],
        &["synth", "--out", "d", "--wavelength", "0"],
    ] {
        let o = wiflow(args, tmp.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("error"), "{args:?}");
    }
}

#[test]
fn bundled_configs_match_profiles() {
    let root = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"));
    assert_eq!(
        TrainConfig::load(&root.join("desk.json")).unwrap(),
        TrainConfig::desk()
    );
    assert_eq!(
        TrainConfig::load(&root.join("default.json")).unwrap(),
        TrainConfig::default()
    );
    let synth: SynthConfig =
        serde_json::from_str(&fs::read_to_string(root.join("synth.json")).unwrap()).unwrap();
    assert_eq!(synth, SynthConfig::default());
}

#[test]
fn inspect_prints_layer_table_and_size() {
    let tmp = tempfile::tempdir().unwrap();
    let o = wiflow(&["inspect"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for line in [
        "TCN Layer 4      240 x 20",
        "ResBlock 4       64 x 20 x 15",
        "Output           15 x 2",
        "parameters 2169973",
    ] {
        assert!(text.contains(line), "{line}\n{text}");
    }
    // flags override the file
    let o = wiflow(&["inspect", "--model.tcn_groups", "2"], tmp.path());
    assert!(o.status.success());
    assert!(!stdout(&o).contains("parameters 2169973"));
}

#[test]
fn synth_flags_mirror_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "synth",
        "--subjects",
        "1",
        "--sessions",
        "2",
        "--ticks",
        "400",
        "--channels",
        "30",
        "--seed",
        "3",
        "--out",
        "d",
    ];
    let o = wiflow(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs: Vec<_> = fs::read_dir(tmp.path().join("d")).unwrap().collect();
    assert_eq!(dirs.len(), 2);
    let s = read_session(&dirs[0].as_ref().unwrap().path()).unwrap();
    assert_eq!((s.csi.channels, s.csi.ticks, s.labels.len()), (30, 400, 20));
    // a second run into the same root collides
    let again = wiflow(&args, tmp.path());
    assert_eq!(again.status.code(), Some(1));
}

/// Random frames for two 3x3 receivers, written as one capture per
/// receiver; the second capture is one record short.
fn write_captures(dir: &Path, ticks: usize) -> Vec<[CsiFrame; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut frames = Vec::new();
    let mut files = [Vec::new(), Vec::new()];
    for t in 0..ticks {
        let pair = [0, 1].map(|r| {
            let mut f = CsiFrame::zeros(3, 3, t as u32, r);
            for v in f.values.iter_mut() {
                *v = [rng.random(), rng.random()];
            }
            f
        });
        for (r, f) in pair.iter().enumerate() {
            if r == 1 && t == ticks - 1 {
                continue;
            }
            let sel = 0b10_01_00;
            files[r].extend(encode_bfee(&BfeeRecord {
                timestamp_low: t as u32,
                bfee_count: t as u16,
                n_rx: 3,
                n_tx: 3,
                rssi_a: 30,
                rssi_b: 30,
                rssi_c: 30,
                noise: -90,
                agc: 20,
                antenna_sel: sel,
                rate: 0x4113,
                payload: pack_csi(f, sel),
            }));
        }
        frames.push(pair);
    }
    for (r, bytes) in files.iter().enumerate() {
        fs::write(dir.join(format!("rx{r}.dat")), bytes).unwrap();
    }
    frames
}

#[test]
fn parse_fuses_receivers_into_a_session() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = write_captures(tmp.path(), 6);
    let o = wiflow(
        &[
            "parse",
            "--in",
            "rx0.dat",
            "--in",
            "rx1.dat",
            "--out",
            "sess",
            "--subject",
            "s09",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1 ticks dropped"), "{}", stdout(&o));
    let s = read_session(&tmp.path().join("sess")).unwrap();
    assert_eq!(s.meta.subject_id, "s09");
    assert_eq!(s.meta.session_id, "sess");
    assert_eq!((s.csi.channels, s.csi.ticks), (540, 5));
    // default layout: receiver, then tx, then rx, 30 subcarriers each
    let layout = LinkLayout::default();
    for (t, pair) in frames.iter().take(5).enumerate() {
        for (b, l) in layout.links.iter().enumerate() {
            for sc in 0..30 {
                let [re, im] = pair[l.receiver].get(sc, l.rx, l.tx);
                let want = ((re as f64).powi(2) + (im as f64).powi(2)).sqrt();
                let got = s.csi.data[(30 * b + sc) * s.csi.ticks + t] as f64;
                assert!((got - want).abs() < 1e-4 * want.max(1.0));
            }
        }
    }
}

#[test]
fn eval_reports_requested_set() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = wiflow(
        &[
            "synth",
            "--subjects",
            "1",
            "--sessions",
            "3",
            "--ticks",
            "200",
            "--channels",
            "60",
            "--out",
            "d",
        ],
        tmp.path(),
    );
    assert!(synth.status.success());
    let tiny = [
        "--model.input_channels",
        "60",
        "--model.tcn_channel_schedule",
        "[60]",
        "--model.tcn_dilations",
        "[1]",
        "--model.tcn_groups",
        "3",
        "--model.tcn_residual",
        "true",
        "--model.spatial_channel_schedule",
        "[2,4]",
        "--model.attention_groups",
        "2",
        "--model.decoder_mid_channels",
        "4",
        "--batch_size",
        "4",
        "--epochs",
        "1",
    ];
    let mut args = vec!["train", "--data", "d", "--out", "run"];
    args.extend(tiny);
    let o = wiflow(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    // the run directory must be fresh
    let o2 = wiflow(&args, tmp.path());
    assert_eq!(o2.status.code(), Some(1));
    let o = wiflow(
        &[
            "eval",
            "--ckpt",
            "run/best.ckpt",
            "--data",
            "d",
            "--split-file",
            "run/split.json",
            "--config",
            "run/config.json",
            "--set",
            "val",
            "--out",
            "val.json",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("val.json")).unwrap()).unwrap();
    assert_eq!(v["set"], "val");
    assert_eq!(v["windows"], 10);
    assert!(v["mpjpe"].as_f64().unwrap() > 0.0);
}
