//! Command tree. Config-backed subcommands grow one `--key` flag per
//! flat config key, so every file setting can be overridden in place.

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{Map, Value};
use wiflow::synth::SynthConfig;
use wiflow::train::TrainConfig;

pub fn train_keys() -> Vec<String> {
    TrainConfig::default().to_flat().keys().cloned().collect()
}

pub fn synth_keys() -> Vec<String> {
    match serde_json::to_value(SynthConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("synth config serializes to an object"),
    }
}

fn key_args(cmd: Command, keys: &[String]) -> Command {
    keys.iter().fold(cmd, |cmd, k| {
        cmd.arg(
            Arg::new(k.clone())
                .long(k.clone())
                .value_name("VALUE")
                .help_heading("Config overrides")
                .help(format!("Overrides config key `{k}`")),
        )
    })
}

/// JSON when the text parses as JSON, a string otherwise.
pub fn flag_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Values of the config-key flags that were given.
pub fn overrides(m: &ArgMatches, keys: &[String]) -> Map<String, Value> {
    keys.iter()
        .filter_map(|k| {
            let v = m.try_get_one::<String>(k).ok().flatten()?;
            Some((k.clone(), flag_value(v)))
        })
        .collect()
}

fn path(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").help(help)
}

pub fn command() -> Command {
    let train_keys = train_keys();
    let synth_keys = synth_keys();
    Command::new("wiflow")
        .about("WiFi CSI human pose estimation: ingest, synthesize, train, evaluate")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("More log output (repeat for debug)"),
        )
        .arg(
            Arg::new("quiet")
                .short('q')
                .long("quiet")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("Errors only"),
        )
        .subcommand(
            Command::new("parse")
                .about("Fuse per-receiver capture files into a session directory")
                .arg(
                    path("in", "Capture file, one per receiver in receiver order")
                        .required(true)
                        .action(ArgAction::Append),
                )
                .arg(path(
                    "layout",
                    "Link layout JSON (default: 2 receivers, 3x3)",
                ))
                .arg(path("out", "Session directory to create").required(true))
                .arg(path("labels", "Keypoint labels CSV to store with the CSI"))
                .arg(Arg::new("subject").long("subject").default_value("s01"))
                .arg(
                    Arg::new("session")
                        .long("session")
                        .help("Default: output directory name"),
                )
                .arg(Arg::new("action").long("action").default_value("unknown"))
                .arg(
                    Arg::new("csi-rate")
                        .long("csi-rate")
                        .value_parser(clap::value_parser!(u32))
                        .default_value("600"),
                )
                .arg(
                    Arg::new("label-fps")
                        .long("label-fps")
                        .value_parser(clap::value_parser!(u32))
                        .default_value("30"),
                ),
        )
        .subcommand(key_args(
            Command::new("synth")
                .about("Write a synthetic dataset in the portable layout")
                .arg(path("config", "Synth config JSON"))
                .arg(path("out", "Dataset root").required(true)),
            &synth_keys,
        ))
        .subcommand(
            Command::new("clean-labels")
                .about("Interpolate missing keypoints of every session in place")
                .arg(path("data", "Dataset root or session directory").required(true))
                .arg(path("topology", "Skeleton topology JSON")),
        )
        .subcommand(key_args(
            Command::new("train")
                .about("Train on a dataset and write a run directory")
                .arg(path("data", "Dataset root").required(true))
                .arg(path("config", "Training config JSON (flat dotted keys)"))
                .arg(path("out", "Run directory to create").required(true))
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["random", "loso"])
                        .help("Shorthand for split.mode"),
                )
                .arg(
                    Arg::new("test-subject")
                        .long("test-subject")
                        .help("Shorthand for split.test_subject"),
                )
                .arg(path("topology", "Skeleton topology JSON")),
            &train_keys,
        ))
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint on one set of a split manifest")
                .arg(path("ckpt", "Checkpoint file").required(true))
                .arg(path("data", "Dataset root").required(true))
                .arg(path("split-file", "Split manifest JSON").required(true))
                .arg(
                    Arg::new("set")
                        .long("set")
                        .value_parser(["train", "val", "test"])
                        .default_value("test"),
                )
                .arg(path(
                    "config",
                    "Training config for stride, batch size and loss (default: built-in)",
                ))
                .arg(path("topology", "Skeleton topology JSON"))
                .arg(path("out", "Also write the metrics JSON here")),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every op, the loss and every layer")
                .arg(
                    Arg::new("bits")
                        .long("bits")
                        .value_parser(["32", "64"])
                        .default_value("64"),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_parser(clap::value_parser!(u64).range(1..))
                        .default_value("20"),
                )
                .arg(
                    Arg::new("skip-full")
                        .long("skip-full")
                        .action(ArgAction::SetTrue)
                        .help("Skip the sampled check of the default-size network"),
                ),
        )
        .subcommand(key_args(
            Command::new("inspect")
                .about("Print the layer shape trace, parameter count and MACs")
                .arg(path(
                    "config",
                    "Training config JSON (model.* keys are used)",
                )),
            &train_keys,
        ))
}
