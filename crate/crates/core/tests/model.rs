//! Whole-network checks: shape schedule, size, causality, determinism,
//! persistence and gradients through every layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wiflow::checks::{network_case, tiny_network};
use wiflow::model::{
    count_flops, forward, load_checkpoint, save_checkpoint, tcn_stage, Model, ParameterStore,
    TraceRow, WiFlowConfig,
};
use wiflow::objectives::{total_loss, LossConfig};
use wiflow::pose::SkeletonTopology;
use wiflow::tensor::{grad_check_sampled, NormMode, Tape, Tensor};

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
    let n = shape.iter().product();
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

#[test]
fn trace_matches_layer_table() {
    // output-size column of the published layer table, batch omitted
    let table: Vec<(&str, Vec<usize>)> = vec![
        ("Input", vec![540, 20]),
        ("TCN Layer 1", vec![540, 20]),
        ("TCN Layer 2", vec![440, 20]),
        ("TCN Layer 3", vec![340, 20]),
        ("TCN Layer 4", vec![240, 20]),
        ("ConvBlock1 (up)", vec![8, 20, 240]),
        ("ResBlock 1", vec![8, 20, 120]),
        ("ResBlock 2", vec![16, 20, 60]),
        ("ResBlock 3", vec![32, 20, 30]),
        ("ResBlock 4", vec![64, 20, 15]),
        ("AxialAttention", vec![64, 15, 20]),
        ("Decoder", vec![2, 15, 20]),
        ("Avg Pooling", vec![2, 15, 1]),
        ("Output", vec![15, 2]),
    ];
    let cfg = WiFlowConfig::default();
    let mut store = ParameterStore::<f32>::init(&cfg, 0).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.constant(
        Tensor::from_f64(vec![2, 540, 20], &random_input(&mut rng, &[2, 540, 20])).unwrap(),
    );
    let mut trace = Vec::new();
    let y = forward(
        &cfg,
        &bound,
        &mut store.norms,
        x,
        NormMode::Eval,
        Some(&mut trace),
    )
    .unwrap();
    assert_eq!(y.shape(), vec![2, 15, 2]);
    let got: Vec<(&str, Vec<usize>)> = trace
        .iter()
        .map(|r: &TraceRow| (r.block.as_str(), r.shape.clone()))
        .collect();
    assert_eq!(got, table);
}

#[test]
fn size_is_near_published_figures() {
    let m = Model::init(WiFlowConfig::default(), 0).unwrap();
    let n = m.param_count();
    assert!((1_800_000..=2_700_000).contains(&n), "{n} parameters");
    let macs = count_flops(&m.config).total as f64;
    let published = 0.07e9;
    assert!(
        macs >= published / 2.0 && macs <= published * 2.0,
        "{macs} MACs"
    );
}

#[test]
fn tcn_outputs_ignore_future_columns() {
    let cfg = WiFlowConfig::default();
    let store = ParameterStore::<f32>::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (c, t) = (cfg.input_channels, cfg.window_t);
    let run = |x: &[f64]| -> Vec<f32> {
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let xv = tape.constant(Tensor::from_f64(vec![1, c, t], x).unwrap());
        let y = tcn_stage(&cfg, &bound, xv).unwrap();
        y.value().data().to_vec()
    };
    for _ in 0..100 {
        let x = random_input(&mut rng, &[c, t]);
        let tp = rng.random_range(1..t);
        let mut moved = x.clone();
        for ch in 0..c {
            moved[ch * t + tp] += rng.random_range(0.5..3.0);
        }
        let (a, b) = (run(&x), run(&moved));
        let out_c = a.len() / t;
        for ch in 0..out_c {
            for s in 0..tp {
                assert_eq!(
                    a[ch * t + s].to_bits(),
                    b[ch * t + s].to_bits(),
                    "channel {ch} column {s} moved after perturbing column {tp}"
                );
            }
        }
        // the perturbed column itself must be visible
        assert!((0..out_c).any(|ch| a[ch * t + tp] != b[ch * t + tp]));
    }
}

#[test]
fn eval_is_deterministic_and_survives_save_load() {
    let mut m = Model::init(WiFlowConfig::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x =
        Tensor::<f32>::from_f64(vec![3, 540, 20], &random_input(&mut rng, &[3, 540, 20])).unwrap();
    let a = m.predict(x.clone()).unwrap();
    let b = m.predict(x.clone()).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let mut back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let c = back.predict(x).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

fn target(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Vec<f64> {
    (0..b * k * 2)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

#[test]
fn every_parameter_receives_a_gradient() {
    let cfg = WiFlowConfig::default();
    let mut store = ParameterStore::<f32>::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let x = tape.constant(
        Tensor::from_f64(vec![4, 540, 20], &random_input(&mut rng, &[4, 540, 20])).unwrap(),
    );
    let gt = tape.constant(Tensor::from_f64(vec![4, 15, 2], &target(&mut rng, 4, 15)).unwrap());
    let pred = forward(&cfg, &bound, &mut store.norms, x, NormMode::Train, None).unwrap();
    let terms = total_loss(
        &pred,
        &gt,
        &SkeletonTopology::standard(),
        &LossConfig::default(),
    )
    .unwrap();
    let grads = tape.backward(terms.total).unwrap();
    // a bias feeding batch norm is cancelled by the mean subtraction, so
    // its gradient is present but only rounding noise
    let before_bn = |name: &str| {
        let conv = name.trim_end_matches(".bias");
        conv.starts_with("stem.")
            || conv.ends_with(".conv1") && !conv.starts_with("tcn.")
            || conv.ends_with(".conv2") && conv.starts_with("res.")
    };
    for (name, v) in &bound.vars {
        let g = grads
            .get(*v)
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.all_finite(), "{name}");
        if !(name.ends_with(".bias") && before_bn(name)) {
            assert!(
                g.data().iter().any(|&e| e != 0.0),
                "{name} gradient is all zero"
            );
        }
    }
}

#[test]
fn tiny_network_gradients_match_finite_differences() {
    let cfg = tiny_network();
    cfg.validate().unwrap();
    for seed in 0..20 {
        let (net, inputs) = network_case(&cfg, seed, 2);
        let r = grad_check_sampled::<f64>(&net, &inputs, 1e-6, 12, seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn default_network_gradients_match_finite_differences_sampled() {
    let cfg = WiFlowConfig::default();
    let (net, inputs) = network_case(&cfg, 4, 2);
    let r = grad_check_sampled::<f64>(&net, &inputs, 1e-6, 1, 4).unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    assert_eq!(r.checked, inputs.len());
}
