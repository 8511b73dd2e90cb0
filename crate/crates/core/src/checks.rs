//! Central finite-difference suite over every differentiable op, the
//! training loss and the network's layers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{forward, Bound, ModelError, ParameterStore, WiFlowConfig};
use crate::objectives::{total_loss, LossConfig, ObjectiveError};
use crate::pose::SkeletonTopology;
use crate::tensor::{
    grad_check_sampled, BatchNormState, Conv2dSpec, Float, NormMode, Result, ScalarFn, Tape,
    Tensor, TensorError, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Silu,
    SmoothL1,
    Softmax,
    Mean,
    MeanLast,
    NormLast,
    Reshape,
    Permute,
    IndexSelect,
    Concat,
    MatmulBatched,
    MatmulShared,
    Conv2d,
    Conv1dCausal,
    BatchNormTrain,
    BatchNormEval,
}

pub const ALL_OPS: [Op; 21] = [
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::Scale,
    Op::Sigmoid,
    Op::Silu,
    Op::SmoothL1,
    Op::Softmax,
    Op::Mean,
    Op::MeanLast,
    Op::NormLast,
    Op::Reshape,
    Op::Permute,
    Op::IndexSelect,
    Op::Concat,
    Op::MatmulBatched,
    Op::MatmulShared,
    Op::Conv2d,
    Op::Conv1dCausal,
    Op::BatchNormTrain,
    Op::BatchNormEval,
];

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale => "scale",
            Op::Sigmoid => "sigmoid",
            Op::Silu => "silu",
            Op::SmoothL1 => "smooth_l1",
            Op::Softmax => "softmax",
            Op::Mean => "mean",
            Op::MeanLast => "mean_last",
            Op::NormLast => "norm_last",
            Op::Reshape => "reshape",
            Op::Permute => "permute",
            Op::IndexSelect => "index_select",
            Op::Concat => "concat",
            Op::MatmulBatched => "matmul_batched",
            Op::MatmulShared => "matmul_shared",
            Op::Conv2d => "conv2d",
            Op::Conv1dCausal => "conv1d_causal",
            Op::BatchNormTrain => "batch_norm_train",
            Op::BatchNormEval => "batch_norm_eval",
        }
    }

    fn shapes(self) -> Vec<Vec<usize>> {
        match self {
            Op::Add | Op::Sub | Op::Mul => vec![vec![3, 4], vec![3, 4]],
            Op::Scale | Op::Sigmoid | Op::Silu | Op::SmoothL1 | Op::Mean => vec![vec![2, 5]],
            Op::Softmax => vec![vec![2, 4, 3]],
            Op::MeanLast | Op::NormLast => vec![vec![3, 2, 4]],
            Op::Reshape | Op::Permute => vec![vec![2, 3, 4]],
            Op::IndexSelect => vec![vec![2, 4, 3]],
            Op::Concat => vec![vec![2, 1, 3], vec![2, 2, 3]],
            Op::MatmulBatched => vec![vec![2, 3, 4], vec![2, 4, 5]],
            Op::MatmulShared => vec![vec![2, 3, 4], vec![4, 5]],
            Op::Conv2d => vec![vec![2, 4, 3, 6], vec![4, 2, 2, 3], vec![4]],
            Op::Conv1dCausal => vec![vec![2, 4, 7], vec![6, 2, 3], vec![6]],
            Op::BatchNormTrain | Op::BatchNormEval => vec![vec![4, 3, 5], vec![3], vec![3]],
        }
    }
}

/// One op followed by a dot product with a fixed random probe, so every
/// output entry contributes a distinct weight to the scalar.
pub struct OpCase {
    pub op: Op,
    probe: Vec<f64>,
}

impl OpCase {
    fn output<'t, F: Float>(&self, x: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        Ok(match self.op {
            Op::Add => x[0].add(&x[1])?,
            Op::Sub => x[0].sub(&x[1])?,
            Op::Mul => x[0].mul(&x[1])?,
            Op::Scale => x[0].scale(-1.75),
            Op::Sigmoid => x[0].sigmoid(),
            Op::Silu => x[0].silu(),
            Op::SmoothL1 => x[0].smooth_l1(0.1),
            Op::Softmax => x[0].softmax(1)?,
            Op::Mean => x[0].mean(),
            Op::MeanLast => x[0].mean_last()?,
            Op::NormLast => x[0].norm_last()?,
            Op::Reshape => x[0].reshape(&[6, 4])?,
            Op::Permute => x[0].permute(&[2, 0, 1])?,
            Op::IndexSelect => x[0].index_select(1, &[3, 0, 3, 2])?,
            Op::Concat => Var::concat(&[x[0], x[1]], 1)?,
            Op::MatmulBatched | Op::MatmulShared => x[0].matmul(&x[1])?,
            Op::Conv2d => x[0].conv2d(
                &x[1],
                Some(&x[2]),
                Conv2dSpec {
                    stride: (1, 2),
                    dilation: (1, 2),
                    padding: (1, 0, 1, 2),
                    groups: 2,
                },
            )?,
            Op::Conv1dCausal => x[0].conv1d_causal(&x[1], Some(&x[2]), 2, 2)?,
            Op::BatchNormTrain | Op::BatchNormEval => {
                let mut st = BatchNormState::<F>::new(3);
                st.running_mean = vec![F::of(0.3), F::of(-0.2), F::of(0.05)];
                st.running_var = vec![F::of(1.7), F::of(0.4), F::of(2.2)];
                let mode = if self.op == Op::BatchNormTrain {
                    NormMode::Train
                } else {
                    NormMode::Eval
                };
                x[0].batch_norm(&x[1], &x[2], &mut st, mode)?
            }
        })
    }
}

impl ScalarFn for OpCase {
    fn eval<'t, F: Float>(&self, tape: &'t Tape<F>, inputs: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let y = self.output(inputs)?;
        if y.shape().is_empty() {
            return Ok(y.scale(1.3));
        }
        let p = tape.constant(Tensor::from_f64(y.shape(), &self.probe)?);
        Ok(y.mul(&p)?.sum())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

pub fn op_case(op: Op, seed: u64) -> (OpCase, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 97 + op as u64);
    let inputs: Vec<Tensor<f64>> = op
        .shapes()
        .into_iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s, uniform(&mut rng, n, 1.5)).expect("shape matches data")
        })
        .collect();
    // probe sized from a dry run
    let mut case = OpCase { op, probe: vec![] };
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let n = case
        .output(&vars)
        .expect("op case is well formed")
        .value()
        .len();
    case.probe = uniform(&mut rng, n, 1.0);
    (case, inputs)
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::invalid("model", other.to_string()),
    }
}

fn objective_err(e: ObjectiveError) -> TensorError {
    match e {
        ObjectiveError::Tensor(t) => t,
        other => TensorError::invalid("loss", other.to_string()),
    }
}

/// Total training loss as a function of the prediction.
pub struct LossCase {
    pub batch: usize,
    pub keypoints: usize,
    pub gt: Vec<f64>,
    pub config: LossConfig,
}

impl ScalarFn for LossCase {
    fn eval<'t, F: Float>(&self, tape: &'t Tape<F>, inputs: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let gt = tape.constant(Tensor::from_f64(
            vec![self.batch, self.keypoints, 2],
            &self.gt,
        )?);
        Ok(
            total_loss(&inputs[0], &gt, &SkeletonTopology::standard(), &self.config)
                .map_err(objective_err)?
                .total,
        )
    }
}

pub fn loss_case(seed: u64) -> (LossCase, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let (b, k) = (2, 15);
    let case = LossCase {
        batch: b,
        keypoints: k,
        gt: uniform(&mut rng, b * k * 2, 1.0),
        config: LossConfig::default(),
    };
    let pred =
        Tensor::new(vec![b, k, 2], uniform(&mut rng, b * k * 2, 1.0)).expect("shape matches data");
    (case, vec![pred])
}

/// Total loss of the network as a function of its input (first) and of
/// every parameter in name order.
pub struct NetworkCase {
    pub config: WiFlowConfig,
    pub names: Vec<String>,
    pub batch: usize,
    pub gt: Vec<f64>,
}

impl ScalarFn for NetworkCase {
    fn eval<'t, F: Float>(&self, tape: &'t Tape<F>, inputs: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let bound = Bound::from_vars(&self.names, &inputs[1..]);
        let mut norms = ParameterStore::<F>::init(&self.config, 0)
            .map_err(model_err)?
            .norms;
        let pred = forward(
            &self.config,
            &bound,
            &mut norms,
            inputs[0],
            NormMode::Train,
            None,
        )
        .map_err(model_err)?;
        let gt = tape.constant(Tensor::from_f64(
            vec![self.batch, self.config.keypoints, 2],
            &self.gt,
        )?);
        Ok(total_loss(
            &pred,
            &gt,
            &SkeletonTopology::standard(),
            &LossConfig::default(),
        )
        .map_err(objective_err)?
        .total)
    }
}

pub fn network_case(
    cfg: &WiFlowConfig,
    seed: u64,
    batch: usize,
) -> (NetworkCase, Vec<Tensor<f64>>) {
    let store = ParameterStore::<f64>::init(cfg, seed).expect("valid model config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = vec![batch, cfg.input_channels, cfg.window_t];
    let n = shape.iter().product();
    let mut inputs = vec![Tensor::new(shape, uniform(&mut rng, n, 1.5)).expect("input shape")];
    // move the constant-initialized affine terms off their trivial values
    let mut params: BTreeMap<String, Tensor<f64>> = store.params;
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let names: Vec<String> = params.keys().cloned().collect();
    inputs.extend(params.into_values());
    let case = NetworkCase {
        config: cfg.clone(),
        names,
        batch,
        gt: uniform(&mut rng, batch * cfg.keypoints * 2, 1.0),
    };
    (case, inputs)
}

/// A network small enough to check every parameter entry.
pub fn tiny_network() -> WiFlowConfig {
    WiFlowConfig {
        input_channels: 60,
        window_t: 4,
        tcn_channel_schedule: vec![60],
        tcn_dilations: vec![1],
        tcn_groups: 3,
        tcn_residual: true,
        spatial_channel_schedule: vec![2, 4],
        attention_groups: 2,
        decoder_mid_channels: 4,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub seeds: u64,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: u64,
    /// Entries checked per tensor of the small network.
    pub tiny_entries: usize,
    /// Also check one entry per tensor of the default network.
    pub full_network: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 20,
            tiny_entries: 12,
            full_network: true,
        }
    }
}

fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(l, _)| l)
}

fn network_rows<F: Float>(
    prefix: &str,
    cfg: &WiFlowConfig,
    seeds: u64,
    entries: usize,
    rows: &mut BTreeMap<String, SuiteRow>,
) -> Result<()> {
    for seed in 0..seeds {
        let (case, inputs) = network_case(cfg, seed, 2);
        let r = grad_check_sampled::<F>(&case, &inputs, 1e-6, entries, seed)?;
        let names = std::iter::once("input").chain(case.names.iter().map(|n| layer_of(n)));
        for ((layer, err), t) in names.zip(&r.per_input).zip(&inputs) {
            let row = rows
                .entry(format!("{prefix}/{layer}"))
                .or_insert_with(|| SuiteRow {
                    name: format!("{prefix}/{layer}"),
                    seeds: 0,
                    checked: 0,
                    max_rel_error: 0.0,
                });
            row.max_rel_error = row.max_rel_error.max(*err);
            row.checked += entries.min(t.len());
        }
    }
    for row in rows.values_mut().filter(|r| r.name.starts_with(prefix)) {
        row.seeds = seeds;
    }
    Ok(())
}

/// Runs every check with analytic gradients at `F` and reports the worst
/// relative error per op, for the loss, and per network layer.
pub fn run_suite<F: Float>(opts: &SuiteOptions) -> Result<Vec<SuiteRow>> {
    let mut out = Vec::new();
    for op in ALL_OPS {
        let mut row = SuiteRow {
            name: format!("op/{}", op.name()),
            seeds: opts.seeds,
            checked: 0,
            max_rel_error: 0.0,
        };
        for seed in 0..opts.seeds {
            let (case, inputs) = op_case(op, seed);
            let r = grad_check_sampled::<F>(&case, &inputs, 1e-5, usize::MAX, seed)?;
            row.checked += r.checked;
            row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
        }
        out.push(row);
    }
    let mut row = SuiteRow {
        name: "loss/total".into(),
        seeds: opts.seeds,
        checked: 0,
        max_rel_error: 0.0,
    };
    for seed in 0..opts.seeds {
        let (case, inputs) = loss_case(seed);
        let r = grad_check_sampled::<F>(&case, &inputs, 1e-6, usize::MAX, seed)?;
        row.checked += r.checked;
        row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
    }
    out.push(row);
    let mut layers = BTreeMap::new();
    network_rows::<F>(
        "tiny",
        &tiny_network(),
        opts.seeds,
        opts.tiny_entries,
        &mut layers,
    )?;
    if opts.full_network {
        network_rows::<F>("full", &WiFlowConfig::default(), 1, 1, &mut layers)?;
    }
    out.extend(layers.into_values());
    Ok(out)
}
