//! The pose network: a dilated causal TCN over the channel axis, an
//! asymmetric-convolution spatial encoder, two-stage axial attention and
//! a convolutional coordinate decoder.

mod checkpoint;
mod net;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BatchNormState, Float, Tape, Tensor, TensorError, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use net::{
    count_flops, expected_trace, format_trace, forward, tcn_stage, FlopReport, TraceRow,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config field `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("parameter `{0}` is not in the store")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn cfg_err(field: &'static str, msg: impl Into<String>) -> ModelError {
    ModelError::Config {
        field,
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WiFlowConfig {
    pub input_channels: usize,
    pub window_t: usize,
    /// Output width of each TCN block.
    pub tcn_channel_schedule: Vec<usize>,
    pub tcn_dilations: Vec<usize>,
    pub tcn_kernel: usize,
    pub tcn_groups: usize,
    pub tcn_convs_per_block: usize,
    pub tcn_residual: bool,
    /// Stem width followed by the output width of each residual block.
    pub spatial_channel_schedule: Vec<usize>,
    pub spatial_kernel_w: usize,
    pub keypoints: usize,
    pub attention_groups: usize,
    pub attention_layers: usize,
    pub decoder_mid_channels: usize,
}

impl Default for WiFlowConfig {
    fn default() -> Self {
        WiFlowConfig {
            input_channels: 540,
            window_t: 20,
            tcn_channel_schedule: vec![540, 440, 340, 240],
            tcn_dilations: vec![1, 2, 4, 8],
            tcn_kernel: 3,
            tcn_groups: 4,
            tcn_convs_per_block: 2,
            tcn_residual: false,
            spatial_channel_schedule: vec![8, 16, 32, 64],
            spatial_kernel_w: 3,
            keypoints: 15,
            attention_groups: 8,
            attention_layers: 1,
            decoder_mid_channels: 32,
        }
    }
}

impl WiFlowConfig {
    pub fn validate(&self) -> Result<()> {
        let sched = &self.tcn_channel_schedule;
        if self.input_channels == 0 {
            return Err(cfg_err("input_channels", "must be positive"));
        }
        if self.window_t == 0 {
            return Err(cfg_err("window_t", "must be positive"));
        }
        if sched.is_empty() {
            return Err(cfg_err("tcn_channel_schedule", "needs at least one block"));
        }
        if sched.contains(&0) {
            return Err(cfg_err("tcn_channel_schedule", "entries must be positive"));
        }
        let mut prev = self.input_channels;
        for &c in sched {
            if c > prev {
                return Err(cfg_err(
                    "tcn_channel_schedule",
                    format!("must not increase, {prev} -> {c}"),
                ));
            }
            prev = c;
        }
        if sched.len() > 1 && sched.windows(2).any(|w| w[1] >= w[0]) {
            return Err(cfg_err(
                "tcn_channel_schedule",
                "must be strictly decreasing",
            ));
        }
        if self.tcn_dilations.len() != sched.len() {
            return Err(cfg_err(
                "tcn_dilations",
                format!(
                    "{} dilations for {} blocks",
                    self.tcn_dilations.len(),
                    sched.len()
                ),
            ));
        }
        if self.tcn_dilations.contains(&0) {
            return Err(cfg_err("tcn_dilations", "must be >= 1"));
        }
        if self.tcn_kernel == 0 {
            return Err(cfg_err("tcn_kernel", "must be >= 1"));
        }
        if self.tcn_convs_per_block == 0 {
            return Err(cfg_err("tcn_convs_per_block", "must be >= 1"));
        }
        let g = self.tcn_groups;
        if g == 0 || self.input_channels % g != 0 || sched.iter().any(|c| c % g != 0) {
            return Err(cfg_err(
                "tcn_groups",
                format!("{g} must divide input_channels and every schedule entry"),
            ));
        }
        let sp = &self.spatial_channel_schedule;
        if sp.is_empty() || sp.contains(&0) {
            return Err(cfg_err(
                "spatial_channel_schedule",
                "needs positive entries",
            ));
        }
        if self.spatial_kernel_w == 0 || self.spatial_kernel_w % 2 == 0 {
            return Err(cfg_err("spatial_kernel_w", "must be odd"));
        }
        let width = *sched.last().unwrap();
        let factor = 1usize << sp.len();
        if width % factor != 0 || width / factor != self.keypoints {
            return Err(cfg_err(
                "keypoints",
                format!(
                    "final TCN width {width} halved {} times must equal {} keypoints",
                    sp.len(),
                    self.keypoints
                ),
            ));
        }
        let c = *sp.last().unwrap();
        if self.attention_groups == 0 || c % self.attention_groups != 0 {
            return Err(cfg_err(
                "attention_groups",
                format!("{} must divide {c} channels", self.attention_groups),
            ));
        }
        if self.attention_layers != 1 {
            return Err(cfg_err(
                "attention_layers",
                "only a single layer is supported",
            ));
        }
        if self.decoder_mid_channels == 0 {
            return Err(cfg_err("decoder_mid_channels", "must be positive"));
        }
        Ok(())
    }

    /// Channel count of each residual block's input and output.
    pub(crate) fn res_blocks(&self) -> Vec<(usize, usize)> {
        let sp = &self.spatial_channel_schedule;
        (0..sp.len())
            .map(|n| (if n == 0 { sp[0] } else { sp[n - 1] }, sp[n]))
            .collect()
    }

    /// Input width of each TCN block.
    pub(crate) fn tcn_inputs(&self) -> Vec<usize> {
        std::iter::once(self.input_channels)
            .chain(self.tcn_channel_schedule.iter().copied())
            .take(self.tcn_channel_schedule.len())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Learnable tensors keyed by layer path, plus batch-norm running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<F> {
    pub params: BTreeMap<String, Tensor<F>>,
    pub norms: BTreeMap<String, BatchNormState<F>>,
}

impl<F: Float> ParameterStore<F> {
    /// Deterministic initialization: one ChaCha stream seeded with `seed`
    /// is consumed by the parameters in name order.
    pub fn init(cfg: &WiFlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut specs = net::param_specs(cfg);
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data: Vec<F> = match s.init {
                Init::Uniform { fan_in } => {
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                    (0..n)
                        .map(|_| F::of(rng.random_range(-bound..bound)))
                        .collect()
                }
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
            };
            params.insert(s.name, Tensor::new(s.shape, data)?);
        }
        let norms = net::norm_specs(cfg)
            .into_iter()
            .map(|(name, ch)| (name, BatchNormState::new(ch)))
            .collect();
        Ok(ParameterStore { params, norms })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Float>(&self) -> ParameterStore<G> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BatchNormState {
                            running_mean: s.running_mean.iter().map(|v| G::of(v.f64())).collect(),
                            running_var: s.running_var.iter().map(|v| G::of(v.f64())).collect(),
                            momentum: s.momentum,
                            epsilon: s.epsilon,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Bound<'t, F> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape, by name.
pub struct Bound<'t, F: Float> {
    pub vars: BTreeMap<String, Var<'t, F>>,
}

impl<'t, F: Float> Bound<'t, F> {
    pub fn from_vars(names: &[String], vars: &[Var<'t, F>]) -> Self {
        Bound {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: WiFlowConfig,
    pub seed: u64,
    pub store: ParameterStore<f32>,
}

impl Model {
    pub fn init(config: WiFlowConfig, seed: u64) -> Result<Self> {
        let store = ParameterStore::init(&config, seed)?;
        Ok(Model {
            config,
            seed,
            store,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Eval-mode prediction for a `B x C x T` batch; returns `B x K x 2`.
    pub fn predict(&mut self, input: Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape, false);
        let x = tape.constant(input);
        let y = forward(
            &self.config,
            &bound,
            &mut self.store.norms,
            x,
            crate::tensor::NormMode::Eval,
            None,
        )?;
        let out = (*y.value()).clone();
        Ok(out)
    }
}
