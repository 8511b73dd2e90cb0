use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{Bound, Init, ModelError, ParamSpec, Result, WiFlowConfig};
use crate::tensor::{BatchNormState, Conv2dSpec, Float, NormMode, TensorError, Var};

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, shape: Vec<usize>, bias: bool) {
    let fan_in = shape[1..].iter().product();
    let cout = shape[0];
    out.push(spec(
        format!("{prefix}.weight"),
        shape,
        Init::Uniform { fan_in },
    ));
    if bias {
        out.push(spec(format!("{prefix}.bias"), vec![cout], Init::Zeros));
    }
}

fn bn_specs(out: &mut Vec<ParamSpec>, prefix: &str, ch: usize) {
    out.push(spec(format!("{prefix}.gamma"), vec![ch], Init::Ones));
    out.push(spec(format!("{prefix}.beta"), vec![ch], Init::Zeros));
}

pub(crate) fn param_specs(cfg: &WiFlowConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let (k, g) = (cfg.tcn_kernel, cfg.tcn_groups);
    for (l, (&cin, &cout)) in cfg
        .tcn_inputs()
        .iter()
        .zip(&cfg.tcn_channel_schedule)
        .enumerate()
    {
        for i in 0..cfg.tcn_convs_per_block {
            conv_specs(
                &mut s,
                &format!("tcn.{l}.conv{i}"),
                vec![cin, cin / g, k],
                true,
            );
        }
        conv_specs(&mut s, &format!("tcn.{l}.proj"), vec![cout, cin, 1], true);
        if cfg.tcn_residual {
            conv_specs(
                &mut s,
                &format!("tcn.{l}.shortcut"),
                vec![cout, cin, 1],
                false,
            );
        }
    }
    let kw = cfg.spatial_kernel_w;
    let stem = cfg.spatial_channel_schedule[0];
    for i in 0..3 {
        let cin = if i == 0 { 1 } else { stem };
        conv_specs(
            &mut s,
            &format!("stem.{i}.conv"),
            vec![stem, cin, 1, kw],
            true,
        );
        bn_specs(&mut s, &format!("stem.{i}.bn"), stem);
    }
    for (n, (cin, cout)) in cfg.res_blocks().into_iter().enumerate() {
        let p = format!("res.{n}");
        conv_specs(&mut s, &format!("{p}.conv1"), vec![cout, cin, 1, kw], true);
        bn_specs(&mut s, &format!("{p}.bn1"), cout);
        conv_specs(&mut s, &format!("{p}.conv2"), vec![cout, cout, 1, kw], true);
        bn_specs(&mut s, &format!("{p}.bn2"), cout);
        conv_specs(&mut s, &format!("{p}.conv3"), vec![cout, cout, 1, kw], true);
        conv_specs(
            &mut s,
            &format!("{p}.shortcut"),
            vec![cout, cin, 1, 1],
            false,
        );
    }
    let c = *cfg.spatial_channel_schedule.last().unwrap();
    for (stage, len) in [("width", cfg.window_t), ("height", cfg.keypoints)] {
        for m in ["wq", "wk", "wv"] {
            s.push(spec(
                format!("attn.{stage}.{m}"),
                vec![len, len],
                Init::Uniform { fan_in: len },
            ));
        }
        bn_specs(&mut s, &format!("attn.{stage}.bn"), c);
    }
    let mid = cfg.decoder_mid_channels;
    conv_specs(&mut s, "decoder.conv1", vec![mid, c, 3, 3], true);
    bn_specs(&mut s, "decoder.bn", mid);
    conv_specs(&mut s, "decoder.conv2", vec![2, mid, 1, 1], true);
    s
}

pub(crate) fn norm_specs(cfg: &WiFlowConfig) -> Vec<(String, usize)> {
    let stem = cfg.spatial_channel_schedule[0];
    let c = *cfg.spatial_channel_schedule.last().unwrap();
    let mut v: Vec<(String, usize)> = (0..3).map(|i| (format!("stem.{i}.bn"), stem)).collect();
    for (n, (_, cout)) in cfg.res_blocks().into_iter().enumerate() {
        v.push((format!("res.{n}.bn1"), cout));
        v.push((format!("res.{n}.bn2"), cout));
    }
    v.push(("attn.width.bn".into(), c));
    v.push(("attn.height.bn".into(), c));
    v.push(("decoder.bn".into(), cfg.decoder_mid_channels));
    v
}

/// One row of the per-sample shape trace (batch axis omitted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceRow {
    pub block: String,
    pub shape: Vec<usize>,
}

fn row(block: impl Into<String>, shape: &[usize]) -> TraceRow {
    TraceRow {
        block: block.into(),
        shape: shape.to_vec(),
    }
}

/// Shapes every forward pass must produce for `cfg`.
pub fn expected_trace(cfg: &WiFlowConfig) -> Vec<TraceRow> {
    let t = cfg.window_t;
    let mut rows = vec![row("Input", &[cfg.input_channels, t])];
    for (l, &c) in cfg.tcn_channel_schedule.iter().enumerate() {
        rows.push(row(format!("TCN Layer {}", l + 1), &[c, t]));
    }
    let mut w = *cfg.tcn_channel_schedule.last().unwrap();
    rows.push(row(
        "ConvBlock1 (up)",
        &[cfg.spatial_channel_schedule[0], t, w],
    ));
    for (n, (_, cout)) in cfg.res_blocks().into_iter().enumerate() {
        w /= 2;
        rows.push(row(format!("ResBlock {}", n + 1), &[cout, t, w]));
    }
    let c = *cfg.spatial_channel_schedule.last().unwrap();
    let k = cfg.keypoints;
    rows.push(row("AxialAttention", &[c, k, t]));
    rows.push(row("Decoder", &[2, k, t]));
    rows.push(row("Avg Pooling", &[2, k, 1]));
    rows.push(row("Output", &[k, 2]));
    rows
}

/// Renders a trace as an aligned two-column table.
pub fn format_trace(rows: &[TraceRow]) -> String {
    let width = rows.iter().map(|r| r.block.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in rows {
        let dims: Vec<String> = r.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "{:<width$}  {}", r.block, dims.join(" x "));
    }
    out
}

struct Ctx<'a, 't, F: Float> {
    p: &'a Bound<'t, F>,
    norms: &'a mut BTreeMap<String, BatchNormState<F>>,
    mode: NormMode,
    trace: Vec<TraceRow>,
}

impl<'t, F: Float> Ctx<'_, 't, F> {
    fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.p.get(name)
    }

    fn bias(&self, prefix: &str) -> Result<Option<Var<'t, F>>> {
        Ok(Some(self.get(&format!("{prefix}.bias"))?))
    }

    fn bn(&mut self, x: Var<'t, F>, prefix: &str) -> Result<Var<'t, F>> {
        let gamma = self.get(&format!("{prefix}.gamma"))?;
        let beta = self.get(&format!("{prefix}.beta"))?;
        let state = self
            .norms
            .get_mut(prefix)
            .ok_or_else(|| ModelError::MissingParam(format!("{prefix} (running statistics)")))?;
        Ok(x.batch_norm(&gamma, &beta, state, self.mode)?)
    }

    fn conv2d(
        &self,
        x: Var<'t, F>,
        prefix: &str,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Var<'t, F>> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = if bias { self.bias(prefix)? } else { None };
        Ok(x.conv2d(&w, b.as_ref(), spec)?)
    }

    fn record(&mut self, block: impl Into<String>, x: &Var<'t, F>) {
        self.trace.push(row(block, &x.shape()[1..]));
    }
}

fn tcn_block<'t, F: Float>(
    cx: &Ctx<'_, 't, F>,
    cfg: &WiFlowConfig,
    l: usize,
    x: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let d = cfg.tcn_dilations[l];
    let mut h = x;
    for i in 0..cfg.tcn_convs_per_block {
        let p = format!("tcn.{l}.conv{i}");
        let w = cx.get(&format!("{p}.weight"))?;
        let b = cx.bias(&p)?;
        h = h.conv1d_causal(&w, b.as_ref(), d, cfg.tcn_groups)?.silu();
    }
    let p = format!("tcn.{l}.proj");
    let w = cx.get(&format!("{p}.weight"))?;
    let b = cx.bias(&p)?;
    let mut y = h.conv1d_causal(&w, b.as_ref(), 1, 1)?;
    if cfg.tcn_residual {
        let ws = cx.get(&format!("tcn.{l}.shortcut.weight"))?;
        y = y.add(&x.conv1d_causal(&ws, None, 1, 1)?)?;
    }
    Ok(y.silu())
}

/// Runs the TCN stage alone on a `B x C x T` input (it has no
/// batch-norm, so no mode is needed).
pub fn tcn_stage<'t, F: Float>(
    cfg: &WiFlowConfig,
    p: &Bound<'t, F>,
    x: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let mut norms = BTreeMap::new();
    let cx = Ctx {
        p,
        norms: &mut norms,
        mode: NormMode::Eval,
        trace: Vec::new(),
    };
    let mut h = x;
    for l in 0..cfg.tcn_channel_schedule.len() {
        h = tcn_block(&cx, cfg, l, h)?;
    }
    Ok(h)
}

fn res_block<'t, F: Float>(
    cx: &mut Ctx<'_, 't, F>,
    cfg: &WiFlowConfig,
    n: usize,
    x: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let w = *x.shape().last().unwrap();
    if w % 2 != 0 {
        return Err(TensorError::invalid("res_block", format!("odd width {w}")).into());
    }
    let pw = cfg.spatial_kernel_w / 2;
    let p = format!("res.{n}");
    let m = cx.conv2d(
        x,
        &format!("{p}.conv1"),
        Conv2dSpec::padded((1, 2), (0, pw)),
        true,
    )?;
    let m = cx.bn(m, &format!("{p}.bn1"))?.silu();
    let m = cx.conv2d(
        m,
        &format!("{p}.conv2"),
        Conv2dSpec::padded((1, 1), (0, pw)),
        true,
    )?;
    let m = cx.bn(m, &format!("{p}.bn2"))?.silu();
    let m = cx
        .conv2d(
            m,
            &format!("{p}.conv3"),
            Conv2dSpec::padded((1, 1), (0, pw)),
            true,
        )?
        .silu();
    let s = cx.conv2d(
        x,
        &format!("{p}.shortcut"),
        Conv2dSpec::padded((1, 2), (0, 0)),
        false,
    )?;
    Ok(m.add(&s)?)
}

/// Grouped self-attention along the last axis of `B x C x A x L`, batched
/// over `A`; projections are `L x L`.
fn axial_stage<'t, F: Float>(
    cx: &mut Ctx<'_, 't, F>,
    stage: &str,
    groups: usize,
    z: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let s = z.shape();
    let (b, c, a, l) = (s[0], s[1], s[2], s[3]);
    let d = c / groups;
    let xs = z.permute(&[0, 2, 1, 3])?.reshape(&[b * a, c, l])?;
    let proj = |m: &str| -> Result<Var<'t, F>> {
        let w = cx.get(&format!("attn.{stage}.{m}"))?;
        Ok(xs.matmul(&w)?.reshape(&[b * a * groups, d, l])?)
    };
    let (q, k, v) = (proj("wq")?, proj("wk")?, proj("wv")?);
    let scores = q
        .transpose(1, 2)?
        .matmul(&k)?
        .scale(1.0 / (d as f64).sqrt())
        .softmax(2)?;
    let o = scores.matmul(&v.transpose(1, 2)?)?.transpose(1, 2)?;
    let o = o.reshape(&[b * a, c, l])?;
    let o = cx.bn(o, &format!("attn.{stage}.bn"))?;
    Ok(o.reshape(&[b, a, c, l])?.permute(&[0, 2, 1, 3])?)
}

/// Full network on a `B x C x T` batch, returning `B x K x 2`. When
/// `trace` is given it receives the per-sample shape of every block.
pub fn forward<'t, F: Float>(
    cfg: &WiFlowConfig,
    p: &Bound<'t, F>,
    norms: &mut BTreeMap<String, BatchNormState<F>>,
    x: Var<'t, F>,
    mode: NormMode,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Var<'t, F>> {
    let xs = x.shape();
    if xs.len() != 3 || xs[1] != cfg.input_channels || xs[2] != cfg.window_t || xs[0] == 0 {
        return Err(TensorError::invalid(
            "forward",
            format!(
                "expected B x {} x {} input, got {xs:?}",
                cfg.input_channels, cfg.window_t
            ),
        )
        .into());
    }
    let (b, t) = (xs[0], cfg.window_t);
    let mut cx = Ctx {
        p,
        norms,
        mode,
        trace: Vec::new(),
    };
    cx.record("Input", &x);

    let mut h = x;
    for l in 0..cfg.tcn_channel_schedule.len() {
        h = tcn_block(&cx, cfg, l, h)?;
        cx.record(format!("TCN Layer {}", l + 1), &h);
    }

    // channels become the width axis of a single-channel T x C map
    let width = *cfg.tcn_channel_schedule.last().unwrap();
    let mut h = h.permute(&[0, 2, 1])?.reshape(&[b, 1, t, width])?;
    let pw = cfg.spatial_kernel_w / 2;
    for i in 0..3 {
        h = cx.conv2d(
            h,
            &format!("stem.{i}.conv"),
            Conv2dSpec::padded((1, 1), (0, pw)),
            true,
        )?;
        h = cx.bn(h, &format!("stem.{i}.bn"))?.silu();
    }
    cx.record("ConvBlock1 (up)", &h);
    for n in 0..cfg.spatial_channel_schedule.len() {
        h = res_block(&mut cx, cfg, n, h)?;
        cx.record(format!("ResBlock {}", n + 1), &h);
    }

    // C x T x K -> C x K x T
    let h = h.permute(&[0, 1, 3, 2])?;
    let h = axial_stage(&mut cx, "width", cfg.attention_groups, h)?;
    let h = axial_stage(
        &mut cx,
        "height",
        cfg.attention_groups,
        h.permute(&[0, 1, 3, 2])?,
    )?
    .permute(&[0, 1, 3, 2])?;
    cx.record("AxialAttention", &h);

    let h = cx.conv2d(h, "decoder.conv1", Conv2dSpec::padded((1, 1), (1, 1)), true)?;
    let h = cx.bn(h, "decoder.bn")?.silu();
    let h = cx.conv2d(h, "decoder.conv2", Conv2dSpec::default(), true)?;
    cx.record("Decoder", &h);
    let h = h.mean_last()?;
    cx.record("Avg Pooling", &h);
    let k = cfg.keypoints;
    let out = h.reshape(&[b, 2, k])?.permute(&[0, 2, 1])?;
    cx.record("Output", &out);

    debug_assert_eq!(
        cx.trace,
        expected_trace(cfg),
        "shape trace diverged from the schedule"
    );
    if let Some(tr) = trace {
        *tr = cx.trace;
    }
    Ok(out)
}

/// Multiply-accumulate counts for one sample's forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub tcn: u64,
    pub spatial: u64,
    pub attention: u64,
    pub decoder: u64,
    pub total: u64,
}

/// Analytic MAC count over convolutions, projections and attention
/// products. Normalization and activations are not counted.
pub fn count_flops(cfg: &WiFlowConfig) -> FlopReport {
    let t = cfg.window_t as u64;
    let mut r = FlopReport::default();
    let (k, g) = (cfg.tcn_kernel as u64, cfg.tcn_groups as u64);
    for (&cin, &cout) in cfg.tcn_inputs().iter().zip(&cfg.tcn_channel_schedule) {
        let (cin, cout) = (cin as u64, cout as u64);
        r.tcn += cfg.tcn_convs_per_block as u64 * cin * (cin / g) * k * t;
        r.tcn += cin * cout * t;
        if cfg.tcn_residual {
            r.tcn += cin * cout * t;
        }
    }
    let kw = cfg.spatial_kernel_w as u64;
    let mut w = *cfg.tcn_channel_schedule.last().unwrap() as u64;
    let stem = cfg.spatial_channel_schedule[0] as u64;
    r.spatial += kw * stem * t * w + 2 * stem * stem * kw * t * w;
    for (cin, cout) in cfg.res_blocks() {
        let (cin, cout) = (cin as u64, cout as u64);
        w /= 2;
        let hw = t * w;
        r.spatial += cin * cout * kw * hw + 2 * cout * cout * kw * hw + cin * cout * hw;
    }
    let c = *cfg.spatial_channel_schedule.last().unwrap() as u64;
    let kp = cfg.keypoints as u64;
    // three projections, scores and weighted sum, per stage
    r.attention = 5 * kp * c * t * t + 5 * t * c * kp * kp;
    let mid = cfg.decoder_mid_channels as u64;
    r.decoder = c * mid * 9 * kp * t + mid * 2 * kp * t;
    r.total = r.tcn + r.spatial + r.attention + r.decoder;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParameterStore;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn pointwise_conv_flops_closed_form() {
        let cfg = WiFlowConfig {
            tcn_convs_per_block: 1,
            tcn_kernel: 1,
            tcn_groups: 1,
            ..Default::default()
        };
        let r = count_flops(&cfg);
        let sched = [540u64, 540, 440, 340, 240];
        let want: u64 = sched
            .windows(2)
            .map(|w| (w[0] * w[0] + w[0] * w[1]) * 20)
            .sum();
        assert_eq!(r.tcn, want);
    }

    #[test]
    fn conv_counts_scale_with_window() {
        let a = count_flops(&WiFlowConfig::default());
        let b = count_flops(&WiFlowConfig {
            window_t: 40,
            ..Default::default()
        });
        assert_eq!(b.tcn, 2 * a.tcn);
        assert_eq!(b.spatial, 2 * a.spatial);
        assert_eq!(b.decoder, 2 * a.decoder);
    }

    #[test]
    fn every_parameter_has_a_norm_or_conv_home() {
        let cfg = WiFlowConfig::default();
        let names: Vec<String> = param_specs(&cfg).into_iter().map(|s| s.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for (n, _) in norm_specs(&cfg) {
            assert!(names.contains(&format!("{n}.gamma")));
        }
    }

    #[test]
    fn uniform_attention_averages_values() {
        // W_Q = W_K = 0 and W_V = I give the mean of V along the axis
        let mut cfg = WiFlowConfig::default();
        cfg.attention_groups = 2;
        let store = ParameterStore::<f64>::init(&cfg, 0).unwrap();
        let tape = Tape::<f64>::new();
        let mut bound = store.bind(&tape, false);
        let l = 5;
        bound.vars.insert(
            "attn.width.wq".into(),
            tape.constant(Tensor::zeros(vec![l, l])),
        );
        bound.vars.insert(
            "attn.width.wk".into(),
            tape.constant(Tensor::zeros(vec![l, l])),
        );
        let mut eye = Tensor::zeros(vec![l, l]);
        for i in 0..l {
            eye.data_mut()[i * l + i] = 1.0;
        }
        bound
            .vars
            .insert("attn.width.wv".into(), tape.constant(eye));
        let (b, c, a) = (2, 4, 3);
        let data: Vec<f64> = (0..b * c * a * l).map(|i| ((i * 7) % 11) as f64).collect();
        let z = tape.constant(Tensor::from_f64(vec![b, c, a, l], &data).unwrap());
        let mut norms = BTreeMap::new();
        let mut st = BatchNormState::<f64>::new(c);
        st.epsilon = 0.0;
        norms.insert("attn.width.bn".to_string(), st);
        bound.vars.insert(
            "attn.width.bn.gamma".into(),
            tape.constant(Tensor::ones(vec![c])),
        );
        bound.vars.insert(
            "attn.width.bn.beta".into(),
            tape.constant(Tensor::zeros(vec![c])),
        );
        let mut cx = Ctx {
            p: &bound,
            norms: &mut norms,
            mode: NormMode::Eval,
            trace: Vec::new(),
        };
        let out = axial_stage(&mut cx, "width", 2, z)
            .unwrap()
            .value()
            .to_f64_vec();
        for row in 0..b * c * a {
            let mean: f64 = data[row * l..(row + 1) * l].iter().sum::<f64>() / l as f64;
            for j in 0..l {
                assert!((out[row * l + j] - mean).abs() < 1e-12);
            }
        }
    }
}
