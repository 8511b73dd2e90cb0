use serde::{Deserialize, Serialize};

use super::{dot_f64, moments, Float, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer. The affine `gamma`/`beta`
/// are learnable and passed to [`Var::batch_norm`] separately.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<F: Float> BatchNormState<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

impl<'t, F: Float> Var<'t, F> {
    /// Per-channel normalization of a `B x C x ...` tensor. Train mode
    /// normalizes with batch statistics over every non-channel axis and
    /// updates the running statistics; eval mode uses the running ones.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, F>,
        beta: &Var<'t, F>,
        state: &mut BatchNormState<F>,
        mode: NormMode,
    ) -> Result<Var<'t, F>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("expected B x C x ..., got {shape:?}"),
            ));
        }
        let (batch, ch) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if v.shape() != [ch] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "batch_norm gamma"
                    } else {
                        "batch_norm beta"
                    },
                    lhs: vec![ch],
                    rhs: v.shape(),
                });
            }
        }
        if state.running_mean.len() != ch || state.running_var.len() != ch {
            return Err(TensorError::invalid(
                "batch_norm",
                format!(
                    "running statistics sized {} for {ch} channels",
                    state.running_mean.len()
                ),
            ));
        }
        let count = batch * inner;
        let xd = x.data();
        let at = move |b: usize, c: usize| (b * ch + c) * inner;

        let mut mean = vec![0f64; ch];
        let mut invstd = vec![0f64; ch];
        match mode {
            NormMode::Train => {
                if count == 0 {
                    return Err(TensorError::invalid("batch_norm", "empty batch"));
                }
                for c in 0..ch {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += moments(&xd[at(b, c)..][..inner], 0.0).0;
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..batch {
                        ss += moments(&xd[at(b, c)..][..inner], m).1;
                    }
                    let var = ss / count as f64;
                    mean[c] = m;
                    invstd[c] = 1.0 / (var + state.epsilon).sqrt();
                    let unbiased = if count > 1 {
                        ss / (count - 1) as f64
                    } else {
                        var
                    };
                    let mo = state.momentum;
                    state.running_mean[c] =
                        F::of((1.0 - mo) * state.running_mean[c].f64() + mo * m);
                    state.running_var[c] =
                        F::of((1.0 - mo) * state.running_var[c].f64() + mo * unbiased);
                }
            }
            NormMode::Eval => {
                for c in 0..ch {
                    mean[c] = state.running_mean[c].f64();
                    invstd[c] = 1.0 / (state.running_var[c].f64().max(0.0) + state.epsilon).sqrt();
                }
            }
        }

        let (g, bt) = (gamma.value(), beta.value());
        let mut xhat = vec![F::zero(); xd.len()];
        let mut y = vec![F::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let (gc, bc) = (g.data()[c], bt.data()[c]);
                let (m, is) = (F::of(mean[c]), F::of(invstd[c]));
                let range = at(b, c)..at(b, c) + inner;
                for ((h, yo), &v) in xhat[range.clone()]
                    .iter_mut()
                    .zip(&mut y[range.clone()])
                    .zip(&xd[range])
                {
                    *h = (v - m) * is;
                    *yo = gc * *h + bc;
                }
            }
        }
        let out = Tensor::new(shape.clone(), y)?;
        Ok(self
            .tape
            .push(out, &[*self, *gamma, *beta], move |dy, need| {
                let dyd = dy.data();
                let mut sum_dy = vec![0f64; ch];
                let mut sum_dy_xhat = vec![0f64; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let start = at(b, c);
                        sum_dy[c] += moments(&dyd[start..start + inner], 0.0).0;
                        sum_dy_xhat[c] +=
                            dot_f64(&dyd[start..start + inner], &xhat[start..start + inner]);
                    }
                }
                let dx = need[0].then(|| {
                    let mut dx = vec![F::zero(); dyd.len()];
                    let n = count as f64;
                    for b in 0..batch {
                        for c in 0..ch {
                            let gc = g.data()[c].f64();
                            let start = at(b, c);
                            let range = start..start + inner;
                            let (dst, dys, xh) =
                                (&mut dx[range.clone()], &dyd[range.clone()], &xhat[range]);
                            match mode {
                                NormMode::Train => {
                                    let k = F::of(gc * invstd[c]);
                                    let (mdy, mdx) =
                                        (F::of(sum_dy[c] / n), F::of(sum_dy_xhat[c] / n));
                                    for ((d, &dy), &h) in dst.iter_mut().zip(dys).zip(xh) {
                                        *d = k * (dy - mdy - h * mdx);
                                    }
                                }
                                NormMode::Eval => {
                                    let k = F::of(gc * invstd[c]);
                                    for (d, &dy) in dst.iter_mut().zip(dys) {
                                        *d = k * dy;
                                    }
                                }
                            }
                        }
                    }
                    Tensor::new(shape.clone(), dx).expect("bn dx")
                });
                let to_t = |v: &[f64]| {
                    Tensor::new(vec![ch], v.iter().map(|&x| F::of(x)).collect()).expect("bn")
                };
                vec![
                    dx,
                    need[1].then(|| to_t(&sum_dy_xhat)),
                    need[2].then(|| to_t(&sum_dy)),
                ]
            }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine<'t>(tape: &'t Tape<f64>, ch: usize, g: f64, b: f64) -> (Var<'t, f64>, Var<'t, f64>) {
        (
            tape.param(Tensor::full(vec![ch], g)),
            tape.param(Tensor::full(vec![ch], b)),
        )
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![4, 2, 3], 7.5));
        let (g, b) = affine(&tape, 2, 1.0, 0.0);
        let mut st = BatchNormState::new(2);
        let y = x.batch_norm(&g, &b, &mut st, NormMode::Train).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![2, 1, 2], &[1., -3., 4., 9.]).unwrap());
        let (g, b) = affine(&tape, 1, 0.0, 0.75);
        let mut st = BatchNormState::new(1);
        let y = x.batch_norm(&g, &b, &mut st, NormMode::Train).unwrap();
        assert_eq!(y.value().to_f64_vec(), vec![0.75; 4]);
    }

    #[test]
    fn train_mode_statistics_and_running_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, ch, inner) = (16, 3, 10);
        let data: Vec<f64> = (0..batch * ch * inner)
            .map(|_| rng.random_range(-4.0..9.0))
            .collect();
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![batch, ch, inner], &data).unwrap());
        let (g, b) = affine(&tape, ch, 1.0, 0.0);
        let mut st = BatchNormState::new(ch);
        let y = x
            .batch_norm(&g, &b, &mut st, NormMode::Train)
            .unwrap()
            .value();
        for c in 0..ch {
            let vals: Vec<f64> = (0..batch)
                .flat_map(|bi| y.data()[(bi * ch + c) * inner..][..inner].to_vec())
                .collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
            assert!(st.running_var[c] >= 0.0);
            assert!(st.running_mean[c] != 0.0);
        }
    }

    #[test]
    fn eval_mode_before_training_uses_initial_stats() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 1, 3], &[1., 2., 3.]).unwrap());
        let (g, b) = affine(&tape, 1, 1.0, 0.0);
        let mut st = BatchNormState::new(1);
        let y = x
            .batch_norm(&g, &b, &mut st, NormMode::Eval)
            .unwrap()
            .value();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (got, want) in y.to_f64_vec().iter().zip([1.0 * s, 2.0 * s, 3.0 * s]) {
            assert!((got - want).abs() < 1e-15);
        }
    }
}
