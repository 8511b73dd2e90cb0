use std::rc::Rc;

use super::{gemm, strides, Float, Mat, Result, Tensor, TensorError, Var};

fn same_shape<F: Float>(op: &'static str, a: &Var<'_, F>, b: &Var<'_, F>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(())
}

fn axis_check(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

/// (outer, axis length, inner) decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline(always)]
fn sigmoid_f<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp_fast())
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth-L1 penalty: quadratic below `beta`, linear above.
pub fn smooth_l1_value(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_slope(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

pub(crate) fn permute_tensor<F: Float>(x: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Tensor::new(out_shape, out).expect("permute shape");
    }
    let nd = out_shape.len();
    if nd == 0 {
        return x.clone();
    }
    let src = x.data();
    let last = nd - 1;
    let (len_last, stride_last) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..len_last {
            out.push(src[base + j * stride_last]);
        }
        // odometer over the leading axes
        let mut d = last;
        loop {
            if d == 0 {
                return Tensor::new(out_shape, out).expect("permute shape");
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn matmul_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(usize, usize, usize, usize, bool)> {
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    if b.len() == 2 {
        let rows: usize = a[..a.len() - 1].iter().product();
        return Ok((1, rows, k, n, true));
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(mismatch());
    }
    let batch = a[..a.len() - 2].iter().product();
    Ok((batch, m, k, n, false))
}

impl<'t, F: Float> Var<'t, F> {
    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        same_shape("add", self, other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.tape.push(out, &[*self, *other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        same_shape("sub", self, other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(self.tape.push(out, &[*self, *other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        same_shape("mul", self, other)?;
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.push(out, &[*self, *other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gi, y| gi * y)),
                need[1].then(|| g.zip_map(&a, |gi, x| gi * x)),
            ]
        }))
    }

    pub fn scale(&self, s: f64) -> Var<'t, F> {
        let s = F::of(s);
        let out = self.value().map(|x| x * s);
        self.tape
            .push(out, &[*self], move |g, _| vec![Some(g.map(|x| x * s))])
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        let y = Rc::new(self.value().map(|x| F::of(sigmoid64(x.f64()))));
        let saved = Rc::clone(&y);
        self.tape.push((*y).clone(), &[*self], move |g, _| {
            vec![Some(g.zip_map(&saved, |gi, s| gi * s * (F::one() - s)))]
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Var<'t, F> {
        let x = self.value();
        let sig = x.map(sigmoid_f);
        let out = x.zip_map(&sig, |v, s| v * s);
        self.tape.push(out, &[*self], move |g, _| {
            let mut d = g.zip_map(&x, |gi, v| gi * v);
            for ((di, &gi), &s) in d.data_mut().iter_mut().zip(g.data()).zip(sig.data()) {
                // d/dx x s(x) = s + x s (1 - s)
                *di = gi * s + *di * s * (F::one() - s);
            }
            vec![Some(d)]
        })
    }

    pub fn smooth_l1(&self, beta: f64) -> Var<'t, F> {
        let x = self.value();
        let out = x.map(|v| F::of(smooth_l1_value(v.f64(), beta)));
        self.tape.push(out, &[*self], move |g, _| {
            vec![Some(g.zip_map(&x, |gi, v| {
                gi * F::of(smooth_l1_slope(v.f64(), beta))
            }))]
        })
    }

    /// Softmax along `axis`, evaluated in 64-bit.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        axis_check("softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let src = x.data();
        let mut y = vec![F::zero(); x.len()];
        let mut buf = vec![F::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| src[base + j * inner])
                    .fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = (src[base + j * inner] - max).exp_fast();
                    total = total + *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    y[base + j * inner] = *b / total;
                }
            }
        }
        let y = Rc::new(Tensor::new(x.shape().to_vec(), y)?);
        let saved = Rc::clone(&y);
        Ok(self.tape.push((*y).clone(), &[*self], move |g, _| {
            let (yd, gd) = (saved.data(), g.data());
            let mut dx = vec![F::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot = F::of(
                        (0..len)
                            .map(|j| gd[base + j * inner].f64() * yd[base + j * inner].f64())
                            .sum::<f64>(),
                    );
                    for j in 0..len {
                        let k = base + j * inner;
                        dx[k] = yd[k] * (gd[k] - dot);
                    }
                }
            }
            vec![Some(
                Tensor::new(saved.shape().to_vec(), dx).expect("softmax grad"),
            )]
        }))
    }

    pub fn sum(&self) -> Var<'t, F> {
        let x = self.value();
        let total: f64 = x.data().iter().map(|v| v.f64()).sum();
        let shape = x.shape().to_vec();
        self.tape
            .push(Tensor::scalar(F::of(total)), &[*self], move |g, _| {
                vec![Some(Tensor::full(shape.clone(), g.item()))]
            })
    }

    pub fn mean(&self) -> Var<'t, F> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Arithmetic mean over the last axis, keeping it as an extent-1 axis.
    pub fn mean_last(&self) -> Result<Var<'t, F>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("mean_last", "rank-0 input"))?;
        if len == 0 {
            return Err(TensorError::invalid("mean_last", "last axis has length 0"));
        }
        let rows = x.len() / len;
        let out: Vec<F> = x
            .data()
            .chunks(len)
            .map(|r| F::of(r.iter().map(|v| v.f64()).sum::<f64>() / len as f64))
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = 1;
        let inv = F::of(1.0 / len as f64);
        Ok(self
            .tape
            .push(Tensor::new(out_shape, out)?, &[*self], move |g, _| {
                let mut dx = Vec::with_capacity(rows * len);
                for &gi in g.data() {
                    dx.extend(std::iter::repeat(gi * inv).take(len));
                }
                vec![Some(
                    Tensor::new(shape.clone(), dx).expect("mean_last grad"),
                )]
            }))
    }

    /// Euclidean norm over the last axis (dropped from the shape). The
    /// gradient at a zero vector is taken as zero.
    pub fn norm_last(&self) -> Result<Var<'t, F>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("norm_last", "rank-0 input"))?;
        if len == 0 {
            return Err(TensorError::invalid("norm_last", "last axis has length 0"));
        }
        let norms: Vec<f64> = x
            .data()
            .chunks(len)
            .map(|r| r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(
            shape[..shape.len() - 1].to_vec(),
            norms.iter().map(|&v| F::of(v)).collect(),
        )?;
        Ok(self.tape.push(out, &[*self], move |g, _| {
            let mut dx = Vec::with_capacity(x.len());
            for ((r, &n), &gi) in x.data().chunks(len).zip(&norms).zip(g.data()) {
                for &v in r {
                    dx.push(if n > 0.0 {
                        F::of(gi.f64() * v.f64() / n)
                    } else {
                        F::zero()
                    });
                }
            }
            vec![Some(Tensor::new(shape.clone(), dx).expect("norm grad"))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshaped(shape.to_vec())?;
        Ok(self.tape.push(out, &[*self], move |g, _| {
            vec![Some(g.clone().reshaped(old.clone()).expect("reshape grad"))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let nd = x.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd
            || axes
                .iter()
                .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!(
                    "{axes:?} is not a permutation of {nd} axes for shape {:?}",
                    x.shape()
                ),
            ));
        }
        let mut inverse = vec![0; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = permute_tensor(&x, axes);
        Ok(self.tape.push(out, &[*self], move |g, _| {
            vec![Some(permute_tensor(g, &inverse))]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t, F>> {
        let nd = self.shape().len();
        axis_check("transpose", &self.shape(), a.max(b))?;
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Gathers entries along `axis`; indices may repeat.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        axis_check("index_select", &shape, axis)?;
        let (outer, len, inner) = split_at_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::invalid(
                "index_select",
                format!("index {bad} out of range for axis of length {len}"),
            ));
        }
        let indices = indices.to_vec();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in &indices {
                let start = (o * len + i) * inner;
                out.extend_from_slice(&x.data()[start..start + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        Ok(self
            .tape
            .push(Tensor::new(out_shape, out)?, &[*self], move |g, _| {
                let mut dx = vec![F::zero(); outer * len * inner];
                let gd = g.data();
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let src = (o * indices.len() + k) * inner;
                        let dst = (o * len + i) * inner;
                        for j in 0..inner {
                            dx[dst + j] += gd[src + j];
                        }
                    }
                }
                vec![Some(
                    Tensor::new(shape.clone(), dx).expect("index_select grad"),
                )]
            }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = first.shape();
        axis_check("concat", &base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s,
                });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let tape = first.tape;
        Ok(
            tape.push(Tensor::new(out_shape, out)?, parts, move |g, need| {
                let gd = g.data();
                let mut offset = 0;
                lens.iter()
                    .zip(need)
                    .map(|(&l, &n)| {
                        let start = offset;
                        offset += l;
                        n.then(|| {
                            let mut d = Vec::with_capacity(outer * l * inner);
                            for o in 0..outer {
                                let s = (o * total + start) * inner;
                                d.extend_from_slice(&gd[s..s + l * inner]);
                            }
                            let mut shape = base.clone();
                            shape[axis] = l;
                            Tensor::new(shape, d).expect("concat grad")
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Matrix product over the last two axes. `other` is either batched
    /// with identical leading axes, or a plain matrix shared by every
    /// leading index of `self`.
    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, n, shared) = matmul_dims("matmul", a.shape(), b.shape())?;
        let mut out_shape = a.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            let bs = if shared { 0 } else { i * k * n };
            gemm(
                F::one(),
                &a.data()[i * m * k..],
                Mat::row_major(m, k),
                &b.data()[bs..],
                Mat::row_major(k, n),
                F::zero(),
                &mut out[i * m * n..],
                Mat::row_major(m, n),
            );
        }
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.push(
            Tensor::new(out_shape, out)?,
            &[*self, *other],
            move |g, need| {
                let gd = g.data();
                let da = need[0].then(|| {
                    let mut da = vec![F::zero(); batch * m * k];
                    for i in 0..batch {
                        let bs = if shared { 0 } else { i * k * n };
                        gemm(
                            F::one(),
                            &gd[i * m * n..],
                            Mat::row_major(m, n),
                            &b.data()[bs..],
                            Mat::row_major(k, n).t(),
                            F::zero(),
                            &mut da[i * m * k..],
                            Mat::row_major(m, k),
                        );
                    }
                    Tensor::new(a_shape.clone(), da).expect("matmul grad")
                });
                let db = need[1].then(|| {
                    let mut db = vec![F::zero(); if shared { k * n } else { batch * k * n }];
                    for i in 0..batch {
                        let (bs, beta) = if shared {
                            (0, if i == 0 { F::zero() } else { F::one() })
                        } else {
                            (i * k * n, F::zero())
                        };
                        gemm(
                            F::one(),
                            &a.data()[i * m * k..],
                            Mat::row_major(m, k).t(),
                            &gd[i * m * n..],
                            Mat::row_major(m, n),
                            beta,
                            &mut db[bs..],
                            Mat::row_major(k, n),
                        );
                    }
                    Tensor::new(b_shape.clone(), db).expect("matmul grad")
                });
                vec![da, db]
            },
        ))
    }
}
