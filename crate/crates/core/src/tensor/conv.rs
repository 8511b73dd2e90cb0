use super::{dot, gemm, Float, Mat, Result, Tensor, TensorError, Var};

/// Geometry of a 2-D cross-correlation over `B x C x H x W` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// Zero padding as (top, bottom, left, right).
    pub padding: (usize, usize, usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0, 0, 0),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// Symmetric padding `(ph, pw)` with the given stride.
    pub fn padded(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Conv2dSpec {
            stride,
            padding: (padding.0, padding.0, padding.1, padding.1),
            ..Default::default()
        }
    }

    /// Left-only padding of `(kernel - 1) * dilation` along the width axis,
    /// so output column `s` sees inputs `s, s - d, ..., s - (k-1) d`.
    pub fn causal(kernel: usize, dilation: usize, groups: usize) -> Self {
        Conv2dSpec {
            dilation: (1, dilation),
            padding: (0, 0, (kernel.saturating_sub(1)) * dilation, 0),
            groups,
            ..Default::default()
        }
    }

    pub fn output_extent(
        &self,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    ) -> Result<(usize, usize)> {
        let span_h = self.dilation.0 * (kh.max(1) - 1) + 1;
        let span_w = self.dilation.1 * (kw.max(1) - 1) + 1;
        let ph = h + self.padding.0 + self.padding.1;
        let pw = w + self.padding.2 + self.padding.3;
        if kh == 0
            || kw == 0
            || self.stride.0 == 0
            || self.stride.1 == 0
            || ph < span_h
            || pw < span_w
        {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "non-positive output extent: input {h}x{w}, kernel {kh}x{kw}, {:?}",
                    self
                ),
            ));
        }
        Ok((
            (ph - span_h) / self.stride.0 + 1,
            (pw - span_w) / self.stride.1 + 1,
        ))
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn cg(&self) -> usize {
        self.cin / self.spec.groups
    }
    fn coutg(&self) -> usize {
        self.cout / self.spec.groups
    }
    fn kc(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn n(&self) -> usize {
        self.batch * self.p()
    }

    /// Output columns `[lo, hi)` whose unit-stride tap at offset `tap`
    /// lands inside the input row.
    fn valid_cols(&self, tap: usize, pl: usize) -> (usize, usize) {
        let lo = pl.saturating_sub(tap).min(self.ow);
        let hi = (self.w + pl).saturating_sub(tap).min(self.ow).max(lo);
        (lo, hi)
    }

    /// Fills the `kc x n` column matrix for group `g`.
    fn im2col<F: Float>(&self, x: &[F], g: usize, col: &mut [F]) {
        let (n, p) = (self.n(), self.p());
        let (sh, sw) = self.spec.stride;
        let (dh, dw) = self.spec.dilation;
        let (pt, _, pl, _) = self.spec.padding;
        for c in 0..self.cg() {
            let chan = g * self.cg() + c;
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for b in 0..self.batch {
                        let plane =
                            &x[(b * self.cin + chan) * self.h * self.w..][..self.h * self.w];
                        for oh in 0..self.oh {
                            let seg = &mut dst[b * p + oh * self.ow..][..self.ow];
                            let ih = (oh * sh + i * dh) as isize - pt as isize;
                            if ih < 0 || ih >= self.h as isize {
                                seg.fill(F::zero());
                                continue;
                            }
                            let src = &plane[ih as usize * self.w..][..self.w];
                            if sw == 1 {
                                let (lo, hi) = self.valid_cols(j * dw, pl);
                                seg[..lo].fill(F::zero());
                                seg[hi..].fill(F::zero());
                                let off = lo + j * dw - pl;
                                seg[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                                continue;
                            }
                            for (ow, v) in seg.iter_mut().enumerate() {
                                let iw = (ow * sw + j * dw) as isize - pl as isize;
                                *v = if iw < 0 || iw >= self.w as isize {
                                    F::zero()
                                } else {
                                    src[iw as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a `kc x n` column gradient of group `g` into `dx`.
    fn col2im<F: Float>(&self, dcol: &[F], g: usize, dx: &mut [F]) {
        let (n, p) = (self.n(), self.p());
        let (sh, sw) = self.spec.stride;
        let (dh, dw) = self.spec.dilation;
        let (pt, _, pl, _) = self.spec.padding;
        for c in 0..self.cg() {
            let chan = g * self.cg() + c;
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &dcol[row * n..(row + 1) * n];
                    for b in 0..self.batch {
                        let base = (b * self.cin + chan) * self.h * self.w;
                        for oh in 0..self.oh {
                            let ih = (oh * sh + i * dh) as isize - pt as isize;
                            if ih < 0 || ih >= self.h as isize {
                                continue;
                            }
                            let seg = &src[b * p + oh * self.ow..][..self.ow];
                            let dst = &mut dx[base + ih as usize * self.w..][..self.w];
                            if sw == 1 {
                                let (lo, hi) = self.valid_cols(j * dw, pl);
                                let off = lo + j * dw - pl;
                                for (d, &v) in dst[off..off + hi - lo].iter_mut().zip(&seg[lo..hi])
                                {
                                    *d += v;
                                }
                                continue;
                            }
                            for (ow, &v) in seg.iter().enumerate() {
                                let iw = (ow * sw + j * dw) as isize - pl as isize;
                                if iw >= 0 && iw < self.w as isize {
                                    dst[iw as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, F: Float> Var<'t, F> {
    /// 2-D cross-correlation. `self` is `B x C_in x H x W`, `weight` is
    /// `C_out x (C_in / groups) x kh x kw`, `bias` has `C_out` entries.
    pub fn conv2d(
        &self,
        weight: &Var<'t, F>,
        bias: Option<&Var<'t, F>>,
        spec: Conv2dSpec,
    ) -> Result<Var<'t, F>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 {
            return Err(mismatch());
        }
        let groups = spec.groups;
        if groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "groups {groups} must divide input channels {} and output channels {}",
                    xs[1], ws[0]
                ),
            ));
        }
        if ws[1] * groups != xs[1] {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![ws[0]],
                    rhs: b.shape(),
                });
            }
        }
        let (oh, ow) = spec.output_extent(xs[2], xs[3], ws[2], ws[3])?;
        let geo = Geometry {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            spec,
        };
        let (kc, n, p, coutg) = (geo.kc(), geo.n(), geo.p(), geo.coutg());

        let mut cols = vec![F::zero(); groups * kc * n];
        let mut tmp = vec![F::zero(); coutg * n];
        let mut y = vec![F::zero(); geo.batch * geo.cout * p];
        let bias_value = bias.map(|b| b.value());
        for g in 0..groups {
            let col = &mut cols[g * kc * n..(g + 1) * kc * n];
            geo.im2col(x.data(), g, col);
            gemm(
                F::one(),
                &w.data()[g * coutg * kc..],
                Mat::row_major(coutg, kc),
                col,
                Mat::row_major(kc, n),
                F::zero(),
                &mut tmp,
                Mat::row_major(coutg, n),
            );
            for o in 0..coutg {
                let oc = g * coutg + o;
                let bv = bias_value.as_ref().map_or(F::zero(), |b| b.data()[oc]);
                for b in 0..geo.batch {
                    let src = &tmp[o * n + b * p..][..p];
                    let dst = &mut y[(b * geo.cout + oc) * p..][..p];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![geo.batch, geo.cout, oh, ow], y)?;
        let mut inputs = vec![*self, *weight];
        if let Some(b) = bias {
            inputs.push(*b);
        }
        let has_bias = bias.is_some();
        Ok(self.tape.push(out, &inputs, move |dy, need| {
            let dyd = dy.data();
            let mut dyg = vec![F::zero(); coutg * n];
            let mut dx = need[0].then(|| vec![F::zero(); geo.batch * geo.cin * geo.h * geo.w]);
            let mut dw = need[1].then(|| vec![F::zero(); geo.cout * kc]);
            let mut dcol = if need[0] {
                vec![F::zero(); kc * n]
            } else {
                Vec::new()
            };
            for g in 0..groups {
                for o in 0..coutg {
                    let oc = g * coutg + o;
                    for b in 0..geo.batch {
                        dyg[o * n + b * p..][..p]
                            .copy_from_slice(&dyd[(b * geo.cout + oc) * p..][..p]);
                    }
                }
                let col = &cols[g * kc * n..(g + 1) * kc * n];
                if let Some(dw) = dw.as_mut() {
                    if n >= 64 * coutg.max(kc) {
                        // long and thin: row dot products beat a packed gemm
                        for o in 0..coutg {
                            let dy_row = &dyg[o * n..(o + 1) * n];
                            for r in 0..kc {
                                dw[(g * coutg + o) * kc + r] =
                                    dot(dy_row, &col[r * n..(r + 1) * n]);
                            }
                        }
                    } else {
                        gemm(
                            F::one(),
                            &dyg,
                            Mat::row_major(coutg, n),
                            col,
                            Mat::row_major(kc, n).t(),
                            F::zero(),
                            &mut dw[g * coutg * kc..],
                            Mat::row_major(coutg, kc),
                        );
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        F::one(),
                        &w.data()[g * coutg * kc..],
                        Mat::row_major(coutg, kc).t(),
                        &dyg,
                        Mat::row_major(coutg, n),
                        F::zero(),
                        &mut dcol,
                        Mat::row_major(kc, n),
                    );
                    geo.col2im(&dcol, g, dx);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(vec![geo.batch, geo.cin, geo.h, geo.w], d).expect("dx")),
                dw.map(|d| Tensor::new(vec![geo.cout, geo.cg(), geo.kh, geo.kw], d).expect("dw")),
            ];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut db = vec![0f64; geo.cout];
                    for b in 0..geo.batch {
                        for (oc, acc) in db.iter_mut().enumerate() {
                            *acc += dyd[(b * geo.cout + oc) * p..][..p]
                                .iter()
                                .map(|v| v.f64())
                                .sum::<f64>();
                        }
                    }
                    Tensor::new(vec![geo.cout], db.into_iter().map(F::of).collect()).expect("db")
                }));
            }
            grads
        }))
    }

    /// Dilated causal 1-D convolution over `B x C_in x T`; `weight` is
    /// `C_out x (C_in / groups) x k`. Output length equals `T`.
    pub fn conv1d_causal(
        &self,
        weight: &Var<'t, F>,
        bias: Option<&Var<'t, F>>,
        dilation: usize,
        groups: usize,
    ) -> Result<Var<'t, F>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_causal",
                lhs: xs,
                rhs: ws,
            });
        }
        if dilation == 0 {
            return Err(TensorError::invalid(
                "conv1d_causal",
                "dilation must be >= 1",
            ));
        }
        let x4 = self.reshape(&[xs[0], xs[1], 1, xs[2]])?;
        // tap i weighs x[s - d*i], i.e. the kernel reversed relative to
        // cross-correlation over the left-padded sequence
        let reversed: Vec<usize> = (0..ws[2]).rev().collect();
        let w4 = weight
            .index_select(2, &reversed)?
            .reshape(&[ws[0], ws[1], 1, ws[2]])?;
        let y = x4.conv2d(&w4, bias, Conv2dSpec::causal(ws[2], dilation, groups))?;
        y.reshape(&[xs[0], ws[0], xs[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn seq<'a>(tape: &'a Tape<f64>, v: &[f64]) -> Var<'a, f64> {
        tape.constant(Tensor::from_f64(vec![1, 1, v.len()], v).unwrap())
    }

    fn kernel<'a>(tape: &'a Tape<f64>, v: &[f64]) -> Var<'a, f64> {
        tape.constant(Tensor::from_f64(vec![1, 1, v.len()], v).unwrap())
    }

    #[test]
    fn causal_hand_examples() {
        let tape = Tape::<f64>::new();
        let x = seq(&tape, &[1., 2., 3., 4.]);
        let w = kernel(&tape, &[1., 1.]);
        let y = x.conv1d_causal(&w, None, 1, 1).unwrap();
        assert_eq!(y.value().to_f64_vec(), vec![1., 3., 5., 7.]);
        let y = x.conv1d_causal(&w, None, 2, 1).unwrap();
        assert_eq!(y.value().to_f64_vec(), vec![1., 2., 4., 6.]);
        for d in 1..5 {
            let id = kernel(&tape, &[1., 0.]);
            let y = x.conv1d_causal(&id, None, d, 1).unwrap();
            assert_eq!(y.value().to_f64_vec(), vec![1., 2., 3., 4.]);
        }
    }

    #[test]
    fn causal_rejects_bad_groups_and_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 6, 5]));
        let w = tape.constant(Tensor::zeros(vec![4, 3, 2]));
        let err = x.conv1d_causal(&w, None, 1, 4).unwrap_err();
        assert!(err.to_string().contains("groups"), "{err}");
        let w = tape.constant(Tensor::zeros(vec![4, 5, 2]));
        assert!(matches!(
            x.conv1d_causal(&w, None, 1, 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv2d_hand_examples() {
        let tape = Tape::<f64>::new();
        let row = tape.constant(Tensor::from_f64(vec![1, 1, 1, 3], &[1., 2., 3.]).unwrap());
        let k = tape.constant(Tensor::from_f64(vec![1, 1, 1, 3], &[1., 1., 1.]).unwrap());
        let y = row
            .conv2d(&k, None, Conv2dSpec::padded((1, 1), (0, 1)))
            .unwrap();
        assert_eq!(y.value().to_f64_vec(), vec![3., 6., 5.]);
        let id = tape.constant(Tensor::from_f64(vec![1, 1, 1, 3], &[0., 1., 0.]).unwrap());
        let y = row
            .conv2d(&id, None, Conv2dSpec::padded((1, 1), (0, 1)))
            .unwrap();
        assert_eq!(y.value().to_f64_vec(), vec![1., 2., 3.]);
    }

    #[test]
    fn conv2d_stride_halves_width() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 8, 20, 240]));
        let w = tape.constant(Tensor::zeros(vec![8, 8, 1, 1]));
        let y = x
            .conv2d(&w, None, Conv2dSpec::padded((1, 2), (0, 0)))
            .unwrap();
        assert_eq!(y.shape(), vec![1, 8, 20, 120]);
    }

    #[test]
    fn conv2d_rejects_empty_output() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 1, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 1, 3]));
        let err = x.conv2d(&w, None, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("non-positive"), "{err}");
    }

    #[test]
    fn grouped_conv_matches_direct_loop() {
        // direct nested-loop reference, independent of im2col
        let (b, cin, h, w, cout, kh, kw, groups) = (2, 4, 3, 5, 6, 2, 3, 2);
        let spec = Conv2dSpec {
            stride: (1, 2),
            dilation: (2, 1),
            padding: (1, 0, 2, 1),
            groups,
        };
        let xs: Vec<f64> = (0..b * cin * h * w)
            .map(|i| ((i * 7 % 11) as f64) - 5.0)
            .collect();
        let ws: Vec<f64> = (0..cout * (cin / groups) * kh * kw)
            .map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6)
            .collect();
        let bias: Vec<f64> = (0..cout).map(|i| i as f64 * 0.25).collect();
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![b, cin, h, w], &xs).unwrap());
        let wt = tape.constant(Tensor::from_f64(vec![cout, cin / groups, kh, kw], &ws).unwrap());
        let bt = tape.constant(Tensor::from_f64(vec![cout], &bias).unwrap());
        let y = x.conv2d(&wt, Some(&bt), spec).unwrap();
        let (oh, ow) = spec.output_extent(h, w, kh, kw).unwrap();
        assert_eq!(y.shape(), vec![b, cout, oh, ow]);
        let got = y.value().to_f64_vec();
        let (cg, coutg) = (cin / groups, cout / groups);
        for bi in 0..b {
            for oc in 0..cout {
                let g = oc / coutg;
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = bias[oc];
                        for ci in 0..cg {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (r * 1 + i * 2) as isize - 1;
                                    let iw = (c * 2 + j) as isize - 2;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let xv = xs[((bi * cin + g * cg + ci) * h + ih as usize) * w
                                        + iw as usize];
                                    let wv = ws[((oc * cg + ci) * kh + i) * kw + j];
                                    acc += xv * wv;
                                }
                            }
                        }
                        let k = ((bi * cout + oc) * oh + r) * ow + c;
                        assert!((got[k] - acc).abs() < 1e-12, "mismatch at {k}");
                    }
                }
            }
        }
    }
}
