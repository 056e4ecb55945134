//! A small reverse-mode tape over [`Array`] values.
//!
//! Every op pushes its output value onto the tape. A backward closure is only
//! stored when at least one input requires a gradient, so inference passes
//! built from constant leaves cost nothing beyond the forward arithmetic.

use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_rows, Array, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[Array], &Array, &mut Sink<'_>)>;

/// Gradient accumulator handed to backward closures.
pub struct Sink<'a> {
    grads: &'a mut [Option<Array>],
    needs: &'a [bool],
}

impl Sink<'_> {
    #[inline]
    fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn buf(&mut self, v: Var, like: &Array) -> &mut [f64] {
        self.grads[v.0]
            .get_or_insert_with(|| Array::zeros(like.shape()))
            .data_mut()
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Array>,
    needs: Vec<bool>,
    backs: Vec<Option<BackFn>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    slots: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn push(&mut self, value: Array, inputs: &[Var], back: impl Fn(&[Array], &Array, &mut Sink<'_>) + 'static) -> Var {
        let needs = inputs.iter().any(|v| self.needs[v.0]);
        self.values.push(value);
        self.needs.push(needs);
        self.backs.push(if needs { Some(Box::new(back)) } else { None });
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.values.push(value);
        self.needs.push(requires_grad);
        self.backs.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.values[out.0].len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut slots: Vec<Option<Array>> = (0..self.values.len()).map(|_| None).collect();
        slots[out.0] = Some(Array::full(self.values[out.0].shape(), 1.0));
        for i in (0..=out.0).rev() {
            let Some(back) = &self.backs[i] else { continue };
            let Some(g) = slots[i].take() else { continue };
            let mut sink = Sink {
                grads: &mut slots,
                needs: &self.needs,
            };
            back(&self.values, &g, &mut sink);
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }

    // ---------------------------------------------------------------
    // elementwise
    // ---------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push(v, &[a, b], move |vals, g, s| {
            for x in [a, b] {
                if s.wants(x) {
                    for (d, gi) in s.buf(x, &vals[x.0]).iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.values[a.0].sub(&self.values[b.0])?;
        Ok(self.push(v, &[a, b], move |vals, g, s| {
            if s.wants(a) {
                for (d, gi) in s.buf(a, &vals[a.0]).iter_mut().zip(g.data()) {
                    *d += gi;
                }
            }
            if s.wants(b) {
                for (d, gi) in s.buf(b, &vals[b.0]).iter_mut().zip(g.data()) {
                    *d -= gi;
                }
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        x.ensure_same_shape(y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Array::new(x.shape(), data)?;
        Ok(self.push(v, &[a, b], move |vals, g, s| {
            if s.wants(a) {
                let other = vals[b.0].data();
                for ((d, gi), o) in s.buf(a, &vals[a.0]).iter_mut().zip(g.data()).zip(other) {
                    *d += gi * o;
                }
            }
            if s.wants(b) {
                let other = vals[a.0].data();
                for ((d, gi), o) in s.buf(b, &vals[b.0]).iter_mut().zip(g.data()).zip(other) {
                    *d += gi * o;
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.values[a.0].scale(k);
        self.push(v, &[a], move |vals, g, s| {
            for (d, gi) in s.buf(a, &vals[a.0]).iter_mut().zip(g.data()) {
                *d += k * gi;
            }
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(|x| x / (1.0 + (-x).exp()));
        self.push(v, &[a], move |vals, g, s| {
            let x = &vals[a.0];
            for ((d, gi), &xi) in s.buf(a, x).iter_mut().zip(g.data()).zip(x.data()) {
                let sig = 1.0 / (1.0 + (-xi).exp());
                *d += gi * sig * (1.0 + xi * (1.0 - sig));
            }
        })
    }

    /// Mean squared error between two equally shaped values, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        x.ensure_same_shape(y, "mse")?;
        let n = x.len() as f64;
        let loss: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / n;
        Ok(self.push(Array::scalar(loss), &[a, b], move |vals, g, s| {
            let k = 2.0 * g.data()[0] / n;
            let (x, y) = (&vals[a.0], &vals[b.0]);
            if s.wants(a) {
                for ((d, p), q) in s.buf(a, x).iter_mut().zip(x.data()).zip(y.data()) {
                    *d += k * (p - q);
                }
            }
            if s.wants(b) {
                for ((d, p), q) in s.buf(b, y).iter_mut().zip(x.data()).zip(y.data()) {
                    *d -= k * (p - q);
                }
            }
        }))
    }

    // ---------------------------------------------------------------
    // shape
    // ---------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.values[a.0].clone().reshape(shape)?;
        Ok(self.push(v, &[a], move |vals, g, s| {
            for (d, gi) in s.buf(a, &vals[a.0]).iter_mut().zip(g.data()) {
                *d += gi;
            }
        }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = self.values[a.0].permute(perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push(v, &[a], move |vals, g, s| {
            let back = g.permute(&inverse);
            for (d, gi) in s.buf(a, &vals[a.0]).iter_mut().zip(back.data()) {
                *d += gi;
            }
        })
    }

    /// For `x: [F, N, D]`, builds `[F, 2N, D]` whose frame `f` is
    /// `x[first[f]]` followed by `x[second[f]]`.
    pub fn pair_frames(&mut self, x: Var, first: Vec<usize>, second: Vec<usize>) -> Result<Var> {
        let xv = &self.values[x.0];
        let [f, n, d] = xv.shape() else {
            return Err(Error::Shape(format!("pair_frames expects rank 3, got {:?}", xv.shape())));
        };
        let (f, n, d) = (*f, *n, *d);
        if first.len() != f || second.len() != f || first.iter().chain(&second).any(|&i| i >= f) {
            return Err(Error::Shape("pair_frames index out of range".into()));
        }
        let block = n * d;
        let mut out = Vec::with_capacity(2 * f * block);
        for i in 0..f {
            out.extend_from_slice(&xv.data()[first[i] * block..(first[i] + 1) * block]);
            out.extend_from_slice(&xv.data()[second[i] * block..(second[i] + 1) * block]);
        }
        let v = Array::new(&[f, 2 * n, d], out)?;
        Ok(self.push(v, &[x], move |vals, g, s| {
            let buf = s.buf(x, &vals[x.0]);
            for i in 0..f {
                let gsrc = &g.data()[2 * i * block..(2 * i + 2) * block];
                for (k, src) in [first[i], second[i]].into_iter().enumerate() {
                    for (dst, gi) in buf[src * block..(src + 1) * block]
                        .iter_mut()
                        .zip(&gsrc[k * block..(k + 1) * block])
                    {
                        *dst += gi;
                    }
                }
            }
        }))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        let [n, c, h, w] = xv.shape() else {
            return Err(Error::Shape("upsample2x expects NCHW".into()));
        };
        let (nc, h, w) = (n * c, *h, *w);
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let shape = [*n, *c, 2 * h, 2 * w];
        let v = Array::new(&shape, out)?;
        Ok(self.push(v, &[x], move |vals, g, s| {
            let buf = s.buf(x, &vals[x.0]);
            for p in 0..nc {
                let gsrc = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                let dst = &mut buf[p * h * w..(p + 1) * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += gsrc[y * 2 * w + xx];
                    }
                }
            }
        }))
    }

    // ---------------------------------------------------------------
    // linear algebra
    // ---------------------------------------------------------------

    /// `[.., K] · [K, N] -> [.., N]`; all leading axes are flattened into rows.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (&self.values[a.0], &self.values[w.0]);
        let [kw, n] = wv.shape() else {
            return Err(Error::Shape("matmul weight must be rank 2".into()));
        };
        let (kw, n) = (*kw, *n);
        let k = *av.shape().last().unwrap_or(&0);
        if k != kw {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", av.shape(), wv.shape())));
        }
        let m = av.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), Mat::rows(0, k), wv.data(), Mat::rows(0, n), 0.0, &mut out, Mat::rows(0, n));
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Array::new(&shape, out)?;
        Ok(self.push(v, &[a, w], move |vals, g, s| {
            if s.wants(a) {
                let wv = vals[w.0].data();
                let buf = s.buf(a, &vals[a.0]);
                gemm(m, n, k, 1.0, g.data(), Mat::rows(0, n), wv, Mat::t(0, n), 1.0, buf, Mat::rows(0, k));
            }
            if s.wants(w) {
                let av = vals[a.0].data();
                let buf = s.buf(w, &vals[w.0]);
                gemm(k, m, n, 1.0, av, Mat::t(0, k), g.data(), Mat::rows(0, n), 1.0, buf, Mat::rows(0, n));
            }
        }))
    }

    /// Adds `b: [D]` to every row of `x: [.., D]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.values[x.0], &self.values[b.0]);
        let d = bv.len();
        if xv.shape().last() != Some(&d) {
            return Err(Error::Shape(format!("add_bias {:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bi) in row.iter_mut().zip(bv.data()) {
                *o += bi;
            }
        }
        Ok(self.push(out, &[x, b], move |vals, g, s| {
            if s.wants(x) {
                for (dst, gi) in s.buf(x, &vals[x.0]).iter_mut().zip(g.data()) {
                    *dst += gi;
                }
            }
            if s.wants(b) {
                let buf = s.buf(b, &vals[b.0]);
                for row in g.data().chunks(d) {
                    for (dst, gi) in buf.iter_mut().zip(row) {
                        *dst += gi;
                    }
                }
            }
        }))
    }

    /// Adds a per-sample channel vector `v: [N or 1, C]` to `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (&self.values[x.0], &self.values[v.0]);
        let [n, c, h, w] = xv.shape() else {
            return Err(Error::Shape("add_channel expects NCHW".into()));
        };
        let (n, c, hw) = (*n, *c, h * w);
        let [vn, vc] = vv.shape() else {
            return Err(Error::Shape("add_channel vector must be rank 2".into()));
        };
        if *vc != c || (*vn != n && *vn != 1) {
            return Err(Error::Shape(format!("add_channel {:?} + {:?}", xv.shape(), vv.shape())));
        }
        let broadcast = *vn == 1;
        let mut out = xv.clone();
        for i in 0..n {
            let vi = if broadcast { 0 } else { i };
            for ch in 0..c {
                let add = vv.data()[vi * c + ch];
                for o in &mut out.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *o += add;
                }
            }
        }
        Ok(self.push(out, &[x, v], move |vals, g, s| {
            if s.wants(x) {
                for (dst, gi) in s.buf(x, &vals[x.0]).iter_mut().zip(g.data()) {
                    *dst += gi;
                }
            }
            if s.wants(v) {
                let buf = s.buf(v, &vals[v.0]);
                for i in 0..n {
                    let vi = if broadcast { 0 } else { i };
                    for ch in 0..c {
                        let sum: f64 = g.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum();
                        buf[vi * c + ch] += sum;
                    }
                }
            }
        }))
    }

    /// Parameter-free layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.values[x.0];
        let d = *xv.shape().last().unwrap();
        let rows = xv.len() / d;
        let mut out = xv.clone();
        let mut inv_std = vec![0.0; rows];
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
        }
        let y = self.values.len();
        self.push(out, &[x], move |vals, g, s| {
            let yv = vals[y].data();
            let buf = s.buf(x, &vals[x.0]);
            for r in 0..rows {
                let gy = &g.data()[r * d..(r + 1) * d];
                let yr = &yv[r * d..(r + 1) * d];
                let mg = gy.iter().sum::<f64>() / d as f64;
                let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    buf[r * d + j] += inv_std[r] * (gy[j] - mg - yr[j] * mgy);
                }
            }
        })
    }

    /// Rows of `table: [V, D]` selected by `ids`, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.values[table.0];
        let [vocab, d] = tv.shape() else {
            return Err(Error::Shape("embedding table must be rank 2".into()));
        };
        let (vocab, d) = (*vocab, *d);
        if ids.iter().any(|&i| i >= vocab) {
            return Err(Error::Shape("token id out of range".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let v = Array::new(&[ids.len(), d], out)?;
        let ids = ids.to_vec();
        Ok(self.push(v, &[table], move |vals, g, s| {
            let buf = s.buf(table, &vals[table.0]);
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    buf[i * d + j] += g.data()[r * d + j];
                }
            }
        }))
    }

    /// 3x3 convolution with zero padding 1 over `x: [N, Ci, H, W]`.
    ///
    /// The kernel may be `[Co, Ci, 3, 3]` or the inflated `[Co, Ci, 1, 3, 3]`;
    /// a temporal extent of one means every frame is convolved on its own.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        let [n, ci, h, wd] = xv.shape() else {
            return Err(Error::Shape("conv expects NCHW input".into()));
        };
        let (n, ci, h, wd) = (*n, *ci, *h, *wd);
        let co = match wv.shape() {
            [co, wci, 3, 3] | [co, wci, 1, 3, 3] if *wci == ci => *co,
            s => return Err(Error::Shape(format!("conv kernel {s:?} for {ci} input channels"))),
        };
        if bv.len() != co {
            return Err(Error::Shape("conv bias length".into()));
        }
        let ho = (h + 2 - 3) / stride + 1;
        let wo = (wd + 2 - 3) / stride + 1;
        let geom = ConvGeom { ci, h, w: wd, ho, wo, stride };
        let kk = ci * 9;
        let hw_o = ho * wo;
        let mut out = vec![0.0; n * co * hw_o];
        let mut cols = vec![0.0; kk * hw_o];
        for i in 0..n {
            geom.im2col(&xv.data()[i * ci * h * wd..(i + 1) * ci * h * wd], &mut cols);
            let o = &mut out[i * co * hw_o..(i + 1) * co * hw_o];
            for (c, row) in o.chunks_mut(hw_o).enumerate() {
                row.fill(bv.data()[c]);
            }
            gemm(co, kk, hw_o, 1.0, wv.data(), Mat::rows(0, kk), &cols, Mat::rows(0, hw_o), 1.0, o, Mat::rows(0, hw_o));
        }
        let v = Array::new(&[n, co, ho, wo], out)?;
        Ok(self.push(v, &[x, w, b], move |vals, g, s| {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let gd = g.data();
            if s.wants(b) {
                let buf = s.buf(b, &vals[b.0]);
                for i in 0..n {
                    for (c, dst) in buf.iter_mut().enumerate() {
                        *dst += gd[(i * co + c) * hw_o..(i * co + c + 1) * hw_o].iter().sum::<f64>();
                    }
                }
            }
            let want_w = s.wants(w);
            let want_x = s.wants(x);
            let mut cols = vec![0.0; kk * hw_o];
            for i in 0..n {
                let go = &gd[i * co * hw_o..(i + 1) * co * hw_o];
                if want_w {
                    geom.im2col(&xv.data()[i * ci * h * wd..(i + 1) * ci * h * wd], &mut cols);
                    let buf = s.buf(w, wv);
                    gemm(co, hw_o, kk, 1.0, go, Mat::rows(0, hw_o), &cols, Mat::t(0, hw_o), 1.0, buf, Mat::rows(0, kk));
                }
                if want_x {
                    gemm(kk, co, hw_o, 1.0, wv.data(), Mat::t(0, kk), go, Mat::rows(0, hw_o), 0.0, &mut cols, Mat::rows(0, hw_o));
                    let buf = s.buf(x, xv);
                    geom.col2im(&cols, &mut buf[i * ci * h * wd..(i + 1) * ci * h * wd]);
                }
            }
        }))
    }

    // ---------------------------------------------------------------
    // attention
    // ---------------------------------------------------------------

    /// Multi-head attention probabilities `softmax(q k^T / sqrt(d_head))`.
    ///
    /// `q: [B, Nq, D]`, `k: [Bk, Nk, D]` with `Bk` equal to `B` or 1 (shared
    /// keys). Output is `[B, heads, Nq, Nk]`; rows sum to one.
    pub fn attn_probs(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (qv, kv) = (&self.values[q.0], &self.values[k.0]);
        let (b, nq, d) = rank3(qv, "attn query")?;
        let (bk, nk, dk) = rank3(kv, "attn key")?;
        if d != dk || (bk != b && bk != 1) || heads == 0 || d % heads != 0 || d == 0 {
            return Err(Error::Shape(format!("attention q {:?} k {:?} heads {heads}", qv.shape(), kv.shape())));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut p = vec![0.0; b * heads * nq * nk];
        for bi in 0..b {
            let kb = if bk == 1 { 0 } else { bi };
            for hh in 0..heads {
                let dst = &mut p[((bi * heads + hh) * nq) * nk..((bi * heads + hh + 1) * nq) * nk];
                gemm(
                    nq, dh, nk, scale,
                    qv.data(), Mat::strided(bi * nq * d + hh * dh, d, 1),
                    kv.data(), Mat::strided(kb * nk * d + hh * dh, 1, d),
                    0.0, dst, Mat::rows(0, nk),
                );
            }
        }
        softmax_rows(&mut p, nk);
        let out_id = self.values.len();
        let v = Array::new(&[b, heads, nq, nk], p)?;
        Ok(self.push(v, &[q, k], move |vals, g, s| {
            let pv = vals[out_id].data();
            // dS = P * (dP - rowsum(dP * P))
            let mut ds = vec![0.0; pv.len()];
            for ((dsr, pr), gr) in ds.chunks_mut(nk).zip(pv.chunks(nk)).zip(g.data().chunks(nk)) {
                let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..nk {
                    dsr[j] = pr[j] * (gr[j] - dot);
                }
            }
            let (qv, kv) = (&vals[q.0], &vals[k.0]);
            if s.wants(q) {
                let buf = s.buf(q, qv);
                for bi in 0..b {
                    let kb = if bk == 1 { 0 } else { bi };
                    for hh in 0..heads {
                        gemm(
                            nq, nk, dh, scale,
                            &ds, Mat::rows(((bi * heads + hh) * nq) * nk, nk),
                            kv.data(), Mat::strided(kb * nk * d + hh * dh, d, 1),
                            1.0, buf, Mat::strided(bi * nq * d + hh * dh, d, 1),
                        );
                    }
                }
            }
            if s.wants(k) {
                let buf = s.buf(k, kv);
                for bi in 0..b {
                    let kb = if bk == 1 { 0 } else { bi };
                    for hh in 0..heads {
                        gemm(
                            nk, nq, dh, scale,
                            &ds, Mat::strided(((bi * heads + hh) * nq) * nk, 1, nk),
                            qv.data(), Mat::strided(bi * nq * d + hh * dh, d, 1),
                            1.0, buf, Mat::strided(kb * nk * d + hh * dh, d, 1),
                        );
                    }
                }
            }
        }))
    }

    /// Applies attention probabilities `p: [B, heads, Nq, Nk]` to values
    /// `v: [Bv, Nk, D]` (`Bv` equal to `B` or 1), giving `[B, Nq, D]`.
    pub fn attn_apply(&mut self, p: Var, v: Var) -> Result<Var> {
        let (pv, vv) = (&self.values[p.0], &self.values[v.0]);
        let [b, heads, nq, nk] = pv.shape() else {
            return Err(Error::Shape("attention probs must be rank 4".into()));
        };
        let (b, heads, nq, nk) = (*b, *heads, *nq, *nk);
        let (bv, nkv, d) = rank3(vv, "attn value")?;
        if nkv != nk || (bv != b && bv != 1) || d % heads != 0 {
            return Err(Error::Shape(format!("attention p {:?} v {:?}", pv.shape(), vv.shape())));
        }
        let dh = d / heads;
        let mut out = vec![0.0; b * nq * d];
        for bi in 0..b {
            let vb = if bv == 1 { 0 } else { bi };
            for hh in 0..heads {
                gemm(
                    nq, nk, dh, 1.0,
                    pv.data(), Mat::rows(((bi * heads + hh) * nq) * nk, nk),
                    vv.data(), Mat::strided(vb * nk * d + hh * dh, d, 1),
                    0.0, &mut out, Mat::strided(bi * nq * d + hh * dh, d, 1),
                );
            }
        }
        let o = Array::new(&[b, nq, d], out)?;
        Ok(self.push(o, &[p, v], move |vals, g, s| {
            let (pv, vv) = (&vals[p.0], &vals[v.0]);
            if s.wants(p) {
                let buf = s.buf(p, pv);
                for bi in 0..b {
                    let vb = if bv == 1 { 0 } else { bi };
                    for hh in 0..heads {
                        gemm(
                            nq, dh, nk, 1.0,
                            g.data(), Mat::strided(bi * nq * d + hh * dh, d, 1),
                            vv.data(), Mat::strided(vb * nk * d + hh * dh, 1, d),
                            1.0, buf, Mat::rows(((bi * heads + hh) * nq) * nk, nk),
                        );
                    }
                }
            }
            if s.wants(v) {
                let buf = s.buf(v, vv);
                for bi in 0..b {
                    let vb = if bv == 1 { 0 } else { bi };
                    for hh in 0..heads {
                        gemm(
                            nk, nq, dh, 1.0,
                            pv.data(), Mat::strided(((bi * heads + hh) * nq) * nk, 1, nk),
                            g.data(), Mat::strided(bi * nq * d + hh * dh, d, 1),
                            1.0, buf, Mat::strided(vb * nk * d + hh * dh, d, 1),
                        );
                    }
                }
            }
        }))
    }
}

fn rank3(a: &Array, what: &str) -> Result<(usize, usize, usize)> {
    match a.shape() {
        [x, y, z] => Ok((*x, *y, *z)),
        s => Err(Error::Shape(format!("{what} must be rank 3, got {s:?}"))),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw_o = self.ho * self.wo;
        for c in 0..self.ci {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 9) + ky * 3 + kx) * hw_o..((c * 9) + ky * 3 + kx + 1) * hw_o];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            row[oy * self.wo + ox] = if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                0.0
                            } else {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw_o = self.ho * self.wo;
        for c in 0..self.ci {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 9) + ky * 3 + kx) * hw_o..((c * 9) + ky * 3 + kx + 1) * hw_o];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            dx[(c * self.h + iy as usize) * self.w + ix as usize] += row[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `d loss / d input` for a scalar-valued graph.
    fn check_grad(inputs: Vec<Array>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).cloned().unwrap_or_else(|| Array::zeros(input.shape()));
            for j in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, a)| {
                            let mut a = a.clone();
                            if i == idx {
                                a.data_mut()[j] += delta;
                            }
                            t.leaf(a, false)
                        })
                        .collect();
                    let o = build(&mut t, &vs);
                    t.value(o).data()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                    "input {idx} elem {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Reduce any value to a scalar with a fixed random projection.
    fn project(t: &mut Tape, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rand_array(&mut rng, t.value(v).shape());
        let c = t.constant(target);
        t.mse(v, c).unwrap()
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let x = rand_array(&mut rng, &[2, 2, 5, 4]);
            let w = rand_array(&mut rng, &[3, 2, 3, 3]);
            let b = rand_array(&mut rng, &[3]);
            check_grad(vec![x, w, b], |t, v| {
                let y = t.conv3x3(v[0], v[1], v[2], stride).unwrap();
                project(t, y, 7)
            });
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_array(&mut rng, &[2, 3, 4]);
        let k = rand_array(&mut rng, &[1, 5, 4]);
        let v = rand_array(&mut rng, &[2, 5, 4]);
        check_grad(vec![q, k, v], |t, a| {
            let p = t.attn_probs(a[0], a[1], 2).unwrap();
            let o = t.attn_apply(p, a[2]).unwrap();
            project(t, o, 3)
        });
    }

    #[test]
    fn misc_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_array(&mut rng, &[3, 2, 2, 2]);
        let w = rand_array(&mut rng, &[2, 3]);
        let c = rand_array(&mut rng, &[1, 2]);
        let table = rand_array(&mut rng, &[4, 2]);
        check_grad(vec![x, w, c, table], |t, v| {
            let y = t.add_channel(v[0], v[2]).unwrap();
            let y = t.silu(y);
            let y = t.upsample2x(y).unwrap();
            let y = t.permute(y, &[0, 2, 3, 1]);
            let y = t.layer_norm(y, 1e-5);
            let y = t.matmul(y, v[1]).unwrap();
            let y = t.reshape(y, &[3, 16, 3]).unwrap();
            let y = t.pair_frames(y, vec![0, 0, 0], vec![0, 0, 1]).unwrap();
            let e = t.embedding(v[3], &[1, 3, 1]).unwrap();
            let e = t.matmul(e, v[1]).unwrap();
            let e = t.reshape(e, &[1, 3, 3]).unwrap();
            let p = t.attn_probs(y, e, 1).unwrap();
            let p = t.scale(p, 2.0);
            let a = project(t, p, 11);
            let b = project(t, y, 12);
            t.mul(a, b).unwrap()
        });
    }

    #[test]
    fn constant_graph_records_no_closures() {
        let mut t = Tape::new();
        let a = t.constant(Array::full(&[2], 1.0));
        let b = t.constant(Array::full(&[2], 2.0));
        let c = t.add(a, b).unwrap();
        assert!(!t.requires_grad(c));
        assert!(t.backs.iter().all(|b| b.is_none()));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_array(&mut rng, &[1, 2, 4, 4]);
        let w = rand_array(&mut rng, &[1, 2, 3, 3]);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let bv = t.constant(Array::zeros(&[1]));
        let y = t.conv3x3(xv, wv, bv, 1).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                s += w.data()[c * 9 + ky * 3 + kx] * x.data()[c * 16 + iy as usize * 4 + ix as usize];
                            }
                        }
                    }
                }
                assert!((t.value(y).data()[oy * 4 + ox] - s).abs() < 1e-12);
            }
        }
    }
}
