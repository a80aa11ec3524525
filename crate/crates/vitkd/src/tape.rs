//! Reverse-mode differentiation over a recording tape.
//!
//! Ops are methods on [`Tape`]. Each op computes its output eagerly and,
//! when any input participates in gradients, records a backward rule.
//! [`Tape::backward`] replays the rules in reverse recording order, which
//! is a valid topological order by construction. Gradients accumulate
//! with `+=` so shared inputs and multiple backward passes compose.
//!
//! Everything is f32 with fixed loop order; identical inputs give
//! bitwise-identical outputs. Scalar reductions accumulate in f64.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_S: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

#[derive(Clone, Copy, PartialEq, Eq)]
enum State {
    Recording,
    Spent,
}

pub struct Tape {
    entries: RefCell<Vec<Box<dyn Fn()>>>,
    state: Cell<State>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Tape that records backward rules for grad-requiring inputs.
    pub fn new() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            state: Cell::new(State::Recording),
            grad_enabled: true,
        }
    }

    /// Tape that never records; forward values only, backward is an error.
    pub fn inference() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            state: Cell::new(State::Recording),
            grad_enabled: false,
        }
    }

    pub fn num_recorded(&self) -> usize {
        self.entries.borrow().len()
    }

    fn check_live(&self, op: &str) -> Result<()> {
        if self.state.get() == State::Spent {
            return Err(Error::Config(format!(
                "{op}: tape already consumed by backward; use a fresh tape per forward pass"
            )));
        }
        Ok(())
    }

    /// Wrap freshly computed data; output requires grad iff recording and
    /// any input does. Debug builds verify the engine invariant that
    /// finite inputs produce finite outputs.
    fn output(&self, op: &str, shape: &[usize], data: Vec<f32>, inputs: &[&Tensor]) -> Result<(Tensor, bool)> {
        #[cfg(debug_assertions)]
        {
            // branch-free exponent scan so the debug invariant stays cheap
            let mut bad = 0u32;
            for v in &data {
                bad |= u32::from((v.to_bits() & 0x7f80_0000) == 0x7f80_0000);
            }
            if bad != 0 && inputs.iter().all(|t| t.is_finite()) {
                panic!("{op}: non-finite output from finite inputs");
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        let record = self.grad_enabled
            && self.state.get() == State::Recording
            && inputs.iter().any(|t| t.requires_grad());
        out.set_requires_grad(record);
        Ok((out, record))
    }

    fn record(&self, rule: Box<dyn Fn()>) {
        self.entries.borrow_mut().push(rule);
    }

    /// Reverse-replay the recorded rules from a scalar loss. Consumes the
    /// recording: a second backward (or further ops) on this tape errors.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Config("backward: inference tape records nothing".into()));
        }
        self.check_live("backward")?;
        if loss.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        if !loss.requires_grad() {
            return Err(Error::Config(
                "backward: loss is not connected to any grad-requiring input on this tape".into(),
            ));
        }
        loss.seed_grad_ones();
        let entries = std::mem::take(&mut *self.entries.borrow_mut());
        for rule in entries.iter().rev() {
            rule();
        }
        self.state.set(State::Spent);
        Ok(())
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live("matmul")?;
        let (m, k) = as_2d("matmul", a)?;
        let (k2, n) = as_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let mut data = vec![0.0f32; m * n];
        matmul_raw(&a.data(), &b.data(), m, k, n, &mut data);
        let (out, rec) = self.output("matmul", &[m, n], data, &[a, b])?;
        if rec {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if a.requires_grad() {
                        // dA = G * B^T
                        let bd = b.data();
                        let mut da = vec![0.0f32; m * k];
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                da[i * k + kk] = dot(gr, &bd[kk * n..(kk + 1) * n]);
                            }
                        }
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        // dB = A^T * G
                        let ad = a.data();
                        let mut db = vec![0.0f32; k * n];
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                axpy(&mut db[kk * n..(kk + 1) * n], gr, ad[i * k + kk]);
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                });
            }));
        }
        Ok(out)
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        self.check_live("transpose")?;
        let (m, n) = as_2d("transpose", x)?;
        let xd = x.data();
        let mut data = vec![0.0f32; n * m];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        drop(xd);
        let (out, rec) = self.output("transpose", &[n, m], data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let mut dx = vec![0.0f32; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            dx[i * n + j] = g[j * m + i];
                        }
                    }
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    /// Affine map: rows of `x` times `w` plus `bias`.
    pub fn linear(&self, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check_live("linear")?;
        let (r, din) = as_2d("linear", x)?;
        let (din2, dout) = as_2d("linear", w)?;
        if din != din2 || bias.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {:?} w {:?} bias {:?} are inconsistent",
                    x.shape(),
                    w.shape(),
                    bias.shape()
                ),
            ));
        }
        let mut data = vec![0.0f32; r * dout];
        matmul_raw(&x.data(), &w.data(), r, din, dout, &mut data);
        {
            let bd = bias.data();
            for row in data.chunks_exact_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bd.iter()) {
                    *o += bv;
                }
            }
        }
        let (out, rec) = self.output("linear", &[r, dout], data, &[x, w, bias])?;
        if rec {
            let (x, w, bias, o) = (x.clone(), w.clone(), bias.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if x.requires_grad() {
                        let wd = w.data();
                        let mut dx = vec![0.0f32; r * din];
                        for i in 0..r {
                            let gr = &g[i * dout..(i + 1) * dout];
                            for di in 0..din {
                                dx[i * din + di] = dot(gr, &wd[di * dout..(di + 1) * dout]);
                            }
                        }
                        x.accumulate_grad(&dx);
                    }
                    if w.requires_grad() {
                        let xd = x.data();
                        let mut dw = vec![0.0f32; din * dout];
                        for i in 0..r {
                            let gr = &g[i * dout..(i + 1) * dout];
                            for di in 0..din {
                                axpy(&mut dw[di * dout..(di + 1) * dout], gr, xd[i * din + di]);
                            }
                        }
                        w.accumulate_grad(&dw);
                    }
                    if bias.requires_grad() {
                        let mut db = vec![0.0f32; dout];
                        for gr in g.chunks_exact(dout) {
                            for (d, gv) in db.iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                        bias.accumulate_grad(&db);
                    }
                });
            }));
        }
        Ok(out)
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live("add")?;
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let (out, rec) = self.output("add", a.shape(), data, &[a, b])?;
        if rec {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if a.requires_grad() {
                        a.accumulate_grad(g);
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(g);
                    }
                });
            }));
        }
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live("sub")?;
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "sub",
                format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        let (out, rec) = self.output("sub", a.shape(), data, &[a, b])?;
        if rec {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if a.requires_grad() {
                        a.accumulate_grad(g);
                    }
                    if b.requires_grad() {
                        let db: Vec<f32> = g.iter().map(|gv| -gv).collect();
                        b.accumulate_grad(&db);
                    }
                });
            }));
        }
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live("mul")?;
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "mul",
                format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let (out, rec) = self.output("mul", a.shape(), data, &[a, b])?;
        if rec {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if a.requires_grad() {
                        let bd = b.data();
                        let da: Vec<f32> = g.iter().zip(bd.iter()).map(|(gv, y)| gv * y).collect();
                        drop(bd);
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        let db: Vec<f32> = g.iter().zip(ad.iter()).map(|(gv, x)| gv * x).collect();
                        drop(ad);
                        b.accumulate_grad(&db);
                    }
                });
            }));
        }
        Ok(out)
    }

    pub fn scale(&self, x: &Tensor, c: f32) -> Result<Tensor> {
        self.check_live("scale")?;
        let data: Vec<f32> = x.data().iter().map(|v| v * c).collect();
        let (out, rec) = self.output("scale", x.shape(), data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let dx: Vec<f32> = g.iter().map(|gv| gv * c).collect();
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    pub fn square(&self, x: &Tensor) -> Result<Tensor> {
        self.check_live("square")?;
        let data: Vec<f32> = x.data().iter().map(|v| v * v).collect();
        let (out, rec) = self.output("square", x.shape(), data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let xd = x.data();
                    let dx: Vec<f32> = g.iter().zip(xd.iter()).map(|(gv, xv)| 2.0 * xv * gv).collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.check_live("relu")?;
        let data: Vec<f32> = x.data().iter().map(|v| v.max(0.0)).collect();
        let (out, rec) = self.output("relu", x.shape(), data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let xd = x.data();
                    let dx: Vec<f32> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        self.check_live("gelu")?;
        let data: Vec<f32> = x.data().iter().map(|&v| gelu_fwd(v)).collect();
        let (out, rec) = self.output("gelu", x.shape(), data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let xd = x.data();
                    let dx: Vec<f32> = g.iter().zip(xd.iter()).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    // ── row-structured ops ──────────────────────────────────────────

    /// Stabilized softmax over the last dimension.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        self.check_live("softmax_rows")?;
        let (rows, c) = as_rows("softmax_rows", x)?;
        let xd = x.data();
        let mut data = vec![0.0f32; rows * c];
        for r in 0..rows {
            softmax_slice(&xd[r * c..(r + 1) * c], &mut data[r * c..(r + 1) * c]);
        }
        drop(xd);
        let (out, rec) = self.output("softmax_rows", x.shape(), data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let yd = o.data();
                    let mut dx = vec![0.0f32; rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &yd[r * c..(r + 1) * c];
                        let s = dot(gr, yr);
                        for j in 0..c {
                            dx[r * c + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    drop(yd);
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    /// Stabilized log-softmax over the last dimension.
    pub fn log_softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        self.check_live("log_softmax_rows")?;
        let (rows, c) = as_rows("log_softmax_rows", x)?;
        let xd = x.data();
        let mut data = vec![0.0f32; rows * c];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut lse = 0.0f64;
            for v in row {
                lse += f64::from(v - mx).exp();
            }
            let lse = (lse.ln() as f32) + mx;
            for j in 0..c {
                data[r * c + j] = row[j] - lse;
            }
        }
        drop(xd);
        let (out, rec) = self.output("log_softmax_rows", x.shape(), data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let yd = o.data();
                    let mut dx = vec![0.0f32; rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &yd[r * c..(r + 1) * c];
                        let s: f32 = gr.iter().sum();
                        for j in 0..c {
                            dx[r * c + j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    drop(yd);
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    /// Normalize each last-dim slice to zero mean and unit variance, then
    /// apply the affine pair (gamma, beta).
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        self.check_live("layer_norm")?;
        let (rows, d) = as_rows("layer_norm", x)?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?} needs gamma/beta of [{d}], got {:?} / {:?}",
                    x.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0f32; rows * d];
        let mut xhat = vec![0.0f32; rows * d];
        let mut inv = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = (row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64) as f32;
            let var = (row.iter().map(|&v| f64::from(v - mean) * f64::from(v - mean)).sum::<f64>()
                / d as f64) as f32;
            let iv = 1.0 / (var + eps).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let xh = (row[j] - mean) * iv;
                xhat[r * d + j] = xh;
                data[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let (out, rec) = self.output("layer_norm", x.shape(), data, &[x, gamma, beta])?;
        if rec {
            let (x, gamma, beta, o) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if gamma.requires_grad() {
                        let mut dg = vec![0.0f32; d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                        gamma.accumulate_grad(&dg);
                    }
                    if beta.requires_grad() {
                        let mut db = vec![0.0f32; d];
                        for gr in g.chunks_exact(d) {
                            for (dst, gv) in db.iter_mut().zip(gr) {
                                *dst += gv;
                            }
                        }
                        beta.accumulate_grad(&db);
                    }
                    if x.requires_grad() {
                        let gd = gamma.data();
                        let mut dx = vec![0.0f32; rows * d];
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut m1 = 0.0f64;
                            let mut m2 = 0.0f64;
                            for j in 0..d {
                                let dxh = f64::from(gr[j]) * f64::from(gd[j]);
                                m1 += dxh;
                                m2 += dxh * f64::from(xh[j]);
                            }
                            let m1 = (m1 / d as f64) as f32;
                            let m2 = (m2 / d as f64) as f32;
                            for j in 0..d {
                                let dxh = gr[j] * gd[j];
                                dx[r * d + j] = inv[r] * (dxh - m1 - xh[j] * m2);
                            }
                        }
                        drop(gd);
                        x.accumulate_grad(&dx);
                    }
                });
            }));
        }
        Ok(out)
    }

    // ── convolution ─────────────────────────────────────────────────

    /// 3x3 convolution, stride 1, zero padding 1; spatial dims preserved.
    pub fn conv3x3(&self, x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check_live("conv3x3")?;
        let xs = x.shape().to_vec();
        let ks = kernel.shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("conv3x3", format!("input must be [c,h,w], got {xs:?}")));
        }
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || ks[1] != xs[0] {
            return Err(Error::shape(
                "conv3x3",
                format!("kernel must be [c_out, {}, 3, 3], got {ks:?}", xs[0]),
            ));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let cout = ks[0];
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv3x3",
                format!("bias must be [{cout}], got {:?}", bias.shape()),
            ));
        }
        // evaluated as one matmul over the padded-patch matrix; the
        // kernel is already laid out as [c_out, c_in * 9]
        let hw = h * w;
        let taps = cin * 9;
        let patches = im2col(&x.data(), cin, h, w);
        let mut data = vec![0.0f32; cout * hw];
        matmul_raw(&kernel.data(), &patches, cout, taps, hw, &mut data);
        {
            let bd = bias.data();
            for co in 0..cout {
                let plane = &mut data[co * hw..(co + 1) * hw];
                for v in plane.iter_mut() {
                    *v += bd[co];
                }
            }
        }
        let (out, rec) = self.output("conv3x3", &[cout, h, w], data, &[x, kernel, bias])?;
        if rec {
            let (x, kernel, bias, o) = (x.clone(), kernel.clone(), bias.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let patches = im2col(&x.data(), cin, h, w);
                    if kernel.requires_grad() {
                        // dK = G * patches^T
                        let mut dk = vec![0.0f32; cout * taps];
                        for co in 0..cout {
                            let grow = &g[co * hw..(co + 1) * hw];
                            for r in 0..taps {
                                dk[co * taps + r] = dot(grow, &patches[r * hw..(r + 1) * hw]);
                            }
                        }
                        kernel.accumulate_grad(&dk);
                    }
                    if x.requires_grad() {
                        // dPatches = K^T * G, then scatter back to pixels
                        let kd = kernel.data();
                        let mut dpatches = vec![0.0f32; taps * hw];
                        for co in 0..cout {
                            let grow = &g[co * hw..(co + 1) * hw];
                            for r in 0..taps {
                                axpy(&mut dpatches[r * hw..(r + 1) * hw], grow, kd[co * taps + r]);
                            }
                        }
                        drop(kd);
                        let mut dxv = vec![0.0f32; cin * hw];
                        for ci in 0..cin {
                            let dplane = &mut dxv[ci * hw..(ci + 1) * hw];
                            for dy in 0..3isize {
                                for dx in 0..3isize {
                                    let r = ci * 9 + (dy * 3 + dx) as usize;
                                    conv_accumulate(
                                        dplane,
                                        &dpatches[r * hw..(r + 1) * hw],
                                        h,
                                        w,
                                        1 - dy,
                                        1 - dx,
                                        1.0,
                                    );
                                }
                            }
                        }
                        x.accumulate_grad(&dxv);
                    }
                    if bias.requires_grad() {
                        let mut db = vec![0.0f32; cout];
                        for co in 0..cout {
                            db[co] = g[co * hw..(co + 1) * hw].iter().sum();
                        }
                        bias.accumulate_grad(&db);
                    }
                });
            }));
        }
        Ok(out)
    }

    // ── structural ops ──────────────────────────────────────────────

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check_live("reshape")?;
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", x.shape()),
            ));
        }
        let (out, rec) = self.output("reshape", shape, x.data_vec(), &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| x.accumulate_grad(g));
            }));
        }
        Ok(out)
    }

    pub fn concat_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live("concat_rows")?;
        let (ma, d) = as_2d("concat_rows", a)?;
        let (mb, d2) = as_2d("concat_rows", b)?;
        if d != d2 {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let mut data = Vec::with_capacity((ma + mb) * d);
        data.extend_from_slice(&a.data());
        data.extend_from_slice(&b.data());
        let (out, rec) = self.output("concat_rows", &[ma + mb, d], data, &[a, b])?;
        if rec {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if a.requires_grad() {
                        a.accumulate_grad(&g[..ma * d]);
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(&g[ma * d..]);
                    }
                });
            }));
        }
        Ok(out)
    }

    pub fn slice_rows(&self, x: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
        self.check_live("slice_rows")?;
        let (m, d) = as_2d("slice_rows", x)?;
        if r0 >= r1 || r1 > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {r0}..{r1} out of range for {:?}", x.shape()),
            ));
        }
        let data = x.data()[r0 * d..r1 * d].to_vec();
        let (out, rec) = self.output("slice_rows", &[r1 - r0, d], data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let mut dx = vec![0.0f32; m * d];
                    dx[r0 * d..r1 * d].copy_from_slice(g);
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    pub fn slice_cols(&self, x: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
        self.check_live("slice_cols")?;
        let (m, d) = as_2d("slice_cols", x)?;
        if c0 >= c1 || c1 > d {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {c0}..{c1} out of range for {:?}", x.shape()),
            ));
        }
        let w = c1 - c0;
        let xd = x.data();
        let mut data = vec![0.0f32; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&xd[i * d + c0..i * d + c1]);
        }
        drop(xd);
        let (out, rec) = self.output("slice_cols", &[m, w], data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let mut dx = vec![0.0f32; m * d];
                    for i in 0..m {
                        dx[i * d + c0..i * d + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        self.check_live("concat_cols")?;
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let (m, _) = as_2d("concat_cols", &parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (mp, wp) = as_2d("concat_cols", p)?;
            if mp != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {m} vs {mp}"),
                ));
            }
            widths.push(wp);
            total += wp;
        }
        let mut data = vec![0.0f32; m * total];
        let mut off = 0usize;
        for (p, &wp) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..m {
                data[i * total + off..i * total + off + wp].copy_from_slice(&pd[i * wp..(i + 1) * wp]);
            }
            off += wp;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let (out, rec) = self.output("concat_cols", &[m, total], data, &refs)?;
        if rec {
            let parts: Vec<Tensor> = parts.to_vec();
            let o = out.clone();
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let mut off = 0usize;
                    for (p, &wp) in parts.iter().zip(&widths) {
                        if p.requires_grad() {
                            let mut dp = vec![0.0f32; m * wp];
                            for i in 0..m {
                                dp[i * wp..(i + 1) * wp]
                                    .copy_from_slice(&g[i * total + off..i * total + off + wp]);
                            }
                            p.accumulate_grad(&dp);
                        }
                        off += wp;
                    }
                });
            }));
        }
        Ok(out)
    }

    pub fn select_rows(&self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        self.check_live("select_rows")?;
        let (m, d) = as_2d("select_rows", x)?;
        if idx.is_empty() {
            return Err(Error::shape("select_rows", "empty index set"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} out of range for {:?}", x.shape()),
            ));
        }
        let xd = x.data();
        let mut data = vec![0.0f32; idx.len() * d];
        for (j, &i) in idx.iter().enumerate() {
            data[j * d..(j + 1) * d].copy_from_slice(&xd[i * d..(i + 1) * d]);
        }
        drop(xd);
        let (out, rec) = self.output("select_rows", &[idx.len(), d], data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            let idx = idx.to_vec();
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let mut dx = vec![0.0f32; m * d];
                    for (j, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            dx[i * d + c] += g[j * d + c];
                        }
                    }
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    /// Copy of `base` with row `idx[j]` replaced by `rows[j]`.
    pub fn scatter_rows(&self, base: &Tensor, idx: &[usize], rows: &Tensor) -> Result<Tensor> {
        self.check_live("scatter_rows")?;
        let (m, d) = as_2d("scatter_rows", base)?;
        let (k, d2) = as_2d("scatter_rows", rows)?;
        if d != d2 || k != idx.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!(
                    "base {:?}, rows {:?}, {} indices are inconsistent",
                    base.shape(),
                    rows.shape(),
                    idx.len()
                ),
            ));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape(
                "scatter_rows",
                format!("row {bad} out of range for {:?}", base.shape()),
            ));
        }
        let mut data = base.data_vec();
        {
            let rd = rows.data();
            for (j, &i) in idx.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(&rd[j * d..(j + 1) * d]);
            }
        }
        let (out, rec) = self.output("scatter_rows", &[m, d], data, &[base, rows])?;
        if rec {
            let (base, rows, o) = (base.clone(), rows.clone(), out.clone());
            let idx = idx.to_vec();
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if base.requires_grad() {
                        let mut db = g.to_vec();
                        for &i in &idx {
                            db[i * d..(i + 1) * d].fill(0.0);
                        }
                        base.accumulate_grad(&db);
                    }
                    if rows.requires_grad() {
                        let mut dr = vec![0.0f32; idx.len() * d];
                        for (j, &i) in idx.iter().enumerate() {
                            dr[j * d..(j + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                        }
                        rows.accumulate_grad(&dr);
                    }
                });
            }));
        }
        Ok(out)
    }

    /// Replace row i by the fill vector wherever mask[i] is set.
    pub fn mask_rows(&self, x: &Tensor, mask: &[bool], fill: &Tensor) -> Result<Tensor> {
        self.check_live("mask_rows")?;
        let (m, d) = as_2d("mask_rows", x)?;
        if mask.len() != m {
            return Err(Error::shape(
                "mask_rows",
                format!("mask length {} vs {} rows", mask.len(), m),
            ));
        }
        if fill.shape() != [d] {
            return Err(Error::shape(
                "mask_rows",
                format!("fill must be [{d}], got {:?}", fill.shape()),
            ));
        }
        let mut data = x.data_vec();
        {
            let fd = fill.data();
            for (i, &bit) in mask.iter().enumerate() {
                if bit {
                    data[i * d..(i + 1) * d].copy_from_slice(&fd);
                }
            }
        }
        let (out, rec) = self.output("mask_rows", &[m, d], data, &[x, fill])?;
        if rec {
            let (x, fill, o) = (x.clone(), fill.clone(), out.clone());
            let mask = mask.to_vec();
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    if x.requires_grad() {
                        let mut dx = g.to_vec();
                        for (i, &bit) in mask.iter().enumerate() {
                            if bit {
                                dx[i * d..(i + 1) * d].fill(0.0);
                            }
                        }
                        x.accumulate_grad(&dx);
                    }
                    if fill.requires_grad() {
                        let mut df = vec![0.0f32; d];
                        for (i, &bit) in mask.iter().enumerate() {
                            if bit {
                                for c in 0..d {
                                    df[c] += g[i * d + c];
                                }
                            }
                        }
                        fill.accumulate_grad(&df);
                    }
                });
            }));
        }
        Ok(out)
    }

    /// Sum of all elements as a scalar; f64 accumulation, left to right.
    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        self.check_live("sum_all")?;
        let s: f64 = x.data().iter().map(|&v| f64::from(v)).sum();
        let (out, rec) = self.output("sum_all", &[1], vec![s as f32], &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let dx = vec![g[0]; x.numel()];
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }

    /// Test hook: forward x^2 with a deliberately wrong backward (3x).
    #[cfg(test)]
    pub(crate) fn square_corrupted(&self, x: &Tensor) -> Result<Tensor> {
        self.check_live("square_corrupted")?;
        let data: Vec<f32> = x.data().iter().map(|v| v * v).collect();
        let (out, rec) = self.output("square_corrupted", x.shape(), data, &[x])?;
        if rec {
            let (x, o) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                o.with_grad(|g| {
                    let xd = x.data();
                    let dx: Vec<f32> = g.iter().zip(xd.iter()).map(|(gv, xv)| 3.0 * xv * gv).collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                });
            }));
        }
        Ok(out)
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

fn as_2d(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Collapse leading dims: any tensor is (rows, last-dim) slices.
fn as_rows(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.is_empty() {
        return Err(Error::shape(op, "expected rank >= 1"));
    }
    let c = s[s.len() - 1];
    Ok((t.numel() / c, c))
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// Fixed-order 8-lane dot product; deterministic and vectorizable.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ao = &a[c * 8..c * 8 + 8];
        let bo = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ao[l] * bo[l];
        }
    }
    let mut s = 0.0f32;
    for v in acc {
        s += v;
    }
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(dst: &mut [f32], src: &[f32], s: f32) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// Padded-patch matrix: row (ci * 9 + dy * 3 + dx) holds the input plane
/// shifted by the tap offset, zeros outside the image.
fn im2col(x: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0f32; cin * 9 * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for dy in 0..3isize {
            for dx in 0..3isize {
                let r = ci * 9 + (dy * 3 + dx) as usize;
                conv_accumulate(&mut out[r * hw..(r + 1) * hw], plane, h, w, dy - 1, dx - 1, 1.0);
            }
        }
    }
    out
}

/// out[y][x] += s * input[y+oy][x+ox] where in-bounds.
fn conv_accumulate(out: &mut [f32], input: &[f32], h: usize, w: usize, oy: isize, ox: isize, s: f32) {
    for y in 0..h as isize {
        let iy = y + oy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let x0 = (-ox).max(0);
        let x1 = (w as isize - ox).min(w as isize);
        if x0 >= x1 {
            continue;
        }
        let orow = &mut out[(y as usize) * w + x0 as usize..(y as usize) * w + x1 as usize];
        let irow = &input[(iy as usize) * w + (x0 + ox) as usize..(iy as usize) * w + (x1 + ox) as usize];
        axpy(orow, irow, s);
    }
}

fn softmax_slice(row: &[f32], out: &mut [f32]) {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = f64::from(v - mx).exp() as f32;
        *o = e;
        sum += f64::from(e);
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Rational tanh approximation (relative error ~1e-7 inside the clamp),
/// all mul/add so the activation loops vectorize; libm's tanhf is a
/// scalar call and dominates the FFN otherwise.
pub(crate) fn tanh_fast(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311_5;
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let alpha = x
        * (4.893_525e-3
            + x2 * (6.372_619_3e-4
                + x2 * (1.485_722_3e-5
                    + x2 * (5.122_297e-8
                        + x2 * (-8.604_672e-11 + x2 * (2.000_188e-13 + x2 * -2.760_768_4e-16))))));
    let beta = 4.893_525_3e-3 + x2 * (2.268_434_6e-3 + x2 * (1.185_347e-4 + x2 * 1.198_258_4e-6));
    alpha / beta
}

pub(crate) fn gelu_fwd(x: f32) -> f32 {
    let t = tanh_fast(GELU_S * (x + GELU_C * x * x * x));
    0.5 * x * (1.0 + t)
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = tanh_fast(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}
