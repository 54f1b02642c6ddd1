use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{accumulate, GradError, Op, Result, Tape, Var};
use crate::linalg::{self, matmul, matmul_nt, matmul_tn, LinalgError, Tensor2};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-6;

/// Standard normal CDF via `erf`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GeLU, `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn invalid(op: &'static str, msg: impl Into<String>) -> GradError {
    GradError::Invalid { op, msg: msg.into() }
}

impl Tape {
    fn unary(&mut self, a: Var, value: Tensor2, op: Op) -> Var {
        let g = self.any_grad(&[a]);
        self.push(value, op, g)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor2, op: Op) -> Var {
        let g = self.any_grad(&[a, b]);
        self.push(value, op, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(&self.node(a)?.value, &self.node(b)?.value)?;
        Ok(self.binary(a, b, v, Op::MatMul(a.idx, b.idx)))
    }

    /// Rank-r product `s · t`; same backward rule as matmul.
    pub fn outer(&mut self, s: Var, t: Var) -> Result<Var> {
        let v = linalg::outer(&self.node(s)?.value, &self.node(t)?.value)?;
        Ok(self.binary(s, t, v, Op::MatMul(s.idx, t.idx)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.node(a)?.value.add(&self.node(b)?.value)?;
        Ok(self.binary(a, b, v, Op::Add(a.idx, b.idx)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.node(a)?.value.sub(&self.node(b)?.value)?;
        Ok(self.binary(a, b, v, Op::Sub(a.idx, b.idx)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.node(a)?.value.hadamard(&self.node(b)?.value)?;
        Ok(self.binary(a, b, v, Op::Mul(a.idx, b.idx)))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let v = self.node(a)?.value.scale(alpha);
        Ok(self.unary(a, v, Op::Scale(a.idx, alpha)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.transpose();
        Ok(self.unary(a, v, Op::Transpose(a.idx)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.node(a)?.value.reshape(rows, cols)?;
        Ok(self.unary(a, v, Op::Reshape(a.idx)))
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.node(x)?.value.add_row(&self.node(bias)?.value)?;
        Ok(self.binary(x, bias, v, Op::AddRow(x.idx, bias.idx)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.sum();
        Ok(self.unary(a, Tensor2::filled(1, 1, s), Op::Sum(a.idx)))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::kron(&self.node(a)?.value, &self.node(b)?.value);
        Ok(self.binary(a, b, v, Op::Kron(a.idx, b.idx)))
    }

    /// Materialized `Σ_i A_i ⊗ B_i` from stacked factors.
    pub fn sum_kron(&mut self, a_stack: Var, b_stack: Var, n: usize) -> Result<Var> {
        let v = linalg::sum_kron(&self.node(a_stack)?.value, &self.node(b_stack)?.value, n)?;
        Ok(self.binary(
            a_stack,
            b_stack,
            v,
            Op::SumKron {
                a: a_stack.idx,
                b: b_stack.idx,
                n,
            },
        ))
    }

    /// Per-block products `X_i · Y_i` over `n` stacked blocks.
    pub fn block_matmul(&mut self, x_stack: Var, y_stack: Var, n: usize) -> Result<Var> {
        let v = linalg::block_matmul(&self.node(x_stack)?.value, &self.node(y_stack)?.value, n)?;
        Ok(self.binary(
            x_stack,
            y_stack,
            v,
            Op::BlockMatMul {
                x: x_stack.idx,
                y: y_stack.idx,
                n,
            },
        ))
    }

    /// `x · Σ_i A_i ⊗ B_i` without materializing the weight.
    pub fn phm_linear(&mut self, x: Var, a_stack: Var, b_stack: Var, n: usize) -> Result<Var> {
        let v = linalg::phm_matmul(&self.node(x)?.value, &self.node(a_stack)?.value, &self.node(b_stack)?.value, n)?;
        let g = self.any_grad(&[x, a_stack, b_stack]);
        Ok(self.push(
            v,
            Op::PhmLinear {
                x: x.idx,
                a: a_stack.idx,
                b: b_stack.idx,
                n,
            },
            g,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(gelu_scalar);
        Ok(self.unary(a, v, Op::Gelu(a.idx)))
    }

    /// Row-wise layer normalization with `1 x c` gain and optional bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Option<Var>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (rows, c) = xv.shape();
        if c == 0 {
            return Err(invalid("layer_norm", "empty last dimension"));
        }
        let gv = &self.node(gain)?.value;
        if gv.shape() != (1, c) {
            return Err(LinalgError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape(),
                right: gv.shape(),
            }
            .into());
        }
        if let Some(b) = bias {
            let bv = &self.node(b)?.value;
            if bv.shape() != (1, c) {
                return Err(LinalgError::ShapeMismatch {
                    op: "layer_norm",
                    left: xv.shape(),
                    right: bv.shape(),
                }
                .into());
            }
        }
        let mut xhat = Tensor2::zeros(rows, c);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut y = Tensor2::zeros(rows, c);
        let gv = self.nodes[gain.idx].value.row(0);
        let bv = bias.map(|b| self.nodes[b.idx].value.row(0));
        for r in 0..rows {
            let yr = y.row_mut(r);
            for (j, (o, &h)) in yr.iter_mut().zip(xhat.row(r)).enumerate() {
                *o = h * gv[j] + bv.map_or(0.0, |b| b[j]);
            }
        }
        let mut deps = vec![x, gain];
        deps.extend(bias);
        let g = self.any_grad(&deps);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x: x.idx,
                gain: gain.idx,
                bias: bias.map(|b| b.idx),
                xhat,
                inv_std,
            },
            g,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(&self.node(a)?.value);
        Ok(self.unary(a, v, Op::Softmax(a.idx)))
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        if lv.rows() != targets.len() || lv.rows() == 0 {
            return Err(invalid(
                "cross_entropy",
                format!("{} rows but {} targets", lv.rows(), targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(invalid("cross_entropy", format!("target {t} out of range for {} classes", lv.cols())));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        Ok(self.unary(
            logits,
            Tensor2::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: logits.idx,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`, with `q, k, v` stacked as `(batch·seq) x dim`.
    /// `bias`, if given, is `(heads·seq) x seq` and is added to the scores
    /// of each head (no gradient).
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        bias: Option<&Tensor2>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (&self.node(q)?.value, &self.node(k)?.value, &self.node(v)?.value);
        let dim = qv.cols();
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != batch * seq {
            return Err(invalid("attention", format!("q/k/v shapes {:?} for batch {batch} seq {seq}", qv.shape())));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(invalid("attention", format!("dim {dim} not divisible by {heads} heads")));
        }
        if let Some(b) = bias {
            if b.shape() != (heads * seq, seq) {
                return Err(invalid("attention", format!("bias shape {:?}", b.shape())));
            }
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor2::zeros(batch * seq, dim);
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            for h in 0..heads {
                let qb = qv.block(b * seq, h * dh, seq, dh);
                let kb = kv.block(b * seq, h * dh, seq, dh);
                let vb = vv.block(b * seq, h * dh, seq, dh);
                let mut scores = matmul_nt(&qb, &kb)?.scale(scale);
                if let Some(bias) = bias {
                    scores.add_assign(&bias.block(h * seq, 0, seq, seq))?;
                }
                let p = softmax_rows(&scores);
                out.add_block(b * seq, h * dh, &matmul(&p, &vb)?);
                probs.push(p);
            }
        }
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.idx,
                k: k.idx,
                v: v.idx,
                batch,
                seq,
                heads,
                probs,
            },
            g,
        ))
    }

    /// Averages each group of `seq` consecutive rows.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if seq == 0 || xv.rows() % seq != 0 {
            return Err(invalid("mean_pool", format!("{} rows not divisible by seq {seq}", xv.rows())));
        }
        let batch = xv.rows() / seq;
        let mut out = Tensor2::zeros(batch, xv.cols());
        let inv = 1.0 / seq as f64;
        for b in 0..batch {
            for s in 0..seq {
                for (o, &v) in out.row_mut(b).iter_mut().zip(xv.row(b * seq + s)) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.unary(x, out, Op::MeanPool { x: x.idx, seq }))
    }
}

pub(crate) fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut z = 0.0;
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - m).exp();
            z += *oj;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Propagates `g` (the gradient of node `idx`) into its parents.
pub(crate) fn backprop(tape: &Tape, idx: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
    let nodes = &tape.nodes;
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].needs_grad;
    match &nodes[idx].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            if wants(a) {
                accumulate(grads, a, matmul_nt(g, val(b))?);
            }
            if wants(b) {
                accumulate(grads, b, matmul_tn(val(a), g)?);
            }
        }
        &Op::Add(a, b) => {
            if wants(a) {
                accumulate(grads, a, g.clone());
            }
            if wants(b) {
                accumulate(grads, b, g.clone());
            }
        }
        &Op::Sub(a, b) => {
            if wants(a) {
                accumulate(grads, a, g.clone());
            }
            if wants(b) {
                accumulate(grads, b, g.scale(-1.0));
            }
        }
        &Op::Mul(a, b) => {
            if wants(a) {
                accumulate(grads, a, g.hadamard(val(b))?);
            }
            if wants(b) {
                accumulate(grads, b, g.hadamard(val(a))?);
            }
        }
        &Op::Scale(a, alpha) => accumulate(grads, a, g.scale(alpha)),
        &Op::Transpose(a) => accumulate(grads, a, g.transpose()),
        &Op::Reshape(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, a, g.reshape(r, c)?);
        }
        &Op::AddRow(x, bias) => {
            if wants(x) {
                accumulate(grads, x, g.clone());
            }
            if wants(bias) {
                accumulate(grads, bias, g.sum_rows());
            }
        }
        &Op::Sum(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, a, Tensor2::filled(r, c, g.data()[0]));
        }
        &Op::Kron(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, f) = av.shape();
            let (p, q) = bv.shape();
            if wants(a) {
                let ga = Tensor2::from_fn(m, f, |i, j| {
                    let mut acc = 0.0;
                    for r in 0..p {
                        let grow = &g.row(i * p + r)[j * q..(j + 1) * q];
                        acc += grow.iter().zip(bv.row(r)).map(|(x, y)| x * y).sum::<f64>();
                    }
                    acc
                });
                accumulate(grads, a, ga);
            }
            if wants(b) {
                let mut gb = Tensor2::zeros(p, q);
                for i in 0..m {
                    for j in 0..f {
                        let aij = av.get(i, j);
                        for r in 0..p {
                            let grow = &g.row(i * p + r)[j * q..(j + 1) * q];
                            for (o, &x) in gb.row_mut(r).iter_mut().zip(grow) {
                                *o += aij * x;
                            }
                        }
                    }
                }
                accumulate(grads, b, gb);
            }
        }
        &Op::SumKron { a, b, n } => {
            let (av, bv) = (val(a), val(b));
            let p = bv.rows() / n;
            let q = bv.cols();
            let mut ga = Tensor2::zeros(n * n, n);
            let mut gb = Tensor2::zeros(n * p, q);
            for i in 0..n {
                for ab in 0..n {
                    for bb in 0..n {
                        let coef = av.get(i * n + ab, bb);
                        let mut acc = 0.0;
                        for r in 0..p {
                            let grow = &g.row(ab * p + r)[bb * q..(bb + 1) * q];
                            let brow = bv.row(i * p + r);
                            acc += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            for (o, &x) in gb.row_mut(i * p + r).iter_mut().zip(grow) {
                                *o += coef * x;
                            }
                        }
                        ga.set(i * n + ab, bb, acc);
                    }
                }
            }
            if wants(a) {
                accumulate(grads, a, ga);
            }
            if wants(b) {
                accumulate(grads, b, gb);
            }
        }
        &Op::BlockMatMul { x, y, n } => {
            let (xv, yv) = (val(x), val(y));
            let p = xv.rows() / n;
            let r = xv.cols();
            let q = yv.cols();
            let mut gx = Vec::with_capacity(n);
            let mut gy = Vec::with_capacity(n);
            for i in 0..n {
                let gi = g.block(i * p, 0, p, q);
                let xi = xv.block(i * p, 0, p, r);
                let yi = yv.block(i * r, 0, r, q);
                gx.push(matmul_nt(&gi, &yi)?);
                gy.push(matmul_tn(&xi, &gi)?);
            }
            if wants(x) {
                accumulate(grads, x, linalg::stack_rows(&gx)?);
            }
            if wants(y) {
                accumulate(grads, y, linalg::stack_rows(&gy)?);
            }
        }
        &Op::PhmLinear { x, a, b, n } => {
            let (xv, av, bv) = (val(x), val(a), val(b));
            let rows = xv.rows();
            let p = bv.rows() / n;
            let q = bv.cols();
            let xr = xv.reshape(rows * n, p)?;
            let mut gx = Tensor2::zeros(rows * n, p);
            let mut ga = Tensor2::zeros(n * n, n);
            let mut gb = Tensor2::zeros(n * p, q);
            for i in 0..n {
                let b_i = bv.block(i * p, 0, p, q);
                // h[r·n + a] = Σ_b A_i[a, b] · g[r, b-block]
                let mut h = Tensor2::zeros(rows * n, q);
                for r in 0..rows {
                    let grow = g.row(r);
                    for ab in 0..n {
                        let hrow = h.row_mut(r * n + ab);
                        for bb in 0..n {
                            let coef = av.get(i * n + ab, bb);
                            for (o, &gv) in hrow.iter_mut().zip(&grow[bb * q..(bb + 1) * q]) {
                                *o += coef * gv;
                            }
                        }
                    }
                }
                if wants(x) {
                    gx.add_assign(&matmul_nt(&h, &b_i)?)?;
                }
                if wants(b) {
                    gb.add_block(i * p, 0, &matmul_tn(&xr, &h)?);
                }
                if wants(a) {
                    let z = matmul(&xr, &b_i)?;
                    for ab in 0..n {
                        for bb in 0..n {
                            let mut acc = 0.0;
                            for r in 0..rows {
                                let zrow = z.row(r * n + ab);
                                let grow = &g.row(r)[bb * q..(bb + 1) * q];
                                acc += zrow.iter().zip(grow).map(|(u, v)| u * v).sum::<f64>();
                            }
                            ga.set(i * n + ab, bb, acc);
                        }
                    }
                }
            }
            if wants(x) {
                accumulate(grads, x, gx.reshape(rows, n * p)?);
            }
            if wants(a) {
                accumulate(grads, a, ga);
            }
            if wants(b) {
                accumulate(grads, b, gb);
            }
        }
        &Op::Gelu(a) => {
            let d = val(a).map(|x| std_normal_cdf(x) + x * std_normal_pdf(x));
            accumulate(grads, a, g.hadamard(&d)?);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (rows, c) = xhat.shape();
            let gv = val(*gain).row(0);
            if wants(*x) {
                let mut gx = Tensor2::zeros(rows, c);
                for r in 0..rows {
                    let grow = g.row(r);
                    let hrow = xhat.row(r);
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        let d = grow[j] * gv[j];
                        mean_d += d;
                        mean_dh += d * hrow[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    let is = inv_std[r];
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        let d = grow[j] * gv[j];
                        *o = is * (d - mean_d - hrow[j] * mean_dh);
                    }
                }
                accumulate(grads, *x, gx);
            }
            if wants(*gain) {
                accumulate(grads, *gain, g.hadamard(xhat)?.sum_rows());
            }
            if let Some(b) = *bias {
                if wants(b) {
                    accumulate(grads, b, g.sum_rows());
                }
            }
        }
        &Op::Softmax(a) => {
            let y = &nodes[idx].value;
            let mut gx = Tensor2::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(u, v)| u * v).sum();
                for ((o, &gy), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *o = yv * (gy - dot);
                }
            }
            accumulate(grads, a, gx);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let scale = g.data()[0] / targets.len() as f64;
            let mut gl = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                let v = gl.get(r, t);
                gl.set(r, t, v - 1.0);
            }
            accumulate(grads, *logits, gl.scale(scale));
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => {
            let (q, k, v, batch, seq, heads) = (*q, *k, *v, *batch, *seq, *heads);
            let (qv, kv, vv) = (val(q), val(k), val(v));
            let dim = qv.cols();
            let dh = dim / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut gq = Tensor2::zeros(batch * seq, dim);
            let mut gk = Tensor2::zeros(batch * seq, dim);
            let mut gv = Tensor2::zeros(batch * seq, dim);
            for b in 0..batch {
                for h in 0..heads {
                    let p = &probs[b * heads + h];
                    let go = g.block(b * seq, h * dh, seq, dh);
                    let qb = qv.block(b * seq, h * dh, seq, dh);
                    let kb = kv.block(b * seq, h * dh, seq, dh);
                    let vb = vv.block(b * seq, h * dh, seq, dh);
                    gv.add_block(b * seq, h * dh, &matmul_tn(p, &go)?);
                    let dp = matmul_nt(&go, &vb)?;
                    let mut ds = Tensor2::zeros(seq, seq);
                    for r in 0..seq {
                        let dot: f64 = dp.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, &dpv), &pv) in ds.row_mut(r).iter_mut().zip(dp.row(r)).zip(p.row(r)) {
                            *o = pv * (dpv - dot) * scale;
                        }
                    }
                    gq.add_block(b * seq, h * dh, &matmul(&ds, &kb)?);
                    gk.add_block(b * seq, h * dh, &matmul_tn(&ds, &qb)?);
                }
            }
            if wants(q) {
                accumulate(grads, q, gq);
            }
            if wants(k) {
                accumulate(grads, k, gk);
            }
            if wants(v) {
                accumulate(grads, v, gv);
            }
        }
        &Op::MeanPool { x, seq } => {
            let (rows, c) = val(x).shape();
            let inv = 1.0 / seq as f64;
            let gx = Tensor2::from_fn(rows, c, |r, j| g.get(r / seq, j) * inv);
            accumulate(grads, x, gx);
        }
    }
    Ok(())
}
