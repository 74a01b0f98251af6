// Reverse-mode tape over a fixed op set.
//
// Every forward op appends its output value to the tape together with the
// information its backward rule needs. `backward` walks the tape once in
// reverse and returns the gradients of every parameter leaf. Leaves that are
// constants (and anything computed only from constants) get no gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{axpy, dot, mm_nn, mm_nt, mm_tn, sigmoid};
use crate::numerics::{ParamId, ParamStore, RngState, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    LstmStep { x: Var, h: Var, c: Var, w: Var, b: Var, gates: Vec<T>, tanh_c: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    SoftmaxXent { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    BceLogits { logits: Var, labels: Vec<T> },
    AttnPool { states: Vec<Var>, a: Var, lens: Vec<usize>, weights: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    WeightedSum { x: Var, w: Vec<T> },
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::LstmStep { .. } => "lstm_step",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Gather { .. } => "gather",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::BceLogits { .. } => "bce_logits",
            Op::AttnPool { .. } => "attention_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(..) => "sum",
        }
    }
}

/// Parameter gradients produced by one backward pass, keyed by store uid.
#[derive(Debug, Default)]
pub struct Grads<T> {
    entries: Vec<(u64, ParamId, Tensor<T>)>,
}

impl<T: Scalar> Grads<T> {
    pub fn iter(&self) -> impl Iterator<Item = (u64, ParamId, &Tensor<T>)> {
        self.entries.iter().map(|(s, id, g)| (*s, *id, g))
    }

    pub fn get(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(s, i, _)| *s == store.uid() && *i == id).map(|(_, _, g)| g)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    leaves: HashMap<(u64, ParamId, bool), Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(Error::Shape(msg))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), requires: Vec::new(), leaves: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Records a parameter as a differentiable leaf. Repeated calls for the
    /// same parameter return the same leaf, so all uses share one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.leaf(store, id, true)
    }

    /// Records a parameter's current value as a constant (no gradient).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.leaf(store, id, false)
    }

    /// `param` or `frozen` depending on `track`.
    pub fn leaf(&mut self, store: &ParamStore<T>, id: ParamId, track: bool) -> Var {
        let key = (store.uid(), id, track);
        if let Some(&v) = self.leaves.get(&key) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if track && store.get(id).trainable {
            self.push(value, Op::Param { store: store.uid(), id }, true)
        } else {
            self.push(value, Op::Const, false)
        };
        self.leaves.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); n * m];
        mm_nn(av.data(), bv.data(), &mut out, n, k, m);
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), req))
    }

    /// `a * b^T`; used for the tied output projection against an embedding table.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return shape_err(format!("matmul_bt {:?} x {:?}^T", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); n * m];
        mm_nt(av.data(), bv.data(), &mut out, n, k, m);
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulBt(a, b), req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), req))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[bias.0]);
        let c = av.cols();
        if bv.numel() != c {
            return shape_err(format!("add_row {:?} + {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            axpy(T::one(), bv.data(), out.row_mut(r));
        }
        let req = self.req(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return shape_err(format!("mul {:?} * {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), req))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.values[a.0].map(|x| x * s);
        let req = self.req(&[a]);
        self.push(out, Op::Scale(a, s), req)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| x.tanh());
        let req = self.req(&[a]);
        self.push(out, Op::Tanh(a), req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(sigmoid);
        let req = self.req(&[a]);
        self.push(out, Op::Sigmoid(a), req)
    }

    /// One LSTM cell step. `w` is `[(in + hidden) x 4*hidden]` with gate
    /// column blocks ordered input, forget, cell, output; `b` has `4*hidden`
    /// entries. Returns `[n x 2*hidden]` holding `[h | c]`; split it with
    /// [`Tape::slice_cols`].
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, hv, cv, wv, bv) =
            (&self.values[x.0], &self.values[h.0], &self.values[c.0], &self.values[w.0], &self.values[b.0]);
        let n = xv.rows();
        let (inp, hid) = (xv.cols(), hv.cols());
        let g4 = 4 * hid;
        if hv.rows() != n
            || cv.rows() != n
            || cv.cols() != hid
            || wv.rows() != inp + hid
            || wv.cols() != g4
            || bv.numel() != g4
        {
            return shape_err(format!(
                "lstm_step x{:?} h{:?} c{:?} w{:?} b{:?}",
                xv.shape(),
                hv.shape(),
                cv.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let mut gates = vec![T::zero(); n * g4];
        let (wx, wh) = wv.data().split_at(inp * g4);
        mm_nn(xv.data(), wx, &mut gates, n, inp, g4);
        mm_nn(hv.data(), wh, &mut gates, n, hid, g4);
        let mut out = vec![T::zero(); n * 2 * hid];
        let mut tanh_c = vec![T::zero(); n * hid];
        for r in 0..n {
            let g = &mut gates[r * g4..(r + 1) * g4];
            axpy(T::one(), bv.data(), g);
            let c_prev = cv.row(r);
            for j in 0..hid {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[hid + j]);
                let c_g = g[2 * hid + j].tanh();
                let o_g = sigmoid(g[3 * hid + j]);
                g[j] = i_g;
                g[hid + j] = f_g;
                g[2 * hid + j] = c_g;
                g[3 * hid + j] = o_g;
                let c_new = f_g * c_prev[j] + i_g * c_g;
                let tc = c_new.tanh();
                tanh_c[r * hid + j] = tc;
                out[r * 2 * hid + j] = o_g * tc;
                out[r * 2 * hid + hid + j] = c_new;
            }
        }
        let req = self.req(&[x, h, c, w, b]);
        Ok(self.push(Tensor::new(vec![n, 2 * hid], out)?, Op::LstmStep { x, h, c, w, b, gates, tanh_c }, req))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.values[x.0];
        let (n, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return shape_err(format!("slice_cols {start}+{len} of {c}"));
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, req))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.values[parts[0].0].rows();
        if parts.iter().any(|p| self.values[p.0].rows() != n) {
            return shape_err("concat_cols row mismatch".into());
        }
        let total: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(self.values[p.0].row(r));
            }
        }
        let req = self.req(parts);
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec()), req))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.values[parts[0].0].cols();
        if parts.iter().any(|p| self.values[p.0].cols() != c) {
            return shape_err("concat_rows column mismatch".into());
        }
        let mut out = Vec::new();
        let mut n = 0;
        for p in parts {
            out.extend_from_slice(self.values[p.0].data());
            n += self.values[p.0].rows();
        }
        let req = self.req(parts);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::ConcatRows(parts.to_vec()), req))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.values[table.0];
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Invalid(format!("row {i} out of range for table of {v}")));
            }
            out.extend_from_slice(tv.row(i));
        }
        let req = self.req(&[table]);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Gather { table, ids: ids.to_vec() }, req))
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = &self.values[logits.0];
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return shape_err(format!("{} targets for {n} rows", targets.len()));
        }
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Invalid(format!("target {t} out of range for {v} classes")));
            }
            let row = lv.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - mx).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            total += z.ln() + mx - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("cross-entropy with no targets".into()));
        }
        let loss = total / T::lit(count as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_xent loss".into()));
        }
        let req = self.req(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs, count },
            req,
        ))
    }

    /// Mean binary cross-entropy on `[n x 1]` logits with labels in {0, 1}.
    pub fn bce_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let lv = &self.values[logits.0];
        if lv.numel() != labels.len() || labels.is_empty() {
            return shape_err(format!("bce {:?} vs {} labels", lv.shape(), labels.len()));
        }
        let mut total = T::zero();
        for (&z, &y) in lv.data().iter().zip(labels) {
            // log(1 + e^z) - y z, computed stably
            let softplus = if z > T::zero() { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            total += softplus - y * z;
        }
        let loss = total / T::lit(labels.len() as f64);
        let req = self.req(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits, labels: labels.to_vec() }, req))
    }

    /// Linear sequence attention: per row `r`, scores `a . state_t[r]` over the
    /// first `lens[r]` steps, softmax weights, weighted sum of states.
    pub fn attention_pool(&mut self, states: &[Var], a: Var, lens: &[usize]) -> Result<Var> {
        let t_max = states.len();
        if t_max == 0 {
            return Err(Error::Empty("attention over zero timesteps".into()));
        }
        let first = &self.values[states[0].0];
        let (n, d) = (first.rows(), first.cols());
        if lens.len() != n || self.values[a.0].numel() != d {
            return shape_err(format!("attention_pool lens {} rows {n} attn {:?}", lens.len(), self.values[a.0].shape()));
        }
        if states.iter().any(|s| self.values[s.0].rows() != n || self.values[s.0].cols() != d) {
            return shape_err("attention_pool state shapes differ".into());
        }
        if lens.iter().any(|&l| l == 0 || l > t_max) {
            return Err(Error::Invalid(format!("attention lengths must be in 1..={t_max}")));
        }
        let av = self.values[a.0].data();
        let mut weights = vec![T::zero(); n * t_max];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let w = &mut weights[r * t_max..(r + 1) * t_max];
            let mut mx = T::neg_infinity();
            for t in 0..lens[r] {
                w[t] = dot(av, self.values[states[t].0].row(r));
                mx = mx.max(w[t]);
            }
            let mut z = T::zero();
            for wt in w.iter_mut().take(lens[r]) {
                *wt = (*wt - mx).exp();
                z += *wt;
            }
            for t in 0..lens[r] {
                w[t] /= z;
                axpy(w[t], self.values[states[t].0].row(r), &mut out[r * d..(r + 1) * d]);
            }
        }
        let mut inputs = states.to_vec();
        inputs.push(a);
        let req = self.req(&inputs);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::AttnPool { states: states.to_vec(), a, lens: lens.to_vec(), weights },
            req,
        ))
    }

    /// Batch normalization with batch statistics (biased variance). Returns
    /// the output and the per-column batch mean and variance so the caller
    /// can update running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = &self.values[x.0];
        let (n, k) = (xv.rows(), xv.cols());
        if n < 2 {
            return Err(Error::Invalid(format!("batch norm in train mode needs at least 2 rows, got {n}")));
        }
        let nf = T::lit(n as f64);
        let mut mean = vec![T::zero(); k];
        for r in 0..n {
            axpy(T::one(), xv.row(r), &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); k];
        for r in 0..n {
            for (j, &v) in xv.row(r).iter().enumerate() {
                let dv = v - mean[j];
                var[j] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, train: bool) -> Result<Var> {
        let xv = &self.values[x.0];
        let (n, k) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.values[gamma.0].data(), self.values[beta.0].data());
        if gv.len() != k || bv.len() != k || mean.len() != k || inv_std.len() != k {
            return shape_err(format!("batch norm over {k} columns with mismatched parameters"));
        }
        let mut xhat = vec![T::zero(); n * k];
        let mut out = vec![T::zero(); n * k];
        for r in 0..n {
            for j in 0..k {
                let h = (xv.data()[r * k + j] - mean[j]) * inv_std[j];
                xhat[r * k + j] = h;
                out[r * k + j] = gv[j] * h + bv[j];
            }
        }
        let req = self.req(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, req))
    }

    /// `sum(w * x)` for a fixed weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if self.values[x.0].numel() != w.len() {
            return shape_err(format!("weighted_sum {:?} with {} weights", self.values[x.0].shape(), w.len()));
        }
        let s = self.values[x.0].data().iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, req))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let req = self.req(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), req)
    }

    /// Reverse pass from a one-element `loss`. Returns the gradient of every
    /// parameter leaf that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.values[loss.0].shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Const | Op::Param { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient at {} node {i}", self.ops[i].name())));
            }
            self.backprop(i, &g, &mut grads);
        }
        let mut entries = Vec::new();
        for (i, op) in self.ops.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param { store, id }, Some(g)) = (op, grads[i].take()) {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", id.0)));
                }
                entries.push((*store, *id, g));
            }
        }
        Ok(Grads { entries })
    }

    /// Convenience: backward, then accumulate into the given stores.
    pub fn backward_into(&self, loss: Var, stores: &mut [&mut ParamStore<T>]) -> Result<()> {
        let grads = self.backward(loss)?;
        for s in stores.iter_mut() {
            s.accumulate(&grads);
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.ops[i] {
            Op::Const | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.buf(*a, grads) {
                    mm_nt(gd, bv.data(), ga, n, m, k);
                }
                if let Some(gb) = self.buf(*b, grads) {
                    mm_tn(av.data(), gd, gb, n, k, m);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = self.buf(*a, grads) {
                    mm_nn(gd, bv.data(), ga, n, m, k);
                }
                if let Some(gb) = self.buf(*b, grads) {
                    mm_tn(gd, av.data(), gb, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.buf(*v, grads) {
                        axpy(T::one(), gd, gv);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.buf(*a, grads) {
                    axpy(T::one(), gd, ga);
                }
                let c = g.cols();
                if let Some(gb) = self.buf(*bias, grads) {
                    for r in 0..g.rows() {
                        axpy(T::one(), &gd[r * c..(r + 1) * c], gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
                if let Some(ga) = self.buf(*a, grads) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *x += gi * y;
                    }
                }
                if let Some(gb) = self.buf(*b, grads) {
                    for ((x, &gi), &y) in gb.iter_mut().zip(gd).zip(av) {
                        *x += gi * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.buf(*a, grads) {
                    axpy(*s, gd, ga);
                }
            }
            Op::Tanh(a) => {
                let y = self.values[i].data();
                if let Some(ga) = self.buf(*a, grads) {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(gd).zip(y) {
                        *x += gi * (T::one() - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.values[i].data();
                if let Some(ga) = self.buf(*a, grads) {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(gd).zip(y) {
                        *x += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::LstmStep { x, h, c, w, b, gates, tanh_c } => {
                let (xv, hv, cv, wv) = (&self.values[x.0], &self.values[h.0], &self.values[c.0], &self.values[w.0]);
                let (n, inp, hid) = (xv.rows(), xv.cols(), hv.cols());
                let g4 = 4 * hid;
                let mut dpre = vec![T::zero(); n * g4];
                let mut dc_prev = vec![T::zero(); n * hid];
                for r in 0..n {
                    let gr = &gates[r * g4..(r + 1) * g4];
                    let dh_r = &gd[r * 2 * hid..r * 2 * hid + hid];
                    let dc_out = &gd[r * 2 * hid + hid..(r + 1) * 2 * hid];
                    let c_prev = cv.row(r);
                    let dp = &mut dpre[r * g4..(r + 1) * g4];
                    for j in 0..hid {
                        let (ig, fg, cg, og) = (gr[j], gr[hid + j], gr[2 * hid + j], gr[3 * hid + j]);
                        let tc = tanh_c[r * hid + j];
                        let dc = dc_out[j] + dh_r[j] * og * (T::one() - tc * tc);
                        let d_o = dh_r[j] * tc;
                        dp[j] = dc * cg * ig * (T::one() - ig);
                        dp[hid + j] = dc * c_prev[j] * fg * (T::one() - fg);
                        dp[2 * hid + j] = dc * ig * (T::one() - cg * cg);
                        dp[3 * hid + j] = d_o * og * (T::one() - og);
                        dc_prev[r * hid + j] = dc * fg;
                    }
                }
                let (wx, wh) = wv.data().split_at(inp * g4);
                if let Some(gx) = self.buf(*x, grads) {
                    mm_nt(&dpre, wx, gx, n, g4, inp);
                }
                if let Some(gh) = self.buf(*h, grads) {
                    mm_nt(&dpre, wh, gh, n, g4, hid);
                }
                if let Some(gc) = self.buf(*c, grads) {
                    axpy(T::one(), &dc_prev, gc);
                }
                if let Some(gw) = self.buf(*w, grads) {
                    let (gwx, gwh) = gw.split_at_mut(inp * g4);
                    mm_tn(xv.data(), &dpre, gwx, n, inp, g4);
                    mm_tn(hv.data(), &dpre, gwh, n, hid, g4);
                }
                if let Some(gb) = self.buf(*b, grads) {
                    for r in 0..n {
                        axpy(T::one(), &dpre[r * g4..(r + 1) * g4], gb);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.values[x.0].cols();
                let len = g.cols();
                if let Some(gx) = self.buf(*x, grads) {
                    for r in 0..g.rows() {
                        axpy(T::one(), &gd[r * len..(r + 1) * len], &mut gx[r * c + start..r * c + start + len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.values[p.0].cols();
                    if let Some(gp) = self.buf(*p, grads) {
                        for r in 0..g.rows() {
                            axpy(T::one(), &gd[r * total + off..r * total + off + c], &mut gp[r * c..(r + 1) * c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.values[p.0].numel();
                    if let Some(gp) = self.buf(*p, grads) {
                        axpy(T::one(), &gd[off..off + len], gp);
                    }
                    off += len;
                }
            }
            Op::Gather { table, ids } => {
                let d = g.cols();
                if let Some(gt) = self.buf(*table, grads) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &gd[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, probs, count } => {
                let v = self.values[logits.0].cols();
                let scale = gd[0] / T::lit(*count as f64);
                if let Some(gl) = self.buf(*logits, grads) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        axpy(scale, &probs[r * v..(r + 1) * v], &mut gl[r * v..(r + 1) * v]);
                        gl[r * v + t] -= scale;
                    }
                }
            }
            Op::BceLogits { logits, labels } => {
                let z = self.values[logits.0].data();
                let scale = gd[0] / T::lit(labels.len() as f64);
                if let Some(gl) = self.buf(*logits, grads) {
                    for ((x, &zi), &y) in gl.iter_mut().zip(z).zip(labels) {
                        *x += scale * (sigmoid(zi) - y);
                    }
                }
            }
            Op::AttnPool { states, a, lens, weights } => {
                let t_max = states.len();
                let out = &self.values[i];
                let d = out.cols();
                let av = self.values[a.0].data().to_vec();
                let n = out.rows();
                // ds[r,t] = w[r,t] * (g_r . s_t[r] - g_r . out_r)
                let mut ds = vec![T::zero(); n * t_max];
                for r in 0..n {
                    let gr = &gd[r * d..(r + 1) * d];
                    let base = dot(gr, out.row(r));
                    for t in 0..lens[r] {
                        let w = weights[r * t_max + t];
                        ds[r * t_max + t] = w * (dot(gr, self.values[states[t].0].row(r)) - base);
                    }
                }
                for (t, s) in states.iter().enumerate() {
                    if let Some(gs) = self.buf(*s, grads) {
                        for r in 0..n {
                            if t >= lens[r] {
                                continue;
                            }
                            let row = &mut gs[r * d..(r + 1) * d];
                            axpy(weights[r * t_max + t], &gd[r * d..(r + 1) * d], row);
                            axpy(ds[r * t_max + t], &av, row);
                        }
                    }
                }
                if let Some(ga) = self.buf(*a, grads) {
                    for r in 0..n {
                        for t in 0..lens[r] {
                            axpy(ds[r * t_max + t], self.values[states[t].0].row(r), ga);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, k) = (g.rows(), g.cols());
                let gamma_v = self.values[gamma.0].data().to_vec();
                let mut sum_g = vec![T::zero(); k];
                let mut sum_gx = vec![T::zero(); k];
                for r in 0..n {
                    for j in 0..k {
                        sum_g[j] += gd[r * k + j];
                        sum_gx[j] += gd[r * k + j] * xhat[r * k + j];
                    }
                }
                if let Some(gb) = self.buf(*beta, grads) {
                    axpy(T::one(), &sum_g, gb);
                }
                if let Some(gg) = self.buf(*gamma, grads) {
                    axpy(T::one(), &sum_gx, gg);
                }
                if let Some(gx) = self.buf(*x, grads) {
                    let nf = T::lit(n as f64);
                    for r in 0..n {
                        for j in 0..k {
                            let idx = r * k + j;
                            let s = gamma_v[j] * inv_std[j];
                            gx[idx] += if *train {
                                s * (gd[idx] - sum_g[j] / nf - xhat[idx] * sum_gx[j] / nf)
                            } else {
                                s * gd[idx]
                            };
                        }
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if let Some(gx) = self.buf(*x, grads) {
                    axpy(gd[0], w, gx);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.buf(*x, grads) {
                    gx.iter_mut().for_each(|v| *v += gd[0]);
                }
            }
        }
    }

    fn buf<'a>(&self, v: Var, grads: &'a mut [Option<Tensor<T>>]) -> Option<&'a mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.values[v.0].shape())).data_mut())
    }
}

/// A keep/drop mask with survivors pre-scaled by `1 / (1 - rate)`.
#[derive(Clone, Debug)]
pub struct DropoutMask<T> {
    mask: Tensor<T>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn sample(rows: usize, cols: usize, rate: f64, rng: &mut RngState) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(&[rows, cols], |_| if rng.uniform() < rate { T::zero() } else { keep });
        Ok(DropoutMask { mask })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let m = tape.constant(self.mask.clone());
        tape.mul(x, m)
    }
}

/// Dropout over a sequence of `[rows x cols]` steps. With `locked`, one mask
/// is drawn per sequence and reused at every step; otherwise each step draws
/// its own. Rate 0 is the identity and consumes no randomness.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, xs: &[Var], rate: f64, rng: &mut RngState, locked: bool) -> Result<Vec<Var>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 || xs.is_empty() {
        return Ok(xs.to_vec());
    }
    let (rows, cols) = (tape.value(xs[0]).rows(), tape.value(xs[0]).cols());
    let mut shared = None;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let mask = if locked {
            if shared.is_none() {
                shared = Some(DropoutMask::sample(rows, cols, rate, rng)?);
            }
            shared.clone().expect("mask drawn")
        } else {
            DropoutMask::sample(rows, cols, rate, rng)?
        };
        out.push(mask.apply(tape, x)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::scalar(3.0), true);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.mul(x, x).unwrap();
        tape.backward_into(y, &mut [&mut store]).unwrap();
        assert_eq!(store.get(id).grad.item(), 6.0);
    }

    #[test]
    fn uniform_softmax_nll_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("z", Tensor::zeros(&[1, 4]), true);
        let mut tape = Tape::new();
        let z = tape.param(&store, id);
        let loss = tape.softmax_xent(z, &[Some(3)]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
        tape.backward_into(loss, &mut [&mut store]).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.25, 0.25, 0.25, -0.75]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn two_backward_passes_accumulate_exactly() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![2, 2], vec![0.3, -0.1, 0.7, 0.2]).unwrap(), true);
        let run = |store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let w = tape.param(store, id);
            let t = tape.tanh(w);
            let p = tape.matmul(t, w).unwrap();
            let s = tape.sum(p);
            tape.backward(s).unwrap()
        };
        let g = run(&store);
        let single = g.get(&store, id).unwrap().clone();
        store.accumulate(&g);
        store.accumulate(&run(&store));
        for (a, b) in store.get(id).grad.data().iter().zip(single.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::scalar(1.0), true);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let s = tape.scale(x, f64::NAN);
        assert!(matches!(tape.backward(s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[1], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[1]));
        let flat = tape.constant(Tensor::new(vec![3, 1], vec![2.0, 2.0, 2.0]).unwrap());
        let (y, _, _) = tape.batch_norm_train(flat, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let two = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let (y, _, _) = tape.batch_norm_train(two, ones, zeros, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);

        let g0 = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 9.0, -4.0, 2.0, 7.0, 0.1]).unwrap());
        let (y, _, _) = tape.batch_norm_train(x, g0, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);

        let single = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        assert!(tape.batch_norm_train(single, ones, zeros, 1e-5).is_err());
    }

    #[test]
    fn attention_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let s: Vec<Var> = (0..3)
            .map(|t| tape.constant(Tensor::new(vec![1, 2], vec![t as f64, 2.0 * t as f64]).unwrap()))
            .collect();
        let zero = tape.constant(Tensor::zeros(&[2]));
        let p = tape.attention_pool(&s, zero, &[3]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0]);
        let p1 = tape.attention_pool(&s, zero, &[1]).unwrap();
        assert_eq!(tape.value(p1).data(), &[0.0, 0.0]);
        let a = tape.constant(Tensor::new(vec![2], vec![0.3, -1.2]).unwrap());
        let p = tape.attention_pool(&s, a, &[3]).unwrap();
        if let Op::AttnPool { weights, .. } = &tape.ops[p.0] {
            let total: f64 = weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        } else {
            unreachable!();
        }
    }

    #[test]
    fn dropout_contracts() {
        let mut tape = Tape::<f64>::new();
        let xs: Vec<Var> = (0..10).map(|_| tape.constant(Tensor::full(&[4, 8], 1.0))).collect();
        let mut rng = RngState::new(5);
        assert_eq!(dropout(&mut tape, &xs, 0.0, &mut rng, false).unwrap(), xs);
        assert!(dropout(&mut tape, &xs, 1.0, &mut rng, false).is_err());

        let a = dropout(&mut tape, &xs[..1], 0.5, &mut RngState::new(9), false).unwrap();
        let b = dropout(&mut tape, &xs[..1], 0.5, &mut RngState::new(9), false).unwrap();
        assert_eq!(tape.value(a[0]), tape.value(b[0]));

        let locked = dropout(&mut tape, &xs, 0.5, &mut rng, true).unwrap();
        let first = tape.value(locked[0]).clone();
        assert!(first.data().iter().any(|&v| v == 0.0) && first.data().iter().any(|&v| v == 2.0));
        for v in &locked {
            assert_eq!(tape.value(*v), &first);
        }
    }
}
