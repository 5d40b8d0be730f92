//! Forward operators and their reverse-mode gradient rules.
//!
//! Every op validates input shapes, computes the output, rejects non-finite
//! results, and (when the tape is recording and an input requires a
//! gradient) appends a node. Gradient rules accumulate additively so shared
//! inputs collect contributions from every use.

use super::{Result, Tape, Tensor, TensorError};

pub(crate) struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    pub(crate) output: Tensor,
}

enum Op {
    Matmul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sigmoid,
    Relu,
    NegLogSigmoid,
    Sum,
    Transpose,
    LogSoftmaxRows,
    CausalSoftmaxRows,
    /// Saved per-column root-mean-square denominators.
    RmsNormCols { rms: Vec<f64> },
    GatherNll { targets: Vec<usize>, mask: Vec<bool>, included: usize },
    GatherCols { ids: Vec<usize> },
    SliceRows { start: usize },
    /// Starting row of each input inside the concatenated output.
    ConcatRows { offsets: Vec<usize> },
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// out += a (r x k) . b (k x c), row-major, ikj loop order.
fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * c..(kk + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a (r x k) . b^T where b is (c x k): row-row dot products.
fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * c + j] += acc;
        }
    }
}

/// out += a^T . b where a is (k x r) and b is (k x c).
fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for kk in 0..k {
        let arow = &a[kk * r..(kk + 1) * r];
        let brow = &b[kk * c..(kk + 1) * c];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    fn finish(
        &self,
        op: Op,
        name: &'static str,
        inputs: &[&Tensor],
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Result<Tensor> {
        check_finite(name, &data)?;
        let out = Tensor::from_vec(rows, cols, data).expect("shape validated by caller");
        if self.should_record(inputs) {
            self.record(Node {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: out.clone(),
            })?;
        }
        Ok(out)
    }

    /// Matrix product `a . b`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (r, k, k2, c) = (a.rows(), a.cols(), b.rows(), b.cols());
        if k != k2 {
            return Err(shape_err("matmul", format!("{r}x{k} . {k2}x{c}")));
        }
        let mut data = vec![0.0; r * c];
        a.with_data(|ad| b.with_data(|bd| matmul_nn(ad, bd, &mut data, r, k, c)));
        self.finish(Op::Matmul, "matmul", &[a, b], r, c, data)
    }

    fn elementwise(
        &self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(shape_err(
                name,
                format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
            ));
        }
        let data = a.with_data(|ad| {
            b.with_data(|bd| ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>())
        });
        self.finish(op, name, &[a, b], a.rows(), a.cols(), data)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let data = a.with_data(|ad| ad.iter().map(|&x| factor * x).collect());
        self.finish(Op::Scale(factor), "scale", &[a], a.rows(), a.cols(), data)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.with_data(|ad| ad.iter().map(|&x| sigmoid_scalar(x)).collect());
        self.finish(Op::Sigmoid, "sigmoid", &[a], a.rows(), a.cols(), data)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.with_data(|ad| ad.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect());
        self.finish(Op::Relu, "relu", &[a], a.rows(), a.cols(), data)
    }

    /// `-ln(sigmoid(x))` elementwise, computed in softplus form so large
    /// negative inputs cannot overflow.
    pub fn neg_log_sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.with_data(|ad| {
            ad.iter().map(|&x| (-x).max(0.0) + (-x.abs()).exp().ln_1p()).collect()
        });
        self.finish(Op::NegLogSigmoid, "neg_log_sigmoid", &[a], a.rows(), a.cols(), data)
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total = a.with_data(|ad| ad.iter().sum());
        self.finish(Op::Sum, "sum", &[a], 1, 1, vec![total])
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let mut data = vec![0.0; r * c];
        a.with_data(|ad| {
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = ad[i * c + j];
                }
            }
        });
        self.finish(Op::Transpose, "transpose", &[a], c, r, data)
    }

    /// Log-softmax over each row, computed with the max-shift trick.
    pub fn log_softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        if c == 0 {
            return Err(shape_err("log_softmax_rows", "zero columns".into()));
        }
        let mut data = vec![0.0; r * c];
        a.with_data(|ad| {
            for i in 0..r {
                let row = &ad[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
                for (o, &x) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = x - lse;
                }
            }
        });
        self.finish(Op::LogSoftmaxRows, "log_softmax_rows", &[a], r, c, data)
    }

    /// Softmax over each row restricted to columns <= row index; the upper
    /// triangle is exactly zero. Requires a square input (attention scores).
    pub fn causal_softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        if r != c {
            return Err(shape_err("causal_softmax_rows", format!("{r}x{c} is not square")));
        }
        let mut data = vec![0.0; r * c];
        a.with_data(|ad| {
            for i in 0..r {
                let row = &ad[i * c..(i + 1) * c];
                let visible = &row[..=i];
                let max = visible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = visible.iter().map(|&x| (x - max).exp()).sum();
                for (j, &x) in visible.iter().enumerate() {
                    data[i * c + j] = (x - max).exp() / denom;
                }
            }
        });
        self.finish(Op::CausalSoftmaxRows, "causal_softmax_rows", &[a], r, c, data)
    }

    /// Normalizes each column by its root mean square. Parameter-free.
    pub fn rms_norm_cols(&self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        if r == 0 {
            return Err(shape_err("rms_norm_cols", "zero rows".into()));
        }
        let mut data = vec![0.0; r * c];
        let mut rms = vec![0.0; c];
        a.with_data(|ad| {
            for j in 0..c {
                let mut sq = 0.0;
                for i in 0..r {
                    let x = ad[i * c + j];
                    sq += x * x;
                }
                let denom = (sq / r as f64 + eps).sqrt();
                rms[j] = denom;
                for i in 0..r {
                    data[i * c + j] = ad[i * c + j] / denom;
                }
            }
        });
        self.finish(Op::RmsNormCols { rms }, "rms_norm_cols", &[a], r, c, data)
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is
    /// true. Input is a matrix of log-probabilities (one row per position).
    pub fn gather_nll(&self, log_probs: &Tensor, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        let (r, c) = (log_probs.rows(), log_probs.cols());
        if targets.len() != r || mask.len() != r {
            return Err(shape_err(
                "gather_nll",
                format!("{r} rows vs {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Contract(format!(
                "gather_nll: target id {t} out of range for {c} classes"
            )));
        }
        let included = mask.iter().filter(|&&m| m).count();
        if included == 0 {
            return Err(TensorError::Contract(
                "gather_nll: degenerate batch, mask selects no positions".into(),
            ));
        }
        let total = log_probs.with_data(|ld| {
            let mut acc = 0.0;
            for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                if m {
                    acc -= ld[i * c + t];
                }
            }
            acc / included as f64
        });
        self.finish(
            Op::GatherNll { targets: targets.to_vec(), mask: mask.to_vec(), included },
            "gather_nll",
            &[log_probs],
            1,
            1,
            vec![total],
        )
    }

    /// Column lookup: output column `t` is input column `ids[t]`. This is
    /// the embedding op under the columns-as-positions layout.
    pub fn gather_cols(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (r, c) = (table.rows(), table.cols());
        if let Some(&id) = ids.iter().find(|&&id| id >= c) {
            return Err(TensorError::Contract(format!(
                "gather_cols: id {id} out of range for {c} columns"
            )));
        }
        let l = ids.len();
        let mut data = vec![0.0; r * l];
        table.with_data(|td| {
            for i in 0..r {
                for (t, &id) in ids.iter().enumerate() {
                    data[i * l + t] = td[i * c + id];
                }
            }
        });
        self.finish(Op::GatherCols { ids: ids.to_vec() }, "gather_cols", &[table], r, l, data)
    }

    /// Rows `start..start + len` as a view copy.
    pub fn slice_rows(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        if start + len > r || len == 0 {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = a.with_data(|ad| ad[start * c..(start + len) * c].to_vec());
        self.finish(Op::SliceRows { start }, "slice_rows", &[a], len, c, data)
    }

    /// Stacks inputs vertically. All inputs must share a column count.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let c = first.cols();
        let mut offsets = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            if p.cols() != c {
                return Err(shape_err(
                    "concat_rows",
                    format!("column counts differ: {} vs {}", p.cols(), c),
                ));
            }
            offsets.push(total);
            total += p.rows();
        }
        let mut data = Vec::with_capacity(total * c);
        for p in parts {
            p.with_data(|pd| data.extend_from_slice(pd));
        }
        self.finish(Op::ConcatRows { offsets }, "concat_rows", parts, total, c, data)
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Node {
    /// Applies this node's gradient rule: reads the output gradient and
    /// accumulates into each input that requires one. A node whose output
    /// never received a gradient lies off the path to the loss and is
    /// skipped.
    pub(crate) fn backprop(&self) -> Result<()> {
        let Some(g_out) = self.output.grad() else {
            return Ok(());
        };
        match &self.op {
            Op::Matmul => {
                let (a, b) = (&self.inputs[0], &self.inputs[1]);
                let (r, k, c) = (a.rows(), a.cols(), b.cols());
                if a.requires_grad() {
                    let mut da = vec![0.0; r * k];
                    b.with_data(|bd| matmul_nt(&g_out, bd, &mut da, r, c, k));
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * c];
                    a.with_data(|ad| matmul_tn(ad, &g_out, &mut db, k, r, c));
                    b.accumulate_grad(&db);
                }
            }
            Op::Add => {
                for input in &self.inputs {
                    if input.requires_grad() {
                        input.accumulate_grad(&g_out);
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (&self.inputs[0], &self.inputs[1]);
                if a.requires_grad() {
                    a.accumulate_grad(&g_out);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = g_out.iter().map(|&g| -g).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Mul => {
                let (a, b) = (&self.inputs[0], &self.inputs[1]);
                if a.requires_grad() {
                    let da = b.with_data(|bd| {
                        g_out.iter().zip(bd).map(|(&g, &y)| g * y).collect::<Vec<f64>>()
                    });
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db = a.with_data(|ad| {
                        g_out.iter().zip(ad).map(|(&g, &x)| g * x).collect::<Vec<f64>>()
                    });
                    b.accumulate_grad(&db);
                }
            }
            Op::Scale(factor) => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let da: Vec<f64> = g_out.iter().map(|&g| factor * g).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Sigmoid => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let da = self.output.with_data(|s| {
                        g_out.iter().zip(s).map(|(&g, &sv)| g * sv * (1.0 - sv)).collect::<Vec<f64>>()
                    });
                    a.accumulate_grad(&da);
                }
            }
            Op::Relu => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let da = self.output.with_data(|out| {
                        g_out
                            .iter()
                            .zip(out)
                            .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
                            .collect::<Vec<f64>>()
                    });
                    a.accumulate_grad(&da);
                }
            }
            Op::NegLogSigmoid => {
                // d/dx [-ln sigmoid(x)] = sigmoid(x) - 1
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let da = a.with_data(|ad| {
                        g_out
                            .iter()
                            .zip(ad)
                            .map(|(&g, &x)| g * (sigmoid_scalar(x) - 1.0))
                            .collect::<Vec<f64>>()
                    });
                    a.accumulate_grad(&da);
                }
            }
            Op::Sum => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let da = vec![g_out[0]; a.len()];
                    a.accumulate_grad(&da);
                }
            }
            Op::Transpose => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let (r, c) = (a.rows(), a.cols());
                    let mut da = vec![0.0; r * c];
                    // output is c x r, so g_out[j * r + i] maps to (i, j).
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g_out[j * r + i];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::LogSoftmaxRows => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let (r, c) = (a.rows(), a.cols());
                    let mut da = vec![0.0; r * c];
                    self.output.with_data(|y| {
                        for i in 0..r {
                            let g_row = &g_out[i * c..(i + 1) * c];
                            let y_row = &y[i * c..(i + 1) * c];
                            let g_sum: f64 = g_row.iter().sum();
                            for j in 0..c {
                                da[i * c + j] = g_row[j] - y_row[j].exp() * g_sum;
                            }
                        }
                    });
                    a.accumulate_grad(&da);
                }
            }
            Op::CausalSoftmaxRows => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let (r, c) = (a.rows(), a.cols());
                    let mut da = vec![0.0; r * c];
                    self.output.with_data(|p| {
                        for i in 0..r {
                            let g_row = &g_out[i * c..(i + 1) * c];
                            let p_row = &p[i * c..(i + 1) * c];
                            let mut dot = 0.0;
                            for j in 0..=i {
                                dot += g_row[j] * p_row[j];
                            }
                            for j in 0..=i {
                                da[i * c + j] = p_row[j] * (g_row[j] - dot);
                            }
                        }
                    });
                    a.accumulate_grad(&da);
                }
            }
            Op::RmsNormCols { rms } => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let (r, c) = (a.rows(), a.cols());
                    let mut da = vec![0.0; r * c];
                    a.with_data(|ad| {
                        for j in 0..c {
                            let denom = rms[j];
                            let mut dot = 0.0;
                            for i in 0..r {
                                dot += g_out[i * c + j] * ad[i * c + j];
                            }
                            let shrink = dot / (r as f64 * denom * denom * denom);
                            for i in 0..r {
                                da[i * c + j] = g_out[i * c + j] / denom - ad[i * c + j] * shrink;
                            }
                        }
                    });
                    a.accumulate_grad(&da);
                }
            }
            Op::GatherNll { targets, mask, included } => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let c = a.cols();
                    let mut da = vec![0.0; a.len()];
                    let g = g_out[0] / *included as f64;
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if m {
                            da[i * c + t] = -g;
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::GatherCols { ids } => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let (r, c) = (a.rows(), a.cols());
                    let l = ids.len();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for (t, &id) in ids.iter().enumerate() {
                            da[i * c + id] += g_out[i * l + t];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::SliceRows { start } => {
                let a = &self.inputs[0];
                if a.requires_grad() {
                    let c = a.cols();
                    let mut da = vec![0.0; a.len()];
                    da[start * c..start * c + g_out.len()].copy_from_slice(&g_out);
                    a.accumulate_grad(&da);
                }
            }
            Op::ConcatRows { offsets } => {
                let c = self.output.cols();
                for (input, &offset) in self.inputs.iter().zip(offsets) {
                    if input.requires_grad() {
                        let start = offset * c;
                        input.accumulate_grad(&g_out[start..start + input.len()]);
                    }
                }
            }
        }
        Ok(())
    }
}
