//! Dynamic reverse-mode tape.
//!
//! Every primitive evaluates eagerly, stores its output as a new node and
//! appends a record holding whatever its backward rule needs. `backward`
//! walks the records in reverse and accumulates gradients into every node
//! that requires them. A tape lives for one forward/backward pass.

use rand::Rng;

use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct MatmulLayout {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `a` is a single matrix reused for every batch entry of `b`.
    a_shared: bool,
    /// `b` is a single matrix reused for every batch entry of `a`.
    b_shared: bool,
}

#[derive(Debug)]
enum Op {
    Matmul { a: Var, b: Var, out: Var, layout: MatmulLayout },
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, out: Var, factor: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, out: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, out: Var },
    Gelu { x: Var, out: Var },
    Dropout { x: Var, out: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, out: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var, out: Var },
    MeanAxis { x: Var, out: Var, axis: usize },
    Reshape { x: Var, out: Var },
    Permute { x: Var, out: Var, perm: Vec<usize> },
    Select { x: Var, out: Var, axis: usize, index: usize },
    Prepend { x: Var, row: Var, out: Var },
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    flops: u64,
}

/// Per-element operation costs charged to the tape's FLOP counter.
pub mod cost {
    pub const ADD: u64 = 1;
    pub const MUL: u64 = 1;
    pub const SCALE: u64 = 1;
    pub const LAYER_NORM: u64 = 8;
    pub const SOFTMAX: u64 = 5;
    pub const GELU: u64 = 10;
    /// Per input element of a reduction.
    pub const REDUCE: u64 = 1;

    /// A `p x q` by `q x r` product.
    pub fn matmul(p: usize, q: usize, r: usize) -> u64 {
        2 * (p * q * r) as u64
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor)
    }

    /// Inserts a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// FLOPs charged by the primitives evaluated so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(tensor);
        Var(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let mut t = Tensor::new(shape, data).expect("primitive produced consistent shape");
        t.requires_grad = requires_grad;
        self.push(t)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ----------------------------------------------------------------------
    // primitives

    /// Matrix product over the last two axes. Batch axes must match exactly,
    /// or one operand must be a plain matrix that is broadcast over the
    /// other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Shape { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];

        let (layout, mut out_shape) = if batch_b.is_empty() {
            // fold every leading axis of `a` into the row dimension
            let rows = sa[..sa.len() - 1].iter().product();
            let layout = MatmulLayout { batch: 1, m: rows, k, n, a_shared: false, b_shared: true };
            (layout, sa[..sa.len() - 1].to_vec())
        } else if batch_a.is_empty() {
            let batch = batch_b.iter().product();
            let layout = MatmulLayout { batch, m, k, n, a_shared: true, b_shared: false };
            let mut s = batch_b.to_vec();
            s.push(m);
            (layout, s)
        } else if batch_a == batch_b {
            let batch = batch_a.iter().product();
            let layout = MatmulLayout { batch, m, k, n, a_shared: false, b_shared: false };
            let mut s = batch_a.to_vec();
            s.push(m);
            (layout, s)
        } else {
            return Err(mismatch());
        };
        out_shape.push(n);

        let MatmulLayout { batch, m, k, n, a_shared, b_shared } = layout;
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for i in 0..batch {
                let ao = if a_shared { 0 } else { i * m * k };
                let bo = if b_shared { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &da[ao..ao + m * k],
                    (k as isize, 1),
                    &db[bo..bo + k * n],
                    (n as isize, 1),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        self.flops += batch as u64 * cost::matmul(m, k, n);
        let out_var = self.push_result(out_shape, out, &[a, b]);
        self.ops.push(Op::Matmul { a, b, out: out_var, layout });
        Ok(out_var)
    }

    /// Elementwise sum. `b` may have the shape of a trailing suffix of `a`
    /// and is then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape { op: "add", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let shape = sa.to_vec();
        let db = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(db.len())
            .flat_map(|row| row.iter().zip(db).map(|(x, y)| x + y))
            .collect();
        self.flops += cost::ADD * out.len() as u64;
        let out_var = self.push_result(shape, out, &[a, b]);
        self.ops.push(Op::Add { a, b, out: out_var });
        Ok(out_var)
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.flops += cost::MUL * out.len() as u64;
        let shape = self.shape(a).to_vec();
        let out_var = self.push_result(shape, out, &[a, b]);
        self.ops.push(Op::Mul { a, b, out: out_var });
        Ok(out_var)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        self.flops += cost::SCALE * out.len() as u64;
        let shape = self.shape(x).to_vec();
        let out_var = self.push_result(shape, out, &[x]);
        self.ops.push(Op::Scale { x, out: out_var, factor });
        out_var
    }

    /// Standardizes each row over the last axis (population variance) and
    /// applies `gain`/`bias`. A row whose variance plus `eps` is zero maps
    /// to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if !(eps >= 0.0) {
            return Err(Error::config("layer_norm.eps", "must be non-negative"));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let bvals = self.data(bias);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let is = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bvals[j];
            }
        }
        self.flops += cost::LAYER_NORM * out.len() as u64;
        let shape = self.shape(x).to_vec();
        let out_var = self.push_result(shape, out, &[x, gain, bias]);
        self.ops.push(Op::LayerNorm { x, gain, bias, out: out_var, xhat, inv_std });
        Ok(out_var)
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        let mut out = self.data(x).to_vec();
        out.chunks_exact_mut(d).for_each(softmax_in_place);
        self.flops += cost::SOFTMAX * out.len() as u64;
        let shape = self.shape(x).to_vec();
        let out_var = self.push_result(shape, out, &[x]);
        self.ops.push(Op::Softmax { x, out: out_var });
        out_var
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * std_normal_cdf(v)).collect();
        self.flops += cost::GELU * out.len() as u64;
        let shape = self.shape(x).to_vec();
        let out_var = self.push_result(shape, out, &[x]);
        self.ops.push(Op::Gelu { x, out: out_var });
        out_var
    }

    /// Inverted dropout. The data is split into `rngs.len()` equal contiguous
    /// chunks and chunk `i` draws its mask from `rngs[i]`, so a batch can
    /// carry one stream per sample. Outside training, or at rate 0, `x` is
    /// returned unchanged and nothing is recorded.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, training: bool, rngs: &mut [R]) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("model.dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        if rngs.is_empty() || n % rngs.len() != 0 {
            return Err(Error::Usage(format!(
                "dropout over {n} elements cannot be split into {} streams",
                rngs.len()
            )));
        }
        let chunk = n / rngs.len();
        let keep = 1.0 / (1.0 - rate);
        let mut mask = vec![0.0; n];
        for (m, rng) in mask.chunks_exact_mut(chunk).zip(rngs.iter_mut()) {
            for v in m {
                *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
            }
        }
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let out_var = self.push_result(shape, out, &[x]);
        self.ops.push(Op::Dropout { x, out: out_var, mask });
        Ok(out_var)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed through log-sum-exp. `logits` is `[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape { op: "cross_entropy", lhs: shape, rhs: vec![labels.len()] });
        }
        let c = shape[1];
        if let Some(i) = labels.iter().position(|&l| l >= c) {
            return Err(Error::Data(format!(
                "label {} of sample {i} is outside [0, {c})",
                labels[i]
            )));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &z[b * c..(b + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - row[label];
            for j in 0..c {
                probs[b * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        self.flops += cost::SOFTMAX * z.len() as u64;
        let out_var = self.push_result(vec![1], vec![loss], &[logits]);
        self.ops.push(Op::CrossEntropy { logits, out: out_var, labels: labels.to_vec(), probs });
        Ok(out_var)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.flops += cost::REDUCE * self.value(x).numel() as u64;
        let out_var = self.push_result(vec![1], vec![s], &[x]);
        self.ops.push(Op::Sum { x, out: out_var });
        out_var
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::Shape { op: "mean_axis", lhs: shape, rhs: vec![axis] });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xs[(o * len + j) * inner..(o * len + j + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        self.flops += cost::REDUCE * xs.len() as u64;
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out_var = self.push_result(out_shape, out, &[x]);
        self.ops.push(Op::MeanAxis { x, out: out_var, axis });
        Ok(out_var)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape.to_vec() });
        }
        let data = self.data(x).to_vec();
        let out_var = self.push_result(shape.to_vec(), data, &[x]);
        self.ops.push(Op::Reshape { x, out: out_var });
        Ok(out_var)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape { op: "permute", lhs: shape, rhs: perm.to_vec() });
        }
        let (out, out_shape) = permute_data(self.data(x), &shape, perm);
        let out_var = self.push_result(out_shape, out, &[x]);
        self.ops.push(Op::Permute { x, out: out_var, perm: perm.to_vec() });
        Ok(out_var)
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] || shape.len() < 2 {
            return Err(Error::Shape { op: "select", lhs: shape, rhs: vec![axis, index] });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            out.extend_from_slice(&xs[start..start + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out_var = self.push_result(out_shape, out, &[x]);
        self.ops.push(Op::Select { x, out: out_var, axis, index });
        Ok(out_var)
    }

    /// Prepends `row` (shape `[D]`) to every `[N, D]` matrix of `x`
    /// (shape `[.., N, D]`), giving `[.., N + 1, D]`.
    pub fn prepend(&mut self, x: Var, row: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if shape.len() < 2 || self.shape(row) != [d] {
            return Err(Error::Shape { op: "prepend", lhs: shape, rhs: self.shape(row).to_vec() });
        }
        let n = shape[shape.len() - 2];
        let outer = self.value(x).numel() / (n * d);
        let xs = self.data(x);
        let r = self.data(row);
        let mut out = Vec::with_capacity(outer * (n + 1) * d);
        for o in 0..outer {
            out.extend_from_slice(r);
            out.extend_from_slice(&xs[o * n * d..(o + 1) * n * d]);
        }
        let mut out_shape = shape;
        let len = out_shape.len();
        out_shape[len - 2] = n + 1;
        let out_var = self.push_result(out_shape, out, &[x, row]);
        self.ops.push(Op::Prepend { x, row, out: out_var });
        Ok(out_var)
    }

    // ----------------------------------------------------------------------
    // backward

    /// Seeds `d loss / d loss = 1` and propagates gradients to every node
    /// that requires them. Gradients accumulate into existing buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].accumulate_grad(&[1.0]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    /// Runs `f` with the gradient buffer of `v` (zero-initialized on first
    /// use) while the rest of the tape stays readable.
    fn with_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tape)) {
        if !self.needs_grad(v) {
            return;
        }
        let n = self.nodes[v.0].numel();
        let mut g = self.nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut g, self);
        self.nodes[v.0].grad = Some(g);
    }

    fn backward_op(&mut self, op: &Op) {
        let out = op_output(op);
        let Some(gout) = self.nodes[out.0].grad.take() else {
            return;
        };
        match op {
            Op::Matmul { a, b, layout, .. } => {
                let MatmulLayout { batch, m, k, n, a_shared, b_shared } = *layout;
                // dA = dC . B^T
                self.with_grad(*a, |ga, t| {
                    let db = t.data(*b);
                    for i in 0..batch {
                        let ao = if a_shared { 0 } else { i * m * k };
                        let bo = if b_shared { 0 } else { i * k * n };
                        gemm(
                            m,
                            n,
                            k,
                            &gout[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            &db[bo..bo + k * n],
                            (1, n as isize),
                            &mut ga[ao..ao + m * k],
                        );
                    }
                });
                // dB = A^T . dC
                self.with_grad(*b, |gb, t| {
                    let da = t.data(*a);
                    for i in 0..batch {
                        let ao = if a_shared { 0 } else { i * m * k };
                        let bo = if b_shared { 0 } else { i * k * n };
                        gemm(
                            k,
                            m,
                            n,
                            &da[ao..ao + m * k],
                            (1, k as isize),
                            &gout[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            &mut gb[bo..bo + k * n],
                        );
                    }
                });
            }
            Op::Add { a, b, .. } => {
                self.with_grad(*a, |ga, _| add_into(ga, &gout));
                self.with_grad(*b, |gb, _| {
                    for chunk in gout.chunks_exact(gb.len()) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Mul { a, b, .. } => {
                self.with_grad(*a, |ga, t| {
                    for ((g, d), y) in ga.iter_mut().zip(&gout).zip(t.data(*b)) {
                        *g += d * y;
                    }
                });
                self.with_grad(*b, |gb, t| {
                    for ((g, d), x) in gb.iter_mut().zip(&gout).zip(t.data(*a)) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale { x, factor, .. } => {
                self.with_grad(*x, |gx, _| {
                    gx.iter_mut().zip(&gout).for_each(|(g, d)| *g += factor * d);
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std, .. } => {
                let d = self.nodes[gain.0].numel();
                self.with_grad(*gain, |gg, _| {
                    for (grow, hrow) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.with_grad(*bias, |gb, _| {
                    for grow in gout.chunks_exact(d) {
                        add_into(gb, grow);
                    }
                });
                self.with_grad(*x, |gx, t| {
                    let g = t.data(*gain);
                    let mut dh = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &gout[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * g[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += is * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Softmax { x, out } => {
                let d = self.nodes[out.0].last_dim();
                self.with_grad(*x, |gx, t| {
                    let y = t.data(*out);
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(d).zip(gout.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu { x, .. } => {
                self.with_grad(*x, |gx, t| {
                    for ((g, d), &v) in gx.iter_mut().zip(&gout).zip(t.data(*x)) {
                        *g += d * gelu_derivative(v);
                    }
                });
            }
            Op::Dropout { x, mask, .. } => {
                self.with_grad(*x, |gx, _| {
                    for ((g, d), m) in gx.iter_mut().zip(&gout).zip(mask) {
                        *g += d * m;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs, .. } => {
                let c = probs.len() / labels.len();
                let scale = gout[0] / labels.len() as f64;
                self.with_grad(*logits, |gl, _| {
                    for (b, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[b * c + j] += scale * (probs[b * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum { x, .. } => {
                self.with_grad(*x, |gx, _| gx.iter_mut().for_each(|g| *g += gout[0]));
            }
            Op::MeanAxis { x, axis, .. } => {
                let shape = self.nodes[x.0].shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                self.with_grad(*x, |gx, _| {
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        let src = &gout[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                        }
                    }
                });
            }
            Op::Reshape { x, .. } => {
                self.with_grad(*x, |gx, _| add_into(gx, &gout));
            }
            Op::Permute { x, out, perm } => {
                let out_shape = self.nodes[out.0].shape().to_vec();
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(&gout, &out_shape, &inverse);
                self.with_grad(*x, |gx, _| add_into(gx, &back));
            }
            Op::Select { x, axis, index, .. } => {
                let shape = self.nodes[x.0].shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                self.with_grad(*x, |gx, _| {
                    for o in 0..outer {
                        let start = (o * len + index) * inner;
                        add_into(&mut gx[start..start + inner], &gout[o * inner..(o + 1) * inner]);
                    }
                });
            }
            Op::Prepend { x, row, .. } => {
                let d = self.nodes[row.0].numel();
                let shape = self.nodes[x.0].shape().to_vec();
                let n = shape[shape.len() - 2];
                let outer = self.nodes[x.0].numel() / (n * d);
                self.with_grad(*x, |gx, _| {
                    for o in 0..outer {
                        let src = &gout[(o * (n + 1) + 1) * d..(o + 1) * (n + 1) * d];
                        add_into(&mut gx[o * n * d..(o + 1) * n * d], src);
                    }
                });
                self.with_grad(*row, |gr, _| {
                    for o in 0..outer {
                        add_into(gr, &gout[o * (n + 1) * d..(o * (n + 1) + 1) * d]);
                    }
                });
            }
        }
        self.nodes[out.0].grad = Some(gout);
    }
}

fn op_output(op: &Op) -> Var {
    match op {
        Op::Matmul { out, .. }
        | Op::Add { out, .. }
        | Op::Mul { out, .. }
        | Op::Scale { out, .. }
        | Op::LayerNorm { out, .. }
        | Op::Softmax { out, .. }
        | Op::Gelu { out, .. }
        | Op::Dropout { out, .. }
        | Op::CrossEntropy { out, .. }
        | Op::Sum { out, .. }
        | Op::MeanAxis { out, .. }
        | Op::Reshape { out, .. }
        | Op::Permute { out, .. }
        | Op::Select { out, .. }
        | Op::Prepend { out, .. } => *out,
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    loop {
        let base: usize = idx[..rank - 1].iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        // odometer over all but the last axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// `c += a . b` for row-major `c` (`m x n`); `a` is `m x k` and `b` is
/// `k x n`, each given with its own (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * pdf
}
