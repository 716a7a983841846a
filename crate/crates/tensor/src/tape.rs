use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lane decomposition of a shape around one axis: `outer * len * inner`.
#[derive(Debug, Clone, Copy)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn of(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    fn at(&self, o: usize, a: usize, i: usize) -> usize {
        (o * self.len + a) * self.inner + i
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    AddConst(usize),
    MulConst {
        x: usize,
        factor: Vec<f64>,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: usize,
        lanes: Lanes,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<(usize, usize)>,
    },
    SumAll(usize),
    MeanAll(usize),
    SumAxis {
        x: usize,
        lanes: Lanes,
        mean: bool,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    GatherPerRow {
        x: usize,
        idx: Vec<usize>,
        k: usize,
    },
    ScatterCols {
        x: usize,
        idx: Vec<usize>,
        k: usize,
    },
    L2Normalize {
        x: usize,
        denom: Vec<f64>,
        clamped: Vec<bool>,
    },
    NormalizeLinear {
        x: usize,
        denom: Vec<f64>,
        guarded: Vec<bool>,
    },
    Abs(usize),
    Powf {
        x: usize,
        p: f64,
    },
    Relu(usize),
    Exp(usize),
    Log {
        x: usize,
        eps: f64,
    },
    Reshape(usize),
    SliceCols {
        x: usize,
        start: usize,
        end: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run record of a forward pass.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it
/// and [`Tape::backward`] simply walks the node list in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forgets every node recorded after the first `len`. Handles to the
    /// dropped nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, mk(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a vector along the last axis of `x` (row broadcast).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(bias));
        let w = tx.last_dim();
        if tb.numel() != w || tb.rank() != 1 {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(
            value,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
            },
        ))
    }

    /// Adds a non-differentiable constant of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.val(x);
        if tx.shape() != c.shape() {
            return Err(mismatch("add_const", tx, c));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::AddConst(x.0)))
    }

    /// Multiplies elementwise by a non-differentiable constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.val(x);
        if tx.shape() != c.shape() {
            return Err(mismatch("mul_const", tx, c));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(
            value,
            Op::MulConst {
                x: x.0,
                factor: c.data().to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.val(x).map(|v| v * factor);
        self.push(value, Op::Scale { x: x.0, factor })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.val(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let (rows, cols) = rank2("transpose", tx)?;
        let src = tx.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::from_parts(vec![cols, rows], out);
        Ok(self.push(value, Op::Transpose { x: x.0, rows, cols }))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.val(x);
        let lanes = Lanes::of("softmax", tx.shape(), axis)?;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..lanes.outer {
            for i in 0..lanes.inner {
                let mut max = f64::NEG_INFINITY;
                for a in 0..lanes.len {
                    max = max.max(src[lanes.at(o, a, i)]);
                }
                let mut total = 0.0;
                for a in 0..lanes.len {
                    let idx = lanes.at(o, a, i);
                    let e = (src[idx] - max).exp();
                    out[idx] = e;
                    total += e;
                }
                for a in 0..lanes.len {
                    out[lanes.at(o, a, i)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax { x: x.0, lanes }))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let w = tx.last_dim();
        if tg.numel() != w || tb.numel() != w {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = if w == 0 { 0 } else { tx.numel() / w };
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + crate::LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..w {
                let h = (row[j] - mean) * inv;
                xhat[r * w + j] = h;
                out[r * w + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Concatenates along the last axis. Leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Rank {
            op: "concat",
            expected: 1,
            shape: vec![],
        })?;
        let lead = {
            let s = self.val(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut inputs = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let t = self.val(*p);
            let s = t.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", self.val(*first), t));
            }
            inputs.push((p.0, t.last_dim()));
            total += t.last_dim();
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &(id, w) in &inputs {
            let src = self.nodes[id].value.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Concat { inputs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).sum());
        self.push(value, Op::SumAll(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let n = t.numel().max(1) as f64;
        let value = Tensor::scalar(t.sum() / n);
        self.push(value, Op::MeanAll(x.0))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let tx = self.val(x);
        let lanes = Lanes::of("sum_axis", tx.shape(), axis)?;
        let mut out = vec![0.0; lanes.outer * lanes.inner];
        let scale = if mean && lanes.len > 0 {
            1.0 / lanes.len as f64
        } else {
            1.0
        };
        for o in 0..lanes.outer {
            for a in 0..lanes.len {
                for i in 0..lanes.inner {
                    out[o * lanes.inner + i] += tx.data()[lanes.at(o, a, i)] * scale;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            Op::SumAxis {
                x: x.0,
                lanes,
                mean,
            },
        ))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Averages out `axis`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Row lookup `table[idx[i]]`; the gradient scatter-adds back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        let (rows, w) = rank2("gather_rows", tt)?;
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::from_parts(vec![idx.len(), w], out);
        Ok(self.push(
            value,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[i, j] = x[i, idx[i][j]]` for a rank-2 `x`; every row picks `k` columns.
    pub fn gather_per_row(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let tx = self.val(x);
        let (n, m) = rank2("gather_per_row", tx)?;
        if idx.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "gather_per_row",
                lhs: tx.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let k = idx.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n * k);
        let mut out = Vec::with_capacity(n * k);
        for (i, row) in idx.iter().enumerate() {
            if row.len() != k {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_per_row",
                    lhs: vec![k],
                    rhs: vec![row.len()],
                });
            }
            for &j in row {
                if j >= m {
                    return Err(TensorError::Index {
                        op: "gather_per_row",
                        index: j,
                        bound: m,
                    });
                }
                flat.push(j);
                out.push(tx.data()[i * m + j]);
            }
        }
        let value = Tensor::from_parts(vec![n, k], out);
        Ok(self.push(
            value,
            Op::GatherPerRow {
                x: x.0,
                idx: flat,
                k,
            },
        ))
    }

    /// Inverse of [`Tape::gather_per_row`]: places row `i` of `x` (`[n, k]`) at
    /// columns `idx[i]` of a zero `[n, width]` matrix. Repeated columns add.
    pub fn scatter_cols(&mut self, x: Var, idx: &[Vec<usize>], width: usize) -> Result<Var> {
        let tx = self.val(x);
        let (n, k) = rank2("scatter_cols", tx)?;
        if idx.len() != n || idx.iter().any(|r| r.len() != k) {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![0.0; n * width];
        let mut flat = Vec::with_capacity(n * k);
        for (i, row) in idx.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c >= width {
                    return Err(TensorError::Index {
                        op: "scatter_cols",
                        index: c,
                        bound: width,
                    });
                }
                out[i * width + c] += tx.data()[i * k + j];
                flat.push(c);
            }
        }
        let value = Tensor::from_parts(vec![n, width], out);
        Ok(self.push(
            value,
            Op::ScatterCols {
                x: x.0,
                idx: flat,
                k,
            },
        ))
    }

    /// `x / max(‖x‖, eps)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.val(x);
        let w = tx.last_dim().max(1);
        let rows = tx.numel() / w;
        let mut out = tx.data().to_vec();
        let mut denom = vec![0.0; rows];
        let mut clamped = vec![false; rows];
        for r in 0..rows {
            let row = &mut out[r * w..(r + 1) * w];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = if norm > eps { norm } else { eps };
            clamped[r] = norm <= eps;
            denom[r] = d;
            row.iter_mut().for_each(|v| *v /= d);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            value,
            Op::L2Normalize {
                x: x.0,
                denom,
                clamped,
            },
        )
    }

    /// `x / Σx` along the last axis. A sum smaller than `eps` in magnitude is
    /// replaced by `±eps` (treated as a constant).
    pub fn normalize_linear(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.val(x);
        let w = tx.last_dim().max(1);
        let rows = tx.numel() / w;
        let mut out = tx.data().to_vec();
        let mut denom = vec![0.0; rows];
        let mut guarded = vec![false; rows];
        for r in 0..rows {
            let row = &mut out[r * w..(r + 1) * w];
            let s: f64 = row.iter().sum();
            let d = if s.abs() >= eps {
                s
            } else {
                guarded[r] = true;
                if s < 0.0 {
                    -eps
                } else {
                    eps
                }
            };
            denom[r] = d;
            row.iter_mut().for_each(|v| *v /= d);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            value,
            Op::NormalizeLinear {
                x: x.0,
                denom,
                guarded,
            },
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.val(x).map(f64::abs);
        self.push(value, Op::Abs(x.0))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let value = self.val(x).map(|v| v.powf(p));
        self.push(value, Op::Powf { x: x.0, p })
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.val(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.val(x).map(f64::exp);
        self.push(value, Op::Exp(x.0))
    }

    /// `ln(x + eps)`.
    pub fn log(&mut self, x: Var, eps: f64) -> Var {
        let value = self.val(x).map(|v| (v + eps).ln());
        self.push(value, Op::Log { x: x.0, eps })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x.0)))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x);
        let w = tx.last_dim();
        if start > end || end > w {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                bound: w,
            });
        }
        let rows = if w == 0 { 0 } else { tx.numel() / w };
        let nw = end - start;
        let mut out = Vec::with_capacity(rows * nw);
        for r in 0..rows {
            out.extend_from_slice(&tx.data()[r * w + start..r * w + end]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = nw;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::SliceCols { x: x.0, start, end }))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Nodes are visited in exact reverse recording order. Nodes the loss does
    /// not depend on keep a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.val(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: usize| self.nodes[id].value.data();
        let numel = |id: usize| self.nodes[id].value.numel();
        macro_rules! slot {
            ($id:expr) => {
                grad_slot(&self.nodes, grads, $id)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (d, v) in slot!(*a).iter_mut().zip(g) {
                    *d += v;
                }
                for (d, v) in slot!(*b).iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Sub(a, b) => {
                for (d, v) in slot!(*a).iter_mut().zip(g) {
                    *d += v;
                }
                for (d, v) in slot!(*b).iter_mut().zip(g) {
                    *d -= v;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = slot!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
                let gb = slot!(*b);
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
            Op::AddBias { x, bias } => {
                for (d, v) in slot!(*x).iter_mut().zip(g) {
                    *d += v;
                }
                let gb = slot!(*bias);
                let w = gb.len().max(1);
                for row in g.chunks(w) {
                    for (d, v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::AddConst(x) => {
                for (d, v) in slot!(*x).iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::MulConst { x, factor } => {
                for ((d, v), f) in slot!(*x).iter_mut().zip(g).zip(factor) {
                    *d += v * f;
                }
            }
            Op::Scale { x, factor } => {
                for (d, v) in slot!(*x).iter_mut().zip(g) {
                    *d += v * factor;
                }
            }
            Op::AddScalar(x) => {
                for (d, v) in slot!(*x).iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                // da = g · bᵀ
                let ga = slot!(*a);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &vb[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        ga[i * k + p] += s;
                    }
                }
                // db = aᵀ · g
                let gb = slot!(*b);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = va[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            dst[j] += av * grow[j];
                        }
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                let gx = slot!(*x);
                for i in 0..*rows {
                    for j in 0..*cols {
                        gx[i * cols + j] += g[j * rows + i];
                    }
                }
            }
            Op::Softmax { x, lanes } => {
                let y = node.value.data();
                let gx = slot!(*x);
                for o in 0..lanes.outer {
                    for i in 0..lanes.inner {
                        let mut dot = 0.0;
                        for a in 0..lanes.len {
                            let idx = lanes.at(o, a, i);
                            dot += g[idx] * y[idx];
                        }
                        for a in 0..lanes.len {
                            let idx = lanes.at(o, a, i);
                            gx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gamma = val(*gain);
                let w = gamma.len();
                let rows = inv_std.len();
                {
                    let gg = slot!(*gain);
                    for r in 0..rows {
                        for j in 0..w {
                            gg[j] += g[r * w + j] * xhat[r * w + j];
                        }
                    }
                }
                {
                    let gb = slot!(*bias);
                    for r in 0..rows {
                        for j in 0..w {
                            gb[j] += g[r * w + j];
                        }
                    }
                }
                let gx = slot!(*x);
                let nf = w as f64;
                let mut dxhat = vec![0.0; w];
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..w {
                        let d = g[r * w + j] * gamma[j];
                        dxhat[j] = d;
                        s1 += d;
                        s2 += d * xhat[r * w + j];
                    }
                    let inv = inv_std[r];
                    for j in 0..w {
                        gx[r * w + j] += inv / nf * (nf * dxhat[j] - s1 - xhat[r * w + j] * s2);
                    }
                }
            }
            Op::Concat { inputs } => {
                let total: usize = inputs.iter().map(|(_, w)| w).sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for &(id, w) in inputs {
                    let gx = slot!(id);
                    for r in 0..rows {
                        for j in 0..w {
                            gx[r * w + j] += g[r * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::SumAll(x) => {
                for d in slot!(*x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::MeanAll(x) => {
                let n = numel(*x).max(1) as f64;
                for d in slot!(*x).iter_mut() {
                    *d += g[0] / n;
                }
            }
            Op::SumAxis { x, lanes, mean } => {
                let scale = if *mean && lanes.len > 0 {
                    1.0 / lanes.len as f64
                } else {
                    1.0
                };
                let gx = slot!(*x);
                for o in 0..lanes.outer {
                    for a in 0..lanes.len {
                        for i in 0..lanes.inner {
                            gx[lanes.at(o, a, i)] += g[o * lanes.inner + i] * scale;
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let w = self.nodes[*table].value.last_dim();
                let gt = slot!(*table);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..w {
                        gt[i * w + j] += g[r * w + j];
                    }
                }
            }
            Op::GatherPerRow { x, idx, k } => {
                let m = self.nodes[*x].value.last_dim();
                let gx = slot!(*x);
                for (flat, &c) in idx.iter().enumerate() {
                    let i = flat / k;
                    gx[i * m + c] += g[flat];
                }
            }
            Op::ScatterCols { x, idx, k } => {
                let width = node.value.last_dim();
                let gx = slot!(*x);
                for (flat, &c) in idx.iter().enumerate() {
                    let i = flat / k;
                    gx[flat] += g[i * width + c];
                }
            }
            Op::L2Normalize { x, denom, clamped } => {
                let y = node.value.data();
                let w = self.nodes[*x].value.last_dim().max(1);
                let gx = slot!(*x);
                for r in 0..denom.len() {
                    let row = r * w..(r + 1) * w;
                    if clamped[r] {
                        for j in row {
                            gx[j] += g[j] / denom[r];
                        }
                    } else {
                        let dot: f64 = row.clone().map(|j| g[j] * y[j]).sum();
                        for j in row {
                            gx[j] += (g[j] - y[j] * dot) / denom[r];
                        }
                    }
                }
            }
            Op::NormalizeLinear { x, denom, guarded } => {
                let xv = val(*x);
                let w = self.nodes[*x].value.last_dim().max(1);
                let gx = slot!(*x);
                for r in 0..denom.len() {
                    let row = r * w..(r + 1) * w;
                    let d = denom[r];
                    if guarded[r] {
                        for j in row {
                            gx[j] += g[j] / d;
                        }
                    } else {
                        let gx_dot: f64 = row.clone().map(|j| g[j] * xv[j]).sum();
                        for j in row {
                            gx[j] += g[j] / d - gx_dot / (d * d);
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xv = val(*x);
                let gx = slot!(*x);
                for i in 0..g.len() {
                    let s = if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gx[i] += g[i] * s;
                }
            }
            Op::Powf { x, p } => {
                let xv = val(*x);
                let gx = slot!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] * p * xv[i].powf(p - 1.0);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let gx = slot!(*x);
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let gx = slot!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            }
            Op::Log { x, eps } => {
                let xv = val(*x);
                let gx = slot!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] / (xv[i] + eps);
                }
            }
            Op::Reshape(x) => {
                for (d, v) in slot!(*x).iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::SliceCols { x, start, end } => {
                let w = self.nodes[*x].value.last_dim();
                let nw = end - start;
                let rows = if nw == 0 { 0 } else { g.len() / nw };
                let gx = slot!(*x);
                for r in 0..rows {
                    for j in 0..nw {
                        gx[r * w + start + j] += g[r * nw + j];
                    }
                }
            }
        }
    }
}

fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> &'g mut [f64] {
    let n = nodes[id].value.numel();
    grads[id].get_or_insert_with(|| vec![0.0; n])
}

/// Result of [`Tape::backward`]: one gradient per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether the loss reached `v` at all.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
