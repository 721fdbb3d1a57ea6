use std::cell::RefCell;
use std::ops::Range;
use std::sync::Arc;

use super::gemm::gemm;
use super::{Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Sub {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Mul {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Scale(usize, f64),
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<(usize, usize)>),
    SliceRows {
        a: usize,
        start: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        a: usize,
        rstd: Vec<f64>,
    },
    MeanRows(usize),
    MeanCols(usize),
    Mean(usize),
    Sum(usize),
    SqL2(usize),
    NormalizeRows {
        a: usize,
        norms: Vec<f64>,
    },
    CosineRows {
        a: usize,
        b: usize,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    NllSum {
        logp: usize,
        targets: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// A tape is single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of leaf nodes produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (numel / last.max(1), last)
}

fn matrix_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(
            op,
            format!("expected a matrix, got shape {shape:?}"),
        )),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(id)
    }

    fn view(&self, v: Var) -> (Vec<usize>, Arc<Vec<f64>>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        (n.shape.clone(), Arc::clone(&n.value), n.requires_grad)
    }

    /// Registers a tensor as a leaf. Gradients are kept only when `requires_grad`.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(id)
    }

    pub fn constant(&self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn data(&self, v: Var) -> Arc<Vec<f64>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let (shape, data, _) = self.view(v);
        Tensor::from_shared(shape, data)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (sb, db, rb) = self.view(b);
        let (m, k) = matrix_dims(&sa, "matmul")?;
        let (k2, n) = matrix_dims(&sb, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {m}×{k} · {k2}×{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &da, false, &db, false, &mut out, 0.0);
        Ok(self.record(vec![m, n], out, Op::MatMul(a.0, b.0), ra || rb))
    }

    fn broadcast_kind(&self, op: &'static str, sa: &[usize], sb: &[usize]) -> Result<bool> {
        if sa == sb {
            return Ok(false);
        }
        let nb: usize = sb.iter().product();
        let last = *sa.last().unwrap_or(&1);
        let row_like = sb.len() == 1 || (sb.len() == 2 && sb[0] == 1);
        if row_like && nb == last {
            Ok(true)
        } else {
            Err(Error::shape(
                op,
                format!("cannot combine {sa:?} with {sb:?}"),
            ))
        }
    }

    fn elementwise(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, bool) -> Op,
    ) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (sb, db, rb) = self.view(b);
        let broadcast = self.broadcast_kind(op_name, &sa, &sb)?;
        let out: Vec<f64> = if broadcast {
            let c = db.len();
            da.iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i % c]))
                .collect()
        } else {
            da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.record(sa, out, make(a.0, b.0, broadcast), ra || rb))
    }

    /// Elementwise sum; `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(
            "add",
            a,
            b,
            |x, y| x + y,
            |a, b, broadcast| Op::Add { a, b, broadcast },
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(
            "sub",
            a,
            b,
            |x, y| x - y,
            |a, b, broadcast| Op::Sub { a, b, broadcast },
        )
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(
            "mul",
            a,
            b,
            |x, y| x * y,
            |a, b, broadcast| Op::Mul { a, b, broadcast },
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let (sa, da, ra) = self.view(a);
        let out = da.iter().map(|x| x * s).collect();
        self.record(sa, out, Op::Scale(a.0, s), ra)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (r, c) = matrix_dims(&sa, "transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = da[i * c + j];
            }
        }
        Ok(self.record(vec![c, r], out, Op::Transpose(a.0), ra))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let n: usize = shape.iter().product();
        if n != da.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{sa:?} -> {shape:?}")));
        }
        Ok(self.record(shape, da.as_ref().clone(), Op::Reshape(a.0), ra))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let mut cols = None;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (s, d, r) = self.view(p);
            let (pr, pc) = matrix_dims(&s, "concat_rows")?;
            if *cols.get_or_insert(pc) != pc {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column count {pc} differs"),
                ));
            }
            rows += pr;
            out.extend_from_slice(&d);
            rg |= r;
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.record(vec![rows, cols.unwrap()], out, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.view(p)).collect();
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for (s, _, _) in &views {
            let (pr, pc) = matrix_dims(s, "concat_cols")?;
            if *rows.get_or_insert(pr) != pr {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row count {pr} differs"),
                ));
            }
            widths.push(pc);
        }
        let rows = rows.unwrap();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for ((_, d, _), &w) in views.iter().zip(&widths) {
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        let rg = views.iter().any(|v| v.2);
        let ids = parts.iter().zip(&widths).map(|(p, &w)| (p.0, w)).collect();
        Ok(self.record(vec![rows, total], out, Op::ConcatCols(ids), rg))
    }

    pub fn slice_rows(&self, a: Var, range: Range<usize>) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (r, c) = matrix_dims(&sa, "slice_rows")?;
        if range.start >= range.end || range.end > r {
            return Err(Error::Index {
                op: "slice_rows",
                index: range.end,
                size: r,
            });
        }
        let out = da[range.start * c..range.end * c].to_vec();
        Ok(self.record(
            vec![range.len(), c],
            out,
            Op::SliceRows {
                a: a.0,
                start: range.start,
            },
            ra,
        ))
    }

    pub fn slice_cols(&self, a: Var, range: Range<usize>) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (r, c) = matrix_dims(&sa, "slice_cols")?;
        if range.start >= range.end || range.end > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: range.end,
                size: c,
            });
        }
        let w = range.len();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&da[i * c + range.start..i * c + range.end]);
        }
        Ok(self.record(
            vec![r, w],
            out,
            Op::SliceCols {
                a: a.0,
                start: range.start,
            },
            ra,
        ))
    }

    /// Embedding lookup: selects rows of `table` by index.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (st, dt, rt) = self.view(table);
        let (r, c) = matrix_dims(&st, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    size: r,
                });
            }
            out.extend_from_slice(&dt[i * c..(i + 1) * c]);
        }
        Ok(self.record(
            vec![ids.len(), c],
            out,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            rt,
        ))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (sa, da, ra) = self.view(a);
        let out = da.iter().map(|&x| f(x)).collect();
        self.record(sa, out, op, ra)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu_fwd, Op::Gelu(a.0))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self, a: Var) -> Var {
        let (sa, da, ra) = self.view(a);
        let (rows, c) = rows_cols(&sa);
        let mut out = vec![0.0; da.len()];
        for i in 0..rows {
            let x = &da[i * c..(i + 1) * c];
            let y = &mut out[i * c..(i + 1) * c];
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (yj, &xj) in y.iter_mut().zip(x) {
                *yj = (xj - m).exp();
                s += *yj;
            }
            y.iter_mut().for_each(|v| *v /= s);
        }
        self.record(sa, out, Op::Softmax(a.0), ra)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        let (sa, da, ra) = self.view(a);
        let (rows, c) = rows_cols(&sa);
        let mut out = vec![0.0; da.len()];
        for i in 0..rows {
            let x = &da[i * c..(i + 1) * c];
            // Shifting by the max and summing the other terms through ln_1p
            // keeps near-zero log-probabilities accurate.
            let (arg, m) =
                x.iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    });
            let rest: f64 = x
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &v)| (v - m).exp())
                .sum();
            let shift = rest.ln_1p();
            for (o, &xj) in out[i * c..(i + 1) * c].iter_mut().zip(x) {
                *o = (xj - m) - shift;
            }
        }
        self.record(sa, out, Op::LogSoftmax(a.0), ra)
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm(&self, a: Var) -> Var {
        let (sa, da, ra) = self.view(a);
        let (rows, c) = rows_cols(&sa);
        let mut out = vec![0.0; da.len()];
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let x = &da[i * c..(i + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &xj) in out[i * c..(i + 1) * c].iter_mut().zip(x) {
                *o = (xj - mean) * r;
            }
            rstd.push(r);
        }
        self.record(sa, out, Op::LayerNorm { a: a.0, rstd }, ra)
    }

    /// Mean over axis 0 of a matrix; result is `1 × cols`.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (r, c) = matrix_dims(&sa, "mean_rows")?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(&da[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.record(vec![1, c], out, Op::MeanRows(a.0), ra))
    }

    /// Mean over axis 1 of a matrix; result is `rows × 1`.
    pub fn mean_cols(&self, a: Var) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (r, c) = matrix_dims(&sa, "mean_cols")?;
        let out = (0..r)
            .map(|i| da[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        Ok(self.record(vec![r, 1], out, Op::MeanCols(a.0), ra))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            0 => self.mean_rows(a),
            1 => self.mean_cols(a),
            _ => Err(Error::shape(
                "mean_axis",
                format!("axis {axis} on a matrix"),
            )),
        }
    }

    pub fn mean(&self, a: Var) -> Var {
        let (_, da, ra) = self.view(a);
        let m = da.iter().sum::<f64>() / da.len() as f64;
        self.record(vec![1], vec![m], Op::Mean(a.0), ra)
    }

    pub fn sum(&self, a: Var) -> Var {
        let (_, da, ra) = self.view(a);
        let s = da.iter().sum::<f64>();
        self.record(vec![1], vec![s], Op::Sum(a.0), ra)
    }

    /// Sum of squares of every entry.
    pub fn sq_l2(&self, a: Var) -> Var {
        let (_, da, ra) = self.view(a);
        let s = da.iter().map(|x| x * x).sum::<f64>();
        self.record(vec![1], vec![s], Op::SqL2(a.0), ra)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (r, c) = matrix_dims(&sa, "normalize_rows")?;
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let x = &da[i * c..(i + 1) * c];
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            for (o, &xj) in out[i * c..(i + 1) * c].iter_mut().zip(x) {
                *o = xj / n;
            }
            norms.push(n);
        }
        Ok(self.record(sa, out, Op::NormalizeRows { a: a.0, norms }, ra))
    }

    /// Row-wise cosine similarity of two equally shaped matrices; result has one entry per row.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, da, ra) = self.view(a);
        let (sb, db, rb) = self.view(b);
        let (r, c) = matrix_dims(&sa, "cosine_rows")?;
        if sa != sb {
            return Err(Error::shape("cosine_rows", format!("{sa:?} vs {sb:?}")));
        }
        let mut out = Vec::with_capacity(r);
        let mut na = Vec::with_capacity(r);
        let mut nb = Vec::with_capacity(r);
        for i in 0..r {
            let x = &da[i * c..(i + 1) * c];
            let y = &db[i * c..(i + 1) * c];
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            out.push(dot / (nx * ny));
            na.push(nx);
            nb.push(ny);
        }
        Ok(self.record(
            vec![r],
            out,
            Op::CosineRows {
                a: a.0,
                b: b.0,
                na,
                nb,
            },
            ra || rb,
        ))
    }

    /// Negative log-likelihood summed over rows: `−Σ_i logp[i, targets[i]]`.
    pub fn nll_sum(&self, logp: Var, targets: &[usize]) -> Result<Var> {
        let (sl, dl, rl) = self.view(logp);
        let (r, c) = matrix_dims(&sl, "nll_sum")?;
        if targets.len() != r {
            return Err(Error::shape(
                "nll_sum",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let mut s = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    op: "nll_sum",
                    index: t,
                    size: c,
                });
            }
            s -= dl[i * c + t];
        }
        Ok(self.record(
            vec![1],
            vec![s],
            Op::NllSum {
                logp: logp.0,
                targets: targets.to_vec(),
            },
            rl,
        ))
    }

    /// Cross-entropy of logits against class targets, averaged over rows.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits);
        let s = self.nll_sum(lp, targets)?;
        Ok(self.scale(s, 1.0 / targets.len() as f64))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let numel = self.nodes.borrow()[loss.0].value.len();
        if numel != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got {numel} elements"
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Backpropagates explicit output cotangents, summing their contributions.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            let node = nodes
                .get(v.0)
                .ok_or_else(|| Error::contract("seed refers to a foreign tape"))?;
            if g.len() != node.value.len() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed has {} values for {} outputs",
                        g.len(),
                        node.value.len()
                    ),
                ));
            }
            if !node.requires_grad {
                continue;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.clone()),
            }
            top = top.max(v.0 + 1);
        }
        for id in (0..top).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[id];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn col_sum_into(dst: &mut [f64], g: &[f64], sign: f64) {
    let c = dst.len();
    for (i, &v) in g.iter().enumerate() {
        dst[i % c] += sign * v;
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let value = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if let Some(da) = slot(grads, nodes, *a) {
                gemm(m, n, k, g, false, &nodes[*b].value, true, da, 1.0);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                gemm(k, m, n, &nodes[*a].value, true, g, false, db, 1.0);
            }
        }
        Op::Add { a, b, broadcast } | Op::Sub { a, b, broadcast } => {
            let sign = if matches!(node.op, Op::Sub { .. }) {
                -1.0
            } else {
                1.0
            };
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                if *broadcast {
                    col_sum_into(db, g, sign);
                } else {
                    db.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                }
            }
        }
        Op::Mul { a, b, broadcast } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let c = bv.len();
            if let Some(da) = slot(grads, nodes, *a) {
                for (i, d) in da.iter_mut().enumerate() {
                    let bj = if *broadcast { bv[i % c] } else { bv[i] };
                    *d += g[i] * bj;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    let j = if *broadcast { i % c } else { i };
                    db[j] += gi * av[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(dp) = slot(grads, nodes, p) {
                    dp.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(d, v)| *d += v);
                }
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let rows = g.len() / total;
            let mut off = 0;
            for &(p, w) in parts {
                if let Some(dp) = slot(grads, nodes, p) {
                    for i in 0..rows {
                        let src = &g[i * total + off..i * total + off + w];
                        dp[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
                off += w;
            }
        }
        Op::SliceRows { a, start } => {
            let c = nodes[*a].shape[1];
            if let Some(da) = slot(grads, nodes, *a) {
                da[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            }
        }
        Op::SliceCols { a, start } => {
            let c = nodes[*a].shape[1];
            let w = node.shape[1];
            let rows = node.shape[0];
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..rows {
                    da[i * c + start..i * c + start + w]
                        .iter_mut()
                        .zip(&g[i * w..(i + 1) * w])
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let c = nodes[*table].shape[1];
            if let Some(dt) = slot(grads, nodes, *table) {
                for (k, &i) in ids.iter().enumerate() {
                    dt[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::Relu(a) | Op::Gelu(a) | Op::Abs(a) => {
            let x = &nodes[*a].value;
            let deriv: fn(f64) -> f64 = match node.op {
                Op::Relu(_) => |x| if x > 0.0 { 1.0 } else { 0.0 },
                Op::Gelu(_) => gelu_grad,
                _ => |x: f64| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
            };
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x.iter()) {
                    *d += gi * deriv(xi);
                }
            }
        }
        Op::Softmax(a) => {
            let (rows, c) = rows_cols(&node.shape);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..rows {
                    let y = &value[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gi).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] += y[j] * (gi[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let (rows, c) = rows_cols(&node.shape);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..rows {
                    let y = &value[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let s: f64 = gi.iter().sum();
                    for j in 0..c {
                        da[i * c + j] += gi[j] - y[j].exp() * s;
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            let (rows, c) = rows_cols(&node.shape);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..rows {
                    let y = &value[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let mg = gi.iter().sum::<f64>() / c as f64;
                    let mgy = gi.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[i * c + j] += rstd[i] * (gi[j] - mg - y[j] * mgy);
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j] / r as f64;
                    }
                }
            }
        }
        Op::MeanCols(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[i] / c as f64;
                    }
                }
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SqL2(a) => {
            let x = &nodes[*a].value;
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut()
                    .zip(x.iter())
                    .for_each(|(d, xi)| *d += 2.0 * xi * g[0]);
            }
        }
        Op::NormalizeRows { a, norms } => {
            let (rows, c) = rows_cols(&node.shape);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..rows {
                    let y = &value[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gi).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] += (gi[j] - y[j] * dot) / norms[i];
                    }
                }
            }
        }
        Op::CosineRows { a, b, na, nb } => {
            let c = nodes[*a].shape[1];
            let av = Arc::clone(&nodes[*a].value);
            let bv = Arc::clone(&nodes[*b].value);
            for (target, this, other, nt, no) in [(*a, &av, &bv, na, nb), (*b, &bv, &av, nb, na)] {
                if let Some(dt) = slot(grads, nodes, target) {
                    for i in 0..g.len() {
                        let cos = value[i];
                        for j in 0..c {
                            let k = i * c + j;
                            dt[k] += g[i]
                                * (other[k] / (nt[i] * no[i]) - cos * this[k] / (nt[i] * nt[i]));
                        }
                    }
                }
            }
        }
        Op::NllSum { logp, targets } => {
            let c = nodes[*logp].shape[1];
            if let Some(dl) = slot(grads, nodes, *logp) {
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] -= g[0];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let t = Tape::new();
        let eye = t.constant(&mat(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = mat(3, 2, &[1., 2., 3., 4., 5., 6.]);
        let av = t.constant(&a);
        let y = t.matmul(eye, av).unwrap();
        assert_eq!(t.value(y).data(), a.data());
    }

    #[test]
    fn matmul_shape_error_is_descriptive() {
        let t = Tape::new();
        let a = t.constant(&Tensor::zeros(vec![2, 3]));
        let b = t.constant(&Tensor::zeros(vec![2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("2×3 · 2×3"), "{msg}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let t = Tape::new();
        let x = t.constant(&Tensor::zeros(vec![1, 3]));
        let y = t.softmax(x);
        for v in t.data(y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let t = Tape::new();
        let x = t.constant(&Tensor::filled(vec![1, 3], 4.2));
        let y = t.layer_norm(x);
        assert!(t.data(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gather_out_of_range() {
        let t = Tape::new();
        let table = t.constant(&Tensor::zeros(vec![4, 2]));
        assert!(matches!(
            t.gather_rows(table, &[1, 4]),
            Err(Error::Index { index: 4, .. })
        ));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap(), true);
        let loss = t.sq_l2(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let t = Tape::new();
        let z = [0.3, -1.2, 2.0, 0.5];
        let x = t.leaf(&mat(1, 4, &z), true);
        let loss = t.cross_entropy(x, &[2]).unwrap();
        let g = t.backward(loss).unwrap();
        let m = z.iter().copied().fold(f64::MIN, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        for (j, gj) in g.get(x).unwrap().iter().enumerate() {
            let p = (z[j] - m).exp() / s;
            let want = p - if j == 2 { 1.0 } else { 0.0 };
            assert!((gj - want).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::zeros(vec![2]), true);
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_record_no_gradient() {
        let t = Tape::new();
        let x = t.constant(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let w = t.leaf(&Tensor::vector(vec![3.0, 4.0]).unwrap(), true);
        let y = t.mul(x, w).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let t = Tape::new();
        let x = t.constant(&mat(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(
            t.normalize_rows(x),
            Err(Error::DegenerateEmbedding { row: 1 })
        ));
    }
}
