use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation over 2-D tensors and replays it in
/// reverse to compute gradients.
///
/// Parameters are borrowed from a [`ParamStore`], so one store can feed
/// many independent tapes. A tape is single-use per forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_slots: usize,
}

const LAYER_NORM_EPS: f64 = 1e-12;

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Gradient accumulated into a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.param_slots = self.param_slots.max(store.len());
        self.nodes.push(Node {
            value: Cow::Borrowed(&store.get(id).value),
            op: Op::Param(id),
            requires_grad: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Gradients of every parameter leaf, summed per parameter.
    pub fn param_grads(&self) -> Gradients {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; self.param_slots];
        for (node, g) in self.nodes.iter().zip(&self.leaf_grads) {
            let (Op::Param(id), Some(g)) = (&node.op, g) else {
                continue;
            };
            match &mut out[id.0] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Gradients(out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a, b]);
        self.push(out, op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    /// `(m x k) · (k x n) -> (m x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a `1 x n` row (a bias) to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(row).numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let b = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            data[r * n..(r + 1) * n]
                .iter_mut()
                .zip(b)
                .for_each(|(v, bv)| *v += bv);
        }
        let rg = self.needs(&[x, row]);
        Ok(self.push(Tensor::from_vec(vec![m, n], data)?, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    /// Side-by-side concatenation; all inputs must have the same row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Shape {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?;
        let m = self.dims(first).0;
        for &x in xs {
            if self.dims(x).0 != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(x).to_vec(),
                });
            }
        }
        let total: usize = xs.iter().map(|&x| self.dims(x).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        let rg = self.needs(xs);
        Ok(self.push(
            Tensor::from_vec(vec![m, total], data)?,
            Op::ConcatCols(xs.to_vec()),
            rg,
        ))
    }

    /// Stacks inputs vertically; all inputs must have the same column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Shape {
            op: "concat_rows",
            left: vec![],
            right: vec![],
        })?;
        let n = self.dims(first).1;
        for &x in xs {
            if self.dims(x).1 != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(x).to_vec(),
                });
            }
        }
        let total: usize = xs.iter().map(|&x| self.dims(x).0).sum();
        let mut data = Vec::with_capacity(total * n);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let rg = self.needs(xs);
        Ok(self.push(
            Tensor::from_vec(vec![total, n], data)?,
            Op::ConcatRows(xs.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + width > n {
            return Err(Error::Shape {
                op: "slice_cols",
                left: self.shape(x).to_vec(),
                right: vec![start, width],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + width]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_vec(vec![m, width], data)?, Op::SliceCols(x, start), rg))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + count > m {
            return Err(Error::Shape {
                op: "slice_rows",
                left: self.shape(x).to_vec(),
                right: vec![start, count],
            });
        }
        let data = self.value(x).data()[start * n..(start + count) * n].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_vec(vec![count, n], data)?, Op::SliceRows(x, start), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        let rg = self.needs(&[x]);
        self.push(
            Tensor::from_vec(vec![n, m], data).expect("transpose shape"),
            Op::Transpose(x),
            rg,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v < 0.0 { 0.0 } else { v }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Natural logarithm.
    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    /// `max(x, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, |v| if v < floor { floor } else { v }, Op::ClampMin(x, floor))
    }

    /// Softmax along `axis`: 0 normalizes each column, 1 each row.
    /// Max-subtracted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if axis > 1 {
            return Err(Error::Shape {
                op: "softmax",
                left: self.shape(x).to_vec(),
                right: vec![axis],
            });
        }
        let mut data = self.value(x).data().to_vec();
        let (outer, inner, stride_outer, stride_inner) = if axis == 1 {
            (m, n, n, 1)
        } else {
            (n, m, 1, n)
        };
        for o in 0..outer {
            let idx = |i: usize| o * stride_outer + i * stride_inner;
            let max = (0..inner).map(|i| data[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..inner {
                let e = (data[idx(i)] - max).exp();
                data[idx(i)] = e;
                sum += e;
            }
            for i in 0..inner {
                data[idx(i)] /= sum;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_vec(vec![m, n], data)?, Op::Softmax(x, axis), rg))
    }

    /// Per-row layer normalization followed by elementwise `gain` and `bias`
    /// (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        for v in [gain, bias] {
            if self.value(v).numel() != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let xh = (row[c] - mean) * rs;
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity unless `train` is set and `rate > 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, k)| v * k).collect();
        let out = Tensor::from_vec(t.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Dropout(x, mask), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed from scratch each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf | Op::Param(_) => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let n = nodes[b.0].value.cols();
                    if nodes[a.0].requires_grad {
                        let ga = slot(&mut grads, nodes, *a);
                        // dA = G · Bᵀ
                        gemm((m, n, k), &g, (n, 1), nodes[b.0].value.data(), (1, n), ga, 1.0);
                    }
                    if nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, nodes, *b);
                        // dB = Aᵀ · G
                        gemm((k, m, n), nodes[a.0].value.data(), (1, k), &g, (n, 1), gb, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    acc_with(&mut grads, nodes, *a, |ga| add_into(ga, &g));
                    acc_with(&mut grads, nodes, *b, |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    acc_with(&mut grads, nodes, *a, |ga| add_into(ga, &g));
                    acc_with(&mut grads, nodes, *b, |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, d)| *x -= d)
                    });
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc_with(&mut grads, nodes, *a, |ga| {
                        for ((x, d), o) in ga.iter_mut().zip(&g).zip(bv) {
                            *x += d * o;
                        }
                    });
                    acc_with(&mut grads, nodes, *b, |gb| {
                        for ((x, d), o) in gb.iter_mut().zip(&g).zip(av) {
                            *x += d * o;
                        }
                    });
                }
                Op::AddRow(x, row) => {
                    let n = nodes[x.0].value.cols();
                    acc_with(&mut grads, nodes, *x, |gx| add_into(gx, &g));
                    acc_with(&mut grads, nodes, *row, |gr| {
                        for chunk in g.chunks(n) {
                            add_into(gr, chunk);
                        }
                    });
                }
                Op::Scale(x, c) => acc_with(&mut grads, nodes, *x, |gx| {
                    gx.iter_mut().zip(&g).for_each(|(v, d)| *v += c * d)
                }),
                Op::AddScalar(x) => acc_with(&mut grads, nodes, *x, |gx| add_into(gx, &g)),
                Op::ConcatCols(xs) => {
                    let total = node.value.cols();
                    let m = node.value.rows();
                    let mut offset = 0;
                    for x in xs {
                        let w = nodes[x.0].value.cols();
                        acc_with(&mut grads, nodes, *x, |gx| {
                            for r in 0..m {
                                add_into(
                                    &mut gx[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut offset = 0;
                    for x in xs {
                        let len = nodes[x.0].value.numel();
                        acc_with(&mut grads, nodes, *x, |gx| {
                            add_into(gx, &g[offset..offset + len])
                        });
                        offset += len;
                    }
                }
                Op::SliceCols(x, start) => {
                    let n = nodes[x.0].value.cols();
                    let (m, w) = (node.value.rows(), node.value.cols());
                    acc_with(&mut grads, nodes, *x, |gx| {
                        for r in 0..m {
                            add_into(
                                &mut gx[r * n + start..r * n + start + w],
                                &g[r * w..(r + 1) * w],
                            );
                        }
                    });
                }
                Op::SliceRows(x, start) => {
                    let n = node.value.cols();
                    acc_with(&mut grads, nodes, *x, |gx| {
                        add_into(&mut gx[start * n..start * n + g.len()], &g)
                    });
                }
                Op::Transpose(x) => {
                    let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    acc_with(&mut grads, nodes, *x, |gx| {
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] += g[c * m + r];
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => acc_with(&mut grads, nodes, *x, |gx| {
                    for ((v, d), s) in gx.iter_mut().zip(&g).zip(y) {
                        *v += d * s * (1.0 - s);
                    }
                }),
                Op::Tanh(x) => acc_with(&mut grads, nodes, *x, |gx| {
                    for ((v, d), t) in gx.iter_mut().zip(&g).zip(y) {
                        *v += d * (1.0 - t * t);
                    }
                }),
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc_with(&mut grads, nodes, *x, |gx| {
                        for ((v, d), xi) in gx.iter_mut().zip(&g).zip(xv) {
                            if *xi > 0.0 {
                                *v += d;
                            }
                        }
                    })
                }
                Op::Exp(x) => acc_with(&mut grads, nodes, *x, |gx| {
                    for ((v, d), e) in gx.iter_mut().zip(&g).zip(y) {
                        *v += d * e;
                    }
                }),
                Op::Log(x) => {
                    let xv = nodes[x.0].value.data();
                    acc_with(&mut grads, nodes, *x, |gx| {
                        for ((v, d), xi) in gx.iter_mut().zip(&g).zip(xv) {
                            *v += d / xi;
                        }
                    })
                }
                Op::ClampMin(x, floor) => {
                    let xv = nodes[x.0].value.data();
                    acc_with(&mut grads, nodes, *x, |gx| {
                        for ((v, d), xi) in gx.iter_mut().zip(&g).zip(xv) {
                            if *xi >= *floor {
                                *v += d;
                            }
                        }
                    })
                }
                Op::Softmax(x, axis) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let (outer, inner, so, si) = if *axis == 1 {
                        (m, n, n, 1)
                    } else {
                        (n, m, 1, n)
                    };
                    acc_with(&mut grads, nodes, *x, |gx| {
                        for o in 0..outer {
                            let idx = |i: usize| o * so + i * si;
                            let dot: f64 = (0..inner).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..inner {
                                gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let n = node.value.cols();
                    let gv = nodes[gain.0].value.data();
                    acc_with(&mut grads, nodes, *gain, |gg| {
                        for (row_g, row_x) in g.chunks(n).zip(xhat.chunks(n)) {
                            for c in 0..n {
                                gg[c] += row_g[c] * row_x[c];
                            }
                        }
                    });
                    acc_with(&mut grads, nodes, *bias, |gb| {
                        for row_g in g.chunks(n) {
                            add_into(gb, row_g);
                        }
                    });
                    acc_with(&mut grads, nodes, *x, |gx| {
                        let mut dxhat = vec![0.0; n];
                        for (r, (row_g, row_x)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                            for c in 0..n {
                                dxhat[c] = row_g[c] * gv[c];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                            let mean_dx =
                                dxhat.iter().zip(row_x).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for c in 0..n {
                                gx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - row_x[c] * mean_dx);
                            }
                        }
                    });
                }
                Op::Dropout(x, mask) => acc_with(&mut grads, nodes, *x, |gx| {
                    for ((v, d), k) in gx.iter_mut().zip(&g).zip(mask) {
                        *v += d * k;
                    }
                }),
                Op::Sum(x) => {
                    acc_with(&mut grads, nodes, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0]))
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.numel() as f64;
                    acc_with(&mut grads, nodes, *x, |gx| {
                        gx.iter_mut().for_each(|v| *v += g[0] / n)
                    })
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

fn acc_with(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node<'_>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if nodes[v.0].requires_grad {
        f(slot(grads, nodes, v));
    }
}

/// `c = a · b + beta · c` for an `(m, k, n)` product with explicit
/// (row, column) strides on `a` and `b`; `c` is dense row-major.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above keep every strided access in bounds and the
    // output does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
