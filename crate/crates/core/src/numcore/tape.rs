use crate::error::{invalid, HtflError, Result};

use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, s: f32 },
    GradScale { x: Var, s: f32 },
    Relu { x: Var },
    Reshape { x: Var },
    AvgPool { x: Var, channels: usize, length: usize, out: usize },
    Pool1d { x: Var, lin: usize },
    Softmax { x: Var, cols: usize },
    LogSoftmax { x: Var, cols: usize },
    Concat { a: Var, b: Var, ca: usize, cb: usize },
    Conv1d { x: Var, w: Var, bias: Var, geo: ConvGeometry },
    SelectRows { x: Var, rows: Vec<usize>, cols: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, weights: Option<Vec<f64>> },
    Kl { p: Var, q: Var, t: f32, sp: Vec<f64>, sq: Vec<f64>, per_row: Vec<f64> },
    Mse { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    PairwiseDist { a: Var, b: Var, ra: usize, rb: usize, cols: usize },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    cin: usize,
    cout: usize,
    lin: usize,
    lout: usize,
    kernel: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Linear record of differentiable operations.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and `backward` walks it in reverse.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

const DIST_EPS: f64 = 1e-12;

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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf. Gradients are tracked when the tensor
    /// is flagged `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(HtflError::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Trainable leaf from raw values.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Value-copy that cuts the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(HtflError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> HtflError {
        HtflError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── forward operations ─────────────────────────────────────────────

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = mm(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [cols] {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += *bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![rows, cols], out, Op::AddBias { x, bias, cols }, rg))
    }

    /// `x · W + b` for `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, s }, rg)
    }

    /// `a + s·b`, the usual way of attaching a weighted auxiliary loss.
    pub fn add_scaled(&mut self, a: Var, b: Var, s: f32) -> Result<Var> {
        let sb = self.scale(b, s);
        self.add(a, sb)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `s`.
    /// With `s == 0` the result is detached.
    pub fn grad_scale(&mut self, x: Var, s: f32) -> Var {
        if s == 0.0 {
            return self.detach(x);
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::GradScale { x, s }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(HtflError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape { x }, rg))
    }

    /// Averages a per-sample feature map down to a length-`k` vector.
    ///
    /// Accepts `[B, L]` or `[B, C, L]`. Elements are read position-major
    /// (all channels at position 0, then position 1, ...) and consecutive runs
    /// of `C·L/k` are averaged, so a `C×k` map yields its `k` column means and
    /// a flat vector yields means of adjacent chunks. `C·L` must be a multiple
    /// of `k`.
    pub fn average_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (batch, channels, length) = match self.shape(x) {
            [b, l] => (*b, 1, *l),
            [b, c, l] => (*b, *c, *l),
            s => {
                return Err(HtflError::Shape {
                    op: "average_pool",
                    lhs: s.to_vec(),
                    rhs: vec![k],
                })
            }
        };
        let total = channels * length;
        if k == 0 || total % k != 0 {
            return Err(HtflError::Shape {
                op: "average_pool",
                lhs: self.shape(x).to_vec(),
                rhs: vec![k],
            });
        }
        let group = total / k;
        let inv = 1.0 / group as f64;
        let xv = self.value(x);
        let mut out = vec![0.0f32; batch * k];
        for b in 0..batch {
            let src = &xv[b * total..(b + 1) * total];
            let mut acc = vec![0.0f64; k];
            for c in 0..channels {
                for p in 0..length {
                    acc[(p * channels + c) / group] += src[c * length + p] as f64;
                }
            }
            for (o, a) in out[b * k..(b + 1) * k].iter_mut().zip(&acc) {
                *o = (a * inv) as f32;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch, k],
            out,
            Op::AvgPool {
                x,
                channels,
                length,
                out: k,
            },
            rg,
        ))
    }

    /// Average pooling along the length axis with kernel 2 and stride 2.
    pub fn pool1d(&mut self, x: Var) -> Result<Var> {
        let (batch, channels, lin) = match self.shape(x) {
            [b, c, l] if *l >= 2 => (*b, *c, *l),
            s => {
                return Err(HtflError::Shape {
                    op: "pool1d",
                    lhs: s.to_vec(),
                    rhs: vec![2],
                })
            }
        };
        let lout = lin / 2;
        let xv = self.value(x);
        let mut out = vec![0.0f32; batch * channels * lout];
        for bc in 0..batch * channels {
            let src = &xv[bc * lin..(bc + 1) * lin];
            for t in 0..lout {
                out[bc * lout + t] = 0.5 * (src[2 * t] + src[2 * t + 1]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![batch, channels, lout], out, Op::Pool1d { x, lin }, rg))
    }

    /// Row-wise softmax of a matrix (or of a single vector).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or_else(|| invalid("softmax of a scalar"))?;
        let out = rowwise(self.value(x), cols, |row, dst| {
            let s = super::softmax_row(row);
            dst.copy_from_slice(&s);
        });
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, cols }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or_else(|| invalid("log_softmax of a scalar"))?;
        let out = rowwise(self.value(x), cols, |row, dst| {
            let ls = log_softmax_f64(row);
            for (d, v) in dst.iter_mut().zip(ls) {
                *d = v as f32;
            }
        });
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax { x, cols }, rg))
    }

    /// Concatenates two matrices along the column axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat")?;
        let (rb, cb) = self.dims2(b, "concat")?;
        if ra != rb {
            return Err(self.mismatch("concat", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![ra, ca + cb], out, Op::Concat { a, b, ca, cb }, rg))
    }

    /// 1-D convolution without padding.
    ///
    /// `x: [B, Cin, L]`, `w: [Cout, Cin, kernel]`, `bias: [Cout]` gives
    /// `[B, Cout, ⌊(L − kernel)/stride⌋ + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid("conv1d stride must be at least 1"));
        }
        let (batch, cin, lin) = match self.shape(x) {
            [b, c, l] => (*b, *c, *l),
            _ => return Err(self.mismatch("conv1d", x, w)),
        };
        let (cout, kernel) = match self.shape(w) {
            [o, i, k] if *i == cin && *k <= lin && *k > 0 => (*o, *k),
            _ => return Err(self.mismatch("conv1d", x, w)),
        };
        if self.shape(bias) != [cout] {
            return Err(self.mismatch("conv1d", w, bias));
        }
        let lout = conv_out_len(lin, kernel, stride);
        let geo = ConvGeometry {
            batch,
            cin,
            cout,
            lin,
            lout,
            kernel,
            stride,
        };
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let mut out = vec![0.0f32; batch * cout * lout];
        for b in 0..batch {
            for co in 0..cout {
                let dst = &mut out[(b * cout + co) * lout..(b * cout + co + 1) * lout];
                dst.iter_mut().for_each(|d| *d = bv[co]);
                for ci in 0..cin {
                    let src = &xv[(b * cin + ci) * lin..(b * cin + ci + 1) * lin];
                    let ker = &wv[(co * cin + ci) * kernel..(co * cin + ci + 1) * kernel];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let base = t * stride;
                        let mut acc = 0.0f32;
                        for (j, kv) in ker.iter().enumerate() {
                            acc += kv * src[base + j];
                        }
                        *d += acc;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        Ok(self.push(vec![batch, cout, lout], out, Op::Conv1d { x, w, bias, geo }, rg))
    }

    /// Gathers rows of a matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, cols) = self.dims2(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(invalid(format!("select_rows index {bad} out of {r} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &i in rows {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), cols],
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Euclidean distances between every row of `a` and every row of `b`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "pairwise_distance")?;
        let (rb, cb) = self.dims2(b, "pairwise_distance")?;
        if ca != cb {
            return Err(self.mismatch("pairwise_distance", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0f32; ra * rb];
        for i in 0..ra {
            for j in 0..rb {
                let sq: f64 = av[i * ca..(i + 1) * ca]
                    .iter()
                    .zip(&bv[j * ca..(j + 1) * ca])
                    .map(|(x, y)| {
                        let d = (*x - *y) as f64;
                        d * d
                    })
                    .sum();
                out[i * rb + j] = (sq + DIST_EPS).sqrt() as f32;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![ra, rb],
            out,
            Op::PairwiseDist {
                a,
                b,
                ra,
                rb,
                cols: ca,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s as f32], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(vec![], vec![(s / n) as f32], Op::Mean { x }, rg)
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Mean cross-entropy of `logits: [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_inner(logits, labels, None)
    }

    /// `Σ wᵢ·CEᵢ / Σ wᵢ` with non-negative per-row weights.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f32]) -> Result<Var> {
        if weights.len() != labels.len() {
            return Err(HtflError::Shape {
                op: "weighted_cross_entropy",
                lhs: vec![labels.len()],
                rhs: vec![weights.len()],
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid("cross-entropy weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        if total <= 0.0 {
            return Err(invalid("cross-entropy weights sum to zero"));
        }
        let w = weights.iter().map(|&w| w as f64 / total).collect();
        self.cross_entropy_inner(logits, labels, Some(w))
    }

    fn cross_entropy_inner(&mut self, logits: Var, labels: &[usize], weights: Option<Vec<f64>>) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != rows {
            return Err(HtflError::Shape {
                op: "cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(HtflError::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let zv = self.value(logits);
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            let ls = log_softmax_f64(&zv[r * cols..(r + 1) * cols]);
            match &weights {
                Some(w) => total -= w[r] * ls[y],
                None => total -= ls[y],
            }
            probs.extend(ls.iter().map(|v| v.exp()));
        }
        let loss = match (&weights, rows) {
            (_, 0) => 0.0,
            (Some(_), _) => total,
            (None, _) => total / rows as f64,
        };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss as f32],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                weights,
            },
            rg,
        ))
    }

    /// Batch-mean `KL(softmax(p/T) ‖ softmax(q/T))` between two logit matrices.
    pub fn kl_divergence(&mut self, p: Var, q: Var, temperature: f32) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(self.mismatch("kl_divergence", p, q));
        }
        if !(temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        let (rows, cols) = self.dims2(p, "kl_divergence")?;
        let (pv, qv) = (self.value(p), self.value(q));
        let t = temperature as f64;
        let mut sp = Vec::with_capacity(rows * cols);
        let mut sq = Vec::with_capacity(rows * cols);
        let mut per_row = Vec::with_capacity(rows);
        let mut total = 0.0f64;
        for r in 0..rows {
            let lp = log_softmax_scaled(&pv[r * cols..(r + 1) * cols], t);
            let lq = log_softmax_scaled(&qv[r * cols..(r + 1) * cols], t);
            let mut kl = 0.0f64;
            for j in 0..cols {
                let pj = lp[j].exp();
                kl += pj * (lp[j] - lq[j]);
                sp.push(pj);
                sq.push(lq[j].exp());
            }
            let kl = kl.max(0.0);
            per_row.push(kl);
            total += kl;
        }
        let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(
            vec![],
            vec![loss as f32],
            Op::Kl {
                p,
                q,
                t: temperature,
                sp,
                sq,
                per_row,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mse", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len().max(1) as f64;
        let s: f64 = av
            .iter()
            .zip(bv)
            .map(|(x, y)| {
                let d = (*x - *y) as f64;
                d * d
            })
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![], vec![(s / n) as f32], Op::Mse { a, b }, rg))
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss`; gradients accumulate on leaves
    /// across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 || !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(HtflError::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f32>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += *b),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    send(*a, mm_a_bt(g, self.value(*b), *m, *n, *k));
                }
                if self.rg(*b) {
                    send(*b, mm_at_b(self.value(*a), g, *m, *k, *n));
                }
            }
            Op::AddBias { x, bias, cols } => {
                if self.rg(*bias) {
                    let mut gb = vec![0.0f32; *cols];
                    for row in g.chunks(*cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                    send(*bias, gb);
                }
                send(*x, g.to_vec());
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Scale { x, s } | Op::GradScale { x, s } => {
                send(*x, g.iter().map(|v| v * s).collect());
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                send(
                    *x,
                    g.iter().zip(xv).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect(),
                );
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::AvgPool {
                x,
                channels,
                length,
                out,
            } => {
                let total = channels * length;
                let group = total / out;
                let inv = 1.0 / group as f32;
                let batch = g.len() / out;
                let mut gx = vec![0.0f32; batch * total];
                for b in 0..batch {
                    for c in 0..*channels {
                        for p in 0..*length {
                            gx[b * total + c * length + p] =
                                g[b * out + (p * channels + c) / group] * inv;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Pool1d { x, lin, .. } => {
                let lout = lin / 2;
                let rows = g.len() / lout.max(1);
                let mut gx = vec![0.0f32; rows * lin];
                for bc in 0..rows {
                    for t in 0..lout {
                        let v = 0.5 * g[bc * lout + t];
                        gx[bc * lin + 2 * t] = v;
                        gx[bc * lin + 2 * t + 1] = v;
                    }
                }
                send(*x, gx);
            }
            Op::Softmax { x, cols } => {
                let s = &node.value;
                let mut gx = vec![0.0f32; g.len()];
                for ((gr, sr), dst) in g.chunks(*cols).zip(s.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                    let dot: f64 = gr.iter().zip(sr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    for j in 0..*cols {
                        dst[j] = (sr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                send(*x, gx);
            }
            Op::LogSoftmax { x, cols } => {
                let ls = &node.value;
                let mut gx = vec![0.0f32; g.len()];
                for ((gr, lr), dst) in g.chunks(*cols).zip(ls.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                    let total: f64 = gr.iter().map(|v| *v as f64).sum();
                    for j in 0..*cols {
                        dst[j] = (gr[j] as f64 - (lr[j] as f64).exp() * total) as f32;
                    }
                }
                send(*x, gx);
            }
            Op::Concat { a, b, ca, cb } => {
                let w = ca + cb;
                let rows = g.len() / w;
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        ga.extend_from_slice(&g[r * w..r * w + ca]);
                    }
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        gb.extend_from_slice(&g[r * w + ca..(r + 1) * w]);
                    }
                    send(*b, gb);
                }
            }
            Op::Conv1d { x, w, bias, geo } => {
                let ConvGeometry {
                    batch,
                    cin,
                    cout,
                    lin,
                    lout,
                    kernel,
                    stride,
                } = *geo;
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*bias) {
                    let mut gb = vec![0.0f32; cout];
                    for b in 0..batch {
                        for co in 0..cout {
                            let row = &g[(b * cout + co) * lout..(b * cout + co + 1) * lout];
                            gb[co] += row.iter().sum::<f32>();
                        }
                    }
                    send(*bias, gb);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0f32; cout * cin * kernel];
                    for b in 0..batch {
                        for co in 0..cout {
                            let gr = &g[(b * cout + co) * lout..(b * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let src = &xv[(b * cin + ci) * lin..(b * cin + ci + 1) * lin];
                                let dst = &mut gw[(co * cin + ci) * kernel..(co * cin + ci + 1) * kernel];
                                for (t, gv) in gr.iter().enumerate() {
                                    let base = t * stride;
                                    for j in 0..kernel {
                                        dst[j] += gv * src[base + j];
                                    }
                                }
                            }
                        }
                    }
                    send(*w, gw);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0f32; batch * cin * lin];
                    for b in 0..batch {
                        for co in 0..cout {
                            let gr = &g[(b * cout + co) * lout..(b * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let ker = &wv[(co * cin + ci) * kernel..(co * cin + ci + 1) * kernel];
                                let dst = &mut gx[(b * cin + ci) * lin..(b * cin + ci + 1) * lin];
                                for (t, gv) in gr.iter().enumerate() {
                                    let base = t * stride;
                                    for j in 0..kernel {
                                        dst[base + j] += gv * ker[j];
                                    }
                                }
                            }
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::SelectRows { x, rows, cols } => {
                let total = self.value(*x).len();
                let mut gx = vec![0.0f32; total];
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..*cols {
                        gx[src * cols + c] += g[r * cols + c];
                    }
                }
                send(*x, gx);
            }
            Op::CrossEntropy { logits, labels, probs, weights } => {
                let rows = labels.len();
                let cols = if rows == 0 { 0 } else { probs.len() / rows };
                let mut gz = vec![0.0f32; probs.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let scale = match weights {
                        Some(w) => g[0] as f64 * w[r],
                        None => g[0] as f64 / rows.max(1) as f64,
                    };
                    for j in 0..cols {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gz[r * cols + j] = ((probs[r * cols + j] - onehot) * scale) as f32;
                    }
                }
                send(*logits, gz);
            }
            Op::Kl {
                p,
                q,
                t,
                sp,
                sq,
                per_row,
            } => {
                let rows = per_row.len();
                let cols = if rows == 0 { 0 } else { sp.len() / rows };
                let scale = g[0] as f64 / (rows.max(1) as f64 * *t as f64);
                if self.rg(*q) {
                    let gq = sp
                        .iter()
                        .zip(sq)
                        .map(|(pp, qq)| ((qq - pp) * scale) as f32)
                        .collect();
                    send(*q, gq);
                }
                if self.rg(*p) {
                    let mut gp = vec![0.0f32; sp.len()];
                    for r in 0..rows {
                        for j in 0..cols {
                            let idx = r * cols + j;
                            let (pp, qq) = (sp[idx], sq[idx]);
                            let log_ratio = pp.max(f64::MIN_POSITIVE).ln() - qq.max(f64::MIN_POSITIVE).ln();
                            gp[idx] = (pp * (log_ratio - per_row[r]) * scale) as f32;
                        }
                    }
                    send(*p, gp);
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.len().max(1) as f32;
                let k = 2.0 * g[0] / n;
                let ga: Vec<f32> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                if self.rg(*b) {
                    send(*b, ga.iter().map(|v| -v).collect());
                }
                send(*a, ga);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                send(*x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n.max(1) as f32; n]);
            }
            Op::PairwiseDist { a, b, ra, rb, cols } => {
                let (av, bv, dv) = (self.value(*a), self.value(*b), &node.value);
                let mut ga = vec![0.0f32; ra * cols];
                let mut gb = vec![0.0f32; rb * cols];
                for i in 0..*ra {
                    for j in 0..*rb {
                        let w = g[i * rb + j] / dv[i * rb + j];
                        for c in 0..*cols {
                            let d = w * (av[i * cols + c] - bv[j * cols + c]);
                            ga[i * cols + c] += d;
                            gb[j * cols + c] -= d;
                        }
                    }
                }
                if self.rg(*a) {
                    send(*a, ga);
                }
                if self.rg(*b) {
                    send(*b, gb);
                }
            }
        }
    }
}

pub(crate) fn conv_out_len(lin: usize, kernel: usize, stride: usize) -> usize {
    (lin - kernel) / stride + 1
}

fn rowwise(x: &[f32], cols: usize, f: impl Fn(&[f32], &mut [f32])) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        f(src, dst);
    }
    out
}

fn log_softmax_f64(z: &[f32]) -> Vec<f64> {
    log_softmax_scaled(z, 1.0)
}

fn log_softmax_scaled(z: &[f32], t: f64) -> Vec<f64> {
    let s: Vec<f64> = z.iter().map(|&v| v as f64 / t).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    s.iter().map(|v| v - lse).collect()
}

/// `[m, k] × [k, n]`.
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for (j, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            t[j * rows + r] = v;
        }
    }
    t
}

/// `[m, n] × [k, n]ᵀ → [m, k]`.
fn mm_a_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    mm(a, &transpose(b, k, n), m, n, k)
}

/// `[m, k]ᵀ × [m, n] → [k, n]`.
fn mm_at_b(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    mm(&transpose(a, m, k), b, k, m, n)
}
