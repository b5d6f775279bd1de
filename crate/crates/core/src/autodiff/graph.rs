use rand::Rng;

use super::{gemm, AutodiffError, Float, MatLayout, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RowScale(Var, Vec<T>),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<T>),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    track: bool,
}

/// A single-use tape. Build the forward computation with the op methods,
/// call [`Graph::backward`] once on a scalar, then read [`Graph::grad`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, track: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node { value, op, track });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].track)
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `[.., k] x [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.rows_cols();
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-d");
        assert_eq!(bv.shape()[0], k, "matmul inner dimension");
        let n = bv.shape()[1];
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            av.data(),
            MatLayout::dense(m, k),
            bv.data(),
            MatLayout::dense(k, n),
            T::zero(),
            &mut out,
            MatLayout::dense(m, n),
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let track = self.tracks(&[a, b]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::MatMul(a, b), track)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add length mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape(), data).unwrap();
        let track = self.tracks(&[a, b]);
        self.push(t, Op::Add(a, b), track)
    }

    /// Adds a `[n]` row vector to every row of `[.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = xv.rows_cols();
        assert_eq!(bv.len(), n, "bias width");
        let b = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let t = Tensor::new(xv.shape(), data).unwrap();
        let track = self.tracks(&[x, bias]);
        self.push(t, Op::AddRow(x, bias), track)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mul length mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape(), data).unwrap();
        let track = self.tracks(&[a, b]);
        self.push(t, Op::Mul(a, b), track)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * s).collect()).unwrap();
        let track = self.tracks(&[x]);
        self.push(t, Op::Scale(x, s), track)
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<T>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        assert_eq!(factors.len(), rows, "row_scale factor count");
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / cols])
            .collect();
        let t = Tensor::new(xv.shape(), data).unwrap();
        let track = self.tracks(&[x]);
        self.push(t, Op::RowScale(x, factors), track)
    }

    /// Row lookup: embedding tables, [CLS] selection.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let tv = self.value(table);
        let (n, cols) = tv.rows_cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < n, "gather row {r} out of range {n}");
            data.extend_from_slice(tv.row(r));
        }
        let t = Tensor::new(&[rows.len(), cols], data).unwrap();
        let track = self.tracks(&[table]);
        self.push(t, Op::GatherRows(table, rows.to_vec()), track)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, h) = xv.rows_cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!((g.len(), b.len()), (h, h), "layer norm parameter width");
        let hn = T::lit(h as f64);
        let eps = T::lit(eps);
        let mut xhat = Vec::with_capacity(rows * h);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * h);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / hn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let t = Tensor::new(xv.shape(), out).unwrap();
        let track = self.tracks(&[x, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            track,
        )
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        self.unary(x, |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()), Op::Gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: fn(Var) -> Op<T>) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect()).unwrap();
        let track = self.tracks(&[x]);
        self.push(t, op(x), track)
    }

    /// Inverted dropout: each entry is zeroed with probability `p`, survivors
    /// scaled by `1/(1-p)`. `p == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        if p == 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xv.shape(), data).unwrap();
        let track = self.tracks(&[x]);
        self.push(t, Op::Dropout(x, mask), track)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            softmax_into(xv.row(r), &mut out);
        }
        let t = Tensor::new(xv.shape(), out).unwrap();
        let track = self.tracks(&[x]);
        self.push(t, Op::Softmax(x), track)
    }

    /// Multi-head scaled dot-product attention over `[batch*seq, hidden]`
    /// projections. `key_mask[b*seq + j]` false hides key `j` of item `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, hidden) = qv.rows_cols();
        if rows != batch * seq || kv.rows_cols() != (rows, hidden) || vv.rows_cols() != (rows, hidden) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "attention expects [{}, {hidden}] q/k/v",
                batch * seq
            )));
        }
        if key_mask.len() != rows || hidden % heads != 0 {
            return Err(AutodiffError::ShapeMismatch("attention mask or head split".into()));
        }
        for b in 0..batch {
            if !key_mask[b * seq..(b + 1) * seq].iter().any(|&m| m) {
                return Err(AutodiffError::AllMasked);
            }
        }
        let d = hidden / heads;
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * hidden];
        let mut scores = vec![T::zero(); seq * seq];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let l = head_layout(b, h, seq, hidden, d);
                gemm(scale, qv.data(), l, kv.data(), l.t(), T::zero(), &mut scores, MatLayout::dense(seq, seq));
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    masked_softmax(&scores[i * seq..(i + 1) * seq], mask, &mut p[i * seq..(i + 1) * seq]);
                }
                gemm(T::one(), p, MatLayout::dense(seq, seq), vv.data(), l, T::zero(), &mut out, l);
            }
        }
        let t = Tensor::new(qv.shape(), out).unwrap();
        let track = self.tracks(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                probs,
                batch,
                seq,
                heads,
            },
            track,
        ))
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, laid
    /// out `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, k) = lv.rows_cols();
        if targets.len() != rows {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let mut probs = Vec::with_capacity(rows * k);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let start = probs.len();
            softmax_into(row, &mut probs);
            if let Some(c) = *t {
                if c >= k {
                    return Err(AutodiffError::IndexOutOfRange { index: c, classes: k });
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                total += (lse - row[c]).to_f64().unwrap();
                count += 1;
                debug_assert!(probs[start + c] <= T::one());
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let track = self.tracks(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            track,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::new(&[rows, len], data).unwrap();
        let track = self.tracks(&[x]);
        self.push(t, Op::SliceCols(x, start), track)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows_cols().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).rows_cols().1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows_cols().0, rows, "concat_cols row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let t = Tensor::new(&[rows, total], data).unwrap();
        let track = self.tracks(parts);
        self.push(t, Op::ConcatCols(parts.to_vec()), track)
    }

    /// Stacks matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).rows_cols().1;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows_cols().1, cols, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
        }
        let t = Tensor::new(&[data.len() / cols.max(1), cols], data).unwrap();
        let track = self.tracks(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), track)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let track = self.tracks(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), track)
    }

    /// Reverse pass from a single-element node. Gradients accumulate into
    /// every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].track {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, delta: &[T]) {
        if !self.nodes[v.0].track {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn backprop(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.0].value;
        let mut updates: Vec<(Var, Vec<T>)> = Vec::new();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = av.rows_cols();
                let n = bv.shape()[1];
                let mut ga = vec![T::zero(); m * k];
                gemm(T::one(), g, MatLayout::dense(m, n), bv.data(), MatLayout::dense(k, n).t(), T::zero(), &mut ga, MatLayout::dense(m, k));
                let mut gb = vec![T::zero(); k * n];
                gemm(T::one(), av.data(), MatLayout::dense(m, k).t(), g, MatLayout::dense(m, n), T::zero(), &mut gb, MatLayout::dense(k, n));
                updates.push((*a, ga));
                updates.push((*b, gb));
            }
            Op::Add(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.to_vec()));
            }
            Op::AddRow(x, bias) => {
                let n = val(bias).len();
                let mut gb = vec![T::zero(); n];
                for (j, &v) in g.iter().enumerate() {
                    gb[j % n] += v;
                }
                updates.push((*x, g.to_vec()));
                updates.push((*bias, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                updates.push((*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect()));
                updates.push((*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect()));
            }
            Op::Scale(x, s) => updates.push((*x, g.iter().map(|&d| d * *s).collect())),
            Op::RowScale(x, f) => {
                let cols = val(x).rows_cols().1;
                updates.push((*x, g.iter().enumerate().map(|(j, &d)| d * f[j / cols]).collect()));
            }
            Op::GatherRows(table, rows) => {
                let tv = val(table);
                let cols = tv.rows_cols().1;
                let mut gt = vec![T::zero(); tv.len()];
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..cols {
                        gt[src * cols + c] += g[r * cols + c];
                    }
                }
                updates.push((*table, gt));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(gamma).data();
                let h = gam.len();
                let hn = T::lit(h as f64);
                let mut gx = vec![T::zero(); xhat.len()];
                let mut gg = vec![T::zero(); h];
                let mut gbeta = vec![T::zero(); h];
                for (r, &is) in inv_std.iter().enumerate() {
                    let (gr, xr) = (&g[r * h..(r + 1) * h], &xhat[r * h..(r + 1) * h]);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..h {
                        let d = gr[j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                    }
                    for j in 0..h {
                        let d = gr[j] * gam[j];
                        gx[r * h + j] = is / hn * (hn * d - sum_d - xr[j] * sum_dx);
                    }
                }
                updates.push((*x, gx));
                updates.push((*gamma, gg));
                updates.push((*beta, gbeta));
            }
            Op::Gelu(x) => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let (half, three) = (T::lit(0.5), T::lit(3.0));
                let gx = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        d * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                updates.push((*x, gx));
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                updates.push((*x, g.iter().zip(y).map(|(&d, &y)| d * (T::one() - y * y)).collect()));
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                updates.push((*x, g.iter().zip(y).map(|(&d, &y)| d * y * (T::one() - y)).collect()));
            }
            Op::Dropout(x, mask) => updates.push((*x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect())),
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                let cols = y.rows_cols().1;
                let mut gx = Vec::with_capacity(g.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                updates.push((*x, gx));
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                batch,
                seq,
                heads,
            } => {
                let (qv, kv, vv) = (val(q).data(), val(k).data(), val(v).data());
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let hidden = val(q).rows_cols().1;
                let d = hidden / heads;
                let scale = T::lit(1.0 / (d as f64).sqrt());
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); seq * seq];
                let sq = MatLayout::dense(seq, seq);
                for b in 0..batch {
                    for h in 0..heads {
                        let l = head_layout(b, h, seq, hidden, d);
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        gemm(T::one(), g, l, vv, l.t(), T::zero(), &mut dp, sq);
                        gemm(T::one(), p, sq.t(), g, l, T::one(), &mut gv, l);
                        for r in 0..seq {
                            let pr = &p[r * seq..(r + 1) * seq];
                            let dr = &mut dp[r * seq..(r + 1) * seq];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        gemm(scale, &dp, sq, kv, l, T::one(), &mut gq, l);
                        gemm(scale, &dp, sq.t(), qv, l, T::one(), &mut gk, l);
                    }
                }
                updates.push((*q, gq));
                updates.push((*k, gk));
                updates.push((*v, gv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let k = val(logits).rows_cols().1;
                let mut gl = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let s = g[0] / T::lit(*count as f64);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(c) = *t {
                            for j in 0..k {
                                gl[r * k + j] = s * probs[r * k + j];
                            }
                            gl[r * k + c] -= s;
                        }
                    }
                }
                updates.push((*logits, gl));
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = val(x).rows_cols();
                let len = nodes[i].value.rows_cols().1;
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                updates.push((*x, gx));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = nodes[i].value.rows_cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).rows_cols().1;
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    updates.push((*p, gp));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).len();
                    updates.push((*p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Sum(x) => updates.push((*x, vec![g[0]; val(x).len()])),
        }
        for (v, d) in updates {
            self.accumulate(v, &d);
        }
    }
}

fn head_layout(b: usize, h: usize, seq: usize, hidden: usize, d: usize) -> MatLayout {
    MatLayout {
        offset: b * seq * hidden + h * d,
        rows: seq,
        cols: d,
        rs: hidden,
        cs: 1,
    }
}

fn softmax_into<T: Float>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut sum = T::zero();
    for &v in row {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e /= sum;
    }
}

fn masked_softmax<T: Float>(scores: &[T], mask: &[bool], out: &mut [T]) {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m { (s - max).exp() } else { T::zero() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_backward_matches_hand_derivation() {
        let mut g = Graph::new();
        let a = g.param(t(&[1, 2], &[1.0, 2.0]));
        let b = g.param(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[11.0]);
        g.backward(c);
        assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 5.0]));
        let m = g.mul(a, c);
        let s = g.sum(m);
        g.backward(s);
        assert_eq!(g.grad(a).unwrap(), &[5.0, 5.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn reused_input_accumulates() {
        let mut g = Graph::new();
        let a = g.param(t(&[1], &[3.0]));
        let sq = g.mul(a, a);
        g.backward(sq);
        assert_eq!(g.grad(a).unwrap(), &[6.0]);
    }

    #[test]
    fn single_key_attention_is_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]));
        let out = g.attention(x, x, x, &[true], 1, 1, 2).unwrap();
        assert_eq!(g.attention_probs(out).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.value(out).data(), g.value(x).data());
    }

    #[test]
    fn all_masked_attention_errors() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0; 4]));
        assert_eq!(g.attention(x, x, x, &[false, false], 1, 2, 1), Err(AutodiffError::AllMasked));
    }

    #[test]
    fn cross_entropy_skips_unlabelled_rows() {
        let mut g: Graph<f64> = Graph::new();
        let l = g.param(t(&[2, 2], &[0.0, 0.0, 5.0, -5.0]));
        let loss = g.cross_entropy(l, &[Some(0), None]).unwrap();
        assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
        g.backward(loss);
        assert_eq!(&g.grad(l).unwrap()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(t(&[1, 2], &[1.0, 2.0]));
        let b = g.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat_rows(&[a, b]);
        assert_eq!(g.value(c).shape(), &[3, 2]);
        let w = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m = g.mul(c, w);
        let s = g.sum(m);
        g.backward(s);
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
