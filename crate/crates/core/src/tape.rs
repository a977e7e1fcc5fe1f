//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! Every operation appends a node holding its output value, so nodes are in
//! topological order by construction. [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients into one buffer per reachable value.
//!
//! The tape also tallies forward FLOPs using the constants in
//! [`crate::flops::cost`]; this is the instrumented counter the analytic
//! FLOPs estimate is checked against.

use crate::flops::cost;
use crate::kernels::{self, AttnGeom, Unary};
use crate::{Element, Error, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `x[n, m] + bias[m]` broadcast over rows.
    AddRowBias(Var, Var),
    /// `x[n, m] * scale[n]` broadcast over columns.
    ScaleRows(Var, Var),
    Unary(Var, Unary),
    Reshape(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        head_dim: usize,
        positions: Vec<usize>,
        theta: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Variance(Var),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recorded computation graph.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    flops: u64,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, flops: u64) -> Var {
        self.flops += flops;
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        Ok(self.push(Op::MatMul(a, b), out, cost::MAC * (m * k * n) as u64))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shapes checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let n = out.numel() as u64;
        Ok(self.push(Op::Add(a, b), out, n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let n = out.numel() as u64;
        Ok(self.push(Op::Mul(a, b), out, n))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.last_dim();
        if self.value(bias).numel() != m {
            return Err(Error::shape("add_row_bias", xv.shape(), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = xv
            .data()
            .chunks(m.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        let n = out.numel() as u64;
        Ok(self.push(Op::AddRowBias(x, bias), out, n))
    }

    /// Multiplies row `i` of `x` by `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xv = self.value(x);
        if self.value(scale).numel() != xv.rows() {
            return Err(Error::shape("scale_rows", xv.shape(), self.shape(scale)));
        }
        let m = xv.last_dim();
        let s = self.value(scale).data();
        let data = xv
            .data()
            .chunks(m.max(1))
            .zip(s)
            .flat_map(|(row, &c)| row.iter().map(move |&v| v * c))
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        let n = out.numel() as u64;
        Ok(self.push(Op::ScaleRows(x, scale), out, n))
    }

    pub fn unary(&mut self, x: Var, kernel: Unary) -> Result<Var> {
        let out = kernels::map_unary(self.value(x), kernel)?;
        let per = if kernel == Unary::Silu { cost::SILU } else { 1 };
        let n = out.numel() as u64 * per;
        Ok(self.push(Op::Unary(x, kernel), out, n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out, 0))
    }

    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (out, inv_rms) = kernels::rmsnorm(self.value(x), self.value(weight), eps)?;
        let n = out.numel() as u64 * cost::NORM_PER_ELEMENT;
        Ok(self.push(Op::RmsNorm { x, weight, inv_rms }, out, n))
    }

    /// Rotary embedding of a `rows x (heads*head_dim)` matrix; `positions`
    /// has one entry per row.
    pub fn rope(&mut self, x: Var, head_dim: usize, positions: &[usize], theta: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        if out.rows() != positions.len() {
            return Err(Error::shape("rope", out.shape(), &[positions.len()]));
        }
        kernels::rope_in_place(out.data_mut(), head_dim, positions, theta, 1.0)?;
        let n = out.numel() as u64 * cost::ROPE_PER_ELEMENT;
        let op = Op::Rope {
            x,
            head_dim,
            positions: positions.to_vec(),
            theta,
        };
        Ok(self.push(op, out, n))
    }

    /// Causal grouped-query attention with an optional additive per-key logit.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, geom: AttnGeom) -> Result<Var> {
        if let Some(b) = bias {
            if self.value(b).numel() != geom.tokens() {
                return Err(Error::shape("attention bias", self.shape(b), &[geom.tokens()]));
            }
        }
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bias.map(|b| self.value(b).data()),
            None,
            geom,
        )?;
        let out = Tensor::new(&[geom.tokens(), geom.q_width()], out)?;
        let pairs = geom.batch * geom.seq * (geom.seq + 1) / 2;
        let flops = (pairs * geom.heads) as u64 * cost::attention_pair(geom.head_dim);
        let op = Op::Attention {
            q,
            k,
            v,
            bias,
            geom,
            probs,
        };
        Ok(self.push(op, out, flops))
    }

    /// Row-wise softmax of `x + mask`; the mask is a constant.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x), mask)?;
        let n = out.numel() as u64 * cost::SOFTMAX_PER_ELEMENT;
        Ok(self.push(Op::Softmax(x), out, n))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = kernels::gather_rows(self.value(table), ids)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            0,
        ))
    }

    /// Mean cross-entropy of `logits[n, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), targets)?;
        let n = self.value(logits).numel() as u64 * cost::SOFTMAX_PER_ELEMENT;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(loss), n))
    }

    fn reduce(&mut self, x: Var, make: fn(Var) -> Op<T>, f: impl Fn(&[T]) -> T) -> Var {
        let xv = self.value(x);
        let n = xv.numel() as u64;
        let out = Tensor::scalar(f(xv.data()));
        self.push(make(x), out, n)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, Op::Sum, |d| d.iter().fold(T::zero(), |a, &b| a + b))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        Ok(self.reduce(x, Op::Mean, mean_of))
    }

    /// Biased (divide-by-n) variance of all elements.
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::Contract("variance of an empty tensor".into()));
        }
        Ok(self.reduce(x, Op::Variance, |d| {
            let m = mean_of(d);
            d.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) / T::from_usize(d.len()).unwrap()
        }))
    }

    /// Gradients of the scalar `loss` with respect to every value it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC * B^T, dB = A^T * dC
                acc(*a, &mut |da| T::gemm(m, n, k, gd, (n, 1), bv, (1, n), da, true));
                acc(*b, &mut |db| T::gemm(k, m, n, av, (1, k), gd, (n, 1), db, true));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| add_into(d, gd));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((o, &gi), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *o = *o + gi * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, &gi), &x) in d.iter_mut().zip(gd).zip(av) {
                        *o = *o + gi * x;
                    }
                });
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, &mut |d| add_into(d, gd));
                let m = self.value(*bias).numel();
                acc(*bias, &mut |d| {
                    for row in gd.chunks(m) {
                        add_into(d, row);
                    }
                });
            }
            Op::ScaleRows(x, scale) => {
                let m = self.value(*x).last_dim();
                let (xv, sv) = (self.value(*x).data(), self.value(*scale).data());
                acc(*x, &mut |d| {
                    for ((drow, grow), &s) in d.chunks_mut(m).zip(gd.chunks(m)).zip(sv) {
                        for (o, &gi) in drow.iter_mut().zip(grow) {
                            *o = *o + gi * s;
                        }
                    }
                });
                acc(*scale, &mut |d| {
                    for ((o, grow), xrow) in d.iter_mut().zip(gd.chunks(m)).zip(xv.chunks(m)) {
                        *o = *o + dot(grow, xrow);
                    }
                });
            }
            Op::Unary(x, kernel) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                acc(*x, &mut |d| {
                    for (((o, &gi), &xi), &yi) in d.iter_mut().zip(gd).zip(xv).zip(yv) {
                        *o = *o + gi * kernel.derivative(xi, yi);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, gd)),
            Op::RmsNorm { x, weight, inv_rms } => {
                let dim = self.value(*x).last_dim();
                let xv = self.value(*x).data();
                let w = self.value(*weight).data();
                let dn = T::from_usize(dim).unwrap();
                acc(*weight, &mut |dw| {
                    for ((grow, xrow), &r) in gd.chunks(dim).zip(xv.chunks(dim)).zip(inv_rms) {
                        for ((o, &gi), &xi) in dw.iter_mut().zip(grow).zip(xrow) {
                            *o = *o + gi * xi * r;
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    for (((drow, grow), xrow), &r) in
                        dx.chunks_mut(dim).zip(gd.chunks(dim)).zip(xv.chunks(dim)).zip(inv_rms)
                    {
                        let proj = grow
                            .iter()
                            .zip(w)
                            .zip(xrow)
                            .fold(T::zero(), |a, ((&gi, &wi), &xi)| a + gi * wi * xi);
                        let c = r * r * r * proj / dn;
                        for (((o, &gi), &wi), &xi) in drow.iter_mut().zip(grow).zip(w).zip(xrow) {
                            *o = *o + r * gi * wi - c * xi;
                        }
                    }
                });
            }
            Op::Rope {
                x,
                head_dim,
                positions,
                theta,
            } => {
                let mut back = gd.to_vec();
                kernels::rope_in_place(&mut back, *head_dim, positions, *theta, -1.0)?;
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                geom,
                probs,
            } => {
                let grads_qkvb = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    *geom,
                );
                let (dq, dk, dv, db) = grads_qkvb;
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
                if let Some(b) = bias {
                    acc(*b, &mut |d| add_into(d, &db));
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let yv = node.value.data();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(gd.chunks(n)).zip(yv.chunks(n)) {
                        let inner = dot(grow, yrow);
                        for ((o, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + yi * (gi - inner);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dim = self.value(*table).last_dim();
                acc(*table, &mut |d| {
                    for (&id, grow) in ids.iter().zip(gd.chunks(dim)) {
                        add_into(&mut d[id * dim..(id + 1) * dim], grow);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vsize = self.value(*logits).last_dim();
                let scale = gd[0] / T::from_usize(targets.len()).unwrap();
                acc(*logits, &mut |d| {
                    for ((drow, prow), &t) in d.chunks_mut(vsize).zip(probs.chunks(vsize)).zip(targets) {
                        for (j, (o, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let y = if j == t { p - T::one() } else { p };
                            *o = *o + scale * y;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|o| *o = *o + gd[0])),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                acc(*x, &mut |d| d.iter_mut().for_each(|o| *o = *o + gd[0] / n));
            }
            Op::Variance(x) => {
                let xv = self.value(*x).data();
                let n = T::from_usize(xv.len()).unwrap();
                let m = mean_of(xv);
                let two = T::one() + T::one();
                acc(*x, &mut |d| {
                    for (o, &xi) in d.iter_mut().zip(xv) {
                        *o = *o + gd[0] * two * (xi - m) / n;
                    }
                });
            }
        }
        Ok(())
    }
}

/// Gradient buffers produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but with zeros for unreachable values.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn mean_of<T: Element>(d: &[T]) -> T {
    d.iter().fold(T::zero(), |a, &b| a + b) / T::from_usize(d.len()).unwrap()
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

type AttnGrads<T> = (Vec<T>, Vec<T>, Vec<T>, Vec<T>);

fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    geom: AttnGeom,
) -> AttnGrads<T> {
    let n = geom.seq;
    let dh = geom.head_dim;
    let (qw, kw) = (geom.q_width(), geom.kv_width());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut db = vec![T::zero(); geom.tokens()];
    let mut dscore = vec![T::zero(); n];
    for b in 0..geom.batch {
        for h in 0..geom.heads {
            let kvh = geom.kv_head_of(h);
            let pbase = geom.prob_offset(b, h);
            for i in 0..n {
                let row = b * n + i;
                let p = &probs[pbase + i * n..pbase + i * n + i + 1];
                let go = &dout[row * qw + h * dh..row * qw + (h + 1) * dh];
                // dP_j = dO_i . v_j ; dS_j = P_j (dP_j - sum_j' P_j' dP_j')
                let mut inner = T::zero();
                for (j, ds) in dscore[..=i].iter_mut().enumerate() {
                    let col = b * n + j;
                    let vj = &v[col * kw + kvh * dh..col * kw + (kvh + 1) * dh];
                    *ds = dot(go, vj);
                    inner = inner + p[j] * *ds;
                    let dvj = &mut dv[col * kw + kvh * dh..col * kw + (kvh + 1) * dh];
                    for (o, &gi) in dvj.iter_mut().zip(go) {
                        *o = *o + p[j] * gi;
                    }
                }
                for (j, ds) in dscore[..=i].iter_mut().enumerate() {
                    *ds = p[j] * (*ds - inner);
                    db[b * n + j] = db[b * n + j] + *ds;
                }
                let qi = &q[row * qw + h * dh..row * qw + (h + 1) * dh];
                for (j, &ds) in dscore[..=i].iter().enumerate() {
                    let col = b * n + j;
                    let c = ds * scale;
                    let kj = &k[col * kw + kvh * dh..col * kw + (kvh + 1) * dh];
                    let dqi = &mut dq[row * qw + h * dh..row * qw + (h + 1) * dh];
                    for (o, &kk) in dqi.iter_mut().zip(kj) {
                        *o = *o + c * kk;
                    }
                    let dkj = &mut dk[col * kw + kvh * dh..col * kw + (kvh + 1) * dh];
                    for (o, &qq) in dkj.iter_mut().zip(qi) {
                        *o = *o + c * qq;
                    }
                }
            }
        }
    }
    (dq, dk, dv, db)
}
