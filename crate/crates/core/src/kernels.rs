//! Forward kernels over plain tensors.
//!
//! These are shared by the differentiating [`Tape`](crate::tape::Tape) and by
//! the tape-free skip-mode executor, so both paths perform identical
//! arithmetic in identical order.

use crate::{Element, Error, Result, Tensor};

/// Elementwise kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    /// `clamp(x, 0, 1)`.
    Clamp01,
    Exp,
    /// Natural log; non-positive input is a domain error.
    Ln,
    /// `x * sigmoid(x)`.
    Silu,
    Square,
    Scale(f64),
    /// `x + c`.
    Shift(f64),
    /// `max(x, c)`.
    Floor(f64),
}

impl Unary {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Unary::Clamp01 => x.max(T::zero()).min(T::one()),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Silu => silu(x),
            Unary::Square => x * x,
            Unary::Scale(c) => x * T::from_f64_lossy(c),
            Unary::Shift(c) => x + T::from_f64_lossy(c),
            Unary::Floor(c) => {
                let c = T::from_f64_lossy(c);
                if x > c {
                    x
                } else {
                    c
                }
            }
        }
    }

    /// Derivative at `x` given the forward output `y`. Kinks take the value
    /// zero: `relu'(0) = 0`, and `clamp01'` is one only on the open interval.
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        let step = |cond: bool| if cond { T::one() } else { T::zero() };
        match self {
            Unary::Relu => step(x > T::zero()),
            Unary::Clamp01 => step(x > T::zero() && x < T::one()),
            Unary::Exp => y,
            Unary::Ln => T::one() / x,
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Square => x + x,
            Unary::Scale(c) => T::from_f64_lossy(c),
            Unary::Shift(_) => T::one(),
            Unary::Floor(c) => step(x > T::from_f64_lossy(c)),
        }
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

pub fn map_unary<T: Element>(x: &Tensor<T>, kernel: Unary) -> Result<Tensor<T>> {
    if kernel == Unary::Ln {
        if let Some(bad) = x.data().iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::Domain(format!("ln of non-positive value {bad}")));
        }
    }
    Ok(x.map(|v| kernel.apply(v)))
}

fn matrix_dims<T: Element>(t: &Tensor<T>) -> Option<(usize, usize)> {
    match *t.shape() {
        [m, n] => Some((m, n)),
        _ => None,
    }
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::shape("matmul", a.shape(), b.shape());
    let (m, k) = matrix_dims(a).ok_or_else(mismatch)?;
    let (k2, n) = matrix_dims(b).ok_or_else(mismatch)?;
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, false);
    Tensor::new(&[m, n], out)
}

/// Row-wise softmax of `x + mask`. Mask entries of `-inf` exclude a position;
/// a row with every position excluded is an error.
pub fn softmax_rows<T: Element>(x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::shape("softmax_rows", x.shape(), m.shape()));
        }
    }
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    if let Some(m) = mask {
        for (o, &mv) in out.iter_mut().zip(m.data()) {
            *o = *o + mv;
        }
    }
    for (r, row) in out.chunks_mut(n.max(1)).enumerate() {
        softmax_in_place(row).ok_or(Error::DegenerateRow { row: r })?;
    }
    Tensor::new(x.shape(), out)
}

/// Stable in-place softmax; `None` when every entry is `-inf`.
pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) -> Option<()> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return None;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    Some(())
}

pub fn gather_rows<T: Element>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = matrix_dims(table).ok_or_else(|| Error::shape("gather_rows", table.shape(), &[]))?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Index { index: id, bound: v });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(&[ids.len(), d], out)
}

/// RMSNorm over the last axis: `x / sqrt(mean(x^2) + eps) * weight`.
/// Returns the output and the per-row reciprocal RMS.
pub fn rmsnorm<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.last_dim();
    if weight.shape() != [d] {
        return Err(Error::shape("rmsnorm", x.shape(), weight.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("rmsnorm eps must be positive, got {eps}")));
    }
    let eps = T::from_f64_lossy(eps);
    let dn = T::from_usize(d).unwrap();
    let w = weight.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut inv = Vec::with_capacity(x.rows());
    for row in x.data().chunks(d) {
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        out.extend(row.iter().zip(w).map(|(&v, &wi)| v * r * wi));
    }
    Ok((Tensor::new(x.shape(), out)?, inv))
}

/// Rotates consecutive pairs `(x[2t], x[2t+1])` of every head by
/// `sign * position * theta^(-2t/head_dim)`. `data` is `rows x (heads*head_dim)`.
pub fn rope_in_place<T: Element>(
    data: &mut [T],
    head_dim: usize,
    positions: &[usize],
    theta: f64,
    sign: f64,
) -> Result<()> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!("rope needs an even head dim, got {head_dim}")));
    }
    if positions.is_empty() {
        return Ok(());
    }
    let width = data.len() / positions.len();
    if width * positions.len() != data.len() || !width.is_multiple_of(head_dim) {
        return Err(Error::shape("rope", &[data.len()], &[positions.len(), head_dim]));
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|t| theta.powf(-2.0 * t as f64 / head_dim as f64))
        .collect();
    for (row, &pos) in data.chunks_mut(width).zip(positions) {
        if pos == 0 {
            continue;
        }
        let rot: Vec<(T, T)> = freqs
            .iter()
            .map(|f| {
                let angle = sign * pos as f64 * f;
                (T::from_f64_lossy(angle.cos()), T::from_f64_lossy(angle.sin()))
            })
            .collect();
        for head in row.chunks_mut(head_dim) {
            for (pair, &(c, s)) in head.chunks_mut(2).zip(&rot) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
    Ok(())
}

/// Layout of a batch of sequences for attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttnGeom {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }

    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / (self.heads / self.kv_heads)
    }

    /// Index of the probability block for `(sequence, head)`.
    pub(crate) fn prob_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.seq * self.seq
    }

    pub(crate) fn check(&self, q: usize, k: usize, v: usize) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::Config(format!(
                "heads {} not divisible by kv heads {}",
                self.heads, self.kv_heads
            )));
        }
        let n = self.tokens();
        if q != n * self.q_width() || k != n * self.kv_width() || v != k {
            return Err(Error::shape(
                "attention",
                &[q, k, v],
                &[n, self.q_width(), self.kv_width()],
            ));
        }
        Ok(())
    }
}

/// Causal grouped-query attention with an optional additive per-key bias.
///
/// Query `i` attends to keys `j <= i` of its own sequence with logits
/// `q_i . k_j / sqrt(head_dim) + key_bias[j]`. Rows whose `active` entry is
/// false are not computed and produce zeros. Returns the output and the
/// attention probabilities laid out as `batch x heads x seq x seq`.
pub fn attention<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    key_bias: Option<&[T]>,
    active: Option<&[bool]>,
    geom: AttnGeom,
) -> Result<(Vec<T>, Vec<T>)> {
    geom.check(q.len(), k.len(), v.len())?;
    let n = geom.seq;
    let dh = geom.head_dim;
    let (qw, kw) = (geom.q_width(), geom.kv_width());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); geom.tokens() * qw];
    let mut probs = vec![T::zero(); geom.batch * geom.heads * n * n];
    let mut scores = vec![T::zero(); n];
    for b in 0..geom.batch {
        for h in 0..geom.heads {
            let kvh = geom.kv_head_of(h);
            let pbase = geom.prob_offset(b, h);
            for i in 0..n {
                let row = b * n + i;
                if active.is_some_and(|a| !a[row]) {
                    continue;
                }
                let qi = &q[row * qw + h * dh..row * qw + (h + 1) * dh];
                for (j, s) in scores[..=i].iter_mut().enumerate() {
                    let col = b * n + j;
                    let kj = &k[col * kw + kvh * dh..col * kw + (kvh + 1) * dh];
                    let dot = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &c)| acc + a * c);
                    *s = dot * scale;
                    if let Some(bias) = key_bias {
                        *s = *s + bias[col];
                    }
                }
                softmax_in_place(&mut scores[..=i]).ok_or(Error::DegenerateRow { row })?;
                probs[pbase + i * n..pbase + i * n + i + 1].copy_from_slice(&scores[..=i]);
                let oi = &mut out[row * qw + h * dh..row * qw + (h + 1) * dh];
                for (j, &p) in scores[..=i].iter().enumerate() {
                    let col = b * n + j;
                    let vj = &v[col * kw + kvh * dh..col * kw + (kvh + 1) * dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o = *o + p * vv;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Mean token cross-entropy and the softmax probabilities of each row.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Vec<T>)> {
    let v = logits.last_dim();
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let mut probs = logits.data().to_vec();
    let mut total = T::zero();
    for (row, &t) in probs.chunks_mut(v).zip(targets) {
        if t >= v {
            return Err(Error::Index { index: t, bound: v });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let shifted_target = row[t] - max;
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        total = total + sum.ln() - shifted_target;
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    Ok((total / T::from_usize(targets.len()).unwrap(), probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let bad = matmul(&t(&[2, 3], &[0.; 6]), &t(&[2, 3], &[0.; 6]));
        match bad {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected a shape error, got {other:?}"),
        }
    }

    #[test]
    fn unary_examples() {
        let relu = map_unary(&t(&[3], &[-0.5, 0., 0.7]), Unary::Relu).unwrap();
        assert_eq!(relu.data(), &[0., 0., 0.7]);
        let c = map_unary(&t(&[3], &[-0.2, 0.4, 1.5]), Unary::Clamp01).unwrap();
        assert_eq!(c.data(), &[0., 0.4, 1.]);
        let ln = map_unary(&t(&[1], &[1e-6]), Unary::Ln).unwrap();
        assert!((ln.data()[0] - (-13.815510557964274)).abs() < 1e-12);
        assert!(matches!(map_unary(&t(&[1], &[0.]), Unary::Ln), Err(Error::Domain(_))));
    }

    #[test]
    fn kink_conventions() {
        assert_eq!(Unary::Relu.derivative(0.0f64, 0.0), 0.0);
        assert_eq!(Unary::Clamp01.derivative(0.0f64, 0.0), 0.0);
        assert_eq!(Unary::Clamp01.derivative(1.0f64, 1.0), 0.0);
        assert_eq!(Unary::Clamp01.derivative(0.5f64, 0.5), 1.0);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[3], &[0., 0., 0.]), None).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = t(&[2], &[0., f64::NEG_INFINITY]);
        let s = softmax_rows(&t(&[2], &[1., 2.]), Some(&m)).unwrap();
        assert_eq!(s.data(), &[1., 0.]);
        let s = softmax_rows(&t(&[3], &[0.1, 0.2, 0.3]), None).unwrap();
        let expect = [0.30060960535572734, 0.3322249935333473, 0.3671654011109255];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let all_out = t(&[2, 2], &[0., 0., f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(
            softmax_rows(&t(&[2, 2], &[0.; 4]), Some(&all_out)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn gather_examples() {
        let table = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(gather_rows(&table, &[1]).unwrap().data(), &[3., 4.]);
        assert!(matches!(gather_rows(&table, &[5]), Err(Error::Index { index: 5, bound: 3 })));
    }

    #[test]
    fn rmsnorm_examples() {
        let (y, _) = rmsnorm(&t(&[2], &[3., 4.]), &t(&[2], &[1., 1.]), 1e-300).unwrap();
        let rms = (12.5f64).sqrt();
        assert!((y.data()[0] - 3.0 / rms).abs() < 1e-12);
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);
        let (y, _) = rmsnorm(&t(&[2], &[3., 4.]), &t(&[2], &[0., 0.]), 1e-5).unwrap();
        assert_eq!(y.data(), &[0., 0.]);
        let (y, _) = rmsnorm(&Tensor::<f64>::ones(&[4]), &Tensor::ones(&[4]), 1e-5).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rope_examples() {
        let mut x = [1.0f64, 0.0];
        rope_in_place(&mut x, 2, &[1], 10000.0, 1.0).unwrap();
        assert!((x[0] - 1f64.cos()).abs() < 1e-15 && (x[1] - 1f64.sin()).abs() < 1e-15);
        let mut y = [0.3f64, -0.7, 1.1, 0.2];
        let orig = y;
        rope_in_place(&mut y, 4, &[0], 10000.0, 1.0).unwrap();
        assert_eq!(y, orig);
        rope_in_place(&mut y, 4, &[7], 10000.0, 1.0).unwrap();
        for p in 0..2 {
            let before = orig[2 * p].hypot(orig[2 * p + 1]);
            let after = y[2 * p].hypot(y[2 * p + 1]);
            assert!((before - after).abs() < 1e-12);
        }
        assert!(matches!(rope_in_place(&mut [0.0f64; 3], 3, &[1], 1e4, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let (ce, _) = cross_entropy(&Tensor::<f64>::zeros(&[1, 16]), &[3]).unwrap();
        assert!((ce - 16f64.ln()).abs() < 1e-12);
        let mut logits = vec![0.0; 16];
        logits[5] = 1000.0;
        let (ce, _) = cross_entropy(&t(&[1, 16], &logits), &[5]).unwrap();
        assert!(ce.abs() < 1e-12);
        let (ce, _) = cross_entropy(&t(&[1, 3], &[1., 2., 3.]), &[2]).unwrap();
        assert!((ce - 0.40760596444437).abs() < 1e-10);
        assert!(matches!(
            cross_entropy(&t(&[1, 3], &[1., 2., 3.]), &[3]),
            Err(Error::Index { .. })
        ));
    }
}
