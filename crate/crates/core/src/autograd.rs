//! A small reverse-mode tape over matrices.
//!
//! Every operation the network uses is a fused node with a hand-written
//! backward rule. Nodes are appended in execution order, so walking the tape
//! backwards visits each node after all of its consumers.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{grouped_attention, grouped_attention_backward, AttentionCache, GroupPlan, HeadLayout};
use crate::error::Result;
use crate::tensor::{gemm_into, Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<R> {
    Leaf,
    /// `x·w + b` with `b` a `1×out` row.
    Linear { x: Var, w: Var, b: Var },
    /// Kernel-3 dilated convolution; `w` is `(3·in)×out`, tap-major.
    Conv { x: Var, w: Var, b: Var, dilation: usize },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: Arc<GroupPlan>,
        heads: HeadLayout,
        cache: AttentionCache<R>,
    },
    /// Inverted dropout; `mask` holds `0` or `1/(1-p)`.
    Dropout { x: Var, mask: Vec<R> },
    LogSoftmax { x: Var },
    Exp { x: Var },
    CrossEntropy { logp: Var, labels: Vec<usize>, floor: R },
    Smooth { logp: Var, tau: R, floor: R, stop_grad: bool },
    WeightedSum { terms: Vec<(Var, R)> },
}

struct Node<R> {
    value: Mat<R>,
    op: Op<R>,
}

pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf that influenced it.
pub struct Gradients<R> {
    grads: Vec<Option<Mat<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Mat<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_cdf<R: Real>(x: R) -> R {
    R::lit(0.5) * (R::one() + (x * R::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<R: Real>(x: R) -> R {
    R::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-R::lit(0.5) * x * x).exp()
}

/// Exact GELU: `x·Φ(x)`.
pub fn gelu<R: Real>(x: R) -> R {
    x * gelu_cdf(x)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<R: Real>(x: &Mat<R>) -> Mat<R> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<R>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// `im2col` for a kernel-3 convolution with symmetric zero padding.
fn conv_columns<R: Real>(x: &Mat<R>, dilation: usize) -> Mat<R> {
    let (t, d) = x.shape();
    let mut cols = Mat::zeros(t, 3 * d);
    for i in 0..t {
        for tap in 0..3 {
            let src = i as isize + (tap as isize - 1) * dilation as isize;
            if (0..t as isize).contains(&src) {
                cols.row_mut(i)[tap * d..(tap + 1) * d].copy_from_slice(x.row(src as usize));
            }
        }
    }
    cols
}

fn add_bias<R: Real>(y: &mut Mat<R>, b: &Mat<R>) {
    for i in 0..y.rows() {
        for (v, &bb) in y.row_mut(i).iter_mut().zip(b.as_slice()) {
            *v += bb;
        }
    }
}

fn column_sums<R: Real>(m: &Mat<R>) -> Mat<R> {
    let mut s = Mat::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (a, &v) in s.as_mut_slice().iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    s
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat<R> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> R {
        self.value(v).as_slice()[0]
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut y = self.value(x).matmul(self.value(w));
        add_bias(&mut y, self.value(b));
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let cols = conv_columns(self.value(x), dilation);
        let mut y = cols.matmul(self.value(w));
        add_bias(&mut y, self.value(b));
        self.push(y, Op::Conv { x, w, b, dilation })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(gelu);
        self.push(y, Op::Gelu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add { a, b })
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        plan: Arc<GroupPlan>,
        heads: HeadLayout,
    ) -> Result<Var> {
        let res = grouped_attention(&plan, self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(res.output, Op::Attention { q, k, v, plan, heads, cache: res.cache }))
    }

    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = R::lit(1.0 / (1.0 - p));
        let mask: Vec<R> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { R::zero() } else { keep })
            .collect();
        let mut y = self.value(x).clone();
        for (v, &m) in y.as_mut_slice().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(y, Op::Dropout { x, mask })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let y = log_softmax_rows(self.value(x));
        self.push(y, Op::LogSoftmax { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(R::exp);
        self.push(y, Op::Exp { x })
    }

    /// `-(1/T) Σ_t max(logp[t, label_t], floor)`.
    pub fn cross_entropy(&mut self, logp: Var, labels: &[usize], floor: R) -> Var {
        let lp = self.value(logp);
        assert_eq!(lp.rows(), labels.len(), "cross entropy length mismatch");
        let total: R = labels.iter().enumerate().map(|(t, &c)| lp.get(t, c).max(floor)).sum();
        let loss = -total / R::lit(labels.len() as f64);
        self.push(Mat::filled(1, 1, loss), Op::CrossEntropy { logp, labels: labels.to_vec(), floor })
    }

    /// Mean over adjacent frame pairs of `min(|Δ log p|, τ)²`.
    pub fn smooth(&mut self, logp: Var, tau: R, floor: R, stop_grad: bool) -> Var {
        let lp = self.value(logp);
        let (t, c) = lp.shape();
        let mut total = R::zero();
        for i in 1..t {
            for j in 0..c {
                let d = (lp.get(i, j).max(floor) - lp.get(i - 1, j).max(floor)).abs().min(tau);
                total += d * d;
            }
        }
        let loss = if t < 2 { R::zero() } else { total / R::lit(((t - 1) * c) as f64) };
        self.push(Mat::filled(1, 1, loss), Op::Smooth { logp, tau, floor, stop_grad })
    }

    /// `Σ weight · scalar` over `1×1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, R)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Mat::filled(1, 1, total), Op::WeightedSum { terms: terms.to_vec() })
    }

    /// Reverse pass from a `1×1` root, seeded with `d root = 1`.
    pub fn backward(&self, root: Var) -> Gradients<R> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, R::one()));

        fn accumulate<R: Real>(grads: &mut [Option<Mat<R>>], v: Var, g: Mat<R>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    accumulate(&mut grads, *x, gy.matmul_t(wv));
                    accumulate(&mut grads, *w, xv.t_matmul(&gy));
                    accumulate(&mut grads, *b, column_sums(&gy));
                }
                Op::Conv { x, w, b, dilation } => {
                    let xv = self.value(*x);
                    let cols = conv_columns(xv, *dilation);
                    accumulate(&mut grads, *w, cols.t_matmul(&gy));
                    accumulate(&mut grads, *b, column_sums(&gy));
                    let mut dcols = Mat::zeros(cols.rows(), cols.cols());
                    gemm_into(&gy, false, self.value(*w), true, &mut dcols, R::one(), R::zero());
                    let (t, d) = xv.shape();
                    let mut dx = Mat::zeros(t, d);
                    for i in 0..t {
                        for tap in 0..3 {
                            let src = i as isize + (tap as isize - 1) * *dilation as isize;
                            if (0..t as isize).contains(&src) {
                                let from = &dcols.row(i)[tap * d..(tap + 1) * d];
                                for (a, &g) in dx.row_mut(src as usize).iter_mut().zip(from) {
                                    *a += g;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let mut dx = gy;
                    for (g, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        *g *= gelu_cdf(v) + v * gelu_pdf(v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Attention { q, k, v, plan, heads, cache } => {
                    let (dq, dk, dv) = grouped_attention_backward(
                        plan,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *heads,
                        cache,
                        &gy,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = gy;
                    for (g, &m) in dx.as_mut_slice().iter_mut().zip(mask) {
                        *g *= m;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax { x } => {
                    let y = &node.value;
                    let mut dx = gy;
                    for i in 0..dx.rows() {
                        let s: R = dx.row(i).iter().copied().sum();
                        for (g, &lp) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                            *g -= lp.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp { x } => {
                    let mut dx = gy;
                    for (g, &e) in dx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *g *= e;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logp, labels, floor } => {
                    let lp = self.value(*logp);
                    let scale = -gy.as_slice()[0] / R::lit(labels.len() as f64);
                    let mut dx = Mat::zeros(lp.rows(), lp.cols());
                    for (t, &c) in labels.iter().enumerate() {
                        if lp.get(t, c) > *floor {
                            dx.set(t, c, scale);
                        }
                    }
                    accumulate(&mut grads, *logp, dx);
                }
                Op::Smooth { logp, tau, floor, stop_grad } => {
                    let lp = self.value(*logp);
                    let (t, c) = lp.shape();
                    let mut dx = Mat::zeros(t, c);
                    if t >= 2 {
                        let scale = gy.as_slice()[0] * R::lit(2.0) / R::lit(((t - 1) * c) as f64);
                        for i in 1..t {
                            for j in 0..c {
                                let (cur, prev) = (lp.get(i, j), lp.get(i - 1, j));
                                let d = cur.max(*floor) - prev.max(*floor);
                                if d.abs() >= *tau {
                                    continue;
                                }
                                if cur > *floor {
                                    dx.set(i, j, dx.get(i, j) + scale * d);
                                }
                                if !*stop_grad && prev > *floor {
                                    dx.set(i - 1, j, dx.get(i - 1, j) - scale * d);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *logp, dx);
                }
                Op::WeightedSum { terms } => {
                    let g = gy.as_slice()[0];
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Mat::filled(1, 1, g * w));
                    }
                }
            }
        }
        Gradients { grads }
    }
}
