//! Dense, windowed and long-term context attention.
//!
//! Both sparse variants are expressed as a [`GroupPlan`]: a list of groups,
//! each naming the frames that act as queries and the frames that act as
//! keys/values. Padding slots are `None` and are masked out of the softmax.
//! The same plan drives the forward pass, the backward pass used by training,
//! and the score-element accounting.

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Local window size `W`.
    pub window: usize,
    /// Long-term stride `G`: number of sparse groups.
    pub stride: usize,
    /// How many consecutive windows the keys of one window span (1, 2 or 3).
    pub overlap_windows: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { window: 64, stride: 64, overlap_windows: 2 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.stride < 1 {
            return Err(Error::Config("attention window and stride must be at least 1".into()));
        }
        if !(1..=3).contains(&self.overlap_windows) {
            return Err(Error::Config(format!(
                "overlap_windows must be 1, 2 or 3, got {}",
                self.overlap_windows
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    /// Group `g` holds frames `[gW, (g+1)W)`.
    Window,
    /// Group `p` holds frames `p, p+G, p+2G, …`.
    Stride,
}

/// Bookkeeping that maps frames to `(group, position)` slots and back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionPlan {
    pub kind: PartitionKind,
    pub len: usize,
    pub groups: usize,
    pub group_len: usize,
}

impl PartitionPlan {
    pub fn window(len: usize, window: usize) -> Self {
        assert!(window >= 1, "window must be at least 1");
        Self { kind: PartitionKind::Window, len, groups: len.div_ceil(window), group_len: window }
    }

    pub fn stride(len: usize, stride: usize) -> Self {
        assert!(stride >= 1, "stride must be at least 1");
        Self { kind: PartitionKind::Stride, len, groups: stride, group_len: len.div_ceil(stride) }
    }

    pub fn padded_len(&self) -> usize {
        self.groups * self.group_len
    }

    pub fn slot(&self, frame: usize) -> (usize, usize) {
        debug_assert!(frame < self.len);
        match self.kind {
            PartitionKind::Window => (frame / self.group_len, frame % self.group_len),
            PartitionKind::Stride => (frame % self.groups, frame / self.groups),
        }
    }

    /// The frame stored at a slot, or `None` for padding.
    pub fn frame(&self, group: usize, pos: usize) -> Option<usize> {
        let f = match self.kind {
            PartitionKind::Window => group * self.group_len + pos,
            PartitionKind::Stride => group + pos * self.groups,
        };
        (f < self.len).then_some(f)
    }

    /// Validity flags of a group's slots (`true` = real frame).
    pub fn pad_mask(&self, group: usize) -> Vec<bool> {
        (0..self.group_len).map(|p| self.frame(group, p).is_some()).collect()
    }

    fn partition<R: Real>(&self, x: &Mat<R>) -> Vec<Mat<R>> {
        assert_eq!(x.rows(), self.len, "partition length mismatch");
        (0..self.groups)
            .map(|g| {
                let mut m = Mat::zeros(self.group_len, x.cols());
                for p in 0..self.group_len {
                    if let Some(f) = self.frame(g, p) {
                        m.row_mut(p).copy_from_slice(x.row(f));
                    }
                }
                m
            })
            .collect()
    }

    /// Restores the original frame order, dropping padded slots.
    pub fn unpartition<R: Real>(&self, groups: &[Mat<R>]) -> Result<Mat<R>> {
        if groups.len() != self.groups || groups.iter().any(|g| g.rows() != self.group_len) {
            return Err(Error::Invariant("group shapes do not match partition plan".into()));
        }
        let cols = groups.first().map_or(0, Mat::cols);
        let mut out = Mat::zeros(self.len, cols);
        for t in 0..self.len {
            let (g, p) = self.slot(t);
            out.row_mut(t).copy_from_slice(groups[g].row(p));
        }
        Ok(out)
    }
}

/// Splits `x` into `⌈T/W⌉` zero-padded windows of `W` frames.
pub fn window_partition<R: Real>(x: &Mat<R>, window: usize) -> (Vec<Mat<R>>, PartitionPlan) {
    let plan = PartitionPlan::window(x.rows(), window);
    (plan.partition(x), plan)
}

/// Splits `x` into `G` zero-padded strided groups of `⌈T/G⌉` frames.
pub fn stride_partition<R: Real>(x: &Mat<R>, stride: usize) -> (Vec<Mat<R>>, PartitionPlan) {
    let plan = PartitionPlan::stride(x.rows(), stride);
    (plan.partition(x), plan)
}

/// One independent attention problem inside a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub queries: Vec<Option<usize>>,
    pub keys: Vec<Option<usize>>,
}

/// The groups that make up one sparse attention over a length-`T` sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    pub len: usize,
    pub groups: Vec<Group>,
}

impl GroupPlan {
    /// A single group covering the whole sequence.
    pub fn dense(len: usize) -> Self {
        let all: Vec<Option<usize>> = (0..len).map(Some).collect();
        Self { len, groups: vec![Group { queries: all.clone(), keys: all }] }
    }

    /// Window `g` queries frames `[gW, (g+1)W)` and attends to
    /// `[gW, (g+overlap)W)`, with out-of-range slots masked.
    pub fn windowed(len: usize, cfg: &AttentionConfig) -> Self {
        let w = cfg.window;
        let slot = |f: usize| (f < len).then_some(f);
        let groups = (0..len.div_ceil(w))
            .map(|g| Group {
                queries: (g * w..(g + 1) * w).map(slot).collect(),
                keys: (g * w..(g + cfg.overlap_windows) * w).map(slot).collect(),
            })
            .collect();
        Self { len, groups }
    }

    /// Group `p` attends among frames `p, p+G, …`; keys equal queries.
    pub fn longterm(len: usize, cfg: &AttentionConfig) -> Self {
        let plan = PartitionPlan::stride(len, cfg.stride);
        let groups = (0..plan.groups)
            .map(|g| {
                let slots: Vec<Option<usize>> =
                    (0..plan.group_len).map(|p| plan.frame(g, p)).collect();
                Group { queries: slots.clone(), keys: slots }
            })
            .collect();
        Self { len, groups }
    }

    /// Number of query·key score entries the kernel evaluates, padding included.
    pub fn score_elements(&self) -> usize {
        self.groups.iter().map(|g| g.queries.len() * g.keys.len()).sum()
    }
}

/// How the attention width is split across heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub heads: usize,
    /// Split query/key columns between heads; when false every head sees all of them.
    pub split_qk: bool,
}

impl HeadLayout {
    pub const SINGLE: HeadLayout = HeadLayout { heads: 1, split_qk: true };

    fn qk_cols(&self, d_qk: usize, h: usize) -> (usize, usize) {
        if self.split_qk {
            let w = d_qk / self.heads;
            (h * w, (h + 1) * w)
        } else {
            (0, d_qk)
        }
    }

    fn v_cols(&self, d_v: usize, h: usize) -> (usize, usize) {
        let w = d_v / self.heads;
        (h * w, (h + 1) * w)
    }

    fn check(&self, d_qk: usize, d_v: usize) -> Result<()> {
        if self.heads == 0
            || !d_v.is_multiple_of(self.heads)
            || (self.split_qk && !d_qk.is_multiple_of(self.heads))
        {
            return Err(Error::Config(format!(
                "{} heads do not divide attention widths (qk {d_qk}, v {d_v})",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Softmax weights saved by the forward pass, one matrix per (group, head).
#[derive(Debug, Clone)]
pub struct AttentionCache<R> {
    weights: Vec<Mat<R>>,
}

/// Output of a grouped attention together with its bookkeeping.
#[derive(Debug, Clone)]
pub struct AttentionResult<R> {
    pub output: Mat<R>,
    pub cache: AttentionCache<R>,
    /// Score entries actually evaluated by the kernel.
    pub score_elements: usize,
}

fn gather<R: Real>(src: &Mat<R>, slots: &[Option<usize>], cols: (usize, usize)) -> Mat<R> {
    let mut m = Mat::zeros(slots.len(), cols.1 - cols.0);
    for (i, s) in slots.iter().enumerate() {
        if let Some(f) = *s {
            m.row_mut(i).copy_from_slice(&src.row(f)[cols.0..cols.1]);
        }
    }
    m
}

fn scatter_add<R: Real>(dst: &mut Mat<R>, slots: &[Option<usize>], cols: (usize, usize), src: &Mat<R>) {
    for (i, s) in slots.iter().enumerate() {
        if let Some(f) = *s {
            for (d, &v) in dst.row_mut(f)[cols.0..cols.1].iter_mut().zip(src.row(i)) {
                *d += v;
            }
        }
    }
}

/// In-place masked softmax over each row. Rows with no valid key become all
/// zeros and are reported through the returned flag vector.
fn masked_softmax_rows<R: Real>(scores: &mut Mat<R>, keys: &[Option<usize>]) -> Vec<bool> {
    let mut degenerate = vec![false; scores.rows()];
    for (i, flag) in degenerate.iter_mut().enumerate() {
        let row = scores.row_mut(i);
        let mut max = R::neg_infinity();
        for (s, k) in row.iter().zip(keys) {
            if k.is_some() && *s > max {
                max = *s;
            }
        }
        if max == R::neg_infinity() {
            row.iter_mut().for_each(|s| *s = R::zero());
            *flag = true;
            continue;
        }
        let mut sum = R::zero();
        for (s, k) in row.iter_mut().zip(keys) {
            *s = if k.is_some() { (*s - max).exp() } else { R::zero() };
            sum += *s;
        }
        let inv = R::one() / sum;
        row.iter_mut().for_each(|s| *s *= inv);
    }
    degenerate
}

/// Runs every group of `plan` as an independent dense attention.
///
/// `q`, `k` share their width, `k`, `v` share their rows; all have `plan.len` rows.
pub fn grouped_attention<R: Real>(
    plan: &GroupPlan,
    q: &Mat<R>,
    k: &Mat<R>,
    v: &Mat<R>,
    heads: HeadLayout,
) -> Result<AttentionResult<R>> {
    check_shapes(plan.len, q, k, v)?;
    heads.check(q.cols(), v.cols())?;
    let mut output = Mat::zeros(q.rows(), v.cols());
    let mut weights = Vec::with_capacity(plan.groups.len() * heads.heads);
    let mut score_elements = 0;
    for group in &plan.groups {
        for h in 0..heads.heads {
            let qc = heads.qk_cols(q.cols(), h);
            let vc = heads.v_cols(v.cols(), h);
            let qg = gather(q, &group.queries, qc);
            let kg = gather(k, &group.keys, qc);
            let vg = gather(v, &group.keys, vc);
            let mut scores = qg.matmul_t(&kg);
            score_elements += scores.len();
            scores.scale(R::one() / R::lit((qc.1 - qc.0) as f64).sqrt());
            let degenerate = masked_softmax_rows(&mut scores, &group.keys);
            if let Some(i) = degenerate.iter().position(|&d| d) {
                if let Some(row) = group.queries[i] {
                    return Err(Error::DegenerateAttention { row });
                }
            }
            let og = scores.matmul(&vg);
            for (i, s) in group.queries.iter().enumerate() {
                if let Some(f) = *s {
                    output.row_mut(f)[vc.0..vc.1].copy_from_slice(og.row(i));
                }
            }
            weights.push(scores);
        }
    }
    Ok(AttentionResult { output, cache: AttentionCache { weights }, score_elements })
}

/// Gradients of [`grouped_attention`] with respect to `q`, `k` and `v`.
pub fn grouped_attention_backward<R: Real>(
    plan: &GroupPlan,
    q: &Mat<R>,
    k: &Mat<R>,
    v: &Mat<R>,
    heads: HeadLayout,
    cache: &AttentionCache<R>,
    d_out: &Mat<R>,
) -> (Mat<R>, Mat<R>, Mat<R>) {
    let mut dq = Mat::zeros(q.rows(), q.cols());
    let mut dk = Mat::zeros(k.rows(), k.cols());
    let mut dv = Mat::zeros(v.rows(), v.cols());
    let mut cached = cache.weights.iter();
    for group in &plan.groups {
        for h in 0..heads.heads {
            let a = cached.next().expect("attention cache matches plan");
            let qc = heads.qk_cols(q.cols(), h);
            let vc = heads.v_cols(v.cols(), h);
            let scale = R::one() / R::lit((qc.1 - qc.0) as f64).sqrt();
            let qg = gather(q, &group.queries, qc);
            let kg = gather(k, &group.keys, qc);
            let vg = gather(v, &group.keys, vc);
            let dog = gather(d_out, &group.queries, vc);

            scatter_add(&mut dv, &group.keys, vc, &a.t_matmul(&dog));
            let mut ds = dog.matmul_t(&vg);
            for i in 0..ds.rows() {
                let arow = a.row(i);
                let drow = ds.row_mut(i);
                let dot: R = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                for (d, &w) in drow.iter_mut().zip(arow) {
                    *d = w * (*d - dot) * scale;
                }
            }
            scatter_add(&mut dq, &group.queries, qc, &ds.matmul(&kg));
            scatter_add(&mut dk, &group.keys, qc, &ds.t_matmul(&qg));
        }
    }
    (dq, dk, dv)
}

fn check_shapes<R: Real>(len: usize, q: &Mat<R>, k: &Mat<R>, v: &Mat<R>) -> Result<()> {
    if q.rows() != len || k.rows() != len || v.rows() != len {
        return Err(Error::Config(format!(
            "attention inputs must all have {len} rows, got q {}, k {}, v {}",
            q.rows(),
            k.rows(),
            v.rows()
        )));
    }
    if q.cols() != k.cols() {
        return Err(Error::Config(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        )));
    }
    Ok(())
}

/// `softmax_row(Q·Kᵀ/√d)·V` with optional key validity flags.
pub fn dense_attention<R: Real>(
    q: &Mat<R>,
    k: &Mat<R>,
    v: &Mat<R>,
    mask: Option<&[bool]>,
) -> Result<Mat<R>> {
    if k.rows() != v.rows() {
        return Err(Error::Config(format!(
            "keys have {} rows but values have {}",
            k.rows(),
            v.rows()
        )));
    }
    if q.cols() != k.cols() {
        return Err(Error::Config("query and key widths differ".into()));
    }
    if let Some(m) = mask {
        if m.len() != k.rows() {
            return Err(Error::Config("mask length differs from key count".into()));
        }
    }
    let keys: Vec<Option<usize>> =
        (0..k.rows()).map(|j| mask.is_none_or(|m| m[j]).then_some(j)).collect();
    let mut scores = q.matmul_t(k);
    scores.scale(R::one() / R::lit(q.cols() as f64).sqrt());
    let degenerate = masked_softmax_rows(&mut scores, &keys);
    if let Some(row) = degenerate.iter().position(|&d| d) {
        return Err(Error::DegenerateAttention { row });
    }
    Ok(scores.matmul(v))
}

/// Local attention over windows of `W` frames whose keys extend into the following windows.
pub fn windowed_attention<R: Real>(
    q: &Mat<R>,
    k: &Mat<R>,
    v: &Mat<R>,
    cfg: &AttentionConfig,
) -> Result<Mat<R>> {
    cfg.validate()?;
    let plan = GroupPlan::windowed(q.rows(), cfg);
    Ok(grouped_attention(&plan, q, k, v, HeadLayout::SINGLE)?.output)
}

/// Sparse attention among every `G`-th frame, so each query sees the whole sequence.
pub fn longterm_attention<R: Real>(
    q: &Mat<R>,
    k: &Mat<R>,
    v: &Mat<R>,
    cfg: &AttentionConfig,
) -> Result<Mat<R>> {
    cfg.validate()?;
    let plan = GroupPlan::longterm(q.rows(), cfg);
    Ok(grouped_attention(&plan, q, k, v, HeadLayout::SINGLE)?.output)
}
