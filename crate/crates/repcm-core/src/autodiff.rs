//! Minimal reverse-mode autodiff over dense f64 matrices.
//!
//! A [`Tape`] records a DAG of matrix operations; [`Tape::backward`]
//! propagates gradients from a scalar loss back to every parameter leaf.
//! Ops only reference earlier nodes, so a single reverse sweep over the node
//! list completes all gradients. Everything is f64 and strictly ordered, so
//! forward values and gradients are bit-reproducible.
//!
//! Scalars are 1 x 1 matrices; vectors are 1 x C rows.

use ndarray::{Array2, Axis};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// M x C plus a 1 x C row broadcast over rows.
    AddRow(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    /// Row softmax with -inf applied to logits where the mask is 0.
    MaskedSoftmaxRows(Var),
    LayerNormRows(Var),
    Silu(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    MeanRows(Var),
    SumAll(Var),
    /// Mean over rows grouped by segment id: K x C -> R x C.
    SegmentMeanRows(Var, Vec<usize>, usize),
    /// Row gather: R x C -> ids.len() x C.
    GatherRows(Var, Vec<usize>),
    /// 1 x C -> rows x C.
    BroadcastRow(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    L2NormalizeRows(Var),
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.ops.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] / &self.values[b.0];
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x * s);
        let g = self.needs(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x + s);
        let g = self.needs(a);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.values[row.0].nrows(), 1);
        let v = &self.values[a.0] + &self.values[row.0].row(0).insert_axis(Axis(0)).broadcast(self.values[a.0].dim()).unwrap();
        let g = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.values[a.0].t().to_owned();
        let g = self.needs(a);
        self.push(v, Op::Transpose(a), g)
    }

    fn softmax_rows_value(logits: &Array2<f64>) -> Array2<f64> {
        let mut out = logits.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                // fully masked row; keep zeros (caller guards against this)
                row.fill(0.0);
                continue;
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = Self::softmax_rows_value(&self.values[a.0]);
        let g = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    /// Additive masking: logits where `mask == 0` are set to -inf before the
    /// softmax, so those weights come out exactly 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Array2<f64>) -> Var {
        debug_assert_eq!(self.values[a.0].dim(), mask.dim());
        let mut logits = self.values[a.0].clone();
        ndarray::Zip::from(&mut logits).and(mask).for_each(|l, &m| {
            if m == 0.0 {
                *l = f64::NEG_INFINITY;
            }
        });
        let v = Self::softmax_rows_value(&logits);
        let g = self.needs(a);
        self.push(v, Op::MaskedSoftmaxRows(a), g)
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let c = row.len() as f64;
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let g = self.needs(a);
        self.push(out, Op::LayerNormRows(a), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x / (1.0 + (-x).exp()));
        let g = self.needs(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::exp);
        let g = self.needs(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::ln);
        let g = self.needs(a);
        self.push(v, Op::Ln(a), g)
    }

    /// Clamp with straight-through zero gradient outside [lo, hi].
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x.clamp(lo, hi));
        let g = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let v = x.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let g = self.needs(a);
        self.push(v, Op::MeanRows(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.values[a.0].sum());
        let g = self.needs(a);
        self.push(v, Op::SumAll(a), g)
    }

    /// Mean of the rows assigned to each segment: K x C -> segments x C.
    /// Every segment must own at least one row.
    pub fn segment_mean_rows(&mut self, a: Var, ids: &[usize], segments: usize) -> Var {
        let x = &self.values[a.0];
        debug_assert_eq!(ids.len(), x.nrows());
        let mut out = Array2::<f64>::zeros((segments, x.ncols()));
        let mut counts = vec![0.0f64; segments];
        for (row, &s) in ids.iter().enumerate() {
            debug_assert!(s < segments);
            let mut target = out.row_mut(s);
            target += &x.row(row);
            counts[s] += 1.0;
        }
        for (s, &c) in counts.iter().enumerate() {
            debug_assert!(c > 0.0, "segment {s} has no rows");
            let mut row = out.row_mut(s);
            row /= c;
        }
        let g = self.needs(a);
        self.push(out, Op::SegmentMeanRows(a, ids.to_vec(), segments), g)
    }

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let x = &self.values[a.0];
        let mut out = Array2::<f64>::zeros((ids.len(), x.ncols()));
        for (row, &s) in ids.iter().enumerate() {
            out.row_mut(row).assign(&x.row(s));
        }
        let g = self.needs(a);
        self.push(out, Op::GatherRows(a, ids.to_vec()), g)
    }

    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let x = &self.values[a.0];
        debug_assert_eq!(x.nrows(), 1);
        let out = x.row(0).insert_axis(Axis(0)).broadcast((rows, x.ncols())).unwrap().to_owned();
        let g = self.needs(a);
        self.push(out, Op::BroadcastRow(a), g)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let x = &self.values[a.0];
        let y = &self.values[b.0];
        debug_assert_eq!(x.nrows(), y.nrows());
        let mut out = Array2::<f64>::zeros((x.nrows(), x.ncols() + y.ncols()));
        out.slice_mut(ndarray::s![.., ..x.ncols()]).assign(x);
        out.slice_mut(ndarray::s![.., x.ncols()..]).assign(y);
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCols(a, b), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].ncols();
        let rows: usize = parts.iter().map(|p| self.values[p.0].nrows()).sum();
        let mut out = Array2::<f64>::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let x = &self.values[p.0];
            out.slice_mut(ndarray::s![at..at + x.nrows(), ..]).assign(x);
            at += x.nrows();
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.values[a.0].slice(ndarray::s![.., start..end]).to_owned();
        let g = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), g)
    }

    /// Normalize each row to unit L2 norm. Rows must be nonzero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0, "l2_normalize_rows on a zero row");
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let g = self.needs(a);
        self.push(out, Op::L2NormalizeRows(a), g)
    }

    /// Reverse sweep from a 1 x 1 loss node. Returns one gradient slot per
    /// node; only nodes on a parameter path are populated.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.values[loss.0].dim(), (1, 1), "loss must be a scalar node");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.ops.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        let add_grad = |slot: &mut Option<Array2<f64>>, inc: Array2<f64>| match slot {
            Some(g) => *g += &inc,
            None => *slot = Some(inc),
        };

        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g); // keep parameter gradients
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let inc = g.dot(&self.values[b.0].t());
                        add_grad(&mut grads[a.0], inc);
                    }
                    if self.needs(*b) {
                        let inc = self.values[a.0].t().dot(&g);
                        add_grad(&mut grads[b.0], inc);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        add_grad(&mut grads[b.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        add_grad(&mut grads[b.0], g.mapv(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], &g * &self.values[b.0]);
                    }
                    if self.needs(*b) {
                        add_grad(&mut grads[b.0], &g * &self.values[a.0]);
                    }
                }
                Op::Div(a, b) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], &g / &self.values[b.0]);
                    }
                    if self.needs(*b) {
                        let vb = &self.values[b.0];
                        let inc = &g * &(-&self.values[a.0] / (vb * vb));
                        add_grad(&mut grads[b.0], inc);
                    }
                }
                Op::Scale(a, s) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], g.mapv(|v| v * s));
                    }
                }
                Op::AddScalar(a) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*row) {
                        let inc = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        add_grad(&mut grads[row.0], inc);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], g.t().to_owned());
                    }
                }
                Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                    if self.needs(*a) {
                        // dL/dx = y * (g - sum(g*y)) per row; zero weights
                        // (masked entries) keep zero gradient.
                        let y = &self.values[idx];
                        let mut inc = Array2::<f64>::zeros(y.dim());
                        for r in 0..y.nrows() {
                            let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                            for c in 0..y.ncols() {
                                inc[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                            }
                        }
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::LayerNormRows(a) => {
                    if self.needs(*a) {
                        let x = &self.values[a.0];
                        let y = &self.values[idx];
                        let mut inc = Array2::<f64>::zeros(x.dim());
                        for r in 0..x.nrows() {
                            let c = x.ncols() as f64;
                            let mean = x.row(r).sum() / c;
                            let var = x.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
                            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                            let g_mean: f64 = g.row(r).sum() / c;
                            let gy_mean: f64 =
                                (0..x.ncols()).map(|j| g[[r, j]] * y[[r, j]]).sum::<f64>() / c;
                            for j in 0..x.ncols() {
                                inc[[r, j]] = inv * (g[[r, j]] - g_mean - y[[r, j]] * gy_mean);
                            }
                        }
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::Silu(a) => {
                    if self.needs(*a) {
                        let x = &self.values[a.0];
                        let inc = ndarray::Zip::from(&g).and(x).map_collect(|&gv, &xv| {
                            let s = 1.0 / (1.0 + (-xv).exp());
                            gv * s * (1.0 + xv * (1.0 - s))
                        });
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::Exp(a) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], &g * &self.values[idx]);
                    }
                }
                Op::Ln(a) => {
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], &g / &self.values[a.0]);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if self.needs(*a) {
                        let x = &self.values[a.0];
                        let inc = ndarray::Zip::from(&g)
                            .and(x)
                            .map_collect(|&gv, &xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 });
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::MeanRows(a) => {
                    if self.needs(*a) {
                        let rows = self.values[a.0].nrows();
                        let scaled = g.mapv(|v| v / rows as f64);
                        let inc = scaled.row(0).insert_axis(Axis(0)).broadcast(self.values[a.0].dim()).unwrap().to_owned();
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::SumAll(a) => {
                    if self.needs(*a) {
                        let inc = Array2::from_elem(self.values[a.0].dim(), g[[0, 0]]);
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::SegmentMeanRows(a, ids, segments) => {
                    if self.needs(*a) {
                        let mut counts = vec![0.0f64; *segments];
                        for &s in ids {
                            counts[s] += 1.0;
                        }
                        let mut inc = Array2::<f64>::zeros(self.values[a.0].dim());
                        for (row, &s) in ids.iter().enumerate() {
                            let w = 1.0 / counts[s];
                            for c in 0..inc.ncols() {
                                inc[[row, c]] = g[[s, c]] * w;
                            }
                        }
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::GatherRows(a, ids) => {
                    if self.needs(*a) {
                        let mut inc = Array2::<f64>::zeros(self.values[a.0].dim());
                        for (row, &s) in ids.iter().enumerate() {
                            let mut target = inc.row_mut(s);
                            target += &g.row(row);
                        }
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::BroadcastRow(a) => {
                    if self.needs(*a) {
                        let inc = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let split = self.values[a.0].ncols();
                    if self.needs(*a) {
                        add_grad(&mut grads[a.0], g.slice(ndarray::s![.., ..split]).to_owned());
                    }
                    if self.needs(*b) {
                        add_grad(&mut grads[b.0], g.slice(ndarray::s![.., split..]).to_owned());
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let rows = self.values[p.0].nrows();
                        if self.needs(*p) {
                            add_grad(&mut grads[p.0], g.slice(ndarray::s![at..at + rows, ..]).to_owned());
                        }
                        at += rows;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    if self.needs(*a) {
                        let mut inc = Array2::<f64>::zeros(self.values[a.0].dim());
                        inc.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                        add_grad(&mut grads[a.0], inc);
                    }
                }
                Op::L2NormalizeRows(a) => {
                    if self.needs(*a) {
                        let x = &self.values[a.0];
                        let y = &self.values[idx];
                        let mut inc = Array2::<f64>::zeros(x.dim());
                        for r in 0..x.nrows() {
                            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                            let dot: f64 = (0..x.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                            for c in 0..x.ncols() {
                                inc[[r, c]] = (g[[r, c]] - y[[r, c]] * dot) / n;
                            }
                        }
                        add_grad(&mut grads[a.0], inc);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node (zero if the node was
    /// never touched by the loss).
    pub fn get(&self, v: Var, tape: &Tape) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(v).dim()),
        }
    }
}
