//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records eagerly-executed ops against an immutable
//! [`ParamStore`]; [`Tape::backward`] walks the record in reverse and
//! returns gradients aligned with the store. Parameter values are read
//! from the store on demand and never copied into the tape, so one step
//! costs memory proportional to the activations only.

use crate::error::{Error, Result};
use crate::math::mat::Mat;
use crate::scalar::Scalar;

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors. Order is creation order and is the
/// contract for optimizer state and checkpoints.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    entries: Vec<(String, Mat<S>)>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> ParamStore<S> {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn value(&self, id: ParamId) -> &Mat<S> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<S> {
        &mut self.entries[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<S>)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}

/// Value source: either a computed tape node or a store parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Node(usize),
    Param(ParamId),
}

impl From<ParamId> for Source {
    fn from(id: ParamId) -> Source {
        Source::Param(id)
    }
}

/// One query row of a contrastive score matrix: the column holding the
/// positive score and the columns holding that query's negatives.
#[derive(Debug, Clone)]
pub struct RowTarget {
    pub row: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Source,
        b: Source,
    },
    MatMulNT {
        a: Source,
        b: Source,
    },
    Add {
        a: Source,
        b: Source,
    },
    AddRow {
        a: Source,
        row: Source,
    },
    Mul {
        a: Source,
        b: Source,
    },
    Scale {
        a: Source,
        factor: S,
    },
    Gelu {
        a: Source,
    },
    SoftmaxRows {
        a: Source,
    },
    LogSoftmaxRows {
        a: Source,
    },
    LayerNorm {
        a: Source,
        gamma: Source,
        beta: Source,
        x_hat: Mat<S>,
        inv_std: Vec<S>,
    },
    Cols {
        a: Source,
        start: usize,
    },
    Row {
        a: Source,
        index: usize,
    },
    ConcatCols {
        parts: Vec<Source>,
    },
    ConcatRows {
        parts: Vec<Source>,
    },
    GatherRows {
        table: Source,
        indices: Vec<usize>,
    },
    SumAll {
        a: Source,
    },
    SumScalars {
        parts: Vec<Source>,
    },
    NllAt {
        log_probs: Source,
        positions: Vec<usize>,
        labels: Vec<usize>,
    },
    ContrastiveNll {
        scores: Source,
        targets: Vec<RowTarget>,
    },
}

struct Node<S> {
    op: Op<S>,
    value: Mat<S>,
}

/// Gradients aligned with a [`ParamStore`]; `None` where a parameter did
/// not participate in the loss.
#[derive(Debug)]
pub struct ParamGrads<S> {
    pub grads: Vec<Option<Mat<S>>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn get(&self, id: ParamId) -> Option<&Mat<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// L2 norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        let factor = S::of_f64(factor);
        for grad in self.grads.iter_mut().flatten() {
            grad.scale_assign(factor);
        }
    }
}

/// Eagerly-evaluated computation record.
pub struct Tape<'s, S: Scalar> {
    store: &'s ParamStore<S>,
    nodes: Vec<Node<S>>,
}

fn accumulate<S: Scalar>(slot: &mut Option<Mat<S>>, delta: Mat<S>) {
    match slot {
        Some(grad) => grad.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

impl<'s, S: Scalar> Tape<'s, S> {
    pub fn new(store: &'s ParamStore<S>) -> Tape<'s, S> {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, src: Source) -> &Mat<S> {
        match src {
            Source::Node(id) => &self.nodes[id].value,
            Source::Param(id) => self.store.value(id),
        }
    }

    fn push(&mut self, op: Op<S>, value: Mat<S>) -> Source {
        self.nodes.push(Node { op, value });
        Source::Node(self.nodes.len() - 1)
    }

    /// A constant leaf; gradients do not flow into it.
    pub fn input(&mut self, value: Mat<S>) -> Source {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Source, b: Source) -> Source {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul { a, b }, value)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Source, b: Source) -> Source {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT { a, b }, value)
    }

    pub fn add(&mut self, a: Source, b: Source) -> Source {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows());
        assert_eq!(va.cols(), vb.cols());
        let mut value = va.clone();
        value.add_assign(vb);
        self.push(Op::Add { a, b }, value)
    }

    /// Broadcast-add a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Source, row: Source) -> Source {
        let (va, vrow) = (self.value(a), self.value(row));
        assert_eq!(vrow.rows(), 1);
        assert_eq!(va.cols(), vrow.cols());
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (v, &b) in value.row_mut(r).iter_mut().zip(vrow.row(0)) {
                *v += b;
            }
        }
        self.push(Op::AddRow { a, row }, value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Source, b: Source) -> Source {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows());
        assert_eq!(va.cols(), vb.cols());
        let value = Mat::from_vec(
            va.rows(),
            va.cols(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        self.push(Op::Mul { a, b }, value)
    }

    pub fn scale(&mut self, a: Source, factor: S) -> Source {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale { a, factor }, value)
    }

    pub fn gelu(&mut self, a: Source) -> Source {
        let value = self.value(a).map(gelu);
        self.push(Op::Gelu { a }, value)
    }

    pub fn softmax_rows(&mut self, a: Source) -> Source {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(Op::SoftmaxRows { a }, value)
    }

    pub fn log_softmax_rows(&mut self, a: Source) -> Source {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            log_softmax_in_place(value.row_mut(r));
        }
        self.push(Op::LogSoftmaxRows { a }, value)
    }

    /// Per-row layer normalization with learned scale and shift (both `1×n`).
    pub fn layer_norm(&mut self, a: Source, gamma: Source, beta: Source, eps: S) -> Source {
        let (va, vg, vb) = (self.value(a), self.value(gamma), self.value(beta));
        assert_eq!(vg.rows(), 1);
        assert_eq!(vb.rows(), 1);
        assert_eq!(va.cols(), vg.cols());
        assert_eq!(va.cols(), vb.cols());
        let n = S::of_f64(va.cols() as f64);
        let mut x_hat = Mat::zeros(va.rows(), va.cols());
        let mut inv_std = Vec::with_capacity(va.rows());
        let mut value = Mat::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let istd = S::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for c in 0..va.cols() {
                let xh = (row[c] - mean) * istd;
                x_hat.set(r, c, xh);
                value.set(r, c, vg.get(0, c) * xh + vb.get(0, c));
            }
        }
        self.push(
            Op::LayerNorm {
                a,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            value,
        )
    }

    /// Column slice `[start, end)`.
    pub fn cols(&mut self, a: Source, start: usize, end: usize) -> Source {
        let va = self.value(a);
        assert!(start < end && end <= va.cols());
        let value = Mat::from_fn(va.rows(), end - start, |r, c| va.get(r, start + c));
        self.push(Op::Cols { a, start }, value)
    }

    /// Single row as a `1×n` matrix.
    pub fn row(&mut self, a: Source, index: usize) -> Source {
        let va = self.value(a);
        assert!(index < va.rows());
        let value = Mat::from_vec(1, va.cols(), va.row(index).to_vec());
        self.push(Op::Row { a, index }, value)
    }

    pub fn concat_cols(&mut self, parts: &[Source]) -> Source {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, total);
        let mut offset = 0;
        for &part in parts {
            let vp = self.value(part);
            assert_eq!(vp.rows(), rows);
            for r in 0..rows {
                for c in 0..vp.cols() {
                    value.set(r, offset + c, vp.get(r, c));
                }
            }
            offset += vp.cols();
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            value,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Source]) -> Source {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut value = Mat::zeros(total, cols);
        let mut offset = 0;
        for &part in parts {
            let vp = self.value(part);
            assert_eq!(vp.cols(), cols);
            for r in 0..vp.rows() {
                for c in 0..cols {
                    value.set(offset + r, c, vp.get(r, c));
                }
            }
            offset += vp.rows();
        }
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            value,
        )
    }

    /// Select rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Source, indices: &[usize]) -> Source {
        let vt = self.value(table);
        let mut value = Mat::zeros(indices.len(), vt.cols());
        for (r, &idx) in indices.iter().enumerate() {
            assert!(idx < vt.rows(), "gather index out of range");
            value.row_mut(r).copy_from_slice(vt.row(idx));
        }
        self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            value,
        )
    }

    /// Sum of all entries, as a `1×1` value.
    pub fn sum_all(&mut self, a: Source) -> Source {
        let total = self.value(a).data().iter().copied().sum::<S>();
        self.push(Op::SumAll { a }, Mat::from_vec(1, 1, vec![total]))
    }

    /// Sum of `1×1` scalars.
    pub fn sum_scalars(&mut self, parts: &[Source]) -> Source {
        let mut total = S::zero();
        for &part in parts {
            let vp = self.value(part);
            assert_eq!((vp.rows(), vp.cols()), (1, 1));
            total += vp.get(0, 0);
        }
        self.push(
            Op::SumScalars {
                parts: parts.to_vec(),
            },
            Mat::from_vec(1, 1, vec![total]),
        )
    }

    /// Negative log-likelihood summed over `(position, label)` pairs of a
    /// log-probability matrix: `Σ −log_probs[pos][label]`.
    pub fn nll_at(&mut self, log_probs: Source, positions: &[usize], labels: &[usize]) -> Source {
        assert_eq!(positions.len(), labels.len());
        let lp = self.value(log_probs);
        let mut total = S::zero();
        for (&pos, &label) in positions.iter().zip(labels) {
            total -= lp.get(pos, label);
        }
        self.push(
            Op::NllAt {
                log_probs,
                positions: positions.to_vec(),
                labels: labels.to_vec(),
            },
            Mat::from_vec(1, 1, vec![total]),
        )
    }

    /// Mean over targets of the softmax cross-entropy restricted to each
    /// row's allowed columns: `−log e^{s_pos} / (e^{s_pos} + Σ_j e^{s_negs_j})`.
    pub fn contrastive_nll(&mut self, scores: Source, targets: &[RowTarget]) -> Source {
        assert!(!targets.is_empty());
        let vs = self.value(scores);
        let mut total = 0.0;
        for target in targets {
            total += row_nll(vs, target);
        }
        let mean = S::of_f64(total / targets.len() as f64);
        self.push(
            Op::ContrastiveNll {
                scores,
                targets: targets.to_vec(),
            },
            Mat::from_vec(1, 1, vec![mean]),
        )
    }

    /// Propagate gradients from a `1×1` loss node back to the parameters.
    pub fn backward(&self, loss: Source) -> Result<ParamGrads<S>> {
        let loss_id = match loss {
            Source::Node(id) => id,
            Source::Param(_) => {
                return Err(Error::InvalidArgument(
                    "loss must be a computed node".to_string(),
                ))
            }
        };
        let loss_value = &self.nodes[loss_id].value;
        if (loss_value.rows(), loss_value.cols()) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "loss must be 1x1, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }

        let mut node_grads: Vec<Option<Mat<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Mat<S>>> = (0..self.store.len()).map(|_| None).collect();
        node_grads[loss_id] = Some(Mat::from_vec(1, 1, vec![S::one()]));

        for id in (0..=loss_id).rev() {
            let Some(grad) = node_grads[id].take() else {
                continue;
            };
            let add_to = |src: Source,
                          delta: Mat<S>,
                          node_grads: &mut Vec<Option<Mat<S>>>,
                          param_grads: &mut Vec<Option<Mat<S>>>| {
                match src {
                    Source::Node(nid) => accumulate(&mut node_grads[nid], delta),
                    Source::Param(pid) => accumulate(&mut param_grads[pid.0], delta),
                }
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let da = grad.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&grad);
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                    add_to(*b, db, &mut node_grads, &mut param_grads);
                }
                Op::MatMulNT { a, b } => {
                    let da = grad.matmul(self.value(*b));
                    let db = grad.matmul_tn(self.value(*a));
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                    add_to(*b, db, &mut node_grads, &mut param_grads);
                }
                Op::Add { a, b } => {
                    add_to(*a, grad.clone(), &mut node_grads, &mut param_grads);
                    add_to(*b, grad, &mut node_grads, &mut param_grads);
                }
                Op::AddRow { a, row } => {
                    let mut drow = Mat::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (d, &g) in drow.row_mut(0).iter_mut().zip(grad.row(r)) {
                            *d += g;
                        }
                    }
                    add_to(*a, grad, &mut node_grads, &mut param_grads);
                    add_to(*row, drow, &mut node_grads, &mut param_grads);
                }
                Op::Mul { a, b } => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let da = Mat::from_vec(
                        grad.rows(),
                        grad.cols(),
                        grad.data()
                            .iter()
                            .zip(vb.data())
                            .map(|(&g, &y)| g * y)
                            .collect(),
                    );
                    let db = Mat::from_vec(
                        grad.rows(),
                        grad.cols(),
                        grad.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&g, &x)| g * x)
                            .collect(),
                    );
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                    add_to(*b, db, &mut node_grads, &mut param_grads);
                }
                Op::Scale { a, factor } => {
                    let factor = *factor;
                    add_to(
                        *a,
                        grad.map(|g| g * factor),
                        &mut node_grads,
                        &mut param_grads,
                    );
                }
                Op::Gelu { a } => {
                    let va = self.value(*a);
                    let da = Mat::from_vec(
                        grad.rows(),
                        grad.cols(),
                        grad.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&g, &x)| g * gelu_derivative(x))
                            .collect(),
                    );
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                }
                Op::SoftmaxRows { a } => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(grad.rows(), grad.cols());
                    for r in 0..grad.rows() {
                        let dot = grad
                            .row(r)
                            .iter()
                            .zip(y.row(r))
                            .map(|(&g, &yv)| g * yv)
                            .sum::<S>();
                        for c in 0..grad.cols() {
                            da.set(r, c, y.get(r, c) * (grad.get(r, c) - dot));
                        }
                    }
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                }
                Op::LogSoftmaxRows { a } => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(grad.rows(), grad.cols());
                    for r in 0..grad.rows() {
                        let total = grad.row(r).iter().copied().sum::<S>();
                        for c in 0..grad.cols() {
                            da.set(r, c, grad.get(r, c) - y.get(r, c).exp() * total);
                        }
                    }
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                } => {
                    let vg = self.value(*gamma);
                    let n = S::of_f64(grad.cols() as f64);
                    let mut da = Mat::zeros(grad.rows(), grad.cols());
                    let mut dgamma = Mat::zeros(1, grad.cols());
                    let mut dbeta = Mat::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for c in 0..grad.cols() {
                            let g = grad.get(r, c);
                            let xh = x_hat.get(r, c);
                            dbeta.set(0, c, dbeta.get(0, c) + g);
                            dgamma.set(0, c, dgamma.get(0, c) + g * xh);
                            let dxh = g * vg.get(0, c);
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh;
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        for c in 0..grad.cols() {
                            let dxh = grad.get(r, c) * vg.get(0, c);
                            let xh = x_hat.get(r, c);
                            da.set(r, c, inv_std[r] * (dxh - mean_dxhat - xh * mean_dxhat_xhat));
                        }
                    }
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                    add_to(*gamma, dgamma, &mut node_grads, &mut param_grads);
                    add_to(*beta, dbeta, &mut node_grads, &mut param_grads);
                }
                Op::Cols { a, start } => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            da.set(r, start + c, grad.get(r, c));
                        }
                    }
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                }
                Op::Row { a, index } => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    da.row_mut(*index).copy_from_slice(grad.row(0));
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &part in parts {
                        let width = self.value(part).cols();
                        let dp = Mat::from_fn(grad.rows(), width, |r, c| grad.get(r, offset + c));
                        add_to(part, dp, &mut node_grads, &mut param_grads);
                        offset += width;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &part in parts {
                        let height = self.value(part).rows();
                        let dp = Mat::from_fn(height, grad.cols(), |r, c| grad.get(offset + r, c));
                        add_to(part, dp, &mut node_grads, &mut param_grads);
                        offset += height;
                    }
                }
                Op::GatherRows { table, indices } => {
                    let vt = self.value(*table);
                    let mut dt = Mat::zeros(vt.rows(), vt.cols());
                    for (r, &idx) in indices.iter().enumerate() {
                        for (d, &g) in dt.row_mut(idx).iter_mut().zip(grad.row(r)) {
                            *d += g;
                        }
                    }
                    add_to(*table, dt, &mut node_grads, &mut param_grads);
                }
                Op::SumAll { a } => {
                    let g = grad.get(0, 0);
                    let va = self.value(*a);
                    let da = Mat::from_vec(va.rows(), va.cols(), vec![g; va.rows() * va.cols()]);
                    add_to(*a, da, &mut node_grads, &mut param_grads);
                }
                Op::SumScalars { parts } => {
                    for &part in parts {
                        add_to(part, grad.clone(), &mut node_grads, &mut param_grads);
                    }
                }
                Op::NllAt {
                    log_probs,
                    positions,
                    labels,
                } => {
                    let g = grad.get(0, 0);
                    let lp = self.value(*log_probs);
                    let mut dlp = Mat::zeros(lp.rows(), lp.cols());
                    for (&pos, &label) in positions.iter().zip(labels) {
                        dlp.set(pos, label, dlp.get(pos, label) - g);
                    }
                    add_to(*log_probs, dlp, &mut node_grads, &mut param_grads);
                }
                Op::ContrastiveNll { scores, targets } => {
                    let g = grad.get(0, 0).as_f64() / targets.len() as f64;
                    let vs = self.value(*scores);
                    let mut ds = Mat::zeros(vs.rows(), vs.cols());
                    for target in targets {
                        let mut columns = Vec::with_capacity(target.negatives.len() + 1);
                        columns.push(target.positive);
                        columns.extend_from_slice(&target.negatives);
                        let max = columns
                            .iter()
                            .map(|&c| vs.get(target.row, c).as_f64())
                            .fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = columns
                            .iter()
                            .map(|&c| (vs.get(target.row, c).as_f64() - max).exp())
                            .sum();
                        for &c in &columns {
                            let p = (vs.get(target.row, c).as_f64() - max).exp() / denom;
                            let indicator = if c == target.positive { 1.0 } else { 0.0 };
                            let delta = S::of_f64(g * (p - indicator));
                            ds.set(target.row, c, ds.get(target.row, c) + delta);
                        }
                    }
                    add_to(*scores, ds, &mut node_grads, &mut param_grads);
                }
            }
        }
        Ok(ParamGrads { grads: param_grads })
    }
}

const GELU_COEF: f64 = 0.044715;

fn sqrt_2_over_pi<S: Scalar>() -> S {
    S::of_f64((2.0 / std::f64::consts::PI).sqrt())
}

/// GELU with the tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of_f64(0.5);
    let coef = S::of_f64(GELU_COEF);
    let inner = sqrt_2_over_pi::<S>() * (x + coef * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let half = S::of_f64(0.5);
    let coef = S::of_f64(GELU_COEF);
    let three = S::of_f64(3.0);
    let u = sqrt_2_over_pi::<S>() * (x + coef * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t)
        + half * x * sech2 * sqrt_2_over_pi::<S>() * (S::one() + three * coef * x * x)
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut denom = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

fn log_softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

fn row_nll<S: Scalar>(scores: &Mat<S>, target: &RowTarget) -> f64 {
    let pos = scores.get(target.row, target.positive).as_f64();
    let mut max = pos;
    for &c in &target.negatives {
        max = max.max(scores.get(target.row, c).as_f64());
    }
    let mut denom = (pos - max).exp();
    for &c in &target.negatives {
        denom += (scores.get(target.row, c).as_f64() - max).exp();
    }
    -(pos - max - denom.ln())
}
