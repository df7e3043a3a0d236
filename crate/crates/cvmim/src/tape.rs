//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! The tape is rebuilt per training step (define-by-run); insertion order is
//! the topological order, and `backward` walks it in reverse exactly once.
//! All values are dense `Array2D` in double precision. Checked mode (default)
//! rejects shape mismatches, non-finite values, and domain violations at the
//! offending op.

use crate::array::Array2D;
use crate::error::{CvmimError, Result};
use crate::rng::Rng;

pub type NodeId = usize;

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { trans_b: bool },
    Add { broadcast: bool },
    Sub,
    Mul,
    ScalarMul(f64),
    Neg,
    Sigmoid,
    Softplus,
    Relu,
    Elu,
    Log,
    Exp,
    Square,
    Clamp { lo: f64, hi: f64 },
    MeanAll,
    SumAll,
    MeanPerColumn,
    ConcatCols,
    SliceCols { start: usize },
    BatchNorm { training: bool },
    Dropout { rate: f64 },
    BceFromLogit,
    GaussianNll,
    SoftmaxXent,
}

struct Node {
    value: Array2D,
    grad: Array2D,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
    /// True when this node or any ancestor requires gradients.
    needs_grad: bool,
    /// Op-specific context recorded in forward (dropout mask, batch-norm
    /// normalized values and inverse std, softmax probabilities).
    saved: Vec<Array2D>,
}

/// Running statistics for one batch-norm layer. Updated in training-mode
/// forward with momentum 0.9, read in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl BnState {
    pub fn new(cols: usize) -> Self {
        BnState {
            mean: vec![0.0; cols],
            var: vec![1.0; cols],
            momentum: 0.9,
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

pub struct Tape {
    nodes: Vec<Node>,
    rng: Rng,
    checked: bool,
    consumed: bool,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: Rng::from_seed(seed),
            checked: true,
            consumed: false,
        }
    }

    pub fn with_rng(rng: Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            rng,
            checked: true,
            consumed: false,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2D {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> &Array2D {
        &self.nodes[id].grad
    }

    /// True for leaves registered as trainable parameters.
    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(
        &mut self,
        value: Array2D,
        op: Op,
        parents: Vec<NodeId>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if self.checked && !value.all_finite() {
            return Err(CvmimError::NonFinite {
                context: format!("output of {:?}", op),
            });
        }
        let needs_grad = requires_grad || parents.iter().any(|&p| self.nodes[p].needs_grad);
        let grad = Array2D::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            op,
            parents,
            requires_grad,
            needs_grad,
            saved: Vec::new(),
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2D, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, vec![], requires_grad)
    }

    pub fn constant(&mut self, value: Array2D) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Array2D::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value, false)?;
        self.push(v, Op::MatMul { trans_b: false }, vec![a, b], false)
    }

    /// A · Bᵀ — used for all-pairs critic score matrices.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value, true)?;
        self.push(v, Op::MatMul { trans_b: true }, vec![a, b], false)
    }

    /// Elementwise add; also accepts a 1×C second operand broadcast over rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() == vb.shape() {
            let mut out = va.clone();
            out.add_assign(vb);
            self.push(out, Op::Add { broadcast: false }, vec![a, b], false)
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut out = va.clone();
            let bias = vb.data();
            for r in 0..out.rows() {
                let row =
                    &mut out.data_mut()[r * bias.len()..(r + 1) * bias.len()];
                for (o, &b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
            self.push(out, Op::Add { broadcast: true }, vec![a, b], false)
        } else {
            Err(CvmimError::ShapeMismatch {
                op: "add",
                lhs: va.shape_str(),
                rhs: vb.shape_str(),
            })
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(CvmimError::ShapeMismatch {
                op: "sub",
                lhs: va.shape_str(),
                rhs: vb.shape_str(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Array2D::from_vec(va.rows(), va.cols(), data)?;
        self.push(out, Op::Sub, vec![a, b], false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(CvmimError::ShapeMismatch {
                op: "mul",
                lhs: va.shape_str(),
                rhs: vb.shape_str(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Array2D::from_vec(va.rows(), va.cols(), data)?;
        self.push(out, Op::Mul, vec![a, b], false)
    }

    pub fn scalar_mul(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let out = self.nodes[a].value.map(|v| v * k);
        self.push(out, Op::ScalarMul(k), vec![a], false)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a].value.map(|v| -v);
        self.push(out, Op::Neg, vec![a], false)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a].value.map(stable_sigmoid);
        self.push(out, Op::Sigmoid, vec![a], false)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a].value.map(stable_softplus);
        self.push(out, Op::Softplus, vec![a], false)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a].value.map(|v| v.max(0.0));
        self.push(out, Op::Relu, vec![a], false)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a].value.map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(out, Op::Elu, vec![a], false)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.checked {
            if let Some(v) = self.nodes[a].value.data().iter().find(|&&v| v <= 0.0) {
                return Err(CvmimError::Domain {
                    op: "log",
                    detail: format!("non-positive input {v}"),
                });
            }
        }
        let out = self.nodes[a].value.map(f64::ln);
        self.push(out, Op::Log, vec![a], false)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a].value.map(f64::exp);
        self.push(out, Op::Exp, vec![a], false)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a].value.map(|v| v * v);
        self.push(out, Op::Square, vec![a], false)
    }

    /// Elementwise clamp; gradient passes through strictly inside [lo, hi].
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo >= hi {
            return Err(CvmimError::InvalidArgument(format!(
                "clamp bounds lo={lo} >= hi={hi}"
            )));
        }
        let out = self.nodes[a].value.map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { lo, hi }, vec![a], false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if v.is_empty() {
            return Err(CvmimError::InvalidArgument("mean_all of empty array".into()));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Array2D::scalar(m), Op::MeanAll, vec![a], false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].value.data().iter().sum::<f64>();
        self.push(Array2D::scalar(s), Op::SumAll, vec![a], false)
    }

    pub fn mean_per_column(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if v.rows() == 0 {
            return Err(CvmimError::InvalidArgument(
                "mean_per_column of empty array".into(),
            ));
        }
        let mut out = Array2D::zeros(1, v.cols());
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                out.data_mut()[c] += v.get(r, c);
            }
        }
        let n = v.rows() as f64;
        out.data_mut().iter_mut().for_each(|x| *x /= n);
        self.push(out, Op::MeanPerColumn, vec![a], false)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.rows() != vb.rows() {
            return Err(CvmimError::ShapeMismatch {
                op: "concat_cols",
                lhs: va.shape_str(),
                rhs: vb.shape_str(),
            });
        }
        let cols = va.cols() + vb.cols();
        let mut out = Array2D::zeros(va.rows(), cols);
        for r in 0..va.rows() {
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            dst[..va.cols()].copy_from_slice(va.row(r));
            dst[va.cols()..].copy_from_slice(vb.row(r));
        }
        self.push(out, Op::ConcatCols, vec![a, b], false)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if start + len > v.cols() {
            return Err(CvmimError::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of {} columns",
                start + len,
                v.cols()
            )));
        }
        let mut out = Array2D::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { start }, vec![a], false)
    }

    /// Per-column batch normalization with affine scale/shift.
    ///
    /// Training mode normalizes by batch statistics (biased variance) and
    /// folds them into `state` with its momentum; inference mode is a
    /// deterministic affine map using `state`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        training: bool,
        state: &mut BnState,
    ) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let cols = v.cols();
        let rows = v.rows();
        let (g, b) = (&self.nodes[gamma].value, &self.nodes[beta].value);
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(CvmimError::ShapeMismatch {
                op: "batch_norm",
                lhs: v.shape_str(),
                rhs: format!("gamma {} beta {}", g.shape_str(), b.shape_str()),
            });
        }
        if state.mean.len() != cols {
            return Err(CvmimError::ShapeMismatch {
                op: "batch_norm",
                lhs: format!("{cols} columns"),
                rhs: format!("state of {} columns", state.mean.len()),
            });
        }
        if training && rows < 2 {
            return Err(CvmimError::InvalidArgument(
                "batch_norm training mode needs batch size >= 2".into(),
            ));
        }
        let (mean, var) = if training {
            let mut mean = vec![0.0; cols];
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for (c, &xv) in v.row(r).iter().enumerate() {
                    mean[c] += xv;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            for r in 0..rows {
                for (c, &xv) in v.row(r).iter().enumerate() {
                    let d = xv - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let m = state.momentum;
            for c in 0..cols {
                state.mean[c] = m * state.mean[c] + (1.0 - m) * mean[c];
                state.var[c] = m * state.var[c] + (1.0 - m) * var[c];
            }
            (mean, var)
        } else {
            (state.mean.clone(), state.var.clone())
        };
        let invstd: Vec<f64> = var.iter().map(|&s| 1.0 / (s + BN_EPS).sqrt()).collect();
        let mut xhat = Array2D::zeros(rows, cols);
        let mut out = Array2D::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let h = (v.get(r, c) - mean[c]) * invstd[c];
                xhat.set(r, c, h);
                out.set(r, c, g.data()[c] * h + b.data()[c]);
            }
        }
        let invstd_arr = Array2D::from_vec(1, cols, invstd)?;
        let id = self.push(out, Op::BatchNorm { training }, vec![x, gamma, beta], false)?;
        self.nodes[id].saved = vec![xhat, invstd_arr];
        Ok(id)
    }

    /// Inverted dropout; the mask is drawn from the tape RNG and recorded,
    /// so backward reuses the exact forward mask.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CvmimError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let v = &self.nodes[x].value;
        let (rows, cols) = v.shape();
        let keep = 1.0 - rate;
        let mut mask = Array2D::zeros(rows, cols);
        for m in mask.data_mut() {
            *m = if self.rng.next_f64() < keep { 1.0 } else { 0.0 };
        }
        let v = &self.nodes[x].value;
        let data = v
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| x * m / keep)
            .collect();
        let out = Array2D::from_vec(rows, cols, data)?;
        let id = self.push(out, Op::Dropout { rate }, vec![x], false)?;
        self.nodes[id].saved = vec![mask];
        Ok(id)
    }

    /// Mean binary cross-entropy computed directly from logits.
    pub fn bce_from_logit(&mut self, logit: NodeId, target: NodeId) -> Result<NodeId> {
        let (l, t) = (&self.nodes[logit].value, &self.nodes[target].value);
        if l.shape() != t.shape() {
            return Err(CvmimError::ShapeMismatch {
                op: "bce_from_logit",
                lhs: l.shape_str(),
                rhs: t.shape_str(),
            });
        }
        if l.is_empty() {
            return Err(CvmimError::InvalidArgument("bce on empty batch".into()));
        }
        let n = l.len() as f64;
        let loss = l
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &y)| stable_softplus(x) - y * x)
            .sum::<f64>()
            / n;
        self.push(
            Array2D::scalar(loss),
            Op::BceFromLogit,
            vec![logit, target],
            false,
        )
    }

    /// Mean diagonal-Gaussian negative log-likelihood over the batch:
    /// (1/B) Σ_i Σ_k [ ½ln(2π) + ½logσ²_ik + (t_ik − μ_ik)² / (2σ²_ik) ].
    pub fn gaussian_nll(
        &mut self,
        mu: NodeId,
        logvar: NodeId,
        target: NodeId,
    ) -> Result<NodeId> {
        let (m, lv, t) = (
            &self.nodes[mu].value,
            &self.nodes[logvar].value,
            &self.nodes[target].value,
        );
        if m.shape() != lv.shape() || m.shape() != t.shape() {
            return Err(CvmimError::ShapeMismatch {
                op: "gaussian_nll",
                lhs: m.shape_str(),
                rhs: format!("logvar {} target {}", lv.shape_str(), t.shape_str()),
            });
        }
        if m.rows() == 0 {
            return Err(CvmimError::InvalidArgument("gaussian_nll on empty batch".into()));
        }
        let b = m.rows() as f64;
        let mut total = 0.0;
        for i in 0..m.len() {
            let (mu_v, lv_v, t_v) = (m.data()[i], lv.data()[i], t.data()[i]);
            let resid = t_v - mu_v;
            total += 0.5 * LN_2PI + 0.5 * lv_v + resid * resid * 0.5 * (-lv_v).exp();
        }
        self.push(
            Array2D::scalar(total / b),
            Op::GaussianNll,
            vec![mu, logvar, target],
            false,
        )
    }

    /// Mean softmax cross-entropy from logits against one-hot targets.
    pub fn softmax_xent(&mut self, logits: NodeId, onehot: NodeId) -> Result<NodeId> {
        let (l, t) = (&self.nodes[logits].value, &self.nodes[onehot].value);
        if l.shape() != t.shape() {
            return Err(CvmimError::ShapeMismatch {
                op: "softmax_xent",
                lhs: l.shape_str(),
                rhs: t.shape_str(),
            });
        }
        if l.rows() == 0 {
            return Err(CvmimError::InvalidArgument("softmax_xent on empty batch".into()));
        }
        let (rows, cols) = l.shape();
        let mut probs = Array2D::zeros(rows, cols);
        let mut loss = 0.0;
        for r in 0..rows {
            let row = l.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - max).exp();
            }
            let lse = max + z.ln();
            for (c, &x) in row.iter().enumerate() {
                probs.set(r, c, (x - max).exp() / z);
                loss += t.get(r, c) * (lse - x);
            }
        }
        let id = self.push(
            Array2D::scalar(loss / rows as f64),
            Op::SoftmaxXent,
            vec![logits, onehot],
            false,
        )?;
        self.nodes[id].saved = vec![probs];
        Ok(id)
    }

    /// Reverse sweep. Fills `grad` of every node that (transitively) requires
    /// gradients with ∂loss/∂value; gradients accumulate across fan-out.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(CvmimError::Tape(
                "backward on a tape already consumed".into(),
            ));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(CvmimError::Tape(format!(
                "loss must be scalar, got {}",
                self.nodes[loss].value.shape_str()
            )));
        }
        self.consumed = true;
        self.nodes[loss].grad = Array2D::scalar(1.0);
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].parents.is_empty() {
                continue;
            }
            if self.nodes[id].grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            self.propagate(id)?;
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId) -> Result<()> {
        let parents = self.nodes[id].parents.clone();
        let op = self.nodes[id].op.clone();
        let grad = self.nodes[id].grad.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { trans_b } => {
                let (a, b) = (parents[0], parents[1]);
                if self.nodes[a].needs_grad {
                    // C = A·B: dA = dC·Bᵀ; C = A·Bᵀ: dA = dC·B
                    let da = grad.matmul(&self.nodes[b].value, !trans_b)?;
                    self.nodes[a].grad.add_assign(&da);
                }
                if self.nodes[b].needs_grad {
                    // C = A·B: dB = Aᵀ·dC; C = A·Bᵀ: dB = dCᵀ·A
                    let db = if trans_b {
                        grad.matmul_tn(&self.nodes[a].value)?
                    } else {
                        self.nodes[a].value.matmul_tn(&grad)?
                    };
                    self.nodes[b].grad.add_assign(&db);
                }
            }
            Op::Add { broadcast } => {
                let (a, b) = (parents[0], parents[1]);
                if self.nodes[a].needs_grad {
                    self.nodes[a].grad.add_assign(&grad);
                }
                if self.nodes[b].needs_grad {
                    if broadcast {
                        let cols = grad.cols();
                        let mut db = Array2D::zeros(1, cols);
                        for r in 0..grad.rows() {
                            for (c, &g) in grad.row(r).iter().enumerate() {
                                db.data_mut()[c] += g;
                            }
                        }
                        self.nodes[b].grad.add_assign(&db);
                    } else {
                        self.nodes[b].grad.add_assign(&grad);
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (parents[0], parents[1]);
                if self.nodes[a].needs_grad {
                    self.nodes[a].grad.add_assign(&grad);
                }
                if self.nodes[b].needs_grad {
                    let neg = grad.map(|g| -g);
                    self.nodes[b].grad.add_assign(&neg);
                }
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                if self.nodes[a].needs_grad {
                    let da = elementwise(&grad, &self.nodes[b].value, |g, v| g * v);
                    self.nodes[a].grad.add_assign(&da);
                }
                if self.nodes[b].needs_grad {
                    let db = elementwise(&grad, &self.nodes[a].value, |g, v| g * v);
                    self.nodes[b].grad.add_assign(&db);
                }
            }
            Op::ScalarMul(k) => {
                let da = grad.map(|g| g * k);
                self.accum(parents[0], &da);
            }
            Op::Neg => {
                let da = grad.map(|g| -g);
                self.accum(parents[0], &da);
            }
            Op::Sigmoid => {
                let y = self.nodes[id].value.clone();
                let da = elementwise(&grad, &y, |g, s| g * s * (1.0 - s));
                self.accum(parents[0], &da);
            }
            Op::Softplus => {
                let x = self.nodes[parents[0]].value.clone();
                let da = elementwise(&grad, &x, |g, v| g * stable_sigmoid(v));
                self.accum(parents[0], &da);
            }
            Op::Relu => {
                let x = self.nodes[parents[0]].value.clone();
                let da = elementwise(&grad, &x, |g, v| if v > 0.0 { g } else { 0.0 });
                self.accum(parents[0], &da);
            }
            Op::Elu => {
                let x = self.nodes[parents[0]].value.clone();
                let da = elementwise(&grad, &x, |g, v| if v > 0.0 { g } else { g * v.exp() });
                self.accum(parents[0], &da);
            }
            Op::Log => {
                let x = self.nodes[parents[0]].value.clone();
                let da = elementwise(&grad, &x, |g, v| g / v);
                self.accum(parents[0], &da);
            }
            Op::Exp => {
                let y = self.nodes[id].value.clone();
                let da = elementwise(&grad, &y, |g, e| g * e);
                self.accum(parents[0], &da);
            }
            Op::Square => {
                let x = self.nodes[parents[0]].value.clone();
                let da = elementwise(&grad, &x, |g, v| 2.0 * g * v);
                self.accum(parents[0], &da);
            }
            Op::Clamp { lo, hi } => {
                let x = self.nodes[parents[0]].value.clone();
                let da = elementwise(&grad, &x, |g, v| if v > lo && v < hi { g } else { 0.0 });
                self.accum(parents[0], &da);
            }
            Op::MeanAll => {
                let g = grad.scalar_value();
                let p = parents[0];
                let n = self.nodes[p].value.len() as f64;
                let da = self.nodes[p].value.map(|_| g / n);
                self.accum(p, &da);
            }
            Op::SumAll => {
                let g = grad.scalar_value();
                let p = parents[0];
                let da = self.nodes[p].value.map(|_| g);
                self.accum(p, &da);
            }
            Op::MeanPerColumn => {
                let p = parents[0];
                let rows = self.nodes[p].value.rows();
                let cols = self.nodes[p].value.cols();
                let mut da = Array2D::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        da.set(r, c, grad.data()[c] / rows as f64);
                    }
                }
                self.accum(p, &da);
            }
            Op::ConcatCols => {
                let (a, b) = (parents[0], parents[1]);
                let ca = self.nodes[a].value.cols();
                let cb = self.nodes[b].value.cols();
                let rows = grad.rows();
                let mut da = Array2D::zeros(rows, ca);
                let mut db = Array2D::zeros(rows, cb);
                for r in 0..rows {
                    let g = grad.row(r);
                    da.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&g[..ca]);
                    db.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&g[ca..]);
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::SliceCols { start } => {
                let p = parents[0];
                let (rows, cols) = self.nodes[p].value.shape();
                let len = grad.cols();
                let mut da = Array2D::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..len {
                        da.set(r, start + c, grad.get(r, c));
                    }
                }
                self.accum(p, &da);
            }
            Op::BatchNorm { training } => {
                let (x, gamma, beta) = (parents[0], parents[1], parents[2]);
                let xhat = self.nodes[id].saved[0].clone();
                let invstd = self.nodes[id].saved[1].clone();
                let g = self.nodes[gamma].value.clone();
                let (rows, cols) = grad.shape();
                if self.nodes[gamma].needs_grad {
                    let mut dg = Array2D::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += grad.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.nodes[gamma].grad.add_assign(&dg);
                }
                if self.nodes[beta].needs_grad {
                    let mut db = Array2D::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            db.data_mut()[c] += grad.get(r, c);
                        }
                    }
                    self.nodes[beta].grad.add_assign(&db);
                }
                if self.nodes[x].needs_grad {
                    let mut dx = Array2D::zeros(rows, cols);
                    if training {
                        // dxhat = dy * gamma; column sums couple the batch
                        for c in 0..cols {
                            let gc = g.data()[c];
                            let mut sum_dh = 0.0;
                            let mut sum_dh_xh = 0.0;
                            for r in 0..rows {
                                let dh = grad.get(r, c) * gc;
                                sum_dh += dh;
                                sum_dh_xh += dh * xhat.get(r, c);
                            }
                            let n = rows as f64;
                            for r in 0..rows {
                                let dh = grad.get(r, c) * gc;
                                let v = invstd.data()[c] / n
                                    * (n * dh - sum_dh - xhat.get(r, c) * sum_dh_xh);
                                dx.set(r, c, v);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                dx.set(r, c, grad.get(r, c) * g.data()[c] * invstd.data()[c]);
                            }
                        }
                    }
                    self.nodes[x].grad.add_assign(&dx);
                }
            }
            Op::Dropout { rate } => {
                let mask = self.nodes[id].saved[0].clone();
                let keep = 1.0 - rate;
                let da = elementwise(&grad, &mask, |g, m| g * m / keep);
                self.accum(parents[0], &da);
            }
            Op::BceFromLogit => {
                let g = grad.scalar_value();
                let (logit, target) = (parents[0], parents[1]);
                let n = self.nodes[logit].value.len() as f64;
                if self.nodes[logit].needs_grad {
                    let l = self.nodes[logit].value.clone();
                    let t = self.nodes[target].value.clone();
                    let dl = elementwise(&l, &t, |x, y| g * (stable_sigmoid(x) - y) / n);
                    self.nodes[logit].grad.add_assign(&dl);
                }
                if self.nodes[target].needs_grad {
                    let l = self.nodes[logit].value.clone();
                    let dt = l.map(|x| -g * x / n);
                    self.nodes[target].grad.add_assign(&dt);
                }
            }
            Op::GaussianNll => {
                let g = grad.scalar_value();
                let (mu, logvar, target) = (parents[0], parents[1], parents[2]);
                let b = self.nodes[mu].value.rows() as f64;
                let m = self.nodes[mu].value.clone();
                let lv = self.nodes[logvar].value.clone();
                let t = self.nodes[target].value.clone();
                let (rows, cols) = m.shape();
                let mut dmu = Array2D::zeros(rows, cols);
                let mut dlv = Array2D::zeros(rows, cols);
                let mut dt = Array2D::zeros(rows, cols);
                for i in 0..m.len() {
                    let resid = t.data()[i] - m.data()[i];
                    let inv_var = (-lv.data()[i]).exp();
                    dmu.data_mut()[i] = g * (-resid) * inv_var / b;
                    dlv.data_mut()[i] = g * 0.5 * (1.0 - resid * resid * inv_var) / b;
                    dt.data_mut()[i] = g * resid * inv_var / b;
                }
                self.accum(mu, &dmu);
                self.accum(logvar, &dlv);
                self.accum(target, &dt);
            }
            Op::SoftmaxXent => {
                let g = grad.scalar_value();
                let (logits, onehot) = (parents[0], parents[1]);
                let probs = self.nodes[id].saved[0].clone();
                let b = probs.rows() as f64;
                if self.nodes[logits].needs_grad {
                    let t = self.nodes[onehot].value.clone();
                    let dl = elementwise(&probs, &t, |p, y| g * (p - y) / b);
                    self.nodes[logits].grad.add_assign(&dl);
                }
                if self.nodes[onehot].needs_grad {
                    // d/d(onehot) of mean Σ t·(lse − l)
                    let l = self.nodes[logits].value.clone();
                    let (rows, cols) = l.shape();
                    let mut dt = Array2D::zeros(rows, cols);
                    for r in 0..rows {
                        let row = l.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                        let lse = max + z.ln();
                        for (c, &x) in row.iter().enumerate() {
                            dt.set(r, c, g * (lse - x) / b);
                        }
                    }
                    self.nodes[onehot].grad.add_assign(&dt);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: &Array2D) {
        if self.nodes[id].needs_grad {
            self.nodes[id].grad.add_assign(delta);
        }
    }
}

fn elementwise(a: &Array2D, b: &Array2D, f: impl Fn(f64, f64) -> f64) -> Array2D {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array2D::from_vec(a.rows(), a.cols(), data).expect("shapes already checked")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tape() -> Tape {
        Tape::new(0)
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut t = scalar_tape();
        let x = t.leaf(Array2D::scalar(0.0), true).unwrap();
        let y = t.softplus(x).unwrap();
        assert!((t.value(y).scalar_value() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = scalar_tape();
        let x = t.leaf(Array2D::scalar(0.0), true).unwrap();
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).scalar_value(), 0.5);
    }

    #[test]
    fn matmul_of_ones() {
        let mut t = scalar_tape();
        let a = t.constant(Array2D::full(2, 3, 1.0)).unwrap();
        let b = t.constant(Array2D::full(3, 2, 1.0)).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert!(t.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn backward_mean_square() {
        // loss = mean(square(w)), w = [3] → grad = 6
        let mut t = scalar_tape();
        let w = t.leaf(Array2D::scalar(3.0), true).unwrap();
        let sq = t.square(w).unwrap();
        let loss = t.mean_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).scalar_value(), 6.0);
    }

    #[test]
    fn backward_softplus_at_zero() {
        let mut t = scalar_tape();
        let w = t.leaf(Array2D::scalar(0.0), true).unwrap();
        let loss = t.softplus(w).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).scalar_value(), 0.5);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = scalar_tape();
        let w = t.leaf(Array2D::full(2, 2, 1.0), true).unwrap();
        let y = t.square(w).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn backward_rejects_consumed_tape() {
        let mut t = scalar_tape();
        let w = t.leaf(Array2D::scalar(1.0), true).unwrap();
        let loss = t.square(w).unwrap();
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        // loss = sum(w ⊗ w consumed twice) vs explicit duplication
        let mut t = scalar_tape();
        let w = t.leaf(Array2D::scalar(2.0), true).unwrap();
        let a = t.square(w).unwrap();
        let b = t.scalar_mul(w, 3.0).unwrap();
        let s = t.add(a, b).unwrap();
        let loss = t.sum_all(s).unwrap();
        t.backward(loss).unwrap();
        // d/dw (w² + 3w) = 2w + 3 = 7
        assert_eq!(t.grad(w).scalar_value(), 7.0);
    }

    #[test]
    fn add_broadcast_bias() {
        let mut t = scalar_tape();
        let x = t.leaf(Array2D::full(3, 2, 1.0), true).unwrap();
        let b = t.leaf(Array2D::from_vec(1, 2, vec![10.0, 20.0]).unwrap(), true).unwrap();
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y).get(2, 1), 21.0);
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        // bias gradient is the column sum over 3 rows
        assert_eq!(t.grad(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_rejected_with_shapes() {
        let mut t = scalar_tape();
        let a = t.constant(Array2D::zeros(2, 3)).unwrap();
        let b = t.constant(Array2D::zeros(2, 3)).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("2x3"));
    }

    #[test]
    fn log_of_nonpositive_rejected_in_checked_mode() {
        let mut t = scalar_tape();
        let a = t.constant(Array2D::scalar(-1.0)).unwrap();
        assert!(t.log(a).is_err());
    }

    #[test]
    fn batch_norm_training_standardizes() {
        let mut t = scalar_tape();
        let x = t
            .leaf(
                Array2D::from_vec(4, 2, vec![1., 10., 2., 20., 3., 30., 4., 40.]).unwrap(),
                true,
            )
            .unwrap();
        let gamma = t.constant(Array2D::full(1, 2, 1.0)).unwrap();
        let beta = t.constant(Array2D::zeros(1, 2)).unwrap();
        let mut state = BnState::new(2);
        let y = t.batch_norm(x, gamma, beta, true, &mut state).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|r| t.value(y).get(r, c)).sum::<f64>() / 4.0;
            let var: f64 =
                (0..4).map(|r| (t.value(y).get(r, c) - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-10, "column {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "column {c} var {var}");
        }
        // running stats moved toward batch stats
        assert!((state.mean[0] - 0.25).abs() < 1e-12); // 0.9*0 + 0.1*2.5
    }

    #[test]
    fn batch_norm_inference_is_affine_deterministic() {
        let mut state = BnState::new(2);
        state.mean = vec![1.0, 2.0];
        state.var = vec![4.0, 9.0];
        let run = |v: f64| {
            let mut t = scalar_tape();
            let x = t.constant(Array2D::from_vec(1, 2, vec![v, v]).unwrap()).unwrap();
            let gamma = t.constant(Array2D::full(1, 2, 2.0)).unwrap();
            let beta = t.constant(Array2D::full(1, 2, 0.5)).unwrap();
            let mut s = state.clone();
            let y = t.batch_norm(x, gamma, beta, false, &mut s).unwrap();
            (t.value(y).get(0, 0), t.value(y).get(0, 1))
        };
        let (a0, a1) = run(3.0);
        let expect0 = 2.0 * (3.0 - 1.0) / (4.0 + BN_EPS).sqrt() + 0.5;
        let expect1 = 2.0 * (3.0 - 2.0) / (9.0 + BN_EPS).sqrt() + 0.5;
        assert!((a0 - expect0).abs() < 1e-12);
        assert!((a1 - expect1).abs() < 1e-12);
        // deterministic
        assert_eq!(run(3.0), run(3.0));
    }

    #[test]
    fn batch_norm_training_rejects_batch_of_one() {
        let mut t = scalar_tape();
        let x = t.constant(Array2D::zeros(1, 2)).unwrap();
        let gamma = t.constant(Array2D::full(1, 2, 1.0)).unwrap();
        let beta = t.constant(Array2D::zeros(1, 2)).unwrap();
        let mut state = BnState::new(2);
        assert!(t.batch_norm(x, gamma, beta, true, &mut state).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let rate = 0.3;
        let mut total = 0.0;
        let n = 100_000usize;
        let mut t = Tape::new(9);
        let x = t.constant(Array2D::full(1, n, 1.0)).unwrap();
        let y = t.dropout(x, rate).unwrap();
        for &v in t.value(y).data() {
            total += v;
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "dropout mean {mean}");
    }

    #[test]
    fn dropout_deterministic_per_seed() {
        let run = || {
            let mut t = Tape::new(123);
            let x = t.constant(Array2D::full(4, 4, 1.0)).unwrap();
            let y = t.dropout(x, 0.5).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut t = scalar_tape();
        let a = t.leaf(Array2D::from_vec(2, 2, vec![1., 2., 3., 4.]).unwrap(), true).unwrap();
        let b = t.leaf(Array2D::from_vec(2, 3, vec![5., 6., 7., 8., 9., 10.]).unwrap(), true).unwrap();
        let c = t.concat_cols(a, b).unwrap();
        let a2 = t.slice_cols(c, 0, 2).unwrap();
        let b2 = t.slice_cols(c, 2, 3).unwrap();
        assert_eq!(t.value(a2), t.value(a));
        assert_eq!(t.value(b2), t.value(b));
    }

    #[test]
    fn gaussian_nll_unit_gaussian_zero_residual() {
        // mu = target, logvar = 0 → loss = (d/2)·ln(2π) per sample
        let d = 32;
        let mut t = scalar_tape();
        let v = Array2D::full(3, d, 0.7);
        let mu = t.constant(v.clone()).unwrap();
        let lv = t.constant(Array2D::zeros(3, d)).unwrap();
        let target = t.constant(v).unwrap();
        let loss = t.gaussian_nll(mu, lv, target).unwrap();
        let expect = d as f64 / 2.0 * LN_2PI;
        assert!((t.value(loss).scalar_value() - expect).abs() < 1e-10);
        assert!((expect - 29.406).abs() < 1e-3);
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let mut t = scalar_tape();
        let logits = t.constant(Array2D::zeros(2, 4)).unwrap();
        let mut oh = Array2D::zeros(2, 4);
        oh.set(0, 1, 1.0);
        oh.set(1, 3, 1.0);
        let target = t.constant(oh).unwrap();
        let loss = t.softmax_xent(logits, target).unwrap();
        assert!((t.value(loss).scalar_value() - (4.0f64).ln()).abs() < 1e-12);
    }
}
