//! The learnable networks: encoder E (residual MLP with two sigmoid heads
//! for z_p and z_v), variational network Q, prior discriminator D, the
//! encode-and-dot-product critic f, and the decoder G used by the
//! cross-reconstruction baseline.
//!
//! Parameters live in plain value containers; a forward pass clones them
//! onto a tape as leaves, so read-only snapshots can be evaluated
//! concurrently while training mutates one container at a time.

use crate::array::Array2D;
use crate::error::{CvmimError, Result};
use crate::rng::Rng;
use crate::tape::{BnState, NodeId, Tape};

pub const DROPOUT_RATE: f64 = 0.25;
pub const LOGVAR_CLAMP: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Flattened 2D pose width (13 joints × 2).
    pub input_dim: usize,
    /// Encoder hidden width.
    pub h: usize,
    /// Embedding width for both z_p and z_v.
    pub d: usize,
    /// Q hidden width.
    pub h_q: usize,
    /// D hidden width.
    pub h_d: usize,
    /// Critic tower hidden width.
    pub h_f: usize,
    /// Critic tower output width.
    pub m: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 26,
            h: 128,
            d: 32,
            h_q: 128,
            h_d: 128,
            h_f: 128,
            m: 64,
        }
    }
}

impl NetConfig {
    /// Scaled-down widths for gradient-check suites, where finite
    /// differences visit every coordinate.
    pub fn tiny() -> Self {
        NetConfig {
            input_dim: 26,
            h: 12,
            d: 4,
            h_q: 10,
            h_d: 10,
            h_f: 10,
            m: 6,
        }
    }
}

pub fn he_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Array2D {
    Array2D::uniform_init(rows, cols, (6.0 / rows as f64).sqrt(), rng)
}

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Array2D {
    Array2D::uniform_init(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Adds uniform noise to every parameter. Gradient checks need this after
/// init: the zero-started batch-norm scales would otherwise sit exactly on
/// the ReLU kink where one-sided derivatives disagree.
pub fn jitter_params<N: Net + ?Sized>(net: &mut N, scale: f64, rng: &mut Rng) {
    for (_, p) in net.params_mut() {
        for v in p.data_mut() {
            *v += rng.uniform(-scale, scale);
        }
    }
}

pub type NamedParams<'a> = Vec<(String, &'a Array2D)>;
pub type NamedParamsMut<'a> = Vec<(String, &'a mut Array2D)>;

/// A value container of named tensors with a canonical order.
pub trait Net {
    fn params(&self) -> NamedParams<'_>;
    fn params_mut(&mut self) -> NamedParamsMut<'_>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, a)| a.len()).sum()
    }

    /// Clone every parameter onto the tape in canonical order.
    fn register(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<NodeId>> {
        self.params()
            .into_iter()
            .map(|(_, a)| tape.leaf(a.clone(), requires_grad))
            .collect()
    }
}

// ── Encoder ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub w1: Array2D,
    pub g1: Array2D,
    pub be1: Array2D,
    pub w2: Array2D,
    pub g2: Array2D,
    pub be2: Array2D,
    pub bn1: BnState,
    pub bn2: BnState,
}

/// Martinez-style residual MLP with two sigmoid heads. Both heads share the
/// backbone; outputs are strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: NetConfig,
    pub w_in: Array2D,
    pub b_in: Array2D,
    pub blocks: [ResBlock; 2],
    pub w_p: Array2D,
    pub b_p: Array2D,
    pub w_v: Array2D,
    pub b_v: Array2D,
}

impl Encoder {
    /// The four batch-norm states in forward order.
    pub fn bn_states(&mut self) -> [&mut BnState; 4] {
        let (b0, b1) = self.blocks.split_at_mut(1);
        [
            &mut b0[0].bn1,
            &mut b0[0].bn2,
            &mut b1[0].bn1,
            &mut b1[0].bn2,
        ]
    }

    pub fn init(cfg: NetConfig, rng: &mut Rng) -> Encoder {
        let h = cfg.h;
        // zero-init the second batch-norm scale so each block starts as a
        // no-op: the trunk stays zero-mean and the sigmoid heads open at 0.5
        let block = |rng: &mut Rng| ResBlock {
            w1: he_uniform(h, h, rng),
            g1: Array2D::full(1, h, 1.0),
            be1: Array2D::zeros(1, h),
            w2: he_uniform(h, h, rng),
            g2: Array2D::zeros(1, h),
            be2: Array2D::zeros(1, h),
            bn1: BnState::new(h),
            bn2: BnState::new(h),
        };
        Encoder {
            w_in: he_uniform(cfg.input_dim, h, rng),
            b_in: Array2D::zeros(1, h),
            blocks: [block(rng), block(rng)],
            w_p: xavier_uniform(h, cfg.d, rng),
            b_p: Array2D::zeros(1, cfg.d),
            w_v: xavier_uniform(h, cfg.d, rng),
            b_v: Array2D::zeros(1, cfg.d),
            cfg,
        }
    }
}

impl Net for Encoder {
    fn params(&self) -> NamedParams<'_> {
        let mut out: NamedParams = vec![
            ("w_in".into(), &self.w_in),
            ("b_in".into(), &self.b_in),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.w1"), &b.w1));
            out.push((format!("block{i}.g1"), &b.g1));
            out.push((format!("block{i}.be1"), &b.be1));
            out.push((format!("block{i}.w2"), &b.w2));
            out.push((format!("block{i}.g2"), &b.g2));
            out.push((format!("block{i}.be2"), &b.be2));
        }
        out.push(("w_p".into(), &self.w_p));
        out.push(("b_p".into(), &self.b_p));
        out.push(("w_v".into(), &self.w_v));
        out.push(("b_v".into(), &self.b_v));
        out
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_> {
        let mut out: NamedParamsMut = vec![
            ("w_in".into(), &mut self.w_in),
            ("b_in".into(), &mut self.b_in),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.w1"), &mut b.w1));
            out.push((format!("block{i}.g1"), &mut b.g1));
            out.push((format!("block{i}.be1"), &mut b.be1));
            out.push((format!("block{i}.w2"), &mut b.w2));
            out.push((format!("block{i}.g2"), &mut b.g2));
            out.push((format!("block{i}.be2"), &mut b.be2));
        }
        out.push(("w_p".into(), &mut self.w_p));
        out.push(("b_p".into(), &mut self.b_p));
        out.push(("w_v".into(), &mut self.w_v));
        out.push(("b_v".into(), &mut self.b_v));
        out
    }
}

pub struct EncoderOut {
    pub z_p: NodeId,
    pub z_v: NodeId,
    /// Tape ids of the registered parameters, in `params()` order.
    pub param_ids: Vec<NodeId>,
}

/// Forward pass given already-registered parameter ids (canonical order).
/// `bn_states` supplies the four batch-norm states; in train mode they are
/// updated in place when taken from the encoder, or from a scratch clone for
/// deterministic rebuilds.
pub fn encoder_forward_with_ids(
    tape: &mut Tape,
    cfg: &NetConfig,
    ids: &[NodeId],
    bn_states: &mut [&mut BnState; 4],
    x: NodeId,
    mode: Mode,
) -> Result<(NodeId, NodeId)> {
    let batch = tape.value(x).rows();
    if tape.value(x).cols() != cfg.input_dim {
        return Err(CvmimError::ShapeMismatch {
            op: "encoder_forward",
            lhs: tape.value(x).shape_str(),
            rhs: format!("Bx{}", cfg.input_dim),
        });
    }
    if mode == Mode::Train && batch < 2 {
        return Err(CvmimError::InvalidArgument(
            "encoder train mode needs batch size >= 2".into(),
        ));
    }
    let train = mode == Mode::Train;
    let mut h = tape.matmul(x, ids[0])?;
    h = tape.add(h, ids[1])?;
    // block linears are bias-free: batch norm cancels any uniform shift
    for blk in 0..2 {
        let o = 2 + blk * 6;
        let mut y = tape.matmul(h, ids[o])?;
        y = tape.batch_norm(y, ids[o + 1], ids[o + 2], train, bn_states[blk * 2])?;
        y = tape.relu(y)?;
        if train {
            y = tape.dropout(y, DROPOUT_RATE)?;
        }
        let mut y2 = tape.matmul(y, ids[o + 3])?;
        y2 = tape.batch_norm(y2, ids[o + 4], ids[o + 5], train, bn_states[blk * 2 + 1])?;
        y2 = tape.relu(y2)?;
        if train {
            y2 = tape.dropout(y2, DROPOUT_RATE)?;
        }
        h = tape.add(h, y2)?;
    }
    let hp = tape.matmul(h, ids[14])?;
    let hp = tape.add(hp, ids[15])?;
    let z_p = tape.sigmoid(hp)?;
    let hv = tape.matmul(h, ids[16])?;
    let hv = tape.add(hv, ids[17])?;
    let z_v = tape.sigmoid(hv)?;
    Ok((z_p, z_v))
}

/// Full forward: registers parameters, runs the backbone, returns embedding
/// node ids. `update_stats` controls whether train-mode batch statistics are
/// folded into the encoder's running stats.
pub fn encoder_forward(
    tape: &mut Tape,
    enc: &mut Encoder,
    x: NodeId,
    mode: Mode,
    requires_grad: bool,
    update_stats: bool,
) -> Result<EncoderOut> {
    let param_ids = enc.register(tape, requires_grad)?;
    let cfg = enc.cfg;
    let (z_p, z_v) = if update_stats {
        let mut states = enc.bn_states();
        encoder_forward_with_ids(tape, &cfg, &param_ids, &mut states, x, mode)?
    } else {
        let mut scratch = [
            enc.blocks[0].bn1.clone(),
            enc.blocks[0].bn2.clone(),
            enc.blocks[1].bn1.clone(),
            enc.blocks[1].bn2.clone(),
        ];
        let [s0, s1, s2, s3] = &mut scratch;
        let mut states = [s0, s1, s2, s3];
        encoder_forward_with_ids(tape, &cfg, &param_ids, &mut states, x, mode)?
    };
    Ok(EncoderOut {
        z_p,
        z_v,
        param_ids,
    })
}

// ── Variational network Q ────────────────────────────────────────────

/// Predicts the diagonal Gaussian q(z_v | z_p): two linear layers, the first
/// followed by batch normalization and ELU; the output splits into μ and
/// logσ² (clamped to ±7).
#[derive(Debug, Clone)]
pub struct QNet {
    pub cfg: NetConfig,
    pub w1: Array2D,
    pub g: Array2D,
    pub be: Array2D,
    pub w2: Array2D,
    pub b2: Array2D,
    pub bn: BnState,
}

impl QNet {
    pub fn init(cfg: NetConfig, rng: &mut Rng) -> QNet {
        QNet {
            w1: he_uniform(cfg.d, cfg.h_q, rng),
            g: Array2D::full(1, cfg.h_q, 1.0),
            be: Array2D::zeros(1, cfg.h_q),
            w2: xavier_uniform(cfg.h_q, 2 * cfg.d, rng),
            b2: Array2D::zeros(1, 2 * cfg.d),
            bn: BnState::new(cfg.h_q),
            cfg,
        }
    }

    pub fn zeroed(cfg: NetConfig) -> QNet {
        QNet {
            w1: Array2D::zeros(cfg.d, cfg.h_q),
            g: Array2D::full(1, cfg.h_q, 1.0),
            be: Array2D::zeros(1, cfg.h_q),
            w2: Array2D::zeros(cfg.h_q, 2 * cfg.d),
            b2: Array2D::zeros(1, 2 * cfg.d),
            bn: BnState::new(cfg.h_q),
            cfg,
        }
    }
}

impl Net for QNet {
    fn params(&self) -> NamedParams<'_> {
        vec![
            ("w1".into(), &self.w1),
            ("g".into(), &self.g),
            ("be".into(), &self.be),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_> {
        vec![
            ("w1".into(), &mut self.w1),
            ("g".into(), &mut self.g),
            ("be".into(), &mut self.be),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

pub fn q_forward_with_ids(
    tape: &mut Tape,
    cfg: &NetConfig,
    ids: &[NodeId],
    bn: &mut BnState,
    z_p: NodeId,
    mode: Mode,
) -> Result<(NodeId, NodeId)> {
    if tape.value(z_p).cols() != cfg.d {
        return Err(CvmimError::ShapeMismatch {
            op: "q_forward",
            lhs: tape.value(z_p).shape_str(),
            rhs: format!("Bx{}", cfg.d),
        });
    }
    let train = mode == Mode::Train;
    // first linear is bias-free: batch norm cancels any uniform shift
    let mut h = tape.matmul(z_p, ids[0])?;
    h = tape.batch_norm(h, ids[1], ids[2], train, bn)?;
    h = tape.elu(h)?;
    let mut out = tape.matmul(h, ids[3])?;
    out = tape.add(out, ids[4])?;
    let mu = tape.slice_cols(out, 0, cfg.d)?;
    let logvar_raw = tape.slice_cols(out, cfg.d, cfg.d)?;
    let logvar = tape.clamp(logvar_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok((mu, logvar))
}

pub fn q_forward(
    tape: &mut Tape,
    q: &mut QNet,
    z_p: NodeId,
    mode: Mode,
    requires_grad: bool,
    update_stats: bool,
) -> Result<(NodeId, NodeId, Vec<NodeId>)> {
    let ids = q.register(tape, requires_grad)?;
    let cfg = q.cfg;
    if update_stats {
        let (mu, lv) = q_forward_with_ids(tape, &cfg, &ids, &mut q.bn, z_p, mode)?;
        Ok((mu, lv, ids))
    } else {
        let mut bn = q.bn.clone();
        let (mu, lv) = q_forward_with_ids(tape, &cfg, &ids, &mut bn, z_p, mode)?;
        Ok((mu, lv, ids))
    }
}

// ── Prior discriminator D ────────────────────────────────────────────

/// Three linear layers (2d → H_d → H_d → 1), ReLU after the first two;
/// outputs one logit per sample.
#[derive(Debug, Clone)]
pub struct DNet {
    pub cfg: NetConfig,
    pub w1: Array2D,
    pub b1: Array2D,
    pub w2: Array2D,
    pub b2: Array2D,
    pub w3: Array2D,
    pub b3: Array2D,
}

impl DNet {
    pub fn init(cfg: NetConfig, rng: &mut Rng) -> DNet {
        DNet {
            w1: he_uniform(2 * cfg.d, cfg.h_d, rng),
            b1: Array2D::zeros(1, cfg.h_d),
            w2: he_uniform(cfg.h_d, cfg.h_d, rng),
            b2: Array2D::zeros(1, cfg.h_d),
            w3: xavier_uniform(cfg.h_d, 1, rng),
            b3: Array2D::zeros(1, 1),
            cfg,
        }
    }

    pub fn zeroed(cfg: NetConfig) -> DNet {
        DNet {
            w1: Array2D::zeros(2 * cfg.d, cfg.h_d),
            b1: Array2D::zeros(1, cfg.h_d),
            w2: Array2D::zeros(cfg.h_d, cfg.h_d),
            b2: Array2D::zeros(1, cfg.h_d),
            w3: Array2D::zeros(cfg.h_d, 1),
            b3: Array2D::zeros(1, 1),
            cfg,
        }
    }
}

impl Net for DNet {
    fn params(&self) -> NamedParams<'_> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("w3".into(), &self.w3),
            ("b3".into(), &self.b3),
        ]
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
            ("w3".into(), &mut self.w3),
            ("b3".into(), &mut self.b3),
        ]
    }
}

pub fn prior_disc_forward_with_ids(
    tape: &mut Tape,
    cfg: &NetConfig,
    ids: &[NodeId],
    z: NodeId,
) -> Result<NodeId> {
    if tape.value(z).cols() != 2 * cfg.d {
        return Err(CvmimError::ShapeMismatch {
            op: "prior_disc_forward",
            lhs: tape.value(z).shape_str(),
            rhs: format!("Bx{}", 2 * cfg.d),
        });
    }
    let mut h = tape.matmul(z, ids[0])?;
    h = tape.add(h, ids[1])?;
    h = tape.relu(h)?;
    let mut h2 = tape.matmul(h, ids[2])?;
    h2 = tape.add(h2, ids[3])?;
    h2 = tape.relu(h2)?;
    let mut logit = tape.matmul(h2, ids[4])?;
    logit = tape.add(logit, ids[5])?;
    Ok(logit)
}

pub fn prior_disc_forward(
    tape: &mut Tape,
    d_net: &DNet,
    z: NodeId,
    requires_grad: bool,
) -> Result<(NodeId, Vec<NodeId>)> {
    let ids = d_net.register(tape, requires_grad)?;
    let logit = prior_disc_forward_with_ids(tape, &d_net.cfg, &ids, z)?;
    Ok((logit, ids))
}

// ── MI critic f ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Equal batch sizes; score per aligned row (positives).
    Aligned,
    /// Full B_a × B_b score matrix (off-diagonal = negatives).
    AllPairs,
}

/// Encode-and-dot-product critic: two unshared two-layer ReLU towers,
/// score(i, j) = φ_a(a_i) · φ_b(b_j). All-pairs mode is one tower pass per
/// side plus a single matmul.
#[derive(Debug, Clone)]
pub struct Critic {
    pub cfg: NetConfig,
    pub dim_a: usize,
    pub dim_b: usize,
    pub wa1: Array2D,
    pub ba1: Array2D,
    pub wa2: Array2D,
    pub ba2: Array2D,
    pub wb1: Array2D,
    pub bb1: Array2D,
    pub wb2: Array2D,
    pub bb2: Array2D,
}

impl Critic {
    pub fn init(cfg: NetConfig, dim_a: usize, dim_b: usize, rng: &mut Rng) -> Critic {
        Critic {
            wa1: he_uniform(dim_a, cfg.h_f, rng),
            ba1: Array2D::zeros(1, cfg.h_f),
            wa2: xavier_uniform(cfg.h_f, cfg.m, rng),
            ba2: Array2D::zeros(1, cfg.m),
            wb1: he_uniform(dim_b, cfg.h_f, rng),
            bb1: Array2D::zeros(1, cfg.h_f),
            wb2: xavier_uniform(cfg.h_f, cfg.m, rng),
            bb2: Array2D::zeros(1, cfg.m),
            cfg,
            dim_a,
            dim_b,
        }
    }
}

impl Net for Critic {
    fn params(&self) -> NamedParams<'_> {
        vec![
            ("wa1".into(), &self.wa1),
            ("ba1".into(), &self.ba1),
            ("wa2".into(), &self.wa2),
            ("ba2".into(), &self.ba2),
            ("wb1".into(), &self.wb1),
            ("bb1".into(), &self.bb1),
            ("wb2".into(), &self.wb2),
            ("bb2".into(), &self.bb2),
        ]
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_> {
        vec![
            ("wa1".into(), &mut self.wa1),
            ("ba1".into(), &mut self.ba1),
            ("wa2".into(), &mut self.wa2),
            ("ba2".into(), &mut self.ba2),
            ("wb1".into(), &mut self.wb1),
            ("bb1".into(), &mut self.bb1),
            ("wb2".into(), &mut self.wb2),
            ("bb2".into(), &mut self.bb2),
        ]
    }
}

fn tower(tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
    let mut h = tape.matmul(x, ids[0])?;
    h = tape.add(h, ids[1])?;
    h = tape.relu(h)?;
    let mut out = tape.matmul(h, ids[2])?;
    out = tape.add(out, ids[3])?;
    Ok(out)
}

pub fn critic_forward_with_ids(
    tape: &mut Tape,
    critic: &Critic,
    ids: &[NodeId],
    a: NodeId,
    b: NodeId,
    pairing: Pairing,
) -> Result<NodeId> {
    if tape.value(a).cols() != critic.dim_a || tape.value(b).cols() != critic.dim_b {
        return Err(CvmimError::ShapeMismatch {
            op: "critic_forward",
            lhs: format!("a {} b {}", tape.value(a).shape_str(), tape.value(b).shape_str()),
            rhs: format!("Bx{} and Bx{}", critic.dim_a, critic.dim_b),
        });
    }
    let phi_a = tower(tape, &ids[0..4], a)?;
    let phi_b = tower(tape, &ids[4..8], b)?;
    match pairing {
        Pairing::Aligned => {
            if tape.value(a).rows() != tape.value(b).rows() {
                return Err(CvmimError::ShapeMismatch {
                    op: "critic_forward aligned",
                    lhs: tape.value(a).shape_str(),
                    rhs: tape.value(b).shape_str(),
                });
            }
            // row-wise dot product: (φ_a ⊗ φ_b) · 1
            let prod = tape.mul(phi_a, phi_b)?;
            let ones = tape.constant(Array2D::full(critic.cfg.m, 1, 1.0))?;
            tape.matmul(prod, ones)
        }
        Pairing::AllPairs => tape.matmul_nt(phi_a, phi_b),
    }
}

pub fn critic_forward(
    tape: &mut Tape,
    critic: &Critic,
    a: NodeId,
    b: NodeId,
    pairing: Pairing,
    requires_grad: bool,
) -> Result<(NodeId, Vec<NodeId>)> {
    let ids = critic.register(tape, requires_grad)?;
    let scores = critic_forward_with_ids(tape, critic, &ids, a, b, pairing)?;
    Ok((scores, ids))
}

// ── Aggregate ────────────────────────────────────────────────────────

/// Every trainable network of the main objective. The critic for the
/// (x, fused) term consumes the raw 26-dim pose on one tower and the fused
/// representation (width depends on the fusion operator) on the other; the
/// pose-pose critic consumes d-dim embeddings on both towers. The two
/// critics do not share weights.
#[derive(Debug, Clone)]
pub struct Nets {
    pub cfg: NetConfig,
    pub enc: Encoder,
    pub q: QNet,
    pub d: DNet,
    pub critic_x: Critic,
    pub critic_p: Critic,
}

impl Nets {
    pub fn init(cfg: NetConfig, fused_dim: usize, rng: &mut Rng) -> Nets {
        Nets {
            enc: Encoder::init(cfg, rng),
            q: QNet::init(cfg, rng),
            d: DNet::init(cfg, rng),
            critic_x: Critic::init(cfg, cfg.input_dim, fused_dim, rng),
            critic_p: Critic::init(cfg, cfg.d, cfg.d, rng),
            cfg,
        }
    }
}

// ── Decoder G (cross-reconstruction baseline) ────────────────────────

/// Mirror MLP mapping the concatenated (z_p, z_v) back to the 26-dim pose.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: NetConfig,
    pub w1: Array2D,
    pub b1: Array2D,
    pub w2: Array2D,
    pub b2: Array2D,
    pub w3: Array2D,
    pub b3: Array2D,
}

impl Decoder {
    pub fn init(cfg: NetConfig, rng: &mut Rng) -> Decoder {
        Decoder {
            w1: he_uniform(2 * cfg.d, cfg.h, rng),
            b1: Array2D::zeros(1, cfg.h),
            w2: he_uniform(cfg.h, cfg.h, rng),
            b2: Array2D::zeros(1, cfg.h),
            w3: xavier_uniform(cfg.h, cfg.input_dim, rng),
            b3: Array2D::zeros(1, cfg.input_dim),
            cfg,
        }
    }

    pub fn zeroed(cfg: NetConfig) -> Decoder {
        Decoder {
            w1: Array2D::zeros(2 * cfg.d, cfg.h),
            b1: Array2D::zeros(1, cfg.h),
            w2: Array2D::zeros(cfg.h, cfg.h),
            b2: Array2D::zeros(1, cfg.h),
            w3: Array2D::zeros(cfg.h, cfg.input_dim),
            b3: Array2D::zeros(1, cfg.input_dim),
            cfg,
        }
    }
}

impl Net for Decoder {
    fn params(&self) -> NamedParams<'_> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("w3".into(), &self.w3),
            ("b3".into(), &self.b3),
        ]
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
            ("w3".into(), &mut self.w3),
            ("b3".into(), &mut self.b3),
        ]
    }
}

pub fn decoder_forward_with_ids(
    tape: &mut Tape,
    cfg: &NetConfig,
    ids: &[NodeId],
    z: NodeId,
) -> Result<NodeId> {
    if tape.value(z).cols() != 2 * cfg.d {
        return Err(CvmimError::ShapeMismatch {
            op: "decoder_forward",
            lhs: tape.value(z).shape_str(),
            rhs: format!("Bx{}", 2 * cfg.d),
        });
    }
    let mut h = tape.matmul(z, ids[0])?;
    h = tape.add(h, ids[1])?;
    h = tape.relu(h)?;
    let mut h2 = tape.matmul(h, ids[2])?;
    h2 = tape.add(h2, ids[3])?;
    h2 = tape.relu(h2)?;
    let mut out = tape.matmul(h2, ids[4])?;
    out = tape.add(out, ids[5])?;
    Ok(out)
}
