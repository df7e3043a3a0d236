//! Finite-difference audits of every network/loss pairing, shared by the
//! CLI `gradcheck` subcommand and the acceptance suite. Each pairing checks
//! the exact graph the trainer differentiates, rebuilt from externally
//! supplied parameter leaves so the checker can perturb every coordinate.

use crate::array::Array2D;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::losses::{
    fuse, js_mi_estimate, loss_inter, loss_js_mi_matrix, prior_e_loss, q_mle_loss,
    recon_sq_error, FusionMode, LossWeights,
};
use crate::nets::{
    critic_forward_with_ids, decoder_forward_with_ids, encoder_forward_with_ids, jitter_params,
    prior_disc_forward_with_ids, q_forward_with_ids, Critic, Decoder, DNet, Encoder, Mode, Net,
    NetConfig, Pairing, QNet,
};
use crate::oracle::GaussianPair;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::trainer::AdaGrad;
use serde::Serialize;

pub const GRADCHECK_H: f64 = 1e-6;
pub const GRADCHECK_BATCH: usize = 16;
/// Relative tolerance for paths through batch normalization.
pub const TOL_BN: f64 = 1e-4;
/// Relative tolerance for batch-norm-free paths.
pub const TOL_PLAIN: f64 = 1e-5;

pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

fn named_params(prefix: &str, net: &dyn Net) -> Vec<(String, Array2D)> {
    net.params()
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p.clone()))
        .collect()
}

fn enc_scratch(enc: &Encoder) -> [crate::tape::BnState; 4] {
    [
        enc.blocks[0].bn1.clone(),
        enc.blocks[0].bn2.clone(),
        enc.blocks[1].bn1.clone(),
        enc.blocks[1].bn2.clone(),
    ]
}

/// Runs every pairing: encoder and both critics through the full objective,
/// Q through its likelihood loss, D through the prior game, one critic
/// through the contrastive bound alone, and encoder+decoder through the
/// cross-reconstruction baseline. Forward passes run in inference mode so
/// finite differences see a deterministic, well-conditioned graph; the
/// stochastic train-mode ops (dropout replay, batch statistics) are checked
/// at the autodiff layer.
pub fn network_grad_reports(seed: u64) -> Result<Vec<NamedReport>> {
    let cfg = NetConfig::tiny();
    let mut rng = Rng::from_seed(seed);
    let b = GRADCHECK_BATCH;
    let x = Array2D::uniform_init(b, cfg.input_dim, 1.0, &mut rng);
    let xp = Array2D::uniform_init(b, cfg.input_dim, 1.0, &mut rng);
    let z_p_in = Array2D::uniform_init(b, cfg.d, 1.0, &mut rng);
    let z_v_in = Array2D::uniform_init(b, cfg.d, 1.0, &mut rng);
    let z_real = Array2D::uniform_init(b, 2 * cfg.d, 1.0, &mut rng).map(|v| 0.5 * (v + 1.0));
    let z_fake = Array2D::uniform_init(b, 2 * cfg.d, 1.0, &mut rng).map(|v| 0.5 * (v + 1.0));
    let mut perm: Vec<usize> = (0..b).collect();
    perm.rotate_left(1);

    // jittered nets: zero-initialized batch-norm scales leave near-zero
    // gradients whose finite differences drown in roundoff, so shift the
    // second-block scales to a generic point near 1 before jittering
    let mut enc = Encoder::init(cfg, &mut rng);
    for blk in enc.blocks.iter_mut() {
        blk.g2 = blk.g2.map(|v| v + 1.0);
    }
    jitter_params(&mut enc, 0.1, &mut rng);
    let mut q = QNet::init(cfg, &mut rng);
    jitter_params(&mut q, 0.1, &mut rng);
    let mut d = DNet::init(cfg, &mut rng);
    jitter_params(&mut d, 0.1, &mut rng);
    let fused_dim = FusionMode::MixtureOfExperts.width(cfg.d);
    let mut critic_x = Critic::init(cfg, cfg.input_dim, fused_dim, &mut rng);
    jitter_params(&mut critic_x, 0.1, &mut rng);
    let mut critic_p = Critic::init(cfg, cfg.d, cfg.d, &mut rng);
    jitter_params(&mut critic_p, 0.1, &mut rng);
    let mut dec = Decoder::init(cfg, &mut rng);
    jitter_params(&mut dec, 0.1, &mut rng);

    let mut reports = Vec::new();

    // encoder + both critics through the complete objective
    {
        let mut params = named_params("enc", &enc);
        params.extend(named_params("critic_x", &critic_x));
        params.extend(named_params("critic_p", &critic_p));
        let n_enc = enc.params().len();
        let n_cx = critic_x.params().len();
        let w = LossWeights::default();
        let enc_ref = &enc;
        let q_ref = &mut q;
        let d_ref = &d;
        let cx_ref = &critic_x;
        let cp_ref = &critic_p;
        let perm_ref = &perm;
        let (x_c, xp_c) = (x.clone(), xp.clone());
        let mut builder = |tape: &mut crate::tape::Tape, ids: &[NodeId]| -> Result<NodeId> {
            let enc_ids = &ids[..n_enc];
            let cx_ids = &ids[n_enc..n_enc + n_cx];
            let cp_ids = &ids[n_enc + n_cx..];
            let x_node = tape.constant(x_c.clone())?;
            let xp_node = tape.constant(xp_c.clone())?;
            let mut scratch = enc_scratch(enc_ref);
            let [s0, s1, s2, s3] = &mut scratch;
            let mut states = [s0, s1, s2, s3];
            let (z_p, z_v) =
                encoder_forward_with_ids(tape, &cfg, enc_ids, &mut states, x_node, Mode::Eval)?;
            let (z_p_plus, _) =
                encoder_forward_with_ids(tape, &cfg, enc_ids, &mut states, xp_node, Mode::Eval)?;
            let fused = fuse(tape, z_p, z_v, FusionMode::MixtureOfExperts)?;
            let s1 = critic_forward_with_ids(tape, cx_ref, cx_ids, x_node, fused, Pairing::AllPairs)?;
            let t1 = loss_js_mi_matrix(tape, s1)?;
            let s2 =
                critic_forward_with_ids(tape, cp_ref, cp_ids, z_p, z_p_plus, Pairing::AllPairs)?;
            let t2 = loss_js_mi_matrix(tape, s2)?;
            let t3 = loss_inter(tape, q_ref, z_p, z_v, perm_ref)?;
            let z_cat = tape.concat_cols(z_p, z_v)?;
            let t4 = prior_e_loss(tape, d_ref, z_cat, false)?;
            let wt2 = tape.scalar_mul(t2, w.lambda1)?;
            let wt3 = tape.scalar_mul(t3, w.lambda2)?;
            let wt4 = tape.scalar_mul(t4, w.lambda3)?;
            let mut loss = tape.add(t1, wt2)?;
            loss = tape.add(loss, wt3)?;
            tape.add(loss, wt4)
        };
        reports.push(NamedReport {
            name: "encoder+critics/objective".into(),
            report: grad_check(&mut builder, &params, GRADCHECK_H, TOL_BN, seed)?,
        });
    }

    // Q through its maximum-likelihood loss
    {
        let params = named_params("q", &q);
        let q_ref = &q;
        let (zp_c, zv_c) = (z_p_in.clone(), z_v_in.clone());
        let mut builder = |tape: &mut crate::tape::Tape, ids: &[NodeId]| -> Result<NodeId> {
            let zp_node = tape.constant(zp_c.clone())?;
            let zv_node = tape.constant(zv_c.clone())?;
            let mut bn = q_ref.bn.clone();
            let (mu, logvar) = q_forward_with_ids(tape, &cfg, ids, &mut bn, zp_node, Mode::Eval)?;
            tape.gaussian_nll(mu, logvar, zv_node)
        };
        reports.push(NamedReport {
            name: "q/variational-likelihood".into(),
            report: grad_check(&mut builder, &params, GRADCHECK_H, TOL_BN, seed)?,
        });
    }

    // D through the discriminator side of the prior game
    {
        let params = named_params("d", &d);
        let (zr_c, zf_c) = (z_real.clone(), z_fake.clone());
        let mut builder = |tape: &mut crate::tape::Tape, ids: &[NodeId]| -> Result<NodeId> {
            let real = tape.constant(zr_c.clone())?;
            let fake = tape.constant(zf_c.clone())?;
            let l_real = prior_disc_forward_with_ids(tape, &cfg, ids, real)?;
            let l_fake = prior_disc_forward_with_ids(tape, &cfg, ids, fake)?;
            let nr = tape.neg(l_real)?;
            let sp_r = tape.softplus(nr)?;
            let term_r = tape.mean_all(sp_r)?;
            let sp_f = tape.softplus(l_fake)?;
            let term_f = tape.mean_all(sp_f)?;
            tape.add(term_r, term_f)
        };
        reports.push(NamedReport {
            name: "d/prior-game".into(),
            report: grad_check(&mut builder, &params, GRADCHECK_H, TOL_PLAIN, seed)?,
        });
    }

    // one critic through the contrastive bound alone
    {
        let params = named_params("critic", &critic_p);
        let cp_ref = &critic_p;
        let (a_c, b_c) = (z_p_in.clone(), z_v_in.clone());
        let mut builder = |tape: &mut crate::tape::Tape, ids: &[NodeId]| -> Result<NodeId> {
            let a = tape.constant(a_c.clone())?;
            let bb = tape.constant(b_c.clone())?;
            let scores = critic_forward_with_ids(tape, cp_ref, ids, a, bb, Pairing::AllPairs)?;
            loss_js_mi_matrix(tape, scores)
        };
        reports.push(NamedReport {
            name: "critic/js-bound".into(),
            report: grad_check(&mut builder, &params, GRADCHECK_H, TOL_PLAIN, seed)?,
        });
    }

    // encoder + decoder through the cross-reconstruction baseline
    {
        let mut params = named_params("enc", &enc);
        params.extend(named_params("dec", &dec));
        let n_enc = enc.params().len();
        let enc_ref = &enc;
        let (x_c, xp_c) = (x.clone(), xp.clone());
        let mut builder = |tape: &mut crate::tape::Tape, ids: &[NodeId]| -> Result<NodeId> {
            let enc_ids = &ids[..n_enc];
            let dec_ids = &ids[n_enc..];
            let x_node = tape.constant(x_c.clone())?;
            let xp_node = tape.constant(xp_c.clone())?;
            let mut scratch = enc_scratch(enc_ref);
            let [s0, s1, s2, s3] = &mut scratch;
            let mut states = [s0, s1, s2, s3];
            let (z_p, z_v) =
                encoder_forward_with_ids(tape, &cfg, enc_ids, &mut states, x_node, Mode::Eval)?;
            let (z_p_plus, _) =
                encoder_forward_with_ids(tape, &cfg, enc_ids, &mut states, xp_node, Mode::Eval)?;
            let z_same = tape.concat_cols(z_p, z_v)?;
            let recon_same = decoder_forward_with_ids(tape, &cfg, dec_ids, z_same)?;
            let z_cross = tape.concat_cols(z_p_plus, z_v)?;
            let recon_cross = decoder_forward_with_ids(tape, &cfg, dec_ids, z_cross)?;
            let e_same = recon_sq_error(tape, x_node, recon_same)?;
            let e_cross = recon_sq_error(tape, x_node, recon_cross)?;
            tape.add(e_same, e_cross)
        };
        reports.push(NamedReport {
            name: "decoder/cross-recon".into(),
            report: grad_check(&mut builder, &params, GRADCHECK_H, TOL_BN, seed)?,
        });
    }

    Ok(reports)
}

// ── Gaussian estimator sandwich ──────────────────────────────────────

/// Estimator bounds for one correlated-Gaussian pair: a trained contrastive
/// critic's lower bound and a converged variational upper bound around the
/// closed-form mutual information.
#[derive(Debug, Clone, Serialize)]
pub struct SandwichRow {
    pub rho: f64,
    pub true_mi: f64,
    pub lower: f64,
    pub lower_se: f64,
    pub upper: f64,
    pub upper_se: f64,
}

fn gaussian_batch(g: &GaussianPair, n: usize, rng: &mut Rng) -> Result<(Array2D, Array2D)> {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y) = g.sample(rng);
        xs.push(x);
        ys.push(y);
    }
    Ok((Array2D::from_vec(n, 1, xs)?, Array2D::from_vec(n, 1, ys)?))
}

fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Trains a critic (contrastive lower bound) and a variational q (upper
/// bound) per correlation and evaluates both on 10^4 held-out samples split
/// into 100 batches; standard errors are across batches.
pub fn gaussian_sandwich(rhos: &[f64], seed: u64) -> Result<Vec<SandwichRow>> {
    let cfg = NetConfig {
        input_dim: 1,
        h: 32,
        d: 1,
        h_q: 64,
        h_d: 32,
        h_f: 64,
        m: 16,
    };
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let g = GaussianPair::new(rho)?;
        let mut rng = Rng::from_seed(seed);

        let mut critic = Critic::init(cfg, 1, 1, &mut rng);
        let mut opt = AdaGrad::new(&critic, 0.02, 1e-7, 0.1);
        for _ in 0..2000 {
            let (x, y) = gaussian_batch(&g, 64, &mut rng)?;
            let mut tape = Tape::new(0);
            let xn = tape.constant(x)?;
            let yn = tape.constant(y)?;
            let ids = critic.register(&mut tape, true)?;
            let s = critic_forward_with_ids(&mut tape, &critic, &ids, xn, yn, Pairing::AllPairs)?;
            let loss = loss_js_mi_matrix(&mut tape, s)?;
            tape.backward(loss)?;
            let grads: Vec<Array2D> = ids.iter().map(|&i| tape.grad(i).clone()).collect();
            opt.step(&mut critic, &grads)?;
        }
        let mut lows = Vec::with_capacity(100);
        for _ in 0..100 {
            let (x, y) = gaussian_batch(&g, 100, &mut rng)?;
            let mut tape = Tape::new(0);
            let xn = tape.constant(x)?;
            let yn = tape.constant(y)?;
            let ids = critic.register(&mut tape, false)?;
            let s = critic_forward_with_ids(&mut tape, &critic, &ids, xn, yn, Pairing::AllPairs)?;
            let loss = loss_js_mi_matrix(&mut tape, s)?;
            lows.push(js_mi_estimate(tape.value(loss).scalar_value()));
        }
        let (lower, lower_se) = mean_se(&lows);

        let mut q = QNet::init(cfg, &mut rng);
        let mut qopt = AdaGrad::new(&q, 0.02, 1e-7, 0.1);
        for _ in 0..3000 {
            let (x, y) = gaussian_batch(&g, 64, &mut rng)?;
            let mut tape = Tape::new(0);
            let (loss, ids) = q_mle_loss(&mut tape, &mut q, &x, &y, Mode::Train, true)?;
            tape.backward(loss)?;
            let grads: Vec<Array2D> = ids.iter().map(|&i| tape.grad(i).clone()).collect();
            qopt.step(&mut q, &grads)?;
        }
        let mut ups = Vec::with_capacity(100);
        for _ in 0..100 {
            let (x, y) = gaussian_batch(&g, 100, &mut rng)?;
            let mut tape = Tape::new(0);
            let xn = tape.constant(x)?;
            let yn = tape.constant(y)?;
            let mut perm: Vec<usize> = (0..100).collect();
            for i in (1..100).rev() {
                let j = rng.gen_index(i);
                perm.swap(i, j);
            }
            let est = loss_inter(&mut tape, &mut q, xn, yn, &perm)?;
            ups.push(tape.value(est).scalar_value());
        }
        let (upper, upper_se) = mean_se(&ups);

        rows.push(SandwichRow {
            rho,
            true_mi: g.mi(),
            lower,
            lower_se,
            upper,
            upper_se,
        });
    }
    Ok(rows)
}
