//! Training: AdaGrad optimization, the alternating D/Q/E update schedule,
//! cross-view batch assembly with camera augmentation, and checkpointing.

pub mod checkpoint;

use crate::array::Array2D;
use crate::data::camera::{project, sample_camera, CameraPose};
use crate::data::dataset::{MultiViewDataset, FULLY_SUPERVISED};
use crate::data::pose::{Pose2D, Pose3D};
use crate::error::{CvmimError, Result};
use crate::losses::{
    build_objective, fuse_arrays, prior_d_loss, q_mle_loss, random_shuffle_perm,
    sample_uniform_prior, FusionMode, LossBundle, LossWeights,
};
use crate::nets::{encoder_forward, Mode, Net, NetConfig, Nets};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

// ── AdaGrad ──────────────────────────────────────────────────────────

/// Per-parameter squared-gradient accumulators for one network, aligned
/// with the network's canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdaGrad {
    pub lr: f64,
    pub eps: f64,
    pub acc: Vec<Array2D>,
}

impl AdaGrad {
    pub fn new(net: &dyn Net, lr: f64, eps: f64, init_acc: f64) -> AdaGrad {
        AdaGrad {
            lr,
            eps,
            acc: net
                .params()
                .iter()
                .map(|(_, p)| Array2D::full(p.rows(), p.cols(), init_acc))
                .collect(),
        }
    }

    /// acc += g²; θ −= η·g / (√acc + ε), elementwise.
    pub fn step(&mut self, net: &mut dyn Net, grads: &[Array2D]) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != grads.len() || params.len() != self.acc.len() {
            return Err(CvmimError::InvalidArgument(format!(
                "adagrad step over {} params with {} grads and {} accumulators",
                params.len(),
                grads.len(),
                self.acc.len()
            )));
        }
        for (((name, p), g), a) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            if p.shape() != g.shape() {
                return Err(CvmimError::ShapeMismatch {
                    op: "adagrad_step",
                    lhs: format!("{name} {}", p.shape_str()),
                    rhs: g.shape_str(),
                });
            }
            for ((pv, gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(a.data_mut()) {
                *av += gv * gv;
                *pv -= self.lr * gv / (av.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimizer per independently scheduled network.
#[derive(Debug, Clone)]
pub struct OptStates {
    pub enc: AdaGrad,
    pub q: AdaGrad,
    pub d: AdaGrad,
    pub critic_x: AdaGrad,
    pub critic_p: AdaGrad,
}

impl OptStates {
    pub fn new(nets: &Nets, cfg: &TrainConfig) -> OptStates {
        let mk = |n: &dyn Net| AdaGrad::new(n, cfg.lr, cfg.adagrad_eps, cfg.adagrad_init_acc);
        OptStates {
            enc: mk(&nets.enc),
            q: mk(&nets.q),
            d: mk(&nets.d),
            critic_x: mk(&nets.critic_x),
            critic_p: mk(&nets.critic_p),
        }
    }
}

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub iterations: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub fusion: FusionMode,
    /// Mix freshly sampled augmented cameras into one side of half the
    /// positive pairs (in expectation).
    pub augmentation: bool,
    /// Update-schedule multipliers per iteration.
    pub d_steps: usize,
    pub q_steps: usize,
    pub e_steps: usize,
    pub lr: f64,
    pub adagrad_eps: f64,
    pub adagrad_init_acc: f64,
    pub saturating_prior: bool,
    /// Emit wall-clock milliseconds in the training log. Off by default so
    /// logs from identical runs are byte-identical.
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            iterations: 20_000,
            seed: 0,
            weights: LossWeights::default(),
            fusion: FusionMode::MixtureOfExperts,
            augmentation: true,
            d_steps: 1,
            q_steps: 1,
            e_steps: 1,
            lr: 0.02,
            adagrad_eps: 1e-7,
            adagrad_init_acc: 0.1,
            saturating_prior: false,
            log_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(CvmimError::Config(format!(
                "batch {} below the minimum of 2",
                self.batch
            )));
        }
        if self.iterations == 0 {
            return Err(CvmimError::Config("iterations must be >= 1".into()));
        }
        if self.d_steps + self.q_steps + self.e_steps == 0 {
            return Err(CvmimError::Config(
                "update schedule runs zero steps per iteration".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CvmimError::Config(format!("learning rate {} invalid", self.lr)));
        }
        if !(self.adagrad_eps.is_finite() && self.adagrad_eps > 0.0) {
            return Err(CvmimError::Config(format!(
                "adagrad eps {} invalid",
                self.adagrad_eps
            )));
        }
        if !(self.adagrad_init_acc.is_finite() && self.adagrad_init_acc >= 0.0) {
            return Err(CvmimError::Config(format!(
                "adagrad initial accumulator {} invalid",
                self.adagrad_init_acc
            )));
        }
        self.weights.validate()
    }
}

// ── Batch assembly ───────────────────────────────────────────────────

/// An aligned (x, x⁺) batch: row i of `x` and `xp` are two renders of the
/// same 3D pose from distinct cameras. `views[i]` records the two base-view
/// ids; `None` marks a freshly sampled augmented camera.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x: Array2D,
    pub xp: Array2D,
    /// Distinct (sequence, frame) sources, one per row.
    pub source: Vec<(u64, u32)>,
    pub views: Vec<[Option<u32>; 2]>,
}

fn render_side(
    pose: &Pose3D,
    cam: &CameraPose,
    base_view: bool,
    ds: &MultiViewDataset,
    rng: &mut Rng,
) -> Result<Pose2D> {
    let mut p2 = project(pose, cam, ds.config.orthographic)?;
    // detector noise applies to base-view ("detected") renders only,
    // matching the dataset's own rendering path
    if base_view && ds.config.noise_std > 0.0 {
        for j in &mut p2.joints {
            j[0] += rng.normal(0.0, ds.config.noise_std);
            j[1] += rng.normal(0.0, ds.config.noise_std);
        }
    }
    p2.normalize()
}

/// Draws `cfg.batch` distinct 3D poses from the training sequences and pairs
/// two distinct-camera renders of each, so in-batch negatives never alias a
/// positive. With augmentation on, one side of each pair is re-rendered from
/// a freshly sampled camera with probability 1/2.
pub fn sample_training_batch(
    ds: &MultiViewDataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    let split = ds
        .splits
        .get(FULLY_SUPERVISED)
        .ok_or_else(|| CvmimError::Dataset("missing fully-supervised split".into()))?;
    let frames = ds.config.frames;
    let views = ds.config.views;
    let pool = split.train_seqs.len() * frames;
    if cfg.batch > pool {
        return Err(CvmimError::Dataset(format!(
            "batch {} exceeds the {} distinct training poses",
            cfg.batch, pool
        )));
    }

    // sampling without replacement: partial Fisher-Yates over the pose pool
    let mut indices: Vec<usize> = (0..pool).collect();
    for k in 0..cfg.batch {
        let j = k + rng.gen_index(pool - k);
        indices.swap(k, j);
    }

    let width = ds.config.views; // base cameras only feed view choice
    debug_assert!(width >= 2);
    let mut x_data = Vec::with_capacity(cfg.batch * 26);
    let mut xp_data = Vec::with_capacity(cfg.batch * 26);
    let mut source = Vec::with_capacity(cfg.batch);
    let mut view_pairs = Vec::with_capacity(cfg.batch);
    for &idx in indices.iter().take(cfg.batch) {
        let seq = split.train_seqs[idx / frames];
        let frame = (idx % frames) as u32;
        let pose = &ds.sequences[seq as usize].frames[frame as usize];

        let vi = rng.gen_index(views);
        let mut vj = rng.gen_index(views - 1);
        if vj >= vi {
            vj += 1;
        }
        let mut pair: [Option<u32>; 2] = [Some(vi as u32), Some(vj as u32)];
        let mut cams = [ds.cameras[vi].clone(), ds.cameras[vj].clone()];
        if cfg.augmentation && rng.next_f64() < 0.5 {
            let side = rng.gen_index(2);
            cams[side] = sample_camera(rng, ds.config.camera_distance, ds.config.camera_focal);
            pair[side] = None;
        }

        let p0 = render_side(pose, &cams[0], pair[0].is_some(), ds, rng)?;
        let p1 = render_side(pose, &cams[1], pair[1].is_some(), ds, rng)?;
        x_data.extend_from_slice(&p0.flatten());
        xp_data.extend_from_slice(&p1.flatten());
        source.push((seq, frame));
        view_pairs.push(pair);
    }

    Ok(TrainBatch {
        x: Array2D::from_vec(cfg.batch, 26, x_data)?,
        xp: Array2D::from_vec(cfg.batch, 26, xp_data)?,
        source,
        views: view_pairs,
    })
}

// ── Iteration ────────────────────────────────────────────────────────

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CvmimError::NonFinite {
            context: format!("loss component {name}"),
        })
    }
}

/// Attributes non-finite failures inside a phase to its loss component.
fn tag_component<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        CvmimError::NonFinite { context } => CvmimError::NonFinite {
            context: format!("loss component {name}: {context}"),
        },
        other => other,
    })
}

fn pull_grads(tape: &Tape, ids: &[NodeId]) -> Vec<Array2D> {
    ids.iter().map(|&id| tape.grad(id).clone()).collect()
}

/// Encoder embeddings of `x` with gradients and statistics detached
/// (inference mode, running batch-norm stats).
fn detached_embeddings(nets: &mut Nets, x: &Array2D) -> Result<(Array2D, Array2D)> {
    let mut tape = Tape::new(0);
    let xn = tape.constant(x.clone())?;
    let out = encoder_forward(&mut tape, &mut nets.enc, xn, Mode::Eval, false, false)?;
    Ok((tape.value(out.z_p).clone(), tape.value(out.z_v).clone()))
}

/// One alternating update: `d_steps` discriminator updates on detached
/// embeddings, `q_steps` maximum-likelihood updates of Q on detached
/// embeddings, then `e_steps` encoder+critic updates with Q and D frozen.
/// Phases with a zero step count still evaluate their loss (no update) so
/// the returned bundle is always complete.
pub fn train_iteration(
    nets: &mut Nets,
    opts: &mut OptStates,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossBundle> {
    let b = batch.x.rows();
    let (z_p, z_v) = detached_embeddings(nets, &batch.x)?;
    let z_fake = fuse_arrays(&z_p, &z_v, FusionMode::Concat)?;

    // D phase
    let mut d_loss = f64::NAN;
    for step in 0..cfg.d_steps.max(1) {
        let z_real = sample_uniform_prior(b, z_fake.cols(), rng);
        let mut tape = Tape::new(0);
        let (loss, ids) = tag_component("d_loss", prior_d_loss(&mut tape, &nets.d, &z_fake, &z_real))?;
        d_loss = check_finite("d_loss", tape.value(loss).scalar_value())?;
        if step < cfg.d_steps {
            tape.backward(loss)?;
            let grads = pull_grads(&tape, &ids);
            opts.d.step(&mut nets.d, &grads)?;
        }
    }

    // Q phase
    let mut q_loss = f64::NAN;
    for step in 0..cfg.q_steps.max(1) {
        let mut tape = Tape::new(0);
        let update = step < cfg.q_steps;
        let mode = if update { Mode::Train } else { Mode::Eval };
        let (loss, ids) =
            tag_component("q_loss", q_mle_loss(&mut tape, &mut nets.q, &z_p, &z_v, mode, update))?;
        q_loss = check_finite("q_loss", tape.value(loss).scalar_value())?;
        if update {
            tape.backward(loss)?;
            let grads = pull_grads(&tape, &ids);
            opts.q.step(&mut nets.q, &grads)?;
        }
    }

    // E phase: encoder and both critics update; Q and D stay frozen inside
    // the objective graph
    let mut e_loss = f64::NAN;
    let mut components = BTreeMap::new();
    for step in 0..cfg.e_steps.max(1) {
        let update = step < cfg.e_steps;
        let perm = random_shuffle_perm(b, rng);
        let mut tape = Tape::with_rng(rng.split());
        let mode = if update { Mode::Train } else { Mode::Eval };
        let obj = tag_component(
            "e_loss",
            build_objective(
                &mut tape,
                nets,
                &batch.x,
                &batch.xp,
                &cfg.weights,
                cfg.fusion,
                &perm,
                cfg.saturating_prior,
                mode,
                update,
                update,
            ),
        )?;
        components.clear();
        for (name, &node) in ["mi_x_fused", "mi_pose_pose", "inter", "prior_e"]
            .iter()
            .zip(&obj.terms)
        {
            let v = check_finite(name, tape.value(node).scalar_value())?;
            components.insert((*name).to_string(), v);
        }
        e_loss = check_finite("e_loss", tape.value(obj.e_loss).scalar_value())?;
        if update {
            tape.backward(obj.e_loss)?;
            let enc_grads = pull_grads(&tape, &obj.enc_ids);
            opts.enc.step(&mut nets.enc, &enc_grads)?;
            let cx_grads = pull_grads(&tape, &obj.critic_x_ids);
            opts.critic_x.step(&mut nets.critic_x, &cx_grads)?;
            let cp_grads = pull_grads(&tape, &obj.critic_p_ids);
            opts.critic_p.step(&mut nets.critic_p, &cp_grads)?;
        }
    }

    Ok(LossBundle {
        e_loss,
        q_loss,
        d_loss,
        components,
    })
}

// ── Trainer ──────────────────────────────────────────────────────────

/// Owns all mutable training state; single-threaded by construction.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Nets,
    pub opts: OptStates,
    /// Completed iterations.
    pub iteration: u64,
    /// Stream for batch assembly.
    pub data_rng: Rng,
    /// Stream for prior samples, shuffles, and dropout.
    pub net_rng: Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, net_cfg: NetConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut master = Rng::from_seed(cfg.seed);
        let mut init_rng = master.split();
        let data_rng = master.split();
        let net_rng = master.split();
        let fused_dim = cfg.fusion.width(net_cfg.d);
        let nets = Nets::init(net_cfg, fused_dim, &mut init_rng);
        let opts = OptStates::new(&nets, &cfg);
        Ok(Trainer {
            cfg,
            nets,
            opts,
            iteration: 0,
            data_rng,
            net_rng,
        })
    }

    /// Samples one batch and runs one alternating update.
    pub fn step(&mut self, ds: &MultiViewDataset) -> Result<LossBundle> {
        let batch = sample_training_batch(ds, &self.cfg, &mut self.data_rng)?;
        let bundle = train_iteration(
            &mut self.nets,
            &mut self.opts,
            &batch,
            &self.cfg,
            &mut self.net_rng,
        )?;
        self.iteration += 1;
        Ok(bundle)
    }
}

// ── Cross-reconstruction baseline trainer ────────────────────────────

/// Trains an encoder purely by same- and cross-view reconstruction through
/// a decoder; the learned-representation baseline the main objective is
/// compared against.
#[derive(Debug, Clone)]
pub struct ReconTrainer {
    pub cfg: TrainConfig,
    pub enc: crate::nets::Encoder,
    pub dec: crate::nets::Decoder,
    pub opt_enc: AdaGrad,
    pub opt_dec: AdaGrad,
    pub iteration: u64,
    pub data_rng: Rng,
    pub net_rng: Rng,
}

impl ReconTrainer {
    pub fn new(cfg: TrainConfig, net_cfg: NetConfig) -> Result<ReconTrainer> {
        cfg.validate()?;
        let mut master = Rng::from_seed(cfg.seed);
        let mut init_rng = master.split();
        let data_rng = master.split();
        let net_rng = master.split();
        let enc = crate::nets::Encoder::init(net_cfg, &mut init_rng);
        let dec = crate::nets::Decoder::init(net_cfg, &mut init_rng);
        let opt_enc = AdaGrad::new(&enc, cfg.lr, cfg.adagrad_eps, cfg.adagrad_init_acc);
        let opt_dec = AdaGrad::new(&dec, cfg.lr, cfg.adagrad_eps, cfg.adagrad_init_acc);
        Ok(ReconTrainer {
            cfg,
            enc,
            dec,
            opt_enc,
            opt_dec,
            iteration: 0,
            data_rng,
            net_rng,
        })
    }

    /// One batch, one joint encoder+decoder update. Returns the loss value.
    pub fn step(&mut self, ds: &MultiViewDataset) -> Result<f64> {
        let batch = sample_training_batch(ds, &self.cfg, &mut self.data_rng)?;
        let mut tape = Tape::with_rng(self.net_rng.split());
        let nodes = crate::losses::loss_cross_recon(
            &mut tape,
            &mut self.enc,
            &self.dec,
            &batch.x,
            &batch.xp,
            Mode::Train,
            true,
            true,
        )?;
        let loss = check_finite("recon_loss", tape.value(nodes.loss).scalar_value())?;
        tape.backward(nodes.loss)?;
        let enc_grads = pull_grads(&tape, &nodes.enc_ids);
        self.opt_enc.step(&mut self.enc, &enc_grads)?;
        let dec_grads = pull_grads(&tape, &nodes.dec_ids);
        self.opt_dec.step(&mut self.dec, &dec_grads)?;
        self.iteration += 1;
        Ok(loss)
    }
}

// ── Training log ─────────────────────────────────────────────────────

#[derive(Serialize)]
struct LogRecord<'a> {
    iteration: u64,
    e_loss: f64,
    q_loss: f64,
    d_loss: f64,
    components: &'a BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_ms: Option<f64>,
}

/// One training-log line (JSON, no trailing newline). Field order is fixed;
/// identical runs produce byte-identical lines when timing is off.
pub fn log_line(iteration: u64, bundle: &LossBundle, wall_ms: Option<f64>) -> Result<String> {
    Ok(serde_json::to_string(&LogRecord {
        iteration,
        e_loss: bundle.e_loss,
        q_loss: bundle.q_loss,
        d_loss: bundle.d_loss,
        components: &bundle.components,
        wall_ms,
    })?)
}

/// Runs the trainer up to `target_iteration`, appending one JSON line per
/// iteration to `log` when provided. Returns the final iteration's bundle.
pub fn train_to(
    trainer: &mut Trainer,
    ds: &MultiViewDataset,
    target_iteration: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Option<LossBundle>> {
    let mut last = None;
    while trainer.iteration < target_iteration {
        let t0 = Instant::now();
        let bundle = trainer.step(ds)?;
        let wall = trainer
            .cfg
            .log_timing
            .then(|| t0.elapsed().as_secs_f64() * 1e3);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", log_line(trainer.iteration, &bundle, wall)?)?;
        }
        last = Some(bundle);
    }
    Ok(last)
}
