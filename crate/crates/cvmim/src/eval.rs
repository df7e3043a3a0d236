//! Downstream measurement on frozen embeddings: action classification under
//! fully-supervised and single-shot cross-view protocols, nearest-neighbor
//! retrieval in pose and view spaces, and linear disentanglement probes.

use crate::array::Array2D;
use crate::data::dataset::{MultiViewDataset, Split, FULLY_SUPERVISED};
use crate::data::pose::POSE2D_DIM;
use crate::error::{CvmimError, Result};
use crate::nets::{encoder_forward, he_uniform, xavier_uniform, Encoder, Mode, Net};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::trainer::AdaGrad;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// (sequence id, frame, view id)
pub type EmbedKey = (u64, u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub z_p: Vec<f64>,
    pub z_v: Vec<f64>,
}

/// Per-frame embeddings of every base-view render; immutable once extracted.
#[derive(Debug, Clone)]
pub struct FrozenEmbeddings {
    pub dim: usize,
    pub entries: BTreeMap<EmbedKey, EmbeddingPair>,
}

impl FrozenEmbeddings {
    pub fn get(&self, key: EmbedKey) -> Result<&EmbeddingPair> {
        self.entries
            .get(&key)
            .ok_or_else(|| CvmimError::InvalidArgument(format!("no embedding for key {key:?}")))
    }

    /// Raw-2D-pose baseline: the flattened normalized pose stands in for
    /// both embedding spaces.
    pub fn from_raw_2d(ds: &MultiViewDataset) -> FrozenEmbeddings {
        let mut entries = BTreeMap::new();
        for r in ds.base_renders() {
            let flat = r.pose.flatten().to_vec();
            entries.insert(
                (r.seq, r.frame, r.view),
                EmbeddingPair {
                    z_p: flat.clone(),
                    z_v: flat,
                },
            );
        }
        FrozenEmbeddings {
            dim: POSE2D_DIM,
            entries,
        }
    }

    /// Ground-truth oracle features: flattened 3D joints, identical across
    /// views. Used to audit dataset separability, not as a learned baseline.
    pub fn from_3d(ds: &MultiViewDataset) -> FrozenEmbeddings {
        let mut entries = BTreeMap::new();
        for r in ds.base_renders() {
            let p3 = &ds.sequences[r.seq as usize].frames[r.frame as usize];
            let flat: Vec<f64> = p3.joints.iter().flatten().copied().collect();
            entries.insert(
                (r.seq, r.frame, r.view),
                EmbeddingPair {
                    z_p: flat.clone(),
                    z_v: flat,
                },
            );
        }
        FrozenEmbeddings { dim: 39, entries }
    }
}

/// Runs the frozen encoder over every base-view render in inference mode.
/// The encoder is not mutated: running statistics are read, never updated.
pub fn extract_embeddings(
    enc: &mut Encoder,
    ds: &MultiViewDataset,
) -> Result<FrozenEmbeddings> {
    if enc.cfg.input_dim != POSE2D_DIM {
        return Err(CvmimError::ShapeMismatch {
            op: "extract_embeddings",
            lhs: format!("encoder input {}", enc.cfg.input_dim),
            rhs: format!("pose dim {POSE2D_DIM}"),
        });
    }
    let keys: Vec<EmbedKey> = ds.base_renders().map(|r| (r.seq, r.frame, r.view)).collect();
    if keys.is_empty() {
        return Err(CvmimError::Dataset("dataset has no base renders".into()));
    }
    let mut data = Vec::with_capacity(keys.len() * POSE2D_DIM);
    for r in ds.base_renders() {
        data.extend_from_slice(&r.pose.flatten());
    }
    let x = Array2D::from_vec(keys.len(), POSE2D_DIM, data)?;
    let mut tape = Tape::new(0);
    let xn = tape.constant(x)?;
    let out = encoder_forward(&mut tape, enc, xn, Mode::Eval, false, false)?;
    let z_p = tape.value(out.z_p);
    let z_v = tape.value(out.z_v);
    let d = enc.cfg.d;
    let mut entries = BTreeMap::new();
    for (i, key) in keys.into_iter().enumerate() {
        entries.insert(
            key,
            EmbeddingPair {
                z_p: z_p.row(i).to_vec(),
                z_v: z_v.row(i).to_vec(),
            },
        );
    }
    Ok(FrozenEmbeddings { dim: d, entries })
}

// ── Downstream classifiers ───────────────────────────────────────────

pub const CONV_KERNEL: usize = 7;
pub const CONV_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Softmax regression on the time-averaged z_p.
    Linear,
    /// Two 1D conv layers (kernel 7, stride 2, ReLU, dropout) over the z_p
    /// sequence, global average pooling, softmax.
    TemporalConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub head: HeadKind,
    pub iterations: u64,
    pub lr: f64,
    pub seed: u64,
    pub conv_width: usize,
    pub dropout: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            head: HeadKind::TemporalConv,
            iterations: 300,
            lr: 0.1,
            seed: 0,
            conv_width: 64,
            dropout: 0.5,
        }
    }
}

/// A trained downstream head over frozen per-frame pose embeddings.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub head: HeadKind,
    pub dim: usize,
    pub frames: usize,
    pub classes: usize,
    pub width: usize,
    pub dropout: f64,
    /// Named tensors in forward order.
    pub params: Vec<(String, Array2D)>,
}

impl Net for Classifier {
    fn params(&self) -> crate::nets::NamedParams<'_> {
        self.params.iter().map(|(n, p)| (n.clone(), p)).collect()
    }
    fn params_mut(&mut self) -> crate::nets::NamedParamsMut<'_> {
        self.params
            .iter_mut()
            .map(|(n, p)| (n.clone(), p))
            .collect()
    }
}

fn conv_out_len(t: usize) -> Result<usize> {
    if t < CONV_KERNEL {
        return Err(CvmimError::InvalidArgument(format!(
            "temporal length {t} below the conv kernel {CONV_KERNEL}"
        )));
    }
    Ok((t - CONV_KERNEL) / CONV_STRIDE + 1)
}

impl Classifier {
    pub fn init(
        head: HeadKind,
        dim: usize,
        frames: usize,
        classes: usize,
        cfg: &DownstreamConfig,
        rng: &mut Rng,
    ) -> Result<Classifier> {
        let width = cfg.conv_width;
        let params = match head {
            HeadKind::Linear => vec![
                ("w".to_string(), xavier_uniform(dim, classes, rng)),
                ("b".to_string(), Array2D::zeros(1, classes)),
            ],
            HeadKind::TemporalConv => {
                let t1 = conv_out_len(frames)?;
                conv_out_len(t1)?; // both layers must fit
                vec![
                    ("w1".to_string(), he_uniform(CONV_KERNEL * dim, width, rng)),
                    ("b1".to_string(), Array2D::zeros(1, width)),
                    ("w2".to_string(), he_uniform(CONV_KERNEL * width, width, rng)),
                    ("b2".to_string(), Array2D::zeros(1, width)),
                    ("w3".to_string(), xavier_uniform(width, classes, rng)),
                    ("b3".to_string(), Array2D::zeros(1, classes)),
                ]
            }
        };
        Ok(Classifier {
            head,
            dim,
            frames,
            classes,
            width,
            dropout: cfg.dropout,
            params,
        })
    }

    /// Flattened input width expected by `forward`.
    pub fn input_width(&self) -> usize {
        match self.head {
            HeadKind::Linear => self.dim,
            HeadKind::TemporalConv => self.frames * self.dim,
        }
    }
}

/// One valid-padding conv layer over a time-major (B, t*ch_in) node: each
/// kernel window is a contiguous column slice, so the layer is a bank of
/// shared-weight matmuls.
fn conv1d_layer(
    tape: &mut Tape,
    x: NodeId,
    t: usize,
    ch_in: usize,
    w: NodeId,
    b: NodeId,
) -> Result<(NodeId, usize)> {
    let t_out = conv_out_len(t)?;
    let mut blocks = Vec::with_capacity(t_out);
    for pos in 0..t_out {
        let window = tape.slice_cols(x, pos * CONV_STRIDE * ch_in, CONV_KERNEL * ch_in)?;
        let h = tape.matmul(window, w)?;
        blocks.push(tape.add(h, b)?);
    }
    let mut out = blocks[0];
    for &blk in &blocks[1..] {
        out = tape.concat_cols(out, blk)?;
    }
    Ok((out, t_out))
}

/// Classifier logits for a batch of flattened instances.
pub fn classifier_forward(
    tape: &mut Tape,
    clf: &Classifier,
    ids: &[NodeId],
    x: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    if tape.value(x).cols() != clf.input_width() {
        return Err(CvmimError::ShapeMismatch {
            op: "classifier_forward",
            lhs: tape.value(x).shape_str(),
            rhs: format!("expected width {}", clf.input_width()),
        });
    }
    match clf.head {
        HeadKind::Linear => {
            let h = tape.matmul(x, ids[0])?;
            tape.add(h, ids[1])
        }
        HeadKind::TemporalConv => {
            let (h1, t1) = conv1d_layer(tape, x, clf.frames, clf.dim, ids[0], ids[1])?;
            let mut h1 = tape.relu(h1)?;
            if mode == Mode::Train && clf.dropout > 0.0 {
                h1 = tape.dropout(h1, clf.dropout)?;
            }
            let (h2, t2) = conv1d_layer(tape, h1, t1, clf.width, ids[2], ids[3])?;
            let mut h2 = tape.relu(h2)?;
            if mode == Mode::Train && clf.dropout > 0.0 {
                h2 = tape.dropout(h2, clf.dropout)?;
            }
            // global average pooling over the t2 time blocks
            let mut pooled = tape.slice_cols(h2, 0, clf.width)?;
            for pos in 1..t2 {
                let blk = tape.slice_cols(h2, pos * clf.width, clf.width)?;
                pooled = tape.add(pooled, blk)?;
            }
            let pooled = tape.scalar_mul(pooled, 1.0 / t2 as f64)?;
            let h = tape.matmul(pooled, ids[4])?;
            tape.add(h, ids[5])
        }
    }
}

// ── Instance assembly ────────────────────────────────────────────────

/// Per-(sequence, view) feature row: the z_p sequence, mean-pooled for the
/// linear head and concatenated time-major for the temporal head.
fn instance_row(
    embeds: &FrozenEmbeddings,
    frames: usize,
    seq: u64,
    view: u32,
    head: HeadKind,
) -> Result<Vec<f64>> {
    let d = embeds.dim;
    match head {
        HeadKind::Linear => {
            let mut acc = vec![0.0; d];
            for f in 0..frames {
                let e = embeds.get((seq, f as u32, view))?;
                for (a, v) in acc.iter_mut().zip(&e.z_p) {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a /= frames as f64;
            }
            Ok(acc)
        }
        HeadKind::TemporalConv => {
            let mut out = Vec::with_capacity(frames * d);
            for f in 0..frames {
                out.extend_from_slice(&embeds.get((seq, f as u32, view))?.z_p);
            }
            Ok(out)
        }
    }
}

fn instance_matrix(
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    seqs: &[u64],
    views: &[u32],
    head: HeadKind,
) -> Result<(Array2D, Vec<usize>)> {
    let frames = ds.config.frames;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &seq in seqs {
        for &view in views {
            rows.push(instance_row(embeds, frames, seq, view, head)?);
            labels.push(ds.label_of(seq));
        }
    }
    if rows.is_empty() {
        return Err(CvmimError::Dataset("empty downstream split".into()));
    }
    let cols = rows[0].len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Ok((Array2D::from_vec(labels.len(), cols, data)?, labels))
}

fn onehot(labels: &[usize], k: usize) -> Result<Array2D> {
    let mut m = Array2D::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(CvmimError::InvalidArgument(format!(
                "label {l} outside {k} classes"
            )));
        }
        m.set(i, l, 1.0);
    }
    Ok(m)
}

fn fit_classifier_on(
    x: &Array2D,
    labels: &[usize],
    classes: usize,
    dim: usize,
    frames: usize,
    cfg: &DownstreamConfig,
) -> Result<Classifier> {
    let mut rng = Rng::from_seed(cfg.seed);
    let mut clf = Classifier::init(cfg.head, dim, frames, classes, cfg, &mut rng)?;
    let targets = onehot(labels, classes)?;
    let mut opt = AdaGrad::new(&clf, cfg.lr, 1e-7, 0.1);
    for _ in 0..cfg.iterations {
        let mut tape = Tape::with_rng(rng.split());
        let xn = tape.constant(x.clone())?;
        let tn = tape.constant(targets.clone())?;
        let ids = clf.register(&mut tape, true)?;
        let logits = classifier_forward(&mut tape, &clf, &ids, xn, Mode::Train)?;
        let loss = tape.softmax_xent(logits, tn)?;
        tape.backward(loss)?;
        let grads: Vec<Array2D> = ids.iter().map(|&i| tape.grad(i).clone()).collect();
        opt.step(&mut clf, &grads)?;
    }
    Ok(clf)
}

/// Trains a downstream head on the split's train set; the encoder (already
/// frozen into `embeds`) is untouched.
pub fn fit_downstream(
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    split: &Split,
    cfg: &DownstreamConfig,
) -> Result<Classifier> {
    let (x, labels) = instance_matrix(embeds, ds, &split.train_seqs, &split.train_views, cfg.head)?;
    fit_classifier_on(&x, &labels, ds.config.classes, embeds.dim, ds.config.frames, cfg)
}

/// Label-randomization control: identical training on uniformly shuffled
/// labels; test accuracy must sit at chance.
pub fn fit_downstream_shuffled(
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    split: &Split,
    cfg: &DownstreamConfig,
    rng: &mut Rng,
) -> Result<Classifier> {
    let (x, mut labels) =
        instance_matrix(embeds, ds, &split.train_seqs, &split.train_views, cfg.head)?;
    rng.shuffle(&mut labels);
    fit_classifier_on(&x, &labels, ds.config.classes, embeds.dim, ds.config.frames, cfg)
}

/// Top-1 accuracy of `clf` on the given sequences, rendered from one view.
pub fn classifier_accuracy(
    clf: &Classifier,
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    seqs: &[u64],
    view: u32,
) -> Result<f64> {
    let (x, labels) = instance_matrix(embeds, ds, seqs, &[view], clf.head)?;
    let mut tape = Tape::new(0);
    let xn = tape.constant(x)?;
    let ids = clf.register(&mut tape, false)?;
    let logits = classifier_forward(&mut tape, clf, &ids, xn, Mode::Eval)?;
    let out = tape.value(logits);
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = out.row(i);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .expect("non-empty logits");
        if pred == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

// ── Single-shot cross-view protocol ──────────────────────────────────

/// Rows = train view, cols = test view; the grand average is the headline
/// metric.
#[derive(Debug, Clone, Serialize)]
pub struct AccuracyMatrix {
    pub acc: Vec<Vec<f64>>,
    pub row_avg: Vec<f64>,
    pub grand_avg: f64,
}

impl AccuracyMatrix {
    pub fn diag_avg(&self) -> f64 {
        let n = self.acc.len();
        (0..n).map(|i| self.acc[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diag_avg(&self) -> f64 {
        let n = self.acc.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.acc[i][j];
                }
            }
        }
        s / (n * (n - 1)) as f64
    }
}

/// One classifier per registered single-shot split, each evaluated on every
/// base view's test renders.
pub fn single_shot_protocol(
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    cfg: &DownstreamConfig,
) -> Result<AccuracyMatrix> {
    let v = ds.config.views;
    let mut acc = Vec::with_capacity(v);
    for train_view in 0..v {
        let name = crate::data::dataset::single_shot_name(train_view);
        let split = ds
            .splits
            .get(&name)
            .ok_or_else(|| CvmimError::Dataset(format!("missing split {name}")))?;
        let clf = fit_downstream(embeds, ds, split, cfg)?;
        let mut row = Vec::with_capacity(v);
        for test_view in 0..v {
            row.push(classifier_accuracy(
                &clf,
                embeds,
                ds,
                &split.test_seqs,
                test_view as u32,
            )?);
        }
        acc.push(row);
    }
    let row_avg: Vec<f64> = acc
        .iter()
        .map(|r| r.iter().sum::<f64>() / v as f64)
        .collect();
    let grand_avg = row_avg.iter().sum::<f64>() / v as f64;
    Ok(AccuracyMatrix {
        acc,
        row_avg,
        grand_avg,
    })
}

// ── Retrieval ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pose,
    View,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    Cosine,
}

fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::L2 => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb).max(1e-300)
        }
    }
}

/// k nearest gallery keys by ascending distance in the chosen embedding
/// space. The gallery excludes every frame of the query's own sequence;
/// ties break by key order.
pub fn retrieve_neighbors(
    embeds: &FrozenEmbeddings,
    query: EmbedKey,
    space: Space,
    k: usize,
    metric: Metric,
) -> Result<Vec<(EmbedKey, f64)>> {
    let q = embeds.get(query)?;
    let qv = match space {
        Space::Pose => &q.z_p,
        Space::View => &q.z_v,
    };
    let mut scored: Vec<(EmbedKey, f64)> = embeds
        .entries
        .iter()
        .filter(|(key, _)| key.0 != query.0)
        .map(|(key, e)| {
            let v = match space {
                Space::Pose => &e.z_p,
                Space::View => &e.z_v,
            };
            (*key, distance(qv, v, metric))
        })
        .collect();
    if k >= scored.len() {
        return Err(CvmimError::InvalidArgument(format!(
            "k = {k} not below the gallery size {}",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Top-k retrieval purity over randomly drawn queries: in pose space the
/// fraction of neighbors sharing the query's action class, in view space
/// the fraction sharing its view id.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalStats {
    pub queries: usize,
    pub k: usize,
    pub pose_space_same_action: f64,
    pub view_space_same_view: f64,
}

pub fn retrieval_stats(
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    queries: usize,
    k: usize,
    seed: u64,
) -> Result<RetrievalStats> {
    if queries == 0 {
        return Err(CvmimError::InvalidArgument("at least one query required".into()));
    }
    let keys: Vec<EmbedKey> = embeds.entries.keys().copied().collect();
    let mut rng = Rng::from_seed(seed);
    let mut pose_hits = 0usize;
    let mut view_hits = 0usize;
    for _ in 0..queries {
        let q = keys[rng.gen_index(keys.len())];
        for (key, _) in retrieve_neighbors(embeds, q, Space::Pose, k, Metric::L2)? {
            if ds.label_of(key.0) == ds.label_of(q.0) {
                pose_hits += 1;
            }
        }
        for (key, _) in retrieve_neighbors(embeds, q, Space::View, k, Metric::L2)? {
            if key.2 == q.2 {
                view_hits += 1;
            }
        }
    }
    let n = (queries * k) as f64;
    Ok(RetrievalStats {
        queries,
        k,
        pose_space_same_action: pose_hits as f64 / n,
        view_space_same_view: view_hits as f64 / n,
    })
}

// ── Disentanglement probes ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct DisentanglementReport {
    pub view_from_zv_acc: f64,
    pub view_from_zp_acc: f64,
    pub class_from_zp_acc: f64,
    pub class_from_zv_acc: f64,
}

fn per_frame_probe(
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    split: &Split,
    use_zv: bool,
    label_is_view: bool,
    cfg: &DownstreamConfig,
) -> Result<f64> {
    let v = ds.config.views as u32;
    let gather = |seqs: &[u64]| -> Result<(Array2D, Vec<usize>)> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut n = 0usize;
        for (&(seq, _, view), e) in &embeds.entries {
            if view >= v || !seqs.contains(&seq) {
                continue;
            }
            data.extend_from_slice(if use_zv { &e.z_v } else { &e.z_p });
            labels.push(if label_is_view {
                view as usize
            } else {
                ds.label_of(seq)
            });
            n += 1;
        }
        if n == 0 {
            return Err(CvmimError::Dataset("empty probe split".into()));
        }
        Ok((Array2D::from_vec(n, embeds.dim, data)?, labels))
    };
    let k = if label_is_view {
        ds.config.views
    } else {
        ds.config.classes
    };
    let (train_x, train_y) = gather(&split.train_seqs)?;
    let (test_x, test_y) = gather(&split.test_seqs)?;
    let probe_cfg = DownstreamConfig {
        head: HeadKind::Linear,
        ..cfg.clone()
    };
    let clf = fit_classifier_on(&train_x, &train_y, k, embeds.dim, ds.config.frames, &probe_cfg)?;
    let mut tape = Tape::new(0);
    let xn = tape.constant(test_x)?;
    let ids = clf.register(&mut tape, false)?;
    let logits = classifier_forward(&mut tape, &clf, &ids, xn, Mode::Eval)?;
    let out = tape.value(logits);
    let hits = test_y
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            out.row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                == Some(label)
        })
        .count();
    Ok(hits as f64 / test_y.len() as f64)
}

/// Four per-frame linear probes trained on the fully-supervised split:
/// view id and action class, each decoded from z_v and from z_p.
pub fn probe_disentanglement(
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    cfg: &DownstreamConfig,
) -> Result<DisentanglementReport> {
    let split = ds
        .splits
        .get(FULLY_SUPERVISED)
        .ok_or_else(|| CvmimError::Dataset("missing fully-supervised split".into()))?;
    Ok(DisentanglementReport {
        view_from_zv_acc: per_frame_probe(embeds, ds, split, true, true, cfg)?,
        view_from_zp_acc: per_frame_probe(embeds, ds, split, false, true, cfg)?,
        class_from_zp_acc: per_frame_probe(embeds, ds, split, false, false, cfg)?,
        class_from_zv_acc: per_frame_probe(embeds, ds, split, true, false, cfg)?,
    })
}

// ── Prior-matching diagnostics ───────────────────────────────────────

/// Kolmogorov-Smirnov statistic of a sample against U(0,1):
/// sup over x of |empirical CDF(x) − x|.
pub fn ks_uniform(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(CvmimError::InvalidArgument("KS statistic of empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in sorted.iter().enumerate() {
        // the empirical CDF jumps at v; check both sides of the step
        d = d.max((v - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - v).abs());
    }
    Ok(d)
}

/// Worst per-coordinate KS statistic of z_p concatenated with z_v against
/// U(0,1), computed over the test sequences' base views.
pub fn prior_ks_max(
    embeds: &FrozenEmbeddings,
    ds: &MultiViewDataset,
    test_seqs: &[u64],
) -> Result<f64> {
    let v = ds.config.views as u32;
    let d = embeds.dim;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 2 * d];
    for (&(seq, _, view), e) in &embeds.entries {
        if view >= v || !test_seqs.contains(&seq) {
            continue;
        }
        for (c, &val) in e.z_p.iter().chain(e.z_v.iter()).enumerate() {
            cols[c].push(val);
        }
    }
    let mut worst = 0.0f64;
    for col in &cols {
        worst = worst.max(ks_uniform(col)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{build_dataset, DatasetConfig};
    use crate::nets::NetConfig;

    fn eval_dataset() -> MultiViewDataset {
        build_dataset(&DatasetConfig {
            classes: 4,
            sequences_per_class: 6,
            frames: 24,
            augmentation: false,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    fn quick_cfg(head: HeadKind) -> DownstreamConfig {
        DownstreamConfig {
            head,
            iterations: 150,
            ..DownstreamConfig::default()
        }
    }

    fn encoder_bytes(enc: &Encoder) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, p) in enc.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in &enc.blocks {
            for bn in [&b.bn1, &b.bn2] {
                for v in bn.mean.iter().chain(&bn.var) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    #[test]
    fn extraction_is_deterministic_complete_and_leaves_encoder_untouched() {
        let ds = eval_dataset();
        let mut rng = Rng::from_seed(1);
        let mut enc = Encoder::init(NetConfig::tiny(), &mut rng);
        let before = encoder_bytes(&enc);
        let a = extract_embeddings(&mut enc, &ds).unwrap();
        let b = extract_embeddings(&mut enc, &ds).unwrap();
        assert_eq!(encoder_bytes(&enc), before);
        assert_eq!(a.entries, b.entries);
        let expect = ds.sequences.len() * ds.config.frames * ds.config.views;
        assert_eq!(a.entries.len(), expect);
        for e in a.entries.values() {
            assert!(e.z_p.iter().chain(&e.z_v).all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn extraction_rejects_dimension_mismatch() {
        let ds = eval_dataset();
        let cfg = NetConfig {
            input_dim: 20,
            ..NetConfig::tiny()
        };
        let mut enc = Encoder::init(cfg, &mut Rng::from_seed(1));
        assert!(extract_embeddings(&mut enc, &ds).is_err());
    }

    #[test]
    fn linear_head_separates_ground_truth_3d_features() {
        let ds = eval_dataset();
        let embeds = FrozenEmbeddings::from_3d(&ds);
        let split = &ds.splits[FULLY_SUPERVISED];
        let cfg = DownstreamConfig {
            head: HeadKind::Linear,
            iterations: 400,
            ..DownstreamConfig::default()
        };
        let clf = fit_downstream(&embeds, &ds, split, &cfg).unwrap();
        let mut accs = Vec::new();
        for view in 0..ds.config.views as u32 {
            accs.push(classifier_accuracy(&clf, &embeds, &ds, &split.test_seqs, view).unwrap());
        }
        let avg = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(avg >= 0.95, "3D-feature separability {avg}");
    }

    #[test]
    fn shuffled_labels_sit_at_chance_for_every_head() {
        let ds = eval_dataset();
        let embeds = FrozenEmbeddings::from_raw_2d(&ds);
        let split = &ds.splits[FULLY_SUPERVISED];
        let k = ds.config.classes as f64;
        for head in [HeadKind::Linear, HeadKind::TemporalConv] {
            let mut rng = Rng::from_seed(13);
            let clf =
                fit_downstream_shuffled(&embeds, &ds, split, &quick_cfg(head), &mut rng).unwrap();
            let mut hits = 0.0;
            let mut n = 0.0;
            for view in 0..ds.config.views as u32 {
                let acc =
                    classifier_accuracy(&clf, &embeds, &ds, &split.test_seqs, view).unwrap();
                hits += acc * split.test_seqs.len() as f64;
                n += split.test_seqs.len() as f64;
            }
            let acc = hits / n;
            let chance = 1.0 / k;
            let se = (chance * (1.0 - chance) / n).sqrt();
            assert!(
                (acc - chance).abs() <= 3.0 * se,
                "{head:?}: shuffled-label accuracy {acc} vs chance {chance} (3 s.e. {:.3})",
                3.0 * se
            );
        }
    }

    #[test]
    fn downstream_fit_is_deterministic() {
        let ds = eval_dataset();
        let embeds = FrozenEmbeddings::from_raw_2d(&ds);
        let split = &ds.splits[FULLY_SUPERVISED];
        let cfg = quick_cfg(HeadKind::TemporalConv);
        let a = fit_downstream(&embeds, &ds, split, &cfg).unwrap();
        let b = fit_downstream(&embeds, &ds, split, &cfg).unwrap();
        for ((na, pa), (_, pb)) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.data(), pb.data(), "{na}");
        }
    }

    #[test]
    fn raw_pose_single_shot_matrix_shows_the_view_gap() {
        let ds = eval_dataset();
        let embeds = FrozenEmbeddings::from_raw_2d(&ds);
        let cfg = DownstreamConfig {
            head: HeadKind::Linear,
            iterations: 400,
            ..DownstreamConfig::default()
        };
        let m = single_shot_protocol(&embeds, &ds, &cfg).unwrap();
        assert_eq!(m.acc.len(), 4);
        for (i, row) in m.acc.iter().enumerate() {
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let avg = row.iter().sum::<f64>() / row.len() as f64;
            assert!((m.row_avg[i] - avg).abs() < 1e-12);
        }
        assert!(
            m.diag_avg() > m.off_diag_avg() + 0.15,
            "same-view {:.3} vs cross-view {:.3}",
            m.diag_avg(),
            m.off_diag_avg()
        );
    }

    #[test]
    fn retrieval_contracts_hold() {
        let ds = eval_dataset();
        let embeds = FrozenEmbeddings::from_raw_2d(&ds);
        let query = *embeds.entries.keys().next().unwrap();
        let got = retrieve_neighbors(&embeds, query, Space::Pose, 5, Metric::L2).unwrap();
        assert_eq!(got.len(), 5);
        for w in got.windows(2) {
            assert!(w[0].1 <= w[1].1, "distances must be nondecreasing");
        }
        for (key, _) in &got {
            assert_ne!(key.0, query.0, "same-sequence neighbors are excluded");
        }
        let again = retrieve_neighbors(&embeds, query, Space::Pose, 5, Metric::L2).unwrap();
        assert_eq!(got, again);

        // a duplicate of the query under a foreign sequence id is rank 1 at
        // distance zero
        let mut dup = embeds.clone();
        let pair = dup.entries[&query].clone();
        let fake_key = (u64::MAX, 0, 0);
        dup.entries.insert(fake_key, pair);
        let got = retrieve_neighbors(&dup, query, Space::Pose, 1, Metric::L2).unwrap();
        assert_eq!(got[0].0, fake_key);
        assert_eq!(got[0].1, 0.0);

        let n_gallery = embeds
            .entries
            .keys()
            .filter(|k| k.0 != query.0)
            .count();
        assert!(retrieve_neighbors(&embeds, query, Space::Pose, n_gallery, Metric::L2).is_err());
        assert!(
            retrieve_neighbors(&embeds, (9999, 0, 0), Space::Pose, 1, Metric::L2).is_err(),
            "unknown query key must be rejected"
        );
    }

    #[test]
    fn cosine_metric_is_available_and_scale_blind() {
        let mut embeds = FrozenEmbeddings {
            dim: 2,
            entries: BTreeMap::new(),
        };
        let mk = |z: Vec<f64>| EmbeddingPair {
            z_p: z.clone(),
            z_v: z,
        };
        embeds.entries.insert((0, 0, 0), mk(vec![1.0, 0.0]));
        embeds.entries.insert((1, 0, 0), mk(vec![10.0, 0.0]));
        embeds.entries.insert((2, 0, 0), mk(vec![0.4, 0.6]));
        let got = retrieve_neighbors(&embeds, (0, 0, 0), Space::Pose, 1, Metric::Cosine).unwrap();
        assert_eq!(got[0].0, (1, 0, 0), "parallel vector wins under cosine");
        assert!(got[0].1.abs() < 1e-12);
    }

    #[test]
    fn untrained_encoder_shows_no_disentanglement_asymmetry() {
        // control: a fresh random encoder is a near-linear random sketch of
        // the raw pose, so both embedding spaces carry the same information.
        // Probes stay symmetric across (z_p, z_v) at init; the trained
        // asymmetry (view readable from z_v but suppressed in z_p, and the
        // reverse for class) must come from the objective, not from the
        // probes or the architecture.
        let ds = eval_dataset();
        let view_chance = 1.0 / ds.config.views as f64;
        let class_chance = 1.0 / ds.config.classes as f64;
        let mut sym_view = 0.0;
        let mut sym_class = 0.0;
        let seeds = [2u64, 5, 9];
        for &seed in &seeds {
            let mut enc = Encoder::init(NetConfig::tiny(), &mut Rng::from_seed(seed));
            let embeds = extract_embeddings(&mut enc, &ds).unwrap();
            let r = probe_disentanglement(&embeds, &ds, &quick_cfg(HeadKind::Linear)).unwrap();
            for acc in [
                r.view_from_zv_acc,
                r.view_from_zp_acc,
                r.class_from_zp_acc,
                r.class_from_zv_acc,
            ] {
                assert!((0.0..=1.0).contains(&acc));
            }
            sym_view += (r.view_from_zp_acc - view_chance)
                / (r.view_from_zv_acc - view_chance).max(1e-9);
            sym_class += (r.class_from_zv_acc - class_chance)
                / (r.class_from_zp_acc - class_chance).max(1e-9);
        }
        let n = seeds.len() as f64;
        // both excess ratios hover near 1 at init; the trained model must
        // push the view ratio below 0.5 to pass the disentanglement bound
        assert!(
            sym_view / n > 0.6,
            "untrained view-excess ratio {} unexpectedly asymmetric",
            sym_view / n
        );
        assert!(
            sym_class / n > 0.6,
            "untrained class-excess ratio {} unexpectedly asymmetric",
            sym_class / n
        );
    }

    #[test]
    fn ks_statistic_matches_hand_cases() {
        // single point at 0.5: sup|CDF - x| reached at the jump, D = 0.5
        assert!((ks_uniform(&[0.5]).unwrap() - 0.5).abs() < 1e-15);
        // perfectly spaced midpoints have D = 1/(2n)
        let n = 10;
        let vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!((ks_uniform(&vals).unwrap() - 0.05).abs() < 1e-15);
        // a point mass far from uniform is detected
        assert!(ks_uniform(&vec![0.99; 100]).unwrap() > 0.9);
        assert!(ks_uniform(&[]).is_err());
    }

    #[test]
    fn ks_statistic_small_for_large_uniform_sample() {
        let mut rng = Rng::from_seed(3);
        let vals: Vec<f64> = (0..20_000).map(|_| rng.next_f64()).collect();
        // critical value at alpha = 0.001 is 1.95/sqrt(n) ~ 0.0138
        assert!(ks_uniform(&vals).unwrap() < 0.0138);
    }

    #[test]
    fn conv_head_rejects_short_sequences() {
        let mut rng = Rng::from_seed(0);
        let cfg = DownstreamConfig::default();
        assert!(Classifier::init(HeadKind::TemporalConv, 4, 6, 3, &cfg, &mut rng).is_err());
        // one conv layer fits but the second does not
        assert!(Classifier::init(HeadKind::TemporalConv, 4, 9, 3, &cfg, &mut rng).is_err());
        assert!(Classifier::init(HeadKind::TemporalConv, 4, 19, 3, &cfg, &mut rng).is_ok());
    }
}
