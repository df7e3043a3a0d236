//! Checkpoint persistence: a JSON manifest (shapes, offsets, config echo,
//! PRNG states as hex) plus one little-endian float64 blob. The layout is
//! chosen so that save -> load -> save is byte-identical and resumed
//! training matches unbroken training bit for bit.

use super::{Trainer, TrainConfig};
use crate::array::Array2D;
use crate::error::{CvmimError, Result};
use crate::nets::{Net, NetConfig, Nets};
use crate::rng::Rng;
use crate::tape::BnState;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    net_config: NetConfig,
    train_config: TrainConfig,
    iteration: u64,
    data_rng: String,
    net_rng: String,
    blob_len: u64,
    tensors: Vec<TensorMeta>,
}

fn net_list(nets: &Nets) -> Vec<(&'static str, &dyn Net)> {
    vec![
        ("enc", &nets.enc),
        ("q", &nets.q),
        ("d", &nets.d),
        ("critic_x", &nets.critic_x),
        ("critic_p", &nets.critic_p),
    ]
}

fn bn_list(nets: &Nets) -> Vec<(String, &BnState)> {
    vec![
        ("bn.enc.0".into(), &nets.enc.blocks[0].bn1),
        ("bn.enc.1".into(), &nets.enc.blocks[0].bn2),
        ("bn.enc.2".into(), &nets.enc.blocks[1].bn1),
        ("bn.enc.3".into(), &nets.enc.blocks[1].bn2),
        ("bn.q".into(), &nets.q.bn),
    ]
}

fn bn_list_mut(nets: &mut Nets) -> Vec<(String, &mut BnState)> {
    let (b0, b1) = nets.enc.blocks.split_at_mut(1);
    vec![
        ("bn.enc.0".into(), &mut b0[0].bn1),
        ("bn.enc.1".into(), &mut b0[0].bn2),
        ("bn.enc.2".into(), &mut b1[0].bn1),
        ("bn.enc.3".into(), &mut b1[0].bn2),
        ("bn.q".into(), &mut nets.q.bn),
    ]
}

/// Every persisted tensor in canonical order: network parameters, batch-norm
/// running statistics, then optimizer accumulators.
fn collect_tensors(trainer: &Trainer) -> Vec<(String, Array2D)> {
    let mut out = Vec::new();
    for (prefix, net) in net_list(&trainer.nets) {
        for (name, p) in net.params() {
            out.push((format!("nets.{prefix}.{name}"), p.clone()));
        }
    }
    for (name, bn) in bn_list(&trainer.nets) {
        let n = bn.mean.len();
        out.push((
            format!("{name}.mean"),
            Array2D::from_vec(1, n, bn.mean.clone()).expect("bn length"),
        ));
        out.push((
            format!("{name}.var"),
            Array2D::from_vec(1, n, bn.var.clone()).expect("bn length"),
        ));
    }
    let opts = [
        ("enc", &trainer.opts.enc),
        ("q", &trainer.opts.q),
        ("d", &trainer.opts.d),
        ("critic_x", &trainer.opts.critic_x),
        ("critic_p", &trainer.opts.critic_p),
    ];
    for ((prefix, net), (oprefix, opt)) in net_list(&trainer.nets).into_iter().zip(opts) {
        debug_assert_eq!(prefix, oprefix);
        for ((name, _), acc) in net.params().into_iter().zip(&opt.acc) {
            out.push((format!("opt.{prefix}.{name}"), acc.clone()));
        }
    }
    out
}

fn copy_into(dst: &mut Array2D, name: &str, src: &Array2D) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(CvmimError::Checkpoint(format!(
            "tensor {name}: stored shape {} but expected {}",
            src.shape_str(),
            dst.shape_str()
        )));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

fn take<'a>(map: &'a BTreeMap<String, Array2D>, name: &str) -> Result<&'a Array2D> {
    map.get(name)
        .ok_or_else(|| CvmimError::Checkpoint(format!("missing tensor {name}")))
}

/// Writes every tensor from `map` into the trainer, validating shapes.
fn assign_tensors(trainer: &mut Trainer, map: &BTreeMap<String, Array2D>) -> Result<()> {
    let prefixes = ["enc", "q", "d", "critic_x", "critic_p"];
    let nets: [&mut dyn Net; 5] = [
        &mut trainer.nets.enc,
        &mut trainer.nets.q,
        &mut trainer.nets.d,
        &mut trainer.nets.critic_x,
        &mut trainer.nets.critic_p,
    ];
    let mut param_names: Vec<Vec<String>> = Vec::new();
    for (prefix, net) in prefixes.iter().zip(nets) {
        let mut names = Vec::new();
        for (name, p) in net.params_mut() {
            copy_into(p, &format!("nets.{prefix}.{name}"), take(map, &format!("nets.{prefix}.{name}"))?)?;
            names.push(name);
        }
        param_names.push(names);
    }
    for (name, bn) in bn_list_mut(&mut trainer.nets) {
        let mean = take(map, &format!("{name}.mean"))?;
        let var = take(map, &format!("{name}.var"))?;
        if mean.len() != bn.mean.len() || var.len() != bn.var.len() {
            return Err(CvmimError::Checkpoint(format!(
                "batch-norm state {name} width mismatch"
            )));
        }
        bn.mean.copy_from_slice(mean.data());
        bn.var.copy_from_slice(var.data());
    }
    let opts: [&mut super::AdaGrad; 5] = [
        &mut trainer.opts.enc,
        &mut trainer.opts.q,
        &mut trainer.opts.d,
        &mut trainer.opts.critic_x,
        &mut trainer.opts.critic_p,
    ];
    for ((prefix, names), opt) in prefixes.iter().zip(&param_names).zip(opts) {
        if names.len() != opt.acc.len() {
            return Err(CvmimError::Checkpoint(format!(
                "optimizer for {prefix} has {} accumulators for {} params",
                opt.acc.len(),
                names.len()
            )));
        }
        for (name, acc) in names.iter().zip(&mut opt.acc) {
            copy_into(acc, &format!("opt.{prefix}.{name}"), take(map, &format!("opt.{prefix}.{name}"))?)?;
        }
    }
    Ok(())
}

/// Saves the complete training state into `dir` as `manifest.json` plus
/// `params.bin`. Both files are written to temporaries first and renamed, so
/// an interrupted save never leaves a half-written checkpoint in place.
pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tensors = collect_tensors(trainer);
    let mut blob: Vec<u8> = Vec::new();
    let mut metas = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        metas.push(TensorMeta {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        net_config: trainer.nets.cfg,
        train_config: trainer.cfg.clone(),
        iteration: trainer.iteration,
        data_rng: trainer.data_rng.state_hex(),
        net_rng: trainer.net_rng.state_hex(),
        blob_len: blob.len() as u64,
        tensors: metas,
    };

    let blob_tmp = dir.join(format!("{PARAMS_FILE}.tmp"));
    fs::write(&blob_tmp, &blob)?;
    fs::rename(&blob_tmp, dir.join(PARAMS_FILE))?;
    let manifest_tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&manifest_tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&manifest_tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

/// Loads a checkpoint into a freshly constructed trainer. All validation
/// happens before any state is returned, so a rejected load never yields a
/// partially mutated trainer.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CvmimError::Checkpoint(format!(
            "format version {} but this build reads version {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    if blob.len() as u64 != manifest.blob_len {
        return Err(CvmimError::Checkpoint(format!(
            "params blob is {} bytes but the manifest records {}; truncated or corrupted",
            blob.len(),
            manifest.blob_len
        )));
    }

    let mut trainer = Trainer::new(manifest.train_config.clone(), manifest.net_config)?;

    // the manifest must describe exactly the tensor table this build expects
    let expected = collect_tensors(&trainer);
    if expected.len() != manifest.tensors.len() {
        return Err(CvmimError::Checkpoint(format!(
            "{} tensors stored but {} expected",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut map = BTreeMap::new();
    let mut offset = 0u64;
    for ((name, t), meta) in expected.iter().zip(&manifest.tensors) {
        if meta.name != *name || meta.rows != t.rows() || meta.cols != t.cols() {
            return Err(CvmimError::Checkpoint(format!(
                "tensor mismatch: stored {} [{}x{}], expected {} [{}]",
                meta.name,
                meta.rows,
                meta.cols,
                name,
                t.shape_str()
            )));
        }
        if meta.offset != offset {
            return Err(CvmimError::Checkpoint(format!(
                "tensor {} at offset {} but {} expected",
                meta.name, meta.offset, offset
            )));
        }
        let bytes = meta.rows * meta.cols * 8;
        let end = offset as usize + bytes;
        let data: Vec<f64> = blob[offset as usize..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        map.insert(
            name.clone(),
            Array2D::from_vec(meta.rows, meta.cols, data)?,
        );
        offset = end as u64;
    }
    if offset != manifest.blob_len {
        return Err(CvmimError::Checkpoint(format!(
            "tensor table covers {offset} bytes but the blob holds {}",
            manifest.blob_len
        )));
    }

    assign_tensors(&mut trainer, &map)?;
    trainer.iteration = manifest.iteration;
    trainer.data_rng = Rng::from_state_hex(&manifest.data_rng)
        .ok_or_else(|| CvmimError::Checkpoint("malformed data_rng state".into()))?;
    trainer.net_rng = Rng::from_state_hex(&manifest.net_rng)
        .ok_or_else(|| CvmimError::Checkpoint("malformed net_rng state".into()))?;
    Ok(trainer)
}
