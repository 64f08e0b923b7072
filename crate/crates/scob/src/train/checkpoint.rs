//! Checkpoint format: full training state, bit-exact.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    8   b"SCOBCKPT"
//! version  u16 (currently 1)
//! config   len-prefixed UTF-8 key=value block
//! epoch    u32
//! t        u64
//! online   parameter table
//! target   parameter table
//! estimator: n u32, L u32, ids u32*, logits/m/v f64*, row_steps u64*
//! forest:  classes u32, capacity u32, per tree: len u32,
//!          per node: class u32, sample_id u32, confidence f64,
//!          feat_len u32, feature f64*
//! rng:     seed [u8;32], stream u64, word_pos u128 (two u64, low then high)
//!
//! parameter table: count u32, then per parameter:
//!   name len u16 + bytes, rank u8 + dims u32*, steps u64,
//!   values f64*, m f64*, v f64*
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, ScobError};
use crate::ipt::{IptForest, IptNode};
use crate::losses::EstimatorMatrix;
use crate::nn::{Param, ParamSet};
use crate::rng::RngState;

pub const MAGIC: [u8; 8] = *b"SCOBCKPT";
pub const VERSION: u16 = 1;

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub config_text: String,
    pub epoch: u32,
    pub t: u64,
    pub online: ParamSet,
    pub target: ParamSet,
    pub estimator: EstimatorMatrix,
    pub forest_capacity: u32,
    pub forest_nodes: Vec<Vec<IptNode>>,
    pub rng: RngState,
}

fn w_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w_f64(w, *v)?;
    }
    Ok(())
}

fn r_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
fn r_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn write_params(w: &mut impl Write, ps: &ParamSet) -> Result<()> {
    w_u32(w, ps.len() as u32)?;
    for (name, p) in ps.iter() {
        w_u16(w, name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[p.shape.len() as u8])?;
        for &d in &p.shape {
            w_u32(w, d as u32)?;
        }
        w_u64(w, p.steps)?;
        w_f64s(w, &p.values)?;
        w_f64s(w, &p.m)?;
        w_f64s(w, &p.v)?;
    }
    Ok(())
}

fn read_params(r: &mut impl Read) -> Result<ParamSet> {
    let count = r_u32(r)? as usize;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let nlen = r_u16(r)? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| ScobError::Format("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(r_u32(r)? as usize);
        }
        let steps = r_u64(r)?;
        let n: usize = shape.iter().product();
        let values = r_f64s(r, n)?;
        let m = r_f64s(r, n)?;
        let v = r_f64s(r, n)?;
        let mut p = Param::new(shape, values);
        p.m = m;
        p.v = v;
        p.steps = steps;
        ps.insert(&name, p);
    }
    Ok(ps)
}

pub fn save_checkpoint(data: &CheckpointData, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w_u16(&mut w, VERSION)?;
    let cfg = data.config_text.as_bytes();
    w_u32(&mut w, cfg.len() as u32)?;
    w.write_all(cfg)?;
    w_u32(&mut w, data.epoch)?;
    w_u64(&mut w, data.t)?;
    write_params(&mut w, &data.online)?;
    write_params(&mut w, &data.target)?;

    let est = &data.estimator;
    w_u32(&mut w, est.num_samples as u32)?;
    w_u32(&mut w, est.num_classes as u32)?;
    for &id in &est.sample_ids {
        w_u32(&mut w, id)?;
    }
    w_f64s(&mut w, &est.logits)?;
    w_f64s(&mut w, &est.m)?;
    w_f64s(&mut w, &est.v)?;
    for &s in &est.row_steps {
        w_u64(&mut w, s)?;
    }

    w_u32(&mut w, data.forest_nodes.len() as u32)?;
    w_u32(&mut w, data.forest_capacity)?;
    for tree in &data.forest_nodes {
        w_u32(&mut w, tree.len() as u32)?;
        for node in tree {
            w_u32(&mut w, node.class as u32)?;
            w_u32(&mut w, node.sample_id)?;
            w_f64(&mut w, node.confidence)?;
            w_u32(&mut w, node.feature.len() as u32)?;
            w_f64s(&mut w, &node.feature)?;
        }
    }

    w.write_all(&data.rng.seed)?;
    w_u64(&mut w, data.rng.stream)?;
    w_u64(&mut w, data.rng.word_pos as u64)?;
    w_u64(&mut w, (data.rng.word_pos >> 64) as u64)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(ScobError::Format("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = r_u16(&mut r)?;
    if version != VERSION {
        return Err(ScobError::Format(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let clen = r_u32(&mut r)? as usize;
    let mut cb = vec![0u8; clen];
    r.read_exact(&mut cb)?;
    let config_text =
        String::from_utf8(cb).map_err(|_| ScobError::Format("config block is not UTF-8".into()))?;
    let epoch = r_u32(&mut r)?;
    let t = r_u64(&mut r)?;
    let online = read_params(&mut r)?;
    let target = read_params(&mut r)?;

    let n = r_u32(&mut r)? as usize;
    let l = r_u32(&mut r)? as usize;
    let mut sample_ids = Vec::with_capacity(n);
    for _ in 0..n {
        sample_ids.push(r_u32(&mut r)?);
    }
    let logits = r_f64s(&mut r, n * l)?;
    let m = r_f64s(&mut r, n * l)?;
    let v = r_f64s(&mut r, n * l)?;
    let mut row_steps = Vec::with_capacity(n);
    for _ in 0..n {
        row_steps.push(r_u64(&mut r)?);
    }
    let estimator = EstimatorMatrix {
        num_samples: n,
        num_classes: l,
        sample_ids,
        logits,
        m,
        v,
        row_steps,
    };

    let classes = r_u32(&mut r)? as usize;
    let forest_capacity = r_u32(&mut r)?;
    let mut forest_nodes = Vec::with_capacity(classes);
    for _ in 0..classes {
        let len = r_u32(&mut r)? as usize;
        let mut tree = Vec::with_capacity(len);
        for _ in 0..len {
            let class = r_u32(&mut r)? as usize;
            let sample_id = r_u32(&mut r)?;
            let confidence = r_f64(&mut r)?;
            let flen = r_u32(&mut r)? as usize;
            let feature = r_f64s(&mut r, flen)?;
            tree.push(IptNode {
                class,
                feature,
                confidence,
                sample_id,
            });
        }
        forest_nodes.push(tree);
    }

    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let stream = r_u64(&mut r)?;
    let lo = r_u64(&mut r)? as u128;
    let hi = r_u64(&mut r)? as u128;
    let rng = RngState {
        seed,
        stream,
        word_pos: lo | (hi << 64),
    };
    Ok(CheckpointData {
        config_text,
        epoch,
        t,
        online,
        target,
        estimator,
        forest_capacity,
        forest_nodes,
        rng,
    })
}

/// Rebuild a forest from raw node arrays, preserving the stored heap
/// array order exactly.
pub fn forest_from_nodes(nodes: Vec<Vec<IptNode>>, capacity: usize) -> IptForest {
    let mut forest = IptForest::new(nodes.len(), capacity);
    for (c, tree_nodes) in nodes.into_iter().enumerate() {
        forest.tree_mut(c).restore_nodes(tree_nodes);
    }
    forest
}
