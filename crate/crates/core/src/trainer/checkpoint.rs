//! Checkpoint container ("EPSC"): magic, version byte, then two blocks of
//! named tensors. The first holds the model parameters. The second holds
//! configs, epoch, optimizer moments and the RNG position. Every tensor is
//! `name length (u16), name, rank (u32), dims (u32), f64 payload`, all
//! little-endian. Integers wider than 32 bits are split into exact `u32`
//! chunks, low first.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{AdamState, OptimConfig};
use crate::datagen::Reader;
use crate::error::{Error, Result};
use crate::model::{Branches, EpsilonParams, ModelConfig};
use crate::objective::{LossConfig, RegularizerMode};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPSC";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub params: EpsilonParams,
    pub adam: AdamState,
    pub rng: RngState,
}

fn chunks(x: u128, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((x >> (32 * i)) & 0xffff_ffff) as f64).collect()
}

fn vector(values: Vec<f64>) -> Tensor {
    Tensor::from_vec(values)
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn push_block(out: &mut Vec<u8>, tensors: &[(String, &Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        push_tensor(out, name, t);
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let m = &c.model;
    let o = &c.optim;
    let mut meta: Vec<(String, Tensor)> = vec![
        (
            "meta.model".into(),
            vector(vec![
                m.groups as f64,
                m.token_dim as f64,
                m.num_tokens as f64,
                m.embed_dim as f64,
                m.encoder_layers as f64,
                m.encoder_heads as f64,
                m.mlp_hidden as f64,
                m.branches.code() as f64,
                m.project_kv as u8 as f64,
            ]),
        ),
        (
            "meta.optim".into(),
            vector(
                [
                    vec![
                        o.lr,
                        o.weight_decay,
                        o.beta1,
                        o.beta2,
                        o.eps,
                        o.epochs as f64,
                        o.batch_size as f64,
                        o.halve_at_epoch as f64,
                    ],
                    chunks(o.seed as u128, 2),
                    vec![o.decay_all as u8 as f64],
                ]
                .concat(),
            ),
        ),
        (
            "meta.loss".into(),
            vector(vec![
                c.loss.lambda,
                match c.loss.regularizer {
                    RegularizerMode::PerRow => 0.0,
                    RegularizerMode::PerDimension => 1.0,
                },
            ]),
        ),
        ("meta.epoch".into(), vector(chunks(c.epoch as u128, 2))),
        ("adam.t".into(), vector(chunks(c.adam.t as u128, 2))),
    ];
    let names: Vec<String> = c.params.named().into_iter().map(|(n, _)| n).collect();
    for (n, t) in names.iter().zip(&c.adam.m) {
        meta.push((format!("adam.m.{n}"), t.clone()));
    }
    for (n, t) in names.iter().zip(&c.adam.v) {
        meta.push((format!("adam.v.{n}"), t.clone()));
    }
    let seed: Vec<f64> = c
        .rng
        .seed
        .chunks(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    meta.push(("rng.seed".into(), vector(seed)));
    meta.push(("rng.stream".into(), vector(chunks(c.rng.stream as u128, 2))));
    meta.push(("rng.word_pos".into(), vector(chunks(c.rng.word_pos, 4))));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    let params: Vec<(String, &Tensor)> = c.params.named();
    push_block(&mut out, &params);
    let meta_refs: Vec<(String, &Tensor)> = meta.iter().map(|(n, t)| (n.clone(), t)).collect();
    push_block(&mut out, &meta_refs);
    out
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let at = r.pos;
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::parse(r.path, format!("tensor name at offset {at} is not UTF-8")))?
        .to_string();
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::parse(r.path, format!("tensor {name:?} has rank {rank} at offset {at}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = r.u32()? as usize;
        numel = numel
            .checked_mul(d)
            .filter(|&n| d > 0 && n <= r.bytes.len())
            .ok_or_else(|| Error::parse(r.path, format!("bad dims for tensor {name:?} at offset {}", r.pos)))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f64()?);
    }
    Ok((name, Tensor::new(shape, data)?))
}

fn read_block(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        out.push(read_tensor(r)?);
    }
    Ok(out)
}

struct Meta<'a> {
    path: &'a Path,
    map: HashMap<String, Tensor>,
}

impl Meta<'_> {
    fn take(&mut self, name: &str, len: Option<usize>) -> Result<Tensor> {
        let t = self
            .map
            .remove(name)
            .ok_or_else(|| Error::parse(self.path, format!("checkpoint lacks {name:?}")))?;
        if let Some(n) = len {
            if t.shape() != [n] {
                return Err(Error::parse(
                    self.path,
                    format!("{name:?} has shape {:?}, expected [{n}]", t.shape()),
                ));
            }
        }
        Ok(t)
    }

    fn uint(&self, values: &[f64], what: &str) -> Result<u128> {
        let mut x: u128 = 0;
        for (i, &v) in values.iter().enumerate() {
            if !(v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0) {
                return Err(Error::parse(self.path, format!("{what} holds a non-integer chunk {v}")));
            }
            x |= (v as u128) << (32 * i);
        }
        Ok(x)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "bad magic at offset 0"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::parse(path, format!("unsupported checkpoint version {version} at offset 4")));
    }
    let stored = read_block(&mut r)?;
    let trailing = read_block(&mut r)?;
    if !r.at_end() {
        return Err(Error::parse(path, format!("trailing bytes at offset {}", r.pos)));
    }
    let mut meta = Meta {
        path,
        map: trailing.into_iter().collect(),
    };

    let mv = meta.take("meta.model", Some(9))?;
    let mv = mv.data();
    let usize_at = |i: usize| mv[i] as usize;
    let model = ModelConfig {
        groups: usize_at(0),
        token_dim: usize_at(1),
        num_tokens: usize_at(2),
        embed_dim: usize_at(3),
        encoder_layers: usize_at(4),
        encoder_heads: usize_at(5),
        mlp_hidden: usize_at(6),
        branches: Branches::from_code(mv[7] as u32)
            .ok_or_else(|| Error::parse(path, format!("unknown branch code {}", mv[7])))?,
        project_kv: mv[8] != 0.0,
    };
    model.validate()?;

    let ov = meta.take("meta.optim", Some(11))?;
    let ov = ov.data();
    let optim = OptimConfig {
        lr: ov[0],
        weight_decay: ov[1],
        beta1: ov[2],
        beta2: ov[3],
        eps: ov[4],
        epochs: ov[5] as usize,
        batch_size: ov[6] as usize,
        halve_at_epoch: ov[7] as usize,
        seed: meta.uint(&ov[8..10], "optimizer seed")? as u64,
        decay_all: ov[10] != 0.0,
    };

    let lv = meta.take("meta.loss", Some(2))?;
    let loss = LossConfig {
        lambda: lv.data()[0],
        regularizer: match lv.data()[1] {
            0.0 => RegularizerMode::PerRow,
            1.0 => RegularizerMode::PerDimension,
            other => return Err(Error::parse(path, format!("unknown regularizer code {other}"))),
        },
    };
    let ev = meta.take("meta.epoch", Some(2))?;
    let epoch = meta.uint(ev.data(), "epoch")? as usize;
    let tv = meta.take("adam.t", Some(2))?;
    let t = meta.uint(tv.data(), "step counter")? as u64;

    let template = EpsilonParams::zeros(&model)?;
    let expected = template.named();
    if stored.len() != expected.len() {
        return Err(Error::parse(
            path,
            format!("{} parameter tensors stored, model needs {}", stored.len(), expected.len()),
        ));
    }
    let mut leaves = Vec::with_capacity(stored.len());
    let mut m = Vec::with_capacity(stored.len());
    let mut v = Vec::with_capacity(stored.len());
    for ((name, t), (want, shape)) in stored.into_iter().zip(&expected) {
        if &name != want || t.shape() != shape.shape() {
            return Err(Error::parse(
                path,
                format!("parameter {name:?} {:?} where {want:?} {:?} was expected", t.shape(), shape.shape()),
            ));
        }
        for (prefix, out) in [("adam.m", &mut m), ("adam.v", &mut v)] {
            let moment = meta.take(&format!("{prefix}.{name}"), None)?;
            if moment.shape() != t.shape() {
                return Err(Error::parse(path, format!("{prefix}.{name} has shape {:?}", moment.shape())));
            }
            out.push(moment);
        }
        leaves.push(t);
    }
    let params = template.with_leaves(leaves)?;

    let sv = meta.take("rng.seed", Some(8))?;
    let mut seed = [0u8; 32];
    for (i, &x) in sv.data().iter().enumerate() {
        let word = meta.uint(&[x], "rng seed")? as u32;
        seed[4 * i..4 * i + 4].copy_from_slice(&word.to_le_bytes());
    }
    let st = meta.take("rng.stream", Some(2))?;
    let stream = meta.uint(st.data(), "rng stream")? as u64;
    let wp = meta.take("rng.word_pos", Some(4))?;
    let word_pos = meta.uint(wp.data(), "rng position")?;
    if let Some(extra) = meta.map.keys().min() {
        return Err(Error::parse(path, format!("unexpected checkpoint entry {extra:?}")));
    }
    Ok(Checkpoint {
        model,
        optim,
        loss,
        epoch,
        params,
        adam: AdamState { m, v, t },
        rng: RngState { seed, stream, word_pos },
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(c)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
