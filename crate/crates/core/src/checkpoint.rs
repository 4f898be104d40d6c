//! HCP1 parameter checkpoint container.
//!
//! Layout: magic `HCP1`, little-endian u32 entry count, then per entry a
//! length-prefixed name, a u32 rank plus u32 dims, and a float32 payload.
//! Names follow `<component>/<layer>/<weight|bias>` with components
//! `enc.<domain_id>`, `trunk`, and `head.<domain_id>`; the full network
//! structure is recovered from the names and shapes alone.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::cdnet::{ArchConfig, CdcnnParams, ConvParams, EncoderParams, ResModule, TrunkParams};
use crate::error::{Error, Result};
use crate::tensorops::{LrGroup, ParamTensor, Scalar};

const MAGIC: &[u8; 4] = b"HCP1";

/// One named tensor as stored on disk.
#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

/// Write all parameter values (not gradients or momentum) to `path`.
pub fn save_checkpoint<S: Scalar>(params: &CdcnnParams<S>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let tensors = params.params();
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for pt in tensors {
        w.write_u32::<LittleEndian>(pt.name.len() as u32).map_err(io)?;
        w.write_all(pt.name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(pt.shape.len() as u32).map_err(io)?;
        for &d in &pt.shape {
            w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        for &v in &pt.value {
            w.write_f32::<LittleEndian>(v.to_f64() as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read the raw entry list of an HCP1 file.
pub fn read_checkpoint_entries(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::format(
            format!("bad checkpoint magic {magic:?}, expected \"HCP1\""),
            Some(0),
        ));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("non-utf8 tensor name", None))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(io)?);
        }
        let numel: usize = shape.iter().map(|&d| d as usize).product();
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("checkpoint tensor `{name}`"),
                index: Some(idx),
            });
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(entries)
}

fn tensor_from_entry<S: Scalar>(entry: &CheckpointEntry, lr_group: LrGroup) -> ParamTensor<S> {
    let mut pt = ParamTensor::zeros(
        entry.name.clone(),
        entry.shape.iter().map(|&d| d as usize).collect(),
        lr_group,
        entry.name.ends_with("/weight"),
    );
    for (v, &f) in pt.value.iter_mut().zip(entry.data.iter()) {
        *v = S::from_f64(f64::from(f));
    }
    pt
}

fn conv_from<S: Scalar>(
    map: &BTreeMap<String, CheckpointEntry>,
    base: &str,
    lr_group: LrGroup,
) -> Result<ConvParams<S>> {
    let weight = map
        .get(&format!("{base}/weight"))
        .ok_or_else(|| Error::format(format!("checkpoint misses `{base}/weight`"), None))?;
    let bias = map
        .get(&format!("{base}/bias"))
        .ok_or_else(|| Error::format(format!("checkpoint misses `{base}/bias`"), None))?;
    if weight.shape.len() != 4 {
        return Err(Error::shape(
            format!("checkpoint tensor `{base}/weight` rank"),
            4,
            weight.shape.len(),
        ));
    }
    let (c_out, c_in, kh, kw) = (
        weight.shape[0] as usize,
        weight.shape[1] as usize,
        weight.shape[2] as usize,
        weight.shape[3] as usize,
    );
    if kh != kw {
        return Err(Error::format(
            format!("checkpoint tensor `{base}/weight` is not square ({kh}x{kw})"),
            None,
        ));
    }
    if bias.shape != vec![c_out as u32] {
        return Err(Error::shape(
            format!("checkpoint tensor `{base}/bias`"),
            c_out,
            bias.data.len(),
        ));
    }
    Ok(ConvParams {
        weight: tensor_from_entry(weight, lr_group),
        bias: tensor_from_entry(bias, lr_group),
        c_out,
        c_in,
        k: kh,
    })
}

/// Rebuild a full parameter set from checkpoint entries. Gradient and
/// momentum buffers start zeroed; learning-rate groups follow the component
/// naming (trunk shared, encoders and heads domain-specific).
pub fn params_from_entries<S: Scalar>(entries: &[CheckpointEntry]) -> Result<CdcnnParams<S>> {
    let map: BTreeMap<String, CheckpointEntry> = entries
        .iter()
        .map(|e| (e.name.clone(), e.clone()))
        .collect();

    let mut enc_ids = Vec::new();
    let mut head_ids = Vec::new();
    let mut n_res = 0usize;
    for name in map.keys() {
        if let Some(rest) = name.strip_prefix("enc.") {
            if let Some(id) = rest.split('/').next() {
                if !enc_ids.contains(&id.to_string()) {
                    enc_ids.push(id.to_string());
                }
            }
        } else if let Some(rest) = name.strip_prefix("head.") {
            if let Some(id) = rest.split('/').next() {
                if !head_ids.contains(&id.to_string()) {
                    head_ids.push(id.to_string());
                }
            }
        } else if let Some(rest) = name.strip_prefix("trunk/r") {
            if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
                n_res = n_res.max(idx + 1);
            }
        }
    }
    if enc_ids.is_empty() {
        return Err(Error::format("checkpoint contains no encoders", None));
    }

    let multiscale = map.contains_key(&format!("enc.{}/c1.b1/weight", enc_ids[0]));

    let mut encoders = BTreeMap::new();
    for id in &enc_ids {
        let enc = if multiscale {
            EncoderParams::Multiscale {
                b1: conv_from(&map, &format!("enc.{id}/c1.b1"), LrGroup::DomainSpecific)?,
                b3: conv_from(&map, &format!("enc.{id}/c1.b3"), LrGroup::DomainSpecific)?,
                b5: conv_from(&map, &format!("enc.{id}/c1.b5"), LrGroup::DomainSpecific)?,
                fuse: conv_from(&map, &format!("enc.{id}/c2"), LrGroup::DomainSpecific)?,
            }
        } else {
            EncoderParams::Single(conv_from(
                &map,
                &format!("enc.{id}/c1"),
                LrGroup::DomainSpecific,
            )?)
        };
        encoders.insert(id.clone(), enc);
    }

    let mut res_modules = Vec::with_capacity(n_res);
    for i in 0..n_res {
        res_modules.push(ResModule {
            conv1: conv_from(&map, &format!("trunk/r{i}.1"), LrGroup::Shared)?,
            conv2: conv_from(&map, &format!("trunk/r{i}.2"), LrGroup::Shared)?,
        });
    }
    let c3 = conv_from(&map, "trunk/c3", LrGroup::Shared)?;
    let c4 = conv_from(&map, "trunk/c4", LrGroup::Shared)?;
    let channels = c3.c_out;

    let mut heads = BTreeMap::new();
    for id in &head_ids {
        heads.insert(
            id.clone(),
            conv_from(&map, &format!("head.{id}/c5"), LrGroup::DomainSpecific)?,
        );
    }

    let encoder_kernel = match encoders.values().next() {
        Some(EncoderParams::Single(c)) => c.k,
        _ => 5,
    };
    // input_scale is not stored in the container; reconstruction assumes the
    // default and callers with a non-default gain must restore it themselves.
    let arch = ArchConfig {
        channels,
        encoder_kernel,
        encoder_pad: 2,
        n_res_modules: n_res,
        multiscale_encoder: multiscale,
        input_scale: ArchConfig::default().input_scale,
    };
    arch.validate()?;

    Ok(CdcnnParams {
        arch,
        encoders,
        trunk: TrunkParams {
            res_modules,
            c3,
            c4,
        },
        heads,
    })
}

/// Load a checkpoint and rebuild the parameter set.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<CdcnnParams<S>> {
    params_from_entries(&read_checkpoint_entries(path)?)
}
