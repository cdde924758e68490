//! Single-file archives of named `f64` arrays with a JSON header.
//!
//! Layout: 8-byte magic `FGIARCH1`, little-endian `u64` header length, the
//! UTF-8 JSON header, then every array's elements as little-endian `f64` in
//! standard (row-major) order. The header lists each array's name, shape and
//! element offset alongside caller metadata under `meta`.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{CriticSpec, GeneratorSpec, NetParams, ParamSet};
use crate::optim::AdamState;

const MAGIC: &[u8; 8] = b"FGIARCH1";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

pub fn write_archive(path: &Path, meta: &serde_json::Value, arrays: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut offset = 0;
    let entries = arrays
        .iter()
        .map(|(name, a)| {
            let e = ArrayEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
                offset,
            };
            offset += a.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&RawHeader {
        meta: meta.clone(),
        arrays: entries,
    })?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for a in arrays.values() {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, ArrayD<f64>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not an array archive", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: RawHeader = serde_json::from_slice(&header)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    let total: usize = header.arrays.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if rest.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: payload holds {} bytes, header describes {}",
            path.display(),
            rest.len(),
            total * 8
        )));
    }
    let mut arrays = BTreeMap::new();
    for e in header.arrays {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = rest[e.offset * 8..(e.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let a = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| Error::Checkpoint(format!("array `{}`: {err}", e.name)))?;
        arrays.insert(e.name, a);
    }
    Ok((header.meta, arrays))
}

/// Training-state metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    /// Free-form extras (running loss averages and the like).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    gspec: GeneratorSpec,
    cspec: CriticSpec,
    gen_opt_t: u64,
    critic_opt_t: u64,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

fn prefixed(out: &mut BTreeMap<String, ArrayD<f64>>, prefix: &str, set: &ParamSet) {
    for (k, v) in set {
        out.insert(format!("{prefix}/{k}"), v.clone());
    }
}

fn take_prefix(arrays: &mut BTreeMap<String, ArrayD<f64>>, prefix: &str) -> ParamSet {
    let p = format!("{prefix}/");
    let keys: Vec<String> = arrays.keys().filter(|k| k.starts_with(&p)).cloned().collect();
    keys.into_iter()
        .map(|k| {
            let v = arrays.remove(&k).unwrap();
            (k[p.len()..].to_string(), v)
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, params: &NetParams, meta: &CheckpointMeta) -> Result<()> {
    let header = CheckpointHeader {
        gspec: params.gspec.clone(),
        cspec: params.cspec.clone(),
        gen_opt_t: params.gen_opt.t,
        critic_opt_t: params.critic_opt.t,
        meta: meta.clone(),
    };
    let mut arrays = BTreeMap::new();
    prefixed(&mut arrays, "generator", &params.generator);
    prefixed(&mut arrays, "critic", &params.critic);
    prefixed(&mut arrays, "gen_opt.m", &params.gen_opt.m);
    prefixed(&mut arrays, "gen_opt.v", &params.gen_opt.v);
    prefixed(&mut arrays, "critic_opt.m", &params.critic_opt.m);
    prefixed(&mut arrays, "critic_opt.v", &params.critic_opt.v);
    write_archive(path, &serde_json::to_value(header)?, &arrays)
}

fn check_keys(set: &ParamSet, shapes: &[(String, Vec<usize>)], what: &str) -> Result<()> {
    let got: BTreeMap<&str, &[usize]> = set.iter().map(|(k, v)| (k.as_str(), v.shape())).collect();
    let want: BTreeMap<&str, &[usize]> = shapes.iter().map(|(k, s)| (k.as_str(), s.as_slice())).collect();
    if got != want {
        return Err(Error::Checkpoint(format!("{what} arrays do not match the stored spec")));
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetParams, CheckpointMeta)> {
    let (meta, mut arrays) = read_archive(path)?;
    let header: CheckpointHeader = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let generator = take_prefix(&mut arrays, "generator");
    let critic = take_prefix(&mut arrays, "critic");
    let gen_opt = AdamState {
        m: take_prefix(&mut arrays, "gen_opt.m"),
        v: take_prefix(&mut arrays, "gen_opt.v"),
        t: header.gen_opt_t,
    };
    let critic_opt = AdamState {
        m: take_prefix(&mut arrays, "critic_opt.m"),
        v: take_prefix(&mut arrays, "critic_opt.v"),
        t: header.critic_opt_t,
    };
    let gshapes = header.gspec.shapes();
    let cshapes = header.cspec.shapes();
    check_keys(&generator, &gshapes, "generator")?;
    check_keys(&gen_opt.m, &gshapes, "generator moment")?;
    check_keys(&gen_opt.v, &gshapes, "generator moment")?;
    check_keys(&critic, &cshapes, "critic")?;
    check_keys(&critic_opt.m, &cshapes, "critic moment")?;
    check_keys(&critic_opt.v, &cshapes, "critic moment")?;
    if !arrays.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected arrays: {}",
            arrays.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok((
        NetParams {
            gspec: header.gspec,
            cspec: header.cspec,
            generator,
            critic,
            gen_opt,
            critic_opt,
        },
        header.meta,
    ))
}

/// Loads a checkpoint and fails if its architecture differs from the
/// expected one.
pub fn load_checkpoint_checked(
    path: &Path,
    gspec: &GeneratorSpec,
    cspec: &CriticSpec,
) -> Result<(NetParams, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    if &params.gspec != gspec {
        return Err(Error::Checkpoint(format!(
            "generator spec mismatch: checkpoint has {:?}, config wants {gspec:?}",
            params.gspec
        )));
    }
    if &params.cspec != cspec {
        return Err(Error::Checkpoint(format!(
            "critic spec mismatch: checkpoint has {:?}, config wants {cspec:?}",
            params.cspec
        )));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    fn specs() -> (GeneratorSpec, CriticSpec) {
        (
            GeneratorSpec {
                depth: 3,
                base_channels: 2,
                ..Default::default()
            },
            CriticSpec {
                depth: 2,
                base_channels: 2,
                input_channels: 3,
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (g, c) = specs();
        let mut p = init_params(5, &g, &c).unwrap();
        p.gen_opt.t = 17;
        p.critic_opt.v.values_mut().next().unwrap().fill(f64::MIN_POSITIVE);
        let meta = CheckpointMeta {
            seed: 5,
            step: 42,
            epoch: 3,
            extra: serde_json::json!({"avg": 0.1 + 0.2}),
        };
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &p, &meta).unwrap();
        let (q, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(m2, meta);
        for (a, b) in p.generator.values().zip(q.generator.values()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(p, q);
    }

    #[test]
    fn spec_mismatch_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let (g, c) = specs();
        let p = init_params(5, &g, &c).unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &p, &CheckpointMeta { seed: 5, step: 0, epoch: 0, extra: serde_json::Value::Null }).unwrap();
        let other = GeneratorSpec {
            base_channels: 4,
            ..g.clone()
        };
        assert!(matches!(load_checkpoint_checked(&path, &other, &c), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint_checked(&path, &g, &c).is_ok());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not an archive at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
