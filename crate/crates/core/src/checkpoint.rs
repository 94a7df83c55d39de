//! Versioned checkpoint container: a JSON header (specs, config echo,
//! counters, tensor manifest, parameter counts) followed by raw
//! little-endian f32 blobs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{DiscriminatorSpec, GeneratorSpec};
use crate::nn::HasParams;

const MAGIC: &[u8; 8] = b"PCUTCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    iteration: u64,
    epoch: u64,
    seed: u64,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    config_toml: String,
    /// Parameter counts per module group, asserted on load.
    param_counts: BTreeMap<String, usize>,
    extra_u64: BTreeMap<String, u64>,
    tensors: Vec<TensorMeta>,
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub iteration: u64,
    pub epoch: u64,
    pub seed: u64,
    pub gen_spec: GeneratorSpec,
    pub disc_spec: DiscriminatorSpec,
    pub config_toml: String,
    pub param_counts: BTreeMap<String, usize>,
    /// Small named counters (optimizer step counts and similar).
    pub extra_u64: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(&String, &ArrayD<f32>)> = self.tensors.iter().collect();
        tensors.sort_by(|a, b| a.0.cmp(b.0));
        let header = Header {
            format_version: FORMAT_VERSION,
            iteration: self.iteration,
            epoch: self.epoch,
            seed: self.seed,
            gen_spec: self.gen_spec.clone(),
            disc_spec: self.disc_spec.clone(),
            config_toml: self.config_toml.clone(),
            param_counts: self.param_counts.clone(),
            extra_u64: self.extra_u64.clone(),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorMeta { name: (*n).clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::InvalidCheckpoint(format!("header encode: {e}")))?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(header_json.len() as u64).to_le_bytes())?;
            w.write_all(&header_json)?;
            for (_, t) in tensors {
                let data = t
                    .as_slice()
                    .ok_or_else(|| Error::InvalidCheckpoint("non-contiguous tensor".into()))?;
                let mut bytes = Vec::with_capacity(data.len() * 4);
                for v in data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&bytes)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::InvalidCheckpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::InvalidCheckpoint("bad magic".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::InvalidCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mut l = [0u8; 8];
        r.read_exact(&mut l)?;
        let hlen = u64::from_le_bytes(l) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)
            .map_err(|e| Error::InvalidCheckpoint(format!("header decode: {e}")))?;
        let mut tensors = BTreeMap::new();
        for meta in &header.tensors {
            let numel: usize = meta.shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes).map_err(|_| {
                Error::InvalidCheckpoint(format!("truncated tensor {}", meta.name))
            })?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(meta.shape.clone(), data)
                .map_err(|e| Error::InvalidCheckpoint(format!("tensor {}: {e}", meta.name)))?;
            tensors.insert(meta.name.clone(), arr);
        }
        Ok(Checkpoint {
            iteration: header.iteration,
            epoch: header.epoch,
            seed: header.seed,
            gen_spec: header.gen_spec,
            disc_spec: header.disc_spec,
            config_toml: header.config_toml,
            param_counts: header.param_counts,
            extra_u64: header.extra_u64,
            tensors,
        })
    }
}

/// Copy a module's parameters into the tensor map under `prefix.`.
pub fn collect_params(prefix: &str, net: &impl HasParams<f32>, out: &mut BTreeMap<String, ArrayD<f32>>) {
    net.visit_params(&mut |p| {
        out.insert(format!("{prefix}.{}", p.name), p.value.clone());
    });
}

/// Restore a module's parameters from the tensor map; every parameter must be
/// present with a matching shape.
pub fn restore_params(
    prefix: &str,
    net: &mut impl HasParams<f32>,
    tensors: &BTreeMap<String, ArrayD<f32>>,
) -> Result<()> {
    let mut missing = None;
    net.visit_params_mut(&mut |p| {
        if missing.is_some() {
            return;
        }
        let key = format!("{prefix}.{}", p.name);
        match tensors.get(&key) {
            Some(t) if t.raw_dim() == p.value.raw_dim() => p.value.assign(t),
            Some(t) => {
                missing = Some(format!(
                    "tensor {key}: shape {:?} != expected {:?}",
                    t.shape(),
                    p.value.shape()
                ))
            }
            None => missing = Some(format!("missing tensor {key}")),
        }
    });
    match missing {
        Some(m) => Err(Error::InvalidCheckpoint(m)),
        None => Ok(()),
    }
}

/// Store optimizer moment buffers under `prefix.m.N` / `prefix.v.N`.
pub fn collect_adam(
    prefix: &str,
    opt: &crate::optim::Adam<f32>,
    out: &mut BTreeMap<String, ArrayD<f32>>,
    extra: &mut BTreeMap<String, u64>,
) {
    let (t, m, v) = opt.state();
    extra.insert(format!("{prefix}.t"), t);
    for (i, arr) in m.iter().enumerate() {
        out.insert(format!("{prefix}.m.{i}"), arr.clone());
    }
    for (i, arr) in v.iter().enumerate() {
        out.insert(format!("{prefix}.v.{i}"), arr.clone());
    }
}

pub fn restore_adam(
    prefix: &str,
    opt: &mut crate::optim::Adam<f32>,
    tensors: &BTreeMap<String, ArrayD<f32>>,
    extra: &BTreeMap<String, u64>,
) -> Result<()> {
    let t = *extra
        .get(&format!("{prefix}.t"))
        .ok_or_else(|| Error::InvalidCheckpoint(format!("missing {prefix}.t")))?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for i in 0.. {
        match tensors.get(&format!("{prefix}.m.{i}")) {
            Some(arr) => m.push(arr.clone()),
            None => break,
        }
    }
    for i in 0..m.len() {
        let arr = tensors
            .get(&format!("{prefix}.v.{i}"))
            .ok_or_else(|| Error::InvalidCheckpoint(format!("missing {prefix}.v.{i}")))?;
        v.push(arr.clone());
    }
    if t > 0 && m.is_empty() {
        return Err(Error::InvalidCheckpoint(format!("{prefix}: stepped optimizer without moments")));
    }
    opt.restore(t, m, v);
    Ok(())
}
