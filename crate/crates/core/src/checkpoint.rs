//! Versioned binary container of named tensors, used for checkpoints and
//! stored latents.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SEMANTNS"
//! version    u32
//! kind_len   u32, kind bytes (UTF-8)
//! meta_len   u64, meta bytes (UTF-8 JSON, keys sorted)
//! count      u64
//! count x { name_len u32, name bytes, rows u64, cols u64, rows*cols f64 row-major }
//! ```
//!
//! Tensors are written in name order, so encoding is a pure function of the
//! contents and decode followed by encode reproduces the input bytes.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::contrastive::ProjectionHeads;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::write_file;
use crate::latent::{AttributeSlot, ExtendedLatent, LatentConfig, MappingNetwork, SemanticLayout};
use crate::params::Params;

pub const MAGIC: &[u8; 8] = b"SEMANTNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub meta: Value,
    pub tensors: Params,
}

impl TensorFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a tensor file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported tensor file version {version}")));
        }
        let kind_len = r.u32()? as usize;
        let kind = r.string(kind_len)?;
        let meta_len = r.len64()?;
        let meta: Value = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.len64()?;
        let mut tensors = Params::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            if previous.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Data(format!("tensor {name} out of order or duplicated")));
            }
            let (rows, cols) = (r.len64()?, r.len64()?);
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Data("tensor size overflows".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Data("tensor size overflows".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(name.clone(), Array2::from_shape_vec((rows, cols), data).expect("shape checked"));
            previous = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after tensors", bytes.len() - r.pos)));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Data(format!("expected a {kind} file, found {}", self.kind)));
        }
        Ok(self)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("tensor file truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Data("length does not fit in memory".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("name is not UTF-8".into()))
    }
}

pub fn latent_to_row(w: &ExtendedLatent) -> Array2<f64> {
    let flat = w.flatten();
    Array2::from_shape_vec((1, flat.len()), flat).expect("row")
}

pub fn latent_from_row(row: &Array2<f64>, config: &LatentConfig) -> Result<ExtendedLatent> {
    if row.nrows() != 1 {
        return Err(Error::Data("latent tensor must be a single row".into()));
    }
    ExtendedLatent::unflatten(row.as_slice().expect("contiguous"), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    hidden: usize,
    output: usize,
    inputs: Vec<(AttributeSlot, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    step: u64,
    generator: GeneratorConfig,
    layout: Vec<String>,
    heads: Option<HeadMeta>,
    discriminator_size: Option<usize>,
    config: Value,
}

/// Everything needed to resume training or run the pipelines.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: Generator,
    pub mapping: MappingNetwork,
    pub heads: Option<ProjectionHeads>,
    pub discriminator: Option<Discriminator>,
    pub w_mean: ExtendedLatent,
    pub layout: SemanticLayout,
    pub step: u64,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub config: Value,
}

impl Checkpoint {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let heads = self.heads.as_ref().map(|h| {
            let first = h.heads.values().next();
            HeadMeta {
                hidden: first.map_or(0, |f| f.hidden),
                output: first.map_or(0, |f| f.output),
                inputs: h.heads.iter().map(|(s, hd)| (*s, hd.input)).collect(),
            }
        });
        let meta = CheckpointMeta {
            step: self.step,
            generator: self.generator.config.clone(),
            layout: self.layout.names().to_vec(),
            heads,
            discriminator_size: self.discriminator.as_ref().map(|d| d.size()),
            config: self.config.clone(),
        };
        let mut tensors = Params::new();
        tensors.extend_prefixed("generator/", &self.generator.params);
        tensors.extend_prefixed("mapping/", &self.mapping.params);
        if let Some(h) = &self.heads {
            tensors.extend_prefixed("heads/", &h.params);
        }
        if let Some(d) = &self.discriminator {
            tensors.extend_prefixed("discriminator/", &d.params);
        }
        tensors.insert("w_mean", latent_to_row(&self.w_mean));
        Ok(TensorFile { kind: "checkpoint".into(), meta: serde_json::to_value(meta)?, tensors })
    }

    pub fn from_tensor_file(file: TensorFile) -> Result<Self> {
        let file = file.expect_kind("checkpoint")?;
        let meta: CheckpointMeta = serde_json::from_value(file.meta)?;
        let t = &file.tensors;
        let latent = &meta.generator.latent;
        let generator = Generator::from_params(meta.generator.clone(), t.strip_prefix("generator/"))?;
        let mapping = MappingNetwork::from_params(latent, t.strip_prefix("mapping/"))?;
        let heads = match &meta.heads {
            Some(h) => Some(ProjectionHeads::from_params(&h.inputs, h.hidden, h.output, t.strip_prefix("heads/"))?),
            None => None,
        };
        let discriminator = match meta.discriminator_size {
            Some(size) => Some(Discriminator::from_params(size, t.strip_prefix("discriminator/"))?),
            None => None,
        };
        let w_mean = latent_from_row(
            t.try_get("w_mean").ok_or_else(|| Error::Data("checkpoint has no w_mean".into()))?,
            latent,
        )?;
        let layout = SemanticLayout::new(meta.layout)?;
        if layout.len() != latent.components {
            return Err(Error::Data("checkpoint layout does not match the component count".into()));
        }
        let expected = generator.params.len()
            + mapping.params.len()
            + heads.as_ref().map_or(0, |h| h.params.len())
            + discriminator.as_ref().map_or(0, |d| d.params.len())
            + 1;
        if expected != t.len() {
            return Err(Error::Data("checkpoint contains unrecognized tensors".into()));
        }
        Ok(Self { generator, mapping, heads, discriminator, w_mean, layout, step: meta.step, config: meta.config })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_tensor_file()?.encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_tensor_file(TensorFile::decode(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(TensorFile::load(path)?)
    }
}

/// Recovered latents of one inversion run, for later reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLatents {
    pub latents: Vec<ExtendedLatent>,
    pub diverged: bool,
    /// Identifies the checkpoint the latents belong to.
    pub checkpoint_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatentMeta {
    count: usize,
    diverged: bool,
    checkpoint_digest: String,
    latent: LatentConfig,
}

impl StoredLatents {
    pub fn to_tensor_file(&self, config: &LatentConfig) -> Result<TensorFile> {
        let meta = LatentMeta {
            count: self.latents.len(),
            diverged: self.diverged,
            checkpoint_digest: self.checkpoint_digest.clone(),
            latent: config.clone(),
        };
        let mut tensors = Params::new();
        for (i, w) in self.latents.iter().enumerate() {
            tensors.insert(format!("latent{i}"), latent_to_row(w));
        }
        Ok(TensorFile { kind: "latents".into(), meta: serde_json::to_value(meta)?, tensors })
    }

    pub fn from_tensor_file(file: TensorFile, config: &LatentConfig) -> Result<Self> {
        let file = file.expect_kind("latents")?;
        let meta: LatentMeta = serde_json::from_value(file.meta)?;
        if meta.latent != *config {
            return Err(Error::Data("stored latents were made with a different latent configuration".into()));
        }
        let latents = (0..meta.count)
            .map(|i| {
                let row = file
                    .tensors
                    .try_get(&format!("latent{i}"))
                    .ok_or_else(|| Error::Data(format!("missing latent{i}")))?;
                latent_from_row(row, config)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { latents, diverged: meta.diverged, checkpoint_digest: meta.checkpoint_digest })
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
