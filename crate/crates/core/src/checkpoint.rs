//! Named-parameter archive.
//!
//! File layout: the 8-byte magic `MORELCKP`, a `u32` LE format version, a
//! `u64` LE manifest length, the JSON manifest, then every tensor as raw
//! little-endian `f32` values at the offsets the manifest records (relative
//! to the start of the blob section). Each tensor carries a SHA-256 of its
//! bytes; all are verified on load.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Optimizer, Parameterized};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MORELCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub step: u64,
    pub config_fingerprint: String,
    pub config: serde_json::Value,
    pub optimizer: Option<OptimizerEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub kind: String,
    pub steps: u64,
}

/// In-memory checkpoint. Optimizer moments are stored as ordinary tensors
/// named `optimizer.<role>.<index>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub config_fingerprint: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerEntry>,
}

/// SHA-256 of the JSON encoding of a config.
pub fn config_fingerprint<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

const OPT_PREFIX: &str = "optimizer.";

impl Checkpoint {
    pub fn from_model<T: Scalar, P: Parameterized<T>, C: Serialize>(
        kind: &str,
        model: &P,
        step: u64,
        config: &C,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, t| tensors.push((name, t.cast::<f32>())));
        Ok(Self {
            kind: kind.to_string(),
            step,
            config: serde_json::to_value(config)?,
            config_fingerprint: config_fingerprint(config)?,
            tensors,
            optimizer: None,
        })
    }

    pub fn with_optimizer<T: Scalar>(mut self, opt: &Optimizer<T>) -> Self {
        let kind = match opt {
            Optimizer::Adam(_) => "adam",
            Optimizer::RmsProp(_) => "rmsprop",
        };
        for (role, bufs) in opt.moments() {
            for (i, b) in bufs.iter().enumerate() {
                let data = b.iter().map(|v| v.as_f64() as f32).collect();
                self.tensors.push((
                    format!("{OPT_PREFIX}{role}.{i}"),
                    Tensor::from_vec(&[b.len()], data).expect("1-d shape matches length"),
                ));
            }
        }
        self.optimizer = Some(OptimizerEntry {
            kind: kind.into(),
            steps: opt.steps_taken(),
        });
        self
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Parameter tensors only, without optimizer state.
    pub fn parameters(&self) -> impl Iterator<Item = &(String, Tensor<f32>)> {
        self.tensors.iter().filter(|(n, _)| !n.starts_with(OPT_PREFIX))
    }

    /// Copies every model tensor from the checkpoint entry named
    /// `source_prefix.<model name>`. Shapes must match exactly.
    pub fn load_into<T: Scalar, P: Parameterized<T>>(&self, source_prefix: &str, model: &mut P) -> Result<()> {
        let mut failure = None;
        model.visit_mut("", &mut |name, dst| {
            if failure.is_some() {
                return;
            }
            let full = crate::nn::params_join(source_prefix, &name);
            match self.tensor(&full) {
                None => {
                    failure = Some(Error::TensorShape {
                        tensor: full,
                        expected: dst.shape().to_vec(),
                        found: Vec::new(),
                    })
                }
                Some(src) if src.shape() != dst.shape() => {
                    failure = Some(Error::TensorShape {
                        tensor: full,
                        expected: dst.shape().to_vec(),
                        found: src.shape().to_vec(),
                    })
                }
                Some(src) => *dst = src.cast(),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    /// Digest over the parameters under `prefix`, with the prefix stripped;
    /// equals [`crate::nn::param_digest`] of a model holding those values.
    pub fn digest(&self, prefix: &str) -> String {
        let strip = if prefix.is_empty() { String::new() } else { format!("{prefix}.") };
        let sub = Subset(
            self.parameters()
                .filter_map(|(n, t)| n.strip_prefix(strip.as_str()).map(|s| (s.to_string(), t.clone())))
                .collect(),
        );
        crate::nn::param_digest(&sub)
    }

    pub fn restore_optimizer<T: Scalar>(&self, opt: &mut Optimizer<T>) -> Result<()> {
        let Some(entry) = &self.optimizer else {
            return Err(Error::State("checkpoint holds no optimizer state".into()));
        };
        let mut roles: Vec<(String, Vec<Vec<T>>)> = Vec::new();
        for (name, t) in &self.tensors {
            let Some(rest) = name.strip_prefix(OPT_PREFIX) else { continue };
            let role = rest.split('.').next().unwrap_or_default().to_string();
            let buf = t.data().iter().map(|&v| T::lit(v as f64)).collect();
            match roles.iter_mut().find(|(r, _)| *r == role) {
                Some((_, v)) => v.push(buf),
                None => roles.push((role, vec![buf])),
            }
        }
        opt.restore(entry.steps, roles);
        Ok(())
    }

    fn manifest_and_blob(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                sha256: hex::encode(Sha256::digest(&blob[offset as usize..])),
            });
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            step: self.step,
            config_fingerprint: self.config_fingerprint.clone(),
            config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            tensors: entries,
        };
        (manifest, blob)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (manifest, blob) = self.manifest_and_blob();
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = temp_sibling(path);
        let mut f = File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let integrity = |reason: String| Error::Integrity {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(integrity("missing checkpoint header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible {
                path: origin.to_path_buf(),
                reason: format!("format version {version}, this build reads version {CHECKPOINT_VERSION}"),
            });
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json_end = 20usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| integrity("manifest extends past end of file".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..json_end]).map_err(|e| integrity(format!("unreadable manifest: {e}")))?;
        let blob = &bytes[json_end..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_len = 0u64;
        for e in &manifest.tensors {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 4;
            if end > blob.len() {
                return Err(integrity(format!("tensor {} is truncated", e.name)));
            }
            let raw = &blob[start..end];
            if hex::encode(Sha256::digest(raw)) != e.sha256 {
                return Err(integrity(format!("checksum mismatch in tensor {}", e.name)));
            }
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
            expected_len = expected_len.max(end as u64);
        }
        if expected_len != blob.len() as u64 {
            return Err(integrity(format!(
                "blob section holds {} bytes, manifest describes {expected_len}",
                blob.len()
            )));
        }
        Ok(Self {
            kind: manifest.kind,
            step: manifest.step,
            config: manifest.config,
            config_fingerprint: manifest.config_fingerprint,
            tensors,
            optimizer: manifest.optimizer,
        })
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Subset(Vec<(String, Tensor<f32>)>);

impl Parameterized<f32> for Subset {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<f32>)) {
        for (n, t) in &self.0 {
            f(crate::nn::params_join(prefix, n), t);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<f32>)) {
        for (n, t) in &mut self.0 {
            f(crate::nn::params_join(prefix, n), t);
        }
    }
}
