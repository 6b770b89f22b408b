//! Versioned binary container for a trained model and its adapters.
//!
//! Layout: 8-byte magic, format version (u32 LE), metadata length (u64 LE),
//! a JSON metadata block (model config, component names, tokenizer, tag
//! task, and the tensor manifest), then the raw payload: every tensor's
//! values as little-endian 32-bit floats at the offsets the manifest
//! declares. Round-trips are bit-exact.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterKind, AdapterParams};
use crate::corpus::TaskKind;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::model::Backbone;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

pub const MAGIC: &[u8; 8] = b"ADPCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Where one tensor's values live inside the payload section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
}

/// Everything one experiment stage hands to the next: the frozen encoder,
/// its language adapters, the optional task adapter and fusion attention,
/// and the tokenizer the corpora were encoded with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Backbone,
    pub language_adapters: Vec<AdapterParams>,
    pub task_adapter: Option<AdapterParams>,
    pub fusion: Option<FusionParams>,
    pub tokenizer: Tokenizer,
    /// Task the tag head was trained for, if any.
    pub task_kind: Option<TaskKind>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: crate::model::ModelConfig,
    language_adapters: Vec<String>,
    task_adapter: Option<String>,
    fusion_adapter_count: Option<usize>,
    tokenizer_tokens: Vec<String>,
    task_kind: Option<TaskKind>,
    manifest: Vec<ManifestEntry>,
}

impl Checkpoint {
    /// All tensors in manifest order, prefixed with their component names.
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.model.named_tensors();
        for a in &self.language_adapters {
            out.extend(a.named_tensors());
        }
        if let Some(t) = &self.task_adapter {
            out.extend(t.named_tensors());
        }
        if let Some(f) = &self.fusion {
            out.extend(f.named_tensors());
        }
        out
    }

    /// The manifest the current contents would be saved with.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name,
                    dtype: "f32".to_string(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += (t.numel() * 4) as u64;
                e
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_tensors();
        let mut seen = HashSet::new();
        for (name, _) in &named {
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!(
                    "duplicate tensor name '{name}' (adapters must have distinct names)"
                )));
            }
        }
        let meta = Meta {
            config: self.model.cfg,
            language_adapters: self
                .language_adapters
                .iter()
                .map(|a| a.name.clone())
                .collect(),
            task_adapter: self.task_adapter.as_ref().map(|a| a.name.clone()),
            fusion_adapter_count: self.fusion.as_ref().map(|f| f.n_adapters),
            tokenizer_tokens: self.tokenizer.tokens().to_vec(),
            task_kind: self.task_kind,
            manifest: self.manifest(),
        };
        let meta_json = serde_json::to_vec(&meta)
            .map_err(|e| Error::Checkpoint(format!("metadata serialization failed: {e}")))?;

        let payload_len: usize = named.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut bytes =
            Vec::with_capacity(MAGIC.len() + 4 + 8 + meta_json.len() + payload_len);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&meta_json);
        for (_, t) in &named {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let header = MAGIC.len() + 4 + 8;
        if bytes.len() < header {
            return Err(Error::Checkpoint(format!(
                "file is {} bytes, shorter than the {header}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(
                "bad magic: not a checkpoint file".to_string(),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = header.checked_add(meta_len).ok_or_else(|| {
            Error::Checkpoint("metadata length overflows the file".to_string())
        })?;
        if payload_start > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "metadata claims {meta_len} bytes but only {} remain",
                bytes.len() - header
            )));
        }
        let meta: Meta = serde_json::from_slice(&bytes[header..payload_start])
            .map_err(|e| Error::Checkpoint(format!("metadata parse failed: {e}")))?;
        let payload = &bytes[payload_start..];

        // Skeleton with the right shapes; every value is overwritten below.
        meta.config.validate()?;
        let model = Backbone::new(&meta.config, 0)?;
        let language_adapters: Vec<AdapterParams> = meta
            .language_adapters
            .iter()
            .map(|n| AdapterParams::new(AdapterKind::Language, n, &meta.config, 0))
            .collect();
        let task_adapter = meta
            .task_adapter
            .as_ref()
            .map(|n| AdapterParams::new(AdapterKind::Task, n, &meta.config, 0));
        let fusion = meta
            .fusion_adapter_count
            .map(|n| FusionParams::new(&meta.config, n, 0));
        let tokenizer = Tokenizer::from_tokens(meta.tokenizer_tokens.clone());
        let mut ckpt = Checkpoint {
            model,
            language_adapters,
            task_adapter,
            fusion,
            tokenizer,
            task_kind: meta.task_kind,
        };

        // Fill every named tensor from the manifest.
        let names: Vec<String> = ckpt.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let mut slots: HashMap<String, &mut Tensor> = HashMap::new();
        {
            let mut tensors: Vec<&mut Tensor> = ckpt.model.tensors_mut();
            for a in &mut ckpt.language_adapters {
                tensors.extend(a.tensors_mut());
            }
            if let Some(t) = &mut ckpt.task_adapter {
                tensors.extend(t.tensors_mut());
            }
            if let Some(f) = &mut ckpt.fusion {
                tensors.extend(f.tensors_mut());
            }
            assert_eq!(names.len(), tensors.len(), "name/tensor list mismatch");
            for (n, t) in names.iter().zip(tensors) {
                slots.insert(n.clone(), t);
            }
        }

        let mut filled = HashSet::new();
        for entry in &meta.manifest {
            let t = slots.get_mut(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("manifest names unknown tensor '{}'", entry.name))
            })?;
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has unsupported dtype '{}'",
                    entry.name, entry.dtype
                )));
            }
            if entry.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?} in the file but {:?} in the model config",
                    entry.name, entry.shape, t.shape
                )));
            }
            let n_bytes = t.numel() * 4;
            let start = entry.offset as usize;
            let end = start.checked_add(n_bytes).filter(|e| *e <= payload.len());
            let Some(end) = end else {
                return Err(Error::Checkpoint(format!(
                    "payload truncated: tensor '{}' needs bytes {start}..{} but only {} exist",
                    entry.name,
                    start + n_bytes,
                    payload.len()
                )));
            };
            for (i, chunk) in payload[start..end].chunks_exact(4).enumerate() {
                t.data[i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            filled.insert(entry.name.clone());
        }
        if let Some(missing) = names.iter().find(|n| !filled.contains(*n)) {
            return Err(Error::Checkpoint(format!(
                "manifest is missing tensor '{missing}'"
            )));
        }
        Ok(ckpt)
    }
}
