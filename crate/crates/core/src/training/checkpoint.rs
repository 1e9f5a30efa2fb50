//! Single-file checkpoints:
//!
//! ```text
//! u64 LE   header length in bytes
//! bytes    UTF-8 JSON header (config, vocabulary, seed, parameter manifest)
//! bytes    little-endian f32 payload, parameters in manifest order
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelState};
use crate::autodiff::Array;
use crate::data::Vocabulary;
use crate::nn::ModelError;

const FORMAT: &str = "olhtr-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match its configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: String,
    seed: u64,
    params: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
}

/// Serializes `state` into checkpoint bytes.
pub fn write_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut offset = 0;
    let params = state
        .params
        .iter()
        .map(|(_, name, a)| {
            let e = Entry {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                offset,
            };
            offset += a.len();
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: state.config.clone(),
        vocab: state.vocab.symbols().iter().collect(),
        seed: state.seed,
        params,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + offset * 4);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, a) in state.params.iter() {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes, checking the manifest against both the payload
/// and the parameters the configuration implies.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelState, CheckpointError> {
    let bad = |m: String| CheckpointError::Format(m);
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| bad("missing header length".into()))?
        .try_into()
        .unwrap();
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| bad("header length overflows".into()))?;
    let json = bytes
        .get(8..8usize.saturating_add(header_len))
        .ok_or_else(|| bad(format!("header of {header_len} bytes exceeds file")))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let payload = &bytes[8 + header_len..];
    let expected = header
        .params
        .iter()
        .try_fold(0usize, |acc, e| {
            e.shape
                .iter()
                .try_fold(1usize, |n, &d| n.checked_mul(d))?
                .checked_add(acc)
        })
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("manifest sizes overflow".into()))?;
    if payload.len() != expected {
        return Err(bad(format!(
            "payload holds {} bytes, manifest needs {expected}",
            payload.len()
        )));
    }
    let vocab = Vocabulary::from_symbols(header.vocab.chars())
        .map_err(|e| bad(format!("vocabulary: {e}")))?;
    if vocab.symbols().len() != header.vocab.chars().count() {
        return Err(bad("vocabulary symbols are not unique".into()));
    }

    let mut state = ModelState::new(header.config, vocab, header.seed)?;
    if state.params.len() != header.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "configuration defines {} parameters, manifest lists {}",
            state.params.len(),
            header.params.len()
        )));
    }
    let mut next = 0;
    for (entry, id) in header
        .params
        .iter()
        .zip(state.params.ids().collect::<Vec<_>>())
    {
        let current = state.params.get(id);
        if state.params.name(id) != entry.name || current.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "manifest entry {} {:?} where {} {:?} was expected",
                entry.name,
                entry.shape,
                state.params.name(id),
                current.shape()
            )));
        }
        if entry.offset != next {
            return Err(bad(format!(
                "{}: offset {} but expected {next}",
                entry.name, entry.offset
            )));
        }
        let n = current.len();
        let data: Vec<f32> = payload[next * 4..(next + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *state.params.get_mut(id) =
            Array::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
        next += n;
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint(state)).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })?;
    read_checkpoint(&bytes)
}
