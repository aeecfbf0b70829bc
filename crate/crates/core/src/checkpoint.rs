//! Binary model container.
//!
//! Layout: the 5-byte magic `VEIL1`, a little-endian `u64` header length, a
//! JSON header, then every parameter tensor as little-endian `f64` values in
//! manifest order. The header carries the model spec, the training config
//! echo, the attribute names, the vocabulary, the output labels, the
//! attribute schema and the manifest (name, shape, dtype, byte offset into
//! the payload).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::corpus::AttributeSchema;
use crate::data::vocab::Vocab;
use crate::error::{Result, VeilError};
use crate::models::{JointModel, ModelSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 5] = b"VEIL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    config: TrainConfig,
    attributes: Vec<String>,
    vocab: String,
    labels: Vec<String>,
    schema: AttributeSchema,
    manifest: Vec<ManifestEntry>,
}

/// Everything needed to reuse a trained model on raw corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: JointModel,
    pub config: TrainConfig,
    pub vocab: Vocab,
    /// Tagset (tagger) or rating labels (classifier), in output order.
    pub labels: Vec<String>,
    pub schema: AttributeSchema,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.model.params.len());
        let mut offset = 0u64;
        for (_, name, t) in self.model.params.iter() {
            manifest.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            model: self.model.spec.clone(),
            config: self.config.clone(),
            attributes: self.model.attribute_names().map(String::from).collect(),
            vocab: self.vocab.to_file_string(),
            labels: self.labels.clone(),
            schema: self.schema.clone(),
            manifest,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| VeilError::Checkpoint(m);
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing VEIL1 magic".into()));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[5..13]);
        let header_len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| bad("header length overflows".into()))?;
        let body = &bytes[13..];
        if body.len() < header_len {
            return Err(bad(format!(
                "header of {header_len} bytes but only {} remain",
                body.len()
            )));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &body[header_len..];
        let mut params = ParamSet::new();
        let mut expected = 0u64;
        for entry in &header.manifest {
            if entry.dtype != "f64" {
                return Err(bad(format!(
                    "{}: unsupported dtype `{}`",
                    entry.name, entry.dtype
                )));
            }
            if entry.offset != expected {
                return Err(bad(format!(
                    "{}: offset {} where {expected} was expected",
                    entry.name, entry.offset
                )));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 8 * count;
            if end > payload.len() {
                return Err(bad(format!("{}: payload truncated", entry.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| bad(format!("{}: {e}", entry.name)))?;
            params
                .insert(entry.name.clone(), t)
                .map_err(|e| bad(e.to_string()))?;
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(bad(format!(
                "{} trailing payload bytes",
                payload.len() - expected as usize
            )));
        }
        let model = JointModel::from_params(header.model, params)?;
        let names: Vec<String> = model.attribute_names().map(String::from).collect();
        if names != header.attributes {
            return Err(bad(format!(
                "attribute list {:?} does not match the model's {names:?}",
                header.attributes
            )));
        }
        let vocab = Vocab::parse(&header.vocab).map_err(|e| bad(format!("vocabulary: {e}")))?;
        if vocab.len() != model.spec.vocab_size {
            return Err(bad(format!(
                "vocabulary of {} for a model of {}",
                vocab.len(),
                model.spec.vocab_size
            )));
        }
        Ok(Checkpoint {
            model,
            config: header.config,
            vocab,
            labels: header.labels,
            schema: header.schema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| VeilError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| VeilError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocab::from_tokens(["a", "b", "b", "c"].map(String::from), 1);
        let spec = ModelSpec {
            embed_dim: 3,
            hidden_total: 4,
            disc_hidden: 2,
            ..ModelSpec::tagger(vocab.len(), 2)
        }
        .with_attribute("age", 2);
        Checkpoint {
            model: JointModel::new(spec, 7).unwrap(),
            config: TrainConfig::default().with_lambda("age", 1e-3),
            vocab,
            labels: vec!["NOUN".into(), "VERB".into()],
            schema: AttributeSchema::tagging(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..5], b"VEIL1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            back.model.params.fingerprint(),
            c.model.params.fingerprint()
        );
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(b"VEIL2\0\0\0\0\0\0\0\0").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        for cut in [0, 4, 12, 40] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
