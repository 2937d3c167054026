//! Encoder weights, context checkpoints and prototype banks on top of the
//! tensor container.

use crate::encoder::{tensor_schema, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::io::manifest::WeightManifest;
use crate::numerics::Scalar;
use crate::prompt::{PromptEnsemble, PrototypeBank, SpecialTokens};

const KIND_ENCODER: &str = "encoder";
const KIND_CHECKPOINT: &str = "checkpoint";
const KIND_PROTOTYPES: &str = "prototypes";

fn expect_kind(m: &WeightManifest, kind: &str) -> Result<()> {
    let found = m.meta("kind")?;
    if found != kind {
        return Err(Error::Schema(format!("expected a {kind} file, found {found:?}")));
    }
    Ok(())
}

pub fn encoder_manifest<T: Scalar>(
    weights: &EncoderWeights<T>,
    specials: SpecialTokens,
) -> Result<WeightManifest> {
    let c = &weights.config;
    let mut m = WeightManifest::new();
    m.set_meta("kind", KIND_ENCODER);
    m.set_meta("layers", c.layers);
    m.set_meta("heads", c.heads);
    m.set_meta("width", c.width);
    m.set_meta("output_dim", c.output_dim);
    m.set_meta("max_positions", c.max_positions);
    m.set_meta("vocab_size", c.vocab_size);
    m.set_meta("eps", c.eps);
    m.set_meta("sot_id", specials.sot);
    m.set_meta("eot_id", specials.eot);
    for (name, t) in weights.named_tensors() {
        m.push(&name, t)?;
    }
    Ok(m)
}

pub fn write_weights<T: Scalar>(weights: &EncoderWeights<T>, specials: SpecialTokens) -> Result<Vec<u8>> {
    encoder_manifest(weights, specials)?.to_bytes()
}

pub fn encoder_config_from(m: &WeightManifest) -> Result<EncoderConfig> {
    let config = EncoderConfig {
        layers: m.meta_parsed("layers")?,
        heads: m.meta_parsed("heads")?,
        width: m.meta_parsed("width")?,
        output_dim: m.meta_parsed("output_dim")?,
        max_positions: m.meta_parsed("max_positions")?,
        vocab_size: m.meta_parsed("vocab_size")?,
        eps: m.meta_parsed("eps")?,
    };
    config.validate()?;
    Ok(config)
}

/// Loads encoder weights, validating every tensor by name and shape.
pub fn weights_from_manifest<T: Scalar>(
    m: &WeightManifest,
) -> Result<(EncoderWeights<T>, SpecialTokens)> {
    expect_kind(m, KIND_ENCODER)?;
    let config = encoder_config_from(m)?;
    let specials = SpecialTokens {
        sot: m.meta_parsed("sot_id")?,
        eot: m.meta_parsed("eot_id")?,
    };
    specials.validate(config.vocab_size)?;
    let schema = tensor_schema(&config);
    let tensors = schema
        .iter()
        .map(|(name, shape)| m.tensor_shaped(name, shape))
        .collect::<Result<Vec<_>>>()?;
    if m.tensors.len() != schema.len() {
        let extra: Vec<&str> = m
            .tensors
            .iter()
            .filter(|e| !schema.iter().any(|(n, _)| n == &e.name))
            .map(|e| e.name.as_str())
            .collect();
        return Err(Error::Schema(format!("unexpected tensors {extra:?}")));
    }
    let weights = EncoderWeights::from_tensors(config, tensors)?;
    if !weights.is_finite() {
        return Err(Error::NonFinite("encoder weights".into()));
    }
    Ok((weights, specials))
}

pub fn read_weights<T: Scalar>(bytes: &[u8]) -> Result<(EncoderWeights<T>, SpecialTokens)> {
    weights_from_manifest(&WeightManifest::from_bytes(bytes)?)
}

/// A context checkpoint as read from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub ensemble: PromptEnsemble<T>,
    pub encoder_hash: String,
}

pub fn save_checkpoint<T: Scalar>(ensemble: &PromptEnsemble<T>, encoder_hash: &str) -> Result<Vec<u8>> {
    let mut m = WeightManifest::new();
    m.set_meta("kind", KIND_CHECKPOINT);
    m.set_meta("d_prompts", ensemble.n_prompts());
    m.set_meta("n_ctx", ensemble.n_ctx());
    m.set_meta("encoder_hash", encoder_hash);
    m.push("context", ensemble.context())?;
    m.to_bytes()
}

pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let m = WeightManifest::from_bytes(bytes)?;
    expect_kind(&m, KIND_CHECKPOINT)?;
    let d: usize = m.meta_parsed("d_prompts")?;
    let n: usize = m.meta_parsed("n_ctx")?;
    let width = m
        .entry("context")
        .and_then(|e| e.shape.get(2).copied())
        .ok_or_else(|| Error::Schema("missing tensor \"context\"".into()))?;
    let context = m.tensor_shaped("context", &[d, n, width])?;
    Ok(Checkpoint {
        ensemble: PromptEnsemble::from_context(context)?,
        encoder_hash: m.meta("encoder_hash")?.to_string(),
    })
}

impl<T: Scalar> Checkpoint<T> {
    /// Warns when the checkpoint was trained against different encoder weights.
    /// Loading still succeeds; evaluation against a different encoder may be
    /// meaningless.
    pub fn compatibility_warning(&self, encoder_hash: &str) -> Option<String> {
        (self.encoder_hash != encoder_hash).then(|| {
            format!(
                "checkpoint was trained with encoder {} but the loaded encoder is {}",
                short(&self.encoder_hash),
                short(encoder_hash)
            )
        })
    }

    /// Warns when the context budget differs from the declared `M`.
    pub fn parity_warning(&self, budget: usize) -> Option<String> {
        let (d, n) = (self.ensemble.n_prompts(), self.ensemble.n_ctx());
        (d * n != budget).then(|| format!("checkpoint D={d} x N={n} = {} != budget M={budget}", d * n))
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

pub fn save_prototypes<T: Scalar>(bank: &PrototypeBank<T>) -> Result<Vec<u8>> {
    let mut m = WeightManifest::new();
    m.set_meta("kind", KIND_PROTOTYPES);
    m.set_meta("encoder_hash", &bank.encoder_hash);
    m.set_meta("ensemble_hash", &bank.ensemble_hash);
    m.push("prototypes", &bank.prototypes)?;
    m.to_bytes()
}

pub fn load_prototypes<T: Scalar>(bytes: &[u8]) -> Result<PrototypeBank<T>> {
    let m = WeightManifest::from_bytes(bytes)?;
    expect_kind(&m, KIND_PROTOTYPES)?;
    let prototypes = m.tensor("prototypes")?;
    if prototypes.shape().len() != 2 || !prototypes.is_finite() {
        return Err(Error::Schema("prototypes must be a finite [K, d] matrix".into()));
    }
    Ok(PrototypeBank {
        prototypes,
        encoder_hash: m.meta("encoder_hash")?.to_string(),
        ensemble_hash: m.meta("ensemble_hash")?.to_string(),
    })
}
