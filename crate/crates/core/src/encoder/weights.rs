use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{streams, Scalar, SeededRng, Tensor};

const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters of the text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Joint embedding dimension.
    pub output_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub eps: f64,
}

impl EncoderConfig {
    /// Desk-scale configuration used by tests and synthetic tasks.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            output_dim: 32,
            max_positions: 32,
            vocab_size: 128,
            eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("width", self.width),
            ("output_dim", self.output_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    /// Total number of scalars in the weight set.
    pub fn parameter_count(&self) -> usize {
        let w = self.width;
        let per_block = 2 * w // ln_1
            + w * 3 * w + 3 * w // qkv
            + w * w + w // out
            + 2 * w // ln_2
            + w * 4 * w + 4 * w // fc
            + 4 * w * w + w; // proj
        self.vocab_size * w
            + self.max_positions * w
            + self.layers * per_block
            + 2 * w
            + w * self.output_dim
    }
}

/// One pre-norm residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// Fused query/key/value projection, `[w, 3w]`, applied as `x · W`.
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

/// Frozen text-encoder parameters, including the word-embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub config: EncoderConfig,
    pub token_table: Tensor<T>,
    pub positional: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub ln_final_gain: Tensor<T>,
    pub ln_final_bias: Tensor<T>,
    pub projection: Tensor<T>,
}

/// Tensor names and shapes of the serialized encoder, in canonical order.
pub fn tensor_schema(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let w = config.width;
    let mut schema = vec![
        ("token_embedding".to_string(), vec![config.vocab_size, w]),
        ("positional_embedding".to_string(), vec![config.max_positions, w]),
    ];
    for i in 0..config.layers {
        let p = format!("blocks.{i}");
        schema.extend([
            (format!("{p}.ln_1.gain"), vec![w]),
            (format!("{p}.ln_1.bias"), vec![w]),
            (format!("{p}.attn.qkv_weight"), vec![w, 3 * w]),
            (format!("{p}.attn.qkv_bias"), vec![3 * w]),
            (format!("{p}.attn.out_weight"), vec![w, w]),
            (format!("{p}.attn.out_bias"), vec![w]),
            (format!("{p}.ln_2.gain"), vec![w]),
            (format!("{p}.ln_2.bias"), vec![w]),
            (format!("{p}.mlp.fc_weight"), vec![w, 4 * w]),
            (format!("{p}.mlp.fc_bias"), vec![4 * w]),
            (format!("{p}.mlp.proj_weight"), vec![4 * w, w]),
            (format!("{p}.mlp.proj_bias"), vec![w]),
        ]);
    }
    schema.extend([
        ("ln_final.gain".to_string(), vec![w]),
        ("ln_final.bias".to_string(), vec![w]),
        ("text_projection".to_string(), vec![w, config.output_dim]),
    ]);
    schema
}

impl<T: Scalar> EncoderWeights<T> {
    /// Gaussian(0, 0.02) matrices and embeddings, zero biases, unit gains.
    pub fn init_random(config: EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let schema = tensor_schema(&config);
        let tensors = schema
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".gain") {
                    vec![T::one(); len]
                } else if name.ends_with("bias") {
                    vec![T::zero(); len]
                } else {
                    (0..len).map(|_| T::lit(rng.gaussian(0.0, INIT_STD))).collect()
                };
                Tensor::from_vec(&shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }

    /// Convenience for `init_random` on the dedicated weights stream of `seed`.
    pub fn from_seed(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::init_random(config, &mut SeededRng::with_stream(seed, streams::WEIGHTS))
    }

    /// Assembles weights from tensors listed in [`tensor_schema`] order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let schema = tensor_schema(&config);
        if tensors.len() != schema.len() {
            return Err(Error::Schema(format!(
                "expected {} tensors, got {}",
                schema.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in schema.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Schema(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_table = next();
        let positional = next();
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                ln1_gain: next(),
                ln1_bias: next(),
                qkv_weight: next(),
                qkv_bias: next(),
                out_weight: next(),
                out_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc_weight: next(),
                fc_bias: next(),
                proj_weight: next(),
                proj_bias: next(),
            })
            .collect();
        Ok(Self {
            config,
            token_table,
            positional,
            blocks,
            ln_final_gain: next(),
            ln_final_bias: next(),
            projection: next(),
        })
    }

    /// Every tensor with its serialized name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let names = tensor_schema(&self.config).into_iter().map(|(n, _)| n);
        let mut refs: Vec<&Tensor<T>> = vec![&self.token_table, &self.positional];
        for b in &self.blocks {
            refs.extend([
                &b.ln1_gain,
                &b.ln1_bias,
                &b.qkv_weight,
                &b.qkv_bias,
                &b.out_weight,
                &b.out_bias,
                &b.ln2_gain,
                &b.ln2_bias,
                &b.fc_weight,
                &b.fc_bias,
                &b.proj_weight,
                &b.proj_bias,
            ]);
        }
        refs.extend([&self.ln_final_gain, &self.ln_final_bias, &self.projection]);
        names.zip(refs).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over config and every tensor's name, shape and little-endian bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let mut buf = Vec::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for &s in t.shape() {
                hasher.update((s as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        let tensors = self.named_tensors().into_iter().map(|(_, t)| t.cast()).collect();
        EncoderWeights::from_tensors(self.config, tensors).expect("same schema")
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}
