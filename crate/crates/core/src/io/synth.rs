//! Synthetic few-shot tasks built from hidden teacher prompts.
//!
//! A random toy encoder encodes `P` teacher prompts (shared context tokens
//! followed by each class's tokens); the per-class average feature is the
//! class centroid. Image features are `normalize(centroid + ε)` with
//! `ε ~ N(0, σ² I)`. Because the centroids live in the encoder's own output
//! space, the task is solvable by prompt learning.
//!
//! The encoder's linear maps are rescaled to `SYNTH_WEIGHT_GAIN / sqrt(fan_in)`.
//! At the default 0.02 scale the sublayers barely perturb the residual stream,
//! every class maps to nearly the same feature of norm ~1, and σ = 0.3 swamps
//! the class signal.

use serde::{Deserialize, Serialize};

use crate::classifier::hand_prompt_features;
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::io::bank::{BankRecord, EmbeddingBank};
use crate::numerics::{l2_norm, streams, SeededRng, Tensor};

/// Gain of the rescaled linear maps in synthetic encoders.
pub const SYNTH_WEIGHT_GAIN: f32 = 2.0;
use crate::prompt::{ClassTokenTable, ClassTokens, SpecialTokens};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub encoder: EncoderConfig,
    pub teacher_prompts: usize,
    pub teacher_len: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            encoder: EncoderConfig::toy(),
            teacher_prompts: 4,
            teacher_len: 4,
            train_per_class: 100,
            test_per_class: 100,
            noise: 0.3,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.encoder.vocab_size < self.classes + 2 {
            return Err(Error::Config("vocabulary too small for the class count".into()));
        }
        for (name, v) in [
            ("teacher_prompts", self.teacher_prompts),
            ("teacher_len", self.teacher_len),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        // Longest teacher sequence: sot + context + two class tokens + eot.
        let longest = self.teacher_len + 4;
        if longest > self.encoder.max_positions {
            return Err(Error::Config(format!(
                "teacher sequences of length {longest} exceed {} positions",
                self.encoder.max_positions
            )));
        }
        Ok(())
    }
}

/// The hidden prompts that generated a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherPrompts {
    /// Shared context token ids, one list per teacher prompt.
    pub contexts: Vec<Vec<u32>>,
    /// Full framed token sequences, per class then per prompt.
    pub sequences: Vec<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: EmbeddingBank,
    pub test: EmbeddingBank,
    pub classes: ClassTokenTable,
    pub weights: EncoderWeights<f32>,
    pub specials: SpecialTokens,
    pub teacher: TeacherPrompts,
    /// Class centroids `[K, d]`, the raw teacher features.
    pub centroids: Tensor<f64>,
}

/// Toy weights drawn as in `EncoderWeights::from_seed`, with every linear map
/// rescaled to standard deviation `SYNTH_WEIGHT_GAIN / sqrt(fan_in)`.
pub fn synthetic_weights(config: EncoderConfig, seed: u64) -> Result<EncoderWeights<f32>> {
    let mut w: EncoderWeights<f32> = EncoderWeights::from_seed(config, seed)?;
    let rescale = |t: &Tensor<f32>| {
        let fan_in = t.rows() as f32;
        t.scale(SYNTH_WEIGHT_GAIN / (0.02 * fan_in.sqrt()))
    };
    for b in &mut w.blocks {
        b.qkv_weight = rescale(&b.qkv_weight);
        b.out_weight = rescale(&b.out_weight);
        b.fc_weight = rescale(&b.fc_weight);
        b.proj_weight = rescale(&b.proj_weight);
    }
    w.projection = rescale(&w.projection);
    Ok(w)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let cfg = spec.encoder;
    let weights = synthetic_weights(cfg, spec.seed)?;
    let specials = SpecialTokens::for_vocab(cfg.vocab_size);
    let ordinary = cfg.vocab_size - 2;

    let mut rng = SeededRng::with_stream(spec.seed, streams::SYNTH_TOKENS);
    let heads = rng.sample_indices(ordinary, spec.classes);
    let classes = ClassTokenTable::new(
        heads
            .iter()
            .enumerate()
            .map(|(k, &head)| {
                let mut tokens = vec![head as u32];
                if rng.uniform() < 0.5 {
                    tokens.push(rng.below(ordinary) as u32);
                }
                ClassTokens {
                    name: format!("class_{k:02}"),
                    tokens,
                }
            })
            .collect(),
    );
    let contexts: Vec<Vec<u32>> = (0..spec.teacher_prompts)
        .map(|_| (0..spec.teacher_len).map(|_| rng.below(ordinary) as u32).collect())
        .collect();
    let sequences: Vec<Vec<Vec<u32>>> = classes
        .classes
        .iter()
        .map(|c| {
            contexts
                .iter()
                .map(|ctx| {
                    let mut s = Vec::with_capacity(ctx.len() + c.tokens.len() + 2);
                    s.push(specials.sot);
                    s.extend_from_slice(ctx);
                    s.extend_from_slice(&c.tokens);
                    s.push(specials.eot);
                    s
                })
                .collect()
        })
        .collect();

    let centroids = hand_prompt_features(&weights.cast::<f64>(), &sequences)?;

    let mut noise = SeededRng::with_stream(spec.seed, streams::SYNTH_NOISE);
    let mut draw = |per_class: usize| -> Result<EmbeddingBank> {
        let mut records = Vec::with_capacity(per_class * spec.classes);
        for k in 0..spec.classes {
            for _ in 0..per_class {
                let v: Vec<f64> = centroids
                    .row(k)
                    .iter()
                    .map(|&m| m + noise.gaussian(0.0, spec.noise))
                    .collect();
                let norm = l2_norm(&v);
                if norm == 0.0 {
                    return Err(Error::DegenerateFeature(format!("example of class {k}")));
                }
                records.push(BankRecord {
                    label: k as u32,
                    vector: v.iter().map(|&x| (x / norm) as f32).collect(),
                });
            }
        }
        EmbeddingBank::new(cfg.output_dim, classes.clone(), records)
    };
    let train = draw(spec.train_per_class)?;
    let test = draw(spec.test_per_class)?;

    Ok(SyntheticTask {
        train,
        test,
        classes,
        weights,
        specials,
        teacher: TeacherPrompts {
            contexts,
            sequences,
        },
        centroids,
    })
}
