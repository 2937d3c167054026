//! Learnable prompt ensembles: `D` prompts of `N` shared context vectors,
//! per-class sequence assembly, ensemble-averaged class features, gradient
//! scatter back to the context, and prototype precomputation.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderWeights, ForwardCache};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, Scalar, SeededRng, Tensor};

pub const DEFAULT_CONTEXT_STD: f64 = 0.02;

/// Token ids that frame every sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub sot: u32,
    pub eot: u32,
}

impl SpecialTokens {
    /// Last two vocabulary slots, the layout used for toy encoders.
    pub fn for_vocab(vocab_size: usize) -> Self {
        Self {
            sot: vocab_size as u32 - 2,
            eot: vocab_size as u32 - 1,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.sot == self.eot {
            return Err(Error::Config("sot and eot ids must differ".into()));
        }
        for id in [self.sot, self.eot] {
            if id as usize >= vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab: vocab_size,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTokens {
    pub name: String,
    pub tokens: Vec<u32>,
}

/// Pre-tokenized class names, shared by every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassTokenTable {
    pub classes: Vec<ClassTokens>,
}

impl ClassTokenTable {
    pub fn new(classes: Vec<ClassTokens>) -> Self {
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        for c in &self.classes {
            if c.tokens.is_empty() {
                return Err(Error::Config(format!("class {:?} has no tokens", c.name)));
            }
            if let Some(&id) = c.tokens.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::Vocabulary {
                    id,
                    vocab: vocab_size,
                });
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }
}

/// How per-prompt features are combined into a class feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureAveraging {
    /// Element-wise mean of raw encoder outputs.
    #[default]
    Raw,
    /// L2-normalize each prompt's feature before the mean.
    Normalized,
}

/// `D × N` context vectors living in the token-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEnsemble<T> {
    n_prompts: usize,
    n_ctx: usize,
    width: usize,
    /// `[D, N, w]`.
    context: Tensor<T>,
}

impl<T: Scalar> PromptEnsemble<T> {
    /// I.i.d. Gaussian(0, std) context vectors.
    pub fn init(
        n_prompts: usize,
        n_ctx: usize,
        width: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n_prompts == 0 || n_ctx == 0 || width == 0 {
            return Err(Error::Config(format!(
                "prompt ensemble needs D, N, w >= 1 (got D={n_prompts}, N={n_ctx}, w={width})"
            )));
        }
        let len = n_prompts * n_ctx * width;
        let data = (0..len).map(|_| T::lit(rng.gaussian(0.0, std))).collect();
        Self::from_context(Tensor::from_vec(&[n_prompts, n_ctx, width], data)?)
    }

    pub fn from_context(context: Tensor<T>) -> Result<Self> {
        let &[n_prompts, n_ctx, width] = context.shape() else {
            return Err(Error::Dimension {
                op: "prompt ensemble",
                left: context.shape().to_vec(),
                right: vec![],
            });
        };
        if n_prompts == 0 || n_ctx == 0 || width == 0 {
            return Err(Error::Config("empty context tensor".into()));
        }
        if !context.is_finite() {
            return Err(Error::NonFinite("context vectors".into()));
        }
        Ok(Self {
            n_prompts,
            n_ctx,
            width,
            context,
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn context(&self) -> &Tensor<T> {
        &self.context
    }

    pub fn context_mut(&mut self) -> &mut Tensor<T> {
        &mut self.context
    }

    /// `[N, w]` block of prompt `i`, row-major.
    pub fn prompt(&self, i: usize) -> &[T] {
        let block = self.n_ctx * self.width;
        &self.context.data()[i * block..(i + 1) * block]
    }

    pub fn parameter_count(&self) -> usize {
        self.context.len()
    }

    /// Total context budget `M = D · N`.
    pub fn budget(&self) -> usize {
        self.n_prompts * self.n_ctx
    }

    /// SHA-256 of shape and little-endian context bytes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for &s in self.context.shape() {
            hasher.update((s as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(self.context.len() * 8);
        for &v in self.context.data() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
        hex::encode(hasher.finalize())
    }

    /// Reorders prompts so that new prompt `j` is old prompt `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.n_prompts).collect::<Vec<_>>() {
            return Err(Error::Config(format!("{order:?} is not a permutation")));
        }
        let data = order.iter().flat_map(|&i| self.prompt(i).iter().copied()).collect();
        Self::from_context(Tensor::from_vec(self.context.shape(), data)?)
    }

    pub fn cast<U: Scalar>(&self) -> PromptEnsemble<U> {
        PromptEnsemble {
            n_prompts: self.n_prompts,
            n_ctx: self.n_ctx,
            width: self.width,
            context: self.context.cast(),
        }
    }
}

/// Input embeddings for one (prompt, class) pair.
#[derive(Debug, Clone)]
pub struct AssembledSequence<T> {
    pub embeddings: Tensor<T>,
    pub eot_index: usize,
    pub ctx_positions: Range<usize>,
}

/// `[E(sot), v_i1 … v_iN, E(class tokens)…, E(eot)]`.
pub fn assemble_sequence<T: Scalar>(
    ensemble: &PromptEnsemble<T>,
    prompt_index: usize,
    classes: &ClassTokenTable,
    class_index: usize,
    weights: &EncoderWeights<T>,
    specials: SpecialTokens,
) -> Result<AssembledSequence<T>> {
    let w = weights.config.width;
    if ensemble.width != w {
        return Err(Error::Dimension {
            op: "assemble_sequence",
            left: ensemble.context.shape().to_vec(),
            right: vec![w],
        });
    }
    if prompt_index >= ensemble.n_prompts {
        return Err(Error::Contract(format!(
            "prompt {prompt_index} out of {}",
            ensemble.n_prompts
        )));
    }
    let class = classes.classes.get(class_index).ok_or_else(|| {
        Error::Contract(format!("class {class_index} out of {}", classes.len()))
    })?;
    let len = ensemble.n_ctx + class.tokens.len() + 2;
    if len > weights.config.max_positions {
        return Err(Error::SequenceLength {
            len,
            max: weights.config.max_positions,
        });
    }
    let mut data = Vec::with_capacity(len * w);
    data.extend_from_slice(weights.embed_tokens(&[specials.sot])?.data());
    data.extend_from_slice(ensemble.prompt(prompt_index));
    data.extend_from_slice(weights.embed_tokens(&class.tokens)?.data());
    data.extend_from_slice(weights.embed_tokens(&[specials.eot])?.data());
    Ok(AssembledSequence {
        embeddings: Tensor::from_vec(&[len, w], data)?,
        eot_index: len - 1,
        ctx_positions: 1..1 + ensemble.n_ctx,
    })
}

/// Class features averaged over prompts, with everything needed for backward.
#[derive(Debug, Clone)]
pub struct EnsembleFeatures<T> {
    /// `[K, d]`.
    pub features: Tensor<T>,
    /// `[D, K, d]` raw per-prompt encoder outputs.
    pub per_prompt: Tensor<T>,
    /// Indexed `i * K + k`.
    caches: Vec<ForwardCache<T>>,
    n_prompts: usize,
    n_classes: usize,
    n_ctx: usize,
    averaging: FeatureAveraging,
}

impl<T> EnsembleFeatures<T> {
    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }
}

/// Encodes every (prompt, class) sequence and averages over prompts.
///
/// Encoder calls fan out across the rayon pool; the average is reduced in
/// ascending prompt order so results do not depend on the thread count.
pub fn ensemble_class_features<T: Scalar>(
    weights: &EncoderWeights<T>,
    ensemble: &PromptEnsemble<T>,
    classes: &ClassTokenTable,
    specials: SpecialTokens,
    averaging: FeatureAveraging,
) -> Result<EnsembleFeatures<T>> {
    let d_prompts = ensemble.n_prompts;
    let k_classes = classes.len();
    let dim = weights.config.output_dim;

    let encoded: Vec<(Tensor<T>, ForwardCache<T>)> = (0..d_prompts * k_classes)
        .into_par_iter()
        .map(|idx| {
            let (i, k) = (idx / k_classes, idx % k_classes);
            let seq = assemble_sequence(ensemble, i, classes, k, weights, specials)?;
            weights.encode_sequence(&seq.embeddings, seq.eot_index)
        })
        .collect::<Result<_>>()?;

    let mut per_prompt = Vec::with_capacity(d_prompts * k_classes * dim);
    let mut caches = Vec::with_capacity(encoded.len());
    for (f, c) in encoded {
        per_prompt.extend_from_slice(f.data());
        caches.push(c);
    }
    let per_prompt = Tensor::from_vec(&[d_prompts, k_classes, dim], per_prompt)?;

    let inv_d = T::one() / T::lit(d_prompts as f64);
    let mut features = Tensor::zeros(&[k_classes, dim]);
    for k in 0..k_classes {
        let acc = features.row_mut(k);
        for i in 0..d_prompts {
            let f = &per_prompt.data()[(i * k_classes + k) * dim..(i * k_classes + k + 1) * dim];
            match averaging {
                FeatureAveraging::Raw => {
                    for (a, &v) in acc.iter_mut().zip(f) {
                        *a += v;
                    }
                }
                FeatureAveraging::Normalized => {
                    let norm = l2_norm(f);
                    if norm == T::zero() {
                        return Err(Error::DegenerateFeature(format!(
                            "prompt {i} feature for class {k}"
                        )));
                    }
                    for (a, &v) in acc.iter_mut().zip(f) {
                        *a += v / norm;
                    }
                }
            }
        }
        for a in acc.iter_mut() {
            *a *= inv_d;
        }
    }

    Ok(EnsembleFeatures {
        features,
        per_prompt,
        caches,
        n_prompts: d_prompts,
        n_classes: k_classes,
        n_ctx: ensemble.n_ctx,
        averaging,
    })
}

/// Back-propagates class-feature gradients `[K, d]` to the context `[D, N, w]`.
///
/// Gradients reaching class-token and framing rows are discarded; only the
/// context positions receive updates. Classes are reduced in ascending order.
pub fn scatter_feature_grads<T: Scalar>(
    d_features: &Tensor<T>,
    forward: &EnsembleFeatures<T>,
    weights: &EncoderWeights<T>,
) -> Result<Tensor<T>> {
    let (d_prompts, k_classes, n_ctx) = (forward.n_prompts, forward.n_classes, forward.n_ctx);
    let dim = weights.config.output_dim;
    let w = weights.config.width;
    if d_features.shape() != [k_classes, dim] {
        return Err(Error::Contract(format!(
            "feature gradient {:?} does not match {k_classes} classes of dimension {dim}",
            d_features.shape()
        )));
    }
    if forward.caches.len() != d_prompts * k_classes {
        return Err(Error::Contract("cache count mismatch".into()));
    }
    let inv_d = T::one() / T::lit(d_prompts as f64);

    let input_grads: Vec<Tensor<T>> = (0..d_prompts * k_classes)
        .into_par_iter()
        .map(|idx| {
            let k = idx % k_classes;
            let upstream = d_features.row(k);
            let g: Vec<T> = match forward.averaging {
                FeatureAveraging::Raw => upstream.iter().map(|&v| v * inv_d).collect(),
                FeatureAveraging::Normalized => {
                    let f = &forward.per_prompt.data()[idx * dim..(idx + 1) * dim];
                    normalize_backward(f, upstream)
                        .into_iter()
                        .map(|v| v * inv_d)
                        .collect()
                }
            };
            weights.encode_backward(&forward.caches[idx], &g)
        })
        .collect::<Result<_>>()?;

    let mut grad = Tensor::zeros(&[d_prompts, n_ctx, w]);
    let block = n_ctx * w;
    for i in 0..d_prompts {
        let dst = &mut grad.data_mut()[i * block..(i + 1) * block];
        for k in 0..k_classes {
            let src = &input_grads[i * k_classes + k].data()[w..w + block];
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    Ok(grad)
}

/// Vector-Jacobian product of `f ↦ f / ‖f‖`.
fn normalize_backward<T: Scalar>(f: &[T], upstream: &[T]) -> Vec<T> {
    let norm = l2_norm(f);
    let along = dot(f, upstream) / (norm * norm);
    f.iter()
        .zip(upstream)
        .map(|(&fi, &gi)| (gi - fi * along) / norm)
        .collect()
}

/// Precomputed averaged class features, usable as a single prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T> {
    /// `[K, d]`.
    pub prototypes: Tensor<T>,
    pub encoder_hash: String,
    pub ensemble_hash: String,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn n_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

pub fn precompute_prototypes<T: Scalar>(
    weights: &EncoderWeights<T>,
    ensemble: &PromptEnsemble<T>,
    classes: &ClassTokenTable,
    specials: SpecialTokens,
    averaging: FeatureAveraging,
) -> Result<PrototypeBank<T>> {
    let forward = ensemble_class_features(weights, ensemble, classes, specials, averaging)?;
    Ok(PrototypeBank {
        prototypes: forward.features,
        encoder_hash: weights.content_hash(),
        ensemble_hash: ensemble.fingerprint(),
    })
}

/// `D·N == M` check used by parameter-parity sweeps.
pub fn check_parity(n_prompts: usize, n_ctx: usize, budget: usize) -> Result<()> {
    if n_prompts * n_ctx != budget {
        return Err(Error::Parity {
            d_prompts: n_prompts,
            n_ctx,
            budget,
        });
    }
    Ok(())
}
