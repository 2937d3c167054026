//! Temperature-scaled cosine softmax over class features, its cross-entropy
//! gradient, prediction, and the two non-learned baselines.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::io::EmbeddingBank;
use crate::numerics::{dot, l2_norm, softmax_in_place, Scalar, Tensor};
use crate::prompt::PrototypeBank;

/// CLIP's converged temperature (logit scale 100).
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub temperature: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy of a batch and its gradient with respect to the class
/// features.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: T,
    /// `[K, d]`.
    pub d_text_features: Tensor<T>,
    /// `[B, K]`.
    pub probabilities: Tensor<T>,
}

fn unit<T: Scalar>(v: &[T], what: impl FnOnce() -> String) -> Result<(Vec<T>, T)> {
    let norm = l2_norm(v);
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::DegenerateFeature(what()));
    }
    Ok((v.iter().map(|&x| x / norm).collect(), norm))
}

fn unit_rows<T: Scalar>(text: &Tensor<T>) -> Result<(Vec<Vec<T>>, Vec<T>)> {
    (0..text.rows())
        .map(|k| unit(text.row(k), || format!("class feature {k}")))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

fn clamped_cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot(a, b).max(-T::one()).min(T::one())
}

fn check_dims<T: Scalar>(query_dim: usize, text: &Tensor<T>) -> Result<()> {
    if text.shape().len() != 2 || text.cols() != query_dim || text.rows() == 0 {
        return Err(Error::Dimension {
            op: "classifier",
            left: text.shape().to_vec(),
            right: vec![query_dim],
        });
    }
    Ok(())
}

/// Cosine logits `cos(ψ_T^k, ψ_I) / τ` for one query.
pub fn logits<T: Scalar>(image: &[T], text: &Tensor<T>, temperature: f64) -> Result<Vec<T>> {
    check_dims(image.len(), text)?;
    let (q, _) = unit(image, || "image feature".into())?;
    let (t, _) = unit_rows(text)?;
    let inv_tau = T::lit(1.0 / temperature);
    Ok(t.iter().map(|tk| clamped_cosine(tk, &q) * inv_tau).collect())
}

/// Softmax over classes of the temperature-scaled cosine similarities.
pub fn class_probabilities<T: Scalar>(
    image: &[T],
    text: &Tensor<T>,
    temperature: f64,
) -> Result<Vec<T>> {
    ClassifierConfig { temperature }.validate()?;
    let mut p = logits(image, text, temperature)?;
    softmax_in_place(&mut p);
    Ok(p)
}

/// Mean cross-entropy over a batch `[B, d]` with labels in `0..K`.
///
/// The returned gradient includes the Jacobian of the cosine normalization of
/// each class feature. Image features are frozen and receive no gradient.
pub fn cross_entropy<T: Scalar>(
    batch: &Tensor<T>,
    text: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
) -> Result<LossGrad<T>> {
    ClassifierConfig { temperature }.validate()?;
    let b = batch.rows();
    let dim = batch.cols();
    check_dims(dim, text)?;
    if labels.len() != b || b == 0 {
        return Err(Error::Dimension {
            op: "cross_entropy labels",
            left: batch.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let k_classes = text.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k_classes) {
        return Err(Error::Contract(format!("label {bad} out of {k_classes} classes")));
    }

    let (t_hat, t_norm) = unit_rows(text)?;
    let inv_tau = T::lit(1.0 / temperature);
    let inv_b = T::one() / T::lit(b as f64);
    let mut probabilities = Tensor::zeros(&[b, k_classes]);
    // Gradient with respect to the unit class directions.
    let mut d_unit = vec![vec![T::zero(); dim]; k_classes];
    let mut loss = T::zero();

    for (row, &label) in labels.iter().enumerate() {
        let (x_hat, _) = unit(batch.row(row), || format!("image feature {row}"))?;
        let p = probabilities.row_mut(row);
        for (pk, tk) in p.iter_mut().zip(&t_hat) {
            *pk = clamped_cosine(tk, &x_hat) * inv_tau;
        }
        let max = p.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let log_sum = p.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        loss -= p[label] - log_sum;
        softmax_in_place(p);
        for (k, &pk) in p.iter().enumerate() {
            let indicator = if k == label { T::one() } else { T::zero() };
            let coeff = (pk - indicator) * inv_b * inv_tau;
            for (g, &x) in d_unit[k].iter_mut().zip(&x_hat) {
                *g += coeff * x;
            }
        }
    }

    let mut d_text = Tensor::zeros(&[k_classes, dim]);
    for k in 0..k_classes {
        let along = dot(&t_hat[k], &d_unit[k]);
        for ((o, &g), &t) in d_text.row_mut(k).iter_mut().zip(&d_unit[k]).zip(&t_hat[k]) {
            *o = (g - t * along) / t_norm[k];
        }
    }

    Ok(LossGrad {
        loss: loss * inv_b,
        d_text_features: d_text,
        probabilities,
    })
}

/// Index of the most cosine-similar row of `text`; ties go to the lowest index.
pub fn predict_with_features<T: Scalar>(text: &Tensor<T>, query: &[T]) -> Result<usize> {
    check_dims(query.len(), text)?;
    let (q, _) = unit(query, || "query".into())?;
    let (t, _) = unit_rows(text)?;
    Ok(argmax(t.iter().map(|tk| clamped_cosine(tk, &q))))
}

pub fn predict<T: Scalar>(prototypes: &PrototypeBank<T>, query: &[T]) -> Result<usize> {
    predict_with_features(&prototypes.prototypes, query)
}

/// First index of the maximum.
pub(crate) fn argmax<T: Scalar>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_val = T::neg_infinity();
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Top-1 accuracy of cosine prediction against the class features `[K, d]`.
pub fn accuracy_with_features<T: Scalar>(text: &Tensor<T>, bank: &EmbeddingBank) -> Result<f64> {
    if bank.records.is_empty() {
        return Err(Error::Protocol("cannot evaluate on an empty bank".into()));
    }
    check_dims(bank.dim, text)?;
    let (t, _) = unit_rows(text)?;
    let mut correct = 0usize;
    for (idx, rec) in bank.records.iter().enumerate() {
        let query: Vec<T> = rec.vector.iter().map(|&v| T::lit(v as f64)).collect();
        let (q, _) = unit(&query, || format!("bank record {idx}"))?;
        let pred = argmax(t.iter().map(|tk| clamped_cosine(tk, &q)));
        if pred == rec.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / bank.records.len() as f64)
}

/// Per-class average of encoded hand-written prompt sequences.
///
/// Each sequence is a complete token-id sequence (framing included) whose
/// final token is the end-of-text marker.
pub fn hand_prompt_features<T: Scalar>(
    weights: &EncoderWeights<T>,
    prompts_per_class: &[Vec<Vec<u32>>],
) -> Result<Tensor<T>> {
    let dim = weights.config.output_dim;
    let mut out = Tensor::zeros(&[prompts_per_class.len(), dim]);
    for (k, prompts) in prompts_per_class.iter().enumerate() {
        if prompts.is_empty() {
            return Err(Error::Config(format!("class {k} has no hand prompts")));
        }
        let acc = out.row_mut(k);
        for seq in prompts {
            if seq.is_empty() {
                return Err(Error::Config(format!("class {k} has an empty prompt")));
            }
            let emb = weights.embed_tokens(seq)?;
            let (f, _) = weights.encode_sequence(&emb, seq.len() - 1)?;
            for (a, &v) in acc.iter_mut().zip(f.data()) {
                *a += v;
            }
        }
        let inv = T::one() / T::lit(prompts.len() as f64);
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Ok(out)
}

/// Zero-shot accuracy using averaged hand-written prompts per class.
pub fn zero_shot_baseline<T: Scalar>(
    weights: &EncoderWeights<T>,
    prompts_per_class: &[Vec<Vec<u32>>],
    bank: &EmbeddingBank,
) -> Result<f64> {
    if prompts_per_class.len() != bank.classes.len() {
        return Err(Error::Protocol(format!(
            "{} prompt lists for {} classes",
            prompts_per_class.len(),
            bank.classes.len()
        )));
    }
    let features = hand_prompt_features(weights, prompts_per_class)?;
    accuracy_with_features(&features, bank)
}

const PROBE_TOLERANCE: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 200_000;

/// Multinomial logistic regression on raw image features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// `[K, d]`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LinearProbe {
    /// Accelerated full-batch gradient descent on mean cross-entropy plus
    /// `l2/2 · ‖W‖²` (bias unpenalized), stopped once the gradient norm drops
    /// below 1e-6.
    pub fn fit(train: &EmbeddingBank, l2: f64) -> Result<Self> {
        if !(l2 > 0.0) {
            return Err(Error::Config(format!("l2 must be positive, got {l2}")));
        }
        let k_classes = train.classes.len();
        let dim = train.dim;
        let counts = train.class_counts();
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Protocol(format!(
                "class {missing} ({}) missing from the training split",
                train.classes.classes[missing].name
            )));
        }
        let xs: Vec<Vec<f64>> = train
            .records
            .iter()
            .map(|r| r.vector.iter().map(|&v| v as f64).collect())
            .collect();
        let ys: Vec<usize> = train.records.iter().map(|r| r.label as usize).collect();
        let n = xs.len() as f64;
        let max_sq = xs.iter().map(|x| dot(x, x)).fold(0.0, f64::max);
        let step = 1.0 / (0.5 * (max_sq + 1.0) + l2);

        let params = k_classes * (dim + 1);
        let gradient = |theta: &[f64]| -> Vec<f64> {
            let mut g = vec![0.0; params];
            let mut z = vec![0.0; k_classes];
            for (x, &y) in xs.iter().zip(&ys) {
                for (k, zk) in z.iter_mut().enumerate() {
                    let row = &theta[k * (dim + 1)..(k + 1) * (dim + 1)];
                    *zk = dot(&row[..dim], x) + row[dim];
                }
                softmax_in_place(&mut z);
                for (k, &pk) in z.iter().enumerate() {
                    let c = (pk - if k == y { 1.0 } else { 0.0 }) / n;
                    let gk = &mut g[k * (dim + 1)..(k + 1) * (dim + 1)];
                    for (gi, &xi) in gk[..dim].iter_mut().zip(x) {
                        *gi += c * xi;
                    }
                    gk[dim] += c;
                }
            }
            for k in 0..k_classes {
                for i in 0..dim {
                    g[k * (dim + 1) + i] += l2 * theta[k * (dim + 1) + i];
                }
            }
            g
        };

        let mut theta = vec![0.0; params];
        let mut prev = theta.clone();
        let mut momentum_t = 1.0f64;
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;
        while iterations < PROBE_MAX_ITERS {
            // Look-ahead point.
            let next_t = 0.5 * (1.0 + (1.0 + 4.0 * momentum_t * momentum_t).sqrt());
            let beta = (momentum_t - 1.0) / next_t;
            let look: Vec<f64> = theta
                .iter()
                .zip(&prev)
                .map(|(&a, &b)| a + beta * (a - b))
                .collect();
            let g = gradient(&look);
            let updated: Vec<f64> = look.iter().zip(&g).map(|(&p, &gi)| p - step * gi).collect();
            // Restart momentum when the step moves against the gradient.
            let against: f64 = g
                .iter()
                .zip(updated.iter().zip(&theta))
                .map(|(&gi, (&u, &t))| gi * (u - t))
                .sum();
            prev = std::mem::replace(&mut theta, updated);
            momentum_t = if against > 0.0 { 1.0 } else { next_t };
            iterations += 1;
            if iterations % 10 == 0 {
                grad_norm = l2_norm(&gradient(&theta));
                if grad_norm < PROBE_TOLERANCE {
                    break;
                }
            }
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("linear probe parameters".into()));
        }
        if grad_norm >= PROBE_TOLERANCE {
            log::warn!("linear probe stopped at gradient norm {grad_norm:e} after {iterations} iterations");
        }
        let weights = (0..k_classes)
            .map(|k| theta[k * (dim + 1)..k * (dim + 1) + dim].to_vec())
            .collect();
        let bias = (0..k_classes).map(|k| theta[k * (dim + 1) + dim]).collect();
        Ok(Self {
            weights,
            bias,
            iterations,
            grad_norm,
        })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(self.weights.iter().zip(&self.bias).map(|(w, &b)| dot(w, x) + b))
    }

    pub fn accuracy(&self, bank: &EmbeddingBank) -> f64 {
        let correct = bank
            .records
            .iter()
            .filter(|r| {
                let x: Vec<f64> = r.vector.iter().map(|&v| v as f64).collect();
                self.predict(&x) == r.label as usize
            })
            .count();
        correct as f64 / bank.records.len().max(1) as f64
    }
}

/// Linear-probe test accuracy.
pub fn linear_probe(train: &EmbeddingBank, test: &EmbeddingBank, l2: f64) -> Result<f64> {
    if train.dim != test.dim {
        return Err(Error::Dimension {
            op: "linear_probe",
            left: vec![train.dim],
            right: vec![test.dim],
        });
    }
    Ok(LinearProbe::fit(train, l2)?.accuracy(test))
}
