//! Analytic-vs-finite-difference checks over the encoder, ensemble and loss
//! paths, in double precision.

use serde::Serialize;

use crate::classifier::cross_entropy;
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numerics::{dot, finite_difference_grad, max_relative_error, SeededRng, Tensor};
use crate::prompt::{
    ensemble_class_features, scatter_feature_grads, ClassTokenTable, ClassTokens, FeatureAveraging,
    PromptEnsemble, SpecialTokens,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Temperature for the loss path. CLIP's 0.01 makes the softmax so sharp
/// that central differences lose their accuracy.
const LOSS_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub seed: u64,
    pub encoder: f64,
    pub ensemble: f64,
    pub loss: f64,
}

impl GradcheckResult {
    pub fn max_error(&self) -> f64 {
        self.encoder.max(self.ensemble).max(self.loss)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() <= tolerance
    }
}

fn gaussian_tensor(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gaussian(0.0, std)).collect()).expect("shape matches length")
}

fn relative(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    max_relative_error(analytic.data(), numeric.data(), 1e-3 * numeric.max_abs())
}

/// Runs all three checks for one seed and returns the max relative error of
/// each.
pub fn run_gradcheck(config: EncoderConfig, seed: u64) -> Result<GradcheckResult> {
    config.validate()?;
    let weights: EncoderWeights<f64> = EncoderWeights::from_seed(config, seed)?;
    let specials = SpecialTokens::for_vocab(config.vocab_size);
    let mut rng = SeededRng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (w, d) = (config.width, config.output_dim);

    let len = config.max_positions.min(7);
    if len < 5 {
        return Err(Error::Config("gradcheck needs at least 5 positions".into()));
    }
    let x = gaussian_tensor(&mut rng, &[len, w], 1.0);
    let upstream: Vec<f64> = (0..d).map(|_| rng.gaussian(0.0, 1.0)).collect();
    let eot = len - 1;
    let (_, cache) = weights.encode_sequence(&x, eot)?;
    let analytic = weights.encode_backward(&cache, &upstream)?;
    let numeric = finite_difference_grad(
        |probe| {
            weights
                .encode_sequence(probe, eot)
                .map_or(f64::NAN, |(f, _)| dot(f.data(), &upstream))
        },
        &x,
        1e-3,
    )?;
    let encoder = relative(&analytic, &numeric);

    let ordinary = config.vocab_size.saturating_sub(2);
    if ordinary < 3 {
        return Err(Error::Config("gradcheck needs at least 3 ordinary tokens".into()));
    }
    let classes = ClassTokenTable::new(
        (0..3)
            .map(|k| ClassTokens {
                name: format!("c{k}"),
                tokens: (0..1 + k % 2).map(|_| rng.below(ordinary) as u32).collect(),
            })
            .collect(),
    );
    let ens = PromptEnsemble::<f64>::init(2, 2, w, 1.0, &mut rng)?;
    let up = gaussian_tensor(&mut rng, &[3, d], 1.0);
    let features = |ctx: &Tensor<f64>| -> Result<Tensor<f64>> {
        let probe = PromptEnsemble::from_context(ctx.clone())?;
        Ok(ensemble_class_features(&weights, &probe, &classes, specials, FeatureAveraging::Raw)?.features)
    };
    let fwd = ensemble_class_features(&weights, &ens, &classes, specials, FeatureAveraging::Raw)?;
    let analytic = scatter_feature_grads(&up, &fwd, &weights)?;
    let numeric = finite_difference_grad(
        |ctx| features(ctx).map_or(f64::NAN, |f| dot(f.data(), up.data())),
        ens.context(),
        1e-4,
    )?;
    let ensemble = relative(&analytic, &numeric);

    let batch = gaussian_tensor(&mut rng, &[6, d], 1.0);
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let lg = cross_entropy(&batch, &fwd.features, &labels, LOSS_TEMPERATURE)?;
    let analytic = scatter_feature_grads(&lg.d_text_features, &fwd, &weights)?;
    let numeric = finite_difference_grad(
        |ctx| {
            features(ctx)
                .and_then(|f| cross_entropy(&batch, &f, &labels, LOSS_TEMPERATURE))
                .map_or(f64::NAN, |l| l.loss)
        },
        ens.context(),
        1e-4,
    )?;
    let loss = relative(&analytic, &numeric);

    Ok(GradcheckResult {
        seed,
        encoder,
        ensemble,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_seed_passes() {
        let r = run_gradcheck(EncoderConfig::toy(), 1).unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
        assert!(!r.passes(1e-12), "{r:?}");
    }
}
