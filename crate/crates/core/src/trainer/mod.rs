//! Few-shot sampling, the context training loop, evaluation and `(D, N)` sweeps.

mod report;

pub use report::{CellMean, ConfigRow, RunRecord, RunReport};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy_with_features, cross_entropy, ClassifierConfig};
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::io::EmbeddingBank;
use crate::numerics::{streams, Scalar, SeededRng, Tensor};
use crate::prompt::{
    check_parity, ensemble_class_features, precompute_prototypes, scatter_feature_grads,
    ClassTokenTable, FeatureAveraging, PromptEnsemble, SpecialTokens, DEFAULT_CONTEXT_STD,
};

/// Shot counts used by the few-shot protocol.
pub const PROTOCOL_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];
/// Seeds used by the few-shot protocol.
pub const PROTOCOL_SEEDS: [u64; 3] = [1, 2, 3];
/// The `(D, N)` grid for a budget of `M = 16`.
pub const DEFAULT_GRID: [(usize, usize); 5] = [(16, 1), (8, 2), (4, 4), (2, 8), (1, 16)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub shots: usize,
    pub epochs: usize,
    /// Defaults to `min(32, K·S)` when unset.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    pub averaging: FeatureAveraging,
    pub context_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            epochs: 50,
            batch_size: None,
            lr: 0.002,
            momentum: 0.9,
            warmup_epochs: 1,
            warmup_lr: 1e-5,
            seed: 1,
            classifier: ClassifierConfig::default(),
            averaging: FeatureAveraging::Raw,
            context_std: DEFAULT_CONTEXT_STD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("warmup_lr", self.warmup_lr), ("context_std", self.context_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn effective_batch_size(&self, n_classes: usize) -> usize {
        self.batch_size.unwrap_or_else(|| (n_classes * self.shots).min(32))
    }

    /// Constant warmup, then cosine decay from `lr` towards 0 over the
    /// remaining epochs.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.warmup_lr;
        }
        let span = self.epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
        let t = (epoch - self.warmup_epochs) as f64 / span;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Training indices into a bank, `S` per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    pub per_class: Vec<Vec<usize>>,
}

impl FewShotSplit {
    pub fn shots(&self) -> usize {
        self.per_class.first().map_or(0, Vec::len)
    }

    /// All indices, class by class.
    pub fn indices(&self) -> Vec<usize> {
        self.per_class.iter().flatten().copied().collect()
    }
}

/// Samples `shots` examples per class uniformly without replacement.
pub fn sample_few_shot(bank: &EmbeddingBank, shots: usize, rng: &mut SeededRng) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let by_class = bank.indices_by_class();
    let per_class = by_class
        .iter()
        .enumerate()
        .map(|(k, pool)| {
            if pool.len() < shots {
                return Err(Error::Protocol(format!(
                    "class {k} ({:?}) has {} examples, fewer than {shots} shots",
                    bank.classes.classes[k].name,
                    pool.len()
                )));
            }
            Ok(rng.sample_indices(pool.len(), shots).into_iter().map(|i| pool[i]).collect())
        })
        .collect::<Result<_>>()?;
    Ok(FewShotSplit { per_class })
}

/// A trained ensemble and its per-epoch mean loss.
#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub ensemble: PromptEnsemble<T>,
    pub losses: Vec<f64>,
}

/// SGD with momentum on the context vectors only.
///
/// Each epoch shuffles the split with a generator derived from the seed, then
/// walks it in mini-batches: ensemble features, cross-entropy, gradient
/// scatter, parameter update.
pub fn train<T: Scalar>(
    weights: &EncoderWeights<T>,
    specials: SpecialTokens,
    mut ensemble: PromptEnsemble<T>,
    classes: &ClassTokenTable,
    split: &FewShotSplit,
    bank: &EmbeddingBank,
    config: &TrainConfig,
) -> Result<Trained<T>> {
    config.validate()?;
    if ensemble.width() != weights.config.width {
        return Err(Error::Dimension {
            op: "train context width",
            left: vec![ensemble.width()],
            right: vec![weights.config.width],
        });
    }
    if bank.dim != weights.config.output_dim {
        return Err(Error::Dimension {
            op: "train bank dimension",
            left: vec![bank.dim],
            right: vec![weights.config.output_dim],
        });
    }
    if split.per_class.len() != classes.len() {
        return Err(Error::Protocol(format!(
            "split covers {} classes, table has {}",
            split.per_class.len(),
            classes.len()
        )));
    }
    let mut order = split.indices();
    if order.is_empty() {
        return Err(Error::Protocol("empty training split".into()));
    }
    let batch_size = config.effective_batch_size(classes.len());
    let momentum = T::lit(config.momentum);
    let mut velocity = Tensor::<T>::zeros(ensemble.context().shape());
    let mut shuffle = SeededRng::with_stream(config.seed, streams::SHUFFLE);
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr_f64 = config.learning_rate(epoch);
        let lr = T::lit(lr_f64);
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let x = bank.gather::<T>(batch);
            let labels = bank.labels(batch);
            let forward = ensemble_class_features(weights, &ensemble, classes, specials, config.averaging)?;
            let lg = cross_entropy(&x, &forward.features, &labels, config.classifier.temperature)?;
            let loss = lg.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, lr: lr_f64 });
            }
            total += loss * batch.len() as f64;
            let grad = scatter_feature_grads(&lg.d_text_features, &forward, weights)?;
            for ((v, &g), p) in velocity
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(ensemble.context_mut().data_mut())
            {
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
            if !ensemble.context().is_finite() {
                return Err(Error::Divergence { epoch, lr: lr_f64 });
            }
        }
        let mean = total / order.len() as f64;
        log::debug!("epoch {epoch}: lr {lr_f64:.3e} loss {mean:.6}");
        losses.push(mean);
    }
    Ok(Trained { ensemble, losses })
}

/// Top-1 accuracy of the ensemble's prototypes on a test bank.
pub fn evaluate<T: Scalar>(
    weights: &EncoderWeights<T>,
    specials: SpecialTokens,
    ensemble: &PromptEnsemble<T>,
    classes: &ClassTokenTable,
    test: &EmbeddingBank,
    averaging: FeatureAveraging,
) -> Result<f64> {
    let bank = precompute_prototypes(weights, ensemble, classes, specials, averaging)?;
    accuracy_with_features(&bank.prototypes, test)
}

/// Everything a single few-shot run produces.
#[derive(Debug, Clone)]
pub struct FewShotRun<T> {
    pub split: FewShotSplit,
    pub initial: PromptEnsemble<T>,
    pub trained: Trained<T>,
}

/// Samples a split, initializes a `D × N` ensemble and trains it, all seeded
/// from `config.seed`.
pub fn run_few_shot<T: Scalar>(
    weights: &EncoderWeights<T>,
    specials: SpecialTokens,
    train_bank: &EmbeddingBank,
    n_prompts: usize,
    n_ctx: usize,
    config: &TrainConfig,
) -> Result<FewShotRun<T>> {
    config.validate()?;
    let split = sample_few_shot(
        train_bank,
        config.shots,
        &mut SeededRng::with_stream(config.seed, streams::SPLIT),
    )?;
    let initial = PromptEnsemble::init(
        n_prompts,
        n_ctx,
        weights.config.width,
        config.context_std,
        &mut SeededRng::with_stream(config.seed, streams::CONTEXT_INIT),
    )?;
    let trained = train(
        weights,
        specials,
        initial.clone(),
        &train_bank.classes,
        &split,
        train_bank,
        config,
    )?;
    Ok(FewShotRun {
        split,
        initial,
        trained,
    })
}

/// One task in a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepDataset<'a> {
    pub id: &'a str,
    pub weights: &'a EncoderWeights<f32>,
    pub specials: SpecialTokens,
    pub train: &'a EmbeddingBank,
    pub test: &'a EmbeddingBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub budget: usize,
    pub grid: Vec<(usize, usize)>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template; `shots` and `seed` are overridden per run.
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budget: 16,
            grid: DEFAULT_GRID.to_vec(),
            shots: PROTOCOL_SHOTS.to_vec(),
            seeds: PROTOCOL_SEEDS.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.shots.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid, shots and seeds must be non-empty".into()));
        }
        for &(d, n) in &self.grid {
            check_parity(d, n, self.budget)?;
        }
        for &s in &self.shots {
            if !PROTOCOL_SHOTS.contains(&s) {
                return Err(Error::Config(format!(
                    "{s} shots is not one of {PROTOCOL_SHOTS:?}"
                )));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        self.train.validate()
    }
}

/// Trains and evaluates every (dataset, cell, shots, seed) combination.
///
/// Runs are independent and execute on the rayon pool; records keep the
/// nested loop order, so the report does not depend on scheduling.
pub fn sweep(datasets: &[SweepDataset<'_>], config: &SweepConfig) -> Result<RunReport> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("sweep needs at least one dataset".into()));
    }
    let mut jobs = Vec::new();
    for ds in datasets {
        for &(d, n) in &config.grid {
            for &shots in &config.shots {
                for &seed in &config.seeds {
                    jobs.push((ds, d, n, shots, seed));
                }
            }
        }
    }
    let records = jobs
        .par_iter()
        .map(|&(ds, d, n, shots, seed)| {
            let started = Instant::now();
            let cfg = TrainConfig {
                shots,
                seed,
                ..config.train
            };
            let before = ds.weights.content_hash();
            let run = run_few_shot(ds.weights, ds.specials, ds.train, d, n, &cfg)?;
            let accuracy = evaluate(
                ds.weights,
                ds.specials,
                &run.trained.ensemble,
                &ds.test.classes,
                ds.test,
                cfg.averaging,
            )?;
            if ds.weights.content_hash() != before {
                return Err(Error::Contract("encoder weights changed during training".into()));
            }
            log::info!("{} D={d} N={n} S={shots} seed={seed}: {:.2}%", ds.id, accuracy * 100.0);
            Ok(RunRecord {
                dataset: ds.id.to_string(),
                d_prompts: d,
                n_ctx: n,
                shots,
                seed,
                accuracy,
                final_loss: run.trained.losses.last().copied().unwrap_or(f64::NAN),
                epochs: cfg.epochs,
                wall_seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RunReport::from_records(config.budget, config.seeds.clone(), records)
}
