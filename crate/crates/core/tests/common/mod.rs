//! Helpers shared by the integration tests, including a plain single-prompt
//! training loop used as a reference for the `D = 1` case.

#![allow(dead_code)]

use eco_core::classifier::cross_entropy;
use eco_core::encoder::EncoderWeights;
use eco_core::io::{generate_synthetic, EmbeddingBank, SynthSpec, SyntheticTask};
use eco_core::numerics::{streams, SeededRng, Tensor};
use eco_core::prompt::SpecialTokens;
use eco_core::trainer::TrainConfig;

pub fn task(seed: u64, train_per_class: usize, test_per_class: usize) -> SyntheticTask {
    generate_synthetic(&SynthSpec {
        seed,
        train_per_class,
        test_per_class,
        ..SynthSpec::default()
    })
    .expect("valid synthetic spec")
}

/// Single-prompt context learning written against the encoder directly: one
/// `[N, w]` context, no ensemble bookkeeping. Returns the final context and
/// the per-epoch mean loss.
pub fn reference_single_prompt(
    weights: &EncoderWeights<f32>,
    specials: SpecialTokens,
    bank: &EmbeddingBank,
    n_ctx: usize,
    cfg: &TrainConfig,
) -> (Tensor<f32>, Vec<f64>) {
    let w = weights.config.width;
    let k_classes = bank.classes.len();

    let mut split_rng = SeededRng::with_stream(cfg.seed, streams::SPLIT);
    let mut order = Vec::new();
    for pool in bank.indices_by_class() {
        for i in split_rng.sample_indices(pool.len(), cfg.shots) {
            order.push(pool[i]);
        }
    }

    let mut init_rng = SeededRng::with_stream(cfg.seed, streams::CONTEXT_INIT);
    let mut ctx: Vec<f32> = (0..n_ctx * w)
        .map(|_| init_rng.gaussian(0.0, cfg.context_std) as f32)
        .collect();
    let mut velocity = vec![0.0f32; ctx.len()];
    let batch_size = cfg.batch_size.unwrap_or((k_classes * cfg.shots).min(32));
    let mut shuffle = SeededRng::with_stream(cfg.seed, streams::SHUFFLE);
    let mut losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = if epoch < cfg.warmup_epochs {
            cfg.warmup_lr
        } else {
            let t = (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
        } as f32;
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let mut feats = Vec::new();
            let mut caches = Vec::new();
            for class in &bank.classes.classes {
                let mut rows = weights.embed_tokens(&[specials.sot]).unwrap().into_data();
                rows.extend_from_slice(&ctx);
                rows.extend(weights.embed_tokens(&class.tokens).unwrap().into_data());
                rows.extend(weights.embed_tokens(&[specials.eot]).unwrap().into_data());
                let len = rows.len() / w;
                let emb = Tensor::from_vec(&[len, w], rows).unwrap();
                let (f, cache) = weights.encode_sequence(&emb, len - 1).unwrap();
                feats.extend_from_slice(f.data());
                caches.push(cache);
            }
            let text = Tensor::from_vec(&[k_classes, weights.config.output_dim], feats).unwrap();
            let x = bank.gather::<f32>(batch);
            let labels = bank.labels(batch);
            let lg = cross_entropy(&x, &text, &labels, cfg.classifier.temperature).unwrap();
            total += lg.loss as f64 * batch.len() as f64;

            let mut grad = vec![0.0f32; ctx.len()];
            for (k, cache) in caches.iter().enumerate() {
                let g = weights.encode_backward(cache, lg.d_text_features.row(k)).unwrap();
                for (a, &b) in grad.iter_mut().zip(&g.data()[w..w + n_ctx * w]) {
                    *a += b;
                }
            }
            for ((v, g), p) in velocity.iter_mut().zip(&grad).zip(ctx.iter_mut()) {
                *v = cfg.momentum as f32 * *v + g;
                *p -= lr * *v;
            }
        }
        losses.push(total / order.len() as f64);
    }
    (Tensor::from_vec(&[1, n_ctx, w], ctx).unwrap(), losses)
}
