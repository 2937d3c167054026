//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so the
//! lines always show up in `cargo test` output.

mod common;

use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use eco_core::classifier::{logits, predict, predict_with_features, DEFAULT_TEMPERATURE};
use eco_core::encoder::{EncoderConfig, EncoderWeights};
use eco_core::gradcheck::{run_gradcheck, DEFAULT_TOLERANCE};
use eco_core::io::{
    load_checkpoint, load_prototypes, read_bank, read_weights, save_checkpoint, save_prototypes, write_bank,
    write_weights, BankRecord, EmbeddingBank, SyntheticTask,
};
use eco_core::numerics::SeededRng;
use eco_core::prompt::{
    ensemble_class_features, precompute_prototypes, ClassTokenTable, ClassTokens, FeatureAveraging,
    PromptEnsemble, SpecialTokens,
};
use eco_core::trainer::{
    evaluate, run_few_shot, sweep, FewShotRun, SweepConfig, SweepDataset, TrainConfig, DEFAULT_GRID,
};
use eco_core::Error;

/// Encoder hashes observed before and after each training run.
struct HashLog(Mutex<Vec<(String, String, String)>>);

impl HashLog {
    fn run(
        &self,
        label: &str,
        task: &SyntheticTask,
        d: usize,
        n: usize,
        cfg: &TrainConfig,
    ) -> eco_core::Result<FewShotRun<f32>> {
        let before = task.weights.content_hash();
        let run = run_few_shot(&task.weights, task.specials, &task.train, d, n, cfg);
        self.0
            .lock()
            .unwrap()
            .push((label.to_string(), before, task.weights.content_hash()));
        run
    }
}

fn single_thread<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

type Outcome = Result<String, String>;

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in [1, 2, 3] {
        let r = run_gradcheck(EncoderConfig::toy(), seed).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_error());
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = format!("max relative error {worst:.2e} (tol {DEFAULT_TOLERANCE:e}), {secs:.1}s (limit 30s)");
    if worst <= DEFAULT_TOLERANCE && secs < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn coop_equivalence(task: &SyntheticTask, log: &HashLog) -> Outcome {
    let cfg = TrainConfig {
        epochs: 20,
        seed: 3,
        ..TrainConfig::default()
    };
    let (run, (ref_ctx, ref_losses)) = single_thread(|| {
        let run = log.run("coop D=1 N=16", task, 1, 16, &cfg);
        let reference = common::reference_single_prompt(&task.weights, task.specials, &task.train, 16, &cfg);
        (run, reference)
    });
    let run = run.map_err(|e| e.to_string())?;
    let hash = task.weights.content_hash();
    let ours = save_checkpoint(&run.trained.ensemble, &hash).map_err(|e| e.to_string())?;
    let theirs = save_checkpoint(
        &PromptEnsemble::from_context(ref_ctx).map_err(|e| e.to_string())?,
        &hash,
    )
    .map_err(|e| e.to_string())?;
    let same_losses = run.trained.losses.len() == 20
        && run
            .trained
            .losses
            .iter()
            .zip(&ref_losses)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let detail = format!(
        "20 epochs, losses bit-identical: {same_losses}, checkpoints byte-identical: {}",
        ours == theirs
    );
    if same_losses && ours == theirs {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_queries(rng: &mut SeededRng, count: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.gaussian(0.0, 1.0) as f32).collect())
        .collect()
}

fn precompute_equivalence(task: &SyntheticTask, log: &HashLog) -> Outcome {
    let cfg = TrainConfig {
        shots: 4,
        epochs: 10,
        seed: 2,
        ..TrainConfig::default()
    };
    let run = log.run("precompute D=4 N=4", task, 4, 4, &cfg).map_err(|e| e.to_string())?;
    let ens = &run.trained.ensemble;
    let bank = precompute_prototypes(&task.weights, ens, &task.classes, task.specials, FeatureAveraging::Raw)
        .map_err(|e| e.to_string())?;
    let stored = load_prototypes::<f32>(&save_prototypes(&bank).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(77);
    let mut worst = 0.0f32;
    let mut mismatched = 0;
    for q in random_queries(&mut rng, 100, task.train.dim) {
        let live = ensemble_class_features(&task.weights, ens, &task.classes, task.specials, FeatureAveraging::Raw)
            .map_err(|e| e.to_string())?;
        let a = logits(&q, &stored.prototypes, DEFAULT_TEMPERATURE).map_err(|e| e.to_string())?;
        let b = logits(&q, &live.features, DEFAULT_TEMPERATURE).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
        let pa = predict(&stored, &q).map_err(|e| e.to_string())?;
        let pb = predict_with_features(&live.features, &q).map_err(|e| e.to_string())?;
        if pa != pb {
            mismatched += 1;
        }
    }
    let detail = format!("100 queries, max |logit diff| {worst:.2e} (tol 1e-6), {mismatched} prediction mismatches");
    if worst <= 1e-6 && mismatched == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..n {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

fn permutation_invariance(task: &SyntheticTask, log: &HashLog) -> Outcome {
    let cfg = TrainConfig {
        shots: 4,
        epochs: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = log.run("permutation D=4 N=4", task, 4, 4, &cfg).map_err(|e| e.to_string())?;
    let ens = &run.trained.ensemble;
    let features = |e: &PromptEnsemble<f32>| {
        ensemble_class_features(&task.weights, e, &task.classes, task.specials, FeatureAveraging::Raw)
            .map(|f| f.features)
            .map_err(|e| e.to_string())
    };
    let base = features(ens)?;
    let queries = random_queries(&mut SeededRng::new(78), 1000, task.train.dim);
    let base_pred: Vec<usize> = queries
        .iter()
        .map(|q| predict_with_features(&base, q).unwrap())
        .collect();
    let mut worst = 0.0f32;
    let mut flips = 0;
    let perms = permutations(4);
    for order in &perms {
        let permuted = features(&ens.permuted(order).map_err(|e| e.to_string())?)?;
        for (a, b) in permuted.data().iter().zip(base.data()) {
            worst = worst.max((a - b).abs());
        }
        flips += queries
            .iter()
            .zip(&base_pred)
            .filter(|(q, &p)| predict_with_features(&permuted, q).unwrap() != p)
            .count();
    }
    let detail = format!(
        "{} orders of 4 prompts, max feature change {worst:.2e} (tol 1e-6), {flips} prediction changes on 1000 queries",
        perms.len()
    );
    if worst <= 1e-6 && flips == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn parameter_parity(task: &SyntheticTask) -> Outcome {
    let mut accepted = Vec::new();
    for d in 1..=16 {
        for n in 1..=16 {
            let cfg = SweepConfig {
                grid: vec![(d, n)],
                ..SweepConfig::default()
            };
            if cfg.validate().is_ok() {
                accepted.push((d, n));
            }
        }
    }
    let mut expected = DEFAULT_GRID.to_vec();
    expected.sort_unstable();
    let ds = SweepDataset {
        id: "toy",
        weights: &task.weights,
        specials: task.specials,
        train: &task.train,
        test: &task.test,
    };
    let bad = SweepConfig {
        grid: vec![(3, 5)],
        ..SweepConfig::default()
    };
    let rejected = matches!(sweep(&[ds], &bad), Err(Error::Parity { d_prompts: 3, n_ctx: 5, budget: 16 }));
    let detail = format!("accepted {accepted:?}; (3,5) rejected with parity error: {rejected}");
    if accepted == expected && rejected {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn end_to_end(task: &SyntheticTask, log: &HashLog) -> Outcome {
    let started = Instant::now();
    let result = single_thread(|| -> eco_core::Result<(f64, f64, bool)> {
        let mut accs = Vec::new();
        let mut decreasing = true;
        for shots in [16, 1] {
            let cfg = TrainConfig {
                shots,
                epochs: 50,
                ..TrainConfig::default()
            };
            let run = log.run(&format!("end-to-end S={shots}"), task, 4, 4, &cfg)?;
            let l = &run.trained.losses;
            decreasing &= l[l.len() - 1] < l[0];
            accs.push(evaluate(
                &task.weights,
                task.specials,
                &run.trained.ensemble,
                &task.classes,
                &task.test,
                cfg.averaging,
            )?);
        }
        Ok((accs[0], accs[1], decreasing))
    });
    let secs = started.elapsed().as_secs_f64();
    let (acc16, acc1, decreasing) = result.map_err(|e| e.to_string())?;
    let chance = 1.0 / task.classes.len() as f64;
    let detail = format!(
        "16-shot {:.2}% (need >= 95.00), 1-shot {:.2}% (need >= {:.2}), loss decreased: {decreasing}, {secs:.1}s on one thread (limit 120s)",
        acc16 * 100.0,
        acc1 * 100.0,
        (chance + 0.2) * 100.0
    );
    if acc16 >= 0.95 && acc1 >= chance + 0.2 && decreasing && secs < 120.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn frozen_base(log: &HashLog) -> Outcome {
    let runs = log.0.lock().unwrap();
    let changed: Vec<&str> = runs.iter().filter(|(_, a, b)| a != b).map(|(l, _, _)| l.as_str()).collect();
    let detail = format!("{} training runs, {} changed the encoder hash {changed:?}", runs.len(), changed.len());
    if !runs.is_empty() && changed.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_classes(rng: &mut SeededRng, vocab: usize) -> ClassTokenTable {
    let k = 2 + rng.below(6);
    ClassTokenTable::new(
        (0..k)
            .map(|i| ClassTokens {
                name: format!("c{i}_{}", rng.below(1000)),
                tokens: (0..1 + rng.below(3)).map(|_| rng.below(vocab) as u32).collect(),
            })
            .collect(),
    )
}

fn format_round_trips() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut failures = Vec::new();
    for i in 0..100 {
        let dim = 1 + rng.below(40);
        let classes = random_classes(&mut rng, 1000);
        let records = (0..rng.below(50))
            .map(|_| BankRecord {
                label: rng.below(classes.len()) as u32,
                vector: (0..dim)
                    .map(|_| {
                        let v = rng.gaussian(0.0, 10.0) as f32;
                        if v == 0.0 { 1.0 } else { v }
                    })
                    .collect(),
            })
            .collect();
        let bank = EmbeddingBank::new(dim, classes, records).map_err(|e| e.to_string())?;
        let bytes = write_bank(&bank).map_err(|e| e.to_string())?;
        let back = read_bank(&bytes).map_err(|e| e.to_string())?;
        if back != bank || write_bank(&back).map_err(|e| e.to_string())? != bytes {
            failures.push(format!("bank {i}"));
        }

        let heads = 1 + rng.below(3);
        let config = EncoderConfig {
            layers: 1 + rng.below(2),
            heads,
            width: heads * (1 + rng.below(4)),
            output_dim: 1 + rng.below(8),
            max_positions: 2 + rng.below(10),
            vocab_size: 3 + rng.below(20),
            eps: 1e-5,
        };
        let weights: EncoderWeights<f32> =
            EncoderWeights::from_seed(config, rng.next_u64()).map_err(|e| e.to_string())?;
        let specials = SpecialTokens::for_vocab(config.vocab_size);
        let bytes = write_weights(&weights, specials).map_err(|e| e.to_string())?;
        let (back, sp) = read_weights::<f32>(&bytes).map_err(|e| e.to_string())?;
        if back.content_hash() != weights.content_hash()
            || sp != specials
            || write_weights(&back, sp).map_err(|e| e.to_string())? != bytes
        {
            failures.push(format!("weights {i}"));
        }

        let ens = PromptEnsemble::<f32>::init(1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(16), 1.0, &mut rng)
            .map_err(|e| e.to_string())?;
        let hash = format!("{:016x}", rng.next_u64());
        let bytes = save_checkpoint(&ens, &hash).map_err(|e| e.to_string())?;
        let back = load_checkpoint::<f32>(&bytes).map_err(|e| e.to_string())?;
        if back.ensemble != ens
            || back.encoder_hash != hash
            || save_checkpoint(&back.ensemble, &back.encoder_hash).map_err(|e| e.to_string())? != bytes
        {
            failures.push(format!("checkpoint {i}"));
        }
    }
    let detail = format!("100 banks, 100 weight files, 100 checkpoints; failures {failures:?}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let task = common::task(1, 100, 100);
    let log = HashLog(Mutex::new(Vec::new()));

    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradient_correctness()),
        ("coop equivalence", coop_equivalence(&task, &log)),
        ("precompute equivalence", precompute_equivalence(&task, &log)),
        ("prompt-permutation invariance", permutation_invariance(&task, &log)),
        ("parameter parity", parameter_parity(&task)),
        ("end-to-end learning", end_to_end(&task, &log)),
        ("frozen base", frozen_base(&log)),
        ("format round-trips", format_round_trips()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
