use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use eco_core::classifier::accuracy_with_features;
use eco_core::encoder::EncoderWeights;
use eco_core::gradcheck::run_gradcheck;
use eco_core::io::{
    generate_synthetic, load_checkpoint, load_prototypes, read_bank, read_weights, save_checkpoint,
    save_prototypes, write_bank, write_weights, EmbeddingBank, SynthSpec,
};
use eco_core::prompt::{check_parity, precompute_prototypes, SpecialTokens};
use eco_core::trainer::{run_few_shot, SweepConfig, SweepDataset, TrainConfig};
use sha2::{Digest, Sha256};

use crate::{EvalArgs, ExportArgs, GenSynthArgs, GradcheckArgs, SweepArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<eco_core::Error> for CliError {
    fn from(e: eco_core::Error) -> Self {
        use eco_core::Error as E;
        match e {
            E::Config(_)
            | E::Parity { .. }
            | E::Protocol(_)
            | E::Vocabulary { .. }
            | E::SequenceLength { .. }
            | E::Dimension { .. } => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

type Outcome = Result<u8, CliError>;

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::User(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {} sha256={}", path.display(), sha256(bytes));
    Ok(())
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Prefixes a core error with the file it came from.
fn in_file(path: &Path) -> impl Fn(eco_core::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::User(m) => CliError::User(format!("{}: {m}", path.display())),
        CliError::Internal(m) => CliError::Internal(format!("{}: {m}", path.display())),
    }
}

fn load_weights(path: &Path) -> Result<(EncoderWeights<f32>, SpecialTokens), CliError> {
    read_weights(&read(path)?).map_err(in_file(path))
}

fn load_bank(path: &Path) -> Result<EmbeddingBank, CliError> {
    read_bank(&read(path)?).map_err(in_file(path))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn percent(accuracy: f64) -> String {
    format!("{:.2}", accuracy * 100.0)
}

fn json(value: &serde_json::Value) -> Result<Vec<u8>, CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(format!("cannot serialize: {e}")))?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn gen_synth(a: &GenSynthArgs) -> Outcome {
    let spec = SynthSpec {
        classes: a.classes,
        encoder: a.dim_config,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        noise: a.noise,
        seed: a.seed,
        ..SynthSpec::default()
    };
    spec.validate()?;
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::User(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let task = generate_synthetic(&spec)?;
    let teacher = serde_json::json!({
        "spec": spec,
        "classes": task.classes.classes,
        "teacher": task.teacher,
        "encoder_hash": task.weights.content_hash(),
    });
    write(&a.out_dir.join("train.bank"), &write_bank(&task.train)?)?;
    write(&a.out_dir.join("test.bank"), &write_bank(&task.test)?)?;
    write(&a.out_dir.join("encoder.weights"), &write_weights(&task.weights, task.specials)?)?;
    write(&a.out_dir.join("teacher.json"), &json(&teacher)?)?;
    Ok(0)
}

pub fn train(a: &TrainArgs) -> Outcome {
    if let Some(m) = a.budget {
        check_parity(a.d_prompts, a.n_ctx, m)?;
    }
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        shots: a.shots,
        epochs: a.epochs,
        lr: a.lr,
        warmup_lr: defaults.warmup_lr.min(a.lr),
        batch_size: a.batch_size,
        seed: a.seed,
        ..defaults
    };
    config.validate()?;
    let (weights, specials) = load_weights(&a.weights)?;
    let bank = load_bank(&a.train_bank)?;
    let run = run_few_shot(&weights, specials, &bank, a.d_prompts, a.n_ctx, &config)?;

    let mut log_text = String::from("epoch,lr,loss\n");
    for (e, loss) in run.trained.losses.iter().enumerate() {
        log_text.push_str(&format!("{},{:e},{:e}\n", e + 1, config.learning_rate(e), loss));
    }
    write(&a.out, &save_checkpoint(&run.trained.ensemble, &weights.content_hash())?)?;
    write(&a.loss_log.clone().unwrap_or_else(|| sibling(&a.out, ".loss.csv")), log_text.as_bytes())?;
    let first = run.trained.losses.first().copied().unwrap_or(f64::NAN);
    let last = run.trained.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "D={} N={} shots={} seed={}: loss {first:.4} -> {last:.4}",
        a.d_prompts, a.n_ctx, a.shots, a.seed
    );
    Ok(0)
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let test = load_bank(&a.test_bank)?;
    let weights = a.weights.as_deref().map(load_weights).transpose()?;
    let (accuracy, source, ensemble_hash) = match (&a.checkpoint, &a.prototypes) {
        (Some(path), None) => {
            let (weights, specials) = weights
                .as_ref()
                .ok_or_else(|| CliError::User("--checkpoint needs --weights".into()))?;
            let ckpt = load_checkpoint::<f32>(&read(path)?).map_err(in_file(path))?;
            if let Some(w) = ckpt.compatibility_warning(&weights.content_hash()) {
                log::warn!("{w}");
            }
            let protos = precompute_prototypes(
                weights,
                &ckpt.ensemble,
                &test.classes,
                *specials,
                TrainConfig::default().averaging,
            )?;
            (accuracy_with_features(&protos.prototypes, &test)?, path, protos.ensemble_hash)
        }
        (None, Some(path)) => {
            let protos = load_prototypes::<f32>(&read(path)?).map_err(in_file(path))?;
            if let Some((w, _)) = &weights {
                if protos.encoder_hash != w.content_hash() {
                    log::warn!("prototypes were computed with a different encoder");
                }
            }
            if protos.n_classes() != test.classes.len() {
                return Err(CliError::User(format!(
                    "{} has {} classes but the test bank has {}",
                    path.display(),
                    protos.n_classes(),
                    test.classes.len()
                )));
            }
            (accuracy_with_features(&protos.prototypes, &test)?, path, protos.ensemble_hash)
        }
        _ => return Err(CliError::User("give exactly one of --checkpoint or --prototypes".into())),
    };
    println!("{}", percent(accuracy));
    if let Some(record) = &a.record {
        let value = serde_json::json!({
            "source": source.display().to_string(),
            "test_bank": a.test_bank.display().to_string(),
            "ensemble_hash": ensemble_hash,
            "examples": test.len(),
            "accuracy": accuracy,
        });
        write(record, &json(&value)?)?;
    }
    Ok(0)
}

pub fn sweep(a: &SweepArgs) -> Outcome {
    let defaults = TrainConfig::default();
    let config = SweepConfig {
        budget: a.budget,
        grid: a.grid.0.clone(),
        shots: a.shots.clone(),
        seeds: a.seeds.clone(),
        train: TrainConfig {
            epochs: a.epochs,
            lr: a.lr,
            warmup_lr: defaults.warmup_lr.min(a.lr),
            ..defaults
        },
    };
    config.validate()?;
    let (weights, specials) = load_weights(&a.weights)?;
    let train = load_bank(&a.train_bank)?;
    let test = load_bank(&a.test_bank)?;
    let ds = SweepDataset {
        id: &a.dataset,
        weights: &weights,
        specials,
        train: &train,
        test: &test,
    };
    log::info!(
        "{} training runs",
        config.grid.len() * config.shots.len() * config.seeds.len()
    );
    let report = eco_core::trainer::sweep(&[ds], &config)?;
    let table = report.to_table();
    write(&a.out_report, format!("{}\n", report.to_json()?).as_bytes())?;
    write(&sibling(&a.out_report, ".table.txt"), table.as_bytes())?;
    write(&sibling(&a.out_report, ".series.csv"), report.to_series_csv().as_bytes())?;
    write(&sibling(&a.out_report, ".timings.csv"), report.timings_csv().as_bytes())?;
    print!("{table}");
    Ok(0)
}

pub fn gradcheck(a: &GradcheckArgs) -> Outcome {
    if !(a.tolerance > 0.0 && a.tolerance.is_finite()) {
        return Err(CliError::User(format!("tolerance must be positive, got {}", a.tolerance)));
    }
    let mut worst: f64 = 0.0;
    for &seed in &a.seed {
        let r = run_gradcheck(a.dim_config, seed)?;
        println!(
            "seed {seed}: encoder {:.3e} ensemble {:.3e} loss {:.3e} -> {}",
            r.encoder,
            r.ensemble,
            r.loss,
            if r.passes(a.tolerance) { "pass" } else { "FAIL" }
        );
        worst = worst.max(r.max_error());
    }
    let ok = worst <= a.tolerance;
    println!(
        "max relative error {worst:.3e} {} tolerance {:.1e}",
        if ok { "<=" } else { ">" },
        a.tolerance
    );
    Ok(if ok { 0 } else { 1 })
}

pub fn export_prototypes(a: &ExportArgs) -> Outcome {
    let (weights, specials) = load_weights(&a.weights)?;
    let classes = load_bank(&a.class_bank)?.classes;
    let bytes = read(&a.checkpoint)?;
    let ckpt = load_checkpoint::<f32>(&bytes).map_err(|e| {
        CliError::Internal(format!("{}: {e}", a.checkpoint.display()))
    })?;
    if let Some(w) = ckpt.compatibility_warning(&weights.content_hash()) {
        log::warn!("{w}");
    }
    let protos = precompute_prototypes(
        &weights,
        &ckpt.ensemble,
        &classes,
        specials,
        TrainConfig::default().averaging,
    )?;
    log::info!(
        "encoder {} ensemble {}",
        protos.encoder_hash,
        protos.ensemble_hash
    );
    write(&a.out, &save_prototypes(&protos)?)?;
    Ok(0)
}
