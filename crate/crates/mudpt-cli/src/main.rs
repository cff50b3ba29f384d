//! Command-line front end: each subcommand loads a JSON experiment config,
//! applies any flag overrides, and maps library errors onto process exit
//! codes (2 = invalid config or input, 3 = numeric failure, 4 = IO failure).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mudpt::checkpoint::{backbone_params, save_checkpoint, BackboneSnapshot};
use mudpt::datagen::{few_shot_sample, gen_corpus, gen_pretrain_corpus, save_corpus};
use mudpt::encoders::DualEncoderModel;
use mudpt::numerics::{grad_check, GradCheckOptions, SgdSchedule, Tensor};
use mudpt::objective::{contrastive_pretrain, train, tuning_loss, tuning_loss_and_grads};
use mudpt::prompting::PromptModel;
use mudpt::{Error, Result};

use mudpt_cli::config::{ExperimentConfig, ModeName};
use mudpt_cli::runner::run_experiment;

#[derive(Parser)]
#[command(
    name = "mudpt-cli",
    version,
    about = "Run multi-modal prompt-tuning experiments and emit deterministic reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<String>,
    /// Override the config's mode list (repeat the flag for several modes).
    #[arg(long = "mode", value_name = "MODE")]
    modes: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment end to end and write report.json / report.txt.
    Run {
        /// Experiment config (JSON).
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate the downstream and pretraining corpora as JSONL files.
    GenData {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Pretrain the backbone alone and save it as a checkpoint.
    Pretrain {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare analytic tuning gradients against central differences at a
    /// briefly trained point, per configured mode.
    GradCheck {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare two report files, ignoring wall time; exit 1 if they differ.
    ReportDiff { a: PathBuf, b: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Map library errors onto the documented process exit codes.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::Vocabulary(_)
        | Error::Shape { .. }
        | Error::Data(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io(_) | Error::Json(_) => 4,
        Error::Internal(_) => 1,
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            let artifacts = run_experiment(&config)?;
            print!("{}", fs::read_to_string(&artifacts.report_txt)?);
            println!("report: {}", artifacts.report_json.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            gen_data(&config)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Pretrain { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            pretrain(&config)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            grad_check_modes(&config)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ReportDiff { a, b } => report_diff(&a, &b),
    }
}

/// Load a config file, apply flag overrides, and validate the result so a
/// bad config fails before any compute starts.
fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    if !overrides.modes.is_empty() {
        config.modes = overrides
            .modes
            .iter()
            .map(|name| ModeName::parse(name))
            .collect::<Result<Vec<_>>>()?;
    }
    config.validate()?;
    Ok(config)
}

fn gen_data(config: &ExperimentConfig) -> Result<()> {
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir)?;
    let corpus = gen_corpus(&config.backbone, &config.data, config.seed)?;
    let corpus_path = out_dir.join("corpus.jsonl");
    save_corpus(&corpus, &corpus_path)?;
    println!(
        "downstream corpus: {} classes, {} examples -> {}",
        corpus.classes.len(),
        corpus.examples.len(),
        corpus_path.display()
    );
    let pretrain = gen_pretrain_corpus(&config.backbone, &config.data, config.seed)?;
    let pretrain_path = out_dir.join("pretrain_corpus.jsonl");
    save_corpus(&pretrain, &pretrain_path)?;
    println!(
        "pretraining corpus: {} classes, {} examples -> {}",
        pretrain.classes.len(),
        pretrain.examples.len(),
        pretrain_path.display()
    );
    Ok(())
}

fn pretrain(config: &ExperimentConfig) -> Result<()> {
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir)?;
    let corpus = gen_pretrain_corpus(&config.backbone, &config.data, config.seed)?;
    let mut backbone = DualEncoderModel::init(&config.backbone, config.seed)?;
    let outcome = contrastive_pretrain(
        &mut backbone,
        &corpus,
        &config.pretrain.schedule,
        Some(config.pretrain.steps),
        config.seed,
    )?;
    let trace_path = out_dir.join("pretrain_trace.jsonl");
    let mut body = String::new();
    for record in &outcome.loss_trace {
        body.push_str(&serde_json::to_string(record)?);
        body.push('\n');
    }
    fs::write(&trace_path, body)?;

    let snapshot = BackboneSnapshot::of(&backbone);
    let ckpt_path = out_dir.join("backbone.ckpt.json");
    save_checkpoint(&ckpt_path, "backbone", backbone_params(&backbone), Some(snapshot.hash.clone()))?;
    let final_loss = outcome.loss_trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps, final loss {:.4}, tau {:.4}, hash {} -> {}",
        outcome.steps_run,
        final_loss,
        outcome.final_tau,
        &snapshot.hash[..12],
        ckpt_path.display()
    );
    Ok(())
}

/// Short training burst before checking gradients: at a freshly initialized
/// point the cross-attention score gradients are small enough that central
/// differences measure only roundoff, so the comparison is made at a nearby
/// trained point where every parameter group has healthy magnitudes.
const WARM_LEARNING_RATE: f64 = 0.05;
const WARM_STEPS: usize = 150;
const CHECK_BATCH: usize = 4;

fn grad_check_modes(config: &ExperimentConfig) -> Result<()> {
    if config.modes.iter().any(|m| *m == ModeName::ZeroShot) {
        return Err(Error::Config(
            "grad-check needs a tuned mode; zero_shot has no trainable parameters".into(),
        ));
    }
    let corpus = gen_corpus(&config.backbone, &config.data, config.seed)?;
    let backbone = DualEncoderModel::init(&config.backbone, config.seed)?;
    let split = few_shot_sample(&corpus, config.data.shots, config.seed)?;
    let train_set: Vec<(Tensor, usize)> = split
        .all_train_indices()
        .iter()
        .map(|&i| (corpus.examples[i].patches.clone(), corpus.examples[i].class_id))
        .collect();
    let captions: Vec<Vec<usize>> = (0..corpus.classes.len())
        .map(|c| corpus.caption_for(c))
        .collect::<Result<_>>()?;
    let template = config.template_ids()?;

    for &mode_name in &config.modes {
        let fresh = PromptModel::init(
            &backbone,
            mode_name.to_mode(),
            &config.prompt,
            template.as_deref(),
            config.seed,
        )?;
        // Every epoch runs at least one step, so WARM_STEPS epochs always
        // reach the step cap.
        let warm_schedule = SgdSchedule {
            learning_rate: WARM_LEARNING_RATE,
            epochs: WARM_STEPS,
            batch_size: CHECK_BATCH.min(train_set.len()),
        };
        let prompts = train(
            &backbone,
            &fresh,
            &captions,
            &train_set,
            &warm_schedule,
            Some(WARM_STEPS),
            config.seed,
        )?
        .prompts;

        let batch: Vec<&Tensor> =
            train_set.iter().take(CHECK_BATCH).map(|(image, _)| image).collect();
        let labels: Vec<usize> =
            train_set.iter().take(CHECK_BATCH).map(|&(_, label)| label).collect();
        let params = prompts.trainable_params();
        let loss_of = |ps: &[(String, Tensor)]| {
            let mut candidate = prompts.clone();
            candidate.set_trainable_params(ps)?;
            tuning_loss(&backbone, &candidate, &captions, &batch, &labels)
        };
        let grads_of = |ps: &[(String, Tensor)]| {
            let mut candidate = prompts.clone();
            candidate.set_trainable_params(ps)?;
            let (_, grads) =
                tuning_loss_and_grads(&backbone, &candidate, &captions, &batch, &labels)?;
            Ok(grads.into_iter().map(|(_, g)| g).collect())
        };
        let report = grad_check(&params, loss_of, grads_of, &GradCheckOptions::default())?;
        let pass = report.max_relative_error <= 1e-3;
        println!(
            "{}",
            serde_json::json!({
                "mode": mode_name.as_str(),
                "max_relative_error": report.max_relative_error,
                "coordinates_checked": report.coordinates_checked,
                "pass": pass,
            })
        );
        if !pass {
            return Err(Error::Numeric(format!(
                "cli::grad_check: mode {} max relative error {:.3e} exceeds 1e-3",
                mode_name.as_str(),
                report.max_relative_error
            )));
        }
    }
    Ok(())
}

/// Compare two reports field by field after dropping the wall-time entry,
/// which is the one legitimately nondeterministic field.
fn report_diff(a: &Path, b: &Path) -> Result<ExitCode> {
    let mut value_a: serde_json::Value = serde_json::from_str(&fs::read_to_string(a)?)?;
    let mut value_b: serde_json::Value = serde_json::from_str(&fs::read_to_string(b)?)?;
    for value in [&mut value_a, &mut value_b] {
        if let Some(map) = value.as_object_mut() {
            map.remove("wall_time_seconds");
        }
    }
    if value_a == value_b {
        println!("reports match (ignoring wall time)");
        return Ok(ExitCode::SUCCESS);
    }
    let empty = serde_json::Map::new();
    let map_a = value_a.as_object().unwrap_or(&empty);
    let map_b = value_b.as_object().unwrap_or(&empty);
    let mut keys: Vec<&String> = map_a.keys().chain(map_b.keys()).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        if map_a.get(key) != map_b.get(key) {
            println!("reports differ in field: {key}");
        }
    }
    Ok(ExitCode::from(1))
}
