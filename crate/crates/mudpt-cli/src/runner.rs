//! Protocol orchestration: one `run` takes a validated config to a pair of
//! report files, executing pretraining once and each requested mode's
//! tune-then-evaluate pass on top of it.
//!
//! Every file this module writes is a pure function of the config and seed,
//! except the wall-time field of the report, which is why that field sits
//! last in the JSON.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use mudpt::datagen::{
    base_new_split, domain_shift, few_shot_sample, gen_corpus, gen_pretrain_corpus, ShiftKind,
    SplitTag, SyntheticCorpus,
};
use mudpt::encoders::DualEncoderModel;
use mudpt::numerics::Tensor;
use mudpt::objective::{
    contrastive_pretrain, predict, synthesize_classifier, train, StepRecord,
};
use mudpt::prompting::{prompted_encode_image, Mode, PromptModel};
use mudpt::{Error, Result};

use crate::config::{ExperimentConfig, ModeName, Protocol};
use crate::metrics::{
    accuracy, arithmetic_mean, harmonic_mean, round2, AccessAudit, DatasetAccuracy, MetricsReport,
    ModeReport, PretrainSummary, SplitAccuracies, REPORT_FORMAT_VERSION,
};

/// A corpus wrapped with per-example read counters. The runner routes every
/// tuning-phase image access through [`AuditedCorpus::patches`], so the
/// counters are a complete record of which images training could have seen.
pub struct AuditedCorpus<'a> {
    corpus: &'a SyntheticCorpus,
    reads: Vec<Cell<usize>>,
}

impl<'a> AuditedCorpus<'a> {
    pub fn new(corpus: &'a SyntheticCorpus) -> Self {
        AuditedCorpus { corpus, reads: vec![Cell::new(0); corpus.examples.len()] }
    }

    /// Read one example's image, counting the access.
    pub fn patches(&self, index: usize) -> &Tensor {
        self.reads[index].set(self.reads[index].get() + 1);
        &self.corpus.examples[index].patches
    }

    pub fn total_reads(&self) -> usize {
        self.reads.iter().map(Cell::get).sum()
    }

    /// Reads of examples whose class lies in `classes`.
    pub fn reads_for_classes(&self, classes: &BTreeSet<usize>) -> usize {
        self.reads
            .iter()
            .enumerate()
            .filter(|(i, _)| classes.contains(&self.corpus.examples[*i].class_id))
            .map(|(_, cell)| cell.get())
            .sum()
    }
}

/// One evaluation-set result as it appears in the per-mode JSONL file.
#[derive(Serialize)]
struct EvalRecord<'a> {
    name: &'a str,
    accuracy: f64,
}

/// Everything a finished run leaves behind.
pub struct RunArtifacts {
    pub report: MetricsReport,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
}

/// Execute a full experiment: validate, generate data, pretrain if asked,
/// then tune and evaluate each mode under the configured protocol.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let started = Instant::now();
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir)?;

    let corpus = gen_corpus(&config.backbone, &config.data, config.seed)?;
    let mut backbone = DualEncoderModel::init(&config.backbone, config.seed)?;
    let pretrain = if config.pretrain.steps > 0 {
        let pretrain_corpus = gen_pretrain_corpus(&config.backbone, &config.data, config.seed)?;
        let outcome = contrastive_pretrain(
            &mut backbone,
            &pretrain_corpus,
            &config.pretrain.schedule,
            Some(config.pretrain.steps),
            config.seed,
        )?;
        let trace = "pretrain_trace.jsonl";
        write_trace(&out_dir.join(trace), &outcome.loss_trace)?;
        let final_loss = outcome.loss_trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
        Some(PretrainSummary {
            steps: outcome.steps_run,
            final_loss,
            final_tau: outcome.final_tau,
            trace: trace.into(),
        })
    } else {
        None
    };

    let template = config.template_ids()?;
    let mut mode_reports = Vec::with_capacity(config.modes.len());
    for &mode_name in &config.modes {
        let mode_report = match config.protocol {
            Protocol::FewShot => {
                run_few_shot(config, &corpus, &backbone, template.as_deref(), &out_dir, mode_name)?
            }
            Protocol::BaseToNew => run_base_to_new(
                config,
                &corpus,
                &backbone,
                template.as_deref(),
                &out_dir,
                mode_name,
            )?,
            Protocol::CrossDataset => run_cross_dataset(
                config,
                &corpus,
                &backbone,
                template.as_deref(),
                &out_dir,
                mode_name,
            )?,
            Protocol::DomainGen => run_domain_gen(
                config,
                &corpus,
                &backbone,
                template.as_deref(),
                &out_dir,
                mode_name,
            )?,
        };
        mode_reports.push(mode_report);
    }

    let report = MetricsReport {
        version: REPORT_FORMAT_VERSION,
        seed: config.seed,
        protocol: config.protocol,
        config: config.clone(),
        pretrain,
        modes: mode_reports,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let (report_json, report_txt) = emit_report(&report, &out_dir)?;
    Ok(RunArtifacts { report, report_json, report_txt })
}

/// Initialize prompts for a mode and tune them unless the mode is zero-shot.
/// Returns the (possibly tuned) prompts and the loss-trace file name.
fn tune_mode(
    config: &ExperimentConfig,
    backbone: &DualEncoderModel,
    captions: &[Vec<usize>],
    train_set: &[(Tensor, usize)],
    template: Option<&[usize]>,
    out_dir: &Path,
    mode_name: ModeName,
) -> Result<(PromptModel, Option<String>)> {
    let mode = mode_name.to_mode();
    let prompts = PromptModel::init(backbone, mode, &config.prompt, template, config.seed)?;
    if mode == Mode::ZeroShot {
        return Ok((prompts, None));
    }
    let outcome = train(
        backbone,
        &prompts,
        captions,
        train_set,
        &config.tuning,
        config.tuning_steps,
        config.seed,
    )?;
    let trace = format!("trace_{}.jsonl", mode_name.as_str());
    write_trace(&out_dir.join(&trace), &outcome.loss_trace)?;
    Ok((outcome.prompts, Some(trace)))
}

/// Accuracy of `prompts` on the given examples, classifying among
/// `class_ids` (caption order defines the logit order).
fn evaluate(
    backbone: &DualEncoderModel,
    prompts: &PromptModel,
    corpus: &SyntheticCorpus,
    class_ids: &[usize],
    example_indices: &[usize],
) -> Result<f64> {
    if example_indices.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let captions: Vec<Vec<usize>> =
        class_ids.iter().map(|&c| corpus.caption_for(c)).collect::<Result<_>>()?;
    let head = synthesize_classifier(backbone, prompts, &captions)?;
    let mut predictions = Vec::with_capacity(example_indices.len());
    let mut labels = Vec::with_capacity(example_indices.len());
    for &i in example_indices {
        let example = &corpus.examples[i];
        let (feature, _) = prompted_encode_image(backbone, prompts, &example.patches)?;
        let prediction = predict(&feature, &head)?;
        predictions.push(class_ids[prediction.predicted]);
        labels.push(example.class_id);
    }
    accuracy(&predictions, &labels)
}

fn run_few_shot(
    config: &ExperimentConfig,
    corpus: &SyntheticCorpus,
    backbone: &DualEncoderModel,
    template: Option<&[usize]>,
    out_dir: &Path,
    mode_name: ModeName,
) -> Result<ModeReport> {
    let audited = AuditedCorpus::new(corpus);
    let split = few_shot_sample(corpus, config.data.shots, config.seed)?;
    let train_indices = split.all_train_indices();
    let train_set: Vec<(Tensor, usize)> = train_indices
        .iter()
        .map(|&i| (audited.patches(i).clone(), corpus.examples[i].class_id))
        .collect();
    let class_ids: Vec<usize> = (0..corpus.classes.len()).collect();
    let captions: Vec<Vec<usize>> =
        class_ids.iter().map(|&c| corpus.caption_for(c)).collect::<Result<_>>()?;

    let (prompts, loss_trace) =
        tune_mode(config, backbone, &captions, &train_set, template, out_dir, mode_name)?;

    let splits = SplitAccuracies {
        train: evaluate(backbone, &prompts, corpus, &class_ids, &train_indices)?,
        val: evaluate(
            backbone,
            &prompts,
            corpus,
            &class_ids,
            &corpus.example_indices(SplitTag::Val),
        )?,
        test: evaluate(backbone, &prompts, corpus, &class_ids, &split.test_indices)?,
    };
    write_eval_records(
        &out_dir.join(format!("eval_{}.jsonl", mode_name.as_str())),
        &[
            ("train", splits.train),
            ("val", splits.val),
            ("test", splits.test),
        ],
    )?;
    Ok(ModeReport {
        mode: mode_name,
        loss_trace,
        splits: Some(splits),
        base_accuracy: None,
        new_accuracy: None,
        harmonic_mean: None,
        arith_mean: None,
        datasets: None,
        audit: None,
    })
}

fn run_base_to_new(
    config: &ExperimentConfig,
    corpus: &SyntheticCorpus,
    backbone: &DualEncoderModel,
    template: Option<&[usize]>,
    out_dir: &Path,
    mode_name: ModeName,
) -> Result<ModeReport> {
    let class_ids: Vec<usize> = (0..corpus.classes.len()).collect();
    let bn = base_new_split(&class_ids, config.seed)?;
    let held_out: BTreeSet<usize> = bn.new.iter().copied().collect();

    let audited = AuditedCorpus::new(corpus);
    let split = few_shot_sample(corpus, config.data.shots, config.seed)?;
    // Training sees base-class images only; labels index into the base
    // caption list, which is all the classifier knows during tuning.
    let mut train_set = Vec::new();
    for (position, &class_id) in bn.base.iter().enumerate() {
        for &i in &split.train_by_class[class_id] {
            train_set.push((audited.patches(i).clone(), position));
        }
    }
    let base_captions: Vec<Vec<usize>> =
        bn.base.iter().map(|&c| corpus.caption_for(c)).collect::<Result<_>>()?;

    let (prompts, loss_trace) =
        tune_mode(config, backbone, &base_captions, &train_set, template, out_dir, mode_name)?;

    // Tuning is over; freeze the counters before any evaluation access.
    let tuning_image_reads = audited.total_reads();
    let held_out_class_reads = audited.reads_for_classes(&held_out);
    let audit = AccessAudit {
        tuning_image_reads,
        held_out_class_reads_during_tuning: held_out_class_reads,
        hygiene_ok: held_out_class_reads == 0,
    };

    let test_indices = corpus.example_indices(SplitTag::Test);
    let base_test: Vec<usize> = test_indices
        .iter()
        .copied()
        .filter(|&i| !held_out.contains(&corpus.examples[i].class_id))
        .collect();
    let new_test: Vec<usize> = test_indices
        .iter()
        .copied()
        .filter(|&i| held_out.contains(&corpus.examples[i].class_id))
        .collect();
    // The new-class classifier is synthesized from new class names and the
    // tuned prompts alone; its images enter only here, after tuning.
    let base_accuracy = evaluate(backbone, &prompts, corpus, &bn.base, &base_test)?;
    let new_accuracy = evaluate(backbone, &prompts, corpus, &bn.new, &new_test)?;
    let h = if base_accuracy > 0.0 && new_accuracy > 0.0 {
        Some(harmonic_mean(base_accuracy, new_accuracy)?)
    } else {
        None
    };
    write_eval_records(
        &out_dir.join(format!("eval_{}.jsonl", mode_name.as_str())),
        &[("base", base_accuracy), ("new", new_accuracy)],
    )?;
    Ok(ModeReport {
        mode: mode_name,
        loss_trace,
        splits: None,
        base_accuracy: Some(base_accuracy),
        new_accuracy: Some(new_accuracy),
        harmonic_mean: h,
        arith_mean: Some(round2(arithmetic_mean(&[base_accuracy, new_accuracy])?)),
        datasets: None,
        audit: Some(audit),
    })
}

fn run_cross_dataset(
    config: &ExperimentConfig,
    corpus: &SyntheticCorpus,
    backbone: &DualEncoderModel,
    template: Option<&[usize]>,
    out_dir: &Path,
    mode_name: ModeName,
) -> Result<ModeReport> {
    let (prompts, loss_trace) =
        tune_on_home(config, corpus, backbone, template, out_dir, mode_name)?;

    let class_ids: Vec<usize> = (0..corpus.classes.len()).collect();
    let mut datasets = vec![DatasetAccuracy {
        name: format!("world_{}", config.data.world_seed),
        accuracy: evaluate(
            backbone,
            &prompts,
            corpus,
            &class_ids,
            &corpus.example_indices(SplitTag::Test),
        )?,
    }];
    for &world in &config.transfer_worlds {
        let mut data = config.data.clone();
        data.world_seed = world;
        let transfer = gen_corpus(&config.backbone, &data, config.seed)?;
        let transfer_ids: Vec<usize> = (0..transfer.classes.len()).collect();
        datasets.push(DatasetAccuracy {
            name: format!("world_{world}"),
            accuracy: evaluate(
                backbone,
                &prompts,
                &transfer,
                &transfer_ids,
                &transfer.example_indices(SplitTag::Test),
            )?,
        });
    }
    finish_dataset_report(out_dir, mode_name, loss_trace, datasets)
}

fn run_domain_gen(
    config: &ExperimentConfig,
    corpus: &SyntheticCorpus,
    backbone: &DualEncoderModel,
    template: Option<&[usize]>,
    out_dir: &Path,
    mode_name: ModeName,
) -> Result<ModeReport> {
    let (prompts, loss_trace) =
        tune_on_home(config, corpus, backbone, template, out_dir, mode_name)?;

    let class_ids: Vec<usize> = (0..corpus.classes.len()).collect();
    let test_indices = corpus.example_indices(SplitTag::Test);
    let mut datasets = vec![DatasetAccuracy {
        name: "unshifted".into(),
        accuracy: evaluate(backbone, &prompts, corpus, &class_ids, &test_indices)?,
    }];
    let kinds = [
        (ShiftKind::NoiseBoost, "noise_boost"),
        (ShiftKind::PatchPermute, "patch_permute"),
        (ShiftKind::PrototypeDrift, "prototype_drift"),
        (ShiftKind::ContrastScale, "contrast_scale"),
    ];
    for (kind, name) in kinds {
        let shifted = domain_shift(corpus, kind, config.shift_severity, config.seed)?;
        datasets.push(DatasetAccuracy {
            name: name.into(),
            accuracy: evaluate(backbone, &prompts, &shifted, &class_ids, &test_indices)?,
        });
    }
    finish_dataset_report(out_dir, mode_name, loss_trace, datasets)
}

/// Shared tuning step for the transfer protocols: full few-shot training on
/// the home corpus over all of its classes.
fn tune_on_home(
    config: &ExperimentConfig,
    corpus: &SyntheticCorpus,
    backbone: &DualEncoderModel,
    template: Option<&[usize]>,
    out_dir: &Path,
    mode_name: ModeName,
) -> Result<(PromptModel, Option<String>)> {
    let audited = AuditedCorpus::new(corpus);
    let split = few_shot_sample(corpus, config.data.shots, config.seed)?;
    let train_set: Vec<(Tensor, usize)> = split
        .all_train_indices()
        .iter()
        .map(|&i| (audited.patches(i).clone(), corpus.examples[i].class_id))
        .collect();
    let captions: Vec<Vec<usize>> = (0..corpus.classes.len())
        .map(|c| corpus.caption_for(c))
        .collect::<Result<_>>()?;
    tune_mode(config, backbone, &captions, &train_set, template, out_dir, mode_name)
}

fn finish_dataset_report(
    out_dir: &Path,
    mode_name: ModeName,
    loss_trace: Option<String>,
    datasets: Vec<DatasetAccuracy>,
) -> Result<ModeReport> {
    let accuracies: Vec<f64> = datasets.iter().map(|d| d.accuracy).collect();
    let named: Vec<(&str, f64)> =
        datasets.iter().map(|d| (d.name.as_str(), d.accuracy)).collect();
    write_eval_records(&out_dir.join(format!("eval_{}.jsonl", mode_name.as_str())), &named)?;
    Ok(ModeReport {
        mode: mode_name,
        loss_trace,
        splits: None,
        base_accuracy: None,
        new_accuracy: None,
        harmonic_mean: None,
        arith_mean: Some(round2(arithmetic_mean(&accuracies)?)),
        datasets: Some(datasets),
        audit: None,
    })
}

fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut body = String::new();
    for record in trace {
        body.push_str(&serde_json::to_string(record)?);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

fn write_eval_records(path: &Path, entries: &[(&str, f64)]) -> Result<()> {
    let mut body = String::new();
    for (name, accuracy) in entries {
        body.push_str(&serde_json::to_string(&EvalRecord { name, accuracy: *accuracy })?);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Write `report.json` (canonical field order, the wall-time field last) and
/// `report.txt` (aligned per-protocol table with delta rows when several
/// modes ran).
pub fn emit_report(report: &MetricsReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let json_path = out_dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(&json_path, json)?;
    let txt_path = out_dir.join("report.txt");
    fs::write(&txt_path, render_table(report))?;
    Ok((json_path, txt_path))
}

/// Columns of the text table for one mode, in header order.
fn table_columns(report: &MetricsReport, mode: &ModeReport) -> Vec<(String, Option<f64>)> {
    match report.protocol {
        Protocol::FewShot => {
            let s = mode.splits.as_ref();
            vec![
                ("train".into(), s.map(|s| s.train)),
                ("val".into(), s.map(|s| s.val)),
                ("test".into(), s.map(|s| s.test)),
            ]
        }
        Protocol::BaseToNew => vec![
            ("base".into(), mode.base_accuracy),
            ("new".into(), mode.new_accuracy),
            ("H".into(), mode.harmonic_mean),
            ("mean".into(), mode.arith_mean),
        ],
        Protocol::CrossDataset | Protocol::DomainGen => {
            let mut columns: Vec<(String, Option<f64>)> = mode
                .datasets
                .iter()
                .flatten()
                .map(|d| (d.name.clone(), Some(d.accuracy)))
                .collect();
            columns.push(("avg".into(), mode.arith_mean));
            columns
        }
    }
}

fn render_table(report: &MetricsReport) -> String {
    let headers: Vec<String> = report
        .modes
        .first()
        .map(|m| table_columns(report, m).into_iter().map(|(h, _)| h).collect())
        .unwrap_or_default();

    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for mode in &report.modes {
        let cells = table_columns(report, mode)
            .into_iter()
            .map(|(_, v)| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into()))
            .collect();
        rows.push((mode.mode.as_str().to_string(), cells));
    }
    // Delta rows compare the last-listed mode (the headline) to each earlier
    // one, in the style of the "X vs. Y" rows of published comparisons.
    if report.modes.len() > 1 {
        let last = report.modes.last().expect("non-empty");
        let last_cols = table_columns(report, last);
        for earlier in &report.modes[..report.modes.len() - 1] {
            let earlier_cols = table_columns(report, earlier);
            let cells = last_cols
                .iter()
                .zip(&earlier_cols)
                .map(|((_, a), (_, b))| match (a, b) {
                    (Some(a), Some(b)) => format!("{:+.2}", round2(a - b)),
                    _ => "-".into(),
                })
                .collect();
            rows.push((
                format!("{} vs {}", last.mode.as_str(), earlier.mode.as_str()),
                cells,
            ));
        }
    }

    let name_width = rows
        .iter()
        .map(|(name, _)| name.len())
        .chain(std::iter::once("mode".len()))
        .max()
        .unwrap_or(4);
    let col_widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| {
            rows.iter()
                .map(|(_, cells)| cells[i].len())
                .chain(std::iter::once(h.len()))
                .max()
                .unwrap_or(1)
        })
        .collect();

    let mut out = String::new();
    let _ = writeln!(
        out,
        "protocol: {}   seed: {}",
        report.protocol.as_str(),
        report.seed
    );
    let mut header_line = format!("{:<name_width$}", "mode");
    for (h, w) in headers.iter().zip(&col_widths) {
        let _ = write!(header_line, "  {h:>w$}");
    }
    let _ = writeln!(out, "{header_line}");
    let _ = writeln!(out, "{}", "-".repeat(header_line.len()));
    for (name, cells) in &rows {
        let _ = write!(out, "{name:<name_width$}");
        for (cell, w) in cells.iter().zip(&col_widths) {
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    if let Some(pretrain) = &report.pretrain {
        let _ = writeln!(
            out,
            "pretrain: {} steps, final loss {:.4}, tau {:.4}",
            pretrain.steps, pretrain.final_loss, pretrain.final_tau
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PretrainConfig;
    use mudpt::numerics::SgdSchedule;

    /// Tiny-but-real configuration that keeps protocol tests fast: small
    /// towers, few classes, few examples, short schedules, no pretraining.
    fn quick_config(out_dir: &Path) -> ExperimentConfig {
        let mut config = ExperimentConfig::desk_default();
        config.backbone.d_t = 16;
        config.backbone.d_v = 16;
        config.backbone.d_c = 8;
        config.backbone.layers = 2;
        config.backbone.heads = 2;
        config.backbone.patch_count = 4;
        config.backbone.raw_patch_dim = 4;
        config.prompt.length = 4;
        config.prompt.depth = 2;
        config.prompt.injection_width = 16;
        config.prompt.injection_heads = 2;
        config.data.classes = 4;
        config.data.pretrain_classes = 8;
        config.data.shots = 2;
        config.data.train_per_class = 4;
        config.data.val_per_class = 2;
        config.data.test_per_class = 4;
        config.tuning = SgdSchedule { learning_rate: 0.01, epochs: 2, batch_size: 2 };
        config.tuning_steps = Some(6);
        config.pretrain = PretrainConfig {
            schedule: SgdSchedule { learning_rate: 0.03, epochs: 1, batch_size: 4 },
            steps: 0,
        };
        config.output_dir = out_dir.to_string_lossy().into_owned();
        config
    }

    #[test]
    fn few_shot_run_reports_all_three_splits_and_a_trace() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(dir.path());
        let artifacts = run_experiment(&config).unwrap();
        let mode = &artifacts.report.modes[0];
        let splits = mode.splits.as_ref().unwrap();
        for acc in [splits.train, splits.val, splits.test] {
            assert!((0.0..=100.0).contains(&acc));
            assert_eq!(round2(acc), acc, "accuracies carry two decimals");
        }
        let trace_path = dir.path().join(mode.loss_trace.as_ref().unwrap());
        let body = fs::read_to_string(trace_path).unwrap();
        assert_eq!(body.lines().count(), 6, "one record per tuning step");
        for line in body.lines() {
            let record: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(record.get("step").is_some() && record.get("loss").is_some());
        }
        assert!(artifacts.report_json.exists() && artifacts.report_txt.exists());
    }

    #[test]
    fn zero_shot_mode_runs_no_tuning_and_reports_no_trace() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.modes = vec![crate::config::ModeName::ZeroShot];
        let artifacts = run_experiment(&config).unwrap();
        let mode = &artifacts.report.modes[0];
        assert!(mode.loss_trace.is_none());
        assert!(!dir.path().join("trace_zero_shot.jsonl").exists());
        let json = fs::read_to_string(&artifacts.report_json).unwrap();
        assert!(!json.contains("loss_trace"));
    }

    #[test]
    fn base_to_new_reports_harmonic_mean_and_clean_audit() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.protocol = Protocol::BaseToNew;
        let artifacts = run_experiment(&config).unwrap();
        let mode = &artifacts.report.modes[0];
        let base = mode.base_accuracy.unwrap();
        let new = mode.new_accuracy.unwrap();
        if let Some(h) = mode.harmonic_mean {
            assert_eq!(h, harmonic_mean(base, new).unwrap());
        }
        let audit = mode.audit.as_ref().unwrap();
        assert!(audit.hygiene_ok);
        assert_eq!(audit.held_out_class_reads_during_tuning, 0);
        // Two base classes × two shots were read exactly once each.
        assert_eq!(audit.tuning_image_reads, 4);
    }

    #[test]
    fn cross_dataset_lists_home_then_targets_and_averages_them() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.protocol = Protocol::CrossDataset;
        config.transfer_worlds = vec![5];
        let artifacts = run_experiment(&config).unwrap();
        let mode = &artifacts.report.modes[0];
        let datasets = mode.datasets.as_ref().unwrap();
        assert_eq!(datasets.len(), 2);
        assert_eq!(datasets[0].name, format!("world_{}", config.data.world_seed));
        assert_eq!(datasets[1].name, "world_5");
        let mean =
            round2(arithmetic_mean(&datasets.iter().map(|d| d.accuracy).collect::<Vec<_>>()).unwrap());
        assert_eq!(mode.arith_mean, Some(mean));
    }

    #[test]
    fn domain_gen_evaluates_every_shift_kind_plus_unshifted() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.protocol = Protocol::DomainGen;
        let artifacts = run_experiment(&config).unwrap();
        let datasets = artifacts.report.modes[0].datasets.as_ref().unwrap();
        let names: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(
            names,
            ["unshifted", "noise_boost", "patch_permute", "prototype_drift", "contrast_scale"]
        );
    }

    #[test]
    fn reports_are_byte_identical_across_reruns_modulo_wall_time() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config_a = quick_config(dir_a.path());
        config_a.modes = vec![crate::config::ModeName::Mudpt, crate::config::ModeName::ZeroShot];
        let mut config_b = config_a.clone();
        config_b.output_dir = dir_b.path().to_string_lossy().into_owned();
        let a = run_experiment(&config_a).unwrap();
        let b = run_experiment(&config_b).unwrap();

        let strip = |path: &Path, dir: &str| {
            fs::read_to_string(path)
                .unwrap()
                .lines()
                .filter(|l| !l.contains("wall_time_seconds") && !l.contains(dir))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let json_a = strip(&a.report_json, &config_a.output_dir);
        let json_b = strip(&b.report_json, &config_b.output_dir);
        assert_eq!(json_a, json_b);
        // Mode sections and traces are identical too.
        assert_eq!(
            fs::read_to_string(dir_a.path().join("trace_mudpt.jsonl")).unwrap(),
            fs::read_to_string(dir_b.path().join("trace_mudpt.jsonl")).unwrap()
        );
    }

    #[test]
    fn text_report_carries_delta_rows_only_with_multiple_modes() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.modes = vec![crate::config::ModeName::ZeroShot, crate::config::ModeName::Mudpt];
        let artifacts = run_experiment(&config).unwrap();
        let text = fs::read_to_string(&artifacts.report_txt).unwrap();
        assert!(text.contains("mudpt vs zero_shot"), "missing delta row:\n{text}");

        let dir_single = tempfile::tempdir().unwrap();
        let mut single = quick_config(dir_single.path());
        single.modes = vec![crate::config::ModeName::Mudpt];
        let artifacts = run_experiment(&single).unwrap();
        let text = fs::read_to_string(&artifacts.report_txt).unwrap();
        assert!(!text.contains(" vs "), "unexpected delta row:\n{text}");
    }

    #[test]
    fn audited_corpus_counts_exactly_the_requested_reads() {
        let config = quick_config(Path::new("unused"));
        let corpus = gen_corpus(&config.backbone, &config.data, 3).unwrap();
        let audited = AuditedCorpus::new(&corpus);
        assert_eq!(audited.total_reads(), 0);
        audited.patches(0);
        audited.patches(0);
        audited.patches(5);
        assert_eq!(audited.total_reads(), 3);
        let class_of_five: BTreeSet<usize> =
            std::iter::once(corpus.examples[5].class_id).collect();
        let expected: usize = [0usize, 0, 5]
            .iter()
            .filter(|&&i| class_of_five.contains(&corpus.examples[i].class_id))
            .count();
        assert_eq!(audited.reads_for_classes(&class_of_five), expected);
    }
}
