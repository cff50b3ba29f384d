//! Experiment configuration: a single versioned JSON document that pins every
//! knob of a run — model dims, prompt settings, schedules, data layout, seed,
//! and protocol — so that a report is a pure function of the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mudpt::datagen::DataConfig;
use mudpt::encoders::BackboneConfig;
use mudpt::numerics::SgdSchedule;
use mudpt::prompting::{Mode, PromptSettings};
use mudpt::{Error, Result};

/// Bumped whenever the config schema changes shape.
pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Which prompt machinery a run trains. Serialized with snake_case names so
/// config files and `--mode` flags read naturally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Mudpt,
    TextOnly,
    VisualOnly,
    IndependentMultimodal,
    ZeroShot,
}

impl ModeName {
    pub fn to_mode(self) -> Mode {
        match self {
            ModeName::Mudpt => Mode::Mudpt,
            ModeName::TextOnly => Mode::TextOnly,
            ModeName::VisualOnly => Mode::VisualOnly,
            ModeName::IndependentMultimodal => Mode::IndependentMultimodal,
            ModeName::ZeroShot => Mode::ZeroShot,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mudpt" => Ok(ModeName::Mudpt),
            "text_only" => Ok(ModeName::TextOnly),
            "visual_only" => Ok(ModeName::VisualOnly),
            "independent_multimodal" => Ok(ModeName::IndependentMultimodal),
            "zero_shot" => Ok(ModeName::ZeroShot),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected one of mudpt, text_only, visual_only, \
                 independent_multimodal, zero_shot"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Mudpt => "mudpt",
            ModeName::TextOnly => "text_only",
            ModeName::VisualOnly => "visual_only",
            ModeName::IndependentMultimodal => "independent_multimodal",
            ModeName::ZeroShot => "zero_shot",
        }
    }
}

/// Evaluation protocol a run executes after (optional) tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Tune on a few-shot sample, report train/val/test accuracies.
    FewShot,
    /// Split classes in half, tune on base-class images only, report base and
    /// new accuracy plus their harmonic mean.
    BaseToNew,
    /// Tune on the home corpus, evaluate the tuned prompts on corpora drawn
    /// from other latent worlds.
    CrossDataset,
    /// Tune on the home corpus, evaluate on systematically shifted copies of
    /// its test split.
    DomainGen,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::FewShot => "few_shot",
            Protocol::BaseToNew => "base_to_new",
            Protocol::CrossDataset => "cross_dataset",
            Protocol::DomainGen => "domain_gen",
        }
    }
}

/// Contrastive pretraining knobs. `steps: 0` skips pretraining and leaves the
/// backbone at its seeded random initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub schedule: SgdSchedule,
    pub steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        // Calibrated on the default desk-scale corpus: by 800 steps the
        // held-out matched-vs-mismatched similarity gap exceeds 0.9 for each
        // of seeds 0, 1, and 2.
        PretrainConfig {
            schedule: SgdSchedule { learning_rate: 0.03, epochs: 100, batch_size: 8 },
            steps: 800,
        }
    }
}

/// The complete recipe for one experiment invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version; must equal [`CONFIG_FORMAT_VERSION`].
    pub version: u32,
    /// Prompt machineries to run, in report order. Several modes share one
    /// corpus and one pretrained backbone, which is what makes their metrics
    /// comparable.
    pub modes: Vec<ModeName>,
    pub protocol: Protocol,
    pub backbone: BackboneConfig,
    pub prompt: PromptSettings,
    /// Initialize the first text prompt block from the caption template's
    /// word embeddings instead of random rows (requires the prompt length to
    /// equal the template length).
    pub template_init: bool,
    /// Schedule for prompt tuning.
    pub tuning: SgdSchedule,
    /// Hard cap on tuning steps; `None` runs the full epoch count.
    pub tuning_steps: Option<usize>,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    /// Root seed: corpus sampling, weight init, prompt init, batch order, and
    /// coordinate sampling all derive from it.
    pub seed: u64,
    /// Directory that receives report.json, report.txt, and loss traces.
    pub output_dir: String,
    /// Severity handed to every shift kind under the domain_gen protocol.
    pub shift_severity: f64,
    /// Latent-world seeds evaluated under the cross_dataset protocol.
    pub transfer_worlds: Vec<u64>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: every field matches the documented default of the
    /// module it configures.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            version: CONFIG_FORMAT_VERSION,
            modes: vec![ModeName::Mudpt],
            protocol: Protocol::FewShot,
            backbone: BackboneConfig::default(),
            prompt: PromptSettings::default(),
            template_init: true,
            tuning: SgdSchedule::default(),
            // Early stop: past ~100 steps the visually prompted modes start
            // overfitting the base classes (new-class accuracy decays while
            // base saturates), measured on seeded desk runs. The cap applies
            // identically to every mode.
            tuning_steps: Some(100),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            output_dir: "out".into(),
            shift_severity: 0.5,
            transfer_worlds: vec![1, 2],
        }
    }

    /// Check every cross-field constraint. Runs before any compute so a bad
    /// file fails in milliseconds, not after a pretraining run.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported; this build reads version {CONFIG_FORMAT_VERSION}",
                self.version
            )));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must list at least one entry".into()));
        }
        for (i, a) in self.modes.iter().enumerate() {
            if self.modes[..i].contains(a) {
                return Err(Error::Config(format!("mode {} listed twice", a.as_str())));
            }
        }
        self.prompt.validate(self.backbone.layers)?;
        self.data.validate(&self.backbone)?;
        validate_schedule("tuning", &self.tuning)?;
        if self.pretrain.steps > 0 {
            validate_schedule("pretrain", &self.pretrain.schedule)?;
            if self.pretrain.schedule.batch_size < 2 {
                return Err(Error::Config(
                    "pretrain batch_size must be at least 2: the contrastive loss needs \
                     in-batch negatives"
                        .into(),
                ));
            }
        }
        if self.template_init && self.prompt.length != 4 {
            return Err(Error::Config(format!(
                "template_init requires prompt length 4 (the caption template length), got {}",
                self.prompt.length
            )));
        }
        if !(0.0..=1.0).contains(&self.shift_severity) {
            return Err(Error::Config(format!(
                "shift_severity must lie in [0, 1], got {}",
                self.shift_severity
            )));
        }
        if self.protocol == Protocol::CrossDataset {
            if self.transfer_worlds.is_empty() {
                return Err(Error::Config(
                    "cross_dataset requires at least one transfer world".into(),
                ));
            }
            for (i, w) in self.transfer_worlds.iter().enumerate() {
                if *w == self.data.world_seed {
                    return Err(Error::Config(format!(
                        "transfer world {w} equals the home world seed; transfer must leave home"
                    )));
                }
                if self.transfer_worlds[..i].contains(w) {
                    return Err(Error::Config(format!("transfer world {w} listed twice")));
                }
            }
        }
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Template token ids for prompt initialization, when enabled.
    pub fn template_ids(&self) -> Result<Option<Vec<usize>>> {
        if !self.template_init {
            return Ok(None);
        }
        let layout = mudpt::datagen::VocabLayout::for_configs(&self.backbone, &self.data)?;
        Ok(Some(layout.template.to_vec()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        // A file that does not parse is an invalid config, not an IO fault;
        // the distinction decides the process exit code.
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config does not parse: {e}")))?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json)?;
        Ok(())
    }
}

fn validate_schedule(label: &str, schedule: &SgdSchedule) -> Result<()> {
    if !schedule.learning_rate.is_finite() || schedule.learning_rate < 0.0 {
        return Err(Error::Config(format!(
            "{label} learning_rate must be finite and non-negative, got {}",
            schedule.learning_rate
        )));
    }
    if schedule.epochs == 0 {
        return Err(Error::Config(format!("{label} epochs must be positive")));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config(format!("{label} batch_size must be positive")));
    }
    Ok(())
}
