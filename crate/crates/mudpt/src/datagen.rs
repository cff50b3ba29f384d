//! Deterministic synthetic image-text world.
//!
//! Classes are (attribute, object) token pairs. Each token owns a latent
//! patch pattern drawn from the world seed alone; a class prototype is
//! attribute pattern + object pattern + γ · (their elementwise product), so
//! unseen pairings of seen tokens are partially predictable from text — the
//! property that makes zero-shot transfer and base-to-new generalization
//! meaningful rather than vacuous. Corpus sampling seeds control only which
//! noisy examples are drawn around those prototypes, letting two corpora
//! share a world while differing in every image.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::BackboneConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::rng_for;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Everything that determines the synthetic world and how it is sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Downstream classification classes (m).
    pub classes: usize,
    /// Classes reserved for contrastive pretraining; their (attribute,
    /// object) pairs are disjoint from the downstream ones.
    pub pretrain_classes: usize,
    pub attr_pool: usize,
    pub obj_pool: usize,
    /// Seed of the latent world: token patterns and the class-pair
    /// assignment. Distinct from corpus sampling seeds.
    pub world_seed: u64,
    pub noise_sigma: f64,
    /// Weight γ of the attribute⊙object interaction term in prototypes.
    pub interaction_strength: f64,
    pub shots: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub pretrain_train_per_class: usize,
    pub pretrain_val_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 16,
            pretrain_classes: 64,
            attr_pool: 10,
            obj_pool: 8,
            world_seed: 0,
            noise_sigma: 0.1,
            interaction_strength: 0.5,
            shots: 16,
            train_per_class: 20,
            val_per_class: 4,
            test_per_class: 32,
            pretrain_train_per_class: 8,
            pretrain_val_per_class: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.classes < 4 {
            return Err(Error::Config("need at least 4 downstream classes".into()));
        }
        if backbone.patch_count < 4 {
            return Err(Error::Config("need at least a 4-patch grid".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        if !self.interaction_strength.is_finite() {
            return Err(Error::Config("interaction_strength must be finite".into()));
        }
        if self.attr_pool == 0 || self.obj_pool == 0 {
            return Err(Error::Config("token pools must be non-empty".into()));
        }
        if self.classes + self.pretrain_classes > self.attr_pool * self.obj_pool {
            return Err(Error::Config(format!(
                "{} downstream + {} pretraining classes exceed the {} available attribute-object pairs",
                self.classes,
                self.pretrain_classes,
                self.attr_pool * self.obj_pool
            )));
        }
        if self.shots == 0 || self.train_per_class < self.shots {
            return Err(Error::Config(format!(
                "train_per_class {} must cover shots {}",
                self.train_per_class, self.shots
            )));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config("test_per_class must be positive".into()));
        }
        if self.pretrain_train_per_class == 0 {
            return Err(Error::Config("pretrain_train_per_class must be positive".into()));
        }
        VocabLayout::for_configs(backbone, self).map(|_| ())
    }
}

/// Fixed carve-up of the token id space: four caption-template tokens, the
/// attribute pool, the object pool, then eos as the final id.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabLayout {
    pub template: [usize; 4],
    pub attr_start: usize,
    pub attr_count: usize,
    pub obj_start: usize,
    pub obj_count: usize,
    pub eos: usize,
}

impl VocabLayout {
    pub fn for_configs(backbone: &BackboneConfig, data: &DataConfig) -> Result<Self> {
        let needed = 4 + data.attr_pool + data.obj_pool + 1;
        if needed > backbone.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold 4 template + {} attribute + {} object tokens + eos ({needed} needed)",
                backbone.vocab_size, data.attr_pool, data.obj_pool
            )));
        }
        if backbone.max_text_len < 7 {
            return Err(Error::Config(
                "max_text_len must fit a 4-token template, a 2-token name, and eos".into(),
            ));
        }
        Ok(VocabLayout {
            template: [0, 1, 2, 3],
            attr_start: 4,
            attr_count: data.attr_pool,
            obj_start: 4 + data.attr_pool,
            obj_count: data.obj_pool,
            eos: backbone.eos_token(),
        })
    }

    pub fn attr_token(&self, index: usize) -> usize {
        debug_assert!(index < self.attr_count);
        self.attr_start + index
    }

    pub fn obj_token(&self, index: usize) -> usize {
        debug_assert!(index < self.obj_count);
        self.obj_start + index
    }

    /// Caption/classifier token sequence for a 2-token class name:
    /// the template, the name, then eos.
    pub fn caption(&self, name_tokens: &[usize]) -> Vec<usize> {
        let mut out = self.template.to_vec();
        out.extend_from_slice(name_tokens);
        out.push(self.eos);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub class_id: usize,
    /// [attribute token, object token].
    pub name_tokens: Vec<usize>,
    pub prototype: Tensor,
}

#[derive(Debug, Clone)]
pub struct Example {
    pub class_id: usize,
    pub split: SplitTag,
    pub patches: Tensor,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub version: u32,
    pub backbone_config: BackboneConfig,
    pub data_config: DataConfig,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub examples: Vec<Example>,
}

impl SyntheticCorpus {
    pub fn class(&self, class_id: usize) -> Result<&ClassSpec> {
        self.classes
            .get(class_id)
            .ok_or_else(|| Error::Data(format!("class id {class_id} outside corpus of {}", self.classes.len())))
    }

    pub fn example_indices(&self, split: SplitTag) -> Vec<usize> {
        (0..self.examples.len()).filter(|&i| self.examples[i].split == split).collect()
    }

    /// Caption token sequence for one class.
    pub fn caption_for(&self, class_id: usize) -> Result<Vec<usize>> {
        let layout = VocabLayout::for_configs(&self.backbone_config, &self.data_config)?;
        Ok(layout.caption(&self.class(class_id)?.name_tokens))
    }
}

/// The latent patch pattern owned by one token, a pure function of the world
/// seed and the token id.
fn token_pattern(world_seed: u64, token: usize, patch_count: usize, raw_patch_dim: usize) -> Tensor {
    let mut rng = rng_for(world_seed, &format!("token-pattern-{token}"));
    Tensor::randn(&[patch_count, raw_patch_dim], 1.0, &mut rng)
}

/// Class prototype: attribute pattern + object pattern + γ·(elementwise
/// product). Reconstructible from (configs, name tokens) alone.
pub fn prototype_for(
    backbone: &BackboneConfig,
    data: &DataConfig,
    attr_token: usize,
    obj_token: usize,
) -> Tensor {
    let a = token_pattern(data.world_seed, attr_token, backbone.patch_count, backbone.raw_patch_dim);
    let o = token_pattern(data.world_seed, obj_token, backbone.patch_count, backbone.raw_patch_dim);
    let gamma = data.interaction_strength;
    let data_vec: Vec<f64> = a
        .data
        .iter()
        .zip(&o.data)
        .map(|(x, y)| x + y + gamma * x * y)
        .collect();
    Tensor::from_vec(data_vec, &[backbone.patch_count, backbone.raw_patch_dim]).expect("shapes agree")
}

/// The world's (attribute, object) pair order: a seeded shuffle of the full
/// cross product. Downstream classes take the first `classes` pairs,
/// pretraining classes the next `pretrain_classes`.
fn class_pairs(data: &DataConfig, layout: &VocabLayout) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(data.attr_pool * data.obj_pool);
    for a in 0..data.attr_pool {
        for o in 0..data.obj_pool {
            pairs.push((layout.attr_token(a), layout.obj_token(o)));
        }
    }
    let mut rng = rng_for(data.world_seed, "class-pair-order");
    pairs.shuffle(&mut rng);
    pairs
}

fn build_corpus(
    backbone: &BackboneConfig,
    data: &DataConfig,
    seed: u64,
    pairs: &[(usize, usize)],
    per_class: &[(SplitTag, usize)],
    example_tag: &str,
) -> Result<SyntheticCorpus> {
    let mut classes = Vec::with_capacity(pairs.len());
    let mut examples = Vec::new();
    let noise = Normal::new(0.0, data.noise_sigma)
        .map_err(|e| Error::Config(format!("invalid noise sigma: {e}")))?;
    for (class_id, &(attr_token, obj_token)) in pairs.iter().enumerate() {
        let prototype = prototype_for(backbone, data, attr_token, obj_token);
        let mut rng = rng_for(seed, &format!("{example_tag}-{class_id}"));
        for &(split, count) in per_class {
            for _ in 0..count {
                let patches: Vec<f64> =
                    prototype.data.iter().map(|p| p + noise.sample(&mut rng)).collect();
                examples.push(Example {
                    class_id,
                    split,
                    patches: Tensor::from_vec(
                        patches,
                        &[backbone.patch_count, backbone.raw_patch_dim],
                    )?,
                });
            }
        }
        classes.push(ClassSpec { class_id, name_tokens: vec![attr_token, obj_token], prototype });
    }
    Ok(SyntheticCorpus {
        version: CORPUS_FORMAT_VERSION,
        backbone_config: backbone.clone(),
        data_config: data.clone(),
        seed,
        classes,
        examples,
    })
}

/// The downstream classification corpus: `classes` classes with train, val,
/// and test splits, fully determined by (configs, seed).
pub fn gen_corpus(backbone: &BackboneConfig, data: &DataConfig, seed: u64) -> Result<SyntheticCorpus> {
    backbone.validate()?;
    data.validate(backbone)?;
    let layout = VocabLayout::for_configs(backbone, data)?;
    let pairs = class_pairs(data, &layout);
    let downstream = &pairs[..data.classes];
    build_corpus(
        backbone,
        data,
        seed,
        downstream,
        &[
            (SplitTag::Train, data.train_per_class),
            (SplitTag::Val, data.val_per_class),
            (SplitTag::Test, data.test_per_class),
        ],
        "examples",
    )
}

/// The pretraining corpus: a larger class set whose (attribute, object)
/// pairs never collide with the downstream ones, emulating broad pretraining
/// data against downstream novelty.
pub fn gen_pretrain_corpus(
    backbone: &BackboneConfig,
    data: &DataConfig,
    seed: u64,
) -> Result<SyntheticCorpus> {
    backbone.validate()?;
    data.validate(backbone)?;
    let layout = VocabLayout::for_configs(backbone, data)?;
    let pairs = class_pairs(data, &layout);
    let pretrain = &pairs[data.classes..data.classes + data.pretrain_classes];
    build_corpus(
        backbone,
        data,
        seed,
        pretrain,
        &[
            (SplitTag::Train, data.pretrain_train_per_class),
            (SplitTag::Val, data.pretrain_val_per_class),
        ],
        "pretrain-examples",
    )
}

/// Per-class few-shot training selection plus the untouched test set.
#[derive(Debug, Clone)]
pub struct FewShotSplit {
    pub shots: usize,
    /// Selected training example indices, grouped per class id.
    pub train_by_class: Vec<Vec<usize>>,
    /// All test-split example indices.
    pub test_indices: Vec<usize>,
}

impl FewShotSplit {
    pub fn all_train_indices(&self) -> Vec<usize> {
        self.train_by_class.iter().flatten().copied().collect()
    }
}

/// Draw exactly `shots` train-split examples per class without replacement.
pub fn few_shot_sample(corpus: &SyntheticCorpus, shots: usize, seed: u64) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(Error::InvalidInput("shots must be positive".into()));
    }
    let mut train_by_class = vec![Vec::new(); corpus.classes.len()];
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); corpus.classes.len()];
    for (idx, ex) in corpus.examples.iter().enumerate() {
        if ex.split == SplitTag::Train {
            pools[ex.class_id].push(idx);
        }
    }
    for (class_id, pool) in pools.into_iter().enumerate() {
        if pool.len() < shots {
            return Err(Error::Data(format!(
                "class {class_id} has only {} train examples, needs {shots}",
                pool.len()
            )));
        }
        let mut chosen: Vec<usize> = if pool.len() == shots {
            pool
        } else {
            let mut rng = rng_for(seed, &format!("few-shot-{class_id}"));
            rand::seq::index::sample(&mut rng, pool.len(), shots)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        chosen.sort_unstable();
        train_by_class[class_id] = chosen;
    }
    Ok(FewShotSplit { shots, train_by_class, test_indices: corpus.example_indices(SplitTag::Test) })
}

/// Class-level halves for base-to-new generalization.
#[derive(Debug, Clone)]
pub struct BaseNewSplit {
    pub base: Vec<usize>,
    pub new: Vec<usize>,
}

/// Seeded shuffle then halve; an odd count leaves the extra class in base.
pub fn base_new_split(class_ids: &[usize], seed: u64) -> Result<BaseNewSplit> {
    if class_ids.len() < 2 {
        return Err(Error::Config("base-to-new needs at least 2 classes".into()));
    }
    let mut shuffled = class_ids.to_vec();
    let mut rng = rng_for(seed, "base-new-split");
    shuffled.shuffle(&mut rng);
    let cut = shuffled.len().div_ceil(2);
    let mut base = shuffled[..cut].to_vec();
    let mut new = shuffled[cut..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    Ok(BaseNewSplit { base, new })
}

/// Label-preserving input corruptions for out-of-distribution evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    NoiseBoost,
    PatchPermute,
    PrototypeDrift,
    ContrastScale,
}

/// Transform every image in the corpus; classes, names, labels, and splits
/// are untouched. Severity 0 is the identity for every kind.
pub fn domain_shift(
    corpus: &SyntheticCorpus,
    kind: ShiftKind,
    severity: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Config(format!("shift severity must lie in [0, 1], got {severity}")));
    }
    let mut out = corpus.clone();
    if severity == 0.0 {
        return Ok(out);
    }
    let m = corpus.backbone_config.patch_count;
    let d = corpus.backbone_config.raw_patch_dim;
    match kind {
        ShiftKind::NoiseBoost => {
            let noise = Normal::new(0.0, severity).expect("severity validated");
            for (idx, ex) in out.examples.iter_mut().enumerate() {
                let mut rng = rng_for(seed, &format!("noise-boost-{idx}"));
                for v in ex.patches.data.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
        }
        ShiftKind::PatchPermute => {
            // Shuffle a severity-sized subset of each image's patch slots.
            let count = ((severity * m as f64).round() as usize).min(m);
            for (idx, ex) in out.examples.iter_mut().enumerate() {
                if count < 2 {
                    continue;
                }
                let mut rng = rng_for(seed, &format!("patch-permute-{idx}"));
                let slots: Vec<usize> =
                    rand::seq::index::sample(&mut rng, m, count).into_iter().collect();
                let mut order = slots.clone();
                order.shuffle(&mut rng);
                let original = ex.patches.data.clone();
                for (&dst, &src) in slots.iter().zip(&order) {
                    ex.patches.data[dst * d..(dst + 1) * d]
                        .copy_from_slice(&original[src * d..(src + 1) * d]);
                }
            }
        }
        ShiftKind::PrototypeDrift => {
            // One fixed drift direction per class, scaled by severity.
            let mut drifts = Vec::with_capacity(out.classes.len());
            for class in &out.classes {
                let mut rng = rng_for(seed, &format!("drift-{}", class.class_id));
                drifts.push(Tensor::randn(&[m, d], 1.0, &mut rng));
            }
            for ex in out.examples.iter_mut() {
                for (v, dv) in ex.patches.data.iter_mut().zip(&drifts[ex.class_id].data) {
                    *v += severity * dv;
                }
            }
        }
        ShiftKind::ContrastScale => {
            // Exaggerate each patch's deviation from its image mean.
            for ex in out.examples.iter_mut() {
                let mean = ex.patches.data.iter().sum::<f64>() / ex.patches.data.len() as f64;
                for v in ex.patches.data.iter_mut() {
                    *v = mean + (1.0 + severity) * (*v - mean);
                }
            }
        }
    }
    Ok(out)
}

// ── Line-delimited JSON persistence ─────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    version: u32,
    backbone_config: BackboneConfig,
    data_config: DataConfig,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    class_id: usize,
    name_tokens: Vec<usize>,
    split: SplitTag,
    patches: Vec<Vec<f64>>,
}

/// Write a corpus as line-delimited JSON: one header line, then one line per
/// example.
pub fn save_corpus(corpus: &SyntheticCorpus, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    let header = CorpusHeader {
        version: corpus.version,
        backbone_config: corpus.backbone_config.clone(),
        data_config: corpus.data_config.clone(),
        seed: corpus.seed,
    };
    writeln!(writer, "{}", serde_json::to_string(&header)?)?;
    let d = corpus.backbone_config.raw_patch_dim;
    for ex in &corpus.examples {
        let record = ExampleRecord {
            class_id: ex.class_id,
            name_tokens: corpus.classes[ex.class_id].name_tokens.clone(),
            split: ex.split,
            patches: ex.patches.data.chunks(d).map(|c| c.to_vec()).collect(),
        };
        writeln!(writer, "{}", serde_json::to_string(&record)?)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a corpus back, rejecting unknown format versions and inconsistent
/// records. Prototypes are reconstructed from the config echo and each
/// class's name tokens.
pub fn load_corpus(path: &Path) -> Result<SyntheticCorpus> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Data("corpus file is empty".into()))??;
    let header: CorpusHeader = serde_json::from_str(&header_line)?;
    if header.version != CORPUS_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "corpus format version {} not supported (expected {CORPUS_FORMAT_VERSION})",
            header.version
        )));
    }
    header.backbone_config.validate()?;
    header.data_config.validate(&header.backbone_config)?;
    let m = header.backbone_config.patch_count;
    let d = header.backbone_config.raw_patch_dim;

    let mut classes: Vec<Option<ClassSpec>> = Vec::new();
    let mut examples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord = serde_json::from_str(&line)?;
        if record.patches.len() != m || record.patches.iter().any(|row| row.len() != d) {
            return Err(Error::Data(format!(
                "example of class {} has a malformed {}-patch grid",
                record.class_id, record.patches.len()
            )));
        }
        if record.name_tokens.len() != 2 {
            return Err(Error::Data(format!(
                "class {} name must be exactly 2 tokens",
                record.class_id
            )));
        }
        if classes.len() <= record.class_id {
            classes.resize(record.class_id + 1, None);
        }
        match &classes[record.class_id] {
            None => {
                let prototype = prototype_for(
                    &header.backbone_config,
                    &header.data_config,
                    record.name_tokens[0],
                    record.name_tokens[1],
                );
                classes[record.class_id] = Some(ClassSpec {
                    class_id: record.class_id,
                    name_tokens: record.name_tokens.clone(),
                    prototype,
                });
            }
            Some(existing) => {
                if existing.name_tokens != record.name_tokens {
                    return Err(Error::Data(format!(
                        "class {} appears with conflicting names",
                        record.class_id
                    )));
                }
            }
        }
        let flat: Vec<f64> = record.patches.into_iter().flatten().collect();
        examples.push(Example {
            class_id: record.class_id,
            split: record.split,
            patches: Tensor::from_vec(flat, &[m, d])?,
        });
    }
    let classes: Vec<ClassSpec> = classes
        .into_iter()
        .enumerate()
        .map(|(id, c)| c.ok_or_else(|| Error::Data(format!("class {id} has no examples"))))
        .collect::<Result<_>>()?;
    Ok(SyntheticCorpus {
        version: header.version,
        backbone_config: header.backbone_config,
        data_config: header.data_config,
        seed: header.seed,
        classes,
        examples,
    })
}
