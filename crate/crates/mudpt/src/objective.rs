//! Classification and training objectives over the dual-encoder features.
//!
//! Classification weights are text features of the class-name captions; an
//! image is scored by temperature-scaled cosine similarity against them.
//! Tuning minimizes cross-entropy through prompted forwards of both towers,
//! updating only the prompt-side parameters; contrastive pretraining is the
//! one place the backbone itself (and its temperature) learns.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::BackboneSnapshot;
use crate::datagen::{SplitTag, SyntheticCorpus};
use crate::encoders::{
    layer_graph, project_class_row, project_final_row, DualEncoderModel, ImageVars, LayerVars,
    TextVars, TAU_MAX, TAU_MIN,
};
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, softmax, SgdSchedule, Tape, Tensor, Var};
use crate::prompting::{build_prompt_graph, prompted_encode_text, prompted_image_feature, prompted_text_feature, PromptModel};
use crate::rng::rng_for;

// ── Classifier synthesis and prediction ─────────────────────────────

/// Class text features plus the temperature that scales similarities.
///
/// Rows go stale the moment prompts change — re-synthesize rather than
/// reuse a head across tuning steps.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// One raw (unnormalized) d_c text feature row per class.
    pub class_features: Tensor,
    pub class_tokens: Vec<Vec<usize>>,
    pub tau: f64,
}

/// Encode every class caption through the prompted text tower.
pub fn synthesize_classifier(
    backbone: &DualEncoderModel,
    prompts: &PromptModel,
    class_captions: &[Vec<usize>],
) -> Result<ClassifierHead> {
    if class_captions.len() < 2 {
        return Err(Error::InvalidInput("a classifier needs at least 2 classes".into()));
    }
    let d_c = backbone.config.d_c;
    let mut data = Vec::with_capacity(class_captions.len() * d_c);
    for caption in class_captions {
        let (z, _) = prompted_encode_text(backbone, prompts, caption)?;
        data.extend_from_slice(&z.data);
    }
    Ok(ClassifierHead {
        class_features: Tensor::from_vec(data, &[class_captions.len(), d_c])?,
        class_tokens: class_captions.to_vec(),
        tau: backbone.tau(),
    })
}

/// One classification outcome.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Cosine similarity to each class, divided by τ.
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Argmax class; ties break toward the lowest index.
    pub predicted: usize,
}

/// Score an image feature against a classifier head.
pub fn predict(image_feature: &Tensor, head: &ClassifierHead) -> Result<Prediction> {
    let (m, d_c) = head.class_features.matrix_dims();
    if m < 2 {
        return Err(Error::InvalidInput("classifier head must cover at least 2 classes".into()));
    }
    if image_feature.numel() != d_c {
        return Err(Error::shape("predict image feature", d_c, image_feature.numel()));
    }
    if !(head.tau.is_finite() && head.tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {}", head.tau)));
    }
    let x_norm = image_feature.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if x_norm == 0.0 {
        return Err(Error::Numeric("zero-norm image feature: cosine undefined".into()));
    }
    let inv_tau = 1.0 / head.tau;
    let mut logits = Vec::with_capacity(m);
    for k in 0..m {
        let row = &head.class_features.data[k * d_c..(k + 1) * d_c];
        let z_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if z_norm == 0.0 {
            return Err(Error::Numeric(format!("zero-norm class feature {k}: cosine undefined")));
        }
        let dot: f64 = image_feature.data.iter().zip(row).map(|(a, b)| a * b).sum();
        logits.push(dot / (x_norm * z_norm) * inv_tau);
    }
    let probabilities = softmax(&logits)?;
    let mut predicted = 0;
    for (k, &p) in probabilities.iter().enumerate() {
        if p > probabilities[predicted] {
            predicted = k;
        }
    }
    Ok(Prediction { logits, probabilities, predicted })
}

// ── The tuning objective ────────────────────────────────────────────

/// A fully assembled loss graph: one tape holding the trainable leaves (in
/// [`PromptModel::trainable_params`] order), both prompted towers for every
/// class caption and batch image, and the scalar cross-entropy at the end.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub leaves: Vec<(String, Var)>,
}

/// Build the tuning loss for one batch: mean cross-entropy of
/// cosine-similarity logits over the true labels, differentiable with
/// respect to the prompt-side parameters only. The backbone enters as
/// constants; its temperature is read once and frozen into the graph.
pub fn tuning_loss_graph(
    backbone: &DualEncoderModel,
    prompts: &PromptModel,
    class_captions: &[Vec<usize>],
    images: &[&Tensor],
    labels: &[usize],
) -> Result<LossGraph> {
    if images.is_empty() {
        return Err(Error::InvalidInput("tuning batch is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let m = class_captions.len();
    if m < 2 {
        return Err(Error::InvalidInput("need at least 2 classes to tune against".into()));
    }
    for &label in labels {
        if label >= m {
            return Err(Error::InvalidInput(format!("label {label} outside {m} classes")));
        }
    }
    let w0: Vec<Tensor> =
        class_captions.iter().map(|c| backbone.text.embed(c)).collect::<Result<_>>()?;
    let embedded: Vec<(Tensor, Tensor)> =
        images.iter().map(|im| backbone.image.embed(im)).collect::<Result<_>>()?;

    let mut tape = Tape::new();
    let graph = build_prompt_graph(&mut tape, prompts);
    let text_vars = backbone.text.leaves(&mut tape);
    let image_vars = backbone.image.leaves(&mut tape);

    let z_rows: Vec<Var> = w0
        .iter()
        .map(|w| prompted_text_feature(&mut tape, &text_vars, &graph, w).0)
        .collect();
    let x_rows: Vec<Var> = embedded
        .iter()
        .map(|(c0, p0)| prompted_image_feature(&mut tape, &image_vars, &graph, c0, p0).0)
        .collect();
    let z = tape.concat_rows(&z_rows);
    let x = tape.concat_rows(&x_rows);
    let zn = tape.l2_normalize_rows(z);
    let xn = tape.l2_normalize_rows(x);
    let zt = tape.transpose(zn);
    let sims = tape.matmul(xn, zt);
    let logits = tape.scale(sims, 1.0 / backbone.tau());
    let loss = tape.cross_entropy_mean(logits, labels);
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::Numeric("tuning loss is not finite".into()));
    }
    Ok(LossGraph { tape, loss, leaves: graph.leaves })
}

/// Forward value of the tuning loss.
pub fn tuning_loss(
    backbone: &DualEncoderModel,
    prompts: &PromptModel,
    class_captions: &[Vec<usize>],
    images: &[&Tensor],
    labels: &[usize],
) -> Result<f64> {
    let graph = tuning_loss_graph(backbone, prompts, class_captions, images, labels)?;
    Ok(graph.tape.scalar_value(graph.loss))
}

/// Loss value plus gradients for every trainable parameter, paired with
/// their paths in [`PromptModel::trainable_params`] order.
pub fn tuning_loss_and_grads(
    backbone: &DualEncoderModel,
    prompts: &PromptModel,
    class_captions: &[Vec<usize>],
    images: &[&Tensor],
    labels: &[usize],
) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let mut graph = tuning_loss_graph(backbone, prompts, class_captions, images, labels)?;
    let loss = graph.tape.scalar_value(graph.loss);
    graph.tape.backward(graph.loss);
    let grads = graph
        .leaves
        .iter()
        .map(|(path, var)| (path.clone(), graph.tape.grad(*var).to_vec()))
        .collect();
    Ok((loss, grads))
}

// ── Prompt tuning loop ──────────────────────────────────────────────

/// One entry of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

/// What a tuning run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The tuned prompt-side parameters; the input model is untouched.
    pub prompts: PromptModel,
    pub loss_trace: Vec<StepRecord>,
    pub steps_run: usize,
    /// Backbone content hash, asserted identical before and after the run.
    pub backbone_hash: String,
}

fn check_mode_consistency(prompts: &PromptModel) -> Result<()> {
    let mode = prompts.mode;
    let consistent = prompts.stack.text.is_some() == mode.uses_text_prompts()
        && prompts.stack.visual.is_some() == mode.uses_visual_prompts()
        && prompts.injection.is_some() == mode.uses_injection();
    if consistent {
        Ok(())
    } else {
        Err(Error::Config(format!("prompt state contradicts mode {}", mode.name())))
    }
}

/// SGD over the trainable partition. Batches are drawn by seeded per-epoch
/// shuffles; indices inside a batch are sorted because the mean loss is
/// order-invariant and a canonical order keeps runs reproducible. At most
/// `step_limit` updates run when one is given.
pub fn train(
    backbone: &DualEncoderModel,
    prompts: &PromptModel,
    class_captions: &[Vec<usize>],
    examples: &[(Tensor, usize)],
    schedule: &SgdSchedule,
    step_limit: Option<usize>,
    seed: u64,
) -> Result<TrainOutcome> {
    if !prompts.mode.is_tuned() {
        return Err(Error::Config("mode zero_shot has no trainable parameters to tune".into()));
    }
    check_mode_consistency(prompts)?;
    schedule.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    for (_, label) in examples {
        if *label >= class_captions.len() {
            return Err(Error::InvalidInput(format!(
                "label {label} outside {} classes",
                class_captions.len()
            )));
        }
    }
    let before = BackboneSnapshot::of(backbone);
    let mut tuned = prompts.clone();
    let mut loss_trace = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng_for(seed, &format!("tuning-shuffle-{epoch}")));
        for chunk in order.chunks(schedule.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let images: Vec<&Tensor> = batch.iter().map(|&i| &examples[i].0).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| examples[i].1).collect();
            let (loss, grads) =
                tuning_loss_and_grads(backbone, &tuned, class_captions, &images, &labels)?;
            let current = tuned.trainable_params();
            if current.len() != grads.len() {
                return Err(Error::Internal(
                    "gradient list does not cover the trainable partition".into(),
                ));
            }
            let mut updated = Vec::with_capacity(current.len());
            for ((path, tensor), (grad_path, grad)) in current.into_iter().zip(&grads) {
                if &path != grad_path {
                    return Err(Error::Internal(format!(
                        "gradient order mismatch: {path} vs {grad_path}"
                    )));
                }
                updated.push((path, sgd_step(&tensor, grad, schedule.learning_rate)?));
            }
            tuned.set_trainable_params(&updated)?;
            loss_trace.push(StepRecord { step, loss });
            step += 1;
            if step_limit.is_some_and(|limit| step >= limit) {
                break 'epochs;
            }
        }
    }
    let after = BackboneSnapshot::of(backbone);
    if before.hash != after.hash {
        return Err(Error::Internal("backbone changed during prompt tuning".into()));
    }
    Ok(TrainOutcome { prompts: tuned, loss_trace, steps_run: step, backbone_hash: after.hash })
}

// ── Contrastive pretraining ─────────────────────────────────────────

/// Tape handles for every backbone parameter, including the embedding
/// tables that plain encoding folds in on the host side.
struct BackboneWiring {
    tok_emb: Var,
    text_pos: Var,
    text_vars: TextVars,
    patch_proj: Var,
    class_emb: Var,
    image_pos: Var,
    image_vars: ImageVars,
    log_tau: Var,
}

fn push_layer_leaves(out: &mut Vec<(String, Var)>, prefix: &str, vars: &LayerVars) {
    out.push((format!("{prefix}.ln1_gamma"), vars.ln1_gamma));
    out.push((format!("{prefix}.ln1_beta"), vars.ln1_beta));
    out.push((format!("{prefix}.attn.w_q"), vars.attn.w_q));
    out.push((format!("{prefix}.attn.b_q"), vars.attn.b_q));
    out.push((format!("{prefix}.attn.w_k"), vars.attn.w_k));
    out.push((format!("{prefix}.attn.b_k"), vars.attn.b_k));
    out.push((format!("{prefix}.attn.w_v"), vars.attn.w_v));
    out.push((format!("{prefix}.attn.b_v"), vars.attn.b_v));
    out.push((format!("{prefix}.attn.w_o"), vars.attn.w_o));
    out.push((format!("{prefix}.attn.b_o"), vars.attn.b_o));
    out.push((format!("{prefix}.ln2_gamma"), vars.ln2_gamma));
    out.push((format!("{prefix}.ln2_beta"), vars.ln2_beta));
    out.push((format!("{prefix}.mlp_w1"), vars.mlp_w1));
    out.push((format!("{prefix}.mlp_b1"), vars.mlp_b1));
    out.push((format!("{prefix}.mlp_w2"), vars.mlp_w2));
    out.push((format!("{prefix}.mlp_b2"), vars.mlp_b2));
}

fn backbone_graph(tape: &mut Tape, model: &DualEncoderModel) -> (BackboneWiring, Vec<(String, Var)>) {
    let mut leaves = Vec::new();
    let tok_emb = tape.leaf(&model.text.token_embedding);
    leaves.push(("backbone.text.token_embedding".to_string(), tok_emb));
    let text_pos = tape.leaf(&model.text.positional);
    leaves.push(("backbone.text.positional".to_string(), text_pos));
    let text_vars = model.text.leaves(tape);
    for (i, layer) in text_vars.layers.iter().enumerate() {
        push_layer_leaves(&mut leaves, &format!("backbone.text.layers.{i}"), layer);
    }
    leaves.push(("backbone.text.ln_final_gamma".to_string(), text_vars.ln_final_gamma));
    leaves.push(("backbone.text.ln_final_beta".to_string(), text_vars.ln_final_beta));
    leaves.push(("backbone.text.proj".to_string(), text_vars.proj));

    let patch_proj = tape.leaf(&model.image.patch_proj);
    leaves.push(("backbone.image.patch_proj".to_string(), patch_proj));
    let class_emb = tape.leaf(&model.image.class_embedding);
    leaves.push(("backbone.image.class_embedding".to_string(), class_emb));
    let image_pos = tape.leaf(&model.image.positional);
    leaves.push(("backbone.image.positional".to_string(), image_pos));
    let image_vars = model.image.leaves(tape);
    for (i, layer) in image_vars.layers.iter().enumerate() {
        push_layer_leaves(&mut leaves, &format!("backbone.image.layers.{i}"), layer);
    }
    leaves.push(("backbone.image.ln_post_gamma".to_string(), image_vars.ln_post_gamma));
    leaves.push(("backbone.image.ln_post_beta".to_string(), image_vars.ln_post_beta));
    leaves.push(("backbone.image.proj".to_string(), image_vars.proj));

    let log_tau = tape.leaf(&model.log_tau);
    leaves.push(("backbone.log_tau".to_string(), log_tau));

    (
        BackboneWiring {
            tok_emb,
            text_pos,
            text_vars,
            patch_proj,
            class_emb,
            image_pos,
            image_vars,
            log_tau,
        },
        leaves,
    )
}

/// Text tower with the embedding lookup on the tape, so gradients reach the
/// token and positional tables.
fn pretrain_text_feature(tape: &mut Tape, w: &BackboneWiring, caption: &[usize]) -> Var {
    let positions: Vec<usize> = (0..caption.len()).collect();
    let tok = tape.gather_rows(w.tok_emb, caption);
    let pos = tape.gather_rows(w.text_pos, &positions);
    let mut state = tape.add(tok, pos);
    for layer in &w.text_vars.layers {
        state = layer_graph(tape, layer, state);
    }
    project_final_row(tape, &w.text_vars, state)
}

/// Image tower with patch projection and embeddings on the tape.
fn pretrain_image_feature(tape: &mut Tape, w: &BackboneWiring, patches: &Tensor, patch_count: usize) -> Var {
    let raw = tape.leaf(patches);
    let proj = tape.matmul(raw, w.patch_proj);
    let patch_positions: Vec<usize> = (1..=patch_count).collect();
    let patch_pos = tape.gather_rows(w.image_pos, &patch_positions);
    let p0 = tape.add(proj, patch_pos);
    let class_pos = tape.gather_rows(w.image_pos, &[0]);
    let c0 = tape.add(w.class_emb, class_pos);
    let mut state = tape.concat_rows(&[c0, p0]);
    for layer in &w.image_vars.layers {
        state = layer_graph(tape, layer, state);
    }
    project_class_row(tape, &w.image_vars, state)
}

fn validate_pretrain_pairs(backbone: &DualEncoderModel, pairs: &[(&Tensor, &[usize])]) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::InvalidInput(
            "contrastive batches need at least 2 pairs to supply negatives".into(),
        ));
    }
    let cfg = &backbone.config;
    let vocab = cfg.vocab_size;
    let eos = cfg.eos_token();
    for (patches, caption) in pairs {
        if patches.matrix_dims() != (cfg.patch_count, cfg.raw_patch_dim) {
            return Err(Error::shape(
                "contrastive image",
                format!("{} x {}", cfg.patch_count, cfg.raw_patch_dim),
                format!("{:?}", patches.shape),
            ));
        }
        if caption.is_empty() || caption.len() > cfg.max_text_len {
            return Err(Error::InvalidInput(format!(
                "caption of {} tokens outside 1..={}",
                caption.len(),
                cfg.max_text_len
            )));
        }
        if *caption.last().unwrap() != eos {
            return Err(Error::InvalidInput(format!("caption must end with eos id {eos}")));
        }
        if let Some(&bad) = caption.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary(format!("token id {bad} outside vocabulary of {vocab}")));
        }
    }
    Ok(())
}

fn pretrain_batch_graph(
    backbone: &DualEncoderModel,
    pairs: &[(&Tensor, &[usize])],
) -> Result<(Tape, Var, Vec<(String, Var)>)> {
    validate_pretrain_pairs(backbone, pairs)?;
    let mut tape = Tape::new();
    let (wiring, leaves) = backbone_graph(&mut tape, backbone);
    let x_rows: Vec<Var> = pairs
        .iter()
        .map(|(im, _)| pretrain_image_feature(&mut tape, &wiring, im, backbone.config.patch_count))
        .collect();
    let z_rows: Vec<Var> =
        pairs.iter().map(|(_, cap)| pretrain_text_feature(&mut tape, &wiring, cap)).collect();
    let x = tape.concat_rows(&x_rows);
    let z = tape.concat_rows(&z_rows);
    let xn = tape.l2_normalize_rows(x);
    let zn = tape.l2_normalize_rows(z);
    let zt = tape.transpose(zn);
    let sims = tape.matmul(xn, zt);
    // τ is a trainable leaf here: 1/τ = exp(−log τ) stays on the tape.
    let neg_log_tau = tape.scale(wiring.log_tau, -1.0);
    let inv_tau = tape.exp(neg_log_tau);
    let logits_image_to_text = tape.mul_scalar(sims, inv_tau);
    let matched: Vec<usize> = (0..pairs.len()).collect();
    let loss_image_to_text = tape.cross_entropy_mean(logits_image_to_text, &matched);
    let sims_t = tape.transpose(sims);
    let logits_text_to_image = tape.mul_scalar(sims_t, inv_tau);
    let loss_text_to_image = tape.cross_entropy_mean(logits_text_to_image, &matched);
    let total = tape.add(loss_image_to_text, loss_text_to_image);
    let loss = tape.scale(total, 0.5);
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::Numeric("contrastive loss is not finite".into()));
    }
    Ok((tape, loss, leaves))
}

/// Symmetric contrastive loss of one batch of (image, caption) pairs: mean
/// cross-entropy of the in-batch similarity matrix against its diagonal,
/// taken in both directions and averaged.
pub fn contrastive_batch_loss(
    backbone: &DualEncoderModel,
    pairs: &[(&Tensor, &[usize])],
) -> Result<f64> {
    let (tape, loss, _) = pretrain_batch_graph(backbone, pairs)?;
    Ok(tape.scalar_value(loss))
}

/// What a pretraining run produced.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub loss_trace: Vec<StepRecord>,
    pub steps_run: usize,
    pub final_tau: f64,
}

/// Train the whole backbone (and its temperature) contrastively on a
/// corpus. Each step samples `batch_size` distinct classes and one train
/// image of each, so in-batch negatives are never duplicate captions. log τ
/// is clamped into its legal band after every update.
pub fn contrastive_pretrain(
    backbone: &mut DualEncoderModel,
    corpus: &SyntheticCorpus,
    schedule: &SgdSchedule,
    step_limit: Option<usize>,
    seed: u64,
) -> Result<PretrainOutcome> {
    schedule.validate()?;
    if schedule.batch_size < 2 {
        return Err(Error::InvalidInput(
            "contrastive training needs batches of at least 2 pairs".into(),
        ));
    }
    let class_count = corpus.classes.len();
    if class_count < schedule.batch_size {
        return Err(Error::InvalidInput(format!(
            "{class_count} classes cannot fill distinct-class batches of {}",
            schedule.batch_size
        )));
    }
    let captions: Vec<Vec<usize>> =
        (0..class_count).map(|k| corpus.caption_for(k)).collect::<Result<_>>()?;
    let mut train_pools: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (idx, ex) in corpus.examples.iter().enumerate() {
        if ex.split == SplitTag::Train {
            train_pools[ex.class_id].push(idx);
        }
    }
    if let Some(empty) = train_pools.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {empty} has no train examples to pretrain on")));
    }
    let train_total: usize = train_pools.iter().map(Vec::len).sum();
    let steps_per_epoch = (train_total / schedule.batch_size).max(1);
    let mut total_steps = schedule.epochs * steps_per_epoch;
    if let Some(limit) = step_limit {
        total_steps = total_steps.min(limit);
    }

    let mut loss_trace = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let mut rng = rng_for(seed, &format!("pretrain-step-{step}"));
        let class_pick = rand::seq::index::sample(&mut rng, class_count, schedule.batch_size);
        let chosen: Vec<(usize, usize)> = class_pick
            .into_iter()
            .map(|class_id| {
                let pool = &train_pools[class_id];
                (class_id, pool[rng.gen_range(0..pool.len())])
            })
            .collect();
        let pairs: Vec<(&Tensor, &[usize])> = chosen
            .iter()
            .map(|&(class_id, ex_idx)| {
                (&corpus.examples[ex_idx].patches, captions[class_id].as_slice())
            })
            .collect();
        let (mut tape, loss, leaves) = pretrain_batch_graph(backbone, &pairs)?;
        let loss_value = tape.scalar_value(loss);
        tape.backward(loss);
        let grads: BTreeMap<String, Vec<f64>> =
            leaves.iter().map(|(path, var)| (path.clone(), tape.grad(*var).to_vec())).collect();
        let mut step_error = None;
        backbone.for_each_param_mut(&mut |path, tensor| {
            if step_error.is_some() {
                return;
            }
            if let Some(grad) = grads.get(&path) {
                match sgd_step(tensor, grad, schedule.learning_rate) {
                    Ok(next) => *tensor = next,
                    Err(e) => step_error = Some(e),
                }
            }
        });
        if let Some(e) = step_error {
            return Err(e);
        }
        backbone.log_tau.data[0] = backbone.log_tau.data[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());
        loss_trace.push(StepRecord { step, loss: loss_value });
    }
    Ok(PretrainOutcome { loss_trace, steps_run: total_steps, final_tau: backbone.tau() })
}

/// Matched-minus-mismatched mean cosine similarity on the validation split:
/// how much better each image agrees with its own class caption than with
/// the other classes' captions.
pub fn alignment_gap(backbone: &DualEncoderModel, corpus: &SyntheticCorpus) -> Result<f64> {
    let val = corpus.example_indices(SplitTag::Val);
    if val.is_empty() {
        return Err(Error::InvalidInput("corpus has no validation examples".into()));
    }
    let class_count = corpus.classes.len();
    if class_count < 2 {
        return Err(Error::InvalidInput("alignment gap needs at least 2 classes".into()));
    }
    let mut class_features = Vec::with_capacity(class_count);
    for k in 0..class_count {
        let caption = corpus.caption_for(k)?;
        class_features.push(normalized(&backbone.text_features(&caption)?.data)?);
    }
    let mut matched_sum = 0.0;
    let mut mismatched_sum = 0.0;
    let mut mismatched_count = 0usize;
    for &idx in &val {
        let ex = &corpus.examples[idx];
        let x = normalized(&backbone.image_features(&ex.patches)?.data)?;
        for (k, z) in class_features.iter().enumerate() {
            let cos: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
            if k == ex.class_id {
                matched_sum += cos;
            } else {
                mismatched_sum += cos;
                mismatched_count += 1;
            }
        }
    }
    Ok(matched_sum / val.len() as f64 - mismatched_sum / mismatched_count as f64)
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric("zero-norm feature: cosine undefined".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}
