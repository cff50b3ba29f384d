//! Deep prompt stacks, cross-modal injection, fusion, and the prompted
//! forward passes.
//!
//! Both towers carry a stack of learnable prompt blocks, one per layer up to
//! a depth `L`. The injection model maps each depth's text and visual blocks
//! into a shared width, attends each modality over the other, and maps back
//! into the opposite modality's width; fusing adds those cross-modality
//! prompts onto the originals. A prompted forward feeds the depth-0 blocks
//! unfused, swaps in the fused block after each of the first `L − 1` layers
//! (discarding the layer's own prompt-position outputs), and lets deeper
//! layers transform prompt positions like ordinary tokens.
//!
//! Everything here is trainable; the backbone stays frozen. The partition is
//! explicit and audited by parameter-path prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{layer_graph, DualEncoderModel, TextVars, ImageVars};
use crate::error::{Error, Result};
use crate::numerics::{attention_graph, AttentionParams, AttentionVars, Tape, Tensor, Var};
use crate::rng::rng_for;

/// Which prompting machinery is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mudpt,
    TextOnly,
    VisualOnly,
    IndependentMultimodal,
    ZeroShot,
}

impl Mode {
    pub fn uses_text_prompts(&self) -> bool {
        matches!(self, Mode::Mudpt | Mode::TextOnly | Mode::IndependentMultimodal)
    }

    pub fn uses_visual_prompts(&self) -> bool {
        matches!(self, Mode::Mudpt | Mode::VisualOnly | Mode::IndependentMultimodal)
    }

    pub fn uses_injection(&self) -> bool {
        matches!(self, Mode::Mudpt)
    }

    /// Whether the mode has anything to tune at all.
    pub fn is_tuned(&self) -> bool {
        !matches!(self, Mode::ZeroShot)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Mudpt => "mudpt",
            Mode::TextOnly => "text_only",
            Mode::VisualOnly => "visual_only",
            Mode::IndependentMultimodal => "independent_multimodal",
            Mode::ZeroShot => "zero_shot",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mudpt" => Ok(Mode::Mudpt),
            "text_only" => Ok(Mode::TextOnly),
            "visual_only" => Ok(Mode::VisualOnly),
            "independent_multimodal" => Ok(Mode::IndependentMultimodal),
            "zero_shot" => Ok(Mode::ZeroShot),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected one of mudpt, text_only, visual_only, independent_multimodal, zero_shot"
            ))),
        }
    }
}

/// Prompt hyper-parameters carried by experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSettings {
    /// Tokens per prompt block (n).
    pub length: usize,
    /// Layers that receive a fresh block (L).
    pub depth: usize,
    /// Shared width of the injection attention (d_j).
    pub injection_width: usize,
    pub injection_heads: usize,
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings { length: 4, depth: 4, injection_width: 32, injection_heads: 2 }
    }
}

impl PromptSettings {
    pub fn validate(&self, backbone_layers: usize) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        if self.depth == 0 || self.depth > backbone_layers {
            return Err(Error::Config(format!(
                "prompt depth {} must lie in [1, {backbone_layers}]",
                self.depth
            )));
        }
        if self.injection_heads == 0 || self.injection_width % self.injection_heads != 0 {
            return Err(Error::Config(format!(
                "injection width {} must be divisible by head count {}",
                self.injection_width, self.injection_heads
            )));
        }
        Ok(())
    }
}

/// The learnable prompt blocks; either side may be absent depending on mode.
/// Stacks are stored flat as (L·n) × d matrices, depth-major.
#[derive(Debug, Clone)]
pub struct PromptStack {
    pub text: Option<Tensor>,
    pub visual: Option<Tensor>,
    pub depth: usize,
    pub length: usize,
}

/// The cross-modal injection network. One attention block of width `d_j` is
/// shared by both directions and across all depths; the four adapters are
/// plain linear maps without biases.
#[derive(Debug, Clone)]
pub struct InjectionParams {
    /// d_t → d_j.
    pub text_in: Tensor,
    /// d_v → d_j.
    pub visual_in: Tensor,
    pub attn: AttentionParams,
    /// d_j → d_t; produces the visual-derived prompt added to the text stack.
    pub out_to_text: Tensor,
    /// d_j → d_v; produces the text-derived prompt added to the visual stack.
    pub out_to_visual: Tensor,
}

impl InjectionParams {
    pub fn init<R: Rng>(d_t: usize, d_v: usize, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(InjectionParams {
            text_in: Tensor::randn(&[d_t, width], 0.02, rng),
            visual_in: Tensor::randn(&[d_v, width], 0.02, rng),
            attn: AttentionParams::init(width, heads, rng)?,
            out_to_text: Tensor::randn(&[width, d_t], 0.02, rng),
            out_to_visual: Tensor::randn(&[width, d_v], 0.02, rng),
        })
    }

    /// Zero both output adapters, silencing the cross-modal pathway while
    /// keeping every parameter in place.
    pub fn silence_outputs(&mut self) {
        self.out_to_text = Tensor::zeros(&self.out_to_text.shape);
        self.out_to_visual = Tensor::zeros(&self.out_to_visual.shape);
    }
}

/// Fused prompt stacks: `fused_text` = T + V′ and `fused_visual` = V + T′.
#[derive(Debug, Clone)]
pub struct FusedPrompts {
    pub fused_text: Tensor,
    pub fused_visual: Tensor,
}

/// Prompt stacks plus optional injection for one tuning mode.
#[derive(Debug, Clone)]
pub struct PromptModel {
    pub mode: Mode,
    pub stack: PromptStack,
    pub injection: Option<InjectionParams>,
}

impl PromptModel {
    /// Build the prompt machinery a mode needs. The depth-0 text block is
    /// initialized from the embeddings of `template_ids` when exactly
    /// `length` ids are given; everything else draws from the seeded RNG.
    pub fn init(
        backbone: &DualEncoderModel,
        mode: Mode,
        settings: &PromptSettings,
        template_ids: Option<&[usize]>,
        seed: u64,
    ) -> Result<Self> {
        settings.validate(backbone.config.layers)?;
        let mut rng = rng_for(seed, "prompt-init");
        let (l, n) = (settings.depth, settings.length);
        let d_t = backbone.config.d_t;
        let d_v = backbone.config.d_v;

        let text = if mode.uses_text_prompts() {
            let mut stack = Tensor::randn(&[l * n, d_t], 0.02, &mut rng);
            if let Some(ids) = template_ids {
                if ids.len() == n {
                    let vocab = backbone.text.vocab_size();
                    for (row, &id) in ids.iter().enumerate() {
                        if id >= vocab {
                            return Err(Error::Vocabulary(format!(
                                "template token id {id} outside vocabulary of {vocab}"
                            )));
                        }
                        let src = &backbone.text.token_embedding.data[id * d_t..(id + 1) * d_t];
                        stack.data[row * d_t..(row + 1) * d_t].copy_from_slice(src);
                    }
                }
            }
            Some(stack)
        } else {
            None
        };
        let visual = if mode.uses_visual_prompts() {
            Some(Tensor::randn(&[l * n, d_v], 0.02, &mut rng))
        } else {
            None
        };
        let injection = if mode.uses_injection() {
            Some(InjectionParams::init(
                d_t,
                d_v,
                settings.injection_width,
                settings.injection_heads,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(PromptModel {
            mode,
            stack: PromptStack { text, visual, depth: l, length: n },
            injection,
        })
    }

    /// Every trainable parameter as (dotted path, tensor clone), in the fixed
    /// order the tape-building code also uses.
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &self.stack.text {
            out.push(("prompt.text_stack".to_string(), t.clone()));
        }
        if let Some(v) = &self.stack.visual {
            out.push(("prompt.visual_stack".to_string(), v.clone()));
        }
        if let Some(inj) = &self.injection {
            out.push(("injection.text_in".to_string(), inj.text_in.clone()));
            out.push(("injection.visual_in".to_string(), inj.visual_in.clone()));
            out.push(("injection.attn.w_q".to_string(), inj.attn.w_q.clone()));
            out.push(("injection.attn.b_q".to_string(), inj.attn.b_q.clone()));
            out.push(("injection.attn.w_k".to_string(), inj.attn.w_k.clone()));
            out.push(("injection.attn.b_k".to_string(), inj.attn.b_k.clone()));
            out.push(("injection.attn.w_v".to_string(), inj.attn.w_v.clone()));
            out.push(("injection.attn.b_v".to_string(), inj.attn.b_v.clone()));
            out.push(("injection.attn.w_o".to_string(), inj.attn.w_o.clone()));
            out.push(("injection.attn.b_o".to_string(), inj.attn.b_o.clone()));
            out.push(("injection.out_to_text".to_string(), inj.out_to_text.clone()));
            out.push(("injection.out_to_visual".to_string(), inj.out_to_visual.clone()));
        }
        out
    }

    /// Overwrite trainable parameters from a list produced by
    /// [`Self::trainable_params`] (or an updated copy of it).
    pub fn set_trainable_params(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        for (path, value) in params {
            let slot: &mut Tensor = match path.as_str() {
                "prompt.text_stack" => self.stack.text.as_mut().ok_or_else(|| {
                    Error::Config("this mode has no text prompt stack".into())
                })?,
                "prompt.visual_stack" => self.stack.visual.as_mut().ok_or_else(|| {
                    Error::Config("this mode has no visual prompt stack".into())
                })?,
                other => {
                    let inj = self.injection.as_mut().ok_or_else(|| {
                        Error::Config("this mode has no injection parameters".into())
                    })?;
                    match other {
                        "injection.text_in" => &mut inj.text_in,
                        "injection.visual_in" => &mut inj.visual_in,
                        "injection.attn.w_q" => &mut inj.attn.w_q,
                        "injection.attn.b_q" => &mut inj.attn.b_q,
                        "injection.attn.w_k" => &mut inj.attn.w_k,
                        "injection.attn.b_k" => &mut inj.attn.b_k,
                        "injection.attn.w_v" => &mut inj.attn.w_v,
                        "injection.attn.b_v" => &mut inj.attn.b_v,
                        "injection.attn.w_o" => &mut inj.attn.w_o,
                        "injection.attn.b_o" => &mut inj.attn.b_o,
                        "injection.out_to_text" => &mut inj.out_to_text,
                        "injection.out_to_visual" => &mut inj.out_to_visual,
                        unknown => {
                            return Err(Error::Internal(format!(
                                "unknown trainable parameter path {unknown}"
                            )))
                        }
                    }
                }
            };
            if slot.shape != value.shape {
                return Err(Error::shape(path, format!("{:?}", slot.shape), format!("{:?}", value.shape)));
            }
            slot.data.clone_from(&value.data);
        }
        Ok(())
    }
}

/// Classify a parameter path: trainable (prompt/injection), frozen
/// (backbone), or unknown — the last is an internal error by construction.
pub fn path_is_trainable(path: &str) -> Result<bool> {
    if path.starts_with("prompt.") || path.starts_with("injection.") {
        Ok(true)
    } else if path.starts_with("backbone.") {
        Ok(false)
    } else {
        Err(Error::Internal(format!("parameter path {path} matches no known partition prefix")))
    }
}

/// The disjoint, exhaustive split of all model parameters.
#[derive(Debug, Clone)]
pub struct ParamPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

impl ParamPartition {
    pub fn of(backbone: &DualEncoderModel, prompts: &PromptModel) -> Result<Self> {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        let mut verdicts: Vec<Result<bool>> = Vec::new();
        backbone.for_each_param(&mut |path, _| {
            verdicts.push(path_is_trainable(&path).map(|t| {
                if t { trainable.push(path) } else { frozen.push(path) }
                t
            }));
        });
        for (path, _) in prompts.trainable_params() {
            if path_is_trainable(&path)? {
                trainable.push(path);
            } else {
                frozen.push(path);
            }
        }
        for v in verdicts {
            v?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in trainable.iter().chain(&frozen) {
            if !seen.insert(p.clone()) {
                return Err(Error::Internal(format!("parameter path {p} appears in both partitions")));
            }
        }
        Ok(ParamPartition { trainable, frozen })
    }
}

// ── Injection and fusion ────────────────────────────────────────────

/// Tape handles for the injection network.
#[derive(Debug, Clone)]
pub struct InjectionVars {
    pub text_in: Var,
    pub visual_in: Var,
    pub attn: AttentionVars,
    pub out_to_text: Var,
    pub out_to_visual: Var,
}

impl InjectionVars {
    pub fn leaves(tape: &mut Tape, p: &InjectionParams) -> Self {
        InjectionVars {
            text_in: tape.leaf(&p.text_in),
            visual_in: tape.leaf(&p.visual_in),
            attn: AttentionVars::leaves(tape, &p.attn),
            out_to_text: tape.leaf(&p.out_to_text),
            out_to_visual: tape.leaf(&p.out_to_visual),
        }
    }
}

/// One depth's cross-modality prompts on the tape:
/// returns (t_prime in visual space, v_prime in text space).
pub fn inject_block_graph(
    tape: &mut Tape,
    inj: &InjectionVars,
    text_block: Var,
    visual_block: Var,
) -> (Var, Var) {
    let pt = tape.matmul(text_block, inj.text_in);
    let pv = tape.matmul(visual_block, inj.visual_in);
    let text_attends_visual = attention_graph(tape, &inj.attn, pt, pv, pv);
    let v_prime = tape.matmul(text_attends_visual, inj.out_to_text);
    let visual_attends_text = attention_graph(tape, &inj.attn, pv, pt, pt);
    let t_prime = tape.matmul(visual_attends_text, inj.out_to_visual);
    (t_prime, v_prime)
}

/// Host-level injection for stacks shaped L×n×d: attention runs within each
/// depth block independently, with weights shared across depths. Returns
/// (T′ : L×n×d_v, V′ : L×n×d_t) — widths swapped so fusion is well-typed.
pub fn inject_stacks(
    t: &Tensor,
    v: &Tensor,
    depth: usize,
    length: usize,
    params: &InjectionParams,
) -> Result<(Tensor, Tensor)> {
    let (t_rows, d_t) = t.matrix_dims();
    let (v_rows, d_v) = v.matrix_dims();
    if t_rows != depth * length || v_rows != depth * length {
        return Err(Error::shape(
            "inject stacks",
            format!("{} rows (depth {depth} x length {length})", depth * length),
            format!("text {t_rows}, visual {v_rows}"),
        ));
    }
    params.attn.validate()?;
    if params.text_in.matrix_dims() != (d_t, params.attn.model_width())
        || params.visual_in.matrix_dims() != (d_v, params.attn.model_width())
    {
        return Err(Error::shape(
            "injection adapters",
            format!("text_in {d_t}xd_j, visual_in {d_v}xd_j"),
            format!(
                "text_in {:?}, visual_in {:?}",
                params.text_in.shape, params.visual_in.shape
            ),
        ));
    }
    let mut tape = Tape::new();
    let inj = InjectionVars::leaves(&mut tape, params);
    let t_var = tape.leaf(t);
    let v_var = tape.leaf(v);
    let mut t_prime_blocks = Vec::with_capacity(depth);
    let mut v_prime_blocks = Vec::with_capacity(depth);
    for i in 0..depth {
        let tb = tape.slice_rows(t_var, i * length, length);
        let vb = tape.slice_rows(v_var, i * length, length);
        let (tp, vp) = inject_block_graph(&mut tape, &inj, tb, vb);
        t_prime_blocks.push(tp);
        v_prime_blocks.push(vp);
    }
    let t_prime = tape.concat_rows(&t_prime_blocks);
    let v_prime = tape.concat_rows(&v_prime_blocks);
    let tp = tape.tensor_value(t_prime);
    let vp = tape.tensor_value(v_prime);
    Ok((
        Tensor::from_vec(tp.data, &[depth, length, d_v])?,
        Tensor::from_vec(vp.data, &[depth, length, d_t])?,
    ))
}

/// Elementwise fusion: fused_text = T + V′, fused_visual = V + T′.
pub fn fuse(t: &Tensor, v: &Tensor, t_prime: &Tensor, v_prime: &Tensor) -> Result<FusedPrompts> {
    if t.matrix_dims() != v_prime.matrix_dims() {
        return Err(Error::shape(
            "fuse text side",
            format!("{:?}", t.shape),
            format!("{:?}", v_prime.shape),
        ));
    }
    if v.matrix_dims() != t_prime.matrix_dims() {
        return Err(Error::shape(
            "fuse visual side",
            format!("{:?}", v.shape),
            format!("{:?}", t_prime.shape),
        ));
    }
    let fused_text = Tensor::from_vec(
        t.data.iter().zip(&v_prime.data).map(|(a, b)| a + b).collect(),
        &t.shape,
    )?;
    let fused_visual = Tensor::from_vec(
        v.data.iter().zip(&t_prime.data).map(|(a, b)| a + b).collect(),
        &v.shape,
    )?;
    Ok(FusedPrompts { fused_text, fused_visual })
}

// ── Prompted forward graphs ─────────────────────────────────────────

/// Per-tape prompt state: raw stack leaves, optional injection leaves, and
/// the per-depth blocks each tower consumes (fused for depths ≥ 1 when the
/// injection is active).
#[derive(Debug, Clone)]
pub struct PromptGraph {
    /// (path, leaf) pairs in [`PromptModel::trainable_params`] order.
    pub leaves: Vec<(String, Var)>,
    pub text_blocks: Option<Vec<Var>>,
    pub visual_blocks: Option<Vec<Var>>,
    pub depth: usize,
    pub length: usize,
}

/// Insert the trainable parameters as leaves and precompute every consumed
/// prompt block. Fusion runs once here; both towers then share the blocks.
pub fn build_prompt_graph(tape: &mut Tape, prompts: &PromptModel) -> PromptGraph {
    let (l, n) = (prompts.stack.depth, prompts.stack.length);
    let mut leaves = Vec::new();

    let text_var = prompts.stack.text.as_ref().map(|t| {
        let v = tape.leaf(t);
        leaves.push(("prompt.text_stack".to_string(), v));
        v
    });
    let visual_var = prompts.stack.visual.as_ref().map(|t| {
        let v = tape.leaf(t);
        leaves.push(("prompt.visual_stack".to_string(), v));
        v
    });
    let injection_vars = prompts.injection.as_ref().map(|inj| {
        let vars = InjectionVars::leaves(tape, inj);
        leaves.push(("injection.text_in".to_string(), vars.text_in));
        leaves.push(("injection.visual_in".to_string(), vars.visual_in));
        leaves.push(("injection.attn.w_q".to_string(), vars.attn.w_q));
        leaves.push(("injection.attn.b_q".to_string(), vars.attn.b_q));
        leaves.push(("injection.attn.w_k".to_string(), vars.attn.w_k));
        leaves.push(("injection.attn.b_k".to_string(), vars.attn.b_k));
        leaves.push(("injection.attn.w_v".to_string(), vars.attn.w_v));
        leaves.push(("injection.attn.b_v".to_string(), vars.attn.b_v));
        leaves.push(("injection.attn.w_o".to_string(), vars.attn.w_o));
        leaves.push(("injection.attn.b_o".to_string(), vars.attn.b_o));
        leaves.push(("injection.out_to_text".to_string(), vars.out_to_text));
        leaves.push(("injection.out_to_visual".to_string(), vars.out_to_visual));
        vars
    });

    let raw_text_blocks: Option<Vec<Var>> =
        text_var.map(|tv| (0..l).map(|i| tape.slice_rows(tv, i * n, n)).collect());
    let raw_visual_blocks: Option<Vec<Var>> =
        visual_var.map(|vv| (0..l).map(|i| tape.slice_rows(vv, i * n, n)).collect());

    let (text_blocks, visual_blocks) = match (&injection_vars, &raw_text_blocks, &raw_visual_blocks) {
        (Some(inj), Some(t_blocks), Some(v_blocks)) => {
            // Depth 0 is consumed raw; deeper blocks are fused. The fused
            // depth-0 pair is deliberately never formed — nothing reads it.
            let mut fused_text = vec![t_blocks[0]];
            let mut fused_visual = vec![v_blocks[0]];
            for i in 1..l {
                let (t_prime, v_prime) = inject_block_graph(tape, inj, t_blocks[i], v_blocks[i]);
                fused_text.push(tape.add(t_blocks[i], v_prime));
                fused_visual.push(tape.add(v_blocks[i], t_prime));
            }
            (Some(fused_text), Some(fused_visual))
        }
        _ => (raw_text_blocks, raw_visual_blocks),
    };

    PromptGraph { leaves, text_blocks, visual_blocks, depth: l, length: n }
}

/// Instrumentation for one prompted tower pass.
#[derive(Debug, Clone)]
pub struct PromptedTrace {
    pub layers_applied: usize,
    pub sequence_lengths: Vec<usize>,
    /// How many times a layer's prompt-position outputs were discarded and
    /// replaced by the next fresh block (L − 1 when prompts are present).
    pub replacements: usize,
}

/// Prompted text tower: depth-0 block + embedded tokens in, d_c feature out.
/// Without text prompts this is exactly the plain tower.
pub fn prompted_text_feature(
    tape: &mut Tape,
    text_vars: &TextVars,
    graph: &PromptGraph,
    w0: &Tensor,
) -> (Var, PromptedTrace) {
    let w0_var = tape.leaf(w0);
    let mut trace =
        PromptedTrace { layers_applied: 0, sequence_lengths: Vec::new(), replacements: 0 };
    let mut state = match &graph.text_blocks {
        Some(blocks) => tape.concat_rows(&[blocks[0], w0_var]),
        None => w0_var,
    };
    trace.sequence_lengths.push(tape.rows(state));
    let n = graph.length;
    for (li, layer) in text_vars.layers.iter().enumerate() {
        state = layer_graph(tape, layer, state);
        trace.layers_applied += 1;
        if let Some(blocks) = &graph.text_blocks {
            // After layer li+1 (1-based), a fresh block replaces the prompt
            // rows while the depth budget lasts.
            let next = li + 1;
            if next < graph.depth {
                let rest = tape.slice_rows(state, n, tape.rows(state) - n);
                state = tape.concat_rows(&[blocks[next], rest]);
                trace.replacements += 1;
            }
        }
        trace.sequence_lengths.push(tape.rows(state));
    }
    let z = crate::encoders::project_final_row(tape, text_vars, state);
    (z, trace)
}

/// Prompted image tower: [class, depth-0 block, patches] in, d_c feature out.
/// Without visual prompts this is exactly the plain tower.
pub fn prompted_image_feature(
    tape: &mut Tape,
    image_vars: &ImageVars,
    graph: &PromptGraph,
    c0: &Tensor,
    p0: &Tensor,
) -> (Var, PromptedTrace) {
    let c_var = tape.leaf(c0);
    let p_var = tape.leaf(p0);
    let mut trace =
        PromptedTrace { layers_applied: 0, sequence_lengths: Vec::new(), replacements: 0 };
    let mut state = match &graph.visual_blocks {
        Some(blocks) => tape.concat_rows(&[c_var, blocks[0], p_var]),
        None => tape.concat_rows(&[c_var, p_var]),
    };
    trace.sequence_lengths.push(tape.rows(state));
    let n = graph.length;
    for (li, layer) in image_vars.layers.iter().enumerate() {
        state = layer_graph(tape, layer, state);
        trace.layers_applied += 1;
        if let Some(blocks) = &graph.visual_blocks {
            let next = li + 1;
            if next < graph.depth {
                let class_row = tape.slice_rows(state, 0, 1);
                let rest = tape.slice_rows(state, 1 + n, tape.rows(state) - 1 - n);
                state = tape.concat_rows(&[class_row, blocks[next], rest]);
                trace.replacements += 1;
            }
        }
        trace.sequence_lengths.push(tape.rows(state));
    }
    let x = crate::encoders::project_class_row(tape, image_vars, state);
    (x, trace)
}

/// Host-level prompted text encoding.
pub fn prompted_encode_text(
    backbone: &DualEncoderModel,
    prompts: &PromptModel,
    class_tokens: &[usize],
) -> Result<(Tensor, PromptedTrace)> {
    let w0 = backbone.text.embed(class_tokens)?;
    let mut tape = Tape::new();
    let graph = build_prompt_graph(&mut tape, prompts);
    let text_vars = backbone.text.leaves(&mut tape);
    let (z, trace) = prompted_text_feature(&mut tape, &text_vars, &graph, &w0);
    let out = tape.tensor_value(z);
    if !out.is_finite() {
        return Err(Error::Numeric("prompted text encoding produced non-finite values".into()));
    }
    Ok((Tensor::from_vec(out.data, &[out.shape[1]])?, trace))
}

/// Host-level prompted image encoding.
pub fn prompted_encode_image(
    backbone: &DualEncoderModel,
    prompts: &PromptModel,
    raw_patches: &Tensor,
) -> Result<(Tensor, PromptedTrace)> {
    let (c0, p0) = backbone.image.embed(raw_patches)?;
    let mut tape = Tape::new();
    let graph = build_prompt_graph(&mut tape, prompts);
    let image_vars = backbone.image.leaves(&mut tape);
    let (x, trace) = prompted_image_feature(&mut tape, &image_vars, &graph, &c0, &p0);
    let out = tape.tensor_value(x);
    if !out.is_finite() {
        return Err(Error::Numeric("prompted image encoding produced non-finite values".into()));
    }
    Ok((Tensor::from_vec(out.data, &[out.shape[1]])?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::BackboneConfig;

    fn backbone(seed: u64) -> DualEncoderModel {
        DualEncoderModel::init(&BackboneConfig::default(), seed).unwrap()
    }

    fn settings(depth: usize) -> PromptSettings {
        PromptSettings { depth, ..Default::default() }
    }

    #[test]
    fn init_respects_mode_shapes() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::Mudpt, &settings(2), None, 0).unwrap();
        assert_eq!(p.stack.text.as_ref().unwrap().shape, vec![8, 32]);
        assert_eq!(p.stack.visual.as_ref().unwrap().shape, vec![8, 48]);
        assert!(p.injection.is_some());

        let t = PromptModel::init(&model, Mode::TextOnly, &settings(2), None, 0).unwrap();
        assert!(t.stack.visual.is_none() && t.injection.is_none());
        let v = PromptModel::init(&model, Mode::VisualOnly, &settings(2), None, 0).unwrap();
        assert!(v.stack.text.is_none() && v.injection.is_none());
        let i = PromptModel::init(&model, Mode::IndependentMultimodal, &settings(2), None, 0).unwrap();
        assert!(i.stack.text.is_some() && i.stack.visual.is_some() && i.injection.is_none());
    }

    #[test]
    fn depth_zero_text_block_copies_template_embeddings() {
        let model = backbone(0);
        let template = [0usize, 1, 2, 3];
        let p = PromptModel::init(&model, Mode::Mudpt, &settings(3), Some(&template), 7).unwrap();
        let stack = p.stack.text.as_ref().unwrap();
        for (row, &id) in template.iter().enumerate() {
            assert_eq!(
                &stack.data[row * 32..(row + 1) * 32],
                &model.text.token_embedding.data[id * 32..(id + 1) * 32]
            );
        }
        // deeper blocks are random, not copies
        let deep = &stack.data[4 * 32..5 * 32];
        assert_ne!(deep, &model.text.token_embedding.data[0..32]);
    }

    #[test]
    fn settings_validation_rejects_contradictions() {
        let model = backbone(0);
        assert!(PromptModel::init(&model, Mode::Mudpt, &settings(5), None, 0).is_err());
        assert!(PromptModel::init(&model, Mode::Mudpt, &settings(0), None, 0).is_err());
        let bad_len = PromptSettings { length: 0, ..Default::default() };
        assert!(PromptModel::init(&model, Mode::Mudpt, &bad_len, None, 0).is_err());
        let bad_heads = PromptSettings { injection_heads: 5, ..Default::default() };
        assert!(PromptModel::init(&model, Mode::Mudpt, &bad_heads, None, 0).is_err());
    }

    #[test]
    fn silenced_output_adapters_annihilate_cross_prompts() {
        let model = backbone(0);
        let mut p = PromptModel::init(&model, Mode::Mudpt, &settings(2), None, 0).unwrap();
        p.injection.as_mut().unwrap().silence_outputs();
        let (t_prime, v_prime) = inject_stacks(
            p.stack.text.as_ref().unwrap(),
            p.stack.visual.as_ref().unwrap(),
            2,
            4,
            p.injection.as_ref().unwrap(),
        )
        .unwrap();
        assert!(t_prime.data.iter().all(|&x| x == 0.0));
        assert!(v_prime.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inject_swaps_widths_across_modalities() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::Mudpt, &settings(2), None, 0).unwrap();
        let (t_prime, v_prime) = inject_stacks(
            p.stack.text.as_ref().unwrap(),
            p.stack.visual.as_ref().unwrap(),
            2,
            4,
            p.injection.as_ref().unwrap(),
        )
        .unwrap();
        assert_eq!(t_prime.shape, vec![2, 4, 48]);
        assert_eq!(v_prime.shape, vec![2, 4, 32]);
    }

    #[test]
    fn single_prompt_injection_matches_hand_arithmetic() {
        // n = 1 collapses attention to the identity on its single value row
        // when the block's projections are identity and biases zero, so each
        // cross prompt is input · in-adapter · out-adapter, worked by hand:
        //   pt = t · text_in = [-2.5, -3.0]
        //   pv = v · visual_in = [1.5, -0.25]
        //   v′ = pv · out_to_text = [3.0, -0.75]
        //   t′ = pt · out_to_visual = [-2.5, -5.5, -3.0]
        let eye2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let params = InjectionParams {
            text_in: Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap(),
            visual_in: Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap(),
            attn: AttentionParams {
                w_q: eye2.clone(),
                b_q: Tensor::zeros(&[1, 2]),
                w_k: eye2.clone(),
                b_k: Tensor::zeros(&[1, 2]),
                w_v: eye2.clone(),
                b_v: Tensor::zeros(&[1, 2]),
                w_o: eye2,
                b_o: Tensor::zeros(&[1, 2]),
                head_count: 1,
            },
            out_to_text: Tensor::from_vec(vec![2.0, 0.0, 0.0, 3.0], &[2, 2]).unwrap(),
            out_to_visual: Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0], &[2, 3]).unwrap(),
        };
        let t = Tensor::from_vec(vec![0.5, -1.0], &[1, 1, 2]).unwrap();
        let v = Tensor::from_vec(vec![2.0, 0.25, -0.5], &[1, 1, 3]).unwrap();
        let (t_prime, v_prime) = inject_stacks(&t, &v, 1, 1, &params).unwrap();
        let expected_t_prime = [-2.5, -5.5, -3.0];
        let expected_v_prime = [3.0, -0.75];
        for (a, b) in t_prime.data.iter().zip(&expected_t_prime) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (a, b) in v_prime.data.iter().zip(&expected_v_prime) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn fuse_is_elementwise_addition() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::Mudpt, &settings(2), None, 3).unwrap();
        let t = p.stack.text.as_ref().unwrap();
        let v = p.stack.visual.as_ref().unwrap();
        let (t_prime, v_prime) = inject_stacks(t, v, 2, 4, p.injection.as_ref().unwrap()).unwrap();
        let fused = fuse(t, v, &t_prime, &v_prime).unwrap();
        for i in 0..t.data.len() {
            assert_eq!(fused.fused_text.data[i], t.data[i] + v_prime.data[i]);
        }
        for i in 0..v.data.len() {
            assert_eq!(fused.fused_visual.data[i], v.data[i] + t_prime.data[i]);
        }

        let zero_t = Tensor::zeros(&t.shape);
        let zero_v = Tensor::zeros(&v.shape);
        let id = fuse(t, v, &Tensor::zeros(&t_prime.shape), &Tensor::zeros(&v_prime.shape)).unwrap();
        assert_eq!(id.fused_text.data, t.data);
        assert_eq!(id.fused_visual.data, v.data);
        let swapped = fuse(&zero_t, &zero_v, &t_prime, &v_prime).unwrap();
        assert_eq!(swapped.fused_text.data, v_prime.data);
        assert_eq!(swapped.fused_visual.data, t_prime.data);
    }

    #[test]
    fn prompted_text_lengths_and_replacements_are_instrumented() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::Mudpt, &settings(2), None, 0).unwrap();
        let eos = model.config.eos_token();
        let tokens = [5usize, 9, eos];
        let (z, trace) = prompted_encode_text(&model, &p, &tokens).unwrap();
        assert_eq!(z.shape, vec![16]);
        assert_eq!(trace.layers_applied, 4);
        assert_eq!(trace.replacements, 1);
        assert!(trace.sequence_lengths.iter().all(|&l| l == 4 + 3));
    }

    #[test]
    fn prompted_image_lengths_and_replacements_are_instrumented() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::Mudpt, &settings(3), None, 0).unwrap();
        let mut rng = rng_for(8, "prompt-img");
        let raw = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let (x, trace) = prompted_encode_image(&model, &p, &raw).unwrap();
        assert_eq!(x.shape, vec![16]);
        assert_eq!(trace.layers_applied, 4);
        assert_eq!(trace.replacements, 2);
        assert!(trace.sequence_lengths.iter().all(|&l| l == 1 + 4 + 16));
    }

    #[test]
    fn full_depth_uses_every_block_and_replaces_l_minus_1_times() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::Mudpt, &settings(4), None, 0).unwrap();
        let eos = model.config.eos_token();
        let (_, trace) = prompted_encode_text(&model, &p, &[1, eos]).unwrap();
        assert_eq!(trace.replacements, 3);
    }

    #[test]
    fn text_only_image_pass_is_bitwise_plain() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::TextOnly, &settings(2), None, 0).unwrap();
        let mut rng = rng_for(9, "plain-img");
        let raw = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let (prompted, _) = prompted_encode_image(&model, &p, &raw).unwrap();
        let plain = model.image_features(&raw).unwrap();
        assert_eq!(prompted.data, plain.data);
    }

    #[test]
    fn visual_only_text_pass_is_bitwise_plain() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::VisualOnly, &settings(2), None, 0).unwrap();
        let eos = model.config.eos_token();
        let (prompted, _) = prompted_encode_text(&model, &p, &[4, 4, eos]).unwrap();
        let plain = model.text_features(&[4, 4, eos]).unwrap();
        assert_eq!(prompted.data, plain.data);
    }

    #[test]
    fn depth_one_text_prompting_equals_plain_encoding_of_concatenation() {
        // With a single depth there is nothing to replace: the prompt rows
        // are ordinary extra tokens.
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::TextOnly, &settings(1), None, 0).unwrap();
        let eos = model.config.eos_token();
        let tokens = [3usize, 11, eos];
        let (prompted, trace) = prompted_encode_text(&model, &p, &tokens).unwrap();
        assert_eq!(trace.replacements, 0);

        let stack = p.stack.text.as_ref().unwrap();
        let w0 = model.text.embed(&tokens).unwrap();
        let mut combined = stack.data.clone();
        combined.extend_from_slice(&w0.data);
        let seq = Tensor::from_vec(combined, &[4 + 3, 32]).unwrap();
        let (plain, _) = model.text.encode(&seq).unwrap();
        assert!(prompted.max_abs_diff(&plain) < 1e-10);
    }

    #[test]
    fn silenced_injection_matches_independent_prompting() {
        // Same stacks, injection outputs zeroed: the fused blocks equal the
        // raw ones, so features must agree with the no-injection mode.
        let model = backbone(0);
        let mudpt = PromptModel::init(&model, Mode::Mudpt, &settings(3), None, 5).unwrap();
        let mut silenced = mudpt.clone();
        silenced.injection.as_mut().unwrap().silence_outputs();
        let mut independent = PromptModel::init(&model, Mode::IndependentMultimodal, &settings(3), None, 99).unwrap();
        independent.stack = silenced.stack.clone();

        let eos = model.config.eos_token();
        let tokens = [2usize, 8, eos];
        let mut rng = rng_for(10, "degeneracy");
        let raw = Tensor::randn(&[16, 8], 1.0, &mut rng);

        let (z_a, _) = prompted_encode_text(&model, &silenced, &tokens).unwrap();
        let (z_b, _) = prompted_encode_text(&model, &independent, &tokens).unwrap();
        assert!(z_a.max_abs_diff(&z_b) < 1e-10);
        let (x_a, _) = prompted_encode_image(&model, &silenced, &raw).unwrap();
        let (x_b, _) = prompted_encode_image(&model, &independent, &raw).unwrap();
        assert!(x_a.max_abs_diff(&x_b) < 1e-10);
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let model = backbone(0);
        let p = PromptModel::init(&model, Mode::Mudpt, &settings(2), None, 0).unwrap();
        let partition = ParamPartition::of(&model, &p).unwrap();
        assert_eq!(partition.trainable.len(), 14);
        assert_eq!(partition.frozen.len(), 140);
        assert!(partition.trainable.iter().all(|p| !partition.frozen.contains(p)));

        let zero_shot = PromptModel::init(&model, Mode::ZeroShot, &settings(2), None, 0).unwrap();
        let empty = ParamPartition::of(&model, &zero_shot).unwrap();
        assert!(empty.trainable.is_empty());
    }

    #[test]
    fn trainable_params_round_trip_through_setter() {
        let model = backbone(0);
        let mut p = PromptModel::init(&model, Mode::Mudpt, &settings(2), None, 0).unwrap();
        let mut params = p.trainable_params();
        for (_, t) in params.iter_mut() {
            for v in t.data.iter_mut() {
                *v += 0.5;
            }
        }
        p.set_trainable_params(&params).unwrap();
        let after = p.trainable_params();
        for ((_, a), (_, b)) in params.iter().zip(&after) {
            assert_eq!(a.data, b.data);
        }
        assert!(path_is_trainable("prompt.text_stack").unwrap());
        assert!(!path_is_trainable("backbone.text.proj").unwrap());
        assert!(path_is_trainable("unknown.thing").is_err());
    }

    use crate::rng::rng_for;
}
