//! The frozen dual-encoder backbone.
//!
//! A text tower (token + positional embeddings, K pre-norm Transformer
//! layers, final LayerNorm, projection d_t → d_c) and an image tower (patch
//! projection, class embedding, positional rows, K layers, post LayerNorm,
//! projection d_v → d_c) meet in a shared d_c-dimensional space where cosine
//! similarity is taken. Widths deliberately differ (d_t ≠ d_v) so any
//! cross-modal machinery must adapt dimensions, as with full-size CLIP.
//!
//! Every forward is expressed on the autodiff tape; the host-level `encode_*`
//! methods build a private tape per call, while the `*Vars`/`*_graph` pieces
//! let callers inline the towers into a larger differentiable graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttentionParams, AttentionVars, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::rng::rng_for;

/// Architecture hyper-parameters for both towers.
///
/// `max_prompt_len` only sizes the image positional table's headroom; prompt
/// vectors themselves never consume positional rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_t: usize,
    pub d_v: usize,
    pub d_c: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub patch_count: usize,
    pub raw_patch_dim: usize,
    pub max_text_len: usize,
    pub max_prompt_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_t: 32,
            d_v: 48,
            d_c: 16,
            layers: 4,
            heads: 4,
            vocab_size: 64,
            patch_count: 16,
            raw_patch_dim: 8,
            max_text_len: 12,
            max_prompt_len: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_t", self.d_t),
            ("d_v", self.d_v),
            ("d_c", self.d_c),
            ("layers", self.layers),
            ("heads", self.heads),
            ("patch_count", self.patch_count),
            ("raw_patch_dim", self.raw_patch_dim),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.d_t % self.heads != 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide both d_t {} and d_v {}",
                self.heads, self.d_t, self.d_v
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must fit at least one token plus eos".into()));
        }
        Ok(())
    }

    /// The end-of-sequence token is pinned to the last vocabulary id.
    pub fn eos_token(&self) -> usize {
        self.vocab_size - 1
    }
}

/// One pre-norm Transformer block: LN → self-attention → residual,
/// LN → 4× MLP with GELU → residual.
#[derive(Debug, Clone)]
pub struct TransformerLayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: AttentionParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl TransformerLayerParams {
    pub fn init<R: Rng>(width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let hidden = 4 * width;
        // Block internals take fan-in scaled init so that signal actually
        // propagates through attention and the MLP at small widths; only the
        // embedding tables and readout projections use the flat 0.02 scale.
        let w1_std = (width as f64).powf(-0.5);
        let w2_std = (hidden as f64).powf(-0.5);
        Ok(TransformerLayerParams {
            ln1_gamma: Tensor::full(&[width], 1.0),
            ln1_beta: Tensor::zeros(&[width]),
            attn: AttentionParams::init(width, heads, rng)?,
            ln2_gamma: Tensor::full(&[width], 1.0),
            ln2_beta: Tensor::zeros(&[width]),
            mlp_w1: Tensor::randn(&[width, hidden], w1_std, rng),
            mlp_b1: Tensor::zeros(&[1, hidden]),
            mlp_w2: Tensor::randn(&[hidden, width], w2_std, rng),
            mlp_b2: Tensor::zeros(&[1, width]),
        })
    }

    /// Zero the attention output projection and the MLP down-projection (with
    /// their biases), turning the block into a pure residual pass-through.
    pub fn reduce_to_residual(&mut self) {
        self.attn.w_o = Tensor::zeros(&self.attn.w_o.shape);
        self.attn.b_o = Tensor::zeros(&self.attn.b_o.shape);
        self.mlp_w2 = Tensor::zeros(&self.mlp_w2.shape);
        self.mlp_b2 = Tensor::zeros(&self.mlp_b2.shape);
    }
}

/// Tape handles for one Transformer layer.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn: AttentionVars,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl LayerVars {
    pub fn leaves(tape: &mut Tape, p: &TransformerLayerParams) -> Self {
        LayerVars {
            ln1_gamma: tape.leaf(&p.ln1_gamma),
            ln1_beta: tape.leaf(&p.ln1_beta),
            attn: AttentionVars::leaves(tape, &p.attn),
            ln2_gamma: tape.leaf(&p.ln2_gamma),
            ln2_beta: tape.leaf(&p.ln2_beta),
            mlp_w1: tape.leaf(&p.mlp_w1),
            mlp_b1: tape.leaf(&p.mlp_b1),
            mlp_w2: tape.leaf(&p.mlp_w2),
            mlp_b2: tape.leaf(&p.mlp_b2),
        }
    }
}

/// One Transformer layer applied to a full sequence (no causal mask).
pub fn layer_graph(tape: &mut Tape, layer: &LayerVars, x: Var) -> Var {
    let normed = tape.layer_norm_rows(x, layer.ln1_gamma, layer.ln1_beta, LAYER_NORM_EPS);
    let attended = crate::numerics::attention_graph(tape, &layer.attn, normed, normed, normed);
    let x = tape.add(x, attended);
    let normed2 = tape.layer_norm_rows(x, layer.ln2_gamma, layer.ln2_beta, LAYER_NORM_EPS);
    let h = tape.matmul(normed2, layer.mlp_w1);
    let h = tape.add_bias(h, layer.mlp_b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, layer.mlp_w2);
    let h = tape.add_bias(h, layer.mlp_b2);
    tape.add(x, h)
}

/// Record of one tower forward: the input state plus the state after every
/// layer, and how many layers actually ran.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers_applied: usize,
    pub sequence_lengths: Vec<usize>,
    pub hidden_states: Vec<Tensor>,
}

impl ForwardTrace {
    fn new() -> Self {
        ForwardTrace { layers_applied: 0, sequence_lengths: Vec::new(), hidden_states: Vec::new() }
    }

    fn record(&mut self, tape: &Tape, state: Var) {
        self.sequence_lengths.push(tape.rows(state));
        self.hidden_states.push(tape.tensor_value(state));
    }
}

// ── Text tower ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TextEncoderState {
    pub token_embedding: Tensor,
    pub positional: Tensor,
    pub layers: Vec<TransformerLayerParams>,
    pub ln_final_gamma: Tensor,
    pub ln_final_beta: Tensor,
    pub proj: Tensor,
    pub eos_token: usize,
}

/// Tape handles for the text tower's frozen parameters.
#[derive(Debug, Clone)]
pub struct TextVars {
    pub layers: Vec<LayerVars>,
    pub ln_final_gamma: Var,
    pub ln_final_beta: Var,
    pub proj: Var,
}

impl TextEncoderState {
    pub fn init<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(TransformerLayerParams::init(config.d_t, config.heads, rng)?);
        }
        Ok(TextEncoderState {
            token_embedding: Tensor::randn(&[config.vocab_size, config.d_t], 0.02, rng),
            positional: Tensor::randn(&[config.max_text_len, config.d_t], 0.02, rng),
            layers,
            ln_final_gamma: Tensor::full(&[config.d_t], 1.0),
            ln_final_beta: Tensor::zeros(&[config.d_t]),
            proj: Tensor::randn(&[config.d_t, config.d_c], 0.02, rng),
            eos_token: config.eos_token(),
        })
    }

    pub fn width(&self) -> usize {
        self.token_embedding.matrix_dims().1
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.matrix_dims().0
    }

    /// Token ids → embedding matrix, one row per id: table row plus the
    /// positional row of that sequence position.
    pub fn embed(&self, token_ids: &[usize]) -> Result<Tensor> {
        if token_ids.is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty token sequence".into()));
        }
        let (max_len, d_t) = self.positional.matrix_dims();
        if token_ids.len() > max_len {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds the positional table ({max_len})",
                token_ids.len()
            )));
        }
        let vocab = self.vocab_size();
        if *token_ids.last().unwrap() != self.eos_token {
            return Err(Error::InvalidInput(format!(
                "token sequence must end with eos id {}",
                self.eos_token
            )));
        }
        let mut data = Vec::with_capacity(token_ids.len() * d_t);
        for (pos, &id) in token_ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Vocabulary(format!("token id {id} outside vocabulary of {vocab}")));
            }
            for j in 0..d_t {
                data.push(self.token_embedding.data[id * d_t + j] + self.positional.data[pos * d_t + j]);
            }
        }
        Tensor::from_vec(data, &[token_ids.len(), d_t])
    }

    pub fn leaves(&self, tape: &mut Tape) -> TextVars {
        TextVars {
            layers: self.layers.iter().map(|l| LayerVars::leaves(tape, l)).collect(),
            ln_final_gamma: tape.leaf(&self.ln_final_gamma),
            ln_final_beta: tape.leaf(&self.ln_final_beta),
            proj: tape.leaf(&self.proj),
        }
    }

    /// Embedded sequence → d_c feature at the final (eos) position.
    pub fn encode(&self, w0: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let (_, cols) = w0.matrix_dims();
        if cols != self.width() {
            return Err(Error::shape("encode_text input", format!("width {}", self.width()), cols));
        }
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let seq = tape.leaf(w0);
        let mut trace = ForwardTrace::new();
        trace.record(&tape, seq);
        let mut state = seq;
        for layer in &vars.layers {
            state = layer_graph(&mut tape, layer, state);
            trace.layers_applied += 1;
            trace.record(&tape, state);
        }
        let z = project_final_row(&mut tape, &vars, state);
        let out = tape.tensor_value(z);
        if !out.is_finite() {
            return Err(Error::Numeric("text encoding produced non-finite values".into()));
        }
        Ok((Tensor::from_vec(out.data, &[out.shape[1]])?, trace))
    }
}

/// Final-position readout for the text tower: LayerNorm then projection of
/// the sequence's last row.
pub fn project_final_row(tape: &mut Tape, vars: &TextVars, state: Var) -> Var {
    let last = tape.slice_rows(state, tape.rows(state) - 1, 1);
    let normed = tape.layer_norm_rows(last, vars.ln_final_gamma, vars.ln_final_beta, LAYER_NORM_EPS);
    tape.matmul(normed, vars.proj)
}

// ── Image tower ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ImageEncoderState {
    pub patch_proj: Tensor,
    pub class_embedding: Tensor,
    pub positional: Tensor,
    pub layers: Vec<TransformerLayerParams>,
    pub ln_post_gamma: Tensor,
    pub ln_post_beta: Tensor,
    pub proj: Tensor,
    pub patch_count: usize,
}

/// Tape handles for the image tower's frozen parameters.
#[derive(Debug, Clone)]
pub struct ImageVars {
    pub layers: Vec<LayerVars>,
    pub ln_post_gamma: Var,
    pub ln_post_beta: Var,
    pub proj: Var,
}

impl ImageEncoderState {
    pub fn init<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(TransformerLayerParams::init(config.d_v, config.heads, rng)?);
        }
        Ok(ImageEncoderState {
            patch_proj: Tensor::randn(&[config.raw_patch_dim, config.d_v], 0.02, rng),
            class_embedding: Tensor::randn(&[config.d_v], 0.02, rng),
            positional: Tensor::randn(
                &[config.patch_count + 1 + config.max_prompt_len, config.d_v],
                0.02,
                rng,
            ),
            layers,
            ln_post_gamma: Tensor::full(&[config.d_v], 1.0),
            ln_post_beta: Tensor::zeros(&[config.d_v]),
            proj: Tensor::randn(&[config.d_v, config.d_c], 0.02, rng),
            patch_count: config.patch_count,
        })
    }

    pub fn width(&self) -> usize {
        self.patch_proj.matrix_dims().1
    }

    /// Raw patches → (class row, patch rows). The class embedding takes
    /// positional row 0; patch i takes positional row i + 1.
    pub fn embed(&self, raw_patches: &Tensor) -> Result<(Tensor, Tensor)> {
        let (m, raw_dim) = raw_patches.matrix_dims();
        let (proj_rows, d_v) = self.patch_proj.matrix_dims();
        if m != self.patch_count || raw_dim != proj_rows {
            return Err(Error::shape(
                "embed_image patches",
                format!("{} x {proj_rows}", self.patch_count),
                format!("{m} x {raw_dim}"),
            ));
        }
        let mut p0 = vec![0.0; m * d_v];
        for i in 0..m {
            for k in 0..raw_dim {
                let r = raw_patches.data[i * raw_dim + k];
                if r == 0.0 {
                    continue;
                }
                for j in 0..d_v {
                    p0[i * d_v + j] += r * self.patch_proj.data[k * d_v + j];
                }
            }
            for j in 0..d_v {
                p0[i * d_v + j] += self.positional.data[(i + 1) * d_v + j];
            }
        }
        let c0: Vec<f64> = self
            .class_embedding
            .data
            .iter()
            .zip(&self.positional.data[..d_v])
            .map(|(c, p)| c + p)
            .collect();
        Ok((Tensor::from_vec(c0, &[d_v])?, Tensor::from_vec(p0, &[m, d_v])?))
    }

    pub fn leaves(&self, tape: &mut Tape) -> ImageVars {
        ImageVars {
            layers: self.layers.iter().map(|l| LayerVars::leaves(tape, l)).collect(),
            ln_post_gamma: tape.leaf(&self.ln_post_gamma),
            ln_post_beta: tape.leaf(&self.ln_post_beta),
            proj: tape.leaf(&self.proj),
        }
    }

    /// (class row, patch rows) → d_c feature read from sequence position 0.
    pub fn encode(&self, c0: &Tensor, p0: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let d_v = self.width();
        if c0.matrix_dims() != (1, d_v) {
            return Err(Error::shape("encode_image class row", format!("1 x {d_v}"), format!("{:?}", c0.shape)));
        }
        let (_, pc) = p0.matrix_dims();
        if pc != d_v {
            return Err(Error::shape("encode_image patch rows", format!("width {d_v}"), pc));
        }
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let c = tape.leaf(c0);
        let p = tape.leaf(p0);
        let seq = tape.concat_rows(&[c, p]);
        let mut trace = ForwardTrace::new();
        trace.record(&tape, seq);
        let mut state = seq;
        for layer in &vars.layers {
            state = layer_graph(&mut tape, layer, state);
            trace.layers_applied += 1;
            trace.record(&tape, state);
        }
        let x = project_class_row(&mut tape, &vars, state);
        let out = tape.tensor_value(x);
        if !out.is_finite() {
            return Err(Error::Numeric("image encoding produced non-finite values".into()));
        }
        Ok((Tensor::from_vec(out.data, &[out.shape[1]])?, trace))
    }
}

/// Class-position readout for the image tower: LayerNorm then projection of
/// sequence row 0.
pub fn project_class_row(tape: &mut Tape, vars: &ImageVars, state: Var) -> Var {
    let class_row = tape.slice_rows(state, 0, 1);
    let normed = tape.layer_norm_rows(class_row, vars.ln_post_gamma, vars.ln_post_beta, LAYER_NORM_EPS);
    tape.matmul(normed, vars.proj)
}

// ── The combined backbone ───────────────────────────────────────────

/// Both towers plus the similarity temperature, stored as log τ.
#[derive(Debug, Clone)]
pub struct DualEncoderModel {
    pub config: BackboneConfig,
    pub text: TextEncoderState,
    pub image: ImageEncoderState,
    pub log_tau: Tensor,
}

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
/// Initial temperature before pretraining refines it.
pub const TAU_INIT: f64 = 0.07;

impl DualEncoderModel {
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "backbone-init");
        Ok(DualEncoderModel {
            config: config.clone(),
            text: TextEncoderState::init(config, &mut rng)?,
            image: ImageEncoderState::init(config, &mut rng)?,
            log_tau: Tensor::scalar(TAU_INIT.ln()),
        })
    }

    /// Temperature for similarity scaling, clamped to its legal band.
    pub fn tau(&self) -> f64 {
        self.log_tau.data[0].exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// Convenience: token ids straight to the d_c text feature.
    pub fn text_features(&self, token_ids: &[usize]) -> Result<Tensor> {
        let w0 = self.text.embed(token_ids)?;
        Ok(self.text.encode(&w0)?.0)
    }

    /// Convenience: raw patches straight to the d_c image feature.
    pub fn image_features(&self, raw_patches: &Tensor) -> Result<Tensor> {
        let (c0, p0) = self.image.embed(raw_patches)?;
        Ok(self.image.encode(&c0, &p0)?.0)
    }

    /// Visit every frozen parameter as (dotted path, tensor).
    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Tensor)) {
        visit_text(&self.text, f);
        visit_image(&self.image, f);
        f("backbone.log_tau".into(), &self.log_tau);
    }

    /// Mutable visit in the same path order as [`Self::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_text_mut(&mut self.text, f);
        visit_image_mut(&mut self.image, f);
        f("backbone.log_tau".into(), &mut self.log_tau);
    }
}

macro_rules! visit_layer_fields {
    ($layer:expr, $prefix:expr, $f:expr, $($borrow:tt)+) => {
        $f(format!("{}.ln1_gamma", $prefix), $($borrow)+ $layer.ln1_gamma);
        $f(format!("{}.ln1_beta", $prefix), $($borrow)+ $layer.ln1_beta);
        $f(format!("{}.attn.w_q", $prefix), $($borrow)+ $layer.attn.w_q);
        $f(format!("{}.attn.b_q", $prefix), $($borrow)+ $layer.attn.b_q);
        $f(format!("{}.attn.w_k", $prefix), $($borrow)+ $layer.attn.w_k);
        $f(format!("{}.attn.b_k", $prefix), $($borrow)+ $layer.attn.b_k);
        $f(format!("{}.attn.w_v", $prefix), $($borrow)+ $layer.attn.w_v);
        $f(format!("{}.attn.b_v", $prefix), $($borrow)+ $layer.attn.b_v);
        $f(format!("{}.attn.w_o", $prefix), $($borrow)+ $layer.attn.w_o);
        $f(format!("{}.attn.b_o", $prefix), $($borrow)+ $layer.attn.b_o);
        $f(format!("{}.ln2_gamma", $prefix), $($borrow)+ $layer.ln2_gamma);
        $f(format!("{}.ln2_beta", $prefix), $($borrow)+ $layer.ln2_beta);
        $f(format!("{}.mlp_w1", $prefix), $($borrow)+ $layer.mlp_w1);
        $f(format!("{}.mlp_b1", $prefix), $($borrow)+ $layer.mlp_b1);
        $f(format!("{}.mlp_w2", $prefix), $($borrow)+ $layer.mlp_w2);
        $f(format!("{}.mlp_b2", $prefix), $($borrow)+ $layer.mlp_b2);
    };
}

fn visit_text(t: &TextEncoderState, f: &mut dyn FnMut(String, &Tensor)) {
    f("backbone.text.token_embedding".into(), &t.token_embedding);
    f("backbone.text.positional".into(), &t.positional);
    for (i, layer) in t.layers.iter().enumerate() {
        visit_layer_fields!(layer, format!("backbone.text.layers.{i}"), f, &);
    }
    f("backbone.text.ln_final_gamma".into(), &t.ln_final_gamma);
    f("backbone.text.ln_final_beta".into(), &t.ln_final_beta);
    f("backbone.text.proj".into(), &t.proj);
}

fn visit_text_mut(t: &mut TextEncoderState, f: &mut dyn FnMut(String, &mut Tensor)) {
    f("backbone.text.token_embedding".into(), &mut t.token_embedding);
    f("backbone.text.positional".into(), &mut t.positional);
    for (i, layer) in t.layers.iter_mut().enumerate() {
        visit_layer_fields!(layer, format!("backbone.text.layers.{i}"), f, &mut);
    }
    f("backbone.text.ln_final_gamma".into(), &mut t.ln_final_gamma);
    f("backbone.text.ln_final_beta".into(), &mut t.ln_final_beta);
    f("backbone.text.proj".into(), &mut t.proj);
}

fn visit_image(v: &ImageEncoderState, f: &mut dyn FnMut(String, &Tensor)) {
    f("backbone.image.patch_proj".into(), &v.patch_proj);
    f("backbone.image.class_embedding".into(), &v.class_embedding);
    f("backbone.image.positional".into(), &v.positional);
    for (i, layer) in v.layers.iter().enumerate() {
        visit_layer_fields!(layer, format!("backbone.image.layers.{i}"), f, &);
    }
    f("backbone.image.ln_post_gamma".into(), &v.ln_post_gamma);
    f("backbone.image.ln_post_beta".into(), &v.ln_post_beta);
    f("backbone.image.proj".into(), &v.proj);
}

fn visit_image_mut(v: &mut ImageEncoderState, f: &mut dyn FnMut(String, &mut Tensor)) {
    f("backbone.image.patch_proj".into(), &mut v.patch_proj);
    f("backbone.image.class_embedding".into(), &mut v.class_embedding);
    f("backbone.image.positional".into(), &mut v.positional);
    for (i, layer) in v.layers.iter_mut().enumerate() {
        visit_layer_fields!(layer, format!("backbone.image.layers.{i}"), f, &mut);
    }
    f("backbone.image.ln_post_gamma".into(), &mut v.ln_post_gamma);
    f("backbone.image.ln_post_beta".into(), &mut v.ln_post_beta);
    f("backbone.image.proj".into(), &mut v.proj);
}
