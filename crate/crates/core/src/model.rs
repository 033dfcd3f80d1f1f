//! Toy decoder-only transformer with an image-token span.
//!
//! Pre-norm blocks (attention + GELU MLP of width `4 * d_model`), learned
//! absolute position embeddings, logits read at a single answer position.
//! The forward pass exposes two extension points used by the probing and
//! steering code: per-layer attention capture and a [`LayerHook`] that may
//! rewrite the residual stream entering any layer.

use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{
    self, layer_norm_row, matmul_acc, softmax_in_place, Matrix, ProbVec,
};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 4,
            d_model: 64,
            vocab_size: 64,
            max_seq_len: 32,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::usage(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::usage(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// Token ids plus the location of the image span and the answer position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    image_span: Range<usize>,
}

impl TokenSequence {
    /// The answer position is always the last token.
    pub fn new(tokens: Vec<usize>, image_span: Range<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::usage("token sequence is empty"));
        }
        if image_span.start > image_span.end || image_span.end > tokens.len() {
            return Err(Error::usage(format!(
                "image span {image_span:?} out of bounds for {} tokens",
                tokens.len()
            )));
        }
        Ok(TokenSequence { tokens, image_span })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn image_span(&self) -> Range<usize> {
        self.image_span.clone()
    }

    /// Number of image tokens `d`.
    pub fn image_len(&self) -> usize {
        self.image_span.len()
    }

    pub fn answer_pos(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Scale the residual stream of `token_indices` by `scale` at the input of `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub token_indices: Vec<usize>,
    pub scale: f64,
}

impl InterventionSpec {
    /// Scales every image token of `seq` at `layer`.
    pub fn whole_image(layer: usize, seq: &TokenSequence, scale: f64) -> Self {
        InterventionSpec {
            layer,
            token_indices: seq.image_span().collect(),
            scale,
        }
    }

    pub fn validate(&self, n_layers: usize, seq: &TokenSequence) -> Result<()> {
        if self.layer >= n_layers {
            return Err(Error::usage(format!(
                "intervention layer {} >= n_layers {n_layers}",
                self.layer
            )));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::usage(format!(
                "intervention scale must be finite and >= 0, got {}",
                self.scale
            )));
        }
        let span = seq.image_span();
        if let Some(i) = self.token_indices.iter().find(|i| !span.contains(i)) {
            return Err(Error::usage(format!(
                "intervention index {i} outside image span {span:?}"
            )));
        }
        Ok(())
    }

    pub(crate) fn apply(&self, hidden: &mut Matrix) {
        for &i in &self.token_indices {
            for v in hidden.row_mut(i) {
                *v *= self.scale;
            }
        }
    }
}

/// Per-layer, per-head attention weights (`rows = query`, `cols = key`).
pub type LayerAttention = Vec<Matrix>;

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    /// Empty unless the forward was run with capture enabled.
    pub attention: Vec<LayerAttention>,
    /// Wall-clock seconds spent in the forward pass.
    pub wall_time: f64,
}

/// Callback invoked with the residual stream entering each layer.
///
/// `attention` holds the captured attention of every layer that has already
/// run (empty when capture is off).
pub trait LayerHook {
    fn before_layer(
        &mut self,
        layer: usize,
        hidden: &mut Matrix,
        attention: &[LayerAttention],
    ) -> Result<()>;
}

/// Applies a fixed list of interventions.
pub struct StaticInterventions<'a>(pub &'a [InterventionSpec]);

impl LayerHook for StaticInterventions<'_> {
    fn before_layer(&mut self, layer: usize, hidden: &mut Matrix, _: &[LayerAttention]) -> Result<()> {
        for spec in self.0.iter().filter(|s| s.layer == layer) {
            spec.apply(hidden);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    /// `d_model x 3 d_model`, columns laid out as `[q | k | v]`. No bias: a
    /// key bias is invisible to the softmax and would only carry noise.
    pub w_qkv: Matrix,
    pub w_attn_out: Matrix,
    pub b_attn_out: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_fc: Matrix,
    pub b_fc: Vec<f64>,
    pub w_proj: Matrix,
    pub b_proj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    pub w_unembed: Matrix,
    pub b_unembed: Vec<f64>,
}

/// Named view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff();
        let layer = LayerWeights {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            w_qkv: Matrix::zeros(d, 3 * d),
            w_attn_out: Matrix::zeros(d, d),
            b_attn_out: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w_fc: Matrix::zeros(d, f),
            b_fc: vec![0.0; f],
            w_proj: Matrix::zeros(f, d),
            b_proj: vec![0.0; d],
        };
        Weights {
            tok_emb: Matrix::zeros(cfg.vocab_size, d),
            pos_emb: Matrix::zeros(cfg.max_seq_len, d),
            layers: vec![layer; cfg.n_layers],
            lnf_gain: vec![0.0; d],
            lnf_bias: vec![0.0; d],
            w_unembed: Matrix::zeros(d, cfg.vocab_size),
            b_unembed: vec![0.0; cfg.vocab_size],
        }
    }

    /// Every tensor in canonical order with its name and shape.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        fn mat<'a>(name: String, m: &'a Matrix) -> TensorView<'a> {
            TensorView {
                name,
                shape: vec![m.rows(), m.cols()],
                data: m.data(),
            }
        }
        fn vec<'a>(name: String, v: &'a [f64]) -> TensorView<'a> {
            TensorView {
                name,
                shape: vec![v.len()],
                data: v,
            }
        }
        let mut out = vec![
            mat("tok_emb".into(), &self.tok_emb),
            mat("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push(vec(p("ln1_gain"), &l.ln1_gain));
            out.push(vec(p("ln1_bias"), &l.ln1_bias));
            out.push(mat(p("w_qkv"), &l.w_qkv));
            out.push(mat(p("w_attn_out"), &l.w_attn_out));
            out.push(vec(p("b_attn_out"), &l.b_attn_out));
            out.push(vec(p("ln2_gain"), &l.ln2_gain));
            out.push(vec(p("ln2_bias"), &l.ln2_bias));
            out.push(mat(p("w_fc"), &l.w_fc));
            out.push(vec(p("b_fc"), &l.b_fc));
            out.push(mat(p("w_proj"), &l.w_proj));
            out.push(vec(p("b_proj"), &l.b_proj));
        }
        out.push(vec("lnf_gain".into(), &self.lnf_gain));
        out.push(vec("lnf_bias".into(), &self.lnf_bias));
        out.push(mat("w_unembed".into(), &self.w_unembed));
        out.push(vec("b_unembed".into(), &self.b_unembed));
        out
    }

    /// Mutable slices in the same order as [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(l.w_qkv.data_mut());
            out.push(l.w_attn_out.data_mut());
            out.push(&mut l.b_attn_out);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(l.w_fc.data_mut());
            out.push(&mut l.b_fc);
            out.push(l.w_proj.data_mut());
            out.push(&mut l.b_proj);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(self.w_unembed.data_mut());
        out.push(&mut self.b_unembed);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// SHA-256 over the little-endian bytes of every tensor, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            h.update(t.name.as_bytes());
            for v in t.data {
                h.update(v.to_le_bytes());
            }
        }
        to_hex(&h.finalize())
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

/// Builds a model with seeded scaled-uniform weights.
///
/// Linear weights draw from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, with the
/// two residual-writing projections further divided by `sqrt(2 n_layers)`.
/// Embeddings draw from `U(-0.5, 0.5)`, layer-norm gains start at 1 and
/// every bias at 0.
pub fn init_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = Weights::zeros(&config);
    let d = config.d_model;
    let resid_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();

    let mut fill = |m: &mut [f64], bound: f64| {
        for v in m.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    };
    fill(w.tok_emb.data_mut(), 0.5);
    fill(w.pos_emb.data_mut(), 0.5);
    let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
    for l in &mut w.layers {
        l.ln1_gain.fill(1.0);
        l.ln2_gain.fill(1.0);
        fill(l.w_qkv.data_mut(), inv_sqrt(d));
        fill(l.w_attn_out.data_mut(), inv_sqrt(d) * resid_scale);
        fill(l.w_fc.data_mut(), inv_sqrt(d));
        fill(l.w_proj.data_mut(), inv_sqrt(config.d_ff()) * resid_scale);
    }
    w.lnf_gain.fill(1.0);
    fill(w.w_unembed.data_mut(), inv_sqrt(d));
    Ok(Model { config, weights: w })
}

/// Activations of one block kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    /// Residual stream entering the block (after any hook).
    pub x_in: Matrix,
    pub ln1_out: Matrix,
    pub ln1_stats: Vec<(f64, f64)>,
    pub qkv: Matrix,
    /// Attention probabilities per head, `seq x seq`.
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub x_mid: Matrix,
    pub ln2_out: Matrix,
    pub ln2_stats: Vec<(f64, f64)>,
    pub fc_pre: Matrix,
    pub fc_act: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    /// Final residual row at the answer position.
    pub x_final: Vec<f64>,
    pub lnf_out: Vec<f64>,
    pub lnf_stats: (f64, f64),
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn add_bias_rows(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn layer_norm_rows(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, Vec<(f64, f64)>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut stats = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        stats.push(layer_norm_row(x.row(r), gain, bias, LN_EPS, out.row_mut(r)));
    }
    (out, stats)
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let expect = Weights::zeros(&config);
        let got = weights.tensors();
        for (e, g) in expect.tensors().iter().zip(&got) {
            if e.name != g.name || e.shape != g.shape {
                return Err(Error::usage(format!(
                    "weight tensor {} has shape {:?}, expected {:?}",
                    g.name, g.shape, e.shape
                )));
            }
        }
        Ok(Model { config, weights })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.config.max_seq_len {
            return Err(Error::usage(format!(
                "sequence length {} exceeds max_seq_len {}",
                seq.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = seq.tokens().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::usage(format!(
                "token id {t} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass with a fixed list of interventions.
    pub fn forward(
        &self,
        seq: &TokenSequence,
        interventions: &[InterventionSpec],
        capture_attention: bool,
    ) -> Result<ForwardTrace> {
        for spec in interventions {
            spec.validate(self.config.n_layers, seq)?;
        }
        self.forward_with_hook(seq, &mut StaticInterventions(interventions), capture_attention)
    }

    /// Forward pass with an arbitrary per-layer hook.
    pub fn forward_with_hook(
        &self,
        seq: &TokenSequence,
        hook: &mut dyn LayerHook,
        capture_attention: bool,
    ) -> Result<ForwardTrace> {
        self.check_sequence(seq)?;
        let start = Instant::now();
        let mut x = self.embed(seq);
        let mut attention: Vec<LayerAttention> = Vec::new();
        for (layer, lw) in self.weights.layers.iter().enumerate() {
            hook.before_layer(layer, &mut x, &attention)?;
            let (next, probs) = self.block(lw, &x, None);
            x = next;
            if capture_attention {
                attention.push(probs);
            }
        }
        let logits = self.head(x.row(seq.answer_pos()), None);
        Ok(ForwardTrace {
            logits,
            attention,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    /// Forward pass that keeps every activation needed by the backward pass.
    pub(crate) fn forward_cached(&self, seq: &TokenSequence) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_sequence(seq)?;
        let mut x = self.embed(seq);
        let mut blocks = Vec::with_capacity(self.config.n_layers);
        for lw in &self.weights.layers {
            let mut cache = None;
            let (next, _) = self.block(lw, &x, Some(&mut cache));
            blocks.push(cache.expect("block cache filled"));
            x = next;
        }
        let x_final = x.row(seq.answer_pos()).to_vec();
        let mut stats = (0.0, 0.0);
        let mut lnf_out = vec![0.0; self.config.d_model];
        let logits = self.head(&x_final, Some((&mut lnf_out, &mut stats)));
        Ok((
            logits,
            ForwardCache {
                blocks,
                x_final,
                lnf_out,
                lnf_stats: stats,
            },
        ))
    }

    pub(crate) fn embed(&self, seq: &TokenSequence) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(seq.len(), d);
        for (t, &tok) in seq.tokens().iter().enumerate() {
            let row = x.row_mut(t);
            for ((v, e), p) in row
                .iter_mut()
                .zip(self.weights.tok_emb.row(tok))
                .zip(self.weights.pos_emb.row(t))
            {
                *v = e + p;
            }
        }
        x
    }

    fn head(&self, x_row: &[f64], cache: Option<(&mut Vec<f64>, &mut (f64, f64))>) -> Vec<f64> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let mut normed = vec![0.0; d];
        let stats = layer_norm_row(
            x_row,
            &self.weights.lnf_gain,
            &self.weights.lnf_bias,
            LN_EPS,
            &mut normed,
        );
        let mut logits = self.weights.b_unembed.clone();
        matmul_acc(&normed, self.weights.w_unembed.data(), &mut logits, 1, d, v);
        if let Some((out, s)) = cache {
            *out = normed;
            *s = stats;
        }
        logits
    }

    fn block(
        &self,
        lw: &LayerWeights,
        x: &Matrix,
        cache: Option<&mut Option<BlockCache>>,
    ) -> (Matrix, Vec<Matrix>) {
        let t = x.rows();
        let d = self.config.d_model;
        let f = self.config.d_ff();
        let n_heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let (ln1_out, ln1_stats) = layer_norm_rows(x, &lw.ln1_gain, &lw.ln1_bias);
        let mut qkv = Matrix::zeros(t, 3 * d);
        matmul_acc(ln1_out.data(), lw.w_qkv.data(), qkv.data_mut(), t, d, 3 * d);

        let mut ctx = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q_off = h * hd;
            let k_off = d + h * hd;
            let v_off = 2 * d + h * hd;
            let mut p = Matrix::zeros(t, t);
            for i in 0..t {
                let q = &qkv.row(i)[q_off..q_off + hd];
                let row = &mut p.row_mut(i)[..=i];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = numerics::dot(q, &qkv.row(j)[k_off..k_off + hd]) * scale;
                }
                softmax_in_place(row);
            }
            for i in 0..t {
                let mut acc = vec![0.0; hd];
                for j in 0..=i {
                    let w = p.get(i, j);
                    for (a, v) in acc.iter_mut().zip(&qkv.row(j)[v_off..v_off + hd]) {
                        *a += w * v;
                    }
                }
                ctx.row_mut(i)[q_off..q_off + hd].copy_from_slice(&acc);
            }
            probs.push(p);
        }

        let mut x_mid = x.clone();
        let mut attn_out = Matrix::zeros(t, d);
        matmul_acc(ctx.data(), lw.w_attn_out.data(), attn_out.data_mut(), t, d, d);
        add_bias_rows(&mut attn_out, &lw.b_attn_out);
        for (v, a) in x_mid.data_mut().iter_mut().zip(attn_out.data()) {
            *v += a;
        }

        let (ln2_out, ln2_stats) = layer_norm_rows(&x_mid, &lw.ln2_gain, &lw.ln2_bias);
        let mut fc_pre = Matrix::zeros(t, f);
        matmul_acc(ln2_out.data(), lw.w_fc.data(), fc_pre.data_mut(), t, d, f);
        add_bias_rows(&mut fc_pre, &lw.b_fc);
        let mut fc_act = fc_pre.clone();
        for v in fc_act.data_mut() {
            *v = gelu(*v);
        }
        let mut out = x_mid.clone();
        let mut mlp_out = Matrix::zeros(t, d);
        matmul_acc(fc_act.data(), lw.w_proj.data(), mlp_out.data_mut(), t, f, d);
        add_bias_rows(&mut mlp_out, &lw.b_proj);
        for (v, m) in out.data_mut().iter_mut().zip(mlp_out.data()) {
            *v += m;
        }

        if let Some(slot) = cache {
            *slot = Some(BlockCache {
                x_in: x.clone(),
                ln1_out,
                ln1_stats,
                qkv,
                probs: probs.clone(),
                ctx,
                x_mid,
                ln2_out,
                ln2_stats,
                fc_pre,
                fc_act,
            });
        }
        (out, probs)
    }

    /// Greedy answer token.
    pub fn predict(&self, seq: &TokenSequence) -> Result<usize> {
        Ok(argmax(&self.forward(seq, &[], false)?.logits))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Head-averaged attention of the answer position over the image span,
/// renormalized to a distribution over the `d` image tokens.
pub fn image_attention(trace: &ForwardTrace, layer: usize, seq: &TokenSequence) -> Result<ProbVec> {
    if trace.attention.is_empty() {
        return Err(Error::usage("trace was produced without attention capture"));
    }
    let heads = trace.attention.get(layer).ok_or_else(|| {
        Error::usage(format!(
            "layer {layer} not captured ({} layers in trace)",
            trace.attention.len()
        ))
    })?;
    image_attention_from_heads(heads, seq)
}

pub(crate) fn image_attention_from_heads(heads: &[Matrix], seq: &TokenSequence) -> Result<ProbVec> {
    if heads.is_empty() {
        return Err(Error::usage("no attention heads"));
    }
    if seq.image_len() == 0 {
        return Err(Error::usage("sequence has an empty image span"));
    }
    let row = seq.answer_pos();
    let span = seq.image_span();
    let mut acc = vec![0.0; span.len()];
    for h in heads {
        if h.rows() != seq.len() || h.cols() != seq.len() {
            return Err(Error::usage("attention matrix does not match sequence length"));
        }
        for (a, v) in acc.iter_mut().zip(&h.row(row)[span.clone()]) {
            *a += v;
        }
    }
    let inv = 1.0 / heads.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    numerics::normalize(&acc).map_err(|e| match e {
        Error::Degenerate(_) => Error::degenerate("answer row puts no attention on the image span"),
        other => other,
    })
}
