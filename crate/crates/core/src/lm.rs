//! Causal transformer language models over discrete units.
//!
//! Two variants share one tower: `gslm` embeds units only; `pgslm` sums
//! unit, duration-bin and pitch-bin embeddings per position and adds
//! duration/pitch prediction heads next to the unit head. Blocks are
//! pre-norm with GELU feed-forward and learned positional embeddings.
//!
//! After [`pretrain`] the model is frozen: every parameter is rounded onto
//! the f32 grid (so checkpoint round-trips are bit-exact), gradient flags
//! are cleared, and the parameter digest is recorded. All tuning and
//! evaluation afterwards runs against the frozen backbone.

use crate::checkpoint::Container;
use crate::dataset::{Dataset, Split, UnitSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{adam_step, AdamState};
use crate::prompting::{PromptSet, StagedPromptSet};
use crate::tensor::{substream_seed, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gslm,
    Pgslm,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Gslm => "gslm",
            Variant::Pgslm => "pgslm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub variant: Variant,
    pub vocab: usize,
    /// Duration embedding rows; raw durations are clipped into [1, bins].
    pub duration_bins: usize,
    /// Pitch embedding rows, including the trailing unvoiced bin.
    pub pitch_bins: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl LMConfig {
    /// Small configuration that pretrains in minutes on synthetic corpora.
    pub fn desk_scale(variant: Variant, vocab: usize) -> Self {
        LMConfig {
            variant,
            vocab,
            duration_bins: 32,
            pitch_bins: 33,
            dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_len: 256,
        }
    }

    /// Dimensions used only for the trainable-parameter budget check; never
    /// trained.
    pub fn budget_reference(variant: Variant) -> Self {
        LMConfig {
            variant,
            vocab: 100,
            duration_bins: 32,
            pitch_bins: 33,
            dim: 1024,
            layers: 12,
            heads: 16,
            ff_dim: 4096,
            max_len: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::InvalidConfig(format!("vocab must be ≥ 2, got {}", self.vocab)));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("need at least one layer".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {} must be a positive multiple of head count {}",
                self.dim, self.heads
            )));
        }
        if self.ff_dim == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig("feed-forward dim and max length must be positive".into()));
        }
        if self.variant == Variant::Pgslm && (self.duration_bins == 0 || self.pitch_bins == 0) {
            return Err(Error::InvalidConfig(
                "pgslm needs duration and pitch bin counts ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub unit: Tensor,
    pub duration: Option<Tensor>,
    pub pitch: Option<Tensor>,
    pub position: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub index: usize,
    pub ln1: LayerNormParams,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2: LayerNormParams,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct OutputHead {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct SpokenLM {
    pub config: LMConfig,
    pub embeddings: EmbeddingTables,
    pub layers: Vec<AttentionLayer>,
    pub final_norm: LayerNormParams,
    pub unit_head: OutputHead,
    pub duration_head: Option<OutputHead>,
    pub pitch_head: Option<OutputHead>,
    frozen: bool,
    frozen_digest: Option<String>,
}

/// Deterministic initialization; the model starts unfrozen and trainable.
pub fn build_lm(config: LMConfig, seed: u64) -> Result<SpokenLM> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dim;
    let gauss = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        Tensor::gaussian(shape, INIT_STD, rng).with_requires_grad(true)
    };
    let ln = || LayerNormParams {
        gamma: Tensor::new(vec![d], vec![1.0; d]).expect("const shape").with_requires_grad(true),
        beta: Tensor::zeros(vec![d]).with_requires_grad(true),
    };

    let is_pgslm = config.variant == Variant::Pgslm;
    let embeddings = EmbeddingTables {
        unit: gauss(vec![config.vocab, d], &mut rng),
        duration: is_pgslm.then(|| gauss(vec![config.duration_bins, d], &mut rng)),
        pitch: is_pgslm.then(|| gauss(vec![config.pitch_bins, d], &mut rng)),
        position: gauss(vec![config.max_len, d], &mut rng),
    };

    let mut layers = Vec::with_capacity(config.layers);
    for index in 0..config.layers {
        layers.push(AttentionLayer {
            index,
            ln1: ln(),
            wq: gauss(vec![d, d], &mut rng),
            wk: gauss(vec![d, d], &mut rng),
            wv: gauss(vec![d, d], &mut rng),
            wo: gauss(vec![d, d], &mut rng),
            ln2: ln(),
            ff: FeedForward {
                w1: gauss(vec![d, config.ff_dim], &mut rng),
                b1: Tensor::zeros(vec![config.ff_dim]).with_requires_grad(true),
                w2: gauss(vec![config.ff_dim, d], &mut rng),
                b2: Tensor::zeros(vec![d]).with_requires_grad(true),
            },
        });
    }

    let head = |outputs: usize, rng: &mut ChaCha8Rng| OutputHead {
        w: gauss(vec![d, outputs], rng),
        b: Tensor::zeros(vec![outputs]).with_requires_grad(true),
    };
    let unit_head = head(config.vocab, &mut rng);
    let duration_head = is_pgslm.then(|| head(config.duration_bins, &mut rng));
    let pitch_head = is_pgslm.then(|| head(config.pitch_bins, &mut rng));

    Ok(SpokenLM {
        config,
        embeddings,
        layers,
        final_norm: ln(),
        unit_head,
        duration_head,
        pitch_head,
        frozen: false,
        frozen_digest: None,
    })
}

/// Per-position token ids after range validation and duration clipping.
#[derive(Debug, Clone)]
struct TokenIds {
    units: Vec<usize>,
    duration_bins: Vec<usize>,
    pitch_bins: Vec<usize>,
}

fn token_ids(config: &LMConfig, seq: &UnitSequence) -> Result<TokenIds> {
    if seq.units.is_empty() {
        return Err(Error::InvalidInput("empty unit sequence".into()));
    }
    for (pos, &u) in seq.units.iter().enumerate() {
        if u >= config.vocab {
            return Err(Error::IndexOutOfRange {
                op: "embed",
                index: u,
                size: config.vocab,
                context: Some(format!("unit at position {pos}")),
            });
        }
    }
    let mut duration_bins = Vec::new();
    let mut pitch_bins = Vec::new();
    if config.variant == Variant::Pgslm {
        duration_bins = seq
            .durations
            .iter()
            .map(|&dur| dur.clamp(1, config.duration_bins) - 1)
            .collect();
        for (pos, &p) in seq.pitch.iter().enumerate() {
            if p >= config.pitch_bins {
                return Err(Error::IndexOutOfRange {
                    op: "embed",
                    index: p,
                    size: config.pitch_bins,
                    context: Some(format!("pitch bin at position {pos}")),
                });
            }
            pitch_bins.push(p);
        }
    }
    Ok(TokenIds {
        units: seq.units.clone(),
        duration_bins,
        pitch_bins,
    })
}

/// Token-content embedding rows paired with their position indices. Content
/// and position are kept separate so prompt injection can renumber
/// positions over the combined sequence; [`SpokenLM::positioned_rows`]
/// produces the view the transformer actually consumes.
#[derive(Debug, Clone)]
pub struct EmbeddedSequence {
    /// T×d rows: e(u) for gslm, e(u)+e(d)+e(f) for pgslm.
    pub rows: Tensor,
    /// Position index of each row.
    pub positions: Vec<usize>,
}

impl EmbeddedSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

impl SpokenLM {
    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Digest recorded at freeze time; `None` while the model is trainable.
    pub fn frozen_digest(&self) -> Option<&str> {
        self.frozen_digest.as_deref()
    }

    /// Backbone tensors in canonical (digest/checkpoint) order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embed.unit".into(), &self.embeddings.unit));
        if let Some(t) = &self.embeddings.duration {
            out.push(("embed.duration".into(), t));
        }
        if let Some(t) = &self.embeddings.pitch {
            out.push(("embed.pitch".into(), t));
        }
        out.push(("embed.position".into(), &self.embeddings.position));
        for layer in &self.layers {
            let j = layer.index;
            out.push((format!("layer.{j}.ln1.gamma"), &layer.ln1.gamma));
            out.push((format!("layer.{j}.ln1.beta"), &layer.ln1.beta));
            out.push((format!("layer.{j}.attn.wq"), &layer.wq));
            out.push((format!("layer.{j}.attn.wk"), &layer.wk));
            out.push((format!("layer.{j}.attn.wv"), &layer.wv));
            out.push((format!("layer.{j}.attn.wo"), &layer.wo));
            out.push((format!("layer.{j}.ln2.gamma"), &layer.ln2.gamma));
            out.push((format!("layer.{j}.ln2.beta"), &layer.ln2.beta));
            out.push((format!("layer.{j}.ff.w1"), &layer.ff.w1));
            out.push((format!("layer.{j}.ff.b1"), &layer.ff.b1));
            out.push((format!("layer.{j}.ff.w2"), &layer.ff.w2));
            out.push((format!("layer.{j}.ff.b2"), &layer.ff.b2));
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &self.final_norm.beta));
        out.push(("head.unit.w".into(), &self.unit_head.w));
        out.push(("head.unit.b".into(), &self.unit_head.b));
        if let Some(h) = &self.duration_head {
            out.push(("head.duration.w".into(), &h.w));
            out.push(("head.duration.b".into(), &h.b));
        }
        if let Some(h) = &self.pitch_head {
            out.push(("head.pitch.w".into(), &h.w));
            out.push(("head.pitch.b".into(), &h.b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.embeddings.unit);
        if let Some(t) = &mut self.embeddings.duration {
            out.push(t);
        }
        if let Some(t) = &mut self.embeddings.pitch {
            out.push(t);
        }
        out.push(&mut self.embeddings.position);
        for layer in &mut self.layers {
            out.push(&mut layer.ln1.gamma);
            out.push(&mut layer.ln1.beta);
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.ln2.gamma);
            out.push(&mut layer.ln2.beta);
            out.push(&mut layer.ff.w1);
            out.push(&mut layer.ff.b1);
            out.push(&mut layer.ff.w2);
            out.push(&mut layer.ff.b2);
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out.push(&mut self.unit_head.w);
        out.push(&mut self.unit_head.b);
        if let Some(h) = &mut self.duration_head {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        if let Some(h) = &mut self.pitch_head {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Content hash over all backbone parameters in canonical order.
    pub fn param_digest(&self) -> String {
        crate::checkpoint::digest_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    /// Rounds every parameter onto the f32 grid, clears gradient flags, and
    /// records the digest. Idempotent.
    pub fn freeze(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
            t.set_requires_grad(false);
        }
        self.frozen = true;
        self.frozen_digest = Some(self.param_digest());
    }

    /// Embeds a sequence into token-content rows plus position indices.
    pub fn embed(&self, seq: &UnitSequence) -> Result<EmbeddedSequence> {
        let ids = token_ids(&self.config, seq)?;
        let mut g = Graph::new();
        let staged = self.stage(&mut g);
        let rows = staged.stage_embed(&mut g, &ids)?;
        let data = g.data(rows).to_vec();
        Ok(EmbeddedSequence {
            rows: Tensor::new(vec![ids.units.len(), self.config.dim], data)?,
            positions: (0..ids.units.len()).collect(),
        })
    }

    /// The rows the transformer consumes: content row t plus the positional
    /// encoding for its position index.
    pub fn positioned_rows(&self, emb: &EmbeddedSequence) -> Result<Tensor> {
        let d = self.config.dim;
        let mut data = emb.rows.data().to_vec();
        for (t, &pos) in emb.positions.iter().enumerate() {
            if pos >= self.config.max_len {
                return Err(Error::IndexOutOfRange {
                    op: "positioned_rows",
                    index: pos,
                    size: self.config.max_len,
                    context: Some(format!("position of row {t}")),
                });
            }
            let enc = &self.embeddings.position.data()[pos * d..(pos + 1) * d];
            for j in 0..d {
                data[t * d + j] += enc[j];
            }
        }
        Tensor::new(vec![emb.positions.len(), d], data)
    }

    /// Stages every backbone tensor as a graph leaf. Frozen models stage
    /// with `requires_grad = false`, so no gradient can reach them.
    pub fn stage(&self, g: &mut Graph) -> StagedLM {
        let layer = stage_layer_params;
        StagedLM {
            config: self.config.clone(),
            unit_table: g.leaf(&self.embeddings.unit),
            duration_table: self.embeddings.duration.as_ref().map(|t| g.leaf(t)),
            pitch_table: self.embeddings.pitch.as_ref().map(|t| g.leaf(t)),
            position_table: g.leaf(&self.embeddings.position),
            layers: self.layers.iter().map(|l| layer(g, l)).collect(),
            final_gamma: g.leaf(&self.final_norm.gamma),
            final_beta: g.leaf(&self.final_norm.beta),
            unit_head_w: g.leaf(&self.unit_head.w),
            unit_head_b: g.leaf(&self.unit_head.b),
            duration_head: self.duration_head.as_ref().map(|h| (g.leaf(&h.w), g.leaf(&h.b))),
            pitch_head: self.pitch_head.as_ref().map(|h| (g.leaf(&h.w), g.leaf(&h.b))),
        }
    }
}

/// Stages one transformer block's parameters as graph leaves.
pub(crate) fn stage_layer_params(g: &mut Graph, l: &AttentionLayer) -> StagedLayer {
    StagedLayer {
        ln1_gamma: g.leaf(&l.ln1.gamma),
        ln1_beta: g.leaf(&l.ln1.beta),
        wq: g.leaf(&l.wq),
        wk: g.leaf(&l.wk),
        wv: g.leaf(&l.wv),
        wo: g.leaf(&l.wo),
        ln2_gamma: g.leaf(&l.ln2.gamma),
        ln2_beta: g.leaf(&l.ln2.beta),
        ff_w1: g.leaf(&l.ff.w1),
        ff_b1: g.leaf(&l.ff.b1),
        ff_w2: g.leaf(&l.ff.w2),
        ff_b2: g.leaf(&l.ff.b2),
    }
}

/// Graph-staged view of a model: every field is a leaf [`NodeId`] in one
/// [`Graph`], so a whole batch can share the staged weights.
#[derive(Debug, Clone)]
pub struct StagedLM {
    pub config: LMConfig,
    unit_table: NodeId,
    duration_table: Option<NodeId>,
    pitch_table: Option<NodeId>,
    position_table: NodeId,
    layers: Vec<StagedLayer>,
    final_gamma: NodeId,
    final_beta: NodeId,
    unit_head_w: NodeId,
    unit_head_b: NodeId,
    duration_head: Option<(NodeId, NodeId)>,
    pitch_head: Option<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, Copy)]
pub struct StagedLayer {
    ln1_gamma: NodeId,
    ln1_beta: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ln2_gamma: NodeId,
    ln2_beta: NodeId,
    ff_w1: NodeId,
    ff_b1: NodeId,
    ff_w2: NodeId,
    ff_b2: NodeId,
}

/// Staged logits for one sequence.
#[derive(Debug, Clone)]
pub struct StagedOutput {
    pub unit_logits: NodeId,
    pub duration_logits: Option<NodeId>,
    pub pitch_logits: Option<NodeId>,
    /// Combined sequence length (prompt rows + token rows).
    pub seq_len: usize,
    /// Prompt length that was injected (0 without prompts).
    pub prompt_len: usize,
}

/// One pre-norm transformer block. When `prompts` is given, the key/value
/// path sees the layer input with its first `l` rows replaced by the prompt
/// rows — Concat happens before the frozen norm + projections, so setting
/// the prompts equal to those input rows reproduces standard attention
/// exactly.
pub(crate) fn stage_layer(
    g: &mut Graph,
    layer: &StagedLayer,
    x: NodeId,
    prompts: Option<(NodeId, NodeId)>,
    heads: usize,
) -> Result<NodeId> {
    let t = g.shape(x)[0];
    let d = g.shape(x)[1];
    let dh = d / heads;

    let kv_input = |g: &mut Graph, p: NodeId| -> Result<NodeId> {
        let l = g.shape(p)[0];
        if t < l {
            return Err(Error::InvalidInput(format!(
                "deep prompts: sequence length {t} shorter than prompt length {l}"
            )));
        }
        let tail = g.slice_rows(x, l, t)?;
        g.concat_rows(p, tail)
    };

    let (k_src, v_src) = match prompts {
        Some((pk, pv)) => (kv_input(g, pk)?, kv_input(g, pv)?),
        None => (x, x),
    };

    let hq = g.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    let hk = g.layer_norm(k_src, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    let hv = g.layer_norm(v_src, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;

    let q = g.matmul(hq, layer.wq)?;
    let k = g.matmul(hk, layer.wk)?;
    let v = g.matmul(hv, layer.wv)?;

    // Causal mask shared by every head of this layer.
    let mut mask = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            mask[i * t + j] = -1e30;
        }
    }
    let mask = g.constant(mask, vec![t, t])?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let masked = g.add(scaled, mask)?;
        let probs = g.softmax(masked)?;
        head_outputs.push(g.matmul(probs, vh)?);
    }
    let concat = g.concat_cols(&head_outputs)?;
    let attn_out = g.matmul(concat, layer.wo)?;
    let x1 = g.add(x, attn_out)?;

    let h2 = g.layer_norm(x1, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
    let f = g.matmul(h2, layer.ff_w1)?;
    let f = g.add_bias(f, layer.ff_b1)?;
    let f = g.gelu(f);
    let f = g.matmul(f, layer.ff_w2)?;
    let f = g.add_bias(f, layer.ff_b2)?;
    g.add(x1, f)
}

impl StagedLM {
    /// Validates a sequence against the config and stages its content
    /// embedding rows (no positions yet).
    pub fn stage_sequence(&self, g: &mut Graph, seq: &UnitSequence) -> Result<NodeId> {
        let ids = token_ids(&self.config, seq)?;
        self.stage_embed(g, &ids)
    }

    /// Content embedding rows (no positions) for validated token ids.
    fn stage_embed(&self, g: &mut Graph, ids: &TokenIds) -> Result<NodeId> {
        let mut rows = g.embedding(self.unit_table, &ids.units)?;
        if self.config.variant == Variant::Pgslm {
            let dur_table = self.duration_table.expect("pgslm has a duration table");
            let pitch_table = self.pitch_table.expect("pgslm has a pitch table");
            let dur = g.embedding(dur_table, &ids.duration_bins)?;
            let pit = g.embedding(pitch_table, &ids.pitch_bins)?;
            rows = g.add(rows, dur)?;
            rows = g.add(rows, pit)?;
        }
        Ok(rows)
    }

    /// Full forward over content rows, optionally injecting prompts at the
    /// input and at every layer's key/value path. Returns per-position
    /// logits over the combined sequence.
    pub fn stage_forward(
        &self,
        g: &mut Graph,
        content_rows: NodeId,
        prompts: Option<&StagedPromptSet>,
    ) -> Result<StagedOutput> {
        let prompt_len = prompts.map_or(0, |p| p.len());
        if let Some(p) = prompts {
            p.check_compatible(&self.config)?;
        }
        let rows = match prompts {
            Some(p) if prompt_len > 0 => g.concat_rows(p.input(), content_rows)?,
            _ => content_rows,
        };
        let seq_len = g.shape(rows)[0];
        if seq_len > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {seq_len} exceeds model maximum {}",
                self.config.max_len
            )));
        }
        if seq_len == 0 {
            return Err(Error::InvalidInput("empty sequence".into()));
        }

        let positions: Vec<usize> = (0..seq_len).collect();
        let pos = g.embedding(self.position_table, &positions)?;
        let mut x = g.add(rows, pos)?;

        for (j, layer) in self.layers.iter().enumerate() {
            let layer_prompts = match prompts {
                Some(p) if prompt_len > 0 => Some((p.key(j), p.value(j))),
                _ => None,
            };
            x = stage_layer(g, layer, x, layer_prompts, self.config.heads)?;
        }

        let x = g.layer_norm(x, self.final_gamma, self.final_beta, LN_EPS)?;
        let unit = g.matmul(x, self.unit_head_w)?;
        let unit_logits = g.add_bias(unit, self.unit_head_b)?;
        let duration_logits = match self.duration_head {
            Some((w, b)) => {
                let out = g.matmul(x, w)?;
                Some(g.add_bias(out, b)?)
            }
            None => None,
        };
        let pitch_logits = match self.pitch_head {
            Some((w, b)) => {
                let out = g.matmul(x, w)?;
                Some(g.add_bias(out, b)?)
            }
            None => None,
        };
        Ok(StagedOutput {
            unit_logits,
            duration_logits,
            pitch_logits,
            seq_len,
            prompt_len,
        })
    }

    /// Like [`stage_forward`], but also returns the input node of every
    /// transformer layer (used by locality and causality probes).
    pub fn stage_forward_traced(
        &self,
        g: &mut Graph,
        content_rows: NodeId,
        prompts: Option<&StagedPromptSet>,
    ) -> Result<(StagedOutput, Vec<NodeId>)> {
        // Re-run the same staging but capture layer inputs. Kept in sync
        // with stage_forward by delegating everything except the loop.
        let prompt_len = prompts.map_or(0, |p| p.len());
        if let Some(p) = prompts {
            p.check_compatible(&self.config)?;
        }
        let rows = match prompts {
            Some(p) if prompt_len > 0 => g.concat_rows(p.input(), content_rows)?,
            _ => content_rows,
        };
        let seq_len = g.shape(rows)[0];
        if seq_len > self.config.max_len || seq_len == 0 {
            return Err(Error::InvalidInput(format!(
                "sequence length {seq_len} outside (0, {}]",
                self.config.max_len
            )));
        }
        let positions: Vec<usize> = (0..seq_len).collect();
        let pos = g.embedding(self.position_table, &positions)?;
        let mut x = g.add(rows, pos)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        for (j, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(x);
            let layer_prompts = match prompts {
                Some(p) if prompt_len > 0 => Some((p.key(j), p.value(j))),
                _ => None,
            };
            x = stage_layer(g, layer, x, layer_prompts, self.config.heads)?;
        }
        let x = g.layer_norm(x, self.final_gamma, self.final_beta, LN_EPS)?;
        let unit = g.matmul(x, self.unit_head_w)?;
        let unit_logits = g.add_bias(unit, self.unit_head_b)?;
        Ok((
            StagedOutput {
                unit_logits,
                duration_logits: None,
                pitch_logits: None,
                seq_len,
                prompt_len,
            },
            layer_inputs,
        ))
    }
}

/// Softmax over the final position's unit logits, staged for training
/// compositions (verbalizer losses differentiate through this node).
pub fn stage_readout_distribution(g: &mut Graph, out: &StagedOutput) -> Result<NodeId> {
    let last = g.slice_rows(out.unit_logits, out.seq_len - 1, out.seq_len)?;
    g.softmax(last)
}

/// Plain-tensor forward output.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub unit_logits: Tensor,
    pub duration_logits: Option<Tensor>,
    pub pitch_logits: Option<Tensor>,
    pub prompt_len: usize,
}

/// Forward pass over one sequence; prompts, when given, are injected at the
/// input and at every layer.
pub fn forward(lm: &SpokenLM, emb: &EmbeddedSequence, prompts: Option<&PromptSet>) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let staged = lm.stage(&mut g);
    let rows = g.leaf(&emb.rows);
    let staged_prompts = prompts.map(|p| p.stage(&mut g));
    let out = staged.stage_forward(&mut g, rows, staged_prompts.as_ref())?;
    let to_tensor = |g: &Graph, id: NodeId| {
        Tensor::new(g.shape(id).to_vec(), g.data(id).to_vec()).expect("staged shape is consistent")
    };
    Ok(ForwardOutput {
        unit_logits: to_tensor(&g, out.unit_logits),
        duration_logits: out.duration_logits.map(|id| to_tensor(&g, id)),
        pitch_logits: out.pitch_logits.map(|id| to_tensor(&g, id)),
        prompt_len: out.prompt_len,
    })
}

/// Softmax over the unit logits at the final position.
pub fn next_unit_distribution(
    lm: &SpokenLM,
    seq: &UnitSequence,
    prompts: Option<&PromptSet>,
) -> Result<Vec<f64>> {
    let emb = lm.embed(seq)?;
    let out = forward(lm, &emb, prompts)?;
    let v = lm.config.vocab;
    let rows = out.unit_logits.shape()[0];
    let last = &out.unit_logits.data()[(rows - 1) * v..rows * v];
    let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = last.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean training loss per epoch (all streams summed for pgslm).
    pub epoch_losses: Vec<f64>,
    /// Unit-stream validation perplexity before any update.
    pub initial_valid_perplexity: f64,
    /// Unit-stream validation perplexity after the final epoch.
    pub final_valid_perplexity: f64,
}

/// Per-sequence language-modeling loss: positions 0..T-1 predict token
/// t+1 on every active stream.
fn stage_lm_loss(
    staged: &StagedLM,
    g: &mut Graph,
    ids: &TokenIds,
) -> Result<NodeId> {
    let t = ids.units.len();
    debug_assert!(t >= 2);
    let content = staged.stage_embed(g, ids)?;
    let out = staged.stage_forward(g, content, None)?;
    let context = g.slice_rows(out.unit_logits, 0, t - 1)?;
    let mut loss = g.cross_entropy(context, &ids.units[1..])?;
    if staged.config.variant == Variant::Pgslm {
        let dur_logits = out.duration_logits.expect("pgslm duration head");
        let dur_ctx = g.slice_rows(dur_logits, 0, t - 1)?;
        let dur_loss = g.cross_entropy(dur_ctx, &ids.duration_bins[1..])?;
        loss = g.add(loss, dur_loss)?;
        let pitch_logits = out.pitch_logits.expect("pgslm pitch head");
        let pitch_ctx = g.slice_rows(pitch_logits, 0, t - 1)?;
        let pitch_loss = g.cross_entropy(pitch_ctx, &ids.pitch_bins[1..])?;
        loss = g.add(loss, pitch_loss)?;
    }
    Ok(loss)
}

/// Unit-stream perplexity over a split: exp of the mean next-unit
/// cross-entropy across all predicted positions.
pub fn unit_perplexity(lm: &SpokenLM, dataset: &Dataset, split: Split) -> Result<f64> {
    let mut total_nll = 0.0;
    let mut total_positions = 0usize;
    for seq in dataset.split(split) {
        if seq.units.len() < 2 {
            continue;
        }
        let ids = token_ids(&lm.config, seq)?;
        let mut g = Graph::new();
        let staged = lm.stage(&mut g);
        let content = staged.stage_embed(&mut g, &ids)?;
        let out = staged.stage_forward(&mut g, content, None)?;
        let t = ids.units.len();
        let context = g.slice_rows(out.unit_logits, 0, t - 1)?;
        let loss = g.cross_entropy(context, &ids.units[1..])?;
        total_nll += g.value(loss) * (t - 1) as f64;
        total_positions += t - 1;
    }
    if total_positions == 0 {
        return Err(Error::InvalidInput(
            "perplexity: split has no sequence of length ≥ 2".into(),
        ));
    }
    Ok((total_nll / total_positions as f64).exp())
}

/// Language-model training on the train split; freezes the model on
/// completion and records the parameter digest.
pub fn pretrain(lm: &mut SpokenLM, dataset: &Dataset, config: &PretrainConfig) -> Result<PretrainLog> {
    if lm.frozen {
        return Err(Error::Frozen("pretrain: model is already frozen".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig("pretrain: epochs and batch size must be positive".into()));
    }
    let train: Vec<&UnitSequence> = dataset
        .split(Split::Train)
        .into_iter()
        .filter(|s| s.units.len() >= 2)
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidInput("pretrain: no train sequences of length ≥ 2".into()));
    }
    // Validate all token ids up front so failures happen before training.
    let train_ids: Vec<TokenIds> = train
        .iter()
        .map(|s| token_ids(&lm.config, s))
        .collect::<Result<_>>()?;

    let initial_valid_perplexity = unit_perplexity(lm, dataset, Split::Valid)?;

    let mut adam = AdamState::new(config.lr, 0.9, 0.999, 1e-8)?;
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let staged = lm.stage(&mut g);
            let mut batch_loss: Option<NodeId> = None;
            for &i in chunk {
                let loss = stage_lm_loss(&staged, &mut g, &train_ids[i])?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            let total = batch_loss.expect("non-empty chunk");
            let mean = g.scale(total, 1.0 / chunk.len() as f64);
            g.backward(mean)?;
            epoch_loss += g.value(mean);
            batches += 1;

            // Copy gradients out in canonical order, then step.
            let staged_ids = staged.leaf_ids();
            {
                let mut params = lm.tensors_mut();
                debug_assert_eq!(params.len(), staged_ids.len());
                for (param, id) in params.iter_mut().zip(&staged_ids) {
                    param.zero_grad();
                    if let Some(grad) = g.grad(*id) {
                        param.accumulate_grad(grad)?;
                    }
                }
                adam_step(&mut adam, &mut params)?;
            }
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    lm.freeze();
    let final_valid_perplexity = unit_perplexity(lm, dataset, Split::Valid)?;
    Ok(PretrainLog {
        epoch_losses,
        initial_valid_perplexity,
        final_valid_perplexity,
    })
}

impl StagedLM {
    /// Leaf node ids in the same canonical order as
    /// [`SpokenLM::named_tensors`].
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        out.push(self.unit_table);
        if let Some(t) = self.duration_table {
            out.push(t);
        }
        if let Some(t) = self.pitch_table {
            out.push(t);
        }
        out.push(self.position_table);
        for l in &self.layers {
            out.extend([
                l.ln1_gamma, l.ln1_beta, l.wq, l.wk, l.wv, l.wo, l.ln2_gamma, l.ln2_beta, l.ff_w1,
                l.ff_b1, l.ff_w2, l.ff_b2,
            ]);
        }
        out.push(self.final_gamma);
        out.push(self.final_beta);
        out.push(self.unit_head_w);
        out.push(self.unit_head_b);
        if let Some((w, b)) = self.duration_head {
            out.extend([w, b]);
        }
        if let Some((w, b)) = self.pitch_head {
            out.extend([w, b]);
        }
        out
    }
}

/// Checkpoint config: the architecture plus whether the parameters were
/// frozen when saved. A backbone must record `frozen: true` before it can
/// be tuned against.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LMCheckpoint {
    frozen: bool,
    lm: LMConfig,
}

/// Saves a frozen model. Pass `allow_unfrozen` to checkpoint mid-training
/// state explicitly; such a checkpoint records `frozen: false` and loads
/// back trainable.
pub fn save_lm_with(lm: &SpokenLM, path: &Path, allow_unfrozen: bool) -> Result<()> {
    if !lm.frozen && !allow_unfrozen {
        return Err(Error::NotFrozen(
            "save_lm: model is not frozen; pretrain it first or save with the explicit flag".into(),
        ));
    }
    let named = lm.named_tensors();
    let container = Container::build(
        LMCheckpoint { frozen: lm.frozen, lm: lm.config.clone() },
        named.iter().map(|(n, t)| (n.as_str(), *t)),
    );
    container.save(path)
}

pub fn save_lm(lm: &SpokenLM, path: &Path) -> Result<()> {
    save_lm_with(lm, path, false)
}

/// Loads a model, verifying the container digest and every tensor shape
/// against the stored config. The frozen state round-trips: a mid-training
/// checkpoint loads back trainable and cannot be tuned against.
pub fn load_lm(path: &Path) -> Result<SpokenLM> {
    let container: Container<LMCheckpoint> = Container::load(path)?;
    let frozen = container.config.frozen;
    let config = container.config.lm.clone();
    config.validate()?;
    // Build the skeleton, then overwrite every tensor from the container.
    let mut lm = build_lm(config, 0)?;
    {
        let expected: Vec<String> = lm.named_tensors().into_iter().map(|(n, _)| n).collect();
        let found: Vec<&str> = container.tensors.iter().map(|r| r.name.as_str()).collect();
        if expected.iter().map(String::as_str).collect::<Vec<_>>() != found {
            return Err(Error::Corrupt(format!(
                "{}: tensor list does not match config (expected {} tensors, found {})",
                path.display(),
                expected.len(),
                found.len()
            )));
        }
        let shapes: Vec<Vec<usize>> = lm.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut params = lm.tensors_mut();
        for ((param, record), shape) in params.iter_mut().zip(&container.tensors).zip(&shapes) {
            if &record.shape != shape {
                return Err(Error::Corrupt(format!(
                    "{}: tensor {:?} has shape {:?}, expected {:?}",
                    path.display(),
                    record.name,
                    record.shape,
                    shape
                )));
            }
            **param = record.to_tensor()?;
        }
    }
    if frozen {
        lm.freeze();
        // freeze() recomputes the digest from the loaded values; it must
        // agree with the container's (already blob-verified) digest.
        let digest = lm.param_digest();
        if digest != container.param_digest {
            return Err(Error::DigestMismatch {
                expected: container.param_digest,
                actual: digest,
            });
        }
    }
    Ok(lm)
}
