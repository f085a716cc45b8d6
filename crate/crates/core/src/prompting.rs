//! Trainable prompts for a frozen backbone.
//!
//! A [`PromptSet`] holds the only tensors that move during task adaptation:
//! one block of input rows prepended to every embedded sequence, plus one
//! key block and one value block per transformer layer. The deep blocks
//! replace the first `l` rows of each layer's input on the key/value path
//! before the frozen norm and projections run, so the trained prompts steer
//! attention without touching a single backbone weight.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::lm::{stage_layer, stage_layer_params, AttentionLayer, EmbeddedSequence, LMConfig};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct PromptSet {
    /// Prompt length `l` (rows per block). Zero is legal and behaves as
    /// "no prompts".
    pub len: usize,
    /// Model width the blocks were sized for.
    pub dim: usize,
    /// l×d rows prepended to the embedded input.
    pub input: Tensor,
    /// Per-layer l×d key blocks.
    pub keys: Vec<Tensor>,
    /// Per-layer l×d value blocks.
    pub values: Vec<Tensor>,
}

/// Trainable parameters in a prompt set: `l·d` for the input block plus
/// `2·l·d` per layer.
pub fn count_trainable(len: usize, dim: usize, layers: usize) -> usize {
    len * dim * (1 + 2 * layers)
}

/// Fresh Gaussian prompts (std 0.02) sized for the given backbone config.
/// Initial values sit on the f32 grid, like everything that passes through
/// a checkpoint.
pub fn init_prompts(len: usize, config: &LMConfig, seed: u64) -> PromptSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dim;
    let block = |rng: &mut ChaCha8Rng| {
        let mut t = Tensor::gaussian(vec![len, d], INIT_STD, rng);
        t.round_to_f32();
        t.with_requires_grad(true)
    };
    let input = block(&mut rng);
    let keys = (0..config.layers).map(|_| block(&mut rng)).collect();
    let values = (0..config.layers).map(|_| block(&mut rng)).collect();
    PromptSet {
        len,
        dim: d,
        input,
        keys,
        values,
    }
}

impl PromptSet {
    /// Reassembles a prompt set from checkpointed blocks, validating shape
    /// consistency.
    pub fn from_parts(input: Tensor, keys: Vec<Tensor>, values: Vec<Tensor>) -> Result<Self> {
        if input.shape().len() != 2 {
            return Err(Error::InvalidInput("prompt input block must be 2-d".into()));
        }
        let len = input.shape()[0];
        let dim = input.shape()[1];
        if keys.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "prompt set has {} key blocks but {} value blocks",
                keys.len(),
                values.len()
            )));
        }
        for (j, block) in keys.iter().chain(values.iter()).enumerate() {
            if block.shape() != [len, dim] {
                return Err(Error::InvalidInput(format!(
                    "prompt block {} has shape {:?}, expected [{len}, {dim}]",
                    j % keys.len().max(1),
                    block.shape()
                )));
            }
        }
        Ok(PromptSet {
            len,
            dim,
            input,
            keys,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    /// Trainable parameter count of this set alone (verbalizer excluded).
    pub fn count_trainable(&self) -> usize {
        count_trainable(self.len, self.dim, self.layers())
    }

    /// Checkpoint tensors in canonical order: input, then key/value per
    /// layer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("prompt.input".into(), &self.input)];
        for (j, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            out.push((format!("prompt.key.{j}"), k));
            out.push((format!("prompt.value.{j}"), v));
        }
        out
    }

    /// Mutable views in the same canonical order (optimizer grouping).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.input];
        for (k, v) in self.keys.iter_mut().zip(self.values.iter_mut()) {
            out.push(k);
            out.push(v);
        }
        out
    }

    pub fn check_compatible(&self, config: &LMConfig) -> Result<()> {
        if self.dim != config.dim {
            return Err(Error::InvalidConfig(format!(
                "prompt width {} does not match model width {}",
                self.dim, config.dim
            )));
        }
        if self.layers() != config.layers {
            return Err(Error::InvalidConfig(format!(
                "prompt set covers {} layers, model has {}",
                self.layers(),
                config.layers
            )));
        }
        Ok(())
    }

    /// Stages all blocks as leaves of `g`.
    pub fn stage(&self, g: &mut Graph) -> StagedPromptSet {
        StagedPromptSet {
            len: self.len,
            dim: self.dim,
            input: g.leaf(&self.input),
            keys: self.keys.iter().map(|t| g.leaf(t)).collect(),
            values: self.values.iter().map(|t| g.leaf(t)).collect(),
        }
    }
}

/// Graph-staged prompt blocks.
#[derive(Debug, Clone)]
pub struct StagedPromptSet {
    len: usize,
    dim: usize,
    input: NodeId,
    keys: Vec<NodeId>,
    values: Vec<NodeId>,
}

impl StagedPromptSet {
    /// Assembles a staged view from already-staged leaves (the finite-
    /// difference harness stages prompts itself to control the leaf list).
    pub fn from_nodes(g: &Graph, input: NodeId, keys: Vec<NodeId>, values: Vec<NodeId>) -> Result<Self> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidInput("prompt input block must be 2-d".into()));
        }
        if keys.len() != values.len() {
            return Err(Error::InvalidInput(
                "staged prompt set needs matching key/value block counts".into(),
            ));
        }
        for id in keys.iter().chain(&values) {
            if g.shape(*id) != shape.as_slice() {
                return Err(Error::InvalidInput(
                    "staged prompt blocks must all share the input block's shape".into(),
                ));
            }
        }
        Ok(StagedPromptSet {
            len: shape[0],
            dim: shape[1],
            input,
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn key(&self, layer: usize) -> NodeId {
        self.keys[layer]
    }

    pub fn value(&self, layer: usize) -> NodeId {
        self.values[layer]
    }

    pub fn check_compatible(&self, config: &LMConfig) -> Result<()> {
        if self.dim != config.dim || self.keys.len() != config.layers {
            return Err(Error::InvalidConfig(format!(
                "staged prompts ({} layers, width {}) do not match model ({} layers, width {})",
                self.keys.len(),
                self.dim,
                config.layers,
                config.dim
            )));
        }
        Ok(())
    }

    /// Leaf ids in canonical order, matching [`PromptSet::named_tensors`].
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.input];
        for (k, v) in self.keys.iter().zip(&self.values) {
            out.push(*k);
            out.push(*v);
        }
        out
    }
}

/// Prepends the prompt's input rows to an embedded sequence. The combined
/// sequence is renumbered from position 0; the original content rows are
/// untouched.
pub fn inject_input(p: &PromptSet, embedded: &EmbeddedSequence) -> Result<EmbeddedSequence> {
    let d = embedded.rows.shape()[1];
    if p.dim != d {
        return Err(Error::InvalidConfig(format!(
            "prompt width {} does not match embedding width {d}",
            p.dim
        )));
    }
    let mut data = Vec::with_capacity((p.len + embedded.len()) * d);
    data.extend_from_slice(p.input.data());
    data.extend_from_slice(embedded.rows.data());
    Ok(EmbeddedSequence {
        rows: Tensor::new(vec![p.len + embedded.len(), d], data)?,
        positions: (0..p.len + embedded.len()).collect(),
    })
}

/// Runs one transformer block with its key/value path re-routed through
/// prompt rows: the first `l` rows of the layer input are replaced by
/// `p_key` (for keys) and `p_value` (for values) before the frozen norm and
/// projections, exactly as the concatenation composes ahead of W^K/W^V.
/// Setting both blocks equal to the first `l` input rows therefore
/// reproduces the standard layer output.
pub fn attention_with_deep_prompts(
    layer: &AttentionLayer,
    x_j: &Tensor,
    p_key: &Tensor,
    p_value: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    if x_j.shape().len() != 2 {
        return Err(Error::InvalidInput("layer input must be 2-d".into()));
    }
    let t = x_j.shape()[0];
    let d = x_j.shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "width {d} must be a positive multiple of head count {heads}"
        )));
    }
    let l = p_key.shape()[0];
    if p_key.shape() != [l, d] || p_value.shape() != [l, d] {
        return Err(Error::InvalidInput(format!(
            "prompt blocks must both be [{l}, {d}]; got {:?} and {:?}",
            p_key.shape(),
            p_value.shape()
        )));
    }
    if t < l {
        return Err(Error::InvalidInput(format!(
            "deep prompts: sequence length {t} shorter than prompt length {l}"
        )));
    }

    let mut g = Graph::new();
    let staged = stage_layer_params(&mut g, layer);
    let x = g.leaf(x_j);
    let prompts = if l > 0 {
        Some((g.leaf(p_key), g.leaf(p_value)))
    } else {
        None
    };
    let out = stage_layer(&mut g, &staged, x, prompts, heads)?;
    Tensor::new(g.shape(out).to_vec(), g.data(out).to_vec())
}
