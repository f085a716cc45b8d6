//! Verbalizers: maps from the LM's unit-vocabulary distribution to task
//! classes.
//!
//! The learnable verbalizer is a linear layer over the full softmax
//! distribution and trains jointly with the prompts. The mapped
//! verbalizers assign each class exactly one unit — a random draw, or the
//! unit most frequently produced for that class — and read off only those
//! coordinates, discarding everything else.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const INIT_STD: f64 = 0.02;
const DIST_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LearnableVerbalizer {
    pub classes: usize,
    pub vocab: usize,
    /// C×V weight matrix.
    pub weights: Tensor,
    /// C biases.
    pub bias: Tensor,
}

impl LearnableVerbalizer {
    pub fn init(classes: usize, vocab: usize, seed: u64) -> Result<Self> {
        if classes < 2 || vocab < 1 {
            return Err(Error::InvalidConfig(format!(
                "verbalizer needs ≥ 2 classes and ≥ 1 vocabulary entry, got {classes}/{vocab}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Weights start on the f32 grid, like everything that passes
        // through a checkpoint.
        let mut weights = Tensor::gaussian(vec![classes, vocab], INIT_STD, &mut rng);
        weights.round_to_f32();
        Ok(LearnableVerbalizer {
            classes,
            vocab,
            weights: weights.with_requires_grad(true),
            bias: Tensor::zeros(vec![classes]).with_requires_grad(true),
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("verbalizer.weights".into(), &self.weights),
            ("verbalizer.bias".into(), &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights, &mut self.bias]
    }

    /// Stages the verbalizer score computation: `dist_row` (1×V) →
    /// 1×C class scores.
    pub fn stage_scores(&self, g: &mut Graph, weights: NodeId, bias: NodeId, dist_row: NodeId) -> Result<NodeId> {
        let wt = g.transpose(weights)?;
        let scores = g.matmul(dist_row, wt)?;
        g.add_bias(scores, bias)
    }
}

fn check_dist(op: &'static str, dist: &[f64], vocab: usize) -> Result<()> {
    if dist.len() != vocab {
        return Err(Error::InvalidInput(format!(
            "{op}: distribution length {} does not match vocabulary {vocab}",
            dist.len()
        )));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > DIST_SUM_TOL {
        return Err(Error::InvalidInput(format!(
            "{op}: distribution sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// Linear class scores: `weights · dist + bias`.
pub fn verbalize_learnable(v: &LearnableVerbalizer, dist: &[f64]) -> Result<Vec<f64>> {
    check_dist("verbalize_learnable", dist, v.vocab)?;
    let w = v.weights.data();
    let b = v.bias.data();
    Ok((0..v.classes)
        .map(|c| {
            let row = &w[c * v.vocab..(c + 1) * v.vocab];
            row.iter().zip(dist).map(|(wi, xi)| wi * xi).sum::<f64>() + b[c]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappedKind {
    Random,
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappedVerbalizer {
    pub kind: MappedKind,
    /// `assignment[c]` is the unit id carrying class c; injective.
    pub assignment: Vec<usize>,
}

impl MappedVerbalizer {
    pub fn classes(&self) -> usize {
        self.assignment.len()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (c, &u) in self.assignment.iter().enumerate() {
            if u >= vocab {
                return Err(Error::InvalidInput(format!(
                    "class {c} assigned unit {u} outside vocabulary {vocab}"
                )));
            }
            if !seen.insert(u) {
                return Err(Error::InvalidInput(format!(
                    "unit {u} assigned to more than one class"
                )));
            }
        }
        Ok(())
    }
}

/// Uniformly random injective class→unit assignment.
pub fn init_random_map(vocab: usize, classes: usize, seed: u64) -> Result<MappedVerbalizer> {
    if vocab < classes {
        return Err(Error::InvalidConfig(format!(
            "cannot map {classes} classes injectively into {vocab} units"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = rand::seq::index::sample(&mut rng, vocab, classes).into_vec();
    Ok(MappedVerbalizer {
        kind: MappedKind::Random,
        assignment,
    })
}

/// Frequency-based assignment: tally the argmax unit of every training
/// readout per class, then hand out units greedily in descending (count,
/// class id, unit id) priority, skipping units already taken. Classes left
/// over fall back to the lowest free unit.
pub fn fit_frequency_map(
    readout_dists: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> Result<MappedVerbalizer> {
    if readout_dists.len() != labels.len() || readout_dists.is_empty() {
        return Err(Error::InvalidInput(
            "fit_frequency_map: need equal, non-empty readouts and labels".into(),
        ));
    }
    if classes < 2 {
        return Err(Error::InvalidConfig("fit_frequency_map: need ≥ 2 classes".into()));
    }
    let vocab = readout_dists[0].len();
    if vocab < classes {
        return Err(Error::InvalidConfig(format!(
            "cannot map {classes} classes injectively into {vocab} units"
        )));
    }
    let mut counts = vec![vec![0usize; vocab]; classes];
    let mut seen_class = vec![false; classes];
    for (dist, &label) in readout_dists.iter().zip(labels) {
        if label >= classes {
            return Err(Error::InvalidInput(format!(
                "fit_frequency_map: label {label} outside [0, {classes})"
            )));
        }
        if dist.len() != vocab {
            return Err(Error::InvalidInput(
                "fit_frequency_map: ragged readout distributions".into(),
            ));
        }
        // Argmax unit, ties to the lowest id.
        let mut best = 0usize;
        for (u, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = u;
            }
        }
        counts[label][best] += 1;
        seen_class[label] = true;
    }
    if let Some(missing) = seen_class.iter().position(|s| !s) {
        return Err(Error::InvalidInput(format!(
            "fit_frequency_map: class {missing} has no examples"
        )));
    }

    // All (count, class, unit) candidates with nonzero count, best first.
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (c, row) in counts.iter().enumerate() {
        for (u, &n) in row.iter().enumerate() {
            if n > 0 {
                candidates.push((n, c, u));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut assignment = vec![usize::MAX; classes];
    let mut taken = vec![false; vocab];
    for (_, c, u) in candidates {
        if assignment[c] == usize::MAX && !taken[u] {
            assignment[c] = u;
            taken[u] = true;
        }
    }
    for slot in assignment.iter_mut() {
        if *slot == usize::MAX {
            let free = taken.iter().position(|t| !t).expect("vocab ≥ classes");
            *slot = free;
            taken[free] = true;
        }
    }
    Ok(MappedVerbalizer {
        kind: MappedKind::Frequency,
        assignment,
    })
}

/// Predicted class: argmax over `dist[assignment[c]]`, ties to the lowest
/// class id.
pub fn verbalize_mapped(m: &MappedVerbalizer, dist: &[f64]) -> Result<usize> {
    let needed = m.assignment.iter().max().copied().unwrap_or(0);
    if dist.len() <= needed {
        return Err(Error::InvalidInput(format!(
            "verbalize_mapped: distribution length {} too short for assigned unit {needed}",
            dist.len()
        )));
    }
    let mut best = 0usize;
    for c in 1..m.assignment.len() {
        if dist[m.assignment[c]] > dist[m.assignment[best]] {
            best = c;
        }
    }
    Ok(best)
}

/// Either verbalizer behind one surface, as the tuner sees it.
#[derive(Debug, Clone)]
pub enum Verbalizer {
    Learnable(LearnableVerbalizer),
    Mapped(MappedVerbalizer),
}

impl Verbalizer {
    pub fn classes(&self) -> usize {
        match self {
            Verbalizer::Learnable(v) => v.classes,
            Verbalizer::Mapped(m) => m.classes(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Verbalizer::Learnable(_) => "learnable",
            Verbalizer::Mapped(m) => match m.kind {
                MappedKind::Random => "random",
                MappedKind::Frequency => "frequency",
            },
        }
    }

    /// Predicted class from a vocabulary distribution; learnable ties
    /// resolve to the lowest class id.
    pub fn predict(&self, dist: &[f64]) -> Result<usize> {
        match self {
            Verbalizer::Learnable(v) => {
                let scores = verbalize_learnable(v, dist)?;
                let mut best = 0usize;
                for (c, &s) in scores.iter().enumerate() {
                    if s > scores[best] {
                        best = c;
                    }
                }
                Ok(best)
            }
            Verbalizer::Mapped(m) => verbalize_mapped(m, dist),
        }
    }

    /// Normalized class probabilities, used for scored metrics (EER):
    /// softmax over learnable scores, renormalized assigned-unit mass for
    /// mapped verbalizers.
    pub fn class_probabilities(&self, dist: &[f64]) -> Result<Vec<f64>> {
        match self {
            Verbalizer::Learnable(v) => {
                let scores = verbalize_learnable(v, dist)?;
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                Ok(exps.into_iter().map(|e| e / z).collect())
            }
            Verbalizer::Mapped(m) => {
                let needed = m.assignment.iter().max().copied().unwrap_or(0);
                if dist.len() <= needed {
                    return Err(Error::InvalidInput(
                        "class_probabilities: distribution shorter than assignment".into(),
                    ));
                }
                let picked: Vec<f64> = m.assignment.iter().map(|&u| dist[u]).collect();
                let z: f64 = picked.iter().sum();
                if z <= 0.0 {
                    // All assigned mass vanished; fall back to uniform.
                    let c = m.assignment.len();
                    return Ok(vec![1.0 / c as f64; c]);
                }
                Ok(picked.into_iter().map(|p| p / z).collect())
            }
        }
    }
}
