//! Prompt/verbalizer training against a frozen backbone, evaluation with
//! task metrics, and run persistence.
//!
//! The training loss is cross-entropy on the class readout: the learnable
//! verbalizer differentiates through its linear scores; mapped verbalizers
//! train prompts alone through the renormalized probabilities of their
//! assigned units. In both cases the backbone participates only as frozen
//! graph leaves, so its digest is bitwise stable across a whole run.

use crate::checkpoint::Container;
use crate::dataset::{Dataset, Split, UnitSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::lm::{
    next_unit_distribution, stage_readout_distribution, LMConfig, SpokenLM, StagedLM,
};
use crate::metrics::{accuracy, confusion_matrix, eer, macro_f1};
use crate::optim::{adam_step, AdamState};
use crate::prompting::{init_prompts, PromptSet, StagedPromptSet};
use crate::tensor::{substream_seed, Tensor};
use crate::verbalizer::{
    fit_frequency_map, init_random_map, LearnableVerbalizer, MappedVerbalizer, Verbalizer,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerbalizerKind {
    Learnable,
    Random,
    Frequency,
}

impl std::str::FromStr for VerbalizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(VerbalizerKind::Learnable),
            "random" => Ok(VerbalizerKind::Random),
            "frequency" => Ok(VerbalizerKind::Frequency),
            other => Err(Error::InvalidConfig(format!(
                "unknown verbalizer kind {other:?} (expected learnable, random, or frequency)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub verbalizer: VerbalizerKind,
    pub prompt_len: usize,
}

impl Default for TuneConfig {
    /// One shared configuration for every task; no per-task search.
    fn default() -> Self {
        TuneConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            patience: 5,
            verbalizer: VerbalizerKind::Learnable,
            prompt_len: 5,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "tune: epochs, batch size, and patience must be positive".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tune: learning rate {} must be finite and ≥ 0",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_metric: f64,
}

impl TuneLog {
    /// One NDJSON record per epoch.
    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("plain fields serialize"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Builds the verbalizer a run starts from. Frequency mapping needs the
/// prompted model's readouts on the train split — with the freshly
/// initialized prompts, before any tuning.
pub fn prepare_verbalizer(
    lm: &SpokenLM,
    prompts: &PromptSet,
    data: &Dataset,
    kind: VerbalizerKind,
    seed: u64,
) -> Result<Verbalizer> {
    let classes = data.num_classes()?;
    match kind {
        VerbalizerKind::Learnable => Ok(Verbalizer::Learnable(LearnableVerbalizer::init(
            classes,
            lm.config.vocab,
            seed,
        )?)),
        VerbalizerKind::Random => Ok(Verbalizer::Mapped(init_random_map(
            lm.config.vocab,
            classes,
            seed,
        )?)),
        VerbalizerKind::Frequency => {
            let train = data.split(Split::Train);
            let mut dists = Vec::with_capacity(train.len());
            let mut labels = Vec::with_capacity(train.len());
            for seq in train {
                dists.push(next_unit_distribution(lm, seq, Some(prompts))?);
                labels.push(seq.label);
            }
            Ok(Verbalizer::Mapped(fit_frequency_map(&dists, &labels, classes)?))
        }
    }
}

/// Stages one example's classification loss on a shared graph.
fn stage_example_loss(
    g: &mut Graph,
    staged_lm: &StagedLM,
    staged_prompts: &StagedPromptSet,
    verbalizer_nodes: &StagedVerbalizer,
    seq: &UnitSequence,
) -> Result<NodeId> {
    let content = staged_lm.stage_sequence(g, seq)?;
    let out = staged_lm.stage_forward(g, content, Some(staged_prompts))?;
    let dist = stage_readout_distribution(g, &out)?;
    match verbalizer_nodes {
        StagedVerbalizer::Learnable { v, weights, bias } => {
            let scores = v.stage_scores(g, *weights, *bias, dist)?;
            g.cross_entropy(scores, &[seq.label])
        }
        StagedVerbalizer::Mapped(m) => {
            // Renormalized cross-entropy over the assigned units:
            // −ln(p_assigned[y] / Σ_c p_assigned[c]).
            let picked = g.select_cols(dist, &m.assignment)?;
            let denom = g.sum_all(picked);
            let ln_denom = g.ln(denom)?;
            let target = g.select_cols(dist, &[m.assignment[seq.label]])?;
            let num = g.sum_all(target);
            let ln_num = g.ln(num)?;
            g.sub(ln_denom, ln_num)
        }
    }
}

enum StagedVerbalizer {
    Learnable {
        v: LearnableVerbalizer,
        weights: NodeId,
        bias: NodeId,
    },
    Mapped(MappedVerbalizer),
}

fn stage_verbalizer(g: &mut Graph, v: &Verbalizer) -> StagedVerbalizer {
    match v {
        Verbalizer::Learnable(lv) => StagedVerbalizer::Learnable {
            v: lv.clone(),
            weights: g.leaf(&lv.weights),
            bias: g.leaf(&lv.bias),
        },
        Verbalizer::Mapped(m) => StagedVerbalizer::Mapped(m.clone()),
    }
}

fn trainable_leaf_ids(prompts: &StagedPromptSet, v: &StagedVerbalizer) -> Vec<NodeId> {
    let mut ids = prompts.leaf_ids();
    if let StagedVerbalizer::Learnable { weights, bias, .. } = v {
        ids.push(*weights);
        ids.push(*bias);
    }
    ids
}

fn trainable_tensors<'a>(prompts: &'a mut PromptSet, v: &'a mut Verbalizer) -> Vec<&'a mut Tensor> {
    let mut params = prompts.tensors_mut();
    if let Verbalizer::Learnable(lv) = v {
        params.extend(lv.tensors_mut());
    }
    params
}

fn snapshot(prompts: &PromptSet, v: &Verbalizer) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = prompts
        .named_tensors()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    if let Verbalizer::Learnable(lv) = v {
        out.extend(lv.named_tensors().iter().map(|(_, t)| t.data().to_vec()));
    }
    out
}

fn restore(prompts: &mut PromptSet, v: &mut Verbalizer, saved: &[Vec<f64>]) {
    let mut params = trainable_tensors(prompts, v);
    debug_assert_eq!(params.len(), saved.len());
    for (param, data) in params.iter_mut().zip(saved) {
        param.data_mut().copy_from_slice(data);
    }
}

fn check_task_shapes(lm: &SpokenLM, prompts: &PromptSet, v: &Verbalizer, classes: usize) -> Result<()> {
    prompts.check_compatible(&lm.config)?;
    match v {
        Verbalizer::Learnable(lv) => {
            if lv.vocab != lm.config.vocab {
                return Err(Error::InvalidConfig(format!(
                    "verbalizer reads {} vocabulary entries, model emits {}",
                    lv.vocab, lm.config.vocab
                )));
            }
            if lv.classes != classes {
                return Err(Error::InvalidConfig(format!(
                    "verbalizer has {} classes, task has {classes}",
                    lv.classes
                )));
            }
        }
        Verbalizer::Mapped(m) => {
            m.validate(lm.config.vocab)?;
            if m.classes() != classes {
                return Err(Error::InvalidConfig(format!(
                    "verbalizer has {} classes, task has {classes}",
                    m.classes()
                )));
            }
        }
    }
    Ok(())
}

/// Trains prompts (and a learnable verbalizer) on the train split with
/// early stopping on validation accuracy. The parameters left in `prompts`
/// and `verbalizer` afterwards are the best-validation ones.
pub fn tune(
    lm: &SpokenLM,
    prompts: &mut PromptSet,
    verbalizer: &mut Verbalizer,
    data: &Dataset,
    cfg: &TuneConfig,
) -> Result<TuneLog> {
    if !lm.frozen() {
        return Err(Error::NotFrozen("tune: backbone must be frozen first".into()));
    }
    cfg.validate()?;
    let classes = data.num_classes()?;
    check_task_shapes(lm, prompts, verbalizer, classes)?;
    let train: Vec<&UnitSequence> = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidInput("tune: empty training split".into()));
    }

    let mut adam = AdamState::new(cfg.lr, 0.9, 0.999, 1e-8)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TuneLog {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_valid_metric: f64::NEG_INFINITY,
    };
    let mut best_params = snapshot(prompts, verbalizer);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let staged_lm = lm.stage(&mut g);
            let staged_prompts = prompts.stage(&mut g);
            let staged_verb = stage_verbalizer(&mut g, verbalizer);

            let mut total: Option<NodeId> = None;
            for &i in chunk {
                let loss = stage_example_loss(&mut g, &staged_lm, &staged_prompts, &staged_verb, train[i])?;
                total = Some(match total {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            let mean = g.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f64);
            g.backward(mean)?;
            epoch_loss += g.value(mean);
            batches += 1;

            let leaf_ids = trainable_leaf_ids(&staged_prompts, &staged_verb);
            let mut params = trainable_tensors(prompts, verbalizer);
            debug_assert_eq!(params.len(), leaf_ids.len());
            for (param, id) in params.iter_mut().zip(&leaf_ids) {
                param.zero_grad();
                if let Some(grad) = g.grad(*id) {
                    param.accumulate_grad(grad)?;
                }
            }
            adam_step(&mut adam, &mut params)?;
        }

        let valid_metric = validation_accuracy(lm, prompts, verbalizer, data)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            valid_metric,
        });
        if valid_metric > log.best_valid_metric {
            log.best_valid_metric = valid_metric;
            log.best_epoch = epoch;
            best_params = snapshot(prompts, verbalizer);
        } else if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }

    restore(prompts, verbalizer, &best_params);
    // Land the winners on the f32 grid so checkpointing them is lossless
    // and a reloaded run predicts bit-for-bit; report the validation
    // metric the rounded parameters actually achieve.
    for t in trainable_tensors(prompts, verbalizer) {
        t.round_to_f32();
    }
    log.best_valid_metric = validation_accuracy(lm, prompts, verbalizer, data)?;
    Ok(log)
}

fn validation_accuracy(
    lm: &SpokenLM,
    prompts: &PromptSet,
    verbalizer: &Verbalizer,
    data: &Dataset,
) -> Result<f64> {
    let valid = data.split(Split::Valid);
    if valid.is_empty() {
        return Err(Error::InvalidInput("tune: empty validation split".into()));
    }
    let mut preds = Vec::with_capacity(valid.len());
    let mut labels = Vec::with_capacity(valid.len());
    for seq in valid {
        preds.push(predict(lm, prompts, verbalizer, seq)?);
        labels.push(seq.label);
    }
    accuracy(&preds, &labels)
}

/// Class prediction for one sequence: prompted forward → readout
/// distribution → verbalizer.
pub fn predict(
    lm: &SpokenLM,
    prompts: &PromptSet,
    verbalizer: &Verbalizer,
    seq: &UnitSequence,
) -> Result<usize> {
    let dist = next_unit_distribution(lm, seq, Some(prompts))?;
    verbalizer.predict(&dist)
}

pub fn predict_batch(
    lm: &SpokenLM,
    prompts: &PromptSet,
    verbalizer: &Verbalizer,
    seqs: &[&UnitSequence],
) -> Result<Vec<usize>> {
    seqs.iter().map(|s| predict(lm, prompts, verbalizer, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMetric {
    Accuracy,
    MacroF1,
    Eer,
}

impl EvalMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMetric::Accuracy => "acc",
            EvalMetric::MacroF1 => "f1",
            EvalMetric::Eer => "eer",
        }
    }
}

impl std::str::FromStr for EvalMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(EvalMetric::Accuracy),
            "f1" => Ok(EvalMetric::MacroF1),
            "eer" => Ok(EvalMetric::Eer),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric {other:?} (expected acc, f1, or eer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    /// Row = true label, column = prediction.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EvalReport {
    /// The documented metrics-file payload.
    pub fn to_json(&self, task: &str) -> serde_json::Value {
        serde_json::json!({
            "task": task,
            "metric": self.metric,
            "value": self.value,
            "n": self.n,
            "confusion": self.confusion,
        })
    }

    pub fn write_json(&self, task: &str, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_json(task)).expect("plain JSON");
        text.push('\n');
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Runs the tuned artifacts over one split and scores the requested
/// metric. EER additionally needs a binary task; it scores class 1's
/// normalized probability.
pub fn evaluate_split(
    lm: &SpokenLM,
    prompts: &PromptSet,
    verbalizer: &Verbalizer,
    data: &Dataset,
    split: Split,
    metric: EvalMetric,
) -> Result<EvalReport> {
    let examples = data.split(split);
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("evaluate: split {split} is empty")));
    }
    let classes = verbalizer.classes();
    if metric == EvalMetric::Eer && classes != 2 {
        return Err(Error::InvalidInput(format!(
            "eer needs a binary task, got {classes} classes"
        )));
    }

    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut positive_scores = Vec::with_capacity(examples.len());
    for seq in &examples {
        let dist = next_unit_distribution(lm, seq, Some(prompts))?;
        preds.push(verbalizer.predict(&dist)?);
        labels.push(seq.label);
        if metric == EvalMetric::Eer {
            positive_scores.push(verbalizer.class_probabilities(&dist)?[1]);
        }
    }

    let value = match metric {
        EvalMetric::Accuracy => accuracy(&preds, &labels)?,
        EvalMetric::MacroF1 => macro_f1(&preds, &labels, classes)?,
        EvalMetric::Eer => eer(&positive_scores, &labels)?,
    };
    Ok(EvalReport {
        metric: metric.as_str().to_string(),
        value,
        n: examples.len(),
        confusion: confusion_matrix(&preds, &labels, classes)?,
        predictions: preds,
        labels,
    })
}

/// Everything a finished run needs to be re-evaluated later.
#[derive(Debug, Clone)]
pub struct TunedRun {
    pub task: String,
    pub backbone_digest: String,
    pub lm_config: LMConfig,
    pub tune_config: TuneConfig,
    pub classes: usize,
    pub prompts: PromptSet,
    pub verbalizer: Verbalizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    task: String,
    backbone_digest: String,
    lm_config: LMConfig,
    tune_config: TuneConfig,
    classes: usize,
    verbalizer_kind: VerbalizerKind,
    /// Present only for mapped verbalizers.
    assignment: Option<Vec<usize>>,
}

pub fn save_run(run: &TunedRun, path: &Path) -> Result<()> {
    let (kind, assignment) = match &run.verbalizer {
        Verbalizer::Learnable(_) => (VerbalizerKind::Learnable, None),
        Verbalizer::Mapped(m) => (
            match m.kind {
                crate::verbalizer::MappedKind::Random => VerbalizerKind::Random,
                crate::verbalizer::MappedKind::Frequency => VerbalizerKind::Frequency,
            },
            Some(m.assignment.clone()),
        ),
    };
    let manifest = RunManifest {
        task: run.task.clone(),
        backbone_digest: run.backbone_digest.clone(),
        lm_config: run.lm_config.clone(),
        tune_config: run.tune_config.clone(),
        classes: run.classes,
        verbalizer_kind: kind,
        assignment,
    };
    let mut named = run.prompts.named_tensors();
    if let Verbalizer::Learnable(lv) = &run.verbalizer {
        named.extend(lv.named_tensors());
    }
    Container::build(manifest, named.iter().map(|(n, t)| (n.as_str(), *t))).save(path)
}

/// Loads a run and binds it to the given backbone; a digest mismatch is a
/// refusal, not a warning.
pub fn load_run(path: &Path, lm: &SpokenLM) -> Result<TunedRun> {
    let container: Container<RunManifest> = Container::load(path)?;
    let manifest = container.config.clone();

    let lm_digest = lm
        .frozen_digest()
        .ok_or_else(|| Error::NotFrozen("load_run: backbone must be frozen".into()))?;
    if manifest.backbone_digest != lm_digest {
        return Err(Error::DigestMismatch {
            expected: manifest.backbone_digest.clone(),
            actual: lm_digest.to_string(),
        });
    }
    if manifest.lm_config != lm.config {
        return Err(Error::InvalidConfig(
            "load_run: stored backbone config differs from the loaded model".into(),
        ));
    }

    let tensor = |name: &str| container.tensor_by_name(name);
    let input = tensor("prompt.input")?.with_requires_grad(true);
    let mut keys = Vec::with_capacity(manifest.lm_config.layers);
    let mut values = Vec::with_capacity(manifest.lm_config.layers);
    for j in 0..manifest.lm_config.layers {
        keys.push(tensor(&format!("prompt.key.{j}"))?.with_requires_grad(true));
        values.push(tensor(&format!("prompt.value.{j}"))?.with_requires_grad(true));
    }
    let prompts = PromptSet::from_parts(input, keys, values)?;

    let verbalizer = match manifest.verbalizer_kind {
        VerbalizerKind::Learnable => {
            let weights = tensor("verbalizer.weights")?.with_requires_grad(true);
            let bias = tensor("verbalizer.bias")?.with_requires_grad(true);
            if weights.shape() != [manifest.classes, manifest.lm_config.vocab] {
                return Err(Error::Corrupt(format!(
                    "{}: verbalizer weights have shape {:?}",
                    path.display(),
                    weights.shape()
                )));
            }
            Verbalizer::Learnable(LearnableVerbalizer {
                classes: manifest.classes,
                vocab: manifest.lm_config.vocab,
                weights,
                bias,
            })
        }
        kind => {
            let assignment = manifest.assignment.clone().ok_or_else(|| {
                Error::Corrupt(format!("{}: mapped run without assignment", path.display()))
            })?;
            let mapped = MappedVerbalizer {
                kind: match kind {
                    VerbalizerKind::Random => crate::verbalizer::MappedKind::Random,
                    VerbalizerKind::Frequency => crate::verbalizer::MappedKind::Frequency,
                    VerbalizerKind::Learnable => unreachable!("matched above"),
                },
                assignment,
            };
            mapped.validate(manifest.lm_config.vocab)?;
            if mapped.classes() != manifest.classes {
                return Err(Error::Corrupt(format!(
                    "{}: assignment covers {} classes, manifest says {}",
                    path.display(),
                    mapped.classes(),
                    manifest.classes
                )));
            }
            Verbalizer::Mapped(mapped)
        }
    };

    Ok(TunedRun {
        task: manifest.task,
        backbone_digest: manifest.backbone_digest,
        lm_config: manifest.lm_config,
        tune_config: manifest.tune_config,
        classes: manifest.classes,
        prompts,
        verbalizer,
    })
}

/// Convenience composition used by the CLI and tests: initialize prompts
/// and verbalizer for a task, tune, and package the result.
pub fn fit_and_tune(
    lm: &SpokenLM,
    data: &Dataset,
    task: &str,
    cfg: &TuneConfig,
) -> Result<(TunedRun, TuneLog)> {
    let digest = lm
        .frozen_digest()
        .ok_or_else(|| Error::NotFrozen("tune: backbone must be frozen first".into()))?
        .to_string();
    let mut prompts = init_prompts(cfg.prompt_len, &lm.config, substream_seed(cfg.seed, 101));
    let mut verbalizer =
        prepare_verbalizer(lm, &prompts, data, cfg.verbalizer, substream_seed(cfg.seed, 102))?;
    let log = tune(lm, &mut prompts, &mut verbalizer, data, cfg)?;
    Ok((
        TunedRun {
            task: task.to_string(),
            backbone_digest: digest,
            lm_config: lm.config.clone(),
            tune_config: cfg.clone(),
            classes: data.num_classes()?,
            prompts,
            verbalizer,
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, TaskSpec};
    use crate::lm::{build_lm, pretrain, PretrainConfig, Variant};
    use std::sync::OnceLock;

    /// Shared fixture: a small frozen gslm backbone over the 2-class cycle
    /// task, plus its dataset. Pretrained once for the whole module.
    fn cycle_fixture() -> &'static (SpokenLM, Dataset) {
        static FIXTURE: OnceLock<(SpokenLM, Dataset)> = OnceLock::new();
        FIXTURE.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let spec = TaskSpec::builtin("cycle10", 71).unwrap();
            let data = build_dataset(&spec, 20, [0.6, 0.2, 0.2], &dir.path().join("c.ndjson")).unwrap();
            let mut cfg = LMConfig::desk_scale(Variant::Gslm, 10);
            cfg.dim = 32;
            cfg.layers = 2;
            cfg.heads = 4;
            cfg.ff_dim = 64;
            cfg.max_len = 32;
            let mut lm = build_lm(cfg, 73).unwrap();
            pretrain(
                &mut lm,
                &data.dataset,
                &PretrainConfig {
                    epochs: 12,
                    batch_size: 8,
                    lr: 3e-3,
                    seed: 75,
                },
            )
            .unwrap();
            (lm, data.dataset)
        })
    }

    fn quick_cfg(kind: VerbalizerKind, seed: u64) -> TuneConfig {
        TuneConfig {
            epochs: 8,
            batch_size: 8,
            lr: 3e-3,
            seed,
            patience: 8,
            verbalizer: kind,
            prompt_len: 3,
        }
    }

    #[test]
    fn defaults_are_the_shared_task_config() {
        let cfg = TuneConfig::default();
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.patience, 5);
        assert_eq!(cfg.prompt_len, 5);
    }

    #[test]
    fn tune_rejects_unfrozen_backbone() {
        let (_, data) = cycle_fixture();
        let mut cfg = LMConfig::desk_scale(Variant::Gslm, 10);
        cfg.dim = 32;
        cfg.ff_dim = 64;
        cfg.heads = 4;
        let unfrozen = build_lm(cfg, 1).unwrap();
        let mut prompts = init_prompts(2, &unfrozen.config, 2);
        let mut v = prepare_verbalizer(&unfrozen, &prompts, data, VerbalizerKind::Random, 3).unwrap();
        let err = tune(&unfrozen, &mut prompts, &mut v, data, &quick_cfg(VerbalizerKind::Random, 4))
            .unwrap_err();
        assert!(matches!(err, Error::NotFrozen(_)), "{err}");
    }

    #[test]
    fn backbone_digest_survives_tune_and_eval() {
        let (lm, data) = cycle_fixture();
        let digest_before = lm.param_digest();
        let (run, _) = fit_and_tune(lm, data, "cycle10", &quick_cfg(VerbalizerKind::Learnable, 5)).unwrap();
        let _ = evaluate_split(lm, &run.prompts, &run.verbalizer, data, Split::Test, EvalMetric::Accuracy)
            .unwrap();
        assert_eq!(lm.param_digest(), digest_before);
        assert_eq!(run.backbone_digest, digest_before);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (lm, data) = cycle_fixture();
        let mut cfg = quick_cfg(VerbalizerKind::Learnable, 6);
        cfg.lr = 0.0;
        cfg.epochs = 3;
        let mut prompts = init_prompts(cfg.prompt_len, &lm.config, 7);
        let mut v = prepare_verbalizer(lm, &prompts, data, VerbalizerKind::Learnable, 8).unwrap();
        let before = snapshot(&prompts, &v);
        let log = tune(lm, &mut prompts, &mut v, data, &cfg).unwrap();
        assert_eq!(snapshot(&prompts, &v), before);
        let first = log.epochs[0].train_loss;
        for r in &log.epochs {
            assert!((r.train_loss - first).abs() < 1e-12, "loss trace must be constant");
        }
    }

    #[test]
    fn tuning_learns_the_cycle_parity_task() {
        // Class = parity of the cycle's starting unit; readily separable
        // from the final-position readout of a memorized bigram model.
        let (lm, data) = cycle_fixture();
        let mut cfg = quick_cfg(VerbalizerKind::Learnable, 9);
        cfg.epochs = 20;
        cfg.patience = 20;
        let (run, log) = fit_and_tune(lm, data, "cycle10", &cfg).unwrap();
        let report =
            evaluate_split(lm, &run.prompts, &run.verbalizer, data, Split::Test, EvalMetric::Accuracy)
                .unwrap();
        assert!(
            report.value >= 0.9,
            "test accuracy {} (valid best {})",
            report.value,
            log.best_valid_metric
        );
        assert!(log.best_valid_metric >= 0.9);
    }

    #[test]
    fn early_stopping_restores_best_parameters() {
        let (lm, data) = cycle_fixture();
        let mut cfg = quick_cfg(VerbalizerKind::Learnable, 10);
        cfg.epochs = 6;
        cfg.patience = 2;
        let mut prompts = init_prompts(cfg.prompt_len, &lm.config, 11);
        let mut v = prepare_verbalizer(lm, &prompts, data, VerbalizerKind::Learnable, 12).unwrap();
        let log = tune(lm, &mut prompts, &mut v, data, &cfg).unwrap();

        // The returned parameters must reproduce the best validation
        // accuracy exactly.
        let recomputed = validation_accuracy(lm, &prompts, &v, data).unwrap();
        assert_eq!(recomputed, log.best_valid_metric);
        assert!(log.epochs.len() <= cfg.epochs);
    }

    #[test]
    fn mapped_verbalizers_train_prompts_only() {
        let (lm, data) = cycle_fixture();
        let cfg = quick_cfg(VerbalizerKind::Frequency, 13);
        let mut prompts = init_prompts(cfg.prompt_len, &lm.config, 14);
        let mut v = prepare_verbalizer(lm, &prompts, data, VerbalizerKind::Frequency, 15).unwrap();
        let assignment_before = match &v {
            Verbalizer::Mapped(m) => m.assignment.clone(),
            _ => panic!("frequency verbalizer is mapped"),
        };
        let deep_before: Vec<Vec<f64>> = prompts.keys.iter().map(|t| t.data().to_vec()).collect();
        tune(lm, &mut prompts, &mut v, data, &cfg).unwrap();
        match &v {
            Verbalizer::Mapped(m) => assert_eq!(m.assignment, assignment_before),
            _ => panic!("kind changed during tuning"),
        }
        let deep_after: Vec<Vec<f64>> = prompts.keys.iter().map(|t| t.data().to_vec()).collect();
        assert_ne!(deep_before, deep_after, "prompts must move under a mapped verbalizer");
    }

    #[test]
    fn predict_batch_matches_per_example_predictions() {
        let (lm, data) = cycle_fixture();
        let (run, _) = fit_and_tune(lm, data, "cycle10", &quick_cfg(VerbalizerKind::Random, 16)).unwrap();
        let test = data.split(Split::Test);
        let batch = predict_batch(lm, &run.prompts, &run.verbalizer, &test).unwrap();
        for (seq, &b) in test.iter().zip(&batch) {
            assert_eq!(predict(lm, &run.prompts, &run.verbalizer, seq).unwrap(), b);
        }
    }

    #[test]
    fn identity_capable_verbalizer_reduces_to_argmax_unit() {
        // With C = V and identity weights, the predicted class is the
        // argmax unit of the readout distribution.
        let (lm, data) = cycle_fixture();
        let mut v = LearnableVerbalizer::init(10, 10, 17).unwrap();
        for x in v.weights.data_mut() {
            *x = 0.0;
        }
        for c in 0..10 {
            v.weights.data_mut()[c * 10 + c] = 1.0;
        }
        for b in v.bias.data_mut() {
            *b = 0.0;
        }
        let verb = Verbalizer::Learnable(v);
        let prompts = init_prompts(0, &lm.config, 18);
        for seq in data.split(Split::Test).into_iter().take(5) {
            let dist = next_unit_distribution(lm, seq, Some(&prompts)).unwrap();
            let argmax = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(predict(lm, &prompts, &verb, seq).unwrap(), argmax);
        }
    }

    #[test]
    fn tune_is_deterministic() {
        let (lm, data) = cycle_fixture();
        let cfg = quick_cfg(VerbalizerKind::Learnable, 19);
        let run_once = || {
            let mut prompts = init_prompts(cfg.prompt_len, &lm.config, 20);
            let mut v = prepare_verbalizer(lm, &prompts, data, cfg.verbalizer, 21).unwrap();
            let log = tune(lm, &mut prompts, &mut v, data, &cfg).unwrap();
            (snapshot(&prompts, &v), log.epochs.iter().map(|r| r.train_loss).collect::<Vec<_>>())
        };
        let (params_a, losses_a) = run_once();
        let (params_b, losses_b) = run_once();
        assert_eq!(params_a, params_b);
        assert_eq!(losses_a, losses_b);
    }

    #[test]
    fn eval_report_confusion_sums_to_n_and_writes_schema() {
        let (lm, data) = cycle_fixture();
        let (run, _) = fit_and_tune(lm, data, "cycle10", &quick_cfg(VerbalizerKind::Learnable, 22)).unwrap();
        let report =
            evaluate_split(lm, &run.prompts, &run.verbalizer, data, Split::Test, EvalMetric::MacroF1)
                .unwrap();
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, report.n);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        report.write_json("cycle10", &path).unwrap();
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["task", "metric", "value", "n", "confusion"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        assert_eq!(value["metric"], "f1");
    }

    #[test]
    fn eer_eval_requires_binary_tasks_and_scores_cycle_task() {
        let (lm, data) = cycle_fixture();
        let (run, _) = fit_and_tune(lm, data, "cycle10", &quick_cfg(VerbalizerKind::Learnable, 23)).unwrap();
        // cycle10 is binary, so EER must compute.
        let report =
            evaluate_split(lm, &run.prompts, &run.verbalizer, data, Split::Test, EvalMetric::Eer).unwrap();
        assert!(report.value >= 0.0 && report.value <= 1.0);

        // A fake 3-class verbalizer on the same distribution must refuse.
        let three = Verbalizer::Mapped(init_random_map(10, 3, 24).unwrap());
        let err = evaluate_split(lm, &run.prompts, &three, data, Split::Test, EvalMetric::Eer).unwrap_err();
        assert!(err.to_string().contains("binary"), "{err}");
    }

    #[test]
    fn run_round_trip_preserves_predictions_bit_for_bit() {
        let (lm, data) = cycle_fixture();
        let (run, log) = fit_and_tune(lm, data, "cycle10", &quick_cfg(VerbalizerKind::Learnable, 25)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        save_run(&run, &path).unwrap();
        let loaded = load_run(&path, lm).unwrap();

        assert_eq!(loaded.task, "cycle10");
        assert_eq!(loaded.tune_config, run.tune_config);
        let probe = data.split(Split::Test);
        for seq in probe.iter().take(8) {
            let a = next_unit_distribution(lm, seq, Some(&run.prompts)).unwrap();
            let b = next_unit_distribution(lm, seq, Some(&loaded.prompts)).unwrap();
            assert_eq!(a, b, "prompted readouts must round-trip exactly");
            assert_eq!(
                predict(lm, &run.prompts, &run.verbalizer, seq).unwrap(),
                predict(lm, &loaded.prompts, &loaded.verbalizer, seq).unwrap()
            );
        }
        assert!(log.best_valid_metric.is_finite());
    }

    #[test]
    fn load_run_refuses_mismatched_backbone() {
        let (lm, data) = cycle_fixture();
        let (run, _) = fit_and_tune(lm, data, "cycle10", &quick_cfg(VerbalizerKind::Random, 26)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        save_run(&run, &path).unwrap();

        // A different backbone (other seed) must be rejected by digest.
        let mut cfg = lm.config.clone();
        cfg.max_len = lm.config.max_len;
        let mut other = build_lm(cfg, 999).unwrap();
        other.freeze();
        let err = load_run(&path, &other).unwrap_err();
        assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");
    }

    #[test]
    fn mapped_run_round_trips_assignment() {
        let (lm, data) = cycle_fixture();
        let (run, _) = fit_and_tune(lm, data, "cycle10", &quick_cfg(VerbalizerKind::Frequency, 27)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        save_run(&run, &path).unwrap();
        let loaded = load_run(&path, lm).unwrap();
        match (&run.verbalizer, &loaded.verbalizer) {
            (Verbalizer::Mapped(a), Verbalizer::Mapped(b)) => assert_eq!(a, b),
            _ => panic!("expected mapped verbalizers"),
        }
    }

    #[test]
    fn training_log_writes_epoch_records() {
        let (lm, data) = cycle_fixture();
        let mut cfg = quick_cfg(VerbalizerKind::Learnable, 28);
        cfg.epochs = 3;
        let (_, log) = fit_and_tune(lm, data, "cycle10", &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.ndjson");
        log.write_ndjson(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), log.epochs.len());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "train_loss", "valid_metric"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }
}
