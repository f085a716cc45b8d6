//! Synthetic speech-like corpora with controllable information channels.
//!
//! Each example is a stream of real-valued feature frames (a stand-in for
//! SSL features) plus a log-F0 track with per-frame voicing. Content tasks
//! put the class signal in the feature channel via per-class Markov chains
//! over latent emitting states; prosody tasks share one chain across classes
//! and differ only in pitch-contour family; mixed tasks carry both. The
//! complementary channel is always drawn from a shared, class-independent
//! distribution, so each task family is discriminable through exactly the
//! channels it claims.
//!
//! The full pipeline is: generate frames → fit a k-means codebook → quantize
//! to frame-level units → run-length dedup into unit/duration/pitch-bin
//! streams → stratified split assignment → NDJSON on disk.

use crate::dataset::{Dataset, Split, UnitSequence};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_fit, Codebook};
use crate::tensor::substream_seed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::Path;

/// Voiced log-F0 values live in roughly this band (100–300 Hz).
pub const LOG_F0_LO: f64 = 4.605_170_185_988_092; // ln 100
pub const LOG_F0_HI: f64 = 5.703_782_474_656_201; // ln 300

/// Value stored in the pitch track for unvoiced frames. Only the voiced
/// flag is authoritative; this sentinel just keeps the array dense.
pub const UNVOICED_SENTINEL: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Content,
    Prosody,
    Mixed,
}

/// One log-F0 contour family: linear start→end trend plus an optional
/// sinusoidal wobble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contour {
    pub start: f64,
    pub end: f64,
    pub wobble_amp: f64,
    pub wobble_period: f64,
}

impl Contour {
    pub fn rising() -> Self {
        Contour { start: (120.0f64).ln(), end: (250.0f64).ln(), wobble_amp: 0.0, wobble_period: 1.0 }
    }

    pub fn falling() -> Self {
        Contour { start: (250.0f64).ln(), end: (120.0f64).ln(), wobble_amp: 0.0, wobble_period: 1.0 }
    }

    pub fn flat() -> Self {
        Contour { start: (170.0f64).ln(), end: (170.0f64).ln(), wobble_amp: 0.0, wobble_period: 1.0 }
    }

    pub fn oscillating() -> Self {
        // Amplitude comparable to the rising/falling span and several
        // cycles per utterance, so the wiggle is visible at most
        // positions rather than only in long-run statistics.
        Contour { start: (170.0f64).ln(), end: (170.0f64).ln(), wobble_amp: 0.5, wobble_period: 12.0 }
    }

    fn eval(&self, t: usize, total: usize) -> f64 {
        let frac = if total > 1 { t as f64 / (total - 1) as f64 } else { 0.0 };
        self.start
            + (self.end - self.start) * frac
            + self.wobble_amp * (2.0 * std::f64::consts::PI * t as f64 / self.wobble_period).sin()
    }
}

/// How the pitch track is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum PitchModel {
    /// Class-independent random walk (used when pitch must carry no class
    /// signal).
    SharedWalk { step_std: f64 },
    /// One contour family per class.
    Contours(Vec<Contour>),
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    /// Codebook size the quantizer will be fitted with.
    pub vocab: usize,
    pub channel: Channel,
    /// Frame-count range, inclusive on both ends.
    pub len_range: (usize, usize),
    pub feature_dim: usize,
    pub frame_period: f64,
    pub num_states: usize,
    /// Per-class S×S row-stochastic transition matrices over latent states.
    /// Prosody tasks clone one shared matrix across classes.
    pub transitions: Vec<Vec<f64>>,
    /// Per-class initial state distributions, length S each.
    pub start_probs: Vec<Vec<f64>>,
    /// S×D emission means, shared across classes.
    pub emission_means: Vec<f64>,
    pub emission_std: f64,
    pub pitch_model: PitchModel,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, s, d) = (self.num_classes, self.num_states, self.feature_dim);
        if c < 2 {
            return Err(Error::InvalidConfig(format!(
                "task {:?}: need at least 2 classes, got {c}",
                self.name
            )));
        }
        if self.vocab < c {
            return Err(Error::InvalidConfig(format!(
                "task {:?}: vocab {} smaller than class count {c}",
                self.name, self.vocab
            )));
        }
        if s == 0 || d == 0 || self.emission_std <= 0.0 || self.frame_period <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "task {:?}: degenerate generator dimensions",
                self.name
            )));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::InvalidConfig(format!(
                "task {:?}: bad length range {:?}",
                self.name, self.len_range
            )));
        }
        if self.emission_means.len() != s * d {
            return Err(Error::InvalidConfig(format!(
                "task {:?}: emission means have {} values, expected {}",
                self.name,
                self.emission_means.len(),
                s * d
            )));
        }
        if self.transitions.len() != c || self.start_probs.len() != c {
            return Err(Error::InvalidConfig(format!(
                "task {:?}: per-class generator parameters missing",
                self.name
            )));
        }
        for (which, rows, width) in [("transition", &self.transitions, s), ("start", &self.start_probs, 1)] {
            for (class, m) in rows.iter().enumerate() {
                if m.len() != s * width {
                    return Err(Error::InvalidConfig(format!(
                        "task {:?}: class {class} {which} matrix has wrong size",
                        self.name
                    )));
                }
                for r in 0..width {
                    let row = &m[r * s..(r + 1) * s];
                    let total: f64 = row.iter().sum();
                    if row.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidConfig(format!(
                            "task {:?}: class {class} {which} row {r} is not a distribution",
                            self.name
                        )));
                    }
                }
            }
        }
        if let PitchModel::Contours(cs) = &self.pitch_model {
            if cs.len() != c {
                return Err(Error::InvalidConfig(format!(
                    "task {:?}: {} contours for {c} classes",
                    self.name,
                    cs.len()
                )));
            }
        }
        Ok(())
    }

    /// Built-in task registry. `cycle10` is a deterministic-successor corpus
    /// used to sanity-check language-model training; the others pair a
    /// channel with a class count.
    pub fn builtin(name: &str, seed: u64) -> Result<TaskSpec> {
        match name {
            "cycle10" => Ok(Self::cycle10(seed)),
            "content2" => Ok(Self::content(name, 2, seed)),
            "content4" => Ok(Self::content(name, 4, seed)),
            "prosody2" => Ok(Self::prosody(name, 2, seed)),
            "prosody4" => Ok(Self::prosody(name, 4, seed)),
            "mixed4" => Ok(Self::mixed4(seed)),
            other => Err(Error::InvalidInput(format!(
                "unknown task {other:?}; known tasks: cycle10, content2, content4, prosody2, prosody4, mixed4"
            ))),
        }
    }

    pub const BUILTIN_NAMES: [&'static str; 6] =
        ["cycle10", "content2", "content4", "prosody2", "prosody4", "mixed4"];

    /// Emission means drawn once per task so every class shares the same
    /// latent-state geometry.
    fn draw_means(states: usize, dim: usize, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, u64::MAX - 7));
        let normal = Normal::new(0.0, scale).unwrap();
        (0..states * dim).map(|_| normal.sample(&mut rng)).collect()
    }

    fn cycle10(seed: u64) -> TaskSpec {
        let s = 10;
        // Deterministic successor chain: state i always moves to i+1 mod S,
        // so the next unit is a function of the current one.
        let mut trans = vec![0.0; s * s];
        for i in 0..s {
            trans[i * s + (i + 1) % s] = 1.0;
        }
        let start = |class: usize| {
            let eligible: Vec<usize> = (0..s).filter(|st| st % 2 == class).collect();
            let mut p = vec![0.0; s];
            for &st in &eligible {
                p[st] = 1.0 / eligible.len() as f64;
            }
            p
        };
        TaskSpec {
            name: "cycle10".into(),
            num_classes: 2,
            vocab: 10,
            channel: Channel::Content,
            len_range: (24, 24),
            feature_dim: 16,
            frame_period: 0.02,
            num_states: s,
            transitions: vec![trans.clone(), trans],
            start_probs: vec![start(0), start(1)],
            emission_means: Self::draw_means(s, 16, 5.0, seed),
            emission_std: 0.15,
            pitch_model: PitchModel::SharedWalk { step_std: 0.05 },
            seed,
        }
    }

    /// Class c prefers latent states with `state % C == c`: transitions are
    /// 0.2 self-loop, then 0.68 into the preferred set and 0.12 anywhere.
    /// The strong preference keeps the class legible in the next-unit
    /// distribution at any single position, not just in long-run counts.
    fn content_transitions(classes: usize, states: usize) -> Vec<Vec<f64>> {
        (0..classes)
            .map(|c| {
                let preferred: Vec<usize> = (0..states).filter(|st| st % classes == c).collect();
                let mut m = vec![0.0; states * states];
                for from in 0..states {
                    let row = &mut m[from * states..(from + 1) * states];
                    for st in 0..states {
                        row[st] += 0.8 * 0.15 / states as f64;
                    }
                    for &st in &preferred {
                        row[st] += 0.8 * 0.85 / preferred.len() as f64;
                    }
                    row[from] += 0.2;
                }
                m
            })
            .collect()
    }

    fn uniform_over(preferred: &[usize], states: usize) -> Vec<f64> {
        let mut p = vec![0.0; states];
        for &st in preferred {
            p[st] = 1.0 / preferred.len() as f64;
        }
        p
    }

    fn content(name: &str, classes: usize, seed: u64) -> TaskSpec {
        let s = 16;
        let start_probs = (0..classes)
            .map(|c| {
                let preferred: Vec<usize> = (0..s).filter(|st| st % classes == c).collect();
                Self::uniform_over(&preferred, s)
            })
            .collect();
        TaskSpec {
            name: name.into(),
            num_classes: classes,
            vocab: 100,
            channel: Channel::Content,
            len_range: (40, 80),
            feature_dim: 16,
            frame_period: 0.02,
            num_states: s,
            transitions: Self::content_transitions(classes, s),
            start_probs,
            emission_means: Self::draw_means(s, 16, 2.0, seed),
            emission_std: 0.3,
            pitch_model: PitchModel::SharedWalk { step_std: 0.05 },
            seed,
        }
    }

    fn prosody(name: &str, classes: usize, seed: u64) -> TaskSpec {
        let s = 16;
        // One chain for every class: 0.45 self-loop, 0.55 uniform jump.
        let mut shared = vec![0.0; s * s];
        for from in 0..s {
            for to in 0..s {
                shared[from * s + to] = 0.55 / s as f64;
            }
            shared[from * s + from] += 0.45;
        }
        let families = [Contour::rising(), Contour::falling(), Contour::flat(), Contour::oscillating()];
        TaskSpec {
            name: name.into(),
            num_classes: classes,
            vocab: 100,
            channel: Channel::Prosody,
            len_range: (40, 80),
            feature_dim: 16,
            frame_period: 0.02,
            num_states: s,
            transitions: vec![shared; classes],
            start_probs: vec![vec![1.0 / s as f64; s]; classes],
            emission_means: Self::draw_means(s, 16, 2.0, seed),
            emission_std: 0.3,
            pitch_model: PitchModel::Contours(families[..classes].to_vec()),
            seed,
        }
    }

    /// Four classes = 2 content patterns × 2 contour families; both
    /// channels are informative.
    fn mixed4(seed: u64) -> TaskSpec {
        let s = 16;
        let content_pair = Self::content_transitions(2, s);
        let transitions: Vec<Vec<f64>> =
            (0..4).map(|c| content_pair[c % 2].clone()).collect();
        let start_probs = (0..4)
            .map(|c| {
                let preferred: Vec<usize> = (0..s).filter(|st| st % 2 == c % 2).collect();
                Self::uniform_over(&preferred, s)
            })
            .collect();
        let contours = vec![
            Contour::rising(),
            Contour::rising(),
            Contour::falling(),
            Contour::falling(),
        ];
        TaskSpec {
            name: "mixed4".into(),
            num_classes: 4,
            vocab: 100,
            channel: Channel::Mixed,
            len_range: (40, 80),
            feature_dim: 16,
            frame_period: 0.02,
            num_states: s,
            transitions,
            start_probs,
            emission_means: Self::draw_means(s, 16, 2.0, seed),
            emission_std: 0.3,
            pitch_model: PitchModel::Contours(contours),
            seed,
        }
    }
}

/// A stream of feature frames with a parallel pitch track.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrames {
    pub dim: usize,
    pub frame_period: f64,
    /// T×dim row-major feature matrix.
    pub frames: Vec<f64>,
    /// Per-frame log-F0; holds [`UNVOICED_SENTINEL`] where `voiced` is false.
    pub pitch: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl FeatureFrames {
    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrames {
    pub frames: FeatureFrames,
    pub label: usize,
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut target: f64 = rng.random_range(0.0..1.0);
    for (i, &p) in probs.iter().enumerate() {
        if target < p {
            return i;
        }
        target -= p;
    }
    probs.len() - 1
}

/// Two-state voicing chain shared by every task: P(voiced|voiced) = 0.95,
/// P(voiced|unvoiced) = 0.6, initial P(voiced) = 0.8.
fn voicing_track(len: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut out = Vec::with_capacity(len);
    let mut voiced = rng.random_range(0.0..1.0) < 0.8;
    for _ in 0..len {
        out.push(voiced);
        let p_voiced = if voiced { 0.95 } else { 0.6 };
        voiced = rng.random_range(0.0..1.0) < p_voiced;
    }
    out
}

fn generate_example(spec: &TaskSpec, class: usize, rng: &mut impl Rng) -> FeatureFrames {
    let (s, d) = (spec.num_states, spec.feature_dim);
    let len = rng.random_range(spec.len_range.0..=spec.len_range.1);
    let noise = Normal::new(0.0, spec.emission_std).unwrap();

    let mut state = sample_index(&spec.start_probs[class], rng);
    let transitions = &spec.transitions[class];
    let mut frames = Vec::with_capacity(len * d);
    for _ in 0..len {
        let mean = &spec.emission_means[state * d..(state + 1) * d];
        for &m in mean {
            frames.push(m + noise.sample(rng));
        }
        state = sample_index(&transitions[state * s..(state + 1) * s], rng);
    }

    let voiced = voicing_track(len, rng);
    let mut pitch = Vec::with_capacity(len);
    match &spec.pitch_model {
        PitchModel::SharedWalk { step_std } => {
            let step = Normal::new(0.0, *step_std).unwrap();
            let mid = 0.5 * (LOG_F0_LO + LOG_F0_HI);
            let mut f0 = mid + Normal::new(0.0, 0.15).unwrap().sample(rng);
            for &v in &voiced {
                f0 = (f0 + step.sample(rng)).clamp(LOG_F0_LO, LOG_F0_HI);
                pitch.push(if v { f0 } else { UNVOICED_SENTINEL });
            }
        }
        PitchModel::Contours(contours) => {
            let contour = contours[class];
            let offset = Normal::new(0.0, 0.03).unwrap().sample(rng);
            let jitter = Normal::new(0.0, 0.03).unwrap();
            for (t, &v) in voiced.iter().enumerate() {
                if v {
                    let f0 = (contour.eval(t, len) + offset + jitter.sample(rng))
                        .clamp(LOG_F0_LO, LOG_F0_HI);
                    pitch.push(f0);
                } else {
                    pitch.push(UNVOICED_SENTINEL);
                }
            }
        }
    }

    FeatureFrames {
        dim: d,
        frame_period: spec.frame_period,
        frames,
        pitch,
        voiced,
    }
}

/// Generates `n_per_class` examples per class. Each example draws its RNG
/// from (seed, global example index), so any subset can be regenerated
/// independently and parallel generation would produce identical bytes.
pub fn generate_corpus(spec: &TaskSpec, n_per_class: usize) -> Result<Vec<LabeledFrames>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::InvalidInput("generate_corpus: n_per_class must be ≥ 1".into()));
    }
    let mut out = Vec::with_capacity(spec.num_classes * n_per_class);
    for class in 0..spec.num_classes {
        for j in 0..n_per_class {
            let index = (class * n_per_class + j) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(spec.seed, index));
            out.push(LabeledFrames {
                frames: generate_example(spec, class, &mut rng),
                label: class,
            });
        }
    }
    Ok(out)
}

/// Equal-width binning of voiced log-F0 values, fitted to the observed
/// corpus range; one extra bin (id = `voiced_bins`) marks unvoiced units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchBinning {
    pub lo: f64,
    pub hi: f64,
    pub voiced_bins: usize,
}

impl PitchBinning {
    pub const DEFAULT_VOICED_BINS: usize = 32;

    pub fn fit(corpus: &[LabeledFrames], voiced_bins: usize) -> Result<Self> {
        if voiced_bins == 0 {
            return Err(Error::InvalidConfig("pitch binning needs at least one voiced bin".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for ex in corpus {
            for (p, v) in ex.frames.pitch.iter().zip(&ex.frames.voiced) {
                if *v {
                    lo = lo.min(*p);
                    hi = hi.max(*p);
                }
            }
        }
        if !lo.is_finite() {
            return Err(Error::InvalidInput("pitch binning: corpus has no voiced frames".into()));
        }
        Ok(PitchBinning { lo, hi, voiced_bins })
    }

    pub fn bin_value(&self, log_f0: f64) -> usize {
        let width = self.hi - self.lo;
        if width <= 0.0 {
            return 0;
        }
        let raw = ((log_f0 - self.lo) / width * self.voiced_bins as f64).floor();
        (raw.max(0.0) as usize).min(self.voiced_bins - 1)
    }

    pub fn unvoiced_bin(&self) -> usize {
        self.voiced_bins
    }

    /// Total bin-id count including the unvoiced bin.
    pub fn total_bins(&self) -> usize {
        self.voiced_bins + 1
    }
}

/// Run-length deduplication: collapses repeats, keeps run lengths as
/// durations, and assigns each run the bin of its mean voiced log-F0 (or
/// the unvoiced bin when no frame in the run is voiced).
///
/// The split tag is a placeholder; [`emit_dataset`] assigns real splits.
pub fn dedup(
    frame_units: &[usize],
    pitch_track: &[f64],
    voiced: &[bool],
    binning: &PitchBinning,
    label: usize,
) -> Result<UnitSequence> {
    if frame_units.is_empty() {
        return Err(Error::InvalidInput("dedup: empty unit sequence".into()));
    }
    if pitch_track.len() != frame_units.len() || voiced.len() != frame_units.len() {
        return Err(Error::InvalidInput(format!(
            "dedup: {} units but {} pitch values and {} voicing flags",
            frame_units.len(),
            pitch_track.len(),
            voiced.len()
        )));
    }
    let mut units = Vec::new();
    let mut durations = Vec::new();
    let mut pitch = Vec::new();
    let mut start = 0;
    for t in 1..=frame_units.len() {
        if t == frame_units.len() || frame_units[t] != frame_units[start] {
            units.push(frame_units[start]);
            durations.push(t - start);
            let mut sum = 0.0;
            let mut count = 0usize;
            for f in start..t {
                if voiced[f] {
                    sum += pitch_track[f];
                    count += 1;
                }
            }
            pitch.push(if count > 0 {
                binning.bin_value(sum / count as f64)
            } else {
                binning.unvoiced_bin()
            });
            start = t;
        }
    }
    Ok(UnitSequence {
        units,
        durations,
        pitch,
        label,
        split: Split::Train,
    })
}

/// Inverse of the unit stream of [`dedup`]: repeats each unit by its
/// duration.
pub fn expand(seq: &UnitSequence) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.durations.iter().sum());
    for (&u, &d) in seq.units.iter().zip(&seq.durations) {
        for _ in 0..d {
            out.push(u);
        }
    }
    out
}

/// Largest-remainder quotas for one class, guaranteeing every split gets at
/// least one example.
fn split_quotas(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut quotas = [0usize; 3];
    let mut fracs: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0;
    for (i, r) in ratios.iter().enumerate() {
        let exact = r * n as f64;
        quotas[i] = exact.floor() as usize;
        assigned += quotas[i];
        fracs.push((exact - exact.floor(), i));
    }
    // Distribute the remainder by largest fractional part; ties go to the
    // earlier split (train before valid before test).
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..n - assigned {
        quotas[fracs[k % 3].1] += 1;
    }
    // Promote empty splits by stealing from the largest.
    for i in 0..3 {
        while quotas[i] == 0 {
            let donor = (0..3).max_by_key(|&j| quotas[j]).unwrap();
            quotas[donor] -= 1;
            quotas[i] += 1;
        }
    }
    quotas
}

/// Assigns splits stratified by class and writes the dataset as NDJSON.
/// Examples keep their input order in the file; only the split tags change.
/// Assignment is deterministic under `seed`.
pub fn emit_dataset(
    mut sequences: Vec<UnitSequence>,
    ratios: [f64; 3],
    seed: u64,
    path: &Path,
) -> Result<Dataset> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    if ratios.iter().any(|r| *r <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "every split needs positive ratio, got {ratios:?}"
        )));
    }
    if sequences.is_empty() {
        return Err(Error::InvalidInput("emit_dataset: no sequences".into()));
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in sequences.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }

    for (&class, indices) in &by_class {
        let n = indices.len();
        if n < Split::ALL.len() {
            return Err(Error::InvalidInput(format!(
                "class {class} has {n} examples, fewer than the {} splits",
                Split::ALL.len()
            )));
        }
        let quotas = split_quotas(n, ratios);
        let mut shuffled = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, class as u64));
        shuffled.shuffle(&mut rng);
        let mut cursor = 0;
        for (split, &q) in Split::ALL.iter().zip(&quotas) {
            for &idx in &shuffled[cursor..cursor + q] {
                sequences[idx].split = *split;
            }
            cursor += q;
        }
    }

    let dataset = Dataset::new(sequences);
    dataset.write_ndjson(path)?;
    Ok(dataset)
}

/// Output of the full generation pipeline.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: Dataset,
    pub codebook: Codebook,
    pub binning: PitchBinning,
}

pub const DEFAULT_KMEANS_ITERS: usize = 25;

/// Runs the whole pipeline for a task and writes the dataset to `path`.
pub fn build_dataset(
    spec: &TaskSpec,
    n_per_class: usize,
    ratios: [f64; 3],
    path: &Path,
) -> Result<GeneratedData> {
    let corpus = generate_corpus(spec, n_per_class)?;

    let mut pooled = Vec::new();
    for ex in &corpus {
        pooled.extend_from_slice(&ex.frames.frames);
    }
    let codebook = kmeans_fit(
        &pooled,
        spec.feature_dim,
        spec.vocab,
        DEFAULT_KMEANS_ITERS,
        substream_seed(spec.seed, u64::MAX - 1),
    )?;
    let binning = PitchBinning::fit(&corpus, PitchBinning::DEFAULT_VOICED_BINS)?;

    let mut sequences = Vec::with_capacity(corpus.len());
    for ex in &corpus {
        let frame_units = codebook.quantize(&ex.frames.frames)?;
        sequences.push(dedup(
            &frame_units,
            &ex.frames.pitch,
            &ex.frames.voiced,
            &binning,
            ex.label,
        )?);
    }

    let dataset = emit_dataset(sequences, ratios, substream_seed(spec.seed, u64::MAX - 2), path)?;
    Ok(GeneratedData { dataset, codebook, binning })
}
