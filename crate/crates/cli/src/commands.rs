//! The five pipeline commands. Each resolves its effective configuration
//! (built-in defaults, then config-file keys, then flags), runs the core
//! library, writes primary outputs, and drops a provenance manifest beside
//! them. No command mutates its inputs.

use crate::manifest::{config_hash, run_manifest_path, Manifest};
use crate::{AnalyzeArgs, CliError, EvalArgs, GenDataArgs, PretrainArgs, TuneArgs};
use promptune::datagen::{build_dataset, TaskSpec};
use promptune::lm::{build_lm, load_lm, pretrain as pretrain_lm, save_lm, LMConfig, PretrainConfig, SpokenLM, Variant};
use promptune::lm::next_unit_distribution;
use promptune::shapley::{explain_class, export_beeswarm, rank_units, BackgroundSummary, ExportFormat};
use promptune::tuner::{evaluate_split, fit_and_tune, load_run, save_run, EvalMetric, TuneConfig, TunedRun, VerbalizerKind};
use promptune::verbalizer::Verbalizer;
use promptune::{substream_seed, Dataset, Split};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::user(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::user(format!("malformed config {}: {e}", p.display())))
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::user(format!("cannot create {}: {e}", path.display())))
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    match s {
        "gslm" => Ok(Variant::Gslm),
        "pgslm" => Ok(Variant::Pgslm),
        other => Err(CliError::user(format!("unknown variant '{other}', expected gslm or pgslm"))),
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(CliError::user(format!("unknown split '{other}', expected train, valid, or test"))),
    }
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Default, Deserialize)]
struct GenDataFile {
    task: Option<String>,
    seed: Option<u64>,
    n_per_class: Option<usize>,
    ratios: Option<[f64; 3]>,
}

#[derive(Serialize)]
struct GenDataEffective<'a> {
    task: &'a str,
    seed: u64,
    n_per_class: usize,
    ratios: [f64; 3],
}

pub fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let file: GenDataFile = read_config(&args.config)?;
    let task = args
        .task
        .or(file.task)
        .ok_or_else(|| CliError::user("no task given: pass --task or a config with a task key"))?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let n_per_class = args.n_per_class.or(file.n_per_class).unwrap_or(250);
    let ratios = file.ratios.unwrap_or([0.8, 0.1, 0.1]);
    let effective = GenDataEffective { task: &task, seed, n_per_class, ratios };

    let spec = TaskSpec::builtin(&task, seed)?;
    ensure_dir(&args.out)?;
    let dataset_path = args.out.join("dataset.ndjson");
    let codebook_path = args.out.join("codebook.json");
    let generated = build_dataset(&spec, n_per_class, ratios, &dataset_path)?;
    generated.codebook.save(&codebook_path)?;

    let mut manifest = Manifest::new("gen-data", config_hash(&effective));
    manifest.add_output(&dataset_path)?;
    manifest.add_output(&codebook_path)?;
    manifest.write(&args.out.join("manifest.json"))?;

    let d = &generated.dataset;
    println!(
        "task {task}: {} classes, vocab {}, splits train {} / valid {} / test {} -> {}",
        d.num_classes()?,
        spec.vocab,
        d.split(Split::Train).len(),
        d.split(Split::Valid).len(),
        d.split(Split::Test).len(),
        args.out.display(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Default, Deserialize)]
struct PretrainFile {
    variant: Option<String>,
    vocab: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    build_seed: Option<u64>,
}

#[derive(Serialize)]
struct PretrainEffective {
    lm: LMConfig,
    pretrain: PretrainConfig,
    build_seed: u64,
}

pub fn pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let file: PretrainFile = read_config(&args.config)?;
    let dataset = Dataset::read_ndjson(&args.data)?;
    let variant = parse_variant(&args.variant.or(file.variant).unwrap_or_else(|| "gslm".into()))?;
    let vocab = args.vocab.or(file.vocab).unwrap_or_else(|| dataset.observed_vocab());
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let build_seed = args.build_seed.or(file.build_seed).unwrap_or_else(|| substream_seed(seed, 1));
    let config = PretrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(8),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(16),
        lr: args.lr.or(file.lr).unwrap_or(1e-3),
        seed,
    };
    let lm_config = LMConfig::desk_scale(variant, vocab);
    let effective = PretrainEffective { lm: lm_config.clone(), pretrain: config.clone(), build_seed };

    let mut lm = build_lm(lm_config, build_seed)?;
    let log = pretrain_lm(&mut lm, &dataset, &config)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    save_lm(&lm, &args.out)?;

    let mut manifest = Manifest::new("pretrain", config_hash(&effective));
    manifest.add_input(&args.data)?;
    manifest.add_output(&args.out)?;
    manifest.write(&sidecar_path(&args.out))?;

    println!(
        "pretrained {variant} for {} epochs: valid perplexity {:.4} -> {:.4}, digest {} -> {}",
        config.epochs,
        log.initial_valid_perplexity,
        log.final_valid_perplexity,
        lm.frozen_digest().unwrap_or("?"),
        args.out.display(),
    );
    Ok(())
}

/// Sidecar manifest path for a single-file output: foo.json -> foo.manifest.json.
fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}.manifest.json"))
}

// ---------------------------------------------------------------------------
// tune

#[derive(Default, Deserialize)]
struct ExperimentFile {
    task: Option<String>,
    backbone: Option<PathBuf>,
    data: Option<PathBuf>,
    variant: Option<String>,
    prompt_len: Option<usize>,
    verbalizer: Option<String>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    patience: Option<usize>,
    seeds: Option<Vec<u64>>,
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct TuneEffective<'a> {
    task: &'a str,
    tune: &'a TuneConfig,
}

pub fn tune(args: TuneArgs) -> Result<(), CliError> {
    let file: ExperimentFile = read_config(&args.config)?;
    let backbone = args
        .backbone
        .or(file.backbone)
        .ok_or_else(|| CliError::user("no backbone given: pass --backbone or a config with a backbone key"))?;
    let data = args
        .data
        .or(file.data)
        .ok_or_else(|| CliError::user("no data given: pass --data or a config with a data key"))?;
    let out = args
        .out
        .or(file.out_dir)
        .ok_or_else(|| CliError::user("no output directory given: pass --out or a config with an out_dir key"))?;
    let task = args.task.or(file.task).unwrap_or_else(|| {
        data.file_stem().and_then(|s| s.to_str()).unwrap_or("task").to_string()
    });
    let verbalizer: VerbalizerKind = args
        .verbalizer
        .or(file.verbalizer)
        .unwrap_or_else(|| "learnable".into())
        .parse()?;
    let seeds: Vec<u64> = match args.seed {
        Some(s) => vec![s],
        None => file.seeds.unwrap_or_else(|| vec![0]),
    };
    if seeds.is_empty() {
        return Err(CliError::user("seeds list is empty; give at least one seed"));
    }

    let lm = load_lm(&backbone)?;
    if let Some(v) = file.variant.as_deref() {
        let wanted = parse_variant(v)?;
        if wanted != lm.config.variant {
            return Err(CliError::user(format!(
                "config asks for variant {wanted} but the backbone is {}",
                lm.config.variant
            )));
        }
    }
    let dataset = Dataset::read_ndjson(&data)?;
    let defaults = TuneConfig::default();

    for &seed in &seeds {
        let cfg = TuneConfig {
            epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
            batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
            lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
            seed,
            patience: args.patience.or(file.patience).unwrap_or(defaults.patience),
            verbalizer,
            prompt_len: args.prompt_len.or(file.prompt_len).unwrap_or(defaults.prompt_len),
        };
        let run_dir = out.join(format!("seed-{seed}"));
        ensure_dir(&run_dir)?;

        let (run, log) = fit_and_tune(&lm, &dataset, &task, &cfg)?;
        let run_path = run_dir.join("run.json");
        let log_path = run_dir.join("tune_log.ndjson");
        let metrics_path = run_dir.join("metrics.json");
        save_run(&run, &run_path)?;
        log.write_ndjson(&log_path)?;
        let report = evaluate_split(&lm, &run.prompts, &run.verbalizer, &dataset, Split::Test, EvalMetric::Accuracy)?;
        report.write_json(&task, &metrics_path)?;

        let effective = TuneEffective { task: &task, tune: &cfg };
        let mut manifest = Manifest::new("tune", config_hash(&effective));
        manifest.backbone_path = Some(backbone.display().to_string());
        manifest.add_input(&backbone)?;
        manifest.add_input(&data)?;
        manifest.add_output(&run_path)?;
        manifest.add_output(&log_path)?;
        manifest.add_output(&metrics_path)?;
        manifest.write(&run_manifest_path(&run_dir))?;

        println!(
            "seed {seed}: {} epochs, best valid {:.4} @ epoch {}, test acc {:.4} -> {}",
            log.epochs.len(),
            log.best_valid_metric,
            log.best_epoch,
            report.value,
            run_dir.display(),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// Accepts either a run directory or a direct path to its run.json.
fn resolve_run(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join("run.json"), path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        (path.to_path_buf(), dir)
    }
}

/// The backbone a run was tuned against: the explicit flag wins, otherwise
/// the path recorded in the run's manifest.
fn resolve_backbone(flag: Option<PathBuf>, run_dir: &Path) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p);
    }
    let manifest_file = run_manifest_path(run_dir);
    if manifest_file.exists() {
        let manifest = Manifest::read(&manifest_file)?;
        if let Some(p) = manifest.backbone_path {
            return Ok(PathBuf::from(p));
        }
    }
    Err(CliError::user(
        "cannot locate the backbone: pass --backbone (the run's manifest records no backbone path)",
    ))
}

fn load_bound_run(run_file: &Path, backbone: &Path) -> Result<(SpokenLM, TunedRun), CliError> {
    let lm = load_lm(backbone)?;
    let run = load_run(run_file, &lm)?;
    Ok((lm, run))
}

#[derive(Serialize)]
struct EvalEffective<'a> {
    run: String,
    metric: &'a str,
    split: &'a str,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let metric: EvalMetric = args.metric.parse()?;
    let split = parse_split(&args.split)?;
    let (run_file, run_dir) = resolve_run(&args.run);
    let backbone = resolve_backbone(args.backbone, &run_dir)?;
    let (lm, run) = load_bound_run(&run_file, &backbone)?;
    let dataset = Dataset::read_ndjson(&args.data)?;

    let report = evaluate_split(&lm, &run.prompts, &run.verbalizer, &dataset, split, metric)?;
    let out = args
        .out
        .unwrap_or_else(|| run_dir.join(format!("metrics-{}-{}.json", args.split, metric.as_str())));
    report.write_json(&run.task, &out)?;

    let effective = EvalEffective {
        run: run_file.display().to_string(),
        metric: metric.as_str(),
        split: args.split.as_str(),
    };
    let mut manifest = Manifest::new("eval", config_hash(&effective));
    manifest.backbone_path = Some(backbone.display().to_string());
    manifest.add_input(&backbone)?;
    manifest.add_input(&run_file)?;
    manifest.add_input(&args.data)?;
    manifest.add_output(&out)?;
    manifest.write(&sidecar_path(&out))?;

    println!("{}", report.to_json(&run.task));
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Serialize)]
struct AnalyzeEffective<'a> {
    run: String,
    class: Option<usize>,
    top_k: usize,
    format: &'a str,
}

pub fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let format = match args.format.as_str() {
        "ndjson" => ExportFormat::Ndjson,
        "svg" => ExportFormat::Svg,
        other => return Err(CliError::user(format!("unknown format '{other}', expected ndjson or svg"))),
    };
    let (run_file, run_dir) = resolve_run(&args.run);
    let backbone = resolve_backbone(args.backbone, &run_dir)?;
    let (lm, run) = load_bound_run(&run_file, &backbone)?;
    let verbalizer = match &run.verbalizer {
        Verbalizer::Learnable(v) => v,
        Verbalizer::Mapped(m) => {
            return Err(CliError::state(format!(
                "run used a {:?} verbalizer: SHAP analysis explains the learnable verbalizer's \
                 linear scores, so only learnable runs can be analyzed",
                m.kind
            )));
        }
    };
    if let Some(c) = args.class {
        if c >= run.classes {
            return Err(CliError::user(format!(
                "class {c} out of range: the run has {} classes",
                run.classes
            )));
        }
    }
    if args.top_k == 0 {
        return Err(CliError::user("top-k must be positive"));
    }

    let dataset = Dataset::read_ndjson(&args.data)?;
    let readout = |seqs: &[&promptune::UnitSequence]| -> Result<Vec<Vec<f64>>, CliError> {
        seqs.iter()
            .map(|s| next_unit_distribution(&lm, s, Some(&run.prompts)).map_err(CliError::from))
            .collect()
    };
    // Background: what the prompted model emits on the training split;
    // explanations: every test datapoint against that baseline.
    let background = BackgroundSummary::fit(&readout(&dataset.split(Split::Train))?)?;
    let test_dists = readout(&dataset.split(Split::Test))?;

    ensure_dir(&args.out)?;
    let classes: Vec<usize> = match args.class {
        Some(c) => vec![c],
        None => (0..run.classes).collect(),
    };
    let effective = AnalyzeEffective {
        run: run_file.display().to_string(),
        class: args.class,
        top_k: args.top_k,
        format: args.format.as_str(),
    };
    let mut manifest = Manifest::new("analyze", config_hash(&effective));
    manifest.backbone_path = Some(backbone.display().to_string());
    manifest.add_input(&backbone)?;
    manifest.add_input(&run_file)?;
    manifest.add_input(&args.data)?;

    for &class in &classes {
        let explanations = explain_class(verbalizer, &test_dists, &background, class)?;
        let ranked = rank_units(&explanations, class, args.top_k)?;
        let path = args.out.join(format!("beeswarm-class-{class}.{}", args.format));
        export_beeswarm(&ranked, &path, format)?;
        manifest.add_output(&path)?;
        let top = &ranked.units[0];
        println!(
            "class {class}: top unit {} (mean |phi| {:.5}), {} units x {} datapoints -> {}",
            top.unit,
            top.mean_abs_phi,
            ranked.units.len(),
            test_dists.len(),
            path.display(),
        );
    }
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}
