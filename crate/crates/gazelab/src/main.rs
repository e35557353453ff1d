//! Command-line front end: dataset synthesis, model training, evaluation,
//! single experiment cells, factor grids, and report rendering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gazelab::biometrics::{render_metrics_csv, render_scores_csv};
use gazelab::domain::load_dataset;
use gazelab::embedder::{load_checkpoint, save_checkpoint, Activation, EmbedderConfig};
use gazelab::harness::{
    enumerate_grid, evaluate, load_config, parse_each, parse_filter, parse_pipeline,
    parse_results_csv, prepare_corpus, pipeline_code, read_dataset_meta, regime_train_config,
    render_report, run_cells, run_experiment, summarize, train_model, training_seed,
    write_dataset_meta, write_text, CalibTraining, ConfigFile, DatasetMeta, ExperimentResult,
    ExperimentSpec, GridFactors, PreparedCorpus, Regime, ReportFormat, RunSettings, Scenario,
    TrainSettings, FAR_TARGET, TAG_GEN, VERIFICATION_SECONDS,
};
use gazelab::preprocess::Axis;
use gazelab::trainer::render_history_csv;
use gazelab::synth::{generate_dataset, write_signatures, PipelineNoise, SynthConfig};
use gazelab::util::derive_seed;
use gazelab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gazelab",
    about = "Synthetic gaze biometrics laboratory: generate corpora, train embedders, evaluate verification scenarios",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a gaze corpus (manifest, samples, ground-truth sidecar).
    Gen(GenArgs),
    /// Train one embedder on a dataset's train split.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint fold by fold.
    Eval(EvalArgs),
    /// Run one experiment cell: train plus per-fold evaluation.
    Exp(ExpArgs),
    /// Run a factor grid: synthesize per-pipeline datasets, share trained
    /// models across scenarios, render a report.
    Grid(GridArgs),
    /// Merge result CSVs into a report.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML config with [synth], [train], [grid] sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthOverrides {
    #[arg(long)]
    train_subjects: Option<usize>,
    #[arg(long)]
    test_subjects: Option<usize>,
    /// Task recordings per subject (evaluation needs 2).
    #[arg(long)]
    task_recordings: Option<usize>,
    #[arg(long)]
    task_seconds: Option<f64>,
    #[arg(long)]
    dwell_seconds: Option<f64>,
    #[arg(long)]
    fov_half_deg: Option<f64>,
    #[arg(long)]
    ipd_mm: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Quantize emitted samples to the on-disk digit grid (true/false).
    #[arg(long)]
    quantize: Option<bool>,
}

impl SynthOverrides {
    fn apply(&self, cfg: &mut SynthConfig) {
        if let Some(v) = self.train_subjects {
            cfg.n_train_subjects = v;
        }
        if let Some(v) = self.test_subjects {
            cfg.n_test_subjects = v;
        }
        if let Some(v) = self.task_recordings {
            cfg.n_task_recordings = v;
        }
        if let Some(v) = self.task_seconds {
            cfg.task_duration_s = v;
        }
        if let Some(v) = self.dwell_seconds {
            cfg.dwell_s = v;
        }
        if let Some(v) = self.fov_half_deg {
            cfg.fov_half_deg = v;
        }
        if let Some(v) = self.ipd_mm {
            cfg.ipd_mm = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = self.quantize {
            cfg.quantize = v;
        }
    }
}

#[derive(Args)]
struct TrainOverrides {
    /// Epoch multiplier applied to the regime presets.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    users_per_batch: Option<usize>,
    #[arg(long)]
    samples_per_user: Option<usize>,
    /// Run the unscaled regime presets (true/false).
    #[arg(long)]
    exact_presets: Option<bool>,
    /// Channels added per dense conv layer.
    #[arg(long)]
    growth: Option<usize>,
    /// Conv activation: tanh or silu.
    #[arg(long)]
    activation: Option<String>,
}

impl TrainOverrides {
    fn apply(&self, settings: &mut TrainSettings) -> Result<()> {
        if let Some(v) = self.scale {
            settings.scale = v;
        }
        if let Some(v) = self.users_per_batch {
            settings.users_per_batch = v;
        }
        if let Some(v) = self.samples_per_user {
            settings.samples_per_user = v;
        }
        if let Some(v) = self.exact_presets {
            settings.exact_presets = v;
        }
        if let Some(v) = self.growth {
            settings.growth = v;
        }
        if let Some(v) = &self.activation {
            settings.activation = Activation::parse(v)?;
        }
        Ok(())
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Corpus seed.
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
    /// Gaze pipeline noise profile: new or old.
    #[arg(long)]
    pipeline: Option<String>,
    #[command(flatten)]
    synth: SynthOverrides,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and history.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Channel axis: O, V, or B.
    #[arg(long, default_value = "O")]
    axis: String,
    /// Calibration models feeding training-time visual channels: all or single.
    #[arg(long, default_value = "all")]
    calib_training: String,
    /// Training regime: config1 or config2.
    #[arg(long, default_value = "config1")]
    regime: String,
    /// Differentiation filter: on or off.
    #[arg(long, default_value = "off")]
    filter: String,
    /// Base seed; the model seed derives from it and the factor key.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Output directory for metrics.csv and per-fold score CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Verification scenario: S1, S2, or S3.
    #[arg(long, default_value = "S1")]
    scenario: String,
    /// Permit the experimental scenario S3.
    #[arg(long)]
    experimental_s3: bool,
    /// Gaze seconds per enrollment/verification attempt.
    #[arg(long, default_value_t = VERIFICATION_SECONDS)]
    verification_seconds: u32,
    /// FAR operating point for the FRR metric.
    #[arg(long, default_value_t = FAR_TARGET)]
    far_target: f64,
}

#[derive(Args)]
struct ExpArgs {
    /// Dataset directory from `gen`; its pipeline must match the cell's.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (models/ and cells/ land here).
    #[arg(long)]
    out: PathBuf,
    /// Base seed for training.
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
    /// Cell id; defaults to the scenario name.
    #[arg(long)]
    exp_id: Option<String>,
    #[arg(long, default_value = "S1")]
    scenario: String,
    #[arg(long, default_value = "all")]
    calib_training: String,
    /// Defaults to the dataset's pipeline.
    #[arg(long)]
    pipeline: Option<String>,
    #[arg(long, default_value = "O")]
    axis: String,
    #[arg(long, default_value = "config1")]
    regime: String,
    #[arg(long, default_value = "off")]
    filter: String,
    #[arg(long, default_value_t = VERIFICATION_SECONDS)]
    verification_seconds: u32,
    #[arg(long)]
    experimental_s3: bool,
    #[arg(long, default_value_t = FAR_TARGET)]
    far_target: f64,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct GridArgs {
    /// Output directory (data/, models/, cells/, report.*).
    #[arg(long)]
    out: PathBuf,
    /// Base seed; dataset and training seeds derive from it.
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
    /// Comma-separated factor lists, overriding the [grid] section.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    calib_training: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pipelines: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    axes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<String>>,
    #[arg(long)]
    experimental_s3: bool,
    #[arg(long, default_value_t = FAR_TARGET)]
    far_target: f64,
    #[command(flatten)]
    synth: SynthOverrides,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSVs to merge (cells/*/result.csv or report.csv files).
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Output format: csv or markdown.
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Exp(args) => cmd_exp(args),
        Cmd::Grid(args) => cmd_grid(args),
        Cmd::Report(args) => cmd_report(args),
    }
}

fn load_cfg(arg: &ConfigArg) -> Result<ConfigFile> {
    match &arg.config {
        Some(path) => load_config(path),
        None => Ok(ConfigFile::default()),
    }
}

fn resolve_synth(
    cfg: &ConfigFile,
    overrides: &SynthOverrides,
    pipeline_flag: &Option<String>,
    seed: u64,
) -> Result<(SynthConfig, PipelineNoise)> {
    let mut synth = SynthConfig::default();
    if let Some(section) = &cfg.synth {
        section.apply(&mut synth);
    }
    overrides.apply(&mut synth);
    synth.seed = seed;
    let name = pipeline_flag
        .clone()
        .or_else(|| cfg.synth.as_ref().and_then(|s| s.pipeline.clone()))
        .unwrap_or_else(|| "new".to_string());
    let kind = parse_pipeline(&name)?;
    Ok((synth, PipelineNoise::for_kind(kind)))
}

fn resolve_train_settings(cfg: &ConfigFile, overrides: &TrainOverrides) -> Result<TrainSettings> {
    let mut settings = TrainSettings::default();
    if let Some(section) = &cfg.train {
        section.apply(&mut settings)?;
    }
    overrides.apply(&mut settings)?;
    Ok(settings)
}

fn generate_into(dir: &Path, synth: &SynthConfig, noise: &PipelineNoise) -> Result<usize> {
    let corpus = generate_dataset(synth, noise)?;
    gazelab::domain::save_dataset(&corpus.dataset, dir)?;
    write_signatures(&dir.join("signatures.csv"), &corpus.signatures)?;
    write_dataset_meta(
        dir,
        &DatasetMeta {
            pipeline: noise.kind,
            seed: synth.seed,
        },
    )?;
    Ok(corpus
        .dataset
        .subjects
        .iter()
        .map(|s| s.calibration_recordings.len() + s.task_recordings.len())
        .sum())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let (synth, noise) = resolve_synth(&cfg, &args.synth, &args.pipeline, args.seed)?;
    let n_recordings = generate_into(&args.out, &synth, &noise)?;
    println!(
        "wrote {} train + {} test subjects, {} recordings ({} pipeline) to {}",
        synth.n_train_subjects,
        synth.n_test_subjects,
        n_recordings,
        noise.kind.as_str(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let mut settings = resolve_train_settings(&cfg, &args.train)?;
    if let Some(seed) = args.seed {
        settings.seed = seed;
    } else if let Some(seed) = cfg.train.as_ref().and_then(|t| t.seed) {
        settings.seed = seed;
    }
    let axis = Axis::parse(&args.axis)?;
    let calib_training = CalibTraining::parse(&args.calib_training)?;
    let regime = Regime::parse(&args.regime)?;
    let filter_on = parse_filter(&args.filter)?;
    let meta = read_dataset_meta(&args.data)?;
    let corpus = prepare_corpus(load_dataset(&args.data)?)?;

    let seed = training_seed(settings.seed, calib_training, meta.pipeline, axis, regime, filter_on);
    let mut embedder_cfg = EmbedderConfig::with_channels(axis.channels());
    embedder_cfg.growth = settings.growth;
    embedder_cfg.activation = settings.activation;
    let train_cfg = regime_train_config(regime, &settings, seed);
    let (ckpt, history) = train_model(
        &corpus,
        axis,
        calib_training,
        filter_on,
        &embedder_cfg,
        &train_cfg,
    )?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let model_path = args.out.join("model.ckpt");
    save_checkpoint(&model_path, &ckpt)?;
    write_text(&args.out.join("history.csv"), &render_history_csv(&history))?;
    let final_loss = history.last().map(|h| h.loss).unwrap_or(f64::NAN);
    println!(
        "trained axis {} ({} calibration, {}, filter {}): {} steps, final loss {:.4} -> {}",
        axis.as_str(),
        calib_training.as_str(),
        regime.as_str(),
        args.filter,
        history.len(),
        final_loss,
        model_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scenario = Scenario::parse(&args.scenario)?;
    if scenario == Scenario::S3 && !args.experimental_s3 {
        return Err(Error::validation(
            "scenario S3 is experimental; pass --experimental-s3 to run it",
        ));
    }
    let corpus = prepare_corpus(load_dataset(&args.data)?)?;
    let ckpt = load_checkpoint(&args.model)?;
    let out = evaluate(
        scenario,
        args.verification_seconds,
        &corpus,
        &ckpt,
        args.far_target,
    )?;
    write_text(&args.out.join("metrics.csv"), &render_metrics_csv(&out.per_fold))?;
    for (fold, scores) in &out.fold_scores {
        write_text(
            &args.out.join("scores").join(format!("fold_{fold}.csv")),
            &render_scores_csv(scores),
        )?;
    }
    for m in &out.per_fold {
        println!(
            "fold {}: EER {:.2}% FRR {:.2}%{}",
            m.fold,
            m.eer * 100.0,
            m.frr_at_far * 100.0,
            if m.unresolved_far { " (FAR unresolved)" } else { "" }
        );
    }
    if out.per_fold.len() >= 2 {
        let summary = summarize(scenario.as_str(), &out.per_fold, 0.0)?;
        println!(
            "{} over {} folds: EER {} % FRR {} %",
            scenario.as_str(),
            out.per_fold.len(),
            gazelab::harness::format_cell(summary.eer_mean, summary.eer_sd),
            gazelab::harness::format_cell(summary.frr_mean, summary.frr_sd),
        );
    }
    println!("metrics -> {}", args.out.join("metrics.csv").display());
    Ok(())
}

fn print_result(r: &ExperimentResult) {
    println!(
        "{}: EER {} % FRR {} %{} [{:.1} s]",
        r.exp_id,
        gazelab::harness::format_cell(r.eer_mean, r.eer_sd),
        gazelab::harness::format_cell(r.frr_mean, r.frr_sd),
        if r.unresolved_far { " (FAR unresolved)" } else { "" },
        r.runtime_s
    );
}

fn cmd_exp(args: ExpArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let mut settings = resolve_train_settings(&cfg, &args.train)?;
    settings.seed = args.seed;

    let meta = read_dataset_meta(&args.data)?;
    let scenario = Scenario::parse(&args.scenario)?;
    let pipeline = match &args.pipeline {
        Some(name) => parse_pipeline(name)?,
        None => meta.pipeline,
    };
    if pipeline != meta.pipeline {
        return Err(Error::validation(format!(
            "dataset at {} was generated with the {} pipeline but the cell wants {}",
            args.data.display(),
            meta.pipeline.as_str(),
            pipeline.as_str()
        )));
    }
    let spec = ExperimentSpec {
        exp_id: args.exp_id.clone().unwrap_or_else(|| scenario.as_str().to_string()),
        scenario,
        calib_training: CalibTraining::parse(&args.calib_training)?,
        pipeline,
        axis: Axis::parse(&args.axis)?,
        regime: Regime::parse(&args.regime)?,
        filter_on: parse_filter(&args.filter)?,
        verification_seconds: args.verification_seconds,
    };
    let run = RunSettings {
        train: settings,
        far_target: args.far_target,
        allow_experimental: args.experimental_s3,
    };
    let corpus = prepare_corpus(load_dataset(&args.data)?)?;
    let result = run_experiment(&spec, &corpus, &run, &args.out)?;
    write_text(
        &args.out.join("report.csv"),
        &render_report(std::slice::from_ref(&result), ReportFormat::Csv)?,
    )?;
    print_result(&result);
    Ok(())
}

fn cmd_grid(args: GridArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let mut factors = GridFactors::default();
    if let Some(section) = &cfg.grid {
        section.apply(&mut factors)?;
    }
    if let Some(v) = &args.scenarios {
        factors.scenarios = parse_each(v, Scenario::parse)?;
    }
    if let Some(v) = &args.calib_training {
        factors.calib_training = parse_each(v, CalibTraining::parse)?;
    }
    if let Some(v) = &args.pipelines {
        factors.pipelines = parse_each(v, |s| parse_pipeline(s))?;
    }
    if let Some(v) = &args.axes {
        factors.axes = parse_each(v, Axis::parse)?;
    }
    if let Some(v) = &args.regimes {
        factors.regimes = parse_each(v, Regime::parse)?;
    }
    if let Some(v) = &args.filters {
        factors.filters = parse_each(v, parse_filter)?;
    }
    let specs = enumerate_grid(&factors)?;

    let mut settings = resolve_train_settings(&cfg, &args.train)?;
    settings.seed = args.seed;
    let run = RunSettings {
        train: settings,
        far_target: args.far_target,
        allow_experimental: args.experimental_s3,
    };

    // One dataset per pipeline in the grid, each on its own derived seed.
    let mut corpora_owned: Vec<(String, PreparedCorpus)> = Vec::new();
    for &pipeline in &factors.pipelines {
        let noise = PipelineNoise::for_kind(pipeline);
        let dir = args.out.join("data").join(pipeline.as_str());
        let seed = derive_seed(args.seed, &[TAG_GEN, pipeline_code(pipeline)]);
        let (synth, _) = resolve_synth(&cfg, &args.synth, &None, seed)?;
        let n = generate_into(&dir, &synth, &noise)?;
        println!(
            "dataset {}: {} recordings -> {}",
            pipeline.as_str(),
            n,
            dir.display()
        );
        let corpus = prepare_corpus(load_dataset(&dir)?)?;
        corpora_owned.push((pipeline.as_str().to_string(), corpus));
    }
    let corpora: BTreeMap<&str, &PreparedCorpus> = corpora_owned
        .iter()
        .map(|(k, v)| (k.as_str(), v))
        .collect();

    let results = run_cells(&specs, &corpora, &run, &args.out)?;
    for r in &results {
        print_result(r);
    }
    write_text(&args.out.join("report.csv"), &render_report(&results, ReportFormat::Csv)?)?;
    write_text(
        &args.out.join("report.md"),
        &render_report(&results, ReportFormat::Markdown)?,
    )?;
    println!("report -> {}", args.out.join("report.csv").display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let format = ReportFormat::parse(&args.format)?;
    let mut results = Vec::new();
    for path in &args.results {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        results.extend(parse_results_csv(&text, path)?);
    }
    let doc = render_report(&results, format)?;
    match &args.out {
        Some(path) => {
            write_text(path, &doc)?;
            println!("report -> {}", path.display());
        }
        None => print!("{doc}"),
    }
    Ok(())
}
