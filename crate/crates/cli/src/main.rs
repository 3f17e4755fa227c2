//! `espresso`: train, query, evaluate, extract onsets and serve.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use espresso_core::audio_features::{
    apply_patch, decode_wav, extract_onset_patch, onset_density, CatalogPatch, ComputedOnsetDensity, OnsetConfig,
};
use espresso_core::corpus::{group_core_pairs, load_catalog, load_pairs, save_catalog, PairSource, QueryGranularity};
use espresso_core::eval::{
    random_baseline_for, render_table2, reports_csv, run_ablation_grid, table2_grid, EvalConfig, EvalReport, Metrics,
};
use espresso_core::numerics::{load_model, save_model, train_model, PcaSetting, ProjectionConfig};
use espresso_core::retrieval::{build_index, query_response, QueryResponse};
use espresso_core::synthetic::{generate, write_world, SyntheticConfig};
use espresso_core::text_encoder::{load_embedding_table, Aggregate};
use espresso_core::DIMENSION_NAMES;
use espresso_service::{ServiceState, DEFAULT_PORT};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "espresso", version, about = "Rank recorded performances of a piece against a text description")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the text-to-feature projection and write a model file.
    Train(TrainArgs),
    /// Rank the performances of one piece against a description.
    Query(QueryArgs),
    /// Piece-wise cross-validation, ablation grid and random baseline.
    Evaluate(EvaluateArgs),
    /// Onset density of a WAV file, or a catalog patch for every performance.
    Onsets(OnsetArgs),
    /// Start the HTTP query service.
    Serve(ServeArgs),
    /// Write a synthetic catalog, pairs file and embedding table.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Augment {
    Pitchfork,
    Musiccaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Granularity {
    PerPerformance,
    PerPair,
}

impl From<Granularity> for QueryGranularity {
    fn from(g: Granularity) -> Self {
        match g {
            Granularity::PerPerformance => QueryGranularity::PerPerformance,
            Granularity::PerPair => QueryGranularity::PerPair,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregateArg {
    Sum,
    Mean,
}

impl From<AggregateArg> for Aggregate {
    fn from(a: AggregateArg) -> Self {
        match a {
            AggregateArg::Sum => Aggregate::Sum,
            AggregateArg::Mean => Aggregate::Mean,
        }
    }
}

fn parse_ridge(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("ridge must be finite and >= 0".into())
    }
}

/// Projection settings shared by `train` and `evaluate`.
#[derive(Debug, Args)]
struct ProjectionArgs {
    /// Auxiliary corpora added to the training pairs.
    #[arg(long, value_enum, value_delimiter = ',')]
    augment: Vec<Augment>,
    /// `off`, a component count, or a retained-variance fraction.
    #[arg(long, default_value = "0.95")]
    pca: PcaSetting,
    /// Ridge penalty; chosen automatically when omitted.
    #[arg(long, value_parser = parse_ridge)]
    ridge: Option<f64>,
    /// Compare in raw feature units instead of z-scores.
    #[arg(long)]
    raw_feature_space: bool,
    #[arg(long, value_enum, default_value = "sum")]
    aggregate: AggregateArg,
    /// How core descriptions of one performance form queries and training pairs.
    #[arg(long, value_enum, default_value = "per-performance")]
    granularity: Granularity,
}

impl ProjectionArgs {
    fn config(&self) -> ProjectionConfig {
        ProjectionConfig {
            pca: self.pca,
            ridge_lambda: self.ridge,
            standardize: !self.raw_feature_space,
            aggregate: self.aggregate.into(),
        }
    }

    fn has(&self, a: Augment) -> bool {
        self.augment.contains(&a)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    projection: ProjectionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Document,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    piece: String,
    #[arg(long)]
    text: String,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    projection: ProjectionArgs,
    /// Run all eight augmentation × PCA configurations.
    #[arg(long)]
    grid: bool,
    /// Print the results as an augmentation × PCA table.
    #[arg(long)]
    table2: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte-Carlo trials for the random baseline.
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Evaluate single-performance pieces, reported apart from the aggregate.
    #[arg(long)]
    allow_singleton: bool,
    /// Write the full JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the per-configuration CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OnsetArgs {
    /// Single WAV file.
    #[arg(long, conflicts_with_all = ["catalog", "patch_out"], required_unless_present = "catalog")]
    audio: Option<PathBuf>,
    /// Batch mode: compute onset density for every performance with an audio path.
    #[arg(long, requires = "patch_out")]
    catalog: Option<PathBuf>,
    /// Directory relative audio paths resolve against (default: the catalog's directory).
    #[arg(long, requires = "catalog")]
    audio_root: Option<PathBuf>,
    #[arg(long)]
    patch_out: Option<PathBuf>,
    /// Also write the catalog with the patch applied.
    #[arg(long, requires = "catalog")]
    patched_catalog: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    frame: usize,
    #[arg(long, default_value_t = 512)]
    hop: usize,
    #[arg(long, default_value_t = 3)]
    smoothing: usize,
    #[arg(long, default_value_t = 0.07)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    min_gap: f64,
    #[arg(long, default_value_t = 0.5)]
    median_window: f64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "ESPRESSO_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "ESPRESSO_CATALOG")]
    catalog: PathBuf,
    #[arg(long, env = "ESPRESSO_MODEL")]
    model: PathBuf,
    #[arg(long, env = "ESPRESSO_EMBEDDINGS")]
    embeddings: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Embedding noise as a multiple of the RMS embedding entry.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

/// A flag combination rejected after parsing; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Query(a) => query(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Onsets(a) => onsets(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

fn training_sources(p: &ProjectionArgs) -> BTreeSet<PairSource> {
    let mut s = BTreeSet::from([PairSource::Core]);
    if p.has(Augment::Pitchfork) {
        s.insert(PairSource::Pitchfork);
    }
    if p.has(Augment::Musiccaps) {
        s.insert(PairSource::Musiccaps);
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog).context("loading catalog")?;
    let pairs = load_pairs(&a.pairs, &training_sources(&a.projection), Some(&catalog)).context("loading pairs")?;
    let table = load_embedding_table(&a.embeddings, None).context("loading embeddings")?;
    let pairs = group_core_pairs(&pairs, a.projection.granularity.into());
    let model = train_model(&table, &pairs, &a.projection.config()).context("training")?;
    save_model(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let counts: Vec<String> = model.trained_on.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let pca = model
        .pca
        .as_ref()
        .map_or("off".to_string(), |p| format!("{} components", p.output_dim()));
    println!("trained on {} | pca {pca} | ridge {} | fingerprint {}", counts.join(" "), model.map.ridge_lambda, model.config_fingerprint);
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let model = load_model(&a.model).context("loading model")?;
    let catalog = load_catalog(&a.catalog).context("loading catalog")?;
    let table = load_embedding_table(&a.embeddings, Some(model.input_dim())).context("loading embeddings")?;
    let index = build_index(&catalog, &model)?;
    let response = query_response(&index, &model, &table, &a.piece, &a.text)?;
    match a.format {
        Format::Document => println!("{}", serde_json::to_string_pretty(&response)?),
        Format::Table => print!("{}", render_results(&response, &catalog)),
    }
    Ok(())
}

fn short_name(dim: &str) -> String {
    dim.split('_').map(|w| &w[..w.len().min(4)]).collect::<Vec<_>>().join("_")
}

fn render_results(r: &QueryResponse, catalog: &espresso_core::Catalog) -> String {
    let mut out = String::new();
    let title = catalog.piece(&r.piece_id).map_or("", |p| p.title.as_str());
    writeln!(out, "piece {} {title}  ({} space)", r.piece_id, r.feature_space).unwrap();
    writeln!(out, "query {:?}", r.query).unwrap();
    let dims: Vec<String> = DIMENSION_NAMES.iter().map(|d| format!("{:>9}", short_name(d))).collect();
    writeln!(out, "{:>4} {:>7}  {:<24} {}", "rank", "score", "performance", dims.join(" ")).unwrap();
    let pred: Vec<String> = r.results.first().map_or(Vec::new(), |x| {
        x.predicted_profile.iter().map(|v| format!("{v:>9.3}")).collect()
    });
    writeln!(out, "{:>4} {:>7}  {:<24} {}", "", "", "(predicted)", pred.join(" ")).unwrap();
    for x in &r.results {
        let label = format!("{} ({})", x.performance_id, x.artist_label);
        let prof: Vec<String> = x.performance_profile.iter().map(|v| format!("{v:>9.3}")).collect();
        writeln!(out, "{:>4} {:>7.4}  {:<24} {}", x.rank, x.score, label, prof.join(" ")).unwrap();
    }
    for w in &r.warnings {
        writeln!(out, "warning: {w}").unwrap();
    }
    out
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.table2 && !a.grid {
        return Err(usage("--table2 needs --grid"));
    }
    let catalog = load_catalog(&a.catalog).context("loading catalog")?;
    let all_sources: BTreeSet<PairSource> = PairSource::ALL.into_iter().collect();
    let pairs = load_pairs(&a.pairs, &all_sources, Some(&catalog)).context("loading pairs")?;
    let table = load_embedding_table(&a.embeddings, None).context("loading embeddings")?;

    let base = EvalConfig {
        augment_pitchfork: a.projection.has(Augment::Pitchfork),
        augment_musiccaps: a.projection.has(Augment::Musiccaps),
        projection: a.projection.config(),
        granularity: a.projection.granularity.into(),
        allow_singleton: a.allow_singleton,
        seed: a.seed,
    };
    let grid = if a.grid {
        table2_grid(&base, a.projection.pca)
    } else {
        vec![base]
    };
    let reports = run_ablation_grid(&catalog, &pairs, &table, &grid)?;
    let counts: Vec<usize> = reports[0].outcomes().map(|o| o.candidate_count).collect();
    let baseline = random_baseline_for(&counts, a.trials as usize, a.seed)?;

    let csv = reports_csv(&reports);
    if let Some(path) = &a.csv {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.report {
        write_report(path, &reports, &baseline, &a)?;
    }
    if a.table2 {
        print!("{}", render_table2(&reports));
    } else {
        print!("{csv}");
    }
    println!(
        "random baseline ({} trials): top1 {:.4} top2 {:.4} mrr {:.4}",
        a.trials, baseline.top1, baseline.top2, baseline.mrr
    );
    Ok(())
}

fn write_report(path: &Path, reports: &[EvalReport], baseline: &Metrics, a: &EvaluateArgs) -> Result<()> {
    let doc = json!({
        "reports": reports,
        "random_baseline": { "trials": a.trials, "seed": a.seed, "metrics": baseline },
    });
    fs::write(path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn onsets(a: OnsetArgs) -> Result<()> {
    let config = OnsetConfig {
        frame_size: a.frame,
        hop_size: a.hop,
        flux_smoothing: a.smoothing,
        peak_threshold_delta: a.delta,
        min_inter_onset_gap: a.min_gap,
        median_window: a.median_window,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    if let Some(audio) = &a.audio {
        let clip = decode_wav(audio)?;
        let density = onset_density(&clip, &config)?;
        println!("{density:.4}");
        return Ok(());
    }
    let Some(catalog_path) = &a.catalog else {
        return Err(usage("either --audio or --catalog is required"));
    };
    let patch_out = a.patch_out.as_ref().expect("clap enforces --patch-out with --catalog");
    let catalog = load_catalog(catalog_path).context("loading catalog")?;
    let root = a
        .audio_root
        .clone()
        .unwrap_or_else(|| catalog_path.parent().map(Path::to_path_buf).unwrap_or_default());
    let (patch, errors): (CatalogPatch, _) = extract_onset_patch(&catalog, &ComputedOnsetDensity::new(config, root));
    for e in &errors {
        eprintln!("warning: {e}");
    }
    fs::write(patch_out, serde_json::to_string_pretty(&patch)? + "\n")
        .with_context(|| format!("writing {}", patch_out.display()))?;
    if let Some(out) = &a.patched_catalog {
        save_catalog(&apply_patch(&catalog, &patch)?, out)?;
    }
    println!("{} performance(s) measured, {} failed", patch.onset_density.len(), errors.len());
    if patch.onset_density.is_empty() && !errors.is_empty() {
        bail!("no audio file could be measured");
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let state = ServiceState::load(&a.catalog, &a.model, &a.embeddings)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(espresso_service::serve(Arc::new(state), a.port))?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(usage("--noise must be finite and >= 0"));
    }
    let world = generate(&SyntheticConfig {
        seed: a.seed,
        noise_ratio: a.noise,
        ..SyntheticConfig::default()
    });
    write_world(&world, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} pieces, {} performances, {} pairs, {} words -> {}",
        world.catalog.pieces().len(),
        world.catalog.performances().len(),
        world.pairs.len(),
        world.table.len(),
        a.out.display()
    );
    Ok(())
}
