//! Command-line entry point wiring generation, training, grid search,
//! comparison, attention export, and gradient checking into reproducible
//! experiments.
//!
//! Every artifact embeds `# seed=<seed> config_hash=<hash>` as its first
//! line, where the hash covers the semantically meaningful knobs of the run
//! (not file locations), so any result can be traced back to its inputs.
//! Verbosity is controlled by the `LESIONGRAPH_LOG` environment variable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::autodiff::{check_gradients, kink_margin, ExprGraph, GradCheckReport};
use crate::cohort::{load_cohort, write_cohort, Cohort, FeatureKind, Lesion, PatientRecord, RobustScaler};
use crate::graph::{population_stats, PopulationStats};
use crate::matrix::Matrix;
use crate::model::{
    self, init_params, predict_with_attention, prepare_samples, train, Hyper, Mode, ParamSet,
    Sample, Variant,
};
use crate::protocol::{
    grid_search, make_splits, summarize, Grid, RepeatRow, VariantReport, DEFAULT_REPEATS,
};
use crate::rng::{fnv1a, stream, stream_seed, Tag};
use crate::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(
    name = "lesiongraph",
    version,
    about = "Multi-lesion graph attention with clinical cross-attention: \
             synthetic cohorts, training, grid search, and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write clinical.csv + lesions.csv.
    Gen(GenArgs),
    /// Train one variant with fixed hyperparameters on a single split.
    Train(TrainArgs),
    /// Repeated splits x hyperparameter grid over one or more variants.
    Gridsearch(GridsearchArgs),
    /// Summarize gridsearch reports with p-values vs the cross-attention model.
    Compare(CompareArgs),
    /// Export per-lesion cross-attention maps from a trained checkpoint.
    ExportAttention(ExportAttentionArgs),
    /// Finite-difference gradient checks over every layer and model variant.
    CheckGrad(CheckGradArgs),
}

/// Parse argv, run, and map any failure to a nonzero exit code.
pub fn run() -> i32 {
    let env = env_logger::Env::new().filter_or("LESIONGRAPH_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
    match dispatch(Cli::parse().command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Gridsearch(args) => run_gridsearch(args),
        Command::Compare(args) => run_compare(args),
        Command::ExportAttention(args) => run_export_attention(args),
        Command::CheckGrad(args) => run_check_grad(args),
    }
}

/// 16-hex-digit FNV-1a hash of a canonical JSON rendering.
fn config_hash<T: Serialize>(config: &T) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    format!("{:016x}", fnv1a(text.as_bytes()))
}

fn provenance(seed: u64, hash: &str) -> String {
    format!("seed={seed} config_hash={hash}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// gen

#[derive(Args)]
struct GenArgs {
    /// JSON file with generator settings; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    positive_ratio: Option<f64>,
    #[arg(long)]
    lesions_min: Option<usize>,
    #[arg(long)]
    lesions_max: Option<usize>,
    /// Imaging feature dimension.
    #[arg(long)]
    features: Option<usize>,
    /// Clinical vector dimension.
    #[arg(long)]
    clinical_dims: Option<usize>,
    #[arg(long)]
    clinical_strength: Option<f64>,
    #[arg(long)]
    imaging_strength: Option<f64>,
    #[arg(long)]
    interaction_strength: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for clinical.csv, lesions.csv, synth_config.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn resolve_synth_config(args: &GenArgs) -> Result<SynthConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! override_field {
        ($field:ident, $flag:expr) => {
            if let Some(v) = $flag {
                config.$field = v;
            }
        };
    }
    override_field!(n_patients, args.patients);
    override_field!(positive_ratio, args.positive_ratio);
    override_field!(lesions_min, args.lesions_min);
    override_field!(lesions_max, args.lesions_max);
    override_field!(d_features, args.features);
    override_field!(d_clinical, args.clinical_dims);
    override_field!(clinical_strength, args.clinical_strength);
    override_field!(imaging_strength, args.imaging_strength);
    override_field!(interaction_strength, args.interaction_strength);
    override_field!(noise, args.noise);
    override_field!(seed, args.seed);
    Ok(config)
}

fn run_gen(args: GenArgs) -> Result<()> {
    let config = resolve_synth_config(&args)?;
    let cohort = generate(&config)?;
    let hash = config_hash(&config);
    let note = provenance(config.seed, &hash);
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating directory {}", args.out.display()))?;
    let clinical = args.out.join("clinical.csv");
    let lesions = args.out.join("lesions.csv");
    write_cohort(&cohort, &clinical, &lesions, &note)?;
    write_text(
        &args.out.join("synth_config.json"),
        &serde_json::to_string_pretty(&config)?,
    )?;
    let positives = cohort.patients.iter().filter(|p| p.label == 1).count();
    info!(
        "generated {} patients ({} positive) into {}",
        cohort.patients.len(),
        positives,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    /// Clinical CSV (patient_id,label,c0..).
    #[arg(long)]
    clinical: PathBuf,
    /// Lesion CSV (patient_id,lesion_id,px,py,pz,f0..).
    #[arg(long)]
    lesions: PathBuf,
    #[arg(long, default_value = "crossatt")]
    variant: Variant,
    /// Master seed for the split, initialisation, and shuffling.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Also dump the standardized training-set lesion graphs as
    /// patient_id,i,j,w rows (graph variants only).
    #[arg(long)]
    dump_graph: Option<PathBuf>,
    /// Output directory for checkpoint.json and metrics.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// The knobs that define a training run, hashed into artifact headers.
#[derive(Serialize)]
struct TrainManifest<'a> {
    variant: &'a str,
    seed: u64,
    hyper: &'a Hyper,
}

/// Everything needed to reproduce preprocessing and inference later.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: String,
    pub variant: Variant,
    pub hyper: Hyper,
    pub d_features: usize,
    pub d_clinical: usize,
    pub clinical_scaler: RobustScaler,
    pub imaging_scaler: RobustScaler,
    pub stats: Option<PopulationStats>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub pos_weight: f64,
    pub params: ParamSet,
}

struct Prepared {
    samples: Vec<Sample>,
    clinical_scaler: RobustScaler,
    imaging_scaler: RobustScaler,
    stats: Option<PopulationStats>,
}

/// Fit scalers on the training patients, standardize the whole cohort,
/// estimate population distance scales on the standardized training
/// patients (graph variants), and turn every patient into a model sample.
fn preprocess(
    variant: Variant,
    cohort: &Cohort,
    train_ids: &[usize],
    gamma: f64,
) -> Result<Prepared> {
    let training = cohort.subset(train_ids);
    let clinical_scaler = RobustScaler::fit(&training, FeatureKind::Clinical);
    let imaging_scaler = RobustScaler::fit(&training, FeatureKind::Imaging);
    let standardized = cohort.standardized(&clinical_scaler, &imaging_scaler)?;
    let stats = if variant.uses_graph() {
        Some(population_stats(&standardized.subset(train_ids), gamma)?)
    } else {
        None
    };
    let samples = prepare_samples(&standardized, stats.as_ref())?;
    Ok(Prepared {
        samples,
        clinical_scaler,
        imaging_scaler,
        stats,
    })
}

fn gather(samples: &[Sample], ids: &[usize]) -> Vec<Sample> {
    ids.iter().map(|&i| samples[i].clone()).collect()
}

fn run_train(args: TrainArgs) -> Result<()> {
    if args.dump_graph.is_some() && !args.variant.uses_graph() {
        bail!(
            "--dump-graph needs a graph variant, {} builds no lesion graph",
            args.variant
        );
    }
    let cohort = load_cohort(&args.clinical, &args.lesions)?;
    let labels: Vec<u8> = cohort.patients.iter().map(|p| p.label).collect();
    let plan = make_splits(&labels, args.seed, 1)?;
    let split = &plan.repeats[0];

    let hyper = Hyper {
        lr: args.lr,
        hidden: args.hidden,
        gamma: args.gamma,
        dropout: args.dropout,
        epochs: args.epochs,
    };
    let prepared = preprocess(args.variant, &cohort, &split.train, args.gamma)?;
    // Seeds follow the gridsearch convention at repeat 0, grid point 0, so a
    // one-point grid and a plain train run produce the same model.
    let train_seed = stream_seed(
        args.seed,
        &[
            Tag::Label(args.variant.tag()),
            Tag::Label("train"),
            Tag::Index(0),
            Tag::Index(0),
        ],
    );
    let val_seed = stream_seed(args.seed, &[Tag::Label("val"), Tag::Index(0)]);
    let result = train(
        args.variant,
        &gather(&prepared.samples, &split.train),
        &gather(&prepared.samples, &split.val),
        cohort.d_features,
        cohort.d_clinical,
        &hyper,
        train_seed,
        val_seed,
    )?;
    info!(
        "{}: best val AUC {:.4} at epoch {}",
        args.variant, result.best_val_auc, result.best_epoch
    );

    let manifest = TrainManifest {
        variant: args.variant.tag(),
        seed: args.seed,
        hyper: &hyper,
    };
    let hash = config_hash(&manifest);

    let mut metrics = format!("# {}\n", provenance(args.seed, &hash));
    metrics.push_str("epoch,mean_train_loss,val_auc\n");
    for m in &result.metrics {
        // Epoch 0 is the pre-training evaluation; it has no train loss.
        let loss = if m.mean_train_loss.is_nan() {
            String::new()
        } else {
            m.mean_train_loss.to_string()
        };
        let _ = writeln!(metrics, "{},{},{}", m.epoch, loss, m.val_auc);
    }
    write_text(&args.out.join("metrics.csv"), &metrics)?;

    if let Some(path) = &args.dump_graph {
        let mut dump = format!("# {}\n", provenance(args.seed, &hash));
        dump.push_str("patient_id,i,j,w\n");
        for sample in gather(&prepared.samples, &split.train) {
            let weights = sample.weights.as_ref().expect("graph variant has weights");
            for i in 0..weights.rows() {
                for j in 0..weights.cols() {
                    let _ = writeln!(dump, "{},{i},{j},{}", sample.patient_id, weights.get(i, j));
                }
            }
        }
        write_text(path, &dump)?;
    }

    let checkpoint = Checkpoint {
        seed: args.seed,
        config_hash: hash,
        variant: args.variant,
        hyper,
        d_features: cohort.d_features,
        d_clinical: cohort.d_clinical,
        clinical_scaler: prepared.clinical_scaler,
        imaging_scaler: prepared.imaging_scaler,
        stats: prepared.stats,
        best_epoch: result.best_epoch,
        best_val_auc: result.best_val_auc,
        pos_weight: result.pos_weight,
        params: result.best_params,
    };
    write_text(
        &args.out.join("checkpoint.json"),
        &serde_json::to_string_pretty(&checkpoint)?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gridsearch

#[derive(Args)]
struct GridsearchArgs {
    #[arg(long)]
    clinical: PathBuf,
    #[arg(long)]
    lesions: PathBuf,
    /// Variants to evaluate; repeat the flag or pass a comma list.
    /// Defaults to all eight.
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Number of repeated train/validation resplits.
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
    /// Learning-rate grid axis, comma separated.
    #[arg(long, value_delimiter = ',')]
    grid_lr: Vec<f64>,
    /// Hidden-width grid axis.
    #[arg(long, value_delimiter = ',')]
    grid_hidden: Vec<usize>,
    /// Edge-kernel gamma grid axis (graph variants).
    #[arg(long, value_delimiter = ',')]
    grid_gamma: Vec<f64>,
    /// Dropout grid axis (message-passing variants).
    #[arg(long, value_delimiter = ',')]
    grid_dropout: Vec<f64>,
    /// Worker threads for repeats (0 = one per CPU).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory for report_<variant>.csv files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Serialize)]
struct GridManifest<'a> {
    variants: Vec<&'a str>,
    seed: u64,
    epochs: usize,
    repeats: usize,
    grid: &'a Grid,
}

fn format_report(rows: &[RepeatRow], note: &str) -> String {
    let mut text = format!("# {note}\n");
    text.push_str("variant,repeat,lr,hidden,gamma,dropout,val_auc,test_auc\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            r.variant.tag(),
            r.repeat,
            r.lr,
            r.hidden,
            r.gamma,
            r.dropout,
            r.val_auc,
            r.test_auc
        );
    }
    text
}

fn run_gridsearch(args: GridsearchArgs) -> Result<()> {
    let cohort = load_cohort(&args.clinical, &args.lesions)?;
    let labels: Vec<u8> = cohort.patients.iter().map(|p| p.label).collect();
    let plan = make_splits(&labels, args.seed, args.repeats)?;

    let variants = if args.variant.is_empty() {
        Variant::all().to_vec()
    } else {
        args.variant.clone()
    };
    let mut grid = Grid::default();
    if !args.grid_lr.is_empty() {
        grid.lrs = args.grid_lr.clone();
    }
    if !args.grid_hidden.is_empty() {
        grid.hiddens = args.grid_hidden.clone();
    }
    if !args.grid_gamma.is_empty() {
        grid.gammas = args.grid_gamma.clone();
    }
    if !args.grid_dropout.is_empty() {
        grid.dropouts = args.grid_dropout.clone();
    }

    let manifest = GridManifest {
        variants: variants.iter().map(|v| v.tag()).collect(),
        seed: args.seed,
        epochs: args.epochs,
        repeats: args.repeats,
        grid: &grid,
    };
    let hash = config_hash(&manifest);
    let note = provenance(args.seed, &hash);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .context("building worker pool")?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating directory {}", args.out.display()))?;
    for &variant in &variants {
        info!("gridsearch: {variant} over {} repeats", args.repeats);
        let report = pool
            .install(|| grid_search(variant, &cohort, &plan, &grid, args.epochs, args.seed))?;
        let path = args.out.join(format!("report_{}.csv", variant.tag()));
        write_text(&path, &format_report(&report.rows, &note))?;
        info!(
            "{variant}: mean test AUC {:.4} ± {:.4} -> {}",
            report.mean_test_auc(),
            report.std_test_auc(),
            path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

#[derive(Args)]
struct CompareArgs {
    /// Directory holding report_<variant>.csv files from gridsearch.
    #[arg(long)]
    reports: PathBuf,
    /// Output directory for summary.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_report(path: &Path) -> Result<Vec<RepeatRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let expect = [
        "variant", "repeat", "lr", "hidden", "gamma", "dropout", "val_auc", "test_auc",
    ];
    let header = reader.headers().context("reading report header")?.clone();
    if header.iter().ne(expect) {
        bail!(
            "{}: unexpected header {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        );
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        rows.push(RepeatRow {
            variant: field(0).parse().map_err(anyhow::Error::msg)?,
            repeat: field(1).parse()?,
            lr: field(2).parse()?,
            hidden: field(3).parse()?,
            gamma: field(4).parse()?,
            dropout: field(5).parse()?,
            val_auc: field(6).parse()?,
            test_auc: field(7).parse()?,
        });
    }
    Ok(rows)
}

fn run_compare(args: CompareArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&args.reports)
        .with_context(|| format!("listing {}", args.reports.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no report_*.csv files in {}", args.reports.display());
    }

    let mut by_variant: Vec<VariantReport> = Vec::new();
    for path in &paths {
        for row in parse_report(path)? {
            match by_variant.iter_mut().find(|r| r.variant == row.variant) {
                Some(report) => report.rows.push(row),
                None => by_variant.push(VariantReport {
                    variant: row.variant,
                    rows: vec![row],
                }),
            }
        }
    }
    // Stable presentation order regardless of directory listing order.
    by_variant.sort_by_key(|r| {
        Variant::all()
            .iter()
            .position(|v| *v == r.variant)
            .unwrap_or(usize::MAX)
    });
    for report in &mut by_variant {
        report.rows.sort_by_key(|r| r.repeat);
    }

    let summary = summarize(&by_variant)?;
    // The summary is derived entirely from the report files, so inherit the
    // provenance line of the gridsearch run that produced them.
    let first = fs::read_to_string(&paths[0])
        .with_context(|| format!("reading {}", paths[0].display()))?;
    let note = first
        .lines()
        .next()
        .and_then(|line| line.strip_prefix("# "))
        .map(str::to_string)
        .unwrap_or_else(|| {
            let hash: Vec<&str> = by_variant.iter().map(|r| r.variant.tag()).collect();
            provenance(0, &config_hash(&hash))
        });
    let mut text = format!("# {note}\n");
    text.push_str("variant,mean_test_auc,std_test_auc,p_vs_crossatt\n");
    for row in &summary {
        let p = row
            .p_vs_crossatt
            .map(|p| p.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{},{},{p}",
            row.variant.tag(),
            row.mean_test_auc,
            row.std_test_auc
        );
    }
    write_text(&args.out.join("summary.csv"), &text)?;
    for row in &summary {
        info!(
            "{}: {:.4} ± {:.4}{}",
            row.variant,
            row.mean_test_auc,
            row.std_test_auc,
            row.p_vs_crossatt
                .map(|p| format!(" (p={p:.4} vs crossatt)"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export-attention

#[derive(Args)]
struct ExportAttentionArgs {
    /// checkpoint.json from a train run of a cross-attention variant.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clinical: PathBuf,
    #[arg(long)]
    lesions: PathBuf,
    /// Restrict the export to these patient ids (repeatable); default all.
    #[arg(long)]
    patient: Vec<String>,
    /// Output directory for attention.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run_export_attention(args: ExportAttentionArgs) -> Result<()> {
    let text = fs::read_to_string(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.checkpoint.display()))?;
    if !checkpoint.variant.has_cross_attention() {
        bail!(
            "checkpoint holds {}, which computes no cross-attention map",
            checkpoint.variant
        );
    }
    let cohort = load_cohort(&args.clinical, &args.lesions)?;
    if cohort.d_features != checkpoint.d_features || cohort.d_clinical != checkpoint.d_clinical {
        bail!(
            "cohort dims ({} imaging, {} clinical) do not match checkpoint ({}, {})",
            cohort.d_features,
            cohort.d_clinical,
            checkpoint.d_features,
            checkpoint.d_clinical
        );
    }
    let standardized =
        cohort.standardized(&checkpoint.clinical_scaler, &checkpoint.imaging_scaler)?;
    let samples = prepare_samples(&standardized, checkpoint.stats.as_ref())?;

    let keep: Vec<&Sample> = if args.patient.is_empty() {
        samples.iter().collect()
    } else {
        let mut keep = Vec::new();
        for id in &args.patient {
            match samples.iter().find(|s| s.patient_id == *id) {
                Some(sample) => keep.push(sample),
                None => bail!("patient {id:?} not present in the cohort"),
            }
        }
        keep
    };

    let mut text = format!(
        "# {}\n",
        provenance(checkpoint.seed, &checkpoint.config_hash)
    );
    text.push_str("patient_id,layer,lesion_index,clinical_index,attention\n");
    for sample in keep {
        let (_, maps) = predict_with_attention(checkpoint.variant, &checkpoint.params, sample)?;
        for (layer, a) in &maps {
            for lesion in 0..a.rows() {
                for clinical in 0..a.cols() {
                    let _ = writeln!(
                        text,
                        "{},{layer},{lesion},{clinical},{}",
                        sample.patient_id,
                        a.get(lesion, clinical)
                    );
                }
            }
        }
    }
    write_text(&args.out.join("attention.csv"), &text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// check-grad

#[derive(Args)]
struct CheckGradArgs {
    /// Lesions in the probe instance.
    #[arg(long, default_value_t = 3)]
    lesion_count: usize,
    /// Imaging feature dimension.
    #[arg(long, default_value_t = 5)]
    features: usize,
    /// Clinical vector dimension.
    #[arg(long, default_value_t = 4)]
    clinical_dims: usize,
    /// Hidden width (message-passing output dimension).
    #[arg(long, default_value_t = 6)]
    hidden: usize,
    #[arg(long, default_value_t = 20260815)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Relative-error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// One named gradient check: how it went and on which seed attempt.
pub struct CheckOutcome {
    pub name: String,
    pub attempt: u64,
    pub report: GradCheckReport,
}

/// A one-patient cohort on the unit scale of the fixed probe statistics
/// (sigma1 = sigma2 = 1), so edge weights stay informative.
fn random_probe_cohort(rng: &mut impl Rng, l: usize, d_f: usize, d_c: usize) -> Cohort {
    fn draw(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
    let clinical = draw(rng, d_c);
    let lesions = (0..l)
        .map(|j| Lesion {
            lesion_id: format!("L{j:02}"),
            centroid: [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            features: draw(rng, d_f),
        })
        .collect();
    Cohort {
        patients: vec![PatientRecord {
            patient_id: "probe".into(),
            label: 1,
            clinical,
            lesions,
        }],
        d_clinical: d_c,
        d_features: d_f,
    }
}

/// Draw seeds until the built graph is numerically friendly for central
/// differences: probability away from saturation, every ReLU/LeakyReLU
/// input and max-pool margin clear of its kink, and no structurally tiny
/// nonzero gradient entries that finite differences cannot resolve.
fn checked_instance<F>(
    label: &str,
    seed: u64,
    step: f64,
    tol: f64,
    mut build: F,
) -> Result<CheckOutcome>
where
    F: FnMut(u64) -> Result<(ExprGraph, crate::autodiff::NodeId)>,
{
    let (mut n_saturated, mut n_kink, mut n_tiny) = (0u32, 0u32, 0u32);
    for attempt in 0..300u64 {
        let (mut g, loss) = build(attempt)?;
        g.forward(loss)
            .with_context(|| format!("forward pass for {label}"))?;
        // The loss node is weighted BCE of a sigmoid output; recover the
        // probability from the graph via the sigmoid node feeding the loss.
        let prob_node = g.node(loss).inputs[0];
        let p = g
            .value(prob_node)
            .context("probability value")?
            .get(0, 0);
        if !(0.05..=0.95).contains(&p) {
            n_saturated += 1;
            continue;
        }
        if kink_margin(&g) < 5e-3 {
            n_kink += 1;
            continue;
        }
        let grads = g.backward(loss)?;
        let min_nonzero = grads
            .values()
            .flat_map(|m| m.data().iter())
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        if min_nonzero < 1e-6 {
            n_tiny += 1;
            continue;
        }
        let report = check_gradients(&mut g, loss, step, tol)?;
        return Ok(CheckOutcome {
            name: label.to_string(),
            attempt,
            report,
        });
    }
    bail!(
        "{label}: no numerically friendly draw found in 300 attempts (seed {seed}; \
         {n_saturated} saturated, {n_kink} kink-adjacent, {n_tiny} with unresolvable gradients)"
    );
}

/// Gradient-check every standalone layer and every full model variant.
pub fn check_all_gradients(
    l: usize,
    d_f: usize,
    d_c: usize,
    hidden: usize,
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    let stats = PopulationStats {
        sigma1: 1.0,
        sigma2: 1.0,
        gamma: 1.0,
    };

    // Standalone layers: a fixed readout turns the layer output into a
    // scalar loss; only the layer's own parameters are checked.
    let layer_specs: [(&str, Variant); 3] = [
        ("layer-gat", Variant::CrossAtt),
        ("layer-cross-attention", Variant::CrossAtt),
        ("layer-graphconv", Variant::AblationGraphConvCrossAtt),
    ];
    for (label, source_variant) in layer_specs {
        let outcome = checked_instance(label, seed, step, tol, |attempt| {
            let mut rng = stream(seed, &[Tag::Label("check-grad"), Tag::Label(label), Tag::Index(attempt)]);
            let params = init_params(source_variant, d_f, d_c, hidden, &mut rng);
            let cohort = random_probe_cohort(&mut rng, l, d_f, d_c);
            let samples = prepare_samples(&cohort, Some(&stats))?;
            let sample = &samples[0];
            let readout: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut g = ExprGraph::new();
            let weights = sample.weights.as_ref().expect("stats were provided");
            let w_col = g.input(Matrix::from_vec(weights.len(), 1, weights.data().to_vec()));
            let out = match label {
                "layer-gat" => {
                    let z = g.input(sample.features.clone());
                    let nodes = model::GatNodes {
                        theta_src: g.param_named(params.get("gat1.theta_src").clone(), "gat1.theta_src"),
                        theta_dst: g.param_named(params.get("gat1.theta_dst").clone(), "gat1.theta_dst"),
                        theta_edge: g.param_named(params.get("gat1.theta_edge").clone(), "gat1.theta_edge"),
                        att: g.param_named(params.get("gat1.att").clone(), "gat1.att"),
                    };
                    let (out, _alpha) = model::gat_layer(&mut g, z, l, w_col, &nodes);
                    out
                }
                "layer-cross-attention" => {
                    // Operates on hidden-dimension rows, as inside the model.
                    let z_data: Vec<f64> = {
                        let mut z_rng = stream(
                            seed,
                            &[Tag::Label("check-grad"), Tag::Label("ca-z"), Tag::Index(attempt)],
                        );
                        (0..l * hidden).map(|_| z_rng.gen_range(-1.0..1.0)).collect()
                    };
                    let z = g.input(Matrix::from_vec(l, hidden, z_data));
                    let c_row = g.input(sample.clinical_row.clone());
                    let c_col = g.input(sample.clinical_col.clone());
                    let nodes = model::CrossAttentionNodes {
                        w_q: g.param_named(params.get("ca1.w_q").clone(), "ca1.w_q"),
                        w_k_t: g.param_named(params.get("ca1.w_k_t").clone(), "ca1.w_k_t"),
                        w_v: g.param_named(params.get("ca1.w_v").clone(), "ca1.w_v"),
                    };
                    let (out, _a) = model::cross_attention(&mut g, z, c_row, c_col, &nodes, d_c);
                    out
                }
                _ => {
                    let z = g.input(sample.features.clone());
                    let w_mat = g.input(weights.clone());
                    let w1 = g.param_named(params.get("gc1.w1").clone(), "gc1.w1");
                    let w2 = g.param_named(params.get("gc1.w2").clone(), "gc1.w2");
                    crate::baselines::graphconv_layer(&mut g, z, w_mat, w1, w2)
                }
            };
            let pooled = g.row_max_pool(out);
            let readout = g.input(Matrix::from_vec(hidden, 1, readout));
            let score = g.matmul(pooled, readout);
            let prob = g.sigmoid(score);
            let loss = g.weighted_bce(prob, 1.0, 3.0);
            Ok((g, loss))
        })?;
        outcomes.push(outcome);
    }

    // Full variants, end to end through their training loss.
    for variant in Variant::all() {
        let label = format!("variant-{}", variant.tag());
        let outcome = checked_instance(&label, seed, step, tol, |attempt| {
            let mut rng = stream(
                seed,
                &[Tag::Label("check-grad"), Tag::Label(variant.tag()), Tag::Index(attempt)],
            );
            let params = init_params(variant, d_f, d_c, hidden, &mut rng);
            let cohort = random_probe_cohort(&mut rng, l, d_f, d_c);
            let samples = prepare_samples(&cohort, Some(&stats))?;
            let mut sample = samples.into_iter().next().expect("one patient");
            // These two variants pool rows that are near-tied at unit scale:
            // cross-attention outputs are scalar multiples of a shared value
            // vector, and concat fusion tiles one clinical row across lesions
            // while GAT mixing averages away the rest of the row variation.
            // Spreading the lesion features keeps the pool margins resolvable
            // by finite differences; the clinical scale is tuned per variant
            // because concat fusion feeds clinical values into the head
            // linearly (no softmax squashing) and saturates much sooner.
            let (feature_scale, clinical_scale) = match variant {
                Variant::CrossAtt => (6.0, 4.0),
                Variant::AblationConcatFusion => (6.0, 0.5),
                _ => (1.0, 1.0),
            };
            if feature_scale != 1.0 {
                sample.features = sample.features.scale(feature_scale);
            }
            if clinical_scale != 1.0 {
                sample.clinical_row = sample.clinical_row.scale(clinical_scale);
                sample.clinical_col = sample.clinical_col.scale(clinical_scale);
            }
            let mut g = ExprGraph::new();
            let (prob, _) = model::build_prob(
                &mut g,
                variant,
                &params,
                &sample,
                Mode::Eval,
                0.0,
                None,
                None,
            )?;
            let loss = g.weighted_bce(prob, 1.0, 3.0);
            Ok((g, loss))
        })?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn run_check_grad(args: CheckGradArgs) -> Result<()> {
    let outcomes = check_all_gradients(
        args.lesion_count,
        args.features,
        args.clinical_dims,
        args.hidden,
        args.seed,
        args.step,
        args.tol,
    )?;
    let mut failures = 0;
    for outcome in &outcomes {
        let verdict = if outcome.report.passed() {
            "PASS"
        } else {
            failures += 1;
            "FAIL"
        };
        println!(
            "{verdict} {:<28} max rel err {:.3e} (attempt {})",
            outcome.name,
            outcome.report.max_rel_error(),
            outcome.attempt
        );
        if !outcome.report.passed() {
            print!("{}", outcome.report);
        }
    }
    if failures > 0 {
        bail!("{failures} of {} gradient checks failed", outcomes.len());
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

