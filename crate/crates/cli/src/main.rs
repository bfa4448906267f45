//! `pace`: synthesize data, fit concept models, infer explanations and
//! evaluate them from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use pace_core::inference::log_likelihoods;
use pace_core::io::{load_dataset, load_model, save_dataset, save_ground_truth, save_model, write_array_f64, SavedModel};
use pace_core::learning::fit;
use pace_core::metrics::report_from_inference;
use pace_core::synth::{make_color_dataset, sample_generative, separated_bank, ColorOptions, PerturbOptions};
use pace_core::{AttentionMode, CovarianceKind, HeadParams, PaceError, TrainConfig};

#[derive(Parser)]
#[command(name = "pace", version, about = "Probabilistic concept explanations for patch embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its ground-truth sidecar.
    Synth(SynthArgs),
    /// Train a concept model and print the ELBO of every epoch.
    Fit(FitArgs),
    /// Write per-image θ and per-patch φ for every image.
    Infer(InferArgs),
    /// Write the metrics report of a model on a dataset.
    Eval(EvalArgs),
    /// Write the most representative patches of every concept.
    ExportConcepts(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Generative,
    Color,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attention {
    SumToJ,
    Raw,
    Uniform,
}

impl From<Attention> for AttentionMode {
    fn from(a: Attention) -> Self {
        match a {
            Attention::SumToJ => AttentionMode::SumToJ,
            Attention::Raw => AttentionMode::Raw,
            Attention::Uniform => AttentionMode::Uniform,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Covariance {
    Full,
    Diagonal,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Density,
    Euclidean,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    out: PathBuf,
    /// Number of images [default: 400 generative, 2000 color]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    m: Option<u64>,
    /// Patches per image [default: 32 generative, 16 color]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    j: Option<u64>,
    /// Embedding dimension [default: 8 generative, 16 color]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    d: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of true concepts (generative only).
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    concepts: u64,
    /// Number of classes (generative only).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    classes: u64,
    /// Minimum distance between true means in units of σ (generative only).
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// Embedding noise of the perturbed twins in units of σ.
    #[arg(long, default_value_t = 0.1)]
    perturb_noise: f64,
}

#[derive(clap::Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Attention::SumToJ)]
    attention: Attention,
    #[arg(long, value_enum, default_value_t = Covariance::Full)]
    covariance: Covariance,
    /// Train the concept bank alone, without the classifier and stability heads.
    #[arg(long)]
    no_heads: bool,
    /// Keep head parameters inside their box constraints.
    #[arg(long)]
    constrain: bool,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    top: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Density)]
    metric: Metric,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(PaceError),
}

impl From<PaceError> for Failure {
    fn from(e: PaceError) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(PaceError::Config(_)) => 1,
            Failure::Core(
                PaceError::Singular { .. } | PaceError::DeadConcept(_) | PaceError::Numerical { .. },
            ) => 3,
            Failure::Core(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, source: std::io::Error) -> Failure {
    Failure::Core(PaceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_usize(x: u64) -> usize {
    usize::try_from(x).unwrap_or(usize::MAX)
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    if !(args.perturb_noise >= 0.0) {
        return Err(Failure::Usage("--perturb-noise must be non-negative".into()));
    }
    let (dataset, truth) = match args.kind {
        Kind::Generative => {
            let m = args.m.map_or(400, to_usize);
            let j = args.j.map_or(32, to_usize);
            let d = args.d.map_or(8, to_usize);
            let k = to_usize(args.concepts);
            let sigma = 1.0;
            let bank = separated_bank(k, d, sigma, args.separation, 0.5, &mut rng)?;
            let head = HeadParams {
                eta: Array2::from_shape_fn((to_usize(args.classes), k), |_| rng.random_range(-3.0..3.0)),
                beta: Array1::zeros(k),
            };
            let perturb = PerturbOptions {
                noise_sigma: args.perturb_noise * sigma,
                attention_jitter: 0.1,
            };
            sample_generative(&bank, &head, m, j, Some(perturb), &mut rng)?
        }
        Kind::Color => {
            let mut opts = ColorOptions::default();
            if let Some(j) = args.j {
                opts.j = to_usize(j);
            }
            if let Some(d) = args.d {
                opts.d = to_usize(d);
            }
            opts.perturbation.noise_sigma = args.perturb_noise * opts.noise;
            make_color_dataset(args.m.map_or(2000, to_usize), opts, &mut rng)?
        }
    };
    save_dataset(&dataset, &args.out)?;
    save_ground_truth(&truth, &args.out.join("ground_truth.json"))?;
    info!("wrote {} images to {}", dataset.len(), args.out.display());
    Ok(())
}

fn fit_command(args: FitArgs) -> CliResult<()> {
    let dataset = load_dataset(&args.data)?;
    let config = TrainConfig {
        k: to_usize(args.k),
        epochs: to_usize(args.epochs),
        attention: args.attention.into(),
        covariance: match args.covariance {
            Covariance::Full => CovarianceKind::Full,
            Covariance::Diagonal => CovarianceKind::Diagonal,
        },
        use_heads: !args.no_heads,
        constraint_mode: args.constrain,
        rng_seed: args.seed,
        ..TrainConfig::default()
    };
    let fitted = fit(&dataset, &config)?;
    for stats in &fitted.trace {
        println!("epoch={} elbo={}", stats.epoch + 1, stats.elbo());
    }
    let model = SavedModel {
        bank: fitted.bank,
        head: fitted.head,
        config,
    };
    save_model(&model, &args.out)?;
    Ok(())
}

/// `path` with its extension replaced by `suffix`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn infer_command(args: InferArgs) -> CliResult<()> {
    let dataset = load_dataset(&args.data)?;
    let model = load_model(&args.model)?;
    let inferred = pace_core::metrics::infer_dataset(&dataset, &model.bank, &model.head, &model.config)?;
    let k = model.bank.num_concepts();
    let m = dataset.len();
    let j = dataset.num_patches().unwrap_or(0);

    let mut theta = Vec::with_capacity(m * k);
    let mut phi = Vec::with_capacity(m * j * k);
    for inf in &inferred.originals {
        theta.extend(inf.theta.iter());
        phi.extend(inf.state.phi.iter());
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    let theta_path = sibling(&args.out, ".theta.bin");
    let phi_path = sibling(&args.out, ".phi.bin");
    write_array_f64(&theta_path, &[m, k], &theta)?;
    write_array_f64(&phi_path, &[m, j, k], &phi)?;
    let mut files = json!({ "theta": file_name(&theta_path), "phi": file_name(&phi_path) });

    let twins: Vec<_> = inferred.twins.iter().flatten().collect();
    if twins.len() == m && m > 0 {
        let twin_theta: Vec<f64> = twins.iter().flat_map(|t| t.theta.iter().copied()).collect();
        let path = sibling(&args.out, ".perturbed_theta.bin");
        write_array_f64(&path, &[m, k], &twin_theta)?;
        files["perturbed_theta"] = json!(file_name(&path));
    }

    let images: Vec<_> = dataset
        .records
        .iter()
        .zip(&dataset.splits)
        .zip(&inferred.originals)
        .map(|((r, split), inf)| {
            json!({
                "id": r.id,
                "split": split,
                "label": r.predicted_label,
                "theta": inf.theta.to_vec(),
                "converged": inf.converged,
            })
        })
        .collect();
    let report = json!({ "K": k, "J": j, "M": m, "files": files, "images": images });
    write_text(&args.out, &serde_json::to_string_pretty(&report).expect("json serializes"))
}

fn eval_command(args: EvalArgs) -> CliResult<()> {
    let dataset = load_dataset(&args.data)?;
    let model = load_model(&args.model)?;
    let inferred = pace_core::metrics::infer_dataset(&dataset, &model.bank, &model.head, &model.config)?;
    let report = report_from_inference(&dataset, &inferred, model.bank.num_concepts())?;
    info!(
        "faithfulness {:.3}, stability {:?}, sparsity {:.3}",
        report.faithfulness, report.stability, report.sparsity
    );
    write_text(&args.out, &serde_json::to_string_pretty(&report).expect("json serializes"))
}

struct Candidate {
    score: f64,
    image: usize,
    patch: usize,
}

fn export_command(args: ExportArgs) -> CliResult<()> {
    let dataset = load_dataset(&args.data)?;
    let model = load_model(&args.model)?;
    let k = model.bank.num_concepts();
    if dataset.dim().is_some_and(|d| d != model.bank.dim()) {
        return Err(PaceError::Shape(format!(
            "data has d = {}, model has d = {}",
            dataset.dim().unwrap_or(0),
            model.bank.dim()
        ))
        .into());
    }
    let factored = model.bank.factorize()?;
    let mut per_concept: Vec<Vec<Candidate>> = (0..k).map(|_| Vec::new()).collect();
    for (m, r) in dataset.records.iter().enumerate() {
        let scores = match args.metric {
            Metric::Density => log_likelihoods(r, &factored)?,
            Metric::Euclidean => Array2::from_shape_fn((r.num_patches(), k), |(j, kk)| {
                let diff = &r.embeddings.row(j) - &model.bank.means.row(kk);
                -diff.dot(&diff).sqrt()
            }),
        };
        for ((j, kk), &score) in scores.indexed_iter() {
            per_concept[kk].push(Candidate { score, image: m, patch: j });
        }
    }
    let top = to_usize(args.top);
    let concepts: Vec<_> = per_concept
        .into_iter()
        .enumerate()
        .map(|(kk, mut cands)| {
            cands.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.image.cmp(&b.image))
                    .then(a.patch.cmp(&b.patch))
            });
            cands.truncate(top);
            let patches: Vec<_> = cands
                .iter()
                .map(|c| {
                    json!({
                        "image": dataset.records[c.image].id,
                        "image_index": c.image,
                        "patch": c.patch,
                        "score": c.score,
                    })
                })
                .collect();
            json!({
                "concept": kk,
                "mean": model.bank.means.row(kk).to_vec(),
                "patches": patches,
            })
        })
        .collect();
    let metric = match args.metric {
        Metric::Density => "density",
        Metric::Euclidean => "euclidean",
    };
    let out = json!({ "metric": metric, "top": top, "concepts": concepts });
    write_text(&args.out, &serde_json::to_string_pretty(&out).expect("json serializes"))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit_command(a),
        Command::Infer(a) => infer_command(a),
        Command::Eval(a) => eval_command(a),
        Command::ExportConcepts(a) => export_command(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
