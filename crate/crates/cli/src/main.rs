use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use otseg_core::eval::{run_evaluation, write_report, EvalManifest, EvalOptions, ScoreCache};
use otseg_core::otce::{repetition_coupling, ReplacementPolicy, SamplingStrategy};
use otseg_core::synthetic::{generate_manifest, GenerationPlan};
use otseg_core::{
    flatten_to_pixelset, load_task_export, npy, otce_sampled, Error, Execution, Preprocess, Result,
    SamplingConfig, SinkhornConfig,
};

#[derive(Parser)]
#[command(
    name = "otseg",
    version,
    about = "Transferability scores for semantic segmentation"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score one source/target export pair.
    Score(ScoreArgs),
    /// Correlate scores with measured accuracies from a manifest.
    Eval(EvalArgs),
    /// Generate synthetic exports and a manifest from a plan file.
    Gen(GenArgs),
    /// Summarize a task export.
    Info(InfoArgs),
}

#[derive(Args)]
struct SettingsArgs {
    /// JSON file with default settings; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pixels sampled per repetition.
    #[arg(long = "n")]
    pixels: Option<usize>,
    /// Repetitions to average.
    #[arg(long = "k")]
    repetitions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Iterate on exp(-C/eps) directly instead of in the log domain.
    #[arg(long)]
    kernel_domain: bool,
    /// Use all pixels when fewer than N are available instead of failing.
    #[arg(long)]
    clamp: bool,
    /// Spread each sample evenly over classes.
    #[arg(long)]
    class_balanced: bool,
    /// Standardize channels with statistics pooled over both tasks.
    #[arg(long)]
    standardize: bool,
    /// Divide costs by their maximum before solving.
    #[arg(long)]
    normalize_cost: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Write the score here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Debug: write the first repetition's plan as an f8 .npy file.
    #[arg(long, hide = true)]
    dump_coupling: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    manifest: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Output directory for report.json and scores.csv.
    #[arg(long, default_value = "otseg-report")]
    out: PathBuf,
    /// Also write one SVG scatter per target.
    #[arg(long)]
    plots: bool,
    /// Ignore OTSEG_CACHE_DIR.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Generation plan (JSON).
    spec: PathBuf,
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
    /// Replace every seed in the plan with ones derived from this.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InfoArgs {
    export: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Settings accepted by `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    n: Option<usize>,
    k: Option<usize>,
    seed: Option<u64>,
    epsilon: Option<f64>,
    max_iterations: Option<usize>,
    tolerance: Option<f64>,
    log_domain: Option<bool>,
    replacement_policy: Option<ReplacementPolicy>,
    sampling: Option<SamplingStrategy>,
    standardize_features: Option<bool>,
    normalize_cost: Option<bool>,
}

struct Settings {
    sampling: SamplingConfig,
    solver: SinkhornConfig,
    preprocess: Preprocess,
}

impl SettingsArgs {
    fn resolve(&self) -> Result<Settings> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::json(path.display().to_string(), e))?
            }
            None => FileConfig::default(),
        };
        let sd = SamplingConfig::default();
        let od = SinkhornConfig::default();
        let flag = |set: bool, from_file: Option<bool>| set || from_file.unwrap_or(false);
        let sampling = SamplingConfig {
            pixels_per_sample: self.pixels.or(file.n).unwrap_or(sd.pixels_per_sample),
            repetitions: self.repetitions.or(file.k).unwrap_or(sd.repetitions),
            seed: self.seed.or(file.seed).unwrap_or(sd.seed),
            replacement_policy: if self.clamp {
                ReplacementPolicy::Clamp
            } else {
                file.replacement_policy.unwrap_or(sd.replacement_policy)
            },
            strategy: if self.class_balanced {
                SamplingStrategy::ClassBalanced
            } else {
                file.sampling.unwrap_or(sd.strategy)
            },
            execution: Execution::Parallel,
        };
        let solver = SinkhornConfig {
            epsilon: self.epsilon.or(file.epsilon).unwrap_or(od.epsilon),
            max_iterations: self
                .max_iterations
                .or(file.max_iterations)
                .unwrap_or(od.max_iterations),
            tolerance: self.tolerance.or(file.tolerance).unwrap_or(od.tolerance),
            log_domain: !self.kernel_domain && file.log_domain.unwrap_or(od.log_domain),
            execution: Execution::Parallel,
        };
        let preprocess = Preprocess {
            standardize_features: flag(self.standardize, file.standardize_features),
            normalize_cost: flag(self.normalize_cost, file.normalize_cost),
        };
        sampling.validate()?;
        solver.validate()?;
        Ok(Settings {
            sampling,
            solver,
            preprocess,
        })
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let settings = args.settings.resolve()?;
    let source = flatten_to_pixelset(&load_task_export(&args.src)?)?;
    let target = flatten_to_pixelset(&load_task_export(&args.tgt)?)?;
    let score = otce_sampled(
        &source,
        &target,
        &settings.sampling,
        &settings.solver,
        settings.preprocess,
    )?;
    if let Some(path) = &args.dump_coupling {
        let coupling = repetition_coupling(
            &source,
            &target,
            &settings.sampling,
            &settings.solver,
            settings.preprocess,
            0,
        )?;
        let plan = coupling.values.as_standard_layout();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        npy::write_f64(
            &mut f,
            plan.shape(),
            plan.as_slice().expect("standard layout"),
        )
        .map_err(|e| Error::io(path, e))?;
    }
    write_output(args.out.as_deref(), &(score.to_json() + "\n"))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let settings = args.settings.resolve()?;
    let manifest = EvalManifest::load(&args.manifest)?;
    let cache = if args.no_cache {
        None
    } else {
        ScoreCache::from_env()
    };
    let options = EvalOptions {
        cache,
        preprocess: settings.preprocess,
    };
    let report = run_evaluation(&manifest, &settings.sampling, &settings.solver, &options)?;
    let files = write_report(&report, &args.out, args.plots)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |r| format!("{r:.4}"));
    for (target, corr) in &report.per_target {
        println!(
            "{target}: pearson {} spearman {} over {} sources",
            fmt(corr.pearson),
            fmt(corr.spearman),
            corr.n_pairs
        );
    }
    println!(
        "pooled: pearson {} spearman {}; {} points, {} failures",
        fmt(report.pearson),
        fmt(report.spearman),
        report.points.len(),
        report.failures.len()
    );
    println!("report written to {}", files.json.display());
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut plan = GenerationPlan::load(&args.spec)?;
    if let Some(seed) = args.seed {
        plan.reseed(seed);
    }
    let manifest = generate_manifest(&plan, &args.out)?;
    println!(
        "wrote {} exports and {}",
        manifest.records.len() * 2,
        args.out.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_info(args: &InfoArgs) -> Result<()> {
    let export = load_task_export(&args.export)?;
    let (n, h, w, c) = export.dims();
    let histogram = export.label_histogram();
    let model_id = otseg_core::container::read_model_id(&args.export);
    if args.json {
        let summary = serde_json::json!({
            "path": args.export,
            "n": n,
            "H": h,
            "W": w,
            "C": c,
            "class_count": export.class_count,
            "ignore_labels": export.ignore_labels,
            "model_id": model_id,
            "class_histogram": histogram.iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect::<serde_json::Map<_, _>>(),
        });
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        return write_output(None, &(text + "\n"));
    }
    println!("{}", args.export.display());
    println!("  n={n} H={h} W={w} C={c}");
    println!("  classes: {}", export.class_count);
    let ignore: Vec<String> = export.ignore_labels.iter().map(u16::to_string).collect();
    println!("  ignore labels: [{}]", ignore.join(", "));
    if let Some(id) = model_id {
        println!("  model: {id}");
    }
    println!("  label histogram:");
    for (label, count) in &histogram {
        let note = if export.ignore_labels.contains(label) {
            " (ignored)"
        } else {
            ""
        };
        println!("    {label:>5}: {count}{note}");
    }
    Ok(())
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Info(a) => cmd_info(a),
    }
}

#[cfg(feature = "parallel")]
fn run(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        builder = builder.num_threads(jobs);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(&cli.command))
}

#[cfg(not(feature = "parallel"))]
fn run(cli: &Cli) -> Result<()> {
    if cli.jobs.is_some_and(|j| j > 1) {
        log::warn!("built without the parallel feature; --jobs is ignored");
    }
    dispatch(&cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.jobs == Some(0) {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_like() { 3 } else { 2 })
        }
    }
}
