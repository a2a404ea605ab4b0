//! `prior-lab`: property verification, toy training runs, sampler audits and
//! K-means demos.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use prior_lab::clustering::{adjusted_rand_index, lloyd_restarts};
use prior_lab::distributions::PriorSpec;
use prior_lab::experiment::{run_toy_experiment, ToyExperimentConfig};
use prior_lab::losses::Regularizer;
use prior_lab::sampling::{empirical_marginal_audit, uniform_class_dataset, SamplerConfig, SamplerStrategy};
use prior_lab::synthdata::{gaussian_mixture, two_factor_dataset, SynthDataset};
use prior_lab::trainer::{train, SiameseState};
use prior_lab::verify::{verify_all, VerifyConfig};
use prior_lab::Error;

use manifest::ManifestBuilder;

const THREADS_ENV: &str = "PRIOR_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "prior-lab", version, about = "K-means views of self-supervised losses and prior matching")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for reports, tables and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Print the JSON report on stdout instead of a summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the randomized property suites.
    VerifyProps(VerifyArgs),
    /// Train a Siamese model on a dataset.
    Train(TrainArgs),
    /// Paired comparison of two priors over several seeds.
    ToyExperiment(ToyArgs),
    /// Lloyd's algorithm on a class-imbalanced Gaussian mixture.
    KmeansDemo(KmeansArgs),
    /// Empirical per-sample inclusion frequencies of a batch sampler.
    SampleAudit(AuditArgs),
    /// Generate a synthetic dataset.
    GenData(GenArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PriorKind {
    Uniform,
    PowerLaw,
    Empirical,
}

#[derive(Debug, Clone, Args, Serialize)]
struct PriorArgs {
    #[arg(long, value_enum, default_value_t = PriorKind::Uniform)]
    prior: PriorKind,
    /// Power-law exponent.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Comma-separated counts for the empirical prior.
    #[arg(long, value_delimiter = ',')]
    counts: Vec<u64>,
}

fn prior_spec(kind: PriorKind, tau: f64, counts: &[u64]) -> PriorSpec {
    match kind {
        PriorKind::Uniform => PriorSpec::Uniform,
        PriorKind::PowerLaw => PriorSpec::PowerLaw { tau },
        PriorKind::Empirical => PriorSpec::Empirical {
            counts: counts.to_vec(),
        },
    }
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    #[arg(long, default_value_t = 8)]
    max_n: usize,
    #[arg(long, default_value_t = 3)]
    max_k: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Objective {
    Pmsn,
    Msn,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = Objective::Pmsn)]
    objective: Objective,
    /// `builtin:two-factor`, or a dataset file (.csv or binary).
    #[arg(long, default_value = "builtin:two-factor")]
    dataset: String,
    /// Report path; defaults to `train-report.json` in the output directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ToyArgs {
    #[arg(long, value_enum, default_value_t = PriorKind::Uniform)]
    prior_a: PriorKind,
    #[arg(long, value_enum, default_value_t = PriorKind::PowerLaw)]
    prior_b: PriorKind,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Report path; defaults to `toy-experiment.json` in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct KmeansArgs {
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = PriorKind::PowerLaw)]
    distribution: PriorKind,
    #[arg(long, default_value_t = 1.5)]
    tau: f64,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StrategyKind {
    Uniform,
    Balanced,
    Imbalanced,
    InverseSqrt,
}

#[derive(Debug, Args, Serialize)]
struct AuditArgs {
    #[arg(long, value_enum)]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 2)]
    classes_per_batch: usize,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    #[arg(long, default_value_t = 100_000)]
    iterations: u64,
    #[arg(long, default_value_t = 100)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DataKind {
    TwoFactor,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DataFormat {
    Csv,
    Bin,
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    #[arg(long, value_enum, default_value_t = DataKind::TwoFactor)]
    kind: DataKind,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, value_enum, default_value_t = DataFormat::Csv)]
    format: DataFormat,
    /// Mixture only.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Mixture only.
    #[arg(long, default_value_t = 1.5)]
    tau: f64,
}

/// Command failure: verification failures exit 1, everything else 2.
enum Failure {
    Verification(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

struct Context {
    seed: u64,
    out_dir: PathBuf,
    json: bool,
}

impl Context {
    fn write_json<T: Serialize>(&self, path: &Path, value: &T, manifest: &mut ManifestBuilder) -> CmdResult {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(path, text.clone() + "\n")?;
        manifest.record(path);
        if self.json {
            println!("{text}");
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.json {
            println!("{}", line.as_ref());
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn verify_props(ctx: &Context, args: &VerifyArgs) -> CmdResult {
    let cfg = VerifyConfig {
        max_n: args.max_n,
        max_k: args.max_k,
        trials: args.trials,
        seed: ctx.seed,
    };
    let mut m = ManifestBuilder::start("verify-props", serde_json::to_value(cfg)?, ctx.seed);
    let report = verify_all(&cfg)?;
    ctx.write_json(&ctx.path("verify-props.json"), &report, &mut m)?;
    for suite in &report.suites {
        ctx.say(format!("{:<11} {}", suite.suite, if suite.passed { "PASS" } else { "FAIL" }));
        for c in &suite.checks {
            ctx.say(format!("  {:<44} worst {:.3e} (tol {:.1e})", c.name, c.worst, c.tolerance));
        }
    }
    m.finish(&ctx.out_dir)?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification("property verification failed".into()))
    }
}

fn load_dataset(spec: &str, cfg: &ToyExperimentConfig, seed: u64) -> Result<SynthDataset, Failure> {
    match spec {
        "builtin:two-factor" => Ok(two_factor_dataset(&cfg.primary, &cfg.secondary, cfg.num_samples, seed)?),
        s if s.starts_with("builtin:") => Err(Failure::Usage(format!("unknown builtin dataset {s}"))),
        path => Ok(SynthDataset::load(Path::new(path))?),
    }
}

/// Loss values under the prior-KL convention exceed the negative-entropy
/// ones by λ ln K for a uniform prior.
#[derive(Serialize)]
struct TrainOutput<'a> {
    loss_convention: &'static str,
    #[serde(flatten)]
    report: &'a prior_lab::trainer::TrainReport,
}

fn train_cmd(ctx: &Context, args: &TrainArgs) -> CmdResult {
    let mut cfg = ToyExperimentConfig::default();
    cfg.train.loss.prior = prior_spec(args.prior.prior, args.prior.tau, &args.prior.counts);
    if let Some(l) = args.lambda {
        cfg.train.loss.lambda = l;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    cfg.train.regularizer = match args.objective {
        Objective::Pmsn => Regularizer::PriorKl,
        Objective::Msn => Regularizer::NegEntropy,
    };
    cfg.train.seed = ctx.seed;
    let mut m = ManifestBuilder::start(
        "train",
        serde_json::json!({ "args": args, "resolved": cfg }),
        ctx.seed,
    );
    let dataset = load_dataset(&args.dataset, &cfg, ctx.seed)?;
    let mut state = SiameseState::new(cfg.train.clone(), dataset.dim())?;
    let sampler = SamplerConfig {
        strategy: SamplerStrategy::UniformRandom,
        batch_size: cfg.batch_size.min(dataset.len()),
        seed: ctx.seed,
    };
    let report = train(&dataset, &mut state, sampler)?;
    let convention = match args.objective {
        Objective::Pmsn => "prior_kl",
        Objective::Msn => "neg_entropy",
    };
    let output = TrainOutput {
        loss_convention: convention,
        report: &report,
    };
    let path = args.report.clone().unwrap_or_else(|| ctx.path("train-report.json"));
    ctx.write_json(&path, &output, &mut m)?;
    let mt = &report.metrics;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    ctx.say(format!("final loss ({convention}) {last:.6}"));
    ctx.say(format!("primary 5-NN purity {:.4}", mt.nn_purity_primary));
    if let Some(s) = mt.nn_purity_secondary {
        ctx.say(format!("secondary purity    {s:.4}"));
    }
    ctx.say(format!("KL(pbar || prior)   {:.6}", mt.kl_pbar_to_prior));
    m.finish(&ctx.out_dir)?;
    Ok(())
}

fn toy_experiment(ctx: &Context, args: &ToyArgs) -> CmdResult {
    let mut cfg = ToyExperimentConfig::default();
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let a = prior_spec(args.prior_a, args.tau, &[]);
    let b = prior_spec(args.prior_b, args.tau, &[]);
    if matches!(args.prior_a, PriorKind::Empirical) || matches!(args.prior_b, PriorKind::Empirical) {
        return Err(Failure::Usage("toy-experiment supports uniform and power-law priors".into()));
    }
    let mut m = ManifestBuilder::start("toy-experiment", serde_json::json!({ "args": args, "resolved": cfg }), ctx.seed);
    let report = run_toy_experiment(&a, &b, &args.seeds, &cfg)?;
    let path = args.output.clone().unwrap_or_else(|| ctx.path("toy-experiment.json"));
    ctx.write_json(&path, &report, &mut m)?;
    let table = ctx.path("toy-experiment.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| Failure::Usage(e.to_string()))?;
    w.write_record([
        "seed",
        "primary_a",
        "secondary_a",
        "kl_a",
        "primary_b",
        "secondary_b",
        "kl_b",
        "secondary_gain",
    ])
    .map_err(|e| Failure::Usage(e.to_string()))?;
    for r in &report.rows {
        let (ma, mb) = (&r.arm_a.metrics, &r.arm_b.metrics);
        let sec = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            r.seed.to_string(),
            ma.nn_purity_primary.to_string(),
            sec(ma.nn_purity_secondary),
            ma.kl_pbar_to_prior.to_string(),
            mb.nn_purity_primary.to_string(),
            sec(mb.nn_purity_secondary),
            mb.kl_pbar_to_prior.to_string(),
            r.secondary_gain.to_string(),
        ])
        .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    w.flush()?;
    m.record(&table);
    ctx.say(format!(
        "secondary purity gain: median {:.4}, wins {}/{}; primary change: median {:.4}",
        report.median_secondary_gain,
        report.secondary_wins,
        report.rows.len(),
        report.median_primary_change
    ));
    m.finish(&ctx.out_dir)?;
    Ok(())
}

#[derive(Serialize)]
struct KmeansSummary {
    adjusted_rand: f64,
    objective: f64,
    true_class_sizes: Vec<usize>,
    cluster_sizes: Vec<usize>,
}

fn kmeans_demo(ctx: &Context, args: &KmeansArgs) -> CmdResult {
    let mut m = ManifestBuilder::start("kmeans-demo", serde_json::to_value(args)?, ctx.seed);
    let dist = prior_spec(args.distribution, args.tau, &[]);
    let ds = gaussian_mixture(args.classes, &dist, args.n, args.dim, args.separation, args.noise, ctx.seed)?;
    let fit = lloyd_restarts(&ds.x, args.classes, args.restarts, ctx.seed, 300, 1e-10)?;
    let mut true_sizes = vec![0; args.classes];
    for &l in &ds.primary_labels {
        true_sizes[l] += 1;
    }
    let summary = KmeansSummary {
        adjusted_rand: adjusted_rand_index(fit.partition.assignment(), &ds.primary_labels)?,
        objective: fit.objective,
        true_class_sizes: true_sizes,
        cluster_sizes: fit.partition.cluster_sizes(),
    };
    let table = ctx.path("kmeans-demo.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    header.extend(["class".to_string(), "cluster".to_string()]);
    w.write_record(&header).map_err(|e| Failure::Usage(e.to_string()))?;
    for (i, row) in ds.x.outer_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(ds.primary_labels[i].to_string());
        rec.push(fit.partition.assignment()[i].to_string());
        w.write_record(&rec).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    w.flush()?;
    m.record(&table);
    ctx.write_json(&ctx.path("kmeans-demo.json"), &summary, &mut m)?;
    ctx.say(format!(
        "adjusted rand {:.4}; true sizes {:?}; cluster sizes {:?}",
        summary.adjusted_rand, summary.true_class_sizes, summary.cluster_sizes
    ));
    m.finish(&ctx.out_dir)?;
    Ok(())
}

fn sample_audit(ctx: &Context, args: &AuditArgs) -> CmdResult {
    let strategy = match args.strategy {
        StrategyKind::Uniform => SamplerStrategy::UniformRandom,
        StrategyKind::Balanced => SamplerStrategy::ClassBalanced {
            classes_per_batch: args.classes_per_batch,
        },
        StrategyKind::Imbalanced => SamplerStrategy::ClassImbalanced {
            classes_per_batch: args.classes_per_batch,
        },
        StrategyKind::InverseSqrt => SamplerStrategy::InverseSqrtFreq,
    };
    let cfg = SamplerConfig {
        strategy,
        batch_size: args.batch_size,
        seed: ctx.seed,
    };
    let mut m = ManifestBuilder::start("sample-audit", serde_json::to_value(args)?, ctx.seed);
    let data = uniform_class_dataset(args.classes, args.per_class);
    let report = empirical_marginal_audit(cfg, &data, args.iterations)?;
    let table = ctx.path("sample-audit.csv");
    let mut f = std::io::BufWriter::new(fs::File::create(&table)?);
    writeln!(f, "sample_id,class_id,frequency")?;
    for (l, freq) in data.iter().zip(&report.frequencies) {
        writeln!(f, "{},{},{}", l.index, l.class_id, freq)?;
    }
    f.flush()?;
    m.record(&table);
    ctx.write_json(&ctx.path("sample-audit.json"), &report, &mut m)?;
    match (report.expected, report.max_standard_errors) {
        (Some(p), Some(se)) => ctx.say(format!("closed-form marginal {p:.6}; max deviation {se:.2} standard errors")),
        _ => ctx.say("no closed-form marginal for this strategy"),
    }
    m.finish(&ctx.out_dir)?;
    Ok(())
}

fn gen_data(ctx: &Context, args: &GenArgs) -> CmdResult {
    let mut m = ManifestBuilder::start("gen-data", serde_json::to_value(args)?, ctx.seed);
    let cfg = ToyExperimentConfig::default();
    let ds = match args.kind {
        DataKind::TwoFactor => two_factor_dataset(&cfg.primary, &cfg.secondary, args.n, ctx.seed)?,
        DataKind::Mixture => gaussian_mixture(
            args.classes,
            &PriorSpec::PowerLaw { tau: args.tau },
            args.n,
            2,
            4.0,
            1.0,
            ctx.seed,
        )?,
    };
    let name = match args.format {
        DataFormat::Csv => "dataset.csv",
        DataFormat::Bin => "dataset.bin",
    };
    let path = ctx.path(name);
    ds.save(&path)?;
    m.record(&path);
    ctx.say(format!("wrote {} rows x {} features to {}", ds.len(), ds.dim(), path.display()));
    m.finish(&ctx.out_dir)?;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    fs::create_dir_all(&cli.out_dir)?;
    let ctx = Context {
        seed: cli.seed,
        out_dir: cli.out_dir,
        json: cli.json,
    };
    match &cli.command {
        Command::VerifyProps(a) => verify_props(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::ToyExperiment(a) => toy_experiment(&ctx, a),
        Command::KmeansDemo(a) => kmeans_demo(&ctx, a),
        Command::SampleAudit(a) => sample_audit(&ctx, a),
        Command::GenData(a) => gen_data(&ctx, a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on malformed arguments.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("prior-lab: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("prior-lab: error: {msg}");
            ExitCode::from(2)
        }
    }
}
