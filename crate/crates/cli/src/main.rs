use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fmpre::heart::{heart_source, load_heart_dataset, HeartOptions, MissingPolicy, SlopeEncoding};
use fmpre::pipeline::{best_by_bic, bic, bic_scan, fit_method, PipelineOptions};
use fmpre::sem::MixtureSpec;
use fmpre::simulation::{Preset, SimulationDesign};
use fmpre::study::{run_simulation_study, run_study, StudyConfig, StudyReport, StudySettings};
use fmpre::table::{load_table, TableSpec};
use fmpre::Method;

mod output;

/// Largest tolerated share of failed replicates for any method.
const MAX_FAILURE_RATE: f64 = 0.5;

#[derive(Parser)]
#[command(name = "fmpre", version, about = "Mixtures of Poisson regressions with experts: ML, ridge and Liu-type fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model (or scan J by BIC) on a CSV file.
    Fit(FitArgs),
    /// Monte-Carlo study on a preset design.
    Simulate(SimulateArgs),
    /// Monte-Carlo study described by a TOML file.
    Replicate(ReplicateArgs),
    /// Subsampling study on the Cleveland heart data.
    Heart(HeartArgs),
}

#[derive(Args, Clone)]
struct ChainArgs {
    /// Independent chains per fit.
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
}

impl ChainArgs {
    fn apply(&self, opts: &mut PipelineOptions) {
        if let Some(r) = self.restarts {
            opts.sem.n_restarts = r;
        }
        if let Some(m) = self.max_iters {
            opts.sem.max_iters = m;
        }
        if let Some(b) = self.burn_in {
            opts.sem.burn_in = b;
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ml,
    Ridge,
    Lt,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ml => Method::Ml,
            MethodArg::Ridge => Method::Ridge,
            MethodArg::Lt => Method::LiuType,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    response: String,
    /// Expert regressors, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    x: Vec<String>,
    /// Gating concomitants, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    omega: Vec<String>,
    #[arg(long, value_enum, default_value = "lt")]
    method: MethodArg,
    #[arg(long, default_value_t = 2)]
    components: usize,
    /// Gating reference class (0-based); defaults to the last class.
    #[arg(long)]
    reference: Option<usize>,
    /// Fit J = 1..=J_MAX and report the BIC of each.
    #[arg(long, value_name = "J_MAX")]
    bic_scan: Option<usize>,
    /// Do not prepend an intercept column.
    #[arg(long)]
    no_intercept: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "fmpre-out")]
    out: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
}

#[derive(Args, Clone)]
struct StudyArgs {
    #[arg(long)]
    replicates: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "fmpre-out")]
    out: PathBuf,
    /// Skip the SVG box plots.
    #[arg(long)]
    no_plots: bool,
    #[command(flatten)]
    chain: ChainArgs,
}

impl StudyArgs {
    fn apply(&self, settings: &mut StudySettings) {
        if let Some(r) = self.replicates {
            settings.replicates = r;
        }
        if let Some(j) = self.jobs {
            settings.jobs = j;
        }
        if let Some(s) = self.seed {
            settings.master_seed = s;
        }
        self.chain.apply(&mut settings.pipeline);
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Study1,
    Study2,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "study1")]
    preset: PresetArg,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    study: StudyArgs,
}

#[derive(Args)]
struct ReplicateArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    study: StudyArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum MissingArg {
    CompleteCase,
    SelectedColumns,
}

#[derive(Clone, Copy, ValueEnum)]
enum SlopeArg {
    Numeric,
    Dummy,
}

#[derive(Args)]
struct HeartArgs {
    /// File in the UCI processed.cleveland.data layout.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    train_n: usize,
    #[arg(long, default_value_t = 100)]
    test_n: usize,
    #[arg(long, value_enum, default_value = "complete-case")]
    missing: MissingArg,
    #[arg(long, value_enum, default_value = "numeric")]
    slope: SlopeArg,
    /// Largest J of the BIC scan on the full data.
    #[arg(long, default_value_t = 3)]
    bic_max: usize,
    #[command(flatten)]
    study: StudyArgs,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Replicate(args) => cmd_replicate(args),
        Command::Heart(args) => cmd_heart(args),
    }
}

fn cmd_fit(args: FitArgs) -> Result<ExitCode> {
    let spec = TableSpec {
        response: args.response.clone(),
        x: args.x.clone(),
        omega: args.omega.clone(),
        intercept: !args.no_intercept,
    };
    let data = load_table(&args.data, &spec).with_context(|| format!("reading {}", args.data.display()))?;
    let mut opts = PipelineOptions::default();
    opts.sem.rng_seed = args.seed;
    args.chain.apply(&mut opts);
    ensure_dir(&args.out)?;
    let method = Method::from(args.method);
    if let Some(j_max) = args.bic_scan {
        let entries = bic_scan(&data, j_max, method, &opts)?;
        output::write_json(&args.out.join("bic.json"), &entries)?;
        for e in &entries {
            match e.bic {
                Some(b) => println!("J={} loglik={:.4} BIC={b:.4}", e.components, e.loglik.unwrap_or(f64::NAN)),
                None => println!("J={} failed: {}", e.components, e.error.as_deref().unwrap_or("")),
            }
        }
        match best_by_bic(&entries) {
            Some(j) => println!("BIC selects J={j}"),
            None => bail!("every fit of the BIC scan failed"),
        }
        return Ok(ExitCode::SUCCESS);
    }
    let reference = args.reference.unwrap_or(args.components.saturating_sub(1));
    let mixture = MixtureSpec::new(args.components, reference)?;
    let fit = match fit_method(&data, &mixture, method, &opts) {
        Ok(fit) => fit,
        Err(err) => {
            std::fs::write(args.out.join("diagnostics.txt"), format!("{err}\n"))?;
            bail!("{} fit failed: {err}", method.label());
        }
    };
    let criterion = bic(fit.loglik, args.components, data.p(), data.q(), data.n());
    output::write_json(&args.out.join("fit.json"), &output::FitReport::new(&fit, Some(criterion)))?;
    println!(
        "{} fit: n={} loglik={:.4} BIC={criterion:.4} iterations={} converged={}",
        method.label(),
        data.n(),
        fit.loglik,
        fit.iterations_run,
        fit.converged
    );
    Ok(ExitCode::SUCCESS)
}

fn finish_study(report: &StudyReport, args: &StudyArgs) -> Result<ExitCode> {
    output::write_study(&args.out, report, !args.no_plots)?;
    output::print_summaries(report);
    let rate = report.worst_failure_rate();
    if rate > MAX_FAILURE_RATE {
        eprintln!("{:.0}% of replicates failed for at least one method:", rate * 100.0);
        for m in Method::ALL {
            eprintln!("  {}: {} failed", m.label(), report.failures(m));
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let mut design = SimulationDesign::preset(match args.preset {
        PresetArg::Study1 => Preset::Study1,
        PresetArg::Study2 => Preset::Study2,
    });
    if let Some(phi) = args.phi {
        design.phi = phi;
    }
    if let Some(rho) = args.rho {
        design.rho = rho;
    }
    if let Some(n) = args.n {
        design.n = n;
    }
    let mut settings = StudySettings::default();
    args.study.apply(&mut settings);
    let report = run_simulation_study(&design, &settings)?;
    finish_study(&report, &args.study)
}

fn cmd_replicate(args: ReplicateArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = StudyConfig::from_toml(&text)?;
    args.study.apply(&mut config.study);
    let report = run_simulation_study(&config.design, &config.study)?;
    finish_study(&report, &args.study)
}

fn cmd_heart(args: HeartArgs) -> Result<ExitCode> {
    let opts = HeartOptions {
        missing: match args.missing {
            MissingArg::CompleteCase => MissingPolicy::CompleteCase,
            MissingArg::SelectedColumns => MissingPolicy::SelectedColumns,
        },
        slope: match args.slope {
            SlopeArg::Numeric => SlopeEncoding::Numeric,
            SlopeArg::Dummy => SlopeEncoding::Dummy,
        },
    };
    let heart = load_heart_dataset(&args.data, opts).with_context(|| format!("reading {}", args.data.display()))?;
    println!(
        "heart data: {} of {} rows kept, cor(ST depression, ST slope) = {:.4}",
        heart.n(),
        heart.rows_read,
        heart.covariate_correlation()
    );
    let mut settings = StudySettings::default();
    args.study.apply(&mut settings);
    ensure_dir(&args.study.out)?;
    let scan = bic_scan(&heart.dataset, args.bic_max, Method::Ml, &settings.pipeline)?;
    output::write_json(&args.study.out.join("bic.json"), &scan)?;
    if let Some(j) = best_by_bic(&scan) {
        println!("BIC selects J={j}");
    }
    let (source, truth) = heart_source(&heart.dataset, args.train_n, args.test_n, &settings.pipeline)?;
    output::write_json(&args.study.out.join("truth.json"), &output::FitReport::new(&truth, None))?;
    let report = run_study(&source, &settings)?;
    finish_study(&report, &args.study)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
