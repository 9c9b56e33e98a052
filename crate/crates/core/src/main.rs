use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use netsmpc::config::ExperimentConfig;
use netsmpc::governor::{check_trackable, write_governor_csv};
use netsmpc::moments::{closed_form_mu_g, CACHE_DIR_ENV};
use netsmpc::sim::{
    build_reference, cache_key, first_window, obtain_moments, run_ensemble, sweep_msb,
    write_ensemble_csv, write_sweep_csv, write_trace_csv, Analysis, Experiment, MomentSource,
    RunManifest, SweepChannel, DEFAULT_SWEEP,
};
use netsmpc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "netsmpc",
    version,
    about = "Stochastic MPC over lossy links: validation, moments, simulation, sweeps"
)]
struct Cli {
    /// More log output (repeat for debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment file (TOML); the bundled benchmark when omitted
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::benchmark()),
        }
    }
}

#[derive(Args)]
struct CacheArgs {
    /// Moment cache directory (overrides the environment)
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Compute moments in memory and leave the cache untouched
    #[arg(long, conflicts_with = "cache_dir")]
    no_cache: bool,
}

impl CacheArgs {
    fn source(&self) -> MomentSource {
        match (&self.cache_dir, self.no_cache) {
            (_, true) => MomentSource::Memory,
            (Some(d), false) => MomentSource::Cache(d.clone()),
            (None, false) => MomentSource::default_cache(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check plant assumptions, reachability, the drift level and trackability
    Validate {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Build (or refresh) the moment cache and print convergence diagnostics
    Moments {
        #[command(flatten)]
        config: ConfigArg,
        /// Monte Carlo samples for both channel and noise moments
        #[arg(long)]
        samples: Option<usize>,
        /// Cache directory to write into
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the closed-loop ensemble and write trace.csv, ensemble.csv and manifest.json
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write the first window problem (H, f, rows) as JSON
        #[arg(long)]
        dump_qp: Option<PathBuf>,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Empirical mean-square bound versus one link's success probability
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_parser = parse_channel)]
        vary: SweepChannel,
        /// Comma-separated probabilities in (0, 1]
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long, default_value_t = 200)]
        paths: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Run the reference governor alone and write governor.csv
    Governor {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "governor.csv")]
        out: PathBuf,
    },
}

fn parse_channel(s: &str) -> std::result::Result<SweepChannel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let sys = &cfg.system;
    println!(
        "state dim {}, input dim {}",
        sys.state_dim(),
        sys.input_dim()
    );
    let analysis = Analysis::of(cfg)?;
    let eig: Vec<String> = analysis
        .assumptions
        .eigenvalues
        .iter()
        .map(|l| format!("{:.4}{:+.4}i (|λ| = {:.6})", l.re, l.im, l.norm()))
        .collect();
    println!("eigenvalues: {}", eig.join(", "));
    println!("spectrum in closed unit disk: ok");
    println!("unit-circle eigenvalues semi-simple: ok");
    println!("controllable: ok");
    let split = &analysis.split;
    println!(
        "orthogonal part d_o = {}, stable part d_s = {}",
        split.d_o, split.d_s
    );
    println!("stable block A_s = {}", fmt_mat(&split.a_s));
    println!("split residual {:.3e}", split.residual);
    println!(
        "reachability index κ = {} (N_r = {}, N = {})",
        analysis.kappa, cfg.recalc, cfg.horizon
    );
    match analysis.zeta_max {
        Some(z) => println!(
            "ζ_max = {z:.6}; ζ = {:.6}, c = {:.6}",
            analysis.zeta, analysis.c
        ),
        None => println!("no orthogonal part: drift constraints inactive"),
    }
    let (r, gov) = build_reference(cfg, cfg.steps + cfg.horizon)?;
    let track = check_trackable(&gov, sys, &r, 1e-9);
    println!(
        "reference: dynamics residual {:.2e}, peak |uʳ| {:.4} (δ u_max = {:.4}), γᴳ {:.3e}",
        track.dynamics_residual,
        track.input_peak,
        cfg.delta * sys.u_max,
        track.gamma_measured
    );
    if !track.passed() {
        return Err(Error::Config(
            "reference is not trackable under the governor".into(),
        ));
    }
    println!("all checks passed");
    Ok(())
}

fn fmt_mat(m: &netsmpc::linalg::Mat) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let r: Vec<String> = m.row(i).iter().map(|v| format!("{v:.6}")).collect();
            format!("[{}]", r.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn moments(mut cfg: ExperimentConfig, samples: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    if let Some(s) = samples {
        if s == 0 {
            return Err(Error::Config("--samples must be positive".into()));
        }
        cfg.moments.channel_samples = s;
        cfg.moments.noise_samples = s;
    }
    let analysis = Analysis::of(&cfg)?;
    let source = out
        .map(MomentSource::Cache)
        .unwrap_or_else(MomentSource::default_cache);
    let (set, path) = obtain_moments(&cfg, &analysis, &source)?;
    if let Some(p) = path {
        println!("cache: {}", p.display());
    }
    let ch = &set.channel;
    let m = cfg.system.input_dim();
    let exact = closed_form_mu_g(cfg.channel.p_c, cfg.horizon, cfg.recalc, m);
    println!(
        "samples: channel {}, noise {}",
        cfg.moments.channel_samples, cfg.moments.noise_samples
    );
    println!(
        "{:>4} {:>12} {:>12} {:>10}",
        "i", "closed μ_G", "MC μ_G", "Δ/stderr"
    );
    for i in 0..exact.len() {
        let se = ch.mc_mu_g_stderr[i];
        let z = if se > 0.0 {
            (ch.mc_mu_g[i] - exact[i]) / se
        } else {
            0.0
        };
        println!(
            "{i:>4} {:>12.6} {:>12.6} {z:>10.3}",
            exact[i], ch.mc_mu_g[i]
        );
    }
    println!(
        "largest μ_G deviation: {:.3} standard errors",
        ch.mu_g_deviation()
    );
    println!(
        "noise moment table: h = 0..={}",
        set.table().len().saturating_sub(1)
    );
    Ok(())
}

struct SimulateOpts {
    paths: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
    dump_qp: Option<PathBuf>,
    source: MomentSource,
}

fn simulate(mut cfg: ExperimentConfig, opts: SimulateOpts) -> Result<()> {
    if let Some(p) = opts.paths {
        cfg.paths = p;
    }
    if let Some(s) = opts.steps {
        cfg.steps = s;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if cfg.paths == 0 || cfg.steps == 0 {
        return Err(Error::Config("paths and steps must be positive".into()));
    }
    ensure_dir(&opts.out)?;
    let exp = Experiment::new(cfg, &opts.source)?;
    let mut manifest = RunManifest::new(
        "simulate",
        &exp.config,
        &cache_key(&exp.config, &exp.analysis),
    );
    if let Some(p) = &opts.dump_qp {
        let qp = first_window(&exp, 0)?;
        std::fs::write(p, serde_json::to_string_pretty(&qp.dump())?)?;
        manifest.outputs.push(p.clone());
    }
    let (report, traces) = run_ensemble(&exp)?;
    let trace_path = opts.out.join("trace.csv");
    let ens_path = opts.out.join("ensemble.csv");
    write_trace_csv(&trace_path, &traces)?;
    write_ensemble_csv(&ens_path, &report)?;
    manifest.outputs.extend([trace_path, ens_path]);
    manifest.aborted_paths = report.aborted_paths;
    manifest.infeasible_windows = report.infeasible_windows;
    manifest.finish();
    manifest.write(&opts.out.join("manifest.json"))?;
    println!("paths {}, steps {}", report.paths, exp.config.steps);
    println!(
        "peak |uᵃ| = {} (u_max = {})",
        report.input_peak, exp.config.system.u_max
    );
    println!(
        "empirical MSB = {:.6} ± {:.6} at t = {}",
        report.msb.sup, report.msb.stderr, report.msb.argmax
    );
    println!(
        "windows {}, infeasible {}, aborted paths {}",
        report.windows, report.infeasible_windows, report.aborted_paths
    );
    Ok(())
}

fn sweep(
    cfg: ExperimentConfig,
    vary: SweepChannel,
    values: Vec<f64>,
    paths: usize,
    out: &Path,
    source: &MomentSource,
) -> Result<()> {
    if paths == 0 {
        return Err(Error::Config("--paths must be positive".into()));
    }
    ensure_dir(out)?;
    let analysis = Analysis::of(&cfg)?;
    let mut manifest = RunManifest::new("sweep", &cfg, &cache_key(&cfg, &analysis));
    let points = sweep_msb(&cfg, vary, &values, paths, source)?;
    let path = out.join("msb_sweep.csv");
    write_sweep_csv(&path, &points)?;
    manifest.outputs.push(path);
    manifest.infeasible_windows = points.iter().map(|p| p.infeasible_windows).sum();
    manifest.aborted_paths = points.iter().map(|p| p.aborted_paths).sum();
    manifest.finish();
    manifest.write(&out.join("manifest.json"))?;
    println!("{:>8} {:>12} {:>12}", "prob", "msb", "stderr");
    for p in &points {
        println!("{:>8} {:>12.6} {:>12.6}", p.prob, p.msb, p.stderr);
    }
    Ok(())
}

fn governor(cfg: ExperimentConfig, steps: Option<usize>, out: &Path) -> Result<()> {
    let len = steps.unwrap_or(cfg.steps);
    let (r, gov) = build_reference(&cfg, len)?;
    let track = check_trackable(&gov, &cfg.system, &r, 1e-9);
    write_governor_csv(out, &gov, &r)?;
    println!(
        "γᴳ = {:.6e}, peak |uʳ| = {:.4}, dynamics residual {:.2e}",
        track.gamma_measured, track.input_peak, track.dynamics_residual
    );
    if !track.passed() {
        return Err(Error::Config("governor output is not trackable".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { config } => validate(&config.load()?),
        Command::Moments {
            config,
            samples,
            out,
        } => moments(config.load()?, samples, out),
        Command::Simulate {
            config,
            paths,
            steps,
            seed,
            out,
            dump_qp,
            cache,
        } => simulate(
            config.load()?,
            SimulateOpts {
                paths,
                steps,
                seed,
                out,
                dump_qp,
                source: cache.source(),
            },
        ),
        Command::Sweep {
            config,
            vary,
            values,
            paths,
            out,
            cache,
        } => sweep(
            config.load()?,
            vary,
            values.unwrap_or_else(|| DEFAULT_SWEEP.to_vec()),
            paths,
            &out,
            &cache.source(),
        ),
        Command::Governor { config, steps, out } => governor(config.load()?, steps, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    log::debug!("cache directory variable: {CACHE_DIR_ENV}");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
