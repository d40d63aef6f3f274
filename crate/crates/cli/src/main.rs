use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mobility::calibration::read_params_tsv;
use mobility::model::{ModelParams, RoleMaps};
use mobility::pipeline::{run_pipeline, PipelineConfig, Stage};
use mobility::synth::{default_maps, generate_synthetic, ProxyLoadings, SynthSpec};

#[derive(Parser)]
#[command(
    name = "mobility",
    version,
    about = "Intergenerational mobility estimation and model calibration"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MOBILITY_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank-rank and IGE estimates per cohort, plus trends.
    Estimate(RunArgs),
    /// Lubotsky-Wittenberg proxy-combination estimates.
    Lw(RunArgs),
    /// Fit the structural model cohort by cohort.
    Calibrate(RunArgs),
    /// Counterfactual decomposition of the β̃ trend.
    Decompose(RunArgs),
    /// All stages selected in the config, in order.
    Pipeline(RunArgs),
    /// Write synthetic microdata with a known generating process.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Microdata CSV (overrides `input.microdata`).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
    /// Child cohorts as START:END.
    #[arg(long, value_parser = parse_range)]
    cohorts: Option<[i32; 2]>,
    #[arg(long)]
    seed: Option<u64>,
    /// Families simulated per cohort (overrides `calibrate.n_sim`).
    #[arg(long)]
    n_sim: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Planted parameters psi,kappa,alpha,phi_m,phi_d used for every cohort.
    #[arg(long, value_parser = parse_params, conflicts_with = "params")]
    planted: Option<ModelParams>,
    /// Per-cohort parameters (TSV with cohort psi kappa alpha phi_m phi_d).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Cohorts as START:END; required with --planted.
    #[arg(long, value_parser = parse_range)]
    cohorts: Option<[i32; 2]>,
    /// Families per cohort.
    #[arg(long, short)]
    families: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; the ground truth goes to `<stem>.truth.tsv`.
    #[arg(long, short)]
    out: PathBuf,
    /// Directory with `<cohort>_<role>.tsv` earnings maps.
    #[arg(long)]
    maps_dir: Option<PathBuf>,
    #[arg(long, default_value_t = ProxyLoadings::default().education)]
    education_loading: f64,
    #[arg(long, default_value_t = ProxyLoadings::default().occupation)]
    occupation_loading: f64,
    #[arg(long, default_value_t = ProxyLoadings::default().occupation_missing)]
    occupation_missing: f64,
}

fn parse_range(s: &str) -> Result<[i32; 2], String> {
    let (a, b) = s.split_once(':').ok_or("expected START:END")?;
    let a: i32 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: i32 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a > b {
        return Err(format!("empty range {a}:{b}"));
    }
    Ok([a, b])
}

fn parse_params(s: &str) -> Result<ModelParams, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [psi, kappa, alpha, phi_m, phi_d] = v[..] else {
        return Err(format!("expected 5 comma-separated values, got {}", v.len()));
    };
    ModelParams::new(psi, kappa, alpha, phi_m, phi_d).map_err(|e| e.to_string())
}

fn load_config(args: &RunArgs, stage: Option<Stage>) -> Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = stage {
        config.stages = vec![s];
    }
    if let Some(p) = &args.input {
        config.input.microdata = Some(p.clone());
    }
    if let Some(p) = &args.output_dir {
        config.output_dir = p.clone();
    }
    if let Some(c) = args.cohorts {
        config.cohorts = c;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.n_sim {
        config.calibrate.n_sim = n;
    }
    Ok(config)
}

fn run(args: &RunArgs, stage: Option<Stage>) -> Result<()> {
    let config = load_config(args, stage)?;
    let (manifest, result) = run_pipeline(&config);
    for s in &manifest.stages {
        log::info!("{}: {:?}", s.name, s.status);
        for n in &s.notes {
            log::info!("  {n}");
        }
    }
    result.with_context(|| {
        format!(
            "stage {} failed; see {}",
            manifest.failed_stage.as_deref().unwrap_or("?"),
            config.output_dir.join("manifest.json").display()
        )
    })
}

fn synth(args: &SynthArgs) -> Result<()> {
    let chain: Vec<(i32, ModelParams)> = match (&args.planted, &args.params) {
        (Some(p), None) => {
            let Some([a, b]) = args.cohorts else {
                bail!("--planted needs --cohorts START:END");
            };
            (a..=b).map(|c| (c, *p)).collect()
        }
        (None, Some(path)) => {
            let mut chain = read_params_tsv(path)?;
            if let Some([a, b]) = args.cohorts {
                chain.retain(|(c, _)| (a..=b).contains(c));
            }
            chain
        }
        _ => bail!("give exactly one of --planted or --params"),
    };
    if chain.is_empty() {
        bail!("no cohorts to generate");
    }
    let spec = SynthSpec {
        chain,
        families: args.families,
        seed: args.seed,
        proxies: ProxyLoadings {
            education: args.education_loading,
            occupation: args.occupation_loading,
            occupation_missing: args.occupation_missing,
        },
    };
    let defaults = default_maps();
    let maps_dir: Option<&Path> = args.maps_dir.as_deref();
    let maps = |c: i32| match maps_dir {
        Some(dir) => RoleMaps::read_dir(dir, &c.to_string()),
        None => Ok(defaults.clone()),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
    }
    let truth = generate_synthetic(&spec, &maps, &args.out)?;
    log::info!("wrote {} and {}", args.out.display(), truth.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Estimate(a) => run(a, Some(Stage::Estimate)),
        Command::Lw(a) => run(a, Some(Stage::Lw)),
        Command::Calibrate(a) => run(a, Some(Stage::Calibrate)),
        Command::Decompose(a) => run(a, Some(Stage::Decompose)),
        Command::Pipeline(a) => run(a, None),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
