//! `collapse-lab`: verifications, sweeps, training and diagnostics.
//!
//! Exit codes: 0 success, 1 check or run failure, 2 usage or validation error.

mod config;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collapse_lab::diagnostics::{collapse_report, sigma_histogram};
use collapse_lab::nets::{load_checkpoint, save_checkpoint};
use collapse_lab::propositions::{
    collapse_gamma_sweep, linear_oracle_suite, prop1_suite, prop2_suite, stationary_suite, Prop1Config,
    StationaryConfig,
};
use collapse_lab::rng::{derive_seed, seeded};
use collapse_lab::trainer::{paired_depth_run, train, PairedResult};
use collapse_lab::{CollapseReport, Error, GammaMode, PropositionReport, TrainConfig, VaeModel};
use serde::Serialize;

use config::RunConfigFile;
use svg::{Chart, Series};

const SEED_ENV: &str = "COLLAPSE_LAB_SEED";

#[derive(Parser)]
#[command(name = "collapse-lab", version, about = "Posterior-collapse laboratory for Gaussian VAEs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one of the executable verification suites.
    Verify {
        #[command(subcommand)]
        which: Verify,
    },
    /// Depth or fixed-gamma sweep driven by a config file.
    Sweep {
        #[command(subcommand)]
        kind: Sweep,
    },
    /// Train one model and write its log, checkpoint and final report.
    Train(RunArgs),
    /// Recompute the collapse report and sigma histogram of a checkpoint.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct ReportArgs {
    /// Defaults to $COLLAPSE_LAB_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verify {
    Prop1 {
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long, value_delimiter = ',', default_value = "1e-1,1e-2,1e-3,1e-4,1e-5")]
        delta_grid: Vec<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        mc_samples: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    Prop2 {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    Stationary {
        #[arg(long, value_delimiter = ',', default_value = "2,4,6")]
        depth: Vec<usize>,
        /// Latent dimensions to zero; one random dimension per configuration if omitted.
        #[arg(long, value_delimiter = ',')]
        zero_dims: Option<Vec<usize>>,
        #[arg(long, default_value_t = 10)]
        configs: usize,
        #[arg(long, default_value_t = 100_000)]
        n_mc: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    LinearOracle {
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Subcommand)]
enum Sweep {
    /// Paired AE/VAE runs over `sweep.depths`.
    Depth(SweepArgs),
    /// Fixed-gamma VAE runs over `sweep.gammas`.
    Gamma(SweepArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also render SVG charts.
    #[arg(long)]
    svg: bool,
    /// Worker threads for the sweep entries.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    config: PathBuf,
    /// Defaults to `<out dir>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to `sweep.histogram_bins`.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum Fail {
    Usage(String),
    Run(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Usage(_) => 2,
            Fail::Run(_) => 1,
        }
    }
}

type Outcome = Result<(), Fail>;

fn run_err(e: impl std::fmt::Display) -> Fail {
    Fail::Run(e.to_string())
}

/// Parameter errors from the library are usage errors; everything else is a
/// run failure.
fn lib_err(e: Error) -> Fail {
    match e {
        Error::Parameter(_) => Fail::Usage(e.to_string()),
        _ => Fail::Run(e.to_string()),
    }
}

fn env_seed() -> Result<Option<u64>, Fail> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Fail::Usage(format!("{SEED_ENV} must be a non-negative integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Fail::Usage(format!("{SEED_ENV}: {e}"))),
    }
}

fn write(path: &Path, contents: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| run_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| run_err(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn emit_report(report: &PropositionReport, out: Option<&Path>) -> Outcome {
    for c in &report.checks {
        if !c.pass {
            eprintln!("FAIL {}: value {:e}, bound {:e}", c.name, c.value, c.bound);
        }
    }
    let passed = report.checks.iter().filter(|c| c.pass).count();
    eprintln!(
        "{}: {} ({passed}/{} checks)",
        report.proposition,
        if report.pass { "pass" } else { "FAIL" },
        report.checks.len()
    );
    let text = json(report);
    match out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    if report.pass {
        Ok(())
    } else {
        Err(Fail::Run(format!("{} checks failed", report.proposition)))
    }
}

fn cmd_verify(which: Verify) -> Outcome {
    let env = env_seed()?;
    let pick = |r: &ReportArgs| r.seed.or(env).unwrap_or(0);
    let (report, out) = match which {
        Verify::Prop1 { alpha, delta_grid, mc_samples, report } => {
            let cfg = Prop1Config { alpha, delta_grid, mc_samples };
            cfg.validate().map_err(lib_err)?;
            if mc_samples < 2 {
                return Err(Fail::Usage("--mc-samples must be >= 2".into()));
            }
            (prop1_suite(&cfg, &mut seeded(pick(&report))).map_err(lib_err)?, report.out)
        }
        Verify::Prop2 { instances, report } => (prop2_suite(instances, pick(&report)).map_err(lib_err)?, report.out),
        Verify::Stationary { depth, zero_dims, configs, n_mc, report } => {
            let cfg = StationaryConfig {
                depths: depth,
                zero_dims,
                n_configs: configs,
                n_mc,
                seed: pick(&report),
                ..StationaryConfig::default()
            };
            if cfg.depths.contains(&0) {
                return Err(Fail::Usage("--depth values must be >= 1".into()));
            }
            if let Some(z) = &cfg.zero_dims {
                if z.is_empty() || z.iter().any(|&j| j >= cfg.latent_dim) {
                    return Err(Fail::Usage(format!("--zero-dims must lie in 0..{}", cfg.latent_dim)));
                }
            }
            if n_mc < 2 {
                return Err(Fail::Usage("--n-mc must be >= 2".into()));
            }
            (stationary_suite(&cfg).map_err(lib_err)?, report.out)
        }
        Verify::LinearOracle { report } => (linear_oracle_suite(pick(&report)).map_err(lib_err)?, report.out),
    };
    emit_report(&report, out.as_deref())
}

struct Prepared {
    cfg: RunConfigFile,
    train: TrainConfig,
    batch: collapse_lab::DataBatch,
    out_dir: PathBuf,
}

fn prepare(path: &Path, out_dir: Option<PathBuf>) -> Result<Prepared, Fail> {
    let mut cfg = RunConfigFile::load(path).map_err(Fail::Usage)?;
    cfg.apply_seed_override(env_seed()?);
    cfg.validate().map_err(Fail::Usage)?;
    let train = cfg.train_config().map_err(Fail::Usage)?;
    let batch = cfg.load_data().map_err(Fail::Usage)?;
    cfg.model_spec(batch.d()).map_err(Fail::Usage)?;
    let out_dir = out_dir.unwrap_or_else(|| cfg.output.dir.clone());
    Ok(Prepared { cfg, train, batch, out_dir })
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Fail> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Fail::Usage("--jobs must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(run_err)?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Serialize)]
struct DepthRow {
    depth: usize,
    ae_recon: Option<f64>,
    vae_recon: Option<f64>,
    vae_recon_stderr: Option<f64>,
    optimal_gamma: Option<f64>,
    final_gamma: Option<f64>,
    report: Option<CollapseReport>,
    ae_failure: Option<String>,
    vae_failure: Option<String>,
}

impl DepthRow {
    fn from(r: &PairedResult) -> Self {
        DepthRow {
            depth: r.depth,
            ae_recon: r.ae_recon,
            vae_recon: r.vae_recon,
            vae_recon_stderr: r.vae_recon_stderr,
            optimal_gamma: r.optimal_gamma,
            final_gamma: r.final_gamma,
            report: r.report.clone(),
            ae_failure: r.ae_log.failed.as_ref().map(|f| format!("iteration {}: {}", f.iteration, f.reason)),
            vae_failure: r.vae_log.failed.as_ref().map(|f| format!("iteration {}: {}", f.iteration, f.reason)),
        }
    }

    fn failed(&self) -> bool {
        self.ae_failure.is_some() || self.vae_failure.is_some()
    }
}

fn cmd_sweep_depth(args: SweepArgs) -> Outcome {
    let p = prepare(&args.config, args.out_dir)?;
    let depths = p.cfg.sweep.depths.clone();
    let (width, latent) = (p.cfg.model.width, p.cfg.model.latent_dim);
    let out_dir = p.out_dir.clone();
    let results = with_jobs(args.jobs, || {
        use rayon::prelude::*;
        depths
            .par_iter()
            .enumerate()
            .map(|(i, &depth)| -> Result<DepthRow, Fail> {
                let cfg = TrainConfig { seed: derive_seed(p.train.seed, i as u64), ..p.train.clone() };
                let r = paired_depth_run(&[depth], width, latent, &p.batch, &cfg).map_err(lib_err)?;
                let r = &r[0];
                write(&out_dir.join(format!("depth_{depth}_ae_log.csv")), &r.ae_log.to_csv())?;
                write(&out_dir.join(format!("depth_{depth}_vae_log.csv")), &r.vae_log.to_csv())?;
                Ok(DepthRow::from(r))
            })
            .collect::<Result<Vec<_>, Fail>>()
    })??;

    let mut csv = String::from("depth,ae_recon,vae_recon,collapsed_units,sigma_near_one_fraction,implicit_gamma,failed\n");
    for r in &results {
        let rep = r.report.as_ref();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.depth,
            num(r.ae_recon),
            num(r.vae_recon),
            rep.map(|x| x.collapsed_units.to_string()).unwrap_or_default(),
            num(rep.map(|x| x.sigma_near_one_fraction)),
            num(rep.map(|x| x.implicit_gamma)),
            r.failed()
        ));
    }
    write(&out_dir.join("depth_sweep.csv"), &csv)?;
    write(&out_dir.join("depth_sweep.json"), &json(&results))?;
    if args.svg {
        let pts = |f: &dyn Fn(&DepthRow) -> Option<f64>| {
            results.iter().filter_map(|r| f(r).map(|v| (r.depth as f64, v))).collect::<Vec<_>>()
        };
        let recon = Chart {
            title: "Reconstruction error vs depth".into(),
            x_label: "depth".into(),
            y_label: "mean squared error per entry".into(),
            log_x: false,
            series: vec![
                Series { label: "AE".into(), points: pts(&|r| r.ae_recon) },
                Series { label: "VAE".into(), points: pts(&|r| r.vae_recon) },
            ],
        };
        let sigma = Chart {
            title: "Latent usage vs depth".into(),
            x_label: "depth".into(),
            y_label: "fraction of sigma near 1".into(),
            log_x: false,
            series: vec![Series {
                label: "VAE".into(),
                points: pts(&|r| r.report.as_ref().map(|x| x.sigma_near_one_fraction)),
            }],
        };
        write(&out_dir.join("depth_sweep_recon.svg"), &recon.render())?;
        write(&out_dir.join("depth_sweep_sigma.svg"), &sigma.render())?;
    }
    let failed = results.iter().filter(|r| r.failed()).count();
    eprintln!("depth sweep: {} depths, {failed} failed, written to {}", results.len(), out_dir.display());
    if failed > 0 {
        return Err(Fail::Run(format!("{failed} depth runs failed")));
    }
    Ok(())
}

fn cmd_sweep_gamma(args: SweepArgs) -> Outcome {
    let p = prepare(&args.config, args.out_dir)?;
    let spec = p.cfg.model_spec(p.batch.d()).map_err(Fail::Usage)?;
    let gammas = p.cfg.sweep.gammas.clone();
    let report = with_jobs(args.jobs, || collapse_gamma_sweep(&spec, &p.batch, &gammas, &p.train))?.map_err(lib_err)?;

    let mut csv = String::from("gamma,collapsed_units,recon,kl_total,failed\n");
    for e in &report.entries {
        let rep = e.report.as_ref();
        csv.push_str(&format!(
            "{:.16e},{},{},{},{}\n",
            e.gamma,
            rep.map(|x| x.collapsed_units.to_string()).unwrap_or_default(),
            num(rep.map(|x| x.recon_mse)),
            num(rep.map(|x| x.kl_per_dim.iter().sum())),
            e.failed.is_some()
        ));
    }
    write(&p.out_dir.join("gamma_sweep.csv"), &csv)?;
    write(&p.out_dir.join("gamma_sweep.json"), &json(&report))?;
    if args.svg {
        let chart = Chart {
            title: "Collapsed latent dimensions vs fixed gamma".into(),
            x_label: "gamma".into(),
            y_label: "collapsed units".into(),
            log_x: true,
            series: vec![Series {
                label: "VAE".into(),
                points: report
                    .entries
                    .iter()
                    .filter_map(|e| e.report.as_ref().map(|r| (e.gamma, r.collapsed_units as f64)))
                    .collect(),
            }],
        };
        write(&p.out_dir.join("gamma_sweep.svg"), &chart.render())?;
    }
    let failed = report.entries.iter().filter(|e| e.failed.is_some()).count();
    eprintln!(
        "gamma sweep: collapsed counts {:?}, {failed} failed, written to {}",
        report.collapsed_counts(),
        p.out_dir.display()
    );
    if failed > 0 {
        return Err(Fail::Run(format!("{failed} gamma runs failed")));
    }
    Ok(())
}

fn print_summary(r: &CollapseReport) {
    eprintln!(
        "label {}: {} active, {} collapsed of {}; gamma {:e}, implicit gamma {:e}, recon {:e}",
        r.label.as_str(),
        r.active_units,
        r.collapsed_units,
        r.latent_dim(),
        r.gamma,
        r.implicit_gamma,
        r.recon_mse
    );
}

fn cmd_train(args: RunArgs) -> Outcome {
    let p = prepare(&args.config, args.out_dir)?;
    let spec = p.cfg.model_spec(p.batch.d()).map_err(Fail::Usage)?;
    let mut model = VaeModel::new(spec, p.train.seed).map_err(lib_err)?;
    if let GammaMode::Fixed { value } = p.train.gamma_mode {
        model.set_gamma(value).map_err(lib_err)?;
    }
    let log = train(&mut model, &p.batch, &p.train).map_err(lib_err)?;
    write(&p.out_dir.join("run_log.csv"), &log.to_csv())?;
    if let Some(f) = &log.failed {
        write(&p.out_dir.join("failure.json"), &json(f))?;
        return Err(Fail::Run(format!("training failed at iteration {}: {}", f.iteration, f.reason)));
    }
    save_checkpoint(&p.out_dir.join("checkpoint.json"), &model, log.report_rng.clone()).map_err(run_err)?;
    if let Some(r) = &log.report {
        write(&p.out_dir.join("report.json"), &json(r))?;
        print_summary(r);
    }
    if let Some(last) = log.last() {
        eprintln!("final energy {:e}, gamma {:e}", last.total_energy, last.gamma);
    }
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Outcome {
    let p = prepare(&args.config, args.out_dir)?;
    let ck = args.checkpoint.unwrap_or_else(|| p.out_dir.join("checkpoint.json"));
    let (model, state) = load_checkpoint(&ck).map_err(|e| Fail::Run(format!("{}: {e}", ck.display())))?;
    if model.data_dim() != p.batch.d() {
        return Err(Fail::Run(format!(
            "checkpoint expects {}-dimensional data, the config provides {}",
            model.data_dim(),
            p.batch.d()
        )));
    }
    let bins = args.bins.unwrap_or(p.cfg.sweep.histogram_bins);
    if bins < 2 {
        return Err(Fail::Usage("--bins must be >= 2".into()));
    }
    let mut rng = match state {
        Some(s) => s.restore().ok_or_else(|| Fail::Run(format!("{}: corrupt rng state", ck.display())))?,
        None => seeded(derive_seed(p.train.seed, 2)),
    };
    let report = collapse_report(&model, &p.batch, p.train.mc_samples_eval, &mut rng).map_err(lib_err)?;
    let hist = sigma_histogram(&model, &p.batch, bins).map_err(lib_err)?;
    write(&p.out_dir.join("diagnose_report.json"), &json(&report))?;
    write(&p.out_dir.join("sigma_histogram.csv"), &hist.to_csv())?;
    print_summary(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::Verify { which } => cmd_verify(which),
        Command::Sweep { kind: Sweep::Depth(a) } => cmd_sweep_depth(a),
        Command::Sweep { kind: Sweep::Gamma(a) } => cmd_sweep_gamma(a),
        Command::Train(a) => cmd_train(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Fail::Usage(m) => eprintln!("error: {m}"),
                Fail::Run(m) => eprintln!("failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
