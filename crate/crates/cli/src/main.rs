//! `mthu`: generate benchmarks, train, run baselines, evaluate, ablate and plot.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mthu::datamodel::{load_estimate, DatasetBundle};
use mthu::exec::Exec;
use mthu::harness::{
    ablate, generate, render_endmembers, render_maps, resolve_arch, run_experiment, run_fcls, train,
    write_baseline_outputs, write_model_outputs, DatasetConfig, EndmemberSource, ExperimentConfig, TrainConfig,
};
use mthu::metrics::{evaluate, write_metrics_csv, MetricsReport, MetricsRow};
use mthu::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mthu", version, about = "Multitemporal hyperspectral unmixing")]
struct Cli {
    /// JSON experiment configuration (keys: dataset, arch, train, loss, output, seeds).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Training seed; replaces any seed list in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; replaces `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic dataset as a bundle directory.
    Generate,
    /// Train the network for every configured seed.
    Train {
        /// Bundle directory to train on instead of the configured dataset.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// FCLS baseline with VCA or ground-truth endmembers.
    Baseline {
        /// Bundle directory to unmix instead of the configured dataset.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Endmembers::Vca)]
        endmembers: Endmembers,
    },
    /// Score a saved estimate against a bundle's ground truth.
    Evaluate {
        /// Bundle directory holding the ground truth.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Directory written by `train` or `baseline` (holds `estimate.json`).
        #[arg(long, value_name = "DIR")]
        estimate: PathBuf,
        /// Method name for the metrics row.
        #[arg(long, default_value = "estimate")]
        method: String,
    },
    /// FCLS and the network side by side; writes `metrics.csv`.
    Experiment,
    /// Module and CEM-mode ablations; writes `ablation.csv`.
    Ablate,
    /// Render abundance maps and endmember plots of a saved estimate.
    Plot {
        /// Directory written by `train` or `baseline`.
        #[arg(long, value_name = "DIR")]
        estimate: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Endmembers {
    Vca,
    Truth,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(err) if err.is_validation() => EXIT_VALIDATION,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> mthu::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.dir.clone_from(out);
    }
    Ok(cfg)
}

fn dataset(cfg: &mut ExperimentConfig, data: Option<&Path>, exec: Exec) -> mthu::Result<(String, DatasetBundle)> {
    if let Some(dir) = data {
        cfg.dataset = DatasetConfig::Bundle { path: dir.to_path_buf() };
    }
    Ok((cfg.dataset.name(), cfg.dataset.materialize(exec)?))
}

fn print_report(method: &str, seed: u64, r: &MetricsReport) {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{method} seed {seed}: NRMSE_A {} NRMSE_M {} SAM_M {} NRMSE_Y {:.4} ({:.1} s)",
        f(r.nrmse_a),
        f(r.nrmse_m),
        f(r.sam_m),
        r.nrmse_y,
        r.runtime_s
    );
}

fn create_dir(dir: &Path) -> mthu::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let mut cfg = load_config(&cli)?;
    let root = cfg.output.dir.clone();
    match &cli.command {
        Command::Generate => {
            let bundle = generate(&cfg, &root, exec)?;
            let y = &bundle.observed;
            println!(
                "wrote {} ({} phases, {} bands, {}x{})",
                root.display(),
                y.phases(),
                y.bands(),
                y.height(),
                y.width()
            );
        }
        Command::Train { data } => {
            let (name, bundle) = dataset(&mut cfg, data.as_deref(), exec)?;
            let arch = resolve_arch(&cfg.arch, &bundle)?;
            create_dir(&root)?;
            let mut rows = Vec::new();
            for seed in cfg.seeds() {
                let tc = TrainConfig { seed, ..cfg.train.clone() };
                let mut model = train(&bundle, &arch, &tc, &cfg.loss, exec)?;
                let dir = root.join(format!("seed{seed}"));
                write_model_outputs(&mut model, &dir, cfg.output.figures, cfg.output.checkpoints)?;
                print_report("muformer", seed, &model.record.metrics);
                rows.push(MetricsRow { method: "muformer".into(), dataset: name.clone(), seed, report: model.record.metrics });
                write_metrics_csv(root.join("metrics.csv"), &rows)?;
            }
        }
        Command::Baseline { data, endmembers } => {
            let (name, bundle) = dataset(&mut cfg, data.as_deref(), exec)?;
            let p = resolve_arch(&cfg.arch, &bundle)?.endmembers;
            create_dir(&root)?;
            let mut rows = Vec::new();
            for seed in cfg.seeds() {
                let (source, method) = match endmembers {
                    Endmembers::Vca => (EndmemberSource::Vca(seed), "fcls"),
                    Endmembers::Truth => (EndmemberSource::Truth, "fcls_truth"),
                };
                let base = run_fcls(&bundle, p, source, exec)?;
                write_baseline_outputs(&base, &root.join(format!("seed{seed}")), cfg.output.figures)?;
                print_report(method, seed, &base.metrics);
                rows.push(MetricsRow { method: method.into(), dataset: name.clone(), seed, report: base.metrics });
                write_metrics_csv(root.join("metrics.csv"), &rows)?;
            }
        }
        Command::Evaluate { data, estimate, method } => {
            let (name, bundle) = dataset(&mut cfg, data.as_deref(), exec)?;
            let dir = if estimate.join("estimate.json").exists() { estimate.clone() } else { estimate.join("estimate") };
            let (a, m) = load_estimate(&dir)?;
            let report = evaluate(&bundle, &a, &m, 0.0)?;
            let seed = cfg.seeds()[0];
            print_report(method, seed, &report);
            create_dir(&root)?;
            write_metrics_csv(root.join("metrics.csv"), &[MetricsRow { method: method.clone(), dataset: name, seed, report }])?;
        }
        Command::Experiment => {
            let report = run_experiment(&cfg, exec)?;
            for row in &report.rows {
                print_report(&row.method, row.seed, &row.report);
            }
        }
        Command::Ablate => {
            let table = ablate(&cfg, exec)?;
            print!("{}", table.to_csv());
        }
        Command::Plot { estimate } => {
            let dir = if estimate.join("estimate.json").exists() { estimate.clone() } else { estimate.join("estimate") };
            let (a, m) = load_estimate(&dir)?;
            let maps = render_maps(&a, root.join("maps"))?;
            let plots = render_endmembers(&m, root.join("endmembers"))?;
            println!("wrote {} images under {}", maps.len() + plots.len(), root.display());
        }
    }
    Ok(())
}
