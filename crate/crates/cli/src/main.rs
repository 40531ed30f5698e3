use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slipnav::experiment::{self, ExperimentConfig, ExperimentError};
use slipnav::mission::{self, MissionConfig};
use slipnav::render;
use slipnav::riskplan::PlannerConfig;
use slipnav::terraingen::Subset;

/// Uncertainty-aware rover navigation experiments.
#[derive(Parser, Debug)]
#[command(name = "slipnav", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (JSON). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run root, overriding the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    #[value(name = "in-domain")]
    InDomain,
    Ug,
    Ua,
    Uga,
}

impl From<Split> for Subset {
    fn from(s: Split) -> Subset {
        match s {
            Split::InDomain => Subset::InDomain,
            Split::Ug => Subset::Ug,
            Split::Ua => Subset::Ua,
            Split::Uga => Subset::Uga,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved config as JSON.
    Config,
    /// Generate and save all splits.
    Dataset,
    /// Pretrain the ensemble on the saved dataset.
    Train,
    /// Write per-edge predictions for one split.
    Predict {
        #[arg(long)]
        split: Split,
    },
    /// Run missions on one split.
    Mission {
        #[arg(long)]
        split: Split,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value = "off")]
        adapt: OnOff,
    },
    /// Planner weight study without adaptation.
    Sweep {
        #[arg(long)]
        split: Option<Split>,
    },
    /// Whole-map error before and after adaptation.
    Eval,
    /// Image panels and path overlays for the first maps of a split.
    Render {
        #[arg(long)]
        split: Split,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value = "off")]
        adapt: OnOff,
        /// Number of maps to render.
        #[arg(long, default_value_t = 3)]
        maps: usize,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Dataset, training, evaluation and sweep in one go.
    Pipeline,
}

fn load_config(g: &Global) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let cfg = load_config(&cli.global)?;
    let root: &Path = &cfg.out;
    match cli.command {
        Command::Config => println!("{}", cfg.resolved().to_json()),
        Command::Dataset => {
            let ds = experiment::build_dataset_stage(&cfg, root)?;
            println!("wrote {} maps to {}", ds.maps.len(), experiment::dataset_dir(root).display());
        }
        Command::Train => {
            let ds = experiment::open_dataset(root)?;
            let (_, hist) = experiment::train_stage(&cfg, &ds, root)?;
            for (k, h) in hist.members.iter().enumerate() {
                println!("member {k}: kept epoch {} val nll {:.4}", h.best_epoch, h.val_nll[h.best_epoch]);
            }
        }
        Command::Predict { split } => {
            let ds = experiment::open_dataset(root)?;
            let ens = experiment::open_model(root)?;
            let dir = experiment::predict_stage(&cfg, &ens, &ds, split.into(), root)?;
            println!("wrote predictions to {}", dir.display());
        }
        Command::Mission { split, lambda, adapt } => {
            let ds = experiment::open_dataset(root)?;
            let ens = experiment::open_model(root)?;
            let lambda = lambda.unwrap_or(cfg.mission.planner.lambda);
            let (report, _) = experiment::mission_stage(&cfg, &ens, &ds, split.into(), lambda, adapt == OnOff::On, root)?;
            for (k, v) in report.metric_pairs() {
                println!("{k} {v:.3}");
            }
        }
        Command::Sweep { split } => {
            let ds = experiment::open_dataset(root)?;
            let ens = experiment::open_model(root)?;
            let mut cfg = cfg.clone();
            if let Some(s) = split {
                cfg.sweep.subset = s.into();
            }
            for s in experiment::sweep_stage(&cfg, &ens, &ds, root)? {
                let r = &s.report;
                let t = r.t_total.map(|t| format!("{:.2}", t.median)).unwrap_or_else(|| "-".into());
                println!("lambda {} sol {:.1} suc {:.1} median_t {t}", s.lambda, r.sol, r.suc);
            }
        }
        Command::Eval => {
            let ds = experiment::open_dataset(root)?;
            let ens = experiment::open_model(root)?;
            for s in experiment::eval_stage(&cfg, &ens, &ds, root)? {
                println!("{} mae {:.2} -> {:.2} ({:+.1}%)", s.subset.name(), s.mae_before, s.mae_after, s.change_pct);
            }
        }
        Command::Render { split, lambda, adapt, maps, scale } => {
            let ds = experiment::open_dataset(root)?;
            let ens = experiment::open_model(root)?;
            let subset: Subset = split.into();
            let lambda = lambda.unwrap_or(cfg.mission.planner.lambda);
            let mcfg = MissionConfig {
                planner: PlannerConfig { lambda, ..cfg.mission.planner.clone() },
                adapt: adapt == OnOff::On,
                ..cfg.mission.clone()
            };
            let dir = root.join("render").join(subset.name());
            experiment::prepare_dir(&dir, &cfg, &format!("render --split {}", subset.name()))?;
            for m in experiment::pick(&ds, subset, maps) {
                let pred = ens.predict_instance(m, true)?;
                let run = mission::run_mission(m, &ens, &mcfg)?;
                let mut driven: Vec<usize> = run.log.steps.iter().map(|s| s.source).collect();
                driven.extend(run.log.steps.last().map(|s| s.target));
                let d = dir.join(m.stem());
                render::render_map(&d, m, &pred, &[("plan", &run.initial_plan.path), ("traverse", &driven)], scale)
                    .map_err(|source| ExperimentError::Io { path: d.display().to_string(), source })?;
                println!("{}: {}", d.display(), run.outcome.cause.name());
            }
        }
        Command::Pipeline => {
            let out = experiment::run_pipeline(&cfg, root)?;
            for s in &out.eval {
                println!("{} mae {:.2} -> {:.2} ({:+.1}%)", s.subset.name(), s.mae_before, s.mae_after, s.change_pct);
            }
            for s in &out.sweep {
                println!("lambda {} sol {:.1} suc {:.1}", s.lambda, s.report.sol, s.report.suc);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: --threads must be a positive integer");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
