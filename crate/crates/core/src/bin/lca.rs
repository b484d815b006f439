use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lca::engine::Method;
use lca::harness::{
    self, analyze, analyze_runs, export_lcam, export_snapshot, find_lcams, load_dataset,
    run_experiment, AnalyzeInputs, ExperimentOptions, ExportKind, Preset, RunConfig, RunPaths,
};
use lca::{Error, Result};

#[derive(Parser)]
#[command(name = "lca", version, about = "Loss change allocation along training trajectories")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network and record its trajectory.
    Train(ConfigArgs),
    /// Integrate a recorded trajectory into an LCA matrix.
    Lca {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trajectory file (default: the run directory's `<run_id>.lcat`).
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Write analysis reports for an LCA matrix, or across runs.
    Analyze(AnalyzeArgs),
    /// Run a multi-seed study.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        preset: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Keep trajectory and LCA files of every run.
        #[arg(long)]
        keep_artifacts: bool,
        /// Reuse results of identical configurations from this directory.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Run one job at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Export binary artifacts as CSV.
    Export(ExportArgs),
    /// Print a configuration template.
    Template {
        #[arg(long, value_enum, default_value = "desk")]
        kind: TemplateKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateKind {
    Desk,
    Synthetic,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short, required_unless_present = "desk")]
    config: Option<PathBuf>,
    /// Use the built-in desk MNIST-FC configuration.
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, conflicts_with = "full_data")]
    subset_size: Option<usize>,
    /// Use every example of the dataset instead of a subset.
    #[arg(long)]
    full_data: bool,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_depth: Option<u8>,
    /// Also compute per-class allocations.
    #[arg(long)]
    per_class: bool,
    /// Diagnostic: endpoint-gradient allocation without refinement.
    #[arg(long)]
    first_order: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::mnist_fc_desk("desk", 0),
        };
        if let Some(v) = &self.run_id {
            cfg.run_id = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.momentum {
            cfg.optimizer.momentum = v;
        }
        if let Some(v) = self.batch_size {
            cfg.optimizer.batch_size = v;
        }
        if let Some(v) = self.subset_size {
            match &mut cfg.dataset {
                harness::DatasetConfig::Mnist { subset_size, .. } => *subset_size = Some(v),
                _ => return Err(Error::Config("--subset-size applies to MNIST only".into())),
            }
        }
        if self.full_data {
            match &mut cfg.dataset {
                harness::DatasetConfig::Mnist { subset_size, .. } => *subset_size = None,
                _ => return Err(Error::Config("--full-data applies to MNIST only".into())),
            }
        }
        if let Some(v) = self.tol {
            cfg.lca.tol = v;
        }
        if let Some(v) = self.max_depth {
            cfg.lca.max_depth = v;
        }
        cfg.lca.per_class |= self.per_class;
        if self.first_order {
            cfg.lca.method = Method::FirstOrder;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// LCA matrix file.
    #[arg(long, required_unless_present = "runs")]
    lcam: Option<PathBuf>,
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Per-class tensor (`<run_id>.classes.json`).
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Configuration whose `[analysis]` table selects the analyses.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Directory of runs: layer significance across every LCA file found.
    #[arg(long, conflicts_with = "lcam")]
    runs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    fanio: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, value_enum)]
    what: ExportWhat,
    /// LCA matrix file (params, matrix, layers).
    #[arg(long)]
    lcam: Option<PathBuf>,
    /// Trajectory file (snapshot).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// First iteration (matrix) or the snapshot index.
    #[arg(long, default_value_t = 0)]
    from: usize,
    /// One past the last iteration (matrix).
    #[arg(long)]
    to: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    Params,
    Matrix,
    Layers,
    Snapshot,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { harness::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::from(harness::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => {
            let cfg = a.resolve()?;
            let data = load_dataset(&cfg.dataset)?;
            let paths = RunPaths::for_config(&cfg);
            let r = harness::train(&cfg, &data, &paths)?;
            println!(
                "trajectory {} ({} steps), train loss {:.4} -> {:.4}",
                r.trajectory.display(),
                r.steps,
                r.initial_loss,
                r.final_loss
            );
        }
        Cmd::Lca { cfg, trajectory } => {
            let cfg = cfg.resolve()?;
            let data = load_dataset(&cfg.dataset)?;
            let paths = RunPaths::for_config(&cfg);
            let traj = trajectory.unwrap_or_else(|| paths.trajectory.clone());
            let r = harness::lca_unchecked(&cfg, &data, &traj, &paths, &mut [])?;
            println!("{}", r.describe());
            println!("wrote {}", r.lcam.display());
            if cfg.lca.method == Method::Simpson {
                r.summary.check_gate()?;
            }
        }
        Cmd::Analyze(a) => {
            let mut acfg = match &a.config {
                Some(p) => RunConfig::load(p)?.analysis,
                None => Default::default(),
            };
            acfg.fanio |= a.fanio;
            if let Some(dir) = &a.runs {
                let lcams = find_lcams(dir)?;
                let out = a.out.clone().unwrap_or_else(|| dir.join("report"));
                let r = analyze_runs(&lcams, &out)?;
                for s in &r.significance {
                    println!(
                        "{}: mean {:+.5} over {} runs, t-test p {:.3e}, {} of {} negative",
                        r.totals[0].names[s.layer], s.mean, s.runs, s.p_value, s.negative, s.runs
                    );
                }
                println!("wrote {}", out.display());
                return Ok(());
            }
            let lcam = a.lcam.expect("clap enforces --lcam");
            let out = a
                .out
                .unwrap_or_else(|| lcam.parent().unwrap_or(&PathBuf::from(".")).join("report"));
            let inputs = AnalyzeInputs {
                lcam,
                trajectory: a.trajectory,
                classes: a.classes,
            };
            let r = analyze(&inputs, &acfg, &out)?;
            if let Some(h) = &r.help {
                println!(
                    "helped {:.2}% of nonzero entries, zero {:.2}%",
                    h.overall_pct_helped, h.overall_pct_zero
                );
            }
            if let Some(l) = &r.layers {
                for (n, v) in l.names.iter().zip(&l.totals) {
                    println!("{n}: {v:+.6}");
                }
            }
            for s in &r.skipped {
                println!("skipped {s}");
            }
            println!("wrote {}", out.display());
        }
        Cmd::Experiment {
            cfg,
            preset,
            seeds,
            keep_artifacts,
            cache_dir,
            sequential,
        } => {
            let cfg = cfg.resolve()?;
            let preset: Preset = preset.parse()?;
            let data = load_dataset(&cfg.dataset)?;
            let opts = ExperimentOptions {
                seeds,
                out_dir: cfg.output_dir.join(format!("{}-{preset}", cfg.run_id)),
                keep_artifacts,
                cache_dir,
                parallel: !sequential,
            };
            let r = run_experiment(preset, &cfg, &data, &opts)?;
            println!("{:<20} {:>7} {}", "arm", "passing", r.layer_names.join("  "));
            for a in &r.arms {
                let cols: Vec<String> = a
                    .layer_mean
                    .iter()
                    .zip(&a.layer_std)
                    .map(|(m, s)| format!("{m:+.4}±{s:.4}"))
                    .collect();
                println!("{:<20} {:>3}/{:<3} {}", a.arm, a.passing, a.runs, cols.join("  "));
            }
            if let Some(f) = &r.delay_fit {
                println!(
                    "last layer vs delay: slope {:+.5}, R² {:.3}",
                    f.slope, f.r_squared
                );
            }
            println!("wrote {}", opts.out_dir.display());
        }
        Cmd::Export(a) => {
            let need_lcam = || {
                a.lcam
                    .clone()
                    .ok_or_else(|| Error::Config("--lcam is required for this export".into()))
            };
            let rows = match a.what {
                ExportWhat::Params => export_lcam(&need_lcam()?, &ExportKind::Params, &a.out)?,
                ExportWhat::Layers => export_lcam(&need_lcam()?, &ExportKind::Layers, &a.out)?,
                ExportWhat::Matrix => {
                    let to = a.to.unwrap_or(a.from + 1);
                    export_lcam(&need_lcam()?, &ExportKind::Matrix(a.from..to), &a.out)?
                }
                ExportWhat::Snapshot => {
                    let t = a
                        .trajectory
                        .ok_or_else(|| Error::Config("--trajectory is required for a snapshot".into()))?;
                    export_snapshot(&t, a.from, &a.out)?
                }
            };
            println!("wrote {rows} rows to {}", a.out.display());
        }
        Cmd::Template { kind } => {
            let cfg = match kind {
                TemplateKind::Desk => RunConfig::mnist_fc_desk("desk", 0),
                TemplateKind::Synthetic => synthetic_template(),
            };
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn synthetic_template() -> RunConfig {
    let mut cfg = RunConfig::mnist_fc_desk("toy", 0);
    cfg.arch = vec![4, 8, 3];
    cfg.iterations = 200;
    cfg.dataset = harness::DatasetConfig::Synthetic(harness::SyntheticSpec {
        n: 300,
        d: 4,
        c: 3,
        separation: 3.0,
        seed: 0,
    });
    cfg.optimizer = lca::optim::OptimConfig::sgd(0.1, 0.9, 32);
    cfg
}
