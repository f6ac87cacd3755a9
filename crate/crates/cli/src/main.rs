use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foodcl::config::{ExperimentConfig, OUT_ENV};
use foodcl::pipeline::{self, check_jobs, Grid};
use foodcl::tables;
use foodcl::{CliError, Result};
use foodcl_core::lora::{CompositionPolicy, Strategy};

#[derive(Parser)]
#[command(name = "foodcl", version, about = "Continual learning over a synthetic food task stream")]
struct Cli {
    #[command(flatten)]
    opts: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the shipped desk-scale profile instead of the defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    desk: bool,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Override any field, e.g. `--set replay.proportion=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    method: Option<Strategy>,
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    lambda_o: Option<f64>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    policy: Option<CompositionPolicy>,
    /// Replay proportion as a fraction of the current training set.
    #[arg(long, global = true)]
    proportion: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    repeat: Option<usize>,
    /// Disable quality enhancement: replay uses raw candidate 0.
    #[arg(long, global = true)]
    no_qe: bool,
    /// Worker threads; defaults to FOODCL_JOBS or the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut c = match (&self.config, self.desk) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, true) => ExperimentConfig::desk(),
            (None, false) => ExperimentConfig::default(),
        };
        if let Some(o) = &self.out {
            c.out_dir = Some(o.clone());
        }
        if let Some(m) = self.method {
            c.method = m;
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        let h = &mut c.hyper;
        self.lr.map(|v| h.learning_rate = v);
        self.lambda_o.map(|v| h.lambda_o = v);
        self.rank.map(|v| h.rank = v);
        self.epochs.map(|v| h.epochs = v);
        self.batch_size.map(|v| h.batch_size = v);
        self.policy.map(|v| h.policy = v);
        let r = &mut c.replay;
        self.proportion.map(|v| r.proportion = v);
        self.temperature.map(|v| r.temperature = v);
        self.repeat.map(|v| r.repeat = v);
        if self.no_qe {
            r.quality_enhancement = false;
        }
        for o in &self.overrides {
            c.set(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn workers(&self) -> usize {
        self.jobs.filter(|&n| n > 0).unwrap_or_else(pipeline::default_workers)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task stream files (no-op when they already exist).
    GenData,
    /// Pretrain the frozen backbone on the untasked corpus.
    Pretrain,
    /// Run continual training over the stream for each method and seed.
    Run {
        /// Methods to run; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Strategy>>,
        /// Recompute even when a matching finished run exists.
        #[arg(long)]
        force: bool,
    },
    /// Run ablation grids with the dual method.
    Ablate {
        /// replay, lambda, qe or all.
        #[arg(long, default_value = "all")]
        grid: String,
        #[arg(long)]
        force: bool,
    },
    /// Rescore run directories from their predictions and print one comparison.
    Report {
        /// Run directories; defaults to every method and configured seed.
        dirs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// gen-data, pretrain, and run for all three methods.
    All,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn write(path: &std::path::Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run_methods(cfg: &ExperimentConfig, methods: &[Strategy], workers: usize, reuse: bool) -> Result<()> {
    let results = pipeline::cmd_run(cfg, methods, workers, reuse)?;
    let dirs: Vec<PathBuf> = results.iter().map(|r| r.dir.clone()).collect();
    let rendered = tables::cmd_report(&dirs)?;
    println!("{}", rendered.text);
    write(&cfg.out_root().join("runs").join("summary.txt"), &rendered.text)?;
    check_jobs(&results)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = cli.opts.build()?;
    let workers = cli.opts.workers();
    match &cli.command {
        Command::GenData => {
            let g = pipeline::cmd_gen_data(&cfg)?;
            let verb = if g.created { "wrote" } else { "kept existing" };
            println!("{verb} dataset {} in {}", &g.dataset_hash[..12], g.dir.display());
        }
        Command::Pretrain => {
            let (_, rec) = pipeline::cmd_pretrain(&cfg)?;
            println!(
                "backbone {} after {} steps, val loss {:.4} -> {:.4}",
                &rec.config_hash[..12],
                rec.report.steps,
                rec.report.initial_val_loss,
                rec.report.best_val_loss
            );
        }
        Command::Run { methods, force } => {
            let methods = methods.clone().unwrap_or_else(|| vec![cfg.method]);
            run_methods(&cfg, &methods, workers, !force)?;
        }
        Command::Ablate { grid, force } => {
            let grids = Grid::parse(grid)?;
            let cells = pipeline::cmd_ablate(&cfg, &grids, workers, !force)?;
            let text = tables::ablation_tables(&cells);
            println!("{text}");
            write(&cfg.out_root().join("ablate").join("summary.txt"), &text)?;
            let jobs: Vec<_> = cells.into_iter().flat_map(|c| c.runs).collect();
            check_jobs(&jobs)?;
        }
        Command::Report { dirs, output } => {
            let dirs = if dirs.is_empty() { tables::default_report_dirs(&cfg.out_root(), &cfg.seeds) } else { dirs.clone() };
            let rendered = tables::cmd_report(&dirs)?;
            print!("{}", rendered.text);
            if let Some(p) = output {
                write(p, &rendered.text)?;
            }
        }
        Command::All => {
            pipeline::cmd_gen_data(&cfg)?;
            pipeline::cmd_pretrain(&cfg)?;
            run_methods(&cfg, &Strategy::ALL, workers, true)?;
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
