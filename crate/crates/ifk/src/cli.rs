//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use ifk_core::matkit::Vector;
use ifk_core::models::simulate_trajectory;
use ifk_core::rng::{derive_seed, CounterRng};

use crate::bench::{run_experiment, run_key, ExperimentResult};
use crate::config::{ExperimentConfig, CONFIG_KEYS, DEFAULT_SEED};
use crate::error::{IfkError, Result};
use crate::presets::{config_for_model, merge_json, preset, PRESET_NAMES};
use crate::{io, plot, report};

#[derive(Debug, Parser)]
#[command(name = "ifk", version, about = "Forward and inverse Kalman filters: simulation, Monte-Carlo experiments, bounds and stability checks")]
pub struct Cli {
    /// More diagnostics on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one ground-truth trajectory and write it as CSV.
    Simulate {
        /// Built-in model as <name>:<variant>, e.g. linear3:without-df or fm:no-input.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Initial state as comma-separated values (default: the model's preset).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
    },
    /// Run a Monte-Carlo forward/inverse experiment.
    Experiment {
        /// Named preset; combined with --config the file's keys override the preset.
        #[arg(long)]
        preset: Option<String>,
        /// JSON experiment configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_svg: Option<PathBuf>,
    },
    /// Write the forward and inverse information-matrix series of a model.
    Rcrlb {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 200)]
        runs: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the limiting-gain closed-loop test and the bound inequalities of a model.
    Stability {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

/// Preset and configuration-key listing appended to the help text.
pub fn help_appendix() -> String {
    let mut s = String::from("Presets:\n");
    for p in PRESET_NAMES {
        s.push_str(&format!("  {p}\n"));
    }
    s.push_str("\nConfiguration keys (JSON, see docs/config-schema.md):\n");
    for chunk in CONFIG_KEYS.chunks(6) {
        s.push_str(&format!("  {}\n", chunk.join(", ")));
    }
    s.push_str("\nEnvironment: IFK_THREADS caps worker threads (0 = automatic).\n");
    s.push_str("Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.\n");
    s
}

pub fn command() -> clap::Command {
    let extra = help_appendix();
    Cli::command().after_help(extra.clone()).mut_subcommand("experiment", |c| c.after_help(extra))
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| IfkError::io(path, e))
}

fn experiment_config(
    preset_name: Option<&str>,
    config: Option<&Path>,
    runs: Option<usize>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<ExperimentConfig> {
    let mut cfg = match (preset_name, config) {
        (Some(p), Some(c)) => merge_json(&preset(p)?, &read_config(c)?)?,
        (Some(p), None) => preset(p)?,
        (None, Some(c)) => ExperimentConfig::from_json(&read_config(c)?)?,
        (None, None) => return Err(IfkError::config("preset", "either --preset or --config is required")),
    };
    if let Some(r) = runs {
        cfg.runs = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(k) = steps {
        cfg.steps = k;
    }
    Ok(cfg)
}

fn summarize(r: &ExperimentResult, verbose: u8) {
    let s = &r.series;
    let last = s.len() - 1;
    println!(
        "{}: runs used {}/{} ({} diverged), steps {}",
        if r.config.label.is_empty() { r.config.model_label() } else { r.config.label.clone() },
        r.runs_used.len(),
        r.config.runs,
        r.diverged.len(),
        s.len()
    );
    println!(
        "k={}: rmse_fwd={:.6} amse_fwd={:.6} rcrlb_fwd={:.6} amse_inv={:.6} rcrlb_inv={:.6}",
        s.k[last], s.rmse_fwd[last], s.amse_fwd[last], s.rcrlb_fwd[last], s.amse_inv[last], s.rcrlb_inv[last]
    );
    println!("psd checks: {} violations in {}", r.psd_violations, r.psd_checked);
    if verbose > 0 {
        for d in &r.diverged {
            eprintln!("diverged: run {} step {}: {}", d.run, d.step, d.reason);
        }
        eprintln!("bound: {}", r.rcrlb_method);
        eprintln!("wall time: {:.3}s", r.wall_time.as_secs_f64());
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate {
            model,
            steps,
            seed,
            out,
            x0,
        } => {
            let mut cfg = config_for_model(model)?;
            cfg.steps = *steps;
            cfg.seed = *seed;
            cfg.runs = 1;
            let p = cfg.prepare()?;
            let key = run_key(*seed, 0);
            let x0 = match x0 {
                Some(v) if v.len() != p.model.n => {
                    return Err(IfkError::config("x0", format!("expected {} values, got {}", p.model.n, v.len())))
                }
                Some(v) => Vector::from_column_slice(v),
                None => p.draw_init(&mut CounterRng::stream(key, 1)).x0,
            };
            let sched = &p.schedule;
            let t = simulate_trajectory(&p.model, &x0, &|k| sched.at(k), *steps, derive_seed(key, 0))?;
            let meta = vec![
                format!("model={model}"),
                format!("seed={seed}"),
                format!("rng={}", ifk_core::rng::ALGORITHM),
            ];
            io::write_atomic(out, &io::trajectory_csv(&t, &meta)?)?;
            println!("wrote {} steps to {}", steps, out.display());
            Ok(())
        }
        Command::Experiment {
            preset,
            config,
            runs,
            seed,
            steps,
            out_csv,
            out_svg,
        } => {
            let cfg = experiment_config(preset.as_deref(), config.as_deref(), *runs, *seed, *steps)?;
            let result = run_experiment(&cfg)?;
            summarize(&result, cli.verbose);
            let csv_path = out_csv.clone().or_else(|| cfg.out_csv.clone().map(PathBuf::from));
            let svg_path = out_svg.clone().or_else(|| cfg.out_svg.clone().map(PathBuf::from));
            if let Some(p) = csv_path {
                io::export_csv(&result, &p)?;
                println!("wrote {}", p.display());
            }
            if let Some(p) = svg_path {
                plot::emit_plot(&result, &p)?;
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Rcrlb {
            model,
            steps,
            runs,
            seed,
            out,
        } => {
            let mut cfg = config_for_model(model)?;
            cfg.steps = *steps;
            cfg.runs = *runs;
            cfg.seed = *seed;
            let result = run_experiment(&cfg)?;
            let n = result.bound_fwd[0].nrows();
            io::write_atomic(out, &io::j_series_csv(&result, n)?)?;
            let last = result.series.len() - 1;
            println!(
                "k={}: rcrlb_fwd={:.6} rcrlb_inv={:.6} ({} runs)",
                result.series.k[last],
                result.series.rcrlb_fwd[last],
                result.series.rcrlb_inv[last],
                result.runs_used.len()
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Stability {
            model,
            runs,
            steps,
            seed,
        } => {
            let mut cfg = config_for_model(model)?;
            cfg.runs = *runs;
            cfg.steps = *steps;
            cfg.seed = *seed;
            let rep = report::stability_report(&cfg)?;
            print!("{rep}");
            Ok(())
        }
    }
}
