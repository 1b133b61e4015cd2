use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use icl_lab::harness::{load_config, run_experiment, Experiment};
use icl_lab::Error;

/// Run a named icl-lab experiment and write its CSV table.
///
/// Grids accept comma lists and inclusive `lo:hi:step` ranges, e.g.
/// `--B 50:150:50,175:225:25`. Flags override values from `--config`.
#[derive(Debug, Parser)]
#[command(name = "icl-lab", version)]
struct Cli {
    /// sft-sweep-B, sft-sweep-n, sft-sweep-k, os-sweep-B, os-sweep-n,
    /// os-sweep-k, theory-curve, compare-theory-sim or gd-rate-demo.
    experiment: String,
    /// Flat TOML file of `key = value` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long = "B")]
    b: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    r: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    /// SFT GD step (default: automatic) or OS constant c in c / curvature bound.
    #[arg(long = "gamma-step")]
    gamma_step: Option<String>,
    #[arg(long = "os-steps")]
    os_steps: Option<String>,
    #[arg(long = "sft-steps")]
    sft_steps: Option<String>,
    /// closed-form or gd.
    #[arg(long)]
    solver: Option<String>,
    /// posttest or posttrain.
    #[arg(long = "os-train-cov")]
    os_train_cov: Option<String>,
    /// Rollout length at test time (Monte Carlo when > 1).
    #[arg(long = "test-k")]
    test_k: Option<String>,
    #[arg(long = "mc-trials")]
    mc_trials: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<String>,
    /// Append a wall_time column.
    #[arg(long)]
    timing: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<String>,
}

impl Cli {
    fn overrides(&self) -> Vec<(String, String)> {
        let fields = [
            ("d", &self.d),
            ("m", &self.m),
            ("n", &self.n),
            ("B", &self.b),
            ("k", &self.k),
            ("beta", &self.beta),
            ("rho", &self.rho),
            ("r", &self.r),
            ("eta", &self.eta),
            ("gamma_step", &self.gamma_step),
            ("os_steps", &self.os_steps),
            ("sft_steps", &self.sft_steps),
            ("solver", &self.solver),
            ("os_train_cov", &self.os_train_cov),
            ("test_k", &self.test_k),
            ("mc_trials", &self.mc_trials),
            ("trials", &self.trials),
            ("seed", &self.seed),
            ("out", &self.out),
            ("threads", &self.threads),
        ];
        let mut out: Vec<(String, String)> =
            fields.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect();
        if self.timing {
            out.push(("timing".into(), "true".into()));
        }
        out
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let experiment: Experiment = cli.experiment.parse()?;
    let file = match &cli.config {
        Some(path) => Some(
            std::fs::read_to_string(path)
                .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?,
        ),
        None => None,
    };
    let cfg = load_config(experiment, file.as_deref(), &cli.overrides())?;
    let table = run_experiment(&cfg)?;
    match &cfg.out {
        Some(path) => {
            let mut file = BufWriter::new(File::create(path)?);
            table.write_csv(&mut file)?;
            file.flush()?;
            eprintln!("wrote {} rows to {}", table.rows.len(), path.display());
        }
        None => table.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(errors)) => {
            eprintln!("icl-lab: invalid configuration:");
            for e in errors {
                eprintln!("  - {e}");
            }
            ExitCode::from(2)
        }
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("icl-lab: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("icl-lab: {e}");
            ExitCode::from(1)
        }
    }
}
