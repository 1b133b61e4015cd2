//! Experiment configuration: per-experiment defaults, a flat TOML file, and
//! `key = value` overrides (flags win over the file).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::grid::{first_non_increasing, parse_f64_grid, parse_usize_grid};
use crate::error::{Error, Result};
use crate::theory::POLE_GUARD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    SftSweepB,
    SftSweepN,
    SftSweepK,
    OsSweepB,
    OsSweepN,
    OsSweepK,
    TheoryCurve,
    CompareTheorySim,
    GdRateDemo,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::SftSweepB,
        Experiment::SftSweepN,
        Experiment::SftSweepK,
        Experiment::OsSweepB,
        Experiment::OsSweepN,
        Experiment::OsSweepK,
        Experiment::TheoryCurve,
        Experiment::CompareTheorySim,
        Experiment::GdRateDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SftSweepB => "sft-sweep-B",
            Experiment::SftSweepN => "sft-sweep-n",
            Experiment::SftSweepK => "sft-sweep-k",
            Experiment::OsSweepB => "os-sweep-B",
            Experiment::OsSweepN => "os-sweep-n",
            Experiment::OsSweepK => "os-sweep-k",
            Experiment::TheoryCurve => "theory-curve",
            Experiment::CompareTheorySim => "compare-theory-sim",
            Experiment::GdRateDemo => "gd-rate-demo",
        }
    }

    /// The grid variable of a sweep (`"B"`, `"n"`, `"k"` or `"beta"`).
    pub fn swept(self) -> Option<&'static str> {
        match self {
            Experiment::SftSweepB | Experiment::OsSweepB | Experiment::CompareTheorySim => Some("B"),
            Experiment::SftSweepN | Experiment::OsSweepN => Some("n"),
            Experiment::SftSweepK | Experiment::OsSweepK => Some("k"),
            Experiment::TheoryCurve => Some("beta"),
            Experiment::GdRateDemo => None,
        }
    }

    pub fn is_sft_sweep(self) -> bool {
        matches!(self, Experiment::SftSweepB | Experiment::SftSweepN | Experiment::SftSweepK)
    }

    pub fn is_os_sweep(self) -> bool {
        matches!(self, Experiment::OsSweepB | Experiment::OsSweepN | Experiment::OsSweepK)
    }

    /// Sweeps record divergences per point; the others abort on them.
    pub fn tolerates_divergence(self) -> bool {
        self.is_sft_sweep() || self.is_os_sweep() || self == Experiment::CompareTheorySim
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                Error::Config(vec![format!("unknown experiment `{s}` (expected one of {})", names.join(", "))])
            })
    }
}

/// How SFT sweeps obtain the post-trained `Ṽ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftSolver {
    ClosedForm,
    Gd,
}

/// Feature covariance of the OS post-training prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainCovariance {
    /// `Σ = Σ₀ + Δ`.
    Posttest,
    /// `A`.
    Posttrain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub d: usize,
    pub m: usize,
    pub n: Vec<usize>,
    pub b: Vec<usize>,
    pub k: Vec<usize>,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub r: f64,
    pub eta: f64,
    /// SFT GD step (auto when absent) or the OS constant `c` in `c / bound`.
    pub gamma_step: Option<f64>,
    pub os_steps: usize,
    pub sft_steps: usize,
    pub solver: SftSolver,
    pub os_train_cov: TrainCovariance,
    /// Rollout length at test time.
    pub test_k: usize,
    /// Monte-Carlo prompts per evaluation when `test_k > 1`.
    pub mc_trials: usize,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Append a `wall_time` column (breaks byte-for-byte reproducibility).
    pub timing: bool,
    pub threads: Option<usize>,
}

/// Default OS step constant `c` in `γ = c / os_hessian_bound(init)`.
pub const DEFAULT_OS_STEP_CONSTANT: f64 = 0.5;

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let mut cfg = Self {
            experiment,
            d: 400,
            m: 200,
            n: vec![800],
            b: vec![400],
            k: vec![1],
            beta: vec![0.5],
            rho: 0.1,
            r: 0.01,
            eta: 0.2,
            gamma_step: None,
            os_steps: 200,
            sft_steps: 200,
            solver: SftSolver::ClosedForm,
            os_train_cov: TrainCovariance::Posttest,
            test_k: 1,
            mc_trials: 2000,
            trials: 10,
            seed: 42,
            out: None,
            timing: false,
            threads: None,
        };
        let ints = |s: &str| parse_usize_grid(s).expect("valid default grid");
        match experiment {
            Experiment::SftSweepB => cfg.b = ints("50:2000:50"),
            Experiment::SftSweepN => cfg.n = ints("100:2000:100"),
            Experiment::SftSweepK => {
                cfg.solver = SftSolver::Gd;
                cfg.k = ints("1:8:1");
            }
            Experiment::OsSweepB | Experiment::OsSweepN | Experiment::OsSweepK => {
                cfg.d = 20;
                cfg.m = 10;
                cfg.n = vec![200];
                cfg.b = vec![100];
                cfg.k = vec![2];
                match experiment {
                    Experiment::OsSweepB => cfg.b = ints("20:200:20"),
                    Experiment::OsSweepN => cfg.n = ints("50:500:50"),
                    _ => cfg.k = ints("1,2,4,8"),
                }
            }
            Experiment::TheoryCurve => {
                cfg.d = 600;
                cfg.m = 300;
                cfg.n = vec![1000];
                cfg.r = 0.1;
                cfg.trials = 0;
                cfg.beta = parse_f64_grid("0.05:0.95:0.05,1.05:3:0.05").expect("valid default grid");
            }
            Experiment::CompareTheorySim => {
                cfg.d = 600;
                cfg.m = 300;
                cfg.n = vec![1000];
                cfg.r = 0.1;
                cfg.b = ints("120,240,360,480,780,960,1200");
            }
            Experiment::GdRateDemo => {
                cfg.d = 20;
                cfg.m = 10;
                cfg.n = vec![50];
                cfg.b = vec![15];
                cfg.k = vec![3];
                cfg.trials = 5;
            }
        }
        cfg
    }

    /// Scalar value of a non-swept integer grid.
    pub fn single(values: &[usize]) -> usize {
        values[0]
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn scalar<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.trim().parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
        }
        let grid = |v: &str| parse_usize_grid(v).map_err(|e| format!("{key}: {e}"));
        match key {
            "d" => self.d = scalar(key, value)?,
            "m" => self.m = scalar(key, value)?,
            "n" => self.n = grid(value)?,
            "B" | "b" => self.b = grid(value)?,
            "k" => self.k = grid(value)?,
            "beta" => self.beta = parse_f64_grid(value).map_err(|e| format!("{key}: {e}"))?,
            "rho" => self.rho = scalar(key, value)?,
            "r" => self.r = scalar(key, value)?,
            "eta" => self.eta = scalar(key, value)?,
            "gamma_step" => self.gamma_step = Some(scalar(key, value)?),
            "os_steps" => self.os_steps = scalar(key, value)?,
            "sft_steps" => self.sft_steps = scalar(key, value)?,
            "solver" => {
                self.solver = match value.trim() {
                    "closed-form" | "closed_form" => SftSolver::ClosedForm,
                    "gd" => SftSolver::Gd,
                    other => return Err(format!("solver: expected `closed-form` or `gd`, got `{other}`")),
                }
            }
            "os_train_cov" => {
                self.os_train_cov = match value.trim() {
                    "posttest" => TrainCovariance::Posttest,
                    "posttrain" => TrainCovariance::Posttrain,
                    other => return Err(format!("os_train_cov: expected `posttest` or `posttrain`, got `{other}`")),
                }
            }
            "test_k" => self.test_k = scalar(key, value)?,
            "mc_trials" => self.mc_trials = scalar(key, value)?,
            "trials" => self.trials = scalar(key, value)?,
            "seed" => self.seed = scalar(key, value)?,
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "timing" => self.timing = scalar(key, value)?,
            "threads" => self.threads = Some(scalar(key, value)?),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

fn toml_value_text(value: &toml::Value) -> std::result::Result<String, String> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items.iter().map(toml_value_text).collect::<std::result::Result<Vec<_>, _>>()?.join(","),
        other => return Err(format!("unsupported value `{other}`")),
    })
}

/// Builds a validated configuration from defaults, an optional TOML file
/// body and flag overrides. All problems are reported together.
pub fn load_config(experiment: Experiment, file: Option<&str>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::defaults(experiment);
    let mut errors = Vec::new();
    if let Some(text) = file {
        match text.parse::<toml::Table>() {
            Ok(table) => {
                for (key, value) in &table {
                    if key == "experiment" {
                        match value.as_str().map(str::parse::<Experiment>) {
                            Some(Ok(e)) if e == experiment => {}
                            Some(Ok(e)) => errors.push(format!("config file is for `{e}`, not `{experiment}`")),
                            _ => errors.push(format!("experiment: invalid value `{value}`")),
                        }
                        continue;
                    }
                    match toml_value_text(value) {
                        Ok(text) => {
                            if let Err(e) = cfg.set(key, &text) {
                                errors.push(e);
                            }
                        }
                        Err(e) => errors.push(format!("{key}: {e}")),
                    }
                }
            }
            Err(e) => errors.push(format!("config file: {}", e.message())),
        }
    }
    for (key, value) in overrides {
        if let Err(e) = cfg.set(key, value) {
            errors.push(e);
        }
    }
    if let Err(mut more) = validate_config(&cfg) {
        errors.append(&mut more);
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors))
    }
}

/// Every violation in `cfg`, or `Ok` if there are none.
pub fn validate_config(cfg: &ExperimentConfig) -> std::result::Result<(), Vec<String>> {
    let mut errors = Vec::new();
    let exp = cfg.experiment;
    if cfg.d == 0 {
        errors.push("d must be >= 1".to_string());
    }
    if cfg.m == 0 {
        errors.push("m must be >= 1".to_string());
    }
    if cfg.m >= cfg.d {
        errors.push("m must be < d".to_string());
    }
    if !(cfg.rho >= 0.0 && cfg.rho.is_finite()) {
        errors.push(format!("rho must be >= 0, got {}", cfg.rho));
    }
    if !(cfg.r >= 0.0 && cfg.r.is_finite()) {
        errors.push(format!("r must be >= 0, got {}", cfg.r));
    }
    if !(cfg.eta > 0.0 && cfg.eta < 1.0) {
        errors.push(format!("eta must lie in (0, 1), got {}", cfg.eta));
    }
    if let Some(g) = cfg.gamma_step {
        if !(g > 0.0 && g.is_finite()) {
            errors.push(format!("gamma_step must be > 0, got {g}"));
        }
    }
    if cfg.test_k == 0 {
        errors.push("test_k must be >= 1".to_string());
    }
    if cfg.mc_trials == 0 {
        errors.push("mc_trials must be >= 1".to_string());
    }
    if cfg.threads == Some(0) {
        errors.push("threads must be >= 1".to_string());
    }

    let swept = exp.swept();
    let int_grids: [(&str, &Vec<usize>); 3] = [("n", &cfg.n), ("B", &cfg.b), ("k", &cfg.k)];
    for (name, values) in int_grids {
        if values.is_empty() {
            errors.push(format!("{name} grid is empty"));
            continue;
        }
        if values.contains(&0) {
            errors.push(format!("{name} values must be >= 1"));
        }
        if swept == Some(name) {
            if let Some(i) = first_non_increasing(values) {
                errors.push(format!("{name} grid must be strictly increasing (entry {i} is {})", values[i]));
            }
        } else if values.len() > 1 {
            errors.push(format!("{name} must be a single value for {exp} (only {} is swept)", swept.unwrap_or("nothing")));
        }
    }

    match exp {
        Experiment::TheoryCurve => {
            if cfg.beta.is_empty() {
                errors.push("beta grid is empty".to_string());
            }
            if let Some(i) = first_non_increasing(&cfg.beta) {
                errors.push(format!("beta grid must be strictly increasing (entry {i} is {})", cfg.beta[i]));
            }
            if cfg.beta.iter().any(|b| !(*b >= 0.0)) {
                errors.push("beta values must be >= 0".to_string());
            }
            if let Some(b) = cfg.beta.iter().find(|b| (**b - 1.0).abs() <= POLE_GUARD) {
                errors.push(format!("beta grid contains {b}, inside the pole guard |beta - 1| <= {POLE_GUARD:e}"));
            }
            if cfg.r == 0.0 {
                errors.push("theory-curve needs r > 0 (r = 0 is a pole of the theory)".to_string());
            }
        }
        Experiment::CompareTheorySim => {
            if cfg.r == 0.0 {
                errors.push("compare-theory-sim needs r > 0 (r = 0 is a pole of the theory)".to_string());
            }
            if let Some(b) = cfg.b.iter().find(|&&b| (b as f64 / cfg.d as f64 - 1.0).abs() <= POLE_GUARD) {
                errors.push(format!("B = {b} gives beta = B/d inside the pole guard |beta - 1| <= {POLE_GUARD:e}"));
            }
        }
        _ => {}
    }
    if exp != Experiment::TheoryCurve && cfg.trials == 0 {
        errors.push(format!("trials must be >= 1 for {exp}"));
    }
    if exp == Experiment::SftSweepK && cfg.solver == SftSolver::ClosedForm {
        // Allowed, but flat: the minimizer does not depend on k.
    }

    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("sft-sweep-q".parse::<Experiment>().is_err());
    }

    #[test]
    fn defaults_are_valid() {
        for e in Experiment::ALL {
            assert_eq!(validate_config(&ExperimentConfig::defaults(e)), Ok(()), "{e}");
        }
    }

    #[test]
    fn m_not_below_d() {
        let mut cfg = ExperimentConfig::defaults(Experiment::SftSweepB);
        cfg.m = cfg.d;
        assert!(validate_config(&cfg).unwrap_err().contains(&"m must be < d".to_string()));
    }

    #[test]
    fn pole_in_beta_grid() {
        let mut cfg = ExperimentConfig::defaults(Experiment::TheoryCurve);
        cfg.beta = vec![0.5, 1.0, 1.5];
        let errors = validate_config(&cfg).unwrap_err();
        assert!(errors.iter().any(|e| e.contains("pole guard")), "{errors:?}");
    }

    #[test]
    fn empty_grid() {
        let mut cfg = ExperimentConfig::defaults(Experiment::SftSweepB);
        cfg.b.clear();
        assert!(validate_config(&cfg).unwrap_err().iter().any(|e| e.contains("B grid is empty")));
    }

    #[test]
    fn all_errors_reported_together() {
        let mut cfg = ExperimentConfig::defaults(Experiment::SftSweepB);
        cfg.m = 500;
        cfg.eta = 1.5;
        cfg.n = vec![100, 200];
        cfg.b = vec![100, 50];
        assert_eq!(validate_config(&cfg).unwrap_err().len(), 4);
    }

    #[test]
    fn file_then_flags() {
        let file = "d = 40\nm = 20\nB = \"10:50:10\"\nrho = 0.5\ntrials = 3\n";
        let flags = vec![("rho".to_string(), "0.25".to_string()), ("B".to_string(), "20,40".to_string())];
        let cfg = load_config(Experiment::SftSweepB, Some(file), &flags).unwrap();
        assert_eq!((cfg.d, cfg.m, cfg.trials), (40, 20, 3));
        assert_eq!(cfg.rho, 0.25);
        assert_eq!(cfg.b, vec![20, 40]);
    }

    #[test]
    fn toml_arrays_are_grids() {
        let cfg = load_config(Experiment::OsSweepK, Some("k = [1, 2, 4]"), &[]).unwrap();
        assert_eq!(cfg.k, vec![1, 2, 4]);
    }

    #[test]
    fn bad_file_and_flags_collected() {
        let err = load_config(
            Experiment::SftSweepB,
            Some("bogus = 1\nexperiment = \"theory-curve\""),
            &[("eta".to_string(), "abc".to_string())],
        )
        .unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert_eq!(list.len(), 3, "{list:?}");
    }
}
