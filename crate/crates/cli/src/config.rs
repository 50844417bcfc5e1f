//! Experiment configuration: JSON file, flag overrides, defaults.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stealth_lqr::model::{problem_from_value, problem_to_value};
use stealth_lqr::ProblemSpec;

use crate::{CliError, CommonArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Mc,
    Bound,
    Both,
}

impl ModeArg {
    pub fn runs_mc(self) -> bool {
        matches!(self, ModeArg::Mc | ModeArg::Both)
    }

    pub fn runs_bound(self) -> bool {
        matches!(self, ModeArg::Bound | ModeArg::Both)
    }

    fn as_str(self) -> &'static str {
        match self {
            ModeArg::Mc => "mc",
            ModeArg::Bound => "bound",
            ModeArg::Both => "both",
        }
    }

    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "mc" => Ok(ModeArg::Mc),
            "bound" => Ok(ModeArg::Bound),
            "both" => Ok(ModeArg::Both),
            other => Err(CliError::Config(format!(
                "mode must be mc, bound, or both; got `{other}`"
            ))),
        }
    }
}

/// Fully resolved experiment parameters.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    /// Intensity list; `None` means the command default.
    pub grid: Option<Vec<f64>>,
    pub eps: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub paths: usize,
    pub seed: u64,
    pub mode: ModeArg,
    pub out: PathBuf,
    pub force: bool,
}

/// Built-in demo problem: the scalar benchmark with horizon 20, both noise
/// variances 0.05, start (1, 4), weights (1, 10, 1, 1), linearly decaying
/// reference, and constant pattern (0.5, -0.1, 0).
pub fn demo_problem() -> ProblemSpec {
    let horizon = 20usize;
    let vbar = (0..=horizon)
        .map(|t| 1.0 - t as f64 / horizon as f64)
        .collect();
    ProblemSpec::onedim(
        horizon, 0.05, 0.05, 1.0, 4.0, 1.0, 10.0, 1.0, 1.0, vbar, 0.5, -0.1, 0.0, 0.0,
    )
    .expect("built-in demo problem is valid")
}

fn field_f64(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<f64>, CliError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| CliError::Config(format!("config field `{key}` must be a number"))),
    }
}

fn field_f64_list(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<Option<Vec<f64>>, CliError> {
    match obj.get(key) {
        None => Ok(None),
        Some(Value::Number(x)) => Ok(Some(vec![x.as_f64().unwrap()])),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| CliError::Config(format!("config field `{key}`: not a number")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(CliError::Config(format!(
            "config field `{key}` must be a number or an array of numbers"
        ))),
    }
}

/// Loads the config file (if any), applies flag overrides, and fills in
/// defaults. The problem may be inline or a path to a problem file.
pub fn resolve(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut problem: Option<ProblemSpec> = None;
    let mut grid: Option<Vec<f64>> = None;
    let mut eps: Option<Vec<f64>> = None;
    let mut a: Option<f64> = None;
    let mut b: Option<f64> = None;
    let mut paths: Option<usize> = None;
    let mut seed: Option<u64> = None;
    let mut mode: Option<ModeArg> = None;
    let mut out: Option<PathBuf> = None;

    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let obj = value
            .as_object()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;

        for key in obj.keys() {
            if !matches!(
                key.as_str(),
                "problem" | "grid" | "eps" | "a" | "b" | "paths" | "seed" | "mode" | "out"
            ) {
                return Err(CliError::Config(format!("unknown config field `{key}`")));
            }
        }
        match obj.get("problem") {
            None => {}
            Some(Value::String(rel)) => {
                let base = path.parent().unwrap_or(Path::new("."));
                let ppath = base.join(rel);
                let text = std::fs::read_to_string(&ppath).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", ppath.display()))
                })?;
                let pvalue: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", ppath.display())))?;
                problem = Some(problem_from_value(&pvalue)?);
            }
            Some(inline) => problem = Some(problem_from_value(inline)?),
        }
        grid = field_f64_list(obj, "grid")?;
        eps = field_f64_list(obj, "eps")?;
        a = field_f64(obj, "a")?;
        b = field_f64(obj, "b")?;
        paths = field_f64(obj, "paths")?.map(|x| x as usize);
        seed = field_f64(obj, "seed")?.map(|x| x as u64);
        if let Some(m) = obj.get("mode") {
            let s = m
                .as_str()
                .ok_or_else(|| CliError::Config("config field `mode` must be a string".into()))?;
            mode = Some(ModeArg::parse(s)?);
        }
        if let Some(o) = obj.get("out") {
            let s = o
                .as_str()
                .ok_or_else(|| CliError::Config("config field `out` must be a string".into()))?;
            out = Some(PathBuf::from(s));
        }
    }

    Ok(ExperimentConfig {
        problem: problem.unwrap_or_else(demo_problem),
        grid: args.grid.clone().or(grid),
        eps: args.eps.clone().or(eps).unwrap_or_else(|| vec![0.02]),
        a: args.alpha.or(a).unwrap_or(0.01),
        b: args.beta.or(b).unwrap_or(0.01),
        paths: args.paths.or(paths).unwrap_or(20_000),
        seed: args.seed.or(seed).unwrap_or(0),
        mode: args.mode.or(mode).unwrap_or(ModeArg::Mc),
        out: args.out.clone().or(out).unwrap_or_else(|| "out".into()),
        force: args.force,
    })
}

impl ExperimentConfig {
    /// Fully explicit JSON form; the output directory is excluded so the
    /// hash identifies the experiment, not its location.
    pub fn to_value(&self, grid_default: &[f64]) -> Value {
        json!({
            "problem": problem_to_value(&self.problem),
            "grid": self.grid.as_deref().unwrap_or(grid_default),
            "eps": self.eps,
            "a": self.a,
            "b": self.b,
            "paths": self.paths,
            "seed": self.seed,
            "mode": self.mode.as_str(),
            "force": self.force,
        })
    }
}
