//! Command-line front end: config loading and subcommand dispatch.
//!
//! Exit codes: 0 success, 1 failing verdict, 2 usage or configuration
//! error, 3 numerical failure.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::certify::{
    self, read_entries, replay, report, ContextSpec, Ledger, Stage, UseContextPair, Verdict,
};
use crate::checker::{self, max_until, CheckError, Policy, SolverConfig, UntilProperty};
use crate::expr::{parse_rational, rational_to_f64, ParameterId, ParameterRegion, Rational, Valuation};
use crate::model::{ConcreteMdp, ModelError, Pmdp, CRASH_LABEL, GOAL_LABEL};
use crate::scenario::{unit_region, GridScenario, ScenarioError, LOSS_PARAM, RECONNECT_PARAM};
use crate::sweep::{evaluate_fixed_policy_sweep, run_sweep, SweepError, SweepMode, SweepResult, SweepSpec};

pub const LEDGER_ENV: &str = "PMDP_CERTIFY_LEDGER";
const DEFAULT_LEDGER: &str = "ledger.jsonl";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Validation { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub mode: SweepMode,
    /// Defaults to the full parameter region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<ParameterRegion>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { mode: SweepMode::Grid { points: 11 }, region: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "SimulationConfig::default_episodes")]
    pub episodes: u64,
    #[serde(default = "SimulationConfig::default_horizon")]
    pub horizon: u64,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationConfig {
    fn default_episodes() -> u64 {
        100_000
    }

    fn default_horizon() -> u64 {
        10_000
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { episodes: Self::default_episodes(), horizon: Self::default_horizon(), seed: 0 }
    }
}

/// A pair as written in a config; `context` names an entry of
/// `certification.contexts`, a preset (`suburban`, `urban`), or `config`
/// for the run's own parameter region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub id: String,
    pub theta: f64,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub property: Option<UntilProperty>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub contexts: BTreeMap<String, ParameterRegion>,
    #[serde(default)]
    pub pairs: Vec<PairConfig>,
    /// Sampling used for certification evidence; the region comes from each pair's context.
    #[serde(default = "CertificationConfig::default_sweep")]
    pub sweep: SweepMode,
}

impl CertificationConfig {
    fn default_sweep() -> SweepMode {
        SweepMode::Grid { points: 11 }
    }
}

impl Default for CertificationConfig {
    fn default() -> Self {
        CertificationConfig {
            ledger: None,
            contexts: BTreeMap::new(),
            pairs: Vec::new(),
            sweep: Self::default_sweep(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: GridScenario,
    #[serde(default = "unit_region")]
    pub parameters: ParameterRegion,
    #[serde(default)]
    pub property: UntilProperty,
    #[serde(default)]
    pub solver: SolverConfig,
    /// The valuation used by `check`, `synthesize` and `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valuation: Option<Valuation>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub certification: CertificationConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

impl RunConfig {
    pub fn new(scenario: GridScenario) -> Self {
        RunConfig {
            scenario,
            parameters: unit_region(),
            property: UntilProperty::default(),
            solver: SolverConfig::default(),
            valuation: None,
            sweep: SweepConfig::default(),
            simulation: SimulationConfig::default(),
            certification: CertificationConfig::default(),
            outputs: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        let region = self.sweep.region.clone().unwrap_or_else(|| self.parameters.clone());
        SweepSpec::new(self.sweep.mode.clone(), region, self.solver)
    }

    /// Sampling for certification; `evaluate_context` substitutes each pair's region.
    pub fn certification_spec(&self) -> SweepSpec {
        SweepSpec::new(self.certification.sweep.clone(), self.parameters.clone(), self.solver)
    }

    pub fn build_model(&self) -> Result<Pmdp, ScenarioError> {
        self.scenario.build_with_region(self.parameters.clone())
    }

    /// Resolves a context name to a spec over this run's scenario.
    pub fn context(&self, name: &str) -> Option<ContextSpec> {
        if let Some(region) = self.certification.contexts.get(name) {
            return Some(ContextSpec::new(name, self.scenario.clone(), region.clone()));
        }
        match name {
            "suburban" => Some(ContextSpec::suburban(self.scenario.clone())),
            "urban" => Some(ContextSpec::urban(self.scenario.clone())),
            "config" => Some(ContextSpec::new(name, self.scenario.clone(), self.parameters.clone())),
            _ => None,
        }
    }

    /// The configured pairs in their initial (proposed, early-phase) state.
    pub fn pairs(&self) -> Result<Vec<UseContextPair>, ConfigError> {
        self.certification
            .pairs
            .iter()
            .map(|p| {
                let context = self
                    .context(&p.context)
                    .ok_or_else(|| invalid("certification.pairs", format!("unknown context `{}`", p.context)))?;
                let property = p.property.clone().unwrap_or_else(|| self.property.clone());
                Ok(UseContextPair::new(p.id.clone(), property, p.theta, context))
            })
            .collect()
    }

    /// Cross-field checks; the first problem is reported with its field path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate().map_err(|e| match e {
            ScenarioError::InvalidScenario { field, reason } => invalid(&field, reason),
            other => invalid("scenario", other.to_string()),
        })?;
        let names: Vec<&str> = self.parameters.parameters().map(|p| p.as_str()).collect();
        if names != [LOSS_PARAM, RECONNECT_PARAM] {
            return Err(invalid("parameters", format!("must bound exactly {LOSS_PARAM} and {RECONNECT_PARAM}")));
        }
        for label in [&self.property.avoid, &self.property.reach] {
            if label != GOAL_LABEL && label != CRASH_LABEL {
                return Err(invalid("property", format!("unknown label `{label}`")));
            }
        }
        self.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
        if let Some(v) = &self.valuation {
            let keys: BTreeSet<&ParameterId> = v.iter().map(|(p, _)| p).collect();
            if !keys.iter().copied().eq(self.parameters.parameters()) {
                return Err(invalid("valuation", format!("must assign exactly {LOSS_PARAM} and {RECONNECT_PARAM}")));
            }
            if !self.parameters.contains(v) {
                return Err(invalid("valuation", format!("{v} lies outside the parameter region")));
            }
        }
        let spec = self.sweep_spec();
        if !spec.region.is_subset_of(&self.parameters) {
            return Err(invalid("sweep.region", "must lie inside the parameter region"));
        }
        spec.samples().map_err(|e| invalid("sweep", e.to_string()))?;
        if self.simulation.episodes == 0 || self.simulation.horizon == 0 {
            return Err(invalid("simulation", "episodes and horizon must be at least 1"));
        }
        let mut ids = BTreeSet::new();
        for p in self.pairs()? {
            if !ids.insert(p.id.clone()) {
                return Err(invalid("certification.pairs", format!("duplicate pair id `{}`", p.id)));
            }
            p.validate().map_err(|e| invalid("certification.pairs", e.to_string()))?;
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    RunConfig::from_json(&text)
}

#[derive(Debug, Parser)]
#[command(name = "dyncert", version, about = "Parametric MDP verification and certification workbench")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Link-loss probability, overrides the config valuation.
    #[arg(long, global = true, value_name = "F")]
    pub p1: Option<String>,
    /// Reconnect probability, overrides the config valuation.
    #[arg(long, global = true, value_name = "F")]
    pub p2: Option<String>,
    /// Certification threshold, overrides every configured pair.
    #[arg(long, global = true, value_name = "F")]
    pub theta: Option<f64>,
    /// Seed for random sweeps and simulation.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Primary output file of the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimal value and policy at one valuation.
    Check,
    /// Optimal value over the sweep samples: CSV plus summary.
    Sweep {
        /// Evaluate this policy file instead of optimizing per sample.
        #[arg(long, value_name = "PATH")]
        policy: Option<PathBuf>,
    },
    /// Export the optimal policy at one valuation.
    Synthesize,
    /// Monte Carlo estimate for the optimal (or a given) policy.
    Simulate {
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long, value_name = "PATH")]
        policy: Option<PathBuf>,
    },
    /// Evaluate pairs against their thresholds and record the verdicts.
    Certify(CertifyArgs),
    /// Find the largest upper bound on a parameter that still passes.
    Refine {
        #[arg(long, default_value = LOSS_PARAM)]
        param: String,
        #[arg(long, default_value = "0.01")]
        tol: String,
        #[arg(long)]
        pair: Option<String>,
        #[arg(long, default_value = "")]
        rationale: String,
    },
    /// Move a pair to another certification stage.
    Stage {
        #[arg(long)]
        pair: Option<String>,
        /// early_phase, transitional or confirmatory.
        #[arg(long)]
        to: String,
        #[arg(long, default_value = "")]
        rationale: String,
    },
    /// Inspect the certification ledger.
    Ledger {
        #[command(subcommand)]
        action: LedgerCommand,
    },
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct CertifyArgs {
    /// Only this pair (default: all configured pairs).
    #[arg(long)]
    pub pair: Option<String>,
    #[arg(long, default_value = "")]
    pub rationale: String,
    #[command(subcommand)]
    pub action: Option<CertifyCommand>,
}

#[derive(Debug, Subcommand)]
pub enum CertifyCommand {
    /// Summary table of every pair, replayed from the ledger.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum LedgerCommand {
    /// Print every entry as a JSON line.
    Show,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CheckError> for CliError {
    fn from(e: CheckError) -> Self {
        match e {
            CheckError::NonConvergence { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::NonConvergence { .. } => CliError::Numerical(e.to_string()),
            SweepError::Check { source: CheckError::NonConvergence { .. }, .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<certify::CertifyError> for CliError {
    fn from(e: certify::CertifyError) -> Self {
        match e {
            certify::CertifyError::Sweep(s) => s.into(),
            certify::CertifyError::BracketViolated(_) => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Applies command-line overrides so that the printed config reproduces the run.
fn resolve(cli: &Cli, mut cfg: RunConfig) -> Result<RunConfig, CliError> {
    if cli.p1.is_some() || cli.p2.is_some() {
        let mut v = cfg.valuation.clone().unwrap_or_default();
        for (name, text) in [(LOSS_PARAM, &cli.p1), (RECONNECT_PARAM, &cli.p2)] {
            if let Some(text) = text {
                let r = parse_rational(text).map_err(|e| CliError::Usage(format!("--{name}: {e}")))?;
                v.insert(ParameterId::new(name).expect("valid name"), r);
            }
        }
        cfg.valuation = Some(v);
    }
    if let Some(seed) = cli.seed {
        cfg.simulation.seed = seed;
        match &mut cfg.sweep.mode {
            SweepMode::Random { seed: s, .. } => *s = seed,
            SweepMode::Tied { seed: s, .. } => *s = Some(seed),
            SweepMode::Grid { .. } => {}
        }
    }
    if let Some(theta) = cli.theta {
        if cfg.certification.pairs.is_empty() {
            cfg.certification.pairs.push(PairConfig {
                id: "mission@config".into(),
                theta,
                context: "config".into(),
                property: None,
            });
        }
        for p in &mut cfg.certification.pairs {
            p.theta = theta;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ledger_path(cfg: Option<&RunConfig>) -> PathBuf {
    std::env::var_os(LEDGER_ENV)
        .map(PathBuf::from)
        .or_else(|| cfg.and_then(|c| c.certification.ledger.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_LEDGER))
}

fn valuation(cfg: &RunConfig) -> Result<&Valuation, CliError> {
    cfg.valuation
        .as_ref()
        .ok_or_else(|| CliError::Usage("no valuation: set `valuation` in the config or pass --p1 and --p2".into()))
}

fn instantiate(cfg: &RunConfig) -> Result<ConcreteMdp, CliError> {
    let model = cfg.build_model()?;
    Ok(model.instantiate(valuation(cfg)?)?)
}

fn valuation_json(v: &Valuation) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> =
        v.iter().map(|(p, r)| (p.to_string(), json!(rational_to_f64(r)))).collect();
    serde_json::Value::Object(map)
}

/// Writes to stdout, treating a closed pipe (`| head`) as a normal end of output.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => emit(text),
    }
    Ok(())
}

fn read_policy(path: &Path) -> Result<Policy, CliError> {
    let text = std::fs::read_to_string(path)?;
    Ok(Policy::from_text(&text)?.0)
}

/// Selected pairs, replayed from the ledger so they carry their current state.
fn current_pairs(cfg: &RunConfig, ledger: &Ledger, only: Option<&str>) -> Result<Vec<UseContextPair>, CliError> {
    let initial = cfg.pairs()?;
    if initial.is_empty() {
        return Err(CliError::Usage("no pairs configured: add certification.pairs or pass --theta".into()));
    }
    let mut state = replay(&initial, ledger.entries())?;
    // a --theta override applies to the current run, not only to the initial pairs
    for p in &cfg.certification.pairs {
        if let Some(pair) = state.get_mut(&p.id) {
            pair.theta = p.theta;
        }
    }
    match only {
        Some(id) => Ok(vec![state.remove(id).ok_or_else(|| CliError::Usage(format!("unknown pair `{id}`")))?]),
        None => Ok(state.into_values().collect()),
    }
}

fn single_pair(cfg: &RunConfig, ledger: &Ledger, only: Option<&str>) -> Result<UseContextPair, CliError> {
    let mut pairs = current_pairs(cfg, ledger, only)?;
    if pairs.len() != 1 {
        return Err(CliError::Usage("several pairs are configured, choose one with --pair".into()));
    }
    Ok(pairs.remove(0))
}

fn execute(cli: &Cli) -> Result<i32, CliError> {
    if let Some(Command::Ledger { action: LedgerCommand::Show }) = &cli.command {
        let cfg = cli.config.as_ref().map(load_config).transpose()?;
        let path = ledger_path(cfg.as_ref());
        if path.exists() {
            for e in read_entries(&path)? {
                emit(&format!("{}\n", serde_json::to_string(&e).expect("entry serializes")));
            }
        }
        return Ok(EXIT_OK);
    }

    let path = cli.config.as_ref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let cfg = resolve(cli, load_config(path)?)?;
    if cli.print_config {
        emit(&format!("{}\n", cfg.to_json()));
        return Ok(EXIT_OK);
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Usage("no subcommand given, see --help".into()));
    };

    match command {
        Command::Check => {
            let m = instantiate(&cfg)?;
            let r = max_until(&m, &cfg.property, &cfg.solver)?;
            let policy_path = cli.out.as_ref().or(cfg.outputs.policy.as_ref());
            if let Some(p) = policy_path {
                std::fs::write(p, r.policy.to_text(&cfg.scenario.describe()))?;
            }
            let out = json!({
                "value": r.value_at_initial,
                "valuation": valuation_json(valuation(&cfg)?),
                "iterations": r.iterations,
                "residual": r.residual,
                "states": m.state_count(),
            });
            emit(&format!("{out}\n"));
            Ok(EXIT_OK)
        }
        Command::Synthesize => {
            let m = instantiate(&cfg)?;
            let r = max_until(&m, &cfg.property, &cfg.solver)?;
            let text = r.policy.to_text(&cfg.scenario.describe());
            write_or_print(cli.out.as_ref().or(cfg.outputs.policy.as_ref()), &text)?;
            Ok(EXIT_OK)
        }
        Command::Simulate { episodes, horizon, policy } => {
            let m = instantiate(&cfg)?;
            let optimal = max_until(&m, &cfg.property, &cfg.solver)?;
            let (policy, value) = match policy {
                Some(path) => {
                    let p = read_policy(path)?;
                    let v = checker::evaluate_policy(&m, &p, &cfg.property, &cfg.solver)?;
                    (p, v)
                }
                None => (optimal.policy, optimal.value_at_initial),
            };
            let episodes = episodes.unwrap_or(cfg.simulation.episodes);
            let horizon = horizon.unwrap_or(cfg.simulation.horizon);
            let estimate =
                checker::simulate(&m, &policy, &cfg.property, episodes, horizon, cfg.simulation.seed)?;
            let out = json!({
                "estimate": estimate,
                "value": value,
                "error": (estimate - value).abs(),
                "episodes": episodes,
                "horizon": horizon,
                "seed": cfg.simulation.seed,
            });
            write_or_print(cli.out.as_ref(), &format!("{out}\n"))?;
            Ok(EXIT_OK)
        }
        Command::Sweep { policy } => {
            let model = cfg.build_model()?;
            let spec = cfg.sweep_spec();
            let result: SweepResult = match policy {
                Some(path) => evaluate_fixed_policy_sweep(&model, &read_policy(path)?, &cfg.property, &spec)?,
                None => run_sweep(&model, &cfg.property, &spec)?,
            };
            let summary = format!("{}\n", result.summary_json());
            match cli.out.as_ref().or(cfg.outputs.csv.as_ref()) {
                Some(p) => {
                    std::fs::write(p, result.to_csv())?;
                    emit(&summary);
                }
                None => {
                    emit(&result.to_csv());
                    eprint!("{summary}");
                }
            }
            if let Some(p) = &cfg.outputs.summary {
                std::fs::write(p, &summary)?;
            }
            Ok(EXIT_OK)
        }
        Command::Certify(args) => {
            let mut ledger = Ledger::open(ledger_path(Some(&cfg)))?;
            if let Some(CertifyCommand::Report) = args.action {
                let state = replay(&cfg.pairs()?, ledger.entries())?;
                emit(&report(&state, ledger.entries()));
                return Ok(EXIT_OK);
            }
            let spec = cfg.certification_spec();
            let mut code = EXIT_OK;
            for mut pair in current_pairs(&cfg, &ledger, args.pair.as_deref())? {
                let e = certify::evaluate_context(&mut pair, &spec, &mut ledger, &args.rationale)?;
                let min = e.evidence.min().map_or("-".to_string(), |m| m.to_string());
                emit(&format!("{} {} min={} theta={}\n", pair.id, e.verdict, min, pair.theta));
                code = code.max(match e.verdict {
                    Verdict::Pass => EXIT_OK,
                    Verdict::Fail => EXIT_FAIL,
                    Verdict::Undetermined => EXIT_NUMERICAL,
                });
            }
            Ok(code)
        }
        Command::Refine { param, tol, pair, rationale } => {
            let mut ledger = Ledger::open(ledger_path(Some(&cfg)))?;
            let mut pair = single_pair(&cfg, &ledger, pair.as_deref())?;
            let param = ParameterId::new(param.as_str()).map_err(|e| CliError::Usage(e.to_string()))?;
            let tol: Rational = certify::parse_bound(tol)?;
            let r = certify::refine_parameter_bound(&mut pair, &param, &cfg.certification_spec(), &tol, &mut ledger, rationale)?;
            let out = json!({
                "pair": pair.id,
                "parameter": param.as_str(),
                "bound": rational_to_f64(&r.bound),
                "bound_exact": r.bound.to_string(),
                "failing": r.failing.as_ref().map(rational_to_f64),
                "interval": [0.0, rational_to_f64(&r.bound)],
            });
            write_or_print(cli.out.as_ref(), &format!("{out}\n"))?;
            Ok(EXIT_OK)
        }
        Command::Stage { pair, to, rationale } => {
            let to = Stage::parse(to).ok_or_else(|| CliError::Usage(format!("unknown stage `{to}`")))?;
            let mut ledger = Ledger::open(ledger_path(Some(&cfg)))?;
            let mut pair = single_pair(&cfg, &ledger, pair.as_deref())?;
            let e = certify::transition_stage(&mut pair, to, &mut ledger, rationale)?;
            emit(&format!("{}\n", serde_json::to_string(&e).expect("entry serializes")));
            Ok(EXIT_OK)
        }
        Command::Ledger { .. } => unreachable!("handled above"),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig::new(GridScenario::small_open())
    }

    #[test]
    fn defaults_are_explicit_after_roundtrip() {
        let cfg = RunConfig::from_json(r#"{"scenario": {"kind": "open", "width": 3, "height": 3,
            "uav_start": [0, 0], "robot_start": [2, 2], "goal": [2, 0]}}"#)
        .unwrap();
        assert_eq!(cfg.solver, SolverConfig::default());
        let text = cfg.to_json();
        assert!(text.contains("\"epsilon\": 1e-6") || text.contains("\"epsilon\": 0.000001"), "{text}");
        assert!(text.contains("\"max_iterations\": 1000000"));
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn goal_out_of_bounds_names_the_field() {
        let mut cfg = base();
        cfg.scenario.goal = crate::scenario::Cell::new(7, 0);
        match RunConfig::from_json(&cfg.to_json()) {
            Err(ConfigError::Validation { field, .. }) => assert_eq!(field, "goal"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_positions() {
        match RunConfig::from_json("{\n  \"scenario\": [1,\n") {
            Err(ConfigError::Parse { line, .. }) => assert!(line >= 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::from_json(r#"{"scenario": 3, "bogus": 1}"#),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn sweep_block_variants() {
        let mut cfg = base();
        cfg.sweep = SweepConfig {
            mode: SweepMode::Tied {
                parameters: vec![ParameterId::new("p1").unwrap(), ParameterId::new("p2").unwrap()],
                range: crate::expr::Interval::unit(),
                samples: 4,
                seed: Some(3),
            },
            region: None,
        };
        let text = cfg.to_json();
        assert!(text.contains("\"mode\": \"tied\""));
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);

        cfg.sweep.region = Some(ParameterRegion::new().with_str("p1", "0", "0.5").unwrap().with_str("p2", "0", "1").unwrap());
        // tied parameters need a region in which the others are fixed; here all are tied
        assert!(RunConfig::from_json(&cfg.to_json()).is_err());
    }

    #[test]
    fn valuation_checks() {
        let mut cfg = base();
        cfg.parameters = ParameterRegion::new().with_str("p1", "0", "0.5").unwrap().with_str("p2", "0", "1").unwrap();
        cfg.valuation = Some(Valuation::parse(&[("p1", "0.7"), ("p2", "0.5")]).unwrap());
        assert!(matches!(cfg.validate(), Err(ConfigError::Validation { field, .. }) if field == "valuation"));
        cfg.valuation = Some(Valuation::parse(&[("p1", "0.2")]).unwrap());
        assert!(matches!(cfg.validate(), Err(ConfigError::Validation { field, .. }) if field == "valuation"));
    }

    #[test]
    fn pairs_resolve_contexts() {
        let mut cfg = base();
        cfg.certification.pairs = vec![
            PairConfig { id: "a".into(), theta: 0.9, context: "suburban".into(), property: None },
            PairConfig { id: "b".into(), theta: 0.9, context: "harbour".into(), property: None },
        ];
        assert!(matches!(cfg.validate(), Err(ConfigError::Validation { field, .. }) if field == "certification.pairs"));
        cfg.certification.contexts.insert("harbour".into(), unit_region());
        let pairs = cfg.pairs().unwrap();
        assert_eq!(pairs[1].context.region, unit_region());
        cfg.certification.pairs[1].id = "a".into();
        assert!(cfg.validate().is_err());
    }
}
