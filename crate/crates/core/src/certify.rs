//! Dynamic certification of use/context pairs.
//!
//! A pair couples a mission property and threshold with a deployment context
//! (scenario plus parameter region). Evaluations, stage moves and bound
//! refinements are committed to an append-only JSON-lines ledger; replaying
//! that ledger over the initial pairs reproduces their current state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num::{One, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checker::UntilProperty;
use crate::expr::{parse_rational, serde_rational, Interval, ParameterId, ParameterRegion, Rational};
use crate::scenario::{unit_region, GridScenario, ScenarioError, LOSS_PARAM, RECONNECT_PARAM};
use crate::sweep::{run_sweep, with_upper_bound, SweepError, SweepResult, SweepSpec};

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("unknown pair `{0}`")]
    UnknownPair(String),
    #[error("pair `{id}` is malformed: {reason}")]
    MalformedPair { id: String, reason: String },
    #[error("invalid base model: {0}")]
    InvalidBaseModel(String),
    #[error("no feasible bound: the region with {param} = 0 does not reach the threshold")]
    NoFeasibleBound { param: ParameterId },
    #[error("bisection bracket violated: {0}")]
    BracketViolated(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("ledger line {line}: {reason}")]
    MalformedLedger { line: usize, reason: String },
    #[error("ledger replay diverged at entry {seq}: {reason}")]
    ReplayMismatch { seq: u64, reason: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    EarlyPhase,
    Transitional,
    Confirmatory,
}

impl Stage {
    pub fn parse(text: &str) -> Option<Stage> {
        match text.replace('-', "_").as_str() {
            "early_phase" | "early" => Some(Stage::EarlyPhase),
            "transitional" => Some(Stage::Transitional),
            "confirmatory" => Some(Stage::Confirmatory),
            _ => None,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::EarlyPhase => "early_phase",
            Stage::Transitional => "transitional",
            Stage::Confirmatory => "confirmatory",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Proposed,
    Certified,
    Rejected,
}

impl std::fmt::Display for PairStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairStatus::Proposed => "proposed",
            PairStatus::Certified => "certified",
            PairStatus::Rejected => "rejected",
        })
    }
}

/// A deployment context: where the system runs and which parameter values to expect there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub name: String,
    pub scenario: GridScenario,
    pub region: ParameterRegion,
}

impl ContextSpec {
    pub fn new(name: impl Into<String>, scenario: GridScenario, region: ParameterRegion) -> Self {
        ContextSpec { name: name.into(), scenario, region }
    }

    fn preset(name: &str, scenario: GridScenario, loss: (&str, &str)) -> Self {
        let region = ParameterRegion::new()
            .with_str(LOSS_PARAM, loss.0, loss.1)
            .and_then(|r| r.with_str(RECONNECT_PARAM, "0.05", "1"))
            .expect("preset bounds are valid");
        ContextSpec::new(name, scenario, region)
    }

    /// Link loss `p1` in `[0, 0.15]`, reconnect `p2` in `[0.05, 1]`.
    pub fn suburban(scenario: GridScenario) -> Self {
        Self::preset("suburban", scenario, ("0", "0.15"))
    }

    /// Link loss `p1` in `[0.10, 0.25]`, reconnect `p2` in `[0.05, 1]`.
    pub fn urban(scenario: GridScenario) -> Self {
        Self::preset("urban", scenario, ("0.10", "0.25"))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.scenario.validate().map_err(|e| e.to_string())?;
        let unit = unit_region();
        if self.region.parameters().ne(unit.parameters()) || !self.region.is_subset_of(&unit) {
            return Err(format!("context region {} must bound exactly {LOSS_PARAM} and {RECONNECT_PARAM}", self.region));
        }
        Ok(())
    }
}

/// A property with the probability it must be satisfied with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mapping {
    pub name: String,
    #[serde(default)]
    pub property: UntilProperty,
    pub threshold: f64,
}

/// Modules, contexts, mappings from context to requirements, and environmental variations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModelSpec {
    pub modules: Vec<String>,
    pub contexts: BTreeMap<String, ContextSpec>,
    pub mappings: Vec<Mapping>,
    pub variations: ParameterRegion,
}

impl BaseModelSpec {
    pub fn validate(&self) -> Result<(), CertifyError> {
        let bad = |s: String| Err(CertifyError::InvalidBaseModel(s));
        if self.modules.is_empty() {
            return bad("at least one module is required".into());
        }
        for m in &self.mappings {
            if !(0.0..=1.0).contains(&m.threshold) {
                return bad(format!("threshold {} of mapping `{}` is outside [0, 1]", m.threshold, m.name));
            }
        }
        for (key, c) in &self.contexts {
            c.validate().or_else(|e| bad(format!("context `{key}`: {e}")))?;
            if !c.region.is_subset_of(&self.variations) {
                return bad(format!("context `{key}` exceeds the declared variations"));
            }
        }
        Ok(())
    }

    /// One proposed pair per mapping and context, with id `mapping@context`.
    pub fn pairs(&self) -> Result<Vec<UseContextPair>, CertifyError> {
        self.validate()?;
        let mut out = Vec::new();
        for m in &self.mappings {
            for (key, c) in &self.contexts {
                out.push(UseContextPair::new(format!("{}@{key}", m.name), m.property.clone(), m.threshold, c.clone()));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UseContextPair {
    pub id: String,
    #[serde(default)]
    pub property: UntilProperty,
    pub theta: f64,
    pub context: ContextSpec,
    #[serde(default = "initial_stage")]
    pub stage: Stage,
    #[serde(default = "initial_status")]
    pub status: PairStatus,
}

fn initial_stage() -> Stage {
    Stage::EarlyPhase
}

fn initial_status() -> PairStatus {
    PairStatus::Proposed
}

impl UseContextPair {
    pub fn new(id: impl Into<String>, property: UntilProperty, theta: f64, context: ContextSpec) -> Self {
        UseContextPair { id: id.into(), property, theta, context, stage: initial_stage(), status: initial_status() }
    }

    pub fn validate(&self) -> Result<(), CertifyError> {
        let bad = |reason: String| CertifyError::MalformedPair { id: self.id.clone(), reason };
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return Err(bad("id must be nonempty and contain no whitespace".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(bad(format!("threshold {} is outside [0, 1]", self.theta)));
        }
        self.context.validate().map_err(bad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Undetermined,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Undetermined => "UNDETERMINED",
        })
    }
}

/// What a sweep showed: its spec (with seed), the summary and a digest of the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub sweep: SweepSpec,
    pub summary: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_sha256: Option<String>,
}

impl Evidence {
    fn from_result(sweep: SweepSpec, r: &SweepResult) -> Self {
        let digest = Sha256::digest(r.to_csv().as_bytes());
        Evidence { sweep, summary: r.summary_json(), csv_sha256: Some(hex::encode(digest)) }
    }

    fn from_failure(sweep: SweepSpec, e: &SweepError) -> Self {
        Evidence { sweep, summary: serde_json::json!({ "error": e.to_string() }), csv_sha256: None }
    }

    pub fn min(&self) -> Option<f64> {
        self.summary.get("min").and_then(|v| v.as_f64())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub verdict: Verdict,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LedgerAction {
    Evaluated {
        theta: f64,
        verdict: Verdict,
    },
    StageChanged {
        from: Stage,
        to: Stage,
    },
    RegionRefined {
        theta: f64,
        parameter: ParameterId,
        #[serde(with = "serde_rational")]
        bound: Rational,
        /// First failing bracket, absent when the whole range passes.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failing: Option<String>,
        region: ParameterRegion,
        /// The sweep at the first failing bracket.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failing_evidence: Option<Evidence>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: u64,
    pub timestamp: String,
    pub pair: String,
    pub action: LedgerAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Evidence>,
    #[serde(default)]
    pub rationale: String,
}

/// Append-only entry log, optionally mirrored to a JSON-lines file.
///
/// Appending takes `&mut self`; share one ledger between threads behind a
/// mutex so entries commit in completion order.
#[derive(Debug, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    sink: Option<(PathBuf, File)>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger::default()
    }

    /// Opens (creating if needed) a ledger file and loads its entries.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CertifyError> {
        let path = path.as_ref();
        let entries = if path.exists() { read_entries(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Ledger { entries, sink: Some((path.to_path_buf(), file)) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.seq + 1)
    }

    pub fn append(
        &mut self,
        pair: &str,
        action: LedgerAction,
        evidence: Option<Evidence>,
        rationale: &str,
    ) -> Result<LedgerEntry, CertifyError> {
        let entry = LedgerEntry {
            seq: self.next_seq(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            pair: pair.to_string(),
            action,
            evidence,
            rationale: rationale.to_string(),
        };
        if let Some((_, file)) = &mut self.sink {
            let mut line = serde_json::to_string(&entry).expect("ledger entries serialize");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries.push(entry.clone());
        Ok(entry)
    }
}

/// Parses a JSON-lines ledger, checking that sequence numbers strictly increase.
pub fn read_entries(path: impl AsRef<Path>) -> Result<Vec<LedgerEntry>, CertifyError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<LedgerEntry> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CertifyError::MalformedLedger { line: i + 1, reason };
        let entry: LedgerEntry = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if let Some(prev) = out.last() {
            if entry.seq <= prev.seq {
                return Err(bad(format!("sequence {} does not follow {}", entry.seq, prev.seq)));
            }
        }
        out.push(entry);
    }
    Ok(out)
}

fn sweep_for(spec: &SweepSpec, region: ParameterRegion) -> SweepSpec {
    let mut spec = spec.clone();
    spec.region = region;
    spec
}

/// Runs the sweep over `region` without touching any ledger.
fn assess_region(
    pair: &UseContextPair,
    spec: &SweepSpec,
    region: ParameterRegion,
) -> Result<Evaluation, CertifyError> {
    let model = pair.context.scenario.build()?;
    let spec = sweep_for(spec, region);
    match run_sweep(&model, &pair.property, &spec) {
        Ok(r) => {
            let verdict = if r.min >= pair.theta { Verdict::Pass } else { Verdict::Fail };
            Ok(Evaluation { verdict, evidence: Evidence::from_result(spec, &r) })
        }
        Err(e @ SweepError::NonConvergence { .. }) => {
            Ok(Evaluation { verdict: Verdict::Undetermined, evidence: Evidence::from_failure(spec, &e) })
        }
        Err(e) => Err(e.into()),
    }
}

/// The pure half of [`evaluate_context`]: sweeps the pair's context region.
pub fn assess(pair: &UseContextPair, spec: &SweepSpec) -> Result<Evaluation, CertifyError> {
    pair.validate()?;
    assess_region(pair, spec, pair.context.region.clone())
}

fn apply_verdict(pair: &mut UseContextPair, verdict: Verdict) {
    match verdict {
        Verdict::Pass => pair.status = PairStatus::Certified,
        Verdict::Fail => pair.status = PairStatus::Rejected,
        Verdict::Undetermined => {}
    }
}

/// Commits an evaluation produced by [`assess`].
pub fn commit_evaluation(
    pair: &mut UseContextPair,
    evaluation: &Evaluation,
    ledger: &mut Ledger,
    rationale: &str,
) -> Result<LedgerEntry, CertifyError> {
    let action = LedgerAction::Evaluated { theta: pair.theta, verdict: evaluation.verdict };
    let entry = ledger.append(&pair.id, action, Some(evaluation.evidence.clone()), rationale)?;
    apply_verdict(pair, evaluation.verdict);
    Ok(entry)
}

/// Sweeps the context region; passes iff the sampled minimum reaches the threshold.
/// Non-convergence yields `Undetermined` and leaves the status unchanged.
pub fn evaluate_context(
    pair: &mut UseContextPair,
    spec: &SweepSpec,
    ledger: &mut Ledger,
    rationale: &str,
) -> Result<Evaluation, CertifyError> {
    let evaluation = assess(pair, spec)?;
    commit_evaluation(pair, &evaluation, ledger, rationale)?;
    Ok(evaluation)
}

/// Moves the pair to `to`, in any direction; a move to the current stage is recorded too.
pub fn transition_stage(
    pair: &mut UseContextPair,
    to: Stage,
    ledger: &mut Ledger,
    rationale: &str,
) -> Result<LedgerEntry, CertifyError> {
    let entry = ledger.append(&pair.id, LedgerAction::StageChanged { from: pair.stage, to }, None, rationale)?;
    pair.stage = to;
    Ok(entry)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// Largest tested upper bound whose region passes.
    pub bound: Rational,
    /// Smallest tested bound that fails; `None` when the full range passes.
    pub failing: Option<Rational>,
    pub passing_evidence: Evidence,
    pub failing_evidence: Option<Evidence>,
    pub entry: LedgerEntry,
}

/// Bisects the upper bound `b` of `param` over `[0, 1]`, keeping other ranges
/// fixed, until the bracket is at most `tol` wide. The pair's region becomes
/// `param ∈ [0, b]`.
///
/// Before returning, the region at `min(b + 2·tol, 1)` is swept and must
/// fail unless `b = 1`.
pub fn refine_parameter_bound(
    pair: &mut UseContextPair,
    param: &ParameterId,
    spec: &SweepSpec,
    tol: &Rational,
    ledger: &mut Ledger,
    rationale: &str,
) -> Result<Refinement, CertifyError> {
    pair.validate()?;
    if *tol <= Rational::zero() {
        return Err(CertifyError::InvalidRequest("tolerance must be positive".into()));
    }
    let region_at = |b: &Rational| {
        with_upper_bound(&pair.context.region, param, b.clone())
            .ok_or_else(|| CertifyError::InvalidRequest(format!("parameter `{param}` is not in the context region")))
    };
    let probe = |b: &Rational| -> Result<Evaluation, CertifyError> {
        let e = assess_region(pair, spec, region_at(b)?)?;
        match e.verdict {
            Verdict::Undetermined => Err(CertifyError::Sweep(SweepError::InvalidSpec(format!(
                "sweep at bound {b} did not converge"
            )))),
            _ => Ok(e),
        }
    };

    let zero = Rational::zero();
    let one = Rational::one();
    let at_zero = probe(&zero)?;
    if at_zero.verdict != Verdict::Pass {
        return Err(CertifyError::NoFeasibleBound { param: param.clone() });
    }
    let at_one = probe(&one)?;
    let (bound, passing, failing) = if at_one.verdict == Verdict::Pass {
        (one.clone(), at_one, None)
    } else {
        let (mut lo, mut lo_eval) = (zero, at_zero);
        let (mut hi, mut hi_eval) = (one.clone(), at_one);
        let two = Rational::from_integer(2.into());
        while &hi - &lo > *tol {
            let mid = (&lo + &hi) / &two;
            let e = probe(&mid)?;
            if e.verdict == Verdict::Pass {
                (lo, lo_eval) = (mid, e);
            } else {
                (hi, hi_eval) = (mid, e);
            }
        }
        let check = (&lo + tol * &two).min(one.clone());
        let check_eval = if check == hi { hi_eval } else { probe(&check)? };
        if check_eval.verdict == Verdict::Pass {
            return Err(CertifyError::BracketViolated(format!(
                "bound {lo} passes but so does {check}; the value is not monotone in `{param}` on this grid"
            )));
        }
        (lo, lo_eval, Some((check, check_eval)))
    };

    let region = region_at(&bound)?;
    let action = LedgerAction::RegionRefined {
        theta: pair.theta,
        parameter: param.clone(),
        bound: bound.clone(),
        failing: failing.as_ref().map(|(b, _)| b.to_string()),
        region: region.clone(),
        failing_evidence: failing.as_ref().map(|(_, e)| e.evidence.clone()),
    };
    let entry = ledger.append(&pair.id, action, Some(passing.evidence.clone()), rationale)?;
    pair.context.region = region;
    Ok(Refinement {
        bound,
        failing: failing.as_ref().map(|(b, _)| b.clone()),
        passing_evidence: passing.evidence,
        failing_evidence: failing.map(|(_, e)| e.evidence),
        entry,
    })
}

/// Rebuilds pair states by applying `entries` to `initial` in order.
pub fn replay(
    initial: &[UseContextPair],
    entries: &[LedgerEntry],
) -> Result<BTreeMap<String, UseContextPair>, CertifyError> {
    let mut pairs: BTreeMap<String, UseContextPair> = initial.iter().map(|p| (p.id.clone(), p.clone())).collect();
    let mut last = 0u64;
    for e in entries {
        let mismatch = |reason: String| CertifyError::ReplayMismatch { seq: e.seq, reason };
        if e.seq <= last {
            return Err(mismatch(format!("sequence does not increase after {last}")));
        }
        last = e.seq;
        let pair = pairs.get_mut(&e.pair).ok_or_else(|| CertifyError::UnknownPair(e.pair.clone()))?;
        match &e.action {
            LedgerAction::Evaluated { theta, verdict } => {
                pair.theta = *theta;
                apply_verdict(pair, *verdict);
            }
            LedgerAction::StageChanged { from, to } => {
                if *from != pair.stage {
                    return Err(mismatch(format!("recorded stage {from}, replayed stage {}", pair.stage)));
                }
                pair.stage = *to;
            }
            LedgerAction::RegionRefined { theta, region, .. } => {
                pair.theta = *theta;
                pair.context.region = region.clone();
            }
        }
    }
    Ok(pairs)
}

/// Plain-text table: one row per pair with its latest evaluation.
pub fn report(pairs: &BTreeMap<String, UseContextPair>, entries: &[LedgerEntry]) -> String {
    let mut rows = vec![[
        "pair".to_string(),
        "property".into(),
        "theta".into(),
        "context".into(),
        "region".into(),
        "stage".into(),
        "status".into(),
        "last min".into(),
        "entries".into(),
    ]];
    for (id, p) in pairs {
        let own: Vec<&LedgerEntry> = entries.iter().filter(|e| &e.pair == id).collect();
        let last_min = own
            .iter()
            .rev()
            .find(|e| matches!(e.action, LedgerAction::Evaluated { .. }))
            .and_then(|e| e.evidence.as_ref()?.min())
            .map_or("-".to_string(), |m| m.to_string());
        rows.push([
            id.clone(),
            p.property.to_string(),
            p.theta.to_string(),
            p.context.name.clone(),
            p.context.region.to_string(),
            p.stage.to_string(),
            p.status.to_string(),
            last_min,
            own.len().to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..9).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("  "));
        }
    }
    out
}

/// Parses a tolerance or bound given on the command line.
pub fn parse_bound(text: &str) -> Result<Rational, CertifyError> {
    let r = parse_rational(text).map_err(|e| CertifyError::InvalidRequest(e.to_string()))?;
    Interval::point(r.clone()).ok_or_else(|| CertifyError::InvalidRequest(format!("{text} is outside [0, 1]")))?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::SolverConfig;
    use crate::sweep::SweepMode;

    fn grid(points: u32) -> SweepSpec {
        SweepSpec::new(SweepMode::Grid { points }, ParameterRegion::new(), SolverConfig::default())
    }

    fn roof_pair(theta: f64) -> UseContextPair {
        UseContextPair::new(
            "deliver@suburban",
            UntilProperty::mission(),
            theta,
            ContextSpec::suburban(GridScenario::small_rooftop()),
        )
    }

    #[test]
    fn presets_match_expected_bands() {
        let s = ContextSpec::suburban(GridScenario::reference_open());
        let p1 = ParameterId::new(LOSS_PARAM).unwrap();
        assert_eq!(s.region.get(&p1).unwrap().hi(), &parse_rational("3/20").unwrap());
        let u = ContextSpec::urban(GridScenario::reference_open());
        assert_eq!(u.region.get(&p1).unwrap().lo(), &parse_rational("0.1").unwrap());
        assert_eq!(u.region.get(&p1).unwrap().hi(), &parse_rational("1/4").unwrap());
        assert!(s.validate().is_ok() && u.validate().is_ok());
    }

    #[test]
    fn stage_moves_any_direction() {
        let mut pair = roof_pair(0.5);
        let mut ledger = Ledger::in_memory();
        transition_stage(&mut pair, Stage::Confirmatory, &mut ledger, "fast track").unwrap();
        let e = transition_stage(&mut pair, Stage::EarlyPhase, &mut ledger, "regression").unwrap();
        assert_eq!(e.action, LedgerAction::StageChanged { from: Stage::Confirmatory, to: Stage::EarlyPhase });
        let e = transition_stage(&mut pair, Stage::EarlyPhase, &mut ledger, "no-op").unwrap();
        assert_eq!(e.seq, 3);
        assert_eq!(pair.stage, Stage::EarlyPhase);
    }

    #[test]
    fn vacuous_threshold_passes() {
        let mut pair = UseContextPair::new(
            "any",
            UntilProperty::mission(),
            0.0,
            ContextSpec::urban(GridScenario::small_open()),
        );
        let mut ledger = Ledger::in_memory();
        let e = evaluate_context(&mut pair, &grid(2), &mut ledger, "").unwrap();
        assert_eq!(e.verdict, Verdict::Pass);
        assert_eq!(pair.status, PairStatus::Certified);
    }

    #[test]
    fn certainty_fails_with_positive_loss() {
        let mut pair = UseContextPair::new(
            "certain",
            UntilProperty::mission(),
            1.0,
            ContextSpec::urban(GridScenario::small_open()),
        );
        let mut ledger = Ledger::in_memory();
        let e = evaluate_context(&mut pair, &grid(2), &mut ledger, "").unwrap();
        assert_eq!(e.verdict, Verdict::Fail);
        assert_eq!(pair.status, PairStatus::Rejected);
        assert!(e.evidence.min().unwrap() < 1.0);
    }

    #[test]
    fn evidence_digest_is_reproducible() {
        let pair = roof_pair(0.99);
        let a = assess(&pair, &grid(3)).unwrap();
        let b = assess(&pair, &grid(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.verdict, Verdict::Pass);
        assert_eq!(a.evidence.csv_sha256.as_ref().unwrap().len(), 64);
    }

    #[test]
    fn refinement_infeasible_and_full_range() {
        let mut ledger = Ledger::in_memory();
        let p1 = ParameterId::new(LOSS_PARAM).unwrap();
        let tol = parse_rational("0.05").unwrap();
        let mut pair = roof_pair(0.99);
        let r = refine_parameter_bound(&mut pair, &p1, &grid(3), &tol, &mut ledger, "").unwrap();
        assert_eq!(r.bound, Rational::one());
        assert!(r.failing.is_none());

        // with p2 = 0 any loss is permanent, so only p1 = 0 reaches certainty
        let mut pair = UseContextPair::new(
            "open",
            UntilProperty::mission(),
            1.0,
            ContextSpec::new(
                "x",
                GridScenario::small_open(),
                ParameterRegion::new().with_str("p1", "0", "0.5").unwrap().with_str("p2", "0", "0").unwrap(),
            ),
        );
        let r = refine_parameter_bound(&mut pair, &p1, &grid(2), &tol, &mut ledger, "").unwrap();
        assert_eq!(r.bound, Rational::zero());
        assert_eq!(r.failing, Some(parse_rational("0.1").unwrap()));
        assert_eq!(ledger.entries().len(), 2);
    }

    #[test]
    fn infeasible_bound() {
        let mut ledger = Ledger::in_memory();
        let p2 = ParameterId::new(RECONNECT_PARAM).unwrap();
        let mut pair = UseContextPair::new(
            "open",
            UntilProperty::mission(),
            0.9,
            ContextSpec::new(
                "x",
                GridScenario::small_open(),
                ParameterRegion::new().with_str("p1", "1", "1").unwrap().with_str("p2", "0", "1").unwrap(),
            ),
        );
        // refining p2 to [0, 0] with p1 = 1 leaves a stranded UAV
        let err = refine_parameter_bound(&mut pair, &p2, &grid(2), &parse_rational("0.1").unwrap(), &mut ledger, "");
        assert!(matches!(err, Err(CertifyError::NoFeasibleBound { .. })));
        assert!(ledger.entries().is_empty());
    }

    #[test]
    fn ledger_file_roundtrip_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let initial = vec![roof_pair(0.99)];
        let mut pair = initial[0].clone();
        {
            let mut ledger = Ledger::open(&path).unwrap();
            evaluate_context(&mut pair, &grid(2), &mut ledger, "first look").unwrap();
            transition_stage(&mut pair, Stage::Transitional, &mut ledger, "field trial").unwrap();
        }
        let mut ledger = Ledger::open(&path).unwrap();
        assert_eq!(ledger.next_seq(), 3);
        let p1 = ParameterId::new(LOSS_PARAM).unwrap();
        refine_parameter_bound(&mut pair, &p1, &grid(2), &parse_rational("0.25").unwrap(), &mut ledger, "").unwrap();

        let entries = read_entries(&path).unwrap();
        assert_eq!(entries.len(), 3);
        let replayed = replay(&initial, &entries).unwrap();
        assert_eq!(replayed["deliver@suburban"], pair);
        let table = report(&replayed, &entries);
        assert!(table.contains("transitional") && table.contains("certified"));
    }

    #[test]
    fn replay_rejects_unknown_pairs_and_reordering() {
        let mut ledger = Ledger::in_memory();
        let mut pair = roof_pair(0.5);
        transition_stage(&mut pair, Stage::Transitional, &mut ledger, "").unwrap();
        assert!(matches!(replay(&[], ledger.entries()), Err(CertifyError::UnknownPair(_))));
        let mut entries = ledger.entries().to_vec();
        entries.push(entries[0].clone());
        assert!(matches!(replay(&[roof_pair(0.5)], &entries), Err(CertifyError::ReplayMismatch { .. })));
    }

    #[test]
    fn malformed_ledger_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"seq\": 1}\n").unwrap();
        assert!(matches!(read_entries(&path), Err(CertifyError::MalformedLedger { line: 1, .. })));
    }

    #[test]
    fn base_model_pairs() {
        let spec = BaseModelSpec {
            modules: vec!["uav".into(), "robot".into()],
            contexts: [
                ("suburban".to_string(), ContextSpec::suburban(GridScenario::small_open())),
                ("urban".to_string(), ContextSpec::urban(GridScenario::small_open())),
            ]
            .into(),
            mappings: vec![Mapping { name: "deliver".into(), property: UntilProperty::mission(), threshold: 0.9 }],
            variations: unit_region(),
        };
        let ids: Vec<String> = spec.pairs().unwrap().into_iter().map(|p| p.id).collect();
        assert_eq!(ids, ["deliver@suburban", "deliver@urban"]);
        let mut bad = spec.clone();
        bad.modules.clear();
        assert!(bad.validate().is_err());
        let mut bad = spec;
        bad.mappings[0].threshold = 1.5;
        assert!(bad.validate().is_err());
    }
}
