//! Parametric MDPs and their instantiation into concrete sparse MDPs.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use num::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{
    check_distribution_row, rational_to_f64, ExprError, ParamExpr, ParameterId, ParameterRegion,
    RowDefect, Valuation,
};

pub const GOAL_LABEL: &str = "goal";
pub const CRASH_LABEL: &str = "crash";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u32);

impl StateId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for StateId {
    fn from(i: usize) -> Self {
        StateId(u32::try_from(i).expect("state index fits in u32"))
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into a state's list of enabled actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u32);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParametricDistribution {
    pub support: Vec<(StateId, ParamExpr)>,
}

/// An enabled action: a display name and its successor distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParametricChoice {
    pub name: String,
    pub distribution: ParametricDistribution,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("valuation {0} lies outside the model region")]
    ValuationOutOfRegion(Valuation),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    Deadlock(StateId),
    InitialOutOfRange(StateId),
    TargetOutOfRange { state: StateId, action: ActionId, target: StateId },
    DuplicateTarget { state: StateId, action: ActionId, target: StateId },
    Row { state: StateId, action: ActionId, defect: RowDefect },
    LabelOutOfRange { label: String, state: StateId },
    MissingGoalLabel,
    LabelOverlap(StateId),
    RegionMismatch { parameter: ParameterId },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::Deadlock(s) => write!(f, "state {s} has no enabled action"),
            Finding::InitialOutOfRange(s) => write!(f, "initial state {s} is out of range"),
            Finding::TargetOutOfRange { state, action, target } => {
                write!(f, "state {state} action {action}: target {target} out of range")
            }
            Finding::DuplicateTarget { state, action, target } => {
                write!(f, "state {state} action {action}: target {target} listed twice")
            }
            Finding::Row { state, action, defect } => write!(f, "state {state} action {action}: {defect}"),
            Finding::LabelOutOfRange { label, state } => {
                write!(f, "label `{label}` names out-of-range state {state}")
            }
            Finding::MissingGoalLabel => write!(f, "model has no `{GOAL_LABEL}` label"),
            Finding::LabelOverlap(s) => {
                write!(f, "state {s} is labeled both `{CRASH_LABEL}` and `{GOAL_LABEL}`")
            }
            Finding::RegionMismatch { parameter } => {
                write!(f, "parameter `{parameter}` is not covered by exactly one region interval")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return write!(f, "valid");
        }
        for finding in &self.findings {
            writeln!(f, "{finding}")?;
        }
        Ok(())
    }
}

pub type Labels = BTreeMap<String, BTreeSet<StateId>>;

/// A parametric MDP with labeled states over a parameter region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pmdp {
    state_count: usize,
    initial: StateId,
    enabled: Vec<Vec<ParametricChoice>>,
    labels: Labels,
    parameters: BTreeSet<ParameterId>,
    region: ParameterRegion,
    /// Distinct transition expressions, and for every edge in state/choice
    /// order the index of its expression; instantiation folds each once.
    interned: Vec<ParamExpr>,
    edge_expr: Vec<u32>,
}

impl Pmdp {
    /// Assembles a model without any checks. Use [`PmdpBuilder`] for models
    /// that should be deadlock-free by construction.
    pub fn from_parts(
        initial: StateId,
        enabled: Vec<Vec<ParametricChoice>>,
        labels: Labels,
        region: ParameterRegion,
    ) -> Self {
        let parameters = enabled
            .iter()
            .flatten()
            .flat_map(|c| c.distribution.support.iter().flat_map(|(_, e)| e.variables()))
            .chain(region.parameters().cloned())
            .collect();
        let mut index: HashMap<&ParamExpr, u32> = HashMap::new();
        let mut interned = Vec::new();
        let mut edge_expr = Vec::new();
        for (_, e) in enabled.iter().flatten().flat_map(|c| &c.distribution.support) {
            let i = *index.entry(e).or_insert_with(|| {
                interned.push(e.clone());
                (interned.len() - 1) as u32
            });
            edge_expr.push(i);
        }
        Pmdp { state_count: enabled.len(), initial, enabled, labels, parameters, region, interned, edge_expr }
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn choices(&self, s: StateId) -> &[ParametricChoice] {
        &self.enabled[s.index()]
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn label(&self, name: &str) -> Option<&BTreeSet<StateId>> {
        self.labels.get(name)
    }

    pub fn parameters(&self) -> &BTreeSet<ParameterId> {
        &self.parameters
    }

    pub fn region(&self) -> &ParameterRegion {
        &self.region
    }

    pub fn transition_count(&self) -> usize {
        self.enabled.iter().flatten().map(|c| c.distribution.support.len()).sum()
    }

    /// Lists every violated invariant; an empty report means the model is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut findings = Vec::new();
        let n = self.state_count;
        if self.initial.index() >= n {
            findings.push(Finding::InitialOutOfRange(self.initial));
        }
        for p in &self.parameters {
            if self.region.get(p).is_none() {
                findings.push(Finding::RegionMismatch { parameter: p.clone() });
            }
        }
        for (si, choices) in self.enabled.iter().enumerate() {
            let state = StateId::from(si);
            if choices.is_empty() {
                findings.push(Finding::Deadlock(state));
            }
            for (ai, choice) in choices.iter().enumerate() {
                let action = ActionId(ai as u32);
                let mut seen = BTreeSet::new();
                for (target, _) in &choice.distribution.support {
                    if target.index() >= n {
                        findings.push(Finding::TargetOutOfRange { state, action, target: *target });
                    } else if !seen.insert(*target) {
                        findings.push(Finding::DuplicateTarget { state, action, target: *target });
                    }
                }
                let row: Vec<ParamExpr> =
                    choice.distribution.support.iter().map(|(_, e)| e.clone()).collect();
                if let Err(defect) = check_distribution_row(&row, &self.region) {
                    findings.push(Finding::Row { state, action, defect });
                }
            }
        }
        for (label, states) in &self.labels {
            for s in states.iter().filter(|s| s.index() >= n) {
                findings.push(Finding::LabelOutOfRange { label: label.clone(), state: *s });
            }
        }
        match self.labels.get(GOAL_LABEL) {
            None => findings.push(Finding::MissingGoalLabel),
            Some(goal) => {
                if let Some(crash) = self.labels.get(CRASH_LABEL) {
                    findings.extend(goal.intersection(crash).map(|s| Finding::LabelOverlap(*s)));
                }
            }
        }
        ValidationReport { findings }
    }

    /// Substitutes a valuation into every transition expression.
    ///
    /// Probabilities are folded exactly and only then rounded to `f64`; edges
    /// whose exact probability is zero are dropped.
    pub fn instantiate(&self, v: &Valuation) -> Result<ConcreteMdp, ModelError> {
        for p in &self.parameters {
            if v.get(p).is_none() {
                return Err(ExprError::MissingParameter(p.to_string()).into());
            }
        }
        if !self.region.contains(v) {
            return Err(ModelError::ValuationOutOfRegion(v.clone()));
        }
        let mut state_offsets = Vec::with_capacity(self.state_count + 1);
        let mut choice_offsets = vec![0];
        let mut targets = Vec::new();
        let mut probs = Vec::new();
        state_offsets.push(0);
        let folded: Vec<Option<f64>> = self
            .interned
            .iter()
            .map(|e| e.evaluate(v).map(|r| (!r.is_zero()).then(|| rational_to_f64(&r))))
            .collect::<Result<_, _>>()?;
        let mut edge = self.edge_expr.iter();
        for choices in &self.enabled {
            for choice in choices {
                for (target, _) in &choice.distribution.support {
                    if let Some(p) = folded[*edge.next().expect("one index per edge") as usize] {
                        targets.push(*target);
                        probs.push(p);
                    }
                }
                choice_offsets.push(targets.len());
            }
            state_offsets.push(choice_offsets.len() - 1);
        }
        Ok(ConcreteMdp {
            initial: self.initial,
            state_offsets,
            choice_offsets,
            targets,
            probs,
            labels: Arc::new(self.labels.clone()),
        })
    }

    /// Explicit-state text dump, one `state action target expr` line per
    /// transition followed by a `#labels` section.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let params: Vec<&str> = self.parameters.iter().map(|p| p.as_str()).collect();
        let _ = writeln!(
            out,
            "# pmdp states={} initial={} parameters={}",
            self.state_count,
            self.initial,
            params.join(",")
        );
        for (si, choices) in self.enabled.iter().enumerate() {
            for (ai, choice) in choices.iter().enumerate() {
                for (t, e) in &choice.distribution.support {
                    let _ = writeln!(out, "{si} {ai} {t} {e}");
                }
            }
        }
        write_labels(&mut out, &self.labels);
        out
    }
}

fn write_labels(out: &mut String, labels: &Labels) {
    out.push_str("#labels\n");
    for (name, states) in labels {
        let ids: Vec<String> = states.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "{name} {}", ids.join(" "));
    }
}

/// Incremental construction of a [`Pmdp`].
///
/// Repeated targets inside one choice are merged by summing their
/// expressions. States left without actions receive a `wait` self-loop.
#[derive(Debug)]
pub struct PmdpBuilder {
    initial: StateId,
    enabled: Vec<Vec<ParametricChoice>>,
    labels: Labels,
    region: ParameterRegion,
}

impl PmdpBuilder {
    pub fn new(state_count: usize, initial: StateId, region: ParameterRegion) -> Self {
        PmdpBuilder {
            initial,
            enabled: vec![Vec::new(); state_count],
            labels: Labels::new(),
            region,
        }
    }

    pub fn add_choice(
        &mut self,
        state: StateId,
        name: impl Into<String>,
        edges: impl IntoIterator<Item = (StateId, ParamExpr)>,
    ) -> ActionId {
        let mut merged: BTreeMap<StateId, ParamExpr> = BTreeMap::new();
        let mut order = Vec::new();
        for (t, e) in edges {
            match merged.remove(&t) {
                Some(prev) => {
                    merged.insert(t, ParamExpr::Sum(vec![prev, e]));
                }
                None => {
                    order.push(t);
                    merged.insert(t, e);
                }
            }
        }
        let support = order
            .into_iter()
            .map(|t| {
                let e = merged.remove(&t).expect("target recorded");
                (t, e)
            })
            .collect();
        let list = &mut self.enabled[state.index()];
        list.push(ParametricChoice {
            name: name.into(),
            distribution: ParametricDistribution { support },
        });
        ActionId(list.len() as u32 - 1)
    }

    pub fn label(&mut self, name: &str, state: StateId) {
        self.labels.entry(name.to_string()).or_default().insert(state);
    }

    /// Makes sure a label exists even if no state carries it.
    pub fn declare_label(&mut self, name: &str) {
        self.labels.entry(name.to_string()).or_default();
    }

    pub fn build(mut self) -> Pmdp {
        for (si, choices) in self.enabled.iter_mut().enumerate() {
            if choices.is_empty() {
                choices.push(ParametricChoice {
                    name: "wait".into(),
                    distribution: ParametricDistribution {
                        support: vec![(StateId::from(si), ParamExpr::int(1))],
                    },
                });
            }
        }
        Pmdp::from_parts(self.initial, self.enabled, self.labels, self.region)
    }
}

/// A concrete MDP in compressed sparse row form: states index into a choice
/// table, choices index into parallel target/probability arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteMdp {
    initial: StateId,
    state_offsets: Vec<usize>,
    choice_offsets: Vec<usize>,
    targets: Vec<StateId>,
    probs: Vec<f64>,
    labels: Arc<Labels>,
}

/// Borrowed view of one action's successor distribution.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub targets: &'a [StateId],
    pub probs: &'a [f64],
}

impl<'a> Row<'a> {
    pub fn iter(&self) -> impl Iterator<Item = (StateId, f64)> + 'a {
        self.targets.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.targets
            .iter()
            .zip(self.probs)
            .map(|(t, p)| p * values[t.index()])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StochasticDefect {
    #[error("state {0} has no enabled action")]
    Deadlock(StateId),
    #[error("state {state} action {action}: row sums to {sum}")]
    RowSum { state: StateId, action: ActionId, sum: f64 },
    #[error("state {state} action {action}: probability {prob} outside [0, 1]")]
    Probability { state: StateId, action: ActionId, prob: f64 },
    #[error("state {state} action {action}: target {target} out of range")]
    Target { state: StateId, action: ActionId, target: StateId },
}

impl ConcreteMdp {
    /// Builds a concrete model from nested rows: `rows[state][action]` is a
    /// list of `(target, probability)` edges.
    pub fn from_rows(initial: StateId, rows: Vec<Vec<Vec<(StateId, f64)>>>, labels: Labels) -> Self {
        let mut state_offsets = vec![0];
        let mut choice_offsets = vec![0];
        let mut targets = Vec::new();
        let mut probs = Vec::new();
        for state in rows {
            for action in state {
                for (t, p) in action {
                    targets.push(t);
                    probs.push(p);
                }
                choice_offsets.push(targets.len());
            }
            state_offsets.push(choice_offsets.len() - 1);
        }
        ConcreteMdp { initial, state_offsets, choice_offsets, targets, probs, labels: Arc::new(labels) }
    }

    pub fn state_count(&self) -> usize {
        self.state_offsets.len() - 1
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn action_count(&self, s: StateId) -> usize {
        self.state_offsets[s.index() + 1] - self.state_offsets[s.index()]
    }

    pub fn row(&self, s: StateId, a: ActionId) -> Row<'_> {
        let c = self.state_offsets[s.index()] + a.index();
        let (lo, hi) = (self.choice_offsets[c], self.choice_offsets[c + 1]);
        Row { targets: &self.targets[lo..hi], probs: &self.probs[lo..hi] }
    }

    pub fn rows(&self, s: StateId) -> impl Iterator<Item = (ActionId, Row<'_>)> {
        (0..self.action_count(s)).map(move |a| {
            let a = ActionId(a as u32);
            (a, self.row(s, a))
        })
    }

    pub fn transition_count(&self) -> usize {
        self.targets.len()
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn label(&self, name: &str) -> Option<&BTreeSet<StateId>> {
        self.labels.get(name)
    }

    pub fn label_mask(&self, name: &str) -> Option<Vec<bool>> {
        let states = self.labels.get(name)?;
        let mut mask = vec![false; self.state_count()];
        for s in states {
            mask[s.index()] = true;
        }
        Some(mask)
    }

    /// Checks the stochastic-matrix invariants (row sums within `tol`,
    /// entries in `[0, 1]`, targets in range, no deadlocks).
    pub fn check_stochastic(&self, tol: f64) -> Result<(), StochasticDefect> {
        let n = self.state_count();
        for s in (0..n).map(StateId::from) {
            if self.action_count(s) == 0 {
                return Err(StochasticDefect::Deadlock(s));
            }
            for (a, row) in self.rows(s) {
                let mut sum = 0.0;
                for (t, p) in row.iter() {
                    if t.index() >= n {
                        return Err(StochasticDefect::Target { state: s, action: a, target: t });
                    }
                    if !(0.0..=1.0).contains(&p) {
                        return Err(StochasticDefect::Probability { state: s, action: a, prob: p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > tol {
                    return Err(StochasticDefect::RowSum { state: s, action: a, sum });
                }
            }
        }
        Ok(())
    }

    /// Reverse adjacency: for each state, the `(source, action)` pairs with
    /// an edge into it. Each pair appears at most once per target.
    pub fn predecessors(&self) -> Vec<Vec<(StateId, ActionId)>> {
        let mut preds = vec![Vec::new(); self.state_count()];
        for s in (0..self.state_count()).map(StateId::from) {
            for (a, row) in self.rows(s) {
                for t in row.targets {
                    preds[t.index()].push((s, a));
                }
            }
        }
        preds
    }

    /// States reachable from the initial state along positive-probability edges.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.state_count()];
        let mut queue = VecDeque::from([self.initial]);
        seen[self.initial.index()] = true;
        while let Some(s) = queue.pop_front() {
            for (_, row) in self.rows(s) {
                for t in row.targets {
                    if !seen[t.index()] {
                        seen[t.index()] = true;
                        queue.push_back(*t);
                    }
                }
            }
        }
        seen
    }

    /// Same format as [`Pmdp::dump`] with numeric probabilities.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# mdp states={} initial={}", self.state_count(), self.initial);
        for s in (0..self.state_count()).map(StateId::from) {
            for (a, row) in self.rows(s) {
                for (t, p) in row.iter() {
                    let _ = writeln!(out, "{s} {a} {t} {p}");
                }
            }
        }
        write_labels(&mut out, &self.labels);
        out
    }
}
