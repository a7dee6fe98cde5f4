//! UAV / delivery-robot gridworlds.
//!
//! A scenario composes three modules into one parametric MDP: UAV motion,
//! robot motion, and the UAV's communication link. Each step the UAV picks a
//! move, the robot takes a uniformly random step (staying put included), and
//! the link may drop (`p1`), grounding the UAV where it arrives. A grounded
//! UAV waits and takes off again with probability `p2`. Labels are read on
//! the post-state: `crash` is a grounded UAV sharing a cell with the robot,
//! `goal` is the UAV occupying the goal cell without crashing.
//!
//! Coordinates are `[x, y]`, 0-based, x to the right and y upward.
//!
//! Two contexts are supported:
//! * `open`: the UAV may fly and land anywhere.
//! * `rooftop`: the UAV only occupies rooftops, crosses between them along
//!   configured edges, and delivers from a rooftop next to the goal once the
//!   robot is at least two cells away from it.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ParamExpr, ParameterRegion};
use crate::model::{Pmdp, PmdpBuilder, StateId, CRASH_LABEL, GOAL_LABEL};

/// Probability of losing the link (and landing) on a flying step.
pub const LOSS_PARAM: &str = "p1";
/// Probability of re-establishing the link while grounded.
pub const RECONNECT_PARAM: &str = "p2";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario field `{field}`: {reason}")]
    InvalidScenario { field: String, reason: String },
    #[error("state {0} is out of range")]
    OutOfRange(StateId),
}

fn invalid(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::InvalidScenario { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Cell {
    pub x: u32,
    pub y: u32,
}

impl Cell {
    pub const fn new(x: u32, y: u32) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl From<[u32; 2]> for Cell {
    fn from([x, y]: [u32; 2]) -> Self {
        Cell { x, y }
    }
}

impl From<Cell> for [u32; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Open,
    Rooftop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Flying,
    Grounded,
    Delivered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompositeState {
    pub uav_pos: Cell,
    pub mode: Mode,
    pub robot_pos: Cell,
}

impl CompositeState {
    pub fn is_crash(&self) -> bool {
        self.mode == Mode::Grounded && self.uav_pos == self.robot_pos
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridScenario {
    pub kind: ContextKind,
    pub width: u32,
    pub height: u32,
    pub uav_start: Cell,
    pub robot_start: Cell,
    pub goal: Cell,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rooftops: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rooftop_edges: Vec<[Cell; 2]>,
}

impl GridScenario {
    pub fn open(width: u32, height: u32, uav_start: Cell, robot_start: Cell, goal: Cell) -> Self {
        GridScenario {
            kind: ContextKind::Open,
            width,
            height,
            uav_start,
            robot_start,
            goal,
            rooftops: Vec::new(),
            rooftop_edges: Vec::new(),
        }
    }

    /// 5x5 open layout: UAV at (0,0), robot at (4,4), goal at (4,0).
    pub fn reference_open() -> Self {
        GridScenario::open(5, 5, Cell::new(0, 0), Cell::new(4, 4), Cell::new(4, 0))
    }

    /// 3x3 open layout used for exact cross-checks: UAV at (0,0), robot at (2,2), goal at (2,0).
    pub fn small_open() -> Self {
        GridScenario::open(3, 3, Cell::new(0, 0), Cell::new(2, 2), Cell::new(2, 0))
    }

    /// 5x5 landing-zone layout with five rooftops and the goal beside (3,3).
    pub fn reference_rooftop() -> Self {
        let r = |x, y| Cell::new(x, y);
        GridScenario {
            kind: ContextKind::Rooftop,
            width: 5,
            height: 5,
            uav_start: r(0, 0),
            robot_start: r(2, 2),
            goal: r(4, 3),
            rooftops: vec![r(0, 0), r(1, 1), r(3, 1), r(1, 3), r(3, 3)],
            rooftop_edges: vec![
                [r(0, 0), r(1, 1)],
                [r(1, 1), r(3, 1)],
                [r(1, 1), r(1, 3)],
                [r(3, 1), r(3, 3)],
                [r(1, 3), r(3, 3)],
            ],
        }
    }

    /// 3x3 landing-zone layout: rooftops (0,0) and (1,1), goal (2,1) beside (1,1).
    pub fn small_rooftop() -> Self {
        let r = |x, y| Cell::new(x, y);
        GridScenario {
            kind: ContextKind::Rooftop,
            width: 3,
            height: 3,
            uav_start: r(0, 0),
            robot_start: r(2, 2),
            goal: r(2, 1),
            rooftops: vec![r(0, 0), r(1, 1)],
            rooftop_edges: vec![[r(0, 0), r(1, 1)]],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    fn cell_index(&self, c: Cell) -> usize {
        c.y as usize * self.width as usize + c.x as usize
    }

    fn cell_at(&self, i: usize) -> Cell {
        let w = self.width as usize;
        Cell::new((i % w) as u32, (i / w) as u32)
    }

    /// In-bounds cardinal neighbours in N, S, E, W order.
    fn neighbours(&self, c: Cell) -> impl Iterator<Item = (&'static str, Cell)> + '_ {
        let north = (c.y + 1 < self.height).then(|| ("north", Cell::new(c.x, c.y + 1)));
        let south = (c.y > 0).then(|| ("south", Cell::new(c.x, c.y - 1)));
        let east = (c.x + 1 < self.width).then(|| ("east", Cell::new(c.x + 1, c.y)));
        let west = (c.x > 0).then(|| ("west", Cell::new(c.x - 1, c.y)));
        [north, south, east, west].into_iter().flatten()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("width", "grid dimensions must be positive"));
        }
        for (name, c) in [("uav_start", self.uav_start), ("robot_start", self.robot_start), ("goal", self.goal)] {
            if !self.in_bounds(c) {
                return Err(invalid(name, format!("{name} {c} is outside the {}x{} grid", self.width, self.height)));
            }
        }
        if self.uav_start == self.robot_start {
            return Err(invalid("robot_start", "uav_start and robot_start must differ"));
        }
        match self.kind {
            ContextKind::Open => {
                if !self.rooftops.is_empty() || !self.rooftop_edges.is_empty() {
                    return Err(invalid("rooftops", "rooftops are only allowed in the rooftop context"));
                }
                Ok(())
            }
            ContextKind::Rooftop => self.validate_rooftop(),
        }
    }

    fn validate_rooftop(&self) -> Result<(), ScenarioError> {
        if self.rooftops.is_empty() {
            return Err(invalid("rooftops", "rooftop context needs at least one rooftop"));
        }
        let roofs: BTreeSet<Cell> = self.rooftops.iter().copied().collect();
        if roofs.len() != self.rooftops.len() {
            return Err(invalid("rooftops", "duplicate rooftop cell"));
        }
        if let Some(c) = roofs.iter().find(|c| !self.in_bounds(**c)) {
            return Err(invalid("rooftops", format!("rooftop {c} is out of bounds")));
        }
        for [a, b] in &self.rooftop_edges {
            if !roofs.contains(a) || !roofs.contains(b) {
                return Err(invalid("rooftop_edges", format!("rooftop edge {a}-{b} must join two rooftops")));
            }
            if a == b {
                return Err(invalid("rooftop_edges", format!("rooftop edge {a}-{b} is a self-loop")));
            }
        }
        // connectivity of the rooftop graph
        let first = *roofs.iter().next().expect("non-empty");
        let mut seen = BTreeSet::from([first]);
        let mut queue = VecDeque::from([first]);
        while let Some(c) = queue.pop_front() {
            for n in self.rooftop_neighbours(c) {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        if seen.len() != roofs.len() {
            return Err(invalid("rooftop_edges", "rooftop graph is not connected"));
        }
        if !roofs.contains(&self.uav_start) {
            return Err(invalid("uav_start", "uav_start must be a rooftop"));
        }
        if roofs.contains(&self.robot_start) {
            return Err(invalid("robot_start", "robot_start must be a street cell"));
        }
        if roofs.contains(&self.goal) {
            return Err(invalid("goal", "goal must be a street cell"));
        }
        if !self.neighbours(self.goal).any(|(_, c)| roofs.contains(&c)) {
            return Err(invalid("goal", "goal must be adjacent to a rooftop"));
        }
        // the deliver guard needs the robot to be able to leave the goal area
        let reach = self.robot_reachable(&roofs);
        if !reach.iter().any(|c| c.manhattan(self.goal) >= 2) {
            return Err(invalid("robot_start", "robot can never be two cells away from the goal, delivery would be impossible"));
        }
        Ok(())
    }

    fn robot_reachable(&self, roofs: &BTreeSet<Cell>) -> BTreeSet<Cell> {
        let mut seen = BTreeSet::from([self.robot_start]);
        let mut queue = VecDeque::from([self.robot_start]);
        while let Some(c) = queue.pop_front() {
            for (_, n) in self.neighbours(c) {
                if !roofs.contains(&n) && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    fn rooftop_neighbours(&self, c: Cell) -> BTreeSet<Cell> {
        self.rooftop_edges
            .iter()
            .filter_map(|[a, b]| {
                if *a == c {
                    Some(*b)
                } else if *b == c {
                    Some(*a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Builds the model over the unit parameter box.
    pub fn build(&self) -> Result<Pmdp, ScenarioError> {
        self.build_with_region(unit_region())
    }

    /// Builds the model over `region`, which must name exactly `p1` and `p2`.
    pub fn build_with_region(&self, region: ParameterRegion) -> Result<Pmdp, ScenarioError> {
        self.validate()?;
        let names: Vec<&str> = region.parameters().map(|p| p.as_str()).collect();
        if names != [LOSS_PARAM, RECONNECT_PARAM] {
            return Err(invalid("parameters", format!(
                "parameter region must name exactly {LOSS_PARAM} and {RECONNECT_PARAM}, got {names:?}"
            )));
        }
        let space = StateSpace::new(self);
        Ok(match self.kind {
            ContextKind::Open => build_open_model(self, &space, region),
            ContextKind::Rooftop => build_rooftop_model(self, &space, region),
        })
    }

    pub fn state_space(&self) -> Result<StateSpace, ScenarioError> {
        self.validate()?;
        Ok(StateSpace::new(self))
    }

    /// One-line description of the state encoding, used as policy-file header.
    pub fn describe(&self) -> String {
        let kind = match self.kind {
            ContextKind::Open => "open",
            ContextKind::Rooftop => "rooftop",
        };
        format!(
            "{kind} {}x{} uav_start={} robot_start={} goal={} rooftops={} encoding={}",
            self.width,
            self.height,
            self.uav_start,
            self.robot_start,
            self.goal,
            self.rooftops.len(),
            match self.kind {
                ContextKind::Open => "(uav*2+mode)*cells+robot",
                ContextKind::Rooftop => "(roof*2+mode)*streets+street; delivered=2*roofs*streets+street",
            }
        )
    }
}

pub fn unit_region() -> ParameterRegion {
    ParameterRegion::new()
        .with_str(LOSS_PARAM, "0", "1")
        .and_then(|r| r.with_str(RECONNECT_PARAM, "0", "1"))
        .expect("unit region is valid")
}

/// Bijection between composite states and dense state ids.
#[derive(Debug, Clone)]
pub struct StateSpace {
    kind: ContextKind,
    width: u32,
    goal: Cell,
    /// UAV cells in index order (all cells, or rooftops only).
    uav_cells: Vec<Cell>,
    /// Robot cells in index order (all cells, or streets only).
    robot_cells: Vec<Cell>,
    uav_slot: Vec<Option<usize>>,
    robot_slot: Vec<Option<usize>>,
    initial: CompositeState,
}

impl StateSpace {
    fn new(s: &GridScenario) -> Self {
        let all: Vec<Cell> = (0..s.cell_count()).map(|i| s.cell_at(i)).collect();
        let roofs: BTreeSet<Cell> = s.rooftops.iter().copied().collect();
        let (uav_cells, robot_cells): (Vec<Cell>, Vec<Cell>) = match s.kind {
            ContextKind::Open => (all.clone(), all.clone()),
            ContextKind::Rooftop => (
                all.iter().copied().filter(|c| roofs.contains(c)).collect(),
                all.iter().copied().filter(|c| !roofs.contains(c)).collect(),
            ),
        };
        let slots = |cells: &[Cell]| {
            let mut slot = vec![None; s.cell_count()];
            for (k, c) in cells.iter().enumerate() {
                slot[s.cell_index(*c)] = Some(k);
            }
            slot
        };
        StateSpace {
            kind: s.kind,
            width: s.width,
            goal: s.goal,
            uav_slot: slots(&uav_cells),
            robot_slot: slots(&robot_cells),
            uav_cells,
            robot_cells,
            initial: CompositeState { uav_pos: s.uav_start, mode: Mode::Flying, robot_pos: s.robot_start },
        }
    }

    fn index_of(&self, c: Cell) -> usize {
        c.y as usize * self.width as usize + c.x as usize
    }

    fn flying_block(&self) -> usize {
        2 * self.uav_cells.len() * self.robot_cells.len()
    }

    pub fn state_count(&self) -> usize {
        match self.kind {
            ContextKind::Open => self.flying_block(),
            ContextKind::Rooftop => self.flying_block() + self.robot_cells.len(),
        }
    }

    pub fn initial(&self) -> StateId {
        self.encode(&self.initial).expect("initial state is encodable")
    }

    pub fn encode(&self, c: &CompositeState) -> Option<StateId> {
        let robot = self.robot_slot.get(self.index_of(c.robot_pos)).copied().flatten()?;
        let streets = self.robot_cells.len();
        match c.mode {
            Mode::Delivered => {
                (self.kind == ContextKind::Rooftop && c.uav_pos == self.goal)
                    .then(|| StateId::from(self.flying_block() + robot))
            }
            Mode::Flying | Mode::Grounded => {
                let uav = self.uav_slot.get(self.index_of(c.uav_pos)).copied().flatten()?;
                let mode = usize::from(c.mode == Mode::Grounded);
                Some(StateId::from((uav * 2 + mode) * streets + robot))
            }
        }
    }

    pub fn decode(&self, s: StateId) -> Result<CompositeState, ScenarioError> {
        let i = s.index();
        if i >= self.state_count() {
            return Err(ScenarioError::OutOfRange(s));
        }
        let streets = self.robot_cells.len();
        if i >= self.flying_block() {
            return Ok(CompositeState {
                uav_pos: self.goal,
                mode: Mode::Delivered,
                robot_pos: self.robot_cells[i - self.flying_block()],
            });
        }
        let robot = i % streets;
        let rest = i / streets;
        let mode = if rest % 2 == 0 { Mode::Flying } else { Mode::Grounded };
        Ok(CompositeState { uav_pos: self.uav_cells[rest / 2], mode, robot_pos: self.robot_cells[robot] })
    }

    pub fn states(&self) -> impl Iterator<Item = (StateId, CompositeState)> + '_ {
        (0..self.state_count()).map(|i| {
            let s = StateId::from(i);
            (s, self.decode(s).expect("in range"))
        })
    }
}

/// Decodes a state id of the model built from `s`.
pub fn decode(state: StateId, s: &GridScenario) -> Result<CompositeState, ScenarioError> {
    s.state_space()?.decode(state)
}

fn robot_steps(s: &GridScenario, space: &StateSpace, r: Cell) -> Vec<Cell> {
    std::iter::once(r)
        .chain(s.neighbours(r).map(|(_, c)| c))
        .filter(|c| space.robot_slot[s.cell_index(*c)].is_some())
        .collect()
}

/// Edges for "UAV heads to `dest`, link drops with p1, robot steps randomly".
fn flight_edges(space: &StateSpace, dest: Cell, robot_next: &[Cell]) -> Vec<(StateId, ParamExpr)> {
    let share = ParamExpr::ratio(1, robot_next.len() as i64);
    let mut edges = Vec::with_capacity(2 * robot_next.len());
    for &r in robot_next {
        for (mode, weight) in [
            (Mode::Grounded, ParamExpr::var(LOSS_PARAM)),
            (Mode::Flying, ParamExpr::var(LOSS_PARAM).complement()),
        ] {
            let target = space
                .encode(&CompositeState { uav_pos: dest, mode, robot_pos: r })
                .expect("destination encodable");
            edges.push((target, weight.times(share.clone())));
        }
    }
    edges
}

fn wait_edges(space: &StateSpace, at: Cell, robot_next: &[Cell]) -> Vec<(StateId, ParamExpr)> {
    let share = ParamExpr::ratio(1, robot_next.len() as i64);
    let mut edges = Vec::with_capacity(2 * robot_next.len());
    for &r in robot_next {
        for (mode, weight) in [
            (Mode::Flying, ParamExpr::var(RECONNECT_PARAM)),
            (Mode::Grounded, ParamExpr::var(RECONNECT_PARAM).complement()),
        ] {
            let target = space
                .encode(&CompositeState { uav_pos: at, mode, robot_pos: r })
                .expect("wait target encodable");
            edges.push((target, weight.times(share.clone())));
        }
    }
    edges
}

fn label_state(b: &mut PmdpBuilder, id: StateId, c: &CompositeState, goal: Cell) {
    if c.is_crash() {
        b.label(CRASH_LABEL, id);
    } else if c.uav_pos == goal {
        b.label(GOAL_LABEL, id);
    }
}

fn build_open_model(s: &GridScenario, space: &StateSpace, region: ParameterRegion) -> Pmdp {
    let mut b = PmdpBuilder::new(space.state_count(), space.initial(), region);
    b.declare_label(CRASH_LABEL);
    b.declare_label(GOAL_LABEL);
    for (id, c) in space.states() {
        label_state(&mut b, id, &c, s.goal);
        let robot_next = robot_steps(s, space, c.robot_pos);
        match c.mode {
            Mode::Flying => {
                let moves = std::iter::once(("stay", c.uav_pos)).chain(s.neighbours(c.uav_pos));
                for (name, dest) in moves {
                    b.add_choice(id, name, flight_edges(space, dest, &robot_next));
                }
            }
            Mode::Grounded => {
                b.add_choice(id, "wait", wait_edges(space, c.uav_pos, &robot_next));
            }
            Mode::Delivered => unreachable!("open context has no delivered mode"),
        }
    }
    b.build()
}

fn build_rooftop_model(s: &GridScenario, space: &StateSpace, region: ParameterRegion) -> Pmdp {
    let mut b = PmdpBuilder::new(space.state_count(), space.initial(), region);
    b.declare_label(CRASH_LABEL);
    b.declare_label(GOAL_LABEL);
    let beside_goal: BTreeSet<Cell> = s.neighbours(s.goal).map(|(_, c)| c).collect();
    for (id, c) in space.states() {
        label_state(&mut b, id, &c, s.goal);
        match c.mode {
            Mode::Flying => {
                let robot_next = robot_steps(s, space, c.robot_pos);
                b.add_choice(id, "loiter", flight_edges(space, c.uav_pos, &robot_next));
                for dest in s.rooftop_neighbours(c.uav_pos) {
                    b.add_choice(id, format!("fly {dest}"), flight_edges(space, dest, &robot_next));
                }
                if beside_goal.contains(&c.uav_pos) && c.robot_pos.manhattan(s.goal) >= 2 {
                    let delivered = space
                        .encode(&CompositeState { uav_pos: s.goal, mode: Mode::Delivered, robot_pos: c.robot_pos })
                        .expect("delivered state encodable");
                    b.add_choice(id, "deliver", [(delivered, ParamExpr::int(1))]);
                }
            }
            Mode::Grounded => {
                let robot_next = robot_steps(s, space, c.robot_pos);
                b.add_choice(id, "wait", wait_edges(space, c.uav_pos, &robot_next));
            }
            Mode::Delivered => {
                b.add_choice(id, "done", [(id, ParamExpr::int(1))]);
            }
        }
    }
    b.build()
}

/// Open-context builder.
pub fn build_open(s: &GridScenario) -> Result<Pmdp, ScenarioError> {
    if s.kind != ContextKind::Open {
        return Err(invalid("kind", "expected an open-context scenario"));
    }
    s.build()
}

/// Landing-zone builder.
pub fn build_rooftop(s: &GridScenario) -> Result<Pmdp, ScenarioError> {
    if s.kind != ContextKind::Rooftop {
        return Err(invalid("kind", "expected a rooftop-context scenario"));
    }
    s.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_state_counts() {
        let s = GridScenario::open(2, 2, Cell::new(0, 0), Cell::new(1, 1), Cell::new(1, 0));
        let m = build_open(&s).unwrap();
        assert_eq!(m.state_count(), 32);
        assert!(m.validate().is_valid(), "{}", m.validate());
        assert_eq!(build_open(&GridScenario::small_open()).unwrap().state_count(), 162);
    }

    #[test]
    fn decode_initial_and_bijection() {
        for s in [GridScenario::small_open(), GridScenario::small_rooftop()] {
            let space = s.state_space().unwrap();
            let init = space.decode(space.initial()).unwrap();
            assert_eq!(init, CompositeState { uav_pos: s.uav_start, mode: Mode::Flying, robot_pos: s.robot_start });
            for (id, c) in space.states() {
                assert_eq!(space.encode(&c), Some(id));
            }
            let n = space.state_count();
            assert_eq!(space.decode(StateId::from(n)), Err(ScenarioError::OutOfRange(StateId::from(n))));
        }
    }

    #[test]
    fn flying_fan_out() {
        let s = GridScenario::small_open();
        let m = build_open(&s).unwrap();
        let space = s.state_space().unwrap();
        for (id, c) in space.states().filter(|(_, c)| c.mode == Mode::Flying) {
            let moves = 1 + s.neighbours(c.uav_pos).count();
            let fan = robot_steps(&s, &space, c.robot_pos).len();
            assert_eq!(m.choices(id).len(), moves);
            for choice in m.choices(id) {
                assert_eq!(choice.distribution.support.len(), 2 * fan);
            }
        }
    }

    #[test]
    fn rooftop_deliver_guard() {
        let s = GridScenario::small_rooftop();
        let m = build_rooftop(&s).unwrap();
        assert!(m.validate().is_valid(), "{}", m.validate());
        let space = s.state_space().unwrap();
        let mut seen_enabled = false;
        for (id, c) in space.states() {
            let has_deliver = m.choices(id).iter().any(|ch| ch.name == "deliver");
            let expected = c.mode == Mode::Flying
                && c.uav_pos == Cell::new(1, 1)
                && c.robot_pos.manhattan(s.goal) >= 2;
            assert_eq!(has_deliver, expected, "state {c:?}");
            seen_enabled |= has_deliver;
        }
        assert!(seen_enabled);
        assert!(m.label(CRASH_LABEL).unwrap().is_empty());
    }

    #[test]
    fn open_labels_match_predicates() {
        let s = GridScenario::small_open();
        let m = build_open(&s).unwrap();
        let space = s.state_space().unwrap();
        for (id, c) in space.states() {
            let crash = m.label(CRASH_LABEL).unwrap().contains(&id);
            let goal = m.label(GOAL_LABEL).unwrap().contains(&id);
            assert_eq!(crash, c.is_crash());
            assert_eq!(goal, c.uav_pos == s.goal && !c.is_crash());
        }
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = GridScenario::small_open();
        s.goal = Cell::new(3, 0);
        assert!(matches!(s.validate(), Err(ScenarioError::InvalidScenario { field, .. }) if field == "goal"));
        let mut s = GridScenario::small_open();
        s.robot_start = s.uav_start;
        assert!(s.validate().is_err());

        let mut r = GridScenario::small_rooftop();
        r.rooftop_edges.clear();
        assert!(r.validate().is_err(), "disconnected rooftops");
        let mut r = GridScenario::small_rooftop();
        r.goal = Cell::new(2, 2);
        assert!(r.validate().is_err(), "goal not next to a rooftop");
        let mut r = GridScenario::small_rooftop();
        r.uav_start = Cell::new(2, 0);
        assert!(r.validate().is_err(), "uav must start on a rooftop");
        let mut r = GridScenario::small_rooftop();
        r.robot_start = Cell::new(1, 1);
        r.uav_start = Cell::new(0, 0);
        assert!(r.validate().is_err(), "robot on a rooftop");
        assert!(build_open(&GridScenario::small_rooftop()).is_err());
    }

    #[test]
    fn scenario_json_schema() {
        let text = r#"{"kind":"rooftop","width":3,"height":3,"uav_start":[0,0],"robot_start":[2,2],
            "goal":[2,1],"rooftops":[[0,0],[1,1]],"rooftop_edges":[[[0,0],[1,1]]]}"#;
        let s: GridScenario = serde_json::from_str(text).unwrap();
        assert_eq!(s, GridScenario::small_rooftop());
        let back: GridScenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn open_action_names() {
        let s = GridScenario::small_open();
        let m = build_open(&s).unwrap();
        let init = m.initial();
        let names: Vec<&str> = m.choices(init).iter().map(|c| c.name.as_str()).collect();
        // (0,0): north and east only
        assert_eq!(names, ["stay", "north", "east"]);
    }
}
