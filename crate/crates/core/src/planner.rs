//! Prioritized multi-robot planning on the virtual grid.
//!
//! Robots are planned one at a time with space-time A* against a
//! [`ReservationTable`]. A plan may not put two robots in one cell at one
//! step, may not swap two robots across a step, and may not move a robot into
//! a cell that another robot occupied on the previous step. The last rule is
//! what makes plans safe to execute with align-then-move robots whose
//! rotations take varying amounts of time.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CellCoord, GridSpec};
use crate::RobotId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("no conflict-free path for {robot} within the horizon")]
    PlanInfeasible { robot: RobotId },
    #[error("start cell {cell} of {robot} is reserved by another robot")]
    StartReserved { robot: RobotId, cell: CellCoord },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("waypoint spacing must be at least 1")]
    InvalidSpacing,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("cell {cell} at step {t} is already reserved by {owner}")]
    ReservationConflict {
        cell: CellCoord,
        t: u32,
        owner: RobotId,
    },
    #[error("step {t} exceeds the reservation horizon {horizon}")]
    BeyondHorizon { t: u32, horizon: u32 },
}

/// Default planning horizon, in steps.
pub fn default_horizon(grid: &GridSpec) -> u32 {
    4 * (grid.cols + grid.rows)
}

/// `(cell, step) → robot`, plus permanently blocked cells.
#[derive(Debug, Clone, Default)]
pub struct ReservationTable {
    slots: HashMap<(CellCoord, u32), RobotId>,
    blocked: HashSet<CellCoord>,
    horizon: u32,
}

impl ReservationTable {
    pub fn new(horizon: u32) -> Self {
        Self {
            slots: HashMap::new(),
            blocked: HashSet::new(),
            horizon,
        }
    }

    pub fn for_grid(grid: &GridSpec) -> Self {
        Self::new(default_horizon(grid))
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn owner(&self, cell: CellCoord, t: u32) -> Option<RobotId> {
        self.slots.get(&(cell, t)).copied()
    }

    pub fn is_blocked(&self, cell: CellCoord) -> bool {
        self.blocked.contains(&cell)
    }

    /// Marks a cell unusable at every step.
    pub fn block(&mut self, cell: CellCoord) {
        self.blocked.insert(cell);
    }

    /// Free for `robot`: not blocked and unowned or owned by `robot`.
    pub fn free_for(&self, cell: CellCoord, t: u32, robot: RobotId) -> bool {
        !self.is_blocked(cell) && self.owner(cell, t).is_none_or(|o| o == robot)
    }

    pub fn reserve(&mut self, cell: CellCoord, t: u32, robot: RobotId) -> Result<(), PlanError> {
        if t > self.horizon {
            return Err(PlanError::BeyondHorizon {
                t,
                horizon: self.horizon,
            });
        }
        match self.owner(cell, t) {
            Some(owner) if owner != robot => Err(PlanError::ReservationConflict { cell, t, owner }),
            _ => {
                self.slots.insert((cell, t), robot);
                Ok(())
            }
        }
    }

    /// Reserves `cell` from step `from` through the horizon.
    pub fn hold(&mut self, cell: CellCoord, from: u32, robot: RobotId) -> Result<(), PlanError> {
        for t in from..=self.horizon {
            self.reserve(cell, t, robot)?;
        }
        Ok(())
    }

    /// Reserves every step of a unit-step plan and parks its robot at the
    /// final cell through the horizon. Nothing is inserted on conflict.
    pub fn reserve_plan(&mut self, plan: &Plan) -> Result<(), PlanError> {
        let goal = plan.goal();
        let last = plan.makespan();
        let mut claims: Vec<(CellCoord, u32)> = plan.waypoints.iter().map(|w| (w.cell, w.t)).collect();
        claims.extend((last + 1..=self.horizon).map(|t| (goal, t)));
        for &(cell, t) in &claims {
            if t > self.horizon {
                return Err(PlanError::BeyondHorizon {
                    t,
                    horizon: self.horizon,
                });
            }
            if let Some(owner) = self.owner(cell, t).filter(|&o| o != plan.robot) {
                return Err(PlanError::ReservationConflict { cell, t, owner });
            }
        }
        for (cell, t) in claims {
            self.slots.insert((cell, t), plan.robot);
        }
        Ok(())
    }

    pub fn release(&mut self, robot: RobotId) {
        self.slots.retain(|_, r| *r != robot);
    }

    /// Latest step at which a robot other than `robot` owns `cell`.
    fn last_foreign_claim(&self, cell: CellCoord, robot: RobotId) -> Option<u32> {
        (0..=self.horizon)
            .rev()
            .find(|&t| self.owner(cell, t).is_some_and(|o| o != robot))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedCell {
    pub t: u32,
    pub cell: CellCoord,
}

impl TimedCell {
    pub fn new(t: u32, cell: CellCoord) -> Self {
        Self { t, cell }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Planned,
    Executing,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub robot: RobotId,
    pub waypoints: Vec<TimedCell>,
    pub status: PlanStatus,
}

impl Plan {
    pub fn stationary(robot: RobotId, cell: CellCoord) -> Self {
        Self {
            robot,
            waypoints: vec![TimedCell::new(0, cell)],
            status: PlanStatus::Planned,
        }
    }

    pub fn start(&self) -> CellCoord {
        self.waypoints[0].cell
    }

    pub fn goal(&self) -> CellCoord {
        self.waypoints[self.waypoints.len() - 1].cell
    }

    pub fn makespan(&self) -> u32 {
        self.waypoints[self.waypoints.len() - 1].t
    }

    /// Number of cell-to-cell moves.
    pub fn path_length(&self) -> u32 {
        self.waypoints
            .windows(2)
            .map(|w| w[0].cell.manhattan(w[1].cell))
            .sum()
    }

    /// Cell occupied at step `t` of a unit-step plan; parked after arrival.
    pub fn cell_at(&self, t: u32) -> CellCoord {
        match self.waypoints.binary_search_by_key(&t, |w| w.t) {
            Ok(i) => self.waypoints[i].cell,
            Err(0) => self.waypoints[0].cell,
            Err(i) => self.waypoints[i - 1].cell,
        }
    }

    /// One waypoint per step, consecutive cells equal or 4-adjacent.
    pub fn is_unit_step(&self) -> bool {
        self.waypoints.first().is_some_and(|w| w.t == 0)
            && self
                .waypoints
                .windows(2)
                .all(|w| w[1].t == w[0].t + 1 && w[0].cell.manhattan(w[1].cell) <= 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub robot: RobotId,
    pub start: CellCoord,
    pub goal: CellCoord,
    pub priority: i32,
}

impl PlanRequest {
    pub fn new(robot: RobotId, start: CellCoord, goal: CellCoord) -> Self {
        Self {
            robot,
            start,
            goal,
            priority: 0,
        }
    }

    pub fn with_priority(mut self, priority: i32) -> Self {
        self.priority = priority;
        self
    }
}

impl fmt::Display for PlanRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} -> {}", self.robot, self.start, self.goal)
    }
}

/// Whether `robot` may go from `from` at step `t` to `to` at step `t + 1`.
fn transition_allowed(
    table: &ReservationTable,
    robot: RobotId,
    from: CellCoord,
    to: CellCoord,
    t: u32,
) -> bool {
    if !table.free_for(to, t + 1, robot) {
        return false;
    }
    if from == to {
        return true;
    }
    // Entering a cell someone held on the previous step (following, and
    // swaps as a special case), or being followed into the cell we leave.
    table.owner(to, t).is_none_or(|o| o == robot)
        && table.owner(from, t + 1).is_none_or(|o| o == robot)
}

/// Space-time A* for one robot against existing reservations. On success the
/// plan's cells and a goal hold through the horizon are reserved.
pub fn plan_single(
    req: &PlanRequest,
    grid: &GridSpec,
    table: &mut ReservationTable,
) -> Result<Plan, PlanError> {
    let plan = search(req, grid, table)?;
    table.reserve_plan(&plan)?;
    Ok(plan)
}

fn search(req: &PlanRequest, grid: &GridSpec, table: &ReservationTable) -> Result<Plan, PlanError> {
    for (what, c) in [("start", req.start), ("goal", req.goal)] {
        if !grid.contains(c) {
            return Err(PlanError::InvalidRequest(format!(
                "{what} {c} of {} lies outside the grid",
                req.robot
            )));
        }
    }
    let robot = req.robot;
    if !table.free_for(req.start, 0, robot) {
        return Err(PlanError::StartReserved {
            robot,
            cell: req.start,
        });
    }
    if table.is_blocked(req.goal) {
        return Err(PlanError::PlanInfeasible { robot });
    }
    let horizon = table.horizon();
    let earliest_park = table
        .last_foreign_claim(req.goal, robot)
        .map_or(0, |t| t + 1);
    if earliest_park > horizon {
        return Err(PlanError::PlanInfeasible { robot });
    }

    let h = |c: CellCoord| c.manhattan(req.goal);
    // Key: f, then fewer waits, then (col, row), then t.
    type Key = (u32, u32, u32, u32, u32);
    let mut open: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
    let mut parent: HashMap<(CellCoord, u32), CellCoord> = HashMap::new();
    let mut waits: HashMap<(CellCoord, u32), u32> = HashMap::new();
    let mut closed: HashSet<(CellCoord, u32)> = HashSet::new();

    open.push(Reverse((h(req.start), 0, req.start.col, req.start.row, 0)));
    waits.insert((req.start, 0), 0);

    while let Some(Reverse((_, w, col, row, t))) = open.pop() {
        let cell = CellCoord::new(col, row);
        if !closed.insert((cell, t)) {
            continue;
        }
        if cell == req.goal && t >= earliest_park {
            return Ok(reconstruct(robot, cell, t, &parent));
        }
        if t >= horizon {
            continue;
        }
        let successors = std::iter::once(cell).chain(grid.neighbors(cell));
        for next in successors {
            let key = (next, t + 1);
            if closed.contains(&key) || !transition_allowed(table, robot, cell, next, t) {
                continue;
            }
            let nw = w + u32::from(next == cell);
            if waits.get(&key).is_some_and(|&old| old <= nw) {
                continue;
            }
            waits.insert(key, nw);
            parent.insert(key, cell);
            open.push(Reverse((t + 1 + h(next), nw, next.col, next.row, t + 1)));
        }
    }
    Err(PlanError::PlanInfeasible { robot })
}

fn reconstruct(
    robot: RobotId,
    goal: CellCoord,
    arrival: u32,
    parent: &HashMap<(CellCoord, u32), CellCoord>,
) -> Plan {
    let mut waypoints = Vec::with_capacity(arrival as usize + 1);
    let mut cell = goal;
    for t in (0..=arrival).rev() {
        waypoints.push(TimedCell::new(t, cell));
        if t > 0 {
            cell = parent[&(cell, t)];
        }
    }
    waypoints.reverse();
    Plan {
        robot,
        waypoints,
        status: PlanStatus::Planned,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanFailure {
    pub robot: RobotId,
    pub error: PlanError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FleetPlan {
    /// One plan per request, ordered by robot id.
    pub plans: Vec<Plan>,
    /// Robots left stationary because no plan was found.
    pub failures: Vec<PlanFailure>,
}

impl FleetPlan {
    pub fn makespan(&self) -> u32 {
        self.plans.iter().map(Plan::makespan).max().unwrap_or(0)
    }

    pub fn plan_for(&self, robot: RobotId) -> Option<&Plan> {
        self.plans.iter().find(|p| p.robot == robot)
    }

    pub fn failed(&self, robot: RobotId) -> bool {
        self.failures.iter().any(|f| f.robot == robot)
    }
}

pub fn plan_fleet(requests: &[PlanRequest], grid: &GridSpec) -> Result<FleetPlan, PlanError> {
    plan_fleet_with_obstacles(requests, grid, &[])
}

/// Prioritized planning: descending priority, ties by robot id. A robot that
/// cannot be planned is moved to the front and planning restarts; if it fails
/// again it is frozen at its start for the whole horizon, again with a
/// restart, so the frozen robot is respected by everyone.
pub fn plan_fleet_with_obstacles(
    requests: &[PlanRequest],
    grid: &GridSpec,
    obstacles: &[CellCoord],
) -> Result<FleetPlan, PlanError> {
    validate_requests(requests, grid)?;
    let mut order: Vec<&PlanRequest> = requests.iter().collect();
    order.sort_by_key(|r| (Reverse(r.priority), r.robot));

    let mut frozen: Vec<(RobotId, PlanError)> = Vec::new();
    let mut promoted: HashSet<RobotId> = HashSet::new();
    let plans = 'attempt: loop {
        let mut table = ReservationTable::for_grid(grid);
        for &c in obstacles {
            table.block(c);
        }
        let is_frozen = |r: RobotId| frozen.iter().any(|(f, _)| *f == r);
        for req in &order {
            if !table.is_blocked(req.start) {
                table.reserve(req.start, 0, req.robot)?;
            }
        }
        for req in order.iter().filter(|r| is_frozen(r.robot)) {
            if !table.is_blocked(req.start) {
                table.hold(req.start, 0, req.robot)?;
            }
        }
        let mut plans = Vec::with_capacity(order.len());
        for req in &order {
            if is_frozen(req.robot) {
                let mut p = Plan::stationary(req.robot, req.start);
                p.status = PlanStatus::Failed;
                plans.push(p);
                continue;
            }
            match plan_single(req, grid, &mut table) {
                Ok(p) => plans.push(p),
                Err(e) => {
                    let robot = req.robot;
                    if promoted.insert(robot) {
                        let at = order.iter().position(|r| r.robot == robot).expect("present");
                        let req = order.remove(at);
                        order.insert(0, req);
                    } else {
                        frozen.push((robot, e));
                    }
                    continue 'attempt;
                }
            }
        }
        break plans;
    };

    let mut plans = plans;
    plans.sort_by_key(|p| p.robot);
    let mut failures: Vec<PlanFailure> = frozen
        .into_iter()
        .map(|(robot, error)| PlanFailure { robot, error })
        .collect();
    failures.sort_by_key(|f| f.robot);
    Ok(FleetPlan { plans, failures })
}

fn validate_requests(requests: &[PlanRequest], grid: &GridSpec) -> Result<(), PlanError> {
    let mut robots = HashSet::new();
    let mut starts = HashSet::new();
    let mut goals = HashSet::new();
    for r in requests {
        if !grid.contains(r.start) || !grid.contains(r.goal) {
            return Err(PlanError::InvalidRequest(format!("{r} leaves the grid")));
        }
        if !robots.insert(r.robot) {
            return Err(PlanError::InvalidRequest(format!("duplicate {}", r.robot)));
        }
        if !starts.insert(r.start) {
            return Err(PlanError::InvalidRequest(format!("duplicate start {}", r.start)));
        }
        if !goals.insert(r.goal) {
            return Err(PlanError::InvalidRequest(format!("duplicate goal {}", r.goal)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Two robots in one cell at one step.
    Vertex,
    /// Two robots exchange cells across a step.
    Swap,
    /// A robot enters a cell another robot held on the previous step.
    Following,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Step at which the conflict materialises (the later step for moves).
    pub t: u32,
    pub cell: CellCoord,
    pub robots: (RobotId, RobotId),
}

/// Every conflict among unit-step plans; robots park at their final cell.
pub fn validate_plan(plans: &[Plan]) -> Vec<Violation> {
    let end = plans.iter().map(Plan::makespan).max().unwrap_or(0);
    let mut out = Vec::new();
    for t in 0..=end {
        let mut at: Vec<(CellCoord, RobotId)> = plans.iter().map(|p| (p.cell_at(t), p.robot)).collect();
        at.sort();
        for w in at.windows(2) {
            if w[0].0 == w[1].0 {
                out.push(Violation {
                    kind: ViolationKind::Vertex,
                    t,
                    cell: w[0].0,
                    robots: (w[0].1, w[1].1),
                });
            }
        }
        if t == end {
            break;
        }
        for a in plans {
            let (from, to) = (a.cell_at(t), a.cell_at(t + 1));
            if from == to {
                continue;
            }
            for b in plans.iter().filter(|b| b.robot != a.robot) {
                if b.cell_at(t) != to {
                    continue;
                }
                if b.cell_at(t + 1) == from {
                    if a.robot < b.robot {
                        out.push(Violation {
                            kind: ViolationKind::Swap,
                            t: t + 1,
                            cell: to,
                            robots: (a.robot, b.robot),
                        });
                    }
                } else {
                    out.push(Violation {
                        kind: ViolationKind::Following,
                        t: t + 1,
                        cell: to,
                        robots: (a.robot, b.robot),
                    });
                }
            }
        }
    }
    out
}

fn step_dir(a: CellCoord, b: CellCoord) -> (i64, i64) {
    (
        (b.col as i64 - a.col as i64).signum(),
        (b.row as i64 - a.row as i64).signum(),
    )
}

fn check_segments(plan: &Plan) -> Result<(), PlanError> {
    if plan.waypoints.is_empty() {
        return Err(PlanError::InvalidPlan("plan has no waypoints".into()));
    }
    for w in plan.waypoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.cell.col != b.cell.col && a.cell.row != b.cell.row {
            return Err(PlanError::InvalidPlan(format!(
                "segment {} -> {} is not axis-aligned",
                a.cell, b.cell
            )));
        }
        if b.t < a.t + a.cell.manhattan(b.cell).max(1) {
            return Err(PlanError::InvalidPlan(format!(
                "segment {} -> {} is faster than one cell per step",
                a.cell, b.cell
            )));
        }
    }
    Ok(())
}

/// Inserts waypoints so that no segment spans more than `spacing` cells.
///
/// Original waypoints are all kept. Inserted points are laid out backwards
/// from the segment end, so the final approach to every kept waypoint is at
/// most `spacing` cells long. Steps are interpolated along each segment.
pub fn waypoint_densify(plan: &Plan, spacing: u32) -> Result<Plan, PlanError> {
    if spacing < 1 {
        return Err(PlanError::InvalidSpacing);
    }
    check_segments(plan)?;
    let mut out = vec![plan.waypoints[0]];
    for w in plan.waypoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        let d = a.cell.manhattan(b.cell);
        let (dc, dr) = step_dir(a.cell, b.cell);
        let dt = b.t - a.t;
        let mut k = d.saturating_sub(spacing);
        let mut inserted = Vec::new();
        while k > 0 {
            inserted.push(TimedCell::new(
                a.t + k * dt / d,
                CellCoord::new(
                    (a.cell.col as i64 + dc * k as i64) as u32,
                    (a.cell.row as i64 + dr * k as i64) as u32,
                ),
            ));
            k = k.saturating_sub(spacing);
        }
        out.extend(inserted.into_iter().rev());
        out.push(b);
    }
    Ok(Plan {
        robot: plan.robot,
        waypoints: out,
        status: plan.status,
    })
}

/// Keeps endpoints, turns and the arrival/departure of every wait.
pub fn compress(plan: &Plan) -> Plan {
    let w = &plan.waypoints;
    let mut out = Vec::new();
    for i in 0..w.len() {
        let keep = i == 0
            || i + 1 == w.len()
            || step_dir(w[i - 1].cell, w[i].cell) != step_dir(w[i].cell, w[i + 1].cell);
        if keep {
            out.push(w[i]);
        }
    }
    Plan {
        robot: plan.robot,
        waypoints: out,
        status: plan.status,
    }
}

/// Line-oriented plan trace: one `robot t col row` record per waypoint.
pub fn export_trace(plans: &[Plan]) -> String {
    let mut s = String::from("# robot t col row\n");
    for p in plans {
        for w in &p.waypoints {
            s.push_str(&format!("{} {} {} {}\n", p.robot.0, w.t, w.cell.col, w.cell.row));
        }
    }
    s
}

/// Parses [`export_trace`] output back into plans ordered by robot id.
pub fn import_trace(text: &str) -> Result<Vec<Plan>, PlanError> {
    let mut plans: Vec<Plan> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<u32> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| PlanError::InvalidPlan(format!("line {}: {e}", n + 1)))?;
        let [robot, t, col, row] = fields[..] else {
            return Err(PlanError::InvalidPlan(format!("line {}: expected 4 fields", n + 1)));
        };
        let wp = TimedCell::new(t, CellCoord::new(col, row));
        match plans.iter_mut().find(|p| p.robot.0 == robot) {
            Some(p) => p.waypoints.push(wp),
            None => plans.push(Plan {
                robot: RobotId(robot),
                waypoints: vec![wp],
                status: PlanStatus::Planned,
            }),
        }
    }
    plans.sort_by_key(|p| p.robot);
    Ok(plans)
}
