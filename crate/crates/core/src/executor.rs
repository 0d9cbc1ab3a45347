//! Robust plan execution: an order-preserving stopping policy over shared
//! cells, plus scheduled (or per-breakdown) partial replanning with LNS.

use crate::planner::Solution;
use crate::railmap::DistanceCache;
use crate::scenario::{
    rng_purpose, stream_rng, AgentId, Instance, MalfunctionEvent, Timestep,
};
use crate::simengine::{
    run_episode, AgentStatus, Command, Controller, ControllerError, EpisodeResult, SimState,
    TrajectoryRow,
};
use crate::sipp::{self, Path, PathRecord, ReservationTable, StartOverride};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("desync: agent {agent} at t={t} is off its planned path")]
    Desync { agent: AgentId, t: Timestep },
    #[error(transparent)]
    Episode(#[from] crate::simengine::EpisodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Visit {
    enter: Timestep,
    agent: AgentId,
    record: usize,
}

/// Planned visit order of every cell plus per-agent progress cursors. The
/// policy lets an agent claim a cell only after all earlier-scheduled
/// visitors have been through it (hand-offs in the same step allowed).
#[derive(Debug, Clone)]
pub struct McpState {
    /// Cell index -> visits ordered by planned entry.
    visits: HashMap<usize, Vec<Visit>>,
    /// Leading visits of each cell already entered and left; advances
    /// monotonically.
    done_prefix: HashMap<usize, usize>,
    /// Rank of each (agent, record) in its cell's visit list.
    ranks: Vec<Vec<usize>>,
    /// Current record index per agent: the occupied record while on map, 0
    /// before entry, path length when done.
    cursors: Vec<usize>,
}

/// Records the planned visit order of every cell by entry time.
pub fn build_mcp(instance: &Instance, solution: &Solution) -> McpState {
    let mut visits: HashMap<usize, Vec<Visit>> = HashMap::new();
    for path in solution.paths.iter().flatten() {
        for (record, r) in path.occupancy.iter().enumerate() {
            visits
                .entry(instance.map.cell_index(r.cell))
                .or_default()
                .push(Visit {
                    enter: r.enter,
                    agent: path.agent,
                    record,
                });
        }
    }
    let mut ranks: Vec<Vec<usize>> = solution
        .paths
        .iter()
        .map(|p| vec![0; p.as_ref().map(|p| p.occupancy.len()).unwrap_or(0)])
        .collect();
    for v in visits.values_mut() {
        v.sort_unstable_by_key(|x| (x.enter, x.agent));
        for (rank, visit) in v.iter().enumerate() {
            ranks[visit.agent][visit.record] = rank;
        }
    }
    McpState {
        done_prefix: visits.keys().map(|&k| (k, 0)).collect(),
        visits,
        ranks,
        cursors: vec![0; instance.agent_count()],
    }
}

impl McpState {
    pub fn cursor(&self, agent: AgentId) -> usize {
        self.cursors[agent]
    }

    /// Ordered (agent, planned enter) visits of a cell.
    pub fn visit_list(&self, instance: &Instance, cell: crate::railmap::Cell) -> Vec<(AgentId, Timestep)> {
        self.visits
            .get(&instance.map.cell_index(cell))
            .map(|v| v.iter().map(|x| (x.agent, x.enter)).collect())
            .unwrap_or_default()
    }

    /// Aligns cursors with a simulator state; used after rebuilding from a
    /// mid-episode solution.
    fn init_cursors(&mut self, sim: &SimState, solution: &Solution) {
        for (i, agent) in sim.agents().iter().enumerate() {
            self.cursors[i] = match agent.status {
                AgentStatus::OffMap => 0,
                AgentStatus::Done => solution.paths[i]
                    .as_ref()
                    .map(|p| p.occupancy.len())
                    .unwrap_or(0),
                AgentStatus::OnMap => {
                    let path = solution.paths[i].as_ref().expect("on-map agent has a path");
                    path.record_index_at(sim.t)
                }
            };
        }
    }

    fn visit_left(cursors: &[usize], sim: &SimState, visit: &Visit) -> bool {
        sim.agent(visit.agent).status == AgentStatus::Done
            || cursors[visit.agent] > visit.record
    }

    /// True when `agent` may attempt the move into its record `record`:
    /// every earlier-scheduled visitor has been through the cell, except
    /// possibly the immediate predecessor currently occupying it (the move
    /// then only succeeds if that occupant vacates in the same step).
    fn clear_to_enter(
        &mut self,
        sim: &SimState,
        instance: &Instance,
        agent: AgentId,
        record: usize,
        cell: crate::railmap::Cell,
    ) -> bool {
        let idx = instance.map.cell_index(cell);
        if !self.visits.contains_key(&idx) {
            return true;
        }
        let my_rank = self.ranks[agent][record];
        let mut prefix = *self.done_prefix.get(&idx).expect("prefix tracked");
        let list = &self.visits[&idx];
        while prefix < list.len() && Self::visit_left(&self.cursors, sim, &list[prefix]) {
            prefix += 1;
        }
        self.done_prefix.insert(idx, prefix);
        if prefix >= my_rank {
            return true;
        }
        if prefix + 1 == my_rank {
            let v = self.visits[&idx][prefix];
            // Hand-off: the last predecessor is in the cell right now.
            return sim.agent(v.agent).status == AgentStatus::OnMap
                && self.cursors[v.agent] == v.record
                && sim.agent(v.agent).position == Some(cell);
        }
        false
    }

    /// Advances cursors after a simulator step; errors when an agent sits on
    /// a cell its plan does not predict.
    pub fn update_cursors(&mut self, sim: &SimState, solution: &Solution) -> Result<(), ExecError> {
        for (i, agent) in sim.agents().iter().enumerate() {
            match agent.status {
                AgentStatus::OffMap => {}
                AgentStatus::Done => {
                    if let Some(p) = &solution.paths[i] {
                        self.cursors[i] = p.occupancy.len();
                    }
                }
                AgentStatus::OnMap => {
                    let Some(path) = &solution.paths[i] else {
                        return Err(ExecError::Desync { agent: i, t: sim.t });
                    };
                    let pos = agent.position.expect("on-map agent has a cell");
                    let k = self.cursors[i];
                    if path.occupancy.get(k).map(|r| r.cell) == Some(pos) {
                        continue;
                    }
                    if path.occupancy.get(k + 1).map(|r| r.cell) == Some(pos) {
                        self.cursors[i] = k + 1;
                    } else {
                        return Err(ExecError::Desync { agent: i, t: sim.t });
                    }
                }
            }
        }
        Ok(())
    }
}

fn command_toward(from: crate::railmap::Orientation, to: crate::railmap::Orientation) -> Command {
    if to == from {
        Command::MoveForward
    } else if to == from.clockwise() {
        Command::MoveRight
    } else if to == from.counter_clockwise() {
        Command::MoveLeft
    } else {
        // Reversals never appear in planned paths; forward degrades safely.
        Command::MoveForward
    }
}

/// One step of the stopping policy: move commands along each agent's planned
/// path, stopping an agent only when its next cell's visit order is not yet
/// clear. Mid-traversal agents keep charging their counters.
pub fn mcp_commands(
    sim: &SimState,
    mcp: &mut McpState,
    instance: &Instance,
    solution: &Solution,
) -> Result<Vec<Command>, ExecError> {
    let mut commands = vec![Command::Stop; instance.agent_count()];
    for i in 0..instance.agent_count() {
        let agent = sim.agent(i);
        match agent.status {
            AgentStatus::Done => {}
            AgentStatus::OffMap => {
                let Some(path) = &solution.paths[i] else { continue };
                if agent.malfunction_left > 0 || sim.t < instance.trains[i].edt {
                    continue;
                }
                if mcp.clear_to_enter(sim, instance, i, 0, path.occupancy[0].cell) {
                    commands[i] = Command::MoveForward;
                }
            }
            AgentStatus::OnMap => {
                if agent.malfunction_left > 0 {
                    continue;
                }
                let Some(path) = &solution.paths[i] else {
                    return Err(ExecError::Desync { agent: i, t: sim.t });
                };
                let k = mcp.cursors[i];
                let Some(next) = path.occupancy.get(k + 1) else {
                    return Err(ExecError::Desync { agent: i, t: sim.t });
                };
                let ready = agent.counter + 1 >= instance.trains[i].cmax;
                if !ready || mcp.clear_to_enter(sim, instance, i, k + 1, next.cell) {
                    commands[i] = command_toward(agent.orientation, next.orientation);
                }
            }
        }
    }
    Ok(commands)
}

/// Execution modes for [`run_controller`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplanMode {
    /// Order enforcement only, never replan.
    #[serde(rename = "mcp-only")]
    McpOnly,
    /// LNS partial replanning at fixed instants `floor(i*tmax/r)`.
    #[serde(rename = "lns-pr")]
    LnsPr,
    /// The comparison baseline: the same partial replanning at every step a
    /// new breakdown begins.
    #[serde(rename = "per-malfunction-pr")]
    PerMalfunctionPr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplanConfig {
    /// Scheduled replanning runs per episode.
    pub runs: u32,
    /// LNS iterations per run.
    pub iterations: u32,
    pub mode: ReplanMode,
}

impl ReplanConfig {
    pub fn new(mode: ReplanMode) -> ReplanConfig {
        ReplanConfig {
            runs: 20,
            iterations: 20,
            mode,
        }
    }
}

/// Observes simulator states into actual per-agent timelines.
#[derive(Debug, Clone)]
struct RecordTracker {
    records: Vec<Vec<PathRecord>>,
    done_noted: Vec<bool>,
}

impl RecordTracker {
    fn new(agents: usize) -> RecordTracker {
        RecordTracker {
            records: vec![Vec::new(); agents],
            done_noted: vec![false; agents],
        }
    }

    fn observe(&mut self, sim: &SimState) {
        for (i, agent) in sim.agents().iter().enumerate() {
            match agent.status {
                AgentStatus::OffMap => {}
                AgentStatus::OnMap => {
                    let cell = agent.position.expect("on-map agent has a cell");
                    let fresh = self.records[i].last().map(|r| r.cell) != Some(cell);
                    if fresh {
                        if let Some(last) = self.records[i].last_mut() {
                            last.leave = sim.t;
                        }
                        self.records[i].push(PathRecord {
                            cell,
                            orientation: agent.orientation,
                            enter: sim.t,
                            leave: sim.t,
                        });
                    }
                }
                AgentStatus::Done => {
                    if !self.done_noted[i] {
                        self.done_noted[i] = true;
                        let arrival = agent.arrival.expect("done agent has an arrival");
                        if let Some(last) = self.records[i].last_mut() {
                            last.leave = arrival;
                        }
                        self.records[i].push(PathRecord {
                            cell: sim.instance.trains[i].goal,
                            orientation: agent.orientation,
                            enter: arrival,
                            leave: arrival,
                        });
                    }
                }
            }
        }
    }
}

/// Forward-simulates the rest of the episode under the stopping policy with
/// no further breakdowns, returning each agent's projected timeline from the
/// given state on. `None` when the projection fails to finish under the cap
/// (which a valid plan never does).
fn project_completion(
    instance: &Instance,
    sim: &SimState,
    solution: &Solution,
    mcp: &McpState,
    cap: Timestep,
) -> Option<Vec<Vec<PathRecord>>> {
    let mut proj = sim.clone();
    proj.clear_pending_schedule();
    let mut mcp = mcp.clone();
    let mut tracker = RecordTracker::new(instance.agent_count());
    tracker.observe(&proj);
    while proj.t < cap && !proj.all_done() {
        let commands = mcp_commands(&proj, &mut mcp, instance, solution).ok()?;
        proj.step(&commands, cap).ok()?;
        tracker.observe(&proj);
        mcp.update_cursors(&proj, solution).ok()?;
    }
    let all_done = proj.all_done();
    let unplanned_left = (0..instance.agent_count())
        .any(|i| solution.paths[i].is_none() && sim.agent(i).status != AgentStatus::Done);
    if !all_done && !unplanned_left {
        return None;
    }
    Some(tracker.records)
}

/// Splices an executed prefix onto a projected or replanned suffix. Both
/// share the agent's current cell; the suffix supplies its departure.
fn splice(prefix: &[PathRecord], suffix: &[PathRecord]) -> Vec<PathRecord> {
    if prefix.is_empty() {
        return suffix.to_vec();
    }
    let mut merged = prefix.to_vec();
    let last = merged.last_mut().expect("nonempty prefix");
    debug_assert_eq!(suffix.first().map(|r| r.cell), Some(last.cell));
    if let Some(first) = suffix.first() {
        last.leave = first.leave;
        last.orientation = first.orientation;
    }
    merged.extend_from_slice(&suffix[1..]);
    merged
}

fn path_from_records(agent: AgentId, records: Vec<PathRecord>) -> Option<Path> {
    let first = records.first()?;
    let last = records.last()?;
    Some(Path {
        agent,
        entry_time: first.enter,
        planned_arrival: last.enter,
        occupancy: records,
    })
}

/// Replans one active agent from its live state against the reservations in
/// `table`.
fn replan_agent(
    instance: &Instance,
    distances: &DistanceCache,
    sim: &SimState,
    executed: &[Vec<PathRecord>],
    table: &ReservationTable,
    agent: AgentId,
    latest_arrival: Timestep,
) -> Option<Path> {
    let spec = &instance.trains[agent];
    let dist = distances.map_for(spec.goal)?;
    let state = sim.agent(agent);
    match state.status {
        AgentStatus::Done => None,
        AgentStatus::OffMap => {
            // Entry is possible only after now and after any running
            // breakdown clears.
            let mut spec = spec.clone();
            spec.edt = spec.edt.max(sim.t + state.malfunction_left);
            let path = sipp::plan(&instance.map, dist, &spec, table, None, latest_arrival).ok()?;
            Some(path)
        }
        AgentStatus::OnMap => {
            let over = StartOverride {
                state: state.rail_state().expect("on-map agent has a state"),
                time: sim.t,
                counter: state.counter,
                malfunction_left: state.malfunction_left,
            };
            let suffix =
                sipp::plan(&instance.map, dist, spec, table, Some(over), latest_arrival).ok()?;
            let records = splice(&executed[agent], &suffix.occupancy);
            path_from_records(agent, records)
        }
    }
}

/// Retimes the whole fleet by projection, then runs `p` delay-guided LNS
/// iterations over the active agents' suffixes, accepting only strict
/// predicted-delay improvements. History before `sim.t` is never touched.
/// Returns the (possibly unchanged) solution with a matching visit order.
#[allow(clippy::too_many_arguments)]
pub fn partial_replan(
    instance: &Instance,
    distances: &DistanceCache,
    sim: &SimState,
    solution: &Solution,
    mcp: &McpState,
    executed: &[Vec<PathRecord>],
    revealed: &[MalfunctionEvent],
    p: u32,
    rng: &mut ChaCha8Rng,
) -> (Solution, McpState) {
    let unchanged = || (solution.clone(), mcp.clone());
    let cap = instance.tmax.saturating_mul(4).max(sim.t + 1);
    let latest_arrival = instance
        .tmax
        .saturating_add(instance.malfunction.max_duration);

    // Project with the just-revealed breakdowns applied.
    let mut now = sim.clone();
    for e in revealed {
        now.apply_onset(e);
    }
    let Some(projected) = project_completion(instance, &now, solution, mcp, cap) else {
        return unchanged();
    };

    // Retimed incumbent: executed history spliced onto projected futures.
    let mut paths: Vec<Option<Path>> = Vec::with_capacity(instance.agent_count());
    for i in 0..instance.agent_count() {
        match sim.agent(i).status {
            AgentStatus::Done => {
                paths.push(path_from_records(i, executed[i].clone()));
            }
            _ if solution.paths[i].is_none() => paths.push(None),
            AgentStatus::OnMap => {
                paths.push(path_from_records(i, splice(&executed[i], &projected[i])));
            }
            AgentStatus::OffMap => {
                paths.push(path_from_records(i, projected[i].clone()));
            }
        }
    }
    let mut incumbent = Solution::compute(instance, distances, paths);
    debug_assert!(incumbent.validate_conflict_free(instance).is_ok());

    let active: Vec<AgentId> = (0..instance.agent_count())
        .filter(|&i| sim.agent(i).status != AgentStatus::Done)
        .collect();

    for _ in 0..p {
        // Delay-guided neighborhood over active agents.
        let delayed: Vec<AgentId> = active
            .iter()
            .copied()
            .filter(|&i| {
                Solution::agent_delay(instance, distances, i, incumbent.paths[i].as_ref()) > 0
            })
            .collect();
        if delayed.is_empty() {
            break;
        }
        let seed = delayed[rng.gen_range(0..delayed.len())];
        let mut selected = vec![seed];
        if let Some(seed_path) = &incumbent.paths[seed] {
            let from = seed_path.record_index_at(sim.t);
            let route: Vec<_> = seed_path.occupancy[from..].iter().map(|r| r.cell).collect();
            let mut hits: Vec<(Timestep, AgentId)> = Vec::new();
            for &other in &active {
                if other == seed {
                    continue;
                }
                if let Some(p) = &incumbent.paths[other] {
                    for (cell, start, end) in p.blocking() {
                        if end > sim.t && route.contains(&cell) {
                            hits.push((start, other));
                            break;
                        }
                    }
                }
            }
            hits.sort_unstable_by(|a, b| b.cmp(a));
            for (_, a) in hits {
                if selected.len() >= 8 {
                    break;
                }
                if !selected.contains(&a) {
                    selected.push(a);
                }
            }
        }
        selected.shuffle(rng);

        let mut candidate_paths = incumbent.paths.clone();
        for &a in &selected {
            candidate_paths[a] = None;
        }
        let Ok(mut table) =
            ReservationTable::build(&instance.map, candidate_paths.iter().flatten())
        else {
            return unchanged();
        };
        for &a in &selected {
            match replan_agent(instance, distances, sim, executed, &table, a, latest_arrival) {
                Some(path) if table.add_path(&instance.map, &path).is_ok() => {
                    candidate_paths[a] = Some(path);
                }
                _ => {
                    // Keep the old suffix when replanning fails outright.
                    if let Some(old) = &incumbent.paths[a] {
                        if table.add_path(&instance.map, old).is_ok() {
                            candidate_paths[a] = Some(old.clone());
                        }
                    }
                }
            }
        }
        // An on-map agent must always keep a future path; a candidate that
        // lost one is not executable.
        let executable = selected.iter().all(|&a| {
            candidate_paths[a].is_some() || sim.agent(a).status != AgentStatus::OnMap
        });
        if !executable {
            continue;
        }
        let candidate = Solution::compute(instance, distances, candidate_paths);
        if candidate.total_delay < incumbent.total_delay
            && candidate.validate_conflict_free(instance).is_ok()
        {
            incumbent = candidate;
        }
    }

    let mut mcp2 = build_mcp(instance, &incumbent);
    mcp2.init_cursors(sim, &incumbent);
    (incumbent, mcp2)
}

/// The execution controller: order-preserving stopping each step, plus the
/// configured replanning trigger.
pub struct McpController<'a> {
    instance: &'a Instance,
    distances: &'a DistanceCache,
    solution: Solution,
    mcp: McpState,
    config: ReplanConfig,
    rng: ChaCha8Rng,
    tracker: RecordTracker,
    /// Scheduled replanning instants, ascending.
    instants: Vec<Timestep>,
    next_instant: usize,
    pub replans: u64,
}

impl<'a> McpController<'a> {
    pub fn new(
        instance: &'a Instance,
        distances: &'a DistanceCache,
        solution: Solution,
        config: ReplanConfig,
        seed: u64,
    ) -> McpController<'a> {
        let mcp = build_mcp(instance, &solution);
        let mut instants = Vec::new();
        if config.mode == ReplanMode::LnsPr && config.runs > 0 {
            for i in 1..=config.runs as u64 {
                let t = (i * instance.tmax as u64 / config.runs as u64) as Timestep;
                if t > 0 && instants.last() != Some(&t) {
                    instants.push(t);
                }
            }
        }
        McpController {
            instance,
            distances,
            solution,
            mcp,
            config,
            rng: stream_rng(seed, rng_purpose::LNS, 1),
            tracker: RecordTracker::new(instance.agent_count()),
            instants,
            next_instant: 0,
            replans: 0,
        }
    }

    pub fn solution(&self) -> &Solution {
        &self.solution
    }

    fn should_replan(&mut self, t: Timestep, revealed: &[MalfunctionEvent]) -> bool {
        match self.config.mode {
            ReplanMode::McpOnly => false,
            ReplanMode::PerMalfunctionPr => !revealed.is_empty(),
            ReplanMode::LnsPr => {
                let mut due = false;
                while self.next_instant < self.instants.len()
                    && self.instants[self.next_instant] <= t
                {
                    self.next_instant += 1;
                    due = true;
                }
                due
            }
        }
    }
}

impl Controller for McpController<'_> {
    fn commands(
        &mut self,
        state: &SimState,
        revealed: &[MalfunctionEvent],
    ) -> Result<Vec<Command>, ControllerError> {
        let to_ctrl = |e: ExecError| ControllerError {
            t: state.t,
            message: e.to_string(),
        };
        self.tracker.observe(state);
        self.mcp
            .update_cursors(state, &self.solution)
            .map_err(to_ctrl)?;
        if self.should_replan(state.t, revealed) && !state.all_done() {
            let (solution, mcp) = partial_replan(
                self.instance,
                self.distances,
                state,
                &self.solution,
                &self.mcp,
                &self.tracker.records,
                revealed,
                self.config.iterations,
                &mut self.rng,
            );
            self.solution = solution;
            self.mcp = mcp;
            self.replans += 1;
        }
        mcp_commands(state, &mut self.mcp, self.instance, &self.solution).map_err(to_ctrl)
    }
}

/// One executed episode with its mode bookkeeping.
#[derive(Debug)]
pub struct ControllerReport {
    pub result: EpisodeResult,
    pub replans: u64,
    pub steps: Timestep,
    pub warnings: u64,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Executes a solution under the given breakdown schedule and replan mode.
pub fn run_controller(
    instance: &Instance,
    distances: &DistanceCache,
    solution: Solution,
    config: ReplanConfig,
    schedule: Vec<Vec<MalfunctionEvent>>,
    seed: u64,
    horizon: Option<Timestep>,
    record_trajectory: bool,
) -> Result<ControllerReport, ExecError> {
    let mut controller = McpController::new(instance, distances, solution, config, seed);
    let run = run_episode(
        instance,
        distances,
        &mut controller,
        schedule,
        horizon,
        record_trajectory,
    )?;
    Ok(ControllerReport {
        result: run.result,
        replans: controller.replans,
        steps: run.steps,
        warnings: run.warnings,
        trajectory: run.trajectory,
    })
}
