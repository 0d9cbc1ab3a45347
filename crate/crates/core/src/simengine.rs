//! Deterministic discrete-time execution: speed counters, malfunction
//! freezes, simultaneous conflict resolution and episode scoring.

use crate::railmap::{Cell, CellTransitions, DistanceCache, Orientation, RailState};
use crate::scenario::{AgentId, Instance, MalfunctionEvent, Timestep};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Per-timestep command for one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    #[serde(rename = "F")]
    MoveForward,
    #[serde(rename = "L")]
    MoveLeft,
    #[serde(rename = "R")]
    MoveRight,
    #[serde(rename = "S")]
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentStatus {
    OffMap,
    OnMap,
    Done,
}

/// Live state of one train.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentRuntime {
    pub status: AgentStatus,
    /// Occupied cell; `None` while off map or done.
    pub position: Option<Cell>,
    pub orientation: Orientation,
    /// Speed counter in `0..=cmax`; a cell traversal completes on the step
    /// the counter reaches cmax.
    pub counter: u32,
    /// Remaining frozen steps; neither movement nor counter advance while
    /// positive.
    pub malfunction_left: Timestep,
    pub arrival: Option<Timestep>,
}

impl AgentRuntime {
    pub fn rail_state(&self) -> Option<RailState> {
        self.position
            .map(|cell| RailState::new(cell, self.orientation))
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("step past horizon at t={0}")]
    PastHorizon(Timestep),
    #[error("expected {expected} commands, got {got}")]
    CommandCount { expected: usize, got: usize },
}

/// Full episode state. One owner steps it; clones are cheap enough for
/// planner-side projection.
#[derive(Debug, Clone)]
pub struct SimState<'a> {
    pub instance: &'a Instance,
    pub t: Timestep,
    agents: Vec<AgentRuntime>,
    occupancy: Vec<Option<AgentId>>,
    /// Pending malfunction events per agent, earliest first.
    schedule: Vec<Vec<MalfunctionEvent>>,
    cursor: Vec<usize>,
    pub warnings: u64,
}

#[derive(Debug, Clone, Copy)]
struct Proposal {
    agent: AgentId,
    from: Option<Cell>,
    target: Cell,
    dir: Orientation,
}

impl<'a> SimState<'a> {
    pub fn new(instance: &'a Instance, schedule: Vec<Vec<MalfunctionEvent>>) -> SimState<'a> {
        let m = instance.agent_count();
        let mut schedule = schedule;
        schedule.resize(m, Vec::new());
        SimState {
            instance,
            t: 0,
            agents: instance
                .trains
                .iter()
                .map(|t| AgentRuntime {
                    status: AgentStatus::OffMap,
                    position: None,
                    orientation: t.initial_orientation,
                    counter: 0,
                    malfunction_left: 0,
                    arrival: None,
                })
                .collect(),
            occupancy: vec![None; instance.map.cell_count()],
            schedule,
            cursor: vec![0; m],
            warnings: 0,
        }
    }

    pub fn agents(&self) -> &[AgentRuntime] {
        &self.agents
    }

    pub fn agent(&self, id: AgentId) -> &AgentRuntime {
        &self.agents[id]
    }

    pub fn occupant(&self, cell: Cell) -> Option<AgentId> {
        self.occupancy[self.instance.map.cell_index(cell)]
    }

    pub fn all_done(&self) -> bool {
        self.agents.iter().all(|a| a.status == AgentStatus::Done)
    }

    /// Events whose onset is at timestep `t`; what a controller gets to see
    /// right before commanding that step.
    pub fn events_starting_at(&self, t: Timestep) -> Vec<MalfunctionEvent> {
        (0..self.agents.len())
            .filter_map(|i| {
                self.schedule[i]
                    .get(self.cursor[i])
                    .copied()
                    .filter(|e| e.start == t)
            })
            .collect()
    }

    /// Force a malfunction onset; used when projecting from a state whose
    /// events were revealed out of band.
    pub fn apply_onset(&mut self, event: &MalfunctionEvent) {
        let a = &mut self.agents[event.agent];
        if a.status != AgentStatus::Done {
            if a.malfunction_left > 0 {
                self.warnings += 1;
            }
            a.malfunction_left = a.malfunction_left.max(event.duration);
        }
    }

    /// Drops all not-yet-fired events; projection under "no further
    /// breakdowns".
    pub fn clear_pending_schedule(&mut self) {
        for (i, events) in self.schedule.iter_mut().enumerate() {
            events.truncate(self.cursor[i]);
        }
    }

    fn resolve_direction(
        table: CellTransitions,
        orientation: Orientation,
        cmd: Command,
    ) -> Option<Orientation> {
        let desired = match cmd {
            Command::MoveForward => orientation,
            Command::MoveLeft => orientation.counter_clockwise(),
            Command::MoveRight => orientation.clockwise(),
            Command::Stop => return None,
        };
        if table.allows(orientation, desired) {
            return Some(desired);
        }
        // An impossible branch degrades to the unique transition when there
        // is one, else to a stop.
        let mut outs = table.outgoing(orientation);
        match (outs.next(), outs.next()) {
            (Some(only), None) => Some(only),
            _ => None,
        }
    }

    /// Advances one timestep under the given commands (one per agent; entries
    /// for done agents must be `Stop`).
    pub fn step(&mut self, commands: &[Command], horizon: Timestep) -> Result<(), SimError> {
        if self.t >= horizon {
            return Err(SimError::PastHorizon(self.t));
        }
        if commands.len() != self.agents.len() {
            return Err(SimError::CommandCount {
                expected: self.agents.len(),
                got: commands.len(),
            });
        }
        // Malfunction onsets scheduled for this step.
        for i in 0..self.agents.len() {
            while let Some(e) = self.schedule[i].get(self.cursor[i]).copied() {
                if e.start > self.t {
                    break;
                }
                self.cursor[i] += 1;
                self.apply_onset(&e);
            }
        }

        // Move intents. Counter advances happen here; completing moves become
        // proposals resolved below.
        let mut proposals: Vec<Option<Proposal>> = vec![None; self.agents.len()];
        for (i, cmd) in commands.iter().enumerate() {
            let spec = &self.instance.trains[i];
            match self.agents[i].status {
                AgentStatus::Done => {
                    if *cmd != Command::Stop {
                        self.warnings += 1;
                    }
                }
                AgentStatus::OffMap => {
                    if *cmd == Command::MoveForward
                        && self.t >= spec.edt
                        && self.agents[i].malfunction_left == 0
                    {
                        proposals[i] = Some(Proposal {
                            agent: i,
                            from: None,
                            target: spec.start,
                            dir: spec.initial_orientation,
                        });
                    }
                }
                AgentStatus::OnMap => {
                    if self.agents[i].malfunction_left > 0 || *cmd == Command::Stop {
                        continue;
                    }
                    let cell = self.agents[i].position.expect("on-map agent has a cell");
                    let table = self.instance.map.transitions(cell);
                    let Some(dir) = Self::resolve_direction(table, self.agents[i].orientation, *cmd)
                    else {
                        continue;
                    };
                    let advanced = (self.agents[i].counter + 1).min(spec.cmax);
                    if advanced < spec.cmax {
                        self.agents[i].counter = advanced;
                        continue;
                    }
                    let target = self
                        .instance
                        .map
                        .neighbor(cell, dir)
                        .expect("validated map keeps moves in bounds");
                    proposals[i] = Some(Proposal {
                        agent: i,
                        from: Some(cell),
                        target,
                        dir,
                    });
                }
            }
        }

        let mut alive: Vec<bool> = proposals.iter().map(|p| p.is_some()).collect();

        // Swap conflicts can never succeed: kill both sides up front.
        let mut edges: HashMap<(Cell, Cell), AgentId> = HashMap::new();
        for p in proposals.iter().flatten() {
            if let Some(from) = p.from {
                edges.insert((from, p.target), p.agent);
            }
        }
        for p in proposals.iter().flatten() {
            if let Some(from) = p.from {
                if let Some(&other) = edges.get(&(p.target, from)) {
                    if other != p.agent {
                        alive[p.agent] = false;
                        alive[other] = false;
                    }
                }
            }
        }

        // Alternate two monotone passes to a fixed point: (a) doom moves whose
        // target holds an agent that is definitely staying, (b) pick one
        // winner per claimed cell, on-map moves before entries, then lower id.
        // An agent may follow into a cell only while its occupant's own move
        // stays alive, which the doom pass re-checks after every claim round.
        loop {
            loop {
                let mut changed = false;
                for i in 0..proposals.len() {
                    if !alive[i] {
                        continue;
                    }
                    let p = proposals[i].as_ref().unwrap();
                    if let Some(q) = self.occupant(p.target) {
                        if q != i && !alive[q] {
                            alive[i] = false;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            let mut claims: HashMap<Cell, AgentId> = HashMap::new();
            let mut killed = false;
            for i in 0..proposals.len() {
                if !alive[i] {
                    continue;
                }
                let p = proposals[i].as_ref().unwrap();
                match claims.get(&p.target) {
                    None => {
                        claims.insert(p.target, i);
                    }
                    Some(&holder) => {
                        let hp = proposals[holder].as_ref().unwrap();
                        // (entry?, id) ascending: on-map move beats entry.
                        let holder_key = (hp.from.is_none(), holder);
                        let mine = (p.from.is_none(), i);
                        if mine < holder_key {
                            alive[holder] = false;
                            claims.insert(p.target, i);
                        } else {
                            alive[i] = false;
                        }
                        killed = true;
                    }
                }
            }
            if !killed {
                break;
            }
        }

        // Execute survivors simultaneously: vacate sources, then settle
        // targets. Arrivals at the goal leave the map immediately.
        for (i, p) in proposals.iter().enumerate() {
            let Some(p) = p else { continue };
            if alive[i] {
                if let Some(from) = p.from {
                    let idx = self.instance.map.cell_index(from);
                    if self.occupancy[idx] == Some(i) {
                        self.occupancy[idx] = None;
                    }
                }
            } else if p.from.is_some() {
                // A cancelled move keeps the agent traversal-ready.
                self.agents[i].counter = self.instance.trains[i].cmax;
            }
        }
        for (i, p) in proposals.iter().enumerate() {
            let Some(p) = p else { continue };
            if !alive[i] {
                continue;
            }
            let agent = &mut self.agents[i];
            agent.orientation = p.dir;
            agent.counter = 0;
            if p.target == self.instance.trains[i].goal {
                agent.status = AgentStatus::Done;
                agent.position = None;
                agent.arrival = Some(self.t + 1);
            } else {
                agent.status = AgentStatus::OnMap;
                agent.position = Some(p.target);
                self.occupancy[self.instance.map.cell_index(p.target)] = Some(i);
            }
        }

        for agent in &mut self.agents {
            if agent.malfunction_left > 0 {
                agent.malfunction_left -= 1;
            }
        }
        self.t += 1;
        Ok(())
    }
}

/// Scored outcome of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Actual arrival timestep per agent, `None` when unfinished.
    pub arrivals: Vec<Option<Timestep>>,
    /// Arrival delay per agent: `max(act - eat, 0)` with unfinished agents
    /// estimated from their final position.
    pub delays: Vec<u64>,
    pub total_delay: u64,
    /// Agents arrived by tmax.
    pub success: usize,
    pub success_rate: f64,
    /// Normalized reward `1 - total_delay / (m * tmax)`, clamped to [0, 1].
    pub reward: f64,
}

/// Estimated arrival of an agent that has not finished: horizon plus the
/// remaining distance from its final state (start state if it never entered).
pub fn unfinished_arrival_estimate(
    instance: &Instance,
    distances: &DistanceCache,
    agent: AgentId,
    final_state: Option<RailState>,
) -> u64 {
    let spec = &instance.trains[agent];
    let state = final_state.unwrap_or_else(|| spec.start_state());
    let d = distances
        .distance(&instance.map, state, spec.goal)
        .unwrap_or(4 * instance.map.cell_count() as u32);
    instance.tmax as u64 + d as u64
}

/// Scores arrivals and final states into delays, success rate and reward.
pub fn score(
    instance: &Instance,
    distances: &DistanceCache,
    arrivals: &[Option<Timestep>],
    final_states: &[Option<RailState>],
) -> EpisodeResult {
    let m = instance.agent_count();
    assert_eq!(arrivals.len(), m);
    assert_eq!(final_states.len(), m);
    let mut delays = Vec::with_capacity(m);
    let mut success = 0;
    for i in 0..m {
        let eat = instance.trains[i].eat as u64;
        let act = match arrivals[i] {
            Some(act) => {
                if act <= instance.tmax {
                    success += 1;
                }
                act as u64
            }
            None => unfinished_arrival_estimate(instance, distances, i, final_states[i]),
        };
        delays.push(act.saturating_sub(eat));
    }
    let total_delay: u64 = delays.iter().sum();
    let denom = (m as f64) * (instance.tmax as f64);
    let reward = (1.0 - total_delay as f64 / denom).clamp(0.0, 1.0);
    EpisodeResult {
        arrivals: arrivals.to_vec(),
        delays,
        total_delay,
        success,
        success_rate: success as f64 / m as f64,
        reward,
    }
}

/// One trajectory log record; the line-oriented replay/debug format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryRow {
    pub t: Timestep,
    pub agent: AgentId,
    pub status: AgentStatus,
    pub cell: Option<Cell>,
    pub orientation: Orientation,
    pub counter: u32,
    pub malfunction_left: Timestep,
}

pub fn trajectory_rows(state: &SimState) -> Vec<TrajectoryRow> {
    state
        .agents()
        .iter()
        .enumerate()
        .map(|(i, a)| TrajectoryRow {
            t: state.t,
            agent: i,
            status: a.status,
            cell: a.position,
            orientation: a.orientation,
            counter: a.counter,
            malfunction_left: a.malfunction_left,
        })
        .collect()
}

/// Drives an episode by producing one command per agent each step.
pub trait Controller {
    fn commands(
        &mut self,
        state: &SimState,
        revealed: &[MalfunctionEvent],
    ) -> Result<Vec<Command>, ControllerError>;
}

#[derive(Debug, Error)]
#[error("controller failed at t={t}: {message}")]
pub struct ControllerError {
    pub t: Timestep,
    pub message: String,
}

/// Replays a recorded per-timestep command file; missing entries are stops.
pub struct ReplayCommands {
    by_step: HashMap<(Timestep, AgentId), Command>,
}

impl ReplayCommands {
    pub fn new(rows: impl IntoIterator<Item = (Timestep, AgentId, Command)>) -> ReplayCommands {
        ReplayCommands {
            by_step: rows.into_iter().map(|(t, a, c)| ((t, a), c)).collect(),
        }
    }
}

impl Controller for ReplayCommands {
    fn commands(
        &mut self,
        state: &SimState,
        _revealed: &[MalfunctionEvent],
    ) -> Result<Vec<Command>, ControllerError> {
        Ok((0..state.agents().len())
            .map(|i| {
                self.by_step
                    .get(&(state.t, i))
                    .copied()
                    .unwrap_or(Command::Stop)
            })
            .collect())
    }
}

#[derive(Debug)]
pub struct EpisodeRun {
    pub result: EpisodeResult,
    pub trajectory: Vec<TrajectoryRow>,
    pub warnings: u64,
    pub steps: Timestep,
}

#[derive(Debug, Error)]
#[error("episode aborted: {source}")]
pub struct EpisodeError {
    #[source]
    pub source: ControllerError,
    /// Log up to the failure, for post-mortems.
    pub partial: Vec<TrajectoryRow>,
}

/// Runs an episode until every agent is done or the horizon is reached.
/// Each malfunction is revealed to the controller at its onset step.
pub fn run_episode(
    instance: &Instance,
    distances: &DistanceCache,
    controller: &mut dyn Controller,
    schedule: Vec<Vec<MalfunctionEvent>>,
    horizon: Option<Timestep>,
    record_trajectory: bool,
) -> Result<EpisodeRun, EpisodeError> {
    let horizon = horizon.unwrap_or(instance.tmax);
    let mut state = SimState::new(instance, schedule);
    let mut trajectory = Vec::new();
    if record_trajectory {
        trajectory.extend(trajectory_rows(&state));
    }
    while state.t < horizon && !state.all_done() {
        let revealed = state.events_starting_at(state.t);
        let commands = match controller.commands(&state, &revealed) {
            Ok(c) => c,
            Err(source) => {
                return Err(EpisodeError {
                    source,
                    partial: trajectory,
                })
            }
        };
        state
            .step(&commands, horizon)
            .expect("loop guards keep steps inside the horizon");
        if record_trajectory {
            trajectory.extend(trajectory_rows(&state));
        }
    }
    let arrivals: Vec<Option<Timestep>> = state.agents().iter().map(|a| a.arrival).collect();
    let finals: Vec<Option<RailState>> = state
        .agents()
        .iter()
        .map(|a| match a.status {
            AgentStatus::OnMap => a.rail_state(),
            _ => None,
        })
        .collect();
    Ok(EpisodeRun {
        result: score(instance, distances, &arrivals, &finals),
        trajectory,
        warnings: state.warnings,
        steps: state.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::railmap::{City, DistanceCache, RailMapBuilder};
    use crate::scenario::{MalfunctionParams, TrainSpec};
    use Orientation::*;

    /// Single east-west corridor terminated by U-turn loops so the map
    /// validates; stations sit on the straight run.
    fn corridor_instance(trains: Vec<TrainSpec>, tmax: Timestep) -> Instance {
        let mut b = RailMapBuilder::new(10, 3);
        b.paint_run(Cell::new(0, 1), East, 8);
        b.paint_run(Cell::new(1, 1), East, 8);
        b.paint(Cell::new(0, 0), CellTransitions::link(South, East));
        b.paint(Cell::new(1, 0), CellTransitions::link(North, East));
        b.paint(Cell::new(0, 9), CellTransitions::link(South, West));
        b.paint(Cell::new(1, 9), CellTransitions::link(North, West));
        b.add_city(City {
            arrival: Cell::new(0, 8),
            departure: Cell::new(0, 1),
        });
        let map = b.build();
        assert_eq!(map.validate(), Vec::new());
        Instance {
            label: "corridor".into(),
            map,
            trains,
            tmax,
            malfunction: MalfunctionParams::none(),
            seed: 0,
        }
    }

    fn train(id: AgentId, start: Cell, o: Orientation, goal: Cell, cmax: u32) -> TrainSpec {
        TrainSpec {
            id,
            start,
            initial_orientation: o,
            goal,
            cmax,
            edt: 0,
            eat: 1,
        }
    }

    fn dcache(instance: &Instance) -> DistanceCache {
        DistanceCache::build(&instance.map, instance.trains.iter().map(|t| t.goal))
    }

    #[test]
    fn fast_train_moves_every_step() {
        let inst = corridor_instance(
            vec![train(0, Cell::new(0, 1), East, Cell::new(0, 8), 1)],
            100,
        );
        let mut sim = SimState::new(&inst, vec![]);
        for t in 0..8u32 {
            sim.step(&[Command::MoveForward], 100).unwrap();
            if t == 0 {
                // Entry consumes the first step.
                assert_eq!(sim.agent(0).position, Some(Cell::new(0, 1)));
            }
        }
        // Entered at t=1, then one cell per step: arrives col 8 at t=8.
        assert_eq!(sim.agent(0).status, AgentStatus::Done);
        assert_eq!(sim.agent(0).arrival, Some(8));
    }

    #[test]
    fn slow_train_advances_once_per_four_steps() {
        let inst = corridor_instance(
            vec![train(0, Cell::new(0, 1), East, Cell::new(0, 8), 4)],
            100,
        );
        let mut sim = SimState::new(&inst, vec![]);
        sim.step(&[Command::MoveForward], 100).unwrap();
        assert_eq!(sim.agent(0).position, Some(Cell::new(0, 1)));
        for step in 0..8 {
            sim.step(&[Command::MoveForward], 100).unwrap();
            let expect_col = 1 + (step + 1) / 4;
            assert_eq!(
                sim.agent(0).position,
                Some(Cell::new(0, expect_col)),
                "after {} on-map steps",
                step + 1
            );
        }
    }

    #[test]
    fn head_on_swap_is_cancelled_for_both() {
        let mut trains = vec![
            train(0, Cell::new(0, 3), East, Cell::new(0, 8), 1),
            train(1, Cell::new(0, 4), West, Cell::new(0, 1), 1),
        ];
        trains[0].eat = 50;
        trains[1].eat = 50;
        let inst = corridor_instance(trains, 100);
        let mut sim = SimState::new(&inst, vec![]);
        sim.step(&[Command::MoveForward, Command::MoveForward], 100)
            .unwrap();
        assert_eq!(sim.agent(0).position, Some(Cell::new(0, 3)));
        assert_eq!(sim.agent(1).position, Some(Cell::new(0, 4)));
        // Adjacent and facing: every further move attempt swaps and cancels.
        for _ in 0..5 {
            sim.step(&[Command::MoveForward, Command::MoveForward], 100)
                .unwrap();
            assert_eq!(sim.agent(0).position, Some(Cell::new(0, 3)));
            assert_eq!(sim.agent(1).position, Some(Cell::new(0, 4)));
        }
    }

    #[test]
    fn malfunction_freezes_then_resumes() {
        let inst = corridor_instance(
            vec![train(0, Cell::new(0, 1), East, Cell::new(0, 8), 1)],
            100,
        );
        let schedule = vec![vec![MalfunctionEvent {
            agent: 0,
            start: 2,
            duration: 3,
        }]];
        let mut sim = SimState::new(&inst, schedule);
        sim.step(&[Command::MoveForward], 100).unwrap(); // enters (0,1)
        sim.step(&[Command::MoveForward], 100).unwrap(); // moves to (0,2)
        for _ in 0..3 {
            sim.step(&[Command::MoveForward], 100).unwrap();
            assert_eq!(sim.agent(0).position, Some(Cell::new(0, 2)));
        }
        sim.step(&[Command::MoveForward], 100).unwrap();
        assert_eq!(sim.agent(0).position, Some(Cell::new(0, 3)));
    }

    #[test]
    fn follower_may_enter_a_vacated_cell_same_step() {
        let mut trains = vec![
            train(0, Cell::new(0, 1), East, Cell::new(0, 8), 1),
            train(1, Cell::new(0, 1), East, Cell::new(0, 8), 1),
        ];
        trains[1].edt = 1;
        trains[0].eat = 50;
        trains[1].eat = 50;
        let inst = corridor_instance(trains, 100);
        let mut sim = SimState::new(&inst, vec![]);
        sim.step(&[Command::MoveForward, Command::Stop], 100).unwrap();
        assert_eq!(sim.agent(0).position, Some(Cell::new(0, 1)));
        // Agent 0 moves off the start cell while agent 1 enters it.
        sim.step(&[Command::MoveForward, Command::MoveForward], 100)
            .unwrap();
        assert_eq!(sim.agent(0).position, Some(Cell::new(0, 2)));
        assert_eq!(sim.agent(1).position, Some(Cell::new(0, 1)));
    }

    #[test]
    fn blocked_follower_entry_waits() {
        let mut trains = vec![
            train(0, Cell::new(0, 1), East, Cell::new(0, 8), 1),
            train(1, Cell::new(0, 1), East, Cell::new(0, 8), 1),
        ];
        trains[0].eat = 50;
        trains[1].eat = 50;
        let inst = corridor_instance(trains, 100);
        let mut sim = SimState::new(&inst, vec![]);
        // Both try to enter the same start cell; the lower id wins the tie.
        sim.step(&[Command::MoveForward, Command::MoveForward], 100)
            .unwrap();
        assert_eq!(sim.agent(0).position, Some(Cell::new(0, 1)));
        assert_eq!(sim.agent(1).status, AgentStatus::OffMap);
        // Agent 0 stays; agent 1 still cannot enter.
        sim.step(&[Command::Stop, Command::MoveForward], 100).unwrap();
        assert_eq!(sim.agent(1).status, AgentStatus::OffMap);
    }

    #[test]
    fn invalid_branch_degrades_to_unique_transition() {
        let inst = corridor_instance(
            vec![train(0, Cell::new(0, 1), East, Cell::new(0, 8), 1)],
            100,
        );
        let mut sim = SimState::new(&inst, vec![]);
        sim.step(&[Command::MoveForward], 100).unwrap();
        // MoveLeft on a straight takes the unique forward transition.
        sim.step(&[Command::MoveLeft], 100).unwrap();
        assert_eq!(sim.agent(0).position, Some(Cell::new(0, 2)));
    }

    #[test]
    fn reward_formula_examples() {
        let mut trains = vec![
            train(0, Cell::new(0, 1), East, Cell::new(0, 8), 1),
            train(1, Cell::new(0, 1), East, Cell::new(0, 8), 1),
        ];
        trains[0].eat = 10;
        trains[1].eat = 10;
        let inst = corridor_instance(trains, 100);
        let distances = dcache(&inst);
        // Delays 0 and 10 with m=2, tmax=100 give reward 0.95.
        let result = score(
            &inst,
            &distances,
            &[Some(10), Some(20)],
            &[None, None],
        );
        assert_eq!(result.delays, vec![0, 10]);
        assert!((result.reward - 0.95).abs() < 1e-12);
        assert_eq!(result.success, 2);
    }

    #[test]
    fn never_entered_agent_uses_distance_estimate() {
        // distance(start, goal) = 20, eat = 40, tmax = 100, m = 1:
        // ACT = 120, D = 80, reward 0.2.
        let mut b = RailMapBuilder::new(23, 3);
        b.paint_run(Cell::new(0, 1), East, 21);
        b.paint_run(Cell::new(1, 1), East, 21);
        b.paint(Cell::new(0, 0), CellTransitions::link(South, East));
        b.paint(Cell::new(1, 0), CellTransitions::link(North, East));
        b.paint(Cell::new(0, 22), CellTransitions::link(South, West));
        b.paint(Cell::new(1, 22), CellTransitions::link(North, West));
        b.add_city(City {
            arrival: Cell::new(0, 21),
            departure: Cell::new(0, 1),
        });
        let map = b.build();
        let mut t = train(0, Cell::new(0, 1), East, Cell::new(0, 21), 1);
        t.eat = 40;
        let inst = Instance {
            label: "estimate".into(),
            map,
            trains: vec![t],
            tmax: 100,
            malfunction: MalfunctionParams::none(),
            seed: 0,
        };
        let distances = dcache(&inst);
        assert_eq!(
            distances.distance(
                &inst.map,
                inst.trains[0].start_state(),
                inst.trains[0].goal
            ),
            Some(20)
        );
        let result = score(&inst, &distances, &[None], &[None]);
        assert_eq!(result.delays, vec![80]);
        assert!((result.reward - 0.2).abs() < 1e-12);
        assert_eq!(result.success, 0);
    }

    #[test]
    fn all_stop_controller_finishes_nobody() {
        struct AllStop;
        impl Controller for AllStop {
            fn commands(
                &mut self,
                state: &SimState,
                _revealed: &[MalfunctionEvent],
            ) -> Result<Vec<Command>, ControllerError> {
                Ok(vec![Command::Stop; state.agents().len()])
            }
        }
        let inst = corridor_instance(
            vec![train(0, Cell::new(0, 1), East, Cell::new(0, 8), 1)],
            30,
        );
        let distances = dcache(&inst);
        let run = run_episode(&inst, &distances, &mut AllStop, vec![], None, false).unwrap();
        assert_eq!(run.result.success, 0);
        assert_eq!(run.steps, 30);
        assert!(run.result.reward < 1.0);
    }

    #[test]
    fn step_is_deterministic() {
        let mut trains = vec![
            train(0, Cell::new(0, 1), East, Cell::new(0, 8), 2),
            train(1, Cell::new(1, 1), East, Cell::new(0, 8), 1),
        ];
        trains[0].eat = 90;
        trains[1].eat = 90;
        let inst = corridor_instance(trains, 100);
        let schedule = vec![
            vec![MalfunctionEvent {
                agent: 0,
                start: 4,
                duration: 2,
            }],
            vec![],
        ];
        let mut rows_first = None;
        for _ in 0..2 {
            let mut sim = SimState::new(&inst, schedule.clone());
            let mut rows = Vec::new();
            for t in 0..40u32 {
                let cmd = if t % 3 == 0 {
                    Command::Stop
                } else {
                    Command::MoveForward
                };
                sim.step(&[cmd, Command::MoveForward], 100).unwrap();
                rows.extend(trajectory_rows(&sim));
            }
            match &rows_first {
                None => rows_first = Some(rows),
                Some(first) => assert_eq!(first, &rows),
            }
        }
    }
}
