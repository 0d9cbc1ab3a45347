//! Shared integration-test helpers: hand fixtures, random small maps, an
//! independent time-expanded search oracle and a timetable-following
//! controller.

#![allow(dead_code)]

use railplan_core::railmap::{
    Cell, CellTransitions, City, Orientation, RailMap, RailMapBuilder, RailState, ORIENTATIONS,
};
use railplan_core::scenario::{AgentId, Instance, MalfunctionParams, Timestep, TrainSpec};
use railplan_core::simengine::{
    AgentStatus, Command, Controller, ControllerError, SimState, TrajectoryRow,
};
use railplan_core::sipp::Path;
use rand::Rng;
use std::collections::{HashMap, HashSet, VecDeque};
use Orientation::{East, North, South, West};

fn ew() -> CellTransitions {
    CellTransitions::link(East, West)
}

fn ns() -> CellTransitions {
    CellTransitions::link(North, South)
}

/// Rectangular single-track ring with corners at (top,left) and
/// (bottom,right).
pub fn paint_ring(b: &mut RailMapBuilder, top: u32, left: u32, bottom: u32, right: u32) {
    for col in left + 1..right {
        b.paint(Cell::new(top, col), ew());
        b.paint(Cell::new(bottom, col), ew());
    }
    for row in top + 1..bottom {
        b.paint(Cell::new(row, left), ns());
        b.paint(Cell::new(row, right), ns());
    }
    b.paint(Cell::new(top, left), CellTransitions::link(South, East));
    b.paint(Cell::new(top, right), CellTransitions::link(South, West));
    b.paint(Cell::new(bottom, left), CellTransitions::link(North, East));
    b.paint(Cell::new(bottom, right), CellTransitions::link(North, West));
}

/// Theta graph: an outer ring with a middle horizontal chord, so west-east
/// trips have a short route and a detour.
pub fn two_route_instance() -> Instance {
    let mut b = RailMapBuilder::new(12, 7);
    paint_ring(&mut b, 1, 1, 5, 10);
    for col in 2..10 {
        b.paint(Cell::new(3, col), ew());
    }
    // Chord junctions on the ring verticals: the west one branches
    // southbound traffic onto the chord, the east one lets northbound
    // traffic turn back west onto it.
    b.paint(Cell::new(3, 1), ns().union(CellTransitions::link(North, East)));
    b.paint(Cell::new(3, 10), ns().union(CellTransitions::link(South, West)));
    b.add_city(City {
        arrival: Cell::new(3, 9),
        departure: Cell::new(2, 1),
    });
    b.add_city(City {
        arrival: Cell::new(3, 10),
        departure: Cell::new(3, 2),
    });
    let map = b.build();
    assert_eq!(map.validate(), Vec::new());
    let trains = vec![
        TrainSpec {
            id: 0,
            start: Cell::new(2, 1),
            initial_orientation: South,
            goal: Cell::new(3, 9),
            cmax: 1,
            edt: 5,
            eat: 15,
        },
        TrainSpec {
            id: 1,
            start: Cell::new(3, 2),
            initial_orientation: East,
            goal: Cell::new(3, 10),
            cmax: 1,
            edt: 0,
            eat: 40,
        },
    ];
    Instance {
        label: "two-route".into(),
        map,
        trains,
        tmax: 120,
        malfunction: MalfunctionParams {
            lambda: 0.0,
            min_duration: 10,
            max_duration: 40,
        },
        seed: 0,
    }
}

/// Corridor loop instance whose only purpose is exercising the scoring
/// arithmetic: `m` identical trains on a two-row loop with the given
/// expected-arrival offsets.
pub fn scoring_instance(m: usize, tmax: Timestep, eats: &[Timestep]) -> Instance {
    let mut b = RailMapBuilder::new(12, 3);
    for col in 1..11 {
        b.paint(Cell::new(0, col), ew());
        b.paint(Cell::new(1, col), ew());
    }
    b.paint(Cell::new(0, 0), CellTransitions::link(South, East));
    b.paint(Cell::new(1, 0), CellTransitions::link(North, East));
    b.paint(Cell::new(0, 11), CellTransitions::link(South, West));
    b.paint(Cell::new(1, 11), CellTransitions::link(North, West));
    b.add_city(City {
        arrival: Cell::new(0, 10),
        departure: Cell::new(0, 1),
    });
    let map = b.build();
    assert_eq!(map.validate(), Vec::new());
    let trains = (0..m)
        .map(|id| TrainSpec {
            id,
            start: Cell::new(0, 1),
            initial_orientation: East,
            goal: Cell::new(0, 10),
            cmax: 1,
            edt: 0,
            eat: eats[id],
        })
        .collect();
    Instance {
        label: "scoring".into(),
        map,
        trains,
        tmax,
        malfunction: MalfunctionParams::none(),
        seed: 0,
    }
}

/// One train that never enters: start-to-goal distance 20, eat 40, tmax 100.
pub fn never_entered_instance() -> Instance {
    let mut b = RailMapBuilder::new(23, 3);
    for col in 1..22 {
        b.paint(Cell::new(0, col), ew());
        b.paint(Cell::new(1, col), ew());
    }
    b.paint(Cell::new(0, 0), CellTransitions::link(South, East));
    b.paint(Cell::new(1, 0), CellTransitions::link(North, East));
    b.paint(Cell::new(0, 22), CellTransitions::link(South, West));
    b.paint(Cell::new(1, 22), CellTransitions::link(North, West));
    b.add_city(City {
        arrival: Cell::new(0, 21),
        departure: Cell::new(0, 1),
    });
    let map = b.build();
    assert_eq!(map.validate(), Vec::new());
    Instance {
        label: "never-entered".into(),
        map,
        trains: vec![TrainSpec {
            id: 0,
            start: Cell::new(0, 1),
            initial_orientation: East,
            goal: Cell::new(0, 21),
            cmax: 1,
            edt: 0,
            eat: 40,
        }],
        tmax: 100,
        malfunction: MalfunctionParams::none(),
        seed: 0,
    }
}

/// Random small connected map: a border ring plus a few chords meeting it at
/// switches and crossing each other at diamonds.
pub fn random_small_map(rng: &mut impl Rng) -> RailMap {
    loop {
        let w = rng.gen_range(6..=8u32);
        let h = rng.gen_range(6..=8u32);
        let (top, left, bottom, right) = (1, 1, h - 2, w - 2);
        let mut b = RailMapBuilder::new(w, h);
        paint_ring(&mut b, top, left, bottom, right);
        let mut vcols: Vec<u32> = (left + 2..right - 1).collect();
        let mut hrows: Vec<u32> = (top + 2..bottom - 1).collect();
        for _ in 0..rng.gen_range(0..=2usize) {
            if vcols.is_empty() {
                break;
            }
            let col = vcols.remove(rng.gen_range(0..vcols.len()));
            for row in top + 1..bottom {
                b.paint(Cell::new(row, col), ns());
            }
            let top_curve = if rng.gen() {
                CellTransitions::link(South, East)
            } else {
                CellTransitions::link(South, West)
            };
            let bottom_curve = if rng.gen() {
                CellTransitions::link(North, East)
            } else {
                CellTransitions::link(North, West)
            };
            b.paint(Cell::new(top, col), top_curve);
            b.paint(Cell::new(bottom, col), bottom_curve);
        }
        for _ in 0..rng.gen_range(0..=1usize) {
            if hrows.is_empty() {
                break;
            }
            let row = hrows.remove(rng.gen_range(0..hrows.len()));
            for col in left + 1..right {
                b.paint(Cell::new(row, col), ew());
            }
            let left_curve = if rng.gen() {
                CellTransitions::link(East, North)
            } else {
                CellTransitions::link(East, South)
            };
            let right_curve = if rng.gen() {
                CellTransitions::link(West, North)
            } else {
                CellTransitions::link(West, South)
            };
            b.paint(Cell::new(row, left), left_curve);
            b.paint(Cell::new(row, right), right_curve);
        }
        b.add_city(City {
            arrival: Cell::new(top, left + 1),
            departure: Cell::new(bottom, left + 1),
        });
        let map = b.build();
        if map.validate().is_empty() {
            return map;
        }
    }
}

/// All valid states of a map (traversable cell, orientation with an exit).
pub fn enumerate_states(map: &RailMap) -> Vec<RailState> {
    let mut out = Vec::new();
    for row in 0..map.height() {
        for col in 0..map.width() {
            let cell = Cell::new(row, col);
            if !map.is_traversable(cell) {
                continue;
            }
            for o in ORIENTATIONS {
                if map.transitions(cell).outgoing_count(o) > 0 {
                    out.push(RailState::new(cell, o));
                }
            }
        }
    }
    out
}

/// Brute-force minimum arrival time by breadth-first search over
/// (position, orientation, counter, time) states under the exact simulator
/// rules, against a set of reserved paths. Completely independent of the
/// interval-based planner.
pub struct TimeExpandedOracle {
    blocked: HashMap<Cell, Vec<(Timestep, Timestep)>>,
    edges: HashSet<(Cell, Cell, Timestep)>,
}

impl TimeExpandedOracle {
    pub fn new(reserved: &[&Path]) -> TimeExpandedOracle {
        let mut blocked: HashMap<Cell, Vec<(Timestep, Timestep)>> = HashMap::new();
        let mut edges = HashSet::new();
        for path in reserved {
            for (cell, start, end) in path.blocking() {
                blocked.entry(cell).or_default().push((start, end));
            }
            for (from, to, t) in path.edges() {
                edges.insert((from, to, t));
            }
        }
        TimeExpandedOracle { blocked, edges }
    }

    fn free(&self, cell: Cell, t: Timestep) -> bool {
        self.blocked
            .get(&cell)
            .map(|v| v.iter().all(|&(s, e)| t < s || t >= e))
            .unwrap_or(true)
    }

    fn swap(&self, from: Cell, to: Cell, arrive: Timestep) -> bool {
        self.edges.contains(&(to, from, arrive))
    }

    /// Earliest arrival at `spec.goal` starting off-map, or `None` within the
    /// horizon.
    pub fn earliest_arrival(
        &self,
        map: &RailMap,
        spec: &TrainSpec,
        horizon: Timestep,
    ) -> Option<Timestep> {
        #[derive(Clone, Copy, PartialEq, Eq, Hash)]
        enum Pos {
            Off,
            On(Cell, Orientation, u32),
        }
        let mut seen: HashSet<(Pos, Timestep)> = HashSet::new();
        let mut queue: VecDeque<(Pos, Timestep)> = VecDeque::new();
        queue.push_back((Pos::Off, spec.edt));
        seen.insert((Pos::Off, spec.edt));
        while let Some((pos, t)) = queue.pop_front() {
            if t >= horizon {
                continue;
            }
            let push = |queue: &mut VecDeque<(Pos, Timestep)>,
                            seen: &mut HashSet<(Pos, Timestep)>,
                            state: (Pos, Timestep)| {
                if seen.insert(state) {
                    queue.push_back(state);
                }
            };
            match pos {
                Pos::Off => {
                    push(&mut queue, &mut seen, (Pos::Off, t + 1));
                    if t >= spec.edt && self.free(spec.start, t + 1) {
                        push(
                            &mut queue,
                            &mut seen,
                            (Pos::On(spec.start, spec.initial_orientation, 0), t + 1),
                        );
                    }
                }
                Pos::On(cell, o, counter) => {
                    if self.free(cell, t + 1) {
                        // Stop, or charge the counter without completing.
                        push(&mut queue, &mut seen, (Pos::On(cell, o, counter), t + 1));
                        if counter + 1 < spec.cmax {
                            push(
                                &mut queue,
                                &mut seen,
                                (Pos::On(cell, o, counter + 1), t + 1),
                            );
                        }
                    }
                    if counter + 1 >= spec.cmax {
                        for dir in map.transitions(cell).outgoing(o) {
                            let Some(next) = map.neighbor(cell, dir) else { continue };
                            if !self.free(next, t + 1) || self.swap(cell, next, t + 1) {
                                continue;
                            }
                            if next == spec.goal {
                                return Some(t + 1);
                            }
                            push(&mut queue, &mut seen, (Pos::On(next, dir, 0), t + 1));
                        }
                    }
                }
            }
        }
        None
    }
}

/// Issues the exact per-step commands a timetable implies: enter one step
/// before the planned entry, stop through planned waits, and charge the
/// counter so each move completes exactly at its planned time.
pub struct PlanFollower {
    pub paths: Vec<Option<Path>>,
}

impl Controller for PlanFollower {
    fn commands(
        &mut self,
        state: &SimState,
        _revealed: &[railplan_core::scenario::MalfunctionEvent],
    ) -> Result<Vec<Command>, ControllerError> {
        let mut out = vec![Command::Stop; self.paths.len()];
        for (i, path) in self.paths.iter().enumerate() {
            let Some(path) = path else { continue };
            let agent = state.agent(i);
            match agent.status {
                AgentStatus::Done => {}
                AgentStatus::OffMap => {
                    if state.t + 1 == path.entry_time {
                        out[i] = Command::MoveForward;
                    }
                }
                AgentStatus::OnMap => {
                    let k = path.record_index_at(state.t);
                    let spec = &state.instance.trains[i];
                    let Some(next) = path.occupancy.get(k + 1) else { continue };
                    if state.t + spec.cmax >= next.enter {
                        let o = agent.orientation;
                        out[i] = if next.orientation == o {
                            Command::MoveForward
                        } else if next.orientation == o.clockwise() {
                            Command::MoveRight
                        } else {
                            Command::MoveLeft
                        };
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Scans a trajectory for vertex or swap conflicts; the independent check
/// that an episode stayed physically sound.
pub fn trajectory_conflicts(rows: &[TrajectoryRow]) -> usize {
    let mut by_t: HashMap<Timestep, Vec<(AgentId, Cell)>> = HashMap::new();
    for r in rows {
        if let Some(cell) = r.cell {
            by_t.entry(r.t).or_default().push((r.agent, cell));
        }
    }
    let mut conflicts = 0;
    let mut ts: Vec<Timestep> = by_t.keys().copied().collect();
    ts.sort_unstable();
    for &t in &ts {
        let here = &by_t[&t];
        let mut cells: HashSet<Cell> = HashSet::new();
        for &(_, c) in here {
            if !cells.insert(c) {
                conflicts += 1;
            }
        }
        if let Some(next) = by_t.get(&(t + 1)) {
            let now: HashMap<AgentId, Cell> = here.iter().copied().collect();
            let then: HashMap<AgentId, Cell> = next.iter().copied().collect();
            for (&a, &ca) in &now {
                for (&b, &cb) in &now {
                    if a < b
                        && then.get(&a) == Some(&cb)
                        && then.get(&b) == Some(&ca)
                        && ca != cb
                    {
                        conflicts += 1;
                    }
                }
            }
        }
    }
    conflicts
}
