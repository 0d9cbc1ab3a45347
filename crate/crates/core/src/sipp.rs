//! Safe-interval path planning over reserved paths, extended with per-train
//! traversal times and earliest-departure constraints.

use crate::railmap::{Cell, DistanceMap, Orientation, RailMap, RailState};
use crate::scenario::{AgentId, Timestep, TrainSpec};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use thiserror::Error;

/// Right-open end of an unbounded free interval.
pub const UNBOUNDED: Timestep = Timestep::MAX;

/// One visited cell of a timed path: the agent occupies `cell` during
/// `[enter, leave)`. The final record is the goal with `leave == enter`
/// (the agent leaves the map the moment it arrives).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathRecord {
    pub cell: Cell,
    pub orientation: Orientation,
    pub enter: Timestep,
    pub leave: Timestep,
}

/// Timed cell-occupancy sequence of one train, off map before `entry_time`
/// and after `planned_arrival`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub agent: AgentId,
    pub entry_time: Timestep,
    pub occupancy: Vec<PathRecord>,
    pub planned_arrival: Timestep,
}

impl Path {
    /// Cell-time blocks this path reserves. The goal record has no dwell, but
    /// the arrival instant itself stays claimed so no other train can be in
    /// the cell on the step the arrival resolves.
    pub fn blocking(&self) -> impl Iterator<Item = (Cell, Timestep, Timestep)> + '_ {
        let last = self.occupancy.len().saturating_sub(1);
        self.occupancy.iter().enumerate().map(move |(i, r)| {
            if i == last {
                (r.cell, r.enter, r.enter + 1)
            } else {
                (r.cell, r.enter, r.leave)
            }
        })
    }

    /// Traversal events (from, to, arrival time) for swap checking.
    pub fn edges(&self) -> impl Iterator<Item = (Cell, Cell, Timestep)> + '_ {
        self.occupancy
            .windows(2)
            .map(|w| (w[0].cell, w[1].cell, w[1].enter))
    }

    /// The cell-orientation the agent holds at time `t`, or `None` while off
    /// map. Arrived agents report the goal state.
    pub fn position_at(&self, t: Timestep) -> Option<RailState> {
        if t < self.entry_time {
            return None;
        }
        for r in &self.occupancy {
            if t < r.leave {
                return Some(RailState::new(r.cell, r.orientation));
            }
        }
        self.occupancy
            .last()
            .map(|r| RailState::new(r.cell, r.orientation))
    }

    /// Index of the record that covers time `t`, clamped to the last record.
    pub fn record_index_at(&self, t: Timestep) -> usize {
        for (i, r) in self.occupancy.iter().enumerate() {
            if t < r.leave {
                return i;
            }
        }
        self.occupancy.len() - 1
    }

    /// Structural invariants against the map and train spec.
    pub fn validate(&self, map: &RailMap, spec: &TrainSpec) -> Result<(), String> {
        if self.occupancy.is_empty() {
            return Err("empty path".into());
        }
        let first = &self.occupancy[0];
        let last = self.occupancy.last().unwrap();
        if first.enter != self.entry_time {
            return Err("entry_time mismatch".into());
        }
        if first.enter <= spec.edt {
            return Err("enters before earliest departure".into());
        }
        if last.cell != spec.goal || last.leave != last.enter {
            return Err("path does not end at the goal".into());
        }
        if last.enter != self.planned_arrival {
            return Err("planned_arrival mismatch".into());
        }
        for w in self.occupancy.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if a.leave != b.enter {
                return Err(format!("gap between {} and {}", a.cell, b.cell));
            }
            if b.enter - a.enter < spec.cmax {
                return Err(format!("dwell shorter than cmax at {}", a.cell));
            }
            if !map.transitions(a.cell).allows(a.orientation, b.orientation)
                || map.neighbor(a.cell, b.orientation) != Some(b.cell)
            {
                return Err(format!("records {} -> {} not rail-adjacent", a.cell, b.cell));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("input paths conflict: agents {a} and {b} overlap in {cell}")]
    VertexOverlap { cell: Cell, a: AgentId, b: AgentId },
    #[error("input paths conflict: agents {a} and {b} swap across {from}->{to} at t={t}")]
    SwapOverlap {
        from: Cell,
        to: Cell,
        t: Timestep,
        a: AgentId,
        b: AgentId,
    },
}

/// Reservations of a set of conflict-free paths: per-cell occupied intervals
/// (whose complement are the safe intervals) plus traversal events for swap
/// checks.
#[derive(Debug, Clone, Default)]
pub struct ReservationTable {
    occupied: HashMap<usize, Vec<(Timestep, Timestep, AgentId)>>,
    edge_events: HashMap<(usize, usize), Vec<(Timestep, AgentId)>>,
}

impl ReservationTable {
    pub fn new() -> ReservationTable {
        ReservationTable::default()
    }

    /// Builds the table, rejecting inputs that overlap or swap.
    pub fn build<'p>(
        map: &RailMap,
        paths: impl IntoIterator<Item = &'p Path>,
    ) -> Result<ReservationTable, TableError> {
        let mut table = ReservationTable::new();
        for path in paths {
            table.add_path(map, path)?;
        }
        Ok(table)
    }

    pub fn add_path(&mut self, map: &RailMap, path: &Path) -> Result<(), TableError> {
        // Validate first so a failed insert leaves the table unchanged.
        for (cell, start, end) in path.blocking() {
            let idx = map.cell_index(cell);
            if let Some(v) = self.occupied.get(&idx) {
                let pos = v.partition_point(|&(s, _, _)| s < end);
                if pos > 0 && v[pos - 1].1 > start {
                    return Err(TableError::VertexOverlap {
                        cell,
                        a: v[pos - 1].2,
                        b: path.agent,
                    });
                }
            }
        }
        for (from, to, t) in path.edges() {
            let key = (map.cell_index(to), map.cell_index(from));
            if let Some(v) = self.edge_events.get(&key) {
                if let Ok(i) = v.binary_search_by_key(&t, |&(time, _)| time) {
                    return Err(TableError::SwapOverlap {
                        from,
                        to,
                        t,
                        a: v[i].1,
                        b: path.agent,
                    });
                }
            }
        }
        for (cell, start, end) in path.blocking() {
            let idx = map.cell_index(cell);
            let v = self.occupied.entry(idx).or_default();
            let pos = v.partition_point(|&(s, _, _)| s < start);
            v.insert(pos, (start, end, path.agent));
        }
        for (from, to, t) in path.edges() {
            let key = (map.cell_index(from), map.cell_index(to));
            let v = self.edge_events.entry(key).or_default();
            let pos = v.partition_point(|&(time, _)| time < t);
            v.insert(pos, (t, path.agent));
        }
        Ok(())
    }

    pub fn remove_path(&mut self, map: &RailMap, path: &Path) {
        for (cell, start, end) in path.blocking() {
            let idx = map.cell_index(cell);
            if let Some(v) = self.occupied.get_mut(&idx) {
                v.retain(|&(s, e, a)| !(s == start && e == end && a == path.agent));
            }
        }
        for (from, to, t) in path.edges() {
            let key = (map.cell_index(from), map.cell_index(to));
            if let Some(v) = self.edge_events.get_mut(&key) {
                v.retain(|&(time, a)| !(time == t && a == path.agent));
            }
        }
    }

    /// Maximal free intervals of a cell, in order. The last one is unbounded.
    pub fn free_intervals(&self, map: &RailMap, cell: Cell) -> Vec<(Timestep, Timestep)> {
        let idx = map.cell_index(cell);
        let mut out = Vec::new();
        let mut cursor = 0;
        if let Some(v) = self.occupied.get(&idx) {
            for &(s, e, _) in v {
                if s > cursor {
                    out.push((cursor, s));
                }
                cursor = cursor.max(e);
            }
        }
        out.push((cursor, UNBOUNDED));
        out
    }

    /// True when a reserved agent traverses `from -> to` arriving at `t`.
    pub fn has_edge_event(&self, map: &RailMap, from: Cell, to: Cell, t: Timestep) -> bool {
        self.edge_events
            .get(&(map.cell_index(from), map.cell_index(to)))
            .map(|v| v.binary_search_by_key(&t, |&(time, _)| time).is_ok())
            .unwrap_or(false)
    }

    /// (gap index, l, u) free intervals via the occupied list; gap index `i`
    /// sits before occupied entry `i`.
    fn gaps<'t>(
        &'t self,
        cell_idx: usize,
    ) -> impl Iterator<Item = (usize, Timestep, Timestep)> + 't {
        let occ = self.occupied.get(&cell_idx).map(|v| v.as_slice()).unwrap_or(&[]);
        let n = occ.len();
        (0..=n).filter_map(move |i| {
            let l = if i == 0 { 0 } else { occ[i - 1].1 };
            let u = if i == n { UNBOUNDED } else { occ[i].0 };
            (l < u).then_some((i, l, u))
        })
    }

    /// Gap index containing time `t`, if `t` is free.
    fn gap_at(&self, cell_idx: usize, t: Timestep) -> Option<(usize, Timestep, Timestep)> {
        self.gaps(cell_idx).find(|&(_, l, u)| l <= t && t < u)
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PlanFailure {
    /// No rail route to the goal exists at all.
    #[error("goal unreachable over rails")]
    Unreachable,
    /// A route exists but reservations or the horizon block every timing.
    #[error("no conflict-free path within the horizon")]
    Blocked,
}

/// Mid-episode planning start: the agent is at `state` at time `time` with
/// the given speed counter, frozen for `malfunction_left` more steps.
#[derive(Debug, Clone, Copy)]
pub struct StartOverride {
    pub state: RailState,
    pub time: Timestep,
    pub counter: u32,
    pub malfunction_left: Timestep,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    state: RailState,
    gap: usize,
    t: Timestep,
    /// Earliest arrival time at any successor cell.
    min_next: Timestep,
    parent: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeapEntry {
    f: Timestep,
    t: Timestep,
    seq: u32,
    node: u32,
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Pop order: smallest f, then largest t (deeper first), then FIFO.
        other
            .f
            .cmp(&self.f)
            .then(self.t.cmp(&other.t))
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-arrival-time path for one train against the reserved paths in
/// `table`.
///
/// Without an override the train waits off map (free, occupying nothing) and
/// may appear on its start cell at any free time after its earliest
/// departure. Successors follow the interval rule: a traversal taking
/// `cmax` steps may target a free interval `[l', u')` only when
/// `u' > t + cmax`, arrives at `t' = max(t + cmax, l')`, must fit the wait in
/// the current interval (`t' <= u`), and is rejected when a reserved agent
/// traverses the opposite edge arriving at the same instant.
///
/// Arrivals after `latest_arrival` are pruned; exhausting the search yields
/// `Blocked` rather than a uselessly late path.
pub fn plan(
    map: &RailMap,
    dist: &DistanceMap,
    spec: &TrainSpec,
    table: &ReservationTable,
    start_override: Option<StartOverride>,
    latest_arrival: Timestep,
) -> Result<Path, PlanFailure> {
    let cmax = spec.cmax;
    let h_of = |s: RailState| dist.get(map, s).map(|d| d.saturating_mul(cmax));

    let mut arena: Vec<Node> = Vec::new();
    let mut open: BinaryHeap<HeapEntry> = BinaryHeap::new();
    let mut best: HashMap<(usize, u8, usize), Timestep> = HashMap::new();
    let mut seq = 0u32;

    let push = |arena: &mut Vec<Node>,
                    open: &mut BinaryHeap<HeapEntry>,
                    best: &mut HashMap<(usize, u8, usize), Timestep>,
                    seq: &mut u32,
                    node: Node,
                    h: Timestep| {
        let key = (
            map.cell_index(node.state.cell),
            node.state.orientation.index() as u8,
            node.gap,
        );
        match best.get(&key) {
            Some(&t) if t <= node.t => return,
            _ => {
                best.insert(key, node.t);
            }
        }
        let idx = arena.len() as u32;
        arena.push(node);
        open.push(HeapEntry {
            f: node.t.saturating_add(h),
            t: node.t,
            seq: *seq,
            node: idx,
        });
        *seq += 1;
    };

    match start_override {
        None => {
            let start_state = spec.start_state();
            let h = h_of(start_state).ok_or(PlanFailure::Unreachable)?;
            let start_idx = map.cell_index(spec.start);
            // One entry node per free interval of the start cell; waiting off
            // map costs nothing.
            for (gap, l, u) in table.gaps(start_idx) {
                let entry = l.max(spec.edt + 1);
                if entry >= u || entry > latest_arrival {
                    continue;
                }
                let node = Node {
                    state: start_state,
                    gap,
                    t: entry,
                    min_next: entry.saturating_add(cmax),
                    parent: None,
                };
                push(&mut arena, &mut open, &mut best, &mut seq, node, h);
            }
        }
        Some(o) => {
            let h = h_of(o.state).ok_or(PlanFailure::Unreachable)?;
            if o.state.cell == spec.goal {
                // Degenerate: already arriving.
                return Ok(Path {
                    agent: spec.id,
                    entry_time: o.time,
                    occupancy: vec![PathRecord {
                        cell: o.state.cell,
                        orientation: o.state.orientation,
                        enter: o.time,
                        leave: o.time,
                    }],
                    planned_arrival: o.time,
                });
            }
            let cell_idx = map.cell_index(o.state.cell);
            let (gap, _, _) = table
                .gap_at(cell_idx, o.time)
                .ok_or(PlanFailure::Blocked)?;
            let ready = o.malfunction_left + if o.counter >= cmax { 1 } else { cmax - o.counter };
            let node = Node {
                state: o.state,
                gap,
                t: o.time,
                min_next: o.time.saturating_add(ready),
                parent: None,
            };
            push(&mut arena, &mut open, &mut best, &mut seq, node, h);
        }
    }

    while let Some(entry) = open.pop() {
        let node = arena[entry.node as usize];
        let key = (
            map.cell_index(node.state.cell),
            node.state.orientation.index() as u8,
            node.gap,
        );
        if best.get(&key) != Some(&node.t) {
            continue; // stale heap entry
        }
        if node.state.cell == spec.goal {
            return Ok(reconstruct(spec, &arena, entry.node));
        }
        let (_, _, u) = table
            .gaps(map.cell_index(node.state.cell))
            .find(|&(g, _, _)| g == node.gap)
            .expect("node gap exists");
        let base = node.min_next;
        if base > u {
            continue; // cannot remain in place long enough to depart
        }
        let succs = map
            .successors(node.state)
            .expect("search states stay on rails");
        for next in succs {
            let Some(h) = h_of(next) else { continue };
            let next_idx = map.cell_index(next.cell);
            for (gap, l, upper) in table.gaps(next_idx) {
                if l > u {
                    break; // departure would outstay the current interval
                }
                if upper <= base {
                    continue;
                }
                let t_arr = base.max(l);
                if t_arr > latest_arrival || t_arr > u {
                    continue;
                }
                if table.has_edge_event(map, next.cell, node.state.cell, t_arr) {
                    continue;
                }
                let succ = Node {
                    state: next,
                    gap,
                    t: t_arr,
                    min_next: t_arr.saturating_add(cmax),
                    parent: Some(entry.node),
                };
                push(&mut arena, &mut open, &mut best, &mut seq, succ, h);
            }
        }
    }
    Err(PlanFailure::Blocked)
}

fn reconstruct(spec: &TrainSpec, arena: &[Node], goal: u32) -> Path {
    let mut chain = Vec::new();
    let mut cursor = Some(goal);
    while let Some(i) = cursor {
        chain.push(arena[i as usize]);
        cursor = arena[i as usize].parent;
    }
    chain.reverse();
    let mut occupancy = Vec::with_capacity(chain.len());
    for (i, node) in chain.iter().enumerate() {
        let leave = chain.get(i + 1).map(|n| n.t).unwrap_or(node.t);
        occupancy.push(PathRecord {
            cell: node.state.cell,
            orientation: node.state.orientation,
            enter: node.t,
            leave,
        });
    }
    Path {
        agent: spec.id,
        entry_time: chain[0].t,
        occupancy,
        planned_arrival: chain.last().unwrap().t,
    }
}
