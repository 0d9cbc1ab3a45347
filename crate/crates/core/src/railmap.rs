//! Grid rail network: per-cell transition tables, map validation and
//! goal-directed distance queries.

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fmt;
use thiserror::Error;

/// Direction of travel on the grid. Row 0 is the northern edge, so moving
/// north decreases the row index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    #[serde(rename = "N")]
    North,
    #[serde(rename = "E")]
    East,
    #[serde(rename = "S")]
    South,
    #[serde(rename = "W")]
    West,
}

pub const ORIENTATIONS: [Orientation; 4] = [
    Orientation::North,
    Orientation::East,
    Orientation::South,
    Orientation::West,
];

impl Orientation {
    pub fn index(self) -> usize {
        match self {
            Orientation::North => 0,
            Orientation::East => 1,
            Orientation::South => 2,
            Orientation::West => 3,
        }
    }

    pub fn from_index(i: usize) -> Orientation {
        ORIENTATIONS[i % 4]
    }

    pub fn opposite(self) -> Orientation {
        Orientation::from_index(self.index() + 2)
    }

    /// 90 degrees clockwise (a right turn).
    pub fn clockwise(self) -> Orientation {
        Orientation::from_index(self.index() + 1)
    }

    /// 90 degrees counter-clockwise (a left turn).
    pub fn counter_clockwise(self) -> Orientation {
        Orientation::from_index(self.index() + 3)
    }

    /// (row, col) delta of one move in this direction.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Orientation::North => (-1, 0),
            Orientation::East => (0, 1),
            Orientation::South => (1, 0),
            Orientation::West => (0, -1),
        }
    }

    /// Mirror across the north-south axis (east and west swap).
    pub fn mirror_ew(self) -> Orientation {
        match self {
            Orientation::East => Orientation::West,
            Orientation::West => Orientation::East,
            o => o,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Orientation::North => 'N',
            Orientation::East => 'E',
            Orientation::South => 'S',
            Orientation::West => 'W',
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Grid coordinate, row-major with row 0 at the north edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
}

impl Cell {
    pub fn new(row: u32, col: u32) -> Cell {
        Cell { row, col }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// One train's search state: the cell it occupies and its direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RailState {
    pub cell: Cell,
    pub orientation: Orientation,
}

impl RailState {
    pub fn new(cell: Cell, orientation: Orientation) -> RailState {
        RailState { cell, orientation }
    }
}

/// 16-bit transition table of one cell: bit (incoming, outgoing) is set when a
/// train travelling in direction `incoming` may leave the cell travelling in
/// direction `outgoing`. Bit 15 is (North, North), bit 0 is (West, West).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CellTransitions(pub u16);

impl CellTransitions {
    pub const EMPTY: CellTransitions = CellTransitions(0);

    fn bit(incoming: Orientation, outgoing: Orientation) -> u16 {
        1 << (15 - (4 * incoming.index() + outgoing.index()))
    }

    pub fn allows(self, incoming: Orientation, outgoing: Orientation) -> bool {
        self.0 & Self::bit(incoming, outgoing) != 0
    }

    pub fn with(mut self, incoming: Orientation, outgoing: Orientation) -> CellTransitions {
        self.0 |= Self::bit(incoming, outgoing);
        self
    }

    /// Track piece connecting two cell edges. A train entering through edge
    /// `a` leaves through edge `b` and vice versa. `link(a, opposite(a))` is a
    /// straight, `link` of adjacent edges is a curve, `link(a, a)` a dead end.
    pub fn link(a: Orientation, b: Orientation) -> CellTransitions {
        CellTransitions(0)
            .with(a.opposite(), b)
            .with(b.opposite(), a)
    }

    pub fn union(self, other: CellTransitions) -> CellTransitions {
        CellTransitions(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Outgoing orientations for a given incoming direction.
    pub fn outgoing(self, incoming: Orientation) -> impl Iterator<Item = Orientation> {
        let row = (self.0 >> (12 - 4 * incoming.index())) & 0xF;
        ORIENTATIONS
            .into_iter()
            .filter(move |o| row & (1 << (3 - o.index())) != 0)
    }

    pub fn outgoing_count(self, incoming: Orientation) -> u32 {
        ((self.0 >> (12 - 4 * incoming.index())) & 0xF).count_ones()
    }

    pub fn rotate90(self) -> CellTransitions {
        let mut out = CellTransitions(0);
        for i in ORIENTATIONS {
            for o in ORIENTATIONS {
                if self.allows(i, o) {
                    out = out.with(i.clockwise(), o.clockwise());
                }
            }
        }
        out
    }

    pub fn mirror_ew(self) -> CellTransitions {
        let mut out = CellTransitions(0);
        for i in ORIENTATIONS {
            for o in ORIENTATIONS {
                if self.allows(i, o) {
                    out = out.with(i.mirror_ew(), o.mirror_ew());
                }
            }
        }
        out
    }

    /// Distinct travel directions leaving the cell, over all incoming rows.
    /// Cells with three or more count as intersections.
    pub fn branch_degree(self) -> u32 {
        let mut dirs = 0u8;
        for i in ORIENTATIONS {
            for o in self.outgoing(i) {
                dirs |= 1 << o.index();
            }
        }
        dirs.count_ones()
    }
}

/// The eight recognised rail pieces. Any traversable cell must match one of
/// these under rotation and east-west mirroring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RailType {
    Straight,
    Curve,
    SimpleSwitch,
    DiamondCrossing,
    SingleSlip,
    DoubleSlip,
    SymmetricalSwitch,
    DeadEnd,
}

impl RailType {
    /// Canonical transition table of the piece in its reference rotation.
    pub fn canonical(self) -> CellTransitions {
        use Orientation::*;
        match self {
            RailType::Straight => CellTransitions::link(North, South),
            RailType::Curve => CellTransitions::link(South, East),
            RailType::SimpleSwitch => {
                CellTransitions::link(North, South).union(CellTransitions::link(South, West))
            }
            RailType::DiamondCrossing => {
                CellTransitions::link(North, South).union(CellTransitions::link(East, West))
            }
            RailType::SingleSlip => RailType::DiamondCrossing
                .canonical()
                .union(CellTransitions::link(South, West)),
            RailType::DoubleSlip => RailType::DiamondCrossing
                .canonical()
                .union(CellTransitions::link(South, East))
                .union(CellTransitions::link(North, West)),
            RailType::SymmetricalSwitch => {
                CellTransitions::link(South, East).union(CellTransitions::link(South, West))
            }
            RailType::DeadEnd => CellTransitions::link(South, South),
        }
    }

    pub const ALL: [RailType; 8] = [
        RailType::Straight,
        RailType::Curve,
        RailType::SimpleSwitch,
        RailType::DiamondCrossing,
        RailType::SingleSlip,
        RailType::DoubleSlip,
        RailType::SymmetricalSwitch,
        RailType::DeadEnd,
    ];

    /// Identify a transition table, if it is a rotation or mirror of a
    /// canonical piece.
    pub fn classify(table: CellTransitions) -> Option<RailType> {
        if table.is_empty() {
            return None;
        }
        for ty in RailType::ALL {
            for base in [ty.canonical(), ty.canonical().mirror_ew()] {
                let mut t = base;
                for _ in 0..4 {
                    if t == table {
                        return Some(ty);
                    }
                    t = t.rotate90();
                }
            }
        }
        None
    }
}

/// A city's station pair. The arrival and departure stations sit on distinct
/// parallel rails of the city.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct City {
    pub arrival: Cell,
    pub departure: Cell,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MapError {
    #[error("state off rails at {0}")]
    OffRails(Cell),
}

/// Map invariant violations reported by [`RailMap::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Transition table matches no rail piece under rotation/mirror.
    UnknownRailType { cell: Cell },
    /// A transition exits the grid or enters a neighbor that cannot accept it.
    Reciprocity {
        cell: Cell,
        incoming: Orientation,
        outgoing: Orientation,
    },
    StationNotTraversable { city: usize, cell: Cell },
    NoCities,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownRailType { cell } => write!(f, "{cell}: unknown rail type"),
            Violation::Reciprocity {
                cell,
                incoming,
                outgoing,
            } => write!(f, "{cell}: reciprocity broken for {incoming}->{outgoing}"),
            Violation::StationNotTraversable { city, cell } => {
                write!(f, "{cell}: station of city {city} not traversable")
            }
            Violation::NoCities => write!(f, "map has no cities"),
        }
    }
}

/// The grid rail network. Immutable after construction; safe to share across
/// planner workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RailMap {
    width: u32,
    height: u32,
    grid: Vec<CellTransitions>,
    cities: Vec<City>,
}

impl RailMap {
    pub fn new(width: u32, height: u32, grid: Vec<CellTransitions>, cities: Vec<City>) -> RailMap {
        assert_eq!(grid.len(), (width as usize) * (height as usize));
        RailMap {
            width,
            height,
            grid,
            cities,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cities(&self) -> &[City] {
        &self.cities
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as u32) < self.height && (col as u32) < self.width
    }

    pub fn cell_index(&self, cell: Cell) -> usize {
        cell.row as usize * self.width as usize + cell.col as usize
    }

    pub fn cell_count(&self) -> usize {
        self.grid.len()
    }

    pub fn transitions(&self, cell: Cell) -> CellTransitions {
        self.grid[self.cell_index(cell)]
    }

    pub fn is_traversable(&self, cell: Cell) -> bool {
        !self.transitions(cell).is_empty()
    }

    /// Neighbor reached by one move in `dir`, if it stays on the grid.
    pub fn neighbor(&self, cell: Cell, dir: Orientation) -> Option<Cell> {
        let (dr, dc) = dir.delta();
        let (row, col) = (cell.row as i64 + dr, cell.col as i64 + dc);
        if self.in_bounds(row, col) {
            Some(Cell::new(row as u32, col as u32))
        } else {
            None
        }
    }

    /// States reachable in one cell traversal. The successor's orientation is
    /// the outgoing direction of travel. An incoming direction with no
    /// outgoing transitions yields an empty set.
    pub fn successors(&self, s: RailState) -> Result<Vec<RailState>, MapError> {
        if !self.in_bounds(s.cell.row as i64, s.cell.col as i64) || !self.is_traversable(s.cell) {
            return Err(MapError::OffRails(s.cell));
        }
        let mut out = Vec::with_capacity(2);
        for dir in self.transitions(s.cell).outgoing(s.orientation) {
            if let Some(next) = self.neighbor(s.cell, dir) {
                out.push(RailState::new(next, dir));
            }
        }
        Ok(out)
    }

    /// Checks every map invariant; an empty list means the map is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                let cell = Cell::new(row, col);
                let table = self.transitions(cell);
                if table.is_empty() {
                    continue;
                }
                if RailType::classify(table).is_none() {
                    violations.push(Violation::UnknownRailType { cell });
                }
                for incoming in ORIENTATIONS {
                    for outgoing in table.outgoing(incoming) {
                        let ok = match self.neighbor(cell, outgoing) {
                            Some(next) => self.transitions(next).outgoing_count(outgoing) > 0,
                            None => false,
                        };
                        if !ok {
                            violations.push(Violation::Reciprocity {
                                cell,
                                incoming,
                                outgoing,
                            });
                        }
                    }
                }
            }
        }
        if self.cities.is_empty() {
            violations.push(Violation::NoCities);
        }
        for (i, city) in self.cities.iter().enumerate() {
            for cell in [city.arrival, city.departure] {
                if !self.in_bounds(cell.row as i64, cell.col as i64) || !self.is_traversable(cell) {
                    violations.push(Violation::StationNotTraversable { city: i, cell });
                }
            }
        }
        violations
    }

    fn state_index(&self, s: RailState) -> usize {
        self.cell_index(s.cell) * 4 + s.orientation.index()
    }
}

/// Incremental map construction for the generator and hand-built fixtures.
/// Painted pieces are OR-ed together, so a straight plus a crossing curve
/// composes into a switch.
#[derive(Debug, Clone)]
pub struct RailMapBuilder {
    width: u32,
    height: u32,
    grid: Vec<CellTransitions>,
    cities: Vec<City>,
}

impl RailMapBuilder {
    pub fn new(width: u32, height: u32) -> RailMapBuilder {
        RailMapBuilder {
            width,
            height,
            grid: vec![CellTransitions::EMPTY; (width as usize) * (height as usize)],
            cities: Vec::new(),
        }
    }

    pub fn paint(&mut self, cell: Cell, piece: CellTransitions) -> &mut Self {
        let idx = cell.row as usize * self.width as usize + cell.col as usize;
        self.grid[idx] = self.grid[idx].union(piece);
        self
    }

    /// Two cells joined by edges `a` (on `cell`) and the matching edge of the
    /// neighbor: convenience for painting straight runs.
    pub fn paint_run(&mut self, from: Cell, dir: Orientation, len: u32) -> &mut Self {
        let (dr, dc) = dir.delta();
        let axis = CellTransitions::link(dir, dir.opposite());
        for i in 0..len as i64 {
            let cell = Cell::new(
                (from.row as i64 + dr * i) as u32,
                (from.col as i64 + dc * i) as u32,
            );
            self.paint(cell, axis);
        }
        self
    }

    pub fn add_city(&mut self, city: City) -> &mut Self {
        self.cities.push(city);
        self
    }

    pub fn build(self) -> RailMap {
        RailMap::new(self.width, self.height, self.grid, self.cities)
    }
}

/// Number of cell traversals between two rail states, or `None` when
/// unreachable.
pub type Distance = Option<u32>;

/// All-states distance field toward one goal cell, computed by a backward
/// breadth-first search over reversed (cell, orientation) edges. Distance is
/// zero exactly at the goal cell and ignores other trains and speed counters.
#[derive(Debug, Clone)]
pub struct DistanceMap {
    goal: Cell,
    dist: Vec<u32>,
}

const UNREACHED: u32 = u32::MAX;

impl DistanceMap {
    pub fn build(map: &RailMap, goal: Cell) -> DistanceMap {
        let mut dist = vec![UNREACHED; map.cell_count() * 4];
        let mut queue = VecDeque::new();
        for o in ORIENTATIONS {
            let s = RailState::new(goal, o);
            dist[map.state_index(s)] = 0;
            queue.push_back(s);
        }
        while let Some(s) = queue.pop_front() {
            let d = dist[map.state_index(s)];
            // Predecessors of s: cells one step against s.orientation whose
            // table allows some incoming direction to exit toward s.
            let (dr, dc) = s.orientation.opposite().delta();
            let (prow, pcol) = (s.cell.row as i64 + dr, s.cell.col as i64 + dc);
            if !map.in_bounds(prow, pcol) {
                continue;
            }
            let pred_cell = Cell::new(prow as u32, pcol as u32);
            let table = map.transitions(pred_cell);
            for incoming in ORIENTATIONS {
                if table.allows(incoming, s.orientation) {
                    let pred = RailState::new(pred_cell, incoming);
                    let idx = map.state_index(pred);
                    if dist[idx] == UNREACHED {
                        dist[idx] = d + 1;
                        queue.push_back(pred);
                    }
                }
            }
        }
        DistanceMap { goal, dist }
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn get(&self, map: &RailMap, s: RailState) -> Distance {
        match self.dist[map.state_index(s)] {
            UNREACHED => None,
            d => Some(d),
        }
    }
}

/// Per-goal distance maps shared by slack ordering, SIPP heuristics and
/// unfinished-agent scoring.
#[derive(Debug, Clone, Default)]
pub struct DistanceCache {
    maps: HashMap<Cell, DistanceMap>,
}

impl DistanceCache {
    pub fn new() -> DistanceCache {
        DistanceCache::default()
    }

    pub fn build(map: &RailMap, goals: impl IntoIterator<Item = Cell>) -> DistanceCache {
        let mut cache = DistanceCache::new();
        for goal in goals {
            cache
                .maps
                .entry(goal)
                .or_insert_with(|| DistanceMap::build(map, goal));
        }
        cache
    }

    pub fn map_for(&self, goal: Cell) -> Option<&DistanceMap> {
        self.maps.get(&goal)
    }

    pub fn distance(&self, map: &RailMap, from: RailState, goal: Cell) -> Distance {
        self.maps.get(&goal).and_then(|m| m.get(map, from))
    }
}

/// One-off distance query; prefer [`DistanceCache`] when several agents share
/// a goal.
pub fn distance(map: &RailMap, from: RailState, goal: Cell) -> Distance {
    DistanceMap::build(map, goal).get(map, from)
}
