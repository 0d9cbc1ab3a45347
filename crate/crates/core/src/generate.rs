//! Seeded instance generation: cities on a jittered lattice joined into a
//! serpentine chain of double-track corridors, with crossovers inside each
//! city and U-turn loops at the chain ends.

use crate::railmap::{
    Cell, CellTransitions, City, DistanceCache, Orientation, RailMap, RailMapBuilder,
};
use crate::scenario::{
    compute_tmax, rng_purpose, stream_rng, validate_trains, Instance, MalfunctionParams,
    Timestep, TrainSpec,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use Orientation::{East, North, South, West};

pub const CITY_LENGTH: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub label: String,
    pub width: u32,
    pub height: u32,
    pub cities: u32,
    pub trains: u32,
    /// Share of trains per speed class cmax 1..=4; must sum to 1.
    pub speed_proportions: [f64; 4],
    /// Expected-arrival slack margin is uniform in
    /// `[0, ceil(frac * cmax * distance)]`.
    pub slack_margin_frac: f64,
    pub malfunction: MalfunctionParams,
}

impl GeneratorConfig {
    pub fn new(label: &str, width: u32, height: u32, cities: u32, trains: u32) -> GeneratorConfig {
        GeneratorConfig {
            label: label.to_string(),
            width,
            height,
            cities,
            trains,
            speed_proportions: [0.25, 0.25, 0.25, 0.25],
            slack_margin_frac: 0.5,
            malfunction: MalfunctionParams {
                lambda: 0.001,
                min_duration: 10,
                max_duration: 50,
            },
        }
    }
}

/// (width=height, trains, cities) per difficulty level, interpolating
/// geometrically between the published endpoints 1 and 15.
const LEVEL_TABLE: [(u32, u32, u32); 15] = [
    (30, 7, 2),
    (34, 9, 2),
    (38, 13, 3),
    (43, 17, 4),
    (48, 23, 5),
    (54, 30, 6),
    (61, 41, 7),
    (69, 55, 9),
    (78, 73, 11),
    (87, 98, 14),
    (98, 131, 17),
    (111, 176, 21),
    (125, 236, 27),
    (140, 317, 33),
    (158, 425, 41),
];

/// Difficulty preset `level` in 1..=15.
pub fn level_preset(level: u8) -> GeneratorConfig {
    assert!((1..=15).contains(&level), "level must be 1..=15");
    let (size, trains, cities) = LEVEL_TABLE[level as usize - 1];
    GeneratorConfig::new(&format!("level-{level:02}"), size, size, cities, trains)
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("cities don't fit: {0}")]
    CitiesDontFit(String),
    #[error("could not place train {agent} within the horizon")]
    Infeasible { agent: usize },
    #[error("generated map failed validation: {0}")]
    Layout(String),
}

struct CitySite {
    top_row: u32,
    col_start: u32,
}

impl CitySite {
    fn left_port(&self) -> u32 {
        self.col_start
    }
    fn right_port(&self) -> u32 {
        self.col_start + CITY_LENGTH - 1
    }
    fn arrival(&self) -> Cell {
        Cell::new(self.top_row, self.col_start + CITY_LENGTH / 2)
    }
    fn departure(&self) -> Cell {
        Cell::new(self.top_row + 1, self.col_start + CITY_LENGTH / 2)
    }
}

fn ew() -> CellTransitions {
    CellTransitions::link(East, West)
}

fn ns() -> CellTransitions {
    CellTransitions::link(North, South)
}

/// Paints one city's parallel tracks, crossovers and stations. Ports are
/// painted by the chain wiring.
fn paint_city(b: &mut RailMapBuilder, site: &CitySite) {
    let (r, c0) = (site.top_row, site.col_start);
    let c1 = site.right_port();
    for col in c0 + 1..c1 {
        b.paint(Cell::new(r, col), ew());
        b.paint(Cell::new(r + 1, col), ew());
    }
    // Left crossover: eastbound drops to the lower track, westbound rises.
    b.paint(Cell::new(r, c0 + 1), CellTransitions::link(South, West));
    b.paint(Cell::new(r + 1, c0 + 1), CellTransitions::link(North, East));
    // Right crossover: the mirrored pair.
    b.paint(Cell::new(r, c1 - 1), CellTransitions::link(South, East));
    b.paint(Cell::new(r + 1, c1 - 1), CellTransitions::link(North, West));
    b.add_city(City {
        arrival: site.arrival(),
        departure: site.departure(),
    });
}

fn paint_straight_ports(b: &mut RailMapBuilder, site: &CitySite, col: u32) {
    b.paint(Cell::new(site.top_row, col), ew());
    b.paint(Cell::new(site.top_row + 1, col), ew());
}

/// Dead-end-free chain terminal: the two tracks loop into each other.
fn paint_uturn(b: &mut RailMapBuilder, site: &CitySite, left_side: bool) {
    let r = site.top_row;
    if left_side {
        let c = site.left_port();
        b.paint(Cell::new(r, c), CellTransitions::link(South, East));
        b.paint(Cell::new(r + 1, c), CellTransitions::link(North, East));
    } else {
        let c = site.right_port();
        b.paint(Cell::new(r, c), CellTransitions::link(West, South));
        b.paint(Cell::new(r + 1, c), CellTransitions::link(North, West));
    }
}

/// Horizontal double-track run on the city rows between two columns
/// (exclusive bounds).
fn paint_gap(b: &mut RailMapBuilder, row: u32, from_exclusive: u32, to_exclusive: u32) {
    for col in from_exclusive + 1..to_exclusive {
        b.paint(Cell::new(row, col), ew());
        b.paint(Cell::new(row + 1, col), ew());
    }
}

/// L-shaped double-track連 between vertically separated cities along a side
/// channel. `upper` sits above `lower`; both connect through their ports on
/// the channel side.
fn paint_transition(
    b: &mut RailMapBuilder,
    upper: &CitySite,
    lower: &CitySite,
    right_side: bool,
    width: u32,
) {
    let (rx, ry) = (upper.top_row, lower.top_row);
    if right_side {
        let ka = width - 3; // outer track bend column
        let kb = ka + 1;
        let (px, py) = (upper.right_port(), lower.right_port());
        // Track A: east, down the channel, west into the lower city.
        for col in px + 1..ka {
            b.paint(Cell::new(rx, col), ew());
        }
        b.paint(Cell::new(rx, ka), CellTransitions::link(West, South));
        for row in rx + 1..ry {
            b.paint(Cell::new(row, ka), ns());
        }
        b.paint(Cell::new(ry, ka), CellTransitions::link(North, West));
        for col in py + 1..ka {
            b.paint(Cell::new(ry, col), ew());
        }
        // Track B mirrors one cell out; it crosses track A at a diamond.
        for col in px + 1..=ka {
            b.paint(Cell::new(rx + 1, col), ew());
        }
        b.paint(Cell::new(rx + 1, kb), CellTransitions::link(West, South));
        for row in rx + 2..=ry {
            b.paint(Cell::new(row, kb), ns());
        }
        b.paint(Cell::new(ry + 1, kb), CellTransitions::link(North, West));
        for col in py + 1..=ka {
            b.paint(Cell::new(ry + 1, col), ew());
        }
    } else {
        let ka = 2;
        let kb = ka - 1;
        let (px, py) = (upper.left_port(), lower.left_port());
        for col in ka + 1..px {
            b.paint(Cell::new(rx, col), ew());
        }
        b.paint(Cell::new(rx, ka), CellTransitions::link(East, South));
        for row in rx + 1..ry {
            b.paint(Cell::new(row, ka), ns());
        }
        b.paint(Cell::new(ry, ka), CellTransitions::link(North, East));
        for col in ka + 1..py {
            b.paint(Cell::new(ry, col), ew());
        }
        for col in ka..px {
            b.paint(Cell::new(rx + 1, col), ew());
        }
        b.paint(Cell::new(rx + 1, kb), CellTransitions::link(East, South));
        for row in rx + 2..=ry {
            b.paint(Cell::new(row, kb), ns());
        }
        b.paint(Cell::new(ry + 1, kb), CellTransitions::link(North, East));
        for col in ka..py {
            b.paint(Cell::new(ry + 1, col), ew());
        }
    }
}

fn layout_cities(
    config: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<CitySite>>, GenError> {
    let n = config.cities;
    let gx = (n as f64).sqrt().ceil() as u32;
    let gy = n.div_ceil(gx);
    // Side channels use columns 1..=2 and w-3..=w-2; one spare at each edge.
    let band_lo = 4u32;
    let band_hi = config.width.saturating_sub(5);
    if band_hi <= band_lo {
        return Err(GenError::CitiesDontFit("map too narrow".into()));
    }
    let band = band_hi - band_lo + 1;
    let slot_w = band / gx;
    if slot_w < CITY_LENGTH + 1 {
        return Err(GenError::CitiesDontFit(format!(
            "slot width {slot_w} cannot hold a city of length {CITY_LENGTH}"
        )));
    }
    let top_margin = 2u32;
    let bottom_limit = config.height.saturating_sub(4);
    let pitch = if gy > 1 {
        (bottom_limit - top_margin) / (gy - 1)
    } else {
        0
    };
    if gy > 1 && pitch < 4 {
        return Err(GenError::CitiesDontFit(format!(
            "row pitch {pitch} leaves no corridor space"
        )));
    }
    let mut rows: Vec<Vec<CitySite>> = Vec::new();
    let mut placed = 0u32;
    for gy_i in 0..gy {
        let mut row = Vec::new();
        let in_row = (n - placed).min(gx);
        for gx_i in 0..in_row {
            let slot_lo = band_lo + gx_i * slot_w;
            let jitter_max = slot_w - CITY_LENGTH - 1;
            let jitter = if jitter_max > 0 {
                rng.gen_range(0..=jitter_max)
            } else {
                0
            };
            row.push(CitySite {
                top_row: top_margin + gy_i * pitch,
                col_start: slot_lo + jitter,
            });
        }
        placed += in_row;
        rows.push(row);
    }
    Ok(rows)
}

fn build_map(config: &GeneratorConfig, seed: u64) -> Result<RailMap, GenError> {
    let mut rng = stream_rng(seed, rng_purpose::MAP_LAYOUT, 0);
    let rows = layout_cities(config, &mut rng)?;
    let mut b = RailMapBuilder::new(config.width, config.height);
    for row in &rows {
        for site in row {
            paint_city(&mut b, site);
        }
        // Straight connections between horizontally adjacent cities.
        for pair in row.windows(2) {
            paint_gap(
                &mut b,
                pair[0].top_row,
                pair[0].right_port(),
                pair[1].left_port(),
            );
            paint_straight_ports(&mut b, &pair[0], pair[0].right_port());
            paint_straight_ports(&mut b, &pair[1], pair[1].left_port());
        }
    }
    // Serpentine transitions: even rows run west-to-east, odd rows back.
    for i in 0..rows.len().saturating_sub(1) {
        let right_side = i % 2 == 0;
        let upper = if right_side {
            rows[i].last().unwrap()
        } else {
            rows[i].first().unwrap()
        };
        let lower = if right_side {
            rows[i + 1].last().unwrap()
        } else {
            rows[i + 1].first().unwrap()
        };
        paint_straight_ports(
            &mut b,
            upper,
            if right_side { upper.right_port() } else { upper.left_port() },
        );
        paint_straight_ports(
            &mut b,
            lower,
            if right_side { lower.right_port() } else { lower.left_port() },
        );
        paint_transition(&mut b, upper, lower, right_side, config.width);
    }
    // Chain terminals: the first city's west end, and the last row's outer
    // end, loop back on themselves.
    paint_uturn(&mut b, &rows[0][0], true);
    let last_row = rows.len() - 1;
    let chain_ends_left = last_row % 2 == 1;
    let end_site = if chain_ends_left {
        rows[last_row].first().unwrap()
    } else {
        rows[last_row].last().unwrap()
    };
    paint_uturn(&mut b, end_site, chain_ends_left);
    // Untouched ports of single-row maps: a one-row chain starts at city 0
    // and ends at the last city, all interior ports already wired above.
    let map = b.build();
    let violations = map.validate();
    if !violations.is_empty() {
        let mut msg: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
        if violations.len() > 5 {
            msg.push(format!("... {} total", violations.len()));
        }
        return Err(GenError::Layout(msg.join("; ")));
    }
    Ok(map)
}

fn sample_speed(proportions: &[f64; 4], rng: &mut impl Rng) -> u32 {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in proportions.iter().enumerate() {
        acc += p;
        if x < acc {
            return i as u32 + 1;
        }
    }
    4
}

/// Deterministically generates an instance for a config and seed. Cities are
/// mutually reachable; every train's expected arrival is achievable inside
/// the horizon.
pub fn generate_instance(config: &GeneratorConfig, seed: u64) -> Result<Instance, GenError> {
    if config.cities < 2 {
        return Err(GenError::BadConfig("need at least 2 cities".into()));
    }
    if config.trains < 1 {
        return Err(GenError::BadConfig("need at least 1 train".into()));
    }
    if config.width < 20 || config.height < 20 {
        return Err(GenError::BadConfig("map must be at least 20x20".into()));
    }
    let psum: f64 = config.speed_proportions.iter().sum();
    if (psum - 1.0).abs() > 1e-9 || config.speed_proportions.iter().any(|&p| p < 0.0) {
        return Err(GenError::BadConfig(
            "speed proportions must be nonnegative and sum to 1".into(),
        ));
    }
    let map = build_map(config, seed)?;
    let tmax = compute_tmax(config.width, config.height, config.trains, config.cities);
    let distances = DistanceCache::build(&map, map.cities().iter().map(|c| c.arrival));

    let mut rng = stream_rng(seed, rng_purpose::TRAINS, 0);
    let n_cities = map.cities().len();
    let mut trains = Vec::with_capacity(config.trains as usize);
    for id in 0..config.trains as usize {
        let cmax = sample_speed(&config.speed_proportions, &mut rng);
        let mut placed = false;
        for _attempt in 0..200 {
            let start_city = rng.gen_range(0..n_cities);
            let goal_city = rng.gen_range(0..n_cities);
            if start_city == goal_city {
                continue;
            }
            let start = map.cities()[start_city].departure;
            let goal = map.cities()[goal_city].arrival;
            let candidates = [East, West].map(|o| {
                distances
                    .distance(&map, crate::railmap::RailState::new(start, o), goal)
                    .map(|d| (d, o))
            });
            let Some((d, orientation)) = candidates.into_iter().flatten().min() else {
                continue;
            };
            let margin_max = (config.slack_margin_frac * (cmax * d) as f64).ceil() as Timestep;
            let margin = rng.gen_range(0..=margin_max);
            let travel = 1 + cmax * d + margin;
            if travel >= tmax {
                continue;
            }
            let edt = rng.gen_range(0..=(tmax - travel - 1).min(tmax / 2));
            trains.push(TrainSpec {
                id,
                start,
                initial_orientation: orientation,
                goal,
                cmax,
                edt,
                eat: edt + travel,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(GenError::Infeasible { agent: id });
        }
    }

    let instance = Instance {
        label: config.label.clone(),
        map,
        trains,
        tmax,
        malfunction: config.malfunction.clone(),
        seed,
    };
    validate_trains(&instance).map_err(|e| GenError::Layout(e.to_string()))?;
    Ok(instance)
}
