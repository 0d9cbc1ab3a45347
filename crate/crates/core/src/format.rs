//! Versioned file formats: instances, plan files, malfunction schedules,
//! trajectory logs and replay command files.
//!
//! All randomness behind these files comes from ChaCha8 streams keyed by
//! (seed, purpose, index); changing that generator is a format version bump.

use crate::railmap::{Cell, CellTransitions, City, Orientation, RailMap};
use crate::scenario::{
    compute_tmax, validate_trains, Instance, MalfunctionEvent, MalfunctionParams, Timestep,
    TrainSpec,
};
use crate::simengine::{AgentStatus, Command, TrajectoryRow};
use crate::sipp::{Path, PathRecord};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;
use thiserror::Error;

pub const INSTANCE_VERSION: u32 = 1;
pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid {file}: {reason}")]
    Invalid { file: String, reason: String },
    #[error("plan/instance mismatch: {0}")]
    PlanMismatch(String),
}

fn invalid(file: &str, reason: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        file: file.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CityDto {
    arrival: (u32, u32),
    departure: (u32, u32),
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainDto {
    id: usize,
    start: (u32, u32),
    orientation: Orientation,
    goal: (u32, u32),
    cmax: u32,
    edt: Timestep,
    eat: Timestep,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceDto {
    version: u32,
    label: String,
    seed: u64,
    width: u32,
    height: u32,
    /// One hex string per row, four digits per cell transition mask.
    grid: Vec<String>,
    cities: Vec<CityDto>,
    trains: Vec<TrainDto>,
    tmax: Timestep,
    malfunction: MalfunctionParams,
}

fn cell(c: (u32, u32)) -> Cell {
    Cell::new(c.0, c.1)
}

/// Canonical text serialization of an instance; identical inputs produce
/// identical bytes.
pub fn instance_to_string(instance: &Instance) -> String {
    let map = &instance.map;
    let grid = (0..map.height())
        .map(|row| {
            let mut s = String::with_capacity(map.width() as usize * 4);
            for col in 0..map.width() {
                write!(s, "{:04x}", map.transitions(Cell::new(row, col)).0).unwrap();
            }
            s
        })
        .collect();
    let dto = InstanceDto {
        version: INSTANCE_VERSION,
        label: instance.label.clone(),
        seed: instance.seed,
        width: map.width(),
        height: map.height(),
        grid,
        cities: map
            .cities()
            .iter()
            .map(|c| CityDto {
                arrival: (c.arrival.row, c.arrival.col),
                departure: (c.departure.row, c.departure.col),
            })
            .collect(),
        trains: instance
            .trains
            .iter()
            .map(|t| TrainDto {
                id: t.id,
                start: (t.start.row, t.start.col),
                orientation: t.initial_orientation,
                goal: (t.goal.row, t.goal.col),
                cmax: t.cmax,
                edt: t.edt,
                eat: t.eat,
            })
            .collect(),
        tmax: instance.tmax,
        malfunction: instance.malfunction.clone(),
    };
    let mut s = serde_json::to_string_pretty(&dto).expect("instance serializes");
    s.push('\n');
    s
}

pub fn save_instance(instance: &Instance, path: &FsPath) -> Result<(), FormatError> {
    fs::write(path, instance_to_string(instance))?;
    Ok(())
}

pub fn instance_from_str(text: &str) -> Result<Instance, FormatError> {
    let dto: InstanceDto = serde_json::from_str(text)?;
    let f = "instance";
    if dto.version != INSTANCE_VERSION {
        return Err(invalid(f, format!("unsupported version {}", dto.version)));
    }
    if dto.grid.len() != dto.height as usize {
        return Err(invalid(f, "grid row count does not match height"));
    }
    let mut grid = Vec::with_capacity((dto.width * dto.height) as usize);
    for (row, line) in dto.grid.iter().enumerate() {
        if line.len() != dto.width as usize * 4 {
            return Err(invalid(f, format!("grid row {row} has wrong length")));
        }
        for col in 0..dto.width as usize {
            let hex = &line[col * 4..col * 4 + 4];
            let mask = u16::from_str_radix(hex, 16)
                .map_err(|_| invalid(f, format!("bad hex at row {row} col {col}")))?;
            grid.push(CellTransitions(mask));
        }
    }
    let cities: Vec<City> = dto
        .cities
        .iter()
        .map(|c| City {
            arrival: cell(c.arrival),
            departure: cell(c.departure),
        })
        .collect();
    let map = RailMap::new(dto.width, dto.height, grid, cities);
    let violations = map.validate();
    if !violations.is_empty() {
        return Err(invalid(
            f,
            format!(
                "map violations: {}",
                violations
                    .iter()
                    .take(3)
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            ),
        ));
    }
    let trains: Vec<TrainSpec> = dto
        .trains
        .iter()
        .map(|t| TrainSpec {
            id: t.id,
            start: cell(t.start),
            initial_orientation: t.orientation,
            goal: cell(t.goal),
            cmax: t.cmax,
            edt: t.edt,
            eat: t.eat,
        })
        .collect();
    let computed = compute_tmax(
        dto.width,
        dto.height,
        trains.len().max(1) as u32,
        map.cities().len().max(1) as u32,
    );
    if computed != dto.tmax {
        return Err(invalid(
            f,
            format!("stored tmax {} but computed {computed}", dto.tmax),
        ));
    }
    let instance = Instance {
        label: dto.label,
        map,
        trains,
        tmax: dto.tmax,
        malfunction: dto.malfunction,
        seed: dto.seed,
    };
    validate_trains(&instance).map_err(|e| invalid(f, e.to_string()))?;
    Ok(instance)
}

pub fn load_instance(path: &FsPath) -> Result<Instance, FormatError> {
    instance_from_str(&fs::read_to_string(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordDto {
    cell: (u32, u32),
    o: Orientation,
    enter: Timestep,
    leave: Timestep,
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentPathDto {
    agent: usize,
    records: Vec<RecordDto>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanDto {
    version: u32,
    instance_label: String,
    instance_seed: u64,
    agents: usize,
    paths: Vec<Option<AgentPathDto>>,
}

pub fn plan_to_string(instance: &Instance, paths: &[Option<Path>]) -> String {
    let dto = PlanDto {
        version: PLAN_VERSION,
        instance_label: instance.label.clone(),
        instance_seed: instance.seed,
        agents: instance.agent_count(),
        paths: paths
            .iter()
            .map(|p| {
                p.as_ref().map(|p| AgentPathDto {
                    agent: p.agent,
                    records: p
                        .occupancy
                        .iter()
                        .map(|r| RecordDto {
                            cell: (r.cell.row, r.cell.col),
                            o: r.orientation,
                            enter: r.enter,
                            leave: r.leave,
                        })
                        .collect(),
                })
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&dto).expect("plan serializes");
    s.push('\n');
    s
}

pub fn save_plan(
    instance: &Instance,
    paths: &[Option<Path>],
    path: &FsPath,
) -> Result<(), FormatError> {
    fs::write(path, plan_to_string(instance, paths))?;
    Ok(())
}

/// Loads a plan and checks it against the instance: agent count, identity
/// fields and per-path structure must all line up.
pub fn load_plan(path: &FsPath, instance: &Instance) -> Result<Vec<Option<Path>>, FormatError> {
    let dto: PlanDto = serde_json::from_str(&fs::read_to_string(path)?)?;
    if dto.version != PLAN_VERSION {
        return Err(FormatError::PlanMismatch(format!(
            "unsupported version {}",
            dto.version
        )));
    }
    if dto.agents != instance.agent_count() || dto.paths.len() != instance.agent_count() {
        return Err(FormatError::PlanMismatch("agent count differs".into()));
    }
    if dto.instance_label != instance.label || dto.instance_seed != instance.seed {
        return Err(FormatError::PlanMismatch(
            "plan was written for a different instance".into(),
        ));
    }
    let mut out = Vec::with_capacity(dto.paths.len());
    for (i, p) in dto.paths.into_iter().enumerate() {
        match p {
            None => out.push(None),
            Some(p) => {
                if p.agent != i {
                    return Err(FormatError::PlanMismatch(format!(
                        "path {i} labelled agent {}",
                        p.agent
                    )));
                }
                let records: Vec<PathRecord> = p
                    .records
                    .iter()
                    .map(|r| PathRecord {
                        cell: cell(r.cell),
                        orientation: r.o,
                        enter: r.enter,
                        leave: r.leave,
                    })
                    .collect();
                let Some(first) = records.first() else {
                    return Err(FormatError::PlanMismatch(format!("agent {i} path empty")));
                };
                let Some(last) = records.last() else { unreachable!() };
                let path = Path {
                    agent: i,
                    entry_time: first.enter,
                    planned_arrival: last.enter,
                    occupancy: records,
                };
                path.validate(&instance.map, &instance.trains[i])
                    .map_err(|e| FormatError::PlanMismatch(format!("agent {i}: {e}")))?;
                out.push(Some(path));
            }
        }
    }
    Ok(out)
}

/// Malfunction schedule sidecar: `agent start duration` per line.
pub fn schedule_to_string(schedule: &[Vec<MalfunctionEvent>]) -> String {
    let mut s = String::from("# railplan-malfunctions v1\n");
    for events in schedule {
        for e in events {
            writeln!(s, "{} {} {}", e.agent, e.start, e.duration).unwrap();
        }
    }
    s
}

pub fn schedule_from_str(text: &str, agents: usize) -> Result<Vec<Vec<MalfunctionEvent>>, FormatError> {
    let f = "malfunction schedule";
    let mut lines = text.lines();
    if lines.next() != Some("# railplan-malfunctions v1") {
        return Err(invalid(f, "missing header"));
    }
    let mut schedule = vec![Vec::new(); agents];
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(invalid(f, format!("line {}: expected 3 fields", ln + 2)));
        }
        let parse =
            |s: &str| -> Result<u64, FormatError> { s.parse().map_err(|_| invalid(f, format!("line {}: bad number", ln + 2))) };
        let agent = parse(parts[0])? as usize;
        if agent >= agents {
            return Err(invalid(f, format!("line {}: agent out of range", ln + 2)));
        }
        schedule[agent].push(MalfunctionEvent {
            agent,
            start: parse(parts[1])? as Timestep,
            duration: parse(parts[2])? as Timestep,
        });
    }
    for events in &mut schedule {
        events.sort_by_key(|e| e.start);
    }
    Ok(schedule)
}

fn status_str(s: AgentStatus) -> &'static str {
    match s {
        AgentStatus::OffMap => "off",
        AgentStatus::OnMap => "on",
        AgentStatus::Done => "done",
    }
}

/// Line-oriented trajectory log: one row per (t, agent).
pub fn trajectory_to_string(rows: &[TrajectoryRow]) -> String {
    let mut s = String::from("# railplan-traj v1\n");
    s.push_str("# t agent status row col orient counter malfunction\n");
    for r in rows {
        let (row, col) = r
            .cell
            .map(|c| (c.row.to_string(), c.col.to_string()))
            .unwrap_or_else(|| ("-".into(), "-".into()));
        writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            r.t,
            r.agent,
            status_str(r.status),
            row,
            col,
            r.orientation.letter(),
            r.counter,
            r.malfunction_left
        )
        .unwrap();
    }
    s
}

fn command_letter(c: Command) -> char {
    match c {
        Command::MoveForward => 'F',
        Command::MoveLeft => 'L',
        Command::MoveRight => 'R',
        Command::Stop => 'S',
    }
}

/// Replay command file: `t agent command` per line.
pub fn commands_to_string(rows: &[(Timestep, usize, Command)]) -> String {
    let mut s = String::from("# railplan-cmds v1\n");
    for (t, agent, cmd) in rows {
        writeln!(s, "{} {} {}", t, agent, command_letter(*cmd)).unwrap();
    }
    s
}

pub fn commands_from_str(text: &str) -> Result<Vec<(Timestep, usize, Command)>, FormatError> {
    let f = "command file";
    let mut lines = text.lines();
    if lines.next() != Some("# railplan-cmds v1") {
        return Err(invalid(f, "missing header"));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(invalid(f, format!("line {}: expected 3 fields", ln + 2)));
        }
        let t: Timestep = parts[0]
            .parse()
            .map_err(|_| invalid(f, format!("line {}: bad timestep", ln + 2)))?;
        let agent: usize = parts[1]
            .parse()
            .map_err(|_| invalid(f, format!("line {}: bad agent", ln + 2)))?;
        let cmd = match parts[2] {
            "F" => Command::MoveForward,
            "L" => Command::MoveLeft,
            "R" => Command::MoveRight,
            "S" => Command::Stop,
            other => return Err(invalid(f, format!("line {}: bad command {other}", ln + 2))),
        };
        out.push((t, agent, cmd));
    }
    Ok(out)
}
