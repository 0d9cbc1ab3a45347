//! Anytime solution improvement by destroying and replanning small agent
//! neighborhoods, keeping strictly better totals.

use crate::planner::Solution;
use crate::railmap::{Cell, DistanceCache};
use crate::scenario::{rng_purpose, stream_rng, AgentId, Instance, Timestep};
use crate::sipp::{self, Path, ReservationTable};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborhoodStrategy {
    /// Most-delayed agent plus the agents whose reservations forced its
    /// waits.
    AgentBased,
    /// Agents sharing a switch cell visited by several paths.
    IntersectionBased,
    /// A random late agent plus the agents blocking its free-flow route.
    DelayBased,
}

pub const STRATEGIES: [NeighborhoodStrategy; 3] = [
    NeighborhoodStrategy::AgentBased,
    NeighborhoodStrategy::IntersectionBased,
    NeighborhoodStrategy::DelayBased,
];

impl fmt::Display for NeighborhoodStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NeighborhoodStrategy::AgentBased => "agent",
            NeighborhoodStrategy::IntersectionBased => "intersection",
            NeighborhoodStrategy::DelayBased => "delay",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LnsMode {
    /// Sample strategies in proportion to their smoothed improvement.
    #[serde(rename = "adaptive")]
    Adaptive,
    /// Delay-based neighborhoods only.
    #[serde(rename = "delay-only")]
    DelayOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnsConfig {
    pub iteration_limit: u32,
    pub mode: LnsMode,
    pub seed: u64,
    /// Neighborhood size cap, seed agent included.
    pub neighborhood_size: usize,
    /// Exponential smoothing factor for adaptive weights.
    pub decay: f64,
    /// Weight floor keeping every strategy selectable.
    pub min_weight: f64,
}

impl LnsConfig {
    pub fn new(iteration_limit: u32, mode: LnsMode, seed: u64) -> LnsConfig {
        LnsConfig {
            iteration_limit,
            mode,
            seed,
            neighborhood_size: 8,
            decay: 0.8,
            min_weight: 0.05,
        }
    }
}

/// Iteration limit schedule keyed on agent count: generous only for
/// middle-sized instances.
pub fn default_iteration_limit(agent_count: usize) -> u32 {
    if agent_count > 15 && agent_count <= 200 {
        500
    } else {
        50
    }
}

/// Per-strategy selection weights; probabilities are proportional to the
/// weights and the floor keeps them strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    weights: [f64; 3],
    decay: f64,
    min_weight: f64,
}

impl AdaptiveWeights {
    pub fn new(decay: f64, min_weight: f64) -> AdaptiveWeights {
        assert!(min_weight > 0.0 && (0.0..1.0).contains(&decay));
        AdaptiveWeights {
            weights: [1.0; 3],
            decay,
            min_weight,
        }
    }

    pub fn probabilities(&self) -> [f64; 3] {
        let total: f64 = self.weights.iter().sum();
        [
            self.weights[0] / total,
            self.weights[1] / total,
            self.weights[2] / total,
        ]
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> NeighborhoodStrategy {
        let total: f64 = self.weights.iter().sum();
        let mut x = rng.gen::<f64>() * total;
        for (i, w) in self.weights.iter().enumerate() {
            x -= w;
            if x < 0.0 {
                return STRATEGIES[i];
            }
        }
        STRATEGIES[2]
    }

    /// Smooths the normalized improvement of the chosen strategy into its
    /// weight.
    pub fn update(&mut self, strategy: NeighborhoodStrategy, normalized_improvement: f64) {
        let i = STRATEGIES.iter().position(|&s| s == strategy).unwrap();
        let w = self.decay * self.weights[i]
            + (1.0 - self.decay) * normalized_improvement.max(0.0);
        self.weights[i] = w.max(self.min_weight);
    }

    pub fn weights(&self) -> [f64; 3] {
        self.weights
    }
}

/// Lazily computed single-agent paths on an empty table, reused when tracing
/// which reservations block an agent's ideal route.
#[derive(Debug, Default)]
pub struct FreeFlowCache {
    paths: HashMap<AgentId, Option<Path>>,
}

impl FreeFlowCache {
    pub fn new() -> FreeFlowCache {
        FreeFlowCache::default()
    }

    fn get(
        &mut self,
        instance: &Instance,
        distances: &DistanceCache,
        agent: AgentId,
    ) -> Option<&Path> {
        self.paths
            .entry(agent)
            .or_insert_with(|| {
                let spec = &instance.trains[agent];
                let dist = distances.map_for(spec.goal)?;
                sipp::plan(
                    &instance.map,
                    dist,
                    spec,
                    &ReservationTable::new(),
                    None,
                    instance.tmax,
                )
                .ok()
            })
            .as_ref()
    }
}

/// Per-cell visit lists of a solution: (enter, block-end, agent), sorted.
fn cell_visits(
    instance: &Instance,
    solution: &Solution,
) -> HashMap<usize, Vec<(Timestep, Timestep, AgentId)>> {
    let mut visits: HashMap<usize, Vec<(Timestep, Timestep, AgentId)>> = HashMap::new();
    for path in solution.paths.iter().flatten() {
        for (cell, start, end) in path.blocking() {
            visits
                .entry(instance.map.cell_index(cell))
                .or_default()
                .push((start, end, path.agent));
        }
    }
    for v in visits.values_mut() {
        v.sort_unstable();
    }
    visits
}

fn delayed_agents(instance: &Instance, distances: &DistanceCache, solution: &Solution) -> Vec<AgentId> {
    (0..instance.agent_count())
        .filter(|&i| Solution::agent_delay(instance, distances, i, solution.paths[i].as_ref()) > 0)
        .collect()
}

/// Agents whose reservations intersect `cells` of interest inside the given
/// window, latest intersection first, excluding `exclude`.
fn blockers_on_route(
    instance: &Instance,
    visits: &HashMap<usize, Vec<(Timestep, Timestep, AgentId)>>,
    route: &[Cell],
    window: (Timestep, Timestep),
    exclude: AgentId,
) -> Vec<AgentId> {
    let (lo, hi) = window;
    let mut hits: Vec<(Timestep, AgentId)> = Vec::new();
    for &cell in route {
        if let Some(v) = visits.get(&instance.map.cell_index(cell)) {
            for &(start, end, agent) in v {
                if agent != exclude && start < hi && end > lo {
                    hits.push((start, agent));
                }
            }
        }
    }
    hits.sort_unstable_by(|a, b| b.cmp(a));
    let mut out = Vec::new();
    for (_, agent) in hits {
        if !out.contains(&agent) {
            out.push(agent);
        }
    }
    out
}

/// Picks the agents to destroy and replan. Returns at least the seed agent,
/// or nothing when the strategy finds no work.
pub fn select_neighborhood(
    instance: &Instance,
    distances: &DistanceCache,
    solution: &Solution,
    strategy: NeighborhoodStrategy,
    k: usize,
    rng: &mut ChaCha8Rng,
    freeflow: &mut FreeFlowCache,
) -> Vec<AgentId> {
    assert!(k >= 2);
    let visits = cell_visits(instance, solution);
    match strategy {
        NeighborhoodStrategy::DelayBased => {
            let delayed = delayed_agents(instance, distances, solution);
            if delayed.is_empty() {
                return Vec::new();
            }
            let seed = delayed[rng.gen_range(0..delayed.len())];
            let spec = &instance.trains[seed];
            let window_hi = solution.paths[seed]
                .as_ref()
                .map(|p| p.planned_arrival)
                .unwrap_or(instance.tmax);
            let route: Vec<Cell> = freeflow
                .get(instance, distances, seed)
                .map(|p| p.occupancy.iter().map(|r| r.cell).collect())
                .unwrap_or_default();
            let blockers = blockers_on_route(
                instance,
                &visits,
                &route,
                (spec.edt, window_hi.max(spec.edt + 1)),
                seed,
            );
            let mut out = vec![seed];
            out.extend(blockers.into_iter().take(k - 1));
            out
        }
        NeighborhoodStrategy::AgentBased => {
            let seed = (0..instance.agent_count()).max_by_key(|&i| {
                (
                    Solution::agent_delay(instance, distances, i, solution.paths[i].as_ref()),
                    std::cmp::Reverse(i),
                )
            });
            let Some(seed) = seed else { return Vec::new() };
            if Solution::agent_delay(instance, distances, seed, solution.paths[seed].as_ref()) == 0
            {
                return Vec::new();
            }
            let spec = &instance.trains[seed];
            // Reservations that forced each wait along the current path,
            // walked from the goal backwards.
            let mut blockers: Vec<AgentId> = Vec::new();
            if let Some(path) = &solution.paths[seed] {
                let mut waits: Vec<(Cell, Timestep, Timestep)> = Vec::new();
                for w in path.occupancy.windows(2) {
                    let earliest = w[0].enter + spec.cmax;
                    if w[1].enter > earliest {
                        waits.push((w[1].cell, earliest, w[1].enter));
                    }
                }
                if path.entry_time > spec.edt + 1 {
                    waits.push((path.occupancy[0].cell, spec.edt + 1, path.entry_time));
                }
                waits.sort_unstable_by(|a, b| b.1.cmp(&a.1));
                for (cell, lo, hi) in waits {
                    for a in blockers_on_route(instance, &visits, &[cell], (lo, hi), seed) {
                        if !blockers.contains(&a) {
                            blockers.push(a);
                        }
                    }
                }
            }
            if blockers.is_empty() {
                // No traced waits (e.g. the seed is unplanned): fall back to
                // whatever sits on its free-flow route.
                let route: Vec<Cell> = freeflow
                    .get(instance, distances, seed)
                    .map(|p| p.occupancy.iter().map(|r| r.cell).collect())
                    .unwrap_or_default();
                blockers = blockers_on_route(
                    instance,
                    &visits,
                    &route,
                    (spec.edt, instance.tmax),
                    seed,
                );
            }
            let mut out = vec![seed];
            out.extend(blockers.into_iter().take(k - 1));
            out
        }
        NeighborhoodStrategy::IntersectionBased => {
            let mut candidates: Vec<(usize, Vec<(Timestep, AgentId)>)> = Vec::new();
            for (&cell_idx, v) in &visits {
                let cell = Cell::new(
                    (cell_idx / instance.map.width() as usize) as u32,
                    (cell_idx % instance.map.width() as usize) as u32,
                );
                if instance.map.transitions(cell).branch_degree() < 3 {
                    continue;
                }
                let mut agents: Vec<(Timestep, AgentId)> =
                    v.iter().map(|&(s, _, a)| (s, a)).collect();
                agents.sort_unstable();
                agents.dedup_by_key(|x| x.1);
                if agents.len() >= 2 {
                    candidates.push((cell_idx, agents));
                }
            }
            if candidates.is_empty() {
                return Vec::new();
            }
            candidates.sort_unstable_by_key(|c| c.0);
            let (_, agents) = &candidates[rng.gen_range(0..candidates.len())];
            agents.iter().map(|&(_, a)| a).take(k).collect()
        }
    }
}

/// Removes the selected agents' paths and replans them in a uniformly random
/// order against the remainder. Failures become unplanned agents.
pub fn replan_neighborhood(
    instance: &Instance,
    distances: &DistanceCache,
    solution: &Solution,
    agents: &[AgentId],
    rng: &mut ChaCha8Rng,
) -> Solution {
    if agents.is_empty() {
        return solution.clone();
    }
    let mut paths = solution.paths.clone();
    for &a in agents {
        paths[a] = None;
    }
    let mut table = ReservationTable::build(&instance.map, paths.iter().flatten())
        .expect("incumbent solution is conflict-free");
    let mut order = agents.to_vec();
    order.shuffle(rng);
    for agent in order {
        let spec = &instance.trains[agent];
        let Some(dist) = distances.map_for(spec.goal) else { continue };
        if let Ok(path) = sipp::plan(&instance.map, dist, spec, &table, None, instance.tmax) {
            table
                .add_path(&instance.map, &path)
                .expect("replanned path conflicts with reservations");
            paths[agent] = Some(path);
        }
    }
    Solution::compute(instance, distances, paths)
}

/// One line of the iteration trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnsTrace {
    pub iteration: u32,
    pub strategy: String,
    pub neighborhood: usize,
    pub delay_before: u64,
    pub delay_after: u64,
    pub accepted: bool,
}

impl fmt::Display for LnsTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.iteration,
            self.strategy,
            self.neighborhood,
            self.delay_before,
            self.delay_after,
            if self.accepted { 1 } else { 0 }
        )
    }
}

/// Improves a solution for up to the configured number of iterations,
/// accepting a candidate only on strictly lower total arrival delay. The
/// incumbent's total delay never increases.
pub fn improve(
    instance: &Instance,
    distances: &DistanceCache,
    solution: Solution,
    config: &LnsConfig,
) -> (Solution, Vec<LnsTrace>) {
    let mut rng = stream_rng(config.seed, rng_purpose::LNS, 0);
    let mut weights = AdaptiveWeights::new(config.decay, config.min_weight);
    let mut freeflow = FreeFlowCache::new();
    let mut incumbent = solution;
    let mut trace = Vec::new();
    for iteration in 0..config.iteration_limit {
        let strategy = match config.mode {
            LnsMode::DelayOnly => NeighborhoodStrategy::DelayBased,
            LnsMode::Adaptive => weights.sample(&mut rng),
        };
        let agents = select_neighborhood(
            instance,
            distances,
            &incumbent,
            strategy,
            config.neighborhood_size,
            &mut rng,
            &mut freeflow,
        );
        let before = incumbent.total_delay;
        let (after, accepted, improvement) = if agents.is_empty() {
            (before, false, 0.0)
        } else {
            let candidate =
                replan_neighborhood(instance, distances, &incumbent, &agents, &mut rng);
            if candidate.total_delay < incumbent.total_delay {
                let gain = (before - candidate.total_delay) as f64 / before.max(1) as f64;
                debug_assert!(candidate.validate_conflict_free(instance).is_ok());
                incumbent = candidate;
                (incumbent.total_delay, true, gain)
            } else {
                (before, false, 0.0)
            }
        };
        if config.mode == LnsMode::Adaptive {
            weights.update(strategy, improvement);
        }
        trace.push(LnsTrace {
            iteration,
            strategy: strategy.to_string(),
            neighborhood: agents.len(),
            delay_before: before,
            delay_after: after,
            accepted,
        });
        if incumbent.total_delay == 0 {
            // Nothing left to improve; remaining iterations would no-op.
            break;
        }
    }
    (incumbent, trace)
}
