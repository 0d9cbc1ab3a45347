//! Prioritized planning over agent orderings and a best-of portfolio.

use crate::railmap::DistanceCache;
use crate::scenario::{AgentId, Instance, Timestep};
use crate::simengine::unfinished_arrival_estimate;
use crate::sipp::{self, Path, ReservationTable};
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

/// Agent orderings for prioritized planning. Every strategy is a total order
/// with deterministic ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorityStrategy {
    /// Identity order by train index.
    #[serde(rename = "index")]
    ByIndex,
    /// Ascending free-flow arrival time.
    #[serde(rename = "eat")]
    ByEarliestArrival,
    /// Ascending schedule slack, fast trains first on ties.
    #[serde(rename = "slack")]
    BySlack,
    /// Ascending slack with the opposite speed tie-break.
    #[serde(rename = "slack-rev")]
    BySlackReversedTies,
}

/// The four orders run by default, mirroring four parallel planner runs.
pub const DEFAULT_PORTFOLIO: [PriorityStrategy; 4] = [
    PriorityStrategy::ByIndex,
    PriorityStrategy::ByEarliestArrival,
    PriorityStrategy::BySlack,
    PriorityStrategy::BySlackReversedTies,
];

/// Schedule slack of one agent: expected arrival minus earliest departure
/// minus shortest-path traversal count. Unreachable goals sort last.
pub fn slack(instance: &Instance, distances: &DistanceCache, agent: AgentId) -> Option<i64> {
    let spec = &instance.trains[agent];
    distances
        .distance(&instance.map, spec.start_state(), spec.goal)
        .map(|d| spec.eat as i64 - spec.edt as i64 - d as i64)
}

/// Free-flow earliest arrival: departure command at `edt`, entry one step
/// later, then `distance` traversals of `cmax` steps each.
pub fn earliest_arrival(
    instance: &Instance,
    distances: &DistanceCache,
    agent: AgentId,
) -> Option<u64> {
    let spec = &instance.trains[agent];
    distances
        .distance(&instance.map, spec.start_state(), spec.goal)
        .map(|d| spec.edt as u64 + 1 + (spec.cmax as u64) * d as u64)
}

/// Agent permutation for one strategy.
pub fn order(
    instance: &Instance,
    distances: &DistanceCache,
    strategy: PriorityStrategy,
) -> Vec<AgentId> {
    let m = instance.agent_count();
    let mut ids: Vec<AgentId> = (0..m).collect();
    match strategy {
        PriorityStrategy::ByIndex => {}
        PriorityStrategy::ByEarliestArrival => {
            ids.sort_by_key(|&i| (earliest_arrival(instance, distances, i).unwrap_or(u64::MAX), i));
        }
        PriorityStrategy::BySlack => {
            ids.sort_by_key(|&i| {
                (
                    slack(instance, distances, i).unwrap_or(i64::MAX),
                    instance.trains[i].cmax,
                    i,
                )
            });
        }
        PriorityStrategy::BySlackReversedTies => {
            ids.sort_by_key(|&i| {
                (
                    slack(instance, distances, i).unwrap_or(i64::MAX),
                    std::cmp::Reverse(instance.trains[i].cmax),
                    i,
                )
            });
        }
    }
    ids
}

/// Conflict-free joint plan: one optional path per agent plus recomputed
/// metrics. Metrics always come from the paths, never from caches.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub paths: Vec<Option<Path>>,
    /// Sum of per-agent arrival delays under the no-malfunction assumption;
    /// unplanned or late agents use the unfinished estimate.
    pub total_delay: u64,
    pub reward_estimate: f64,
    /// Latest planned arrival, 0 when nothing is planned.
    pub makespan: Timestep,
}

impl Solution {
    /// Delay one agent's path contributes: paths arriving past the horizon
    /// and unplanned agents score as unfinished.
    pub fn agent_delay(
        instance: &Instance,
        distances: &DistanceCache,
        agent: AgentId,
        path: Option<&Path>,
    ) -> u64 {
        let spec = &instance.trains[agent];
        let act = match path {
            Some(p) if p.planned_arrival <= instance.tmax => p.planned_arrival as u64,
            Some(p) => {
                unfinished_arrival_estimate(instance, distances, agent, p.position_at(instance.tmax))
            }
            None => unfinished_arrival_estimate(instance, distances, agent, None),
        };
        act.saturating_sub(spec.eat as u64)
    }

    pub fn compute(
        instance: &Instance,
        distances: &DistanceCache,
        paths: Vec<Option<Path>>,
    ) -> Solution {
        assert_eq!(paths.len(), instance.agent_count());
        let total_delay = paths
            .iter()
            .enumerate()
            .map(|(i, p)| Self::agent_delay(instance, distances, i, p.as_ref()))
            .sum();
        let makespan = paths
            .iter()
            .flatten()
            .map(|p| p.planned_arrival)
            .max()
            .unwrap_or(0);
        let m = instance.agent_count() as f64;
        let reward_estimate =
            (1.0 - total_delay as f64 / (m * instance.tmax as f64)).clamp(0.0, 1.0);
        Solution {
            paths,
            total_delay,
            reward_estimate,
            makespan,
        }
    }

    pub fn empty(instance: &Instance, distances: &DistanceCache) -> Solution {
        Solution::compute(instance, distances, vec![None; instance.agent_count()])
    }

    pub fn planned_count(&self) -> usize {
        self.paths.iter().flatten().count()
    }

    /// Rebuilds a reservation table from scratch; `Ok` proves the paths are
    /// pairwise conflict-free.
    pub fn validate_conflict_free(&self, instance: &Instance) -> Result<(), sipp::TableError> {
        ReservationTable::build(&instance.map, self.paths.iter().flatten()).map(|_| ())
    }
}

/// Plans agents one by one in the given order, each against the reservations
/// of everyone planned before it. Failures become unplanned agents rather
/// than aborting.
pub fn prioritized_plan(
    instance: &Instance,
    distances: &DistanceCache,
    order: &[AgentId],
) -> Solution {
    prioritized_plan_until(instance, distances, order, None).expect("no deadline given")
}

/// Deadline-aware variant; returns `None` when the deadline passes before the
/// run finishes, so portfolio selection can discard it.
pub fn prioritized_plan_until(
    instance: &Instance,
    distances: &DistanceCache,
    order: &[AgentId],
    deadline: Option<Instant>,
) -> Option<Solution> {
    let mut table = ReservationTable::new();
    let mut paths: Vec<Option<Path>> = vec![None; instance.agent_count()];
    for &agent in order {
        if let Some(d) = deadline {
            if Instant::now() > d {
                return None;
            }
        }
        let spec = &instance.trains[agent];
        let dist = distances
            .map_for(spec.goal)
            .expect("distance cache covers every goal");
        match sipp::plan(&instance.map, dist, spec, &table, None, instance.tmax) {
            Ok(path) => {
                table
                    .add_path(&instance.map, &path)
                    .expect("planned path conflicts with reservations");
                paths[agent] = Some(path);
            }
            Err(_) => {}
        }
    }
    Some(Solution::compute(instance, distances, paths))
}

/// Runs one prioritized plan per strategy concurrently and keeps the best:
/// minimal total delay, then more agents planned, then strategy list order.
/// Runs that exceed the budget are discarded.
pub fn portfolio_plan(
    instance: &Instance,
    distances: &DistanceCache,
    strategies: &[PriorityStrategy],
    budget: Duration,
) -> Solution {
    assert!(!strategies.is_empty());
    let deadline = Instant::now() + budget;
    let mut results: Vec<Option<Solution>> = Vec::with_capacity(strategies.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = strategies
            .iter()
            .map(|&strategy| {
                scope.spawn(move || {
                    let ids = order(instance, distances, strategy);
                    prioritized_plan_until(instance, distances, &ids, Some(deadline))
                })
            })
            .collect();
        for h in handles {
            results.push(h.join().expect("planner worker panicked"));
        }
    });
    results
        .into_iter()
        .enumerate()
        .filter_map(|(pos, s)| s.map(|s| (pos, s)))
        .min_by_key(|(pos, s)| (s.total_delay, std::cmp::Reverse(s.planned_count()), *pos))
        .map(|(_, s)| s)
        .unwrap_or_else(|| Solution::empty(instance, distances))
}
