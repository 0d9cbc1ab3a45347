//! Problem instances: train specs, the episode horizon, and malfunction
//! sampling.

use crate::railmap::{Cell, Orientation, RailMap, RailState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discrete simulation time. Episodes run from 0 to the instance horizon.
pub type Timestep = u32;

pub type AgentId = usize;

/// One train of an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub id: AgentId,
    /// Departure station the train enters the map on.
    pub start: Cell,
    pub initial_orientation: Orientation,
    /// Arrival station; the train leaves the map the moment it gets there.
    pub goal: Cell,
    /// Minimum timesteps per cell traversal, 1 (fastest) to 4 (slowest).
    pub cmax: u32,
    /// Earliest departure timestep.
    pub edt: Timestep,
    /// Expected arrival timestep (soft deadline).
    pub eat: Timestep,
}

impl TrainSpec {
    pub fn start_state(&self) -> RailState {
        RailState::new(self.start, self.initial_orientation)
    }
}

/// Per-agent Poisson breakdown model. Discretized as an independent
/// per-timestep Bernoulli trial with probability `1 - exp(-lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalfunctionParams {
    pub lambda: f64,
    pub min_duration: Timestep,
    pub max_duration: Timestep,
}

impl MalfunctionParams {
    pub fn none() -> MalfunctionParams {
        MalfunctionParams {
            lambda: 0.0,
            min_duration: 1,
            max_duration: 1,
        }
    }

    pub fn per_step_probability(&self) -> f64 {
        1.0 - (-self.lambda).exp()
    }
}

/// One breakdown: the agent is frozen for `duration` steps starting at
/// `start`. The duration is revealed to the controller at onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalfunctionEvent {
    pub agent: AgentId,
    pub start: Timestep,
    pub duration: Timestep,
}

/// A complete problem: map, trains, horizon and breakdown model.
#[derive(Debug, Clone)]
pub struct Instance {
    pub label: String,
    pub map: RailMap,
    pub trains: Vec<TrainSpec>,
    pub tmax: Timestep,
    pub malfunction: MalfunctionParams,
    pub seed: u64,
}

impl Instance {
    pub fn agent_count(&self) -> usize {
        self.trains.len()
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid train {agent}: {reason}")]
    InvalidTrain { agent: AgentId, reason: String },
    #[error("invalid malfunction parameters: {0}")]
    InvalidMalfunction(String),
    #[error("stored tmax {stored} does not match computed {computed}")]
    TmaxMismatch { stored: Timestep, computed: Timestep },
}

/// Episode horizon `floor(8(w + h + m/n))`, computed with exact integer
/// arithmetic: `8(w+h) + floor(8m/n)`.
pub fn compute_tmax(width: u32, height: u32, trains: u32, cities: u32) -> Timestep {
    assert!(width >= 1 && height >= 1 && trains >= 1 && cities >= 1);
    8 * (width + height) + (8 * trains) / cities
}

/// Validates train fields against the map and horizon.
pub fn validate_trains(instance: &Instance) -> Result<(), ScenarioError> {
    let stations: Vec<Cell> = instance
        .map
        .cities()
        .iter()
        .flat_map(|c| [c.arrival, c.departure])
        .collect();
    for (i, t) in instance.trains.iter().enumerate() {
        let fail = |reason: &str| {
            Err(ScenarioError::InvalidTrain {
                agent: i,
                reason: reason.to_string(),
            })
        };
        if t.id != i {
            return fail("id does not match position");
        }
        if !(1..=4).contains(&t.cmax) {
            return fail("cmax outside 1..=4");
        }
        if t.edt >= t.eat {
            return fail("edt must be strictly before eat");
        }
        if t.eat > instance.tmax {
            return fail("eat after tmax");
        }
        if t.start == t.goal {
            return fail("start equals goal");
        }
        if !stations.contains(&t.start) || !stations.contains(&t.goal) {
            return fail("start and goal must be station cells");
        }
        if !instance.map.is_traversable(t.start) || !instance.map.is_traversable(t.goal) {
            return fail("start or goal not traversable");
        }
        if instance
            .map
            .transitions(t.start)
            .outgoing_count(t.initial_orientation)
            == 0
        {
            return fail("initial orientation has no outgoing transition");
        }
    }
    if instance.malfunction.lambda < 0.0 {
        return Err(ScenarioError::InvalidMalfunction("lambda < 0".into()));
    }
    if instance.malfunction.min_duration == 0
        || instance.malfunction.min_duration > instance.malfunction.max_duration
    {
        return Err(ScenarioError::InvalidMalfunction(
            "need 0 < min_duration <= max_duration".into(),
        ));
    }
    Ok(())
}

/// Seeded, platform-stable RNG stream. Streams are keyed by (seed, purpose,
/// index) in the ChaCha8 key, so per-agent and per-subsystem draws never
/// interleave. The generator choice is part of the file format contract.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// RNG stream purposes; part of the reproducibility contract.
pub mod rng_purpose {
    pub const MAP_LAYOUT: u64 = 1;
    pub const TRAINS: u64 = 2;
    pub const MALFUNCTION: u64 = 3;
    pub const LNS: u64 = 4;
    pub const FUZZ: u64 = 5;
}

/// Samples each agent's breakdown schedule over `[0, horizon)`.
///
/// Per agent and step, a new event starts with probability `1 - exp(-lambda)`
/// unless an event is still running; durations are i.i.d. uniform in
/// `[min_duration, max_duration]`. Events never overlap. Deterministic per
/// (seed, agent).
pub fn sample_malfunctions(
    params: &MalfunctionParams,
    agents: usize,
    horizon: Timestep,
    seed: u64,
) -> Vec<Vec<MalfunctionEvent>> {
    let p = params.per_step_probability();
    (0..agents)
        .map(|agent| {
            let mut rng = stream_rng(seed, rng_purpose::MALFUNCTION, agent as u64);
            let mut events = Vec::new();
            if p <= 0.0 {
                return events;
            }
            let mut t = 0;
            while t < horizon {
                if rng.gen::<f64>() < p {
                    let duration = rng.gen_range(params.min_duration..=params.max_duration);
                    events.push(MalfunctionEvent {
                        agent,
                        start: t,
                        duration,
                    });
                    t += duration;
                } else {
                    t += 1;
                }
            }
            events
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tmax_examples() {
        assert_eq!(compute_tmax(30, 30, 7, 2), 508);
        assert_eq!(compute_tmax(158, 158, 425, 41), 2610);
        assert_eq!(compute_tmax(1, 1, 1, 1), 24);
    }

    proptest! {
        #[test]
        fn tmax_monotone(w in 1u32..200, h in 1u32..200, m in 1u32..500, n in 1u32..50) {
            let base = compute_tmax(w, h, m, n);
            prop_assert!(compute_tmax(w + 1, h, m, n) >= base);
            prop_assert!(compute_tmax(w, h + 1, m, n) >= base);
            prop_assert!(compute_tmax(w, h, m + 1, n) >= base);
            prop_assert!(compute_tmax(w, h, m, n + 1) <= base);
        }
    }

    #[test]
    fn zero_lambda_is_event_free() {
        let params = MalfunctionParams {
            lambda: 0.0,
            min_duration: 10,
            max_duration: 50,
        };
        let schedules = sample_malfunctions(&params, 5, 1000, 42);
        assert!(schedules.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn fixed_duration_events() {
        let params = MalfunctionParams {
            lambda: 0.5,
            min_duration: 3,
            max_duration: 3,
        };
        let schedules = sample_malfunctions(&params, 3, 500, 7);
        let mut seen = 0;
        for events in &schedules {
            for e in events {
                assert_eq!(e.duration, 3);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn events_never_overlap() {
        let params = MalfunctionParams {
            lambda: 0.3,
            min_duration: 2,
            max_duration: 9,
        };
        for (agent, events) in sample_malfunctions(&params, 8, 2000, 11).iter().enumerate() {
            let mut prev_end = 0;
            for e in events {
                assert_eq!(e.agent, agent);
                assert!(e.start >= prev_end, "event starts inside previous one");
                prev_end = e.start + e.duration;
            }
        }
    }

    #[test]
    fn empirical_rate_matches_bernoulli_probability() {
        // Duration 1 makes every step a fresh trial; check the hit rate
        // against p = 1 - exp(-lambda) within 3 sigma over 1e5 steps.
        let lambda = 10.0;
        let params = MalfunctionParams {
            lambda,
            min_duration: 1,
            max_duration: 1,
        };
        let steps: u32 = 100_000;
        let events = &sample_malfunctions(&params, 1, steps, 2024)[0];
        let p = params.per_step_probability();
        let hits = events.len() as f64;
        let expect = p * steps as f64;
        let sigma = (steps as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (hits - expect).abs() <= 3.0 * sigma,
            "hits {hits} expected {expect} sigma {sigma}"
        );
        // Nearly every step malfunctions at this rate.
        assert!(steps as f64 - hits < 20.0);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let params = MalfunctionParams {
            lambda: 0.05,
            min_duration: 10,
            max_duration: 50,
        };
        let a = sample_malfunctions(&params, 4, 3000, 99);
        let b = sample_malfunctions(&params, 4, 3000, 99);
        assert_eq!(a, b);
        let c = sample_malfunctions(&params, 4, 3000, 100);
        assert_ne!(a, c);
    }
}
