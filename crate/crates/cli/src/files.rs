//! CLI-facing file schemas: generation configs, benchmark suites and episode
//! reports.

use railplan_core::executor::ReplanMode;
use railplan_core::generate::GeneratorConfig;
use railplan_core::lns::LnsMode;
use railplan_core::planner::PriorityStrategy;
use railplan_core::scenario::{MalfunctionParams, Timestep};
use railplan_core::simengine::EpisodeResult;
use serde::{Deserialize, Serialize};

/// One generation job: either a difficulty level preset or explicit
/// parameters, producing `count` instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenJob {
    #[serde(default)]
    pub level: Option<u8>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default)]
    pub cities: Option<u32>,
    #[serde(default)]
    pub trains: Option<u32>,
    #[serde(default)]
    pub speed_proportions: Option<[f64; 4]>,
    #[serde(default)]
    pub slack_margin_frac: Option<f64>,
    #[serde(default)]
    pub malfunction: Option<MalfunctionParams>,
    #[serde(default = "default_count")]
    pub count: u32,
}

fn default_count() -> u32 {
    1
}

impl GenJob {
    /// Resolves the job into a generator config, preset fields first and
    /// explicit overrides on top.
    pub fn resolve(&self) -> Result<GeneratorConfig, String> {
        let mut config = match self.level {
            Some(level) => {
                if !(1..=15).contains(&level) {
                    return Err(format!("level {level} outside 1..=15"));
                }
                railplan_core::generate::level_preset(level)
            }
            None => {
                let (Some(w), Some(h), Some(n), Some(m)) =
                    (self.width, self.height, self.cities, self.trains)
                else {
                    return Err("job needs either a level or width/height/cities/trains".into());
                };
                GeneratorConfig::new(
                    self.label.as_deref().unwrap_or("custom"),
                    w,
                    h,
                    n,
                    m,
                )
            }
        };
        if let Some(label) = &self.label {
            config.label = label.clone();
        }
        if let Some(w) = self.width {
            config.width = w;
        }
        if let Some(h) = self.height {
            config.height = h;
        }
        if let Some(n) = self.cities {
            config.cities = n;
        }
        if let Some(m) = self.trains {
            config.trains = m;
        }
        if let Some(p) = self.speed_proportions {
            config.speed_proportions = p;
        }
        if let Some(f) = self.slack_margin_frac {
            config.slack_margin_frac = f;
        }
        if let Some(mal) = &self.malfunction {
            config.malfunction = mal.clone();
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfigFile {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    pub jobs: Vec<GenJob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSettings {
    #[serde(default = "default_portfolio")]
    pub portfolio: Vec<PriorityStrategy>,
    /// LNS iteration cap; `None` picks the agent-count schedule.
    #[serde(default)]
    pub lns_iters: Option<u32>,
    #[serde(default = "default_lns_mode")]
    pub lns_mode: LnsMode,
    #[serde(default = "default_budget_ms")]
    pub budget_ms: u64,
}

pub fn default_portfolio() -> Vec<PriorityStrategy> {
    railplan_core::planner::DEFAULT_PORTFOLIO.to_vec()
}

fn default_lns_mode() -> LnsMode {
    LnsMode::DelayOnly
}

fn default_budget_ms() -> u64 {
    60_000
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            portfolio: default_portfolio(),
            lns_iters: None,
            lns_mode: default_lns_mode(),
            budget_ms: default_budget_ms(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrSettings {
    pub runs: u32,
    pub iterations: u32,
}

impl Default for PrSettings {
    fn default() -> Self {
        PrSettings {
            runs: 20,
            iterations: 20,
        }
    }
}

/// Benchmark suite: instances x seeds x modes under one solver setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteFile {
    pub version: u32,
    pub instances: Vec<String>,
    pub seeds: Vec<u64>,
    pub modes: Vec<ReplanMode>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub pr: PrSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentReport {
    pub id: usize,
    pub act: Option<Timestep>,
    pub delay: u64,
}

/// One executed episode, as written to reports and benchmark records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub version: u32,
    pub instance: String,
    pub label: String,
    pub mode: ReplanMode,
    pub seed: u64,
    pub reward: f64,
    pub success: usize,
    pub success_rate: f64,
    pub total_delay: u64,
    pub replans: u64,
    pub steps: Timestep,
    /// Wall-clock planning time; excluded from determinism comparisons.
    pub planning_ms: Option<u64>,
    pub agents: Vec<AgentReport>,
}

impl EpisodeReport {
    pub fn new(
        instance: &str,
        label: &str,
        mode: ReplanMode,
        seed: u64,
        result: &EpisodeResult,
        replans: u64,
        steps: Timestep,
        planning_ms: Option<u64>,
    ) -> EpisodeReport {
        EpisodeReport {
            version: 1,
            instance: instance.to_string(),
            label: label.to_string(),
            mode,
            seed,
            reward: result.reward,
            success: result.success,
            success_rate: result.success_rate,
            total_delay: result.total_delay,
            replans,
            steps,
            planning_ms,
            agents: result
                .arrivals
                .iter()
                .zip(&result.delays)
                .enumerate()
                .map(|(id, (act, delay))| AgentReport {
                    id,
                    act: *act,
                    delay: *delay,
                })
                .collect(),
        }
    }
}

pub fn mode_name(mode: ReplanMode) -> &'static str {
    match mode {
        ReplanMode::McpOnly => "mcp-only",
        ReplanMode::LnsPr => "lns-pr",
        ReplanMode::PerMalfunctionPr => "per-malfunction-pr",
    }
}
