//! Command-line harness: generate benchmark instances, solve them, simulate
//! episodes under breakdowns, and run reproducible benchmark suites.

mod files;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use files::{EpisodeReport, GenConfigFile, SolverSettings, SuiteFile};
use railplan_core::executor::{run_controller, ReplanConfig, ReplanMode};
use railplan_core::format;
use railplan_core::generate::generate_instance;
use railplan_core::lns::{self, LnsConfig};
use railplan_core::planner::{portfolio_plan, PriorityStrategy, Solution};
use railplan_core::railmap::{Cell, DistanceCache, RailType};
use railplan_core::scenario::{sample_malfunctions, Instance};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Parser)]
#[command(name = "railplan", version, about = "Plan, execute and benchmark train schedules on grid rail networks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate instance files from a config of level presets or explicit
    /// parameters.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plan an instance: parallel prioritized planning, then LNS.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        /// Comma-separated orders: index,eat,slack,slack-rev.
        #[arg(long)]
        portfolio: Option<String>,
        /// LNS iteration cap; defaults to the agent-count schedule.
        #[arg(long)]
        lns_iters: Option<u32>,
        /// adaptive or delay-only.
        #[arg(long, default_value = "delay-only")]
        lns_mode: String,
        #[arg(long, default_value_t = 60_000)]
        budget_ms: u64,
        #[arg(long)]
        out: PathBuf,
        /// Writes the LNS iteration trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Execute a plan under sampled breakdowns and report the episode.
    Simulate {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// mcp-only, lns-pr or per-malfunction-pr.
        #[arg(long, default_value = "lns-pr")]
        mode: String,
        /// Malfunction sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes the trajectory log to this file.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Reads the breakdown schedule from a sidecar file instead of
        /// sampling.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Writes the sampled schedule to a sidecar file for replay.
        #[arg(long)]
        export_schedule: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        pr_runs: u32,
        #[arg(long, default_value_t = 20)]
        pr_iters: u32,
    },
    /// Run a whole suite: solve each instance once, execute every
    /// (seed, mode) episode, and summarize.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print an ASCII sketch of an instance map.
    Show {
        #[arg(long)]
        instance: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Cmd::Solve {
            instance,
            portfolio,
            lns_iters,
            lns_mode,
            budget_ms,
            out,
            trace,
        } => cmd_solve(
            &instance,
            portfolio.as_deref(),
            lns_iters,
            &lns_mode,
            budget_ms,
            &out,
            trace.as_deref(),
        ),
        Cmd::Simulate {
            instance,
            plan,
            mode,
            seed,
            log,
            schedule,
            export_schedule,
            pr_runs,
            pr_iters,
        } => cmd_simulate(
            &instance,
            &plan,
            &mode,
            seed,
            log.as_deref(),
            schedule.as_deref(),
            export_schedule.as_deref(),
            pr_runs,
            pr_iters,
        ),
        Cmd::Bench { suite, jobs, out } => cmd_bench(&suite, jobs, &out),
        Cmd::Show { instance } => cmd_show(&instance),
    }
}

fn parse_mode(s: &str) -> Result<ReplanMode> {
    Ok(match s {
        "mcp-only" => ReplanMode::McpOnly,
        "lns-pr" => ReplanMode::LnsPr,
        "per-malfunction-pr" => ReplanMode::PerMalfunctionPr,
        other => bail!("unknown mode {other:?}"),
    })
}

fn parse_portfolio(s: &str) -> Result<Vec<PriorityStrategy>> {
    s.split(',')
        .map(|item| {
            Ok(match item.trim() {
                "index" => PriorityStrategy::ByIndex,
                "eat" => PriorityStrategy::ByEarliestArrival,
                "slack" => PriorityStrategy::BySlack,
                "slack-rev" => PriorityStrategy::BySlackReversedTies,
                other => bail!("unknown strategy {other:?}"),
            })
        })
        .collect()
}

fn parse_lns_mode(s: &str) -> Result<lns::LnsMode> {
    Ok(match s {
        "adaptive" => lns::LnsMode::Adaptive,
        "delay-only" => lns::LnsMode::DelayOnly,
        other => bail!("unknown LNS mode {other:?}"),
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_gen(config_path: &FsPath, out: &FsPath, seed_override: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let config: GenConfigFile = serde_json::from_str(&text).context("parsing generation config")?;
    if config.version != 1 {
        bail!("unsupported config version {}", config.version);
    }
    let base_seed = seed_override.or(config.seed).unwrap_or(0);
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut stream = 0u64;
    for (job_idx, job) in config.jobs.iter().enumerate() {
        let base = job
            .resolve()
            .map_err(|e| anyhow::anyhow!("job {job_idx}: {e}"))?;
        for i in 0..job.count {
            let mut cfg = base.clone();
            cfg.label = format!("{}-i{:02}", base.label, i);
            let seed = base_seed.wrapping_add(stream);
            stream += 1;
            let instance = generate_instance(&cfg, seed)
                .map_err(|e| anyhow::anyhow!("job {job_idx} #{i}: {e}"))?;
            let file = out.join(format!("{}.json", cfg.label));
            format::save_instance(&instance, &file)?;
            written.push(file.display().to_string());
        }
    }
    for f in &written {
        println!("{f}");
    }
    Ok(())
}

struct Solved {
    solution: Solution,
    planning_ms: u64,
    budget_exceeded: bool,
}

fn solve_instance(instance: &Instance, distances: &DistanceCache, settings: &SolverSettings) -> Solved {
    let budget = Duration::from_millis(settings.budget_ms);
    let started = Instant::now();
    let solution = portfolio_plan(instance, distances, &settings.portfolio, budget);
    let mut budget_exceeded = started.elapsed() > budget;
    let iters = settings
        .lns_iters
        .unwrap_or_else(|| lns::default_iteration_limit(instance.agent_count()));
    let solution = if budget_exceeded {
        solution
    } else {
        let config = LnsConfig::new(iters, settings.lns_mode, instance.seed);
        let (improved, _) = lns::improve(instance, distances, solution, &config);
        budget_exceeded = started.elapsed() > budget;
        improved
    };
    Solved {
        solution,
        planning_ms: started.elapsed().as_millis() as u64,
        budget_exceeded,
    }
}

#[derive(Serialize)]
struct SolveReport {
    instance: String,
    label: String,
    agents: usize,
    planned: usize,
    total_delay: u64,
    reward_estimate: f64,
    makespan: u32,
    planning_ms: u64,
    budget_exceeded: bool,
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    instance_path: &FsPath,
    portfolio: Option<&str>,
    lns_iters: Option<u32>,
    lns_mode: &str,
    budget_ms: u64,
    out: &FsPath,
    trace: Option<&FsPath>,
) -> Result<()> {
    let instance = format::load_instance(instance_path)
        .with_context(|| format!("loading {}", instance_path.display()))?;
    let distances = DistanceCache::build(&instance.map, instance.trains.iter().map(|t| t.goal));
    let settings = SolverSettings {
        portfolio: match portfolio {
            Some(s) => parse_portfolio(s)?,
            None => files::default_portfolio(),
        },
        lns_iters,
        lns_mode: parse_lns_mode(lns_mode)?,
        budget_ms,
    };
    // Re-run with an explicit trace when requested; the planner itself is
    // deterministic so the two passes agree.
    let solved = solve_instance(&instance, &distances, &settings);
    if let Some(trace_path) = trace {
        let budget = Duration::from_millis(settings.budget_ms);
        let base = portfolio_plan(&instance, &distances, &settings.portfolio, budget);
        let iters = settings
            .lns_iters
            .unwrap_or_else(|| lns::default_iteration_limit(instance.agent_count()));
        let config = LnsConfig::new(iters, settings.lns_mode, instance.seed);
        let (_, rows) = lns::improve(&instance, &distances, base, &config);
        let mut text = String::from("# railplan-lns-trace v1\n");
        for row in rows {
            writeln!(text, "{row}").unwrap();
        }
        fs::write(trace_path, text)?;
    }
    format::save_plan(&instance, &solved.solution.paths, out)?;
    print_json(&SolveReport {
        instance: instance_path.display().to_string(),
        label: instance.label.clone(),
        agents: instance.agent_count(),
        planned: solved.solution.planned_count(),
        total_delay: solved.solution.total_delay,
        reward_estimate: solved.solution.reward_estimate,
        makespan: solved.solution.makespan,
        planning_ms: solved.planning_ms,
        budget_exceeded: solved.budget_exceeded,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    instance_path: &FsPath,
    plan_path: &FsPath,
    mode: &str,
    seed: u64,
    log: Option<&FsPath>,
    schedule_path: Option<&FsPath>,
    export_schedule: Option<&FsPath>,
    pr_runs: u32,
    pr_iters: u32,
) -> Result<()> {
    let instance = format::load_instance(instance_path)
        .with_context(|| format!("loading {}", instance_path.display()))?;
    let paths = format::load_plan(plan_path, &instance)
        .with_context(|| format!("loading {}", plan_path.display()))?;
    let distances = DistanceCache::build(&instance.map, instance.trains.iter().map(|t| t.goal));
    let solution = Solution::compute(&instance, &distances, paths);
    solution
        .validate_conflict_free(&instance)
        .map_err(|e| anyhow::anyhow!("plan has conflicts: {e}"))?;
    let mode = parse_mode(mode)?;
    let schedule = match schedule_path {
        Some(p) => format::schedule_from_str(&fs::read_to_string(p)?, instance.agent_count())?,
        None => sample_malfunctions(
            &instance.malfunction,
            instance.agent_count(),
            instance.tmax,
            seed,
        ),
    };
    if let Some(p) = export_schedule {
        fs::write(p, format::schedule_to_string(&schedule))?;
    }
    let config = ReplanConfig {
        runs: pr_runs,
        iterations: pr_iters,
        mode,
    };
    let report = run_controller(
        &instance,
        &distances,
        solution,
        config,
        schedule,
        seed,
        None,
        log.is_some(),
    )?;
    if let Some(p) = log {
        fs::write(p, format::trajectory_to_string(&report.trajectory))?;
    }
    print_json(&EpisodeReport::new(
        &instance_path.display().to_string(),
        &instance.label,
        mode,
        seed,
        &report.result,
        report.replans,
        report.steps,
        None,
    ))
}

fn cmd_bench(suite_path: &FsPath, jobs: usize, out: &FsPath) -> Result<()> {
    let suite: SuiteFile = serde_json::from_str(&fs::read_to_string(suite_path)?)
        .context("parsing suite file")?;
    if suite.version != 1 {
        bail!("unsupported suite version {}", suite.version);
    }
    fs::create_dir_all(out)?;
    let jobs = jobs.max(1);

    // Worker pool over instance indices; per-instance results keep their
    // slot so output order is independent of completion order.
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Vec<EpisodeReport>>>> =
        Mutex::new(vec![None; suite.instances.len()]);
    let errors: Mutex<Vec<String>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(suite.instances.len().max(1)) {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = next.lock().unwrap();
                    let idx = *guard;
                    if idx >= suite.instances.len() {
                        return;
                    }
                    *guard += 1;
                    idx
                };
                match bench_instance(&suite, &suite.instances[idx]) {
                    Ok(reports) => results.lock().unwrap()[idx] = Some(reports),
                    Err(e) => {
                        errors
                            .lock()
                            .unwrap()
                            .push(format!("{}: {e}", suite.instances[idx]));
                    }
                }
            });
        }
    });
    for e in errors.lock().unwrap().iter() {
        eprintln!("bench: {e}");
    }

    let all: Vec<EpisodeReport> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .flatten()
        .flatten()
        .collect();
    let mut records = String::new();
    for r in &all {
        records.push_str(&serde_json::to_string(r)?);
        records.push('\n');
    }
    fs::write(out.join("records.jsonl"), records)?;

    // Summary: exact means per (label, mode).
    let mut groups: BTreeMap<(String, &'static str), Vec<&EpisodeReport>> = BTreeMap::new();
    for r in &all {
        groups
            .entry((r.label.clone(), files::mode_name(r.mode)))
            .or_default()
            .push(r);
    }
    let mut csv = String::from(
        "label,mode,episodes,mean_reward,mean_success_rate,mean_delay,mean_planning_ms\n",
    );
    for ((label, mode), rs) in &groups {
        let n = rs.len() as f64;
        let mean = |f: &dyn Fn(&EpisodeReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        writeln!(
            csv,
            "{label},{mode},{},{:.6},{:.6},{:.3},{:.1}",
            rs.len(),
            mean(&|r| r.reward),
            mean(&|r| r.success_rate),
            mean(&|r| r.total_delay as f64),
            mean(&|r| r.planning_ms.unwrap_or(0) as f64),
        )
        .unwrap();
    }
    fs::write(out.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn bench_instance(suite: &SuiteFile, instance_path: &str) -> Result<Vec<EpisodeReport>> {
    let instance = format::load_instance(FsPath::new(instance_path))
        .with_context(|| format!("loading {instance_path}"))?;
    let distances = DistanceCache::build(&instance.map, instance.trains.iter().map(|t| t.goal));
    let solved = solve_instance(&instance, &distances, &suite.solver);
    let mut reports = Vec::new();
    for &seed in &suite.seeds {
        let schedule = sample_malfunctions(
            &instance.malfunction,
            instance.agent_count(),
            instance.tmax,
            seed,
        );
        for &mode in &suite.modes {
            let config = ReplanConfig {
                runs: suite.pr.runs,
                iterations: suite.pr.iterations,
                mode,
            };
            let report = run_controller(
                &instance,
                &distances,
                solved.solution.clone(),
                config,
                schedule.clone(),
                seed,
                None,
                false,
            )?;
            reports.push(EpisodeReport::new(
                instance_path,
                &instance.label,
                mode,
                seed,
                &report.result,
                report.replans,
                report.steps,
                Some(solved.planning_ms),
            ));
        }
    }
    Ok(reports)
}

fn cmd_show(instance_path: &FsPath) -> Result<()> {
    let instance = format::load_instance(instance_path)?;
    let map = &instance.map;
    let mut stations = std::collections::HashMap::new();
    for city in map.cities() {
        stations.insert(city.arrival, 'A');
        stations.insert(city.departure, 'D');
    }
    let mut out = String::new();
    for row in 0..map.height() {
        for col in 0..map.width() {
            let cell = Cell::new(row, col);
            let c = if let Some(&s) = stations.get(&cell) {
                s
            } else {
                let table = map.transitions(cell);
                match RailType::classify(table) {
                    None => ' ',
                    Some(RailType::Straight) => {
                        if table.allows(railplan_core::railmap::Orientation::East, railplan_core::railmap::Orientation::East) {
                            '-'
                        } else {
                            '|'
                        }
                    }
                    Some(RailType::Curve) => '+',
                    Some(RailType::SimpleSwitch) => '%',
                    Some(RailType::DiamondCrossing) => 'x',
                    Some(RailType::SingleSlip | RailType::DoubleSlip) => 'X',
                    Some(RailType::SymmetricalSwitch) => 'Y',
                    Some(RailType::DeadEnd) => 'o',
                }
            };
            out.push(c);
        }
        out.push('\n');
    }
    println!(
        "{} {}x{}, {} cities, {} trains, horizon {}",
        instance.label,
        map.width(),
        map.height(),
        map.cities().len(),
        instance.agent_count(),
        instance.tmax
    );
    print!("{out}");
    Ok(())
}
