use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use coreplan::planner::{default_d_gamma, ScheduleInputs};
use coreplan::{run, tune_hyperparameters, GenerativeModel, PlannerConfig, RunOutput};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{config_error, resolve, write_json, Envelope, Instance, Meta};

pub const RESULT_FILE: &str = "result.json";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// Working directory; relative paths resolve against it.
    #[serde(skip)]
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Instance directory written by `gen`.
    #[arg(long, default_value = ".")]
    pub instance: PathBuf,
    /// Parent directory of the per-seed `seed-<n>` result directories.
    #[arg(long, default_value = "run")]
    pub run_dir: PathBuf,
    /// Target optimisation error; picks T, K and all rates.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Number of outer rounds.
    #[arg(long = "T")]
    pub rounds: Option<usize>,
    /// Inner SGD steps per round (default `⌈T / (m² log(m|A|))⌉`).
    #[arg(long = "K")]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Radius of the θ ball (default `√d (1 + γ/(1−γ))`).
    #[arg(long)]
    pub d_gamma: Option<f64>,
    /// Replicate seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Skip the per-round trace (audits need it).
    #[arg(long)]
    pub no_trace: bool,
}

/// Scalars written to `result.json` next to the `meta` header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "K")]
    pub inner_steps: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub beta: f64,
    /// `Θ_J`, the cumulative parameter defining the output policy.
    pub theta_cum: Vec<f64>,
    pub transition_queries: u64,
    pub init_queries: u64,
    pub planner_config: PlannerConfig,
}

pub fn schedule_inputs(inst: &Instance, d_gamma: Option<f64>) -> ScheduleInputs {
    let m = inst.core.size();
    ScheduleInputs {
        m,
        radius: inst.features.radius(),
        d_gamma: d_gamma.unwrap_or_else(|| default_d_gamma(inst.features.dim(), inst.mdp.gamma())),
        num_actions: inst.mdp.num_actions(),
        dkl_bound: (m as f64).ln(),
    }
}

pub fn tuned_config(inputs: &ScheduleInputs, epsilon: f64, seed: u64) -> Result<PlannerConfig> {
    let mut cfg = tune_hyperparameters(
        epsilon,
        inputs.m,
        inputs.radius,
        inputs.d_gamma,
        inputs.num_actions,
        inputs.dkl_bound,
    )?;
    cfg.seed = seed;
    Ok(cfg)
}

pub fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(config_error("at least one replicate seed is required"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_error("replicate seeds must be distinct"));
    }
    Ok(())
}

/// Caps the worker count at `COREPLAN_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("COREPLAN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| config_error(format!("COREPLAN_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?)
}

impl PlanArgs {
    fn config(&self, inst: &Instance, seed: u64) -> Result<PlannerConfig> {
        let explicit = self.rounds.is_some()
            || self.inner_steps.is_some()
            || self.eta.is_some()
            || self.beta.is_some()
            || self.alpha.is_some();
        let inputs = schedule_inputs(inst, self.d_gamma);
        let mut cfg = match (self.epsilon, explicit) {
            (Some(_), true) => {
                return Err(config_error(
                    "--epsilon cannot be combined with explicit --T/--K/--eta/--beta/--alpha",
                ))
            }
            (Some(eps), false) => tuned_config(&inputs, eps, seed)?,
            (None, _) => {
                let t = self
                    .rounds
                    .ok_or_else(|| config_error("either --epsilon or --T is required"))?;
                let mut cfg = inputs.config_for(t, seed)?;
                if let Some(k) = self.inner_steps {
                    cfg.inner_steps = k;
                    cfg.alpha = inputs.d_gamma / (inputs.radius * (k as f64).sqrt());
                }
                cfg.eta = self.eta.unwrap_or(cfg.eta);
                cfg.beta = self.beta.unwrap_or(cfg.beta);
                cfg.alpha = self.alpha.unwrap_or(cfg.alpha);
                cfg
            }
        };
        cfg.record_trace = !self.no_trace;
        cfg.validate()?;
        if cfg.transition_budget().is_none() {
            return Err(config_error("T (K + 1) overflows the query counter"));
        }
        Ok(cfg)
    }
}

pub fn execute<'a>(inst: &'a Instance, cfg: &PlannerConfig) -> Result<RunOutput<'a>> {
    Ok(run(
        GenerativeModel::new(&inst.mdp, cfg.seed),
        &inst.features,
        &inst.core,
        cfg,
    )?)
}

fn write_run(dir: &Path, meta: &Meta, output: &RunOutput, cfg: &PlannerConfig, epsilon: Option<f64>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let result = RunResult {
        rounds: cfg.rounds,
        inner_steps: cfg.inner_steps,
        j: output.j,
        seed: cfg.seed,
        epsilon,
        beta: cfg.beta,
        theta_cum: output.trace.theta_cum_j.clone(),
        transition_queries: output.transition_queries,
        init_queries: output.init_queries,
        planner_config: cfg.clone(),
    };
    write_json(
        &dir.join(RESULT_FILE),
        &Envelope {
            meta: meta.clone(),
            body: result,
        },
    )?;
    if cfg.record_trace {
        let path = dir.join(TRACE_FILE);
        fs::write(&path, output.trace.to_csv(&meta.preamble()))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn cmd_plan(args: &PlanArgs) -> Result<()> {
    check_seeds(&args.seeds)?;
    let inst = Instance::load(&resolve(&args.out, &args.instance))?;
    let configs = args
        .seeds
        .iter()
        .map(|s| args.config(&inst, *s))
        .collect::<Result<Vec<_>>>()?;
    let mut echo = serde_json::to_value(args)?;
    echo["command"] = "plan".into();
    let meta = Meta::new(&inst.hash, echo);
    let run_root = resolve(&args.out, &args.run_dir);
    let summaries = thread_pool()?.install(|| {
        configs
            .par_iter()
            .map(|cfg| -> Result<String> {
                let output = execute(&inst, cfg)?;
                let dir = run_root.join(format!("seed-{}", cfg.seed));
                write_run(&dir, &meta, &output, cfg, args.epsilon)?;
                Ok(format!(
                    "seed {}: T={} K={} J={} transition_queries={} init_queries={} -> {}",
                    cfg.seed,
                    cfg.rounds,
                    cfg.inner_steps,
                    output.j,
                    output.transition_queries,
                    output.init_queries,
                    dir.display()
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for line in summaries {
        println!("{line}");
    }
    Ok(())
}
