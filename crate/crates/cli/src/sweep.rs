use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use coreplan::diagnostics::dynamic_duality_gap;
use coreplan::PlannerConfig;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifact::{config_error, resolve, Instance, Meta};
use crate::plan::{check_seeds, execute, schedule_inputs, thread_pool, tuned_config};

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Working directory; relative paths resolve against it.
    #[serde(skip)]
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Instance directory written by `gen`.
    #[arg(long, default_value = ".")]
    pub instance: PathBuf,
    /// Target optimisation errors, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "rounds")]
    pub epsilons: Vec<f64>,
    /// Horizons, comma separated; rates follow the closed forms at each T.
    #[arg(long = "T", value_delimiter = ',')]
    pub rounds: Vec<usize>,
    /// Replicate seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub d_gamma: Option<f64>,
    /// Report the tuned schedules without running the planner.
    #[arg(long)]
    pub tune_only: bool,
    /// Summary CSV file.
    #[arg(long, default_value = "sweep.csv")]
    pub summary: PathBuf,
}

struct Row {
    epsilon: Option<f64>,
    config: PlannerConfig,
    seed: Option<u64>,
    subopt_mean: Option<f64>,
    gap: Option<f64>,
}

fn opt<T: std::fmt::Debug>(v: Option<T>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.epsilons.is_empty() && args.rounds.is_empty() {
        return Err(config_error("sweep needs a non-empty --epsilons or --T list"));
    }
    check_seeds(&args.seeds)?;
    let inst = Instance::load(&resolve(&args.out, &args.instance))?;
    let inputs = schedule_inputs(&inst, args.d_gamma);
    let mut settings: Vec<(Option<f64>, PlannerConfig)> = Vec::new();
    for eps in &args.epsilons {
        settings.push((Some(*eps), tuned_config(&inputs, *eps, 0)?));
    }
    for t in &args.rounds {
        settings.push((None, inputs.config_for(*t, 0)?));
    }
    for (_, cfg) in &settings {
        if cfg.transition_budget().is_none() {
            return Err(config_error(format!("T = {} overflows the query counter", cfg.rounds)));
        }
    }

    let rows: Vec<Row> = if args.tune_only {
        settings
            .into_iter()
            .map(|(epsilon, config)| Row {
                epsilon,
                config,
                seed: None,
                subopt_mean: None,
                gap: None,
            })
            .collect()
    } else {
        let tasks: Vec<(Option<f64>, PlannerConfig)> = settings
            .iter()
            .flat_map(|(eps, cfg)| {
                args.seeds.iter().map(move |s| {
                    let mut cfg = cfg.clone();
                    cfg.seed = *s;
                    cfg.record_trace = true;
                    (*eps, cfg)
                })
            })
            .collect();
        thread_pool()?.install(|| {
            tasks
                .into_par_iter()
                .map(|(epsilon, config)| -> Result<Row> {
                    let output = execute(&inst, &config)?;
                    let report = dynamic_duality_gap(
                        &inst.mdp,
                        &inst.features,
                        &inst.core,
                        &output.trace,
                        config.d_gamma,
                        inst.witness.as_ref(),
                    )?;
                    Ok(Row {
                        epsilon,
                        seed: Some(config.seed),
                        config,
                        subopt_mean: Some(report.mean_subopt),
                        gap: Some(report.gap),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?
    };

    let mut echo = serde_json::to_value(args)?;
    echo["command"] = "sweep".into();
    let meta = Meta::new(&inst.hash, echo);
    let mut csv = String::new();
    for line in meta.preamble() {
        writeln!(csv, "# {line}")?;
    }
    csv.push_str("epsilon,T,K,queries,subopt_mean,gap,seed\n");
    for r in &rows {
        let queries = r.config.transition_budget().unwrap_or(u64::MAX);
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            opt(r.epsilon),
            r.config.rounds,
            r.config.inner_steps,
            queries,
            opt(r.subopt_mean),
            opt(r.gap),
            r.seed.map(|s| s.to_string()).unwrap_or_default()
        )?;
        println!(
            "epsilon={} T={} K={} queries={} subopt_mean={} gap={} seed={}",
            opt(r.epsilon),
            r.config.rounds,
            r.config.inner_steps,
            queries,
            opt(r.subopt_mean),
            opt(r.gap),
            r.seed.map(|s| s.to_string()).unwrap_or_default()
        );
    }
    let path = resolve(&args.out, &args.summary);
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
