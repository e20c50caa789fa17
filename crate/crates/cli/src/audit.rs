use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use coreplan::diagnostics::{
    approx_error_report, certificate_check_relaxed_lp, dynamic_duality_gap, general_error_audit, ApproxErrorReport,
    CertificateReport, ComparatorPath, GeneralErrorAudit,
};
use coreplan::RunTrace;
use serde::Serialize;

use crate::artifact::{read_json, resolve, write_json, Envelope, Instance, IntegrityError, Meta};
use crate::plan::{RunResult, RESULT_FILE, TRACE_FILE};

pub const REPORT_FILE: &str = "report.json";
pub const AUDIT_FILE: &str = "audit.csv";

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    /// Working directory; relative paths resolve against it.
    #[serde(skip)]
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Instance directory written by `gen`.
    #[arg(long, default_value = ".")]
    pub instance: PathBuf,
    /// Replicate directory holding `result.json` and `trace.csv`.
    #[arg(long, default_value = "run/seed-0")]
    pub run: PathBuf,
    /// Tolerance of the LP certificate.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Sampled (π, θ') pairs for the Bellman-error estimate.
    #[arg(long, default_value_t = 20)]
    pub ibe_samples: usize,
}

#[derive(Debug, Serialize)]
struct Certificate {
    #[serde(flatten)]
    report: CertificateReport,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct Report {
    gap: f64,
    primal_regret: f64,
    dual_dynamic_regret: f64,
    /// `|gap − (Reg^p + Reg^d) / T|`.
    decomposition_residual: f64,
    mean_subopt: f64,
    /// `|gap − mean subopt|`, zero for exact linear MDPs.
    gap_subopt_residual: f64,
    comparator: ComparatorPath,
    eps_approx_bound: f64,
    approx: ApproxErrorReport,
    general_error: GeneralErrorAudit,
    certificate: Option<Certificate>,
}

pub fn cmd_audit(args: &AuditArgs) -> Result<()> {
    let inst = Instance::load(&resolve(&args.out, &args.instance))?;
    let run_dir = resolve(&args.out, &args.run);
    let result_path = run_dir.join(RESULT_FILE);
    let result: Envelope<RunResult> = read_json(&result_path)?;
    inst.verify(&result_path, &result.meta.instance_hash)?;

    let trace_path = run_dir.join(TRACE_FILE);
    let text = fs::read_to_string(&trace_path)
        .with_context(|| format!("reading {} (plan with tracing enabled)", trace_path.display()))?;
    let found = crate::artifact::csv_instance_hash(&text).ok_or_else(|| IntegrityError {
        file: trace_path.display().to_string(),
        expected: inst.hash.clone(),
        found: "none".into(),
    })?;
    inst.verify(&trace_path, found)?;

    let run = result.body;
    let d_gamma = run.planner_config.d_gamma;
    let trace = RunTrace::from_csv(&text, run.beta, run.inner_steps, run.j, run.theta_cum.clone())?;
    let gap = dynamic_duality_gap(
        &inst.mdp,
        &inst.features,
        &inst.core,
        &trace,
        d_gamma,
        inst.witness.as_ref(),
    )?;
    let approx = approx_error_report(
        &inst.mdp,
        &inst.features,
        &inst.core,
        &trace,
        d_gamma,
        args.ibe_samples,
        run.seed,
    )?;
    let general = general_error_audit(
        &inst.mdp,
        &inst.features,
        &inst.core,
        &trace,
        &gap,
        d_gamma,
        args.ibe_samples,
        run.seed,
    )?;
    let certificate = match &inst.witness {
        Some(w) => {
            let report = certificate_check_relaxed_lp(&inst.mdp, &inst.features, &inst.core, w, args.tol)?;
            Some(Certificate {
                passed: report.passed(),
                report,
            })
        }
        None => None,
    };
    let report = Report {
        gap: gap.gap,
        primal_regret: gap.primal_regret,
        dual_dynamic_regret: gap.dual_dynamic_regret,
        decomposition_residual: gap.decomposition_residual(),
        mean_subopt: gap.mean_subopt,
        gap_subopt_residual: (gap.gap - gap.mean_subopt).abs(),
        comparator: gap.path,
        eps_approx_bound: approx.eps_approx_bound,
        approx,
        general_error: general,
        certificate,
    };

    let mut echo = serde_json::to_value(args)?;
    echo["command"] = "audit".into();
    echo["run_config"] = result.meta.config;
    let meta = Meta::new(&inst.hash, echo);
    write_json(
        &run_dir.join(REPORT_FILE),
        &Envelope {
            meta: meta.clone(),
            body: &report,
        },
    )?;
    let csv_path = run_dir.join(AUDIT_FILE);
    fs::write(&csv_path, gap.to_csv(&meta.preamble())).with_context(|| format!("writing {}", csv_path.display()))?;

    println!(
        "gap={:.6e} mean_subopt={:.6e} primal_regret={:.6e} dual_dynamic_regret={:.6e} eps_approx_bound={:.6e}",
        report.gap, report.mean_subopt, report.primal_regret, report.dual_dynamic_regret, report.eps_approx_bound
    );
    match &report.certificate {
        Some(c) => println!("certificate: {}", if c.passed { "PASS" } else { "FAIL" }),
        None => println!("certificate: skipped (no witness.json)"),
    }
    println!("general error bound holds: {}", report.general_error.holds);
    println!(
        "wrote {} and {}",
        run_dir.join(REPORT_FILE).display(),
        csv_path.display()
    );
    Ok(())
}
