use std::fmt::Write as _;

use nalgebra::DVector;
use serde::Serialize;

use super::{lagrangian_unchecked, materialize_flow, SaddlePoint, OPTIMUM_TOL};
use crate::error::{Error, Result};
use crate::features::{bellman_fit_error, ibe_estimate, q_approx_error, CoreSet, FeatureMap, LinearMdpWitness};
use crate::linalg::sup_norm;
use crate::mdp::{evaluate_policy, optimal_values, Mdp, Policy};
use crate::planner::{RunTrace, SoftmaxPolicy};

/// Where the per-round comparators `θ*_t` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparatorPath {
    /// `θ*_t = ϑ + γ W V^{π_t}` from a linear-MDP witness.
    Witness,
    /// Best iterate of the ball-constrained Chebyshev fit of `Q^{π_t}`.
    Chebyshev,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTerms {
    pub t: usize,
    /// `L(λ*, u*; θ_t, V_t)`.
    pub l_left: f64,
    /// `L(λ_t, u_t; θ_t, V_t)`.
    pub l_mid: f64,
    /// `L(λ_t, u_t; θ*_t, V*_t)`.
    pub l_right: f64,
    /// `⟨μ* − μ^{π_t}, r⟩`.
    pub subopt: f64,
    /// `‖Φ θ*_t − Q^{π_t}‖_∞`.
    pub fit_error: f64,
}

#[derive(Debug, Clone)]
pub struct DualityGapReport {
    pub gap: f64,
    pub primal_regret: f64,
    pub dual_dynamic_regret: f64,
    /// `mean_t ⟨μ* − μ^{π_t}, r⟩`.
    pub mean_subopt: f64,
    pub rounds: Vec<RoundTerms>,
    pub path: ComparatorPath,
    pub lambda_star: DVector<f64>,
    pub mu_star: DVector<f64>,
    pub theta_star: Vec<DVector<f64>>,
    pub v_star: Vec<DVector<f64>>,
}

impl DualityGapReport {
    /// `|gap − (Reg^p + Reg^d) / T|`.
    pub fn decomposition_residual(&self) -> f64 {
        let t = self.rounds.len() as f64;
        (self.gap - (self.primal_regret + self.dual_dynamic_regret) / t).abs()
    }

    /// Per-round CSV: `t,L_left,L_right,subopt_t`.
    pub fn to_csv(&self, preamble: &[String]) -> String {
        let mut s = String::new();
        for line in preamble {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("t,L_left,L_right,subopt_t\n");
        for r in &self.rounds {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.t, r.l_left, r.l_right, r.subopt);
        }
        s
    }
}

/// Dense reconstruction of one recorded round.
pub(crate) struct Round {
    pub policy: Policy,
    pub lambda: DVector<f64>,
    pub theta: DVector<f64>,
}

pub(crate) fn rounds_of(phi: &FeatureMap, num_actions: usize, trace: &RunTrace) -> Result<Vec<Round>> {
    if trace.rounds.is_empty() {
        return Err(Error::MissingTrace("the run was not recorded"));
    }
    let mut acc = DVector::zeros(phi.dim());
    let mut out = Vec::with_capacity(trace.rounds.len());
    for r in &trace.rounds {
        let policy = SoftmaxPolicy::new(phi, num_actions, acc.clone(), trace.beta)?.to_policy();
        let theta = DVector::from_column_slice(&r.theta);
        acc += &theta;
        out.push(Round {
            policy,
            lambda: DVector::from_column_slice(&r.lambda),
            theta,
        });
    }
    Ok(out)
}

/// The dynamic duality gap of a recorded run against `λ* = Bᵀμ*`, `u* = μ*`,
/// `V*_t = V^{π_t}` and `θ*_t` fitting `Q^{π_t}`.
///
/// With a witness, `θ*_t` is exact; otherwise it is the Chebyshev fit inside
/// the `D_gamma` ball.
pub fn dynamic_duality_gap(
    mdp: &Mdp,
    phi: &FeatureMap,
    core: &CoreSet,
    trace: &RunTrace,
    d_gamma: f64,
    witness: Option<&LinearMdpWitness>,
) -> Result<DualityGapReport> {
    let rounds = rounds_of(phi, mdp.num_actions(), trace)?;
    let opt = optimal_values(mdp, OPTIMUM_TOL)?;
    let mu_star = opt.mu_star.clone();
    let lambda_star = core.interp().transpose() * &mu_star;
    let optimal_return = opt.optimal_return();

    let mut terms = Vec::with_capacity(rounds.len());
    let mut theta_star = Vec::with_capacity(rounds.len());
    let mut v_star = Vec::with_capacity(rounds.len());
    for (i, round) in rounds.iter().enumerate() {
        let eval = evaluate_policy(mdp, &round.policy)?;
        let comparator = match witness {
            Some(w) => w.q_parameter(mdp.gamma(), &eval.v_pi),
            None => q_approx_error(mdp, phi, &round.policy, d_gamma)?.theta,
        };
        let fit_error = sup_norm(&(phi.q_values(&comparator)? - &eval.q_pi));

        let q_t = phi.q_values(&round.theta)?;
        let v_t = round.policy.mean_operator(&q_t)?;
        let (_, u_t) = materialize_flow(mdp, core, &round.lambda, &round.policy)?;

        let left = SaddlePoint {
            lambda: lambda_star.clone(),
            u: mu_star.clone(),
            theta: round.theta.clone(),
            v: v_t.clone(),
        };
        let mid = SaddlePoint {
            lambda: round.lambda.clone(),
            u: u_t.clone(),
            theta: round.theta.clone(),
            v: v_t,
        };
        let right = SaddlePoint {
            lambda: round.lambda.clone(),
            u: u_t,
            theta: comparator.clone(),
            v: eval.v_pi.clone(),
        };
        terms.push(RoundTerms {
            t: i + 1,
            l_left: lagrangian_unchecked(mdp, phi, core, &left)?,
            l_mid: lagrangian_unchecked(mdp, phi, core, &mid)?,
            l_right: lagrangian_unchecked(mdp, phi, core, &right)?,
            subopt: optimal_return - eval.return_pi,
            fit_error,
        });
        theta_star.push(comparator);
        v_star.push(eval.v_pi);
    }

    let n = terms.len() as f64;
    let gap = terms.iter().map(|r| r.l_left - r.l_right).sum::<f64>() / n;
    let primal_regret = terms.iter().map(|r| r.l_left - r.l_mid).sum();
    let dual_dynamic_regret = terms.iter().map(|r| r.l_mid - r.l_right).sum();
    let mean_subopt = terms.iter().map(|r| r.subopt).sum::<f64>() / n;
    Ok(DualityGapReport {
        gap,
        primal_regret,
        dual_dynamic_regret,
        mean_subopt,
        rounds: terms,
        path: if witness.is_some() {
            ComparatorPath::Witness
        } else {
            ComparatorPath::Chebyshev
        },
        lambda_star,
        mu_star,
        theta_star,
        v_star,
    })
}

/// Inputs and outcome of the general-error inequality
/// `𝒢_T + 2 mean ε̂ + 2 IBÊ + 2 D ⟨μ*, ε_core⟩ ≥ mean subopt`.
#[derive(Debug, Clone, Serialize)]
pub struct GeneralErrorAudit {
    pub gap: f64,
    /// `mean_t ‖Φ θ*_t − Q^{π_t}‖_∞` at the comparators the gap used.
    pub mean_fit_error: f64,
    /// Largest Bellman fit error over sampled `(π, θ')`.
    pub ibe_sampled: f64,
    /// Largest Bellman fit error at the iterates `(π_t, θ_t)`.
    pub ibe_iterates: f64,
    /// `2 D ⟨μ*, ε_core⟩`.
    pub core_term: f64,
    pub lhs: f64,
    pub mean_subopt: f64,
    pub holds: bool,
}

/// Checks the general-error bound on a gap report. The IBE term is the larger
/// of a sampled estimate and the fits at the iterates the run actually
/// visited, which are the only pairs the bound uses.
#[allow(clippy::too_many_arguments)]
pub fn general_error_audit(
    mdp: &Mdp,
    phi: &FeatureMap,
    core: &CoreSet,
    trace: &RunTrace,
    report: &DualityGapReport,
    d_gamma: f64,
    ibe_samples: usize,
    seed: u64,
) -> Result<GeneralErrorAudit> {
    let rounds = rounds_of(phi, mdp.num_actions(), trace)?;
    let mut ibe_iterates = 0.0_f64;
    for round in &rounds {
        let fit = bellman_fit_error(mdp, phi, &round.policy, &round.theta, d_gamma)?;
        ibe_iterates = ibe_iterates.max(fit.value);
    }
    let ibe_sampled = ibe_estimate(mdp, phi, d_gamma, ibe_samples, seed)?;
    let n = report.rounds.len() as f64;
    let mean_fit_error = report.rounds.iter().map(|r| r.fit_error).sum::<f64>() / n;
    let core_term = 2.0 * d_gamma * report.mu_star.dot(core.eps_core());
    let lhs = report.gap + 2.0 * mean_fit_error + 2.0 * ibe_sampled.max(ibe_iterates) + core_term;
    Ok(GeneralErrorAudit {
        gap: report.gap,
        mean_fit_error,
        ibe_sampled,
        ibe_iterates,
        core_term,
        lhs,
        mean_subopt: report.mean_subopt,
        holds: lhs >= report.mean_subopt - 1e-8,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ApproxErrorReport {
    /// `mean_t ε_{π_t}` (upper bounds from the Chebyshev routine).
    pub mean_eps_pi: f64,
    pub ibe: f64,
    /// `⟨μ*, ε_core⟩`.
    pub core_overlap: f64,
    /// `2 mean ε_π + 2 IBE + 2 D ⟨μ*, ε_core⟩`.
    pub eps_approx_bound: f64,
}

/// Assembles the approximation-error term of the suboptimality bound for a
/// recorded run, averaging over all rounds instead of sampling `J`.
pub fn approx_error_report(
    mdp: &Mdp,
    phi: &FeatureMap,
    core: &CoreSet,
    trace: &RunTrace,
    d_gamma: f64,
    ibe_samples: usize,
    seed: u64,
) -> Result<ApproxErrorReport> {
    let rounds = rounds_of(phi, mdp.num_actions(), trace)?;
    let mut total = 0.0;
    for round in &rounds {
        total += q_approx_error(mdp, phi, &round.policy, d_gamma)?.value;
    }
    let mean_eps_pi = total / rounds.len() as f64;
    let ibe = ibe_estimate(mdp, phi, d_gamma, ibe_samples, seed)?;
    let opt = optimal_values(mdp, OPTIMUM_TOL)?;
    let core_overlap = opt.mu_star.dot(core.eps_core());
    Ok(ApproxErrorReport {
        mean_eps_pi,
        ibe,
        core_overlap,
        eps_approx_bound: 2.0 * mean_eps_pi + 2.0 * ibe + 2.0 * d_gamma * core_overlap,
    })
}
