//! Dense, exact evaluation of the quantities the planner only samples.
//!
//! Everything here materialises `ν_t`, `u_t` and `V_t` over the full state
//! space and is independent of the planner's sampling code, so it can audit it.

mod certificate;
mod gap;
mod regret;

pub use certificate::{certificate_check_relaxed_lp, CertificateReport};
pub use gap::{
    approx_error_report, dynamic_duality_gap, general_error_audit, ApproxErrorReport, ComparatorPath, DualityGapReport,
    GeneralErrorAudit, RoundTerms,
};
pub use regret::{
    lambda_regret_audit, omd_regret_audit, sgd_audit, softmax_regret_audit, OmdRegretReport, SgdAuditReport,
    SoftmaxRegretReport,
};

use nalgebra::DVector;

use crate::error::{check_len, contract, Result};
use crate::features::{CoreSet, FeatureMap};
use crate::mdp::{evaluate_policy, optimal_values, Mdp, Optimum, Policy};

/// Tolerance for the value-iteration stage of the optimum oracle.
pub const OPTIMUM_TOL: f64 = 1e-12;

const DOMAIN_TOL: f64 = 1e-9;

/// A point `(λ, u; θ, V)` of the Lagrangian's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddlePoint {
    pub lambda: DVector<f64>,
    pub u: DVector<f64>,
    pub theta: DVector<f64>,
    pub v: DVector<f64>,
}

fn check_simplex(what: &str, p: &DVector<f64>) -> Result<()> {
    contract!(p.iter().all(|v| *v >= -DOMAIN_TOL), "{what} has a negative entry");
    let s = p.sum();
    contract!((s - 1.0).abs() <= DOMAIN_TOL, "{what} sums to {s}, expected 1");
    Ok(())
}

impl SaddlePoint {
    /// Checks `λ ∈ Δ_m`, `u ∈ Δ_{XA}`, `‖θ‖₂ ≤ D` and `‖V‖_∞ ≤ R D`.
    pub fn check_domain(&self, radius: f64, d_gamma: f64) -> Result<()> {
        check_simplex("lambda", &self.lambda)?;
        check_simplex("u", &self.u)?;
        let tn = self.theta.norm();
        contract!(tn <= d_gamma + DOMAIN_TOL, "‖θ‖₂ = {tn} exceeds D_gamma = {d_gamma}");
        let vn = self.v.amax();
        contract!(
            vn <= radius * d_gamma + DOMAIN_TOL,
            "‖V‖_∞ = {vn} exceeds R D_gamma = {}",
            radius * d_gamma
        );
        Ok(())
    }
}

/// `L(λ, u; θ, V) = ⟨λ, U(r + γ P V − Φ θ)⟩ + (1 − γ)⟨ν₀, V⟩ + ⟨u, Φ θ − E V⟩`,
/// after checking the domain constraints.
pub fn lagrangian(mdp: &Mdp, phi: &FeatureMap, core: &CoreSet, point: &SaddlePoint, d_gamma: f64) -> Result<f64> {
    point.check_domain(phi.radius(), d_gamma)?;
    lagrangian_unchecked(mdp, phi, core, point)
}

/// [`lagrangian`] without the domain checks. The comparators of the duality
/// gap (for example `V^π`) need not lie in the bounded domain.
pub fn lagrangian_unchecked(mdp: &Mdp, phi: &FeatureMap, core: &CoreSet, point: &SaddlePoint) -> Result<f64> {
    check_len("lambda", core.size(), point.lambda.len())?;
    check_len("u", mdp.num_pairs(), point.u.len())?;
    check_len("theta", phi.dim(), point.theta.len())?;
    check_len("V", mdp.num_states(), point.v.len())?;
    let q = phi.q_values(&point.theta)?;
    let bellman = mdp.reward() + mdp.apply_transition(&point.v)? * mdp.gamma() - &q;
    let ev = mdp.expand_values(&point.v)?;
    Ok(point.lambda.dot(&core.restrict(&bellman))
        + (1.0 - mdp.gamma()) * mdp.nu0().dot(&point.v)
        + point.u.dot(&(q - ev)))
}

/// `ν = γ Pᵀ Uᵀ λ + (1 − γ) ν₀` and `u = ν ∘ π`.
pub fn materialize_flow(
    mdp: &Mdp,
    core: &CoreSet,
    lambda: &DVector<f64>,
    policy: &Policy,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_len("lambda", core.size(), lambda.len())?;
    let nu = mdp.apply_transition_adjoint(&core.embed(lambda))? * mdp.gamma() + mdp.nu0() * (1.0 - mdp.gamma());
    let u = policy.compose(&nu)?;
    Ok((nu, u))
}

/// `∇_θ L = Φᵀ u_t − Φᵀ Uᵀ λ_t` with `u_t` materialised from `(λ_t, π_t)`.
pub fn exact_grad_theta(
    mdp: &Mdp,
    phi: &FeatureMap,
    core: &CoreSet,
    lambda: &DVector<f64>,
    policy: &Policy,
) -> Result<DVector<f64>> {
    let (_, u) = materialize_flow(mdp, core, lambda, policy)?;
    Ok(phi.matrix().transpose() * (u - core.embed(lambda)))
}

/// `∇_λ L = U[r + γ P V_t − Q_t]` with `Q_t = Φ θ_t` and `V_t = M^{π_t} Q_t`.
pub fn exact_grad_lambda(
    mdp: &Mdp,
    phi: &FeatureMap,
    core: &CoreSet,
    theta: &DVector<f64>,
    policy: &Policy,
) -> Result<DVector<f64>> {
    let q = phi.q_values(theta)?;
    let v = policy.mean_operator(&q)?;
    let bellman = mdp.reward() + mdp.apply_transition(&v)? * mdp.gamma() - q;
    Ok(core.restrict(&bellman))
}

/// `⟨μ* − μ^π, r⟩` from exact oracles.
pub fn suboptimality(mdp: &Mdp, policy: &Policy) -> Result<f64> {
    let opt = optimal_values(mdp, OPTIMUM_TOL)?;
    suboptimality_against(mdp, &opt, policy)
}

/// [`suboptimality`] with a precomputed optimum.
pub fn suboptimality_against(mdp: &Mdp, opt: &Optimum, policy: &Policy) -> Result<f64> {
    Ok(opt.optimal_return() - evaluate_policy(mdp, policy)?.return_pi)
}
