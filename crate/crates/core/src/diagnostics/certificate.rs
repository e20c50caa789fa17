use nalgebra::DVector;
use serde::Serialize;

use super::OPTIMUM_TOL;
use crate::error::Result;
use crate::features::{CoreSet, FeatureMap, LinearMdpWitness};
use crate::linalg::sup_norm;
use crate::mdp::{optimal_values, Mdp};

/// Feasibility and objective residuals of the relaxed-LP candidates built from
/// the optimum.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    /// Largest violation among the primal constraints.
    pub primal_residual: f64,
    /// Largest violation among the dual constraints.
    pub dual_residual: f64,
    /// `|⟨λ, U r⟩ − (1 − γ)⟨ν₀, V*⟩|`.
    pub objective_gap: f64,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Residual of `Φᵀ Uᵀ λ = Φᵀ u` on its own.
    pub feature_match_residual: f64,
    /// Residual of `Eᵀ u = γ Pᵀ Uᵀ λ + (1 − γ) ν₀`.
    pub flow_residual: f64,
    /// Names of the constraints above `tol`.
    pub violations: Vec<String>,
    pub tol: f64,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Builds `λ = Bᵀ μ*`, `u = μ*` and `V = V*`, `θ = ϑ + γ W V*` and checks
/// feasibility of both in the relaxed LP and equality of the objectives.
pub fn certificate_check_relaxed_lp(
    mdp: &Mdp,
    phi: &FeatureMap,
    core: &CoreSet,
    witness: &LinearMdpWitness,
    tol: f64,
) -> Result<CertificateReport> {
    let opt = optimal_values(mdp, OPTIMUM_TOL)?;
    let gamma = mdp.gamma();
    let u = opt.mu_star.clone();
    let lambda = core.interp().transpose() * &u;
    let embedded = core.embed(&lambda);

    let phi_t = phi.matrix().transpose();
    let feature_match_residual = sup_norm(&(&phi_t * &embedded - &phi_t * &u));
    let flow_residual = sup_norm(
        &(mdp.aggregate_over_actions(&u)?
            - mdp.apply_transition_adjoint(&embedded)? * gamma
            - mdp.nu0() * (1.0 - gamma)),
    );
    let negativity = lambda.iter().chain(u.iter()).fold(0.0_f64, |acc, v| acc.max(-v));
    let primal_residual = feature_match_residual.max(flow_residual).max(negativity);

    let v = opt.v_star.clone();
    let theta = witness.q_parameter(gamma, &v);
    let q_theta = phi.q_values(&theta)?;
    // E V ≥ Φ θ
    let value_dominance = positive_part(&(&q_theta - mdp.expand_values(&v)?));
    // U Φ θ ≥ U (r + γ P V)
    let target = mdp.reward() + mdp.apply_transition(&v)? * gamma;
    let core_bellman = positive_part(&core.restrict(&(target - &q_theta)));
    let dual_residual = value_dominance.max(core_bellman);

    let primal_objective = lambda.dot(&core.restrict(mdp.reward()));
    let dual_objective = (1.0 - gamma) * mdp.nu0().dot(&v);
    let objective_gap = (primal_objective - dual_objective).abs();

    let mut violations = Vec::new();
    for (name, value) in [
        ("primal: Φᵀ Uᵀ λ = Φᵀ u", feature_match_residual),
        ("primal: Eᵀ u = γ Pᵀ Uᵀ λ + (1 − γ) ν₀", flow_residual),
        ("primal: nonnegativity", negativity),
        ("dual: E V ≥ Φ θ", value_dominance),
        ("dual: U Φ θ ≥ U (r + γ P V)", core_bellman),
        ("objectives match", objective_gap),
    ] {
        if value > tol || value.is_nan() {
            violations.push(format!("{name} (residual {value:e})"));
        }
    }
    Ok(CertificateReport {
        primal_residual,
        dual_residual,
        objective_gap,
        primal_objective,
        dual_objective,
        feature_match_residual,
        flow_residual,
        violations,
        tol,
    })
}

fn positive_part(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(*x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{fit_interpolation, gen_linear_mdp, LinearInstance};

    #[test]
    fn toggle_certificate() {
        let inst = LinearInstance::toggle(0.5).unwrap();
        let rep = certificate_check_relaxed_lp(&inst.mdp, &inst.features, &inst.core, &inst.witness, 1e-10).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations);
        assert!((rep.primal_objective - 0.5).abs() <= 1e-10);
        assert!((rep.dual_objective - 0.5).abs() <= 1e-10);
    }

    #[test]
    fn dropping_a_core_pair_breaks_feature_matching() {
        let mut worst = 0.0_f64;
        for seed in 0..10 {
            let inst = gen_linear_mdp(seed, 8, 2, 4, 0.8).unwrap();
            let kept = &inst.core.core_indices()[1..];
            let broken = fit_interpolation(&inst.features, kept).unwrap();
            let rep = certificate_check_relaxed_lp(&inst.mdp, &inst.features, &broken, &inst.witness, 1e-8).unwrap();
            worst = worst.max(rep.feature_match_residual);
        }
        assert!(worst > 1e-4, "{worst}");
    }
}
