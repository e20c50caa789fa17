use nalgebra::DVector;
use serde::Serialize;

use super::exact_grad_theta;
use super::gap::rounds_of;
use crate::error::{contract, Result};
use crate::features::{CoreSet, FeatureMap};
use crate::linalg::kl_divergence;
use crate::mdp::{Mdp, Policy};
use crate::planner::RunTrace;

/// Realised regret of an exponentiated-gradient (ascent) stream and its bound
/// `D(ω ‖ ω₁) / τ + τ n G² / 2`.
#[derive(Debug, Clone, Serialize)]
pub struct OmdRegretReport {
    pub n: usize,
    /// `max_i Σ_k g_k[i] − Σ_k ⟨ω_k, g_k⟩`.
    pub best_fixed_regret: f64,
    pub best_fixed_index: usize,
    pub best_fixed_bound: f64,
    /// `Σ_k ⟨ω − ω_k, g_k⟩` for each supplied comparator.
    pub comparator_regrets: Vec<f64>,
    pub comparator_bounds: Vec<f64>,
}

impl OmdRegretReport {
    /// Smallest `bound − regret` over all comparators reported.
    pub fn margin(&self) -> f64 {
        self.comparator_regrets
            .iter()
            .zip(&self.comparator_bounds)
            .map(|(r, b)| b - r)
            .fold(self.best_fixed_bound - self.best_fixed_regret, f64::min)
    }
}

/// Audits the stream `(ω_k, g_k)` of an exponentiated-gradient learner with
/// step `tau`, started at `initial`, whose gains satisfy `‖g_k‖_∞ ≤ g_bound`.
pub fn omd_regret_audit(
    iterates: &[Vec<f64>],
    gains: &[Vec<f64>],
    initial: &[f64],
    tau: f64,
    g_bound: f64,
    comparators: &[Vec<f64>],
) -> Result<OmdRegretReport> {
    contract!(
        iterates.len() == gains.len(),
        "iterate and gain streams differ in length"
    );
    contract!(!gains.is_empty(), "empty stream");
    contract!(tau > 0.0, "step must be positive");
    let dim = initial.len();
    let mut cumulative = vec![0.0; dim];
    let mut learner = 0.0;
    for (k, (w, g)) in iterates.iter().zip(gains).enumerate() {
        contract!(
            w.len() == dim && g.len() == dim,
            "round {} has the wrong dimension",
            k + 1
        );
        let gmax = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        contract!(
            gmax <= g_bound * (1.0 + 1e-12),
            "gain {gmax} at round {} exceeds the bound {g_bound}",
            k + 1
        );
        learner += w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        for (c, v) in cumulative.iter_mut().zip(g) {
            *c += v;
        }
    }
    let n = gains.len();
    let variance_term = tau * n as f64 * g_bound * g_bound / 2.0;
    let (best_fixed_index, best_sum) =
        cumulative.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc },
        );
    let best_fixed_bound = -initial[best_fixed_index].ln() / tau + variance_term;

    let mut comparator_regrets = Vec::with_capacity(comparators.len());
    let mut comparator_bounds = Vec::with_capacity(comparators.len());
    for c in comparators {
        contract!(c.len() == dim, "comparator has the wrong dimension");
        let value: f64 = c.iter().zip(&cumulative).map(|(a, b)| a * b).sum();
        comparator_regrets.push(value - learner);
        comparator_bounds.push(kl_divergence(c, initial) / tau + variance_term);
    }
    Ok(OmdRegretReport {
        n,
        best_fixed_regret: best_sum - learner,
        best_fixed_index,
        best_fixed_bound,
        comparator_regrets,
        comparator_bounds,
    })
}

/// Audits the planner's `λ` stream with the sampled gains recorded in the
/// trace, against the comparator `lambda_star`.
pub fn lambda_regret_audit(
    trace: &RunTrace,
    lambda_star: &DVector<f64>,
    eta: f64,
    g_bound: f64,
) -> Result<OmdRegretReport> {
    let m = lambda_star.len();
    let iterates: Vec<Vec<f64>> = trace.rounds.iter().map(|r| r.lambda.clone()).collect();
    let gains: Vec<Vec<f64>> = trace
        .rounds
        .iter()
        .map(|r| {
            let mut g = vec![0.0; m];
            g[r.lambda_grad.0] = r.lambda_grad.1;
            g
        })
        .collect();
    let initial = vec![1.0 / m as f64; m];
    omd_regret_audit(
        &iterates,
        &gains,
        &initial,
        eta,
        g_bound,
        &[lambda_star.iter().copied().collect()],
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SoftmaxRegretReport {
    /// `Σ_x w(x) Reg_x`.
    pub weighted_regret: f64,
    /// `log |A| / β + β T (R D)² / 2`.
    pub bound: f64,
    pub per_state: Vec<f64>,
}

/// Per-state regret of the softmax updates, with gains `Q_t(x, ·) = (Φ θ_t)(x, ·)`,
/// against `comparator` and weighted by `weights` (typically `ν^{π*}`).
pub fn softmax_regret_audit(
    mdp: &Mdp,
    phi: &FeatureMap,
    trace: &RunTrace,
    d_gamma: f64,
    comparator: &Policy,
    weights: &DVector<f64>,
) -> Result<SoftmaxRegretReport> {
    let rounds = rounds_of(phi, mdp.num_actions(), trace)?;
    let a = mdp.num_actions();
    let g_bound = phi.radius() * d_gamma;
    let qs: Vec<DVector<f64>> = rounds.iter().map(|r| phi.q_values(&r.theta)).collect::<Result<_>>()?;
    let uniform = vec![1.0 / a as f64; a];
    let mut per_state = Vec::with_capacity(mdp.num_states());
    let mut bound = 0.0_f64;
    for x in 0..mdp.num_states() {
        let iterates: Vec<Vec<f64>> = rounds.iter().map(|r| r.policy.row(x)).collect();
        let gains: Vec<Vec<f64>> = qs.iter().map(|q| q.rows(x * a, a).iter().copied().collect()).collect();
        let rep = omd_regret_audit(&iterates, &gains, &uniform, trace.beta, g_bound, &[comparator.row(x)])?;
        per_state.push(rep.comparator_regrets[0]);
        let log_a_bound = (a as f64).ln() / trace.beta + trace.beta * rounds.len() as f64 * g_bound * g_bound / 2.0;
        bound = bound.max(log_a_bound);
    }
    let weighted_regret = per_state.iter().zip(weights.iter()).map(|(r, w)| r * w).sum();
    Ok(SoftmaxRegretReport {
        weighted_regret,
        bound,
        per_state,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SgdAuditReport {
    /// `⟨θ_t, ḡ_t⟩ + D ‖ḡ_t‖₂` with `ḡ_t` the exact `θ` gradient of round `t`.
    pub per_round: Vec<f64>,
    pub mean: f64,
    /// `(2D)² / (2 α K) + 2 α R²`.
    pub bound: f64,
}

/// Dual suboptimality of each averaged SGD iterate on the linear objective
/// `θ ↦ ⟨θ, ḡ_t⟩` over the `D_gamma` ball.
pub fn sgd_audit(
    mdp: &Mdp,
    phi: &FeatureMap,
    core: &CoreSet,
    trace: &RunTrace,
    d_gamma: f64,
    alpha: f64,
    inner_steps: usize,
) -> Result<SgdAuditReport> {
    let rounds = rounds_of(phi, mdp.num_actions(), trace)?;
    let mut per_round = Vec::with_capacity(rounds.len());
    for r in &rounds {
        let g = exact_grad_theta(mdp, phi, core, &r.lambda, &r.policy)?;
        per_round.push(r.theta.dot(&g) + d_gamma * g.norm());
    }
    let mean = per_round.iter().sum::<f64>() / per_round.len() as f64;
    let radius = phi.radius();
    Ok(SgdAuditReport {
        per_round,
        mean,
        bound: (2.0 * d_gamma).powi(2) / (2.0 * alpha * inner_steps as f64) + 2.0 * alpha * radius * radius,
    })
}
