//! Best ∞-norm fits inside a Euclidean ball, and the approximation-error
//! functionals built on them.
//!
//! Exact Chebyshev approximation is a linear program. We use Lawson's
//! iteratively reweighted least squares instead, which produces both an
//! achieved value (an upper bound on the infimum) and a weighted-least-squares
//! lower bound; iteration stops once the two agree to 1e-8. When the
//! unconstrained solution leaves the ball we fall back to projected
//! subgradient descent. Every reported value is the sup-norm residual of a
//! returned, feasible parameter vector, so it never understates the infimum.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FeatureMap;
use crate::error::{check_len, contract, Result};
use crate::linalg::sup_norm;
use crate::mdp::{evaluate_policy, Mdp, Policy};

const LAWSON_MAX_ITERS: usize = 20_000;
const LAWSON_GAP: f64 = 1e-8;
const SUBGRADIENT_ITERS: usize = 10_000;

/// How a [`ChebyshevFit`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitPath {
    /// The unconstrained minimax fit already lies in the ball.
    Unconstrained,
    /// Best iterate of projected subgradient descent on the ball.
    Subgradient,
}

#[derive(Debug, Clone)]
pub struct ChebyshevFit {
    pub theta: DVector<f64>,
    /// `‖y − Φ θ‖_∞` at `theta`.
    pub value: f64,
    /// Weighted least-squares lower bound on the unconstrained minimax value.
    pub lower_bound: f64,
    pub path: FitPath,
}

fn project_ball(theta: &mut DVector<f64>, radius: f64) {
    let n = theta.norm();
    if n > radius {
        *theta *= radius / n;
    }
}

fn weighted_lstsq(phi: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Option<DVector<f64>> {
    let mut a = phi.clone();
    let mut b = y.clone();
    for (i, wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        a.row_mut(i).scale_mut(s);
        b[i] *= s;
    }
    a.svd(true, true).solve(&b, 1e-13).ok()
}

/// Approximately minimises `‖y − Φ θ‖_∞` over `‖θ‖₂ ≤ radius`.
pub fn chebyshev_fit(phi: &FeatureMap, y: &DVector<f64>, radius: f64) -> Result<ChebyshevFit> {
    check_len("fit target", phi.num_pairs(), y.len())?;
    contract!(radius > 0.0, "ball radius must be positive, got {radius}");
    let mat = phi.matrix();
    let n = y.len();

    let mut weights = vec![1.0 / n as f64; n];
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut lower = 0.0_f64;
    for _ in 0..LAWSON_MAX_ITERS {
        let Some(theta) = weighted_lstsq(mat, y, &weights) else {
            break;
        };
        let res = y - mat * &theta;
        let value = sup_norm(&res);
        let weighted: f64 = weights.iter().zip(res.iter()).map(|(w, r)| w * r * r).sum();
        lower = lower.max(weighted.sqrt());
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, theta));
        }
        let best_value = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        if best_value - lower <= LAWSON_GAP {
            break;
        }
        let total: f64 = weights.iter().zip(res.iter()).map(|(w, r)| w * r.abs()).sum();
        if total <= 0.0 {
            break;
        }
        for (w, r) in weights.iter_mut().zip(res.iter()) {
            *w *= r.abs() / total;
        }
    }
    let (value, theta) = best.unwrap_or_else(|| (sup_norm(y), DVector::zeros(phi.dim())));
    if theta.norm() <= radius {
        return Ok(ChebyshevFit {
            theta,
            value,
            lower_bound: lower,
            path: FitPath::Unconstrained,
        });
    }

    // Projected subgradient on the ball, step D/√k along the normalised
    // subgradient, starting from the radial projection of the free fit.
    let mut current = theta;
    project_ball(&mut current, radius);
    let mut best_theta = current.clone();
    let mut best_value = sup_norm(&(y - mat * &current));
    let zero_value = sup_norm(y);
    if zero_value < best_value {
        best_value = zero_value;
        best_theta = DVector::zeros(phi.dim());
    }
    for k in 1..=SUBGRADIENT_ITERS {
        let res = y - mat * &current;
        let (i_max, r_max) =
            res.iter().enumerate().fold(
                (0, 0.0_f64),
                |acc, (i, r)| if r.abs() > acc.1.abs() { (i, *r) } else { acc },
            );
        // ∂/∂θ |y_i − φ_iᵀθ| = −sign(r_i) φ_i
        let mut g = phi.row(i_max) * (-r_max.signum());
        let gn = g.norm();
        if gn == 0.0 {
            break;
        }
        g /= gn;
        current -= g * (radius / (k as f64).sqrt());
        project_ball(&mut current, radius);
        let value = sup_norm(&(y - mat * &current));
        if value < best_value {
            best_value = value;
            best_theta = current.clone();
        }
    }
    Ok(ChebyshevFit {
        theta: best_theta,
        value: best_value,
        lower_bound: lower,
        path: FitPath::Subgradient,
    })
}

/// `ε_π = inf_{‖θ‖ ≤ D} ‖Q^π − Φ θ‖_∞`, reported as the achieved value of
/// [`chebyshev_fit`] together with its witness.
pub fn q_approx_error(mdp: &Mdp, phi: &FeatureMap, policy: &Policy, d_gamma: f64) -> Result<ChebyshevFit> {
    contract!(d_gamma > 0.0, "D_gamma must be positive");
    let ex = evaluate_policy(mdp, policy)?;
    chebyshev_fit(phi, &ex.q_pi, d_gamma)
}

/// `inf_{‖θ‖ ≤ D} ‖r + γ P M^π Φ θ' − Φ θ‖_∞` for one `(π, θ')`.
pub fn bellman_fit_error(
    mdp: &Mdp,
    phi: &FeatureMap,
    policy: &Policy,
    theta_prime: &DVector<f64>,
    d_gamma: f64,
) -> Result<ChebyshevFit> {
    let v = policy.mean_operator(&phi.q_values(theta_prime)?)?;
    let target = mdp.reward() + mdp.apply_transition(&v)? * mdp.gamma();
    chebyshev_fit(phi, &target, d_gamma)
}

/// Sampled estimate of the inherent Bellman error.
///
/// Draws `n_policies` flat-Dirichlet policies, each paired with a uniform
/// direction on the `D`-sphere for `θ'`, and returns the largest inner fit
/// value. This lower-bounds the supremum over `(π, θ')` while each inner term
/// upper-bounds its infimum over `θ`.
pub fn ibe_estimate(mdp: &Mdp, phi: &FeatureMap, d_gamma: f64, n_policies: usize, seed: u64) -> Result<f64> {
    contract!(n_policies >= 1, "need at least one sampled policy");
    contract!(d_gamma > 0.0, "D_gamma must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..n_policies {
        let policy = Policy::random(&mut rng, mdp.num_states(), mdp.num_actions());
        let mut dir = DVector::from_fn(phi.dim(), |_, _| StandardNormal.sample(&mut rng));
        let norm: f64 = dir.norm();
        dir *= d_gamma / norm;
        let fit = bellman_fit_error(mdp, phi, &policy, &dir, d_gamma)?;
        worst = worst.max(fit.value);
    }
    Ok(worst)
}
