//! Finite discounted MDPs and their exact oracles.
//!
//! State-action pairs are laid out x-major, a-minor: the pair `(x, a)` lives at
//! index `x * num_actions + a` in every state-action vector and in every row
//! index of the transition and feature matrices.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, contract, Error, Result};
use crate::linalg::{flat_dirichlet, lu_solve, sup_norm};

const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite discounted MDP with a deterministic reward table.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    nu0: DVector<f64>,
    reward: DVector<f64>,
    /// `(X·A) × X`, row `(x, a)` is `P(· | x, a)`.
    transition: DMatrix<f64>,
}

/// On-disk layout of an [`Mdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub nu0: Vec<f64>,
    pub reward: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

impl Mdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        nu0: DVector<f64>,
        reward: DVector<f64>,
        transition: DMatrix<f64>,
    ) -> Result<Self> {
        contract!(
            num_states >= 1 && num_actions >= 1,
            "need at least one state and one action"
        );
        contract!((0.0..1.0).contains(&gamma), "discount must lie in [0, 1), got {gamma}");
        let xa = num_states * num_actions;
        check_len("nu0", num_states, nu0.len())?;
        check_len("reward", xa, reward.len())?;
        check_len("transition rows", xa, transition.nrows())?;
        check_len("transition columns", num_states, transition.ncols())?;
        check_distribution("nu0", nu0.as_slice())?;
        for (i, r) in reward.iter().enumerate() {
            contract!((0.0..=1.0).contains(r), "reward[{i}] = {r} outside [0, 1]");
        }
        for i in 0..xa {
            let row: Vec<f64> = transition.row(i).iter().copied().collect();
            check_distribution("transition row", &row)?;
        }
        Ok(Self {
            num_states,
            num_actions,
            gamma,
            nu0,
            reward,
            transition,
        })
    }

    /// Two states, actions `stay` (0) and `go` (1); `go` flips the state.
    /// Reward is 1 in state 1 and the process starts in state 0.
    pub fn toggle(gamma: f64) -> Result<Self> {
        let transition = DMatrix::from_row_slice(
            4,
            2,
            &[
                1.0, 0.0, // (0, stay)
                0.0, 1.0, // (0, go)
                0.0, 1.0, // (1, stay)
                1.0, 0.0, // (1, go)
            ],
        );
        Self::new(
            2,
            2,
            gamma,
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]),
            transition,
        )
    }

    /// A dense random MDP: flat-Dirichlet transition rows and initial
    /// distribution, uniform rewards in `[0, 1]`.
    pub fn random(seed: u64, num_states: usize, num_actions: usize, gamma: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xa = num_states * num_actions;
        let mut transition = DMatrix::zeros(xa, num_states);
        for i in 0..xa {
            let row = flat_dirichlet(&mut rng, num_states);
            for (j, p) in row.into_iter().enumerate() {
                transition[(i, j)] = p;
            }
        }
        let reward = DVector::from_fn(xa, |_, _| rng.random::<f64>());
        let nu0 = DVector::from_vec(flat_dirichlet(&mut rng, num_states));
        Self::new(num_states, num_actions, gamma, nu0, reward, transition)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nu0(&self) -> &DVector<f64> {
        &self.nu0
    }

    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    #[inline]
    pub fn pair_index(&self, x: usize, a: usize) -> usize {
        x * self.num_actions + a
    }

    /// `(P v)(x, a) = Σ_{x'} P(x'|x, a) v(x')`.
    pub fn apply_transition(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("state vector", self.num_states, v.len())?;
        Ok(&self.transition * v)
    }

    /// `(Pᵀ u)(x) = Σ_{x', a'} P(x | x', a') u(x', a')`.
    pub fn apply_transition_adjoint(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("state-action vector", self.num_pairs(), u.len())?;
        Ok(self.transition.tr_mul(u))
    }

    pub fn expand_values(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        expand_values(v, self.num_states, self.num_actions)
    }

    pub fn aggregate_over_actions(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        aggregate_over_actions(u, self.num_states, self.num_actions)
    }

    pub fn to_file(&self) -> MdpFile {
        MdpFile {
            num_states: self.num_states,
            num_actions: self.num_actions,
            gamma: self.gamma,
            nu0: self.nu0.iter().copied().collect(),
            reward: self.reward.iter().copied().collect(),
            transition: (0..self.num_pairs())
                .map(|i| self.transition.row(i).iter().copied().collect())
                .collect(),
        }
    }

    pub fn from_file(file: MdpFile) -> Result<Self> {
        let xa = file.num_states * file.num_actions;
        check_len("transition rows", xa, file.transition.len())?;
        let mut transition = DMatrix::zeros(xa, file.num_states);
        for (i, row) in file.transition.iter().enumerate() {
            check_len("transition columns", file.num_states, row.len())?;
            for (j, p) in row.iter().enumerate() {
                transition[(i, j)] = *p;
            }
        }
        Self::new(
            file.num_states,
            file.num_actions,
            file.gamma,
            DVector::from_vec(file.nu0),
            DVector::from_vec(file.reward),
            transition,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    for (i, x) in p.iter().enumerate() {
        contract!(x.is_finite() && *x >= 0.0, "{what}[{i}] = {x} is not a probability");
    }
    let s: f64 = p.iter().sum();
    contract!((s - 1.0).abs() <= STOCHASTIC_TOL, "{what} sums to {s}, expected 1");
    Ok(())
}

/// `(E v)(x, a) = v(x)`.
pub fn expand_values(v: &DVector<f64>, num_states: usize, num_actions: usize) -> Result<DVector<f64>> {
    check_len("state vector", num_states, v.len())?;
    Ok(DVector::from_fn(num_states * num_actions, |i, _| v[i / num_actions]))
}

/// `(Eᵀ u)(x) = Σ_a u(x, a)`.
pub fn aggregate_over_actions(u: &DVector<f64>, num_states: usize, num_actions: usize) -> Result<DVector<f64>> {
    check_len("state-action vector", num_states * num_actions, u.len())?;
    Ok(DVector::from_fn(num_states, |x, _| {
        (0..num_actions).map(|a| u[x * num_actions + a]).sum()
    }))
}

/// `(M* Q)(x) = max_a Q(x, a)`.
pub fn max_operator(q: &DVector<f64>, num_actions: usize) -> Result<DVector<f64>> {
    contract!(
        num_actions > 0 && q.len().is_multiple_of(num_actions),
        "state-action vector of length {} does not split into {num_actions} actions",
        q.len()
    );
    let x = q.len() / num_actions;
    Ok(DVector::from_fn(x, |s, _| {
        (0..num_actions)
            .map(|a| q[s * num_actions + a])
            .fold(f64::NEG_INFINITY, f64::max)
    }))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// A stationary stochastic policy stored as an `X × A` row-stochastic table.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: DMatrix<f64>,
}

impl Policy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for x in 0..probs.nrows() {
            let row: Vec<f64> = probs.row(x).iter().copied().collect();
            check_distribution("policy row", &row)?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut probs = DMatrix::zeros(actions.len(), num_actions);
        for (x, &a) in actions.iter().enumerate() {
            contract!(a < num_actions, "action {a} out of range at state {x}");
            probs[(x, a)] = 1.0;
        }
        Ok(Self { probs })
    }

    /// Random rows drawn from the flat Dirichlet distribution.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize) -> Self {
        let mut probs = DMatrix::zeros(num_states, num_actions);
        for x in 0..num_states {
            for (a, p) in flat_dirichlet(rng, num_actions).into_iter().enumerate() {
                probs[(x, a)] = p;
            }
        }
        Self { probs }
    }

    /// Deterministic greedy policy on `q`, ties to the lowest action index.
    pub fn greedy(q: &DVector<f64>, num_actions: usize) -> Result<Self> {
        contract!(
            num_actions >= 1 && q.len().is_multiple_of(num_actions),
            "q does not split into {num_actions} actions"
        );
        let actions: Vec<usize> = (0..q.len() / num_actions)
            .map(|x| argmax_lowest((0..num_actions).map(|a| q[x * num_actions + a])))
            .collect();
        Self::deterministic(&actions, num_actions)
    }

    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[(x, a)]
    }

    pub fn row(&self, x: usize) -> Vec<f64> {
        self.probs.row(x).iter().copied().collect()
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// `(M^π Q)(x) = Σ_a π(a|x) Q(x, a)`.
    pub fn mean_operator(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let (x, a) = self.probs.shape();
        check_len("state-action vector", x * a, q.len())?;
        Ok(DVector::from_fn(x, |s, _| {
            (0..a).map(|b| self.probs[(s, b)] * q[s * a + b]).sum()
        }))
    }

    /// `M^π` as an `X × (X·A)` matrix.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let (x, a) = self.probs.shape();
        let mut m = DMatrix::zeros(x, x * a);
        for s in 0..x {
            for b in 0..a {
                m[(s, s * a + b)] = self.probs[(s, b)];
            }
        }
        m
    }

    /// `(ν ∘ π)(x, a) = ν(x) π(a|x)`.
    pub fn compose(&self, nu: &DVector<f64>) -> Result<DVector<f64>> {
        let (x, a) = self.probs.shape();
        check_len("state distribution", x, nu.len())?;
        Ok(DVector::from_fn(x * a, |i, _| nu[i / a] * self.probs[(i / a, i % a)]))
    }
}

/// Exact value functions and occupancy measures of one policy.
#[derive(Debug, Clone)]
pub struct ExactQuantities {
    pub q_pi: DVector<f64>,
    pub v_pi: DVector<f64>,
    pub mu_pi: DVector<f64>,
    pub nu_pi: DVector<f64>,
    pub return_pi: f64,
    /// `‖Q − r − γ P M^π Q‖_∞` at the solution.
    pub bellman_residual: f64,
    /// `‖Eᵀμ − (1−γ)ν₀ − γ Pᵀμ‖_∞` at the solution.
    pub flow_residual: f64,
}

/// Exact policy evaluation by two dense LU solves.
pub fn evaluate_policy(mdp: &Mdp, policy: &Policy) -> Result<ExactQuantities> {
    check_len("policy states", mdp.num_states(), policy.num_states())?;
    check_len("policy actions", mdp.num_actions(), policy.num_actions())?;
    let gamma = mdp.gamma();
    let xa = mdp.num_pairs();
    let x = mdp.num_states();
    let m_pi = policy.mean_matrix();

    // (I − γ P M^π) Q = r
    let lhs = DMatrix::identity(xa, xa) - (mdp.transition() * &m_pi) * gamma;
    let q_pi = lu_solve(lhs, mdp.reward()).ok_or(Error::Solve("action-value system"))?;
    let v_pi = &m_pi * &q_pi;

    // (I − γ (M^π P)ᵀ) ν = (1 − γ) ν₀
    let state_kernel = &m_pi * mdp.transition();
    let lhs = DMatrix::identity(x, x) - state_kernel.transpose() * gamma;
    let mut nu_pi = lu_solve(lhs, &(mdp.nu0() * (1.0 - gamma))).ok_or(Error::Solve("occupancy system"))?;
    for v in nu_pi.iter_mut() {
        // round-off on unreachable states
        if *v < 0.0 && *v > -1e-13 {
            *v = 0.0;
        }
    }
    let mu_pi = policy.compose(&nu_pi)?;
    let return_pi = mu_pi.dot(mdp.reward());

    let bellman_residual = sup_norm(&(&q_pi - mdp.reward() - mdp.apply_transition(&v_pi)? * gamma));
    let flow_residual = sup_norm(
        &(mdp.aggregate_over_actions(&mu_pi)?
            - mdp.nu0() * (1.0 - gamma)
            - mdp.apply_transition_adjoint(&mu_pi)? * gamma),
    );
    Ok(ExactQuantities {
        q_pi,
        v_pi,
        mu_pi,
        nu_pi,
        return_pi,
        bellman_residual,
        flow_residual,
    })
}

/// Optimal action values, an optimal deterministic policy and its occupancy measure.
#[derive(Debug, Clone)]
pub struct Optimum {
    pub q_star: DVector<f64>,
    pub v_star: DVector<f64>,
    pub pi_star: Policy,
    pub mu_star: DVector<f64>,
    /// Exact evaluation of `pi_star`.
    pub eval: ExactQuantities,
}

impl Optimum {
    pub fn optimal_return(&self) -> f64 {
        self.eval.return_pi
    }
}

/// Value iteration on `Q` until the sup-norm update drops below
/// `tol (1 − γ) / (2γ)`, greedy extraction, then exact policy-iteration
/// polishing so that `pi_star` is optimal rather than `tol`-optimal.
/// The returned `q_star` is the exact action-value of `pi_star`.
pub fn optimal_values(mdp: &Mdp, tol: f64) -> Result<Optimum> {
    contract!(tol > 0.0, "tolerance must be positive, got {tol}");
    let gamma = mdp.gamma();
    let a = mdp.num_actions();
    let mut q = mdp.reward().clone();
    if gamma > 0.0 {
        let threshold = tol * (1.0 - gamma) / (2.0 * gamma);
        loop {
            let v = max_operator(&q, a)?;
            let next = mdp.reward() + mdp.apply_transition(&v)? * gamma;
            let delta = sup_norm(&(&next - &q));
            q = next;
            if delta <= threshold {
                break;
            }
        }
    }

    let mut policy = Policy::greedy(&q, a)?;
    let mut eval = evaluate_policy(mdp, &policy)?;
    // Policy iteration from the VI policy; switch only on strict improvement.
    for _ in 0..10_000 {
        let mut actions = Vec::with_capacity(mdp.num_states());
        let mut changed = false;
        for x in 0..mdp.num_states() {
            let current = argmax_lowest(policy.row(x));
            let cur_val = eval.q_pi[x * a + current];
            let best = argmax_lowest((0..a).map(|b| eval.q_pi[x * a + b]));
            if eval.q_pi[x * a + best] > cur_val + 1e-12 {
                actions.push(best);
                changed = true;
            } else {
                actions.push(current);
            }
        }
        if !changed {
            break;
        }
        policy = Policy::deterministic(&actions, a)?;
        eval = evaluate_policy(mdp, &policy)?;
    }
    Ok(Optimum {
        q_star: eval.q_pi.clone(),
        v_star: eval.v_pi.clone(),
        mu_star: eval.mu_pi.clone(),
        pi_star: policy,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn toggle_transition_indexes_values() {
        let mdp = Mdp::toggle(0.5).unwrap();
        let pv = mdp.apply_transition(&DVector::from_vec(vec![0.0, 2.0])).unwrap();
        assert_eq!(pv[mdp.pair_index(0, 1)], 2.0);
        assert_eq!(pv[mdp.pair_index(0, 0)], 0.0);
        assert_eq!(pv[mdp.pair_index(1, 0)], 2.0);
        assert_eq!(pv[mdp.pair_index(1, 1)], 0.0);
    }

    #[test]
    fn constant_values_stay_constant() {
        let mdp = Mdp::random(3, 5, 3, 0.9).unwrap();
        let pv = mdp.apply_transition(&DVector::from_element(5, 1.7)).unwrap();
        assert!(pv.iter().all(|x| close(*x, 1.7, 1e-14)));
    }

    #[test]
    fn transition_matches_double_loop() {
        let mdp = Mdp::random(7, 3, 2, 0.9).unwrap();
        let v = DVector::from_vec(vec![0.3, -1.2, 2.5]);
        let pv = mdp.apply_transition(&v).unwrap();
        for x in 0..3 {
            for a in 0..2 {
                let mut s = 0.0;
                for y in 0..3 {
                    s += mdp.transition()[(mdp.pair_index(x, a), y)] * v[y];
                }
                assert!(close(pv[mdp.pair_index(x, a)], s, 1e-14));
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mdp = Mdp::toggle(0.5).unwrap();
        assert!(matches!(
            mdp.apply_transition(&DVector::zeros(3)),
            Err(Error::Dimension { .. })
        ));
        assert!(mdp.aggregate_over_actions(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn expand_is_x_major() {
        let ev = expand_values(&DVector::from_vec(vec![1.0, 2.0]), 2, 2).unwrap();
        assert_eq!(ev.as_slice(), &[1.0, 1.0, 2.0, 2.0]);
        let back = aggregate_over_actions(&ev, 2, 2).unwrap();
        assert_eq!(back.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_and_max_operators() {
        let q = DVector::from_vec(vec![0.0, 2.0, 5.0, 1.0]);
        let uni = Policy::uniform(2, 2);
        assert_eq!(uni.mean_operator(&q).unwrap()[0], 1.0);
        assert_eq!(max_operator(&q, 2).unwrap().as_slice(), &[2.0, 5.0]);
        let det = Policy::deterministic(&[1, 1], 2).unwrap();
        assert_eq!(det.mean_operator(&q).unwrap().as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn rejects_bad_mdps() {
        let bad = Mdp::new(
            1,
            1,
            0.5,
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1.5]),
            DMatrix::from_element(1, 1, 1.0),
        );
        assert!(matches!(bad, Err(Error::Contract(_))));
        let bad = Mdp::new(
            1,
            1,
            0.5,
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![0.5]),
            DMatrix::from_element(1, 1, 0.9),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn toggle_evaluation_matches_geometric_series() {
        // go at 0, stay at 1: from 0 the rewards are 0, 1, 1, ... so
        // V(0) = γ/(1−γ) = 1, V(1) = 1/(1−γ) = 2 and μ splits 1−γ / γ.
        let mdp = Mdp::toggle(0.5).unwrap();
        let pi = Policy::deterministic(&[1, 0], 2).unwrap();
        let ex = evaluate_policy(&mdp, &pi).unwrap();
        assert!(close(ex.v_pi[0], 1.0, 1e-12));
        assert!(close(ex.v_pi[1], 2.0, 1e-12));
        assert!(close(ex.mu_pi[mdp.pair_index(0, 1)], 0.5, 1e-12));
        assert!(close(ex.mu_pi[mdp.pair_index(1, 0)], 0.5, 1e-12));
        assert!(close(ex.return_pi, 0.5, 1e-12));
    }

    #[test]
    fn single_state_geometric_series() {
        for gamma in [0.0, 0.3, 0.9, 0.99] {
            let mdp = Mdp::new(
                1,
                1,
                gamma,
                DVector::from_vec(vec![1.0]),
                DVector::from_vec(vec![1.0]),
                DMatrix::from_element(1, 1, 1.0),
            )
            .unwrap();
            let ex = evaluate_policy(&mdp, &Policy::uniform(1, 1)).unwrap();
            assert!(close(ex.v_pi[0], 1.0 / (1.0 - gamma), 1e-10));
            assert!(close(ex.mu_pi[0], 1.0, 1e-12));
            assert!(close(ex.return_pi, 1.0, 1e-12));
        }
    }

    #[test]
    fn toggle_optimum() {
        let mdp = Mdp::toggle(0.5).unwrap();
        let opt = optimal_values(&mdp, 1e-10).unwrap();
        assert!(close(opt.v_star[0], 1.0, 1e-10));
        assert!(close(opt.v_star[1], 2.0, 1e-10));
        assert_eq!(opt.pi_star.row(0), vec![0.0, 1.0]);
        assert_eq!(opt.pi_star.row(1), vec![1.0, 0.0]);
        assert!(close(opt.optimal_return(), 0.5, 1e-12));
    }

    #[test]
    fn zero_discount_is_greedy_on_reward() {
        let mdp = Mdp::random(11, 4, 3, 0.0).unwrap();
        let opt = optimal_values(&mdp, 1e-9).unwrap();
        assert!(sup_norm(&(&opt.q_star - mdp.reward())) < 1e-15);
        let greedy = Policy::greedy(mdp.reward(), 3).unwrap();
        assert_eq!(opt.pi_star, greedy);
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        let mdp = Mdp::random(5, 4, 3, 0.87).unwrap();
        let back = Mdp::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(mdp, back);
    }
}
