//! Global planning by stochastic primal-dual optimisation.
//!
//! Each round `t` runs `K` projected-SGD steps on `θ` (starting from
//! `θ_{t−1}`, averaging the pre-update iterates), one exponentiated-gradient
//! step on the core-set weights `λ`, and a softmax policy update
//! `π_{t+1} ∝ π₁ exp(β Φ Σ_{k≤t} θ_k)`. The state distribution `ν_t`, the
//! state-action weights `u_t` and the value function `V_t` are never
//! materialised; sampling realises them. Every round consumes exactly `K + 1`
//! transition queries.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::features::{CoreSet, FeatureMap};
use crate::mdp::Policy;
use crate::sampling::{cumulative, inverse_cdf, stream_rng, GenerativeModel, Stream};

/// Step sizes, loop lengths and seed of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "K")]
    pub inner_steps: usize,
    pub eta: f64,
    pub beta: f64,
    pub alpha: f64,
    #[serde(rename = "D_gamma")]
    pub d_gamma: f64,
    pub seed: u64,
    pub record_trace: bool,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.rounds >= 1, "T must be at least 1");
        contract!(self.inner_steps >= 1, "K must be at least 1");
        for (name, v) in [
            ("eta", self.eta),
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("D_gamma", self.d_gamma),
        ] {
            contract!(v.is_finite() && v > 0.0, "{name} must be positive and finite, got {v}");
        }
        Ok(())
    }

    /// `T (K + 1)`.
    pub fn transition_budget(&self) -> Option<u64> {
        (self.rounds as u64).checked_mul(self.inner_steps as u64 + 1)
    }
}

/// `√d (1 + γ / (1 − γ))`.
pub fn default_d_gamma(dim: usize, gamma: f64) -> f64 {
    (dim as f64).sqrt() * (1.0 + gamma / (1.0 - gamma))
}

/// `π(a|x) ∝ π₁(a|x) exp(β ⟨φ(x, a), Θ⟩)` with `π₁` uniform.
#[derive(Debug, Clone)]
pub struct SoftmaxPolicy<'a> {
    features: &'a FeatureMap,
    num_actions: usize,
    theta_cum: DVector<f64>,
    beta: f64,
}

impl<'a> SoftmaxPolicy<'a> {
    pub fn new(features: &'a FeatureMap, num_actions: usize, theta_cum: DVector<f64>, beta: f64) -> Result<Self> {
        contract!(
            theta_cum.len() == features.dim(),
            "cumulative parameter has length {}, feature dimension is {}",
            theta_cum.len(),
            features.dim()
        );
        contract!(
            num_actions >= 1 && features.num_pairs().is_multiple_of(num_actions),
            "feature rows do not split into {num_actions} actions"
        );
        Ok(Self {
            features,
            num_actions,
            theta_cum,
            beta,
        })
    }

    /// The uniform initial policy (`Θ = 0`).
    pub fn initial(features: &'a FeatureMap, num_actions: usize, beta: f64) -> Result<Self> {
        Self::new(features, num_actions, DVector::zeros(features.dim()), beta)
    }

    pub fn theta_cum(&self) -> &DVector<f64> {
        &self.theta_cum
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn features(&self) -> &'a FeatureMap {
        self.features
    }

    /// Writes `π(·|x)` into `out` (length `A`), max-subtracted.
    pub fn action_probs_into(&self, x: usize, out: &mut [f64]) {
        let theta = self.theta_cum.as_slice();
        let base = x * self.num_actions;
        let mut max = f64::NEG_INFINITY;
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.beta * self.features.dot(base + a, theta);
            max = max.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    pub fn action_probs(&self, x: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions];
        self.action_probs_into(x, &mut out);
        out
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, rng: &mut R, x: usize, scratch: &mut [f64]) -> usize {
        self.action_probs_into(x, scratch);
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        for (a, p) in scratch.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        scratch.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// `V(x) = Σ_a π(a|x) ⟨φ(x, a), θ⟩` at a single state.
    pub fn value_at(&self, x: usize, theta: &[f64], scratch: &mut [f64]) -> f64 {
        self.action_probs_into(x, scratch);
        let base = x * self.num_actions;
        scratch
            .iter()
            .enumerate()
            .map(|(a, p)| p * self.features.dot(base + a, theta))
            .sum()
    }

    /// Dense `X × A` table.
    pub fn to_policy(&self) -> Policy {
        let num_states = self.features.num_pairs() / self.num_actions;
        let mut probs = nalgebra::DMatrix::zeros(num_states, self.num_actions);
        let mut row = vec![0.0; self.num_actions];
        for x in 0..num_states {
            self.action_probs_into(x, &mut row);
            for (a, p) in row.iter().enumerate() {
                probs[(x, a)] = *p;
            }
        }
        Policy::new(probs).expect("softmax rows are distributions")
    }
}

/// `Π_{B(D)}(θ)`: radial projection onto the Euclidean ball.
pub fn project_ball(theta: &DVector<f64>, radius: f64) -> DVector<f64> {
    let mut out = theta.clone();
    project_ball_in_place(out.as_mut_slice(), radius);
    out
}

#[inline]
fn project_ball_in_place(theta: &mut [f64], radius: f64) {
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > radius {
        let s = radius / norm;
        for v in theta.iter_mut() {
            *v *= s;
        }
    }
}

/// `g̃_θ = (1 − γ) φ(z₀) + γ φ(z̄) − φ(z)` for pair indices `z₀ = (x₀, a₀)`,
/// `z̄ = (x̄, ā)` and the core draw `z = (x, a)`.
pub fn theta_gradient_from_draws(features: &FeatureMap, gamma: f64, z0: usize, zbar: usize, z: usize) -> DVector<f64> {
    let mut out = vec![0.0; features.dim()];
    theta_gradient_into(features, gamma, z0, zbar, z, &mut out);
    DVector::from_vec(out)
}

#[inline]
fn theta_gradient_into(features: &FeatureMap, gamma: f64, z0: usize, zbar: usize, z: usize, out: &mut [f64]) {
    let phi = features.matrix();
    for (j, o) in out.iter_mut().enumerate() {
        *o = (1.0 - gamma) * phi[(z0, j)] + gamma * phi[(zbar, j)] - phi[(z, j)];
    }
}

/// Coefficient of the sparse `λ` gradient: `m [r + γ V_t(y) − Q_t(x, a)]`.
pub fn lambda_gradient_coefficient(m: usize, reward: f64, gamma: f64, v_next: f64, q_xa: f64) -> f64 {
    m as f64 * (reward + gamma * v_next - q_xa)
}

/// Exponentiated-gradient step in the log domain on coordinate `index`,
/// followed by max-subtracted renormalisation. Input and output are
/// normalised log-weights.
pub fn mirror_ascent_step(log_lambda: &[f64], index: usize, coefficient: f64, eta: f64) -> Vec<f64> {
    let mut out = log_lambda.to_vec();
    out[index] += eta * coefficient;
    normalize_log(&mut out);
    out
}

fn normalize_log(log_w: &mut [f64]) {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
    let shift = max + total.ln();
    for l in log_w.iter_mut() {
        *l -= shift;
    }
}

/// `Θ ← Θ + θ_t`.
pub fn policy_update(theta_cum: &DVector<f64>, theta_t: &DVector<f64>) -> DVector<f64> {
    theta_cum + theta_t
}

/// Iterates carried between rounds.
#[derive(Debug, Clone)]
pub struct PlannerState {
    /// 1-based index of the next round.
    pub t: usize,
    /// Normalised log-weights of `λ_t` over the core pairs.
    pub log_lambda: Vec<f64>,
    /// `θ_{t−1}`.
    pub theta_prev: Vec<f64>,
    /// `Σ_{k<t} θ_k`.
    pub theta_cum: Vec<f64>,
    lambda_cdf: Vec<f64>,
    lambda_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
}

impl PlannerState {
    fn new(m: usize, d: usize, seed: u64) -> Self {
        let log_lambda = vec![-(m as f64).ln(); m];
        let mut state = Self {
            t: 1,
            log_lambda,
            theta_prev: vec![0.0; d],
            theta_cum: vec![0.0; d],
            lambda_cdf: Vec::new(),
            lambda_rng: stream_rng(seed, Stream::Lambda),
            policy_rng: stream_rng(seed, Stream::Policy),
        };
        state.refresh_lambda();
        state
    }

    fn refresh_lambda(&mut self) {
        self.lambda_cdf = cumulative(self.log_lambda.iter().map(|l| l.exp()));
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.log_lambda.iter().map(|l| l.exp()).collect()
    }
}

/// One round of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// `λ_t`, the weights used during round `t`.
    pub lambda: Vec<f64>,
    /// `θ_t`, the averaged SGD iterate.
    pub theta: Vec<f64>,
    /// Transition-query counter at the end of the round.
    pub transition_queries: u64,
    /// The sampled `g̃_λ(t)`: core position and coefficient.
    pub lambda_grad: (usize, f64),
}

/// Per-round record of a run plus the output index.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub beta: f64,
    pub rounds: Vec<RoundRecord>,
    pub j: usize,
    pub theta_cum_j: Vec<f64>,
}

impl RunTrace {
    /// `Θ_t = Σ_{k<t} θ_k` for `t = 1..=T+1`.
    pub fn cumulative_thetas(&self) -> Vec<DVector<f64>> {
        let d = self.theta_cum_j.len();
        let mut acc = DVector::zeros(d);
        let mut out = Vec::with_capacity(self.rounds.len() + 1);
        out.push(acc.clone());
        for r in &self.rounds {
            acc = policy_update(&acc, &DVector::from_column_slice(&r.theta));
            out.push(acc.clone());
        }
        out
    }

    /// `π_t` rebuilt from the recorded parameters (`t` is 1-based).
    pub fn policy_at<'a>(&self, features: &'a FeatureMap, num_actions: usize, t: usize) -> Result<SoftmaxPolicy<'a>> {
        contract!(t >= 1 && t <= self.rounds.len() + 1, "round {t} outside the trace");
        let mut acc = DVector::zeros(features.dim());
        for r in &self.rounds[..t - 1] {
            acc = policy_update(&acc, &DVector::from_column_slice(&r.theta));
        }
        SoftmaxPolicy::new(features, num_actions, acc, self.beta)
    }

    /// CSV with columns `t`, `lambda_0..`, `theta_0..`, then the sampled
    /// `λ` gradient as `glambda_index,glambda_value`. Floats are written in
    /// shortest round-trip form.
    pub fn to_csv(&self, preamble: &[String]) -> String {
        let m = self.rounds.first().map_or(0, |r| r.lambda.len());
        let d = self.rounds.first().map_or(0, |r| r.theta.len());
        let mut s = String::new();
        for line in preamble {
            let _ = writeln!(s, "# {line}");
        }
        s.push('t');
        for k in 0..m {
            let _ = write!(s, ",lambda_{k}");
        }
        for j in 0..d {
            let _ = write!(s, ",theta_{j}");
        }
        s.push_str(",glambda_index,glambda_value\n");
        for (i, r) in self.rounds.iter().enumerate() {
            let _ = write!(s, "{}", i + 1);
            for v in r.lambda.iter().chain(&r.theta) {
                let _ = write!(s, ",{v:?}");
            }
            let _ = writeln!(s, ",{},{:?}", r.lambda_grad.0, r.lambda_grad.1);
        }
        s
    }

    /// Parses [`Self::to_csv`] output. `#` lines are skipped. Query counters
    /// are rebuilt as `t (K + 1)`.
    pub fn from_csv(text: &str, beta: f64, inner_steps: usize, j: usize, theta_cum_j: Vec<f64>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty trace".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let m = cols.iter().filter(|c| c.starts_with("lambda_")).count();
        let d = cols.iter().filter(|c| c.starts_with("theta_")).count();
        if cols.first() != Some(&"t") || cols.len() != 3 + m + d {
            return Err(Error::Parse(format!("unexpected trace header: {header}")));
        }
        let mut rounds = Vec::new();
        for (i, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != cols.len() {
                return Err(Error::Parse(format!("trace row {} has {} fields", i + 1, vals.len())));
            }
            let t: usize = vals[0].parse().map_err(|e| Error::Parse(format!("{e}")))?;
            if t != i + 1 {
                return Err(Error::Parse(format!("trace rows out of order at t = {t}")));
            }
            let nums: Vec<f64> = vals[1..1 + m + d]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("{e}"))))
                .collect::<Result<_>>()?;
            let parse_err = |e: &dyn std::fmt::Display| Error::Parse(format!("trace row {t}: {e}"));
            let g_index: usize = vals[1 + m + d].parse().map_err(|e| parse_err(&e))?;
            let g_value: f64 = vals[2 + m + d].parse().map_err(|e| parse_err(&e))?;
            rounds.push(RoundRecord {
                lambda: nums[..m].to_vec(),
                theta: nums[m..].to_vec(),
                transition_queries: (t as u64) * (inner_steps as u64 + 1),
                lambda_grad: (g_index, g_value),
            });
        }
        Ok(Self {
            beta,
            rounds,
            j,
            theta_cum_j,
        })
    }
}

/// Largest gradient magnitudes seen during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradientStats {
    pub max_theta_norm: f64,
    pub max_lambda_abs: f64,
    pub theta_samples: u64,
    pub lambda_samples: u64,
}

/// One planner run in progress.
pub struct Planner<'a> {
    model: GenerativeModel<'a>,
    features: &'a FeatureMap,
    core: &'a CoreSet,
    config: PlannerConfig,
    state: PlannerState,
    stats: GradientStats,
    scratch: Vec<f64>,
}

impl<'a> Planner<'a> {
    pub fn new(
        model: GenerativeModel<'a>,
        features: &'a FeatureMap,
        core: &'a CoreSet,
        config: PlannerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mdp = model.mdp();
        contract!(
            features.num_pairs() == mdp.num_pairs(),
            "feature map has {} rows, MDP has {} state-action pairs",
            features.num_pairs(),
            mdp.num_pairs()
        );
        contract!(
            core.interp().nrows() == mdp.num_pairs(),
            "core set does not match the MDP"
        );
        let state = PlannerState::new(core.size(), features.dim(), config.seed);
        Ok(Self {
            scratch: vec![0.0; mdp.num_actions()],
            model,
            features,
            core,
            config,
            state,
            stats: GradientStats::default(),
        })
    }

    pub fn state(&self) -> &PlannerState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut PlannerState {
        &mut self.state
    }

    pub fn model(&self) -> &GenerativeModel<'a> {
        &self.model
    }

    pub fn stats(&self) -> GradientStats {
        self.stats
    }

    /// Overrides `λ_t` (probabilities) and `Θ_t`; used to probe the samplers
    /// at arbitrary iterates.
    pub fn set_iterates(&mut self, lambda: &[f64], theta_cum: &[f64]) -> Result<()> {
        contract!(lambda.len() == self.core.size(), "lambda has wrong length");
        contract!(theta_cum.len() == self.features.dim(), "theta_cum has wrong length");
        let s: f64 = lambda.iter().sum();
        contract!(
            (s - 1.0).abs() <= 1e-9 && lambda.iter().all(|l| *l >= 0.0),
            "lambda is not on the simplex"
        );
        self.state.log_lambda = lambda.iter().map(|l| l.ln()).collect();
        self.state.refresh_lambda();
        self.state.theta_cum = theta_cum.to_vec();
        Ok(())
    }

    /// `π_t`, the softmax policy of the current round.
    pub fn current_policy(&self) -> SoftmaxPolicy<'a> {
        SoftmaxPolicy {
            features: self.features,
            num_actions: self.model.mdp().num_actions(),
            theta_cum: DVector::from_column_slice(&self.state.theta_cum),
            beta: self.config.beta,
        }
    }

    fn draw_core_pair(&mut self) -> usize {
        let u = self.state.lambda_rng.random::<f64>();
        self.core.core_indices()[inverse_cdf(&self.state.lambda_cdf, u)]
    }

    fn grad_theta_into(&mut self, policy: &SoftmaxPolicy<'_>, out: &mut [f64]) {
        let num_actions = self.model.mdp().num_actions();
        let gamma = self.model.mdp().gamma();
        let x0 = self.model.sample_init();
        let a0 = policy.sample_action(&mut self.state.policy_rng, x0, &mut self.scratch);
        let z = self.draw_core_pair();
        let (_, xbar) = self.model.sample_pair(z);
        let abar = policy.sample_action(&mut self.state.policy_rng, xbar, &mut self.scratch);
        theta_gradient_into(
            self.features,
            gamma,
            x0 * num_actions + a0,
            xbar * num_actions + abar,
            z,
            out,
        );
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.stats.max_theta_norm = self.stats.max_theta_norm.max(norm);
        self.stats.theta_samples += 1;
    }

    /// One draw of `g̃_θ` at the current `(λ_t, π_t)`; consumes one transition query.
    pub fn grad_theta_sample(&mut self) -> DVector<f64> {
        let policy = self.current_policy();
        let mut out = vec![0.0; self.features.dim()];
        self.grad_theta_into(&policy, &mut out);
        DVector::from_vec(out)
    }

    /// `K` projected-SGD steps from `θ_{t−1}`; returns the average of the
    /// iterates `θ^{(1)}, …, θ^{(K)}`.
    pub fn sgd_inner_loop(&mut self) -> DVector<f64> {
        let policy = self.current_policy();
        let d = self.features.dim();
        let k = self.config.inner_steps;
        let mut iterate = self.state.theta_prev.clone();
        let mut sum = vec![0.0; d];
        let mut grad = vec![0.0; d];
        for _ in 0..k {
            for (s, v) in sum.iter_mut().zip(&iterate) {
                *s += v;
            }
            self.grad_theta_into(&policy, &mut grad);
            for (v, g) in iterate.iter_mut().zip(&grad) {
                *v -= self.config.alpha * g;
            }
            project_ball_in_place(&mut iterate, self.config.d_gamma);
        }
        DVector::from_iterator(d, sum.into_iter().map(|s| s / k as f64))
    }

    /// One draw of the sparse `g̃_λ` at `θ_t`: returns the position in the core
    /// set and the coefficient. Consumes one transition query.
    pub fn grad_lambda_sample(&mut self, theta_t: &DVector<f64>) -> (usize, f64) {
        let policy = self.current_policy();
        self.grad_lambda_with(&policy, theta_t.as_slice())
    }

    fn grad_lambda_with(&mut self, policy: &SoftmaxPolicy<'_>, theta_t: &[f64]) -> (usize, f64) {
        let m = self.core.size();
        let gamma = self.model.mdp().gamma();
        let k = self.state.lambda_rng.random_range(0..m);
        let z = self.core.core_indices()[k];
        let (reward, y) = self.model.sample_pair(z);
        let v_next = policy.value_at(y, theta_t, &mut self.scratch);
        let q_xa = self.features.dot(z, theta_t);
        let coeff = lambda_gradient_coefficient(m, reward, gamma, v_next, q_xa);
        self.stats.max_lambda_abs = self.stats.max_lambda_abs.max(coeff.abs());
        self.stats.lambda_samples += 1;
        (k, coeff)
    }

    /// Runs one full round and returns its record.
    pub fn step(&mut self) -> RoundRecord {
        let lambda = self.state.lambda();
        let theta_t = self.sgd_inner_loop();
        let policy = self.current_policy();
        let (k, coeff) = self.grad_lambda_with(&policy, theta_t.as_slice());
        self.state.log_lambda = mirror_ascent_step(&self.state.log_lambda, k, coeff, self.config.eta);
        self.state.refresh_lambda();
        for (c, v) in self.state.theta_cum.iter_mut().zip(theta_t.iter()) {
            *c += v;
        }
        self.state.theta_prev = theta_t.iter().copied().collect();
        self.state.t += 1;
        RoundRecord {
            lambda,
            theta: self.state.theta_prev.clone(),
            transition_queries: self.model.transition_queries(),
            lambda_grad: (k, coeff),
        }
    }
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput<'a> {
    /// `π_J`.
    pub policy: SoftmaxPolicy<'a>,
    pub j: usize,
    pub trace: RunTrace,
    pub transition_queries: u64,
    pub init_queries: u64,
    pub stats: GradientStats,
    /// `Σ_{t≤T} θ_t`.
    pub final_theta_cum: DVector<f64>,
}

/// Runs the planner for `T` rounds from `θ₀ = 0`, uniform `λ₁` and uniform `π₁`.
///
/// `J ~ Unif{1..T}` comes from its own stream, so drawing it before the loop
/// gives the same value as drawing it afterwards; this lets `Θ_J` be captured
/// without keeping every `θ_t` when tracing is off.
pub fn run<'a>(
    model: GenerativeModel<'a>,
    features: &'a FeatureMap,
    core: &'a CoreSet,
    config: &PlannerConfig,
) -> Result<RunOutput<'a>> {
    let mut planner = Planner::new(model, features, core, config.clone())?;
    let mut j_rng = stream_rng(config.seed, Stream::OutputIndex);
    let j = 1 + j_rng.random_range(0..config.rounds);
    let mut theta_cum_j = vec![0.0; features.dim()];
    let mut rounds = Vec::new();
    for t in 1..=config.rounds {
        if t == j {
            theta_cum_j = planner.state.theta_cum.clone();
        }
        let record = planner.step();
        if config.record_trace {
            rounds.push(record);
        }
    }
    let num_actions = planner.model.mdp().num_actions();
    let policy = SoftmaxPolicy::new(
        features,
        num_actions,
        DVector::from_column_slice(&theta_cum_j),
        config.beta,
    )?;
    Ok(RunOutput {
        policy,
        j,
        trace: RunTrace {
            beta: config.beta,
            rounds,
            j,
            theta_cum_j,
        },
        transition_queries: planner.model.transition_queries(),
        init_queries: planner.model.init_queries(),
        stats: planner.stats,
        final_theta_cum: DVector::from_column_slice(&planner.state.theta_cum),
    })
}

/// Problem constants that enter the step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleInputs {
    /// Core-set size `m`.
    pub m: usize,
    /// Feature norm bound `R`.
    pub radius: f64,
    pub d_gamma: f64,
    pub num_actions: usize,
    /// Cap on `D(λ* ‖ λ₁)`; `log m` for uniform `λ₁`.
    pub dkl_bound: f64,
}

impl ScheduleInputs {
    fn validate(&self) -> Result<()> {
        contract!(self.m >= 1 && self.num_actions >= 1, "m and |A| must be at least 1");
        contract!(
            self.m * self.num_actions >= 2,
            "m * |A| must be at least 2 for the inner-loop length to be finite"
        );
        contract!(
            self.radius > 0.0 && self.d_gamma > 0.0,
            "R and D_gamma must be positive"
        );
        contract!(self.dkl_bound >= 0.0, "divergence cap must be non-negative");
        Ok(())
    }

    /// `K = ⌈T / (m² log(m |A|))⌉`.
    pub fn inner_steps(&self, rounds: usize) -> usize {
        let denom = (self.m * self.m) as f64 * ((self.m * self.num_actions) as f64).ln();
        ((rounds as f64 / denom).ceil() as usize).max(1)
    }

    /// Closed-form rates at horizon `T`: each pair of matching terms of the
    /// optimisation-error bound is balanced.
    pub fn config_for(&self, rounds: usize, seed: u64) -> Result<PlannerConfig> {
        self.validate()?;
        contract!(rounds >= 1, "T must be at least 1");
        let t = rounds as f64;
        let m = self.m as f64;
        let r = self.radius;
        let d = self.d_gamma;
        let k = self.inner_steps(rounds);
        let spread = 1.0 + 2.0 * r * d;
        // A zero divergence cap (m = 1 or |A| = 1) makes the rate irrelevant;
        // keep it strictly positive.
        let dkl = self.dkl_bound.max(f64::MIN_POSITIVE);
        let log_a = (self.num_actions as f64).ln().max(f64::MIN_POSITIVE);
        Ok(PlannerConfig {
            rounds,
            inner_steps: k,
            eta: (2.0 * dkl / (t * m * m * spread * spread)).sqrt(),
            beta: (2.0 * log_a / (t * r * r * d * d)).sqrt(),
            alpha: d / (r * (k as f64).sqrt()),
            d_gamma: d,
            seed,
            record_trace: true,
        })
    }

    /// The six-term optimisation-error bound for `config`.
    pub fn optimization_error(&self, config: &PlannerConfig) -> f64 {
        let t = config.rounds as f64;
        let k = config.inner_steps as f64;
        let m = self.m as f64;
        let r = self.radius;
        let d = self.d_gamma;
        let log_a = (self.num_actions as f64).ln();
        let spread = 1.0 + 2.0 * r * d;
        self.dkl_bound / (config.eta * t)
            + log_a / (config.beta * t)
            + 2.0 * d * d / (config.alpha * k)
            + config.eta * m * m * spread * spread / 2.0
            + config.beta * r * r * d * d / 2.0
            + 2.0 * config.alpha * r * r
    }
}

/// Smallest `T` (with the closed-form rates of [`ScheduleInputs::config_for`])
/// whose optimisation-error bound is at most `epsilon`.
pub fn tune_hyperparameters(
    epsilon: f64,
    m: usize,
    radius: f64,
    d_gamma: f64,
    num_actions: usize,
    dkl_bound: f64,
) -> Result<PlannerConfig> {
    contract!(
        epsilon > 0.0 && epsilon.is_finite(),
        "epsilon must be positive, got {epsilon}"
    );
    let inputs = ScheduleInputs {
        m,
        radius,
        d_gamma,
        num_actions,
        dkl_bound,
    };
    inputs.validate()?;
    const MAX_ROUNDS: usize = 1 << 40;
    let meets = |t: usize| -> Result<bool> {
        let cfg = inputs.config_for(t, 0)?;
        if cfg.transition_budget().is_none() {
            return Err(Error::Overflow(format!(
                "epsilon = {epsilon} needs more than 2^64 transition queries"
            )));
        }
        Ok(inputs.optimization_error(&cfg) <= epsilon)
    };
    let mut hi = 1usize;
    while !meets(hi)? {
        if hi >= MAX_ROUNDS {
            return Err(Error::Overflow(format!(
                "epsilon = {epsilon} needs more than 2^40 rounds"
            )));
        }
        hi *= 2;
    }
    let mut lo = hi / 2; // fails (or zero)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if meets(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    inputs.config_for(hi, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{compute_core_residual, LinearInstance};
    use crate::mdp::Mdp;
    use nalgebra::DMatrix;

    fn toggle() -> LinearInstance {
        LinearInstance::toggle(0.5).unwrap()
    }

    fn config(rounds: usize, k: usize) -> PlannerConfig {
        PlannerConfig {
            rounds,
            inner_steps: k,
            eta: 0.01,
            beta: 0.05,
            alpha: 0.1,
            d_gamma: 4.0,
            seed: 17,
            record_trace: true,
        }
    }

    #[test]
    fn projection_cases() {
        let p = project_ball(&DVector::from_vec(vec![3.0, 4.0]), 1.0);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        let inside = DVector::from_vec(vec![0.1, -0.2]);
        assert_eq!(project_ball(&inside, 1.0), inside);
    }

    #[test]
    fn theta_gradient_substitution() {
        let phi = FeatureMap::tabular(4);
        let g = theta_gradient_from_draws(&phi, 0.5, 0, 3, 1);
        assert_eq!(g.as_slice(), &[0.5, -1.0, 0.0, 0.5]);
    }

    #[test]
    fn lambda_coefficient_substitution() {
        assert_eq!(lambda_gradient_coefficient(4, 1.0, 0.5, 2.0, 1.0), 4.0);
    }

    #[test]
    fn mirror_step_closed_form() {
        let half = vec![0.5f64.ln(); 2];
        let out = mirror_ascent_step(&half, 0, 4f64.ln(), 1.0);
        assert!((out[0].exp() - 0.8).abs() < 1e-12);
        assert!((out[1].exp() - 0.2).abs() < 1e-12);
        let same = mirror_ascent_step(&half, 1, 0.0, 3.0);
        assert!((same[1].exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_cumulative_parameter_is_uniform() {
        let phi = FeatureMap::tabular(6);
        let pi = SoftmaxPolicy::initial(&phi, 3, 2.0).unwrap();
        for x in 0..2 {
            for p in pi.action_probs(x) {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn per_state_shift_leaves_softmax_unchanged() {
        // feature 2 is a per-state constant: shifting Θ along it moves every
        // action value of that state by the same amount
        let phi = FeatureMap::new(
            DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.5, 0.5, 0.0, 0.2, 0.8, 0.0]),
            None,
        )
        .unwrap();
        let a = SoftmaxPolicy::new(&phi, 2, DVector::from_vec(vec![0.3, -0.7, 0.0]), 1.5).unwrap();
        let b = SoftmaxPolicy::new(&phi, 2, DVector::from_vec(vec![0.3, -0.7, 5.0]), 1.5).unwrap();
        for x in 0..2 {
            for (p, q) in a.action_probs(x).iter().zip(b.action_probs(x)) {
                assert!((p - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_inner_step_returns_previous_iterate() {
        let inst = toggle();
        let model = GenerativeModel::new(&inst.mdp, 1);
        let mut planner = Planner::new(model, &inst.features, &inst.core, config(1, 1)).unwrap();
        planner.state_mut().theta_prev = vec![0.1, 0.2, 0.3, 0.4];
        let theta = planner.sgd_inner_loop();
        assert_eq!(theta.as_slice(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn inner_iterates_stay_in_ball() {
        let inst = toggle();
        let model = GenerativeModel::new(&inst.mdp, 2);
        let mut cfg = config(30, 50);
        cfg.alpha = 5.0;
        cfg.d_gamma = 0.5;
        let mut planner = Planner::new(model, &inst.features, &inst.core, cfg).unwrap();
        for _ in 0..30 {
            let rec = planner.step();
            let n: f64 = rec.theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= 0.5 + 1e-12);
            let s: f64 = rec.lambda.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn query_accounting_and_determinism() {
        let inst = toggle();
        let cfg = config(25, 7);
        let a = run(
            GenerativeModel::new(&inst.mdp, cfg.seed),
            &inst.features,
            &inst.core,
            &cfg,
        )
        .unwrap();
        let b = run(
            GenerativeModel::new(&inst.mdp, cfg.seed),
            &inst.features,
            &inst.core,
            &cfg,
        )
        .unwrap();
        assert_eq!(a.transition_queries, 25 * 8);
        assert_eq!(a.init_queries, 25 * 7);
        assert_eq!(a.j, b.j);
        assert_eq!(a.policy.theta_cum(), b.policy.theta_cum());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.rounds.len(), 25);
        assert_eq!(a.trace.rounds[24].transition_queries, 200);
    }

    #[test]
    fn trace_policies_match_live_policies() {
        let inst = toggle();
        let model = GenerativeModel::new(&inst.mdp, 4);
        let mut planner = Planner::new(model, &inst.features, &inst.core, config(20, 5)).unwrap();
        let mut rounds = Vec::new();
        let mut live = Vec::new();
        for _ in 0..20 {
            live.push(planner.current_policy().to_policy());
            rounds.push(planner.step());
        }
        let trace = RunTrace {
            beta: 0.05,
            rounds,
            j: 1,
            theta_cum_j: vec![0.0; 4],
        };
        for (t, pi) in live.iter().enumerate() {
            let rebuilt = trace.policy_at(&inst.features, 2, t + 1).unwrap().to_policy();
            assert!((rebuilt.probs() - pi.probs()).amax() <= 1e-12);
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let inst = toggle();
        let cfg = config(12, 3);
        let out = run(GenerativeModel::new(&inst.mdp, 9), &inst.features, &inst.core, &cfg).unwrap();
        let text = out.trace.to_csv(&["instance: toggle".into()]);
        let back = RunTrace::from_csv(&text, cfg.beta, 3, out.j, out.trace.theta_cum_j.clone()).unwrap();
        assert_eq!(back, out.trace);
    }

    #[test]
    fn output_index_parameter_is_prefix_sum() {
        let inst = toggle();
        let cfg = config(40, 3);
        let out = run(GenerativeModel::new(&inst.mdp, 3), &inst.features, &inst.core, &cfg).unwrap();
        let prefix = &out.trace.cumulative_thetas()[out.j - 1];
        assert!((prefix - out.policy.theta_cum()).amax() < 1e-12);
        assert!(out.j >= 1 && out.j <= 40);
    }

    #[test]
    fn tuner_inner_loop_formula() {
        let inputs = ScheduleInputs {
            m: 2,
            radius: 1.0,
            d_gamma: 2.0,
            num_actions: 2,
            dkl_bound: 2f64.ln(),
        };
        assert_eq!(inputs.inner_steps(10_000), 1804);
    }

    #[test]
    fn tuner_is_self_consistent() {
        for eps in [2.0, 1.0, 0.5, 0.3] {
            let cfg = tune_hyperparameters(eps, 4, 1.0, 4.0, 2, 4f64.ln()).unwrap();
            let inputs = ScheduleInputs {
                m: 4,
                radius: 1.0,
                d_gamma: 4.0,
                num_actions: 2,
                dkl_bound: 4f64.ln(),
            };
            assert!(inputs.optimization_error(&cfg) <= eps);
            if cfg.rounds > 1 {
                let prev = inputs.config_for(cfg.rounds - 1, 0).unwrap();
                assert!(inputs.optimization_error(&prev) > eps);
            }
        }
    }

    #[test]
    fn tuner_reports_overflow() {
        let err = tune_hyperparameters(1e-12, 4, 1.0, 4.0, 2, 4f64.ln()).unwrap_err();
        assert!(matches!(err, Error::Overflow(_)));
    }

    #[test]
    fn planner_rejects_mismatched_inputs() {
        let mdp = Mdp::toggle(0.5).unwrap();
        let phi = FeatureMap::tabular(6);
        let core = compute_core_residual(&phi, &[0], DMatrix::from_element(6, 1, 1.0)).unwrap();
        let model = GenerativeModel::new(&mdp, 0);
        assert!(Planner::new(model, &phi, &core, config(1, 1)).is_err());
        let mut bad = config(1, 1);
        bad.eta = 0.0;
        assert!(bad.validate().is_err());
    }
}
