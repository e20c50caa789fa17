//! Feature maps and core state-action sets.
//!
//! A core set of `m` pairs spans every feature vector up to a residual:
//! `Φ = B U Φ + Δ_core`, where `U` selects the core rows of `Φ` and `B` is a
//! row-stochastic `(X·A) × m` interpolation matrix. `eps_core(x, a)` is the
//! Euclidean norm of the residual row.

mod approx;
mod generator;

pub use approx::{bellman_fit_error, chebyshev_fit, ibe_estimate, q_approx_error, ChebyshevFit, FitPath};
pub use generator::{gen_linear_mdp, LinearInstance, LinearMdpWitness, WitnessFile};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, contract, Result};
use crate::linalg::project_simplex;

const NORM_TOL: f64 = 1e-12;

/// Feature matrix `Φ` with rows `φ(x, a)` in x-major order and a norm bound `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
    radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureFile {
    pub num_pairs: usize,
    pub dim: usize,
    pub radius: f64,
    pub phi: Vec<Vec<f64>>,
}

impl FeatureMap {
    /// Uses the largest row norm as `R` unless a bound is supplied.
    pub fn new(phi: DMatrix<f64>, radius: Option<f64>) -> Result<Self> {
        contract!(phi.ncols() >= 1 && phi.nrows() >= 1, "feature matrix must be non-empty");
        let max_norm = (0..phi.nrows()).map(|i| phi.row(i).norm()).fold(0.0, f64::max);
        let radius = radius.unwrap_or(max_norm);
        contract!(
            max_norm <= radius + NORM_TOL,
            "feature row norm {max_norm} exceeds radius {radius}"
        );
        contract!(radius > 0.0, "feature radius must be positive");
        Ok(Self { phi, radius })
    }

    /// `Φ = I`, one indicator feature per state-action pair.
    pub fn tabular(num_pairs: usize) -> Self {
        Self {
            phi: DMatrix::identity(num_pairs, num_pairs),
            radius: 1.0,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn num_pairs(&self) -> usize {
        self.phi.nrows()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `⟨φ(z), θ⟩` without allocating.
    #[inline]
    pub fn dot(&self, z: usize, theta: &[f64]) -> f64 {
        let mut s = 0.0;
        for (j, t) in theta.iter().enumerate() {
            s += self.phi[(z, j)] * t;
        }
        s
    }

    pub fn row(&self, z: usize) -> DVector<f64> {
        self.phi.row(z).transpose()
    }

    /// `Q_θ = Φ θ`.
    pub fn q_values(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("parameter vector", self.dim(), theta.len())?;
        Ok(&self.phi * theta)
    }

    pub fn to_file(&self) -> FeatureFile {
        FeatureFile {
            num_pairs: self.num_pairs(),
            dim: self.dim(),
            radius: self.radius,
            phi: rows_of(&self.phi),
        }
    }

    pub fn from_file(file: FeatureFile) -> Result<Self> {
        let phi = matrix_from_rows("phi", &file.phi, file.num_pairs, file.dim)?;
        Self::new(phi, Some(file.radius))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(
    what: &'static str,
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
) -> Result<DMatrix<f64>> {
    check_len(what, nrows, rows.len())?;
    let mut m = DMatrix::zeros(nrows, ncols);
    for (i, row) in rows.iter().enumerate() {
        check_len(what, ncols, row.len())?;
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

/// Core state-action pairs with their interpolation coefficients and residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreSet {
    core_indices: Vec<usize>,
    interp: DMatrix<f64>,
    delta_core: DMatrix<f64>,
    eps_core: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoreSetFile {
    pub core_indices: Vec<usize>,
    pub interp: Vec<Vec<f64>>,
    pub delta_core: Vec<Vec<f64>>,
    pub eps_core: Vec<f64>,
}

impl CoreSet {
    pub fn core_indices(&self) -> &[usize] {
        &self.core_indices
    }

    pub fn size(&self) -> usize {
        self.core_indices.len()
    }

    /// `B`, `(X·A) × m`.
    pub fn interp(&self) -> &DMatrix<f64> {
        &self.interp
    }

    pub fn delta_core(&self) -> &DMatrix<f64> {
        &self.delta_core
    }

    pub fn eps_core(&self) -> &DVector<f64> {
        &self.eps_core
    }

    /// The 0/1 selector `U`, `m × (X·A)`.
    pub fn selection(&self) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(self.size(), self.interp.nrows());
        for (k, &z) in self.core_indices.iter().enumerate() {
            u[(k, z)] = 1.0;
        }
        u
    }

    /// `U v`: restriction of a state-action vector to the core pairs.
    pub fn restrict(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.size(), self.core_indices.iter().map(|&z| v[z]))
    }

    /// `Uᵀ λ`: embeds a core vector into state-action space.
    pub fn embed(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.interp.nrows());
        for (k, &z) in self.core_indices.iter().enumerate() {
            out[z] += lambda[k];
        }
        out
    }

    pub fn to_file(&self) -> CoreSetFile {
        CoreSetFile {
            core_indices: self.core_indices.clone(),
            interp: rows_of(&self.interp),
            delta_core: rows_of(&self.delta_core),
            eps_core: self.eps_core.iter().copied().collect(),
        }
    }

    /// Rebuilds the residuals from `phi` and checks them against the stored ones.
    pub fn from_file(file: CoreSetFile, phi: &FeatureMap) -> Result<Self> {
        let interp = matrix_from_rows("interp", &file.interp, phi.num_pairs(), file.core_indices.len())?;
        let core = compute_core_residual(phi, &file.core_indices, interp)?;
        let stored = matrix_from_rows("delta_core", &file.delta_core, phi.num_pairs(), phi.dim())?;
        contract!(
            stored == core.delta_core,
            "stored core residual does not match the feature map"
        );
        Ok(core)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, phi: &FeatureMap) -> Result<Self> {
        Self::from_file(serde_json::from_str(&std::fs::read_to_string(path)?)?, phi)
    }
}

fn check_indices(phi: &FeatureMap, core_indices: &[usize]) -> Result<()> {
    contract!(!core_indices.is_empty(), "core set must contain at least one pair");
    let mut seen = vec![false; phi.num_pairs()];
    for &z in core_indices {
        contract!(z < phi.num_pairs(), "core index {z} out of range");
        contract!(!seen[z], "core index {z} repeated");
        seen[z] = true;
    }
    Ok(())
}

/// Builds a [`CoreSet`] from given interpolation coefficients, filling in
/// `Δ_core = Φ − B U Φ` and its row norms.
pub fn compute_core_residual(phi: &FeatureMap, core_indices: &[usize], interp: DMatrix<f64>) -> Result<CoreSet> {
    check_indices(phi, core_indices)?;
    check_len("interp rows", phi.num_pairs(), interp.nrows())?;
    check_len("interp columns", core_indices.len(), interp.ncols())?;
    for i in 0..interp.nrows() {
        let row = interp.row(i);
        contract!(
            row.iter().all(|b| *b >= 0.0),
            "interpolation row {i} has a negative entry"
        );
        let s: f64 = row.iter().sum();
        contract!(
            (s - 1.0).abs() <= 1e-12,
            "interpolation row {i} sums to {s}, expected 1"
        );
    }
    let mut core_phi = DMatrix::zeros(core_indices.len(), phi.dim());
    for (k, &z) in core_indices.iter().enumerate() {
        core_phi.set_row(k, &phi.matrix().row(z));
    }
    let delta_core = phi.matrix() - &interp * core_phi;
    let eps_core = DVector::from_fn(delta_core.nrows(), |i, _| delta_core.row(i).norm());
    Ok(CoreSet {
        core_indices: core_indices.to_vec(),
        interp,
        delta_core,
        eps_core,
    })
}

/// Fits `b(·|x, a)` on the simplex by accelerated projected gradient on
/// `‖φ(x, a) − Σ_k b_k φ(core_k)‖²`. Pairs that are themselves core pairs get
/// their own indicator.
pub fn fit_interpolation(phi: &FeatureMap, core_indices: &[usize]) -> Result<CoreSet> {
    check_indices(phi, core_indices)?;
    let m = core_indices.len();
    let mut core_phi = DMatrix::zeros(m, phi.dim());
    for (k, &z) in core_indices.iter().enumerate() {
        core_phi.set_row(k, &phi.matrix().row(z));
    }
    let gram = &core_phi * core_phi.transpose();
    // Lipschitz constant of the gradient 2 (G b − C φ).
    let lipschitz = 2.0 * gram.symmetric_eigenvalues().max().max(1e-300);

    let mut interp = DMatrix::zeros(phi.num_pairs(), m);
    for z in 0..phi.num_pairs() {
        if let Some(k) = core_indices.iter().position(|&c| c == z) {
            interp[(z, k)] = 1.0;
            continue;
        }
        let target = &core_phi * phi.row(z);
        let b = simplex_least_squares(&gram, &target, lipschitz);
        interp.set_row(z, &DVector::from_vec(b).transpose());
    }
    compute_core_residual(phi, core_indices, interp)
}

/// Minimises `bᵀ G b − 2 bᵀ c` over the simplex (FISTA with restarts) until
/// the gradient-mapping norm drops below 1e-9.
fn simplex_least_squares(gram: &DMatrix<f64>, c: &DVector<f64>, lipschitz: f64) -> Vec<f64> {
    let m = c.len();
    let step = 1.0 / lipschitz;
    let grad = |b: &[f64]| -> Vec<f64> {
        let bv = DVector::from_column_slice(b);
        let g = (gram * bv - c) * 2.0;
        g.iter().copied().collect()
    };
    let objective = |b: &[f64]| -> f64 {
        let bv = DVector::from_column_slice(b);
        bv.dot(&(gram * &bv)) - 2.0 * bv.dot(c)
    };
    let mut x = vec![1.0 / m as f64; m];
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut f_prev = objective(&x);
    for _ in 0..200_000 {
        let g = grad(&y);
        let stepped: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
        let x_next = project_simplex(&stepped);
        let mapping: f64 = y
            .iter()
            .zip(&x_next)
            .map(|(a, b)| ((a - b) / step).powi(2))
            .sum::<f64>()
            .sqrt();
        let f_next = objective(&x_next);
        if f_next > f_prev {
            // restart momentum
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        y = x_next
            .iter()
            .zip(&x)
            .map(|(xn, xo)| xn + momentum * (xn - xo))
            .collect();
        x = x_next;
        t = t_next;
        f_prev = f_next;
        if mapping <= 1e-9 {
            break;
        }
    }
    // exact renormalisation against projection round-off
    let s: f64 = x.iter().sum();
    x.iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: &[&[f64]]) -> FeatureMap {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMap::new(DMatrix::from_row_slice(rows.len(), d, &flat), None).unwrap()
    }

    #[test]
    fn tabular_full_core_has_zero_residual() {
        let phi = FeatureMap::tabular(6);
        let core = compute_core_residual(&phi, &[0, 1, 2, 3, 4, 5], DMatrix::identity(6, 6)).unwrap();
        assert!(core.eps_core().iter().all(|e| *e == 0.0));
    }

    #[test]
    fn convex_combination_has_zero_residual() {
        let phi = features(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        let interp = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let core = compute_core_residual(&phi, &[0, 1], interp).unwrap();
        assert_eq!(core.eps_core()[2], 0.0);
    }

    #[test]
    fn perturbation_shows_up_as_residual() {
        let phi = features(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5 + 0.006, 0.5 + 0.008]]);
        let interp = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let core = compute_core_residual(&phi, &[0, 1], interp).unwrap();
        assert!((core.eps_core()[2] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn interpolation_rows_must_be_stochastic() {
        let phi = FeatureMap::tabular(2);
        let bad = DMatrix::from_row_slice(2, 1, &[1.0, 0.9]);
        assert!(compute_core_residual(&phi, &[0], bad).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.5, -0.5]);
        assert!(compute_core_residual(&phi, &[0, 1], neg).is_err());
        assert!(compute_core_residual(&phi, &[0, 0], DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn core_members_interpolate_themselves() {
        // duplicate feature rows: the pair's own index wins
        let phi = features(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let core = fit_interpolation(&phi, &[0, 1, 2]).unwrap();
        assert_eq!(core.interp()[(1, 1)], 1.0);
        assert_eq!(core.interp()[(1, 0)], 0.0);
        assert_eq!(core.eps_core()[1], 0.0);
    }

    #[test]
    fn fit_recovers_interior_combination() {
        let phi = features(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.2, 0.3, 0.5]]);
        let core = fit_interpolation(&phi, &[0, 1, 2]).unwrap();
        assert!(core.eps_core()[3] <= 1e-8);
        let b = core.interp().row(3);
        assert!((b[0] - 0.2).abs() < 1e-7 && (b[2] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn core_set_json_round_trip() {
        let phi = features(&[&[1.0, 0.0], &[0.0, 1.0], &[0.3, 0.9]]);
        let core = fit_interpolation(&phi, &[0, 1]).unwrap();
        let text = serde_json::to_string(&core.to_file()).unwrap();
        let back = CoreSet::from_file(serde_json::from_str(&text).unwrap(), &phi).unwrap();
        assert_eq!(core, back);
    }

    #[test]
    fn stochastic_row_sums() {
        let phi = features(&[&[1.0, 0.0], &[0.0, 1.0], &[0.3, 0.9], &[-0.4, 0.2]]);
        let core = fit_interpolation(&phi, &[0, 1]).unwrap();
        let bu = core.interp() * core.selection();
        for i in 0..4 {
            assert!((core.interp().row(i).sum() - 1.0).abs() <= 1e-12);
            assert!((bu.row(i).sum() - 1.0).abs() <= 1e-12);
            assert!((core.delta_core().row(i).norm() - core.eps_core()[i]).abs() <= 1e-14);
        }
    }
}
