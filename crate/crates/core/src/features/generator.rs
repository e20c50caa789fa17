use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_core_residual, matrix_from_rows, rows_of, CoreSet, FeatureMap};
use crate::error::{check_len, contract, Result};
use crate::linalg::{flat_dirichlet, sup_norm};
use crate::mdp::Mdp;

/// Witness of linear structure: `P = Φ W` and `r = Φ ϑ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMdpWitness {
    /// `d × X`.
    pub w: DMatrix<f64>,
    pub vartheta: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessFile {
    pub w: Vec<Vec<f64>>,
    pub vartheta: Vec<f64>,
}

impl LinearMdpWitness {
    /// Returns `(‖Φ W − P‖_max, ‖Φ ϑ − r‖_∞)`.
    pub fn residuals(&self, mdp: &Mdp, phi: &FeatureMap) -> Result<(f64, f64)> {
        check_len("witness rows", phi.dim(), self.w.nrows())?;
        check_len("witness columns", mdp.num_states(), self.w.ncols())?;
        let p_err = (phi.matrix() * &self.w - mdp.transition()).amax();
        let r_err = sup_norm(&(phi.matrix() * &self.vartheta - mdp.reward()));
        Ok((p_err, r_err))
    }

    /// `θ^π = ϑ + γ W V^π`, which satisfies `Φ θ^π = Q^π` exactly.
    pub fn q_parameter(&self, gamma: f64, v: &DVector<f64>) -> DVector<f64> {
        &self.vartheta + (&self.w * v) * gamma
    }

    pub fn to_file(&self) -> WitnessFile {
        WitnessFile {
            w: rows_of(&self.w),
            vartheta: self.vartheta.iter().copied().collect(),
        }
    }

    pub fn from_file(file: WitnessFile, num_states: usize) -> Result<Self> {
        let d = file.vartheta.len();
        Ok(Self {
            w: matrix_from_rows("w", &file.w, d, num_states)?,
            vartheta: DVector::from_vec(file.vartheta),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, num_states: usize) -> Result<Self> {
        Self::from_file(serde_json::from_str(&std::fs::read_to_string(path)?)?, num_states)
    }
}

/// A generated linear MDP together with its features, witness and exact core set.
#[derive(Debug, Clone)]
pub struct LinearInstance {
    pub mdp: Mdp,
    pub features: FeatureMap,
    pub witness: LinearMdpWitness,
    pub core: CoreSet,
}

impl LinearInstance {
    /// The toggle MDP with tabular features and the full core set. It is a
    /// linear MDP with `W = P` and `ϑ = r`.
    pub fn toggle(gamma: f64) -> Result<Self> {
        let mdp = Mdp::toggle(gamma)?;
        let features = FeatureMap::tabular(4);
        let core = compute_core_residual(&features, &[0, 1, 2, 3], DMatrix::identity(4, 4))?;
        let witness = LinearMdpWitness {
            w: mdp.transition().clone(),
            vartheta: mdp.reward().clone(),
        };
        Ok(Self {
            mdp,
            features,
            witness,
            core,
        })
    }
}

/// Draws a random linear MDP with an exact core set of size `d`.
///
/// Every `φ(x, a)` lies on the simplex `Δ_d` (flat Dirichlet) and `d` randomly
/// chosen pairs carry the coordinate basis vectors; those pairs form the core
/// set with `B = Φ`, so `Δ_core = 0`. Each row of `W` is a distribution over
/// states, which makes `P = Φ W` row-stochastic, and `ϑ ∈ [0, 1]^d` keeps
/// `r = Φ ϑ` in `[0, 1]`.
pub fn gen_linear_mdp(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    dim: usize,
    gamma: f64,
) -> Result<LinearInstance> {
    contract!(
        num_states >= 1 && num_actions >= 1 && dim >= 1,
        "states, actions and dim must all be at least 1"
    );
    let xa = num_states * num_actions;
    contract!(
        dim <= xa,
        "feature dimension d = {dim} exceeds the number of state-action pairs X*A = {xa}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let planted: Vec<usize> = sample(&mut rng, xa, dim).into_vec();
    let mut phi = DMatrix::zeros(xa, dim);
    for z in 0..xa {
        if let Some(k) = planted.iter().position(|&p| p == z) {
            phi[(z, k)] = 1.0;
        } else {
            for (j, v) in flat_dirichlet(&mut rng, dim).into_iter().enumerate() {
                phi[(z, j)] = v;
            }
        }
    }
    let mut w = DMatrix::zeros(dim, num_states);
    for j in 0..dim {
        for (x, v) in flat_dirichlet(&mut rng, num_states).into_iter().enumerate() {
            w[(j, x)] = v;
        }
    }
    let vartheta = DVector::from_fn(dim, |_, _| rng.random::<f64>());
    let nu0 = DVector::from_vec(flat_dirichlet(&mut rng, num_states));

    // Row sums of Φ W equal 1 up to round-off, well inside the MDP contract.
    let transition = &phi * &w;
    let reward = (&phi * &vartheta).map(|r: f64| r.clamp(0.0, 1.0));

    let mdp = Mdp::new(num_states, num_actions, gamma, nu0, reward, transition)?;
    let features = FeatureMap::new(phi.clone(), Some(1.0))?;
    let core = compute_core_residual(&features, &planted, phi)?;
    Ok(LinearInstance {
        mdp,
        features,
        witness: LinearMdpWitness { w, vartheta },
        core,
    })
}
