//! Generative-model access with seeded, per-role random streams and exact
//! query accounting.
//!
//! Every algorithmic role draws from its own ChaCha8 stream derived from one
//! run seed, so reordering draws inside one role never perturbs another. The
//! stream layout is tied to `rand_chacha` 0.9.0, which the manifest pins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::mdp::Mdp;

/// Named random streams of one planner run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Lambda = 2,
    Transition = 3,
    Policy = 4,
    OutputIndex = 5,
}

/// The generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// First index whose cumulative weight exceeds `u`. Falls back to the last
/// index with positive mass when round-off leaves the total short of 1.
#[inline]
pub(crate) fn inverse_cdf(cdf: &[f64], u: f64) -> usize {
    let i = cdf.partition_point(|&c| c <= u);
    if i < cdf.len() {
        return i;
    }
    let mut j = cdf.len() - 1;
    while j > 0 && cdf[j] == cdf[j - 1] {
        j -= 1;
    }
    j
}

pub(crate) fn cumulative(weights: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Inverse-CDF draw from a probability vector using a single uniform.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Result<usize> {
    contract!(!weights.is_empty(), "cannot sample from an empty weight vector");
    for (i, w) in weights.iter().enumerate() {
        contract!(w.is_finite() && *w >= 0.0, "weight {i} is {w}");
    }
    let total: f64 = weights.iter().sum();
    contract!((total - 1.0).abs() <= 1e-9, "weights sum to {total}, expected 1");
    let cdf = cumulative(weights.iter().copied());
    Ok(inverse_cdf(&cdf, rng.random::<f64>()))
}

/// Same as [`sample_categorical`] for unnormalised log-weights; normalises with
/// max subtraction first.
pub fn sample_categorical_log<R: Rng + ?Sized>(rng: &mut R, log_weights: &[f64]) -> Result<usize> {
    contract!(!log_weights.is_empty(), "cannot sample from an empty weight vector");
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    contract!(max.is_finite(), "log-weights have no finite maximum");
    let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let cdf = cumulative(w.iter().map(|x| x / total));
    Ok(inverse_cdf(&cdf, rng.random::<f64>()))
}

/// Sampling access to `ν₀` and `P(·|x, a)` for one MDP.
///
/// Rewards are read from the deterministic reward table. Initial-state draws
/// and transition queries are counted separately.
#[derive(Debug, Clone)]
pub struct GenerativeModel<'a> {
    mdp: &'a Mdp,
    init_rng: ChaCha8Rng,
    transition_rng: ChaCha8Rng,
    init_cdf: Vec<f64>,
    transition_cdf: Vec<Vec<f64>>,
    transition_queries: u64,
    init_queries: u64,
}

impl<'a> GenerativeModel<'a> {
    pub fn new(mdp: &'a Mdp, seed: u64) -> Self {
        let transition_cdf = (0..mdp.num_pairs())
            .map(|z| cumulative(mdp.transition().row(z).iter().copied()))
            .collect();
        Self {
            mdp,
            init_rng: stream_rng(seed, Stream::Init),
            transition_rng: stream_rng(seed, Stream::Transition),
            init_cdf: cumulative(mdp.nu0().iter().copied()),
            transition_cdf,
            transition_queries: 0,
            init_queries: 0,
        }
    }

    pub fn mdp(&self) -> &'a Mdp {
        self.mdp
    }

    /// `x₀ ~ ν₀`.
    pub fn sample_init(&mut self) -> usize {
        self.init_queries += 1;
        inverse_cdf(&self.init_cdf, self.init_rng.random::<f64>())
    }

    /// One generative-model query: `(r(x, a), y)` with `y ~ P(·|x, a)`.
    pub fn sample_next(&mut self, x: usize, a: usize) -> Result<(f64, usize)> {
        if x >= self.mdp.num_states() || a >= self.mdp.num_actions() {
            return Err(Error::Contract(format!("state-action pair ({x}, {a}) out of range")));
        }
        Ok(self.sample_pair(self.mdp.pair_index(x, a)))
    }

    /// [`Self::sample_next`] keyed by the flat pair index.
    #[inline]
    pub(crate) fn sample_pair(&mut self, z: usize) -> (f64, usize) {
        self.transition_queries += 1;
        let y = inverse_cdf(&self.transition_cdf[z], self.transition_rng.random::<f64>());
        (self.mdp.reward()[z], y)
    }

    pub fn transition_queries(&self) -> u64 {
        self.transition_queries
    }

    pub fn init_queries(&self) -> u64 {
        self.init_queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn two_state(nu0: [f64; 2], row: [f64; 2]) -> Mdp {
        Mdp::new(
            2,
            1,
            0.5,
            DVector::from_vec(nu0.to_vec()),
            DVector::from_vec(vec![0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[row[0], row[1], row[0], row[1]]),
        )
        .unwrap()
    }

    #[test]
    fn point_mass_initial_state() {
        let mdp = Mdp::toggle(0.5).unwrap();
        let mut model = GenerativeModel::new(&mdp, 3);
        assert!((0..1000).all(|_| model.sample_init() == 0));
        assert_eq!(model.init_queries(), 1000);
        assert_eq!(model.transition_queries(), 0);
    }

    #[test]
    fn initial_frequency() {
        let mdp = two_state([0.25, 0.75], [1.0, 0.0]);
        let mut model = GenerativeModel::new(&mdp, 11);
        let n = 100_000;
        let ones = (0..n).filter(|_| model.sample_init() == 1).count();
        assert!((ones as f64 / n as f64 - 0.75).abs() <= 0.01);
    }

    #[test]
    fn same_seed_same_stream() {
        let mdp = two_state([0.5, 0.5], [0.3, 0.7]);
        let mut a = GenerativeModel::new(&mdp, 42);
        let mut b = GenerativeModel::new(&mdp, 42);
        for _ in 0..1000 {
            assert_eq!(a.sample_init(), b.sample_init());
            assert_eq!(a.sample_next(0, 0).unwrap(), b.sample_next(0, 0).unwrap());
        }
    }

    #[test]
    fn toggle_go_is_deterministic() {
        let mdp = Mdp::toggle(0.5).unwrap();
        let mut model = GenerativeModel::new(&mdp, 0);
        for _ in 0..100 {
            assert_eq!(model.sample_next(0, 1).unwrap(), (0.0, 1));
        }
        assert_eq!(model.transition_queries(), 100);
        assert!(model.sample_next(2, 0).is_err());
    }

    #[test]
    fn transition_frequency() {
        let mdp = two_state([1.0, 0.0], [0.5, 0.5]);
        let mut model = GenerativeModel::new(&mdp, 5);
        let n = 100_000;
        let ones = (0..n).filter(|_| model.sample_next(0, 0).unwrap().1 == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() <= 0.01);
        assert_eq!(model.transition_queries(), n as u64);
    }

    #[test]
    fn categorical_point_mass_and_uniform() {
        let mut rng = stream_rng(1, Stream::Lambda);
        assert!((0..1000).all(|_| sample_categorical(&mut rng, &[0.0, 0.0, 1.0, 0.0]).unwrap() == 2));
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_categorical(&mut rng, &[0.25; 4]).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() <= 0.01);
        }
    }

    #[test]
    fn categorical_rejects_bad_weights() {
        let mut rng = stream_rng(1, Stream::Lambda);
        assert!(sample_categorical(&mut rng, &[1.5, -0.5]).is_err());
        assert!(sample_categorical(&mut rng, &[0.5, 0.4]).is_err());
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = stream_rng(7, Stream::Init);
        let mut b = stream_rng(7, Stream::Transition);
        let xs: Vec<u64> = (0..4).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.random()).collect();
        assert_ne!(xs, ys);
    }
}
