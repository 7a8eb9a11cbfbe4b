//! Mixture with a random number of components: Gamma(gamma_S, 1)
//! unnormalised weights, `M - 1 ~ Poisson(Lambda)`, and a latent `u` that
//! makes the weights conditionally independent.
//!
//! Components are kept compacted: the `K_N` allocated components occupy
//! indices `0..K_N` in order of first appearance over subjects, and any
//! non-allocated components follow.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, quad_form, sample_normal_precision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixtureHyper {
    /// Mean of `M - 1`.
    pub lambda: f64,
    /// Shape of the unnormalised weights.
    pub gamma_s: f64,
}

impl MixtureHyper {
    pub fn new(lambda: f64, gamma_s: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0 && gamma_s.is_finite() && gamma_s > 0.0) {
            return Err(Error::validation(format!(
                "mixture hyperparameters must be positive (Lambda = {lambda}, gamma_S = {gamma_s})"
            )));
        }
        Ok(MixtureHyper { lambda, gamma_s })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureState {
    /// Unnormalised weights, one per component.
    pub s: Vec<f64>,
    /// Unique log-baseline rate vectors, one per component.
    pub phi_star: Vec<DVector<f64>>,
    /// Component of each subject.
    pub c: Vec<usize>,
    pub u: f64,
}

impl MixtureState {
    /// Builds a state from allocations and component values; relabels to the
    /// canonical compacted order.
    pub fn new(c: Vec<usize>, phi_star: Vec<DVector<f64>>, s: Vec<f64>, u: f64) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::validation("mixture needs at least one subject"));
        }
        if phi_star.len() != s.len() || s.is_empty() {
            return Err(Error::validation("weights and component values differ in number"));
        }
        if c.iter().any(|&m| m >= s.len()) {
            return Err(Error::validation("allocation refers to a missing component"));
        }
        if s.iter().any(|&v| !(v.is_finite() && v > 0.0)) || !(u.is_finite() && u > 0.0) {
            return Err(Error::validation("weights and latent variable must be positive"));
        }
        let mut state = MixtureState { s, phi_star, c, u };
        state.compact();
        Ok(state)
    }

    pub fn n_subjects(&self) -> usize {
        self.c.len()
    }

    pub fn n_components(&self) -> usize {
        self.s.len()
    }

    /// `K_N`; relies on the compacted layout.
    pub fn n_allocated(&self) -> usize {
        self.c.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_components()];
        for &m in &self.c {
            n[m] += 1;
        }
        n
    }

    /// Members of each allocated component.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_allocated()];
        for (i, &m) in self.c.iter().enumerate() {
            groups[m].push(i);
        }
        groups
    }

    /// Relabels allocated components by first appearance and moves empty
    /// components behind them. The induced set partition is unchanged.
    pub fn compact(&mut self) {
        let m = self.n_components();
        let mut new_label = vec![usize::MAX; m];
        let mut order = Vec::with_capacity(m);
        for &ci in &self.c {
            if new_label[ci] == usize::MAX {
                new_label[ci] = order.len();
                order.push(ci);
            }
        }
        for old in 0..m {
            if new_label[old] == usize::MAX {
                new_label[old] = order.len();
                order.push(old);
            }
        }
        self.s = order.iter().map(|&o| self.s[o]).collect();
        self.phi_star = order.iter().map(|&o| self.phi_star[o].clone()).collect();
        for ci in &mut self.c {
            *ci = new_label[*ci];
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let k = self.n_allocated();
        let counts = self.counts();
        if counts[..k].contains(&0) {
            return Err(Error::numerical("allocated components are not contiguous"));
        }
        if self.s.iter().any(|&v| !(v > 0.0 && v.is_finite())) || !(self.u > 0.0 && self.u.is_finite()) {
            return Err(Error::numerical("weights or latent variable left the positive reals"));
        }
        Ok(())
    }
}

/// Base measure `N(mean, precision^{-1})` of the component values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBase {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianBase {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        if precision.shape() != (mean.len(), mean.len()) {
            return Err(Error::validation("base mean and precision dimensions disagree"));
        }
        let chol = cholesky_lower(&precision)?;
        Ok(GaussianBase { mean, precision, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Log density up to its constant.
    pub fn log_kernel(&self, x: &DVector<f64>) -> f64 {
        -0.5 * quad_form(&self.precision, &(x - &self.mean))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        sample_normal_precision(&self.mean, &self.chol, rng)
    }
}

/// Data side of the component-value update.
pub trait ComponentLikelihood {
    /// Log-likelihood of `members` under candidate value `phi`; may be `-inf`.
    fn loglik(&mut self, members: &[usize], phi: &DVector<f64>) -> f64;
    /// Log-likelihood of `members` under their current value.
    fn current(&self, members: &[usize]) -> f64;
    /// Makes the last candidate evaluated by [`loglik`](Self::loglik) current.
    fn commit(&mut self, members: &[usize]);
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::numerical(format!("gamma({shape}, {rate}): {e}")))?;
    // shapes well below 1 can underflow to 0
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}

/// `u | S ~ Gamma(N, rate = sum S)`.
pub fn update_u<R: Rng + ?Sized>(state: &mut MixtureState, rng: &mut R) -> Result<()> {
    let total: f64 = state.s.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::numerical(format!("weight total {total} is not positive")));
    }
    state.u = gamma_draw(state.n_subjects() as f64, total, rng)?;
    Ok(())
}

/// `S_m ~ Gamma(gamma_S + n_m, 1 + u)` for allocated components.
pub fn update_allocated_weights<R: Rng + ?Sized>(
    state: &mut MixtureState,
    hyper: &MixtureHyper,
    rng: &mut R,
) -> Result<()> {
    let counts = state.counts();
    let rate = 1.0 + state.u;
    for m in 0..state.n_allocated() {
        state.s[m] = gamma_draw(hyper.gamma_s + counts[m] as f64, rate, rng)?;
    }
    Ok(())
}

/// `psi(u) = E[exp(-u S)] = (1 + u)^{-gamma_S}`.
pub fn laplace_weight(u: f64, gamma_s: f64) -> f64 {
    (-gamma_s * u.ln_1p()).exp()
}

/// Probability of `m` non-allocated components: `(K + m) x^m / m!` over
/// `e^x (K + x)`.
pub fn nonallocated_pmf(k: usize, x: f64, m: usize) -> f64 {
    let kf = k as f64;
    let log_term = (kf + m as f64).ln() + m as f64 * x.ln() - statrs::function::gamma::ln_gamma(m as f64 + 1.0);
    let log_norm = x + (kf + x).ln();
    if m == 0 && x == 0.0 {
        return 1.0;
    }
    (log_term - log_norm).exp()
}

pub fn sample_nonallocated_count<R: Rng + ?Sized>(k: usize, x: f64, rng: &mut R) -> Result<usize> {
    if x <= 0.0 {
        return Ok(0);
    }
    let kf = k as f64;
    let pois = Poisson::new(x).map_err(|e| Error::numerical(format!("poisson({x}): {e}")))?;
    let draw = pois.sample(rng) as usize;
    if rng.random::<f64>() < kf / (kf + x) {
        Ok(draw)
    } else {
        Ok(draw + 1)
    }
}

/// Discards empty components and draws a fresh set from their conditional:
/// count from [`nonallocated_pmf`], weights `Gamma(gamma_S, 1 + u)`, values
/// from `base`.
pub fn update_nonallocated<R: Rng + ?Sized>(
    state: &mut MixtureState,
    hyper: &MixtureHyper,
    base: &GaussianBase,
    rng: &mut R,
) -> Result<usize> {
    let k = state.n_allocated();
    state.s.truncate(k);
    state.phi_star.truncate(k);
    let x = hyper.lambda * laplace_weight(state.u, hyper.gamma_s);
    let extra = sample_nonallocated_count(k, x, rng)?;
    for _ in 0..extra {
        state.s.push(gamma_draw(hyper.gamma_s, 1.0 + state.u, rng)?);
        state.phi_star.push(base.sample(rng));
    }
    Ok(extra)
}

/// Softmax of `log S_m + L[m]`.
pub fn allocation_probs(log_s: &[f64], loglik: &[f64]) -> Option<Vec<f64>> {
    let scores: Vec<f64> = log_s.iter().zip(loglik).map(|(a, b)| a + b).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut p: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Some(p)
}

/// Resamples every allocation with `P(c_i = m) ∝ S_m exp(L[i][m])`, then
/// compacts. `loglik` is `N x M`.
pub fn update_allocations<R: Rng + ?Sized>(
    state: &mut MixtureState,
    loglik: &DMatrix<f64>,
    rng: &mut R,
) -> Result<()> {
    let (n, m) = (state.n_subjects(), state.n_components());
    if loglik.shape() != (n, m) {
        return Err(Error::validation(format!(
            "likelihood table is {:?}, expected ({n}, {m})",
            loglik.shape()
        )));
    }
    let log_s: Vec<f64> = state.s.iter().map(|v| v.ln()).collect();
    let mut row = vec![0.0; m];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = loglik[(i, j)];
        }
        let probs = allocation_probs(&log_s, &row).ok_or_else(|| {
            Error::numerical(format!("subject {i} has zero likelihood under every component"))
        })?;
        state.c[i] = crate::model::sample_discrete(&probs, rng);
    }
    state.compact();
    Ok(())
}

/// One Metropolis step for component `m` with an explicit proposal step.
/// Returns whether the move was accepted.
pub fn phi_star_step<L: ComponentLikelihood, R: Rng + ?Sized>(
    state: &mut MixtureState,
    m: usize,
    members: &[usize],
    step: &DVector<f64>,
    lik: &mut L,
    base: &GaussianBase,
    rng: &mut R,
) -> bool {
    let current = &state.phi_star[m];
    let proposal = current + step;
    let new_ll = lik.loglik(members, &proposal);
    if !new_ll.is_finite() {
        return false;
    }
    let log_ratio = new_ll - lik.current(members) + base.log_kernel(&proposal) - base.log_kernel(current);
    if rng.random::<f64>().ln() < log_ratio {
        lik.commit(members);
        state.phi_star[m] = proposal;
        true
    } else {
        false
    }
}

/// Gaussian random-walk updates of every allocated component value.
/// Returns the number of accepted moves.
pub fn update_phi_star<L: ComponentLikelihood, R: Rng + ?Sized>(
    state: &mut MixtureState,
    lik: &mut L,
    base: &GaussianBase,
    proposal_sd: f64,
    rng: &mut R,
) -> usize {
    let groups = state.members();
    let d = base.dim();
    let mut accepted = 0;
    for (m, members) in groups.iter().enumerate() {
        let step = crate::linalg::standard_normal_vector(d, rng) * proposal_sd;
        accepted += usize::from(phi_star_step(state, m, members, &step, lik, base, rng));
    }
    accepted
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson as PoissonPmf};
    use statrs::function::gamma::ln_gamma;
    use std::collections::HashMap;

    fn state_with(c: Vec<usize>, s: Vec<f64>) -> MixtureState {
        let phi = (0..s.len()).map(|m| DVector::from_element(1, m as f64)).collect();
        MixtureState::new(c, phi, s, 1.0).unwrap()
    }

    fn flat_base(d: usize) -> GaussianBase {
        GaussianBase::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap()
    }

    #[test]
    fn latent_u_mean_matches_gamma() {
        let mut st = state_with(vec![0, 0, 1, 1, 1], vec![2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mean = (0..n).map(|_| { update_u(&mut st, &mut rng).unwrap(); st.u }).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn latent_u_is_exponential_for_one_subject() {
        let mut st = state_with(vec![0], vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let mut draws: Vec<f64> = (0..n).map(|_| { update_u(&mut st, &mut rng).unwrap(); st.u }).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-x).exp();
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.628 / (n as f64).sqrt(), "KS {ks}");
    }

    #[test]
    fn latent_u_vanishes_for_huge_weights() {
        let mut st = state_with(vec![0, 0], vec![1e12]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        update_u(&mut st, &mut rng).unwrap();
        assert!(st.u < 1e-9);
    }

    #[test]
    fn allocated_weight_mean() {
        let hyper = MixtureHyper::new(1.0, 0.1).unwrap();
        let mut st = state_with(vec![0; 10], vec![1.0]);
        st.u = 1e-300;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| { update_allocated_weights(&mut st, &hyper, &mut rng).unwrap(); st.s[0] })
            .sum::<f64>()
            / n as f64;
        // Gamma(10.1, 1): sd of the mean is sqrt(10.1 / n)
        assert!((mean - 10.1).abs() < 3.0 * (10.1f64 / n as f64).sqrt(), "mean {mean}");

        st.u = 9.0;
        let mean9 = (0..n)
            .map(|_| { update_allocated_weights(&mut st, &hyper, &mut rng).unwrap(); st.s[0] })
            .sum::<f64>()
            / n as f64;
        assert!((mean9 - 1.01).abs() < 3.0 * (10.1f64 / 100.0 / n as f64).sqrt(), "mean {mean9}");
    }

    #[test]
    fn laplace_weight_value() {
        assert!((laplace_weight(1.0, 0.1) - 0.93303).abs() < 1e-5);
        assert!((laplace_weight(1.0, 0.1) - 2f64.powf(-0.1)).abs() < 1e-15);
    }

    #[test]
    fn nonallocated_pmf_matches_brute_force() {
        let brute: f64 = (0..=50).map(|m| (2.0 + m as f64) / (1..=m).map(|v| v as f64).product::<f64>()).sum();
        assert!((brute - std::f64::consts::E * 3.0).abs() < 1e-12);
        let p0 = nonallocated_pmf(2, 1.0, 0);
        assert!((p0 - 2.0 / (std::f64::consts::E * 3.0)).abs() < 1e-15);
        assert!((p0 - 0.2453).abs() < 1e-4);
        let total: f64 = (0..60).map(|m| nonallocated_pmf(2, 1.0, m)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(nonallocated_pmf(3, 0.0, 0), 1.0);
    }

    #[test]
    fn nonallocated_sampler_matches_pmf() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let mut counts = [0usize; 12];
        for _ in 0..n {
            let m = sample_nonallocated_count(2, 1.0, &mut rng).unwrap();
            counts[m.min(11)] += 1;
        }
        for (m, &c) in counts.iter().enumerate().take(6) {
            let p = nonallocated_pmf(2, 1.0, m);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - p).abs() < 4.0 * se, "m={m}");
        }
        assert_eq!(sample_nonallocated_count(2, 1e-300, &mut rng).unwrap(), 0);
    }

    #[test]
    fn allocation_probability_examples() {
        let p = allocation_probs(&[0.0, 0.0], &[3f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let s = [1.0f64, 2.0, 5.0];
        let log_s: Vec<f64> = s.iter().map(|v| v.ln()).collect();
        let p = allocation_probs(&log_s, &[-4.0; 3]).unwrap();
        for (a, b) in p.iter().zip(s.iter()) {
            assert!((a - b / 8.0).abs() < 1e-15);
        }
        let p = allocation_probs(&[0.0, 0.0], &[f64::NEG_INFINITY, -1.0]).unwrap();
        assert_eq!(p[0], 0.0);
        assert!(allocation_probs(&[0.0], &[f64::NEG_INFINITY]).is_none());
    }

    #[test]
    fn impossible_component_is_never_selected() {
        let mut st = state_with(vec![0, 1, 0, 1], vec![5.0, 1.0]);
        let mut table = DMatrix::zeros(4, 2);
        for i in 0..4 {
            table[(i, 1)] = f64::NEG_INFINITY;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            update_allocations(&mut st, &table, &mut rng).unwrap();
            assert!(st.c.iter().all(|&m| m == 0));
            assert_eq!(st.n_allocated(), 1);
            assert_eq!(st.n_components(), 2);
        }
        table.fill(f64::NEG_INFINITY);
        assert!(update_allocations(&mut st, &table, &mut rng).is_err());
    }

    fn partition_key(c: &[usize]) -> Vec<usize> {
        // canonical relabelling by first appearance
        let mut map = HashMap::new();
        c.iter()
            .map(|&m| {
                let next = map.len();
                *map.entry(m).or_insert(next)
            })
            .collect()
    }

    #[test]
    fn compaction_preserves_the_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let m = rng.random_range(1..6);
            let c: Vec<usize> = (0..8).map(|_| rng.random_range(0..m)).collect();
            let phi: Vec<_> = (0..m).map(|j| DVector::from_element(1, j as f64)).collect();
            let st = MixtureState { s: vec![1.0; m], phi_star: phi, c: c.clone(), u: 1.0 };
            let mut compacted = st.clone();
            compacted.compact();
            assert_eq!(partition_key(&c), partition_key(&compacted.c));
            assert_eq!(partition_key(&compacted.c), compacted.c);
            // values move with their subjects
            for i in 0..8 {
                assert_eq!(st.phi_star[c[i]], compacted.phi_star[compacted.c[i]]);
            }
            compacted.check_invariants().unwrap();
        }
    }

    fn prior_sweep(st: &mut MixtureState, hyper: &MixtureHyper, base: &GaussianBase, rng: &mut ChaCha8Rng) {
        update_u(st, rng).unwrap();
        update_allocated_weights(st, hyper, rng).unwrap();
        update_nonallocated(st, hyper, base, rng).unwrap();
        let flat = DMatrix::zeros(st.n_subjects(), st.n_components());
        update_allocations(st, &flat, rng).unwrap();
    }

    #[test]
    fn prior_sweeps_reproduce_shifted_poisson_component_count() {
        for lambda in [0.1, 1.0] {
            let hyper = MixtureHyper::new(lambda, 0.5).unwrap();
            let base = flat_base(1);
            let mut st = state_with(vec![0, 0, 0, 0], vec![1.0]);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            // successive sweeps are autocorrelated (lag-50 correlation ~0.01),
            // so the chi-square test uses every 50th of 10^6 sweeps
            let thin = 50;
            let n = 1_000_000 / thin;
            let bins = 6;
            let mut counts = vec![0usize; bins];
            for _ in 0..n {
                for _ in 0..thin {
                    prior_sweep(&mut st, &hyper, &base, &mut rng);
                }
                // M counted after the allocation step, before empties are discarded
                counts[(st.n_components() - 1).min(bins - 1)] += 1;
            }
            let pois = PoissonPmf::new(lambda).unwrap();
            let mut expected: Vec<f64> = (0..bins - 1).map(|k| pois.pmf(k as u64) * n as f64).collect();
            expected.push(n as f64 - expected.iter().sum::<f64>());
            // pool sparse tail cells
            let (mut obs, mut exp) = (Vec::new(), Vec::new());
            let (mut o_acc, mut e_acc) = (0.0, 0.0);
            for k in 0..bins {
                o_acc += counts[k] as f64;
                e_acc += expected[k];
                if e_acc >= 20.0 {
                    obs.push(o_acc);
                    exp.push(e_acc);
                    o_acc = 0.0;
                    e_acc = 0.0;
                }
            }
            if e_acc > 0.0 {
                *obs.last_mut().unwrap() += o_acc;
                *exp.last_mut().unwrap() += e_acc;
            }
            let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
            let df = (obs.len() - 1) as f64;
            let pval = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
            assert!(pval > 0.01, "Lambda={lambda}: chi2 {stat} on {df} df, p={pval}, counts {counts:?}");
        }
    }

    fn log_partition_weight(sizes: &[usize], gamma: f64) -> f64 {
        sizes.iter().map(|&n| ln_gamma(gamma + n as f64) - ln_gamma(gamma)).sum()
    }

    fn partition_frequencies(n_subj: usize, sweeps: usize, gamma: f64, seed: u64) -> HashMap<Vec<usize>, usize> {
        let hyper = MixtureHyper::new(1.0, gamma).unwrap();
        let base = flat_base(1);
        let mut st = state_with(vec![0; n_subj], vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freq = HashMap::new();
        for _ in 0..sweeps {
            prior_sweep(&mut st, &hyper, &base, &mut rng);
            *freq.entry(st.c.clone()).or_insert(0) += 1;
        }
        freq
    }

    #[test]
    fn partition_law_ratios_for_three_subjects() {
        let gamma = 0.5;
        let freq = partition_frequencies(3, 1_000_000, gamma, 9);
        // the three two-block partitions share V(3, 2) and the size profile (2, 1)
        let pairs = [vec![0, 0, 1], vec![0, 1, 0], vec![0, 1, 1]];
        let f: Vec<f64> = pairs.iter().map(|k| freq[k] as f64).collect();
        for a in 0..3 {
            for b in 0..3 {
                let expected = (log_partition_weight(&[2, 1], gamma) - log_partition_weight(&[2, 1], gamma)).exp();
                assert!((f[a] / f[b] / expected - 1.0).abs() < 0.05, "{f:?}");
            }
        }
    }

    #[test]
    fn partition_law_ratio_across_size_profiles() {
        let gamma = 0.5;
        let freq = partition_frequencies(4, 1_000_000, gamma, 10);
        // {12|34} against {123|4}: same K, profiles (2,2) and (3,1)
        let two_two = freq[&vec![0, 0, 1, 1]] as f64;
        let three_one = freq[&vec![0, 0, 0, 1]] as f64;
        let expected = (log_partition_weight(&[2, 2], gamma) - log_partition_weight(&[3, 1], gamma)).exp();
        assert!((expected - (gamma + 1.0) / (gamma + 2.0)).abs() < 1e-12);
        assert!((two_two / three_one / expected - 1.0).abs() < 0.05, "{two_two} / {three_one} vs {expected}");
    }

    struct Stub {
        data: Vec<f64>,
        value: f64,
        pending: f64,
    }

    impl ComponentLikelihood for Stub {
        fn loglik(&mut self, members: &[usize], phi: &DVector<f64>) -> f64 {
            self.pending = phi[0];
            members.iter().map(|&i| -0.5 * (self.data[i] - phi[0]).powi(2)).sum()
        }
        fn current(&self, members: &[usize]) -> f64 {
            members.iter().map(|&i| -0.5 * (self.data[i] - self.value).powi(2)).sum()
        }
        fn commit(&mut self, _members: &[usize]) {
            self.value = self.pending;
        }
    }

    #[test]
    fn zero_step_is_always_accepted() {
        let mut st = state_with(vec![0, 0], vec![1.0]);
        let mut lik = Stub { data: vec![5.0, -3.0], value: 0.0, pending: 0.0 };
        let base = flat_base(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zero = DVector::zeros(1);
        for _ in 0..1000 {
            assert!(phi_star_step(&mut st, 0, &[0, 1], &zero, &mut lik, &base, &mut rng));
        }
    }

    fn batch_mean_se(xs: &[f64]) -> (f64, f64) {
        let batches = 50;
        let len = xs.len() / batches;
        let means: Vec<f64> = xs.chunks(len).take(batches).map(|c| c.iter().sum::<f64>() / len as f64).collect();
        let m = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (m, (var / batches as f64).sqrt())
    }

    #[test]
    fn random_walk_targets_the_conjugate_posterior() {
        // y_i ~ N(phi, 1), phi ~ N(0, 1): posterior mean sum(y) / (n + 1)
        let data = vec![1.2, 0.4, 2.1, 1.7, 0.9];
        let target = data.iter().sum::<f64>() / 6.0;
        let mut st = state_with(vec![0; 5], vec![1.0]);
        st.phi_star[0][0] = 0.0;
        let mut lik = Stub { data, value: 0.0, pending: 0.0 };
        let base = flat_base(1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut trace = Vec::new();
        for _ in 0..200_000 {
            update_phi_star(&mut st, &mut lik, &base, 0.5, &mut rng);
            trace.push(st.phi_star[0][0]);
        }
        let (m, se) = batch_mean_se(&trace[1000..]);
        assert!((m - target).abs() < 3.0 * se, "{m} vs {target} (se {se})");
    }

    #[test]
    fn data_free_component_samples_the_base() {
        let mut st = state_with(vec![0], vec![1.0]);
        let mut lik = Stub { data: vec![0.0], value: 0.0, pending: 0.0 };
        let base = GaussianBase::new(DVector::from_element(1, 2.0), DMatrix::from_element(1, 1, 4.0)).unwrap();
        st.phi_star[0][0] = 2.0;
        lik.value = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut trace = Vec::new();
        for _ in 0..200_000 {
            let step = crate::linalg::standard_normal_vector(1, &mut rng) * 0.5;
            phi_star_step(&mut st, 0, &[], &step, &mut lik, &base, &mut rng);
            trace.push(st.phi_star[0][0]);
        }
        let (m, se) = batch_mean_se(&trace);
        assert!((m - 2.0).abs() < 3.0 * se, "mean {m} se {se}");
        let var = trace.iter().map(|v| (v - m).powi(2)).sum::<f64>() / trace.len() as f64;
        assert!((var - 0.25).abs() < 0.02, "var {var}");
    }

    #[test]
    fn state_validation() {
        let phi = vec![DVector::zeros(1)];
        assert!(MixtureState::new(vec![], phi.clone(), vec![1.0], 1.0).is_err());
        assert!(MixtureState::new(vec![1], phi.clone(), vec![1.0], 1.0).is_err());
        assert!(MixtureState::new(vec![0], phi.clone(), vec![0.0], 1.0).is_err());
        assert!(MixtureHyper::new(0.0, 0.1).is_err());
        let st = MixtureState::new(vec![0, 0], phi, vec![1.0], 1.0).unwrap();
        assert_eq!(st.n_allocated(), 1);
    }
}
