//! Dense continuous-time Markov chain mathematics.
//!
//! Off-diagonal rates are always laid out row by row, skipping the diagonal:
//! `(0,1), (0,2), .., (1,0), (1,2), ..`. States are 0-based throughout the
//! crate; the file formats use 1-based states.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use smallvec::SmallVec;

use crate::error::{Error, Result};

type Dense = SmallVec<[f64; 9]>;

/// Position of the `r -> s` rate in the row-major off-diagonal layout.
#[inline]
pub fn rate_slot(d: usize, r: usize, s: usize) -> usize {
    debug_assert!(r != s && r < d && s < d);
    r * (d - 1) + if s < r { s } else { s - 1 }
}

/// Inverse of [`rate_slot`].
#[inline]
pub fn slot_pair(d: usize, k: usize) -> (usize, usize) {
    let r = k / (d - 1);
    let c = k % (d - 1);
    (r, if c < r { c } else { c + 1 })
}

/// Matrix of instantaneous transition rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    d: usize,
    q: Dense,
}

impl Generator {
    /// Builds a generator from `d(d-1)` strictly positive off-diagonal rates.
    pub fn new(rates: &[f64], d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::validation(format!("state count must be >= 2, got {d}")));
        }
        if rates.len() != d * (d - 1) {
            return Err(Error::validation(format!(
                "expected {} rates for {d} states, got {}",
                d * (d - 1),
                rates.len()
            )));
        }
        let mut q: Dense = SmallVec::from_elem(0.0, d * d);
        for (k, &v) in rates.iter().enumerate() {
            let (r, s) = slot_pair(d, k);
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidRate { from: r, to: s, value: v });
            }
            q[r * d + s] = v;
            q[r * d + r] -= v;
        }
        Ok(Generator { d, q })
    }

    pub fn n_states(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn entry(&self, r: usize, s: usize) -> f64 {
        self.q[r * self.d + s]
    }

    /// Total rate of leaving `r`, i.e. `-Q(r,r)`.
    #[inline]
    pub fn exit_rate(&self, r: usize) -> f64 {
        -self.q[r * self.d + r]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.q)
    }

    /// Off-diagonal rates in the shared layout.
    pub fn rates(&self) -> Vec<f64> {
        (0..self.d * (self.d - 1))
            .map(|k| {
                let (r, s) = slot_pair(self.d, k);
                self.entry(r, s)
            })
            .collect()
    }
}

pub fn build_generator(rates: &[f64], d: usize) -> Result<Generator> {
    Generator::new(rates, d)
}

/// Transition probabilities over one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    d: usize,
    p: Dense,
}

impl TransitionMatrix {
    pub fn identity(d: usize) -> Self {
        let mut p: Dense = SmallVec::from_elem(0.0, d * d);
        for r in 0..d {
            p[r * d + r] = 1.0;
        }
        TransitionMatrix { d, p }
    }

    pub fn n_states(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, r: usize, s: usize) -> f64 {
        self.p[r * self.d + s]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.p[r * self.d..(r + 1) * self.d]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.p)
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let d = m.nrows();
        let mut p: Dense = SmallVec::with_capacity(d * d);
        for r in 0..d {
            for s in 0..d {
                // round-off can leave tiny negatives
                p.push(m[(r, s)].clamp(0.0, 1.0));
            }
        }
        TransitionMatrix { d, p }
    }
}

/// `exp(Q * eps)`. Two-state chains use the closed form; larger chains use
/// scaling and squaring with a degree-13 Padé approximant.
pub fn transition_matrix(q: &Generator, eps: f64) -> Result<TransitionMatrix> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::validation(format!("interval length must be finite and >= 0, got {eps}")));
    }
    Ok(if q.d == 2 {
        two_state_closed_form(q.entry(0, 1), q.entry(1, 0), eps)
    } else {
        transition_matrix_pade(q, eps)
    })
}

fn two_state_closed_form(a: f64, b: f64, eps: f64) -> TransitionMatrix {
    let total = a + b;
    // 1 - exp(-(a+b)eps), accurate for small arguments
    let decay = -(-total * eps).exp_m1();
    let p12 = a * decay / total;
    let p21 = b * decay / total;
    TransitionMatrix {
        d: 2,
        p: SmallVec::from_slice(&[1.0 - p12, p12, p21, 1.0 - p21]),
    }
}

/// Single entry `P(r, s)` of `exp(Q * eps)`; avoids the full matrix for two states.
#[inline]
pub fn transition_prob(q: &Generator, eps: f64, r: usize, s: usize) -> f64 {
    if q.d == 2 {
        let a = q.entry(0, 1);
        let b = q.entry(1, 0);
        let total = a + b;
        let decay = -(-total * eps).exp_m1();
        let off = if r == 0 { a } else { b } * decay / total;
        if r == s {
            1.0 - off
        } else {
            off
        }
    } else {
        transition_matrix_pade(q, eps).get(r, s)
    }
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential of `Q * eps` by scaling and squaring with the
/// degree-13 Padé approximant, for any state count.
pub fn transition_matrix_pade(q: &Generator, eps: f64) -> TransitionMatrix {
    let d = q.d;
    if eps == 0.0 {
        return TransitionMatrix::identity(d);
    }
    let mut a = q.to_matrix() * eps;
    // induced 1-norm: max column sum
    let norm = (0..d)
        .map(|c| a.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as u32
    } else {
        0
    };
    if squarings > 0 {
        a /= 2f64.powi(squarings as i32);
    }
    let ident = DMatrix::<f64>::identity(d, d);
    let b = &PADE13;
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    let numer = &v + &u;
    let denom = &v - &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular for scaled generators");
    for _ in 0..squarings {
        r = &r * &r;
    }
    TransitionMatrix::from_matrix(&r)
}

/// Stationary distribution of an irreducible generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDistribution(SmallVec<[f64; 3]>);

impl StationaryDistribution {
    #[inline]
    pub fn prob(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Solves `pi Q = 0`, `sum(pi) = 1` through the augmented linear system.
pub fn stationary(q: &Generator) -> Result<StationaryDistribution> {
    let d = q.d;
    if d == 2 {
        let a = q.entry(0, 1);
        let b = q.entry(1, 0);
        return Ok(StationaryDistribution(SmallVec::from_slice(&[
            b / (a + b),
            a / (a + b),
        ])));
    }
    // Rows of Q^T are the balance equations; the last one is redundant and
    // gets replaced by the normalisation constraint.
    let mut sys = q.to_matrix().transpose();
    for c in 0..d {
        sys[(d - 1, c)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::<f64>::zeros(d);
    rhs[d - 1] = 1.0;
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("singular system for stationary distribution"))?;
    let mut pi: SmallVec<[f64; 3]> = sol.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::numerical("degenerate stationary distribution"));
    }
    pi.iter_mut().for_each(|v| *v /= total);
    Ok(StationaryDistribution(pi))
}

/// Log of the stationary probability of one state.
#[inline]
pub fn log_stationary_prob(q: &Generator, k: usize) -> Result<f64> {
    Ok(stationary(q)?.prob(k).max(1e-300).ln())
}

/// Jump of a simulated path: the chain enters `state` at `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub time: f64,
    pub state: usize,
}

/// Exactly simulated trajectory on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplePath {
    pub start: usize,
    pub horizon: f64,
    pub jumps: Vec<Jump>,
}

impl SamplePath {
    pub fn state_at(&self, t: f64) -> usize {
        self.jumps
            .iter()
            .take_while(|j| j.time <= t)
            .last()
            .map_or(self.start, |j| j.state)
    }

    pub fn end_state(&self) -> usize {
        self.jumps.last().map_or(self.start, |j| j.state)
    }
}

/// Gillespie simulation: exponential holding times with rate `-Q(r,r)`, then a
/// jump to `s` with probability `Q(r,s) / -Q(r,r)`.
pub fn sample_path<R: Rng + ?Sized>(
    q: &Generator,
    start: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<SamplePath> {
    if start >= q.d {
        return Err(Error::validation(format!("start state {start} out of range")));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::validation(format!("horizon must be positive, got {horizon}")));
    }
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut state = start;
    loop {
        let exit = q.exit_rate(state);
        let hold = Exp::new(exit)
            .map_err(|e| Error::numerical(format!("holding-time distribution: {e}")))?
            .sample(rng);
        t += hold;
        if t > horizon {
            break;
        }
        let mut target = rng.random::<f64>() * exit;
        let mut next = state;
        for s in (0..q.d).filter(|&s| s != state) {
            next = s;
            target -= q.entry(state, s);
            if target < 0.0 {
                break;
            }
        }
        state = next;
        jumps.push(Jump { time: t, state });
    }
    Ok(SamplePath { start, horizon, jumps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Truncated power series `sum_k (Q eps)^k / k!`, independent of both
    /// production routes.
    // Truncated Taylor series on A / 2^s, squared back up s times.
    fn series_exp(q: &Generator, eps: f64, terms: usize) -> DMatrix<f64> {
        let mut a = q.to_matrix() * eps;
        let mut squarings = 0;
        while a.amax() > 0.25 {
            a /= 2.0;
            squarings += 1;
        }
        let d = q.n_states();
        let mut term = DMatrix::<f64>::identity(d, d);
        let mut acc = term.clone();
        for k in 1..=terms {
            term = &term * &a / k as f64;
            acc += &term;
        }
        for _ in 0..squarings {
            acc = &acc * &acc;
        }
        acc
    }

    #[test]
    fn two_state_generator_layout() {
        let q = build_generator(&[0.12, 0.37], 2).unwrap();
        assert_eq!(q.entry(0, 0), -0.12);
        assert_eq!(q.entry(0, 1), 0.12);
        assert_eq!(q.entry(1, 0), 0.37);
        assert_eq!(q.entry(1, 1), -0.37);

        let sym = build_generator(&[1.0, 1.0], 2).unwrap();
        assert_eq!(sym.to_matrix(), DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]));
    }

    #[test]
    fn three_state_diagonal_is_negative_row_sum() {
        let q = build_generator(&[0.5; 6], 3).unwrap();
        for r in 0..3 {
            assert_eq!(q.entry(r, r), -1.0);
            let row: f64 = (0..3).map(|s| q.entry(r, s)).sum();
            assert_eq!(row, 0.0);
        }
    }

    #[test]
    fn rejects_bad_rates_naming_the_transition() {
        let err = build_generator(&[0.1, 0.2, 0.0, 0.3, 0.4, 0.5], 3).unwrap_err();
        match err {
            Error::InvalidRate { from, to, .. } => assert_eq!((from, to), (1, 0)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(build_generator(&[f64::NAN, 1.0], 2).is_err());
        assert!(build_generator(&[1.0], 2).is_err());
    }

    #[test]
    fn slot_layout_round_trips() {
        for d in 2..6 {
            for k in 0..d * (d - 1) {
                let (r, s) = slot_pair(d, k);
                assert_ne!(r, s);
                assert_eq!(rate_slot(d, r, s), k);
            }
        }
    }

    #[test]
    fn zero_interval_is_identity() {
        let q = build_generator(&[0.3, 0.1, 0.7, 0.2, 0.4, 0.9], 3).unwrap();
        assert_eq!(transition_matrix(&q, 0.0).unwrap(), TransitionMatrix::identity(3));
        let q2 = build_generator(&[0.3, 0.1], 2).unwrap();
        assert_eq!(transition_matrix(&q2, 0.0).unwrap(), TransitionMatrix::identity(2));
    }

    #[test]
    fn closed_form_matches_series_oracle() {
        let q = build_generator(&[0.12, 0.37], 2).unwrap();
        let p = transition_matrix(&q, 1.0).unwrap();
        let oracle = series_exp(&q, 1.0, 30);
        for r in 0..2 {
            for s in 0..2 {
                assert!((p.get(r, s) - oracle[(r, s)]).abs() < 1e-14);
            }
        }
        // (0.12/0.49)(1 - e^{-0.49})
        assert!((p.get(0, 1) - 0.094_870).abs() < 5e-6);
        assert!((p.get(0, 1) - oracle[(0, 1)]).abs() < 1e-15);
    }

    #[test]
    fn pade_matches_series_oracle_for_three_states() {
        let q = build_generator(&[0.3, 0.1, 0.7, 0.2, 0.4, 0.9], 3).unwrap();
        for &eps in &[0.01, 0.5, 2.0, 7.5] {
            let p = transition_matrix(&q, eps).unwrap();
            let oracle = series_exp(&q, eps, 80);
            for r in 0..3 {
                for s in 0..3 {
                    assert!((p.get(r, s) - oracle[(r, s)]).abs() < 1e-12, "eps={eps}");
                }
            }
        }
    }

    #[test]
    fn symmetric_long_interval_reaches_uniform() {
        let q = build_generator(&[1.0, 1.0], 2).unwrap();
        let p = transition_matrix(&q, 50.0).unwrap();
        let pade = transition_matrix_pade(&q, 50.0);
        for r in 0..2 {
            for s in 0..2 {
                assert!((p.get(r, s) - 0.5).abs() < 1e-10);
                assert!((pade.get(r, s) - 0.5).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn negative_interval_rejected() {
        let q = build_generator(&[1.0, 1.0], 2).unwrap();
        assert!(transition_matrix(&q, -1.0).is_err());
        assert!(transition_matrix(&q, f64::INFINITY).is_err());
    }

    #[test]
    fn two_state_stationary_matches_null_space_solve() {
        let q = build_generator(&[0.12, 0.37], 2).unwrap();
        let pi = stationary(&q).unwrap();
        assert!((pi.prob(0) - 0.37 / 0.49).abs() < 1e-15);
        assert!((pi.prob(0) - 0.7551).abs() < 1e-4);
        // generic augmented solve, bypassing the closed form
        let mut sys = q.to_matrix().transpose();
        sys[(1, 0)] = 1.0;
        sys[(1, 1)] = 1.0;
        let sol = sys.lu().solve(&nalgebra::DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!((sol[0] - pi.prob(0)).abs() < 1e-14);
        assert!((sol[1] - pi.prob(1)).abs() < 1e-14);
    }

    #[test]
    fn equal_rates_give_uniform_stationary() {
        for d in 2..6 {
            let q = build_generator(&vec![0.7; d * (d - 1)], d).unwrap();
            let pi = stationary(&q).unwrap();
            for k in 0..d {
                assert!((pi.prob(k) - 1.0 / d as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn near_frozen_path_stays_put() {
        let q = build_generator(&[1e-3, 1e-3], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stayed = (0..10_000)
            .filter(|_| sample_path(&q, 1, 1e-6, &mut rng).unwrap().jumps.is_empty())
            .count();
        assert!(stayed >= 9_999);
    }

    #[test]
    fn mean_holding_time_is_inverse_rate() {
        let q = build_generator(&[1.0, 1.0], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut total = 0.0;
        let mut count = 0;
        while count < n {
            let path = sample_path(&q, 0, 50.0, &mut rng).unwrap();
            let first = path.jumps.first().unwrap().time;
            total += first;
            count += 1;
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean holding time {mean}");
    }

    #[test]
    fn long_run_state_frequencies_match_stationary() {
        let q = build_generator(&[0.12, 0.37], 2).unwrap();
        let pi = stationary(&q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let in_first = (0..n)
            .filter(|i| sample_path(&q, i % 2, 100.0, &mut rng).unwrap().end_state() == 0)
            .count();
        let freq = in_first as f64 / n as f64;
        let se = (pi.prob(0) * pi.prob(1) / n as f64).sqrt();
        assert!((freq - pi.prob(0)).abs() < 4.0 * se, "freq {freq}");
    }

    #[test]
    fn sample_path_is_deterministic_given_seed() {
        let q = build_generator(&[0.3, 0.1, 0.7, 0.2, 0.4, 0.9], 3).unwrap();
        let a = sample_path(&q, 0, 20.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_path(&q, 0, 20.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.jumps.windows(2).all(|w| w[0].time < w[1].time && w[0].state != w[1].state));
    }

    fn rates3() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..1.5, 6).prop_map(|v| v.into_iter().map(f64::exp).collect())
    }

    proptest! {
        #[test]
        fn chapman_kolmogorov(rates in rates3(), s in 0.0f64..4.0, t in 0.0f64..4.0) {
            let q = build_generator(&rates, 3).unwrap();
            let lhs = transition_matrix(&q, s + t).unwrap().to_matrix();
            let rhs = transition_matrix(&q, s).unwrap().to_matrix() * transition_matrix(&q, t).unwrap().to_matrix();
            prop_assert!((lhs - rhs).amax() < 1e-9);
        }

        #[test]
        fn rows_are_distributions(rates in rates3(), t in 0.0f64..30.0) {
            let p = transition_matrix(&build_generator(&rates, 3).unwrap(), t).unwrap();
            for r in 0..3 {
                let row: f64 = p.row(r).iter().sum();
                prop_assert!((row - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn stationary_is_left_fixed_point(rates in rates3(), t in 0.0f64..10.0) {
            let q = build_generator(&rates, 3).unwrap();
            let pi = stationary(&q).unwrap();
            let qm = q.to_matrix();
            for c in 0..3 {
                let v: f64 = (0..3).map(|r| pi.prob(r) * qm[(r, c)]).sum();
                prop_assert!(v.abs() < 1e-10);
            }
            let p = transition_matrix(&q, t).unwrap();
            for c in 0..3 {
                let v: f64 = (0..3).map(|r| pi.prob(r) * p.get(r, c)).sum();
                prop_assert!((v - pi.prob(c)).abs() < 1e-9);
            }
        }

        #[test]
        fn closed_form_agrees_with_pade(a in 1e-3f64..5.0, b in 1e-3f64..5.0, t in 0.0f64..20.0) {
            let q = build_generator(&[a, b], 2).unwrap();
            let cf = transition_matrix(&q, t).unwrap();
            let pd = transition_matrix_pade(&q, t);
            for r in 0..2 {
                for s in 0..2 {
                    prop_assert!((cf.get(r, s) - pd.get(r, s)).abs() < 1e-10);
                    prop_assert!((transition_prob(&q, t, r, s) - cf.get(r, s)).abs() < 1e-15);
                }
            }
        }
    }
}
