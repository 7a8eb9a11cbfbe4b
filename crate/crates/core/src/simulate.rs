//! Ground-truth panel generator.
//!
//! Subjects are simulated independently, each from its own ChaCha stream
//! (`stream i + 1`; stream 0 drives allocations and masking), so the output
//! depends only on the scenario and the seed.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctmc::{self, Generator};
use crate::error::{Error, Result};
use crate::model::{self, PanelDataset, ProcessObservations, ProcessSpec, RegressionParams, Role, StudyDesign, Subject};
use crate::sampler::chain_rng;

/// Observation-time rule: increments `N(mean, sd^2)` truncated below at
/// `lower`, accumulated from 0 while they stay inside `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid { horizon: 10.0, mean: 1.0, sd: 1.0, lower: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimScenario {
    pub n_subjects: usize,
    pub design: StudyDesign,
    pub proportions: Vec<f64>,
    pub phi_star: Vec<DVector<f64>>,
    pub params: RegressionParams,
    pub times: TimeGrid,
    /// Success probability of the binary time-homogeneous covariate.
    pub bernoulli_p: f64,
    /// Variance of the time-varying covariates around their means.
    pub tv_variance: f64,
    /// Fraction of subjects whose first state is masked, per process.
    pub missing_rate: f64,
    pub seed: u64,
}

/// Log crude rates the preset is built around.
pub const SM4_CRUDE_RATES: [f64; 6] = [0.12, 0.37, 0.11, 0.26, 0.21, 0.34];

impl SimScenario {
    /// Three binary processes, the first carrying `x1 ~ N(0,1)`,
    /// `x2 ~ Bernoulli(0.25)` and the time-varying `z1`, `z2`; two clusters
    /// with proportions (1/3, 2/3) and baselines shifted by one on the log scale.
    pub fn sm4(seed: u64) -> Self {
        let design = sm4_design();
        let crude = DVector::from_iterator(6, SM4_CRUDE_RATES.iter().map(|r| r.ln()));
        let shifted = crude.add_scalar(1.0);
        let mut params = RegressionParams::zeros(&design);
        params.beta[0] = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, -1.0]);
        params.gamma[0] = DMatrix::from_row_slice(2, 2, &[0.75, -1.25, 1.25, -0.75]);
        SimScenario {
            n_subjects: 200,
            design,
            proportions: vec![1.0 / 3.0, 2.0 / 3.0],
            phi_star: vec![crude, shifted],
            params,
            times: TimeGrid::default(),
            bernoulli_p: 0.25,
            tv_variance: 0.5,
            missing_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_subjects == 0 {
            return bad("scenario needs at least one subject".into());
        }
        if self.proportions.is_empty() || self.proportions.len() != self.phi_star.len() {
            return bad("one proportion per cluster baseline".into());
        }
        if self.proportions.iter().any(|p| !(*p >= 0.0)) || (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("cluster proportions must be non-negative and sum to 1".into());
        }
        let dp = self.design.total_rates();
        if self.phi_star.iter().any(|v| v.len() != dp) {
            return bad(format!("cluster baselines must have length {dp}"));
        }
        self.params.validate(&self.design)?;
        for h in 0..self.design.n_processes() {
            let g = self.design.n_covariates(h);
            let q = self.design.n_tv_covariates(h);
            if g != 0 && g != 2 || q != 0 && q != 2 {
                return bad(format!(
                    "process {} must carry either no covariates or the two generated ones",
                    h + 1
                ));
            }
        }
        let t = &self.times;
        if !(t.horizon > 0.0 && t.sd > 0.0 && t.lower > 0.0 && t.lower < t.horizon) {
            return bad("invalid observation-time rule".into());
        }
        if !(0.0..=1.0).contains(&self.bernoulli_p) || !(self.tv_variance > 0.0) {
            return bad("invalid covariate rule".into());
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1]".into());
        }
        Ok(())
    }
}

pub fn sm4_design() -> StudyDesign {
    StudyDesign::new(vec![
        ProcessSpec::new("progression", 2)
            .with_covariates(["x1", "x2"])
            .with_tv_covariates(["z1", "z2"]),
        ProcessSpec::new("marker_a", 2).with_role(Role::Explanatory),
        ProcessSpec::new("marker_b", 2).with_role(Role::Explanatory),
    ])
    .expect("preset design is valid")
}

/// Truncated-normal increment by rejection.
fn increment<R: Rng + ?Sized>(rule: &TimeGrid, rng: &mut R) -> f64 {
    let normal = Normal::new(rule.mean, rule.sd).expect("validated");
    loop {
        let v = normal.sample(rng);
        if v >= rule.lower {
            return v;
        }
    }
}

/// Observation grid starting at 0; the first point past the horizon is dropped.
pub fn gen_times<R: Rng + ?Sized>(rule: &TimeGrid, rng: &mut R) -> Vec<f64> {
    let mut times = vec![0.0];
    loop {
        let next = times[times.len() - 1] + increment(rule, rng);
        if next > rule.horizon {
            break;
        }
        times.push(next);
    }
    times
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCovariates {
    /// `(x1, x2)`.
    pub x: Vec<f64>,
    /// Row-major `n_times x 2`: `(z1, z2)` at every grid time.
    pub z: Vec<f64>,
}

/// Time-homogeneous `N(0,1)` and Bernoulli covariates plus the two
/// time-varying Gaussians with means `t/10` and `cos(2 pi t/10)`.
pub fn gen_covariates<R: Rng + ?Sized>(
    times: &[f64],
    horizon: f64,
    bernoulli_p: f64,
    tv_variance: f64,
    rng: &mut R,
) -> SubjectCovariates {
    let x1: f64 = StandardNormal.sample(rng);
    let x2 = f64::from(u8::from(Bernoulli::new(bernoulli_p).expect("validated").sample(rng)));
    let sd = tv_variance.sqrt();
    let mut z = Vec::with_capacity(2 * times.len());
    for &t in times {
        let e1: f64 = StandardNormal.sample(rng);
        let e2: f64 = StandardNormal.sample(rng);
        z.push(t / horizon + sd * e1);
        z.push((2.0 * std::f64::consts::PI * t / horizon).cos() + sd * e2);
    }
    SubjectCovariates { x: vec![x1, x2], z }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    /// 0-based cluster of each subject.
    pub allocations: Vec<usize>,
    pub phi_star: Vec<DVector<f64>>,
    pub params: RegressionParams,
    pub proportions: Vec<f64>,
    /// `(subject, process)` pairs whose first state was masked.
    pub masked: Vec<(usize, usize)>,
    /// True first states, including masked ones.
    pub initial: Vec<Vec<usize>>,
    /// Transitions per rate index along the latent continuous paths.
    pub latent_counts: Vec<f64>,
    /// Time at risk per rate index along the latent paths.
    pub latent_exposure: Vec<f64>,
}

impl SimTruth {
    /// Pooled crude rates of the latent paths: transitions over time at risk.
    pub fn latent_crude_rates(&self) -> Vec<f64> {
        self.latent_counts.iter().zip(&self.latent_exposure).map(|(c, e)| c / e).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub data: PanelDataset,
    pub truth: SimTruth,
}

/// Simulates one process over a grid with piecewise-constant rates: row `j`
/// of the time-varying covariates drives the interval ending at `t_j`, row 0
/// the stationary law of the first state.
#[allow(clippy::too_many_arguments)]
fn simulate_process<R: Rng + ?Sized>(
    design: &StudyDesign,
    h: usize,
    times: &[f64],
    phi: &DVector<f64>,
    x: &[f64],
    z: &[f64],
    params: &RegressionParams,
    counts: &mut [f64],
    exposure: &mut [f64],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let d = design.n_states(h);
    let q = design.n_tv_covariates(h);
    let phi_h = &phi.as_slice()[design.rate_range(h)];
    let generator = |j: usize| -> Result<Generator> {
        let row = &z[j * q..(j + 1) * q];
        let rates = model::process_rates(h, d, phi_h, x, row, &params.beta[h], &params.gamma[h])?;
        Generator::new(&rates, d)
    };
    let pi = ctmc::stationary(&generator(0)?)?;
    let mut states = vec![model::sample_discrete(pi.as_slice(), rng)];
    for j in 1..times.len() {
        let path = ctmc::sample_path(&generator(j)?, states[j - 1], times[j] - times[j - 1], rng)?;
        let (mut state, mut t) = (path.start, 0.0);
        for jump in path.jumps.iter().copied().chain(std::iter::once(ctmc::Jump { time: path.horizon, state: usize::MAX })) {
            for s in (0..d).filter(|&s| s != state) {
                exposure[design.rate_index(h, state, s)] += jump.time - t;
            }
            if jump.state != usize::MAX {
                counts[design.rate_index(h, state, jump.state)] += 1.0;
                state = jump.state;
            }
            t = jump.time;
        }
        states.push(path.end_state());
    }
    Ok(states)
}

pub fn gen_panel(scenario: &SimScenario) -> Result<SimOutput> {
    scenario.validate()?;
    let design = &scenario.design;
    let n = scenario.n_subjects;
    let p = design.n_processes();
    let mut rng = chain_rng(scenario.seed, 0);
    let allocations: Vec<usize> = (0..n).map(|_| model::sample_discrete(&scenario.proportions, &mut rng)).collect();

    let mut masked = Vec::new();
    if scenario.missing_rate > 0.0 {
        let k = (scenario.missing_rate * n as f64).ceil() as usize;
        for h in 0..p {
            let mut chosen = index::sample(&mut rng, n, k.min(n)).into_vec();
            chosen.sort_unstable();
            masked.extend(chosen.into_iter().map(|i| (i, h)));
        }
        masked.sort_unstable();
    }

    let dp = design.total_rates();
    let (mut counts, mut exposure) = (vec![0.0; dp], vec![0.0; dp]);
    let mut subjects = Vec::with_capacity(n);
    let mut initial = Vec::with_capacity(n);
    for (i, &cluster) in allocations.iter().enumerate() {
        let mut srng = chain_rng(scenario.seed, i as u64 + 1);
        let times = gen_times(&scenario.times, &mut srng);
        let cov = gen_covariates(&times, scenario.times.horizon, scenario.bernoulli_p, scenario.tv_variance, &mut srng);
        let mut processes = Vec::with_capacity(p);
        let mut first = Vec::with_capacity(p);
        for h in 0..p {
            let (x, z): (Vec<f64>, Vec<f64>) = (
                if design.n_covariates(h) > 0 { cov.x.clone() } else { vec![] },
                if design.n_tv_covariates(h) > 0 { cov.z.clone() } else { vec![] },
            );
            let states = simulate_process(design, h, &times, &scenario.phi_star[cluster], &x, &z, &scenario.params, &mut counts, &mut exposure, &mut srng)?;
            first.push(states[0]);
            let mut observed: Vec<Option<usize>> = states.into_iter().map(Some).collect();
            if masked.binary_search(&(i, h)).is_ok() {
                observed[0] = None;
            }
            processes.push(ProcessObservations::new(times.clone(), observed, x, z)?);
        }
        initial.push(first);
        subjects.push(Subject { id: format!("S{:03}", i + 1), processes });
    }
    let data = PanelDataset::new(design.clone(), subjects)?;
    Ok(SimOutput {
        data,
        truth: SimTruth {
            allocations,
            phi_star: scenario.phi_star.clone(),
            params: scenario.params.clone(),
            proportions: scenario.proportions.clone(),
            masked,
            initial,
            latent_counts: counts,
            latent_exposure: exposure,
        },
    })
}
