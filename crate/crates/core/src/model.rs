//! Observation model: log-linear transition rates, the panel likelihood with a
//! stationary initial distribution, and the full conditional of a missing
//! first state.
//!
//! Each process `h` has its own state space, covariate sets and block of
//! baseline log-rates inside the length-`D_p` vector shared by all processes.
//! Time-varying covariates are piecewise constant: the values recorded at
//! observation `j` govern the interval ending at that observation, and the
//! values at the first observation govern the stationary distribution.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::ctmc::{self, rate_slot, slot_pair, Generator};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Rates of one process over one interval, in the shared layout.
pub type Rates = SmallVec<[f64; 6]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Response,
    Explanatory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub name: String,
    pub n_states: usize,
    pub role: Role,
    /// Names of the time-homogeneous covariates entering this process.
    pub covariates: Vec<String>,
    /// Names of the time-varying covariates entering this process.
    pub tv_covariates: Vec<String>,
}

impl ProcessSpec {
    pub fn new(name: impl Into<String>, n_states: usize) -> Self {
        ProcessSpec {
            name: name.into(),
            n_states,
            role: Role::Response,
            covariates: Vec::new(),
            tv_covariates: Vec::new(),
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn with_covariates<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.covariates = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_tv_covariates<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.tv_covariates = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn n_rates(&self) -> usize {
        self.n_states * (self.n_states - 1)
    }
}

/// Process layout and the map from `(process, from, to)` to a position in the
/// concatenated rate vector of length `D_p`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyDesign {
    processes: Vec<ProcessSpec>,
    offsets: Vec<usize>,
    total: usize,
}

impl StudyDesign {
    pub fn new(processes: Vec<ProcessSpec>) -> Result<Self> {
        if processes.is_empty() {
            return Err(Error::validation("design needs at least one process"));
        }
        let mut offsets = Vec::with_capacity(processes.len());
        let mut total = 0;
        for (h, p) in processes.iter().enumerate() {
            if p.n_states < 2 {
                return Err(Error::validation(format!(
                    "process {} ({}) needs at least 2 states",
                    h + 1,
                    p.name
                )));
            }
            offsets.push(total);
            total += p.n_rates();
        }
        Ok(StudyDesign { processes, offsets, total })
    }

    pub fn n_processes(&self) -> usize {
        self.processes.len()
    }

    pub fn processes(&self) -> &[ProcessSpec] {
        &self.processes
    }

    pub fn process(&self, h: usize) -> &ProcessSpec {
        &self.processes[h]
    }

    pub fn n_states(&self, h: usize) -> usize {
        self.processes[h].n_states
    }

    pub fn n_rates(&self, h: usize) -> usize {
        self.processes[h].n_rates()
    }

    /// `D_p`, the length of the concatenated log-rate vector.
    pub fn total_rates(&self) -> usize {
        self.total
    }

    pub fn rate_offset(&self, h: usize) -> usize {
        self.offsets[h]
    }

    pub fn rate_range(&self, h: usize) -> std::ops::Range<usize> {
        self.offsets[h]..self.offsets[h] + self.n_rates(h)
    }

    pub fn rate_index(&self, h: usize, from: usize, to: usize) -> usize {
        self.offsets[h] + rate_slot(self.n_states(h), from, to)
    }

    /// `(process, from, to)` for a position in the rate vector.
    pub fn rate_label(&self, index: usize) -> (usize, usize, usize) {
        let h = self.offsets.partition_point(|&o| o <= index) - 1;
        let (r, s) = slot_pair(self.n_states(h), index - self.offsets[h]);
        (h, r, s)
    }

    /// Process owning each rate position.
    pub fn rate_process(&self, index: usize) -> usize {
        self.rate_label(index).0
    }

    pub fn n_covariates(&self, h: usize) -> usize {
        self.processes[h].covariates.len()
    }

    pub fn n_tv_covariates(&self, h: usize) -> usize {
        self.processes[h].tv_covariates.len()
    }
}

/// Panel observations of one process for one subject.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessObservations {
    times: Vec<f64>,
    /// 0-based states; `states[0]` is a placeholder when `first_missing`.
    states: Vec<usize>,
    first_missing: bool,
    covariates: Vec<f64>,
    /// Row-major `n_obs x q` block of time-varying covariates.
    tv_covariates: Vec<f64>,
}

impl ProcessObservations {
    /// `states[0] == None` marks a missing first observation; missing values
    /// are not allowed anywhere else.
    pub fn new(
        times: Vec<f64>,
        states: Vec<Option<usize>>,
        covariates: Vec<f64>,
        tv_covariates: Vec<f64>,
    ) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::validation(format!(
                "need at least 2 observation times, got {}",
                times.len()
            )));
        }
        if states.len() != times.len() {
            return Err(Error::validation("times and states differ in length"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::validation("observation times must be finite"));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::validation(format!(
                "observation times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(j) = states.iter().skip(1).position(Option::is_none) {
            return Err(Error::validation(format!(
                "only the first state may be missing (missing at position {})",
                j + 2
            )));
        }
        if states[1..].iter().all(Option::is_none) {
            return Err(Error::validation("no observed states"));
        }
        let first_missing = states[0].is_none();
        let states: Vec<usize> = states.iter().map(|s| s.unwrap_or(0)).collect();
        if !tv_covariates.is_empty() && !tv_covariates.len().is_multiple_of(times.len()) {
            return Err(Error::validation("time-varying covariate block has the wrong shape"));
        }
        if covariates.iter().chain(&tv_covariates).any(|v| !v.is_finite()) {
            return Err(Error::validation("covariates must be finite"));
        }
        Ok(ProcessObservations {
            times,
            states,
            first_missing,
            covariates,
            tv_covariates,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Observed 0-based state at position `j`; the first entry is meaningless
    /// when [`first_missing`](Self::first_missing) is set.
    pub fn state(&self, j: usize) -> usize {
        self.states[j]
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn first_missing(&self) -> bool {
        self.first_missing
    }

    /// Length of the interval ending at observation `j >= 1`.
    pub fn interval(&self, j: usize) -> f64 {
        self.times[j] - self.times[j - 1]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn tv_width(&self) -> usize {
        self.tv_covariates.len() / self.times.len()
    }

    pub fn tv_row(&self, j: usize) -> &[f64] {
        let q = self.tv_width();
        &self.tv_covariates[j * q..(j + 1) * q]
    }

    pub(crate) fn covariates_mut(&mut self) -> &mut Vec<f64> {
        &mut self.covariates
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subject {
    pub id: String,
    pub processes: Vec<ProcessObservations>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelDataset {
    design: StudyDesign,
    subjects: Vec<Subject>,
}

impl PanelDataset {
    pub fn new(design: StudyDesign, subjects: Vec<Subject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::validation("dataset has no subjects"));
        }
        for s in &subjects {
            if s.processes.len() != design.n_processes() {
                return Err(Error::validation(format!(
                    "subject {} has {} processes, design has {}",
                    s.id,
                    s.processes.len(),
                    design.n_processes()
                )));
            }
            for (h, obs) in s.processes.iter().enumerate() {
                let d = design.n_states(h);
                let start = usize::from(obs.first_missing);
                if let Some(&bad) = obs.states[start..].iter().find(|&&k| k >= d) {
                    return Err(Error::validation(format!(
                        "subject {} process {}: state {} outside 1..{d}",
                        s.id,
                        h + 1,
                        bad + 1
                    )));
                }
                if obs.covariates.len() != design.n_covariates(h) {
                    return Err(Error::validation(format!(
                        "subject {} process {}: expected {} covariates, got {}",
                        s.id,
                        h + 1,
                        design.n_covariates(h),
                        obs.covariates.len()
                    )));
                }
                if obs.tv_covariates.len() != design.n_tv_covariates(h) * obs.n_obs() {
                    return Err(Error::validation(format!(
                        "subject {} process {}: expected {} time-varying covariates per time",
                        s.id,
                        h + 1,
                        design.n_tv_covariates(h)
                    )));
                }
            }
        }
        Ok(PanelDataset { design, subjects })
    }

    pub fn design(&self) -> &StudyDesign {
        &self.design
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn obs(&self, i: usize, h: usize) -> &ProcessObservations {
        &self.subjects[i].processes[h]
    }

    /// `(subject, process)` pairs whose first state is missing.
    pub fn missing_first(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, s) in self.subjects.iter().enumerate() {
            for (h, o) in s.processes.iter().enumerate() {
                if o.first_missing {
                    out.push((i, h));
                }
            }
        }
        out
    }

    /// Observed first states, with missing entries set to 0.
    pub fn initial_states(&self) -> Vec<Vec<usize>> {
        self.subjects
            .iter()
            .map(|s| s.processes.iter().map(|o| o.states[0]).collect())
            .collect()
    }

    /// Centres and scales every non-binary time-homogeneous covariate to mean
    /// 0 and unit sample variance across subjects. Columns with zero spread are
    /// left alone. Returns the transforms that were applied.
    pub fn standardize_covariates(&mut self) -> Vec<CovariateTransform> {
        let mut out = Vec::new();
        for h in 0..self.design.n_processes() {
            for j in 0..self.design.n_covariates(h) {
                let col: Vec<f64> = self.subjects.iter().map(|s| s.processes[h].covariates[j]).collect();
                if col.iter().all(|&v| v == 0.0 || v == 1.0) || col.len() < 2 {
                    continue;
                }
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                if !(sd > 0.0) {
                    continue;
                }
                for s in &mut self.subjects {
                    let x = &mut s.processes[h].covariates_mut()[j];
                    *x = (*x - mean) / sd;
                }
                out.push(CovariateTransform {
                    process: h,
                    name: self.design.process(h).covariates[j].clone(),
                    mean,
                    sd,
                });
            }
        }
        out
    }
}

/// `x -> (x - mean) / sd` applied to one covariate of one process (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransform {
    pub process: usize,
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Regression coefficients: per process a `g x d(d-1)` matrix for the
/// time-homogeneous covariates and a `q x d(d-1)` matrix for the time-varying ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionParams {
    pub beta: Vec<DMatrix<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
}

impl RegressionParams {
    pub fn zeros(design: &StudyDesign) -> Self {
        let n = design.n_processes();
        RegressionParams {
            beta: (0..n)
                .map(|h| DMatrix::zeros(design.n_covariates(h), design.n_rates(h)))
                .collect(),
            gamma: (0..n)
                .map(|h| DMatrix::zeros(design.n_tv_covariates(h), design.n_rates(h)))
                .collect(),
        }
    }

    pub fn validate(&self, design: &StudyDesign) -> Result<()> {
        for h in 0..design.n_processes() {
            let k = design.n_rates(h);
            if self.beta[h].shape() != (design.n_covariates(h), k)
                || self.gamma[h].shape() != (design.n_tv_covariates(h), k)
            {
                return Err(Error::validation(format!("coefficient shape mismatch for process {}", h + 1)));
            }
            if self.beta[h].iter().chain(self.gamma[h].iter()).any(|v| !v.is_finite()) {
                return Err(Error::validation("coefficients must be finite"));
            }
        }
        Ok(())
    }
}

/// Rates of process `h` given its baseline log-rate block and covariates.
pub fn process_rates(
    h: usize,
    n_states: usize,
    phi_h: &[f64],
    x: &[f64],
    z: &[f64],
    beta_h: &DMatrix<f64>,
    gamma_h: &DMatrix<f64>,
) -> Result<Rates> {
    let mut rates = Rates::with_capacity(phi_h.len());
    for (k, &base) in phi_h.iter().enumerate() {
        let mut eta = base;
        for (g, &xv) in x.iter().enumerate() {
            eta += xv * beta_h[(g, k)];
        }
        for (g, &zv) in z.iter().enumerate() {
            eta += zv * gamma_h[(g, k)];
        }
        let rate = eta.exp();
        if !(rate.is_finite() && rate > 0.0) {
            let (from, to) = slot_pair(n_states, k);
            return Err(Error::RateOverflow {
                process: h,
                from,
                to,
                predictor: eta,
            });
        }
        rates.push(rate);
    }
    Ok(rates)
}

/// Rates of process `h` at observation `j` for a subject with baseline
/// log-rates `phi` (full length `D_p`).
pub fn log_rates(
    design: &StudyDesign,
    h: usize,
    phi: &[f64],
    x: &[f64],
    z: &[f64],
    params: &RegressionParams,
) -> Result<Rates> {
    if phi.len() != design.total_rates() {
        return Err(Error::validation(format!(
            "baseline vector has length {}, expected {}",
            phi.len(),
            design.total_rates()
        )));
    }
    if x.len() != design.n_covariates(h) || z.len() != design.n_tv_covariates(h) {
        return Err(Error::validation("covariate dimensions do not match the design"));
    }
    process_rates(
        h,
        design.n_states(h),
        &phi[design.rate_range(h)],
        x,
        z,
        &params.beta[h],
        &params.gamma[h],
    )
}

/// Panel log-likelihood of one subject-process from explicit per-observation
/// rates: `rates[0]` drives the stationary law of the first state and
/// `rates[j]` the interval ending at observation `j`.
pub fn subject_process_loglik(
    obs: &ProcessObservations,
    n_states: usize,
    first_state: usize,
    rates: &[Rates],
) -> Result<f64> {
    if rates.len() != obs.n_obs() {
        return Err(Error::validation("need one rate vector per observation"));
    }
    let q0 = Generator::new(&rates[0], n_states)?;
    let mut ll = ctmc::log_stationary_prob(&q0, first_state)?;
    let mut prev = first_state;
    for (j, r) in rates.iter().enumerate().skip(1) {
        let q = Generator::new(r, n_states)?;
        let cur = obs.state(j);
        ll += ctmc::transition_prob(&q, obs.interval(j), prev, cur).max(PROB_FLOOR).ln();
        prev = cur;
    }
    Ok(ll)
}

/// Panel log-likelihood of one subject-process, computing the rates on the fly.
#[allow(clippy::too_many_arguments)]
pub fn process_loglik(
    design: &StudyDesign,
    h: usize,
    obs: &ProcessObservations,
    first_state: usize,
    phi_h: &[f64],
    beta_h: &DMatrix<f64>,
    gamma_h: &DMatrix<f64>,
) -> Result<f64> {
    let d = design.n_states(h);
    let x = obs.covariates();
    let rates0 = process_rates(h, d, phi_h, x, obs.tv_row(0), beta_h, gamma_h)?;
    let q0 = Generator::new(&rates0, d)?;
    let mut ll = ctmc::log_stationary_prob(&q0, first_state)?;
    let mut prev = first_state;
    for j in 1..obs.n_obs() {
        let rates = process_rates(h, d, phi_h, x, obs.tv_row(j), beta_h, gamma_h)?;
        let q = Generator::new(&rates, d)?;
        let cur = obs.state(j);
        ll += ctmc::transition_prob(&q, obs.interval(j), prev, cur).max(PROB_FLOOR).ln();
        prev = cur;
    }
    Ok(ll)
}

/// Sum over subjects and processes. `phis[i]` is subject `i`'s full baseline
/// vector and `initial[i][h]` the (observed or imputed) first state.
pub fn total_loglik(
    data: &PanelDataset,
    phis: &[Vec<f64>],
    params: &RegressionParams,
    initial: &[Vec<usize>],
) -> Result<f64> {
    let design = data.design();
    if phis.len() != data.n_subjects() || initial.len() != data.n_subjects() {
        return Err(Error::validation("one baseline vector and initial-state row per subject"));
    }
    let mut total = 0.0;
    for (i, subject) in data.subjects().iter().enumerate() {
        for (h, obs) in subject.processes.iter().enumerate() {
            total += process_loglik(
                design,
                h,
                obs,
                initial[i][h],
                &phis[i][design.rate_range(h)],
                &params.beta[h],
                &params.gamma[h],
            )?;
        }
    }
    Ok(total)
}

/// Normalised full conditional of the first state, proportional to
/// `p(k, Y_2; lambda_2, eps_2) * pi(k; lambda_1)`.
pub fn initial_state_probs(
    design: &StudyDesign,
    h: usize,
    obs: &ProcessObservations,
    phi_h: &[f64],
    beta_h: &DMatrix<f64>,
    gamma_h: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let d = design.n_states(h);
    let x = obs.covariates();
    let q1 = Generator::new(&process_rates(h, d, phi_h, x, obs.tv_row(0), beta_h, gamma_h)?, d)?;
    let q2 = Generator::new(&process_rates(h, d, phi_h, x, obs.tv_row(1), beta_h, gamma_h)?, d)?;
    initial_state_weights(&q1, &q2, obs.interval(1), obs.state(1))
}

/// Lower-level form of [`initial_state_probs`] on explicit generators.
pub fn initial_state_weights(q1: &Generator, q2: &Generator, eps: f64, next_state: usize) -> Result<Vec<f64>> {
    let pi = ctmc::stationary(q1)?;
    let p = ctmc::transition_matrix(q2, eps)?;
    let mut w: Vec<f64> = (0..q1.n_states())
        .map(|k| pi.prob(k) * p.get(k, next_state))
        .collect();
    let total: f64 = w.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::numerical("all candidate initial states have zero probability"));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Draws a missing first state from its full conditional.
pub fn impute_initial_state<R: Rng + ?Sized>(
    design: &StudyDesign,
    h: usize,
    obs: &ProcessObservations,
    phi_h: &[f64],
    beta_h: &DMatrix<f64>,
    gamma_h: &DMatrix<f64>,
    rng: &mut R,
) -> Result<usize> {
    let probs = initial_state_probs(design, h, obs, phi_h, beta_h, gamma_h)?;
    Ok(sample_discrete(&probs, rng))
}

/// Inverse-CDF draw from normalised probabilities.
pub(crate) fn sample_discrete<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (k, &p) in probs.iter().enumerate() {
        if u < p {
            return k;
        }
        u -= p;
    }
    // round-off: fall back to the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
