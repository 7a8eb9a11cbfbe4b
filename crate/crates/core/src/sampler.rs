//! Gibbs-within-Metropolis sampler over the full hierarchy.
//!
//! One iteration runs, in order: missing first states, the mixture sweep
//! (latent `u`, weights, non-allocated components, allocations, component
//! values, one block per process), regression coefficients, the graph move, a fresh precision draw,
//! and the conjugate `mu`/`k0` updates.
//!
//! The graph move is a Metropolis step on `G0` with the precision matrix and
//! the mean integrated out:
//! `p(G0 | phi*, k0) ∝ p(G0) I_G(nu*, Psi*) / I_G(nu, Psi)`.
//! The precision and mean are then drawn from their conditionals given the
//! new graph, so `(G0, Omega, mu)` is updated as one block.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{self, expand, ProcessGraph, RateGraph};
use crate::gwishart::{self, GWishartParams};
use crate::linalg::{cholesky_lower, quad_form, sample_normal_precision, standard_normal_vector};
use crate::mixture::{self, ComponentLikelihood, GaussianBase, MixtureHyper, MixtureState};
use crate::model::{self, PanelDataset, RegressionParams, StudyDesign};

/// Optimal random-walk scaling constant `2.38^2`.
pub const ADAPT_SCALE: f64 = 2.38 * 2.38;
pub const ADAPT_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burnin: usize,
    pub thin: usize,
    /// Iterations with a fixed spherical proposal before adaptation starts.
    pub adapt_burnin: usize,
    pub seed: u64,
    /// Monte Carlo draws per G-Wishart normalising constant.
    pub n_mc: usize,
    pub lambda: f64,
    pub gamma_s: f64,
    pub eta: f64,
    /// G-Wishart degrees of freedom; `D_p + 2` when unset.
    pub nu: Option<f64>,
    /// `Psi = psi_scale * I`; `1 / nu` when unset.
    pub psi_scale: Option<f64>,
    pub m_mu: f64,
    pub a_k0: f64,
    pub b_k0: f64,
    /// Per-coordinate variance of the component-value random walk.
    pub phi_proposal_var: f64,
    /// Per-coordinate variance of the coefficient proposals before adaptation.
    pub adapt_init_var: f64,
    /// Number of k-means clusters used to initialise the allocations.
    pub init_components: usize,
    /// Replace the likelihood with a constant.
    pub prior_only: bool,
    /// Keep the allocations fixed at this partition (0-based labels).
    pub fixed_partition: Option<Vec<usize>>,
    /// Starting partition (0-based labels) instead of k-means.
    pub init_partition: Option<Vec<usize>>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iter: 50_000,
            burnin: 40_000,
            thin: 2,
            adapt_burnin: 1000,
            seed: 1,
            n_mc: 1000,
            lambda: 0.01,
            gamma_s: 0.1,
            eta: 0.1,
            nu: None,
            psi_scale: None,
            m_mu: 0.0,
            a_k0: 1.0,
            b_k0: 1.0,
            phi_proposal_var: 0.25,
            adapt_init_var: 0.01,
            init_components: 5,
            prior_only: false,
            fixed_partition: None,
            init_partition: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.burnin > self.n_iter {
            return bad(format!("burnin {} exceeds n_iter {}", self.burnin, self.n_iter));
        }
        if self.adapt_burnin > self.burnin {
            return bad(format!("adapt_burnin {} exceeds burnin {}", self.adapt_burnin, self.burnin));
        }
        if self.thin == 0 {
            return bad("thin must be at least 1".into());
        }
        if self.n_mc < 100 {
            return bad(format!("n_mc must be at least 100, got {}", self.n_mc));
        }
        MixtureHyper::new(self.lambda, self.gamma_s)?;
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta must lie in (0, 1), got {}", self.eta));
        }
        if let Some(nu) = self.nu {
            if !(nu > 2.0 && nu.is_finite()) {
                return bad(format!("nu must exceed 2, got {nu}"));
            }
        }
        if let Some(s) = self.psi_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("psi_scale must be positive, got {s}"));
            }
        }
        for (name, v) in [
            ("a_k0", self.a_k0),
            ("b_k0", self.b_k0),
            ("phi_proposal_var", self.phi_proposal_var),
            ("adapt_init_var", self.adapt_init_var),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.m_mu.is_finite() {
            return bad("m_mu must be finite".into());
        }
        if self.init_components == 0 {
            return bad("init_components must be at least 1".into());
        }
        Ok(())
    }

    pub fn nu_for(&self, design: &StudyDesign) -> f64 {
        self.nu.unwrap_or(design.total_rates() as f64 + 2.0)
    }

    pub fn psi_scale_for(&self, design: &StudyDesign) -> f64 {
        self.psi_scale.unwrap_or(1.0 / self.nu_for(design))
    }

    /// Number of records a full run saves.
    pub fn n_saved(&self) -> usize {
        (self.n_iter - self.burnin) / self.thin
    }
}

/// Running-moment random-walk proposal for one coefficient block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveProposal {
    dim: usize,
    count: usize,
    mean: DVector<f64>,
    /// Sum of squared deviations (Welford).
    m2: DMatrix<f64>,
    adapt_after: usize,
    init_var: f64,
}

impl AdaptiveProposal {
    pub fn new(dim: usize, adapt_after: usize, init_var: f64) -> Self {
        AdaptiveProposal {
            dim,
            count: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            adapt_after,
            init_var,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds the state reached at the end of an iteration.
    pub fn observe(&mut self, x: &DVector<f64>) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    pub fn sample_covariance(&self) -> Option<DMatrix<f64>> {
        (self.count >= 2).then(|| &self.m2 / (self.count - 1) as f64)
    }

    pub fn is_adapting(&self) -> bool {
        self.count >= self.adapt_after.max(2)
    }

    /// Proposal covariance used for the next step.
    pub fn covariance(&self) -> DMatrix<f64> {
        match self.sample_covariance().filter(|_| self.is_adapting()) {
            Some(mut cov) => {
                for i in 0..self.dim {
                    cov[(i, i)] += ADAPT_JITTER;
                }
                cov * (ADAPT_SCALE / self.dim as f64)
            }
            None => DMatrix::identity(self.dim, self.dim) * self.init_var,
        }
    }

    pub fn draw_step<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(self.dim, rng);
        match cholesky_lower(&self.covariance()) {
            Ok(l) => l * z,
            Err(_) => z * self.init_var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerState {
    pub mixture: MixtureState,
    pub g0: ProcessGraph,
    pub g: RateGraph,
    pub omega: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub k0: f64,
    pub params: RegressionParams,
    /// First state of every subject-process, observed or imputed.
    pub initial: Vec<Vec<usize>>,
    pub iteration: usize,
}

/// One saved iteration. Component labels and process pairs are 1-based,
/// like every index in the input and output files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub iter: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K_N")]
    pub k_n: usize,
    pub c: Vec<usize>,
    pub phi_star: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    pub s: Vec<f64>,
    /// Per process, `g x d(d-1)` rows.
    pub beta: Vec<Vec<Vec<f64>>>,
    pub gamma: Vec<Vec<Vec<f64>>>,
    pub mu: Vec<f64>,
    pub k0: f64,
    pub g0_edges: Vec<(usize, usize)>,
    pub log_lik: f64,
}

impl SampleRecord {
    /// 0-based allocations.
    pub fn allocations(&self) -> Vec<usize> {
        self.c.iter().map(|&m| m - 1).collect()
    }

    /// Component value of (1-based-labelled) subject `i`'s cluster.
    pub fn subject_phi(&self, i: usize) -> &[f64] {
        &self.phi_star[self.c[i] - 1]
    }
}

pub trait SampleSink {
    fn record(&mut self, record: &SampleRecord) -> Result<()>;
}

/// In-memory collection of saved iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PosteriorChain {
    pub records: Vec<SampleRecord>,
}

impl SampleSink for PosteriorChain {
    fn record(&mut self, record: &SampleRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub proposed: u64,
    pub accepted: u64,
}

impl Acceptance {
    fn add(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub phi_star: Acceptance,
    pub beta: Vec<Acceptance>,
    pub gamma: Vec<Acceptance>,
    pub graph: Acceptance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub iterations: usize,
    pub saved: usize,
    pub acceptance: AcceptanceStats,
    pub elapsed_secs: f64,
}

/// A step failed; carries the state at the start of the failing iteration.
#[derive(Debug)]
pub struct ChainError {
    pub iteration: usize,
    pub source: Error,
    pub state: Box<SamplerState>,
}

impl std::fmt::Display for ChainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "iteration {}: {}", self.iteration, self.source)
    }
}

impl std::error::Error for ChainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Generator for chain `chain` of a run seeded with `seed`: ChaCha8 keyed by
/// the seed, one stream per chain.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Log-likelihood of one subject-process; `-inf` when the rates leave the
/// representable range.
fn process_ll(
    design: &StudyDesign,
    data: &PanelDataset,
    i: usize,
    h: usize,
    phi: &[f64],
    params: &RegressionParams,
    first: usize,
) -> f64 {
    let range = design.rate_range(h);
    match model::process_loglik(
        design,
        h,
        data.obs(i, h),
        first,
        &phi[range],
        &params.beta[h],
        &params.gamma[h],
    ) {
        Ok(v) => v,
        Err(e) => {
            log::debug!("subject {i} process {h}: {e}");
            f64::NEG_INFINITY
        }
    }
}

pub struct Sampler<'d> {
    data: &'d PanelDataset,
    config: ChainConfig,
    hyper: MixtureHyper,
    prior: GWishartParams,
    m_mu: DVector<f64>,
    state: SamplerState,
    /// Current log-likelihood of subject `i`, process `h`.
    ll: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    beta_props: Vec<AdaptiveProposal>,
    gamma_props: Vec<AdaptiveProposal>,
    prior_consts: BTreeMap<ProcessGraph, f64>,
    stats: AcceptanceStats,
}

impl<'d> Sampler<'d> {
    pub fn new(config: ChainConfig, data: &'d PanelDataset, chain: u64) -> Result<Self> {
        config.validate()?;
        let design = data.design();
        let dp = design.total_rates();
        if dp > graphs::MAX_RATE_NODES {
            return Err(Error::validation(format!("{dp} rates exceed the supported {}", graphs::MAX_RATE_NODES)));
        }
        let n = data.n_subjects();
        let p = design.n_processes();
        let mut rng = chain_rng(config.seed, chain);
        let hyper = MixtureHyper::new(config.lambda, config.gamma_s)?;
        let nu = config.nu_for(design);
        let psi = DMatrix::identity(dp, dp) * config.psi_scale_for(design);
        let g0 = ProcessGraph::empty(p);
        let g = expand(&g0, design);
        let prior = GWishartParams::new(nu, psi, g.clone())?;
        let m_mu = DVector::from_element(dp, config.m_mu);

        let initial: Vec<Vec<usize>> = data
            .subjects()
            .iter()
            .map(|s| {
                s.processes
                    .iter()
                    .map(|o| if o.first_missing() { o.state(1) } else { o.state(0) })
                    .collect()
            })
            .collect();

        let features = crude_log_rates(data, &initial);
        let (c, centres) = match config.fixed_partition.as_ref().or(config.init_partition.as_ref()) {
            Some(part) => {
                if part.len() != n {
                    return Err(Error::validation(format!(
                        "fixed partition has {} labels for {n} subjects",
                        part.len()
                    )));
                }
                let k = part.iter().max().map_or(0, |&m| m + 1);
                (part.clone(), centroids(&features, part, k))
            }
            None if config.prior_only => (vec![0; n], vec![DVector::from_element(dp, config.m_mu)]),
            None => kmeans(&features, config.init_components.min(n), &mut rng),
        };
        let k = centres.len();
        let s = {
            let mut counts = vec![0.0; k];
            for &m in &c {
                counts[m] += 1.0;
            }
            counts.iter().map(|&v| v + config.gamma_s).collect()
        };
        let mixture = MixtureState::new(c, centres, s, 1.0)?;
        let mut mu = DVector::zeros(dp);
        for v in &mixture.phi_star {
            mu += v;
        }
        mu /= mixture.n_components() as f64;

        let params = RegressionParams::zeros(design);
        let beta_props = (0..p)
            .map(|h| AdaptiveProposal::new(design.n_covariates(h) * design.n_rates(h), config.adapt_burnin, config.adapt_init_var))
            .collect();
        let gamma_props = (0..p)
            .map(|h| AdaptiveProposal::new(design.n_tv_covariates(h) * design.n_rates(h), config.adapt_burnin, config.adapt_init_var))
            .collect();
        let state = SamplerState {
            mixture,
            g0,
            g,
            omega: DMatrix::identity(dp, dp),
            mu,
            k0: 1.0,
            params,
            initial,
            iteration: 0,
        };
        let stats = AcceptanceStats {
            beta: vec![Acceptance::default(); p],
            gamma: vec![Acceptance::default(); p],
            ..Default::default()
        };
        let mut sampler = Sampler {
            data,
            config,
            hyper,
            prior,
            m_mu,
            state,
            ll: vec![vec![0.0; p]; n],
            rng,
            beta_props,
            gamma_props,
            prior_consts: BTreeMap::new(),
            stats,
        };
        sampler.refresh_loglik()?;
        // start the precision from its conditional rather than the identity
        sampler.step_omega()?;
        Ok(sampler)
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    /// For harnesses that place the chain in a chosen state. The likelihood
    /// cache is not refreshed, so only the data-free moves (graph, precision,
    /// mean) stay exact afterwards.
    pub fn state_mut(&mut self) -> &mut SamplerState {
        &mut self.state
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn acceptance(&self) -> &AcceptanceStats {
        &self.stats
    }

    fn design(&self) -> &'d StudyDesign {
        self.data.design()
    }

    /// Recomputes the likelihood cache from scratch.
    fn refresh_loglik(&mut self) -> Result<()> {
        let design = self.design();
        for i in 0..self.data.n_subjects() {
            let phi = self.state.mixture.phi_star[self.state.mixture.c[i]].as_slice().to_vec();
            for h in 0..design.n_processes() {
                self.ll[i][h] = if self.config.prior_only {
                    0.0
                } else {
                    process_ll(design, self.data, i, h, &phi, &self.state.params, self.state.initial[i][h])
                };
                if !self.ll[i][h].is_finite() {
                    return Err(Error::numerical(format!(
                        "initial log-likelihood of subject {i} process {} is not finite",
                        h + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_loglik(&self) -> f64 {
        self.ll.iter().flatten().sum()
    }

    pub fn step_missing(&mut self) -> Result<()> {
        if self.config.prior_only {
            return Ok(());
        }
        let design = self.design();
        for (i, h) in self.data.missing_first() {
            let phi = self.state.mixture.phi_star[self.state.mixture.c[i]].clone();
            let range = design.rate_range(h);
            let k = model::impute_initial_state(
                design,
                h,
                self.data.obs(i, h),
                &phi.as_slice()[range],
                &self.state.params.beta[h],
                &self.state.params.gamma[h],
                &mut self.rng,
            )?;
            if k != self.state.initial[i][h] {
                self.state.initial[i][h] = k;
                self.ll[i][h] = process_ll(design, self.data, i, h, phi.as_slice(), &self.state.params, k);
            }
        }
        Ok(())
    }

    fn base(&self) -> Result<GaussianBase> {
        GaussianBase::new(self.state.mu.clone(), self.state.omega.clone())
    }

    pub fn step_mixture(&mut self) -> Result<()> {
        let base = self.base()?;
        if self.config.fixed_partition.is_none() {
            mixture::update_u(&mut self.state.mixture, &mut self.rng)?;
            mixture::update_allocated_weights(&mut self.state.mixture, &self.hyper, &mut self.rng)?;
            mixture::update_nonallocated(&mut self.state.mixture, &self.hyper, &base, &mut self.rng)?;
            self.update_allocations()?;
        }
        // one random-walk block per process, as for the coefficients
        let sd = self.config.phi_proposal_var.sqrt();
        let design = self.design();
        let mut lik = PhiLikelihood {
            data: self.data,
            params: &self.state.params,
            initial: &self.state.initial,
            ll: &mut self.ll,
            pending: Vec::new(),
            process: 0,
            prior_only: self.config.prior_only,
        };
        let groups = self.state.mixture.members();
        let dp = base.dim();
        for (m, members) in groups.iter().enumerate() {
            for h in 0..design.n_processes() {
                let mut step = DVector::zeros(dp);
                for k in design.rate_range(h) {
                    step[k] = sd * self.rng.sample::<f64, _>(StandardNormal);
                }
                lik.process = h;
                let ok = mixture::phi_star_step(&mut self.state.mixture, m, members, &step, &mut lik, &base, &mut self.rng);
                self.stats.phi_star.add(ok);
            }
        }
        Ok(())
    }

    fn update_allocations(&mut self) -> Result<()> {
        let design = self.design();
        let n = self.data.n_subjects();
        let p = design.n_processes();
        let mcount = self.state.mixture.n_components();
        let mut per_process = vec![0.0; n * mcount * p];
        let mut table = DMatrix::zeros(n, mcount);
        if !self.config.prior_only {
            for i in 0..n {
                let current = self.state.mixture.c[i];
                for m in 0..mcount {
                    let base = (i * mcount + m) * p;
                    if m == current {
                        per_process[base..base + p].copy_from_slice(&self.ll[i]);
                    } else {
                        let phi = self.state.mixture.phi_star[m].as_slice();
                        for h in 0..p {
                            per_process[base + h] =
                                process_ll(design, self.data, i, h, phi, &self.state.params, self.state.initial[i][h]);
                        }
                    }
                    table[(i, m)] = per_process[base..base + p].iter().sum();
                }
            }
        }
        // remember the component values so the cache can follow relabelling
        let before: Vec<DVector<f64>> = self.state.mixture.phi_star.clone();
        let mut raw = self.state.mixture.clone();
        let log_s: Vec<f64> = raw.s.iter().map(|v| v.ln()).collect();
        let mut row = vec![0.0; mcount];
        for i in 0..n {
            for (m, r) in row.iter_mut().enumerate() {
                *r = table[(i, m)];
            }
            let probs = mixture::allocation_probs(&log_s, &row).ok_or_else(|| {
                Error::numerical(format!("subject {i} has zero likelihood under every component"))
            })?;
            raw.c[i] = model::sample_discrete(&probs, &mut self.rng);
        }
        if !self.config.prior_only {
            for i in 0..n {
                let base = (i * mcount + raw.c[i]) * p;
                self.ll[i].copy_from_slice(&per_process[base..base + p]);
            }
        }
        raw.compact();
        debug_assert!(raw.phi_star.iter().all(|v| before.contains(v)));
        self.state.mixture = raw;
        Ok(())
    }

    pub fn step_beta_gamma(&mut self) -> Result<()> {
        let design = self.design();
        for h in 0..design.n_processes() {
            for block in [Block::Beta, Block::Gamma] {
                let prop = match block {
                    Block::Beta => &self.beta_props[h],
                    Block::Gamma => &self.gamma_props[h],
                };
                if prop.dim() == 0 {
                    continue;
                }
                let step = prop.draw_step(&mut self.rng);
                let accepted = self.coefficient_move(h, block, &step);
                let current = self.coefficients(h, block);
                match block {
                    Block::Beta => {
                        self.stats.beta[h].add(accepted);
                        self.beta_props[h].observe(&current);
                    }
                    Block::Gamma => {
                        self.stats.gamma[h].add(accepted);
                        self.gamma_props[h].observe(&current);
                    }
                }
            }
        }
        Ok(())
    }

    fn coefficients(&self, h: usize, block: Block) -> DVector<f64> {
        let m = match block {
            Block::Beta => &self.state.params.beta[h],
            Block::Gamma => &self.state.params.gamma[h],
        };
        DVector::from_column_slice(m.as_slice())
    }

    /// Metropolis step adding `step` to a coefficient block under the iid
    /// standard-normal prior.
    fn coefficient_move(&mut self, h: usize, block: Block, step: &DVector<f64>) -> bool {
        let mut proposal = self.state.params.clone();
        let target = match block {
            Block::Beta => &mut proposal.beta[h],
            Block::Gamma => &mut proposal.gamma[h],
        };
        let old_sq: f64 = target.iter().map(|v| v * v).sum();
        for (v, d) in target.iter_mut().zip(step.iter()) {
            *v += d;
        }
        let new_sq: f64 = target.iter().map(|v| v * v).sum();
        let log_prior = -0.5 * (new_sq - old_sq);

        let n = self.data.n_subjects();
        let mut new_ll = vec![0.0; n];
        let mut delta = 0.0;
        if !self.config.prior_only {
            let design = self.design();
            for (i, slot) in new_ll.iter_mut().enumerate() {
                let phi = self.state.mixture.phi_star[self.state.mixture.c[i]].as_slice();
                *slot = process_ll(design, self.data, i, h, phi, &proposal, self.state.initial[i][h]);
                if !slot.is_finite() {
                    return false;
                }
                delta += *slot - self.ll[i][h];
            }
        }
        if self.rng.random::<f64>().ln() < delta + log_prior {
            self.state.params = proposal;
            if !self.config.prior_only {
                for (i, v) in new_ll.into_iter().enumerate() {
                    self.ll[i][h] = v;
                }
            }
            true
        } else {
            false
        }
    }

    fn prior_log_const(&mut self, g0: &ProcessGraph) -> Result<f64> {
        if let Some(&v) = self.prior_consts.get(g0) {
            return Ok(v);
        }
        let params = self.prior.with_graph(expand(g0, self.design()));
        let v = gwishart::log_norm_const(&params, self.config.n_mc, &mut self.rng)?.log_value;
        self.prior_consts.insert(g0.clone(), v);
        Ok(v)
    }

    /// Log acceptance ratio for toggling `h - k` of the current `G0`.
    pub fn log_graph_ratio(&mut self, h: usize, k: usize) -> Result<f64> {
        let g0 = self.state.g0.clone();
        let g0_new = g0.with_toggled(h, k);
        let post = gwishart::posterior_params(&self.state.mixture.phi_star, &self.m_mu, self.state.k0, &self.prior)?;
        let design = self.design();
        let post_new = gwishart::log_norm_const(&post.with_graph(expand(&g0_new, design)), self.config.n_mc, &mut self.rng)?;
        let post_old = gwishart::log_norm_const(&post.with_graph(expand(&g0, design)), self.config.n_mc, &mut self.rng)?;
        let prior_new = self.prior_log_const(&g0_new)?;
        let prior_old = self.prior_log_const(&g0)?;
        Ok(graphs::log_prior_ratio(&g0, h, k, self.config.eta)?
            + post_new.log_value
            - post_old.log_value
            + prior_old
            - prior_new)
    }

    fn apply_toggle(&mut self, h: usize, k: usize) {
        self.state.g0.toggle(h, k);
        self.state.g = expand(&self.state.g0, self.design());
    }

    /// One graph move on a uniformly chosen process pair. Returns whether it
    /// was accepted.
    pub fn step_graph(&mut self) -> Result<bool> {
        let p = self.design().n_processes();
        if p < 2 {
            return Ok(false);
        }
        let pairs: Vec<(usize, usize)> = graphs::all_pairs(p).collect();
        let (h, k) = pairs[self.rng.random_range(0..pairs.len())];
        let accepted = match self.log_graph_ratio(h, k) {
            Ok(r) => self.rng.random::<f64>().ln() < r,
            Err(e) => {
                log::warn!("graph move rejected: normalising constant failed: {e}");
                false
            }
        };
        if accepted {
            self.apply_toggle(h, k);
        }
        self.stats.graph.add(accepted);
        Ok(accepted)
    }

    /// Draws `Omega | G, phi*, k0` with the mean integrated out.
    pub fn step_omega(&mut self) -> Result<()> {
        let post = gwishart::posterior_params(&self.state.mixture.phi_star, &self.m_mu, self.state.k0, &self.prior)?
            .with_graph(self.state.g.clone());
        self.state.omega = gwishart::sample_direct(&post, &mut self.rng)?.into_inner();
        Ok(())
    }

    pub fn step_mu_k0(&mut self) -> Result<()> {
        let phis = &self.state.mixture.phi_star;
        let m = phis.len() as f64;
        let k0 = self.state.k0;
        let mut mean = &self.m_mu * k0;
        for v in phis {
            mean += v;
        }
        mean /= m + k0;
        let prec = &self.state.omega * (m + k0);
        let chol = cholesky_lower(&prec)?;
        self.state.mu = sample_normal_precision(&mean, &chol, &mut self.rng);

        let dp = self.state.mu.len() as f64;
        let dev = &self.state.mu - &self.m_mu;
        let rate = self.config.b_k0 + 0.5 * quad_form(&self.state.omega, &dev);
        let shape = self.config.a_k0 + 0.5 * dp;
        let gamma = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::numerical(format!("k0 conditional: {e}")))?;
        self.state.k0 = gamma.sample(&mut self.rng).max(f64::MIN_POSITIVE);
        Ok(())
    }

    /// One full iteration.
    pub fn iterate(&mut self) -> Result<()> {
        self.step_missing()?;
        self.step_mixture()?;
        self.step_beta_gamma()?;
        self.step_graph()?;
        self.step_omega()?;
        self.step_mu_k0()?;
        self.state.iteration += 1;
        self.check_invariants()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let st = &self.state;
        if st.g != expand(&st.g0, self.design()) {
            return Err(Error::numerical("rate graph is out of sync with the process graph"));
        }
        gwishart::PrecisionMatrix::new(st.omega.clone(), &st.g)?;
        st.mixture.check_invariants()?;
        if !(st.k0 > 0.0 && st.k0.is_finite()) || st.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("mean or scale left its support"));
        }
        if self.ll.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numerical("current log-likelihood is not finite"));
        }
        Ok(())
    }

    pub fn record(&self) -> SampleRecord {
        let st = &self.state;
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
        };
        SampleRecord {
            iter: st.iteration,
            m: st.mixture.n_components(),
            k_n: st.mixture.n_allocated(),
            c: st.mixture.c.iter().map(|&m| m + 1).collect(),
            phi_star: st.mixture.phi_star.iter().map(|v| v.as_slice().to_vec()).collect(),
            s: st.mixture.s.clone(),
            beta: st.params.beta.iter().map(rows).collect(),
            gamma: st.params.gamma.iter().map(rows).collect(),
            mu: st.mu.as_slice().to_vec(),
            k0: st.k0,
            g0_edges: st.g0.edges().into_iter().map(|(h, k)| (h + 1, k + 1)).collect(),
            log_lik: self.total_loglik(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Beta,
    Gamma,
}

/// Likelihood of the members of one component in one process, backed by
/// the sampler cache. Only block `process` of the component value moves, so
/// the other processes cancel from the ratio.
struct PhiLikelihood<'a> {
    data: &'a PanelDataset,
    params: &'a RegressionParams,
    initial: &'a [Vec<usize>],
    ll: &'a mut Vec<Vec<f64>>,
    pending: Vec<f64>,
    process: usize,
    prior_only: bool,
}

impl ComponentLikelihood for PhiLikelihood<'_> {
    fn loglik(&mut self, members: &[usize], phi: &DVector<f64>) -> f64 {
        self.pending.clear();
        if self.prior_only {
            return 0.0;
        }
        let design = self.data.design();
        let h = self.process;
        let mut total = 0.0;
        for &i in members {
            let v = process_ll(design, self.data, i, h, phi.as_slice(), self.params, self.initial[i][h]);
            if !v.is_finite() {
                return f64::NEG_INFINITY;
            }
            total += v;
            self.pending.push(v);
        }
        total
    }

    fn current(&self, members: &[usize]) -> f64 {
        if self.prior_only {
            return 0.0;
        }
        members.iter().map(|&i| self.ll[i][self.process]).sum()
    }

    fn commit(&mut self, members: &[usize]) {
        if self.prior_only {
            return;
        }
        for (&i, &v) in members.iter().zip(&self.pending) {
            self.ll[i][self.process] = v;
        }
    }
}

/// Per-subject log crude rates (transitions over time at risk), shrunk
/// towards the pooled rate with one unit of pseudo-exposure.
pub fn crude_log_rates(data: &PanelDataset, initial: &[Vec<usize>]) -> Vec<DVector<f64>> {
    let design = data.design();
    let dp = design.total_rates();
    let n = data.n_subjects();
    let mut counts = vec![vec![0.0; dp]; n];
    let mut exposure = vec![vec![0.0; dp]; n];
    for i in 0..n {
        for h in 0..design.n_processes() {
            let obs = data.obs(i, h);
            let d = design.n_states(h);
            let mut prev = initial[i][h];
            for j in 1..obs.n_obs() {
                let cur = obs.state(j);
                for s in (0..d).filter(|&s| s != prev) {
                    exposure[i][design.rate_index(h, prev, s)] += obs.interval(j);
                }
                if cur != prev {
                    counts[i][design.rate_index(h, prev, cur)] += 1.0;
                }
                prev = cur;
            }
        }
    }
    let pooled: Vec<f64> = (0..dp)
        .map(|k| {
            let c: f64 = counts.iter().map(|r| r[k]).sum();
            let e: f64 = exposure.iter().map(|r| r[k]).sum();
            (c + 0.5) / (e + 1.0)
        })
        .collect();
    (0..n)
        .map(|i| DVector::from_fn(dp, |k, _| ((counts[i][k] + pooled[k]) / (exposure[i][k] + 1.0)).ln()))
        .collect()
}

fn centroids(points: &[DVector<f64>], labels: &[usize], k: usize) -> Vec<DVector<f64>> {
    let d = points[0].len();
    let mut sums = vec![DVector::zeros(d); k];
    let mut n = vec![0usize; k];
    for (x, &l) in points.iter().zip(labels) {
        sums[l] += x;
        n[l] += 1;
    }
    sums.into_iter().zip(n).map(|(s, c)| s / c.max(1) as f64).collect()
}

/// Lloyd's algorithm with k-means++ seeding. Returns compacted labels
/// and one centre per non-empty cluster.
pub fn kmeans<R: Rng + ?Sized>(points: &[DVector<f64>], k: usize, rng: &mut R) -> (Vec<usize>, Vec<DVector<f64>>) {
    let n = points.len();
    let k = k.clamp(1, n);
    let dist2 = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm_squared();
    let mut centres = vec![points[rng.random_range(0..n)].clone()];
    while centres.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|x| centres.iter().map(|c| dist2(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let probs: Vec<f64> = d.iter().map(|v| v / total).collect();
        centres.push(points[model::sample_discrete(&probs, rng)].clone());
    }
    let mut labels = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, x) in points.iter().enumerate() {
            let best = (0..centres.len())
                .min_by(|&a, &b| dist2(x, &centres[a]).total_cmp(&dist2(x, &centres[b])))
                .unwrap();
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        let fresh = centroids(points, &labels, centres.len());
        let counts = labels.iter().fold(vec![0usize; centres.len()], |mut acc, &l| {
            acc[l] += 1;
            acc
        });
        for (m, c) in fresh.into_iter().enumerate() {
            if counts[m] > 0 {
                centres[m] = c;
            }
        }
        if !changed {
            break;
        }
    }
    // compact by first appearance, dropping empty clusters
    let mut map = vec![usize::MAX; centres.len()];
    let mut kept = Vec::new();
    for l in labels.iter_mut() {
        if map[*l] == usize::MAX {
            map[*l] = kept.len();
            kept.push(centres[*l].clone());
        }
        *l = map[*l];
    }
    (labels, kept)
}

/// Runs one chain, handing every saved iteration to `sink`.
pub fn run_chain<S: SampleSink + ?Sized>(
    config: &ChainConfig,
    data: &PanelDataset,
    chain: u64,
    sink: &mut S,
) -> std::result::Result<ChainSummary, ChainError> {
    let start = Instant::now();
    let mut sampler = Sampler::new(config.clone(), data, chain).map_err(|e| ChainError {
        iteration: 0,
        source: e,
        state: Box::new(SamplerState {
            mixture: MixtureState { s: vec![], phi_star: vec![], c: vec![], u: 0.0 },
            g0: ProcessGraph::empty(data.design().n_processes()),
            g: RateGraph::empty(0),
            omega: DMatrix::zeros(0, 0),
            mu: DVector::zeros(0),
            k0: 0.0,
            params: RegressionParams::zeros(data.design()),
            initial: data.initial_states(),
            iteration: 0,
        }),
    })?;
    let report_every = (config.n_iter / 20).max(1);
    let mut saved = 0;
    for it in 1..=config.n_iter {
        let snapshot = sampler.state.clone();
        if let Err(e) = sampler.iterate() {
            return Err(ChainError { iteration: it, source: e, state: Box::new(snapshot) });
        }
        if it > config.burnin && (it - config.burnin).is_multiple_of(config.thin) {
            sink.record(&sampler.record()).map_err(|e| ChainError {
                iteration: it,
                source: e,
                state: Box::new(sampler.state.clone()),
            })?;
            saved += 1;
        }
        if it % report_every == 0 {
            let a = &sampler.stats;
            log::info!(
                "stream {chain} iter {it}/{}: K_N={} M={} loglik={:.3} accept phi={:.3} graph={:.3}",
                config.n_iter,
                sampler.state.mixture.n_allocated(),
                sampler.state.mixture.n_components(),
                sampler.total_loglik(),
                a.phi_star.rate(),
                a.graph.rate()
            );
        }
    }
    Ok(ChainSummary {
        iterations: config.n_iter,
        saved,
        acceptance: sampler.stats.clone(),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
