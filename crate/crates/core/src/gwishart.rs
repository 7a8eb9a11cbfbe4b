//! G-Wishart distribution on precision matrices constrained by a graph.
//!
//! Convention: unnormalised density `|Omega|^((nu-2)/2) exp(-tr(Psi Omega)/2)`
//! on the cone of positive-definite matrices with zeros at the non-edges of
//! `G`. For the complete graph this is a Wishart with `nu + D - 1` degrees of
//! freedom and scale `Psi^{-1}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::graphs::RateGraph;
use crate::linalg::{cholesky_lower, inverse_spd, log_det_spd, symmetrize};

pub const DIRECT_TOL: f64 = 1e-8;
pub const DIRECT_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct GWishartParams {
    pub nu: f64,
    pub psi: DMatrix<f64>,
    pub graph: RateGraph,
}

impl GWishartParams {
    pub fn new(nu: f64, psi: DMatrix<f64>, graph: RateGraph) -> Result<Self> {
        if !(nu.is_finite() && nu > 2.0) {
            return Err(Error::validation(format!("degrees of freedom must exceed 2, got {nu}")));
        }
        if psi.nrows() != psi.ncols() || psi.nrows() != graph.n_nodes() {
            return Err(Error::validation("scale matrix and graph dimensions disagree"));
        }
        if (&psi - psi.transpose()).amax() > 1e-12 * psi.amax().max(1.0) {
            return Err(Error::validation("scale matrix is not symmetric"));
        }
        cholesky_lower(&psi).map_err(|_| Error::validation("scale matrix is not positive definite"))?;
        Ok(GWishartParams { nu, psi, graph })
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn with_graph(&self, graph: RateGraph) -> Self {
        GWishartParams { graph, ..self.clone() }
    }
}

/// Positive-definite matrix with exact zeros at the non-edges of its graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix(DMatrix<f64>);

impl PrecisionMatrix {
    pub fn new(omega: DMatrix<f64>, graph: &RateGraph) -> Result<Self> {
        check_pattern(&omega, graph)?;
        cholesky_lower(&omega)?;
        Ok(PrecisionMatrix(omega))
    }

    pub fn identity(n: usize) -> Self {
        PrecisionMatrix(DMatrix::identity(n, n))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

fn check_pattern(omega: &DMatrix<f64>, graph: &RateGraph) -> Result<()> {
    let n = graph.n_nodes();
    if omega.shape() != (n, n) {
        return Err(Error::validation("precision matrix and graph dimensions disagree"));
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && !graph.has_edge(i, j) && omega[(i, j)] != 0.0 {
                return Err(Error::validation(format!(
                    "precision entry ({i}, {j}) = {} at a non-edge",
                    omega[(i, j)]
                )));
            }
        }
    }
    Ok(())
}

pub fn log_density_unnorm(omega: &DMatrix<f64>, params: &GWishartParams) -> Result<f64> {
    check_pattern(omega, &params.graph)?;
    let logdet = log_det_spd(omega)?;
    let trace = (&params.psi * omega).trace();
    Ok(0.5 * (params.nu - 2.0) * logdet - 0.5 * trace)
}

/// Multivariate log-gamma `log Gamma_p(a)`.
pub fn ln_mvgamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    0.25 * pf * (pf - 1.0) * std::f64::consts::PI.ln()
        + (0..p).map(|j| ln_gamma(a - 0.5 * j as f64)).sum::<f64>()
}

/// Log normalising constant of the complete-graph case, in closed form.
pub fn log_norm_const_full(nu: f64, psi: &DMatrix<f64>) -> Result<f64> {
    let p = psi.nrows();
    if p == 0 {
        return Ok(0.0);
    }
    let n = nu + p as f64 - 1.0;
    let logdet = log_det_spd(psi)?;
    Ok(0.5 * n * p as f64 * std::f64::consts::LN_2 - 0.5 * n * logdet + ln_mvgamma(p, 0.5 * n))
}

fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// Perfect elimination ladder of a chordal graph: pairs `(v, earlier
/// neighbours of v)` in maximum-cardinality-search order, or `None` if the
/// graph is not decomposable.
fn perfect_ladder(g: &RateGraph) -> Option<Vec<(usize, Vec<usize>)>> {
    let n = g.n_nodes();
    let mut numbered = vec![false; n];
    let mut weight = vec![0usize; n];
    let mut ladder = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| !numbered[v])
            .max_by_key(|&v| (weight[v], std::cmp::Reverse(v)))?;
        let earlier: Vec<usize> = g.neighbours(v).filter(|&w| numbered[w]).collect();
        for (a, &x) in earlier.iter().enumerate() {
            for &y in &earlier[a + 1..] {
                if !g.has_edge(x, y) {
                    return None;
                }
            }
        }
        numbered[v] = true;
        for w in g.neighbours(v) {
            if !numbered[w] {
                weight[w] += 1;
            }
        }
        ladder.push((v, earlier));
    }
    Some(ladder)
}

pub fn is_decomposable(g: &RateGraph) -> bool {
    perfect_ladder(g).is_some()
}

/// Exact log normalising constant for decomposable graphs, from the clique
/// and separator factorisation; `None` otherwise.
pub fn log_norm_const_decomposable(params: &GWishartParams) -> Result<Option<f64>> {
    let Some(ladder) = perfect_ladder(&params.graph) else {
        return Ok(None);
    };
    let mut total = 0.0;
    for (v, earlier) in ladder {
        let mut family = earlier.clone();
        family.push(v);
        family.sort_unstable();
        total += log_norm_const_full(params.nu, &submatrix(&params.psi, &family))?;
        if !earlier.is_empty() {
            total -= log_norm_const_full(params.nu, &submatrix(&params.psi, &earlier))?;
        }
    }
    Ok(Some(total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConstEstimate {
    pub log_value: f64,
    /// Delta-method standard error of `log_value`; zero for exact values.
    pub std_error: f64,
}

/// Monte Carlo estimate of the log normalising constant by the
/// Atay-Kayis & Massam change of variables.
pub fn log_norm_const_mc<R: Rng + ?Sized>(
    params: &GWishartParams,
    n_mc: usize,
    rng: &mut R,
) -> Result<NormConstEstimate> {
    if n_mc < 100 {
        return Err(Error::validation(format!("need at least 100 Monte Carlo draws, got {n_mc}")));
    }
    let p = params.dim();
    let g = &params.graph;
    let b = params.nu;

    // Psi^{-1} = T'T, T upper triangular
    let sigma = inverse_spd(&params.psi)?;
    let t = cholesky_lower(&sigma)?.transpose();

    let mut log_const = 0.5 * g.n_edges() as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut chi = Vec::with_capacity(p);
    for i in 0..p {
        let later = g.neighbours(i).filter(|&j| j > i).count() as f64;
        let earlier = g.neighbours(i).filter(|&j| j < i).count() as f64;
        let shape = b + later;
        log_const += 0.5 * shape * std::f64::consts::LN_2 + ln_gamma(0.5 * shape) + (shape + earlier) * t[(i, i)].ln();
        chi.push(ChiSquared::new(shape).map_err(|e| Error::numerical(e.to_string()))?);
    }
    if g.is_complete() {
        return Ok(NormConstEstimate { log_value: log_const, std_error: 0.0 });
    }

    let mut psi = DMatrix::<f64>::zeros(p, p);
    let mut phi = DMatrix::<f64>::zeros(p, p);
    let mut log_w = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        for i in 0..p {
            psi[(i, i)] = chi[i].sample(rng).sqrt();
            for j in (i + 1)..p {
                psi[(i, j)] = if g.has_edge(i, j) { StandardNormal.sample(rng) } else { 0.0 };
            }
        }
        let mut penalty = 0.0;
        for i in 0..p {
            phi[(i, i)] = psi[(i, i)] * t[(i, i)];
            for j in (i + 1)..p {
                if g.has_edge(i, j) {
                    phi[(i, j)] = (i..=j).map(|k| psi[(i, k)] * t[(k, j)]).sum();
                } else {
                    let cross: f64 = (0..i).map(|k| phi[(k, i)] * phi[(k, j)]).sum();
                    phi[(i, j)] = -cross / phi[(i, i)];
                    let partial: f64 = (i..j).map(|k| psi[(i, k)] * t[(k, j)]).sum();
                    psi[(i, j)] = (phi[(i, j)] - partial) / t[(j, j)];
                    penalty += psi[(i, j)] * psi[(i, j)];
                }
            }
        }
        log_w.push(-0.5 * penalty);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numerical("all importance weights underflowed"));
    }
    let n = n_mc as f64;
    let scaled: Vec<f64> = log_w.iter().map(|w| (w - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(NormConstEstimate {
        log_value: log_const + max + mean.ln(),
        std_error: (var / n).sqrt() / mean,
    })
}

/// Exact value when the graph is decomposable, Monte Carlo otherwise.
pub fn log_norm_const<R: Rng + ?Sized>(
    params: &GWishartParams,
    n_mc: usize,
    rng: &mut R,
) -> Result<NormConstEstimate> {
    match log_norm_const_decomposable(params)? {
        Some(v) => Ok(NormConstEstimate { log_value: v, std_error: 0.0 }),
        None => log_norm_const_mc(params, n_mc, rng),
    }
}

/// Wishart draw with `df` degrees of freedom and scale `L L'` (Bartlett).
pub fn sample_wishart<R: Rng + ?Sized>(df: f64, scale_chol: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = scale_chol.nrows();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = scale_chol * a;
    let mut k = &la * la.transpose();
    symmetrize(&mut k);
    Ok(k)
}

/// Exact G-Wishart draw by iterated block completion of a full Wishart draw.
pub fn sample_direct<R: Rng + ?Sized>(params: &GWishartParams, rng: &mut R) -> Result<PrecisionMatrix> {
    let p = params.dim();
    let sigma_scale = inverse_spd(&params.psi)?;
    let chol = cholesky_lower(&sigma_scale)?;
    let k_full = sample_wishart(params.nu + p as f64 - 1.0, &chol, rng)?;
    let g = &params.graph;
    if g.is_complete() {
        return Ok(PrecisionMatrix(k_full));
    }
    let sigma = inverse_spd(&k_full)?;
    let mut w = sigma.clone();
    let nbrs: Vec<Vec<usize>> = (0..p).map(|j| g.neighbours(j).collect()).collect();
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    for _ in 0..DIRECT_MAX_SWEEPS {
        let prev = w.clone();
        for j in 0..p {
            let nj = &nbrs[j];
            if nj.is_empty() {
                for i in (0..p).filter(|&i| i != j) {
                    w[(i, j)] = 0.0;
                    w[(j, i)] = 0.0;
                }
                continue;
            }
            let w_nn = submatrix(&w, nj);
            let s_nj = DVector::from_iterator(nj.len(), nj.iter().map(|&k| sigma[(k, j)]));
            let beta = w_nn
                .cholesky()
                .ok_or_else(|| Error::numerical("block completion lost positive definiteness"))?
                .solve(&s_nj);
            for i in (0..p).filter(|&i| i != j) {
                let v: f64 = nj.iter().zip(beta.iter()).map(|(&k, &b)| w[(i, k)] * b).sum();
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        last_change = (&w - &prev).amax();
        if last_change < DIRECT_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(format!(
            "direct sampler did not converge in {DIRECT_MAX_SWEEPS} sweeps (last change {last_change:e})"
        )));
    }
    let mut k = inverse_spd(&w)?;
    for i in 0..p {
        for j in 0..p {
            if i != j && !g.has_edge(i, j) {
                k[(i, j)] = 0.0;
            }
        }
    }
    symmetrize(&mut k);
    cholesky_lower(&k).map_err(|_| Error::numerical("completed precision matrix is not positive definite"))?;
    Ok(PrecisionMatrix(k))
}

/// Conjugate update with the mean integrated out:
/// `nu* = nu + M`, `Psi* = Psi + S + k0 M/(k0+M) (m - phibar)(m - phibar)'`.
pub fn posterior_params(
    phi_star: &[DVector<f64>],
    m_mu: &DVector<f64>,
    k0: f64,
    prior: &GWishartParams,
) -> Result<GWishartParams> {
    let m = phi_star.len();
    if m == 0 {
        return Err(Error::validation("need at least one component"));
    }
    let d = prior.dim();
    if phi_star.iter().any(|v| v.len() != d) || m_mu.len() != d {
        return Err(Error::validation("component vectors do not match the precision dimension"));
    }
    let mf = m as f64;
    let mut mean = DVector::<f64>::zeros(d);
    for v in phi_star {
        mean += v;
    }
    mean /= mf;
    let mut psi = prior.psi.clone();
    for v in phi_star {
        let c = v - &mean;
        psi += &c * c.transpose();
    }
    let shift = m_mu - &mean;
    psi += (&shift * shift.transpose()) * (k0 * mf / (k0 + mf));
    symmetrize(&mut psi);
    Ok(GWishartParams {
        nu: prior.nu + mf,
        psi,
        graph: prior.graph.clone(),
    })
}
