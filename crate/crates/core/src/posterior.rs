//! Summaries of saved iterations: graph, partition, entropy, Bayes factors
//! and cluster-level baseline rates.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Normal};

use crate::error::{Error, Result};
use crate::graphs;
use crate::model::{PanelDataset, StudyDesign};
use crate::sampler::{run_chain, ChainConfig, PosteriorChain, SampleRecord};

/// Minimum number of draws for a density-ratio Bayes factor.
pub const MIN_BF_SAMPLES: usize = 500;

/// Inclusion frequency of every process pair, in `all_pairs` order (0-based).
pub fn edge_probabilities(records: &[SampleRecord], p: usize) -> Vec<((usize, usize), f64)> {
    let n = records.len().max(1) as f64;
    graphs::all_pairs(p)
        .map(|(h, k)| {
            let hits = records
                .iter()
                .filter(|r| r.g0_edges.contains(&(h + 1, k + 1)))
                .count();
            ((h, k), hits as f64 / n)
        })
        .collect()
}

/// Pairs with inclusion probability strictly above one half.
pub fn median_graph(probs: &[((usize, usize), f64)]) -> Vec<(usize, usize)> {
    probs.iter().filter(|(_, p)| *p > 0.5).map(|(e, _)| *e).collect()
}

/// Fraction of partitions placing `i` and `j` together. Counts are summed as
/// integers, so the result is reproducible from the raw samples.
pub fn coclustering(partitions: &[Vec<usize>]) -> Result<DMatrix<f64>> {
    let first = partitions.first().ok_or_else(|| Error::validation("no saved iterations"))?;
    let n = first.len();
    let mut counts = vec![0u64; n * n];
    for c in partitions {
        if c.len() != n {
            return Err(Error::validation("partitions of different sizes"));
        }
        for i in 0..n {
            for j in 0..i {
                if c[i] == c[j] {
                    counts[i * n + j] += 1;
                }
            }
        }
    }
    let total = partitions.len() as f64;
    Ok(DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Greater => counts[i * n + j] as f64 / total,
        std::cmp::Ordering::Less => counts[j * n + i] as f64 / total,
    }))
}

/// Expected Binder loss with equal costs: `sum_{i<j} |1[c_i = c_j] - P(i ~ j)|`.
pub fn binder_loss(partition: &[usize], cocl: &DMatrix<f64>) -> f64 {
    let mut loss = 0.0;
    for i in 0..partition.len() {
        for j in 0..i {
            let same = if partition[i] == partition[j] { 1.0 } else { 0.0 };
            loss += (same - cocl[(i, j)]).abs();
        }
    }
    loss
}

/// Sampled partition with the smallest Binder loss; ties go to the earliest.
/// Returns its index and loss.
pub fn binder_partition(partitions: &[Vec<usize>], cocl: &DMatrix<f64>) -> Result<(usize, f64)> {
    if partitions.is_empty() {
        return Err(Error::validation("no saved iterations"));
    }
    let mut best = (0, f64::INFINITY);
    // identical partitions have identical losses; evaluate each once
    let mut seen: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for (t, c) in partitions.iter().enumerate() {
        let key = canonical(c);
        let loss = *seen.entry(key).or_insert_with(|| binder_loss(c, cocl));
        if loss < best.1 {
            best = (t, loss);
        }
    }
    Ok(best)
}

/// Relabels by first appearance, 0-based.
pub fn canonical(partition: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    partition
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Shannon entropy of the cluster proportions, `-sum (n_j/N) log(n_j/N)`.
pub fn partition_entropy(partition: &[usize]) -> f64 {
    let n = partition.len() as f64;
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in partition {
        *sizes.entry(c).or_default() += 1;
    }
    -sizes
        .values()
        .map(|&k| {
            let q = k as f64 / n;
            q * q.ln()
        })
        .sum::<f64>()
}

/// Hubert-Arabie adjusted Rand index.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions of different sizes");
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| choose2(v as f64)).sum();
    let sa: f64 = rows.values().map(|&v| choose2(v as f64)).sum();
    let sb: f64 = cols.values().map(|&v| choose2(v as f64)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean and equal-tailed 95% interval.
pub fn interval(values: &[f64]) -> Interval {
    let s = sorted(values);
    Interval {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        lower: quantile_sorted(&s, 0.025),
        upper: quantile_sorted(&s, 0.975),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMethod {
    /// Gaussian kernel, Silverman's rule-of-thumb bandwidth.
    #[default]
    Kde,
    /// Normal approximation from the sample mean and variance.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesFactor {
    pub bf: f64,
    pub neg_log10_bf: f64,
}

/// `0.9 min(sd, IQR/1.34) n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let s = sorted(samples);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Savage-Dickey ratio for `coef = 0`: posterior density at zero over the
/// `N(0, prior_sd^2)` density at zero.
pub fn savage_dickey_bf(samples: &[f64], prior_sd: f64, method: DensityMethod) -> Result<BayesFactor> {
    if samples.len() < MIN_BF_SAMPLES {
        return Err(Error::validation(format!(
            "need at least {MIN_BF_SAMPLES} samples for a Bayes factor, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::numerical("posterior samples have zero variance"));
    }
    let post = match method {
        DensityMethod::Kde => {
            let h = silverman_bandwidth(samples);
            let k = Normal::new(0.0, 1.0).expect("standard normal");
            samples.iter().map(|&x| k.pdf(x / h)).sum::<f64>() / (n * h)
        }
        DensityMethod::Normal => Normal::new(mean, var.sqrt()).expect("positive sd").pdf(0.0),
    };
    let prior = Normal::new(0.0, prior_sd)
        .map_err(|e| Error::validation(format!("prior sd: {e}")))?
        .pdf(0.0);
    let bf = post / prior;
    Ok(BayesFactor { bf, neg_log10_bf: -bf.log10() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfRow {
    /// 1-based process.
    pub process: usize,
    pub covariate: String,
    /// 1-based `from->to`.
    pub transition: String,
    pub neg_log10_bf: f64,
}

fn coefficient_samples(records: &[SampleRecord], h: usize, tv: bool, j: usize, k: usize) -> Vec<f64> {
    records
        .iter()
        .map(|r| if tv { r.gamma[h][j][k] } else { r.beta[h][j][k] })
        .collect()
}

/// One row per process, covariate and transition.
pub fn bf_table(records: &[SampleRecord], design: &StudyDesign, method: DensityMethod) -> Result<Vec<BfRow>> {
    let mut rows = Vec::new();
    for (h, spec) in design.processes().iter().enumerate() {
        let d = spec.n_states;
        let names = spec.covariates.iter().map(|n| (false, n)).chain(spec.tv_covariates.iter().map(|n| (true, n)));
        let (mut jx, mut jz) = (0, 0);
        for (tv, name) in names {
            let j = if tv { jz } else { jx };
            for k in 0..design.n_rates(h) {
                let (from, to) = crate::ctmc::slot_pair(d, k);
                let bf = savage_dickey_bf(&coefficient_samples(records, h, tv, j, k), 1.0, method)?;
                rows.push(BfRow {
                    process: h + 1,
                    covariate: name.clone(),
                    transition: format!("{}->{}", from + 1, to + 1),
                    neg_log10_bf: bf.neg_log10_bf,
                });
            }
            if tv {
                jz += 1;
            } else {
                jx += 1;
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPhi {
    /// 1-based cluster of the summarised partition.
    pub cluster: usize,
    pub size: usize,
    /// 1-based process.
    pub process: usize,
    pub transition: String,
    pub phi: Interval,
}

/// Per cluster of `partition`: the per-iteration average of the members'
/// baseline log-rates, summarised over iterations.
pub fn phi_by_cluster(records: &[SampleRecord], partition: &[usize], design: &StudyDesign) -> Vec<ClusterPhi> {
    let part = canonical(partition);
    let k = part.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &c) in part.iter().enumerate() {
        members[c].push(i);
    }
    let mut out = Vec::new();
    for (c, group) in members.iter().enumerate() {
        for idx in 0..design.total_rates() {
            let (h, from, to) = design.rate_label(idx);
            let draws: Vec<f64> = records
                .iter()
                .map(|r| group.iter().map(|&i| r.subject_phi(i)[idx]).sum::<f64>() / group.len() as f64)
                .collect();
            out.push(ClusterPhi {
                cluster: c + 1,
                size: group.len(),
                process: h + 1,
                transition: format!("{}->{}", from + 1, to + 1),
                phi: interval(&draws),
            });
        }
    }
    out
}

/// Reruns the sampler with the allocations frozen at `partition` (0-based)
/// and summarises every cluster's baseline log-rates.
pub fn cluster_conditional_rerun(
    config: &ChainConfig,
    data: &PanelDataset,
    partition: &[usize],
) -> Result<Vec<ClusterPhi>> {
    let mut cfg = config.clone();
    let part = canonical(partition);
    cfg.fixed_partition = Some(part.clone());
    cfg.init_partition = None;
    let mut chain = PosteriorChain::default();
    run_chain(&cfg, data, 0, &mut chain).map_err(|e| e.source)?;
    if chain.records.is_empty() {
        return Err(Error::validation("no saved iterations"));
    }
    Ok(phi_by_cluster(&chain.records, &part, data.design()))
}

fn frequency_table(values: impl Iterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut t = BTreeMap::new();
    for v in values {
        *t.entry(v).or_default() += 1;
    }
    t
}

/// Most frequent value; ties go to the smaller one.
pub fn mode(table: &BTreeMap<usize, usize>) -> Option<usize> {
    let max = table.values().copied().max()?;
    table.iter().find(|(_, &c)| c == max).map(|(&k, _)| k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeProbability {
    /// 1-based process pair.
    pub edge: (usize, usize),
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub n_saved: usize,
    pub edge_probabilities: Vec<EdgeProbability>,
    /// 1-based process pairs.
    pub median_graph: Vec<(usize, usize)>,
    /// 1-based labels.
    pub binder_partition: Vec<usize>,
    pub binder_iteration: usize,
    pub binder_loss: f64,
    pub binder_clusters: usize,
    pub entropy: Interval,
    pub k_n_table: BTreeMap<usize, usize>,
    pub m_table: BTreeMap<usize, usize>,
    pub k_n_mode: usize,
    pub m_mode: usize,
    #[serde(skip)]
    pub coclustering: DMatrix<f64>,
    #[serde(skip)]
    pub bf_table: Vec<BfRow>,
    #[serde(skip)]
    pub phi_by_cluster: Vec<ClusterPhi>,
}

pub fn summarize(records: &[SampleRecord], design: &StudyDesign, method: DensityMethod) -> Result<SummaryReport> {
    if records.is_empty() {
        return Err(Error::validation("no saved iterations"));
    }
    let partitions: Vec<Vec<usize>> = records.iter().map(|r| r.allocations()).collect();
    let cocl = coclustering(&partitions)?;
    let (best, loss) = binder_partition(&partitions, &cocl)?;
    let binder = canonical(&partitions[best]);
    let probs = edge_probabilities(records, design.n_processes());
    let entropies: Vec<f64> = partitions.iter().map(|c| partition_entropy(c)).collect();
    let k_n_table = frequency_table(records.iter().map(|r| r.k_n));
    let m_table = frequency_table(records.iter().map(|r| r.m));
    let has_coefficients = design
        .processes()
        .iter()
        .any(|s| !s.covariates.is_empty() || !s.tv_covariates.is_empty());
    let bf = if !has_coefficients {
        Vec::new()
    } else if records.len() < MIN_BF_SAMPLES {
        log::warn!(
            "{} saved iterations; Bayes factors need at least {MIN_BF_SAMPLES}, table left empty",
            records.len()
        );
        Vec::new()
    } else {
        bf_table(records, design, method)?
    };
    Ok(SummaryReport {
        n_saved: records.len(),
        edge_probabilities: probs
            .iter()
            .map(|&((h, k), p)| EdgeProbability { edge: (h + 1, k + 1), probability: p })
            .collect(),
        median_graph: median_graph(&probs).into_iter().map(|(h, k)| (h + 1, k + 1)).collect(),
        binder_clusters: binder.iter().max().map_or(0, |m| m + 1),
        binder_partition: binder.iter().map(|c| c + 1).collect(),
        binder_iteration: records[best].iter,
        binder_loss: loss,
        entropy: interval(&entropies),
        k_n_mode: mode(&k_n_table).unwrap_or(0),
        m_mode: mode(&m_table).unwrap_or(0),
        k_n_table,
        m_table,
        phi_by_cluster: phi_by_cluster(records, &binder, design),
        coclustering: cocl,
        bf_table: bf,
    })
}
