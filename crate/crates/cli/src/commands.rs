use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sums_core::model::{CovariateTransform, PanelDataset, ProcessSpec, StudyDesign};
use sums_core::nalgebra::DMatrix;
use sums_core::posterior::{self, ClusterPhi, DensityMethod, SummaryReport};
use sums_core::sampler::{run_chain, ChainSummary, SampleRecord, SampleSink};
use sums_core::simulate::{gen_panel, SimScenario};

use crate::config::FitConfig;
use crate::data::{self, csv_err, fmt_f64};
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const FIT_CONFIG_FILE: &str = "fit.conf";

/// Iterations of the configuration written next to a simulated preset.
pub const PRESET_ITERATIONS: usize = 25_000;
pub const PRESET_BURNIN: usize = 20_000;

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io {
        path: path.into(),
        source: e.into(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    write_json(&tmp, value)?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input {
        path: path.into(),
        msg: e.to_string(),
    })
}

/// Lowercase hex SHA-256 of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Ground truth of a simulated dataset. Labels, processes and subjects are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub preset: String,
    pub seed: u64,
    pub subjects: Vec<String>,
    pub allocations: Vec<usize>,
    pub proportions: Vec<f64>,
    pub phi_star: Vec<Vec<f64>>,
    /// Per process, `g x d(d-1)` rows.
    pub beta: Vec<Vec<Vec<f64>>>,
    pub gamma: Vec<Vec<Vec<f64>>>,
    /// `(subject, process)` pairs whose first state was masked.
    pub masked: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub preset: String,
    pub seed: u64,
    pub out: PathBuf,
    pub n_subjects: Option<usize>,
    pub missing_rate: Option<f64>,
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut scenario = match args.preset.as_str() {
        "sm4" => SimScenario::sm4(args.seed),
        other => return Err(CliError::Usage(format!("unknown preset {other:?}; available: sm4"))),
    };
    if let Some(n) = args.n_subjects {
        scenario.n_subjects = n;
    }
    if let Some(r) = args.missing_rate {
        scenario.missing_rate = r;
    }
    scenario.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = gen_panel(&scenario)?;
    create_dir(&args.out)?;
    data::write_dataset(&args.out, &out.data)?;
    let truth = TruthFile {
        preset: args.preset.clone(),
        seed: args.seed,
        subjects: out.data.subjects().iter().map(|s| s.id.clone()).collect(),
        allocations: out.truth.allocations.iter().map(|c| c + 1).collect(),
        proportions: out.truth.proportions.clone(),
        phi_star: out.truth.phi_star.iter().map(|v| v.iter().copied().collect()).collect(),
        beta: out.truth.params.beta.iter().map(matrix_rows).collect(),
        gamma: out.truth.params.gamma.iter().map(matrix_rows).collect(),
        masked: out.truth.masked.iter().map(|&(i, h)| (i + 1, h + 1)).collect(),
    };
    write_json(&args.out.join(TRUTH_FILE), &truth)?;

    let mut fit = FitConfig {
        processes: scenario.design.processes().to_vec(),
        ..FitConfig::default()
    };
    fit.chain.n_iter = PRESET_ITERATIONS;
    fit.chain.burnin = PRESET_BURNIN;
    fit.chain.seed = args.seed;
    let conf = args.out.join(FIT_CONFIG_FILE);
    fs::write(&conf, fit.render()).map_err(CliError::io(&conf))?;
    info!("wrote {} subjects to {}", scenario.n_subjects, args.out.display());
    Ok(())
}

/// Writes one JSON object per saved iteration.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        JsonlSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> SampleSink for JsonlSink<W> {
    fn record(&mut self, record: &SampleRecord) -> sums_core::Result<()> {
        let out = sums_core::Error::Output;
        serde_json::to_writer(&mut self.out, record).map_err(|e| out(e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| out(e.to_string()))
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CliError::Data {
            path: path.into(),
            row: i as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    /// 1-based.
    pub chain: usize,
    pub seed: u64,
    /// Random-number stream within the seed.
    pub stream: u64,
    pub samples: String,
    pub summary: Option<ChainSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub version: String,
    /// `running`, `complete` or `failed`.
    pub status: String,
    pub config: FitConfig,
    /// Design actually fitted, including an inferred one.
    pub design: Vec<ProcessSpec>,
    pub seed: u64,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub subjects: Vec<String>,
    pub transforms: Vec<CovariateTransform>,
    pub chains: Vec<ChainEntry>,
    pub started_unix: u64,
    pub elapsed_secs: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub out: PathBuf,
    pub chains: usize,
}

fn chain_dir(out: &Path, chain: usize) -> PathBuf {
    out.join(format!("chain-{chain}"))
}

/// Reads the configuration and data of a fit, applying the configured
/// standardisation.
pub fn prepare(config: &FitConfig, data_dir: &Path) -> Result<(PanelDataset, Vec<CovariateTransform>)> {
    let mut data = data::load_dataset(data_dir, &config.processes)?;
    let transforms = if config.standardize { data.standardize_covariates() } else { Vec::new() };
    Ok((data, transforms))
}

pub fn fit(args: &FitArgs) -> Result<RunManifest> {
    if args.chains == 0 {
        return Err(CliError::Usage("--chains must be at least 1".into()));
    }
    let text = fs::read_to_string(&args.config).map_err(CliError::io(&args.config))?;
    let config = FitConfig::parse(&text)?;
    config.chain.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (data, transforms) = prepare(&config, &args.data)?;

    let mut inputs = BTreeMap::new();
    for name in [data::PANEL_FILE, data::COVARIATES_FILE, data::TV_COVARIATES_FILE] {
        let path = args.data.join(name);
        if path.exists() {
            inputs.insert(name.to_string(), file_digest(&path)?);
        }
    }
    inputs.insert("config".to_string(), file_digest(&args.config)?);

    create_dir(&args.out)?;
    let mut manifest = RunManifest {
        software: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: "running".into(),
        config: config.clone(),
        design: data.design().processes().to_vec(),
        seed: config.chain.seed,
        inputs,
        subjects: data.subjects().iter().map(|s| s.id.clone()).collect(),
        transforms,
        chains: (1..=args.chains)
            .map(|k| ChainEntry {
                chain: k,
                seed: config.chain.seed,
                stream: (k - 1) as u64,
                samples: format!("chain-{k}/{SAMPLES_FILE}"),
                summary: None,
            })
            .collect(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        elapsed_secs: None,
    };
    let manifest_path = args.out.join(MANIFEST_FILE);
    write_json_atomic(&manifest_path, &manifest)?;

    let start = Instant::now();
    let results: Vec<Result<ChainSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (1..=args.chains)
            .map(|k| {
                let (config, data, out) = (&config, &data, &args.out);
                scope.spawn(move || run_one(config, data, out, k))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    manifest.elapsed_secs = Some(start.elapsed().as_secs_f64());
    let mut first_error = None;
    for (entry, result) in manifest.chains.iter_mut().zip(results) {
        match result {
            Ok(summary) => entry.summary = Some(summary),
            Err(e) => {
                warn!("chain {}: {e}", entry.chain);
                first_error.get_or_insert(e);
            }
        }
    }
    manifest.status = if first_error.is_some() { "failed" } else { "complete" }.into();
    write_json_atomic(&manifest_path, &manifest)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

#[derive(Serialize)]
struct FailureDump<'a> {
    iteration: usize,
    error: String,
    state: &'a sums_core::sampler::SamplerState,
}

fn run_one(config: &FitConfig, data: &PanelDataset, out: &Path, k: usize) -> Result<ChainSummary> {
    let dir = chain_dir(out, k);
    create_dir(&dir)?;
    let path = dir.join(SAMPLES_FILE);
    let file = File::create(&path).map_err(CliError::io(&path))?;
    let mut sink = JsonlSink::new(BufWriter::new(file));
    match run_chain(&config.chain, data, (k - 1) as u64, &mut sink) {
        Ok(summary) => {
            sink.into_inner().flush().map_err(CliError::io(&path))?;
            info!(
                "chain {k}: {} saved iterations in {:.1}s",
                summary.saved, summary.elapsed_secs
            );
            Ok(summary)
        }
        Err(e) => {
            let _ = sink.into_inner().flush();
            let dump = FailureDump {
                iteration: e.iteration,
                error: e.source.to_string(),
                state: &e.state,
            };
            write_json(&dir.join("failure.json"), &dump)?;
            Err(CliError::Chain {
                chain: k,
                iteration: e.iteration,
                source: e.source,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct SummarizeArgs {
    pub samples: PathBuf,
    pub out: PathBuf,
    pub method: DensityMethod,
    /// Rerun the sampler on this data with the Binder partition fixed.
    pub rerun: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub subjects: Vec<String>,
    pub chains: usize,
    pub bf_method: DensityMethod,
    pub cluster_rates_from_rerun: bool,
    #[serde(flatten)]
    pub report: SummaryReport,
}

/// Saved records of every chain listed in the manifest, in chain order.
pub fn load_fit(dir: &Path) -> Result<(RunManifest, Vec<SampleRecord>)> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut records = Vec::new();
    for c in &manifest.chains {
        records.extend(read_samples(&dir.join(&c.samples))?);
    }
    Ok((manifest, records))
}

pub fn summarize(args: &SummarizeArgs) -> Result<SummaryFile> {
    let (manifest, records) = load_fit(&args.samples)?;
    if records.is_empty() {
        return Err(CliError::Input {
            path: args.samples.clone(),
            msg: "no saved iterations".into(),
        });
    }
    let design = StudyDesign::new(manifest.design.clone())?;
    let mut report = posterior::summarize(&records, &design, args.method)?;
    if let Some(dir) = &args.rerun {
        let config = FitConfig {
            processes: manifest.design.clone(),
            ..manifest.config.clone()
        };
        let (data, _) = prepare(&config, dir)?;
        let part: Vec<usize> = report.binder_partition.iter().map(|c| c - 1).collect();
        report.phi_by_cluster = posterior::cluster_conditional_rerun(&config.chain, &data, &part)?;
    }
    create_dir(&args.out)?;
    write_edge_probs(&args.out.join("edge_probs.csv"), &report)?;
    write_bf_table(&args.out.join("bf_table.csv"), &report)?;
    write_coclustering(&args.out.join("coclustering.csv"), &report, &manifest.subjects)?;
    write_phi_by_cluster(&args.out.join("phi_by_cluster.csv"), &report.phi_by_cluster)?;
    let summary = SummaryFile {
        subjects: manifest.subjects.clone(),
        chains: manifest.chains.len(),
        bf_method: args.method,
        cluster_rates_from_rerun: args.rerun.is_some(),
        report,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(CliError::io(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_edge_probs(path: &Path, report: &SummaryReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["process_a", "process_b", "probability"]).map_err(&e)?;
    for ep in &report.edge_probabilities {
        w.write_record([ep.edge.0.to_string(), ep.edge.1.to_string(), fmt_f64(ep.probability)])
            .map_err(&e)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn write_bf_table(path: &Path, report: &SummaryReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["process", "covariate", "transition", "neg_log10_bf"]).map_err(&e)?;
    for r in &report.bf_table {
        w.write_record([r.process.to_string(), r.covariate.clone(), r.transition.clone(), fmt_f64(r.neg_log10_bf)])
            .map_err(&e)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn write_coclustering(path: &Path, report: &SummaryReport, subjects: &[String]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    let m = &report.coclustering;
    let names: Vec<String> = if subjects.len() == m.nrows() {
        subjects.to_vec()
    } else {
        (1..=m.nrows()).map(|i| i.to_string()).collect()
    };
    w.write_record(std::iter::once("subject_id").chain(names.iter().map(String::as_str)))
        .map_err(&e)?;
    for (i, name) in names.iter().enumerate() {
        let row = std::iter::once(name.clone()).chain((0..m.ncols()).map(|j| fmt_f64(m[(i, j)])));
        w.write_record(row).map_err(&e)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn write_phi_by_cluster(path: &Path, rows: &[ClusterPhi]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["cluster", "size", "process", "transition", "mean", "lower", "upper"])
        .map_err(&e)?;
    for r in rows {
        w.write_record([
            r.cluster.to_string(),
            r.size.to_string(),
            r.process.to_string(),
            r.transition.clone(),
            fmt_f64(r.phi.mean),
            fmt_f64(r.phi.lower),
            fmt_f64(r.phi.upper),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(CliError::io(path))
}
