//! Long-format CSV files.
//!
//! * `panel.csv`: `subject_id,process,time,state`; an empty state is allowed
//!   only at a subject-process's first time.
//! * `covariates.csv`: `subject_id,name,value`.
//! * `covariates_tv.csv`: `subject_id,process,time,name,value`, one row per
//!   panel time of every process that uses the covariate.
//!
//! Processes and states are 1-based. Subjects keep the order of their first
//! appearance in `panel.csv`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use sums_core::model::{PanelDataset, ProcessObservations, ProcessSpec, StudyDesign, Subject};

use crate::error::{CliError, Result};

pub const PANEL_FILE: &str = "panel.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const TV_COVARIATES_FILE: &str = "covariates_tv.csv";

/// Shortest decimal form that parses back to the same double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

struct PanelRow {
    row: u64,
    time: f64,
    state: Option<usize>,
}

/// Raw panel rows grouped by subject then 1-based process.
struct Panel {
    ids: Vec<String>,
    rows: Vec<BTreeMap<usize, Vec<PanelRow>>>,
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| CliError::Data {
        path: path.into(),
        row: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(CliError::Data {
            path: path.into(),
            row: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    Ok(())
}

/// Iterates data rows with their 1-based line numbers.
fn rows<'a>(path: &'a Path, rdr: &'a mut csv::Reader<File>) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + 'a {
    rdr.records().map(move |rec| {
        let rec = rec.map_err(|e| CliError::Data {
            path: path.into(),
            row: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line());
        Ok((row, rec))
    })
}

fn field<T: std::str::FromStr>(path: &Path, row: u64, rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| CliError::Data {
        path: path.into(),
        row,
        msg: format!("invalid {what} {raw:?}"),
    })
}

fn read_panel(path: &Path) -> Result<Panel> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["subject_id", "process", "time", "state"])?;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut panel = Panel { ids: Vec::new(), rows: Vec::new() };
    for item in rows(path, &mut rdr) {
        let (row, rec) = item?;
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(CliError::Data { path: path.into(), row, msg: "empty subject_id".into() });
        }
        let process: usize = field(path, row, &rec, 1, "process")?;
        if process == 0 {
            return Err(CliError::Data { path: path.into(), row, msg: "process indices start at 1".into() });
        }
        let time: f64 = field(path, row, &rec, 2, "time")?;
        if !time.is_finite() {
            return Err(CliError::Data { path: path.into(), row, msg: format!("invalid time {time}") });
        }
        let state = match rec.get(3).unwrap_or("") {
            "" => None,
            _ => {
                let s: usize = field(path, row, &rec, 3, "state")?;
                if s == 0 {
                    return Err(CliError::Data { path: path.into(), row, msg: "states start at 1".into() });
                }
                Some(s - 1)
            }
        };
        let i = *index.entry(id.clone()).or_insert_with(|| {
            panel.ids.push(id);
            panel.rows.push(BTreeMap::new());
            panel.rows.len() - 1
        });
        let seq = panel.rows[i].entry(process).or_default();
        if let Some(prev) = seq.last() {
            if time <= prev.time {
                return Err(CliError::Data {
                    path: path.into(),
                    row,
                    msg: format!("time {time} does not follow {} (row {})", prev.time, prev.row),
                });
            }
            if state.is_none() {
                return Err(CliError::Data {
                    path: path.into(),
                    row,
                    msg: "only the first time of a subject-process may have an empty state".into(),
                });
            }
        }
        seq.push(PanelRow { row, time, state });
    }
    if panel.ids.is_empty() {
        return Err(CliError::Input { path: path.into(), msg: "no observations".into() });
    }
    Ok(panel)
}

/// One process per panel index with the largest observed state as its size.
fn infer_design(panel: &Panel) -> Result<Vec<ProcessSpec>> {
    let p = panel.rows.iter().filter_map(|m| m.keys().next_back()).max().copied().unwrap_or(0);
    let mut states = vec![2usize; p];
    for m in &panel.rows {
        for (&h, seq) in m {
            for r in seq {
                if let Some(s) = r.state {
                    states[h - 1] = states[h - 1].max(s + 1);
                }
            }
        }
    }
    Ok(states
        .into_iter()
        .enumerate()
        .map(|(h, d)| ProcessSpec::new(format!("process_{}", h + 1), d))
        .collect())
}

fn read_covariates(path: &Path, ids: &HashMap<&str, usize>) -> Result<HashMap<(usize, String), f64>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["subject_id", "name", "value"])?;
    for item in rows(path, &mut rdr) {
        let (row, rec) = item?;
        let id = rec.get(0).unwrap_or("");
        let &i = ids.get(id).ok_or_else(|| CliError::Data {
            path: path.into(),
            row,
            msg: format!("subject {id:?} has no panel observations"),
        })?;
        let name = rec.get(1).unwrap_or("").to_string();
        let v: f64 = field(path, row, &rec, 2, "value")?;
        if out.insert((i, name.clone()), v).is_some() {
            return Err(CliError::Data { path: path.into(), row, msg: format!("duplicate covariate {name}") });
        }
    }
    Ok(out)
}

type TvKey = (usize, usize, u64, String);

fn read_tv_covariates(path: &Path, ids: &HashMap<&str, usize>) -> Result<HashMap<TvKey, f64>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["subject_id", "process", "time", "name", "value"])?;
    for item in rows(path, &mut rdr) {
        let (row, rec) = item?;
        let id = rec.get(0).unwrap_or("");
        let &i = ids.get(id).ok_or_else(|| CliError::Data {
            path: path.into(),
            row,
            msg: format!("subject {id:?} has no panel observations"),
        })?;
        let h: usize = field(path, row, &rec, 1, "process")?;
        let t: f64 = field(path, row, &rec, 2, "time")?;
        let name = rec.get(3).unwrap_or("").to_string();
        let v: f64 = field(path, row, &rec, 4, "value")?;
        if out.insert((i, h, t.to_bits(), name.clone()), v).is_some() {
            return Err(CliError::Data { path: path.into(), row, msg: format!("duplicate value for {name}") });
        }
    }
    Ok(out)
}

/// Reads the three CSVs from `dir`. `processes` fixes the design; an empty
/// slice infers one from the panel with no covariates.
pub fn load_dataset(dir: &Path, processes: &[ProcessSpec]) -> Result<PanelDataset> {
    let panel_path = dir.join(PANEL_FILE);
    let panel = read_panel(&panel_path)?;
    let specs = if processes.is_empty() { infer_design(&panel)? } else { processes.to_vec() };
    let design = StudyDesign::new(specs)?;
    let ids: HashMap<&str, usize> = panel.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let cov_path = dir.join(COVARIATES_FILE);
    let tv_path = dir.join(TV_COVARIATES_FILE);
    let covs = read_covariates(&cov_path, &ids)?;
    let tvs = read_tv_covariates(&tv_path, &ids)?;

    let mut subjects = Vec::with_capacity(panel.ids.len());
    for (i, (id, by_process)) in panel.ids.iter().zip(&panel.rows).enumerate() {
        if let Some(&h) = by_process.keys().find(|&&h| h > design.n_processes()) {
            let row = by_process[&h][0].row;
            return Err(CliError::Data {
                path: panel_path,
                row,
                msg: format!("process {h} is not in the design ({} processes)", design.n_processes()),
            });
        }
        let mut processes = Vec::with_capacity(design.n_processes());
        for (h0, spec) in design.processes().iter().enumerate() {
            let h = h0 + 1;
            let seq = by_process.get(&h).ok_or_else(|| CliError::Input {
                path: panel_path.clone(),
                msg: format!("subject {id} has no observations of process {h}"),
            })?;
            if let Some(r) = seq.iter().find(|r| r.state.is_some_and(|s| s >= spec.n_states)) {
                return Err(CliError::Data {
                    path: panel_path,
                    row: r.row,
                    msg: format!("state {} outside 1..{}", r.state.unwrap_or(0) + 1, spec.n_states),
                });
            }
            let x = spec
                .covariates
                .iter()
                .map(|name| {
                    covs.get(&(i, name.clone())).copied().ok_or_else(|| CliError::Input {
                        path: cov_path.clone(),
                        msg: format!("subject {id} has no value for covariate {name}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let mut z = Vec::with_capacity(seq.len() * spec.tv_covariates.len());
            for r in seq {
                for name in &spec.tv_covariates {
                    let v = tvs.get(&(i, h, r.time.to_bits(), name.clone())).ok_or_else(|| CliError::Input {
                        path: tv_path.clone(),
                        msg: format!("subject {id} process {h} has no value for {name} at time {}", r.time),
                    })?;
                    z.push(*v);
                }
            }
            let obs = ProcessObservations::new(
                seq.iter().map(|r| r.time).collect(),
                seq.iter().map(|r| r.state).collect(),
                x,
                z,
            )
            .map_err(|e| CliError::Data {
                path: panel_path.clone(),
                row: seq[0].row,
                msg: format!("subject {id} process {h}: {e}"),
            })?;
            processes.push(obs);
        }
        subjects.push(Subject { id: id.clone(), processes });
    }
    Ok(PanelDataset::new(design, subjects)?)
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(CliError::io(path))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: PathBuf::from(path),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes `panel.csv`, `covariates.csv` and `covariates_tv.csv` into `dir`.
pub fn write_dataset(dir: &Path, data: &PanelDataset) -> Result<()> {
    let design = data.design();
    let path = dir.join(PANEL_FILE);
    let mut w = writer(&path)?;
    let e = csv_err(&path);
    w.write_record(["subject_id", "process", "time", "state"]).map_err(&e)?;
    for s in data.subjects() {
        for (h, o) in s.processes.iter().enumerate() {
            for (j, &t) in o.times().iter().enumerate() {
                let state = if j == 0 && o.first_missing() { String::new() } else { (o.state(j) + 1).to_string() };
                w.write_record([s.id.as_str(), &(h + 1).to_string(), &fmt_f64(t), &state]).map_err(&e)?;
            }
        }
    }
    w.flush().map_err(CliError::io(&path))?;

    let path = dir.join(COVARIATES_FILE);
    let mut w = writer(&path)?;
    let e = csv_err(&path);
    w.write_record(["subject_id", "name", "value"]).map_err(&e)?;
    for s in data.subjects() {
        // a name shared by several processes is written once
        let mut done: Vec<&str> = Vec::new();
        for (h, o) in s.processes.iter().enumerate() {
            for (name, &v) in design.process(h).covariates.iter().zip(o.covariates()) {
                if !done.contains(&name.as_str()) {
                    done.push(name);
                    w.write_record([s.id.as_str(), name, &fmt_f64(v)]).map_err(&e)?;
                }
            }
        }
    }
    w.flush().map_err(CliError::io(&path))?;

    let path = dir.join(TV_COVARIATES_FILE);
    let mut w = writer(&path)?;
    let e = csv_err(&path);
    w.write_record(["subject_id", "process", "time", "name", "value"]).map_err(&e)?;
    for s in data.subjects() {
        for (h, o) in s.processes.iter().enumerate() {
            let names = &design.process(h).tv_covariates;
            for (j, &t) in o.times().iter().enumerate() {
                for (name, &v) in names.iter().zip(o.tv_row(j)) {
                    w.write_record([s.id.as_str(), &(h + 1).to_string(), &fmt_f64(t), name, &fmt_f64(v)])
                        .map_err(&e)?;
                }
            }
        }
    }
    w.flush().map_err(CliError::io(&path))?;
    Ok(())
}
