use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sums_cli::commands::{file_digest, read_samples, RunManifest};

fn sums(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sums"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = sums(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small simulated dataset with a short-run config next to it.
fn small_sim(dir: &Path, n: usize, n_iter: usize, burnin: usize, thin: usize) {
    ok(&["simulate", "--seed", "7", "--out", path(dir), "--n-subjects", &n.to_string()]);
    let conf = dir.join("fit.conf");
    let text = fs::read_to_string(&conf).unwrap();
    let text: String = text
        .lines()
        .map(|l| match l.split(" = ").next() {
            Some("n_iter") => format!("n_iter = {n_iter}"),
            Some("burnin") => format!("burnin = {burnin}"),
            Some("thin") => format!("thin = {thin}"),
            Some("adapt_burnin") => format!("adapt_burnin = {}", burnin.min(20)),
            _ => l.to_string(),
        })
        .map(|l| l + "\n")
        .collect();
    fs::write(conf, text).unwrap();
}

const SIM_FILES: [&str; 5] = ["panel.csv", "covariates.csv", "covariates_tv.csv", "truth.json", "fit.conf"];

#[test]
fn simulate_is_reproducible_and_matches_the_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--preset", "sm4", "--seed", "5", "--out", path(&a)]);
    ok(&["simulate", "--preset", "sm4", "--seed", "5", "--out", path(&b)]);
    for f in SIM_FILES {
        assert_eq!(file_digest(&a.join(f)).unwrap(), file_digest(&b.join(f)).unwrap(), "{f}");
    }
    let mut rdr = csv::Reader::from_path(a.join("panel.csv")).unwrap();
    let mut subjects = BTreeSet::new();
    let mut processes = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        subjects.insert(rec[0].to_string());
        processes.insert(rec[1].to_string());
    }
    assert_eq!(subjects.len(), 200);
    assert_eq!(processes.len(), 3);

    let c = tmp.path().join("c");
    ok(&["simulate", "--seed", "6", "--out", path(&c)]);
    assert_ne!(file_digest(&a.join("panel.csv")).unwrap(), file_digest(&c.join("panel.csv")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(sums(&["simulate", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(sums(&["fit", "--data", "x"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        sums(&["simulate", "--preset", "gusto", "--out", path(tmp.path())]).status.code(),
        Some(2)
    );

    let sim = tmp.path().join("sim");
    small_sim(&sim, 10, 20, 10, 1);
    let conf = sim.join("fit.conf");
    fs::write(&conf, fs::read_to_string(&conf).unwrap() + "burn_in = 5\n").unwrap();
    let out = sums(&["fit", "--data", path(&sim), "--config", path(&conf), "--out", path(&tmp.path().join("f"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("burn_in"));
}

#[test]
fn malformed_state_reports_its_row() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    small_sim(&sim, 10, 20, 10, 1);
    let panel = sim.join("panel.csv");
    let mut lines: Vec<String> = fs::read_to_string(&panel).unwrap().lines().map(String::from).collect();
    // line 6 of the file
    let mut fields: Vec<&str> = lines[5].split(',').collect();
    fields[3] = "two";
    lines[5] = fields.join(",");
    fs::write(&panel, lines.join("\n") + "\n").unwrap();
    let out = sums(&[
        "fit",
        "--data",
        path(&sim),
        "--config",
        path(&sim.join("fit.conf")),
        "--out",
        path(&tmp.path().join("fit")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 6"), "{err}");
}

fn fit(sim: &Path, out: &Path, chains: usize) {
    ok(&[
        "fit",
        "--data",
        path(sim),
        "--config",
        path(&sim.join("fit.conf")),
        "--out",
        path(out),
        "--chains",
        &chains.to_string(),
    ]);
}

#[test]
fn chains_differ_and_each_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    small_sim(&sim, 20, 60, 30, 1);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fit(&sim, &a, 2);
    fit(&sim, &b, 2);
    let digest = |d: &Path, k: usize| file_digest(&d.join(format!("chain-{k}/samples.jsonl"))).unwrap();
    assert_ne!(digest(&a, 1), digest(&a, 2));
    assert_eq!(digest(&a, 1), digest(&b, 1));
    assert_eq!(digest(&a, 2), digest(&b, 2));
    assert_eq!(read_samples(&a.join("chain-1/samples.jsonl")).unwrap().len(), 30);

    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.status, "complete");
    assert_eq!(manifest.chains.len(), 2);
    assert_ne!(manifest.chains[0].stream, manifest.chains[1].stream);
    assert_eq!(manifest.inputs["panel.csv"], file_digest(&sim.join("panel.csv")).unwrap());
    assert_eq!(manifest.inputs["config"], file_digest(&sim.join("fit.conf")).unwrap());
    // x1 is continuous, x2 binary
    assert_eq!(manifest.transforms.len(), 1);
    assert_eq!(manifest.transforms[0].name, "x1");
}

#[test]
fn samples_carry_the_documented_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    small_sim(&sim, 12, 12, 10, 1);
    let out = tmp.path().join("fit");
    fit(&sim, &out, 1);
    let text = fs::read_to_string(out.join("chain-1/samples.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let keys: BTreeSet<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    let expected: BTreeSet<&str> =
        ["iter", "M", "K_N", "c", "phi_star", "S", "beta", "gamma", "mu", "k0", "g0_edges", "log_lik"].into();
    assert_eq!(keys, expected);
    let c = first["c"].as_array().unwrap();
    assert_eq!(c.len(), 12);
    assert!(c.iter().all(|v| v.as_u64().unwrap() >= 1));
}

#[test]
fn summarize_without_saved_iterations_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    small_sim(&sim, 10, 20, 20, 1);
    let out = tmp.path().join("fit");
    fit(&sim, &out, 1);
    let res = sums(&["summarize", "--samples", path(&out), "--out", path(&tmp.path().join("s"))]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no saved iterations"));
}

#[test]
fn single_iteration_coclustering_is_the_partition_indicator() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    small_sim(&sim, 15, 21, 20, 1);
    let out = tmp.path().join("fit");
    fit(&sim, &out, 1);
    let summ = tmp.path().join("s");
    ok(&["summarize", "--samples", path(&out), "--out", path(&summ)]);
    let rec = &read_samples(&out.join("chain-1/samples.jsonl")).unwrap()[0];
    let mut rdr = csv::Reader::from_path(summ.join("coclustering.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 16);
    for (i, row) in rdr.records().enumerate() {
        let row = row.unwrap();
        for j in 0..15 {
            let v: f64 = row[j + 1].parse().unwrap();
            assert_eq!(v, if rec.c[i] == rec.c[j] { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn bf_table_has_one_row_per_coefficient_and_transition() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    small_sim(&sim, 20, 1100, 100, 2);
    let out = tmp.path().join("fit");
    fit(&sim, &out, 1);
    let summ = tmp.path().join("s");
    ok(&["summarize", "--samples", path(&out), "--out", path(&summ), "--bf-method", "normal"]);
    let mut rdr = csv::Reader::from_path(summ.join("bf_table.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["process", "covariate", "transition", "neg_log10_bf"]);
    let rows: Vec<(String, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            assert_eq!(&r[0], "1");
            assert!(r[3].parse::<f64>().unwrap().is_finite());
            (r[1].to_string(), r[2].to_string())
        })
        .collect();
    let expected: Vec<(String, String)> = ["x1", "x2", "z1", "z2"]
        .iter()
        .flat_map(|c| ["1->2", "2->1"].map(|t| (c.to_string(), t.to_string())))
        .collect();
    assert_eq!(rows, expected);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(summ.join("summary.json")).unwrap()).unwrap();
    for key in ["median_graph", "binder_partition", "entropy", "k_n_table", "m_table", "edge_probabilities"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    let edges = fs::read_to_string(summ.join("edge_probs.csv")).unwrap();
    assert_eq!(edges.lines().count(), 4);
    let phi = fs::read_to_string(summ.join("phi_by_cluster.csv")).unwrap();
    assert!(phi.starts_with("cluster,size,process,transition,mean,lower,upper"));
}

#[test]
fn rerun_summary_uses_the_fixed_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    small_sim(&sim, 12, 60, 40, 1);
    let out = tmp.path().join("fit");
    fit(&sim, &out, 1);
    let summ = tmp.path().join("s");
    ok(&["summarize", "--samples", path(&out), "--out", path(&summ), "--rerun", path(&sim)]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(summ.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cluster_rates_from_rerun"], true);
    let k = summary["binder_clusters"].as_u64().unwrap() as usize;
    let phi = fs::read_to_string(summ.join("phi_by_cluster.csv")).unwrap();
    assert_eq!(phi.lines().count(), 1 + 6 * k);
}
