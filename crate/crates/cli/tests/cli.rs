use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dclab_core::attention::{mix, MixtureWeights, SharedSequence};
use dclab_core::dgp::generate;
use dclab_core::graph::{Graph, ReweightedGraph, StationaryMode};
use dclab_core::ingest::{load_report_csv, write_dump, AttentionDump};

fn dclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dclab"))
        .args(args)
        .env_remove("DCLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/grid16.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn spectra_writes_sixteen_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spectra.json");
    let o = dclab(&["spectra", "--graph", "grid:4x4", "--out", s(&out), "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let eig = doc["eigenvalues"].as_array().unwrap();
    assert_eq!(eig.len(), 16);
    assert!((eig[0].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(doc["q"], 3);
}

#[test]
fn generate_writes_a_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seq.json");
    let o = dclab(&["generate", "--graph", "ring:8", "--n", "400", "--epsilon", "0.1", "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seq = dclab_core::dgp::TokenSequence::read_json(fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(seq.len(), 400);
    assert_eq!(&seq.tokens()[..8], &[0, 1, 2, 3, 4, 5, 6, 7]);
}

#[test]
fn generate_rejects_short_context() {
    let dir = tempfile::tempdir().unwrap();
    let o = dclab(&["generate", "--graph", "grid:4x4", "--n", "100", "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn classify_reports_one_row_per_head_plus_pooled() {
    let dir = tempfile::tempdir().unwrap();
    let g = Graph::grid(4, 4).unwrap();
    let rg = ReweightedGraph::from_graph(g.clone(), StationaryMode::Walk).unwrap();
    let seq = generate(&rg, 400, 0.0, 1).unwrap();
    let family = SharedSequence::new(&seq).typed_family(&g).unwrap();
    let maps = vec![
        mix(family.clone(), MixtureWeights::new(0.3, 0.4, 0.2, 0.1).unwrap()).unwrap(),
        family[3].clone(),
    ];
    let dump = dir.path().join("dump.jsonl.gz");
    write_dump(&AttentionDump::from_maps(&seq, 1, 2, maps).unwrap(), &dump).unwrap();
    let out = dir.path().join("report.csv");
    let o = dclab(&["classify", "--dump", s(&dump), "--graph", "grid:4x4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = load_report_csv(fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(report.heads.len(), 2);
    assert_eq!(report.heads[1].frac_t, 1.0);
}

#[test]
fn classify_rejects_malformed_dump() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("bad.jsonl");
    fs::write(&dump, "not json\n").unwrap();
    let o = dclab(&["classify", "--dump", s(&dump), "--graph", "grid:4x4", "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn diagnose_and_denoise_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let diag = dir.path().join("diag");
    let o = dclab(&["diagnose", "--graph", "grid:4x4", "--n", "2048", "--layers", "3", "--d", "16", "--out", s(&diag), "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let layers = fs::read_to_string(diag.join("layers.csv")).unwrap();
    assert_eq!(layers.lines().count(), 5);
    assert!(diag.join("convergence.json").exists());

    let noise = dir.path().join("noise");
    let o = dclab(&["denoise", "--graph", "grid:4x4", "--n", "2048", "--epsilon", "0.01", "--layers", "2", "--d", "16", "--out", s(&noise)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(noise.join("noise.csv")).unwrap();
    assert!(curve.starts_with("depth,clean_angle,noisy_angle"));
    assert!(noise.join("window_counts.csv").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = dclab(&["spectra", "--graph", "grid:4x4", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_mixture_names_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(config()).unwrap()).unwrap();
    cfg["layers"] = serde_json::json!([
        { "rho": { "a": 0.25, "b": 0.5, "o": 0.2, "t": 0.05 }, "sigma": { "kind": "identity" }, "residual": false },
        { "rho": { "a": 0.2, "b": 0.5, "o": 0.2, "t": 0.0 }, "sigma": { "kind": "identity" }, "residual": false }
    ]);
    let path = dir.path().join("bad.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = dclab(&["run", s(&path), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("layer 2"), "{}", stderr(&o));
}

#[test]
fn run_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut printed = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(threads);
        let o = dclab(&["--threads", threads, "run", s(&config()), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let files: Vec<_> = fs::read_dir(&out).unwrap().collect();
        // Six data files and the manifest.
        assert_eq!(files.len(), 7, "{files:?}");
        assert!(out.join("manifest.json").exists());
        printed.push(o.stdout);
    }
    assert_eq!(printed[0], printed[1]);
    assert_eq!(String::from_utf8_lossy(&printed[0]).lines().count(), 6);
}
