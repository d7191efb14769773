//! End-to-end experiment runs driven by a JSON config.
//!
//! A run generates a walk, builds the typed attention family, runs the
//! forward pass, computes the requested diagnostics and writes each artifact
//! plus a `manifest.json` listing SHA-256 hashes. Nothing in the artifacts
//! depends on wall-clock time, paths or the thread count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{mix, AttentionMap, SharedSequence};
use crate::dgp::{generate, non_neighbor_count, write_window_counts_csv, TokenSequence};
use crate::diagnostics::{
    energy, goodness, layer_diagnostics, noise_robustness, pca_align, write_coordinates_csv, write_energy_csv, ConvergenceReport,
    EnergyMode, ExtractionRule, LatentSnapshot, PcaFrame,
};
use crate::forward::{forward, init_embeddings, EmbeddingScheme, LayerSpec, Retention};
use crate::graph::{EigenOrder, Graph, GraphKind, ReweightedGraph, SpectralBasis, StationaryMode};
use crate::ingest::{classify, emit_report, AttentionDump, ReportFormat};

pub const ARTIFACT_VERSION: u32 = 1;
pub const STAGES: [&str; 4] = ["generate", "embeddings", "subsets", "noise"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn config_err(field: impl Into<String>, message: impl ToString) -> ExperimentError {
    ExperimentError::Config {
        field: field.into(),
        message: message.to_string(),
    }
}

fn stage<E: ToString>(stage: &'static str) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Spectra,
    Trace,
    Snapshot,
    Convergence,
    Energy,
    Pca,
    Noise,
    Classify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    Gaussian { d: usize },
    Orthogonal { d: usize },
    FromFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayersConfig {
    Repeat { repeat: usize, layer: LayerSpec },
    List(Vec<LayerSpec>),
}

impl LayersConfig {
    pub fn expand(&self) -> Vec<LayerSpec> {
        match self {
            LayersConfig::Repeat { repeat, layer } => vec![layer.clone(); *repeat],
            LayersConfig::List(l) => l.clone(),
        }
    }
}

fn default_window() -> usize {
    500
}

fn default_noise_epsilon() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `grid:RxC`, `ring:C`, `complete:C`, `path:C` or `file:PATH`.
    pub graph: String,
    #[serde(default)]
    pub stationary: StationaryMode,
    pub n: usize,
    #[serde(default)]
    pub epsilon: f64,
    pub embedding: EmbeddingConfig,
    pub layers: LayersConfig,
    pub q: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub emit: Vec<Artifact>,
    #[serde(default)]
    pub pca_frame: PcaFrame,
    #[serde(default = "default_extraction")]
    pub extraction: ExtractionRule,
    /// Noise level of the comparison run behind the `noise` artifact.
    #[serde(default = "default_noise_epsilon")]
    pub noise_epsilon: f64,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_extraction() -> ExtractionRule {
    ExtractionRule::LastOccurrence
}

/// A config with its graph resolved and every field checked.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub config: ExperimentConfig,
    pub graph: Graph,
    pub layers: Vec<LayerSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err("config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<ValidatedConfig> {
        let kind: GraphKind = self.graph.parse().map_err(|e| config_err("graph", e))?;
        let graph = Graph::build(&kind).map_err(|e| config_err("graph", e))?;
        let c = graph.vertex_count();
        if self.n <= 10 * c {
            return Err(config_err("n", format!("{} must exceed 10c = {}", self.n, 10 * c)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(config_err("epsilon", format!("{} is not in [0, 1)", self.epsilon)));
        }
        if self.emit.contains(&Artifact::Noise) && !(0.0..1.0).contains(&self.noise_epsilon) {
            return Err(config_err("noise_epsilon", format!("{} is not in [0, 1)", self.noise_epsilon)));
        }
        if self.q < 2 || self.q >= c {
            return Err(config_err("q", format!("{} must satisfy 2 ≤ q < c = {c}", self.q)));
        }
        if self.emit.contains(&Artifact::Noise) && (self.window == 0 || self.window > self.n) {
            return Err(config_err("window", format!("{} is not in 1..={}", self.window, self.n)));
        }
        let d = match &self.embedding {
            EmbeddingConfig::Gaussian { d } | EmbeddingConfig::Orthogonal { d } => {
                if *d < 2 {
                    return Err(config_err("embedding.d", format!("{d} is below 2")));
                }
                if matches!(self.embedding, EmbeddingConfig::Orthogonal { .. }) && *d < c {
                    return Err(config_err("embedding.d", format!("orthogonal embeddings need d ≥ c = {c}, got {d}")));
                }
                Some(*d)
            }
            EmbeddingConfig::FromFile { .. } => None,
        };
        let layers = self.layers.expand();
        if layers.is_empty() {
            return Err(config_err("layers", "at least one layer is required"));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer
                .rho
                .validate()
                .map_err(|e| config_err(format!("layers[{}].rho", i + 1), format!("layer {}: {e}", i + 1)))?;
            if let Some(d) = d {
                layer
                    .sigma
                    .validate(d)
                    .map_err(|e| config_err(format!("layers[{}].sigma", i + 1), format!("layer {}: {e}", i + 1)))?;
            }
        }
        let mut emit = self.emit.clone();
        emit.sort();
        emit.dedup();
        if emit.len() != self.emit.len() {
            return Err(config_err("emit", "duplicate artifact"));
        }
        Ok(ValidatedConfig {
            config: self.clone(),
            graph,
            layers,
        })
    }
}

/// Per-stage seeds drawn in `STAGES` order from a SplitMix64 stream.
pub fn stage_seeds(seed: u64) -> Vec<(String, u64)> {
    let mut sm = SplitMix64::seed_from_u64(seed);
    STAGES.iter().map(|s| (s.to_string(), sm.next_u64())).collect()
}

fn stage_seed(seeds: &[(String, u64)], name: &str) -> u64 {
    seeds.iter().find(|(s, _)| s == name).map(|(_, v)| *v).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: u32,
    pub seed: u64,
    pub splitter: String,
    pub stage_seeds: Vec<(String, u64)>,
    pub config_sha256: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| config_err("manifest", e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the config with the output directory blanked.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output = PathBuf::new();
    Ok(sha256_hex(&serde_json::to_vec(&c).map_err(stage("manifest"))?))
}

struct Sink {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Sink {
    fn put(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|source| ExperimentError::Io { path, source })?;
        self.files.push(ManifestEntry {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn csv<F, E>(&mut self, name: &str, st: &'static str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> std::result::Result<(), E>,
        E: ToString,
    {
        let mut buf = Vec::new();
        f(&mut buf).map_err(stage(st))?;
        self.put(name, buf)
    }
}

/// Everything a run computes, for callers that want the numbers as well as
/// the files.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub convergence: ConvergenceReport,
    pub snapshots: Vec<LatentSnapshot>,
    pub basis: SpectralBasis,
    pub rg: ReweightedGraph,
}

fn build_maps(seq: &TokenSequence, g: &Graph, layers: &[LayerSpec]) -> Result<Vec<AttentionMap>> {
    let shared = SharedSequence::new(seq);
    let family = shared.typed_family(g).map_err(stage("attention"))?;
    layers
        .iter()
        .map(|l| mix(family.clone(), l.rho).map_err(stage("attention")))
        .collect()
}

fn snapshots_of(
    seq: &TokenSequence,
    layers: &[LayerSpec],
    maps: &[AttentionMap],
    emb: &DMatrix<f64>,
    rule: ExtractionRule,
) -> Result<(Vec<LatentSnapshot>, DMatrix<f64>)> {
    let trace = forward(seq, layers, maps, emb, &Retention::All).map_err(stage("forward"))?;
    let snaps = (0..=layers.len())
        .map(|depth| {
            let v = trace.values(depth).expect("all depths retained");
            LatentSnapshot::extract(v, seq, depth, rule).map_err(stage("snapshot"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((snaps, trace.last().clone()))
}

/// Runs a validated config, writing artifacts into `config.output`.
pub fn run(v: &ValidatedConfig) -> Result<RunOutcome> {
    let cfg = &v.config;
    let seeds = stage_seeds(cfg.seed);
    let dir = cfg.output.clone();
    fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io { path: dir.clone(), source })?;
    let mut sink = Sink { dir, files: Vec::new() };

    let rg = ReweightedGraph::from_graph(v.graph.clone(), cfg.stationary).map_err(stage("spectra"))?;
    let basis = SpectralBasis::new(&rg, cfg.q, EigenOrder::Descending).map_err(stage("spectra"))?;
    let c = rg.vertex_count();
    let seq = generate(&rg, cfg.n, cfg.epsilon, stage_seed(&seeds, "generate")).map_err(stage("generate"))?;
    let scheme = match &cfg.embedding {
        EmbeddingConfig::Gaussian { .. } => EmbeddingScheme::Gaussian {
            seed: stage_seed(&seeds, "embeddings"),
        },
        EmbeddingConfig::Orthogonal { .. } => EmbeddingScheme::Orthogonal {
            seed: stage_seed(&seeds, "embeddings"),
        },
        EmbeddingConfig::FromFile { path } => EmbeddingScheme::FromFile { path: path.clone() },
    };
    let d = match &cfg.embedding {
        EmbeddingConfig::Gaussian { d } | EmbeddingConfig::Orthogonal { d } => *d,
        EmbeddingConfig::FromFile { .. } => 0,
    };
    let emb = init_embeddings(c, d, &scheme).map_err(stage("embeddings"))?;
    for (i, layer) in v.layers.iter().enumerate() {
        layer
            .sigma
            .validate(emb.nrows())
            .map_err(|e| config_err(format!("layers[{}].sigma", i + 1), format!("layer {}: {e}", i + 1)))?;
    }
    let maps = build_maps(&seq, &v.graph, &v.layers)?;
    let (snapshots, last) = snapshots_of(&seq, &v.layers, &maps, &emb, cfg.extraction)?;
    let final_snap = snapshots.last().expect("at least one layer");

    let per_layer = layer_diagnostics(&snapshots, &rg, &basis, cfg.pca_frame).map_err(stage("diagnose"))?;
    let rho = v.layers.last().expect("at least one layer").rho;
    let convergence = ConvergenceReport {
        goodness: goodness(&last, &final_snap.z, &seq).map_err(stage("diagnose"))?,
        layers: per_layer,
        decay_factor: basis.decay_factor(rho.a, rho.b).map_err(stage("diagnose"))?,
    };

    let mut emit = cfg.emit.clone();
    emit.sort();
    for artifact in emit {
        match artifact {
            Artifact::Spectra => sink.csv("spectra.csv", "spectra", |b| basis.write_csv(b))?,
            Artifact::Trace => {
                let trace = forward(&seq, &v.layers, &maps, &emb, &Retention::All).map_err(stage("forward"))?;
                let (bin, side) = (sink.dir.join("trace.bin"), sink.dir.join("trace.json"));
                trace.write(&bin, &side).map_err(stage("trace"))?;
                for p in [bin, side] {
                    let bytes = fs::read(&p).map_err(|source| ExperimentError::Io { path: p.clone(), source })?;
                    sink.files.push(ManifestEntry {
                        file: p.file_name().unwrap().to_string_lossy().into_owned(),
                        sha256: sha256_hex(&bytes),
                        bytes: bytes.len() as u64,
                    });
                }
            }
            Artifact::Snapshot => sink.csv("snapshot.csv", "snapshot", |b| final_snap.write_csv(b))?,
            Artifact::Convergence => {
                let mut buf = serde_json::to_vec_pretty(&convergence).map_err(stage("convergence"))?;
                buf.push(b'\n');
                sink.put("convergence.json", buf)?;
            }
            Artifact::Energy => {
                let reports = snapshots
                    .iter()
                    .map(|s| energy(&s.z, &rg, &basis, EnergyMode::Spectral).map(|e| (s.depth, e)))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(stage("energy"))?;
                sink.csv("energy.csv", "energy", |b| write_energy_csv(&reports, b))?;
            }
            Artifact::Pca => {
                let a = pca_align(&final_snap.z, &rg, &basis, cfg.pca_frame).map_err(stage("pca"))?;
                sink.csv("pca.csv", "pca", |b| write_coordinates_csv(&a.aligned, "pc", 1, b))?;
                sink.csv("eigvec.csv", "pca", |b| write_coordinates_csv(&a.eigen_coords, "eig", 2, b))?;
            }
            Artifact::Noise => {
                let noisy = generate(&rg, cfg.n, cfg.noise_epsilon, stage_seed(&seeds, "noise")).map_err(stage("noise"))?;
                let noisy_maps = build_maps(&noisy, &v.graph, &v.layers)?;
                let (noisy_snaps, _) = snapshots_of(&noisy, &v.layers, &noisy_maps, &emb, cfg.extraction)?;
                let clean = noise_robustness(&basis, &rg, &snapshots, cfg.pca_frame).map_err(stage("noise"))?;
                let dirty = noise_robustness(&basis, &rg, &noisy_snaps, cfg.pca_frame).map_err(stage("noise"))?;
                sink.csv("noise.csv", "noise", |b| -> csv::Result<()> {
                    let mut w = csv::Writer::from_writer(b);
                    w.write_record(["depth", "clean_angle", "noisy_angle"])?;
                    for (i, (a, n)) in clean.iter().zip(&dirty).enumerate() {
                        w.serialize((i, a, n))?;
                    }
                    w.flush()?;
                    Ok(())
                })?;
                let counts = non_neighbor_count(&noisy, &v.graph, cfg.window).map_err(stage("noise"))?;
                sink.csv("window_counts.csv", "noise", |b| write_window_counts_csv(&counts, b))?;
            }
            Artifact::Classify => {
                let n_layers = maps.len();
                let dump = AttentionDump::from_maps(&seq, n_layers, 1, maps.clone()).map_err(stage("classify"))?;
                let report = classify(&dump, &v.graph).map_err(stage("classify"))?;
                sink.csv("classify.csv", "classify", |b| emit_report(&report, ReportFormat::Csv, b))?;
            }
        }
    }

    let manifest = Manifest {
        artifact_version: ARTIFACT_VERSION,
        seed: cfg.seed,
        splitter: "splitmix64".into(),
        stage_seeds: seeds,
        config_sha256: config_hash(cfg)?,
        files: sink.files,
    };
    let path = sink.dir.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(stage("manifest"))?;
    writeln!(f).map_err(|source| ExperimentError::Io { path, source })?;
    Ok(RunOutcome {
        manifest,
        convergence,
        snapshots,
        basis,
        rg,
    })
}

/// Loads, validates and runs a config file; `output` overrides the
/// configured directory.
pub fn run_file(path: &Path, output: Option<&Path>) -> Result<RunOutcome> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = output {
        cfg.output = o.to_path_buf();
    }
    run(&cfg.validate()?)
}
