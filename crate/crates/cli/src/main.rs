use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dclab_core::attention::MixtureWeights;
use dclab_core::dgp::generate;
use dclab_core::experiment::{
    run, run_file, Artifact, EmbeddingConfig, ExperimentConfig, ExperimentError, LayersConfig, RunOutcome,
};
use dclab_core::forward::{LayerSpec, Sigma};
use dclab_core::graph::{EigenOrder, Graph, GraphKind, ReweightedGraph, SpectralBasis, StationaryMode};
use dclab_core::ingest::{classify, emit_report, read_dump, ReportFormat};

#[derive(Parser)]
#[command(name = "dclab", version, about = "Random-walk in-context learning simulator and diagnostics")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "DCLAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Embedding {
    Gaussian,
    Orthogonal,
}

#[derive(Args)]
struct GraphArgs {
    /// `grid:RxC`, `ring:C`, `complete:C`, `path:C` or `file:PATH`.
    #[arg(long)]
    graph: String,
    /// Stationary vector: `walk` or `perron`.
    #[arg(long, default_value = "walk")]
    stationary: String,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    /// Mixture weights `a,b,o,t`.
    #[arg(long, default_value = "0.25,0.5,0.2,0.05")]
    rho: MixtureWeights,
    /// `identity`, `tanh:S`, `diag:a,b,...`, joined with `+`.
    #[arg(long, default_value = "identity")]
    sigma: String,
    #[arg(long)]
    residual: bool,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, value_enum, default_value_t = Embedding::Gaussian)]
    embedding: Embedding,
    #[arg(long, default_value_t = 3)]
    q: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts and manifest.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Eigenvalues and eigenvectors of the normalized operator.
    Spectra {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, default_value_t = 3)]
        q: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Sample a token sequence.
    Generate {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward pass with constructed attention; writes the full trace.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer convergence, energy and alignment diagnostics.
    Diagnose {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Alignment under noisy input against the clean run, plus windowed
    /// non-neighbor counts.
    Denoise {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 500)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify an attention dump by connection type.
    Classify {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        graph: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl ToString) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn numeric(stage: &str, message: impl ToString) -> Failure {
    Failure {
        code: 3,
        message: format!("stage {stage}: {}", message.to_string()),
    }
}

fn io(path: &Path, e: impl ToString) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {}", path.display(), e.to_string()),
    }
}

fn report_format(f: Format) -> ReportFormat {
    match f {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
    }
}

fn load_graph(spec: &str) -> Result<Graph, Failure> {
    let kind: GraphKind = spec.parse().map_err(|e| usage(format!("--graph: {e}")))?;
    Graph::build(&kind).map_err(|e| usage(format!("--graph: {e}")))
}

fn reweighted(args: &GraphArgs) -> Result<ReweightedGraph, Failure> {
    let mode: StationaryMode = args.stationary.parse().map_err(|e| usage(format!("--stationary: {e}")))?;
    ReweightedGraph::from_graph(load_graph(&args.graph)?, mode).map_err(|e| numeric("spectra", e))
}

fn config_from(m: &ModelArgs, out: &Path, emit: Vec<Artifact>) -> Result<ExperimentConfig, Failure> {
    let sigma: Sigma = m.sigma.parse().map_err(|e| usage(format!("--sigma: {e}")))?;
    let stationary: StationaryMode = m.graph.stationary.parse().map_err(|e| usage(format!("--stationary: {e}")))?;
    let layer = LayerSpec {
        rho: m.rho,
        sigma,
        residual: m.residual,
    };
    Ok(ExperimentConfig {
        graph: m.graph.graph.clone(),
        stationary,
        n: m.n,
        epsilon: m.epsilon,
        embedding: match m.embedding {
            Embedding::Gaussian => EmbeddingConfig::Gaussian { d: m.d },
            Embedding::Orthogonal => EmbeddingConfig::Orthogonal { d: m.d },
        },
        layers: LayersConfig::Repeat {
            repeat: m.layers,
            layer,
        },
        q: m.q,
        seed: m.seed,
        output: out.to_path_buf(),
        emit,
        pca_frame: Default::default(),
        extraction: dclab_core::diagnostics::ExtractionRule::LastOccurrence,
        noise_epsilon: 0.01,
        window: 500,
    })
}

fn execute(cfg: ExperimentConfig) -> Result<RunOutcome, Failure> {
    Ok(run(&cfg.validate()?)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io(path, e))
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out } => {
            let outcome = run_file(&config, out.as_deref())?;
            for f in &outcome.manifest.files {
                println!("{}  {}", f.sha256, f.file);
            }
        }
        Command::Spectra { graph, q, out, format } => {
            let rg = reweighted(&graph)?;
            let basis = SpectralBasis::new(&rg, q, EigenOrder::Descending).map_err(|e| usage(format!("--q: {e}")))?;
            let w = create(&out)?;
            match format {
                Format::Csv => basis.write_csv(w).map_err(|e| io(&out, e))?,
                Format::Json => {
                    let vectors: Vec<Vec<f64>> = basis.vectors().column_iter().map(|c| c.iter().copied().collect()).collect();
                    let doc = serde_json::json!({
                        "q": basis.q(),
                        "eigenvalues": basis.eigenvalues(),
                        "vectors": vectors,
                    });
                    serde_json::to_writer_pretty(w, &doc).map_err(|e| io(&out, e))?;
                }
            }
        }
        Command::Generate {
            graph,
            n,
            epsilon,
            seed,
            out,
        } => {
            let rg = reweighted(&graph)?;
            let seq = generate(&rg, n, epsilon, seed).map_err(usage)?;
            seq.write_json(create(&out)?).map_err(|e| io(&out, e))?;
        }
        Command::Forward { model, out } => {
            execute(config_from(&model, &out, vec![Artifact::Trace])?)?;
        }
        Command::Diagnose { model, out, format } => {
            let emit = vec![Artifact::Convergence, Artifact::Energy, Artifact::Pca, Artifact::Snapshot];
            let outcome = execute(config_from(&model, &out, emit)?)?;
            if let Format::Csv = format {
                let path = out.join("layers.csv");
                let mut w = csv::Writer::from_writer(create(&path)?);
                let r = (|| -> csv::Result<()> {
                    w.write_record([
                        "depth",
                        "subspace_ratio",
                        "normalized_energy",
                        "low_energy_share",
                        "max_angle",
                    ])?;
                    for l in &outcome.convergence.layers {
                        let ratio = l.subspace_ratio.map(|r| r.to_string()).unwrap_or_default();
                        let angle = l.pca_angles.iter().copied().fold(0.0, f64::max);
                        w.write_record([
                            l.depth.to_string(),
                            ratio,
                            l.normalized_energy.to_string(),
                            l.low_energy_share.to_string(),
                            angle.to_string(),
                        ])?;
                    }
                    w.flush()?;
                    Ok(())
                })();
                r.map_err(|e| io(&path, e))?;
            }
        }
        Command::Denoise { model, window, out } => {
            let mut cfg = config_from(&model, &out, vec![Artifact::Noise])?;
            cfg.noise_epsilon = model.epsilon;
            cfg.epsilon = 0.0;
            cfg.window = window;
            execute(cfg)?;
        }
        Command::Classify {
            dump,
            graph,
            out,
            format,
        } => {
            let g = load_graph(&graph)?;
            let d = read_dump(&dump).map_err(|e| usage(format!("{}: {e}", dump.display())))?;
            if !d.flagged_rows.is_empty() {
                eprintln!("warning: {} rows do not sum to 1 within tolerance", d.flagged_rows.len());
            }
            let report = classify(&d, &g).map_err(usage)?;
            emit_report(&report, report_format(format), create(&out)?).map_err(|e| io(&out, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
