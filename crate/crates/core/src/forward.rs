//! The simplified forward process and its exact latent-space counterpart.
//!
//! Representation matrices are `n × d` with one row per position. Latent
//! matrices and embedding tables are `d × c` with column `x` belonging to
//! token `x`. Layer `ℓ` (1-based) maps depth `ℓ − 1` to depth `ℓ`:
//! `U = A V`, then `V' = σ(U)`, or `V' = σ(U + V)` with a residual.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, AttentionMap, MixtureWeights};
use crate::dgp::TokenSequence;
use crate::graph::ReweightedGraph;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("layer {layer}: non-finite value in the representation")]
    NonFinite { layer: usize },
    #[error("linear map is {rows}×{cols}, expected {d}×{d}")]
    LinearShape { rows: usize, cols: usize, d: usize },
    #[error("linear map is singular (condition number {0:e})")]
    Singular(f64),
    #[error("orthogonal embeddings need d ≥ c (d = {d}, c = {c})")]
    OrthogonalTooNarrow { d: usize, c: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    Dimension(usize),
    #[error("{0} attention maps for {1} layers")]
    LayerCount(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid transformation '{0}'")]
    SigmaSyntax(String),
    #[error("embedding file: {0}")]
    EmbeddingFile(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ForwardError>;

/// Neuron-wise transformation applied to each token representation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sigma {
    #[default]
    Identity,
    /// `v ↦ M v`, row-major `d × d`.
    Linear { matrix: Vec<Vec<f64>> },
    /// `v ↦ s·tanh(v/s)` entrywise.
    ScaledTanh { scale: f64 },
    /// Applied first to last.
    Composed { parts: Vec<Sigma> },
}

impl Sigma {
    pub fn linear(m: &DMatrix<f64>) -> Self {
        Sigma::Linear {
            matrix: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn diagonal(entries: &[f64]) -> Self {
        Sigma::linear(&DMatrix::from_diagonal(&DVector::from_row_slice(entries)))
    }

    fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
        let d = rows.len();
        DMatrix::from_fn(d, rows.first().map_or(0, Vec::len), |i, j| rows[i][j])
    }

    /// Shape and singularity checks; returns the condition number of the
    /// overall linear part when every component is linear.
    pub fn validate(&self, d: usize) -> Result<Option<f64>> {
        match self {
            Sigma::Identity => Ok(Some(1.0)),
            Sigma::ScaledTanh { scale } => {
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(ForwardError::SigmaSyntax(format!("tanh scale {scale}")));
                }
                Ok(None)
            }
            Sigma::Linear { matrix } => {
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                    return Err(ForwardError::LinearShape {
                        rows: matrix.len(),
                        cols: matrix.first().map_or(0, Vec::len),
                        d,
                    });
                }
                let sv = Sigma::matrix(matrix).singular_values();
                let (lo, hi) = (sv.min(), sv.max());
                let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
                if !(cond.is_finite() && cond < 1e12) {
                    return Err(ForwardError::Singular(cond));
                }
                Ok(Some(cond))
            }
            Sigma::Composed { parts } => {
                let mut all_linear = true;
                for p in parts {
                    all_linear &= p.validate(d)?.is_some();
                }
                if !all_linear {
                    return Ok(None);
                }
                let m = self.linear_part(d).expect("all parts linear");
                let sv = m.singular_values();
                Ok(Some(sv.max() / sv.min()))
            }
        }
    }

    /// The matrix of a purely linear transformation.
    pub fn linear_part(&self, d: usize) -> Option<DMatrix<f64>> {
        match self {
            Sigma::Identity => Some(DMatrix::identity(d, d)),
            Sigma::Linear { matrix } => Some(Sigma::matrix(matrix)),
            Sigma::ScaledTanh { .. } => None,
            Sigma::Composed { parts } => parts
                .iter()
                .try_fold(DMatrix::identity(d, d), |acc, p| p.linear_part(d).map(|m| m * acc)),
        }
    }

    /// Applies to every column of a `d × m` matrix.
    pub fn apply_columns(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Sigma::Identity => z.clone(),
            Sigma::Linear { matrix } => Sigma::matrix(matrix) * z,
            Sigma::ScaledTanh { scale } => z.map(|v| scale * (v / scale).tanh()),
            Sigma::Composed { parts } => parts.iter().fold(z.clone(), |acc, p| p.apply_columns(&acc)),
        }
    }

    /// Applies to every row of an `n × d` matrix.
    pub fn apply_rows(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Sigma::Identity => v.clone(),
            Sigma::Linear { matrix } => v * Sigma::matrix(matrix).transpose(),
            Sigma::ScaledTanh { scale } => v.map(|x| scale * (x / scale).tanh()),
            Sigma::Composed { parts } => parts.iter().fold(v.clone(), |acc, p| p.apply_rows(&acc)),
        }
    }

    pub fn apply_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        self.apply_columns(&m).column(0).into_owned()
    }
}

impl fmt::Display for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sigma::Identity => f.write_str("identity"),
            Sigma::ScaledTanh { scale } => write!(f, "tanh:{scale}"),
            Sigma::Linear { matrix } => write!(f, "linear({}x{})", matrix.len(), matrix.len()),
            Sigma::Composed { parts } => {
                let names: Vec<String> = parts.iter().map(ToString::to_string).collect();
                f.write_str(&names.join("+"))
            }
        }
    }
}

/// `identity`, `tanh:S`, `diag:a,b,...`, or several joined with
/// `+` (applied left to right).
impl FromStr for Sigma {
    type Err = ForwardError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        if parts.len() > 1 {
            return Ok(Sigma::Composed {
                parts: parts.into_iter().map(str::parse).collect::<Result<_>>()?,
            });
        }
        let bad = || ForwardError::SigmaSyntax(s.to_string());
        let (head, arg) = s.split_once(':').unwrap_or((s, ""));
        match head {
            "identity" if arg.is_empty() => Ok(Sigma::Identity),
            "tanh" => Ok(Sigma::ScaledTanh {
                scale: arg.parse().map_err(|_| bad())?,
            }),
            "diag" => {
                let entries: Vec<f64> = arg
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                Ok(Sigma::diagonal(&entries))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub rho: MixtureWeights,
    #[serde(default)]
    pub sigma: Sigma,
    #[serde(default)]
    pub residual: bool,
}

impl LayerSpec {
    pub fn new(rho: MixtureWeights) -> Self {
        LayerSpec {
            rho,
            sigma: Sigma::Identity,
            residual: false,
        }
    }

    /// Latent-recursion coefficients `(ρ_A [+1], ρ_B, ρ_O, ρ_T)`.
    pub fn coefficients(&self) -> [f64; 4] {
        let mut k = self.rho.as_array();
        if self.residual {
            k[0] += 1.0;
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingScheme {
    Gaussian { seed: u64 },
    Orthogonal { seed: u64 },
    FromFile { path: std::path::PathBuf },
}

/// `d × c` embedding table; column `x` is `b_x`.
pub fn init_embeddings(c: usize, d: usize, scheme: &EmbeddingScheme) -> Result<DMatrix<f64>> {
    if d < 2 {
        return Err(ForwardError::Dimension(d));
    }
    match scheme {
        EmbeddingScheme::Gaussian { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let scale = 1.0 / (d as f64).sqrt();
            Ok(DMatrix::from_fn(d, c, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                scale * g
            }))
        }
        EmbeddingScheme::Orthogonal { seed } => {
            if d < c {
                return Err(ForwardError::OrthogonalTooNarrow { d, c });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
            let qr = g.qr();
            let (mut q, r) = qr.unpack();
            for j in 0..d {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            // b_x is row x of the orthogonal matrix
            Ok(q.rows(0, c).transpose())
        }
        EmbeddingScheme::FromFile { path } => {
            let e = read_embeddings_csv(std::fs::File::open(path)?)?;
            if e.ncols() != c {
                return Err(ForwardError::EmbeddingFile(format!(
                    "{} has {} tokens, vocabulary has {c}",
                    path.display(),
                    e.ncols()
                )));
            }
            if e.nrows() != d {
                return Err(ForwardError::EmbeddingFile(format!(
                    "{} has dimension {}, expected {d}",
                    path.display(),
                    e.nrows()
                )));
            }
            Ok(e)
        }
    }
}

/// CSV `token,dim_1..dim_d` with 1-based tokens, one row per column of `z`.
pub fn write_embeddings_csv<W: Write>(z: &DMatrix<f64>, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["token".to_string()];
    header.extend((1..=z.nrows()).map(|i| format!("dim_{i}")));
    out.write_record(&header)?;
    for x in 0..z.ncols() {
        let mut rec = vec![(x + 1).to_string()];
        rec.extend(z.column(x).iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_embeddings_csv<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let d = rdr.headers()?.len().saturating_sub(1);
    let mut cols: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| ForwardError::EmbeddingFile(format!("line {line}: {e}")));
        let token = rec
            .get(0)
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| ForwardError::EmbeddingFile(format!("line {line}: bad token")))?;
        let values: Vec<f64> = rec.iter().skip(1).map(parse).collect::<Result<_>>()?;
        if values.len() != d {
            return Err(ForwardError::EmbeddingFile(format!("line {line}: {} values, expected {d}", values.len())));
        }
        cols.push((token, values));
    }
    cols.sort_by_key(|c| c.0);
    for (i, (t, _)) in cols.iter().enumerate() {
        if *t != i + 1 {
            return Err(ForwardError::EmbeddingFile(format!("tokens must be 1..={}, found {t}", cols.len())));
        }
    }
    let c = cols.len();
    Ok(DMatrix::from_fn(d, c, |i, x| cols[x].1[i]))
}

/// Which depths a trace keeps. Depth 0 is the embedding layer; the last
/// depth is always kept.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Retention {
    #[default]
    All,
    Depths(Vec<usize>),
}

impl Retention {
    fn keeps(&self, depth: usize, last: usize) -> bool {
        depth == last
            || match self {
                Retention::All => true,
                Retention::Depths(d) => d.contains(&depth),
            }
    }
}

#[derive(Debug, Clone)]
pub struct RepresentationTrace {
    embeddings: DMatrix<f64>,
    layers: usize,
    /// `V` at depth `0..=L`.
    values: Vec<Option<DMatrix<f64>>>,
    /// `U` of layer `1..=L`, stored at index `ℓ − 1`.
    attention: Vec<Option<DMatrix<f64>>>,
}

impl RepresentationTrace {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dimension(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn len(&self) -> usize {
        self.last().nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    /// `V` after `depth` layers, if retained.
    pub fn values(&self, depth: usize) -> Option<&DMatrix<f64>> {
        self.values.get(depth).and_then(Option::as_ref)
    }

    /// Attention output `U` of 1-based layer `layer`, if retained.
    pub fn attention_output(&self, layer: usize) -> Option<&DMatrix<f64>> {
        layer.checked_sub(1).and_then(|i| self.attention.get(i)).and_then(Option::as_ref)
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values[self.layers].as_ref().expect("last depth is always retained")
    }

    /// Binary little-endian `f64` matrices (row-major) plus a JSON sidecar
    /// with offsets.
    pub fn write(&self, bin: &Path, sidecar: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(bin)?);
        let mut blocks = Vec::new();
        let mut offset = 0u64;
        let (n, d) = (self.len(), self.dimension());
        let mut push = |name: String, m: &DMatrix<f64>, out: &mut std::io::BufWriter<std::fs::File>| -> Result<()> {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
            blocks.push(TraceBlock { name, offset });
            offset += (m.len() * 8) as u64;
            Ok(())
        };
        for (depth, v) in self.values.iter().enumerate() {
            if let Some(v) = v {
                push(format!("V{depth}"), v, &mut out)?;
            }
        }
        for (i, u) in self.attention.iter().enumerate() {
            if let Some(u) = u {
                push(format!("U{}", i + 1), u, &mut out)?;
            }
        }
        out.flush()?;
        let meta = TraceSidecar {
            n,
            d,
            layers: self.layers,
            blocks,
            embeddings: self.embeddings.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        serde_json::to_writer_pretty(std::fs::File::create(sidecar)?, &meta)?;
        Ok(())
    }

    pub fn read(bin: &Path, sidecar: &Path) -> Result<Self> {
        let meta: TraceSidecar = serde_json::from_reader(std::fs::File::open(sidecar)?)?;
        let bytes = std::fs::read(bin)?;
        let (n, d, l) = (meta.n, meta.d, meta.layers);
        let mut values = vec![None; l + 1];
        let mut attention = vec![None; l];
        for b in &meta.blocks {
            let start = b.offset as usize;
            let end = start + n * d * 8;
            let chunk = bytes
                .get(start..end)
                .ok_or_else(|| ForwardError::Shape(format!("block {} runs past the end of the file", b.name)))?;
            let m = DMatrix::from_row_iterator(
                n,
                d,
                chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
            );
            let (kind, idx) = b.name.split_at(1);
            let idx: usize = idx.parse().map_err(|_| ForwardError::Shape(format!("block name {}", b.name)))?;
            match kind {
                "V" if idx <= l => values[idx] = Some(m),
                "U" if (1..=l).contains(&idx) => attention[idx - 1] = Some(m),
                _ => return Err(ForwardError::Shape(format!("block name {}", b.name))),
            }
        }
        if values[l].is_none() {
            return Err(ForwardError::Shape("last depth missing".into()));
        }
        let e = &meta.embeddings;
        let embeddings = DMatrix::from_fn(e.len(), e.first().map_or(0, Vec::len), |i, j| e[i][j]);
        Ok(RepresentationTrace {
            embeddings,
            layers: l,
            values,
            attention,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TraceBlock {
    name: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct TraceSidecar {
    n: usize,
    d: usize,
    layers: usize,
    blocks: Vec<TraceBlock>,
    embeddings: Vec<Vec<f64>>,
}

/// Runs every layer; `maps[ℓ]` is the attention of layer `ℓ + 1`.
pub fn forward(
    seq: &TokenSequence,
    layers: &[LayerSpec],
    maps: &[AttentionMap],
    embeddings: &DMatrix<f64>,
    retain: &Retention,
) -> Result<RepresentationTrace> {
    if maps.len() != layers.len() {
        return Err(ForwardError::LayerCount(maps.len(), layers.len()));
    }
    if embeddings.ncols() != seq.vocabulary_size() {
        return Err(ForwardError::Shape(format!(
            "{} embeddings for {} tokens",
            embeddings.ncols(),
            seq.vocabulary_size()
        )));
    }
    let d = embeddings.nrows();
    for (i, l) in layers.iter().enumerate() {
        l.sigma
            .validate(d)
            .map_err(|e| ForwardError::Shape(format!("layer {}: {e}", i + 1)))?;
    }
    let n = seq.len();
    let tokens = seq.tokens();
    let big_l = layers.len();
    let mut v = DMatrix::from_fn(n, d, |k, i| embeddings[(i, tokens[k])]);
    let mut values = vec![None; big_l + 1];
    let mut attention = vec![None; big_l];
    for (i, (layer, map)) in layers.iter().zip(maps).enumerate() {
        if retain.keeps(i, big_l) {
            values[i] = Some(v.clone());
        }
        let u = map.apply(&v)?;
        let pre = if layer.residual { &u + &v } else { u.clone() };
        let next = layer.sigma.apply_rows(&pre);
        if next.iter().any(|x| !x.is_finite()) || u.iter().any(|x| !x.is_finite()) {
            return Err(ForwardError::NonFinite { layer: i + 1 });
        }
        if retain.keeps(i + 1, big_l) {
            attention[i] = Some(u);
        }
        v = next;
    }
    values[big_l] = Some(v);
    Ok(RepresentationTrace {
        embeddings: embeddings.clone(),
        layers: big_l,
        values,
        attention,
    })
}

/// One latent step with explicit coefficients `k = (k_A, k_B, k_O, k_T)`:
/// `z'_x = σ(k_A z_x + k_B Σ_y (w_xy/d_x) z_y + k_O Σ_y π_y z_y + k_T v₁)`.
pub fn latent_step(
    z: &DMatrix<f64>,
    k: [f64; 4],
    rg: &ReweightedGraph,
    sigma: &Sigma,
    v1: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let c = rg.vertex_count();
    if z.ncols() != c || v1.len() != z.nrows() {
        return Err(ForwardError::Shape(format!(
            "latent {}×{}, sink {}, vocabulary {c}",
            z.nrows(),
            z.ncols(),
            v1.len()
        )));
    }
    let transition = rg.transition();
    let mut out = z * k[0];
    if k[1] != 0.0 {
        out += (z * transition.transpose()) * k[1];
    }
    if k[2] != 0.0 || k[3] != 0.0 {
        let shift = z * rg.pi() * k[2] + v1 * k[3];
        for mut col in out.column_iter_mut() {
            col += &shift;
        }
    }
    Ok(sigma.apply_columns(&out))
}

/// The latent image of one layer; the residual adds 1 to `ρ_A`.
pub fn latent_recursion(z: &DMatrix<f64>, layer: &LayerSpec, rg: &ReweightedGraph, v1: &DVector<f64>) -> Result<DMatrix<f64>> {
    latent_step(z, layer.coefficients(), rg, &layer.sigma, v1)
}

/// Position 1 attends only to itself under every typed map, so
/// `v₁' = σ(v₁)` (or `σ(2v₁)` with a residual).
pub fn sink_step(v1: &DVector<f64>, layer: &LayerSpec) -> DVector<f64> {
    let pre = if layer.residual { v1 * 2.0 } else { v1.clone() };
    layer.sigma.apply_vector(&pre)
}

/// Latent matrices and sink vectors at depth `0..=L`.
pub fn latent_iterates(
    z0: &DMatrix<f64>,
    v1: &DVector<f64>,
    layers: &[LayerSpec],
    rg: &ReweightedGraph,
) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    let mut out = vec![(z0.clone(), v1.clone())];
    for layer in layers {
        let (z, v) = out.last().expect("non-empty");
        let next = (latent_recursion(z, layer, rg, v)?, sink_step(v, layer));
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreatMappingBounds {
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub samples: usize,
    pub skipped: usize,
}

/// Frobenius norm of `Z D^{1/2} U`.
pub fn weighted_projection_norm(z: &DMatrix<f64>, rg: &ReweightedGraph, u: &DMatrix<f64>) -> f64 {
    let zd = z * DMatrix::from_diagonal(rg.sqrt_degrees());
    (zd * u).norm()
}

/// Range of `‖σ(Z)D^{1/2}U‖ / ‖Z D^{1/2}U‖` over standard gaussian `d × c`
/// samples. Samples with denominator below 1e-12 are skipped and counted.
pub fn great_mapping_bounds(
    sigma: &Sigma,
    rg: &ReweightedGraph,
    u: &DMatrix<f64>,
    d: usize,
    samples: usize,
    seed: u64,
) -> GreatMappingBounds {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rg.vertex_count();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut skipped = 0;
    for _ in 0..samples {
        let z = DMatrix::from_fn(d, c, |_, _| StandardNormal.sample(&mut rng));
        let den = weighted_projection_norm(&z, rg, u);
        if den < 1e-12 {
            skipped += 1;
            continue;
        }
        let r = weighted_projection_norm(&sigma.apply_columns(&z), rg, u) / den;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    GreatMappingBounds {
        gamma_low: lo,
        gamma_high: hi,
        samples,
        skipped,
    }
}

/// The same ratio at one specific latent matrix.
pub fn at_iterate_ratio(sigma: &Sigma, z: &DMatrix<f64>, rg: &ReweightedGraph, u: &DMatrix<f64>) -> Option<f64> {
    let den = weighted_projection_norm(z, rg, u);
    (den >= 1e-12).then(|| weighted_projection_norm(&sigma.apply_columns(z), rg, u) / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{mix, SharedSequence};
    use crate::graph::{Graph, StationaryMode};

    fn k2() -> ReweightedGraph {
        ReweightedGraph::from_graph(Graph::complete(2).unwrap(), StationaryMode::Walk).unwrap()
    }

    #[test]
    fn orthogonal_embeddings_are_orthonormal() {
        let e = init_embeddings(4, 4, &EmbeddingScheme::Orthogonal { seed: 3 }).unwrap();
        assert!((e.transpose() * &e - DMatrix::<f64>::identity(4, 4)).amax() < 1e-10);
        let e = init_embeddings(3, 5, &EmbeddingScheme::Orthogonal { seed: 3 }).unwrap();
        assert!((e.transpose() * &e - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        assert!(matches!(
            init_embeddings(5, 3, &EmbeddingScheme::Orthogonal { seed: 0 }),
            Err(ForwardError::OrthogonalTooNarrow { .. })
        ));
    }

    #[test]
    fn gaussian_embeddings_are_reproducible() {
        let a = init_embeddings(16, 32, &EmbeddingScheme::Gaussian { seed: 9 }).unwrap();
        let b = init_embeddings(16, 32, &EmbeddingScheme::Gaussian { seed: 9 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_embeddings(16, 32, &EmbeddingScheme::Gaussian { seed: 10 }).unwrap());
        assert!(init_embeddings(16, 1, &EmbeddingScheme::Gaussian { seed: 9 }).is_err());
    }

    #[test]
    fn embedding_csv_round_trip() {
        let e = init_embeddings(5, 3, &EmbeddingScheme::Gaussian { seed: 1 }).unwrap();
        let mut buf = Vec::new();
        write_embeddings_csv(&e, &mut buf).unwrap();
        assert_eq!(read_embeddings_csv(buf.as_slice()).unwrap(), e);
    }

    #[test]
    fn latent_examples() {
        let rg = k2();
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, -2.0, 0.5]);
        let v1 = DVector::from_vec(vec![7.0, 7.0]);
        let id = latent_step(&z, [1.0, 0.0, 0.0, 0.0], &rg, &Sigma::Identity, &v1).unwrap();
        assert_eq!(id, z);
        let swap = latent_step(&z, [0.0, 1.0, 0.0, 0.0], &rg, &Sigma::Identity, &v1).unwrap();
        assert_eq!(swap.column(0), z.column(1));
        assert_eq!(swap.column(1), z.column(0));
        let avg = latent_step(&z, [0.0, 0.0, 1.0, 0.0], &rg, &Sigma::Identity, &v1).unwrap();
        let mean = z * rg.pi();
        assert!((avg.column(0) - &mean).amax() < 1e-15);
        assert!((avg.column(1) - &mean).amax() < 1e-15);
    }

    #[test]
    fn sigma_parsing_and_composition() {
        let s: Sigma = "diag:1,3+tanh:2".parse().unwrap();
        assert!(matches!(s, Sigma::Composed { ref parts } if parts.len() == 2));
        assert!(s.validate(2).unwrap().is_none());
        let lin: Sigma = "diag:2,3+diag:5,7".parse().unwrap();
        assert_eq!(lin.linear_part(2).unwrap(), DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 21.0])));
        assert!("diag:1,0".parse::<Sigma>().unwrap().validate(2).is_err());
        assert!("diag:1,2".parse::<Sigma>().unwrap().validate(3).is_err());
        assert!("wobble".parse::<Sigma>().is_err());
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, -1.0]);
        let rows = lin.apply_rows(&v);
        assert_eq!(rows, DMatrix::from_row_slice(2, 2, &[10.0, 21.0, 20.0, -21.0]));
    }

    #[test]
    fn identity_and_scaled_bounds() {
        let rg = k2();
        let u = DMatrix::from_column_slice(2, 1, &[1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()]);
        let b = great_mapping_bounds(&Sigma::Identity, &rg, &u, 3, 50, 1);
        assert!((b.gamma_low - 1.0).abs() < 1e-12 && (b.gamma_high - 1.0).abs() < 1e-12);
        let b = great_mapping_bounds(&"diag:2,2,2".parse().unwrap(), &rg, &u, 3, 50, 1);
        assert!((b.gamma_low - 2.0).abs() < 1e-12 && (b.gamma_high - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sink_only_layer_copies_first_position() {
        let g = Graph::complete(2).unwrap();
        let seq = TokenSequence::from_tokens(2, vec![0, 1, 1, 0, 1]).unwrap();
        let fam = SharedSequence::new(&seq).typed_family(&g).unwrap();
        let rho = MixtureWeights::pure(crate::attention::MapKind::T);
        let map = mix(fam, rho).unwrap();
        let e = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let trace = forward(&seq, &[LayerSpec::new(rho)], &[map], &e, &Retention::All).unwrap();
        let u = trace.attention_output(1).unwrap();
        for k in 0..5 {
            assert_eq!(u[(k, 0)], 1.0);
            assert_eq!(u[(k, 1)], 3.0);
        }
    }

    #[test]
    fn overflow_is_reported_with_layer() {
        let g = Graph::complete(2).unwrap();
        let seq = TokenSequence::from_tokens(2, vec![0, 1, 1, 0, 1]).unwrap();
        let shared = SharedSequence::new(&seq);
        let rho = MixtureWeights::pure(crate::attention::MapKind::A);
        let layer = LayerSpec {
            rho,
            sigma: "diag:1e200,1e200".parse().unwrap(),
            residual: false,
        };
        let maps: Vec<AttentionMap> = (0..3).map(|_| mix(shared.typed_family(&g).unwrap(), rho).unwrap()).collect();
        let e = DMatrix::from_element(2, 2, 1.0);
        let err = forward(&seq, &vec![layer; 3], &maps, &e, &Retention::All).unwrap_err();
        assert!(matches!(err, ForwardError::NonFinite { layer: 2 }));
    }

    #[test]
    fn trace_file_round_trip() {
        let g = Graph::complete(2).unwrap();
        let seq = TokenSequence::from_tokens(2, vec![0, 1, 1, 0, 1, 0]).unwrap();
        let shared = SharedSequence::new(&seq);
        let rho = MixtureWeights::new(0.25, 0.25, 0.25, 0.25).unwrap();
        let maps: Vec<AttentionMap> = (0..2).map(|_| mix(shared.typed_family(&g).unwrap(), rho).unwrap()).collect();
        let e = init_embeddings(2, 3, &EmbeddingScheme::Gaussian { seed: 4 }).unwrap();
        let trace = forward(&seq, &[LayerSpec::new(rho), LayerSpec::new(rho)], &maps, &e, &Retention::All).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (bin, side) = (dir.path().join("t.bin"), dir.path().join("t.json"));
        trace.write(&bin, &side).unwrap();
        let back = RepresentationTrace::read(&bin, &side).unwrap();
        for depth in 0..=2 {
            assert_eq!(back.values(depth), trace.values(depth));
        }
        assert_eq!(back.attention_output(2), trace.attention_output(2));
        assert_eq!(back.embeddings(), trace.embeddings());
    }
}
