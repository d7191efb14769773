//! Sparse lower-triangular attention maps.
//!
//! Typed maps are stored implicitly: a reflecting row `k` puts weight
//! `1/R_k` on every position `j ≤ k` whose token is admissible for `x_k`,
//! where `R_k` counts those positions. Rows inside the traversal prefix
//! (`k ≤ c`) attend only to themselves. The sink map sends every row to
//! position 1. Rows are materialized on demand; nothing is stored densely.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgp::{FrequencyTable, TokenSequence};
use crate::graph::Graph;

pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("row {row} has no admissible key position")]
    EmptyAdmissible { row: usize },
    #[error("mixture weights {0}")]
    Weights(String),
    #[error("map sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("mixture slot {slot} expects a {expected} map, got {got}")]
    TagMismatch {
        slot: usize,
        expected: MapKind,
        got: MapKind,
    },
    #[error("function is defined on {got} tokens, vocabulary has {expected}")]
    Vocabulary { expected: usize, got: usize },
    #[error("representation has {got} rows, map has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapKind {
    A,
    B,
    O,
    T,
    #[serde(rename = "singleton")]
    Singleton,
    #[serde(rename = "mixture")]
    Mixture,
    #[serde(rename = "custom")]
    Custom,
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MapKind::A => "A",
            MapKind::B => "B",
            MapKind::O => "O",
            MapKind::T => "T",
            MapKind::Singleton => "singleton",
            MapKind::Mixture => "mixture",
            MapKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Which typed map to build.
#[derive(Debug, Clone, PartialEq)]
pub enum TypeSpec {
    A,
    B,
    O,
    T,
    /// `f(x) = map[x]`, 0-based.
    Singleton(Vec<usize>),
}

/// Set-valued token function `f: [c] → 2^[c]`.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenFunction {
    Identity,
    All,
    Sets(Vec<Vec<usize>>),
}

impl TokenFunction {
    pub fn neighbors(g: &Graph) -> Self {
        TokenFunction::Sets((0..g.vertex_count()).map(|x| g.neighbors(x).to_vec()).collect())
    }

    pub fn singleton(map: &[usize]) -> Self {
        TokenFunction::Sets(map.iter().map(|&y| vec![y]).collect())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        match self {
            TokenFunction::Identity => x == y,
            TokenFunction::All => true,
            TokenFunction::Sets(s) => s[x].contains(&y),
        }
    }

    /// Admissible targets for every token, sorted.
    pub fn table(&self, c: usize) -> Vec<Vec<usize>> {
        (0..c)
            .map(|x| match self {
                TokenFunction::Identity => vec![x],
                TokenFunction::All => (0..c).collect(),
                TokenFunction::Sets(s) => {
                    let mut t = s[x].clone();
                    t.sort_unstable();
                    t.dedup();
                    t
                }
            })
            .collect()
    }

    fn check(&self, c: usize) -> Result<()> {
        if let TokenFunction::Sets(s) = self {
            if s.len() != c {
                return Err(AttentionError::Vocabulary {
                    expected: c,
                    got: s.len(),
                });
            }
            if let Some(&bad) = s.iter().flatten().find(|&&y| y >= c) {
                return Err(AttentionError::Vocabulary {
                    expected: c,
                    got: bad + 1,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub a: f64,
    pub b: f64,
    pub o: f64,
    pub t: f64,
}

impl MixtureWeights {
    pub fn new(a: f64, b: f64, o: f64, t: f64) -> Result<Self> {
        let w = MixtureWeights { a, b, o, t };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.as_array();
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(AttentionError::Weights(format!("must be finite and non-negative, got {self}")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(AttentionError::Weights(format!("sum to {s}, expected 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.a, self.b, self.o, self.t]
    }

    pub fn pure(kind: MapKind) -> Self {
        let mut w = MixtureWeights {
            a: 0.0,
            b: 0.0,
            o: 0.0,
            t: 0.0,
        };
        match kind {
            MapKind::A => w.a = 1.0,
            MapKind::B => w.b = 1.0,
            MapKind::O => w.o = 1.0,
            _ => w.t = 1.0,
        }
        w
    }
}

impl fmt::Display for MixtureWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.a, self.b, self.o, self.t)
    }
}

impl FromStr for MixtureWeights {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| AttentionError::Weights(format!("'{s}': {e}")))?;
        match parts[..] {
            [a, b, o, t] => MixtureWeights::new(a, b, o, t),
            _ => Err(AttentionError::Weights(format!("'{s}' needs four comma-separated values"))),
        }
    }
}

pub const MIXTURE_ORDER: [MapKind; 4] = [MapKind::A, MapKind::B, MapKind::O, MapKind::T];

#[derive(Debug, Clone)]
struct Reflecting {
    tokens: Arc<Vec<usize>>,
    freq: Arc<FrequencyTable>,
    c: usize,
    all: bool,
    targets: Vec<Vec<usize>>,
    /// `R_k` for every row; unused for `k ≤ c`.
    totals: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Repr {
    Rows(Vec<Vec<(usize, f64)>>),
    Reflecting(Reflecting),
    Sink,
    Mixture(Vec<(f64, AttentionMap)>),
}

#[derive(Debug, Clone)]
pub struct AttentionMap {
    n: usize,
    kind: MapKind,
    function: Option<TokenFunction>,
    rho: Option<MixtureWeights>,
    repr: Repr,
}

/// Builds a typed map. `g` supplies the neighbor sets for type B.
pub fn construct_typed(seq: &TokenSequence, g: &Graph, spec: &TypeSpec) -> Result<AttentionMap> {
    let shared = SharedSequence::new(seq);
    shared.construct(g, spec)
}

/// Token list and occurrence table shared between the typed maps of one
/// sequence.
#[derive(Debug, Clone)]
pub struct SharedSequence {
    tokens: Arc<Vec<usize>>,
    freq: Arc<FrequencyTable>,
    c: usize,
}

impl SharedSequence {
    pub fn new(seq: &TokenSequence) -> Self {
        SharedSequence {
            tokens: Arc::new(seq.tokens().to_vec()),
            freq: Arc::new(FrequencyTable::new(seq)),
            c: seq.vocabulary_size(),
        }
    }

    pub fn construct(&self, g: &Graph, spec: &TypeSpec) -> Result<AttentionMap> {
        let n = self.tokens.len();
        let (kind, f) = match spec {
            TypeSpec::T => {
                return Ok(AttentionMap {
                    n,
                    kind: MapKind::T,
                    function: None,
                    rho: None,
                    repr: Repr::Sink,
                })
            }
            TypeSpec::A => (MapKind::A, TokenFunction::Identity),
            TypeSpec::B => {
                if g.vertex_count() != self.c {
                    return Err(AttentionError::Vocabulary {
                        expected: self.c,
                        got: g.vertex_count(),
                    });
                }
                (MapKind::B, TokenFunction::neighbors(g))
            }
            TypeSpec::O => (MapKind::O, TokenFunction::All),
            TypeSpec::Singleton(m) => (MapKind::Singleton, TokenFunction::singleton(m)),
        };
        self.reflecting(kind, f)
    }

    /// Reflecting map for an arbitrary set-valued function.
    pub fn reflecting(&self, kind: MapKind, f: TokenFunction) -> Result<AttentionMap> {
        let c = self.c;
        f.check(c)?;
        let n = self.tokens.len();
        let targets = f.table(c);
        let all = matches!(f, TokenFunction::All);
        let mut counts = vec![0usize; c];
        let mut totals = vec![0usize; n];
        for (i, &x) in self.tokens.iter().enumerate() {
            counts[x] += 1;
            if i < c {
                continue;
            }
            let r = if all { i + 1 } else { targets[x].iter().map(|&y| counts[y]).sum() };
            if r == 0 {
                return Err(AttentionError::EmptyAdmissible { row: i + 1 });
            }
            totals[i] = r;
        }
        Ok(AttentionMap {
            n,
            kind,
            function: Some(f),
            rho: None,
            repr: Repr::Reflecting(Reflecting {
                tokens: Arc::clone(&self.tokens),
                freq: Arc::clone(&self.freq),
                c,
                all,
                targets,
                totals,
            }),
        })
    }

    /// The four typed maps in mixture order.
    pub fn typed_family(&self, g: &Graph) -> Result<[AttentionMap; 4]> {
        Ok([
            self.construct(g, &TypeSpec::A)?,
            self.construct(g, &TypeSpec::B)?,
            self.construct(g, &TypeSpec::O)?,
            self.construct(g, &TypeSpec::T)?,
        ])
    }
}

/// Entrywise convex combination `ρ_A A + ρ_B B + ρ_O O + ρ_T T`.
pub fn mix(maps: [AttentionMap; 4], rho: MixtureWeights) -> Result<AttentionMap> {
    rho.validate()?;
    let n = maps[0].n;
    for (slot, (m, expected)) in maps.iter().zip(MIXTURE_ORDER).enumerate() {
        if m.kind != expected {
            return Err(AttentionError::TagMismatch {
                slot,
                expected,
                got: m.kind,
            });
        }
        if m.n != n {
            return Err(AttentionError::SizeMismatch(n, m.n));
        }
    }
    let parts = rho
        .as_array()
        .into_iter()
        .zip(maps)
        .filter(|(w, _)| *w > 0.0)
        .collect();
    Ok(AttentionMap {
        n,
        kind: MapKind::Mixture,
        function: None,
        rho: Some(rho),
        repr: Repr::Mixture(parts),
    })
}

impl AttentionMap {
    /// Explicit rows of 0-based `(column, weight)` pairs. No validation
    /// beyond column range; use [`verify_attention`].
    pub fn from_rows(kind: MapKind, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        let mut rows = rows;
        for (k, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|e| e.0);
            if let Some(&(j, _)) = row.iter().find(|e| e.0 >= n) {
                return Err(AttentionError::Parse {
                    line: k + 1,
                    message: format!("column {} outside 1..={n}", j + 1),
                });
            }
        }
        Ok(AttentionMap {
            n,
            kind,
            function: None,
            rho: None,
            repr: Repr::Rows(rows),
        })
    }

    /// Copies every row into explicit storage.
    pub fn materialize(&self) -> AttentionMap {
        let rows = (0..self.n).into_par_iter().map(|k| self.row(k)).collect();
        AttentionMap {
            n: self.n,
            kind: self.kind,
            function: self.function.clone(),
            rho: self.rho,
            repr: Repr::Rows(rows),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn function(&self) -> Option<&TokenFunction> {
        self.function.as_ref()
    }

    pub fn rho(&self) -> Option<MixtureWeights> {
        self.rho
    }

    pub fn with_function(mut self, f: TokenFunction) -> Self {
        self.function = Some(f);
        self
    }

    /// Nonzero entries of row `k` (0-based), sorted by column.
    pub fn row(&self, k: usize) -> Vec<(usize, f64)> {
        match &self.repr {
            Repr::Rows(rows) => rows[k].clone(),
            Repr::Sink => vec![(0, 1.0)],
            Repr::Reflecting(r) => {
                if k < r.c {
                    return vec![(k, 1.0)];
                }
                let w = 1.0 / r.totals[k] as f64;
                r.positions(k).into_iter().map(|j| (j, w)).collect()
            }
            Repr::Mixture(parts) => {
                let mut dense = vec![0.0f64; k + 1];
                let mut touched = vec![false; k + 1];
                for (rho, m) in parts {
                    for (j, a) in m.row(k) {
                        dense[j] += rho * a;
                        touched[j] = true;
                    }
                }
                (0..=k).filter(|&j| touched[j] && dense[j] != 0.0).map(|j| (j, dense[j])).collect()
            }
        }
    }

    pub fn nonzeros(&self) -> usize {
        (0..self.n).into_par_iter().map(|k| self.row(k).len()).sum()
    }

    /// `u_k = Σ_j a_{k,j} v_j` for a representation matrix with one row per
    /// position. Columns are processed independently, so the result does not
    /// depend on the thread count.
    pub fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.nrows() != self.n {
            return Err(AttentionError::Dimension {
                expected: self.n,
                got: v.nrows(),
            });
        }
        let cols: Vec<DVector<f64>> = (0..v.ncols())
            .into_par_iter()
            .map(|col| self.apply_column(v.column(col).as_slice()))
            .collect();
        Ok(DMatrix::from_columns(&cols))
    }

    fn apply_column(&self, v: &[f64]) -> DVector<f64> {
        let n = self.n;
        match &self.repr {
            Repr::Sink => DVector::from_element(n, v.first().copied().unwrap_or(0.0)),
            Repr::Rows(rows) => DVector::from_iterator(n, rows.iter().map(|row| row.iter().map(|&(j, a)| a * v[j]).sum())),
            Repr::Reflecting(r) => {
                let mut sums = vec![0.0f64; r.c];
                let mut total = 0.0f64;
                let mut out = DVector::zeros(n);
                for (i, &x) in r.tokens.iter().enumerate() {
                    sums[x] += v[i];
                    total += v[i];
                    out[i] = if i < r.c {
                        v[i]
                    } else if r.all {
                        total / (i + 1) as f64
                    } else {
                        r.targets[x].iter().map(|&y| sums[y]).sum::<f64>() / r.totals[i] as f64
                    };
                }
                out
            }
            Repr::Mixture(parts) => {
                let mut out = DVector::zeros(n);
                for (rho, m) in parts {
                    out.axpy(*rho, &m.apply_column(v), 1.0);
                }
                out
            }
        }
    }

    /// Row-wise `(k/j)·S_{k,j}` maximized over prefixes; `S` jumps only at
    /// supported columns, so only those are visited.
    fn row_niceness(&self, k: usize) -> f64 {
        let kf = (k + 1) as f64;
        match &self.repr {
            Repr::Sink => kf,
            Repr::Reflecting(r) if k >= r.c && r.all => 1.0,
            Repr::Reflecting(r) if k >= r.c => {
                let rk = r.totals[k] as f64;
                r.positions(k)
                    .into_iter()
                    .enumerate()
                    .map(|(m, j)| kf * (m + 1) as f64 / (rk * (j + 1) as f64))
                    .fold(0.0, f64::max)
            }
            _ => {
                let mut s = 0.0;
                let mut best = 0.0f64;
                for (j, a) in self.row(k) {
                    s += a;
                    best = best.max(kf * s / (j + 1) as f64);
                }
                best
            }
        }
    }
}

impl Reflecting {
    /// Admissible key positions for row `k ≥ c`, sorted.
    fn positions(&self, k: usize) -> Vec<usize> {
        if self.all {
            return (0..=k).collect();
        }
        let x = self.tokens[k];
        let mut out = Vec::with_capacity(self.totals[k]);
        for &y in &self.targets[x] {
            let occ = self.freq.occurrences(y);
            out.extend_from_slice(&occ[..occ.partition_point(|&p| p <= k)]);
        }
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionCheck {
    pub valid: bool,
    pub worst_row_sum_error: f64,
    /// Entries with column > row.
    pub upper_entries: usize,
    /// Negative or non-finite entries.
    pub bad_entries: usize,
}

/// Lower-triangularity, non-negativity and row sums (compensated
/// summation, tolerance 1e-12).
pub fn verify_attention(map: &AttentionMap) -> AttentionCheck {
    let per_row: Vec<(f64, usize, usize)> = (0..map.n)
        .into_par_iter()
        .map(|k| {
            let row = map.row(k);
            let upper = row.iter().filter(|e| e.0 > k).count();
            let bad = row.iter().filter(|e| !e.1.is_finite() || e.1 < 0.0).count();
            ((neumaier(row.iter().map(|e| e.1)) - 1.0).abs(), upper, bad)
        })
        .collect();
    let worst = per_row.iter().map(|r| r.0).fold(0.0, f64::max);
    let upper = per_row.iter().map(|r| r.1).sum();
    let bad = per_row.iter().map(|r| r.2).sum();
    let worst_row_sum_error = if per_row.iter().any(|r| r.0.is_nan()) { f64::INFINITY } else { worst };
    AttentionCheck {
        valid: worst_row_sum_error <= ROW_SUM_TOLERANCE && upper == 0 && bad == 0,
        worst_row_sum_error,
        upper_entries: upper,
        bad_entries: bad,
    }
}

fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `ψ̂ = max_k max_{j ≤ k} (k/j) Σ_{i ≤ j} a_{k,i}`.
pub fn niceness(map: &AttentionMap) -> f64 {
    (0..map.n).into_par_iter().map(|k| map.row_niceness(k)).reduce(|| 0.0, f64::max)
}

/// `max_{k > c, y ∈ f(x_k)} √k |Σ_j a_{k,j} 1{x_j = y} − F_{y,k}/R_k|`.
pub fn balance_deviation(map: &AttentionMap, seq: &TokenSequence, f: &TokenFunction) -> f64 {
    let c = seq.vocabulary_size();
    let freq = FrequencyTable::new(seq);
    let targets = f.table(c);
    let tokens = seq.tokens();
    (c..map.n.min(seq.len()))
        .into_par_iter()
        .map(|k| {
            let x = tokens[k];
            let mut mass = vec![0.0f64; c];
            for (j, a) in map.row(k) {
                mass[tokens[j]] += a;
            }
            let r: usize = targets[x].iter().map(|&y| freq.count(y, k + 1)).sum();
            if r == 0 {
                return 0.0;
            }
            let scale = ((k + 1) as f64).sqrt();
            targets[x]
                .iter()
                .map(|&y| scale * (mass[y] - freq.count(y, k + 1) as f64 / r as f64).abs())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Nonzero entries in rows `k > c` whose key token is not in `f(x_k)`.
pub fn support_violations(map: &AttentionMap, seq: &TokenSequence, f: &TokenFunction) -> usize {
    let c = seq.vocabulary_size();
    let tokens = seq.tokens();
    (c..map.n.min(seq.len()))
        .into_par_iter()
        .map(|k| map.row(k).iter().filter(|&&(j, a)| a > 0.0 && !f.contains(tokens[k], tokens[j])).count())
        .sum()
}

/// Column `x` becomes the `π`-weighted mean of `Z`'s columns over `f(x)`;
/// an empty `f(x)` gives the zero vector. `Z` is `d × c`.
pub fn reflected_latent_image(f: &TokenFunction, z: &DMatrix<f64>, pi: &DVector<f64>) -> Result<DMatrix<f64>> {
    let c = z.ncols();
    if pi.len() != c {
        return Err(AttentionError::Vocabulary {
            expected: c,
            got: pi.len(),
        });
    }
    f.check(c)?;
    let targets = f.table(c);
    let mut out = DMatrix::zeros(z.nrows(), c);
    for (x, t) in targets.iter().enumerate() {
        let mass: f64 = t.iter().map(|&y| pi[y]).sum();
        if mass == 0.0 {
            continue;
        }
        let mut col = out.column_mut(x);
        for &y in t {
            col.axpy(pi[y] / mass, &z.column(y), 1.0);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct MapHeader {
    n: usize,
    #[serde(rename = "type")]
    kind: MapKind,
    rho: Option<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct MapEntry {
    row: usize,
    col: usize,
    weight: f64,
}

/// JSON lines: a header `{n, type, rho}` then one `{row, col, weight}`
/// record per nonzero, 1-based.
pub fn write_jsonl<W: Write>(map: &AttentionMap, w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    let header = MapHeader {
        n: map.n,
        kind: map.kind,
        rho: map.rho.map(|r| r.as_array()),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    writeln!(w)?;
    for k in 0..map.n {
        for (j, weight) in map.row(k) {
            let e = MapEntry {
                row: k + 1,
                col: j + 1,
                weight,
            };
            serde_json::to_writer(&mut w, &e).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<AttentionMap> {
    let mut lines = r.lines().enumerate();
    let header: MapHeader = loop {
        match lines.next() {
            None => {
                return Err(AttentionError::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| AttentionError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            }
        }
    };
    let n = header.n;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| AttentionError::Parse { line: i + 1, message };
        let e: MapEntry = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if e.row == 0 || e.row > n || e.col == 0 || e.col > n {
            return Err(parse_err(format!("entry ({}, {}) outside 1..={n}", e.row, e.col)));
        }
        let row = &mut rows[e.row - 1];
        if row.iter().any(|&(j, _)| j == e.col - 1) {
            return Err(parse_err(format!("duplicate entry ({}, {})", e.row, e.col)));
        }
        row.push((e.col - 1, e.weight));
    }
    let mut map = AttentionMap::from_rows(header.kind, rows)?;
    if let Some([a, b, o, t]) = header.rho {
        map.rho = Some(MixtureWeights { a, b, o, t });
    }
    Ok(map)
}

/// Row-by-row equality of stored weights.
pub fn same_entries(a: &AttentionMap, b: &AttentionMap) -> bool {
    a.n == b.n && (0..a.n).into_par_iter().all(|k| a.row(k) == b.row(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k2_seq() -> TokenSequence {
        TokenSequence::from_tokens(2, vec![0, 1, 0, 1]).unwrap()
    }

    fn k2() -> Graph {
        Graph::complete(2).unwrap()
    }

    #[test]
    fn b_type_row_four_on_k2() {
        let m = construct_typed(&k2_seq(), &k2(), &TypeSpec::B).unwrap();
        assert_eq!(m.row(3), vec![(0, 0.5), (2, 0.5)]);
        assert_eq!(m.row(1), vec![(1, 1.0)]);
    }

    #[test]
    fn t_type_is_column_one() {
        let m = construct_typed(&k2_seq(), &k2(), &TypeSpec::T).unwrap();
        for k in 0..4 {
            assert_eq!(m.row(k), vec![(0, 1.0)]);
        }
        assert_eq!(niceness(&m), 4.0);
    }

    #[test]
    fn o_type_uniform() {
        let m = construct_typed(&k2_seq(), &k2(), &TypeSpec::O).unwrap();
        assert_eq!(m.row(3), vec![(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)]);
        assert_eq!(niceness(&m), 1.0);
        assert_eq!(balance_deviation(&m, &k2_seq(), &TokenFunction::All), 0.0);
    }

    #[test]
    fn equal_mixture_row_four() {
        let fam = SharedSequence::new(&k2_seq()).typed_family(&k2()).unwrap();
        let m = mix(fam, MixtureWeights::new(0.25, 0.25, 0.25, 0.25).unwrap()).unwrap();
        let row = m.row(3);
        assert_eq!(row[0].0, 0);
        assert!((row[0].1 - 7.0 / 16.0).abs() < 1e-15);
        assert!(verify_attention(&m).valid);
    }

    #[test]
    fn pure_mixture_reproduces_component() {
        let shared = SharedSequence::new(&k2_seq());
        for kind in MIXTURE_ORDER {
            let fam = shared.typed_family(&k2()).unwrap();
            let idx = MIXTURE_ORDER.iter().position(|&k| k == kind).unwrap();
            let single = fam[idx].clone();
            let m = mix(fam, MixtureWeights::pure(kind)).unwrap();
            assert!(same_entries(&m, &single));
        }
    }

    #[test]
    fn mix_rejects_wrong_tags() {
        let shared = SharedSequence::new(&k2_seq());
        let [a, b, o, t] = shared.typed_family(&k2()).unwrap();
        let rho = MixtureWeights::pure(MapKind::A);
        assert!(matches!(mix([b, a, o, t], rho), Err(AttentionError::TagMismatch { slot: 0, .. })));
        assert!("0.3,0.3,0.3".parse::<MixtureWeights>().is_err());
        assert!("0.3,0.3,0.3,0.0".parse::<MixtureWeights>().is_err());
        assert!("0.25,0.25,0.25,0.25".parse::<MixtureWeights>().is_ok());
    }

    #[test]
    fn short_row_is_invalid() {
        let m = AttentionMap::from_rows(MapKind::Custom, vec![vec![(0, 1.0)], vec![(0, 0.4), (1, 0.5)]]).unwrap();
        let check = verify_attention(&m);
        assert!(!check.valid);
        assert!((check.worst_row_sum_error - 0.1).abs() < 1e-15);
        let up = AttentionMap::from_rows(MapKind::Custom, vec![vec![(1, 1.0)], vec![(1, 1.0)]]).unwrap();
        assert_eq!(verify_attention(&up).upper_entries, 1);
    }

    #[test]
    fn balance_deviation_sees_only_token_totals() {
        let seq = TokenSequence::from_tokens(2, vec![0, 1, 0, 0, 1, 0]).unwrap();
        // row 6: token 1 at cols 1,3,4,6 (mass 4/6), token 2 at cols 2,5 (mass 2/6)
        let uniform = |k: usize| -> Vec<(usize, f64)> {
            if k < 2 {
                vec![(k, 1.0)]
            } else {
                (0..=k).map(|j| (j, 1.0 / (k + 1) as f64)).collect()
            }
        };
        let mut rows: Vec<Vec<(usize, f64)>> = (0..5).map(uniform).collect();
        rows.push(vec![(0, 0.5), (2, 1.0 / 6.0), (1, 1.0 / 3.0)]);
        let m = AttentionMap::from_rows(MapKind::Custom, rows).unwrap();
        assert!(balance_deviation(&m, &seq, &TokenFunction::All) < 1e-14);

        let delta = 0.05;
        let mut rows: Vec<Vec<(usize, f64)>> = (0..5).map(uniform).collect();
        rows.push((0..6).map(|j| (j, 1.0 / 6.0 + if j == 0 { delta } else if j == 1 { -delta } else { 0.0 })).collect());
        let m = AttentionMap::from_rows(MapKind::Custom, rows).unwrap();
        let dev = balance_deviation(&m, &seq, &TokenFunction::All);
        assert!((dev - 6f64.sqrt() * delta).abs() < 1e-12);
    }

    #[test]
    fn latent_image_examples() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 5.0]);
        let pi = DVector::from_vec(vec![0.5, 0.5]);
        let id = reflected_latent_image(&TokenFunction::singleton(&[0, 1]), &z, &pi).unwrap();
        assert_eq!(id, z);
        let swap = reflected_latent_image(&TokenFunction::neighbors(&k2()), &z, &pi).unwrap();
        assert_eq!(swap.column(0), z.column(1));
        assert_eq!(swap.column(1), z.column(0));
        let avg = reflected_latent_image(&TokenFunction::All, &z, &pi).unwrap();
        assert_eq!(avg.column(0), avg.column(1));
        assert_eq!(avg[(0, 0)], 2.0);
        let empty = reflected_latent_image(&TokenFunction::Sets(vec![vec![], vec![0]]), &z, &pi).unwrap();
        assert_eq!(empty[(0, 0)], 0.0);
    }

    #[test]
    fn apply_matches_rows() {
        let seq = TokenSequence::from_tokens(3, vec![0, 1, 2, 1, 0, 2, 2, 1, 0, 1]).unwrap();
        let g = Graph::path(3).unwrap();
        let shared = SharedSequence::new(&seq);
        let v = DMatrix::from_fn(10, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        for spec in [TypeSpec::A, TypeSpec::B, TypeSpec::O, TypeSpec::T, TypeSpec::Singleton(vec![2, 0, 1])] {
            let m = shared.construct(&g, &spec).unwrap();
            let fast = m.apply(&v).unwrap();
            let slow = m.materialize().apply(&v).unwrap();
            assert!((fast - slow).amax() < 1e-14, "{spec:?}");
        }
    }

    #[test]
    fn empty_admissible_set_names_row() {
        // token 2 never appears, and singleton f sends everything to it
        let seq = TokenSequence::from_tokens(3, vec![0, 1, 0, 1, 0]).unwrap();
        let err = construct_typed(&seq, &Graph::path(3).unwrap(), &TypeSpec::Singleton(vec![2, 2, 2])).unwrap_err();
        assert!(matches!(err, AttentionError::EmptyAdmissible { row: 4 }));
    }

    #[test]
    fn jsonl_round_trip() {
        let seq = TokenSequence::from_tokens(3, vec![0, 1, 2, 1, 0, 2, 2, 1, 0, 1]).unwrap();
        let fam = SharedSequence::new(&seq).typed_family(&Graph::path(3).unwrap()).unwrap();
        let m = mix(fam, MixtureWeights::new(0.1, 0.2, 0.3, 0.4).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&m, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert!(same_entries(&m, &back));
        assert_eq!(back.kind(), MapKind::Mixture);
        assert_eq!(back.rho(), m.rho());
        let bad = "{\"n\":2,\"type\":\"custom\",\"rho\":null}\n{\"row\":1,\"col\":3,\"weight\":1}\n";
        assert!(matches!(read_jsonl(bad.as_bytes()), Err(AttentionError::Parse { line: 2, .. })));
    }
}
