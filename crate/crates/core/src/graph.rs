//! Vocabulary graphs, stationary laws, the reweighted adjacency and its
//! normalized operator.
//!
//! Vertices are 0-based internally. Every external format (edge-list files,
//! spectra CSV) is 1-based.
//!
//! The normalized operator is `M = D^{-1/2} W D^{-1/2}` where
//! `w[x][y] = w̃[x][y] · π[x] · π[y]` and `D = diag(W 1)`. `I - M` is the
//! symmetric normalized Laplacian of the reweighted graph, so the top of
//! `M`'s spectrum is the smooth (low-frequency) end.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest vocabulary handled by the dense eigensolver path.
pub const MAX_VERTICES: usize = 256;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 100_000;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph needs at least 2 vertices, got {0}")]
    TooSmall(usize),
    #[error("graph has {0} vertices; the dense path supports at most {MAX_VERTICES}")]
    TooLarge(usize),
    #[error("adjacency is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },
    #[error("invalid edge weight {weight} at ({row}, {col})")]
    InvalidWeight { row: usize, col: usize, weight: f64 },
    #[error("graph is disconnected: vertex {vertex} is unreachable from vertex 1")]
    Disconnected { vertex: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("edge list {0} contains no edges")]
    EmptyFile(String),
    #[error("invalid graph spec `{0}`")]
    Spec(String),
    #[error("eigensolver did not converge (residual {residual:e})")]
    Eigensolver { residual: f64 },
    #[error("stationary vector is not strictly positive (entry {index} = {value:e})")]
    NonPositive { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("vertex {vertex} has zero reweighted degree")]
    IsolatedVertex { vertex: usize },
    #[error("split index q = {q} out of range for c = {c}")]
    SplitIndex { q: usize, c: usize },
    #[error("decay factor undefined: |mu_q| is zero")]
    ZeroPivot,
    #[error("malformed spectra file: {0}")]
    Spectra(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Graph families the builder knows about.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphKind {
    Grid { rows: usize, cols: usize },
    Ring(usize),
    Complete(usize),
    Path(usize),
    File(PathBuf),
}

impl FromStr for GraphKind {
    type Err = GraphError;

    /// Accepts `grid:RxC`, `ring:C`, `complete:C`, `path:C` and `file:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GraphError::Spec(s.to_string());
        let (family, arg) = s.split_once(':').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        match family.trim() {
            "grid" => {
                let (r, c) = arg.split_once(['x', 'X']).ok_or_else(bad)?;
                Ok(GraphKind::Grid {
                    rows: num(r)?,
                    cols: num(c)?,
                })
            }
            "ring" => Ok(GraphKind::Ring(num(arg)?)),
            "complete" => Ok(GraphKind::Complete(num(arg)?)),
            "path" => Ok(GraphKind::Path(num(arg)?)),
            "file" => Ok(GraphKind::File(PathBuf::from(arg))),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphKind::Grid { rows, cols } => write!(f, "grid:{rows}x{cols}"),
            GraphKind::Ring(c) => write!(f, "ring:{c}"),
            GraphKind::Complete(c) => write!(f, "complete:{c}"),
            GraphKind::Path(c) => write!(f, "path:{c}"),
            GraphKind::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// Connected undirected vocabulary graph with a symmetric non-negative
/// adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = adjacency.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        if rows < 2 {
            return Err(GraphError::TooSmall(rows));
        }
        if rows > MAX_VERTICES {
            return Err(GraphError::TooLarge(rows));
        }
        for i in 0..rows {
            for j in 0..cols {
                let w = adjacency[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(GraphError::InvalidWeight {
                        row: i + 1,
                        col: j + 1,
                        weight: w,
                    });
                }
                if (w - adjacency[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(GraphError::Asymmetric {
                        row: i + 1,
                        col: j + 1,
                    });
                }
            }
        }
        let neighbors = (0..rows)
            .map(|x| (0..rows).filter(|&y| adjacency[(x, y)] > 0.0).collect())
            .collect();
        let graph = Graph {
            adjacency,
            neighbors,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    /// Builds from 0-based `(u, v, weight)` triples; repeated edges keep the
    /// last weight.
    pub fn from_edges(c: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adj = DMatrix::zeros(c, c);
        for &(u, v, w) in edges {
            if u >= c || v >= c {
                return Err(GraphError::Dimension {
                    expected: c,
                    got: u.max(v) + 1,
                });
            }
            adj[(u, v)] = w;
            adj[(v, u)] = w;
        }
        Self::from_adjacency(adj)
    }

    pub fn build(kind: &GraphKind) -> Result<Self> {
        match kind {
            GraphKind::Grid { rows, cols } => Self::grid(*rows, *cols),
            GraphKind::Ring(c) => Self::ring(*c),
            GraphKind::Complete(c) => Self::complete(*c),
            GraphKind::Path(c) => Self::path(*c),
            GraphKind::File(p) => Self::load(p),
        }
    }

    /// 4-neighborhood grid without periodic boundary; vertex `r * cols + c`.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        let c = rows * cols;
        let mut edges = Vec::new();
        for r in 0..rows {
            for col in 0..cols {
                let v = r * cols + col;
                if col + 1 < cols {
                    edges.push((v, v + 1, 1.0));
                }
                if r + 1 < rows {
                    edges.push((v, v + cols, 1.0));
                }
            }
        }
        Self::from_edges(c, &edges)
    }

    pub fn ring(c: usize) -> Result<Self> {
        if c < 3 {
            return Err(GraphError::TooSmall(c));
        }
        let edges: Vec<_> = (0..c).map(|v| (v, (v + 1) % c, 1.0)).collect();
        Self::from_edges(c, &edges)
    }

    pub fn complete(c: usize) -> Result<Self> {
        let mut adj = DMatrix::from_element(c, c, 1.0);
        adj.fill_diagonal(0.0);
        Self::from_adjacency(adj)
    }

    pub fn path(c: usize) -> Result<Self> {
        let edges: Vec<_> = (1..c).map(|v| (v - 1, v, 1.0)).collect();
        Self::from_edges(c, &edges)
    }

    /// Random connected binary graph: a uniformly shuffled spanning path
    /// plus each remaining pair independently with probability `p`.
    pub fn random_connected<R: Rng + ?Sized>(c: usize, p: f64, rng: &mut R) -> Result<Self> {
        let mut order: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut adj = DMatrix::zeros(c, c);
        for w in order.windows(2) {
            adj[(w[0], w[1])] = 1.0;
            adj[(w[1], w[0])] = 1.0;
        }
        for x in 0..c {
            for y in (x + 1)..c {
                if adj[(x, y)] == 0.0 && rng.random::<f64>() < p {
                    adj[(x, y)] = 1.0;
                    adj[(y, x)] = 1.0;
                }
            }
        }
        Self::from_adjacency(adj)
    }

    /// Reads a `u v [weight]` edge list (1-based, `#` comments). The vertex
    /// count is the largest index mentioned.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_edge_list(file, &path.display().to_string())
    }

    pub fn read_edge_list<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut c = 0usize;
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let parse_err = |message: String| GraphError::Parse {
                path: origin.to_string(),
                line: idx + 1,
                message,
            };
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 2 && fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected `u v [weight]`, found {} fields",
                    fields.len()
                )));
            }
            let vertex = |t: &str| -> Result<usize> {
                match t.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(parse_err(format!("invalid vertex `{t}` (1-based)"))),
                }
            };
            let u = vertex(fields[0])?;
            let v = vertex(fields[1])?;
            let w = match fields.get(2) {
                Some(t) => t
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("invalid weight `{t}`")))?,
                None => 1.0,
            };
            if !w.is_finite() || w <= 0.0 {
                return Err(parse_err(format!("weight must be positive, got {w}")));
            }
            c = c.max(u + 1).max(v + 1);
            edges.push((u, v, w));
        }
        if edges.is_empty() {
            return Err(GraphError::EmptyFile(origin.to_string()));
        }
        Self::from_edges(c, &edges)
    }

    pub fn write_edge_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {} vertices, {} edges", self.vertex_count(), self.edge_count())?;
        for (x, y, weight) in self.edges() {
            if weight == 1.0 {
                writeln!(w, "{} {}", x + 1, y + 1)?;
            } else {
                writeln!(w, "{} {} {}", x + 1, y + 1, weight)?;
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn weight(&self, x: usize, y: usize) -> f64 {
        self.adjacency[(x, y)]
    }

    pub fn is_edge(&self, x: usize, y: usize) -> bool {
        self.adjacency[(x, y)] > 0.0
    }

    pub fn neighbors(&self, x: usize) -> &[usize] {
        &self.neighbors[x]
    }

    /// Undirected edges `(x, y, w)` with `x <= y`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let c = self.vertex_count();
        (0..c).flat_map(move |x| {
            (x..c).filter_map(move |y| {
                let w = self.adjacency[(x, y)];
                (w > 0.0).then_some((x, y, w))
            })
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    pub fn degrees(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.vertex_count(),
            self.adjacency.row_iter().map(|r| r.sum()),
        )
    }

    pub fn is_regular(&self) -> bool {
        let d = self.degrees();
        d.iter().all(|&x| (x - d[0]).abs() < 1e-12)
    }

    /// Hop distances from `source` (unweighted BFS).
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.vertex_count()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(x) = queue.pop_front() {
            let dx = dist[x].unwrap_or(0);
            for &y in &self.neighbors[x] {
                if dist[y].is_none() {
                    dist[y] = Some(dx + 1);
                    queue.push_back(y);
                }
            }
        }
        dist
    }

    pub fn eccentricities(&self) -> Vec<usize> {
        (0..self.vertex_count())
            .map(|x| {
                self.hop_distances(x)
                    .into_iter()
                    .map(|d| d.unwrap_or(usize::MAX))
                    .max()
                    .unwrap_or(0)
            })
            .collect()
    }

    fn check_connected(&self) -> Result<()> {
        match self.hop_distances(0).iter().position(Option::is_none) {
            Some(v) => Err(GraphError::Disconnected { vertex: v + 1 }),
            None => Ok(()),
        }
    }
}

pub fn build_graph(kind: &GraphKind) -> Result<Graph> {
    Graph::build(kind)
}

/// Which vector plays the role of `π`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationaryMode {
    /// Degree-proportional law of the simple random walk.
    #[default]
    Walk,
    /// L1-normalized leading eigenvector of the adjacency.
    Perron,
}

impl FromStr for StationaryMode {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk" => Ok(Self::Walk),
            "perron" => Ok(Self::Perron),
            _ => Err(GraphError::Spec(s.to_string())),
        }
    }
}

impl fmt::Display for StationaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Walk => "walk",
            Self::Perron => "perron",
        })
    }
}

pub fn stationary_distribution(g: &Graph, mode: StationaryMode) -> Result<DVector<f64>> {
    let pi = match mode {
        StationaryMode::Walk => {
            let d = g.degrees();
            let total = d.sum();
            d / total
        }
        StationaryMode::Perron => {
            let basis = SpectralBasis::of_symmetric(g.adjacency(), 1, EigenOrder::Descending)?;
            let v = basis.vector(0).into_owned();
            let s = v.sum();
            v / s
        }
    };
    if let Some((index, &value)) = pi.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(GraphError::NonPositive { index, value });
    }
    Ok(pi)
}

/// The reweighted graph `W`, its degrees `d` and the normalized operator `M`.
#[derive(Debug, Clone)]
pub struct ReweightedGraph {
    graph: Graph,
    pi: DVector<f64>,
    weights: DMatrix<f64>,
    degrees: DVector<f64>,
    sqrt_degrees: DVector<f64>,
    operator: DMatrix<f64>,
}

impl ReweightedGraph {
    pub fn new(graph: Graph, pi: DVector<f64>) -> Result<Self> {
        let c = graph.vertex_count();
        if pi.len() != c {
            return Err(GraphError::Dimension {
                expected: c,
                got: pi.len(),
            });
        }
        if let Some((index, &value)) = pi.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(GraphError::NonPositive { index, value });
        }
        let weights = DMatrix::from_fn(c, c, |x, y| graph.weight(x, y) * pi[x] * pi[y]);
        let degrees = DVector::from_iterator(c, weights.row_iter().map(|r| r.sum()));
        if let Some(vertex) = degrees.iter().position(|&d| !(d > 0.0)) {
            return Err(GraphError::IsolatedVertex { vertex: vertex + 1 });
        }
        let sqrt_degrees = degrees.map(f64::sqrt);
        let operator = DMatrix::from_fn(c, c, |x, y| {
            weights[(x, y)] / (sqrt_degrees[x] * sqrt_degrees[y])
        });
        Ok(ReweightedGraph {
            graph,
            pi,
            weights,
            degrees,
            sqrt_degrees,
            operator,
        })
    }

    /// Builds the graph's stationary law in `mode` and reweights by it.
    pub fn from_graph(graph: Graph, mode: StationaryMode) -> Result<Self> {
        let pi = stationary_distribution(&graph, mode)?;
        Self::new(graph, pi)
    }

    pub fn vertex_count(&self) -> usize {
        self.graph.vertex_count()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn degrees(&self) -> &DVector<f64> {
        &self.degrees
    }

    pub fn sqrt_degrees(&self) -> &DVector<f64> {
        &self.sqrt_degrees
    }

    /// `M = D^{-1/2} W D^{-1/2}`.
    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    /// Row-stochastic `D^{-1} W`.
    pub fn transition(&self) -> DMatrix<f64> {
        let c = self.vertex_count();
        DMatrix::from_fn(c, c, |x, y| self.weights[(x, y)] / self.degrees[x])
    }

    /// `‖M √d − √d‖ / ‖√d‖`; zero up to rounding for every valid graph.
    pub fn perron_residual(&self) -> f64 {
        let s = &self.sqrt_degrees;
        (&self.operator * s - s).norm() / s.norm()
    }
}

pub fn reweight(g: &Graph, pi: &DVector<f64>) -> Result<ReweightedGraph> {
    ReweightedGraph::new(g.clone(), pi.clone())
}

/// Ordering applied to the eigenpairs of a [`SpectralBasis`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EigenOrder {
    /// Signed eigenvalues, largest first: the smooth end of `M` comes first.
    #[default]
    Descending,
    /// By `|rho_a + rho_b λ|`, largest first, ties broken by signed `λ`.
    /// This is the ordering of the layer operator `rho_a I + rho_b M`.
    Magnitude { rho_a: f64, rho_b: f64 },
}

impl EigenOrder {
    fn key(&self, lambda: f64) -> f64 {
        match *self {
            EigenOrder::Descending => lambda,
            EigenOrder::Magnitude { rho_a, rho_b } => (rho_a + rho_b * lambda).abs(),
        }
    }
}

/// Orthonormal eigenbasis `[f1 | X | Y]` of a symmetric operator, split after
/// column `q`.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    eigenvalues: Vec<f64>,
    vectors: DMatrix<f64>,
    split: usize,
    order: EigenOrder,
}

impl SpectralBasis {
    pub fn new(rg: &ReweightedGraph, q: usize, order: EigenOrder) -> Result<Self> {
        Self::of_symmetric(rg.operator(), q, order)
    }

    /// Eigen-decomposes any symmetric matrix. Each eigenvector's first
    /// component of non-negligible size is made positive.
    pub fn of_symmetric(matrix: &DMatrix<f64>, q: usize, order: EigenOrder) -> Result<Self> {
        let c = matrix.nrows();
        if q < 1 || q >= c.max(2) {
            return Err(GraphError::SplitIndex { q, c });
        }
        let eig = SymmetricEigen::try_new(matrix.clone(), EIGEN_EPS, EIGEN_MAX_ITER).ok_or(
            GraphError::Eigensolver {
                residual: f64::INFINITY,
            },
        )?;
        let mut idx: Vec<usize> = (0..c).collect();
        idx.sort_by(|&a, &b| {
            let (la, lb) = (eig.eigenvalues[a], eig.eigenvalues[b]);
            order
                .key(lb)
                .total_cmp(&order.key(la))
                .then(lb.total_cmp(&la))
        });
        let eigenvalues: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut vectors = DMatrix::zeros(c, c);
        for (col, &i) in idx.iter().enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            let scale = v.amax();
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
                if *first < 0.0 {
                    v.neg_mut();
                }
            }
            vectors.set_column(col, &v);
        }
        let residual = (matrix * &vectors - &vectors * DMatrix::from_diagonal(&DVector::from_vec(eigenvalues.clone())))
            .norm()
            / matrix.norm().max(1.0);
        if !residual.is_finite() || residual > 1e-8 {
            return Err(GraphError::Eigensolver { residual });
        }
        Ok(SpectralBasis {
            eigenvalues,
            vectors,
            split: q,
            order,
        })
    }

    pub fn dimension(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.vectors.column(i)
    }

    pub fn q(&self) -> usize {
        self.split
    }

    pub fn order(&self) -> EigenOrder {
        self.order
    }

    /// Same eigenpairs with a different split index.
    pub fn with_split(&self, q: usize) -> Result<Self> {
        let c = self.dimension();
        if q < 1 || q >= c {
            return Err(GraphError::SplitIndex { q, c });
        }
        Ok(SpectralBasis {
            split: q,
            ..self.clone()
        })
    }

    pub fn leading(&self) -> DVector<f64> {
        self.vectors.column(0).into_owned()
    }

    /// `X`: eigenvectors 2..=q.
    pub fn low(&self) -> DMatrix<f64> {
        self.vectors.columns(1, self.split - 1).into_owned()
    }

    /// `Y`: eigenvectors q+1..=c.
    pub fn high(&self) -> DMatrix<f64> {
        self.vectors
            .columns(self.split, self.dimension() - self.split)
            .into_owned()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues));
        &self.vectors * lam * self.vectors.transpose()
    }

    pub fn decay_factor(&self, rho_a: f64, rho_b: f64) -> Result<f64> {
        decay_factor(&self.eigenvalues, self.split, rho_a, rho_b)
    }

    /// Spectra CSV: `index,eigenvalue,component_1..component_c`, one row per
    /// eigenpair, 1-based index.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let c = self.dimension();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["index".to_string(), "eigenvalue".to_string()];
        header.extend((1..=c).map(|i| format!("component_{i}")));
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..c {
            let mut row = vec![(i + 1).to_string(), self.eigenvalues[i].to_string()];
            row.extend(self.vectors.column(i).iter().map(|v| v.to_string()));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, q: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut eigenvalues = Vec::new();
        let mut columns = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|t| t.parse::<f64>().map_err(|e| GraphError::Spectra(e.to_string())))
                .collect::<Result<_>>()?;
            let (first, rest) = vals
                .split_first()
                .ok_or_else(|| GraphError::Spectra("empty row".into()))?;
            eigenvalues.push(*first);
            columns.push(DVector::from_column_slice(rest));
        }
        let c = eigenvalues.len();
        if c < 2 || columns.iter().any(|v| v.len() != c) {
            return Err(GraphError::Spectra(format!("expected a square basis, got {c} rows")));
        }
        if q < 1 || q >= c {
            return Err(GraphError::SplitIndex { q, c });
        }
        Ok(SpectralBasis {
            eigenvalues,
            vectors: DMatrix::from_columns(&columns),
            split: q,
            order: EigenOrder::Descending,
        })
    }
}

fn csv_err(e: csv::Error) -> GraphError {
    GraphError::Spectra(e.to_string())
}

pub fn spectral_basis(rg: &ReweightedGraph, q: usize) -> Result<SpectralBasis> {
    SpectralBasis::new(rg, q, EigenOrder::Descending)
}

/// `|μ_{q+1}| / |μ_q|` for `μ_i = rho_a + rho_b λ_i` sorted by decreasing
/// magnitude (1-based `q`).
pub fn decay_factor(eigenvalues: &[f64], q: usize, rho_a: f64, rho_b: f64) -> Result<f64> {
    let c = eigenvalues.len();
    if q < 1 || q >= c {
        return Err(GraphError::SplitIndex { q, c });
    }
    let mut mu: Vec<f64> = eigenvalues
        .iter()
        .map(|&l| (rho_a + rho_b * l).abs())
        .collect();
    mu.sort_by(|a, b| b.total_cmp(a));
    let pivot = mu[q - 1];
    if pivot == 0.0 {
        return Err(GraphError::ZeroPivot);
    }
    Ok(mu[q] / pivot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn grid_2x2_is_a_four_cycle() {
        let g = Graph::grid(2, 2).unwrap();
        assert_eq!(g.vertex_count(), 4);
        assert_eq!(g.edge_count(), 4);
        assert!(g.is_regular());
    }

    #[test]
    fn complete_has_all_ones_off_diagonal() {
        let g = Graph::complete(3).unwrap();
        for x in 0..3 {
            for y in 0..3 {
                assert_eq!(g.weight(x, y), if x == y { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn grid_edge_count_matches_enumeration() {
        for r in 2..7 {
            let g = Graph::grid(r, r).unwrap();
            let mut count = 0;
            for a in 0..r * r {
                for b in (a + 1)..r * r {
                    let (ra, ca) = (a / r, a % r);
                    let (rb, cb) = (b / r, b % r);
                    if ra.abs_diff(rb) + ca.abs_diff(cb) == 1 {
                        count += 1;
                    }
                }
            }
            assert_eq!(g.edge_count(), count);
            assert_eq!(count, 2 * r * (r - 1));
        }
        assert_eq!(Graph::grid(4, 4).unwrap().edge_count(), 24);
    }

    #[test]
    fn rejects_disconnected_and_tiny() {
        let err = Graph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap_err();
        assert!(matches!(err, GraphError::Disconnected { vertex: 3 }));
        assert!(matches!(Graph::complete(1), Err(GraphError::TooSmall(1))));
        assert!(Graph::read_edge_list("# nothing\n".as_bytes(), "mem").is_err());
    }

    #[test]
    fn edge_list_parsing() {
        let text = "# square\n1 2\n2 3 2.5\n3 4 # trailing\n4 1\n";
        let g = Graph::read_edge_list(text.as_bytes(), "mem").unwrap();
        assert_eq!(g.vertex_count(), 4);
        assert_eq!(g.weight(1, 2), 2.5);
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let back = Graph::read_edge_list(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, g);

        let err = Graph::read_edge_list("1 2\n0 3\n".as_bytes(), "f.txt").unwrap_err();
        assert!(err.to_string().starts_with("f.txt:2:"), "{err}");
        let err = Graph::read_edge_list("1 2\n3 4\n".as_bytes(), "f.txt").unwrap_err();
        assert!(matches!(err, GraphError::Disconnected { .. }));
    }

    #[test]
    fn graph_kind_parsing() {
        assert_eq!(
            "grid:4x4".parse::<GraphKind>().unwrap(),
            GraphKind::Grid { rows: 4, cols: 4 }
        );
        assert_eq!("ring:8".parse::<GraphKind>().unwrap(), GraphKind::Ring(8));
        assert!("grid:4".parse::<GraphKind>().is_err());
        assert!("torus:4".parse::<GraphKind>().is_err());
        assert_eq!(GraphKind::Grid { rows: 3, cols: 5 }.to_string(), "grid:3x5");
    }

    #[test]
    fn walk_stationary_examples() {
        let pi = stationary_distribution(&Graph::complete(4).unwrap(), StationaryMode::Walk).unwrap();
        assert!(pi.iter().all(|&p| close(p, 0.25, 1e-15)));
        let pi = stationary_distribution(&Graph::path(3).unwrap(), StationaryMode::Walk).unwrap();
        assert!(close(pi[0], 0.25, 1e-15) && close(pi[1], 0.5, 1e-15) && close(pi[2], 0.25, 1e-15));
    }

    #[test]
    fn reweight_complete_two() {
        let g = Graph::complete(2).unwrap();
        let pi = DVector::from_vec(vec![0.5, 0.5]);
        let rg = reweight(&g, &pi).unwrap();
        assert_eq!(rg.weights()[(0, 1)], 0.25);
        assert_eq!(rg.degrees().as_slice(), &[0.25, 0.25]);
        assert!(close(rg.operator()[(0, 1)], 1.0, 1e-15));
        assert_eq!(rg.operator()[(0, 0)], 0.0);
    }

    #[test]
    fn reweight_rejects_bad_pi() {
        let g = Graph::complete(3).unwrap();
        assert!(matches!(
            reweight(&g, &DVector::from_vec(vec![0.5, 0.5])),
            Err(GraphError::Dimension { .. })
        ));
        assert!(matches!(
            reweight(&g, &DVector::from_vec(vec![0.5, 0.5, 0.0])),
            Err(GraphError::NonPositive { index: 2, .. })
        ));
    }

    #[test]
    fn decay_factor_examples() {
        assert_eq!(decay_factor(&[1.0, 0.5, 0.25], 2, 0.0, 1.0).unwrap(), 0.5);
        assert_eq!(decay_factor(&[1.0, -0.3, 0.2, 0.1], 2, 0.7, 0.0).unwrap(), 1.0);
        assert!(matches!(
            decay_factor(&[1.0, 0.0, 0.0], 2, 0.0, 1.0),
            Err(GraphError::ZeroPivot)
        ));
        assert!(decay_factor(&[1.0, 0.5], 2, 0.0, 1.0).is_err());
    }

    #[test]
    fn split_index_bounds() {
        let rg = ReweightedGraph::from_graph(Graph::ring(5).unwrap(), StationaryMode::Walk).unwrap();
        assert!(spectral_basis(&rg, 0).is_err());
        assert!(spectral_basis(&rg, 5).is_err());
        let b = spectral_basis(&rg, 4).unwrap();
        assert_eq!(b.low().ncols(), 3);
        assert_eq!(b.high().ncols(), 1);
    }
}
