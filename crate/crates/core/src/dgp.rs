//! Token sequences: a fixed traversal of the vocabulary followed by a random
//! walk on the graph, optionally corrupted by uniform jumps.
//!
//! Tokens and positions are 0-based in memory. A "prefix length" `k` counts
//! positions `0..k`, so `F(x, k)` is the number of occurrences of `x` among
//! the first `k` tokens. The JSON sequence format stores 1-based tokens.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, ReweightedGraph};

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("sequence length n = {n} must exceed 10c = {}", 10 * c)]
    TooShort { n: usize, c: usize },
    #[error("noise probability must lie in [0, 1), got {0}")]
    Epsilon(f64),
    #[error("token {token} at position {position} is outside the vocabulary of size {c}")]
    TokenRange {
        position: usize,
        token: usize,
        c: usize,
    },
    #[error("sequence file is inconsistent: {0}")]
    Format(String),
    #[error("window {window} is not in 1..={n}")]
    Window { window: usize, n: usize },
    #[error("vocabulary sizes differ: sequence has {sequence}, graph has {graph}")]
    Vocabulary { sequence: usize, graph: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DgpError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    c: usize,
    tokens: Vec<usize>,
    noise: Vec<bool>,
    epsilon: f64,
    seed: u64,
}

impl TokenSequence {
    /// Wraps an arbitrary token list (no DGP invariants imposed). Used for
    /// synthetic controls.
    pub fn from_tokens(c: usize, tokens: Vec<usize>) -> Result<Self> {
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(DgpError::TokenRange { position, token, c });
        }
        let noise = vec![false; tokens.len()];
        Ok(TokenSequence {
            c,
            tokens,
            noise,
            epsilon: 0.0,
            seed: 0,
        })
    }

    pub fn vocabulary_size(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn token(&self, position: usize) -> usize {
        self.tokens[position]
    }

    /// `true` where the token was reached by a uniform jump.
    pub fn noise_flags(&self) -> &[bool] {
        &self.noise
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Checks the traversal prefix, the length bound and that every
    /// unflagged transition after the prefix is a graph edge.
    pub fn check_dgp(&self, g: &Graph) -> Result<()> {
        let c = self.c;
        if g.vertex_count() != c {
            return Err(DgpError::Vocabulary {
                sequence: c,
                graph: g.vertex_count(),
            });
        }
        if self.len() <= 10 * c {
            return Err(DgpError::TooShort { n: self.len(), c });
        }
        if let Some(k) = (0..c).find(|&k| self.tokens[k] != k) {
            return Err(DgpError::Format(format!("position {} breaks the traversal prefix", k + 1)));
        }
        for j in c..self.len() - 1 {
            if !self.noise[j + 1] && !g.is_edge(self.tokens[j], self.tokens[j + 1]) {
                return Err(DgpError::Format(format!(
                    "unflagged non-edge transition at position {}",
                    j + 1
                )));
            }
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        let file = SequenceFile {
            c: self.c,
            n: self.len(),
            epsilon: self.epsilon,
            seed: self.seed,
            tokens: self.tokens.iter().map(|t| t + 1).collect(),
            noise_flags: self.noise.clone(),
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let file: SequenceFile = serde_json::from_reader(r)?;
        if file.tokens.len() != file.n || file.noise_flags.len() != file.n {
            return Err(DgpError::Format(format!(
                "n = {} but {} tokens and {} noise flags",
                file.n,
                file.tokens.len(),
                file.noise_flags.len()
            )));
        }
        let mut tokens = Vec::with_capacity(file.n);
        for (position, &t) in file.tokens.iter().enumerate() {
            if t == 0 || t > file.c {
                return Err(DgpError::TokenRange {
                    position,
                    token: t,
                    c: file.c,
                });
            }
            tokens.push(t - 1);
        }
        Ok(TokenSequence {
            c: file.c,
            tokens,
            noise: file.noise_flags,
            epsilon: file.epsilon,
            seed: file.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceFile {
    c: usize,
    n: usize,
    epsilon: f64,
    seed: u64,
    tokens: Vec<usize>,
    noise_flags: Vec<bool>,
}

/// Draws a sequence: positions `0..c` are the identity traversal, position
/// `c` is drawn from `π`, and each later step jumps uniformly over the
/// vocabulary with probability `epsilon` (flagged) or otherwise moves to a
/// neighbor with probability proportional to the edge weight.
pub fn generate(rg: &ReweightedGraph, n: usize, epsilon: f64, seed: u64) -> Result<TokenSequence> {
    let g = rg.graph();
    let c = g.vertex_count();
    if n <= 10 * c {
        return Err(DgpError::TooShort { n, c });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(DgpError::Epsilon(epsilon));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..c)
        .map(|x| {
            let nb = g.neighbors(x).to_vec();
            let w: Vec<f64> = nb.iter().map(|&y| g.weight(x, y)).collect();
            // Connectivity guarantees a non-empty, positive neighbor row.
            let dist = WeightedIndex::new(&w).expect("connected graph has positive neighbor weights");
            (nb, dist)
        })
        .collect();
    let start = WeightedIndex::new(rg.pi().iter().copied()).expect("π is strictly positive");

    let mut tokens: Vec<usize> = (0..c).collect();
    let mut noise = vec![false; c];
    tokens.reserve(n - c);
    noise.reserve(n - c);
    tokens.push(start.sample(&mut rng));
    noise.push(false);
    while tokens.len() < n {
        let cur = *tokens.last().unwrap_or(&0);
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            tokens.push(rng.random_range(0..c));
            noise.push(true);
        } else {
            let (nb, dist) = &kernels[cur];
            tokens.push(nb[dist.sample(&mut rng)]);
            noise.push(false);
        }
    }
    Ok(TokenSequence {
        c,
        tokens,
        noise,
        epsilon,
        seed,
    })
}

/// Occurrence lists per token; answers `F(x, k)` by binary search.
#[derive(Debug, Clone)]
pub struct FrequencyTable {
    occurrences: Vec<Vec<usize>>,
    n: usize,
}

impl FrequencyTable {
    pub fn new(seq: &TokenSequence) -> Self {
        let mut occurrences = vec![Vec::new(); seq.vocabulary_size()];
        for (i, &t) in seq.tokens().iter().enumerate() {
            occurrences[t].push(i);
        }
        FrequencyTable {
            occurrences,
            n: seq.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `F(x, k)`: occurrences of `x` among the first `k` tokens.
    pub fn count(&self, x: usize, k: usize) -> usize {
        self.occurrences[x].partition_point(|&p| p < k)
    }

    /// Sorted 0-based positions of `x`.
    pub fn occurrences(&self, x: usize) -> &[usize] {
        &self.occurrences[x]
    }

    /// 0-based position of the last occurrence of `x`.
    pub fn last_occurrence(&self, x: usize) -> Option<usize> {
        self.occurrences[x].last().copied()
    }
}

pub fn frequency_table(seq: &TokenSequence) -> FrequencyTable {
    FrequencyTable::new(seq)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetDeviation {
    /// 0-based members of the subset.
    pub members: Vec<usize>,
    pub worst: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationReport {
    /// `max √k |F(y,k)/k − π_y| / log n` over `k ∈ (c, n]` and singletons.
    pub max_scaled_deviation: f64,
    /// Prefix length and token attaining the maximum.
    pub worst_prefix: usize,
    pub worst_token: usize,
    /// The same statistic for random subsets of the vocabulary.
    pub per_set_worst: Vec<SubsetDeviation>,
}

pub const CONCENTRATION_SUBSETS: usize = 64;

/// Scaled empirical-frequency deviation from `π`. Subsets are drawn with a
/// generator seeded by `subset_seed`.
pub fn concentration_report(seq: &TokenSequence, pi: &DVector<f64>, subset_seed: u64) -> ConcentrationReport {
    let c = seq.vocabulary_size();
    let n = seq.len();
    let log_n = (n as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(subset_seed);
    let subsets: Vec<Vec<usize>> = (0..CONCENTRATION_SUBSETS)
        .map(|_| {
            let mut s: Vec<usize> = (0..c).filter(|_| rng.random::<bool>()).collect();
            if s.is_empty() {
                s.push(rng.random_range(0..c));
            }
            s
        })
        .collect();
    let subset_pi: Vec<f64> = subsets.iter().map(|s| s.iter().map(|&y| pi[y]).sum()).collect();

    let mut counts = vec![0usize; c];
    let mut best = (0.0f64, 0usize, 0usize);
    let mut set_worst = vec![0.0f64; subsets.len()];
    for (i, &t) in seq.tokens().iter().enumerate() {
        counts[t] += 1;
        let k = i + 1;
        if k <= c {
            continue;
        }
        let kf = k as f64;
        let scale = kf.sqrt() / log_n;
        for y in 0..c {
            let dev = scale * (counts[y] as f64 / kf - pi[y]).abs();
            if dev > best.0 {
                best = (dev, k, y);
            }
        }
        for (s, members) in subsets.iter().enumerate() {
            let f: usize = members.iter().map(|&y| counts[y]).sum();
            let dev = scale * (f as f64 / kf - subset_pi[s]).abs();
            if dev > set_worst[s] {
                set_worst[s] = dev;
            }
        }
    }
    ConcentrationReport {
        max_scaled_deviation: best.0,
        worst_prefix: best.1,
        worst_token: best.2,
        per_set_worst: subsets
            .into_iter()
            .zip(set_worst)
            .map(|(members, worst)| SubsetDeviation { members, worst })
            .collect(),
    }
}

/// `true` for `x` iff `x` occurs at a 1-based position `> ⌈n/2⌉`.
pub fn second_half_check(seq: &TokenSequence) -> Vec<bool> {
    let half = seq.len().div_ceil(2);
    let mut seen = vec![false; seq.vocabulary_size()];
    for &t in &seq.tokens()[half..] {
        seen[t] = true;
    }
    seen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCount {
    /// 1-based end position `k` of the window.
    pub position: usize,
    pub count: usize,
}

/// For each 1-based `k ≥ window`, the number of non-edge transitions
/// `(x_j, x_{j+1})` with `j ∈ [k − window + 1, k − 1]` and `j > c`.
pub fn non_neighbor_count(seq: &TokenSequence, g: &Graph, window: usize) -> Result<Vec<WindowCount>> {
    let n = seq.len();
    let c = seq.vocabulary_size();
    if window == 0 || window > n {
        return Err(DgpError::Window { window, n });
    }
    if g.vertex_count() != c {
        return Err(DgpError::Vocabulary {
            sequence: c,
            graph: g.vertex_count(),
        });
    }
    let t = seq.tokens();
    // prefix[j] = bad transitions among 1-based j' in 1..=j
    let mut prefix = vec![0usize; n + 1];
    for j in 1..n {
        let bad = j > c && !g.is_edge(t[j - 1], t[j]);
        prefix[j] = prefix[j - 1] + usize::from(bad);
    }
    prefix[n] = prefix[n - 1];
    Ok((window..=n)
        .map(|k| WindowCount {
            position: k,
            count: prefix[k - 1] - prefix[k - window],
        })
        .collect())
}

pub fn write_window_counts_csv<W: Write>(counts: &[WindowCount], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["position", "count"])?;
    for wc in counts {
        out.serialize((wc.position, wc.count))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_window_counts_csv<R: Read>(r: R) -> csv::Result<Vec<WindowCount>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

/// Counts over the noise-flagged steps after the prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStatistics {
    /// Transitions after position `c` (1-based `j > c`).
    pub transitions: usize,
    pub flagged: usize,
    pub flagged_non_edges: usize,
    pub unflagged_non_edges: usize,
}

impl NoiseStatistics {
    /// Fraction of uniform jumps that land on a non-neighbor.
    pub fn non_edge_probability(&self) -> f64 {
        if self.flagged == 0 {
            0.0
        } else {
            self.flagged_non_edges as f64 / self.flagged as f64
        }
    }
}

pub fn noise_statistics(seq: &TokenSequence, g: &Graph) -> NoiseStatistics {
    let c = seq.vocabulary_size();
    let t = seq.tokens();
    let mut stats = NoiseStatistics {
        transitions: 0,
        flagged: 0,
        flagged_non_edges: 0,
        unflagged_non_edges: 0,
    };
    for j in c + 1..seq.len() {
        let bad = !g.is_edge(t[j - 1], t[j]);
        stats.transitions += 1;
        if seq.noise_flags()[j] {
            stats.flagged += 1;
            stats.flagged_non_edges += usize::from(bad);
        } else {
            stats.unflagged_non_edges += usize::from(bad);
        }
    }
    stats
}

/// Row-normalized counts of unflagged transitions after the prefix.
pub fn empirical_transitions(seq: &TokenSequence) -> DMatrix<f64> {
    let c = seq.vocabulary_size();
    let t = seq.tokens();
    let mut m = DMatrix::zeros(c, c);
    for j in c + 1..seq.len() {
        if !seq.noise_flags()[j] {
            m[(t[j - 1], t[j])] += 1.0;
        }
    }
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    m
}
