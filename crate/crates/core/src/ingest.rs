//! Attention-weight dumps and the structured-connection classifier.
//!
//! Dump format (JSON lines, optionally gzip-compressed when the path ends in
//! `.gz`): a header `{"n_layers","n_heads","n","c","tokens"}` followed by one
//! record `{"l","h","q","k","w"}` per weight. Layers, heads, positions and
//! tokens are 1-based; `w` may be a number or a decimal string.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionMap;
use crate::dgp::TokenSequence;
use crate::graph::Graph;

pub const DUMP_ROW_TOLERANCE: f64 = 1e-3;
pub const PRECEDENCE: &str = "T>A>B>other";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dump is empty")]
    Empty,
    #[error("header has no token sequence of length n = {n}")]
    MissingTokens { n: usize },
    #[error("token sequence uses token {token} but the graph has {c} vertices")]
    Vocabulary { token: usize, c: usize },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone)]
enum HeadRows {
    /// `(query, key, weight)` sorted by query then key, 0-based.
    Records(Vec<(u32, u32, f64)>),
    Map(AttentionMap),
}

/// One attention head; `layer` and `head` are 1-based.
#[derive(Debug, Clone)]
pub struct DumpHead {
    pub layer: usize,
    pub head: usize,
    rows: HeadRows,
}

impl DumpHead {
    /// `(key, weight)` pairs of a 0-based query row.
    pub fn row(&self, query: usize) -> Vec<(usize, f64)> {
        match &self.rows {
            HeadRows::Map(m) => m.row(query),
            HeadRows::Records(r) => {
                let q = query as u32;
                let lo = r.partition_point(|e| e.0 < q);
                let hi = r.partition_point(|e| e.0 <= q);
                r[lo..hi].iter().map(|e| (e.1 as usize, e.2)).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n: usize,
    pub c: usize,
    /// 0-based tokens.
    pub tokens: Vec<usize>,
    heads: Vec<DumpHead>,
    /// `(layer, head, query)`, 1-based, of rows whose weights do not sum to
    /// 1 within the dump tolerance.
    pub flagged_rows: Vec<(usize, usize, usize)>,
}

#[derive(Deserialize, Serialize)]
struct DumpHeader {
    n_layers: usize,
    n_heads: usize,
    n: usize,
    c: usize,
    #[serde(default)]
    tokens: Option<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Weight {
    Number(f64),
    Text(String),
}

#[derive(Deserialize)]
struct RawRecord {
    l: usize,
    h: usize,
    q: usize,
    k: usize,
    w: Weight,
}

#[derive(Serialize)]
struct OutRecord {
    l: usize,
    h: usize,
    q: usize,
    k: usize,
    w: f64,
}

impl AttentionDump {
    /// Wraps constructed maps, one per `(layer, head)` in row-major order.
    pub fn from_maps(seq: &TokenSequence, n_layers: usize, n_heads: usize, maps: Vec<AttentionMap>) -> Result<Self> {
        if maps.len() != n_layers * n_heads {
            return Err(IngestError::Shape(format!("{} maps for {n_layers}×{n_heads} heads", maps.len())));
        }
        if let Some(m) = maps.iter().find(|m| m.size() != seq.len()) {
            return Err(IngestError::Shape(format!("map of size {} for a sequence of {}", m.size(), seq.len())));
        }
        let heads = maps
            .into_iter()
            .enumerate()
            .map(|(i, m)| DumpHead {
                layer: i / n_heads + 1,
                head: i % n_heads + 1,
                rows: HeadRows::Map(m),
            })
            .collect();
        let mut dump = AttentionDump {
            n_layers,
            n_heads,
            n: seq.len(),
            c: seq.vocabulary_size(),
            tokens: seq.tokens().to_vec(),
            heads,
            flagged_rows: Vec::new(),
        };
        dump.flag_rows();
        Ok(dump)
    }

    pub fn heads(&self) -> &[DumpHead] {
        &self.heads
    }

    fn flag_rows(&mut self) {
        let mut flagged = Vec::new();
        for h in &self.heads {
            let bad: Vec<usize> = (0..self.n)
                .into_par_iter()
                .filter(|&q| {
                    let s: f64 = h.row(q).iter().map(|e| e.1).sum();
                    (s - 1.0).abs() > DUMP_ROW_TOLERANCE
                })
                .collect();
            flagged.extend(bad.into_iter().map(|q| (h.layer, h.head, q + 1)));
        }
        self.flagged_rows = flagged;
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (hline, header) = lines.next().ok_or(IngestError::Empty)?;
        let header: DumpHeader = serde_json::from_str(&header?).map_err(|e| IngestError::Parse {
            line: hline + 1,
            message: e.to_string(),
        })?;
        let n = header.n;
        let tokens = match header.tokens {
            Some(t) if t.len() == n => t,
            _ => return Err(IngestError::MissingTokens { n }),
        };
        if let Some(&t) = tokens.iter().find(|&&t| t == 0 || t > header.c) {
            return Err(IngestError::Parse {
                line: hline + 1,
                message: format!("token {t} outside 1..={}", header.c),
            });
        }
        let tokens: Vec<usize> = tokens.into_iter().map(|t| t - 1).collect();
        let (nl, nh) = (header.n_layers, header.n_heads);
        let mut per_head: Vec<Vec<(u32, u32, f64)>> = vec![Vec::new(); nl * nh];
        for (i, line) in lines {
            let line = line?;
            let err = |message: String| IngestError::Parse { line: i + 1, message };
            let rec: RawRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let w = match rec.w {
                Weight::Number(w) => w,
                Weight::Text(s) => s.trim().parse::<f64>().map_err(|e| err(format!("weight '{s}': {e}")))?,
            };
            if rec.l == 0 || rec.l > nl || rec.h == 0 || rec.h > nh {
                return Err(err(format!("layer/head ({}, {}) outside {nl}×{nh}", rec.l, rec.h)));
            }
            if rec.q == 0 || rec.q > n || rec.k == 0 || rec.k > n {
                return Err(err(format!("position ({}, {}) outside 1..={n}", rec.q, rec.k)));
            }
            if rec.k > rec.q {
                return Err(err(format!("key {} after query {}", rec.k, rec.q)));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(err(format!("weight {w} is not a non-negative number")));
            }
            per_head[(rec.l - 1) * nh + rec.h - 1].push(((rec.q - 1) as u32, (rec.k - 1) as u32, w));
        }
        let heads = per_head
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.sort_by_key(|e| (e.0, e.1));
                DumpHead {
                    layer: i / nh + 1,
                    head: i % nh + 1,
                    rows: HeadRows::Records(r),
                }
            })
            .collect();
        let mut dump = AttentionDump {
            n_layers: nl,
            n_heads: nh,
            n,
            c: header.c,
            tokens,
            heads,
            flagged_rows: Vec::new(),
        };
        dump.flag_rows();
        Ok(dump)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let header = DumpHeader {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n: self.n,
            c: self.c,
            tokens: Some(self.tokens.iter().map(|t| t + 1).collect()),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for h in &self.heads {
            for q in 0..self.n {
                for (k, weight) in h.row(q) {
                    let rec = OutRecord {
                        l: h.layer,
                        h: h.head,
                        q: q + 1,
                        k: k + 1,
                        w: weight,
                    };
                    serde_json::to_writer(&mut w, &rec)?;
                    writeln!(w)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Same header and identical stored weights.
    pub fn same_as(&self, other: &AttentionDump) -> bool {
        self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.n == other.n
            && self.c == other.c
            && self.tokens == other.tokens
            && self.heads.len() == other.heads.len()
            && self
                .heads
                .iter()
                .zip(&other.heads)
                .all(|(a, b)| a.layer == b.layer && a.head == b.head && (0..self.n).into_par_iter().all(|q| a.row(q) == b.row(q)))
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_dump(path: &Path) -> Result<AttentionDump> {
    let f = File::open(path)?;
    if is_gz(path) {
        AttentionDump::read(BufReader::new(GzDecoder::new(f)))
    } else {
        AttentionDump::read(BufReader::new(f))
    }
}

pub fn write_dump(dump: &AttentionDump, path: &Path) -> Result<()> {
    let f = File::create(path)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(f, Compression::default());
        dump.write(&mut enc)?;
        enc.finish()?;
        Ok(())
    } else {
        dump.write(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    T,
    A,
    B,
    Other,
}

/// Precedence T (key at position 1) > A (same token) > B (graph neighbor).
pub fn label(tokens: &[usize], g: &Graph, query: usize, key: usize) -> Label {
    if key == 0 {
        Label::T
    } else if tokens[key] == tokens[query] {
        Label::A
    } else if g.is_edge(tokens[query], tokens[key]) {
        Label::B
    } else {
        Label::Other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadFractions {
    pub layer: usize,
    pub head: usize,
    pub frac_a: f64,
    pub frac_b: f64,
    pub frac_t: f64,
    pub frac_other: f64,
    pub total_weight: f64,
}

impl HeadFractions {
    fn from_mass(layer: usize, head: usize, m: [f64; 4]) -> Self {
        let total: f64 = m.iter().sum();
        let f = |x: f64| if total > 0.0 { x / total } else { 0.0 };
        HeadFractions {
            layer,
            head,
            frac_t: f(m[0]),
            frac_a: f(m[1]),
            frac_b: f(m[2]),
            frac_other: f(m[3]),
            total_weight: total,
        }
    }

    pub fn sum(&self) -> f64 {
        self.frac_a + self.frac_b + self.frac_t + self.frac_other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub policy: String,
    pub heads: Vec<HeadFractions>,
    /// Pooled over every head, i.e. the total-weight-weighted mean.
    pub global: HeadFractions,
}

/// Labels every weight and reports per-head mass fractions. Row sums are
/// formed in parallel and added in query order, so results do not depend on
/// the thread count.
pub fn classify(dump: &AttentionDump, g: &Graph) -> Result<ClassificationReport> {
    if let Some(&t) = dump.tokens.iter().find(|&&t| t >= g.vertex_count()) {
        return Err(IngestError::Vocabulary {
            token: t + 1,
            c: g.vertex_count(),
        });
    }
    let mut heads = Vec::with_capacity(dump.heads.len());
    let mut pooled = [0.0f64; 4];
    for h in &dump.heads {
        let rows: Vec<[f64; 4]> = (0..dump.n)
            .into_par_iter()
            .map(|q| {
                let mut m = [0.0f64; 4];
                for (k, w) in h.row(q) {
                    let i = match label(&dump.tokens, g, q, k) {
                        Label::T => 0,
                        Label::A => 1,
                        Label::B => 2,
                        Label::Other => 3,
                    };
                    m[i] += w;
                }
                m
            })
            .collect();
        let mut mass = [0.0f64; 4];
        for r in &rows {
            for i in 0..4 {
                mass[i] += r[i];
            }
        }
        for i in 0..4 {
            pooled[i] += mass[i];
        }
        heads.push(HeadFractions::from_mass(h.layer, h.head, mass));
    }
    Ok(ClassificationReport {
        policy: PRECEDENCE.to_string(),
        heads,
        global: HeadFractions::from_mass(0, 0, pooled),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown format '{s}' (csv or json)")),
        }
    }
}

/// CSV `layer,head,frac_A,frac_B,frac_T,frac_other` with a final `all,all`
/// row holding the pooled fractions, or the report as JSON.
pub fn emit_report<W: Write>(report: &ClassificationReport, format: ReportFormat, w: W) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let mut w = w;
            serde_json::to_writer_pretty(&mut w, report)?;
            writeln!(w)?;
        }
        ReportFormat::Csv => {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["layer", "head", "frac_A", "frac_B", "frac_T", "frac_other"])?;
            for h in &report.heads {
                out.serialize((h.layer, h.head, h.frac_a, h.frac_b, h.frac_t, h.frac_other))?;
            }
            let g = &report.global;
            out.serialize(("all", "all", g.frac_a, g.frac_b, g.frac_t, g.frac_other))?;
            out.flush()?;
        }
    }
    Ok(())
}

pub fn load_report_json<R: Read>(r: R) -> Result<ClassificationReport> {
    Ok(serde_json::from_reader(r)?)
}

/// Reads the CSV form back; per-head totals are not part of the CSV and
/// come back as zero.
pub fn load_report_csv<R: Read>(r: R) -> Result<ClassificationReport> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut heads = Vec::new();
    let mut global = None;
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| IngestError::Shape(format!("bad report row {rec:?}")))
        };
        let h = HeadFractions {
            layer: rec.get(0).and_then(|s| s.parse().ok()).unwrap_or(0),
            head: rec.get(1).and_then(|s| s.parse().ok()).unwrap_or(0),
            frac_a: num(2)?,
            frac_b: num(3)?,
            frac_t: num(4)?,
            frac_other: num(5)?,
            total_weight: 0.0,
        };
        if rec.get(0) == Some("all") {
            global = Some(h);
        } else {
            heads.push(h);
        }
    }
    Ok(ClassificationReport {
        policy: PRECEDENCE.to_string(),
        heads,
        global: global.ok_or_else(|| IngestError::Shape("report has no summary row".into()))?,
    })
}
