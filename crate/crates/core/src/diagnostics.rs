//! Measurements of context-wise and layer-wise convergence.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgp::{FrequencyTable, TokenSequence};
use crate::forward::{read_embeddings_csv, write_embeddings_csv, ForwardError};
use crate::graph::{EigenOrder, Graph, GraphError, ReweightedGraph, SpectralBasis};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("low-frequency mass vanished (‖Z D^1/2 X‖ = {0:e})")]
    Degenerate(f64),
    #[error("basis columns are not orthogonal to D^1/2 1 (max |U^T D^1/2 1| = {0:e})")]
    NotOrthogonal(f64),
    #[error("token {token} does not occur in positions {start}..={end}")]
    MissingToken { token: usize, start: usize, end: usize },
    #[error("window {start}..={end} outside 1..={n}")]
    Window { start: usize, end: usize, n: usize },
    #[error("need at least one principal component, got q = {0}")]
    NoComponents(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ExtractionRule {
    /// Row at the last occurrence of each token.
    LastOccurrence,
    /// Mean over occurrences within 1-based positions `start..=end`.
    WindowMean { start: usize, end: usize },
}

/// Latent matrix `Z` (`d × c`) read off one depth of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSnapshot {
    pub z: DMatrix<f64>,
    pub depth: usize,
    pub rule: ExtractionRule,
}

impl LatentSnapshot {
    pub fn extract(values: &DMatrix<f64>, seq: &TokenSequence, depth: usize, rule: ExtractionRule) -> Result<Self> {
        let n = seq.len();
        if values.nrows() != n {
            return Err(DiagnosticsError::Shape(format!("{} rows for {n} positions", values.nrows())));
        }
        let c = seq.vocabulary_size();
        let d = values.ncols();
        let mut z = DMatrix::zeros(d, c);
        match rule {
            ExtractionRule::LastOccurrence => {
                let freq = FrequencyTable::new(seq);
                for x in 0..c {
                    let k = freq.last_occurrence(x).ok_or(DiagnosticsError::MissingToken {
                        token: x + 1,
                        start: 1,
                        end: n,
                    })?;
                    z.set_column(x, &values.row(k).transpose());
                }
            }
            ExtractionRule::WindowMean { start, end } => {
                if start == 0 || start > end || end > n {
                    return Err(DiagnosticsError::Window { start, end, n });
                }
                let mut counts = vec![0usize; c];
                for k in start - 1..end {
                    let x = seq.token(k);
                    counts[x] += 1;
                    let mut col = z.column_mut(x);
                    col += values.row(k).transpose();
                }
                for (x, &m) in counts.iter().enumerate() {
                    if m == 0 {
                        return Err(DiagnosticsError::MissingToken { token: x + 1, start, end });
                    }
                    let mut col = z.column_mut(x);
                    col /= m as f64;
                }
            }
        }
        Ok(LatentSnapshot { z, depth, rule })
    }

    /// `N = max_x ‖z_x‖`.
    pub fn max_norm(&self) -> f64 {
        self.z.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        Ok(write_embeddings_csv(&self.z, w)?)
    }

    pub fn read_csv<R: Read>(r: R, depth: usize, rule: ExtractionRule) -> Result<Self> {
        Ok(LatentSnapshot {
            z: read_embeddings_csv(r)?,
            depth,
            rule,
        })
    }
}

pub const DECADES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessReport {
    /// `max_k √k ‖v_k − z_{x_k}‖`.
    pub gamma: f64,
    /// 1-based position attaining `gamma`.
    pub worst_position: usize,
    /// Mean error over `k ∈ [n/2^{j+1}, n/2^j]`, `j = 0..6`.
    pub decade_means: Vec<f64>,
}

impl GoodnessReport {
    /// Mean error on the last half over the mean on `[n/8, n/4]`.
    pub fn decay_ratio(&self) -> f64 {
        self.decade_means[0] / self.decade_means[2]
    }
}

/// Errors `‖v_k − z_{x_k}‖` for every position.
pub fn position_errors(v: &DMatrix<f64>, z: &DMatrix<f64>, seq: &TokenSequence) -> Result<Vec<f64>> {
    if v.nrows() != seq.len() || v.ncols() != z.nrows() || z.ncols() != seq.vocabulary_size() {
        return Err(DiagnosticsError::Shape(format!(
            "V is {}×{}, Z is {}×{}, sequence {}×{}",
            v.nrows(),
            v.ncols(),
            z.nrows(),
            z.ncols(),
            seq.len(),
            seq.vocabulary_size()
        )));
    }
    Ok((0..seq.len())
        .map(|k| (v.row(k).transpose() - z.column(seq.token(k))).norm())
        .collect())
}

pub fn goodness(v: &DMatrix<f64>, z: &DMatrix<f64>, seq: &TokenSequence) -> Result<GoodnessReport> {
    Ok(goodness_from_errors(&position_errors(v, z, seq)?))
}

pub fn goodness_from_errors(errors: &[f64]) -> GoodnessReport {
    let n = errors.len();
    let (mut gamma, mut worst) = (0.0f64, 0usize);
    for (i, e) in errors.iter().enumerate() {
        let g = ((i + 1) as f64).sqrt() * e;
        if g > gamma {
            gamma = g;
            worst = i + 1;
        }
    }
    let decade_means = (0..DECADES)
        .map(|j| {
            let lo = (n >> (j + 1)).max(1);
            let hi = n >> j;
            if hi < lo {
                return f64::NAN;
            }
            errors[lo - 1..hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    GoodnessReport {
        gamma,
        worst_position: worst,
        decade_means,
    }
}

fn sqrt_degree_weighted(z: &DMatrix<f64>, rg: &ReweightedGraph) -> Result<DMatrix<f64>> {
    if z.ncols() != rg.vertex_count() {
        return Err(DiagnosticsError::Shape(format!(
            "latent has {} columns, graph has {} vertices",
            z.ncols(),
            rg.vertex_count()
        )));
    }
    Ok(z * DMatrix::from_diagonal(rg.sqrt_degrees()))
}

/// `r = ‖Z D^{1/2} Y‖ / ‖Z D^{1/2} X‖`.
pub fn subspace_ratio(z: &DMatrix<f64>, rg: &ReweightedGraph, basis: &SpectralBasis) -> Result<f64> {
    let (low, high) = subspace_norms(z, rg, basis)?;
    if low < 1e-12 {
        return Err(DiagnosticsError::Degenerate(low));
    }
    Ok(high / low)
}

/// `(‖Z D^{1/2} X‖, ‖Z D^{1/2} Y‖)`.
pub fn subspace_norms(z: &DMatrix<f64>, rg: &ReweightedGraph, basis: &SpectralBasis) -> Result<(f64, f64)> {
    let zd = sqrt_degree_weighted(z, rg)?;
    Ok(((&zd * basis.low()).norm(), (&zd * basis.high()).norm()))
}

/// One latent step measured against a basis sorted by the layer operator's
/// eigenvalue magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionStep {
    pub ratio_before: f64,
    pub ratio_after: f64,
    /// `‖Z'D^{1/2}X‖ / ‖Z D^{1/2}X‖`.
    pub low_gain: f64,
    /// `‖Z'D^{1/2}Y‖ / ‖Z D^{1/2}Y‖`.
    pub high_gain: f64,
    /// `|μ_q| / |μ_{q+1}|`.
    pub spectral_gap: f64,
}

impl ContractionStep {
    /// `low_gain − gap·high_gain`; the gap inequality says this is ≥ 0.
    pub fn gap_slack(&self) -> f64 {
        self.low_gain - self.spectral_gap * self.high_gain
    }
}

pub fn contraction_step(
    z: &DMatrix<f64>,
    z_next: &DMatrix<f64>,
    rg: &ReweightedGraph,
    basis: &SpectralBasis,
    rho_a: f64,
    rho_b: f64,
) -> Result<ContractionStep> {
    let (x0, y0) = subspace_norms(z, rg, basis)?;
    let (x1, y1) = subspace_norms(z_next, rg, basis)?;
    if x0 < 1e-12 || x1 < 1e-12 {
        return Err(DiagnosticsError::Degenerate(x0.min(x1)));
    }
    Ok(ContractionStep {
        ratio_before: y0 / x0,
        ratio_after: y1 / x1,
        low_gain: x1 / x0,
        high_gain: if y0 > 0.0 { y1 / y0 } else { 0.0 },
        spectral_gap: 1.0 / basis.decay_factor(rho_a, rho_b)?,
    })
}

/// Applies the scalar latent update to one coordinate `z` (length `c`) and
/// returns `‖Uᵀ D^{1/2} z' − Uᵀ (k_A I + k_B M) D^{1/2} z‖`.
pub fn projection_evolution_check(
    z: &DVector<f64>,
    k: [f64; 4],
    v1: f64,
    rg: &ReweightedGraph,
    u: &DMatrix<f64>,
) -> Result<f64> {
    let c = rg.vertex_count();
    if z.len() != c || u.nrows() != c {
        return Err(DiagnosticsError::Shape(format!("z has {}, U has {} rows, c = {c}", z.len(), u.nrows())));
    }
    let sd = rg.sqrt_degrees();
    let leak = (u.transpose() * sd).amax() / sd.norm();
    if leak > 1e-10 {
        return Err(DiagnosticsError::NotOrthogonal(leak));
    }
    let transition = rg.transition();
    let shift = k[2] * rg.pi().dot(z) + k[3] * v1;
    let z_next = z * k[0] + (&transition * z) * k[1] + DVector::from_element(c, shift);
    let lhs = u.transpose() * sd.component_mul(&z_next);
    let op = DMatrix::identity(c, c) * k[0] + rg.operator() * k[1];
    let rhs = u.transpose() * (op * sd.component_mul(z));
    Ok((lhs - rhs).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    Brute,
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub mode: EnergyMode,
    pub total: f64,
    /// `e_i`, in basis order (spectral mode only).
    pub components: Vec<f64>,
    /// Totals and components after rescaling `Z` to unit Frobenius norm.
    pub normalized_total: f64,
    pub normalized_components: Vec<f64>,
}

impl EnergyReport {
    /// `(e_2 + … + e_q) / E`.
    pub fn low_share(&self, q: usize) -> f64 {
        if self.total == 0.0 {
            return 0.0;
        }
        self.components[1..q].iter().sum::<f64>() / self.total
    }
}

/// `Σ_{x,y} w_xy ‖z_x − z_y‖²` over ordered pairs.
pub fn energy_brute(z: &DMatrix<f64>, rg: &ReweightedGraph) -> Result<f64> {
    let c = rg.vertex_count();
    if z.ncols() != c {
        return Err(DiagnosticsError::Shape(format!("latent has {} columns, c = {c}", z.ncols())));
    }
    let w = rg.weights();
    let mut total = 0.0;
    for x in 0..c {
        for y in 0..c {
            if w[(x, y)] != 0.0 {
                total += w[(x, y)] * (z.column(x) - z.column(y)).norm_squared();
            }
        }
    }
    Ok(total)
}

/// `e_i = 2(1 − λ_i) ‖Z D^{1/2} u_i‖²`.
pub fn energy_components(z: &DMatrix<f64>, rg: &ReweightedGraph, basis: &SpectralBasis) -> Result<Vec<f64>> {
    let proj = sqrt_degree_weighted(z, rg)? * basis.vectors();
    Ok(basis
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(i, &l)| 2.0 * (1.0 - l) * proj.column(i).norm_squared())
        .collect())
}

pub fn energy(z: &DMatrix<f64>, rg: &ReweightedGraph, basis: &SpectralBasis, mode: EnergyMode) -> Result<EnergyReport> {
    let scale = z.norm_squared();
    let inv = if scale > 0.0 { 1.0 / scale } else { 0.0 };
    let (total, components) = match mode {
        EnergyMode::Brute => (energy_brute(z, rg)?, Vec::new()),
        EnergyMode::Spectral => {
            let e = energy_components(z, rg, basis)?;
            (e.iter().sum(), e)
        }
    };
    Ok(EnergyReport {
        mode,
        total,
        normalized_total: total * inv,
        normalized_components: components.iter().map(|e| e * inv).collect(),
        components,
    })
}

/// Principal angles in degrees, ascending, between the column spans of `a`
/// and `b`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = orthonormal_columns(a);
    let qb = orthonormal_columns(b);
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = (qa.transpose() * qb).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s.into_iter().map(|v| v.clamp(-1.0, 1.0).acos().to_degrees()).collect()
}

/// Orthonormal basis of the column span, dropping directions below 1e-10
/// of the largest singular value.
pub fn orthonormal_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return a.clone();
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > 1e-10 * smax)
        .collect();
    DMatrix::from_fn(a.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// How the word cloud is prepared before PCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaFrame {
    /// Subtract the mean column, compare with the raw eigenvectors.
    #[default]
    Centered,
    /// Work with `Z D^{1/2}` and remove its component along `u_1`.
    DegreeCorrected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaAlignment {
    /// Degrees, ascending, one per available component.
    pub angles: Vec<f64>,
    /// Number of principal components actually available.
    pub rank: usize,
    /// Unit token-space principal directions (`c × rank`).
    pub directions: DMatrix<f64>,
    /// Token coordinates on the principal axes (`c × rank`).
    pub scores: DMatrix<f64>,
    /// `u_2..u_q` as token coordinates (`c × (q−1)`).
    pub eigen_coords: DMatrix<f64>,
    /// Unit directions rotated onto `eigen_coords` by orthogonal Procrustes.
    pub aligned: DMatrix<f64>,
    /// Angles (degrees) between the token-space direction removed before PCA
    /// and `𝟙` and `u_1`.
    pub removed_to_ones: f64,
    pub removed_to_leading: f64,
}

impl PcaAlignment {
    pub fn max_angle(&self) -> f64 {
        self.angles.iter().copied().fold(0.0, f64::max)
    }
}

pub fn pca_align(z: &DMatrix<f64>, rg: &ReweightedGraph, basis: &SpectralBasis, frame: PcaFrame) -> Result<PcaAlignment> {
    let c = rg.vertex_count();
    let q = basis.q();
    if q < 2 {
        return Err(DiagnosticsError::NoComponents(q));
    }
    let m = q - 1;
    let lead = basis.leading();
    let ones = DVector::from_element(c, 1.0 / (c as f64).sqrt());
    let (cloud, removed) = match frame {
        PcaFrame::Centered => {
            if z.ncols() != c {
                return Err(DiagnosticsError::Shape(format!("latent has {} columns, c = {c}", z.ncols())));
            }
            let mean = z.column_mean();
            let mut zc = z.clone();
            for mut col in zc.column_iter_mut() {
                col -= &mean;
            }
            (zc, ones.clone())
        }
        PcaFrame::DegreeCorrected => {
            let zd = sqrt_degree_weighted(z, rg)?;
            let along = &zd * &lead;
            (zd - along * lead.transpose(), lead.clone())
        }
    };
    let svd = cloud.clone().svd(false, true);
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = svd.singular_values.max();
    let rank = order
        .iter()
        .take(m)
        .filter(|&&i| smax > 0.0 && svd.singular_values[i] > 1e-10 * smax)
        .count();
    let directions = DMatrix::from_fn(c, rank, |x, j| vt[(order[j], x)]);
    let scores = DMatrix::from_fn(c, rank, |x, j| svd.singular_values[order[j]] * vt[(order[j], x)]);
    let eigen_coords = basis.low();
    let angles = principal_angles(&directions, &eigen_coords);
    let aligned = procrustes(&directions, &eigen_coords.columns(0, rank).into_owned());
    let angle = |a: &DVector<f64>, b: &DVector<f64>| a.dot(b).abs().min(1.0).acos().to_degrees();
    Ok(PcaAlignment {
        angles,
        rank,
        directions,
        scores,
        eigen_coords,
        aligned,
        removed_to_ones: angle(&removed, &ones),
        removed_to_leading: angle(&removed, &lead),
    })
}

/// `S R` with `R = argmin_{RᵀR = I} ‖S R − E‖_F`.
pub fn procrustes(s: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    if s.ncols() == 0 {
        return s.clone();
    }
    let svd = (s.transpose() * e).svd(true, true);
    let r = svd.u.expect("U") * svd.v_t.expect("Vᵀ");
    s * r
}

/// Writes `token,<a>,<b>,...` for the columns of a `c × m` coordinate table.
pub fn write_coordinates_csv<W: Write>(coords: &DMatrix<f64>, prefix: &str, first_index: usize, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["token".to_string()];
    header.extend((0..coords.ncols()).map(|j| format!("{prefix}{}", j + first_index)));
    out.write_record(&header)?;
    for x in 0..coords.nrows() {
        let mut rec = vec![(x + 1).to_string()];
        rec.extend(coords.row(x).iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_coordinates_csv<R: Read>(r: R) -> csv::Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows: Vec<Vec<f64>> = rdr.deserialize::<Vec<f64>>().collect::<csv::Result<_>>()?;
    let m = rows.first().map_or(0, |r| r.len().saturating_sub(1));
    Ok(DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j + 1]))
}

/// Corner and center vertex sets: minimum degree and minimum eccentricity.
pub fn periphery_and_center(g: &Graph) -> (Vec<usize>, Vec<usize>) {
    let deg = g.degrees();
    let min_deg = deg.min();
    let corners = (0..g.vertex_count()).filter(|&x| deg[x] == min_deg).collect();
    let ecc = g.eccentricities();
    let min_ecc = ecc.iter().copied().min().unwrap_or(0);
    let centers = (0..g.vertex_count()).filter(|&x| ecc[x] == min_ecc).collect();
    (corners, centers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeripheralReport {
    /// Mean corner radius over mean center radius in the `(u_2, u_3)` plane
    /// of `M`.
    pub ratio_reweighted: f64,
    /// The same for the eigenvectors of the original adjacency.
    pub ratio_original: f64,
    pub corners: Vec<usize>,
    pub centers: Vec<usize>,
}

/// Radius of each vertex in the `(u_2, u_3)` embedding.
pub fn spectral_radii(basis: &SpectralBasis) -> Vec<f64> {
    let v = basis.vectors();
    (0..basis.dimension()).map(|x| v[(x, 1)].hypot(v[(x, 2)])).collect()
}

pub fn peripheral_compression(rg: &ReweightedGraph) -> Result<PeripheralReport> {
    let g = rg.graph();
    let reweighted = SpectralBasis::new(rg, 3, EigenOrder::Descending)?;
    let original = SpectralBasis::of_symmetric(g.adjacency(), 3, EigenOrder::Descending)?;
    let (corners, centers) = periphery_and_center(g);
    let ratio = |b: &SpectralBasis| {
        let r = spectral_radii(b);
        let mean = |s: &[usize]| s.iter().map(|&x| r[x]).sum::<f64>() / s.len() as f64;
        mean(&corners) / mean(&centers)
    };
    Ok(PeripheralReport {
        ratio_reweighted: ratio(&reweighted),
        ratio_original: ratio(&original),
        corners,
        centers,
    })
}

/// Largest principal angle per snapshot against the clean basis.
pub fn noise_robustness(clean: &SpectralBasis, rg: &ReweightedGraph, snapshots: &[LatentSnapshot], frame: PcaFrame) -> Result<Vec<f64>> {
    snapshots
        .iter()
        .map(|s| pca_align(&s.z, rg, clean, frame).map(|a| a.max_angle()))
        .collect()
}

/// `true` if `curve[ℓ] ≤ curve[ℓ−1] + tol` for every `ℓ > from`.
pub fn non_increasing_after(curve: &[f64], from: usize, tol: f64) -> bool {
    curve.windows(2).skip(from).all(|w| w[1] <= w[0] + tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub depth: usize,
    pub subspace_ratio: Option<f64>,
    pub low_norm: f64,
    pub high_norm: f64,
    pub energy_total: f64,
    pub normalized_energy: f64,
    pub low_energy_share: f64,
    pub pca_angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub goodness: GoodnessReport,
    pub layers: Vec<LayerDiagnostics>,
    pub decay_factor: f64,
}

/// Per-depth summary of a sequence of latent snapshots.
pub fn layer_diagnostics(snapshots: &[LatentSnapshot], rg: &ReweightedGraph, basis: &SpectralBasis, frame: PcaFrame) -> Result<Vec<LayerDiagnostics>> {
    snapshots
        .iter()
        .map(|s| {
            let (low, high) = subspace_norms(&s.z, rg, basis)?;
            let e = energy(&s.z, rg, basis, EnergyMode::Spectral)?;
            Ok(LayerDiagnostics {
                depth: s.depth,
                subspace_ratio: (low >= 1e-12).then(|| high / low),
                low_norm: low,
                high_norm: high,
                energy_total: e.total,
                normalized_energy: e.normalized_total,
                low_energy_share: e.low_share(basis.q()),
                pca_angles: pca_align(&s.z, rg, basis, frame)?.angles,
            })
        })
        .collect()
}

/// `layer,component,normalized_energy` with 1-based components.
pub fn write_energy_csv<W: Write>(per_layer: &[(usize, EnergyReport)], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "component", "normalized_energy"])?;
    for (layer, rep) in per_layer {
        for (i, e) in rep.normalized_components.iter().enumerate() {
            out.serialize((layer, i + 1, e))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_energy_csv<R: Read>(r: R) -> csv::Result<Vec<(usize, usize, f64)>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::StationaryMode;

    fn k2() -> ReweightedGraph {
        ReweightedGraph::from_graph(Graph::complete(2).unwrap(), StationaryMode::Walk).unwrap()
    }

    fn grid() -> ReweightedGraph {
        ReweightedGraph::from_graph(Graph::grid(4, 4).unwrap(), StationaryMode::Walk).unwrap()
    }

    #[test]
    fn goodness_examples() {
        let seq = TokenSequence::from_tokens(2, (0..64).map(|i| i % 2).collect()).unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        let v = DMatrix::from_fn(64, 2, |k, i| z[(i, seq.token(k))]);
        assert_eq!(goodness(&v, &z, &seq).unwrap().gamma, 0.0);
        let v2 = DMatrix::from_fn(64, 2, |k, i| z[(i, seq.token(k))] + if i == 0 { 1.0 / ((k + 1) as f64).sqrt() } else { 0.0 });
        let r = goodness(&v2, &z, &seq).unwrap();
        assert!((r.gamma - 1.0).abs() < 1e-12);
        assert_eq!(r.decade_means.len(), DECADES);
    }

    #[test]
    fn energy_k2_example() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let rg = k2();
        assert!((energy_brute(&z, &rg).unwrap() - 0.5).abs() < 1e-15);
        let basis = SpectralBasis::new(&rg, 1, EigenOrder::Descending).unwrap();
        let e = energy(&z, &rg, &basis, EnergyMode::Spectral).unwrap();
        assert!((e.total - 0.5).abs() < 1e-14);
        assert!(e.components[0].abs() < 1e-15);
    }

    #[test]
    fn constant_columns_have_no_energy() {
        let rg = grid();
        let basis = SpectralBasis::new(&rg, 3, EigenOrder::Descending).unwrap();
        let z = DMatrix::from_fn(3, 16, |i, _| i as f64 + 1.0);
        let e = energy(&z, &rg, &basis, EnergyMode::Spectral).unwrap();
        assert!(e.total.abs() < 1e-12);
        assert!(e.components.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(energy_brute(&z, &rg).unwrap(), 0.0);
    }

    #[test]
    fn subspace_ratio_examples() {
        let rg = grid();
        let basis = SpectralBasis::new(&rg, 3, EigenOrder::Descending).unwrap();
        // rows in span{u_2, u_3} after the D^{1/2} weighting
        let inv = rg.sqrt_degrees().map(|s| 1.0 / s);
        let coeff = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let z = (coeff * basis.low().transpose()) * DMatrix::from_diagonal(&inv);
        assert!(subspace_ratio(&z, &rg, &basis).unwrap() < 1e-12);
        let flat = DMatrix::from_fn(2, 16, |_, x| inv[x]);
        assert!(matches!(subspace_ratio(&flat, &rg, &basis), Err(DiagnosticsError::Degenerate(_))));
    }

    #[test]
    fn projection_check_examples() {
        let rg = grid();
        let basis = SpectralBasis::new(&rg, 3, EigenOrder::Descending).unwrap();
        let u = basis.vectors().columns(1, 15).into_owned();
        let z = DVector::from_fn(16, |i, _| (i as f64 * 0.7).sin());
        assert!(projection_evolution_check(&z, [0.3, 0.7, 0.0, 0.0], 0.0, &rg, &u).unwrap() < 1e-12);
        let sd = rg.sqrt_degrees();
        let c = 16;
        let shift = rg.pi().dot(&z);
        let z_next = DVector::from_element(c, shift);
        assert!((u.transpose() * sd.component_mul(&z_next)).amax() < 1e-12);
        assert!(projection_evolution_check(&z, [0.0, 0.0, 1.0, 0.0], 0.0, &rg, &u).unwrap() < 1e-12);
        let bad = basis.vectors().columns(0, 2).into_owned();
        assert!(matches!(
            projection_evolution_check(&z, [0.0, 0.0, 1.0, 0.0], 0.0, &rg, &bad),
            Err(DiagnosticsError::NotOrthogonal(_))
        ));
    }

    #[test]
    fn pca_of_eigenvector_images_has_zero_angles() {
        let rg = grid();
        let basis = SpectralBasis::new(&rg, 3, EigenOrder::Descending).unwrap();
        let coeff = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.4, 2.0, 0.3, 0.3]);
        let z = coeff * basis.low().transpose();
        let a = pca_align(&z, &rg, &basis, PcaFrame::Centered).unwrap();
        assert_eq!(a.rank, 2);
        assert!(a.max_angle() < 1e-5, "{:?}", a.angles);
        assert!((&a.aligned - basis.low()).amax() < 1e-6);
        assert!(a.removed_to_ones.abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let rg = grid();
        let basis = SpectralBasis::new(&rg, 3, EigenOrder::Descending).unwrap();
        let z = DMatrix::from_fn(4, 16, |i, x| if i == 0 { basis.vectors()[(x, 1)] } else { 0.0 });
        let a = pca_align(&z, &rg, &basis, PcaFrame::Centered).unwrap();
        assert_eq!(a.rank, 1);
        assert_eq!(a.angles.len(), 1);
    }

    #[test]
    fn vertex_transitive_controls_have_equal_ratios() {
        for g in [Graph::ring(8).unwrap(), Graph::grid(2, 2).unwrap()] {
            let rg = ReweightedGraph::from_graph(g, StationaryMode::Walk).unwrap();
            let r = peripheral_compression(&rg).unwrap();
            assert!((r.ratio_reweighted - r.ratio_original).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_corners_and_centers() {
        let (corners, centers) = periphery_and_center(&Graph::grid(4, 4).unwrap());
        assert_eq!(corners, vec![0, 3, 12, 15]);
        assert_eq!(centers, vec![5, 6, 9, 10]);
    }

    #[test]
    fn window_snapshot_averages() {
        let seq = TokenSequence::from_tokens(2, vec![0, 1, 0, 1]).unwrap();
        let v = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 5.0]);
        let s = LatentSnapshot::extract(&v, &seq, 0, ExtractionRule::WindowMean { start: 1, end: 4 }).unwrap();
        assert_eq!(s.z, DMatrix::from_row_slice(1, 2, &[2.0, 3.5]));
        let s = LatentSnapshot::extract(&v, &seq, 0, ExtractionRule::LastOccurrence).unwrap();
        assert_eq!(s.z, DMatrix::from_row_slice(1, 2, &[3.0, 5.0]));
        assert!(LatentSnapshot::extract(&v, &seq, 0, ExtractionRule::WindowMean { start: 4, end: 4 }).is_err());
    }

    #[test]
    fn curve_monotonicity_helper() {
        assert!(non_increasing_after(&[10.0, 30.0, 20.0, 21.0, 5.0], 1, 2.0));
        assert!(!non_increasing_after(&[10.0, 30.0, 20.0, 23.0], 1, 2.0));
    }
}
