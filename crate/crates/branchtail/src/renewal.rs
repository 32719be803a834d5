//! The exponentially tilted one-step measures (eta_+, eta_-), their 2x2
//! matrix arrangement, exact matrix convolution on lattice grids, and the
//! two independent routes to the generation measures mu_n.
//!
//! Lattice grids store (span, offset, integer-indexed masses) so convolution
//! is an exact integer-shift operation; identity checks against tree
//! enumeration are tolerance-free up to float mass arithmetic.

use serde::Serialize;

use crate::emp::{ccdf, lcdf, pair_products};
use crate::error::{Error, Result};
use crate::law::BranchingLaw;
use crate::oracle;
use crate::rng::StreamRng;

const RHO_NORMALIZATION_TOL: f64 = 1e-9;
const SPAN_MATCH_TOL: f64 = 1e-12;
const LATTICE_FIT_TOL: f64 = 1e-9;
const SUPPORT_CAP: u64 = 1_000_000;

/// Finite nonnegative measure on an arithmetic progression
/// offset + span * index.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatticeMeasure {
    pub span: f64,
    pub offset: f64,
    pub min_index: i64,
    /// masses[i] sits at offset + span * (min_index + i); empty means the
    /// zero measure.
    pub masses: Vec<f64>,
}

/// Finite nonnegative measure on uniform bins (diagnostic use).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinnedMeasure {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum MeasureGrid {
    Lattice(LatticeMeasure),
    Binned(BinnedMeasure),
}

impl LatticeMeasure {
    pub fn zero(span: f64) -> Self {
        LatticeMeasure { span, offset: 0.0, min_index: 0, masses: Vec::new() }
    }

    pub fn dirac_at_zero(span: f64) -> Self {
        LatticeMeasure { span, offset: 0.0, min_index: 0, masses: vec![1.0] }
    }

    fn trimmed(mut self) -> Self {
        let lead = self.masses.iter().take_while(|&&m| m == 0.0).count();
        if lead == self.masses.len() {
            return LatticeMeasure::zero(self.span);
        }
        let trail = self.masses.iter().rev().take_while(|&&m| m == 0.0).count();
        self.masses.drain(..lead);
        self.masses.truncate(self.masses.len() - trail);
        self.min_index += lead as i64;
        self
    }
}

impl MeasureGrid {
    pub fn total_mass(&self) -> f64 {
        match self {
            MeasureGrid::Lattice(l) => l.masses.iter().sum(),
            MeasureGrid::Binned(b) => b.masses.iter().sum(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            MeasureGrid::Lattice(l) => l
                .masses
                .iter()
                .enumerate()
                .map(|(i, m)| m * (l.offset + l.span * (l.min_index + i as i64) as f64))
                .sum(),
            MeasureGrid::Binned(b) => b
                .masses
                .iter()
                .enumerate()
                .map(|(i, m)| m * 0.5 * (b.edges[i] + b.edges[i + 1]))
                .sum(),
        }
    }

    /// Support points paired with masses (bin centers for binned grids).
    pub fn points(&self) -> Vec<(f64, f64)> {
        match self {
            MeasureGrid::Lattice(l) => l
                .masses
                .iter()
                .enumerate()
                .map(|(i, &m)| (l.offset + l.span * (l.min_index + i as i64) as f64, m))
                .collect(),
            MeasureGrid::Binned(b) => b
                .masses
                .iter()
                .enumerate()
                .map(|(i, &m)| (0.5 * (b.edges[i] + b.edges[i + 1]), m))
                .collect(),
        }
    }
}

/// 2x2 matrix of measures [[pp, pm], [pm, pp]]; the arrangement is closed
/// under matrix convolution, so only the two distinct entries are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixMeasure {
    pub pp: MeasureGrid,
    pub pm: MeasureGrid,
}

impl MatrixMeasure {
    pub fn identity_like(span: f64) -> Self {
        MatrixMeasure {
            pp: MeasureGrid::Lattice(LatticeMeasure::dirac_at_zero(span)),
            pm: MeasureGrid::Lattice(LatticeMeasure::zero(span)),
        }
    }

    pub fn from_etas(eta_plus: MeasureGrid, eta_minus: MeasureGrid) -> Self {
        MatrixMeasure { pp: eta_plus, pm: eta_minus }
    }

    /// Total-mass matrix [[p, q], [q, p]].
    pub fn mass_matrix(&self) -> [[f64; 2]; 2] {
        let p = self.pp.total_mass();
        let q = self.pm.total_mass();
        [[p, q], [q, p]]
    }
}

// ---------------------------------------------------------------------------
// Lattice detection
// ---------------------------------------------------------------------------

/// Largest g > 0 with every value in g * Z (within a relative tolerance),
/// or None when the values are incommensurable or all zero.
pub fn lattice_span(values: &[f64]) -> Option<f64> {
    let mut g: f64 = 0.0;
    for &v in values {
        let a = v.abs();
        if a < 1e-12 {
            continue;
        }
        g = if g == 0.0 { a } else { float_gcd(g, a) };
    }
    if g < 1e-9 {
        return None;
    }
    for &v in values {
        let ratio = v / g;
        if (ratio - ratio.round()).abs() > LATTICE_FIT_TOL * ratio.abs().max(1.0) {
            return None;
        }
    }
    Some(g)
}

fn float_gcd(mut a: f64, mut b: f64) -> f64 {
    while b > 1e-10 {
        let r = a - (a / b).round() * b;
        a = b;
        b = r.abs();
    }
    a
}

/// The lattice span of log|C| over the law's weight atoms, when they are
/// finite-discrete and commensurable.
pub fn law_lattice_span(law: &BranchingLaw) -> Result<f64> {
    let atoms = law.weight_intensity_atoms().map_err(|_| {
        Error::NotLattice("law has continuous weight support".into())
    })?;
    let logs: Vec<f64> = atoms
        .iter()
        .filter(|(c, _)| c.abs() > 0.0)
        .map(|(c, _)| c.abs().ln())
        .collect();
    if logs.is_empty() {
        return Err(Error::NotLattice("all weights are zero".into()));
    }
    match lattice_span(&logs) {
        Some(g) => Ok(g),
        None => {
            if logs.iter().all(|&v| v.abs() < 1e-12) {
                // |C| = 1 only: every span fits; pick log 2 by convention
                Ok(std::f64::consts::LN_2)
            } else {
                Err(Error::NotLattice("log-weights are incommensurable".into()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// eta grids
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GridSpec {
    pub bins: usize,
    pub count: u64,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { bins: 2048, count: 1_000_000, seed: 0 }
    }
}

/// The measures eta_+/- at tilt alpha: mass |c|^alpha * E[#{j : C_j = c}]
/// at u = log|c|, split by sign(c). Finite lattice laws produce exact
/// lattice grids; continuous (or incommensurable) laws produce Monte Carlo
/// binned grids.
pub fn eta_grids(law: &BranchingLaw, alpha: f64, spec: &GridSpec) -> Result<(MeasureGrid, MeasureGrid)> {
    let rho = law
        .closed_rho(alpha)
        .expect("all v1 law families have closed rho");
    if (rho - 1.0).abs() > RHO_NORMALIZATION_TOL {
        return Err(Error::NotNormalizedAtAlpha { rho });
    }
    if law.is_finite_discrete() {
        if let Ok(span) = law_lattice_span(law) {
            return eta_lattice(law, alpha, span);
        }
    }
    eta_binned(law, alpha, spec)
}

fn eta_lattice(law: &BranchingLaw, alpha: f64, span: f64) -> Result<(MeasureGrid, MeasureGrid)> {
    let atoms = law.weight_intensity_atoms()?;
    let mut indexed: Vec<(i64, bool, f64)> = Vec::new();
    let mut min_idx = i64::MAX;
    let mut max_idx = i64::MIN;
    for &(c, w) in &atoms {
        if c == 0.0 || w == 0.0 {
            continue;
        }
        let u = c.abs().ln();
        let idx = (u / span).round() as i64;
        let mass = c.abs().powf(alpha) * w;
        indexed.push((idx, c > 0.0, mass));
        min_idx = min_idx.min(idx);
        max_idx = max_idx.max(idx);
    }
    if indexed.is_empty() {
        return Ok((
            MeasureGrid::Lattice(LatticeMeasure::zero(span)),
            MeasureGrid::Lattice(LatticeMeasure::zero(span)),
        ));
    }
    let len = (max_idx - min_idx + 1) as usize;
    let mut plus = vec![0.0; len];
    let mut minus = vec![0.0; len];
    for (idx, positive, mass) in indexed {
        let slot = (idx - min_idx) as usize;
        if positive {
            plus[slot] += mass;
        } else {
            minus[slot] += mass;
        }
    }
    Ok((
        MeasureGrid::Lattice(LatticeMeasure { span, offset: 0.0, min_index: min_idx, masses: plus }.trimmed()),
        MeasureGrid::Lattice(LatticeMeasure { span, offset: 0.0, min_index: min_idx, masses: minus }.trimmed()),
    ))
}

fn eta_binned(law: &BranchingLaw, alpha: f64, spec: &GridSpec) -> Result<(MeasureGrid, MeasureGrid)> {
    if spec.bins < 2 {
        return Err(Error::GridTooCoarse { len: spec.bins });
    }
    let mut rng = StreamRng::new(spec.seed, 7);
    let mut buf = Vec::new();
    let mut logs: Vec<(f64, f64, bool)> = Vec::new(); // (log|c|, |c|^alpha, sign+)
    for _ in 0..spec.count {
        law.sample_vector_into(&mut rng, &mut buf);
        for &c in &buf {
            if c != 0.0 {
                logs.push((c.abs().ln(), c.abs().powf(alpha), c > 0.0));
            }
        }
    }
    if logs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = logs.len() as f64;
    let mean = logs.iter().map(|l| l.0).sum::<f64>() / n;
    let var = logs.iter().map(|l| (l.0 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-6);
    let lo = mean - 12.0 * sd;
    let hi = mean + 12.0 * sd;
    let width = (hi - lo) / spec.bins as f64;
    let edges: Vec<f64> = (0..=spec.bins).map(|i| lo + width * i as f64).collect();
    let mut plus = vec![0.0; spec.bins];
    let mut minus = vec![0.0; spec.bins];
    for (u, tilt, positive) in logs {
        let slot = (((u - lo) / width).floor() as i64).clamp(0, spec.bins as i64 - 1) as usize;
        if positive {
            plus[slot] += tilt;
        } else {
            minus[slot] += tilt;
        }
    }
    let scale = 1.0 / spec.count as f64;
    plus.iter_mut().for_each(|m| *m *= scale);
    minus.iter_mut().for_each(|m| *m *= scale);
    Ok((
        MeasureGrid::Binned(BinnedMeasure { edges: edges.clone(), masses: plus }),
        MeasureGrid::Binned(BinnedMeasure { edges, masses: minus }),
    ))
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Convolution of two measures on compatible grids; exact on lattices.
pub fn measure_convolve(a: &MeasureGrid, b: &MeasureGrid) -> Result<MeasureGrid> {
    match (a, b) {
        (MeasureGrid::Lattice(x), MeasureGrid::Lattice(y)) => {
            if (x.span - y.span).abs() > SPAN_MATCH_TOL * x.span.abs().max(1.0) {
                return Err(Error::IncompatibleGrids(format!(
                    "lattice spans {} vs {}",
                    x.span, y.span
                )));
            }
            if x.masses.is_empty() || y.masses.is_empty() {
                return Ok(MeasureGrid::Lattice(LatticeMeasure::zero(x.span)));
            }
            let len = x.masses.len() + y.masses.len() - 1;
            if len as u64 > SUPPORT_CAP {
                return Err(Error::SupportTooWide { points: len as u64, cap: SUPPORT_CAP });
            }
            let mut masses = vec![0.0; len];
            for (i, &mi) in x.masses.iter().enumerate() {
                if mi == 0.0 {
                    continue;
                }
                for (j, &mj) in y.masses.iter().enumerate() {
                    masses[i + j] += mi * mj;
                }
            }
            Ok(MeasureGrid::Lattice(
                LatticeMeasure {
                    span: x.span,
                    offset: x.offset + y.offset,
                    min_index: x.min_index + y.min_index,
                    masses,
                }
                .trimmed(),
            ))
        }
        (MeasureGrid::Binned(x), MeasureGrid::Binned(y)) => binned_convolve(x, y),
        _ => Err(Error::IncompatibleGrids("lattice vs binned".into())),
    }
}

/// Uniform-bin convolution: midpoint atoms of the two factors sum onto the
/// shared edges of the result grid, so mass splits evenly between the two
/// adjacent bins (mass-preserving re-binning).
fn binned_convolve(x: &BinnedMeasure, y: &BinnedMeasure) -> Result<MeasureGrid> {
    let wx = uniform_width(x)?;
    let wy = uniform_width(y)?;
    if (wx - wy).abs() > 1e-9 * wx.abs().max(1.0) {
        return Err(Error::IncompatibleGrids(format!("bin widths {wx} vs {wy}")));
    }
    let nx = x.masses.len();
    let ny = y.masses.len();
    let n_out = nx + ny;
    if n_out as u64 > SUPPORT_CAP {
        return Err(Error::SupportTooWide { points: n_out as u64, cap: SUPPORT_CAP });
    }
    let lo = x.edges[0] + y.edges[0];
    let edges: Vec<f64> = (0..=n_out).map(|i| lo + wx * i as f64).collect();
    let mut masses = vec![0.0; n_out];
    for (i, &mi) in x.masses.iter().enumerate() {
        if mi == 0.0 {
            continue;
        }
        for (j, &mj) in y.masses.iter().enumerate() {
            // midpoint sum lands exactly on the edge between bins i+j and i+j+1
            let m = mi * mj;
            masses[i + j] += 0.5 * m;
            masses[i + j + 1] += 0.5 * m;
        }
    }
    Ok(MeasureGrid::Binned(BinnedMeasure { edges, masses }))
}

fn uniform_width(b: &BinnedMeasure) -> Result<f64> {
    if b.edges.len() < 2 {
        return Err(Error::GridTooCoarse { len: b.edges.len() });
    }
    let w = b.edges[1] - b.edges[0];
    for pair in b.edges.windows(2) {
        if ((pair[1] - pair[0]) - w).abs() > 1e-9 * w.abs().max(1.0) {
            return Err(Error::IncompatibleGrids("non-uniform bins".into()));
        }
    }
    Ok(w)
}

/// Entrywise matrix convolution (F * G)_{ij} = sum_k F_{ik} * G_{kj}; with
/// the [[a, b], [b, a]] arrangement this is closed:
/// pp = a1*a2 + b1*b2, pm = a1*b2 + b1*a2.
pub fn matrix_convolve(a: &MatrixMeasure, b: &MatrixMeasure) -> Result<MatrixMeasure> {
    let pp = measure_add(&measure_convolve(&a.pp, &b.pp)?, &measure_convolve(&a.pm, &b.pm)?)?;
    let pm = measure_add(&measure_convolve(&a.pp, &b.pm)?, &measure_convolve(&a.pm, &b.pp)?)?;
    Ok(MatrixMeasure { pp, pm })
}

fn measure_add(a: &MeasureGrid, b: &MeasureGrid) -> Result<MeasureGrid> {
    match (a, b) {
        (MeasureGrid::Lattice(x), MeasureGrid::Lattice(y)) => {
            if (x.span - y.span).abs() > SPAN_MATCH_TOL * x.span.abs().max(1.0) {
                return Err(Error::IncompatibleGrids("lattice spans differ in add".into()));
            }
            if x.masses.is_empty() {
                return Ok(MeasureGrid::Lattice(y.clone()));
            }
            if y.masses.is_empty() {
                return Ok(MeasureGrid::Lattice(x.clone()));
            }
            let lo = x.min_index.min(y.min_index);
            let hi = (x.min_index + x.masses.len() as i64).max(y.min_index + y.masses.len() as i64);
            let mut masses = vec![0.0; (hi - lo) as usize];
            for (i, &m) in x.masses.iter().enumerate() {
                masses[(x.min_index - lo) as usize + i] += m;
            }
            for (i, &m) in y.masses.iter().enumerate() {
                masses[(y.min_index - lo) as usize + i] += m;
            }
            Ok(MeasureGrid::Lattice(
                LatticeMeasure { span: x.span, offset: x.offset, min_index: lo, masses }.trimmed(),
            ))
        }
        (MeasureGrid::Binned(x), MeasureGrid::Binned(y)) => {
            if x.edges.len() != y.edges.len()
                || x.edges
                    .iter()
                    .zip(&y.edges)
                    .any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0))
            {
                return Err(Error::IncompatibleGrids("bin edges differ in add".into()));
            }
            let masses = x.masses.iter().zip(&y.masses).map(|(a, b)| a + b).collect();
            Ok(MeasureGrid::Binned(BinnedMeasure { edges: x.edges.clone(), masses }))
        }
        _ => Err(Error::IncompatibleGrids("lattice vs binned in add".into())),
    }
}

// ---------------------------------------------------------------------------
// mu_n: convolution route and enumeration route
// ---------------------------------------------------------------------------

/// (mu_n^+, mu_n^-) as the row vector (1, 0) H^{*n}, built by n successive
/// row-times-matrix convolutions of the eta pair.
pub fn mu_n_via_convolution(
    eta: &(MeasureGrid, MeasureGrid),
    n: usize,
) -> Result<(MeasureGrid, MeasureGrid)> {
    let span = match &eta.0 {
        MeasureGrid::Lattice(l) => l.span,
        MeasureGrid::Binned(_) => f64::NAN,
    };
    let (mut row_p, mut row_m) = match &eta.0 {
        MeasureGrid::Lattice(_) => (
            MeasureGrid::Lattice(LatticeMeasure::dirac_at_zero(span)),
            MeasureGrid::Lattice(LatticeMeasure::zero(span)),
        ),
        MeasureGrid::Binned(b) => {
            // delta_0 on the bin containing zero
            let mut masses = vec![0.0; b.masses.len()];
            let w = uniform_width(b)?;
            let slot = (((0.0 - b.edges[0]) / w).floor() as i64).clamp(0, masses.len() as i64 - 1) as usize;
            masses[slot] = 1.0;
            (
                MeasureGrid::Binned(BinnedMeasure { edges: b.edges.clone(), masses }),
                MeasureGrid::Binned(BinnedMeasure {
                    edges: b.edges.clone(),
                    masses: vec![0.0; b.masses.len()],
                }),
            )
        }
    };
    for _ in 0..n {
        let next_p = measure_add(
            &measure_convolve(&row_p, &eta.0)?,
            &measure_convolve(&row_m, &eta.1)?,
        )?;
        let next_m = measure_add(
            &measure_convolve(&row_p, &eta.1)?,
            &measure_convolve(&row_m, &eta.0)?,
        )?;
        row_p = next_p;
        row_m = next_m;
    }
    Ok((row_p, row_m))
}

/// (mu_n^+, mu_n^-) by exhaustive tree enumeration: every depth-n outcome
/// of the weight multiset contributes |Pi|^alpha at log|Pi|, split by the
/// sign of Pi. Exact for finite-discrete lattice laws; this is the oracle
/// side of the convolution identity.
pub fn mu_n_via_enumeration(
    law: &BranchingLaw,
    alpha: f64,
    n: usize,
) -> Result<(MeasureGrid, MeasureGrid)> {
    if !law.is_finite_discrete() {
        return Err(Error::NotFiniteDiscrete("enumeration needs a finite-discrete law".into()));
    }
    let span = law_lattice_span(law)?;
    let dist = oracle::generation_weight_distribution(law, n, oracle::ENUM_CAP)?;
    let mut acc: std::collections::HashMap<(i64, bool), f64> = std::collections::HashMap::new();
    for (multiset, p) in &dist {
        for &(pi, count) in multiset {
            if pi == 0.0 {
                continue;
            }
            let idx = (pi.abs().ln() / span).round() as i64;
            let mass = pi.abs().powf(alpha) * count as f64 * p;
            *acc.entry((idx, pi > 0.0)).or_insert(0.0) += mass;
        }
    }
    if acc.is_empty() {
        return Ok((
            MeasureGrid::Lattice(LatticeMeasure::zero(span)),
            MeasureGrid::Lattice(LatticeMeasure::zero(span)),
        ));
    }
    let min_idx = acc.keys().map(|k| k.0).min().unwrap();
    let max_idx = acc.keys().map(|k| k.0).max().unwrap();
    let len = (max_idx - min_idx + 1) as usize;
    let mut plus = vec![0.0; len];
    let mut minus = vec![0.0; len];
    for ((idx, positive), mass) in acc {
        let slot = (idx - min_idx) as usize;
        if positive {
            plus[slot] += mass;
        } else {
            minus[slot] += mass;
        }
    }
    Ok((
        MeasureGrid::Lattice(LatticeMeasure { span, offset: 0.0, min_index: min_idx, masses: plus }.trimmed()),
        MeasureGrid::Lattice(LatticeMeasure { span, offset: 0.0, min_index: min_idx, masses: minus }.trimmed()),
    ))
}

/// Atom-by-atom comparison of two lattice measure pairs; returns the largest
/// absolute mass discrepancy over the union of supports.
pub fn measure_pair_distance(a: &(MeasureGrid, MeasureGrid), b: &(MeasureGrid, MeasureGrid)) -> f64 {
    let one = |x: &MeasureGrid, y: &MeasureGrid| -> f64 {
        let px = x.points();
        let py = y.points();
        let mut best: f64 = 0.0;
        let find = |pts: &[(f64, f64)], u: f64| -> f64 {
            pts.iter()
                .find(|(v, _)| (v - u).abs() <= 1e-9 * u.abs().max(1.0))
                .map(|&(_, m)| m)
                .unwrap_or(0.0)
        };
        for &(u, m) in &px {
            best = best.max((m - find(&py, u)).abs());
        }
        for &(u, m) in &py {
            best = best.max((m - find(&px, u)).abs());
        }
        best
    };
    one(&a.0, &b.0).max(one(&a.1, &b.1))
}

// ---------------------------------------------------------------------------
// Lattice tail constants H(t)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct LatticeH {
    pub h_plus: f64,
    pub h_minus: f64,
    pub t_reduced: f64,
    pub span: f64,
    pub k_half: usize,
    /// estimated truncated-tail contribution (geometric extrapolation of the
    /// last summands at both ends)
    pub residual: f64,
}

const LATTICE_H_STREAM: u64 = 2 << 32;

/// Truncated lattice constants
///   H_+/-(t) = (lambda/mu) sum_k e^{alpha(t+k lambda)}
///              (P(+/-R > e^{t+k lambda}) - E[sum_j 1(+/-C_j R > e^{t+k lambda})])
/// with empirical probabilities. `t` is first reduced modulo the span, so
/// the λ-periodicity of the result is exact by construction.
pub fn lattice_h(
    law: &BranchingLaw,
    r_values: &[f64],
    alpha: f64,
    mu: f64,
    t: f64,
    k_half: Option<usize>,
    pair_count: u64,
    seed: u64,
) -> Result<LatticeH> {
    if r_values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if mu <= 0.0 {
        return Err(Error::NonpositiveMu { mu });
    }
    let span = law_lattice_span(law)?;
    let t_reduced = t.rem_euclid(span);

    let mut sorted_r: Vec<f64> = r_values.to_vec();
    sorted_r.sort_by(f64::total_cmp);
    let products = pair_products(law, r_values, pair_count, seed, LATTICE_H_STREAM);

    let max_abs = sorted_r
        .iter()
        .map(|v| v.abs())
        .chain(products.values.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let k = k_half.unwrap_or_else(|| ((max_abs.ln() - t_reduced) / span).ceil().max(0.0) as usize + 5);

    let mut sum_p = 0.0;
    let mut sum_m = 0.0;
    let mut low_terms: Vec<f64> = Vec::new();
    for j in -(k as i64)..=(k as i64) {
        let u_log = t_reduced + span * j as f64;
        let u = u_log.exp();
        let tilt = (alpha * u_log).exp();
        let term_p = tilt * (ccdf(&sorted_r, u) - products.tail_rate(u));
        let term_m = tilt * (lcdf(&sorted_r, -u) - products.lower_rate(-u));
        if j <= -(k as i64) + 2 {
            low_terms.push(term_p.abs().max(term_m.abs()));
        }
        sum_p += term_p;
        sum_m += term_m;
    }
    // the upper end vanishes exactly beyond the sample range; the lower end
    // decays geometrically at rate e^{-alpha span} per step
    let ratio = (-alpha * span).exp();
    let residual = low_terms.first().copied().unwrap_or(0.0) * ratio / (1.0 - ratio);

    Ok(LatticeH {
        h_plus: span / mu * sum_p,
        h_minus: span / mu * sum_m,
        t_reduced,
        span,
        k_half: k,
        residual: span / mu * residual,
    })
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// Measure CSV: lattice metadata comments, then `support,mass_pp,mass_pm`.
pub fn write_measure_pair_csv<W: std::io::Write>(
    pair: &(MeasureGrid, MeasureGrid),
    mut out: W,
) -> std::io::Result<()> {
    if let MeasureGrid::Lattice(l) = &pair.0 {
        writeln!(out, "# span={:.16e}, offset={:.16e}", l.span, l.offset)?;
    }
    writeln!(out, "support,mass_pp,mass_pm")?;
    let plus = pair.0.points();
    let minus = pair.1.points();
    let mut supports: Vec<f64> = plus.iter().chain(minus.iter()).map(|&(u, _)| u).collect();
    supports.sort_by(f64::total_cmp);
    supports.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));
    let at = |pts: &[(f64, f64)], u: f64| -> f64 {
        pts.iter()
            .find(|(v, _)| (v - u).abs() <= 1e-12 * u.abs().max(1.0))
            .map(|&(_, m)| m)
            .unwrap_or(0.0)
    };
    for u in supports {
        writeln!(out, "{u:.16e},{:.16e},{:.16e}", at(&plus, u), at(&minus, u))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::{CMagnitude, NLaw, QLaw};

    /// n det 1, C = +2 w.p. 1/3, +1/2 w.p. 2/3 (rho_1 = 1, mu = (1/3) log 2)
    fn two_point_positive() -> BranchingLaw {
        BranchingLaw::independent(
            NLaw::Det { k: 1 },
            CMagnitude::TwoPoint { a: 2.0, p_a: 1.0 / 3.0, b: 0.5 },
            0.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap()
    }

    fn two_point_signed() -> BranchingLaw {
        BranchingLaw::independent(
            NLaw::Det { k: 1 },
            CMagnitude::TwoPoint { a: 2.0, p_a: 1.0 / 3.0, b: 0.5 },
            0.5,
            QLaw::Det { value: 1.0 },
        )
        .unwrap()
    }

    fn lattice(m: &MeasureGrid) -> &LatticeMeasure {
        match m {
            MeasureGrid::Lattice(l) => l,
            _ => panic!("expected lattice"),
        }
    }

    #[test]
    fn span_detection() {
        let ln2 = std::f64::consts::LN_2;
        assert!((lattice_span(&[ln2, -ln2]).unwrap() - ln2).abs() < 1e-12);
        assert!((lattice_span(&[2.0 * ln2, -ln2]).unwrap() - ln2).abs() < 1e-12);
        assert!(lattice_span(&[ln2, 3f64.ln()]).is_none());
    }

    #[test]
    fn eta_grids_worked_example() {
        let ln2 = std::f64::consts::LN_2;
        let (plus, minus) = eta_grids(&two_point_positive(), 1.0, &GridSpec::default()).unwrap();
        let lp = lattice(&plus);
        assert!((lp.span - ln2).abs() < 1e-12);
        // mass 2 * (1/3) = 2/3 at log 2; (1/2)(2/3) = 1/3 at -log 2
        let pts = plus.points();
        assert_eq!(pts.len(), 3); // indices -1, 0, 1 with a zero in the middle
        assert!((pts[0].0 + ln2).abs() < 1e-12 && (pts[0].1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((pts[2].0 - ln2).abs() < 1e-12 && (pts[2].1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(minus.total_mass(), 0.0);
        assert!((plus.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eta_grids_sign_swap() {
        let law = BranchingLaw::independent(
            NLaw::Det { k: 1 },
            CMagnitude::TwoPoint { a: 2.0, p_a: 1.0 / 3.0, b: 0.5 },
            1.0, // always negative
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let (plus, minus) = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
        assert_eq!(plus.total_mass(), 0.0);
        assert!((minus.total_mass() - 1.0).abs() < 1e-12);
        let pts = minus.points();
        assert!((pts[2].1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eta_mean_identity() {
        let law = two_point_signed();
        let (plus, minus) = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
        let mean = plus.mean() + minus.mean();
        let mu = law.closed_mu(1.0).unwrap();
        assert!((mean - mu).abs() < 1e-12, "mean {mean} vs mu {mu}");
        assert!((plus.total_mass() + minus.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eta_rejects_unnormalized_alpha() {
        match eta_grids(&two_point_positive(), 1.5, &GridSpec::default()) {
            Err(Error::NotNormalizedAtAlpha { .. }) => {}
            other => panic!("expected NotNormalizedAtAlpha, got {other:?}"),
        }
    }

    #[test]
    fn identity_element_convolution() {
        let law = two_point_signed();
        let (plus, minus) = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
        let span = lattice(&plus).span;
        let h = MatrixMeasure::from_etas(plus.clone(), minus.clone());
        let id = MatrixMeasure::identity_like(span);
        let out = matrix_convolve(&id, &h).unwrap();
        assert_eq!(out.pp, plus);
        assert_eq!(out.pm, minus);
    }

    #[test]
    fn masses_multiply_like_matrices() {
        let law = two_point_signed();
        let (plus, minus) = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
        let h = MatrixMeasure::from_etas(plus, minus);
        let h2 = matrix_convolve(&h, &h).unwrap();
        let a = h.mass_matrix();
        let want = [
            [a[0][0] * a[0][0] + a[0][1] * a[1][0], a[0][0] * a[0][1] + a[0][1] * a[1][1]],
            [a[1][0] * a[0][0] + a[1][1] * a[1][0], a[1][0] * a[0][1] + a[1][1] * a[1][1]],
        ];
        let got = h2.mass_matrix();
        for i in 0..2 {
            for j in 0..2 {
                assert!((got[i][j] - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mass_matrix_row_sums_one_with_unit_eigenpair() {
        let law = two_point_signed();
        let (plus, minus) = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
        let h = MatrixMeasure::from_etas(plus, minus);
        let m = h.mass_matrix();
        for row in m {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
        // H (1,1)^T = (1,1)^T
        let v = [m[0][0] + m[0][1], m[1][0] + m[1][1]];
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_atom_self_convolution_by_hand() {
        let ln2 = std::f64::consts::LN_2;
        // eta with masses a at +log2 and b at -log2, convolved with itself:
        // {2 log2: a^2, 0: 2ab, -2 log2: b^2}
        let eta = MeasureGrid::Lattice(LatticeMeasure {
            span: ln2,
            offset: 0.0,
            min_index: -1,
            masses: vec![1.0 / 3.0, 0.0, 2.0 / 3.0],
        });
        let out = measure_convolve(&eta, &eta).unwrap();
        let l = lattice(&out);
        assert_eq!(l.min_index, -2);
        let expect = [1.0 / 9.0, 0.0, 2.0 * (1.0 / 3.0) * (2.0 / 3.0), 0.0, 4.0 / 9.0];
        assert_eq!(l.masses.len(), 5);
        for (got, want) in l.masses.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mu_n_row_iteration_matches_matrix_power() {
        let law = two_point_signed();
        let eta = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
        let h = MatrixMeasure::from_etas(eta.0.clone(), eta.1.clone());
        let mut power = MatrixMeasure::identity_like(lattice(&eta.0).span);
        for n in 0..=4 {
            let (mp, mm) = mu_n_via_convolution(&eta, n).unwrap();
            // first row of H^{*n}
            assert!(measure_pair_distance(&(mp, mm), &(power.pp.clone(), power.pm.clone())) < 1e-12);
            power = matrix_convolve(&power, &h).unwrap();
        }
    }

    #[test]
    fn mu_zero_and_one() {
        let law = two_point_signed();
        let eta = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
        let (m0p, m0m) = mu_n_via_convolution(&eta, 0).unwrap();
        assert_eq!(m0p.points(), vec![(0.0, 1.0)]);
        assert_eq!(m0m.total_mass(), 0.0);
        let (m1p, m1m) = mu_n_via_convolution(&eta, 1).unwrap();
        assert!(measure_pair_distance(&(m1p, m1m), &eta) < 1e-15);
    }

    #[test]
    fn convolution_identity_against_enumeration() {
        for law in [two_point_positive(), two_point_signed()] {
            let eta = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
            for n in 0..=4 {
                let conv = mu_n_via_convolution(&eta, n).unwrap();
                let enumd = mu_n_via_enumeration(&law, 1.0, n).unwrap();
                let d = measure_pair_distance(&conv, &enumd);
                assert!(d < 1e-10, "law {:?} n {n}: distance {d}", law.fingerprint());
                let total = conv.0.total_mass() + conv.1.total_mass();
                assert!((total - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn signed_deterministic_law_alternates_parity() {
        // C = -c deterministically: mu_n is all-positive for even n, all-negative
        // for odd n. Use N det 1 with c = 2, alpha chosen so rho = 1: 2^a = 1
        // has no positive root, so skip normalization by calling internals.
        let law = BranchingLaw::independent(
            NLaw::Det { k: 1 },
            CMagnitude::Det { value: 2.0 },
            1.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        for n in 0..=3 {
            let (p, m) = mu_n_via_enumeration(&law, 0.0, n).unwrap();
            if n % 2 == 0 {
                assert!((p.total_mass() - 1.0).abs() < 1e-12);
                assert_eq!(m.total_mass(), 0.0);
            } else {
                assert_eq!(p.total_mass(), 0.0);
                assert!((m.total_mass() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_two_children_single_atom() {
        // n det 2, c det 2^{-1/2}, alpha = 2: rho = 1; mu_n is a single atom
        // of mass 1 at n * log(2^{-1/2})
        let law = BranchingLaw::independent(
            NLaw::Det { k: 2 },
            CMagnitude::Det { value: std::f64::consts::FRAC_1_SQRT_2 },
            0.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        for n in 0..=3 {
            let (p, m) = mu_n_via_enumeration(&law, 2.0, n).unwrap();
            assert!((p.total_mass() - 1.0).abs() < 1e-12, "n = {n}");
            assert_eq!(m.total_mass(), 0.0);
            let pts = p.points();
            let hot: Vec<_> = pts.iter().filter(|(_, m)| *m > 0.0).collect();
            assert_eq!(hot.len(), 1);
            assert!((hot[0].0 - n as f64 * std::f64::consts::FRAC_1_SQRT_2.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn lattice_h_periodicity_is_exact() {
        let law = two_point_signed();
        let mut rng = StreamRng::new(3, 0);
        let opts = crate::treesim::SimOptions::default();
        let mut values = Vec::new();
        for _ in 0..20_000 {
            values.push(crate::treesim::iterate_r(&law, 12, &mut rng, &opts).unwrap());
        }
        let mu = law.closed_mu(1.0).unwrap();
        let a = lattice_h(&law, &values, 1.0, mu, 0.0, Some(40), 20_000, 5).unwrap();
        let b = lattice_h(&law, &values, 1.0, mu, std::f64::consts::LN_2, Some(40), 20_000, 5).unwrap();
        assert_eq!(a.h_plus, b.h_plus);
        assert_eq!(a.h_minus, b.h_minus);
        let c = lattice_h(&law, &values, 1.0, mu, 0.25 + std::f64::consts::LN_2, Some(40), 20_000, 5).unwrap();
        let d = lattice_h(&law, &values, 1.0, mu, 0.25, Some(40), 20_000, 5).unwrap();
        assert!((c.h_plus - d.h_plus).abs() <= 1e-12 * d.h_plus.abs().max(1.0));
    }

    #[test]
    fn lattice_h_refuses_nonlattice() {
        let law = BranchingLaw::independent(
            NLaw::Det { k: 2 },
            CMagnitude::Lognormal { m: -1.0, sigma2: 1.0 },
            0.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        match lattice_h(&law, &[1.0, 2.0], 1.0, 0.5, 0.0, Some(5), 10, 0) {
            Err(Error::NotLattice(_)) => {}
            other => panic!("expected NotLattice, got {other:?}"),
        }
    }

    #[test]
    fn measure_csv_has_metadata_and_rows() {
        let law = two_point_signed();
        let eta = eta_grids(&law, 1.0, &GridSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_measure_pair_csv(&eta, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# span="));
        assert!(text.contains("support,mass_pp,mass_pm"));
        // contiguous lattice indices -1, 0, 1 (middle row carries zero mass)
        assert_eq!(text.lines().count(), 2 + 3);
    }
}
