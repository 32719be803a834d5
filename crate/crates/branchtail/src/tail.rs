//! Empirical tail analysis: Hill curves for both tails, the tail constants
//! H, H+/- by the moment and integral routes, the tilted tail integrand, and
//! the empirical-vs-model comparison table.

use serde::Serialize;

use crate::emp::{ccdf, lcdf, pair_products, PairProducts};
use crate::error::{Error, Result};
use crate::law::BranchingLaw;
use crate::rng::StreamRng;

const Z_95: f64 = 1.959_963_984_540_054;
const Z_99: f64 = 2.575_829_303_548_900_4;

// ---------------------------------------------------------------------------
// Hill estimator
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct HillPoint {
    pub k: usize,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailSide {
    Right,
    Left,
}

/// Hill estimates over `k_grid` for one tail: the positive part of the
/// samples for the right tail, of their negation for the left tail.
/// alpha_hat(k) = [ (1/k) sum_{i<=k} log(X_(i) / X_(k+1)) ]^{-1}.
pub fn hill_tail(samples: &[f64], side: TailSide, k_grid: &[usize]) -> Result<Vec<HillPoint>> {
    let side_name = match side {
        TailSide::Right => "right",
        TailSide::Left => "left",
    };
    let mut pos: Vec<f64> = samples
        .iter()
        .map(|&x| match side {
            TailSide::Right => x,
            TailSide::Left => -x,
        })
        .filter(|&x| x > 0.0)
        .collect();
    let needed = k_grid.iter().copied().max().unwrap_or(0) + 1;
    if pos.len() < needed || pos.is_empty() {
        return Err(Error::TailEmpty { side: side_name, available: pos.len(), needed });
    }
    pos.sort_by(|a, b| b.total_cmp(a)); // descending
    let mut out = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        if k == 0 {
            return Err(Error::GridTooCoarse { len: 0 });
        }
        let x_k1 = pos[k];
        let mean_log: f64 = pos[..k].iter().map(|&x| (x / x_k1).ln()).sum::<f64>() / k as f64;
        if mean_log <= 0.0 {
            return Err(Error::ZeroLogSpacings);
        }
        out.push(HillPoint { k, alpha: 1.0 / mean_log });
    }
    Ok(out)
}

/// Default number of upper order statistics: floor(count^{0.6}).
pub fn default_hill_k(count: usize) -> usize {
    (count as f64).powf(0.6).floor() as usize
}

/// Log-spaced k grid from 10 up to a tenth of the sample size, with the
/// default k included.
pub fn default_k_grid(count: usize) -> Vec<usize> {
    let hi = (count / 10).max(11) as f64;
    let mut ks: Vec<usize> = (0..32)
        .map(|i| (10f64.ln() + (hi.ln() - 10f64.ln()) * i as f64 / 31.0).exp().round() as usize)
        .collect();
    ks.push(default_hill_k(count));
    ks.sort_unstable();
    ks.dedup();
    ks
}

// ---------------------------------------------------------------------------
// H constants: moment route
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignCase {
    /// all weights nonnegative a.s.: separate constants H+ and H-
    Nonnegative,
    /// some weight negative with positive probability: a single constant H
    Mixed,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct HEstimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HConstants {
    pub case: SignCase,
    pub h_plus: Option<HEstimate>,
    pub h_minus: Option<HEstimate>,
    pub h: HEstimate,
}

const H_MOMENT_STREAM: u64 = 3 << 32;
const H_INTEGRAL_STREAM: u64 = 4 << 32;
const BATCH_MEANS: usize = 100;

/// The moment-form constants: averages of
///   [((sum_j C_j R_j + Q)^{+/-})^alpha - sum_j ((C_j R_j)^{+/-})^alpha] / (alpha mu)
/// in the nonnegative case, and of the |.| variant over 2 alpha mu in the
/// mixed case, over `count` fresh vectors paired with R resampled from the
/// batch. Confidence intervals by batch means (99%).
pub fn estimate_h_moment(
    law: &BranchingLaw,
    r_values: &[f64],
    alpha: f64,
    mu: f64,
    count: u64,
    seed: u64,
) -> Result<HConstants> {
    if r_values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if mu <= 0.0 {
        return Err(Error::NonpositiveMu { mu });
    }
    let case = if law.is_nonnegative() { SignCase::Nonnegative } else { SignCase::Mixed };
    let mut rng = StreamRng::new(seed, H_MOMENT_STREAM);
    let mut buf = Vec::new();
    let n = r_values.len() as u64;

    let per_batch = (count as usize / BATCH_MEANS).max(1);
    let mut plus_batches = Vec::with_capacity(BATCH_MEANS);
    let mut minus_batches = Vec::with_capacity(BATCH_MEANS);
    for _ in 0..BATCH_MEANS {
        let (mut acc_p, mut acc_m) = (0.0f64, 0.0f64);
        for _ in 0..per_batch {
            let q = law.sample_vector_into(&mut rng, &mut buf);
            let mut s = q;
            let mut sum_pow_p = 0.0;
            let mut sum_pow_m = 0.0;
            for &c in buf.iter() {
                let r = r_values[(rand::Rng::next_u64(&mut rng) % n) as usize];
                let t = c * r;
                s += t;
                if t > 0.0 {
                    sum_pow_p += t.powf(alpha);
                } else if t < 0.0 {
                    sum_pow_m += (-t).powf(alpha);
                }
            }
            acc_p += pos_pow(s, alpha) - sum_pow_p;
            acc_m += pos_pow(-s, alpha) - sum_pow_m;
        }
        plus_batches.push(acc_p / per_batch as f64);
        minus_batches.push(acc_m / per_batch as f64);
    }

    let scale_pm = 1.0 / (alpha * mu);
    let scale_abs = 1.0 / (2.0 * alpha * mu);
    let hp = batch_ci(&plus_batches, scale_pm);
    let hm = batch_ci(&minus_batches, scale_pm);
    let habs_batches: Vec<f64> = plus_batches
        .iter()
        .zip(&minus_batches)
        .map(|(p, m)| p + m)
        .collect();
    let h = batch_ci(&habs_batches, scale_abs);
    Ok(match case {
        SignCase::Nonnegative => HConstants { case, h_plus: Some(hp), h_minus: Some(hm), h },
        SignCase::Mixed => HConstants { case, h_plus: None, h_minus: None, h },
    })
}

#[inline]
fn pos_pow(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x.powf(alpha)
    } else {
        0.0
    }
}

fn batch_ci(batches: &[f64], scale: f64) -> HEstimate {
    let b = batches.len() as f64;
    let mean = batches.iter().sum::<f64>() / b;
    let var = batches.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / b;
    let half = Z_99 * (var / b).sqrt();
    HEstimate {
        value: mean * scale,
        ci_lo: (mean - half) * scale,
        ci_hi: (mean + half) * scale,
    }
}

// ---------------------------------------------------------------------------
// H constants: integral route
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct HIntegral {
    pub constants: HConstants,
    /// estimated contribution beyond the last grid point, as a fraction of
    /// the computed integral
    pub residual_fraction: f64,
}

/// 400 log-uniform points from the 50th to the 99.99th percentile of |R|.
pub fn default_v_grid(r_values: &[f64]) -> Vec<f64> {
    let mut abs: Vec<f64> = r_values.iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
    abs.sort_by(f64::total_cmp);
    let q = |p: f64| -> f64 {
        let idx = ((abs.len() as f64 - 1.0) * p).round() as usize;
        abs[idx.min(abs.len() - 1)]
    };
    let lo = q(0.5).max(1e-300);
    let hi = q(0.9999).max(lo * 1.0001);
    (0..400)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 399.0).exp())
        .collect()
}

/// The integral-form constants
///   H_{+/-} = (1/mu) int_0^inf v^{alpha-1} (P(+/-R > v) - E[sum_j 1(+/-C_j R > v)]) dv
/// with empirical probabilities: trapezoid quadrature of the integrand on
/// `v_grid`, a power-weighted midpoint rule on the head segment [0, v_1]
/// (the integral starts at zero, not at the grid), and a log-slope
/// extrapolation of the tail beyond the last point, reported as residual.
pub fn estimate_h_integral(
    law: &BranchingLaw,
    r_values: &[f64],
    alpha: f64,
    mu: f64,
    v_grid: &[f64],
    pair_count: u64,
    seed: u64,
) -> Result<HIntegral> {
    if r_values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if mu <= 0.0 {
        return Err(Error::NonpositiveMu { mu });
    }
    if v_grid.len() < 2 {
        return Err(Error::GridTooCoarse { len: v_grid.len() });
    }
    if v_grid[0] <= 0.0 || v_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid_config("v_grid", "must be positive and strictly increasing"));
    }
    let case = if law.is_nonnegative() { SignCase::Nonnegative } else { SignCase::Mixed };

    let mut sorted: Vec<f64> = r_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let products = pair_products(law, r_values, pair_count, seed, H_INTEGRAL_STREAM);

    let (ip, res_p) = one_side_integral(&sorted, &products, alpha, v_grid, true);
    let (im, res_m) = one_side_integral(&sorted, &products, alpha, v_grid, false);

    let integral_total = (ip + im).abs().max(1e-300);
    let residual_fraction = (res_p.abs() + res_m.abs()) / integral_total;
    if residual_fraction > 0.25 {
        return Err(Error::IntegralNotConverged {
            residual: res_p.abs() + res_m.abs(),
            integral: ip + im,
        });
    }

    // block CIs: split the batch and the pairing draws into 20 blocks
    let blocks = 20usize;
    let block_len = r_values.len() / blocks;
    let mut hp_blocks = Vec::with_capacity(blocks);
    let mut hm_blocks = Vec::with_capacity(blocks);
    if block_len >= 16 {
        for b in 0..blocks {
            let slice = &r_values[b * block_len..(b + 1) * block_len];
            let mut s: Vec<f64> = slice.to_vec();
            s.sort_by(f64::total_cmp);
            let prod_b = pair_products(
                law,
                slice,
                (pair_count / blocks as u64).max(1),
                seed,
                H_INTEGRAL_STREAM + 1 + b as u64,
            );
            let (bp, _) = one_side_integral(&s, &prod_b, alpha, v_grid, true);
            let (bm, _) = one_side_integral(&s, &prod_b, alpha, v_grid, false);
            hp_blocks.push(bp);
            hm_blocks.push(bm);
        }
    } else {
        hp_blocks = vec![ip; 2];
        hm_blocks = vec![im; 2];
    }

    let ci = |point: f64, blocks_vals: &[f64], scale: f64| -> HEstimate {
        let b = blocks_vals.len() as f64;
        let mean = blocks_vals.iter().sum::<f64>() / b;
        let var = blocks_vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / b;
        let half = Z_99 * (var / b).sqrt();
        HEstimate { value: point * scale, ci_lo: (point - half) * scale, ci_hi: (point + half) * scale }
    };
    let hp = ci(ip, &hp_blocks, 1.0 / mu);
    let hm = ci(im, &hm_blocks, 1.0 / mu);
    let habs_blocks: Vec<f64> = hp_blocks.iter().zip(&hm_blocks).map(|(a, b)| a + b).collect();
    let h = ci(ip + im, &habs_blocks, 1.0 / (2.0 * mu));

    let constants = match case {
        SignCase::Nonnegative => HConstants { case, h_plus: Some(hp), h_minus: Some(hm), h },
        SignCase::Mixed => HConstants { case, h_plus: None, h_minus: None, h },
    };
    Ok(HIntegral { constants, residual_fraction })
}

/// Integral of v^{alpha-1} * bracket(v) over [0, v_max] plus a tail residual
/// estimate; `positive` selects the right or left tail bracket.
fn one_side_integral(
    sorted_r: &[f64],
    products: &PairProducts,
    alpha: f64,
    v_grid: &[f64],
    positive: bool,
) -> (f64, f64) {
    let bracket = |v: f64| -> f64 {
        if positive {
            ccdf(sorted_r, v) - products.tail_rate(v)
        } else {
            lcdf(sorted_r, -v) - products.lower_rate(-v)
        }
    };
    // head [0, v_1]: the v^{alpha-1} weight integrates in closed form per
    // subinterval, so the singularity at 0 (alpha < 1) costs nothing
    let head_pts = 64usize;
    let v1 = v_grid[0];
    let mut head = 0.0;
    for i in 0..head_pts {
        let lo = v1 * i as f64 / head_pts as f64;
        let hi = v1 * (i + 1) as f64 / head_pts as f64;
        let mid = 0.5 * (lo + hi);
        head += bracket(mid) * (hi.powf(alpha) - lo.powf(alpha)) / alpha;
    }
    // main: trapezoid of the integrand f(v) = v^{alpha-1} bracket(v)
    let f: Vec<f64> = v_grid.iter().map(|&v| v.powf(alpha - 1.0) * bracket(v)).collect();
    let mut main = 0.0;
    for i in 1..v_grid.len() {
        main += 0.5 * (f[i] + f[i - 1]) * (v_grid[i] - v_grid[i - 1]);
    }
    // residual: extrapolate |f| at its last observed log-slope
    let v_max = *v_grid.last().unwrap();
    let f_end = *f.last().unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &v) in v_grid.iter().enumerate() {
        if v >= v_max / 10.0 && f[i].abs() > 0.0 {
            xs.push(v.ln());
            ys.push(f[i].abs().ln());
        }
    }
    let slope = if xs.len() >= 3 { fit_slope(&xs, &ys) } else { -(alpha + 1.0) };
    let decay = (-slope - 1.0).max(0.5);
    let residual = f_end.abs() * v_max / decay;
    (head + main, residual)
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

// ---------------------------------------------------------------------------
// Goldie integrand diagnostic
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GoldieRow {
    pub t: f64,
    pub g_plus: f64,
    pub g_minus: f64,
    pub cum_abs_plus: f64,
    pub cum_abs_minus: f64,
}

const GOLDIE_STREAM: u64 = 5 << 32;

/// The tilted integrand g_{+/-}(t) = e^{alpha t} (P(+/-R > e^t) -
/// E[sum_j 1(+/-C_j R > e^t)]) on `t_grid`, with running absolute integrals
/// so the decay required by the integrability conditions can be inspected.
pub fn goldie_integrand(
    law: &BranchingLaw,
    r_values: &[f64],
    alpha: f64,
    t_grid: &[f64],
    pair_count: u64,
    seed: u64,
) -> Vec<GoldieRow> {
    let mut sorted: Vec<f64> = r_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let products = pair_products(law, r_values, pair_count, seed, GOLDIE_STREAM);
    let mut rows: Vec<GoldieRow> = Vec::with_capacity(t_grid.len());
    let (mut cum_p, mut cum_m) = (0.0f64, 0.0f64);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in t_grid {
        let v = t.exp();
        let tilt = (alpha * t).exp();
        let gp = tilt * (ccdf(&sorted, v) - products.tail_rate(v));
        let gm = tilt * (lcdf(&sorted, -v) - products.lower_rate(-v));
        if let Some((t0, gp0, gm0)) = prev {
            cum_p += 0.5 * (gp.abs() + gp0.abs()) * (t - t0);
            cum_m += 0.5 * (gm.abs() + gm0.abs()) * (t - t0);
        }
        rows.push(GoldieRow { t, g_plus: gp, g_minus: gm, cum_abs_plus: cum_p, cum_abs_minus: cum_m });
        prev = Some((t, gp, gm));
    }
    rows
}

/// Fraction of the cumulative absolute integral contributed by the last
/// decade of the grid (per tail).
pub fn last_decade_share(rows: &[GoldieRow]) -> (f64, f64) {
    if rows.len() < 2 {
        return (1.0, 1.0);
    }
    let t_max = rows.last().unwrap().t;
    let cut = t_max - std::f64::consts::LN_10;
    let at_cut = rows
        .iter()
        .rev()
        .find(|r| r.t <= cut)
        .unwrap_or(&rows[0]);
    let total_p = rows.last().unwrap().cum_abs_plus.max(1e-300);
    let total_m = rows.last().unwrap().cum_abs_minus.max(1e-300);
    (
        (total_p - at_cut.cum_abs_plus) / total_p,
        (total_m - at_cut.cum_abs_minus) / total_m,
    )
}

// ---------------------------------------------------------------------------
// Tail comparison table
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TailRow {
    pub t: f64,
    pub emp_ccdf_right: f64,
    pub ci_lo_r: f64,
    pub ci_hi_r: f64,
    pub emp_ccdf_left: f64,
    pub ci_lo_l: f64,
    pub ci_hi_l: f64,
    pub model_right: f64,
    pub model_left: f64,
    pub ratio_right: f64,
    pub ratio_left: f64,
    pub flag: &'static str,
}

/// Wilson score interval for a binomial proportion.
fn wilson(p_hat: f64, n: f64, z: f64) -> (f64, f64) {
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p_hat + z2 / (2.0 * n)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Per threshold t: empirical right/left CCDFs with Wilson 95% intervals
/// against the model H_{+/-} t^{-alpha}. Rows in the distribution bulk
/// (CCDF > 1/2) are flagged pre-asymptotic.
pub fn tail_table(
    r_values: &[f64],
    alpha: f64,
    h_plus: f64,
    h_minus: f64,
    thresholds: &[f64],
) -> Vec<TailRow> {
    let mut sorted: Vec<f64> = r_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    thresholds
        .iter()
        .map(|&t| {
            let pr = ccdf(&sorted, t);
            let pl = lcdf(&sorted, -t);
            let (lo_r, hi_r) = wilson(pr, n, Z_95);
            let (lo_l, hi_l) = wilson(pl, n, Z_95);
            let model_right = h_plus * t.powf(-alpha);
            let model_left = h_minus * t.powf(-alpha);
            TailRow {
                t,
                emp_ccdf_right: pr,
                ci_lo_r: lo_r,
                ci_hi_r: hi_r,
                emp_ccdf_left: pl,
                ci_lo_l: lo_l,
                ci_hi_l: hi_l,
                model_right,
                model_left,
                ratio_right: pr / model_right,
                ratio_left: pl / model_left,
                flag: if pr > 0.5 || pl > 0.5 { "pre-asymptotic" } else { "ok" },
            }
        })
        .collect()
}

/// Thresholds whose right-tail exceedance counts land log-uniformly between
/// `count_hi` and `count_lo` (count_hi > count_lo), taken from the order
/// statistics of |R|.
pub fn thresholds_by_exceedance(
    r_values: &[f64],
    count_lo: usize,
    count_hi: usize,
    points: usize,
) -> Vec<f64> {
    let mut abs: Vec<f64> = r_values.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| b.total_cmp(a)); // descending
    let n = abs.len();
    let lo = count_lo.clamp(1, n - 1);
    let hi = count_hi.clamp(lo + 1, n - 1);
    (0..points)
        .map(|i| {
            let c = (lo as f64).ln() + ((hi as f64).ln() - (lo as f64).ln()) * i as f64 / (points - 1).max(1) as f64;
            let rank = c.exp().round() as usize;
            abs[rank.clamp(1, n - 1)]
        })
        .rev()
        .collect()
}

// ---------------------------------------------------------------------------
// Report assembly and emission
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TailReport {
    pub alpha_used: f64,
    pub hill_right: Option<Vec<HillPoint>>,
    pub hill_left: Option<Vec<HillPoint>>,
    pub moment: HConstants,
    pub integral: Option<HIntegral>,
    pub comparison: Vec<TailRow>,
}

/// Tail CSV:
/// `t,emp_ccdf_right,ci_lo_r,ci_hi_r,emp_ccdf_left,ci_lo_l,ci_hi_l,model_right,model_left,ratio_right,ratio_left,flag`.
pub fn write_tail_csv<W: std::io::Write>(rows: &[TailRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "t,emp_ccdf_right,ci_lo_r,ci_hi_r,emp_ccdf_left,ci_lo_l,ci_hi_l,model_right,model_left,ratio_right,ratio_left,flag"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.t,
            r.emp_ccdf_right,
            r.ci_lo_r,
            r.ci_hi_r,
            r.emp_ccdf_left,
            r.ci_lo_l,
            r.ci_hi_l,
            r.model_right,
            r.model_left,
            r.ratio_right,
            r.ratio_left,
            r.flag
        )?;
    }
    Ok(())
}

/// Hill CSV: `k,alpha_right,alpha_left` (empty field when a tail is absent).
pub fn write_hill_csv<W: std::io::Write>(
    right: Option<&[HillPoint]>,
    left: Option<&[HillPoint]>,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "k,alpha_right,alpha_left")?;
    let mut ks: Vec<usize> = right
        .into_iter()
        .flatten()
        .chain(left.into_iter().flatten())
        .map(|p| p.k)
        .collect();
    ks.sort_unstable();
    ks.dedup();
    let find = |pts: Option<&[HillPoint]>, k: usize| -> String {
        pts.and_then(|ps| ps.iter().find(|p| p.k == k))
            .map(|p| format!("{:.16e}", p.alpha))
            .unwrap_or_default()
    };
    for k in ks {
        writeln!(out, "{k},{},{}", find(right, k), find(left, k))?;
    }
    Ok(())
}

/// Fixed-template log-log SVG of the empirical CCDFs against the model
/// lines H_{+/-} t^{-alpha}; pure emission.
pub fn write_ccdf_svg<W: std::io::Write>(
    r_values: &[f64],
    alpha: f64,
    h_plus: f64,
    h_minus: f64,
    mut out: W,
) -> std::io::Result<()> {
    let mut sorted: Vec<f64> = r_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let abs_max = sorted.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-12);
    let mut abs_pos: Vec<f64> = sorted.iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
    abs_pos.sort_by(f64::total_cmp);
    let t_lo = abs_pos[abs_pos.len() / 2].max(abs_max * 1e-6);
    let (width, height, ml, mb) = (640.0, 440.0, 60.0, 40.0);
    let x_of = |t: f64| ml + (t / t_lo).ln() / (abs_max / t_lo).ln() * (width - ml - 20.0);
    let p_lo = 0.5 / n as f64;
    let y_of = |p: f64| (height - mb) - (p / p_lo).ln() / (1.0 / p_lo).ln() * (height - mb - 20.0);

    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )?;
    writeln!(out, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>")?;
    writeln!(
        out,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        height - mb,
        width - 20.0,
        height - mb
    )?;
    writeln!(out, "<line x1=\"{ml}\" y1=\"20\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>", height - mb)?;
    writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">log t</text>",
        width / 2.0,
        height - 8.0
    )?;
    writeln!(out, "<text x=\"8\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12,{})\">log CCDF</text>", height / 2.0, height / 2.0)?;

    for (positive, color, h) in [(true, "#1f77b4", h_plus), (false, "#d62728", h_minus)] {
        let mut pts = String::new();
        for i in 0..60 {
            let t = (t_lo.ln() + (abs_max.ln() - t_lo.ln()) * i as f64 / 59.0).exp();
            let p = if positive { ccdf(&sorted, t) } else { lcdf(&sorted, -t) };
            if p > 0.0 {
                pts.push_str(&format!("{:.1},{:.1} ", x_of(t), y_of(p)));
            }
        }
        writeln!(
            out,
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
        )?;
        if h > 0.0 {
            let mut line = String::new();
            for i in 0..2 {
                let t = if i == 0 { t_lo } else { abs_max };
                let p = (h * t.powf(-alpha)).min(1.0).max(p_lo);
                line.push_str(&format!("{:.1},{:.1} ", x_of(t), y_of(p)));
            }
            writeln!(
                out,
                "<polyline points=\"{line}\" fill=\"none\" stroke=\"{color}\" stroke-dasharray=\"4,3\"/>"
            )?;
        }
    }
    writeln!(out, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::{CMagnitude, NLaw, QLaw};

    /// iid Pareto(alpha) by inverse transform: X = U^{-1/alpha}.
    fn pareto_samples(alpha: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = StreamRng::new(seed, 0);
        (0..n).map(|_| rng.uniform_pos().powf(-1.0 / alpha)).collect()
    }

    #[test]
    fn hill_recovers_pareto_two() {
        let xs = pareto_samples(2.0, 1_000_000, 42);
        let pts = hill_tail(&xs, TailSide::Right, &[10_000]).unwrap();
        assert!(
            pts[0].alpha > 1.9 && pts[0].alpha < 2.1,
            "hill estimate {}",
            pts[0].alpha
        );
    }

    #[test]
    fn hill_recovers_pareto_one() {
        let xs = pareto_samples(1.0, 1_000_000, 7);
        let pts = hill_tail(&xs, TailSide::Right, &[10_000]).unwrap();
        assert!(
            pts[0].alpha > 0.95 && pts[0].alpha < 1.05,
            "hill estimate {}",
            pts[0].alpha
        );
    }

    #[test]
    fn hill_flags_degenerate_input() {
        let xs = vec![3.0; 100];
        match hill_tail(&xs, TailSide::Right, &[10]) {
            Err(Error::ZeroLogSpacings) => {}
            other => panic!("expected ZeroLogSpacings, got {other:?}"),
        }
    }

    #[test]
    fn hill_reports_empty_tail() {
        let xs = vec![1.0, 2.0, 3.0];
        match hill_tail(&xs, TailSide::Left, &[2]) {
            Err(Error::TailEmpty { side: "left", available: 0, .. }) => {}
            other => panic!("expected TailEmpty, got {other:?}"),
        }
    }

    #[test]
    fn hill_scale_equivariant() {
        let xs = pareto_samples(1.5, 20_000, 3);
        let grid = [50, 200, 1000];
        let base = hill_tail(&xs, TailSide::Right, &grid).unwrap();
        // powers of two rescale mantissas exactly
        let scaled4: Vec<f64> = xs.iter().map(|x| 4.0 * x).collect();
        let s4 = hill_tail(&scaled4, TailSide::Right, &grid).unwrap();
        for (a, b) in base.iter().zip(s4.iter()) {
            assert_eq!(a.alpha, b.alpha);
        }
        let scaled3: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let s3 = hill_tail(&scaled3, TailSide::Right, &grid).unwrap();
        for (a, b) in base.iter().zip(s3.iter()) {
            assert!((a.alpha - b.alpha).abs() < 1e-12 * a.alpha);
        }
    }

    fn childless_law(q_neg_prob: f64) -> BranchingLaw {
        BranchingLaw::independent(
            NLaw::Det { k: 0 },
            CMagnitude::Det { value: 1.0 },
            0.0,
            QLaw::TwoPoint { a: 2.0, p_a: 1.0 - q_neg_prob, b: -1.0 },
        )
        .unwrap()
    }

    #[test]
    fn h_moment_collapses_to_q_moment_for_childless_law() {
        // N = 0 a.s.: the numerator is ((Q^+))^alpha, so
        // h_plus = E[(Q^+)^alpha] / (alpha mu) for any mu we inject.
        let law = childless_law(0.25);
        let r = vec![1.0; 1000]; // irrelevant: no children are ever drawn
        let alpha = 1.5;
        let mu = 0.8;
        let out = estimate_h_moment(&law, &r, alpha, mu, 200_000, 4).unwrap();
        let expect = law.closed_q_signed_moment(alpha, true).unwrap() / (alpha * mu);
        let hp = out.h_plus.unwrap();
        assert!(
            hp.ci_lo <= expect && expect <= hp.ci_hi,
            "expect {expect} in [{}, {}]",
            hp.ci_lo,
            hp.ci_hi
        );
    }

    #[test]
    fn h_moment_refuses_bad_mu() {
        let law = childless_law(0.25);
        match estimate_h_moment(&law, &[1.0], 1.5, 0.0, 10, 0) {
            Err(Error::NonpositiveMu { .. }) => {}
            other => panic!("expected NonpositiveMu, got {other:?}"),
        }
    }

    #[test]
    fn h_integral_rejects_short_grid() {
        let law = childless_law(0.25);
        match estimate_h_integral(&law, &[1.0, 2.0], 1.5, 0.8, &[1.0], 10, 0) {
            Err(Error::GridTooCoarse { len: 1 }) => {}
            other => panic!("expected GridTooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn h_integral_matches_moment_for_childless_law() {
        // with N = 0 both routes reduce to E[(Q^{+/-})^alpha]/(alpha mu):
        // the integral of v^{alpha-1} P(+/-Q > v) is exact up to quadrature
        let law = childless_law(0.25);
        let mut rng = StreamRng::new(9, 0);
        let r: Vec<f64> = (0..200_000).map(|_| law.sample_q(&mut rng)).collect();
        let alpha = 1.5;
        let mu = 0.8;
        let grid = default_v_grid(&r);
        let hi = estimate_h_integral(&law, &r, alpha, mu, &grid, 100_000, 5).unwrap();
        let hp = hi.constants.h_plus.unwrap();
        let expect_p = law.closed_q_signed_moment(alpha, true).unwrap() / (alpha * mu);
        assert!(
            (hp.value - expect_p).abs() < 0.02 * expect_p,
            "integral {} vs exact {}",
            hp.value,
            expect_p
        );
        let hm = hi.constants.h_minus.unwrap();
        let expect_m = law.closed_q_signed_moment(alpha, false).unwrap() / (alpha * mu);
        assert!(
            (hm.value - expect_m).abs() < 0.02 * expect_p,
            "integral {} vs exact {}",
            hm.value,
            expect_m
        );
    }

    #[test]
    fn goldie_integrand_childless_cumulative() {
        // N = 0: cumulative integral of g_+ equals E[(Q^+)^alpha]/alpha
        let law = childless_law(0.25);
        let mut rng = StreamRng::new(13, 0);
        let r: Vec<f64> = (0..100_000).map(|_| law.sample_q(&mut rng)).collect();
        let alpha = 1.5;
        // grid extends a decade past the support of Q (log 2 ~ 0.69); dense
        // because the integrand jumps at the atoms of Q
        let t_grid: Vec<f64> = (0..1200).map(|i| -8.0 + 11.0 * i as f64 / 1199.0).collect();
        let rows = goldie_integrand(&law, &r, alpha, &t_grid, 50_000, 2);
        let total = rows.last().unwrap().cum_abs_plus;
        let expect = law.closed_q_signed_moment(alpha, true).unwrap() / alpha;
        assert!(
            (total - expect).abs() < 0.02 * expect,
            "cumulative {total} vs {expect}"
        );
        let (share_p, _) = last_decade_share(&rows);
        assert!(share_p < 0.05, "last decade share {share_p}");
    }

    #[test]
    fn tail_table_flags_bulk_rows() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64 / 100.0).collect();
        let rows = tail_table(&xs, 2.0, 1.0, 1.0, &[1.0, 9.0]);
        assert_eq!(rows[0].flag, "pre-asymptotic"); // ccdf(1.0) = 0.9
        assert_eq!(rows[1].flag, "ok");
        assert!(rows[0].emp_ccdf_right > rows[0].ci_lo_r && rows[0].emp_ccdf_right < rows[0].ci_hi_r);
    }

    #[test]
    fn tail_table_model_columns() {
        let xs = vec![1.0, 2.0, 4.0, 8.0];
        let rows = tail_table(&xs, 2.0, 3.0, 1.5, &[2.0]);
        assert!((rows[0].model_right - 3.0 / 4.0).abs() < 1e-15);
        assert!((rows[0].model_left - 1.5 / 4.0).abs() < 1e-15);
        assert!((rows[0].emp_ccdf_right - 0.5).abs() < 1e-15);
        assert!((rows[0].ratio_right - 0.5 / 0.75).abs() < 1e-15);
    }

    #[test]
    fn thresholds_hit_requested_exceedance_band() {
        let xs = pareto_samples(2.0, 100_000, 17);
        let ths = thresholds_by_exceedance(&xs, 100, 1000, 8);
        assert_eq!(ths.len(), 8);
        assert!(ths.windows(2).all(|w| w[1] > w[0]));
        let mut sorted: Vec<f64> = xs.clone();
        sorted.sort_by(f64::total_cmp);
        for &t in &ths {
            let count = sorted.iter().filter(|&&x| x > t).count();
            assert!((90..=1100).contains(&count), "count {count} at t {t}");
        }
    }

    #[test]
    fn svg_emission_is_wellformed() {
        let xs = pareto_samples(2.0, 5_000, 3);
        let mut buf = Vec::new();
        write_ccdf_svg(&xs, 2.0, 1.0, 0.5, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(text.contains("polyline"));
    }

    #[test]
    fn hill_csv_merges_sides() {
        let right = vec![HillPoint { k: 10, alpha: 2.0 }, HillPoint { k: 20, alpha: 2.1 }];
        let left = vec![HillPoint { k: 10, alpha: 1.9 }];
        let mut buf = Vec::new();
        write_hill_csv(Some(&right), Some(&left), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("10,"));
        assert!(lines[2].ends_with(","), "left column empty at k=20: {}", lines[2]);
    }
}
