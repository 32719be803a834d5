//! The moment function rho_beta = E[sum |C_i|^beta], the tilted mean
//! mu = E[sum |C_i|^alpha log|C_i|], the Cramer root rho_alpha = 1, and
//! Monte Carlo checks of the per-generation moment identities and bounds.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::law::BranchingLaw;
use crate::rng::StreamRng;
use crate::treesim::{self, SimOptions};

/// 99% and 99.9% two-sided normal quantiles.
pub const Z_99: f64 = 2.575_829_303_548_900_4;
pub const Z_999: f64 = 3.290_526_731_491_925_5;

/// A point estimate with a symmetric confidence interval. `exact` marks
/// closed-form values (zero-width interval).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub exact: bool,
}

impl Estimate {
    fn exact(value: f64) -> Self {
        Estimate { value, ci_lo: value, ci_hi: value, exact: true }
    }

    fn from_moments(sum: f64, sumsq: f64, n: u64, z: f64) -> Self {
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let half = z * (var / n as f64).sqrt();
        Estimate { value: mean, ci_lo: mean - half, ci_hi: mean + half, exact: false }
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_hi - self.ci_lo) / 2.0
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_lo <= x && x <= self.ci_hi
    }
}

fn sum_abs_pow(c: &[f64], beta: f64) -> f64 {
    c.iter()
        .map(|&x| {
            let a = x.abs();
            if a == 0.0 {
                0.0
            } else {
                a.powf(beta)
            }
        })
        .sum()
}

fn sum_abs_pow_log(c: &[f64], alpha: f64) -> f64 {
    c.iter()
        .map(|&x| {
            let a = x.abs();
            if a == 0.0 {
                0.0
            } else {
                a.powf(alpha) * a.ln()
            }
        })
        .sum()
}

/// Monte Carlo estimate of rho_beta over `count` vector draws, 99% CI.
pub fn rho_mc(law: &BranchingLaw, beta: f64, count: u64, seed: u64, stream: u64) -> Estimate {
    let mut rng = StreamRng::new(seed, stream);
    let mut buf = Vec::new();
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..count {
        law.sample_vector_into(&mut rng, &mut buf);
        let s = sum_abs_pow(&buf, beta);
        sum += s;
        sumsq += s * s;
    }
    Estimate::from_moments(sum, sumsq, count, Z_99)
}

/// Monte Carlo estimate of mu(alpha) over `count` vector draws, 99% CI.
pub fn mu_mc(law: &BranchingLaw, alpha: f64, count: u64, seed: u64, stream: u64) -> Estimate {
    let mut rng = StreamRng::new(seed, stream);
    let mut buf = Vec::new();
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..count {
        law.sample_vector_into(&mut rng, &mut buf);
        let s = sum_abs_pow_log(&buf, alpha);
        sum += s;
        sumsq += s * s;
    }
    Estimate::from_moments(sum, sumsq, count, Z_99)
}

/// rho_beta with the closed form substituted when it exists.
pub fn rho_estimate(law: &BranchingLaw, beta: f64, count: u64, seed: u64) -> Estimate {
    match law.closed_rho(beta) {
        Some(v) => Estimate::exact(v),
        None => rho_mc(law, beta, count, seed, 0),
    }
}

/// mu(alpha) with the closed form substituted when it exists.
pub fn mu_estimate(law: &BranchingLaw, alpha: f64, count: u64, seed: u64) -> Estimate {
    match law.closed_mu(alpha) {
        Some(v) => Estimate::exact(v),
        None => mu_mc(law, alpha, count, seed, 0),
    }
}

// ---------------------------------------------------------------------------
// Root solving: rho_alpha = 1 with mu > 0
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, Serialize)]
pub struct AlphaResult {
    pub alpha: f64,
    pub mu: f64,
    pub method: SolveMode,
    pub evaluations: u64,
}

const SCAN_POINTS: usize = 256;
const MC_SOLVE_STREAM_BASE: u64 = 1 << 32;

/// Solve rho_alpha = 1 for the up-crossing root (the one with mu > 0) inside
/// `bracket`. Closed-form laws refine with Brent-style iteration to `tol`;
/// Monte Carlo mode bisects with CI-aware comparisons and reports when the
/// sampling noise at the root exceeds `tol`.
pub fn solve_alpha(
    law: &BranchingLaw,
    bracket: (f64, f64),
    tol: f64,
    mode: SolveMode,
    mc_count: u64,
    seed: u64,
) -> Result<AlphaResult> {
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::invalid_config("bracket", format!("need 0 < lo < hi, got [{lo}, {hi}]")));
    }
    match mode {
        SolveMode::Exact => {
            let rho = |a: f64| {
                law.closed_rho(a)
                    .ok_or_else(|| Error::invalid_config("mode", "law has no closed-form rho; use mc mode"))
            };
            let mut evals: u64 = 0;
            let mut f = |a: f64| -> Result<f64> {
                evals += 1;
                Ok(rho(a)? - 1.0)
            };
            // scan log-spaced for sign changes
            let grid: Vec<f64> = (0..=SCAN_POINTS)
                .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / SCAN_POINTS as f64).exp())
                .collect();
            let mut prev = f(grid[0])?;
            let mut up: Option<(f64, f64)> = None;
            let mut down: Option<(f64, f64)> = None;
            for w in grid.windows(2) {
                let cur = f(w[1])?;
                if prev <= 0.0 && cur > 0.0 && up.is_none() {
                    up = Some((w[0], w[1]));
                }
                if prev >= 0.0 && cur < 0.0 && down.is_none() {
                    down = Some((w[0], w[1]));
                }
                prev = cur;
            }
            if let Some((a, b)) = up {
                let root = brent(&mut f, a, b, tol)?;
                let mu = law.closed_mu(root).expect("closed rho implies closed mu");
                if mu > 0.0 {
                    return Ok(AlphaResult { alpha: root, mu, method: SolveMode::Exact, evaluations: evals });
                }
                return Err(Error::RootHasNonpositiveMu { alpha: root, mu });
            }
            if let Some((a, b)) = down {
                let root = brent(&mut f, a, b, tol)?;
                let mu = law.closed_mu(root).expect("closed rho implies closed mu");
                return Err(Error::RootHasNonpositiveMu { alpha: root, mu });
            }
            Err(Error::NoRootInBracket { lo, hi })
        }
        SolveMode::MonteCarlo => solve_alpha_mc(law, lo, hi, tol, mc_count, seed),
    }
}

fn solve_alpha_mc(
    law: &BranchingLaw,
    lo: f64,
    hi: f64,
    tol: f64,
    count: u64,
    seed: u64,
) -> Result<AlphaResult> {
    let mut evals: u64 = 0;
    let mut estimate = |a: f64| -> Estimate {
        let e = rho_mc(law, a, count, seed, MC_SOLVE_STREAM_BASE + evals);
        evals += 1;
        e
    };
    // coarse scan on point estimates for the last down-to-up transition
    let scan = 16usize;
    let grid: Vec<f64> = (0..=scan)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / scan as f64).exp())
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&a| estimate(a).value - 1.0).collect();
    let mut bracket: Option<(f64, f64)> = None;
    for i in 0..scan {
        if vals[i] <= 0.0 && vals[i + 1] > 0.0 {
            bracket = Some((grid[i], grid[i + 1]));
        }
    }
    let (mut a, mut b) = match bracket {
        Some(x) => x,
        None => {
            // no up-crossing; if there is a down-crossing, name it
            for i in 0..scan {
                if vals[i] >= 0.0 && vals[i + 1] < 0.0 {
                    let alpha = 0.5 * (grid[i] + grid[i + 1]);
                    let mu = mu_mc(law, alpha, count, seed, MC_SOLVE_STREAM_BASE + 4096).value;
                    return Err(Error::RootHasNonpositiveMu { alpha, mu });
                }
            }
            return Err(Error::NoRootInBracket { lo, hi });
        }
    };
    let mut last_noise = 0.0;
    while b - a > tol {
        let mid = 0.5 * (a + b);
        let est = estimate(mid);
        if est.ci_lo > 1.0 {
            b = mid;
        } else if est.ci_hi < 1.0 {
            a = mid;
        } else {
            // the interval straddles 1: we are within sampling noise of the
            // root; translate the rho noise into alpha units via mu
            let mu_est = mu_mc(law, mid, count, seed, MC_SOLVE_STREAM_BASE + 8192 + evals);
            let slope = mu_est.value.max(f64::EPSILON);
            last_noise = est.half_width() / slope;
            if last_noise <= tol {
                if mu_est.value <= 0.0 {
                    return Err(Error::RootHasNonpositiveMu { alpha: mid, mu: mu_est.value });
                }
                return Ok(AlphaResult {
                    alpha: mid,
                    mu: mu_est.value,
                    method: SolveMode::MonteCarlo,
                    evaluations: evals,
                });
            }
            return Err(Error::McNoiseExceedsTol { alpha: mid, noise: last_noise, tol });
        }
    }
    let alpha = 0.5 * (a + b);
    let mu_est = mu_mc(law, alpha, count, seed, MC_SOLVE_STREAM_BASE + 8192 + evals);
    let _ = last_noise;
    if mu_est.value <= 0.0 {
        return Err(Error::RootHasNonpositiveMu { alpha, mu: mu_est.value });
    }
    Ok(AlphaResult { alpha, mu: mu_est.value, method: SolveMode::MonteCarlo, evaluations: evals })
}

/// Brent-style root refinement on a bracketing interval [a, b].
fn brent<F: FnMut(f64) -> Result<f64>>(f: &mut F, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa * fb > 0.0 {
        return Err(Error::NoRootInBracket { lo: a, hi: b });
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let (mut c, mut fc) = (a, fa);
    let mut mflag = true;
    let mut d = c;
    for _ in 0..200 {
        if fb == 0.0 || (b - a).abs() < tol {
            return Ok(b);
        }
        let mut s = if fa != fc && fb != fc {
            // inverse quadratic interpolation
            a * fb * fc / ((fa - fb) * (fa - fc))
                + b * fa * fc / ((fb - fa) * (fb - fc))
                + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };
        let lo = (3.0 * a + b) / 4.0;
        let cond = !((lo.min(b) < s && s < lo.max(b))
            && (!mflag || (s - b).abs() < (b - c).abs() / 2.0)
            && (mflag || (s - b).abs() < (c - d).abs() / 2.0));
        if cond {
            s = 0.5 * (a + b);
            mflag = true;
        } else {
            mflag = false;
        }
        let fs = f(s)?;
        d = c;
        c = b;
        fc = fb;
        if fa * fs < 0.0 {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// Generation-moment checks
// ---------------------------------------------------------------------------

/// One row of the Pi-moment identity table: the Monte Carlo estimate of
/// E[sum_{A_n} |Pi|^beta] against the exact value rho_beta^n.
#[derive(Clone, Debug, Serialize)]
pub struct PiMomentRow {
    pub n: usize,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub expected: f64,
    pub pass: bool,
}

pub fn pi_moment_check(
    law: &BranchingLaw,
    beta: f64,
    n_max: usize,
    count: u64,
    seed: u64,
    opts: &SimOptions,
) -> Result<Vec<PiMomentRow>> {
    let rho = rho_estimate(law, beta, count, seed).value;
    let mut sums = vec![0.0f64; n_max + 1];
    let mut sumsqs = vec![0.0f64; n_max + 1];
    let mut rng = StreamRng::new(seed, 1);
    for _ in 0..count {
        let per_gen = treesim::pi_beta_generation_sums(law, n_max, beta, &mut rng, opts)?;
        for (n, s) in per_gen.iter().enumerate() {
            sums[n] += s;
            sumsqs[n] += s * s;
        }
    }
    Ok((0..=n_max)
        .map(|n| {
            let est = Estimate::from_moments(sums[n], sumsqs[n], count, Z_999);
            let expected = rho.powi(n as i32);
            // floating-point floor so degenerate (zero-variance) rows pass
            let tol = est.half_width() + 1e-12 * expected.abs().max(1.0);
            PiMomentRow {
                n,
                estimate: est.value,
                ci_lo: est.ci_lo,
                ci_hi: est.ci_hi,
                expected,
                pass: (est.value - expected).abs() <= tol,
            }
        })
        .collect())
}

/// One row of the W-moment bound table. For beta <= 1 the bound is the exact
/// Lemma value E[|Q|^beta] rho_beta^n; for beta > 1 the geometric rate
/// (rho v rho_beta)^n is checked with the constant fitted on the first half
/// of the rows, which is the testable content of the bound.
#[derive(Clone, Debug, Serialize)]
pub struct WnBoundRow {
    pub n: usize,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn wn_bound_check(
    law: &BranchingLaw,
    beta: f64,
    n_max: usize,
    count: u64,
    seed: u64,
    opts: &SimOptions,
) -> Result<Vec<WnBoundRow>> {
    if !(beta > 0.0) {
        return Err(Error::invalid_config("beta", format!("must be > 0, got {beta}")));
    }
    let mut sums = vec![0.0f64; n_max + 1];
    let mut sumsqs = vec![0.0f64; n_max + 1];
    let mut rng = StreamRng::new(seed, 2);
    for _ in 0..count {
        let trace = treesim::generation_trace(law, n_max, &mut rng, opts)?;
        for (n, w) in trace.w.iter().enumerate() {
            let a = w.abs();
            let s = if a == 0.0 { 0.0 } else { a.powf(beta) };
            sums[n] += s;
            sumsqs[n] += s * s;
        }
    }
    let ests: Vec<Estimate> = (0..=n_max)
        .map(|n| Estimate::from_moments(sums[n], sumsqs[n], count, Z_99))
        .collect();

    if beta <= 1.0 {
        let rho = rho_estimate(law, beta, count, seed).value;
        let q_moment = law
            .closed_q_abs_moment(beta)
            .unwrap_or_else(|| q_abs_moment_mc(law, beta, count, seed));
        Ok(ests
            .iter()
            .enumerate()
            .map(|(n, est)| {
                let bound = q_moment * rho.powi(n as i32);
                WnBoundRow {
                    n,
                    estimate: est.value,
                    ci_lo: est.ci_lo,
                    ci_hi: est.ci_hi,
                    bound,
                    pass: est.value - 3.0 * est.half_width() <= bound,
                }
            })
            .collect())
    } else {
        let rho1 = rho_estimate(law, 1.0, count, seed).value;
        let rho_b = rho_estimate(law, beta, count, seed).value;
        let rate = rho1.max(rho_b);
        if rate >= 1.0 {
            return Err(Error::ContractivityViolated { rho: rate });
        }
        let half_rows = (n_max / 2).max(1);
        let mut k_fit = 0.0f64;
        for (n, est) in ests.iter().enumerate().skip(1).take(half_rows) {
            k_fit = k_fit.max(est.value / rate.powi(n as i32));
        }
        Ok(ests
            .iter()
            .enumerate()
            .map(|(n, est)| {
                let bound = if n == 0 { est.value.max(k_fit) } else { k_fit * rate.powi(n as i32) };
                let pass = n <= half_rows || est.value - 3.0 * est.half_width() <= bound;
                WnBoundRow {
                    n,
                    estimate: est.value,
                    ci_lo: est.ci_lo,
                    ci_hi: est.ci_hi,
                    bound,
                    pass,
                }
            })
            .collect())
    }
}

fn q_abs_moment_mc(law: &BranchingLaw, beta: f64, count: u64, seed: u64) -> f64 {
    let mut rng = StreamRng::new(seed, 3);
    let mut sum = 0.0;
    for _ in 0..count {
        let a = law.sample_q(&mut rng).abs();
        sum += if a == 0.0 { 0.0 } else { a.powf(beta) };
    }
    sum / count as f64
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct MomentReport {
    pub beta_grid: Vec<f64>,
    pub rho: Vec<Estimate>,
    pub alpha_star: Option<AlphaResult>,
}

pub fn moment_report(
    law: &BranchingLaw,
    beta_grid: &[f64],
    count: u64,
    seed: u64,
    bracket: (f64, f64),
    tol: f64,
    mode: SolveMode,
) -> MomentReport {
    let rho = beta_grid
        .iter()
        .map(|&b| rho_estimate(law, b, count, seed))
        .collect();
    let alpha_star = solve_alpha(law, bracket, tol, mode, count, seed).ok();
    MomentReport { beta_grid: beta_grid.to_vec(), rho, alpha_star }
}

/// Moment CSV: `beta,rho,ci_lo,ci_hi,exact_flag`.
pub fn write_moment_csv<W: std::io::Write>(report: &MomentReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "beta,rho,ci_lo,ci_hi,exact_flag")?;
    for (b, e) in report.beta_grid.iter().zip(report.rho.iter()) {
        writeln!(
            out,
            "{b},{:.16e},{:.16e},{:.16e},{}",
            e.value,
            e.ci_lo,
            e.ci_hi,
            if e.exact { 1 } else { 0 }
        )?;
    }
    Ok(())
}
