//! Weighted branching tree construction and sampling of the truncated
//! solution R^(n) = sum_{k<=n} W_k.
//!
//! Two samplers are provided: a forward generation-by-generation walk that
//! records per-generation diagnostics (populations Z_n, signed sums W_n,
//! absolute path-weight sums), and a backward depth-first recursion that
//! produces one R^(n) realization in O(tree) time and O(depth) memory.
//! Both have the same law.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::law::{BranchingLaw, Dependence};
use crate::rng::StreamRng;

pub const DEFAULT_NODE_CAP: u64 = 100_000_000;

#[derive(Clone, Debug)]
pub struct SimOptions {
    /// Per-sample cap on visited nodes; supercritical laws grow exponentially
    /// and the cap converts a hang into a diagnosable failure.
    pub node_cap: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { node_cap: DEFAULT_NODE_CAP }
    }
}

/// Per-generation diagnostics of one tree realization.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub z: Vec<u64>,
    pub w: Vec<f64>,
    pub abs_pi_sum: Vec<f64>,
    pub max_abs_pi: Vec<f64>,
}

/// A reproducible batch of iid R^(n) realizations.
#[derive(Clone, Debug, Serialize)]
pub struct SampleBatch {
    pub depth: usize,
    pub count: usize,
    pub seed: u64,
    pub stream_count: usize,
    pub law_fingerprint: String,
    pub values: Vec<f64>,
}

/// Compensated (Kahan) accumulator; generation sums must hold identities at
/// the 1e-12 level even for wide generations.
#[derive(Clone, Copy, Debug, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum
    }
}

struct Walk {
    z: Vec<u64>,
    w: Vec<f64>,
    abs_pi_sum: Vec<f64>,
    max_abs_pi: Vec<f64>,
    pi_beta_sum: Vec<f64>,
}

/// Forward walk over generations 0..=depth. Per node the draw order is the
/// sample_vector order (q, n, c_1..c_n); nodes of the last generation only
/// draw q since their offspring are never expanded.
fn forward_walk(
    law: &BranchingLaw,
    depth: usize,
    rng: &mut StreamRng,
    opts: &SimOptions,
    beta: Option<f64>,
) -> Result<Walk> {
    let mut z = Vec::with_capacity(depth + 1);
    let mut w = Vec::with_capacity(depth + 1);
    let mut abs_sum = Vec::with_capacity(depth + 1);
    let mut max_abs = Vec::with_capacity(depth + 1);
    let mut beta_sum = Vec::with_capacity(depth + 1);

    let mut gen: Vec<f64> = vec![1.0]; // signed path weights of the current generation
    let mut visited: u64 = 0;

    for level in 0..=depth {
        let mut wk = Kahan::default();
        let mut ak = Kahan::default();
        let mut bk = Kahan::default();
        let mut mx = 0.0f64;
        let last = level == depth;
        let mut next: Vec<f64> = Vec::new();

        for &pi in &gen {
            visited += 1;
            if visited > opts.node_cap {
                return Err(Error::TreeTooLarge { nodes: visited, cap: opts.node_cap });
            }
            let a = pi.abs();
            ak.add(a);
            if let Some(b) = beta {
                bk.add(if a == 0.0 { 0.0 } else { a.powf(b) });
            }
            mx = mx.max(a);

            if last {
                let q = law.sample_q(rng);
                wk.add(q * pi);
            } else {
                match &law.dependence {
                    Dependence::Independent(ind) => {
                        let q = ind.q.sample(rng);
                        wk.add(q * pi);
                        let n = ind.n.sample(rng);
                        next.reserve(n as usize);
                        for _ in 0..n {
                            next.push(ind.sample_weight(rng) * pi);
                        }
                    }
                    Dependence::JointTable(rows) => {
                        let mut u = rng.uniform();
                        let mut chosen = rows.last().expect("non-empty");
                        for row in rows {
                            if u < row.p {
                                chosen = row;
                                break;
                            }
                            u -= row.p;
                        }
                        wk.add(chosen.q * pi);
                        next.reserve(chosen.c.len());
                        for &c in &chosen.c {
                            next.push(c * pi);
                        }
                    }
                }
            }
        }

        z.push(gen.len() as u64);
        w.push(wk.value());
        abs_sum.push(ak.value());
        max_abs.push(mx);
        beta_sum.push(bk.value());
        gen = next;
    }

    Ok(Walk { z, w, abs_pi_sum: abs_sum, max_abs_pi: max_abs, pi_beta_sum: beta_sum })
}

/// One forward-constructed tree realization with per-generation diagnostics.
pub fn generation_trace(
    law: &BranchingLaw,
    depth: usize,
    rng: &mut StreamRng,
    opts: &SimOptions,
) -> Result<GenerationTrace> {
    let walk = forward_walk(law, depth, rng, opts, None)?;
    Ok(GenerationTrace {
        z: walk.z,
        w: walk.w,
        abs_pi_sum: walk.abs_pi_sum,
        max_abs_pi: walk.max_abs_pi,
    })
}

/// Per-generation sums sum_{i in A_n} |Pi_i|^beta for n = 0..=depth.
pub fn pi_beta_generation_sums(
    law: &BranchingLaw,
    depth: usize,
    beta: f64,
    rng: &mut StreamRng,
    opts: &SimOptions,
) -> Result<Vec<f64>> {
    Ok(forward_walk(law, depth, rng, opts, Some(beta))?.pi_beta_sum)
}

/// One realization of R^(depth) by backward depth-first recursion
/// (leaf value R^(0) = Q).
pub fn iterate_r(
    law: &BranchingLaw,
    depth: usize,
    rng: &mut StreamRng,
    opts: &SimOptions,
) -> Result<f64> {
    let mut visited: u64 = 0;
    match &law.dependence {
        Dependence::Independent(ind) => rec_independent(ind, depth, rng, &mut visited, opts.node_cap),
        Dependence::JointTable(rows) => rec_joint(rows, depth, rng, &mut visited, opts.node_cap),
    }
}

fn rec_independent(
    ind: &crate::law::IndependentLaw,
    depth: usize,
    rng: &mut StreamRng,
    visited: &mut u64,
    cap: u64,
) -> Result<f64> {
    *visited += 1;
    if *visited > cap {
        return Err(Error::TreeTooLarge { nodes: *visited, cap });
    }
    let q = ind.q.sample(rng);
    if depth == 0 {
        return Ok(q);
    }
    let n = ind.n.sample(rng);
    let mut acc = q;
    for _ in 0..n {
        let c = ind.sample_weight(rng);
        acc += c * rec_independent(ind, depth - 1, rng, visited, cap)?;
    }
    Ok(acc)
}

fn rec_joint(
    rows: &[crate::law::JointRow],
    depth: usize,
    rng: &mut StreamRng,
    visited: &mut u64,
    cap: u64,
) -> Result<f64> {
    *visited += 1;
    if *visited > cap {
        return Err(Error::TreeTooLarge { nodes: *visited, cap });
    }
    let mut u = rng.uniform();
    let mut row = rows.last().expect("non-empty");
    for r in rows {
        if u < r.p {
            row = r;
            break;
        }
        u -= r.p;
    }
    if depth == 0 {
        return Ok(row.q);
    }
    let mut acc = row.q;
    for &c in &row.c {
        acc += c * rec_joint(rows, depth - 1, rng, visited, cap)?;
    }
    Ok(acc)
}

/// `count` iid realizations of R^(depth), partitioned round-robin across
/// `stream_count` independent streams. Sample i is the (i / stream_count)-th
/// draw of stream (i mod stream_count), so output bytes depend only on
/// (law, depth, count, seed, stream_count), never on thread scheduling.
pub fn batch_r(
    law: &BranchingLaw,
    depth: usize,
    count: usize,
    seed: u64,
    stream_count: usize,
    opts: &SimOptions,
) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let streams = stream_count.max(1);
    let per_stream: Vec<Result<Vec<f64>>> = (0..streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = StreamRng::new(seed, s as u64);
            let quota = count / streams + usize::from(s < count % streams);
            let mut out = Vec::with_capacity(quota);
            for _ in 0..quota {
                out.push(iterate_r(law, depth, &mut rng, opts)?);
            }
            Ok(out)
        })
        .collect();

    let mut values = vec![0.0f64; count];
    for (s, result) in per_stream.into_iter().enumerate() {
        for (j, v) in result?.into_iter().enumerate() {
            values[s + j * streams] = v;
        }
    }
    Ok(SampleBatch {
        depth,
        count,
        seed,
        stream_count: streams,
        law_fingerprint: law.fingerprint().to_string(),
        values,
    })
}

/// Upper bound on P(sup_{m>n} |R^(m) - R^(n)| > epsilon) for beta in (0, 1]:
/// E[|Q|^beta] rho_beta^{n+1} / (epsilon^beta (1 - rho_beta)), clamped to [0, 1].
pub fn truncation_bound(
    q_moment: f64,
    rho_beta: f64,
    beta: f64,
    depth: usize,
    epsilon: f64,
) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid_config("beta", format!("must lie in (0, 1], got {beta}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid_config("epsilon", format!("must be > 0, got {epsilon}")));
    }
    if rho_beta >= 1.0 {
        return Err(Error::ContractivityViolated { rho: rho_beta });
    }
    let raw = q_moment * rho_beta.powi(depth as i32 + 1) / (epsilon.powf(beta) * (1.0 - rho_beta));
    Ok(raw.clamp(0.0, 1.0))
}

/// Outcome of automatic truncation-depth selection.
#[derive(Clone, Debug, Serialize)]
pub struct DepthChoice {
    pub depth: usize,
    pub beta: f64,
    pub rho_beta: f64,
    pub q_abs_moment: f64,
    pub bound: f64,
}

const DEPTH_SEARCH_LIMIT: usize = 100_000;

/// Smallest depth n with truncation_bound <= delta. When `beta` is absent it
/// is chosen from the grid {0.1, ..., 1.0} to minimize the resulting depth.
/// E[|Q|^beta] falls back to a fixed-size Monte Carlo estimate (200k draws on
/// a stream derived from `seed`) when no closed form exists.
pub fn pick_depth(
    law: &BranchingLaw,
    beta: Option<f64>,
    epsilon: f64,
    delta: f64,
    seed: u64,
) -> Result<DepthChoice> {
    let betas: Vec<f64> = match beta {
        Some(b) => vec![b],
        None => (1..=10).map(|i| i as f64 / 10.0).collect(),
    };
    let mut best: Option<DepthChoice> = None;
    for b in betas {
        if !(b > 0.0 && b <= 1.0) {
            return Err(Error::invalid_config("beta", format!("must lie in (0, 1], got {b}")));
        }
        let rho = match law.closed_rho(b) {
            Some(r) => r,
            None => mc_rho(law, b, seed),
        };
        if rho >= 1.0 {
            continue;
        }
        let q_moment = law
            .closed_q_abs_moment(b)
            .unwrap_or_else(|| mc_q_abs_moment(law, b, seed));
        let mut depth = 0usize;
        let mut found = None;
        while depth <= DEPTH_SEARCH_LIMIT {
            let bound = truncation_bound(q_moment, rho, b, depth, epsilon)?;
            if bound <= delta {
                found = Some(DepthChoice { depth, beta: b, rho_beta: rho, q_abs_moment: q_moment, bound });
                break;
            }
            depth += 1;
        }
        if let Some(choice) = found {
            let better = match &best {
                None => true,
                Some(cur) => choice.depth < cur.depth,
            };
            if better {
                best = Some(choice);
            }
        }
    }
    best.ok_or(Error::NoContractiveBeta)
}

const MC_MOMENT_DRAWS: u64 = 200_000;
/// Reserved stream ids for internal moment fallbacks.
const STREAM_Q_MOMENT: u64 = u64::MAX - 1;
const STREAM_RHO: u64 = u64::MAX - 2;

fn mc_q_abs_moment(law: &BranchingLaw, beta: f64, seed: u64) -> f64 {
    let mut rng = StreamRng::new(seed, STREAM_Q_MOMENT);
    let mut acc = Kahan::default();
    for _ in 0..MC_MOMENT_DRAWS {
        let q = law.sample_q(&mut rng).abs();
        acc.add(if q == 0.0 { 0.0 } else { q.powf(beta) });
    }
    acc.value() / MC_MOMENT_DRAWS as f64
}

fn mc_rho(law: &BranchingLaw, beta: f64, seed: u64) -> f64 {
    let mut rng = StreamRng::new(seed, STREAM_RHO);
    let mut buf = Vec::new();
    let mut acc = Kahan::default();
    for _ in 0..MC_MOMENT_DRAWS {
        law.sample_vector_into(&mut rng, &mut buf);
        let s: f64 = buf
            .iter()
            .map(|&c| {
                let a = c.abs();
                if a == 0.0 {
                    0.0
                } else {
                    a.powf(beta)
                }
            })
            .sum();
        acc.add(s);
    }
    acc.value() / MC_MOMENT_DRAWS as f64
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// Sample dump: `index,value`, decimals carrying 17 significant digits so the
/// round trip through text is exact.
pub fn write_samples_csv<W: std::io::Write>(batch: &SampleBatch, mut out: W) -> std::io::Result<()> {
    writeln!(out, "index,value")?;
    for (i, v) in batch.values.iter().enumerate() {
        writeln!(out, "{i},{v:.16e}")?;
    }
    Ok(())
}

pub fn read_samples_csv<R: std::io::BufRead>(input: R) -> std::io::Result<Vec<f64>> {
    let mut values = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let field = line.split(',').nth(1).ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad row: {line}"))
        })?;
        let v: f64 = field.trim().parse().map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad value `{field}`: {e}"))
        })?;
        values.push(v);
    }
    Ok(values)
}

pub fn write_trace_csv<W: std::io::Write>(trace: &GenerationTrace, mut out: W) -> std::io::Result<()> {
    writeln!(out, "generation,z,w,abs_pi_sum,max_abs_pi")?;
    for i in 0..trace.z.len() {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e}",
            i, trace.z[i], trace.w[i], trace.abs_pi_sum[i], trace.max_abs_pi[i]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::{CMagnitude, NLaw, QLaw};

    fn law(n: u64, c: f64, q_neg: f64, q: f64) -> BranchingLaw {
        BranchingLaw::independent(
            NLaw::Det { k: n },
            CMagnitude::Det { value: c },
            q_neg,
            QLaw::Det { value: q },
        )
        .unwrap()
    }

    #[test]
    fn trace_single_path_geometric_weights() {
        let law = law(1, 0.5, 0.0, 1.0);
        let mut rng = StreamRng::new(0, 0);
        let t = generation_trace(&law, 3, &mut rng, &SimOptions::default()).unwrap();
        assert_eq!(t.z, vec![1, 1, 1, 1]);
        assert_eq!(t.w, vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(t.abs_pi_sum, vec![1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn trace_childless_root() {
        let law = law(0, 1.0, 0.0, 5.0);
        let mut rng = StreamRng::new(0, 0);
        let t = generation_trace(&law, 2, &mut rng, &SimOptions::default()).unwrap();
        assert_eq!(t.z, vec![1, 0, 0]);
        assert_eq!(t.w, vec![5.0, 0.0, 0.0]);
    }

    #[test]
    fn trace_binary_tree_unit_weights() {
        let law = law(2, 1.0, 0.0, 1.0);
        let mut rng = StreamRng::new(0, 0);
        let t = generation_trace(&law, 2, &mut rng, &SimOptions::default()).unwrap();
        assert_eq!(t.z, vec![1, 2, 4]);
        assert_eq!(t.w, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn iterate_r_geometric_series() {
        let law = law(1, 0.5, 0.0, 1.0);
        let opts = SimOptions::default();
        let mut rng = StreamRng::new(0, 0);
        assert_eq!(iterate_r(&law, 3, &mut rng, &opts).unwrap(), 1.875);
        let exact = 2.0 - 2f64.powi(-20);
        let got = iterate_r(&law, 20, &mut rng, &opts).unwrap();
        assert!((got - exact).abs() <= 1e-12);
    }

    #[test]
    fn iterate_r_alternating_series() {
        let law = law(1, 0.5, 1.0, 1.0); // q_neg = 1: C = -1/2 always
        let mut rng = StreamRng::new(0, 0);
        let got = iterate_r(&law, 3, &mut rng, &SimOptions::default()).unwrap();
        assert!((got - 0.625).abs() <= 1e-15);
    }

    #[test]
    fn iterate_r_depth_zero_is_q_draw() {
        let law = law(3, 0.5, 0.0, 7.0);
        let mut rng = StreamRng::new(0, 0);
        assert_eq!(iterate_r(&law, 0, &mut rng, &SimOptions::default()).unwrap(), 7.0);
    }

    #[test]
    fn batch_is_deterministic_and_constant_for_deterministic_law() {
        let law = law(1, 0.5, 0.0, 1.0);
        let opts = SimOptions::default();
        let exact = 2.0 - 2f64.powi(-20);
        let a = batch_r(&law, 20, 5, 9, 2, &opts).unwrap();
        let b = batch_r(&law, 20, 5, 9, 2, &opts).unwrap();
        assert_eq!(a.values, b.values);
        for v in &a.values {
            assert_eq!(*v, exact);
        }
    }

    #[test]
    fn batch_bytes_stable_across_stream_counts_only_by_contract() {
        // Same (seed, stream_count) must agree; a different stream count is a
        // different partition and may differ.
        let law = BranchingLaw::independent(
            NLaw::Det { k: 1 },
            CMagnitude::TwoPoint { a: 2.0, p_a: 0.3, b: 0.5 },
            0.5,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let opts = SimOptions::default();
        let a = batch_r(&law, 6, 101, 1234, 4, &opts).unwrap();
        let b = batch_r(&law, 6, 101, 1234, 4, &opts).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn node_cap_aborts_supercritical_tree() {
        let law = law(2, 1.0, 0.0, 1.0);
        let opts = SimOptions { node_cap: 10 };
        let mut rng = StreamRng::new(0, 0);
        match iterate_r(&law, 10, &mut rng, &opts) {
            Err(Error::TreeTooLarge { cap: 10, .. }) => {}
            other => panic!("expected TreeTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn truncation_bound_hand_value() {
        let b = truncation_bound(1.0, 0.5, 1.0, 10, 0.1).unwrap();
        assert!((b - 0.009765625).abs() < 1e-15);
    }

    #[test]
    fn truncation_bound_vanishes_for_large_epsilon() {
        let b = truncation_bound(1.0, 0.5, 1.0, 10, 1e12).unwrap();
        assert!(b < 1e-12);
    }

    #[test]
    fn truncation_bound_rejects_rho_one() {
        match truncation_bound(1.0, 1.0, 1.0, 10, 0.1) {
            Err(Error::ContractivityViolated { .. }) => {}
            other => panic!("expected ContractivityViolated, got {other:?}"),
        }
    }

    #[test]
    fn pick_depth_matches_direct_search() {
        let law = law(1, 0.5, 0.0, 1.0);
        let choice = pick_depth(&law, Some(1.0), 0.1, 0.01, 0).unwrap();
        assert_eq!(choice.depth, 10);

        // vacuous bound
        let choice = pick_depth(&law, Some(1.0), 0.1, 1.0, 0).unwrap();
        assert_eq!(choice.depth, 0);
    }

    #[test]
    fn pick_depth_slow_contraction_still_finite() {
        let law = law(1, 0.99, 0.0, 1.0);
        let choice = pick_depth(&law, Some(1.0), 0.01, 1e-6, 0).unwrap();
        assert!(choice.depth > 100 && choice.depth < DEPTH_SEARCH_LIMIT);
        // the returned depth is minimal
        let below = truncation_bound(1.0, 0.99, 1.0, choice.depth - 1, 0.01).unwrap();
        assert!(below > 1e-6);
        assert!(choice.bound <= 1e-6);
    }

    #[test]
    fn pick_depth_rejects_noncontractive_law() {
        // C = 2 deterministically: rho_beta = 2^beta >= 1 for all beta > 0
        let law = law(1, 2.0, 0.0, 1.0);
        match pick_depth(&law, None, 0.1, 0.01, 0) {
            Err(Error::NoContractiveBeta) => {}
            other => panic!("expected NoContractiveBeta, got {other:?}"),
        }
    }

    #[test]
    fn samples_csv_round_trip_is_exact() {
        let law = BranchingLaw::independent(
            NLaw::Det { k: 2 },
            CMagnitude::Lognormal { m: -1.3, sigma2: 1.0 },
            0.5,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let batch = batch_r(&law, 4, 50, 3, 2, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&batch, &mut buf).unwrap();
        let back = read_samples_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back, batch.values);
    }

    #[test]
    fn pi_beta_sums_match_abs_sums_at_beta_one() {
        let law = BranchingLaw::independent(
            NLaw::Table {
                atoms: vec![
                    crate::law::NAtom { k: 0, p: 0.2 },
                    crate::law::NAtom { k: 2, p: 0.8 },
                ],
            },
            CMagnitude::TwoPoint { a: 2.0, p_a: 0.3, b: 0.5 },
            0.4,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let opts = SimOptions::default();
        let mut r1 = StreamRng::new(5, 1);
        let mut r2 = StreamRng::new(5, 1);
        let sums = pi_beta_generation_sums(&law, 5, 1.0, &mut r1, &opts).unwrap();
        let trace = generation_trace(&law, 5, &mut r2, &opts).unwrap();
        for (a, b) in sums.iter().zip(trace.abs_pi_sum.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
