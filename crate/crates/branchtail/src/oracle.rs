//! Exact brute-force computations on small finite-discrete laws: the
//! distribution of R^(n), the distribution of the generation-n path-weight
//! multiset, and numeric evaluations of the supporting integral identities
//! and inequalities.
//!
//! Everything here enumerates outcome spaces exhaustively (with a size cap),
//! so it serves as ground truth for the samplers and for the measure
//! convolution identity, without sharing any code path with them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::law::BranchingLaw;

pub const ENUM_CAP: u64 = 10_000_000;
const VALUE_MERGE_TOL: f64 = 1e-12;

/// Exact finite distribution, atoms sorted by value and deduplicated
/// within 1e-12.
#[derive(Clone, Debug)]
pub struct ExactPmf {
    pub atoms: Vec<(f64, f64)>,
    pub depth: usize,
    pub law_fingerprint: String,
}

impl ExactPmf {
    pub fn from_atoms(mut atoms: Vec<(f64, f64)>, depth: usize, law_fingerprint: String) -> Self {
        atoms = merge_atoms(atoms);
        ExactPmf { atoms, depth, law_fingerprint }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    /// P(X <= x).
    pub fn cdf(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .take_while(|a| a.0 <= x)
            .map(|a| a.1)
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|a| a.0 * a.1).sum()
    }

    /// E[g(X)] for an arbitrary g.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| g(a.0) * a.1).sum()
    }

    /// Write `value,probability` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "value,probability")?;
        for (v, p) in &self.atoms {
            writeln!(out, "{v:.16e},{p:.16e}")?;
        }
        Ok(())
    }
}

fn merge_atoms(mut atoms: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    atoms.retain(|a| a.1 != 0.0);
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for (v, p) in atoms {
        match out.last_mut() {
            Some(last) if (v - last.0).abs() <= VALUE_MERGE_TOL => {
                // probability-weighted representative keeps values stable
                let w = last.1 + p;
                last.0 = (last.0 * last.1 + v * p) / w;
                last.1 = w;
            }
            _ => out.push((v, p)),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Exact distribution of R^(n)
// ---------------------------------------------------------------------------

/// Exact pmf of R^(depth), built bottom-up: pmf_0 is the law of Q, and each
/// level applies the sample-path recursion R = sum_j C_j X_j + Q by full
/// convolution over the node-outcome table.
pub fn enumerate_rn(law: &BranchingLaw, depth: usize) -> Result<ExactPmf> {
    let outcomes = law.node_outcomes(ENUM_CAP)?;
    let q_atoms = law.q_atoms()?;
    let mut pmf: Vec<(f64, f64)> = merge_atoms(q_atoms);
    for _ in 0..depth {
        pmf = smoothing_step(&outcomes, &pmf)?;
    }
    Ok(ExactPmf::from_atoms(pmf, depth, law.fingerprint().to_string()))
}

/// Pairwise-operation budget for one convolution pass. Atom counts are
/// capped by ENUM_CAP; this bounds the time spent producing them.
const WORK_CAP: u64 = 50_000_000;

/// One application of the sample-path recursion to an exact child pmf.
/// Outcomes sharing the same weight multiset are convolved once; the
/// outcome-specific q only shifts the result.
pub fn smoothing_step(
    outcomes: &[crate::law::NodeOutcome],
    child: &[(f64, f64)],
) -> Result<Vec<(f64, f64)>> {
    // group outcomes by sorted weight vector
    let mut groups: HashMap<Vec<u64>, (Vec<f64>, Vec<(f64, f64)>)> = HashMap::new();
    for o in outcomes {
        let mut key_c = o.c.clone();
        key_c.sort_by(f64::total_cmp);
        let key: Vec<u64> = key_c.iter().map(|v| v.to_bits()).collect();
        let entry = groups.entry(key).or_insert_with(|| (key_c.clone(), Vec::new()));
        entry.1.push((o.q, o.p));
    }
    let mut group_list: Vec<(Vec<f64>, Vec<(f64, f64)>)> = groups.into_values().collect();
    group_list.sort_by(|a, b| {
        let ka: Vec<u64> = a.0.iter().map(|v| v.to_bits()).collect();
        let kb: Vec<u64> = b.0.iter().map(|v| v.to_bits()).collect();
        ka.cmp(&kb)
    });

    let mut acc: HashMap<u64, f64> = HashMap::new();
    let mut work: u64 = 0;
    for (cvec, q_shifts) in group_list {
        // dist of sum_j c_j X_j for this weight multiset
        let mut dist: Vec<(f64, f64)> = vec![(0.0, 1.0)];
        for &c in &cvec {
            work += dist.len() as u64 * child.len() as u64;
            if work > WORK_CAP {
                return Err(Error::EnumerationTooLarge { size: work, cap: WORK_CAP });
            }
            let mut conv: HashMap<u64, f64> = HashMap::with_capacity(dist.len());
            for &(v, pv) in &dist {
                for &(x, px) in child {
                    *conv.entry((v + c * x).to_bits()).or_insert(0.0) += pv * px;
                }
            }
            if conv.len() as u64 > ENUM_CAP {
                return Err(Error::EnumerationTooLarge { size: conv.len() as u64, cap: ENUM_CAP });
            }
            dist = conv.into_iter().map(|(bits, p)| (f64::from_bits(bits), p)).collect();
        }
        for &(q, pq) in &q_shifts {
            for &(v, pv) in &dist {
                *acc.entry((q + v).to_bits()).or_insert(0.0) += pq * pv;
            }
        }
        if acc.len() as u64 > ENUM_CAP {
            return Err(Error::EnumerationTooLarge { size: acc.len() as u64, cap: ENUM_CAP });
        }
    }
    Ok(merge_atoms(
        acc.into_iter().map(|(bits, p)| (f64::from_bits(bits), p)).collect(),
    ))
}

/// Exact pmf of the generation sum W_n through the subtree recursion
/// W_n =_D sum_j C_j W_{n-1,j}, W_0 = Q.
pub fn enumerate_wn_recursive(law: &BranchingLaw, n: usize) -> Result<ExactPmf> {
    let outcomes = law.node_outcomes(ENUM_CAP)?;
    let mut pmf: Vec<(f64, f64)> = merge_atoms(law.q_atoms()?);
    // strip q from the outcomes: the recursion has no immigration term
    let stripped: Vec<crate::law::NodeOutcome> = outcomes
        .iter()
        .map(|o| crate::law::NodeOutcome { q: 0.0, c: o.c.clone(), p: o.p })
        .collect();
    for _ in 0..n {
        pmf = smoothing_step(&stripped, &pmf)?;
    }
    Ok(ExactPmf::from_atoms(pmf, n, law.fingerprint().to_string()))
}

// ---------------------------------------------------------------------------
// Exact distribution of the generation-n weight multiset
// ---------------------------------------------------------------------------

/// A multiset of signed path weights, canonicalized by value order.
pub type WeightMultiset = Vec<(f64, u32)>;

#[derive(PartialEq, Eq, Hash)]
struct MultisetKey(Vec<(u64, u32)>);

fn key_of(ms: &WeightMultiset) -> MultisetKey {
    MultisetKey(ms.iter().map(|&(v, c)| (v.to_bits(), c)).collect())
}

fn multiset_insert(ms: &mut WeightMultiset, v: f64) {
    match ms.binary_search_by(|probe| probe.0.total_cmp(&v)) {
        Ok(i) => ms[i].1 += 1,
        Err(i) => ms.insert(i, (v, 1)),
    }
}

/// Exact distribution of the multiset {Pi_i : i in A_n} of generation-n
/// signed path weights, by exhaustive tree enumeration with subtree
/// deduplication. This is the expensive, assumption-free route: it never
/// uses linearity of expectation across nodes.
pub fn generation_weight_distribution(
    law: &BranchingLaw,
    n: usize,
    cap: u64,
) -> Result<Vec<(WeightMultiset, f64)>> {
    let outcomes = law.node_outcomes(cap)?;
    // dist over multisets for a subtree root carrying weight 1
    let mut dist: HashMap<MultisetKey, (WeightMultiset, f64)> = HashMap::new();
    let base: WeightMultiset = vec![(1.0, 1)];
    dist.insert(key_of(&base), (base, 1.0));
    let mut work: u64 = 0;

    for _ in 0..n {
        let prev: Vec<(WeightMultiset, f64)> = dist.into_values().collect();
        let mut next: HashMap<MultisetKey, (WeightMultiset, f64)> = HashMap::new();
        for o in &outcomes {
            // combine independent child subtrees one at a time
            let mut partial: Vec<(WeightMultiset, f64)> = vec![(Vec::new(), o.p)];
            for &c in &o.c {
                let mut grown: HashMap<MultisetKey, (WeightMultiset, f64)> = HashMap::new();
                for (acc_ms, acc_p) in &partial {
                    for (child_ms, child_p) in &prev {
                        work += child_ms.len() as u64 + 1;
                        if work > cap {
                            return Err(Error::EnumerationTooLarge { size: work, cap });
                        }
                        let mut ms = acc_ms.clone();
                        for &(v, cnt) in child_ms {
                            let scaled = c * v;
                            for _ in 0..cnt {
                                multiset_insert(&mut ms, scaled);
                            }
                        }
                        let p = acc_p * child_p;
                        let entry = grown.entry(key_of(&ms)).or_insert_with(|| (ms.clone(), 0.0));
                        entry.1 += p;
                    }
                }
                partial = grown.into_values().collect();
            }
            for (ms, p) in partial {
                let entry = next.entry(key_of(&ms)).or_insert_with(|| (ms.clone(), 0.0));
                entry.1 += p;
            }
        }
        dist = next;
    }
    let mut out: Vec<(WeightMultiset, f64)> = dist.into_values().collect();
    // deterministic order for downstream consumers
    out.sort_by(|a, b| {
        let ka = key_of(&a.0);
        let kb = key_of(&b.0);
        ka.0.cmp(&kb.0)
    });
    Ok(out)
}

/// Exact pmf of W_n via the direct tree route: enumerate the generation-n
/// weight multiset distribution, then mix each multiset with iid Q draws.
pub fn enumerate_wn_direct(law: &BranchingLaw, n: usize) -> Result<ExactPmf> {
    let weights = generation_weight_distribution(law, n, ENUM_CAP)?;
    let q_atoms = law.q_atoms()?;
    let mut acc: Vec<(f64, f64)> = Vec::new();
    let mut work: u64 = 0;
    for (ms, p_ms) in &weights {
        let mut dist: Vec<(f64, f64)> = vec![(0.0, *p_ms)];
        for &(pi, cnt) in ms {
            for _ in 0..cnt {
                work += dist.len() as u64 * q_atoms.len() as u64;
                if work > ENUM_CAP {
                    return Err(Error::EnumerationTooLarge { size: work, cap: ENUM_CAP });
                }
                let mut next = Vec::with_capacity(dist.len() * q_atoms.len());
                for &(v, pv) in &dist {
                    for &(q, pq) in &q_atoms {
                        next.push((v + pi * q, pv * pq));
                    }
                }
                dist = merge_atoms(next);
            }
        }
        acc.extend(dist);
    }
    Ok(ExactPmf::from_atoms(acc, n, law.fingerprint().to_string()))
}

// ---------------------------------------------------------------------------
// Support-lemma checks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub diff: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Which transform of C_i R_i the identity is evaluated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxVariant {
    Cr,
    NegCr,
    AbsCr,
}

impl MaxVariant {
    fn apply(self, x: f64) -> f64 {
        match self {
            MaxVariant::Cr => x,
            MaxVariant::NegCr => -x,
            MaxVariant::AbsCr => x.abs(),
        }
    }
}

/// All (T_1..T_n, probability) tuples for T_i = variant(C_i R_i) with
/// R_i iid from `r_pmf`, enumerated over the law's (N, C) outcomes.
fn t_tuples(
    law: &BranchingLaw,
    r_pmf: &ExactPmf,
    variant: MaxVariant,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let outcomes = law.node_outcomes(ENUM_CAP)?;
    let mut tuples: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut work: u64 = 0;
    for o in outcomes {
        let mut partial: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), o.p)];
        for &c in &o.c {
            work += partial.len() as u64 * r_pmf.atoms.len() as u64;
            if work > ENUM_CAP {
                return Err(Error::EnumerationTooLarge { size: work, cap: ENUM_CAP });
            }
            let mut next = Vec::with_capacity(partial.len() * r_pmf.atoms.len());
            for (prefix, pp) in &partial {
                for &(r, pr) in &r_pmf.atoms {
                    let mut v = prefix.clone();
                    v.push(variant.apply(c * r));
                    next.push((v, pp * pr));
                }
            }
            partial = next;
        }
        tuples.extend(partial);
    }
    Ok(tuples)
}

/// Integrate a piecewise-constant function of t against t^{alpha-1} dt on
/// (0, inf): breakpoints are the positive jump locations, `h` evaluates the
/// function at an interior point of each interval.
fn integrate_step_function(breaks: &[f64], alpha: f64, h: impl Fn(f64) -> f64) -> f64 {
    let mut pts: Vec<f64> = breaks.iter().copied().filter(|&b| b > 0.0).collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut total = 0.0;
    let mut lo = 0.0f64;
    for &hi in &pts {
        let mid = if lo == 0.0 { hi / 2.0 } else { 0.5 * (lo + hi) };
        total += h(mid) * (hi.powf(alpha) - lo.powf(alpha)) / alpha;
        lo = hi;
    }
    // beyond the largest breakpoint every indicator is zero
    total
}

/// Both sides of the max-vs-sum integral identity
///   int_0^inf ( E[sum 1(T_i > t)] - P(max T_i > t) ) t^{alpha-1} dt
///     = (1/alpha) E[ sum (T_i^+)^alpha - ((max T_i)^+)^alpha ],
/// with the left side evaluated as a literal step-function integral.
pub fn max_approx_identity_check(
    law: &BranchingLaw,
    r_pmf: &ExactPmf,
    alpha: f64,
    variant: MaxVariant,
) -> Result<IdentityCheck> {
    let tuples = t_tuples(law, r_pmf, variant)?;

    let mut breaks: Vec<f64> = Vec::new();
    for (ts, _) in &tuples {
        for &t in ts {
            breaks.push(t);
        }
        if let Some(m) = ts.iter().copied().reduce(f64::max) {
            breaks.push(m);
        }
    }
    let lhs = integrate_step_function(&breaks, alpha, |t| {
        let mut acc = 0.0;
        for (ts, p) in &tuples {
            let count = ts.iter().filter(|&&x| x > t).count() as f64;
            let max_hit = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max) > t;
            acc += p * (count - f64::from(u8::from(max_hit)));
        }
        acc
    });

    let mut rhs = 0.0;
    for (ts, p) in &tuples {
        let sum_pow: f64 = ts.iter().map(|&t| pos_pow(t, alpha)).sum();
        let max_pow = pos_pow(ts.iter().copied().fold(f64::NEG_INFINITY, f64::max), alpha);
        rhs += p * (sum_pow - max_pow);
    }
    rhs /= alpha;

    Ok(IdentityCheck { lhs, rhs, diff: (lhs - rhs).abs() })
}

#[inline]
fn pos_pow(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x.powf(alpha)
    } else {
        0.0
    }
}

/// The indicator-difference integral inequality
///   int_0^inf E|1(X > t) - 1(Y > t)| t^{alpha-1} dt
///     <= (1/alpha) E|(X^+)^alpha - (Y^+)^alpha|
/// on a joint table of (x, y, p) rows.
pub fn indicator_integral_bound_check(joint: &[(f64, f64, f64)], alpha: f64) -> Result<BoundCheck> {
    let mass: f64 = joint.iter().map(|r| r.2).sum();
    if (mass - 1.0).abs() > 1e-12 {
        return Err(Error::invalid_config("joint", format!("probabilities sum to {mass}")));
    }
    let breaks: Vec<f64> = joint.iter().flat_map(|&(x, y, _)| [x, y]).collect();
    let lhs = integrate_step_function(&breaks, alpha, |t| {
        joint
            .iter()
            .map(|&(x, y, p)| p * (f64::from(x > t) - f64::from(y > t)).abs())
            .sum()
    });
    let rhs = joint
        .iter()
        .map(|&(x, y, p)| p * (pos_pow(x, alpha) - pos_pow(y, alpha)).abs())
        .sum::<f64>()
        / alpha;
    Ok(BoundCheck { lhs, rhs, holds: lhs <= rhs + 1e-12 })
}

/// The multinomial moment bound, for beta > 1 and p = ceil(beta):
///   E[(sum (D_i Y_i)^+)^beta - sum ((D_i Y_i)^+)^beta]
///     <= E[|Y|^{p-1}]^{beta/(p-1)} E[(sum |D_i|)^beta],
/// where the D_i are the law's weights and the Y_i are iid from `y_pmf`.
pub fn alpha_moment_bound_check(
    law: &BranchingLaw,
    y_pmf: &ExactPmf,
    beta: f64,
) -> Result<BoundCheck> {
    if !(beta > 1.0) {
        return Err(Error::invalid_config("beta", format!("must be > 1, got {beta}")));
    }
    let p_ord = beta.ceil();
    let tuples = t_tuples(law, y_pmf, MaxVariant::Cr)?;
    let mut lhs = 0.0;
    for (ts, p) in &tuples {
        let sum_pos: f64 = ts.iter().map(|&t| t.max(0.0)).sum();
        let sum_pow: f64 = ts.iter().map(|&t| pos_pow(t, beta)).sum();
        lhs += p * (pos_pow(sum_pos, beta) - sum_pow);
    }

    let y_mom = y_pmf.expect(|y| y.abs().powf(p_ord - 1.0));
    let outcomes = law.node_outcomes(ENUM_CAP)?;
    let d_mom: f64 = outcomes
        .iter()
        .map(|o| {
            let s: f64 = o.c.iter().map(|c| c.abs()).sum();
            o.p * pos_pow(s, beta)
        })
        .sum();
    let rhs = y_mom.powf(beta / (p_ord - 1.0)) * d_mom;
    Ok(BoundCheck { lhs, rhs, holds: lhs <= rhs + 1e-12 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::{CMagnitude, JointRow, NAtom, NLaw, QLaw};

    fn law_det_half() -> BranchingLaw {
        BranchingLaw::independent(
            NLaw::Det { k: 1 },
            CMagnitude::Det { value: 0.5 },
            0.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn geometric_path_single_atom() {
        let pmf = enumerate_rn(&law_det_half(), 3).unwrap();
        assert_eq!(pmf.atoms.len(), 1);
        assert_eq!(pmf.atoms[0].0, 1.875);
        assert!((pmf.atoms[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_sign_depth_one() {
        let law = BranchingLaw::independent(
            NLaw::Det { k: 1 },
            CMagnitude::Det { value: 1.0 },
            0.5,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let pmf = enumerate_rn(&law, 1).unwrap();
        assert_eq!(pmf.atoms.len(), 2);
        assert_eq!(pmf.atoms[0].0, 0.0);
        assert!((pmf.atoms[0].1 - 0.5).abs() < 1e-12);
        assert_eq!(pmf.atoms[1].0, 2.0);
        assert!((pmf.atoms[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_tree_shapes_depth_two() {
        let law = BranchingLaw::independent(
            NLaw::Table { atoms: vec![NAtom { k: 0, p: 0.5 }, NAtom { k: 1, p: 0.5 }] },
            CMagnitude::Det { value: 1.0 },
            0.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let pmf = enumerate_rn(&law, 2).unwrap();
        let expect = [(1.0, 0.5), (2.0, 0.25), (3.0, 0.25)];
        assert_eq!(pmf.atoms.len(), 3);
        for ((v, p), (ev, ep)) in pmf.atoms.iter().zip(expect.iter()) {
            assert_eq!(v, ev);
            assert!((p - ep).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_one_at_every_depth() {
        let law = BranchingLaw::independent(
            NLaw::Table {
                atoms: vec![NAtom { k: 0, p: 0.2 }, NAtom { k: 1, p: 0.3 }, NAtom { k: 2, p: 0.5 }],
            },
            CMagnitude::TwoPoint { a: 2.0, p_a: 0.168, b: 0.5 },
            0.25,
            QLaw::TwoPoint { a: 1.0, p_a: 0.75, b: -0.5 },
        )
        .unwrap();
        for depth in 0..=4 {
            let pmf = enumerate_rn(&law, depth).unwrap();
            assert!(
                (pmf.total_mass() - 1.0).abs() < 1e-12,
                "depth {depth}: mass {}",
                pmf.total_mass()
            );
        }
    }

    #[test]
    fn pushforward_self_consistency() {
        let law = BranchingLaw::independent(
            NLaw::Table { atoms: vec![NAtom { k: 0, p: 0.4 }, NAtom { k: 2, p: 0.6 }] },
            CMagnitude::TwoPoint { a: 0.5, p_a: 0.5, b: 0.25 },
            0.5,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let outcomes = law.node_outcomes(ENUM_CAP).unwrap();
        let d2 = enumerate_rn(&law, 2).unwrap();
        let d3 = enumerate_rn(&law, 3).unwrap();
        let pushed = smoothing_step(&outcomes, &d2.atoms).unwrap();
        assert_eq!(pushed.len(), d3.atoms.len());
        for ((v, p), (ev, ep)) in pushed.iter().zip(d3.atoms.iter()) {
            assert!((v - ev).abs() <= 1e-12);
            assert!((p - ep).abs() <= 1e-12);
        }
    }

    #[test]
    fn wn_direct_matches_recursive_route() {
        // eq WnRec both ways: direct tree enumeration vs subtree recursion
        let law = BranchingLaw::independent(
            NLaw::Table { atoms: vec![NAtom { k: 0, p: 0.3 }, NAtom { k: 1, p: 0.4 }, NAtom { k: 2, p: 0.3 }] },
            CMagnitude::TwoPoint { a: 0.5, p_a: 0.7, b: 0.25 },
            0.4,
            QLaw::TwoPoint { a: 1.0, p_a: 0.6, b: -0.5 },
        )
        .unwrap();
        for n in 0..=3 {
            let a = enumerate_wn_direct(&law, n).unwrap();
            let b = enumerate_wn_recursive(&law, n).unwrap();
            assert_eq!(a.atoms.len(), b.atoms.len(), "n = {n}");
            for ((va, pa), (vb, pb)) in a.atoms.iter().zip(b.atoms.iter()) {
                assert!((va - vb).abs() <= 1e-12, "n = {n}: {va} vs {vb}");
                assert!((pa - pb).abs() <= 1e-12, "n = {n}: {pa} vs {pb}");
            }
        }
    }

    #[test]
    fn joint_table_enumeration() {
        let law = BranchingLaw::joint_table(vec![
            JointRow { p: 0.5, q: 1.0, c: vec![2.0] },
            JointRow { p: 0.5, q: -1.0, c: vec![] },
        ])
        .unwrap();
        let pmf = enumerate_rn(&law, 1).unwrap();
        // depth 1: row 1 (p .5): 1 + 2*Q', Q' in {1, -1} each .5 -> {3, -1};
        // row 2: -1. The -1 values coincide: P(-1) = .25 + .5.
        let expect = [(-1.0, 0.75), (3.0, 0.25)];
        assert_eq!(pmf.atoms.len(), 2);
        for ((v, p), (ev, ep)) in pmf.atoms.iter().zip(expect.iter()) {
            assert_eq!(v, ev);
            assert!((p - ep).abs() < 1e-12);
        }
    }

    #[test]
    fn max_identity_single_child_is_zero() {
        let law = law_det_half();
        let r = enumerate_rn(&law, 2).unwrap();
        let chk = max_approx_identity_check(&law, &r, 1.5, MaxVariant::Cr).unwrap();
        assert!(chk.lhs.abs() < 1e-12);
        assert!(chk.rhs.abs() < 1e-12);
    }

    #[test]
    fn max_identity_two_equal_atoms() {
        // N det 2, C det 1, R = 1 a.s.: both sides (1/alpha)(2 - 1)
        let law = BranchingLaw::independent(
            NLaw::Det { k: 2 },
            CMagnitude::Det { value: 1.0 },
            0.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let r = ExactPmf::from_atoms(vec![(1.0, 1.0)], 0, "unit".into());
        for alpha in [0.7, 1.0, 2.3] {
            let chk = max_approx_identity_check(&law, &r, alpha, MaxVariant::Cr).unwrap();
            assert!((chk.lhs - 1.0 / alpha).abs() < 1e-12, "alpha {alpha}: {chk:?}");
            assert!(chk.diff < 1e-12);
        }
    }

    #[test]
    fn max_identity_negative_variant_vanishes() {
        // all C R > 0 a.s., so -C R has no positive part
        let law = BranchingLaw::independent(
            NLaw::Det { k: 2 },
            CMagnitude::Det { value: 1.0 },
            0.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let r = ExactPmf::from_atoms(vec![(0.5, 0.5), (2.0, 0.5)], 0, "pos".into());
        let chk = max_approx_identity_check(&law, &r, 1.3, MaxVariant::NegCr).unwrap();
        assert_eq!(chk.lhs, 0.0);
        assert_eq!(chk.rhs, 0.0);
    }

    #[test]
    fn indicator_bound_x_equals_y() {
        let joint = vec![(1.5, 1.5, 0.5), (-2.0, -2.0, 0.5)];
        let chk = indicator_integral_bound_check(&joint, 1.7).unwrap();
        assert_eq!(chk.lhs, 0.0);
        assert_eq!(chk.rhs, 0.0);
        assert!(chk.holds);
    }

    #[test]
    fn indicator_bound_comonotone_tight() {
        // X = 2, Y = 1, alpha = 1: both sides equal 1
        let chk = indicator_integral_bound_check(&[(2.0, 1.0, 1.0)], 1.0).unwrap();
        assert!((chk.lhs - 1.0).abs() < 1e-12);
        assert!((chk.rhs - 1.0).abs() < 1e-12);
        assert!(chk.holds);
    }

    #[test]
    fn indicator_bound_mixed_sign_tight() {
        // X = 2, Y = -1, alpha = 2: lhs = int_0^2 t dt = 2, rhs = 4/2 = 2
        let chk = indicator_integral_bound_check(&[(2.0, -1.0, 1.0)], 2.0).unwrap();
        assert!((chk.lhs - 2.0).abs() < 1e-12);
        assert!((chk.rhs - 2.0).abs() < 1e-12);
        assert!(chk.holds);
    }

    #[test]
    fn alpha_moment_bound_hand_values() {
        // N det 2, D det 1, Y = 1: lhs = 2^2 - 2 = 2, rhs = 1 * 4 = 4
        let law = BranchingLaw::independent(
            NLaw::Det { k: 2 },
            CMagnitude::Det { value: 1.0 },
            0.0,
            QLaw::Det { value: 1.0 },
        )
        .unwrap();
        let y_unit = ExactPmf::from_atoms(vec![(1.0, 1.0)], 0, "y".into());
        let chk = alpha_moment_bound_check(&law, &y_unit, 2.0).unwrap();
        assert!((chk.lhs - 2.0).abs() < 1e-12);
        assert!((chk.rhs - 4.0).abs() < 1e-12);
        assert!(chk.holds);

        // Y symmetric +-1: lhs = 2 E[Y1+ Y2+] = 1/2, rhs = 4
        let y_sym = ExactPmf::from_atoms(vec![(-1.0, 0.5), (1.0, 0.5)], 0, "y".into());
        let chk = alpha_moment_bound_check(&law, &y_sym, 2.0).unwrap();
        assert!((chk.lhs - 0.5).abs() < 1e-12);
        assert!((chk.rhs - 4.0).abs() < 1e-12);
        assert!(chk.holds);

        // N = 1: single summand, lhs = 0
        let chk = alpha_moment_bound_check(&law_det_half(), &y_sym, 2.0).unwrap();
        assert!(chk.lhs.abs() < 1e-12);
        assert!(chk.holds);
    }

    #[test]
    fn enumeration_cap_respected() {
        // N det 3 with a 4-point C support and a wide Q table explodes fast
        let law = BranchingLaw::independent(
            NLaw::Det { k: 3 },
            CMagnitude::Table {
                atoms: vec![
                    ValueAtomFor::new(1.7, 0.25),
                    ValueAtomFor::new(0.9, 0.25),
                    ValueAtomFor::new(0.31, 0.25),
                    ValueAtomFor::new(1.13, 0.25),
                ],
            },
            0.5,
            QLaw::TwoPoint { a: 1.0, p_a: 0.5, b: -1.0 },
        )
        .unwrap();
        match enumerate_rn(&law, 6) {
            Err(Error::EnumerationTooLarge { .. }) => {}
            other => panic!("expected EnumerationTooLarge, got {:?}", other.map(|p| p.atoms.len())),
        }
    }

    use crate::law::ValueAtom as ValueAtomFor;
    impl ValueAtomFor {
        fn new(value: f64, p: f64) -> Self {
            ValueAtomFor { value, p }
        }
    }
}
