//! The law of the generic branching vector (Q, N, C_1, ..., C_N).
//!
//! A [`BranchingLaw`] fully specifies how node vectors are drawn: either the
//! three components are mutually independent with the weights iid given N
//! (`iid_given_n`), or the whole vector is a fully enumerated finite joint
//! table. Closed-form moment functions are supplied wherever the component
//! families admit them.

use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

const MASS_TOL: f64 = 1e-12;

/// Offspring-count distribution.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NLaw {
    Det { k: u64 },
    Poisson { lambda: f64 },
    /// Geometric on {0, 1, 2, ...} with success probability `p`.
    Geometric { p: f64 },
    Table { atoms: Vec<NAtom> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NAtom {
    pub k: u64,
    pub p: f64,
}

/// Distribution of the weight magnitude |C| (strictly positive).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CMagnitude {
    Det { value: f64 },
    /// `a` with probability `p_a`, `b` with probability `1 - p_a`.
    TwoPoint { a: f64, p_a: f64, b: f64 },
    /// log|C| ~ Normal(m, sigma2).
    Lognormal { m: f64, sigma2: f64 },
    Table { atoms: Vec<ValueAtom> },
}

/// Distribution of the immigration term Q.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QLaw {
    Det { value: f64 },
    TwoPoint { a: f64, p_a: f64, b: f64 },
    Normal { mean: f64, sigma2: f64 },
    Exponential { rate: f64 },
    Table { atoms: Vec<ValueAtom> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ValueAtom {
    pub value: f64,
    pub p: f64,
}

/// One row of a fully enumerated joint distribution of (Q, N, C_1..C_N);
/// N is the length of `c`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JointRow {
    pub p: f64,
    pub q: f64,
    pub c: Vec<f64>,
}

/// Independent-components mode: Q, N and the weight magnitudes are mutually
/// independent; each weight gets an independent sign flip with probability
/// `q_neg`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IndependentLaw {
    pub n: NLaw,
    pub c_magnitude: CMagnitude,
    pub q_neg: f64,
    pub q: QLaw,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum Dependence {
    Independent(IndependentLaw),
    JointTable(Vec<JointRow>),
}

/// A validated branching law. Immutable after construction; safe to share
/// across threads.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BranchingLaw {
    pub dependence: Dependence,
    fingerprint: String,
}

/// One draw of the generic vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GenericVectorSample {
    pub q: f64,
    pub c: Vec<f64>,
}

impl GenericVectorSample {
    pub fn n(&self) -> usize {
        self.c.len()
    }
}

// ---------------------------------------------------------------------------
// JSON config schema
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct Config {
    n: Option<NLaw>,
    c: Option<CConfig>,
    q: Option<QLaw>,
    dependence: DependenceConfig,
}

#[derive(Deserialize)]
struct CConfig {
    magnitude: CMagnitude,
    #[serde(default)]
    q_neg: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DependenceConfig {
    Mode(String),
    Joint { joint_table: Vec<JointRow> },
}

/// Parse and validate a JSON law config (see the schema in the README).
pub fn parse_law(document: &str) -> Result<BranchingLaw> {
    let cfg: Config = serde_json::from_str(document)
        .map_err(|e| Error::invalid_config("<document>", e.to_string()))?;
    match cfg.dependence {
        DependenceConfig::Mode(mode) if mode == "iid_given_n" => {
            let n = cfg
                .n
                .ok_or_else(|| Error::invalid_config("n", "required in iid_given_n mode"))?;
            let c = cfg
                .c
                .ok_or_else(|| Error::invalid_config("c", "required in iid_given_n mode"))?;
            let q = cfg
                .q
                .ok_or_else(|| Error::invalid_config("q", "required in iid_given_n mode"))?;
            BranchingLaw::independent(n, c.magnitude, c.q_neg, q)
        }
        DependenceConfig::Mode(other) => Err(Error::invalid_config(
            "dependence",
            format!("unknown mode `{other}`"),
        )),
        DependenceConfig::Joint { joint_table } => BranchingLaw::joint_table(joint_table),
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

fn check_prob(p: f64, path: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::invalid_config(path, format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_mass(sum: f64, path: &str) -> Result<()> {
    if (sum - 1.0).abs() > MASS_TOL {
        return Err(Error::invalid_config(path, format!("probabilities sum to {sum}")));
    }
    Ok(())
}

fn check_finite(x: f64, path: &str) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::invalid_config(path, format!("non-finite value {x}")));
    }
    Ok(())
}

impl NLaw {
    fn validate(&self) -> Result<()> {
        match self {
            NLaw::Det { .. } => Ok(()),
            NLaw::Poisson { lambda } => {
                if *lambda > 0.0 && lambda.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid_config("n.lambda", format!("must be > 0, got {lambda}")))
                }
            }
            NLaw::Geometric { p } => {
                if *p > 0.0 && *p < 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid_config("n.p", format!("must lie in (0, 1), got {p}")))
                }
            }
            NLaw::Table { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::invalid_config("n.atoms", "empty table"));
                }
                let mut sum = 0.0;
                for (i, a) in atoms.iter().enumerate() {
                    check_prob(a.p, &format!("n.atoms[{i}].p"))?;
                    sum += a.p;
                }
                check_mass(sum, "n.atoms")
            }
        }
    }
}

impl CMagnitude {
    fn validate(&self) -> Result<()> {
        match self {
            CMagnitude::Det { value } => {
                if *value > 0.0 && value.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid_config("c.magnitude.value", format!("must be > 0, got {value}")))
                }
            }
            CMagnitude::TwoPoint { a, p_a, b } => {
                check_prob(*p_a, "c.magnitude.p_a")?;
                for (v, path) in [(a, "c.magnitude.a"), (b, "c.magnitude.b")] {
                    if !(*v > 0.0 && v.is_finite()) {
                        return Err(Error::invalid_config(path, format!("must be > 0, got {v}")));
                    }
                }
                Ok(())
            }
            CMagnitude::Lognormal { m, sigma2 } => {
                check_finite(*m, "c.magnitude.m")?;
                if *sigma2 > 0.0 && sigma2.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid_config("c.magnitude.sigma2", format!("must be > 0, got {sigma2}")))
                }
            }
            CMagnitude::Table { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::invalid_config("c.magnitude.atoms", "empty table"));
                }
                let mut sum = 0.0;
                for (i, a) in atoms.iter().enumerate() {
                    check_prob(a.p, &format!("c.magnitude.atoms[{i}].p"))?;
                    if !(a.value > 0.0 && a.value.is_finite()) {
                        return Err(Error::invalid_config(
                            format!("c.magnitude.atoms[{i}].value"),
                            format!("must be > 0, got {}", a.value),
                        ));
                    }
                    sum += a.p;
                }
                check_mass(sum, "c.magnitude.atoms")
            }
        }
    }
}

impl QLaw {
    fn validate(&self) -> Result<()> {
        match self {
            QLaw::Det { value } => {
                check_finite(*value, "q.value")?;
                if *value == 0.0 {
                    Err(Error::DegenerateQ)
                } else {
                    Ok(())
                }
            }
            QLaw::TwoPoint { a, p_a, b } => {
                check_prob(*p_a, "q.p_a")?;
                check_finite(*a, "q.a")?;
                check_finite(*b, "q.b")?;
                let nonzero = if *a != 0.0 { *p_a } else { 0.0 } + if *b != 0.0 { 1.0 - p_a } else { 0.0 };
                if nonzero <= 0.0 {
                    Err(Error::DegenerateQ)
                } else {
                    Ok(())
                }
            }
            QLaw::Normal { mean, sigma2 } => {
                check_finite(*mean, "q.mean")?;
                if *sigma2 > 0.0 && sigma2.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid_config("q.sigma2", format!("must be > 0, got {sigma2}")))
                }
            }
            QLaw::Exponential { rate } => {
                if *rate > 0.0 && rate.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid_config("q.rate", format!("must be > 0, got {rate}")))
                }
            }
            QLaw::Table { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::invalid_config("q.atoms", "empty table"));
                }
                let mut sum = 0.0;
                let mut nonzero = 0.0;
                for (i, a) in atoms.iter().enumerate() {
                    check_prob(a.p, &format!("q.atoms[{i}].p"))?;
                    check_finite(a.value, &format!("q.atoms[{i}].value"))?;
                    sum += a.p;
                    if a.value != 0.0 {
                        nonzero += a.p;
                    }
                }
                check_mass(sum, "q.atoms")?;
                if nonzero <= 0.0 {
                    Err(Error::DegenerateQ)
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl BranchingLaw {
    pub fn independent(n: NLaw, c_magnitude: CMagnitude, q_neg: f64, q: QLaw) -> Result<Self> {
        n.validate()?;
        c_magnitude.validate()?;
        check_prob(q_neg, "c.q_neg")?;
        q.validate()?;
        Ok(Self::with_fingerprint(Dependence::Independent(IndependentLaw {
            n,
            c_magnitude,
            q_neg,
            q,
        })))
    }

    pub fn joint_table(rows: Vec<JointRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid_config("dependence.joint_table", "empty table"));
        }
        let mut sum = 0.0;
        let mut q_nonzero = 0.0;
        for (i, row) in rows.iter().enumerate() {
            check_prob(row.p, &format!("dependence.joint_table[{i}].p"))?;
            check_finite(row.q, &format!("dependence.joint_table[{i}].q"))?;
            for (j, c) in row.c.iter().enumerate() {
                check_finite(*c, &format!("dependence.joint_table[{i}].c[{j}]"))?;
            }
            sum += row.p;
            if row.q != 0.0 {
                q_nonzero += row.p;
            }
        }
        check_mass(sum, "dependence.joint_table")?;
        if q_nonzero <= 0.0 {
            return Err(Error::DegenerateQ);
        }
        Ok(Self::with_fingerprint(Dependence::JointTable(rows)))
    }

    fn with_fingerprint(dependence: Dependence) -> Self {
        let canonical = serde_json::to_string(&dependence).expect("law serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let fingerprint = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        BranchingLaw { dependence, fingerprint }
    }

    /// Stable hash of the law config, recorded in batches and manifests.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

impl NLaw {
    pub fn sample(&self, rng: &mut StreamRng) -> u64 {
        match self {
            NLaw::Det { k } => *k,
            NLaw::Poisson { lambda } => {
                let d = Poisson::new(*lambda).expect("validated lambda");
                let x: f64 = d.sample(rng);
                x as u64
            }
            NLaw::Geometric { p } => {
                let v = rng.uniform_pos();
                (v.ln() / (1.0 - p).ln()).floor() as u64
            }
            NLaw::Table { atoms } => {
                let mut u = rng.uniform();
                for a in atoms {
                    if u < a.p {
                        return a.k;
                    }
                    u -= a.p;
                }
                atoms.last().expect("non-empty table").k
            }
        }
    }
}

impl CMagnitude {
    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match self {
            CMagnitude::Det { value } => *value,
            CMagnitude::TwoPoint { a, p_a, b } => {
                if rng.uniform() < *p_a {
                    *a
                } else {
                    *b
                }
            }
            CMagnitude::Lognormal { m, sigma2 } => {
                let d = LogNormal::new(*m, sigma2.sqrt()).expect("validated sigma2");
                d.sample(rng)
            }
            CMagnitude::Table { atoms } => sample_value_table(atoms, rng),
        }
    }
}

impl QLaw {
    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match self {
            QLaw::Det { value } => *value,
            QLaw::TwoPoint { a, p_a, b } => {
                if rng.uniform() < *p_a {
                    *a
                } else {
                    *b
                }
            }
            QLaw::Normal { mean, sigma2 } => {
                let d = Normal::new(*mean, sigma2.sqrt()).expect("validated sigma2");
                d.sample(rng)
            }
            QLaw::Exponential { rate } => {
                let d = Exp::new(*rate).expect("validated rate");
                d.sample(rng)
            }
            QLaw::Table { atoms } => sample_value_table(atoms, rng),
        }
    }
}

fn sample_value_table(atoms: &[ValueAtom], rng: &mut StreamRng) -> f64 {
    let mut u = rng.uniform();
    for a in atoms {
        if u < a.p {
            return a.value;
        }
        u -= a.p;
    }
    atoms.last().expect("non-empty table").value
}

impl IndependentLaw {
    /// One signed weight draw: magnitude times an independent sign flip.
    #[inline]
    pub fn sample_weight(&self, rng: &mut StreamRng) -> f64 {
        let mag = self.c_magnitude.sample(rng);
        if self.q_neg > 0.0 && rng.uniform() < self.q_neg {
            -mag
        } else {
            mag
        }
    }
}

impl BranchingLaw {
    /// Draw one generic vector. Draw order is (q, n, c_1..c_n), fixed.
    pub fn sample_vector(&self, rng: &mut StreamRng) -> GenericVectorSample {
        let mut c = Vec::new();
        let q = self.sample_vector_into(rng, &mut c);
        GenericVectorSample { q, c }
    }

    /// Buffer-reusing variant of [`sample_vector`](Self::sample_vector);
    /// returns q, fills `c` with the signed weights.
    pub fn sample_vector_into(&self, rng: &mut StreamRng, c: &mut Vec<f64>) -> f64 {
        c.clear();
        match &self.dependence {
            Dependence::Independent(ind) => {
                let q = ind.q.sample(rng);
                let n = ind.n.sample(rng);
                c.reserve(n as usize);
                for _ in 0..n {
                    c.push(ind.sample_weight(rng));
                }
                q
            }
            Dependence::JointTable(rows) => {
                let row = sample_joint_row(rows, rng);
                c.extend_from_slice(&row.c);
                row.q
            }
        }
    }

    /// Draw only the Q marginal (used at truncation leaves, where the
    /// offspring of the node are never expanded).
    pub fn sample_q(&self, rng: &mut StreamRng) -> f64 {
        match &self.dependence {
            Dependence::Independent(ind) => ind.q.sample(rng),
            Dependence::JointTable(rows) => sample_joint_row(rows, rng).q,
        }
    }
}

fn sample_joint_row<'a>(rows: &'a [JointRow], rng: &mut StreamRng) -> &'a JointRow {
    let mut u = rng.uniform();
    for row in rows {
        if u < row.p {
            return row;
        }
        u -= row.p;
    }
    rows.last().expect("non-empty table")
}

// ---------------------------------------------------------------------------
// Closed-form moments
// ---------------------------------------------------------------------------

impl NLaw {
    pub fn mean(&self) -> f64 {
        match self {
            NLaw::Det { k } => *k as f64,
            NLaw::Poisson { lambda } => *lambda,
            NLaw::Geometric { p } => (1.0 - p) / p,
            NLaw::Table { atoms } => atoms.iter().map(|a| a.k as f64 * a.p).sum(),
        }
    }
}

/// |c|^beta with the convention 0^beta = 0 for beta > 0.
fn abs_pow(c: f64, beta: f64) -> f64 {
    let a = c.abs();
    if a == 0.0 {
        0.0
    } else {
        a.powf(beta)
    }
}

/// |c|^alpha * log|c| with the convention 0^alpha log 0 = 0.
fn abs_pow_log(c: f64, alpha: f64) -> f64 {
    let a = c.abs();
    if a == 0.0 {
        0.0
    } else {
        a.powf(alpha) * a.ln()
    }
}

impl CMagnitude {
    /// E[|C|^beta], exact.
    pub fn abs_moment(&self, beta: f64) -> f64 {
        match self {
            CMagnitude::Det { value } => abs_pow(*value, beta),
            CMagnitude::TwoPoint { a, p_a, b } => p_a * abs_pow(*a, beta) + (1.0 - p_a) * abs_pow(*b, beta),
            CMagnitude::Lognormal { m, sigma2 } => (m * beta + sigma2 * beta * beta / 2.0).exp(),
            CMagnitude::Table { atoms } => atoms.iter().map(|a| a.p * abs_pow(a.value, beta)).sum(),
        }
    }

    /// E[|C|^alpha log|C|], exact.
    pub fn abs_log_moment(&self, alpha: f64) -> f64 {
        match self {
            CMagnitude::Det { value } => abs_pow_log(*value, alpha),
            CMagnitude::TwoPoint { a, p_a, b } => {
                p_a * abs_pow_log(*a, alpha) + (1.0 - p_a) * abs_pow_log(*b, alpha)
            }
            CMagnitude::Lognormal { m, sigma2 } => {
                (m + sigma2 * alpha) * (m * alpha + sigma2 * alpha * alpha / 2.0).exp()
            }
            CMagnitude::Table { atoms } => atoms.iter().map(|a| a.p * abs_pow_log(a.value, alpha)).sum(),
        }
    }
}

impl BranchingLaw {
    /// rho_beta = E[sum_{i<=N} |C_i|^beta] in closed form, when available.
    /// Joint tables always evaluate to the exact finite sum.
    pub fn closed_rho(&self, beta: f64) -> Option<f64> {
        match &self.dependence {
            Dependence::Independent(ind) => Some(ind.n.mean() * ind.c_magnitude.abs_moment(beta)),
            Dependence::JointTable(rows) => Some(
                rows.iter()
                    .map(|r| r.p * r.c.iter().map(|&c| abs_pow(c, beta)).sum::<f64>())
                    .sum(),
            ),
        }
    }

    /// mu = E[sum_{i<=N} |C_i|^alpha log|C_i|] in closed form, when available.
    pub fn closed_mu(&self, alpha: f64) -> Option<f64> {
        match &self.dependence {
            Dependence::Independent(ind) => Some(ind.n.mean() * ind.c_magnitude.abs_log_moment(alpha)),
            Dependence::JointTable(rows) => Some(
                rows.iter()
                    .map(|r| r.p * r.c.iter().map(|&c| abs_pow_log(c, alpha)).sum::<f64>())
                    .sum(),
            ),
        }
    }

    /// E[|Q|^beta] in closed form, when available.
    pub fn closed_q_abs_moment(&self, beta: f64) -> Option<f64> {
        match &self.dependence {
            Dependence::Independent(ind) => match &ind.q {
                QLaw::Det { value } => Some(abs_pow(*value, beta)),
                QLaw::TwoPoint { a, p_a, b } => Some(p_a * abs_pow(*a, beta) + (1.0 - p_a) * abs_pow(*b, beta)),
                QLaw::Table { atoms } => Some(atoms.iter().map(|a| a.p * abs_pow(a.value, beta)).sum()),
                QLaw::Normal { .. } | QLaw::Exponential { .. } => None,
            },
            Dependence::JointTable(rows) => Some(rows.iter().map(|r| r.p * abs_pow(r.q, beta)).sum()),
        }
    }

    /// E[((+/-Q)^+)^alpha] in closed form, when available.
    pub fn closed_q_signed_moment(&self, alpha: f64, positive_part: bool) -> Option<f64> {
        let part = |q: f64| {
            let v = if positive_part { q.max(0.0) } else { (-q).max(0.0) };
            abs_pow(v, alpha)
        };
        match &self.dependence {
            Dependence::Independent(ind) => match &ind.q {
                QLaw::Det { value } => Some(part(*value)),
                QLaw::TwoPoint { a, p_a, b } => Some(p_a * part(*a) + (1.0 - p_a) * part(*b)),
                QLaw::Table { atoms } => Some(atoms.iter().map(|a| a.p * part(a.value)).sum()),
                QLaw::Normal { .. } | QLaw::Exponential { .. } => None,
            },
            Dependence::JointTable(rows) => Some(rows.iter().map(|r| r.p * part(r.q)).sum()),
        }
    }

    /// True when the weights are nonnegative almost surely (Theorem case (a)).
    pub fn is_nonnegative(&self) -> bool {
        match &self.dependence {
            Dependence::Independent(ind) => ind.q_neg == 0.0,
            Dependence::JointTable(rows) => rows.iter().all(|r| r.c.iter().all(|&c| c >= 0.0)),
        }
    }

    pub fn mean_n(&self) -> f64 {
        match &self.dependence {
            Dependence::Independent(ind) => ind.n.mean(),
            Dependence::JointTable(rows) => rows.iter().map(|r| r.p * r.c.len() as f64).sum(),
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-discrete enumeration views
// ---------------------------------------------------------------------------

/// One fully specified node outcome (q, c_1..c_n) with its probability.
#[derive(Clone, Debug)]
pub struct NodeOutcome {
    pub q: f64,
    pub c: Vec<f64>,
    pub p: f64,
}

impl BranchingLaw {
    pub fn is_finite_discrete(&self) -> bool {
        match &self.dependence {
            Dependence::JointTable(_) => true,
            Dependence::Independent(ind) => {
                matches!(ind.n, NLaw::Det { .. } | NLaw::Table { .. })
                    && matches!(
                        ind.c_magnitude,
                        CMagnitude::Det { .. } | CMagnitude::TwoPoint { .. } | CMagnitude::Table { .. }
                    )
                    && matches!(ind.q, QLaw::Det { .. } | QLaw::TwoPoint { .. } | QLaw::Table { .. })
            }
        }
    }

    /// Atoms (k, p) of the offspring count; finite-discrete laws only.
    pub fn n_atoms(&self) -> Result<Vec<(u64, f64)>> {
        match &self.dependence {
            Dependence::JointTable(rows) => {
                let mut atoms: Vec<(u64, f64)> = Vec::new();
                for r in rows {
                    merge_atom(&mut atoms, r.c.len() as u64, r.p);
                }
                Ok(atoms)
            }
            Dependence::Independent(ind) => match &ind.n {
                NLaw::Det { k } => Ok(vec![(*k, 1.0)]),
                NLaw::Table { atoms } => {
                    let mut out: Vec<(u64, f64)> = Vec::new();
                    for a in atoms {
                        merge_atom(&mut out, a.k, a.p);
                    }
                    Ok(out)
                }
                _ => Err(Error::NotFiniteDiscrete("offspring law has infinite support".into())),
            },
        }
    }

    /// Atoms (value, p) of the Q marginal; finite-discrete laws only.
    pub fn q_atoms(&self) -> Result<Vec<(f64, f64)>> {
        match &self.dependence {
            Dependence::JointTable(rows) => {
                let mut atoms: Vec<(f64, f64)> = Vec::new();
                for r in rows {
                    merge_value_atom(&mut atoms, r.q, r.p);
                }
                Ok(atoms)
            }
            Dependence::Independent(ind) => match &ind.q {
                QLaw::Det { value } => Ok(vec![(*value, 1.0)]),
                QLaw::TwoPoint { a, p_a, b } => {
                    let mut atoms = Vec::new();
                    merge_value_atom(&mut atoms, *a, *p_a);
                    merge_value_atom(&mut atoms, *b, 1.0 - p_a);
                    Ok(atoms)
                }
                QLaw::Table { atoms } => {
                    let mut out = Vec::new();
                    for a in atoms {
                        merge_value_atom(&mut out, a.value, a.p);
                    }
                    Ok(out)
                }
                _ => Err(Error::NotFiniteDiscrete("Q law has continuous support".into())),
            },
        }
    }

    /// Atoms (signed value, p) of a single weight C; finite-discrete
    /// independent laws only.
    pub fn signed_c_atoms(&self) -> Result<Vec<(f64, f64)>> {
        match &self.dependence {
            Dependence::JointTable(_) => Err(Error::NotFiniteDiscrete(
                "joint tables have no single-weight marginal; use weight_intensity_atoms".into(),
            )),
            Dependence::Independent(ind) => {
                let mags: Vec<(f64, f64)> = match &ind.c_magnitude {
                    CMagnitude::Det { value } => vec![(*value, 1.0)],
                    CMagnitude::TwoPoint { a, p_a, b } => vec![(*a, *p_a), (*b, 1.0 - p_a)],
                    CMagnitude::Table { atoms } => atoms.iter().map(|a| (a.value, a.p)).collect(),
                    CMagnitude::Lognormal { .. } => {
                        return Err(Error::NotFiniteDiscrete("weight magnitude is continuous".into()))
                    }
                };
                let mut out = Vec::new();
                for (v, p) in mags {
                    if ind.q_neg < 1.0 {
                        merge_value_atom(&mut out, v, p * (1.0 - ind.q_neg));
                    }
                    if ind.q_neg > 0.0 {
                        merge_value_atom(&mut out, -v, p * ind.q_neg);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Atoms of the weight intensity: pairs (c, w) with
    /// w = E[#\{i <= N : C_i = c\}], the building block of the tilted
    /// one-step measures. Finite-discrete laws only.
    pub fn weight_intensity_atoms(&self) -> Result<Vec<(f64, f64)>> {
        match &self.dependence {
            Dependence::JointTable(rows) => {
                let mut out: Vec<(f64, f64)> = Vec::new();
                for r in rows {
                    for &c in &r.c {
                        merge_value_atom(&mut out, c, r.p);
                    }
                }
                out.sort_by(|a, b| a.0.total_cmp(&b.0));
                Ok(out)
            }
            Dependence::Independent(_) => {
                let mean_n = self.mean_n();
                let mut out = self.signed_c_atoms()?;
                for a in &mut out {
                    a.1 *= mean_n;
                }
                out.sort_by(|a, b| a.0.total_cmp(&b.0));
                Ok(out)
            }
        }
    }

    /// Fully enumerate node outcomes (q, c-vector, probability).
    /// Finite-discrete laws only; errors out beyond `cap` outcomes.
    pub fn node_outcomes(&self, cap: u64) -> Result<Vec<NodeOutcome>> {
        match &self.dependence {
            Dependence::JointTable(rows) => Ok(rows
                .iter()
                .map(|r| NodeOutcome {
                    q: r.q,
                    c: r.c.clone(),
                    p: r.p,
                })
                .collect()),
            Dependence::Independent(_) => {
                let q_atoms = self.q_atoms()?;
                let n_atoms = self.n_atoms()?;
                let c_atoms = self.signed_c_atoms()?;
                let mut total: u64 = 0;
                for &(k, _) in &n_atoms {
                    let combos = (c_atoms.len() as u64)
                        .checked_pow(k.min(u32::MAX as u64) as u32)
                        .ok_or(Error::EnumerationTooLarge { size: u64::MAX, cap })?;
                    total = total
                        .checked_mul(1)
                        .and_then(|t| t.checked_add(combos.checked_mul(q_atoms.len() as u64)?))
                        .ok_or(Error::EnumerationTooLarge { size: u64::MAX, cap })?;
                    if total > cap {
                        return Err(Error::EnumerationTooLarge { size: total, cap });
                    }
                }
                let mut out = Vec::with_capacity(total as usize);
                for &(q, pq) in &q_atoms {
                    for &(k, pn) in &n_atoms {
                        let mut stack: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
                        for _ in 0..k {
                            let mut next = Vec::with_capacity(stack.len() * c_atoms.len());
                            for (prefix, pp) in &stack {
                                for &(c, pc) in &c_atoms {
                                    let mut v = prefix.clone();
                                    v.push(c);
                                    next.push((v, pp * pc));
                                }
                            }
                            stack = next;
                        }
                        for (c, pc) in stack {
                            out.push(NodeOutcome { q, c, p: pq * pn * pc });
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

fn merge_atom(atoms: &mut Vec<(u64, f64)>, k: u64, p: f64) {
    if let Some(a) = atoms.iter_mut().find(|a| a.0 == k) {
        a.1 += p;
    } else {
        atoms.push((k, p));
    }
}

fn merge_value_atom(atoms: &mut Vec<(f64, f64)>, v: f64, p: f64) {
    if p == 0.0 {
        return;
    }
    if let Some(a) = atoms.iter_mut().find(|a| a.0 == v) {
        a.1 += p;
    } else {
        atoms.push((v, p));
    }
}
