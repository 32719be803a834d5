//! Shared empirical ingredients for tail functionals: sorted-sample CCDFs
//! and the bootstrap pairing of fresh weight vectors with resampled R draws.

use crate::law::BranchingLaw;
use crate::rng::StreamRng;

/// Empirical P(X > v) on an ascending-sorted slice.
pub(crate) fn ccdf(sorted: &[f64], v: f64) -> f64 {
    let idx = sorted.partition_point(|&x| x <= v);
    (sorted.len() - idx) as f64 / sorted.len() as f64
}

/// Empirical P(X < v) on an ascending-sorted slice.
pub(crate) fn lcdf(sorted: &[f64], v: f64) -> f64 {
    sorted.partition_point(|&x| x < v) as f64 / sorted.len() as f64
}

/// Products C_j * R over `draws` fresh weight vectors, each child slot
/// paired with an independent uniform resample from the batch.
pub(crate) struct PairProducts {
    pub values: Vec<f64>, // ascending
    pub draws: u64,
}

impl PairProducts {
    /// (1/draws) #{products > v} — estimates E[sum_j 1(C_j R > v)].
    pub fn tail_rate(&self, v: f64) -> f64 {
        let idx = self.values.partition_point(|&x| x <= v);
        (self.values.len() - idx) as f64 / self.draws as f64
    }

    /// (1/draws) #{products < v} — estimates E[sum_j 1(C_j R < v)].
    pub fn lower_rate(&self, v: f64) -> f64 {
        self.values.partition_point(|&x| x < v) as f64 / self.draws as f64
    }
}

pub(crate) fn pair_products(
    law: &BranchingLaw,
    r_values: &[f64],
    draws: u64,
    seed: u64,
    stream: u64,
) -> PairProducts {
    let mut rng = StreamRng::new(seed, stream);
    let mut buf = Vec::new();
    let n = r_values.len() as u64;
    let mut values = Vec::new();
    for _ in 0..draws {
        law.sample_vector_into(&mut rng, &mut buf);
        for &c in &buf {
            let r = r_values[(rand::Rng::next_u64(&mut rng) % n) as usize];
            values.push(c * r);
        }
    }
    values.sort_by(f64::total_cmp);
    PairProducts { values, draws }
}
