use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;

/// Default ceiling on the share of slices without any infection.
pub const NONINFECTED_TARGET: f64 = 0.30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UndersampleReport {
    pub infected: usize,
    pub noninfected_before: usize,
    pub noninfected_after: usize,
    pub target_fraction: f64,
}

impl UndersampleReport {
    pub fn fraction_after(&self) -> f64 {
        let total = self.infected + self.noninfected_after;
        if total == 0 {
            0.0
        } else {
            self.noninfected_after as f64 / total as f64
        }
    }
}

/// Largest `k` with `k / (infected + k) <= target`.
fn allowed_noninfected(infected: usize, target: f64) -> usize {
    if target >= 1.0 {
        return usize::MAX;
    }
    if target <= 0.0 {
        return 0;
    }
    let mut k = (target * infected as f64 / (1.0 - target)).floor() as usize + 1;
    while k > 0 && k as f64 > target * (infected + k) as f64 {
        k -= 1;
    }
    k
}

/// Randomly drop non-infected slices until their share is at most
/// `target_fraction`. Infected slices are all kept and the survivors stay in
/// their original order.
pub fn undersample_noninfected(samples: Vec<Sample>, target_fraction: f64, seed: u64) -> (Vec<Sample>, UndersampleReport) {
    let clean: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].is_infected()).collect();
    let infected = samples.len() - clean.len();
    let allowed = allowed_noninfected(infected, target_fraction);
    let mut report = UndersampleReport {
        infected,
        noninfected_before: clean.len(),
        noninfected_after: clean.len(),
        target_fraction,
    };
    if clean.len() <= allowed {
        return (samples, report);
    }
    if infected == 0 {
        log::warn!("no infected slices; undersampling removes every slice");
    }
    let mut drop = clean;
    drop.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut removed = vec![false; samples.len()];
    for &i in &drop[allowed..] {
        removed[i] = true;
    }
    report.noninfected_after = allowed;
    let kept = samples
        .into_iter()
        .zip(removed)
        .filter_map(|(s, r)| (!r).then_some(s))
        .collect();
    (kept, report)
}
