#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regression_markets::CoalitionLossTable;

pub fn players(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("x{}", i + 2)).collect()
}

/// Random loss table whose full coalition improves on the empty one.
pub fn random_table(k: usize, seed: u64) -> CoalitionLossTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let noise: Vec<f64> = (0..1usize << k).map(|_| rng.random_range(-0.05..0.05)).collect();
    CoalitionLossTable::from_masks(&players(k), |m| {
        let gained: f64 = (0..k).filter(|i| m >> i & 1 == 1).map(|i| weights[i]).sum();
        2.0 - gained + if m == 0 { 0.0 } else { noise[m] }
    })
    .unwrap()
}

/// Shapley values by averaging marginal gains over every ordering.
pub fn permutation_shapley(table: &CoalitionLossTable) -> Vec<f64> {
    let k = table.n_players();
    let mut order: Vec<usize> = (0..k).collect();
    let mut sums = vec![0.0; k];
    let mut count = 0.0;
    loop {
        let mut mask = 0usize;
        for &p in &order {
            let before = table.loss_mask(mask).unwrap();
            mask |= 1 << p;
            sums[p] += before - table.loss_mask(mask).unwrap();
        }
        count += 1.0;
        if !next_permutation(&mut order) {
            break;
        }
    }
    sums.iter().map(|s| s / count).collect()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Smooth quantile loss evaluated independently of the library, without the
/// asymptotic switch.
pub fn sq_loss(e: f64, tau: f64, alpha: f64) -> f64 {
    let z = -e / alpha;
    tau * e + alpha * (z.max(0.0) + (-z.abs()).exp().ln_1p())
}

/// The loss minus the affine part that dominates on the side of `e`, so the
/// finite differences below work on a small, smooth remainder.
fn remainder(e: f64, center: f64, alpha: f64) -> f64 {
    if center > 0.0 {
        alpha * (-e / alpha).exp().ln_1p()
    } else {
        alpha * (e / alpha).exp().ln_1p()
    }
}

fn slope(center: f64, tau: f64) -> f64 {
    if center > 0.0 {
        tau
    } else {
        tau - 1.0
    }
}

/// Richardson-extrapolated central differences of the loss: (first, second).
pub fn sq_finite_differences(e: f64, tau: f64, alpha: f64) -> (f64, f64) {
    let h = 1e-3 * alpha;
    let strip = e.abs() > 8.0 * h;
    let f = |x: f64| {
        if strip {
            remainder(x, e, alpha)
        } else {
            sq_loss(x, tau, alpha)
        }
    };
    let d1 = |h: f64| (f(e + h) - f(e - h)) / (2.0 * h);
    let d2 = |h: f64| (f(e + h) - 2.0 * f(e) + f(e - h)) / (h * h);
    let first = (4.0 * d1(h / 2.0) - d1(h)) / 3.0;
    let second = (4.0 * d2(h / 2.0) - d2(h)) / 3.0;
    if strip {
        (first + slope(e, tau), second)
    } else {
        (first, second)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
