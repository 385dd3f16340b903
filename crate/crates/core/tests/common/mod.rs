#![allow(dead_code)]

use apvit::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` around `x`, over every coordinate.
pub fn fd_max_err(loss: impl Fn(&Tensor64) -> f64, x: &Tensor64, analytic: &Tensor64, eps: f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += eps;
        let plus = loss(&p);
        p.data_mut()[i] -= 2.0 * eps;
        let minus = loss(&p);
        worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / (2.0 * eps)));
    }
    worst
}

/// `sum(w * y)`
pub fn weighted(y: &Tensor64, w: &Tensor64) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Indices of the `k` largest values by full sort, ties toward the smaller
/// index, returned ascending.
pub fn sort_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}
