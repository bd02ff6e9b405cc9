//! Shared test helpers: naive f64 oracles for the contrastive losses, written
//! as direct nested loops over pairs with no shared code under test, plus
//! small deterministic input generators.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use scbd::ndcore::Array;

/// Straight-line matching log-probabilities in f64: `q[i][j]` from dot
/// products and an explicit softmax denominator, no max subtraction.
pub fn oracle_match_log_probs(z: &[Vec<f64>], tau: f64, mask_diagonal: bool) -> Vec<Vec<f64>> {
    let n = z.len();
    let mut logits = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for d in 0..z[i].len() {
                dot += z[i][d] * z[j][d];
            }
            logits[i][j] = dot / tau;
            if mask_diagonal && i == j {
                logits[i][j] += -1e9;
            }
        }
    }
    let mut q = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += logits[i][j].exp();
        }
        let log_denom = denom.ln();
        for j in 0..n {
            q[i][j] = logits[i][j] - log_denom;
        }
    }
    q
}

/// Naive O(N^2) supervised contrastive loss: mean over anchors of
/// `-(1/|P(i)|) * sum_{j in P(i)} q[i][j]`, empty positive sets contributing 0.
pub fn oracle_supcon(z: &[Vec<f64>], labels: &[i32], tau: f64, mask_diagonal: bool) -> f64 {
    let n = z.len();
    let q = oracle_match_log_probs(z, tau, mask_diagonal);
    let mut total = 0.0;
    for i in 0..n {
        let mut pos_sum = 0.0;
        let mut pos_count = 0usize;
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                pos_sum += q[i][j];
                pos_count += 1;
            }
        }
        if pos_count > 0 {
            total += -pos_sum / pos_count as f64;
        }
    }
    total / n as f64
}

/// Naive O(N^2) invariance penalty: with self excluded,
/// `lp_i = (1/N) sum_{same env} q[i][j]`, `ln_i = (1/N) sum_{other env} q[i][j]`,
/// loss `mean_i |lp_i - ln_i|`.
pub fn oracle_invariance(z: &[Vec<f64>], e: &[i32], tau: f64, mask_diagonal: bool) -> f64 {
    let n = z.len();
    let q = oracle_match_log_probs(z, tau, mask_diagonal);
    let mut total = 0.0;
    for i in 0..n {
        let mut lp = 0.0;
        let mut ln = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            if e[i] == e[j] {
                lp += q[i][j];
            } else {
                ln += q[i][j];
            }
        }
        total += (lp / n as f64 - ln / n as f64).abs();
    }
    total / n as f64
}

/// Random unit-norm embedding rows. Returns both the f32 array handed to the
/// library and the f64 view (of the f32-rounded values) handed to oracles.
pub fn random_unit_rows(seed: u64, n: usize, d: usize) -> (Array, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; n * d];
    for r in 0..n {
        let mut q = 0.0f64;
        let mut row = vec![0.0f64; d];
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
            q += *v * *v;
        }
        let nrm = q.sqrt().max(1e-9);
        for (c, v) in row.iter().enumerate() {
            data[r * d + c] = (v / nrm) as f32;
        }
    }
    let arr = Array::new(vec![n, d], data).unwrap();
    let as_f64 = (0..n)
        .map(|r| arr.data()[r * d..(r + 1) * d].iter().map(|&v| v as f64).collect())
        .collect();
    (arr, as_f64)
}

/// Random labels over `k` classes.
pub fn random_labels(seed: u64, n: usize, k: i32) -> Vec<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

/// Uniform random array in `[-2, 2]`.
pub fn random_array(seed: u64, shape: &[usize]) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Uniform random array in `[lo, hi]`.
pub fn random_array_in(seed: u64, shape: &[usize], lo: f32, hi: f32) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}
