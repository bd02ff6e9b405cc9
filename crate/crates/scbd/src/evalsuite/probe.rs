//! Multinomial logistic-regression probes.
//!
//! Probes quantify what a frozen representation encodes, so they must be
//! cheap and deterministic: zero-initialized full-batch gradient descent on
//! standardized features, all in `f64`. No randomness enters the fit.

use super::EvalError;

/// Probe fitting settings.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub iters: usize,
    pub lr: f64,
    /// L2 penalty on the weights (not the biases).
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iters: 400,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// A fitted multinomial logistic-regression head.
#[derive(Debug, Clone)]
pub struct LogReg {
    classes: Vec<i32>,
    dim: usize,
    /// `dim × classes`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    /// Feature standardization estimated on the training data.
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LogReg {
    /// Fits the probe to `n × dim` features with integer labels.
    pub fn fit(x: &[f32], dim: usize, y: &[i32], cfg: &ProbeConfig) -> Result<Self, EvalError> {
        assert!(dim > 0 && x.len() == y.len() * dim, "features must be n × dim");
        let n = y.len();
        let mut classes: Vec<i32> = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(EvalError::SingleClass(classes.len()));
        }
        let c = classes.len();

        let mut mean = vec![0.0f64; dim];
        for row in 0..n {
            for d in 0..dim {
                mean[d] += f64::from(x[row * dim + d]);
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut scale = vec![0.0f64; dim];
        for row in 0..n {
            for d in 0..dim {
                let v = f64::from(x[row * dim + d]) - mean[d];
                scale[d] += v * v;
            }
        }
        for s in &mut scale {
            *s = (*s / n as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }

        let xs: Vec<f64> = (0..n * dim)
            .map(|i| (f64::from(x[i]) - mean[i % dim]) / scale[i % dim])
            .collect();
        let targets: Vec<usize> = y
            .iter()
            .map(|label| classes.binary_search(label).expect("label seen above"))
            .collect();

        let mut w = vec![0.0f64; dim * c];
        let mut b = vec![0.0f64; c];
        let mut probs = vec![0.0f64; c];
        let mut gw = vec![0.0f64; dim * c];
        let mut gb = vec![0.0f64; c];
        for _ in 0..cfg.iters {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for row in 0..n {
                let feat = &xs[row * dim..(row + 1) * dim];
                softmax_into(feat, &w, &b, dim, c, &mut probs);
                probs[targets[row]] -= 1.0;
                for d in 0..dim {
                    for k in 0..c {
                        gw[d * c + k] += feat[d] * probs[k];
                    }
                }
                for k in 0..c {
                    gb[k] += probs[k];
                }
            }
            let inv_n = 1.0 / n as f64;
            for i in 0..dim * c {
                w[i] -= cfg.lr * (gw[i] * inv_n + cfg.l2 * w[i]);
            }
            for k in 0..c {
                b[k] -= cfg.lr * gb[k] * inv_n;
            }
        }
        Ok(LogReg {
            classes,
            dim,
            w,
            b,
            mean,
            scale,
        })
    }

    /// Predicted class label per row.
    pub fn predict(&self, x: &[f32]) -> Vec<i32> {
        assert_eq!(x.len() % self.dim, 0, "features must be n × dim");
        let c = self.classes.len();
        let mut probs = vec![0.0f64; c];
        let mut feat = vec![0.0f64; self.dim];
        let mut out = Vec::with_capacity(x.len() / self.dim);
        for row in 0..x.len() / self.dim {
            for d in 0..self.dim {
                feat[d] = (f64::from(x[row * self.dim + d]) - self.mean[d]) / self.scale[d];
            }
            softmax_into(&feat, &self.w, &self.b, self.dim, c, &mut probs);
            let mut arg = 0;
            for k in 1..c {
                if probs[k] > probs[arg] {
                    arg = k;
                }
            }
            out.push(self.classes[arg]);
        }
        out
    }

    /// Fraction of rows predicted correctly.
    pub fn accuracy(&self, x: &[f32], y: &[i32]) -> f64 {
        let pred = self.predict(x);
        assert_eq!(pred.len(), y.len(), "features must match labels");
        let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
        hits as f64 / y.len() as f64
    }
}

fn softmax_into(feat: &[f64], w: &[f64], b: &[f64], dim: usize, c: usize, out: &mut [f64]) {
    for k in 0..c {
        out[k] = b[k];
    }
    for d in 0..dim {
        let f = feat[d];
        for k in 0..c {
            out[k] += f * w[d * c + k];
        }
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// Fits a probe on the training features and scores a disjoint split.
pub fn probe_accuracy(
    train_x: &[f32],
    dim: usize,
    train_y: &[i32],
    test_x: &[f32],
    test_y: &[i32],
    cfg: &ProbeConfig,
) -> Result<f64, EvalError> {
    let probe = LogReg::fit(train_x, dim, train_y, cfg)?;
    Ok(probe.accuracy(test_x, test_y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::substream;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, classes: usize, dim: usize, seed: u64) -> (Vec<f32>, Vec<i32>) {
        let noise = Normal::new(0.0f64, 0.3).unwrap();
        let mut rng = substream(seed, "probe-blobs", 0);
        let mut x = Vec::with_capacity(n * dim);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            for d in 0..dim {
                let center = if d == class { 2.0 } else { 0.0 };
                x.push(center + noise.sample(&mut rng) as f32);
            }
            y.push(class as i32);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let (train_x, train_y) = blobs(200, 4, 6, 0);
        let (test_x, test_y) = blobs(100, 4, 6, 1);
        let acc = probe_accuracy(
            &train_x,
            6,
            &train_y,
            &test_x,
            &test_y,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn shuffled_labels_score_at_chance() {
        let (train_x, mut train_y) = blobs(400, 4, 6, 2);
        let (test_x, mut test_y) = blobs(400, 4, 6, 3);
        train_y.shuffle(&mut substream(9, "shuffle", 0));
        test_y.shuffle(&mut substream(9, "shuffle", 1));
        let acc = probe_accuracy(
            &train_x,
            6,
            &train_y,
            &test_x,
            &test_y,
            &ProbeConfig::default(),
        )
        .unwrap();
        // 3σ binomial band around 1/4 at n = 400.
        let sigma = (0.25f64 * 0.75 / 400.0).sqrt();
        assert!((acc - 0.25).abs() <= 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn fitting_is_deterministic() {
        let (x, y) = blobs(120, 3, 5, 4);
        let a = LogReg::fit(&x, 5, &y, &ProbeConfig::default()).unwrap();
        let b = LogReg::fit(&x, 5, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.b, b.b);
        assert_eq!(a.predict(&x), b.predict(&x));
    }

    #[test]
    fn single_class_is_an_error() {
        let (x, _) = blobs(20, 2, 4, 5);
        let y = vec![7i32; 20];
        match LogReg::fit(&x, 4, &y, &ProbeConfig::default()) {
            Err(EvalError::SingleClass(1)) => {}
            other => panic!("expected SingleClass, got {other:?}"),
        }
    }

    #[test]
    fn constant_features_do_not_blow_up() {
        let x = vec![1.0f32; 40 * 3];
        let y: Vec<i32> = (0..40).map(|i| (i % 2) as i32).collect();
        let probe = LogReg::fit(&x, 3, &y, &ProbeConfig::default()).unwrap();
        let acc = probe.accuracy(&x, &y);
        assert!((0.0..=1.0).contains(&acc));
    }
}
