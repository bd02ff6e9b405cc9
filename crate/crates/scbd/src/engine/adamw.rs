//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use super::EngineError;
use crate::ndcore::Array;

/// What [`AdamW::apply`] did with a gradient set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// At least one gradient entry was NaN/∞; parameters and moments were
    /// left untouched and the skip counter incremented.
    SkippedNonFinite,
}

/// Decoupled-weight-decay Adam over a named parameter table. Decay is
/// applied directly to the parameter (`p ← p − lr·wd·p`) before the
/// moment-based update, so it never enters the moment statistics. Moments
/// are stored f32 like the parameters; update arithmetic runs in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    skipped: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            skipped: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Completed update count.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates skipped because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub(crate) fn moments(&self) -> &BTreeMap<String, (Vec<f32>, Vec<f32>)> {
        &self.moments
    }

    pub(crate) fn from_parts(
        lr: f64,
        weight_decay: f64,
        step: u64,
        skipped: u64,
        moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    ) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            skipped,
            moments,
        }
    }

    /// Applies one optimization step, or skips it entirely if any gradient
    /// value is non-finite. `grads` must cover every parameter exactly.
    pub fn apply(
        &mut self,
        params: &mut BTreeMap<String, Array>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<StepOutcome, EngineError> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| {
                EngineError::Invariant(format!("no gradient for parameter {name}"))
            })?;
            if g.len() != p.len() {
                return Err(EngineError::Invariant(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    p.len()
                )));
            }
        }
        if grads.values().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, out) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mut pi = *out as f64;
                pi -= self.lr * self.weight_decay * pi;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                pi -= self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                *out = pi as f32;
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32) -> BTreeMap<String, Array> {
        BTreeMap::from([("w".to_string(), Array::full(&[1], value))])
    }

    fn grad(g: f32) -> BTreeMap<String, Vec<f32>> {
        BTreeMap::from([("w".to_string(), vec![g])])
    }

    #[test]
    fn single_step_moves_by_about_lr() {
        let mut params = one_param(1.0);
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.apply(&mut params, &grad(0.37)).unwrap();
        let p = params["w"].data()[0];
        // m̂ = g, v̂ = g² after one step, so the update is lr·g/(|g|+ε) ≈ lr.
        let expected = 1.0 - 1e-3;
        assert!((p - expected).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn zero_grad_is_pure_decay() {
        let mut params = one_param(2.0);
        let mut opt = AdamW::new(1e-4, 0.01);
        opt.apply(&mut params, &grad(0.0)).unwrap();
        let p = params["w"].data()[0];
        let expected = 2.0 * (1.0 - 1e-6);
        assert!((p - expected).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn non_finite_grads_skip_and_count() {
        let mut params = one_param(1.0);
        let mut opt = AdamW::new(1e-3, 0.01);
        let out = opt.apply(&mut params, &grad(f32::NAN)).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(opt.skipped(), 1);
        assert_eq!(opt.step_count(), 0);
        assert_eq!(params["w"].data()[0], 1.0);
        // Moments untouched: the next clean step behaves like a first step.
        opt.apply(&mut params, &grad(1.0)).unwrap();
        let p = params["w"].data()[0];
        assert!((p - (1.0 - 1e-5 - 1e-3)).abs() < 1e-5, "p = {p}");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params = one_param(0.5);
            let mut opt = AdamW::new(3e-4, 0.01);
            for i in 0..10 {
                opt.apply(&mut params, &grad((i as f32 * 0.7).sin())).unwrap();
            }
            params["w"].data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = one_param(1.0);
        let mut opt = AdamW::new(1e-3, 0.0);
        let err = opt.apply(&mut params, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, EngineError::Invariant(_)));
    }
}
