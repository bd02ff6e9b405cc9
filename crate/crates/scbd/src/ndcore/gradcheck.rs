//! Finite-difference verification of tape gradients.
//!
//! The checker records the function once, takes analytic gradients with
//! [`Tape::backward`], then perturbs one coordinate at a time and re-runs the
//! *same recording* in `f64` via the tape's replay path. Replaying in `f64`
//! matters: a central difference with step 1e-3 on an `f32`-rounded function
//! has a noise floor of roughly `2^-24 / 1e-3 ≈ 6e-5` per unit of loss, which
//! would drown the comparison; against the `f64` replay the quotient is clean
//! and a 1e-4 relative gate is meaningful.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::tape::{NodeId, Tape};
use super::NdError;

/// Tuning knobs for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step `h`.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Cap on coordinates sampled per parameter (all if the parameter is smaller).
    pub max_coords_per_param: usize,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            max_coords_per_param: 256,
            seed: 0x5cbd,
        }
    }
}

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    /// Position of the parameter in the `params` slice.
    pub index: usize,
    /// How many coordinates were compared.
    pub coords_checked: usize,
    /// Worst relative error over the compared coordinates.
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_coord: usize,
    /// Analytic and finite-difference values at the worst coordinate.
    pub analytic: f64,
    /// See `analytic`.
    pub finite_diff: f64,
    /// Whether this parameter stayed within tolerance.
    pub pass: bool,
}

/// Result of [`grad_check`] over all parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Largest relative error across every parameter.
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `build`'s scalar output against central
/// finite differences for every array in `params`.
///
/// `build` receives a fresh tape plus one requires-grad leaf per parameter and
/// must return the loss node.
pub fn grad_check<F>(
    build: F,
    params: &[Array],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NdError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NdError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(NdError::NonScalarLoss {
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Vec::with_capacity(params.len());
    for (pi, (param, &id)) in params.iter().zip(&ids).enumerate() {
        let n = tape.leaf_len(id);
        let coords: Vec<usize> = if n <= cfg.max_coords_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, cfg.max_coords_per_param).into_vec()
        };
        let analytic = grads
            .get(id)
            .expect("requires-grad leaf always has a gradient");
        let base: Vec<f64> = param.data().iter().map(|&v| v as f64).collect();
        let mut check = ParamCheck {
            index: pi,
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            finite_diff: 0.0,
            pass: true,
        };
        for &c in &coords {
            let mut overrides = HashMap::new();
            let mut plus = base.clone();
            plus[c] += cfg.step;
            overrides.insert(id.0, plus);
            let f_plus = tape.replay_f64(loss, &overrides);
            let mut minus = base.clone();
            minus[c] -= cfg.step;
            overrides.insert(id.0, minus);
            let f_minus = tape.replay_f64(loss, &overrides);
            let fd = (f_plus - f_minus) / (2.0 * cfg.step);
            let an = analytic.data()[c] as f64;
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_coord = c;
                check.analytic = an;
                check.finite_diff = fd;
            }
        }
        check.pass = check.max_rel_err <= cfg.tolerance;
        report.push(check);
    }
    let pass = report.iter().all(|p| p.pass);
    Ok(GradCheckReport {
        params: report,
        tolerance: cfg.tolerance,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // loss = mean((A x)^2) has a simple closed-form gradient; the checker
        // should agree to far better than the gate.
        let a = Array::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let x = Array::new(vec![2, 1], vec![0.3, -0.9]).unwrap();
        let report = grad_check(
            |t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                let sq = t.mul(y, y)?;
                t.mean(sq)
            },
            &[a, x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err());
        assert!(report.max_rel_err() < 1e-6);
    }

    #[test]
    fn report_flags_each_parameter() {
        let p = Array::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let report = grad_check(
            |t, ids| {
                let g = t.gelu(ids[0])?;
                t.sum(g)
            },
            &[p],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.params.len(), 1);
        assert_eq!(report.params[0].coords_checked, 4);
        assert!(report.pass);
    }
}
