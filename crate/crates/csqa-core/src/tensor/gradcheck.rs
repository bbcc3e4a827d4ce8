//! Finite-difference verification hooks.
//!
//! Central differences in f64 against tape gradients; the standard harness
//! for every differentiable operation in this crate. The closure re-runs the
//! forward pass at perturbed leaf values, so it must be a pure function of
//! them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (leaf index, element index, analytic, finite-difference) of the worst
    /// coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients against central finite differences at `checks`
/// randomly chosen coordinates.
///
/// `leaves` are the base-point values, `analytic` the tape gradients in the
/// same order, and `eval` recomputes the scalar loss from perturbed values.
pub fn check_gradients(
    mut eval: impl FnMut(&[Vec<f64>]) -> f64,
    leaves: &[Vec<f64>],
    analytic: &[Vec<f64>],
    step: f64,
    checks: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport {
    assert_eq!(leaves.len(), analytic.len());
    let mut work: Vec<Vec<f64>> = leaves.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for _ in 0..checks {
        let li = rng.gen_range(0..leaves.len());
        let ei = rng.gen_range(0..leaves[li].len());
        let base = leaves[li][ei];
        work[li][ei] = base + step;
        let f_plus = eval(&work);
        work[li][ei] = base - step;
        let f_minus = eval(&work);
        work[li][ei] = base;
        let fd = (f_plus - f_minus) / (2.0 * step);
        let an = analytic[li][ei];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
        if rel > max_rel {
            max_rel = rel;
            worst = Some((li, ei, an, fd));
        }
    }
    GradCheckReport { checked: checks, max_rel_err: max_rel, worst }
}
