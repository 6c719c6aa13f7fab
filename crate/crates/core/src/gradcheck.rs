//! Central-finite-difference gradient checking.
//!
//! The checker treats the objective as a black-box scalar function of a list
//! of parameter matrices and never inspects how the analytic gradients were
//! produced, so it stays an independent route against the tape.

use crate::math::Mat;

/// Central differences of a scalar function w.r.t. every entry of every
/// input matrix. `f` is called with a perturbed copy of the full input list.
pub fn finite_diff_scalar_fn(
    inputs: &[Mat],
    eps: f64,
    f: impl Fn(&[Mat]) -> f64,
) -> Vec<Mat> {
    let mut work: Vec<Mat> = inputs.to_vec();
    let mut grads: Vec<Mat> = inputs
        .iter()
        .map(|m| Mat::zeros(m.rows, m.cols))
        .collect();
    for pi in 0..inputs.len() {
        for ei in 0..inputs[pi].data.len() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + eps;
            let up = f(&work);
            work[pi].data[ei] = orig - eps;
            let down = f(&work);
            work[pi].data[ei] = orig;
            grads[pi].data[ei] = (up - down) / (2.0 * eps);
        }
    }
    grads
}

/// Worst-case relative discrepancy between two gradient sets.
#[derive(Debug, Clone)]
pub struct GradCompare {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: (usize, usize, f64, f64),
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from being judged on noise.
pub fn compare_gradients(analytic: &[Mat], numeric: &[Mat], floor: f64) -> GradCompare {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCompare {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    for (pi, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        assert_eq!(a.data.len(), n.data.len(), "gradient shape mismatch");
        for (ei, (&x, &y)) in a.data.iter().zip(n.data.iter()).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = (pi, ei, x, y);
            }
        }
    }
    out
}
