use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::Result;
use crate::linalg::qr_orthonormalize;
use crate::parameterization::InsertionParams;

/// What [`enforce_constraints`] changed beyond clamping and re-orthonormalizing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConstraintReport {
    /// The prefix coefficients were negated to absorb an odd number of π wraps.
    pub negated_pre: bool,
    pub negated_suff: bool,
}

/// Maps `theta` into `(-π/2, π/2]` by whole multiples of π. Returns the
/// wrapped angle and the number of π shifts applied.
pub fn wrap_angle(theta: f64) -> (f64, i64) {
    let shifts = ((theta - FRAC_PI_2) / PI).ceil();
    let mut wrapped = theta - shifts * PI;
    let mut n = shifts as i64;
    // guard the open lower end against rounding
    if wrapped <= -FRAC_PI_2 {
        wrapped += PI;
        n -= 1;
    }
    if wrapped > FRAC_PI_2 {
        wrapped -= PI;
        n += 1;
    }
    (wrapped, n)
}

/// Projects parameters back onto the feasible set after an unconstrained step:
/// clamps coefficients to `[-1, 1]`, wraps angles into `(-π/2, π/2]`, and
/// re-orthonormalizes both bases.
///
/// Shifting a rotation angle by π negates the whole structured rotation, so
/// each side with an odd total shift has its coefficients negated to leave the
/// built insert unchanged (the coefficient box is symmetric).
pub fn enforce_constraints(params: &mut InsertionParams) -> Result<ConstraintReport> {
    let mut report = ConstraintReport::default();
    let sides = [
        (&mut params.theta1_pre, &mut params.theta2_pre, &mut params.z_pre, &mut report.negated_pre),
        (&mut params.theta1_suff, &mut params.theta2_suff, &mut params.z_suff, &mut report.negated_suff),
    ];
    for (t1, t2, z, negated) in sides {
        let (w1, n1) = wrap_angle(*t1);
        let (w2, n2) = wrap_angle(*t2);
        *t1 = w1;
        *t2 = w2;
        let flip = (n1 + n2).rem_euclid(2) == 1;
        for v in z.as_mut_slice() {
            if flip {
                *v = -*v;
            }
            *v = v.clamp(-1.0, 1.0);
        }
        *negated = flip;
    }
    params.e_pre = qr_orthonormalize(&params.e_pre)?;
    params.e_suff = qr_orthonormalize(&params.e_suff)?;
    Ok(report)
}
