//! Prefix/suffix construction `V = R2(θ2) · R1(θ1) · E · Zᵀ` and its backward pass.
//!
//! `R1` rotates the coordinate pairs `(0,1), (2,3), …` and `R2` rotates the
//! offset pairs `(1,2), (3,4), …` plus the wraparound pair `(d-1, 0)`, where
//! coordinate `d-1` takes the first slot of the 2x2 rotation. Both operators
//! act in `O(d·n)` without materializing `d x d` matrices.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, orthonormality_defect, qr_orthonormalize, Mat, Rng};

/// Tolerance on `EᵀE = I` accepted by [`build_insert`].
pub const BASIS_TOLERANCE: f64 = 1e-8;

/// Scale of the uniform coefficient initialization.
pub const COEFF_INIT_SCALE: f64 = 0.1;

/// Which side of the prompt an insert goes on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Pre,
    Suff,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Pre, Side::Suff];

    pub fn name(self) -> &'static str {
        match self {
            Side::Pre => "pre",
            Side::Suff => "suff",
        }
    }
}

/// The trainable parameter set: bases, coefficients and four rotation angles.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertionParams {
    pub e_pre: Mat,
    pub e_suff: Mat,
    pub z_pre: Mat,
    pub z_suff: Mat,
    pub theta1_pre: f64,
    pub theta2_pre: f64,
    pub theta1_suff: f64,
    pub theta2_suff: f64,
}

/// Gradients with the exact layout of [`InsertionParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub e_pre: Mat,
    pub e_suff: Mat,
    pub z_pre: Mat,
    pub z_suff: Mat,
    pub theta1_pre: f64,
    pub theta2_pre: f64,
    pub theta1_suff: f64,
    pub theta2_suff: f64,
}

/// Borrowed view of one side's parameters.
#[derive(Clone, Copy, Debug)]
pub struct InsertView<'a> {
    pub basis: &'a Mat,
    pub coeffs: &'a Mat,
    pub theta1: f64,
    pub theta2: f64,
}

/// Gradients of one side.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertGrads {
    pub basis: Mat,
    pub coeffs: Mat,
    pub theta1: f64,
    pub theta2: f64,
}

impl InsertionParams {
    pub fn dim(&self) -> usize {
        self.e_pre.rows()
    }

    pub fn n_pre(&self) -> usize {
        self.z_pre.rows()
    }

    pub fn n_suff(&self) -> usize {
        self.z_suff.rows()
    }

    pub fn side(&self, side: Side) -> InsertView<'_> {
        match side {
            Side::Pre => InsertView {
                basis: &self.e_pre,
                coeffs: &self.z_pre,
                theta1: self.theta1_pre,
                theta2: self.theta2_pre,
            },
            Side::Suff => InsertView {
                basis: &self.e_suff,
                coeffs: &self.z_suff,
                theta1: self.theta1_suff,
                theta2: self.theta2_suff,
            },
        }
    }

    pub fn angles(&self) -> [f64; 4] {
        [self.theta1_pre, self.theta2_pre, self.theta1_suff, self.theta2_suff]
    }

    /// Every trainable tensor as a flat slice, in a fixed order:
    /// `e_pre, e_suff, z_pre, z_suff, θ1_pre, θ2_pre, θ1_suff, θ2_suff`.
    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.e_pre.as_slice(),
            self.e_suff.as_slice(),
            self.z_pre.as_slice(),
            self.z_suff.as_slice(),
            std::slice::from_ref(&self.theta1_pre),
            std::slice::from_ref(&self.theta2_pre),
            std::slice::from_ref(&self.theta1_suff),
            std::slice::from_ref(&self.theta2_suff),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.e_pre.as_mut_slice(),
            self.e_suff.as_mut_slice(),
            self.z_pre.as_mut_slice(),
            self.z_suff.as_mut_slice(),
            std::slice::from_mut(&mut self.theta1_pre),
            std::slice::from_mut(&mut self.theta2_pre),
            std::slice::from_mut(&mut self.theta1_suff),
            std::slice::from_mut(&mut self.theta2_suff),
        ]
    }

    /// Checks every feasibility invariant, naming the first violated one.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d % 2 != 0 {
            return Err(Error::OddDimension(d));
        }
        for side in Side::BOTH {
            let v = self.side(side);
            check_insert_inputs(v.basis, v.coeffs, v.theta1, v.theta2, side.name())?;
        }
        Ok(())
    }
}

impl ParamGrads {
    pub fn zeros_like(p: &InsertionParams) -> Self {
        ParamGrads {
            e_pre: Mat::zeros(p.e_pre.rows(), p.e_pre.cols()),
            e_suff: Mat::zeros(p.e_suff.rows(), p.e_suff.cols()),
            z_pre: Mat::zeros(p.z_pre.rows(), p.z_pre.cols()),
            z_suff: Mat::zeros(p.z_suff.rows(), p.z_suff.cols()),
            theta1_pre: 0.0,
            theta2_pre: 0.0,
            theta1_suff: 0.0,
            theta2_suff: 0.0,
        }
    }

    pub fn from_sides(pre: InsertGrads, suff: InsertGrads) -> Self {
        ParamGrads {
            e_pre: pre.basis,
            e_suff: suff.basis,
            z_pre: pre.coeffs,
            z_suff: suff.coeffs,
            theta1_pre: pre.theta1,
            theta2_pre: pre.theta2,
            theta1_suff: suff.theta1,
            theta2_suff: suff.theta2,
        }
    }

    /// Same ordering as [`InsertionParams::slices`].
    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.e_pre.as_slice(),
            self.e_suff.as_slice(),
            self.z_pre.as_slice(),
            self.z_suff.as_slice(),
            std::slice::from_ref(&self.theta1_pre),
            std::slice::from_ref(&self.theta2_pre),
            std::slice::from_ref(&self.theta1_suff),
            std::slice::from_ref(&self.theta2_suff),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.e_pre.as_mut_slice(),
            self.e_suff.as_mut_slice(),
            self.z_pre.as_mut_slice(),
            self.z_suff.as_mut_slice(),
            std::slice::from_mut(&mut self.theta1_pre),
            std::slice::from_mut(&mut self.theta2_pre),
            std::slice::from_mut(&mut self.theta1_suff),
            std::slice::from_mut(&mut self.theta2_suff),
        ]
    }

    pub fn global_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for slice in self.slices_mut() {
            for v in slice.iter_mut() {
                *v *= s;
            }
        }
    }

    /// `self += s · other`, shapes assumed equal.
    pub fn axpy(&mut self, s: f64, other: &ParamGrads) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += s * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// The 2x2 rotation `[[cos θ, -sin θ], [sin θ, cos θ]]`.
pub fn elementary_rotation(theta: f64) -> Mat {
    let (s, c) = theta.sin_cos();
    Mat::from_vec(2, 2, vec![c, -s, s, c]).expect("finite angle")
}

#[inline]
fn rotate_pair(x: &mut Mat, first: usize, second: usize, c: f64, s: f64) {
    for j in 0..x.cols() {
        let a = x[(first, j)];
        let b = x[(second, j)];
        x[(first, j)] = c * a - s * b;
        x[(second, j)] = s * a + c * b;
    }
}

fn require_even(d: usize) -> Result<()> {
    if d == 0 || d % 2 != 0 {
        Err(Error::OddDimension(d))
    } else {
        Ok(())
    }
}

/// Rotates coordinate pairs `(2j, 2j+1)` of every column by `theta`.
pub fn apply_r1(theta: f64, x: &Mat) -> Result<Mat> {
    let d = x.rows();
    require_even(d)?;
    let (s, c) = theta.sin_cos();
    let mut out = x.clone();
    for j in 0..d / 2 {
        rotate_pair(&mut out, 2 * j, 2 * j + 1, c, s);
    }
    Ok(out)
}

/// Rotates coordinate pairs `(2j+1, 2j+2)` and the wraparound `(d-1, 0)`.
pub fn apply_r2(theta: f64, x: &Mat) -> Result<Mat> {
    let d = x.rows();
    require_even(d)?;
    let (s, c) = theta.sin_cos();
    let mut out = x.clone();
    for j in 0..d / 2 - 1 {
        rotate_pair(&mut out, 2 * j + 1, 2 * j + 2, c, s);
    }
    rotate_pair(&mut out, d - 1, 0, c, s);
    Ok(out)
}

fn check_insert_inputs(basis: &Mat, coeffs: &Mat, theta1: f64, theta2: f64, label: &str) -> Result<()> {
    let (d, m) = basis.shape();
    require_even(d)?;
    if coeffs.cols() != m {
        return Err(Error::ShapeMismatch {
            op: "build_insert (basis vs coeffs)",
            left_rows: d,
            left_cols: m,
            right_rows: coeffs.rows(),
            right_cols: coeffs.cols(),
        });
    }
    if m == 0 || m > d {
        return Err(Error::Constraint(format!("{label}: basis width m = {m} must satisfy 1 <= m <= d = {d}")));
    }
    let defect = orthonormality_defect(basis);
    if !(defect <= BASIS_TOLERANCE) {
        return Err(Error::Constraint(format!(
            "{label}: orthonormality, max |EᵀE - I| = {defect:e}"
        )));
    }
    if let Some(v) = coeffs.as_slice().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::Constraint(format!("{label}: range, coefficient {v} outside [-1, 1]")));
    }
    for (name, t) in [("theta1", theta1), ("theta2", theta2)] {
        if !angle_in_range(t) {
            return Err(Error::Constraint(format!("{label}: angle {name} = {t} outside (-pi/2, pi/2]")));
        }
    }
    Ok(())
}

pub fn angle_in_range(theta: f64) -> bool {
    theta > -FRAC_PI_2 && theta <= FRAC_PI_2
}

/// Builds `N` insert tokens as a `d x N` matrix after validating constraints.
pub fn build_insert(basis: &Mat, coeffs: &Mat, theta1: f64, theta2: f64) -> Result<Mat> {
    check_insert_inputs(basis, coeffs, theta1, theta2, "insert")?;
    forward_insert(basis, coeffs, theta1, theta2)
}

/// Same product as [`build_insert`] without the feasibility checks.
///
/// Used wherever parameters are deliberately off the feasible set, such as
/// finite-difference probes and the unconstrained Adam iterate.
pub fn forward_insert(basis: &Mat, coeffs: &Mat, theta1: f64, theta2: f64) -> Result<Mat> {
    let combo = matmul_nt(basis, coeffs)?;
    apply_r2(theta2, &apply_r1(theta1, &combo)?)
}

/// Exact gradients of a scalar loss through [`build_insert`], given `dv = ∂L/∂V`.
pub fn backward_insert(basis: &Mat, coeffs: &Mat, theta1: f64, theta2: f64, dv: &Mat) -> Result<InsertGrads> {
    let d = basis.rows();
    if dv.shape() != (d, coeffs.rows()) || coeffs.cols() != basis.cols() {
        return Err(Error::ShapeMismatch {
            op: "backward_insert",
            left_rows: d,
            left_cols: coeffs.rows(),
            right_rows: dv.rows(),
            right_cols: dv.cols(),
        });
    }
    let combo = matmul_nt(basis, coeffs)?; // U = E Zᵀ
    let rotated1 = apply_r1(theta1, &combo)?; // W = R1 U

    // dR/dθ equals the same block structure at θ + π/2 since every coordinate
    // belongs to exactly one rotated pair.
    let theta2_grad = dv.dot(&apply_r2(theta2 + FRAC_PI_2, &rotated1)?)?;
    let dw = apply_r2(-theta2, dv)?; // R2ᵀ dV
    let theta1_grad = dw.dot(&apply_r1(theta1 + FRAC_PI_2, &combo)?)?;
    let du = apply_r1(-theta1, &dw)?; // R1ᵀ R2ᵀ dV

    Ok(InsertGrads {
        basis: matmul(&du, coeffs)?,
        coeffs: matmul_tn(&du, basis)?,
        theta1: theta1_grad,
        theta2: theta2_grad,
    })
}

/// Seeded feasible initialization: QR-orthonormalized Gaussian bases,
/// coefficients uniform in `(-0.1, 0.1)`, all angles zero.
pub fn init_params(d: usize, m_pre: usize, m_suff: usize, n_pre: usize, n_suff: usize, seed: u64) -> Result<InsertionParams> {
    require_even(d)?;
    for (name, m) in [("m_pre", m_pre), ("m_suff", m_suff)] {
        if m == 0 || m > d {
            return Err(Error::InvalidArgument(format!("{name} = {m} must satisfy 1 <= {name} <= d = {d}")));
        }
    }
    if n_pre + n_suff == 0 {
        return Err(Error::InvalidArgument("at least one insert token is required".into()));
    }
    let mut rng = Rng::new(seed);
    let e_pre = qr_orthonormalize(&rng.gaussian_mat(d, m_pre))?;
    let e_suff = qr_orthonormalize(&rng.gaussian_mat(d, m_suff))?;
    let z_pre = rng.uniform_mat(n_pre, m_pre, -COEFF_INIT_SCALE, COEFF_INIT_SCALE);
    let z_suff = rng.uniform_mat(n_suff, m_suff, -COEFF_INIT_SCALE, COEFF_INIT_SCALE);
    Ok(InsertionParams {
        e_pre,
        e_suff,
        z_pre,
        z_suff,
        theta1_pre: 0.0,
        theta2_pre: 0.0,
        theta1_suff: 0.0,
        theta2_suff: 0.0,
    })
}

/// Number of trainable scalars.
pub fn param_count(params: &InsertionParams) -> usize {
    params.slices().iter().map(|s| s.len()).sum()
}
