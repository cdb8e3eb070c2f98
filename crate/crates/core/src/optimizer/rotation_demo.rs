//! Two-dimensional illustration of rotation-assisted descent.
//!
//! On `f(x) = ‖A(x - x*)‖²` with `x = R(θ) y`, each rotation step picks the
//! angle at which the circle of radius `‖x‖` is tangent to a level set of `f`,
//! i.e. `∇f(x)ᵀ (dR/dθ) y = 0`, and then takes an exact line search along the
//! gradient at that point. Plain descent uses the same line search without the
//! rotation. Path length counts the line-search displacements; the arcs swept
//! by rotations are reported separately.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Rng};

/// Gradient norm at which both methods stop.
pub const GRAD_TOL: f64 = 1e-12;

/// `f(x) = ‖A(x - x*)‖²` for symmetric positive definite `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic2 {
    /// `M = AᵀA`, the half-Hessian.
    m: [[f64; 2]; 2],
    x_star: [f64; 2],
}

impl Quadratic2 {
    pub fn new(a: &Mat, x_star: &Mat) -> Result<Self> {
        if a.shape() != (2, 2) || x_star.shape() != (2, 1) {
            return Err(Error::InvalidArgument("expected a 2x2 matrix and a 2x1 optimum".into()));
        }
        a.ensure_finite("quadratic matrix")?;
        x_star.ensure_finite("quadratic optimum")?;
        let (p, q, r, s) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
        let sym_tol = 1e-12 * a.max_abs().max(1.0);
        if (q - r).abs() > sym_tol || p <= 0.0 || p * s - q * r <= 0.0 {
            return Err(Error::InvalidArgument("A must be symmetric positive definite".into()));
        }
        let m = [[p * p + r * r, p * q + r * s], [q * p + s * r, q * q + s * s]];
        Ok(Quadratic2 { m, x_star: [x_star[(0, 0)], x_star[(1, 0)]] })
    }

    pub fn x_star(&self) -> [f64; 2] {
        self.x_star
    }

    fn mv(&self, v: [f64; 2]) -> [f64; 2] {
        [self.m[0][0] * v[0] + self.m[0][1] * v[1], self.m[1][0] * v[0] + self.m[1][1] * v[1]]
    }

    pub fn value(&self, x: [f64; 2]) -> f64 {
        let e = sub(x, self.x_star);
        dot(e, self.mv(e))
    }

    pub fn grad(&self, x: [f64; 2]) -> [f64; 2] {
        let me = self.mv(sub(x, self.x_star));
        [2.0 * me[0], 2.0 * me[1]]
    }

    /// Exact minimizer of `f(x - α g)` over `α` when `g = ∇f(x)`.
    fn line_search(&self, g: [f64; 2]) -> f64 {
        let curvature = dot(g, self.mv(g));
        if curvature <= 0.0 {
            0.0
        } else {
            dot(g, g) / (2.0 * curvature)
        }
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f64; 2]) -> f64 {
    dot(a, a).sqrt()
}

fn rotate(theta: f64, y: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * y[0] - s * y[1], s * y[0] + c * y[1]]
}

/// Closed-form stationary angle of the linear model `θ ↦ gᵀR(θ)y`:
/// `tan θ = -(gᵀR(π/2)y) / (gᵀR(π)y)`, choosing the branch that minimizes the model.
pub fn tangency_angle(g: [f64; 2], y: [f64; 2]) -> f64 {
    let a = dot(g, rotate(FRAC_PI_2, y));
    let b = dot(g, rotate(PI, y));
    let theta = (-a).atan2(b);
    // θ and θ+π are both stationary; keep the one with the smaller model value
    if dot(g, rotate(theta, y)) <= dot(g, rotate(theta + PI, y)) {
        theta
    } else {
        theta + PI
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DescentPath {
    pub points: Vec<[f64; 2]>,
    /// Rotation angle after each step (constant zero for plain descent).
    pub thetas: Vec<f64>,
    /// Sum of line-search displacement lengths.
    pub path_length: f64,
    /// Sum of arc lengths swept by rotations.
    pub arc_length: f64,
    /// `|∇f(x)ᵀ (dR/dθ) y|` at every accepted rotation.
    pub tangency_residuals: Vec<f64>,
    pub steps: usize,
    pub final_error: f64,
}

impl DescentPath {
    fn start(x0: [f64; 2]) -> Self {
        DescentPath {
            points: vec![x0],
            thetas: vec![0.0],
            path_length: 0.0,
            arc_length: 0.0,
            tangency_residuals: Vec::new(),
            steps: 0,
            final_error: 0.0,
        }
    }

    pub fn max_tangency_residual(&self) -> f64 {
        self.tangency_residuals.iter().fold(0.0, |a, b| a.max(*b))
    }
}

fn as_point(x0: &Mat) -> Result<[f64; 2]> {
    if x0.shape() != (2, 1) {
        return Err(Error::InvalidArgument("start point must be 2x1".into()));
    }
    Ok([x0[(0, 0)], x0[(1, 0)]])
}

/// Gradient descent with exact line search.
pub fn plain_gd_2d(q: &Quadratic2, x0: &Mat, steps: usize) -> Result<DescentPath> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let mut x = as_point(x0)?;
    let mut path = DescentPath::start(x);
    for _ in 0..steps {
        let g = q.grad(x);
        if norm(g) <= GRAD_TOL {
            break;
        }
        let alpha = q.line_search(g);
        let next = [x[0] - alpha * g[0], x[1] - alpha * g[1]];
        path.path_length += norm(sub(next, x));
        x = next;
        path.points.push(x);
        path.thetas.push(0.0);
        path.steps += 1;
    }
    path.final_error = norm(sub(x, q.x_star));
    Ok(path)
}

/// Derivative of `φ(θ) = f(R(θ) y)` and its second derivative.
fn angle_derivatives(q: &Quadratic2, theta: f64, y: [f64; 2]) -> (f64, f64) {
    let u = rotate(theta, y);
    let ju = rotate(FRAC_PI_2, u);
    let g = q.grad(u);
    let first = dot(g, ju);
    let second = 2.0 * dot(q.mv(ju), ju) - dot(g, u);
    (first, second)
}

/// Angle minimizing `f` on the circle through `y`, polished until the
/// tangency condition holds to rounding.
fn tangent_point_angle(q: &Quadratic2, y: [f64; 2], seed_angle: f64) -> f64 {
    const GRID: usize = 256;
    let mut best = seed_angle;
    let mut best_val = q.value(rotate(seed_angle, y));
    for i in 0..GRID {
        let t = 2.0 * PI * i as f64 / GRID as f64;
        let v = q.value(rotate(t, y));
        if v < best_val {
            best_val = v;
            best = t;
        }
    }
    // safeguarded Newton on φ' inside the bracket around the best sample
    let half = 2.0 * PI / GRID as f64;
    let (mut lo, mut hi) = (best - half, best + half);
    let mut theta = best;
    for _ in 0..100 {
        let (d1, d2) = angle_derivatives(q, theta, y);
        if d1 == 0.0 {
            break;
        }
        if d1 > 0.0 {
            hi = theta;
        } else {
            lo = theta;
        }
        let newton = if d2 > 0.0 { theta - d1 / d2 } else { f64::NAN };
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - theta).abs() <= 1e-16 * theta.abs().max(1.0) {
            theta = next;
            break;
        }
        theta = next;
    }
    theta
}

/// Rotation-assisted descent. The first move is a plain line-search step;
/// every later step rotates to the tangent point, then line-searches along the
/// gradient there.
pub fn rotation_descent_2d(q: &Quadratic2, x0: &Mat, steps: usize) -> Result<DescentPath> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let mut x = as_point(x0)?;
    let mut path = DescentPath::start(x);
    let mut theta = 0.0f64;

    for step in 0..steps {
        let g = q.grad(x);
        if norm(g) <= GRAD_TOL {
            break;
        }
        let mut start = x;
        if step > 0 && norm(x) > 0.0 {
            let y = rotate(-theta, x);
            let seed = tangency_angle(g, y);
            let new_theta = tangent_point_angle(q, y, seed);
            let (residual, _) = angle_derivatives(q, new_theta, y);
            path.tangency_residuals.push(residual.abs());
            let mut swept = (new_theta - theta).rem_euclid(2.0 * PI);
            if swept > PI {
                swept = 2.0 * PI - swept;
            }
            path.arc_length += norm(x) * swept;
            theta = new_theta;
            start = rotate(theta, y);
        }
        let gs = q.grad(start);
        let alpha = q.line_search(gs);
        let next = [start[0] - alpha * gs[0], start[1] - alpha * gs[1]];
        path.path_length += norm(sub(next, start));
        x = next;
        path.points.push(x);
        path.thetas.push(theta);
        path.steps += 1;
    }
    path.final_error = norm(sub(x, q.x_star));
    Ok(path)
}

/// One quadratic of the seeded comparison suite and both runs on it.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub index: usize,
    pub condition: f64,
    pub rotation: DescentPath,
    pub plain: DescentPath,
}

impl SuiteCase {
    pub fn rotation_not_longer(&self) -> bool {
        self.rotation.path_length <= self.plain.path_length
    }
}

/// Maximum steps for suite runs.
pub const SUITE_STEPS: usize = 20_000;

/// Builds quadratic `index` of the seeded suite: Hessian condition number in
/// `[5, 50]`, random eigenbasis, optimum at distance `[1, 3]` from the origin.
pub fn suite_quadratic(seed: u64, index: usize) -> (Quadratic2, f64) {
    let mut rng = Rng::new(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let condition = rng.uniform(5.0, 50.0);
    let phi = rng.uniform(0.0, PI);
    let (s, c) = phi.sin_cos();
    // A = Q diag(1, √κ) Qᵀ so that AᵀA has condition number κ
    let (l1, l2) = (1.0, condition.sqrt());
    let a = Mat::from_rows(&[
        &[c * c * l1 + s * s * l2, c * s * (l1 - l2)],
        &[c * s * (l1 - l2), s * s * l1 + c * c * l2],
    ])
    .expect("finite");
    let radius = rng.uniform(1.0, 3.0);
    let dir = rng.uniform(0.0, 2.0 * PI);
    let x_star = Mat::column_vector(&[radius * dir.cos(), radius * dir.sin()]);
    (Quadratic2::new(&a, &x_star).expect("suite matrices are SPD"), condition)
}

/// Runs both methods from the origin on `count` seeded quadratics.
pub fn run_suite(seed: u64, count: usize) -> Result<Vec<SuiteCase>> {
    let origin = Mat::zeros(2, 1);
    (0..count)
        .map(|index| {
            let (q, condition) = suite_quadratic(seed, index);
            Ok(SuiteCase {
                index,
                condition,
                rotation: rotation_descent_2d(&q, &origin, SUITE_STEPS)?,
                plain: plain_gd_2d(&q, &origin, SUITE_STEPS)?,
            })
        })
        .collect()
}

/// Fraction of cases where the rotation path is not longer than plain descent.
pub fn rotation_win_fraction(cases: &[SuiteCase]) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    cases.iter().filter(|c| c.rotation_not_longer()).count() as f64 / cases.len() as f64
}

/// Per-case comparison table as CSV.
pub fn suite_csv(cases: &[SuiteCase]) -> String {
    let mut out = String::from(
        "case,condition,rotation_path,plain_path,rotation_arc,rotation_steps,plain_steps,rotation_error,plain_error,max_tangency_residual,rotation_not_longer\n",
    );
    for c in cases {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            c.index,
            c.condition,
            c.rotation.path_length,
            c.plain.path_length,
            c.rotation.arc_length,
            c.rotation.steps,
            c.plain.steps,
            c.rotation.final_error,
            c.plain.final_error,
            c.rotation.max_tangency_residual(),
            c.rotation_not_longer()
        ));
    }
    out
}

/// Iterates of both methods as CSV rows `method,step,x,y,theta`.
pub fn trajectories_csv(rotation: &DescentPath, plain: &DescentPath) -> String {
    let mut out = String::from("method,step,x,y,theta\n");
    for (name, path) in [("rotation", rotation), ("plain", plain)] {
        for (i, (p, t)) in path.points.iter().zip(&path.thetas).enumerate() {
            out.push_str(&format!("{name},{i},{},{},{t}\n", p[0], p[1]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> Quadratic2 {
        let a = Mat::from_rows(&[&[3.0, 1.0], &[1.0, 2.0]]).unwrap();
        Quadratic2::new(&a, &Mat::column_vector(&[1.0, -2.0])).unwrap()
    }

    #[test]
    fn start_at_optimum_has_zero_length() {
        let q = quad();
        let x0 = Mat::column_vector(&[1.0, -2.0]);
        let rot = rotation_descent_2d(&q, &x0, 10).unwrap();
        let plain = plain_gd_2d(&q, &x0, 10).unwrap();
        assert_eq!(rot.path_length, 0.0);
        assert_eq!(plain.path_length, 0.0);
        assert_eq!(rot.steps, 0);
    }

    #[test]
    fn rejects_non_spd() {
        let bad = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        assert!(Quadratic2::new(&bad, &Mat::zeros(2, 1)).is_err());
        let asym = Mat::from_rows(&[&[2.0, 0.5], &[0.0, 2.0]]).unwrap();
        assert!(Quadratic2::new(&asym, &Mat::zeros(2, 1)).is_err());
    }

    #[test]
    fn both_converge_with_tangency() {
        let q = quad();
        let origin = Mat::zeros(2, 1);
        let rot = rotation_descent_2d(&q, &origin, SUITE_STEPS).unwrap();
        let plain = plain_gd_2d(&q, &origin, SUITE_STEPS).unwrap();
        assert!(rot.final_error < 1e-6, "{}", rot.final_error);
        assert!(plain.final_error < 1e-6);
        assert!(rot.max_tangency_residual() < 1e-10);
    }

    #[test]
    fn closed_form_angle_is_stationary_for_the_linear_model() {
        let g = [0.3, -1.2];
        let y = [2.0, 0.5];
        let t = tangency_angle(g, y);
        let residual = dot(g, rotate(FRAC_PI_2, rotate(t, y)));
        assert!(residual.abs() < 1e-14);
        // minimizing branch: R(θ)y points against g
        let u = rotate(t, y);
        assert!(dot(g, u) < 0.0);
    }

    #[test]
    fn suite_is_deterministic() {
        let a = suite_csv(&run_suite(7, 5).unwrap());
        let b = suite_csv(&run_suite(7, 5).unwrap());
        assert_eq!(a, b);
    }
}
