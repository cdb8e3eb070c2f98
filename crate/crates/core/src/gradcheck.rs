//! Central-difference verification of every backward pass.
//!
//! The probes here only ever call forward functions, so they stay independent
//! of the analytic gradients they check.

use serde::{Deserialize, Serialize};

use crate::augmentation::{
    attach_attention, backward_attention, concat, conformity_penalty, PromptEmbedding,
};
use crate::error::Result;
use crate::linalg::{Mat, Rng};
use crate::optimizer::{evaluate_objective, Mode};
use crate::parameterization::{backward_insert, forward_insert, init_params, InsertionParams};
use crate::rewards::{cosine_oracle, finite_diff_grad, net_oracle, quadratic_oracle, RewardOracle};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

/// Pass threshold on the worst per-component relative error.
pub const PASS_THRESHOLD: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0, |acc, (a, n)| acc.max(rel_error(*a, *n)))
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn central_diff(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> Result<f64>) -> Result<Mat> {
    let mut probe = x.clone();
    let mut out = Mat::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let orig = x.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let up = f(&probe)?;
        probe.as_mut_slice()[idx] = orig - h;
        let down = f(&probe)?;
        probe.as_mut_slice()[idx] = orig;
        out.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Central differences of `f` with respect to every trainable scalar, in
/// [`InsertionParams::slices`] order.
pub fn param_central_diff(
    params: &InsertionParams,
    h: f64,
    mut f: impl FnMut(&InsertionParams) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let lens: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
    let mut out = Vec::with_capacity(lens.iter().sum());
    for (slot, len) in lens.into_iter().enumerate() {
        for i in 0..len {
            let orig = probe.slices()[slot][i];
            probe.slices_mut()[slot][i] = orig + h;
            let up = f(&probe)?;
            probe.slices_mut()[slot][i] = orig - h;
            let down = f(&probe)?;
            probe.slices_mut()[slot][i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Worst relative error of the full objective gradient
/// (oracle → conformity → attention → insert parameterization).
pub fn check_full_chain(
    params: &InsertionParams,
    prompt: &PromptEmbedding,
    oracle: &mut dyn RewardOracle,
    mode: Mode,
    gamma: f64,
    h: f64,
) -> Result<f64> {
    let analytic = evaluate_objective(params, prompt, oracle, mode, gamma)?.grads;
    let flat: Vec<f64> = analytic.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let numeric = param_central_diff(params, h, |p| {
        evaluate_objective(p, prompt, oracle, mode, gamma).map(|e| e.objective)
    })?;
    Ok(max_rel_error(&flat, &numeric))
}

/// Worst relative error of `backward_insert` against a random linear functional of `V`.
pub fn check_insert_backward(d: usize, m: usize, n: usize, seed: u64, h: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let p = init_params(d, m, m, n, n, seed)?;
    let (t1, t2) = (rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2));
    let weights = rng.gaussian_mat(d, n);
    let loss = |basis: &Mat, coeffs: &Mat, a: f64, b: f64| -> Result<f64> {
        forward_insert(basis, coeffs, a, b)?.dot(&weights)
    };
    let g = backward_insert(&p.e_pre, &p.z_pre, t1, t2, &weights)?;
    let d_basis = central_diff(&p.e_pre, h, |e| loss(e, &p.z_pre, t1, t2))?;
    let d_coeffs = central_diff(&p.z_pre, h, |z| loss(&p.e_pre, z, t1, t2))?;
    let d_t1 = (loss(&p.e_pre, &p.z_pre, t1 + h, t2)? - loss(&p.e_pre, &p.z_pre, t1 - h, t2)?) / (2.0 * h);
    let d_t2 = (loss(&p.e_pre, &p.z_pre, t1, t2 + h)? - loss(&p.e_pre, &p.z_pre, t1, t2 - h)?) / (2.0 * h);
    Ok(max_rel_error(g.basis.as_slice(), d_basis.as_slice())
        .max(max_rel_error(g.coeffs.as_slice(), d_coeffs.as_slice()))
        .max(rel_error(g.theta1, d_t1))
        .max(rel_error(g.theta2, d_t2)))
}

/// Worst relative error of `backward_attention` against a random linear functional.
pub fn check_attention_backward(d: usize, n: usize, k: usize, seed: u64, h: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let prompt = PromptEmbedding::new(rng.gaussian_mat(d, k), "gradcheck")?;
    let v = rng.gaussian_mat(d, n);
    let weights = rng.gaussian_mat(d, n);
    let analytic = backward_attention(&v, &prompt, &weights)?;
    let numeric = central_diff(&v, h, |x| attach_attention(x, &prompt)?.dot(&weights))?;
    Ok(max_rel_error(analytic.as_slice(), numeric.as_slice()))
}

/// Worst relative error of the conformity-penalty gradient.
pub fn check_conformity(d: usize, seed: u64, h: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let prompt = PromptEmbedding::new(rng.gaussian_mat(d, 3), "gradcheck")?;
    let aug = concat(&rng.gaussian_mat(d, 2), &prompt, &rng.gaussian_mat(d, 2))?;
    let (_, analytic) = conformity_penalty(&aug, &prompt)?;
    let numeric = central_diff(&aug.emb, h, |x| {
        let mut probe = aug.clone();
        probe.emb = x.clone();
        Ok(conformity_penalty(&probe, &prompt)?.0)
    })?;
    Ok(max_rel_error(analytic.as_slice(), numeric.as_slice()))
}

/// Worst relative error of an oracle's returned gradient.
pub fn check_oracle(oracle: &mut dyn RewardOracle, d: usize, seed: u64, h: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let prompt = PromptEmbedding::new(rng.gaussian_mat(d, 3), "gradcheck")?;
    let aug = concat(&rng.gaussian_mat(d, 2), &prompt, &rng.gaussian_mat(d, 1))?;
    let analytic = oracle.evaluate(&aug, &prompt)?.grad;
    let numeric = finite_diff_grad(oracle, &aug, &prompt, h)?;
    Ok(max_rel_error(analytic.as_slice(), numeric.as_slice()))
}

/// Which analytic oracle a check runs against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Quadratic,
    Cosine,
    Net,
}

impl OracleKind {
    pub const ALL: [OracleKind; 3] = [OracleKind::Quadratic, OracleKind::Cosine, OracleKind::Net];

    /// Seeded instance of this oracle kind for `d`-dimensional embeddings.
    pub fn build(self, d: usize, seed: u64) -> Result<Box<dyn RewardOracle>> {
        let mut rng = Rng::new(seed ^ 0xC0FF_EE00);
        Ok(match self {
            OracleKind::Quadratic => Box::new(quadratic_oracle(rng.gaussian_mat(d, 1))?),
            OracleKind::Cosine => Box::new(cosine_oracle(rng.gaussian_mat(d, 1))?),
            OracleKind::Net => Box::new(net_oracle(d, seed, 5)?),
        })
    }
}

/// Parameters for one full-chain configuration: feasible bases with rotated
/// angles and coefficients spread over the box, so no gradient is trivially zero.
pub fn chain_params(d: usize, m: usize, n: usize, seed: u64) -> Result<InsertionParams> {
    let mut p = init_params(d, m, m, n, n, seed)?;
    let mut rng = Rng::new(seed.wrapping_add(17));
    for v in p.z_pre.as_mut_slice().iter_mut().chain(p.z_suff.as_mut_slice()) {
        *v = rng.uniform(-0.9, 0.9);
    }
    p.theta1_pre = rng.uniform(-1.2, 1.2);
    p.theta2_pre = rng.uniform(-1.2, 1.2);
    p.theta1_suff = rng.uniform(-1.2, 1.2);
    p.theta2_suff = rng.uniform(-1.2, 1.2);
    Ok(p)
}

/// Shape of the gradient-check suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub gamma: f64,
    pub seeds: u64,
    pub h: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { d: 8, m: 3, n: 2, k: 4, gamma: 1e-3, seeds: 20, h: FD_STEP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs every backward-pass check and reports the worst error of each.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let mut push = |name: String, err: f64| {
        lines.push(CheckLine { name, max_rel_error: err, passed: err < PASS_THRESHOLD });
    };
    let mut worst = [0.0f64; 3];
    for seed in 0..cfg.seeds {
        worst[0] = worst[0].max(check_insert_backward(cfg.d, cfg.m, cfg.n, seed, cfg.h)?);
        worst[1] = worst[1].max(check_attention_backward(cfg.d, cfg.n, cfg.k, seed, cfg.h)?);
        worst[2] = worst[2].max(check_conformity(cfg.d, seed, cfg.h)?);
    }
    push("insert_backward".into(), worst[0]);
    push("attention_backward".into(), worst[1]);
    push("conformity_penalty".into(), worst[2]);
    for kind in OracleKind::ALL {
        let mut w = 0.0f64;
        for seed in 0..cfg.seeds {
            let mut oracle = kind.build(cfg.d, seed)?;
            w = w.max(check_oracle(oracle.as_mut(), cfg.d, seed, cfg.h)?);
        }
        push(format!("oracle_{}", serde_json::to_value(kind)?.as_str().unwrap_or("?")), w);
    }
    for mode in [Mode::Ipgo, Mode::IpgoPlus] {
        for kind in OracleKind::ALL {
            let mut w = 0.0f64;
            for seed in 0..cfg.seeds {
                let params = chain_params(cfg.d, cfg.m, cfg.n, seed)?;
                let prompt = PromptEmbedding::new(Rng::new(seed + 500).gaussian_mat(cfg.d, cfg.k), "gradcheck")?;
                let mut oracle = kind.build(cfg.d, seed)?;
                w = w.max(check_full_chain(&params, &prompt, oracle.as_mut(), mode, cfg.gamma, cfg.h)?);
            }
            let mode_name = if mode == Mode::Ipgo { "ipgo" } else { "ipgo_plus" };
            let kind_name = serde_json::to_value(kind)?;
            push(format!("full_chain_{mode_name}_{}", kind_name.as_str().unwrap_or("?")), w);
        }
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_backward_matches_fd() {
        for seed in 0..20 {
            let err = check_insert_backward(8, 3, 2, seed, FD_STEP).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn attention_backward_matches_fd() {
        for seed in 0..10 {
            let err = check_attention_backward(4, 2, 3, seed, FD_STEP).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn conformity_gradient_matches_fd() {
        let err = check_conformity(6, 3, FD_STEP).unwrap();
        assert!(err < 1e-7, "{err:e}");
    }

    #[test]
    fn even_functional_has_zero_angle_gradient() {
        // L(V) = Σ V², invariant under any rotation: dθ must vanish at θ = 0
        let p = init_params(8, 3, 3, 2, 2, 1).unwrap();
        let v = forward_insert(&p.e_pre, &p.z_pre, 0.0, 0.0).unwrap();
        let g = backward_insert(&p.e_pre, &p.z_pre, 0.0, 0.0, &v.scale(2.0)).unwrap();
        let h = FD_STEP;
        let sq = |t1: f64| -> f64 {
            let w = forward_insert(&p.e_pre, &p.z_pre, t1, 0.0).unwrap();
            w.dot(&w).unwrap()
        };
        let fd = (sq(h) - sq(-h)) / (2.0 * h);
        assert!(fd.abs() < 1e-8);
        assert!(g.theta1.abs() < 1e-8 && g.theta2.abs() < 1e-8);
    }
}
