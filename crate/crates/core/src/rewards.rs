//! Reward oracles: anything that scores an augmented embedding and returns
//! the gradient of that score with respect to the embedding.
//!
//! Whatever sits behind the embeddings (a sampler with a fixed initial latent,
//! the generated image, a learned reward network) is the oracle's business.
//! The analytic oracles here collapse that chain into closed-form functions of
//! the token mean so every backward pass can be checked on a desk.

use std::collections::BTreeMap;

use crate::augmentation::{AugmentedEmbedding, PromptEmbedding};
use crate::error::{Error, Result};
use crate::linalg::{token_mean, Mat, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub reward: f64,
    /// `∂reward/∂aug.emb`, same shape as the input.
    pub grad: Mat,
    pub aux: BTreeMap<String, f64>,
}

impl OracleResult {
    pub fn new(reward: f64, grad: Mat) -> Self {
        OracleResult { reward, grad, aux: BTreeMap::new() }
    }
}

/// Embedding width and token limit an oracle accepts. `None` means any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleDims {
    pub d: Option<usize>,
    pub max_tokens: Option<usize>,
}

pub trait RewardOracle {
    /// Scores `aug` for `prompt`. Deterministic for fixed inputs and state.
    fn evaluate(&mut self, aug: &AugmentedEmbedding, prompt: &PromptEmbedding) -> Result<OracleResult>;

    fn describe(&self) -> String;

    fn dims(&self) -> OracleDims;

    /// Errors unless the oracle accepts `d`-dimensional embeddings of `tokens` columns.
    fn check_compatible(&self, d: usize, tokens: usize) -> Result<()> {
        let dims = self.dims();
        if let Some(expected) = dims.d {
            if expected != d {
                return Err(Error::Oracle(format!(
                    "{} expects d = {expected}, got d = {d}",
                    self.describe()
                )));
            }
        }
        if let Some(max) = dims.max_tokens {
            if tokens > max {
                return Err(Error::Oracle(format!(
                    "{} accepts at most {max} tokens, got {tokens}",
                    self.describe()
                )));
            }
        }
        Ok(())
    }
}

impl<T: RewardOracle + ?Sized> RewardOracle for Box<T> {
    fn evaluate(&mut self, aug: &AugmentedEmbedding, prompt: &PromptEmbedding) -> Result<OracleResult> {
        (**self).evaluate(aug, prompt)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }

    fn dims(&self) -> OracleDims {
        (**self).dims()
    }
}

fn check_dim(name: &str, expected: usize, aug: &AugmentedEmbedding) -> Result<()> {
    if aug.emb.rows() != expected {
        return Err(Error::Oracle(format!(
            "{name}: expects d = {expected}, got {}x{} embedding",
            aug.emb.rows(),
            aug.emb.cols()
        )));
    }
    Ok(())
}

/// Spreads `∂r/∂μ` over the `tokens` columns that μ averages.
fn broadcast_mean_grad(d_mu: &[f64], tokens: usize) -> Mat {
    let scaled: Vec<f64> = d_mu.iter().map(|g| g / tokens as f64).collect();
    let mut grad = Mat::zeros(d_mu.len(), tokens);
    for j in 0..tokens {
        grad.set_column(j, &scaled);
    }
    grad
}

/// `reward = -‖mean(aug) - target‖²`.
#[derive(Clone, Debug)]
pub struct QuadraticOracle {
    target: Mat,
}

pub fn quadratic_oracle(target: Mat) -> Result<QuadraticOracle> {
    if target.cols() != 1 || target.rows() == 0 {
        return Err(Error::InvalidArgument("quadratic target must be a d x 1 column".into()));
    }
    target.ensure_finite("quadratic target")?;
    Ok(QuadraticOracle { target })
}

impl QuadraticOracle {
    pub fn target(&self) -> &Mat {
        &self.target
    }
}

impl RewardOracle for QuadraticOracle {
    fn evaluate(&mut self, aug: &AugmentedEmbedding, _prompt: &PromptEmbedding) -> Result<OracleResult> {
        check_dim("quadratic", self.target.rows(), aug)?;
        let diff = token_mean(&aug.emb)?.sub(&self.target)?;
        let reward = -diff.as_slice().iter().map(|v| v * v).sum::<f64>();
        let d_mu: Vec<f64> = diff.as_slice().iter().map(|v| -2.0 * v).collect();
        Ok(OracleResult::new(reward, broadcast_mean_grad(&d_mu, aug.total_tokens())))
    }

    fn describe(&self) -> String {
        format!("quadratic(d={})", self.target.rows())
    }

    fn dims(&self) -> OracleDims {
        OracleDims { d: Some(self.target.rows()), max_tokens: None }
    }
}

/// `reward = ⟨μ, target⟩ / (‖μ‖ ‖target‖)`.
#[derive(Clone, Debug)]
pub struct CosineOracle {
    target: Mat,
}

pub fn cosine_oracle(target: Mat) -> Result<CosineOracle> {
    if target.cols() != 1 || target.rows() == 0 {
        return Err(Error::InvalidArgument("cosine target must be a d x 1 column".into()));
    }
    target.ensure_finite("cosine target")?;
    if target.as_slice().iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidArgument("cosine target must be nonzero".into()));
    }
    Ok(CosineOracle { target })
}

impl RewardOracle for CosineOracle {
    fn evaluate(&mut self, aug: &AugmentedEmbedding, _prompt: &PromptEmbedding) -> Result<OracleResult> {
        check_dim("cosine", self.target.rows(), aug)?;
        let mu = token_mean(&aug.emb)?;
        let mu_norm = mu.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        if mu_norm == 0.0 {
            return Err(Error::UndefinedCosine);
        }
        let t = self.target.as_slice();
        let t_norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inner: f64 = mu.as_slice().iter().zip(t).map(|(a, b)| a * b).sum();
        let reward = inner / (mu_norm * t_norm);
        // quotient rule: t / (‖μ‖‖t‖) - r μ / ‖μ‖²
        let d_mu: Vec<f64> = mu
            .as_slice()
            .iter()
            .zip(t)
            .map(|(m, tv)| tv / (mu_norm * t_norm) - reward * m / (mu_norm * mu_norm))
            .collect();
        Ok(OracleResult::new(reward, broadcast_mean_grad(&d_mu, aug.total_tokens())))
    }

    fn describe(&self) -> String {
        format!("cosine(d={})", self.target.rows())
    }

    fn dims(&self) -> OracleDims {
        OracleDims { d: Some(self.target.rows()), max_tokens: None }
    }
}

/// Frozen two-layer scorer `w2 · tanh(W1 μ + b1) + b2` with seeded weights.
#[derive(Clone, Debug)]
pub struct NetOracle {
    w1: Mat,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    seed: u64,
}

pub fn net_oracle(d: usize, seed: u64, hidden_width: usize) -> Result<NetOracle> {
    if hidden_width == 0 || d == 0 {
        return Err(Error::InvalidArgument("net oracle needs d >= 1 and hidden_width >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let w1 = rng.gaussian_mat(hidden_width, d).scale(1.0 / (d as f64).sqrt());
    let b1 = (0..hidden_width).map(|_| 0.1 * rng.normal()).collect();
    let w2 = (0..hidden_width).map(|_| rng.normal() / (hidden_width as f64).sqrt()).collect();
    let b2 = 0.1 * rng.normal();
    Ok(NetOracle { w1, b1, w2, b2, seed })
}

impl RewardOracle for NetOracle {
    fn evaluate(&mut self, aug: &AugmentedEmbedding, _prompt: &PromptEmbedding) -> Result<OracleResult> {
        check_dim("net", self.w1.cols(), aug)?;
        let mu = token_mean(&aug.emb)?;
        let d = self.w1.cols();
        let hidden: Vec<f64> = (0..self.w1.rows())
            .map(|i| {
                let pre: f64 = (0..d).map(|k| self.w1[(i, k)] * mu[(k, 0)]).sum::<f64>() + self.b1[i];
                pre.tanh()
            })
            .collect();
        let reward = hidden.iter().zip(&self.w2).map(|(h, w)| h * w).sum::<f64>() + self.b2;
        let d_pre: Vec<f64> = hidden.iter().zip(&self.w2).map(|(h, w)| w * (1.0 - h * h)).collect();
        let d_mu: Vec<f64> = (0..d)
            .map(|k| (0..self.w1.rows()).map(|i| self.w1[(i, k)] * d_pre[i]).sum())
            .collect();
        Ok(OracleResult::new(reward, broadcast_mean_grad(&d_mu, aug.total_tokens())))
    }

    fn describe(&self) -> String {
        format!("net(d={}, width={}, seed={})", self.w1.cols(), self.w1.rows(), self.seed)
    }

    fn dims(&self) -> OracleDims {
        OracleDims { d: Some(self.w1.cols()), max_tokens: None }
    }
}

/// Returns a fixed reward and a zero gradient.
#[derive(Clone, Debug, Default)]
pub struct ConstantOracle {
    pub reward: f64,
}

impl RewardOracle for ConstantOracle {
    fn evaluate(&mut self, aug: &AugmentedEmbedding, _prompt: &PromptEmbedding) -> Result<OracleResult> {
        Ok(OracleResult::new(self.reward, Mat::zeros(aug.emb.rows(), aug.emb.cols())))
    }

    fn describe(&self) -> String {
        format!("constant({})", self.reward)
    }

    fn dims(&self) -> OracleDims {
        OracleDims { d: None, max_tokens: None }
    }
}

/// Central-difference gradient of the oracle's reward, one entry at a time.
pub fn finite_diff_grad(
    oracle: &mut dyn RewardOracle,
    aug: &AugmentedEmbedding,
    prompt: &PromptEmbedding,
    h: f64,
) -> Result<Mat> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut probe = aug.clone();
    let mut grad = Mat::zeros(aug.emb.rows(), aug.emb.cols());
    for i in 0..aug.emb.rows() {
        for j in 0..aug.emb.cols() {
            let orig = aug.emb[(i, j)];
            probe.emb[(i, j)] = orig + h;
            let up = oracle.evaluate(&probe, prompt)?.reward;
            probe.emb[(i, j)] = orig - h;
            let down = oracle.evaluate(&probe, prompt)?.reward;
            probe.emb[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::concat;

    fn instance(d: usize, seed: u64) -> (AugmentedEmbedding, PromptEmbedding) {
        let mut rng = Rng::new(seed);
        let prompt = PromptEmbedding::new(rng.gaussian_mat(d, 3), "p").unwrap();
        let aug = concat(&rng.gaussian_mat(d, 2), &prompt, &rng.gaussian_mat(d, 1)).unwrap();
        (aug, prompt)
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        let scale = a.max_abs().max(b.max_abs()).max(1e-12);
        a.max_abs_diff(b).unwrap() / scale
    }

    #[test]
    fn quadratic_maximum_at_target() {
        let (aug, prompt) = instance(4, 1);
        let mut oracle = quadratic_oracle(token_mean(&aug.emb).unwrap()).unwrap();
        let res = oracle.evaluate(&aug, &prompt).unwrap();
        assert_eq!(res.reward, 0.0);
        assert_eq!(res.grad.max_abs(), 0.0);
    }

    #[test]
    fn quadratic_hand_arithmetic() {
        let prompt = PromptEmbedding::new(Mat::column_vector(&[0.0, 0.0]), "z").unwrap();
        let aug = AugmentedEmbedding::from_parts(Mat::column_vector(&[0.0, 0.0]), 0, 1, 0).unwrap();
        let mut oracle = quadratic_oracle(Mat::column_vector(&[3.0, 4.0])).unwrap();
        let res = oracle.evaluate(&aug, &prompt).unwrap();
        assert_eq!(res.reward, -25.0);
        assert_eq!(res.grad, Mat::column_vector(&[6.0, 8.0]));
    }

    #[test]
    fn quadratic_rejects_wrong_dim() {
        let (aug, prompt) = instance(4, 1);
        let mut oracle = quadratic_oracle(Mat::zeros(6, 1)).unwrap();
        assert!(oracle.evaluate(&aug, &prompt).is_err());
    }

    #[test]
    fn quadratic_is_nonpositive() {
        let mut rng = Rng::new(3);
        let mut oracle = quadratic_oracle(rng.gaussian_mat(4, 1)).unwrap();
        for seed in 0..20 {
            let (aug, prompt) = instance(4, seed);
            assert!(oracle.evaluate(&aug, &prompt).unwrap().reward < 0.0);
        }
    }

    #[test]
    fn cosine_parallel_and_orthogonal() {
        let prompt = PromptEmbedding::new(Mat::column_vector(&[1.0, 0.0]), "x").unwrap();
        let aug = AugmentedEmbedding::from_parts(Mat::column_vector(&[2.0, 0.0]), 0, 1, 0).unwrap();
        let mut par = cosine_oracle(Mat::column_vector(&[5.0, 0.0])).unwrap();
        let res = par.evaluate(&aug, &prompt).unwrap();
        assert!((res.reward - 1.0).abs() < 1e-15);
        assert!(res.grad.max_abs() < 1e-15);
        let mut orth = cosine_oracle(Mat::column_vector(&[0.0, 1.0])).unwrap();
        assert_eq!(orth.evaluate(&aug, &prompt).unwrap().reward, 0.0);
    }

    #[test]
    fn cosine_undefined_at_zero_mean() {
        let prompt = PromptEmbedding::new(Mat::column_vector(&[0.0, 0.0]), "0").unwrap();
        let aug = AugmentedEmbedding::from_parts(Mat::zeros(2, 1), 0, 1, 0).unwrap();
        let mut oracle = cosine_oracle(Mat::column_vector(&[1.0, 1.0])).unwrap();
        let err = oracle.evaluate(&aug, &prompt).unwrap_err();
        assert_eq!(err.to_string(), "undefined cosine at zero mean");
        assert!(cosine_oracle(Mat::zeros(2, 1)).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..10 {
            let (aug, prompt) = instance(6, seed);
            let mut rng = Rng::new(1000 + seed);
            let mut oracles: Vec<Box<dyn RewardOracle>> = vec![
                Box::new(quadratic_oracle(rng.gaussian_mat(6, 1)).unwrap()),
                Box::new(cosine_oracle(rng.gaussian_mat(6, 1)).unwrap()),
                Box::new(net_oracle(6, seed, 5).unwrap()),
            ];
            for oracle in oracles.iter_mut() {
                let analytic = oracle.evaluate(&aug, &prompt).unwrap().grad;
                let numeric = finite_diff_grad(oracle.as_mut(), &aug, &prompt, 1e-5).unwrap();
                let err = rel_err(&analytic, &numeric);
                assert!(err < 1e-6, "{} seed {seed}: {err:e}", oracle.describe());
            }
        }
    }

    #[test]
    fn quadratic_fd_tight() {
        let (aug, prompt) = instance(6, 42);
        let mut oracle = quadratic_oracle(Rng::new(7).gaussian_mat(6, 1)).unwrap();
        let analytic = oracle.evaluate(&aug, &prompt).unwrap().grad;
        let numeric = finite_diff_grad(&mut oracle, &aug, &prompt, 1e-5).unwrap();
        assert!(rel_err(&analytic, &numeric) < 1e-8);
    }

    #[test]
    fn constant_oracle_has_zero_fd() {
        let (aug, prompt) = instance(4, 2);
        let mut oracle = ConstantOracle { reward: 3.5 };
        let g = finite_diff_grad(&mut oracle, &aug, &prompt, 1e-5).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn fd_step_robustness() {
        let (aug, prompt) = instance(6, 5);
        let mut oracle = net_oracle(6, 3, 5).unwrap();
        let a = finite_diff_grad(&mut oracle, &aug, &prompt, 1e-5).unwrap();
        let b = finite_diff_grad(&mut oracle, &aug, &prompt, 1e-6).unwrap();
        assert!(rel_err(&a, &b) < 1e-5);
        assert!(finite_diff_grad(&mut oracle, &aug, &prompt, 1e-2).is_err());
    }

    #[test]
    fn net_oracle_is_deterministic() {
        let (aug, prompt) = instance(6, 9);
        let a = net_oracle(6, 21, 8).unwrap().evaluate(&aug, &prompt).unwrap();
        let b = net_oracle(6, 21, 8).unwrap().evaluate(&aug, &prompt).unwrap();
        assert_eq!(a.reward.to_bits(), b.reward.to_bits());
        assert_eq!(a.grad, b.grad);
    }
}
