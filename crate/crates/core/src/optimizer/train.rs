use serde::Serialize;
use thiserror::Error;

use crate::augmentation::{
    attach_attention, backward_attention, concat, conformity_penalty, PromptEmbedding,
};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Rng};
use crate::parameterization::{
    backward_insert, forward_insert, init_params, InsertionParams, ParamGrads, Side,
};
use crate::rewards::RewardOracle;

use super::adam::AdamState;
use super::config::{Mode, TrainConfig};
use super::constraints::enforce_constraints;
use super::mix::InsertPair;
use super::schedule::lr_at;

/// One forward/backward pass of the objective `L = -reward + γ · p_conf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub reward: f64,
    pub p_conf: f64,
    pub objective: f64,
    /// `∂L/∂Ω` (the gradient of the minimized objective).
    pub grads: ParamGrads,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub reward: f64,
    pub p_conf: f64,
    pub objective: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
    pub best_reward: f64,
    pub best_epoch: Option<usize>,
}

impl Default for RunMetrics {
    fn default() -> Self {
        RunMetrics { records: Vec::new(), best_reward: f64::NEG_INFINITY, best_epoch: None }
    }
}

impl RunMetrics {
    /// Best reward observed up to and including each epoch.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.max(r.reward);
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at which the highest reward was observed.
    pub best: InsertionParams,
    /// Parameters after the final update.
    pub last: InsertionParams,
    pub metrics: RunMetrics,
}

/// A run that stopped early; the metrics gathered so far are kept.
#[derive(Debug, Error)]
#[error("training aborted after {} epoch(s): {error}", metrics.records.len())]
pub struct TrainFailure {
    #[source]
    pub error: Error,
    pub metrics: RunMetrics,
}

/// Passed to the observer after every optimizer step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    /// Parameters after the update and constraint enforcement.
    pub params: &'a InsertionParams,
    /// The record of the epoch this step belongs to.
    pub record: &'a EpochRecord,
}

/// Builds `(V_pre, V_suff)` without attention.
pub fn build_inserts(params: &InsertionParams) -> Result<InsertPair> {
    let side = |s: Side| {
        let v = params.side(s);
        forward_insert(v.basis, v.coeffs, v.theta1, v.theta2)
    };
    Ok(InsertPair { pre: side(Side::Pre)?, suff: side(Side::Suff)? })
}

/// Forward pass to the augmented embedding, then the full backward chain
/// oracle → conformity → (attention) → insert parameterization.
pub fn evaluate_objective(
    params: &InsertionParams,
    prompt: &PromptEmbedding,
    oracle: &mut dyn RewardOracle,
    mode: Mode,
    gamma: f64,
) -> Result<Evaluation> {
    let raw = build_inserts(params)?;
    let (v_pre, v_suff) = if mode.uses_attention() {
        (attach_attention(&raw.pre, prompt)?, attach_attention(&raw.suff, prompt)?)
    } else {
        (raw.pre.clone(), raw.suff.clone())
    };
    let aug = concat(&v_pre, prompt, &v_suff)?;
    let scored = oracle.evaluate(&aug, prompt)?;
    if scored.grad.shape() != aug.emb.shape() {
        return Err(Error::Oracle(format!(
            "{} returned a {}x{} gradient for a {}x{} input",
            oracle.describe(),
            scored.grad.rows(),
            scored.grad.cols(),
            aug.emb.rows(),
            aug.emb.cols()
        )));
    }
    if !scored.reward.is_finite() || !scored.grad.is_finite() {
        return Err(Error::Oracle(format!("{} returned non-finite values", oracle.describe())));
    }
    let (p_conf, conf_grad) = conformity_penalty(&aug, prompt)?;
    let objective = -scored.reward + gamma * p_conf;
    let d_aug = conf_grad.scale(gamma).sub(&scored.grad)?;

    let d_pre_out = d_aug.columns(0, aug.n_pre);
    let d_suff_out = d_aug.columns(aug.n_pre + aug.k, aug.total_tokens());
    let (d_pre, d_suff) = if mode.uses_attention() {
        (
            backward_attention(&raw.pre, prompt, &d_pre_out)?,
            backward_attention(&raw.suff, prompt, &d_suff_out)?,
        )
    } else {
        (d_pre_out, d_suff_out)
    };
    let back = |side: Side, dv: &Mat| {
        let v = params.side(side);
        backward_insert(v.basis, v.coeffs, v.theta1, v.theta2, dv)
    };
    let grads = ParamGrads::from_sides(back(Side::Pre, &d_pre)?, back(Side::Suff, &d_suff)?);
    Ok(Evaluation { reward: scored.reward, p_conf, objective, grads })
}

/// Mean of the per-prompt evaluations, accumulated in slice order.
pub fn batch_objective(
    params: &InsertionParams,
    prompts: &[&PromptEmbedding],
    oracle: &mut dyn RewardOracle,
    mode: Mode,
    gamma: f64,
) -> Result<Evaluation> {
    let mut iter = prompts.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty minibatch".into()))?;
    let mut acc = evaluate_objective(params, first, oracle, mode, gamma)?;
    for prompt in iter {
        let e = evaluate_objective(params, prompt, oracle, mode, gamma)?;
        acc.reward += e.reward;
        acc.p_conf += e.p_conf;
        acc.objective += e.objective;
        acc.grads.axpy(1.0, &e.grads);
    }
    let n = prompts.len();
    if n > 1 {
        let inv = 1.0 / n as f64;
        acc.reward *= inv;
        acc.p_conf *= inv;
        acc.objective *= inv;
        acc.grads.scale_in_place(inv);
    }
    Ok(acc)
}

/// Rescales so the global norm is at most `c`.
pub fn clip_grads(grads: &mut ParamGrads, c: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > c {
        grads.scale_in_place(c / norm);
    }
    norm
}

fn init_for(cfg: &TrainConfig, d: usize) -> Result<InsertionParams> {
    cfg.validate()?;
    init_params(d, cfg.m_pre, cfg.m_suff, cfg.n_pre, cfg.n_suff, cfg.seed)
}

/// Prompt-wise training on a single prompt.
pub fn train_promptwise(
    prompt: &PromptEmbedding,
    oracle: &mut dyn RewardOracle,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    train_promptwise_with(prompt, oracle, cfg, &mut |_| {})
}

/// [`train_promptwise`] with a per-step observer.
pub fn train_promptwise_with(
    prompt: &PromptEmbedding,
    oracle: &mut dyn RewardOracle,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    run(&[prompt], oracle, cfg, false, observer)
}

/// Shared-insert training over a prompt set with minibatch-mean objectives.
pub fn train_batch(
    prompts: &[PromptEmbedding],
    oracle: &mut dyn RewardOracle,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    train_batch_with(prompts, oracle, cfg, &mut |_| {})
}

pub fn train_batch_with(
    prompts: &[PromptEmbedding],
    oracle: &mut dyn RewardOracle,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let early = |error: Error| TrainFailure { error, metrics: RunMetrics::default() };
    if cfg.mode != Mode::IpgoPlus {
        return Err(early(Error::Config("batch training requires mode ipgo-plus".into())));
    }
    let first = prompts.first().ok_or_else(|| early(Error::InvalidArgument("no prompts".into())))?;
    if let Some(bad) = prompts.iter().find(|p| p.dim() != first.dim()) {
        return Err(early(Error::InvalidArgument(format!(
            "mixed embedding dimensions: {} has d = {}, {} has d = {}",
            first.prompt_id,
            first.dim(),
            bad.prompt_id,
            bad.dim()
        ))));
    }
    let refs: Vec<&PromptEmbedding> = prompts.iter().collect();
    run(&refs, oracle, cfg, true, observer)
}

/// Seed offset for the per-epoch minibatch shuffle stream.
const SHUFFLE_STREAM: u64 = 0x5E_ED0F_BA7C;

fn run(
    prompts: &[&PromptEmbedding],
    oracle: &mut dyn RewardOracle,
    cfg: &TrainConfig,
    batched: bool,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut metrics = RunMetrics::default();
    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(TrainFailure { error, metrics }),
            }
        };
    }

    let d = prompts[0].dim();
    let mut params = bail!(init_for(cfg, d));
    for p in prompts {
        bail!(oracle.check_compatible(d, cfg.n_pre + p.tokens() + cfg.n_suff));
    }
    let mut adam = AdamState::new(&params);
    let mut best = params.clone();
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut shuffler = Rng::new(cfg.seed ^ SHUFFLE_STREAM);
    let batch_size = if batched { cfg.batch_size } else { 1 };

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.lr_schedule, epoch, cfg.epochs);
        if batched {
            shuffler.shuffle(&mut order);
        }
        let epoch_start = params.clone();
        let mut sums = (0.0, 0.0, 0.0);
        let mut norm_sum = 0.0;
        let mut steps = 0usize;
        let mut pending = Vec::new();

        for chunk in order.chunks(batch_size) {
            let batch: Vec<&PromptEmbedding> = chunk.iter().map(|&i| prompts[i]).collect();
            let mut eval = bail!(batch_objective(&params, &batch, oracle, cfg.mode, cfg.gamma));
            let w = batch.len() as f64;
            if steps == 0 {
                sums = (eval.reward * w, eval.p_conf * w, eval.objective * w);
            } else {
                sums.0 += eval.reward * w;
                sums.1 += eval.p_conf * w;
                sums.2 += eval.objective * w;
            }
            let norm = clip_grads(&mut eval.grads, cfg.clip_norm);
            norm_sum = if steps == 0 { norm } else { norm_sum + norm };
            steps += 1;
            adam.step(&mut params, &eval.grads, lr);
            let report = bail!(enforce_constraints(&mut params));
            adam.absorb(&report);
            pending.push(params.clone());
        }

        let n = prompts.len() as f64;
        let record = if prompts.len() == 1 {
            EpochRecord { epoch, reward: sums.0, p_conf: sums.1, objective: sums.2, grad_norm: norm_sum, lr }
        } else {
            EpochRecord {
                epoch,
                reward: sums.0 / n,
                p_conf: sums.1 / n,
                objective: sums.2 / n,
                grad_norm: norm_sum / steps as f64,
                lr,
            }
        };
        if record.reward > metrics.best_reward || metrics.best_epoch.is_none() {
            metrics.best_reward = record.reward;
            metrics.best_epoch = Some(epoch);
            best = epoch_start;
        }
        for after in &pending {
            observer(&StepEvent { epoch, params: after, record: &record });
        }
        metrics.records.push(record);
    }
    Ok(TrainOutcome { best, last: params, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::AugmentedEmbedding;
    use crate::linalg::token_mean;
    use crate::rewards::{quadratic_oracle, ConstantOracle};

    fn prompt(d: usize, k: usize, seed: u64) -> PromptEmbedding {
        PromptEmbedding::new(Rng::new(seed).gaussian_mat(d, k), format!("p{seed}")).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            n_pre: 2,
            n_suff: 2,
            m_pre: 3,
            m_suff: 3,
            ..TrainConfig::promptwise_default()
        }
    }

    #[test]
    fn single_epoch_keeps_initial_params() {
        let p = prompt(8, 3, 1);
        let mut oracle = quadratic_oracle(Rng::new(2).gaussian_mat(8, 1)).unwrap();
        let cfg = TrainConfig { epochs: 1, ..small_cfg() };
        let out = train_promptwise(&p, &mut oracle, &cfg).unwrap();
        assert_eq!(out.metrics.records.len(), 1);
        assert_eq!(out.metrics.best_epoch, Some(0));
        assert_eq!(out.best, init_params(8, 3, 3, 2, 2, cfg.seed).unwrap());
    }

    #[test]
    fn deterministic_trace() {
        let p = prompt(8, 3, 1);
        let cfg = small_cfg();
        let run = || {
            let mut oracle = quadratic_oracle(Rng::new(2).gaussian_mat(8, 1)).unwrap();
            train_promptwise(&p, &mut oracle, &cfg).unwrap().metrics
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping() {
        let p = init_params(4, 2, 2, 1, 1, 0).unwrap();
        let mut g = ParamGrads::zeros_like(&p);
        g.theta1_pre = 0.3;
        g.theta2_pre = 0.4;
        let before = g.clone();
        assert_eq!(clip_grads(&mut g, 1.0), 0.5);
        assert_eq!(g, before);
        g.theta1_pre = 3.0;
        g.theta2_pre = 4.0;
        assert_eq!(clip_grads(&mut g, 1.0), 5.0);
        assert!((g.theta1_pre - 0.6).abs() < 1e-15 && (g.theta2_pre - 0.8).abs() < 1e-15);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clip_bound_holds_on_random_sets() {
        let p = init_params(6, 2, 3, 2, 1, 0).unwrap();
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let mut g = ParamGrads::zeros_like(&p);
            let scale = 10f64.powf(rng.uniform(-2.0, 2.0));
            for s in g.slices_mut() {
                for v in s.iter_mut() {
                    *v = scale * rng.normal();
                }
            }
            clip_grads(&mut g, 1.0);
            assert!(g.global_norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn batch_requires_attention_mode_and_uniform_dims() {
        let mut oracle = ConstantOracle::default();
        let cfg = small_cfg();
        assert!(train_batch(&[prompt(8, 3, 1)], &mut oracle, &cfg).is_err());
        let cfg = TrainConfig { mode: Mode::IpgoPlus, ..cfg };
        let err = train_batch(&[prompt(8, 3, 1), prompt(6, 3, 2)], &mut oracle, &cfg).unwrap_err();
        assert!(err.to_string().contains("mixed embedding dimensions"));
        assert!(train_batch(&[], &mut oracle, &cfg).is_err());
    }

    #[test]
    fn identical_prompts_average_to_one() {
        let params = init_params(8, 3, 3, 2, 2, 4).unwrap();
        let p = prompt(8, 3, 1);
        let mut oracle = quadratic_oracle(token_mean(p.emb()).unwrap().scale(0.5)).unwrap();
        let one = evaluate_objective(&params, &p, &mut oracle, Mode::IpgoPlus, 0.01).unwrap();
        let two = batch_objective(&params, &[&p, &p], &mut oracle, Mode::IpgoPlus, 0.01).unwrap();
        assert!((one.objective - two.objective).abs() < 1e-15);
    }

    #[test]
    fn oracle_failure_keeps_partial_metrics() {
        struct FailsLater(usize);
        impl RewardOracle for FailsLater {
            fn evaluate(
                &mut self,
                aug: &AugmentedEmbedding,
                _p: &PromptEmbedding,
            ) -> Result<crate::rewards::OracleResult> {
                if self.0 == 0 {
                    return Err(Error::Oracle("boom".into()));
                }
                self.0 -= 1;
                Ok(crate::rewards::OracleResult::new(1.0, Mat::zeros(aug.emb.rows(), aug.emb.cols())))
            }
            fn describe(&self) -> String {
                "fails-later".into()
            }
            fn dims(&self) -> crate::rewards::OracleDims {
                crate::rewards::OracleDims { d: None, max_tokens: None }
            }
        }
        let err = train_promptwise(&prompt(8, 3, 1), &mut FailsLater(3), &small_cfg()).unwrap_err();
        assert_eq!(err.metrics.records.len(), 3);
        assert!(err.to_string().contains("boom"));
    }
}
