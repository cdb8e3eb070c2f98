//! Prefix ⊕ prompt ⊕ suffix assembly, the conformity penalty, and the
//! parameter-free residual cross-attention used by the attention-aware mode.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, token_mean, Mat, Rng};

/// Frozen `d x K` token embeddings of one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    emb: Mat,
    pub prompt_id: String,
}

impl PromptEmbedding {
    pub fn new(emb: Mat, prompt_id: impl Into<String>) -> Result<Self> {
        if emb.cols() == 0 {
            return Err(Error::InvalidArgument("prompt must have at least one token".into()));
        }
        if emb.rows() == 0 || emb.rows() % 2 != 0 {
            return Err(Error::OddDimension(emb.rows()));
        }
        emb.ensure_finite("prompt embedding")?;
        Ok(PromptEmbedding { emb, prompt_id: prompt_id.into() })
    }

    pub fn emb(&self) -> &Mat {
        &self.emb
    }

    pub fn dim(&self) -> usize {
        self.emb.rows()
    }

    pub fn tokens(&self) -> usize {
        self.emb.cols()
    }
}

/// `d x (n_pre + k + n_suff)` embeddings with segment boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedEmbedding {
    pub emb: Mat,
    pub n_pre: usize,
    pub k: usize,
    pub n_suff: usize,
}

impl AugmentedEmbedding {
    /// Wraps an already concatenated matrix, checking the segment lengths.
    pub fn from_parts(emb: Mat, n_pre: usize, k: usize, n_suff: usize) -> Result<Self> {
        if n_pre + k + n_suff != emb.cols() || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "segments {n_pre}+{k}+{n_suff} do not tile {} columns",
                emb.cols()
            )));
        }
        Ok(AugmentedEmbedding { emb, n_pre, k, n_suff })
    }

    pub fn total_tokens(&self) -> usize {
        self.emb.cols()
    }

    pub fn prefix(&self) -> Mat {
        self.emb.columns(0, self.n_pre)
    }

    pub fn prompt(&self) -> Mat {
        self.emb.columns(self.n_pre, self.n_pre + self.k)
    }

    pub fn suffix(&self) -> Mat {
        let start = self.n_pre + self.k;
        self.emb.columns(start, start + self.n_suff)
    }
}

/// Seeded Gaussian prompt with every column scaled to unit norm.
pub fn synthetic_prompt(d: usize, k: usize, seed: u64, prompt_id: impl Into<String>) -> Result<PromptEmbedding> {
    let mut emb = Rng::new(seed).gaussian_mat(d, k);
    for j in 0..k {
        let col = emb.column(j);
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        emb.set_column(j, &col.iter().map(|v| v / norm).collect::<Vec<_>>());
    }
    PromptEmbedding::new(emb, prompt_id)
}

/// Column-wise concatenation `v_pre ⊕ prompt ⊕ v_suff`.
pub fn concat(v_pre: &Mat, prompt: &PromptEmbedding, v_suff: &Mat) -> Result<AugmentedEmbedding> {
    let d = prompt.dim();
    for part in [v_pre, v_suff] {
        if part.rows() != d {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left_rows: part.rows(),
                left_cols: part.cols(),
                right_rows: d,
                right_cols: prompt.tokens(),
            });
        }
    }
    if v_pre.cols() + v_suff.cols() == 0 {
        return Err(Error::InvalidArgument("concat needs at least one insert token".into()));
    }
    let emb = Mat::hcat(&[v_pre, prompt.emb(), v_suff])?;
    Ok(AugmentedEmbedding { emb, n_pre: v_pre.cols(), k: prompt.tokens(), n_suff: v_suff.cols() })
}

/// Squared distance between the token means of `aug` and of the prompt, and
/// its gradient with respect to every column of `aug`.
pub fn conformity_penalty(aug: &AugmentedEmbedding, prompt: &PromptEmbedding) -> Result<(f64, Mat)> {
    if aug.emb.rows() != prompt.dim() {
        return Err(Error::ShapeMismatch {
            op: "conformity_penalty",
            left_rows: aug.emb.rows(),
            left_cols: aug.emb.cols(),
            right_rows: prompt.dim(),
            right_cols: prompt.tokens(),
        });
    }
    let diff = token_mean(&aug.emb)?.sub(&token_mean(prompt.emb())?)?;
    let penalty = diff.as_slice().iter().map(|v| v * v).sum();
    let per_col = diff.scale(2.0 / aug.total_tokens() as f64);
    let mut grad = Mat::zeros(aug.emb.rows(), aug.emb.cols());
    for j in 0..grad.cols() {
        grad.set_column(j, per_col.as_slice());
    }
    Ok((penalty, grad))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    let cols = out.cols();
    for row in out.as_mut_slice().chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// `softmax(Q Kᵀ / √d) W` with tokens as rows.
pub fn scaled_dot_attention(q: &Mat, k: &Mat, w: &Mat) -> Result<Mat> {
    attention_weights(q, k).and_then(|p| matmul(&p, w))
}

fn attention_weights(q: &Mat, k: &Mat) -> Result<Mat> {
    if k.rows() == 0 {
        return Err(Error::InvalidArgument("attention needs at least one key".into()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    Ok(softmax_rows(&matmul_nt(q, k)?.scale(scale)))
}

/// Residual cross-attention from insert tokens (queries) to prompt tokens
/// (keys and values): `v + Attention(v, T, T)`, column-per-token in and out.
pub fn attach_attention(v: &Mat, prompt: &PromptEmbedding) -> Result<Mat> {
    if v.rows() != prompt.dim() {
        return Err(Error::ShapeMismatch {
            op: "attach_attention",
            left_rows: v.rows(),
            left_cols: v.cols(),
            right_rows: prompt.dim(),
            right_cols: prompt.tokens(),
        });
    }
    if v.cols() == 0 {
        return Ok(v.clone());
    }
    let t = prompt.emb();
    let weights = attention_weights(&v.transpose(), &t.transpose())?; // N x K
    // (P Tᵀ)ᵀ = T Pᵀ
    let attended = matmul_nt(t, &weights)?;
    v.add(&attended)
}

/// Gradient of [`attach_attention`] with respect to `v`, given `d_out`.
pub fn backward_attention(v: &Mat, prompt: &PromptEmbedding, d_out: &Mat) -> Result<Mat> {
    if d_out.shape() != v.shape() || v.rows() != prompt.dim() {
        return Err(Error::ShapeMismatch {
            op: "backward_attention",
            left_rows: v.rows(),
            left_cols: v.cols(),
            right_rows: d_out.rows(),
            right_cols: d_out.cols(),
        });
    }
    if v.cols() == 0 {
        return Ok(d_out.clone());
    }
    let t = prompt.emb();
    let d = v.rows() as f64;
    let probs = attention_weights(&v.transpose(), &t.transpose())?; // N x K
    // dP = dO · W with dO = d_outᵀ (N x d) and W = Tᵀ, so dP = d_outᵀ T.
    let d_probs = matmul_tn(d_out, t)?; // N x K
    let mut d_logits = Mat::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let inner: f64 = (0..probs.cols()).map(|j| probs[(i, j)] * d_probs[(i, j)]).sum();
        for j in 0..probs.cols() {
            d_logits[(i, j)] = probs[(i, j)] * (d_probs[(i, j)] - inner) / d.sqrt();
        }
    }
    // dQ = dS · K = dS Tᵀ (N x d); as columns: T dSᵀ.
    let d_query = matmul_nt(t, &d_logits)?;
    d_out.add(&d_query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn prompt(d: usize, k: usize, seed: u64) -> PromptEmbedding {
        PromptEmbedding::new(Rng::new(seed).gaussian_mat(d, k), "p").unwrap()
    }

    fn constant_cols(d: usize, values: &[f64]) -> Mat {
        let mut m = Mat::zeros(d, values.len());
        for (j, v) in values.iter().enumerate() {
            m.set_column(j, &vec![*v; d]);
        }
        m
    }

    #[test]
    fn concat_orders_segments() {
        let p = PromptEmbedding::new(constant_cols(2, &[5.0, 5.0, 5.0]), "t").unwrap();
        let aug = concat(&constant_cols(2, &[1.0, 1.0]), &p, &constant_cols(2, &[9.0, 9.0])).unwrap();
        let firsts: Vec<f64> = (0..7).map(|j| aug.emb[(0, j)]).collect();
        assert_eq!(firsts, vec![1.0, 1.0, 5.0, 5.0, 5.0, 9.0, 9.0]);
        assert_eq!(aug.prompt(), *p.emb());
    }

    #[test]
    fn concat_with_empty_prefix() {
        let p = prompt(4, 3, 1);
        let suff = Rng::new(2).gaussian_mat(4, 2);
        let aug = concat(&Mat::zeros(4, 0), &p, &suff).unwrap();
        assert_eq!(aug.emb, Mat::hcat(&[p.emb(), &suff]).unwrap());
        assert!(concat(&Mat::zeros(4, 0), &p, &Mat::zeros(4, 0)).is_err());
        assert!(concat(&Mat::zeros(6, 1), &p, &suff).is_err());
    }

    #[test]
    fn conformity_zero_at_prompt_mean() {
        let p = prompt(4, 3, 3);
        let mu = token_mean(p.emb()).unwrap();
        let inserts = Mat::hcat(&[&mu, &mu]).unwrap();
        let aug = concat(&inserts, &p, &mu).unwrap();
        let (pen, grad) = conformity_penalty(&aug, &p).unwrap();
        assert!(pen < 1e-30);
        assert!(grad.max_abs() < 1e-15);
    }

    #[test]
    fn conformity_hand_value() {
        let p = PromptEmbedding::new(Mat::column_vector(&[1.0, 0.0]), "p").unwrap();
        // aug mean (1, 1): prompt column plus an insert at (1, 2)
        let aug = concat(&Mat::column_vector(&[1.0, 2.0]), &p, &Mat::zeros(2, 0)).unwrap();
        let (pen, _) = conformity_penalty(&aug, &p).unwrap();
        assert!((pen - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conformity_permutation_invariant() {
        let p = prompt(4, 2, 8);
        let aug = concat(&Rng::new(9).gaussian_mat(4, 3), &p, &Mat::zeros(4, 0)).unwrap();
        let mut cols: Vec<usize> = (0..aug.total_tokens()).collect();
        cols.reverse();
        let mut permuted = Mat::zeros(4, cols.len());
        for (dst, src) in cols.iter().enumerate() {
            permuted.set_column(dst, &aug.emb.column(*src));
        }
        let shuffled = AugmentedEmbedding::from_parts(permuted, 3, 2, 0).unwrap();
        let a = conformity_penalty(&aug, &p).unwrap().0;
        let b = conformity_penalty(&shuffled, &p).unwrap().0;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = Rng::new(1).gaussian_mat(3, 4);
        let k = Rng::new(2).gaussian_mat(1, 4);
        let w = Rng::new(3).gaussian_mat(1, 4);
        let out = scaled_dot_attention(&q, &k, &w).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(out[(i, j)], w[(0, j)]);
            }
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let q = Mat::from_rows(&[&[1.0, 0.0]]).unwrap();
        let k = Mat::from_rows(&[&[0.0, 1.0], &[0.0, -3.0], &[0.0, 2.0]]).unwrap();
        let w = Rng::new(4).gaussian_mat(3, 2);
        let out = scaled_dot_attention(&q, &k, &w).unwrap();
        for j in 0..2 {
            let mean = (w[(0, j)] + w[(1, j)] + w[(2, j)]) / 3.0;
            assert!((out[(0, j)] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_hand_softmax() {
        let q = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        let k = Mat::from_rows(&[&[1.0, 1.0], &[2.0, 0.0]]).unwrap();
        let w = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &w).unwrap();
        let s = 2f64.sqrt();
        // row 0 logits: (1, 2)/√2 ; row 1 logits: (2, 0)/√2
        let p00 = (1.0 / s).exp() / ((1.0 / s).exp() + (2.0 / s).exp());
        let p10 = (2.0 / s).exp() / ((2.0 / s).exp() + 1.0);
        assert!((out[(0, 0)] - p00).abs() < 1e-15);
        assert!((out[(0, 1)] - (1.0 - p00)).abs() < 1e-15);
        assert!((out[(1, 0)] - p10).abs() < 1e-15);
        assert!((out[(1, 1)] - (1.0 - p10)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_across_scales() {
        let mut rng = Rng::new(6);
        for exp in [-3i32, 0, 3] {
            let logits = rng.gaussian_mat(5, 7).scale(10f64.powi(exp));
            let p = softmax_rows(&logits);
            for i in 0..5 {
                let s: f64 = (0..7).map(|j| p[(i, j)]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_prompt_token_adds_it() {
        let t = Rng::new(1).gaussian_mat(4, 1);
        let p = PromptEmbedding::new(t.clone(), "one").unwrap();
        let v = Rng::new(2).gaussian_mat(4, 3);
        let out = attach_attention(&v, &p).unwrap();
        for j in 0..3 {
            for i in 0..4 {
                assert!((out[(i, j)] - (v[(i, j)] + t[(i, 0)])).abs() <= 1e-14);
            }
        }
        let twice = PromptEmbedding::new(Mat::hcat(&[&t, &t]).unwrap(), "two").unwrap();
        let out2 = attach_attention(&v, &twice).unwrap();
        assert!(out2.max_abs_diff(&out).unwrap() < 1e-15);
    }

    #[test]
    fn attach_matches_reference() {
        let p = prompt(4, 3, 10);
        let v = Rng::new(11).gaussian_mat(4, 2);
        let out = attach_attention(&v, &p).unwrap();
        for n in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|k| (0..4).map(|i| v[(i, n)] * p.emb()[(i, k)]).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for i in 0..4 {
                let att: f64 = (0..3).map(|k| logits[k].exp() / z * p.emb()[(i, k)]).sum();
                assert!((out[(i, n)] - v[(i, n)] - att).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let one = prompt(4, 1, 2);
        let v = Rng::new(3).gaussian_mat(4, 2);
        let d_out = Rng::new(4).gaussian_mat(4, 2);
        assert_eq!(backward_attention(&v, &one, &d_out).unwrap(), d_out);
        let p = prompt(4, 3, 5);
        let zero = backward_attention(&v, &p, &Mat::zeros(4, 2)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }
}
