//! Serves any in-process [`RewardOracle`] over the wire protocol.

use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::augmentation::{synthetic_prompt, AugmentedEmbedding, PromptEmbedding};
use crate::error::{Error, Result};
use crate::rewards::RewardOracle;

use super::wire::{decode_matrix, encode_matrix, to_line, Request, RequestBody, Response, WIRE_VERSION};

/// Longest prompt the built-in `encode` produces.
pub const ENCODE_MAX_TOKENS: usize = 77;

#[derive(Clone, Debug, Default)]
pub struct ServeOptions {
    /// Width used by `encode` when the oracle does not fix one.
    pub encode_dim: Option<usize>,
    /// Drop the connection on receiving this many evaluate requests, without
    /// answering the last one. Fault injection for client tests.
    pub fail_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: usize,
    pub evaluations: usize,
    pub errors: usize,
}

/// Deterministic stand-in for a text encoder: one unit-norm Gaussian column
/// per whitespace-separated word, seeded by a hash of the text.
pub fn pseudo_encode(text: &str, d: usize) -> Result<PromptEmbedding> {
    let digest = Sha256::digest(text.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let k = text.split_whitespace().count().clamp(1, ENCODE_MAX_TOKENS);
    synthetic_prompt(d, k, seed, text)
}

fn handle(oracle: &mut dyn RewardOracle, req: Request, opts: &ServeOptions) -> Result<Response> {
    let id = Some(req.id);
    match req.body {
        RequestBody::Hello { version, .. } => {
            if version != WIRE_VERSION {
                return Err(Error::Protocol(format!(
                    "client speaks version {version}, server speaks {WIRE_VERSION}"
                )));
            }
            let dims = oracle.dims();
            Ok(Response {
                id,
                ok: true,
                d: dims.d,
                max_tokens: dims.max_tokens,
                version: Some(WIRE_VERSION),
                ..Response::default()
            })
        }
        RequestBody::Encode { prompt } => {
            let d = oracle.dims().d.or(opts.encode_dim).ok_or_else(|| {
                Error::Oracle("encode needs a fixed embedding width; start the server with one".into())
            })?;
            let wire = encode_matrix(pseudo_encode(&prompt, d)?.emb());
            Ok(Response { id, ok: true, d: Some(wire.d), cols: Some(wire.cols), data: Some(wire.data), ..Response::default() })
        }
        RequestBody::Evaluate { emb, prompt_id, n_pre, n_suff, truncate_at: _ } => {
            let mat = decode_matrix(&emb)?;
            let k = mat.cols().checked_sub(n_pre + n_suff).ok_or_else(|| {
                Error::Protocol(format!("n_pre + n_suff = {} exceeds {} columns", n_pre + n_suff, mat.cols()))
            })?;
            let aug = AugmentedEmbedding::from_parts(mat, n_pre, k, n_suff)?;
            let prompt = PromptEmbedding::new(aug.prompt(), prompt_id)?;
            let out = oracle.evaluate(&aug, &prompt)?;
            if out.grad.shape() != aug.emb.shape() {
                return Err(Error::Oracle(format!(
                    "oracle gradient is {}x{}, embedding is {}x{}",
                    out.grad.rows(),
                    out.grad.cols(),
                    aug.emb.rows(),
                    aug.emb.cols()
                )));
            }
            Ok(Response { id, ok: true, reward: Some(out.reward), grad: Some(encode_matrix(&out.grad)), ..Response::default() })
        }
    }
}

/// Answers requests from `reader` until end of input.
///
/// Bad requests and oracle failures are answered with `ok: false` and the
/// server keeps going; only I/O failures end the loop with an error.
pub fn serve_oracle(
    oracle: &mut dyn RewardOracle,
    reader: impl BufRead,
    mut writer: impl Write,
    opts: &ServeOptions,
) -> Result<ServeStats> {
    let mut stats = ServeStats::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.requests += 1;
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                if matches!(req.body, RequestBody::Evaluate { .. }) {
                    stats.evaluations += 1;
                    if opts.fail_after == Some(stats.evaluations) {
                        return Ok(stats);
                    }
                }
                let id = req.id;
                handle(oracle, req, opts).unwrap_or_else(|e| Response::failure(Some(id), e.to_string()))
            }
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|x| x.as_u64()));
                Response::failure(id, format!("malformed request: {e}"))
            }
        };
        if !response.ok {
            stats.errors += 1;
        }
        writer.write_all(to_line(&response)?.as_bytes())?;
        writer.flush()?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::wire::encode_matrix;
    use crate::linalg::{Mat, Rng};
    use crate::rewards::quadratic_oracle;

    fn run(oracle: &mut dyn RewardOracle, input: &str) -> Vec<Response> {
        let mut out = Vec::new();
        serve_oracle(oracle, input.as_bytes(), &mut out, &ServeOptions::default()).unwrap();
        String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    #[test]
    fn hello_reports_dims() {
        let mut q = quadratic_oracle(Mat::zeros(4, 1)).unwrap();
        let r = run(&mut q, "{\"id\":1,\"op\":\"hello\",\"version\":1}\n");
        assert_eq!(r[0].id, Some(1));
        assert!(r[0].ok);
        assert_eq!(r[0].d, Some(4));
    }

    #[test]
    fn malformed_lines_get_error_responses() {
        let mut q = quadratic_oracle(Mat::zeros(4, 1)).unwrap();
        let r = run(&mut q, "not json\n{\"id\":5,\"op\":\"teleport\"}\n");
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].id, None);
        assert!(!r[0].ok);
        assert_eq!(r[1].id, Some(5));
        assert!(r[1].error.as_deref().unwrap().contains("malformed"));
    }

    #[test]
    fn evaluate_reconstructs_segments() {
        let target = Mat::column_vector(&[1.0, 0.0, 0.0, 0.0]);
        let mut q = quadratic_oracle(target.clone()).unwrap();
        let emb = Rng::new(2).gaussian_mat(4, 5);
        let req = Request {
            id: 9,
            body: RequestBody::Evaluate { emb: encode_matrix(&emb), prompt_id: "x".into(), n_pre: 1, n_suff: 2, truncate_at: 2 },
        };
        let r = run(&mut q, &to_line(&req).unwrap());
        let prompt = PromptEmbedding::new(emb.columns(1, 3), "x").unwrap();
        let aug = AugmentedEmbedding::from_parts(emb, 1, 2, 2).unwrap();
        let local = quadratic_oracle(target).unwrap().evaluate(&aug, &prompt).unwrap();
        assert_eq!(r[0].reward, Some(local.reward));
        assert_eq!(decode_matrix(r[0].grad.as_ref().unwrap()).unwrap(), local.grad);
    }

    #[test]
    fn pseudo_encode_is_deterministic() {
        let a = pseudo_encode("a red bicycle", 8).unwrap();
        assert_eq!(a.tokens(), 3);
        assert_eq!(a, pseudo_encode("a red bicycle", 8).unwrap());
        assert_ne!(a.emb(), pseudo_encode("a blue bicycle", 8).unwrap().emb());
    }
}
