//! JSON-lines messages exchanged with an external reward oracle.
//!
//! Every message is one JSON object terminated by `\n`. Matrices travel as
//! `{d, cols, data}` where `data` is standard base64 of the column-major
//! little-endian `f64` bytes, so values survive the trip bit for bit.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const WIRE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMatrix {
    pub d: usize,
    pub cols: usize,
    pub data: String,
}

pub fn encode_matrix(m: &Mat) -> WireMatrix {
    let mut bytes = Vec::with_capacity(m.rows() * m.cols() * 8);
    for v in m.to_col_major() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    WireMatrix { d: m.rows(), cols: m.cols(), data: STANDARD.encode(bytes) }
}

pub fn decode_matrix(w: &WireMatrix) -> Result<Mat> {
    let bytes = STANDARD
        .decode(w.data.as_bytes())
        .map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() != w.d * w.cols * 8 {
        return Err(Error::Protocol(format!(
            "payload holds {} bytes, {}x{} needs {}",
            bytes.len(),
            w.d,
            w.cols,
            w.d * w.cols * 8
        )));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Mat::from_col_major(w.d, w.cols, &values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub body: RequestBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RequestBody {
    Hello {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d: Option<usize>,
        version: u32,
    },
    Encode {
        prompt: String,
    },
    Evaluate {
        #[serde(flatten)]
        emb: WireMatrix,
        prompt_id: String,
        n_pre: usize,
        n_suff: usize,
        truncate_at: i64,
    },
}

/// One response line. Which optional fields are present depends on the op.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    /// Echo of the request id; `None` only when the request could not be parsed.
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad: Option<WireMatrix>,
    /// hello: served embedding width. encode: rows of the returned embedding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl Response {
    pub fn failure(id: Option<u64>, message: impl Into<String>) -> Self {
        Response { id, ok: false, error: Some(message.into()), ..Response::default() }
    }
}

/// Serializes `msg` as one line, including the trailing newline.
pub fn to_line<T: Serialize>(msg: &T) -> Result<String> {
    let mut s = serde_json::to_string(msg)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn matrix_round_trip_is_bit_exact() {
        let mut m = Rng::new(11).gaussian_mat(6, 5);
        m[(0, 0)] = -0.0;
        m[(1, 1)] = f64::MIN_POSITIVE / 4.0;
        m[(2, 2)] = f64::MAX;
        let back = decode_matrix(&encode_matrix(&m)).unwrap();
        let bits = |x: &Mat| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn evaluate_request_shape() {
        let req = Request {
            id: 7,
            body: RequestBody::Evaluate {
                emb: encode_matrix(&Mat::identity(2)),
                prompt_id: "p".into(),
                n_pre: 0,
                n_suff: 1,
                truncate_at: 2,
            },
        };
        let v: serde_json::Value = serde_json::from_str(&to_line(&req).unwrap()).unwrap();
        assert_eq!(v["op"], "evaluate");
        assert_eq!(v["id"], 7);
        assert_eq!(v["d"], 2);
        assert_eq!(v["cols"], 2);
        assert_eq!(v["truncate_at"], 2);
        let back: Request = serde_json::from_value(v).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn payload_length_checked() {
        let mut w = encode_matrix(&Mat::identity(2));
        w.cols = 3;
        assert!(matches!(decode_matrix(&w), Err(Error::Protocol(_))));
        w.data = "@@@".into();
        assert!(matches!(decode_matrix(&w), Err(Error::Protocol(_))));
    }

    #[test]
    fn failure_omits_payload_fields() {
        let line = to_line(&Response::failure(Some(3), "boom")).unwrap();
        assert_eq!(line, "{\"id\":3,\"ok\":false,\"error\":\"boom\"}\n");
    }
}
