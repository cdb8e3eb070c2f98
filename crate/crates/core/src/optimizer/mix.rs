use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Built prefix and suffix embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertPair {
    pub pre: Mat,
    pub suff: Mat,
}

/// Convex combination `λ·a + (1-λ)·b` of two learned insert pairs.
pub fn mix_inserts(a: &InsertPair, b: &InsertPair, lambda: f64) -> Result<InsertPair> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixing weight {lambda} outside [0, 1]")));
    }
    for (x, y) in [(&a.pre, &b.pre), (&a.suff, &b.suff)] {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "mix_inserts",
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: y.rows(),
                right_cols: y.cols(),
            });
        }
    }
    // endpoints return the inputs untouched so signed zeros survive
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    if lambda == 0.0 {
        return Ok(b.clone());
    }
    let blend = |x: &Mat, y: &Mat| x.scale(lambda).add(&y.scale(1.0 - lambda));
    Ok(InsertPair { pre: blend(&a.pre, &b.pre)?, suff: blend(&a.suff, &b.suff)? })
}
