//! Binary embedding files.
//!
//! A file is a sequence of records. Each record is a 16-byte header followed
//! by `rows * cols` little-endian `f64` values in column-major order:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IPGO"
//! 4       2     format version (u16 LE), currently 1
//! 6       1     role tag: 0 prompt, 1 insert_pair, 2 params
//! 7       1     reserved, 0
//! 8       4     rows = d (u32 LE)
//! 12      4     cols (u32 LE)
//! 16      8*rows*cols  payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::linalg::Mat;
use crate::optimizer::InsertPair;
use crate::parameterization::InsertionParams;

pub const MAGIC: [u8; 4] = *b"IPGO";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Prompt,
    InsertPair,
    Params,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Prompt => 0,
            Role::InsertPair => 1,
            Role::Params => 2,
        }
    }

    pub fn from_tag(tag: u8) -> std::result::Result<Role, FormatError> {
        match tag {
            0 => Ok(Role::Prompt),
            1 => Ok(Role::InsertPair),
            2 => Ok(Role::Params),
            other => Err(FormatError::UnknownRole(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Prompt => "prompt",
            Role::InsertPair => "insert_pair",
            Role::Params => "params",
        }
    }
}

/// Appends one record to `out`.
pub fn encode_record(out: &mut Vec<u8>, mat: &Mat, role: Role) -> Result<()> {
    let (rows, cols) = mat.shape();
    let too_big = |n: usize| u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("dimension {n} exceeds u32")));
    let (r32, c32) = (too_big(rows)?, too_big(cols)?);
    if role == Role::Prompt && (rows == 0 || cols == 0) {
        return Err(FormatError::Empty { rows: r32, cols: c32 }.into());
    }
    out.reserve(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(role.tag());
    out.push(0);
    out.extend_from_slice(&r32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    for v in mat.to_col_major() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Decodes every record in `bytes`.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<(Mat, Role)>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < HEADER_LEN {
            return Err(FormatError::Truncated { expected: HEADER_LEN, found: rest.len() }.into());
        }
        let magic: [u8; 4] = rest[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let version = u16::from_le_bytes([rest[4], rest[5]]);
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let role = Role::from_tag(rest[6])?;
        let rows = u32::from_le_bytes(rest[8..12].try_into().unwrap());
        let cols = u32::from_le_bytes(rest[12..16].try_into().unwrap());
        if role == Role::Prompt && (rows == 0 || cols == 0) {
            return Err(FormatError::Empty { rows, cols }.into());
        }
        let n = rows as usize * cols as usize;
        let expected = HEADER_LEN + n * 8;
        if rest.len() < expected {
            return Err(FormatError::Truncated { expected, found: rest.len() }.into());
        }
        let data: Vec<f64> = rest[HEADER_LEN..expected]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((Mat::from_col_major(rows as usize, cols as usize, &data)?, role));
        pos += expected;
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn read_expecting(path: &Path, role: Role, count: usize) -> Result<Vec<Mat>> {
    let records = decode_records(&read_file(path)?)?;
    if records.len() != count {
        return Err(FormatError::RecordCount { expected: count, found: records.len() }.into());
    }
    records
        .into_iter()
        .map(|(m, r)| {
            if r == role {
                Ok(m)
            } else {
                Err(FormatError::RoleMismatch { expected: role.name(), found: r.name() }.into())
            }
        })
        .collect()
}

pub fn write_embedding(path: &Path, mat: &Mat, role: Role) -> Result<()> {
    let mut bytes = Vec::new();
    encode_record(&mut bytes, mat, role)?;
    write_atomic(path, &bytes)
}

/// Reads a single-record file.
pub fn read_embedding(path: &Path) -> Result<(Mat, Role)> {
    let mut records = decode_records(&read_file(path)?)?;
    if records.len() != 1 {
        return Err(FormatError::RecordCount { expected: 1, found: records.len() }.into());
    }
    Ok(records.remove(0))
}

/// Two records: prefix then suffix.
pub fn write_insert_pair(path: &Path, pair: &InsertPair) -> Result<()> {
    let mut bytes = Vec::new();
    encode_record(&mut bytes, &pair.pre, Role::InsertPair)?;
    encode_record(&mut bytes, &pair.suff, Role::InsertPair)?;
    write_atomic(path, &bytes)
}

pub fn read_insert_pair(path: &Path) -> Result<InsertPair> {
    let mut mats = read_expecting(path, Role::InsertPair, 2)?;
    let suff = mats.pop().unwrap();
    let pre = mats.pop().unwrap();
    if pre.rows() != suff.rows() {
        return Err(Error::ShapeMismatch {
            op: "read_insert_pair",
            left_rows: pre.rows(),
            left_cols: pre.cols(),
            right_rows: suff.rows(),
            right_cols: suff.cols(),
        });
    }
    Ok(InsertPair { pre, suff })
}

/// Five records: `E_pre`, `E_suff`, `Z_pre`, `Z_suff`, then a 4x1 column of
/// angles `(θ1_pre, θ2_pre, θ1_suff, θ2_suff)`.
pub fn write_params(path: &Path, p: &InsertionParams) -> Result<()> {
    let angles = Mat::column_vector(&[p.theta1_pre, p.theta2_pre, p.theta1_suff, p.theta2_suff]);
    let mut bytes = Vec::new();
    for m in [&p.e_pre, &p.e_suff, &p.z_pre, &p.z_suff, &angles] {
        encode_record(&mut bytes, m, Role::Params)?;
    }
    write_atomic(path, &bytes)
}

/// Reads and validates a params file.
pub fn read_params(path: &Path) -> Result<InsertionParams> {
    let mut it = read_expecting(path, Role::Params, 5)?.into_iter();
    let (e_pre, e_suff, z_pre, z_suff, angles) = (
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    );
    if angles.shape() != (4, 1) {
        return Err(Error::InvalidArgument(format!(
            "angle record must be 4x1, got {}x{}",
            angles.rows(),
            angles.cols()
        )));
    }
    let a = angles.as_slice();
    let p = InsertionParams {
        e_pre,
        e_suff,
        z_pre,
        z_suff,
        theta1_pre: a[0],
        theta2_pre: a[1],
        theta1_suff: a[2],
        theta2_suff: a[3],
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn bytes_of(m: &Mat) -> Vec<u64> {
        m.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        let m = Rng::new(3).gaussian_mat(768, 77);
        let mut buf = Vec::new();
        encode_record(&mut buf, &m, Role::Prompt).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 768 * 77 * 8);
        let recs = decode_records(&buf).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].1, Role::Prompt);
        assert_eq!(bytes_of(&recs[0].0), bytes_of(&m));
    }

    #[test]
    fn header_layout() {
        let m = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let mut buf = Vec::new();
        encode_record(&mut buf, &m, Role::Params).unwrap();
        assert_eq!(&buf[..16], &[b'I', b'P', b'G', b'O', 1, 0, 2, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        // column-major: 1, 3, 2, 4
        assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 3.0);
    }

    #[test]
    fn distinct_errors() {
        let m = Mat::identity(2);
        let mut good = Vec::new();
        encode_record(&mut good, &m, Role::Prompt).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_records(&bad), Err(Error::Format(FormatError::BadMagic(_)))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_records(&bad), Err(Error::Format(FormatError::UnsupportedVersion(9)))));

        let mut bad = good.clone();
        bad[6] = 7;
        assert!(matches!(decode_records(&bad), Err(Error::Format(FormatError::UnknownRole(7)))));

        let bad = &good[..good.len() - 1];
        assert!(matches!(decode_records(bad), Err(Error::Format(FormatError::Truncated { .. }))));

        let bad = &good[..10];
        assert!(matches!(decode_records(bad), Err(Error::Format(FormatError::Truncated { expected: 16, found: 10 }))));

        let mut bad = good.clone();
        bad.truncate(16);
        bad[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_records(&bad), Err(Error::Format(FormatError::Empty { rows: 2, cols: 0 }))));
    }

    #[test]
    fn empty_prompt_rejected_on_write() {
        let mut buf = Vec::new();
        let err = encode_record(&mut buf, &Mat::zeros(4, 0), Role::Prompt).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Empty { .. })));
    }

    #[test]
    fn empty_insert_side_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = crate::parameterization::init_params(6, 2, 3, 0, 2, 5).unwrap();
        let path = dir.path().join("p.ipgo");
        write_params(&path, &p).unwrap();
        assert_eq!(read_params(&path).unwrap(), p);
        let pair = crate::optimizer::build_inserts(&p).unwrap();
        assert_eq!(pair.pre.shape(), (6, 0));
        let path = dir.path().join("v.ipgo");
        write_insert_pair(&path, &pair).unwrap();
        assert_eq!(read_insert_pair(&path).unwrap(), pair);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = crate::parameterization::init_params(8, 3, 2, 2, 3, 5).unwrap();
        let path = dir.path().join("params.ipgo");
        write_params(&path, &p).unwrap();
        assert_eq!(read_params(&path).unwrap(), p);

        let pair = InsertPair { pre: Rng::new(1).gaussian_mat(8, 2), suff: Rng::new(2).gaussian_mat(8, 3) };
        let path = dir.path().join("inserts.ipgo");
        write_insert_pair(&path, &pair).unwrap();
        assert_eq!(read_insert_pair(&path).unwrap(), pair);
        assert!(matches!(
            read_params(&path),
            Err(Error::Format(FormatError::RecordCount { expected: 5, found: 2 }))
        ));
        assert!(matches!(
            read_embedding(&path),
            Err(Error::Format(FormatError::RecordCount { expected: 1, found: 2 }))
        ));

        let path = dir.path().join("prompt.ipgo");
        write_embedding(&path, &pair.pre, Role::Prompt).unwrap();
        let (m, role) = read_embedding(&path).unwrap();
        assert_eq!((m, role), (pair.pre.clone(), Role::Prompt));
        assert!(matches!(
            read_insert_pair(&path),
            Err(Error::Format(FormatError::RecordCount { expected: 2, found: 1 }))
        ));
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().starts_with('.')).collect();
        assert!(leftovers.is_empty());
    }
}
