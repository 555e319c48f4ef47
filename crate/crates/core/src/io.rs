//! Pose sequence and matrix files.
//!
//! ```text
//! pose file:   "AVPS" | count u32 | pose_dim u32 | expr_dim u32 | count x (θ_p, θ_e) f32
//! matrix file: "AVMX" | rows u64 | cols u64 | dtype u8 (0 = f32, 1 = f64) | row-major values
//! ```
//!
//! All values little-endian.

use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, ParseErrorKind, Result};
use crate::pose::Pose;

pub const POSE_MAGIC: &[u8; 4] = b"AVPS";
pub const MATRIX_MAGIC: &[u8; 4] = b"AVMX";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

pub fn write_poses(mut w: impl Write, poses: &[Pose]) -> Result<()> {
    let (p, e) = poses.first().map_or((0, 0), |x| (x.theta_p.len(), x.theta_e.len()));
    if poses.iter().any(|x| x.theta_p.len() != p || x.theta_e.len() != e) {
        return Err(Error::Shape("poses differ in dimension".into()));
    }
    let mut buf = Vec::with_capacity(16 + poses.len() * (p + e) * 4);
    buf.extend_from_slice(POSE_MAGIC);
    for v in [poses.len(), p, e] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for x in poses {
        for v in x.theta_p.iter().chain(&x.theta_e) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn parse_err(offset: usize, kind: ParseErrorKind) -> Error {
    Error::Parse {
        offset: offset as u64,
        kind,
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(parse_err(*pos, ParseErrorKind::Truncated(what)));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn parse_poses(bytes: &[u8]) -> Result<Vec<Pose>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "pose header")? != POSE_MAGIC {
        return Err(parse_err(0, ParseErrorKind::BadMagic));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(bytes, &mut pos, 4, "pose header")?.try_into().unwrap()) as usize;
    }
    let [n, p, e] = dims;
    let record = (p + e) * 4;
    let expected = n.checked_mul(record).and_then(|b| b.checked_add(pos));
    if expected != Some(bytes.len()) {
        return Err(parse_err(
            bytes.len(),
            ParseErrorKind::Invalid {
                section: "poses",
                detail: format!("{n} records of {record} bytes do not match a {}-byte file", bytes.len()),
            },
        ));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let at = pos;
        let rec = take(bytes, &mut pos, record, "poses")?;
        let vals: Vec<f32> = rec
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(
                at,
                ParseErrorKind::Invalid {
                    section: "poses",
                    detail: "non-finite pose value".into(),
                },
            ));
        }
        out.push(Pose {
            theta_p: vals[..p].to_vec(),
            theta_e: vals[p..].to_vec(),
        });
    }
    Ok(out)
}

pub fn read_poses(mut r: impl Read) -> Result<Vec<Pose>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_poses(&bytes)
}

pub fn write_matrix(mut w: impl Write, m: &Array2<f64>, dtype: Dtype) -> Result<()> {
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut buf = Vec::with_capacity(21 + m.len() * width);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    buf.push(matches!(dtype, Dtype::F64) as u8);
    for &v in m.iter() {
        match dtype {
            Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn parse_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "matrix header")? != MATRIX_MAGIC {
        return Err(parse_err(0, ParseErrorKind::BadMagic));
    }
    let rows = u64::from_le_bytes(take(bytes, &mut pos, 8, "matrix header")?.try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(take(bytes, &mut pos, 8, "matrix header")?.try_into().unwrap()) as usize;
    let tag_at = pos;
    let width = match take(bytes, &mut pos, 1, "matrix header")?[0] {
        0 => 4,
        1 => 8,
        t => {
            return Err(parse_err(
                tag_at,
                ParseErrorKind::Invalid {
                    section: "matrix",
                    detail: format!("dtype tag {t}"),
                },
            ))
        }
    };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .and_then(|b| b.checked_add(pos));
    if expected != Some(bytes.len()) {
        return Err(parse_err(
            bytes.len(),
            ParseErrorKind::Invalid {
                section: "matrix",
                detail: format!("{rows}x{cols} values do not match a {}-byte file", bytes.len()),
            },
        ));
    }
    let body = &bytes[pos..];
    let vals: Vec<f64> = if width == 4 {
        body.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(parse_err(
            pos + i * width,
            ParseErrorKind::Invalid {
                section: "matrix",
                detail: format!("value {i} is not finite"),
            },
        ));
    }
    Ok(Array2::from_shape_vec((rows, cols), vals).expect("length checked above"))
}

pub fn read_matrix(mut r: impl Read) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_matrix(&bytes)
}
