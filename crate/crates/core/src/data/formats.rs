//! PPM (P6) images and QVEC raw-vector blobs.
//!
//! QVEC layout: magic `QVEC`, u64 LE count, u64 LE dim, then `count * dim`
//! f64 LE values.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const QVEC_MAGIC: &[u8; 4] = b"QVEC";

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Decodes a P6 image into a `[3, height, width]` tensor scaled to `[0, 1]`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(malformed(path, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "expected a header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(path, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let pixels = &bytes[pos..];
    let n = width * height * 3;
    if pixels.len() != n {
        return Err(malformed(
            path,
            format!("expected {n} pixel bytes, found {}", pixels.len()),
        ));
    }
    let scale = T::lit(maxval as f64);
    let mut data = vec![T::zero(); n];
    for (i, &b) in pixels.iter().enumerate() {
        let (pix, ch) = (i / 3, i % 3);
        data[ch * width * height + pix] = T::lit(b as f64) / scale;
    }
    Tensor::new(vec![3, height, width], data)
}

/// Encodes a `[3, height, width]` tensor with values in `[0, 1]` as P6.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape {
            op: "encode_ppm",
            msg: format!("expected [3, h, w], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for pix in 0..h * w {
        for ch in 0..3 {
            let v = image.data()[ch * h * w + pix].as_f64();
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Decodes all vectors in a QVEC blob.
pub fn decode_qvec<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<Tensor<T>>> {
    if bytes.len() < 20 || &bytes[..4] != QVEC_MAGIC {
        return Err(malformed(path, "missing QVEC magic"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let dim = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if count == 0 || dim == 0 {
        return Err(malformed(path, "zero count or dimension"));
    }
    let body = &bytes[20..];
    let want = count.checked_mul(dim).and_then(|n| n.checked_mul(8));
    if want != Some(body.len()) {
        return Err(malformed(
            path,
            format!(
                "{count} x {dim} floats do not match {} body bytes",
                body.len()
            ),
        ));
    }
    let values: Vec<T> = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    values
        .chunks(dim)
        .map(|row| Tensor::new(vec![dim], row.to_vec()))
        .collect()
}

pub fn encode_qvec<T: Scalar>(vectors: &[&Tensor<T>]) -> Result<Vec<u8>> {
    let dim = vectors.first().map_or(0, |v| v.numel());
    if dim == 0 || vectors.iter().any(|v| v.rank() != 1 || v.numel() != dim) {
        return Err(Error::InvalidShape {
            op: "encode_qvec",
            msg: "vectors must be non-empty, rank 1 and equal length".into(),
        });
    }
    let mut out = QVEC_MAGIC.to_vec();
    out.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in vectors {
        for &x in v.data() {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}
