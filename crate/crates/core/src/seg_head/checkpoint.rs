//! `SGHD` head checkpoints: magic, `u16` version, `c`, `d`, `h_hidden` as
//! `u32`, then `w_lin, b_lin, w1, b1, w2, b2` as row-major `f32`, all
//! little-endian. Optimizer state is not stored.

use std::fs;
use std::path::Path;

use super::HeadParams;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const SGHD_MAGIC: &[u8; 4] = b"SGHD";
pub const SGHD_VERSION: u16 = 1;
pub const SGHD_HEADER_LEN: usize = 18;

pub fn encode_checkpoint(p: &HeadParams) -> Vec<u8> {
    let flat = p.to_flat();
    let mut out = Vec::with_capacity(SGHD_HEADER_LEN + 4 * flat.len());
    out.extend_from_slice(SGHD_MAGIC);
    out.extend_from_slice(&SGHD_VERSION.to_le_bytes());
    for dim in [p.c(), p.d(), p.h_hidden()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<HeadParams> {
    if bytes.len() < 4 || &bytes[..4] != SGHD_MAGIC {
        return Err(Error::Format("bad magic, expected \"SGHD\"".into()));
    }
    if bytes.len() < SGHD_HEADER_LEN {
        return Err(Error::Corrupt(format!("checkpoint header truncated at {} bytes", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SGHD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (c, d, h) = (dim(6), dim(10), dim(14));
    if c == 0 || d == 0 || h == 0 || d > c {
        return Err(Error::Invariant(format!("invalid head dims c={c} d={d} h_hidden={h}")));
    }
    let count = (c as u64) * (d as u64) + d as u64 + (c as u64) * (h as u64) + h as u64 + (h as u64) * (d as u64) + d as u64;
    let payload = &bytes[SGHD_HEADER_LEN..];
    if payload.len() as u64 != 4 * count {
        return Err(Error::Corrupt(format!(
            "checkpoint declares {count} parameters, payload holds {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("non-finite parameter in checkpoint".into()));
    }
    let mut p = HeadParams::zeros(c, d, h);
    p.set_flat(&values)?;
    Ok(p)
}

pub fn write_checkpoint(p: &HeadParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(p))
}

pub fn read_checkpoint(path: &Path) -> Result<HeadParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg_head::init_head;

    #[test]
    fn layout_is_fixed() {
        let mut p = HeadParams::zeros(2, 1, 1);
        p.w_lin[[0, 0]] = 1.0;
        p.w_lin[[1, 0]] = 2.0;
        p.b_lin[0] = 3.0;
        p.w1[[0, 0]] = 4.0;
        p.w1[[1, 0]] = 5.0;
        p.b1[0] = 6.0;
        p.w2[[0, 0]] = 7.0;
        p.b2[0] = 8.0;
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..6], b"SGHD\x01\x00");
        assert_eq!(&bytes[6..18], &[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        let floats: Vec<f32> = bytes[18..]
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(floats, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.sghd");
        let p = init_head(7, 4, 9, 21).unwrap();
        write_checkpoint(&p, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn corrupted_headers() {
        let p = init_head(3, 2, 2, 0).unwrap();
        let good = encode_checkpoint(&p);
        let mut bad = good.clone();
        bad[3] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 7;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::UnsupportedVersion(7))));
        assert!(matches!(decode_checkpoint(&good[..good.len() - 1]), Err(Error::Corrupt(_))));
        assert!(matches!(decode_checkpoint(&good[..10]), Err(Error::Corrupt(_))));
        let mut bad = good.clone();
        bad[10..14].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Invariant(_))));
    }
}
