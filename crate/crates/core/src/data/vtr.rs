//! Video tensor files: magic `VTSR`, version, dims, label, then raw f32
//! little-endian in [t][h][w][c] order. Lossless round trip.

use super::{format_err, invalid, DataError, VideoSample};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VTSR";
const VERSION: u32 = 1;

pub fn encode_bytes(sample: &VideoSample) -> Result<Vec<u8>, DataError> {
    sample.validate().map_err(|e| invalid(format!("{}: {e}", sample.id)))?;
    let s = sample.frames.shape();
    if s.iter().any(|&d| d > u32::MAX as usize) || sample.label > u32::MAX as usize {
        return Err(invalid("dimension or label exceeds u32"));
    }
    let mut buf = Vec::with_capacity(28 + sample.frames.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for &d in s {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(sample.label as u32).to_le_bytes());
    for v in sample.frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn encode(sample: &VideoSample, path: &Path) -> Result<(), DataError> {
    let buf = encode_bytes(sample)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Parses frames and label; `origin` names the source in error messages.
pub fn decode_bytes(buf: &[u8], origin: &str) -> Result<(Tensor<f32>, usize), DataError> {
    if buf.len() < 28 {
        return Err(format_err(format!("{origin}: shorter than the header")));
    }
    if &buf[..4] != MAGIC {
        return Err(format_err(format!("{origin}: bad magic")));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(format_err(format!("{origin}: unsupported version {}", word(0))));
    }
    let (t, h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    let label = word(5) as usize;
    let n = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| format_err(format!("{origin}: dimension overflow")))?;
    let payload = &buf[28..];
    if payload.len() != n * 4 {
        return Err(format_err(format!(
            "{origin}: header promises {} floats, payload has {} bytes",
            n,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let frames =
        Tensor::new(vec![t, h, w, c], data).map_err(|e| format_err(format!("{origin}: {e}")))?;
    Ok((frames, label))
}

/// Reads frames and label; the id comes from the caller (the index).
pub fn decode(path: &Path) -> Result<(Tensor<f32>, usize), DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_bytes(&buf, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VideoSample {
        let n = 2 * 3 * 4 * 3;
        let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.618).fract()).collect();
        VideoSample {
            id: "t0".into(),
            frames: Tensor::new(vec![2, 3, 4, 3], data).unwrap(),
            label: 5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vtr");
        let s = sample();
        encode(&s, &path).unwrap();
        let (frames, label) = decode(&path).unwrap();
        assert_eq!(label, 5);
        assert_eq!(frames.shape(), s.frames.shape());
        assert_eq!(frames.data(), s.frames.data());
        // re-encode is byte-identical
        let path2 = dir.path().join("b.vtr");
        encode(&VideoSample { id: "x".into(), frames, label }, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vtr");
        encode(&sample(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let wrong_magic = dir.path().join("m.vtr");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&wrong_magic, &b).unwrap();
        assert!(decode(&wrong_magic).is_err());

        let truncated = dir.path().join("t.vtr");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(decode(&truncated).is_err());

        // header dims inconsistent with payload: claim one extra frame
        let lying = dir.path().join("l.vtr");
        let mut b = bytes.clone();
        b[8..12].copy_from_slice(&3u32.to_le_bytes());
        std::fs::write(&lying, &b).unwrap();
        let err = decode(&lying).unwrap_err();
        assert!(err.to_string().contains("payload"));
    }

    #[test]
    fn out_of_range_values_refuse_to_encode() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample();
        s.frames.data_mut()[0] = 1.5;
        assert!(encode(&s, &dir.path().join("x.vtr")).is_err());
    }
}
