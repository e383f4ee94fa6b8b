//! Lossless binary dumps.
//!
//! * CAM: ASCII header `CAM h w c scale_id\n`, then `h·w·c` little-endian
//!   f64 values in `[y][x][c]` order.
//! * Segments: ASCII header `SEG h w n\n`, then `h·w` little-endian u32
//!   labels in row-major order.

use std::path::Path;

use crate::cam::Cam;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::segmenter::SegmentMap;

fn split_header<'a>(bytes: &'a [u8], magic: &str, fields: usize) -> Result<(Vec<&'a str>, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Decode(format!("{magic} dump: missing header line")))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Decode(format!("{magic} dump: header is not text")))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.first() != Some(&magic) || parts.len() != fields + 1 {
        return Err(Error::Decode(format!("{magic} dump: bad header `{header}`")));
    }
    Ok((parts[1..].to_vec(), &bytes[nl + 1..]))
}

fn field<T: std::str::FromStr>(magic: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Decode(format!("{magic} dump: bad header field `{s}`")))
}

pub fn encode_cam(cam: &Cam) -> Result<Vec<u8>> {
    let [h, w, c] = *cam.map.shape() else {
        return Err(Error::dim(format!("CAM dump needs h×w×c, got {:?}", cam.map.shape())));
    };
    let mut out = format!("CAM {h} {w} {c} {}\n", cam.scale_id).into_bytes();
    out.reserve(cam.map.len() * 8);
    for v in cam.map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cam(bytes: &[u8]) -> Result<Cam> {
    let (f, body) = split_header(bytes, "CAM", 4)?;
    let (h, w, c): (usize, usize, usize) = (field("CAM", f[0])?, field("CAM", f[1])?, field("CAM", f[2])?);
    let scale_id: i32 = field("CAM", f[3])?;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Decode("CAM dump: extent overflow".into()))?;
    if body.len() != n * 8 {
        return Err(Error::Decode(format!(
            "CAM dump: expected {} payload bytes, found {}",
            n * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Cam {
        map: Tensor::new(vec![h, w, c], data).map_err(|e| Error::Decode(format!("CAM dump: {e}")))?,
        scale_id,
    })
}

pub fn encode_segments(seg: &SegmentMap) -> Vec<u8> {
    let mut out = format!("SEG {} {} {}\n", seg.h, seg.w, seg.num_segments).into_bytes();
    for l in &seg.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_segments(bytes: &[u8]) -> Result<SegmentMap> {
    let (f, body) = split_header(bytes, "SEG", 3)?;
    let (h, w, n): (usize, usize, usize) = (field("SEG", f[0])?, field("SEG", f[1])?, field("SEG", f[2])?);
    if body.len() != h * w * 4 {
        return Err(Error::Decode(format!(
            "SEG dump: expected {} payload bytes, found {}",
            h * w * 4,
            body.len()
        )));
    }
    let labels: Vec<u32> = body
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    let seg = SegmentMap {
        h,
        w,
        labels,
        num_segments: n,
    };
    if h == 0 || w == 0 || !seg.is_dense() {
        return Err(Error::Decode("SEG dump: labels are not dense in 0..n".into()));
    }
    Ok(seg)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn located(path: &Path, e: Error) -> Error {
    match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn write_cam(path: &Path, cam: &Cam) -> Result<()> {
    write(path, &encode_cam(cam)?)
}

pub fn read_cam(path: &Path) -> Result<Cam> {
    decode_cam(&read(path)?).map_err(|e| located(path, e))
}

pub fn write_segments(path: &Path, seg: &SegmentMap) -> Result<()> {
    write(path, &encode_segments(seg))
}

pub fn read_segments(path: &Path) -> Result<SegmentMap> {
    decode_segments(&read(path)?).map_err(|e| located(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cam_round_trip_is_bit_exact() {
        let map = Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 0.1).sin() / 3.0);
        let cam = Cam { map, scale_id: -1 };
        let bytes = encode_cam(&cam).unwrap();
        assert!(bytes.starts_with(b"CAM 3 2 2 -1\n"));
        assert_eq!(decode_cam(&bytes).unwrap(), cam);
    }

    #[test]
    fn cam_rejects_truncation() {
        let cam = Cam {
            map: Tensor::zeros(&[1, 1, 2]),
            scale_id: 0,
        };
        let bytes = encode_cam(&cam).unwrap();
        assert!(decode_cam(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_cam(b"MAC 1 1 1 0\n").is_err());
        assert!(decode_cam(b"CAM 1 1 1\n").is_err());
    }

    #[test]
    fn segments_round_trip() {
        let s = SegmentMap::from_labels(2, 3, vec![4, 4, 1, 1, 0, 0]).unwrap();
        let bytes = encode_segments(&s);
        assert!(bytes.starts_with(b"SEG 2 3 3\n"));
        assert_eq!(decode_segments(&bytes).unwrap(), s);
        let mut sparse = b"SEG 1 2 2\n".to_vec();
        sparse.extend_from_slice(&0u32.to_le_bytes());
        sparse.extend_from_slice(&0u32.to_le_bytes());
        assert!(decode_segments(&sparse).is_err());
    }
}
