//! Tensor files and 8-bit PGM/PPM images.
//!
//! Tensor file layout (little-endian): `"TNSR" | u32 version | u32 rank |
//! rank × u32 dim | f64 payload`, row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const TENSOR_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let parse = |offset: usize, message: String| Error::Parse {
        offset: offset as u64,
        message,
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| parse(at, "truncated header".into()))
    };
    if bytes.get(..4) != Some(TENSOR_MAGIC) {
        return Err(parse(0, "bad magic, not a tensor file".into()));
    }
    let version = word(4)?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let rank = word(8)? as usize;
    let mut shape = Vec::with_capacity(rank.min(8));
    for i in 0..rank {
        shape.push(word(12 + 4 * i)? as usize);
    }
    let start = 12 + 4 * rank;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0 && rank > 0)
        .ok_or_else(|| parse(12, format!("invalid shape {shape:?}")))?;
    let payload = &bytes[start.min(bytes.len())..];
    if Some(payload.len()) != numel.checked_mul(8) {
        return Err(parse(
            start,
            format!("payload has {} bytes, shape {shape:?} needs {}", payload.len(), numel * 8),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

/// Round-half-up quantization of `[0, 1]` (clamped) to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encode a `[1, h, w]` image as binary PGM or a `[3, h, w]` image as
/// binary PPM. A rank-2 `[h, w]` tensor is treated as one channel.
pub fn encode_image(x: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *x.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::contract(format!("image tensor must be [c, h, w], got {:?}", x.shape()))),
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::contract(format!("images need 1 or 3 channels, got {c}"))),
    };
    let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    for p in 0..hw {
        for ch in 0..c {
            buf.push(to_byte(x.data()[ch * hw + p]));
        }
    }
    Ok(buf)
}

pub fn write_image(path: &Path, x: &Tensor) -> Result<()> {
    std::fs::write(path, encode_image(x)?)?;
    Ok(())
}

/// Decode binary PGM/PPM (maxval 255) into a `[c, h, w]` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                offset: pos as u64,
                message: "truncated image header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1;
    let c = match fields[0].1.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unsupported image type {other}"),
            })
        }
    };
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| Error::Parse {
            offset: fields[i].0 as u64,
            message: format!("bad number {}", fields[i].1),
        })
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(Error::Parse {
            offset: fields[3].0 as u64,
            message: format!("only maxval 255 is supported, got {max}"),
        });
    }
    let hw = h * w;
    let pixels = bytes.get(pos..pos + c * hw).ok_or_else(|| Error::Parse {
        offset: pos as u64,
        message: "truncated pixel data".into(),
    })?;
    let mut data = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            data[ch * hw + p] = pixels[p * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?)
}

/// Lay out `[c, h, w]` tiles left to right with a one-pixel gap.
pub fn image_strip(tiles: &[Tensor], background: f64) -> Result<Tensor> {
    image_grid(tiles, tiles.len(), background)
}

/// Lay out `[c, h, w]` tiles row-major in a grid with `cols` columns.
pub fn image_grid(tiles: &[Tensor], cols: usize, background: f64) -> Result<Tensor> {
    let first = tiles.first().ok_or_else(|| Error::contract("empty image grid"))?;
    if first.rank() != 3 || cols == 0 {
        return Err(Error::contract("grid tiles must be [c, h, w] with at least one column"));
    }
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let rows = tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = Tensor::full(&[c, gh, gw], background);
    for (i, t) in tiles.iter().enumerate() {
        if t.shape() != first.shape() {
            return Err(Error::shape("image_grid", t.shape(), first.shape()));
        }
        let (r0, c0) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(ch * gh + r0 + y) * gw + c0 + x] = t.data()[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_grey_is_128() {
        let img = Tensor::full(&[1, 2, 3], 0.5);
        let bytes = encode_image(&img).unwrap();
        assert!(bytes.ends_with(&[128; 6]));
    }

    #[test]
    fn single_black_pixel() {
        let bytes = encode_image(&Tensor::zeros(&[1, 1, 1])).unwrap();
        assert_eq!(bytes, b"P5\n1 1\n255\n\0");
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i as f64 * 0.137).fract());
        let back = decode_image(&encode_image(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn values_are_clamped() {
        let img = Tensor::new(&[1, 1, 2], vec![-3.0, 7.0]).unwrap();
        assert!(encode_image(&img).unwrap().ends_with(&[0, 255]));
    }

    #[test]
    fn two_channels_rejected() {
        assert!(encode_image(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = Tensor::from_fn(&[2, 3, 1], |i| (i as f64).sin() * 1e-300 + 0.1 * i as f64);
        assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
    }

    #[test]
    fn truncated_tensor_reports_offset() {
        let bytes = encode_tensor(&Tensor::zeros(&[4]));
        match decode_tensor(&bytes[..bytes.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(decode_tensor(&wrong), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::ones(&[1, 2, 2]);
        let g = image_grid(&[a.clone(), a.clone(), a], 2, 0.0).unwrap();
        assert_eq!(g.shape(), &[1, 5, 5]);
        assert_eq!(g.data()[2], 0.0);
        assert_eq!(g.data()[3], 1.0);
    }
}
