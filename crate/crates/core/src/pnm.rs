//! Binary portable pixmap (P6) and graymap (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            b' ' | b'\t' | b'\n' | b'\r' => pos += 1,
            _ => break,
        }
    }
    pos
}

fn read_number(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(parse_err(start, format!("expected {what}")));
    }
    if end - start > 9 {
        return Err(parse_err(start, format!("{what} is too large")));
    }
    let value = std::str::from_utf8(&bytes[start..end]).unwrap().parse().unwrap();
    Ok((value, end))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(0, "missing P5/P6 magic")),
    };
    let (width, pos) = read_number(bytes, 2, "width")?;
    let (height, pos) = read_number(bytes, pos, "height")?;
    let (maxval, pos) = read_number(bytes, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(pos, format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => {}
        _ => return Err(parse_err(pos, "expected one whitespace byte before the raster")),
    }
    Ok(Header { channels, width, height, maxval, data_start: pos + 1 })
}

/// Decodes a P5/P6 buffer into a channel-major `[C, H, W]` tensor scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let bytes_per_sample = if h.maxval > 255 { 2 } else { 1 };
    let plane = h.width * h.height;
    let needed = plane
        .checked_mul(h.channels * bytes_per_sample)
        .ok_or_else(|| parse_err(h.data_start, "raster size overflows"))?;
    let raster = &bytes[h.data_start..];
    if raster.len() < needed {
        return Err(parse_err(
            bytes.len(),
            format!("raster truncated: {} of {needed} bytes", raster.len()),
        ));
    }
    let scale = h.maxval as f64;
    let mut data = vec![0.0; h.channels * plane];
    for i in 0..plane * h.channels {
        let at = i * bytes_per_sample;
        let v = if bytes_per_sample == 2 {
            u16::from_be_bytes([raster[at], raster[at + 1]]) as usize
        } else {
            raster[at] as usize
        };
        if v > h.maxval {
            return Err(parse_err(h.data_start + at, format!("sample {v} exceeds maxval {}", h.maxval)));
        }
        let (pixel, channel) = (i / h.channels, i % h.channels);
        data[channel * plane + pixel] = v as f64 / scale;
    }
    Tensor::new(&[h.channels, h.height, h.width], data)
}

/// Encodes a `[1|3, H, W]` tensor with values in `[0, 1]` as 8-bit P5/P6.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "PNM images need shape [1|3, H, W], got {:?}",
                image.shape()
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for pixel in 0..plane {
        for channel in 0..c {
            let v = image.data()[channel * plane + pixel];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_rgb_pixel() {
        let t = decode(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn graymap_is_single_channel() {
        let t = decode(b"P5 2 1 255 \x00\x80").unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0]);
    }

    #[test]
    fn comments_and_wide_samples() {
        let t = decode(b"P5\n# note\n1 1\n# more\n1000\n\x01\xf4").unwrap();
        assert_eq!(t.data(), &[0.5]);
    }

    #[test]
    fn channel_major_layout() {
        let t = decode(b"P6 2 1 255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let expected: Vec<f64> = [1, 4, 2, 5, 3, 6].iter().map(|&v| v as f64 / 255.0).collect();
        assert_eq!(t.data(), expected.as_slice());
    }

    #[test]
    fn errors_carry_offsets() {
        let cases: [(&[u8], usize); 6] = [
            (b"P3 1 1 255\n\x00", 0),
            (b"P6 x 1 255\n", 3),
            (b"P6 1 1 255\n\x00", 12),
            (b"P5 1 1 0\n\x00", 8),
            (b"P5 1 1 100\n\xff", 11),
            (b"P5 1 1 255", 10),
        ];
        for (bytes, offset) in cases {
            match decode(bytes) {
                Err(Error::Parse { offset: o, .. }) => assert_eq!(o, offset, "{bytes:?}"),
                other => panic!("{bytes:?}: {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(c in prop::sample::select(vec![1usize, 3]), h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let n = c * h * w;
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64 * 97)) % 256) as f64 / 255.0).collect();
            let t = Tensor::new(&[c, h, w], data).unwrap();
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn corrupted_input_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
            let mut prefixed = b"P6 2 2 255\n".to_vec();
            prefixed.extend(&bytes);
            let _ = decode(&prefixed);
        }
    }
}
