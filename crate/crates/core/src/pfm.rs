//! PFM (portable float map) reader/writer.
//!
//! Header: `Pf` (1 channel) or `PF` (3 channels), a dimensions line, a scale
//! line whose sign encodes endianness (negative = little-endian), then raw
//! 32-bit float scanlines stored bottom-to-top. In memory rows are top-down.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Encode raw samples (top-down row order, interleaved channels) as
/// little-endian PFM bytes. Non-finite samples pass through bit-for-bit.
pub fn encode(width: usize, height: usize, channels: usize, samples: &[f32]) -> Vec<u8> {
    assert!(channels == 1 || channels == 3, "PFM supports 1 or 3 channels");
    assert_eq!(samples.len(), width * height * channels);
    let magic = if channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(samples.len() * 4);
    let row_len = width * channels;
    for y in (0..height).rev() {
        for &v in &samples[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode PFM bytes into (width, height, channels, samples top-down).
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let channels = match bytes.get(0..2) {
        Some(b"Pf") => 1,
        Some(b"PF") => 3,
        _ => return Err(Error::Format("PFM: invalid magic".into())),
    };
    // Three whitespace-separated header tokens follow the magic, then exactly
    // one whitespace byte before the payload.
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("PFM: truncated header".into()));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::Format("PFM: non-ascii header".into()))?,
        );
    }
    if pos >= bytes.len() {
        return Err(Error::Format("PFM: missing payload".into()));
    }
    pos += 1; // single whitespace after the scale token

    let width: usize = tokens[0]
        .parse()
        .map_err(|_| Error::Format(format!("PFM: bad width '{}'", tokens[0])))?;
    let height: usize = tokens[1]
        .parse()
        .map_err(|_| Error::Format(format!("PFM: bad height '{}'", tokens[1])))?;
    let scale: f32 = tokens[2]
        .parse()
        .map_err(|_| Error::Format(format!("PFM: bad scale '{}'", tokens[2])))?;
    if width == 0 || height == 0 {
        return Err(Error::Format("PFM: zero dimension".into()));
    }
    if scale == 0.0 {
        return Err(Error::Format("PFM: zero scale".into()));
    }
    let little_endian = scale < 0.0;

    let n = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < n * 4 {
        return Err(Error::Format(format!(
            "PFM: payload holds {} bytes, need {}",
            payload.len(),
            n * 4
        )));
    }
    let row_len = width * channels;
    let mut samples = vec![0.0f32; n];
    for file_row in 0..height {
        let mem_row = height - 1 - file_row; // flip bottom-up storage to top-down
        for i in 0..row_len {
            let off = (file_row * row_len + i) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            samples[mem_row * row_len + i] = v;
        }
    }
    Ok((width, height, channels, samples))
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img.width(), img.height(), img.channels(), img.data()))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let (w, h, c, samples) = decode(&bytes)?;
    Image::new(w, h, c, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let img = Image::new(2, 2, 1, vec![1.0, -0.5, 0.25, 3.0]).unwrap();
        let bytes = encode(2, 2, 1, img.data());
        let (w, h, c, samples) = decode(&bytes).unwrap();
        assert_eq!((w, h, c), (2, 2, 1));
        assert_eq!(samples, img.data());
        // A second encode of the decoded samples is byte-identical.
        assert_eq!(encode(w, h, c, &samples), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pfm");
        let img = Image::new(3, 2, 3, (0..18).map(|i| i as f32 * 0.1 - 0.4).collect()).unwrap();
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn little_endian_header_example() {
        // 2x2 single channel, payload stored bottom-to-top.
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (w, h, c, samples) = decode(&bytes).unwrap();
        assert_eq!((w, h, c), (2, 2, 1));
        assert_eq!(samples, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn big_endian_scale_sign_honored() {
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        for v in [7.5f32, -2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let (_, _, _, samples) = decode(&bytes).unwrap();
        assert_eq!(samples, vec![-2.0, 7.5]);
    }

    #[test]
    fn invalid_magic_rejected() {
        assert!(matches!(decode(b"Px\n1 1\n-1.0\n\0\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_rejected() {
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn prop_round_trip_identity(
            w in 1usize..12,
            h in 1usize..12,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
            let bytes = encode(w, h, 1, &samples);
            let (rw, rh, rc, back) = decode(&bytes).unwrap();
            prop_assert_eq!((rw, rh, rc), (w, h, 1));
            prop_assert_eq!(back, samples);
        }
    }
}
