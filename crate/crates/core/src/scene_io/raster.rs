//! The portable raster format.
//!
//! Layout: the 4 magic bytes `MSR1`, a little-endian `u32` triple
//! `(channels, height, width)`, then `channels * height * width`
//! little-endian `f32` values in band-major, row-major order. Scenes use
//! 6 channels; masks use a single channel holding 0.0 or 1.0.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"MSR1";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn decode_raster(bytes: &[u8]) -> std::result::Result<Raster, String> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != RASTER_MAGIC {
        return Err("missing MSR1 header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (channels, height, width) = (word(0) as usize, word(1) as usize, word(2) as usize);
    if channels != 1 && channels != 6 {
        return Err(format!("channel count must be 1 or 6, got {channels}"));
    }
    let count = channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or("header dimensions overflow")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 4 {
        return Err(format!(
            "header declares ({channels},{height},{width}) = {count} values but body holds {} bytes",
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Raster {
        channels,
        height,
        width,
        data,
    })
}

pub fn encode_raster(raster: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + raster.data.len() * 4);
    out.extend_from_slice(RASTER_MAGIC);
    for v in [raster.channels, raster.height, raster.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &raster.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    assert_eq!(raster.data.len(), raster.channels * raster.height * raster.width);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_raster(raster)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let r = Raster {
            channels: 1,
            height: 2,
            width: 3,
            data: vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
        };
        let bytes = encode_raster(&r);
        assert_eq!(&bytes[..4], b"MSR1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &0.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn rejects_truncated_body_and_bad_channels() {
        let mut bytes = encode_raster(&Raster {
            channels: 6,
            height: 1,
            width: 1,
            data: vec![0.5; 6],
        });
        bytes.pop();
        assert!(decode_raster(&bytes).unwrap_err().contains("body"));
        let bad = encode_raster(&Raster {
            channels: 4,
            height: 1,
            width: 1,
            data: vec![0.5; 4],
        });
        assert!(decode_raster(&bad).unwrap_err().contains("got 4"));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(h in 1usize..8, w in 1usize..8, six in any::<bool>(), seed in any::<u32>()) {
            let c = if six { 6 } else { 1 };
            let data: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
            let r = Raster { channels: c, height: h, width: w, data };
            prop_assert_eq!(decode_raster(&encode_raster(&r)).unwrap(), r);
        }
    }
}
