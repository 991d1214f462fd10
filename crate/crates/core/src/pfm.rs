//! Portable float map (PFM) images, always little-endian on disk.
//!
//! `PF` = 3 channels, `Pf` = 1 channel. Rows are stored bottom-to-top per the
//! format; in memory row 0 is the top. Values pass through f32, so a
//! write-then-read round trip is bit-exact for f32 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("pfm i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("pfm format: {0}")]
    Format(String),
}

/// A float image: `h` x `w` with `channels` in {1, 3}, row-major from the top.
#[derive(Clone, Debug)]
pub struct PfmImage {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<f32>) -> Result<PfmImage, PfmError> {
        if channels != 1 && channels != 3 {
            return Err(PfmError::Format(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != h * w * channels {
            return Err(PfmError::Format(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                h,
                w,
                channels
            )));
        }
        Ok(PfmImage {
            h,
            w,
            channels,
            data,
        })
    }

    pub fn from_f64(
        h: usize,
        w: usize,
        channels: usize,
        data: &[f64],
    ) -> Result<PfmImage, PfmError> {
        PfmImage::new(h, w, channels, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn write_pfm(path: &Path, img: &PfmImage) -> Result<(), PfmError> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    let magic = if img.channels == 3 { "PF" } else { "Pf" };
    // Negative scale marks little-endian.
    write!(out, "{}\n{} {}\n-1.0\n", magic, img.w, img.h)?;
    let row = img.w * img.channels;
    for y in (0..img.h).rev() {
        let slice = &img.data[y * row..(y + 1) * row];
        let mut bytes = Vec::with_capacity(row * 4);
        for v in slice {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<PfmImage, PfmError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let magic = read_token(&mut r)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(PfmError::Format(format!("bad magic {other:?}"))),
    };
    let w: usize = read_token(&mut r)?
        .parse()
        .map_err(|e| PfmError::Format(format!("bad width: {e}")))?;
    let h: usize = read_token(&mut r)?
        .parse()
        .map_err(|e| PfmError::Format(format!("bad height: {e}")))?;
    let scale: f32 = read_token(&mut r)?
        .parse()
        .map_err(|e| PfmError::Format(format!("bad scale: {e}")))?;
    if scale == 0.0 {
        return Err(PfmError::Format("zero scale".into()));
    }
    let little_endian = scale < 0.0;
    let n = h * w * channels;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let mut flipped = vec![0.0f32; n];
    let row = w * channels;
    for y in 0..h {
        // Stored bottom-to-top.
        let src = (h - 1 - y) * row;
        for i in 0..row {
            let o = (src + i) * 4;
            let b = [raw[o], raw[o + 1], raw[o + 2], raw[o + 3]];
            let v = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            flipped[y * row + i] = v;
        }
    }
    let mag = scale.abs();
    if (mag - 1.0).abs() > 1e-6 {
        for v in &mut flipped {
            *v *= mag;
        }
    }
    PfmImage::new(h, w, channels, flipped)
}

/// Reads one whitespace-delimited header token.
fn read_token(r: &mut impl Read) -> Result<String, PfmError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        if tok.len() > 32 {
            return Err(PfmError::Format("oversized header token".into()));
        }
        tok.push(byte[0] as char);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        let data: Vec<f32> = (0..4 * 5 * 3)
            .map(|i| (i as f32 * 0.731).sin() * 1000.0)
            .collect();
        let img = PfmImage::new(4, 5, 3, data.clone()).unwrap();
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.h, 4);
        assert_eq!(back.w, 5);
        assert_eq!(back.channels, 3);
        assert_eq!(back.data, data);
    }

    #[test]
    fn single_channel_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pfm");
        let img = PfmImage::new(2, 3, 1, vec![0.0, 1.0, -2.5, 3.25, 4.0, 5.0]).unwrap();
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"P6\n1 1\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&path), Err(PfmError::Format(_))));
    }
}
