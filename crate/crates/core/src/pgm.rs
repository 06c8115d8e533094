//! Binary PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn perr(path: &Path, detail: impl Into<String>) -> Error {
    Error::Pgm { path: path.to_path_buf(), detail: detail.into() }
}

/// Parses a P5 stream. Comments (`#` to end of line) are allowed between
/// header tokens; exactly one whitespace byte separates maxval from data.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        if start == *pos {
            return Err(perr(path, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(perr(path, format!("expected P5 magic, found {magic:?}")));
    }
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse::<usize>().map_err(|_| perr(path, format!("bad {what} {t:?}")))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(perr(path, format!("maxval {maxval} out of range 1..=65535")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(perr(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width * height;
    let data = &bytes[pos..];
    if data.len() < n * bps {
        return Err(perr(path, format!("raster truncated: need {} bytes, have {}", n * bps, data.len())));
    }
    let samples: Vec<u16> = if bps == 1 {
        data[..n].iter().map(|&b| b as u16).collect()
    } else {
        data[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if let Some(&bad) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(perr(path, format!("sample {bad} exceeds maxval {maxval}")));
    }
    Ok(Pgm { width, height, maxval: maxval as u16, samples })
}

pub fn encode(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    if pgm.maxval < 256 {
        out.extend(pgm.samples.iter().map(|&s| s as u8));
    } else {
        for &s in &pgm.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn read(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, pgm: &Pgm) -> Result<()> {
    fs::write(path, encode(pgm)).map_err(|e| Error::io(path, e))
}

pub fn image_to_pgm(img: &Image) -> Pgm {
    let samples = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
    Pgm { width: img.width, height: img.height, maxval: 255, samples }
}

pub fn mask_to_pgm(mask: &LabelMap) -> Pgm {
    let samples = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    Pgm { width: mask.width, height: mask.height, maxval: 255, samples }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let p = read(path)?;
    let m = p.maxval as f64;
    Image::new(p.height, p.width, p.samples.iter().map(|&s| s as f64 / m).collect())
}

/// Any nonzero sample is foreground (class 1).
pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let p = read(path)?;
    LabelMap::new(p.height, p.width, p.samples.iter().map(|&s| u8::from(s != 0)).collect())
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write(path, &image_to_pgm(img))
}

pub fn write_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    write(path, &mask_to_pgm(mask))
}
