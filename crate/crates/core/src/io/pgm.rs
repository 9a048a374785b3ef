//! Binary portable graymaps (`P5`).
//!
//! Token-grid images are `W′` pixels wide and `T′·H′` tall: temporal slices
//! are stacked vertically, so pixel `(x, y)` is token `y·W′ + x`, the same
//! row-major order the tokenizer uses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sampler::ProbabilityMap;
use crate::tokenizer::{PatchGeometry, VideoTensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// 255 for 8-bit images, up to 65535 for 16-bit.
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }
}

/// Header `P5\n<w> <h>\n<maxval>\n`, then one byte per sample (maxval < 256)
/// or two big-endian bytes.
pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    if img.pixels.len() != img.width * img.height || img.maxval == 0 {
        return Err(Error::Format("pgm: pixel count does not match dimensions".into()));
    }
    if let Some(&p) = img.pixels.iter().find(|&&p| p > img.maxval) {
        return Err(Error::Format(format!("pgm: sample {p} above maxval {}", img.maxval)));
    }
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval < 256 {
        out.extend(img.pixels.iter().map(|&p| p as u8));
    } else {
        for &p in &img.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    let n = width * height;
    let pixels: Vec<u16> = if maxval < 256 {
        if data.len() != n {
            return Err(bad("raster size mismatch"));
        }
        data.iter().map(|&b| b as u16).collect()
    } else {
        if data.len() != 2 * n {
            return Err(bad("raster size mismatch"));
        }
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(GrayImage {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(img)?)?)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&std::fs::read(path)?)
}

/// Min-max scales `values` to `[0, maxval]`. A constant input maps to mid-gray.
fn scale(values: &[f64], maxval: u16) -> Vec<u16> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let m = maxval as f64;
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * m).round() as u16
            } else {
                (m / 2.0).round() as u16
            }
        })
        .collect()
}

/// One pixel per token, min-max scaled.
pub fn token_grid_image(values: &[f64], geom: &PatchGeometry, maxval: u16) -> Result<GrayImage> {
    if values.len() != geom.num_tokens() {
        return Err(Error::InvalidArgument(format!(
            "{} values for {} tokens",
            values.len(),
            geom.num_tokens()
        )));
    }
    Ok(GrayImage {
        width: geom.grid_w(),
        height: geom.grid_t() * geom.grid_h(),
        maxval,
        pixels: scale(values, maxval),
    })
}

/// Path of the raw-value sidecar written next to an image.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("txt")
}

/// Writes the 8-bit token-grid image of `p` and a `.txt` sidecar with one
/// `t h w probability` line per token (shortest round-trip decimal form).
pub fn export_probability_map(p: &ProbabilityMap, path: &Path) -> Result<()> {
    let g = &p.geometry;
    write_pgm(path, &token_grid_image(&p.probs, g, 255)?)?;
    let mut s = String::from("# t h w probability\n");
    for (i, v) in p.probs.iter().enumerate() {
        let (t, h, w) = g.token_coords(i);
        writeln!(s, "{t} {h} {w} {v}").expect("write to String");
    }
    Ok(std::fs::write(sidecar_path(path), s)?)
}

/// Visible tokens white, masked tokens black.
pub fn export_mask(masked: &[bool], geom: &PatchGeometry, path: &Path) -> Result<()> {
    let values: Vec<f64> = masked.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let mut img = token_grid_image(&values, geom, 255)?;
    for (px, &m) in img.pixels.iter_mut().zip(masked) {
        *px = if m { 0 } else { 255 };
    }
    write_pgm(path, &img)
}

/// Frames side by side (`T·W` wide, `H` tall), channel-averaged, with
/// `[lo, hi]` mapped to `[0, 255]` and clamped.
pub fn video_strip(v: &VideoTensor, lo: f64, hi: f64) -> GrayImage {
    let [c, t, h, w] = v.shape();
    let mut pixels = vec![0u16; t * w * h];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let mean = (0..c).map(|ch| v.get(ch, f, y, x)).sum::<f64>() / c as f64;
                let u = if hi > lo { (mean - lo) / (hi - lo) } else { 0.5 };
                pixels[y * t * w + f * w + x] = (u.clamp(0.0, 1.0) * 255.0).round() as u16;
            }
        }
    }
    GrayImage {
        width: t * w,
        height: h,
        maxval: 255,
        pixels,
    }
}
