//! Corpus directories: one AVID file and one `.mask` sidecar per clip plus a
//! `corpus.labels` CSV.
//!
//! `.mask` layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AMSK"
//! 4       2     T′ (u16 LE)
//! 6       2     H′
//! 8       2     W′
//! 10      2     reserved, zero
//! 12      N     one byte per token in tokenizer order, 0 or 1
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{dim_u16, read_avid, write_avid, Reader};
use crate::error::{Error, Result};
use crate::synth::{ActivityMask, Direction, SyntheticVideo};
use crate::tokenizer::PatchGeometry;

pub const MASK_MAGIC: &[u8; 4] = b"AMSK";
pub const LABELS_FILE: &str = "corpus.labels";
pub const LABELS_HEADER: &str = "file,label,direction";

pub fn encode_mask(grid: [usize; 3], flags: &[bool]) -> Result<Vec<u8>> {
    if grid.iter().product::<usize>() != flags.len() {
        return Err(Error::Format(format!("{} flags for grid {grid:?}", flags.len())));
    }
    let mut out = Vec::with_capacity(12 + flags.len());
    out.extend_from_slice(MASK_MAGIC);
    for d in grid {
        out.extend_from_slice(&dim_u16(d, "grid extent")?.to_le_bytes());
    }
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend(flags.iter().map(|&f| f as u8));
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<([usize; 3], Vec<bool>)> {
    let mut r = Reader::new(bytes, "mask");
    if &r.array::<4>()? != MASK_MAGIC {
        return Err(Error::Format("mask: bad magic".into()));
    }
    let grid = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
    r.u16()?;
    let raw = r.take(grid.iter().product())?;
    r.finish()?;
    let flags = raw
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask: byte {other} is not 0 or 1"))),
        })
        .collect::<Result<_>>()?;
    Ok((grid, flags))
}

pub fn write_mask(path: &Path, grid: [usize; 3], flags: &[bool]) -> Result<()> {
    Ok(std::fs::write(path, encode_mask(grid, flags)?)?)
}

pub fn read_mask(path: &Path) -> Result<([usize; 3], Vec<bool>)> {
    decode_mask(&std::fs::read(path)?)
}

pub fn write_labels(path: &Path, rows: &[(String, Direction)]) -> Result<()> {
    let mut s = String::from(LABELS_HEADER);
    s.push('\n');
    for (file, d) in rows {
        if file.contains(',') || file.contains('\n') {
            return Err(Error::Format(format!("file name `{file}` cannot go in a labels CSV")));
        }
        writeln!(s, "{file},{},{}", d.label(), d.name()).expect("write to String");
    }
    Ok(std::fs::write(path, s)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, Direction)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LABELS_HEADER) {
        return Err(Error::Format(format!("{}: missing `{LABELS_HEADER}` header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("{}: bad row `{line}`", path.display()));
            if cols.len() != 3 {
                return Err(bad());
            }
            let label: u8 = cols[1].parse().map_err(|_| bad())?;
            let d = Direction::from_label(label)?;
            if d.name() != cols[2] {
                return Err(bad());
            }
            Ok((cols[0].to_string(), d))
        })
        .collect()
}

pub fn clip_name(i: usize) -> String {
    format!("clip_{i:04}")
}

fn grid_of(geom: &PatchGeometry) -> [usize; 3] {
    [geom.grid_t(), geom.grid_h(), geom.grid_w()]
}

/// Writes `clip_NNNN.avid`, `clip_NNNN.mask` and `corpus.labels` into `dir`.
pub fn write_corpus(dir: &Path, clips: &[SyntheticVideo]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let name = clip_name(i);
        write_avid(&dir.join(format!("{name}.avid")), &c.video)?;
        write_mask(&dir.join(format!("{name}.mask")), grid_of(&c.activity.geometry), &c.activity.active)?;
        rows.push((format!("{name}.avid"), c.label));
    }
    write_labels(&dir.join(LABELS_FILE), &rows)
}

/// Loads a corpus written by [`write_corpus`], checking every clip against `geom`.
pub fn read_corpus(dir: &Path, geom: &PatchGeometry) -> Result<Vec<SyntheticVideo>> {
    read_labels(&dir.join(LABELS_FILE))?
        .into_iter()
        .map(|(file, label)| {
            let video = read_avid(&dir.join(&file))?;
            if video.shape() != geom.video_shape() {
                return Err(Error::Geometry(format!(
                    "{file}: shape {:?}, expected {:?}",
                    video.shape(),
                    geom.video_shape()
                )));
            }
            let mask_path = dir.join(Path::new(&file).with_extension("mask"));
            let (grid, active) = read_mask(&mask_path)?;
            if grid != grid_of(geom) {
                return Err(Error::Geometry(format!("{}: grid {grid:?}", mask_path.display())));
            }
            Ok(SyntheticVideo {
                video,
                activity: ActivityMask { active, geometry: *geom },
                label,
            })
        })
        .collect()
}
