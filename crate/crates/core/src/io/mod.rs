//! File formats: AVID clips, `.mask` grids, `.labels` CSV, checkpoints,
//! PGM images and metrics CSV. All binary formats are little-endian except
//! 16-bit PGM samples, which the PGM format defines as big-endian.

pub mod avid;
pub mod checkpoint;
pub mod corpus;
pub mod metrics;
pub mod pgm;

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub use avid::{read_avid, write_avid};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use corpus::{read_corpus, read_labels, read_mask, write_corpus, write_labels, write_mask};
pub use metrics::{read_metrics, write_metrics, MetricsWriter};
pub use pgm::{export_mask, export_probability_map, read_pgm, token_grid_image, write_pgm, GrayImage};

/// Reads a JSON run configuration; missing fields take their defaults.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("{}: truncated at byte {} (wanted {n} more)", self.what, self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 16 bits")))
}
