//! Bitmap comparison: error pixels, reduction factors, tri-color diff maps and
//! dataset-level BCE.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Bitmap;
use crate::training::{Dataset, Direction, Predictor, Split};

fn check_same_dims(a: &Bitmap, b: &Bitmap) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "bitmaps differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Hamming distance between two equally sized bitmaps.
pub fn error_pixels(a: &Bitmap, b: &Bitmap) -> Result<usize> {
    check_same_dims(a, b)?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .filter(|(p, q)| p != q)
        .count())
}

/// Ratio of uncorrected to corrected error pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReductionFactor {
    pub uncorrected: usize,
    pub corrected: usize,
}

impl ReductionFactor {
    /// Exact ratio; `None` when the corrected count is zero.
    pub fn ratio(&self) -> Option<f64> {
        (self.corrected > 0).then(|| self.uncorrected as f64 / self.corrected as f64)
    }

    /// One-decimal report, `∞` for a perfect correction.
    pub fn rounded(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ReductionFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ratio() {
            Some(r) => write!(f, "{r:.1}"),
            None => f.write_str("∞"),
        }
    }
}

pub fn reduction_factor(e_uncorrected: usize, e_corrected: usize) -> ReductionFactor {
    ReductionFactor {
        uncorrected: e_uncorrected,
        corrected: e_corrected,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiffCode {
    Unchanged,
    /// Silicon in the nominal, missing in the other.
    Loss,
    /// Silicon absent in the nominal, present in the other.
    Gain,
}

impl DiffCode {
    /// Green, red and blue.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            DiffCode::Unchanged => [0, 255, 0],
            DiffCode::Loss => [255, 0, 0],
            DiffCode::Gain => [0, 0, 255],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffMap {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<DiffCode>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiffCounts {
    pub unchanged: usize,
    pub loss: usize,
    pub gain: usize,
}

impl DiffMap {
    pub fn counts(&self) -> DiffCounts {
        let mut c = DiffCounts::default();
        for code in &self.codes {
            match code {
                DiffCode::Unchanged => c.unchanged += 1,
                DiffCode::Loss => c.loss += 1,
                DiffCode::Gain => c.gain += 1,
            }
        }
        c
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(3 * self.codes.len());
        for code in &self.codes {
            out.extend_from_slice(&code.rgb());
        }
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

pub fn diff_map(nominal: &Bitmap, other: &Bitmap) -> Result<DiffMap> {
    check_same_dims(nominal, other)?;
    let codes = nominal
        .as_slice()
        .iter()
        .zip(other.as_slice())
        .map(|(&n, &o)| match (n != 0, o != 0) {
            (true, false) => DiffCode::Loss,
            (false, true) => DiffCode::Gain,
            _ => DiffCode::Unchanged,
        })
        .collect();
    Ok(DiffMap {
        width: nominal.width(),
        height: nominal.height(),
        codes,
    })
}

/// Decodes a P6 diff-map image back into codes.
pub fn decode_diff_ppm(bytes: &[u8]) -> Result<DiffMap> {
    let header = crate::raster::parse_netpbm_header(bytes, b"P6")?;
    let need = 3 * header.width * header.height;
    let payload = &bytes[header.payload_offset..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let codes = payload[..need]
        .chunks_exact(3)
        .enumerate()
        .map(|(i, px)| match px {
            [0, 255, 0] => Ok(DiffCode::Unchanged),
            [255, 0, 0] => Ok(DiffCode::Loss),
            [0, 0, 255] => Ok(DiffCode::Gain),
            _ => Err(Error::format(
                (header.payload_offset + 3 * i) as u64,
                format!("unknown diff color {px:?}"),
            )),
        })
        .collect::<Result<_>>()?;
    Ok(DiffMap {
        width: header.width,
        height: header.height,
        codes,
    })
}

/// Mean BCE of the model's (ensemble-mean) outputs against the labels of one
/// split.
pub fn evaluate_bce<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    split: Split,
    direction: Direction,
) -> Result<f64> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::Parameter(format!("the {split:?} split is empty")));
    }
    crate::training::mean_bce(model, dataset, indices, direction)
}
