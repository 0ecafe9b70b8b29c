//! Full-canvas inference: sliding-window prediction with overlap averaging,
//! binarization and uncertainty masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Tensor4;
use crate::par;
use crate::raster::{Bitmap, Field, PatchGrid, Raster, StitchAccumulator};
use crate::training::{Ensemble, Predictor, Role};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceParams {
    pub stride: usize,
    pub binarize_threshold: f32,
    pub uncertainty_band: (f32, f32),
    /// Windows per forward pass; affects memory only, not results.
    pub batch_size: usize,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            stride: 4,
            binarize_threshold: 0.5,
            uncertainty_band: (0.1, 0.9),
            batch_size: 64,
        }
    }
}

impl InferenceParams {
    pub fn with_stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        if self.stride == 0 || self.stride > window {
            return Err(Error::Parameter(format!(
                "stride {} outside 1..={window}",
                self.stride
            )));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Parameter(format!(
                "threshold {} outside (0, 1)",
                self.binarize_threshold
            )));
        }
        check_band(self.uncertainty_band)?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_band((lo, hi): (f32, f32)) -> Result<()> {
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::Parameter(format!(
            "uncertainty band ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
        )));
    }
    Ok(())
}

/// Slices `image` at `params.stride`, predicts every window and averages the
/// overlapping outputs. The canvas is zero-padded bottom/right as needed and
/// the padding cropped from the result.
pub fn infer_full<R, P>(image: &R, model: &P, params: &InferenceParams) -> Result<Field>
where
    R: Raster + Sync + ?Sized,
    P: Predictor + ?Sized,
{
    let window = model.window();
    params.validate(window)?;
    let grid = PatchGrid::new(image.width(), image.height(), window, params.stride)?;
    let n = window * window;
    let mut acc = StitchAccumulator::new(grid);
    let offsets: Vec<(usize, usize)> = grid.offsets().collect();
    for chunk in offsets.chunks(params.batch_size) {
        let mut data = vec![0.0f32; chunk.len() * n];
        par::for_each_chunk_mut(&mut data, n, |k, out| {
            image.crop_into(chunk[k].0, chunk[k].1, window, out)
        });
        let batch = Tensor4::from_vec([chunk.len(), window, window, 1], data)?;
        let probs = model.predict(&batch)?;
        for (k, &(x, y)) in chunk.iter().enumerate() {
            acc.add(x, y, probs.sample(k))?;
        }
    }
    acc.finish()
}

/// Foreground where `value >= threshold`.
pub fn binarize(field: &Field, threshold: f32) -> Bitmap {
    let values = field
        .as_slice()
        .iter()
        .map(|&v| u8::from(v >= threshold))
        .collect();
    Bitmap::from_vec(field.width(), field.height(), values)
        .expect("dimensions come from a valid field")
}

/// Pixels strictly inside `(lo, hi)`.
pub fn uncertainty_mask(field: &Field, band: (f32, f32)) -> Result<Bitmap> {
    check_band(band)?;
    let (lo, hi) = band;
    let values = field
        .as_slice()
        .iter()
        .map(|&v| u8::from(lo < v && v < hi))
        .collect();
    Bitmap::from_vec(field.width(), field.height(), values)
}

fn require_role(ensemble: &Ensemble, role: Role) -> Result<()> {
    if ensemble.role() != role {
        return Err(Error::Parameter(format!(
            "expected a {} ensemble, got a {} ensemble",
            role.as_str(),
            ensemble.role().as_str()
        )));
    }
    Ok(())
}

/// Corrected layout and the raw correction field.
pub fn correct_layout(
    nominal: &Bitmap,
    corrector: &Ensemble,
    params: &InferenceParams,
) -> Result<(Bitmap, Field)> {
    require_role(corrector, Role::Corrector)?;
    let field = infer_full(nominal, corrector, params)?;
    Ok((binarize(&field, params.binarize_threshold), field))
}

/// Predicted fabricated outcome and its probability field.
pub fn predict_layout(
    layout: &Bitmap,
    forward: &Ensemble,
    params: &InferenceParams,
) -> Result<(Bitmap, Field)> {
    require_role(forward, Role::Forward)?;
    let field = infer_full(layout, forward, params)?;
    Ok((binarize(&field, params.binarize_threshold), field))
}
