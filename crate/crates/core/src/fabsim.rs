//! Virtual fabrication: Gaussian blur, seeded additive edge noise and a
//! threshold. Reproduces corner rounding on convex bends, filling of concave
//! bends, loss of small islands and closing of narrow gaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Bitmap, Field};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FabParams {
    /// Blur standard deviation in pixels.
    pub sigma: f64,
    pub threshold: f64,
    /// Half-width of the uniform pre-threshold noise.
    pub edge_noise_amp: f64,
    pub seed: u64,
}

impl Default for FabParams {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            threshold: 0.5,
            edge_noise_amp: 0.0,
            seed: 0,
        }
    }
}

impl FabParams {
    /// A process that reproduces its input exactly: the kernel is so narrow
    /// that neighbor weights underflow the threshold margin.
    pub fn identity() -> Self {
        Self {
            sigma: 0.1,
            threshold: 0.5,
            edge_noise_amp: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Parameter(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        let margin = self.threshold.min(1.0 - self.threshold);
        if !(self.edge_noise_amp >= 0.0 && self.edge_noise_amp < margin) {
            return Err(Error::Parameter(format!(
                "edge_noise_amp must be in [0, {margin}), got {}",
                self.edge_noise_amp
            )));
        }
        Ok(())
    }
}

/// Square, normalized, sampled Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub radius: usize,
    /// Row-major `side`x`side` weights.
    pub values: Vec<f64>,
}

impl GaussianKernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        self.values[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }
}

fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Normalized 1-D profile whose outer product is [`gaussian_kernel`].
fn gaussian_profile(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn gaussian_kernel(sigma: f64) -> Result<GaussianKernel> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let profile = gaussian_profile(sigma);
    let values = profile
        .iter()
        .flat_map(|&a| profile.iter().map(move |&b| a * b))
        .collect();
    Ok(GaussianKernel {
        radius: kernel_radius(sigma),
        values,
    })
}

/// Symmetric ("half-sample") reflection of an index into `0..n`.
pub(crate) fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless uniform sample in `[-1, 1)` keyed by seed and pixel coordinates.
pub(crate) fn pixel_noise(seed: u64, x: usize, y: usize) -> f64 {
    let key = splitmix64(seed ^ splitmix64(((y as u64) << 32) ^ x as u64));
    (key >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Blurred-plus-noise field before thresholding, unclamped.
fn blurred(layout: &Bitmap, params: &FabParams) -> Result<Vec<f64>> {
    params.validate()?;
    let (w, h) = (layout.width(), layout.height());
    let profile = gaussian_profile(params.sigma);
    let r = kernel_radius(params.sigma) as isize;
    let src = layout.as_slice();

    let mut horizontal = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in profile.iter().enumerate() {
                let xi = reflect(x as isize + k as isize - r, w);
                acc += wt * f64::from(row[xi]);
            }
            horizontal[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in profile.iter().enumerate() {
                let yi = reflect(y as isize + k as isize - r, h);
                acc += wt * horizontal[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    if params.edge_noise_amp > 0.0 {
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] += params.edge_noise_amp * pixel_noise(params.seed, x, y);
            }
        }
    }
    Ok(out)
}

pub fn fabricate(layout: &Bitmap, params: &FabParams) -> Result<Bitmap> {
    let field = blurred(layout, params)?;
    Bitmap::from_vec(
        layout.width(),
        layout.height(),
        field
            .into_iter()
            .map(|v| u8::from(v >= params.threshold))
            .collect(),
    )
}

pub fn fabricate_field(layout: &Bitmap, params: &FabParams) -> Result<Field> {
    let field = blurred(layout, params)?;
    Field::from_vec(
        layout.width(),
        layout.height(),
        field
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect(),
    )
}
