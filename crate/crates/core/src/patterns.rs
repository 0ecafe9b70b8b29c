//! Seeded random training layouts.
//!
//! Shapes are drawn one at a time by rejection sampling against the density
//! bound. The vocabulary covers convex and concave corners, thin bars, islands,
//! holes and channels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Bitmap;

pub const MIN_DENSITY: f64 = 0.15;
pub const MAX_DENSITY: f64 = 0.85;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rectangle,
    Bar,
    Cross,
    StarPolygon,
    Disk,
    Ring,
    RandomBlob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 7] = [
        ShapeKind::Rectangle,
        ShapeKind::Bar,
        ShapeKind::Cross,
        ShapeKind::StarPolygon,
        ShapeKind::Disk,
        ShapeKind::Ring,
        ShapeKind::RandomBlob,
    ];
}

/// Relative sampling weights per shape kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeMix {
    pub rectangle: f64,
    pub bar: f64,
    pub cross: f64,
    pub star_polygon: f64,
    pub disk: f64,
    pub ring: f64,
    pub random_blob: f64,
}

impl Default for ShapeMix {
    fn default() -> Self {
        Self {
            rectangle: 1.0,
            bar: 1.0,
            cross: 1.0,
            star_polygon: 1.0,
            disk: 1.0,
            ring: 0.5,
            random_blob: 1.0,
        }
    }
}

impl ShapeMix {
    pub fn only(kind: ShapeKind) -> Self {
        let mut mix = Self {
            rectangle: 0.0,
            bar: 0.0,
            cross: 0.0,
            star_polygon: 0.0,
            disk: 0.0,
            ring: 0.0,
            random_blob: 0.0,
        };
        *mix.weight_mut(kind) = 1.0;
        mix
    }

    pub fn weight(&self, kind: ShapeKind) -> f64 {
        match kind {
            ShapeKind::Rectangle => self.rectangle,
            ShapeKind::Bar => self.bar,
            ShapeKind::Cross => self.cross,
            ShapeKind::StarPolygon => self.star_polygon,
            ShapeKind::Disk => self.disk,
            ShapeKind::Ring => self.ring,
            ShapeKind::RandomBlob => self.random_blob,
        }
    }

    fn weight_mut(&mut self, kind: ShapeKind) -> &mut f64 {
        match kind {
            ShapeKind::Rectangle => &mut self.rectangle,
            ShapeKind::Bar => &mut self.bar,
            ShapeKind::Cross => &mut self.cross,
            ShapeKind::StarPolygon => &mut self.star_polygon,
            ShapeKind::Disk => &mut self.disk,
            ShapeKind::Ring => &mut self.ring,
            ShapeKind::RandomBlob => &mut self.random_blob,
        }
    }

    fn total(&self) -> f64 {
        ShapeKind::ALL.iter().map(|&k| self.weight(k)).sum()
    }

    fn sample(&self, rng: &mut impl Rng) -> ShapeKind {
        let mut u = rng.random::<f64>() * self.total();
        for kind in ShapeKind::ALL {
            let w = self.weight(kind);
            if u < w {
                return kind;
            }
            u -= w;
        }
        // rounding fallthrough: last kind with positive weight
        *ShapeKind::ALL
            .iter()
            .rev()
            .find(|&&k| self.weight(k) > 0.0)
            .expect("validated mix")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range for the number of shapes drawn.
    pub n_shapes: (usize, usize),
    pub shape_mix: ShapeMix,
    /// Inclusive range of characteristic feature widths in pixels.
    pub feature_size_range: (usize, usize),
    pub seed: u64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            width: 2048,
            height: 1536,
            n_shapes: (40, 120),
            shape_mix: ShapeMix::default(),
            feature_size_range: (6, 160),
            seed: 0,
        }
    }
}

impl PatternSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter(format!(
                "pattern size {}x{} is empty",
                self.width, self.height
            )));
        }
        let (lo, hi) = self.n_shapes;
        if lo == 0 || lo > hi {
            return Err(Error::Parameter(format!(
                "n_shapes range ({lo}, {hi}) must satisfy 1 <= lo <= hi"
            )));
        }
        let (fmin, fmax) = self.feature_size_range;
        if fmin < 2 || fmin > fmax {
            return Err(Error::Parameter(format!(
                "feature_size_range ({fmin}, {fmax}) must satisfy 2 <= min <= max"
            )));
        }
        let weights = ShapeKind::ALL.map(|k| self.shape_mix.weight(k));
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.shape_mix.total() <= 0.0 {
            return Err(Error::Parameter(
                "shape_mix weights must be >= 0 and not all zero".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned region that later shapes may not touch.
struct Keepout {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Keepout {
    fn untouched(&self, before: &Bitmap, after: &Bitmap) -> bool {
        (self.y0..self.y1).all(|y| (self.x0..self.x1).all(|x| before.get(x, y) == after.get(x, y)))
    }
}

pub fn generate_pattern(spec: &PatternSpec) -> Result<Bitmap> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n_lo, n_hi) = spec.n_shapes;
    let target = rng.random_range(n_lo..=n_hi);
    let (fmin, fmax) = spec.feature_size_range;
    let area = (spec.width * spec.height) as f64;

    let mut canvas = Bitmap::zeros(spec.width, spec.height)?;
    let mut foreground = 0usize;
    let mut keepout: Option<Keepout> = None;
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < target || (foreground as f64) < MIN_DENSITY * area {
        if attempts == MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "placed {placed} of {target} shapes at density {:.3} after {MAX_ATTEMPTS} attempts",
                foreground as f64 / area
            )));
        }
        attempts += 1;
        let kind = spec.shape_mix.sample(&mut rng);
        // the first shape pins the minimum feature size
        let size = if placed == 0 {
            fmin as f64
        } else {
            log_uniform(&mut rng, fmin as f64, fmax as f64)
        };
        let mut candidate = canvas.clone();
        let bbox = draw_shape(&mut candidate, kind, size, &mut rng);
        let count = candidate.count_foreground();
        if count as f64 > MAX_DENSITY * area || count == foreground {
            continue;
        }
        if let Some(k) = &keepout
            && !k.untouched(&canvas, &candidate)
        {
            continue;
        }
        if placed == 0 {
            let margin = fmin;
            keepout = Some(Keepout {
                x0: bbox.0.saturating_sub(margin),
                y0: bbox.1.saturating_sub(margin),
                x1: (bbox.2 + margin).min(spec.width),
                y1: (bbox.3 + margin).min(spec.height),
            });
        }
        canvas = candidate;
        foreground = count;
        placed += 1;
    }
    Ok(canvas)
}

pub fn generate_corpus(spec_base: &PatternSpec, n_patterns: usize) -> Result<Vec<Bitmap>> {
    if n_patterns == 0 {
        return Err(Error::Parameter("n_patterns must be >= 1".into()));
    }
    let specs: Vec<PatternSpec> = (0..n_patterns as u64)
        .map(|i| spec_base.with_seed(spec_base.seed.wrapping_add(i)))
        .collect();
    crate::par::map_indexed(n_patterns, |i| generate_pattern(&specs[i]))
        .into_iter()
        .collect()
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn rotate(points: &mut [(f64, f64)], cx: f64, cy: f64, angle: f64) {
    let (s, c) = angle.sin_cos();
    for p in points.iter_mut() {
        let (dx, dy) = (p.0, p.1);
        *p = (cx + dx * c - dy * s, cy + dx * s + dy * c);
    }
}

fn oriented_box(half_len: f64, half_width: f64) -> [(f64, f64); 4] {
    [
        (-half_len, -half_width),
        (half_len, -half_width),
        (half_len, half_width),
        (-half_len, half_width),
    ]
}

/// Draws one shape of characteristic width `size` and returns its clipped
/// bounding box `(x0, y0, x1, y1)`.
fn draw_shape(
    canvas: &mut Bitmap,
    kind: ShapeKind,
    size: f64,
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let (w, h) = (canvas.width() as f64, canvas.height() as f64);
    let cx = rng.random::<f64>() * w;
    let cy = rng.random::<f64>() * h;
    let angle = rng.random::<f64>() * PI;
    // half-extent of the shape, used for the bounding box
    let reach = match kind {
        ShapeKind::Rectangle => {
            let other = size * rng.random_range(1.0..4.0);
            let (rw, rh) = if rng.random::<bool>() {
                (size, other)
            } else {
                (other, size)
            };
            let mut pts = oriented_box(rw / 2.0, rh / 2.0);
            rotate(&mut pts, cx, cy, 0.0);
            canvas.fill_polygon(&pts, true);
            rw.max(rh) / 2.0
        }
        ShapeKind::Bar => {
            let len = size * rng.random_range(3.0..10.0);
            let mut pts = oriented_box(len / 2.0, size / 2.0);
            rotate(&mut pts, cx, cy, angle);
            canvas.fill_polygon(&pts, true);
            len / 2.0
        }
        ShapeKind::Cross => {
            let len = size * rng.random_range(3.0..8.0);
            for extra in [0.0, PI / 2.0] {
                let mut pts = oriented_box(len / 2.0, size / 2.0);
                rotate(&mut pts, cx, cy, angle + extra);
                canvas.fill_polygon(&pts, true);
            }
            len / 2.0
        }
        ShapeKind::StarPolygon => {
            let tips = rng.random_range(4..=8usize);
            let inner = size;
            let outer = inner * rng.random_range(1.8..3.0);
            let pts: Vec<(f64, f64)> = (0..2 * tips)
                .map(|i| {
                    let r = if i % 2 == 0 { outer } else { inner };
                    let a = angle + i as f64 * PI / tips as f64;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            canvas.fill_polygon(&pts, true);
            outer
        }
        ShapeKind::Disk => {
            let radius = size * rng.random_range(0.5..1.0);
            canvas.fill_disk(cx, cy, radius, true);
            radius
        }
        ShapeKind::Ring => {
            let inner = size * rng.random_range(1.0..3.0);
            let outer = inner + size;
            let mut ring = Bitmap::zeros(canvas.width(), canvas.height()).expect("canvas dims");
            ring.fill_disk(cx, cy, outer, true);
            ring.fill_disk(cx, cy, inner, false);
            for y in 0..canvas.height() {
                for x in 0..canvas.width() {
                    if ring.get(x, y) {
                        canvas.set(x, y, true);
                    }
                }
            }
            outer
        }
        ShapeKind::RandomBlob => {
            let lobes = rng.random_range(3..=6usize);
            let mut reach: f64 = 0.0;
            for _ in 0..lobes {
                let r = size * rng.random_range(0.5..1.5);
                let ox = cx + size * rng.random_range(-1.0..1.0);
                let oy = cy + size * rng.random_range(-1.0..1.0);
                canvas.fill_disk(ox, oy, r, true);
                reach = reach.max(r + (ox - cx).hypot(oy - cy));
            }
            reach
        }
    };
    let clip = |v: f64, hi: f64| v.clamp(0.0, hi) as usize;
    (
        clip((cx - reach).floor(), w),
        clip((cy - reach).floor(), h),
        clip((cx + reach).ceil() + 1.0, w),
        clip((cy + reach).ceil() + 1.0, h),
    )
}

/// Sizes of the 4-connected foreground components, in scan order of their
/// first pixel.
pub fn component_sizes(bitmap: &Bitmap) -> Vec<usize> {
    let (w, h) = (bitmap.width(), bitmap.height());
    let mut seen = vec![false; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || bitmap.as_slice()[start] == 0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && bitmap.as_slice()[j] != 0 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }
    sizes
}
