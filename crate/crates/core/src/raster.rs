//! Binary and real-valued rasters, rectangle rasterization, patch slicing and
//! overlap-averaged stitching, and the binary PGM interchange format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Binary raster; `1` is silicon (foreground).
#[derive(Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bitmap")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("foreground", &self.count_foreground())
            .finish()
    }
}

impl Bitmap {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![0; width * height],
        })
    }

    pub fn ones(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![1; width * height],
        })
    }

    /// Builds a bitmap from row-major values; anything non-zero is foreground.
    pub fn from_vec(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "bitmap {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        let data = values.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_foreground() as f64 / self.data.len() as f64
    }

    pub fn to_field(&self) -> Field {
        Field {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }

    /// Pixelwise complement.
    pub fn inverted(&self) -> Bitmap {
        Bitmap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Sets every pixel whose center lies in the closed rectangle.
    pub fn fill_rect(&mut self, rect: Rect) {
        let (x_lo, x_hi) = center_span(rect.x0, rect.x1, self.width);
        let (y_lo, y_hi) = center_span(rect.y0, rect.y1, self.height);
        for y in y_lo..y_hi {
            self.data[y * self.width + x_lo..y * self.width + x_hi].fill(1);
        }
    }

    /// Sets every pixel whose center lies inside the polygon (even-odd rule).
    /// Parts of the polygon outside the canvas are clipped.
    pub fn fill_polygon(&mut self, vertices: &[(f64, f64)], on: bool) {
        if vertices.len() < 3 {
            return;
        }
        let y_min = vertices.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let y_max = vertices
            .iter()
            .map(|v| v.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let (row_lo, row_hi) = center_span(y_min, y_max, self.height);
        let mut crossings = Vec::new();
        for py in row_lo..row_hi {
            let cy = py as f64 + 0.5;
            crossings.clear();
            for i in 0..vertices.len() {
                let (ax, ay) = vertices[i];
                let (bx, by) = vertices[(i + 1) % vertices.len()];
                if (ay <= cy && by > cy) || (by <= cy && ay > cy) {
                    crossings.push(ax + (cy - ay) / (by - ay) * (bx - ax));
                }
            }
            crossings.sort_by(|a, b| a.total_cmp(b));
            for pair in crossings.chunks_exact(2) {
                let (lo, hi) = center_span(pair[0], pair[1], self.width);
                let row = py * self.width;
                self.data[row + lo..row + hi].fill(u8::from(on));
            }
        }
    }

    /// Sets (or clears) every pixel whose center is within `radius` of `(cx, cy)`.
    pub fn fill_disk(&mut self, cx: f64, cy: f64, radius: f64, on: bool) {
        let (row_lo, row_hi) = center_span(cy - radius, cy + radius, self.height);
        let r2 = radius * radius;
        for py in row_lo..row_hi {
            let dy = py as f64 + 0.5 - cy;
            let half = r2 - dy * dy;
            if half < 0.0 {
                continue;
            }
            let half = half.sqrt();
            let (lo, hi) = center_span(cx - half, cx + half, self.width);
            let row = py * self.width;
            self.data[row + lo..row + hi].fill(u8::from(on));
        }
    }

    /// Copies the `size`x`size` window at `(x0, y0)` into `out` as 0.0/1.0;
    /// pixels beyond the canvas read as background.
    pub fn crop_into(&self, x0: usize, y0: usize, size: usize, out: &mut [f32]) {
        crop_generic(self.width, self.height, x0, y0, size, out, |i| {
            f32::from(self.data[i])
        });
    }
}

/// Real-valued raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Field {
    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        check_dims(width, height)?;
        check_unit(value)?;
        Ok(Self {
            width,
            height,
            data: vec![value; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "field {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!(
                "field value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data: values,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn crop_into(&self, x0: usize, y0: usize, size: usize, out: &mut [f32]) {
        crop_generic(self.width, self.height, x0, y0, size, out, |i| self.data[i]);
    }
}

/// Read access shared by [`Bitmap`] and [`Field`] for slicing.
pub trait Raster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn crop_into(&self, x0: usize, y0: usize, size: usize, out: &mut [f32]);
}

impl Raster for Bitmap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn crop_into(&self, x0: usize, y0: usize, size: usize, out: &mut [f32]) {
        Bitmap::crop_into(self, x0, y0, size, out)
    }
}

impl Raster for Field {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn crop_into(&self, x0: usize, y0: usize, size: usize, out: &mut [f32]) {
        Field::crop_into(self, x0, y0, size, out)
    }
}

fn crop_generic(
    width: usize,
    height: usize,
    x0: usize,
    y0: usize,
    size: usize,
    out: &mut [f32],
    value: impl Fn(usize) -> f32,
) {
    debug_assert_eq!(out.len(), size * size);
    for dy in 0..size {
        let y = y0 + dy;
        let row = &mut out[dy * size..(dy + 1) * size];
        if y >= height {
            row.fill(0.0);
            continue;
        }
        for (dx, slot) in row.iter_mut().enumerate() {
            let x = x0 + dx;
            *slot = if x < width { value(y * width + x) } else { 0.0 };
        }
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Parameter(format!(
            "raster dimensions must be >= 1, got {width}x{height}"
        )));
    }
    Ok(())
}

fn check_unit(v: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Parameter(format!("field value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Half-open index range of pixels whose centers `i + 0.5` lie in `[lo, hi]`,
/// clipped to `0..len`.
fn center_span(lo: f64, hi: f64, len: usize) -> (usize, usize) {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = ((hi - 0.5).floor() + 1.0).min(len as f64);
    if !(start < end) {
        return (0, 0);
    }
    (start as usize, end as usize)
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

/// Rasterizes a union of rectangles; a pixel is set iff its center lies in
/// any rectangle.
pub fn rasterize(rects: &[Rect], width: usize, height: usize) -> Result<Bitmap> {
    let mut bitmap = Bitmap::zeros(width, height)?;
    for r in rects {
        let ok_x = 0.0 <= r.x0 && r.x0 < r.x1 && r.x1 <= width as f64;
        let ok_y = 0.0 <= r.y0 && r.y0 < r.y1 && r.y1 <= height as f64;
        if !(ok_x && ok_y) {
            return Err(Error::Bounds(format!(
                "rectangle ({}, {}, {}, {}) outside {width}x{height} canvas",
                r.x0, r.y0, r.x1, r.y1
            )));
        }
        bitmap.fill_rect(*r);
    }
    Ok(bitmap)
}

/// Sliding-window geometry over a canvas zero-padded on the bottom/right so
/// that windows tile it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub padded_width: usize,
    pub padded_height: usize,
    pub cols: usize,
    pub rows: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::Parameter(format!(
                "patch size and stride must be >= 1, got {patch_size} and {stride}"
            )));
        }
        check_dims(width, height)?;
        let padded = |dim: usize| {
            if dim <= patch_size {
                patch_size
            } else {
                patch_size + (dim - patch_size).div_ceil(stride) * stride
            }
        };
        let padded_width = padded(width);
        let padded_height = padded(height);
        Ok(Self {
            width,
            height,
            patch_size,
            stride,
            padded_width,
            padded_height,
            cols: (padded_width - patch_size) / stride + 1,
            rows: (padded_height - patch_size) / stride + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of the `index`-th window in row-major order.
    pub fn offset(&self, index: usize) -> (usize, usize) {
        (
            (index % self.cols) * self.stride,
            (index / self.cols) * self.stride,
        )
    }

    pub fn offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(|i| self.offset(i))
    }

    /// Number of windows covering pixel `(x, y)` of the padded canvas.
    pub fn coverage(&self, x: usize, y: usize) -> usize {
        let axis = |p: usize, n: usize| {
            let hi = (p / self.stride).min(n - 1);
            let lo = if p + 1 > self.patch_size {
                (p + 1 - self.patch_size).div_ceil(self.stride)
            } else {
                0
            };
            if hi >= lo { hi - lo + 1 } else { 0 }
        };
        axis(x, self.cols) * axis(y, self.rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
    pub values: Vec<f32>,
}

/// Ordered windows of one source canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub grid: PatchGrid,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn patch_size(&self) -> usize {
        self.grid.patch_size
    }

    pub fn stride(&self) -> usize {
        self.grid.stride
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn slice_patches<R: Raster + ?Sized>(
    image: &R,
    patch_size: usize,
    stride: usize,
) -> Result<PatchSet> {
    let grid = PatchGrid::new(image.width(), image.height(), patch_size, stride)?;
    let patches = grid
        .offsets()
        .map(|(x, y)| {
            let mut values = vec![0.0; patch_size * patch_size];
            image.crop_into(x, y, patch_size, &mut values);
            Patch { x, y, values }
        })
        .collect();
    Ok(PatchSet { grid, patches })
}

/// Running per-pixel sum and count over a padded canvas.
#[derive(Clone, Debug)]
pub struct StitchAccumulator {
    grid: PatchGrid,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl StitchAccumulator {
    pub fn new(grid: PatchGrid) -> Self {
        let n = grid.padded_width * grid.padded_height;
        Self {
            grid,
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, x0: usize, y0: usize, values: &[f32]) -> Result<()> {
        let size = self.grid.patch_size;
        if values.len() != size * size {
            return Err(Error::Shape(format!(
                "patch has {} values, expected {size}x{size}",
                values.len()
            )));
        }
        if x0 + size > self.grid.padded_width || y0 + size > self.grid.padded_height {
            return Err(Error::Bounds(format!(
                "patch at ({x0}, {y0}) exceeds padded canvas {}x{}",
                self.grid.padded_width, self.grid.padded_height
            )));
        }
        let pw = self.grid.padded_width;
        for dy in 0..size {
            let row = (y0 + dy) * pw + x0;
            let src = &values[dy * size..(dy + 1) * size];
            for (dx, &v) in src.iter().enumerate() {
                self.sum[row + dx] += f64::from(v);
                self.count[row + dx] += 1;
            }
        }
        Ok(())
    }

    /// Averages and crops the padding away.
    pub fn finish(self) -> Result<Field> {
        let g = self.grid;
        let mut out = Vec::with_capacity(g.width * g.height);
        for y in 0..g.height {
            for x in 0..g.width {
                let i = y * g.padded_width + x;
                if self.count[i] == 0 {
                    return Err(Error::Invariant(format!(
                        "pixel ({x}, {y}) covered by no patch"
                    )));
                }
                let mean = (self.sum[i] / f64::from(self.count[i])) as f32;
                out.push(mean.clamp(0.0, 1.0));
            }
        }
        Field::from_vec(g.width, g.height, out)
    }
}

/// Overlap-averages patches back onto a `width`x`height` canvas.
pub fn stitch(patches: &PatchSet, width: usize, height: usize) -> Result<Field> {
    let grid = PatchGrid::new(width, height, patches.grid.patch_size, patches.grid.stride)?;
    let mut acc = StitchAccumulator::new(grid);
    for p in &patches.patches {
        acc.add(p.x, p.y, &p.values)?;
    }
    acc.finish()
}

const PGM_MAXVAL: u32 = 255;

/// Rasters that can be written as 8-bit grayscale.
pub trait ToGray {
    fn dims(&self) -> (usize, usize);
    fn gray_bytes(&self) -> Vec<u8>;
}

impl ToGray for Bitmap {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    fn gray_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| if v != 0 { 255 } else { 0 })
            .collect()
    }
}

impl ToGray for Field {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    fn gray_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| field_to_byte(v)).collect()
    }
}

/// Linear map with round-half-up: 0.5 maps to 128.
pub fn field_to_byte(v: f32) -> u8 {
    (f64::from(v.clamp(0.0, 1.0)) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm<I: ToGray + ?Sized>(image: &I) -> Vec<u8> {
    let (w, h) = image.dims();
    let mut out = format!("P5\n{w} {h}\n{PGM_MAXVAL}\n").into_bytes();
    out.extend_from_slice(&image.gray_bytes());
    out
}

pub fn write_pgm<I: ToGray + ?Sized>(image: &I, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_pgm(image))
        .map_err(|e| Error::io(path, e))
}

/// Header fields of a binary Netpbm file.
pub(crate) struct NetpbmHeader {
    pub width: usize,
    pub height: usize,
    pub payload_offset: usize,
}

pub(crate) fn parse_netpbm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<NetpbmHeader> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "file too short for a magic number"));
    }
    if &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&bytes[..2])
            ),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::format(
                        pos as u64,
                        format!("header ends before {name}"),
                    ));
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(
                start as u64,
                format!("expected decimal {name}"),
            ));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[i] = text
            .parse()
            .map_err(|_| Error::format(start as u64, format!("{name} `{text}` out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos as u64, "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("zero dimension {width}x{height}")));
    }
    if maxval as u32 != PGM_MAXVAL {
        return Err(Error::format(
            2,
            format!("unsupported maxval {maxval}, only 255 is accepted"),
        ));
    }
    Ok(NetpbmHeader {
        width,
        height,
        payload_offset: pos,
    })
}

/// Decodes a P5 file into raw gray levels.
pub fn decode_pgm_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header = parse_netpbm_header(bytes, b"P5")?;
    let need = header.width * header.height;
    let payload = &bytes[header.payload_offset..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    Ok((header.width, header.height, payload[..need].to_vec()))
}

/// Decodes a P5 file and binarizes at gray level 128.
pub fn decode_pgm(bytes: &[u8]) -> Result<Bitmap> {
    let (w, h, gray) = decode_pgm_gray(bytes)?;
    Bitmap::from_vec(w, h, gray.into_iter().map(|g| u8::from(g >= 128)).collect())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Bitmap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Reads a P5 file as a field (gray level / 255).
pub fn read_pgm_field(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, gray) = decode_pgm_gray(&bytes)?;
    Field::from_vec(
        w,
        h,
        gray.into_iter().map(|g| f32::from(g) / 255.0).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rect_covers_four_pixels() {
        let b = rasterize(&[Rect::new(0.0, 0.0, 2.0, 2.0)], 4, 4).unwrap();
        assert_eq!(b.count_foreground(), 4);
        assert!(b.get(0, 0) && b.get(1, 1) && !b.get(2, 2));
    }

    #[test]
    fn empty_rect_list_is_background() {
        let b = rasterize(&[], 8, 8).unwrap();
        assert_eq!(b, Bitmap::zeros(8, 8).unwrap());
    }

    #[test]
    fn overlapping_rects_match_union_count() {
        let rects = [Rect::new(0.0, 0.0, 3.0, 3.0), Rect::new(1.0, 1.0, 4.0, 4.0)];
        let b = rasterize(&rects, 4, 4).unwrap();
        // brute force over pixel centers
        let mut expected = 0;
        for y in 0..4 {
            for x in 0..4 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                if rects
                    .iter()
                    .any(|r| r.x0 <= cx && cx <= r.x1 && r.y0 <= cy && cy <= r.y1)
                {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 14);
        assert_eq!(b.count_foreground(), expected);
    }

    #[test]
    fn out_of_bounds_rect_rejected() {
        let err = rasterize(&[Rect::new(0.0, 0.0, 5.0, 2.0)], 4, 4).unwrap_err();
        assert!(matches!(err, Error::Bounds(_)));
        let err = rasterize(&[Rect::new(2.0, 0.0, 2.0, 2.0)], 4, 4).unwrap_err();
        assert!(matches!(err, Error::Bounds(_)));
    }

    #[test]
    fn exact_fit_is_one_patch() {
        let f = Field::filled(128, 128, 0.25).unwrap();
        for stride in [1, 4, 64, 200] {
            let set = slice_patches(&f, 128, stride).unwrap();
            assert_eq!(set.len(), 1);
            assert_eq!((set.patches[0].x, set.patches[0].y), (0, 0));
        }
    }

    #[test]
    fn tiling_counts() {
        let b = Bitmap::zeros(256, 256).unwrap();
        assert_eq!(slice_patches(&b, 128, 128).unwrap().len(), 4);
        let set = slice_patches(&b, 128, 4).unwrap();
        assert_eq!((set.grid.cols, set.grid.rows), (33, 33));
        assert_eq!(set.len(), 1089);
    }

    #[test]
    fn non_conforming_sizes_are_padded() {
        let g = PatchGrid::new(130, 100, 128, 4).unwrap();
        assert_eq!((g.padded_width, g.padded_height), (132, 128));
        assert_eq!((g.cols, g.rows), (2, 1));
    }

    #[test]
    fn zero_stride_or_size_rejected() {
        let b = Bitmap::zeros(8, 8).unwrap();
        assert!(matches!(slice_patches(&b, 0, 1), Err(Error::Parameter(_))));
        assert!(matches!(slice_patches(&b, 4, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn stitch_single_patch_is_identity() {
        let f = Field::from_fn(16, 16, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0).unwrap();
        let set = slice_patches(&f, 16, 16).unwrap();
        assert_eq!(stitch(&set, 16, 16).unwrap(), f);
    }

    #[test]
    fn stitch_coincident_patches_average() {
        let grid = PatchGrid::new(8, 8, 8, 8).unwrap();
        let set = PatchSet {
            grid,
            patches: vec![
                Patch {
                    x: 0,
                    y: 0,
                    values: vec![0.0; 64],
                },
                Patch {
                    x: 0,
                    y: 0,
                    values: vec![1.0; 64],
                },
            ],
        };
        let out = stitch(&set, 8, 8).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn uncovered_pixel_is_an_invariant_error() {
        let grid = PatchGrid::new(16, 8, 8, 8).unwrap();
        let set = PatchSet {
            grid,
            patches: vec![Patch {
                x: 0,
                y: 0,
                values: vec![0.0; 64],
            }],
        };
        assert!(matches!(stitch(&set, 16, 8), Err(Error::Invariant(_))));
    }

    #[test]
    fn coverage_matches_enumeration() {
        let g = PatchGrid::new(37, 29, 8, 3).unwrap();
        let mut counts = vec![0usize; g.padded_width * g.padded_height];
        for (x0, y0) in g.offsets() {
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    counts[y * g.padded_width + x] += 1;
                }
            }
        }
        for y in 0..g.padded_height {
            for x in 0..g.padded_width {
                assert_eq!(
                    g.coverage(x, y),
                    counts[y * g.padded_width + x],
                    "({x}, {y})"
                );
                if x < 37 && y < 29 {
                    assert!(counts[y * g.padded_width + x] >= 1);
                }
            }
        }
    }

    #[test]
    fn pgm_round_trip_bitmap() {
        let b = Bitmap::ones(4, 4).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&b)).unwrap(), b);
    }

    #[test]
    fn half_field_is_foreground_byte() {
        let f = Field::filled(2, 1, 0.5).unwrap();
        let bytes = encode_pgm(&f);
        assert_eq!(&bytes[bytes.len() - 2..], &[128, 128]);
        assert_eq!(decode_pgm(&bytes).unwrap(), Bitmap::ones(2, 1).unwrap());
    }

    #[test]
    fn ascii_pgm_rejected() {
        let err = decode_pgm(b"P2\n2 2\n255\n0 0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn truncated_pgm_reports_offset() {
        let mut bytes = encode_pgm(&Bitmap::ones(4, 4).unwrap());
        bytes.truncate(bytes.len() - 3);
        match decode_pgm(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, bytes.len() as u64),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn pgm_header_comments_and_bad_maxval() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0]);
        let b = decode_pgm(&bytes).unwrap();
        assert!(b.get(0, 0) && !b.get(1, 0));
        assert!(matches!(
            decode_pgm(b"P5\n2 1\n65535\n\0\0\0\0"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(decode_pgm(b"P5\n2"), Err(Error::Format { .. })));
    }

    #[test]
    fn polygon_and_disk_fill() {
        let mut b = Bitmap::zeros(10, 10).unwrap();
        b.fill_polygon(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], true);
        // centers on or below the anti-diagonal x + y <= 10
        let expected = (0..10)
            .flat_map(|y| (0..10).map(move |x| (x, y)))
            .filter(|&(x, y)| (x as f64 + 0.5) + (y as f64 + 0.5) <= 10.0)
            .count();
        assert_eq!(b.count_foreground(), expected);

        let mut d = Bitmap::zeros(21, 21).unwrap();
        d.fill_disk(10.5, 10.5, 5.0, true);
        let expected = (0..21)
            .flat_map(|y| (0..21).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let (dx, dy) = (x as f64 - 10.0, y as f64 - 10.0);
                dx * dx + dy * dy <= 25.0
            })
            .count();
        assert_eq!(d.count_foreground(), expected);
    }
}
