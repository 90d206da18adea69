//! Pixel-grid primitives: images, low-resolution occlusion grids, soft and
//! binary masks, the shared bilinear kernel, and the geometric transforms
//! used to build refutations.
//!
//! Pixel centers sit at integer coordinates. Resampling maps an output pixel
//! `x` to the continuous source coordinate `(x + 0.5) * src / dst - 0.5` and
//! interpolates between the two nearest samples, replicating the border
//! beyond the outermost sample.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square image with real pixel values in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    side: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != side * side * channels {
            return Err(Error::invalid(format!(
                "expected {} pixel values for a {side}x{side}x{channels} image, got {}",
                side * side * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            side,
            channels,
            pixels,
        })
    }

    pub fn filled(side: usize, channels: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        assert!(channels == 1 || channels == 3);
        Self {
            side,
            channels,
            pixels: vec![value; side * side * channels],
        }
    }

    /// Build an image from a per-pixel function; values are clamped into `[0, 1]`.
    pub fn from_fn(side: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(channels == 1 || channels == 3);
        let mut pixels = Vec::with_capacity(side * side * channels);
        for y in 0..side {
            for x in 0..side {
                for c in 0..channels {
                    pixels.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            side,
            channels,
            pixels,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn width(&self) -> usize {
        self.side
    }

    pub fn height(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.side + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        debug_assert!((0.0..=1.0).contains(&value));
        self.pixels[(y * self.side + x) * self.channels + c] = value.clamp(0.0, 1.0);
    }

    /// Round every value to the nearest multiple of 1/255, the precision of
    /// an 8-bit PNG.
    pub fn quantize8(&mut self) {
        for v in &mut self.pixels {
            *v = (*v * 255.0).round() / 255.0;
        }
    }

    /// Bilinear sample of one channel at continuous coordinates, replicating
    /// the border.
    pub fn sample(&self, sx: f64, sy: f64, c: usize) -> f64 {
        let (x0, x1, tx) = axis_weights(sx, self.side);
        let (y0, y1, ty) = axis_weights(sy, self.side);
        let top = (1.0 - tx) * self.get(x0, y0, c) + tx * self.get(x1, y0, c);
        let bottom = (1.0 - tx) * self.get(x0, y1, c) + tx * self.get(x1, y1, c);
        (1.0 - ty) * top + ty * bottom
    }

    /// Resize to `side` with the shared bilinear kernel.
    pub fn resize(&self, side: usize) -> Image {
        if side == self.side {
            return self.clone();
        }
        let ratio = self.side as f64 / side as f64;
        let coords: Vec<f64> = (0..side).map(|x| (x as f64 + 0.5) * ratio - 0.5).collect();
        Image::from_fn(side, self.channels, |x, y, c| self.sample(coords[x], coords[y], c))
    }

    /// Mean over channels, as a single-channel image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.side, 1, |x, y, _| {
            (self.get(x, y, 0) + self.get(x, y, 1) + self.get(x, y, 2)) / 3.0
        })
    }
}

/// Interpolation indices and weight along one axis for a continuous
/// coordinate over `n` samples, clamped at both ends.
#[inline]
pub(crate) fn axis_weights(u: f64, n: usize) -> (usize, usize, f64) {
    if u <= 0.0 || n == 1 {
        return (0, 0, 0.0);
    }
    let last = (n - 1) as f64;
    if u >= last {
        return (n - 1, n - 1, 0.0);
    }
    let i0 = u.floor();
    let t = u - i0;
    let i0 = i0 as usize;
    (i0, i0 + 1, t)
}

/// Binary `l x l` occlusion grid: 1 keeps the cell visible, 0 hides it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowResGrid {
    l: usize,
    cells: Vec<u8>,
}

impl LowResGrid {
    pub fn new(l: usize, cells: Vec<u8>) -> Result<Self> {
        if l == 0 {
            return Err(Error::invalid("grid side must be at least 1"));
        }
        if cells.len() != l * l {
            return Err(Error::invalid(format!("expected {} cells, got {}", l * l, cells.len())));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::invalid("grid cells must be 0 or 1"));
        }
        Ok(Self { l, cells })
    }

    pub fn filled(l: usize, value: u8) -> Self {
        Self::new(l, vec![value; l * l]).expect("valid fill")
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.cells[row * self.l + col]
    }
}

/// Real-valued mask in `[0, 1]`; 0 hides a pixel completely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    side: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::invalid(format!(
                "expected {} mask values, got {}",
                side * side,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        Ok(Self { side, values })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self::new(side, vec![value; side * side]).expect("valid fill")
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.side + x]
    }
}

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    side: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(side: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::invalid(format!(
                "expected {} mask values, got {}",
                side * side,
                values.len()
            )));
        }
        Ok(Self { side, values })
    }

    pub fn empty(side: usize) -> Self {
        Self {
            side,
            values: vec![false; side * side],
        }
    }

    pub fn full(side: usize) -> Self {
        Self {
            side,
            values: vec![true; side * side],
        }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                values.push(f(x, y));
            }
        }
        Self { side, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.values[y * self.side + x] = value;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    /// Row-major indices of set pixels.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }

    /// Tight bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<PixelBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for i in self.support() {
            let (x, y) = (i % self.side, i / self.side);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0 != usize::MAX).then(|| PixelBox {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }

    /// Run-length encoding over the row-major pixel order, starting with a
    /// run of unset pixels: `"side:r0,r1,r2,..."`.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &v in &self.values {
            if v == current {
                len += 1;
            } else {
                runs.push(len.to_string());
                current = v;
                len = 1;
            }
        }
        runs.push(len.to_string());
        format!("{}:{}", self.side, runs.join(","))
    }

    pub fn from_rle(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed mask encoding {s:?}"));
        let (side, runs) = s.split_once(':').ok_or_else(bad)?;
        let side: usize = side.parse().map_err(|_| bad())?;
        let mut values = Vec::with_capacity(side * side);
        let mut current = false;
        for run in runs.split(',') {
            let n: usize = run.parse().map_err(|_| bad())?;
            values.extend(std::iter::repeat_n(current, n));
            current = !current;
        }
        if values.len() != side * side {
            return Err(bad());
        }
        Ok(Self { side, values })
    }
}

impl Serialize for BinaryMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rle())
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BinaryMask::from_rle(&s).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn full(side: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            w: side,
            h: side,
        }
    }

    fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }
}

/// Bilinear upsampling of a low-resolution grid to a `side x side` mask, with
/// cells placed at the centers of an `l x l` tiling of the output.
pub fn upsample_bilinear(grid: &LowResGrid, side: usize) -> Result<Mask> {
    upsample_bilinear_shifted(grid, side, (0.0, 0.0))
}

/// As [`upsample_bilinear`], sampling the interpolated surface at an offset of
/// `shift` output pixels (the random-shift variant of the original RISE masks).
pub fn upsample_bilinear_shifted(grid: &LowResGrid, side: usize, shift: (f64, f64)) -> Result<Mask> {
    let l = grid.l();
    if l > side {
        return Err(Error::invalid(format!("grid side {l} exceeds mask side {side}")));
    }
    let cell = side as f64 / l as f64;
    let axis = |offset: f64| -> Vec<(usize, usize, f64)> {
        (0..side)
            .map(|x| axis_weights((x as f64 + offset + 0.5) / cell - 0.5, l))
            .collect()
    };
    let xs = axis(shift.0);
    let ys = axis(shift.1);
    let mut values = Vec::with_capacity(side * side);
    for &(r0, r1, ty) in &ys {
        for &(c0, c1, tx) in &xs {
            let g = |c, r| f64::from(grid.get(c, r));
            let top = (1.0 - tx) * g(c0, r0) + tx * g(c1, r0);
            let bottom = (1.0 - tx) * g(c0, r1) + tx * g(c1, r1);
            values.push(((1.0 - ty) * top + ty * bottom).clamp(0.0, 1.0));
        }
    }
    Ok(Mask { side, values })
}

/// Elementwise product `image ⊙ mask`, per channel.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    if image.side() != mask.side() {
        return Err(Error::invalid(format!(
            "image side {} does not match mask side {}",
            image.side(),
            mask.side()
        )));
    }
    let ch = image.channels();
    let pixels = image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * mask.values()[i / ch])
        .collect();
    Ok(Image {
        side: image.side(),
        channels: ch,
        pixels,
    })
}

/// Zoom on `region`. `scale > 1` crops a window of side `side / scale`
/// centered on the region (shifted to stay inside the frame) and resamples it
/// to full size; `scale < 1` shrinks the whole image around the region center
/// and fills the uncovered area by border replication.
pub fn zoom_region(image: &Image, region: PixelBox, scale: f64) -> Result<Image> {
    let side = image.side();
    if region.w == 0 || region.h == 0 {
        return Err(Error::invalid("zoom region has zero area"));
    }
    if region.x + region.w > side || region.y + region.h > side {
        return Err(Error::invalid(format!("zoom region {region:?} exceeds a {side}px image")));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("zoom scale must be positive, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(image.clone());
    }
    let (mut cx, mut cy) = region.center();
    if scale > 1.0 {
        let half = side as f64 / (2.0 * scale);
        cx = cx.clamp(half, side as f64 - half);
        cy = cy.clamp(half, side as f64 - half);
    }
    let map = |o: usize, center: f64| center + (o as f64 + 0.5 - center) / scale - 0.5;
    let xs: Vec<f64> = (0..side).map(|x| map(x, cx)).collect();
    let ys: Vec<f64> = (0..side).map(|y| map(y, cy)).collect();
    Ok(Image::from_fn(side, image.channels(), |x, y, c| image.sample(xs[x], ys[y], c)))
}

/// Lossless dihedral transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dihedral {
    FlipH,
    FlipV,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Dihedral {
    pub const ALL: [Dihedral; 5] = [
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Rotate90,
        Dihedral::Rotate180,
        Dihedral::Rotate270,
    ];

    /// Source pixel for output pixel `(x, y)`. Rotations are clockwise.
    #[inline]
    fn source(self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let last = n - 1;
        match self {
            Dihedral::FlipH => (last - x, y),
            Dihedral::FlipV => (x, last - y),
            Dihedral::Rotate90 => (y, last - x),
            Dihedral::Rotate180 => (last - x, last - y),
            Dihedral::Rotate270 => (last - y, x),
        }
    }
}

pub fn augment(image: &Image, op: Dihedral) -> Image {
    let n = image.side();
    Image::from_fn(n, image.channels(), |x, y, c| {
        let (sx, sy) = op.source(x, y, n);
        image.get(sx, sy, c)
    })
}

pub fn augment_mask(mask: &BinaryMask, op: Dihedral) -> BinaryMask {
    let n = mask.side();
    BinaryMask::from_fn(n, |x, y| {
        let (sx, sy) = op.source(x, y, n);
        mask.get(sx, sy)
    })
}

/// Paste the pixels of `patch` selected by `patch_mask` onto `background`
/// with the patch's top-left corner at `offset`. Returns the composite and the
/// pasted support translated into background coordinates.
pub fn composite(
    patch: &Image,
    patch_mask: &BinaryMask,
    background: &Image,
    offset: (usize, usize),
) -> Result<(Image, BinaryMask)> {
    if patch.side() != patch_mask.side() {
        return Err(Error::invalid("patch and patch mask sizes differ"));
    }
    if patch.channels() != background.channels() {
        return Err(Error::invalid("patch and background channel counts differ"));
    }
    let (ox, oy) = offset;
    let side = background.side();
    if ox + patch.side() > side || oy + patch.side() > side {
        return Err(Error::invalid(format!(
            "patch of side {} at offset {offset:?} does not fit a {side}px background",
            patch.side()
        )));
    }
    let mut out = background.clone();
    let mut placed = BinaryMask::empty(side);
    for py in 0..patch.side() {
        for px in 0..patch.side() {
            if patch_mask.get(px, py) {
                for c in 0..patch.channels() {
                    out.set(ox + px, oy + py, c, patch.get(px, py, c));
                }
                placed.set(ox + px, oy + py, true);
            }
        }
    }
    Ok((out, placed))
}

/// Square crop, padding with replicated border if the window leaves the frame.
pub fn crop(image: &Image, x0: usize, y0: usize, side: usize) -> Image {
    let n = image.side();
    Image::from_fn(side, image.channels(), |x, y, c| {
        image.get((x0 + x).min(n - 1), (y0 + y).min(n - 1), c)
    })
}

pub fn crop_mask(mask: &BinaryMask, x0: usize, y0: usize, side: usize) -> BinaryMask {
    let n = mask.side();
    BinaryMask::from_fn(side, |x, y| {
        let (sx, sy) = (x0 + x, y0 + y);
        sx < n && sy < n && mask.get(sx, sy)
    })
}

fn to_dynamic8(image: &Image) -> DynamicImage {
    let side = image.side() as u32;
    let raw: Vec<u8> = image.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    match image.channels() {
        1 => DynamicImage::ImageLuma8(ImageBuffer::from_raw(side, side, raw).expect("buffer size")),
        _ => DynamicImage::ImageRgb8(ImageBuffer::from_raw(side, side, raw).expect("buffer size")),
    }
}

fn from_dynamic(img: DynamicImage, origin: &Path) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::format(origin, format!("image is {w}x{h}, expected a square")));
    }
    let (channels, pixels): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            let b = img.to_luma8();
            (1, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect())
        }
        other => {
            let b = other.to_rgb8();
            (3, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect())
        }
    };
    Image::new(w, channels, pixels).map_err(|e| Error::format(origin, e.to_string()))
}

/// Save as an 8-bit PNG.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    to_dynamic8(image)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

/// Encode as an 8-bit PNG in memory.
pub fn encode_png8(image: &Image) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    to_dynamic8(image)
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Encode as a 16-bit PNG. 8-bit values survive exactly (65535 = 255 * 257);
/// arbitrary reals are quantized to 1/65535.
pub fn encode_png16(image: &Image) -> Vec<u8> {
    let side = image.side() as u32;
    let raw: Vec<u16> = image.pixels().iter().map(|v| (v * 65535.0).round() as u16).collect();
    let dynamic = match image.channels() {
        1 => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(side, side, raw).expect("buffer size"),
        ),
        _ => DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(side, side, raw).expect("buffer size")),
    };
    let mut out = Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format("<memory>", e.to_string()))?;
    from_dynamic(img, Path::new("<memory>"))
}

/// Save a binary mask as a single-channel PNG with values {0, 255}.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let side = mask.side() as u32;
    let raw: Vec<u8> = mask.values().iter().map(|&v| if v { 255 } else { 0 }).collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(side, side, raw)
        .expect("buffer size")
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    let side = mask.side() as u32;
    let raw: Vec<u8> = mask.values().iter().map(|&v| if v { 255 } else { 0 }).collect();
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(ImageBuffer::from_raw(side, side, raw).expect("buffer size"))
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Decode a mask PNG; any pixel at or above half intensity counts as set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let img = decode_png(bytes)?.to_gray();
    Ok(BinaryMask::from_fn(img.side(), |x, y| img.get(x, y, 0) >= 0.5))
}

pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_png(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}
