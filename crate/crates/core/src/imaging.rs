//! Image containers, canvas geometry and PNG I/O.
//!
//! Intensities are `f64` in `[0, 1]`, row-major, channel-interleaved.

use std::io::{Cursor, Write};
use std::path::Path;

use image::{ImageFormat, RgbImage, RgbaImage};

use crate::error::{Error, Result};
use crate::seam::Seam;

/// Alpha values above this become valid pixels.
pub const ALPHA_THRESHOLD: f64 = 0.5;

/// Stroke width (pixels) of seam visualizations.
pub const SEAM_STROKE: usize = 3;

/// A color sample; entries past the image's channel count are zero.
pub type Color = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Wraps raw samples; values are clamped into `[0, 1]` and NaN maps to 0.
    pub fn from_vec(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidParameter(format!(
                "expected {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn<F: FnMut(usize, usize) -> Color>(width: usize, height: usize, channels: usize, mut f: F) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                let c = f(x, y);
                img.set(x, y, &c[..channels]);
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn color(&self, x: usize, y: usize) -> Color {
        let mut c = [0.0; 3];
        c[..self.channels].copy_from_slice(self.pixel(x, y));
        c
    }

    /// Gray value (first channel for gray images).
    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, values: &[f64]) {
        let i = (y * self.width + x) * self.channels;
        for (dst, &v) in self.data[i..i + self.channels].iter_mut().zip(values) {
            *dst = v.clamp(0.0, 1.0);
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Copies the pixels of `rect` into a new image.
    pub fn crop(&self, rect: Rect) -> Image {
        let mut out = Image::new(rect.width(), rect.height(), self.channels);
        for y in rect.y0..rect.y1 {
            let src = (y * self.width + rect.x0) * self.channels;
            let dst = (y - rect.y0) * rect.width() * self.channels;
            let n = rect.width() * self.channels;
            out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "mask has {} entries, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn<F: FnMut(usize, usize) -> bool>(width: usize, height: usize, mut f: F) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn crop(&self, rect: Rect) -> ValidityMask {
        ValidityMask::from_fn(rect.width(), rect.height(), |x, y| self.get(rect.x0 + x, rect.y0 + y))
    }
}

/// Two images registered on one canvas, each with its coverage mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub target: Image,
    pub target_mask: ValidityMask,
    pub reference: Image,
    pub reference_mask: ValidityMask,
}

impl AlignedPair {
    /// Checks that all four canvases agree in size and zeroes colors under
    /// invalid mask bits.
    pub fn new(
        mut target: Image,
        target_mask: ValidityMask,
        mut reference: Image,
        reference_mask: ValidityMask,
    ) -> Result<Self> {
        let (w, h) = target.dims();
        for (ow, oh) in [reference.dims(), target_mask.dims(), reference_mask.dims()] {
            if (ow, oh) != (w, h) {
                return Err(Error::DimensionMismatch(w, h, ow, oh));
            }
        }
        if target.channels() != reference.channels() {
            return Err(Error::InvalidParameter(
                "target and reference channel counts differ".into(),
            ));
        }
        zero_invalid(&mut target, &target_mask);
        zero_invalid(&mut reference, &reference_mask);
        Ok(Self {
            target,
            target_mask,
            reference,
            reference_mask,
        })
    }

    /// Pair with both masks fully valid.
    pub fn full(target: Image, reference: Image) -> Result<Self> {
        let (w, h) = target.dims();
        Self::new(
            target,
            ValidityMask::new(w, h, true),
            reference,
            ValidityMask::new(w, h, true),
        )
    }

    pub fn width(&self) -> usize {
        self.target.width()
    }

    pub fn height(&self) -> usize {
        self.target.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.target.dims()
    }

    #[inline]
    pub fn in_overlap(&self, x: usize, y: usize) -> bool {
        self.target_mask.get(x, y) && self.reference_mask.get(x, y)
    }
}

fn zero_invalid(img: &mut Image, mask: &ValidityMask) {
    let c = img.channels;
    for (i, px) in img.data.chunks_mut(c).enumerate() {
        if !mask.bits[i] {
            px.fill(0.0);
        }
    }
}

/// Axis-aligned rectangle, `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 < x1 && y0 < y1, "degenerate rect");
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Grows by `margin` on every side, clipped to a `width x height` canvas.
    pub fn expand(&self, margin: usize, width: usize, height: usize) -> Rect {
        Rect {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }
}

/// Reads an RGBA PNG (or any format `image` decodes) into colors and mask.
pub fn load_image_with_mask(path: &Path) -> Result<(Image, ValidityMask)> {
    let dynamic = image::open(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(rgba_to_image(&dynamic.to_rgba8()))
}

fn rgba_to_image(rgba: &RgbaImage) -> (Image, ValidityMask) {
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut img = Image::new(w, h, 3);
    let mut mask = ValidityMask::new(w, h, false);
    for (x, y, px) in rgba.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        if f64::from(px[3]) / 255.0 > ALPHA_THRESHOLD {
            mask.set(x, y, true);
            let c = [
                f64::from(px[0]) / 255.0,
                f64::from(px[1]) / 255.0,
                f64::from(px[2]) / 255.0,
            ];
            img.set(x, y, &c);
        }
    }
    (img, mask)
}

/// Loads a target/reference pair; fails on size mismatch or empty overlap.
pub fn load_aligned_pair(path_target: &Path, path_reference: &Path) -> Result<AlignedPair> {
    let (target, target_mask) = load_image_with_mask(path_target)?;
    let (reference, reference_mask) = load_image_with_mask(path_reference)?;
    let pair = AlignedPair::new(target, target_mask, reference, reference_mask)?;
    if compute_overlap(&pair).is_empty() {
        return Err(Error::EmptyOverlap);
    }
    Ok(pair)
}

pub fn compute_overlap(pair: &AlignedPair) -> ValidityMask {
    let bits = pair
        .target_mask
        .bits()
        .iter()
        .zip(pair.reference_mask.bits())
        .map(|(&a, &b)| a && b)
        .collect();
    ValidityMask {
        width: pair.width(),
        height: pair.height(),
        bits,
    }
}

/// Rec. 601 luma. Gray inputs are returned unchanged.
pub fn luminance(image: &Image) -> Image {
    if image.channels == 1 {
        return image.clone();
    }
    let data = image
        .data
        .chunks(3)
        .map(|c| (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).clamp(0.0, 1.0))
        .collect();
    Image {
        width: image.width,
        height: image.height,
        channels: 1,
        data,
    }
}

/// Bilinear sample at `(x, y)` with border clamping.
///
/// Returns `None` when any neighbor carrying nonzero weight is masked out.
pub fn bilinear_sample(image: &Image, mask: &ValidityMask, x: f64, y: f64) -> Option<Color> {
    let max_x = (image.width - 1) as f64;
    let max_y = (image.height - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(image.width - 1);
    let y1 = (y0 + 1).min(image.height - 1);

    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    let mut out = [0.0; 3];
    for (tx, ty, w) in taps {
        if w == 0.0 {
            continue;
        }
        if !mask.get(tx, ty) {
            return None;
        }
        for (o, &v) in out.iter_mut().zip(image.pixel(tx, ty)) {
            *o += w * v;
        }
    }
    for o in &mut out[..image.channels] {
        *o = o.clamp(0.0, 1.0);
    }
    Some(out)
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let err = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let mut file = std::fs::File::create(&tmp).map_err(err)?;
    file.write_all(bytes).map_err(err)?;
    file.sync_all().map_err(err)?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(err)
}

fn png_bytes(path: &Path, write: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    write(&mut buf).map_err(|source| Error::Encode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

/// Writes an 8-bit RGB PNG. Gray images are replicated over three channels.
pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let rgb = RgbImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        let c = image.pixel(x as usize, y as usize);
        if image.channels == 1 {
            let v = to_u8(c[0]);
            image::Rgb([v, v, v])
        } else {
            image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
        }
    });
    let bytes = png_bytes(path, |buf| rgb.write_to(buf, ImageFormat::Png))?;
    write_atomic(path, &bytes)
}

/// Writes an 8-bit RGBA PNG with alpha 255 on valid pixels and 0 elsewhere.
pub fn write_image_with_mask(image: &Image, mask: &ValidityMask, path: &Path) -> Result<()> {
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch(image.width, image.height, mask.width, mask.height));
    }
    let rgba = RgbaImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let c = image.color(x, y);
        let a = if mask.get(x, y) { 255 } else { 0 };
        image::Rgba([to_u8(c[0]), to_u8(c[1]), to_u8(c[2]), a])
    });
    let bytes = png_bytes(path, |buf| rgba.write_to(buf, ImageFormat::Png))?;
    write_atomic(path, &bytes)
}

/// Writes both views of a pair as RGBA PNGs.
pub fn write_aligned_pair(pair: &AlignedPair, target: &Path, reference: &Path) -> Result<()> {
    write_image_with_mask(&pair.target, &pair.target_mask, target)?;
    write_image_with_mask(&pair.reference, &pair.reference_mask, reference)
}

/// Reads any decodable image as RGB, ignoring alpha.
pub fn read_image(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = dynamic.to_rgb8();
    let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Image::from_vec(rgb.width() as usize, rgb.height() as usize, 3, data)
}

/// Writes a single-channel 8-bit PNG (values scaled by 255).
pub fn write_gray_png(width: usize, height: usize, values: &[u8], path: &Path) -> Result<()> {
    let gray = image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::InvalidParameter("gray buffer size mismatch".into()))?;
    let bytes = png_bytes(path, |buf| gray.write_to(buf, ImageFormat::Png))?;
    write_atomic(path, &bytes)
}

/// Reads the luma channel of any decodable image as raw bytes.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let dynamic = image::open(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = dynamic.to_luma8();
    Ok((gray.width() as usize, gray.height() as usize, gray.into_raw()))
}

/// Blue at `q = 0` through cyan, green and yellow to red at `q = 1`.
pub fn quality_color(q: f64) -> Color {
    let q = if q.is_nan() { 1.0 } else { q.clamp(0.0, 1.0) };
    let stops: [Color; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let s = q * 4.0;
    let i = (s.floor() as usize).min(3);
    let f = s - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

/// Renders the averaged canvas with the seam drawn in quality colors.
pub fn render_seam_visualization(pair: &AlignedPair, seam: &Seam, quality: &[f64]) -> Result<Image> {
    if quality.len() != seam.len() {
        return Err(Error::InvalidParameter(format!(
            "quality profile has {} entries for a seam of {}",
            quality.len(),
            seam.len()
        )));
    }
    let (w, h) = pair.dims();
    let mut out = Image::from_fn(w, h, 3, |x, y| {
        let a = pair.target.color(x, y);
        let b = pair.reference.color(x, y);
        match (pair.target_mask.get(x, y), pair.reference_mask.get(x, y)) {
            (true, true) => [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0],
            (true, false) => a,
            (false, true) => b,
            (false, false) => [0.0; 3],
        }
    });
    let lo = SEAM_STROKE / 2;
    let hi = SEAM_STROKE - lo;
    for (p, &q) in seam.pixels().iter().zip(quality) {
        let c = quality_color(q);
        for y in p.y.saturating_sub(lo)..(p.y + hi).min(h) {
            for x in p.x.saturating_sub(lo)..(p.x + hi).min(w) {
                out.set(x, y, &c);
            }
        }
    }
    // Centre pixels drawn last so a pixel's own color wins over neighbor strokes.
    for (p, &q) in seam.pixels().iter().zip(quality) {
        out.set(p.x, p.y, &quality_color(q));
    }
    Ok(out)
}

pub fn write_seam_visualization(pair: &AlignedPair, seam: &Seam, quality: &[f64], path: &Path) -> Result<()> {
    write_image(&render_seam_visualization(pair, seam, quality)?, path)
}
