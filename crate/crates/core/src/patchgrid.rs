//! Aspect-ratio-preserving patch geometry.
//!
//! Local patches are verbatim crops of an image whose shorter edge has been
//! rescaled to `S`; the global patch is the whole image squeezed to `G x G`.
//! All resizes are bilinear with half-pixel centers: output pixel `x` samples
//! source coordinate `(x + 0.5) * in / out - 0.5`, clamped to the image.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image with row-major, channel-interleaved pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width * height * CHANNELS;
        if pixels.len() != expected {
            return Err(Error::mismatch(expected, pixels.len()));
        }
        Ok(ImageBuffer {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * CHANNELS)
            .collect();
        ImageBuffer::new(width, height, pixels)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        ImageBuffer::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Height over width.
    pub fn aspect_ratio(&self) -> f64 {
        self.height as f64 / self.width as f64
    }

    /// Copies the `w x h` rectangle at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImageBuffer> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::InvalidParameter(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + w * CHANNELS]);
        }
        ImageBuffer::new(w, h, pixels)
    }

    /// Bilinear resize to `new_w x new_h`.
    pub fn resize(&self, new_w: usize, new_h: usize) -> Result<ImageBuffer> {
        if new_w == 0 || new_h == 0 {
            return Err(Error::InvalidParameter(format!(
                "target size must be positive, got {new_w}x{new_h}"
            )));
        }
        if new_w == self.width && new_h == self.height {
            return Ok(self.clone());
        }
        let xs = sample_axis(self.width, new_w);
        let ys = sample_axis(self.height, new_h);
        let mut pixels = Vec::with_capacity(new_w * new_h * CHANNELS);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..CHANNELS {
                    let at = |x: usize, y: usize| {
                        f64::from(self.pixels[(y * self.width + x) * CHANNELS + c])
                    };
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    pixels.push((top * (1.0 - fy) + bottom * fy) as f32);
                }
            }
        }
        ImageBuffer::new(new_w, new_h, pixels)
    }
}

/// Source taps `(lo, hi, frac)` for each output coordinate along one axis.
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// `round(a * b / c)` with halves rounded up, in exact integer arithmetic.
fn round_div(a: usize, b: usize, c: usize) -> usize {
    (2 * a * b + c) / (2 * c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    Local,
    Global,
}

/// A square region fed to the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: ImageBuffer,
    /// Top-left corner in the coordinates of the image it was cut from.
    pub source_offset: (usize, usize),
    pub kind: PatchKind,
}

impl Patch {
    pub fn side(&self) -> usize {
        self.pixels.width()
    }
}

/// Scales `img` so its shorter edge is exactly `s`, keeping the aspect ratio.
pub fn rescale_shorter_edge(img: &ImageBuffer, s: usize) -> Result<ImageBuffer> {
    let (w, h) = (img.width(), img.height());
    let (new_w, new_h) = if w <= h {
        (s, round_div(h, s, w).max(s))
    } else {
        (round_div(w, s, h).max(s), s)
    };
    img.resize(new_w, new_h)
}

fn check_fits(img: &ImageBuffer, p: usize) -> Result<()> {
    if p == 0 || img.width() < p || img.height() < p {
        return Err(Error::PatchTooLarge {
            patch: p,
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(())
}

fn local_patch(img: &ImageBuffer, x: usize, y: usize, p: usize) -> Result<Patch> {
    Ok(Patch {
        pixels: img.crop(x, y, p, p)?,
        source_offset: (x, y),
        kind: PatchKind::Local,
    })
}

/// A `p x p` crop at a uniformly random offset.
pub fn random_crop<R: Rng + ?Sized>(img: &ImageBuffer, p: usize, rng: &mut R) -> Result<Patch> {
    let (x, y) = random_offset(img, p, rng)?;
    local_patch(img, x, y, p)
}

pub(crate) fn random_offset<R: Rng + ?Sized>(
    img: &ImageBuffer,
    p: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    check_fits(img, p)?;
    let x = rng.gen_range(0..=img.width() - p);
    let y = rng.gen_range(0..=img.height() - p);
    Ok((x, y))
}

/// Equal-interval offsets along one axis. A single patch is centered.
pub fn grid_offsets(dim: usize, p: usize, m: usize) -> Vec<usize> {
    let span = dim - p;
    match m {
        0 => Vec::new(),
        1 => vec![span / 2],
        _ => (0..m).map(|i| round_div(i, span, m - 1)).collect(),
    }
}

/// `m x m` crops at equal intervals, row by row.
pub fn grid_crops(img: &ImageBuffer, p: usize, m: usize) -> Result<Vec<Patch>> {
    check_fits(img, p)?;
    if m == 0 {
        return Err(Error::InvalidParameter("grid side must be >= 1".into()));
    }
    let xs = grid_offsets(img.width(), p, m);
    let ys = grid_offsets(img.height(), p, m);
    let mut patches = Vec::with_capacity(m * m);
    for &y in &ys {
        for &x in &xs {
            patches.push(local_patch(img, x, y, p)?);
        }
    }
    Ok(patches)
}

/// The whole image resized (anisotropically) to `g x g`.
pub fn global_patch(img: &ImageBuffer, g: usize) -> Result<Patch> {
    Ok(Patch {
        pixels: img.resize(g, g)?,
        source_offset: (0, 0),
        kind: PatchKind::Global,
    })
}

pub fn horizontal_flip(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let mut pixels = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in (0..w).rev() {
            pixels.extend_from_slice(&img.pixel(x, y));
        }
    }
    ImageBuffer {
        width: w,
        height: h,
        pixels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SelectionStrategy {
    #[serde(rename = "mp-random")]
    Random,
    #[serde(rename = "mp-local")]
    Local,
    #[serde(rename = "mp-globallocal")]
    GlobalLocal,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 3] = [
        SelectionStrategy::Random,
        SelectionStrategy::Local,
        SelectionStrategy::GlobalLocal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionStrategy::Random => "mp-random",
            SelectionStrategy::Local => "mp-local",
            SelectionStrategy::GlobalLocal => "mp-globallocal",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp-random" => Ok(SelectionStrategy::Random),
            "mp-local" => Ok(SelectionStrategy::Local),
            "mp-globallocal" => Ok(SelectionStrategy::GlobalLocal),
            other => Err(Error::InvalidParameter(format!(
                "unknown patch strategy '{other}' (valid: mp-random, mp-local, mp-globallocal)"
            ))),
        }
    }
}

/// Patch side lengths shared by training and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    /// Target length of the shorter edge before local cropping.
    pub s: usize,
    /// Side of local patches.
    pub p: usize,
    /// Side of the global patch.
    pub g: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            s: 342,
            p: 299,
            g: 342,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.g == 0 || self.p > self.s {
            return Err(Error::InvalidParameter(format!(
                "geometry needs 0 < P <= S and G > 0, got S={} P={} G={}",
                self.s, self.p, self.g
            )));
        }
        Ok(())
    }
}

/// Test-time patch selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub strategy: SelectionStrategy,
    /// Grid side for the local strategies, random patch count for MP-Random.
    pub count: usize,
    pub geometry: Geometry,
}

impl PatchPlan {
    pub fn random(n: usize, geometry: Geometry) -> Self {
        PatchPlan {
            strategy: SelectionStrategy::Random,
            count: n,
            geometry,
        }
    }

    pub fn local(m: usize, geometry: Geometry) -> Self {
        PatchPlan {
            strategy: SelectionStrategy::Local,
            count: m,
            geometry,
        }
    }

    pub fn global_local(m: usize, geometry: Geometry) -> Self {
        PatchPlan {
            strategy: SelectionStrategy::GlobalLocal,
            count: m,
            geometry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.count == 0 {
            return Err(Error::InvalidParameter("patch count must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of patches this plan produces per image.
    pub fn patches_per_image(&self) -> usize {
        match self.strategy {
            SelectionStrategy::Random => self.count,
            SelectionStrategy::Local => self.count * self.count,
            SelectionStrategy::GlobalLocal => self.count * self.count + 1,
        }
    }
}

/// Selects the test patches of `img` according to `plan`.
pub fn select_test_patches<R: Rng + ?Sized>(
    img: &ImageBuffer,
    plan: &PatchPlan,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    plan.validate()?;
    let rescaled = rescale_shorter_edge(img, plan.geometry.s)?;
    select_from_rescaled(img, &rescaled, plan, rng)
}

/// As [`select_test_patches`], reusing an already rescaled copy of `original`.
pub fn select_from_rescaled<R: Rng + ?Sized>(
    original: &ImageBuffer,
    rescaled: &ImageBuffer,
    plan: &PatchPlan,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    let p = plan.geometry.p;
    match plan.strategy {
        SelectionStrategy::Random => (0..plan.count)
            .map(|_| random_crop(rescaled, p, rng))
            .collect(),
        SelectionStrategy::Local => grid_crops(rescaled, p, plan.count),
        SelectionStrategy::GlobalLocal => {
            let mut patches = grid_crops(rescaled, p, plan.count)?;
            patches.push(global_patch(original, plan.geometry.g)?);
            Ok(patches)
        }
    }
}
