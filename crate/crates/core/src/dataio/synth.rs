//! Synthetic images labeled by a fixed teacher function of image statistics.
//!
//! Each image is two oriented cosine gratings around a base luminance, plus a
//! linear gradient, up to three soft blobs, a hue offset and uniform pixel
//! noise. The teacher maps colorfulness, contrast, exposure and noise to a
//! mean score in (4, 7) and spreads 1000 votes over the ten classes with a
//! discretized Gaussian.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_png, quantize, write_manifest, LabeledImage, ManifestEntry};
use crate::error::{Error, Result};
use crate::metrics::AspectBucket;
use crate::patchgrid::ImageBuffer;
use crate::ratings::{RatingDistribution, DEFAULT_CLASSES};

const MIN_SIDE: usize = 8;
const BUCKET_EDGES: [f64; 8] = [0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, f64::INFINITY];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// Inclusive range of the longer edge in pixels.
    pub size_range: (usize, usize),
    /// Inclusive range of height / width.
    pub aspect_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 500,
            size_range: (64, 128),
            aspect_range: (0.4, 2.5),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if lo < MIN_SIDE || lo > hi {
            return Err(Error::InvalidParameter(format!(
                "size range must satisfy {MIN_SIDE} <= lo <= hi, got {lo}..{hi}"
            )));
        }
        let (a, b) = self.aspect_range;
        if !(a.is_finite() && b.is_finite() && a > 0.0 && a <= b) {
            return Err(Error::InvalidParameter(format!(
                "aspect range must satisfy 0 < lo <= hi, got {a}..{b}"
            )));
        }
        Ok(())
    }
}

/// Whole-image statistics the teacher looks at, all computed on 8-bit values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    /// Mean Rec. 601 luma.
    pub luminance: f64,
    /// Mean per-pixel channel range.
    pub colorfulness: f64,
    /// Standard deviation of luma.
    pub contrast: f64,
    /// Mean absolute luma difference between horizontal and vertical neighbors.
    pub sharpness: f64,
}

impl ImageStats {
    pub fn of(img: &ImageBuffer) -> Self {
        let (w, h) = (img.width(), img.height());
        let luma: Vec<f64> = img
            .pixels()
            .chunks_exact(3)
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect();
        let n = luma.len() as f64;
        let luminance = luma.iter().sum::<f64>() / n;
        let contrast = (luma.iter().map(|l| (l - luminance).powi(2)).sum::<f64>() / n).sqrt();
        let colorfulness = img
            .pixels()
            .chunks_exact(3)
            .map(|p| f64::from(p[0].max(p[1]).max(p[2]) - p[0].min(p[1]).min(p[2])))
            .sum::<f64>()
            / n;
        let mut diff = 0.0;
        let mut pairs = 0usize;
        for y in 0..h {
            for x in 0..w {
                let l = luma[y * w + x];
                if x + 1 < w {
                    diff += (luma[y * w + x + 1] - l).abs();
                    pairs += 1;
                }
                if y + 1 < h {
                    diff += (luma[(y + 1) * w + x] - l).abs();
                    pairs += 1;
                }
            }
        }
        ImageStats {
            luminance,
            colorfulness,
            contrast,
            sharpness: if pairs == 0 { 0.0 } else { diff / pairs as f64 },
        }
    }
}

/// Teacher: `score = center + spread * tanh(z)` with
/// `z = bias + w_color*color + w_contrast*contrast + w_noise*sharpness
///      - w_exposure*((luminance - exposure_target) / exposure_scale)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    pub center: f64,
    pub spread: f64,
    pub bias: f64,
    pub w_color: f64,
    pub w_contrast: f64,
    pub w_noise: f64,
    pub w_exposure: f64,
    pub exposure_target: f64,
    pub exposure_scale: f64,
    /// Standard deviation of the vote distribution, in classes.
    pub vote_std: f64,
    pub votes: u32,
}

impl Default for TeacherParams {
    fn default() -> Self {
        TeacherParams {
            center: 5.5,
            spread: 1.5,
            bias: -1.0,
            w_color: 4.0,
            w_contrast: 6.0,
            w_noise: -4.0,
            w_exposure: 0.6,
            exposure_target: 0.5,
            exposure_scale: 0.2,
            vote_std: 1.5,
            votes: 1000,
        }
    }
}

pub fn teacher_score(stats: &ImageStats, t: &TeacherParams) -> f64 {
    let exposure = (stats.luminance - t.exposure_target) / t.exposure_scale;
    let z = t.bias
        + t.w_color * stats.colorfulness
        + t.w_contrast * stats.contrast
        + t.w_noise * stats.sharpness
        - t.w_exposure * exposure * exposure;
    t.center + t.spread * z.tanh()
}

/// Vote counts from a Gaussian over classes 1..=10 centered at `score`,
/// rounded to `t.votes` total by largest remainder (ties to the lower class).
pub fn teacher_distribution(score: f64, t: &TeacherParams) -> Vec<u32> {
    let weights: Vec<f64> = (1..=DEFAULT_CLASSES)
        .map(|k| (-(k as f64 - score).powi(2) / (2.0 * t.vote_std * t.vote_std)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| w / total * f64::from(t.votes))
        .collect();
    let mut counts: Vec<u32> = exact.iter().map(|e| e.floor() as u32).collect();
    let mut left = t.votes - counts.iter().sum::<u32>();
    let mut order: Vec<usize> = (0..DEFAULT_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// Manifest path relative to the dataset root, also used as the image id.
    pub path: String,
    pub image: ImageBuffer,
    pub stats: ImageStats,
    pub teacher_score: f64,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub teacher: TeacherParams,
    pub samples: Vec<SynthSample>,
}

#[derive(Serialize)]
struct TeacherFile<'a> {
    config: &'a SynthConfig,
    teacher: &'a TeacherParams,
}

impl SynthDataset {
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.samples
            .iter()
            .map(|s| ManifestEntry {
                image_path: s.path.clone(),
                ratings: s.counts.clone(),
            })
            .collect()
    }

    /// The same labeled images that loading the written dataset yields.
    pub fn labeled(&self) -> Result<Vec<LabeledImage>> {
        self.samples
            .iter()
            .map(|s| {
                Ok(LabeledImage {
                    id: s.path.clone(),
                    image: s.image.clone(),
                    truth: RatingDistribution::from_counts(&s.counts)?,
                })
            })
            .collect()
    }

    /// Writes `images/*.png`, `manifest.jsonl` and `teacher-params.json`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        for s in &self.samples {
            encode_png(&s.image, dir.join(&s.path))?;
        }
        write_manifest(dir.join("manifest.jsonl"), &self.manifest())?;
        let meta = serde_json::to_string_pretty(&TeacherFile {
            config: &self.config,
            teacher: &self.teacher,
        })?;
        fs::write(dir.join("teacher-params.json"), meta + "\n")?;
        Ok(())
    }
}

/// Aspect intervals of the reporting buckets that overlap `range`.
fn bucket_intervals(range: (f64, f64)) -> Vec<(f64, f64)> {
    let out: Vec<(f64, f64)> = BUCKET_EDGES
        .windows(2)
        .filter_map(|w| {
            let (lo, hi) = (w[0].max(range.0), w[1].min(range.1));
            (lo < hi).then_some((lo, hi))
        })
        .collect();
    if out.is_empty() {
        vec![range]
    } else {
        out
    }
}

fn dims_for(longer: usize, ratio: f64) -> (usize, usize) {
    if ratio >= 1.0 {
        (
            ((longer as f64 / ratio).round() as usize).max(MIN_SIDE),
            longer,
        )
    } else {
        (
            longer,
            ((longer as f64 * ratio).round() as usize).max(MIN_SIDE),
        )
    }
}

fn hue_direction(hue: f64) -> [f64; 3] {
    let rgb = [0.0, 2.0 / 3.0, 1.0 / 3.0].map(|shift: f64| {
        let d = ((hue + shift).fract() * 6.0 - 3.0).abs();
        (d - 1.0).clamp(0.0, 1.0)
    });
    let mean = rgb.iter().sum::<f64>() / 3.0;
    rgb.map(|c| c - mean)
}

fn render(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Result<ImageBuffer> {
    let base = rng.gen_range(0.15..0.85);
    let amp = rng.gen_range(0.0..0.3);
    let chroma = rng.gen_range(0.0..0.6);
    let hue = rng.gen::<f64>();
    let noise = rng.gen_range(0.0..0.08);
    let short = width.min(height) as f64;
    let gratings: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let freq = rng.gen_range(1.0..6.0) * 2.0 * PI / short;
            let theta = rng.gen_range(0.0..PI);
            (
                freq * theta.cos(),
                freq * theta.sin(),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    let norm: f64 = gratings.iter().map(|g| g.3).sum();
    // oriented linear gradient across the frame
    let tilt = rng.gen_range(-0.1..0.1);
    let tilt_dir = rng.gen_range(0.0..2.0 * PI);
    let (tx, ty) = (
        tilt_dir.cos() / width as f64,
        tilt_dir.sin() / height as f64,
    );
    // blobs: (cx, cy, radius, signed strength), all relative to the frame
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(0..=3))
        .map(|_| {
            (
                rng.gen::<f64>() * width as f64,
                rng.gen::<f64>() * height as f64,
                rng.gen_range(0.05..0.25) * short,
                rng.gen_range(-0.2..0.2),
            )
        })
        .collect();
    let dir = hue_direction(hue);
    let img = ImageBuffer::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let wave = gratings
            .iter()
            .map(|&(fx, fy, phase, a)| a * (fx * xf + fy * yf + phase).cos())
            .sum::<f64>()
            / norm;
        let blob: f64 = blobs
            .iter()
            .map(|&(cx, cy, r, s)| {
                s * (-((xf - cx).powi(2) + (yf - cy).powi(2)) / (2.0 * r * r)).exp()
            })
            .sum();
        let lum = base + amp * wave + tilt * ((xf * tx + yf * ty) * 2.0 - 1.0) + blob;
        let mut px = [0f32; 3];
        for (c, v) in px.iter_mut().enumerate() {
            *v = (lum + chroma * dir[c]) as f32;
        }
        px
    })?;
    // noise and quantization in a second pass keep the RNG order row-major
    let pixels: Vec<f32> = img
        .pixels()
        .iter()
        .map(|&v| {
            let n = noise * 3f64.sqrt() * (2.0 * rng.gen::<f64>() - 1.0);
            f32::from(quantize(v + n as f32)) / 255.0
        })
        .collect();
    ImageBuffer::new(width, height, pixels)
}

/// Generates `config.n` images; image `i` draws from stream `i` of a ChaCha8
/// generator seeded with `config.seed`, and its aspect ratio falls in bucket
/// `i mod k` of the `k` buckets overlapping the aspect range.
pub fn synth_generate(config: &SynthConfig, teacher: &TeacherParams) -> Result<SynthDataset> {
    config.validate()?;
    let intervals = bucket_intervals(config.aspect_range);
    let samples = (0..config.n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let (lo, hi) = intervals[i % intervals.len()];
            let longer = rng.gen_range(config.size_range.0..=config.size_range.1);
            // resample until rounding keeps the ratio inside its interval; tiny
            // frames may never fit, so give up after a bounded number of tries
            let mut tries = 0;
            let (w, h) = loop {
                let ratio = if lo == hi { lo } else { rng.gen_range(lo..hi) };
                let (w, h) = dims_for(longer, ratio);
                let actual = h as f64 / w as f64;
                tries += 1;
                let fits = AspectBucket::of(actual) == AspectBucket::of(ratio)
                    && actual >= config.aspect_range.0 - 1e-9
                    && actual <= config.aspect_range.1 + 1e-9;
                if fits || tries == 64 {
                    break (w, h);
                }
            };
            let image = render(&mut rng, w, h)?;
            let stats = ImageStats::of(&image);
            let score = teacher_score(&stats, teacher);
            Ok(SynthSample {
                path: format!("images/img{i:05}.png"),
                image,
                stats,
                teacher_score: score,
                counts: teacher_distribution(score, teacher),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        config: *config,
        teacher: *teacher,
        samples,
    })
}
