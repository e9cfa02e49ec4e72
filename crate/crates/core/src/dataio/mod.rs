//! Manifests, image decoding, the train/validation/test split and the
//! synthetic teacher-labeled dataset.

mod synth;

pub use synth::{
    synth_generate, teacher_distribution, teacher_score, ImageStats, SynthConfig, SynthDataset,
    SynthSample, TeacherParams,
};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchgrid::ImageBuffer;
use crate::ratings::{RatingDistribution, DEFAULT_CLASSES};

/// One manifest line: an image path and its vote counts for classes 1..=10.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "path")]
    pub image_path: String,
    pub ratings: Vec<u32>,
}

impl ManifestEntry {
    pub fn distribution(&self) -> Result<RatingDistribution> {
        RatingDistribution::from_counts(&self.ratings)
    }
}

/// Reads a line-delimited JSON manifest. Blank lines are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            path: path.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        if entry.ratings.len() != DEFAULT_CLASSES {
            return Err(Error::SchemaError {
                path: path.to_owned(),
                line: line_no,
                message: format!(
                    "expected {DEFAULT_CLASSES} rating counts, got {}",
                    entry.ratings.len()
                ),
            });
        }
        if entry.ratings.iter().all(|&c| c == 0) {
            return Err(Error::SchemaError {
                path: path.to_owned(),
                line: line_no,
                message: "rating counts sum to zero".into(),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Manifest entries with a disjoint train/validation/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!(
                "unknown split '{other}' (expected train, validation or test)"
            ))),
        }
    }
}

impl Dataset {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn entries_of(&self, split: Split) -> Vec<ManifestEntry> {
        self.indices(split)
            .iter()
            .map(|&i| self.entries[i].clone())
            .collect()
    }
}

/// Seeded shuffle, then a contiguous 92/4/4 cut (validation, test, train).
///
/// Validation and test each receive `round(0.04 n)` entries, at least one;
/// training keeps the rest.
pub fn split_dataset(entries: Vec<ManifestEntry>, seed: u64) -> Result<Dataset> {
    let n = entries.len();
    if n < 3 {
        return Err(Error::EmptyDataset(format!(
            "need at least 3 entries to split, got {n}"
        )));
    }
    let held_out = ((4 * n + 50) / 100).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = order[..held_out].to_vec();
    let test = order[held_out..2 * held_out].to_vec();
    let train = order[2 * held_out..].to_vec();
    Ok(Dataset {
        entries,
        train,
        validation,
        test,
    })
}

/// Decodes a PNG or JPEG into RGB values in `[0, 1]`; gray is replicated.
pub fn decode_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let decode_err = |message: String| Error::DecodeError {
        path: path.to_owned(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| decode_err(e.to_string()))?;
    let img = image::load_from_memory(&bytes).map_err(|e| decode_err(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .into_raw()
        .into_iter()
        .map(|v| f32::from(v) / 255.0)
        .collect();
    ImageBuffer::new(w as usize, h as usize, pixels)
}

/// Writes an 8-bit RGB PNG; values are rounded to the nearest level.
pub fn encode_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let raw: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::InvalidParameter("pixel buffer does not match dimensions".into()))?;
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| Error::DecodeError {
            path: path.as_ref().to_owned(),
            message: e.to_string(),
        })
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A decoded image with its ground-truth rating distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: ImageBuffer,
    pub truth: RatingDistribution,
}

/// Resolves a manifest path against the manifest's directory.
pub fn resolve_path(base_dir: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_owned()
    } else {
        base_dir.join(p)
    }
}

/// Decodes the images of `entries` in parallel, keeping manifest order.
pub fn load_labeled(entries: &[ManifestEntry], base_dir: &Path) -> Result<Vec<LabeledImage>> {
    entries
        .par_iter()
        .map(|e| {
            Ok(LabeledImage {
                id: e.image_path.clone(),
                image: decode_image(resolve_path(base_dir, &e.image_path))?,
                truth: e.distribution()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize) -> ManifestEntry {
        ManifestEntry {
            image_path: format!("img{i}.png"),
            ratings: vec![1; 10],
        }
    }

    #[test]
    fn manifest_examples() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_manifest(&empty).unwrap().is_empty());

        let one = dir.path().join("one.jsonl");
        fs::write(
            &one,
            "{\"path\":\"a.jpg\",\"ratings\":[0,0,0,0,0,0,210,0,0,0]}\n",
        )
        .unwrap();
        let entries = load_manifest(&one).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].image_path, "a.jpg");
        assert!(entries[0]
            .distribution()
            .unwrap()
            .approx_eq(&RatingDistribution::one_hot(7, 10).unwrap()));

        let long = dir.path().join("long.jsonl");
        fs::write(
            &long,
            "{\"path\":\"a.jpg\",\"ratings\":[1,1,1,1,1,1,1,1,1,1]}\n\n{\"path\":\"b.jpg\",\"ratings\":[1,1,1,1,1,1,1,1,1,1,1]}\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&long),
            Err(Error::SchemaError { line: 3, .. })
        ));

        let broken = dir.path().join("broken.jsonl");
        fs::write(
            &broken,
            "{\"path\":\"a.jpg\",\"ratings\":[1,1,1,1,1,1,1,1,1,1]}\n{oops\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&broken),
            Err(Error::ParseError { line: 2, .. })
        ));

        let zero = dir.path().join("zero.jsonl");
        fs::write(
            &zero,
            "{\"path\":\"a.jpg\",\"ratings\":[0,0,0,0,0,0,0,0,0,0]}\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&zero),
            Err(Error::SchemaError { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_write_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries: Vec<_> = (0..5).map(entry).collect();
        write_manifest(&path, &entries).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), entries);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"path\":\"img0.png\",\"ratings\":[1,1,1,1,1,1,1,1,1,1]}\n"));
    }

    #[test]
    fn split_proportions() {
        let d = split_dataset((0..100).map(entry).collect(), 1).unwrap();
        assert_eq!(
            (d.train.len(), d.validation.len(), d.test.len()),
            (92, 4, 4)
        );
        let d = split_dataset((0..3).map(entry).collect(), 1).unwrap();
        assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (1, 1, 1));
        assert!(matches!(
            split_dataset((0..2).map(entry).collect(), 1),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let a = split_dataset((0..257).map(entry).collect(), 42).unwrap();
        let b = split_dataset((0..257).map(entry).collect(), 42).unwrap();
        let c = split_dataset((0..257).map(entry).collect(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.validation)
            .chain(&a.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..257).collect::<Vec<_>>());
    }

    #[test]
    fn decode_examples() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.png");
        image::RgbImage::from_pixel(1, 1, image::Rgb([255, 255, 255]))
            .save(&white)
            .unwrap();
        assert_eq!(decode_image(&white).unwrap().pixels(), &[1.0, 1.0, 1.0]);

        let gray = dir.path().join("gray.png");
        image::GrayImage::from_fn(3, 2, |x, y| image::Luma([(x * 40 + y * 90) as u8]))
            .save(&gray)
            .unwrap();
        let img = decode_image(&gray).unwrap();
        assert_eq!((img.width(), img.height()), (3, 2));
        for px in img.pixels().chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
        assert_eq!(img.pixel(2, 1)[0], 170.0 / 255.0);

        let truncated = dir.path().join("bad.png");
        let bytes = fs::read(&white).unwrap();
        fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            decode_image(&truncated),
            Err(Error::DecodeError { .. })
        ));
        assert!(matches!(
            decode_image(dir.path().join("missing.png")),
            Err(Error::DecodeError { .. })
        ));
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(5, 4, |x, y| {
            let v = f32::from(quantize((x * 4 + y) as f32 / 19.0)) / 255.0;
            [v, 1.0 - v, 0.5f32.min(v)]
        })
        .unwrap();
        let img = ImageBuffer::new(
            5,
            4,
            img.pixels()
                .iter()
                .map(|&v| f32::from(quantize(v)) / 255.0)
                .collect(),
        )
        .unwrap();
        let path = dir.path().join("x.png");
        encode_png(&img, &path).unwrap();
        assert_eq!(decode_image(&path).unwrap(), img);
    }
}
