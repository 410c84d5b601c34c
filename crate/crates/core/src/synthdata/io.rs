//! Dataset directory layout and PNG codecs.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/t1/NNNN.png      8-bit RGB
//! <dir>/t2/NNNN.png      8-bit RGB
//! <dir>/change/NNNN.png  8-bit grayscale, 0 or 255
//! <dir>/trend/NNNN.png   palette-indexed, codes 0..=3 (optional subdir)
//! ```
//!
//! Label round trips are lossless; images are 8-bit quantized. The
//! training readers never open `trend/`, which is what lets a dataset
//! with trend labels deleted still train: trend labels only exist on the
//! evaluation path.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trend::TREND_PALETTE;

use super::{SamplePair, SceneSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Half-open index ranges partitioning a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl Splits {
    /// Contiguous splits from three counts.
    pub fn from_counts(train: usize, val: usize, test: usize) -> Self {
        Splits {
            train: (0, train),
            val: (train, train + val),
            test: (train + val, train + val + test),
        }
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        let ok = self.train.0 == 0
            && self.train.1 == self.val.0
            && self.val.1 == self.test.0
            && self.test.1 == count
            && self.train.0 <= self.train.1
            && self.val.0 <= self.val.1
            && self.test.0 <= self.test.1;
        if !ok {
            return Err(Error::Data(format!(
                "splits {self:?} do not partition {count} samples"
            )));
        }
        Ok(())
    }

    pub fn range(&self, name: &str) -> Result<(usize, usize)> {
        match name {
            "train" => Ok(self.train),
            "val" => Ok(self.val),
            "test" => Ok(self.test),
            "all" => Ok((self.train.0, self.test.1)),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train|val|test|all)"
            ))),
        }
    }
}

/// Dataset provenance record written next to the images.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub master_seed: u64,
    pub count: usize,
    pub splits: Splits,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "manifest format_version {} unsupported (expected {DATASET_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.spec.validate()?;
        self.splits.validate(self.count)
    }
}

/// A sample as seen by the training path: no trend field exists here.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub t1: Tensor,
    pub t2: Tensor,
    pub change: Vec<u8>,
}

/// A sample as seen by the evaluation path; trend labels are optional.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub t1: Tensor,
    pub t2: Tensor,
    pub change: Vec<u8>,
    pub trend: Option<Vec<u8>>,
}

fn sample_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// Write a generated dataset plus its manifest.
pub fn write_dataset(dir: &Path, pairs: &[SamplePair], manifest: &Manifest) -> Result<()> {
    if manifest.count != pairs.len() {
        return Err(Error::Data(format!(
            "manifest count {} does not match {} samples",
            manifest.count,
            pairs.len()
        )));
    }
    manifest.validate()?;
    for sub in ["t1", "t2", "change", "trend"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, pair) in pairs.iter().enumerate() {
        let (h, w) = pair.spatial();
        let name = sample_name(i);
        write_rgb(&dir.join("t1").join(&name), w, h, pair.t1.data())?;
        write_rgb(&dir.join("t2").join(&name), w, h, pair.t2.data())?;
        let change: Vec<u8> = pair.change.iter().map(|v| v * 255).collect();
        write_gray(&dir.join("change").join(&name), w, h, &change)?;
        write_indexed(&dir.join("trend").join(&name), w, h, &pair.trend)?;
    }
    let file = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), manifest)
        .map_err(|e| Error::Data(format!("manifest write: {e}")))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let file = fs::File::open(&path)
        .map_err(|e| Error::Data(format!("missing manifest {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Data(format!("bad manifest {}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Check that a subdirectory holds exactly the expected sample files.
fn check_subdir(dir: &Path, sub: &str, count: usize) -> Result<()> {
    let path = dir.join(sub);
    let mut found = 0usize;
    for entry in fs::read_dir(&path)
        .map_err(|e| Error::Data(format!("missing {}: {e}", path.display())))?
    {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let valid = name
            .strip_suffix(".png")
            .and_then(|stem| stem.parse::<usize>().ok())
            .map(|idx| idx < count)
            .unwrap_or(false);
        if !valid {
            return Err(Error::Data(format!(
                "unexpected file {} in {}",
                name,
                path.display()
            )));
        }
        found += 1;
    }
    if found != count {
        return Err(Error::Data(format!(
            "{} holds {found} samples, manifest says {count}",
            path.display()
        )));
    }
    Ok(())
}

fn has_trend_dir(dir: &Path) -> bool {
    dir.join("trend").is_dir()
}

/// Read `[start, end)` samples for training. This path never opens the
/// `trend/` subdirectory.
pub fn read_train_pairs(dir: &Path, range: (usize, usize)) -> Result<Vec<TrainPair>> {
    let manifest = read_manifest(dir)?;
    check_range(range, manifest.count)?;
    for sub in ["t1", "t2", "change"] {
        check_subdir(dir, sub, manifest.count)?;
    }
    (range.0..range.1)
        .map(|i| {
            let name = sample_name(i);
            let (t1, h, w) = read_rgb(&dir.join("t1").join(&name))?;
            let (t2, h2, w2) = read_rgb(&dir.join("t2").join(&name))?;
            let change = read_change(&dir.join("change").join(&name), h, w)?;
            if (h, w) != (h2, w2) {
                return Err(Error::Data(format!("sample {i}: t1 is {h}x{w} but t2 is {h2}x{w2}")));
            }
            Ok(TrainPair { t1, t2, change })
        })
        .collect()
}

/// Read `[start, end)` samples for evaluation, including trend labels when
/// the `trend/` subdirectory exists.
pub fn read_eval_pairs(dir: &Path, range: (usize, usize)) -> Result<Vec<EvalPair>> {
    let manifest = read_manifest(dir)?;
    check_range(range, manifest.count)?;
    for sub in ["t1", "t2", "change"] {
        check_subdir(dir, sub, manifest.count)?;
    }
    let with_trend = has_trend_dir(dir);
    if with_trend {
        check_subdir(dir, "trend", manifest.count)?;
    }
    (range.0..range.1)
        .map(|i| {
            let name = sample_name(i);
            let (t1, h, w) = read_rgb(&dir.join("t1").join(&name))?;
            let (t2, h2, w2) = read_rgb(&dir.join("t2").join(&name))?;
            if (h, w) != (h2, w2) {
                return Err(Error::Data(format!("sample {i}: t1 is {h}x{w} but t2 is {h2}x{w2}")));
            }
            let change = read_change(&dir.join("change").join(&name), h, w)?;
            let trend = if with_trend {
                Some(read_trend(&dir.join("trend").join(&name), h, w)?)
            } else {
                None
            };
            Ok(EvalPair {
                t1,
                t2,
                change,
                trend,
            })
        })
        .collect()
}

/// Read image pairs only (prediction input); labels are not required.
pub fn read_image_pairs(dir: &Path, range: (usize, usize)) -> Result<Vec<(Tensor, Tensor)>> {
    let manifest = read_manifest(dir)?;
    check_range(range, manifest.count)?;
    for sub in ["t1", "t2"] {
        check_subdir(dir, sub, manifest.count)?;
    }
    (range.0..range.1)
        .map(|i| {
            let name = sample_name(i);
            let (t1, h, w) = read_rgb(&dir.join("t1").join(&name))?;
            let (t2, h2, w2) = read_rgb(&dir.join("t2").join(&name))?;
            if (h, w) != (h2, w2) {
                return Err(Error::Data(format!("sample {i}: t1 is {h}x{w} but t2 is {h2}x{w2}")));
            }
            Ok((t1, t2))
        })
        .collect()
}

fn check_range(range: (usize, usize), count: usize) -> Result<()> {
    if range.0 > range.1 || range.1 > count {
        return Err(Error::Data(format!(
            "sample range {range:?} out of bounds for {count} samples"
        )));
    }
    Ok(())
}

// ── PNG codecs ──────────────────────────────────────────────────────

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Write a planar `[3,H,W]` float image as interleaved 8-bit RGB.
pub fn write_rgb(path: &Path, w: usize, h: usize, planar: &[f32]) -> Result<()> {
    let plane = w * h;
    debug_assert_eq!(planar.len(), 3 * plane);
    let mut interleaved = vec![0u8; 3 * plane];
    for px in 0..plane {
        for c in 0..3 {
            interleaved[3 * px + c] = quantize(planar[c * plane + px]);
        }
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer
        .write_image_data(&interleaved)
        .map_err(|e| png_error(path, e))?;
    Ok(())
}

pub fn write_gray(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(data).map_err(|e| png_error(path, e))?;
    Ok(())
}

/// Write a palette-indexed PNG with the fixed trend palette
/// (unchanged black, appear blue, disappear white, transform red).
pub fn write_indexed(path: &Path, w: usize, h: usize, indices: &[u8]) -> Result<()> {
    if let Some(bad) = indices.iter().find(|v| **v > 3) {
        return Err(Error::Data(format!(
            "trend code {bad} out of range for {}",
            path.display()
        )));
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(TREND_PALETTE.to_vec());
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(indices).map_err(|e| png_error(path, e))?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| png_error(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    // Raw samples: palette indices must come back as indices.
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_error(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| png_error(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Read an 8-bit RGB PNG into a planar `[3,H,W]` float tensor in [0,1].
pub fn read_rgb(path: &Path) -> Result<(Tensor, usize, usize)> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(path, "expected 8-bit RGB"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let mut planar = vec![0.0f32; 3 * plane];
    for px in 0..plane {
        for c in 0..3 {
            planar[c * plane + px] = buf[3 * px + c] as f32 / 255.0;
        }
    }
    Ok((Tensor::new(vec![3, h, w], planar)?, h, w))
}

fn read_change(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(path, "expected 8-bit grayscale"));
    }
    if (info.height as usize, info.width as usize) != (h, w) {
        return Err(png_error(path, format!("expected {h}x{w}")));
    }
    buf.iter()
        .map(|v| match v {
            0 => Ok(0u8),
            255 => Ok(1u8),
            other => Err(png_error(path, format!("change value {other} is not 0 or 255"))),
        })
        .collect()
}

fn read_trend(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(path, "expected 8-bit indexed"));
    }
    if (info.height as usize, info.width as usize) != (h, w) {
        return Err(png_error(path, format!("expected {h}x{w}")));
    }
    if let Some(bad) = buf.iter().find(|v| **v > 3) {
        return Err(png_error(path, format!("trend code {bad} out of range")));
    }
    Ok(buf)
}
