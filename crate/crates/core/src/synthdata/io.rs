use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_scene, SceneParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{LanePolyline, LaneSet};

/// Annotation file written next to the `images/` directory.
pub const LABELS_FILE: &str = "labels.json";

/// Marks "no lane on this row" in a lane's x list.
const ABSENT: i64 = -2;

/// One line of a TuSimple-style annotation file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub lanes: Vec<Vec<i64>>,
    pub h_samples: Vec<i64>,
    pub raw_file: String,
}

impl AnnotationRecord {
    /// Samples every lane at `h_samples`, rounding x to whole pixels.
    pub fn from_lanes(lanes: &LaneSet, h_samples: Vec<i64>, raw_file: impl Into<String>) -> Self {
        let lanes = lanes
            .slots()
            .iter()
            .map(|slot| {
                h_samples
                    .iter()
                    .map(|&y| {
                        slot.as_ref()
                            .and_then(|l| l.x_at(y as f64))
                            .map(|x| x.round() as i64)
                            .filter(|&x| x >= 0)
                            .unwrap_or(ABSENT)
                    })
                    .collect()
            })
            .collect();
        Self {
            lanes,
            h_samples,
            raw_file: raw_file.into(),
        }
    }

    /// Lane `i` becomes slot `i`; lanes with fewer than two valid points are empty slots.
    pub fn to_lanes(&self) -> std::result::Result<LaneSet, String> {
        if self.h_samples.windows(2).any(|p| p[1] <= p[0]) {
            return Err("h_samples must be strictly increasing".into());
        }
        let mut slots = Vec::with_capacity(self.lanes.len());
        for (i, xs) in self.lanes.iter().enumerate() {
            if xs.len() != self.h_samples.len() {
                return Err(format!(
                    "lane {i} has {} entries but h_samples has {}",
                    xs.len(),
                    self.h_samples.len()
                ));
            }
            let pts: Vec<(f64, f64)> = xs
                .iter()
                .zip(&self.h_samples)
                .filter(|(&x, _)| x >= 0)
                .map(|(&x, &y)| (x as f64, y as f64))
                .collect();
            slots.push(LanePolyline::new(pts).ok());
        }
        Ok(LaneSet::new(slots))
    }
}

/// An image with its lanes, as read from a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub raw_file: String,
    pub image: Tensor,
    pub lanes: LaneSet,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Reads a PNM (or any enabled format) image as `[1, H, W]` gray values in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v) / 255.0)
        .collect();
    Tensor::from_vec(vec![1, h as usize, w as usize], data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm(path: &Path, data: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    let subtype = match color {
        ExtendedColorType::L8 => PnmSubtype::Graymap(SampleEncoding::Binary),
        _ => PnmSubtype::Pixmap(SampleEncoding::Binary),
    };
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(subtype)
        .write_image(data, w as u32, h as u32, color)
        .map_err(|e| image_err(path, e))
}

/// Writes a `[1, H, W]` tensor as an 8-bit binary graymap (P5).
pub fn write_gray(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let &[1, h, w] = image.shape() else {
        return Err(Error::shape(
            "write_gray",
            format!("expected [1, H, W], got {:?}", image.shape()),
        ));
    };
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    write_pnm(path.as_ref(), &bytes, w, h, ExtendedColorType::L8)
}

/// Writes interleaved 8-bit RGB as a binary pixmap (P6).
pub fn write_rgb(path: impl AsRef<Path>, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape(
            "write_rgb",
            format!("{} bytes for {width}x{height}", rgb.len()),
        ));
    }
    write_pnm(path.as_ref(), rgb, width, height, ExtendedColorType::Rgb8)
}

/// Generates scenes `0..n` into `dir/images/NNNNN.pgm` plus `dir/labels.json`.
/// Labels are sampled on every image row.
pub fn write_dataset(
    params: &SceneParams,
    n: usize,
    dir: impl AsRef<Path>,
) -> Result<Vec<AnnotationRecord>> {
    params.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let h_samples: Vec<i64> = (0..params.height as i64).collect();
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let (img, lanes) = generate_scene(params, i as u64)?;
            let raw_file = format!("images/{i:05}.pgm");
            write_gray(dir.join(&raw_file), &img)?;
            Ok(AnnotationRecord::from_lanes(
                &lanes,
                h_samples.clone(),
                raw_file,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = BufWriter::new(fs::File::create(dir.join(LABELS_FILE))?);
    for r in &records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Config(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records)
}

fn parse_records(path: &Path) -> Result<Vec<(usize, AnnotationRecord)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

/// Parses a TuSimple annotation file. Image paths are resolved against the
/// file's directory.
pub fn ingest_tusimple(annotation_file: impl AsRef<Path>) -> Result<Vec<(PathBuf, LaneSet)>> {
    let path = annotation_file.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    parse_records(path)?
        .into_iter()
        .map(|(line, r)| {
            let lanes = r.to_lanes().map_err(|msg| Error::Record {
                path: path.to_path_buf(),
                line,
                msg,
            })?;
            Ok((base.join(&r.raw_file), lanes))
        })
        .collect()
}

/// Loads every annotated image of a dataset directory, in file order.
/// A directory without an annotation file holds no scenes.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset directory {} does not exist", dir.display()),
        )));
    }
    let labels = dir.join(LABELS_FILE);
    if !labels.exists() {
        return Ok(Vec::new());
    }
    let records = parse_records(&labels)?;
    records
        .into_par_iter()
        .map(|(line, r)| {
            let lanes = r.to_lanes().map_err(|msg| Error::Record {
                path: labels.clone(),
                line,
                msg,
            })?;
            Ok(LabeledImage {
                image: read_image(dir.join(&r.raw_file))?,
                raw_file: r.raw_file,
                lanes,
            })
        })
        .collect()
}
