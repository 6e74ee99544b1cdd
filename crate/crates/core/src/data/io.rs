//! On-disk dataset layout.
//!
//! ```text
//! <dir>/labels.csv          filename,<class_1>,…,<class_K>[,boxes]
//! <dir>/images/<file>       8-bit grayscale PGM or PNG
//! <dir>/masks/<stem>_<k>.pgm   optional binary support mask of class k
//! ```
//!
//! Boxes are `k:x:y:w:h` entries separated by `;`, in source-image pixels.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::{BoundingBox, Dataset, Image, LabeledSample};
use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.csv";

/// Decodes any supported image to grayscale in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    Image::from_vec(
        w as usize,
        h as usize,
        luma.into_raw().into_iter().map(f64::from).collect(),
    )
}

/// Writes an 8-bit binary PGM, mapping `[0, 1]` to `0..=255`.
pub fn write_gray(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            &bytes,
            image.width() as u32,
            image.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn mask_path(dir: &Path, file: &str, class: usize) -> PathBuf {
    let stem = Path::new(file).file_stem().and_then(|s| s.to_str()).unwrap_or(file);
    dir.join("masks").join(format!("{stem}_{class}.pgm"))
}

fn format_boxes(boxes: &[BoundingBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{}:{}:{}:{}:{}", b.class, b.x, b.y, b.w, b.h))
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes `dataset` in the layout above. Images are named `<sample>.pgm`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut csv = String::from("filename");
    for name in &dataset.class_names {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push_str(",boxes\n");
    for s in &dataset.samples {
        let file = format!("{}.pgm", s.name);
        write_gray(&dir.join("images").join(&file), &s.image)?;
        for (k, m) in s.masks.iter().enumerate() {
            if let Some(m) = m {
                write_gray(&mask_path(dir, &file, k), m)?;
            }
        }
        csv.push_str(&file);
        for y in &s.labels {
            csv.push_str(if *y != 0 { ",1" } else { ",0" });
        }
        csv.push(',');
        csv.push_str(&format_boxes(&s.boxes));
        csv.push('\n');
    }
    let p = dir.join(LABELS_FILE);
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))
}

fn parse_boxes(field: &str, k: usize, line: usize, path: &Path) -> Result<Vec<BoundingBox>> {
    let err = |detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    field
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let parts: Vec<&str> = entry.split(':').collect();
            if parts.len() != 5 {
                return Err(err(format!("box `{entry}` is not class:x:y:w:h")));
            }
            let class: usize = parts[0]
                .parse()
                .map_err(|_| err(format!("bad box class in `{entry}`")))?;
            if class >= k {
                return Err(err(format!("box class {class} out of range for {k} classes")));
            }
            let mut v = [0.0; 4];
            for (slot, s) in v.iter_mut().zip(&parts[1..]) {
                *slot = s.parse().map_err(|_| err(format!("bad box coordinate in `{entry}`")))?;
            }
            if v[2] <= 0.0 || v[3] <= 0.0 {
                return Err(err(format!("box `{entry}` has non-positive size")));
            }
            Ok(BoundingBox {
                class,
                x: v[0],
                y: v[1],
                w: v[2],
                h: v[3],
            })
        })
        .collect()
}

/// Reads a dataset directory, downsampling every image (and mask) to
/// `input_size`. Masks are thresholded at 0.5 after downsampling and boxes
/// are rescaled by the same factor.
pub fn ingest(dir: &Path, input_size: usize) -> Result<Dataset> {
    let labels_path = dir.join(LABELS_FILE);
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(&labels_path)
        .map_err(|e| csv_error(&labels_path, e))?;
    let header = reader.headers().map_err(|e| csv_error(&labels_path, e))?.clone();
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: labels_path.clone(),
        line,
        detail,
    };
    if header.get(0) != Some("filename") {
        return Err(parse_err(1, "header must start with `filename`".into()));
    }
    let has_boxes = header.iter().next_back() == Some("boxes");
    let class_names: Vec<String> = header
        .iter()
        .skip(1)
        .take(header.len() - 1 - has_boxes as usize)
        .map(str::to_string)
        .collect();
    let k = class_names.len();
    if k == 0 {
        return Err(parse_err(1, "no label columns".into()));
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&labels_path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let fields: Vec<&str> = record.iter().collect();
        let ok = fields.len() == 1 + k || (has_boxes && fields.len() == 2 + k);
        if !ok {
            return Err(parse_err(
                line,
                format!(
                    "row has {} fields, expected filename + {k} labels{}",
                    fields.len(),
                    if has_boxes { " [+ boxes]" } else { "" }
                ),
            ));
        }
        let file = fields[0];
        let labels = fields[1..=k]
            .iter()
            .map(|f| match *f {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(parse_err(line, format!("label `{other}` is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;

        let raw = read_gray(&dir.join("images").join(file))?;
        let scale = input_size as f64 / raw.width() as f64;
        let image = raw.resize_area(input_size)?;
        let boxes = match fields.get(k + 1) {
            Some(f) => parse_boxes(f, k, line, &labels_path)?
                .into_iter()
                .map(|b| b.scaled(scale))
                .collect(),
            None => Vec::new(),
        };
        let mut masks = Vec::with_capacity(k);
        for class in 0..k {
            let p = mask_path(dir, file, class);
            if p.exists() {
                let mut m = read_gray(&p)?.resize_area(input_size)?;
                m.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
                masks.push(Some(m));
            } else {
                masks.push(None);
            }
        }
        let name = Path::new(file)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(file)
            .to_string();
        samples.push(LabeledSample {
            name,
            image,
            labels,
            masks,
            boxes,
        });
    }
    if samples.is_empty() {
        return Err(parse_err(1, "no samples".into()));
    }
    Ok(Dataset { class_names, samples })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            detail: format!("{other:?}"),
        },
    }
}
