//! Labeled image bags: synthetic generation, augmentation and disk I/O.
//!
//! Pixels are kept as `f64` in `[0, 1]` regardless of the model's scalar
//! type; [`Dataset::images`] converts a batch into a model tensor.

mod augment;
mod io;
mod synthetic;

pub use augment::{apply as apply_augmentation, AugmentParams, Augmenter, ZoomRange, TRANSLATION_PX, TRANSLATION_REF};
pub use io::{ingest, read_gray, write_dataset, write_gray, LABELS_FILE};
pub use synthetic::{generate, generate_split, Split, SyntheticClass, SyntheticSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major grayscale plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} needs {} values, got {}", width * height, data.len()),
            ));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Area-average downsampling to `side × side`.
    ///
    /// Each output pixel averages the input pixels its footprint overlaps,
    /// weighted by overlap, so integer factors reduce to exact block means.
    pub fn resize_area(&self, side: usize) -> Result<Image> {
        if side == 0 || side > self.width || side > self.height {
            return Err(Error::invalid(
                "resize_area",
                format!("cannot area-resize {}x{} to {side}x{side}", self.width, self.height),
            ));
        }
        if side == self.width && side == self.height {
            return Ok(self.clone());
        }
        let wx = overlap_weights(self.width, side);
        let wy = overlap_weights(self.height, side);
        let mut out = Image::zeros(side, side);
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for &(iy, fy) in ry {
                    for &(ix, fx) in rx {
                        acc += fy * fx * self.get(ix, iy);
                        norm += fy * fx;
                    }
                }
                out.set(ox, oy, acc / norm);
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Image {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }

    pub fn is_nonzero(&self) -> bool {
        self.data.iter().any(|&v| v != 0.0)
    }
}

/// For each output cell, the input indices it covers and their overlap.
fn overlap_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(input);
            (first..last)
                .filter_map(|i| {
                    let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (w > 1e-12).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// Axis-aligned box in pixel units; pixel `(x, y)` is inside when its centre
/// lies in `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        cx >= self.x && cx < self.x + self.w && cy >= self.y && cy < self.y + self.h
    }

    pub fn scaled(&self, factor: f64) -> Self {
        BoundingBox {
            x: self.x * factor,
            y: self.y * factor,
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub name: String,
    pub image: Image,
    pub labels: Vec<u8>,
    /// Per-class binary support masks; `None` when no mask is available.
    pub masks: Vec<Option<Image>>,
    pub boxes: Vec<BoundingBox>,
}

impl LabeledSample {
    pub fn boxes_for(&self, class: usize) -> impl Iterator<Item = &BoundingBox> {
        self.boxes.iter().filter(move |b| b.class == class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[n, 1, H, W]` batch of the given samples.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let first = &self.samples[*indices.first().ok_or_else(|| Error::invalid("images", "empty batch"))?].image;
        let (w, h) = (first.width(), first.height());
        let mut data = Vec::with_capacity(indices.len() * w * h);
        for &i in indices {
            let img = &self.samples[i].image;
            if (img.width(), img.height()) != (w, h) {
                return Err(Error::shape(
                    "images",
                    format!(
                        "sample `{}` is {}x{}, batch is {w}x{h}",
                        self.samples[i].name,
                        img.width(),
                        img.height()
                    ),
                ));
            }
            data.extend(img.data().iter().map(|&v| T::of(v)));
        }
        Tensor::from_vec([indices.len(), 1, h, w], data)
    }

    /// `[n, K, 1, 1]` label targets.
    pub fn targets<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let k = self.num_classes();
        let data = indices
            .iter()
            .flat_map(|&i| {
                self.samples[i]
                    .labels
                    .iter()
                    .map(|&y| if y != 0 { T::one() } else { T::zero() })
            })
            .collect();
        Tensor::from_vec([indices.len(), k, 1, 1], data)
    }

    pub fn positive_counts(&self) -> Vec<usize> {
        (0..self.num_classes())
            .map(|k| self.samples.iter().filter(|s| s.labels[k] != 0).count())
            .collect()
    }
}
