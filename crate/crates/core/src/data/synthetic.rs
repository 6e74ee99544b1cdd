//! Synthetic bags with planted instances.
//!
//! Two abnormality shapes are modelled: *focal* (a few small bright Gaussian
//! blobs) and *diffuse* (one large, faint, textured elliptical region). The
//! background is a random linear gradient plus white noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BoundingBox, Dataset, Image, LabeledSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticClass {
    Focal,
    Diffuse,
}

impl SyntheticClass {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticClass::Focal => "focal",
            SyntheticClass::Diffuse => "diffuse",
        }
    }
}

/// Which split a sample belongs to; splits draw from disjoint RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream_base(self) -> u64 {
        (self as u64) << 40
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub classes: Vec<SyntheticClass>,
    pub label_prior: f64,
    pub focal_radius_range: (f64, f64),
    pub focal_amplitude_range: (f64, f64),
    pub instance_count_range: (usize, usize),
    /// Fraction of the image covered by a diffuse region.
    pub diffuse_coverage_range: (f64, f64),
    pub diffuse_contrast: f64,
    /// Width of the logistic fade at the diffuse region's edge, relative to
    /// its radius; 0 gives a hard edge. The planted support is always the
    /// half-maximum ellipse.
    pub diffuse_edge_softness: f64,
    pub background_range: (f64, f64),
    /// Peak-to-peak amplitude of the background gradient.
    pub gradient_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            classes: vec![SyntheticClass::Focal, SyntheticClass::Diffuse],
            label_prior: 0.5,
            focal_radius_range: (2.5, 5.0),
            focal_amplitude_range: (0.3, 0.5),
            instance_count_range: (1, 3),
            diffuse_coverage_range: (0.15, 0.4),
            diffuse_contrast: 0.12,
            diffuse_edge_softness: 0.25,
            background_range: (0.25, 0.45),
            gradient_amplitude: 0.15,
            noise_std: 0.04,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("synthetic_spec", d));
        let s = self.image_size as f64;
        let (r_lo, r_hi) = self.focal_radius_range;
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if !(r_lo > 0.0 && r_lo <= r_hi && 2.0 * r_hi + 2.0 < s) {
            return bad(format!(
                "focal radius range {:?} does not fit a {s}-pixel image",
                self.focal_radius_range
            ));
        }
        let (c_lo, c_hi) = self.diffuse_coverage_range;
        if !(c_lo > 0.0 && c_lo <= c_hi && c_hi < 1.0) {
            return bad(format!(
                "diffuse coverage range {:?} not in (0, 1)",
                self.diffuse_coverage_range
            ));
        }
        let (n_lo, n_hi) = self.instance_count_range;
        if n_lo == 0 || n_lo > n_hi {
            return bad(format!("instance count range {:?}", self.instance_count_range));
        }
        if !(0.0..=1.0).contains(&self.label_prior) || self.noise_std < 0.0 || self.diffuse_edge_softness < 0.0 {
            return bad("label prior must be in [0, 1]; noise_std and diffuse_edge_softness must be >= 0".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name().to_string()).collect()
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Tight box around the nonzero pixels of `mask`.
fn tight_box(mask: &Image, class: usize) -> Option<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) != 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| BoundingBox {
        class,
        x: x0 as f64,
        y: y0 as f64,
        w: (x1 - x0 + 1) as f64,
        h: (y1 - y0 + 1) as f64,
    })
}

fn plant_focal<R: Rng>(spec: &SyntheticSpec, rng: &mut R, img: &mut Image, class: usize) -> (Image, Vec<BoundingBox>) {
    let s = spec.image_size;
    let mut mask = Image::zeros(s, s);
    let mut boxes = Vec::new();
    let (lo, hi) = spec.instance_count_range;
    let count = rng.random_range(lo..=hi);
    for _ in 0..count {
        let r = uniform(rng, spec.focal_radius_range);
        let amp = uniform(rng, spec.focal_amplitude_range);
        let cx = uniform(rng, (r + 0.5, s as f64 - r - 1.5));
        let cy = uniform(rng, (r + 0.5, s as f64 - r - 1.5));
        let sigma2 = (r / 2.0).powi(2);
        let mut blob = Image::zeros(s, s);
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = img.get(x, y) + amp * (-d2 / (2.0 * sigma2)).exp();
                img.set(x, y, v);
                if d2 <= r * r {
                    blob.set(x, y, 1.0);
                    mask.set(x, y, 1.0);
                }
            }
        }
        boxes.extend(tight_box(&blob, class));
    }
    (mask, boxes)
}

fn plant_diffuse<R: Rng>(
    spec: &SyntheticSpec,
    rng: &mut R,
    img: &mut Image,
    class: usize,
) -> (Image, Vec<BoundingBox>) {
    let s = spec.image_size;
    let sf = s as f64;
    let coverage = uniform(rng, spec.diffuse_coverage_range);
    let aspect = uniform(rng, (0.6, 1.0));
    let a = (coverage * sf * sf / (PI * aspect)).sqrt();
    let b = aspect * a;
    let theta = uniform(rng, (0.0, PI));
    let cx = uniform(rng, (0.3 * sf, 0.7 * sf));
    let cy = uniform(rng, (0.3 * sf, 0.7 * sf));
    let period = uniform(rng, (4.0, 6.0));
    let (px, py) = (uniform(rng, (0.0, 2.0 * PI)), uniform(rng, (0.0, 2.0 * PI)));
    let (sin, cos) = theta.sin_cos();
    let mut mask = Image::zeros(s, s);
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let rho = (u * u + v * v).sqrt();
            let weight = if spec.diffuse_edge_softness > 0.0 {
                1.0 / (1.0 + ((rho - 1.0) / spec.diffuse_edge_softness).exp())
            } else if rho <= 1.0 {
                1.0
            } else {
                0.0
            };
            if weight > 1e-3 {
                let texture = (2.0 * PI * x as f64 / period + px).sin() * (2.0 * PI * y as f64 / period + py).sin();
                let value = img.get(x, y) + weight * spec.diffuse_contrast * (1.0 + 0.5 * texture);
                img.set(x, y, value);
            }
            if rho <= 1.0 {
                mask.set(x, y, 1.0);
            }
        }
    }
    let boxes = tight_box(&mask, class).into_iter().collect();
    (mask, boxes)
}

fn sample(spec: &SyntheticSpec, split: Split, index: usize) -> Result<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream_base() + index as u64);
    let s = spec.image_size;
    let sf = s as f64;

    let labels: Vec<u8> = spec
        .classes
        .iter()
        .map(|_| rng.random_bool(spec.label_prior) as u8)
        .collect();

    let base = uniform(&mut rng, spec.background_range);
    let angle = uniform(&mut rng, (0.0, 2.0 * PI));
    let (gs, gc) = angle.sin_cos();
    let mut image = Image::zeros(s, s);
    for y in 0..s {
        for x in 0..s {
            let t = ((x as f64 + 0.5) / sf - 0.5) * gc + ((y as f64 + 0.5) / sf - 0.5) * gs;
            image.set(x, y, base + spec.gradient_amplitude * t);
        }
    }

    let mut masks = Vec::with_capacity(spec.classes.len());
    let mut boxes = Vec::new();
    for (k, (&class, &y)) in spec.classes.iter().zip(&labels).enumerate() {
        if y == 0 {
            masks.push(None);
            continue;
        }
        let (mask, b) = match class {
            SyntheticClass::Focal => plant_focal(spec, &mut rng, &mut image, k),
            SyntheticClass::Diffuse => plant_diffuse(spec, &mut rng, &mut image, k),
        };
        masks.push(Some(mask));
        boxes.extend(b);
    }

    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid("synthetic", e.to_string()))?;
        for v in image.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(LabeledSample {
        name: format!("{}_{index:05}", split.name()),
        image,
        labels,
        masks,
        boxes,
    })
}

/// `n` samples of one split. Sample `i` depends only on `(seed, split, i)`.
pub fn generate_split(spec: &SyntheticSpec, split: Split, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("generate", "n must be >= 1"));
    }
    let samples = (0..n).map(|i| sample(spec, split, i)).collect::<Result<_>>()?;
    Ok(Dataset {
        class_names: spec.class_names(),
        samples,
    })
}

/// `n` training-split samples.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Dataset> {
    generate_split(spec, Split::Train, n)
}
