//! Random zoom / translation / rotation with bilinear resampling.

use rand::Rng;

use super::Image;
use crate::error::{Error, Result};

/// Maximum translation, in pixels, at the reference resolution.
pub const TRANSLATION_PX: f64 = 50.0;
pub const TRANSLATION_REF: f64 = 512.0;

/// Zoom factor range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZoomRange {
    /// `[0.25, 0.75]`: only ever shrinks the content.
    Out,
    /// `[0.75, 1.25]`: shrinks or enlarges around 1.
    Symmetric,
}

impl ZoomRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ZoomRange::Out => (0.25, 0.75),
            ZoomRange::Symmetric => (0.75, 1.25),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ZoomRange::Out => "out",
            ZoomRange::Symmetric => "symmetric",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "out" => Ok(ZoomRange::Out),
            "symmetric" => Ok(ZoomRange::Symmetric),
            other => Err(Error::invalid(
                "zoom_range",
                format!("`{other}` (expected out or symmetric)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub zoom: f64,
    /// Translation in pixels of the image being augmented.
    pub tx: f64,
    pub ty: f64,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            zoom: 1.0,
            tx: 0.0,
            ty: 0.0,
            rotation_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmenter {
    pub zoom: (f64, f64),
    /// Translation bound as a fraction of the image side.
    pub translation_frac: f64,
    pub rotation_deg: f64,
}

impl Default for Augmenter {
    fn default() -> Self {
        Self::new(ZoomRange::Out)
    }
}

impl Augmenter {
    pub fn new(zoom: ZoomRange) -> Self {
        Augmenter {
            zoom: zoom.bounds(),
            translation_frac: TRANSLATION_PX / TRANSLATION_REF,
            rotation_deg: 25.0,
        }
    }

    /// Draws parameters for a `side`-pixel image, each uniform on its range.
    pub fn sample<R: Rng + ?Sized>(&self, side: usize, rng: &mut R) -> AugmentParams {
        let t = self.translation_frac * side as f64;
        AugmentParams {
            zoom: rng.random_range(self.zoom.0..=self.zoom.1),
            tx: rng.random_range(-t..=t),
            ty: rng.random_range(-t..=t),
            rotation_deg: rng.random_range(-self.rotation_deg..=self.rotation_deg),
        }
    }

    pub fn augment<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Image {
        let p = self.sample(image.width(), rng);
        apply(image, &p)
    }
}

/// Resamples `image` under `params` about the image centre. Pixels that map
/// outside the source are zero; the result is clipped to `[0, 1]`.
pub fn apply(image: &Image, params: &AugmentParams) -> Image {
    let (w, h) = (image.width(), image.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            // inverse map: undo translation, rotation, then zoom
            let qx = x as f64 - cx - params.tx;
            let qy = y as f64 - cy - params.ty;
            let rx = cos * qx + sin * qy;
            let ry = -sin * qx + cos * qy;
            let v = bilinear(image, rx / params.zoom + cx, ry / params.zoom + cy);
            out.set(x, y, v.clamp(0.0, 1.0));
        }
    }
    out
}

fn bilinear(image: &Image, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let tap = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= image.width() as f64 || y >= image.height() as f64 {
            0.0
        } else {
            image.get(x as usize, y as usize)
        }
    };
    let mut v = 0.0;
    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            let wt = wx * wy;
            if wt != 0.0 {
                v += wt * tap(x0 + dx, y0 + dy);
            }
        }
    }
    v
}
