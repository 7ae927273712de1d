use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageGray;
use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// Stream namespace for per-image generator draws; image index is added so
/// the first n images of a seed are the same for every dataset size.
const DATA_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Smooth random gradients plus Gaussian blobs; the broad pretraining
    /// stand-in.
    BaseTextures,
    /// Dark field with two bright mirrored ellipses, rib-like arcs and a
    /// central wedge; the structured target domain.
    MorphLungs,
}

impl Domain {
    pub fn descriptor(self) -> &'static str {
        match self {
            Domain::BaseTextures => "base_textures",
            Domain::MorphLungs => "morph_lungs",
        }
    }

    pub fn from_descriptor(s: &str) -> Option<Self> {
        match s {
            "base_textures" => Some(Domain::BaseTextures),
            "morph_lungs" => Some(Domain::MorphLungs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorParams {
    pub domain: Domain,
    pub n: usize,
    pub seed: u64,
    pub resolution: usize,
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
        }
        if ![64, 128, 256].contains(&self.resolution) {
            return Err(Error::InvalidArgument(format!(
                "resolution must be one of 64/128/256, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Produces `n` labelled images. Image i depends only on (seed, i), so
/// generation order and dataset size never change earlier images.
pub fn generate(params: &GeneratorParams) -> Result<Vec<(ImageGray, u32)>> {
    params.validate()?;
    let mut out = Vec::with_capacity(params.n);
    for i in 0..params.n {
        let mut rng = seeded_rng(params.seed, DATA_STREAM_BASE + i as u64);
        let item = match params.domain {
            Domain::BaseTextures => texture_image(&mut rng, params.resolution)?,
            Domain::MorphLungs => lung_image(&mut rng, params.resolution)?,
        };
        out.push(item);
    }
    Ok(out)
}

fn texture_image(rng: &mut ChaCha8Rng, res: usize) -> Result<(ImageGray, u32)> {
    let g0: f64 = rng.gen_range(-0.5..0.5);
    let gx: f64 = rng.gen_range(-1.0..1.0);
    let gy: f64 = rng.gen_range(-1.0..1.0);
    let blob_count: usize = rng.gen_range(2..=4);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..blob_count)
        .map(|_| {
            (
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.08..0.25),
                rng.gen_range(-0.8..0.8),
            )
        })
        .collect();
    let mut pixels = Vec::with_capacity(res * res);
    for yi in 0..res {
        let y = yi as f64 / res as f64;
        for xi in 0..res {
            let x = xi as f64 / res as f64;
            let mut v = g0 + gx * (x - 0.5) + gy * (y - 0.5);
            for &(cx, cy, s, amp) in &blobs {
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                v += amp * (-d2 / (2.0 * s * s)).exp();
            }
            pixels.push(v);
        }
    }
    Ok((ImageGray::new(res, res, pixels)?, (blob_count - 2) as u32))
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lung_image(rng: &mut ChaCha8Rng, res: usize) -> Result<(ImageGray, u32)> {
    // Shared geometry keeps the two ellipses mirror images of each other.
    let jx: f64 = rng.gen_range(-0.02..0.02);
    let jy: f64 = rng.gen_range(-0.02..0.02);
    let semi_a: f64 = rng.gen_range(0.10..0.16);
    let semi_b: f64 = rng.gen_range(0.18..0.26);
    let left = (0.32 + jx, 0.55 + jy);
    let right = (0.68 - jx, 0.55 + jy);

    let rib_count: usize = rng.gen_range(4..=6);
    let ribs: Vec<(f64, f64, f64)> = (0..rib_count)
        .map(|i| {
            let base_y = 0.32 + 0.48 * i as f64 / (rib_count - 1) as f64;
            (
                base_y + rng.gen_range(-0.02..0.02),
                rng.gen_range(0.05..0.12),
                rng.gen_range(0.008..0.014),
            )
        })
        .collect();

    let wedge_top: f64 = 0.22 + rng.gen_range(-0.02..0.02);
    let wedge_halfwidth: f64 = 0.045 + rng.gen_range(-0.008..0.008);

    let mut pixels = Vec::with_capacity(res * res);
    for yi in 0..res {
        let y = yi as f64 / res as f64;
        for xi in 0..res {
            let x = xi as f64 / res as f64;
            let mut v = -0.85;
            for &(cx, cy) in &[left, right] {
                let dx = (x - cx) / semi_a;
                let dy = (y - cy) / semi_b;
                let d = dx * dx + dy * dy;
                v += 1.30 * logistic((1.0 - d) / 0.12);
            }
            // central bright wedge widening toward the bottom
            if y > wedge_top {
                let hw = wedge_halfwidth + 0.10 * (y - wedge_top);
                let off = (x - 0.5).abs();
                if off < hw {
                    v += 0.55 * (1.0 - off / hw);
                }
            }
            // low-contrast horizontal arcs crossing the field
            for &(base_y, curve, thick) in &ribs {
                let arc_y = base_y + curve * (x - 0.5) * (x - 0.5);
                let d = (y - arc_y) / thick;
                v += 0.12 * (-d * d).exp();
            }
            pixels.push(v);
        }
    }
    // additive Gaussian pixel noise
    for p in &mut pixels {
        *p += 0.03 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    Ok((ImageGray::new(res, res, pixels)?, 0))
}

/// Mean squared difference between an image and its horizontal mirror over
/// the central band that holds the ellipses.
pub fn bilateral_symmetry_score(img: &ImageGray) -> f64 {
    let (w, h) = (img.width(), img.height());
    let y0 = (0.25 * h as f64) as usize;
    let y1 = (0.85 * h as f64) as usize;
    let mut total = 0.0;
    let mut count = 0.0;
    for y in y0..y1 {
        for x in 0..w {
            let a = img.pixels()[y * w + x];
            let b = img.pixels()[y * w + (w - 1 - x)];
            total += (a - b) * (a - b);
            count += 1.0;
        }
    }
    total / count
}
