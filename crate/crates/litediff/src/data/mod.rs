//! Procedural synthetic datasets, grayscale image I/O and dataset splits.
//!
//! Two domains stand in for a broad pretraining corpus and a structured
//! target domain: `BaseTextures` (smooth gradients plus soft blobs) and
//! `MorphLungs` (bilaterally symmetric bright ellipses, rib-like arcs and a
//! central wedge on a dark field). All geometry is seeded; identical
//! parameters reproduce identical bytes.

mod generate;
mod pgm;
mod split;

pub use generate::{bilateral_symmetry_score, generate, Domain, GeneratorParams};
pub use pgm::{load_pgm, save_pgm};
pub use split::split;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Grayscale image with pixels in [-1, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ImageGray {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        let pixels = pixels.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn from_tensor_plane(t: &Tensor, index: usize) -> Self {
        let shape = t.shape();
        let (h, w) = (shape[2], shape[3]);
        let per = h * w;
        Self {
            width: w,
            height: h,
            pixels: t.data()[index * per..(index + 1) * per].to_vec(),
        }
    }

    /// (1, 1, H, W) tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone()).expect("image shape")
    }
}

/// Stacks a labelled image list into an (N,1,H,W) tensor plus class vector.
pub fn dataset_tensor(items: &[(ImageGray, u32)]) -> Result<(Tensor, Vec<u32>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let (h, w) = (items[0].0.height, items[0].0.width);
    let mut data = Vec::with_capacity(items.len() * h * w);
    let mut classes = Vec::with_capacity(items.len());
    for (img, class) in items {
        if img.height != h || img.width != w {
            return Err(Error::InvalidArgument(
                "mixed resolutions in one dataset".into(),
            ));
        }
        data.extend_from_slice(&img.pixels);
        classes.push(*class);
    }
    Ok((Tensor::new(&[items.len(), 1, h, w], data)?, classes))
}
