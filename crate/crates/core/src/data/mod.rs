//! Synthetic infrared scenes with exact masks, and image/mask file I/O.

mod io;
mod synth;

pub use io::{load_gray, load_pair, read_manifest, save_gray, save_sample, write_manifest, ManifestEntry, Split};
pub use synth::{generate, make_dataset, random_spec, Blob, Dataset, SceneSpec, Target, TARGET_COUNT_WEIGHTS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W` in `[0, 1]`; the grayscale plane replicated.
    pub image: Tensor<f32>,
    /// `1×H×W` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub spec: Option<SceneSpec>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    /// Builds a sample from a single grayscale plane.
    pub fn from_gray(gray: &Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (_, h, w) = gray.dims3()?;
        mask.expect_shape(&[1, h, w])?;
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(gray.data());
        }
        Ok(Sample {
            image: Tensor::new(&[3, h, w], data)?,
            mask,
            spec: None,
        })
    }

    pub fn gray(&self) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        Tensor::new(&[1, h, w], self.image.data()[..h * w].to_vec()).expect("plane size")
    }
}

/// Stacks images and masks into `N×3×H×W` and `N×1×H×W` batches.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor<f32>> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
