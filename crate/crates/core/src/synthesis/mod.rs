//! Prior-guided synthesis: spatial transformers, attention-based fusion of the
//! warped priors, the generator, and the patch discriminator.

mod afm;
mod discriminator;
mod generator;
mod stn;

use candle_core::{DType, Tensor};

pub use afm::{fuse, AfmOutput, FusionModule};
pub use discriminator::Discriminator;
pub use generator::{Generator, GeneratorConfig};
pub use stn::{affine_grid_sample, SpatialTransformer, IDENTITY_AFFINE};

use crate::correspondence::{CorrespondenceField, Resample};
use crate::error::{ensure, Result};
use crate::face_model::N_LABELS;

/// Source representations warped into the target layout, all at the
/// correspondence resolution.
#[derive(Debug, Clone)]
pub struct PriorBundle {
    /// `I_s^warp`, `(N, 3, h, w)`.
    pub image: Tensor,
    /// `M_s^warp`, `(N, N_LABELS, h, w)`; a warp of one-hot labels.
    pub parsing: Tensor,
    /// `P_s^warp`, `(N, 3, h, w)`.
    pub proxy: Tensor,
}

impl PriorBundle {
    /// Warps full-resolution source maps with `field`.
    pub fn warp(field: &CorrespondenceField, image: &Tensor, parsing_one_hot: &Tensor, proxy: &Tensor) -> Result<Self> {
        Ok(Self {
            image: field.warp(image, Resample::Area)?,
            parsing: field.warp(parsing_one_hot, Resample::Nearest)?,
            proxy: field.warp(proxy, Resample::Area)?,
        })
    }

    pub fn resolution(&self) -> usize {
        self.image.dims()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let (n, c, h, w) = self.image.dims4()?;
        ensure!(c == 3 && h == w, "warped image must be 3xhxh, got {c}x{h}x{w}");
        ensure!(self.parsing.dims() == [n, N_LABELS, h, w], "warped parsing map has shape {:?}", self.parsing.dims());
        ensure!(self.proxy.dims() == [n, 3, h, w], "warped proxy has shape {:?}", self.proxy.dims());
        let sums: Vec<f64> = self.parsing.sum(1)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let worst = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        ensure!(worst <= 1e-5, "warped parsing labels do not sum to one (off by {worst:e})");
        Ok(())
    }

    /// Channel concatenation `[image, parsing, proxy]`.
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.image, &self.parsing, &self.proxy], 1)?)
    }
}
