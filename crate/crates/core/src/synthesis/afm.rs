//! Attention-based fusion of the warped priors.

use candle_core::Tensor;

use super::{PriorBundle, SpatialTransformer};
use crate::error::{ensure, Result};
use crate::face_model::N_LABELS;
use crate::nn::{ops, Conv2d, ParamStore};

const ATTENTION_HIDDEN: usize = 16;

/// `A * f_fg + (1 - A) * f_bg`, with `A` broadcast over channels.
pub fn fuse(f_fg: &Tensor, f_bg: &Tensor, attention: &Tensor) -> Result<Tensor> {
    ensure!(f_fg.dims() == f_bg.dims(), "foreground {:?} and background {:?} differ", f_fg.dims(), f_bg.dims());
    let one_minus = attention.affine(-1.0, 1.0)?;
    Ok((f_fg.broadcast_mul(attention)? + f_bg.broadcast_mul(&one_minus)?)?)
}

/// Intermediate maps of one fusion pass.
#[derive(Debug, Clone)]
pub struct AfmOutput {
    pub fused: Tensor,
    pub f_fg: Tensor,
    pub f_bg: Tensor,
    /// `(N, 1, h, w)`, in `[0, 1]`.
    pub attention: Tensor,
}

/// One transformer per prior, foreground and background feature convolutions,
/// and a two-layer attention head over all aligned priors.
#[derive(Debug, Clone)]
pub struct FusionModule {
    stn_image: SpatialTransformer,
    stn_parsing: SpatialTransformer,
    stn_proxy: SpatialTransformer,
    bg: Conv2d,
    fg: Conv2d,
    att0: Conv2d,
    att1: Conv2d,
    width: usize,
}

impl FusionModule {
    pub fn new(ps: &mut ParamStore, width: usize) -> Result<Self> {
        ensure!(width >= 1, "fusion width must be at least 1");
        ps.scoped("afm", |ps| {
            Ok(Self {
                stn_image: SpatialTransformer::new(ps, "stn_image", 3)?,
                stn_parsing: SpatialTransformer::new(ps, "stn_parsing", N_LABELS)?,
                stn_proxy: SpatialTransformer::new(ps, "stn_proxy", 3)?,
                bg: Conv2d::with_gain(ps, "bg", 3, width, 3, 1, 1, 1.0)?,
                fg: Conv2d::with_gain(ps, "fg", 6, width, 3, 1, 1, 1.0)?,
                att0: Conv2d::new(ps, "att0", 3 + N_LABELS + 3, ATTENTION_HIDDEN, 3, 1, 1)?,
                att1: Conv2d::with_gain(ps, "att1", ATTENTION_HIDDEN, 1, 3, 1, 1, 1.0)?,
                width,
            })
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Runs the module; `attention_override` replaces the learned `A` by a constant.
    pub fn forward_with(&self, priors: &PriorBundle, attention_override: Option<f64>) -> Result<AfmOutput> {
        priors.validate()?;
        let image = self.stn_image.forward(&priors.image)?;
        let parsing = self.stn_parsing.forward(&priors.parsing)?;
        let proxy = self.stn_proxy.forward(&priors.proxy)?;
        let f_bg = self.bg.forward(&image)?;
        let f_fg = self.fg.forward(&Tensor::cat(&[&image, &proxy], 1)?)?;
        let attention = match attention_override {
            Some(a) => {
                let (n, _, h, w) = f_fg.dims4()?;
                (Tensor::ones((n, 1, h, w), f_fg.dtype(), f_fg.device())? * a)?
            }
            None => {
                let all = Tensor::cat(&[&image, &parsing, &proxy], 1)?;
                ops::sigmoid(&self.att1.forward(&self.att0.forward(&all)?.relu()?)?)?
            }
        };
        Ok(AfmOutput {
            fused: fuse(&f_fg, &f_bg, &attention)?,
            f_fg,
            f_bg,
            attention,
        })
    }

    pub fn forward(&self, priors: &PriorBundle) -> Result<Tensor> {
        Ok(self.forward_with(priors, None)?.fused)
    }
}
