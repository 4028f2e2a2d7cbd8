//! Patch discriminator.

use candle_core::Tensor;

use crate::error::{ensure, Result};
use crate::nn::{ops, Conv2d, ParamStore};

const SLOPE: f64 = 0.2;

/// Two stride-2 convolutions followed by two stride-1 convolutions; the output
/// is a raw `(N, 1, R/4, R/4)` score map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    resolution: usize,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, resolution: usize) -> Result<Self> {
        ensure!(resolution % 4 == 0 && resolution >= 8, "discriminator resolution {resolution} unsupported");
        ps.scoped("disc", |ps| {
            Ok(Self {
                resolution,
                convs: vec![
                    Conv2d::new(ps, "c0", 3, 32, 4, 2, 1)?,
                    Conv2d::new(ps, "c1", 32, 64, 4, 2, 1)?,
                    Conv2d::new(ps, "c2", 64, 64, 3, 1, 1)?,
                    Conv2d::with_gain(ps, "c3", 64, 1, 3, 1, 1, 1.0)?,
                ],
            })
        })
    }

    /// Side length of the score map.
    pub fn patches(&self) -> usize {
        self.resolution / 4
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        let r = self.resolution;
        ensure!(c == 3 && h == r && w == r, "discriminator expects 3x{r}x{r}, got {c}x{h}x{w}");
        let mut x = image.affine(2.0, -1.0)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < last {
                x = ops::leaky_relu(&x, SLOPE)?;
            }
        }
        Ok(x)
    }
}
