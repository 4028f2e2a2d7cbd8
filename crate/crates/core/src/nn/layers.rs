use candle_core::Tensor;

use super::{Init, ParamStore};
use crate::error::Result;

/// Square-kernel 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights (gain suited to ReLU), zero bias.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_gain(ps, name, c_in, c_out, kernel, stride, padding, std::f64::consts::SQRT_2)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let init = if gain == 0.0 {
            Init::Const(0.0)
        } else {
            Init::Uniform { fan_in, gain }
        };
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.param("weight", &[c_out, c_in, kernel, kernel], init)?,
                bias: ps.param("bias", &[c_out], Init::Const(0.0))?,
                stride,
                padding,
            })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let b = self.bias.reshape((1, self.bias.dims()[0], 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Fully connected layer over `(N, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64) -> Result<Self> {
        Self::with_bias(ps, name, d_in, d_out, gain, Init::Const(0.0))
    }

    pub fn with_bias(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        bias: Init,
    ) -> Result<Self> {
        let init = if gain == 0.0 {
            Init::Const(0.0)
        } else {
            Init::Uniform { fan_in: d_in, gain }
        };
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.param("weight", &[d_out, d_in], init)?,
                bias: ps.param("bias", &[d_out], bias)?,
            })
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// `x + conv(relu(conv(x)))` at constant width, followed by ReLU.
#[derive(Debug, Clone)]
pub struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                c1: Conv2d::new(ps, "c1", channels, channels, 3, 1, 1)?,
                c2: Conv2d::with_gain(ps, "c2", channels, channels, 3, 1, 1, 0.5)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c2.forward(&self.c1.forward(x)?.relu()?)?;
        Ok((x + h)?.relu()?)
    }
}
