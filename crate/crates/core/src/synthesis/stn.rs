//! Affine spatial transformer with a differentiable bilinear sampler.

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Result};
use crate::nn::{Conv2d, Init, Linear, ParamStore};

const LOC_CHANNELS: [usize; 2] = [8, 16];

/// Identity affine parameters `[a11, a12, tx, a21, a22, ty]`.
pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Samples `x` (N, C, H, W) on the grid `theta · [x, y, 1]`, where output
/// pixel centres sit at normalized coordinates in `(-1, 1)` (half-pixel
/// convention). Samples that fall outside the image read zeros.
///
/// Gradients flow into both `x` and `theta` (N, 2, 3).
pub fn affine_grid_sample(x: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    ensure!(theta.dims() == [n, 2, 3], "affine parameters must be {n}x2x3, got {:?}", theta.dims());
    let dtype = x.dtype();
    let hw = h * w;

    let mut base = Vec::with_capacity(hw * 3);
    for i in 0..h {
        for j in 0..w {
            base.push((2 * j + 1) as f64 / w as f64 - 1.0);
            base.push((2 * i + 1) as f64 / h as f64 - 1.0);
            base.push(1.0);
        }
    }
    let base = Tensor::from_vec(base, (1, hw, 3), &Device::Cpu)?
        .to_dtype(dtype)?
        .broadcast_as((n, hw, 3))?
        .contiguous()?;
    let src = base.matmul(&theta.transpose(1, 2)?.contiguous()?)?;
    let px = src.narrow(2, 0, 1)?.squeeze(2)?.affine(w as f64 / 2.0, (w as f64 - 1.0) / 2.0)?;
    let py = src.narrow(2, 1, 1)?.squeeze(2)?.affine(h as f64 / 2.0, (h as f64 - 1.0) / 2.0)?;

    let pxv: Vec<Vec<f64>> = px.to_dtype(DType::F64)?.to_vec2()?;
    let pyv: Vec<Vec<f64>> = py.to_dtype(DType::F64)?.to_vec2()?;
    let mut x0 = vec![0f64; n * hw];
    let mut y0 = vec![0f64; n * hw];
    // corners in the order (y0,x0), (y0,x1), (y1,x0), (y1,x1)
    let mut idx = vec![vec![0u32; n * hw]; 4];
    let mut valid = vec![vec![0f64; n * hw]; 4];
    for b in 0..n {
        for p in 0..hw {
            let fx = pxv[b][p].floor();
            let fy = pyv[b][p].floor();
            let k = b * hw + p;
            x0[k] = fx;
            y0[k] = fy;
            for (corner, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let (yy, xx) = (fy + dy as f64, fx + dx as f64);
                if yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 {
                    idx[corner][k] = (yy as usize * w + xx as usize) as u32;
                    valid[corner][k] = 1.0;
                }
            }
        }
    }
    let consts = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (n, hw), &Device::Cpu)?.to_dtype(dtype)?) };
    let wx1 = (&px - consts(x0)?)?;
    let wy1 = (&py - consts(y0)?)?;
    let wx0 = wx1.affine(-1.0, 1.0)?;
    let wy0 = wy1.affine(-1.0, 1.0)?;
    let weights = [(&wy0, &wx0), (&wy0, &wx1), (&wy1, &wx0), (&wy1, &wx1)];

    let flat = x.reshape((n, c, hw))?;
    let mut out: Option<Tensor> = None;
    for (corner, (wy, wx)) in weights.into_iter().enumerate() {
        let wgt = ((wy * wx)? * consts(std::mem::take(&mut valid[corner]))?)?;
        let ix = Tensor::from_vec(std::mem::take(&mut idx[corner]), (n, 1, hw), &Device::Cpu)?
            .broadcast_as((n, c, hw))?
            .contiguous()?;
        let term = flat.gather(&ix, 2)?.broadcast_mul(&wgt.unsqueeze(1)?)?;
        out = Some(match out {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(out.expect("four corners").reshape((n, c, h, w))?)
}

/// Localization network regressing an affine transform, followed by resampling.
///
/// The regression head starts at zero weights with the identity as its bias,
/// so a fresh transformer passes its input through unchanged.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl SpatialTransformer {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            let convs = vec![
                Conv2d::new(ps, "loc0", channels, LOC_CHANNELS[0], 3, 2, 1)?,
                Conv2d::new(ps, "loc1", LOC_CHANNELS[0], LOC_CHANNELS[1], 3, 2, 1)?,
            ];
            let head = Linear::with_bias(ps, "head", LOC_CHANNELS[1], 6, 0.0, Init::Values(IDENTITY_AFFINE.to_vec()))?;
            Ok(Self { convs, head })
        })
    }

    /// Predicted affine parameters, `(N, 2, 3)`.
    pub fn affine(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        Ok(self.head.forward(&pooled)?.reshape((x.dims()[0], 2, 3))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        affine_grid_sample(x, &self.affine(x)?)
    }
}
