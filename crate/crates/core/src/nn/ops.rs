//! Differentiable tensor helpers with gradients that are safe to backpropagate.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

/// Logistic sigmoid written through `tanh`, which never overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Softmax over the last dimension with the (detached) row maximum subtracted.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `max(x, slope * x)` expressed without a comparison, so the gradient is exact.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()?.affine(1.0 - slope, 0.0)? + x.affine(slope, 0.0)?)?)
}

/// `ln(1 + e^x)` computed stably as `relu(x) + ln(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let neg_abs = x.abs()?.neg()?;
    Ok((x.relu()? + (neg_abs.exp()? + 1.0)?.log()?)?)
}

/// Per-sample, per-channel normalization over the spatial dims of an NCHW tensor.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let out = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

/// Normalizes each group of `c / groups` channels over channels and space, per sample.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, groups, (c / groups) * h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let out = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

/// Nearest-neighbour upsampling by an integer factor, built from broadcasts so
/// the backward pass accumulates every copy.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))?)
}

/// Area (box) downsampling by an integer factor.
pub fn downsample_area(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    Ok(x.avg_pool2d(factor)?)
}

/// Nearest downsampling: output pixel `i` samples input pixel `f i + f / 2`.
pub fn downsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let rows: Vec<u32> = (0..h / factor).map(|i| (i * factor + factor / 2) as u32).collect();
    let cols: Vec<u32> = (0..w / factor).map(|i| (i * factor + factor / 2) as u32).collect();
    let rows = Tensor::new(rows.as_slice(), x.device())?;
    let cols = Tensor::new(cols.as_slice(), x.device())?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Divides by `norm + eps` along `dim`.
pub fn l2_normalize(x: &Tensor, dim: usize, eps: f64) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(dim)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + eps)?)?)
}

/// Mean of all elements as a scalar tensor.
pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_all()?)
}

/// One-hot planes `(N, K, H, W)` from per-pixel labels.
pub fn one_hot_maps(labels: &[Vec<u8>], k: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let n = labels.len();
    let mut data = vec![0f32; n * k * h * w];
    for (b, lab) in labels.iter().enumerate() {
        for (i, &l) in lab.iter().enumerate() {
            let l = l as usize;
            if l < k {
                data[(b * k + l) * h * w + i] = 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, (n, k, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Scalar value of a single-element tensor.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
