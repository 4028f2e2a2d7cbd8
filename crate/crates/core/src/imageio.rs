//! Planar float images and 8-bit PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Error, Result};

/// A planar (channel-major) float image. Values are nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == channels * height * width,
            "image buffer has {} values, expected {}x{}x{}",
            data.len(),
            channels,
            height,
            width
        );
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `(1, C, H, W)` tensor of the requested dtype.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            &Device::Cpu,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Builds an image from a `(C, H, W)` or `(1, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => {
                ensure!(t.dim(0)? == 1, "expected a single image, got batch {}", t.dim(0)?);
                t.squeeze(0)?
            }
            3 => t.clone(),
            r => return Err(Error::Validation(format!("expected rank 3 or 4 image, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec(c, h, w, data)
    }

    pub fn stack(images: &[&Image], dtype: DType) -> Result<Tensor> {
        ensure!(!images.is_empty(), "cannot stack zero images");
        let ts = images
            .iter()
            .map(|im| im.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image as an 8-bit PNG, mapping `[0, 1]` linearly to `[0, 255]`.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Validation(format!("cannot write {c}-channel image as png"))),
    };
    let n = image.height * image.width;
    let mut bytes = Vec::with_capacity(n * image.channels);
    for i in 0..n {
        for c in 0..image.channels {
            bytes.push(to_u8(image.data[c * n + i]));
        }
    }
    write_png_bytes(path, image.width, image.height, color, &bytes)
}

/// Writes raw 8-bit labels (one byte per pixel) as a grayscale PNG.
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    ensure!(labels.len() == width * height, "label map size mismatch");
    write_png_bytes(path, width, height, png::ColorType::Grayscale, labels)
}

fn write_png_bytes(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

fn read_png_bytes(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => 3,
    };
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Reads a PNG as a 3-channel float image in `[0, 1]`. Gray is replicated, alpha dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let (w, h, channels, bytes) = read_png_bytes(path)?;
    let n = w * h;
    let mut img = Image::zeros(3, h, w);
    for i in 0..n {
        for c in 0..3 {
            let src = match channels {
                1 | 2 => bytes[i * channels],
                _ => bytes[i * channels + c],
            };
            img.data[c * n + i] = src as f32 / 255.0;
        }
    }
    Ok(img)
}

/// Reads a grayscale label PNG back into raw bytes.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, channels, bytes) = read_png_bytes(path)?;
    ensure!(channels == 1, "label png {} is not grayscale", path.display());
    Ok((w, h, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(3, 5, 7);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<u8> = (0..12).map(|i| (i % 4) as u8).collect();
        let p = dir.path().join("l.png");
        write_label_png(&p, 4, 3, &labels).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), (4, 3, labels));
    }
}
