use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::{ProxyRender, BACKGROUND};
use crate::imageio::Image;

/// Landmark heatmap standard deviation at 64x64; scales linearly with resolution.
pub const HEATMAP_SIGMA_64: f64 = 2.0;

/// An aligned image, parsing map and landmark set at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBundle {
    pub image: Image,
    pub parsing: Vec<u8>,
    pub landmarks: Vec<[f32; 2]>,
}

impl SpatialBundle {
    pub fn resolution(&self) -> usize {
        self.image.height
    }

    pub fn heatmaps(&self) -> Image {
        landmark_heatmaps(&self.landmarks, self.resolution())
    }
}

/// A smooth procedural background: a two-color linear gradient plus a few
/// low-frequency sinusoids.
pub fn background(seed: u64, resolution: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb6_c0_ff_ee);
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gs, gc) = angle.sin_cos();
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            )
        })
        .collect();
    let mut img = Image::zeros(3, resolution, resolution);
    let r = resolution as f64;
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 + 0.5) / r;
            let v = (y as f64 + 0.5) / r;
            let t = (0.5 + 0.5 * ((u - 0.5) * gc + (v - 0.5) * gs) * std::f64::consts::SQRT_2).clamp(0.0, 1.0);
            for c in 0..3 {
                let mut val = c0[c] + (c1[c] - c0[c]) * t;
                for (fx, fy, ph, amp, col) in &waves {
                    val += amp * col[c] * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
                }
                img.set(c, y, x, val.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Renders 68 Gaussian heatmaps (peak 1) centered on the landmarks.
pub fn landmark_heatmaps(landmarks: &[[f32; 2]], resolution: usize) -> Image {
    let sigma = HEATMAP_SIGMA_64 * resolution as f64 / 64.0;
    let radius = (3.0 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = Image::zeros(landmarks.len(), resolution, resolution);
    for (k, p) in landmarks.iter().enumerate() {
        // pixel centers sit at integer + 0.5
        let (cx, cy) = (p[0] as f64 - 0.5, p[1] as f64 - 0.5);
        let (ix, iy) = (cx.round() as isize, cy.round() as isize);
        for y in (iy - radius).max(0)..=(iy + radius).min(resolution as isize - 1) {
            for x in (ix - radius).max(0)..=(ix + radius).min(resolution as isize - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                out.set(k, y as usize, x as usize, (-d2 * inv).exp() as f32);
            }
        }
    }
    out
}

/// Composites the proxy over a seeded background. The parsing map equals the
/// proxy's region map (background already labelled 0).
pub fn compose_scene(proxy: &ProxyRender, background_seed: u64) -> SpatialBundle {
    let res = proxy.resolution;
    let n = res * res;
    let mut image = background(background_seed, res);
    for i in 0..n {
        if proxy.mask[i] == 1 {
            for c in 0..3 {
                image.data[c * n + i] = proxy.image.data[c * n + i];
            }
        }
    }
    let parsing = proxy
        .region_map
        .iter()
        .zip(&proxy.mask)
        .map(|(&r, &m)| if m == 1 { r } else { BACKGROUND })
        .collect();
    SpatialBundle {
        image,
        parsing,
        landmarks: proxy.landmarks.clone(),
    }
}
