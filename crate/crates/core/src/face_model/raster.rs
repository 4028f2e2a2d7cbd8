//! Weak-perspective z-buffer rasterization of the shaded face mesh.

use super::basis::{FaceBasis, Region};
use super::coefficients::CoefficientSet;
use super::mesh::synthesize_mesh;
use crate::error::{ensure, Result};
use crate::imageio::Image;

/// Parsing label of pixels not covered by the face.
pub const BACKGROUND: u8 = 0;
/// Number of parsing labels (background, skin, eye, mouth).
pub const N_LABELS: usize = 4;

pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [64, 128, 256];

/// A rasterized face proxy with its auxiliary maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyRender {
    pub resolution: usize,
    /// RGB in `[0, 1]`, zero outside the mask.
    pub image: Image,
    /// 1 where the face covers the pixel.
    pub mask: Vec<u8>,
    /// Per-pixel [`Region`] label, [`BACKGROUND`] outside the mask.
    pub region_map: Vec<u8>,
    /// Projected landmark positions in pixel units (x right, y down).
    pub landmarks: Vec<[f32; 2]>,
    /// Inside the image and not occluded.
    pub landmark_visible: Vec<bool>,
    /// Camera-space depth of the visible surface (larger is closer), 0 outside the mask.
    pub depth: Vec<f32>,
}

impl ProxyRender {
    pub fn coverage(&self) -> f64 {
        self.mask.iter().map(|&m| m as f64).sum::<f64>() / self.mask.len() as f64
    }

    /// Checks the structural invariants of a render.
    pub fn validate(&self) -> Result<()> {
        let n = self.resolution * self.resolution;
        ensure!(self.mask.len() == n && self.region_map.len() == n, "map size mismatch");
        for i in 0..n {
            ensure!(
                (self.mask[i] == 0) == (self.region_map[i] == BACKGROUND),
                "region map disagrees with mask at pixel {i}"
            );
            if self.mask[i] == 0 {
                ensure!(
                    (0..3).all(|c| self.image.data[c * n + i] == 0.0),
                    "non-zero color outside mask at pixel {i}"
                );
            }
        }
        ensure!(
            self.image.data.iter().all(|v| (0.0..=1.0).contains(v)),
            "proxy colors outside [0, 1]"
        );
        let r = self.resolution as f32;
        for (p, &vis) in self.landmarks.iter().zip(&self.landmark_visible) {
            if vis {
                ensure!(
                    p[0] >= 0.0 && p[0] < r && p[1] >= 0.0 && p[1] < r,
                    "visible landmark {p:?} outside image"
                );
            }
        }
        Ok(())
    }
}

/// Projects camera-space points to pixels: `u = (s x + tx + 1) W / 2`, `v = (1 - (s y + ty)) H / 2`.
pub fn project(c: &CoefficientSet, p: [f64; 3], resolution: usize) -> [f64; 3] {
    let half = resolution as f64 / 2.0;
    let s = c.alpha.scale;
    let [tx, ty] = c.alpha.translation;
    [
        (s * p[0] + tx + 1.0) * half,
        (1.0 - (s * p[1] + ty)) * half,
        s * p[2],
    ]
}

#[inline]
fn edge(a: [f64; 3], b: [f64; 3], px: f64, py: f64) -> f64 {
    (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
}

/// Renders the textured proxy for `c`.
///
/// Back faces are culled and depth ties keep the lower triangle index. Colors
/// are interpolated barycentrically; the region label of a pixel is taken from
/// the vertex with the largest barycentric weight.
pub fn render_proxy(c: &CoefficientSet, basis: &FaceBasis, resolution: usize) -> Result<ProxyRender> {
    ensure!(
        SUPPORTED_RESOLUTIONS.contains(&resolution),
        "unsupported resolution {resolution}, expected one of {SUPPORTED_RESOLUTIONS:?}"
    );
    ensure!(
        c.alpha.scale > 0.0 && c.alpha.scale.is_finite(),
        "degenerate camera scale {}",
        c.alpha.scale
    );
    let mesh = synthesize_mesh(c, basis)?;
    let projected: Vec<[f64; 3]> = mesh
        .vertices
        .iter()
        .map(|&p| project(c, p, resolution))
        .collect();

    let n = resolution * resolution;
    let mut zbuf = vec![f64::NEG_INFINITY; n];
    let mut image = Image::zeros(3, resolution, resolution);
    let mut mask = vec![0u8; n];
    let mut region_map = vec![BACKGROUND; n];

    for tri in &basis.faces {
        let idx = tri.map(|i| i as usize);
        let [a, b, cc] = idx.map(|i| projected[i]);
        // pixel space has y pointing down, so front faces have negative area here
        let area = edge(a, b, cc[0], cc[1]);
        if area >= 0.0 {
            continue;
        }
        let x0 = a[0].min(b[0]).min(cc[0]).floor().max(0.0) as usize;
        let y0 = a[1].min(b[1]).min(cc[1]).floor().max(0.0) as usize;
        let x1 = (a[0].max(b[0]).max(cc[0]).ceil() as isize).min(resolution as isize - 1);
        let y1 = (a[1].max(b[1]).max(cc[1]).ceil() as isize).min(resolution as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for py in y0..=y1 as usize {
            let yc = py as f64 + 0.5;
            for px in x0..=x1 as usize {
                let xc = px as f64 + 0.5;
                let w0 = edge(b, cc, xc, yc) / area;
                let w1 = edge(cc, a, xc, yc) / area;
                let w2 = edge(a, b, xc, yc) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * a[2] + w1 * b[2] + w2 * cc[2];
                let pix = py * resolution + px;
                if z <= zbuf[pix] {
                    continue;
                }
                zbuf[pix] = z;
                let w = [w0, w1, w2];
                for ch in 0..3 {
                    let v: f64 = (0..3).map(|k| w[k] * mesh.colors[idx[k]][ch]).sum();
                    image.data[ch * n + pix] = v.clamp(0.0, 1.0) as f32;
                }
                let dominant = (0..3).fold(0, |best, k| if w[k] > w[best] { k } else { best });
                region_map[pix] = basis.region_labels[idx[dominant]] as u8;
                mask[pix] = 1;
            }
        }
    }

    let depth: Vec<f32> = zbuf
        .iter()
        .map(|&z| if z.is_finite() { z as f32 } else { 0.0 })
        .collect();
    let mut landmarks = Vec::with_capacity(basis.landmark_indices.len());
    let mut landmark_visible = Vec::with_capacity(basis.landmark_indices.len());
    for &li in &basis.landmark_indices {
        let p = projected[li as usize];
        let r = resolution as f64;
        let inside = p[0] >= 0.0 && p[0] < r && p[1] >= 0.0 && p[1] < r;
        let visible = inside && {
            let pix = p[1] as usize * resolution + p[0] as usize;
            mask[pix] == 1 && p[2] >= zbuf[pix] - 0.05 * c.alpha.scale
        };
        landmarks.push([p[0] as f32, p[1] as f32]);
        landmark_visible.push(visible);
    }

    Ok(ProxyRender {
        resolution,
        image,
        mask,
        region_map,
        landmarks,
        landmark_visible,
        depth,
    })
}

/// Region labels as a typed enum, `None` for background.
pub fn region_at(render: &ProxyRender, x: usize, y: usize) -> Option<Region> {
    Region::from_u8(render.region_map[y * render.resolution + x])
}
