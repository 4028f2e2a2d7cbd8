//! The procedural blendshape basis and its binary asset format.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::coefficients::CoefficientDims;
use crate::error::{ensure, Error, Result};

pub const N_LANDMARKS: usize = 68;
pub const BASIS_MAGIC: &[u8; 8] = b"FACEBASE";
pub const BASIS_VERSION: u32 = 1;
/// Seed of the basis shipped with the library.
pub const BUNDLED_BASIS_SEED: u64 = 20_240_601;

const N_LON: usize = 40;
const N_RINGS: usize = 32;
/// RMS vertex displacement of a unit shape weight.
const SHAPE_RMS: f64 = 0.06;
/// Largest vertex displacement of a unit expression weight.
const EXPRESSION_PEAK: f64 = 0.10;
/// RMS albedo change of a unit texture weight.
const TEXTURE_RMS: f64 = 0.05;

/// Per-vertex semantic region. The discriminants double as parsing labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Skin = 1,
    Eye = 2,
    Mouth = 3,
}

impl Region {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Region::Skin),
            2 => Some(Region::Eye),
            3 => Some(Region::Mouth),
            _ => None,
        }
    }
}

/// Linear face model: mean geometry and albedo plus shape, expression, jaw and
/// texture displacement fields over a closed triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceBasis {
    pub mean_vertices: Vec<[f32; 3]>,
    pub shape_basis: Vec<Vec<[f32; 3]>>,
    pub expression_basis: Vec<Vec<[f32; 3]>>,
    pub jaw_field: Vec<[f32; 3]>,
    pub mean_albedo: Vec<[f32; 3]>,
    pub texture_basis: Vec<Vec<[f32; 3]>>,
    pub faces: Vec<[u32; 3]>,
    pub region_labels: Vec<Region>,
    pub landmark_indices: Vec<u32>,
}

type Field = Vec<[f64; 3]>;

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Vertex index of the mirror image `(-x, y, z)` for a mesh built by [`head_mesh`].
fn mirror_of(v: usize) -> usize {
    let n = 2 + N_RINGS * N_LON;
    if v == 0 || v == n - 1 {
        return v;
    }
    let r = (v - 1) / N_LON;
    let k = (v - 1) % N_LON;
    1 + r * N_LON + (N_LON - k) % N_LON
}

fn head_mesh() -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    let n = 2 + N_RINGS * N_LON;
    let mut verts = vec![[0.0f64; 3]; n];
    let shape = |t: f64, lon: f64, exact_zero_x: bool| -> [f64; 3] {
        let (st, ct) = t.sin_cos();
        let (sl, cl) = lon.sin_cos();
        let mut p = [if exact_zero_x { 0.0 } else { st * sl }, ct, st * cl];
        p[0] *= 0.78;
        p[2] *= 0.86;
        // nose ridge and slightly protruding chin, front side only
        if p[2] > 0.0 {
            let nose = 0.18 * (-(p[0] / 0.12).powi(2) - ((p[1] + 0.05) / 0.25).powi(2)).exp();
            let chin = 0.06 * (-(p[0] / 0.25).powi(2) - ((p[1] + 0.85) / 0.15).powi(2)).exp();
            p[2] += nose + chin;
        }
        p
    };
    verts[0] = [0.0, 1.0, 0.0];
    verts[n - 1] = [0.0, -1.0, 0.0];
    for r in 0..N_RINGS {
        let t = std::f64::consts::PI * (r + 1) as f64 / (N_RINGS + 1) as f64;
        for k in 0..=N_LON / 2 {
            let lon = std::f64::consts::TAU * k as f64 / N_LON as f64;
            let p = shape(t, lon, k == 0 || k == N_LON / 2);
            verts[1 + r * N_LON + k] = p;
        }
        for k in N_LON / 2 + 1..N_LON {
            let m = verts[1 + r * N_LON + (N_LON - k)];
            verts[1 + r * N_LON + k] = [-m[0], m[1], m[2]];
        }
    }
    let scale = verts.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    for p in &mut verts {
        for c in p.iter_mut() {
            *c /= scale;
        }
    }

    let ring = |r: usize, k: usize| (1 + r * N_LON + k % N_LON) as u32;
    let mut faces = Vec::with_capacity(2 * N_LON * N_RINGS);
    for k in 0..N_LON {
        faces.push([0, ring(0, k + 1), ring(0, k)]);
    }
    for r in 0..N_RINGS - 1 {
        for k in 0..N_LON {
            let (a, b) = (ring(r, k), ring(r, k + 1));
            let (c, d) = (ring(r + 1, k), ring(r + 1, k + 1));
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }
    let last = (n - 1) as u32;
    for k in 0..N_LON {
        faces.push([last, ring(N_RINGS - 1, k), ring(N_RINGS - 1, k + 1)]);
    }
    if signed_volume(&verts, &faces) < 0.0 {
        for f in &mut faces {
            f.swap(1, 2);
        }
    }
    (verts, faces)
}

fn signed_volume(verts: &[[f64; 3]], faces: &[[u32; 3]]) -> f64 {
    faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| verts[i as usize]);
            (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                + a[2] * (b[0] * c[1] - b[1] * c[0]))
                / 6.0
        })
        .sum()
}

fn symmetrize(field: &Field) -> Field {
    (0..field.len())
        .map(|v| {
            let m = field[mirror_of(v)];
            let d = field[v];
            [0.5 * (d[0] - m[0]), 0.5 * (d[1] + m[1]), 0.5 * (d[2] + m[2])]
        })
        .collect()
}

fn symmetrize_color(field: &Field) -> Field {
    (0..field.len())
        .map(|v| {
            let m = field[mirror_of(v)];
            let d = field[v];
            [0, 1, 2].map(|c| 0.5 * (d[c] + m[c]))
        })
        .collect()
}

fn dot(a: &Field, b: &Field) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x[0] * y[0] + x[1] * y[1] + x[2] * y[2])
        .sum::<f64>()
        / a.len() as f64
}

/// Gram-Schmidt against `fixed` and then among `fields`, normalizing to unit RMS.
fn orthonormalize(fields: &mut [Field], fixed: &[Field]) {
    for i in 0..fields.len() {
        let (done, rest) = fields.split_at_mut(i);
        let f = &mut rest[0];
        for g in fixed.iter().chain(done.iter()) {
            let p = dot(f, g) / dot(g, g);
            for (x, y) in f.iter_mut().zip(g) {
                for c in 0..3 {
                    x[c] -= p * y[c];
                }
            }
        }
        let n = dot(f, f).sqrt();
        for x in f.iter_mut() {
            for c in x.iter_mut() {
                *c /= n;
            }
        }
    }
}

fn scale_field(f: &mut Field, s: f64) {
    for x in f.iter_mut() {
        for c in x.iter_mut() {
            *c *= s;
        }
    }
}

fn rbf_field(
    rng: &mut ChaCha8Rng,
    verts: &[[f64; 3]],
    centers: &[usize],
    n_bumps: usize,
    width: (f64, f64),
) -> Field {
    let bumps: Vec<([f64; 3], f64, [f64; 3])> = (0..n_bumps)
        .map(|_| {
            let c = verts[centers[rng.gen_range(0..centers.len())]];
            let w = rng.gen_range(width.0..width.1);
            let a = [
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ];
            (c, w, a)
        })
        .collect();
    verts
        .iter()
        .map(|&p| {
            let mut d = [0.0; 3];
            for (c, w, a) in &bumps {
                let g = (-dist2(p, *c) / (2.0 * w * w)).exp();
                for k in 0..3 {
                    d[k] += a[k] * g;
                }
            }
            d
        })
        .collect()
}

fn to_f32(f: &Field) -> Vec<[f32; 3]> {
    f.iter().map(|p| p.map(|v| v as f32)).collect()
}

fn landmark_targets() -> Vec<[f64; 2]> {
    let mut t = Vec::with_capacity(N_LANDMARKS);
    // jaw line
    for i in 0..17 {
        let u = -1.35 + 2.7 * i as f64 / 16.0;
        t.push([0.66 * u.sin(), 0.2 - u.cos()]);
    }
    // brows
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let s = i as f64 / 4.0;
            let x = side * (0.12 + 0.38 * if side < 0.0 { 1.0 - s } else { s });
            t.push([x, 0.38 + 0.04 * (std::f64::consts::PI * s).sin()]);
        }
    }
    // nose bridge and base
    for i in 0..4 {
        t.push([0.0, 0.2 - 0.1 * i as f64]);
    }
    for i in 0..5 {
        t.push([-0.12 + 0.06 * i as f64, -0.18]);
    }
    // eyes
    for cx in [-0.3, 0.3] {
        for i in 0..6 {
            let a = std::f64::consts::TAU * i as f64 / 6.0;
            t.push([cx + 0.12 * a.cos(), 0.2 + 0.05 * a.sin()]);
        }
    }
    // outer and inner lips
    for i in 0..12 {
        let a = std::f64::consts::TAU * i as f64 / 12.0;
        t.push([0.26 * a.cos(), -0.45 + 0.1 * a.sin()]);
    }
    for i in 0..8 {
        let a = std::f64::consts::TAU * i as f64 / 8.0;
        t.push([0.16 * a.cos(), -0.45 + 0.04 * a.sin()]);
    }
    t
}

impl FaceBasis {
    /// Generates the basis deterministically from `seed`. The result is
    /// bilaterally symmetric: every field commutes with the `x -> -x` reflection.
    pub fn procedural(seed: u64, dims: CoefficientDims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (verts, faces) = head_mesh();
        let nv = verts.len();

        let is_eye = |p: [f64; 3]| {
            p[2] > 0.2
                && [-0.3, 0.3].iter().any(|cx| {
                    ((p[0] - cx) / 0.14).powi(2) + ((p[1] - 0.2) / 0.08).powi(2) <= 1.0
                })
        };
        let is_mouth =
            |p: [f64; 3]| p[2] > 0.2 && (p[0] / 0.28).powi(2) + ((p[1] + 0.45) / 0.09).powi(2) <= 1.0;
        let is_brow = |p: [f64; 3]| {
            p[2] > 0.2 && p[0].abs() > 0.1 && p[0].abs() < 0.52 && (p[1] - 0.39).abs() < 0.05
        };
        let region_labels: Vec<Region> = verts
            .iter()
            .map(|&p| {
                if is_eye(p) {
                    Region::Eye
                } else if is_mouth(p) {
                    Region::Mouth
                } else {
                    Region::Skin
                }
            })
            .collect();

        let all: Vec<usize> = (0..nv).collect();
        let front: Vec<usize> = (0..nv)
            .filter(|&v| verts[v][2] > 0.3 && verts[v][1] < 0.5 && verts[v][1] > -0.75)
            .collect();
        let front_weight: Vec<f64> = verts.iter().map(|p| smoothstep((p[2] + 0.1) / 0.5)).collect();

        // symmetric rigid motions (y/z shift, uniform scale, pitch) would alias
        // with camera and pose, so the deformation bases are kept orthogonal to them
        let mut rigid: Vec<Field> = vec![
            verts.iter().map(|_| [0.0, 1.0, 0.0]).collect(),
            verts.iter().map(|_| [0.0, 0.0, 1.0]).collect(),
            verts.clone(),
            verts.iter().map(|p| [0.0, -p[2], p[1]]).collect(),
        ];
        orthonormalize(&mut rigid, &[]);

        let mut shape: Vec<Field> = (0..dims.shape)
            .map(|_| symmetrize(&rbf_field(&mut rng, &verts, &all, 8, (0.25, 0.5))))
            .collect();
        orthonormalize(&mut shape, &rigid);
        for f in &mut shape {
            scale_field(f, SHAPE_RMS);
        }

        let mut expr: Vec<Field> = (0..dims.expression)
            .map(|_| {
                let mut f = rbf_field(&mut rng, &verts, &front, 3, (0.12, 0.25));
                for (d, w) in f.iter_mut().zip(&front_weight) {
                    for c in d.iter_mut() {
                        *c *= w;
                    }
                }
                symmetrize(&f)
            })
            .collect();
        let fixed: Vec<Field> = rigid.iter().chain(&shape).cloned().collect();
        orthonormalize(&mut expr, &fixed);
        for f in &mut expr {
            let peak = f.iter().map(|&d| norm(d)).fold(0.0, f64::max);
            scale_field(f, EXPRESSION_PEAK / peak);
        }

        let jaw: Field = verts
            .iter()
            .map(|p| {
                let w = smoothstep((-0.3 - p[1]) / 0.3) * smoothstep(p[2] / 0.5);
                [0.0, -0.22 * w, -0.04 * w]
            })
            .collect();

        let mean_albedo: Field = verts
            .iter()
            .zip(&region_labels)
            .map(|(&p, r)| match r {
                Region::Eye => [0.14, 0.11, 0.10],
                Region::Mouth => [0.72, 0.22, 0.25],
                Region::Skin if is_brow(p) => [0.35, 0.25, 0.2],
                Region::Skin => [0.82, 0.62, 0.52],
            })
            .collect();

        let inv3 = 1.0 / 3f64.sqrt();
        let mut tex: Vec<Field> = (0..dims.texture)
            .map(|_| {
                let mut chroma = [
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ];
                let lum = (chroma[0] + chroma[1] + chroma[2]) * inv3;
                for c in chroma.iter_mut() {
                    *c -= lum * inv3;
                }
                let n = norm(chroma);
                let luminance = 0.3 * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let dir = chroma.map(|c| c / n + luminance * inv3);
                let bumps: Vec<([f64; 3], f64, f64)> = (0..4)
                    .map(|_| {
                        (
                            verts[front[rng.gen_range(0..front.len())]],
                            rng.gen_range(0.3..0.7),
                            rng.sample::<f64, _>(StandardNormal),
                        )
                    })
                    .collect();
                let f: Field = verts
                    .iter()
                    .map(|&p| {
                        let s: f64 = bumps
                            .iter()
                            .map(|(c, w, a)| a * (-dist2(p, *c) / (2.0 * w * w)).exp())
                            .sum();
                        dir.map(|d| d * s)
                    })
                    .collect();
                symmetrize_color(&f)
            })
            .collect();
        // a texture mode along the mean albedo would be indistinguishable from ambient light
        let mut albedo_dir = vec![mean_albedo.clone()];
        orthonormalize(&mut albedo_dir, &[]);
        orthonormalize(&mut tex, &albedo_dir);
        for f in &mut tex {
            scale_field(f, TEXTURE_RMS);
        }

        let landmark_indices = {
            let mut used = vec![false; nv];
            landmark_targets()
                .into_iter()
                .map(|[tx, ty]| {
                    let best = (0..nv)
                        .filter(|&v| verts[v][2] > 0.0 && !used[v])
                        .min_by(|&a, &b| {
                            let da = (verts[a][0] - tx).powi(2) + (verts[a][1] - ty).powi(2);
                            let db = (verts[b][0] - tx).powi(2) + (verts[b][1] - ty).powi(2);
                            da.total_cmp(&db)
                        })
                        .expect("front hemisphere has enough vertices");
                    used[best] = true;
                    best as u32
                })
                .collect()
        };

        Self {
            mean_vertices: to_f32(&verts),
            shape_basis: shape.iter().map(to_f32).collect(),
            expression_basis: expr.iter().map(to_f32).collect(),
            jaw_field: to_f32(&jaw),
            mean_albedo: to_f32(&mean_albedo),
            texture_basis: tex.iter().map(to_f32).collect(),
            faces,
            region_labels,
            landmark_indices,
        }
    }

    /// The basis shipped with the library (generated once per process).
    pub fn bundled() -> &'static FaceBasis {
        static BASIS: OnceLock<FaceBasis> = OnceLock::new();
        BASIS.get_or_init(|| FaceBasis::procedural(BUNDLED_BASIS_SEED, CoefficientDims::default()))
    }

    pub fn n_vertices(&self) -> usize {
        self.mean_vertices.len()
    }

    pub fn dims(&self) -> CoefficientDims {
        CoefficientDims {
            shape: self.shape_basis.len(),
            expression: self.expression_basis.len(),
            texture: self.texture_basis.len(),
        }
    }

    /// Index of the vertex at the mirror position `(-x, y, z)`.
    pub fn mirror_index(&self, v: usize) -> usize {
        mirror_of(v)
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.n_vertices();
        ensure!(nv == 2 + N_RINGS * N_LON, "unexpected vertex count {nv}");
        let per_vertex = |name: &str, f: &[[f32; 3]]| -> Result<()> {
            ensure!(f.len() == nv, "{name} has {} entries, expected {nv}", f.len());
            ensure!(
                f.iter().all(|p| p.iter().all(|v| v.is_finite())),
                "{name} contains non-finite values"
            );
            Ok(())
        };
        per_vertex("mean_vertices", &self.mean_vertices)?;
        per_vertex("jaw_field", &self.jaw_field)?;
        per_vertex("mean_albedo", &self.mean_albedo)?;
        for (name, set) in [
            ("shape_basis", &self.shape_basis),
            ("expression_basis", &self.expression_basis),
            ("texture_basis", &self.texture_basis),
        ] {
            for f in set {
                per_vertex(name, f)?;
            }
        }
        ensure!(self.region_labels.len() == nv, "region labels length mismatch");
        ensure!(
            self.faces.iter().flatten().all(|&i| (i as usize) < nv),
            "face index out of range"
        );
        ensure!(
            self.landmark_indices.len() == N_LANDMARKS,
            "expected {N_LANDMARKS} landmarks, got {}",
            self.landmark_indices.len()
        );
        ensure!(
            self.landmark_indices.iter().all(|&i| (i as usize) < nv),
            "landmark index out of range"
        );
        Ok(())
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |f: &[[f32; 3]]| {
            for p in f {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        push(&self.mean_vertices);
        self.shape_basis.iter().for_each(|f| push(f));
        self.expression_basis.iter().for_each(|f| push(f));
        push(&self.jaw_field);
        push(&self.mean_albedo);
        self.texture_basis.iter().for_each(|f| push(f));
        for f in &self.faces {
            for i in f {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        out.extend(self.region_labels.iter().map(|&r| r as u8));
        for i in &self.landmark_indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    /// Serializes to the versioned asset layout:
    /// magic, version, `V`, `K_shape`, `K_exp`, `K_tex`, face count, landmark count,
    /// CRC32 of the payload, then the little-endian payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let dims = self.dims();
        let mut out = Vec::with_capacity(payload.len() + 40);
        out.extend_from_slice(BASIS_MAGIC);
        for v in [
            BASIS_VERSION,
            self.n_vertices() as u32,
            dims.shape as u32,
            dims.expression as u32,
            dims.texture as u32,
            self.faces.len() as u32,
            self.landmark_indices.len() as u32,
            crc32fast::hash(&payload),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 40 || &bytes[..8] != BASIS_MAGIC {
            return Err(bad("missing face basis magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != BASIS_VERSION {
            return Err(bad(&format!("unsupported basis version {version}")));
        }
        let (nv, ks, ke, kt, nf, nl, crc) = (
            word(1) as usize,
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5) as usize,
            word(6) as usize,
            word(7),
        );
        let payload = &bytes[40..];
        let computed = crc32fast::hash(payload);
        if computed != crc {
            return Err(Error::Checksum {
                path: origin.to_path_buf(),
                stored: format!("{crc:08x}"),
                computed: format!("{computed:08x}"),
            });
        }
        let n_fields = 3 + ks + ke + kt;
        let expected = n_fields * nv * 12 + nf * 12 + nv + nl * 4;
        if payload.len() != expected {
            return Err(bad(&format!(
                "payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let mut pos = 0;
        let mut field = || {
            let f: Vec<[f32; 3]> = (0..nv)
                .map(|i| {
                    let o = pos + 12 * i;
                    [0, 1, 2].map(|c| {
                        f32::from_le_bytes(payload[o + 4 * c..o + 4 * c + 4].try_into().unwrap())
                    })
                })
                .collect();
            pos += 12 * nv;
            f
        };
        let mean_vertices = field();
        let shape_basis = (0..ks).map(|_| field()).collect();
        let expression_basis = (0..ke).map(|_| field()).collect();
        let jaw_field = field();
        let mean_albedo = field();
        let texture_basis = (0..kt).map(|_| field()).collect();
        let mut pos = n_fields * nv * 12;
        let u32_at = |o: usize| u32::from_le_bytes(payload[o..o + 4].try_into().unwrap());
        let faces = (0..nf)
            .map(|i| [0, 1, 2].map(|c| u32_at(pos + 12 * i + 4 * c)))
            .collect();
        pos += 12 * nf;
        let region_labels = payload[pos..pos + nv]
            .iter()
            .map(|&b| Region::from_u8(b).ok_or_else(|| bad(&format!("invalid region label {b}"))))
            .collect::<Result<Vec<_>>>()?;
        pos += nv;
        let landmark_indices = (0..nl).map(|i| u32_at(pos + 4 * i)).collect();
        let basis = Self {
            mean_vertices,
            shape_basis,
            expression_basis,
            jaw_field,
            mean_albedo,
            texture_basis,
            faces,
            region_labels,
            landmark_indices,
        };
        basis.validate()?;
        Ok(basis)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
