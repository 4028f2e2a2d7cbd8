use super::basis::FaceBasis;
use super::coefficients::{CoefficientSet, Pose};
use crate::error::{Error, Result};

/// A posed, shaded mesh in head-centered camera space (`+z` toward the viewer).
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

/// Rotation `Rz(roll) * Rx(pitch) * Ry(yaw)` as a row-major 3x3 matrix.
pub fn rotation_matrix(pose: &Pose) -> [[f64; 3]; 3] {
    let (sy, cy) = pose.yaw.sin_cos();
    let (sp, cp) = pose.pitch.sin_cos();
    let (sr, cr) = pose.roll.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&rx, &ry))
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

fn check_dims(c: &CoefficientSet, basis: &FaceBasis) -> Result<()> {
    let (have, want) = (c.dims(), basis.dims());
    if have != want {
        return Err(Error::Config(format!(
            "coefficient dims {have:?} do not match basis dims {want:?}"
        )));
    }
    Ok(())
}

/// Unposed geometry: mean plus shape, expression and jaw displacements.
pub fn neutral_geometry(c: &CoefficientSet, basis: &FaceBasis) -> Result<Vec<[f64; 3]>> {
    check_dims(c, basis)?;
    let mut verts: Vec<[f64; 3]> = basis.mean_vertices.iter().map(|p| p.map(f64::from)).collect();
    let mut add = |w: f64, field: &[[f32; 3]]| {
        if w == 0.0 {
            return;
        }
        for (v, d) in verts.iter_mut().zip(field) {
            for k in 0..3 {
                v[k] += w * d[k] as f64;
            }
        }
    };
    for (w, f) in c.phi.iter().zip(&basis.shape_basis) {
        add(*w, f);
    }
    for (w, f) in c.theta.iter().zip(&basis.expression_basis) {
        add(*w, f);
    }
    add(c.beta.jaw, &basis.jaw_field);
    Ok(verts)
}

/// Per-vertex albedo clamped to `[0, 1]`.
pub fn albedo(c: &CoefficientSet, basis: &FaceBasis) -> Result<Vec<[f64; 3]>> {
    check_dims(c, basis)?;
    let mut out: Vec<[f64; 3]> = basis.mean_albedo.iter().map(|p| p.map(f64::from)).collect();
    for (w, f) in c.mu.iter().zip(&basis.texture_basis) {
        for (a, d) in out.iter_mut().zip(f) {
            for k in 0..3 {
                a[k] += w * d[k] as f64;
            }
        }
    }
    for a in &mut out {
        for v in a.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Area-weighted vertex normals (unit length; zero for isolated vertices).
pub fn vertex_normals(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> Vec<[f64; 3]> {
    let mut n = vec![[0.0; 3]; vertices.len()];
    for f in faces {
        let [a, b, c] = f.map(|i| vertices[i as usize]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cr = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        for &i in f {
            for k in 0..3 {
                n[i as usize][k] += cr[k];
            }
        }
    }
    for v in &mut n {
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 0.0 {
            for c in v.iter_mut() {
                *c /= len;
            }
        }
    }
    n
}

/// Poses the blendshape geometry and shades it with ambient plus Lambertian light.
pub fn synthesize_mesh(c: &CoefficientSet, basis: &FaceBasis) -> Result<Mesh> {
    let rot = rotation_matrix(&c.beta);
    let vertices: Vec<[f64; 3]> = neutral_geometry(c, basis)?
        .into_iter()
        .map(|p| apply(&rot, p))
        .collect();
    let normals = vertex_normals(&vertices, &basis.faces);
    let l = &c.lambda_;
    let colors = albedo(c, basis)?
        .into_iter()
        .zip(&normals)
        .map(|(a, n)| {
            let lambert = (n[0] * l.direction[0] + n[1] * l.direction[1] + n[2] * l.direction[2]).max(0.0);
            let shade = l.ambient + l.intensity * lambert;
            a.map(|v| (v * shade).clamp(0.0, 1.0))
        })
        .collect();
    Ok(Mesh { vertices, colors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::coefficients::{sample_coefficients, CoefficientDims, SamplingPrior};

    fn basis() -> &'static FaceBasis {
        FaceBasis::bundled()
    }

    #[test]
    fn zero_coefficients_give_mean_mesh() {
        let c = CoefficientSet::canonical(CoefficientDims::default());
        let m = synthesize_mesh(&c, basis()).unwrap();
        for (v, p) in m.vertices.iter().zip(&basis().mean_vertices) {
            assert_eq!(*v, p.map(f64::from));
        }
    }

    #[test]
    fn pure_ambient_light_returns_albedo() {
        let mut c = sample_coefficients(4, Some(2), CoefficientDims::default(), &SamplingPrior::default());
        c.lambda_.ambient = 1.0;
        c.lambda_.intensity = 0.0;
        let m = synthesize_mesh(&c, basis()).unwrap();
        assert_eq!(m.colors, albedo(&c, basis()).unwrap());
    }

    #[test]
    fn opposite_yaw_mirrors_in_x() {
        let b = basis();
        let mut c = sample_coefficients(11, Some(5), CoefficientDims::default(), &SamplingPrior::default());
        c.beta.roll = 0.0;
        c.beta.yaw = 0.3;
        let plus = synthesize_mesh(&c, b).unwrap();
        c.beta.yaw = -0.3;
        let minus = synthesize_mesh(&c, b).unwrap();
        for v in 0..b.n_vertices() {
            let p = plus.vertices[v];
            let q = minus.vertices[b.mirror_index(v)];
            assert!((p[0] + q[0]).abs() < 1e-6);
            assert!((p[1] - q[1]).abs() < 1e-6);
            assert!((p[2] - q[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn expression_only_adds_its_displacement() {
        let b = basis();
        let mut c = sample_coefficients(3, Some(9), CoefficientDims::default(), &SamplingPrior::default());
        c.beta = Pose { yaw: 0.0, pitch: 0.0, roll: 0.0, jaw: c.beta.jaw };
        let mut zero = c.clone();
        zero.theta = vec![0.0; c.theta.len()];
        let a = neutral_geometry(&zero, b).unwrap();
        let g = neutral_geometry(&c, b).unwrap();
        for v in 0..b.n_vertices() {
            for k in 0..3 {
                let expected: f64 = c
                    .theta
                    .iter()
                    .zip(&b.expression_basis)
                    .map(|(w, f)| w * f[v][k] as f64)
                    .sum();
                assert!((g[v][k] - a[v][k] - expected).abs() < 1e-12);
            }
        }
        let posed = synthesize_mesh(&c, b).unwrap();
        assert_eq!(posed.vertices, g);
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let mut c = CoefficientSet::canonical(CoefficientDims::default());
        c.theta.push(0.0);
        assert!(matches!(synthesize_mesh(&c, basis()), Err(Error::Config(_))));
    }
}
