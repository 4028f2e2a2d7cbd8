use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Weak-perspective camera: scale plus translation in normalized device units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    pub translation: [f64; 2],
}

/// Head rotation (radians) and jaw opening in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub jaw: f64,
}

/// Ambient term plus a single directional Lambertian light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub ambient: f64,
    pub direction: [f64; 3],
    pub intensity: f64,
}

/// The six coefficient groups describing one face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub alpha: Camera,
    pub beta: Pose,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(rename = "lambda")]
    pub lambda_: Lighting,
    pub mu: Vec<f64>,
}

/// Coefficient groups in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoefficientGroup {
    Camera,
    Pose,
    Expression,
    Shape,
    Lighting,
    Texture,
}

impl CoefficientGroup {
    pub const ALL: [CoefficientGroup; 6] = [
        CoefficientGroup::Camera,
        CoefficientGroup::Pose,
        CoefficientGroup::Expression,
        CoefficientGroup::Shape,
        CoefficientGroup::Lighting,
        CoefficientGroup::Texture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CoefficientGroup::Camera => "alpha",
            CoefficientGroup::Pose => "beta",
            CoefficientGroup::Expression => "theta",
            CoefficientGroup::Shape => "phi",
            CoefficientGroup::Lighting => "lambda",
            CoefficientGroup::Texture => "mu",
        }
    }
}

/// Basis dimensionalities; fixes the layout of flattened coefficient vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefficientDims {
    pub shape: usize,
    pub expression: usize,
    pub texture: usize,
}

impl Default for CoefficientDims {
    fn default() -> Self {
        Self {
            shape: 10,
            expression: 10,
            texture: 10,
        }
    }
}

impl CoefficientDims {
    pub fn group_len(&self, g: CoefficientGroup) -> usize {
        match g {
            CoefficientGroup::Camera => 3,
            CoefficientGroup::Pose => 4,
            CoefficientGroup::Expression => self.expression,
            CoefficientGroup::Shape => self.shape,
            CoefficientGroup::Lighting => 5,
            CoefficientGroup::Texture => self.texture,
        }
    }

    /// Offset of each group inside the flattened vector.
    pub fn group_offset(&self, g: CoefficientGroup) -> usize {
        CoefficientGroup::ALL
            .iter()
            .take_while(|&&h| h != g)
            .map(|&h| self.group_len(h))
            .sum()
    }

    pub fn total(&self) -> usize {
        CoefficientGroup::ALL.iter().map(|&g| self.group_len(g)).sum()
    }
}

impl CoefficientSet {
    pub fn dims(&self) -> CoefficientDims {
        CoefficientDims {
            shape: self.phi.len(),
            expression: self.theta.len(),
            texture: self.mu.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha.scale > 0.0 && self.alpha.scale.is_finite(),
            "camera scale must be positive, got {}",
            self.alpha.scale
        );
        let d = self.lambda_.direction;
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        ensure!((n - 1.0).abs() < 1e-6, "light direction norm is {n}, expected 1");
        for (name, a) in [
            ("yaw", self.beta.yaw),
            ("pitch", self.beta.pitch),
            ("roll", self.beta.roll),
        ] {
            ensure!(
                a.is_finite() && a.abs() <= std::f64::consts::PI,
                "{name} {a} outside [-pi, pi]"
            );
        }
        ensure!(
            self.flatten().iter().all(|v| v.is_finite()),
            "coefficients contain non-finite values"
        );
        Ok(())
    }

    /// Flattens all groups in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims().total());
        for g in CoefficientGroup::ALL {
            out.extend(self.group(g));
        }
        out
    }

    pub fn group(&self, g: CoefficientGroup) -> Vec<f64> {
        match g {
            CoefficientGroup::Camera => vec![
                self.alpha.scale,
                self.alpha.translation[0],
                self.alpha.translation[1],
            ],
            CoefficientGroup::Pose => vec![self.beta.yaw, self.beta.pitch, self.beta.roll, self.beta.jaw],
            CoefficientGroup::Expression => self.theta.clone(),
            CoefficientGroup::Shape => self.phi.clone(),
            CoefficientGroup::Lighting => vec![
                self.lambda_.ambient,
                self.lambda_.direction[0],
                self.lambda_.direction[1],
                self.lambda_.direction[2],
                self.lambda_.intensity,
            ],
            CoefficientGroup::Texture => self.mu.clone(),
        }
    }

    /// Inverse of [`flatten`](Self::flatten). No validation or squashing is applied.
    pub fn unflatten(values: &[f64], dims: CoefficientDims) -> Result<Self> {
        ensure!(
            values.len() == dims.total(),
            "flattened coefficients have {} values, expected {}",
            values.len(),
            dims.total()
        );
        let at = |g: CoefficientGroup| {
            let o = dims.group_offset(g);
            &values[o..o + dims.group_len(g)]
        };
        let cam = at(CoefficientGroup::Camera);
        let pose = at(CoefficientGroup::Pose);
        let light = at(CoefficientGroup::Lighting);
        Ok(Self {
            alpha: Camera {
                scale: cam[0],
                translation: [cam[1], cam[2]],
            },
            beta: Pose {
                yaw: pose[0],
                pitch: pose[1],
                roll: pose[2],
                jaw: pose[3],
            },
            theta: at(CoefficientGroup::Expression).to_vec(),
            phi: at(CoefficientGroup::Shape).to_vec(),
            lambda_: Lighting {
                ambient: light[0],
                direction: [light[1], light[2], light[3]],
                intensity: light[4],
            },
            mu: at(CoefficientGroup::Texture).to_vec(),
        })
    }

    /// A frontal, neutral face under soft frontal light.
    pub fn canonical(dims: CoefficientDims) -> Self {
        Self {
            alpha: Camera {
                scale: 0.8,
                translation: [0.0, 0.0],
            },
            beta: Pose {
                yaw: 0.0,
                pitch: 0.0,
                roll: 0.0,
                jaw: 0.0,
            },
            theta: vec![0.0; dims.expression],
            phi: vec![0.0; dims.shape],
            lambda_: Lighting {
                ambient: 0.6,
                direction: [0.0, 0.0, 1.0],
                intensity: 0.4,
            },
            mu: vec![0.0; dims.texture],
        }
    }
}

/// Selects geometry (camera, pose, expression) from the driving set and
/// identity (shape, lighting, texture) from the source set.
pub fn mix_coefficients(source: &CoefficientSet, driving: &CoefficientSet) -> CoefficientSet {
    CoefficientSet {
        alpha: driving.alpha,
        beta: driving.beta,
        theta: driving.theta.clone(),
        phi: source.phi.clone(),
        lambda_: source.lambda_,
        mu: source.mu.clone(),
    }
}

/// Ranges of the sampling prior. Basis weights are always standard normal clipped to `[-3, 3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPrior {
    pub scale: (f64, f64),
    pub translation: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub ambient: (f64, f64),
    pub intensity: (f64, f64),
    /// Maximum angle of the light direction away from the viewing axis.
    pub light_cone: f64,
}

impl Default for SamplingPrior {
    fn default() -> Self {
        Self {
            scale: (0.72, 0.88),
            translation: 0.08,
            yaw: 0.6,
            pitch: 0.3,
            roll: 0.2,
            ambient: (0.45, 0.7),
            intensity: (0.25, 0.5),
            light_cone: 1.0,
        }
    }
}

const IDENTITY_SALT: u64 = 0x1d3_7a11_5eed;

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    let v: f64 = rng.sample(StandardNormal);
    v.clamp(-3.0, 3.0)
}

fn basis_weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| truncated_normal(rng)).collect()
}

fn sample_lighting(rng: &mut impl Rng, prior: &SamplingPrior) -> Lighting {
    let ambient = rng.gen_range(prior.ambient.0..=prior.ambient.1);
    let intensity = rng.gen_range(prior.intensity.0..=prior.intensity.1);
    // uniform over the spherical cap around +z
    let cos_max = prior.light_cone.cos();
    let cz: f64 = rng.gen_range(cos_max..=1.0);
    let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let sz = (1.0 - cz * cz).max(0.0).sqrt();
    let mut d = [sz * az.cos(), sz * az.sin(), cz];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    for v in &mut d {
        *v /= n;
    }
    Lighting {
        ambient,
        direction: d,
        intensity,
    }
}

/// Draws a coefficient set from the prior.
///
/// When `identity_id` is given, shape, texture and lighting come from an RNG
/// seeded by the identity alone, so every sample of one identity shares them;
/// camera, pose and expression always come from `seed`.
pub fn sample_coefficients(
    seed: u64,
    identity_id: Option<u64>,
    dims: CoefficientDims,
    prior: &SamplingPrior,
) -> CoefficientSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = Camera {
        scale: rng.gen_range(prior.scale.0..=prior.scale.1),
        translation: [
            rng.gen_range(-prior.translation..=prior.translation),
            rng.gen_range(-prior.translation..=prior.translation),
        ],
    };
    let beta = Pose {
        yaw: rng.gen_range(-prior.yaw..=prior.yaw),
        pitch: rng.gen_range(-prior.pitch..=prior.pitch),
        roll: rng.gen_range(-prior.roll..=prior.roll),
        jaw: rng.gen_range(0.0..=1.0),
    };
    let theta = basis_weights(&mut rng, dims.expression);

    let mut id_rng = match identity_id {
        Some(id) => ChaCha8Rng::seed_from_u64(IDENTITY_SALT ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        None => ChaCha8Rng::seed_from_u64(rng.gen()),
    };
    let phi = basis_weights(&mut id_rng, dims.shape);
    let mu = basis_weights(&mut id_rng, dims.texture);
    let lambda_ = sample_lighting(&mut id_rng, prior);

    CoefficientSet {
        alpha,
        beta,
        theta,
        phi,
        lambda_,
        mu,
    }
}
