//! Prior-guided generator with spatially-adaptive normalization at coarse levels.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{FusionModule, PriorBundle};
use crate::correspondence::CORR_DOWNSAMPLE;
use crate::error::{ensure, Error, Result};
use crate::face_model::N_LABELS;
use crate::nn::{ops, Conv2d, ParamStore};

const NORM_EPS: f64 = 1e-5;
const PRIOR_CHANNELS: usize = 3 + N_LABELS + 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Output resolution; the priors live at `resolution / 4`.
    pub resolution: usize,
    /// ResBlock width per level, coarsest first; level `i` has resolution
    /// `resolution / 2^(len - 1 - i)`.
    pub channels: Vec<usize>,
    /// Level resolutions whose ResBlocks are modulated by the fused priors.
    pub coarse_levels: Vec<usize>,
    /// Channel count of the fusion module output.
    pub afm_width: usize,
    /// Hidden width of each modulation head.
    pub modulation_hidden: usize,
}

impl GeneratorConfig {
    pub fn desk(resolution: usize) -> Self {
        Self {
            resolution,
            channels: vec![64, 64, 32, 16],
            coarse_levels: vec![resolution / 8, resolution / 4],
            afm_width: 1,
            modulation_hidden: 32,
        }
    }

    pub fn prior_resolution(&self) -> usize {
        self.resolution / CORR_DOWNSAMPLE
    }

    pub fn levels(&self) -> Vec<usize> {
        let n = self.channels.len();
        (0..n).map(|i| self.resolution >> (n - 1 - i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.channels.len();
        if n < 2 || self.channels.contains(&0) {
            return bad(format!("generator needs at least two non-empty levels, got {:?}", self.channels));
        }
        if self.resolution % CORR_DOWNSAMPLE != 0 || self.resolution % (1 << (n - 1)) != 0 {
            return bad(format!("resolution {} does not divide into {n} levels", self.resolution));
        }
        let levels = self.levels();
        if levels[0] > self.prior_resolution() {
            return bad(format!("coarsest level {} is finer than the priors", levels[0]));
        }
        for &c in &self.coarse_levels {
            if !levels.contains(&c) {
                return bad(format!("coarse level {c} is not one of {levels:?}"));
            }
            if c > self.resolution / 4 {
                return bad(format!("coarse level {c} exceeds resolution / 4"));
            }
        }
        if self.afm_width == 0 || self.modulation_hidden == 0 {
            return bad("fusion and modulation widths must be positive".into());
        }
        Ok(())
    }
}

/// Per-pixel scale and shift predicted from the guidance map.
#[derive(Debug, Clone)]
struct Modulation {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Modulation {
    fn new(ps: &mut ParamStore, guidance: usize, hidden: usize, channels: usize) -> Result<Self> {
        ps.scoped("mod", |ps| {
            Ok(Self {
                shared: Conv2d::new(ps, "shared", guidance, hidden, 3, 1, 1)?,
                gamma: Conv2d::with_gain(ps, "gamma", hidden, channels, 3, 1, 1, 0.0)?,
                beta: Conv2d::with_gain(ps, "beta", hidden, channels, 3, 1, 1, 0.0)?,
            })
        })
    }

    fn forward(&self, normalized: &Tensor, guidance: &Tensor) -> Result<Tensor> {
        let h = self.shared.forward(guidance)?.relu()?;
        let gamma = self.gamma.forward(&h)?;
        let beta = self.beta.forward(&h)?;
        Ok(((normalized * (gamma + 1.0)?)? + beta)?)
    }
}

/// `x + c2(relu(c1(relu(m(norm(x))))))`, where `m` is the optional modulation.
#[derive(Debug, Clone)]
struct GenBlock {
    modulation: Option<Modulation>,
    c1: Conv2d,
    c2: Conv2d,
}

impl GenBlock {
    fn forward(&self, x: &Tensor, guidance: Option<&Tensor>) -> Result<Tensor> {
        let mut h = ops::instance_norm(x, NORM_EPS)?;
        if let (Some(m), Some(g)) = (&self.modulation, guidance) {
            h = m.forward(&h, g)?;
        }
        let h = self.c2.forward(&self.c1.forward(&h.relu()?)?.relu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    resolution: usize,
    up: Option<Conv2d>,
    skip: Option<Conv2d>,
    block: GenBlock,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    afm: FusionModule,
    stem: Conv2d,
    levels: Vec<Level>,
    out: Conv2d,
}

impl Generator {
    pub fn new(ps: &mut ParamStore, config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let afm = FusionModule::new(ps, config.afm_width)?;
        let prior_res = config.prior_resolution();
        ps.scoped("gen", |ps| {
            let stem = Conv2d::new(ps, "stem", PRIOR_CHANNELS, config.channels[0], 3, 1, 1)?;
            let mut levels = Vec::new();
            let mut prev = config.channels[0];
            for (i, (&res, &ch)) in config.levels().iter().zip(&config.channels).enumerate() {
                let level = ps.scoped(&format!("level{i}"), |ps| {
                    let up = if i > 0 { Some(Conv2d::new(ps, "up", prev, ch, 3, 1, 1)?) } else { None };
                    let skip = if res <= prior_res {
                        Some(Conv2d::with_gain(ps, "skip", PRIOR_CHANNELS, ch, 1, 1, 0, 1.0)?)
                    } else {
                        None
                    };
                    let modulation = if config.coarse_levels.contains(&res) {
                        Some(Modulation::new(ps, config.afm_width, config.modulation_hidden, ch)?)
                    } else {
                        None
                    };
                    let block = GenBlock {
                        modulation,
                        c1: Conv2d::new(ps, "c1", ch, ch, 3, 1, 1)?,
                        c2: Conv2d::with_gain(ps, "c2", ch, ch, 3, 1, 1, 0.5)?,
                    };
                    Ok(Level { resolution: res, up, skip, block })
                })?;
                levels.push(level);
                prev = ch;
            }
            let out = Conv2d::with_gain(ps, "out", prev, 3, 3, 1, 1, 1.0)?;
            Ok(Self { config: config.clone(), afm, stem, levels, out })
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn afm(&self) -> &FusionModule {
        &self.afm
    }

    /// `I_r` in `[0, 1]`, `(N, 3, resolution, resolution)`.
    pub fn forward(&self, priors: &PriorBundle) -> Result<Tensor> {
        self.forward_with(priors, true)
    }

    /// With `guidance == false` every modulation head is bypassed, which is the
    /// same as forcing its scale and shift to zero.
    pub fn forward_with(&self, priors: &PriorBundle, guidance: bool) -> Result<Tensor> {
        priors.validate()?;
        let prior_res = self.config.prior_resolution();
        ensure!(
            priors.resolution() == prior_res,
            "priors are {}x{0}, generator expects {prior_res}x{prior_res}",
            priors.resolution()
        );
        let input = priors.concat()?;
        let fused = if guidance && !self.config.coarse_levels.is_empty() {
            Some(self.afm.forward(priors)?)
        } else {
            None
        };

        let bottom = self.levels[0].resolution;
        let mut h = self.stem.forward(&ops::downsample_area(&input, prior_res / bottom)?)?;
        for level in &self.levels {
            if let Some(up) = &level.up {
                h = up.forward(&ops::upsample_nearest(&h, 2)?)?;
            }
            if let Some(skip) = &level.skip {
                let x = ops::downsample_area(&input, prior_res / level.resolution)?;
                h = (h + skip.forward(&x)?)?;
            }
            let g = match (&fused, &level.block.modulation) {
                (Some(f), Some(_)) => Some(ops::downsample_area(f, prior_res / level.resolution)?),
                _ => None,
            };
            h = level.block.forward(&h, g.as_ref())?;
        }
        ops::sigmoid(&self.out.forward(&h.relu()?)?)
    }
}
