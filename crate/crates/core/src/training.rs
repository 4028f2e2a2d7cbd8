//! Hybrid paired/unpaired adversarial training of the correspondence network
//! and generator, with frozen coefficient encoder and identity embedder.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{hex, Container};
use crate::correspondence::CORR_DOWNSAMPLE;
use crate::encoder::{EncoderModel, IdentityEmbedder};
use crate::error::{ensure, Error, Result};
use crate::face_model::{mix_coefficients, render_proxy, Dataset, FaceBasis, ProxyRender, N_LABELS};
use crate::imageio::Image;
use crate::losses::{self, GeneratorTerms, LossReport, LossWeights, PixelTargets};
use crate::nn::{ops, Adam, AdamConfig};
use crate::pipeline::{DcgModel, ModelConfig, PairInputs, PairViews, Reenactor};

pub const TRAIN_KIND: &str = "reenact-train";

/// Seed domain of the calibration batches, disjoint from training steps.
const CALIBRATION_DOMAIN: u64 = 0xca1b_0000_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub adam: AdamConfig,
    pub p_start: f64,
    pub p_end: f64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Fixed loss weights; when absent they are calibrated on warm-up batches.
    pub weights: Option<LossWeights>,
    pub geo_weight: f64,
    pub calibration_steps: usize,
    pub basis_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(64)
    }
}

impl TrainConfig {
    pub fn desk(resolution: usize) -> Self {
        Self {
            batch_size: 4,
            epochs: 10,
            steps_per_epoch: 50,
            adam: AdamConfig::default(),
            p_start: 0.8,
            p_end: 0.2,
            seed: 1,
            model: ModelConfig::desk(resolution),
            weights: None,
            geo_weight: 1.0,
            calibration_steps: 50,
            basis_seed: crate::face_model::basis::BUNDLED_BASIS_SEED,
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("batch size, epochs and steps per epoch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_start) || !(0.0..=1.0).contains(&self.p_end) {
            return bad(format!("pairing probabilities must lie in [0, 1], got {} and {}", self.p_start, self.p_end));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.adam.lr));
        }
        if !(self.geo_weight.is_finite() && self.geo_weight >= 0.0) {
            return bad(format!("geometry weight must be finite and non-negative, got {}", self.geo_weight));
        }
        if self.weights.is_none() && self.calibration_steps == 0 {
            return bad("either fixed weights or at least one calibration step is required".into());
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        self.model.validate()
    }
}

/// Pairing probability at `epoch`: linear from `p_start` at epoch 0 to `p_end`
/// at the final epoch, clamped to `[0, 1]`.
pub fn p_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let t = if config.epochs <= 1 {
        0.0
    } else {
        (epoch.min(config.epochs - 1)) as f64 / (config.epochs - 1) as f64
    };
    (config.p_start + (config.p_end - config.p_start) * t).clamp(0.0, 1.0)
}

/// Sample indices of one training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub source: usize,
    pub driving: usize,
    /// Same identity, so the driving image is the pixel target.
    pub paired: bool,
}

/// Draws `batch` pairs. Each pair is independently paired with probability
/// `p`: the driving frame is then another frame of the source identity when
/// one exists; otherwise it comes from a different identity.
pub fn sample_pairs(groups: &[(u64, Vec<usize>)], p: f64, batch: usize, rng: &mut impl Rng) -> Result<Vec<PairSpec>> {
    ensure!(!groups.is_empty() && groups.iter().all(|(_, v)| !v.is_empty()), "no samples to draw from");
    ensure!(
        groups.len() >= 2 || p >= 1.0,
        "unpaired sampling needs at least two identities, got {}",
        groups.len()
    );
    ensure!((0.0..=1.0).contains(&p), "pairing probability {p} outside [0, 1]");
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let gi = rng.gen_range(0..groups.len());
        let frames = &groups[gi].1;
        let fi = rng.gen_range(0..frames.len());
        let paired = rng.gen_bool(p);
        let driving = if paired {
            if frames.len() > 1 {
                let mut fj = rng.gen_range(0..frames.len() - 1);
                if fj >= fi {
                    fj += 1;
                }
                frames[fj]
            } else {
                frames[fi]
            }
        } else {
            let mut gj = rng.gen_range(0..groups.len() - 1);
            if gj >= gi {
                gj += 1;
            }
            let other = &groups[gj].1;
            other[rng.gen_range(0..other.len())]
        };
        out.push(PairSpec {
            source: frames[fi],
            driving,
            paired,
        });
    }
    Ok(out)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 29))
}

/// A dataset with its proxies rendered from the ground-truth coefficients.
pub struct TrainData {
    pub dataset: Dataset,
    proxies: Vec<ProxyRender>,
    groups: Vec<(u64, Vec<usize>)>,
}

impl TrainData {
    pub fn new(dataset: Dataset, basis: &FaceBasis) -> Result<Self> {
        ensure!(!dataset.is_empty(), "training dataset is empty");
        let proxies = dataset
            .samples
            .iter()
            .map(|s| render_proxy(&s.coefficients, basis, dataset.resolution))
            .collect::<Result<Vec<_>>>()?;
        let groups = dataset.by_identity();
        Ok(Self {
            dataset,
            proxies,
            groups,
        })
    }

    pub fn groups(&self) -> &[(u64, Vec<usize>)] {
        &self.groups
    }
}

/// A prepared batch: network inputs plus the targets of every loss.
struct Batch {
    pairs: Vec<PairSpec>,
    inputs: PairInputs,
    driving: Tensor,
    driving_parsing: Tensor,
    geometry: Tensor,
}

/// Per-step record written to the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub mw: f64,
    pub cc: f64,
    pub id: f64,
    pub geo: f64,
    pub pix: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub paired: bool,
    pub paired_fraction: f64,
    pub p_current: f64,
    /// Hash of the generator output fed to the discriminator update.
    pub d_input_hash: String,
    /// Hash of the generator output the generator loss was computed on.
    pub g_output_hash: String,
}

impl StepRecord {
    pub fn report(&self) -> LossReport {
        LossReport {
            terms: losses::TermValues {
                mw: self.mw,
                cc: self.cc,
                id: self.id,
                geo: self.geo,
                pix: self.pix,
                adv_g: self.adv_g,
            },
            adv_d: self.adv_d,
            l_g: self.l_g,
            l_d: self.l_d,
            paired: self.paired,
        }
    }
}

fn tensor_hash(t: &Tensor) -> Result<String> {
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    Ok(hex(&h.finalize())[..16].to_string())
}

/// Full training state: networks, optimizers, frozen auxiliaries, counters.
pub struct Trainer {
    config: TrainConfig,
    model: DcgModel,
    encoder: EncoderModel,
    embedder: IdentityEmbedder,
    opt_g: Adam,
    opt_d: Adam,
    weights: LossWeights,
    step: u64,
    basis: FaceBasis,
}

impl Trainer {
    /// Fresh networks; loss weights from the config or from calibration on `data`.
    pub fn new(config: TrainConfig, encoder: EncoderModel, embedder: IdentityEmbedder, data: &TrainData) -> Result<Self> {
        config.validate()?;
        let model = DcgModel::new(config.model.clone(), config.seed, DType::F32)?;
        let mut t = Self::assemble(config, model, encoder, embedder, LossWeights::default(), 0)?;
        t.check_data(data)?;
        t.weights = match t.config.weights {
            Some(w) => w,
            None => t.calibrate(data)?,
        };
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        model: DcgModel,
        encoder: EncoderModel,
        embedder: IdentityEmbedder,
        weights: LossWeights,
        step: u64,
    ) -> Result<Self> {
        ensure!(
            encoder.params().named_vars().is_empty() && embedder.params().named_vars().is_empty(),
            "encoder and embedder must be loaded frozen"
        );
        let res = config.model.resolution();
        ensure!(
            encoder.config().trunk.resolution == res && embedder.config().trunk.resolution == res,
            "encoder and embedder resolutions must equal the training resolution {res}"
        );
        let opt_g = Adam::new(model.g_params().named_vars(), config.adam)?;
        let opt_d = Adam::new(model.d_params().named_vars(), config.adam)?;
        let basis = basis_from_seed(config.basis_seed);
        Ok(Self {
            config,
            model,
            encoder,
            embedder,
            opt_g,
            opt_d,
            weights,
            step,
            basis,
        })
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        let res = self.config.model.resolution();
        ensure!(
            data.dataset.resolution == res,
            "dataset resolution {} differs from model resolution {res}",
            data.dataset.resolution
        );
        ensure!(data.dataset.samples[0].coefficients.dims() == self.basis.dims(), "dataset does not match the face basis");
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DcgModel {
        &self.model
    }

    pub fn encoder(&self) -> &EncoderModel {
        &self.encoder
    }

    pub fn embedder(&self) -> &IdentityEmbedder {
        &self.embedder
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
        self.config.adam.lr = lr;
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.config.steps_per_epoch as u64) as usize
    }

    pub fn p_current(&self) -> f64 {
        p_schedule(self.epoch(), &self.config)
    }

    fn prepare(&self, data: &TrainData, pairs: Vec<PairSpec>) -> Result<Batch> {
        let dtype = self.model.dtype();
        let res = data.dataset.resolution;
        let samples = &data.dataset.samples;
        let targets: Vec<ProxyRender> = pairs
            .iter()
            .map(|p| {
                let mixed = mix_coefficients(&samples[p.source].coefficients, &samples[p.driving].coefficients);
                render_proxy(&mixed, &self.basis, res)
            })
            .collect::<Result<_>>()?;
        let views: Vec<PairViews<'_>> = pairs
            .iter()
            .zip(&targets)
            .map(|(p, t)| PairViews {
                source_image: &samples[p.source].image,
                source_parsing: &samples[p.source].parsing,
                source_proxy: &data.proxies[p.source],
                target_proxy: t,
            })
            .collect();
        let inputs = PairInputs::build(&views, dtype)?;
        let driving_imgs: Vec<&Image> = pairs.iter().map(|p| &samples[p.driving].image).collect();
        let driving = Image::stack(&driving_imgs, dtype)?;
        let labels: Vec<Vec<u8>> = pairs.iter().map(|p| samples[p.driving].parsing.clone()).collect();
        let driving_parsing = ops::downsample_nearest(&ops::one_hot_maps(&labels, N_LABELS, res, res, dtype)?, CORR_DOWNSAMPLE)?;
        let cols = losses::geometry_columns(self.basis.dims());
        let geometry: Vec<f64> = pairs
            .iter()
            .flat_map(|p| {
                let flat = samples[p.driving].coefficients.flatten();
                cols.iter().map(move |&c| flat[c as usize]).collect::<Vec<_>>()
            })
            .collect();
        let geometry = Tensor::from_vec(geometry, (pairs.len(), cols.len()), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        Ok(Batch {
            pairs,
            inputs,
            driving,
            driving_parsing,
            geometry,
        })
    }

    fn generator_terms(&self, batch: &Batch, fwd: &crate::pipeline::Forward) -> Result<GeneratorTerms> {
        let x = &batch.inputs;
        let p_r = ops::downsample_area(&x.target_proxy, CORR_DOWNSAMPLE)?;
        let i_s = ops::downsample_area(&x.source_image, CORR_DOWNSAMPLE)?;
        let cycled = fwd.field.reverse_warp(&fwd.priors.image)?;
        let paired: Vec<bool> = batch.pairs.iter().map(|p| p.paired).collect();
        let targets = PixelTargets {
            image: batch.driving.clone(),
            parsing: batch.driving_parsing.clone(),
        };
        Ok(GeneratorTerms {
            mw: losses::loss_mw(&fwd.priors.proxy, &p_r)?,
            cc: losses::loss_cc(&cycled, &i_s)?,
            id: losses::loss_id(&self.embedder, &fwd.output, &x.source_image)?,
            geo: losses::loss_geo(&self.encoder, &fwd.output, &batch.geometry)?,
            pix: losses::loss_pix(&fwd.output, &fwd.priors.parsing, Some(&targets), &paired)?,
            adv_g: losses::loss_adv_g(&self.model.discriminator.forward(&fwd.output)?)?,
        })
    }

    /// Loss weights from forward-only warm-up batches.
    fn calibrate(&self, data: &TrainData) -> Result<LossWeights> {
        let mut reports = Vec::with_capacity(self.config.calibration_steps);
        for k in 0..self.config.calibration_steps as u64 {
            let mut rng = step_rng(self.config.seed ^ CALIBRATION_DOMAIN, k);
            let pairs = sample_pairs(data.groups(), self.config.p_start, self.config.batch_size, &mut rng)?;
            let batch = self.prepare(data, pairs)?;
            let fwd = self.model.forward(&batch.inputs)?;
            let terms = self.generator_terms(&batch, &fwd)?.values()?;
            let paired = batch.pairs.iter().any(|p| p.paired);
            reports.push(LossReport::new(terms, 0.0, &LossWeights::default(), paired));
        }
        losses::calibrate(&reports, self.config.geo_weight)
    }

    /// The pairs the next step will train on.
    pub fn next_pairs(&self, data: &TrainData) -> Result<Vec<PairSpec>> {
        let mut rng = step_rng(self.config.seed, self.step);
        sample_pairs(data.groups(), self.p_current(), self.config.batch_size, &mut rng)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepRecord> {
        let p_current = self.p_current();
        let pairs = self.next_pairs(data)?;
        let batch = self.prepare(data, pairs)?;
        let fwd = self.model.forward(&batch.inputs)?;

        let fake = fwd.output.detach();
        let d_input_hash = tensor_hash(&fake)?;
        let d_real = self.model.discriminator.forward(&batch.driving)?;
        let d_fake = self.model.discriminator.forward(&fake)?;
        let l_d = losses::loss_adv_d(&d_real, &d_fake)?;
        let adv_d = ops::scalar(&l_d)?;
        if !adv_d.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                report: format!("discriminator loss {adv_d}"),
            });
        }
        self.opt_d.step(&l_d.backward()?)?;

        let g_output_hash = tensor_hash(&fwd.output)?;
        let terms = self.generator_terms(&batch, &fwd)?;
        let l_g = terms.total(&self.weights)?;
        let values = terms.values()?;
        let paired = batch.pairs.iter().any(|p| p.paired);
        let report = LossReport::new(values, adv_d, &self.weights, paired);
        if !report.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                report: serde_json::to_string(&report)?,
            });
        }
        values.check_signs()?;
        self.opt_g.step(&l_g.backward()?)?;

        let record = StepRecord {
            step: self.step + 1,
            mw: values.mw,
            cc: values.cc,
            id: values.id,
            geo: values.geo,
            pix: values.pix,
            adv_g: values.adv_g,
            adv_d,
            l_g: report.l_g,
            l_d: report.l_d,
            paired,
            paired_fraction: batch.pairs.iter().filter(|p| p.paired).count() as f64 / batch.pairs.len() as f64,
            p_current,
            d_input_hash,
            g_output_hash,
        };
        self.step += 1;
        Ok(record)
    }

    /// Trains until `until` steps have been taken in total, logging one JSON
    /// line per step when `log` is given.
    pub fn run(&mut self, data: &TrainData, until: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        self.check_data(data)?;
        let mut out = Vec::new();
        while self.step < until {
            let r = self.train_step(data)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &r)?;
                w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
            }
            if r.step % 50 == 0 {
                log::info!("step {} L_G {:.4} L_D {:.4} mw {:.4} pix {:.4}", r.step, r.l_g, r.l_d, r.mw, r.pix);
            }
            out.push(r);
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(TRAIN_KIND);
        c.config = serde_json::to_value(&self.config)?;
        c.meta = serde_json::json!({
            "step": self.step,
            "weights": self.weights,
            "opt_g_steps": self.opt_g.steps(),
            "opt_d_steps": self.opt_d.steps(),
        });
        self.model.insert_into(&mut c)?;
        c.insert_group("opt_g", &self.opt_g.state()?);
        c.insert_group("opt_d", &self.opt_d.state()?);
        c.insert_nested("enc", &self.encoder.to_container(0)?);
        c.insert_nested("emb", &self.embedder.to_container(0)?);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(TRAIN_KIND)?;
        let config: TrainConfig = serde_json::from_value(c.config.clone())?;
        config.validate()?;
        let model = DcgModel::from_container(c, config.model.clone(), DType::F32, true)?;
        let encoder = EncoderModel::from_container(&c.nested("enc")?, DType::F32, false)?;
        let embedder = IdentityEmbedder::from_container(&c.nested("emb")?, DType::F32, false)?;
        let weights: LossWeights = serde_json::from_value(c.meta["weights"].clone())?;
        let step = meta_u64(c, "step")?;
        let mut t = Self::assemble(config, model, encoder, embedder, weights, step)?;
        t.opt_g.load_state(&c.group("opt_g"), meta_u64(c, "opt_g_steps")?)?;
        t.opt_d.load_state(&c.group("opt_d"), meta_u64(c, "opt_d_steps")?)?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Inference wrapper around the current networks.
    pub fn into_reenactor(self) -> Result<Reenactor> {
        Reenactor::new(self.encoder, self.embedder, self.model, self.basis)
    }
}

fn meta_u64(c: &Container, key: &str) -> Result<u64> {
    c.meta[key]
        .as_u64()
        .ok_or_else(|| Error::Config(format!("checkpoint meta lacks '{key}'")))
}

/// The procedural basis for `seed`, reusing the bundled instance when possible.
pub fn basis_from_seed(seed: u64) -> FaceBasis {
    if seed == crate::face_model::basis::BUNDLED_BASIS_SEED {
        FaceBasis::bundled().clone()
    } else {
        FaceBasis::procedural(seed, crate::face_model::CoefficientDims::default())
    }
}

/// Loads a training checkpoint for inference.
pub fn load_reenactor(path: &Path) -> Result<Reenactor> {
    Trainer::load(path)?.into_reenactor()
}
