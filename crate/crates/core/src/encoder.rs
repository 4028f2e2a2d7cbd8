//! Image-to-coefficient regressor and identity embedder, both trained on
//! synthetic renders with known ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{ensure, Error, Result};
use crate::face_model::{CoefficientDims, CoefficientGroup, CoefficientSet, Dataset, Lighting};
use crate::imageio::Image;
use crate::nn::{ops, Adam, AdamConfig, Conv2d, Linear, ParamStore};

pub const ENCODER_KIND: &str = "coefficient-encoder";
pub const EMBEDDER_KIND: &str = "identity-embedder";
/// Embedding dimensionality of the identity embedder.
pub const EMBED_DIM: usize = 64;

/// Convolutional trunk shared by the encoder and the embedder: stride-2
/// convolutions down to 4x4, then one fully connected layer.
#[derive(Debug, Clone)]
struct Trunk {
    convs: Vec<Conv2d>,
    norms: Vec<Option<(Tensor, Tensor)>>,
    norm_groups: usize,
    fc: Linear,
    resolution: usize,
    coords: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub hidden: usize,
    /// Stride-1 convolutions after each downsampling convolution.
    pub extra_convs: usize,
    /// Appends normalized x/y coordinate planes to the input.
    pub coord_channels: bool,
    /// Group normalization after every convolution but the first (0 disables it).
    pub norm_groups: usize,
}

impl TrunkConfig {
    pub fn desk(resolution: usize) -> Self {
        Self {
            resolution,
            base_channels: 16,
            max_channels: 64,
            hidden: 256,
            extra_convs: 0,
            coord_channels: false,
            norm_groups: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution >= 4 && self.resolution.is_power_of_two(),
            "trunk resolution {} must be a power of two >= 4",
            self.resolution
        );
        ensure!(self.base_channels > 0 && self.hidden > 0, "empty trunk");
        Ok(())
    }
}

impl Trunk {
    fn new(ps: &mut ParamStore, cfg: &TrunkConfig) -> Result<Self> {
        cfg.validate()?;
        let n_down = (cfg.resolution / 4).trailing_zeros() as usize;
        let mut convs = Vec::new();
        let mut c_in = if cfg.coord_channels { 5 } else { 3 };
        if n_down == 0 {
            convs.push(Conv2d::new(ps, "conv0", c_in, cfg.base_channels, 3, 1, 1)?);
            c_in = cfg.base_channels;
        }
        for i in 0..n_down {
            let c_out = (cfg.base_channels << i).min(cfg.max_channels);
            convs.push(Conv2d::new(ps, &format!("conv{i}"), c_in, c_out, 3, 2, 1)?);
            for j in 0..cfg.extra_convs {
                convs.push(Conv2d::new(ps, &format!("conv{i}_{j}"), c_out, c_out, 3, 1, 1)?);
            }
            c_in = c_out;
        }
        let fc = Linear::new(ps, "fc", c_in * 16, cfg.hidden, std::f64::consts::SQRT_2)?;
        let mut norms = Vec::with_capacity(convs.len());
        for (i, conv) in convs.iter().enumerate() {
            let c = conv.out_channels();
            norms.push(if cfg.norm_groups > 0 && i > 0 {
                ensure!(c % cfg.norm_groups == 0, "{c} channels not divisible into {} groups", cfg.norm_groups);
                Some((
                    ps.param(&format!("norm{i}.gamma"), &[1, c, 1, 1], crate::nn::Init::Const(1.0))?,
                    ps.param(&format!("norm{i}.beta"), &[1, c, 1, 1], crate::nn::Init::Const(0.0))?,
                ))
            } else {
                None
            });
        }
        let coords = if cfg.coord_channels {
            let r = cfg.resolution;
            let lin: Vec<f32> = (0..r).map(|i| (2 * i + 1) as f32 / r as f32 - 1.0).collect();
            let mut v = Vec::with_capacity(2 * r * r);
            for y in 0..r {
                v.extend((0..r).map(|_| lin[y]).collect::<Vec<_>>());
                let _ = y;
            }
            let xs: Vec<f32> = (0..r * r).map(|i| lin[i % r]).collect();
            let ys = v;
            let mut all = xs;
            all.extend(ys);
            Some(Tensor::from_vec(all, (1, 2, r, r), &candle_core::Device::Cpu)?)
        } else {
            None
        };
        Ok(Self {
            convs,
            norms,
            norm_groups: cfg.norm_groups,
            fc,
            resolution: cfg.resolution,
            coords,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        ensure!(
            c == 3 && h == self.resolution && w == self.resolution,
            "expected 3x{r}x{r} input, got {c}x{h}x{w}",
            r = self.resolution
        );
        let mut h = x.affine(2.0, -1.0)?;
        if let Some(coords) = &self.coords {
            let n = h.dims()[0];
            let c = coords.to_dtype(h.dtype())?.broadcast_as((n, 2, self.resolution, self.resolution))?;
            h = Tensor::cat(&[&h, &c], 1)?;
        }
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(&h)?;
            if let Some((g, b)) = norm {
                h = ops::group_norm(&h, self.norm_groups, 1e-5)?.broadcast_mul(g)?.broadcast_add(b)?;
            }
            h = h.relu()?;
        }
        Ok(self.fc.forward(&h.flatten_from(1)?)?.relu()?)
    }
}

/// Per-dimension z-score statistics of the flattened coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn from_coefficients<'a>(sets: impl IntoIterator<Item = &'a CoefficientSet>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = sets.into_iter().map(|c| c.flatten()).collect();
        ensure!(!rows.is_empty(), "cannot compute statistics of an empty set");
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-3)
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, c: &CoefficientSet) -> Vec<f64> {
        c.flatten()
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub trunk: TrunkConfig,
    pub dims: CoefficientDims,
}

/// The coefficient regressor: trunk plus one linear head per coefficient group,
/// predicting z-scored coefficients.
pub struct EncoderModel {
    config: EncoderConfig,
    stats: NormStats,
    trunk: Trunk,
    heads: Vec<Linear>,
    params: ParamStore,
    mean: Tensor,
    std: Tensor,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, stats: NormStats, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(config, stats, ParamStore::new(seed, dtype))
    }

    fn build(config: EncoderConfig, stats: NormStats, mut ps: ParamStore) -> Result<Self> {
        ensure!(
            stats.mean.len() == config.dims.total() && stats.std.len() == config.dims.total(),
            "normalization statistics do not match coefficient dimensions"
        );
        let trunk = ps.scoped("trunk", |ps| Trunk::new(ps, &config.trunk))?;
        let heads = CoefficientGroup::ALL
            .iter()
            .map(|&g| {
                let name = format!("head.{}", g.name());
                Linear::new(&mut ps, &name, config.trunk.hidden, config.dims.group_len(g), 1.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let dev = &candle_core::Device::Cpu;
        let d = config.dims.total();
        let mean = Tensor::from_slice(&stats.mean, (1, d), dev)?.to_dtype(ps.dtype())?;
        let std = Tensor::from_slice(&stats.std, (1, d), dev)?.to_dtype(ps.dtype())?;
        Ok(Self {
            config,
            stats,
            trunk,
            heads,
            params: ps,
            mean,
            std,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// z-scored predictions `(N, D)` in flattened group order.
    pub fn forward_normalized(&self, images: &Tensor) -> Result<Tensor> {
        let h = self.trunk.forward(images)?;
        let outs = self
            .heads
            .iter()
            .map(|head| head.forward(&h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 1)?)
    }

    /// Predictions in coefficient units, differentiable with respect to the images.
    pub fn forward_raw(&self, images: &Tensor) -> Result<Tensor> {
        let z = self.forward_normalized(images)?;
        Ok(z.broadcast_mul(&self.std)?.broadcast_add(&self.mean)?)
    }

    /// Regresses a valid coefficient set from each image.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Vec<CoefficientSet>> {
        let raw: Vec<Vec<f64>> = self.forward_raw(images)?.to_dtype(DType::F64)?.to_vec2()?;
        raw.iter().map(|r| squash(r, self.config.dims)).collect()
    }

    pub fn encode(&self, image: &Image) -> Result<CoefficientSet> {
        let x = image.to_tensor(self.dtype())?;
        Ok(self.encode_batch(&x)?.remove(0))
    }

    pub fn to_container(&self, seed: u64) -> Result<Container> {
        let mut c = Container::new(ENCODER_KIND);
        c.config = serde_json::to_value(&self.config)?;
        c.meta = serde_json::json!({ "stats": self.stats, "seed": seed });
        c.insert_group("params", &self.params.snapshot()?);
        Ok(c)
    }

    /// Rebuilds a model from a container. With `trainable = false` the
    /// parameters are plain tensors and never receive gradients.
    pub fn from_container(c: &Container, dtype: DType, trainable: bool) -> Result<Self> {
        c.expect_kind(ENCODER_KIND)?;
        let config: EncoderConfig = serde_json::from_value(c.config.clone())?;
        let stats: NormStats = serde_json::from_value(c.meta["stats"].clone())?;
        Self::build(config, stats, ParamStore::from_values(c.group("params"), dtype, trainable))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.to_container(seed)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, DType::F32, false)
    }
}

/// Maps raw regressed values onto a valid coefficient set: positive scale via a
/// sharp softplus, unit light direction, clamped ranges.
pub fn squash(raw: &[f64], dims: CoefficientDims) -> Result<CoefficientSet> {
    let mut c = CoefficientSet::unflatten(raw, dims)?;
    let sharp = 20.0;
    let s = c.alpha.scale * sharp;
    c.alpha.scale = (s.max(0.0) + (-s.abs()).exp().ln_1p()) / sharp;
    c.alpha.scale = c.alpha.scale.max(1e-6);
    let pi = std::f64::consts::PI;
    c.beta.yaw = c.beta.yaw.clamp(-pi, pi);
    c.beta.pitch = c.beta.pitch.clamp(-pi, pi);
    c.beta.roll = c.beta.roll.clamp(-pi, pi);
    c.beta.jaw = c.beta.jaw.clamp(0.0, 1.0);
    let Lighting {
        ambient,
        direction: d,
        intensity,
    } = c.lambda_;
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    c.lambda_ = Lighting {
        ambient: ambient.clamp(0.0, 1.0),
        direction: if n > 1e-9 && n.is_finite() {
            [d[0] / n, d[1] / n, d[2] / n]
        } else {
            [0.0, 0.0, 1.0]
        },
        intensity: intensity.clamp(0.0, 1.0),
    };
    for v in c.theta.iter_mut().chain(c.phi.iter_mut()).chain(c.mu.iter_mut()) {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    Ok(c)
}

/// Hyperparameters shared by the encoder and embedder training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Re-composite each face over a random background every time it is drawn.
    /// Labels do not depend on the background, so this only removes a nuisance factor.
    pub augment_backgrounds: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 1,
            augment_backgrounds: true,
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Stacks every image of a dataset into one `(N, 3, H, W)` tensor.
pub fn dataset_images(d: &Dataset, dtype: DType) -> Result<Tensor> {
    let imgs: Vec<&Image> = d.samples.iter().map(|s| &s.image).collect();
    Image::stack(&imgs, dtype)
}

const BACKGROUND_POOL: usize = 512;

/// Training images as face layers plus masks, so batches can be re-composited
/// over backgrounds drawn from a fixed seeded pool.
struct ImageSource {
    images: Tensor,
    faces: Option<(Tensor, Tensor, Tensor)>,
}

impl ImageSource {
    fn new(d: &Dataset, augment: bool, seed: u64) -> Result<Self> {
        let images = dataset_images(d, DType::F32)?;
        if !augment {
            return Ok(Self { images, faces: None });
        }
        let (n, r) = (d.len(), d.resolution);
        let mask: Vec<f32> = d
            .samples
            .iter()
            .flat_map(|s| s.parsing.iter().map(|&l| if l == crate::face_model::BACKGROUND { 0.0 } else { 1.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (n, 1, r, r), &candle_core::Device::Cpu)?;
        let faces = images.broadcast_mul(&mask)?;
        let pool: Vec<Image> = (0..BACKGROUND_POOL)
            .map(|i| crate::face_model::scene::background(seed.wrapping_mul(31).wrapping_add(i as u64), r))
            .collect();
        let pool = Image::stack(&pool.iter().collect::<Vec<_>>(), DType::F32)?;
        Ok(Self {
            images,
            faces: Some((faces, (1.0 - mask)?, pool)),
        })
    }

    fn batch(&self, idx: &[u32], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let ids = Tensor::new(idx, &candle_core::Device::Cpu)?;
        match &self.faces {
            None => Ok(self.images.index_select(&ids, 0)?),
            Some((faces, inv_mask, pool)) => {
                let picks: Vec<u32> = idx.iter().map(|_| rng.gen_range(0..BACKGROUND_POOL as u32)).collect();
                let bg = pool.index_select(&Tensor::new(picks.as_slice(), &candle_core::Device::Cpu)?, 0)?;
                let x = (faces.index_select(&ids, 0)? + bg.broadcast_mul(&inv_mask.index_select(&ids, 0)?)?)?;
                Ok(x)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Final validation MSE per coefficient group, in normalized units.
    pub val_group_mse: Vec<(String, f64)>,
}

fn group_mse(pred: &[Vec<f64>], target: &[Vec<f64>], dims: CoefficientDims) -> Vec<(String, f64)> {
    CoefficientGroup::ALL
        .iter()
        .map(|&g| {
            let (o, l) = (dims.group_offset(g), dims.group_len(g));
            let mut acc = 0.0;
            for (p, t) in pred.iter().zip(target) {
                acc += (o..o + l).map(|j| (p[j] - t[j]).powi(2)).sum::<f64>();
            }
            (g.name().to_string(), acc / (pred.len() * l) as f64)
        })
        .collect()
}

/// Mean over groups of the per-group normalized MSE.
fn encoder_loss(pred: &Tensor, target: &Tensor, dims: CoefficientDims) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for g in CoefficientGroup::ALL {
        let (o, l) = (dims.group_offset(g), dims.group_len(g));
        let term = (pred.narrow(1, o, l)? - target.narrow(1, o, l)?)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.expect("six groups") / CoefficientGroup::ALL.len() as f64)?)
}

/// Evaluates the encoder on a dataset: (mean-over-groups loss, per-group MSE).
pub fn evaluate_encoder(model: &EncoderModel, d: &Dataset) -> Result<(f64, Vec<(String, f64)>)> {
    ensure!(!d.is_empty(), "empty evaluation set");
    let dims = model.config.dims;
    let mut preds = Vec::with_capacity(d.len());
    for chunk in d.samples.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let z: Vec<Vec<f64>> = model
            .forward_normalized(&Image::stack(&imgs, model.dtype())?)?
            .detach()
            .to_dtype(DType::F64)?
            .to_vec2()?;
        preds.extend(z);
    }
    let targets: Vec<Vec<f64>> = d.samples.iter().map(|s| model.stats.normalize(&s.coefficients)).collect();
    let groups = group_mse(&preds, &targets, dims);
    let mean = groups.iter().map(|(_, v)| v).sum::<f64>() / groups.len() as f64;
    Ok((mean, groups))
}

/// Trains the coefficient regressor with direct supervision on ground-truth
/// coefficients. Normalization statistics come from the training set.
pub fn train_encoder(
    train: &Dataset,
    val: &Dataset,
    trunk: TrunkConfig,
    fit: &FitConfig,
) -> Result<(EncoderModel, EncoderReport)> {
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(!val.is_empty(), "validation set is empty");
    ensure!(train.resolution == trunk.resolution, "dataset resolution {} != model resolution {}", train.resolution, trunk.resolution);
    let dims = train.samples[0].coefficients.dims();
    let stats = NormStats::from_coefficients(train.samples.iter().map(|s| &s.coefficients))?;
    let model = EncoderModel::new(EncoderConfig { trunk, dims }, stats, fit.seed, DType::F32)?;
    let mut report = EncoderReport::default();
    if fit.epochs == 0 {
        return Ok((model, report));
    }

    let source = ImageSource::new(train, fit.augment_backgrounds, fit.seed)?;
    let targets: Vec<f32> = train
        .samples
        .iter()
        .flat_map(|s| model.stats.normalize(&s.coefficients))
        .map(|v| v as f32)
        .collect();
    let targets = Tensor::from_vec(targets, (train.len(), dims.total()), &candle_core::Device::Cpu)?;
    let mut opt = Adam::new(model.params.named_vars(), AdamConfig { lr: fit.lr, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed ^ 0x5eed_e4c0);
    let steps_per_epoch = train.len().div_ceil(fit.batch_size);
    let total = steps_per_epoch * fit.epochs;
    let mut order: Vec<u32> = (0..train.len() as u32).collect();
    let mut step = 0;
    for epoch in 0..fit.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        for chunk in order.chunks(fit.batch_size) {
            let x = source.batch(chunk, &mut rng)?;
            let y = targets.index_select(&Tensor::new(chunk, &candle_core::Device::Cpu)?, 0)?;
            let loss = encoder_loss(&model.forward_normalized(&x)?, &y, dims)?;
            let lv = ops::scalar(&loss)?;
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    step: step as u64,
                    report: format!("encoder loss {lv} in epoch {epoch}"),
                });
            }
            acc += lv * chunk.len() as f64;
            opt.set_lr(cosine_lr(fit.lr, step, total));
            opt.step(&loss.backward()?)?;
            step += 1;
        }
        let (val_loss, groups) = evaluate_encoder(&model, val)?;
        log::info!("encoder epoch {} train {:.4} val {:.4}", epoch + 1, acc / train.len() as f64, val_loss);
        report.train_loss.push(acc / train.len() as f64);
        report.val_loss.push(val_loss);
        report.val_group_mse = groups;
    }
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub trunk: TrunkConfig,
    pub embed_dim: usize,
}

/// Maps a face image to a unit-norm identity embedding.
pub struct IdentityEmbedder {
    config: EmbedderConfig,
    trunk: Trunk,
    head: Linear,
    params: ParamStore,
}

/// Logit scale of the cosine classifier used only during training.
const CLASSIFIER_SCALE: f64 = 10.0;

impl IdentityEmbedder {
    pub fn new(config: EmbedderConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(config, ParamStore::new(seed, dtype))
    }

    fn build(config: EmbedderConfig, mut ps: ParamStore) -> Result<Self> {
        let trunk = ps.scoped("trunk", |ps| Trunk::new(ps, &config.trunk))?;
        let head = Linear::new(&mut ps, "embed", config.trunk.hidden, config.embed_dim, 1.0)?;
        Ok(Self {
            config,
            trunk,
            head,
            params: ps,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Unit-norm embeddings `(N, D)`, differentiable with respect to the images.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let e = self.head.forward(&self.trunk.forward(images)?)?;
        ops::l2_normalize(&e, 1, 1e-12)
    }

    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let e: Vec<Vec<f64>> = self
            .forward(&image.to_tensor(self.dtype())?)?
            .to_dtype(DType::F64)?
            .to_vec2()?;
        Ok(e.into_iter().next().expect("one row"))
    }

    pub fn embed_batch(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(images)?.detach().to_dtype(DType::F64)?.to_vec2()?)
    }

    pub fn to_container(&self, seed: u64) -> Result<Container> {
        let mut c = Container::new(EMBEDDER_KIND);
        c.config = serde_json::to_value(&self.config)?;
        c.meta = serde_json::json!({ "seed": seed });
        c.insert_group("params", &self.params.snapshot()?);
        Ok(c)
    }

    pub fn from_container(c: &Container, dtype: DType, trainable: bool) -> Result<Self> {
        c.expect_kind(EMBEDDER_KIND)?;
        let config: EmbedderConfig = serde_json::from_value(c.config.clone())?;
        Self::build(config, ParamStore::from_values(c.group("params"), dtype, trainable))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.to_container(seed)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, DType::F32, false)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(n * n) == n exactly, so identical inputs give exactly 1
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
}

/// Mean same-identity and cross-identity cosine similarity over a dataset.
pub fn identity_separation(model: &IdentityEmbedder, d: &Dataset) -> Result<(f64, f64)> {
    let mut emb = Vec::with_capacity(d.len());
    for chunk in d.samples.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        emb.extend(model.embed_batch(&Image::stack(&imgs, model.dtype())?)?);
    }
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            let c = cosine(&emb[i], &emb[j]);
            if d.samples[i].identity_id == d.samples[j].identity_id {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    ensure!(ns > 0 && nc > 0, "need at least two identities with two samples each");
    Ok((same / ns as f64, cross / nc as f64))
}

/// Trains the embedder as a cosine classifier over identity ids; the
/// classifier weights are discarded afterwards.
pub fn train_embedder(train: &Dataset, trunk: TrunkConfig, fit: &FitConfig) -> Result<(IdentityEmbedder, EmbedderReport)> {
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(train.resolution == trunk.resolution, "dataset resolution {} != model resolution {}", train.resolution, trunk.resolution);
    let ids = train.identities();
    ensure!(ids.len() >= 2, "identity training needs at least two identities");
    let model = IdentityEmbedder::new(
        EmbedderConfig {
            trunk,
            embed_dim: EMBED_DIM,
        },
        fit.seed,
        DType::F32,
    )?;
    let mut report = EmbedderReport::default();
    if fit.epochs == 0 {
        return Ok((model, report));
    }
    let mut cls_store = ParamStore::new(fit.seed ^ 0xc1a5, DType::F32);
    let classifier = cls_store.param(
        "classifier",
        &[ids.len(), EMBED_DIM],
        crate::nn::Init::Uniform {
            fan_in: EMBED_DIM,
            gain: 1.0,
        },
    )?;
    let class_of: BTreeMap<u64, u32> = ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
    let labels: Vec<u32> = train.samples.iter().map(|s| class_of[&s.identity_id]).collect();
    let source = ImageSource::new(train, fit.augment_backgrounds, fit.seed)?;
    let labels = Tensor::new(labels.as_slice(), &candle_core::Device::Cpu)?;

    let mut vars = model.params.named_vars().to_vec();
    vars.extend(cls_store.named_vars().iter().cloned());
    let mut opt = Adam::new(&vars, AdamConfig { lr: fit.lr, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed ^ 0x1d_e4b3);
    let steps_per_epoch = train.len().div_ceil(fit.batch_size);
    let total = steps_per_epoch * fit.epochs;
    let mut order: Vec<u32> = (0..train.len() as u32).collect();
    let mut step = 0;
    for epoch in 0..fit.epochs {
        order.shuffle(&mut rng);
        let (mut acc_loss, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(fit.batch_size) {
            let x = source.batch(chunk, &mut rng)?;
            let y = labels.index_select(&Tensor::new(chunk, &candle_core::Device::Cpu)?, 0)?;
            let e = model.forward(&x)?;
            let w = ops::l2_normalize(&classifier, 1, 1e-12)?;
            let logits = (e.matmul(&w.t()?)? * CLASSIFIER_SCALE)?;
            let logp = ops::log_softmax_last(&logits)?;
            let picked = logp.gather(&y.unsqueeze(1)?, 1)?;
            let loss = picked.mean_all()?.neg()?;
            let lv = ops::scalar(&loss)?;
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    step: step as u64,
                    report: format!("embedder loss {lv} in epoch {epoch}"),
                });
            }
            let pred: Vec<u32> = logits.argmax(1)?.to_vec1()?;
            let truth: Vec<u32> = y.to_vec1()?;
            correct += pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
            acc_loss += lv * chunk.len() as f64;
            opt.set_lr(cosine_lr(fit.lr, step, total));
            opt.step(&loss.backward()?)?;
            step += 1;
        }
        let n = train.len() as f64;
        log::info!("embedder epoch {} loss {:.4} acc {:.3}", epoch + 1, acc_loss / n, correct as f64 / n);
        report.train_loss.push(acc_loss / n);
        report.train_accuracy.push(correct as f64 / n);
    }
    Ok((model, report))
}
