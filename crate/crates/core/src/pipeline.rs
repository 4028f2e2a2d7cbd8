//! End-to-end re-enactment: encode source and driving images, mix their
//! coefficients, render proxies, estimate the correspondence, warp the source
//! priors and generate the output.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::correspondence::{CorrespondenceConfig, CorrespondenceField, CorrespondenceNet};
use crate::encoder::{EncoderModel, IdentityEmbedder};
use crate::error::{ensure, Error, Result};
use crate::face_model::{
    landmark_heatmaps, mix_coefficients, render_proxy, CoefficientSet, FaceBasis, ProxyRender, BACKGROUND, N_LABELS,
};
use crate::imageio::{self, Image};
use crate::nn::{ops, ParamStore};
use crate::synthesis::{Discriminator, Generator, GeneratorConfig, PriorBundle};

/// Architecture of the trainable re-enactment networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub correspondence: CorrespondenceConfig,
    pub generator: GeneratorConfig,
}

impl ModelConfig {
    pub fn desk(resolution: usize) -> Self {
        Self {
            correspondence: CorrespondenceConfig::desk(resolution),
            generator: GeneratorConfig::desk(resolution),
        }
    }

    pub fn resolution(&self) -> usize {
        self.generator.resolution
    }

    pub fn validate(&self) -> Result<()> {
        self.correspondence.validate()?;
        self.generator.validate()?;
        if self.correspondence.resolution != self.generator.resolution {
            return Err(Error::Config(format!(
                "correspondence resolution {} differs from generator resolution {}",
                self.correspondence.resolution, self.generator.resolution
            )));
        }
        Ok(())
    }
}

/// Correspondence network and generator (one parameter store) plus the
/// discriminator (its own store).
pub struct DcgModel {
    config: ModelConfig,
    pub corr: CorrespondenceNet,
    pub generator: Generator,
    pub discriminator: Discriminator,
    g_params: ParamStore,
    d_params: ParamStore,
}

impl DcgModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let g = ParamStore::new(seed, dtype);
        let d = ParamStore::new(seed ^ 0xd15c, dtype);
        Self::build(config, g, d)
    }

    fn build(config: ModelConfig, mut g: ParamStore, mut d: ParamStore) -> Result<Self> {
        config.validate()?;
        let corr = CorrespondenceNet::new(&mut g, config.correspondence.clone())?;
        let generator = Generator::new(&mut g, config.generator.clone())?;
        let discriminator = Discriminator::new(&mut d, config.resolution())?;
        Ok(Self {
            config,
            corr,
            generator,
            discriminator,
            g_params: g,
            d_params: d,
        })
    }

    /// Rebuilds from the `g/` and `d/` tensor groups of a container.
    pub fn from_container(c: &Container, config: ModelConfig, dtype: DType, trainable: bool) -> Result<Self> {
        let g = ParamStore::from_values(c.group("g"), dtype, trainable);
        let d = ParamStore::from_values(c.group("d"), dtype, trainable);
        Self::build(config, g, d)
    }

    pub fn insert_into(&self, c: &mut Container) -> Result<()> {
        c.insert_group("g", &self.g_params.snapshot()?);
        c.insert_group("d", &self.d_params.snapshot()?);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn g_params(&self) -> &ParamStore {
        &self.g_params
    }

    pub fn d_params(&self) -> &ParamStore {
        &self.d_params
    }

    pub fn dtype(&self) -> DType {
        self.g_params.dtype()
    }

    pub fn forward(&self, x: &PairInputs) -> Result<Forward> {
        let f_s = self
            .corr
            .source_features(&x.source_proxy, &x.source_heatmaps, &x.source_parsing)?;
        let f_r = self.corr.target_features(&x.target_proxy, &x.target_heatmaps)?;
        let field = self.corr.field(&f_s, &f_r)?;
        let priors = PriorBundle::warp(&field, &x.source_image, &x.source_parsing, &x.source_proxy)?;
        let output = self.generator.forward(&priors)?;
        Ok(Forward { field, priors, output })
    }
}

/// Per-pair views needed by the networks.
#[derive(Debug, Clone, Copy)]
pub struct PairViews<'a> {
    pub source_image: &'a Image,
    /// Per-pixel labels of the source image.
    pub source_parsing: &'a [u8],
    pub source_proxy: &'a ProxyRender,
    pub target_proxy: &'a ProxyRender,
}

/// Batched network inputs, all `(N, C, H, W)` at full resolution.
#[derive(Debug, Clone)]
pub struct PairInputs {
    pub source_image: Tensor,
    /// One-hot, `N_LABELS` channels.
    pub source_parsing: Tensor,
    pub source_proxy: Tensor,
    pub source_heatmaps: Tensor,
    pub target_proxy: Tensor,
    pub target_heatmaps: Tensor,
}

impl PairInputs {
    pub fn build(items: &[PairViews<'_>], dtype: DType) -> Result<Self> {
        ensure!(!items.is_empty(), "empty batch");
        let res = items[0].source_image.height;
        for it in items {
            for (what, img) in [
                ("source image", it.source_image),
                ("source proxy", &it.source_proxy.image),
                ("target proxy", &it.target_proxy.image),
            ] {
                ensure!(
                    img.height == res && img.width == res,
                    "{what} is {}x{}, expected {res}x{res}",
                    img.height,
                    img.width
                );
            }
            ensure!(it.source_parsing.len() == res * res, "source parsing map has the wrong size");
        }
        let stack = |f: &dyn Fn(&PairViews<'_>) -> Image| -> Result<Tensor> {
            let imgs: Vec<Image> = items.iter().map(f).collect();
            Image::stack(&imgs.iter().collect::<Vec<_>>(), dtype)
        };
        let labels: Vec<Vec<u8>> = items.iter().map(|it| it.source_parsing.to_vec()).collect();
        Ok(Self {
            source_image: stack(&|it| it.source_image.clone())?,
            source_parsing: ops::one_hot_maps(&labels, N_LABELS, res, res, dtype)?,
            source_proxy: stack(&|it| it.source_proxy.image.clone())?,
            source_heatmaps: stack(&|it| landmark_heatmaps(&it.source_proxy.landmarks, res))?,
            target_proxy: stack(&|it| it.target_proxy.image.clone())?,
            target_heatmaps: stack(&|it| landmark_heatmaps(&it.target_proxy.landmarks, res))?,
        })
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    pub field: CorrespondenceField,
    pub priors: PriorBundle,
    /// `I_r`, `(N, 3, H, W)` in `[0, 1]`.
    pub output: Tensor,
}

/// Frozen auxiliary models and the networks needed at inference time.
pub struct Reenactor {
    pub encoder: EncoderModel,
    pub embedder: IdentityEmbedder,
    pub model: DcgModel,
    basis: FaceBasis,
}

/// Intermediate and final results of one re-enactment.
#[derive(Debug, Clone)]
pub struct Reenactment {
    pub source_coefficients: CoefficientSet,
    pub driving_coefficients: CoefficientSet,
    pub mixed: CoefficientSet,
    pub source_proxy: ProxyRender,
    pub target_proxy: ProxyRender,
    pub field: CorrespondenceField,
    pub priors: PriorBundle,
    pub output: Image,
}

impl Reenactor {
    pub fn new(encoder: EncoderModel, embedder: IdentityEmbedder, model: DcgModel, basis: FaceBasis) -> Result<Self> {
        let res = model.config().resolution();
        ensure!(
            encoder.config().trunk.resolution == res && embedder.config().trunk.resolution == res,
            "encoder, embedder and generator resolutions disagree"
        );
        ensure!(
            encoder.config().dims == basis.dims(),
            "encoder coefficient layout does not match the face basis"
        );
        Ok(Self {
            encoder,
            embedder,
            model,
            basis,
        })
    }

    pub fn resolution(&self) -> usize {
        self.model.config().resolution()
    }

    pub fn basis(&self) -> &FaceBasis {
        &self.basis
    }

    pub fn encoder(&self) -> &EncoderModel {
        &self.encoder
    }

    pub fn embedder(&self) -> &IdentityEmbedder {
        &self.embedder
    }

    fn check_image(&self, image: &Image, what: &str) -> Result<()> {
        let r = self.resolution();
        ensure!(
            image.channels == 3 && image.height == r && image.width == r,
            "{what} is {}x{}x{}, model expects 3x{r}x{r}",
            image.channels,
            image.height,
            image.width
        );
        Ok(())
    }

    /// Re-enacts `source` with the pose and expression of `driving`.
    ///
    /// Without a parsing map for the source, the rendered source proxy's
    /// region map stands in for it.
    pub fn reenact(&self, source: &Image, source_parsing: Option<&[u8]>, driving: &Image) -> Result<Reenactment> {
        self.check_image(source, "source image")?;
        self.check_image(driving, "driving image")?;
        let res = self.resolution();
        let c_s = self.encoder.encode(source)?;
        let c_d = self.encoder.encode(driving)?;
        let mixed = mix_coefficients(&c_s, &c_d);
        let p_s = render_proxy(&c_s, &self.basis, res)?;
        let p_r = render_proxy(&mixed, &self.basis, res)?;
        let fallback: Vec<u8>;
        let parsing = match source_parsing {
            Some(p) => p,
            None => {
                fallback = p_s
                    .region_map
                    .iter()
                    .zip(&p_s.mask)
                    .map(|(&r, &m)| if m == 1 { r } else { BACKGROUND })
                    .collect();
                &fallback
            }
        };
        let inputs = PairInputs::build(
            &[PairViews {
                source_image: source,
                source_parsing: parsing,
                source_proxy: &p_s,
                target_proxy: &p_r,
            }],
            self.model.dtype(),
        )?;
        let fwd = self.model.forward(&inputs)?;
        Ok(Reenactment {
            source_coefficients: c_s,
            driving_coefficients: c_d,
            mixed,
            source_proxy: p_s,
            target_proxy: p_r,
            field: fwd.field,
            output: Image::from_tensor(&fwd.output)?,
            priors: fwd.priors,
        })
    }

    /// Runs only the generator on previously dumped priors.
    pub fn generate_from_priors(&self, priors: &PriorBundle) -> Result<Image> {
        let p = PriorBundle {
            image: priors.image.to_dtype(self.model.dtype())?,
            parsing: priors.parsing.to_dtype(self.model.dtype())?,
            proxy: priors.proxy.to_dtype(self.model.dtype())?,
        };
        Image::from_tensor(&self.model.generator.forward(&p)?)
    }
}

const PRIOR_FILES: [&str; 3] = ["image_warp", "parsing_warp", "proxy_warp"];

/// Writes the intermediate set of one re-enactment into `dir`: the two proxies
/// and the warped priors as PNGs, the warped priors as exact raw arrays, and
/// the correspondence matrix.
pub fn write_debug_dump(r: &Reenactment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    imageio::write_png(&dir.join("source_proxy.png"), &r.source_proxy.image)?;
    imageio::write_png(&dir.join("target_proxy.png"), &r.target_proxy.image)?;
    imageio::write_png(&dir.join("image_warp.png"), &Image::from_tensor(&r.priors.image)?)?;
    imageio::write_png(&dir.join("proxy_warp.png"), &Image::from_tensor(&r.priors.proxy)?)?;
    let labels = argmax_labels(&r.priors.parsing)?;
    let h = r.priors.resolution();
    imageio::write_label_png(&dir.join("parsing_warp.png"), h, h, &labels)?;
    for (name, t) in PRIOR_FILES.iter().zip([&r.priors.image, &r.priors.parsing, &r.priors.proxy]) {
        write_raw(dir, name, t)?;
    }
    r.field.dump(dir, "correspondence")
}

/// Reads the exact warped priors written by [`write_debug_dump`].
pub fn read_prior_dump(dir: &Path) -> Result<PriorBundle> {
    let [image, parsing, proxy] = PRIOR_FILES.map(|n| read_raw(dir, n));
    Ok(PriorBundle {
        image: image?,
        parsing: parsing?,
        proxy: proxy?,
    })
}

fn argmax_labels(one_hot: &Tensor) -> Result<Vec<u8>> {
    let idx: Vec<u32> = one_hot.argmax(1)?.flatten_all()?.to_vec1()?;
    Ok(idx.into_iter().map(|i| i as u8).collect())
}

fn write_raw(dir: &Path, stem: &str, t: &Tensor) -> Result<()> {
    let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let data = dir.join(format!("{stem}.f32"));
    fs::write(&data, bytes).map_err(|e| Error::io(&data, e))?;
    let meta = dir.join(format!("{stem}.json"));
    let sidecar = serde_json::json!({ "shape": t.dims(), "dtype": "f32", "layout": "row-major little-endian" });
    fs::write(&meta, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&meta, e))
}

fn read_raw(dir: &Path, stem: &str) -> Result<Tensor> {
    let meta = dir.join(format!("{stem}.json"));
    let sidecar: serde_json::Value = serde_json::from_slice(&fs::read(&meta).map_err(|e| Error::io(&meta, e))?)?;
    let shape: Vec<usize> = serde_json::from_value(sidecar["shape"].clone())?;
    let data = dir.join(format!("{stem}.f32"));
    let bytes = fs::read(&data).map_err(|e| Error::io(&data, e))?;
    ensure!(
        bytes.len() == 4 * shape.iter().product::<usize>(),
        "{} does not match its declared shape {shape:?}",
        data.display()
    );
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EmbedderConfig, EncoderConfig, NormStats, TrunkConfig};
    use crate::face_model::{sample_coefficients, CoefficientDims, SamplingPrior};

    fn reenactor(res: usize) -> Reenactor {
        let dims = CoefficientDims::default();
        let sets: Vec<CoefficientSet> = (0..8)
            .map(|s| sample_coefficients(s, Some(s), dims, &SamplingPrior::default()))
            .collect();
        let stats = NormStats::from_coefficients(&sets).unwrap();
        let encoder = EncoderModel::new(
            EncoderConfig {
                trunk: TrunkConfig::desk(res),
                dims,
            },
            stats,
            1,
            DType::F32,
        )
        .unwrap();
        let embedder = IdentityEmbedder::new(
            EmbedderConfig {
                trunk: TrunkConfig::desk(res),
                embed_dim: 16,
            },
            2,
            DType::F32,
        )
        .unwrap();
        let model = DcgModel::new(ModelConfig::desk(res), 3, DType::F32).unwrap();
        Reenactor::new(encoder, embedder, model, FaceBasis::bundled().clone()).unwrap()
    }

    fn scene(seed: u64) -> Image {
        let c = sample_coefficients(seed, Some(seed), CoefficientDims::default(), &SamplingPrior::default());
        let p = render_proxy(&c, FaceBasis::bundled(), 64).unwrap();
        crate::face_model::compose_scene(&p, seed).image
    }

    #[test]
    fn reenactment_shapes_and_determinism() {
        let r = reenactor(64);
        let (s, d) = (scene(1), scene(2));
        let a = r.reenact(&s, None, &d).unwrap();
        assert_eq!((a.output.channels, a.output.height, a.output.width), (3, 64, 64));
        assert_eq!(a.priors.resolution(), 16);
        a.field.check_stochastic(1e-5).unwrap();
        let b = r.reenact(&s, None, &d).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.mixed, mix_coefficients(&a.source_coefficients, &a.driving_coefficients));
        assert!(r.reenact(&Image::zeros(3, 32, 32), None, &d).is_err());
    }

    #[test]
    fn generator_rerun_from_dump_is_identical() {
        let r = reenactor(64);
        let out = r.reenact(&scene(3), None, &scene(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_debug_dump(&out, dir.path()).unwrap();
        for f in ["source_proxy.png", "target_proxy.png", "image_warp.png", "parsing_warp.png", "proxy_warp.png", "correspondence.f32"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let priors = read_prior_dump(dir.path()).unwrap();
        assert_eq!(r.generate_from_priors(&priors).unwrap(), out.output);
        let field = CorrespondenceField::load_dump(dir.path(), "correspondence").unwrap();
        assert_eq!(
            field.matrix.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            out.field.matrix.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn model_round_trips_through_container() {
        let m = DcgModel::new(ModelConfig::desk(64), 5, DType::F32).unwrap();
        let mut c = Container::new("test");
        m.insert_into(&mut c).unwrap();
        let back = DcgModel::from_container(&c, ModelConfig::desk(64), DType::F32, false).unwrap();
        assert_eq!(back.g_params().snapshot().unwrap(), m.g_params().snapshot().unwrap());
        assert_eq!(back.d_params().snapshot().unwrap(), m.d_params().snapshot().unwrap());
    }
}
