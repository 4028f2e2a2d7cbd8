//! Synthetic datasets and their on-disk layout (PNG images plus a JSON-lines manifest).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::basis::FaceBasis;
use super::coefficients::{sample_coefficients, CoefficientSet, SamplingPrior};
use super::raster::render_proxy;
use super::scene::compose_scene;
use crate::error::{ensure, Error, Result};
use crate::imageio::{self, Image};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One synthetic portrait with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub identity_id: u64,
    pub coefficients: CoefficientSet,
    pub image: Image,
    pub parsing: Vec<u8>,
    pub landmarks: Vec<[f32; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub samples: Vec<Sample>,
}

/// How backgrounds are assigned to samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    /// Every frame of an identity shares one background, like frames of one video.
    PerIdentity,
    /// Each sample draws its own background.
    PerSample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub identities: usize,
    pub frames_per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
    /// First identity id; lets train and held-out sets use disjoint identities.
    pub identity_offset: u64,
    pub background: BackgroundMode,
    pub prior: SamplingPrior,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            identities: 16,
            frames_per_identity: 16,
            resolution: 64,
            seed: 0,
            identity_offset: 0,
            background: BackgroundMode::PerIdentity,
            prior: SamplingPrior::default(),
        }
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one sample; a pure function of its arguments.
pub fn make_sample(
    basis: &FaceBasis,
    spec: &DatasetSpec,
    identity_id: u64,
    frame: usize,
    sample_id: u64,
) -> Result<Sample> {
    let coeff_seed = mix_seed(spec.seed, sample_id.wrapping_add(identity_id << 32));
    let coefficients = sample_coefficients(coeff_seed, Some(identity_id), basis.dims(), &spec.prior);
    let proxy = render_proxy(&coefficients, basis, spec.resolution)?;
    let bg_seed = match spec.background {
        BackgroundMode::PerIdentity => mix_seed(spec.seed ^ 0xb9, identity_id),
        BackgroundMode::PerSample => mix_seed(spec.seed ^ 0xb9, identity_id ^ ((frame as u64 + 1) << 40)),
    };
    let scene = compose_scene(&proxy, bg_seed);
    Ok(Sample {
        sample_id,
        identity_id,
        coefficients,
        image: scene.image,
        parsing: scene.parsing,
        landmarks: scene.landmarks,
    })
}

/// Generates `identities x frames_per_identity` samples, identity-major.
pub fn generate_dataset(basis: &FaceBasis, spec: &DatasetSpec) -> Result<Dataset> {
    ensure!(spec.identities > 0 && spec.frames_per_identity > 0, "empty dataset spec");
    let mut samples = Vec::with_capacity(spec.identities * spec.frames_per_identity);
    for i in 0..spec.identities {
        let identity_id = spec.identity_offset + i as u64;
        for f in 0..spec.frames_per_identity {
            let sample_id = (i * spec.frames_per_identity + f) as u64;
            samples.push(make_sample(basis, spec, identity_id, f, sample_id)?);
        }
    }
    Ok(Dataset {
        resolution: spec.resolution,
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct identity ids in first-seen order.
    pub fn identities(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = Vec::new();
        for s in &self.samples {
            if !ids.contains(&s.identity_id) {
                ids.push(s.identity_id);
            }
        }
        ids
    }

    /// Indices of the samples of each identity, ordered as [`identities`](Self::identities).
    pub fn by_identity(&self) -> Vec<(u64, Vec<usize>)> {
        self.identities()
            .into_iter()
            .map(|id| {
                let idx = (0..self.samples.len())
                    .filter(|&i| self.samples[i].identity_id == id)
                    .collect();
                (id, idx)
            })
            .collect()
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: u64,
    pub identity_id: u64,
    pub coefficients: CoefficientSet,
    pub image: String,
    pub parsing: String,
    pub landmarks: String,
}

/// File names of the sidecars written next to an exported image.
pub fn sidecar_paths(image: &Path) -> (PathBuf, PathBuf) {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let dir = image.parent().unwrap_or(Path::new("."));
    (
        dir.join(format!("{stem}.parsing.png")),
        dir.join(format!("{stem}.landmarks.json")),
    )
}

/// Writes `dir/images/<id>.png` with parsing and landmark sidecars, plus `dir/manifest.jsonl`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest_path = dir.join(MANIFEST_NAME);
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        let rel_img = format!("images/{:06}.png", s.sample_id);
        let img_path = dir.join(&rel_img);
        imageio::write_png(&img_path, &s.image)?;
        let (parsing_path, lm_path) = sidecar_paths(&img_path);
        imageio::write_label_png(&parsing_path, dataset.resolution, dataset.resolution, &s.parsing)?;
        let lm_json = serde_json::to_vec(&s.landmarks)?;
        fs::write(&lm_path, lm_json).map_err(|e| Error::io(&lm_path, e))?;
        let rel = |p: &Path| {
            p.strip_prefix(dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        };
        let record = ManifestRecord {
            sample_id: s.sample_id,
            identity_id: s.identity_id,
            coefficients: s.coefficients.clone(),
            image: rel_img,
            parsing: rel(&parsing_path),
            landmarks: rel(&lm_path),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_NAME);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

pub fn read_landmarks(path: &Path) -> Result<Vec<[f32; 2]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads an exported dataset. Images come back 8-bit quantized.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let records = read_manifest(dir)?;
    ensure!(!records.is_empty(), "manifest in {} is empty", dir.display());
    let mut samples = Vec::with_capacity(records.len());
    let mut resolution = 0;
    for r in records {
        let image = imageio::read_png(&dir.join(&r.image))?;
        let (w, h, parsing) = imageio::read_label_png(&dir.join(&r.parsing))?;
        ensure!(
            w == image.width && h == image.height && w == h,
            "sample {} has inconsistent sizes",
            r.sample_id
        );
        if resolution == 0 {
            resolution = w;
        }
        ensure!(w == resolution, "sample {} has resolution {w}, expected {resolution}", r.sample_id);
        samples.push(Sample {
            sample_id: r.sample_id,
            identity_id: r.identity_id,
            coefficients: r.coefficients,
            image,
            parsing,
            landmarks: read_landmarks(&dir.join(&r.landmarks))?,
        });
    }
    Ok(Dataset { resolution, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let spec = DatasetSpec {
            identities: 3,
            frames_per_identity: 2,
            seed: 5,
            ..Default::default()
        };
        generate_dataset(FaceBasis::bundled(), &spec).unwrap()
    }

    #[test]
    fn frames_of_an_identity_share_identity_coefficients() {
        let d = small();
        assert_eq!(d.len(), 6);
        let (a, b) = (&d.samples[0], &d.samples[1]);
        assert_eq!(a.identity_id, b.identity_id);
        assert_eq!(a.coefficients.phi, b.coefficients.phi);
        assert_ne!(a.coefficients.beta, b.coefficients.beta);
        assert_eq!(d.identities(), vec![0, 1, 2]);
    }

    #[test]
    fn export_and_reload() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), d.len());
        for (x, y) in back.samples.iter().zip(&d.samples) {
            assert_eq!(x.coefficients, y.coefficients);
            assert_eq!(x.parsing, y.parsing);
            assert_eq!(x.landmarks, y.landmarks);
            let err = x
                .image
                .data
                .iter()
                .zip(&y.image.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
        let records = read_manifest(dir.path()).unwrap();
        assert_eq!(records[3].image, "images/000003.png");
        assert_eq!(records[3].parsing, "images/000003.parsing.png");
    }
}
