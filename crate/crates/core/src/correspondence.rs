//! Dense correspondence between a source proxy and a target proxy.
//!
//! Both proxies pass through a shared convolutional trunk; landmark heatmaps
//! (and, for the source, a one-hot parsing map) are concatenated at the trunk
//! output, and a branch-specific ResBlock stack produces per-position
//! features. The correlation matrix `F` is the row softmax of scaled cosine
//! similarities between target and source positions, and any spatial map is
//! warped by a single matrix product with `F`.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::face_model::{N_LABELS, N_LANDMARKS};
use crate::nn::{ops, Conv2d, ParamStore, ResBlock};

/// Ratio between input resolution and correspondence resolution.
pub const CORR_DOWNSAMPLE: usize = 4;
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceConfig {
    /// Input (proxy) resolution; features live at `resolution / 4`.
    pub resolution: usize,
    pub trunk_channels: [usize; 3],
    pub feature_channels: usize,
    pub res_blocks: usize,
    pub tau: f64,
}

impl CorrespondenceConfig {
    pub fn desk(resolution: usize) -> Self {
        Self {
            resolution,
            trunk_channels: [16, 32, 64],
            feature_channels: 64,
            res_blocks: 2,
            tau: DEFAULT_TAU,
        }
    }

    pub fn corr_resolution(&self) -> usize {
        self.resolution / CORR_DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution >= CORR_DOWNSAMPLE && self.resolution % CORR_DOWNSAMPLE == 0,
            "correspondence input resolution {} must be a multiple of {CORR_DOWNSAMPLE}",
            self.resolution
        );
        ensure!(self.tau > 0.0 && self.tau.is_finite(), "temperature must be positive, got {}", self.tau);
        Ok(())
    }
}

/// Per-position features `(N, c, h, w)`.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub values: Tensor,
}

impl FeatureGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims4()?;
        Ok(Self { values })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[2], d[3])
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }
}

/// Row-stochastic `(N, hw, hw)` matching matrix. Row `i` distributes target
/// position `i` over source positions. The scaled logits are retained when
/// known so the reverse mapping can be formed.
#[derive(Debug, Clone)]
pub struct CorrespondenceField {
    pub matrix: Tensor,
    pub logits: Option<Tensor>,
    pub h: usize,
    pub w: usize,
    pub tau: f64,
}

/// How a spatial map is brought to correspondence resolution before warping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Box averaging, for continuous maps.
    Area,
    /// Nearest sampling, for one-hot label maps.
    Nearest,
}

impl CorrespondenceField {
    /// `F = softmax_rows(scores / tau)`, keeping `scores / tau` as logits.
    pub fn from_scores(scores: &Tensor, h: usize, w: usize, tau: f64) -> Result<Self> {
        ensure!(tau > 0.0 && tau.is_finite(), "temperature must be positive, got {tau}");
        let scores = if scores.rank() == 2 { scores.unsqueeze(0)? } else { scores.clone() };
        let (_, r, c) = scores.dims3()?;
        ensure!(r == h * w && c == h * w, "score matrix {r}x{c} does not match {h}x{w} grid");
        let logits = (scores / tau)?;
        Ok(Self {
            matrix: ops::softmax_last(&logits)?,
            logits: Some(logits),
            h,
            w,
            tau,
        })
    }

    /// Wraps an explicit matrix; it must be row-stochastic. No logits are kept.
    pub fn from_matrix(matrix: &Tensor, h: usize, w: usize) -> Result<Self> {
        let matrix = if matrix.rank() == 2 { matrix.unsqueeze(0)? } else { matrix.clone() };
        let (_, r, c) = matrix.dims3()?;
        ensure!(r == h * w && c == h * w, "matrix {r}x{c} does not match {h}x{w} grid");
        let f = Self {
            matrix,
            logits: None,
            h,
            w,
            tau: f64::NAN,
        };
        f.check_stochastic(1e-5)?;
        Ok(f)
    }

    pub fn batch(&self) -> usize {
        self.matrix.dims()[0]
    }

    /// Verifies nonnegativity, finiteness and unit row sums.
    pub fn check_stochastic(&self, tol: f64) -> Result<()> {
        let m: Vec<Vec<Vec<f64>>> = self.matrix.to_dtype(DType::F64)?.to_vec3()?;
        for (b, rows) in m.iter().enumerate() {
            for (i, row) in rows.iter().enumerate() {
                ensure!(
                    row.iter().all(|v| v.is_finite() && *v >= 0.0),
                    "field {b} row {i} has negative or non-finite entries"
                );
                let s: f64 = row.iter().sum();
                ensure!((s - 1.0).abs() <= tol, "field {b} row {i} sums to {s}");
            }
        }
        Ok(())
    }

    /// Shannon entropy of every row, `(N, hw)`.
    pub fn row_entropy(&self) -> Result<Vec<Vec<f64>>> {
        let m: Vec<Vec<Vec<f64>>> = self.matrix.to_dtype(DType::F64)?.to_vec3()?;
        Ok(m.iter()
            .map(|rows| {
                rows.iter()
                    .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
                    .collect()
            })
            .collect())
    }

    /// Warps `x` `(N, k, H, W)`: resample to `(h, w)`, then `F · x`.
    pub fn warp(&self, x: &Tensor, resample: Resample) -> Result<Tensor> {
        let small = resample_to(x, self.h, self.w, resample)?;
        apply(&self.matrix, &small, self.h, self.w)
    }

    /// Maps a warped map back to source layout with `softmax_rows(logitsᵀ)`.
    pub fn reverse_warp(&self, x_warp: &Tensor) -> Result<Tensor> {
        let logits = self
            .logits
            .as_ref()
            .ok_or_else(|| Error::Validation("reverse warp needs the retained logits".into()))?;
        let (_, _, h, w) = x_warp.dims4()?;
        ensure!((h, w) == (self.h, self.w), "warped map is {h}x{w}, field is {}x{}", self.h, self.w);
        let back = ops::softmax_last(&logits.transpose(1, 2)?.contiguous()?)?;
        apply(&back, x_warp, self.h, self.w)
    }

    /// Writes the first field of the batch as raw little-endian f32 rows plus a JSON sidecar.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m: Vec<f32> = self.matrix.get(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let bytes: Vec<u8> = m.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bin = dir.join(format!("{stem}.f32"));
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let meta = serde_json::json!({ "h": self.h, "w": self.w, "tau": self.tau, "dtype": "f32", "layout": "row-major" });
        let js = dir.join(format!("{stem}.json"));
        std::fs::write(&js, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&js, e))
    }

    /// Reads a field written by [`dump`](Self::dump).
    pub fn load_dump(dir: &Path, stem: &str) -> Result<Self> {
        let js = dir.join(format!("{stem}.json"));
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&js).map_err(|e| Error::io(&js, e))?)?;
        let h = meta["h"].as_u64().ok_or_else(|| Error::Validation("dump lacks h".into()))? as usize;
        let w = meta["w"].as_u64().ok_or_else(|| Error::Validation("dump lacks w".into()))? as usize;
        let bin = dir.join(format!("{stem}.f32"));
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        ensure!(bytes.len() == h * w * h * w * 4, "dump {} has wrong size", bin.display());
        let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let m = Tensor::from_vec(v, (1, h * w, h * w), &candle_core::Device::Cpu)?;
        Ok(Self {
            matrix: m,
            logits: None,
            h,
            w,
            tau: meta["tau"].as_f64().unwrap_or(f64::NAN),
        })
    }
}

fn resample_to(x: &Tensor, h: usize, w: usize, mode: Resample) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    ensure!(
        xh % h == 0 && xw % w == 0 && xh / h == xw / w,
        "cannot resample {xh}x{xw} to {h}x{w} by an integer factor"
    );
    let f = xh / h;
    match mode {
        Resample::Area => ops::downsample_area(x, f),
        Resample::Nearest => ops::downsample_nearest(x, f),
    }
}

fn apply(m: &Tensor, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, k, xh, xw) = x.dims4()?;
    ensure!((xh, xw) == (h, w), "map is {xh}x{xw}, expected {h}x{w}");
    let nb = m.dims()[0];
    ensure!(nb == n || nb == 1, "field batch {nb} does not match map batch {n}");
    let flat = x.reshape((n, k, h * w))?.transpose(1, 2)?.contiguous()?;
    let m = if nb == 1 && n > 1 { m.broadcast_as((n, h * w, h * w))?.contiguous()? } else { m.clone() };
    let out = m.matmul(&flat)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((n, k, h, w))?)
}

/// Per-position channel normalization `(f - mean) / (‖f - mean‖ + eps)`,
/// returned as `(N, hw, c)`.
pub fn normalize_positions(f: &FeatureGrid) -> Result<Tensor> {
    let (n, c, h, w) = f.values.dims4()?;
    let flat = f.values.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?;
    let centered = flat.broadcast_sub(&flat.mean_keepdim(2)?)?;
    ops::l2_normalize(&centered, 2, 1e-8)
}

/// `F = softmax_rows(f̂_r f̂_sᵀ / tau)`.
pub fn correlation_field(f_s: &FeatureGrid, f_r: &FeatureGrid, tau: f64) -> Result<CorrespondenceField> {
    ensure!(tau > 0.0 && tau.is_finite(), "temperature must be positive, got {tau}");
    ensure!(
        f_s.values.dims() == f_r.values.dims(),
        "feature grids differ: {:?} vs {:?}",
        f_s.values.dims(),
        f_r.values.dims()
    );
    let (h, w) = f_s.resolution();
    let s = normalize_positions(f_s)?;
    let r = normalize_positions(f_r)?;
    let scores = r.matmul(&s.transpose(1, 2)?.contiguous()?)?;
    CorrespondenceField::from_scores(&scores, h, w, tau)
}

/// Shared trunk `E_corr` plus the source and target ResBlock branches.
pub struct CorrespondenceNet {
    config: CorrespondenceConfig,
    trunk: Vec<Conv2d>,
    src_in: Conv2d,
    src_blocks: Vec<ResBlock>,
    tgt_in: Conv2d,
    tgt_blocks: Vec<ResBlock>,
}

impl CorrespondenceNet {
    pub fn new(ps: &mut ParamStore, config: CorrespondenceConfig) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.trunk_channels;
        let fc = config.feature_channels;
        ps.scoped("corr", |ps| {
            let trunk = vec![
                Conv2d::new(ps, "trunk0", 3, c1, 3, 1, 1)?,
                Conv2d::new(ps, "trunk1", c1, c2, 3, 2, 1)?,
                Conv2d::new(ps, "trunk2", c2, c3, 3, 2, 1)?,
            ];
            let src_in = Conv2d::new(ps, "src_in", c3 + N_LANDMARKS + N_LABELS, fc, 1, 1, 0)?;
            let src_blocks = (0..config.res_blocks)
                .map(|i| ResBlock::new(ps, &format!("src{i}"), fc))
                .collect::<Result<_>>()?;
            let tgt_in = Conv2d::new(ps, "tgt_in", c3 + N_LANDMARKS, fc, 1, 1, 0)?;
            let tgt_blocks = (0..config.res_blocks)
                .map(|i| ResBlock::new(ps, &format!("tgt{i}"), fc))
                .collect::<Result<_>>()?;
            Ok(Self {
                config: config.clone(),
                trunk,
                src_in,
                src_blocks,
                tgt_in,
                tgt_blocks,
            })
        })
    }

    pub fn config(&self) -> &CorrespondenceConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor, channels: usize, what: &str) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let r = self.config.resolution;
        ensure!(
            c == channels && h == r && w == r,
            "{what} is {c}x{h}x{w}, expected {channels}x{r}x{r}"
        );
        Ok(())
    }

    /// The shared trunk `E_corr`, `(N, 3, H, W) -> (N, c, H/4, W/4)`.
    pub fn trunk(&self, proxy: &Tensor) -> Result<Tensor> {
        self.check_input(proxy, 3, "proxy")?;
        let mut h = proxy.clone();
        for conv in &self.trunk {
            h = conv.forward(&h)?.relu()?;
        }
        Ok(h)
    }

    /// `f_s` from the source proxy, its landmark heatmaps and one-hot parsing map.
    pub fn source_features(&self, proxy: &Tensor, heatmaps: &Tensor, parsing: &Tensor) -> Result<FeatureGrid> {
        self.check_input(heatmaps, N_LANDMARKS, "landmark heatmaps")?;
        self.check_input(parsing, N_LABELS, "parsing map")?;
        let t = self.trunk(proxy)?;
        let hm = ops::downsample_area(heatmaps, CORR_DOWNSAMPLE)?;
        let pm = ops::downsample_nearest(parsing, CORR_DOWNSAMPLE)?;
        let mut h = self.src_in.forward(&Tensor::cat(&[&t, &hm, &pm], 1)?)?.relu()?;
        for b in &self.src_blocks {
            h = b.forward(&h)?;
        }
        FeatureGrid::new(h)
    }

    /// `f_r` from the target proxy and its landmark heatmaps.
    pub fn target_features(&self, proxy: &Tensor, heatmaps: &Tensor) -> Result<FeatureGrid> {
        self.check_input(heatmaps, N_LANDMARKS, "landmark heatmaps")?;
        let t = self.trunk(proxy)?;
        let hm = ops::downsample_area(heatmaps, CORR_DOWNSAMPLE)?;
        let mut h = self.tgt_in.forward(&Tensor::cat(&[&t, &hm], 1)?)?.relu()?;
        for b in &self.tgt_blocks {
            h = b.forward(&h)?;
        }
        FeatureGrid::new(h)
    }

    pub fn field(&self, f_s: &FeatureGrid, f_r: &FeatureGrid) -> Result<CorrespondenceField> {
        correlation_field(f_s, f_r, self.config.tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t64(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn two_position_scores_match_scalar_softmax() {
        let f = CorrespondenceField::from_scores(&t64(&[2.0, 0.0, 0.0, 2.0], &[2, 2]), 1, 2, 1.0).unwrap();
        let m = vals(&f.matrix);
        let e2 = 2f64.exp();
        let hi = e2 / (e2 + 1.0);
        for (a, b) in m.iter().zip([hi, 1.0 - hi, 1.0 - hi, hi]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((hi - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn constant_features_give_uniform_field() {
        let g = FeatureGrid::new(Tensor::ones((1, 5, 2, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let f = correlation_field(&g, &g, 0.01).unwrap();
        for v in vals(&f.matrix) {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_self_features_give_identity() {
        // one-hot feature per position
        let hw = 16;
        let mut v = vec![0.0; hw * hw];
        for i in 0..hw {
            v[i * hw + i] = 1.0;
        }
        let g = FeatureGrid::new(t64(&v, &[1, hw, 4, 4])).unwrap();
        let f = correlation_field(&g, &g, 0.01).unwrap();
        let m = vals(&f.matrix);
        for i in 0..hw {
            assert!(m[i * hw + i] > 0.99);
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let a = FeatureGrid::new(Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let b = FeatureGrid::new(Tensor::ones((1, 2, 1, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(correlation_field(&a, &b, 0.01).is_err());
        assert!(correlation_field(&a, &a, 0.0).is_err());
        let f = CorrespondenceField::from_matrix(&Tensor::eye(4, DType::F64, &Device::Cpu).unwrap(), 2, 2).unwrap();
        assert!(f.reverse_warp(&Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap()).is_err());
        assert!(CorrespondenceField::from_matrix(&Tensor::ones((4, 4), DType::F64, &Device::Cpu).unwrap(), 2, 2).is_err());
    }

    #[test]
    fn identity_and_permutation_fields() {
        let x = t64(&(0..16).map(|v| v as f64).collect::<Vec<_>>(), &[1, 1, 4, 4]);
        let eye = CorrespondenceField::from_matrix(&Tensor::eye(4, DType::F64, &Device::Cpu).unwrap(), 2, 2).unwrap();
        let down = ops::downsample_area(&x, 2).unwrap();
        assert_eq!(vals(&eye.warp(&x, Resample::Area).unwrap()), vals(&down));
        // sigma = [2, 0, 3, 1]: output pixel i reads downsampled pixel sigma(i)
        let sigma = [2usize, 0, 3, 1];
        let mut p = vec![0.0; 16];
        for (i, &s) in sigma.iter().enumerate() {
            p[i * 4 + s] = 1.0;
        }
        let perm = CorrespondenceField::from_matrix(&t64(&p, &[4, 4]), 2, 2).unwrap();
        let out = vals(&perm.warp(&x, Resample::Area).unwrap());
        let d = vals(&down);
        for i in 0..4 {
            assert_eq!(out[i], d[sigma[i]]);
        }
    }

    #[test]
    fn permutation_scores_round_trip_exactly() {
        let sigma = [1usize, 3, 0, 2];
        let mut s = vec![-1e4; 16];
        for (i, &j) in sigma.iter().enumerate() {
            s[i * 4 + j] = 0.0;
        }
        let f = CorrespondenceField::from_scores(&t64(&s, &[4, 4]), 2, 2, 1.0).unwrap();
        let x = t64(&[0.1, 0.7, 0.3, 0.9, 0.2, 0.4, 0.6, 0.8], &[1, 2, 2, 2]);
        let back = f.reverse_warp(&f.warp(&x, Resample::Area).unwrap()).unwrap();
        assert_eq!(vals(&back), vals(&x));
    }

    #[test]
    fn uniform_scores_give_constant_reverse() {
        let f = CorrespondenceField::from_scores(&Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap(), 2, 2, 1.0).unwrap();
        let x = t64(&[1.0, 2.0, 3.0, 6.0], &[1, 1, 2, 2]);
        for v in vals(&f.warp(&x, Resample::Area).unwrap()) {
            assert!((v - 3.0).abs() < 1e-12);
        }
        for v in vals(&f.reverse_warp(&x).unwrap()) {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn label_maps_are_sampled_not_averaged() {
        let oh = ops::one_hot_maps(&[vec![1, 2, 0, 3, 1, 1, 2, 2, 0, 0, 3, 3, 1, 2, 3, 0]], 4, 4, 4, DType::F64).unwrap();
        let eye = CorrespondenceField::from_matrix(&Tensor::eye(4, DType::F64, &Device::Cpu).unwrap(), 2, 2).unwrap();
        let w = vals(&eye.warp(&oh, Resample::Nearest).unwrap());
        assert!(w.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn network_shapes_sharing_and_determinism() {
        let mut ps = ParamStore::new(1, DType::F32);
        let net = CorrespondenceNet::new(&mut ps, CorrespondenceConfig::desk(16)).unwrap();
        let dev = Device::Cpu;
        let p = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &dev).unwrap();
        let hm = Tensor::rand(0f32, 1.0, (2, N_LANDMARKS, 16, 16), &dev).unwrap();
        let pm = ops::one_hot_maps(&[vec![1; 256], vec![2; 256]], N_LABELS, 16, 16, DType::F32).unwrap();
        let fs = net.source_features(&p, &hm, &pm).unwrap();
        let fr = net.target_features(&p, &hm).unwrap();
        assert_eq!(fs.values.dims(), &[2, 64, 4, 4]);
        assert_eq!(fs.values.dims(), fr.values.dims());
        assert_eq!(vals(&fs.values), vals(&net.source_features(&p, &hm, &pm).unwrap().values));
        let zero = Tensor::zeros((2, 3, 16, 16), DType::F32, &dev).unwrap();
        assert!(vals(&net.target_features(&zero, &hm).unwrap().values).iter().all(|v| v.is_finite()));
        // heatmap channels are positional
        let swapped = Tensor::cat(&[hm.narrow(1, 1, N_LANDMARKS - 1).unwrap(), hm.narrow(1, 0, 1).unwrap()], 1).unwrap();
        assert_ne!(vals(&fr.values), vals(&net.target_features(&p, &swapped).unwrap().values));
        assert!(net.source_features(&p, &hm.narrow(2, 0, 8).unwrap(), &pm).is_err());
        net.field(&fs, &fr).unwrap().check_stochastic(1e-5).unwrap();
    }

    #[test]
    fn dump_round_trip() {
        let f = CorrespondenceField::from_scores(&Tensor::rand(0f32, 1.0, (4, 4), &Device::Cpu).unwrap(), 2, 2, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        f.dump(dir.path(), "F").unwrap();
        let g = CorrespondenceField::load_dump(dir.path(), "F").unwrap();
        assert_eq!(vals(&f.matrix), vals(&g.matrix));
        assert_eq!(g.tau, 0.5);
    }
}
