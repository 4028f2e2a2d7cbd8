//! Objective terms of the generator and discriminator, their weights, and the
//! warm-up calibration that sets the weights.
//!
//! Every norm is mean-reduced over elements, so weights do not depend on the
//! resolution.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, IdentityEmbedder};
use crate::error::{ensure, Error, Result};
use crate::face_model::{CoefficientDims, CoefficientGroup};
use crate::nn::ops;

/// Target share of each calibrated term relative to the mean `L_geo`.
pub const CALIBRATION_RATIO: f64 = 0.1;

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(a.dims() == b.dims(), "{what}: shapes {:?} and {:?} differ", a.dims(), b.dims());
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Proxy warping error: mean `|P_s^warp - P_r|`.
pub fn loss_mw(p_s_warp: &Tensor, p_r: &Tensor) -> Result<Tensor> {
    check_same(p_s_warp, p_r, "proxy warping loss")?;
    mean_abs_diff(p_s_warp, p_r)
}

/// Cycle consistency: mean `|I_s' - I_s|`, with `I_s` already at the
/// correspondence resolution.
pub fn loss_cc(i_s_cycled: &Tensor, i_s: &Tensor) -> Result<Tensor> {
    check_same(i_s_cycled, i_s, "cycle loss")?;
    mean_abs_diff(i_s_cycled, i_s)
}

/// Per-row cosine similarity of two `(N, D)` embedding batches.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "cosine")?;
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?;
    let nb = b.sqr()?.sum(1)?;
    Ok(dot.div(&(na * nb)?.sqrt()?)?)
}

/// `1 - cos(e_r, e_s)`, averaged over the batch.
pub fn loss_id_embeddings(e_r: &Tensor, e_s: &Tensor) -> Result<Tensor> {
    Ok(cosine_rows(e_r, e_s)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Identity loss through the (frozen) embedder.
pub fn loss_id(embedder: &IdentityEmbedder, i_r: &Tensor, i_s: &Tensor) -> Result<Tensor> {
    loss_id_embeddings(&embedder.forward(i_r)?, &embedder.forward(i_s)?)
}

/// Column indices of pose and expression inside a flattened coefficient vector.
pub fn geometry_columns(dims: CoefficientDims) -> Vec<u32> {
    [CoefficientGroup::Pose, CoefficientGroup::Expression]
        .iter()
        .flat_map(|&g| {
            let off = dims.group_offset(g);
            (off..off + dims.group_len(g)).map(|i| i as u32)
        })
        .collect()
}

/// `|beta_r - beta_d|_1 + |theta_r - theta_d|_1` summed per sample, averaged
/// over the batch. Both inputs are `(N, 4 + K_exp)` in coefficient units.
pub fn loss_geo_coefficients(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "geometry loss")?;
    Ok((pred - target)?.abs()?.sum(1)?.mean_all()?)
}

/// Geometry loss with `beta_r, theta_r` regressed from `I_r` by the frozen encoder.
pub fn loss_geo(encoder: &EncoderModel, i_r: &Tensor, target: &Tensor) -> Result<Tensor> {
    let cols = geometry_columns(encoder.config().dims);
    let idx = Tensor::new(cols.as_slice(), i_r.device())?;
    let pred = encoder.forward_raw(i_r)?.index_select(&idx, 1)?;
    loss_geo_coefficients(&pred, &target.to_dtype(pred.dtype())?)
}

/// Ground truth for the pixel loss of paired samples.
#[derive(Debug, Clone)]
pub struct PixelTargets {
    /// `I_s*`, the driving image itself, at output resolution.
    pub image: Tensor,
    /// Its one-hot parsing map at the correspondence resolution.
    pub parsing: Tensor,
}

/// Hybrid pixel loss: per sample `mse(I_r, I_s*) + mse(M_s^warp, parsing(I_s*))`
/// when paired and zero otherwise, averaged over the batch.
pub fn loss_pix(i_r: &Tensor, m_s_warp: &Tensor, targets: Option<&PixelTargets>, paired: &[bool]) -> Result<Tensor> {
    let n = i_r.dims()[0];
    ensure!(paired.len() == n, "pixel loss got {} pairing flags for a batch of {n}", paired.len());
    if !paired.iter().any(|&p| p) {
        return Ok(Tensor::zeros((), i_r.dtype(), i_r.device())?);
    }
    let t = targets.ok_or_else(|| Error::Validation("paired samples need pixel targets".into()))?;
    check_same(i_r, &t.image, "pixel loss image")?;
    check_same(m_s_warp, &t.parsing, "pixel loss parsing")?;
    let per_sample = |a: &Tensor, b: &Tensor| -> Result<Tensor> { Ok((a - b)?.sqr()?.flatten_from(1)?.mean(1)?) };
    let total = (per_sample(i_r, &t.image)? + per_sample(m_s_warp, &t.parsing)?)?;
    let mask: Vec<f64> = paired.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, n, i_r.device())?.to_dtype(total.dtype())?;
    Ok((total * mask)?.mean_all()?)
}

/// `h(t) = min(0, t - 1)`.
pub fn hinge(t: &Tensor) -> Result<Tensor> {
    Ok(t.affine(-1.0, 1.0)?.relu()?.neg()?)
}

/// `-E[h(D(real))] - E[h(-D(fake))]`.
pub fn loss_adv_d(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real = hinge(d_real)?.mean_all()?;
    let fake = hinge(&d_fake.neg()?)?.mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// `-E[D(fake)]`.
pub fn loss_adv_g(d_fake: &Tensor) -> Result<Tensor> {
    Ok(d_fake.mean_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mw: f64,
    pub cc: f64,
    pub id: f64,
    pub geo: f64,
    pub pix: f64,
    pub adv_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mw: 1.0,
            cc: 1.0,
            id: 1.0,
            geo: 1.0,
            pix: 1.0,
            adv_g: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mw, self.cc, self.id, self.geo, self.pix, self.adv_g];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }

    fn as_array(&self) -> [f64; 6] {
        [self.mw, self.cc, self.id, self.geo, self.pix, self.adv_g]
    }
}

/// The six generator terms as tensors, in the order mw, cc, id, geo, pix, adv_g.
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub mw: Tensor,
    pub cc: Tensor,
    pub id: Tensor,
    pub geo: Tensor,
    pub pix: Tensor,
    pub adv_g: Tensor,
}

impl GeneratorTerms {
    fn as_array(&self) -> [&Tensor; 6] {
        [&self.mw, &self.cc, &self.id, &self.geo, &self.pix, &self.adv_g]
    }

    /// `L_G`, the weighted sum of the terms.
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (t, wi) in self.as_array().into_iter().zip(w.as_array()) {
            let term = t.affine(wi, 0.0)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        Ok(acc.expect("six terms"))
    }

    pub fn values(&self) -> Result<TermValues> {
        let [mw, cc, id, geo, pix, adv_g] = self.as_array().map(|t| ops::scalar(t));
        Ok(TermValues {
            mw: mw?,
            cc: cc?,
            id: id?,
            geo: geo?,
            pix: pix?,
            adv_g: adv_g?,
        })
    }
}

/// Scalar values of the generator terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub mw: f64,
    pub cc: f64,
    pub id: f64,
    pub geo: f64,
    pub pix: f64,
    pub adv_g: f64,
}

impl TermValues {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.as_array().iter().zip(w.as_array()).map(|(t, wi)| t * wi).sum()
    }

    fn as_array(&self) -> [f64; 6] {
        [self.mw, self.cc, self.id, self.geo, self.pix, self.adv_g]
    }

    /// Non-negativity of every term except the unbounded generator hinge term.
    pub fn check_signs(&self) -> Result<()> {
        let named = [("mw", self.mw), ("cc", self.cc), ("id", self.id), ("geo", self.geo), ("pix", self.pix)];
        for (n, v) in named {
            ensure!(v >= 0.0, "loss term {n} is negative ({v})");
        }
        Ok(())
    }
}

/// All scalar terms of one step plus the totals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: TermValues,
    pub adv_d: f64,
    pub l_g: f64,
    pub l_d: f64,
    /// Whether any sample in the batch was paired, i.e. the pixel term was active.
    pub paired: bool,
}

impl LossReport {
    pub fn new(terms: TermValues, adv_d: f64, weights: &LossWeights, paired: bool) -> Self {
        Self {
            terms,
            adv_d,
            l_g: terms.weighted_total(weights),
            l_d: adv_d,
            paired,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.terms.as_array().iter().chain([&self.adv_d, &self.l_g, &self.l_d]).all(|v| v.is_finite())
    }
}

/// Totals `(L_G, L_D)` of a report under `weights`.
pub fn total_losses(report: &LossReport, weights: &LossWeights) -> (f64, f64) {
    (report.terms.weighted_total(weights), report.adv_d)
}

const HINGE_MARGIN: f64 = 1.0;

/// Weights such that each term's mean weighted value is `CALIBRATION_RATIO`
/// times the mean weighted geometry term. The pixel term is averaged only over
/// steps where it was active; a term whose mean magnitude is negligible keeps
/// weight 1. An untrained discriminator scores near zero, so the adversarial
/// term is measured against at least the hinge margin.
pub fn calibrate(reports: &[LossReport], geo_weight: f64) -> Result<LossWeights> {
    ensure!(!reports.is_empty(), "calibration needs at least one warm-up step");
    let mean = |f: &dyn Fn(&LossReport) -> f64, only_paired: bool| {
        let vals: Vec<f64> = reports
            .iter()
            .filter(|r| !only_paired || r.paired)
            .map(|r| f(r).abs())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let geo = mean(&|r| r.terms.geo, false);
    ensure!(geo > 0.0 && geo.is_finite(), "geometry loss vanished during calibration");
    let target = CALIBRATION_RATIO * geo_weight * geo;
    let weight = |m: f64| if m > 1e-12 && m.is_finite() { target / m } else { 1.0 };
    let w = LossWeights {
        mw: weight(mean(&|r| r.terms.mw, false)),
        cc: weight(mean(&|r| r.terms.cc, false)),
        id: weight(mean(&|r| r.terms.id, false)),
        geo: geo_weight,
        pix: weight(mean(&|r| r.terms.pix, true)),
        adv_g: weight(mean(&|r| r.terms.adv_g, false).max(HINGE_MARGIN)),
    };
    w.validate()?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        ops::scalar(x).unwrap()
    }

    #[test]
    fn warping_loss_examples() {
        let a = t(&[0.0, 0.5, 1.0, 0.0], &[1, 1, 2, 2]);
        let b = t(&[0.25, 0.5, 0.5, 0.5], &[1, 1, 2, 2]);
        assert_eq!(s(&loss_mw(&a, &b).unwrap()), 0.3125);
        assert_eq!(s(&loss_mw(&a, &a).unwrap()), 0.0);
        let z = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let o = Tensor::ones((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(s(&loss_mw(&z, &o).unwrap()), 1.0);
        assert!(loss_mw(&a, &z).is_err());
    }

    #[test]
    fn identity_loss_examples() {
        let a = t(&[0.3, -1.2, 0.7, 2.0], &[2, 2]);
        assert_eq!(s(&loss_id_embeddings(&a, &a).unwrap()), 0.0);
        let orth = t(&[1.2, 0.3, -2.0, 0.7], &[2, 2]);
        assert!((s(&loss_id_embeddings(&a, &orth).unwrap()) - 1.0).abs() < 1e-12);
        assert!((s(&loss_id_embeddings(&a, &a.neg().unwrap()).unwrap()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn geometry_loss_is_l1_over_pose_and_expression() {
        let dims = CoefficientDims::default();
        let cols = geometry_columns(dims);
        assert_eq!(cols.len(), 14);
        assert_eq!(cols[0] as usize, dims.group_offset(CoefficientGroup::Pose));
        let pred = t(&[0.0; 14], &[1, 14]);
        let mut target = vec![0.0; 14];
        let base = s(&loss_geo_coefficients(&pred, &t(&target, &[1, 14])).unwrap());
        target[1] += 0.1;
        let moved = s(&loss_geo_coefficients(&pred, &t(&target, &[1, 14])).unwrap());
        assert!((moved - base - 0.1).abs() < 1e-15);
    }

    #[test]
    fn pixel_loss_is_zero_when_unpaired() {
        let i_r = t(&[0.2; 12], &[1, 3, 2, 2]);
        let m = t(&[0.25; 16], &[1, 4, 2, 2]);
        assert_eq!(s(&loss_pix(&i_r, &m, None, &[false]).unwrap()), 0.0);
        assert!(loss_pix(&i_r, &m, None, &[true]).is_err());
        let targets = PixelTargets { image: i_r.clone(), parsing: m.clone() };
        assert_eq!(s(&loss_pix(&i_r, &m, Some(&targets), &[true]).unwrap()), 0.0);
    }

    #[test]
    fn pixel_loss_masks_unpaired_samples() {
        let i_r = t(&[0.0; 24], &[2, 3, 2, 2]);
        let m = t(&[0.0; 32], &[2, 4, 2, 2]);
        let targets = PixelTargets {
            image: t(&[1.0; 24], &[2, 3, 2, 2]),
            parsing: t(&[0.5; 32], &[2, 4, 2, 2]),
        };
        // sample 0: 1 + 0.25, sample 1 masked; batch mean = 1.25 / 2
        assert_eq!(s(&loss_pix(&i_r, &m, Some(&targets), &[true, false]).unwrap()), 0.625);
    }

    #[test]
    fn hinge_values() {
        let h: Vec<f64> = hinge(&t(&[2.0, 1.0, 0.0, -1.0], &[4])).unwrap().to_vec1().unwrap();
        assert_eq!(h, vec![0.0, 0.0, -1.0, -2.0]);
    }

    #[test]
    fn adversarial_examples() {
        let real = t(&[1.0; 4], &[1, 1, 2, 2]);
        let fake = t(&[-1.0, -3.0, -1.5, -1.0], &[1, 1, 2, 2]);
        assert_eq!(s(&loss_adv_d(&real, &fake).unwrap()), 0.0);
        let zero = t(&[0.0; 4], &[1, 1, 2, 2]);
        assert_eq!(s(&loss_adv_d(&zero, &zero).unwrap()), 2.0);
        assert_eq!(s(&loss_adv_g(&t(&[0.7; 4], &[1, 1, 2, 2])).unwrap()), -0.7);
    }

    fn unit_terms() -> TermValues {
        TermValues { mw: 1.0, cc: 1.0, id: 1.0, geo: 1.0, pix: 1.0, adv_g: 1.0 }
    }

    #[test]
    fn totals() {
        let r = LossReport::new(unit_terms(), 0.5, &LossWeights::default(), true);
        assert_eq!(r.l_g, 6.0);
        assert_eq!(total_losses(&r, &LossWeights::default()), (6.0, 0.5));
        let only_geo = LossWeights { mw: 0.0, cc: 0.0, id: 0.0, geo: 1.0, pix: 0.0, adv_g: 0.0 };
        let terms = TermValues { geo: 0.37, ..unit_terms() };
        assert_eq!(terms.weighted_total(&only_geo), 0.37);
    }

    #[test]
    fn tensor_total_matches_scalar_total() {
        let w = LossWeights { mw: 0.5, cc: 2.0, id: 0.1, geo: 1.0, pix: 3.0, adv_g: 0.25 };
        let terms = GeneratorTerms {
            mw: t(&[0.1], &[]),
            cc: t(&[0.2], &[]),
            id: t(&[0.3], &[]),
            geo: t(&[0.4], &[]),
            pix: t(&[0.5], &[]),
            adv_g: t(&[-0.6], &[]),
        };
        let total = s(&terms.total(&w).unwrap());
        assert!((total - terms.values().unwrap().weighted_total(&w)).abs() < 1e-12);
    }

    #[test]
    fn calibration_scales_terms_to_a_tenth_of_geo() {
        let mk = |mw: f64, paired: bool| {
            let terms = TermValues { mw, cc: 0.5, id: 0.02, geo: 4.0, pix: if paired { 0.2 } else { 0.0 }, adv_g: -0.8 };
            LossReport::new(terms, 2.0, &LossWeights::default(), paired)
        };
        let reports = vec![mk(0.1, true), mk(0.3, false)];
        let w = calibrate(&reports, 1.0).unwrap();
        assert!((w.mw * 0.2 - 0.4).abs() < 1e-12);
        assert!((w.cc * 0.5 - 0.4).abs() < 1e-12);
        assert!((w.id * 0.02 - 0.4).abs() < 1e-12);
        assert!((w.pix * 0.2 - 0.4).abs() < 1e-12);
        assert!((w.adv_g * 1.0 - 0.4).abs() < 1e-12);
        assert_eq!(w.geo, 1.0);
        assert!(calibrate(&[], 1.0).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { pix: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { cc: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
