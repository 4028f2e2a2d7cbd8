//! Acceptance criteria. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,9` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reenact_core::correspondence::{correlation_field, CorrespondenceField, FeatureGrid, Resample, DEFAULT_TAU};
use reenact_core::encoder::{
    self, EmbedderConfig, EncoderConfig, EncoderModel, FitConfig, IdentityEmbedder, NormStats, TrunkConfig,
};
use reenact_core::face_model::{
    compose_scene, generate_dataset, mix_coefficients, render_proxy, sample_coefficients, BackgroundMode,
    CoefficientDims, CoefficientSet, Dataset, DatasetSpec, FaceBasis, SamplingPrior, N_LABELS,
};
use reenact_core::losses::{self, PixelTargets};
use reenact_core::metrics::{evaluate_with, unpaired_pairs};
use reenact_core::nn::ParamStore;
use reenact_core::pipeline::Reenactor;
use reenact_core::synthesis::{fuse, Discriminator, FusionModule, PriorBundle};
use reenact_core::training::{p_schedule, sample_pairs, StepRecord, TrainConfig, TrainData, Trainer};

// Pinned tolerances.
const ROW_SUM_TOL: f64 = 1e-5;
const DIAG_MASS_MIN: f64 = 0.99;
const WARP_ORACLE_TOL: f64 = 1e-6;
const CYCLE_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-3;
const ENCODER_MSE_MAX: f64 = 0.05;
const DECAY_RATIO_MAX: f64 = 0.5;
/// Mean absolute self-re-enactment error allowed: the seeded reference run
/// measured 0.2616, plus 10%.
const SELF_REENACT_L1_MAX: f64 = 0.29;
const RESUME_TOL: f64 = 1e-6;
const PAIRED_FRACTION_TOL: f64 = 0.02;

const BUDGET_1_S: f64 = 30.0;
const BUDGET_2_S: f64 = 10.0;
const BUDGET_3_S: f64 = 120.0;
const BUDGET_6_S: f64 = 15.0 * 60.0;
const BUDGET_7_S: f64 = 45.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cpu() -> Device {
    Device::Cpu
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap().to_dtype(dtype).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (n, c, h) = (1000, 16, 8);
    let f_s = FeatureGrid::new(randn(&mut rng, &[n, c, h, h], DType::F32)).unwrap();
    let f_r = FeatureGrid::new(randn(&mut rng, &[n, c, h, h], DType::F32)).unwrap();
    let field = correlation_field(&f_s, &f_r, DEFAULT_TAU).unwrap();
    let m: Vec<Vec<Vec<f64>>> = field.matrix.to_dtype(DType::F64).unwrap().to_vec3().unwrap();
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    for rows in &m {
        for row in rows {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            min_entry = min_entry.min(row.iter().cloned().fold(f64::INFINITY, f64::min));
        }
    }
    // One-hot features: each position owns a channel, so features are orthogonal.
    let hw = h * h;
    let mut eye = vec![0.0f64; hw * hw];
    for i in 0..hw {
        eye[i * hw + i] = 1.0;
    }
    let ortho = FeatureGrid::new(Tensor::from_vec(eye, (1, hw, h, h), &cpu()).unwrap()).unwrap();
    let self_field = correlation_field(&ortho, &ortho, 0.01).unwrap();
    let sm: Vec<Vec<f64>> = self_field.matrix.get(0).unwrap().to_vec2().unwrap();
    let min_diag = (0..hw).map(|i| sm[i][i]).fold(f64::INFINITY, f64::min);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_sum <= ROW_SUM_TOL && min_entry >= 0.0 && min_diag > DIAG_MASS_MIN && secs < BUDGET_1_S,
        format!(
            "max |row sum - 1| = {worst_sum:.2e} (tol {ROW_SUM_TOL:e}), min entry {min_entry:.2e}, \
             min diagonal mass {min_diag:.6} (> {DIAG_MASS_MIN}), {secs:.1}s (< {BUDGET_1_S}s)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn softmax_rows(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn dense_apply(m: &[Vec<f64>], x: &[f64], k: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * hw];
    for c in 0..k {
        for i in 0..hw {
            out[c * hw + i] = (0..hw).map(|j| m[i][j] * x[c * hw + j]).sum();
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let (h, k) = (4, 3);
    let hw = h * h;
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + case);
        let tau = rng.gen_range(0.05..1.0);
        let scores: Vec<Vec<f64>> = (0..hw).map(|_| (0..hw).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let st = Tensor::new(scores.clone(), &cpu()).unwrap();
        let field = CorrespondenceField::from_scores(&st, h, h, tau).unwrap();
        let x = uniform(&mut rng, &[1, k, h, h], 0.0, 1.0);
        let xv = flat(&x);
        let logits: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|v| v / tau).collect()).collect();
        let f = softmax_rows(&logits);
        let transposed: Vec<Vec<f64>> = (0..hw).map(|i| (0..hw).map(|j| logits[j][i]).collect()).collect();
        let back = softmax_rows(&transposed);
        let warped = flat(&field.warp(&x, Resample::Area).unwrap());
        worst = worst.max(max_diff(&warped, &dense_apply(&f, &xv, k, hw)));
        let rev = flat(&field.reverse_warp(&x).unwrap());
        worst = worst.max(max_diff(&rev, &dense_apply(&back, &xv, k, hw)));
    }
    // Permutation fields: warp then reverse warp recovers the input.
    let mut cycle = 0.0f64;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + case);
        let mut perm: Vec<usize> = (0..hw).collect();
        for i in (1..hw).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let scores: Vec<Vec<f64>> =
            (0..hw).map(|i| (0..hw).map(|j| if perm[i] == j { 1.0 } else { 0.0 }).collect()).collect();
        let field = CorrespondenceField::from_scores(&Tensor::new(scores, &cpu()).unwrap(), h, h, DEFAULT_TAU).unwrap();
        let x = uniform(&mut rng, &[1, k, h, h], 0.1, 1.0);
        let w = field.warp(&x, Resample::Area).unwrap();
        let wv = flat(&w);
        let xv = flat(&x);
        for c in 0..k {
            for i in 0..hw {
                cycle = cycle.max((wv[c * hw + i] - xv[c * hw + perm[i]]).abs());
            }
        }
        cycle = cycle.max(max_diff(&flat(&field.reverse_warp(&w).unwrap()), &xv));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= WARP_ORACLE_TOL && cycle <= CYCLE_TOL && secs < BUDGET_2_S,
        format!(
            "max oracle deviation {worst:.2e} (tol {WARP_ORACLE_TOL:e}), permutation cycle error {cycle:.2e} \
             (tol {CYCLE_TOL:e}), {secs:.2}s (< {BUDGET_2_S}s)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Relative max-norm error between the autograd gradient of `f` at `x` and
/// central differences.
fn grad_check(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let analytic = flat(grads.get(var.as_tensor()).expect("input receives a gradient"));
    let x0 = flat(x);
    let shape = x.dims().to_vec();
    let eval = |v: &[f64]| -> f64 {
        let t = Tensor::from_vec(v.to_vec(), shape.as_slice(), &cpu()).unwrap();
        f(&t).to_scalar::<f64>().unwrap()
    };
    let eps = 1e-6;
    let mut numeric = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let mut p = x0.clone();
        p[i] += eps;
        let mut m = x0.clone();
        m[i] -= eps;
        numeric[i] = (eval(&p) - eval(&m)) / (2.0 * eps);
    }
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    max_diff(&analytic, &numeric) / scale
}

fn small_trunk(res: usize) -> TrunkConfig {
    TrunkConfig {
        base_channels: 4,
        max_channels: 8,
        hidden: 8,
        ..TrunkConfig::desk(res)
    }
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let dt = DType::F64;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let img = |rng: &mut ChaCha8Rng| uniform(rng, &[2, 3, 4, 4], 0.0, 1.0);
    let mut results: Vec<(&str, f64)> = Vec::new();

    let target = img(&mut rng);
    results.push(("L_mw", grad_check(&img(&mut rng), &|x| losses::loss_mw(x, &target).unwrap())));

    let scores = randn(&mut rng, &[2, 16, 16], dt);
    let field = CorrespondenceField::from_scores(&scores, 4, 4, 0.5).unwrap();
    let i_s = img(&mut rng);
    results.push((
        "L_cc",
        grad_check(&img(&mut rng), &|x| losses::loss_cc(&field.reverse_warp(x).unwrap(), &i_s).unwrap()),
    ));

    let emb = IdentityEmbedder::new(EmbedderConfig { trunk: small_trunk(4), embed_dim: 6 }, 5, dt).unwrap();
    let src = img(&mut rng);
    results.push(("L_id", grad_check(&img(&mut rng), &|x| losses::loss_id(&emb, x, &src).unwrap())));

    let dims = CoefficientDims::default();
    let sets: Vec<CoefficientSet> =
        (0..8).map(|s| sample_coefficients(s, None, dims, &SamplingPrior::default())).collect();
    let stats = NormStats::from_coefficients(&sets).unwrap();
    let enc = EncoderModel::new(EncoderConfig { trunk: small_trunk(4), dims }, stats, 6, dt).unwrap();
    let geo_target = randn(&mut rng, &[2, losses::geometry_columns(dims).len()], dt);
    results.push(("L_geo", grad_check(&img(&mut rng), &|x| losses::loss_geo(&enc, x, &geo_target).unwrap())));

    let parsing_t = uniform(&mut rng, &[2, N_LABELS, 4, 4], 0.0, 1.0);
    let targets = PixelTargets {
        image: img(&mut rng),
        parsing: parsing_t,
    };
    let m = uniform(&mut rng, &[2, N_LABELS, 4, 4], 0.0, 1.0);
    results.push((
        "L_pix",
        grad_check(&img(&mut rng), &|x| losses::loss_pix(x, &m, Some(&targets), &[true, false]).unwrap()),
    ));

    let mut dps = ParamStore::new(7, dt);
    // Two stride-2 convolutions need at least 8x8 input.
    let disc = Discriminator::new(&mut dps, 8).unwrap();
    let fake = uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    results.push(("L_adv_G", grad_check(&fake, &|x| losses::loss_adv_g(&disc.forward(x).unwrap()).unwrap())));

    // Features -> correlation field -> warped priors -> attention fusion.
    let mut aps = ParamStore::new(8, dt);
    let afm = FusionModule::new(&mut aps, 2).unwrap();
    let f_r = FeatureGrid::new(randn(&mut rng, &[1, 6, 4, 4], dt)).unwrap();
    let image = img(&mut rng).narrow(0, 0, 1).unwrap();
    let raw = uniform(&mut rng, &[1, N_LABELS, 4, 4], 0.1, 1.0);
    let parsing = raw.broadcast_div(&raw.sum_keepdim(1).unwrap()).unwrap();
    let proxy = img(&mut rng).narrow(0, 0, 1).unwrap();
    let probe = randn(&mut rng, &[1, 2, 4, 4], dt);
    results.push((
        "correlation/warp/AFM",
        grad_check(&randn(&mut rng, &[1, 6, 4, 4], dt), &|x| {
            let field = correlation_field(&FeatureGrid::new(x.clone()).unwrap(), &f_r, 0.1).unwrap();
            let bundle = PriorBundle::warp(&field, &image, &parsing, &proxy).unwrap();
            let out = afm.forward(&bundle).unwrap();
            (out * &probe).unwrap().sum_all().unwrap()
        }),
    ));

    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(
        worst <= GRAD_REL_TOL && secs < BUDGET_3_S,
        format!("relative gradient errors: {detail} (tol {GRAD_REL_TOL:e}), {secs:.1}s (< {BUDGET_3_S}s)"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn random_bundle(rng: &mut ChaCha8Rng, h: usize) -> PriorBundle {
    let raw = uniform(rng, &[1, N_LABELS, h, h], 0.0, 1.0);
    PriorBundle {
        image: uniform(rng, &[1, 3, h, h], 0.0, 1.0),
        parsing: raw.broadcast_div(&raw.sum_keepdim(1).unwrap()).unwrap(),
        proxy: uniform(rng, &[1, 3, h, h], 0.0, 1.0),
    }
}

fn criterion_4() -> Outcome {
    let mut ps = ParamStore::new(404, DType::F64);
    let afm = FusionModule::new(&mut ps, 3).unwrap();
    let mut endpoint_err = 0.0f64;
    let mut bound_violation = 0.0f64;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + case);
        let b = random_bundle(&mut rng, 8);
        let zero = afm.forward_with(&b, Some(0.0)).unwrap();
        let one = afm.forward_with(&b, Some(1.0)).unwrap();
        let half = afm.forward_with(&b, Some(0.5)).unwrap();
        let (fg, bg) = (flat(&half.f_fg), flat(&half.f_bg));
        endpoint_err = endpoint_err.max(max_diff(&flat(&zero.fused), &bg));
        endpoint_err = endpoint_err.max(max_diff(&flat(&one.fused), &fg));
        let mid: Vec<f64> = fg.iter().zip(&bg).map(|(f, g)| 0.5 * f + 0.5 * g).collect();
        endpoint_err = endpoint_err.max(max_diff(&flat(&half.fused), &mid));

        let learned = afm.forward_with(&b, None).unwrap();
        let (lf, lg, lo) = (flat(&learned.f_fg), flat(&learned.f_bg), flat(&learned.fused));
        for ((o, f), g) in lo.iter().zip(&lf).zip(&lg) {
            bound_violation = bound_violation.max(f.min(*g) - o).max(o - f.max(*g));
        }
        let a = uniform(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
        let f_fg = randn(&mut rng, &[1, 3, 8, 8], DType::F64);
        let f_bg = randn(&mut rng, &[1, 3, 8, 8], DType::F64);
        let (ff, fb) = (flat(&f_fg), flat(&f_bg));
        for (i, o) in flat(&fuse(&f_fg, &f_bg, &a).unwrap()).iter().enumerate() {
            bound_violation = bound_violation.max(ff[i].min(fb[i]) - o).max(o - ff[i].max(fb[i]));
        }
    }
    outcome(
        endpoint_err == 0.0 && bound_violation <= 0.0,
        format!("endpoint deviation {endpoint_err:e} (exact), worst bound violation {bound_violation:e} (<= 0) over 50 fuzz cases"),
    )
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let dims = CoefficientDims::default();
    let prior = SamplingPrior::default();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut failures = 0;
    for _ in 0..1000 {
        let s = sample_coefficients(rng.gen(), Some(rng.gen_range(0..1000)), dims, &prior);
        let d = sample_coefficients(rng.gen(), Some(rng.gen_range(0..1000)), dims, &prior);
        let m = mix_coefficients(&s, &d);
        let ok = m.alpha == d.alpha
            && m.beta == d.beta
            && m.theta == d.theta
            && m.phi == s.phi
            && m.lambda_ == s.lambda_
            && m.mu == s.mu
            && mix_coefficients(&s, &s) == s;
        if !ok {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures} of 1000 fuzz cases violate field selection or idempotence"))
}

// ------------------------------------------------------- shared reference run

struct Reference {
    encoder: Option<EncoderModel>,
    encoder_mse: f64,
    encoder_secs: f64,
    yaw_response: Vec<f64>,
    train_log: Vec<StepRecord>,
    train_secs: f64,
    reenactor: Option<Reenactor>,
    held_out: Option<Dataset>,
}

fn encoder_datasets() -> (Dataset, Dataset) {
    let basis = FaceBasis::bundled();
    let train = DatasetSpec {
        identities: 2000,
        frames_per_identity: 1,
        seed: 1,
        background: BackgroundMode::PerSample,
        ..Default::default()
    };
    let val = DatasetSpec {
        identities: 500,
        frames_per_identity: 1,
        seed: 2,
        identity_offset: 1_000_000,
        background: BackgroundMode::PerSample,
        ..Default::default()
    };
    (generate_dataset(basis, &train).unwrap(), generate_dataset(basis, &val).unwrap())
}

fn train_reference_encoder(r: &mut Reference) {
    let t0 = Instant::now();
    let (train, val) = encoder_datasets();
    let fit = FitConfig {
        epochs: 50,
        seed: 1,
        ..Default::default()
    };
    let (model, _) = encoder::train_encoder(&train, &val, TrunkConfig::desk(64), &fit).unwrap();
    r.encoder_secs = t0.elapsed().as_secs_f64();
    r.encoder_mse = encoder::evaluate_encoder(&model, &val).unwrap().0;
    let mut c = CoefficientSet::canonical(CoefficientDims::default());
    r.yaw_response = [-0.2, 0.0, 0.2]
        .iter()
        .map(|&d| {
            c.beta.yaw = d;
            let proxy = render_proxy(&c, FaceBasis::bundled(), 64).unwrap();
            model.encode(&compose_scene(&proxy, 17).image).unwrap().beta.yaw
        })
        .collect();
    let frozen = EncoderModel::from_container(&model.to_container(1).unwrap(), DType::F32, false).unwrap();
    r.encoder = Some(frozen);
}

fn reference_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 10,
        steps_per_epoch: 50,
        seed: 1,
        ..TrainConfig::desk(64)
    }
}

fn train_reference_model(r: &mut Reference) {
    let t0 = Instant::now();
    let basis = FaceBasis::bundled();
    let spec = DatasetSpec {
        identities: 16,
        frames_per_identity: 16,
        seed: 1,
        ..Default::default()
    };
    let dataset = generate_dataset(basis, &spec).unwrap();
    let (emb, _) = encoder::train_embedder(&dataset, TrunkConfig::desk(64), &FitConfig { seed: 1, ..Default::default() }).unwrap();
    let emb = IdentityEmbedder::from_container(&emb.to_container(1).unwrap(), DType::F32, false).unwrap();
    let enc = r.encoder.take().expect("encoder trained first");
    let data = TrainData::new(dataset, basis).unwrap();
    let mut trainer = Trainer::new(reference_train_config(), enc, emb, &data).unwrap();
    r.train_log = trainer.run(&data, 500, None).unwrap();
    r.train_secs = t0.elapsed().as_secs_f64();
    r.reenactor = Some(trainer.into_reenactor().unwrap());
    let held = DatasetSpec {
        identities: 8,
        frames_per_identity: 4,
        seed: 3,
        identity_offset: 2_000_000,
        ..Default::default()
    };
    r.held_out = Some(generate_dataset(basis, &held).unwrap());
}

fn criterion_6(r: &Reference) -> Outcome {
    let y = &r.yaw_response;
    let monotone = y.windows(2).all(|w| w[1] > w[0]);
    outcome(
        r.encoder_mse < ENCODER_MSE_MAX && monotone && r.encoder_secs < BUDGET_6_S,
        format!(
            "normalized validation MSE {:.4} (< {ENCODER_MSE_MAX}), yaw response {:?} (strictly increasing: {monotone}), \
             {:.0}s (< {BUDGET_6_S}s)",
            r.encoder_mse,
            y.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            r.encoder_secs
        ),
    )
}

/// Mean of `f` over the first `n` and the last `n` records passing `keep`.
fn head_tail(log: &[StepRecord], n: usize, keep: fn(&StepRecord) -> bool, f: fn(&StepRecord) -> f64) -> (f64, f64) {
    let kept: Vec<f64> = log.iter().filter(|r| keep(r)).map(f).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    (mean(&kept[..n.min(kept.len())]), mean(&kept[kept.len().saturating_sub(n)..]))
}

fn self_reenactment_l1(reenactor: &Reenactor, d: &Dataset) -> f64 {
    let mut total = 0.0;
    for s in &d.samples {
        let out = reenactor.reenact(&s.image, Some(&s.parsing), &s.image).unwrap().output;
        total += out.data.iter().zip(&s.image.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / out.data.len() as f64;
    }
    total / d.len() as f64
}

fn criterion_7(r: &Reference) -> Outcome {
    let log = &r.train_log;
    let (mw0, mw1) = head_tail(log, 10, |_| true, |r| r.mw);
    let (pix0, pix1) = head_tail(log, 10, |r| r.paired, |r| r.pix);
    let l1 = self_reenactment_l1(r.reenactor.as_ref().unwrap(), r.held_out.as_ref().unwrap());
    let mw_ratio = mw1 / mw0;
    let pix_ratio = pix1 / pix0;
    outcome(
        log.len() == 500
            && mw_ratio < DECAY_RATIO_MAX
            && pix_ratio < DECAY_RATIO_MAX
            && l1 < SELF_REENACT_L1_MAX
            && r.train_secs < BUDGET_7_S,
        format!(
            "L_mw {mw0:.4} -> {mw1:.4} (ratio {mw_ratio:.3}), paired L_pix {pix0:.4} -> {pix1:.4} (ratio {pix_ratio:.3}), \
             both < {DECAY_RATIO_MAX}; self-re-enactment L1 {l1:.4} (< {SELF_REENACT_L1_MAX}); {:.0}s (< {BUDGET_7_S}s)",
            r.train_secs
        ),
    )
}

fn criterion_8(r: &Reference) -> Outcome {
    let reenactor = r.reenactor.as_ref().unwrap();
    let d = r.held_out.as_ref().unwrap();
    let pairs = unpaired_pairs(d, 8).unwrap();
    let (out, _) = evaluate_with(d, &pairs, reenactor.encoder(), reenactor.embedder(), |s, dr| {
        Ok(reenactor.reenact(&s.image, Some(&s.parsing), &dr.image)?.output)
    })
    .unwrap();
    let (copy, _) = evaluate_with(d, &pairs, reenactor.encoder(), reenactor.embedder(), |s, _| Ok(s.image.clone())).unwrap();
    let gap = out.cos_sim.mean - out.cos_sim_driving.mean;
    outcome(
        gap > 0.0 && out.exp_mse.mean < copy.exp_mse.mean,
        format!(
            "cos(I_r, I_s) - cos(I_r, I_d) = {:.4} - {:.4} = {gap:.4} (> 0); ExpMSE(I_r, I_d) {:.5} < ExpMSE(I_s, I_d) {:.5}; {} pairs",
            out.cos_sim.mean, out.cos_sim_driving.mean, out.exp_mse.mean, copy.exp_mse.mean, out.count
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn small_setup(seed: u64) -> (TrainData, TrainConfig, EncoderModel, IdentityEmbedder) {
    let basis = FaceBasis::bundled();
    let spec = DatasetSpec {
        identities: 3,
        frames_per_identity: 3,
        seed,
        ..Default::default()
    };
    let dataset = generate_dataset(basis, &spec).unwrap();
    let trunk = TrunkConfig {
        base_channels: 8,
        max_channels: 16,
        hidden: 32,
        ..TrunkConfig::desk(64)
    };
    let stats = NormStats::from_coefficients(dataset.samples.iter().map(|s| &s.coefficients)).unwrap();
    let dims = dataset.samples[0].coefficients.dims();
    let enc = EncoderModel::new(EncoderConfig { trunk, dims }, stats, 2, DType::F32).unwrap();
    let emb = IdentityEmbedder::new(EmbedderConfig { trunk, embed_dim: 8 }, 3, DType::F32).unwrap();
    let enc = EncoderModel::from_container(&enc.to_container(2).unwrap(), DType::F32, false).unwrap();
    let emb = IdentityEmbedder::from_container(&emb.to_container(3).unwrap(), DType::F32, false).unwrap();
    let config = TrainConfig {
        batch_size: 2,
        epochs: 4,
        steps_per_epoch: 5,
        calibration_steps: 3,
        seed,
        ..TrainConfig::desk(64)
    };
    (TrainData::new(dataset, basis).unwrap(), config, enc, emb)
}

fn terms(r: &StepRecord) -> [f64; 9] {
    [r.mw, r.cc, r.id, r.geo, r.pix, r.adv_g, r.adv_d, r.l_g, r.l_d]
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run_full = |name: &str| {
        let (data, config, enc, emb) = small_setup(9);
        let mut t = Trainer::new(config, enc, emb, &data).unwrap();
        let log = t.run(&data, 20, None).unwrap();
        let path = dir.path().join(name);
        t.save(&path).unwrap();
        (std::fs::read(&path).unwrap(), log)
    };
    let (bytes_a, log_a) = run_full("a.bin");
    let (bytes_b, _) = run_full("b.bin");
    let identical = bytes_a == bytes_b;

    let (data, config, enc, emb) = small_setup(9);
    let mut t = Trainer::new(config, enc, emb, &data).unwrap();
    t.run(&data, 10, None).unwrap();
    let ckpt = dir.path().join("mid.bin");
    t.save(&ckpt).unwrap();
    drop(t);
    let mut resumed = Trainer::load(&ckpt).unwrap();
    let tail = resumed.run(&data, 20, None).unwrap();
    let mut worst = 0.0f64;
    for (a, b) in tail.iter().zip(&log_a[10..]) {
        for (x, y) in terms(a).iter().zip(terms(b)) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(
        identical && tail.len() == 10 && worst <= RESUME_TOL,
        format!(
            "identical runs give bit-identical checkpoints: {identical} ({} bytes); 10 resumed steps deviate by at most {worst:.1e} (tol {RESUME_TOL:e})",
            bytes_a.len()
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let config = reference_train_config();
    let p0 = p_schedule(0, &config);
    let groups: Vec<(u64, Vec<usize>)> = (0..16).map(|i| (i as u64, (0..16).map(|f| i * 16 + f).collect())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let draws = sample_pairs(&groups, 0.5, 10_000, &mut rng).unwrap();
    let frac = draws.iter().filter(|p| p.paired).count() as f64 / draws.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(1011);
    let i_r = uniform(&mut rng, &[4, 3, 8, 8], 0.0, 1.0);
    let m = uniform(&mut rng, &[4, N_LABELS, 2, 2], 0.0, 1.0);
    let targets = PixelTargets {
        image: uniform(&mut rng, &[4, 3, 8, 8], 0.0, 1.0),
        parsing: uniform(&mut rng, &[4, N_LABELS, 2, 2], 0.0, 1.0),
    };
    let unpaired = losses::loss_pix(&i_r, &m, Some(&targets), &[false; 4]).unwrap().to_scalar::<f64>().unwrap();
    let no_targets = losses::loss_pix(&i_r, &m, None, &[false; 4]).unwrap().to_scalar::<f64>().unwrap();
    // A mixed batch equals the mean over its paired samples only, scaled by batch size.
    let mixed = losses::loss_pix(&i_r, &m, Some(&targets), &[true, false, false, false]).unwrap().to_scalar::<f64>().unwrap();
    let first = |t: &Tensor| t.narrow(0, 0, 1).unwrap();
    let only_first = losses::loss_pix(
        &first(&i_r),
        &first(&m),
        Some(&PixelTargets {
            image: first(&targets.image),
            parsing: first(&targets.parsing),
        }),
        &[true],
    )
    .unwrap()
    .to_scalar::<f64>()
    .unwrap();
    let masked = (mixed * 4.0 - only_first).abs();
    outcome(
        p0 == 0.8 && (frac - 0.5).abs() <= PAIRED_FRACTION_TOL && unpaired == 0.0 && no_targets == 0.0 && masked < 1e-12,
        format!(
            "p_schedule(0) = {p0}; paired fraction {frac:.4} over 10000 draws (0.5 ± {PAIRED_FRACTION_TOL}); \
             unpaired L_pix = {unpaired}; unpaired samples contribute {masked:.1e} to a mixed batch"
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |s| s.contains(&i));
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |i: usize, o: Outcome| {
        println!("{} criterion {i}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((i, o));
    };
    let cheap: [(usize, fn() -> Outcome); 5] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (i, f) in cheap {
        if wanted(i) {
            report(i, f());
        }
    }
    if wanted(6) || wanted(7) || wanted(8) {
        let mut r = Reference {
            encoder: None,
            encoder_mse: f64::NAN,
            encoder_secs: f64::NAN,
            yaw_response: Vec::new(),
            train_log: Vec::new(),
            train_secs: f64::NAN,
            reenactor: None,
            held_out: None,
        };
        train_reference_encoder(&mut r);
        if wanted(6) {
            report(6, criterion_6(&r));
        }
        if wanted(7) || wanted(8) {
            train_reference_model(&mut r);
            if wanted(7) {
                report(7, criterion_7(&r));
            }
            if wanted(8) {
                report(8, criterion_8(&r));
            }
        }
    }
    if wanted(9) {
        report(9, criterion_9());
    }
    if wanted(10) {
        report(10, criterion_10());
    }
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
}
