//! Desk-scale re-enactment metrics: identity cosine similarity from the
//! identity embedder, and pose/expression MSE from the coefficient encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{cosine, EncoderModel, IdentityEmbedder};
use crate::error::{ensure, Result};
use crate::face_model::{CoefficientSet, Dataset, Sample};
use crate::imageio::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Cosine similarity of output and source identity embeddings.
    pub cos_sim: Stat,
    /// Cosine similarity of output and driving identity embeddings.
    pub cos_sim_driving: Stat,
    /// MSE between regressed pose of output and driving image.
    pub pose_mse: Stat,
    /// MSE between regressed expression of output and driving image.
    pub exp_mse: Stat,
    pub count: usize,
    /// Tensor hashes of the networks standing in for the metric models.
    pub embedder_hash: String,
    pub encoder_hash: String,
    /// Outputs are scored as generated, without eye alignment.
    pub aligned: bool,
}

impl MetricsReport {
    pub fn check_bounds(&self) -> Result<()> {
        for s in [&self.cos_sim, &self.cos_sim_driving] {
            ensure!((-1.0..=1.0).contains(&s.mean), "cosine similarity {} outside [-1, 1]", s.mean);
        }
        for s in [&self.pose_mse, &self.exp_mse] {
            ensure!(s.mean >= 0.0 && s.std >= 0.0, "negative mean squared error");
        }
        Ok(())
    }
}

/// Source and driving sample indices of one evaluation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub source: usize,
    pub driving: usize,
}

/// Unpaired evaluation pairs: every sample, in sample-id order, is a source
/// once. Identity `i` drives from identity `i + k`, cycling `k` through all
/// other identities in turn; the frame within that identity is seeded.
pub fn unpaired_pairs(dataset: &Dataset, seed: u64) -> Result<Vec<EvalPair>> {
    let groups = dataset.by_identity();
    ensure!(groups.len() >= 2, "unpaired evaluation needs at least two identities, got {}", groups.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| dataset.samples[i].sample_id);
    let group_of = |i: usize| groups.iter().position(|(id, _)| *id == dataset.samples[i].identity_id).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turn = vec![0usize; groups.len()];
    let n = groups.len();
    Ok(order
        .into_iter()
        .map(|s| {
            let g = group_of(s);
            let k = 1 + turn[g] % (n - 1);
            turn[g] += 1;
            let frames = &groups[(g + k) % n].1;
            EvalPair {
                source: s,
                driving: frames[rng.gen_range(0..frames.len())],
            }
        })
        .collect())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

fn pose_vec(c: &CoefficientSet) -> [f64; 4] {
    [c.beta.yaw, c.beta.pitch, c.beta.roll, c.beta.jaw]
}

/// Per-pair scores, kept for inspection and ordering checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub source_id: u64,
    pub cos_source: f64,
    pub cos_driving: f64,
    pub pose_mse: f64,
    pub exp_mse: f64,
}

/// Scores `produce(source, driving)` for every pair.
pub fn evaluate_with(
    dataset: &Dataset,
    pairs: &[EvalPair],
    encoder: &EncoderModel,
    embedder: &IdentityEmbedder,
    mut produce: impl FnMut(&Sample, &Sample) -> Result<Image>,
) -> Result<(MetricsReport, Vec<PairScores>)> {
    ensure!(!pairs.is_empty(), "no evaluation pairs");
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        let s = &dataset.samples[p.source];
        let d = &dataset.samples[p.driving];
        let out = produce(s, d)?;
        let e_r = embedder.embed(&out)?;
        let c_r = encoder.encode(&out)?;
        let c_d = encoder.encode(&d.image)?;
        scores.push(PairScores {
            source_id: s.sample_id,
            cos_source: cosine(&e_r, &embedder.embed(&s.image)?).clamp(-1.0, 1.0),
            cos_driving: cosine(&e_r, &embedder.embed(&d.image)?).clamp(-1.0, 1.0),
            pose_mse: mse(&pose_vec(&c_r), &pose_vec(&c_d)),
            exp_mse: mse(&c_r.theta, &c_d.theta),
        });
    }
    scores.sort_by_key(|s| s.source_id);
    let col = |f: fn(&PairScores) -> f64| Stat::of(&scores.iter().map(f).collect::<Vec<_>>());
    let report = MetricsReport {
        cos_sim: col(|s| s.cos_source),
        cos_sim_driving: col(|s| s.cos_driving),
        pose_mse: col(|s| s.pose_mse),
        exp_mse: col(|s| s.exp_mse),
        count: scores.len(),
        embedder_hash: embedder.to_container(0)?.tensor_hash(None),
        encoder_hash: encoder.to_container(0)?.tensor_hash(None),
        aligned: false,
    };
    report.check_bounds()?;
    Ok((report, scores))
}

/// Metrics of a trained re-enactor over unpaired pairs of `dataset`.
pub fn evaluate(
    reenactor: &crate::pipeline::Reenactor,
    dataset: &Dataset,
    seed: u64,
) -> Result<(MetricsReport, Vec<PairScores>)> {
    ensure!(!dataset.is_empty(), "evaluation dataset is empty");
    let pairs = unpaired_pairs(dataset, seed)?;
    evaluate_with(dataset, &pairs, reenactor.encoder(), reenactor.embedder(), |s, d| {
        Ok(reenactor.reenact(&s.image, Some(&s.parsing), &d.image)?.output)
    })
}
