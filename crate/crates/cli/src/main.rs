use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use reenact_core::encoder::{self, EncoderModel, FitConfig, IdentityEmbedder, TrunkConfig};
use reenact_core::face_model::dataset::{export_dataset, load_dataset, sidecar_paths};
use reenact_core::face_model::{generate_dataset, DatasetSpec};
use reenact_core::imageio::{read_label_png, read_png, write_png};
use reenact_core::metrics;
use reenact_core::pipeline::{read_prior_dump, write_debug_dump, ModelConfig};
use reenact_core::training::{basis_from_seed, load_reenactor, TrainConfig, TrainData, Trainer};

#[derive(Parser, Debug)]
#[command(name = "reenact", version, about = "One-shot face re-enactment on synthetic faces")]
struct Cli {
    /// TOML file with [data], [encoder], [embedder] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Print reports as JSON on standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural face basis to OUT/basis.bin.
    MakeBasis,
    /// Render a synthetic dataset into OUT.
    GenerateData {
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        /// First identity id, to keep held-out sets disjoint from training sets.
        #[arg(long)]
        identity_offset: Option<u64>,
    },
    /// Train the coefficient encoder; writes OUT/encoder.bin.
    TrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the identity embedder; writes OUT/embedder.bin.
    TrainEmbedder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the correspondence network and generator; writes OUT/checkpoint.bin
    /// and OUT/train_log.jsonl.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "resume")]
        encoder: Option<PathBuf>,
        #[arg(long, required_unless_present = "resume")]
        embedder: Option<PathBuf>,
        /// Total number of steps to reach; defaults to epochs x steps per epoch.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save a checkpoint every N steps in addition to the final one.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Re-enact a source image with the pose and expression of a driving image.
    Reenact {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required_unless_present = "from_dump")]
        source: Option<PathBuf>,
        #[arg(long, required_unless_present = "from_dump")]
        driving: Option<PathBuf>,
        /// Output PNG; defaults to OUT/reenacted.png.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write proxies, warped priors and the correspondence field here.
        #[arg(long)]
        dump_correspondence: Option<PathBuf>,
        /// Regenerate from warped priors previously written by --dump-correspondence.
        #[arg(long, conflicts_with_all = ["source", "driving", "dump_correspondence"])]
        from_dump: Option<PathBuf>,
    },
    /// Score a checkpoint on unpaired pairs of a held-out dataset; writes OUT/metrics.json.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Stage {
    fit: FitConfig,
    trunk: Option<TrunkConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    basis_seed: u64,
    data: DatasetSpec,
    encoder: Stage,
    embedder: Stage,
    train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            basis_seed: reenact_core::face_model::basis::BUNDLED_BASIS_SEED,
            data: DatasetSpec::default(),
            encoder: Stage::default(),
            embedder: Stage::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut c: Config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Config::default(),
        };
        c.train.basis_seed = c.basis_seed;
        if let Some(s) = seed {
            c.data.seed = s;
            c.encoder.fit.seed = s;
            c.embedder.fit.seed = s;
            c.train.seed = s;
        }
        Ok(c)
    }
}

fn report<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string(value)?);
    } else {
        println!("{}", human());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::MakeBasis => {
            let basis = basis_from_seed(cfg.basis_seed);
            basis.validate()?;
            let path = out.join("basis.bin");
            basis.save(&path)?;
            let info = serde_json::json!({
                "path": path,
                "vertices": basis.n_vertices(),
                "dims": basis.dims(),
            });
            report(cli.json, &info, || format!("wrote {} ({} vertices)", path.display(), basis.n_vertices()))?;
        }
        Command::GenerateData {
            identities,
            frames,
            resolution,
            identity_offset,
        } => {
            let mut spec = cfg.data.clone();
            spec.identities = identities.unwrap_or(spec.identities);
            spec.frames_per_identity = frames.unwrap_or(spec.frames_per_identity);
            spec.resolution = resolution.unwrap_or(spec.resolution);
            spec.identity_offset = identity_offset.unwrap_or(spec.identity_offset);
            let dataset = generate_dataset(&basis_from_seed(cfg.basis_seed), &spec)?;
            export_dataset(&dataset, out)?;
            let info = serde_json::json!({ "dir": out, "samples": dataset.len(), "resolution": dataset.resolution });
            report(cli.json, &info, || format!("wrote {} samples to {}", dataset.len(), out.display()))?;
        }
        Command::TrainEncoder { data, val, epochs } => {
            let train = load_dataset(&data)?;
            let val = load_dataset(&val)?;
            let mut fit = cfg.encoder.fit.clone();
            fit.epochs = epochs.unwrap_or(fit.epochs);
            let trunk = cfg.encoder.trunk.unwrap_or_else(|| TrunkConfig::desk(train.resolution));
            let (model, rep) = encoder::train_encoder(&train, &val, trunk, &fit)?;
            let path = out.join("encoder.bin");
            model.save(&path, fit.seed)?;
            let last = rep.val_loss.last().copied().unwrap_or(f64::NAN);
            report(cli.json, &rep, || format!("validation MSE {last:.4}; wrote {}", path.display()))?;
        }
        Command::TrainEmbedder { data, epochs } => {
            let train = load_dataset(&data)?;
            let mut fit = cfg.embedder.fit.clone();
            fit.epochs = epochs.unwrap_or(fit.epochs);
            let trunk = cfg.embedder.trunk.unwrap_or_else(|| TrunkConfig::desk(train.resolution));
            let (model, rep) = encoder::train_embedder(&train, trunk, &fit)?;
            let path = out.join("embedder.bin");
            model.save(&path, fit.seed)?;
            let acc = rep.train_accuracy.last().copied().unwrap_or(f64::NAN);
            report(cli.json, &rep, || format!("train accuracy {acc:.3}; wrote {}", path.display()))?;
        }
        Command::Train {
            data,
            encoder,
            embedder,
            steps,
            resume,
            checkpoint_every,
        } => {
            let dataset = load_dataset(&data)?;
            let resumed = match resume {
                Some(p) => Some(Trainer::load(&p).with_context(|| format!("resuming from {}", p.display()))?),
                None => None,
            };
            let basis_seed = resumed.as_ref().map_or(cfg.basis_seed, |t| t.config().basis_seed);
            let td = TrainData::new(dataset, &basis_from_seed(basis_seed))?;
            let mut trainer = match resumed {
                Some(t) => t,
                None => {
                    let enc = EncoderModel::load(encoder.as_deref().expect("required by clap"))?;
                    let emb = IdentityEmbedder::load(embedder.as_deref().expect("required by clap"))?;
                    let mut tc = cfg.train.clone();
                    if tc.model.resolution() != td.dataset.resolution {
                        tc.model = ModelConfig::desk(td.dataset.resolution);
                    }
                    Trainer::new(tc, enc, emb, &td)?
                }
            };
            let until = steps.unwrap_or_else(|| trainer.config().total_steps());
            let log_path = out.join("train_log.jsonl");
            let file = fs::OpenOptions::new()
                .create(true)
                .append(trainer.step_count() > 0)
                .write(true)
                .truncate(trainer.step_count() == 0)
                .open(&log_path)
                .with_context(|| format!("opening {}", log_path.display()))?;
            let mut log = BufWriter::new(file);
            let ckpt = out.join("checkpoint.bin");
            let every = checkpoint_every.unwrap_or(u64::MAX).max(1);
            let mut records = Vec::new();
            while trainer.step_count() < until {
                let next = (trainer.step_count() / every + 1).saturating_mul(every).min(until);
                records.extend(trainer.run(&td, next, Some(&mut log))?);
                trainer.save(&ckpt)?;
            }
            if records.is_empty() {
                trainer.save(&ckpt)?;
            }
            std::io::Write::flush(&mut log)?;
            let summary = serde_json::json!({
                "checkpoint": ckpt,
                "steps": trainer.step_count(),
                "weights": trainer.weights(),
                "last": records.last(),
            });
            report(cli.json, &summary, || match records.last() {
                Some(r) => format!(
                    "step {} L_G {:.4} L_D {:.4}; wrote {}",
                    r.step,
                    r.l_g,
                    r.l_d,
                    ckpt.display()
                ),
                None => format!("already at step {}; wrote {}", trainer.step_count(), ckpt.display()),
            })?;
        }
        Command::Reenact {
            checkpoint,
            source,
            driving,
            output,
            dump_correspondence,
            from_dump,
        } => {
            let reenactor = load_reenactor(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let output = output.unwrap_or_else(|| out.join("reenacted.png"));
            let image = match from_dump {
                Some(dir) => reenactor.generate_from_priors(&read_prior_dump(&dir)?)?,
                None => {
                    let source = source.expect("required by clap");
                    let src = read_png(&source)?;
                    let drv = read_png(&driving.expect("required by clap"))?;
                    let labels_path = sidecar_paths(&source).0;
                    let parsing = if labels_path.exists() {
                        let (w, h, labels) = read_label_png(&labels_path)?;
                        if w != src.width || h != src.height {
                            bail!("parsing map {} does not match the source image size", labels_path.display());
                        }
                        Some(labels)
                    } else {
                        None
                    };
                    let r = reenactor.reenact(&src, parsing.as_deref(), &drv)?;
                    if let Some(dir) = &dump_correspondence {
                        write_debug_dump(&r, dir)?;
                    }
                    r.output
                }
            };
            if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_png(&output, &image)?;
            let info = serde_json::json!({ "output": output });
            report(cli.json, &info, || format!("wrote {}", output.display()))?;
        }
        Command::Evaluate { checkpoint, data } => {
            let reenactor = load_reenactor(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let dataset = load_dataset(&data)?;
            let (rep, _) = metrics::evaluate(&reenactor, &dataset, cfg.train.seed)?;
            let path = out.join("metrics.json");
            fs::write(&path, serde_json::to_string_pretty(&rep)?)?;
            report(cli.json, &rep, || {
                format!(
                    "pairs {}\ncos_sim {:.4} ± {:.4} (vs driving {:.4})\npose_mse {:.5} ± {:.5}\nexp_mse {:.5} ± {:.5}",
                    rep.count,
                    rep.cos_sim.mean,
                    rep.cos_sim.std,
                    rep.cos_sim_driving.mean,
                    rep.pose_mse.mean,
                    rep.pose_mse.std,
                    rep.exp_mse.mean,
                    rep.exp_mse.std
                )
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
