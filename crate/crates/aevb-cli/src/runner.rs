//! Glue between a parsed [`RunConfig`] and the library: builds the
//! matching model and data splits, drives training, and implements the
//! evaluate / generate / export operations on a finished run directory.

use std::path::{Path, PathBuf};

use aevb::data::{
    binarize, generate_fa_synthetic, load_idx, normalize, synthetic_glyphs, to_row_sequences,
    DataSplit, ImageDataset,
};
use aevb::dist::one_hot;
use aevb::models::{
    Batch, CvaeModel, ExtraMetrics, FaModel, GmvaeModel, LatentModel, ModelKind, VaeModel,
    VrnnModel,
};
use aevb::nn::{Bound, ParamSet};
use aevb::tensor::{SeededRng, Tape, Var};
use aevb::train::{MetricsLog, MetricsRow, Trainer};
use aevb::{Error, Result};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_config, DataSource, RunConfig};
use crate::pgm::{write_pgm_grid, write_values_csv};

const GLYPH_TRAIN_STREAM: u64 = 0x676c_7472;
const GLYPH_TEST_STREAM: u64 = 0x676c_7465;
const NORM_TRAIN_STREAM: u64 = 0x6e72_7472;
const NORM_TEST_STREAM: u64 = 0x6e72_7465;
const GENERATE_STREAM: u64 = 0x0067_656e;

fn cfg_err(detail: impl Into<String>) -> Error {
    Error::Config { detail: detail.into() }
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    SeededRng::new(seed).derive(tag).next_u64()
}

/// All five models behind one concrete type, so a single training loop,
/// checkpoint format, and command surface covers them.
pub enum AnyModel {
    Fa(FaModel),
    Vae(VaeModel),
    Cvae(CvaeModel),
    Gmvae(GmvaeModel),
    Vrnn(VrnnModel),
}

macro_rules! on_model {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::Fa($m) => $body,
            AnyModel::Vae($m) => $body,
            AnyModel::Cvae($m) => $body,
            AnyModel::Gmvae($m) => $body,
            AnyModel::Vrnn($m) => $body,
        }
    };
}

impl LatentModel for AnyModel {
    fn kind(&self) -> ModelKind {
        on_model!(self, m => m.kind())
    }

    fn theta(&self) -> &ParamSet {
        on_model!(self, m => m.theta())
    }

    fn theta_mut(&mut self) -> &mut ParamSet {
        on_model!(self, m => m.theta_mut())
    }

    fn phi(&self) -> &ParamSet {
        on_model!(self, m => m.phi())
    }

    fn phi_mut(&mut self) -> &mut ParamSet {
        on_model!(self, m => m.phi_mut())
    }

    fn per_example_elbo<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        phi: &Bound<'t>,
        batch: &Batch,
    ) -> Result<Var<'t>> {
        on_model!(self, m => m.per_example_elbo(tape, theta, phi, batch))
    }

    fn extra_metrics(&self, split: &DataSplit) -> Result<ExtraMetrics> {
        on_model!(self, m => m.extra_metrics(split))
    }
}

/// The splits a run trains and evaluates on, plus what is known about
/// them: exact test evidence for synthetic linear-Gaussian data, and
/// the image geometry for everything visual.
pub struct PreparedData {
    pub train: DataSplit,
    pub test: DataSplit,
    pub true_test_evidence: Option<f64>,
    pub rows: usize,
    pub cols: usize,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    match &cfg.data {
        DataSource::FaSynthetic => {
            let spec = cfg.fa_spec();
            let fa = generate_fa_synthetic(&spec)?;
            Ok(PreparedData {
                train: fa.train,
                test: fa.test,
                true_test_evidence: Some(fa.true_test_evidence),
                rows: 1,
                cols: cfg.obs_dim,
            })
        }
        DataSource::Glyphs => {
            let train = synthetic_glyphs(cfg.n_train, derive_seed(cfg.seed, GLYPH_TRAIN_STREAM));
            let test = synthetic_glyphs(cfg.n_test, derive_seed(cfg.seed, GLYPH_TEST_STREAM));
            prep_images(cfg, train, test)
        }
        DataSource::Idx { images, labels, test_images, test_labels } => {
            let train =
                load_idx(Path::new(images), Path::new(labels))?.take(cfg.n_train)?;
            let test =
                load_idx(Path::new(test_images), Path::new(test_labels))?.take(cfg.n_test)?;
            prep_images(cfg, train, test)
        }
    }
}

fn prep_images(
    cfg: &RunConfig,
    train: ImageDataset,
    test: ImageDataset,
) -> Result<PreparedData> {
    let rows = train.rows;
    let cols = train.cols;
    if test.rows != rows || test.cols != cols {
        return Err(cfg_err(format!(
            "train images are {rows}x{cols} but test images are {}x{}",
            test.rows, test.cols
        )));
    }
    let num_classes = match cfg.model {
        ModelKind::Cvae | ModelKind::Gmvae => cfg.classes,
        _ => {
            let max = train.labels.iter().chain(test.labels.iter()).copied().max();
            max.map(|m| m as usize + 1).unwrap_or(1)
        }
    };
    let (train, test) = match cfg.model {
        ModelKind::Vae | ModelKind::Cvae => (
            normalize(&train, derive_seed(cfg.seed, NORM_TRAIN_STREAM))?,
            normalize(&test, derive_seed(cfg.seed, NORM_TEST_STREAM))?,
        ),
        ModelKind::Gmvae => (binarize(&train)?, binarize(&test)?),
        ModelKind::Vrnn => (
            to_row_sequences(&binarize(&train)?)?,
            to_row_sequences(&binarize(&test)?)?,
        ),
        ModelKind::Fa => {
            return Err(cfg_err("the linear-Gaussian model only runs on fa_synthetic data"))
        }
    };
    Ok(PreparedData {
        train: train.to_split(num_classes)?,
        test: test.to_split(num_classes)?,
        true_test_evidence: None,
        rows,
        cols,
    })
}

pub fn build_model(cfg: &RunConfig, prepared: &PreparedData) -> AnyModel {
    let d = prepared.rows * prepared.cols;
    match cfg.model {
        ModelKind::Fa => AnyModel::Fa(FaModel::new(cfg.obs_dim, cfg.latent, cfg.seed)),
        ModelKind::Vae => {
            AnyModel::Vae(VaeModel::new(d, cfg.latent, &cfg.widths, cfg.dropout, cfg.seed))
        }
        ModelKind::Cvae => AnyModel::Cvae(CvaeModel::new(
            d,
            cfg.latent,
            cfg.classes,
            &cfg.widths,
            cfg.dropout,
            cfg.seed,
        )),
        ModelKind::Gmvae => AnyModel::Gmvae(GmvaeModel::new(
            d,
            cfg.latent,
            cfg.classes,
            &cfg.widths,
            cfg.dropout,
            cfg.temperature,
            cfg.estimator,
            cfg.seed,
        )),
        ModelKind::Vrnn => {
            AnyModel::Vrnn(VrnnModel::new(prepared.cols, cfg.latent, cfg.rnn_hidden, cfg.seed))
        }
    }
}

/// What `train_run` leaves behind, both on disk and in memory.
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub resolved: String,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub true_test_evidence: Option<f64>,
}

/// Trains a configuration to completion and writes the run directory:
/// `config.resolved`, `metrics.csv`, `checkpoint.bin`.
pub fn train_run(mut cfg: RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.resolve();
    std::fs::create_dir_all(out_dir)?;
    let resolved = cfg.resolved_text();
    std::fs::write(out_dir.join("config.resolved"), &resolved)?;
    let prepared = prepare_data(&cfg)?;
    let true_test_evidence = prepared.true_test_evidence;
    let model = build_model(&cfg, &prepared);
    let test = prepared.test.clone();
    let mut trainer =
        Trainer::new(model, prepared.train, test, cfg.train_schedule(), cfg.adam())?;
    trainer.run()?;
    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, trainer.log().to_csv())?;
    let ckpt = Checkpoint::from_model(trainer.model(), trainer.step_count() as u64, &resolved);
    let checkpoint_path = out_dir.join("checkpoint.bin");
    ckpt.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        rows: trainer.log().rows().to_vec(),
        resolved,
        metrics_path,
        checkpoint_path,
        true_test_evidence,
    })
}

fn load_run(run_dir: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(&run_dir.join("checkpoint.bin"))?;
    let mut cfg = parse_config(&ckpt.config_text, None)?;
    cfg.resolve();
    Ok((ckpt, cfg))
}

/// Re-scores the held-out split under a saved checkpoint. With no
/// override this reproduces the final in-training evaluation row
/// exactly (same parameters, same split, same evaluation noise). An
/// override config must name the same model as the checkpoint; it can
/// repoint the data.
pub fn eval_run(run_dir: &Path, override_text: Option<&str>) -> Result<(MetricsRow, String)> {
    let (ckpt, mut cfg) = load_run(run_dir)?;
    if let Some(text) = override_text {
        let mut over = parse_config(text, None)?;
        if over.model.tag() != ckpt.model_tag {
            return Err(Error::Checkpoint {
                detail: format!(
                    "model tag mismatch: the checkpoint holds {:?} but the config names {:?}",
                    ckpt.model_tag,
                    over.model.tag()
                ),
            });
        }
        over.resolve();
        cfg = over;
    }
    let prepared = prepare_data(&cfg)?;
    let mut model = build_model(&cfg, &prepared);
    ckpt.install(&mut model)?;
    let test = prepared.test.clone();
    let trainer =
        Trainer::new(model, prepared.train, test, cfg.train_schedule(), cfg.adam())?;
    let mut row = trainer.evaluate_split("test", &prepared.test)?;
    row.step = ckpt.step as usize;
    let mut log = MetricsLog::default();
    log.push(row.clone());
    let csv = log.to_csv();
    std::fs::write(run_dir.join("eval.csv"), &csv)?;
    Ok((row, csv))
}

/// How `generate` lays out its samples; each mode belongs to one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerateMode {
    Unconditional,
    PerLabel,
    PerCluster,
    Sequential,
}

impl GenerateMode {
    pub fn from_tag(tag: &str) -> Option<GenerateMode> {
        Some(match tag {
            "unconditional" => GenerateMode::Unconditional,
            "per_label" => GenerateMode::PerLabel,
            "per_cluster" => GenerateMode::PerCluster,
            "sequential" => GenerateMode::Sequential,
            _ => return None,
        })
    }

    fn default_for(model: ModelKind) -> Result<GenerateMode> {
        Ok(match model {
            ModelKind::Vae => GenerateMode::Unconditional,
            ModelKind::Cvae => GenerateMode::PerLabel,
            ModelKind::Gmvae => GenerateMode::PerCluster,
            ModelKind::Vrnn => GenerateMode::Sequential,
            ModelKind::Fa => {
                return Err(cfg_err(
                    "generation draws images; the linear-Gaussian model has none",
                ))
            }
        })
    }
}

fn square_side(d: usize) -> Result<usize> {
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(cfg_err(format!(
            "generation needs square images; observation dim {d} is not a perfect square"
        )));
    }
    Ok(side)
}

/// Draws from a trained model's generative side and writes an image
/// grid (means and hard samples) plus the raw values. Returns the
/// written paths.
pub fn generate_run(
    run_dir: &Path,
    mode: Option<&str>,
    n: Option<usize>,
    seed_override: Option<u64>,
) -> Result<Vec<PathBuf>> {
    let (ckpt, cfg) = load_run(run_dir)?;
    let mode = match mode {
        Some(tag) => GenerateMode::from_tag(tag)
            .ok_or_else(|| cfg_err(format!("unknown generate mode {tag:?}")))?,
        None => GenerateMode::default_for(cfg.model)?,
    };
    let expected = GenerateMode::default_for(cfg.model)?;
    if mode != expected {
        return Err(cfg_err(format!(
            "generate mode {mode:?} does not apply to a {:?} run",
            cfg.model.tag()
        )));
    }
    let mut rng =
        SeededRng::new(seed_override.unwrap_or(cfg.seed)).derive(GENERATE_STREAM);

    // Rebuild the architecture from the snapshot without touching data
    // files: the observation dimension is read off the decoder's output
    // bias, and image geometry is implied by it (square images).
    let named_dim = |name: &str| -> Result<usize> {
        ckpt.theta
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, t)| t.shape()[t.shape().len() - 1])
            .ok_or_else(|| Error::Checkpoint {
                detail: format!("no tensor named {name:?} in the checkpoint"),
            })
    };
    let (means, samples, h, w, grid_cols) = match mode {
        GenerateMode::Unconditional => {
            let d = named_dim("dec.out.b")?;
            let side = square_side(d)?;
            let mut any =
                AnyModel::Vae(VaeModel::new(d, cfg.latent, &cfg.widths, cfg.dropout, cfg.seed));
            ckpt.install(&mut any)?;
            let AnyModel::Vae(model) = any else { unreachable!() };
            let count = n.unwrap_or(36);
            let (lambda, hard) = model.generate(count, &mut rng)?;
            let cols = (count as f64).sqrt().ceil() as usize;
            (lambda, hard, side, side, cols)
        }
        GenerateMode::PerLabel => {
            let n_per = n.unwrap_or(8);
            let c = cfg.classes;
            let labels: Vec<u8> = (0..c as u8).collect();
            let y = one_hot(&labels, c)?;
            let d = named_dim("dec.out.b")?;
            let side = square_side(d)?;
            let mut any = AnyModel::Cvae(CvaeModel::new(
                d,
                cfg.latent,
                c,
                &cfg.widths,
                cfg.dropout,
                cfg.seed,
            ));
            ckpt.install(&mut any)?;
            let AnyModel::Cvae(model) = any else { unreachable!() };
            let (lambda, hard) = model.generate(&y, n_per, &mut rng)?;
            (lambda, hard, side, side, n_per)
        }
        GenerateMode::PerCluster => {
            let n_per = n.unwrap_or(8);
            let c = cfg.classes;
            let labels: Vec<u8> = (0..c as u8).collect();
            let y = one_hot(&labels, c)?;
            let d = named_dim("dec.out.b")?;
            let side = square_side(d)?;
            let mut any = AnyModel::Gmvae(GmvaeModel::new(
                d,
                cfg.latent,
                c,
                &cfg.widths,
                cfg.dropout,
                cfg.temperature,
                cfg.estimator,
                cfg.seed,
            ));
            ckpt.install(&mut any)?;
            let AnyModel::Gmvae(model) = any else { unreachable!() };
            let (probs, hard) = model.generate(&y, n_per, &mut rng)?;
            (probs, hard, side, side, n_per)
        }
        GenerateMode::Sequential => {
            let count = n.unwrap_or(36);
            let d = named_dim("emit.out.b")?;
            let t_len = d; // row sequences over square images
            let mut any =
                AnyModel::Vrnn(VrnnModel::new(d, cfg.latent, cfg.rnn_hidden, cfg.seed));
            ckpt.install(&mut any)?;
            let AnyModel::Vrnn(model) = any else { unreachable!() };
            let (probs, hard) = model.generate(t_len, count, &mut rng)?;
            let flat_probs = probs.reshaped(&[count, t_len * d])?;
            let flat_hard = hard.reshaped(&[count, t_len * d])?;
            let cols = (count as f64).sqrt().ceil() as usize;
            (flat_probs, flat_hard, t_len, d, cols)
        }
    };

    let mean_path = run_dir.join("generated.pgm");
    let sample_path = run_dir.join("generated_samples.pgm");
    let csv_path = run_dir.join("generated.csv");
    write_pgm_grid(&mean_path, &means, h, w, grid_cols)?;
    write_pgm_grid(&sample_path, &samples, h, w, grid_cols)?;
    write_values_csv(&csv_path, &means)?;
    Ok(vec![mean_path, sample_path, csv_path])
}

/// Writes the held-out split's posterior means with their labels as
/// `dim_0,...,dim_{L-1},label`. Only the models with a single
/// unstructured latent code export this way.
pub fn export_latents_run(run_dir: &Path) -> Result<PathBuf> {
    let (ckpt, cfg) = load_run(run_dir)?;
    if !matches!(cfg.model, ModelKind::Vae | ModelKind::Cvae) {
        return Err(cfg_err(format!(
            "latent export applies to vae and cvae runs, not {:?}",
            cfg.model.tag()
        )));
    }
    let prepared = prepare_data(&cfg)?;
    let mut model = build_model(&cfg, &prepared);
    ckpt.install(&mut model)?;
    let labels = prepared.test.labels.clone().ok_or_else(|| {
        cfg_err("the held-out split carries no labels to export")
    })?;
    let means = match &model {
        AnyModel::Vae(m) => m.latent_means(&prepared.test.x)?,
        AnyModel::Cvae(m) => {
            let y = prepared.test.y.as_ref().expect("labeled split has one-hot labels");
            m.latent_means(&prepared.test.x, y)?
        }
        _ => unreachable!("model kind checked above"),
    };
    let l = means.shape()[1];
    let mut out = String::new();
    let header: Vec<String> = (0..l).map(|i| format!("dim_{i}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for (row, label) in means.data().chunks(l).zip(labels.iter()) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&vals.join(","));
        out.push_str(&format!(",{label}\n"));
    }
    let path = run_dir.join("latents.csv");
    std::fs::write(&path, &out)?;
    Ok(path)
}
