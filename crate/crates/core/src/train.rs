//! The training loop: batches, optimizer and EMA updates, metrics CSV,
//! checkpoints and sample grids, resumable bit-exactly from a checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{DatasetSource, RunConfig};
use crate::data::{self, DataError, Dataset};
use crate::diffusion::{training_loss, weight_norm, AdamW, Ema, Preconditioned, StepDraws};
use crate::model::{HditModel, ModelError};
use crate::nn::{named_parameters, zero_grads, Module};
use crate::rng::{Purpose, RngStream};
use crate::sampler::{sample, SamplerConfig};
use crate::tensor::{Tensor, TensorError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.hdit";
const METRICS_HEADER: &str = "step,loss,mean_sigma,weight_norm,ema_distance";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub mean_sigma: f64,
    pub weight_norm: f64,
    pub ema_distance: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.loss, self.mean_sigma, self.weight_norm, self.ema_distance
        )
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let res = cfg.model.input_resolution;
    Ok(match &cfg.dataset {
        DatasetSource::Shapes { count } => data::gen_shapes(*count, res, cfg.seed),
        DatasetSource::Folder { path } => data::load_folder(path, res)?,
    })
}

/// Model, optimizer and EMA state; the step counter is the number of
/// completed optimizer steps.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: HditModel<f32>,
    pub optimizer: AdamW<f32>,
    pub ema: Ema<f32>,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let model = HditModel::new(&cfg.model, &mut RngStream::new(cfg.seed, Purpose::Init))?;
        let optimizer = AdamW::new(cfg.optimizer.clone(), &model);
        let ema = Ema::new(&model);
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            ema,
            step: 0,
        })
    }

    /// Indices of the examples used at `step`.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let mut rng = RngStream::keyed(self.cfg.seed, Purpose::Data, step);
        let b = self.cfg.training.batch_size;
        if b >= n {
            return (0..b).map(|i| i % n).collect();
        }
        // partial Fisher–Yates: the first b entries of a random permutation
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..b {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(b);
        idx
    }

    /// Runs one optimizer step on `data` and returns its metrics.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let step = self.step;
        let seed = self.cfg.seed;
        let ids = self.batch_indices(step, data.len());
        let (images, labels) = data.batch::<f32>(&ids)?;
        let labels: Vec<Option<usize>> = if self.cfg.model.num_classes == 0 {
            vec![None; labels.len()]
        } else {
            labels
        };
        let draws = StepDraws::new(seed, step, images.shape(), &labels, &self.cfg.diffusion);
        let mut dropout = RngStream::keyed(seed, Purpose::Dropout, step);
        zero_grads(&self.model);
        let nonfinite = |e: TensorError| match e {
            TensorError::NonFinite { op } => TrainError::NonFinite {
                step: step + 1,
                detail: format!("produced by {op}"),
            },
            other => other.into(),
        };
        let loss = training_loss(&self.model, &images, &draws, &self.cfg.diffusion, Some(&mut dropout))
            .map_err(nonfinite)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step: step + 1,
                detail: format!("loss = {value}"),
            });
        }
        loss.backward().map_err(nonfinite)?;
        self.optimizer.update(&mut self.model).map_err(nonfinite)?;
        self.step += 1;
        let decay = if self.cfg.ema.warmup {
            Ema::<f32>::warmup_decay(self.step, self.cfg.ema.decay)
        } else {
            self.cfg.ema.decay
        };
        self.ema.update(&self.model, decay)?;
        Ok(StepMetrics {
            step: self.step,
            loss: value,
            mean_sigma: draws.sigma.iter().sum::<f64>() / draws.sigma.len() as f64,
            weight_norm: weight_norm(&self.model),
            ema_distance: self.ema.distance(&self.model),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let params = named_parameters(&self.model);
        for (k, (name, t)) in params.iter().enumerate() {
            c.insert(format!("raw/{name}"), t);
            c.insert(format!("ema/{name}"), &self.ema.shadow[k]);
            c.insert(format!("adam_m/{name}"), &self.optimizer.m[k]);
            c.insert(format!("adam_v/{name}"), &self.optimizer.v[k]);
        }
        c.insert_scalar("meta/step", self.step as f64);
        c.insert_scalar("meta/optimizer_step", self.optimizer.step as f64);
        c
    }

    /// Rebuilds the trainer for `cfg` from a checkpoint's state.
    pub fn from_checkpoint(cfg: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        let names: Vec<(String, Vec<usize>)> =
            named_parameters(&t.model).into_iter().map(|(n, p)| (n, p.shape().to_vec())).collect();
        let mut loaded = Vec::with_capacity(names.len());
        for (k, (name, shape)) in names.iter().enumerate() {
            loaded.push(ckpt.get_shaped::<f32>(&format!("raw/{name}"), shape)?.as_parameter());
            t.ema.shadow[k] = ckpt.get_shaped(&format!("ema/{name}"), shape)?;
            t.optimizer.m[k] = ckpt.get_shaped(&format!("adam_m/{name}"), shape)?;
            t.optimizer.v[k] = ckpt.get_shaped(&format!("adam_v/{name}"), shape)?;
        }
        let mut it = loaded.into_iter();
        crate::nn::map_parameters(&mut t.model, |_, _| Ok(it.next().expect("one tensor per parameter")))?;
        t.step = ckpt.get_scalar("meta/step")? as u64;
        t.optimizer.step = ckpt.get_scalar("meta/optimizer_step")? as u64;
        Ok(t)
    }

    /// Model carrying the EMA weights.
    pub fn ema_model(&self) -> Result<HditModel<f32>> {
        Ok(self.ema.apply(&self.model)?)
    }
}

/// Loads only the (EMA or raw) weights of a checkpoint into a fresh model.
pub fn load_model(cfg: &RunConfig, ckpt: &Checkpoint, use_ema: bool) -> Result<HditModel<f32>> {
    let mut model = HditModel::new(&cfg.model, &mut RngStream::new(cfg.seed, Purpose::Init))?;
    let prefix = if use_ema { "ema" } else { "raw" };
    let mut err = None;
    model.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match ckpt.get_shaped::<f32>(&format!("{prefix}/{name}"), t.shape()) {
            Ok(v) => *t = v.as_parameter(),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(model),
    }
}

/// Draws `count` samples, cycling through classes for a conditional model.
pub fn generate(
    model: &HditModel<f32>,
    sampler: &SamplerConfig,
    sigma_data: f64,
    class: Option<usize>,
    count: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    let den = Preconditioned { model, sigma_data };
    let res = model.config.input_resolution;
    let c = model.config.channels;
    (0..count)
        .map(|i| {
            let label = match (class, model.config.num_classes) {
                (_, 0) => None,
                (Some(k), _) => Some(k),
                (None, n) => Some(i % n),
            };
            let mut rng = RngStream::keyed(seed, Purpose::Sample, i as u64);
            Ok(sample(&den, sampler, &[1, res, res, c], &[label], &mut rng)?)
        })
        .collect()
}

/// Tiles `[1, h, w, c]` images into a grid with 8 columns.
pub fn tile_grid(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    const COLS: usize = 8;
    let &[_, h, w, c] = images[0].shape() else { unreachable!("images are [1, h, w, c]") };
    let rows = images.len().div_ceil(COLS);
    let (gh, gw) = (rows * h, COLS * w);
    let mut out = vec![-1.0f32; gh * gw * c];
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / COLS) * h, (k % COLS) * w);
        for y in 0..h {
            let src = &img.data()[y * w * c..(y + 1) * w * c];
            let dst = ((oy + y) * gw + ox) * c;
            out[dst..dst + w * c].copy_from_slice(src);
        }
    }
    Ok(Tensor::from_vec(out, &[gh, gw, c])?)
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(TrainError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Options for [`run`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Resume from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (defaults to the configured count).
    pub stop_at: Option<u64>,
    /// Print a metrics line every `log_interval` steps.
    pub verbose: bool,
}

/// Trains until the configured (or requested) step count, writing metrics,
/// checkpoints and sample grids into the output directory. Returns the
/// trainer and the metrics of the steps run in this call.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<(Trainer, Vec<StepMetrics>)> {
    let out = cfg.training.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let _lock = DirLock::acquire(&out)?;
    let data = load_dataset(cfg)?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::from_checkpoint(cfg.clone(), &Checkpoint::read(path)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let metrics_path = out.join(METRICS_FILE);
    let mut csv = if trainer.step > 0 && metrics_path.exists() {
        // keep rows up to the checkpoint; later rows belong to the interrupted run
        let kept: Vec<String> = fs::read_to_string(&metrics_path)
            .map_err(io_err(&metrics_path))?
            .lines()
            .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).map_or(true, |s| s <= trainer.step))
            .map(str::to_string)
            .collect();
        let mut text = kept.join("\n");
        text.push('\n');
        fs::write(&metrics_path, text).map_err(io_err(&metrics_path))?;
        fs::OpenOptions::new().append(true).open(&metrics_path).map_err(io_err(&metrics_path))?
    } else {
        let mut f = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
        writeln!(f, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
        f
    };
    let t = &cfg.training;
    let end = opts.stop_at.unwrap_or(t.training_steps).min(t.training_steps);
    let mut history = Vec::new();
    while trainer.step < end {
        let m = trainer.train_step(&data)?;
        writeln!(csv, "{}", m.csv_row()).map_err(io_err(&metrics_path))?;
        if opts.verbose && t.log_interval > 0 && m.step % t.log_interval == 0 {
            println!(
                "step {:>6}  loss {:.5}  mean σ {:.3}  |w| {:.2}  ema Δ {:.3}",
                m.step, m.loss, m.mean_sigma, m.weight_norm, m.ema_distance
            );
        }
        let at_end = m.step == end;
        if at_end || (t.checkpoint_interval > 0 && m.step % t.checkpoint_interval == 0) {
            trainer.to_checkpoint().write(&out.join(CHECKPOINT_FILE))?;
        }
        if (t.sample_interval > 0 && m.step % t.sample_interval == 0) || (at_end && m.step == t.training_steps) {
            let ema = trainer.ema_model()?;
            let imgs = generate(&ema, &cfg.sampler, cfg.diffusion.data_sigma, None, 8 * t.sample_grid_rows, cfg.seed)?;
            data::save_image(&tile_grid(&imgs)?, &out.join(format!("grid_{:06}.ppm", m.step)))?;
        }
        history.push(m);
    }
    Ok((trainer, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainingConfig;
    use crate::model::presets;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::smoke(dir.to_path_buf());
        cfg.model = presets::grad_check_16();
        cfg.dataset = DatasetSource::Shapes { count: 16 };
        cfg.sampler.sampling_steps = 2;
        cfg.training = TrainingConfig {
            training_steps: 4,
            batch_size: 4,
            output_dir: dir.to_path_buf(),
            log_interval: 1,
            checkpoint_interval: 2,
            sample_interval: 0,
            sample_grid_rows: 1,
        };
        cfg
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let data = load_dataset(&cfg).unwrap();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.train_step(&data).unwrap();
        let back = Trainer::from_checkpoint(cfg, &t.to_checkpoint()).unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.to_checkpoint(), t.to_checkpoint());
    }

    #[test]
    fn run_writes_rows_checkpoint_and_grid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let (_, hist) = run(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(hist.len(), 4);
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        assert!(dir.path().join("grid_000004.ppm").exists());
        assert!(!dir.path().join(LOCK_FILE).exists());
    }

    #[test]
    fn batch_indices_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(tiny(dir.path())).unwrap();
        let mut ids = t.batch_indices(3, 16);
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
    }
}
