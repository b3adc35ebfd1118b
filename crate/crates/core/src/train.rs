//! The training loop: per-step sampling, checkpoints and the CSV log.
//!
//! Step `t` draws its scale, patches and augmentations from a generator
//! seeded with the session seed on stream `t`. A run resumed from a
//! checkpoint at step `t` therefore sees exactly the batches the
//! uninterrupted run would have seen.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{sample_scale, Dataset, PatchPair};
use crate::error::{BsrnError, Result};
use crate::model::ModelParams;
use crate::optim::{train_step, AdamState, StepReport, TrainConfig};

/// The generator for update `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// The scale and batch used by update `step`.
pub fn sample_step_batch(
    dataset: &Dataset,
    scales: &[usize],
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<PatchPair>> {
    let mut rng = step_rng(cfg.seed, step);
    let scale = sample_scale(&mut rng, scales)?;
    dataset.sample_batch(&mut rng, scale, cfg.batch, cfg.patch)
}

pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    dataset: Dataset,
}

impl Trainer {
    pub fn new(checkpoint: Checkpoint, cfg: TrainConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate(&checkpoint.config().scales)?;
        for &f in &checkpoint.config().scales {
            dataset.images(f)?;
        }
        Ok(Self {
            params: checkpoint.params,
            adam: checkpoint.adam,
            cfg,
            dataset,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn train_one(&mut self) -> Result<StepReport> {
        let scales = self.params.config().scales.clone();
        let batch = sample_step_batch(&self.dataset, &scales, &self.cfg, self.adam.step)?;
        let report = train_step(&mut self.params, &mut self.adam, &batch, &self.cfg)?;
        if !report.loss.is_finite() {
            return Err(BsrnError::config(format!(
                "loss became {} at step {}",
                report.loss, report.step
            )));
        }
        Ok(report)
    }

    /// Trains until the global step reaches `until`, handing every report
    /// to `on_step`.
    pub fn run_until(
        &mut self,
        until: u64,
        mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.adam.step < until {
            let report = self.train_one()?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone(), self.adam.clone())
    }
}

/// `step,lr,loss,<tensor>_gradnorm,...` for the model's tensors.
pub fn log_header(params: &ModelParams) -> Vec<String> {
    let mut header = vec!["step".to_string(), "lr".to_string(), "loss".to_string()];
    header.extend(params.tensors().into_iter().map(|t| format!("{}_gradnorm", t.name)));
    header
}

pub fn log_record(report: &StepReport) -> Vec<String> {
    let mut row = vec![
        report.step.to_string(),
        report.lr.to_string(),
        report.loss.to_string(),
    ];
    row.extend(report.grad_norms.iter().map(|(_, n)| n.to_string()));
    row
}

/// A CSV training log with a fixed header.
pub struct TrainLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl TrainLog {
    /// Starts a new log, replacing any existing file.
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| BsrnError::io(path, e))?;
        let mut log = Self::from_file(path, file);
        log.write(header)?;
        Ok(log)
    }

    /// Continues an existing log at update `resume_step`. Rows at or past
    /// that step (written after the checkpoint was taken) are discarded so
    /// the file matches an uninterrupted run. A missing file starts fresh.
    pub fn resume(path: &Path, header: &[String], resume_step: u64) -> Result<Self> {
        if !path.exists() {
            return Self::create(path, header);
        }
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let existing: Vec<String> = reader
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if existing != header {
            return Err(BsrnError::config(format!(
                "{} has a different column layout than this model",
                path.display()
            )));
        }
        let mut kept = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let step: u64 = record[0]
                .parse()
                .map_err(|_| BsrnError::config(format!("bad step `{}` in {}", &record[0], path.display())))?;
            if step < resume_step {
                kept.push(record);
            }
        }
        let mut log = Self::create(path, header)?;
        for record in &kept {
            log.writer.write_record(record).map_err(|e| csv_error(path, e))?;
        }
        log.flush()?;
        Ok(log)
    }

    fn from_file(path: &Path, file: std::fs::File) -> Self {
        Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        }
    }

    /// Opens for appending without touching existing rows.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| BsrnError::io(path, e))?;
        Ok(Self::from_file(path, file))
    }

    pub fn write(&mut self, record: &[String]) -> Result<()> {
        self.writer
            .write_record(record)
            .map_err(|e| csv_error(&self.path, e))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| BsrnError::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> BsrnError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => BsrnError::io(path, io),
        other => BsrnError::config(format!("malformed CSV in {}: {other:?}", path.display())),
    }
}
