//! Training driver: worker pool for the data pipeline, per-epoch metrics
//! and checkpoints, resumption and divergence dumps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use concl_core::image::DataItem;
use concl_core::trainer::{apply_step, epoch_batches, prepare_sample, EpochMetrics, PreparedSample, TrainConfig, TrainError};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::io::{write_atomic, IoError};

pub const CHECKPOINT_FILE: &str = "ckpt.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DIVERGED_FILE: &str = "diverged.bin";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("training diverged; state before the failing step saved to {dump}: {source}")]
    Diverged { dump: PathBuf, source: TrainError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Threads preparing samples; results do not depend on this.
    pub workers: usize,
    /// Stop after this many completed epochs (counted from zero), as if
    /// interrupted.
    pub stop_after: Option<u32>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row matching [`EpochMetrics::CSV_HEADER`].
pub fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        m.epoch,
        m.steps,
        m.lr,
        m.loss_total,
        m.loss_instance,
        fmt_opt(m.loss_concept),
        m.n_shared,
        m.concept_evaluations,
        m.fallbacks,
        m.instance_queue_fill,
        m.concept_queue_fill,
        fmt_opt(m.purity)
    )
}

pub fn metrics_csv(rows: &[String]) -> String {
    let mut s = String::from(EpochMetrics::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Prepares the samples of one batch, splitting them over `workers` scoped
/// threads. Every sample draws from its own stream, so the output is the
/// same for any worker count.
pub fn prepare_batch<D: DataItem + Sync>(config: &TrainConfig, epoch: u32, data: &[D], indices: &[usize], workers: usize) -> Result<Vec<PreparedSample>, TrainError> {
    if workers <= 1 || indices.len() < 2 {
        return indices.iter().map(|&i| prepare_sample(config, epoch, i, &data[i])).collect();
    }
    let per = indices.len().div_ceil(workers);
    let parts: Vec<Result<Vec<PreparedSample>, TrainError>> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(per)
            .map(|chunk| s.spawn(move || chunk.iter().map(|&i| prepare_sample(config, epoch, i, &data[i])).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(indices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Trains `ckpt` to its configured epoch count, writing `metrics.csv` and
/// `ckpt.bin` into `opts.out_dir` after every epoch.
pub fn train_run<D: DataItem + Sync>(ckpt: &mut Checkpoint, data: &[D], opts: &RunOptions) -> Result<(), RunError> {
    std::fs::create_dir_all(&opts.out_dir).map_err(|source| IoError::Io {
        path: opts.out_dir.display().to_string(),
        source,
    })?;
    let ckpt_path = opts.out_dir.join(CHECKPOINT_FILE);
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    while !ckpt.state.is_finished() {
        if opts.stop_after.is_some_and(|n| ckpt.state.epoch >= n) {
            break;
        }
        let t0 = Instant::now();
        let epoch = ckpt.state.epoch;
        let mut reports = Vec::new();
        for batch in epoch_batches(&ckpt.state.config, epoch, data.len())? {
            let prepared = prepare_batch(&ckpt.state.config, epoch, data, &batch, opts.workers)?;
            match apply_step(&mut ckpt.state, &batch, prepared) {
                Ok(r) => reports.push(r),
                Err(e @ TrainError::Diverged { .. }) => {
                    let dump = opts.out_dir.join(DIVERGED_FILE);
                    ckpt.save(&dump)?;
                    return Err(RunError::Diverged { dump, source: e });
                }
                Err(e) => return Err(e.into()),
            }
        }
        let m = EpochMetrics::from_reports(&ckpt.state, epoch, &reports);
        ckpt.state.epoch += 1;
        ckpt.metrics.push(metrics_row(&m));
        log::info!(
            "epoch {} loss {:.4} instance {:.4} concept {} shared {:.2} ({:.1}s)",
            epoch,
            m.loss_total,
            m.loss_instance,
            m.loss_concept.map_or("-".into(), |c| format!("{c:.4}")),
            m.n_shared,
            t0.elapsed().as_secs_f64()
        );
        write_atomic(&metrics_path, metrics_csv(&ckpt.metrics).as_bytes())?;
        ckpt.save(&ckpt_path)?;
    }
    Ok(())
}

/// Output paths of a run directory.
pub fn run_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(CHECKPOINT_FILE), dir.join(METRICS_FILE))
}
