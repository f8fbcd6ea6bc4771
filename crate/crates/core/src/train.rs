//! Training loops for the kernel network and the direct-estimation
//! ablation, with per-epoch logs and optional checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{batch_loss, loss_and_grad, Adam, Sample, Trainable};
use crate::dataset::TrainingSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::math::RngStream;
use crate::neural_kernel::{write_model_to, DirectNet, KernelNet};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Neighbour count the network is trained for.
    pub k: usize,
    pub epochs: usize,
    /// Shading points per optimiser step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Random points drawn per scene and epoch; `None` uses every valid point.
    pub points_per_scene: Option<usize>,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 500,
            epochs: 500,
            batch: 256,
            lr: 1e-4,
            seed: 0,
            points_per_scene: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, before each step.
    pub loss: f64,
    pub wall_seconds: f64,
    /// Points without a usable neighbourhood.
    pub skipped: usize,
}

/// One record per line: `epoch loss wall_seconds skipped`.
pub fn format_log(records: &[EpochRecord]) -> String {
    let mut s = String::from("# epoch loss wall_seconds skipped\n");
    for r in records {
        let _ = writeln!(s, "{} {:.12e} {:.3} {}", r.epoch, r.loss, r.wall_seconds, r.skipped);
    }
    s
}

pub fn write_log(records: &[EpochRecord], path: &Path) -> Result<()> {
    fs::write(path, format_log(records))?;
    Ok(())
}

/// Runs Adam over `cfg.epochs` epochs. `on_epoch` sees the model after
/// every epoch.
pub fn train_model<M: Trainable>(
    mut model: M,
    set: &TrainingSet,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&M, &EpochRecord) -> Result<()>,
) -> Result<(M, Vec<EpochRecord>)> {
    if cfg.batch == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    let start = Instant::now();
    let mut adam = Adam::new(model.param_count(), cfg.lr);
    let mut params = model.flat_params();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = RngStream::new(cfg.seed, 1 + epoch as u64);
        let (samples, skipped) = set.epoch_samples(cfg.k, cfg.points_per_scene, &mut rng, exec);
        if samples.is_empty() {
            return Err(Error::InvalidInput("no usable training samples".into()));
        }
        let mut total = 0.0;
        for batch in samples.chunks(cfg.batch) {
            let refs: Vec<&Sample> = batch.iter().collect();
            let (loss, grad) = loss_and_grad(&model, &refs, exec)?;
            total += loss * batch.len() as f64;
            adam.update(&mut params, &grad);
            model.set_flat_params(&params);
        }
        let rec = EpochRecord {
            epoch,
            loss: total / samples.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
            skipped,
        };
        log::info!("epoch {epoch}: loss {:.6e} ({skipped} skipped)", rec.loss);
        on_epoch(&model, &rec)?;
        log.push(rec);
    }
    Ok((model, log))
}

fn checkpoint<M: Trainable>(cfg: &TrainConfig, model: &M, rec: &EpochRecord) -> Result<()> {
    let Some(dir) = &cfg.checkpoint_dir else { return Ok(()) };
    if cfg.checkpoint_every == 0 || rec.epoch % cfg.checkpoint_every != 0 {
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_model_to(model, &mut buf)?;
    fs::write(dir.join(format!("checkpoint_{:05}.dpmw", rec.epoch)), buf)?;
    Ok(())
}

/// Trains a kernel-prediction network from a seeded initialisation.
pub fn train(set: &TrainingSet, cfg: &TrainConfig, exec: Exec) -> Result<(KernelNet, Vec<EpochRecord>)> {
    let net = KernelNet::new(cfg.k, &mut RngStream::new(cfg.seed, 0));
    train_model(net, set, cfg, exec, |m, r| checkpoint(cfg, m, r))
}

/// Trains the direct-estimation ablation with the same data and schedule.
pub fn train_direct_baseline(set: &TrainingSet, cfg: &TrainConfig, exec: Exec) -> Result<(DirectNet, Vec<EpochRecord>)> {
    let net = DirectNet::new(cfg.k, &mut RngStream::new(cfg.seed, 0));
    train_model(net, set, cfg, exec, |m, r| checkpoint(cfg, m, r))
}

/// Mean loss of `model` over `samples`.
pub fn mean_loss<M: Trainable>(model: &M, samples: &[Sample], exec: Exec) -> f64 {
    let refs: Vec<&Sample> = samples.iter().collect();
    batch_loss(model, &refs, exec)
}

/// First epoch whose loss is at or below `threshold`.
pub fn epochs_to_reach(log: &[EpochRecord], threshold: f64) -> Option<usize> {
    log.iter().find(|r| r.loss <= threshold).map(|r| r.epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ground_truth_image, PpmConfig};
    use crate::scene::generate_scene;
    use crate::tracer::{trace_photons, StoreFilter, TraceConfig};

    fn small_set() -> TrainingSet {
        let scene = generate_scene(11);
        let gt_cfg = PpmConfig { total_paths: 200_000, paths_per_pass: 50_000, seed: 2, ..Default::default() };
        let gt = ground_truth_image(&scene, 24, 24, &gt_cfg, Exec::default()).unwrap();
        let dump = trace_photons(&scene, &TraceConfig::new(20_000, StoreFilter::IndirectOnly, 3), Exec::default()).unwrap();
        TrainingSet::new(vec![(gt, dump)], &[0.3, 1.0], 4).unwrap()
    }

    #[test]
    fn training_reduces_loss() {
        let set = small_set();
        let cfg = TrainConfig { k: 16, epochs: 50, batch: 50, lr: 1e-3, seed: 1, points_per_scene: Some(500), ..Default::default() };
        let (fixed, _) = set.epoch_samples(16, Some(500), &mut RngStream::new(77, 0), Exec::default());
        let before = mean_loss(&KernelNet::new(16, &mut RngStream::new(cfg.seed, 0)), &fixed, Exec::default());
        let (net, log) = train(&set, &cfg, Exec::default()).unwrap();
        assert_eq!(log.len(), 50);
        let after = mean_loss(&net, &fixed, Exec::default());
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn training_is_reproducible() {
        let set = small_set();
        let cfg = TrainConfig { k: 16, epochs: 3, batch: 32, lr: 1e-3, seed: 1, ..Default::default() };
        let (net, log) = train(&set, &cfg, Exec::default()).unwrap();
        let (again, log2) = train(&set, &cfg, Exec::Sequential).unwrap();
        assert_eq!(net, again);
        assert!(log.iter().zip(&log2).all(|(a, b)| a.loss == b.loss));
    }

    #[test]
    fn direct_baseline_trains() {
        let set = small_set();
        let cfg = TrainConfig { k: 16, epochs: 2, batch: 64, lr: 1e-3, seed: 1, points_per_scene: Some(100), ..Default::default() };
        let (_, log) = train_direct_baseline(&set, &cfg, Exec::default()).unwrap();
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn zero_batch_is_rejected() {
        let set = small_set();
        let cfg = TrainConfig { batch: 0, ..Default::default() };
        assert!(train(&set, &cfg, Exec::Sequential).is_err());
    }

    #[test]
    fn log_format_and_threshold() {
        let log = vec![
            EpochRecord { epoch: 1, loss: 0.5, wall_seconds: 1.0, skipped: 0 },
            EpochRecord { epoch: 2, loss: 0.2, wall_seconds: 2.0, skipped: 1 },
        ];
        assert_eq!(format_log(&log).lines().count(), 3);
        assert_eq!(epochs_to_reach(&log, 0.3), Some(2));
        assert_eq!(epochs_to_reach(&log, 0.1), None);
    }
}
