//! Training loop with validation, checkpointing and resume.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forgegen::{Dataset, ForgerySample, Split};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, RngState, CHECKPOINT_VERSION};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{evaluate, EvalOptions};
use crate::harness::model::{batch_tensors, noise_seed, sub_seed, ForwardOutput, Model};
use crate::harness::optim::Adam;
use crate::losses::total_loss;

pub const BEST_CHECKPOINT: &str = "checkpoints/best.safetensors";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.safetensors";
pub const TRAIN_LOG: &str = "train_log.csv";
const LOG_HEADER: &str = "epoch,train_loss,train_bce,train_dice,val_f1,val_iou";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_dice: f64,
    pub val_f1: Option<f64>,
    pub val_iou: Option<f64>,
}

impl EpochLog {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.train_loss,
            self.train_bce,
            self.train_dice,
            opt(self.val_f1),
            opt(self.val_iou)
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for row in log {
        let _ = writeln!(s, "{}", row.csv_row());
    }
    s
}

pub struct TrainOutcome {
    /// Model after the final epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_val_f1: Option<f64>,
    pub val_ids: Vec<String>,
}

/// Deterministic train/validation split of the training samples.
pub fn split_train_val<'a>(
    samples: &[&'a ForgerySample],
    val_fraction: f64,
    seed: u64,
) -> (Vec<&'a ForgerySample>, Vec<&'a ForgerySample>) {
    let n = samples.len();
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "val")));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = samples.iter().zip(is_val).partition(|(_, v)| *v);
    (train.into_iter().map(|(s, _)| *s).collect(), val.into_iter().map(|(s, _)| *s).collect())
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

fn first_non_finite(out: &ForwardOutput, loss: &Tensor) -> Result<Option<String>> {
    for (name, t) in out.named().into_iter().chain([("L_total", loss)]) {
        if !all_finite(t)? {
            return Ok(Some(name.to_string()));
        }
    }
    Ok(None)
}

fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_log(text: &str) -> Vec<EpochLog> {
    let opt = |s: &str| s.parse::<f64>().ok();
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return None;
            }
            Some(EpochLog {
                epoch: f[0].parse().ok()?,
                train_loss: f[1].parse().ok()?,
                train_bce: f[2].parse().ok()?,
                train_dice: f[3].parse().ok()?,
                val_f1: opt(f[4]),
                val_iou: opt(f[5]),
            })
        })
        .collect()
}

/// Trains on the train split of `dataset`, writing checkpoints, the log and
/// the resolved config under `cfg.resolved_output_dir()`.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with_resume(cfg, dataset, None)
}

pub fn train_with_resume(cfg: &ExperimentConfig, dataset: &Dataset, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let device = Device::Cpu;
    let out_dir = cfg.resolved_output_dir();
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);

    let all_train = dataset.split(Split::Train);
    if all_train.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    let (train_set, val_set) = split_train_val(&all_train, cfg.train.val_fraction, cfg.seed);

    let (model, mut opt, mut rng, start_epoch, mut best, mut log) = match resume {
        Some(path) => {
            let r = load_checkpoint(path, Some(cfg), &device)?;
            let log_path = out_dir.join(TRAIN_LOG);
            let log = std::fs::read_to_string(&log_path)
                .map(|t| parse_log(&t))
                .unwrap_or_default()
                .into_iter()
                .filter(|row| row.epoch <= r.meta.epoch)
                .collect();
            let rng = r.meta.rng.restore()?;
            (r.model, r.optimizer, rng, r.meta.epoch, r.meta.best_val_f1, log)
        }
        None => {
            let model = Model::new(cfg, &device)?;
            let opt = Adam::new(&cfg.optim)?;
            let rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "shuffle"));
            (model, opt, rng, 0, None, Vec::new())
        }
    };
    write_text(&out_dir.join("config.toml"), &cfg.to_toml()?)?;

    let eval_opts =
        EvalOptions { threshold: cfg.train.threshold, batch_size: cfg.train.batch_size, ..Default::default() };
    let config_hash = cfg.hash()?;
    for epoch in start_epoch + 1..=cfg.train.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle(&mut order, &mut rng);
        let (mut sum_total, mut sum_bce, mut sum_dice) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.train.batch_size) {
            let samples: Vec<&ForgerySample> = batch.iter().map(|&i| train_set[i]).collect();
            let (images, masks) = batch_tensors(samples.iter().copied(), &device)?;
            let seeds: Vec<u64> = samples.iter().map(|s| noise_seed(cfg.noise.seed, &s.id, Some(epoch))).collect();
            let out = model.forward_parts(&images, &seeds)?;
            let terms = total_loss(&out.probs, &masks, &cfg.loss)?;
            let (total, bce, dice) = terms.values()?;
            if !total.is_finite() {
                let name = first_non_finite(&out, &terms.total)?.unwrap_or_else(|| "L_total".into());
                return Err(Error::NonFinite { tensor: name, step: opt.step });
            }
            let grads = terms.total.backward()?;
            opt.step(&model.store, &grads)?;
            for (name, var) in model.store.trainable() {
                if !all_finite(var.as_tensor())? {
                    return Err(Error::NonFinite { tensor: name.clone(), step: opt.step });
                }
            }
            let n = samples.len() as f64;
            sum_total += total * n;
            sum_bce += bce * n;
            sum_dice += dice * n;
        }
        let n = train_set.len() as f64;
        let (val_f1, val_iou) = if val_set.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&model, &val_set, &eval_opts)?.report;
            (Some(r.weighted_f1), Some(r.weighted_iou))
        };
        log.push(EpochLog {
            epoch,
            train_loss: sum_total / n,
            train_bce: sum_bce / n,
            train_dice: sum_dice / n,
            val_f1,
            val_iou,
        });
        let improved = match (val_f1, best) {
            (None, _) => true,
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
        };
        if improved {
            best = val_f1.or(best);
        }
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.clone(),
            config: cfg.clone(),
            epoch,
            step: opt.step,
            best_val_f1: best,
            val_f1,
            rng: RngState::capture(&rng),
        };
        if improved {
            save_checkpoint(&best_path, &model, &opt, &meta)?;
        }
        save_checkpoint(&last_path, &model, &opt, &meta)?;
        write_text(&out_dir.join(TRAIN_LOG), &log_csv(&log))?;
    }

    Ok(TrainOutcome {
        model,
        log,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_val_f1: best,
        val_ids: val_set.iter().map(|s| s.id.clone()).collect(),
    })
}
