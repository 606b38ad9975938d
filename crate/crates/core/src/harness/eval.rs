//! Evaluation: batched prediction, per-sample scores grouped by forgery
//! kind, optional mask dumps.

use std::path::{Path, PathBuf};

use crate::attacks::Attack;
use crate::error::{Error, Result};
use crate::forgegen::ForgerySample;
use crate::harness::model::{noise_seed, sub_seed, Model};
use crate::metrics::{binarize, f1_iou, samples_to_csv, MetricReport, SampleScore};
use crate::raster::{ImageTensor, MaskTensor};

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub threshold: f64,
    pub batch_size: usize,
    /// Applied to every input image (never to masks).
    pub attack: Option<Attack>,
    /// Writes `<id>_prob.png` and `<id>_mask.png` here when set.
    pub dump_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { threshold: 0.5, batch_size: 16, attack: None, dump_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub samples: Vec<SampleScore>,
}

/// Seed of the attack noise for one sample.
pub fn attack_seed(seed: u64, id: &str) -> u64 {
    sub_seed(sub_seed(seed, "attack"), id)
}

/// Probability masks in sample order.
pub fn predict(
    model: &Model,
    samples: &[&ForgerySample],
    attack: Option<Attack>,
    batch_size: usize,
) -> Result<Vec<MaskTensor>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let cfg = &model.cfg;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let images: Vec<ImageTensor> = chunk
            .iter()
            .map(|s| match attack {
                Some(a) => a.apply(&s.image, attack_seed(cfg.seed, &s.id)),
                None => Ok(s.image.clone()),
            })
            .collect::<Result<_>>()?;
        let (c, h, w) = images[0].shape();
        if let Some((s, img)) = chunk.iter().zip(&images).find(|(_, i)| i.shape() != (c, h, w)) {
            return Err(Error::Dimension(format!(
                "sample {} has shape {:?}, expected {:?}",
                s.id,
                img.shape(),
                (c, h, w)
            )));
        }
        let data: Vec<f32> = images.iter().flat_map(|i| i.data().iter().copied()).collect();
        let x = candle_core::Tensor::from_vec(data, (chunk.len(), c, h, w), model.device())?;
        let seeds: Vec<u64> = chunk.iter().map(|s| noise_seed(cfg.noise.seed, &s.id, None)).collect();
        let probs = model.forward(&x, &seeds)?.detach();
        for i in 0..chunk.len() {
            out.push(MaskTensor::from_tensor(&probs.get(i)?)?);
        }
    }
    Ok(out)
}

/// Scores `samples` under `opts`; groups are forgery kinds.
pub fn evaluate(model: &Model, samples: &[&ForgerySample], opts: &EvalOptions) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let preds = predict(model, samples, opts.attack, opts.batch_size)?;
    if let Some(dir) = &opts.dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut scores = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let bin = binarize(p, opts.threshold);
        let (f1, iou) = f1_iou(&bin, &s.mask)?;
        scores.push(SampleScore { id: s.id.clone(), group: s.kind.name().to_string(), f1, iou });
        if let Some(dir) = &opts.dump_dir {
            p.to_luma8().save(dir.join(format!("{}_prob.png", s.id)))?;
            bin.to_luma8().save(dir.join(format!("{}_mask.png", s.id)))?;
        }
    }
    let report = MetricReport::from_samples(&scores, opts.threshold)?;
    Ok(Evaluation { report, samples: scores })
}

/// Writes `metrics.csv`, `samples.csv` and `metrics.json` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("metrics.csv", eval.report.to_csv())?;
    write("samples.csv", samples_to_csv(&eval.samples))?;
    write("metrics.json", serde_json::to_string_pretty(&eval.report)?)
}
