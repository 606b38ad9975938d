//! Pixel-level F1 and IoU at a fixed binarization threshold.
//!
//! Per-sample scores are averaged within a dataset (macro mean); datasets are
//! combined by an image-count weighted mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, MaskTensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `pred > threshold`; ties go to `0`.
pub fn binarize(pred: &MaskTensor, threshold: f64) -> BinaryMask {
    let data = pred.data().iter().map(|&p| (p as f64 > threshold) as u8).collect();
    BinaryMask::new(pred.height(), pred.width(), data).expect("same geometry")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let mut c = PixelCounts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `(F1, IoU)`. Both masks empty scores `(1, 1)`; exactly one empty
    /// scores `(0, 0)`.
    pub fn f1_iou(&self) -> (f64, f64) {
        let pred_empty = self.tp + self.fp == 0;
        let gt_empty = self.tp + self.fn_ == 0;
        match (pred_empty, gt_empty) {
            (true, true) => (1.0, 1.0),
            (true, false) | (false, true) => (0.0, 0.0),
            (false, false) => {
                let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
                (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
            }
        }
    }
}

pub fn f1_iou(pred_bin: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    Ok(PixelCounts::from_masks(pred_bin, gt)?.f1_iou())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub group: String,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub n_images: usize,
    pub f1: f64,
    pub iou: f64,
    pub threshold: f64,
}

impl DatasetScore {
    /// Macro mean over samples.
    pub fn from_samples(name: &str, samples: &[SampleScore], threshold: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config(format!("dataset `{name}` has no samples")));
        }
        let n = samples.len() as f64;
        Ok(Self {
            name: name.to_string(),
            n_images: samples.len(),
            f1: samples.iter().map(|s| s.f1).sum::<f64>() / n,
            iou: samples.iter().map(|s| s.iou).sum::<f64>() / n,
            threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub datasets: Vec<DatasetScore>,
    pub weighted_f1: f64,
    pub weighted_iou: f64,
}

/// Image-count weighted mean of per-dataset scores.
pub fn aggregate(reports: &[DatasetScore]) -> Result<MetricReport> {
    let first = reports.first().ok_or_else(|| Error::Config("no dataset reports to aggregate".into()))?;
    if reports.iter().any(|r| r.threshold != first.threshold) {
        return Err(Error::Config("dataset reports use different thresholds".into()));
    }
    let n: usize = reports.iter().map(|r| r.n_images).sum();
    if n == 0 {
        return Err(Error::Config("dataset reports contain no images".into()));
    }
    let w = |f: fn(&DatasetScore) -> f64| reports.iter().map(|r| r.n_images as f64 * f(r)).sum::<f64>() / n as f64;
    Ok(MetricReport {
        threshold: first.threshold,
        datasets: reports.to_vec(),
        weighted_f1: w(|r| r.f1),
        weighted_iou: w(|r| r.iou),
    })
}

impl MetricReport {
    /// Groups per-sample scores by `group` (sorted by name) and aggregates.
    pub fn from_samples(samples: &[SampleScore], threshold: f64) -> Result<Self> {
        let mut groups: std::collections::BTreeMap<&str, Vec<SampleScore>> = Default::default();
        for s in samples {
            groups.entry(s.group.as_str()).or_default().push(s.clone());
        }
        let per: Vec<DatasetScore> =
            groups.iter().map(|(name, v)| DatasetScore::from_samples(name, v, threshold)).collect::<Result<_>>()?;
        aggregate(&per)
    }

    pub fn total_images(&self) -> usize {
        self.datasets.iter().map(|d| d.n_images).sum()
    }

    /// `dataset,n_images,f1,iou` rows followed by the weighted average row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,n_images,f1,iou\n");
        for d in &self.datasets {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", d.name, d.n_images, d.f1, d.iou));
        }
        s.push_str(&format!("weighted_avg,{},{:.6},{:.6}\n", self.total_images(), self.weighted_f1, self.weighted_iou));
        s
    }
}

pub fn samples_to_csv(samples: &[SampleScore]) -> String {
    let mut s = String::from("id,group,f1,iou\n");
    for r in samples {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", r.id, r.group, r.f1, r.iou));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: &[u8]) -> BinaryMask {
        BinaryMask::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn binarize_is_strict() {
        let p = MaskTensor::new(1, 3, vec![0.4, 0.5, 0.51]).unwrap();
        assert_eq!(binarize(&p, 0.5).data(), &[0, 0, 1]);
        assert!(binarize(&MaskTensor::filled(4, 4, 0.5), 0.5).is_empty());
        assert_eq!(binarize(&MaskTensor::filled(4, 4, 0.6), 0.5).count(), 16);
    }

    #[test]
    fn hand_counts() {
        let c = PixelCounts::from_masks(&m(&[1, 1, 0, 0]), &m(&[1, 0, 1, 0])).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        let (f1, iou) = c.f1_iou();
        assert!((f1 - 0.5).abs() < 1e-12);
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        assert_eq!(f1_iou(&m(&[0, 0]), &m(&[0, 0])).unwrap(), (1.0, 1.0));
        assert_eq!(f1_iou(&m(&[1, 0]), &m(&[0, 0])).unwrap(), (0.0, 0.0));
        assert_eq!(f1_iou(&m(&[0, 0]), &m(&[0, 1])).unwrap(), (0.0, 0.0));
        assert_eq!(f1_iou(&m(&[0, 1]), &m(&[0, 1])).unwrap(), (1.0, 1.0));
        assert!(matches!(f1_iou(&m(&[0, 1]), &m(&[0, 1, 0])), Err(Error::Dimension(_))));
    }

    #[test]
    fn weighted_aggregate() {
        let d = |name: &str, n, f1| DatasetScore { name: name.into(), n_images: n, f1, iou: f1 / 2.0, threshold: 0.5 };
        let r = aggregate(&[d("a", 100, 0.4), d("b", 300, 0.8)]).unwrap();
        assert!((r.weighted_f1 - 0.7).abs() < 1e-12);
        let one = aggregate(&[d("a", 10, 0.3)]).unwrap();
        assert_eq!(one.weighted_f1, 0.3);
        assert!(aggregate(&[]).is_err());
        let mut odd = d("c", 5, 0.1);
        odd.threshold = 0.4;
        assert!(aggregate(&[d("a", 1, 0.1), odd]).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = vec![
            SampleScore { id: "x".into(), group: "splice".into(), f1: 1.0, iou: 1.0 },
            SampleScore { id: "y".into(), group: "removal".into(), f1: 0.5, iou: 0.25 },
        ];
        let csv = MetricReport::from_samples(&s, 0.5).unwrap().to_csv();
        assert_eq!(
            csv,
            "dataset,n_images,f1,iou\nremoval,1,0.500000,0.250000\nsplice,1,1.000000,1.000000\nweighted_avg,2,0.750000,0.625000\n"
        );
    }
}
