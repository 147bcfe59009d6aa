//! Per-class IoU, image-wise mean IoU and multi-run statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelSpace;
use crate::types::DenseMask;

/// IoU per class id; `None` when the class is absent from both masks.
pub type ClassIou = BTreeMap<u8, Option<f64>>;

pub fn iou_per_class(
    pred: &DenseMask,
    gt: &DenseMask,
    label_space: &LabelSpace,
) -> Result<ClassIou> {
    if pred.dim() != gt.dim() {
        return Err(Error::InputContract(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    let k = label_space.num_classes();
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    let ignore = gt.ignore_value();
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        if g == ignore {
            continue;
        }
        let (p, g) = (usize::from(p), usize::from(g));
        if p == g {
            if p < k {
                inter[p] += 1;
                union[p] += 1;
            }
        } else {
            if p < k {
                union[p] += 1;
            }
            if g < k {
                union[g] += 1;
            }
        }
    }
    Ok(label_space
        .ids()
        .map(|c| {
            let c_ix = usize::from(c);
            let iou = (union[c_ix] > 0).then(|| inter[c_ix] as f64 / union[c_ix] as f64);
            (c, iou)
        })
        .collect())
}

/// Mean over defined classes, optionally leaving one class out.
pub fn image_mean_iou(ious: &ClassIou, exclude: Option<u8>) -> Option<f64> {
    let defined: Vec<f64> = ious
        .iter()
        .filter(|(&c, _)| Some(c) != exclude)
        .filter_map(|(_, v)| *v)
        .collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Mean over images of each image's mean IoU.
    pub mean_iou: f64,
    /// Per class, mean over the images where the class is defined.
    pub per_class: BTreeMap<u8, Option<f64>>,
    pub per_image: Vec<Option<f64>>,
    pub exclude_background: bool,
}

pub fn mean_iou_imagewise(
    per_image: &[ClassIou],
    label_space: &LabelSpace,
    exclude_background: bool,
) -> Result<RunReport> {
    if per_image.is_empty() {
        return Err(Error::InputContract("no images to aggregate".into()));
    }
    let exclude = exclude_background.then(|| label_space.background_id());
    let image_means: Vec<Option<f64>> = per_image
        .iter()
        .map(|ious| image_mean_iou(ious, exclude))
        .collect();
    let defined: Vec<f64> = image_means.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Degenerate("no image has a defined IoU".into()));
    }
    let per_class = label_space
        .ids()
        .map(|c| {
            let vals: Vec<f64> = per_image
                .iter()
                .filter_map(|ious| ious.get(&c).copied().flatten())
                .collect();
            (c, mean(&vals))
        })
        .collect();
    Ok(RunReport {
        mean_iou: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
        per_image: image_means,
        exclude_background,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        let m = mean(values)?;
        let std = if n > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean: m, std, n })
    }
}

/// Percent with one decimal, e.g. `68.7±2.7`.
impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}±{:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Statistics across repeated runs (seeds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub runs: Vec<RunReport>,
    pub mean_iou: Summary,
    pub per_class: BTreeMap<u8, Option<Summary>>,
}

impl MultiRunReport {
    pub fn from_runs(runs: Vec<RunReport>) -> Result<Self> {
        let mious: Vec<f64> = runs.iter().map(|r| r.mean_iou).collect();
        let mean_iou = Summary::of(&mious)
            .ok_or_else(|| Error::InputContract("no runs to aggregate".into()))?;
        let classes: Vec<u8> = runs[0].per_class.keys().copied().collect();
        let per_class = classes
            .into_iter()
            .map(|c| {
                let vals: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| r.per_class.get(&c).copied().flatten())
                    .collect();
                (c, Summary::of(&vals))
            })
            .collect();
        Ok(Self {
            runs,
            mean_iou,
            per_class,
        })
    }

    /// `class,iou_mean,iou_std` rows plus a `mean` row.
    pub fn write_csv<W: Write>(&self, label_space: &LabelSpace, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["class", "iou_mean", "iou_std"])
            .map_err(csv_err)?;
        for (c, s) in &self.per_class {
            let name = label_space.name(*c).unwrap_or("?").to_owned();
            let (m, sd) = s.map_or((String::new(), String::new()), |s| {
                (format!("{:.6}", s.mean), format!("{:.6}", s.std))
            });
            w.write_record([name, m, sd]).map_err(csv_err)?;
        }
        w.write_record([
            "mean".to_owned(),
            format!("{:.6}", self.mean_iou.mean),
            format!("{:.6}", self.mean_iou.std),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}
