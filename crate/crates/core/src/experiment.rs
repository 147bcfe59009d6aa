//! The per-image incremental benchmark: for every seed and every image,
//! freeze the memory network, expand the head, simulate clicks, fine-tune,
//! and score the full sliding-window prediction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::{simulate_clicks, AnnotationBudget, BudgetSplit};
use crate::data::remap_table;
use crate::error::{Error, Result};
use crate::inference::{predict_sliding, DEFAULT_OVERLAP, DEFAULT_WINDOW};
use crate::metrics::{
    iou_per_class, mean_iou_imagewise, ClassIou, MultiRunReport, RunReport, Summary,
};
use crate::model::{expand_head, snapshot, HeadInit, LabelSpace, SegModel};
use crate::trainer::{finetune_incremental, FinetuneConfig, Progress, TrainTrace};
use crate::types::LabeledImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncrementConfig {
    pub new_class: String,
    pub budget: usize,
    pub budget_split: BudgetSplit,
    pub seeds: Vec<u64>,
    pub head_init: HeadInit,
    pub finetune: FinetuneConfig,
    pub eval_window: usize,
    pub eval_overlap: f64,
    pub exclude_background: bool,
}

impl Default for IncrementConfig {
    fn default() -> Self {
        Self {
            new_class: "building".to_owned(),
            budget: 300,
            budget_split: BudgetSplit::PerCategory,
            seeds: vec![0, 1, 2],
            head_init: HeadInit::Zero,
            finetune: FinetuneConfig::default(),
            eval_window: DEFAULT_WINDOW,
            eval_overlap: DEFAULT_OVERLAP,
            exclude_background: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_id: String,
    pub seed: u64,
    pub ious: ClassIou,
    pub mean_iou: Option<f64>,
    pub trace: TrainTrace,
    pub clicks: usize,
    pub pseudo_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementReport {
    pub config: IncrementConfig,
    pub label_space: LabelSpace,
    /// Memory network on the old label space (new class counted as background).
    pub before: RunReport,
    pub after: MultiRunReport,
    pub images: Vec<ImageOutcome>,
}

impl IncrementReport {
    /// Mean and spread across seeds of one class's image-averaged IoU.
    pub fn class_summary(&self, class_id: u8) -> Option<Summary> {
        self.after.per_class.get(&class_id).copied().flatten()
    }
}

/// Mixes a run seed and an image index into an independent stream seed.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-image IoU of the sliding-window prediction against dense masks that
/// are already in the model's label space.
pub fn evaluate_model(
    model: &SegModel,
    images: &[LabeledImage],
    window: usize,
    overlap: f64,
) -> Result<Vec<ClassIou>> {
    images
        .iter()
        .map(|li| {
            let pred = predict_sliding(model, &li.image, window, overlap)?;
            iou_per_class(&pred.mask, &li.mask, model.label_space())
        })
        .collect()
}

/// Runs the benchmark. `images` carry dense masks in `full_space`.
pub fn run_increment(
    memory_model: &SegModel,
    images: &[LabeledImage],
    full_space: &LabelSpace,
    cfg: &IncrementConfig,
    mut progress: impl FnMut(&str, u64, &Progress),
) -> Result<IncrementReport> {
    if images.is_empty() {
        return Err(Error::Config("no incremental images".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    cfg.finetune.validate()?;
    let memory = snapshot(memory_model);
    let old_space = memory_model.label_space().clone();
    let expanded = old_space.with_new_class(&cfg.new_class)?;
    if full_space.id_of(&cfg.new_class).is_none() {
        return Err(Error::Config(format!(
            "new class {:?} is not in the dataset's classes",
            cfg.new_class
        )));
    }

    let to_old = remap_table(full_space, &old_space);
    let to_expanded = remap_table(full_space, &expanded);
    let in_space = |table: &[u8; 256]| -> Vec<LabeledImage> {
        images
            .iter()
            .map(|li| LabeledImage {
                mask: li.mask.remap(table),
                ..li.clone()
            })
            .collect()
    };
    let old_images = in_space(&to_old);
    let new_images = in_space(&to_expanded);

    let before_ious = evaluate_model(memory_model, &old_images, cfg.eval_window, cfg.eval_overlap)?;
    let before = mean_iou_imagewise(&before_ious, &old_space, cfg.exclude_background)?;

    let budget = AnnotationBudget::from_count(cfg.budget, cfg.budget_split);
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let mut per_image = Vec::with_capacity(new_images.len());
        for (i, li) in new_images.iter().enumerate() {
            let image_seed = derive_seed(seed, i);
            let model = expand_head(memory_model, &cfg.new_class, cfg.head_init)?;
            let clicks =
                simulate_clicks(&li.mask, model.label_space(), budget, image_seed, &li.id)?;
            let ft_cfg = FinetuneConfig {
                seed: image_seed,
                exclude_background: cfg.exclude_background,
                ..cfg.finetune.clone()
            };
            let outcome = finetune_incremental(
                model,
                &memory,
                &li.image,
                &clicks,
                &ft_cfg,
                Some(&li.mask),
                |p| progress(&li.id, seed, p),
            )?;
            let pred =
                predict_sliding(&outcome.model, &li.image, cfg.eval_window, cfg.eval_overlap)?;
            let ious = iou_per_class(&pred.mask, &li.mask, &expanded)?;
            let exclude = cfg.exclude_background.then(|| expanded.background_id());
            let mean_iou = crate::metrics::image_mean_iou(&ious, exclude);
            log::info!(
                "seed {seed} image {}: mIoU {:.4} (selected step {})",
                li.id,
                mean_iou.unwrap_or(f64::NAN),
                outcome.trace.selected_step
            );
            per_image.push(ious.clone());
            outcomes.push(ImageOutcome {
                image_id: li.id.clone(),
                seed,
                ious,
                mean_iou,
                trace: outcome.trace,
                clicks: clicks.len(),
                pseudo_labels: outcome.targets.len() - clicks.len(),
            });
        }
        runs.push(mean_iou_imagewise(
            &per_image,
            &expanded,
            cfg.exclude_background,
        )?);
    }
    if !memory.verify() {
        return Err(Error::Precondition(
            "memory network changed during fine-tuning".into(),
        ));
    }
    Ok(IncrementReport {
        config: cfg.clone(),
        label_space: expanded,
        before,
        after: MultiRunReport::from_runs(runs)?,
        images: outcomes,
    })
}

/// Image-averaged IoU per class name, for reports keyed by name.
pub fn named(
    per_class: &BTreeMap<u8, Option<f64>>,
    space: &LabelSpace,
) -> BTreeMap<String, Option<f64>> {
    per_class
        .iter()
        .map(|(id, v)| (space.name(*id).unwrap_or("?").to_owned(), *v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_across_images_and_runs() {
        let a: Vec<u64> = (0..6).map(|i| derive_seed(0, i)).collect();
        let b: Vec<u64> = (0..6).map(|i| derive_seed(1, i)).collect();
        let mut all = a.clone();
        all.extend(&b);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 12);
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
