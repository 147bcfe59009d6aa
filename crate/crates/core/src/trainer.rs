//! Pretraining on dense masks and incremental fine-tuning on sparse targets.

use std::time::Instant;

use ndarray::{Array3, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{pseudo_label_with_window, rasterize, CapMode, Origin, SparseAnnotations};
use crate::data::{centered_origin, sample_crop};
use crate::error::{Error, Result};
use crate::inference::{predict_fast, DEFAULT_OVERLAP, DEFAULT_WINDOW};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossInputs, MemoryOutputs, Prototypes};
use crate::metrics::{image_mean_iou, iou_per_class};
use crate::model::nn::{Grads, ParamStore};
use crate::model::{ModelSnapshot, SegModel};
use crate::types::{DenseMask, ImageChip, LabeledImage, IGNORE};

/// Adaptive moment estimation without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, learning_rate: f64) -> Self {
        let zeros: Vec<ArrayD<f32>> = params
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.learning_rate * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.epsilon as f32);
        let eps_hat = eps * (bc2.sqrt() as f32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps_hat);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub pseudo_epochs: usize,
    pub samples_per_pseudo_epoch: usize,
    pub crop_size: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            pseudo_epochs: 10,
            samples_per_pseudo_epoch: 10_000,
            crop_size: 256,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn updates(&self) -> usize {
        self.pseudo_epochs * (self.samples_per_pseudo_epoch / self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [
            ("pseudo_epochs", self.pseudo_epochs),
            ("samples_per_pseudo_epoch", self.samples_per_pseudo_epoch),
            ("crop_size", self.crop_size),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.samples_per_pseudo_epoch < self.batch_size {
            return Err(Error::Config(
                "samples_per_pseudo_epoch is below batch_size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Keep the weights of the best evaluated step among the last window.
    #[default]
    Benchmark,
    /// Keep the final weights.
    Deployment,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benchmark" => Ok(SelectionMode::Benchmark),
            "deployment" => Ok(SelectionMode::Deployment),
            other => Err(Error::Config(format!("unknown selection mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub iterations_per_step: usize,
    pub selection_window: usize,
    pub loss: LossConfig,
    /// Pseudo-label cap; `None` uses the number of new-class clicks.
    pub pseudo_label_cap: Option<usize>,
    pub cap_mode: CapMode,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub selection_mode: SelectionMode,
    /// Tile size of the per-step evaluation predictor.
    pub eval_window: usize,
    /// Window and overlap of the memory prediction used for pseudo-labels.
    pub pseudo_label_window: usize,
    pub pseudo_label_overlap: f64,
    pub exclude_background: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            steps: 30,
            iterations_per_step: 10,
            selection_window: 15,
            loss: LossConfig::default(),
            pseudo_label_cap: None,
            cap_mode: CapMode::Global,
            batch_size: 8,
            crop_size: 256,
            seed: 0,
            selection_mode: SelectionMode::Benchmark,
            eval_window: DEFAULT_WINDOW,
            pseudo_label_window: DEFAULT_WINDOW,
            pseudo_label_overlap: DEFAULT_OVERLAP,
            exclude_background: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [
            ("steps", self.steps),
            ("iterations_per_step", self.iterations_per_step),
            ("selection_window", self.selection_window),
            ("batch_size", self.batch_size),
            ("crop_size", self.crop_size),
            ("eval_window", self.eval_window),
            ("pseudo_label_window", self.pseudo_label_window),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.selection_window > self.steps {
            return Err(Error::Config(format!(
                "selection_window {} exceeds steps {}",
                self.selection_window, self.steps
            )));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    /// Loss terms averaged over the step's iterations.
    pub loss: LossBreakdown,
    pub eval_miou: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    /// 1-based step whose weights were kept.
    pub selected_step: usize,
}

impl TrainTrace {
    pub fn selected(&self) -> Option<&StepRecord> {
        self.steps.iter().find(|r| r.step == self.selected_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub step: usize,
    pub total_steps: usize,
    pub loss: f64,
}

impl Progress {
    pub fn fraction(&self) -> f64 {
        self.step as f64 / self.total_steps as f64
    }
}

fn stack(images: &[ImageChip], masks: &[DenseMask]) -> (Array4<f32>, Array3<u8>) {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    let x = ndarray::stack(Axis(0), &views).expect("crops share a shape");
    let mviews: Vec<_> = masks.iter().map(|m| m.view()).collect();
    let t = ndarray::stack(Axis(0), &mviews).expect("crops share a shape");
    (x, t)
}

fn to_f64<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> ndarray::Array<f64, D> {
    a.mapv(f64::from)
}

fn to_f32<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> ndarray::Array<f32, D> {
    a.mapv(|v| v as f32)
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut terms = parts[0].terms.clone();
    for (i, (_, v)) in terms.iter_mut().enumerate() {
        *v = parts.iter().map(|p| p.terms[i].1).sum::<f64>() / n;
    }
    LossBreakdown {
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
        terms,
    }
}

fn log_breakdown(step: usize, loss: &LossBreakdown) {
    for (name, value) in &loss.terms {
        log::debug!(target: "incseg::train", "step={step} term={name} value={value}");
    }
    log::debug!(target: "incseg::train", "step={step} term=total value={}", loss.total);
}

/// Dense training of the old-class network on random crops.
///
/// One trace record per gradient update. The head is kept centred (see
/// [`SegModel::center_head`]) so a later zero-initialized class starts out
/// never predicted.
pub fn pretrain(
    model: SegModel,
    dataset: &[LabeledImage],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(&Progress),
) -> Result<(SegModel, TrainTrace)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("pretraining dataset is empty".into()));
    }
    let k = model.num_classes();
    for li in dataset {
        if li.image.channels() != 3 {
            return Err(Error::Config(format!("{}: expected 3 channels", li.id)));
        }
        if li.image.height() < cfg.crop_size || li.image.width() < cfg.crop_size {
            return Err(Error::Config(format!(
                "{}: crop {} exceeds image {}x{}",
                li.id,
                cfg.crop_size,
                li.image.height(),
                li.image.width()
            )));
        }
        if let Some(&bad) = li
            .mask
            .data()
            .iter()
            .find(|&&v| v != li.mask.ignore_value() && usize::from(v) >= k)
        {
            return Err(Error::Config(format!(
                "{}: mask class {bad} is outside the model's {k} classes",
                li.id
            )));
        }
    }
    model.check_input(3, cfg.crop_size, cfg.crop_size)?;

    let mut model = model;
    model.center_head();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let total = cfg.updates();
    let mut trace = TrainTrace::default();
    let no_prototypes = Prototypes::default();
    for update in 1..=total {
        let started = Instant::now();
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let li = &dataset[rng.gen_range(0..dataset.len())];
            let crop = sample_crop(&li.image, &li.mask, cfg.crop_size, &mut rng, Some(&li.mask))?;
            images.push(crop.image);
            masks.push(
                crop.mask
                    .remap(&identity_with_ignore(li.mask.ignore_value())),
            );
        }
        let (x, t) = stack(&images, &masks);
        let (out, cache) = model.forward_batch(&x)?;
        let logits = to_f64(&out.logits);
        let features = to_f64(&out.features);
        let result = total_loss(
            &LossConfig::default(),
            LossInputs {
                logits: logits.view(),
                features: features.view(),
                targets: t.view(),
                ignore: IGNORE,
                memory: None,
                old_classes_of_interest: &[],
                old_classes: &[],
            },
            &no_prototypes,
        )?;
        let grads = model.backward(&cache, &to_f32(&result.dlogits), None);
        adam.step(model.params_mut(), &grads);
        model.center_head();
        log_breakdown(update, &result.breakdown);
        progress(&Progress {
            step: update,
            total_steps: total,
            loss: result.breakdown.total,
        });
        trace.steps.push(StepRecord {
            step: update,
            loss: result.breakdown,
            eval_miou: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    trace.selected_step = total;
    Ok((model, trace))
}

/// Table mapping a mask's own ignore value onto [`IGNORE`].
fn identity_with_ignore(ignore: u8) -> [u8; 256] {
    let mut table = [0u8; 256];
    for (i, v) in table.iter_mut().enumerate() {
        *v = i as u8;
    }
    table[usize::from(ignore)] = IGNORE;
    table
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: SegModel,
    pub trace: TrainTrace,
    /// Clicks plus pseudo-labels the network was trained on.
    pub targets: SparseAnnotations,
}

/// Fine-tunes an expanded model on one image from clicks and pseudo-labels.
pub fn finetune_incremental(
    model: SegModel,
    memory: &ModelSnapshot,
    image: &ImageChip,
    clicks: &SparseAnnotations,
    cfg: &FinetuneConfig,
    eval_gt: Option<&DenseMask>,
    mut progress: impl FnMut(&Progress),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let space = model.label_space().clone();
    let new_id = space
        .new_class_id()
        .ok_or_else(|| Error::Precondition("model head has not been expanded".into()))?;
    if space.without_new_class() != *memory.label_space() {
        return Err(Error::Precondition(
            "memory label space does not match the expanded model".into(),
        ));
    }
    if clicks.count_origin(Origin::UserClick) == 0 {
        return Err(Error::Precondition("no user clicks to train on".into()));
    }
    if clicks.dims() != (image.height(), image.width()) {
        return Err(Error::InputContract(
            "annotations and image differ in size".into(),
        ));
    }
    if cfg.selection_mode == SelectionMode::Benchmark && eval_gt.is_none() {
        return Err(Error::Config(
            "benchmark selection needs ground truth".into(),
        ));
    }
    if let Some(gt) = eval_gt {
        if gt.dim() != (image.height(), image.width()) {
            return Err(Error::InputContract(
                "ground truth and image differ in size".into(),
            ));
        }
    }
    let (h, w) = (image.height(), image.width());
    if cfg.crop_size > h || cfg.crop_size > w {
        return Err(Error::Config(format!(
            "crop {} exceeds image {h}x{w}",
            cfg.crop_size
        )));
    }
    model.check_input(3, cfg.crop_size, cfg.crop_size)?;

    let cap = cfg
        .pseudo_label_cap
        .unwrap_or_else(|| clicks.count_class(new_id, Origin::UserClick));
    let targets = pseudo_label_with_window(
        memory,
        image,
        clicks,
        cap,
        cfg.cap_mode,
        cfg.pseudo_label_window,
        cfg.pseudo_label_overlap,
    )?;
    let target_mask = rasterize(&targets, h, w, IGNORE)?;
    let labeled = target_mask.labeled_pixels();
    log::info!(
        "fine-tuning on {} clicks and {} pseudo-labels",
        targets.count_origin(Origin::UserClick),
        targets.count_origin(Origin::PseudoLabel)
    );

    let old_coi = space.old_classes_of_interest();
    let old_classes: Vec<u8> = memory.label_space().ids().collect();
    let exclude = cfg.exclude_background.then(|| space.background_id());
    let needs_memory = cfg.loss.regularizer.needs_memory();

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut prototypes = Prototypes::default();
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let first_selectable = cfg.steps - cfg.selection_window + 1;
    let size = cfg.crop_size;
    let jitter = (size / 2) as i64;

    for step in 1..=cfg.steps {
        let started = Instant::now();
        let mut parts = Vec::with_capacity(cfg.iterations_per_step);
        for _ in 0..cfg.iterations_per_step {
            let mut images = Vec::with_capacity(cfg.batch_size);
            let mut masks = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (r, c) = labeled[rng.gen_range(0..labeled.len())];
                let dy = rng.gen_range(-jitter..=jitter);
                let dx = rng.gen_range(-jitter..=jitter);
                let (row, col) = centered_origin(r, c, size, h, w);
                let row = (row as i64 + dy).clamp(0, (h - size) as i64) as usize;
                let col = (col as i64 + dx).clamp(0, (w - size) as i64) as usize;
                // Jitter may push the anchor pixel out; fall back to centring it.
                let (row, col) = if (row..row + size).contains(&r) && (col..col + size).contains(&c)
                {
                    (row, col)
                } else {
                    centered_origin(r, c, size, h, w)
                };
                images.push(image.crop(row, col, size, size)?);
                masks.push(target_mask.crop(row, col, size, size)?);
            }
            let (x, t) = stack(&images, &masks);
            let (out, cache) = model.forward_batch(&x)?;
            let logits = to_f64(&out.logits);
            let features = to_f64(&out.features);
            let memory_out = if needs_memory {
                let (m, _) = memory.model().forward_batch(&x)?;
                Some((to_f64(&m.logits), to_f64(&m.features)))
            } else {
                None
            };
            let result = total_loss(
                &cfg.loss,
                LossInputs {
                    logits: logits.view(),
                    features: features.view(),
                    targets: t.view(),
                    ignore: IGNORE,
                    memory: memory_out.as_ref().map(|(l, f)| MemoryOutputs {
                        logits: l.view(),
                        features: f.view(),
                    }),
                    old_classes_of_interest: &old_coi,
                    old_classes: &old_classes,
                },
                &prototypes,
            )?;
            let dfeatures = result.dfeatures.as_ref().map(to_f32);
            let grads = model.backward(&cache, &to_f32(&result.dlogits), dfeatures.as_ref());
            adam.step(model.params_mut(), &grads);
            prototypes = result.prototypes;
            parts.push(result.breakdown);
        }
        let loss = mean_breakdown(&parts);
        log_breakdown(step, &loss);

        let eval_miou = match eval_gt {
            Some(gt) => {
                let pred = predict_fast(&model, image, cfg.eval_window)?;
                image_mean_iou(&iou_per_class(&pred, gt, &space)?, exclude)
            }
            None => None,
        };
        if cfg.selection_mode == SelectionMode::Benchmark && step >= first_selectable {
            let score = eval_miou.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, step, model.params().clone()));
            }
        }
        progress(&Progress {
            step,
            total_steps: cfg.steps,
            loss: loss.total,
        });
        trace.steps.push(StepRecord {
            step,
            loss,
            eval_miou,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    trace.selected_step = cfg.steps;
    if let Some((_, step, params)) = best {
        trace.selected_step = step;
        *model.params_mut() = params;
    }
    Ok(FinetuneOutcome {
        model,
        trace,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nn::ParamStore;
    use ndarray::IxDyn;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f32>::default();
        store.add("w", ArrayD::from_elem(IxDyn(&[3]), 1.0f32));
        let mut adam = Adam::new(&store, 0.1);
        let grads = Grads(vec![ArrayD::from_shape_vec(
            IxDyn(&[3]),
            vec![2.0, -0.5, 0.0],
        )
        .unwrap()]);
        adam.step(&mut store, &grads);
        let w: Vec<f32> = store.iter().next().unwrap().1.iter().copied().collect();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f32>::default();
        store.add("w", ArrayD::from_elem(IxDyn(&[2]), 3.0f32));
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..500 {
            let w = store.iter().next().unwrap().1.clone();
            adam.step(&mut store, &Grads(vec![w.mapv(|v| 2.0 * (v - 1.0))]));
        }
        assert!(store
            .iter()
            .next()
            .unwrap()
            .1
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-2));
    }

    #[test]
    fn config_defaults_follow_the_schedule() {
        let p = PretrainConfig::default();
        assert_eq!(p.updates(), 10 * (10_000 / 16));
        let f = FinetuneConfig::default();
        assert_eq!(f.steps * f.iterations_per_step, 300);
        assert_eq!(f.steps - f.selection_window + 1, 16);
        assert!((f.learning_rate - 2e-5).abs() < 1e-20);
        let bad = FinetuneConfig {
            selection_window: 31,
            ..FinetuneConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
