//! Sparse point labels: simulated clicks, memory-network pseudo-labels and
//! their rasterization into a masked training target.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{predict_sliding, DEFAULT_OVERLAP, DEFAULT_WINDOW};
use crate::model::{LabelSpace, ModelSnapshot};
use crate::types::{DenseMask, ImageChip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    UserClick,
    PseudoLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub class_id: u8,
    pub origin: Origin,
}

impl Point {
    pub fn click(row: usize, col: usize, class_id: u8) -> Self {
        Self {
            row,
            col,
            class_id,
            origin: Origin::UserClick,
        }
    }
}

/// Point labels on one image. At most one point per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseAnnotations {
    image_id: String,
    height: usize,
    width: usize,
    points: Vec<Point>,
    occupied: HashSet<(usize, usize)>,
}

impl SparseAnnotations {
    pub fn new(image_id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            image_id: image_id.into(),
            height,
            width,
            points: Vec::new(),
            occupied: HashSet::new(),
        }
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.occupied.contains(&(row, col))
    }

    pub fn insert(&mut self, point: Point) -> Result<()> {
        if point.row >= self.height || point.col >= self.width {
            return Err(Error::InputContract(format!(
                "point ({}, {}) outside {}x{} image",
                point.row, point.col, self.height, self.width
            )));
        }
        if !self.occupied.insert((point.row, point.col)) {
            return Err(Error::DuplicateAnnotation {
                row: point.row,
                col: point.col,
            });
        }
        self.points.push(point);
        Ok(())
    }

    pub fn extend(&mut self, points: impl IntoIterator<Item = Point>) -> Result<()> {
        points.into_iter().try_for_each(|p| self.insert(p))
    }

    pub fn count_origin(&self, origin: Origin) -> usize {
        self.points.iter().filter(|p| p.origin == origin).count()
    }

    pub fn count_class(&self, class_id: u8, origin: Origin) -> usize {
        self.points
            .iter()
            .filter(|p| p.class_id == class_id && p.origin == origin)
            .count()
    }

    /// User clicks may only carry the new class or background.
    pub fn check_click_purity(&self, label_space: &LabelSpace) -> Result<()> {
        let new_id = label_space.new_class_id().ok_or_else(|| {
            Error::Precondition("no new class registered in the label space".into())
        })?;
        let bg = label_space.background_id();
        for p in self.points.iter().filter(|p| p.origin == Origin::UserClick) {
            if p.class_id != new_id && p.class_id != bg {
                return Err(Error::InputContract(format!(
                    "click at ({}, {}) carries class {}; clicks may only label the new class ({new_id}) or background ({bg}), old classes come from pseudo-labels",
                    p.row, p.col, p.class_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<AnnotationRecord> {
        self.points
            .iter()
            .map(|p| AnnotationRecord {
                image_id: self.image_id.clone(),
                row: p.row,
                col: p.col,
                class_id: p.class_id,
                origin: p.origin,
            })
            .collect()
    }
}

/// One line of the newline-delimited annotation exchange format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub class_id: u8,
    pub origin: Origin,
}

pub fn write_ndjson<W: Write>(ann: &SparseAnnotations, mut out: W) -> Result<()> {
    for record in ann.to_records() {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationBudget {
    pub n_new_class: usize,
    pub n_background: usize,
}

/// How a single click count is turned into a budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSplit {
    /// `count` new-class clicks and `count` background clicks.
    #[default]
    PerCategory,
    /// `count` clicks in total, split evenly (new class gets the odd one).
    Total,
}

impl AnnotationBudget {
    pub fn new(n_new_class: usize, n_background: usize) -> Self {
        Self {
            n_new_class,
            n_background,
        }
    }

    pub fn from_count(count: usize, split: BudgetSplit) -> Self {
        match split {
            BudgetSplit::PerCategory => Self::new(count, count),
            BudgetSplit::Total => Self::new(count - count / 2, count / 2),
        }
    }

    pub fn total(&self) -> usize {
        self.n_new_class + self.n_background
    }
}

/// Draws clicks uniformly without replacement from ground-truth pixels of the
/// new class and of background.
pub fn simulate_clicks(
    gt: &DenseMask,
    label_space: &LabelSpace,
    budget: AnnotationBudget,
    rng_seed: u64,
    image_id: &str,
) -> Result<SparseAnnotations> {
    let new_id = label_space.new_class_id().ok_or_else(|| {
        Error::Precondition("click simulation needs a registered new class".into())
    })?;
    let bg = label_space.background_id();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (h, w) = gt.dim();
    let mut ann = SparseAnnotations::new(image_id, h, w);
    for (class_id, wanted) in [(new_id, budget.n_new_class), (bg, budget.n_background)] {
        let candidates: Vec<(usize, usize)> = gt
            .data()
            .indexed_iter()
            .filter(|(_, &v)| v == class_id)
            .map(|(ix, _)| ix)
            .collect();
        if candidates.len() < wanted {
            return Err(Error::Budget {
                class_id,
                requested: wanted,
                available: candidates.len(),
            });
        }
        for i in rand::seq::index::sample(&mut rng, candidates.len(), wanted) {
            let (row, col) = candidates[i];
            ann.insert(Point::click(row, col, class_id))?;
        }
    }
    Ok(ann)
}

/// Whether the pseudo-label cap applies to all old classes jointly or to each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapMode {
    #[default]
    Global,
    PerClass,
}

/// Candidate pseudo-label: a pixel whose memory argmax is an old class of interest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub row: usize,
    pub col: usize,
    pub class_id: u8,
    pub confidence: f32,
}

/// Eligible pixels sorted by descending confidence, ties by `(row, col)`.
pub fn rank_candidates(
    probs: ArrayView3<'_, f32>,
    old_classes_of_interest: &[u8],
    clicks: &SparseAnnotations,
) -> Vec<Candidate> {
    let (k, h, w) = probs.dim();
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let mut best = 0;
            for c in 1..k {
                if probs[[c, row, col]] > probs[[best, row, col]] {
                    best = c;
                }
            }
            let class_id = best as u8;
            if old_classes_of_interest.contains(&class_id) && !clicks.contains(row, col) {
                out.push(Candidate {
                    row,
                    col,
                    class_id,
                    confidence: probs[[best, row, col]],
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    out
}

/// Adds at most `cap` old-class pseudo-labels (per `mode`) to a copy of `clicks`.
pub fn select_pseudo_labels(
    probs: ArrayView3<'_, f32>,
    old_classes_of_interest: &[u8],
    clicks: &SparseAnnotations,
    cap: usize,
    mode: CapMode,
) -> Result<SparseAnnotations> {
    let (_, h, w) = probs.dim();
    if clicks.dims() != (h, w) {
        return Err(Error::InputContract(format!(
            "confidence map {h}x{w} does not match annotations {:?}",
            clicks.dims()
        )));
    }
    let ranked = rank_candidates(probs, old_classes_of_interest, clicks);
    let mut out = clicks.clone();
    let mut taken_per_class = [0usize; 256];
    let mut taken = 0usize;
    for cand in ranked {
        let admit = match mode {
            CapMode::Global => taken < cap,
            CapMode::PerClass => taken_per_class[usize::from(cand.class_id)] < cap,
        };
        if !admit {
            if mode == CapMode::Global {
                break;
            }
            continue;
        }
        out.insert(Point {
            row: cand.row,
            col: cand.col,
            class_id: cand.class_id,
            origin: Origin::PseudoLabel,
        })?;
        taken += 1;
        taken_per_class[usize::from(cand.class_id)] += 1;
    }
    Ok(out)
}

/// Pseudo-labels from the memory network's full-image prediction.
pub fn pseudo_label(
    memory: &ModelSnapshot,
    image: &ImageChip,
    clicks: &SparseAnnotations,
    cap: usize,
    mode: CapMode,
) -> Result<SparseAnnotations> {
    pseudo_label_with_window(
        memory,
        image,
        clicks,
        cap,
        mode,
        DEFAULT_WINDOW,
        DEFAULT_OVERLAP,
    )
}

pub fn pseudo_label_with_window(
    memory: &ModelSnapshot,
    image: &ImageChip,
    clicks: &SparseAnnotations,
    cap: usize,
    mode: CapMode,
    window: usize,
    overlap: f64,
) -> Result<SparseAnnotations> {
    if memory.label_space().new_class_id().is_some() {
        return Err(Error::Precondition(
            "memory network must predict the old label space only".into(),
        ));
    }
    let prediction = predict_sliding(memory.model(), image, window, overlap)?;
    select_pseudo_labels(
        prediction.probs.view(),
        &memory.label_space().classes_of_interest(),
        clicks,
        cap,
        mode,
    )
}

pub fn rasterize(
    ann: &SparseAnnotations,
    height: usize,
    width: usize,
    ignore_value: u8,
) -> Result<DenseMask> {
    let mut data = Array2::from_elem((height, width), ignore_value);
    for p in ann.points() {
        if p.row >= height || p.col >= width {
            return Err(Error::InputContract(format!(
                "point ({}, {}) outside {height}x{width} raster",
                p.row, p.col
            )));
        }
        data[[p.row, p.col]] = p.class_id;
    }
    Ok(DenseMask::with_ignore(data, ignore_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IGNORE;
    use ndarray::Array3;

    fn space() -> LabelSpace {
        LabelSpace::new(["background", "road"], "background")
            .unwrap()
            .with_new_class("building")
            .unwrap()
    }

    #[test]
    fn duplicate_and_out_of_bounds_points_rejected() {
        let mut a = SparseAnnotations::new("img", 4, 4);
        a.insert(Point::click(1, 1, 2)).unwrap();
        assert!(matches!(
            a.insert(Point::click(1, 1, 0)),
            Err(Error::DuplicateAnnotation { row: 1, col: 1 })
        ));
        assert!(a.insert(Point::click(4, 0, 0)).is_err());
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn click_purity() {
        let mut a = SparseAnnotations::new("img", 4, 4);
        a.insert(Point::click(0, 0, 2)).unwrap();
        a.insert(Point::click(0, 1, 0)).unwrap();
        assert!(a.check_click_purity(&space()).is_ok());
        a.insert(Point::click(0, 2, 1)).unwrap();
        assert!(a.check_click_purity(&space()).is_err());
    }

    #[test]
    fn all_background_gt_exhausts_budget() {
        let gt = DenseMask::filled(8, 8, 0);
        let err =
            simulate_clicks(&gt, &space(), AnnotationBudget::new(10, 10), 0, "x").unwrap_err();
        assert!(matches!(
            err,
            Error::Budget {
                class_id: 2,
                requested: 10,
                available: 0
            }
        ));
    }

    #[test]
    fn simulated_clicks_land_on_their_class_and_are_deterministic() {
        let mut gt = DenseMask::filled(32, 32, 0);
        for r in 0..20 {
            for c in 0..20 {
                gt.set(r, c, 2);
            }
        }
        let b = AnnotationBudget::new(300, 0);
        let a = simulate_clicks(&gt, &space(), b, 7, "x").unwrap();
        assert_eq!(a.len(), 300);
        assert!(a.points().iter().all(|p| gt.get(p.row, p.col) == 2));
        let again = simulate_clicks(&gt, &space(), b, 7, "x").unwrap();
        assert_eq!(a, again);
        let mixed = simulate_clicks(&gt, &space(), AnnotationBudget::new(5, 9), 1, "x").unwrap();
        assert_eq!(mixed.count_class(2, Origin::UserClick), 5);
        assert_eq!(mixed.count_class(0, Origin::UserClick), 9);
        let mask = rasterize(&mixed, 32, 32, IGNORE).unwrap();
        for ((r, c), &v) in mask.data().indexed_iter() {
            if v != IGNORE {
                assert_eq!(v, gt.get(r, c));
            }
        }
    }

    #[test]
    fn budget_split_modes() {
        assert_eq!(
            AnnotationBudget::from_count(300, BudgetSplit::PerCategory),
            AnnotationBudget::new(300, 300)
        );
        assert_eq!(
            AnnotationBudget::from_count(301, BudgetSplit::Total),
            AnnotationBudget::new(151, 150)
        );
    }

    #[test]
    fn no_eligible_pixels_returns_clicks() {
        let probs = Array3::from_shape_fn((2, 4, 4), |(k, _, _)| if k == 0 { 0.9 } else { 0.1 });
        let mut clicks = SparseAnnotations::new("x", 4, 4);
        clicks.insert(Point::click(0, 0, 2)).unwrap();
        let out = select_pseudo_labels(probs.view(), &[1], &clicks, 10, CapMode::Global).unwrap();
        assert_eq!(out, clicks);
    }

    #[test]
    fn pseudo_labels_take_most_confident_and_skip_clicks() {
        // 4x4, road confidence increases with flat index; left half argmax background.
        let probs = Array3::from_shape_fn((2, 4, 4), |(k, r, c)| {
            let road = if c >= 2 {
                0.5 + 0.01 * (r * 4 + c) as f32
            } else {
                0.2
            };
            if k == 1 {
                road
            } else {
                1.0 - road
            }
        });
        let mut clicks = SparseAnnotations::new("x", 4, 4);
        clicks.insert(Point::click(3, 3, 2)).unwrap();
        let out = select_pseudo_labels(probs.view(), &[1], &clicks, 3, CapMode::Global).unwrap();
        let pseudo: Vec<(usize, usize)> = out
            .points()
            .iter()
            .filter(|p| p.origin == Origin::PseudoLabel)
            .map(|p| (p.row, p.col))
            .collect();
        assert_eq!(pseudo, vec![(3, 2), (2, 3), (2, 2)]);
        assert!(out
            .points()
            .iter()
            .all(|p| p.origin == Origin::UserClick || p.class_id == 1));
    }

    #[test]
    fn per_class_cap_applies_to_each_class() {
        let probs = Array3::from_shape_fn((3, 2, 4), |(k, _, c)| match (k, c < 2) {
            (1, true) | (2, false) => 0.8,
            _ => 0.1,
        });
        let clicks = SparseAnnotations::new("x", 2, 4);
        let g = select_pseudo_labels(probs.view(), &[1, 2], &clicks, 3, CapMode::Global).unwrap();
        assert_eq!(g.count_origin(Origin::PseudoLabel), 3);
        let p = select_pseudo_labels(probs.view(), &[1, 2], &clicks, 3, CapMode::PerClass).unwrap();
        assert_eq!(p.count_class(1, Origin::PseudoLabel), 3);
        assert_eq!(p.count_class(2, Origin::PseudoLabel), 3);
    }

    #[test]
    fn rasterize_contract() {
        let empty = SparseAnnotations::new("x", 4, 4);
        assert_eq!(rasterize(&empty, 4, 4, IGNORE).unwrap().labeled_count(), 0);
        let mut one = SparseAnnotations::new("x", 4, 4);
        one.insert(Point::click(2, 3, 1)).unwrap();
        let m = rasterize(&one, 4, 4, IGNORE).unwrap();
        assert_eq!(m.labeled_count(), 1);
        assert_eq!(m.get(2, 3), 1);
        assert!(rasterize(&one, 2, 2, IGNORE).is_err());
    }

    #[test]
    fn ndjson_roundtrip() {
        let mut a = SparseAnnotations::new("tile_7", 8, 8);
        a.insert(Point::click(1, 2, 2)).unwrap();
        a.insert(Point {
            row: 3,
            col: 4,
            class_id: 1,
            origin: Origin::PseudoLabel,
        })
        .unwrap();
        let mut buf = Vec::new();
        write_ndjson(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains(r#""origin":"pseudo_label""#));
        let records = read_ndjson(buf.as_slice()).unwrap();
        assert_eq!(records, a.to_records());
    }
}
