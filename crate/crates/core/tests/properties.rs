use incseg::annotations::{
    select_pseudo_labels, simulate_clicks, AnnotationBudget, CapMode, Origin, Point,
    SparseAnnotations,
};
use incseg::data::sample_crop;
use incseg::inference::{coverage_counts, window_origins, window_stride};
use incseg::losses::{
    disca_loss, festa_loss, podnet_loss, sdr_loss, sparse_ce, Prototypes, SdrWeights,
};
use incseg::metrics::{iou_per_class, mean_iou_imagewise};
use incseg::model::LabelSpace;
use incseg::{DenseMask, ImageChip, IGNORE};
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn space3() -> LabelSpace {
    LabelSpace::new(["background", "road"], "background")
        .unwrap()
        .with_new_class("building")
        .unwrap()
}

fn array4(b: usize, c: usize, h: usize, w: usize, v: &[f64]) -> Array4<f64> {
    Array4::from_shape_fn((b, c, h, w), |(i, j, y, x)| {
        v[((i * c + j) * h + y) * w + x]
    })
}

fn labels(b: usize, h: usize, w: usize, v: &[u8], k: u8) -> Array3<u8> {
    Array3::from_shape_fn((b, h, w), |(i, y, x)| {
        let r = v[(i * h + y) * w + x];
        if r.is_multiple_of(4) {
            IGNORE
        } else {
            r % k
        }
    })
}

/// Probabilities, raw clicks `(y, x, class)`, cap, per-class mode.
type PseudoCase = (Array3<f32>, Vec<(usize, usize, u8)>, usize, bool);

fn probs_strategy() -> impl Strategy<Value = PseudoCase> {
    (
        proptest::collection::vec(0u8..5, 3 * 12 * 12),
        proptest::collection::vec((0usize..12, 0usize..12, 0u8..3), 0..20),
        0usize..80,
        any::<bool>(),
    )
        .prop_map(|(v, clicks, cap, per_class)| {
            let p = Array3::from_shape_fn((3, 12, 12), |(c, y, x)| {
                f32::from(v[(c * 12 + y) * 12 + x]) / 4.0
            });
            (p, clicks, cap, per_class)
        })
}

fn argmax(p: &Array3<f32>, y: usize, x: usize) -> (u8, f32) {
    let mut best = 0;
    for c in 1..p.dim().0 {
        if p[[c, y, x]] > p[[best, y, x]] {
            best = c;
        }
    }
    (best as u8, p[[best, y, x]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_labels_respect_cap_and_dominate_exclusions((probs, raw, cap, per_class) in probs_strategy()) {
        let mut clicks = SparseAnnotations::new("p", 12, 12);
        for (r, c, k) in raw {
            if !clicks.contains(r, c) {
                clicks.insert(Point::click(r, c, k)).unwrap();
            }
        }
        let mode = if per_class { CapMode::PerClass } else { CapMode::Global };
        let interest = [1u8, 2];
        let out = select_pseudo_labels(probs.view(), &interest, &clicks, cap, mode).unwrap();
        let pseudo: Vec<&Point> = out.points().iter().filter(|p| p.origin == Origin::PseudoLabel).collect();
        for k in interest {
            let n = pseudo.iter().filter(|p| p.class_id == k).count();
            prop_assert!(n <= cap);
        }
        if mode == CapMode::Global {
            prop_assert!(pseudo.len() <= cap);
        }
        prop_assert_eq!(out.count_origin(Origin::UserClick), clicks.len());
        // Every eligible pixel left out is no more confident than the
        // least confident included pseudo-label competing under the same cap.
        for y in 0..12 {
            for x in 0..12 {
                let (k, conf) = argmax(&probs, y, x);
                if !interest.contains(&k) || out.contains(y, x) {
                    continue;
                }
                let rivals = pseudo.iter().filter(|p| mode == CapMode::Global || p.class_id == k);
                if let Some(min) = rivals.map(|p| argmax(&probs, p.row, p.col).1).reduce(f32::min) {
                    prop_assert!(conf <= min);
                }
            }
        }
    }

    #[test]
    fn simulated_clicks_are_pure(v in proptest::collection::vec(0u8..3, 20 * 20), seed in any::<u64>()) {
        let gt = DenseMask::new(Array2::from_shape_vec((20, 20), v).unwrap());
        let space = space3();
        let budget = AnnotationBudget::new(gt.count(2).min(10), gt.count(0).min(10));
        let clicks = simulate_clicks(&gt, &space, budget, seed, "x").unwrap();
        prop_assert!(clicks.check_click_purity(&space).is_ok());
        prop_assert_eq!(clicks.len(), budget.total());
        for p in clicks.points() {
            prop_assert_eq!(gt.get(p.row, p.col), p.class_id);
        }
    }

    #[test]
    fn losses_are_non_negative(
        z in proptest::collection::vec(-4.0f64..4.0, 2 * 3 * 4 * 4),
        m in proptest::collection::vec(-4.0f64..4.0, 2 * 3 * 4 * 4),
        t in proptest::collection::vec(any::<u8>(), 2 * 4 * 4),
    ) {
        let logits = array4(2, 3, 4, 4, &z);
        let memory = array4(2, 3, 4, 4, &m);
        let mut targets = labels(2, 4, 4, &t, 3);
        targets[[0, 0, 0]] = 1;
        prop_assert!(sparse_ce(logits.view(), targets.view(), IGNORE).unwrap().value >= 0.0);
        let mem2 = memory.slice(ndarray::s![.., 0..2, .., ..]);
        prop_assert!(disca_loss(logits.view(), mem2, &[1]).unwrap().value >= 0.0);
        prop_assert!(podnet_loss(logits.view(), memory.view()).unwrap().value >= 0.0);
        let festa = festa_loss(logits.view(), targets.view(), IGNORE).unwrap();
        prop_assert!(festa.spatial >= 0.0 && festa.feature >= 0.0 && festa.value >= 0.0);
        let mut mem_protos = Prototypes::default();
        mem_protos.insert(0, vec![1.0, 0.0, 0.0]);
        mem_protos.insert(1, vec![0.0, 1.0, 0.5]);
        let sdr = sdr_loss(logits.view(), targets.view(), IGNORE, &Prototypes::default(), &mem_protos, 0.0, SdrWeights::default()).unwrap();
        prop_assert!(sdr.matching >= 0.0 && sdr.repulsive >= 0.0 && sdr.attracting >= 0.0);
        if sdr.prototypes.len() >= 2 {
            prop_assert!(sdr.repulsive > 0.0 && sdr.repulsive <= 1.0);
        }
    }

    #[test]
    fn masked_pixels_do_not_move_ce_or_disca(
        z in proptest::collection::vec(-4.0f64..4.0, 3 * 5 * 5),
        m in proptest::collection::vec(-4.0f64..4.0, 2 * 5 * 5),
        t in proptest::collection::vec(any::<u8>(), 5 * 5),
        noise in proptest::collection::vec(-10.0f64..10.0, 3 * 5 * 5),
    ) {
        let logits = array4(1, 3, 5, 5, &z);
        let memory = array4(1, 2, 5, 5, &m);
        let mut targets = labels(1, 5, 5, &t, 3);
        targets[[0, 2, 2]] = 0;
        let base_ce = sparse_ce(logits.view(), targets.view(), IGNORE).unwrap().value;
        let base_disca = disca_loss(logits.view(), memory.view(), &[1]).unwrap().value;

        let mut at_ignored = logits.clone();
        let mut off_disca = logits.clone();
        for ((_, k, y, x), v) in at_ignored.indexed_iter_mut() {
            if targets[[0, y, x]] == IGNORE {
                *v += noise[(k * 5 + y) * 5 + x];
            }
        }
        for ((_, k, y, x), v) in off_disca.indexed_iter_mut() {
            let mem_arg = if memory[[0, 1, y, x]] > memory[[0, 0, y, x]] { 1 } else { 0 };
            if mem_arg != 1 {
                *v += noise[(k * 5 + y) * 5 + x];
            }
        }
        prop_assert_eq!(sparse_ce(at_ignored.view(), targets.view(), IGNORE).unwrap().value, base_ce);
        prop_assert_eq!(disca_loss(off_disca.view(), memory.view(), &[1]).unwrap().value, base_disca);
    }

    #[test]
    fn iou_symmetric_and_bounded(
        a in proptest::collection::vec(0u8..3, 9 * 7),
        b in proptest::collection::vec(0u8..3, 9 * 7),
    ) {
        let pa = DenseMask::new(Array2::from_shape_vec((9, 7), a).unwrap());
        let pb = DenseMask::new(Array2::from_shape_vec((9, 7), b).unwrap());
        let s = space3();
        let ab = iou_per_class(&pa, &pb, &s).unwrap();
        let ba = iou_per_class(&pb, &pa, &s).unwrap();
        prop_assert_eq!(&ab, &ba);
        for v in ab.values().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn imagewise_mean_ignores_image_order(
        masks in proptest::collection::vec(proptest::collection::vec(0u8..3, 16), 2..6),
        rot in 0usize..6,
    ) {
        let s = space3();
        let gt = DenseMask::new(Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 3) as u8));
        let ious: Vec<_> = masks
            .iter()
            .map(|m| iou_per_class(&DenseMask::new(Array2::from_shape_vec((4, 4), m.clone()).unwrap()), &gt, &s).unwrap())
            .collect();
        let mut rotated = ious.clone();
        rotated.rotate_left(rot % ious.len());
        rotated.reverse();
        let a = mean_iou_imagewise(&ious, &s, false).unwrap();
        let b = mean_iou_imagewise(&rotated, &s, false).unwrap();
        prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
        for (k, v) in &a.per_class {
            match (v, b.per_class[k]) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(*x, y),
            }
        }
    }

    #[test]
    fn window_origins_follow_stride_law(len in 1usize..700, window in 1usize..300, overlap in 0.0f64..0.95) {
        prop_assume!(len >= window);
        let stride = window_stride(window, overlap).unwrap();
        let origins = window_origins(len, window, overlap).unwrap();
        let last = *origins.last().unwrap();
        prop_assert_eq!(last, len - window);
        for &o in &origins[..origins.len() - 1] {
            prop_assert_eq!(o % stride, 0);
        }
        prop_assert!(origins.windows(2).all(|p| p[0] < p[1]));
        let cov = coverage_counts(len.min(64), len, window.min(len.min(64)), overlap).unwrap();
        prop_assert!(cov.iter().all(|&c| c >= 1));
    }

    #[test]
    fn training_crops_contain_a_label(
        pixels in proptest::collection::vec((0usize..40, 0usize..50), 1..4),
        size in 4usize..40,
        seed in any::<u64>(),
    ) {
        let mut mask = DenseMask::filled(40, 50, IGNORE);
        for &(r, c) in &pixels {
            mask.set(r, c, 1);
        }
        let image = ImageChip::zeros(3, 40, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = sample_crop(&image, &mask, size, &mut rng, Some(&mask)).unwrap();
        prop_assert!(crop.mask.labeled_count() >= 1);
        prop_assert_eq!(crop.mask.dim(), (size, size));
        prop_assert_eq!((crop.image.height(), crop.image.width()), (size, size));
        prop_assert_eq!(crop.mask, mask.crop(crop.row, crop.col, size, size).unwrap());
    }
}
