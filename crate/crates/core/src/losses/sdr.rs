//! Prototype-based latent regularization.
//!
//! All feature vectors and prototypes are L2-normalized. With `p` the updated
//! prototypes, `p̂` the memory prototypes and `g_i` the normalized feature of
//! labeled cell `i`:
//!
//! - matching:   mean over old classes present in both sets of `||p_c - p̂_c||²`
//! - repulsive:  mean over unordered class pairs of `1 / (1 + ||p_c - p_c'||²)`
//! - attracting: mean over labeled cells of `||g_i - p_{y_i}||²`
//!
//! Updated prototypes are recomputed every step as an exponential moving
//! average of batch class means, and gradients flow through that average.

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    vectors: BTreeMap<u8, Vec<f64>>,
    counts: BTreeMap<u8, u64>,
}

impl Prototypes {
    pub fn get(&self, class_id: u8) -> Option<&[f64]> {
        self.vectors.get(&class_id).map(Vec::as_slice)
    }

    pub fn count(&self, class_id: u8) -> u64 {
        self.counts.get(&class_id).copied().unwrap_or(0)
    }

    pub fn classes(&self) -> impl Iterator<Item = u8> + '_ {
        self.vectors.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Inserts a vector as given, normalizing it.
    pub fn insert(&mut self, class_id: u8, vector: Vec<f64>) {
        let n = norm(&vector).max(NORM_FLOOR);
        self.vectors
            .insert(class_id, vector.into_iter().map(|v| v / n).collect());
        self.counts.entry(class_id).or_insert(0);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn feature_at(features: &ArrayView4<'_, f64>, (b, y, x): (usize, usize, usize)) -> Vec<f64> {
    (0..features.dim().1)
        .map(|c| features[[b, c, y, x]])
        .collect()
}

fn check_shapes(features: &ArrayView4<'_, f64>, labels: &ArrayView3<'_, u8>) -> Result<()> {
    let (b, _, h, w) = features.dim();
    if labels.dim() != (b, h, w) {
        return Err(Error::InputContract(format!(
            "labels {:?} do not match features {:?}",
            labels.dim(),
            features.dim()
        )));
    }
    Ok(())
}

/// Labeled cells grouped by class, in row-major order.
fn cells_by_class(
    labels: &ArrayView3<'_, u8>,
    ignore: u8,
) -> BTreeMap<u8, Vec<(usize, usize, usize)>> {
    let mut groups: BTreeMap<u8, Vec<_>> = BTreeMap::new();
    for (ix, &l) in labels.indexed_iter() {
        if l != ignore {
            groups.entry(l).or_default().push(ix);
        }
    }
    groups
}

/// Pre-normalization EMA blend for one class; `None` when its norm vanishes.
struct Blend {
    /// Unnormalized blend `q`.
    q: Vec<f64>,
    q_norm: f64,
    /// Weight of the batch mean in `q`.
    batch_weight: f64,
    cells: Vec<(usize, usize, usize)>,
}

fn blends(
    features: &ArrayView4<'_, f64>,
    groups: &BTreeMap<u8, Vec<(usize, usize, usize)>>,
    previous: &Prototypes,
    momentum: f64,
) -> BTreeMap<u8, Blend> {
    let c = features.dim().1;
    let mut out = BTreeMap::new();
    for (&class_id, cells) in groups {
        let mut mean = vec![0.0; c];
        for &ix in cells {
            for (m, v) in mean.iter_mut().zip(feature_at(features, ix)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= cells.len() as f64);
        let (q, batch_weight) = match previous.get(class_id) {
            Some(prev) => (
                prev.iter()
                    .zip(&mean)
                    .map(|(p, m)| momentum * p + (1.0 - momentum) * m)
                    .collect::<Vec<_>>(),
                1.0 - momentum,
            ),
            None => (mean, 1.0),
        };
        let q_norm = norm(&q);
        if q_norm > NORM_FLOOR {
            out.insert(
                class_id,
                Blend {
                    q,
                    q_norm,
                    batch_weight,
                    cells: cells.clone(),
                },
            );
        }
    }
    out
}

fn assemble(previous: &Prototypes, blends: &BTreeMap<u8, Blend>) -> Prototypes {
    let mut next = previous.clone();
    for (&class_id, blend) in blends {
        next.vectors
            .insert(class_id, blend.q.iter().map(|v| v / blend.q_norm).collect());
        *next.counts.entry(class_id).or_insert(0) += blend.cells.len() as u64;
    }
    next
}

/// Batch class means blended into `previous` with weight `momentum` on the
/// past, then normalized. Classes absent from the batch keep their vectors.
pub fn compute_prototypes(
    features: ArrayView4<'_, f64>,
    labels: ArrayView3<'_, u8>,
    ignore: u8,
    previous: &Prototypes,
    momentum: f64,
) -> Result<Prototypes> {
    check_shapes(&features, &labels)?;
    check_momentum(momentum)?;
    let groups = cells_by_class(&labels, ignore);
    Ok(assemble(
        previous,
        &blends(&features, &groups, previous, momentum),
    ))
}

fn check_momentum(momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "prototype momentum {momentum} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdrWeights {
    pub matching: f64,
    pub repulsive: f64,
    pub attracting: f64,
}

impl Default for SdrWeights {
    fn default() -> Self {
        Self {
            matching: 1.0,
            repulsive: 1.0,
            attracting: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdrOutput {
    /// Weighted sum of the three terms.
    pub value: f64,
    pub matching: f64,
    pub repulsive: f64,
    pub attracting: f64,
    /// Gradient of `value` with respect to the raw features.
    pub grad: Array4<f64>,
    /// Updated prototypes after this step.
    pub prototypes: Prototypes,
}

/// Prototype regularizer on features `(B, C, h, w)` with labels `(B, h, w)`.
///
/// `previous` is the updated network's prototype state from the last step;
/// `memory` holds prototypes of the memory network for old classes.
#[allow(clippy::too_many_arguments)]
pub fn sdr_loss(
    features: ArrayView4<'_, f64>,
    labels: ArrayView3<'_, u8>,
    ignore: u8,
    previous: &Prototypes,
    memory: &Prototypes,
    momentum: f64,
    weights: SdrWeights,
) -> Result<SdrOutput> {
    check_shapes(&features, &labels)?;
    check_momentum(momentum)?;
    let c = features.dim().1;
    let groups = cells_by_class(&labels, ignore);
    let blends = blends(&features, &groups, previous, momentum);
    let prototypes = assemble(previous, &blends);

    // Gradient with respect to each differentiable prototype.
    let mut d_proto: BTreeMap<u8, Vec<f64>> = blends.keys().map(|&k| (k, vec![0.0; c])).collect();
    let mut grad = Array4::zeros(features.raw_dim());

    // Matching.
    let matched: Vec<u8> = prototypes
        .classes()
        .filter(|k| memory.get(*k).is_some())
        .collect();
    let mut matching = 0.0;
    if !matched.is_empty() {
        let scale = 1.0 / matched.len() as f64;
        for &k in &matched {
            let p = prototypes.get(k).expect("present");
            let m = memory.get(k).expect("present");
            matching += scale * sq_dist(p, m);
            if let Some(dp) = d_proto.get_mut(&k) {
                for i in 0..c {
                    dp[i] += weights.matching * scale * 2.0 * (p[i] - m[i]);
                }
            }
        }
    }

    // Repulsive.
    let classes: Vec<u8> = prototypes.classes().collect();
    let mut repulsive = 0.0;
    let n_pairs = classes.len() * classes.len().saturating_sub(1) / 2;
    if n_pairs > 0 {
        let scale = 1.0 / n_pairs as f64;
        for (i, &a) in classes.iter().enumerate() {
            for &b in &classes[i + 1..] {
                let pa = prototypes.get(a).expect("present");
                let pb = prototypes.get(b).expect("present");
                let d2 = sq_dist(pa, pb);
                repulsive += scale * 1.0 / (1.0 + d2);
                // d/d(pa) of 1/(1+d²) = -2 (pa - pb) / (1+d²)²
                let coeff = -weights.repulsive * scale * 2.0 / (1.0 + d2).powi(2);
                if let Some(dp) = d_proto.get_mut(&a) {
                    for j in 0..c {
                        dp[j] += coeff * (pa[j] - pb[j]);
                    }
                }
                if let Some(dp) = d_proto.get_mut(&b) {
                    for j in 0..c {
                        dp[j] -= coeff * (pa[j] - pb[j]);
                    }
                }
            }
        }
    }

    // Attracting.
    let n_cells: usize = blends.values().map(|b| b.cells.len()).sum();
    let mut attracting = 0.0;
    if n_cells > 0 {
        let scale = 1.0 / n_cells as f64;
        for (&k, blend) in &blends {
            let p = prototypes.get(k).expect("present").to_vec();
            for &ix in &blend.cells {
                let f = feature_at(&features, ix);
                let f_norm = norm(&f).max(NORM_FLOOR);
                let g: Vec<f64> = f.iter().map(|v| v / f_norm).collect();
                attracting += scale * sq_dist(&g, &p);
                let dg: Vec<f64> = (0..c)
                    .map(|j| weights.attracting * scale * 2.0 * (g[j] - p[j]))
                    .collect();
                let dp = d_proto.get_mut(&k).expect("present");
                for j in 0..c {
                    dp[j] -= dg[j];
                }
                // Through g = f / |f|.
                let g_dot: f64 = g.iter().zip(&dg).map(|(a, b)| a * b).sum();
                let (b, y, x) = ix;
                for j in 0..c {
                    grad[[b, j, y, x]] += (dg[j] - g[j] * g_dot) / f_norm;
                }
            }
        }
    }

    // Back through p = q / |q|, q = ... + w * mean(f).
    for (k, blend) in &blends {
        let dp = &d_proto[k];
        let p = prototypes.get(*k).expect("present");
        let p_dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        let per_cell = blend.batch_weight / blend.q_norm / blend.cells.len() as f64;
        let dq_mean: Vec<f64> = (0..c).map(|j| (dp[j] - p[j] * p_dot) * per_cell).collect();
        for &(b, y, x) in &blend.cells {
            for j in 0..c {
                grad[[b, j, y, x]] += dq_mean[j];
            }
        }
    }

    let value = weights.matching * matching
        + weights.repulsive * repulsive
        + weights.attracting * attracting;
    Ok(SdrOutput {
        value,
        matching,
        repulsive,
        attracting,
        grad,
        prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IGNORE;
    use ndarray::{Array3, Array4};

    #[test]
    fn zero_momentum_single_class_is_normalized_global_mean() {
        let f = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| (c + y + 2 * x) as f64);
        let l = Array3::from_elem((1, 2, 2), 0u8);
        let p =
            compute_prototypes(f.view(), l.view(), IGNORE, &Prototypes::default(), 0.0).unwrap();
        // channel means: c0 = (0+2+1+3)/4 = 1.5, c1 = 2.5
        let n = (1.5f64 * 1.5 + 2.5 * 2.5).sqrt();
        let v = p.get(0).unwrap();
        assert!((v[0] - 1.5 / n).abs() < 1e-15 && (v[1] - 2.5 / n).abs() < 1e-15);
        assert_eq!(p.count(0), 4);
    }

    #[test]
    fn unit_momentum_freezes_prototypes() {
        let mut prev = Prototypes::default();
        prev.insert(0, vec![1.0, 0.0]);
        let f = Array4::from_elem((1, 2, 2, 2), 0.7);
        let l = Array3::from_elem((1, 2, 2), 0u8);
        let p = compute_prototypes(f.view(), l.view(), IGNORE, &prev, 1.0).unwrap();
        assert_eq!(p.get(0), prev.get(0));
    }

    #[test]
    fn two_class_means_by_hand() {
        // 2x2 map, class 0 on the diagonal, class 1 off it.
        let vecs = [[1.0, 0.0], [0.0, 2.0], [0.0, 4.0], [3.0, 0.0]];
        let f = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| vecs[y * 2 + x][c]);
        let l = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| u8::from(y != x));
        let p =
            compute_prototypes(f.view(), l.view(), IGNORE, &Prototypes::default(), 0.0).unwrap();
        // class 0: mean of (1,0),(3,0) = (2,0); class 1: mean of (0,2),(0,4) = (0,3)
        assert_eq!(p.get(0).unwrap(), &[1.0, 0.0]);
        assert_eq!(p.get(1).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn absent_classes_persist() {
        let mut prev = Prototypes::default();
        prev.insert(5, vec![0.0, 1.0]);
        let f = Array4::from_elem((1, 2, 1, 1), 1.0);
        let l = Array3::from_elem((1, 1, 1), 0u8);
        let p = compute_prototypes(f.view(), l.view(), IGNORE, &prev, 0.5).unwrap();
        assert_eq!(p.get(5).unwrap(), &[0.0, 1.0]);
        assert!(p.get(0).is_some());
    }

    #[test]
    fn matching_vanishes_when_prototypes_agree() {
        let mut prev = Prototypes::default();
        prev.insert(0, vec![1.0, 0.0]);
        prev.insert(1, vec![0.0, 1.0]);
        let f = Array4::from_elem((1, 2, 1, 2), 0.3);
        let l = Array3::from_shape_fn((1, 1, 2), |(_, _, x)| x as u8);
        let out = sdr_loss(
            f.view(),
            l.view(),
            IGNORE,
            &prev,
            &prev,
            1.0,
            SdrWeights::default(),
        )
        .unwrap();
        assert_eq!(out.matching, 0.0);
    }

    #[test]
    fn identical_prototypes_repel_maximally() {
        let prev = Prototypes::default();
        let f = Array4::from_elem((1, 2, 1, 2), 0.5);
        let l = Array3::from_shape_fn((1, 1, 2), |(_, _, x)| x as u8);
        let out = sdr_loss(
            f.view(),
            l.view(),
            IGNORE,
            &prev,
            &prev,
            0.0,
            SdrWeights::default(),
        )
        .unwrap();
        assert!((out.repulsive - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_has_no_repulsion() {
        let f = Array4::from_elem((1, 2, 1, 2), 0.5);
        let l = Array3::from_elem((1, 1, 2), 0u8);
        let p = Prototypes::default();
        let out = sdr_loss(
            f.view(),
            l.view(),
            IGNORE,
            &p,
            &p,
            0.0,
            SdrWeights::default(),
        )
        .unwrap();
        assert_eq!(out.repulsive, 0.0);
    }

    #[test]
    fn three_classes_match_enumeration() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let units = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [s, 0.0, s]];
        // One cell per class carrying exactly the unit vector.
        let f = Array4::from_shape_fn((1, 3, 1, 3), |(_, c, _, x)| units[x][c]);
        let l = Array3::from_shape_fn((1, 1, 3), |(_, _, x)| x as u8);
        let mut memory = Prototypes::default();
        memory.insert(0, vec![0.0, 1.0, 0.0]);
        memory.insert(1, vec![0.0, 1.0, 0.0]);
        let out = sdr_loss(
            f.view(),
            l.view(),
            IGNORE,
            &Prototypes::default(),
            &memory,
            0.0,
            SdrWeights::default(),
        )
        .unwrap();
        let d =
            |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let m = (d(&units[0], &[0.0, 1.0, 0.0]) + d(&units[1], &[0.0, 1.0, 0.0])) / 2.0;
        let r = (1.0 / (1.0 + d(&units[0], &units[1]))
            + 1.0 / (1.0 + d(&units[0], &units[2]))
            + 1.0 / (1.0 + d(&units[1], &units[2])))
            / 3.0;
        assert!((out.matching - m).abs() < 1e-6);
        assert!((out.repulsive - r).abs() < 1e-6);
        assert!(out.attracting.abs() < 1e-6);
        assert!((out.value - (m + r)).abs() < 1e-6);
    }
}
