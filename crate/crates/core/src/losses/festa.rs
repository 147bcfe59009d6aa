//! Neighbourhood consistency on labeled feature cells.
//!
//! Spatial term: mean over labeled cells of the squared distance between the
//! cell's feature and the mean of its in-bounds 4-neighbours. Feature term:
//! mean over labeled cells of the squared distance to the nearest other
//! labeled cell of the same image in feature space. Cells without a
//! neighbour of the required kind are skipped for that term. Only label
//! positions matter, never label values.

use ndarray::{Array4, ArrayView3, ArrayView4};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FestaOutput {
    pub spatial: f64,
    pub feature: f64,
    /// `spatial + feature`
    pub value: f64,
    pub grad: Array4<f64>,
}

pub fn festa_loss(
    features: ArrayView4<'_, f64>,
    labels: ArrayView3<'_, u8>,
    ignore: u8,
) -> Result<FestaOutput> {
    let (bn, c, h, w) = features.dim();
    if labels.dim() != (bn, h, w) {
        return Err(Error::InputContract(format!(
            "labels {:?} do not match features {:?}",
            labels.dim(),
            features.dim()
        )));
    }
    let mut grad = Array4::zeros(features.raw_dim());
    let labeled: Vec<(usize, usize, usize)> = labels
        .indexed_iter()
        .filter(|(_, &l)| l != ignore)
        .map(|(ix, _)| ix)
        .collect();

    // Spatial.
    let spatial_cells: Vec<_> = labeled
        .iter()
        .map(|&(b, y, x)| {
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push((y - 1, x));
            }
            if y + 1 < h {
                nb.push((y + 1, x));
            }
            if x > 0 {
                nb.push((y, x - 1));
            }
            if x + 1 < w {
                nb.push((y, x + 1));
            }
            ((b, y, x), nb)
        })
        .filter(|(_, nb)| !nb.is_empty())
        .collect();
    let mut spatial = 0.0;
    if !spatial_cells.is_empty() {
        let scale = 1.0 / spatial_cells.len() as f64;
        for ((b, y, x), nb) in &spatial_cells {
            let inv = 1.0 / nb.len() as f64;
            for ch in 0..c {
                let mean: f64 = nb
                    .iter()
                    .map(|&(ny, nx)| features[[*b, ch, ny, nx]])
                    .sum::<f64>()
                    * inv;
                let d = features[[*b, ch, *y, *x]] - mean;
                spatial += scale * d * d;
                grad[[*b, ch, *y, *x]] += scale * 2.0 * d;
                for &(ny, nx) in nb {
                    grad[[*b, ch, ny, nx]] -= scale * 2.0 * d * inv;
                }
            }
        }
    }

    // Feature-space nearest labeled neighbour, within each image.
    let mut pairs = Vec::new();
    for &(b, y, x) in &labeled {
        let mut best: Option<((usize, usize), f64)> = None;
        for &(b2, y2, x2) in &labeled {
            if b2 != b || (y2, x2) == (y, x) {
                continue;
            }
            let d2: f64 = (0..c)
                .map(|ch| (features[[b, ch, y, x]] - features[[b, ch, y2, x2]]).powi(2))
                .sum();
            if best.is_none_or(|(_, bd)| d2 < bd) {
                best = Some(((y2, x2), d2));
            }
        }
        if let Some((other, d2)) = best {
            pairs.push(((b, y, x), other, d2));
        }
    }
    let mut feature = 0.0;
    if !pairs.is_empty() {
        let scale = 1.0 / pairs.len() as f64;
        for ((b, y, x), (y2, x2), d2) in pairs {
            feature += scale * d2;
            for ch in 0..c {
                let diff = features[[b, ch, y, x]] - features[[b, ch, y2, x2]];
                grad[[b, ch, y, x]] += scale * 2.0 * diff;
                grad[[b, ch, y2, x2]] -= scale * 2.0 * diff;
            }
        }
    }

    Ok(FestaOutput {
        spatial,
        feature,
        value: spatial + feature,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IGNORE;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_is_zero() {
        let f = Array4::from_elem((1, 3, 4, 4), 0.37);
        let l = Array3::from_shape_fn(
            (1, 4, 4),
            |(_, y, x)| if (y + x) % 3 == 0 { 1 } else { IGNORE },
        );
        assert_eq!(festa_loss(f.view(), l.view(), IGNORE).unwrap().value, 0.0);
    }

    #[test]
    fn strip_center_matches_hand_computation() {
        let v = [0.5, -1.0];
        let w = [2.0, 1.0];
        let f = Array4::from_shape_fn(
            (1, 2, 1, 3),
            |(_, c, _, x)| if x == 2 { w[c] } else { v[c] },
        );
        let l = Array3::from_shape_fn((1, 1, 3), |(_, _, x)| if x == 1 { 4 } else { IGNORE });
        let out = festa_loss(f.view(), l.view(), IGNORE).unwrap();
        let expected: f64 = (0..2).map(|c| (v[c] - (v[c] + w[c]) / 2.0).powi(2)).sum();
        assert!((out.spatial - expected).abs() < 1e-15);
        assert_eq!(out.feature, 0.0);
    }

    #[test]
    fn invariant_to_label_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let l = Array3::from_shape_fn((2, 4, 4), |_| {
            if rng.gen_bool(0.4) {
                rng.gen_range(0..3)
            } else {
                IGNORE
            }
        });
        let relabeled = l.mapv(|v| if v == IGNORE { v } else { 7 - v });
        let a = festa_loss(f.view(), l.view(), IGNORE).unwrap();
        let b = festa_loss(f.view(), relabeled.view(), IGNORE).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn isolated_single_cell_has_no_terms() {
        let f = Array4::from_elem((1, 2, 1, 1), 1.0);
        let l = Array3::from_elem((1, 1, 1), 0u8);
        let out = festa_loss(f.view(), l.view(), IGNORE).unwrap();
        assert_eq!(out.value, 0.0);
    }
}
