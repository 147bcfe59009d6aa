//! Cross-entropy on annotated pixels, and its output-distillation variant
//! driven by the memory network's argmax.

use ndarray::{Array4, ArrayView3, ArrayView4};

use super::LossGrad;
use crate::error::{Error, Result};

/// Adds the CE gradient of one pixel (scaled by `scale`) and returns its loss.
fn pixel_ce(
    logits: &ArrayView4<'_, f64>,
    grad: &mut Array4<f64>,
    (b, y, x): (usize, usize, usize),
    target: usize,
    scale: f64,
) -> f64 {
    let k = logits.dim().1;
    let max = (0..k)
        .map(|c| logits[[b, c, y, x]])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..k).map(|c| (logits[[b, c, y, x]] - max).exp()).sum();
    let lse = max + sum.ln();
    for c in 0..k {
        let p = (logits[[b, c, y, x]] - lse).exp();
        let indicator = if c == target { 1.0 } else { 0.0 };
        grad[[b, c, y, x]] += scale * (p - indicator);
    }
    lse - logits[[b, target, y, x]]
}

/// Mean negative log-softmax of the target class over non-ignore pixels.
///
/// `logits` is `(B, K, H, W)`, `targets` is `(B, H, W)`.
pub fn sparse_ce(
    logits: ArrayView4<'_, f64>,
    targets: ArrayView3<'_, u8>,
    ignore: u8,
) -> Result<LossGrad> {
    let (bn, k, h, w) = logits.dim();
    if targets.dim() != (bn, h, w) {
        return Err(Error::InputContract(format!(
            "targets {:?} do not match logits {:?}",
            targets.dim(),
            logits.dim()
        )));
    }
    let labeled: Vec<((usize, usize, usize), usize)> = targets
        .indexed_iter()
        .filter(|(_, &t)| t != ignore)
        .map(|(ix, &t)| (ix, usize::from(t)))
        .collect();
    if labeled.is_empty() {
        return Err(Error::Degenerate(
            "cross-entropy target has no labeled pixel".into(),
        ));
    }
    if let Some((_, t)) = labeled.iter().find(|(_, t)| *t >= k) {
        return Err(Error::InputContract(format!(
            "target class {t} outside {k} logits"
        )));
    }
    let scale = 1.0 / labeled.len() as f64;
    let mut grad = Array4::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (ix, t) in labeled {
        total += pixel_ce(&logits, &mut grad, ix, t, scale);
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
    })
}

/// Argmax over the class axis with ties to the lowest index.
pub(crate) fn argmax_at(logits: &ArrayView4<'_, f64>, b: usize, y: usize, x: usize) -> usize {
    let k = logits.dim().1;
    let mut best = 0;
    for c in 1..k {
        if logits[[b, c, y, x]] > logits[[b, best, y, x]] {
            best = c;
        }
    }
    best
}

/// Cross-entropy of the updated logits against the memory argmax, restricted
/// to pixels whose memory argmax is an old class of interest. Zero when no
/// pixel qualifies.
pub fn disca_loss(
    updated_logits: ArrayView4<'_, f64>,
    memory_logits: ArrayView4<'_, f64>,
    old_classes_of_interest: &[u8],
) -> Result<LossGrad> {
    let (bn, k, h, w) = updated_logits.dim();
    let (mb, mk, mh, mw) = memory_logits.dim();
    if (mb, mh, mw) != (bn, h, w) || mk > k {
        return Err(Error::InputContract(format!(
            "memory logits {:?} incompatible with updated logits {:?}",
            memory_logits.dim(),
            updated_logits.dim()
        )));
    }
    let mut restricted = Vec::new();
    for b in 0..bn {
        for y in 0..h {
            for x in 0..w {
                let a = argmax_at(&memory_logits, b, y, x);
                if old_classes_of_interest.contains(&(a as u8)) {
                    restricted.push(((b, y, x), a));
                }
            }
        }
    }
    let mut grad = Array4::zeros(updated_logits.raw_dim());
    if restricted.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let scale = 1.0 / restricted.len() as f64;
    let mut total = 0.0;
    for (ix, t) in restricted {
        total += pixel_ce(&updated_logits, &mut grad, ix, t, scale);
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
    })
}
