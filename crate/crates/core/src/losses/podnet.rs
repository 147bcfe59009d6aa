//! Pooled-feature distillation.
//!
//! Per sample and channel, the feature plane is averaged over rows (a
//! width profile) and over columns (a height profile). The loss is the mean
//! over samples and channels of the squared distance between the two
//! networks' concatenated profiles, divided by the profile length `h + w`.

use ndarray::{Array1, Array4, ArrayView2, ArrayView4, Axis};

use super::LossGrad;
use crate::error::{Error, Result};

fn profiles(plane: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let width_profile = plane.mean_axis(Axis(0)).expect("non-empty plane");
    let height_profile = plane.mean_axis(Axis(1)).expect("non-empty plane");
    (width_profile, height_profile)
}

pub fn podnet_loss(updated: ArrayView4<'_, f64>, memory: ArrayView4<'_, f64>) -> Result<LossGrad> {
    if updated.dim() != memory.dim() {
        return Err(Error::InputContract(format!(
            "feature shapes differ: {:?} vs {:?}",
            updated.dim(),
            memory.dim()
        )));
    }
    let (bn, c, h, w) = updated.dim();
    if bn * c * h * w == 0 {
        return Err(Error::InputContract("empty feature map".into()));
    }
    let norm = 1.0 / (bn * c) as f64 / (h + w) as f64;
    let mut grad = Array4::zeros(updated.raw_dim());
    let mut total = 0.0;
    for b in 0..bn {
        for ch in 0..c {
            let (uw, uh) = profiles(updated.index_axis(Axis(0), b).index_axis(Axis(0), ch));
            let (mw, mh) = profiles(memory.index_axis(Axis(0), b).index_axis(Axis(0), ch));
            let dw = &uw - &mw;
            let dh = &uh - &mh;
            total += dw.dot(&dw) + dh.dot(&dh);
            let mut g = grad.index_axis_mut(Axis(0), b);
            let mut g = g.index_axis_mut(Axis(0), ch);
            for y in 0..h {
                for x in 0..w {
                    g[[y, x]] = 2.0 * norm * (dw[x] / h as f64 + dh[y] / w as f64);
                }
            }
        }
    }
    Ok(LossGrad {
        value: total * norm,
        grad,
    })
}
