//! Full-image prediction with overlapping windows.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::types::{DenseMask, ImageChip};

pub const DEFAULT_WINDOW: usize = 256;
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Windows evaluated per forward call.
const WINDOW_BATCH: usize = 4;

/// Per-pixel softmax over the class axis of `(K, H, W)` logits.
pub fn softmax_planes(logits: &Array3<f32>) -> Array3<f32> {
    let mut out = logits.clone();
    for mut lane in out.lanes_mut(Axis(0)) {
        let max = lane.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

/// Argmax over the class axis; ties resolve to the lowest class id.
pub fn argmax_planes(scores: &Array3<f32>) -> DenseMask {
    let (k, h, w) = scores.dim();
    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            for c in 1..k {
                if scores[[c, y, x]] > scores[[best, y, x]] {
                    best = c;
                }
            }
            mask[[y, x]] = best as u8;
        }
    }
    DenseMask::new(mask)
}

pub fn window_stride(window: usize, overlap_fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Config(format!(
            "overlap fraction {overlap_fraction} outside [0, 1)"
        )));
    }
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    Ok(((window as f64 * (1.0 - overlap_fraction)).round() as usize).max(1))
}

/// Window origins along one axis of length `len >= window`: multiples of the
/// stride, plus a final origin clamped so the last window ends at the edge.
pub fn window_origins(len: usize, window: usize, overlap_fraction: f64) -> Result<Vec<usize>> {
    let stride = window_stride(window, overlap_fraction)?;
    if len < window {
        return Err(Error::InputContract(format!(
            "axis length {len} shorter than window {window}"
        )));
    }
    let last = len - window;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().expect("0 is always an origin") != last {
        origins.push(last);
    }
    Ok(origins)
}

/// How many windows cover each pixel of an `height x width` raster
/// (after padding short axes up to the window).
pub fn coverage_counts(
    height: usize,
    width: usize,
    window: usize,
    overlap_fraction: f64,
) -> Result<Array2<u32>> {
    let (ph, pw) = (height.max(window), width.max(window));
    let rows = window_origins(ph, window, overlap_fraction)?;
    let cols = window_origins(pw, window, overlap_fraction)?;
    let mut counts = Array2::<u32>::zeros((ph, pw));
    for &r in &rows {
        for &c in &cols {
            counts
                .slice_mut(s![r..r + window, c..c + window])
                .mapv_inplace(|v| v + 1);
        }
    }
    Ok(counts.slice(s![..height, ..width]).to_owned())
}

/// Index into `0..n` mirrored at both ends without repeating the edge.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads the bottom/right of `image` up to at least `min_h x min_w`.
pub fn reflect_pad(image: &ImageChip, min_h: usize, min_w: usize) -> ImageChip {
    let (c, h, w) = image.data().dim();
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let src = image.data();
    ImageChip::new(Array3::from_shape_fn((c, ph, pw), |(ch, y, x)| {
        src[[
            ch,
            reflect_index(y as isize, h),
            reflect_index(x as isize, w),
        ]]
    }))
}

fn check_window(model: &SegModel, image: &ImageChip, window: usize) -> Result<()> {
    model.check_input(image.channels(), window, window)
}

/// Softmax probabilities for each `(row, col)` window origin, in input order.
fn window_probs(
    model: &SegModel,
    padded: &ImageChip,
    origins: &[(usize, usize)],
    window: usize,
) -> Result<Vec<Array3<f32>>> {
    let chunks: Vec<Result<Vec<Array3<f32>>>> = origins
        .par_chunks(WINDOW_BATCH)
        .map(|chunk| {
            let c = padded.channels();
            let mut batch = Array4::<f32>::zeros((chunk.len(), c, window, window));
            for (i, &(r, col)) in chunk.iter().enumerate() {
                batch
                    .index_axis_mut(Axis(0), i)
                    .assign(
                        &padded
                            .data()
                            .slice(s![.., r..r + window, col..col + window]),
                    );
            }
            let (out, _) = model.forward_batch(&batch)?;
            Ok(out
                .logits
                .outer_iter()
                .map(|l| softmax_planes(&l.to_owned()))
                .collect())
        })
        .collect();
    let mut all = Vec::with_capacity(origins.len());
    for chunk in chunks {
        all.extend(chunk?);
    }
    Ok(all)
}

#[derive(Debug, Clone)]
pub struct SlidingPrediction {
    /// `(num_classes, H, W)` averaged softmax.
    pub probs: Array3<f32>,
    pub mask: DenseMask,
}

/// Averages per-window softmax outputs over all covering windows.
pub fn predict_sliding(
    model: &SegModel,
    image: &ImageChip,
    window: usize,
    overlap_fraction: f64,
) -> Result<SlidingPrediction> {
    predict_sliding_in_order(model, image, window, overlap_fraction, None)
}

/// `order` permutes the evaluation order of windows; accumulation always
/// runs in origin order so the result does not depend on it.
fn predict_sliding_in_order(
    model: &SegModel,
    image: &ImageChip,
    window: usize,
    overlap_fraction: f64,
    order: Option<&[usize]>,
) -> Result<SlidingPrediction> {
    window_stride(window, overlap_fraction)?;
    check_window(model, image, window)?;
    let (h, w) = (image.height(), image.width());
    let padded = reflect_pad(image, window, window);
    let (ph, pw) = (padded.height(), padded.width());
    let rows = window_origins(ph, window, overlap_fraction)?;
    let cols = window_origins(pw, window, overlap_fraction)?;
    let origins: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();

    let permutation: Vec<usize> = match order {
        Some(o) => o.to_vec(),
        None => (0..origins.len()).collect(),
    };
    let evaluated_origins: Vec<(usize, usize)> = permutation.iter().map(|&i| origins[i]).collect();
    let evaluated = window_probs(model, &padded, &evaluated_origins, window)?;
    let mut by_origin: Vec<Option<Array3<f32>>> = vec![None; origins.len()];
    for (&i, probs) in permutation.iter().zip(evaluated) {
        by_origin[i] = Some(probs);
    }

    let k = model.num_classes();
    let mut acc = Array3::<f32>::zeros((k, ph, pw));
    let mut counts = Array2::<f32>::zeros((ph, pw));
    for (&(r, c), probs) in origins.iter().zip(by_origin) {
        let probs = probs.expect("every window evaluated");
        let mut dst = acc.slice_mut(s![.., r..r + window, c..c + window]);
        dst += &probs;
        counts
            .slice_mut(s![r..r + window, c..c + window])
            .mapv_inplace(|v| v + 1.0);
    }
    let probs = Array3::from_shape_fn((k, h, w), |(ch, y, x)| acc[[ch, y, x]] / counts[[y, x]]);
    let mask = argmax_planes(&probs);
    Ok(SlidingPrediction { probs, mask })
}

/// Non-overlapping tiling (last tile clamped to the edge), argmax per tile.
pub fn predict_fast(model: &SegModel, image: &ImageChip, window: usize) -> Result<DenseMask> {
    check_window(model, image, window)?;
    let (h, w) = (image.height(), image.width());
    let padded = reflect_pad(image, window, window);
    let rows = window_origins(padded.height(), window, 0.0)?;
    let cols = window_origins(padded.width(), window, 0.0)?;
    let origins: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    let probs = window_probs(model, &padded, &origins, window)?;
    let mut mask = Array2::<u8>::zeros((padded.height(), padded.width()));
    for (&(r, c), p) in origins.iter().zip(&probs) {
        let tile = argmax_planes(p);
        mask.slice_mut(s![r..r + window, c..c + window])
            .assign(tile.data());
    }
    Ok(DenseMask::new(mask.slice(s![..h, ..w]).to_owned()))
}
