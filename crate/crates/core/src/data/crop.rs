use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{DenseMask, ImageChip};

const CROP_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub image: ImageChip,
    pub mask: DenseMask,
}

fn has_label(mask: &DenseMask, row: usize, col: usize, size: usize) -> bool {
    let ignore = mask.ignore_value();
    (row..row + size).any(|y| (col..col + size).any(|x| mask.get(y, x) != ignore))
}

/// Top-left corner of a `size` window centred on `(row, col)`, clamped to the raster.
pub fn centered_origin(
    row: usize,
    col: usize,
    size: usize,
    height: usize,
    width: usize,
) -> (usize, usize) {
    let clamp = |c: usize, len: usize| c.saturating_sub(size / 2).min(len - size);
    (clamp(row, height), clamp(col, width))
}

/// A uniformly placed square crop of image and mask. With `require_label`,
/// origins are redrawn until the window holds a labeled pixel of that mask;
/// after the retry budget the window is centred on a random labeled pixel.
pub fn sample_crop<R: Rng>(
    image: &ImageChip,
    mask: &DenseMask,
    size: usize,
    rng: &mut R,
    require_label: Option<&DenseMask>,
) -> Result<Crop> {
    let (h, w) = mask.dim();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::InputContract("image and mask differ in size".into()));
    }
    if size == 0 || size > h || size > w {
        return Err(Error::InputContract(format!(
            "crop {size} does not fit {h}x{w}"
        )));
    }
    if let Some(req) = require_label {
        if req.dim() != (h, w) {
            return Err(Error::InputContract(
                "required-label mask differs in size".into(),
            ));
        }
    }
    let make = |row: usize, col: usize| -> Result<Crop> {
        Ok(Crop {
            row,
            col,
            image: image.crop(row, col, size, size)?,
            mask: mask.crop(row, col, size, size)?,
        })
    };
    for _ in 0..CROP_RETRIES {
        let row = rng.gen_range(0..=h - size);
        let col = rng.gen_range(0..=w - size);
        match require_label {
            Some(req) if !has_label(req, row, col, size) => continue,
            _ => return make(row, col),
        }
    }
    let req = require_label.expect("retries only exhaust with a required mask");
    let labeled = req.labeled_pixels();
    if labeled.is_empty() {
        return Err(Error::Sampling("required mask has no labeled pixel".into()));
    }
    let (r, c) = labeled[rng.gen_range(0..labeled.len())];
    let (row, col) = centered_origin(r, c, size, h, w);
    make(row, col)
}
