//! Raster containers shared by every stage of the pipeline.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Default "no label" value for masks.
pub const IGNORE: u8 = 255;

/// A channels-first raster with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageChip {
    data: Array3<f32>,
}

impl ImageChip {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(Array3::zeros((channels, height, width)))
    }

    /// Builds a chip from interleaved 8-bit RGB(ish) bytes.
    pub fn from_interleaved_u8(
        bytes: &[u8],
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if bytes.len() != channels * height * width {
            return Err(Error::InputContract(format!(
                "expected {} bytes for {channels}x{height}x{width}, got {}",
                channels * height * width,
                bytes.len()
            )));
        }
        let data = Array3::from_shape_fn((channels, height, width), |(c, y, x)| {
            f32::from(bytes[(y * width + x) * channels + c]) / 255.0
        });
        Ok(Self { data })
    }

    /// Interleaved 8-bit bytes, clamped and rounded.
    pub fn to_interleaved_u8(&self) -> Vec<u8> {
        let (c, h, w) = self.data.dim();
        let mut out = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = (self.data[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round();
                    out.push(v as u8);
                }
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        check_crop(self.height(), self.width(), row, col, height, width)?;
        Ok(Self::new(
            self.data
                .slice(s![.., row..row + height, col..col + width])
                .to_owned(),
        ))
    }
}

/// Per-pixel class ids; `ignore_value` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseMask {
    data: Array2<u8>,
    ignore_value: u8,
}

impl DenseMask {
    pub fn new(data: Array2<u8>) -> Self {
        Self {
            data,
            ignore_value: IGNORE,
        }
    }

    pub fn with_ignore(data: Array2<u8>, ignore_value: u8) -> Self {
        Self { data, ignore_value }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn ignore_value(&self) -> u8 {
        self.ignore_value
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[[row, col]]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[[row, col]] = value;
    }

    pub fn is_labeled(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]] != self.ignore_value
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.data.view()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.data
    }

    pub fn labeled_count(&self) -> usize {
        self.data
            .iter()
            .filter(|&&v| v != self.ignore_value)
            .count()
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&v| v == class_id).count()
    }

    /// Row-major coordinates of every labeled pixel.
    pub fn labeled_pixels(&self) -> Vec<(usize, usize)> {
        self.data
            .indexed_iter()
            .filter(|(_, &v)| v != self.ignore_value)
            .map(|(ix, _)| ix)
            .collect()
    }

    /// Applies a lookup table to every labeled pixel; ignore pixels are kept.
    pub fn remap(&self, table: &[u8; 256]) -> Self {
        let ignore = self.ignore_value;
        Self {
            data: self.data.mapv(|v| {
                if v == ignore {
                    ignore
                } else {
                    table[v as usize]
                }
            }),
            ignore_value: ignore,
        }
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        check_crop(self.height(), self.width(), row, col, height, width)?;
        Ok(Self {
            data: self
                .data
                .slice(s![row..row + height, col..col + width])
                .to_owned(),
            ignore_value: self.ignore_value,
        })
    }
}

/// An image with its dense ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: ImageChip,
    pub mask: DenseMask,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, image: ImageChip, mask: DenseMask) -> Result<Self> {
        if (image.height(), image.width()) != mask.dim() {
            return Err(Error::InputContract(format!(
                "image {}x{} and mask {:?} differ in size",
                image.height(),
                image.width(),
                mask.dim()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

fn check_crop(h: usize, w: usize, row: usize, col: usize, ch: usize, cw: usize) -> Result<()> {
    if row + ch > h || col + cw > w {
        return Err(Error::InputContract(format!(
            "crop {ch}x{cw} at ({row}, {col}) exceeds {h}x{w} raster"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleaved_roundtrip() {
        let bytes: Vec<u8> = (0..2 * 3 * 3).map(|v| (v * 13) as u8).collect();
        let chip = ImageChip::from_interleaved_u8(&bytes, 3, 2, 3).unwrap();
        assert_eq!(chip.to_interleaved_u8(), bytes);
    }

    #[test]
    fn crop_out_of_bounds_is_rejected() {
        let m = DenseMask::filled(4, 4, 0);
        assert!(m.crop(2, 2, 3, 2).is_err());
        assert_eq!(m.crop(1, 1, 3, 3).unwrap().dim(), (3, 3));
    }

    #[test]
    fn remap_preserves_ignore() {
        let mut m = DenseMask::filled(2, 2, 2);
        m.set(0, 0, IGNORE);
        let mut table = [0u8; 256];
        table[2] = 0;
        let r = m.remap(&table);
        assert_eq!(r.get(0, 0), IGNORE);
        assert_eq!(r.get(1, 1), 0);
    }
}
