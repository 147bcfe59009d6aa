//! Run-length mask wire format.
//!
//! Each row is a flat list `[value, length, value, length, ...]` whose lengths
//! sum to the mask width. The legend maps class ids to names and colors.
//!
//! ```json
//! {"height": 2, "width": 4,
//!  "legend": [{"id": 0, "name": "background", "color": [255, 255, 255]}],
//!  "rows": [[0, 4], [0, 1, 1, 3]]}
//! ```

use incseg::data::default_palette;
use incseg::model::LabelSpace;
use incseg::DenseMask;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub legend: Vec<LegendEntry>,
    pub rows: Vec<Vec<u32>>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RleError {
    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("row {row} has an odd number of entries")]
    OddRow { row: usize },
    #[error("row {row} covers {covered} pixels, expected {width}")]
    RowLength {
        row: usize,
        covered: u64,
        width: usize,
    },
    #[error("row {row} holds value {value} outside 0..=255")]
    Value { row: usize, value: u32 },
    #[error("row {row} has a zero-length run")]
    EmptyRun { row: usize },
}

/// Legend of a label space with the default display colors.
pub fn legend(space: &LabelSpace) -> Vec<LegendEntry> {
    let palette = default_palette(space.num_classes());
    space
        .ids()
        .map(|id| LegendEntry {
            id,
            name: space.name(id).unwrap_or_default().to_owned(),
            color: palette[usize::from(id)],
        })
        .collect()
}

pub fn encode(mask: &DenseMask, legend: Vec<LegendEntry>) -> RleMask {
    let (height, width) = mask.dim();
    let rows = mask
        .data()
        .rows()
        .into_iter()
        .map(|row| {
            let mut runs: Vec<u32> = Vec::new();
            for &v in row {
                match runs.len() {
                    n if n >= 2 && runs[n - 2] == u32::from(v) => runs[n - 1] += 1,
                    _ => runs.extend([u32::from(v), 1]),
                }
            }
            runs
        })
        .collect();
    RleMask {
        height,
        width,
        legend,
        rows,
    }
}

pub fn decode(rle: &RleMask) -> Result<DenseMask, RleError> {
    if rle.rows.len() != rle.height {
        return Err(RleError::RowCount {
            expected: rle.height,
            found: rle.rows.len(),
        });
    }
    let mut data = Array2::<u8>::zeros((rle.height, rle.width));
    for (r, runs) in rle.rows.iter().enumerate() {
        if runs.len() % 2 != 0 {
            return Err(RleError::OddRow { row: r });
        }
        let covered: u64 = runs.chunks(2).map(|p| u64::from(p[1])).sum();
        if covered != rle.width as u64 {
            return Err(RleError::RowLength {
                row: r,
                covered,
                width: rle.width,
            });
        }
        let mut c = 0;
        for pair in runs.chunks(2) {
            let value = u8::try_from(pair[0]).map_err(|_| RleError::Value {
                row: r,
                value: pair[0],
            })?;
            if pair[1] == 0 {
                return Err(RleError::EmptyRun { row: r });
            }
            for _ in 0..pair[1] {
                data[[r, c]] = value;
                c += 1;
            }
        }
    }
    Ok(DenseMask::new(data))
}
