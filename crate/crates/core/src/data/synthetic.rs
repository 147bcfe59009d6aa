//! Procedural aerial-like tiles: textured ground, road strips and buildings.
//!
//! Classes are `background` (0), `road` (1) and `building` (2). Images are
//! quantized to 8 bits so an in-memory dataset equals its files on disk.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::io::{default_palette, write_image, write_mask};
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::model::LabelSpace;
use crate::types::{DenseMask, ImageChip, LabeledImage};

pub const SYNTHETIC_CLASSES: [&str; 3] = ["background", "road", "building"];
pub const SYNTHETIC_BACKGROUND: &str = "background";
pub const SYNTHETIC_OLD_CLASS: &str = "road";
pub const SYNTHETIC_NEW_CLASS: &str = "building";

const ROAD: u8 = 1;
const BUILDING: u8 = 2;
const MAX_ATTEMPTS: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub n_pretrain: usize,
    pub n_incremental: usize,
    /// Expected road strips per 256×256 area.
    pub line_density: f64,
    /// Expected buildings per 256×256 area.
    pub rect_density: f64,
    /// Standard deviation of per-pixel noise, in `[0, 1]` intensity units.
    pub noise: f64,
    /// Minimum building pixels in every incremental image.
    pub min_new_class_pixels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            n_pretrain: 20,
            n_incremental: 6,
            line_density: 3.0,
            rect_density: 6.0,
            noise: 0.06,
            min_new_class_pixels: 300,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Specification(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} is below 32", self.image_size));
        }
        if !(self.line_density.is_finite() && self.line_density >= 0.0) {
            return bad("line_density must be a nonnegative number".into());
        }
        if !(self.rect_density.is_finite() && self.rect_density >= 0.0) {
            return bad("rect_density must be a nonnegative number".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]".into());
        }
        if self.rect_density == 0.0 && self.min_new_class_pixels > 0 && self.n_incremental > 0 {
            return bad(format!(
                "rect_density 0 cannot supply {} building pixels per incremental image",
                self.min_new_class_pixels
            ));
        }
        let half = self.image_size * self.image_size / 2;
        if self.min_new_class_pixels > half {
            return bad(format!(
                "min_new_class_pixels {} exceeds half the image area",
                self.min_new_class_pixels
            ));
        }
        Ok(())
    }
}

pub fn synthetic_label_space() -> LabelSpace {
    LabelSpace::new(SYNTHETIC_CLASSES, SYNTHETIC_BACKGROUND).expect("static label space is valid")
}

/// Images with dense masks in the three-class space.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub pretrain: Vec<LabeledImage>,
    pub incremental: Vec<LabeledImage>,
}

/// Generates the dataset in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let pretrain = (0..spec.n_pretrain)
        .map(|i| render_tile(spec, Split::Pretrain, i, 0))
        .collect::<Result<_>>()?;
    let incremental = (0..spec.n_incremental)
        .map(|i| render_tile(spec, Split::Incremental, i, spec.min_new_class_pixels))
        .collect::<Result<_>>()?;
    Ok(SyntheticDataset {
        pretrain,
        incremental,
    })
}

/// Writes the dataset as PNG files plus `manifest.json` under `out_dir`.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let data = synthesize(spec)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let palette = default_palette(SYNTHETIC_CLASSES.len());
    let mut entries = Vec::new();
    for (split, items) in [
        (Split::Pretrain, &data.pretrain),
        (Split::Incremental, &data.incremental),
    ] {
        for li in items {
            let image = Path::new("images").join(format!("{}.png", li.id));
            let mask = Path::new("masks").join(format!("{}.png", li.id));
            write_image(out_dir.join(&image), &li.image)?;
            write_mask(out_dir.join(&mask), &li.mask, &palette)?;
            entries.push(ManifestEntry {
                image_id: li.id.clone(),
                image,
                mask,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        class_names: SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
        background: SYNTHETIC_BACKGROUND.to_owned(),
        colors: None,
        entries,
        warnings: Vec::new(),
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn tile_seed(seed: u64, split: Split, index: usize, attempt: u64) -> u64 {
    let split_tag: u64 = match split {
        Split::Pretrain => 1,
        Split::Incremental => 2,
    };
    let mut z = seed
        ^ split_tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ attempt.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

fn render_tile(
    spec: &SyntheticSpec,
    split: Split,
    index: usize,
    min_building: usize,
) -> Result<LabeledImage> {
    let id = format!("{split}_{index:03}");
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(tile_seed(spec.seed, split, index, attempt));
        let (image, mask) = render(spec, &mut rng);
        if mask.count(BUILDING) >= min_building {
            return LabeledImage::new(id, image, mask);
        }
    }
    Err(Error::Specification(format!(
        "{id}: no layout with {min_building} building pixels after {MAX_ATTEMPTS} attempts"
    )))
}

struct Canvas {
    rgb: Array3<f64>,
    labels: Array2<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, color: [f64; 3], alpha: f64) {
        for (c, v) in color.iter().enumerate() {
            let dst = &mut self.rgb[[c, y, x]];
            *dst = *dst * (1.0 - alpha) + v * alpha;
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    let shift = rng.gen_range(-amount..amount);
    base.map(|v| (v + shift + rng.gen_range(-amount..amount) * 0.5).clamp(0.0, 1.0))
}

fn render<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> (ImageChip, DenseMask) {
    let n = spec.image_size;
    let area_scale = (n * n) as f64 / (256.0 * 256.0);
    let ground = jitter(rng, [0.38, 0.46, 0.30], 0.05);
    let mut canvas = Canvas {
        rgb: Array3::from_shape_fn((3, n, n), |(c, _, _)| ground[c]),
        labels: Array2::zeros((n, n)),
    };

    // Low-frequency ground variation and dark vegetation patches.
    let blobs = 4 + rng.gen_range(0..4);
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..n as f64);
        let cx = rng.gen_range(0.0..n as f64);
        let r = rng.gen_range(0.08..0.3) * n as f64;
        let tone = rng.gen_range(-0.08..0.08);
        for y in 0..n {
            for x in 0..n {
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (r * r);
                let a = (-d2).exp();
                for c in 0..3 {
                    canvas.rgb[[c, y, x]] += tone * a;
                }
            }
        }
    }
    let trees = Poisson::new(12.0 * area_scale).map_or(0, |p| p.sample(rng) as usize);
    for _ in 0..trees {
        let cy = rng.gen_range(0.0..n as f64);
        let cx = rng.gen_range(0.0..n as f64);
        let r = rng.gen_range(3.0..9.0);
        let color = jitter(rng, [0.18, 0.30, 0.14], 0.03);
        fill_disc(&mut canvas, cy, cx, r, color);
    }

    // Roads: strips crossing the tile between two border points.
    let n_roads = if spec.line_density > 0.0 {
        Poisson::new(spec.line_density * area_scale).map_or(0, |p| p.sample(rng) as usize)
    } else {
        0
    };
    let road_color = jitter(rng, [0.56, 0.55, 0.53], 0.04);
    for _ in 0..n_roads {
        let (y0, x0) = border_point(rng, n);
        let (y1, x1) = border_point(rng, n);
        if ((y1 - y0).powi(2) + (x1 - x0).powi(2)).sqrt() < n as f64 * 0.3 {
            continue;
        }
        let half_width = rng.gen_range(4.0..8.0);
        draw_strip(&mut canvas, (y0, x0), (y1, x1), half_width, road_color);
    }

    // Buildings: rotated rectangles that avoid roads and each other.
    let n_rects = if spec.rect_density > 0.0 {
        Poisson::new(spec.rect_density * area_scale).map_or(0, |p| p.sample(rng) as usize)
    } else {
        0
    };
    let mut placed = 0;
    let mut tries = 0;
    while placed < n_rects && tries < 40 * n_rects.max(1) {
        tries += 1;
        let rect = Rect {
            cy: rng.gen_range(0.0..n as f64),
            cx: rng.gen_range(0.0..n as f64),
            half_h: rng.gen_range(8.0..24.0),
            half_w: rng.gen_range(8.0..24.0),
            angle: if rng.gen_bool(0.5) {
                0.0
            } else {
                rng.gen_range(0.0..PI / 2.0)
            },
        };
        if rect.overlaps_labels(&canvas.labels, 3.0) {
            continue;
        }
        let roof = jitter(rng, [0.68, 0.34, 0.26], 0.06);
        rect.draw(&mut canvas, roof);
        placed += 1;
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("finite noise");
        canvas.rgb.mapv_inplace(|v| v + normal.sample(rng));
    }
    let quantized = canvas
        .rgb
        .mapv(|v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
    (ImageChip::new(quantized), DenseMask::new(canvas.labels))
}

fn border_point<R: Rng>(rng: &mut R, n: usize) -> (f64, f64) {
    let t = rng.gen_range(0.0..n as f64);
    let last = n as f64 - 1.0;
    match rng.gen_range(0..4) {
        0 => (0.0, t),
        1 => (last, t),
        2 => (t, 0.0),
        _ => (t, last),
    }
}

fn fill_disc(canvas: &mut Canvas, cy: f64, cx: f64, r: f64, color: [f64; 3]) {
    let (h, w) = canvas.labels.dim();
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(h);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let alpha = (r - d + 0.5).clamp(0.0, 1.0);
            if alpha > 0.0 {
                canvas.paint(y, x, color, alpha);
            }
        }
    }
}

/// Anti-aliased strip along the segment; pixels at least half covered are road.
fn draw_strip(canvas: &mut Canvas, a: (f64, f64), b: (f64, f64), half_width: f64, color: [f64; 3]) {
    let (h, w) = canvas.labels.dim();
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len = (dy * dy + dx * dx).sqrt();
    let (ny, nx) = (-dx / len, dy / len);
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - a.0) * ny + (x as f64 - a.1) * nx).abs();
            let alpha = (half_width - d + 0.5).clamp(0.0, 1.0);
            if alpha > 0.0 {
                canvas.paint(y, x, color, alpha);
                if alpha >= 0.5 {
                    canvas.labels[[y, x]] = ROAD;
                }
            }
        }
    }
}

struct Rect {
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    angle: f64,
}

impl Rect {
    /// Signed distance-like measure: negative inside, in pixels.
    fn distance(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (py, px) = (y - self.cy, x - self.cx);
        let u = px * c + py * s;
        let v = -px * s + py * c;
        ((u.abs() - self.half_w).max(v.abs() - self.half_h), v)
    }

    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let r = (self.half_h.powi(2) + self.half_w.powi(2)).sqrt() + 2.0;
        let y0 = (self.cy - r).floor().max(0.0) as usize;
        let y1 = ((self.cy + r).ceil().max(0.0) as usize).min(h);
        let x0 = (self.cx - r).floor().max(0.0) as usize;
        let x1 = ((self.cx + r).ceil().max(0.0) as usize).min(w);
        (y0, y1, x0, x1)
    }

    fn overlaps_labels(&self, labels: &Array2<u8>, margin: f64) -> bool {
        let (h, w) = labels.dim();
        let (y0, y1, x0, x1) = self.bounds(h, w);
        (y0..y1).any(|y| {
            (x0..x1).any(|x| labels[[y, x]] != 0 && self.distance(y as f64, x as f64).0 < margin)
        })
    }

    fn draw(&self, canvas: &mut Canvas, roof: [f64; 3]) {
        let (h, w) = canvas.labels.dim();
        let (y0, y1, x0, x1) = self.bounds(h, w);
        let shade = roof.map(|v| v * 0.82);
        for y in y0..y1 {
            for x in x0..x1 {
                let (d, v) = self.distance(y as f64, x as f64);
                let alpha = (0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    canvas.paint(y, x, if v < 0.0 { roof } else { shade }, alpha);
                    if alpha >= 0.5 {
                        canvas.labels[[y, x]] = BUILDING;
                    }
                }
            }
        }
    }
}
