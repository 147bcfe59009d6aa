//! Raster file IO: 8-bit RGB images and single-channel 8-bit masks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{DenseMask, ImageChip, IGNORE};

fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(())
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageChip> {
    let path = path.as_ref();
    require_exists(path)?;
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageChip::from_interleaved_u8(rgb.as_raw(), 3, h as usize, w as usize)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageChip> {
    let rgb = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageChip::from_interleaved_u8(rgb.as_raw(), 3, h as usize, w as usize)
}

fn rgb_buffer(image: &ImageChip) -> Result<image::RgbImage> {
    if image.channels() != 3 {
        return Err(Error::InputContract(format!(
            "expected a 3-channel image, got {}",
            image.channels()
        )));
    }
    image::RgbImage::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.to_interleaved_u8(),
    )
    .ok_or_else(|| Error::Codec("image buffer size mismatch".into()))
}

pub fn write_image(path: impl AsRef<Path>, image: &ImageChip) -> Result<()> {
    rgb_buffer(image)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn encode_image_png(image: &ImageChip) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    rgb_buffer(image)?.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Reads raw 8-bit values from a grayscale or palette PNG without expanding
/// the palette.
fn read_png_indices(path: &Path) -> Result<DenseMask> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {}
        (ct, bd) => {
            return Err(Error::Codec(format!(
                "{}: mask must be 8-bit grayscale or palette, found {ct:?} {bd:?}",
                path.display()
            )))
        }
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let stride = frame.line_size;
    let data = Array2::from_shape_fn((h, w), |(y, x)| buf[y * stride + x]);
    Ok(DenseMask::new(data))
}

/// Reads a mask of class ids. With a color table, the file is read as RGB and
/// every color must appear in the table; unlisted colors are an error.
pub fn read_mask(
    path: impl AsRef<Path>,
    colors: Option<&HashMap<[u8; 3], u8>>,
) -> Result<DenseMask> {
    let path = path.as_ref();
    require_exists(path)?;
    match colors {
        Some(table) => {
            let rgb = image::open(path)?.to_rgb8();
            let (w, h) = rgb.dimensions();
            let mut data = Array2::from_elem((h as usize, w as usize), IGNORE);
            for (x, y, px) in rgb.enumerate_pixels() {
                let id = table.get(&px.0).ok_or_else(|| {
                    Error::Manifest(format!(
                        "{}: color {:?} at ({y}, {x}) is not in the color table",
                        path.display(),
                        px.0
                    ))
                })?;
                data[[y as usize, x as usize]] = *id;
            }
            Ok(DenseMask::new(data))
        }
        None if is_png(path) => read_png_indices(path),
        None => {
            let img = image::open(path)?;
            match img {
                image::DynamicImage::ImageLuma8(gray) => {
                    let (w, h) = gray.dimensions();
                    Ok(DenseMask::new(
                        Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
                            .expect("buffer matches dimensions"),
                    ))
                }
                other => Err(Error::Codec(format!(
                    "{}: mask must be single-channel 8-bit, found {:?}",
                    path.display(),
                    other.color()
                ))),
            }
        }
    }
}

/// Default display colors indexed by class id.
pub fn default_palette(num_classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 8] = [
        [255, 255, 255],
        [128, 128, 128],
        [200, 40, 40],
        [40, 160, 40],
        [40, 80, 200],
        [220, 180, 30],
        [150, 60, 170],
        [30, 180, 180],
    ];
    (0..num_classes).map(|i| BASE[i % BASE.len()]).collect()
}

/// Writes a palette PNG whose pixel values are the class ids.
pub fn write_mask(path: impl AsRef<Path>, mask: &DenseMask, palette: &[[u8; 3]]) -> Result<()> {
    encode_mask_to(BufWriter::new(File::create(path.as_ref())?), mask, palette)
}

/// Palette PNG bytes of `mask`, as written by [`write_mask`].
pub fn encode_mask_png(mask: &DenseMask, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_mask_to(&mut out, mask, palette)?;
    Ok(out)
}

fn encode_mask_to<W: std::io::Write>(out: W, mask: &DenseMask, palette: &[[u8; 3]]) -> Result<()> {
    let (h, w) = mask.dim();
    let mut encoder = png::Encoder::new(out, w as u32, h as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let mut table = vec![0u8; 256 * 3];
    for (i, rgb) in palette.iter().take(256).enumerate() {
        table[i * 3..i * 3 + 3].copy_from_slice(rgb);
    }
    encoder.set_palette(table);
    let mut writer = encoder.write_header().map_err(codec)?;
    let bytes: Vec<u8> = mask.data().iter().copied().collect();
    writer.write_image_data(&bytes).map_err(codec)?;
    writer.finish().map_err(codec)?;
    Ok(())
}

fn codec(e: png::EncodingError) -> Error {
    Error::Codec(e.to_string())
}
