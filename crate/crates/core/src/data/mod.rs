//! Dataset manifests, raster IO, crop sampling and the synthetic generator.

mod crop;
mod io;
mod manifest;
mod synthetic;

pub use crop::{centered_origin, sample_crop, Crop};
pub use io::{
    decode_image, default_palette, encode_image_png, encode_mask_png, read_image, read_mask,
    write_image, write_mask,
};
pub use manifest::{
    load_manifest, remap_table, DatasetManifest, ManifestEntry, Split, MANIFEST_FORMAT,
};
pub use synthetic::{
    generate_synthetic, synthesize, synthetic_label_space, SyntheticDataset, SyntheticSpec,
    SYNTHETIC_BACKGROUND, SYNTHETIC_CLASSES, SYNTHETIC_NEW_CLASS, SYNTHETIC_OLD_CLASS,
};
