//! Dataset manifests: a JSON file listing image/mask pairs by split.
//!
//! ```json
//! {
//!   "format": "INCSEG-MANIFEST-1",
//!   "class_names": ["background", "road", "building"],
//!   "background": "background",
//!   "colors": {"background": [255, 255, 255], "road": [128, 128, 128], "building": [0, 0, 255]},
//!   "entries": [
//!     {"image_id": "a", "image": "images/a.png", "mask": "masks/a.png", "split": "pretrain"}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. `colors` is optional; when
//! present masks are RGB-coded and decoded through it, otherwise mask pixel
//! values are class ids (255 = ignore).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::io::{read_image, read_mask};
use crate::error::{Error, Result};
use crate::model::LabelSpace;
use crate::types::{DenseMask, LabeledImage, IGNORE};

pub const MANIFEST_FORMAT: &str = "INCSEG-MANIFEST-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Incremental,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Incremental => "incremental",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "incremental" => Ok(Split::Incremental),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format: String,
    class_names: Vec<String>,
    background: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    colors: Option<BTreeMap<String, [u8; 3]>>,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub background: String,
    pub colors: Option<BTreeMap<String, [u8; 3]>>,
    pub entries: Vec<ManifestEntry>,
    /// Non-fatal findings from validation.
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.class_names.iter().cloned(), &self.background)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    fn color_table(&self) -> Result<Option<HashMap<[u8; 3], u8>>> {
        let Some(colors) = &self.colors else {
            return Ok(None);
        };
        let mut table = HashMap::new();
        for (name, rgb) in colors {
            let id = self
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| {
                    Error::Manifest(format!("color given for undeclared class {name:?}"))
                })?;
            if table.insert(*rgb, id as u8).is_some() {
                return Err(Error::Manifest(format!("color {rgb:?} assigned twice")));
            }
        }
        Ok(Some(table))
    }

    pub fn load_mask(&self, entry: &ManifestEntry) -> Result<DenseMask> {
        read_mask(self.resolve(&entry.mask), self.color_table()?.as_ref())
    }

    /// Image and mask of one entry, mask in the manifest's class ids.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<LabeledImage> {
        let image_path = self.resolve(&entry.image);
        let mask_path = self.resolve(&entry.mask);
        let image = read_image(&image_path)?;
        let mask = self.load_mask(entry)?;
        if (image.height(), image.width()) != mask.dim() {
            return Err(Error::ShapeMismatch {
                image: image_path,
                mask: mask_path,
                detail: format!(
                    "image {}x{} vs mask {}x{}",
                    image.height(),
                    image.width(),
                    mask.height(),
                    mask.width()
                ),
            });
        }
        LabeledImage::new(entry.image_id.clone(), image, mask)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledImage>> {
        self.entries(split).map(|e| self.load_entry(e)).collect()
    }

    /// Loads a split with masks translated into `target` by class name.
    pub fn load_split_in(&self, split: Split, target: &LabelSpace) -> Result<Vec<LabeledImage>> {
        let table = remap_table(&self.label_space()?, target);
        Ok(self
            .load_split(split)?
            .into_iter()
            .map(|mut li| {
                li.mask = li.mask.remap(&table);
                li
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ManifestFile {
            format: MANIFEST_FORMAT.to_owned(),
            class_names: self.class_names.clone(),
            background: self.background.clone(),
            colors: self.colors.clone(),
            entries: self.entries.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
        Ok(())
    }
}

/// Maps ids of `from` to ids of `to` by class name; classes missing from `to`
/// become its background. 255 stays ignore.
pub fn remap_table(from: &LabelSpace, to: &LabelSpace) -> [u8; 256] {
    let mut table = [to.background_id(); 256];
    table[usize::from(IGNORE)] = IGNORE;
    for id in from.ids() {
        let name = from.name(id).expect("id in range");
        table[usize::from(id)] = to.id_of(name).unwrap_or(to.background_id());
    }
    table
}

/// Parses and fully validates a manifest, reading every referenced file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if file.format != MANIFEST_FORMAT {
        return Err(Error::Manifest(format!(
            "unsupported format {:?}, expected {MANIFEST_FORMAT:?}",
            file.format
        )));
    }
    let manifest = DatasetManifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        class_names: file.class_names,
        background: file.background,
        colors: file.colors,
        entries: file.entries,
        warnings: Vec::new(),
    };
    validate(manifest)
}

fn validate(mut manifest: DatasetManifest) -> Result<DatasetManifest> {
    let space = manifest
        .label_space()
        .map_err(|e| Error::Manifest(e.to_string()))?;
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.image_id.as_str()) {
            return Err(Error::Manifest(format!(
                "image id {:?} listed more than once",
                e.image_id
            )));
        }
    }
    let colors = manifest.color_table()?;
    for e in &manifest.entries {
        let image_path = manifest.resolve(&e.image);
        let mask_path = manifest.resolve(&e.mask);
        for p in [&image_path, &mask_path] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        let (iw, ih) = image::image_dimensions(&image_path)?;
        let mask = read_mask(&mask_path, colors.as_ref())?;
        if (ih as usize, iw as usize) != mask.dim() {
            return Err(Error::ShapeMismatch {
                image: image_path,
                mask: mask_path,
                detail: format!("image {ih}x{iw} vs mask {}x{}", mask.height(), mask.width()),
            });
        }
        if let Some(&bad) = mask
            .data()
            .iter()
            .find(|&&v| v != IGNORE && usize::from(v) >= space.num_classes())
        {
            return Err(Error::UndeclaredClass {
                file: mask_path,
                class_id: bad,
            });
        }
    }
    for split in [Split::Pretrain, Split::Incremental] {
        if manifest.entries(split).next().is_none() {
            let msg = format!("{split} split is empty");
            log::warn!("{msg}");
            manifest.warnings.push(msg);
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::{default_palette, write_image, write_mask};
    use crate::types::ImageChip;
    use ndarray::Array2;

    fn write_pair(dir: &Path, id: &str, max_class: u8, mask_w: usize) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::create_dir_all(dir.join("masks")).unwrap();
        write_image(
            dir.join(format!("images/{id}.png")),
            &ImageChip::zeros(3, 4, 4),
        )
        .unwrap();
        let m = DenseMask::new(Array2::from_shape_fn((4, mask_w), |(y, _)| {
            (y as u8).min(max_class)
        }));
        write_mask(dir.join(format!("masks/{id}.png")), &m, &default_palette(8)).unwrap();
    }

    fn manifest_json(entries: &[(&str, &str)]) -> String {
        let entries: Vec<String> = entries
            .iter()
            .map(|(id, split)| {
                format!(
                    r#"{{"image_id":"{id}","image":"images/{id}.png","mask":"masks/{id}.png","split":"{split}"}}"#
                )
            })
            .collect();
        format!(
            r#"{{"format":"INCSEG-MANIFEST-1","class_names":["background","road","building"],"background":"background","entries":[{}]}}"#,
            entries.join(",")
        )
    }

    #[test]
    fn valid_manifest_loads_with_splits() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 2, 4);
        write_pair(dir.path(), "b", 2, 4);
        let path = dir.path().join("manifest.json");
        std::fs::write(
            &path,
            manifest_json(&[("a", "pretrain"), ("b", "incremental")]),
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries(Split::Pretrain).count(), 1);
        assert_eq!(m.entries(Split::Incremental).next().unwrap().image_id, "b");
        assert!(m.warnings.is_empty());
        let loaded = m.load_split(Split::Incremental).unwrap();
        assert_eq!(loaded[0].mask.get(3, 0), 2);
    }

    #[test]
    fn undeclared_class_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 7, 4);
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, manifest_json(&[("a", "pretrain")])).unwrap();
        match load_manifest(&path) {
            Err(Error::UndeclaredClass { file, class_id }) => {
                assert!(file.ends_with("masks/a.png"));
                assert_eq!(class_id, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_incremental_split_warns() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 2, 4);
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, manifest_json(&[("a", "pretrain")])).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.warnings, vec!["incremental split is empty".to_owned()]);
    }

    #[test]
    fn shape_mismatch_and_missing_files_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 2, 5);
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, manifest_json(&[("a", "pretrain")])).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::ShapeMismatch { .. })
        ));
        std::fs::write(&path, manifest_json(&[("zzz", "pretrain")])).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::MissingFile(_))));
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(
            &path,
            manifest_json(&[]).replace("INCSEG-MANIFEST-1", "OTHER-2"),
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn remap_by_name_collapses_missing_classes() {
        let full = LabelSpace::new(["background", "building", "road"], "background").unwrap();
        let old = LabelSpace::new(["background", "road"], "background").unwrap();
        let t = remap_table(&full, &old);
        assert_eq!((t[0], t[1], t[2], t[255]), (0, 0, 1, 255));
        let expanded = old.with_new_class("building").unwrap();
        let t = remap_table(&full, &expanded);
        assert_eq!((t[0], t[1], t[2]), (0, 2, 1));
    }
}
