//! Disease-specific anatomical prior maps built from box annotations.
//!
//! For class `c` every annotated box is rasterized to a binary mask, the
//! masks are summed into a raw count map, and the count map is divided by its
//! maximum. Classes without boxes get an all-ones map, which makes the
//! attention module an identity for them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BBoxAnnotation, ClassList};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    pub class_id: usize,
    /// Normalized map in [0, 1].
    pub map: Array2<f64>,
    /// Per-pixel box counts.
    pub raw: Array2<u32>,
    /// Number of binary masks that were summed.
    pub n_images: usize,
}

impl PriorMap {
    pub fn raw_max(&self) -> u32 {
        self.raw.iter().copied().max().unwrap_or(0)
    }

    pub fn is_uniform(&self) -> bool {
        self.map.iter().all(|&v| v == 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorMapSet {
    pub classes: ClassList,
    pub resolution: (usize, usize),
    pub maps: Vec<PriorMap>,
}

/// Binary image that is 1 on `[x, x+w) x [y, y+h)`.
pub fn rasterize_bbox(ann: &BBoxAnnotation, canvas_hw: (usize, usize)) -> Result<Array2<u8>> {
    let (x0, y0, x1, y1) = checked_span(ann, canvas_hw)?;
    let mut m = Array2::zeros(canvas_hw);
    m.slice_mut(s![y0..y1, x0..x1]).fill(1);
    Ok(m)
}

fn checked_span(ann: &BBoxAnnotation, (h, w): (usize, usize)) -> Result<(usize, usize, usize, usize)> {
    let span = ann.pixel_span();
    let (_, _, x1, y1) = span;
    if x1 > w || y1 > h {
        return Err(Error::Invalid(format!(
            "box ({}, {}, {}, {}) on {} exceeds the {h}x{w} canvas",
            ann.x, ann.y, ann.w, ann.h, ann.image_id
        )));
    }
    Ok(span)
}

/// Elementwise sum of binary masks.
pub fn accumulate_raw_map<'a>(
    canvas_hw: (usize, usize),
    masks: impl IntoIterator<Item = &'a Array2<u8>>,
) -> Result<Array2<u32>> {
    let mut raw = Array2::<u32>::zeros(canvas_hw);
    for m in masks {
        if m.dim() != canvas_hw {
            return Err(Error::Shape(format!("mask {:?} on canvas {canvas_hw:?}", m.dim())));
        }
        raw.zip_mut_with(m, |r, &v| *r += v as u32);
    }
    Ok(raw)
}

/// Divides by the maximum; an all-zero raw map yields the all-ones fallback.
pub fn normalize_map(raw: &Array2<u32>) -> Array2<f64> {
    let max = raw.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Array2::ones(raw.raw_dim());
    }
    let m = max as f64;
    raw.mapv(|v| v as f64 / m)
}

pub fn build_prior_set(
    annotations: &[BBoxAnnotation],
    classes: &ClassList,
    canvas_hw: (usize, usize),
) -> Result<PriorMapSet> {
    let mut raws = vec![Array2::<u32>::zeros(canvas_hw); classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for ann in annotations {
        if ann.class_id >= classes.len() {
            return Err(Error::Invalid(format!("class id {} out of range", ann.class_id)));
        }
        let (x0, y0, x1, y1) = checked_span(ann, canvas_hw)?;
        raws[ann.class_id]
            .slice_mut(s![y0..y1, x0..x1])
            .mapv_inplace(|v| v + 1);
        counts[ann.class_id] += 1;
    }
    let maps = raws
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(class_id, (raw, n_images))| PriorMap {
            class_id,
            map: normalize_map(&raw),
            raw,
            n_images,
        })
        .collect();
    Ok(PriorMapSet {
        classes: classes.clone(),
        resolution: canvas_hw,
        maps,
    })
}

impl PriorMapSet {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Re-indexes the set onto `target` classes. A target class takes the map
    /// of `mapping[target]` when given, else the map with the same name, else
    /// the all-ones fallback.
    pub fn align_to(&self, target: &ClassList, mapping: Option<&HashMap<String, String>>) -> PriorMapSet {
        let maps = target
            .names()
            .iter()
            .enumerate()
            .map(|(class_id, name)| {
                let source = mapping.and_then(|m| m.get(name)).unwrap_or(name);
                match self.classes.names().iter().position(|n| n == source) {
                    Some(i) => PriorMap {
                        class_id,
                        ..self.maps[i].clone()
                    },
                    None => {
                        log::warn!("no prior map for class {name}; using the all-ones fallback");
                        PriorMap {
                            class_id,
                            map: Array2::ones(self.resolution),
                            raw: Array2::zeros(self.resolution),
                            n_images: 0,
                        }
                    }
                }
            })
            .collect();
        PriorMapSet {
            classes: target.clone(),
            resolution: self.resolution,
            maps,
        }
    }
}

/// Reads a `target,source` class-name mapping (header optional).
pub fn load_class_mapping(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (t, s) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("expected `target,source`, got {line:?}")))?;
        if t.trim() == "target" && s.trim() == "source" {
            continue;
        }
        out.insert(t.trim().to_string(), s.trim().to_string());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    class: String,
    file: String,
    n_images: usize,
    raw_max: u32,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    classes: Vec<String>,
    localizable: Vec<bool>,
    resolution: (usize, usize),
    entries: Vec<ManifestEntry>,
    checksum: String,
}

impl Manifest {
    fn compute_checksum(&self) -> String {
        let body = Manifest {
            checksum: String::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&body).expect("serializable manifest");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn class_file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.png")
}

/// One 16-bit grayscale PNG per class (`round(65535 * p)`) plus `manifest.json`.
pub fn save_prior_set(set: &PriorMapSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = set.resolution;
    let mut entries = Vec::with_capacity(set.len());
    let mut used = std::collections::HashSet::new();
    for pm in &set.maps {
        let name = set.classes.name(pm.class_id);
        let file = class_file_name(name);
        if !used.insert(file.clone()) {
            return Err(Error::Invalid(format!("class names collide on file {file}")));
        }
        let pixels: Vec<u16> = pm.map.iter().map(|&p| (p * 65535.0).round() as u16).collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("map size");
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::format(dir.join(&file), e.to_string()))?;
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            class: name.to_string(),
            file,
            n_images: pm.n_images,
            raw_max: pm.raw_max(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT,
        classes: set.classes.names().to_vec(),
        localizable: (0..set.classes.len()).map(|c| set.classes.is_localizable(c)).collect(),
        resolution: set.resolution,
        entries,
        checksum: String::new(),
    };
    manifest.checksum = manifest.compute_checksum();
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_prior_set(dir: &Path) -> Result<PriorMapSet> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::format(&mpath, format!("unsupported manifest format {}", manifest.format)));
    }
    if manifest.compute_checksum() != manifest.checksum {
        return Err(Error::Checksum(format!("{} does not match its checksum", mpath.display())));
    }
    let classes = ClassList::new(manifest.classes.clone(), manifest.localizable.clone())?;
    if manifest.entries.len() != classes.len() {
        return Err(Error::format(&mpath, "entry count differs from class count"));
    }
    let (h, w) = manifest.resolution;
    let mut maps = Vec::with_capacity(classes.len());
    for (class_id, entry) in manifest.entries.iter().enumerate() {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::Format {
            path: path.clone(),
            msg: format!("missing prior map for class {}: {e}", entry.class),
        })?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Checksum(format!("prior map for class {} was modified", entry.class)));
        }
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::format(&path, e.to_string()))?
            .into_luma16();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::format(&path, "resolution differs from manifest"));
        }
        let q = Array2::from_shape_vec((h, w), img.into_raw()).expect("raster size");
        // counts are recoverable exactly while raw_max < 65535
        let (map, raw) = if entry.raw_max == 0 {
            (Array2::ones((h, w)), Array2::zeros((h, w)))
        } else {
            let m = entry.raw_max as f64;
            let raw = q.mapv(|v| (v as f64 * m / 65535.0).round() as u32);
            (normalize_map(&raw), raw)
        };
        maps.push(PriorMap {
            class_id,
            map,
            raw,
            n_images: entry.n_images,
        });
    }
    Ok(PriorMapSet {
        classes,
        resolution: (h, w),
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(class_id: usize, x: f64, y: f64, w: f64, h: f64) -> BBoxAnnotation {
        BBoxAnnotation {
            image_id: "i".into(),
            class_id,
            x,
            y,
            w,
            h,
            localizable: true,
        }
    }

    #[test]
    fn rasterize_examples() {
        let m = rasterize_bbox(&ann(0, 0.0, 0.0, 2.0, 2.0), (4, 4)).unwrap();
        assert_eq!(m.sum(), 4);
        assert_eq!(m.slice(s![..2, ..2]).sum(), 4);
        let full = rasterize_bbox(&ann(0, 0.0, 0.0, 4.0, 4.0), (4, 4)).unwrap();
        assert!(full.iter().all(|&v| v == 1));
        let one = rasterize_bbox(&ann(0, 1.0, 1.0, 1.0, 1.0), (3, 3)).unwrap();
        assert_eq!(one.sum(), 1);
        assert_eq!(one[[1, 1]], 1);
        assert!(rasterize_bbox(&ann(0, 2.0, 0.0, 3.0, 1.0), (4, 4)).is_err());
    }

    #[test]
    fn accumulate_counts_overlaps() {
        let a = rasterize_bbox(&ann(0, 0.0, 0.0, 2.0, 2.0), (3, 3)).unwrap();
        let b = rasterize_bbox(&ann(0, 1.0, 1.0, 2.0, 2.0), (3, 3)).unwrap();
        let raw = accumulate_raw_map((3, 3), [&a, &b]).unwrap();
        assert_eq!(raw, ndarray::array![[1, 1, 0], [1, 2, 1], [0, 1, 1]]);
        assert_eq!(accumulate_raw_map((3, 3), [&b, &a]).unwrap(), raw);
        let z = Array2::<u8>::zeros((2, 2));
        assert_eq!(accumulate_raw_map((2, 2), [&z]).unwrap(), Array2::<u32>::zeros((2, 2)));
        assert!(accumulate_raw_map((3, 3), [&z]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let raw = ndarray::array![[2u32, 1], [0, 0]];
        assert_eq!(normalize_map(&raw)[[0, 1]], 0.5);
        assert!(normalize_map(&Array2::from_elem((3, 3), 5u32)).iter().all(|&v| v == 1.0));
        assert!(normalize_map(&Array2::zeros((2, 2))).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nih_list_gives_eight_data_maps() {
        let nih = ClassList::nih();
        let anns: Vec<_> = (0..8).map(|c| ann(c, 10.0 * c as f64, 5.0, 20.0, 30.0)).collect();
        let set = build_prior_set(&anns, &nih, (128, 128)).unwrap();
        assert_eq!(set.len(), 15);
        assert_eq!(set.maps.iter().filter(|m| !m.is_uniform()).count(), 8);
        assert_eq!(set.maps.iter().filter(|m| m.is_uniform()).count(), 7);
        let empty = build_prior_set(&[], &nih, (16, 16)).unwrap();
        assert!(empty.maps.iter().all(|m| m.is_uniform() && m.n_images == 0));
    }

    #[test]
    fn save_load_roundtrip_and_tamper_detection() {
        let classes = ClassList::from_names(["A", "B", "No Finding"]).unwrap();
        let anns = vec![ann(0, 1.0, 1.0, 5.0, 5.0), ann(0, 3.0, 3.0, 5.0, 4.0), ann(0, 2.0, 0.0, 1.0, 9.0)];
        let set = build_prior_set(&anns, &classes, (12, 10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_prior_set(&set, dir.path()).unwrap();
        let back = load_prior_set(dir.path()).unwrap();
        assert_eq!(back, set);

        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replacen("\"n_images\": 3", "\"n_images\": 4", 1)).unwrap();
        assert!(matches!(load_prior_set(dir.path()), Err(Error::Checksum(_))));
        fs::write(&mpath, text).unwrap();

        fs::remove_file(dir.path().join("B.png")).unwrap();
        let err = load_prior_set(dir.path()).unwrap_err().to_string();
        assert!(err.contains("class B"), "{err}");
    }

    #[test]
    fn align_by_name_and_mapping() {
        let src = ClassList::from_names(["Effusion", "Mass"]).unwrap();
        let set = build_prior_set(&[ann(1, 0.0, 0.0, 2.0, 2.0)], &src, (4, 4)).unwrap();
        let target = ClassList::from_names(["Pleural Effusion", "Mass", "Edema"]).unwrap();
        let mapping: HashMap<_, _> = [("Pleural Effusion".to_string(), "Effusion".to_string())].into();
        let aligned = set.align_to(&target, Some(&mapping));
        assert_eq!(aligned.len(), 3);
        assert_eq!(aligned.maps[1].map, set.maps[1].map);
        assert!(aligned.maps[2].is_uniform());
        assert_eq!(aligned.maps[1].class_id, 1);
    }
}
