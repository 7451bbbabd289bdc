//! Synthetic chest phantoms with planted lesions at class-specific sites.
//!
//! Each image shows a bright body ellipse with two dark lung fields. For every
//! positive class a bright elliptical lesion is drawn inside that class's
//! canonical region, and its exact pixel bounding box is emitted as an
//! annotation. Generation is deterministic given the seed; each image uses its
//! own ChaCha stream so images can be produced in parallel.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::index::{BBoxAnnotation, ClassList, ImageRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRegion {
    pub name: String,
    /// `[x0, x1) x [y0, y1)` in canvas pixels.
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_edge: usize,
    pub n_classes: usize,
    pub regions: Vec<LesionRegion>,
    pub lesion_delta: f64,
    pub noise_sigma: f64,
    /// Probability that any given class is present in an image.
    pub prevalence: f64,
    pub lesion_radius: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let r = |name: &str, x0, y0, x1, y1| LesionRegion {
            name: name.into(),
            x0,
            y0,
            x1,
            y1,
        };
        Self {
            n_images: 2000,
            image_edge: 256,
            n_classes: 4,
            regions: vec![
                r("UpperLeft", 56, 70, 112, 125),
                r("UpperRight", 144, 70, 200, 125),
                r("LowerLeft", 56, 130, 112, 185),
                r("LowerRight", 144, 130, 200, 185),
            ],
            lesion_delta: 0.35,
            noise_sigma: 0.03,
            prevalence: 0.3,
            lesion_radius: (6, 14),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > self.regions.len() {
            return Err(Error::Config(format!(
                "n_classes {} must be in 1..={}",
                self.n_classes,
                self.regions.len()
            )));
        }
        let (rmin, rmax) = self.lesion_radius;
        if rmin == 0 || rmin > rmax {
            return Err(Error::Config("lesion radius range must satisfy 0 < min <= max".into()));
        }
        for r in &self.regions[..self.n_classes] {
            if r.x1 > self.image_edge || r.y1 > self.image_edge {
                return Err(Error::Config(format!("region {} lies outside the canvas", r.name)));
            }
            if r.x1 < r.x0 + 2 * rmax + 1 || r.y1 < r.y0 + 2 * rmax + 1 {
                return Err(Error::Config(format!("region {} cannot hold a lesion", r.name)));
            }
        }
        if !(0.0..=1.0).contains(&self.prevalence) || self.noise_sigma < 0.0 {
            return Err(Error::Config("prevalence must be in [0,1], noise sigma >= 0".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> ClassList {
        ClassList::from_names(self.regions[..self.n_classes].iter().map(|r| r.name.clone()))
            .expect("validated region names")
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub classes: ClassList,
    pub images: Vec<GrayImage>,
    pub records: Vec<ImageRecord>,
    pub bboxes: Vec<BBoxAnnotation>,
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

struct Planted {
    class_id: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

fn render_one(cfg: &SynthConfig, index: usize) -> (GrayImage, Vec<u8>, Vec<BBoxAnnotation>, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let e = cfg.image_edge as f64;
    let image_id = format!("synth_{index:05}.png");

    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.015..0.015) * e;
    let body = (0.5 * e, 0.5 * e, 0.47 * e, 0.49 * e);
    let lungs = [
        (0.33 * e + jitter(&mut rng), 0.5 * e + jitter(&mut rng), 0.15 * e, 0.29 * e),
        (0.67 * e + jitter(&mut rng), 0.5 * e + jitter(&mut rng), 0.15 * e, 0.29 * e),
    ];

    let mut labels = vec![0u8; cfg.n_classes];
    let mut planted = Vec::new();
    let (rmin, rmax) = cfg.lesion_radius;
    for (c, region) in cfg.regions[..cfg.n_classes].iter().enumerate() {
        if rng.random::<f64>() >= cfg.prevalence {
            continue;
        }
        labels[c] = 1;
        let rx = rng.random_range(rmin..=rmax) as f64;
        let ry = rng.random_range(rmin..=rmax) as f64;
        // keep the whole ellipse (and its bbox) inside the region
        let cx = rng.random_range(region.x0 as f64 + rx..=region.x1 as f64 - rx - 1.0);
        let cy = rng.random_range(region.y0 as f64 + ry..=region.y1 as f64 - ry - 1.0);
        planted.push(Planted { class_id: c, cx, cy, rx, ry });
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).expect("valid sigma");
    let n = cfg.image_edge;
    let mut img = GrayImage::new(n as u32, n as u32);
    let mut extents: Vec<(usize, usize, usize, usize)> = vec![(usize::MAX, usize::MAX, 0, 0); planted.len()];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0.08;
            if in_ellipse(px, py, body.0, body.1, body.2, body.3) {
                v = 0.62;
                if lungs.iter().any(|l| in_ellipse(px, py, l.0, l.1, l.2, l.3)) {
                    v = 0.24;
                }
            }
            for (k, p) in planted.iter().enumerate() {
                if in_ellipse(px, py, p.cx, p.cy, p.rx, p.ry) {
                    v += cfg.lesion_delta;
                    let ext = &mut extents[k];
                    ext.0 = ext.0.min(x);
                    ext.1 = ext.1.min(y);
                    ext.2 = ext.2.max(x + 1);
                    ext.3 = ext.3.max(y + 1);
                }
            }
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            img.put_pixel(x as u32, y as u32, image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
        }
    }

    let boxes = planted
        .iter()
        .zip(extents)
        .map(|(p, (x0, y0, x1, y1))| BBoxAnnotation {
            image_id: image_id.clone(),
            class_id: p.class_id,
            x: x0 as f64,
            y: y0 as f64,
            w: (x1 - x0) as f64,
            h: (y1 - y0) as f64,
            localizable: true,
        })
        .collect();
    (img, labels, boxes, image_id)
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let rendered: Vec<_> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| render_one(cfg, i))
        .collect();
    let mut out = SynthDataset {
        classes: cfg.classes(),
        images: Vec::with_capacity(cfg.n_images),
        records: Vec::with_capacity(cfg.n_images),
        bboxes: Vec::new(),
    };
    for (img, labels, boxes, image_id) in rendered {
        out.images.push(img);
        out.records.push(ImageRecord {
            path: PathBuf::from(&image_id),
            patient_id: Some(image_id.clone()),
            image_id,
            labels,
            split: Split::Train,
        });
        out.bboxes.extend(boxes);
    }
    Ok(out)
}

/// Writes `images/`, `labels.csv`, `bbox.csv`, `classes.txt` and `synth.json`.
pub fn write_synth_dataset(dir: &Path, cfg: &SynthConfig) -> Result<SynthDataset> {
    let ds = synth_generate(cfg)?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    ds.images
        .par_iter()
        .zip(ds.records.par_iter())
        .try_for_each(|(img, rec)| {
            let p = img_dir.join(&rec.path);
            img.save(&p).map_err(|e| Error::format(&p, e.to_string()))
        })?;

    let mut labels = String::from("Image Index,Finding Labels,Patient ID\n");
    for rec in &ds.records {
        let names: Vec<&str> = rec
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(c, _)| ds.classes.name(c))
            .collect();
        let joined = if names.is_empty() { "No Finding".to_string() } else { names.join("|") };
        labels.push_str(&format!("{},{},{}\n", rec.image_id, joined, rec.patient_id.as_deref().unwrap_or("")));
    }
    let mut bbox = String::from("Image Index,Finding Label,x,y,w,h\n");
    for b in &ds.bboxes {
        bbox.push_str(&format!("{},{},{},{},{},{}\n", b.image_id, ds.classes.name(b.class_id), b.x, b.y, b.w, b.h));
    }
    let cfg_json = serde_json::to_string_pretty(cfg).expect("serializable config");
    for (name, body) in [
        ("labels.csv", labels),
        ("bbox.csv", bbox),
        ("classes.txt", ds.classes.to_file_contents()),
        ("synth.json", cfg_json),
    ] {
        let p = dir.join(name);
        fs::File::create(&p)
            .and_then(|mut f| f.write_all(body.as_bytes()))
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok(ds)
}
