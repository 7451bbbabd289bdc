use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::index::{load_bbox_index, load_label_index, BBoxAnnotation, ClassList, ImageRecord, Split};
use crate::error::{Error, Result};

/// File names inside a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetFiles {
    pub labels: String,
    pub bbox: String,
    pub images: String,
    pub classes: String,
}

impl Default for DatasetFiles {
    fn default() -> Self {
        Self {
            labels: "labels.csv".into(),
            bbox: "bbox.csv".into(),
            images: "images".into(),
            classes: "classes.txt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: f64,
    pub val: f64,
    /// Force every patient with a box-annotated image into the test split.
    pub holdout_bbox_images: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 0.7,
            val: 0.1,
            holdout_bbox_images: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train < 0.0 || self.val < 0.0 || self.train + self.val > 1.0 {
            return Err(Error::Config("split fractions must be non-negative and sum to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub image_dir: PathBuf,
    pub classes: ClassList,
    pub records: Vec<ImageRecord>,
    pub bboxes: Vec<BBoxAnnotation>,
}

impl Dataset {
    /// Loads labels, the optional box file and the class list. When `classes`
    /// is `None` the list is read from the dataset directory.
    pub fn open(root: &Path, files: &DatasetFiles, classes: Option<ClassList>) -> Result<Self> {
        let classes = match classes {
            Some(c) => c,
            None => ClassList::from_file(&root.join(&files.classes))?,
        };
        let records = load_label_index(&root.join(&files.labels), &classes)?;
        let bbox_path = root.join(&files.bbox);
        let bboxes = if bbox_path.exists() {
            load_bbox_index(&bbox_path, &classes)?
        } else {
            Vec::new()
        };
        Ok(Self {
            root: root.to_path_buf(),
            image_dir: root.join(&files.images),
            classes,
            records,
            bboxes,
        })
    }

    pub fn image_path(&self, rec: &ImageRecord) -> PathBuf {
        self.image_dir.join(&rec.path)
    }

    /// Patient-disjoint split. Patients (or images, when no patient id is
    /// present) are ordered by a seeded hash and filled into train, val and
    /// test until each split reaches its share of images. The outcome does
    /// not depend on record order.
    pub fn assign_splits(&mut self, spec: &SplitSpec) {
        let key = |r: &ImageRecord| r.patient_id.clone().unwrap_or_else(|| r.image_id.clone());
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(key(r)).or_default().push(i);
        }
        let boxed: HashSet<&str> = self.bboxes.iter().map(|b| b.image_id.as_str()).collect();
        let mut order: Vec<(String, String)> = groups
            .keys()
            .map(|k| {
                let mut h = Sha256::new();
                h.update(spec.seed.to_le_bytes());
                h.update(k.as_bytes());
                (hex::encode(h.finalize()), k.clone())
            })
            .collect();
        order.sort();

        let total = self.records.len() as f64;
        let (train_quota, val_quota) = (spec.train * total, (spec.train + spec.val) * total);
        let mut filled = 0usize;
        let mut assignment: Vec<(Vec<usize>, Split)> = Vec::new();
        for (_, k) in order {
            let members = groups.remove(&k).unwrap();
            let forced = spec.holdout_bbox_images
                && members.iter().any(|&i| boxed.contains(self.records[i].image_id.as_str()));
            let split = if forced {
                Split::Test
            } else {
                let s = if (filled as f64) < train_quota {
                    Split::Train
                } else if (filled as f64) < val_quota {
                    Split::Val
                } else {
                    Split::Test
                };
                filled += members.len();
                s
            };
            assignment.push((members, split));
        }
        for (members, split) in assignment {
            for i in members {
                self.records[i].split = split;
            }
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn boxes_by_image(&self) -> HashMap<&str, Vec<&BBoxAnnotation>> {
        let mut m: HashMap<&str, Vec<&BBoxAnnotation>> = HashMap::new();
        for b in &self.bboxes {
            m.entry(b.image_id.as_str()).or_default().push(b);
        }
        m
    }
}
