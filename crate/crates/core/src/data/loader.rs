use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use ndarray::{s, Array2, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::Dataset;
use super::preprocess::{crop_and_pool, load_image, preprocess_image, resize_area, CropWindow, PreprocessSpec};
use crate::error::Result;
use crate::nn::Tensor4;
use crate::priors::PriorMapSet;

/// Where per-image chest ROI masks come from.
#[derive(Clone, Debug, Default)]
pub enum RoiSource {
    #[default]
    None,
    /// Directory of 0/255 rasters named by [`crate::roi::mask_file_name`].
    Dir(PathBuf),
    /// Masks in source resolution keyed by image id.
    Memory(Arc<HashMap<String, Array2<u8>>>),
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `N x 3 x 224 x 224`.
    pub images: Tensor4,
    /// `N x K`, entries in {0, 1}.
    pub labels: Array2<f64>,
    /// `N x 1 x h x w` ROI masks at feature resolution.
    pub roi: Option<Tensor4>,
    /// `N x K x h x w` prior maps at feature resolution.
    pub priors: Option<Tensor4>,
    pub windows: Vec<CropWindow>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

type FrameKey = (usize, usize);

/// Turns dataset indices into model-ready batches. Images, masks and priors
/// share one crop window per item.
pub struct BatchLoader<'a> {
    pub dataset: &'a Dataset,
    pub spec: PreprocessSpec,
    pub feature_hw: (usize, usize),
    pub roi: RoiSource,
    priors: Option<&'a PriorMapSet>,
    /// Prior maps resized to a frame size, shared across items.
    frames: Mutex<HashMap<FrameKey, Arc<Vec<Array2<f64>>>>>,
}

struct Item {
    image: ndarray::Array3<f64>,
    window: CropWindow,
    roi: Option<Array2<f64>>,
    priors: Option<Vec<Array2<f64>>>,
}

impl<'a> BatchLoader<'a> {
    pub fn new(
        dataset: &'a Dataset,
        spec: PreprocessSpec,
        feature_hw: (usize, usize),
        roi: RoiSource,
        priors: Option<&'a PriorMapSet>,
    ) -> Self {
        Self {
            dataset,
            spec,
            feature_hw,
            roi,
            priors,
            frames: Mutex::new(HashMap::new()),
        }
    }

    /// Loads `indices` in order. Item `i` draws its crop from a ChaCha stream
    /// keyed by `(seed, i)`, so results do not depend on scheduling.
    pub fn load(&self, indices: &[usize], seed: u64) -> Result<Batch> {
        let items: Vec<Item> = indices
            .par_iter()
            .map(|&i| self.load_item(i, seed))
            .collect::<Result<_>>()?;
        let n = items.len();
        let k = self.dataset.classes.len();
        let (fh, fw) = self.feature_hw;
        let edge = self.spec.crop_edge;
        let mut images = Array4::zeros((n, 3, edge, edge));
        let mut labels = Array2::zeros((n, k));
        let mut roi = self.has_roi().then(|| Array4::zeros((n, 1, fh, fw)));
        let mut priors = self.priors.map(|p| Array4::zeros((n, p.len(), fh, fw)));
        let mut windows = Vec::with_capacity(n);
        for (b, (item, &idx)) in items.into_iter().zip(indices).enumerate() {
            images.slice_mut(s![b, .., .., ..]).assign(&item.image);
            for (c, &v) in self.dataset.records[idx].labels.iter().enumerate() {
                labels[[b, c]] = v as f64;
            }
            if let (Some(r), Some(m)) = (roi.as_mut(), item.roi) {
                r.slice_mut(s![b, 0, .., ..]).assign(&m);
            }
            if let (Some(p), Some(maps)) = (priors.as_mut(), item.priors) {
                for (c, m) in maps.iter().enumerate() {
                    p.slice_mut(s![b, c, .., ..]).assign(m);
                }
            }
            windows.push(item.window);
        }
        Ok(Batch {
            images,
            labels,
            roi,
            priors,
            windows,
            indices: indices.to_vec(),
        })
    }

    fn has_roi(&self) -> bool {
        !matches!(self.roi, RoiSource::None)
    }

    fn load_item(&self, idx: usize, seed: u64) -> Result<Item> {
        let rec = &self.dataset.records[idx];
        let source = load_image(&self.dataset.image_path(rec))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let (image, window) = preprocess_image(&source, &self.spec, &mut rng)?;
        let roi = match &self.roi {
            RoiSource::None => None,
            RoiSource::Dir(dir) => {
                let mask = crate::roi::load_mask(&dir.join(crate::roi::mask_file_name(&rec.image_id)))?;
                Some(self.align_mask(mask.view(), &window)?)
            }
            RoiSource::Memory(map) => {
                let mask = map.get(&rec.image_id).ok_or_else(|| {
                    crate::Error::Invalid(format!("no ROI mask for {}", rec.image_id))
                })?;
                Some(self.align_mask(mask.view(), &window)?)
            }
        };
        let priors = match self.priors {
            None => None,
            Some(_) => {
                let frames = self.prior_frames(&window);
                Some(
                    frames
                        .iter()
                        .map(|f| crop_and_pool(f, &window, self.feature_hw))
                        .collect::<Result<_>>()?,
                )
            }
        };
        Ok(Item {
            image,
            window,
            roi,
            priors,
        })
    }

    fn align_mask(&self, mask: ArrayView2<u8>, window: &CropWindow) -> Result<Array2<f64>> {
        let m = mask.mapv(|v| if v > 0 { 1.0 } else { 0.0 });
        super::preprocess::transform_aligned(m.view(), window, self.feature_hw)
    }

    /// Priors live in their own canonical resolution; they are resampled
    /// straight into the paired image's resized frame.
    fn prior_frames(&self, window: &CropWindow) -> Arc<Vec<Array2<f64>>> {
        let key = (window.resized_h, window.resized_w);
        let mut cache = self.frames.lock().expect("frame cache poisoned");
        cache
            .entry(key)
            .or_insert_with(|| {
                let set = self.priors.expect("priors present");
                Arc::new(
                    set.maps
                        .iter()
                        .map(|m| resize_area(m.map.view(), key.0, key.1))
                        .collect(),
                )
            })
            .clone()
    }
}
