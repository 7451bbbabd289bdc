//! Running a trained model over dataset splits.

use ndarray::{s, Array2};
use rayon::prelude::*;

use super::boxes::{extract_boxes, heatmap_to_mask, normalize_heatmap, BBox};
use super::localize::{localization_score, LocCase, LocRow};
use super::metrics::{mean_defined, per_class_auc};
use crate::data::{Batch, BatchLoader, Dataset, PreprocessSpec, RoiSource};
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput, Output};
use crate::priors::PriorMapSet;

pub struct Evaluator<'a> {
    pub model: &'a Model,
    pub loader: BatchLoader<'a>,
    pub batch_size: usize,
}

#[derive(Clone, Debug)]
pub struct Predictions {
    /// `N x K` sigmoid probabilities.
    pub probs: Array2<f64>,
    pub labels: Array2<f64>,
    pub auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
}

/// Checks that the inputs a model needs are present.
pub fn check_model_inputs(model: &Model, priors: Option<&PriorMapSet>, roi: &RoiSource) -> Result<()> {
    let mode = model.config.attention;
    if mode.uses_priors() {
        match priors {
            None => return Err(Error::Config(format!("attention mode {mode:?} needs prior maps"))),
            Some(p) if p.len() != model.config.n_classes => {
                return Err(Error::Config(format!(
                    "{} prior maps for a {}-class model",
                    p.len(),
                    model.config.n_classes
                )))
            }
            Some(_) => {}
        }
    }
    if mode.uses_roi() && matches!(roi, RoiSource::None) {
        return Err(Error::Config(format!("attention mode {mode:?} needs ROI masks")));
    }
    Ok(())
}

/// Feeds only the inputs the model consumes.
pub fn model_input<'b>(model: &Model, batch: &'b Batch) -> ModelInput<'b> {
    let mode = model.config.attention;
    ModelInput {
        images: &batch.images,
        roi: batch.roi.as_ref().filter(|_| mode.uses_roi()),
        priors: batch.priors.as_ref().filter(|_| mode.uses_priors()),
    }
}

impl<'a> Evaluator<'a> {
    /// Center-crop evaluation loader for `model`.
    pub fn new(
        model: &'a Model,
        dataset: &'a Dataset,
        priors: Option<&'a PriorMapSet>,
        roi: RoiSource,
        batch_size: usize,
    ) -> Result<Self> {
        check_model_inputs(model, priors, &roi)?;
        if dataset.classes.len() != model.config.n_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {}",
                dataset.classes.len(),
                model.config.n_classes
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut spec = PreprocessSpec::eval();
        spec.crop_edge = model.config.input_edge;
        spec.resize_edge = spec.resize_edge.max(spec.crop_edge);
        let priors = priors.filter(|_| model.config.attention.uses_priors());
        let roi = if model.config.attention.uses_roi() { roi } else { RoiSource::None };
        Ok(Self {
            model,
            loader: BatchLoader::new(dataset, spec, model.config.feature_hw(), roi, priors),
            batch_size,
        })
    }

    /// Calls `f` on every batch of `indices`, in order.
    pub fn for_each_batch(&self, indices: &[usize], mut f: impl FnMut(&Batch, &Output) -> Result<()>) -> Result<()> {
        for chunk in indices.chunks(self.batch_size) {
            let batch = self.loader.load(chunk, 0)?;
            let out = self.model.forward_eval(model_input(self.model, &batch))?;
            f(&batch, &out)?;
        }
        Ok(())
    }

    pub fn classify(&self, indices: &[usize]) -> Result<Predictions> {
        if indices.is_empty() {
            return Err(Error::Invalid("no images to evaluate".into()));
        }
        let k = self.model.config.n_classes;
        let mut probs = Array2::zeros((indices.len(), k));
        let mut labels = Array2::zeros((indices.len(), k));
        let mut row = 0;
        self.for_each_batch(indices, |batch, out| {
            let n = batch.len();
            probs.slice_mut(s![row..row + n, ..]).assign(&out.probabilities());
            labels.slice_mut(s![row..row + n, ..]).assign(&batch.labels);
            row += n;
            Ok(())
        })?;
        let auc = per_class_auc(probs.view(), labels.view())?;
        let mean_auc = mean_defined(&auc);
        Ok(Predictions {
            probs,
            labels,
            auc,
            mean_auc,
        })
    }

    /// Boxes from the CAM of class `class` for item `b` of a batch.
    pub fn predicted_boxes(&self, out: &Output, b: usize, class: usize) -> Vec<BBox> {
        let cam = self.model.cam(out, class);
        let map = normalize_heatmap(cam.slice(s![b, .., ..]), self.loader.spec.crop_edge);
        extract_boxes(heatmap_to_mask(map.view()).view())
    }

    /// Localization cases for localizable classes. Positive cases are the
    /// images with ground-truth boxes of the class; with `include_negatives`,
    /// images labeled negative for the class are added.
    pub fn localize(
        &self,
        indices: &[usize],
        thresholds: &[f64],
        include_negatives: bool,
    ) -> Result<(Vec<LocCase>, Vec<LocRow>)> {
        let ds = self.loader.dataset;
        let boxes = ds.boxes_by_image();
        let k = ds.classes.len();
        let mut cases = Vec::new();
        self.for_each_batch(indices, |batch, out| {
            let work: Vec<(usize, usize, Vec<BBox>)> = batch
                .indices
                .iter()
                .enumerate()
                .flat_map(|(b, &idx)| {
                    let rec = &ds.records[idx];
                    let window = &batch.windows[b];
                    let anns = boxes.get(rec.image_id.as_str());
                    (0..k)
                        .filter(|&c| ds.classes.is_localizable(c))
                        .filter_map(move |c| {
                            let gt: Vec<BBox> = anns
                                .into_iter()
                                .flatten()
                                .filter(|a| a.class_id == c && a.localizable)
                                .filter_map(|a| window.map_box(a.x, a.y, a.x + a.w, a.y + a.h))
                                .map(|(x0, y0, x1, y1)| BBox::new(x0, y0, x1, y1))
                                .collect();
                            let keep = !gt.is_empty() || (include_negatives && rec.labels[c] == 0);
                            keep.then_some((b, c, gt))
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            let found: Vec<LocCase> = work
                .into_par_iter()
                .map(|(b, c, gt)| LocCase {
                    image_id: ds.records[batch.indices[b]].image_id.clone(),
                    class_id: c,
                    predicted: self.predicted_boxes(out, b, c),
                    ground_truth: gt,
                })
                .collect();
            cases.extend(found);
            Ok(())
        })?;
        let rows = localization_score(&cases, k, thresholds, include_negatives);
        Ok((cases, rows))
    }
}

/// Indices of `candidates` with at least one localizable box.
pub fn boxed_indices(dataset: &Dataset, candidates: &[usize]) -> Vec<usize> {
    let boxes = dataset.boxes_by_image();
    candidates
        .iter()
        .copied()
        .filter(|&i| {
            boxes
                .get(dataset.records[i].image_id.as_str())
                .is_some_and(|v| v.iter().any(|a| a.localizable))
        })
        .collect()
}
