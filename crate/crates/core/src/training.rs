//! Loss, optimizer, schedule and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchLoader, Dataset, PreprocessSpec, RoiSource, Split};
use crate::error::{Error, Result};
use crate::eval::{check_model_inputs, model_input, Evaluator};
use crate::model::{save_checkpoint, Model};
use crate::nn::{ParamKind, ParamStore};
use crate::priors::PriorMapSet;

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Apply weight decay outside the adaptive step instead of as L2.
    pub decoupled_weight_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop each epoch after this many optimizer steps.
    pub max_steps_per_epoch: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 15,
            lr0: 1e-4,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 4,
            seed: 0,
            decoupled_weight_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps_per_epoch: None,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        // Batch norm in train mode needs two samples per batch.
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs == 0 || self.lr_decay_every == 0 || self.eval_batch_size == 0 {
            return bad("epochs, lr_decay_every and eval_batch_size must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr0 and lr_decay_factor must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps positive");
        }
        if self.max_steps_per_epoch == Some(0) {
            return bad("max_steps_per_epoch must be positive");
        }
        Ok(())
    }
}

fn check_logits_labels(logits: &[f64], labels: &[f64]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i}")));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// `-[y ln s(z) + (1-y) ln(1-s(z))] = max(z,0) - z y + ln(1 + e^-|z|)`.
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy averaged over classes.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    check_logits_labels(logits, labels)?;
    if logits.is_empty() {
        return Err(Error::Invalid("empty logits".into()));
    }
    Ok(logits.iter().zip(labels).map(|(&z, &y)| bce_term(z, y)).sum::<f64>() / logits.len() as f64)
}

/// Mean BCE over an `N x K` batch and its gradient `(s(z) - y) / (N K)`.
pub fn bce_with_grad(logits: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != labels.dim() {
        return Err(Error::Shape(format!("logits {:?} vs labels {:?}", logits.dim(), labels.dim())));
    }
    let (z, y) = (logits.as_standard_layout(), labels.as_standard_layout());
    let (zs, ys) = (z.as_slice().expect("standard"), y.as_slice().expect("standard"));
    let loss = bce_loss(zs, ys)?;
    let scale = 1.0 / zs.len() as f64;
    let grad = Zip::from(&z).and(&y).map_collect(|&z, &y| (crate::nn::sigmoid_scalar(z) - y) * scale);
    Ok((loss, grad))
}

/// `lr0 * factor^floor(epoch / every)`, rounded to 15 significant digits so
/// decimal settings give the decimal rates (`1e-4 * 0.1^3` is exactly `1e-7`).
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.lr_decay_every) as i32;
    let lr = cfg.lr0 * cfg.lr_decay_factor.powi(k);
    format!("{lr:.14e}").parse().expect("formatted float")
}

/// Adam over the `Weight` entries of a store. Buffers are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    pub t: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = |e: &crate::nn::ParamEntry| match e.kind {
            ParamKind::Weight => ArrayD::zeros(e.value.raw_dim()),
            ParamKind::Buffer => ArrayD::zeros(ndarray::IxDyn(&[0])),
        };
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            decoupled: cfg.decoupled_weight_decay,
            t: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let decoupled = self.decoupled;
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if e.kind != ParamKind::Weight {
                continue;
            }
            Zip::from(&mut e.value)
                .and(&e.grad)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|theta, &g, m, v| {
                    let g = if decoupled { g } else { g + wd * *theta };
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mut update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    if decoupled {
                        update += wd * *theta;
                    }
                    *theta -= lr * update;
                });
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub priors: Option<&'a PriorMapSet>,
    pub roi: RoiSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mean_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch whose weights the model holds on return.
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

pub fn log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_mean_auc\n");
    for r in log {
        let auc = r.val_mean_auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.lr, r.train_loss, auc);
    }
    s
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Per-epoch loader seed; distinct epochs draw distinct crops.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Batches of a seeded permutation; a trailing batch of one is dropped.
pub fn epoch_batches(train: &[usize], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
    }
    if let Some(cap) = cfg.max_steps_per_epoch {
        batches.truncate(cap);
    }
    batches
}

/// Trains in place. The model ends holding the weights of the epoch with the
/// best validation mean AUC (the last epoch if no AUC is ever defined). With
/// `out_dir`, the CSV log is rewritten after every epoch and `best.ckpt` is
/// saved whenever validation AUC improves; `last.ckpt` is saved at the end.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    meta: &serde_json::Value,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_model_inputs(model, data.priors, &data.roi)?;
    let ds = data.dataset;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if cfg.batch_size > train_idx.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training images",
            cfg.batch_size,
            train_idx.len()
        )));
    }
    let mut spec = PreprocessSpec::train();
    spec.crop_edge = model.config.input_edge;
    spec.resize_edge = spec.resize_edge.max(spec.crop_edge);
    let mode = model.config.attention;
    let loader = BatchLoader::new(
        ds,
        spec,
        model.config.feature_hw(),
        if mode.uses_roi() { data.roi.clone() } else { RoiSource::None },
        data.priors.filter(|_| mode.uses_priors()),
    );

    let mut adam = Adam::new(&model.store, cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut best_path = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (step, batch_idx) in epoch_batches(&train_idx, cfg, epoch).iter().enumerate() {
            let batch = loader.load(batch_idx, epoch_seed(cfg.seed, epoch))?;
            let (out, cache) = model.forward_train(model_input(model, &batch)).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, step {step}")),
                other => other,
            })?;
            let (loss, dlogits) = bce_with_grad(out.logits.view(), batch.labels.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, step {step} (lr {lr}, first image {})",
                    ds.records[batch_idx[0]].image_id
                )));
            }
            model.store.zero_grads();
            model.backward(&out, &cache, &dlogits);
            adam.step(&mut model.store, lr);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val_mean_auc = if val_idx.is_empty() {
            None
        } else {
            let ev = Evaluator::new(model, ds, data.priors, data.roi.clone(), cfg.eval_batch_size)?;
            ev.classify(&val_idx)?.mean_auc
        };
        log::info!("epoch {epoch}: lr {lr} loss {train_loss:.5} val mean AUC {val_mean_auc:?}");
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_mean_auc,
        });

        let improved = match (val_mean_auc, &best) {
            (Some(a), Some((b, _, _))) => a > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((val_mean_auc.expect("improved"), epoch, model.store.clone()));
            if let Some(dir) = out_dir {
                let path = dir.join(BEST_CHECKPOINT);
                let mut m = meta.clone();
                m["epoch"] = epoch.into();
                m["val_mean_auc"] = val_mean_auc.into();
                save_checkpoint(model, &m, &path)?;
                best_path = Some(path);
            }
        }
        if let Some(dir) = out_dir {
            write_atomic(&dir.join(LOG_FILE), log_csv(&log).as_bytes())?;
        }
    }

    let last_epoch = cfg.epochs - 1;
    if let Some(dir) = out_dir {
        let mut m = meta.clone();
        m["epoch"] = last_epoch.into();
        save_checkpoint(model, &m, &dir.join(LAST_CHECKPOINT))?;
        if best.is_none() {
            let path = dir.join(BEST_CHECKPOINT);
            save_checkpoint(model, &m, &path)?;
            best_path = Some(path);
        }
    }
    let (best_val_auc, best_epoch) = match best {
        Some((auc, epoch, store)) => {
            model.store = store;
            (Some(auc), epoch)
        }
        None => (None, last_epoch),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_auc,
        best_checkpoint: best_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_synth_dataset, DatasetFiles, SplitSpec, SynthConfig};
    use crate::model::{AttentionMode, ModelConfig, ModelInput};
    use crate::nn::Tensor4;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // ln(1 + e^-20) = e^-20 - e^-40/2 + ...
        let expected = (-20f64).exp() - (-40f64).exp() / 2.0;
        assert!((bce_loss(&[20.0], &[1.0]).unwrap() - expected).abs() < 1e-22);
        assert!(bce_loss(&[100.0, -100.0], &[0.0, 1.0]).unwrap().is_finite());
        assert!(matches!(bce_loss(&[f64::INFINITY], &[1.0]), Err(Error::NonFinite(_))));
        assert!(bce_loss(&[0.0], &[0.5]).is_err());
    }

    #[test]
    fn schedule_is_exact() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (0..15).map(|e| lr_at_epoch(e, &cfg)).collect();
        let mut expected = vec![1e-4; 4];
        expected.extend([1e-5; 4]);
        expected.extend([1e-6; 4]);
        expected.extend([1e-7; 3]);
        assert_eq!(lrs, expected);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    proptest! {
        #[test]
        fn bce_symmetry_and_gradient(z in -100.0f64..100.0, y in 0u8..2) {
            let y = y as f64;
            let a = bce_loss(&[z], &[y]).unwrap();
            prop_assert!(a.is_finite() && a >= 0.0);
            prop_assert!((a - bce_loss(&[-z], &[1.0 - y]).unwrap()).abs() <= 1e-12 * a.max(1.0));
            let h = 1e-6;
            let num = (bce_loss(&[z + h], &[y]).unwrap() - bce_loss(&[z - h], &[y]).unwrap()) / (2.0 * h);
            let (_, g) = bce_with_grad(ndarray::array![[z]].view(), ndarray::array![[y]].view()).unwrap();
            prop_assert!((num - g[[0, 0]]).abs() < 1e-6);
        }

        #[test]
        fn schedule_non_increasing(lr0 in 1e-6f64..1.0, f in 0.01f64..1.0, every in 1usize..6) {
            let cfg = TrainConfig { lr0, lr_decay_factor: f, lr_decay_every: every, ..Default::default() };
            for e in 0..30 {
                prop_assert!(lr_at_epoch(e + 1, &cfg) <= lr_at_epoch(e, &cfg));
            }
        }
    }

    #[test]
    fn adam_first_step_and_buffers() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", ParamKind::Weight, ndarray::arr1(&[1.0, -2.0]).into_dyn());
        let b = ps.add("b", ParamKind::Buffer, ndarray::arr1(&[5.0]).into_dyn());
        ps.grad_mut(w).assign(&ndarray::arr1(&[0.5, 0.0]).into_dyn());
        ps.grad_mut(b).fill(1.0);
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut adam = Adam::new(&ps, &cfg);
        adam.step(&mut ps, 0.1);
        // First bias-corrected step moves by lr * g / (|g| + eps).
        let v = ps.value(w);
        assert!((v[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert_eq!(v[1], -2.0);
        assert_eq!(ps.value(b)[0], 5.0);
    }

    fn tiny_model(attention: AttentionMode) -> Model {
        Model::new(&ModelConfig {
            attention,
            n_classes: 3,
            input_edge: 64,
            init_seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn gradient_flow_through_heads() {
        let mut model = tiny_model(AttentionMode::Baseline);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::from_shape_simple_fn((2, 3, 64, 64), || rng.random_range(-1.0..1.0));
        let (out, cache) = model.forward_train(ModelInput { images: &x, roi: None, priors: None }).unwrap();
        let labels = ndarray::array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let (_, mut dlogits) = bce_with_grad(out.logits.view(), labels.view()).unwrap();
        model.store.zero_grads();
        model.backward(&out, &cache, &dlogits);
        let hw = model.net.head_weight;
        let g = model.store.grad(hw).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert!(g.row(1).iter().any(|&v| v != 0.0));

        // A head with no loss signal only moves by weight decay.
        dlogits.column_mut(2).fill(0.0);
        model.store.zero_grads();
        model.backward(&out, &cache, &dlogits);
        let g = model.store.grad(hw).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert!(g.row(2).iter().all(|&v| v == 0.0));
        let before = model.store.value(hw).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&model.store, &cfg);
        adam.step(&mut model.store, 1e-3);
        let after = model.store.value(hw).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (&b, &a) in before.row(2).iter().zip(after.row(2)) {
            let gd = cfg.weight_decay * b;
            let expected = b - 1e-3 * gd / (gd.abs() + cfg.eps);
            assert!((a - expected).abs() < 1e-15);
        }
        let mut no_wd = Adam::new(&model.store, &TrainConfig { weight_decay: 0.0, ..cfg });
        let snapshot = model.store.value(hw).clone();
        no_wd.step(&mut model.store, 1e-3);
        let row2 = |v: &ArrayD<f64>| v.clone().into_dimensionality::<ndarray::Ix2>().unwrap().row(2).to_owned();
        assert_eq!(row2(model.store.value(hw)), row2(&snapshot));
    }

    fn synth_dataset(dir: &Path, n: usize) -> Dataset {
        let cfg = SynthConfig {
            n_images: n,
            image_edge: 64,
            n_classes: 2,
            regions: vec![
                crate::data::LesionRegion { name: "Left".into(), x0: 4, y0: 10, x1: 30, y1: 40 },
                crate::data::LesionRegion { name: "Right".into(), x0: 34, y0: 10, x1: 60, y1: 40 },
            ],
            lesion_radius: (3, 5),
            prevalence: 0.5,
            seed: 1,
            ..Default::default()
        };
        write_synth_dataset(dir, &cfg).unwrap();
        let mut ds = Dataset::open(dir, &DatasetFiles::default(), None).unwrap();
        ds.assign_splits(&SplitSpec { seed: 2, train: 0.6, val: 0.4, ..Default::default() });
        ds
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(dir.path(), 12);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            lr0: 1e-3,
            seed: 5,
            eval_batch_size: 8,
            ..Default::default()
        };
        let data = TrainData { dataset: &ds, priors: None, roi: RoiSource::None };
        let out = tempfile::tempdir().unwrap();
        let mut a = tiny_model(AttentionMode::Baseline);
        let mut a_cfg = a.config.clone();
        a_cfg.n_classes = 2;
        a = Model::new(&a_cfg).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &data, &cfg, Some(out.path()), &serde_json::Value::Null).unwrap();
        let rb = train(&mut b, &data, &cfg, None, &serde_json::Value::Null).unwrap();
        assert_eq!(ra.log, rb.log);
        assert_eq!(ra.log.len(), 2);
        let csv = fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
        assert!(csv.starts_with("epoch,lr,train_loss,val_mean_auc\n0,0.001,"));
        assert_eq!(csv.lines().count(), 3);
        assert!(out.path().join(BEST_CHECKPOINT).exists() && out.path().join(LAST_CHECKPOINT).exists());

        let too_big = TrainConfig { batch_size: 100, ..cfg.clone() };
        assert!(matches!(train(&mut a, &data, &too_big, None, &serde_json::Value::Null), Err(Error::Config(_))));
        let mut needs_priors = Model::new(&ModelConfig { attention: AttentionMode::PriorOnly, ..a_cfg }).unwrap();
        assert!(matches!(train(&mut needs_priors, &data, &cfg, None, &serde_json::Value::Null), Err(Error::Config(_))));
    }

    #[test]
    fn trailing_singleton_batch_is_dropped() {
        let cfg = TrainConfig { batch_size: 4, ..Default::default() };
        let idx: Vec<usize> = (0..9).collect();
        let b = epoch_batches(&idx, &cfg, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        assert_ne!(epoch_batches(&idx, &cfg, 1), b);
        assert_eq!(epoch_batches(&idx, &cfg, 0), b);
    }
}
