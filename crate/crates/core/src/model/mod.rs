//! The full classifier: backbone, optional pyramid, ROI and prior attention
//! branches, per-class linear heads and CAM heatmaps.
//!
//! Head input per class `c`:
//! - `baseline`: `F`
//! - `roi_only`: `A_roi`
//! - `prior_only`: `A_p[c]`
//! - `prior_and_roi`: `concat(A_roi, A_p[c])`
//!
//! `logit[c] = w[c] . GAP(X[c]) + b[c]` and `cam[c] = sum_d w[c,d] X[c][d]`,
//! so the spatial mean of `cam[c]` is `logit[c] - b[c]`.

mod backbone;
mod checkpoint;
mod fpn;

pub use backbone::{Backbone, DenseNet, DenseNetConfig, Taps, ToyCnn, TOY_WIDTHS};
pub use checkpoint::{load_checkpoint, read_checkpoint_config, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use fpn::{Fpn, FpnMode};

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apam::{apam_backward, apam_forward, ApamCache, ApamParams, AttentionOutput};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamKind, ParamStore, Pass, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Densenet121,
    ToyCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Baseline,
    PriorOnly,
    RoiOnly,
    PriorAndRoi,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::Baseline,
        AttentionMode::PriorOnly,
        AttentionMode::RoiOnly,
        AttentionMode::PriorAndRoi,
    ];

    pub fn uses_roi(self) -> bool {
        matches!(self, AttentionMode::RoiOnly | AttentionMode::PriorAndRoi)
    }

    pub fn uses_priors(self) -> bool {
        matches!(self, AttentionMode::PriorOnly | AttentionMode::PriorAndRoi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub fpn: FpnMode,
    pub attention: AttentionMode,
    pub n_classes: usize,
    pub input_edge: usize,
    /// Pyramid width; defaults to 256 for DenseNet and 64 for the toy CNN.
    pub fpn_channels: Option<usize>,
    /// One prior attention module per class instead of a shared one.
    pub per_class_params: bool,
    pub densenet: DenseNetConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::ToyCnn,
            fpn: FpnMode::None,
            attention: AttentionMode::PriorAndRoi,
            n_classes: 1,
            input_edge: 224,
            fpn_channels: None,
            per_class_params: false,
            densenet: DenseNetConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be at least 1".into()));
        }
        if self.input_edge == 0 || !self.input_edge.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input edge {} must be a positive multiple of 32",
                self.input_edge
            )));
        }
        if self.fpn_channels == Some(0) {
            return Err(Error::Config("fpn_channels must be positive".into()));
        }
        if self.backbone == BackboneKind::Densenet121 {
            self.densenet.validate()?;
        }
        Ok(())
    }

    /// Channels of the tapped 14x14 and 7x7 stages.
    pub fn tap_channels(&self) -> (usize, usize) {
        match self.backbone {
            BackboneKind::ToyCnn => (TOY_WIDTHS[2], TOY_WIDTHS[3]),
            BackboneKind::Densenet121 => {
                let bc = self.densenet.block_channels();
                (bc[2], bc[3])
            }
        }
    }

    /// `C`: channels of the map the attention branches see.
    pub fn feature_channels(&self) -> usize {
        match self.fpn {
            FpnMode::None => self.tap_channels().1,
            _ => self.fpn_channels.unwrap_or(match self.backbone {
                BackboneKind::Densenet121 => 256,
                BackboneKind::ToyCnn => 64,
            }),
        }
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        let s = match self.fpn {
            FpnMode::None => self.input_edge / 32,
            _ => self.input_edge / 16,
        };
        (s, s)
    }

    /// Per-class head input width.
    pub fn head_dim(&self) -> usize {
        match self.attention {
            AttentionMode::PriorAndRoi => 2 * self.feature_channels(),
            _ => self.feature_channels(),
        }
    }
}

/// Layer structure; all tensors live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub fpn: Option<Fpn>,
    pub roi_apam: Option<ApamParams>,
    pub prior_apams: Vec<ApamParams>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    /// `N x 3 x S x S`.
    pub images: &'a Tensor4,
    /// `N x 1 x h x w` at feature resolution.
    pub roi: Option<&'a Tensor4>,
    /// `N x K x h x w` at feature resolution.
    pub priors: Option<&'a Tensor4>,
}

#[derive(Clone, Debug)]
pub enum HeadInputs {
    /// One tensor used by every class.
    Shared(Tensor4),
    PerClass(Vec<Tensor4>),
}

impl HeadInputs {
    pub fn get(&self, class: usize) -> &Tensor4 {
        match self {
            HeadInputs::Shared(t) => t,
            HeadInputs::PerClass(v) => &v[class],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Output {
    /// `N x K`.
    pub logits: Array2<f64>,
    /// `F`, `N x C x h x w`.
    pub features: Tensor4,
    pub roi: Option<AttentionOutput>,
    /// One entry per class in prior modes, empty otherwise.
    pub priors: Vec<AttentionOutput>,
    pub head_inputs: HeadInputs,
}

impl Output {
    /// `A_roi`, or `F` when the mode has no ROI branch.
    pub fn roi_branch(&self) -> &Tensor4 {
        self.roi.as_ref().map_or(&self.features, |a| &a.attention)
    }

    /// `A_p[c]`, or `F` when the mode has no prior branches.
    pub fn prior_branch(&self, class: usize) -> &Tensor4 {
        self.priors.get(class).map_or(&self.features, |a| &a.attention)
    }

    pub fn probabilities(&self) -> Array2<f64> {
        self.logits.mapv(crate::nn::sigmoid_scalar)
    }
}

pub struct ForwardCache {
    backbone: backbone::BackboneCache,
    fpn: Option<fpn::FpnCache>,
    roi: Option<ApamCache>,
    priors: Vec<ApamCache>,
    head_means: Vec<Array2<f64>>,
    hw: (usize, usize),
}

impl Network {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, ps: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = match config.backbone {
            BackboneKind::ToyCnn => Backbone::Toy(ToyCnn::new(ps, rng)),
            BackboneKind::Densenet121 => Backbone::DenseNet(Box::new(DenseNet::new(ps, &config.densenet, rng))),
        };
        let (c14, c7) = backbone.tap_channels();
        let c = config.feature_channels();
        let fpn = match config.fpn {
            FpnMode::None => None,
            mode => Some(Fpn::new(ps, mode, c14, c7, c, rng)?),
        };
        let roi_apam = config
            .attention
            .uses_roi()
            .then(|| ApamParams::new(ps, "apam/roi", c, rng));
        let prior_apams = if !config.attention.uses_priors() {
            Vec::new()
        } else if config.per_class_params {
            (0..config.n_classes)
                .map(|k| ApamParams::new(ps, &format!("apam/prior{k}"), c, rng))
                .collect()
        } else {
            vec![ApamParams::new(ps, "apam/prior", c, rng)]
        };
        let d = config.head_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[config.n_classes, d]), || rng.random_range(-bound..bound));
        let head_weight = ps.add("heads/weight", ParamKind::Weight, w);
        let head_bias = ps.add("heads/bias", ParamKind::Weight, ArrayD::zeros(IxDyn(&[config.n_classes])));
        Ok(Self {
            config: config.clone(),
            backbone,
            fpn,
            roi_apam,
            prior_apams,
            head_weight,
            head_bias,
        })
    }

    fn prior_params(&self, class: usize) -> &ApamParams {
        if self.config.per_class_params {
            &self.prior_apams[class]
        } else {
            &self.prior_apams[0]
        }
    }

    pub fn head_weights<'a>(&self, ps: &'a ParamStore) -> ndarray::ArrayView2<'a, f64> {
        ps.value(self.head_weight)
            .view()
            .into_dimensionality()
            .expect("head weight is 2-D")
    }

    pub fn head_biases<'a>(&self, ps: &'a ParamStore) -> ArrayView1<'a, f64> {
        ps.value(self.head_bias)
            .view()
            .into_dimensionality()
            .expect("head bias is 1-D")
    }

    /// Backbone plus pyramid: `F`.
    pub fn features(&self, pass: &mut Pass, images: &Tensor4) -> Result<(Tensor4, backbone::BackboneCache, Option<fpn::FpnCache>)> {
        let edge = self.config.input_edge;
        let (_, c, h, w) = images.dim();
        if (c, h, w) != (3, edge, edge) {
            return Err(Error::Shape(format!(
                "model expects N x 3 x {edge} x {edge} images, got {:?}",
                images.dim()
            )));
        }
        let (taps, bcache) = self.backbone.forward(pass, images)?;
        match &self.fpn {
            None => Ok((taps.c7, bcache, None)),
            Some(f) => {
                let (y, fc) = f.forward(pass.store(), &taps.c14, &taps.c7)?;
                Ok((y, bcache, Some(fc)))
            }
        }
    }

    fn check_mask(&self, name: &str, t: Option<&Tensor4>, n: usize, ch: usize) -> Result<Tensor4> {
        let (h, w) = self.config.feature_hw();
        let t = t.ok_or_else(|| Error::Config(format!("attention mode {:?} needs {name}", self.config.attention)))?;
        if t.dim() != (n, ch, h, w) {
            return Err(Error::Shape(format!(
                "{name} are {:?}, expected {:?}; the prior set must hold one map per class",
                t.dim(),
                (n, ch, h, w)
            )));
        }
        Ok(t.clone())
    }

    pub fn forward(&self, pass: &mut Pass, input: ModelInput) -> Result<(Output, ForwardCache)> {
        let n = input.images.dim().0;
        let k = self.config.n_classes;
        let (f, bcache, fcache) = self.features(pass, input.images)?;
        let hw = (f.dim().2, f.dim().3);

        let (roi, roi_cache) = match &self.roi_apam {
            None => (None, None),
            Some(p) => {
                let m = self.check_mask("ROI masks", input.roi, n, 1)?;
                let (o, c) = apam_forward(pass, &f, &m, p)?;
                (Some(o), Some(c))
            }
        };
        let mut priors = Vec::new();
        let mut prior_caches = Vec::new();
        if self.config.attention.uses_priors() {
            let all = self.check_mask("prior maps", input.priors, n, k)?;
            for c in 0..k {
                let m = all.slice(s![.., c..c + 1, .., ..]).to_owned();
                let (o, cache) = apam_forward(pass, &f, &m, self.prior_params(c))?;
                priors.push(o);
                prior_caches.push(cache);
            }
        }

        let head_inputs = match self.config.attention {
            AttentionMode::Baseline => HeadInputs::Shared(f.clone()),
            AttentionMode::RoiOnly => HeadInputs::Shared(roi.as_ref().expect("roi branch").attention.clone()),
            AttentionMode::PriorOnly => HeadInputs::PerClass(priors.iter().map(|p| p.attention.clone()).collect()),
            AttentionMode::PriorAndRoi => {
                let a_roi = &roi.as_ref().expect("roi branch").attention;
                HeadInputs::PerClass(
                    priors
                        .iter()
                        .map(|p| crate::nn::concat_channels(a_roi, &p.attention))
                        .collect::<Result<_>>()?,
                )
            }
        };

        let ps = pass.store();
        let w = self.head_weights(ps);
        let b = self.head_biases(ps);
        let mut logits = Array2::zeros((n, k));
        let mut head_means = Vec::with_capacity(k);
        for c in 0..k {
            let x = head_inputs.get(c);
            let g = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
            let l = g.dot(&w.row(c)) + b[c];
            logits.column_mut(c).assign(&l);
            head_means.push(g);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }

        Ok((
            Output {
                logits,
                features: f,
                roi,
                priors,
                head_inputs,
            },
            ForwardCache {
                backbone: bcache,
                fpn: fcache,
                roi: roi_cache,
                priors: prior_caches,
                head_means,
                hw,
            },
        ))
    }

    /// Accumulates gradients of every parameter given `dL/dlogits`.
    pub fn backward(&self, ps: &mut ParamStore, out: &Output, cache: &ForwardCache, dlogits: &Array2<f64>) {
        let k = self.config.n_classes;
        let (h, wd) = cache.hw;
        let area = (h * wd) as f64;
        let w = self.head_weights(ps).to_owned();

        let mut dw = Array2::<f64>::zeros(w.raw_dim());
        let mut db = Array1::<f64>::zeros(k);
        for c in 0..k {
            let dl = dlogits.column(c);
            dw.row_mut(c).assign(&cache.head_means[c].t().dot(&dl));
            db[c] = dl.sum();
        }
        ps.grad_mut(self.head_weight)
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(g, d)| *g += d);
        ps.grad_mut(self.head_bias)
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, d)| *g += d);

        // dX[c][n,d,i,j] = dlogit[n,c] * w[c,d] / area
        let head_grad = |c: usize, d: usize| -> Tensor4 {
            let n = dlogits.nrows();
            Tensor4::from_shape_fn((n, d, h, wd), |(b, ch, _, _)| dlogits[[b, c]] * w[[c, ch]] / area)
        };
        let ch = out.features.dim().1;
        let mut df = match self.config.attention {
            AttentionMode::Baseline | AttentionMode::RoiOnly => {
                let mut dx = head_grad(0, ch);
                for c in 1..k {
                    dx += &head_grad(c, ch);
                }
                if let (Some(p), Some(rc)) = (&self.roi_apam, &cache.roi) {
                    apam_backward(ps, p, rc, &dx)
                } else {
                    dx
                }
            }
            AttentionMode::PriorOnly => {
                let mut df = Tensor4::zeros(out.features.raw_dim());
                for c in 0..k {
                    df += &apam_backward(ps, self.prior_params(c), &cache.priors[c], &head_grad(c, ch));
                }
                df
            }
            AttentionMode::PriorAndRoi => {
                let mut df = Tensor4::zeros(out.features.raw_dim());
                let mut d_roi = Tensor4::zeros(out.features.raw_dim());
                for c in 0..k {
                    let (dr, dp) = crate::nn::split_channels(&head_grad(c, 2 * ch), ch);
                    d_roi += &dr;
                    df += &apam_backward(ps, self.prior_params(c), &cache.priors[c], &dp);
                }
                let p = self.roi_apam.as_ref().expect("roi branch");
                df += &apam_backward(ps, p, cache.roi.as_ref().expect("roi cache"), &d_roi);
                df
            }
        };

        match (&self.fpn, &cache.fpn) {
            (Some(f), Some(fc)) => {
                let (d14, d7) = f.backward(ps, fc, &df);
                self.backbone.backward(ps, &cache.backbone, Some(&d14), &d7);
            }
            _ => {
                df = df.as_standard_layout().into_owned();
                self.backbone.backward(ps, &cache.backbone, None, &df);
            }
        }
    }

    /// `cam[n,i,j] = sum_d w[c,d] X[c][n,d,i,j]` (bias excluded).
    pub fn cam(&self, ps: &ParamStore, out: &Output, class: usize) -> Array3<f64> {
        cam_from(out.head_inputs.get(class), self.head_weights(ps).row(class))
    }
}

/// Class activation map of one head over a batch: `N x h x w`.
pub fn cam_from(x: &Tensor4, w: ArrayView1<f64>) -> Array3<f64> {
    let (n, d, h, wd) = x.dim();
    assert_eq!(d, w.len(), "head width mismatch");
    let mut out = Array3::zeros((n, h, wd));
    for b in 0..n {
        let mut o = out.index_axis_mut(Axis(0), b);
        for ch in 0..d {
            o.scaled_add(w[ch], &x.slice(s![b, ch, .., ..]));
        }
    }
    out
}

/// Network plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let net = Network::new(config, &mut store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            net,
            store,
        })
    }

    pub fn forward_train(&mut self, input: ModelInput) -> Result<(Output, ForwardCache)> {
        self.net.forward(&mut Pass::Train(&mut self.store), input)
    }

    pub fn forward_eval(&self, input: ModelInput) -> Result<Output> {
        Ok(self.net.forward(&mut Pass::Eval(&self.store), input)?.0)
    }

    pub fn backward(&mut self, out: &Output, cache: &ForwardCache, dlogits: &Array2<f64>) {
        self.net.backward(&mut self.store, out, cache, dlogits)
    }

    pub fn cam(&self, out: &Output, class: usize) -> Array3<f64> {
        self.net.cam(&self.store, out, class)
    }

    pub fn head_bias(&self, class: usize) -> f64 {
        self.net.head_biases(&self.store)[class]
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_section(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in other.entries().iter().filter(|e| e.name.starts_with(prefix)) {
            let id = self
                .store
                .id(&e.name)
                .ok_or_else(|| Error::Config(format!("tensor {} has no counterpart", e.name)))?;
            if self.store.value(id).shape() != e.value.shape() {
                return Err(Error::Shape(format!("tensor {} has shape {:?}", e.name, e.value.shape())));
            }
            self.store.value_mut(id).assign(&e.value);
            copied += 1;
        }
        Ok(copied)
    }
}
