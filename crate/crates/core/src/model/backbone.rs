use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, concat_channels, relu, relu_backward, BatchNorm2d, BnCache, Conv2d, MaxPool2d,
    ParamStore, Pass, Tensor4,
};

/// The two tapped stages: 14x14 and 7x7 for a 224 input.
pub struct Taps {
    pub c14: Tensor4,
    pub c7: Tensor4,
}

/// Convolution (no bias), batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

pub struct CbrCache {
    x: Tensor4,
    bn: BnCache,
    y: Tensor4,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, k, stride, pad, false, rng),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: &Tensor4) -> Result<(Tensor4, CbrCache)> {
        let z = self.conv.forward(pass.store(), x)?;
        let (b, bn) = self.bn.forward(pass, &z)?;
        let y = relu(&b);
        Ok((
            y.clone(),
            CbrCache {
                x: x.clone(),
                bn,
                y,
            },
        ))
    }

    /// Returns the input gradient unless `need_dx` is false.
    pub fn backward(&self, ps: &mut ParamStore, c: &CbrCache, dy: &Tensor4, need_dx: bool) -> Option<Tensor4> {
        let db = relu_backward(&c.y, dy);
        let dz = self.bn.backward(ps, &c.bn, &db);
        if need_dx {
            Some(self.conv.backward(ps, &c.x, &dz))
        } else {
            self.conv.backward_params(ps, &c.x, &dz);
            None
        }
    }
}

/// Batch norm, ReLU, convolution (DenseNet pre-activation order).
#[derive(Clone, Debug)]
pub struct BnReluConv {
    pub bn: BatchNorm2d,
    pub conv: Conv2d,
}

pub struct BrcCache {
    bn: BnCache,
    r: Tensor4,
}

impl BnReluConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            bn: BatchNorm2d::new(ps, &format!("{name}.norm"), cin),
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, k, 1, pad, false, rng),
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: &Tensor4) -> Result<(Tensor4, BrcCache)> {
        let (b, bn) = self.bn.forward(pass, x)?;
        let r = relu(&b);
        let y = self.conv.forward(pass.store(), &r)?;
        Ok((y, BrcCache { bn, r }))
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &BrcCache, dy: &Tensor4) -> Tensor4 {
        let dr = self.conv.backward(ps, &c.r, dy);
        let db = relu_backward(&c.r, &dr);
        self.bn.backward(ps, &c.bn, &db)
    }
}

/// Four strided conv blocks: 224 -> 56 -> 28 -> 14 -> 7.
#[derive(Clone, Debug)]
pub struct ToyCnn {
    pub blocks: [ConvBnRelu; 4],
}

pub const TOY_WIDTHS: [usize; 4] = [16, 32, 64, 64];

impl ToyCnn {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R) -> Self {
        let [a, b, c, d] = TOY_WIDTHS;
        Self {
            blocks: [
                ConvBnRelu::new(ps, "backbone/block1", 3, a, 5, 4, 2, rng),
                ConvBnRelu::new(ps, "backbone/block2", a, b, 3, 2, 1, rng),
                ConvBnRelu::new(ps, "backbone/block3", b, c, 3, 2, 1, rng),
                ConvBnRelu::new(ps, "backbone/block4", c, d, 3, 2, 1, rng),
            ],
        }
    }
}

/// DenseNet-BC layout. `DenseNetConfig::default()` is DenseNet-121.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseNetConfig {
    pub growth: usize,
    pub blocks: Vec<usize>,
    pub bn_size: usize,
    pub init_features: usize,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self {
            growth: 32,
            blocks: vec![6, 12, 24, 16],
            bn_size: 4,
            init_features: 64,
        }
    }
}

impl DenseNetConfig {
    /// Channels after each dense block (before its transition).
    pub fn block_channels(&self) -> Vec<usize> {
        let mut c = self.init_features;
        let mut out = Vec::new();
        for (i, &n) in self.blocks.iter().enumerate() {
            c += n * self.growth;
            out.push(c);
            if i + 1 < self.blocks.len() {
                c /= 2;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 4 || self.blocks.contains(&0) || self.growth == 0 || self.bn_size == 0 {
            return Err(Error::Config("densenet needs four non-empty blocks and positive widths".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub first: BnReluConv,
    pub second: BnReluConv,
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub brc: BnReluConv,
}

#[derive(Clone, Debug)]
pub struct DenseNet {
    pub cfg: DenseNetConfig,
    pub stem: ConvBnRelu,
    pub pool: MaxPool2d,
    pub blocks: Vec<Vec<DenseLayer>>,
    pub transitions: Vec<Transition>,
    pub final_norm: BatchNorm2d,
}

impl DenseNet {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &DenseNetConfig, rng: &mut R) -> Self {
        let stem = ConvBnRelu::new(ps, "backbone/conv0", 3, cfg.init_features, 7, 2, 3, rng);
        let mut c = cfg.init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &n) in cfg.blocks.iter().enumerate() {
            let layers = (0..n)
                .map(|li| {
                    let name = format!("backbone/denseblock{}.layer{}", bi + 1, li + 1);
                    let cin = c + li * cfg.growth;
                    let mid = cfg.bn_size * cfg.growth;
                    DenseLayer {
                        first: BnReluConv::new(ps, &format!("{name}.1"), cin, mid, 1, 0, rng),
                        second: BnReluConv::new(ps, &format!("{name}.2"), mid, cfg.growth, 3, 1, rng),
                    }
                })
                .collect();
            blocks.push(layers);
            c += n * cfg.growth;
            if bi + 1 < cfg.blocks.len() {
                let name = format!("backbone/transition{}", bi + 1);
                transitions.push(Transition {
                    brc: BnReluConv::new(ps, &name, c, c / 2, 1, 0, rng),
                });
                c /= 2;
            }
        }
        let final_norm = BatchNorm2d::new(ps, "backbone/norm5", c);
        Self {
            cfg: cfg.clone(),
            stem,
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            blocks,
            transitions,
            final_norm,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Toy(ToyCnn),
    DenseNet(Box<DenseNet>),
}

pub enum BackboneCache {
    Toy(Vec<CbrCache>),
    DenseNet(Box<DenseCache>),
}

pub struct DenseCache {
    stem: CbrCache,
    pool_arg: ndarray::Array4<usize>,
    pool_hw: (usize, usize),
    /// Per block: input channel count and per-layer caches.
    blocks: Vec<(usize, Vec<(BrcCache, BrcCache)>)>,
    transitions: Vec<(BrcCache, (usize, usize))>,
    final_bn: BnCache,
    final_relu: Tensor4,
}

impl Backbone {
    /// Channel counts of the 14x14 and 7x7 taps.
    pub fn tap_channels(&self) -> (usize, usize) {
        match self {
            Backbone::Toy(_) => (TOY_WIDTHS[2], TOY_WIDTHS[3]),
            Backbone::DenseNet(d) => {
                let bc = d.cfg.block_channels();
                (bc[2], bc[3])
            }
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: &Tensor4) -> Result<(Taps, BackboneCache)> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != w || h % 32 != 0 || h == 0 {
            return Err(Error::Shape(format!(
                "backbone expects N x 3 x S x S input with S a multiple of 32, got {:?}",
                x.dim()
            )));
        }
        match self {
            Backbone::Toy(t) => {
                let mut caches = Vec::with_capacity(4);
                let mut cur = x.clone();
                let mut c14 = None;
                for (i, b) in t.blocks.iter().enumerate() {
                    let (y, cache) = b.forward(pass, &cur)?;
                    caches.push(cache);
                    if i == 2 {
                        c14 = Some(y.clone());
                    }
                    cur = y;
                }
                Ok((
                    Taps {
                        c14: c14.expect("four blocks"),
                        c7: cur,
                    },
                    BackboneCache::Toy(caches),
                ))
            }
            Backbone::DenseNet(d) => {
                let (taps, cache) = dense_forward(d, pass, x)?;
                Ok((taps, BackboneCache::DenseNet(Box::new(cache))))
            }
        }
    }

    /// Accumulates parameter gradients given gradients at both taps.
    pub fn backward(&self, ps: &mut ParamStore, cache: &BackboneCache, d14: Option<&Tensor4>, d7: &Tensor4) {
        match (self, cache) {
            (Backbone::Toy(t), BackboneCache::Toy(caches)) => {
                let mut g = d7.clone();
                for i in (0..4).rev() {
                    if i == 2 {
                        if let Some(d) = d14 {
                            g += d;
                        }
                    }
                    match t.blocks[i].backward(ps, &caches[i], &g, i > 0) {
                        Some(dx) => g = dx,
                        None => break,
                    }
                }
            }
            (Backbone::DenseNet(d), BackboneCache::DenseNet(c)) => dense_backward(d, ps, c, d14, d7),
            _ => unreachable!("cache built by a different backbone"),
        }
    }
}

fn dense_forward(d: &DenseNet, pass: &mut Pass, x: &Tensor4) -> Result<(Taps, DenseCache)> {
    let (s, stem) = d.stem.forward(pass, x)?;
    let pool_hw = (s.dim().2, s.dim().3);
    let (mut cur, pool_arg) = d.pool.forward(&s);
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    let mut c14 = None;
    for (bi, layers) in d.blocks.iter().enumerate() {
        let cin = cur.len_of(Axis(1));
        let mut lc = Vec::with_capacity(layers.len());
        for layer in layers {
            let (m, c1) = layer.first.forward(pass, &cur)?;
            let (new, c2) = layer.second.forward(pass, &m)?;
            cur = concat_channels(&cur, &new)?;
            lc.push((c1, c2));
        }
        blocks.push((cin, lc));
        if bi == 2 {
            c14 = Some(cur.clone());
        }
        if let Some(t) = d.transitions.get(bi) {
            let (y, tc) = t.brc.forward(pass, &cur)?;
            let hw = (y.dim().2, y.dim().3);
            cur = avg_pool2(&y);
            transitions.push((tc, hw));
        }
    }
    let (b, final_bn) = d.final_norm.forward(pass, &cur)?;
    let out = relu(&b);
    Ok((
        Taps {
            c14: c14.expect("four blocks"),
            c7: out.clone(),
        },
        DenseCache {
            stem,
            pool_arg,
            pool_hw,
            blocks,
            transitions,
            final_bn,
            final_relu: out,
        },
    ))
}

fn dense_backward(d: &DenseNet, ps: &mut ParamStore, c: &DenseCache, d14: Option<&Tensor4>, d7: &Tensor4) {
    let db = relu_backward(&c.final_relu, d7);
    let mut g = d.final_norm.backward(ps, &c.final_bn, &db);
    for bi in (0..d.blocks.len()).rev() {
        if let Some(t) = d.transitions.get(bi) {
            let (tc, hw) = &c.transitions[bi];
            let dy = avg_pool2_backward(&g, *hw);
            g = t.brc.backward(ps, tc, &dy);
        }
        if bi == 2 {
            if let Some(d) = d14 {
                g += d;
            }
        }
        // layer l reads a channel prefix of the block output and writes the
        // next `growth` channels
        let (cin, lc) = &c.blocks[bi];
        let growth = d.cfg.growth;
        for (li, layer) in d.blocks[bi].iter().enumerate().rev() {
            let start = cin + li * growth;
            let dnew = g.slice(ndarray::s![.., start..start + growth, .., ..]).to_owned();
            let dm = layer.second.backward(ps, &lc[li].1, &dnew);
            let dprefix = layer.first.backward(ps, &lc[li].0, &dm);
            let mut head = g.slice_mut(ndarray::s![.., ..start, .., ..]);
            head += &dprefix;
        }
        g = g.slice(ndarray::s![.., ..*cin, .., ..]).to_owned();
    }
    let ds = d.pool.backward(&g, &c.pool_arg, c.pool_hw);
    d.stem.backward(ps, &c.stem, &ds, false);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_densenet() -> DenseNetConfig {
        DenseNetConfig {
            growth: 4,
            blocks: vec![1, 2, 2, 1],
            bn_size: 2,
            init_features: 8,
        }
    }

    #[test]
    fn densenet121_channels() {
        assert_eq!(DenseNetConfig::default().block_channels(), vec![256, 512, 1024, 1024]);
    }

    #[test]
    fn toy_shapes_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        let bb = Backbone::Toy(ToyCnn::new(&mut ps, &mut rng));
        let x = Tensor4::from_shape_simple_fn((2, 3, 224, 224), || rng.random_range(-1.0..1.0));
        let (t, _) = bb.forward(&mut Pass::Eval(&ps), &x).unwrap();
        assert_eq!(t.c14.dim(), (2, 64, 14, 14));
        assert_eq!(t.c7.dim(), (2, 64, 7, 7));
        let single = x.slice(ndarray::s![1..2, .., .., ..]).to_owned();
        let (t1, _) = bb.forward(&mut Pass::Eval(&ps), &single).unwrap();
        assert_eq!(t1.c7.index_axis(Axis(0), 0), t.c7.index_axis(Axis(0), 1));
        assert!(bb.forward(&mut Pass::Eval(&ps), &Tensor4::zeros((1, 1, 224, 224))).is_err());
    }

    #[test]
    fn toy_zero_image_zero_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        let toy = ToyCnn::new(&mut ps, &mut rng);
        ps.value_mut(toy.blocks[3].conv.weight).fill(0.0);
        let bb = Backbone::Toy(toy);
        let (t, _) = bb.forward(&mut Pass::Eval(&ps), &Tensor4::zeros((1, 3, 224, 224))).unwrap();
        assert!(t.c7.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_densenet_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let cfg = tiny_densenet();
        let bb = Backbone::DenseNet(Box::new(DenseNet::new(&mut ps, &cfg, &mut rng)));
        let x = Tensor4::from_shape_simple_fn((2, 3, 64, 64), || rng.random_range(-1.0..1.0));
        let (t, _) = bb.forward(&mut Pass::Eval(&ps), &x).unwrap();
        let bc = cfg.block_channels();
        assert_eq!(t.c14.dim(), (2, bc[2], 4, 4));
        assert_eq!(t.c7.dim(), (2, bc[3], 2, 2));
        assert_eq!(bb.tap_channels(), (bc[2], bc[3]));
    }

    /// Finite differences through every backbone parameter of tiny networks.
    fn check_backbone_grads(bb: &Backbone, ps: &mut ParamStore, x: &Tensor4, probe_every: usize) {
        let loss = |ps: &mut ParamStore| {
            let (t, _) = bb.forward(&mut Pass::Train(ps), x).unwrap();
            t.c7.mapv(|v| v * v).sum() + 0.5 * t.c14.mapv(|v| v * v * v).sum()
        };
        ps.zero_grads();
        let (t, cache) = bb.forward(&mut Pass::Train(ps), x).unwrap();
        let d7 = t.c7.mapv(|v| 2.0 * v);
        let d14 = t.c14.mapv(|v| 1.5 * v * v);
        bb.backward(ps, &cache, Some(&d14), &d7);
        let mut worst = (0.0f64, String::new());
        let ids: Vec<_> = ps.ids().filter(|&id| ps.entry(id).kind == crate::nn::ParamKind::Weight).collect();
        for id in ids {
            let n = ps.value(id).len();
            for k in (0..n).step_by(probe_every) {
                let analytic = ps.grad(id).as_slice().unwrap()[k];
                let mut probe = ps.clone();
                let orig = probe.value(id).as_slice().unwrap()[k];
                let h = 1e-5;
                probe.value_mut(id).as_slice_mut().unwrap()[k] = orig + h;
                let lp = loss(&mut probe.clone());
                probe.value_mut(id).as_slice_mut().unwrap()[k] = orig - h;
                let lm = loss(&mut probe.clone());
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                if rel > worst.0 {
                    worst = (rel, ps.entry(id).name.clone());
                }
            }
        }
        assert!(worst.0 < 1e-4, "worst rel error {worst:?}");
    }

    #[test]
    fn densenet_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let bb = Backbone::DenseNet(Box::new(DenseNet::new(&mut ps, &tiny_densenet(), &mut rng)));
        let x = Tensor4::from_shape_simple_fn((2, 3, 64, 64), || rng.random_range(-1.0..1.0));
        check_backbone_grads(&bb, &mut ps, &x, 5);
    }

    #[test]
    fn toy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let bb = Backbone::Toy(ToyCnn::new(&mut ps, &mut rng));
        let x = Tensor4::from_shape_simple_fn((2, 3, 64, 64), || rng.random_range(-1.0..1.0));
        check_backbone_grads(&bb, &mut ps, &x, 97);
    }
}
