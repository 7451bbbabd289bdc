//! Anatomical prior attention.
//!
//! Given features `F` (`N x C x H x W`) and a mask `M` (`N x 1 x H x W`):
//!
//! ```text
//! Fm = F * M
//! W  = CB5( CB1(avg F) + CB2(max F) + CB3(avg Fm) + CB4(max Fm) )
//! A  = W * F + (1 - W) * Fm
//! ```
//!
//! Each `CB` is a bias-free 1x1 convolution, batch norm and an activation
//! (leaky ReLU 0.2 for CB1..CB4, sigmoid for CB5). `W` is per channel, so `A`
//! is a channel-wise convex blend of `F` and `Fm`.

use ndarray::{Array4, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward, leaky_relu,
    leaky_relu_backward, sigmoid, sigmoid_backward, BatchNorm2d, BnCache, Conv2d, ParamStore, Pass, Tensor4,
};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn hidden_width(channels: usize) -> usize {
    (channels / 16).max(8)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockAct {
    Leaky(f64),
    Sigmoid,
}

/// 1x1 convolution (no bias), batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: BlockAct,
}

pub struct BlockCache {
    input: Tensor4,
    bn: BnCache,
    /// Pre-activation for leaky ReLU, post-activation for sigmoid.
    act: Tensor4,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, act: BlockAct, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, 1, 1, 0, false, rng),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), cout),
            act,
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: &Tensor4) -> Result<(Tensor4, BlockCache)> {
        let z = self.conv.forward(pass.store(), x)?;
        let (b, bn) = self.bn.forward(pass, &z)?;
        let (y, act) = match self.act {
            BlockAct::Leaky(s) => (leaky_relu(&b, s), b),
            BlockAct::Sigmoid => {
                let y = sigmoid(&b);
                (y.clone(), y)
            }
        };
        Ok((
            y,
            BlockCache {
                input: x.clone(),
                bn,
                act,
            },
        ))
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &BlockCache, dy: &Tensor4) -> Tensor4 {
        let db = match self.act {
            BlockAct::Leaky(s) => leaky_relu_backward(&cache.act, dy, s),
            BlockAct::Sigmoid => sigmoid_backward(&cache.act, dy),
        };
        let dz = self.bn.backward(ps, &cache.bn, &db);
        self.conv.backward(ps, &cache.input, &dz)
    }
}

/// The five blocks of one attention module.
#[derive(Clone, Debug)]
pub struct ApamParams {
    pub blocks: [ConvBlock; 5],
    pub channels: usize,
    pub hidden: usize,
}

impl ApamParams {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = hidden_width(channels);
        let leaky = BlockAct::Leaky(LEAKY_SLOPE);
        let mk = |ps: &mut ParamStore, i: usize, cin, cout, act, rng: &mut R| {
            ConvBlock::new(ps, &format!("{name}.cb{i}"), cin, cout, act, rng)
        };
        let blocks = [
            mk(ps, 1, channels, hidden, leaky, rng),
            mk(ps, 2, channels, hidden, leaky, rng),
            mk(ps, 3, channels, hidden, leaky, rng),
            mk(ps, 4, channels, hidden, leaky, rng),
            mk(ps, 5, hidden, channels, BlockAct::Sigmoid, rng),
        ];
        Self {
            blocks,
            channels,
            hidden,
        }
    }
}

/// Per-channel pooled statistics, each `N x C x 1 x 1`.
#[derive(Clone, Debug)]
pub struct Descriptors {
    pub f_avg: Tensor4,
    pub f_max: Tensor4,
    pub m_avg: Tensor4,
    pub m_max: Tensor4,
    f_arg: ndarray::Array2<usize>,
    m_arg: ndarray::Array2<usize>,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub attention: Tensor4,
    /// `N x C x 1 x 1`, each entry in (0, 1).
    pub weight: Tensor4,
    pub masked: Tensor4,
}

pub struct ApamCache {
    features: Tensor4,
    mask: Tensor4,
    masked: Tensor4,
    weight: Tensor4,
    desc: Descriptors,
    weight_cache: WeightCache,
}

pub struct WeightCache {
    blocks: Vec<BlockCache>,
}

fn check_mask(f: &Tensor4, m: &Tensor4) -> Result<()> {
    let (n, _, h, w) = f.dim();
    if m.dim() != (n, 1, h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match features {:?}",
            m.dim(),
            f.dim()
        )));
    }
    Ok(())
}

/// `Fm[n,c,i,j] = F[n,c,i,j] * M[n,0,i,j]`.
pub fn apply_mask(f: &Tensor4, m: &Tensor4) -> Result<Tensor4> {
    check_mask(f, m)?;
    let mut out = f.clone();
    for (mut fb, mb) in out.outer_iter_mut().zip(m.outer_iter()) {
        let mb = mb.index_axis(Axis(0), 0);
        for mut ch in fb.outer_iter_mut() {
            ch.zip_mut_with(&mb, |v, &k| *v *= k);
        }
    }
    Ok(out)
}

pub fn pool_descriptors(f: &Tensor4, fm: &Tensor4) -> Result<Descriptors> {
    if f.dim() != fm.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", f.dim(), fm.dim())));
    }
    let (f_max, f_arg) = global_max_pool(f);
    let (m_max, m_arg) = global_max_pool(fm);
    Ok(Descriptors {
        f_avg: global_avg_pool(f),
        f_max,
        m_avg: global_avg_pool(fm),
        m_max,
        f_arg,
        m_arg,
    })
}

pub fn compute_weight(pass: &mut Pass, desc: &Descriptors, params: &ApamParams) -> Result<(Tensor4, WeightCache)> {
    let inputs = [&desc.f_avg, &desc.f_max, &desc.m_avg, &desc.m_max];
    let mut caches = Vec::with_capacity(5);
    let mut sum: Option<Tensor4> = None;
    for (block, x) in params.blocks[..4].iter().zip(inputs) {
        let (y, c) = block.forward(pass, x)?;
        caches.push(c);
        sum = Some(match sum {
            None => y,
            Some(s) => s + y,
        });
    }
    let (w, c5) = params.blocks[4].forward(pass, &sum.expect("four blocks"))?;
    caches.push(c5);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention weight".into()));
    }
    Ok((w, WeightCache { blocks: caches }))
}

/// `A = W * F + (1 - W) * Fm`, `W` broadcast over space.
pub fn attend(f: &Tensor4, fm: &Tensor4, w: &Tensor4) -> Tensor4 {
    let (n, c, h, wd) = f.dim();
    Array4::from_shape_fn((n, c, h, wd), |(b, ci, i, j)| {
        let wv = w[[b, ci, 0, 0]];
        wv * f[[b, ci, i, j]] + (1.0 - wv) * fm[[b, ci, i, j]]
    })
}

pub fn apam_forward(
    pass: &mut Pass,
    f: &Tensor4,
    m: &Tensor4,
    params: &ApamParams,
) -> Result<(AttentionOutput, ApamCache)> {
    if f.len_of(Axis(1)) != params.channels {
        return Err(Error::Shape(format!(
            "attention module expects {} channels, got {}",
            params.channels,
            f.len_of(Axis(1))
        )));
    }
    let fm = apply_mask(f, m)?;
    let desc = pool_descriptors(f, &fm)?;
    let (w, weight_cache) = compute_weight(pass, &desc, params)?;
    let a = attend(f, &fm, &w);
    Ok((
        AttentionOutput {
            attention: a,
            weight: w.clone(),
            masked: fm.clone(),
        },
        ApamCache {
            features: f.clone(),
            mask: m.clone(),
            masked: fm,
            weight: w,
            desc,
            weight_cache,
        },
    ))
}

/// Accumulates parameter gradients and returns `dL/dF`.
pub fn apam_backward(ps: &mut ParamStore, params: &ApamParams, cache: &ApamCache, da: &Tensor4) -> Tensor4 {
    let (f, fm, w) = (&cache.features, &cache.masked, &cache.weight);
    let (n, c, h, wd) = f.dim();
    let mut dw = Array4::<f64>::zeros((n, c, 1, 1));
    let mut df = Tensor4::zeros(f.raw_dim());
    let mut dfm = Tensor4::zeros(f.raw_dim());
    for b in 0..n {
        for ci in 0..c {
            let wv = w[[b, ci, 0, 0]];
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..wd {
                    let g = da[[b, ci, i, j]];
                    acc += g * (f[[b, ci, i, j]] - fm[[b, ci, i, j]]);
                    df[[b, ci, i, j]] = g * wv;
                    dfm[[b, ci, i, j]] = g * (1.0 - wv);
                }
            }
            dw[[b, ci, 0, 0]] = acc;
        }
    }

    let caches = &cache.weight_cache.blocks;
    let ds = params.blocks[4].backward(ps, &caches[4], &dw);
    let d_desc: Vec<Tensor4> = (0..4).map(|i| params.blocks[i].backward(ps, &caches[i], &ds)).collect();
    let hw = (h, wd);
    df += &global_avg_pool_backward(&d_desc[0], hw);
    df += &global_max_pool_backward(&d_desc[1], &cache.desc.f_arg, hw);
    dfm += &global_avg_pool_backward(&d_desc[2], hw);
    dfm += &global_max_pool_backward(&d_desc[3], &cache.desc.m_arg, hw);

    // Fm = F * M
    for b in 0..n {
        let mb = cache.mask.slice(ndarray::s![b, 0, .., ..]);
        for ci in 0..c {
            Zip::from(df.slice_mut(ndarray::s![b, ci, .., ..]))
                .and(dfm.slice(ndarray::s![b, ci, .., ..]))
                .and(mb)
                .for_each(|d, &g, &m| *d += g * m);
        }
    }
    df
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use crate::nn::ParamKind;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, seed: u64) -> (ParamStore, ApamParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let p = ApamParams::new(&mut ps, "apam", c, &mut rng);
        // move BN affine and running stats off their defaults
        for e in ps.entries_mut() {
            if e.name.ends_with("gamma") || e.name.ends_with("running_var") {
                e.value.mapv_inplace(|_| rng.random_range(0.5..1.5));
            } else if e.name.ends_with("beta") || e.name.ends_with("running_mean") {
                e.value.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
        }
        (ps, p, rng)
    }

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor4 {
        Array4::from_shape_simple_fn(d, || rng.random_range(lo..hi))
    }

    #[test]
    fn apply_mask_example() {
        let f = ndarray::array![[1.0, 2.0], [3.0, 4.0]].into_shape_with_order((1, 1, 2, 2)).unwrap();
        let m = ndarray::array![[1.0, 0.0], [0.0, 1.0]].into_shape_with_order((1, 1, 2, 2)).unwrap();
        let fm = apply_mask(&f, &m).unwrap();
        assert_eq!(fm.iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 4.0]);
        assert!(apply_mask(&f, &Array4::zeros((1, 1, 3, 2))).is_err());
    }

    #[test]
    fn descriptor_examples() {
        let f = ndarray::array![[1.0, 2.0], [3.0, 4.0]].into_shape_with_order((1, 1, 2, 2)).unwrap();
        let d = pool_descriptors(&f, &Array4::zeros((1, 1, 2, 2))).unwrap();
        assert_eq!((d.f_avg[[0, 0, 0, 0]], d.f_max[[0, 0, 0, 0]]), (2.5, 4.0));
        assert_eq!((d.m_avg[[0, 0, 0, 0]], d.m_max[[0, 0, 0, 0]]), (0.0, 0.0));
    }

    #[test]
    fn attend_examples() {
        let f = Array4::from_elem((1, 2, 3, 3), 2.0);
        let fm = Array4::zeros((1, 2, 3, 3));
        let half = Array4::from_elem((1, 2, 1, 1), 0.5);
        assert!(attend(&f, &fm, &half).iter().all(|&v| v == 1.0));
        assert_eq!(attend(&f, &fm, &Array4::ones((1, 2, 1, 1))), f);
        assert_eq!(attend(&f, &fm, &Array4::zeros((1, 2, 1, 1))), fm);
    }

    #[test]
    fn zero_weights_give_bn_bias_path() {
        let (mut ps, p, _) = setup(4, 1);
        for e in ps.entries_mut() {
            if e.name.ends_with("conv.weight") {
                e.value.fill(0.0);
            }
        }
        let f = Array4::zeros((1, 4, 3, 3));
        let m = Array4::zeros((1, 1, 3, 3));
        let (out, _) = apam_forward(&mut Pass::Eval(&ps), &f, &m, &p).unwrap();
        // CB5 sees a zero conv output; its BN maps 0 to beta - gamma*mean/sqrt(var+eps)
        let bn = &p.blocks[4].bn;
        for ci in 0..4 {
            let (g, b) = (ps.value(bn.gamma)[ci], ps.value(bn.beta)[ci]);
            let (rm, rv) = (ps.value(bn.running_mean)[ci], ps.value(bn.running_var)[ci]);
            let z = g * (0.0 - rm) / (rv + crate::nn::BN_EPS).sqrt() + b;
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((out.weight[[0, ci, 0, 0]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_is_invariant_to_f_when_cb1_cb2_vanish() {
        let (mut ps, p, mut rng) = setup(4, 2);
        for blk in &p.blocks[..2] {
            ps.value_mut(blk.conv.weight).fill(0.0);
        }
        let f = rand4(&mut rng, (1, 4, 3, 3), -1.0, 1.0);
        let m = Array4::zeros((1, 1, 3, 3));
        let (a, _) = apam_forward(&mut Pass::Eval(&ps), &f, &m, &p).unwrap();
        let (b, _) = apam_forward(&mut Pass::Eval(&ps), &(&f * 2.0), &m, &p).unwrap();
        assert_eq!(a.weight, b.weight);
    }

    #[test]
    fn training_rejects_single_item_batches() {
        let (mut ps, p, mut rng) = setup(4, 3);
        let f = rand4(&mut rng, (1, 4, 3, 3), -1.0, 1.0);
        let m = Array4::ones((1, 1, 3, 3));
        assert!(apam_forward(&mut Pass::Train(&mut ps), &f, &m, &p).is_err());
        assert!(apam_forward(&mut Pass::Eval(&ps), &f, &m, &p).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut ps, p, mut rng) = setup(4, 4);
        let f = rand4(&mut rng, (2, 4, 5, 5), -1.0, 1.0);
        let m = rand4(&mut rng, (2, 1, 5, 5), 0.0, 1.0);
        let loss = |ps: &mut ParamStore, f: &Tensor4| {
            let (o, _) = apam_forward(&mut Pass::Train(ps), f, &m, &p).unwrap();
            o.attention.mapv(|v| v * v).sum()
        };
        ps.zero_grads();
        let (o, cache) = apam_forward(&mut Pass::Train(&mut ps), &f, &m, &p).unwrap();
        let df = apam_backward(&mut ps, &p, &cache, &(&o.attention * 2.0));

        let mut x = f.iter().copied().collect::<Vec<_>>();
        let err = max_rel_error(&mut x, df.as_slice().unwrap(), 1e-4, |v| {
            let ft = Array4::from_shape_vec(f.raw_dim(), v.to_vec()).unwrap();
            loss(&mut ps.clone(), &ft)
        });
        assert!(err < 1e-4, "dF rel error {err}");

        let ids: Vec<_> = ps.ids().filter(|&id| ps.entry(id).kind == ParamKind::Weight).collect();
        for id in ids {
            let analytic = ps.grad(id).iter().copied().collect::<Vec<_>>();
            let mut vals = ps.value(id).iter().copied().collect::<Vec<_>>();
            let mut probe = ps.clone();
            let err = max_rel_error(&mut vals, &analytic, 1e-4, |v| {
                probe.value_mut(id).iter_mut().zip(v).for_each(|(a, &b)| *a = b);
                loss(&mut probe.clone(), &f)
            });
            assert!(err < 1e-4, "{} rel error {err}", ps.entry(id).name);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn convex_sandwich_and_constant_masks(seed in 0u64..1000, mval in prop_oneof![Just(0.0), Just(0.25), Just(1.0)]) {
            let (ps, p, mut rng) = setup(3, seed);
            let f = rand4(&mut rng, (2, 3, 4, 4), -2.0, 2.0);
            let m = rand4(&mut rng, (2, 1, 4, 4), 0.0, 1.0);
            let (o, _) = apam_forward(&mut Pass::Eval(&ps), &f, &m, &p).unwrap();
            prop_assert_eq!(o.attention.dim(), f.dim());
            prop_assert!(o.weight.iter().all(|&w| w > 0.0 && w < 1.0));
            for ((a, fv), fmv) in o.attention.iter().zip(f.iter()).zip(o.masked.iter()) {
                prop_assert!(*a >= fv.min(*fmv) - 1e-12 && *a <= fv.max(*fmv) + 1e-12);
            }
            let mc = Array4::from_elem((2, 1, 4, 4), mval);
            let (o, _) = apam_forward(&mut Pass::Eval(&ps), &f, &mc, &p).unwrap();
            for ((b, c, i, j), &a) in o.attention.indexed_iter() {
                let w = o.weight[[b, c, 0, 0]];
                let expect = (w + (1.0 - w) * mval) * f[[b, c, i, j]];
                prop_assert!((a - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }
}
