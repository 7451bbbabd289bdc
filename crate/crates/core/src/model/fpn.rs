use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{concat_channels, split_channels, upsample_nearest2, upsample_nearest2_backward, Conv2d, ParamStore, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpnMode {
    None,
    Additive,
    Concat,
}

impl FpnMode {
    pub const ALL: [FpnMode; 3] = [FpnMode::None, FpnMode::Additive, FpnMode::Concat];
}

/// Two-level pyramid: the 7x7 top is projected, upsampled x2 (nearest) and
/// merged with the projected 14x14 lateral, then smoothed by a 3x3 conv.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub mode: FpnMode,
    pub lateral: Conv2d,
    pub top: Conv2d,
    pub smooth: Conv2d,
    pub channels: usize,
}

pub struct FpnCache {
    c14: Tensor4,
    c7: Tensor4,
    merged: Tensor4,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        mode: FpnMode,
        c14: usize,
        c7: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let merged = match mode {
            FpnMode::None => return Err(Error::Config("no pyramid requested".into())),
            FpnMode::Additive => channels,
            FpnMode::Concat => 2 * channels,
        };
        Ok(Self {
            mode,
            lateral: Conv2d::new(ps, "fpn/lateral", c14, channels, 1, 1, 0, true, rng),
            top: Conv2d::new(ps, "fpn/top", c7, channels, 1, 1, 0, true, rng),
            smooth: Conv2d::new(ps, "fpn/smooth", merged, channels, 3, 1, 1, true, rng),
            channels,
        })
    }

    /// Merged tensor before smoothing; `channels` or `2 * channels` wide.
    pub fn merge(&self, ps: &ParamStore, c14: &Tensor4, c7: &Tensor4) -> Result<Tensor4> {
        let (n, _, h, w) = c14.dim();
        let (n7, _, h7, w7) = c7.dim();
        if n != n7 || h != 2 * h7 || w != 2 * w7 {
            return Err(Error::Shape(format!(
                "pyramid stages {:?} and {:?} are not a x2 pair",
                c14.dim(),
                c7.dim()
            )));
        }
        let lat = self.lateral.forward(ps, c14)?;
        let up = upsample_nearest2(&self.top.forward(ps, c7)?);
        match self.mode {
            FpnMode::Additive => Ok(lat + up),
            FpnMode::Concat => concat_channels(&lat, &up),
            FpnMode::None => unreachable!("constructed with a merge mode"),
        }
    }

    pub fn forward(&self, ps: &ParamStore, c14: &Tensor4, c7: &Tensor4) -> Result<(Tensor4, FpnCache)> {
        let merged = self.merge(ps, c14, c7)?;
        let out = self.smooth.forward(ps, &merged)?;
        Ok((
            out,
            FpnCache {
                c14: c14.clone(),
                c7: c7.clone(),
                merged,
            },
        ))
    }

    /// Returns gradients at the 14x14 and 7x7 inputs.
    pub fn backward(&self, ps: &mut ParamStore, cache: &FpnCache, dy: &Tensor4) -> (Tensor4, Tensor4) {
        let dm = self.smooth.backward(ps, &cache.merged, dy);
        let (dlat, dup) = match self.mode {
            FpnMode::Additive => (dm.clone(), dm),
            FpnMode::Concat => split_channels(&dm, self.channels),
            FpnMode::None => unreachable!("constructed with a merge mode"),
        };
        let d14 = self.lateral.backward(ps, &cache.c14, &dlat);
        let d7 = self.top.backward(ps, &cache.c7, &upsample_nearest2_backward(&dup));
        (d14, d7)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (mode, merged) in [(FpnMode::Additive, 6), (FpnMode::Concat, 12)] {
            let mut ps = ParamStore::new();
            let fpn = Fpn::new(&mut ps, mode, 5, 7, 6, &mut rng).unwrap();
            let c14 = Tensor4::from_shape_simple_fn((2, 5, 14, 14), || rng.random_range(-1.0..1.0));
            let c7 = Tensor4::from_shape_simple_fn((2, 7, 7, 7), || rng.random_range(-1.0..1.0));
            assert_eq!(fpn.merge(&ps, &c14, &c7).unwrap().dim(), (2, merged, 14, 14));
            let (y, _) = fpn.forward(&ps, &c14, &c7).unwrap();
            assert_eq!(y.dim(), (2, 6, 14, 14));
            assert!(fpn.forward(&ps, &c14, &Tensor4::zeros((2, 7, 6, 6))).is_err());
        }
        assert!(Fpn::new(&mut ParamStore::new(), FpnMode::None, 1, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [FpnMode::Additive, FpnMode::Concat] {
            let mut ps = ParamStore::new();
            let fpn = Fpn::new(&mut ps, mode, 3, 4, 2, &mut rng).unwrap();
            let c14 = Tensor4::from_shape_simple_fn((1, 3, 4, 4), || rng.random_range(-1.0..1.0));
            let c7 = Tensor4::from_shape_simple_fn((1, 4, 2, 2), || rng.random_range(-1.0..1.0));
            let (y, cache) = fpn.forward(&ps, &c14, &c7).unwrap();
            let (d14, d7) = fpn.backward(&mut ps, &cache, &y.mapv(|v| 2.0 * v));
            let loss = |a: &Tensor4, b: &Tensor4| fpn.forward(&ps, a, b).unwrap().0.mapv(|v| v * v).sum();
            for (x, dx, which) in [(&c14, &d14, 0), (&c7, &d7, 1)] {
                let mut v = x.iter().copied().collect::<Vec<_>>();
                let err = crate::nn::gradcheck::max_rel_error(&mut v, dx.as_slice().unwrap(), 1e-5, |v| {
                    let t = Tensor4::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
                    if which == 0 { loss(&t, &c7) } else { loss(&c14, &t) }
                });
                assert!(err < 1e-6, "{mode:?} input {which}: {err}");
            }
        }
    }
}
