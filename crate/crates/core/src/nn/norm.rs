use ndarray::{Array1, ArrayD, Axis, IxDyn};

use super::{Pass, ParamId, ParamKind, ParamStore, Tensor4};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over the N, H and W axes.
///
/// Training passes normalize with biased batch statistics and fold the
/// unbiased variance into the running estimate; evaluation passes use the
/// running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Tensor4,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let v = |x: f64| ArrayD::from_elem(IxDyn(&[channels]), x);
        Self {
            gamma: ps.add(format!("{name}.gamma"), ParamKind::Weight, v(1.0)),
            beta: ps.add(format!("{name}.beta"), ParamKind::Weight, v(0.0)),
            running_mean: ps.add(format!("{name}.running_mean"), ParamKind::Buffer, v(0.0)),
            running_var: ps.add(format!("{name}.running_var"), ParamKind::Buffer, v(1.0)),
            channels,
        }
    }

    fn vec(ps: &ParamStore, id: ParamId) -> Array1<f64> {
        ps.value(id)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, pass: &mut Pass, x: &Tensor4) -> Result<(Tensor4, BnCache)> {
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let count = n * h * w;
        let (mean, var, batch_stats) = if pass.is_train() {
            if count < 2 {
                return Err(Error::Invalid(
                    "batch statistics are undefined for a single value per channel; \
                     training needs a batch size of at least 2"
                        .into(),
                ));
            }
            let mean = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap().mean_axis(Axis(0)).unwrap();
            let mut var = Array1::<f64>::zeros(c);
            for (ci, v) in var.iter_mut().enumerate() {
                let m = mean[ci];
                let s: f64 = x
                    .index_axis(Axis(1), ci)
                    .iter()
                    .map(|&a| (a - m) * (a - m))
                    .sum();
                *v = s / count as f64;
            }
            if let Pass::Train(ps) = pass {
                let unbias = count as f64 / (count - 1) as f64;
                let rm = ps.value_mut(self.running_mean);
                for (r, &m) in rm.iter_mut().zip(mean.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = ps.value_mut(self.running_var);
                for (r, &v) in rv.iter_mut().zip(var.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
            }
            (mean, var, true)
        } else {
            let ps = pass.store();
            (
                Self::vec(ps, self.running_mean),
                Self::vec(ps, self.running_var),
                false,
            )
        };

        let ps = pass.store();
        let gamma = Self::vec(ps, self.gamma);
        let beta = Self::vec(ps, self.beta);
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = x.clone();
        let mut y = x.clone();
        for ci in 0..c {
            let (m, is) = (mean[ci], inv_std[ci]);
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|a| (a - m) * is);
            let (g, b) = (gamma[ci], beta[ci]);
            y.index_axis_mut(Axis(1), ci)
                .zip_mut_with(&xhat.index_axis(Axis(1), ci), |yv, &xh| *yv = g * xh + b);
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &BnCache, dy: &Tensor4) -> Tensor4 {
        let (n, c, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let gamma = Self::vec(ps, self.gamma);
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        let mut dx = Tensor4::zeros(dy.raw_dim());
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy: f64 = dyc.sum();
            let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            dgamma[ci] = sum_dy_xh;
            dbeta[ci] = sum_dy;
            let scale = gamma[ci] * cache.inv_std[ci];
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            if cache.batch_stats {
                let mean_dy = sum_dy / count;
                let mean_dy_xh = sum_dy_xh / count;
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .and(&xh)
                    .for_each(|d, &g, &x| *d = scale * (g - mean_dy - x * mean_dy_xh));
            } else {
                ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|d, &g| *d = scale * g);
            }
        }
        ps.grad_mut(self.gamma)
            .iter_mut()
            .zip(dgamma.iter())
            .for_each(|(g, d)| *g += d);
        ps.grad_mut(self.beta)
            .iter_mut()
            .zip(dbeta.iter())
            .for_each(|(g, d)| *g += d);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, BatchNorm2d, Tensor4) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 3);
        for (i, g) in ps.value_mut(bn.gamma).iter_mut().enumerate() {
            *g = 0.5 + i as f64;
        }
        ps.value_mut(bn.beta).fill(-0.3);
        let x = Array4::from_shape_simple_fn((3, 3, 2, 2), || rng.random_range(-2.0..2.0));
        (ps, bn, x)
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let (mut ps, bn, x) = setup();
        ps.value_mut(bn.gamma).fill(1.0);
        ps.value_mut(bn.beta).fill(0.0);
        let (y, _) = bn.forward(&mut Pass::Train(&mut ps), &x).unwrap();
        for ci in 0..3 {
            let ch = y.index_axis(Axis(1), ci);
            let m = ch.mean().unwrap();
            let v = ch.mapv(|a| (a - m) * (a - m)).mean().unwrap();
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_value_batch_is_rejected_in_training() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 2);
        let x = Array4::zeros((1, 2, 1, 1));
        assert!(bn.forward(&mut Pass::Train(&mut ps), &x).is_err());
        assert!(bn.forward(&mut Pass::Eval(&ps), &x).is_ok());
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        let (mut ps, bn, x) = setup();
        let weights = Array4::from_shape_fn(x.raw_dim(), |(a, b, c, d)| 1.0 + (a + 2 * b + 3 * c + d) as f64 * 0.1);
        let loss = |ps: &mut ParamStore, x: &Tensor4| -> f64 {
            let (y, _) = bn.forward(&mut Pass::Train(ps), x).unwrap();
            (&y * &y * &weights).sum()
        };
        let (y, cache) = bn.forward(&mut Pass::Train(&mut ps), &x).unwrap();
        let dy = &y * &weights * 2.0;
        let dx = bn.backward(&mut ps, &cache, &dy);
        let mut xv = x.as_slice().unwrap().to_vec();
        let mut scratch = ps.clone();
        let err = max_rel_error(&mut xv, dx.as_slice().unwrap(), 1e-5, |v| {
            let xt = Array4::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
            loss(&mut scratch, &xt)
        });
        assert!(err < 1e-5, "{err}");
    }
}
