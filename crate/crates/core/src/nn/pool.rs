use ndarray::{s, Array2, Array4, Axis};

use super::Tensor4;
use crate::error::{Error, Result};

pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let (n, c, _, _) = x.dim();
    let m = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
    m.into_shape_with_order((n, c, 1, 1)).unwrap()
}

pub fn global_avg_pool_backward(dy: &Tensor4, hw: (usize, usize)) -> Tensor4 {
    let (n, c, _, _) = dy.dim();
    let area = (hw.0 * hw.1) as f64;
    Array4::from_shape_fn((n, c, hw.0, hw.1), |(b, ci, _, _)| dy[[b, ci, 0, 0]] / area)
}

/// Returns the per-channel max and the flat spatial index of the (first) maximum.
pub fn global_max_pool(x: &Tensor4) -> (Tensor4, Array2<usize>) {
    let (n, c, _, w) = x.dim();
    let mut out = Array4::zeros((n, c, 1, 1));
    let mut arg = Array2::zeros((n, c));
    for b in 0..n {
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for ((i, j), &v) in x.slice(s![b, ci, .., ..]).indexed_iter() {
                if v > best {
                    best = v;
                    best_i = i * w + j;
                }
            }
            out[[b, ci, 0, 0]] = best;
            arg[[b, ci]] = best_i;
        }
    }
    (out, arg)
}

pub fn global_max_pool_backward(dy: &Tensor4, arg: &Array2<usize>, hw: (usize, usize)) -> Tensor4 {
    let (n, c, _, _) = dy.dim();
    let mut dx = Array4::zeros((n, c, hw.0, hw.1));
    for b in 0..n {
        for ci in 0..c {
            let k = arg[[b, ci]];
            dx[[b, ci, k / hw.1, k % hw.1]] += dy[[b, ci, 0, 0]];
        }
    }
    dx
}

/// Max pooling with square window; padded cells never win.
#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Returns the pooled tensor and, per output cell, the flat input index of its maximum.
    pub fn forward(&self, x: &Tensor4) -> (Tensor4, Array4<usize>) {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let mut y = Array4::zeros((n, c, ho, wo));
        let mut arg = Array4::zeros((n, c, ho, wo));
        for b in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for ki in 0..self.kernel {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[b, ci, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_i = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        y[[b, ci, oy, ox]] = best;
                        arg[[b, ci, oy, ox]] = best_i;
                    }
                }
            }
        }
        (y, arg)
    }

    pub fn backward(&self, dy: &Tensor4, arg: &Array4<usize>, hw: (usize, usize)) -> Tensor4 {
        let (n, c, _, _) = dy.dim();
        let mut dx = Array4::zeros((n, c, hw.0, hw.1));
        for ((b, ci, oy, ox), &g) in dy.indexed_iter() {
            let k = arg[[b, ci, oy, ox]];
            dx[[b, ci, k / hw.1, k % hw.1]] += g;
        }
        dx
    }
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    Array4::from_shape_fn((n, c, ho, wo), |(b, ci, i, j)| {
        0.25 * (x[[b, ci, 2 * i, 2 * j]]
            + x[[b, ci, 2 * i + 1, 2 * j]]
            + x[[b, ci, 2 * i, 2 * j + 1]]
            + x[[b, ci, 2 * i + 1, 2 * j + 1]])
    })
}

pub fn avg_pool2_backward(dy: &Tensor4, hw: (usize, usize)) -> Tensor4 {
    let (n, c, ho, wo) = dy.dim();
    let mut dx = Array4::zeros((n, c, hw.0, hw.1));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let g = 0.25 * dy[[b, ci, i, j]];
                    dx[[b, ci, 2 * i, 2 * j]] += g;
                    dx[[b, ci, 2 * i + 1, 2 * j]] += g;
                    dx[[b, ci, 2 * i, 2 * j + 1]] += g;
                    dx[[b, ci, 2 * i + 1, 2 * j + 1]] += g;
                }
            }
        }
    }
    dx
}

pub fn upsample_nearest2(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ci, i, j)| x[[b, ci, i / 2, j / 2]])
}

pub fn upsample_nearest2_backward(dy: &Tensor4) -> Tensor4 {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = Array4::zeros((n, c, h2 / 2, w2 / 2));
    for ((b, ci, i, j), &g) in dy.indexed_iter() {
        dx[[b, ci, i / 2, j / 2]] += g;
    }
    dx
}

pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .map_err(|e| Error::Shape(format!("channel concat: {e}")))
}

/// Splits a gradient produced for `concat_channels(a, b)` where `a` had `first` channels.
pub fn split_channels(d: &Tensor4, first: usize) -> (Tensor4, Tensor4) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn global_pools_on_known_channel() {
        let x = array![[1.0, 2.0], [3.0, 4.0]].into_shape_with_order((1, 1, 2, 2)).unwrap();
        assert_eq!(global_avg_pool(&x)[[0, 0, 0, 0]], 2.5);
        let (m, arg) = global_max_pool(&x);
        assert_eq!(m[[0, 0, 0, 0]], 4.0);
        assert_eq!(arg[[0, 0]], 3);
        let dx = global_max_pool_backward(&m.mapv(|_| 1.0), &arg, (2, 2));
        assert_eq!(dx.sum(), 1.0);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Array4::from_elem((1, 2, 3, 3), 0.7);
        let y = upsample_nearest2(&x);
        assert_eq!(y.dim(), (1, 2, 6, 6));
        assert!(y.iter().all(|&v| v == 0.7));
        assert_eq!(upsample_nearest2_backward(&y.mapv(|_| 1.0))[[0, 0, 1, 1]], 4.0);
    }

    #[test]
    fn max_pool_ignores_padding() {
        let x = Array4::from_elem((1, 1, 4, 4), -1.0);
        let pool = MaxPool2d { kernel: 3, stride: 2, pad: 1 };
        let (y, _) = pool.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert!(y.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn avg_pool_adjoint() {
        // <avg(x), g> == <x, avg_backward(g)>
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, i, j)| (c * 16 + i * 4 + j) as f64);
        let g = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, i, j)| 1.0 + (c + i + 2 * j) as f64);
        let lhs = (&avg_pool2(&x) * &g).sum();
        let rhs = (&x * &avg_pool2_backward(&g, (4, 4))).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
