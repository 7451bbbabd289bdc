use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;

use super::{fan_in_uniform, ParamId, ParamKind, ParamStore, Tensor4};
use crate::error::{Error, Result};

/// 2-D convolution with square kernel, symmetric zero padding and no dilation.
/// Weight layout is `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = fan_in_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng);
        let weight = ps.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| {
            ps.add(
                format!("{name}.bias"),
                ParamKind::Weight,
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])),
            )
        });
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::Shape(format!(
                "conv kernel {} larger than padded input {hp}x{wp}",
                self.kernel
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn weight_matrix<'a>(&self, ps: &'a ParamStore) -> ArrayView2<'a, f64> {
        ps.value(self.weight)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .expect("conv weight is contiguous")
    }

    fn columns(&self, x: ArrayView3<f64>, ho: usize, wo: usize) -> Array2<f64> {
        if self.is_pointwise() {
            let (c, h, w) = x.dim();
            return x
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
        }
        im2col(x, self.kernel, self.stride, self.pad, ho, wo)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor4) -> Result<Tensor4> {
        let (n, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let wmat = self.weight_matrix(ps);
        let bias = self
            .bias
            .map(|b| ps.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap());
        let mut y = Array4::zeros((n, self.out_ch, ho, wo));
        Zip::from(y.outer_iter_mut())
            .and(x.outer_iter())
            .par_for_each(|mut yn, xn| {
                let cols = self.columns(xn, ho, wo);
                let mut out = wmat.dot(&cols);
                if let Some(b) = &bias {
                    for (mut row, &bv) in out.outer_iter_mut().zip(b.iter()) {
                        row += bv;
                    }
                }
                yn.assign(&out.into_shape_with_order((self.out_ch, ho, wo)).unwrap());
            });
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, ps: &mut ParamStore, x: &Tensor4, dy: &Tensor4) -> Tensor4 {
        self.backward_impl(ps, x, dy, true).expect("input gradient requested")
    }

    /// Accumulates weight/bias gradients only; for layers fed by raw input.
    pub fn backward_params(&self, ps: &mut ParamStore, x: &Tensor4, dy: &Tensor4) {
        self.backward_impl(ps, x, dy, false);
    }

    fn backward_impl(&self, ps: &mut ParamStore, x: &Tensor4, dy: &Tensor4, need_dx: bool) -> Option<Tensor4> {
        let (n, _, h, w) = x.dim();
        let (_, _, ho, wo) = dy.dim();
        let ckk = self.in_ch * self.kernel * self.kernel;
        let wmat = self.weight_matrix(ps).to_owned();
        let wt = wmat.t();

        let per_sample: Vec<(Option<Array3<f64>>, Array2<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xn = x.index_axis(Axis(0), i);
                let dyn_ = dy
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((self.out_ch, ho * wo))
                    .unwrap();
                let cols = self.columns(xn, ho, wo);
                let dw = dyn_.dot(&cols.t());
                let dx = need_dx.then(|| {
                    let dcols = wt.dot(&dyn_);
                    if self.is_pointwise() {
                        dcols.into_shape_with_order((self.in_ch, h, w)).unwrap()
                    } else {
                        col2im(&dcols, self.in_ch, h, w, self.kernel, self.stride, self.pad, ho, wo)
                    }
                });
                (dx, dw)
            })
            .collect();

        let mut dx = need_dx.then(|| Array4::zeros(x.raw_dim()));
        let mut dw = Array2::<f64>::zeros((self.out_ch, ckk));
        for (i, (dxn, dwn)) in per_sample.into_iter().enumerate() {
            if let (Some(dx), Some(dxn)) = (dx.as_mut(), dxn) {
                dx.index_axis_mut(Axis(0), i).assign(&dxn);
            }
            dw += &dwn;
        }
        {
            let g = ps.grad_mut(self.weight);
            let mut g2 = g
                .view_mut()
                .into_shape_with_order((self.out_ch, ckk))
                .expect("contiguous");
            g2 += &dw;
        }
        if let Some(b) = self.bias {
            let db: Array1<f64> = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            let mut g = ps.grad_mut(b).view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            g += &db;
        }
        dx
    }
}

fn im2col(x: ArrayView3<f64>, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + iy as usize * w;
                    let dst = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst + ox] = xs[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((c, h, w));
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().unwrap();
    let xs = x.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    let src = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            xs[dst + ix as usize] += cs[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
