use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub resize_edge: usize,
    pub crop_edge: usize,
    pub crop_mode: CropMode,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl PreprocessSpec {
    pub fn train() -> Self {
        Self {
            crop_mode: CropMode::Random,
            ..Self::eval()
        }
    }

    pub fn eval() -> Self {
        Self {
            resize_edge: 256,
            crop_edge: 224,
            crop_mode: CropMode::Center,
            channel_mean: IMAGENET_MEAN,
            channel_std: IMAGENET_STD,
        }
    }

    pub fn with_mode(&self, crop_mode: CropMode) -> Self {
        Self {
            crop_mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_edge == 0 || self.crop_edge > self.resize_edge {
            return Err(Error::Config(format!(
                "crop edge {} must be in 1..={}",
                self.crop_edge, self.resize_edge
            )));
        }
        if self.channel_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("channel std must be positive".into()));
        }
        Ok(())
    }
}

/// Geometry shared by an image and every map aligned with it: source size,
/// short-edge resized size, and the square crop inside the resized frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub src_h: usize,
    pub src_w: usize,
    pub resized_h: usize,
    pub resized_w: usize,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl CropWindow {
    pub fn new<R: Rng + ?Sized>(src_h: usize, src_w: usize, spec: &PreprocessSpec, rng: &mut R) -> Self {
        let edge = spec.resize_edge as f64;
        let (resized_h, resized_w) = if src_h <= src_w {
            (spec.resize_edge, ((src_w as f64 * edge / src_h as f64).round() as usize).max(spec.resize_edge))
        } else {
            (((src_h as f64 * edge / src_w as f64).round() as usize).max(spec.resize_edge), spec.resize_edge)
        };
        let (max_top, max_left) = (resized_h - spec.crop_edge, resized_w - spec.crop_edge);
        let (top, left) = match spec.crop_mode {
            CropMode::Center => (max_top / 2, max_left / 2),
            CropMode::Random => (rng.random_range(0..=max_top), rng.random_range(0..=max_left)),
        };
        Self {
            src_h,
            src_w,
            resized_h,
            resized_w,
            top,
            left,
            size: spec.crop_edge,
        }
    }

    /// Maps a source-resolution box `[x0,x1) x [y0,y1)` into crop coordinates,
    /// clipped to the crop. Returns `None` if nothing remains.
    pub fn map_box(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<(f64, f64, f64, f64)> {
        let sx = self.resized_w as f64 / self.src_w as f64;
        let sy = self.resized_h as f64 / self.src_h as f64;
        let c = |v: f64| v.clamp(0.0, self.size as f64);
        let nx0 = c(x0 * sx - self.left as f64);
        let nx1 = c(x1 * sx - self.left as f64);
        let ny0 = c(y0 * sy - self.top as f64);
        let ny1 = c(y1 * sy - self.top as f64);
        (nx1 > nx0 && ny1 > ny0).then_some((nx0, ny0, nx1, ny1))
    }
}

/// A decoded raster with one (grayscale) or three (RGB) channels in [0, 1].
#[derive(Clone, Debug)]
pub struct SourceImage {
    pub channels: Vec<Array2<f64>>,
}

impl SourceImage {
    pub fn gray(data: Array2<f64>) -> Self {
        Self {
            channels: vec![data],
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.channels[0].dim()
    }

    /// Luma (mean of channels) in [0, 1].
    pub fn luma(&self) -> Array2<f64> {
        if self.channels.len() == 1 {
            return self.channels[0].clone();
        }
        let mut acc = Array2::zeros(self.dim());
        for c in &self.channels {
            acc += c;
        }
        acc / self.channels.len() as f64
    }
}

/// Decodes an 8- or 16-bit grayscale or RGB(A) raster.
pub fn load_image(path: &Path) -> Result<SourceImage> {
    let img = image::open(path).map_err(|e| Error::format(path, format!("unreadable image: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let mut channels = vec![Array2::zeros((h, w)); 3];
        for (x, y, p) in rgb.enumerate_pixels() {
            for (c, ch) in channels.iter_mut().enumerate() {
                ch[[y as usize, x as usize]] = p.0[c] as f64;
            }
        }
        Ok(SourceImage { channels })
    } else {
        let luma = img.to_luma32f();
        let data = Array2::from_shape_vec((h, w), luma.into_raw().into_iter().map(f64::from).collect())
            .expect("raster size");
        Ok(SourceImage::gray(data))
    }
}

/// Short-edge resize, crop, then per-channel `(v - mean) / std`.
/// Grayscale input is replicated to three channels.
pub fn preprocess_image<R: Rng + ?Sized>(
    image: &SourceImage,
    spec: &PreprocessSpec,
    rng: &mut R,
) -> Result<(Array3<f64>, CropWindow)> {
    spec.validate()?;
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::Invalid("empty image".into()));
    }
    let window = CropWindow::new(h, w, spec, rng);
    let crops: Vec<Array2<f64>> = image
        .channels
        .iter()
        .map(|ch| crop_and_pool(&resize_to_frame(ch.view(), &window)?, &window, (window.size, window.size)))
        .collect::<Result<_>>()?;
    let mut out = Array3::zeros((3, spec.crop_edge, spec.crop_edge));
    for c in 0..3 {
        let src = &crops[if crops.len() == 1 { 0 } else { c }];
        let (m, sd) = (spec.channel_mean[c], spec.channel_std[c]);
        out.slice_mut(s![c, .., ..])
            .zip_mut_with(src, |o, &v| *o = (v - m) / sd);
    }
    Ok((out, window))
}

/// Area-weighted resampling: each output cell is the overlap-weighted mean of
/// the source cells it covers. Constants and convex combinations are preserved.
pub fn resize_area(map: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == (out_h, out_w) {
        return map.to_owned();
    }
    let rows = area_weights(h, out_h);
    let cols = area_weights(w, out_w);
    let mut tmp = Array2::<f64>::zeros((out_h, w));
    for (o, taps) in rows.iter().enumerate() {
        let mut dst = tmp.row_mut(o);
        for &(i, wt) in taps {
            dst.scaled_add(wt, &map.row(i));
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for r in 0..out_h {
        let src = tmp.row(r);
        for (o, taps) in cols.iter().enumerate() {
            out[[r, o]] = taps.iter().map(|&(j, wt)| wt * src[j]).sum();
        }
    }
    out
}

fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let overlap = hi.min((i + 1) as f64) - lo.max(i as f64);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// First half of [`transform_aligned`]: source resolution to the resized frame.
pub fn resize_to_frame(map: ArrayView2<f64>, window: &CropWindow) -> Result<Array2<f64>> {
    if map.dim() != (window.src_h, window.src_w) {
        return Err(Error::Shape(format!(
            "map is {:?} but the paired image is {}x{}",
            map.dim(),
            window.src_h,
            window.src_w
        )));
    }
    Ok(resize_area(map, window.resized_h, window.resized_w))
}

/// Second half of [`transform_aligned`]: crop the resized frame and area-pool
/// to the target resolution.
pub fn crop_and_pool(frame: &Array2<f64>, window: &CropWindow, target_hw: (usize, usize)) -> Result<Array2<f64>> {
    if frame.dim() != (window.resized_h, window.resized_w) {
        return Err(Error::Shape(format!(
            "frame is {:?}, expected {}x{}",
            frame.dim(),
            window.resized_h,
            window.resized_w
        )));
    }
    let crop = frame.slice(s![
        window.top..window.top + window.size,
        window.left..window.left + window.size
    ]);
    Ok(resize_area(crop, target_hw.0, target_hw.1))
}

/// Applies the paired image's geometry to a mask or prior map in source
/// resolution, then area-averages down to `target_hw`.
pub fn transform_aligned(map: ArrayView2<f64>, window: &CropWindow, target_hw: (usize, usize)) -> Result<Array2<f64>> {
    let frame = resize_to_frame(map, window)?;
    crop_and_pool(&frame, window, target_hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_valued_image_normalizes_to_zero() {
        let spec = PreprocessSpec::eval();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = SourceImage {
            channels: (0..3).map(|c| Array2::from_elem((300, 280), spec.channel_mean[c])).collect(),
        };
        let (t, _) = preprocess_image(&img, &spec, &mut rng).unwrap();
        assert_eq!(t.dim(), (3, 224, 224));
        assert!(t.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn center_crop_of_256_square() {
        let spec = PreprocessSpec::eval();
        let w = CropWindow::new(256, 256, &spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((w.top, w.left, w.top + w.size, w.left + w.size), (16, 16, 240, 240));
    }

    #[test]
    fn random_crop_is_seed_deterministic() {
        let spec = PreprocessSpec::train();
        let a = CropWindow::new(1024, 1024, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = CropWindow::new(1024, 1024, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.top <= 32 && a.left <= 32);
    }

    #[test]
    fn area_average_of_block() {
        let m = array![[1.0, 1.0], [0.0, 0.0]];
        assert_eq!(resize_area(m.view(), 1, 1)[[0, 0]], 0.5);
    }

    #[test]
    fn constants_survive_any_transform() {
        let spec = PreprocessSpec::train();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(h, w) in &[(1024, 1024), (300, 400), (256, 256)] {
            let win = CropWindow::new(h, w, &spec, &mut rng);
            for t in [(7, 7), (14, 14)] {
                let out = transform_aligned(Array2::ones((h, w)).view(), &win, t).unwrap();
                assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zero_region_under_crop_gives_zero_map() {
        let spec = PreprocessSpec::eval();
        let win = CropWindow::new(256, 256, &spec, &mut ChaCha8Rng::seed_from_u64(0));
        let mut m = Array2::zeros((256, 256));
        m.slice_mut(s![..8, ..]).fill(1.0);
        let out = transform_aligned(m.view(), &win, (7, 7)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_resolution_is_rejected() {
        let spec = PreprocessSpec::eval();
        let win = CropWindow::new(256, 256, &spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(transform_aligned(Array2::ones((128, 128)).view(), &win, (7, 7)).is_err());
    }

    #[test]
    fn box_mapping_into_crop_frame() {
        let spec = PreprocessSpec::eval();
        let win = CropWindow::new(1024, 1024, &spec, &mut ChaCha8Rng::seed_from_u64(0));
        let (x0, y0, x1, y1) = win.map_box(400.0, 400.0, 600.0, 500.0).unwrap();
        assert_eq!((x0, y0, x1, y1), (84.0, 84.0, 134.0, 109.0));
        assert!(win.map_box(0.0, 0.0, 40.0, 40.0).is_none());
    }
}
