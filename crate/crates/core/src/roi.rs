//! Chest ROI masks: binarize a lung probability map, keep the two largest
//! islands, fill their joint convex hull and dilate with a disc.
//!
//! All stages operate on `Array2<u8>` masks holding 0 or 1.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_image, resize_area, Dataset, SourceImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiParams {
    pub threshold: f64,
    pub islands: usize,
    pub radius: usize,
    /// Square working resolution for the post-processing chain; 0 keeps the
    /// source resolution.
    pub working_edge: usize,
}

impl Default for RoiParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            islands: 2,
            radius: 8,
            working_edge: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Segmenter,
    Fallback,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    /// Source resolution, values in {0, 1}.
    pub mask: Array2<u8>,
    pub provenance: Provenance,
}

/// Produces a lung probability map with the same spatial shape as the image.
pub trait Segmenter: Send + Sync {
    fn segment(&self, image_id: &str, image: &SourceImage) -> Result<Array2<f64>>;
    fn provenance(&self) -> Provenance;
}

/// Non-clinical scaffolding: Otsu threshold on luma, dark side kept, dark
/// components touching the image border (outside air) removed.
#[derive(Clone, Copy, Debug, Default)]
pub struct OtsuSegmenter;

impl Segmenter for OtsuSegmenter {
    fn segment(&self, _image_id: &str, image: &SourceImage) -> Result<Array2<f64>> {
        let luma = image.luma();
        let t = otsu_threshold(&luma);
        let dark = luma.mapv(|v| u8::from(v <= t));
        let (labels, comps) = label_components(&dark);
        let (h, w) = dark.dim();
        let mut touches = vec![false; comps.len()];
        for ((y, x), &l) in labels.indexed_iter() {
            if l > 0 && (y == 0 || x == 0 || y + 1 == h || x + 1 == w) {
                touches[l - 1] = true;
            }
        }
        Ok(labels.mapv(|l| if l > 0 && !touches[l - 1] { 1.0 } else { 0.0 }))
    }

    fn provenance(&self) -> Provenance {
        Provenance::Fallback
    }
}

/// Pre-computed masks or probability maps stored as rasters in a directory.
#[derive(Clone, Debug)]
pub struct ExternalMasks {
    pub dir: PathBuf,
}

impl Segmenter for ExternalMasks {
    fn segment(&self, image_id: &str, image: &SourceImage) -> Result<Array2<f64>> {
        let path = self.dir.join(mask_file_name(image_id));
        let img = image::open(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let map = Array2::from_shape_vec((h, w), img.into_raw()).expect("raster size");
        let map = map.mapv(|v| v as f64 / 255.0);
        if map.dim() == image.dim() {
            Ok(map)
        } else {
            let (ih, iw) = image.dim();
            Ok(resize_area(map.view(), ih, iw))
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::External
    }
}

/// Otsu's threshold over a 256-bin histogram of values in [0, 1]. Returns
/// the upper edge of the last bin in the lower class.
pub fn otsu_threshold(values: &Array2<f64>) -> f64 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[((v.clamp(0.0, 1.0) * 255.0).round()) as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f64 + 0.5) / 255.0
}

pub fn binarize(prob: &Array2<f64>, threshold: f64) -> Array2<u8> {
    prob.mapv(|v| u8::from(v >= threshold))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub area: usize,
    pub row_sum: usize,
    pub col_sum: usize,
}

impl Component {
    pub fn centroid(&self) -> (f64, f64) {
        (self.row_sum as f64 / self.area as f64, self.col_sum as f64 / self.area as f64)
    }
}

/// 8-connected labeling. Label 0 is background; component `l` is `comps[l-1]`,
/// numbered in raster order of first pixel.
pub fn label_components(mask: &Array2<u8>) -> (Array2<usize>, Vec<Component>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<usize>::zeros((h, w));
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if mask[[y0, x0]] == 0 || labels[[y0, x0]] != 0 {
                continue;
            }
            let id = comps.len() + 1;
            let mut c = Component { area: 0, row_sum: 0, col_sum: 0 };
            labels[[y0, x0]] = id;
            stack.push((y0, x0));
            while let Some((y, x)) = stack.pop() {
                c.area += 1;
                c.row_sum += y;
                c.col_sum += x;
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            comps.push(c);
        }
    }
    (labels, comps)
}

/// Keeps the `k` largest 8-connected components. Equal areas are ordered by
/// smaller centroid row, then smaller centroid column.
pub fn keep_largest_islands(mask: &Array2<u8>, k: usize) -> Array2<u8> {
    let (labels, comps) = label_components(mask);
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&comps[a], &comps[b]);
        // centroid comparisons cross-multiplied to stay exact
        cb.area
            .cmp(&ca.area)
            .then((ca.row_sum * cb.area).cmp(&(cb.row_sum * ca.area)))
            .then((ca.col_sum * cb.area).cmp(&(cb.col_sum * ca.area)))
    });
    let mut keep = vec![false; comps.len() + 1];
    for &i in order.iter().take(k) {
        keep[i + 1] = true;
    }
    labels.mapv(|l| u8::from(l > 0 && keep[l]))
}

type Pt = (i64, i64);

fn cross(o: Pt, a: Pt, b: Pt) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of integer points by monotone chain, counter-clockwise in
/// `(x, y)` with collinear points dropped.
pub fn convex_hull(points: &mut [Pt]) -> Vec<Pt> {
    points.sort_unstable();
    let mut pts: Vec<Pt> = points.to_vec();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Pt> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    // the upper chain never pops into the lower one
    let floor = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= floor && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Sets every pixel inside or on the convex hull of all foreground pixels.
pub fn convex_hull_fill(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    // per-row extremes carry the whole hull
    let mut pts = Vec::new();
    for y in 0..h {
        let row = mask.row(y);
        if let Some(first) = row.iter().position(|&v| v != 0) {
            let last = row.iter().rposition(|&v| v != 0).unwrap();
            pts.push((first as i64, y as i64));
            pts.push((last as i64, y as i64));
        }
    }
    let mut out = Array2::zeros((h, w));
    if pts.is_empty() {
        return out;
    }
    let hull = convex_hull(&mut pts);
    let (xmin, xmax) = (hull.iter().map(|p| p.0).min().unwrap(), hull.iter().map(|p| p.0).max().unwrap());
    let (ymin, ymax) = (hull.iter().map(|p| p.1).min().unwrap(), hull.iter().map(|p| p.1).max().unwrap());
    for y in ymin..=ymax {
        for x in xmin..=xmax {
            let q = (x, y);
            let inside = match hull.len() {
                1 => true,
                2 => cross(hull[0], hull[1], q) == 0,
                n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], q) >= 0),
            };
            if inside {
                out[[y as usize, x as usize]] = 1;
            }
        }
    }
    out
}

/// Binary dilation by the disc `dx^2 + dy^2 <= r^2`.
pub fn dilate(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as i64;
    // prefix[y][x] = foreground count in row y before column x
    let mut prefix = Array2::<u32>::zeros((h, w + 1));
    for y in 0..h {
        for x in 0..w {
            prefix[[y, x + 1]] = prefix[[y, x]] + u32::from(mask[[y, x]] != 0);
        }
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for dy in -r..=r {
        let half = ((r * r - dy * dy) as f64).sqrt().floor() as i64;
        for y in 0..h as i64 {
            let sy = y + dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            let sy = sy as usize;
            for x in 0..w as i64 {
                let lo = (x - half).max(0) as usize;
                let hi = ((x + half + 1).min(w as i64)) as usize;
                if prefix[[sy, hi]] > prefix[[sy, lo]] {
                    out[[y as usize, x as usize]] = 1;
                }
            }
        }
    }
    out
}

/// binarize, islands, hull, dilate on a map already at working resolution.
pub fn postprocess(prob: &Array2<f64>, params: &RoiParams) -> Array2<u8> {
    let b = binarize(prob, params.threshold);
    let kept = keep_largest_islands(&b, params.islands);
    dilate(&convex_hull_fill(&kept), params.radius)
}

/// Nearest-neighbour resampling of a binary mask.
pub fn resize_nearest(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (out_h, out_w) {
        return mask.clone();
    }
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        mask[[sy, sx]]
    })
}

pub fn generate_roi_mask(
    image_id: &str,
    image: &SourceImage,
    segmenter: &dyn Segmenter,
    params: &RoiParams,
) -> Result<RoiMask> {
    let prob = segmenter.segment(image_id, image).map_err(|e| match e {
        e @ Error::Segmenter { .. } => e,
        other => Error::Segmenter {
            image_id: image_id.to_string(),
            msg: other.to_string(),
        },
    })?;
    let (h, w) = image.dim();
    if prob.dim() != (h, w) {
        return Err(Error::Segmenter {
            image_id: image_id.to_string(),
            msg: format!("probability map is {:?}, image is {h}x{w}", prob.dim()),
        });
    }
    let edge = params.working_edge;
    let mask = if edge == 0 || (h, w) == (edge, edge) {
        postprocess(&prob, params)
    } else {
        let small = resize_area(prob.view(), edge, edge);
        resize_nearest(&postprocess(&small, params), h, w)
    };
    Ok(RoiMask {
        mask,
        provenance: segmenter.provenance(),
    })
}

/// ROI masks for every record of a dataset, keyed by image id.
pub fn generate_dataset_masks(
    dataset: &Dataset,
    segmenter: &dyn Segmenter,
    params: &RoiParams,
) -> Result<HashMap<String, Array2<u8>>> {
    dataset
        .records
        .par_iter()
        .map(|r| {
            let image = load_image(&dataset.image_path(r))?;
            let m = generate_roi_mask(&r.image_id, &image, segmenter, params)?;
            Ok((r.image_id.clone(), m.mask))
        })
        .collect()
}

/// `a/b.jpg` becomes `a_b.png`.
pub fn mask_file_name(image_id: &str) -> String {
    let stem = Path::new(image_id)
        .with_extension("")
        .to_string_lossy()
        .replace(['/', '\\'], "_");
    format!("{stem}.png")
}

/// Writes a mask as an 8-bit raster with values {0, 255}.
pub fn save_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_raw(w as u32, h as u32, mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect())
        .expect("raster size");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a mask raster; values >= 128 are foreground.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("unreadable mask: {e}")))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_vec((h, w), img.into_raw())
        .expect("raster size")
        .mapv(|v| u8::from(v >= 128)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use proptest::prelude::*;

    fn disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Array2<u8> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            u8::from(dy * dy + dx * dx <= r * r)
        })
    }

    /// Pixel q is in the hull iff it is on the inner side of every supporting
    /// line through two foreground pixels, and inside their bounding box.
    fn oracle_hull(mask: &Array2<u8>) -> Array2<u8> {
        let pts: Vec<Pt> = mask
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|((y, x), _)| (x as i64, y as i64))
            .collect();
        let mut out = Array2::zeros(mask.dim());
        if pts.is_empty() {
            return out;
        }
        let mut lines = Vec::new();
        for &a in &pts {
            for &b in &pts {
                if a != b && pts.iter().all(|&p| cross(a, b, p) >= 0) {
                    lines.push((a, b));
                }
            }
        }
        let (x0, x1) = (pts.iter().map(|p| p.0).min().unwrap(), pts.iter().map(|p| p.0).max().unwrap());
        let (y0, y1) = (pts.iter().map(|p| p.1).min().unwrap(), pts.iter().map(|p| p.1).max().unwrap());
        for ((y, x), o) in out.indexed_iter_mut() {
            let q = (x as i64, y as i64);
            let in_box = (x0..=x1).contains(&q.0) && (y0..=y1).contains(&q.1);
            if in_box && lines.iter().all(|&(a, b)| cross(a, b, q) >= 0) {
                *o = 1;
            }
        }
        out
    }

    #[test]
    fn binarize_tie_goes_up() {
        let m = Array2::from_elem((2, 2), 0.5);
        assert!(binarize(&m, 0.5).iter().all(|&v| v == 1));
        assert!(binarize(&Array2::from_elem((2, 2), 0.9), 0.5).iter().all(|&v| v == 1));
        assert!(binarize(&Array2::from_elem((2, 2), 0.1), 0.5).iter().all(|&v| v == 0));
    }

    #[test]
    fn speck_is_removed() {
        let mut m = Array2::<u8>::zeros((20, 30));
        m.slice_mut(s![1..11, 1..6]).fill(1); // 50
        m.slice_mut(s![1..9, 10..15]).fill(1); // 40
        m.slice_mut(s![15..16, 20..23]).fill(1); // 3
        let kept = keep_largest_islands(&m, 2);
        assert_eq!(kept.iter().map(|&v| v as usize).sum::<usize>(), 90);
        assert_eq!(kept[[15, 21]], 0);
        let single = disc(15, 15, 7.0, 7.0, 4.0);
        assert_eq!(keep_largest_islands(&single, 2), single);
        let empty = Array2::<u8>::zeros((5, 5));
        assert_eq!(keep_largest_islands(&empty, 2), empty);
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = ndarray::array![[1u8, 0], [0, 1]];
        assert_eq!(label_components(&m).1.len(), 1);
    }

    #[test]
    fn equal_area_ties_prefer_upper_then_left() {
        let mut m = Array2::<u8>::zeros((10, 10));
        m[[5, 5]] = 1;
        m[[1, 8]] = 1;
        m[[1, 2]] = 1;
        let kept = keep_largest_islands(&m, 2);
        assert_eq!((kept[[1, 2]], kept[[1, 8]], kept[[5, 5]]), (1, 1, 0));
    }

    #[test]
    fn hull_fills_gap_between_bars() {
        let mut m = Array2::<u8>::zeros((12, 12));
        m.slice_mut(s![2..10, 2..4]).fill(1);
        m.slice_mut(s![2..10, 8..10]).fill(1);
        let filled = convex_hull_fill(&m);
        let mut expect = Array2::<u8>::zeros((12, 12));
        expect.slice_mut(s![2..10, 2..10]).fill(1);
        assert_eq!(filled, expect);
        assert_eq!(filled, oracle_hull(&m));
    }

    #[test]
    fn hull_degenerate_cases() {
        let mut m = Array2::<u8>::zeros((6, 6));
        m[[2, 3]] = 1;
        assert_eq!(convex_hull_fill(&m), m);
        m[[4, 5]] = 1;
        m[[0, 1]] = 1;
        let f = convex_hull_fill(&m);
        assert_eq!(f, oracle_hull(&m));
        assert_eq!(f.iter().filter(|&&v| v == 1).count(), 5);
    }

    #[test]
    fn dilation_examples() {
        let mut m = Array2::<u8>::zeros((9, 9));
        m[[4, 4]] = 1;
        assert_eq!(dilate(&m, 0), m);
        let d1 = dilate(&m, 1);
        assert_eq!(d1.iter().filter(|&&v| v == 1).count(), 5);
        let d2 = dilate(&m, 2);
        assert_eq!(d2, disc(9, 9, 4.0, 4.0, 2.0));
    }

    #[test]
    fn chain_fixed_points() {
        let p = RoiParams {
            working_edge: 0,
            ..Default::default()
        };
        let img = SourceImage::gray(Array2::zeros((20, 20)));
        struct Const(f64);
        impl Segmenter for Const {
            fn segment(&self, _: &str, image: &SourceImage) -> Result<Array2<f64>> {
                Ok(Array2::from_elem(image.dim(), self.0))
            }
            fn provenance(&self) -> Provenance {
                Provenance::Segmenter
            }
        }
        let ones = generate_roi_mask("a", &img, &Const(1.0), &p).unwrap();
        assert!(ones.mask.iter().all(|&v| v == 1));
        let zeros = generate_roi_mask("a", &img, &Const(0.0), &p).unwrap();
        assert!(zeros.mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn segmenter_errors_carry_image_id() {
        struct Broken;
        impl Segmenter for Broken {
            fn segment(&self, _: &str, _: &SourceImage) -> Result<Array2<f64>> {
                Err(Error::Invalid("model missing".into()))
            }
            fn provenance(&self) -> Provenance {
                Provenance::Segmenter
            }
        }
        let img = SourceImage::gray(Array2::zeros((4, 4)));
        let err = generate_roi_mask("x17.png", &img, &Broken, &RoiParams::default()).unwrap_err();
        assert!(err.to_string().contains("x17.png"), "{err}");
    }

    #[test]
    fn two_lung_phantom_with_otsu() {
        let (h, w) = (64, 64);
        let mut luma = Array2::from_elem((h, w), 0.08);
        let body = disc(h, w, 32.0, 32.0, 30.0);
        let left = disc(h, w, 32.0, 21.0, 9.0);
        let right = disc(h, w, 32.0, 43.0, 9.0);
        for ((y, x), v) in luma.indexed_iter_mut() {
            if body[[y, x]] == 1 {
                *v = if left[[y, x]] == 1 || right[[y, x]] == 1 { 0.24 } else { 0.62 };
            }
        }
        let img = SourceImage::gray(luma);
        let params = RoiParams {
            radius: 2,
            working_edge: 0,
            ..Default::default()
        };
        let roi = generate_roi_mask("p", &img, &OtsuSegmenter, &params).unwrap();
        assert_eq!(roi.provenance, Provenance::Fallback);
        let mut both = left.clone();
        both.zip_mut_with(&right, |a, &b| *a |= b);
        let hull = oracle_hull(&both);
        assert!(hull.iter().zip(roi.mask.iter()).all(|(&o, &m)| m >= o));
        // the background outside the body is not included
        assert_eq!(roi.mask[[0, 0]], 0);
        assert_eq!(roi.mask[[32, 2]], 0);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = disc(10, 13, 5.0, 6.0, 3.0);
        let path = dir.path().join(mask_file_name("sub/img.jpg"));
        assert!(path.ends_with("sub_img.png"));
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    fn small_mask() -> impl Strategy<Value = Array2<u8>> {
        (1usize..14, 1usize..14).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop_oneof![3 => Just(0u8), 1 => Just(1u8)], h * w)
                .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn hull_matches_oracle_and_is_idempotent(m in small_mask()) {
            let f = convex_hull_fill(&m);
            prop_assert_eq!(&f, &oracle_hull(&m));
            prop_assert_eq!(convex_hull_fill(&f), f);
        }

        #[test]
        fn dilation_is_extensive_and_monotone(m in small_mask(), r1 in 0usize..4, extra in 0usize..3) {
            let a = dilate(&m, r1);
            let b = dilate(&m, r1 + extra);
            prop_assert!(m.iter().zip(a.iter()).all(|(&x, &y)| y >= x));
            prop_assert!(a.iter().zip(b.iter()).all(|(&x, &y)| y >= x));
            prop_assert!(b.iter().all(|&v| v <= 1));
        }

        #[test]
        fn pipeline_covers_two_largest_islands(m in small_mask(), r in 0usize..3) {
            let params = RoiParams { radius: r, working_edge: 0, ..Default::default() };
            let prob = m.mapv(f64::from);
            let out = postprocess(&prob, &params);
            let kept = keep_largest_islands(&m, 2);
            prop_assert!(kept.iter().zip(out.iter()).all(|(&k, &o)| o >= k));
        }
    }
}
