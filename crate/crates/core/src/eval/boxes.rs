//! Heatmap thresholding, contour boxes and box overlap.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Axis-aligned box, half-open: `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn is_valid(&self) -> bool {
        self.x_max > self.x_min && self.y_max > self.y_min
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(map: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|r| axis(r, out_h, h)).collect();
    let cols: Vec<_> = (0..out_w).map(|c| axis(c, out_w, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = map[[r0, c0]] * (1.0 - fc) + map[[r0, c1]] * fc;
        let bottom = map[[r1, c0]] * (1.0 - fc) + map[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Upsamples to `edge x edge`, then min-max scales to `0..=255` and rounds.
/// A constant heatmap (up to interpolation rounding) maps to all zeros.
pub fn normalize_heatmap(heatmap: ArrayView2<f64>, edge: usize) -> Array2<u8> {
    let up = resize_bilinear(heatmap, edge, edge);
    let (lo, hi) = up
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    if !(hi - lo > 1e-12 * scale) {
        return Array2::zeros((edge, edge));
    }
    up.mapv(|v| (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8)
}

/// Foreground where the 8-bit value is strictly above 127.
pub fn heatmap_to_mask(map: ArrayView2<u8>) -> Array2<bool> {
    map.mapv(|v| v > 127)
}

/// Neighbor offsets `(dr, dc)` in counterclockwise order (rows grow down),
/// starting east.
const DIRS: [(isize, isize); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];

fn dir_of(dr: isize, dc: isize) -> usize {
    DIRS.iter().position(|&d| d == (dr, dc)).expect("neighbor offset")
}

/// Boxes of the outer borders found by Suzuki-Abe border following
/// (8-connected foreground). Every connected foreground region has exactly
/// one outer border, including regions nested inside another region's hole.
/// Returned in raster order of each border's starting pixel.
pub fn extract_boxes(mask: ArrayView2<bool>) -> Vec<BBox> {
    let (h, w) = mask.dim();
    // One-pixel zero frame so border following never leaves the grid.
    let (ph, pw) = (h + 2, w + 2);
    let mut f = vec![0i32; ph * pw];
    for ((r, c), &v) in mask.indexed_iter() {
        f[(r + 1) * pw + c + 1] = v as i32;
    }
    let at = |r: usize, c: usize| r * pw + c;
    let mut nbd = 1i32;
    let mut boxes = Vec::new();

    for i in 1..ph - 1 {
        for j in 1..pw - 1 {
            let v = f[at(i, j)];
            let start_dir = if v == 1 && f[at(i, j - 1)] == 0 {
                Some((dir_of(0, -1), true))
            } else if v >= 1 && f[at(i, j + 1)] == 0 {
                Some((dir_of(0, 1), false))
            } else {
                None
            };
            let Some((d2, outer)) = start_dir else { continue };
            nbd += 1;
            let (mut rmin, mut rmax, mut cmin, mut cmax) = (i, i, j, j);

            // Clockwise search from (i2, j2) for the first nonzero neighbor.
            let nb = |r: usize, c: usize, d: usize| {
                let (dr, dc) = DIRS[d];
                ((r as isize + dr) as usize, (c as isize + dc) as usize)
            };
            let first = (0..8).map(|k| (d2 + 8 - k) % 8).find(|&d| {
                let (r, c) = nb(i, j, d);
                f[at(r, c)] != 0
            });
            match first {
                None => f[at(i, j)] = -nbd,
                Some(d1) => {
                    let (i1, j1) = nb(i, j, d1);
                    let (mut i2, mut j2) = (i1, j1);
                    let (mut i3, mut j3) = (i, j);
                    loop {
                        // Counterclockwise from the element after (i2, j2).
                        let back = dir_of(i2 as isize - i3 as isize, j2 as isize - j3 as isize);
                        let mut east_zero = false;
                        let mut found = None;
                        for k in 1..=8 {
                            let d = (back + k) % 8;
                            let (r, c) = nb(i3, j3, d);
                            if f[at(r, c)] != 0 {
                                found = Some((r, c));
                                break;
                            }
                            if d == 0 {
                                east_zero = true;
                            }
                        }
                        let (i4, j4) = found.expect("the border has at least the entry pixel");
                        if east_zero {
                            f[at(i3, j3)] = -nbd;
                        } else if f[at(i3, j3)] == 1 {
                            f[at(i3, j3)] = nbd;
                        }
                        rmin = rmin.min(i3);
                        rmax = rmax.max(i3);
                        cmin = cmin.min(j3);
                        cmax = cmax.max(j3);
                        if (i4, j4) == (i, j) && (i3, j3) == (i1, j1) {
                            break;
                        }
                        (i2, j2) = (i3, j3);
                        (i3, j3) = (i4, j4);
                    }
                }
            }
            if outer {
                // Undo the frame offset; max is exclusive.
                boxes.push(BBox::new((cmin - 1) as f64, (rmin - 1) as f64, cmax as f64, rmax as f64));
            }
        }
    }
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 8-connected flood fill; one extent per component.
    fn flood_boxes(mask: &Array2<bool>) -> Vec<BBox> {
        let (h, w) = mask.dim();
        let mut seen = Array2::from_elem((h, w), false);
        let mut out = Vec::new();
        for r0 in 0..h {
            for c0 in 0..w {
                if !mask[[r0, c0]] || seen[[r0, c0]] {
                    continue;
                }
                let (mut x0, mut y0, mut x1, mut y1) = (c0, r0, c0, r0);
                let mut stack = vec![(r0, c0)];
                seen[[r0, c0]] = true;
                while let Some((r, c)) = stack.pop() {
                    x0 = x0.min(c);
                    x1 = x1.max(c);
                    y0 = y0.min(r);
                    y1 = y1.max(r);
                    for dr in -1isize..=1 {
                        for dc in -1isize..=1 {
                            let (rr, cc) = (r as isize + dr, c as isize + dc);
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                continue;
                            }
                            let (rr, cc) = (rr as usize, cc as usize);
                            if mask[[rr, cc]] && !seen[[rr, cc]] {
                                seen[[rr, cc]] = true;
                                stack.push((rr, cc));
                            }
                        }
                    }
                }
                out.push(BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64));
            }
        }
        out
    }

    fn sorted(mut b: Vec<BBox>) -> Vec<BBox> {
        b.sort_by(|p, q| {
            (p.y_min, p.x_min, p.y_max, p.x_max)
                .partial_cmp(&(q.y_min, q.x_min, q.y_max, q.x_max))
                .unwrap()
        });
        b
    }

    fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max;
        let (mut i, mut u) = (0u32, 0u32);
        for y in 0..40 {
            for x in 0..40 {
                let (p, q) = (inside(a, x as f64, y as f64), inside(b, x as f64, y as f64));
                i += (p && q) as u32;
                u += (p || q) as u32;
            }
        }
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn heatmap_examples() {
        let m = ndarray::array![[0.0, 1.0, 2.0]];
        let n = normalize_heatmap(m.view(), 3);
        assert_eq!(n.row(0).to_vec(), vec![0, 128, 255]);
        assert!(normalize_heatmap(Array2::from_elem((7, 7), 3.3).view(), 224).iter().all(|&v| v == 0));
        assert!(heatmap_to_mask(Array2::from_elem((2, 2), 128u8).view()).iter().all(|&v| v));
        assert!(heatmap_to_mask(Array2::from_elem((2, 2), 127u8).view()).iter().all(|&v| !v));
        let checker = Array2::from_shape_fn((4, 4), |(r, c)| if (r + c) % 2 == 0 { 255u8 } else { 0 });
        assert_eq!(heatmap_to_mask(checker.view()), checker.mapv(|v| v == 255));
    }

    #[test]
    fn box_examples() {
        assert!(extract_boxes(Array2::from_elem((5, 5), false).view()).is_empty());
        let mut m = Array2::from_elem((12, 12), false);
        m.slice_mut(ndarray::s![2..5, 5..9]).fill(true);
        assert_eq!(extract_boxes(m.view()), vec![BBox::new(5.0, 2.0, 9.0, 5.0)]);
        // A ring with a dot in its hole: two outer borders.
        let mut ring = Array2::from_elem((9, 9), false);
        ring.slice_mut(ndarray::s![1..8, 1..8]).fill(true);
        ring.slice_mut(ndarray::s![2..7, 2..7]).fill(false);
        ring[[4, 4]] = true;
        assert_eq!(
            sorted(extract_boxes(ring.view())),
            vec![BBox::new(1.0, 1.0, 8.0, 8.0), BBox::new(4.0, 4.0, 5.0, 5.0)]
        );
        // Full grid touches every edge.
        assert_eq!(extract_boxes(Array2::from_elem((3, 4), true).view()), vec![BBox::new(0.0, 0.0, 4.0, 3.0)]);
    }

    fn mask_strategy() -> impl Strategy<Value = Array2<bool>> {
        (1usize..=32, 1usize..=32, 0.1f64..0.8).prop_flat_map(|(h, w, p)| {
            prop::collection::vec(prop::bool::weighted(p), h * w)
                .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
        })
    }

    fn box_strategy() -> impl Strategy<Value = BBox> {
        (0u8..30, 0u8..30, 1u8..10, 1u8..10)
            .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
    }

    proptest! {
        #[test]
        fn boxes_match_flood_fill(m in mask_strategy()) {
            prop_assert_eq!(sorted(extract_boxes(m.view())), sorted(flood_boxes(&m)));
        }

        #[test]
        fn iou_matches_pixel_count(a in box_strategy(), b in box_strategy()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, pixel_iou(&a, &b));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v == 1.0, a == b);
        }

        #[test]
        fn normalize_is_affine_invariant(
            v in prop::collection::vec(-3.0f64..3.0, 16),
            a in 0.5f64..4.0,
            b in -2.0f64..2.0,
        ) {
            let m = Array2::from_shape_vec((4, 4), v).unwrap();
            let base = normalize_heatmap(m.view(), 16);
            let t = normalize_heatmap(m.mapv(|x| a * x + b).view(), 16);
            let diff = base.iter().zip(&t).map(|(&p, &q)| (p as i32 - q as i32).abs()).max().unwrap();
            // Exact up to a half-integer rounding tie flipping by one level.
            prop_assert!(diff <= 1);
        }
    }
}
