//! Heatmap overlays with ground-truth and predicted boxes.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, ArrayView2};

use super::boxes::{normalize_heatmap, BBox};
use super::run::Evaluator;
use crate::data::{load_image, resize_to_frame, CropWindow};
use crate::error::{Error, Result};

pub const HEAT_ALPHA: f64 = 0.4;
pub const GT_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
/// Probability above which a class counts as predicted present.
pub const POSITIVE_THRESHOLD: f64 = 0.5;

fn jet(t: f64) -> [f64; 3] {
    let ch = |k: f64| (1.5 - (4.0 * t - k).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Gray base in `[0, 1]`, optionally blended with a jet-colored 8-bit heatmap
/// of the same size.
pub fn blend(base: ArrayView2<f64>, heat: Option<ArrayView2<u8>>) -> RgbImage {
    let (h, w) = base.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = base[[y as usize, x as usize]].clamp(0.0, 1.0);
        let px = match heat {
            None => [g; 3],
            Some(hm) => {
                let c = jet(hm[[y as usize, x as usize]] as f64 / 255.0);
                [0, 1, 2].map(|i| (1.0 - HEAT_ALPHA) * g + HEAT_ALPHA * c[i])
            }
        };
        Rgb(px.map(|v| (255.0 * v).round() as u8))
    })
}

/// Box outline. Solid strokes are two pixels wide; dashed strokes are one
/// pixel wide with 4-on/3-off dashes, so the two styles never look alike.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>, dashed: bool) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = (b.x_min.floor() as i64).clamp(0, w - 1);
    let y0 = (b.y_min.floor() as i64).clamp(0, h - 1);
    let x1 = (b.x_max.ceil() as i64 - 1).clamp(0, w - 1);
    let y1 = (b.y_max.ceil() as i64 - 1).clamp(0, h - 1);
    let width = if dashed { 1 } else { 2 };
    let mut put = |x: i64, y: i64, step: i64| {
        if dashed && step % 7 >= 4 {
            return;
        }
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for t in 0..width {
        for x in x0..=x1 {
            put(x, y0 + t, x - x0);
            put(x, y1 - t, x - x0);
        }
        for y in y0..=y1 {
            put(x0 + t, y, y - y0);
            put(x1 - t, y, y - y0);
        }
    }
}

/// Writes an RGB PNG with the caption in a `tEXt` chunk. Encoder settings are
/// fixed, so equal pixels and caption give equal bytes.
pub fn write_png(img: &RgbImage, caption: &str, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width(), img.height());
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Balanced);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    enc.add_text_chunk("Description".into(), caption.into()).map_err(fail)?;
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(img.as_raw()).map_err(fail)?;
    writer.finish().map_err(fail)
}

/// Source luma mapped into the crop frame.
pub fn crop_frame_gray(path: &Path, window: &CropWindow) -> Result<Array2<f64>> {
    let src = load_image(path)?;
    let frame = resize_to_frame(src.luma().view(), window)?;
    Ok(frame
        .slice(s![window.top..window.top + window.size, window.left..window.left + window.size])
        .to_owned())
}

fn file_stem(image_id: &str) -> String {
    let stem = Path::new(image_id).file_stem().and_then(|s| s.to_str()).unwrap_or(image_id);
    crate::priors::class_file_name(stem).trim_end_matches(".png").to_string()
}

/// Renders every image in `indices` into `out_dir`: one overlay per class with
/// probability above [`POSITIVE_THRESHOLD`], or a captioned grayscale copy
/// when no class is predicted. Returns written paths in order.
pub fn render_overlays(ev: &Evaluator, indices: &[usize], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ds = ev.loader.dataset;
    let boxes = ds.boxes_by_image();
    let edge = ev.loader.spec.crop_edge;
    let mut written = Vec::new();
    ev.for_each_batch(indices, |batch, out| {
        let probs = out.probabilities();
        for (b, &idx) in batch.indices.iter().enumerate() {
            let rec = &ds.records[idx];
            let window = &batch.windows[b];
            let base = crop_frame_gray(&ds.image_path(rec), window)?;
            let stem = file_stem(&rec.image_id);
            let positive: Vec<usize> = (0..ds.classes.len()).filter(|&c| probs[[b, c]] > POSITIVE_THRESHOLD).collect();
            if positive.is_empty() {
                let path = out_dir.join(format!("{stem}.png"));
                write_png(&blend(base.view(), None), &format!("{}: no positive predictions", rec.image_id), &path)?;
                written.push(path);
                continue;
            }
            for c in positive {
                let cam = ev.model.cam(out, c);
                let heat = normalize_heatmap(cam.slice(s![b, .., ..]), edge);
                let mut img = blend(base.view(), Some(heat.view()));
                let gt = boxes.get(rec.image_id.as_str()).into_iter().flatten().filter(|a| a.class_id == c);
                for a in gt {
                    if let Some((x0, y0, x1, y1)) = window.map_box(a.x, a.y, a.x + a.w, a.y + a.h) {
                        draw_box(&mut img, &BBox::new(x0, y0, x1, y1), GT_COLOR, false);
                    }
                }
                for p in ev.predicted_boxes(out, b, c) {
                    draw_box(&mut img, &p, PRED_COLOR, true);
                }
                let name = ds.classes.name(c);
                let path = out_dir.join(format!("{stem}_{}", crate::priors::class_file_name(name)));
                let caption = format!("{}: {} p={:.3}", rec.image_id, name, probs[[b, c]]);
                write_png(&img, &caption, &path)?;
                written.push(path);
            }
        }
        Ok(())
    })?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strokes_differ_and_bytes_repeat() {
        let base = Array2::from_elem((32, 32), 0.5);
        let heat = Array2::from_shape_fn((32, 32), |(r, _)| (r * 8) as u8);
        let mut img = blend(base.view(), Some(heat.view()));
        draw_box(&mut img, &BBox::new(2.0, 2.0, 20.0, 20.0), GT_COLOR, false);
        draw_box(&mut img, &BBox::new(10.0, 10.0, 30.0, 30.0), PRED_COLOR, true);
        // Solid: both outer and inner ring pixels; dashed: gaps along the edge.
        assert_eq!(*img.get_pixel(5, 2), GT_COLOR);
        assert_eq!(*img.get_pixel(5, 3), GT_COLOR);
        assert_eq!(*img.get_pixel(10, 20), PRED_COLOR);
        assert_ne!(*img.get_pixel(10, 15), PRED_COLOR);

        let gray = blend(base.view(), None);
        assert!(gray.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        write_png(&img, "x", &a).unwrap();
        write_png(&img, "x", &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let decoded = image::open(&a).unwrap().to_rgb8();
        assert_eq!(decoded, img);
    }
}
