use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{ImageFormat, Rgb, RgbImage};

use super::{PipelineError, Result};
use crate::feature_store::{load_feature_grid, DatasetManifest, Split};
use crate::scoring::BoundingBox;

const BOX_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
const BOX_THICKNESS: usize = 3;

fn render_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Render(e.to_string())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| render_err(format!("{}: {e}", path.display())))?.to_rgb8())
}

/// Draws hollow red rectangles; box coordinates are inclusive pixel bounds.
pub fn draw_boxes(img: &mut RgbImage, boxes: &[BoundingBox]) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return;
    }
    for b in boxes {
        let (x0, x1) = (b.x0.min(w - 1), b.x1.min(w - 1));
        let (y0, y1) = (b.y0.min(h - 1), b.y1.min(h - 1));
        for t in 0..BOX_THICKNESS {
            for x in x0..=x1 {
                for y in [y0.saturating_add(t).min(y1), y1.saturating_sub(t).max(y0)] {
                    img.put_pixel(x as u32, y as u32, BOX_COLOR);
                }
            }
            for y in y0..=y1 {
                for x in [x0.saturating_add(t).min(x1), x1.saturating_sub(t).max(x0)] {
                    img.put_pixel(x as u32, y as u32, BOX_COLOR);
                }
            }
        }
    }
}

pub fn png_data_url(img: &RgbImage) -> Result<String> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(render_err)?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
    ))
}

/// Writes a grayscale preview PNG per entry (patch-norm intensity, each
/// cell `pixels_per_patch` wide) and records it as the entry's image.
pub fn attach_preview_images(root: &Path, pixels_per_patch: usize) -> Result<()> {
    let dir = root.join("images");
    std::fs::create_dir_all(&dir).map_err(super::io_err(&dir))?;
    let s = pixels_per_patch.max(1);
    for split in [Split::TrainNormal, Split::TestNormal, Split::TestAnomalous] {
        let path = root.join(split.manifest_file_name());
        let mut manifest = DatasetManifest::load(&path)?;
        for entry in &mut manifest.entries {
            let grid = load_feature_grid(DatasetManifest::resolve(root, &entry.feature_path))?;
            let norms: Vec<f64> = (0..grid.num_patches())
                .map(|j| grid.patch(j).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
                .collect();
            let (lo, hi) = norms
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let img = RgbImage::from_fn((grid.width() * s) as u32, (grid.height() * s) as u32, |x, y| {
                let j = (y as usize / s) * grid.width() + x as usize / s;
                let v = (255.0 * (norms[j] - lo) / span).round() as u8;
                Rgb([v, v, v])
            });
            let rel = format!("images/{}.png", entry.image_id);
            img.save(root.join(&rel)).map_err(render_err)?;
            entry.image_path = Some(rel);
        }
        manifest.save(&path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_outline_is_red_inside_untouched() {
        let mut img = RgbImage::new(20, 20);
        draw_boxes(&mut img, &[BoundingBox { x0: 2, y0: 3, x1: 15, y1: 16, peak_score: 1.0 }]);
        assert_eq!(*img.get_pixel(2, 3), BOX_COLOR);
        assert_eq!(*img.get_pixel(4, 10), BOX_COLOR);
        assert_eq!(*img.get_pixel(15, 16), BOX_COLOR);
        assert_eq!(*img.get_pixel(13, 14), BOX_COLOR);
        assert_eq!(*img.get_pixel(5, 10), Rgb([0, 0, 0]));
        assert_eq!(*img.get_pixel(1, 3), Rgb([0, 0, 0]));
    }

    #[test]
    fn tiny_and_clipped_boxes() {
        let mut img = RgbImage::new(4, 4);
        draw_boxes(&mut img, &[BoundingBox { x0: 1, y0: 1, x1: 1, y1: 1, peak_score: 0.0 }]);
        assert_eq!(*img.get_pixel(1, 1), BOX_COLOR);
        draw_boxes(&mut img, &[BoundingBox { x0: 2, y0: 2, x1: 40, y1: 40, peak_score: 0.0 }]);
        assert_eq!(*img.get_pixel(3, 3), BOX_COLOR);
    }

    #[test]
    fn data_url_is_png() {
        let url = png_data_url(&RgbImage::new(2, 2)).unwrap();
        let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
        let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    }
}
