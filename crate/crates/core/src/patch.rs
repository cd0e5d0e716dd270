//! Frame-to-tensor conversion and fixed-size crops.

use image::RgbImage;
use ndarray::Array3;

/// Square crop of side `size` whose center pixel is the rounded `(cx, cy)`.
///
/// Pixel values are scaled to `[0, 1]` and shifted by `-0.5`; pixels outside
/// the frame are filled with the frame's per-channel mean.
#[derive(Clone, Debug)]
pub struct Patch {
    pub data: Array3<f64>,
    /// Image coordinate of the crop's center pixel center.
    pub center: (f64, f64),
}

pub fn channel_means(img: &RgbImage) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    for p in img.pixels() {
        for (a, v) in acc.iter_mut().zip(p.0) {
            *a += v as f64;
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    acc.map(|v| v / n / 255.0 - 0.5)
}

pub fn crop(img: &RgbImage, cx: f64, cy: f64, size: usize) -> Patch {
    crop_with_fill(img, cx, cy, size, channel_means(img))
}

pub fn crop_with_fill(img: &RgbImage, cx: f64, cy: f64, size: usize, fill: [f64; 3]) -> Patch {
    let half = (size as i64 - 1) / 2;
    // Pixel i covers [i, i+1); its center is i + 0.5.
    let px = (cx - 0.5).round() as i64;
    let py = (cy - 0.5).round() as i64;
    let x0 = px - half;
    let y0 = py - half;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut data = Array3::zeros((3, size, size));
    for yy in 0..size {
        let sy = y0 + yy as i64;
        for xx in 0..size {
            let sx = x0 + xx as i64;
            if sx >= 0 && sy >= 0 && sx < w && sy < h {
                let p = img.get_pixel(sx as u32, sy as u32).0;
                for c in 0..3 {
                    data[[c, yy, xx]] = p[c] as f64 / 255.0 - 0.5;
                }
            } else {
                for c in 0..3 {
                    data[[c, yy, xx]] = fill[c];
                }
            }
        }
    }
    Patch { data, center: (px as f64 + 0.5, py as f64 + 0.5) }
}
