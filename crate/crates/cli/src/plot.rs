//! A minimal raster scatter plot: colour encodes one label, marker shape
//! the other.

use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn inside(marker: usize, dx: i32, dy: i32, r: i32) -> bool {
    match marker % 5 {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => dy <= r && dy >= -r && 2 * dx.abs() <= dy + r,
        3 => dx.abs() + dy.abs() <= r,
        _ => dx.abs() <= r / 3 || dy.abs() <= r / 3,
    }
}

/// Draws `points` into a `size`×`size` image; `colour[i]` and `marker[i]`
/// are small class indices.
pub fn scatter(points: &[[f64; 2]], colour: &[usize], marker: &[usize], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    if points.is_empty() {
        return img;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let margin = 12.0;
    let span = |k: usize| (hi[k] - lo[k]).max(1e-12);
    let r = 5;
    for (i, p) in points.iter().enumerate() {
        let x = margin + (p[0] - lo[0]) / span(0) * (size as f64 - 2.0 * margin);
        let y = margin + (p[1] - lo[1]) / span(1) * (size as f64 - 2.0 * margin);
        let c = Rgb(PALETTE[colour[i] % PALETTE.len()]);
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (x as i32 + dx, y as i32 + dy);
                if px >= 0 && py >= 0 && (px as u32) < size && (py as u32) < size && inside(marker[i], dx, dy, r) {
                    img.put_pixel(px as u32, py as u32, c);
                }
            }
        }
    }
    img
}
