use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use super::TextGenError;
use crate::geometry::BBox;

pub const HINT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// `max(2, round(0.004 * max(width, height)))`.
pub fn stroke_width(width: u32, height: u32) -> u32 {
    ((0.004 * f64::from(width.max(height))).round() as u32).max(2)
}

/// Pixels of the outline band of `b`, drawn inward from its edges.
pub fn stroke_contains(b: &BBox, w: u32, x: u32, y: u32) -> bool {
    b.contains(x, y)
        && (x < b.x_min() + w || x + w >= b.x_max() || y < b.y_min() + w || y + w >= b.y_max())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, TextGenError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| TextGenError::Decode(e.to_string()))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, TextGenError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| TextGenError::Decode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Draws a red outline for each box on an RGB copy of the image, clamping
/// boxes to the image. The result is always PNG.
pub fn draw_hints(img: &mut RgbImage, boxes: &[BBox]) {
    let (w, h) = img.dimensions();
    let sw = stroke_width(w, h);
    for b in boxes.iter().filter_map(|b| b.clamp_to(w, h)) {
        for y in b.y_min()..b.y_max() {
            for x in b.x_min()..b.x_max() {
                if stroke_contains(&b, sw, x, y) {
                    img.put_pixel(x, y, HINT_COLOR);
                }
            }
        }
    }
}

pub fn plot_visual_hints(bytes: &[u8], boxes: &[BBox]) -> Result<Vec<u8>, TextGenError> {
    let mut img = decode_rgb(bytes)?;
    draw_hints(&mut img, boxes);
    encode_png(&img)
}
