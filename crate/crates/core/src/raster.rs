//! RGB raster helpers: PNG/base64 codecs, cropping, side-by-side composition
//! and the small set of annotations drawn onto prompt images.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{ImageFormat, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::geometry::Box2D;

pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
pub const GREEN: Rgb<u8> = Rgb([0, 255, 0]);
pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Outline colors for anchor annotations, cycled by anchor index.
pub const ANCHOR_PALETTE: [Rgb<u8>; 6] = [
    Rgb([0, 90, 255]),
    Rgb([255, 150, 0]),
    Rgb([200, 0, 200]),
    Rgb([0, 200, 200]),
    Rgb([230, 210, 0]),
    Rgb([120, 60, 220]),
];

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

pub fn encode_png_b64(img: &RgbImage) -> String {
    B64.encode(encode_png(img))
}

pub fn decode_png_b64(data: &str) -> Result<RgbImage, String> {
    let bytes = B64.decode(data).map_err(|e| format!("base64: {e}"))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map(|i| i.to_rgb8())
        .map_err(|e| format!("png: {e}"))
}

/// Crops `bbox` grown by `pad` (fraction of width/height per side), clipped to the image.
pub fn crop_padded(img: &RgbImage, bbox: &Box2D<f64>, pad: f64) -> RgbImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let px = bbox.width() * pad;
    let py = bbox.height() * pad;
    let x0 = (bbox.x_min - px).floor().clamp(0.0, w - 1.0) as u32;
    let y0 = (bbox.y_min - py).floor().clamp(0.0, h - 1.0) as u32;
    let x1 = ((bbox.x_max + px).ceil().clamp(0.0, w) as u32).max(x0 + 1);
    let y1 = ((bbox.y_max + py).ceil().clamp(0.0, h) as u32).max(y0 + 1);
    image::imageops::crop_imm(img, x0, y0, x1 - x0, y1 - y0).to_image()
}

/// Places `left` and `right` side by side with a white gutter; the shorter
/// image is vertically centered on a white background.
pub fn hconcat_letterboxed(left: &RgbImage, right: &RgbImage, gutter: u32) -> RgbImage {
    let height = left.height().max(right.height());
    let width = left.width() + gutter + right.width();
    let mut out = RgbImage::from_pixel(width, height, WHITE);
    let ly = (height - left.height()) / 2;
    let ry = (height - right.height()) / 2;
    image::imageops::replace(&mut out, left, 0, ly as i64);
    image::imageops::replace(&mut out, right, (left.width() + gutter) as i64, ry as i64);
    out
}

/// Rectangle outline of the given thickness, grown inwards from the integer
/// hull of `bbox`, clipped to the image.
pub fn draw_box_outline(img: &mut RgbImage, bbox: &Box2D<f64>, thickness: u32, color: Rgb<u8>) {
    let x0 = bbox.x_min.floor() as i64;
    let y0 = bbox.y_min.floor() as i64;
    let x1 = (bbox.x_max.ceil() as i64).max(x0 + 1);
    let y1 = (bbox.y_max.ceil() as i64).max(y0 + 1);
    let t = thickness as i64;
    let bands = [
        (x0, y0, x1, (y0 + t).min(y1)),
        (x0, (y1 - t).max(y0), x1, y1),
        (x0, y0, (x0 + t).min(x1), y1),
        ((x1 - t).max(x0), y0, x1, y1),
    ];
    for (a, b, c, d) in bands {
        fill_clipped(img, a, b, c, d, color);
    }
}

/// Fills the half-open pixel rectangle `[x0, x1) x [y0, y1)`, clipped.
pub fn fill_clipped(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let x0 = x0.clamp(0, img.width() as i64);
    let y0 = y0.clamp(0, img.height() as i64);
    let x1 = x1.clamp(0, img.width() as i64);
    let y1 = y1.clamp(0, img.height() as i64);
    if x1 > x0 && y1 > y0 {
        let r = Rect::at(x0 as i32, y0 as i32).of_size((x1 - x0) as u32, (y1 - y0) as u32);
        draw_filled_rect_mut(img, r, color);
    }
}

pub fn draw_dot(img: &mut RgbImage, x: f64, y: f64, radius: u32, color: Rgb<u8>) {
    draw_filled_circle_mut(
        img,
        (x.round() as i32, y.round() as i32),
        radius as i32,
        color,
    );
}

/// Line of approximately `thickness` pixels built from offset 1 px segments.
pub fn draw_thick_line(
    img: &mut RgbImage,
    from: (f64, f64),
    to: (f64, f64),
    thickness: u32,
    color: Rgb<u8>,
) {
    let half = thickness as i32 / 2;
    for dx in -half..=half {
        for dy in -half..=half {
            let (ox, oy) = (dx as f32, dy as f32);
            draw_line_segment_mut(
                img,
                (from.0 as f32 + ox, from.1 as f32 + oy),
                (to.0 as f32 + ox, to.1 as f32 + oy),
                color,
            );
        }
    }
}

/// Arrow of length `len` pixels from `origin` along the image-space direction `dir`.
pub fn draw_arrow(img: &mut RgbImage, origin: (f64, f64), dir: (f64, f64), len: f64, color: Rgb<u8>) {
    let n = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
    if n < 1e-9 {
        return;
    }
    let (dx, dy) = (dir.0 / n, dir.1 / n);
    let tip = (origin.0 + dx * len, origin.1 + dy * len);
    draw_thick_line(img, origin, tip, 2, color);
    let head = 10.0;
    for angle in [std::f64::consts::FRAC_PI_6, -std::f64::consts::FRAC_PI_6] {
        let (s, c) = angle.sin_cos();
        let bx = -(dx * c - dy * s);
        let by = -(dx * s + dy * c);
        draw_thick_line(img, tip, (tip.0 + bx * head, tip.1 + by * head), 2, color);
    }
}

// ---------------------------------------------------------------------------
// 5x7 bitmap font; lowercase letters are drawn as uppercase.

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ' ' => [0x00; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}

/// Pixel size of `text` rendered at integer `scale`.
pub fn text_size(text: &str, scale: u32) -> (u32, u32) {
    let n = text.chars().count() as u32;
    if n == 0 {
        return (0, 0);
    }
    ((n * (GLYPH_W + 1) - 1) * scale, GLYPH_H * scale)
}

/// Draws `text` with its top-left corner at `(x, y)`, clipped to the image.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: Rgb<u8>) {
    let s = scale as i64;
    for (ci, ch) in text.chars().enumerate() {
        let gx = x + ci as i64 * (GLYPH_W as i64 + 1) * s;
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                    let px = gx + col as i64 * s;
                    let py = y + row as i64 * s;
                    fill_clipped(img, px, py, px + s, py + s, color);
                }
            }
        }
    }
}

/// Text on a filled background plate with 2 px padding, top-left at `(x, y)`.
pub fn draw_label(
    img: &mut RgbImage,
    x: i64,
    y: i64,
    text: &str,
    scale: u32,
    fg: Rgb<u8>,
    bg: Rgb<u8>,
) {
    let (w, h) = text_size(text, scale);
    fill_clipped(img, x, y, x + w as i64 + 4, y + h as i64 + 4, bg);
    draw_text(img, x + 2, y + 2, text, scale, fg);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letterbox_centers_shorter_image() {
        let left = RgbImage::from_pixel(640, 480, Rgb([0, 0, 0]));
        let right = RgbImage::from_pixel(100, 100, Rgb([1, 2, 3]));
        let out = hconcat_letterboxed(&left, &right, 4);
        assert_eq!(out.dimensions(), (744, 480));
        assert_eq!(out.get_pixel(642, 10), &WHITE);
        assert_eq!(out.get_pixel(644, 189), &WHITE);
        assert_eq!(out.get_pixel(644, 190), &Rgb([1, 2, 3]));
        assert_eq!(out.get_pixel(743, 289), &Rgb([1, 2, 3]));
        assert_eq!(out.get_pixel(743, 290), &WHITE);
    }

    #[test]
    fn outline_stays_inside_hull() {
        let mut img = RgbImage::from_pixel(20, 20, WHITE);
        draw_box_outline(&mut img, &Box2D::new(5.0, 5.0, 15.0, 15.0), 3, RED);
        assert_eq!(img.get_pixel(5, 5), &RED);
        assert_eq!(img.get_pixel(14, 14), &RED);
        assert_eq!(img.get_pixel(7, 10), &RED);
        assert_eq!(img.get_pixel(8, 10), &WHITE);
        assert_eq!(img.get_pixel(15, 15), &WHITE);
        assert_eq!(img.get_pixel(4, 4), &WHITE);
    }

    #[test]
    fn png_b64_roundtrip() {
        let img = RgbImage::from_fn(7, 3, |x, y| Rgb([x as u8, y as u8, 9]));
        assert_eq!(decode_png_b64(&encode_png_b64(&img)).unwrap(), img);
        assert!(decode_png_b64("!!").is_err());
    }

    #[test]
    fn crop_pads_and_clips() {
        let img = RgbImage::new(100, 50);
        let c = crop_padded(&img, &Box2D::new(10.0, 10.0, 30.0, 20.0), 0.1);
        assert_eq!(c.dimensions(), (24, 12));
        let c = crop_padded(&img, &Box2D::new(0.0, 0.0, 100.0, 50.0), 0.1);
        assert_eq!(c.dimensions(), (100, 50));
    }

    #[test]
    fn text_metrics() {
        assert_eq!(text_size("12", 2), (22, 14));
        assert_eq!(text_size("", 2), (0, 0));
        let mut img = RgbImage::from_pixel(30, 20, WHITE);
        draw_text(&mut img, 0, 0, "1", 1, RED);
        // top row of '1' is 0x04 -> only the middle column lit
        assert_eq!(img.get_pixel(2, 0), &RED);
        assert_eq!(img.get_pixel(0, 0), &WHITE);
    }
}
