//! Deterministic raster annotation: box outlines, id-derived colors, and a
//! small embedded 5x7 bitmap font. Renders are bit-reproducible, which keeps
//! annotated-image digests stable across runs and platforms.

use image::{Rgb, RgbImage};

/// Fixed palette of well-separated colors; an id picks one via a multiplicative
/// hash so nearby ids do not collide visually.
const PALETTE: [[u8; 3]; 12] = [
    [230, 65, 50],
    [60, 180, 75],
    [50, 110, 230],
    [245, 180, 30],
    [145, 60, 200],
    [70, 200, 200],
    [240, 120, 180],
    [150, 200, 60],
    [220, 130, 40],
    [100, 100, 255],
    [170, 40, 90],
    [40, 160, 120],
];

pub fn color_for_id(id: u32) -> Rgb<u8> {
    let slot = (id.wrapping_mul(2_654_435_761) >> 8) as usize % PALETTE.len();
    Rgb(PALETTE[slot])
}

/// Inclusive pixel rectangle, already clipped to an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    /// Clips a continuous (min, max) UV extent to the image, returning `None`
    /// when nothing remains.
    pub fn clip(
        min_u: f64,
        min_v: f64,
        max_u: f64,
        max_v: f64,
        width: u32,
        height: u32,
    ) -> Option<Self> {
        if width == 0 || height == 0 || !min_u.is_finite() || !max_u.is_finite() {
            return None;
        }
        let x0 = min_u.floor().max(0.0);
        let y0 = min_v.floor().max(0.0);
        let x1 = max_u.ceil().min(f64::from(width - 1));
        let y1 = max_v.ceil().min(f64::from(height - 1));
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some(Self {
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
        })
    }
}

/// Draws a rectangle outline of the given thickness, growing inward.
pub fn draw_rect_outline(image: &mut RgbImage, rect: PixelRect, color: Rgb<u8>, thickness: u32) {
    let (w, h) = (image.width(), image.height());
    for t in 0..thickness {
        let (x0, y0) = (rect.x0.saturating_add(t), rect.y0.saturating_add(t));
        let (x1, y1) = (rect.x1.saturating_sub(t), rect.y1.saturating_sub(t));
        if x0 > x1 || y0 > y1 {
            break;
        }
        for x in x0..=x1.min(w - 1) {
            if y0 < h {
                image.put_pixel(x, y0, color);
            }
            if y1 < h {
                image.put_pixel(x, y1, color);
            }
        }
        for y in y0..=y1.min(h - 1) {
            if x0 < w {
                image.put_pixel(x0, y, color);
            }
            if x1 < w {
                image.put_pixel(x1, y, color);
            }
        }
    }
}

const GLYPH_WIDTH: u32 = 5;
const GLYPH_HEIGHT: u32 = 7;
const GLYPH_SPACING: u32 = 1;

/// Row bitmaps for a 5x7 glyph; bit 4 is the leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
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
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ' ' => [0x00; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}

/// Width in pixels of a rendered string.
pub fn text_width(text: &str) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 {
        0
    } else {
        n * GLYPH_WIDTH + (n - 1) * GLYPH_SPACING
    }
}

pub const TEXT_HEIGHT: u32 = GLYPH_HEIGHT;

/// Renders text with the embedded font, top-left anchored at (x, y); pixels
/// outside the image are dropped.
pub fn draw_text(image: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cursor = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..GLYPH_WIDTH {
                if row & (1 << (GLYPH_WIDTH - 1 - dx)) != 0 {
                    let px = cursor + i64::from(dx);
                    let py = y + dy as i64;
                    if px >= 0
                        && py >= 0
                        && (px as u32) < image.width()
                        && (py as u32) < image.height()
                    {
                        image.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        cursor += i64::from(GLYPH_WIDTH + GLYPH_SPACING);
    }
}
