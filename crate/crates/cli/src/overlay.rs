//! Qualitative overlays: predicted mask tinted red, ground-truth outline in
//! green, and the three texts in a strip along the bottom edge.

use image::{Rgb, RgbImage};
use refseg_core::masks::BinaryMask;

use crate::font::{self, GLYPH_HEIGHT, GLYPH_WIDTH};

pub const PRED_COLOR: [u8; 3] = [255, 0, 0];
pub const GT_COLOR: [u8; 3] = [0, 255, 0];
pub const PRED_ALPHA: f64 = 0.5;
const STRIP_DIM: f64 = 0.6;
const LINE_HEIGHT: u32 = GLYPH_HEIGHT + 2;
const ADVANCE: u32 = GLYPH_WIDTH + 1;
const MARGIN: u32 = 2;

fn blend(a: u8, b: u8, alpha: f64) -> u8 {
    (f64::from(a) * (1.0 - alpha) + f64::from(b) * alpha).round() as u8
}

/// Foreground pixels with a 4-neighbour outside the mask or on the border.
pub fn contour(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && (x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1))
    })
    .expect("same dims as a valid mask")
}

/// Height of the text strip for `n` lines in an image of height `h`.
pub fn strip_height(n: usize, h: u32) -> u32 {
    if n == 0 {
        return 0;
    }
    (MARGIN * 2 + LINE_HEIGHT * n as u32).min(h)
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str) {
    let (w, h) = img.dimensions();
    let max_chars = (w.saturating_sub(x0) / ADVANCE) as usize;
    let chars: Vec<char> = text.chars().collect();
    let shown: Vec<char> = if chars.len() > max_chars {
        let keep = max_chars.saturating_sub(2);
        chars[..keep].iter().copied().chain("..".chars()).take(max_chars).collect()
    } else {
        chars
    };
    for (i, c) in shown.into_iter().enumerate() {
        let cx = x0 + i as u32 * ADVANCE;
        for gy in 0..GLYPH_HEIGHT {
            for gx in 0..GLYPH_WIDTH {
                let (px, py) = (cx + gx, y0 + gy);
                if px < w && py < h && font::pixel(c, gx, gy) {
                    img.put_pixel(px, py, Rgb([255, 255, 255]));
                }
            }
        }
    }
}

/// Draws on a copy of `src`; the output has the source's dimensions.
pub fn render_overlay(
    src: &RgbImage,
    pred: &BinaryMask,
    gt: &BinaryMask,
    lines: &[String],
) -> RgbImage {
    let (w, h) = src.dimensions();
    assert_eq!(pred.dims(), (w, h), "prediction dims");
    assert_eq!(gt.dims(), (w, h), "ground-truth dims");
    let mut out = src.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if pred.get(x, y) {
            for (v, tint) in p.0.iter_mut().zip(PRED_COLOR) {
                *v = blend(*v, tint, PRED_ALPHA);
            }
        }
    }
    let edge = contour(gt);
    for (x, y, p) in out.enumerate_pixels_mut() {
        if edge.get(x, y) {
            *p = Rgb(GT_COLOR);
        }
    }
    let sh = strip_height(lines.len(), h);
    if sh > 0 {
        for y in h - sh..h {
            for x in 0..w {
                let p = out.get_pixel_mut(x, y);
                for c in 0..3 {
                    p.0[c] = blend(p.0[c], 0, STRIP_DIM);
                }
            }
        }
        for (i, line) in lines.iter().enumerate() {
            let y = h - sh + MARGIN + i as u32 * LINE_HEIGHT;
            if y + GLYPH_HEIGHT > h {
                break;
            }
            draw_text(&mut out, MARGIN, y, line);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y)).unwrap()
    }

    #[test]
    fn contour_of_rectangle() {
        let m = rect(6, 6, 1, 1, 5, 5);
        let c = contour(&m);
        assert_eq!(c.area(), 12);
        assert!(c.get(1, 1) && c.get(4, 2) && !c.get(2, 2) && !c.get(0, 0));
    }

    #[test]
    fn prediction_is_half_red() {
        let src = RgbImage::from_pixel(4, 4, Rgb([100, 100, 100]));
        let pred = rect(4, 4, 0, 0, 2, 4);
        let out = render_overlay(&src, &pred, &BinaryMask::new(4, 4).unwrap(), &[]);
        assert_eq!(out.get_pixel(0, 0).0, [178, 50, 50]);
        assert_eq!(out.get_pixel(3, 0).0, [100, 100, 100]);
    }

    #[test]
    fn empty_prediction_leaves_only_contour() {
        let src = RgbImage::from_fn(12, 10, |x, y| Rgb([x as u8 * 9, y as u8 * 7, 33]));
        let gt = rect(12, 10, 3, 2, 9, 8);
        let out = render_overlay(&src, &BinaryMask::new(12, 10).unwrap(), &gt, &[]);
        let edge = contour(&gt);
        for (x, y, p) in out.enumerate_pixels() {
            if edge.get(x, y) {
                assert_eq!(p.0, GT_COLOR);
            } else {
                assert_eq!(p, src.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn strip_keeps_dimensions_and_marks_text() {
        let src = RgbImage::from_pixel(80, 40, Rgb([200, 200, 200]));
        let empty = BinaryMask::new(80, 40).unwrap();
        let lines = vec!["T_VAN: A MAN".to_string(), "T_ATT: X".into(), "T_SUR: Y".into()];
        let out = render_overlay(&src, &empty, &empty, &lines);
        assert_eq!(out.dimensions(), (80, 40));
        assert_eq!(out.get_pixel(0, 0).0, [200, 200, 200]);
        let white = out.pixels().filter(|p| p.0 == [255, 255, 255]).count();
        assert!(white > 20);
        assert_eq!(strip_height(3, 40), 31);
        assert_eq!(strip_height(3, 10), 10);
    }

    #[test]
    fn long_lines_are_truncated() {
        let src = RgbImage::new(20, 20);
        let empty = BinaryMask::new(20, 20).unwrap();
        let out = render_overlay(&src, &empty, &empty, &["W".repeat(100)]);
        assert_eq!(out.dimensions(), (20, 20));
    }
}
