//! Minimal 8-bit RGB rasterizer for widget patches.
//!
//! A [`Patch`] is a small RGB canvas paired with an ownership mask. Drawing
//! primitives set mask bits as they paint, so a widget's mask is exactly the
//! pixels it owns, never its bounding box. Sketch-style strokes wobble by a
//! bounded sinusoid plus random walk (<= 2 px) and are drawn inset so they
//! stay inside the patch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::theme::Rgb;

pub struct Patch {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
    pub mask: Vec<u8>,
}

impl Patch {
    pub fn new(w: usize, h: usize) -> Patch {
        Patch { w, h, rgb: vec![0; w * h * 3], mask: vec![0; w * h] }
    }

    #[inline]
    pub fn put(&mut self, x: i32, y: i32, color: Rgb) {
        if x < 0 || y < 0 || x >= self.w as i32 || y >= self.h as i32 {
            return;
        }
        let i = y as usize * self.w + x as usize;
        self.rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
        self.mask[i] = 1;
    }

    pub fn fill_rect(&mut self, x: i32, y: i32, w: i32, h: i32, color: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, color);
            }
        }
    }

    pub fn fill_all(&mut self, color: Rgb) {
        self.fill_rect(0, 0, self.w as i32, self.h as i32, color);
    }

    pub fn hline(&mut self, x: i32, y: i32, len: i32, color: Rgb) {
        for xx in x..x + len {
            self.put(xx, y, color);
        }
    }

    pub fn vline(&mut self, x: i32, y: i32, len: i32, color: Rgb) {
        for yy in y..y + len {
            self.put(x, yy, color);
        }
    }

    pub fn rect_outline(&mut self, x: i32, y: i32, w: i32, h: i32, color: Rgb) {
        self.hline(x, y, w, color);
        self.hline(x, y + h - 1, w, color);
        self.vline(x, y + 1, h - 2, color);
        self.vline(x + w - 1, y + 1, h - 2, color);
    }

    /// Classic two-pixel bevel. `raised` puts the light edge top-left.
    pub fn bevel(&mut self, x: i32, y: i32, w: i32, h: i32, light: Rgb, shadow: Rgb, dark: Rgb, raised: bool) {
        let (tl0, br0, tl1, br1) = if raised { (light, dark, light, shadow) } else { (dark, light, shadow, light) };
        self.hline(x, y, w, tl0);
        self.vline(x, y, h, tl0);
        self.hline(x, y + h - 1, w, br0);
        self.vline(x + w - 1, y, h, br0);
        self.hline(x + 1, y + 1, w - 2, tl1);
        self.vline(x + 1, y + 1, h - 2, tl1);
        self.hline(x + 1, y + h - 2, w - 2, br1);
        self.vline(x + w - 2, y + 1, h - 2, br1);
    }

    pub fn disc(&mut self, cx: i32, cy: i32, r: i32, color: Rgb) {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y <= r * r {
                    self.put(cx + x, cy + y, color);
                }
            }
        }
    }

    pub fn circle_outline(&mut self, cx: i32, cy: i32, r: i32, thickness: i32, color: Rgb) {
        let inner = (r - thickness).max(0);
        for y in -r..=r {
            for x in -r..=r {
                let d2 = x * x + y * y;
                if d2 <= r * r && d2 > inner * inner {
                    self.put(cx + x, cy + y, color);
                }
            }
        }
    }

    /// Straight or wobbled line segment of the given thickness.
    pub fn stroke(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, thickness: i32, color: Rgb, wobble: Option<&mut ChaCha8Rng>) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as i32).max(1);
        let mut walk = 0.0f64;
        let (phase, freq, amp) = match wobble {
            Some(ref _rng) => (0.0, 0.35, 0.9),
            None => (0.0, 0.0, 0.0),
        };
        let mut rng_opt = wobble;
        // unit normal to the segment, for offsetting the wobble
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1.0);
        let (nx, ny) = (-(y1 - y0) / len, (x1 - x0) / len);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let mut x = x0 + (x1 - x0) * t;
            let mut y = y0 + (y1 - y0) * t;
            if let Some(rng) = rng_opt.as_deref_mut() {
                walk = (walk + rng.gen_range(-0.25..0.25)).clamp(-1.0, 1.0);
                let off = (amp * (phase + freq * i as f64).sin() + walk).clamp(-2.0, 2.0);
                x += nx * off;
                y += ny * off;
            }
            for dy in 0..thickness {
                for dx in 0..thickness {
                    self.put(x.round() as i32 + dx, y.round() as i32 + dy, color);
                }
            }
        }
    }

    /// Pseudo-text: a run of dark dashes with random widths and gaps,
    /// standing in for glyphs without any font dependency.
    pub fn glyph_run(&mut self, x: i32, y: i32, max_w: i32, glyph_h: i32, color: Rgb, rng: &mut ChaCha8Rng) {
        let mut cx = x;
        let end = x + max_w;
        while cx < end {
            let dash = rng.gen_range(3..9).min(end - cx);
            if dash < 2 {
                break;
            }
            self.fill_rect(cx, y, dash, glyph_h.max(2), color);
            cx += dash + rng.gen_range(2..5);
        }
    }
}
