//! The widget class taxonomy and per-class patch rendering.
//!
//! Coarse classes are the major legacy-UI control groups (id 0 reserved for
//! background); each coarse class splits into 2-4 state/variant fine classes.
//! Rendering is pure: (class, theme, size, rng stream) -> (patch, mask).

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::raster::Patch;
use super::theme::{Rgb, Theme};
use crate::error::{Error, Result};

/// Coarse widget families, ids 1..=10 (0 is background).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum WidgetKind {
    WindowFrame,
    Button,
    TextInput,
    Checkbox,
    RadioButton,
    Dropdown,
    ListTable,
    LabelText,
    Scrollbar,
    IconImage,
}

impl WidgetKind {
    pub const ALL: [WidgetKind; 10] = [
        WidgetKind::WindowFrame,
        WidgetKind::Button,
        WidgetKind::TextInput,
        WidgetKind::Checkbox,
        WidgetKind::RadioButton,
        WidgetKind::Dropdown,
        WidgetKind::ListTable,
        WidgetKind::LabelText,
        WidgetKind::Scrollbar,
        WidgetKind::IconImage,
    ];

    pub fn coarse_id(&self) -> u16 {
        1 + Self::ALL.iter().position(|k| k == self).unwrap() as u16
    }

    /// (min, max) widget size in pixels, width x height.
    pub fn size_range(&self) -> ((usize, usize), (usize, usize)) {
        match self {
            WidgetKind::WindowFrame => ((40, 32), (1024, 1024)),
            WidgetKind::Button => ((40, 18), (150, 40)),
            WidgetKind::TextInput => ((60, 18), (240, 140)),
            WidgetKind::Checkbox => ((10, 10), (26, 26)),
            WidgetKind::RadioButton => ((10, 10), (26, 26)),
            WidgetKind::Dropdown => ((70, 18), (220, 160)),
            WidgetKind::ListTable => ((70, 50), (260, 220)),
            WidgetKind::LabelText => ((30, 8), (180, 26)),
            WidgetKind::Scrollbar => ((12, 12), (240, 240)),
            WidgetKind::IconImage => ((14, 14), (180, 150)),
        }
    }
}

/// One entry of the fine-class table.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct WidgetClass {
    pub coarse_id: u16,
    pub fine_id: u16,
    pub name: &'static str,
}

/// How dense labels index the class table.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Granularity {
    Coarse,
    Fine,
}

impl Granularity {
    pub fn name(&self) -> &'static str {
        match self {
            Granularity::Coarse => "coarse",
            Granularity::Fine => "fine",
        }
    }

    pub fn parse(s: &str) -> Option<Granularity> {
        match s {
            "coarse" => Some(Granularity::Coarse),
            "fine" => Some(Granularity::Fine),
            _ => None,
        }
    }
}

/// The fixed two-level class table.
pub struct Taxonomy {
    fine: Vec<WidgetClass>,
    coarse_names: Vec<&'static str>,
}

const FINE_TABLE: &[(WidgetKind, &[&str])] = &[
    (WidgetKind::WindowFrame, &["window-active", "window-inactive"]),
    (WidgetKind::Button, &["button-raised", "button-pressed", "button-disabled"]),
    (WidgetKind::TextInput, &["text-input-single", "text-input-multi"]),
    (WidgetKind::Checkbox, &["checkbox-unchecked", "checkbox-checked"]),
    (WidgetKind::RadioButton, &["radio-unselected", "radio-selected"]),
    (WidgetKind::Dropdown, &["dropdown-closed", "dropdown-open"]),
    (WidgetKind::ListTable, &["list-plain", "table-grid", "tree-view"]),
    (WidgetKind::LabelText, &["label-text", "label-heading"]),
    (WidgetKind::Scrollbar, &["scrollbar-vertical", "scrollbar-horizontal"]),
    (WidgetKind::IconImage, &["icon-small", "icon-large", "image-frame"]),
];

impl Taxonomy {
    fn build() -> Taxonomy {
        let mut fine = vec![WidgetClass { coarse_id: 0, fine_id: 0, name: "background" }];
        for (kind, states) in FINE_TABLE {
            for name in *states {
                fine.push(WidgetClass { coarse_id: kind.coarse_id(), fine_id: fine.len() as u16, name });
            }
        }
        let mut coarse_names = vec!["background"];
        coarse_names.extend([
            "window-frame",
            "button",
            "text-input",
            "checkbox",
            "radio-button",
            "dropdown",
            "list-table",
            "label-text",
            "scrollbar",
            "icon-image",
        ]);
        Taxonomy { fine, coarse_names }
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn fine_count(&self) -> usize {
        self.fine.len()
    }

    pub fn class_count(&self, granularity: Granularity) -> usize {
        match granularity {
            Granularity::Coarse => self.coarse_count(),
            Granularity::Fine => self.fine_count(),
        }
    }

    /// All fine classes including background, ordered by fine id.
    pub fn classes(&self) -> &[WidgetClass] {
        &self.fine
    }

    pub fn class(&self, fine_id: u16) -> Option<&WidgetClass> {
        self.fine.get(usize::from(fine_id))
    }

    pub fn coarse_of(&self, fine_id: u16) -> u16 {
        self.fine[usize::from(fine_id)].coarse_id
    }

    pub fn coarse_name(&self, coarse_id: u16) -> &'static str {
        self.coarse_names[usize::from(coarse_id)]
    }

    /// Fine ids of one coarse kind, in state order.
    pub fn fine_ids_of(&self, kind: WidgetKind) -> Vec<u16> {
        let cid = kind.coarse_id();
        self.fine.iter().filter(|c| c.coarse_id == cid).map(|c| c.fine_id).collect()
    }

    pub fn kind_of(&self, fine_id: u16) -> Option<WidgetKind> {
        let cid = self.coarse_of(fine_id);
        (cid > 0).then(|| WidgetKind::ALL[usize::from(cid) - 1])
    }

    /// The state index of a fine class within its coarse kind.
    pub fn state_of(&self, fine_id: u16) -> usize {
        let cid = self.coarse_of(fine_id);
        self.fine[..usize::from(fine_id)].iter().filter(|c| c.coarse_id == cid).count()
    }
}

/// The canonical class table (11 coarse, 24 fine).
pub fn taxonomy() -> &'static Taxonomy {
    static TABLE: OnceLock<Taxonomy> = OnceLock::new();
    TABLE.get_or_init(Taxonomy::build)
}

fn darker(c: Rgb, amount: u8) -> Rgb {
    [c[0].saturating_sub(amount), c[1].saturating_sub(amount), c[2].saturating_sub(amount)]
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    [mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])]
}

/// Render one widget into a patch plus exact ownership mask.
///
/// The patch is deterministic for a given (class, theme, size, rng stream);
/// the sketch theme adds bounded stroke wobble from the same stream.
pub fn render_widget(fine_id: u16, theme: &Theme, size: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Patch> {
    let tax = taxonomy();
    let class = *tax
        .class(fine_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown fine class {fine_id}")))?;
    let kind = tax
        .kind_of(fine_id)
        .ok_or_else(|| Error::InvalidArgument("cannot render the background class".into()))?;
    let ((min_w, min_h), (max_w, max_h)) = kind.size_range();
    let (w, h) = size;
    if w < min_w || h < min_h || w > max_w || h > max_h {
        return Err(Error::InvalidArgument(format!(
            "{}: size {w}x{h} outside [{min_w}x{min_h}, {max_w}x{max_h}]",
            class.name
        )));
    }
    let state = tax.state_of(fine_id);
    let mut p = Patch::new(w, h);
    if theme.is_sketch() {
        render_sketch(&mut p, kind, state, theme, rng);
    } else {
        render_themed(&mut p, kind, state, theme, rng);
    }
    Ok(p)
}

fn render_themed(p: &mut Patch, kind: WidgetKind, state: usize, t: &Theme, rng: &mut ChaCha8Rng) {
    let (w, h) = (p.w as i32, p.h as i32);
    match kind {
        WidgetKind::WindowFrame => {
            p.fill_all(t.face);
            p.bevel(0, 0, w, h, t.light, t.shadow, t.dark, true);
            let tb = (h / 6).clamp(12, 22).min(h - 6);
            let title = if state == 0 { (t.title_a, t.title_b) } else { (t.title_inactive, t.title_inactive) };
            for x in 3..w - 3 {
                let tt = (x - 3) as f64 / (w - 6).max(1) as f64;
                p.vline(x, 3, tb, lerp(title.0, title.1, tt));
            }
            p.glyph_run(8, 3 + tb / 3, (w / 3).max(10), tb / 3, t.title_text, rng);
            // close button
            let cb = tb - 4;
            if cb > 4 {
                let cx = w - 5 - cb;
                p.fill_rect(cx, 5, cb, cb, t.face);
                p.bevel(cx, 5, cb, cb, t.light, t.shadow, t.dark, true);
            }
        }
        WidgetKind::Button => {
            let pressed = state == 1;
            p.fill_all(if pressed { darker(t.face, 12) } else { t.face });
            p.bevel(0, 0, w, h, t.light, t.shadow, t.dark, !pressed);
            let text = if state == 2 { t.shadow } else { t.text };
            let inset = i32::from(pressed);
            let gw = (w * 3 / 5).max(6);
            p.glyph_run((w - gw) / 2 + inset, h / 2 - 1 + inset, gw, (h / 5).max(2), text, rng);
        }
        WidgetKind::TextInput => {
            p.fill_all(t.field);
            p.bevel(0, 0, w, h, t.light, t.shadow, t.dark, false);
            if state == 0 {
                p.glyph_run(4, h / 2 - 1, w * 2 / 3, (h / 5).max(2), t.text, rng);
            } else {
                let rows = ((h - 8) / 12).max(1);
                for r in 0..rows {
                    let gw = rng.gen_range(w / 3..w - 8);
                    p.glyph_run(4, 5 + r * 12, gw, 3, t.text, rng);
                }
            }
        }
        WidgetKind::Checkbox => {
            p.fill_all(t.field);
            p.bevel(0, 0, w, h, t.light, t.shadow, t.dark, false);
            if state == 1 {
                let (cx, cy) = (w / 2, h / 2);
                p.stroke((cx - w / 4) as f64, cy as f64, cx as f64 - 1.0, (cy + h / 4) as f64, 2, t.text, None);
                p.stroke(cx as f64 - 1.0, (cy + h / 4) as f64, (cx + w / 3) as f64, (cy - h / 4) as f64, 2, t.text, None);
            }
        }
        WidgetKind::RadioButton => {
            // own the disc only; corners stay background
            let r = (w.min(h) / 2 - 1).max(3);
            let (cx, cy) = (w / 2, h / 2);
            p.disc(cx, cy, r, t.field);
            p.circle_outline(cx, cy, r, 2, t.shadow);
            if state == 1 {
                p.disc(cx, cy, (r / 2).max(1), t.accent);
            }
        }
        WidgetKind::Dropdown => {
            let field_h = h.min(24);
            p.fill_rect(0, 0, w, field_h, t.field);
            p.bevel(0, 0, w, field_h, t.light, t.shadow, t.dark, false);
            p.glyph_run(4, field_h / 2 - 1, w / 2, (field_h / 5).max(2), t.text, rng);
            let bw = field_h - 4;
            let bx = w - bw - 2;
            p.fill_rect(bx, 2, bw, bw, t.face);
            p.bevel(bx, 2, bw, bw, t.light, t.shadow, t.dark, true);
            for i in 0..(bw / 3).max(1) {
                p.hline(bx + bw / 4 + i, 2 + bw / 3 + i, (bw / 2 - 2 * i).max(1), t.text);
            }
            if state == 1 && h > field_h + 6 {
                p.fill_rect(0, field_h, w, h - field_h, t.field);
                p.rect_outline(0, field_h, w, h - field_h, t.shadow);
                let rows = ((h - field_h - 4) / 12).max(1);
                for r in 0..rows {
                    p.glyph_run(4, field_h + 4 + r * 12, w / 2, 3, t.text, rng);
                }
            }
        }
        WidgetKind::ListTable => {
            p.fill_all(t.field);
            p.bevel(0, 0, w, h, t.light, t.shadow, t.dark, false);
            match state {
                1 => {
                    // table: header band and column separators
                    p.fill_rect(2, 2, w - 4, 12, t.face);
                    p.hline(2, 14, w - 4, t.shadow);
                    let cols = rng.gen_range(2..5);
                    for c in 1..cols {
                        p.vline(c * w / cols, 2, h - 4, t.shadow);
                    }
                    for r in 0..((h - 18) / 12).max(1) {
                        for c in 0..cols {
                            p.glyph_run(c * w / cols + 3, 18 + r * 12, w / cols - 8, 3, t.text, rng);
                        }
                    }
                }
                2 => {
                    // tree: indented rows with expander boxes
                    for r in 0..((h - 8) / 13).max(1) {
                        let indent = 4 + 10 * (rng.gen_range(0..3));
                        let y = 5 + r * 13;
                        p.rect_outline(indent, y, 7, 7, t.shadow);
                        p.hline(indent + 2, y + 3, 3, t.text);
                        p.glyph_run(indent + 10, y + 2, (w - indent - 16).max(4), 3, t.text, rng);
                    }
                }
                _ => {
                    for r in 0..((h - 8) / 12).max(1) {
                        let gw = rng.gen_range(w / 3..(w - 10).max(w / 3 + 1));
                        p.glyph_run(4, 5 + r * 12, gw, 3, t.text, rng);
                    }
                }
            }
        }
        WidgetKind::LabelText => {
            // text strokes only; the widget owns no background pixels
            let gh = if state == 1 { (h * 2 / 3).max(3) } else { (h / 2).max(2) };
            p.glyph_run(0, (h - gh) / 2, w, gh, t.text, rng);
        }
        WidgetKind::Scrollbar => {
            let vertical = state == 0;
            p.fill_all(darker(t.face, 8));
            if vertical {
                let bh = w.min(h / 3);
                p.fill_rect(0, 0, w, bh, t.face);
                p.bevel(0, 0, w, bh, t.light, t.shadow, t.dark, true);
                p.fill_rect(0, h - bh, w, bh, t.face);
                p.bevel(0, h - bh, w, bh, t.light, t.shadow, t.dark, true);
                let span = h - 2 * bh;
                if span > 10 {
                    let th = (span / 3).max(8).min(span);
                    let ty = bh + rng.gen_range(0..=(span - th).max(1));
                    p.fill_rect(0, ty, w, th, t.face);
                    p.bevel(0, ty, w, th, t.light, t.shadow, t.dark, true);
                }
            } else {
                let bw = h.min(w / 3);
                p.fill_rect(0, 0, bw, h, t.face);
                p.bevel(0, 0, bw, h, t.light, t.shadow, t.dark, true);
                p.fill_rect(w - bw, 0, bw, h, t.face);
                p.bevel(w - bw, 0, bw, h, t.light, t.shadow, t.dark, true);
                let span = w - 2 * bw;
                if span > 10 {
                    let tw = (span / 3).max(8).min(span);
                    let tx = bw + rng.gen_range(0..=(span - tw).max(1));
                    p.fill_rect(tx, 0, tw, h, t.face);
                    p.bevel(tx, 0, tw, h, t.light, t.shadow, t.dark, true);
                }
            }
        }
        WidgetKind::IconImage => match state {
            2 => {
                // image frame: sunken border around a placeholder cross
                p.fill_all(t.field);
                p.bevel(0, 0, w, h, t.light, t.shadow, t.dark, false);
                p.stroke(2.0, 2.0, (w - 3) as f64, (h - 3) as f64, 1, t.shadow, None);
                p.stroke((w - 3) as f64, 2.0, 2.0, (h - 3) as f64, 1, t.shadow, None);
            }
            _ => {
                // folder-ish glyph: tab plus body, owned pixels only
                let hue: Rgb = [
                    rng.gen_range(60..=255),
                    rng.gen_range(60..=255),
                    rng.gen_range(60..=255),
                ];
                p.fill_rect(0, h / 4, w, h - h / 4, hue);
                p.fill_rect(0, 0, w / 2, h / 4 + 1, darker(hue, 30));
                p.rect_outline(0, h / 4, w, h - h / 4, darker(hue, 60));
            }
        },
    }
}

fn render_sketch(p: &mut Patch, kind: WidgetKind, state: usize, t: &Theme, rng: &mut ChaCha8Rng) {
    let (w, h) = (p.w as i32, p.h as i32);
    let ink = t.dark;
    // enclosed footprint is owned paper unless the widget is stroke-only
    let own_footprint = !matches!(kind, WidgetKind::LabelText | WidgetKind::RadioButton);
    if own_footprint {
        p.fill_all(t.face);
    }
    let rect = |p: &mut Patch, x0: i32, y0: i32, x1: i32, y1: i32, rng: &mut ChaCha8Rng| {
        let (x0, y0, x1, y1) = (x0.max(2), y0.max(2), x1.min(w - 3), y1.min(h - 3));
        p.stroke(x0 as f64, y0 as f64, x1 as f64, y0 as f64, 1, ink, Some(rng));
        p.stroke(x1 as f64, y0 as f64, x1 as f64, y1 as f64, 1, ink, Some(rng));
        p.stroke(x1 as f64, y1 as f64, x0 as f64, y1 as f64, 1, ink, Some(rng));
        p.stroke(x0 as f64, y1 as f64, x0 as f64, y0 as f64, 1, ink, Some(rng));
    };
    match kind {
        WidgetKind::WindowFrame => {
            rect(p, 0, 0, w - 1, h - 1, rng);
            let tb = (h / 6).clamp(10, 22).min(h - 6);
            p.stroke(2.0, tb as f64, (w - 3) as f64, tb as f64, 1, ink, Some(rng));
            p.glyph_run(6, tb / 3, (w / 3).max(8), (tb / 4).max(2), ink, rng);
            let cb = (tb - 6).max(4);
            rect(p, w - 6 - cb, 3, w - 6, 3 + cb, rng);
        }
        WidgetKind::Button => {
            rect(p, 0, 0, w - 1, h - 1, rng);
            let gw = (w * 3 / 5).max(6);
            p.glyph_run((w - gw) / 2, h / 2 - 1, gw, (h / 5).max(2), ink, rng);
            if state == 1 {
                rect(p, 2, 2, w - 3, h - 3, rng);
            }
        }
        WidgetKind::TextInput => {
            rect(p, 0, 0, w - 1, h - 1, rng);
            let rows = if state == 0 { 1 } else { ((h - 8) / 12).max(1) };
            for r in 0..rows {
                p.glyph_run(4, 5 + r * 12, w * 2 / 3, 3, ink, rng);
            }
        }
        WidgetKind::Checkbox => {
            rect(p, 0, 0, w - 1, h - 1, rng);
            if state == 1 {
                p.stroke(3.0, (h / 2) as f64, (w / 2) as f64, (h - 4) as f64, 1, ink, Some(rng));
                p.stroke((w / 2) as f64, (h - 4) as f64, (w - 3) as f64, 3.0, 1, ink, Some(rng));
            }
        }
        WidgetKind::RadioButton => {
            let r = (w.min(h) / 2 - 2).max(3);
            let (cx, cy) = (w / 2, h / 2);
            p.disc(cx, cy, r, t.face); // owned paper disc
            p.circle_outline(cx, cy, r, 1, ink);
            if state == 1 {
                p.disc(cx, cy, (r / 2).max(1), ink);
            }
        }
        WidgetKind::Dropdown => {
            let field_h = h.min(24);
            rect(p, 0, 0, w - 1, field_h - 1, rng);
            p.glyph_run(4, field_h / 2 - 2, w / 2, 3, ink, rng);
            let bw = field_h - 4;
            p.stroke((w - bw) as f64, 4.0, (w - bw / 2) as f64, (field_h - 6) as f64, 1, ink, Some(rng));
            p.stroke((w - bw / 2) as f64, (field_h - 6) as f64, (w - 4) as f64, 4.0, 1, ink, Some(rng));
            if state == 1 && h > field_h + 6 {
                rect(p, 0, field_h, w - 1, h - 1, rng);
                for r in 0..((h - field_h - 4) / 12).max(1) {
                    p.glyph_run(4, field_h + 4 + r * 12, w / 2, 3, ink, rng);
                }
            }
        }
        WidgetKind::ListTable => {
            rect(p, 0, 0, w - 1, h - 1, rng);
            if state == 1 {
                let cols = rng.gen_range(2..4);
                for c in 1..cols {
                    p.stroke((c * w / cols) as f64, 2.0, (c * w / cols) as f64, (h - 3) as f64, 1, ink, Some(rng));
                }
                p.stroke(2.0, 13.0, (w - 3) as f64, 13.0, 1, ink, Some(rng));
            }
            for r in 0..((h - 8) / 13).max(1) {
                let indent = if state == 2 { 4 + 10 * rng.gen_range(0..3) } else { 4 };
                p.glyph_run(indent, 5 + r * 13, (w - indent - 8).max(4), 3, ink, rng);
            }
        }
        WidgetKind::LabelText => {
            let gh = if state == 1 { (h * 2 / 3).max(3) } else { (h / 2).max(2) };
            p.glyph_run(0, (h - gh) / 2, w, gh, ink, rng);
        }
        WidgetKind::Scrollbar => {
            rect(p, 0, 0, w - 1, h - 1, rng);
            if state == 0 {
                let bh = w.min(h / 3);
                p.stroke(2.0, bh as f64, (w - 3) as f64, bh as f64, 1, ink, Some(rng));
                p.stroke(2.0, (h - bh) as f64, (w - 3) as f64, (h - bh) as f64, 1, ink, Some(rng));
                if h - 2 * bh > 12 {
                    rect(p, 2, bh + 3, w - 3, bh + 3 + (h - 2 * bh) / 3, rng);
                }
            } else {
                let bw = h.min(w / 3);
                p.stroke(bw as f64, 2.0, bw as f64, (h - 3) as f64, 1, ink, Some(rng));
                p.stroke((w - bw) as f64, 2.0, (w - bw) as f64, (h - 3) as f64, 1, ink, Some(rng));
                if w - 2 * bw > 12 {
                    rect(p, bw + 3, 2, bw + 3 + (w - 2 * bw) / 3, h - 3, rng);
                }
            }
        }
        WidgetKind::IconImage => {
            rect(p, 0, 0, w - 1, h - 1, rng);
            if state == 2 {
                p.stroke(2.0, 2.0, (w - 3) as f64, (h - 3) as f64, 1, ink, Some(rng));
                p.stroke((w - 3) as f64, 2.0, 2.0, (h - 3) as f64, 1, ink, Some(rng));
            } else {
                p.stroke(2.0, (h / 4) as f64, (w / 2) as f64, (h / 4) as f64, 1, ink, Some(rng));
                p.stroke((w / 2) as f64, (h / 4) as f64, (w / 2) as f64, 2.0, 1, ink, Some(rng));
            }
        }
    }
}
