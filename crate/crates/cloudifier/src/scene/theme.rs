//! Rendering themes: three legacy desktop looks plus the sketch theme that
//! stands in for hand-drawn mockups.

pub type Rgb = [u8; 3];

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum ThemeKind {
    Win95,
    Win98,
    WinXp,
    Sketch,
}

impl ThemeKind {
    pub const ALL: [ThemeKind; 4] = [ThemeKind::Win95, ThemeKind::Win98, ThemeKind::WinXp, ThemeKind::Sketch];

    pub fn name(&self) -> &'static str {
        match self {
            ThemeKind::Win95 => "win95",
            ThemeKind::Win98 => "win98",
            ThemeKind::WinXp => "winxp",
            ThemeKind::Sketch => "sketch",
        }
    }

    pub fn parse(s: &str) -> Option<ThemeKind> {
        ThemeKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Sketch renders stand in for the hand-drawn "natural" data; everything
    /// else is artificial.
    pub fn is_sketch(&self) -> bool {
        *self == ThemeKind::Sketch
    }
}

/// Palette and stroke style for one theme. Rendering any widget under any
/// theme is deterministic given the RNG stream it is handed.
#[derive(Clone, Debug)]
pub struct Theme {
    pub kind: ThemeKind,
    pub desktop: Rgb,
    pub face: Rgb,
    pub light: Rgb,
    pub shadow: Rgb,
    pub dark: Rgb,
    pub field: Rgb,
    pub text: Rgb,
    pub title_a: Rgb,
    pub title_b: Rgb,
    pub title_inactive: Rgb,
    pub title_text: Rgb,
    pub accent: Rgb,
}

impl Theme {
    pub fn new(kind: ThemeKind) -> Theme {
        match kind {
            ThemeKind::Win95 => Theme {
                kind,
                desktop: [0, 128, 128],
                face: [192, 192, 192],
                light: [255, 255, 255],
                shadow: [128, 128, 128],
                dark: [0, 0, 0],
                field: [255, 255, 255],
                text: [0, 0, 0],
                title_a: [0, 0, 128],
                title_b: [0, 0, 128],
                title_inactive: [128, 128, 128],
                title_text: [255, 255, 255],
                accent: [0, 0, 128],
            },
            ThemeKind::Win98 => Theme {
                kind,
                desktop: [58, 110, 165],
                face: [212, 208, 200],
                light: [255, 255, 255],
                shadow: [128, 128, 128],
                dark: [64, 64, 64],
                field: [255, 255, 255],
                text: [0, 0, 0],
                title_a: [10, 36, 106],
                title_b: [166, 202, 240],
                title_inactive: [128, 128, 128],
                title_text: [255, 255, 255],
                accent: [10, 36, 106],
            },
            ThemeKind::WinXp => Theme {
                kind,
                desktop: [93, 136, 201],
                face: [236, 233, 216],
                light: [255, 255, 255],
                shadow: [172, 168, 153],
                dark: [113, 111, 100],
                field: [255, 255, 255],
                text: [0, 0, 0],
                title_a: [0, 84, 227],
                title_b: [61, 149, 255],
                title_inactive: [122, 150, 223],
                title_text: [255, 255, 255],
                accent: [51, 153, 255],
            },
            ThemeKind::Sketch => Theme {
                kind,
                desktop: [250, 250, 246],
                face: [250, 250, 246],
                light: [250, 250, 246],
                shadow: [120, 120, 128],
                dark: [40, 40, 48],
                field: [250, 250, 246],
                text: [40, 40, 48],
                title_a: [40, 40, 48],
                title_b: [40, 40, 48],
                title_inactive: [120, 120, 128],
                title_text: [40, 40, 48],
                accent: [40, 40, 48],
            },
        }
    }

    pub fn is_sketch(&self) -> bool {
        self.kind.is_sketch()
    }
}
