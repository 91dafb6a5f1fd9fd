//! Scene composition: plan widgets, blit them in z-order, and derive the
//! dense labels, instance map and scene label from the same blit pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::theme::{Theme, ThemeKind};
use super::widgets::{render_widget, taxonomy, Granularity, WidgetClass, WidgetKind};
use crate::error::{Error, Result};

/// Meta-batch size fixed by the data pipeline.
pub const META_BATCH_SIZE: usize = 3072;
/// Side length of the default observation crop.
pub const OBSERVATION_SIDE: usize = 352;

/// Placement of one widget in a scene, before rendering.
#[derive(Clone, Copy, Debug)]
pub struct PlannedWidget {
    pub fine_id: u16,
    pub x: i32,
    pub y: i32,
    pub w: usize,
    pub h: usize,
}

/// A composed widget with its clipped bounding box. Later z-orders occlude
/// earlier ones; `style_seed` reproduces its rendering jitter.
#[derive(Clone, Copy, Debug)]
pub struct WidgetInstance {
    pub class: WidgetClass,
    pub bbox: (i32, i32, usize, usize),
    pub z_order: usize,
    pub style_seed: u64,
}

/// One labeled training image: 8-bit RGB pixels plus dense per-pixel class
/// indices, a scene-level label and the instance map (0 = background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub dense_labels: Vec<u16>,
    pub scene_label: u16,
    pub instance_map: Vec<u16>,
}

impl Observation {
    pub fn label_at(&self, x: usize, y: usize) -> u16 {
        self.dense_labels[y * self.width + x]
    }

    pub fn instance_at(&self, x: usize, y: usize) -> u16 {
        self.instance_map[y * self.width + x]
    }
}

/// An observation together with its widget inventory.
#[derive(Clone, Debug)]
pub struct Scene {
    pub observation: Observation,
    pub widgets: Vec<WidgetInstance>,
    pub theme: ThemeKind,
    pub granularity: Granularity,
}

impl Scene {
    /// Full-scan consistency check: at every pixel the dense label must be
    /// the class (at this scene's granularity) of the instance covering it,
    /// or background/0 for both.
    pub fn check_label_instance_agreement(&self) -> Result<()> {
        let obs = &self.observation;
        for (i, (&label, &inst)) in obs.dense_labels.iter().zip(&obs.instance_map).enumerate() {
            let want = match inst {
                0 => 0,
                id => {
                    let widget = self
                        .widgets
                        .get(usize::from(id) - 1)
                        .ok_or_else(|| Error::InvalidArgument(format!("instance id {id} has no widget")))?;
                    match self.granularity {
                        Granularity::Fine => widget.class.fine_id,
                        Granularity::Coarse => widget.class.coarse_id,
                    }
                }
            };
            if label != want {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i}: label {label} disagrees with instance {inst} (class {want})"
                )));
            }
        }
        Ok(())
    }
}

/// Random scene policy: how many widgets, which classes, window framing.
#[derive(Clone, Debug)]
pub struct ScenePolicy {
    pub widget_count: (usize, usize),
    /// Restrict generated classes so every label is < cap (at the chosen
    /// granularity). None = full taxonomy.
    pub class_cap: Option<u16>,
    /// Probability that the scene is framed by a full window.
    pub window_prob: f64,
}

impl Default for ScenePolicy {
    fn default() -> Self {
        ScenePolicy { widget_count: (3, 10), class_cap: None, window_prob: 0.85 }
    }
}

impl ScenePolicy {
    pub fn with_class_cap(mut self, cap: u16) -> Self {
        self.class_cap = Some(cap);
        self
    }

    fn class_allowed(&self, granularity: Granularity, class: &WidgetClass) -> bool {
        match self.class_cap {
            None => true,
            Some(cap) => match granularity {
                Granularity::Coarse => class.coarse_id < cap,
                Granularity::Fine => class.fine_id < cap,
            },
        }
    }

    /// Fine ids of all scatter widgets the policy may draw.
    fn allowed_fine_ids(&self, granularity: Granularity) -> Vec<u16> {
        taxonomy()
            .classes()
            .iter()
            .filter(|c| c.coarse_id != 0 && self.class_allowed(granularity, c))
            .map(|c| c.fine_id)
            .collect()
    }
}

/// Blit-compose an explicit widget list onto a themed background.
/// Widgets reaching past the scene bounds are clipped, never an error.
pub fn compose_scene(
    widgets: &[PlannedWidget],
    theme: &Theme,
    size: (usize, usize),
    granularity: Granularity,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    let (width, height) = size;
    let mut image = Vec::with_capacity(width * height * 3);
    for _ in 0..width * height {
        image.extend_from_slice(&theme.desktop);
    }
    let mut dense_labels = vec![0u16; width * height];
    let mut instance_map = vec![0u16; width * height];
    let mut instances = Vec::with_capacity(widgets.len());

    for (z, planned) in widgets.iter().enumerate() {
        let class = *taxonomy()
            .class(planned.fine_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fine class {}", planned.fine_id)))?;
        let style_seed: u64 = rng.gen();
        let mut style_rng = crate::rng::substream(style_seed, 0, 0);
        let patch = render_widget(planned.fine_id, theme, (planned.w, planned.h), &mut style_rng)?;
        let label = match granularity {
            Granularity::Fine => class.fine_id,
            Granularity::Coarse => class.coarse_id,
        };
        let id = (z + 1) as u16;

        let mut clip = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
        for py in 0..patch.h {
            let sy = planned.y + py as i32;
            if sy < 0 || sy >= height as i32 {
                continue;
            }
            for px in 0..patch.w {
                let sx = planned.x + px as i32;
                if sx < 0 || sx >= width as i32 {
                    continue;
                }
                if patch.mask[py * patch.w + px] == 0 {
                    continue;
                }
                let si = sy as usize * width + sx as usize;
                image[si * 3..si * 3 + 3].copy_from_slice(&patch.rgb[(py * patch.w + px) * 3..][..3]);
                dense_labels[si] = label;
                instance_map[si] = id;
                clip.0 = clip.0.min(sx);
                clip.1 = clip.1.min(sy);
                clip.2 = clip.2.max(sx);
                clip.3 = clip.3.max(sy);
            }
        }
        let bbox = if clip.0 <= clip.2 {
            (clip.0, clip.1, (clip.2 - clip.0 + 1) as usize, (clip.3 - clip.1 + 1) as usize)
        } else {
            (0, 0, 0, 0) // fully clipped away
        };
        instances.push(WidgetInstance { class, bbox, z_order: z, style_seed });
    }

    // Scene label: class of the largest visible widget, background if empty.
    let scene_label = instances
        .iter()
        .filter(|w| w.bbox.2 > 0)
        .max_by_key(|w| (w.bbox.2 * w.bbox.3, usize::MAX - w.z_order))
        .map(|w| match granularity {
            Granularity::Fine => w.class.fine_id,
            Granularity::Coarse => w.class.coarse_id,
        })
        .unwrap_or(0);

    Ok(Scene {
        observation: Observation { width, height, image, dense_labels, scene_label, instance_map },
        widgets: instances,
        theme: theme.kind,
        granularity,
    })
}

/// Plan and compose a random scene under the policy.
pub fn random_scene(
    policy: &ScenePolicy,
    theme: &Theme,
    size: (usize, usize),
    granularity: Granularity,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    let (width, height) = size;
    let allowed = policy.allowed_fine_ids(granularity);
    let mut planned = Vec::new();

    let window_fines: Vec<u16> = allowed
        .iter()
        .copied()
        .filter(|&f| taxonomy().kind_of(f) == Some(WidgetKind::WindowFrame))
        .collect();
    let scatter_fines: Vec<u16> = allowed
        .iter()
        .copied()
        .filter(|&f| taxonomy().kind_of(f) != Some(WidgetKind::WindowFrame))
        .collect();

    // client area that widgets scatter into
    let mut client = (0i32, 0i32, width as i32, height as i32);
    let ((win_min_w, win_min_h), _) = WidgetKind::WindowFrame.size_range();
    let window_fits = width * 6 / 10 >= win_min_w && height * 6 / 10 >= win_min_h;
    if window_fits && !window_fines.is_empty() && rng.gen_bool(policy.window_prob) {
        let ww = rng.gen_range(width * 6 / 10..=width * 9 / 10);
        let wh = rng.gen_range(height * 6 / 10..=height * 9 / 10);
        let wx = rng.gen_range(0..=(width - ww)) as i32;
        let wy = rng.gen_range(0..=(height - wh)) as i32;
        let fine = window_fines[rng.gen_range(0..window_fines.len())];
        planned.push(PlannedWidget { fine_id: fine, x: wx, y: wy, w: ww, h: wh });
        let tb = (wh as i32 / 6).clamp(12, 22);
        client = (wx + 4, wy + tb + 4, ww as i32 - 8, wh as i32 - tb - 8);
    }

    if !scatter_fines.is_empty() {
        let count = rng.gen_range(policy.widget_count.0..=policy.widget_count.1);
        for _ in 0..count {
            let fine = scatter_fines[rng.gen_range(0..scatter_fines.len())];
            let kind = taxonomy().kind_of(fine).expect("scatter classes are widgets");
            let ((min_w, min_h), (max_w, max_h)) = kind.size_range();
            let max_w = max_w.min((client.2 as usize).max(min_w + 1)).min(width);
            let max_h = max_h.min((client.3 as usize).max(min_h + 1)).min(height);
            let w = rng.gen_range(min_w..=max_w.max(min_w));
            let h = rng.gen_range(min_h..=max_h.max(min_h));
            // allow slight overflow so clipping paths stay exercised
            let x = client.0 + rng.gen_range(-(w as i32) / 5..=(client.2 - w as i32 * 4 / 5).max(1));
            let y = client.1 + rng.gen_range(-(h as i32) / 5..=(client.3 - h as i32 * 4 / 5).max(1));
            planned.push(PlannedWidget { fine_id: fine, x, y, w, h });
        }
    }

    compose_scene(&planned, theme, size, granularity, rng)
}

/// Which theme each observation uses.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ThemeMix {
    Fixed(ThemeKind),
    /// Uniformly one of the four themes per observation.
    Mixed,
}

impl ThemeMix {
    pub fn name(&self) -> &'static str {
        match self {
            ThemeMix::Fixed(k) => k.name(),
            ThemeMix::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<ThemeMix> {
        if s == "mixed" {
            return Some(ThemeMix::Mixed);
        }
        ThemeKind::parse(s).map(ThemeMix::Fixed)
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> ThemeKind {
        match self {
            ThemeMix::Fixed(k) => *k,
            ThemeMix::Mixed => ThemeKind::ALL[rng.gen_range(0..ThemeKind::ALL.len())],
        }
    }
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub size: usize,
    pub themes: ThemeMix,
    pub granularity: Granularity,
    pub policy: ScenePolicy,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(seed: u64) -> Self {
        GenConfig {
            size: OBSERVATION_SIDE,
            themes: ThemeMix::Mixed,
            granularity: Granularity::Coarse,
            policy: ScenePolicy::default(),
            seed,
        }
    }

    /// Class-index space of the labels this config emits.
    pub fn num_classes(&self) -> usize {
        let full = taxonomy().class_count(self.granularity);
        match self.policy.class_cap {
            Some(cap) => full.min(usize::from(cap)),
            None => full,
        }
    }
}

/// Generate observation `index` of the dataset: render a 25% larger virtual
/// screen, then cut the seeded random crop. A pure function of
/// (config, index), independent of execution order.
pub fn generate_observation(cfg: &GenConfig, index: u64) -> Result<Scene> {
    let mut rng = crate::rng::stream(cfg.seed, index);
    let theme = Theme::new(cfg.themes.pick(&mut rng));
    let render_size = (cfg.size + cfg.size / 4).clamp(cfg.size, 1024);
    let scene = random_scene(&cfg.policy, &theme, (render_size, render_size), cfg.granularity, &mut rng)?;
    let max_off = render_size - cfg.size;
    let ox = rng.gen_range(0..=max_off);
    let oy = rng.gen_range(0..=max_off);
    Ok(crop_scene(&scene, ox, oy, cfg.size, cfg.size))
}

fn crop_scene(scene: &Scene, ox: usize, oy: usize, w: usize, h: usize) -> Scene {
    let src = &scene.observation;
    let mut image = Vec::with_capacity(w * h * 3);
    let mut dense_labels = Vec::with_capacity(w * h);
    let mut instance_map = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = (oy + y) * src.width + ox;
        image.extend_from_slice(&src.image[row * 3..(row + w) * 3]);
        dense_labels.extend_from_slice(&src.dense_labels[row..row + w]);
        instance_map.extend_from_slice(&src.instance_map[row..row + w]);
    }

    // bboxes shift into crop space; widgets cut away keep a zero-area box
    let widgets = scene
        .widgets
        .iter()
        .map(|wi| {
            let (bx, by, bw, bh) = wi.bbox;
            let x0 = (bx - ox as i32).max(0);
            let y0 = (by - oy as i32).max(0);
            let x1 = (bx + bw as i32 - ox as i32).min(w as i32);
            let y1 = (by + bh as i32 - oy as i32).min(h as i32);
            let bbox = if x0 < x1 && y0 < y1 { (x0, y0, (x1 - x0) as usize, (y1 - y0) as usize) } else { (0, 0, 0, 0) };
            WidgetInstance { bbox, ..*wi }
        })
        .collect();

    // scene label recomputed on the visible crop
    let mut areas = std::collections::HashMap::new();
    for &inst in &instance_map {
        if inst != 0 {
            *areas.entry(inst).or_insert(0usize) += 1;
        }
    }
    let scene_label = areas
        .iter()
        .max_by_key(|(id, &area)| (area, u16::MAX - **id))
        .map(|(&id, _)| {
            let class = scene.widgets[usize::from(id) - 1].class;
            match scene.granularity {
                Granularity::Fine => class.fine_id,
                Granularity::Coarse => class.coarse_id,
            }
        })
        .unwrap_or(0);

    Scene {
        observation: Observation { width: w, height: h, image, dense_labels, scene_label, instance_map },
        widgets,
        theme: scene.theme,
        granularity: scene.granularity,
    }
}

/// A generated dataset shard: `count` observations (3072 by default) of
/// size x size x 3.
#[derive(Clone, Debug)]
pub struct MetaBatch {
    pub observations: Vec<Observation>,
    pub granularity: Granularity,
    pub seed: u64,
}

/// Generate a full meta-batch in memory (parallel over observations; the
/// result is identical to the sequential order). For 3072 observations of
/// 352x352 this holds ~2.7 GB; prefer [`generate_observation`] streaming for
/// full-size batches.
pub fn generate_meta_batch(cfg: &GenConfig, count: usize) -> Result<MetaBatch> {
    if count == 0 {
        return Err(Error::InvalidArgument("meta-batch count must be positive".into()));
    }
    let observations: Result<Vec<Observation>> = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_observation(cfg, i).map(|s| s.observation))
        .collect();
    Ok(MetaBatch { observations: observations?, granularity: cfg.granularity, seed: cfg.seed })
}
