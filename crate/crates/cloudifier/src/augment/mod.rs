//! Paired image/label augmentation.
//!
//! Six random transforms (rotation, shift, channel shift, horizontal flip,
//! rescale, crop) expand a dataset by an exact integer factor. Images are
//! resampled bilinearly; label and instance maps travel through the same
//! inverse affine map with nearest-neighbor lookup, so no label value is ever
//! invented. Out-of-bounds regions fill with background (class 0) and the
//! source's top-left pixel as the background color.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::Observation;

/// Ranges for the six random transforms plus the expansion factor. The
/// default pipeline applies the full policy to sketch-theme data only;
/// rendered (artificial) data needs none of it.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Rotation drawn from +-degrees.
    pub rotation_deg: f64,
    /// Shift drawn from +-(fraction of width/height).
    pub shift_frac: f64,
    /// Per-channel 8-bit shift drawn from +-delta.
    pub channel_shift: i32,
    /// Allow horizontal flips (p = 0.5 each variant).
    pub flip_horizontal: bool,
    /// Rescale factor interval.
    pub rescale: (f64, f64),
    /// Output crop size (width, height); None keeps source dims.
    pub crop: Option<(usize, usize)>,
    /// Outputs per input: the original plus (factor - 1) random variants.
    pub expansion_factor: usize,
    pub apply_to: ApplyTo,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ApplyTo {
    SketchOnly,
    All,
    None,
}

impl ApplyTo {
    pub fn name(&self) -> &'static str {
        match self {
            ApplyTo::SketchOnly => "sketch",
            ApplyTo::All => "all",
            ApplyTo::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<ApplyTo> {
        match s {
            "sketch" => Some(ApplyTo::SketchOnly),
            "all" => Some(ApplyTo::All),
            "none" => Some(ApplyTo::None),
            _ => None,
        }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotation_deg: 12.0,
            shift_frac: 0.10,
            channel_shift: 25,
            flip_horizontal: true,
            rescale: (0.85, 1.15),
            crop: Some((352, 352)),
            expansion_factor: 7,
            apply_to: ApplyTo::SketchOnly,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.rotation_deg < 0.0 || self.shift_frac < 0.0 || self.channel_shift < 0 {
            return Err(Error::InvalidArgument("augment ranges must be non-negative".into()));
        }
        if self.rescale.0 <= 0.0 || self.rescale.1 < self.rescale.0 {
            return Err(Error::InvalidArgument(format!(
                "rescale interval [{}, {}] must be positive and ordered",
                self.rescale.0, self.rescale.1
            )));
        }
        if self.expansion_factor < 1 {
            return Err(Error::InvalidArgument("expansion factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Textual key=value form, one field per line.
    pub fn to_text(&self) -> String {
        let (cw, ch) = self.crop.unwrap_or((0, 0));
        format!(
            "rotation_deg={}\nshift_frac={}\nchannel_shift={}\nflip_horizontal={}\n\
             rescale_min={}\nrescale_max={}\ncrop_w={cw}\ncrop_h={ch}\n\
             expansion_factor={}\napply_to={}\n",
            self.rotation_deg,
            self.shift_frac,
            self.channel_shift,
            self.flip_horizontal,
            self.rescale.0,
            self.rescale.1,
            self.expansion_factor,
            self.apply_to.name(),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = AugmentPolicy::default();
        let bad = |line: &str| Error::InvalidArgument(format!("augment policy: bad line '{line}'"));
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k.trim() {
                "rotation_deg" => p.rotation_deg = v.trim().parse().map_err(|_| bad(line))?,
                "shift_frac" => p.shift_frac = v.trim().parse().map_err(|_| bad(line))?,
                "channel_shift" => p.channel_shift = v.trim().parse().map_err(|_| bad(line))?,
                "flip_horizontal" => p.flip_horizontal = v.trim().parse().map_err(|_| bad(line))?,
                "rescale_min" => p.rescale.0 = v.trim().parse().map_err(|_| bad(line))?,
                "rescale_max" => p.rescale.1 = v.trim().parse().map_err(|_| bad(line))?,
                "crop_w" => {
                    let w: usize = v.trim().parse().map_err(|_| bad(line))?;
                    p.crop = if w == 0 { None } else { Some((w, p.crop.map_or(w, |c| c.1))) };
                }
                "crop_h" => {
                    let h: usize = v.trim().parse().map_err(|_| bad(line))?;
                    p.crop = if h == 0 { None } else { Some((p.crop.map_or(h, |c| c.0), h)) };
                }
                "expansion_factor" => p.expansion_factor = v.trim().parse().map_err(|_| bad(line))?,
                "apply_to" => p.apply_to = ApplyTo::parse(v.trim()).ok_or_else(|| bad(line))?,
                _ => return Err(bad(line)),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// One sampled geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoParams {
    pub rotation_deg: f64,
    /// Shift in pixels.
    pub shift: (f64, f64),
    pub scale: f64,
    pub flip_horizontal: bool,
}

impl GeoParams {
    pub const IDENTITY: GeoParams =
        GeoParams { rotation_deg: 0.0, shift: (0.0, 0.0), scale: 1.0, flip_horizontal: false };
}

/// Affine map dst = M * src + t about the image center:
/// shift o rotate o scale o flip.
#[derive(Clone, Copy, Debug)]
pub struct AffineMap {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl AffineMap {
    pub fn forward(p: &GeoParams, width: usize, height: usize) -> AffineMap {
        let theta = p.rotation_deg.to_radians();
        let (sin, cos) = if p.rotation_deg == 0.0 { (0.0, 1.0) } else { theta.sin_cos() };
        let fx = if p.flip_horizontal { -1.0 } else { 1.0 };
        let s = p.scale;
        let m = [[cos * s * fx, -sin * s], [sin * s * fx, cos * s]];
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let t = [
            cx + p.shift.0 - (m[0][0] * cx + m[0][1] * cy),
            cy + p.shift.1 - (m[1][0] * cx + m[1][1] * cy),
        ];
        AffineMap { m, t }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.m[0][0] * x + self.m[0][1] * y + self.t[0], self.m[1][0] * x + self.m[1][1] * y + self.t[1])
    }

    pub fn inverse(&self) -> AffineMap {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        AffineMap {
            m: inv,
            t: [
                -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
                -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
            ],
        }
    }
}

/// Where an augmented pair came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub source_index: usize,
    pub geo: GeoParams,
    pub channel_deltas: [i32; 3],
    pub crop_offset: (usize, usize),
}

/// An image and its dense labels after one identical geometric transform.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub dense_labels: Vec<u16>,
    pub scene_label: u16,
    pub provenance: Provenance,
}

fn bilinear(image: &[u8], w: usize, h: usize, sx: f64, sy: f64, fill: [u8; 3]) -> [u8; 3] {
    if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
        return fill;
    }
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let p00 = image[(y0 * w + x0) * 3 + c] as f64;
        let p01 = image[(y0 * w + x1) * 3 + c] as f64;
        let p10 = image[(y1 * w + x0) * 3 + c] as f64;
        let p11 = image[(y1 * w + x1) * 3 + c] as f64;
        let v = p00 * (1.0 - fx) * (1.0 - fy) + p01 * fx * (1.0 - fy) + p10 * (1.0 - fx) * fy + p11 * fx * fy;
        out[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn nearest_u16(map: &[u16], w: usize, h: usize, sx: f64, sy: f64) -> u16 {
    let x = sx.round();
    let y = sy.round();
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return 0;
    }
    map[y as usize * w + x as usize]
}

/// Apply one geometric transform to an observation: bilinear for the image,
/// nearest-neighbor for labels and the instance map, all through the same
/// inverse affine map. The fill color is the source's top-left pixel.
pub fn warp_observation(obs: &Observation, p: &GeoParams) -> Result<Observation> {
    if p.scale <= 0.0 {
        return Err(Error::InvalidArgument(format!("degenerate rescale factor {}", p.scale)));
    }
    let (w, h) = (obs.width, obs.height);
    let inv = AffineMap::forward(p, w, h).inverse();
    let fill = [obs.image[0], obs.image[1], obs.image[2]];
    let mut image = vec![0u8; w * h * 3];
    let mut dense_labels = vec![0u16; w * h];
    let mut instance_map = vec![0u16; w * h];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let i = y * w + x;
            image[i * 3..i * 3 + 3].copy_from_slice(&bilinear(&obs.image, w, h, sx, sy, fill));
            dense_labels[i] = nearest_u16(&obs.dense_labels, w, h, sx, sy);
            instance_map[i] = nearest_u16(&obs.instance_map, w, h, sx, sy);
        }
    }
    Ok(Observation { width: w, height: h, image, dense_labels, scene_label: obs.scene_label, instance_map })
}

/// Spec-level entry: transform an observation into an image/label pair.
pub fn geometric_transform(obs: &Observation, source_index: usize, p: &GeoParams) -> Result<AugmentedPair> {
    let warped = warp_observation(obs, p)?;
    Ok(AugmentedPair {
        width: warped.width,
        height: warped.height,
        image: warped.image,
        dense_labels: warped.dense_labels,
        scene_label: obs.scene_label,
        provenance: Provenance {
            source_index,
            geo: *p,
            channel_deltas: [0; 3],
            crop_offset: (0, 0),
        },
    })
}

/// Per-channel additive shift with saturation to [0, 255]; labels untouched.
pub fn channel_shift(image: &[u8], deltas: [i32; 3]) -> Vec<u8> {
    image
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as i32 + deltas[i % 3]).clamp(0, 255) as u8)
        .collect()
}

/// Cut an aligned window from image and labels at the same offset.
pub fn crop_pair(
    image: &[u8],
    labels: &[u16],
    w: usize,
    h: usize,
    offset: (usize, usize),
    target: (usize, usize),
) -> Result<(Vec<u8>, Vec<u16>)> {
    let (tw, th) = target;
    let (ox, oy) = offset;
    if w < tw || h < th || ox + tw > w || oy + th > h {
        return Err(Error::ShapeMismatch {
            op: "random_crop",
            detail: format!("crop {tw}x{th}@({ox},{oy}) does not fit source {w}x{h}"),
        });
    }
    let mut ci = Vec::with_capacity(tw * th * 3);
    let mut cl = Vec::with_capacity(tw * th);
    for y in 0..th {
        let row = (oy + y) * w + ox;
        ci.extend_from_slice(&image[row * 3..(row + tw) * 3]);
        cl.extend_from_slice(&labels[row..row + tw]);
    }
    Ok((ci, cl))
}

/// Uniform random crop offset over the admissible window.
pub fn random_crop(
    image: &[u8],
    labels: &[u16],
    w: usize,
    h: usize,
    target: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u8>, Vec<u16>, (usize, usize))> {
    let (tw, th) = target;
    if w < tw || h < th {
        return Err(Error::ShapeMismatch {
            op: "random_crop",
            detail: format!("source {w}x{h} smaller than crop target {tw}x{th}"),
        });
    }
    let offset = (rng.gen_range(0..=w - tw), rng.gen_range(0..=h - th));
    let (ci, cl) = crop_pair(image, labels, w, h, offset, target)?;
    Ok((ci, cl, offset))
}

fn sample_variant(obs: &Observation, source_index: usize, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<AugmentedPair> {
    let geo = GeoParams {
        rotation_deg: if policy.rotation_deg > 0.0 { rng.gen_range(-policy.rotation_deg..=policy.rotation_deg) } else { 0.0 },
        shift: if policy.shift_frac > 0.0 {
            (
                rng.gen_range(-policy.shift_frac..=policy.shift_frac) * obs.width as f64,
                rng.gen_range(-policy.shift_frac..=policy.shift_frac) * obs.height as f64,
            )
        } else {
            (0.0, 0.0)
        },
        scale: if policy.rescale.0 < policy.rescale.1 { rng.gen_range(policy.rescale.0..=policy.rescale.1) } else { policy.rescale.0 },
        flip_horizontal: policy.flip_horizontal && rng.gen_bool(0.5),
    };
    let deltas = if policy.channel_shift > 0 {
        [
            rng.gen_range(-policy.channel_shift..=policy.channel_shift),
            rng.gen_range(-policy.channel_shift..=policy.channel_shift),
            rng.gen_range(-policy.channel_shift..=policy.channel_shift),
        ]
    } else {
        [0; 3]
    };

    let mut pair = geometric_transform(obs, source_index, &geo)?;
    if deltas != [0; 3] {
        pair.image = channel_shift(&pair.image, deltas);
        pair.provenance.channel_deltas = deltas;
    }
    apply_crop(pair, policy, rng)
}

fn apply_crop(mut pair: AugmentedPair, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<AugmentedPair> {
    let Some(target) = policy.crop else { return Ok(pair) };
    if (pair.width, pair.height) == target {
        return Ok(pair);
    }
    let (ci, cl, offset) = random_crop(&pair.image, &pair.dense_labels, pair.width, pair.height, target, rng)?;
    pair.image = ci;
    pair.dense_labels = cl;
    pair.width = target.0;
    pair.height = target.1;
    pair.provenance.crop_offset = offset;
    Ok(pair)
}

/// Expand a dataset by exactly `policy.expansion_factor`: for every source
/// observation, the untransformed original (cropped at offset (0,0) if a
/// smaller crop target is set) followed by factor-1 random variants.
/// Deterministic under `seed`, independent of thread schedule.
pub fn expand_dataset(observations: &[Observation], policy: &AugmentPolicy, seed: u64) -> Result<Vec<AugmentedPair>> {
    policy.validate()?;
    let f = policy.expansion_factor;
    (0..observations.len() * f)
        .into_par_iter()
        .map(|slot| {
            let (i, j) = (slot / f, slot % f);
            let obs = &observations[i];
            if j == 0 {
                // original member: identity geometry, deterministic corner
                // crop when a smaller target is set
                let mut pair = geometric_transform(obs, i, &GeoParams::IDENTITY)?;
                if let Some(t) = policy.crop {
                    if (pair.width, pair.height) != t {
                        let (ci, cl) = crop_pair(&pair.image, &pair.dense_labels, pair.width, pair.height, (0, 0), t)?;
                        pair.image = ci;
                        pair.dense_labels = cl;
                        pair.width = t.0;
                        pair.height = t.1;
                    }
                }
                Ok(pair)
            } else {
                let mut rng = crate::rng::substream(seed, i as u64, j as u64);
                sample_variant(obs, i, policy, &mut rng)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{compose_scene, Granularity, PlannedWidget, Theme, ThemeKind};

    fn sample_obs(seed: u64) -> Observation {
        let theme = Theme::new(ThemeKind::Win95);
        let mut rng = crate::rng::stream(seed, 0);
        let widgets = [
            PlannedWidget { fine_id: 3, x: 8, y: 8, w: 50, h: 20 },
            PlannedWidget { fine_id: 6, x: 2, y: 34, w: 60, h: 18 },
        ];
        compose_scene(&widgets, &theme, (64, 64), Granularity::Coarse, &mut rng).unwrap().observation
    }

    #[test]
    fn identity_transform_is_byte_exact() {
        let obs = sample_obs(1);
        let pair = geometric_transform(&obs, 0, &GeoParams::IDENTITY).unwrap();
        assert_eq!(pair.image, obs.image);
        assert_eq!(pair.dense_labels, obs.dense_labels);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let obs = sample_obs(2);
        let flip = GeoParams { flip_horizontal: true, ..GeoParams::IDENTITY };
        let once = warp_observation(&obs, &flip).unwrap();
        assert_ne!(once.image, obs.image);
        let twice = warp_observation(&once, &flip).unwrap();
        assert_eq!(twice.image, obs.image);
        assert_eq!(twice.dense_labels, obs.dense_labels);
        assert_eq!(twice.instance_map, obs.instance_map);
    }

    #[test]
    fn degenerate_scale_is_an_error() {
        let obs = sample_obs(3);
        let p = GeoParams { scale: 0.0, ..GeoParams::IDENTITY };
        assert!(warp_observation(&obs, &p).is_err());
    }

    #[test]
    fn labels_are_never_interpolated() {
        let obs = sample_obs(4);
        let source: std::collections::HashSet<u16> = obs.dense_labels.iter().copied().collect();
        let p = GeoParams { rotation_deg: 17.0, shift: (4.0, -3.0), scale: 1.08, flip_horizontal: true };
        let pair = geometric_transform(&obs, 0, &p).unwrap();
        for &l in &pair.dense_labels {
            assert!(l == 0 || source.contains(&l), "label {l} not in the source");
        }
    }

    #[test]
    fn channel_shift_identity_saturation_and_mean() {
        let image = vec![128u8; 32 * 32 * 3];
        assert_eq!(channel_shift(&image, [0, 0, 0]), image);

        let shifted = channel_shift(&image, [300, 0, 0]);
        for px in shifted.chunks_exact(3) {
            assert_eq!(px[0], 255, "oversized delta saturates");
            assert_eq!(px[1], 128);
        }

        let shifted = channel_shift(&image, [0, 17, -9]);
        let mean = |c: usize, img: &[u8]| {
            img.chunks_exact(3).map(|p| p[c] as f64).sum::<f64>() / (img.len() / 3) as f64
        };
        assert_eq!(mean(1, &shifted), 128.0 + 17.0);
        assert_eq!(mean(2, &shifted), 128.0 - 9.0);
    }

    #[test]
    fn crop_matches_index_shift_oracle() {
        let obs = sample_obs(5);
        let mut rng = crate::rng::stream(6, 0);
        let (ci, cl, (ox, oy)) =
            random_crop(&obs.image, &obs.dense_labels, obs.width, obs.height, (40, 36), &mut rng).unwrap();
        for y in 0..36 {
            for x in 0..40 {
                assert_eq!(cl[y * 40 + x], obs.dense_labels[(y + oy) * obs.width + (x + ox)]);
                assert_eq!(ci[(y * 40 + x) * 3], obs.image[((y + oy) * obs.width + (x + ox)) * 3]);
            }
        }
        // equal source and target: identity crop at (0, 0)
        let (ci, _, off) =
            random_crop(&obs.image, &obs.dense_labels, obs.width, obs.height, (64, 64), &mut rng).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(ci, obs.image);
        // source smaller than target: error
        assert!(random_crop(&obs.image, &obs.dense_labels, 64, 64, (65, 64), &mut rng).is_err());
    }

    #[test]
    fn expansion_factor_is_exact_and_deterministic() {
        let observations: Vec<Observation> = (0..4).map(|i| sample_obs(100 + i)).collect();
        let mut policy = AugmentPolicy { crop: Some((48, 48)), ..AugmentPolicy::default() };
        policy.expansion_factor = 7;
        let a = expand_dataset(&observations, &policy, 9).unwrap();
        assert_eq!(a.len(), 28);
        let b = expand_dataset(&observations, &policy, 9).unwrap();
        assert_eq!(a, b, "same seed twice is byte-identical");

        policy.expansion_factor = 1;
        policy.crop = None;
        let one = expand_dataset(&observations, &policy, 9).unwrap();
        assert_eq!(one.len(), 4);
        for (pair, obs) in one.iter().zip(&observations) {
            assert_eq!(pair.image, obs.image, "factor 1 returns the input set");
        }
    }

    #[test]
    fn policy_text_round_trips() {
        let p = AugmentPolicy {
            rotation_deg: 7.5,
            shift_frac: 0.05,
            channel_shift: 10,
            flip_horizontal: false,
            rescale: (0.9, 1.2),
            crop: Some((64, 48)),
            expansion_factor: 3,
            apply_to: ApplyTo::All,
        };
        let text = p.to_text();
        assert_eq!(AugmentPolicy::from_text(&text).unwrap(), p);
        assert!(AugmentPolicy::from_text("nonsense").is_err());
        assert!(AugmentPolicy::from_text("expansion_factor=0").is_err());
    }
}
