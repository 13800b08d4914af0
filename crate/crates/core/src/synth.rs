//! Procedural humanoid images with ground-truth skeletons, masks and captions.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::body::{
    limits, BodyPart, BodyShape, Figure, JointAngles, LimbLengths, Shape, Skeleton,
};
use crate::caption::{serialize_caption, CaptionField, CaptionRecord};
use crate::image::ImageTensor;
use crate::rng::{derive_seed, substream};
use crate::structure;
use crate::{Error, Result};

pub const DEFAULT_HEIGHT: usize = 128;
pub const DEFAULT_WIDTH: usize = 64;
const FRAME_MARGIN: f32 = 2.0;
/// Minimum per-channel distance between the background and any figure colour.
pub const BACKGROUND_SEPARATION: f32 = 0.2;
const MAX_ATTEMPTS: usize = 400;

pub const GARMENT_COLORS: [(&str, [f32; 3]); 12] = [
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.08, 0.08, 0.08]),
    ("red", [0.80, 0.12, 0.12]),
    ("blue", [0.15, 0.30, 0.80]),
    ("green", [0.15, 0.60, 0.25]),
    ("yellow", [0.95, 0.85, 0.20]),
    ("pink", [0.95, 0.55, 0.70]),
    ("gray", [0.50, 0.50, 0.50]),
    ("brown", [0.45, 0.28, 0.12]),
    ("purple", [0.50, 0.20, 0.60]),
    ("orange", [0.95, 0.50, 0.10]),
    ("navy", [0.10, 0.12, 0.35]),
];

pub const HAIR_COLORS: [(&str, [f32; 3]); 5] = [
    ("black", [0.06, 0.05, 0.05]),
    ("blond", [0.90, 0.78, 0.45]),
    ("brown", [0.35, 0.20, 0.10]),
    ("red", [0.60, 0.20, 0.08]),
    ("gray", [0.65, 0.65, 0.65]),
];

pub const SKIN_TONES: [(&str, [f32; 3]); 3] = [
    ("white", [0.93, 0.78, 0.66]),
    ("asian", [0.88, 0.72, 0.55]),
    ("black", [0.45, 0.30, 0.22]),
];

const GLASSES_COLOR: [f32; 3] = [0.05, 0.05, 0.08];
const NECKLACE_COLOR: [f32; 3] = [0.85, 0.70, 0.25];
const WATCH_COLOR: [f32; 3] = [0.15, 0.15, 0.18];

pub fn garment_rgb(name: &str) -> Option<[f32; 3]> {
    GARMENT_COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

fn hair_rgb(name: &str) -> Option<[f32; 3]> {
    HAIR_COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperStyle {
    LongSleeve,
    ShortSleeve,
    TankTop,
}

impl UpperStyle {
    fn phrase(self) -> &'static str {
        match self {
            UpperStyle::LongSleeve => "long sleeve",
            UpperStyle::ShortSleeve => "short sleeve",
            UpperStyle::TankTop => "tank top",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerStyle {
    Shorts,
    Pants,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShoeStyle {
    Sneakers,
    Boots,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accessories {
    pub glasses: bool,
    pub hat: bool,
    pub necklace: bool,
    pub watch: bool,
    pub bag: bool,
}

/// Everything needed to render one humanoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanoidSpec {
    pub height: usize,
    pub width: usize,
    pub figure: Figure,
    pub ethnicity: String,
    pub age: String,
    pub gender: String,
    pub skin: [f32; 3],
    pub hair_color: String,
    pub upper_color: String,
    pub upper_style: UpperStyle,
    pub lower_color: String,
    pub lower_style: LowerStyle,
    pub shoe_color: String,
    pub shoe_style: ShoeStyle,
    pub hat_color: String,
    pub bag_color: String,
    pub accessories: Accessories,
    pub background: [f32; 3],
}

/// Optional overrides for [`generate_sample`]; unset fields are sampled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConstraints {
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub angles: Option<JointAngles>,
    pub scale: Option<f32>,
    pub glasses: Option<bool>,
    pub hat: Option<bool>,
    pub necklace: Option<bool>,
    pub watch: Option<bool>,
    pub bag: Option<bool>,
    pub upper_color: Option<String>,
    pub lower_color: Option<String>,
    pub background: Option<[f32; 3]>,
}

/// What a painted shape depicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeLabel {
    Body(BodyShape),
    Hat,
    Glasses,
    Necklace,
    Watch,
    Bag,
}

impl ShapeLabel {
    pub fn part(self) -> Option<BodyPart> {
        match self {
            ShapeLabel::Body(b) => Some(b.part()),
            ShapeLabel::Hat | ShapeLabel::Glasses | ShapeLabel::Necklace => Some(BodyPart::Head),
            ShapeLabel::Watch => Some(BodyPart::Hands),
            ShapeLabel::Bag => None,
        }
    }
}

/// Per-pixel part labels; `None` is background or a non-part foreground item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartMasks {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Option<BodyPart>>,
}

impl PartMasks {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![None; height * width],
        }
    }

    pub fn mask(&self, part: BodyPart) -> ImageTensor {
        ImageTensor::from_fn(self.height, self.width, 1, |y, x, _| {
            f32::from(self.labels[y * self.width + x] == Some(part))
        })
    }

    pub fn masks(&self) -> Vec<ImageTensor> {
        BodyPart::ALL.iter().map(|p| self.mask(*p)).collect()
    }

    pub fn pixel_count(&self, part: BodyPart) -> usize {
        self.labels.iter().filter(|l| **l == Some(part)).count()
    }

    /// Label map with 50 grey levels per part index (0 = none).
    pub fn to_label_image(&self) -> ImageTensor {
        ImageTensor::from_fn(self.height, self.width, 1, |y, x, _| {
            match self.labels[y * self.width + x] {
                None => 0.0,
                Some(p) => (p.index() as f32 + 1.0) * 50.0 / 255.0,
            }
        })
    }

    pub fn from_label_image(img: &ImageTensor) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::Shape(format!(
                "part label image must have 1 channel, got {}",
                img.channels()
            )));
        }
        let labels = img
            .data()
            .iter()
            .map(|v| {
                let k = (v * 255.0 / 50.0).round() as usize;
                match k {
                    0 => Ok(None),
                    1..=5 => Ok(Some(BodyPart::ALL[k - 1])),
                    _ => Err(Error::InvalidArgument(format!("bad part label value {v}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height: img.height(),
            width: img.width(),
            labels,
        })
    }

    /// Swaps the pixels of two parts.
    pub fn swapped(&self, a: BodyPart, b: BodyPart) -> Self {
        let labels = self
            .labels
            .iter()
            .map(|l| match *l {
                Some(p) if p == a => Some(b),
                Some(p) if p == b => Some(a),
                other => other,
            })
            .collect();
        Self {
            labels,
            ..self.clone()
        }
    }

    pub fn translate(&self, dy: isize, dx: isize) -> Self {
        let mut out = Self::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let sy = y as isize - dy;
                let sx = x as isize - dx;
                if sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width {
                    out.labels[y * self.width + x] = self.labels[sy as usize * self.width + sx as usize];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct HumanoidSample {
    pub image: ImageTensor,
    pub skeleton: Skeleton,
    pub foreground: ImageTensor,
    pub parts: PartMasks,
    pub caption: CaptionRecord,
    pub spec: HumanoidSpec,
}

impl HumanoidSample {
    /// Disjointness is structural; this checks the remaining invariants:
    /// parts inside the foreground, frame fit, caption/accessory agreement.
    pub fn check_invariants(&self) -> Result<()> {
        let (h, w) = (self.image.height(), self.image.width());
        for (i, l) in self.parts.labels.iter().enumerate() {
            if l.is_some() && self.foreground.data()[i] < 0.5 {
                return Err(Error::InvalidArgument(format!("part pixel {i} outside foreground")));
            }
        }
        let m = FRAME_MARGIN as usize;
        for y in 0..h {
            for x in 0..w {
                let inner = y >= m && x >= m && y < h - m && x < w - m;
                if !inner && self.foreground.get(y, x, 0) > 0.0 {
                    return Err(Error::InvalidArgument(format!("foreground at margin pixel ({y},{x})")));
                }
            }
        }
        if !self.skeleton.is_valid(h, w) {
            return Err(Error::InvalidArgument("skeleton outside frame".into()));
        }
        let acc = &self.spec.accessories;
        let cap = &self.caption;
        let checks = [
            (acc.glasses, cap.accessory_on_face.as_deref().is_some_and(|s| s.contains("sunglasses"))),
            (acc.necklace, cap.accessory_on_neck.as_deref().is_some_and(|s| s.contains("necklace"))),
            (acc.watch, cap.accessory_on_hands.as_deref().is_some_and(|s| s.contains("watch"))),
            (acc.bag, cap.carried_items.as_deref().is_some_and(|s| s.contains("bag"))),
            (acc.hat, cap.hair.as_deref().is_some_and(|s| s.contains("hat"))),
        ];
        if checks.iter().any(|(flag, seen)| flag != seen) {
            return Err(Error::InvalidArgument("caption disagrees with accessory flags".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    rng.random_range(lo..=hi)
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty choice list")
}

fn garment(rng: &mut impl Rng) -> String {
    pick(rng, &GARMENT_COLORS).0.to_string()
}

fn check_limits(a: &JointAngles) -> Result<()> {
    let checks = [
        ("torso_lean", a.torso_lean, limits::TORSO_LEAN),
        ("head_tilt", a.head_tilt, limits::HEAD_TILT),
        ("shoulder_l", a.shoulder_l, limits::SHOULDER),
        ("shoulder_r", a.shoulder_r, limits::SHOULDER),
        ("elbow_l", a.elbow_l, limits::ELBOW),
        ("elbow_r", a.elbow_r, limits::ELBOW),
        ("hip_l", a.hip_l, limits::HIP),
        ("hip_r", a.hip_r, limits::HIP),
        ("knee_l", a.knee_l, limits::KNEE),
        ("knee_r", a.knee_r, limits::KNEE),
    ];
    for (name, v, (lo, hi)) in checks {
        if !(lo..=hi).contains(&v) {
            return Err(Error::Unrenderable(format!("{name}={v} outside [{lo}, {hi}]")));
        }
    }
    Ok(())
}

fn sample_angles(rng: &mut impl Rng) -> JointAngles {
    JointAngles {
        torso_lean: uniform(rng, limits::TORSO_LEAN),
        head_tilt: uniform(rng, limits::HEAD_TILT),
        shoulder_l: uniform(rng, limits::SHOULDER),
        shoulder_r: uniform(rng, limits::SHOULDER),
        elbow_l: uniform(rng, limits::ELBOW),
        elbow_r: uniform(rng, limits::ELBOW),
        hip_l: uniform(rng, limits::HIP),
        hip_r: uniform(rng, limits::HIP),
        knee_l: uniform(rng, limits::KNEE),
        knee_r: uniform(rng, limits::KNEE),
    }
}

fn linf(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f32::max)
}

impl HumanoidSpec {
    fn figure_colors(&self) -> Vec<[f32; 3]> {
        let mut cols = vec![
            self.skin,
            hair_rgb(&self.hair_color).unwrap_or([0.0; 3]),
            garment_rgb(&self.upper_color).unwrap_or([0.0; 3]),
            garment_rgb(&self.lower_color).unwrap_or([0.0; 3]),
            garment_rgb(&self.shoe_color).unwrap_or([0.0; 3]),
        ];
        let a = &self.accessories;
        if a.hat {
            cols.push(garment_rgb(&self.hat_color).unwrap_or([0.0; 3]));
        }
        if a.bag {
            cols.push(garment_rgb(&self.bag_color).unwrap_or([0.0; 3]));
        }
        if a.glasses {
            cols.push(GLASSES_COLOR);
        }
        if a.necklace {
            cols.push(NECKLACE_COLOR);
        }
        if a.watch {
            cols.push(WATCH_COLOR);
        }
        cols
    }

    /// Shapes in paint order with their colours and labels.
    pub fn shapes(&self) -> Vec<(ShapeLabel, Shape, [f32; 3])> {
        let fig = &self.figure;
        let lay = fig.layout();
        let u = fig.unit;
        let skin = self.skin;
        let upper = garment_rgb(&self.upper_color).unwrap_or([0.0; 3]);
        let lower = garment_rgb(&self.lower_color).unwrap_or([0.0; 3]);
        let shoes = garment_rgb(&self.shoe_color).unwrap_or([0.0; 3]);
        let hair = hair_rgb(&self.hair_color).unwrap_or([0.0; 3]);
        let mut out = Vec::new();
        for (kind, shape) in fig.body_shapes() {
            use BodyShape::*;
            let color = match kind {
                ThighL | ThighR => lower,
                ShinL | ShinR => match self.lower_style {
                    LowerStyle::Pants => lower,
                    LowerStyle::Shorts => skin,
                },
                FootL | FootR => shoes,
                Torso => upper,
                Neck | Head | HandL | HandR => skin,
                Hair => hair,
                UpperArmL | UpperArmR => match self.upper_style {
                    UpperStyle::TankTop => skin,
                    _ => upper,
                },
                ForearmL | ForearmR => match self.upper_style {
                    UpperStyle::LongSleeve => upper,
                    _ => skin,
                },
            };
            out.push((ShapeLabel::Body(kind), shape, color));
            let head = lay.joints[0];
            let r = lay.head_radius;
            match kind {
                Hair => {
                    if self.accessories.hat {
                        let hat = garment_rgb(&self.hat_color).unwrap_or([0.0; 3]);
                        let top = head[1] - r;
                        out.push((
                            ShapeLabel::Hat,
                            Shape::capsule(
                                [head[0] - r - 2.0 * u, top + 1.0 * u],
                                [head[0] + r + 2.0 * u, top + 1.0 * u],
                                1.2 * u,
                            ),
                            hat,
                        ));
                        out.push((
                            ShapeLabel::Hat,
                            Shape::RoundBox {
                                c: [head[0], top - 1.5 * u],
                                half: [0.75 * r, 3.0 * u],
                                round: 1.0 * u,
                            },
                            hat,
                        ));
                    }
                    if self.accessories.glasses {
                        let y = head[1] - 0.1 * r;
                        out.push((
                            ShapeLabel::Glasses,
                            Shape::capsule([head[0] - 0.75 * r, y], [head[0] + 0.75 * r, y], 1.2 * u),
                            GLASSES_COLOR,
                        ));
                    }
                    if self.accessories.necklace {
                        let n = lay.joints[1];
                        let y = n[1] + 1.0 * u;
                        out.push((
                            ShapeLabel::Necklace,
                            Shape::capsule([n[0] - 3.2 * u, y], [n[0] + 3.2 * u, y], 0.9 * u),
                            NECKLACE_COLOR,
                        ));
                    }
                }
                ForearmL if self.accessories.watch => {
                    let el = lay.joints[4];
                    let hand = lay.joints[6];
                    let d = [hand[0] - el[0], hand[1] - el[1]];
                    let len = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-6);
                    let d = [d[0] / len, d[1] / len];
                    let c = [hand[0] - d[0] * 3.5 * u, hand[1] - d[1] * 3.5 * u];
                    let p = [-d[1] * 2.4 * u, d[0] * 2.4 * u];
                    out.push((
                        ShapeLabel::Watch,
                        Shape::capsule([c[0] - p[0], c[1] - p[1]], [c[0] + p[0], c[1] + p[1]], 1.1 * u),
                        WATCH_COLOR,
                    ));
                }
                _ => {}
            }
        }
        if self.accessories.bag {
            let hand = lay.joints[7];
            out.push((
                ShapeLabel::Bag,
                Shape::RoundBox {
                    c: [hand[0] - 1.0 * u, hand[1] + 6.0 * u],
                    half: [5.0 * u, 4.5 * u],
                    round: 1.5 * u,
                },
                garment_rgb(&self.bag_color).unwrap_or([0.0; 3]),
            ));
        }
        out
    }

    fn fits_frame(&self) -> bool {
        let (w, h) = (self.width as f32, self.height as f32);
        let m = FRAME_MARGIN;
        self.shapes().iter().all(|(_, s, _)| {
            let [x0, y0, x1, y1] = s.bounds();
            x0 >= m && y0 >= m && x1 <= w - m && y1 <= h - m
        })
    }

    pub fn caption(&self) -> CaptionRecord {
        let mut c = CaptionRecord::default();
        let mut put = |f: CaptionField, s: String| {
            c.set(f, &s).expect("generator phrases contain no commas");
        };
        put(
            CaptionField::Identity,
            format!("{} {} {}", self.ethnicity, self.age, self.gender),
        );
        let hair = if self.accessories.hat {
            format!("{} hair with {} hat", self.hair_color, self.hat_color)
        } else {
            format!("{} hair", self.hair_color)
        };
        put(CaptionField::Hair, hair);
        if self.accessories.glasses {
            put(CaptionField::AccessoryOnFace, "sunglasses".into());
        }
        if self.accessories.necklace {
            put(CaptionField::AccessoryOnNeck, "necklace".into());
        }
        put(
            CaptionField::UpperGarment,
            format!("{} {}", self.upper_color, self.upper_style.phrase()),
        );
        if self.accessories.watch {
            put(CaptionField::AccessoryOnHands, "wearing a watch".into());
        }
        let lower = match self.lower_style {
            LowerStyle::Shorts => "shorts",
            LowerStyle::Pants => "pants",
        };
        put(CaptionField::LowerGarment, format!("{} {lower}", self.lower_color));
        let shoes = match self.shoe_style {
            ShoeStyle::Sneakers => "sneakers",
            ShoeStyle::Boots => "boots",
        };
        put(CaptionField::Shoes, format!("{} {shoes}", self.shoe_color));
        if self.accessories.bag {
            put(CaptionField::CarriedItems, "carrying tote bag".into());
        }
        c
    }
}

fn sample_spec(rng: &mut impl RngCore, c: &SpecConstraints) -> Result<HumanoidSpec> {
    let height = c.height.unwrap_or(DEFAULT_HEIGHT);
    let width = c.width.unwrap_or(DEFAULT_WIDTH);
    if height < 32 || width < 16 {
        return Err(Error::Unrenderable(format!("frame {height}x{width} too small")));
    }
    for name in [&c.upper_color, &c.lower_color].into_iter().flatten() {
        if garment_rgb(name).is_none() {
            return Err(Error::Unrenderable(format!("unknown garment colour {name:?}")));
        }
    }
    if let Some(a) = &c.angles {
        check_limits(a)?;
    }
    if let Some(s) = c.scale {
        if !(limits::SCALE.0..=limits::SCALE.1).contains(&s) {
            return Err(Error::Unrenderable(format!("scale {s} outside limits")));
        }
    }
    let unit = height as f32 / DEFAULT_HEIGHT as f32;
    for _ in 0..MAX_ATTEMPTS {
        let scale = c.scale.unwrap_or_else(|| uniform(rng, limits::SCALE));
        let mut lengths = LimbLengths::scaled(scale * unit);
        for v in [
            &mut lengths.upper_arm,
            &mut lengths.forearm,
            &mut lengths.thigh,
            &mut lengths.shin,
            &mut lengths.torso,
        ] {
            *v *= 1.0 + rng.random_range(-0.03f32..=0.03);
        }
        let angles = c.angles.unwrap_or_else(|| sample_angles(rng));
        let upper_extent = lengths.torso + lengths.neck + 2.0 * lengths.head_radius;
        let lower_extent = lengths.thigh + lengths.shin;
        let pelvis = [
            width as f32 / 2.0 + rng.random_range(-3.0f32..=3.0) * unit,
            height as f32 / 2.0 + (upper_extent - lower_extent) / 2.0 + 2.0 * unit
                + rng.random_range(-3.0f32..=3.0) * unit,
        ];
        let figure = Figure { pelvis, unit, lengths, angles };
        let (ethnicity, skin) = *pick(rng, &SKIN_TONES);
        let jitter = rng.random_range(-0.03f32..=0.03);
        let skin = skin.map(|v| (v + jitter).clamp(0.0, 1.0));
        let age = if rng.random_bool(0.7) { "young" } else { "old" };
        let gender = *pick(rng, &["woman", "man"]);
        let hair_color = if age == "old" && rng.random_bool(0.5) {
            "gray"
        } else {
            pick(rng, &HAIR_COLORS).0
        };
        let upper_color = c.upper_color.clone().unwrap_or_else(|| garment(rng));
        let lower_color = c.lower_color.clone().unwrap_or_else(|| garment(rng));
        let shoe_color = garment(rng);
        let hat_color = garment(rng);
        let bag_color = garment(rng);
        let upper_style = *pick(rng, &[UpperStyle::LongSleeve, UpperStyle::ShortSleeve, UpperStyle::TankTop]);
        let lower_style = *pick(rng, &[LowerStyle::Shorts, LowerStyle::Pants]);
        let shoe_style = *pick(rng, &[ShoeStyle::Sneakers, ShoeStyle::Boots]);
        let accessories = Accessories {
            glasses: c.glasses.unwrap_or_else(|| rng.random_bool(0.3)),
            hat: c.hat.unwrap_or_else(|| rng.random_bool(0.25)),
            necklace: c.necklace.unwrap_or_else(|| rng.random_bool(0.2)),
            watch: c.watch.unwrap_or_else(|| rng.random_bool(0.3)),
            bag: c.bag.unwrap_or_else(|| rng.random_bool(0.25)),
        };
        let mut spec = HumanoidSpec {
            height,
            width,
            figure,
            ethnicity: ethnicity.to_string(),
            age: age.to_string(),
            gender: gender.to_string(),
            skin,
            hair_color: hair_color.to_string(),
            upper_color,
            upper_style,
            lower_color,
            lower_style,
            shoe_color,
            shoe_style,
            hat_color,
            bag_color,
            accessories,
            background: [0.0; 3],
        };
        let colors = spec.figure_colors();
        let separated = |bg: [f32; 3]| colors.iter().all(|c| linf(*c, bg) >= BACKGROUND_SEPARATION);
        let background = match c.background {
            Some(bg) => {
                if !separated(bg) || bg.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    if c.upper_color.is_some() && c.lower_color.is_some() {
                        return Err(Error::Unrenderable(
                            "background too close to a figure colour".into(),
                        ));
                    }
                    continue;
                }
                bg
            }
            None => {
                let mut found = None;
                for _ in 0..64 {
                    let bg = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
                    if separated(bg) {
                        found = Some(bg);
                        break;
                    }
                }
                match found {
                    Some(bg) => bg,
                    None => continue,
                }
            }
        };
        spec.background = background;
        if spec.fits_frame() {
            return Ok(spec);
        }
    }
    Err(Error::Unrenderable(format!(
        "no figure fits a {height}x{width} frame under the given constraints"
    )))
}

/// Paints a spec. Coverage is a one-pixel linear ramp of the signed distance;
/// each pixel's part label comes from the topmost shape covering its centre.
pub fn render(spec: &HumanoidSpec) -> (ImageTensor, ImageTensor, PartMasks) {
    let (h, w) = (spec.height, spec.width);
    let mut img = ImageTensor::from_fn(h, w, 3, |_, _, c| spec.background[c]);
    let mut fg = ImageTensor::zeros(h, w, 1);
    let mut parts = PartMasks::empty(h, w);
    for (label, shape, color) in spec.shapes() {
        shape.for_each_pixel(h, w, |y, x, d| {
            let alpha = (0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                for (c, col) in color.iter().enumerate() {
                    let v = img.get(y, x, c);
                    img.set(y, x, c, v + (col - v) * alpha);
                }
            }
            if d <= 0.0 {
                fg.set(y, x, 0, 1.0);
                parts.labels[y * w + x] = label.part();
            }
        });
    }
    (img, fg, parts)
}

pub fn sample_from_spec(spec: HumanoidSpec) -> HumanoidSample {
    let (image, foreground, parts) = render(&spec);
    HumanoidSample {
        image,
        skeleton: spec.figure.skeleton(),
        foreground,
        parts,
        caption: spec.caption(),
        spec,
    }
}

/// Deterministic sample for `seed`, honouring any constraints.
pub fn generate_sample(seed: u64, constraints: Option<&SpecConstraints>) -> Result<HumanoidSample> {
    let default = SpecConstraints::default();
    let mut rng = substream(seed, "humanoid", 0);
    let spec = sample_spec(&mut rng, constraints.unwrap_or(&default))?;
    Ok(sample_from_spec(spec))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Held-out fraction as an exact ratio; the test count is `floor(n * num / den)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatio {
    pub test_num: u64,
    pub test_den: u64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            test_num: 1,
            test_den: 11,
        }
    }
}

impl SplitRatio {
    pub fn test_count(&self, n: usize) -> Result<usize> {
        if self.test_den == 0 || self.test_num > self.test_den {
            return Err(Error::Config(format!(
                "invalid split ratio {}/{}",
                self.test_num, self.test_den
            )));
        }
        Ok(((n as u128 * self.test_num as u128) / self.test_den as u128) as usize)
    }

    /// The last `test_count(n)` items are the test split.
    pub fn split_of(&self, index: usize, n: usize) -> Result<Split> {
        Ok(if index >= n - self.test_count(n)? {
            Split::Test
        } else {
            Split::Train
        })
    }
}

/// One line of a dataset manifest. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub pose: String,
    pub attn: String,
    pub parts: String,
    pub caption: String,
    pub split: Split,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

pub fn sample_id(index: usize) -> String {
    format!("h{index:06}")
}

/// Writes `n` samples with pose, attention and part-label sidecars plus a
/// JSONL manifest, and returns the manifest path.
pub fn generate_dataset(n: usize, seed: u64, out_dir: &Path, split: SplitRatio) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let test = split.test_count(n)?;
    let manifest = out_dir.join(MANIFEST_NAME);
    let mut lines = String::new();
    for i in 0..n {
        let s = derive_seed(seed, "sample", i as u64);
        let sample = generate_sample(s, None)?;
        let id = sample_id(i);
        let entry = ManifestEntry {
            image: format!("{id}.png"),
            pose: format!("{id}_pose.png"),
            attn: format!("{id}_attn.png"),
            parts: format!("{id}_parts.png"),
            caption: serialize_caption(&sample.caption),
            split: if i >= n - test { Split::Test } else { Split::Train },
            id,
        };
        let (h, w) = (sample.image.height(), sample.image.width());
        sample.image.save_png(&out_dir.join(&entry.image))?;
        structure::render_pose_map(&sample.skeleton, h, w).save_png(&out_dir.join(&entry.pose))?;
        structure::oracle_attention(&sample.foreground).save_png(&out_dir.join(&entry.attn))?;
        sample.parts.to_label_image().save_png(&out_dir.join(&entry.parts))?;
        lines.push_str(&serde_json::to_string(&entry)?);
        lines.push('\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::parse_caption;

    #[test]
    fn same_seed_same_sample() {
        let a = generate_sample(7, None).unwrap();
        let b = generate_sample(7, None).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.parts, b.parts);
        assert_eq!(a.caption, b.caption);
        let c = generate_sample(8, None).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn invariants_hold_over_many_seeds() {
        for seed in 0..150 {
            let s = generate_sample(seed, None).unwrap();
            s.check_invariants().unwrap();
            let p = parse_caption(&serialize_caption(&s.caption));
            assert_eq!(p.record, s.caption);
            assert!(p.warnings.is_empty());
        }
    }

    #[test]
    fn glasses_constraint_shows_in_caption_and_head() {
        let c = SpecConstraints {
            glasses: Some(true),
            ..Default::default()
        };
        let s = generate_sample(3, Some(&c)).unwrap();
        assert_eq!(s.caption.accessory_on_face.as_deref(), Some("sunglasses"));
        let head = s.skeleton.joint("head").unwrap();
        let (y, x) = (head.y as usize, head.x as usize);
        let px = (0..3).map(|c| s.image.get(y.saturating_sub(1), x, c)).collect::<Vec<_>>();
        assert!(px.iter().all(|v| (v - GLASSES_COLOR[0]).abs() < 0.1), "{px:?}");
        assert_eq!(s.parts.labels[(y - 1) * s.image.width() + x], Some(BodyPart::Head));
    }

    #[test]
    fn impossible_constraints_are_unrenderable() {
        let c = SpecConstraints {
            upper_color: Some("white".into()),
            lower_color: Some("white".into()),
            background: Some([0.95, 0.95, 0.95]),
            ..Default::default()
        };
        assert!(matches!(generate_sample(1, Some(&c)), Err(Error::Unrenderable(_))));
        let tiny = SpecConstraints {
            width: Some(20),
            ..Default::default()
        };
        assert!(matches!(generate_sample(1, Some(&tiny)), Err(Error::Unrenderable(_))));
    }

    #[test]
    fn label_image_round_trips_through_png() {
        let s = generate_sample(11, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("parts.png");
        s.parts.to_label_image().save_png(&p).unwrap();
        let back = PartMasks::from_label_image(&ImageTensor::load_png(&p).unwrap()).unwrap();
        assert_eq!(back, s.parts);
    }

    #[test]
    fn split_floor_rule() {
        let r = SplitRatio::default();
        assert_eq!(r.test_count(2200).unwrap(), 200);
        assert_eq!(r.test_count(10).unwrap(), 0);
        assert_eq!(r.test_count(11).unwrap(), 1);
        assert_eq!(r.split_of(10, 11).unwrap(), Split::Test);
        assert_eq!(r.split_of(9, 11).unwrap(), Split::Train);
    }
}
