//! The articulated stick-figure body shared by the procedural generator and
//! the silhouette-fitting pose heuristic.
//!
//! A [`Figure`] holds the kinematic parameters. Laying it out produces a
//! [`Skeleton`] (14 named joints) and a list of signed-distance shapes that
//! the generator paints and the fitter rasterises.

use serde::{Deserialize, Serialize};

/// The five body parts used for part masks and part features, in fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Head,
    Torso,
    Hands,
    Legs,
    Feet,
}

impl BodyPart {
    pub const ALL: [BodyPart; 5] = [
        BodyPart::Head,
        BodyPart::Torso,
        BodyPart::Hands,
        BodyPart::Legs,
        BodyPart::Feet,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Torso => "torso",
            BodyPart::Hands => "hands",
            BodyPart::Legs => "legs",
            BodyPart::Feet => "feet",
        }
    }
}

/// Joint table: `(name, is_left_side)`.
pub const JOINTS: [(&str, bool); 14] = [
    ("head", false),
    ("neck", false),
    ("l_shoulder", true),
    ("r_shoulder", false),
    ("l_elbow", true),
    ("r_elbow", false),
    ("l_hand", true),
    ("r_hand", false),
    ("l_hip", true),
    ("r_hip", false),
    ("l_knee", true),
    ("r_knee", false),
    ("l_foot", true),
    ("r_foot", false),
];

pub const JOINT_COUNT: usize = JOINTS.len();

/// Limb connectivity as joint-index pairs.
pub const LIMBS: [(usize, usize); 13] = [
    (0, 1),
    (1, 2),
    (1, 3),
    (2, 4),
    (4, 6),
    (3, 5),
    (5, 7),
    (1, 8),
    (1, 9),
    (8, 10),
    (10, 12),
    (9, 11),
    (11, 13),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

/// Ordered joints of one figure, in image pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

impl Skeleton {
    pub fn joint(&self, name: &str) -> Option<&Joint> {
        JOINTS
            .iter()
            .position(|(n, _)| *n == name)
            .map(|i| &self.joints[i])
    }

    /// Visible joints lie inside the image; the joint count matches the table.
    pub fn is_valid(&self, height: usize, width: usize) -> bool {
        self.joints.len() == JOINT_COUNT
            && self.joints.iter().all(|j| {
                !j.visible
                    || (j.x >= 0.0 && j.y >= 0.0 && j.x < width as f32 && j.y < height as f32)
            })
    }

    /// Mean Euclidean distance between corresponding visible joints.
    pub fn mean_error(&self, other: &Skeleton) -> f32 {
        let mut acc = 0.0;
        let mut n = 0;
        for (a, b) in self.joints.iter().zip(&other.joints) {
            if a.visible && b.visible {
                acc += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            f32::INFINITY
        } else {
            acc / n as f32
        }
    }
}

/// Nominal limb lengths in pixels at scale 1 for a 128x64 frame.
pub mod nominal {
    pub const TORSO: f32 = 32.0;
    pub const NECK: f32 = 5.0;
    pub const HEAD_RADIUS: f32 = 7.0;
    pub const SHOULDER_HALF: f32 = 8.0;
    pub const HIP_HALF: f32 = 5.0;
    pub const UPPER_ARM: f32 = 17.0;
    pub const FOREARM: f32 = 15.0;
    pub const THIGH: f32 = 23.0;
    pub const SHIN: f32 = 21.0;
    pub const FOOT: f32 = 6.0;
}

/// Fixed shape radii in pixels.
pub mod radii {
    pub const NECK: f32 = 2.5;
    pub const UPPER_ARM: f32 = 2.6;
    pub const FOREARM: f32 = 2.2;
    pub const HAND: f32 = 2.8;
    pub const THIGH: f32 = 3.6;
    pub const SHIN: f32 = 3.0;
    pub const FOOT: f32 = 2.2;
    pub const TORSO_ROUND: f32 = 1.5;
    pub const HAIR_EXTRA: f32 = 1.2;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbLengths {
    pub torso: f32,
    pub neck: f32,
    pub head_radius: f32,
    pub shoulder_half: f32,
    pub hip_half: f32,
    pub upper_arm: f32,
    pub forearm: f32,
    pub thigh: f32,
    pub shin: f32,
    pub foot: f32,
}

impl LimbLengths {
    pub fn scaled(s: f32) -> Self {
        use nominal::*;
        Self {
            torso: TORSO * s,
            neck: NECK * s,
            head_radius: HEAD_RADIUS * s,
            shoulder_half: SHOULDER_HALF * s,
            hip_half: HIP_HALF * s,
            upper_arm: UPPER_ARM * s,
            forearm: FOREARM * s,
            thigh: THIGH * s,
            shin: SHIN * s,
            foot: FOOT * s,
        }
    }
}

/// Joint angles in radians. Arm and leg angles measure outward rotation from
/// straight down; elbow and knee angles are added on top of them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAngles {
    pub torso_lean: f32,
    pub head_tilt: f32,
    pub shoulder_l: f32,
    pub shoulder_r: f32,
    pub elbow_l: f32,
    pub elbow_r: f32,
    pub hip_l: f32,
    pub hip_r: f32,
    pub knee_l: f32,
    pub knee_r: f32,
}

/// Articulation limits used by the generator and the fitter.
pub mod limits {
    pub const TORSO_LEAN: (f32, f32) = (-0.06, 0.06);
    pub const HEAD_TILT: (f32, f32) = (-0.15, 0.15);
    pub const SHOULDER: (f32, f32) = (0.12, 0.5);
    pub const ELBOW: (f32, f32) = (-0.25, 0.45);
    pub const HIP: (f32, f32) = (0.03, 0.22);
    pub const KNEE: (f32, f32) = (-0.15, 0.15);
    pub const SCALE: (f32, f32) = (0.92, 1.05);
}

/// Kinematic description of one figure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub pelvis: [f32; 2],
    /// Pixels per nominal pixel; 1 for a 128-pixel-tall frame.
    pub unit: f32,
    pub lengths: LimbLengths,
    pub angles: JointAngles,
}

type P = [f32; 2];

fn add(a: P, b: P) -> P {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: P, s: f32) -> P {
    [a[0] * s, a[1] * s]
}

/// Geometry of a laid-out figure.
#[derive(Clone, Debug)]
pub struct Layout {
    pub joints: [P; JOINT_COUNT],
    /// Unit vector pointing from the figure's right to its left (image right).
    pub across: P,
    /// Unit vector pointing down the torso.
    pub down: P,
    pub head_radius: f32,
    /// Lateral extent of the foot from the ankle, per side.
    pub toes: [P; 2],
}

impl Figure {
    pub fn layout(&self) -> Layout {
        let a = &self.angles;
        let l = &self.lengths;
        let (s, c) = a.torso_lean.sin_cos();
        let down = [-s, c];
        let across = [c, s];
        let up = scale(down, -1.0);
        let dir = |ang: f32, side: f32| -> P {
            // rotate `down` towards `side * across`
            add(scale(down, ang.cos()), scale(across, side * ang.sin()))
        };
        let pelvis = self.pelvis;
        let neck = add(pelvis, scale(up, l.torso));
        let (ts, tc) = a.head_tilt.sin_cos();
        let head_dir = add(scale(up, tc), scale(across, ts));
        let head = add(neck, scale(head_dir, l.neck + l.head_radius));
        let l_sh = add(neck, scale(across, l.shoulder_half));
        let r_sh = add(neck, scale(across, -l.shoulder_half));
        let l_el = add(l_sh, scale(dir(a.shoulder_l, 1.0), l.upper_arm));
        let r_el = add(r_sh, scale(dir(a.shoulder_r, -1.0), l.upper_arm));
        let l_hand = add(l_el, scale(dir(a.shoulder_l + a.elbow_l, 1.0), l.forearm));
        let r_hand = add(r_el, scale(dir(a.shoulder_r + a.elbow_r, -1.0), l.forearm));
        let l_hip = add(pelvis, scale(across, l.hip_half));
        let r_hip = add(pelvis, scale(across, -l.hip_half));
        let l_knee = add(l_hip, scale(dir(a.hip_l, 1.0), l.thigh));
        let r_knee = add(r_hip, scale(dir(a.hip_r, -1.0), l.thigh));
        let l_foot = add(l_knee, scale(dir(a.hip_l + a.knee_l, 1.0), l.shin));
        let r_foot = add(r_knee, scale(dir(a.hip_r + a.knee_r, -1.0), l.shin));
        let toes = [
            add(l_foot, scale(across, l.foot)),
            add(r_foot, scale(across, -l.foot)),
        ];
        Layout {
            joints: [
                head, neck, l_sh, r_sh, l_el, r_el, l_hand, r_hand, l_hip, r_hip, l_knee, r_knee,
                l_foot, r_foot,
            ],
            across,
            down,
            head_radius: l.head_radius,
            toes,
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        let lay = self.layout();
        Skeleton {
            joints: lay
                .joints
                .iter()
                .map(|p| Joint {
                    x: p[0],
                    y: p[1],
                    visible: true,
                })
                .collect(),
        }
    }

    /// The body shapes shared by rendering and fitting, in paint order.
    pub fn body_shapes(&self) -> Vec<(BodyShape, Shape)> {
        let lay = self.layout();
        let j = &lay.joints;
        let r = lay.head_radius;
        let u = self.unit;
        let mut out = Vec::with_capacity(20);
        use BodyShape::*;
        out.push((ThighL, Shape::capsule(j[8], j[10], radii::THIGH * u)));
        out.push((ThighR, Shape::capsule(j[9], j[11], radii::THIGH * u)));
        out.push((ShinL, Shape::capsule(j[10], j[12], radii::SHIN * u)));
        out.push((ShinR, Shape::capsule(j[11], j[13], radii::SHIN * u)));
        out.push((FootL, Shape::capsule(j[12], lay.toes[0], radii::FOOT * u)));
        out.push((FootR, Shape::capsule(j[13], lay.toes[1], radii::FOOT * u)));
        out.push((
            Torso,
            Shape::Quad {
                corners: [
                    j[2],
                    j[3],
                    add(j[9], scale(lay.across, -1.5 * u)),
                    add(j[8], scale(lay.across, 1.5 * u)),
                ],
                round: radii::TORSO_ROUND * u,
            },
        ));
        out.push((Neck, Shape::capsule(j[1], j[0], radii::NECK * u)));
        out.push((Head, Shape::Circle { c: j[0], r }));
        out.push((
            Hair,
            Shape::Cap {
                c: j[0],
                r: r + radii::HAIR_EXTRA * u,
                cut_y: j[0][1] - 0.15 * r,
            },
        ));
        out.push((UpperArmL, Shape::capsule(j[2], j[4], radii::UPPER_ARM * u)));
        out.push((UpperArmR, Shape::capsule(j[3], j[5], radii::UPPER_ARM * u)));
        out.push((ForearmL, Shape::capsule(j[4], j[6], radii::FOREARM * u)));
        out.push((ForearmR, Shape::capsule(j[5], j[7], radii::FOREARM * u)));
        out.push((HandL, Shape::Circle { c: j[6], r: radii::HAND * u }));
        out.push((HandR, Shape::Circle { c: j[7], r: radii::HAND * u }));
        out
    }
}

/// Which body element a shape paints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyShape {
    ThighL,
    ThighR,
    ShinL,
    ShinR,
    FootL,
    FootR,
    Torso,
    Neck,
    Head,
    Hair,
    UpperArmL,
    UpperArmR,
    ForearmL,
    ForearmR,
    HandL,
    HandR,
}

impl BodyShape {
    pub fn part(self) -> BodyPart {
        use BodyShape::*;
        match self {
            ThighL | ThighR | ShinL | ShinR => BodyPart::Legs,
            FootL | FootR => BodyPart::Feet,
            Torso | UpperArmL | UpperArmR => BodyPart::Torso,
            Neck | Head | Hair => BodyPart::Head,
            ForearmL | ForearmR | HandL | HandR => BodyPart::Hands,
        }
    }
}

/// Signed-distance primitives; negative inside.
#[derive(Clone, Copy, Debug)]
pub enum Shape {
    Capsule { a: P, b: P, r: f32 },
    Circle { c: P, r: f32 },
    /// Circle above the horizontal line `y = cut_y`.
    Cap { c: P, r: f32, cut_y: f32 },
    /// Convex quad (corners in order) inflated by `round`.
    Quad { corners: [P; 4], round: f32 },
    /// Axis-aligned box with rounded corners.
    RoundBox { c: P, half: P, round: f32 },
}

impl Shape {
    pub fn capsule(a: P, b: P, r: f32) -> Self {
        Shape::Capsule { a, b, r }
    }

    pub fn sdf(&self, x: f32, y: f32) -> f32 {
        match *self {
            Shape::Capsule { a, b, r } => {
                let pa = [x - a[0], y - a[1]];
                let ba = [b[0] - a[0], b[1] - a[1]];
                let denom = ba[0] * ba[0] + ba[1] * ba[1];
                let h = if denom > 0.0 {
                    ((pa[0] * ba[0] + pa[1] * ba[1]) / denom).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dx = pa[0] - ba[0] * h;
                let dy = pa[1] - ba[1] * h;
                (dx * dx + dy * dy).sqrt() - r
            }
            Shape::Circle { c, r } => ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt() - r,
            Shape::Cap { c, r, cut_y } => {
                let d = ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt() - r;
                d.max(y - cut_y)
            }
            Shape::Quad { corners, round } => {
                // Max of signed edge distances; exact inside, close enough
                // outside for one-pixel anti-aliasing.
                let mut inside = f32::NEG_INFINITY;
                let orient = {
                    let [p0, p1, p2, _] = corners;
                    let cross = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]);
                    if cross >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                };
                for i in 0..4 {
                    let p = corners[i];
                    let q = corners[(i + 1) % 4];
                    let ex = q[0] - p[0];
                    let ey = q[1] - p[1];
                    let len = (ex * ex + ey * ey).sqrt().max(1e-6);
                    // outward normal for the given orientation
                    let nx = ey / len * orient;
                    let ny = -ex / len * orient;
                    let d = (x - p[0]) * nx + (y - p[1]) * ny;
                    inside = inside.max(d);
                }
                inside - round
            }
            Shape::RoundBox { c, half, round } => {
                let qx = (x - c[0]).abs() - half[0] + round;
                let qy = (y - c[1]).abs() - half[1] + round;
                let ox = qx.max(0.0);
                let oy = qy.max(0.0);
                (ox * ox + oy * oy).sqrt() + qx.max(qy).min(0.0) - round
            }
        }
    }

    /// Conservative bounding box `(x0, y0, x1, y1)` of the zero level set.
    pub fn bounds(&self) -> [f32; 4] {
        match *self {
            Shape::Capsule { a, b, r } => [
                a[0].min(b[0]) - r,
                a[1].min(b[1]) - r,
                a[0].max(b[0]) + r,
                a[1].max(b[1]) + r,
            ],
            Shape::Circle { c, r } | Shape::Cap { c, r, .. } => {
                [c[0] - r, c[1] - r, c[0] + r, c[1] + r]
            }
            Shape::Quad { corners, round } => {
                let mut b = [f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY];
                for p in corners {
                    b[0] = b[0].min(p[0]);
                    b[1] = b[1].min(p[1]);
                    b[2] = b[2].max(p[0]);
                    b[3] = b[3].max(p[1]);
                }
                [b[0] - round, b[1] - round, b[2] + round, b[3] + round]
            }
            Shape::RoundBox { c, half, .. } => {
                [c[0] - half[0], c[1] - half[1], c[0] + half[0], c[1] + half[1]]
            }
        }
    }

    /// Visits pixels whose centres could be within one pixel of the shape,
    /// passing the signed distance at the pixel centre.
    pub fn for_each_pixel(&self, height: usize, width: usize, mut f: impl FnMut(usize, usize, f32)) {
        let [x0, y0, x1, y1] = self.bounds();
        let xs = (x0 - 1.5).floor().max(0.0) as usize;
        let ys = (y0 - 1.5).floor().max(0.0) as usize;
        let xe = ((x1 + 1.5).ceil().max(0.0) as usize).min(width);
        let ye = ((y1 + 1.5).ceil().max(0.0) as usize).min(height);
        for y in ys..ye {
            for x in xs..xe {
                f(y, x, self.sdf(x as f32 + 0.5, y as f32 + 0.5));
            }
        }
    }
}

/// Binary silhouette of the body shapes (pixel centre inside any shape).
pub fn rasterize_silhouette(shapes: &[Shape], height: usize, width: usize, out: &mut [bool]) {
    out.iter_mut().for_each(|v| *v = false);
    for s in shapes {
        s.for_each_pixel(height, width, |y, x, d| {
            if d <= 0.0 {
                out[y * width + x] = true;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn neutral() -> Figure {
        Figure {
            pelvis: [32.0, 66.0],
            unit: 1.0,
            lengths: LimbLengths::scaled(1.0),
            angles: JointAngles {
                torso_lean: 0.0,
                head_tilt: 0.0,
                shoulder_l: 0.3,
                shoulder_r: 0.3,
                elbow_l: 0.1,
                elbow_r: 0.1,
                hip_l: 0.1,
                hip_r: 0.1,
                knee_l: 0.0,
                knee_r: 0.0,
            },
        }
    }

    #[test]
    fn layout_is_mirror_symmetric_for_symmetric_angles() {
        let s = neutral().skeleton();
        let l = s.joint("l_hand").unwrap();
        let r = s.joint("r_hand").unwrap();
        assert!((l.x - 32.0 + (r.x - 32.0)).abs() < 1e-4);
        assert!((l.y - r.y).abs() < 1e-4);
        assert!(l.x > r.x, "figure's left appears on image right");
        assert!(s.is_valid(128, 64));
    }

    #[test]
    fn limbs_reference_valid_joints() {
        assert!(LIMBS.iter().all(|&(a, b)| a < JOINT_COUNT && b < JOINT_COUNT && a != b));
    }

    #[test]
    fn sdf_signs() {
        let c = Shape::capsule([0.0, 0.0], [10.0, 0.0], 2.0);
        assert!(c.sdf(5.0, 0.0) < 0.0);
        assert!((c.sdf(5.0, 3.0) - 1.0).abs() < 1e-6);
        let b = Shape::RoundBox { c: [0.0, 0.0], half: [4.0, 2.0], round: 1.0 };
        assert!(b.sdf(0.0, 0.0) < 0.0);
        assert!(b.sdf(5.0, 0.0) > 0.0);
        let lay = neutral();
        let torso = lay.body_shapes().into_iter().find(|(k, _)| *k == BodyShape::Torso).unwrap().1;
        assert!(torso.sdf(32.0, 50.0) < 0.0);
        assert!(torso.sdf(5.0, 50.0) > 0.0);
    }
}
