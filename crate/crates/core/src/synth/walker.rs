//! Articulated stick-and-ellipse walker rendered as binary silhouettes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Body proportions and gait kinematics of one synthetic identity. Lengths
/// are in pixels of the canonical (unscaled, unsheared) view.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkerIdentity {
    pub thigh: f64,
    pub shin: f64,
    pub upper_arm: f64,
    pub lower_arm: f64,
    pub torso_width: f64,
    pub torso_height: f64,
    pub head_radius: f64,
    /// Cycles per frame, in `[0.02, 0.12]`.
    pub frequency: f64,
    /// Radians.
    pub phase: f64,
    /// Peak hip swing in radians.
    pub amplitude: f64,
    /// Limb thickness in pixels, in `[2, 3]`.
    pub limb_width: f64,
}

impl WalkerIdentity {
    pub fn validate(&self) -> Result<()> {
        let lengths = [
            self.thigh,
            self.shin,
            self.upper_arm,
            self.lower_arm,
            self.torso_width,
            self.torso_height,
            self.head_radius,
        ];
        if lengths.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Geometry(format!("non-positive body length in {self:?}")));
        }
        if !(0.02..=0.12).contains(&self.frequency) {
            return Err(Error::Geometry(format!("gait frequency {} outside [0.02, 0.12]", self.frequency)));
        }
        if !(2.0..=3.0).contains(&self.limb_width) {
            return Err(Error::Geometry(format!("limb width {} outside [2, 3]", self.limb_width)));
        }
        if !(self.amplitude >= 0.0 && self.amplitude < PI / 2.0) {
            return Err(Error::Geometry(format!("stride amplitude {} outside [0, pi/2)", self.amplitude)));
        }
        Ok(())
    }

    /// Draws an identity whose body fits a `height`-row frame at every phase.
    pub fn random(rng: &mut impl Rng, height: usize) -> Self {
        let s = height as f64 / 32.0;
        Self {
            thigh: rng.gen_range(4.0..7.0) * s,
            shin: rng.gen_range(4.0..6.0) * s,
            upper_arm: rng.gen_range(3.0..5.0) * s,
            lower_arm: rng.gen_range(2.5..4.5) * s,
            torso_width: rng.gen_range(4.5..8.0) * s,
            torso_height: rng.gen_range(7.0..9.0) * s,
            head_radius: rng.gen_range(2.0..3.0) * s,
            frequency: rng.gen_range(0.06..0.12),
            phase: rng.gen_range(0.0..2.0 * PI),
            amplitude: rng.gen_range(0.25..0.55),
            limb_width: rng.gen_range(2.0..3.0),
        }
    }

    /// Phase of the leading leg at frame `t`.
    pub fn phase_at(&self, t: usize) -> f64 {
        2.0 * PI * self.frequency * t as f64 + self.phase
    }

    /// Hip angle of the leading leg at frame `t`: `amplitude * sin(phase)`.
    pub fn leg_angle(&self, t: usize) -> f64 {
        self.amplitude * self.phase_at(t).sin()
    }
}

/// Scale and horizontal shear applied about the frame's bottom center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub scale: f64,
    pub shear: f64,
}

impl Default for View {
    fn default() -> Self {
        Self { scale: 1.0, shear: 0.0 }
    }
}

/// Walking condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Covariate {
    /// Normal walking.
    Nm,
    /// Carrying a bag.
    Bg,
    /// Wearing a coat.
    Cl,
}

impl Covariate {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Nm => "NM",
            Self::Bg => "BG",
            Self::Cl => "CL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "NM" => Ok(Self::Nm),
            "BG" => Ok(Self::Bg),
            "CL" => Ok(Self::Cl),
            _ => Err(Error::Config(format!("unknown covariate {s:?}"))),
        }
    }
}

/// A binary `[T, H, W]` silhouette sequence with its region masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteSequence {
    pub len: usize,
    pub height: usize,
    pub width: usize,
    /// `len * height * width` values in {0, 1}.
    pub frames: Vec<u8>,
    pub id: usize,
    pub covariate: Covariate,
    pub view: View,
    /// Pixels swept by a limb in some frame and not covered by the static body.
    pub motion_mask: Vec<u8>,
    /// Torso, head and carried items.
    pub static_mask: Vec<u8>,
    /// Torso pixels only (before any covariate) plus coat dilation.
    pub torso_mask: Vec<u8>,
}

impl SilhouetteSequence {
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn foreground(&self) -> usize {
        self.frames.iter().map(|&v| v as usize).sum()
    }

    fn add_static(&mut self, region: &[u8]) {
        let n = self.height * self.width;
        for t in 0..self.len {
            for (f, &r) in self.frames[t * n..(t + 1) * n].iter_mut().zip(region) {
                *f |= r;
            }
        }
        for (s, &r) in self.static_mask.iter_mut().zip(region) {
            *s |= r;
        }
        for (m, &s) in self.motion_mask.iter_mut().zip(&self.static_mask) {
            *m &= 1 - s;
        }
    }
}

type Point = (f64, f64);

/// Canonical body layout for one frame: limb segments, torso ellipse, head.
struct Pose {
    limbs: Vec<(Point, Point)>,
    /// center, semi-axes
    torso: (Point, Point),
    head: (Point, f64),
}

struct Layout<'a> {
    id: &'a WalkerIdentity,
    cx: f64,
    hip_y: f64,
}

impl<'a> Layout<'a> {
    fn new(id: &'a WalkerIdentity, height: usize, width: usize, dx: f64) -> Self {
        let hip_y = height as f64 - 1.0 - id.limb_width / 2.0 - (id.thigh + id.shin);
        Self {
            id,
            cx: width as f64 / 2.0 + dx,
            hip_y,
        }
    }

    fn pose(&self, t: usize) -> Pose {
        let id = self.id;
        let hip = (self.cx, self.hip_y);
        let torso_c = (self.cx, self.hip_y - id.torso_height / 2.0 + 1.0);
        let shoulder = (self.cx, self.hip_y - id.torso_height + 2.0);
        let head_c = (self.cx, torso_c.1 - id.torso_height / 2.0 - id.head_radius + 0.5);
        let step = |from: Point, len: f64, ang: f64| (from.0 + len * ang.sin(), from.1 + len * ang.cos());
        let mut limbs = Vec::with_capacity(8);
        for side in [0.0, PI] {
            let w = id.phase_at(t) + side;
            let thigh = id.amplitude * w.sin();
            let flex = 0.5 * id.amplitude * (1.0 - w.cos());
            let knee = step(hip, id.thigh, thigh);
            let foot = step(knee, id.shin, thigh - flex);
            limbs.push((hip, knee));
            limbs.push((knee, foot));
            let arm = -0.8 * id.amplitude * w.sin();
            let elbow = step(shoulder, id.upper_arm, arm);
            let hand = step(elbow, id.lower_arm, arm + 0.3 * id.amplitude * (1.0 + w.cos()) / 2.0);
            limbs.push((shoulder, elbow));
            limbs.push((elbow, hand));
        }
        Pose {
            limbs,
            torso: (torso_c, (id.torso_width / 2.0, id.torso_height / 2.0)),
            head: (head_c, id.head_radius),
        }
    }
}

struct Affine {
    view: View,
    origin: Point,
}

impl Affine {
    fn forward(&self, (x, y): Point) -> Point {
        let (ox, oy) = self.origin;
        let (s, k) = (self.view.scale, self.view.shear);
        (ox + s * (x - ox) + k * (y - oy), oy + s * (y - oy))
    }

    fn inverse(&self, (x, y): Point) -> Point {
        let (ox, oy) = self.origin;
        let (s, k) = (self.view.scale, self.view.shear);
        let cy = oy + (y - oy) / s;
        (ox + (x - ox - k * (cy - oy)) / s, cy)
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let u = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - u * vx).powi(2) + (p.1 - a.1 - u * vy).powi(2)).sqrt()
}

fn in_ellipse(p: Point, (c, (a, b)): (Point, Point)) -> bool {
    ((p.0 - c.0) / a).powi(2) + ((p.1 - c.1) / b).powi(2) <= 1.0
}

fn in_disc(p: Point, (c, r): (Point, f64)) -> bool {
    (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r
}

fn check_inside(name: &str, t: usize, phase: f64, pts: &[Point], margin: f64, h: usize, w: usize) -> Result<()> {
    for &(x, y) in pts {
        if x - margin < 0.0 || y - margin < 0.0 || x + margin > w as f64 || y + margin > h as f64 {
            return Err(Error::Geometry(format!(
                "{name} leaves the {h}x{w} frame at frame {t} (phase {phase:.4} rad): point ({x:.2}, {y:.2})"
            )));
        }
    }
    Ok(())
}

/// Minimum foreground pixels of every rendered frame.
pub const MIN_FOREGROUND: usize = 50;

/// Renders `frames` frames of `identity` at `view`. `seed` sets a sub-pixel
/// horizontal placement; the same inputs always give the same sequence.
pub fn generate_walker(
    identity: &WalkerIdentity,
    id: usize,
    frames: usize,
    height: usize,
    width: usize,
    view: View,
    seed: u64,
) -> Result<SilhouetteSequence> {
    identity.validate()?;
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!("empty sequence {frames}x{height}x{width}")));
    }
    if !(view.scale > 0.0) || !view.shear.is_finite() {
        return Err(Error::Geometry(format!("invalid view {view:?}")));
    }
    let dx = ChaCha8Rng::seed_from_u64(seed).gen_range(-0.75..0.75);
    let layout = Layout::new(identity, height, width, dx);
    let affine = Affine {
        view,
        origin: (width as f64 / 2.0, height as f64 - 1.0),
    };
    let margin = identity.limb_width / 2.0 * view.scale;
    let mut poses = Vec::with_capacity(frames);
    for t in 0..frames {
        let pose = layout.pose(t);
        let phase = identity.phase_at(t);
        let ends: Vec<Point> = pose.limbs.iter().flat_map(|&(a, b)| [a, b]).map(|p| affine.forward(p)).collect();
        check_inside("limb", t, phase, &ends, margin, height, width)?;
        let ((tc, (ta, tb)), (hc, hr)) = (pose.torso, pose.head);
        let body = [
            (tc.0 - ta, tc.1 - tb),
            (tc.0 + ta, tc.1 - tb),
            (tc.0 - ta, tc.1 + tb),
            (tc.0 + ta, tc.1 + tb),
            (hc.0 - hr, hc.1 - hr),
            (hc.0 + hr, hc.1 - hr),
        ]
        .map(|p| affine.forward(p));
        check_inside("body", t, phase, &body, 0.0, height, width)?;
        poses.push(pose);
    }

    let n = height * width;
    let mut out = SilhouetteSequence {
        len: frames,
        height,
        width,
        frames: vec![0; frames * n],
        id,
        covariate: Covariate::Nm,
        view,
        motion_mask: vec![0; n],
        static_mask: vec![0; n],
        torso_mask: vec![0; n],
    };
    let half = identity.limb_width / 2.0;
    let pose0 = &poses[0];
    for r in 0..height {
        for c in 0..width {
            let q = affine.inverse((c as f64 + 0.5, r as f64 + 0.5));
            let torso = in_ellipse(q, pose0.torso);
            out.torso_mask[r * width + c] = torso as u8;
            out.static_mask[r * width + c] = (torso || in_disc(q, pose0.head)) as u8;
        }
    }
    for (t, pose) in poses.iter().enumerate() {
        for r in 0..height {
            for c in 0..width {
                let i = r * width + c;
                let q = affine.inverse((c as f64 + 0.5, r as f64 + 0.5));
                let limb = pose.limbs.iter().any(|&(a, b)| segment_distance(q, a, b) <= half);
                if limb && out.static_mask[i] == 0 {
                    out.motion_mask[i] = 1;
                }
                out.frames[t * n + i] = (limb || out.static_mask[i] == 1) as u8;
            }
        }
        let fg: usize = out.frame(t).iter().map(|&v| v as usize).sum();
        if fg < MIN_FOREGROUND {
            return Err(Error::Geometry(format!(
                "frame {t} has {fg} foreground pixels, fewer than {MIN_FOREGROUND}"
            )));
        }
    }
    Ok(out)
}

fn bbox(mask: &[u8], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v != 0) {
        let (r, c) = (i / width, i % width);
        b = Some(match b {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    b
}

/// Disc dilation of a binary `height x width` mask.
pub fn dilate(mask: &[u8], height: usize, width: usize, radius: usize) -> Vec<u8> {
    let r = radius as isize;
    let mut out = vec![0u8; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if mask[(y as usize) * width + x as usize] == 0 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if dy * dy + dx * dx <= r * r && yy >= 0 && xx >= 0 && yy < height as isize && xx < width as isize {
                        out[yy as usize * width + xx as usize] = 1;
                    }
                }
            }
        }
    }
    out
}

/// Applies a walking condition. `Bg` attaches a static filled blob in front
/// of the torso at hip height; `Cl` dilates the torso by 2-4 pixels. Sizes
/// are drawn from `seed`.
pub fn apply_covariate(seq: &SilhouetteSequence, covariate: Covariate, seed: u64) -> SilhouetteSequence {
    let mut out = seq.clone();
    out.covariate = covariate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (seq.height, seq.width);
    match covariate {
        Covariate::Nm => {}
        Covariate::Bg => {
            let Some((r0, r1, _, c1)) = bbox(&seq.torso_mask, w) else {
                return out;
            };
            let radius: f64 = rng.gen_range(2.0..3.5);
            let cy = r0 as f64 + 0.7 * (r1 - r0 + 1) as f64;
            let cx = c1 as f64 + 1.0;
            let mut blob = vec![0u8; h * w];
            for r in 0..h {
                for c in 0..w {
                    blob[r * w + c] = in_disc((c as f64 + 0.5, r as f64 + 0.5), ((cx, cy), radius)) as u8;
                }
            }
            out.add_static(&blob);
        }
        Covariate::Cl => {
            let radius = rng.gen_range(2..=4);
            let coat = dilate(&seq.torso_mask, h, w, radius);
            out.torso_mask = coat.clone();
            out.add_static(&coat);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident() -> WalkerIdentity {
        WalkerIdentity {
            thigh: 6.0,
            shin: 5.0,
            upper_arm: 4.0,
            lower_arm: 3.5,
            torso_width: 6.0,
            torso_height: 8.0,
            head_radius: 2.5,
            frequency: 0.08,
            phase: 0.7,
            amplitude: 0.45,
            limb_width: 2.5,
        }
    }

    #[test]
    fn static_when_amplitude_zero() {
        let id = WalkerIdentity { amplitude: 0.0, ..ident() };
        let s = generate_walker(&id, 0, 6, 32, 22, View::default(), 1).unwrap();
        for t in 1..6 {
            assert_eq!(s.frame(t), s.frame(0));
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_walker(&ident(), 0, 12, 32, 22, View::default(), 9).unwrap();
        let b = generate_walker(&ident(), 0, 12, 32, 22, View::default(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn leg_angle_at_zero() {
        let id = ident();
        assert_eq!(id.leg_angle(0), 0.45 * 0.7f64.sin());
    }

    #[test]
    fn masks_disjoint_and_frames_binary() {
        let s = generate_walker(&ident(), 0, 12, 32, 22, View { scale: 0.95, shear: 0.08 }, 3).unwrap();
        assert!(s.frames.iter().all(|&v| v <= 1));
        assert!(s.motion_mask.iter().zip(&s.static_mask).all(|(&m, &st)| m & st == 0));
        assert!(s.motion_mask.contains(&1));
    }

    #[test]
    fn oversized_limb_names_phase() {
        let id = WalkerIdentity { thigh: 20.0, ..ident() };
        let err = generate_walker(&id, 0, 12, 32, 22, View::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Geometry(ref m) if m.contains("phase")));
    }

    #[test]
    fn covariates() {
        let s = generate_walker(&ident(), 0, 12, 32, 22, View::default(), 0).unwrap();
        assert_eq!(apply_covariate(&s, Covariate::Nm, 1).frames, s.frames);
        let bg = apply_covariate(&s, Covariate::Bg, 1);
        assert!(bg.foreground() > s.foreground());
        let cl = apply_covariate(&s, Covariate::Cl, 1);
        let torso = |m: &[u8]| m.iter().filter(|&&v| v == 1).count();
        assert!(torso(&cl.torso_mask) > torso(&s.torso_mask));
        for (a, b) in s.frames.iter().zip(&cl.frames) {
            assert!(b >= a);
        }
    }
}
