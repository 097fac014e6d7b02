//! Procedural multimodal dataset in the on-disk layout.
//!
//! Each pose is an articulated 14-joint skeleton lying supine on a bed, drawn
//! in the visible frame. Every modality pixel is mapped into that frame
//! through its alignment affine and shaded from the same body model, so all
//! renderings of a pose share one geometry.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::layout::{self, AlignmentSpec, ChannelStats, DatasetStats};
use super::preprocess::Affine;
use super::{DatasetSplit, Joints};
use crate::backbone::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::modality::{Cover, Modality};

/// Sensor layout to imitate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Four modalities, visible at 576×1024.
    Danalab,
    /// No pressure mat, visible at 896×1600.
    Simlab,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "danalab" => Ok(Profile::Danalab),
            "simlab" => Ok(Profile::Simlab),
            _ => Err(Error::Config(format!("unknown dataset profile `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub subjects: u32,
    pub poses: u32,
    pub seed: u64,
    pub profile: Profile,
    pub covers: Vec<Cover>,
    /// Adds lingering warm patches to covered LWIR frames.
    pub residual_heat: bool,
}

impl SyntheticConfig {
    pub fn new(subjects: u32, poses: u32, seed: u64) -> Self {
        Self {
            subjects,
            poses,
            seed,
            profile: Profile::Danalab,
            covers: Cover::ALL.to_vec(),
            residual_heat: true,
        }
    }
}

/// Native `(width, height)` of the visible camera in the base profile; the
/// generated body is laid out in these units and scaled for other profiles.
const BASE_VISIBLE: (f64, f64) = (576.0, 1024.0);

impl Profile {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            Profile::Danalab => Modality::ALL.to_vec(),
            Profile::Simlab => vec![Modality::Visible, Modality::Lwir, Modality::Depth],
        }
    }

    pub fn native_size(self, m: Modality) -> (usize, usize) {
        match (self, m) {
            (Profile::Danalab, Modality::Visible) => (576, 1024),
            (Profile::Simlab, Modality::Visible) => (896, 1600),
            (_, Modality::Lwir) => (120, 160),
            (_, Modality::Depth) => (424, 512),
            (_, Modality::Pressure) => (84, 192),
        }
    }

    /// Alignment to the visible frame of this profile.
    pub fn alignment(self) -> AlignmentSpec {
        let (vw, vh) = self.native_size(Modality::Visible);
        let up = Affine::scale(vw as f64 / BASE_VISIBLE.0, vh as f64 / BASE_VISIBLE.1);
        let base = |m: Modality| match m {
            Modality::Visible => Affine::IDENTITY,
            Modality::Lwir => Affine([[4.5, 0.0, 18.0], [0.0, 6.1, 24.0]]),
            Modality::Depth => Affine([[1.30, 0.0, 12.0], [0.0, 1.95, 14.0]]),
            Modality::Pressure => Affine([[6.0, 0.0, 36.0], [0.0, 4.6, 70.0]]),
        };
        let mut transforms = BTreeMap::new();
        let mut sizes = BTreeMap::new();
        for m in self.modalities() {
            let t = if m == Modality::Visible { Affine::IDENTITY } else { base(m).then(&up) };
            transforms.insert(m, t);
            sizes.insert(m, self.native_size(m));
        }
        AlignmentSpec {
            reference: Modality::Visible,
            transforms,
            sizes,
        }
    }

    fn base_to_visible(self) -> Affine {
        let (vw, vh) = self.native_size(Modality::Visible);
        Affine::scale(vw as f64 / BASE_VISIBLE.0, vh as f64 / BASE_VISIBLE.1)
    }
}

/// Derives an independent stream per `(seed, subject, pose, purpose)`.
fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone)]
struct Subject {
    height: f64,
    girth: f64,
    skin: [f32; 3],
    shirt: [f32; 3],
    pants: [f32; 3],
}

impl Subject {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let c = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
        Self {
            height: rng.random_range(520.0..600.0),
            girth: rng.random_range(0.9..1.15),
            skin: [rng.random_range(0.55..0.9), rng.random_range(0.4..0.7), rng.random_range(0.3..0.55)],
            shirt: c(rng, 0.1, 0.7),
            pants: c(rng, 0.1, 0.6),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Part {
    Torso,
    Head,
    Neck,
    Arm,
    Leg,
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: [f64; 2],
    b: [f64; 2],
    r: f64,
    part: Part,
    /// Weight into the pressure image.
    load: f64,
    /// Relative brightness of the segment; distinguishes limb sections.
    tone: f64,
}

impl Capsule {
    fn dist(&self, p: [f64; 2]) -> f64 {
        let (dx, dy) = (self.b[0] - self.a[0], self.b[1] - self.a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p[0] - self.a[0]) * dx + (p[1] - self.a[1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (qx, qy) = (self.a[0] + t * dx - p[0], self.a[1] + t * dy - p[1]);
        (qx * qx + qy * qy).sqrt()
    }
}

/// A posed body in base visible coordinates.
#[derive(Debug, Clone)]
struct Body {
    joints: Joints,
    capsules: Vec<Capsule>,
    /// Discs marking the distal limb joints, as `(center, radius)`.
    knobs: Vec<([f64; 2], f64)>,
    /// Warm spots left by an earlier position.
    residual: Vec<([f64; 2], f64)>,
    bbox: (f64, f64, f64, f64),
}

fn rot(v: [f64; 2], a: f64) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn deg(d: f64) -> f64 {
    d * PI / 180.0
}

impl Body {
    fn pose(subject: &Subject, rng: &mut ChaCha8Rng) -> Self {
        let u = subject.height;
        let theta = deg(rng.random_range(-10.0..10.0));
        let pelvis = [288.0 + rng.random_range(-15.0..15.0), 540.0 + rng.random_range(-25.0..25.0)];
        let body = |v: [f64; 2]| add(pelvis, rot([v[0] * u, v[1] * u], theta));
        // "down" turned by `a` towards +x, in body coordinates
        let dir = |a: f64, len: f64| rot([0.0, len * u], theta - a);
        let thorax = body([0.0, -0.30]);
        let head = add(thorax, rot([0.0, -0.16 * u], theta + deg(rng.random_range(-15.0..15.0))));
        let mut j = [[0.0; 2]; NUM_JOINTS];
        j[12] = thorax;
        j[13] = head;
        for (side, sign) in [(0usize, -1.0), (1, 1.0)] {
            // right limbs sit at image-left (negative x)
            let shoulder = body([sign * 0.11, -0.28]);
            let a1 = sign * deg(rng.random_range(-15.0..60.0));
            let a2 = a1 + sign * deg(rng.random_range(-50.0..70.0));
            let elbow = add(shoulder, dir(a1, 0.17));
            let wrist = add(elbow, dir(a2, 0.15));
            let hip = body([sign * 0.075, 0.0]);
            let b1 = sign * deg(rng.random_range(-8.0..20.0));
            let b2 = b1 + sign * deg(rng.random_range(-12.0..10.0));
            let knee = add(hip, dir(b1, 0.24));
            let ankle = add(knee, dir(b2, 0.24));
            let (leg, arm) = if side == 0 { ([0, 1, 2], [6, 7, 8]) } else { ([5, 4, 3], [11, 10, 9]) };
            j[leg[0]] = ankle;
            j[leg[1]] = knee;
            j[leg[2]] = hip;
            j[arm[0]] = wrist;
            j[arm[1]] = elbow;
            j[arm[2]] = shoulder;
        }
        let g = subject.girth;
        let cap = |a: [f64; 2], b: [f64; 2], r: f64, part: Part, load: f64, tone: f64| Capsule {
            a,
            b,
            r: r * u * g,
            part,
            load,
            tone,
        };
        let mid_hip = [(j[2][0] + j[3][0]) / 2.0, (j[2][1] + j[3][1]) / 2.0];
        let head_axis = [head[0] - thorax[0], head[1] - thorax[1]];
        let head_center = [thorax[0] + head_axis[0] * 0.62, thorax[1] + head_axis[1] * 0.62];
        let mut capsules = vec![
            cap(mid_hip, thorax, 0.115, Part::Torso, 0.7, 1.0),
            cap(j[8], j[9], 0.05, Part::Torso, 0.5, 1.0),
            cap(j[2], j[3], 0.07, Part::Torso, 0.9, 1.0),
            cap(thorax, head_center, 0.035, Part::Neck, 0.2, 0.9),
            cap(head_center, head_center, 0.068, Part::Head, 0.5, 1.0),
        ];
        for (a, b, r, part, load, tone) in [
            (2, 1, 0.055, Part::Leg, 0.4, 0.85),
            (1, 0, 0.045, Part::Leg, 0.35, 0.7),
            (3, 4, 0.055, Part::Leg, 0.4, 0.85),
            (4, 5, 0.045, Part::Leg, 0.35, 0.7),
            (8, 7, 0.04, Part::Arm, 0.3, 0.85),
            (7, 6, 0.035, Part::Arm, 0.3, 0.7),
            (9, 10, 0.04, Part::Arm, 0.3, 0.85),
            (10, 11, 0.035, Part::Arm, 0.3, 0.7),
        ] {
            capsules.push(cap(j[a], j[b], r, part, load, tone));
        }
        let knobs = [(0, 0.05), (1, 0.06), (4, 0.06), (5, 0.05), (6, 0.042), (7, 0.048), (10, 0.048), (11, 0.042)]
            .map(|(k, r)| (j[k], r * u * g))
            .to_vec();
        let residual = (0..rng.random_range(0..3))
            .map(|_| ([rng.random_range(140.0..440.0), rng.random_range(300.0..850.0)], rng.random_range(0.05..0.09) * u))
            .collect();
        let mut bbox = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        let discs = capsules.iter().flat_map(|c| [(c.a, c.r), (c.b, c.r)]).chain(knobs.iter().copied());
        for (p, r) in discs {
            bbox = (bbox.0.min(p[0] - r), bbox.1.min(p[1] - r), bbox.2.max(p[0] + r), bbox.3.max(p[1] + r));
        }
        Self {
            joints: j,
            capsules,
            knobs,
            residual,
            bbox,
        }
    }

    /// Nearest capsule by signed distance to its surface.
    fn nearest(&self, p: [f64; 2]) -> (f64, &Capsule) {
        let mut best = (f64::MAX, &self.capsules[0]);
        for c in &self.capsules {
            let d = c.dist(p) - c.r;
            if d < best.0 {
                best = (d, c);
            }
        }
        best
    }

    /// Signed distance to the nearest knob surface and the dome height
    /// `1 - (d / r)^2` inside it.
    fn knob(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best = (f64::MAX, 0.0f64);
        for &(c, r) in &self.knobs {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            best.0 = best.0.min(d - r);
            if d < r {
                best.1 = best.1.max(1.0 - (d / r).powi(2));
            }
        }
        best
    }

    /// Signed distance to the body outline, including knobs.
    fn surface(&self, p: [f64; 2]) -> (f64, &Capsule, f64) {
        let (d, c) = self.nearest(p);
        let (dk, k) = self.knob(p);
        (d.min(dk), c, k)
    }

    /// Height field in `[0, 1]`: 1 on limb axes, 0 off the body.
    fn elevation(&self, p: [f64; 2]) -> f64 {
        if p[0] < self.bbox.0 || p[0] > self.bbox.2 || p[1] < self.bbox.1 || p[1] > self.bbox.3 {
            return 0.0;
        }
        let mut e: f64 = 0.0;
        for c in &self.capsules {
            let d = c.dist(p);
            if d < c.r {
                e = e.max((1.0 - (d / c.r).powi(2)).sqrt());
            }
        }
        let k = self.knob(p).1;
        (e.max(k.sqrt()) + 0.15 * k).min(1.0)
    }

    /// Soft body mask with a falloff width `soft` in pixels.
    fn heat(&self, p: [f64; 2], soft: f64) -> f64 {
        if p[0] < self.bbox.0 - 4.0 * soft || p[0] > self.bbox.2 + 4.0 * soft || p[1] < self.bbox.1 - 4.0 * soft || p[1] > self.bbox.3 + 4.0 * soft {
            return 0.0;
        }
        let (d, c, k) = self.surface(p);
        let tone = if k > 0.0 { 1.0 + 0.3 * k.sqrt() } else { c.tone };
        if d <= 0.0 {
            tone
        } else {
            tone * (-(d / soft).powi(2)).exp()
        }
    }

    fn pressure(&self, p: [f64; 2]) -> f64 {
        let mut v: f64 = 0.0;
        for c in &self.capsules {
            let d = c.dist(p);
            if d < c.r {
                v = v.max(c.load * (1.0 - (d / c.r).powi(2)));
            }
        }
        v = v.max(0.45 * self.knob(p).1);
        let heels = [self.joints[0], self.joints[5]];
        for h in heels {
            let d2 = (p[0] - h[0]).powi(2) + (p[1] - h[1]).powi(2);
            v += 0.5 * (-d2 / 200.0).exp();
        }
        v.min(1.0)
    }
}

/// Bed mattress in base visible coordinates.
const BED: (f64, f64, f64, f64) = (96.0, 110.0, 480.0, 990.0);

fn on_bed(p: [f64; 2]) -> bool {
    p[0] >= BED.0 && p[0] <= BED.2 && p[1] >= BED.1 && p[1] <= BED.3
}

struct Renderer<'a> {
    body: &'a Body,
    subject: &'a Subject,
    cover: Cover,
}

impl Renderer<'_> {
    fn visible(&self, p: [f64; 2], rng: &mut ChaCha8Rng) -> [f32; 3] {
        let noise = rng.random_range(-0.02f32..0.02);
        let mut px = if on_bed(p) {
            let stripe = if ((p[0] / 24.0).floor() as i64) % 2 == 0 { 0.03 } else { 0.0 };
            [0.88 + stripe, 0.88 + stripe, 0.84 + stripe]
        } else {
            [0.45, 0.42, 0.40]
        };
        let (d, cap, knob) = self.body.surface(p);
        let alpha = (0.5 - d / 2.0).clamp(0.0, 1.0) as f32;
        if alpha > 0.0 {
            let col = match cap.part {
                Part::Head | Part::Neck => self.subject.skin,
                Part::Torso => self.subject.shirt,
                Part::Arm => {
                    let s = self.subject.shirt;
                    let is_right = cap.a[0] < self.body.joints[12][0];
                    if is_right { [s[0] * 0.85 + 0.1, s[1] * 0.8, s[2] * 0.8] } else { [s[0] * 0.8, s[1] * 0.8, s[2] * 0.85 + 0.1] }
                }
                Part::Leg => self.subject.pants,
            };
            let shade = (0.75 + 0.25 * self.body.elevation(p) as f32) * (0.55 + 0.45 * cap.tone as f32);
            let k = (knob > 0.0) as u8 as f32;
            for c in 0..3 {
                let v = col[c] * shade * (1.0 - k) + (0.2 + 0.5 * col[c]) * 0.5 * k;
                px[c] = px[c] * (1.0 - alpha) + v * alpha;
            }
        }
        let sheet_top = self.body.joints[8][1].min(self.body.joints[9][1]) + 10.0;
        if self.cover != Cover::Uncover && on_bed(p) && p[1] > sheet_top {
            let (col, a) = match self.cover {
                Cover::Cover1 => ([0.78f32, 0.82, 0.92], 0.75f32),
                _ => ([0.55f32, 0.40, 0.32], 0.97f32),
            };
            let fold = 0.9 + 0.1 * ((p[0] * 0.05 + p[1] * 0.013).sin() as f32) + 0.08 * self.body.elevation(p) as f32;
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + col[c] * fold * a;
            }
        }
        px.map(|v| (v + noise).clamp(0.0, 1.0))
    }

    fn lwir(&self, p: [f64; 2], rng: &mut ChaCha8Rng) -> f32 {
        let (soft, gain) = match self.cover {
            Cover::Uncover => (8.0, 1.0),
            Cover::Cover1 => (13.0, 0.9),
            Cover::Cover2 => (18.0, 0.8),
        };
        let base = if on_bed(p) { 0.25 } else { 0.15 };
        let mut v = base + (0.82 - base) * gain * self.body.heat(p, soft);
        if self.cover != Cover::Uncover {
            for &(c, r) in &self.body.residual {
                let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                v = v.max(base + 0.3 * (-d2 / (r * r)).exp());
            }
        }
        (v as f32 + rng.random_range(-0.015f32..0.015)).clamp(0.0, 1.0)
    }

    fn depth(&self, p: [f64; 2], frame_pos: [f64; 2], rng: &mut ChaCha8Rng) -> f32 {
        // corners of the depth sensor are dominated by noise
        let r2 = (frame_pos[0] - 0.5).powi(2) / 0.25 + (frame_pos[1] - 0.5).powi(2) / 0.25;
        if r2 > 1.3 && rng.random::<f64>() < 0.6 {
            return rng.random_range(0.0..1.0);
        }
        let mut v = if on_bed(p) { 0.62 } else { 0.85 };
        let e = self.body.elevation(p);
        let lift = match self.cover {
            Cover::Uncover => e,
            Cover::Cover1 => e.max(0.25 * self.body.heat(p, 14.0)),
            Cover::Cover2 => (0.7 * e).max(0.35 * self.body.heat(p, 20.0)),
        };
        v -= 0.2 * lift;
        (v as f32 + rng.random_range(-0.01f32..0.01)).clamp(0.0, 1.0)
    }
}

struct PoseRecord {
    subject: Subject,
    body: Body,
}

/// Renders modality `m` of one frame.
fn render(profile: Profile, m: Modality, rec: &PoseRecord, cover: Cover, rng: &mut ChaCha8Rng) -> Result<Image> {
    let (w, h) = profile.native_size(m);
    let to_base = profile.alignment().transform(m)?.then(&profile.base_to_visible().inverse()?);
    let r = Renderer {
        body: &rec.body,
        subject: &rec.subject,
        cover,
    };
    let mut img = Image::filled(m.channels(), w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = to_base.apply([x as f64 + 0.5, y as f64 + 0.5]);
            match m {
                Modality::Visible => {
                    let px = r.visible(p, rng);
                    for (c, v) in px.into_iter().enumerate() {
                        img.set(c, x, y, v);
                    }
                }
                Modality::Lwir => img.set(0, x, y, r.lwir(p, rng)),
                Modality::Depth => {
                    let fp = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64];
                    img.set(0, x, y, r.depth(p, fp, rng));
                }
                Modality::Pressure => {
                    let v = rec.body.pressure(p) as f32 + rng.random_range(0.0f32..0.01);
                    img.set(0, x, y, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(img)
}

/// Writes a dataset under `out` and returns its alignment.
pub fn generate_synthetic_dataset(out: &Path, cfg: &SyntheticConfig) -> Result<AlignmentSpec> {
    if cfg.subjects == 0 || cfg.poses == 0 {
        return Err(Error::Config("synthetic dataset needs at least one subject and one pose".into()));
    }
    if cfg.covers.is_empty() {
        return Err(Error::Config("synthetic dataset needs at least one cover condition".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec = cfg.profile.alignment();
    let to_visible = cfg.profile.base_to_visible();
    let subjects: Vec<u32> = (1..=cfg.subjects).collect();
    let stats_subjects = if subjects.len() >= 2 {
        DatasetSplit::default_for(&subjects)?.train
    } else {
        subjects.clone()
    };
    let mut pooled: BTreeMap<Modality, [Vec<f64>; 3]> = BTreeMap::new();
    for &s in &subjects {
        let subject = Subject::sample(&mut stream(cfg.seed, &[u64::from(s), 0]));
        let mut poses = BTreeMap::new();
        for k in 1..=cfg.poses {
            let mut body = Body::pose(&subject, &mut stream(cfg.seed, &[u64::from(s), u64::from(k), 1]));
            if !cfg.residual_heat {
                body.residual.clear();
            }
            poses.insert(k, body.joints.map(|p| to_visible.apply(p)));
            let rec = PoseRecord {
                subject: subject.clone(),
                body,
            };
            for &cover in &cfg.covers {
                for m in cfg.profile.modalities() {
                    // pressure ignores bedding, so every cover shares one noise stream
                    let cover_tag = if m == Modality::Pressure { 0 } else { cover as u64 + 1 };
                    let mut rng = stream(cfg.seed, &[u64::from(s), u64::from(k), 2, m as u64, cover_tag]);
                    let img = render(cfg.profile, m, &rec, cover, &mut rng)?;
                    let path = layout::image_path(out, s, m, cover, k);
                    let dir = path.parent().expect("nested path");
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    img.save_png(&path)?;
                    if stats_subjects.contains(&s) {
                        // statistics over the decoded (quantized) pixels
                        let decoded = Image::load_png(&path)?;
                        accumulate(pooled.entry(m).or_insert_with(|| [Vec::new(), Vec::new(), vec![0.0]]), &decoded);
                    }
                }
            }
        }
        let jpath = layout::subject_dir(out, s).join(layout::JOINTS_FILE);
        std::fs::write(&jpath, layout::format_joints(Modality::Visible, &poses)).map_err(|e| Error::io(&jpath, e))?;
    }
    let stats = DatasetStats(
        pooled
            .into_iter()
            .map(|(m, [sum, sq, n])| {
                let mean: Vec<f64> = sum.iter().map(|s| s / n[0]).collect();
                let std = sq.iter().zip(&mean).map(|(q, mu)| (q / n[0] - mu * mu).max(0.0).sqrt()).collect();
                (m, ChannelStats { mean, std })
            })
            .collect(),
    );
    layout::write_json(&out.join(layout::ALIGNMENT_FILE), &spec)?;
    layout::write_json(&out.join(layout::STATS_FILE), &stats)?;
    Ok(spec)
}

fn accumulate(acc: &mut [Vec<f64>; 3], img: &Image) {
    if acc[0].is_empty() {
        acc[0] = vec![0.0; img.channels()];
        acc[1] = vec![0.0; img.channels()];
    }
    for c in 0..img.channels() {
        for &v in img.plane(c) {
            acc[0][c] += v as f64;
            acc[1][c] += v as f64 * v as f64;
        }
    }
    acc[2][0] += (img.width() * img.height()) as f64;
}

/// Samples joint positions only, for tests that need realistic skeletons
/// without rendering.
pub fn sample_skeleton(seed: u64) -> Joints {
    let mut rng = stream(seed, &[0xABCD]);
    let subject = Subject::sample(&mut rng);
    Body::pose(&subject, &mut rng).joints
}
