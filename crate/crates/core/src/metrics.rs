//! Heatmap decoding, PCKh, normalized joint error and skeleton overlays.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Heatmaps, HEAD, JOINTS, NUM_JOINTS, THORAX};
use crate::data::{Image, Joints};
use crate::error::{Error, Result};

/// Default PCKh fraction of the head-bone length.
pub const PCKH_THRESHOLD: f64 = 0.5;

/// Limb edges drawn in overlays.
pub const EDGES: [(usize, usize); 13] = [
    (0, 1),
    (1, 2),
    (5, 4),
    (4, 3),
    (2, 12),
    (3, 12),
    (6, 7),
    (7, 8),
    (11, 10),
    (10, 9),
    (8, 12),
    (9, 12),
    (12, 13),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skeleton {
    pub joints: Joints,
    pub valid: [bool; NUM_JOINTS],
}

impl Skeleton {
    pub fn new(joints: Joints) -> Self {
        Self {
            joints,
            valid: [true; NUM_JOINTS],
        }
    }

    pub fn head_bone(&self) -> f64 {
        dist(self.joints[HEAD], self.joints[THORAX])
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Argmax per map (ties resolve to the lowest row-major index), optionally
/// nudged a quarter cell toward the larger neighbour on each axis, then
/// scaled by `stride` into image coordinates.
pub fn decode_heatmaps(h: &Heatmaps, stride: f64, refine: bool) -> Skeleton {
    let (height, width) = (h.height(), h.width());
    let mut joints = [[0.0; 2]; NUM_JOINTS];
    for (j, out) in joints.iter_mut().enumerate() {
        let m = h.map(j);
        let mut best = 0;
        for (i, &v) in m.iter().enumerate() {
            if v > m[best] {
                best = i;
            }
        }
        let (r, c) = (best / width, best % width);
        let (mut x, mut y) = (c as f64, r as f64);
        if refine {
            let at = |r: usize, c: usize| m[r * width + c];
            if c > 0 && c + 1 < width {
                x += quarter_toward(at(r, c - 1), at(r, c + 1));
            }
            if r > 0 && r + 1 < height {
                y += quarter_toward(at(r - 1, c), at(r + 1, c));
            }
        }
        *out = [x * stride, y * stride];
    }
    Skeleton::new(joints)
}

fn quarter_toward(before: f32, after: f32) -> f64 {
    if after > before {
        0.25
    } else if after < before {
        -0.25
    } else {
        0.0
    }
}

/// Per-joint correctness `‖pred − gt‖ < threshold · head_bone`, or `None`
/// when the ground-truth head bone has zero length.
pub fn pckh(pred: &Skeleton, gt: &Skeleton, threshold: f64) -> Option<[bool; NUM_JOINTS]> {
    let hb = gt.head_bone();
    if !(hb > 0.0) {
        return None;
    }
    let limit = threshold * hb;
    Some(std::array::from_fn(|j| dist(pred.joints[j], gt.joints[j]) < limit))
}

/// Per-joint error divided by the ground-truth head bone, or `None` when it is zero.
pub fn normalized_l2(pred: &Skeleton, gt: &Skeleton) -> Option<[f64; NUM_JOINTS]> {
    let hb = gt.head_bone();
    if !(hb > 0.0) {
        return None;
    }
    Some(std::array::from_fn(|j| dist(pred.joints[j], gt.joints[j]) / hb))
}

/// How the `Total` figure is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TotalMode {
    #[default]
    JointMean,
    InstanceMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckhReport {
    /// Percent correct per joint, in joint order.
    pub per_joint: [f64; NUM_JOINTS],
    /// Mean over joints of `per_joint`.
    pub total: f64,
    /// Correct joint instances over all evaluated instances, in percent.
    pub instance_total: f64,
    pub samples: usize,
    pub excluded: usize,
}

impl PckhReport {
    pub fn total_by(&self, mode: TotalMode) -> f64 {
        match mode {
            TotalMode::JointMean => self.total,
            TotalMode::InstanceMean => self.instance_total,
        }
    }
}

/// Combines per-sample results. Invalid ground-truth joints are skipped.
pub fn aggregate_pckh<'a>(results: impl IntoIterator<Item = (Option<[bool; NUM_JOINTS]>, &'a [bool; NUM_JOINTS])>) -> Result<PckhReport> {
    let mut hit = [0usize; NUM_JOINTS];
    let mut seen = [0usize; NUM_JOINTS];
    let (mut samples, mut excluded) = (0, 0);
    for (r, valid) in results {
        let Some(r) = r else {
            excluded += 1;
            continue;
        };
        samples += 1;
        for j in 0..NUM_JOINTS {
            if valid[j] {
                seen[j] += 1;
                hit[j] += r[j] as usize;
            }
        }
    }
    if samples == 0 {
        return Err(Error::Report(format!("no evaluable samples ({excluded} excluded)")));
    }
    let per_joint: [f64; NUM_JOINTS] =
        std::array::from_fn(|j| if seen[j] == 0 { 0.0 } else { 100.0 * hit[j] as f64 / seen[j] as f64 });
    let total = per_joint.iter().sum::<f64>() / NUM_JOINTS as f64;
    let n_seen: usize = seen.iter().sum();
    let instance_total = 100.0 * hit.iter().sum::<usize>() as f64 / n_seen.max(1) as f64;
    Ok(PckhReport {
        per_joint,
        total,
        instance_total,
        samples,
        excluded,
    })
}

/// Evaluates paired skeletons in one go.
pub fn evaluate_pckh(pairs: &[(Skeleton, Skeleton)], threshold: f64) -> Result<PckhReport> {
    let results: Vec<_> = pairs.iter().map(|(p, g)| (pckh(p, g, threshold), &g.valid)).collect();
    aggregate_pckh(results.iter().map(|(r, v)| (*r, *v)))
}

/// Table with joint labels as rows and one column per named report, ending
/// in a `Total` row.
pub fn table_csv(columns: &[(&str, &PckhReport)], mode: TotalMode) -> String {
    let mut s = String::from("Joint");
    for (name, _) in columns {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    for (j, label) in JOINTS.iter().enumerate() {
        s.push_str(label);
        for (_, r) in columns {
            let _ = write!(s, ",{:.2}", r.per_joint[j]);
        }
        s.push('\n');
    }
    s.push_str("Total");
    for (_, r) in columns {
        let _ = write!(s, ",{:.2}", r.total_by(mode));
    }
    s.push('\n');
    s
}

pub fn write_table_csv(path: &Path, columns: &[(&str, &PckhReport)], mode: TotalMode) -> Result<()> {
    std::fs::write(path, table_csv(columns, mode)).map_err(|e| Error::io(path, e))
}

pub const GT_COLOR: [f32; 3] = [1.0, 0.85, 0.0];
pub const PRED_COLOR: [f32; 3] = [0.1, 0.35, 1.0];

/// RGB copy of `image` with the ground truth drawn in yellow and the
/// prediction in blue on top. Segments are clipped to the canvas.
pub fn render_overlay(image: &Image, gt: &Skeleton, pred: &Skeleton) -> Image {
    let (w, h) = (image.width(), image.height());
    let mut out = Image::filled(3, w, h, 0.0);
    for c in 0..3 {
        let src = image.plane(c.min(image.channels() - 1)).to_vec();
        out.plane_mut(c).copy_from_slice(&src);
    }
    let radius = (w.min(h) as f64 / 256.0).max(1.0);
    for (skel, color) in [(gt, GT_COLOR), (pred, PRED_COLOR)] {
        for &(a, b) in &EDGES {
            if skel.valid[a] && skel.valid[b] {
                draw_segment(&mut out, skel.joints[a], skel.joints[b], radius, color);
            }
        }
    }
    out
}

fn draw_segment(img: &mut Image, a: [f64; 2], b: [f64; 2], radius: f64, color: [f32; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (a[0].min(b[0]) - radius).floor().max(0.0);
    let x1 = (a[0].max(b[0]) + radius).ceil().min(w);
    let y0 = (a[1].min(b[1]) - radius).floor().max(0.0);
    let y1 = (a[1].max(b[1]) + radius).ceil().min(h);
    if !(x0 < x1 && y0 < y1) {
        return;
    }
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    for y in y0 as usize..y1 as usize {
        for x in x0 as usize..x1 as usize {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            if dist(p, [a[0] + t * dx, a[1] + t * dy]) <= radius {
                for (c, &v) in color.iter().enumerate() {
                    img.set(c, x, y, v);
                }
            }
        }
    }
}
