//! Geometry and value transforms between native sensor frames and the
//! square network frame.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::layout::AlignmentSpec;
use super::{Frame, Joints, MultimodalSample};
use crate::backbone::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::modality::{Cover, Modality};
use crate::tensor::Tensor;

/// Fraction of the joint bounding box added on each side.
pub const BBOX_MARGIN: f64 = 0.15;
/// Gaussian target width in heatmap cells.
pub const HEATMAP_SIGMA: f64 = 2.0;
/// Smallest admissible channel standard deviation.
pub const NORM_EPS: f64 = 1e-6;
/// Intermediate crop size `(width, height)` of the translation chain.
pub const TRANSLATION_CROP: (usize, usize) = (100, 256);

/// `p ↦ A p + t` on 2D points, stored row-major as `[[a, b, tx], [c, d, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn scale(sx: f64, sy: f64) -> Self {
        Affine([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
    }

    pub fn translate(tx: f64, ty: f64) -> Self {
        Affine([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    /// `self` first, then `next`.
    pub fn then(&self, next: &Affine) -> Affine {
        let (a, b) = (&self.0, &next.0);
        let mut out = [[0.0; 3]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = b[r][0] * a[0][c] + b[r][1] * a[1][c];
            }
            row[2] += b[r][2];
        }
        Affine(out)
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let d = self.det();
        if !d.is_finite() || d.abs() < 1e-12 {
            return Err(Error::Alignment(format!("singular transform {:?}", self.0)));
        }
        let m = &self.0;
        let (a, b, c, e) = (m[1][1] / d, -m[0][1] / d, -m[1][0] / d, m[0][0] / d);
        Ok(Affine([
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [c, e, -(c * m[0][2] + e * m[1][2])],
        ]))
    }
}

/// Axis-aligned box `[x0, x1) × [y0, y1)` in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    /// Tight box around the joints.
    pub fn from_joints(joints: &Joints) -> BBox {
        let mut b = BBox {
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for &[x, y] in joints {
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x);
            b.y1 = b.y1.max(y);
        }
        b
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    /// Grows each side by `frac` of the corresponding extent.
    pub fn expand(&self, frac: f64) -> BBox {
        let (dx, dy) = (self.width() * frac, self.height() * frac);
        BBox {
            x0: self.x0 - dx,
            y0: self.y0 - dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// Square with the longer side, sharing the center.
    pub fn squared(&self) -> BBox {
        let s = self.width().max(self.height());
        let [cx, cy] = self.center();
        BBox {
            x0: cx - s / 2.0,
            y0: cy - s / 2.0,
            x1: cx + s / 2.0,
            y1: cy + s / 2.0,
        }
    }

    /// Maps output pixel coordinates of a `w × h` grid onto this box.
    pub fn grid_to_box(&self, w: usize, h: usize) -> Affine {
        Affine([
            [self.width() / w as f64, 0.0, self.x0],
            [0.0, self.height() / h as f64, self.y0],
        ])
    }
}

/// Resamples `src` so that output pixel `p` reads `src` at `to_src(p)`.
pub fn warp(src: &Image, to_src: &Affine, width: usize, height: usize, fill: f32) -> Image {
    let mut out = Image::filled(src.channels(), width, height, fill);
    for y in 0..height {
        for x in 0..width {
            let [u, v] = to_src.apply([x as f64 + 0.5, y as f64 + 0.5]);
            for c in 0..src.channels() {
                out.set(c, x, y, src.sample(c, u, v, fill));
            }
        }
    }
    out
}

/// Joints of `sample` in the reference modality's frame.
pub fn reference_frame_joints(sample: &MultimodalSample, spec: &AlignmentSpec) -> Result<Joints> {
    match sample.frame {
        Frame::Native(m) if m == spec.reference => Ok(sample.joints),
        Frame::Native(m) => {
            let t = spec.transform(m)?;
            Ok(sample.joints.map(|p| t.apply(p)))
        }
        Frame::Common(_) => Err(Error::Alignment("sample is already in the network frame".into())),
    }
}

/// One resampling per modality through `out → reference → modality`.
fn resample_all(sample: &MultimodalSample, spec: &AlignmentSpec, out_to_ref: &Affine, out: usize) -> Result<MultimodalSample> {
    let joints_ref = reference_frame_joints(sample, spec)?;
    let ref_to_out = out_to_ref.inverse()?;
    let mut images = BTreeMap::new();
    for (&m, img) in &sample.images {
        let to_mod = out_to_ref.then(&spec.transform(m)?.inverse()?);
        images.insert(m, warp(img, &to_mod, out, out, 0.0));
    }
    Ok(MultimodalSample {
        images,
        joints: joints_ref.map(|p| ref_to_out.apply(p)),
        frame: Frame::Common(out),
        ..sample.clone()
    })
}

/// Maps every image into the reference modality's frame, then resizes that
/// frame to `out × out`.
pub fn align_and_resize(sample: &MultimodalSample, spec: &AlignmentSpec, out: usize) -> Result<MultimodalSample> {
    let (w, h) = spec.reference_size()?;
    let out_to_ref = Affine::scale(w as f64 / out as f64, h as f64 / out as f64);
    resample_all(sample, spec, &out_to_ref, out)
}

/// The square crop box in the reference frame: joint box grown by
/// [`BBOX_MARGIN`] per side, squared to its longer side.
pub fn square_crop_box(joints_ref: &Joints) -> Result<BBox> {
    let tight = BBox::from_joints(joints_ref);
    let b = tight.expand(BBOX_MARGIN).squared();
    if !(b.width() > 0.0) || !b.width().is_finite() {
        return Err(Error::Crop(format!("degenerate joint box {tight:?}")));
    }
    Ok(b)
}

/// Crops every modality to the same square around the subject and resizes
/// it to `out × out`.
pub fn square_crop(sample: &MultimodalSample, spec: &AlignmentSpec, out: usize) -> Result<MultimodalSample> {
    let b = square_crop_box(&reference_frame_joints(sample, spec)?)?;
    resample_all(sample, spec, &b.grid_to_box(out, out), out)
}

/// `(x - mean_c) / std_c` per channel.
pub fn normalize(image: &Image, mean: &[f64], std: &[f64]) -> Result<Image> {
    let c = image.channels();
    if mean.len() != c || std.len() != c {
        return Err(Error::Normalization(format!(
            "{c}-channel image with {} means and {} deviations",
            mean.len(),
            std.len()
        )));
    }
    if let Some(k) = std.iter().position(|&s| !(s > NORM_EPS)) {
        return Err(Error::Normalization(format!("channel {k} std {} is not above {NORM_EPS}", std[k])));
    }
    let mut out = image.clone();
    for k in 0..c {
        let (m, s) = (mean[k], std[k]);
        for v in out.plane_mut(k) {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    Ok(out)
}

/// Gaussian targets `[14, size, size]` with peak 1 at `joint / stride`
/// (cell-index coordinates). `sigma <= 0` gives a single hot cell. Joints
/// outside the frame are flagged `false`; their maps keep whatever part of
/// the peak falls inside.
pub fn make_target_heatmaps(joints: &Joints, size: usize, stride: f64, sigma: f64) -> (Tensor<f32>, [bool; NUM_JOINTS]) {
    let mut maps = vec![0.0f32; NUM_JOINTS * size * size];
    let mut valid = [false; NUM_JOINTS];
    let extent = size as f64 * stride;
    for (j, &[x, y]) in joints.iter().enumerate() {
        valid[j] = x.is_finite() && y.is_finite() && (0.0..extent).contains(&x) && (0.0..extent).contains(&y);
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        let (cx, cy) = (x / stride, y / stride);
        let map = &mut maps[j * size * size..(j + 1) * size * size];
        if sigma <= 0.0 {
            let (ix, iy) = (cx.round(), cy.round());
            if (0.0..size as f64).contains(&ix) && (0.0..size as f64).contains(&iy) {
                map[iy as usize * size + ix as usize] = 1.0;
            }
            continue;
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in 0..size {
            let dy = r as f64 - cy;
            for c in 0..size {
                let dx = c as f64 - cx;
                map[r * size + c] = (-(dx * dx + dy * dy) * inv).exp() as f32;
            }
        }
    }
    let t = Tensor::new(vec![NUM_JOINTS, size, size], maps).expect("sized");
    (t, valid)
}

/// Source/target images of one pose, both cropped around the subject and
/// pushed through the `100 × 256 → 256 × 256` chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationPair {
    pub source: Image,
    pub target: Image,
    /// Crop box in the reference frame.
    pub bbox: BBox,
    pub subject: u32,
    pub pose: u32,
    pub cover: Cover,
}

/// Subject box used by the translation path: joint box grown by
/// [`BBOX_MARGIN`] per side, not squared.
pub fn translation_box(joints_ref: &Joints) -> Result<BBox> {
    let b = BBox::from_joints(joints_ref).expand(BBOX_MARGIN);
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::Crop(format!("degenerate joint box {b:?}")));
    }
    Ok(b)
}

/// Crops `m`'s image of `sample` to `bbox` (reference frame) and runs the
/// resize chain.
pub fn translation_crop(sample: &MultimodalSample, spec: &AlignmentSpec, m: Modality, bbox: &BBox, out: usize) -> Result<Image> {
    let (cw, ch) = TRANSLATION_CROP;
    let to_mod = bbox.grid_to_box(cw, ch).then(&spec.transform(m)?.inverse()?);
    Ok(warp(sample.image(m)?, &to_mod, cw, ch, 0.0).resize(out, out))
}

/// Pairs every `source` image (any cover) with the uncovered `target` image
/// of the same subject and pose.
pub fn prepare_translation_pairs(
    samples: &[MultimodalSample],
    spec: &AlignmentSpec,
    source: Modality,
    target: Modality,
    out: usize,
) -> Result<Vec<TranslationPair>> {
    if source == target {
        return Err(Error::Config(format!("translation source and target are both {source}")));
    }
    let mut targets = BTreeMap::new();
    for s in samples.iter().filter(|s| s.cover == Cover::Uncover) {
        if s.images.contains_key(&target) {
            targets.insert((s.subject, s.pose), s);
        }
    }
    let mut pairs = Vec::new();
    for s in samples.iter().filter(|s| s.images.contains_key(&source)) {
        let t = targets.get(&(s.subject, s.pose)).ok_or_else(|| {
            Error::Pairing(format!("no uncovered {target} image for subject {} pose {}", s.subject, s.pose))
        })?;
        let bbox = translation_box(&reference_frame_joints(t, spec)?)?;
        pairs.push(TranslationPair {
            source: translation_crop(s, spec, source, &bbox, out)?,
            target: translation_crop(t, spec, target, &bbox, out)?,
            bbox,
            subject: s.subject,
            pose: s.pose,
            cover: s.cover,
        });
    }
    Ok(pairs)
}

/// White `width × height` canvas with `crop` resized into `bbox`.
pub fn composite_on_white(crop: &Image, bbox: &BBox, width: usize, height: usize) -> Result<Image> {
    let inside = bbox.x0 >= 0.0 && bbox.y0 >= 0.0 && bbox.x1 <= width as f64 && bbox.y1 <= height as f64;
    if !inside || !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::Composite(format!("box {bbox:?} is not inside the {width}x{height} canvas")));
    }
    let mut out = Image::filled(crop.channels(), width, height, 1.0);
    let sx = crop.width() as f64 / bbox.width();
    let sy = crop.height() as f64 / bbox.height();
    let (xa, xb) = (bbox.x0.floor() as usize, (bbox.x1.ceil() as usize).min(width));
    let (ya, yb) = (bbox.y0.floor() as usize, (bbox.y1.ceil() as usize).min(height));
    for y in ya..yb {
        let py = y as f64 + 0.5;
        if py < bbox.y0 || py >= bbox.y1 {
            continue;
        }
        for x in xa..xb {
            let px = x as f64 + 0.5;
            if px < bbox.x0 || px >= bbox.x1 {
                continue;
            }
            let (u, v) = ((px - bbox.x0) * sx, (py - bbox.y0) * sy);
            for c in 0..crop.channels() {
                out.set(c, x, y, crop.sample(c, u, v, 1.0));
            }
        }
    }
    Ok(out)
}
