//! On-disk dataset grammar.
//!
//! ```text
//! root/alignment.json                               modality → reference affines
//! root/stats.json                                   per-modality channel mean/std
//! root/<subject:05>/joints_gt.txt                   joint annotations
//! root/<subject:05>/<modality>/<cover>/image_<pose:06>.png
//! ```
//!
//! `joints_gt.txt` holds `#` comments, one `frame <modality>` line naming the
//! frame of the coordinates, then for every pose a `pose <k>` header followed
//! by exactly 14 `x y` lines in joint order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::preprocess::Affine;
use super::{Frame, Joints, MultimodalSample};
use crate::backbone::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::modality::{Cover, Modality};

pub const ALIGNMENT_FILE: &str = "alignment.json";
pub const STATS_FILE: &str = "stats.json";
pub const JOINTS_FILE: &str = "joints_gt.txt";

/// Per-modality affine from native pixels into the reference modality's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSpec {
    pub reference: Modality,
    pub transforms: BTreeMap<Modality, Affine>,
    /// Native `(width, height)` per modality.
    pub sizes: BTreeMap<Modality, (usize, usize)>,
}

impl AlignmentSpec {
    pub fn validate(&self) -> Result<()> {
        let id = self.transform(self.reference)?;
        let off = id.0.iter().flatten().zip(Affine::IDENTITY.0.iter().flatten()).any(|(a, b)| (a - b).abs() > 1e-12);
        if off {
            return Err(Error::Alignment(format!("reference {} transform is not the identity", self.reference)));
        }
        for t in self.transforms.values() {
            t.inverse()?;
        }
        self.reference_size()?;
        Ok(())
    }

    pub fn transform(&self, m: Modality) -> Result<Affine> {
        self.transforms
            .get(&m)
            .copied()
            .ok_or_else(|| Error::Alignment(format!("no alignment transform for {m}")))
    }

    pub fn size(&self, m: Modality) -> Result<(usize, usize)> {
        self.sizes
            .get(&m)
            .copied()
            .ok_or_else(|| Error::Alignment(format!("no native size for {m}")))
    }

    pub fn reference_size(&self) -> Result<(usize, usize)> {
        self.size(self.reference)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Pooled per-channel statistics over a set of equally shaped images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            if sum.is_empty() {
                sum = vec![0.0; img.channels()];
                sq = vec![0.0; img.channels()];
            } else if img.channels() != sum.len() {
                return Err(Error::Normalization("images disagree on channel count".into()));
            }
            for c in 0..img.channels() {
                for &v in img.plane(c) {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
            }
            count += img.width() * img.height();
        }
        if count == 0 {
            return Err(Error::Normalization("no pixels to compute statistics from".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats(pub BTreeMap<Modality, ChannelStats>);

impl DatasetStats {
    pub fn get(&self, m: Modality) -> Result<&ChannelStats> {
        self.0
            .get(&m)
            .ok_or_else(|| Error::Normalization(format!("no normalization statistics for {m}")))
    }
}

/// Address of one frame on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleKey {
    pub subject: u32,
    pub pose: u32,
    pub cover: Cover,
}

#[derive(Debug, Clone)]
struct SubjectEntry {
    frame: Modality,
    poses: BTreeMap<u32, Joints>,
}

/// An opened dataset root. Images are read on demand.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    root: PathBuf,
    alignment: AlignmentSpec,
    stats: Option<DatasetStats>,
    subjects: BTreeMap<u32, SubjectEntry>,
}

pub fn subject_dir(root: &Path, subject: u32) -> PathBuf {
    root.join(format!("{subject:05}"))
}

pub fn image_path(root: &Path, subject: u32, m: Modality, cover: Cover, pose: u32) -> PathBuf {
    subject_dir(root, subject)
        .join(m.name())
        .join(cover.name())
        .join(format!("image_{pose:06}.png"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Report(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parses the annotation grammar described in the module docs.
pub fn parse_joints(path: &Path, text: &str) -> Result<(Modality, BTreeMap<u32, Joints>)> {
    let err = |line: usize, msg: &str| Error::load(path, format!("line {line}: {msg}"));
    let mut frame = None;
    let mut poses = BTreeMap::new();
    let mut current: Option<(u32, Vec<[f64; 2]>, usize)> = None;
    let finish = |cur: Option<(u32, Vec<[f64; 2]>, usize)>, poses: &mut BTreeMap<u32, Joints>| -> Result<()> {
        if let Some((k, rows, at)) = cur {
            let joints: Joints = rows
                .try_into()
                .map_err(|r: Vec<_>| err(at, &format!("pose {k} has {} joint rows, expected {NUM_JOINTS}", r.len())))?;
            if poses.insert(k, joints).is_some() {
                return Err(err(at, &format!("pose {k} appears twice")));
            }
        }
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("frame") => {
                let m: Modality = parts.next().ok_or_else(|| err(n, "frame needs a modality"))?.parse().map_err(|_| err(n, "unknown frame modality"))?;
                frame = Some(m);
            }
            Some("pose") => {
                finish(current.take(), &mut poses)?;
                let k = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err(n, "pose needs a non-negative integer id"))?;
                current = Some((k, Vec::new(), n));
            }
            Some(x) => {
                let (_, rows, _) = current.as_mut().ok_or_else(|| err(n, "joint row before any pose header"))?;
                let y = parts.next().ok_or_else(|| err(n, "joint row needs two numbers"))?;
                let parse = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
                match (parse(x), parse(y), parts.next()) {
                    (Some(x), Some(y), None) => rows.push([x, y]),
                    _ => return Err(err(n, "malformed joint row")),
                }
            }
            None => {}
        }
    }
    finish(current.take(), &mut poses)?;
    let frame = frame.ok_or_else(|| Error::load(path, "missing `frame` line"))?;
    Ok((frame, poses))
}

pub fn format_joints(frame: Modality, poses: &BTreeMap<u32, Joints>) -> String {
    let mut s = String::from("# joints_gt v1: 14 rows of `x y` per pose, joint order fixed\n");
    let _ = writeln!(s, "frame {frame}");
    for (k, joints) in poses {
        let _ = writeln!(s, "pose {k}");
        for [x, y] in joints {
            let _ = writeln!(s, "{x:.4} {y:.4}");
        }
    }
    s
}

impl DatasetLayout {
    pub fn open(root: &Path) -> Result<Self> {
        let alignment: AlignmentSpec = read_json(&root.join(ALIGNMENT_FILE))?;
        alignment.validate()?;
        let stats_path = root.join(STATS_FILE);
        let stats = if stats_path.exists() { Some(read_json(&stats_path)?) } else { None };
        let mut subjects = BTreeMap::new();
        let entries = std::fs::read_dir(root).map_err(|e| Error::load(root, e.to_string()))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::load(root, e.to_string()))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if !(name.len() == 5 && name.bytes().all(|b| b.is_ascii_digit())) || !entry.path().is_dir() {
                continue;
            }
            let id: u32 = name.parse().expect("digits");
            let jpath = entry.path().join(JOINTS_FILE);
            let text = std::fs::read_to_string(&jpath).map_err(|e| Error::load(&jpath, e.to_string()))?;
            let (frame, poses) = parse_joints(&jpath, &text)?;
            subjects.insert(id, SubjectEntry { frame, poses });
        }
        if subjects.is_empty() {
            return Err(Error::load(root, "no subject directories"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            alignment,
            stats,
            subjects,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn alignment(&self) -> &AlignmentSpec {
        &self.alignment
    }

    pub fn stats(&self) -> Option<&DatasetStats> {
        self.stats.as_ref()
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.subjects.keys().copied().collect()
    }

    /// Every frame of `subjects` under `covers`, after checking that each
    /// requested modality image exists.
    pub fn index(&self, subjects: &[u32], modalities: &[Modality], covers: &[Cover]) -> Result<Vec<SampleKey>> {
        let mut keys = Vec::new();
        for &s in subjects {
            let entry = self
                .subjects
                .get(&s)
                .ok_or_else(|| Error::load(subject_dir(&self.root, s), "subject not found"))?;
            for &cover in covers {
                for &pose in entry.poses.keys() {
                    for &m in modalities {
                        let p = image_path(&self.root, s, m, cover, pose);
                        if !p.is_file() {
                            return Err(Error::load(p, format!("missing {m} image")));
                        }
                    }
                    keys.push(SampleKey { subject: s, pose, cover });
                }
            }
        }
        Ok(keys)
    }

    pub fn load(&self, key: SampleKey, modalities: &[Modality]) -> Result<MultimodalSample> {
        let entry = self
            .subjects
            .get(&key.subject)
            .ok_or_else(|| Error::load(subject_dir(&self.root, key.subject), "subject not found"))?;
        let joints = *entry.poses.get(&key.pose).ok_or_else(|| {
            Error::load(subject_dir(&self.root, key.subject).join(JOINTS_FILE), format!("no pose {}", key.pose))
        })?;
        let mut images = BTreeMap::new();
        for &m in modalities {
            let p = image_path(&self.root, key.subject, m, key.cover, key.pose);
            let img = Image::load_png(&p)?;
            if img.channels() != m.channels() {
                return Err(Error::load(p, format!("{m} needs {} channels, got {}", m.channels(), img.channels())));
            }
            if let Some(&(w, h)) = self.alignment.sizes.get(&m) {
                if (img.width(), img.height()) != (w, h) {
                    return Err(Error::load(p, format!("expected {w}x{h}, got {}x{}", img.width(), img.height())));
                }
            }
            images.insert(m, img);
        }
        Ok(MultimodalSample {
            subject: key.subject,
            pose: key.pose,
            cover: key.cover,
            images,
            joints,
            frame: Frame::Native(entry.frame),
        })
    }

    /// Lazily loads the frames named by `keys`.
    pub fn iter<'a>(&'a self, keys: &'a [SampleKey], modalities: &'a [Modality]) -> impl Iterator<Item = Result<MultimodalSample>> + 'a {
        keys.iter().map(move |&k| self.load(k, modalities))
    }
}

/// Opens `root` and yields every sample of every subject.
pub fn load_slp_layout(
    root: &Path,
    modalities: &[Modality],
    covers: &[Cover],
) -> Result<(DatasetLayout, Vec<SampleKey>)> {
    let layout = DatasetLayout::open(root)?;
    let keys = layout.index(&layout.subjects(), modalities, covers)?;
    Ok((layout, keys))
}
