use std::collections::BTreeMap;
use std::path::Path;

use bedfuse::data::layout::{self, JOINTS_FILE};
use bedfuse::data::preprocess::square_crop_box;
use bedfuse::data::synthetic::{generate_synthetic_dataset, sample_skeleton, Profile, SyntheticConfig};
use bedfuse::data::{
    align_and_resize, composite_on_white, load_slp_layout, make_target_heatmaps, normalize, prepare_translation_pairs,
    square_crop, Affine, AlignmentSpec, BBox, DatasetLayout, DatasetSplit, Frame, Image, Joints, MultimodalSample,
    BBOX_MARGIN,
};
use bedfuse::{Cover, Error, Modality, NUM_JOINTS};
use proptest::prelude::*;

fn fixture(dir: &Path, subjects: u32, poses: u32, profile: Profile, covers: &[Cover]) -> AlignmentSpec {
    let mut cfg = SyntheticConfig::new(subjects, poses, 11);
    cfg.profile = profile;
    cfg.covers = covers.to_vec();
    generate_synthetic_dataset(dir, &cfg).unwrap()
}

fn sample(images: BTreeMap<Modality, Image>, joints: Joints, frame: Frame) -> MultimodalSample {
    MultimodalSample {
        subject: 1,
        pose: 1,
        cover: Cover::Uncover,
        images,
        joints,
        frame,
    }
}

/// Pixel-index-dependent test pattern in `[0, 1]`.
fn pattern(channels: usize, w: usize, h: usize) -> Image {
    let data = (0..channels * w * h).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    Image::new(channels, w, h, data).unwrap()
}

fn identity_spec(m: Modality, size: (usize, usize)) -> AlignmentSpec {
    AlignmentSpec {
        reference: m,
        transforms: BTreeMap::from([(m, Affine::IDENTITY)]),
        sizes: BTreeMap::from([(m, size)]),
    }
}

#[test]
fn loader_yields_one_sample_per_frame_with_requested_images() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2, 3, Profile::Danalab, &[Cover::Uncover]);
    let mods = [Modality::Visible, Modality::Lwir];
    let (layout, keys) = load_slp_layout(dir.path(), &mods, &[Cover::Uncover]).unwrap();
    assert_eq!(keys.len(), 6);
    for s in layout.iter(&keys, &mods) {
        let s = s.unwrap();
        assert_eq!(s.images.len(), 2);
        assert_eq!(s.frame, Frame::Native(Modality::Visible));
        assert_eq!((s.images[&Modality::Lwir].width(), s.images[&Modality::Lwir].height()), (120, 160));
        assert!(s.joints.iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn missing_modality_or_short_annotation_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 1, 1, Profile::Simlab, &[Cover::Uncover]);
    let e = load_slp_layout(dir.path(), &[Modality::Pressure], &[Cover::Uncover]).unwrap_err();
    match e {
        Error::Load { path, .. } => assert!(path.to_string_lossy().contains("pressure"), "{}", path.display()),
        other => panic!("expected a load error, got {other:?}"),
    }
    let (layout, _) = load_slp_layout(dir.path(), &[Modality::Visible], &[Cover::Uncover]).unwrap();
    assert_eq!(layout.alignment().size(Modality::Visible).unwrap(), (896, 1600));

    let jpath = layout::subject_dir(dir.path(), 1).join(JOINTS_FILE);
    let text = std::fs::read_to_string(&jpath).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    std::fs::write(&jpath, lines.join("\n")).unwrap();
    match DatasetLayout::open(dir.path()).unwrap_err() {
        Error::Load { path, msg } => {
            assert_eq!(path, jpath);
            assert!(msg.contains("13 joint rows"), "{msg}");
        }
        other => panic!("expected a load error, got {other:?}"),
    }
}

#[test]
fn identity_alignment_at_output_size_is_a_no_op() {
    let img = pattern(1, 256, 256);
    let joints = sample_skeleton(3).map(|[x, y]| [x * 0.25, y * 0.25]);
    let s = sample(BTreeMap::from([(Modality::Lwir, img.clone())]), joints, Frame::Native(Modality::Lwir));
    let out = align_and_resize(&s, &identity_spec(Modality::Lwir, (256, 256)), 256).unwrap();
    assert_eq!(out.images[&Modality::Lwir], img);
    assert_eq!(out.joints, joints);
    assert_eq!(out.frame, Frame::Common(256));
}

#[test]
fn scaled_modality_joints_follow_the_affine() {
    // depth native 256x256 is twice as coarse as the 512x512 visible reference
    let spec = AlignmentSpec {
        reference: Modality::Visible,
        transforms: BTreeMap::from([(Modality::Visible, Affine::IDENTITY), (Modality::Depth, Affine::scale(2.0, 2.0))]),
        sizes: BTreeMap::from([(Modality::Visible, (512, 512)), (Modality::Depth, (256, 256))]),
    };
    let depth_joints: Joints = std::array::from_fn(|j| [10.0 + 13.0 * j as f64, 200.0 - 7.5 * j as f64]);
    let images = BTreeMap::from([(Modality::Visible, pattern(3, 512, 512)), (Modality::Depth, pattern(1, 256, 256))]);
    let s = sample(images, depth_joints, Frame::Native(Modality::Depth));
    let out = align_and_resize(&s, &spec, 256).unwrap();
    for (got, p) in out.joints.iter().zip(&depth_joints) {
        // 2x into the reference, then 256/512 into the output frame
        assert!((got[0] - p[0]).abs() < 1e-9 && (got[1] - p[1]).abs() < 1e-9);
    }
    // depth already sits on the output grid, so it resamples exactly
    assert_eq!(out.images[&Modality::Depth], s.images[&Modality::Depth]);

    let danalab = Profile::Danalab.alignment();
    for m in Modality::ALL {
        let t = danalab.transform(m).unwrap();
        let inv = t.inverse().unwrap();
        for p in sample_skeleton(m as u64) {
            let back = t.apply(inv.apply(p));
            assert!((back[0] - p[0]).abs() < 1e-6 && (back[1] - p[1]).abs() < 1e-6);
        }
    }
}

#[test]
fn singular_transform_is_an_alignment_error() {
    let mut spec = identity_spec(Modality::Visible, (64, 64));
    spec.transforms.insert(Modality::Lwir, Affine([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]));
    spec.sizes.insert(Modality::Lwir, (32, 32));
    let images = BTreeMap::from([(Modality::Visible, pattern(3, 64, 64)), (Modality::Lwir, pattern(1, 32, 32))]);
    let s = sample(images, [[10.0, 10.0]; NUM_JOINTS], Frame::Native(Modality::Visible));
    assert!(matches!(align_and_resize(&s, &spec, 32), Err(Error::Alignment(_))));
    assert!(matches!(spec.validate(), Err(Error::Alignment(_))));
}

/// Isotropic Gaussian blob of width `sigma` at continuous point `c`.
fn blob(w: usize, h: usize, c: [f64; 2], sigma: f64) -> Image {
    let mut img = Image::filled(1, w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let d2 = (x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2);
            img.set(0, x, y, (-d2 / (2.0 * sigma * sigma)).exp() as f32);
        }
    }
    img
}

fn centroid(img: &Image) -> [f64; 2] {
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v = img.get(0, x, y) as f64;
            s += v;
            sx += v * (x as f64 + 0.5);
            sy += v * (y as f64 + 0.5);
        }
    }
    [sx / s, sy / s]
}

#[test]
fn alignment_preserves_incidence_across_modalities() {
    let spec = Profile::Danalab.alignment();
    let joints = sample_skeleton(5);
    let out = 256;
    for j in [0usize, 8, 13] {
        let mut images = BTreeMap::new();
        for m in [Modality::Lwir, Modality::Depth, Modality::Pressure] {
            let (w, h) = spec.size(m).unwrap();
            let t = spec.transform(m).unwrap();
            let native = t.inverse().unwrap().apply(joints[j]);
            // about 4 output pixels wide whatever the native resolution
            let sigma = 4.0 * spec.reference_size().unwrap().1 as f64 / out as f64 / t.0[1][1];
            images.insert(m, blob(w, h, native, sigma));
        }
        let s = sample(images, joints, Frame::Native(Modality::Visible));
        let a = square_crop(&s, &spec, out).unwrap();
        for (m, img) in &a.images {
            let c = centroid(img);
            let d = ((c[0] - a.joints[j][0]).powi(2) + (c[1] - a.joints[j][1]).powi(2)).sqrt();
            assert!(d < 0.5, "joint {j} in {m}: rendered at {c:?}, annotated at {:?}", a.joints[j]);
        }
    }
}

#[test]
fn square_crop_box_follows_the_margin_rule() {
    let mut joints: Joints = [[300.0, 400.0]; NUM_JOINTS];
    joints[1] = [400.0, 580.0];
    joints[2] = [350.0, 450.0];
    let b = square_crop_box(&joints).unwrap();
    let side = 180.0 * (1.0 + 2.0 * BBOX_MARGIN);
    assert!((b.width() - side).abs() < 1e-9 && (b.height() - side).abs() < 1e-9);
    assert!((b.center()[0] - 350.0).abs() < 1e-9 && (b.center()[1] - 490.0).abs() < 1e-9);

    let spec = Profile::Danalab.alignment();
    let images = BTreeMap::from([(Modality::Visible, pattern(3, 576, 1024)), (Modality::Depth, pattern(1, 424, 512))]);
    let s = sample(images, joints, Frame::Native(Modality::Visible));
    let c = square_crop(&s, &spec, 256).unwrap();
    for (got, p) in c.joints.iter().zip(&joints) {
        let want = [(p[0] - b.x0) * 256.0 / side, (p[1] - b.y0) * 256.0 / side];
        assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9);
    }
    assert!(c.images.values().all(|i| (i.width(), i.height()) == (256, 256)));

    let point = sample(s.images.clone(), [[100.0, 100.0]; NUM_JOINTS], Frame::Native(Modality::Visible));
    assert!(matches!(square_crop(&point, &spec, 256), Err(Error::Crop(_))));
}

#[test]
fn cropped_generator_joints_lie_inside_the_frame() {
    let spec = Profile::Danalab.alignment();
    for seed in 0..50 {
        let joints = sample_skeleton(seed);
        let images = BTreeMap::from([(Modality::Depth, Image::filled(1, 424, 512, 0.0))]);
        let c = square_crop(&sample(images, joints, Frame::Native(Modality::Visible)), &spec, 256).unwrap();
        assert!(c.joints.iter().flatten().all(|&v| (0.0..256.0).contains(&v)), "seed {seed}: {:?}", c.joints);
    }
}

#[test]
fn normalize_examples_and_guard() {
    let img = Image::new(1, 2, 1, vec![0.0, 2.0]).unwrap();
    assert_eq!(normalize(&img, &[1.0], &[1.0]).unwrap().data(), &[-1.0, 1.0]);

    let img = pattern(3, 40, 30);
    let stats = bedfuse::data::ChannelStats::from_images([&img]).unwrap();
    let n = normalize(&img, &stats.mean, &stats.std).unwrap();
    for c in 0..3 {
        let p = n.plane(c);
        let mean = p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
        let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / p.len() as f64;
        assert!(mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-5, "channel {c}: {mean} {var}");
    }

    let flat = Image::filled(1, 8, 8, 0.3);
    let stats = bedfuse::data::ChannelStats::from_images([&flat]).unwrap();
    assert!(matches!(normalize(&flat, &stats.mean, &stats.std), Err(Error::Normalization(_))));
    assert!(matches!(normalize(&flat, &[0.3], &[1e-6]), Err(Error::Normalization(_))));
}

proptest! {
    #[test]
    fn normalize_obeys_the_affine_law(
        xs in prop::collection::vec(-1.0f32..1.0, 16),
        a in -3.0f64..3.0,
        b in -2.0f64..2.0,
        mean in -1.0f64..1.0,
        std in 0.05f64..4.0,
    ) {
        let x = Image::new(1, 4, 4, xs.clone()).unwrap();
        let y = Image::new(1, 4, 4, xs.iter().map(|&v| (a * v as f64 + b) as f32).collect()).unwrap();
        let nx = normalize(&x, &[mean], &[std]).unwrap();
        let ny = normalize(&y, &[mean], &[std]).unwrap();
        let offset = (a * mean + b - mean) / std;
        for (&u, &v) in nx.data().iter().zip(ny.data()) {
            let want = a * u as f64 + offset;
            prop_assert!((v as f64 - want).abs() < 1e-4 * (1.0 + want.abs()), "{v} vs {want}");
        }
    }

    #[test]
    fn split_is_disjoint_and_covers_its_subjects(ids in prop::collection::btree_set(1u32..500, 2..120)) {
        let ids: Vec<u32> = ids.into_iter().collect();
        let s = DatasetSplit::default_for(&ids).unwrap();
        let pool: std::collections::BTreeSet<u32> = s.train.iter().chain(&s.val).copied().collect();
        prop_assert!(s.test.iter().all(|t| !pool.contains(t)));
        prop_assert!(s.train.iter().all(|t| !s.val.contains(t)));
        prop_assert_eq!(pool.len() + s.test.len(), ids.len());
        prop_assert!(!s.test.is_empty());
        prop_assert!(s.train.iter().chain(&s.val).max() < s.test.iter().min());
    }

    #[test]
    fn heatmap_argmax_is_the_rounded_joint(xs in prop::collection::vec((12.0f64..244.0, 12.0f64..244.0), NUM_JOINTS)) {
        let joints: Joints = std::array::from_fn(|j| [xs[j].0, xs[j].1]);
        let (maps, valid) = make_target_heatmaps(&joints, 64, 4.0, 2.0);
        prop_assert!(valid.iter().all(|&v| v));
        for (j, p) in joints.iter().enumerate() {
            let m = &maps.data()[j * 4096..(j + 1) * 4096];
            let arg = (0..4096).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap();
            let (ix, iy) = ((p[0] / 4.0).round() as usize, (p[1] / 4.0).round() as usize);
            // cells tie only when the joint sits exactly between two of them
            let (ax, ay) = (arg % 64, arg / 64);
            let tie = |a: usize, i: usize, c: f64| a == i || ((c / 4.0).fract() - 0.5).abs() < 1e-6;
            prop_assert!(tie(ax, ix, p[0]) && tie(ay, iy, p[1]), "joint {j} at {p:?}: argmax ({ax}, {ay})");
        }
    }
}

#[test]
fn heatmap_peak_mass_and_limits() {
    let mut joints: Joints = [[128.0, 128.0]; NUM_JOINTS];
    joints[3] = [300.0, 10.0];
    let (maps, valid) = make_target_heatmaps(&joints, 64, 4.0, 2.0);
    let m = &maps.data()[..4096];
    assert_eq!(m[32 * 64 + 32], 1.0);
    assert!(m.iter().all(|&v| v <= 1.0));
    let mass: f64 = m.iter().map(|&v| v as f64).sum();
    let want = 2.0 * std::f64::consts::PI * 4.0;
    assert!((mass / want - 1.0).abs() < 0.02, "{mass} vs {want}");
    assert!(!valid[3] && valid[0]);

    let (hot, _) = make_target_heatmaps(&joints, 64, 4.0, 0.0);
    let m = &hot.data()[..4096];
    assert_eq!(m.iter().filter(|&&v| v != 0.0).count(), 1);
    assert_eq!(m[32 * 64 + 32], 1.0);
}

#[test]
fn translation_pairs_share_the_uncovered_target() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixture(dir.path(), 1, 1, Profile::Danalab, &Cover::ALL);
    let mods = [Modality::Visible, Modality::Lwir];
    let (layout, keys) = load_slp_layout(dir.path(), &mods, &Cover::ALL).unwrap();
    let samples: Vec<_> = layout.iter(&keys, &mods).collect::<Result<_, _>>().unwrap();
    let pairs = prepare_translation_pairs(&samples, &spec, Modality::Lwir, Modality::Visible, 256).unwrap();
    assert_eq!(pairs.len(), 3);
    let covers: Vec<Cover> = pairs.iter().map(|p| p.cover).collect();
    assert_eq!(covers, Cover::ALL);
    for p in &pairs {
        assert_eq!((p.source.width(), p.source.height(), p.source.channels()), (256, 256, 1));
        assert_eq!((p.target.width(), p.target.height(), p.target.channels()), (256, 256, 3));
        assert_eq!(p.target, pairs[0].target);
        assert_eq!(p.bbox, pairs[0].bbox);
    }
    assert_ne!(pairs[0].source, pairs[2].source);
    let again = prepare_translation_pairs(&samples, &spec, Modality::Lwir, Modality::Visible, 256).unwrap();
    assert_eq!(again, pairs);

    let covered: Vec<_> = samples.iter().filter(|s| s.cover != Cover::Uncover).cloned().collect();
    let e = prepare_translation_pairs(&covered, &spec, Modality::Lwir, Modality::Visible, 256).unwrap_err();
    assert!(matches!(e, Error::Pairing(_)));
}

#[test]
fn composite_places_the_crop_and_leaves_white_elsewhere() {
    let full = pattern(3, 64, 48);
    let out = composite_on_white(&full, &BBox { x0: 0.0, y0: 0.0, x1: 64.0, y1: 48.0 }, 64, 48).unwrap();
    assert_eq!(out, full);
    let scaled = composite_on_white(&full, &BBox { x0: 0.0, y0: 0.0, x1: 128.0, y1: 96.0 }, 128, 96).unwrap();
    assert_eq!(scaled, full.resize(128, 96));

    // crop at twice the box resolution: every canvas pixel is a 2x2 block mean
    let crop = pattern(1, 40, 60);
    let b = BBox { x0: 30.0, y0: 50.0, x1: 50.0, y1: 80.0 };
    let out = composite_on_white(&crop, &b, 80, 130).unwrap();
    for y in 0..130 {
        for x in 0..80 {
            let inside = (30..50).contains(&x) && (50..80).contains(&y);
            let want = if inside {
                let (u, v) = (2 * (x - 30), 2 * (y - 50));
                (crop.get(0, u, v) + crop.get(0, u + 1, v) + crop.get(0, u, v + 1) + crop.get(0, u + 1, v + 1)) / 4.0
            } else {
                1.0
            };
            assert!((out.get(0, x, y) - want).abs() <= 1.0 / 255.0, "({x}, {y})");
        }
    }
    for (x, y) in [(0, 0), (79, 0), (0, 129), (79, 129)] {
        assert_eq!(out.get(0, x, y), 1.0);
    }

    let outside = BBox { x0: 60.0, y0: 50.0, x1: 90.0, y1: 80.0 };
    assert!(matches!(composite_on_white(&crop, &outside, 80, 130), Err(Error::Composite(_))));
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generator_is_deterministic_and_keeps_joints_in_every_image() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let covers = [Cover::Uncover, Cover::Cover2];
    let spec = fixture(a.path(), 2, 2, Profile::Danalab, &covers);
    fixture(b.path(), 2, 2, Profile::Danalab, &covers);
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(ta.len(), 2 * 2 * 2 * 4 + 2 + 2);
    assert!(ta == tb, "datasets differ");

    let layout = DatasetLayout::open(a.path()).unwrap();
    let keys = layout.index(&layout.subjects(), &Modality::ALL, &covers).unwrap();
    for s in layout.iter(&keys, &Modality::ALL) {
        let s = s.unwrap();
        for (m, img) in &s.images {
            let to_native = spec.transform(*m).unwrap().inverse().unwrap();
            for p in s.joints {
                let [x, y] = to_native.apply(p);
                assert!(x >= 0.0 && y >= 0.0 && x < img.width() as f64 && y < img.height() as f64, "{m} {p:?}");
            }
        }
    }
}
