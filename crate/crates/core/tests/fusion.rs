use bedfuse::data::layout::SampleKey;
use bedfuse::data::make_target_heatmaps;
use bedfuse::data::synthetic::sample_skeleton;
use bedfuse::fusion::{
    apply_modal_weights, fuse_add, fuse_concat, init_modal_weights, spatial_dropout, FusedModel, FusionConfig,
    FusionReducer, FusionType, ModalWeights, Strategy,
};
use bedfuse::harness::pose::{train_pose, PoseSample, PoseSchedule};
use bedfuse::{BackboneConfig, BranchFeatureSet, Cover, Error, Graph, Modality, Mode, ParamStore, Tensor, Var, NUM_JOINTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODS3: [Modality; 3] = [Modality::Lwir, Modality::Depth, Modality::Pressure];

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Random per-branch shapes `[B, n_b, H_b, W_b]` shared by every modality.
fn random_sets(rng: &mut ChaCha8Rng, n_mod: usize) -> Vec<BranchFeatureSet<f64>> {
    let branches = rng.random_range(1..=3);
    let batch = rng.random_range(1..=2);
    let shapes: Vec<[usize; 4]> = (0..branches)
        .map(|_| [batch, rng.random_range(1..=5), rng.random_range(1..=8), rng.random_range(1..=8)])
        .collect();
    (0..n_mod)
        .map(|m| BranchFeatureSet {
            stage: branches.max(2),
            modality: Some(MODS3[m]),
            features: shapes.iter().map(|s| random_tensor(s, rng)).collect(),
        })
        .collect()
}

#[test]
fn fuse_add_matches_a_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let n_mod = 2 + case % 2;
        let sets = random_sets(&mut rng, n_mod);
        let out = fuse_add(&sets).unwrap();
        for (b, y) in out.features.iter().enumerate() {
            let [nb, c, h, w] = <[usize; 4]>::try_from(y.shape()).unwrap();
            for i in 0..nb {
                for k in 0..c {
                    for r in 0..h {
                        for q in 0..w {
                            let at = ((i * c + k) * h + r) * w + q;
                            let mut want = 0.0;
                            for s in &sets {
                                want += s.features[b].data()[at];
                            }
                            assert!((y.data()[at] - want).abs() < 1e-6, "case {case}");
                        }
                    }
                }
            }
        }
        // any modality order gives the same sum
        let mut rev = sets.clone();
        rev.reverse();
        let back = fuse_add(&rev).unwrap();
        for (x, y) in back.features.iter().zip(&out.features) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-12);
        }
    }
    let a = BranchFeatureSet {
        stage: 2,
        modality: None,
        features: vec![Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()],
    };
    let zero = BranchFeatureSet {
        features: vec![Tensor::zeros(&[1, 1, 2, 2])],
        ..a.clone()
    };
    assert_eq!(fuse_add(&[a.clone(), zero]).unwrap().features, a.features);
}

#[test]
fn fuse_concat_matches_a_per_pixel_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let n_mod = 2 + case % 2;
        let sets = random_sets(&mut rng, n_mod);
        let channels: Vec<usize> = sets[0].features.iter().map(|t| t.shape()[1]).collect();
        let mut ps = ParamStore::<f64>::new();
        let red = FusionReducer::new(&mut ps, "f.", &channels, n_mod, &mut rng);
        for conv in &red.convs {
            let b = conv.bias.unwrap();
            let n = ps.value(b).numel();
            ps.set_value(b, random_tensor(&[n], &mut rng)).unwrap();
        }
        let out = fuse_concat(&sets, &red, &ps).unwrap();
        for (b, (y, conv)) in out.features.iter().zip(&red.convs).enumerate() {
            let n = channels[b];
            assert_eq!(conv.in_channels, n_mod * n);
            assert_eq!(y.shape()[1], n);
            let wt = ps.value(conv.weight).data();
            let bias = ps.value(conv.bias.unwrap()).data();
            let [nb, _, h, w] = <[usize; 4]>::try_from(y.shape()).unwrap();
            for i in 0..nb {
                for r in 0..h {
                    for q in 0..w {
                        for o in 0..n {
                            let mut want = bias[o];
                            for (m, s) in sets.iter().enumerate() {
                                for k in 0..n {
                                    let x = s.features[b].data()[((i * n + k) * h + r) * w + q];
                                    want += wt[o * n_mod * n + m * n + k] * x;
                                }
                            }
                            let got = y.data()[((i * n + o) * h + r) * w + q];
                            assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn concat_stacks_in_modality_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sets = random_sets(&mut rng, 3);
    let channels: Vec<usize> = sets[0].features.iter().map(|t| t.shape()[1]).collect();
    let mut ps = ParamStore::<f64>::new();
    let red = FusionReducer::new(&mut ps, "f.", &channels, 3, &mut rng);
    // a block selector on slot k reads back whichever modality sits at k
    for slot in 0..3 {
        red.init_block_selector(&mut ps, slot).unwrap();
        let out = fuse_concat(&sets, &red, &ps).unwrap();
        assert_eq!(out.features, sets[slot].features);
        let rotated: Vec<_> = (0..3).map(|i| sets[(i + 1) % 3].clone()).collect();
        let out = fuse_concat(&rotated, &red, &ps).unwrap();
        assert_eq!(out.features, sets[(slot + 1) % 3].features);
    }
}

#[test]
fn mismatches_are_fusion_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sets = random_sets(&mut rng, 2);
    let channels: Vec<usize> = sets[0].features.iter().map(|t| t.shape()[1]).collect();
    let mut ps = ParamStore::<f64>::new();
    let red3 = FusionReducer::new(&mut ps, "a.", &channels, 3, &mut rng);
    assert!(matches!(fuse_concat(&sets, &red3, &ps), Err(Error::Fusion(_))));
    let wide: Vec<usize> = channels.iter().map(|c| c + 1).collect();
    let red_wide = FusionReducer::new(&mut ps, "b.", &wide, 2, &mut rng);
    assert!(matches!(fuse_concat(&sets, &red_wide, &ps), Err(Error::Fusion(_))));

    let w = ModalWeights::new(&mut ps, "w.", &[Modality::Lwir, Modality::Depth], &wide);
    let e = apply_modal_weights(&sets[0], &ps, &w, Modality::Lwir, 0.0, false, &mut rng);
    assert!(matches!(e, Err(Error::Fusion(_))));
    let mut other = sets[1].clone();
    other.features[0] = random_tensor(&[1, 9, 2, 2], &mut rng);
    assert!(matches!(fuse_add(&[sets[0].clone(), other]), Err(Error::Fusion(_))));
}

#[test]
fn unit_and_zero_modal_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sets = random_sets(&mut rng, 3);
    let channels: Vec<usize> = sets[0].features.iter().map(|t| t.shape()[1]).collect();
    let mut ps = ParamStore::<f64>::new();
    let w = ModalWeights::new(&mut ps, "w.", &MODS3, &channels);
    for (m, set) in MODS3.iter().zip(&sets) {
        let out = apply_modal_weights(set, &ps, &w, *m, 0.2, false, &mut rng).unwrap();
        assert_eq!(out.features, set.features);
    }
    init_modal_weights(&mut ps, &w, Modality::Depth).unwrap();
    for (slot, ids) in w.ids.iter().enumerate() {
        let want = if MODS3[slot] == Modality::Depth { 1.0 } else { 0.0 };
        assert!(ids.iter().all(|&id| ps.value(id).data().iter().all(|&v| v == want)));
    }
    let out = apply_modal_weights(&sets[0], &ps, &w, Modality::Lwir, 0.2, false, &mut rng).unwrap();
    assert!(out.features.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

fn tiny64(channels: usize) -> BackboneConfig {
    BackboneConfig {
        input_size: 64,
        ..BackboneConfig::tiny(channels)
    }
}

fn inputs(g: &mut Graph<f32>, mods: &[Modality], batch: usize, size: usize, seed: u64) -> Vec<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mods.iter()
        .map(|m| g.input(Tensor::from_fn(&[batch, m.channels(), size, size], |_| rng.random_range(-1.0..1.0))))
        .collect()
}

#[test]
fn weighted_and_selector_init_reproduce_the_primary_features() {
    for (stage, mods, primary) in [
        (2, vec![Modality::Depth, Modality::Lwir], Modality::Depth),
        (3, MODS3.to_vec(), Modality::Depth),
        (3, vec![Modality::Visible, Modality::Lwir], Modality::Lwir),
    ] {
        for (ty, strategy) in [
            (FusionType::Addition, Strategy::FrozenWeighted),
            (FusionType::Concatenation, Strategy::FrozenWeighted),
            (FusionType::Concatenation, Strategy::FrozenPlain),
            (FusionType::Concatenation, Strategy::EndToEnd),
        ] {
            let cfg = FusionConfig::new(stage, ty, strategy, mods.clone(), primary);
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let model = FusedModel::build(&mut ps, &cfg, &tiny64(1), &mut rng).unwrap();
            let mut g = Graph::new();
            g.set_param_grads(false);
            let xs = inputs(&mut g, &mods, 2, 64, 7);
            let feats = model.extract(&mut g, &ps, &xs, Mode::Eval).unwrap();
            let own = feats[cfg.primary_index()].clone();
            let fused = model.fuse(&mut g, &ps, feats, Mode::Eval, &mut rng).unwrap();
            for (f, p) in fused.iter().zip(&own) {
                let (f, p) = (g.value(*f), g.value(*p));
                if ty == FusionType::Addition {
                    assert_eq!(f, p, "{strategy:?} {ty:?} stage {stage}");
                } else {
                    assert!(f.max_abs_diff(p).unwrap() <= 1e-6, "{strategy:?} {ty:?} stage {stage}");
                }
            }
        }
    }
}

#[test]
fn spatial_dropout_statistics() {
    let (batch, channels, p) = (100, 100, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::<f32>::new();
    g.set_param_grads(false);
    let x = g.input(Tensor::ones(&[batch, channels, 3, 5]));
    let y = spatial_dropout(&mut g, x, p, true, &mut rng).unwrap();
    let out = g.value(y).data();
    let mut dropped = vec![false; batch * channels];
    for (k, plane) in out.chunks(15).enumerate() {
        let zeros = plane.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros == 0 || zeros == 15, "channel {k} partly dropped");
        assert!(zeros == 15 || plane.iter().all(|&v| v == 1.25));
        dropped[k] = zeros == 15;
    }
    let rate = dropped.iter().filter(|&&d| d).count() as f64 / dropped.len() as f64;
    assert!((0.18..=0.22).contains(&rate), "drop rate {rate}");

    // 2x2 contingency of disjoint neighbouring channel pairs; chi-square with
    // one degree of freedom, 0.99 quantile 6.635
    let mut table = [[0.0f64; 2]; 2];
    for pair in dropped.chunks(2) {
        table[pair[0] as usize][pair[1] as usize] += 1.0;
    }
    let n: f64 = table.iter().flatten().sum();
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut chi2 = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let e = rows[r] * cols[c] / n;
            chi2 += (table[r][c] - e).powi(2) / e;
        }
    }
    assert!(chi2 < 6.635, "independence chi-square {chi2}");

    let same = spatial_dropout(&mut g, x, p, false, &mut rng).unwrap();
    assert_eq!(same, x);
}

fn pose_samples(mods: &[Modality], n: usize, size: usize) -> Vec<PoseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..n)
        .map(|i| {
            let joints = sample_skeleton(i as u64).map(|[x, y]| [x * size as f64 / 1024.0 + 10.0, y * size as f64 / 1024.0]);
            let (target, valid) = make_target_heatmaps(&joints, size / 4, 4.0, 2.0);
            PoseSample {
                key: SampleKey {
                    subject: 1,
                    pose: i as u32 + 1,
                    cover: Cover::Uncover,
                },
                inputs: mods
                    .iter()
                    .map(|m| Tensor::from_fn(&[m.channels(), size, size], |_| rng.random_range(-1.0..1.0)))
                    .collect(),
                target,
                valid,
                joints,
            }
        })
        .collect()
}

fn snapshot(ps: &ParamStore<f32>, ids: &[bedfuse::ParamId]) -> Vec<Vec<u32>> {
    ids.iter().map(|&id| ps.value(id).data().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn frozen_strategies_keep_extractors_and_end_to_end_trains_them() {
    let mods = vec![Modality::Lwir, Modality::Depth];
    let samples = pose_samples(&mods, 8, 64);
    assert!(samples.iter().all(|s| s.valid.iter().filter(|&&v| v).count() == NUM_JOINTS));
    let schedule = PoseSchedule {
        steps: Some(10),
        batch_size: 2,
        lr: 1e-3,
        ..PoseSchedule::default()
    };
    for stage in [2, 3] {
        for strategy in [Strategy::FrozenPlain, Strategy::FrozenWeighted, Strategy::EndToEnd] {
            let cfg = FusionConfig::new(stage, FusionType::Addition, strategy, mods.clone(), Modality::Depth);
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let model = FusedModel::build(&mut ps, &cfg, &tiny64(1), &mut rng).unwrap();
            let extractor = model.extractor_stage_ids(&ps);
            let head: Vec<_> = ps.ids_with_prefix("bb.depth.head").collect();
            let stage1: Vec<Vec<_>> = mods.iter().map(|&m| model.backbone(m).unwrap().stage_param_ids(&ps, 1)).collect();
            let (before, head_before) = (snapshot(&ps, &extractor), snapshot(&ps, &head));
            let s1_before: Vec<_> = stage1.iter().map(|ids| snapshot(&ps, ids)).collect();
            let hist = train_pose(&model, &mut ps, &samples, &schedule, &mut rng).unwrap();
            assert_eq!(hist.iter().map(|h| h.steps).sum::<usize>(), 10);
            assert_ne!(snapshot(&ps, &head), head_before, "{strategy:?}: head did not train");
            if strategy.is_frozen() {
                assert!(snapshot(&ps, &extractor) == before, "{strategy:?} stage {stage} moved a frozen parameter");
            } else {
                for (m, (ids, was)) in mods.iter().zip(stage1.iter().zip(&s1_before)) {
                    assert_ne!(&snapshot(&ps, ids), was, "end to end left {m} stage 1 untouched");
                }
            }
        }
    }
}

#[test]
fn frozen_plain_forward_is_the_manual_composition() {
    let mods = vec![Modality::Lwir, Modality::Depth];
    let cfg = FusionConfig::new(2, FusionType::Addition, Strategy::FrozenPlain, mods.clone(), Modality::Lwir);
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = FusedModel::build(&mut ps, &cfg, &tiny64(1), &mut rng).unwrap();
    let mut g = Graph::new();
    g.set_param_grads(false);
    let xs = inputs(&mut g, &mods, 2, 64, 12);
    let y = model.forward(&mut g, &ps, &xs, Mode::Eval, &mut rng).unwrap();

    let mut h = Graph::new();
    h.set_param_grads(false);
    let xs = inputs(&mut h, &mods, 2, 64, 12);
    let sets: Vec<BranchFeatureSet<f32>> = mods
        .iter()
        .zip(&xs)
        .map(|(&m, &x)| {
            let f = model.backbone(m).unwrap().forward_to_stage(&mut h, &ps, x, 2, Mode::Eval).unwrap();
            BranchFeatureSet {
                stage: 2,
                modality: Some(m),
                features: f.iter().map(|&v| h.value(v).clone()).collect(),
            }
        })
        .collect();
    let fused = fuse_add(&sets).unwrap();
    let fv: Vec<Var> = fused.features.into_iter().map(|t| h.input(t)).collect();
    let z = model.trunk().forward_from_stage(&mut h, &ps, &fv, 2, Mode::Eval).unwrap();
    assert_eq!(g.value(y), h.value(z));
}

#[test]
fn missing_pretrained_tensors_are_reported() {
    let cfg = FusionConfig::new(
        2,
        FusionType::Addition,
        Strategy::FrozenPlain,
        vec![Modality::Lwir, Modality::Depth],
        Modality::Depth,
    );
    let mut ps = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = FusedModel::build(&mut ps, &cfg, &tiny64(1), &mut rng).unwrap();
    assert!(model.backbone(Modality::Visible).is_err());
    let source = std::collections::BTreeMap::new();
    assert!(model.load_backbone(&mut ps, Modality::Lwir, &source).is_err());
}
