use std::hint::black_box;

use bedfuse::fusion::{FusedModel, FusionConfig, FusionType, Strategy};
use bedfuse::metrics::{decode_heatmaps, pckh, PCKH_THRESHOLD};
use bedfuse::reconstruction::{Translator, TranslationConfig};
use bedfuse::{Backbone, BackboneConfig, Graph, Heatmaps, Mode, Modality, ParamStore, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, cin, cout, hw, batch) in [("conv3x3_8ch_64px_b4", 8, 8, 64, 4), ("conv3x3_64ch_64px_b1", 64, 64, 64, 1)] {
        let x = random(&[batch, cin, hw, hw], &mut rng);
        let w = random(&[cout, cin, 3, 3], &mut rng);
        c.bench_function(&format!("{name}_fwd_bwd"), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.input_with_grad(x.clone());
                let wv = g.input_with_grad(w.clone());
                let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
                let l = g.sum(y);
                black_box(g.backward(l).unwrap());
            })
        });
    }
}

fn backbone(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::<f32>::new();
    let cfg = BackboneConfig::tiny(1);
    let bb = Backbone::build(&mut ps, "bb.", &cfg, &mut rng).unwrap();
    let x = random(&[1, 1, 256, 256], &mut rng);
    c.bench_function("tiny_backbone_forward_256", |b| b.iter(|| black_box(bb.forward_full(&ps, &x).unwrap())));

    let mut ps = ParamStore::<f32>::new();
    let fcfg = FusionConfig::new(
        3,
        FusionType::Concatenation,
        Strategy::EndToEnd,
        vec![Modality::Visible, Modality::Lwir],
        Modality::Visible,
    );
    let model = FusedModel::build(&mut ps, &fcfg, &BackboneConfig::tiny(3), &mut rng).unwrap();
    let vis = random(&[2, 3, 256, 256], &mut rng);
    let lwir = random(&[2, 1, 256, 256], &mut rng);
    c.bench_function("tiny_fusion_train_step_b2", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xs = [g.input(vis.clone()), g.input(lwir.clone())];
            let y = model.forward(&mut g, &ps, &xs, Mode::Train, &mut rng).unwrap();
            let l = g.mean(y);
            black_box(g.backward(l).unwrap());
        })
    });
}

fn translator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    let t = Translator::build(&mut ps, &TranslationConfig::new(Modality::Lwir, Modality::Visible, true), &mut rng).unwrap();
    let img = bedfuse::data::Image::filled(1, 256, 256, 0.5);
    c.bench_function("tiny_generator_translate_256", |b| {
        b.iter(|| black_box(t.translate(&ps, std::slice::from_ref(&img), None).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let maps = Heatmaps::new(random(&[14, 64, 64], &mut rng)).unwrap();
    let gt = decode_heatmaps(&Heatmaps::new(random(&[14, 64, 64], &mut rng)).unwrap(), 4.0, false);
    c.bench_function("decode_and_pckh_64px", |b| {
        b.iter(|| {
            let s = decode_heatmaps(black_box(&maps), 4.0, true);
            black_box(pckh(&s, &gt, PCKH_THRESHOLD))
        })
    });
}

criterion_group!(benches, conv, backbone, translator, metrics);
criterion_main!(benches);
