use std::hint::black_box;

use clnet_core::evalbench::{synth_generate, SynthSpec};
use clnet_core::tracker::{TrackMode, Tracker, TrackerConfig};
use clnet_core::{
    assign_labels, latent_encode, BBox, BackboneConfig, Branch, ClNet, ClNetConfig, FeatureMap, LabelMap, NormMode,
    RpnModel,
};
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (RpnModel, ClNet) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = BackboneConfig::default();
    let model = RpnModel::init(cfg.clone(), &mut rng).unwrap();
    let net_cfg = ClNetConfig { latent_channels: 16, hidden: 32, ..ClNetConfig::default() };
    let net = ClNet::init(net_cfg, cfg.head_hidden, cfg.anchors_per_cell, 1, &mut rng).unwrap();
    (model, net)
}

fn labels(model: &RpnModel) -> LabelMap {
    let anchors = model.config.anchors().unwrap();
    assign_labels(&anchors, &BBox::from_center(0.0, 0.0, 14.0, 14.0).unwrap(), 0.3, 0.6)
}

fn bench_geometry(c: &mut Criterion) {
    let (model, _) = setup();
    let anchors = model.config.anchors().unwrap();
    let gt = BBox::from_center(1.5, -2.0, 13.0, 15.0).unwrap();
    c.bench_function("assign_labels_13x13x5", |b| b.iter(|| assign_labels(&anchors, black_box(&gt), 0.3, 0.6)));
}

fn bench_latent(c: &mut Criterion) {
    let (model, net) = setup();
    let y = labels(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = model.config.map_size().unwrap();
    let m = FeatureMap::new(Array3::from_shape_fn((16, n, n), |_| rng.random_range(-1.0..1.0))).unwrap();
    c.bench_function("latent_encode_16ch", |b| b.iter(|| latent_encode(black_box(&m), &y, Branch::Cls).unwrap()));
    let hidden = FeatureMap::new(Array3::from_shape_fn((32, n, n), |_| rng.random_range(-1.0..1.0))).unwrap();
    let cls = &net.levels[0].cls;
    c.bench_function("adapt_cls_branch", |b| {
        b.iter(|| {
            let cache = cls.adapt(&[black_box(&hidden)], &[&y], NormMode::Eval).unwrap();
            cls.adjust_head(&model.cls.head1, &cache).unwrap()
        })
    });
}

fn bench_tracking(c: &mut Criterion) {
    let (model, net) = setup();
    let seq = synth_generate(&SynthSpec { length: 2, ..SynthSpec::default() }).unwrap();
    let first = seq.frames[0].load().unwrap();
    let second = seq.frames[1].load().unwrap();
    for mode in [TrackMode::Base, TrackMode::Clnet] {
        let tracker = Tracker::new(&model, Some(&net), TrackerConfig { mode, ..TrackerConfig::default() }).unwrap();
        c.bench_function(&format!("init_{mode}"), |b| b.iter(|| tracker.init(&first, &seq.gt[0]).unwrap()));
        let state = tracker.init(&first, &seq.gt[0]).unwrap();
        c.bench_function(&format!("track_frame_{mode}"), |b| {
            b.iter(|| {
                let mut s = state.clone();
                tracker.track_frame(&mut s, &second).unwrap()
            })
        });
    }
}

criterion_group!(benches, bench_geometry, bench_latent, bench_tracking);
criterion_main!(benches);
