//! Backbone topology, shape propagation and feature extraction.

use faster_core::backbone::{
    build_backbone, output_sizes, spec_table, weighted_layer_count, BackboneConfig, Family, LayerKind, ResBlock,
};
use faster_core::{Graph, Mode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clip(n: usize, l: usize, res: usize, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, l, res, res, 3], |_| r.random_range(-2.0..2.0))
}

fn size_of(sizes: &[(String, [usize; 4])], name: &str) -> [usize; 4] {
    sizes.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no row {name}")).1
}

#[test]
fn full_spec_output_sizes_follow_the_architecture_table() {
    for l in [8, 16, 32] {
        let r2d = output_sizes(&BackboneConfig::full_spec(Family::R2d, l)).unwrap();
        assert_eq!(size_of(&r2d, "conv1"), [l / 8, 112, 112, 64]);
        assert_eq!(size_of(&r2d, "pool1"), [l / 8, 56, 56, 64]);
        assert_eq!(size_of(&r2d, "res2"), [l / 8, 56, 56, 256]);
        assert_eq!(size_of(&r2d, "res3"), [l / 8, 28, 28, 512]);
        assert_eq!(size_of(&r2d, "res4"), [l / 8, 14, 14, 1024]);
        assert_eq!(size_of(&r2d, "res5"), [l / 8, 7, 7, 2048]);

        let r21d = output_sizes(&BackboneConfig::full_spec(Family::R21d, l)).unwrap();
        assert_eq!(size_of(&r21d, "conv1_s"), [l, 112, 112, 45]);
        assert_eq!(size_of(&r21d, "conv1_t"), [l, 112, 112, 64]);
        assert_eq!(size_of(&r21d, "pool1"), [l, 56, 56, 64]);
        assert_eq!(size_of(&r21d, "res2"), [l, 56, 56, 256]);
        assert_eq!(size_of(&r21d, "res3"), [l / 2, 28, 28, 512]);
        assert_eq!(size_of(&r21d, "res4"), [l / 4, 14, 14, 1024]);
        assert_eq!(size_of(&r21d, "res5"), [l / 8, 7, 7, 2048]);
    }
}

#[test]
fn weighted_layers_match_the_network_names() {
    let r2d = spec_table(&BackboneConfig::full_spec(Family::R2d, 8)).unwrap();
    assert_eq!(weighted_layer_count(&r2d), 26);
    let r21d = spec_table(&BackboneConfig::full_spec(Family::R21d, 8)).unwrap();
    assert_eq!(weighted_layer_count(&r21d), 50);
}

#[test]
fn r21d_res3_stage_rows() {
    let table = spec_table(&BackboneConfig::full_spec(Family::R21d, 32)).unwrap();
    let res3 = table.iter().find(|l| l.name == "res3").unwrap();
    assert_eq!(res3.kind, LayerKind::Bottleneck21d);
    assert_eq!((res3.width, res3.mid_channels, res3.out_channels, res3.repeats), (128, 288, 512, 4));
    let mids: Vec<_> = ["res2", "res3", "res4", "res5"]
        .iter()
        .map(|n| table.iter().find(|l| l.name == *n).unwrap())
        .map(|l| (l.mid_channels, l.repeats, l.out_channels, l.width))
        .collect();
    assert_eq!(mids, vec![(144, 3, 256, 64), (288, 4, 512, 128), (576, 6, 1024, 256), (1152, 3, 2048, 512)]);
    for l in table.iter().filter(|l| l.kind == LayerKind::Bottleneck21d) {
        assert_eq!(l.out_channels, 4 * l.width);
    }
}

#[test]
fn r2d_stage_rows() {
    let table = spec_table(&BackboneConfig::full_spec(Family::R2d, 8)).unwrap();
    let conv1 = &table[0];
    assert_eq!((conv1.kernel, conv1.stride, conv1.out_channels), ([8, 7, 7], [8, 2, 2], 64));
    let stages: Vec<_> = table
        .iter()
        .filter(|l| l.kind == LayerKind::Bottleneck2d)
        .map(|l| (l.width, l.out_channels, l.repeats))
        .collect();
    assert_eq!(stages, vec![(64, 256, 2), (128, 512, 2), (256, 1024, 2), (512, 2048, 2)]);
}

#[test]
fn tiny_preset_ends_at_128_channels() {
    for family in [Family::R2d, Family::R21d] {
        let cfg = BackboneConfig::tiny(family, 8, 2);
        assert_eq!(size_of(&output_sizes(&cfg).unwrap(), "res5"), [1, 1, 1, 128]);
        let mut store = ParamStore::<f64>::new();
        let bb = build_backbone(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        store.initialize_running_stats();
        let f = bb.features(&store, clip(1, 8, 32, 2)).unwrap();
        assert_eq!(f.shape(), &[1, 1, 1, 1, 128]);
        assert_eq!(bb.feature_shape().unwrap(), [1, 1, 1, 128]);
    }
}

#[test]
fn tiny_preset_tracks_clip_length() {
    for l in [8, 16, 32] {
        let e = output_sizes(&BackboneConfig::tiny(Family::R21d, l, 2)).unwrap();
        let c = output_sizes(&BackboneConfig::tiny(Family::R2d, l, 2)).unwrap();
        assert_eq!(size_of(&e, "res5"), [l / 8, 1, 1, 128]);
        assert_eq!(size_of(&c, "res5"), size_of(&e, "res5"));
    }
}

fn tiny(family: Family, seed: u64) -> (faster_core::backbone::Backbone, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let bb = build_backbone(BackboneConfig::tiny(family, 8, 3), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    store.initialize_running_stats();
    (bb, store)
}

#[test]
fn expensive_and_cheap_features_share_a_shape() {
    let (e, es) = tiny(Family::R21d, 3);
    let (c, cs) = tiny(Family::R2d, 4);
    let x = clip(2, 8, 32, 5);
    assert_eq!(e.features(&es, x.clone()).unwrap().shape(), c.features(&cs, x).unwrap().shape());
}

#[test]
fn features_are_deterministic() {
    for family in [Family::R2d, Family::R21d] {
        let (a, sa) = tiny(family, 6);
        let (b, sb) = tiny(family, 6);
        let x = clip(1, 8, 32, 7);
        assert_eq!(a.features(&sa, x.clone()).unwrap(), b.features(&sb, x).unwrap());
    }
}

#[test]
fn eval_features_ignore_batch_companions() {
    for family in [Family::R2d, Family::R21d] {
        let (bb, store) = tiny(family, 8);
        let a = clip(1, 8, 32, 9);
        let pair = Tensor::concat(&[a.clone(), clip(1, 8, 32, 10)]).unwrap();
        let alone = bb.features(&store, a).unwrap();
        let both = bb.features(&store, pair).unwrap();
        let first = both.select(0).unwrap();
        let diff = alone.data().iter().zip(first.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{family:?}: {diff}");
    }
}

#[test]
fn mismatched_clip_geometry_is_rejected() {
    let (bb, store) = tiny(Family::R21d, 11);
    assert!(bb.features(&store, clip(1, 16, 32, 12)).is_err());
    assert!(bb.features(&store, clip(1, 8, 24, 12)).is_err());
    let wrong_channels = Tensor::<f64>::zeros(&[1, 8, 32, 32, 4]);
    assert!(bb.features(&store, wrong_channels).is_err());
}

#[test]
fn zero_last_gamma_makes_a_block_its_shortcut() {
    for family in [Family::R2d, Family::R21d] {
        let mut cfg = BackboneConfig::tiny(family, 8, 2);
        cfg.repeats = [2, 2, 2, 2];
        let table = spec_table(&cfg).unwrap();
        let stage = table.iter().find(|l| l.name == "res3").unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = ResBlock::register(stage, 1, &mut store, &mut rng);
        assert!(block.shortcut.is_none());
        let gamma = block.last_bn().gamma;
        *store.value_mut(gamma) = Tensor::zeros(store.value(gamma).shape());
        store.initialize_running_stats();
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::from_fn(&[2, 4, 4, 4, stage.out_channels], |_| r.random_range(0.0..3.0));
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let y = block.forward(&mut g, &store, xv, mode).unwrap();
            assert_eq!(g.value(y), &x, "{family:?} {mode:?}");
        }
    }
}

#[test]
fn entry_blocks_project_their_shortcut() {
    let table = spec_table(&BackboneConfig::tiny(Family::R21d, 8, 2)).unwrap();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for stage in table.iter().filter(|l| l.kind == LayerKind::Bottleneck21d) {
        let block = ResBlock::register(stage, 0, &mut store, &mut rng);
        assert!(block.shortcut.is_some(), "{}", stage.name);
        assert_eq!(block.convs.len(), 4);
    }
}
