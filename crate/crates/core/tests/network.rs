use std::collections::HashSet;

use icvp::aggregation::{Aggregation, AggregationConfig};
use icvp::blocks::verify_pair_equivalence;
use icvp::cost_volume::{GwcConfig, ImageStem};
use icvp::extractor::{Extractor, ExtractorConfig};
use icvp::model::{Model, ModelConfig};
use icvp::nn::{Builder, Mode, Session};
use icvp::params::{ParamKind, ParamStore};
use icvp::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r).unwrap()
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Builder<'_>) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let out = f(&mut Builder::new(&mut store, &mut r));
    (out, store)
}

/// Random projection of `y` to a scalar, for gradient audits.
fn probe(s: &mut Session<'_>, y: Var, seed: u64) -> Var {
    let w = rand_t(s.graph.shape(y), &mut rng(seed));
    let w = s.input(w);
    let p = s.graph.mul(y, w).unwrap();
    s.graph.sum(p).unwrap()
}

fn assert_all_learnable_receive_gradient(store: &ParamStore, grads: &icvp::nn::ParamGrads) {
    let with_grad: HashSet<_> = grads.grads.iter().filter(|(_, g)| g.iter().any(|&x| x != 0.0)).map(|(id, _)| *id).collect();
    for id in store.ids() {
        if store.kind(id) == ParamKind::Learnable {
            assert!(with_grad.contains(&id), "`{}` has no gradient", store.name(id));
        }
    }
}

// ── feature extractor ───────────────────────────────────────────────

#[test]
fn extractor_output_is_one_third_resolution() {
    let cfg = ModelConfig::desk().extractor;
    let (ex, store) = build(1, |b| Extractor::new(b, cfg.clone()).unwrap());
    let mut s = Session::new(&store, Mode::Eval);
    let x = s.input(Tensor::uniform(&[1, 3, 48, 48], 0.0, 1.0, &mut rng(2)).unwrap());
    let y = ex.forward(&mut s, x, "x").unwrap();
    assert_eq!(s.graph.shape(y), &[1, cfg.decoder, 16, 16]);
}

#[test]
fn identical_views_give_identical_features() {
    let (model, store) = Model::build(ModelConfig::desk(), 3).unwrap();
    let image = Tensor::uniform(&[1, 3, 48, 48], 0.0, 1.0, &mut rng(4)).unwrap();
    let mut s = Session::new(&store, Mode::Eval);
    let l = s.input(image.clone());
    let r = s.input(image);
    let out = model.forward(&mut s, l, r).unwrap();
    let (fl, fr) = out.features;
    assert_eq!(s.graph.value(fl).data(), s.graph.value(fr).data());
}

#[test]
fn tiny_extractor_extents_at_every_layer() {
    let cfg = ExtractorConfig { stem: [8, 8, 8], encoder: vec![8, 16, 32], decoder: 32 };
    let (ex, store) = build(5, |b| Extractor::new(b, cfg).unwrap());
    let mut s = Session::new(&store, Mode::Eval).with_trace();
    let x = s.input(Tensor::uniform(&[1, 3, 48, 48], 0.0, 1.0, &mut rng(6)).unwrap());
    ex.forward(&mut s, x, "x").unwrap();
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("x.stem.0", vec![1, 8, 48, 48]),
        ("x.stem.1", vec![1, 8, 16, 16]),
        ("x.stem.2", vec![1, 8, 16, 16]),
        ("x.enc1", vec![1, 8, 8, 8]),
        ("x.enc2", vec![1, 16, 4, 4]),
        ("x.enc3", vec![1, 32, 2, 2]),
        ("x.dec2", vec![1, 32, 4, 4]),
        ("x.dec1", vec![1, 32, 8, 8]),
        ("x.dec0", vec![1, 32, 16, 16]),
    ];
    let trace: Vec<(&str, Vec<usize>)> = s.trace().iter().map(|(l, sh)| (l.as_str(), sh.clone())).collect();
    assert_eq!(trace, expected);
}

#[test]
fn every_extractor_parameter_gets_gradient() {
    let cfg = ExtractorConfig { stem: [4, 8, 8], encoder: vec![8, 12], decoder: 16 };
    let (ex, store) = build(7, |b| Extractor::new(b, cfg).unwrap());
    let mut s = Session::new(&store, Mode::Train);
    let x = s.input(Tensor::uniform(&[2, 3, 30, 33], 0.0, 1.0, &mut rng(8)).unwrap());
    let y = ex.forward(&mut s, x, "x").unwrap();
    let loss = probe(&mut s, y, 9);
    let grads = s.backward(loss).unwrap();
    assert_all_learnable_receive_gradient(&store, &grads);
}

#[test]
fn odd_sides_floor_to_one_third() {
    let cfg = ExtractorConfig { stem: [4, 8, 8], encoder: vec![8, 12], decoder: 16 };
    let (ex, store) = build(10, |b| Extractor::new(b, cfg).unwrap());
    for (h, w) in [(27, 27), (29, 40), (50, 31), (96, 95)] {
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.input(Tensor::zeros(&[1, 3, h, w]).unwrap());
        let y = ex.forward(&mut s, x, "x").unwrap();
        assert_eq!(s.graph.shape(y), &[1, 16, h / 3, w / 3]);
    }
}

// ── cost volume ─────────────────────────────────────────────────────

fn correlate(l: &Tensor, r: &Tensor, groups: usize, bins: usize) -> Tensor {
    let mut g = Graph::new();
    let (lv, rv) = (g.constant(l.clone()), g.constant(r.clone()));
    let v = g.group_correlation(lv, rv, groups, bins).unwrap();
    g.value(v).clone()
}

/// Brute-force group correlation.
fn naive_correlation(l: &Tensor, r: &Tensor, groups: usize, bins: usize) -> Vec<f64> {
    let [n, c, h, w] = [l.shape()[0], l.shape()[1], l.shape()[2], l.shape()[3]];
    let per = c / groups;
    let mut out = Vec::new();
    for ni in 0..n {
        for gi in 0..groups {
            for d in 0..bins {
                for i in 0..h {
                    for j in 0..w {
                        if j < d {
                            out.push(0.0);
                            continue;
                        }
                        let s: f64 = (0..per)
                            .map(|k| {
                                let ch = gi * per + k;
                                l.at(&[ni, ch, i, j]) as f64 * r.at(&[ni, ch, i, j - d]) as f64
                            })
                            .sum();
                        out.push(s / per as f64);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn correlation_hand_examples() {
    let ones = Tensor::full(&[1, 4, 1, 1], 1.0).unwrap();
    assert_eq!(correlate(&ones, &ones, 2, 1).data(), &[1.0, 1.0]);
    let a = Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
    let b = Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
    assert_eq!(correlate(&a, &b, 1, 1).data(), &[0.0]);
}

#[test]
fn correlation_matches_brute_force_and_zero_fills() {
    let mut r = rng(11);
    let l = rand_t(&[2, 6, 3, 7], &mut r);
    let rt = rand_t(&[2, 6, 3, 7], &mut r);
    let got = correlate(&l, &rt, 3, 4);
    assert_eq!(got.shape(), &[2, 3, 4, 3, 7]);
    let want = naive_correlation(&l, &rt, 3, 4);
    for (&a, &b) in got.data().iter().zip(&want) {
        assert!((a as f64 - b).abs() <= 1e-6);
    }
    for d in 0..4 {
        for j in 0..d {
            assert_eq!(got.at(&[1, 2, d, 1, j]), 0.0);
        }
    }
}

/// Features whose vectors have unit length within every group.
fn unit_features(shape: [usize; 4], groups: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_t(&shape, r);
    let [n, c, h, w] = shape;
    let per = c / groups;
    for ni in 0..n {
        for gi in 0..groups {
            for i in 0..h {
                for j in 0..w {
                    let idx: Vec<[usize; 4]> = (0..per).map(|k| [ni, gi * per + k, i, j]).collect();
                    let norm = idx.iter().map(|ix| t.at(ix).powi(2)).sum::<f32>().sqrt();
                    for ix in idx {
                        let v = t.at(&ix) / norm;
                        t.set(&ix, v);
                    }
                }
            }
        }
    }
    t
}

#[test]
fn shifted_features_peak_at_the_shift() {
    let mut r = rng(12);
    let (groups, bins, w) = (2, 6, 20);
    for shift in 0..bins {
        let l = unit_features([1, 8, 3, w], groups, &mut r);
        // Right view: the left view moved `shift` pixels towards lower columns.
        let mut rt = Tensor::zeros(&[1, 8, 3, w]).unwrap();
        for c in 0..8 {
            for i in 0..3 {
                for j in 0..w {
                    if j + shift < w {
                        rt.set(&[0, c, i, j], l.at(&[0, c, i, j + shift]));
                    }
                }
            }
        }
        let v = correlate(&l, &rt, groups, bins);
        let want = naive_correlation(&l, &rt, groups, bins);
        for (&a, &b) in v.data().iter().zip(&want) {
            assert!((a as f64 - b).abs() <= 1e-6);
        }
        for g in 0..groups {
            for i in 0..3 {
                for j in bins..w - bins {
                    let best = (0..bins).max_by(|&a, &b| v.at(&[0, g, a, i, j]).total_cmp(&v.at(&[0, g, b, i, j]))).unwrap();
                    assert_eq!(best, shift, "pixel ({i},{j}) group {g}");
                }
            }
        }
    }
}

fn flip_columns(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    for a in 0..n {
        for b in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out.set(&[a, b, i, j], t.at(&[a, b, i, w - 1 - j]));
                }
            }
        }
    }
    out
}

#[test]
fn swapping_views_mirrors_the_search_direction() {
    let mut r = rng(13);
    let (l, rt) = (rand_t(&[1, 4, 2, 9], &mut r), rand_t(&[1, 4, 2, 9], &mut r));
    let forward = correlate(&l, &rt, 2, 4);
    let mirrored = correlate(&flip_columns(&rt), &flip_columns(&l), 2, 4);
    for g in 0..2 {
        for d in 0..4 {
            for i in 0..2 {
                for j in d..9 {
                    let a = mirrored.at(&[0, g, d, i, j]);
                    let b = forward.at(&[0, g, d, i, 8 - j + d]);
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn image_stem_shape_and_independent_weights() {
    let (model, store) = Model::build(ModelConfig::desk(), 14).unwrap();
    let stem = model.image_stem.as_ref().unwrap();
    assert_eq!(stem.out_channels(), model.config.groups);
    let mut s = Session::new(&store, Mode::Eval);
    let x = s.input(Tensor::uniform(&[1, 3, 48, 48], 0.0, 1.0, &mut rng(15)).unwrap());
    let f0 = stem.forward(&mut s, x).unwrap();
    assert_eq!(s.graph.shape(f0), &[1, model.config.groups, 16, 16]);

    let stem_ids: HashSet<_> = stem.stem.layers.iter().flat_map(|l| [l.conv.weight, l.psi.bn.gamma, l.psi.bn.beta]).collect();
    for id in store.ids() {
        if store.name(id).starts_with("extractor.") {
            assert!(!stem_ids.contains(&id));
        }
    }
    assert!(stem_ids.iter().all(|&id| store.name(id).starts_with("image_stem.")));
}

#[test]
fn image_stem_passes_gradients() {
    let (stem, store) = build(16, |b| ImageStem::new(b, 4).unwrap());
    let mut s = Session::new(&store, Mode::Train);
    let x = s.input(Tensor::uniform(&[2, 3, 12, 15], 0.0, 1.0, &mut rng(17)).unwrap());
    let y = stem.forward(&mut s, x).unwrap();
    assert_eq!(s.graph.shape(y), &[2, 4, 4, 5]);
    let loss = probe(&mut s, y, 18);
    assert_all_learnable_receive_gradient(&store, &s.backward(loss).unwrap());
}

#[test]
fn gwc_config_rejects_uneven_groups() {
    assert!(GwcConfig { channels: 10, groups: 4, max_disparity: 12 }.validate().is_err());
    assert_eq!(GwcConfig { channels: 8, groups: 4, max_disparity: 16 }.bins(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn correlation_scales_quadratically(alpha in -3.0f32..3.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = rand_t(&[1, 6, 2, 5], &mut r);
        let rt = rand_t(&[1, 6, 2, 5], &mut r);
        let scale = |t: &Tensor| Tensor::new(t.shape(), t.data().iter().map(|v| v * alpha).collect()).unwrap();
        let base = correlate(&l, &rt, 3, 3);
        let scaled = correlate(&scale(&l), &scale(&rt), 3, 3);
        for (&a, &b) in scaled.data().iter().zip(base.data()) {
            prop_assert!((a - alpha * alpha * b).abs() <= 1e-5 * (1.0 + (alpha * alpha * b).abs()));
        }
    }

    #[test]
    fn correlation_ignores_channel_order_within_groups(perm in Just(vec![0usize, 1, 2]).prop_shuffle(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = rand_t(&[1, 6, 2, 5], &mut r);
        let rt = rand_t(&[1, 6, 2, 5], &mut r);
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for g in 0..2 {
                for (k, &p) in perm.iter().enumerate() {
                    for i in 0..2 {
                        for j in 0..5 {
                            out.set(&[0, g * 3 + k, i, j], t.at(&[0, g * 3 + p, i, j]));
                        }
                    }
                }
            }
            out
        };
        let base = correlate(&l, &rt, 2, 3);
        let shuffled = correlate(&permute(&l), &permute(&rt), 2, 3);
        for (&a, &b) in shuffled.data().iter().zip(base.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}

// ── aggregation ─────────────────────────────────────────────────────

fn tiny_aggregation(image_branch: bool, light_final: bool) -> AggregationConfig {
    AggregationConfig { image_branch, light_final, ..AggregationConfig::standard(2, 4, 4) }
}

#[test]
fn propagation_keeps_the_volume_extent() {
    for image in [true, false] {
        let (agg, store) = build(20, |b| Aggregation::new(b, tiny_aggregation(image, true)).unwrap());
        let mut r = rng(21);
        let mut s = Session::new(&store, Mode::Train);
        let v0 = s.input(rand_t(&[2, 4, 4, 16, 16], &mut r));
        let f0 = image.then(|| s.input(rand_t(&[2, 4, 16, 16], &mut r)));
        let out = agg.forward(&mut s, v0, f0).unwrap();
        assert_eq!(s.graph.shape(out.volume), &[2, 4, 16, 16]);
    }
}

#[test]
fn image_pipeline_ignores_the_volume() {
    let (agg, store) = build(22, |b| Aggregation::new(b, tiny_aggregation(true, false)).unwrap());
    let mut r = rng(23);
    let f = rand_t(&[1, 4, 12, 12], &mut r);
    let run = |v: Tensor| {
        let mut s = Session::new(&store, Mode::Eval);
        let v0 = s.input(v);
        let f0 = s.input(f.clone());
        let out = agg.forward(&mut s, v0, Some(f0)).unwrap();
        let maps: Vec<Vec<f32>> = out.image_encoder.iter().chain(&out.image_decoder).map(|&x| s.graph.value(x).data().to_vec()).collect();
        (maps, s.graph.value(out.volume).data().to_vec())
    };
    let (maps_a, vol_a) = run(rand_t(&[1, 4, 4, 12, 12], &mut r));
    let (maps_b, vol_b) = run(rand_t(&[1, 4, 4, 12, 12], &mut r));
    assert_eq!(maps_a, maps_b);
    assert_ne!(vol_a, vol_b);
}

#[test]
fn silenced_image_branches_leave_a_plain_volume_unet() {
    for light in [true, false] {
        let (coupled, mut store_c) = build(24, |b| Aggregation::new(b, tiny_aggregation(true, light)).unwrap());
        let (plain, mut store_p) = build(25, |b| Aggregation::new(b, tiny_aggregation(false, light)).unwrap());
        // Give both the same volume-side weights and random running statistics.
        let mut r = rng(26);
        let ids: Vec<_> = store_p.ids().collect();
        for id in ids {
            let name = store_p.name(id).to_string();
            let mut t = rand_t(store_p.get(id).shape(), &mut r);
            if name.ends_with("running_var") {
                t.data_mut().iter_mut().for_each(|v| *v = 1.0 + v.abs());
            }
            let cid = store_c.find(&name).unwrap_or_else(|| panic!("{name} missing from coupled model"));
            *store_c.get_mut(cid) = t.clone();
            *store_p.get_mut(id) = t;
        }
        let ids: Vec<_> = store_c.ids().collect();
        for id in ids {
            if store_p.find(store_c.name(id)).is_none() {
                let name = store_c.name(id);
                let image_side = name.contains(".image.");
                assert!(image_side || name.starts_with("enc2d") || name.starts_with("dec2d"), "{name}");
                if image_side && store_c.kind(id) == ParamKind::Learnable {
                    store_c.get_mut(id).data_mut().fill(0.0);
                }
            }
        }
        let v = rand_t(&[1, 4, 4, 12, 12], &mut r);
        let f = rand_t(&[1, 4, 12, 12], &mut r);
        let mut sc = Session::new(&store_c, Mode::Eval);
        let (v0, f0) = (sc.input(v.clone()), sc.input(f));
        let a = coupled.forward(&mut sc, v0, Some(f0)).unwrap().volume;
        let mut sp = Session::new(&store_p, Mode::Eval);
        let v0 = sp.input(v);
        let b = plain.forward(&mut sp, v0, None).unwrap().volume;
        assert_eq!(sc.graph.value(a).data(), sp.graph.value(b).data(), "light final {light}");
    }
}

#[test]
fn every_aggregation_parameter_gets_gradient() {
    for light in [true, false] {
        let (agg, store) = build(27, |b| Aggregation::new(b, tiny_aggregation(true, light)).unwrap());
        let mut r = rng(28);
        let mut s = Session::new(&store, Mode::Train);
        let v0 = s.input(rand_t(&[2, 4, 6, 10, 9], &mut r));
        let f0 = s.input(rand_t(&[2, 4, 10, 9], &mut r));
        let out = agg.forward(&mut s, v0, Some(f0)).unwrap();
        let loss = probe(&mut s, out.volume, 29);
        assert_all_learnable_receive_gradient(&store, &s.backward(loss).unwrap());
    }
}

#[test]
fn final_site_broadcast_matches_its_concat_convolution() {
    let (agg, store) = build(30, |b| Aggregation::new(b, tiny_aggregation(true, true)).unwrap());
    let pairs = agg.conv_pairs();
    let (_, last) = pairs.iter().find(|(site, _)| site == "dec3d0").expect("final site pair");
    let mut r = rng(31);
    let v = rand_t(&[1, last.volume.in_ch, 4, 8, 8], &mut r);
    let f = rand_t(&[1, last.image.in_ch, 8, 8], &mut r);
    assert!(verify_pair_equivalence(&store, *last, &v, &f).unwrap() <= 1e-4);
    for (site, p) in &pairs {
        let v = rand_t(&[1, p.volume.in_ch, 4, 8, 8], &mut r);
        let f = rand_t(&[1, p.image.in_ch, 8, 8], &mut r);
        assert!(verify_pair_equivalence(&store, *p, &v, &f).unwrap() <= 1e-4, "{site}");
    }
}

#[test]
fn aggregation_rejects_mismatched_inputs() {
    let (agg, store) = build(32, |b| Aggregation::new(b, tiny_aggregation(true, true)).unwrap());
    let mut s = Session::new(&store, Mode::Eval);
    let v0 = s.input(Tensor::zeros(&[1, 4, 4, 8, 8]).unwrap());
    assert!(agg.forward(&mut s, v0, None).is_err());
    let f_bad = s.input(Tensor::zeros(&[1, 4, 6, 8]).unwrap());
    assert!(agg.forward(&mut s, v0, Some(f_bad)).is_err());
}

// ── full model ──────────────────────────────────────────────────────

#[test]
fn predictions_lie_in_the_disparity_range() {
    let cfg = ModelConfig { max_disparity: 12, ..ModelConfig::desk() };
    let (model, store) = Model::build(cfg, 33).unwrap();
    let mut r = rng(34);
    let l = Tensor::uniform(&[2, 3, 30, 36], 0.0, 1.0, &mut r).unwrap();
    let rt = Tensor::uniform(&[2, 3, 30, 36], 0.0, 1.0, &mut r).unwrap();
    let maps = model.predict(&store, &l, &rt).unwrap();
    assert_eq!(maps.len(), 2);
    for m in maps {
        assert_eq!((m.width, m.height), (36, 30));
        assert!(m.values.iter().all(|&d| (0.0..=11.0).contains(&d)));
    }
}

#[test]
fn undersized_images_are_rejected() {
    let (model, store) = Model::build(ModelConfig::desk(), 35).unwrap();
    let min = model.config.min_side();
    let small = Tensor::zeros(&[1, 3, min - 1, 40]).unwrap();
    assert!(model.predict(&store, &small, &small).is_err());
}

#[test]
fn initialization_is_seed_deterministic() {
    let (_, a) = Model::build(ModelConfig::desk(), 36).unwrap();
    let (_, b) = Model::build(ModelConfig::desk(), 36).unwrap();
    let (_, c) = Model::build(ModelConfig::desk(), 37).unwrap();
    let flat = |s: &ParamStore| s.iter().flat_map(|p| p.tensor.data().to_vec()).collect::<Vec<f32>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}
