use proptest::prelude::*;

use super::*;
use crate::injection::{IntegrationStrategy, Site};
use crate::numeric::gradcheck::random_tensor;
use crate::teacher::{count_teacher_params, TeacherVariant};

fn cfg(strategy: IntegrationStrategy) -> ModelConfig {
    ModelConfig::new("S", "toy-tiny", strategy).with_seed(11)
}

fn images(n: usize, side: usize, seed: u64) -> Tensor<f32> {
    random_tensor(&[n, 3, side, side], seed, 1.0).cast()
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Closed-form count of the toy-S detector without injectors.
fn toy_s_baseline_count(k: usize) -> usize {
    let (w, c3, c4, c5) = (16, 64, 128, 128);
    let backbone = conv(3, w, 4)
        + conv(w, 32, 4) + conv(32, 32, 3)
        + conv(32, 64, 4) + conv(64, 64, 3)
        + conv(64, 128, 4) + conv(128, 128, 3)
        + conv(128, 128, 4) + conv(128, 128, 3);
    let neck = conv(c5 + c4, c4, 3)
        + conv(c4 + c3, c3, 3)
        + conv(c3, c3, 4)
        + conv(c3 + c4, c4, 3)
        + conv(c4, c4, 4)
        + conv(c4 + c5, c5, 3);
    let heads: usize = [c3, c4, c5].iter().map(|&c| conv(c, c, 3) + conv(c, 5 + k, 1)).sum();
    backbone + neck + heads
}

#[test]
fn toy_level_shapes() {
    let (model, _) = build_model(&cfg(IntegrationStrategy::None)).unwrap();
    let p = model.predict(&images(2, 64, 1)).unwrap();
    assert_eq!(p.shapes(), vec![vec![2, 7, 8, 8], vec![2, 7, 4, 4], vec![2, 7, 2, 2]]);
}

#[test]
fn full_scale_geometry_levels() {
    let c = ModelConfig::new("S", "toy-tiny", IntegrationStrategy::None).with_input_size(640);
    let (model, _) = build_model(&c).unwrap();
    let p = model.predict(&images(1, 640, 2)).unwrap();
    let sides: Vec<usize> = p.shapes().iter().map(|s| s[2]).collect();
    assert_eq!(sides, vec![80, 40, 20]);
}

#[test]
fn shapes_identical_across_strategies() {
    let x = images(1, 64, 3);
    let shapes: Vec<_> = IntegrationStrategy::ALL
        .iter()
        .map(|&s| build_model(&cfg(s)).unwrap().0.predict(&x).unwrap().shapes())
        .collect();
    assert!(shapes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn wrong_input_size_is_rejected() {
    let (model, _) = build_model(&cfg(IntegrationStrategy::None)).unwrap();
    assert!(matches!(model.predict(&images(1, 32, 0)), Err(Error::Shape { .. })));
}

#[test]
fn baseline_has_no_frozen_parameters() {
    let (_, r) = build_model(&cfg(IntegrationStrategy::None)).unwrap();
    assert_eq!(r.frozen, 0);
    assert_eq!(r.trainable_fraction, 1.0);
    assert_eq!(r.total, toy_s_baseline_count(2));
}

#[test]
fn dual_p0p3_counts_match_closed_form() {
    let (_, r) = build_model(&cfg(IntegrationStrategy::DualP0P3)).unwrap();
    let t = TeacherVariant::preset("toy-tiny").unwrap().spec;
    // P0 grid 64/8, P3 grid 64/8
    let frozen = count_teacher_params(&t.with_pos_grid(8)) * 2;
    let adapters = conv(32, 3, 1) + 3 + conv(64, 32, 1) + conv(32, 64, 1) + 64;
    assert_eq!(r.frozen, frozen);
    assert_eq!(r.trainable, toy_s_baseline_count(2) + adapters);
    assert_eq!(r.total, r.trainable + r.frozen);
}

#[test]
fn plan_equals_materialized_report() {
    for s in IntegrationStrategy::ALL {
        let c = ModelConfig::new("M", "toy-small", s);
        assert_eq!(plan_model(&c).unwrap().1, build_model(&c).unwrap().1, "{s}");
    }
}

#[test]
fn full_scale_dual_p0p3_freezes_two_teachers() {
    let c = ModelConfig::new("L-full", "vitb16-full", IntegrationStrategy::DualP0P3).with_input_size(640);
    let (plan, r) = plan_model(&c).unwrap();
    let t = TeacherVariant::preset("vitb16-full").unwrap().spec;
    assert_eq!(r.frozen, count_teacher_params(&t.with_pos_grid(40)) + count_teacher_params(&t.with_pos_grid(80)));
    assert!((r.frozen as f64 / 172e6 - 1.0).abs() < 0.05, "{}", r.frozen);
    assert_eq!(r.total, r.trainable + r.frozen);
    let p3 = plan.entries().iter().find(|p| p.name == "p3_injector.proj_in.weight").unwrap();
    assert_eq!(p3.shape, vec![768, 512, 1, 1]);
}

#[test]
fn shared_teacher_counts_once() {
    let mut c = cfg(IntegrationStrategy::Triple);
    let independent = plan_model(&c).unwrap().1.frozen;
    c.share_teacher = true;
    let shared = plan_model(&c).unwrap().1.frozen;
    let t = TeacherVariant::preset("toy-tiny").unwrap().spec;
    let pos = |g: usize| g * g * t.dim;
    assert_eq!(shared, count_teacher_params(&t.with_pos_grid(8)) + pos(8) + pos(4));
    assert!(shared < independent);
    let (model, _) = build_model(&c).unwrap();
    assert_eq!(model.predict(&images(1, 64, 0)).unwrap().shapes()[0], vec![1, 7, 8, 8]);
}

#[test]
fn frozen_counts_are_monotone() {
    use IntegrationStrategy::*;
    let f: Vec<usize> = [None, SingleP3, DualP0P3, Triple].iter().map(|&s| plan_model(&cfg(s)).unwrap().1.frozen).collect();
    assert_eq!(f[0], 0);
    assert!(f.windows(2).all(|w| w[0] <= w[1]), "{f:?}");
}

#[test]
fn builds_are_deterministic() {
    let a = build_model(&cfg(IntegrationStrategy::Triple)).unwrap().0;
    let b = build_model(&cfg(IntegrationStrategy::Triple)).unwrap().0;
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.tensor.data(), pb.tensor.data());
    }
    let c = build_model(&cfg(IntegrationStrategy::Triple).with_seed(12)).unwrap().0;
    assert_ne!(a.store.by_name("backbone.stem.weight").unwrap().tensor.data(), c.store.by_name("backbone.stem.weight").unwrap().tensor.data());
}

#[test]
fn zero_gates_reproduce_baseline_end_to_end() {
    let x = images(2, 64, 4);
    let base = build_model(&cfg(IntegrationStrategy::None)).unwrap().0.predict(&x).unwrap();
    for s in IntegrationStrategy::ALL.into_iter().skip(1) {
        let (mut model, _) = build_model(&cfg(s)).unwrap();
        model.force_gates(0.7).unwrap();
        assert_ne!(model.predict(&x).unwrap(), base, "{s}: gates should matter");
        model.force_gates(0.0).unwrap();
        assert_eq!(model.predict(&x).unwrap(), base, "{s}");
    }
}

#[test]
fn injector_sites_follow_the_plan() {
    for s in IntegrationStrategy::ALL {
        let (model, _) = build_model(&cfg(s)).unwrap();
        let sites = crate::injection::plan_injections(s);
        assert_eq!(model.network.p0().is_some(), sites.contains(&Site::P0));
        assert_eq!(model.network.injector(Site::P3).is_some(), sites.contains(&Site::P3));
        assert_eq!(model.network.injector(Site::P4).is_some(), sites.contains(&Site::P4));
        assert_eq!(model.gates().len(), sites.len());
    }
}

#[test]
fn objectness_prior_is_set() {
    let (model, _) = build_model(&cfg(IntegrationStrategy::None)).unwrap();
    let b = model.store.by_name("head.p4.pred.bias").unwrap().tensor.data();
    assert_eq!(b[4], OBJECTNESS_PRIOR_BIAS);
    assert!(b.iter().enumerate().all(|(i, &v)| i == 4 || v == 0.0));
}

#[test]
fn gradients_skip_teachers_and_reach_gates() {
    let (model, _) = build_model(&cfg(IntegrationStrategy::Triple)).unwrap();
    let mut g = Graph::with_store(&model.store);
    let x = g.input(images(1, 64, 5));
    let out = model.network.forward(&mut g, x).unwrap();
    let mut total = None;
    for (i, lvl) in out.levels.iter().enumerate() {
        let n = g.value(*lvl).len();
        let w = random_tensor(&[n], 20 + i as u64, 1.0).cast::<f32>().into_data();
        let l = g.weighted_sum(*lvl, w).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l).unwrap(),
        });
    }
    let grads = g.backward(total.unwrap()).unwrap();
    for id in model.gates() {
        assert!(grads.param(id).unwrap().iter().any(|&v| v != 0.0));
    }
    for (id, p) in model.store.iter() {
        if p.frozen {
            assert!(grads.param(id).is_none(), "{}", p.name);
        }
    }
}

fn single_level_prediction(k: usize, fill: impl Fn(usize, usize) -> f32) -> PyramidPrediction {
    let levels = [8usize, 4, 2]
        .iter()
        .map(|&s| Tensor::from_fn([1, 5 + k, s, s], |i| fill(s, i)))
        .collect();
    PyramidPrediction { levels, input_size: 64, num_classes: k }
}

#[test]
fn very_negative_objectness_decodes_to_nothing() {
    let p = single_level_prediction(2, |_, _| -40.0);
    assert!(decode(&p, 0.01).unwrap()[0].is_empty());
}

#[test]
fn decode_cell_origin() {
    // only cell (0, 0) of the 8x8 level is confident
    let p = single_level_prediction(1, |s, i| {
        let plane = s * s;
        let (c, cell) = (i / plane, i % plane);
        match c {
            4 | 5 if s == 8 && cell == 0 => 20.0,
            4 | 5 => -20.0,
            2 | 3 => -3.0,
            _ => 0.0,
        }
    });
    let boxes = decode(&p, 0.5).unwrap();
    assert_eq!(boxes[0].len(), 1);
    let b = boxes[0][0];
    assert!((b.cx - 0.0625).abs() < 1e-7 && (b.cy - 0.0625).abs() < 1e-7);
    assert_eq!((b.class, b.confidence), (0, 1.0));
    let raw = decode_cell([0.0; 4], 0, 0, 8, 64);
    assert_eq!((raw.cx, raw.cy), (0.0625, 0.0625));
    // (2 * 0.5)^2 * 16/64 = 0.25 wide, so the clamped box is cut at the left edge
    assert_eq!(raw.w, 0.25);
    let clamped = DetectionBox::new(0, 0.0625, 0.0625, 0.25, 0.25, 1.0).clamped();
    assert_eq!(clamped.xyxy(), [0.0, 0.0, 0.1875, 0.1875]);
}

#[test]
fn bad_threshold_is_rejected() {
    let p = single_level_prediction(1, |_, _| 0.0);
    assert!(decode(&p, 1.5).is_err());
}

proptest! {
    #[test]
    fn decoded_boxes_stay_in_unit_square(seed in 0u64..500, scale in 0.1f64..20.0) {
        let p = single_level_prediction(3, |_, i| {
            let v = random_tensor(&[1], seed * 1000 + i as u64, scale).data()[0];
            v as f32
        });
        for b in decode(&p, 0.0).unwrap().into_iter().flatten() {
            let [x1, y1, x2, y2] = b.xyxy();
            for v in [x1, y1, x2, y2] {
                prop_assert!((-1e-6..=1.0 + 1e-6).contains(&v));
            }
            prop_assert!((0.0..=1.0).contains(&b.confidence));
        }
    }
}
