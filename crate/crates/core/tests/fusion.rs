use protoseg::distill::ThresholdNet;
use protoseg::episodes::{generate_episode, SyntheticSpec};
use protoseg::features::masked_average_pool;
use protoseg::fusion::{fuse_once, iterative_fusion, AuxImage, FusionConfig, FusionInputs, Gate, PoolingMode, Threshold};
use protoseg::metric::{compute_prototypes, decode, distance, pseudo_label, PrototypeSet};

/// Plain masked-pool fusion: MP of each support mask and of each tagged pool
/// image's pseudo-mask, averaged per image.
fn mp_fusion(inputs: &FusionInputs<'_>, current: &PrototypeSet, scale: f64) -> Vec<(usize, Vec<f64>)> {
    let labels: Vec<_> = inputs
        .pool
        .iter()
        .map(|a| pseudo_label(&decode(&a.features, current, scale).unwrap()))
        .collect();
    inputs
        .classes
        .iter()
        .map(|&c| {
            let mut acc: Option<Vec<f64>> = None;
            let mut n = 0usize;
            let mut add = |v: Vec<f64>| {
                match acc.as_mut() {
                    None => acc = Some(v),
                    Some(a) => a.iter_mut().zip(&v).for_each(|(x, y)| *x += y),
                }
                n += 1;
            };
            for s in inputs.support {
                if let Some(Ok(v)) = s.mask(c).map(|m| masked_average_pool(&s.features, m)) {
                    add(v);
                }
            }
            for (a, l) in inputs.pool.iter().zip(&labels) {
                if a.tags.contains(&c) {
                    if let Ok(v) = masked_average_pool(&a.features, &l.mask(c)) {
                        add(v);
                    }
                }
            }
            let mut acc = acc.unwrap();
            acc.iter_mut().for_each(|x| *x /= n as f64);
            (c, acc)
        })
        .collect()
}

#[test]
fn keep_all_threshold_equals_smp() {
    for seed in 0..20 {
        let ep = generate_episode(&SyntheticSpec::distractor().with_seed(seed)).unwrap();
        let inputs = ep.inference().fusion_inputs(false);
        let smp = FusionConfig {
            mode: PoolingMode::Smp,
            ..FusionConfig::default()
        };
        let a = iterative_fusion(&inputs, Threshold::Fixed(1.5), Gate::Hard, &FusionConfig::default()).unwrap();
        let b = iterative_fusion(&inputs, Threshold::Net(&ThresholdNet::init(0)), Gate::Hard, &smp).unwrap();
        assert_eq!(a.prototypes, b.prototypes);
    }
}

#[test]
fn hard_confidences_reduce_smp_to_mp_fusion() {
    // a huge scale saturates the softmax to exact one-hot confidences
    let scale = 1e12;
    for seed in 0..20 {
        let ep = generate_episode(&SyntheticSpec::distractor().with_seed(seed)).unwrap();
        let inputs = ep.inference().fusion_inputs(false);
        let original = compute_prototypes(inputs.support, inputs.classes).unwrap();
        for l in inputs.pool.iter().map(|a| pseudo_label(&decode(&a.features, &original, scale).unwrap())) {
            assert!(l.confidence().iter().all(|&c| c == 1.0));
        }
        let cfg = FusionConfig {
            mode: PoolingMode::Smp,
            scale,
            ..FusionConfig::default()
        };
        let fused = fuse_once(&inputs, Threshold::Fixed(0.5), Gate::Hard, &cfg, &original).unwrap();
        for (c, want) in mp_fusion(&inputs, &original, scale) {
            assert_eq!(fused.prototypes.get(c).unwrap().vector, want);
        }
    }
}

#[test]
fn no_pool_or_no_steps_keeps_original_prototypes() {
    let net = ThresholdNet::init(2);
    for seed in 0..10 {
        let ep = generate_episode(&SyntheticSpec::distractor().with_seed(seed)).unwrap();
        let view = ep.inference();
        let original = compute_prototypes(view.support, view.classes).unwrap();
        let zero_steps = FusionConfig {
            steps: 0,
            ..FusionConfig::default()
        };
        let out = iterative_fusion(&view.fusion_inputs(true), Threshold::Net(&net), Gate::Hard, &zero_steps).unwrap();
        assert_eq!(out.prototypes, original);
        let empty = FusionInputs {
            classes: view.classes,
            support: view.support,
            pool: vec![],
        };
        let out = iterative_fusion(&empty, Threshold::Net(&net), Gate::Hard, &FusionConfig::default()).unwrap();
        assert_eq!(out.prototypes, original);
    }
}

#[test]
fn smp_fusion_is_a_convex_combination() {
    for seed in 0..20 {
        let ep = generate_episode(&SyntheticSpec::distractor().with_seed(seed)).unwrap();
        let inputs = ep.inference().fusion_inputs(false);
        let original = compute_prototypes(inputs.support, inputs.classes).unwrap();
        let cfg = FusionConfig {
            mode: PoolingMode::Smp,
            ..FusionConfig::default()
        };
        let fused = fuse_once(&inputs, Threshold::Fixed(0.5), Gate::Hard, &cfg, &original).unwrap();
        for &c in inputs.classes {
            // contributing vectors: support MPs and per-image SMPs
            let mut vectors: Vec<Vec<f64>> = inputs
                .support
                .iter()
                .filter_map(|s| masked_average_pool(&s.features, s.mask(c)?).ok())
                .collect();
            for a in inputs.pool.iter().filter(|a| a.tags.contains(&c)) {
                let p = decode(&a.features, &original, cfg.scale).unwrap();
                let z = pseudo_label(&p).mask(c);
                if let Ok(v) = protoseg::features::soft_masked_pool(&a.features, &p.class_confidence(c).unwrap(), &z) {
                    vectors.push(v);
                }
            }
            let proto = &fused.prototypes.get(c).unwrap().vector;
            for (k, v) in proto.iter().enumerate() {
                let lo = vectors.iter().map(|u| u[k]).fold(f64::INFINITY, f64::min);
                let hi = vectors.iter().map(|u| u[k]).fold(f64::NEG_INFINITY, f64::max);
                assert!(lo - 1e-12 <= *v && *v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn dropping_an_image_moves_the_prototype_by_a_bounded_step() {
    // Class 1 points along x. The pool image has one pixel that decodes as
    // class 1; removing the image changes the prototype by exactly
    // (f_j - p_without) / (K + U_eff).
    use protoseg::features::{BinaryMask, FeatureMap};
    use protoseg::metric::SupportImage;
    let support = vec![SupportImage {
        features: FeatureMap::new(1, 3, 2, vec![1.0, 0.1, 0.9, -0.1, 0.0, 1.0]).unwrap(),
        masks: vec![(1, BinaryMask::from_indicator(1, 3, &[1, 1, 0]).unwrap())],
    }];
    let full = AuxImage {
        features: FeatureMap::new(1, 3, 2, vec![0.8, 0.3, 0.1, 1.0, 0.0, 1.0]).unwrap(),
        tags: vec![1],
    };
    let other = AuxImage {
        features: FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.2, 1.0]).unwrap(),
        tags: vec![1],
    };
    let cfg = FusionConfig {
        mode: PoolingMode::Smp,
        steps: 1,
        ..FusionConfig::default()
    };
    let with = iterative_fusion(
        &FusionInputs {
            classes: &[1],
            support: &support,
            pool: vec![&other, &full],
        },
        Threshold::Fixed(0.5),
        Gate::Hard,
        &cfg,
    )
    .unwrap();
    let without = iterative_fusion(
        &FusionInputs {
            classes: &[1],
            support: &support,
            pool: vec![&other],
        },
        Threshold::Fixed(0.5),
        Gate::Hard,
        &cfg,
    )
    .unwrap();
    assert_eq!(with.classes[0].u_eff, 2);
    assert_eq!(without.classes[0].u_eff, 1);
    let p_with = &with.prototypes.get(1).unwrap().vector;
    let p_without = &without.prototypes.get(1).unwrap().vector;
    let n = (with.classes[0].shots + with.classes[0].u_eff) as f64;
    // the single class-1 pixel of `full`
    let f = [0.8, 0.3];
    for k in 0..2 {
        let bound = (f[k] - p_without[k]).abs() / n;
        assert!(((p_with[k] - p_without[k]).abs() - bound).abs() < 1e-12);
    }
}

#[test]
fn fusion_is_deterministic() {
    let ep = generate_episode(&SyntheticSpec::distractor().with_seed(9)).unwrap();
    let net = ThresholdNet::init(4);
    let inputs = ep.inference().fusion_inputs(true);
    let a = iterative_fusion(&inputs, Threshold::Net(&net), Gate::Hard, &FusionConfig::default()).unwrap();
    let b = iterative_fusion(&inputs, Threshold::Net(&net), Gate::Hard, &FusionConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fused_prototypes_approach_the_class_mean() {
    // clean profile: separation 0.3 rad is six noise standard deviations
    let net = ThresholdNet::init(0);
    let mut closer = 0;
    for seed in 0..100 {
        let ep = generate_episode(&SyntheticSpec::clean().with_seed(seed)).unwrap();
        let view = ep.inference();
        let original = compute_prototypes(view.support, view.classes).unwrap();
        let fused = iterative_fusion(&view.fusion_inputs(false), Threshold::Net(&net), Gate::Hard, &FusionConfig::default())
            .unwrap();
        let truth = ep.scoring().truth;
        let (mut d_orig, mut d_fused) = (0.0, 0.0);
        for &c in view.classes {
            let m = protoseg::metric::Prototype {
                class_id: c,
                vector: truth.class_mean(c).unwrap().to_vec(),
            };
            d_orig += distance(&original.get(c).unwrap().vector, &m).unwrap();
            d_fused += distance(&fused.prototypes.get(c).unwrap().vector, &m).unwrap();
        }
        if d_fused < d_orig {
            closer += 1;
        }
    }
    assert!(closer >= 90, "fused closer in {closer}/100 episodes");
}
