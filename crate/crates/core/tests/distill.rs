use proptest::prelude::*;
use protoseg::distill::{
    distance_maps, distance_stats, distraction_indicator, normalize_distances, soft_indicator, DistanceGrid, DistanceSet,
    DistanceStats, ThresholdNet, HIDDEN_UNITS, STAT_INPUTS,
};
use protoseg::episodes::{generate_episode, SyntheticSpec};
use protoseg::eval::{smooth_loss_and_grad, EvalConfig};
use protoseg::features::FeatureMap;
use protoseg::fusion::FusionConfig;
use protoseg::metric::Prototype;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-pass population moments written out term by term.
fn moments(v: &[f64]) -> [f64; 5] {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if var == 0.0 {
        return [min, max, 0.0, 0.0, 0.0];
    }
    let sd = var.sqrt();
    let skew = v.iter().map(|x| ((x - mean) / sd).powi(3)).sum::<f64>() / n;
    let kurt = v.iter().map(|x| ((x - mean) / sd).powi(4)).sum::<f64>() / n;
    [min, max, var, skew, kurt]
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-300) || (a - b).abs() < 1e-15
}

/// Forward pass from the flat parameter layout.
fn forward_oracle(params: &[f64], s: &[f64; STAT_INPUTS]) -> f64 {
    let hw = HIDDEN_UNITS * STAT_INPUTS;
    let mut out = params[hw + 2 * HIDDEN_UNITS];
    for k in 0..HIDDEN_UNITS {
        let mut pre = params[hw + k];
        for i in 0..STAT_INPUTS {
            pre += params[k * STAT_INPUTS + i] * s[i];
        }
        out += params[hw + HIDDEN_UNITS + k] * pre.tanh();
    }
    1.0 / (1.0 + (-out).exp())
}

fn random_net(rng: &mut ChaCha8Rng) -> ThresholdNet {
    let params: Vec<f64> = (0..ThresholdNet::NUM_PARAMS).map(|_| rng.random_range(-1.0..1.0)).collect();
    ThresholdNet::from_flat(&params).unwrap()
}

fn random_stats(rng: &mut ChaCha8Rng) -> DistanceStats {
    DistanceStats::from_array([
        rng.random_range(0.0..0.1),
        rng.random_range(0.9..1.0),
        rng.random_range(0.0..0.2),
        rng.random_range(-2.0..2.0),
        rng.random_range(1.0..6.0),
    ])
}

#[test]
fn worked_example_stats() {
    let s = DistanceStats::from_values([0.0, 0.5, 1.0]);
    assert_eq!(s.min, 0.0);
    assert_eq!(s.max, 1.0);
    assert!((s.variance - 1.0 / 6.0).abs() < 1e-15);
    assert!(s.skewness.abs() < 1e-15);
    assert!((s.kurtosis - 1.5).abs() < 1e-14);
}

#[test]
fn forward_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let net = random_net(&mut rng);
        let s = random_stats(&mut rng);
        let got = net.forward(&s);
        let want = forward_oracle(&net.to_flat(), &s.to_array());
        assert!(close(got, want, 1e-12), "{got} vs {want}");
        assert!(got > 0.0 && got < 1.0);
    }
}

/// Norm-wise relative error `max|a - n| / max(max|a|, max|n|)`. Per-component
/// ratios are meaningless for entries near zero, where central differences
/// carry about 1e-11 of rounding noise.
fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[test]
fn backward_matches_finite_differences() {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let net = random_net(&mut rng);
        let stats = random_stats(&mut rng);
        let upstream = rng.random_range(-2.0..2.0);
        let g = net.backward(&stats, upstream);
        let mut analytic = g.params_flat();
        analytic.extend_from_slice(&g.stats);
        let base = net.to_flat();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..base.len() {
            let (mut up, mut dn) = (base.clone(), base.clone());
            up[i] += h;
            dn[i] -= h;
            numeric.push(
                upstream
                    * (ThresholdNet::from_flat(&up).unwrap().forward(&stats)
                        - ThresholdNet::from_flat(&dn).unwrap().forward(&stats))
                    / (2.0 * h),
            );
        }
        for i in 0..STAT_INPUTS {
            let (mut up, mut dn) = (stats.to_array(), stats.to_array());
            up[i] += h;
            dn[i] -= h;
            numeric.push(
                upstream
                    * (net.forward(&DistanceStats::from_array(up)) - net.forward(&DistanceStats::from_array(dn)))
                    / (2.0 * h),
            );
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    assert!(worst < 1e-6, "max relative error {worst}");
}

#[test]
fn smooth_path_gradient_matches_finite_differences() {
    // With one fusion step the smooth path is differentiable end to end.
    let cfg = EvalConfig {
        fusion: FusionConfig {
            steps: 1,
            ..FusionConfig::default()
        },
        ..EvalConfig::default()
    };
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for seed in 0..3 {
        let ep = generate_episode(&SyntheticSpec::distractor().with_seed(seed)).unwrap();
        let net = ThresholdNet::init(seed).with_output_bias(rng.random_range(-1.0..0.0));
        let (_, grad) = smooth_loss_and_grad(&ep, &net, &cfg, 0.1).unwrap();
        let base = net.to_flat();
        let loss = |p: &[f64]| {
            smooth_loss_and_grad(&ep, &ThresholdNet::from_flat(p).unwrap(), &cfg, 0.1)
                .unwrap()
                .0
                .total
        };
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let (mut up, mut dn) = (base.clone(), base.clone());
                up[i] += h;
                dn[i] -= h;
                (loss(&up) - loss(&dn)) / (2.0 * h)
            })
            .collect();
        let err = relative_error(&grad, &numeric);
        assert!(err < 1e-6, "episode {seed}: relative error {err}");
    }
}

#[test]
fn distance_maps_match_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let maps: Vec<FeatureMap> = (0..3)
        .map(|_| FeatureMap::new(4, 5, 3, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let p = Prototype {
        class_id: 1,
        vector: vec![0.3, -0.2, 0.9],
    };
    let d = distance_maps(maps.iter(), &p).unwrap();
    for (grid, f) in d.grids().iter().zip(&maps) {
        for j in 0..f.num_pixels() {
            let x = f.pixel(j);
            let dot: f64 = x.iter().zip(&p.vector).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let np = p.vector.iter().map(|a| a * a).sum::<f64>().sqrt();
            let want = 1.0 - dot / (nx * np);
            assert!((grid.values()[j] - want).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&grid.values()[j]));
        }
    }
}

fn distance_set() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0f64..2.0, 1..40), 1..4)
}

fn to_set(v: &[Vec<f64>]) -> DistanceSet {
    DistanceSet::new(v.iter().map(|g| DistanceGrid::new(1, g.len(), g.clone()).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stats_match_two_pass_oracle(v in prop::collection::vec(0.0f64..1.0, 2..200)) {
        let got = DistanceStats::from_values(v.iter().copied()).to_array();
        let want = moments(&v);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!(close(*g, *w, 1e-10), "{got:?} vs {want:?}");
        }
        prop_assert!(got[0] <= got[1] && got[2] >= 0.0);
        if got[2] > 0.0 {
            prop_assert!(got[4] >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn stats_are_permutation_invariant(mut v in prop::collection::vec(0.0f64..1.0, 2..100), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let a = DistanceStats::from_values(v.iter().copied()).to_array();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = DistanceStats::from_values(v.iter().copied()).to_array();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(close(*x, *y, 1e-10));
        }
    }

    #[test]
    fn normalization_preserves_order(v in distance_set()) {
        let set = to_set(&v);
        match normalize_distances(&set) {
            Ok(nd) => {
                let raw: Vec<f64> = set.pooled().collect();
                let norm: Vec<f64> = nd.pooled().collect();
                let lo = norm.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = norm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
                for i in 0..raw.len() {
                    for j in 0..raw.len() {
                        prop_assert_eq!(raw[i] < raw[j], norm[i] < norm[j]);
                    }
                }
                let s = distance_stats(&nd);
                prop_assert_eq!((s.min, s.max), (0.0, 1.0));
            }
            Err(_) => {
                let first = v[0][0];
                prop_assert!(v.iter().flatten().all(|&x| x == first));
            }
        }
    }

    #[test]
    fn filtering_is_monotone(g in prop::collection::vec(0.0f64..=1.0, 1..64), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let grid = DistanceGrid::new(1, g.len(), g).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(distraction_indicator(&grid, lo).is_subset_of(&distraction_indicator(&grid, hi)));
    }

    #[test]
    fn cold_soft_indicator_agrees_with_hard(g in prop::collection::vec(0.0f64..=1.0, 1..64), gamma in 0.0f64..1.0) {
        let grid = DistanceGrid::new(1, g.len(), g.clone()).unwrap();
        let hard = distraction_indicator(&grid, gamma);
        let soft = soft_indicator(&grid, gamma, 1e-6).unwrap();
        for (j, d) in g.iter().enumerate() {
            if (d - gamma).abs() > 1e-4 {
                prop_assert_eq!(soft.get(j).round() == 1.0, hard.get(j));
            }
        }
    }
}
