use std::collections::BTreeMap;

use proptest::prelude::*;

use vos_core::calibration::{aggregate_others, confidence_gate, merge_masks, CascadeConfig};
use vos_core::correlation::{nearest_proxy_classify, similarity_map};
use vos_core::encoder::{Encoder, EncoderConfig};
use vos_core::layers::Conv2d;
use vos_core::metrics::{
    after_perturbation_accuracy, perturbation_robustness, region_j, split_scores, temporal_decay_curve, Category,
    CategoryManifest, ObjectScore, SequenceScore,
};
use vos_core::pipeline::{select_references, ReferenceMode, ReferenceSchedule};
use vos_core::proxy::{build_adaptive_proxy, ClusterSchedule, KMeansConfig, ReferenceView};
use vos_core::rng::SeededRng;
use vos_core::tensor::channel_concat;
use vos_core::weights::init_weights;
use vos_core::{FeatureMap, Image, LabelMask};

fn rand_map(r: &mut SeededRng, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
    FeatureMap::new(h, w, c, (0..h * w * c).map(|_| r.symmetric(2.0)).collect()).unwrap()
}

fn rand_mask(r: &mut SeededRng, h: usize, w: usize, n: u8) -> LabelMask {
    let labels = (0..h * w).map(|_| r.below(n as u64 + 1) as u8).collect();
    LabelMask::new(h, w, n, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_then_slice_recovers_inputs(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, cs in prop::collection::vec(1usize..5, 1..4)) {
        let mut r = SeededRng::new(seed);
        let maps: Vec<_> = cs.iter().map(|&c| rand_map(&mut r, h, w, c)).collect();
        let cat = channel_concat(&maps.iter().collect::<Vec<_>>()).unwrap();
        let mut start = 0;
        for m in &maps {
            prop_assert_eq!(&cat.channel_slice(start, m.channels()).unwrap(), m);
            start += m.channels();
        }
    }

    #[test]
    fn encoder_output_is_finite(seed in any::<u64>(), h in 4usize..24, w in 4usize..24) {
        let cfg = EncoderConfig { output_channels: 8, low_level_channels: 4, seed: 1, num_random_layers: 1 };
        let enc = Encoder::<f32>::new(&cfg, &init_weights(1, &cfg.param_table()).unwrap()).unwrap();
        let mut r = SeededRng::new(seed);
        let img = Image::new(h, w, (0..h * w * 3).map(|_| r.below(256) as u8).collect()).unwrap();
        let (f, low) = enc.encode(&img).unwrap();
        prop_assert!(f.is_finite() && low.is_finite());
    }

    #[test]
    fn similarity_is_in_unit_interval(seed in any::<u64>(), k in 0usize..5) {
        let mut r = SeededRng::new(seed);
        let f = rand_map(&mut r, 3, 4, 3);
        let cents: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| r.symmetric(5.0)).collect()).collect();
        let s = similarity_map(&f, &cents).unwrap();
        for &v in s.data() {
            if k == 0 {
                prop_assert_eq!(v, 0.0);
            } else {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
        }
    }

    #[test]
    fn full_schedule_classify_is_exhaustive_matching(seed in any::<u64>(), n in 1u8..4) {
        let mut r = SeededRng::new(seed);
        let (h, w, c) = (5, 6, 3);
        let f_r = rand_map(&mut r, h, w, c);
        let f_t = rand_map(&mut r, h, w, c);
        let y_r = rand_mask(&mut r, h, w, n);
        let schedule: ClusterSchedule = "full".parse().unwrap();
        let view = ReferenceView { index: 1, features: &f_r, mask: &y_r };
        let sets: Vec<_> = (0..=n)
            .map(|o| build_adaptive_proxy(&[view], o, &schedule, 0, &KMeansConfig::default()).unwrap())
            .collect();
        let got = nearest_proxy_classify(&f_t, &sets).unwrap();
        for t in 0..h * w {
            // nearest reference pixel, lowest label on ties
            let mut best = (f64::INFINITY, 0u8);
            for o in 0..=n {
                for s in y_r.support(o) {
                    let d2: f64 = f_t.cell(t).iter().zip(f_r.cell(s)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 < best.0 || (d2 == best.0 && o < best.1) {
                        best = (d2, o);
                    }
                }
            }
            prop_assert_eq!(got.labels()[t], best.1, "cell {}", t);
        }
    }

    #[test]
    fn aggregation_ignores_order_of_others(seed in any::<u64>(), n in 2usize..5) {
        let mut r = SeededRng::new(seed);
        let agg = Conv2d::<f64>::from_oihw(
            &(0..9).map(|_| r.symmetric(1.0) as f32).collect::<Vec<_>>(),
            &[0.1, -0.2, 0.3],
            3,
            3,
            1,
        )
        .unwrap();
        let maps: Vec<_> = (0..n).map(|_| rand_map(&mut r, 3, 3, 3)).collect();
        let mut rev = maps.clone();
        rev[1..].reverse();
        prop_assert_eq!(aggregate_others(&maps, 0, &agg).unwrap(), aggregate_others(&rev, 0, &agg).unwrap());
    }

    #[test]
    fn gate_is_idempotent_on_confidences(seed in any::<u64>(), beta in 0.0f64..0.99) {
        // confidences are post-ReLU; below a negative threshold the written
        // zeros would re-rank on a second pass
        let mut r = SeededRng::new(seed);
        let v = rand_map(&mut r, 4, 4, 2).relu();
        let once = confidence_gate(&v, beta).unwrap();
        prop_assert_eq!(confidence_gate(&once, beta).unwrap(), once);
    }

    #[test]
    fn stage_resolution_doubles_at_upsample_stages(n in 2usize..9) {
        let cfg = CascadeConfig::with_stages(n);
        for l in 1..=n {
            let ups = cfg.upsample_stages.iter().filter(|&&s| s <= l).count();
            prop_assert_eq!(cfg.scale_after(l), 1 << ups);
        }
    }

    #[test]
    fn merged_labels_stay_in_range(seed in any::<u64>(), n in 1usize..6) {
        let mut r = SeededRng::new(seed);
        let scores: Vec<_> = (0..=n).map(|_| rand_map(&mut r, 3, 4, 1)).collect();
        let m = merge_masks(&scores).unwrap();
        prop_assert!(m.labels().iter().all(|&l| (l as usize) <= n));
        prop_assert_eq!(m.num_objects() as usize, n);
    }

    #[test]
    fn region_j_properties(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let mut r = SeededRng::new(seed);
        let (a, b) = (rand_mask(&mut r, h, w, 2), rand_mask(&mut r, h, w, 2));
        for o in 1..=2 {
            let j = region_j(&a, &b, o).unwrap();
            prop_assert_eq!(j, region_j(&b, &a, o).unwrap());
            prop_assert!((0.0..=1.0).contains(&j));
            let same = a.support(o) == b.support(o);
            if a.count(o) > 0 || b.count(o) > 0 {
                prop_assert_eq!(j == 1.0, same);
            }
        }
    }

    #[test]
    fn robustness_summary_properties(q_c in 0.0f64..100.0, mut q in prop::collection::vec(0.0f64..100.0, 1..8), rot in 0usize..8) {
        let q_p = after_perturbation_accuracy(&q).unwrap();
        let len = q.len();
        q.rotate_left(rot % len);
        prop_assert!((after_perturbation_accuracy(&q).unwrap() - q_p).abs() < 1e-9);
        prop_assert_eq!(perturbation_robustness(q_c, q_p), -perturbation_robustness(q_p, q_c));
    }

    #[test]
    fn references_are_increasing_and_bounded(t in 2usize..60, delta in 1usize..9, mf in any::<bool>()) {
        let mode = if mf { ReferenceMode::MultiFrame } else { ReferenceMode::Base };
        let refs = select_references(&ReferenceSchedule { mode, delta }, t).unwrap();
        prop_assert!(refs.windows(2).all(|p| p[0] < p[1]));
        prop_assert_eq!(refs[0], 1);
        prop_assert_eq!(*refs.last().unwrap(), t - 1);
    }
}

fn random_scores(r: &mut SeededRng) -> Vec<SequenceScore> {
    (0..1 + r.below(4))
        .map(|s| {
            let frames = 2 + r.below(5) as usize;
            let objects = (1..=1 + r.below(3) as u8)
                .map(|object| {
                    let mut v = || {
                        (0..frames)
                            .map(|t| (t > 0 && r.below(4) > 0).then(|| r.uniform()))
                            .collect::<Vec<_>>()
                    };
                    let j = v();
                    let f = j.iter().map(|x| x.map(|_| 0.5)).collect();
                    ObjectScore { object, j, f }
                })
                .collect();
            SequenceScore {
                id: format!("s{s}"),
                frames,
                objects,
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn split_matches_group_by(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let scores = random_scores(&mut r);
        let mut manifest = CategoryManifest::default();
        let mut groups: BTreeMap<bool, Vec<f64>> = BTreeMap::new();
        for s in &scores {
            for o in &s.objects {
                let seen = r.coin();
                let cat = if seen { Category::Seen } else { Category::Unseen };
                manifest.0.insert((s.id.clone(), o.object), cat);
                let js: Vec<f64> = o.j.iter().flatten().copied().collect();
                if !js.is_empty() {
                    groups.entry(seen).or_default().push(js.iter().sum::<f64>() / js.len() as f64);
                }
            }
        }
        let sp = split_scores(&scores, &manifest).unwrap();
        let avg = |v: Option<&Vec<f64>>| v.map(|v| v.iter().sum::<f64>() / v.len() as f64);
        for (got, want) in [(sp.j_seen, avg(groups.get(&true))), (sp.j_unseen, avg(groups.get(&false)))] {
            match (got, want) {
                (Some(g), Some(w)) => prop_assert!((g - w).abs() < 1e-12),
                (g, w) => prop_assert_eq!(g, w),
            }
        }
        prop_assert_eq!(sp.f_seen.is_some(), groups.contains_key(&true));
    }

    #[test]
    fn decay_bins_match_position_oracle(lens in prop::collection::vec(1usize..30, 1..5), bins in 1usize..12) {
        let series: Vec<Vec<f64>> = lens.iter().map(|&n| (0..n).map(|i| (i * 7 % 5) as f64).collect()).collect();
        let curve = temporal_decay_curve(&series, bins).unwrap();
        let mut sum = vec![0.0; bins];
        let mut count = vec![0usize; bins];
        for s in &series {
            for (i, v) in s.iter().enumerate() {
                let pos = if s.len() == 1 { 0.0 } else { i as f64 / (s.len() - 1) as f64 };
                let b = ((pos * bins as f64).floor() as usize).min(bins - 1);
                sum[b] += v;
                count[b] += 1;
            }
        }
        for (b, bin) in curve.iter().enumerate() {
            prop_assert_eq!(bin.frames, count[b]);
            match bin.mean {
                Some(m) => prop_assert!((m - sum[b] / count[b] as f64).abs() < 1e-12),
                None => prop_assert_eq!(count[b], 0),
            }
        }
        prop_assert_eq!(curve.iter().map(|b| b.frames).sum::<usize>(), lens.iter().sum::<usize>());
    }
}
