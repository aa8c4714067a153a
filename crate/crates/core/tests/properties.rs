use proptest::prelude::*;

use landsr_core::classify::{argmax_labels, cosine_scores};
use landsr_core::eval::{accumulate_confusion, miou, ConfusionMatrix};
use landsr_core::graph::{
    build_graph_from_nodes, propagate_direct, propagate_fixed_point, GraphConfig,
};
use landsr_core::pipeline::{mosaic, split_chips};
use landsr_core::prompts::{decode_prompts, encode_prompts, PromptSet, Provenance};
use landsr_core::tensorio::{
    decode_feature_map, decode_label_map, decode_ppm, encode_feature_map, encode_label_map,
    encode_ppm, FeatureMap, ImageRaster, LabelMap, NODATA,
};

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-1e6f32..1e6, c * h * w)
            .prop_map(move |d| FeatureMap::new(c, h, w, d).unwrap())
    })
}

fn label_map(classes: usize) -> impl Strategy<Value = LabelMap> {
    (1usize..8, 1usize..8).prop_flat_map(move |(h, w)| {
        prop::collection::vec(prop_oneof![9 => 0..classes as u8, 1 => Just(NODATA)], h * w)
            .prop_map(move |d| LabelMap::new(classes, h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn feature_container_is_bit_exact(map in feature_map()) {
        let bytes = encode_feature_map(&map).unwrap();
        let back = decode_feature_map(&bytes).unwrap();
        prop_assert_eq!(encode_feature_map(&back).unwrap(), bytes);
        prop_assert!(back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn label_container_round_trips(map in label_map(5)) {
        prop_assert_eq!(decode_label_map(&encode_label_map(&map)).unwrap(), map);
    }

    #[test]
    fn ppm_is_stable_after_one_quantisation(h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let data: Vec<f32> = (0..3 * h * w).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 11) % 1000) as f32 / 999.0).collect();
        let img = ImageRaster::new(h, w, data).unwrap();
        let once = encode_ppm(&img);
        prop_assert_eq!(encode_ppm(&decode_ppm(&once).unwrap()), once);
    }

    #[test]
    fn prompt_container_round_trips(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..5)) {
        let n = rows.len();
        let set = PromptSet::new(3, rows, (0..n as u64).collect(), vec![Provenance::ProbeAgreement; n]).unwrap();
        let bytes = encode_prompts(&set);
        prop_assert_eq!(encode_prompts(&decode_prompts(&bytes).unwrap()), bytes);
    }

    #[test]
    fn cosine_argmax_ignores_positive_scaling(map in feature_map(), s in 1e-3f32..1e3) {
        prop_assume!(map.channels() >= 2);
        let dim = map.channels();
        let prompts: Vec<Vec<f64>> = (0..3).map(|c| (0..dim).map(|d| ((c * 7 + d * 3) % 5) as f64 - 2.0).collect()).collect();
        prop_assume!(prompts.iter().all(|p| p.iter().any(|&x| x != 0.0)));
        let set = PromptSet::new(dim, prompts, vec![1; 3], vec![Provenance::ProbeAgreement; 3]).unwrap();
        let a = argmax_labels(&cosine_scores(&map, &set).unwrap());
        let b = argmax_labels(&cosine_scores(&map.scaled(s), &set).unwrap());
        // argmax can only move where scores tie up to rounding
        let scores = cosine_scores(&map, &set).unwrap();
        let n = map.pixels();
        for i in 0..n {
            if a.data()[i] != b.data()[i] {
                let (x, y) = (a.data()[i] as usize, b.data()[i] as usize);
                prop_assert!((scores.data()[x * n + i] - scores.data()[y * n + i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cosine_matches_euclidean_on_unit_vectors(v in prop::collection::vec(-1.0f32..1.0, 4), seed in 0u64..1000) {
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        prop_assume!(norm > 1e-3);
        let f = FeatureMap::new(4, 1, 1, v.clone()).unwrap();
        let prompts: Vec<Vec<f64>> = (0..3u64)
            .map(|c| (0..4u64).map(|d| (((seed + 13 * c + 5 * d) * 2654435761) % 200) as f64 / 100.0 - 1.0).collect())
            .collect();
        prop_assume!(prompts.iter().all(|p| p.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let set = PromptSet::new(4, prompts.clone(), vec![1; 3], vec![Provenance::ProbeAgreement; 3]).unwrap();
        let label = argmax_labels(&cosine_scores(&f, &set).unwrap()).data()[0] as usize;
        let unit_v: Vec<f64> = v.iter().map(|&x| x as f64 / norm as f64).collect();
        let dist: Vec<f64> = prompts
            .iter()
            .map(|p| {
                let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                p.iter().zip(&unit_v).map(|(a, b)| (a / n - b).powi(2)).sum()
            })
            .collect();
        let best = dist.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(dist[label] - best < 1e-6);
    }

    #[test]
    fn miou_is_invariant_to_joint_class_relabelling(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60),
        perm in Just([0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let n = pairs.len();
        let pred = LabelMap::new(4, 1, n, pairs.iter().map(|p| p.0).collect()).unwrap();
        let truth = LabelMap::new(4, 1, n, pairs.iter().map(|p| p.1).collect()).unwrap();
        let pp = LabelMap::new(4, 1, n, pairs.iter().map(|p| perm[p.0 as usize]).collect()).unwrap();
        let pt = LabelMap::new(4, 1, n, pairs.iter().map(|p| perm[p.1 as usize]).collect()).unwrap();
        let a = miou(&accumulate_confusion(&pred, &truth, ConfusionMatrix::new(4)).unwrap(), false).unwrap();
        let b = miou(&accumulate_confusion(&pp, &pt, ConfusionMatrix::new(4)).unwrap(), false).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
        for c in 0..4 {
            prop_assert_eq!(a.per_class[c], b.per_class[perm[c] as usize]);
        }
    }

    #[test]
    fn chips_mosaic_back_to_the_original(map in label_map(3), chip in 1usize..10) {
        let chips = split_chips(&map, chip).unwrap();
        prop_assert_eq!(mosaic(map.height(), map.width(), &chips).unwrap(), map);
    }

    #[test]
    fn solvers_agree(n in 3usize..40, classes in 2usize..5, alpha in 0.05f64..0.95, seed in any::<u64>()) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let dim = 3;
        let mut emb = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..dim).map(|_| next() + 0.01).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            emb.extend(row.iter().map(|x| x / norm));
        }
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [next(), next()]).collect();
        let cfg = GraphConfig { k: (n - 1).min(6), alpha, tol: 1e-10, ..Default::default() };
        let g = build_graph_from_nodes(&emb, dim, &coords, &cfg).unwrap();
        let y: Vec<f64> = (0..n * classes).map(|_| next()).collect();
        let direct = propagate_direct(&g, &y, classes, alpha, 1e-10, 10_000).unwrap();
        let fixed = propagate_fixed_point(&g, &y, classes, alpha, 1e-10, 100_000).unwrap();
        let gap = direct.iter().zip(&fixed.scores).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap < 1e-8, "gap {}", gap);
        // contraction holds in the Frobenius norm
        for w in fixed.diffs_fro.windows(2) {
            prop_assert!(w[1] <= alpha * w[0] * (1.0 + 1e-9) + 1e-15);
        }
    }
}
