use locate_core::backbone::{mean_threshold, Backbone};
use locate_core::cam::{backward_cam, classification_loss, classification_loss_grad, gap_backward, normalize_map};
use locate_core::loss::{concentration_loss, cosine_margin_loss, masked_average_pool_weights, total_loss};
use locate_core::metrics::{kld, nss, sim, METRIC_EPS};
use locate_core::region::extract_interaction_embeddings;
use locate_core::select::{kmeans, part_iou, select_object_part, similarity_maps, KMeansOptions, PrototypeSet};
use locate_core::{
    BackboneConfig, CamHeadParams, FeatureMap, LocalizationMaps, LossWeights, Map2, Palette, PatchLabel, PlantedLayout,
    Region, SaliencyMask, SyntheticBackbone, Tensor3,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(seed: u64, d: usize, h: usize, w: usize) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(Tensor3::from_vec(d, h, w, data).unwrap(), (h, w)).unwrap()
}

fn maps(seed: u64, c: usize, h: usize, w: usize) -> LocalizationMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..3.0)).collect();
    LocalizationMaps::new(Tensor3::from_vec(c, h, w, data).unwrap()).unwrap()
}

fn positive_map() -> impl Strategy<Value = Map2> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..1.0, h * w)
            .prop_map(move |mut v| {
                v[0] += 0.5;
                Map2::from_vec(h, w, v).unwrap()
            })
    })
}

fn scene_image(seed: u64) -> (SyntheticBackbone, locate_core::Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = Palette::standard(1).unwrap();
    let backbone = SyntheticBackbone::new(seed, BackboneConfig { patch_size: 2, feature_dim: 8 }, palette.clone()).unwrap();
    let (r, c) = (rng.random_range(0..4), rng.random_range(0..3));
    let layout = PlantedLayout::new(
        6,
        6,
        Palette::BACKGROUND,
        vec![
            Region { label: PatchLabel::Human, material: Palette::HUMAN, rows: r..r + 2, cols: c..c + 1 },
            Region { label: PatchLabel::ObjectPart, material: Palette::FIRST_PART, rows: r..r + 2, cols: c + 1..c + 3 },
        ],
    )
    .unwrap();
    let image = layout.render(&palette, 2).unwrap();
    (backbone, image)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // ---- backbone

    #[test]
    fn backbone_is_frozen_and_grid_consistent(seed in 0u64..1000) {
        let (backbone, image) = scene_image(seed);
        let a = backbone.extract_features(&image).unwrap();
        let b = backbone.extract_features(&image).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(backbone.extract_saliency(&image).unwrap(), backbone.extract_saliency(&image).unwrap());
        prop_assert_eq!(a.patch_grid(), (6, 6));
        prop_assert_eq!(backbone.extract_saliency(&image).unwrap().shape(), a.patch_grid());
        let head = CamHeadParams::init(8, 2, seed);
        prop_assert_eq!(head.forward(&a).unwrap().maps.grid(), a.patch_grid());
    }

    #[test]
    fn saliency_binary_ignores_positive_scale(weights in positive_map(), scale in 1e-3f64..1e3) {
        let a = SaliencyMask::from_weights(weights.clone()).unwrap();
        let b = SaliencyMask::from_weights(weights.map(|v| v * scale)).unwrap();
        let pow2 = SaliencyMask::from_weights(weights.map(|v| v * 64.0)).unwrap();
        prop_assert_eq!(a.binary(), pow2.binary());
        // away from the mean, any positive factor preserves the split
        let mean = weights.mean();
        if weights.as_slice().iter().all(|v| (v - mean).abs() > 1e-9) {
            prop_assert_eq!(a.binary(), b.binary());
        }
    }

    // ---- cam head

    #[test]
    fn logits_are_spatial_means(seed in 0u64..1000, d in 1usize..8, c in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let mut params = CamHeadParams::init(d, c, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
        for b in params.tensors_mut().into_iter().skip(1).step_by(2) {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let out = params.forward(&features(seed, d, h, w)).unwrap();
        for k in 0..c {
            prop_assert!((out.scores.logits[k] - out.maps.channel(k).unwrap().mean()).abs() <= 1e-6);
        }
    }

    #[test]
    fn class_conv_gradient_matches_finite_differences(seed in 0u64..1000, label in 0usize..3) {
        let (d, c, h, w) = (4, 3, 3, 4);
        let params = CamHeadParams::init(d, c, seed);
        let f = features(seed, d, h, w);
        let fwd = params.forward(&f).unwrap();
        let (_, d_logits) = classification_loss_grad(&fwd.scores, label).unwrap();
        let mut grad = params.zeros_like();
        backward_cam(&f, &params, &fwd, &gap_backward(&d_logits, h, w), None, &mut grad);
        let analytic = grad.tensors()[6].to_vec();
        let step = 1e-3;
        let numeric: Vec<f64> = (0..analytic.len()).map(|i| {
            let loss_at = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[6][i] += delta;
                classification_loss(&p.forward(&f).unwrap().scores, label).unwrap()
            };
            (loss_at(step) - loss_at(-step)) / (2.0 * step)
        }).collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        prop_assert!(diff / scale <= 1e-4, "relative error {}", diff / scale);
    }

    #[test]
    fn normalize_is_idempotent(map in positive_map()) {
        let once = normalize_map(&map);
        let twice = normalize_map(&once);
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }

    // ---- region extraction

    #[test]
    fn raising_tau_never_grows_the_bag(seed in 0u64..1000, n in 1usize..4, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let feats: Vec<_> = (0..n).map(|i| features(seed + i as u64, 3, 4, 5)).collect();
        let ms: Vec<_> = (0..n).map(|i| maps(seed * 7 + i as u64, 2, 4, 5)).collect();
        let a = extract_interaction_embeddings(&feats, &ms, 1, lo).unwrap();
        let b = extract_interaction_embeddings(&feats, &ms, 1, hi).unwrap();
        prop_assert!(b.len() <= a.len());
        prop_assert_eq!(a.per_image_counts.iter().sum::<usize>(), a.len());
    }

    #[test]
    fn embeddings_are_copied_cells(seed in 0u64..1000, tau in 0.0f64..0.9) {
        let feats: Vec<_> = (0..3).map(|i| features(seed + i, 3, 4, 5)).collect();
        let ms: Vec<_> = (0..3).map(|i| maps(seed * 11 + i, 2, 4, 5)).collect();
        let bag = extract_interaction_embeddings(&feats, &ms, 0, tau).unwrap();
        for (e, &(img, r, c)) in bag.embeddings.iter().zip(&bag.source_coords) {
            prop_assert!(r < 4 && c < 5);
            prop_assert_eq!(e, &feats[img].embedding(r, c));
        }
    }

    #[test]
    fn image_order_only_permutes_counts(seed in 0u64..1000, tau in 0.0f64..0.9, shift in 0usize..3) {
        let feats: Vec<_> = (0..3).map(|i| features(seed + i, 3, 4, 5)).collect();
        let ms: Vec<_> = (0..3).map(|i| maps(seed * 13 + i, 2, 4, 5)).collect();
        let mut pf = feats.clone();
        let mut pm = ms.clone();
        pf.rotate_left(shift);
        pm.rotate_left(shift);
        let a = extract_interaction_embeddings(&feats, &ms, 1, tau).unwrap();
        let b = extract_interaction_embeddings(&pf, &pm, 1, tau).unwrap();
        let mut counts = a.per_image_counts.clone();
        counts.rotate_left(shift);
        prop_assert_eq!(counts, b.per_image_counts);
        let sorted = |mut v: Vec<Vec<f64>>| { v.sort_by(|x, y| x.partial_cmp(y).unwrap()); v };
        prop_assert_eq!(sorted(a.embeddings), sorted(b.embeddings));
    }

    // ---- part selection

    #[test]
    fn part_iou_in_unit_interval(s in prop::collection::vec(any::<bool>(), 1..40), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<bool> = s.iter().map(|_| rng.random_bool(0.5)).collect();
        let g = part_iou(&s, &a);
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn kmeans_invariants_and_determinism(seed in 0u64..1000, n in 3usize..30, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let k = k.min(n);
        let opts = KMeansOptions::new(k, seed);
        let p = kmeans(&points, &opts).unwrap();
        prop_assert_eq!(&p, &kmeans(&points, &opts).unwrap());
        prop_assert_eq!(p.member_counts.iter().sum::<usize>(), n);
        prop_assert!(p.member_counts.iter().all(|&c| c > 0));
        for (j, center) in p.centers.iter().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&p.assignments).filter(|(_, &a)| a == j).map(|(x, _)| x).collect();
            prop_assert_eq!(members.len(), p.member_counts[j]);
            for d in 0..3 {
                let mean = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                prop_assert!((center[d] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn selection_follows_prototypes_not_their_order(seed in 0u64..1000, mu in 0.0f64..0.9, shift in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ego = features(seed, 4, 5, 5);
        let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let protos = PrototypeSet { centers, member_counts: vec![1; 4], assignments: vec![], kmeans_iters_used: 0, cost: 0.0 };
        let mut rotated = protos.clone();
        rotated.centers.rotate_left(shift);
        let saliency = SaliencyMask::from_weights(Map2::from_vec(5, 5, (0..25).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()).unwrap();
        let a = select_object_part(&protos, &similarity_maps(&protos, &ego).unwrap(), &saliency, mu);
        let b = select_object_part(&rotated, &similarity_maps(&rotated, &ego).unwrap(), &saliency, mu);
        let mut scores = a.scores.clone();
        scores.rotate_left(shift);
        prop_assert_eq!(&scores, &b.scores);
        let best = a.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if a.scores.iter().filter(|&&g| g == best).count() == 1 {
            prop_assert_eq!(a.selected, b.selected);
        } else {
            // ties go to the lowest index, which depends on order
            prop_assert_eq!(a.selected.is_some(), b.selected.is_some());
        }
    }

    #[test]
    fn selection_ignores_feature_scale(seed in 0u64..1000, exp in -8i32..8, factor in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ego = features(seed, 4, 5, 5);
        let centers: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let protos = PrototypeSet { centers, member_counts: vec![1; 3], assignments: vec![], kmeans_iters_used: 0, cost: 0.0 };
        let saliency = SaliencyMask::from_weights(Map2::from_vec(5, 5, (0..25).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()).unwrap();
        let base = similarity_maps(&protos, &ego).unwrap();
        let pow2 = similarity_maps(&protos, &ego.scaled(2f64.powi(exp))).unwrap();
        prop_assert_eq!(&base, &pow2);
        let any = similarity_maps(&protos, &ego.scaled(factor)).unwrap();
        for (a, b) in base.data.as_slice().iter().zip(any.data.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(select_object_part(&protos, &base, &saliency, 0.3), select_object_part(&protos, &pow2, &saliency, 0.3));
    }

    // ---- losses

    #[test]
    fn cosine_clamp_region_is_flat(seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let l = cosine_margin_loss(&a, &b, alpha).unwrap().unwrap();
        if l.cosine >= 1.0 - alpha {
            prop_assert_eq!(l.value, 0.0);
            prop_assert!(l.grad_op.iter().chain(&l.grad_ego).all(|&g| g == 0.0));
        } else {
            prop_assert!(l.value > 0.0);
        }
    }

    #[test]
    fn spikes_further_apart_concentrate_less(w in 4usize..12, row in 0usize..3, gap in 1usize..10) {
        prop_assume!(gap + 1 < w);
        let loss_for = |g: usize| {
            let mut t = Tensor3::zeros(1, 3, w);
            t.set(0, row, 0, 1.0);
            t.set(0, row, g, 1.0);
            concentration_loss(&LocalizationMaps::new(t).unwrap())
        };
        prop_assert!(loss_for(gap + 1) > loss_for(gap));
    }

    #[test]
    fn masked_pool_is_linear_in_features(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (f, g) = (features(seed, 3, 4, 4), features(seed + 1, 3, 4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Map2::from_vec(4, 4, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let combo: Vec<f64> = f.tensor().as_slice().iter().zip(g.tensor().as_slice()).map(|(x, y)| a * x + b * y).collect();
        let combo = FeatureMap::new(Tensor3::from_vec(3, 4, 4, combo).unwrap(), (4, 4)).unwrap();
        let pf = masked_average_pool_weights(&f, &weights).unwrap().embedding;
        let pg = masked_average_pool_weights(&g, &weights).unwrap().embedding;
        let pc = masked_average_pool_weights(&combo, &weights).unwrap().embedding;
        for i in 0..3 {
            prop_assert!((pc[i] - (a * pf[i] + b * pg[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn total_combines_terms(exo in 0.0f64..5.0, ego in 0.0f64..5.0, cos in prop::option::of(0.0f64..2.0), lc in 0.0f64..5.0, warmup: bool) {
        let weights = LossWeights::default();
        let r = total_loss(exo, ego, cos, lc, &weights, warmup);
        let gate = if r.cos_skipped { 0.0 } else { 1.0 };
        prop_assert_eq!(r.cos_skipped, warmup || cos.is_none());
        prop_assert_eq!(r.total, exo + ego + gate * weights.lambda_cos * r.l_cos + weights.lambda_c * lc);
        prop_assert!(r.l_cls_exo >= 0.0 && r.l_cls_ego >= 0.0 && r.l_cos >= 0.0 && r.l_c >= 0.0);
    }

    // ---- metrics

    #[test]
    fn kld_is_non_negative_and_sim_symmetric(p in positive_map(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = p.shape();
        let mut g = Map2::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        g.set(0, 0, 1.0);
        prop_assert!(kld(&p, &g).unwrap() >= -METRIC_EPS * (h * w) as f64);
        prop_assert!(kld(&p, &p).unwrap() < 1e-6);
        prop_assert_eq!(sim(&p, &g).unwrap(), sim(&g, &p).unwrap());
    }

    #[test]
    fn metrics_ignore_prediction_scale(p in positive_map(), scale in 1e-2f64..1e2, shift in -5.0f64..5.0) {
        let (h, w) = p.shape();
        let mut g = Map2::zeros(h, w);
        g.set(h / 2, w / 2, 1.0);
        g.set(0, w - 1, 0.5);
        let fix = [(w / 2, h / 2), (w - 1, 0)];
        let scaled = p.map(|v| v * scale);
        prop_assert!((kld(&scaled, &g).unwrap() - kld(&p, &g).unwrap()).abs() <= 1e-9);
        prop_assert!((sim(&scaled, &g).unwrap() - sim(&p, &g).unwrap()).abs() <= 1e-9);
        prop_assert!((nss(&p.map(|v| scale * v + shift), &fix).unwrap() - nss(&p, &fix).unwrap()).abs() <= 1e-6);
    }
}

#[test]
fn mean_threshold_is_strict() {
    assert_eq!(mean_threshold(&[1.0, 1.0, 1.0]), vec![false; 3]);
    assert_eq!(mean_threshold(&[0.0, 2.0]), vec![false, true]);
}
