mod common;

use common::{lcg_values, ref_similarity, tensor, Act};
use proptest::prelude::*;
use protofaith::fixtures::{gen_planted, gen_random, occlusion_oracle, PlantedRegion, RandomSpec};
use protofaith::metrics::{
    audc, deletion_curve_for, erf_estimate, perturb, relevance, rescore, similarity_ratio,
    DeletionGrid, FillPolicy,
};
use protofaith::proto::{best_matches, extract_features, similarity_values, Target};
use protofaith::saliency::{
    compute_saliency, pixel_count, saliency_ranking, Method, PixelMask, SaliencyConfig,
    SaliencyKind, SaliencyMap,
};
use protofaith::Tensor;

fn map_of(values: Tensor, target: Target) -> SaliencyMap {
    SaliencyMap {
        values,
        kind: SaliencyKind::Random,
        target,
        image_id: "img".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unmasked_ratio_is_exactly_one(seed in 0u64..10_000, method_idx in 0usize..4) {
        let fx = gen_random(seed, &RandomSpec { max_side: 16, ..RandomSpec::default() }).unwrap();
        let x = &fx.images[0].1;
        let features = extract_features(&fx.model, x).unwrap();
        let target = best_matches(&fx.model, &features).unwrap()[0];
        prop_assume!(target.score > 0.0);
        let method = [Method::Upsample, Method::Smoothgrads, Method::Prp, Method::Random][method_idx];
        let s = compute_saliency(&fx.model, x, target, method, &SaliencyConfig::default(), &[0.0; 3], "img").unwrap();
        let curve = deletion_curve_for(&fx.model, x, &s, &DeletionGrid::default(), FillPolicy::Zero, &[0.0; 3], 0).unwrap();
        prop_assert_eq!(curve.ratios[0], 1.0);
        prop_assert_eq!(curve.areas.len(), 21);
    }

    #[test]
    fn ratio_reads_the_frozen_cell(seed in 0u64..10_000) {
        let fx = gen_random(seed, &RandomSpec { max_side: 16, ..RandomSpec::default() }).unwrap();
        let x = &fx.images[0].1;
        let target = rescore(&fx.model, x, &best_matches(&fx.model, &extract_features(&fx.model, x).unwrap()).unwrap()[0]).unwrap();
        prop_assume!(target.score > 0.0);
        let (_, h, w) = x.dims3().unwrap();
        let mask = PixelMask::from_ranking(h, w, &(0..h * w).collect::<Vec<_>>(), h * w / 2);
        let x_tilde = perturb(x, &mask, &[0.0; 3]).unwrap();
        let tau = similarity_ratio(&fx.model, &x_tilde, &target).unwrap();
        let want = ref_similarity(&fx.model, &Act::from_tensor(&x_tilde), &target) / target.score as f64;
        prop_assert!((tau - want).abs() <= 1e-5 * want.abs().max(1.0));
        // The maximum may have moved; the ratio must still read the original cell.
        let moved = similarity_values(&extract_features(&fx.model, &x_tilde).unwrap(), fx.model.prototypes().vector(target.prototype), fx.model.simfn()).unwrap();
        let cell = moved.get(&[target.h, target.w]) as f64 / target.score as f64;
        prop_assert_eq!(tau, cell);
    }

    #[test]
    fn successive_masked_images_differ_only_on_new_pixels(seed in 0u64..1 << 32, h in 4usize..30, w in 4usize..30) {
        let x = tensor(&[3, h, w], &lcg_values(seed, 3 * h * w, 0.0, 1.0));
        let sal = tensor(&[h, w], &lcg_values(seed ^ 1, h * w, 0.0, 1.0));
        let ranking = saliency_ranking(&sal);
        let fill = [0.25, 0.5, 0.75];
        let mut prev = x.clone();
        let mut prev_mask = PixelMask::empty(h, w);
        for a in DeletionGrid::new(0.2, 0.01).unwrap().areas().unwrap() {
            let mask = PixelMask::from_ranking(h, w, &ranking, pixel_count(a, h * w));
            prop_assert!(prev_mask.is_subset_of(&mask));
            let cur = perturb(&x, &mask, &fill).unwrap();
            for (i, (p, c)) in prev.data().iter().zip(cur.data()).enumerate() {
                let pix = i % (h * w);
                if p != c {
                    prop_assert!(mask.bits()[pix] && !prev_mask.bits()[pix]);
                }
            }
            prev = cur;
            prev_mask = mask;
        }
    }

    #[test]
    fn constant_curve_area_is_grid_independent(n in 1usize..200, a_max in 0.001f64..1.0) {
        let step = a_max / n as f64;
        let areas = DeletionGrid::new(a_max, step).unwrap().areas().unwrap();
        let ones = vec![1.0; areas.len()];
        let got = audc(&areas, &ones);
        prop_assert!((got - 10_000.0 * a_max).abs() < 1e-9 * 10_000.0);
    }

    #[test]
    fn erf_area_grows_with_a_lower_threshold(seed in 0u64..1 << 32, t1 in 0.0f64..1.2, t2 in 0.0f64..1.2) {
        let fx = gen_random(seed % 500, &RandomSpec { max_side: 12, ..RandomSpec::default() }).unwrap();
        let x = &fx.images[0].1;
        let target = rescore(&fx.model, x, &best_matches(&fx.model, &extract_features(&fx.model, x).unwrap()).unwrap()[0]).unwrap();
        prop_assume!(target.score > 0.0);
        let (_, h, w) = x.dims3().unwrap();
        let s = map_of(tensor(&[h, w], &lcg_values(seed, h * w, 0.0, 1.0)), target);
        let curve = deletion_curve_for(&fx.model, x, &s, &DeletionGrid::erf(), FillPolicy::Zero, &[0.0; 3], 0).unwrap();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a_lo = erf_estimate(curve.clone(), lo).area;
        let a_hi = erf_estimate(curve, hi).area;
        match (a_lo, a_hi) {
            (Some(l), Some(h)) => prop_assert!(h <= l),
            (Some(_), None) => prop_assert!(false, "higher threshold must cross no later"),
            _ => {}
        }
    }

    #[test]
    fn relevance_is_strict_at_the_threshold(count in 1usize..200, hits_pct in 0usize..=100) {
        let side = 100;
        let n = side * side;
        let k = count;
        let hits = k * hits_pct / 100;
        let sal = Tensor::from_fn(&[side, side], |i| {
            let p = i[0] * side + i[1];
            if p < k { (n - p) as f32 } else { 0.0 }
        });
        let seg_bits: Vec<bool> = (0..n).map(|p| p < hits).collect();
        let seg = PixelMask::new(side, side, seg_bits).unwrap();
        let a = k as f64 / n as f64;
        let t = hits as f64 / k as f64;
        let r = relevance(&sal, &seg, a, t).unwrap();
        prop_assert_eq!(r.mask_count, k);
        prop_assert_eq!(r.intersection_count, hits);
        prop_assert!(!r.irrelevant);
        if hits < k {
            let above = relevance(&sal, &seg, a, t + 1e-9).unwrap();
            prop_assert!(above.irrelevant);
        }
    }
}

#[test]
fn planted_locality_is_exact() {
    for seed in 0..6u64 {
        let fx = gen_planted(seed, PlantedRegion::random(seed, 80, 16), 80).unwrap();
        let (h, w) = fx.model.input_size();
        let target = rescore(&fx.model, &fx.image, &fx.target).unwrap();
        let region = fx.region_mask();
        let outside: Vec<bool> = region.bits().iter().map(|b| !b).collect();
        let complement = PixelMask::new(h, w, outside.clone()).unwrap();
        let tau = similarity_ratio(&fx.model, &perturb(&fx.image, &complement, &fx.fill).unwrap(), &target).unwrap();
        assert_eq!(tau, 1.0, "seed {seed}");
        for k in 0..8u64 {
            let coin = lcg_values(seed * 31 + k, h * w, 0.0, 1.0);
            let bits = (0..h * w).map(|p| outside[p] && coin[p] < 0.3).collect();
            let mask = PixelMask::new(h, w, bits).unwrap();
            let tau = similarity_ratio(&fx.model, &perturb(&fx.image, &mask, &fx.fill).unwrap(), &target).unwrap();
            assert_eq!(tau, 1.0);
        }
        let tau_r = similarity_ratio(&fx.model, &perturb(&fx.image, &region, &fx.fill).unwrap(), &target).unwrap();
        assert!((tau_r - fx.tau_region).abs() < 1e-4, "{tau_r} vs {}", fx.tau_region);
        let reference = ref_similarity(&fx.model, &Act::from_tensor(&perturb(&fx.image, &region, &fx.fill).unwrap()), &target);
        assert!((reference - fx.tau_region * target.score as f64).abs() < 1e-5);
    }
}

#[test]
fn occlusion_is_nonzero_exactly_on_the_region() {
    let fx = gen_planted(3, PlantedRegion { top: 8, left: 16, size: 8 }, 32).unwrap();
    let occ = occlusion_oracle(&fx.model, &fx.image, &fx.target, &fx.fill).unwrap();
    let region = fx.region_mask();
    for (p, &v) in occ.data().iter().enumerate() {
        let on_fill = (0..3).all(|k| fx.image.data()[k * 32 * 32 + p] == fx.fill[k]);
        if region.bits()[p] && !on_fill {
            assert!(v != 0.0, "pixel {p}");
        } else if !region.bits()[p] {
            assert_eq!(v, 0.0, "pixel {p}");
        }
    }
}

#[test]
fn occlusion_of_a_zero_image_is_zero() {
    let fx = gen_random(4, &RandomSpec { positive: true, max_side: 12, ..RandomSpec::default() }).unwrap();
    let (h, w) = fx.model.input_size();
    let x = Tensor::zeros(&[3, h, w]);
    let target = Target { prototype: 0, h: 0, w: 0, score: 1.0 };
    let occ = occlusion_oracle(&fx.model, &x, &target, &[0.0; 3]).unwrap();
    assert!(occ.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mean_audc_orders_oracle_prp_random() {
    let (mut oracle, mut prp, mut random) = (0.0, 0.0, 0.0);
    let seeds = 20u64;
    for seed in 0..seeds {
        let fx = gen_planted(seed, PlantedRegion::random(seed, 32, 8), 32).unwrap();
        let run = |method| {
            let s = compute_saliency(&fx.model, &fx.image, fx.target, method, &SaliencyConfig { smoothgrads: protofaith::saliency::SmoothgradsParams { seed, ..Default::default() }, ..Default::default() }, &fx.fill, "img").unwrap();
            deletion_curve_for(&fx.model, &fx.image, &s, &DeletionGrid::new(0.1, 0.005).unwrap(), FillPolicy::DatasetMean, &fx.fill, seed).unwrap().audc
        };
        oracle += run(Method::Occlusion);
        prp += run(Method::Prp);
        random += run(Method::Random);
    }
    let n = seeds as f64;
    let (oracle, prp, random) = (oracle / n, prp / n, random / n);
    assert!(oracle <= prp + 1e-9 && prp <= random, "{oracle} {prp} {random}");
}
