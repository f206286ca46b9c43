mod common;

use common::{lcg_values, ref_similarity, tensor, Act};
use proptest::prelude::*;
use protofaith::fixtures::{bicubic_footprint, gen_planted, gen_random, PlantedRegion, RandomSpec};
use protofaith::proto::{best_matches, extract_features, similarity_values, Target};
use protofaith::saliency::{
    compute_saliency, percentile_mask, postprocess_saliency, prp, prp_relevance,
    similarity_gradient, smoothgrads_x_input, top_fraction_mask, upsample_prototree, Method,
    SaliencyConfig, SmoothgradsParams,
};
use protofaith::tensor::{receptive_field, RuleConfig};
use protofaith::Tensor;

fn first_target(fx: &protofaith::fixtures::RandomFixture, image: usize) -> Target {
    let features = extract_features(&fx.model, &fx.images[image].1).unwrap();
    best_matches(&fx.model, &features).unwrap()[0]
}

fn image_mean(x: &Tensor) -> Vec<f32> {
    let (c, h, w) = x.dims3().unwrap();
    (0..c)
        .map(|k| (x.data()[k * h * w..(k + 1) * h * w].iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_method_gives_a_nonnegative_image_sized_map(seed in 0u64..10_000) {
        let fx = gen_random(seed, &RandomSpec { max_side: 16, ..RandomSpec::default() }).unwrap();
        let x = &fx.images[0].1;
        let target = first_target(&fx, 0);
        let fill = image_mean(x);
        for method in Method::ALL {
            let s = compute_saliency(&fx.model, x, target, method, &SaliencyConfig::default(), &fill, "img").unwrap();
            prop_assert_eq!(s.values.shape(), &x.shape()[1..]);
            prop_assert!(s.values.data().iter().all(|&v| v >= 0.0 && v.is_finite()), "{method:?}");
        }
    }

    #[test]
    fn similarity_gradient_matches_differences(seed in 0u64..10_000) {
        let spec = RandomSpec { max_layers: 3, max_side: 10, ..RandomSpec::default() };
        let fx = gen_random(seed, &spec).unwrap();
        let x = &fx.images[0].1;
        let target = first_target(&fx, 0);
        let grad = similarity_gradient(&fx.model, x, &target).unwrap();
        let base = Act::from_tensor(x);
        let sim = |a: &Act| {
            let (_, pattern) = common::ref_forward(fx.model.backbone(), a);
            (ref_similarity(&fx.model, a, &target), pattern)
        };
        let numeric: Vec<(f64, bool)> =
            (0..base.v.len()).map(|i| common::central_difference(&base, i, 1e-3, sim)).collect();
        let scale = numeric.iter().map(|(n, _)| n.abs()).fold(0.0, f64::max);
        for (i, &(n, smooth)) in numeric.iter().enumerate() {
            if smooth {
                let err = common::relative_error(grad.data()[i] as f64, n, 1e-3 * scale + 1e-12);
                prop_assert!(err < 1e-3, "entry {i}: {} vs {n}", grad.data()[i]);
            }
        }
    }

    #[test]
    fn single_noiseless_sample_is_gradient_times_input(seed in 0u64..10_000) {
        let fx = gen_random(seed, &RandomSpec { max_side: 16, ..RandomSpec::default() }).unwrap();
        let x = &fx.images[0].1;
        let target = first_target(&fx, 0);
        let params = SmoothgradsParams { samples: 1, noise_ratio: 0.0, seed };
        let got = smoothgrads_x_input(&fx.model, x, target, &params, "img").unwrap();
        let grad = similarity_gradient(&fx.model, x, &target).unwrap();
        let want = postprocess_saliency(&grad.zip_map(x, |g, v| g * v).unwrap()).unwrap();
        prop_assert_eq!(got.values.data(), want.data());
    }

    #[test]
    fn smoothgrads_is_seed_deterministic(seed in 0u64..10_000) {
        let fx = gen_random(seed, &RandomSpec { max_side: 12, ..RandomSpec::default() }).unwrap();
        let x = &fx.images[0].1;
        let target = first_target(&fx, 0);
        let params = SmoothgradsParams { seed: seed ^ 5, ..SmoothgradsParams::default() };
        let a = smoothgrads_x_input(&fx.model, x, target, &params, "img").unwrap();
        let b = smoothgrads_x_input(&fx.model, x, target, &params, "img").unwrap();
        prop_assert_eq!(a.values.data(), b.values.data());
    }

    #[test]
    fn prp_is_nonnegative_and_local_on_positive_nets(seed in 0u64..10_000) {
        let spec = RandomSpec { positive: true, max_side: 16, ..RandomSpec::default() };
        let fx = gen_random(seed, &spec).unwrap();
        let x = &fx.images[0].1;
        let target = first_target(&fx, 0);
        let rel = prp_relevance(&fx.model, x, &target, &RuleConfig::default()).unwrap();
        prop_assert!(rel.input.data().iter().all(|&v| v >= 0.0));
        let (_, h, w) = x.dims3().unwrap();
        let rf = receptive_field(fx.model.backbone(), h, w, target.h, target.w).unwrap();
        for (i, &v) in rel.input.data().iter().enumerate() {
            let p = i % (h * w);
            if v != 0.0 {
                prop_assert!(rf.contains(p / w, p % w));
            }
        }
        let map = prp(&fx.model, x, target, &RuleConfig::default(), "img").unwrap();
        prop_assert!(map.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn top_fraction_masks_nest(seed in 0u64..1 << 32, a1 in 0.0f64..1.0, a2 in 0.0f64..1.0, h in 1usize..20, w in 1usize..20) {
        let values = tensor(&[h, w], &lcg_values(seed, h * w, 0.0, 1.0).iter().map(|v| (v * 8.0).floor()).collect::<Vec<_>>());
        let (lo, hi) = (a1.min(a2), a1.max(a2));
        let small = top_fraction_mask(&values, lo).unwrap();
        let large = top_fraction_mask(&values, hi).unwrap();
        prop_assert!(small.is_subset_of(&large));
    }

    #[test]
    fn prototree_upsampling_stays_in_the_footprint(seed in 0u64..1 << 32, fh in 1usize..8, fw in 1usize..8, k in 2usize..9) {
        let sim = tensor(&[fh, fw], &lcg_values(seed, fh * fw, 0.0, 1.0));
        let target = Target { prototype: 0, h: 0, w: 0, score: 1.0 };
        let up = upsample_prototree(&sim, target, "img", fh * k, fw * k).unwrap();
        let best = protofaith::proto::max_similarity(&sim).unwrap();
        let fp = bicubic_footprint(fh, fw, best.h, best.w, fh * k, fw * k);
        for (i, &v) in up.saliency.values.data().iter().enumerate() {
            if !fp.bits()[i] {
                prop_assert_eq!(v, 0.0);
            }
        }
        prop_assert!(up.crop_mask.count() > 0);
    }
}

#[test]
fn percentile_mask_keeps_the_top_twentieth() {
    let values = Tensor::from_fn(&[10, 10], |i| (i[0] * 10 + i[1]) as f32);
    let mask = percentile_mask(&values, 95).unwrap();
    assert_eq!(mask.count(), 5);
    assert!(mask.bits()[95..].iter().all(|&b| b));
}

#[test]
fn prototree_corner_cell_keeps_its_mass_in_the_corner() {
    let sim = Tensor::from_fn(&[7, 7], |i| if i == [0, 0] { 1.0 } else { 0.1 });
    let target = Target { prototype: 0, h: 0, w: 0, score: 1.0 };
    let up = upsample_prototree(&sim, target, "img", 224, 224).unwrap();
    let v = up.saliency.values;
    let total = v.sum();
    let corner: f64 = (0..48)
        .flat_map(|r| (0..48).map(move |c| (r, c)))
        .map(|(r, c)| v.get(&[r, c]) as f64)
        .sum();
    assert!(corner / total > 0.99, "{corner} of {total}");
    assert!(v.get(&[0, 0]) > 0.9);
}

#[test]
fn planted_prp_recovers_the_region() {
    for seed in 0..4u64 {
        let fx = gen_planted(seed, PlantedRegion::random(seed, 80, 16), 80).unwrap();
        let n = fx.region.height() * fx.region.width();
        let a = n as f64 / (80.0 * 80.0);
        let region = fx.region_mask();
        let fill = fx.fill.clone();
        let recovered = |method| {
            let s = compute_saliency(&fx.model, &fx.image, fx.target, method, &SaliencyConfig::default(), &fill, "img").unwrap();
            top_fraction_mask(&s.values, a).unwrap().intersection_count(region.bits())
        };
        let oracle = recovered(Method::Occlusion);
        let prp_hits = recovered(Method::Prp);
        let grad_hits = recovered(Method::Smoothgrads);
        let up_hits = recovered(Method::Upsample);
        assert_eq!(oracle, n, "seed {seed}");
        assert!(prp_hits as f64 >= 0.9 * n as f64, "seed {seed}: prp {prp_hits}/{n}");
        assert!(grad_hits as f64 >= 0.9 * n as f64, "seed {seed}: smoothgrads {grad_hits}/{n}");
        assert!(up_hits < prp_hits, "seed {seed}: upsampling {up_hits}");
        let sim = similarity_values(
            &extract_features(&fx.model, &fx.image).unwrap(),
            fx.model.prototypes().vector(fx.target.prototype),
            fx.model.simfn(),
        )
        .unwrap();
        assert_eq!(protofaith::proto::max_similarity(&sim).unwrap().score, fx.target.score);
    }
}
