mod common;

use common::{
    central_difference, lcg_values, ref_bicubic, ref_blur, ref_conv, ref_forward, ref_maxpool,
    relative_error, tensor, Act,
};
use proptest::prelude::*;
use protofaith::fixtures::{gen_random, RandomSpec};
use protofaith::tensor::{
    backward_input, bicubic_upsample, conv2d_forward, gaussian_blur5, lrp_backward,
    maxpool_forward, receptive_field, relu_forward, Backbone, Conv2d, LayerSpec, LrpRule,
    MaxPool2d, RuleConfig,
};
use protofaith::Tensor;

#[derive(Debug, Clone, Copy)]
struct ConvCase {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..4, 1usize..5, 1usize..4, 1usize..3, 0u64..1 << 32)
        .prop_flat_map(|(cin, cout, k, stride, seed)| {
            (0..=k / 2, k..=8usize, k..=8usize).prop_map(move |(pad, h, w)| ConvCase {
                cin,
                cout,
                k,
                stride,
                pad,
                h,
                w,
                seed,
            })
        })
}

fn build_conv(c: &ConvCase) -> (Conv2d, Tensor) {
    let wn = c.cout * c.cin * c.k * c.k;
    let wv = lcg_values(c.seed, wn + c.cout, -1.0, 1.0);
    let conv = Conv2d::new(
        tensor(&[c.cout, c.cin, c.k, c.k], &wv[..wn]),
        tensor(&[c.cout], &wv[wn..]),
        c.stride,
        c.pad,
    )
    .unwrap();
    let x = tensor(
        &[c.cin, c.h, c.w],
        &lcg_values(c.seed ^ 0xabc, c.cin * c.h * c.w, -2.0, 2.0),
    );
    (conv, x)
}

fn assert_close(got: &Tensor, want: &Act, tol: f64) {
    assert_eq!(got.shape(), &[want.c, want.h, want.w]);
    for (g, w) in got.data().iter().zip(&want.v) {
        assert!((*g as f64 - w).abs() <= tol * (1.0 + w.abs()), "{g} vs {w}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_nested_loops(case in conv_case()) {
        let (conv, x) = build_conv(&case);
        let got = conv2d_forward(&x, &conv).unwrap();
        assert_close(&got, &ref_conv(&Act::from_tensor(&x), &conv), 1e-6);
    }

    #[test]
    fn relu_matches_elementwise_max(seed in 0u64..1 << 32, c in 1usize..4, h in 1usize..9, w in 1usize..9) {
        let x = tensor(&[c, h, w], &lcg_values(seed, c * h * w, -1.0, 1.0));
        let got = relu_forward(&x);
        for (g, v) in got.data().iter().zip(x.data()) {
            prop_assert_eq!(*g, v.max(0.0));
        }
    }

    #[test]
    fn maxpool_matches_nested_loops(
        seed in 0u64..1 << 32,
        c in 1usize..4,
        window in 1usize..4,
        stride in 1usize..4,
        h in 3usize..9,
        w in 3usize..9,
    ) {
        let x = tensor(&[c, h, w], &lcg_values(seed, c * h * w, -1.0, 1.0));
        let pool = MaxPool2d::new(window, stride).unwrap();
        let got = maxpool_forward(&x, pool).unwrap();
        let (want, _) = ref_maxpool(&Act::from_tensor(&x), pool);
        assert_close(&got.output, &want, 0.0);
        for (o, &idx) in got.argmax.iter().enumerate() {
            prop_assert_eq!(x.data()[idx], got.output.data()[o]);
        }
    }

    #[test]
    fn backbone_matches_reference_forward(seed in 0u64..10_000) {
        let fx = gen_random(seed, &RandomSpec { max_side: 12, images: 1, ..RandomSpec::default() }).unwrap();
        let x = &fx.images[0].1;
        let got = fx.model.backbone().forward(x).unwrap();
        let (want, _) = ref_forward(fx.model.backbone(), &Act::from_tensor(x));
        assert_close(&got, &want, 1e-5);
    }

    #[test]
    fn backward_matches_central_differences(seed in 0u64..10_000) {
        let spec = RandomSpec { min_layers: 2, max_layers: 3, max_side: 10, images: 1, ..RandomSpec::default() };
        let fx = gen_random(seed, &spec).unwrap();
        let net = fx.model.backbone();
        let x = &fx.images[0].1;
        let trace = net.forward_trace(x).unwrap();
        let out_shape = trace.output().shape().to_vec();
        let n_out: usize = out_shape.iter().product();
        let cot = lcg_values(seed ^ 0x77, n_out, -1.0, 1.0);
        let grad = backward_input(net, &trace, &tensor(&out_shape, &cot)).unwrap();
        let loss = |a: &Act| {
            let (f, pattern) = ref_forward(net, a);
            (f.v.iter().zip(&cot).map(|(v, g)| v * g).sum::<f64>(), pattern)
        };
        let base = Act::from_tensor(x);
        let numeric: Vec<(f64, bool)> =
            (0..base.v.len()).map(|i| central_difference(&base, i, 1e-3, loss)).collect();
        let scale = numeric.iter().map(|(n, _)| n.abs()).fold(0.0, f64::max);
        for (i, &(n, smooth)) in numeric.iter().enumerate() {
            if smooth {
                let err = relative_error(grad.data()[i] as f64, n, 1e-3 * scale + 1e-12);
                prop_assert!(err < 1e-3, "entry {i}: analytic {} numeric {n}", grad.data()[i]);
            }
        }
    }

    #[test]
    fn zplus_conserves_relevance_on_positive_nets(seed in 0u64..10_000) {
        let spec = RandomSpec { positive: true, images: 1, max_side: 16, ..RandomSpec::default() };
        let fx = gen_random(seed, &spec).unwrap();
        let net = fx.model.backbone();
        let trace = net.forward_trace(&fx.images[0].1).unwrap();
        let out = trace.output();
        let rel = out.map(|v| v.max(0.0));
        let input = lrp_backward(net, &trace, &rel, &RuleConfig::uniform(LrpRule::ZPlus)).unwrap();
        let (injected, received) = (rel.sum(), input.sum());
        prop_assert!((received - injected).abs() <= 0.01 * injected, "{received} vs {injected}");
        prop_assert!(input.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gradient_support_lies_in_receptive_field(seed in 0u64..10_000, cell in 0usize..64) {
        let fx = gen_random(seed, &RandomSpec { images: 1, max_side: 16, ..RandomSpec::default() }).unwrap();
        let net = fx.model.backbone();
        let x = &fx.images[0].1;
        let (_, h, w) = x.dims3().unwrap();
        let trace = net.forward_trace(x).unwrap();
        let (d, fh, fw) = trace.output().dims3().unwrap();
        let (ch, cw) = ((cell / 8) % fh, (cell % 8) % fw);
        let cot = Tensor::from_fn(&[d, fh, fw], |i| if i[1] == ch && i[2] == cw { 1.0 } else { 0.0 });
        let grad = backward_input(net, &trace, &cot).unwrap();
        let rf = receptive_field(net, h, w, ch, cw).unwrap();
        let plane = h * w;
        let mut best = (0.0f32, None);
        for (i, &g) in grad.data().iter().enumerate() {
            let p = i % plane;
            if g != 0.0 {
                prop_assert!(rf.contains(p / w, p % w), "gradient at {:?} outside {rf:?}", (p / w, p % w));
            }
            if g.abs() > best.0 {
                best = (g.abs(), Some(p));
            }
        }
        if let (_, Some(p)) = best {
            prop_assert!(rf.contains(p / w, p % w));
        }
    }

    #[test]
    fn receptive_field_bounds_perturbation_reach(seed in 0u64..10_000) {
        let fx = gen_random(seed, &RandomSpec { images: 1, max_side: 12, ..RandomSpec::default() }).unwrap();
        let net = fx.model.backbone();
        let x = Act::from_tensor(&fx.images[0].1);
        let (base, _) = ref_forward(net, &x);
        let (ch, cw) = (base.h / 2, base.w / 2);
        let rf = receptive_field(net, x.h, x.w, ch, cw).unwrap();
        for r in 0..x.h {
            for c in 0..x.w {
                if rf.contains(r, c) {
                    continue;
                }
                let mut y = x.clone();
                for k in 0..x.c {
                    y.v[(k * x.h + r) * x.w + c] += 5.0;
                }
                let (f, _) = ref_forward(net, &y);
                for k in 0..f.c {
                    prop_assert_eq!(f.at(k, ch, cw), base.at(k, ch, cw));
                }
            }
        }
    }

    #[test]
    fn bicubic_matches_kernel_sum(seed in 0u64..1 << 32, h in 1usize..7, w in 1usize..7, sh in 1usize..5, sw in 1usize..5) {
        let map = lcg_values(seed, h * w, -1.0, 1.0);
        let (oh, ow) = (h * sh + seed as usize % 3, w * sw + 1);
        let got = bicubic_upsample(&tensor(&[h, w], &map), oh, ow).unwrap();
        let want = ref_bicubic(&map, h, w, oh, ow);
        for (g, v) in got.data().iter().zip(&want) {
            prop_assert!((*g as f64 - v).abs() < 1e-5, "{g} vs {v}");
        }
    }

    #[test]
    fn bicubic_is_exact_on_constants(v in -10.0f32..10.0, h in 1usize..8, w in 1usize..8, oh in 1usize..40, ow in 1usize..40) {
        let got = bicubic_upsample(&Tensor::full(&[h, w], v), oh, ow).unwrap();
        for g in got.data() {
            prop_assert!((g - v).abs() <= 1e-6 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn blur_matches_direct_convolution(seed in 0u64..1 << 32, h in 1usize..12, w in 1usize..12) {
        let map = lcg_values(seed, h * w, 0.0, 1.0);
        let got = gaussian_blur5(&tensor(&[h, w], &map)).unwrap();
        let want = ref_blur(&map, h, w);
        for (g, v) in got.data().iter().zip(&want) {
            prop_assert!((*g as f64 - v).abs() < 1e-6);
        }
    }
}

#[test]
fn bicubic_reproduces_a_ramp_away_from_edges() {
    let (h, w, s) = (6, 7, 4);
    let map: Vec<f64> = (0..h * w).map(|i| 0.3 * (i / w) as f64 - 0.2 * (i % w) as f64 + 1.0).collect();
    let got = bicubic_upsample(&tensor(&[h, w], &map), h * s, w * s).unwrap();
    for y in 0..h * s {
        for x in 0..w * s {
            let sy = (y as f64 + 0.5) / s as f64 - 0.5;
            let sx = (x as f64 + 0.5) / s as f64 - 0.5;
            let inside = sy >= 1.0 && sy <= h as f64 - 3.0 && sx >= 1.0 && sx <= w as f64 - 3.0;
            if inside {
                let want = 0.3 * sy - 0.2 * sx + 1.0;
                assert!((got.data()[y * w * s + x] as f64 - want).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn one_hot_upsampling_peaks_at_the_cell_center() {
    let map = Tensor::from_fn(&[7, 7], |i| if i[0] == 3 && i[1] == 2 { 1.0 } else { 0.0 });
    let up = bicubic_upsample(&map, 224, 224).unwrap();
    let (idx, _) = up
        .data()
        .iter()
        .enumerate()
        .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let (r, c) = (idx / 224, idx % 224);
    // Cell (3, 2) spans rows 96..128 and columns 64..96; its center pixels
    // are 111/112 and 79/80.
    assert!((111..=112).contains(&r) && (79..=80).contains(&c), "peak at {r},{c}");
}

#[test]
fn padding_cells_stay_inside_the_image() {
    let conv = Conv2d::new(Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]), 1, 1).unwrap();
    let net = Backbone::new(vec![LayerSpec::Conv2d(conv)]).unwrap();
    let rf = receptive_field(&net, 5, 5, 0, 0).unwrap();
    assert_eq!((rf.top, rf.left, rf.bottom, rf.right), (0, 0, 2, 2));
    let rf = receptive_field(&net, 5, 5, 4, 2).unwrap();
    assert_eq!((rf.top, rf.left, rf.bottom, rf.right), (3, 1, 5, 4));
}
