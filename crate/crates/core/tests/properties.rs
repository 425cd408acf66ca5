use ctxagg_core::accounting::{count_params, ModuleSpec};
use ctxagg_core::densefpn::DenseFpnConfig;
use ctxagg_core::ops::{
    bilinear_resize_tensor, roi_align_tensor, softmax_tensor, RoiAlignParams, RoiBox,
};
use ctxagg_core::pyramid::{FeaturePyramid, LateralReducer};
use ctxagg_core::toy::{soft_nms, NmsMode, SoftNmsConfig};
use ctxagg_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn tensor(dims: [usize; 4], values: &[f64]) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims, values.iter().cycle().take(n).copied().collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-1e3f64..1e3, 1..9)) {
        let s = softmax_tensor(&Tensor::new([1, v.len()], v.clone()).unwrap(), 1).unwrap();
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let arg = |x: &[f64]| x.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(arg(s.data()), arg(&v));
    }

    #[test]
    fn same_size_resize_is_identity(h in 1usize..7, w in 1usize..7, vals in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let x = tensor([1, 2, h, w], &vals);
        prop_assert_eq!(bilinear_resize_tensor(&x, h, w).unwrap(), x);
    }

    #[test]
    fn resize_keeps_constants(h in 1usize..7, w in 1usize..7, oh in 1usize..12, ow in 1usize..12, c in -10.0f64..10.0) {
        let y = bilinear_resize_tensor(&Tensor::full([1, 1, h, w], c), oh, ow).unwrap();
        prop_assert!(y.data().iter().all(|&v| (v - c).abs() <= 1e-12 * c.abs().max(1.0)));
    }

    #[test]
    fn roi_align_keeps_constants(
        c in -10.0f64..10.0,
        x1 in 0.0f64..14.0, y1 in 0.0f64..14.0, bw in 0.5f64..8.0, bh in 0.5f64..8.0,
        s in 1usize..5, ratio in 1usize..4,
    ) {
        let x = Tensor::full([1, 2, 8, 8], c);
        let p = RoiAlignParams { out_size: s, sampling_ratio: ratio, spatial_scale: 0.5 };
        let roi = RoiBox::new(0, x1, y1, (x1 + bw).min(16.0), (y1 + bh).min(16.0));
        let y = roi_align_tensor(&x, &[roi], p).unwrap();
        prop_assert!(y.data().iter().all(|&v| (v - c).abs() <= 1e-12 * c.abs().max(1.0)));
    }

    #[test]
    fn reducer_is_linear_without_bias(
        a in -3.0f64..3.0, b in -3.0f64..3.0,
        u in prop::collection::vec(-1.0f64..1.0, 1..30), v in prop::collection::vec(-1.0f64..1.0, 1..30),
    ) {
        let mut store = ParamStore::new(5);
        let red = LateralReducer::new(&mut store, "r", 2, &[2, 3], 2, 1).unwrap();
        store.fill_with("r", |n, i| if n.ends_with("bias") { 0.0 } else { ((i * 7 % 11) as f64 - 5.0) / 5.0 });
        let run = |c2: Tensor, c3: Tensor| -> Vec<Vec<f64>> {
            let mut t = Tape::new();
            let levels = vec![t.constant(c2), t.constant(c3)];
            let out = red.reduce_laterals(&mut t, &store, &FeaturePyramid::new(2, levels, (16, 16)).unwrap()).unwrap();
            out.levels().iter().map(|&l| t.value(l).data().to_vec()).collect()
        };
        let (x2, x3, y2, y3) = (tensor([1, 2, 4, 4], &u), tensor([1, 3, 2, 2], &u), tensor([1, 2, 4, 4], &v), tensor([1, 3, 2, 2], &v));
        let mix = |p: &Tensor, q: &Tensor| Tensor::new(p.shape().clone(), p.data().iter().zip(q.data()).map(|(s, t)| a * s + b * t).collect()).unwrap();
        let lhs = run(mix(&x2, &y2), mix(&x3, &y3));
        let (fx, fy) = (run(x2, x3), run(y2, y3));
        for ((l, p), q) in lhs.iter().zip(&fx).zip(&fy) {
            for ((l, p), q) in l.iter().zip(p).zip(q) {
                prop_assert!((l - (a * p + b * q)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn densefpn_params_are_linear_in_depth(c in 1usize..48, m in 1usize..32, top in 2usize..7, d in 2usize..6) {
        let cfg = |depth| ModuleSpec::DenseFpn(DenseFpnConfig { depth, channels: c, mid_channels: m, levels: [2, top] });
        let p = |depth| count_params(&cfg(depth)).unwrap().total;
        prop_assert_eq!(p(d), d as u64 * p(1));
    }

    #[test]
    fn soft_nms_only_decays(
        raw in prop::collection::vec((0.0f64..40.0, 0.0f64..40.0, 1.0f64..20.0, 1.0f64..20.0, 0.0f64..1.0), 1..25),
        gaussian in any::<bool>(),
    ) {
        let boxes: Vec<[f64; 4]> = raw.iter().map(|&(x, y, w, h, _)| [x, y, x + w, y + h]).collect();
        let scores: Vec<f64> = raw.iter().map(|r| r.4).collect();
        let cfg = SoftNmsConfig { mode: if gaussian { NmsMode::Gaussian } else { NmsMode::Linear }, ..SoftNmsConfig::default() };
        let kept = soft_nms(&boxes, &scores, &cfg);
        let mut seen = vec![false; boxes.len()];
        for &(i, s) in &kept {
            prop_assert!(!seen[i]);
            seen[i] = true;
            prop_assert!(s <= scores[i] && s >= cfg.score_floor);
        }
        prop_assert!(kept.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}
