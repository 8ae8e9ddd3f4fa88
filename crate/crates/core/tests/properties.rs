use ctkit_core::activation::{ctu, ctu_derivative, hbar_bound, CtuParams};
use ctkit_core::circle::{flip_points, h_along, segment_error};
use ctkit_core::spline_vq::{
    affine_compute, blended_eval, lse_smooth, mas_eval, soft_select, vq_objective, MaxAffineSpline,
    SelectionVector,
};
use proptest::prelude::*;

fn spline_strategy() -> impl Strategy<Value = (MaxAffineSpline<f64>, Vec<f64>)> {
    (2usize..5, 1usize..4).prop_flat_map(|(r, d)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), r),
            prop::collection::vec(-2.0..2.0f64, r),
            prop::collection::vec(-2.0..2.0f64, d),
        )
            .prop_map(|(slopes, offsets, x)| (MaxAffineSpline::new(slopes, offsets).unwrap(), x))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn soft_selection_lies_on_simplex((s, x) in spline_strategy(), beta in 0.0..1.0f64) {
        let t = soft_select(&s, &x, beta).unwrap();
        let sum: f64 = t.weights().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(t.weights().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn soft_selection_beats_vertices((s, x) in spline_strategy(), beta in 0.05..0.95f64) {
        let t = soft_select(&s, &x, beta).unwrap();
        let best = vq_objective(&s, &x, &t, beta).unwrap();
        for r in 0..s.pieces() {
            let v = SelectionVector::one_hot(s.pieces(), r);
            prop_assert!(vq_objective(&s, &x, &v, beta).unwrap() <= best + 1e-12);
        }
    }

    #[test]
    fn lse_brackets_the_max((s, x) in spline_strategy(), beta in 0.0..1.0f64) {
        let m = mas_eval(&s, &x).unwrap();
        let l = lse_smooth(&s, &x, beta).unwrap();
        let slack = (1.0 - beta) * (s.pieces() as f64).ln();
        prop_assert!(l >= m - 1e-12);
        prop_assert!(l <= m + slack + 1e-12);
    }

    #[test]
    fn soft_output_never_exceeds_the_max((s, x) in spline_strategy(), beta in 0.0..1.0f64) {
        let t = soft_select(&s, &x, beta).unwrap();
        prop_assert!(affine_compute(&s, &x, &t).unwrap() <= mas_eval(&s, &x).unwrap() + 1e-12);
    }

    #[test]
    fn blend_on_relu_spline_is_the_ctu(x in -30.0..30.0f64, beta in 0.01..0.99f64, c in 0.0..=1.0f64) {
        let p = CtuParams::with_options(beta, c, 0.0, f64::INFINITY).unwrap();
        let blended = blended_eval(&MaxAffineSpline::relu(), &[x], beta, c).unwrap();
        prop_assert!((blended - ctu(x, &p)).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn derivative_respects_lemma_bound(x in -50.0..50.0f64, beta in 0.001..0.999f64, c in 0.0..=1.0f64) {
        let p = CtuParams::new(beta, c).unwrap();
        let d = ctu_derivative(x, &p).unwrap();
        let hbar = hbar_bound();
        prop_assert!(d >= -c * hbar - 1e-12 && d <= 1.0 + c * hbar + 1e-12);
    }

    #[test]
    fn segment_contributions_are_nonnegative(
        a1 in -3.0..3.0f64, a2 in -3.0..3.0f64, b0 in -3.0..3.0f64,
        lo in 0.0..1.0f64, len in 0.0..0.5f64,
    ) {
        let hi = lo + len;
        let flips = flip_points([a1, a2], b0, lo, hi);
        for &s in &flips {
            prop_assert!(h_along([a1, a2], b0, s).abs() <= 1e-10);
        }
        let seg = segment_error([a1, a2], b0, lo, hi, &flips).unwrap();
        prop_assert!(seg.contribution >= 0.0);
        // composite Simpson oracle on the segment
        let n = 2000;
        let w = (hi - lo) / n as f64;
        let f = |t: f64| h_along([a1, a2], b0, t).abs();
        let mut cuts = vec![lo];
        cuts.extend(flips.iter().copied());
        cuts.push(hi);
        let mut quad = 0.0;
        for pair in cuts.windows(2) {
            let m = ((pair[1] - pair[0]) / w).ceil().max(1.0) as usize;
            let step = (pair[1] - pair[0]) / m as f64;
            for k in 0..m {
                let (p, q) = (pair[0] + k as f64 * step, pair[0] + (k + 1) as f64 * step);
                quad += step / 6.0 * (f(p) + 4.0 * f(0.5 * (p + q)) + f(q));
            }
        }
        prop_assert!((seg.contribution - quad).abs() <= 1e-10);
    }
}
