mod support;

use hyatt_core::heatmap::{
    combined_loss, decode_heatmap, encode_heatmap, gaussian_amplitude, mre, sdr, weighted_total, EvalReport,
    LandmarkSet,
};
use hyatt_core::tape::Tape;
use hyatt_core::Tensor;
use proptest::prelude::*;
use rand::Rng;
use support::rng;

#[test]
fn encoder_matches_pixel_loop() {
    let mut r = rng(5);
    for _ in 0..20 {
        let (h, w) = (r.gen_range(8..40), r.gen_range(8..40));
        let pts: Vec<[f64; 2]> = (0..3)
            .map(|_| [r.gen_range(-2.0..w as f64 + 2.0), r.gen_range(-2.0..h as f64 + 2.0)])
            .collect();
        let sigma = r.gen_range(1.0..5.0);
        for peak in [false, true] {
            let map: Tensor<f64> =
                encode_heatmap(&LandmarkSet::pixels(pts.clone()).unwrap(), (h, w), sigma, peak).unwrap();
            assert_eq!(map.shape(), &[3, h, w]);
            for (c, p) in pts.iter().enumerate() {
                let want = support::gaussian_map(p[0], p[1], h, w, sigma, gaussian_amplitude(sigma, peak));
                let got = &map.data()[c * h * w..(c + 1) * h * w];
                assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-7));
            }
        }
    }
}

#[test]
fn literal_centre_and_falloff() {
    let lm = LandmarkSet::pixels(vec![[10.0, 10.0]]).unwrap();
    let m2: Tensor<f64> = encode_heatmap(&lm, (21, 21), 2.0, false).unwrap();
    let c2 = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 2.0);
    assert!((m2.at(&[0, 10, 10]) - c2).abs() < 1e-6);
    assert!((m2.at(&[0, 10, 10]) - 0.19947).abs() < 1e-5);
    let m4: Tensor<f64> = encode_heatmap(&lm, (21, 21), 4.0, false).unwrap();
    let c4 = m4.at(&[0, 10, 10]);
    assert!((c4 - 0.09974).abs() < 1e-5);
    assert!((m4.at(&[0, 10, 14]) - c4 * (-0.5f64).exp()).abs() < 1e-12);
}

#[test]
fn codec_round_trip_on_1000_integer_landmarks() {
    let mut r = rng(9);
    let mut failures = 0;
    for i in 0..1000 {
        let sigma = if i % 2 == 0 { 2.0 } else { 4.0 };
        let margin = (3.0 * sigma) as i64;
        let (h, w) = (64i64, 48i64);
        let pts: Vec<[f64; 2]> = (0..4)
            .map(|_| {
                [
                    r.gen_range(margin..w - margin) as f64,
                    r.gen_range(margin..h - margin) as f64,
                ]
            })
            .collect();
        let lm = LandmarkSet::pixels(pts).unwrap();
        for peak in [false, true] {
            let map: Tensor<f32> = encode_heatmap(&lm, (h as usize, w as usize), sigma, peak).unwrap();
            for refine in [false, true] {
                if decode_heatmap(&map, refine).unwrap() != lm {
                    failures += 1;
                }
            }
        }
    }
    assert_eq!(failures, 0);
}

#[test]
fn metrics_match_loops_on_1000_sets() {
    let mut r = rng(17);
    let thresholds = [2.0, 2.5, 3.0, 4.0];
    for i in 0..1000 {
        let n = r.gen_range(1..12);
        let spacing = (i % 3 == 0).then(|| r.gen_range(0.05..0.5));
        let mut pts = || {
            (0..n)
                .map(|_| [r.gen_range(0.0..100.0), r.gen_range(0.0..100.0)])
                .collect::<Vec<_>>()
        };
        let (p, g) = (pts(), pts());
        let got = mre(
            &LandmarkSet::new(p.clone(), spacing).unwrap(),
            &LandmarkSet::new(g.clone(), spacing).unwrap(),
        )
        .unwrap();
        let want = support::radial_errors(&p, &g, spacing);
        assert_eq!(got.per_point, want);
        assert_eq!(got.mre, support::mean(&want));
        let rates = sdr(&want, &thresholds);
        for (&(z, pct), &t) in rates.iter().zip(&thresholds) {
            assert_eq!(z, t);
            assert_eq!(pct, support::detection_rate(&want, t));
        }
    }
}

#[test]
fn worked_detection_rates() {
    let rates = sdr(&[1.0, 2.5, 3.5], &[2.0, 2.5, 3.0, 4.0]);
    let pct: Vec<f64> = rates.iter().map(|r| (r.1 * 100.0).round() / 100.0).collect();
    assert_eq!(pct, vec![33.33, 33.33, 66.67, 100.0]);
    assert!(sdr(&[0.0; 5], &[2.0, 2.5, 3.0, 4.0]).iter().all(|r| r.1 == 100.0));
}

#[test]
fn radial_error_units() {
    let p = LandmarkSet::pixels(vec![[3.0, 4.0]]).unwrap();
    let g = LandmarkSet::pixels(vec![[0.0, 0.0]]).unwrap();
    assert_eq!(mre(&p, &g).unwrap().mre, 5.0);
    let mm = mre(&p.with_spacing(Some(0.1)), &g.with_spacing(Some(0.1))).unwrap();
    assert!((mm.mre - 0.5).abs() < 1e-15);
    assert!(mm.physical);
}

#[test]
fn report_aggregates_like_loops() {
    let mut r = rng(3);
    let errs: Vec<f64> = (0..57).map(|_| r.gen_range(0.0..6.0)).collect();
    let rep = EvalReport::from_errors(errs.clone(), true, &[2.0, 4.0]);
    assert_eq!(rep.mre, support::mean(&errs));
    let m = support::mean(&errs);
    let var = errs.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / errs.len() as f64;
    assert!((rep.std - var.sqrt()).abs() < 1e-12);
    assert_eq!(rep.sdr[1].1, support::detection_rate(&errs, 4.0));
    assert_eq!(rep.unit, "mm");
}

fn loss_of(preds: &[Tensor<f64>; 3], targets: &[Tensor<f64>; 3], weights: [f64; 3]) -> (f64, [f64; 3]) {
    let mut tape = Tape::<f64>::new();
    let p = preds.clone().map(|t| tape.constant(t));
    let t = targets.clone().map(|t| tape.constant(t));
    let (total, parts) = combined_loss(&mut tape, p, t, weights).unwrap();
    (tape.value(total).item(), parts.map(|n| tape.value(n).item()))
}

#[test]
fn combined_loss_arithmetic() {
    assert!((weighted_total([0.1, 0.2, 0.3], [1.0, 3.0, 3.0]) - 1.6).abs() < 1e-12);
    // components built so each mean squared error is exactly the fabricated value
    let fab = |v: f64| Tensor::full(&[1, 1, 2, 2], v.sqrt());
    let zeros = || Tensor::zeros(&[1, 1, 2, 2]);
    let (total, parts) = loss_of(
        &[fab(0.1), fab(0.2), fab(0.3)],
        &[zeros(), zeros(), zeros()],
        [1.0, 3.0, 3.0],
    );
    for (p, want) in parts.iter().zip([0.1, 0.2, 0.3]) {
        assert!((p - want).abs() < 1e-12);
    }
    assert!((total - 1.6).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_zero_iff_predictions_equal_targets(seed in any::<u64>(), which in 0usize..3, at in 0usize..9) {
        let mut r = rng(seed);
        let mut make = |s: usize| Tensor::new(&[1, 1, s, s], (0..s * s).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let targets = [make(3), make(4), make(5)];
        let (same, _) = loss_of(&targets, &targets, [1.0, 3.0, 3.0]);
        prop_assert_eq!(same, 0.0);
        let mut preds = targets.clone();
        preds[which].data_mut()[at] += 1e-3;
        let (diff, _) = loss_of(&preds, &targets, [1.0, 3.0, 3.0]);
        prop_assert!(diff > 0.0);
    }

    #[test]
    fn grid_mapping_inverts(x in -10.0f64..200.0, y in -10.0f64..200.0, stride in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let lm = LandmarkSet::pixels(vec![[x, y]]).unwrap();
        let back = lm.to_grid(stride).from_grid(stride);
        prop_assert!((back.points[0][0] - x).abs() < 1e-9 && (back.points[0][1] - y).abs() < 1e-9);
    }

    #[test]
    fn detection_rate_is_monotone(seed in any::<u64>()) {
        let mut r = rng(seed);
        let errs: Vec<f64> = (0..20).map(|_| r.gen_range(0.0..5.0)).collect();
        let rates = sdr(&errs, &[0.5, 1.0, 2.0, 3.0, 4.0, 5.0]);
        for w in rates.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
        prop_assert_eq!(rates[5].1, 100.0);
    }
}
