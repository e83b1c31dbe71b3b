use isc_core::koopman::{build_hankel, fit, KoopmanLinearModel};
use proptest::prelude::*;

/// Continue `y_k = sum_j c_j y_{k-1-j}` directly from its seed values.
fn recurrence(coeffs: &[f64], seed: &[f64], len: usize) -> Vec<f64> {
    let mut y = seed.to_vec();
    while y.len() < len {
        let k = y.len();
        y.push(coeffs.iter().enumerate().map(|(j, c)| c * y[k - 1 - j]).sum());
    }
    y
}

/// Monic polynomial with the given real roots, as recurrence coefficients.
fn coeffs_from_roots(roots: &[f64]) -> Vec<f64> {
    // prod (z - r) = z^n + p_1 z^{n-1} + ... ; recurrence coefficient c_j = -p_{j+1}
    let mut p = vec![1.0];
    for r in roots {
        let mut next = vec![0.0; p.len() + 1];
        for (i, a) in p.iter().enumerate() {
            next[i] += a;
            next[i + 1] -= a * r;
        }
        p = next;
    }
    p[1..].iter().map(|a| -a).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hankel_pair_is_one_step_shift(series in prop::collection::vec(-5.0f64..5.0, 12..80), tau in 0usize..8) {
        prop_assume!(series.len() >= tau + 2);
        let w = build_hankel(&series, tau).unwrap();
        let cols = w.upsilon_o.ncols();
        for c in 0..cols - 1 {
            prop_assert_eq!(w.upsilon_u.column(c), w.upsilon_o.column(c + 1));
        }
        prop_assert_eq!(w.upsilon_u[(tau, cols - 1)], series[series.len() - 1]);
        prop_assert_eq!(w.last_embedded.as_slice(), &series[series.len() - tau - 1..]);
    }

    #[test]
    fn operator_is_scale_invariant(series in prop::collection::vec(-1.0f64..1.0, 60..120), tau in 1usize..6) {
        let a = KoopmanLinearModel::from_series(&series, tau).unwrap();
        let scaled: Vec<f64> = series.iter().map(|v| 10.0 * v).collect();
        let b = KoopmanLinearModel::from_series(&scaled, tau).unwrap();
        let diff = (&a.kappa - &b.kappa).amax();
        prop_assert!(diff < 1e-9, "{:e}", diff);
    }

    #[test]
    fn prediction_continues_linear_recurrence(
        roots in prop::collection::vec(0.3f64..0.98, 1..4),
        seed in prop::collection::vec(0.5f64..2.0, 4),
        extra in 0usize..3,
    ) {
        let coeffs = coeffs_from_roots(&roots);
        let order = coeffs.len();
        let tau = order - 1 + extra;
        let y = recurrence(&coeffs, &seed[..order], 160);
        let model = fit(&build_hankel(&y[..120], tau).unwrap()).unwrap();
        let pred = model.predict(40);
        let scale = y[120..].iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        for (p, t) in pred.iter().zip(&y[120..]) {
            prop_assert!((p - t).abs() / scale < 1e-6, "{} vs {}", p, t);
        }
    }
}

#[test]
fn distinct_roots_recovered_in_spectrum() {
    let coeffs = coeffs_from_roots(&[0.95, 0.7, 0.5]);
    let y = recurrence(&coeffs, &[1.0, 2.0, -1.0], 200);
    let model = KoopmanLinearModel::from_series(&y, 2).unwrap();
    let spectrum = model.spectrum().unwrap();
    for (got, want) in spectrum.iter().zip([0.95, 0.7, 0.5]) {
        assert!((got.re - want).abs() < 1e-8 && got.im.abs() < 1e-8, "{got} vs {want}");
    }
}

#[test]
fn dump_round_trips() {
    let y: Vec<f64> = (0..50).map(|k| (0.3 * k as f64).sin()).collect();
    let model = KoopmanLinearModel::from_series(&y, 3).unwrap();
    let back = isc_core::linalg::parse_matrix(&model.dump()).unwrap();
    assert_eq!(back, model.kappa);
}
