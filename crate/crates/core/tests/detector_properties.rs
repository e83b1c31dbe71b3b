use isc_core::detector::{
    average_distances, check_threshold, estimate_density, kld, update_residual, ModeDistribution, ResidualState,
    SampleGrid,
};
use isc_core::ModeSample;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sample(module_index: usize, statistics: Vec<f64>) -> ModeSample {
    ModeSample { module_index, statistics }
}

/// Pooled grid, per-module densities and average distances for one window.
fn window_xi(samples: &[ModeSample]) -> Vec<f64> {
    let grid = SampleGrid::from_samples(samples, 256).unwrap();
    let dists: Vec<ModeDistribution> = samples.iter().map(|s| estimate_density(s, &grid)).collect();
    average_distances(&dists).unwrap()
}

fn normal_samples(rng: &mut ChaCha8Rng, mean: f64, n: usize) -> Vec<f64> {
    let d = Normal::new(mean, 1.0).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kld_is_non_negative(
        w in prop::collection::vec(0.0f64..1.0, 2..64),
        noise in prop::collection::vec(0.0f64..1.0, 64),
        zeros in prop::collection::vec(any::<bool>(), 64),
    ) {
        let v: Vec<f64> = w.iter().zip(&noise).zip(&zeros).map(|((a, b), z)| if *z { 0.0 } else { a * b }).collect();
        let p = ModeDistribution::from_weights(&w, 1);
        let q = ModeDistribution::from_weights(&v, 2);
        prop_assert!(kld(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kld(&q, &p).unwrap() >= -1e-12);
        prop_assert_eq!(kld(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(kld(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn residual_gauge_holds(
        trace in prop::collection::vec(prop::collection::vec(-1.0f64..5.0, 4), 1..20),
    ) {
        let mut state = ResidualState::new(4, f64::INFINITY);
        let mut prev = vec![0.0; 4];
        for xi in &trace {
            update_residual(&mut state, xi).unwrap();
            let min = state.residual_r.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(min, 0.0);
            for (now, before) in state.cumulative_xi.iter().zip(&prev) {
                prop_assert!(now >= before);
            }
            prev = state.cumulative_xi.clone();
        }
    }

    #[test]
    fn permuting_modules_permutes_outputs(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows: Vec<Vec<ModeSample>> = (0..4)
            .map(|_| (0..4).map(|i| sample(i + 1, normal_samples(&mut rng, 0.5 * i as f64, 60))).collect())
            .collect();
        let mut base = ResidualState::new(4, 0.5);
        let mut permuted = ResidualState::new(4, 0.5);
        for (w, samples) in windows.iter().enumerate() {
            let shuffled: Vec<ModeSample> = perm.iter().map(|&j| samples[j].clone()).collect();
            let xi = window_xi(samples);
            let xi_p = window_xi(&shuffled);
            for (slot, &j) in perm.iter().enumerate() {
                prop_assert!((xi_p[slot] - xi[j]).abs() <= 1e-12 * xi[j].abs().max(1.0));
            }
            update_residual(&mut base, &xi).unwrap();
            update_residual(&mut permuted, &xi_p).unwrap();
            check_threshold(&mut base, w, w as f64);
            check_threshold(&mut permuted, w, w as f64);
            for (slot, &j) in perm.iter().enumerate() {
                prop_assert!((permuted.residual_r[slot] - base.residual_r[j]).abs() <= 1e-10);
                prop_assert!((permuted.cumulative_xi[slot] - base.cumulative_xi[j]).abs() <= 1e-10);
            }
        }
        let mut flagged: Vec<usize> = base.flags.iter().map(|f| f.module_index).collect();
        let mut mapped: Vec<usize> = permuted.flags.iter().map(|f| perm[f.module_index - 1] + 1).collect();
        flagged.sort_unstable();
        mapped.sort_unstable();
        prop_assert_eq!(flagged, mapped);
    }
}

#[test]
fn shifted_module_separates_from_healthy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shift = 3.5;
    let mut state = ResidualState::new(5, f64::INFINITY);
    for _ in 0..5 {
        let samples: Vec<ModeSample> = (0..5)
            .map(|i| sample(i + 1, normal_samples(&mut rng, if i == 2 { shift } else { 0.0 }, 200)))
            .collect();
        // pooled (within-group) standard deviation
        let var_sum: f64 = samples
            .iter()
            .map(|s| {
                let n = s.statistics.len() as f64;
                let m = s.statistics.iter().sum::<f64>() / n;
                s.statistics.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum();
        let sd = (var_sum / samples.len() as f64).sqrt();
        assert!(shift >= 3.0 * sd, "shift {shift} is under 3 pooled sd ({sd})");
        update_residual(&mut state, &window_xi(&samples)).unwrap();
    }
    let faulty = state.residual_r[2];
    let healthy = state.residual_r.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, r)| *r).fold(0.0, f64::max);
    assert!(faulty >= 10.0 * healthy, "faulty r {faulty}, healthy max {healthy}");
}

#[test]
fn kde_of_standard_normal_is_centred() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = sample(1, normal_samples(&mut rng, 0.0, 10_000));
    let grid = SampleGrid::uniform(-5.0, 5.0, 256).unwrap();
    let p = estimate_density(&s, &grid);
    let total: f64 = p.masses.iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
    let mean = p.mean(&grid);
    assert!(mean.abs() < 0.05, "mean {mean}");
    let var: f64 = p.masses.iter().zip(&grid.points_z).map(|(m, z)| m * (z - mean).powi(2)).sum();
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
}

#[test]
fn constant_samples_peak_at_nearest_grid_point() {
    let grid = SampleGrid::uniform(0.0, 1.0, 11).unwrap();
    for (value, expected) in [(0.31, 3), (0.0, 0), (0.96, 10), (0.53, 5)] {
        let p = estimate_density(&sample(1, vec![value; 50]), &grid);
        let argmax = p.masses.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, expected, "value {value}");
    }
}
