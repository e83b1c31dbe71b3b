//! Distribution-level outlier detection over per-module mode samples.
//!
//! Every window, the pooled mode statistics of all modules define a common
//! uniform grid. A Gaussian KDE per module is discretised on that grid, each
//! module's mean KL divergence to the others is accumulated over windows,
//! and the residual is the accumulated divergence above the least-deviant
//! module.

use log::{error, warn};
use serde::{Deserialize, Serialize};

use crate::error::{IscError, Result};
use crate::modes::ModeSample;

/// Floor applied to every discretised probability mass.
pub const MASS_FLOOR: f64 = 1e-12;
/// Lower bound on the KDE bandwidth.
pub const MIN_BANDWIDTH: f64 = 1e-6;
/// Lower bound on a calibrated threshold.
pub const MIN_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_GRID_POINTS: usize = 256;

/// Kernel contributions beyond this many bandwidths are dropped (`exp(-50)`).
const KERNEL_CUTOFF: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub points_z: Vec<f64>,
    pub spacing: f64,
}

impl SampleGrid {
    pub fn uniform(lo: f64, hi: f64, n_z: usize) -> Result<Self> {
        if n_z < 2 {
            return Err(IscError::InvalidConfig("grid needs at least two points".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(IscError::InvalidConfig(format!("invalid grid span [{lo}, {hi}]")));
        }
        let spacing = (hi - lo) / (n_z - 1) as f64;
        let mut points_z: Vec<f64> = (0..n_z).map(|i| lo + spacing * i as f64).collect();
        points_z[n_z - 1] = hi;
        Ok(SampleGrid { points_z, spacing })
    }

    /// Grid spanning the pooled min and max of all samples.
    ///
    /// A zero-width pool is widened by `MIN_BANDWIDTH` on each side; an empty
    /// pool gets the unit interval.
    pub fn from_samples(samples: &[ModeSample], n_z: usize) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for x in samples.iter().flat_map(|s| s.statistics.iter()) {
            lo = lo.min(*x);
            hi = hi.max(*x);
        }
        if !lo.is_finite() {
            return SampleGrid::uniform(0.0, 1.0, n_z);
        }
        if hi <= lo {
            return SampleGrid::uniform(lo - MIN_BANDWIDTH, hi + MIN_BANDWIDTH, n_z);
        }
        SampleGrid::uniform(lo, hi, n_z)
    }

    pub fn len(&self) -> usize {
        self.points_z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_z.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeDistribution {
    pub masses: Vec<f64>,
    pub module_index: usize,
}

impl ModeDistribution {
    pub fn uniform(n_z: usize, module_index: usize) -> Self {
        ModeDistribution { masses: vec![1.0 / n_z as f64; n_z], module_index }
    }

    /// Floor-and-normalise arbitrary non-negative weights.
    ///
    /// The result is the mixture `eps + (1 - n eps) w / sum(w)`, so it sums to one
    /// and no mass falls below the floor.
    pub fn from_weights(weights: &[f64], module_index: usize) -> Self {
        let n = weights.len();
        let total: f64 = weights.iter().filter(|w| w.is_finite() && **w > 0.0).sum();
        if !(total > 0.0) {
            return ModeDistribution::uniform(n, module_index);
        }
        let scale = (1.0 - n as f64 * MASS_FLOOR) / total;
        let masses = weights
            .iter()
            .map(|w| MASS_FLOOR + if w.is_finite() && *w > 0.0 { w * scale } else { 0.0 })
            .collect();
        ModeDistribution { masses, module_index }
    }

    /// Grid mean `sum z P(z)`.
    pub fn mean(&self, grid: &SampleGrid) -> f64 {
        self.masses.iter().zip(&grid.points_z).map(|(p, z)| p * z).sum()
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 min(sigma, IQR / 1.34) N^(-1/5)`.
///
/// A zero IQR falls back to the standard deviation; the result is floored at
/// `MIN_BANDWIDTH`.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let spread = if iqr > 0.0 { sigma.min(iqr / 1.34) } else { sigma };
    (0.9 * spread * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

fn std_normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

/// Gaussian KDE on the grid, converted to floored, normalised masses.
///
/// The mass of grid point `z` is the KDE probability of its cell
/// `[z - spacing/2, z + spacing/2]`, which tracks `density(z) * spacing` for
/// smooth estimates and stays exact when the bandwidth is below the spacing.
/// The two end cells absorb the tails beyond the grid.
pub fn estimate_density(samples: &ModeSample, grid: &SampleGrid) -> ModeDistribution {
    let mut sorted: Vec<f64> = samples.statistics.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        warn!("module {}: no mode samples, using a uniform distribution", samples.module_index);
        return ModeDistribution::uniform(grid.len(), samples.module_index);
    }
    sorted.sort_by(f64::total_cmp);
    let h = silverman_bandwidth(&sorted);
    let n = sorted.len() as f64;
    let reach = KERNEL_CUTOFF * h;

    // KDE cumulative distribution at the interior cell edges.
    let half = 0.5 * grid.spacing;
    let mut start = 0;
    let cdf: Vec<f64> = grid.points_z[..grid.len() - 1]
        .iter()
        .map(|z| {
            let edge = z + half;
            while start < sorted.len() && sorted[start] < edge - reach {
                start += 1;
            }
            let mut acc = start as f64;
            for &x in &sorted[start..] {
                if x > edge + reach {
                    break;
                }
                acc += std_normal_cdf((edge - x) / h);
            }
            acc / n
        })
        .collect();

    let mut weights = Vec::with_capacity(grid.len());
    let mut prev = 0.0;
    for c in &cdf {
        weights.push((c - prev).max(0.0));
        prev = *c;
    }
    weights.push((1.0 - prev).max(0.0));
    ModeDistribution::from_weights(&weights, samples.module_index)
}

/// `sum_z p(z) ln(p(z) / q(z))`.
pub fn kld(p: &ModeDistribution, q: &ModeDistribution) -> Result<f64> {
    if p.masses.len() != q.masses.len() {
        return Err(IscError::GridMismatch { left: p.masses.len(), right: q.masses.len() });
    }
    Ok(p.masses.iter().zip(&q.masses).map(|(a, b)| a * (a / b).ln()).sum())
}

/// Mean divergence of module `i` from every module, itself included.
pub fn average_distance(distributions: &[ModeDistribution], i: usize) -> Result<f64> {
    let m = distributions.len();
    let mut total = 0.0;
    for q in distributions {
        total += kld(&distributions[i], q)?;
    }
    Ok(total / m as f64)
}

/// Average distances for all modules.
pub fn average_distances(distributions: &[ModeDistribution]) -> Result<Vec<f64>> {
    (0..distributions.len()).map(|i| average_distance(distributions, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    /// 1-based module index.
    pub module_index: usize,
    pub window: usize,
    pub time: f64,
    pub r_value: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualState {
    /// One `m`-vector of average distances per processed window.
    pub xi_history: Vec<Vec<f64>>,
    pub cumulative_xi: Vec<f64>,
    pub residual_r: Vec<f64>,
    pub threshold_j: f64,
    pub flags: Vec<Flag>,
}

impl ResidualState {
    pub fn new(modules: usize, threshold_j: f64) -> Self {
        ResidualState {
            xi_history: Vec::new(),
            cumulative_xi: vec![0.0; modules],
            residual_r: vec![0.0; modules],
            threshold_j,
            flags: Vec::new(),
        }
    }

    pub fn windows(&self) -> usize {
        self.xi_history.len()
    }

    pub fn is_flagged(&self, module_index: usize) -> bool {
        self.flags.iter().any(|f| f.module_index == module_index)
    }
}

/// Accumulate one window of average distances and recompute the residual.
pub fn update_residual(state: &mut ResidualState, xi_k: &[f64]) -> Result<()> {
    if xi_k.len() != state.cumulative_xi.len() {
        return Err(IscError::LengthMismatch { expected: state.cumulative_xi.len(), got: xi_k.len() });
    }
    let clamped: Vec<f64> = xi_k.iter().map(|x| if *x > 0.0 { *x } else { 0.0 }).collect();
    for (acc, x) in state.cumulative_xi.iter_mut().zip(&clamped) {
        *acc += x;
    }
    let min = state.cumulative_xi.iter().copied().fold(f64::INFINITY, f64::min);
    state.residual_r = state.cumulative_xi.iter().map(|x| x - min).collect();
    state.xi_history.push(clamped);
    Ok(())
}

/// Latch a flag on every unflagged module whose residual reaches the threshold.
pub fn check_threshold(state: &mut ResidualState, window: usize, time: f64) -> Vec<Flag> {
    let mut fresh = Vec::new();
    for (i, r) in state.residual_r.iter().enumerate() {
        let module_index = i + 1;
        if *r >= state.threshold_j && !state.is_flagged(module_index) {
            fresh.push(Flag { module_index, window, time, r_value: *r, threshold: state.threshold_j });
        }
    }
    state.flags.extend(fresh.iter().cloned());
    fresh
}

/// `safety_factor * max_w max_i r^i_w` over a fault-free residual trace.
pub fn calibrate_threshold(nominal_residual_trace: &[Vec<f64>], safety_factor: f64) -> Result<f64> {
    if nominal_residual_trace.is_empty() {
        return Err(IscError::InsufficientData("empty calibration trace".into()));
    }
    let peak = nominal_residual_trace
        .iter()
        .flat_map(|r| r.iter().copied())
        .fold(0.0f64, f64::max);
    let j = safety_factor * peak;
    if !(j >= MIN_THRESHOLD) {
        error!("calibrated threshold {j:.3e} below floor, using {MIN_THRESHOLD:e}");
        return Ok(MIN_THRESHOLD);
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: Vec<f64>) -> ModeSample {
        ModeSample { module_index: 1, statistics: v }
    }

    fn dist(m: &[f64]) -> ModeDistribution {
        ModeDistribution { masses: m.to_vec(), module_index: 1 }
    }

    #[test]
    fn grid_spans_pooled_range() {
        let s = [sample(vec![0.2, 0.5]), sample(vec![1.5, -0.3])];
        let g = SampleGrid::from_samples(&s, 256).unwrap();
        assert_eq!(g.len(), 256);
        assert_eq!(g.points_z[0], -0.3);
        assert_eq!(g.points_z[255], 1.5);
        assert!(g.points_z.windows(2).all(|w| w[1] > w[0]));
        assert!(SampleGrid::uniform(0.0, 1.0, 1).is_err());
        let flat = SampleGrid::from_samples(&[sample(vec![2.0, 2.0])], 8).unwrap();
        assert!(flat.points_z[0] < 2.0 && flat.points_z[7] > 2.0);
    }

    #[test]
    fn constant_samples_peak_at_nearest_grid_point() {
        let g = SampleGrid::uniform(0.0, 1.0, 11).unwrap();
        let d = estimate_density(&sample(vec![0.42; 50]), &g);
        let argmax = d.masses.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 4);
        assert!((d.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sample_is_uniform() {
        let g = SampleGrid::uniform(0.0, 1.0, 4).unwrap();
        let d = estimate_density(&sample(vec![]), &g);
        assert_eq!(d.masses, vec![0.25; 4]);
    }

    #[test]
    fn masses_floored_and_normalised() {
        let g = SampleGrid::uniform(-50.0, 50.0, 256).unwrap();
        let d = estimate_density(&sample(vec![0.0, 0.1, -0.1]), &g);
        assert!((d.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.masses.iter().all(|m| *m >= MASS_FLOOR));
    }

    #[test]
    fn silverman_matches_hand_value() {
        // 1..=5: sigma = sqrt(2.5), IQR = 2, min = 2 / 1.34.
        let h = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let expected = 0.9 * (2.0f64 / 1.34).min(2.5f64.sqrt()) * 5f64.powf(-0.2);
        assert!((h - expected).abs() < 1e-12);
        assert_eq!(silverman_bandwidth(&[3.0; 10]), MIN_BANDWIDTH);
    }

    #[test]
    fn kld_hand_computed_pair() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.9, 0.1]);
        let fwd = kld(&p, &q).unwrap();
        let rev = kld(&q, &p).unwrap();
        let fwd_hand = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let rev_hand = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((fwd - fwd_hand).abs() < 1e-15);
        assert!((rev - rev_hand).abs() < 1e-15);
        assert!((fwd - 0.5108).abs() < 1e-4);
        assert!((rev - 0.3681).abs() < 1e-4);
        assert_eq!(kld(&p, &p).unwrap(), 0.0);
        assert!(matches!(kld(&p, &dist(&[1.0])), Err(IscError::GridMismatch { .. })));
    }

    #[test]
    fn average_distance_examples() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.9, 0.1]);
        let xi = average_distance(&[p.clone(), q.clone()], 0).unwrap();
        assert!((xi - 0.2554).abs() < 1e-4);
        let same = average_distances(&[p.clone(), p.clone(), p]).unwrap();
        assert!(same.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn residual_examples() {
        let mut s = ResidualState::new(3, 1.0);
        update_residual(&mut s, &[0.1, 0.2, 0.3]).unwrap();
        for (r, e) in s.residual_r.iter().zip([0.0, 0.1, 0.2]) {
            assert!((r - e).abs() < 1e-12);
        }

        let mut two = ResidualState::new(2, 1.0);
        update_residual(&mut two, &[0.0, 0.1]).unwrap();
        update_residual(&mut two, &[0.0, 0.1]).unwrap();
        assert_eq!(two.cumulative_xi, vec![0.0, 0.2]);
        assert_eq!(two.residual_r, vec![0.0, 0.2]);

        let mut flat = ResidualState::new(4, 1.0);
        for _ in 0..10 {
            update_residual(&mut flat, &[0.3; 4]).unwrap();
        }
        assert!(flat.residual_r.iter().all(|r| *r == 0.0));

        let mut neg = ResidualState::new(2, 1.0);
        update_residual(&mut neg, &[-1e-13, 0.1]).unwrap();
        assert_eq!(neg.cumulative_xi[0], 0.0);
        assert!(update_residual(&mut neg, &[0.1]).is_err());
    }

    #[test]
    fn threshold_flags_latch() {
        let mut s = ResidualState::new(3, 2.0);
        assert!(check_threshold(&mut s, 0, 1.0).is_empty());
        s.residual_r = vec![3.0, 0.0, 0.0];
        let f = check_threshold(&mut s, 1, 2.0);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].module_index, 1);
        s.residual_r = vec![0.5, 0.0, 0.0];
        assert!(check_threshold(&mut s, 2, 3.0).is_empty());
        assert!(s.is_flagged(1));
        s.residual_r = vec![5.0, 0.0, 0.0];
        assert!(check_threshold(&mut s, 3, 4.0).is_empty());
        assert_eq!(s.flags.len(), 1);
    }

    #[test]
    fn calibration_examples() {
        let j = calibrate_threshold(&[vec![0.0, 0.1], vec![0.2, 0.0]], 5.0).unwrap();
        assert!((j - 1.0).abs() < 1e-12);
        assert_eq!(calibrate_threshold(&[vec![0.0, 0.0]], 5.0).unwrap(), MIN_THRESHOLD);
        assert!(calibrate_threshold(&[], 5.0).is_err());
        let trace = vec![vec![0.0, 0.03, 0.01], vec![0.02, 0.0, 0.07], vec![0.0, 0.05, 0.04]];
        let j = calibrate_threshold(&trace, 5.0).unwrap();
        assert!(trace.iter().flatten().all(|r| *r < j));
    }
}
