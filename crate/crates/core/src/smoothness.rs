//! Smoothness certification for interpolated RoPE score polynomials.
//!
//! A score `S(d) = sum_j a_j cos(w_j d + phi_j)` with `w_j = theta_j / s`
//! satisfies `|S'(d)| <= sum_j a_j w_j <= w_max * sum_j a_j` and likewise
//! `|S''(d)| <= w_max^2 * sum_j a_j` for every real `d`. [`bernstein_check`]
//! estimates the suprema on a grid and compares them with these bounds.

use thiserror::Error;

use crate::plan::{gap_distances, observed_distances_closed_form, PlanError, PlanSpec};
use crate::report::fmt_sig;
use crate::rope::{AngularSpectrum, SubspaceDecomposition};

/// Additive slack on the certified comparisons.
pub const CERT_TOL: f64 = 1e-9;

/// Grid points between exact trigonometric re-synchronizations.
const RESYNC_EVERY: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothnessError {
    #[error("invalid interpolation scale {0}: must be at least 1")]
    InvalidScale(f64),
    #[error("decomposition has {got} subspaces, spectrum has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unsupported derivative order {0}")]
    UnsupportedOrder(u8),
    #[error("polynomial has no components, so its maximum frequency is undefined")]
    UndefinedFrequency,
    #[error("empty domain [{lo}, {hi}]")]
    EmptyDomain { lo: f64, hi: f64 },
    #[error("invalid component: amplitude {amplitude}, frequency {freq}")]
    InvalidComponent { amplitude: f64, freq: f64 },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub amplitude: f64,
    pub freq: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrigPolynomial {
    components: Vec<Component>,
}

impl TrigPolynomial {
    pub fn new(components: Vec<Component>) -> Result<Self, SmoothnessError> {
        for c in &components {
            if !(c.amplitude >= 0.0 && c.freq > 0.0 && c.amplitude.is_finite() && c.freq.is_finite()) {
                return Err(SmoothnessError::InvalidComponent { amplitude: c.amplitude, freq: c.freq });
            }
        }
        Ok(Self { components })
    }

    /// Components `(a_j, theta_j / s, phi_j)`.
    pub fn from_decomposition(
        dec: &SubspaceDecomposition,
        spec: &AngularSpectrum,
        s: f64,
    ) -> Result<Self, SmoothnessError> {
        if !(s.is_finite() && s >= 1.0) {
            return Err(SmoothnessError::InvalidScale(s));
        }
        if dec.len() != spec.subspaces() || dec.phases.len() != spec.subspaces() {
            return Err(SmoothnessError::LengthMismatch { expected: spec.subspaces(), got: dec.len() });
        }
        Self::new(
            dec.amplitudes
                .iter()
                .zip(&dec.phases)
                .zip(spec.freqs())
                .map(|((&amplitude, &phase), &theta)| Component { amplitude, freq: theta / s, phase })
                .collect(),
        )
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn omega_max(&self) -> Option<f64> {
        self.components.iter().map(|c| c.freq).reduce(f64::max)
    }

    pub fn amplitude_sum(&self) -> f64 {
        self.components.iter().map(|c| c.amplitude).sum()
    }

    pub fn eval(&self, d: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.amplitude * (c.freq * d + c.phase).cos())
            .sum()
    }

    /// Derivative of order 0, 1 or 2 with respect to the distance.
    pub fn derivative(&self, d: f64, order: u8) -> Result<f64, SmoothnessError> {
        let value = match order {
            0 => self.eval(d),
            1 => -self
                .components
                .iter()
                .map(|c| c.amplitude * c.freq * (c.freq * d + c.phase).sin())
                .sum::<f64>(),
            2 => -self
                .components
                .iter()
                .map(|c| c.amplitude * c.freq * c.freq * (c.freq * d + c.phase).cos())
                .sum::<f64>(),
            other => return Err(SmoothnessError::UnsupportedOrder(other)),
        };
        Ok(value)
    }

    fn grid_step(&self, lo: f64, hi: f64) -> Result<f64, SmoothnessError> {
        if !(lo < hi) {
            return Err(SmoothnessError::EmptyDomain { lo, hi });
        }
        let omega = self.omega_max().ok_or(SmoothnessError::UndefinedFrequency)?;
        Ok((0.1 / omega).min((hi - lo) / 1000.0))
    }

    /// Grid maxima of `|S|`, `|S'|`, `|S''|` over `[lo, hi]`, plus the grid
    /// point of each maximum.
    fn grid_sups(&self, lo: f64, hi: f64, step: f64) -> ([f64; 3], [f64; 3]) {
        let n = ((hi - lo) / step).ceil() as usize;
        let m = self.components.len();
        // each component tracked as a unit phasor (cos, sin), advanced by a
        // fixed rotation and re-seeded exactly every RESYNC_EVERY points
        let mut phasor = vec![(0.0f64, 0.0f64); m];
        let advance: Vec<(f64, f64)> =
            self.components.iter().map(|c| (c.freq * step).sin_cos()).map(|(s, c)| (c, s)).collect();
        let mut best = [0.0f64; 3];
        let mut arg = [lo; 3];
        for i in 0..=n {
            let d = if i == n { hi } else { lo + i as f64 * step };
            if i % RESYNC_EVERY == 0 || i == n {
                for (p, c) in phasor.iter_mut().zip(&self.components) {
                    let (s, co) = (c.freq * d + c.phase).sin_cos();
                    *p = (co, s);
                }
            }
            let (mut v0, mut v1, mut v2) = (0.0, 0.0, 0.0);
            for (p, c) in phasor.iter().zip(&self.components) {
                let a = c.amplitude;
                v0 += a * p.0;
                v1 -= a * c.freq * p.1;
                v2 -= a * c.freq * c.freq * p.0;
            }
            for (k, v) in [v0, v1, v2].into_iter().enumerate() {
                if v.abs() > best[k] {
                    best[k] = v.abs();
                    arg[k] = d;
                }
            }
            for (p, r) in phasor.iter_mut().zip(&advance) {
                *p = (p.0 * r.0 - p.1 * r.1, p.0 * r.1 + p.1 * r.0);
            }
        }
        (best, arg)
    }

    fn refine(&self, center: f64, step: f64, lo: f64, hi: f64, order: u8, start: f64) -> f64 {
        let fine = step / 10.0;
        let mut best = start;
        for i in -10i32..=10 {
            let d = (center + i as f64 * fine).clamp(lo, hi);
            let v = self.derivative(d, order).expect("order checked").abs();
            best = best.max(v);
        }
        best
    }

    /// Grid estimate of `sup |S^(order)|` over `[lo, hi]`, refined at 10x
    /// resolution around the grid argmax.
    pub fn sup_estimate(&self, lo: f64, hi: f64, order: u8) -> Result<f64, SmoothnessError> {
        if order > 2 {
            return Err(SmoothnessError::UnsupportedOrder(order));
        }
        let step = self.grid_step(lo, hi)?;
        let (best, arg) = self.grid_sups(lo, hi, step);
        let k = order as usize;
        Ok(self.refine(arg[k], step, lo, hi, order, best[k]))
    }
}

/// Outcome of a smoothness certification on one polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub amp_sum: f64,
    pub omega_max: f64,
    pub sup_s: f64,
    pub sup_ds: f64,
    pub sup_d2s: f64,
    /// `omega_max * amp_sum`.
    pub bound1: f64,
    /// `omega_max^2 * amp_sum`.
    pub bound2: f64,
    pub pass1: bool,
    pub pass2: bool,
    /// Informational: the bound with the grid `sup |S|` in place of `amp_sum`.
    pub sup_form_bound1: f64,
    pub sup_form_bound2: f64,
    pub sup_form_pass1: bool,
    pub sup_form_pass2: bool,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str =
        "amp_sum,omega_max,sup_S,sup_dS,sup_d2S,bound1,bound2,pass1,pass2";

    pub fn passed(&self) -> bool {
        self.pass1 && self.pass2
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            fmt_sig(self.amp_sum, 9),
            fmt_sig(self.omega_max, 9),
            fmt_sig(self.sup_s, 9),
            fmt_sig(self.sup_ds, 9),
            fmt_sig(self.sup_d2s, 9),
            fmt_sig(self.bound1, 9),
            fmt_sig(self.bound2, 9),
            self.pass1,
            self.pass2
        )
    }
}

pub fn bernstein_check(poly: &TrigPolynomial, lo: f64, hi: f64) -> Result<BoundReport, SmoothnessError> {
    let step = poly.grid_step(lo, hi)?;
    let omega_max = poly.omega_max().ok_or(SmoothnessError::UndefinedFrequency)?;
    let amp_sum = poly.amplitude_sum();
    let (best, arg) = poly.grid_sups(lo, hi, step);
    let sup_s = poly.refine(arg[0], step, lo, hi, 0, best[0]);
    let sup_ds = poly.refine(arg[1], step, lo, hi, 1, best[1]);
    let sup_d2s = poly.refine(arg[2], step, lo, hi, 2, best[2]);
    let bound1 = omega_max * amp_sum;
    let bound2 = omega_max * omega_max * amp_sum;
    Ok(BoundReport {
        amp_sum,
        omega_max,
        sup_s,
        sup_ds,
        sup_d2s,
        bound1,
        bound2,
        pass1: sup_ds <= bound1 + CERT_TOL,
        pass2: sup_d2s <= bound2 + CERT_TOL,
        sup_form_bound1: omega_max * sup_s,
        sup_form_bound2: omega_max * omega_max * sup_s,
        sup_form_pass1: sup_ds <= omega_max * sup_s + CERT_TOL,
        sup_form_pass2: sup_d2s <= omega_max * omega_max * sup_s + CERT_TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceRegion {
    Observed,
    Gap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub distance: f64,
    pub value: f64,
    pub slope: f64,
    pub region: DistanceRegion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapProfile {
    pub points: Vec<ProfilePoint>,
    /// Maximum `|S'|` over the gap interval (grid estimate).
    pub gap_max_slope: f64,
}

/// Samples `S` and `S'` across the observed and gap distances of a plan.
///
/// Half of the samples (rounded down) go to the gap interval, the rest are
/// spread over the observed intervals in proportion to their widths.
pub fn gap_stability_profile(
    dec: &SubspaceDecomposition,
    spec: &AngularSpectrum,
    s: f64,
    plan: &PlanSpec,
    samples: usize,
) -> Result<GapProfile, SmoothnessError> {
    if samples < 2 {
        return Err(SmoothnessError::TooFewSamples(samples));
    }
    let poly = TrigPolynomial::from_decomposition(dec, spec, s)?;
    let gap = gap_distances(plan)?;
    let observed = observed_distances_closed_form(plan)?;
    let gap_iv = gap.intervals()[0];

    let gap_samples = samples / 2;
    let obs_samples = samples - gap_samples;
    let mut points = Vec::with_capacity(samples);

    let total_obs = observed.count() as f64;
    let obs_ivs = observed.intervals();
    let mut assigned = 0;
    for (idx, iv) in obs_ivs.iter().enumerate() {
        let share = if idx + 1 == obs_ivs.len() {
            obs_samples - assigned
        } else {
            ((iv.width() as f64 / total_obs) * obs_samples as f64).round() as usize
        };
        let share = share.min(obs_samples - assigned);
        assigned += share;
        push_stratum(&poly, iv.lo as f64, iv.hi as f64, share, DistanceRegion::Observed, &mut points);
    }
    push_stratum(&poly, gap_iv.lo as f64, gap_iv.hi as f64, gap_samples, DistanceRegion::Gap, &mut points);
    points.sort_by(|x, y| x.distance.total_cmp(&y.distance));

    let gap_max_slope = if gap_iv.lo < gap_iv.hi {
        poly.sup_estimate(gap_iv.lo as f64, gap_iv.hi as f64, 1)?
    } else {
        poly.derivative(gap_iv.lo as f64, 1)?.abs()
    };
    Ok(GapProfile { points, gap_max_slope })
}

fn push_stratum(
    poly: &TrigPolynomial,
    lo: f64,
    hi: f64,
    count: usize,
    region: DistanceRegion,
    out: &mut Vec<ProfilePoint>,
) {
    for i in 0..count {
        let distance = if count == 1 { lo } else { lo + (hi - lo) * i as f64 / (count - 1) as f64 };
        out.push(ProfilePoint {
            distance,
            value: poly.eval(distance),
            slope: poly.derivative(distance, 1).expect("order 1"),
            region,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::frequencies;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn single(a: f64, w: f64, phi: f64) -> TrigPolynomial {
        TrigPolynomial::new(vec![Component { amplitude: a, freq: w, phase: phi }]).unwrap()
    }

    fn random_poly(rng: &mut ChaCha8Rng, m: usize) -> TrigPolynomial {
        TrigPolynomial::new(
            (0..m)
                .map(|_| Component {
                    amplitude: rng.random_range(0.0..2.0),
                    freq: rng.random_range(0.01..1.5),
                    phase: rng.random_range(-PI..PI),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn from_decomposition_examples() {
        let spec2 = frequencies(2, 10_000.0).unwrap();
        let dec = SubspaceDecomposition { amplitudes: vec![1.0], phases: vec![0.0] };
        let p = TrigPolynomial::from_decomposition(&dec, &spec2, 4.0).unwrap();
        assert_eq!(p.components(), &[Component { amplitude: 1.0, freq: 0.25, phase: 0.0 }]);
        let p = TrigPolynomial::from_decomposition(&dec, &spec2, 1.0).unwrap();
        assert_eq!(p.components()[0].freq, 1.0);

        let spec4 = frequencies(4, 10_000.0).unwrap();
        let dec = SubspaceDecomposition { amplitudes: vec![1.0, 1.0], phases: vec![0.0, 0.0] };
        let p = TrigPolynomial::from_decomposition(&dec, &spec4, 8.0).unwrap();
        assert_eq!(p.components()[0].freq, 0.125);
        assert!((p.components()[1].freq - 0.00125).abs() < 1e-17);
        assert_eq!(
            TrigPolynomial::from_decomposition(&dec, &spec4, 0.9),
            Err(SmoothnessError::InvalidScale(0.9))
        );
    }

    #[test]
    fn derivative_examples() {
        let p = single(1.0, 0.25, 0.0);
        assert_eq!(p.eval(0.0), 1.0);
        assert_eq!(p.derivative(0.0, 1).unwrap(), 0.0);
        assert_eq!(p.derivative(0.0, 2).unwrap(), -0.0625);
        assert!((single(1.0, 1.0, 0.0).derivative(PI / 2.0, 1).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(p.derivative(0.0, 3), Err(SmoothnessError::UnsupportedOrder(3)));
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let m = rng.random_range(1..9);
            let p = random_poly(&mut rng, m);
            let d = rng.random_range(-50.0..50.0);
            let fd1 = (p.eval(d + h) - p.eval(d - h)) / (2.0 * h);
            let fd2 = (p.derivative(d + h, 1).unwrap() - p.derivative(d - h, 1).unwrap()) / (2.0 * h);
            assert!((fd1 - p.derivative(d, 1).unwrap()).abs() <= 1e-6);
            assert!((fd2 - p.derivative(d, 2).unwrap()).abs() <= 1e-6);
        }
    }

    #[test]
    fn sup_examples() {
        let p = single(1.0, 0.25, 0.0);
        assert!((p.sup_estimate(0.0, 100.0, 1).unwrap() - 0.25).abs() < 1e-4);
        assert!((single(1.0, 1.0, 0.0).sup_estimate(0.0, 10.0, 0).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(
            TrigPolynomial::default().sup_estimate(0.0, 1.0, 1),
            Err(SmoothnessError::UndefinedFrequency)
        );
        assert!(matches!(p.sup_estimate(3.0, 3.0, 1), Err(SmoothnessError::EmptyDomain { .. })));
    }

    #[test]
    fn sup_matches_dense_grid() {
        let p = TrigPolynomial::new(vec![
            Component { amplitude: 1.3, freq: 0.7, phase: 0.4 },
            Component { amplitude: 0.6, freq: 0.11, phase: -1.9 },
        ])
        .unwrap();
        let (lo, hi) = (0.0, 200.0);
        for order in 0..=2u8 {
            let n = 1_000_000;
            let dense = (0..=n)
                .map(|i| p.derivative(lo + (hi - lo) * i as f64 / n as f64, order).unwrap().abs())
                .fold(0.0, f64::max);
            let est = p.sup_estimate(lo, hi, order).unwrap();
            assert!((est - dense).abs() <= 1e-4, "order {order}: {est} vs {dense}");
        }
    }

    #[test]
    fn phasor_recurrence_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_poly(&mut rng, 12);
        let step = p.grid_step(0.0, 4095.0).unwrap();
        let (best, _) = p.grid_sups(0.0, 4095.0, step);
        let n = (4095.0 / step).ceil() as usize;
        let mut direct = [0.0f64; 3];
        for i in 0..=n {
            let d = if i == n { 4095.0 } else { i as f64 * step };
            for k in 0..3 {
                direct[k] = direct[k].max(p.derivative(d, k as u8).unwrap().abs());
            }
        }
        for k in 0..3 {
            assert!((best[k] - direct[k]).abs() <= 1e-10 * (1.0 + direct[k]));
        }
    }

    #[test]
    fn bernstein_equality_case() {
        let r = bernstein_check(&single(1.0, 0.25, 0.0), 0.0, 100.0).unwrap();
        assert!((r.sup_ds - 0.25).abs() < 1e-6);
        assert_eq!(r.bound1, 0.25);
        assert!(r.pass1 && r.pass2);
    }

    #[test]
    fn bernstein_zero_amplitudes() {
        let p = TrigPolynomial::new(vec![
            Component { amplitude: 0.0, freq: 1.0, phase: 0.3 },
            Component { amplitude: 0.0, freq: 0.1, phase: 0.0 },
        ])
        .unwrap();
        let r = bernstein_check(&p, 0.0, 50.0).unwrap();
        assert_eq!((r.sup_s, r.sup_ds, r.sup_d2s), (0.0, 0.0, 0.0));
        assert!(r.passed());
    }

    #[test]
    fn csv_row_layout() {
        let r = bernstein_check(&single(1.0, 0.25, 0.0), 0.0, 100.0).unwrap();
        let row = r.to_csv_row();
        assert_eq!(row.split(',').count(), 9);
        assert!(row.starts_with("1,0.25,1,"));
        assert!(row.ends_with(",true,true"));
    }

    #[test]
    fn bounds_shrink_with_scale() {
        let spec = frequencies(16, 10_000.0).unwrap();
        let dec = SubspaceDecomposition { amplitudes: vec![0.5; 8], phases: vec![0.1; 8] };
        let mut prev: Option<(f64, f64)> = None;
        for s in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let p = TrigPolynomial::from_decomposition(&dec, &spec, s).unwrap();
            let w = p.omega_max().unwrap();
            let (b1, b2) = (w * p.amplitude_sum(), w * w * p.amplitude_sum());
            if let Some((p1, p2)) = prev {
                assert!(b1 < p1 && b2 < p2);
            }
            prev = Some((b1, b2));
        }
    }

    #[test]
    fn gap_profile_single_component() {
        let spec = frequencies(2, 10_000.0).unwrap();
        let dec = SubspaceDecomposition { amplitudes: vec![1.0], phases: vec![0.0] };
        let plan = PlanSpec::new(4, 2, 16, 4.0).unwrap();
        let profile = gap_stability_profile(&dec, &spec, 4.0, &plan, 40).unwrap();
        assert_eq!(profile.points.len(), 40);
        // dense evaluation of 0.25 |sin(0.25 d)| on [4, 10]
        let n = 100_000;
        let dense = (0..=n)
            .map(|i| 0.25 * (0.25 * (4.0 + 6.0 * i as f64 / n as f64)).sin().abs())
            .fold(0.0, f64::max);
        assert!((profile.gap_max_slope - dense).abs() < 1e-6);
        assert!((profile.gap_max_slope - 0.25).abs() < 1e-3);
        let gap_points = profile.points.iter().filter(|p| p.region == DistanceRegion::Gap).count();
        assert_eq!(gap_points, 20);
        assert!(profile
            .points
            .iter()
            .filter(|p| p.region == DistanceRegion::Gap)
            .all(|p| (4.0..=10.0).contains(&p.distance)));
    }

    #[test]
    fn gap_profile_large_scale_is_flat() {
        let spec = frequencies(8, 10_000.0).unwrap();
        let dec = SubspaceDecomposition { amplitudes: vec![1.0, 0.5, 0.2, 0.1], phases: vec![0.3; 4] };
        let plan = PlanSpec::new(4, 2, 64, 1e6).unwrap();
        let profile = gap_stability_profile(&dec, &spec, 1e6, &plan, 10).unwrap();
        assert!(profile.gap_max_slope <= dec.amplitude_sum() / 1e6 + 1e-15);
        let bad = PlanSpec::new(4, 2, 9, 1.0).unwrap();
        assert!(matches!(
            gap_stability_profile(&dec, &spec, 1.0, &bad, 10),
            Err(SmoothnessError::Plan(PlanError::GapConditionNotMet { .. }))
        ));
    }
}
