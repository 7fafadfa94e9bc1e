//! Rotary position embedding score mathematics in double precision.
//!
//! A head vector of dimension `D` is viewed as `D/2` complex numbers built from
//! adjacent coordinate pairs `(v[2j], v[2j+1])`. Rotation by an effective
//! position `p` multiplies subspace `j` by `exp(i * p * theta_j)`, so the
//! query/key dot product only depends on the difference of positions. That
//! dependence is exposed directly through [`decompose`] and [`score_spectral`].

use std::f64::consts::PI;

use thiserror::Error;

/// Default rotary base.
pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RopeError {
    #[error("invalid head dimension {0}: must be even and at least 2")]
    InvalidDimension(usize),
    #[error("invalid rotary base {0}: must be finite and greater than 1")]
    InvalidBase(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid interpolation scale {0}: must be at least 1")]
    InvalidScale(f64),
}

/// Per-subspace angular frequencies `theta_j = base^(-2j/dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularSpectrum {
    dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl AngularSpectrum {
    pub fn new(dim: usize, base: f64) -> Result<Self, RopeError> {
        if dim < 2 || dim % 2 != 0 {
            return Err(RopeError::InvalidDimension(dim));
        }
        // base <= 1 would break the strictly decreasing (0, 1] frequency ladder
        if !(base.is_finite() && base > 1.0) {
            return Err(RopeError::InvalidBase(base));
        }
        let freqs = (0..dim / 2)
            .map(|j| base.powf(-2.0 * j as f64 / dim as f64))
            .collect();
        Ok(Self { dim, base, freqs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Number of complex subspaces, `dim / 2`.
    pub fn subspaces(&self) -> usize {
        self.freqs.len()
    }

    /// The largest frequency, which is always `theta_0 = 1`.
    pub fn theta_max(&self) -> f64 {
        self.freqs[0]
    }

    fn check_len(&self, got: usize) -> Result<(), RopeError> {
        if got != self.dim {
            return Err(RopeError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }
}

/// Shorthand for [`AngularSpectrum::new`].
pub fn frequencies(dim: usize, base: f64) -> Result<AngularSpectrum, RopeError> {
    AngularSpectrum::new(dim, base)
}

/// Query or key content for a single attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadVector(pub Vec<f64>);

impl HeadVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &HeadVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Rotates `values` in place by `p_eff`, pairing coordinates `(2j, 2j+1)`.
///
/// `values.len()` must equal `2 * freqs.len()`; this is the unchecked kernel
/// used by the model on raw slices.
#[inline]
pub fn rotate_in_place(values: &mut [f64], p_eff: f64, freqs: &[f64]) {
    debug_assert_eq!(values.len(), 2 * freqs.len());
    for (pair, &theta) in values.chunks_exact_mut(2).zip(freqs) {
        let (sin, cos) = (p_eff * theta).sin_cos();
        let (re, im) = (pair[0], pair[1]);
        pair[0] = re * cos - im * sin;
        pair[1] = re * sin + im * cos;
    }
}

pub fn rotate(v: &HeadVector, p_eff: f64, spec: &AngularSpectrum) -> Result<HeadVector, RopeError> {
    spec.check_len(v.len())?;
    let mut out = v.0.clone();
    rotate_in_place(&mut out, p_eff, &spec.freqs);
    Ok(HeadVector(out))
}

/// Unnormalized attention score `<R(p_m) q, R(p_n) k>`.
pub fn score_direct(
    q: &HeadVector,
    k: &HeadVector,
    p_m: f64,
    p_n: f64,
    spec: &AngularSpectrum,
) -> Result<f64, RopeError> {
    spec.check_len(q.len())?;
    spec.check_len(k.len())?;
    let q_rot = rotate(q, p_m, spec)?;
    let k_rot = rotate(k, p_n, spec)?;
    Ok(q_rot.dot(&k_rot))
}

/// Polar form of the per-subspace content products `q_j * conj(k_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceDecomposition {
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
}

impl SubspaceDecomposition {
    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn amplitude_sum(&self) -> f64 {
        self.amplitudes.iter().sum()
    }
}

/// `arg(z)` mapped into `(-pi, pi]`, with `arg(0) = 0`.
pub(crate) fn canonical_phase(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let phase = im.atan2(re);
    if phase <= -PI {
        PI
    } else {
        phase
    }
}

pub fn decompose(
    q: &HeadVector,
    k: &HeadVector,
    spec: &AngularSpectrum,
) -> Result<SubspaceDecomposition, RopeError> {
    spec.check_len(q.len())?;
    spec.check_len(k.len())?;
    let mut amplitudes = Vec::with_capacity(spec.subspaces());
    let mut phases = Vec::with_capacity(spec.subspaces());
    for (qp, kp) in q.0.chunks_exact(2).zip(k.0.chunks_exact(2)) {
        // (q0 + i q1) * (k0 - i k1)
        let re = qp[0] * kp[0] + qp[1] * kp[1];
        let im = qp[1] * kp[0] - qp[0] * kp[1];
        let amp = re.hypot(im);
        amplitudes.push(amp);
        phases.push(if amp == 0.0 { 0.0 } else { canonical_phase(re, im) });
    }
    Ok(SubspaceDecomposition { amplitudes, phases })
}

/// `sum_j a_j cos(d * theta_j / s + phi_j)`; `s = 1` gives the plain RoPE score.
pub fn score_spectral(
    dec: &SubspaceDecomposition,
    d: f64,
    spec: &AngularSpectrum,
    s: f64,
) -> Result<f64, RopeError> {
    if !(s >= 1.0) {
        return Err(RopeError::InvalidScale(s));
    }
    if dec.amplitudes.len() != spec.subspaces() || dec.phases.len() != spec.subspaces() {
        return Err(RopeError::DimensionMismatch {
            expected: spec.subspaces(),
            got: dec.amplitudes.len(),
        });
    }
    Ok(dec
        .amplitudes
        .iter()
        .zip(&dec.phases)
        .zip(&spec.freqs)
        .map(|((a, phi), theta)| a * (d / s * theta + phi).cos())
        .sum())
}
