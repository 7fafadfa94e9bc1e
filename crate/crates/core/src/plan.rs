//! Positional plans: which assigned index each physical token receives.
//!
//! The EndPrompt plan keeps a context of `a` tokens at indices `0..a` and
//! places a terminal segment of `b` tokens at `L-b..L`, so a physical sequence
//! of `a + b` tokens realizes relative distances up to `L - 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intervals::DistanceSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("segment lengths must be positive (a={a}, b={b})")]
    EmptySegment { a: u64, b: u64 },
    #[error("segments overlap: a + b = {} exceeds target length {target_len}", .a + .b)]
    Overlap { a: u64, b: u64, target_len: u64 },
    #[error("invalid interpolation scale {0}: must be at least 1")]
    InvalidScale(f64),
    #[error("empty sequence")]
    EmptySequence,
    #[error("cannot fit {n} tokens into a window of {target_len} positions")]
    Capacity { n: u64, target_len: u64 },
    #[error("need between 2 and {n} chunks, got {chunks}")]
    InvalidChunks { n: u64, chunks: usize },
    #[error("gap condition L - a - b >= max(a, b) not met: {target_len} - {a} - {b} < {}", .a.max(.b))]
    GapConditionNotMet { a: u64, b: u64, target_len: u64 },
    #[error("unknown plan kind '{0}'")]
    UnknownKind(String),
    #[error("plan position {position} exceeds target length {target_len}")]
    OutOfRange { position: u64, target_len: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    #[serde(rename = "endprompt")]
    EndPrompt,
    Pose,
    Full,
}

impl PlanKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanKind::EndPrompt => "endprompt",
            PlanKind::Pose => "pose",
            PlanKind::Full => "full",
        }
    }
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanKind {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "endprompt" => Ok(PlanKind::EndPrompt),
            "pose" => Ok(PlanKind::Pose),
            "full" => Ok(PlanKind::Full),
            other => Err(PlanError::UnknownKind(other.to_string())),
        }
    }
}

pub(crate) fn check_scale(s: f64) -> Result<(), PlanError> {
    if s.is_finite() && s >= 1.0 {
        Ok(())
    } else {
        Err(PlanError::InvalidScale(s))
    }
}

/// Segment lengths, target window and interpolation scale of a two-segment plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanSpec {
    /// Context (first segment) length.
    pub a: u64,
    /// End prompt (terminal segment) length.
    pub b: u64,
    /// Target context length `L`.
    pub target_len: u64,
    pub scale: f64,
}

impl PlanSpec {
    pub fn new(a: u64, b: u64, target_len: u64, scale: f64) -> Result<Self, PlanError> {
        let spec = Self { a, b, target_len, scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.a == 0 || self.b == 0 {
            return Err(PlanError::EmptySegment { a: self.a, b: self.b });
        }
        if self.a + self.b > self.target_len {
            return Err(PlanError::Overlap { a: self.a, b: self.b, target_len: self.target_len });
        }
        check_scale(self.scale)
    }

    /// `L - a - b >= max(a, b)`, the condition under which the unobserved
    /// distances form a single interval.
    pub fn gap_condition(&self) -> bool {
        self.target_len >= self.a + self.b + self.a.max(self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionPlan {
    pub kind: PlanKind,
    /// Assigned integer index of every physical token.
    pub assigned: Vec<u64>,
    pub scale: f64,
    /// Length of the trailing prompt segment, 0 when the plan has none.
    pub prompt_len: u64,
}

impl PositionPlan {
    pub fn len(&self) -> usize {
        self.assigned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assigned.is_empty()
    }

    pub fn context_len(&self) -> u64 {
        self.assigned.len() as u64 - self.prompt_len
    }

    /// Indices after interpolation, `assigned / scale`.
    pub fn effective_positions(&self) -> Vec<f64> {
        effective_positions(&self.assigned, self.scale)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.assigned.windows(2).all(|w| w[0] < w[1])
    }
}

pub fn effective_positions(assigned: &[u64], scale: f64) -> Vec<f64> {
    assigned.iter().map(|&p| p as f64 / scale).collect()
}

pub fn endprompt_plan(spec: &PlanSpec) -> Result<PositionPlan, PlanError> {
    spec.validate()?;
    let PlanSpec { a, b, target_len, scale } = *spec;
    let assigned = (0..a).chain(target_len - b..target_len).collect();
    Ok(PositionPlan { kind: PlanKind::EndPrompt, assigned, scale, prompt_len: b })
}

/// Contiguous positions `0..n`.
pub fn full_plan(n: u64, scale: f64) -> Result<PositionPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::EmptySequence);
    }
    check_scale(scale)?;
    Ok(PositionPlan { kind: PlanKind::Full, assigned: (0..n).collect(), scale, prompt_len: 0 })
}

/// Chunk lengths for `n` tokens split into `chunks` near-equal parts; the
/// first `n % chunks` chunks get one extra token.
pub fn chunk_lengths(n: u64, chunks: usize) -> Vec<u64> {
    let c = chunks as u64;
    (0..c).map(|i| n / c + u64::from(i < n % c)).collect()
}

/// Chunked plan in the style of positional skip-wise training: chunk `c`
/// is shifted by the cumulative sum of `skips[..c]`. `skips` holds one
/// increment per chunk boundary (`chunks - 1` entries).
pub fn pose_plan_with_skips(
    n: u64,
    chunks: usize,
    target_len: u64,
    scale: f64,
    skips: &[u64],
) -> Result<PositionPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::EmptySequence);
    }
    if chunks < 2 || chunks as u64 > n || skips.len() != chunks - 1 {
        return Err(PlanError::InvalidChunks { n, chunks });
    }
    check_scale(scale)?;
    let total_skip: u64 = skips.iter().sum();
    if n + total_skip > target_len {
        return Err(PlanError::Capacity { n: n + total_skip, target_len });
    }
    let mut assigned = Vec::with_capacity(n as usize);
    let mut next = 0u64;
    for (c, len) in chunk_lengths(n, chunks).into_iter().enumerate() {
        if c > 0 {
            next += skips[c - 1];
        }
        assigned.extend(next..next + len);
        next += len;
    }
    Ok(PositionPlan { kind: PlanKind::Pose, assigned, scale, prompt_len: 0 })
}

/// Draws the skip increments for [`pose_plan_with_skips`]: `chunks - 1`
/// cumulative offsets uniform on `[0, L - n]`, sorted, then differenced.
pub fn draw_pose_skips<R: Rng + ?Sized>(
    n: u64,
    chunks: usize,
    target_len: u64,
    rng: &mut R,
) -> Result<Vec<u64>, PlanError> {
    if target_len < n {
        return Err(PlanError::Capacity { n, target_len });
    }
    if chunks < 2 {
        return Err(PlanError::InvalidChunks { n, chunks });
    }
    let budget = target_len - n;
    let mut cumulative: Vec<u64> = (1..chunks).map(|_| rng.random_range(0..=budget)).collect();
    cumulative.sort_unstable();
    let mut prev = 0;
    Ok(cumulative
        .into_iter()
        .map(|u| {
            let inc = u - prev;
            prev = u;
            inc
        })
        .collect())
}

pub fn pose_plan<R: Rng + ?Sized>(
    n: u64,
    chunks: usize,
    target_len: u64,
    scale: f64,
    rng: &mut R,
) -> Result<PositionPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::EmptySequence);
    }
    if chunks < 2 || chunks as u64 > n {
        return Err(PlanError::InvalidChunks { n, chunks });
    }
    let skips = draw_pose_skips(n, chunks, target_len, rng)?;
    pose_plan_with_skips(n, chunks, target_len, scale, &skips)
}

/// All causal relative distances `assigned[l] - assigned[r]`, `r <= l`, by
/// enumerating every pair.
pub fn observed_distances_bruteforce(plan: &PositionPlan) -> DistanceSet {
    let Some(&last) = plan.assigned.last() else {
        return DistanceSet::empty();
    };
    let mut mask = vec![false; last as usize + 1];
    for (l, &pl) in plan.assigned.iter().enumerate() {
        for &pr in &plan.assigned[..=l] {
            if let Some(d) = pl.checked_sub(pr) {
                mask[d as usize] = true;
            }
        }
    }
    DistanceSet::from_mask(&mask)
}

/// `[0, a-1] U [0, b-1] U [L-a-b+1, L-1]`.
pub fn observed_distances_closed_form(spec: &PlanSpec) -> Result<DistanceSet, PlanError> {
    spec.validate()?;
    let PlanSpec { a, b, target_len: l, .. } = *spec;
    Ok(DistanceSet::range(0, a - 1)
        .union(&DistanceSet::range(0, b - 1))
        .union(&DistanceSet::range(l - a - b + 1, l - 1)))
}

/// `[max(a, b), L - a - b]`; only defined under the gap condition.
pub fn gap_distances(spec: &PlanSpec) -> Result<DistanceSet, PlanError> {
    spec.validate()?;
    if !spec.gap_condition() {
        return Err(PlanError::GapConditionNotMet { a: spec.a, b: spec.b, target_len: spec.target_len });
    }
    Ok(DistanceSet::range(spec.a.max(spec.b), spec.target_len - spec.a - spec.b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub kind: PlanKind,
    pub a: u64,
    pub b: u64,
    pub target_len: u64,
    pub scale: f64,
    pub observed: DistanceSet,
    pub gap: DistanceSet,
    pub coverage_fraction: f64,
    pub largest_gap_width: u64,
}

impl CoverageReport {
    /// Single-line record:
    /// `kind=.. a=.. b=.. L=.. s=.. coverage_fraction=0.562500 largest_gap_width=.. intervals=lo-hi,...`
    pub fn to_record(&self) -> String {
        format!(
            "kind={} a={} b={} L={} s={} coverage_fraction={:.6} largest_gap_width={} intervals={}",
            self.kind,
            self.a,
            self.b,
            self.target_len,
            self.scale,
            self.coverage_fraction,
            self.largest_gap_width,
            self.observed
        )
    }
}

pub fn coverage_report(plan: &PositionPlan, target_len: u64) -> Result<CoverageReport, PlanError> {
    if target_len == 0 {
        return Err(PlanError::EmptySequence);
    }
    if let Some(&position) = plan.assigned.iter().find(|&&p| p >= target_len) {
        return Err(PlanError::OutOfRange { position, target_len });
    }
    let window = DistanceSet::range(0, target_len - 1);
    let observed = observed_distances_bruteforce(plan).intersection(&window);
    let gap = window.difference(&observed);
    Ok(CoverageReport {
        kind: plan.kind,
        a: plan.context_len(),
        b: plan.prompt_len,
        target_len,
        scale: plan.scale,
        coverage_fraction: observed.count() as f64 / target_len as f64,
        largest_gap_width: gap.largest_width(),
        observed,
        gap,
    })
}
