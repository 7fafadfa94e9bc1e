//! Canonical sets of non-negative integers stored as sorted, disjoint,
//! non-adjacent closed intervals.

use std::fmt;

/// Closed integer interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interval {
    pub lo: u64,
    pub hi: u64,
}

impl Interval {
    pub fn new(lo: u64, hi: u64) -> Option<Self> {
        (lo <= hi).then_some(Self { lo, hi })
    }

    /// Number of integers in the interval.
    pub fn width(&self) -> u64 {
        self.hi - self.lo + 1
    }

    pub fn contains(&self, x: u64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

/// A set of relative distances. Adjacent intervals are always merged, so two
/// sets are equal iff their interval lists are equal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct DistanceSet {
    intervals: Vec<Interval>,
}

impl DistanceSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn range(lo: u64, hi: u64) -> Self {
        Self::from_intervals(Interval::new(lo, hi))
    }

    /// Normalizes an arbitrary collection of intervals (overlapping, adjacent,
    /// unsorted) into canonical form.
    pub fn from_intervals<I: IntoIterator<Item = Interval>>(iter: I) -> Self {
        let mut raw: Vec<Interval> = iter.into_iter().collect();
        raw.sort_unstable();
        let mut intervals: Vec<Interval> = Vec::with_capacity(raw.len());
        for iv in raw {
            match intervals.last_mut() {
                Some(last) if iv.lo <= last.hi.saturating_add(1) => {
                    last.hi = last.hi.max(iv.hi);
                }
                _ => intervals.push(iv),
            }
        }
        Self { intervals }
    }

    pub fn from_values<I: IntoIterator<Item = u64>>(iter: I) -> Self {
        Self::from_intervals(iter.into_iter().map(|x| Interval { lo: x, hi: x }))
    }

    /// Builds the set from a membership mask where `mask[x]` marks `x`.
    pub fn from_mask(mask: &[bool]) -> Self {
        let mut intervals = Vec::new();
        let mut start: Option<u64> = None;
        for (x, &on) in mask.iter().enumerate() {
            match (on, start) {
                (true, None) => start = Some(x as u64),
                (false, Some(lo)) => {
                    intervals.push(Interval { lo, hi: x as u64 - 1 });
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(lo) = start {
            intervals.push(Interval { lo, hi: mask.len() as u64 - 1 });
        }
        Self { intervals }
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Number of integers in the set.
    pub fn count(&self) -> u64 {
        self.intervals.iter().map(Interval::width).sum()
    }

    pub fn min(&self) -> Option<u64> {
        self.intervals.first().map(|iv| iv.lo)
    }

    pub fn max(&self) -> Option<u64> {
        self.intervals.last().map(|iv| iv.hi)
    }

    pub fn contains(&self, x: u64) -> bool {
        let idx = self.intervals.partition_point(|iv| iv.hi < x);
        self.intervals.get(idx).is_some_and(|iv| iv.contains(x))
    }

    /// Width of the widest interval, 0 for the empty set.
    pub fn largest_width(&self) -> u64 {
        self.intervals.iter().map(Interval::width).max().unwrap_or(0)
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::from_intervals(self.intervals.iter().chain(&other.intervals).copied())
    }

    pub fn intersection(&self, other: &Self) -> Self {
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < self.intervals.len() && j < other.intervals.len() {
            let (a, b) = (self.intervals[i], other.intervals[j]);
            if let Some(iv) = Interval::new(a.lo.max(b.lo), a.hi.min(b.hi)) {
                out.push(iv);
            }
            if a.hi < b.hi {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self::from_intervals(out)
    }

    /// `self \ other`.
    pub fn difference(&self, other: &Self) -> Self {
        let mut out = Vec::new();
        let mut j = 0;
        for iv in &self.intervals {
            let mut lo = iv.lo;
            let mut done = false;
            while j < other.intervals.len() && other.intervals[j].hi < lo {
                j += 1;
            }
            let mut k = j;
            while k < other.intervals.len() && other.intervals[k].lo <= iv.hi {
                let cut = other.intervals[k];
                if cut.lo > lo {
                    out.push(Interval { lo, hi: cut.lo - 1 });
                }
                if cut.hi >= iv.hi {
                    done = true;
                    break;
                }
                lo = cut.hi + 1;
                k += 1;
            }
            if !done {
                out.push(Interval { lo, hi: iv.hi });
            }
        }
        Self::from_intervals(out)
    }

    /// `[lo, hi] \ self`.
    pub fn complement_within(&self, lo: u64, hi: u64) -> Self {
        Self::range(lo, hi).difference(self)
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.intervals.iter().flat_map(|iv| iv.lo..=iv.hi)
    }
}

impl fmt::Display for DistanceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, iv) in self.intervals.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{iv}")?;
        }
        Ok(())
    }
}
