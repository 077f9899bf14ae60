//! Detector malfunction detection: the per-sample acceptance region and the
//! per-day statistics test with its real-time previous-day rule.

use std::io::{self, Write};

use thiserror::Error;

use crate::exec::Exec;
use crate::model::{Cell, DataGrid, DetectorRef, HealthFlag};
use crate::statkit::{entropy, histogram};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QualityError {
    #[error("every sample of the day is missing")]
    AllMissingDay,
    #[error("invalid acceptance region: {0}")]
    InvalidRegion(String),
}

/// Valid (flow, occupancy) pairs for one slot length. Flow is in vehicles
/// per slot, occupancy a fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceRegion {
    pub k_max: f64,
    pub q_max: f64,
    pub q0_max: f64,
    pub k0_max: f64,
    /// Vertices `(k, q)` of the lower boundary, sorted by `k`.
    pub lower: Vec<(f64, f64)>,
    pub upper: Vec<(f64, f64)>,
}

pub const DEFAULT_LANE_CAPACITY_VPH: f64 = 4000.0;

impl AcceptanceRegion {
    pub fn new(
        k_max: f64,
        q_max: f64,
        q0_max: f64,
        k0_max: f64,
        lower: Vec<(f64, f64)>,
        upper: Vec<(f64, f64)>,
    ) -> Result<Self, QualityError> {
        let bad = |m: &str| Err(QualityError::InvalidRegion(m.to_string()));
        if !(k_max > 0.0 && k_max <= 1.0) || q_max < 0.0 || q0_max < 0.0 || k0_max < 0.0 {
            return bad("bounds must be non-negative with 0 < k_max <= 1");
        }
        for v in [&lower, &upper] {
            if v.is_empty() || v[0].0 > 0.0 || v.windows(2).any(|w| w[1].0 <= w[0].0) {
                return bad("boundary vertices must start at k = 0 and increase in k");
            }
        }
        let r = Self { k_max, q_max, q0_max, k0_max, lower, upper };
        let mut ks: Vec<f64> = r.lower.iter().chain(&r.upper).map(|v| v.0).filter(|&k| k <= k_max).collect();
        ks.push(k_max);
        if ks.iter().any(|&k| r.q_lo(k) > r.q_hi(k) + 1e-12) {
            return bad("lower boundary exceeds upper boundary");
        }
        Ok(r)
    }

    /// Default region for a slot of `slot_seconds`: the upper boundary rises
    /// linearly from `(0, 1)` to lane capacity at occupancy 0.12, then stays
    /// flat; the lower boundary is zero.
    pub fn for_slot(slot_seconds: u32) -> Self {
        let cap = DEFAULT_LANE_CAPACITY_VPH * slot_seconds as f64 / 3600.0;
        Self::new(0.9, cap, 1.0, 0.05, vec![(0.0, 0.0)], vec![(0.0, 1.0), (0.12, cap)]).expect("default region is valid")
    }

    pub fn q_lo(&self, k: f64) -> f64 {
        piecewise(&self.lower, k)
    }

    pub fn q_hi(&self, k: f64) -> f64 {
        piecewise(&self.upper, k)
    }

    pub fn contains(&self, q: f64, k: f64) -> bool {
        if !(0.0..=self.k_max).contains(&k) || q < 0.0 || q > self.q_max {
            return false;
        }
        if q == 0.0 && k > self.k0_max {
            return false;
        }
        if k == 0.0 && q > self.q0_max {
            return false;
        }
        q >= self.q_lo(k) && q <= self.q_hi(k)
    }
}

fn piecewise(v: &[(f64, f64)], k: f64) -> f64 {
    if k <= v[0].0 {
        return v[0].1;
    }
    for w in v.windows(2) {
        let ((k0, q0), (k1, q1)) = (w[0], w[1]);
        if k <= k1 {
            return q0 + (q1 - q0) * (k - k0) / (k1 - k0);
        }
    }
    v[v.len() - 1].1
}

pub fn washington_check(flow: f64, occupancy: f64, region: &AcceptanceRegion) -> HealthFlag {
    if region.contains(flow, occupancy) {
        HealthFlag::Good
    } else {
        HealthFlag::Malfunctioning
    }
}

/// Daily statistics thresholds. The count thresholds are fractions of the
/// number of non-missing samples in the day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsaThresholds {
    pub s1_frac: f64,
    pub s2_frac: f64,
    pub s3_frac: f64,
    pub s4_low: f64,
    pub k_star: f64,
    pub bin_width: f64,
}

impl Default for DsaThresholds {
    fn default() -> Self {
        Self { s1_frac: 0.9, s2_frac: 0.02, s3_frac: 0.02, s4_low: 0.5, k_star: 0.35, bin_width: 0.01 }
    }
}

impl DsaThresholds {
    /// `(s1*, s2*, s3*)` as counts for a day with `n` samples.
    pub fn counts(&self, n: usize) -> (f64, f64, f64) {
        let n = n as f64;
        (self.s1_frac * n, self.s2_frac * n, self.s3_frac * n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Verdict {
    #[default]
    Good,
    Bad,
}

/// Why a day was judged bad: one bit per triggered score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Reason(u8);

impl Reason {
    pub const S1: Reason = Reason(1);
    pub const S2: Reason = Reason(2);
    pub const S3: Reason = Reason(4);
    pub const S4: Reason = Reason(8);
    pub const ALL_MISSING: Reason = Reason(16);

    pub fn contains(self, other: Reason) -> bool {
        self.0 & other.0 == other.0 && other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    fn add(&mut self, other: Reason) {
        self.0 |= other.0;
    }

    pub fn label(self) -> String {
        if self.is_empty() {
            return "ok".into();
        }
        let names = [(Self::S1, "s1"), (Self::S2, "s2"), (Self::S3, "s3"), (Self::S4, "s4"), (Self::ALL_MISSING, "all_missing")];
        names.iter().filter(|(r, _)| self.contains(*r)).map(|(_, n)| *n).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DailyScores {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub s4: f64,
    /// Non-missing samples the scores were computed on.
    pub samples: usize,
    pub verdict: Verdict,
    pub reason: Reason,
}

impl DailyScores {
    fn all_missing() -> Self {
        Self { verdict: Verdict::Bad, reason: Reason::ALL_MISSING, ..Default::default() }
    }
}

/// Scores one detector-day. Missing cells are skipped entirely.
pub fn daily_statistics(series: &[Cell], th: &DsaThresholds) -> Result<DailyScores, QualityError> {
    let present: Vec<&Cell> = series.iter().filter(|c| c.health != HealthFlag::Missing).collect();
    if present.is_empty() {
        return Err(QualityError::AllMissingDay);
    }
    let n = present.len();
    let s1 = present.iter().filter(|c| c.occupancy == 0.0).count();
    let s2 = present.iter().filter(|c| c.occupancy > 0.0 && c.flow == 0.0).count();
    let s3 = present.iter().filter(|c| c.occupancy > th.k_star).count();
    let occ: Vec<f64> = present.iter().map(|c| c.occupancy).collect();
    let masses = histogram(&occ, 0.0, 1.0, th.bin_width).map_err(|_| QualityError::AllMissingDay)?;
    let s4 = entropy(&masses).unwrap_or(0.0);

    let (s1m, s2m, s3m) = th.counts(n);
    let mut reason = Reason::default();
    if s1 as f64 > s1m {
        reason.add(Reason::S1);
    }
    if s2 as f64 > s2m {
        reason.add(Reason::S2);
    }
    if s3 as f64 > s3m {
        reason.add(Reason::S3);
    }
    if s4 < th.s4_low {
        reason.add(Reason::S4);
    }
    let verdict = if reason.is_empty() { Verdict::Good } else { Verdict::Bad };
    Ok(DailyScores { s1, s2, s3, s4, samples: n, verdict, reason })
}

/// Scores for every detector-day of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HealthTable {
    pub days: usize,
    pub detectors: Vec<DetectorRef>,
    scores: Vec<DailyScores>,
}

impl HealthTable {
    pub fn get(&self, day: usize, det: DetectorRef) -> &DailyScores {
        let j = self.detectors.binary_search(&det).expect("detector in table");
        &self.scores[day * self.detectors.len() + j]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, DetectorRef, &DailyScores)> + '_ {
        let nd = self.detectors.len();
        self.scores.iter().enumerate().map(move |(i, s)| (i / nd, self.detectors[i % nd], s))
    }

    pub fn bad_count(&self) -> usize {
        self.scores.iter().filter(|s| s.verdict == Verdict::Bad).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "station,lane,day_index,S1,S2,S3,S4,verdict,reason")?;
        for det in &self.detectors {
            for d in 0..self.days {
                let s = self.get(d, *det);
                let v = if s.verdict == Verdict::Good { "good" } else { "bad" };
                writeln!(w, "{},{},{},{},{},{},{:.6},{},{}", det.station, det.lane, d, s.s1, s.s2, s.s3, s.s4, v, s.reason.label())?;
            }
        }
        Ok(())
    }
}

/// Runs the daily statistics on every detector-day; an all-missing day
/// becomes a bad verdict with reason `all_missing`.
pub fn score_grid(grid: &DataGrid, th: &DsaThresholds, exec: Exec) -> HealthTable {
    let detectors = grid.detectors();
    let nd = detectors.len();
    let scores = exec.map_range(grid.days() * nd, |i| {
        let series = grid.series(i / nd, detectors[i % nd]);
        daily_statistics(&series, th).unwrap_or_else(|_| DailyScores::all_missing())
    });
    HealthTable { days: grid.days(), detectors, scores }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DetectionMode {
    /// Day `d` is judged by day `d - 1`'s verdict; day 0 by its own.
    Realtime,
    #[default]
    Offline,
}

/// Applies day verdicts and, if given, the per-sample acceptance region.
/// Missing cells stay missing.
pub fn assign_flags(grid: &DataGrid, table: &HealthTable, mode: DetectionMode, region: Option<&AcceptanceRegion>) -> DataGrid {
    let mut out = grid.clone();
    for d in 0..grid.days() {
        let judge = match mode {
            DetectionMode::Offline => d,
            DetectionMode::Realtime => d.saturating_sub(1),
        };
        for det in grid.detectors() {
            let bad_day = table.get(judge, det).verdict == Verdict::Bad;
            for t in 0..grid.slots_per_day() {
                let c = out.get_mut(d, t, det);
                if c.health == HealthFlag::Missing {
                    continue;
                }
                if bad_day {
                    c.health = HealthFlag::Malfunctioning;
                } else if let Some(r) = region {
                    if c.health == HealthFlag::Good {
                        c.health = washington_check(c.flow, c.occupancy, r);
                    }
                }
            }
        }
    }
    out
}
