//! Speed estimation from single-loop flow and occupancy.
//!
//! Occupancy is the fraction of a slot of `T` seconds during which the loop
//! is covered, so a slot with `N` vehicles of mean effective length `mu`
//! feet moving at a common speed `v` has `k = N * mu / (v * T)`. The
//! preliminary estimator inverts that relation; a volume-weighted
//! exponential filter then stabilises it in light traffic.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::exec::Exec;
use crate::io::{comment_pairs, expect_fields, for_each_record, parse_field, FormatError};
use crate::model::{fps_to_mph, mph_to_fps, DataGrid, DetectorRef, SpeedProvenance, VelocityField};
use crate::statkit::{loess_fit, percentile, LoessParams, StatError};

#[derive(Debug, Error)]
pub enum VelocityError {
    #[error("no free-flow speed for lane {lane} of a {total}-lane road")]
    OutOfDomain { lane: usize, total: usize },
    #[error("insufficient free-flow data: need {need} points, got {got}")]
    InsufficientFreeFlowData { need: usize, got: usize },
    #[error("occupancy is zero while {0} vehicles passed")]
    InconsistentSample(f64),
    #[error("no mean length for detector {0}")]
    MissingProfile(DetectorRef),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Free-flow speeds in mph by total lane count (2 to 5) and lane number,
/// lane 1 being the innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeFlowTable {
    columns: [Vec<f64>; 4],
    /// Per-station overrides, one speed per lane.
    pub overrides: BTreeMap<u32, Vec<f64>>,
}

impl Default for FreeFlowTable {
    fn default() -> Self {
        Self {
            columns: [
                vec![71.3, 65.8],
                vec![71.9, 69.7, 62.7],
                vec![74.8, 71.0, 67.4, 62.8],
                vec![76.5, 74.0, 72.0, 69.2, 64.5],
            ],
            overrides: BTreeMap::new(),
        }
    }
}

impl FreeFlowTable {
    pub fn lookup(&self, lane: usize, total_lanes: usize) -> Result<f64, VelocityError> {
        if !(2..=5).contains(&total_lanes) || lane == 0 || lane > total_lanes {
            return Err(VelocityError::OutOfDomain { lane, total: total_lanes });
        }
        Ok(self.columns[total_lanes - 2][lane - 1])
    }

    /// Speed for a detector. Station overrides win; otherwise roads outside
    /// the table's lane range use the nearest column.
    pub fn for_detector(&self, det: DetectorRef, station_lanes: usize) -> f64 {
        if let Some(v) = self.overrides.get(&det.station).and_then(|v| v.get(det.lane as usize - 1)) {
            return *v;
        }
        let total = station_lanes.clamp(2, 5);
        let lane = (det.lane as usize).min(total);
        self.columns[total - 2][lane - 1]
    }
}

pub fn lookup_free_flow(lane: usize, total_lanes: usize, table: &FreeFlowTable) -> Result<f64, VelocityError> {
    table.lookup(lane, total_lanes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitPolicy {
    #[default]
    FreeFlow,
    FirstObservation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Smoothing constant in vehicles per 5-minute slot.
    pub c: f64,
    pub init: InitPolicy,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { c: 50.0, init: InitPolicy::FreeFlow }
    }
}

impl FilterConfig {
    /// The constant scaled to a slot of `slot_seconds`.
    pub fn c_for_slot(&self, slot_seconds: u32) -> f64 {
        self.c * slot_seconds as f64 / 300.0
    }
}

/// `N / (N + C)`.
pub fn filter_weight(n: f64, c: f64) -> f64 {
    if n <= 0.0 {
        0.0
    } else {
        n / (n + c)
    }
}

/// Recursive volume-weighted smoothing of `(estimate, volume)` pairs for one
/// detector-day. Non-finite estimates get zero weight.
pub fn filter_velocity(stream: &[(f64, f64)], c: f64, init: InitPolicy, v_ff: f64) -> Vec<f64> {
    let mut prev = match init {
        InitPolicy::FreeFlow => v_ff,
        InitPolicy::FirstObservation => stream.iter().map(|s| s.0).find(|v| v.is_finite()).unwrap_or(v_ff),
    };
    stream
        .iter()
        .map(|&(v, n)| {
            if v.is_finite() {
                let w = filter_weight(n, c);
                prev = w * v + (1.0 - w) * prev;
            }
            prev
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preliminary {
    pub mph: f64,
    /// No vehicles passed; the speed is the free-flow value.
    pub no_traffic: bool,
}

/// `N * mu / (k * T)` converted to mph.
pub fn preliminary_velocity(n: f64, k: f64, mu_feet: f64, slot_seconds: f64, v_ff: f64) -> Result<Preliminary, VelocityError> {
    if n <= 0.0 {
        return Ok(Preliminary { mph: v_ff, no_traffic: true });
    }
    if k <= 0.0 {
        return Err(VelocityError::InconsistentSample(n));
    }
    Ok(Preliminary { mph: fps_to_mph(n * mu_feet / (k * slot_seconds)), no_traffic: false })
}

pub fn coifman_velocity(n: f64, k: f64, mu_feet: f64, slot_seconds: f64, alpha: f64, v_ff: f64) -> Result<f64, VelocityError> {
    let p = preliminary_velocity(n, k, mu_feet, slot_seconds, v_ff)?;
    Ok(if k >= alpha { p.mph } else { v_ff })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DowClasses {
    #[default]
    Separate,
    /// Monday to Friday share one stratum.
    Weekdays,
}

impl DowClasses {
    fn class(self, dow: u8) -> u8 {
        match self {
            DowClasses::Weekdays if (1..=5).contains(&dow) => 1,
            _ => dow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuConfig {
    pub percentile: f64,
    pub loess: LoessParams,
    pub dow: DowClasses,
    pub min_points: usize,
}

impl Default for MuConfig {
    fn default() -> Self {
        Self { percentile: 0.6, loess: LoessParams::default(), dow: DowClasses::Separate, min_points: 20 }
    }
}

/// Fitted mean effective length over the slots of a day.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanLengthCurve {
    pub mu: Vec<f64>,
    /// Slots without a single free-flow point.
    pub extrapolated: Vec<bool>,
    /// Occupancy percentile separating free flow from congestion.
    pub alpha: f64,
}

/// One stratum's observations as `(slot, N, k)`.
pub type SlotObservation = (usize, f64, f64);

/// Points `(slot, v_FF * k * T / N)` in feet from slots with `k < alpha` and
/// `N > 0`. Slots with zero occupancy carry no length information.
pub fn free_flow_points(obs: &[SlotObservation], alpha: f64, v_ff_mph: f64, slot_seconds: f64) -> Vec<(f64, f64)> {
    let v = mph_to_fps(v_ff_mph);
    let mut pts: Vec<(f64, f64)> = obs
        .iter()
        .filter(|&&(_, n, k)| k < alpha && n > 0.0 && k > 0.0)
        .map(|&(t, n, k)| (t as f64, v * k * slot_seconds / n))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts
}

/// Mean effective length for one stratum: the occupancy percentile, the
/// free-flow length points below it, and a loess curve through them.
pub fn fit_mean_length(
    obs: &[SlotObservation],
    slots: usize,
    v_ff_mph: f64,
    slot_seconds: f64,
    cfg: &MuConfig,
) -> Result<MeanLengthCurve, VelocityError> {
    let occ: Vec<f64> = obs.iter().map(|o| o.2).collect();
    if occ.is_empty() {
        return Err(VelocityError::InsufficientFreeFlowData { need: cfg.min_points, got: 0 });
    }
    let alpha = percentile(&occ, cfg.percentile)?;
    let pts = free_flow_points(obs, alpha, v_ff_mph, slot_seconds);
    if pts.len() < cfg.min_points.max(cfg.loess.degree + 1) {
        return Err(VelocityError::InsufficientFreeFlowData { need: cfg.min_points, got: pts.len() });
    }
    let xs: Vec<f64> = (0..slots).map(|t| t as f64).collect();
    let fit = loess_fit(&pts, cfg.loess, &xs)?;
    let mut covered = vec![false; slots];
    for p in &pts {
        covered[p.0 as usize] = true;
    }
    let floor = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).max(1.0);
    Ok(MeanLengthCurve {
        mu: fit.y.iter().map(|&m| if m.is_finite() { m.max(floor) } else { floor }).collect(),
        extrapolated: covered.iter().map(|c| !c).collect(),
        alpha,
    })
}

/// Mean effective length keyed by (detector, day of week), 0 = Sunday.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanLengthProfile {
    pub slot_seconds: u32,
    pub slots: usize,
    curves: BTreeMap<(DetectorRef, u8), MeanLengthCurve>,
}

impl MeanLengthProfile {
    pub fn new(slot_seconds: u32) -> Self {
        Self { slot_seconds, slots: (86_400 / slot_seconds) as usize, curves: BTreeMap::new() }
    }

    pub fn insert(&mut self, det: DetectorRef, dow: u8, curve: MeanLengthCurve) {
        self.curves.insert((det, dow), curve);
    }

    pub fn curve(&self, det: DetectorRef, dow: u8) -> Option<&MeanLengthCurve> {
        self.curves.get(&(det, dow))
    }

    pub fn get(&self, det: DetectorRef, dow: u8, slot: usize) -> Option<f64> {
        self.curve(det, dow).and_then(|c| c.mu.get(slot).copied())
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let mut w = io::BufWriter::new(w);
        writeln!(w, "# mean-length slot_seconds={}", self.slot_seconds)?;
        writeln!(w, "station,lane,dow,slot,mu_feet,extrapolated")?;
        for ((det, dow), c) in &self.curves {
            for t in 0..c.mu.len() {
                writeln!(w, "{},{},{},{},{},{}", det.station, det.lane, dow, t, c.mu[t], c.extrapolated[t] as u8)?;
            }
        }
        for ((det, dow), c) in &self.curves {
            writeln!(w, "# alpha station={} lane={} dow={} value={}", det.station, det.lane, dow, c.alpha)?;
        }
        w.flush()
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, VelocityError> {
        let mut slot_seconds = 300u32;
        let mut alphas: BTreeMap<(DetectorRef, u8), f64> = BTreeMap::new();
        let mut rows: BTreeMap<(DetectorRef, u8), Vec<(usize, f64, bool)>> = BTreeMap::new();
        for_each_record(
            r,
            |c| {
                let kv: BTreeMap<&str, &str> = comment_pairs(c).collect();
                if c.starts_with("mean-length") {
                    if let Some(s) = kv.get("slot_seconds").and_then(|s| s.parse().ok()) {
                        slot_seconds = s;
                    }
                } else if c.starts_with("alpha") {
                    let p = |k: &str| kv.get(k).and_then(|v| v.parse::<f64>().ok());
                    if let (Some(s), Some(l), Some(d), Some(v)) = (p("station"), p("lane"), p("dow"), p("value")) {
                        alphas.insert((DetectorRef::new(s as u32, l as u16), d as u8), v);
                    }
                }
            },
            |line, f| {
                expect_fields(line, f, 6)?;
                let det = DetectorRef::new(parse_field(line, f, 0, "station")?, parse_field(line, f, 1, "lane")?);
                let dow: u8 = parse_field(line, f, 2, "dow")?;
                let slot: usize = parse_field(line, f, 3, "slot")?;
                let mu: f64 = parse_field(line, f, 4, "mu_feet")?;
                let ext: u8 = parse_field(line, f, 5, "extrapolated")?;
                rows.entry((det, dow)).or_default().push((slot, mu, ext == 1));
                Ok(())
            },
        )?;
        let mut p = MeanLengthProfile::new(slot_seconds);
        for (key, mut v) in rows {
            v.sort_by_key(|r| r.0);
            let curve = MeanLengthCurve {
                mu: v.iter().map(|r| r.1).collect(),
                extrapolated: v.iter().map(|r| r.2).collect(),
                alpha: alphas.get(&key).copied().unwrap_or(f64::NAN),
            };
            p.curves.insert(key, curve);
        }
        Ok(p)
    }
}

/// Observations of one detector on the given days.
fn stratum_observations(grid: &DataGrid, det: DetectorRef, days: &[usize]) -> Vec<SlotObservation> {
    let mut v = Vec::with_capacity(days.len() * grid.slots_per_day());
    for &d in days {
        for t in 0..grid.slots_per_day() {
            let c = grid.get(d, t, det);
            if c.has_value() {
                v.push((t, c.flow, c.occupancy));
            }
        }
    }
    v
}

/// Fits a curve for every detector and day of week. A stratum with too few
/// free-flow points falls back to the detector's fit over all days; a
/// detector without any usable fit takes the corridor median curve.
pub fn fit_profile(grid: &DataGrid, table: &FreeFlowTable, cfg: &MuConfig, exec: Exec) -> Result<MeanLengthProfile, VelocityError> {
    let dets = grid.detectors();
    let slot_s = grid.slot_seconds() as f64;
    let slots = grid.slots_per_day();
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for d in 0..grid.days() {
        by_class.entry(cfg.dow.class(grid.day_of_week(d))).or_default().push(d);
    }
    let all_days: Vec<usize> = (0..grid.days()).collect();
    let fitted = exec.map_slice(&dets, |&det| {
        let v_ff = table.for_detector(det, grid.lanes(det.station as usize));
        let pooled = fit_mean_length(&stratum_observations(grid, det, &all_days), slots, v_ff, slot_s, cfg).ok();
        let per_class: BTreeMap<u8, MeanLengthCurve> = by_class
            .iter()
            .filter_map(|(&cls, days)| {
                fit_mean_length(&stratum_observations(grid, det, days), slots, v_ff, slot_s, cfg)
                    .ok()
                    .map(|c| (cls, c))
            })
            .collect();
        (pooled, per_class)
    });

    let fallback = corridor_median_curve(fitted.iter().filter_map(|f| f.0.as_ref()), slots);
    let mut profile = MeanLengthProfile::new(grid.slot_seconds());
    for (det, (pooled, per_class)) in dets.into_iter().zip(fitted) {
        let base = match pooled.or_else(|| fallback.clone()) {
            Some(c) => c,
            None => return Err(VelocityError::InsufficientFreeFlowData { need: cfg.min_points, got: 0 }),
        };
        for dow in 0..7u8 {
            let c = per_class.get(&cfg.dow.class(dow)).unwrap_or(&base).clone();
            profile.insert(det, dow, c);
        }
    }
    Ok(profile)
}

fn corridor_median_curve<'a>(curves: impl Iterator<Item = &'a MeanLengthCurve>, slots: usize) -> Option<MeanLengthCurve> {
    let curves: Vec<&MeanLengthCurve> = curves.collect();
    if curves.is_empty() {
        return None;
    }
    let col = |f: &dyn Fn(&MeanLengthCurve) -> f64| {
        let v: Vec<f64> = curves.iter().map(|c| f(c)).collect();
        crate::statkit::median(&v).unwrap_or(f64::NAN)
    };
    Some(MeanLengthCurve {
        mu: (0..slots).map(|t| col(&|c| c.mu[t])).collect(),
        extrapolated: vec![true; slots],
        alpha: col(&|c| c.alpha),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    #[default]
    Filtered,
    Preliminary,
    Coifman,
}

impl Estimator {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "filtered" => Self::Filtered,
            "preliminary" => Self::Preliminary,
            "coifman" => Self::Coifman,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VelocityConfig {
    pub filter: FilterConfig,
    pub estimator: Estimator,
}

/// Speed series for one detector-day.
pub fn estimate_series(
    grid: &DataGrid,
    day: usize,
    det: DetectorRef,
    curve: &MeanLengthCurve,
    v_ff: f64,
    cfg: &VelocityConfig,
) -> Vec<(f64, SpeedProvenance)> {
    let slot_s = grid.slot_seconds() as f64;
    let series = grid.series(day, det);
    let base = match cfg.estimator {
        Estimator::Filtered => SpeedProvenance::Filtered,
        _ => SpeedProvenance::Preliminary,
    };
    let raw: Vec<(f64, f64)> = series
        .iter()
        .enumerate()
        .map(|(t, c)| {
            let mu = curve.mu[t];
            let v = match cfg.estimator {
                Estimator::Coifman => coifman_velocity(c.flow, c.occupancy, mu, slot_s, curve.alpha, v_ff).ok(),
                _ => preliminary_velocity(c.flow, c.occupancy, mu, slot_s, v_ff).ok().map(|p| p.mph),
            };
            (v.unwrap_or(f64::NAN), c.flow)
        })
        .collect();
    let speeds: Vec<f64> = match cfg.estimator {
        Estimator::Filtered => filter_velocity(&raw, cfg.filter.c_for_slot(grid.slot_seconds()), cfg.filter.init, v_ff),
        _ => {
            let mut last = v_ff;
            raw.iter()
                .map(|&(v, _)| {
                    if v.is_finite() {
                        last = v;
                    }
                    last
                })
                .collect()
        }
    };
    speeds
        .into_iter()
        .zip(&series)
        .map(|(v, c)| (v, if c.source.is_imputed() { SpeedProvenance::Imputed } else { base }))
        .collect()
}

/// Speed field for a complete grid: profile lookup, preliminary estimate,
/// then the configured smoothing, per detector-day.
pub fn estimate_field(
    grid: &DataGrid,
    profile: &MeanLengthProfile,
    table: &FreeFlowTable,
    cfg: &VelocityConfig,
    exec: Exec,
) -> Result<VelocityField, VelocityError> {
    let dets = grid.detectors();
    for &det in &dets {
        for dow in 0..7 {
            if profile.curve(det, dow).is_none_or(|c| c.mu.len() != grid.slots_per_day()) {
                return Err(VelocityError::MissingProfile(det));
            }
        }
    }
    let nd = dets.len();
    let series = exec.map_range(grid.days() * nd, |i| {
        let (d, det) = (i / nd, dets[i % nd]);
        let curve = profile.curve(det, grid.day_of_week(d)).expect("checked above");
        let v_ff = table.for_detector(det, grid.lanes(det.station as usize));
        estimate_series(grid, d, det, curve, v_ff, cfg)
    });
    let mut field = VelocityField::like_grid(grid);
    for (i, s) in series.iter().enumerate() {
        field.set_series(i / nd, dets[i % nd], s);
    }
    Ok(field)
}

pub fn write_field<W: Write>(field: &VelocityField, w: W) -> io::Result<()> {
    let mut w = io::BufWriter::with_capacity(1 << 20, w);
    writeln!(
        w,
        "# velocity origin_epoch={} days={} slot_seconds={} lanes={}",
        field.origin_epoch(),
        field.days(),
        field.slot_seconds(),
        field.lane_counts().iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    )?;
    writeln!(w, "day,slot,station,lane,mph,provenance")?;
    for d in 0..field.days() {
        for t in 0..field.slots_per_day() {
            for s in 1..=field.stations() {
                for l in 1..=field.lanes(s) {
                    let det = DetectorRef::new(s as u32, l as u16);
                    writeln!(w, "{},{},{},{},{},{}", d, t, s, l, field.get(d, t, det), field.provenance(d, t, det).as_str())?;
                }
            }
        }
    }
    w.flush()
}

pub fn read_field<R: BufRead>(r: R) -> Result<VelocityField, VelocityError> {
    let mut field: Option<VelocityField> = None;
    let mut meta: Option<(i64, usize, u32, Vec<usize>)> = None;
    let mut pending: Vec<(usize, usize, DetectorRef, f64, SpeedProvenance)> = Vec::new();
    for_each_record(
        r,
        |c| {
            if c.starts_with("velocity") {
                let kv: BTreeMap<&str, &str> = comment_pairs(c).collect();
                let get = |k: &str| kv.get(k).copied().unwrap_or("");
                meta = Some((
                    get("origin_epoch").parse().unwrap_or(0),
                    get("days").parse().unwrap_or(0),
                    get("slot_seconds").parse().unwrap_or(300),
                    get("lanes").split(',').filter_map(|x| x.parse().ok()).collect(),
                ));
            }
        },
        |line, f| {
            expect_fields(line, f, 6)?;
            let prov = SpeedProvenance::parse(f[5]).ok_or_else(|| FormatError::bad(line, "unknown provenance"))?;
            pending.push((
                parse_field(line, f, 0, "day")?,
                parse_field(line, f, 1, "slot")?,
                DetectorRef::new(parse_field(line, f, 2, "station")?, parse_field(line, f, 3, "lane")?),
                parse_field(line, f, 4, "mph")?,
                prov,
            ));
            Ok(())
        },
    )?;
    let (origin, days, slot, lanes) = meta.ok_or_else(|| FormatError::Invalid("velocity file lacks its shape comment".into()))?;
    let fld = field.get_or_insert(
        VelocityField::new(origin, days, slot, lanes).map_err(|e| FormatError::Invalid(e.to_string()))?,
    );
    for (d, t, det, v, p) in pending {
        if d >= fld.days() || t >= fld.slots_per_day() || det.station as usize > fld.stations() || det.lane as usize > fld.lanes(det.station as usize) {
            return Err(FormatError::Invalid("velocity row outside the declared shape".into()).into());
        }
        fld.set(d, t, det, v, p);
    }
    Ok(field.expect("inserted above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cell;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn table_values() {
        let t = FreeFlowTable::default();
        assert_eq!(t.lookup(1, 4).unwrap(), 74.8);
        assert_eq!(t.lookup(5, 5).unwrap(), 64.5);
        assert_eq!(t.lookup(2, 2).unwrap(), 65.8);
        assert!(matches!(t.lookup(3, 2), Err(VelocityError::OutOfDomain { .. })));
        for total in 2..=5 {
            for lane in 2..=total {
                assert!(t.lookup(lane, total).unwrap() < t.lookup(lane - 1, total).unwrap());
            }
        }
    }

    #[test]
    fn filter_weights() {
        assert!((filter_weight(100.0, 50.0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((filter_weight(10.0, 50.0) - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(filter_weight(0.0, 50.0), 0.0);
        assert_eq!(FilterConfig::default().c_for_slot(30), 5.0);
    }

    #[test]
    fn constant_input_is_fixed_point() {
        let s: Vec<(f64, f64)> = (0..50).map(|i| (64.0, (i % 7) as f64 * 10.0)).collect();
        assert!(filter_velocity(&s, 50.0, InitPolicy::FreeFlow, 64.0).iter().all(|&v| (v - 64.0).abs() < 1e-12));
        let out = filter_velocity(&[(f64::NAN, 10.0), (50.0, 50.0)], 50.0, InitPolicy::FreeFlow, 70.0);
        assert_eq!(out, vec![70.0, 60.0]);
        assert_eq!(filter_velocity(&[(50.0, 10.0)], 50.0, InitPolicy::FirstObservation, 70.0), vec![50.0]);
    }

    #[test]
    fn preliminary_examples() {
        let p = preliminary_velocity(50.0, 0.1, 20.0, 300.0, 65.0).unwrap();
        assert!((p.mph - 1000.0 / 30.0 * 3600.0 / 5280.0).abs() < 1e-9);
        assert!((p.mph - 22.727).abs() < 1e-3);
        // k built from a 60 mph common speed inverts exactly.
        let k = 40.0 * 17.0 / (mph_to_fps(60.0) * 300.0);
        assert!((preliminary_velocity(40.0, k, 17.0, 300.0, 65.0).unwrap().mph - 60.0).abs() < 1e-9);
        let p = preliminary_velocity(0.0, 0.0, 20.0, 300.0, 65.0).unwrap();
        assert_eq!((p.mph, p.no_traffic), (65.0, true));
        assert!(matches!(preliminary_velocity(3.0, 0.0, 20.0, 300.0, 65.0), Err(VelocityError::InconsistentSample(_))));
    }

    #[test]
    fn coifman_branches() {
        let prelim = |k| preliminary_velocity(30.0, k, 18.0, 300.0, 70.0).unwrap().mph;
        assert_eq!(coifman_velocity(30.0, 0.05, 18.0, 300.0, 0.10, 70.0).unwrap(), 70.0);
        assert_eq!(coifman_velocity(30.0, 0.15, 18.0, 300.0, 0.10, 70.0).unwrap(), prelim(0.15));
        assert_eq!(coifman_velocity(30.0, 0.10, 18.0, 300.0, 0.10, 70.0).unwrap(), prelim(0.10));
    }

    /// Slots of `days` days with `n(t)` vehicles of length `len` at speed `v(t)` mph.
    fn observations(days: usize, n: impl Fn(usize) -> f64, v: impl Fn(usize) -> f64, len: impl Fn(usize) -> f64) -> Vec<SlotObservation> {
        let mut o = Vec::new();
        for _ in 0..days {
            for t in 0..288 {
                let k = n(t) * len(t) / (mph_to_fps(v(t)) * 300.0);
                o.push((t, n(t), k));
            }
        }
        o
    }

    #[test]
    fn constant_length_recovered() {
        let congested = |t: usize| (180..216).contains(&t);
        let obs = observations(5, |t| if congested(t) { 60.0 } else { 20.0 + (t % 60) as f64 }, |t| if congested(t) { 25.0 } else { 70.0 }, |_| 18.0);
        let c = fit_mean_length(&obs, 288, 70.0, 300.0, &MuConfig::default()).unwrap();
        for t in 0..288 {
            if !c.extrapolated[t] {
                assert!((c.mu[t] - 18.0).abs() < 1e-6, "slot {t}: {}", c.mu[t]);
            }
        }
        assert!((180..216).all(|t| c.extrapolated[t]));
        assert!((c.mu[200] - 18.0).abs() < 1e-6);
    }

    #[test]
    fn points_stay_below_threshold() {
        let obs = observations(3, |t| (t % 30) as f64, |_| 65.0, |t| 16.0 + (t % 5) as f64);
        let alpha = percentile(&obs.iter().map(|o| o.2).collect::<Vec<_>>(), 0.6).unwrap();
        let pts = free_flow_points(&obs, alpha, 65.0, 300.0);
        let used: Vec<_> = obs.iter().filter(|o| o.2 < alpha && o.1 > 0.0).collect();
        assert_eq!(pts.len(), used.len());
        assert!(used.iter().all(|o| o.2 < alpha));
        assert!(matches!(
            fit_mean_length(&obs[..10], 288, 65.0, 300.0, &MuConfig::default()),
            Err(VelocityError::InsufficientFreeFlowData { .. })
        ));
    }

    #[test]
    fn variance_falls_with_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let car = Normal::new(17.5, 2.0).unwrap();
        let truck = Normal::new(35.0, 5.0).unwrap();
        let mut var_at = |n: usize| {
            let est: Vec<f64> = (0..400)
                .map(|_| {
                    let total: f64 = (0..n).map(|_| if rng.random::<f64>() < 0.1 { truck.sample(&mut rng) } else { car.sample(&mut rng) }).sum();
                    let k = total / (mph_to_fps(60.0) * 300.0);
                    preliminary_velocity(n as f64, k, 19.25, 300.0, 65.0).unwrap().mph
                })
                .collect();
            let m = est.iter().sum::<f64>() / est.len() as f64;
            est.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (est.len() - 1) as f64
        };
        assert!(var_at(100) < var_at(10));
    }

    #[test]
    fn field_on_constant_world() {
        let mut g = DataGrid::new(961_372_800, 2, 300, vec![2, 2]).unwrap();
        let table = FreeFlowTable::default();
        for (d, t, det) in g.iter().map(|(d, t, det, _)| (d, t, det)).collect::<Vec<_>>() {
            let v = table.for_detector(det, 2);
            let n = 30.0 + (t % 11) as f64;
            let c = Cell::observed(n, n * 18.0 / (mph_to_fps(v) * 300.0));
            g.set(d, t, det, c);
        }
        g.get_mut(1, 5, DetectorRef::new(2, 1)).source = crate::model::CellSource::Neighbor;
        let profile = fit_profile(&g, &table, &MuConfig { dow: DowClasses::Weekdays, ..Default::default() }, Exec::Parallel).unwrap();
        assert_eq!(profile.len(), 4 * 7);
        let f = estimate_field(&g, &profile, &table, &VelocityConfig::default(), Exec::Sequential).unwrap();
        for (d, t, det, _) in g.iter() {
            assert!((f.get(d, t, det) - table.for_detector(det, 2)).abs() < 1e-6);
        }
        assert_eq!(f.provenance(1, 5, DetectorRef::new(2, 1)), SpeedProvenance::Imputed);
        assert_eq!(f.provenance(1, 6, DetectorRef::new(2, 1)), SpeedProvenance::Filtered);
        let cf = estimate_field(&g, &profile, &table, &VelocityConfig { estimator: Estimator::Coifman, ..Default::default() }, Exec::Sequential).unwrap();
        assert_eq!(cf.provenance(0, 0, DetectorRef::new(1, 1)), SpeedProvenance::Preliminary);

        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        assert_eq!(read_field(buf.as_slice()).unwrap(), f);
        let mut buf = Vec::new();
        profile.write_csv(&mut buf).unwrap();
        assert_eq!(MeanLengthProfile::read_csv(buf.as_slice()).unwrap(), profile);
    }

    proptest! {
        #[test]
        fn filter_is_convex(stream in prop::collection::vec((20.0f64..90.0, 0.0f64..200.0), 1..100), init in 40.0f64..80.0) {
            let out = filter_velocity(&stream, 50.0, InitPolicy::FreeFlow, init);
            let (mut lo, mut hi) = (init, init);
            for (v, (x, _)) in out.iter().zip(&stream) {
                lo = lo.min(*x);
                hi = hi.max(*x);
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
            }
        }

        #[test]
        fn weight_monotone(a in 0.0f64..1e4, b in 0.0f64..1e4, c in 0.1f64..500.0) {
            let (wa, wb) = (filter_weight(a, c), filter_weight(b, c));
            prop_assert!((0.0..1.0).contains(&wa));
            if a < b { prop_assert!(wa < wb); }
        }

        #[test]
        fn preliminary_exact_for_common_speed(n in 1u32..200, len in 10.0f64..60.0, v in 5.0f64..90.0) {
            let k = n as f64 * len / (mph_to_fps(v) * 300.0);
            prop_assume!(k <= 1.0);
            let p = preliminary_velocity(n as f64, k, len, 300.0, 65.0).unwrap();
            prop_assert!((p.mph - v).abs() < 1e-9 * v);
        }
    }
}
