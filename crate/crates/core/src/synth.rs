//! Synthetic corridor with known ground truth.
//!
//! Vehicles enter the first station of each lane as a Poisson (or regular)
//! stream and are replayed kinematically through a per-day speed field: each
//! segment is crossed at the mean speed of its two end stations, stepping at
//! base-interval boundaries. Each passage adds one vehicle and an on-time of
//! `length / speed` to the loop's sample. Free-flow speeds follow the lane
//! table; morning and evening congestion events with random onset, extent
//! and depth slow the field down. Detector faults are injected afterwards
//! and every sample keeps a truth label.

use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::config::{parse_clock, parse_knots, parse_list, ConfigError, KeyValues};
use crate::exec::Exec;
use crate::model::{mph_to_fps, CorridorLayout, DetectorRef, LoopSample, ModelError, SpeedProvenance, VelocityField, SECONDS_PER_DAY};
use crate::velocity::FreeFlowTable;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),
    #[error("unknown fault type `{0}`")]
    UnknownFaultType(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Piecewise-linear function of the hour of day, constant beyond its ends.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyProfile {
    knots: Vec<(f64, f64)>,
}

impl DailyProfile {
    pub fn new(mut knots: Vec<(f64, f64)>) -> Result<Self, SynthError> {
        if knots.is_empty() || knots.iter().any(|k| !k.0.is_finite() || !k.1.is_finite()) {
            return Err(SynthError::InfeasibleConfig("a daily profile needs finite knots".into()));
        }
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { knots })
    }

    pub fn constant(v: f64) -> Self {
        Self { knots: vec![(0.0, v)] }
    }

    pub fn at(&self, hour: f64) -> f64 {
        let h = hour.rem_euclid(24.0);
        let k = &self.knots;
        if h <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            if h <= w[1].0 {
                let f = (h - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + f * (w[1].1 - w[0].1);
            }
        }
        k[k.len() - 1].1
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    fn max(&self) -> f64 {
        self.knots.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max)
    }

    fn min(&self) -> f64 {
        self.knots.iter().map(|k| k.1).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthDist {
    pub mean_ft: f64,
    pub sd_ft: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleMix {
    pub car: LengthDist,
    pub truck: LengthDist,
    /// Truck fraction by hour of day.
    pub trucks: DailyProfile,
    /// Per-lane multipliers of the truck fraction; missing lanes use 1.
    pub lane_scale: Vec<f64>,
}

impl Default for VehicleMix {
    fn default() -> Self {
        Self {
            car: LengthDist { mean_ft: 17.5, sd_ft: 2.0 },
            truck: LengthDist { mean_ft: 35.0, sd_ft: 5.0 },
            trucks: DailyProfile { knots: vec![(0.0, 0.08), (6.0, 0.05), (12.0, 0.03), (18.0, 0.02), (24.0, 0.08)] },
            lane_scale: Vec::new(),
        }
    }
}

impl VehicleMix {
    pub fn truck_fraction(&self, hour: f64, lane: usize) -> f64 {
        (self.trucks.at(hour) * self.lane_scale.get(lane - 1).copied().unwrap_or(1.0)).clamp(0.0, 1.0)
    }

    /// Expected effective length at an hour of day.
    pub fn mean_length(&self, hour: f64, lane: usize) -> f64 {
        let p = self.truck_fraction(hour, lane);
        (1.0 - p) * self.car.mean_ft + p * self.truck.mean_ft
    }
}

/// Template for a daily congestion episode; each day draws its own instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RushHour {
    /// Centre as a fraction of the corridor length from the first station.
    pub center: f64,
    pub center_sd: f64,
    pub half_length_miles: f64,
    pub start_hour: f64,
    pub start_sd_hours: f64,
    pub duration_hours: f64,
    pub duration_sd_hours: f64,
    /// Speed multiplier at the core of the episode.
    pub speed_factor: f64,
    pub speed_factor_sd: f64,
    /// Upstream drift of the centre while active.
    pub drift_mph: f64,
    pub probability: f64,
}

impl RushHour {
    pub fn morning() -> Self {
        Self {
            center: 0.55,
            center_sd: 0.08,
            half_length_miles: 14.0,
            start_hour: 6.5,
            start_sd_hours: 0.4,
            duration_hours: 3.0,
            duration_sd_hours: 0.5,
            speed_factor: 0.35,
            speed_factor_sd: 0.12,
            drift_mph: 3.0,
            probability: 0.95,
        }
    }

    pub fn evening() -> Self {
        Self {
            center: 0.35,
            center_sd: 0.08,
            half_length_miles: 14.0,
            start_hour: 15.5,
            start_sd_hours: 0.5,
            duration_hours: 3.5,
            duration_sd_hours: 0.75,
            speed_factor: 0.33,
            speed_factor_sd: 0.12,
            drift_mph: 2.0,
            probability: 0.95,
        }
    }
}

/// A slowdown over a stretch of corridor and a span of time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CongestionEvent {
    pub center_mile: f64,
    pub half_length_miles: f64,
    pub start_hour: f64,
    pub duration_hours: f64,
    pub speed_factor: f64,
    pub drift_mph: f64,
}

impl CongestionEvent {
    /// Speed multiplier at postmile `x` and hour `h`.
    pub fn factor(&self, x: f64, h: f64) -> f64 {
        let u = h - self.start_hour;
        if u <= 0.0 || u >= self.duration_hours || self.half_length_miles <= 0.0 {
            return 1.0;
        }
        let ramp = (self.duration_hours / 4.0).min(0.5);
        let a = taper(u.min(self.duration_hours - u) / ramp);
        let c = self.center_mile - self.drift_mph * u;
        let d = (x - c).abs() / self.half_length_miles;
        let s = if d <= 0.5 { 1.0 } else { taper((1.0 - d) / 0.5) };
        1.0 - (1.0 - self.speed_factor) * a * s
    }
}

/// Smooth step from 0 at `z <= 0` to 1 at `z >= 1`.
fn taper(z: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z >= 1.0 {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * z).cos()
    }
}

/// A capacity drop upstream of a segment end on one day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Incident {
    /// Segment index: stations `segment` to `segment + 1`.
    pub segment: usize,
    pub day: usize,
    pub start_hour: f64,
    pub duration_hours: f64,
    pub capacity_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultKind {
    /// Constant reading from onset; `None` freezes the value seen at onset.
    Stuck { flow: Option<u32>, occupancy: Option<f64> },
    HangingOn,
    HangingOff,
    /// Each sample's flow is multiplied by a factor in `[2, max_factor]` with
    /// the given probability.
    Chattering { probability: f64, max_factor: f64 },
    /// No samples from onset.
    Missing,
}

impl FaultKind {
    pub fn label(&self) -> FaultLabel {
        match self {
            Self::Stuck { .. } => FaultLabel::Stuck,
            Self::HangingOn => FaultLabel::HangingOn,
            Self::HangingOff => FaultLabel::HangingOff,
            Self::Chattering { .. } => FaultLabel::Chattering,
            Self::Missing => FaultLabel::Missing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub detector: DetectorRef,
    pub day: usize,
    pub onset_seconds: f64,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum FaultLabel {
    #[default]
    Clean,
    Stuck,
    HangingOn,
    HangingOff,
    Chattering,
    Missing,
}

impl FaultLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Stuck => "stuck",
            Self::HangingOn => "hanging_on",
            Self::HangingOff => "hanging_off",
            Self::Chattering => "chattering",
            Self::Missing => "missing",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Clean, Self::Stuck, Self::HangingOn, Self::HangingOff, Self::Chattering, Self::Missing]
            .into_iter()
            .find(|l| l.as_str() == s)
    }
}

impl fmt::Display for FaultLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    /// Evenly spaced entries at the demand rate.
    Regular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub layout: CorridorLayout,
    pub origin_epoch: i64,
    pub days: usize,
    pub base_seconds: u32,
    pub seed: u64,
    /// Vehicles per hour per lane by hour of day.
    pub demand: DailyProfile,
    pub lane_demand: Vec<f64>,
    pub arrivals: ArrivalProcess,
    pub free_flow: FreeFlowTable,
    /// Replaces the lane table with one speed everywhere.
    pub free_flow_mph: Option<f64>,
    /// Standard deviation of the daily free-flow level; the level is
    /// `1 - level_sd * |z|` with `z` normal.
    pub level_sd: f64,
    /// Correlation of every daily draw with one shared severity factor, so
    /// that bad mornings go with bad evenings and slower free flow.
    pub day_correlation: f64,
    pub rush_hours: Vec<RushHour>,
    pub incidents: Vec<Incident>,
    /// Mean number of random incidents per day between 05:00 and 21:00.
    pub incident_rate: f64,
    pub mix: VehicleMix,
    pub faults: Vec<Fault>,
    /// Probability that a detector-day gets a whole-day stuck, hanging-on or
    /// hanging-off fault.
    pub fault_rate: f64,
    /// Probability that a single sample is dropped.
    pub missing_fraction: f64,
    pub pre_roll_minutes: f64,
    pub capacity_vph: f64,
    /// Slowest speed multiplier the field may reach.
    pub min_speed_factor: f64,
}

/// 2000-06-19, a Monday.
pub const DEFAULT_ORIGIN: i64 = 961_372_800;

impl WorldConfig {
    /// A corridor of `stations` evenly spaced stations with default traffic.
    pub fn corridor(stations: usize, start_postmile: f64, length_miles: f64, lanes: usize) -> Result<Self, SynthError> {
        Ok(Self {
            layout: CorridorLayout::uniform(stations, start_postmile, length_miles, lanes)?,
            origin_epoch: DEFAULT_ORIGIN,
            days: 34,
            base_seconds: 30,
            seed: 1,
            demand: DailyProfile {
                knots: vec![
                    (0.0, 200.0),
                    (5.0, 350.0),
                    (6.5, 1300.0),
                    (9.0, 1150.0),
                    (12.0, 1000.0),
                    (15.0, 1200.0),
                    (17.5, 1350.0),
                    (20.0, 800.0),
                    (22.0, 400.0),
                    (24.0, 200.0),
                ],
            },
            lane_demand: Vec::new(),
            arrivals: ArrivalProcess::Poisson,
            free_flow: FreeFlowTable::default(),
            free_flow_mph: None,
            level_sd: 0.03,
            day_correlation: 0.85,
            rush_hours: vec![RushHour::morning(), RushHour::evening()],
            incidents: Vec::new(),
            incident_rate: 2.0,
            mix: VehicleMix::default(),
            faults: Vec::new(),
            fault_rate: 0.0,
            missing_fraction: 0.0,
            pre_roll_minutes: 120.0,
            capacity_vph: 4000.0,
            min_speed_factor: 0.25,
        })
    }

    /// The evaluation corridor: 116 two-lane stations over 48 miles.
    pub fn paper_corridor() -> Self {
        Self::corridor(116, 1.28, 47.245, 2).expect("valid layout")
    }

    pub fn slots_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.base_seconds as i64) as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InfeasibleConfig(m.into()));
        if self.base_seconds == 0 || SECONDS_PER_DAY % self.base_seconds as i64 != 0 {
            return bad("base interval must divide a day");
        }
        if self.days == 0 {
            return bad("no days to generate");
        }
        if self.demand.min() < 0.0 || self.lane_demand.iter().any(|&m| m < 0.0) {
            return bad("demand must be non-negative");
        }
        let peak = self.demand.max() * self.lane_demand.iter().copied().fold(1.0, f64::max);
        if peak > self.capacity_vph {
            return Err(SynthError::InfeasibleConfig(format!(
                "peak demand {peak} vph per lane exceeds the {} vph cap",
                self.capacity_vph
            )));
        }
        let m = &self.mix;
        if m.trucks.min() < 0.0 || m.trucks.max() > 1.0 || m.lane_scale.iter().any(|&s| s < 0.0) {
            return bad("truck fractions must lie in [0, 1]");
        }
        if !(m.car.mean_ft > 0.0 && m.truck.mean_ft > 0.0 && m.car.sd_ft >= 0.0 && m.truck.sd_ft >= 0.0) {
            return bad("vehicle lengths must be positive");
        }
        if !(0.0..=1.0).contains(&self.fault_rate) || !(0.0..=1.0).contains(&self.missing_fraction) {
            return bad("fault rates must lie in [0, 1]");
        }
        if !(self.incident_rate >= 0.0) || !(0.0..=1.0).contains(&self.day_correlation) || self.level_sd < 0.0 || !(self.min_speed_factor > 0.0 && self.min_speed_factor <= 1.0) {
            return bad("speed variability parameters out of range");
        }
        if matches!(self.free_flow_mph, Some(v) if !(v > 0.0)) {
            return bad("free-flow speed must be positive");
        }
        for r in &self.rush_hours {
            if !(0.0..=1.0).contains(&r.probability) || r.speed_factor <= 0.0 || r.half_length_miles < 0.0 || r.duration_hours < 0.0 {
                return bad("invalid rush-hour template");
            }
        }
        for i in &self.incidents {
            if i.segment == 0 || i.segment >= self.layout.len() || i.day >= self.days || !(i.capacity_factor > 0.0) {
                return bad("incident references a missing segment or day");
            }
        }
        for f in &self.faults {
            let s = f.detector.station as usize;
            if s == 0 || s > self.layout.len() || f.detector.lane == 0 || f.detector.lane as usize > self.layout.lanes(s) || f.day >= self.days {
                return Err(SynthError::InfeasibleConfig(format!("fault references missing detector {} or day {}", f.detector, f.day)));
            }
        }
        Ok(())
    }

    /// Reads world settings from key-value configuration. `layout` replaces
    /// the generated uniform corridor when given.
    pub fn from_config(kv: &KeyValues, layout: Option<CorridorLayout>) -> Result<Self, SynthError> {
        let mut c = match layout {
            Some(l) => {
                let mut c = Self::paper_corridor();
                c.layout = l;
                c
            }
            None => Self::corridor(
                kv.get_or("stations", 116usize)?,
                kv.get_or("start_postmile", 1.28)?,
                kv.get_or("length_miles", 47.245)?,
                kv.get_or("lanes", 2usize)?,
            )?,
        };
        c.origin_epoch = kv.get_or("origin_epoch", c.origin_epoch)?;
        c.days = kv.get_or("days", c.days)?;
        c.base_seconds = kv.get_or("base_seconds", c.base_seconds)?;
        c.seed = kv.get_or("seed", c.seed)?;
        if let Some(k) = kv.get_with("demand", parse_knots)? {
            c.demand = DailyProfile::new(k)?;
        }
        if let Some(v) = kv.get_with("lane_demand", parse_list)? {
            c.lane_demand = v;
        }
        if let Some(a) = kv.get_with("arrivals", |s| match s {
            "poisson" => Ok(ArrivalProcess::Poisson),
            "regular" => Ok(ArrivalProcess::Regular),
            _ => Err("expected poisson or regular".into()),
        })? {
            c.arrivals = a;
        }
        c.free_flow_mph = kv.get("free_flow_mph")?;
        c.level_sd = kv.get_or("level_sd", c.level_sd)?;
        c.day_correlation = kv.get_or("day_correlation", c.day_correlation)?;
        c.min_speed_factor = kv.get_or("min_speed_factor", c.min_speed_factor)?;
        c.pre_roll_minutes = kv.get_or("pre_roll_min", c.pre_roll_minutes)?;
        c.capacity_vph = kv.get_or("capacity_vph", c.capacity_vph)?;
        c.rush_hours.clear();
        for (prefix, template) in [("am", RushHour::morning()), ("pm", RushHour::evening())] {
            if kv.get_or(&format!("{prefix}.enabled"), true)? {
                c.rush_hours.push(rush_from_config(kv, prefix, template)?);
            }
        }
        if let Some(k) = kv.get_with("trucks", parse_knots)? {
            c.mix.trucks = DailyProfile::new(k)?;
        }
        if let Some(v) = kv.get_with("truck_lane_scale", parse_list)? {
            c.mix.lane_scale = v;
        }
        if let Some(d) = kv.get_with("car_length", parse_length)? {
            c.mix.car = d;
        }
        if let Some(d) = kv.get_with("truck_length", parse_length)? {
            c.mix.truck = d;
        }
        if let Some(v) = kv.get_with("incidents", parse_incidents)? {
            c.incidents = v;
        }
        c.incident_rate = kv.get_or("incident_rate", c.incident_rate)?;
        if let Some(v) = kv.raw("faults") {
            c.faults = parse_faults(v)?;
        }
        c.fault_rate = kv.get_or("fault_rate", c.fault_rate)?;
        c.missing_fraction = kv.get_or("missing_fraction", c.missing_fraction)?;
        c.validate()?;
        Ok(c)
    }

    fn rng(&self, day: usize, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(((day as u64) << 16) | stream);
        r
    }

    /// Congestion episodes and free-flow level drawn for a day.
    pub fn scenario(&self, day: usize) -> DayScenario {
        let mut rng = self.rng(day, 0);
        let rho = self.day_correlation;
        let own = (1.0 - rho * rho).sqrt();
        let severity: f64 = rng.sample(rand_distr::StandardNormal);
        let draw = |rng: &mut ChaCha8Rng| -> f64 { rho * severity + own * rng.sample::<f64, _>(rand_distr::StandardNormal) };
        let level = (1.0 - (draw(&mut rng) * self.level_sd).abs()).max(self.min_speed_factor);
        let first = self.layout.postmile(1);
        let span = self.layout.postmile(self.layout.len()) - first;
        let mut events = Vec::new();
        for r in &self.rush_hours {
            let z: [f64; 4] = std::array::from_fn(|_| draw(&mut rng));
            let u: f64 = rng.random();
            if u >= r.probability {
                continue;
            }
            // larger severity: earlier, longer and slower
            events.push(CongestionEvent {
                center_mile: first + span * (r.center + r.center_sd * z[0]),
                half_length_miles: r.half_length_miles,
                start_hour: r.start_hour - r.start_sd_hours * z[1],
                duration_hours: (r.duration_hours + r.duration_sd_hours * z[2]).max(0.25),
                speed_factor: (r.speed_factor - r.speed_factor_sd * z[3]).clamp(self.min_speed_factor, 1.0),
                drift_mph: r.drift_mph,
            });
        }
        let mut incidents: Vec<Incident> = self.incidents.iter().filter(|i| i.day == day).copied().collect();
        if self.incident_rate > 0.0 && self.layout.len() > 1 {
            let n = Poisson::new(self.incident_rate).expect("positive rate").sample(&mut rng) as usize;
            for _ in 0..n {
                incidents.push(Incident {
                    segment: rng.random_range(1..self.layout.len()),
                    day,
                    start_hour: rng.random_range(5.0..21.0),
                    duration_hours: rng.random_range(0.33..1.5),
                    capacity_factor: rng.random_range(0.35..0.8),
                });
            }
        }
        for i in incidents {
            let end = self.layout.postmile(i.segment + 1);
            events.push(CongestionEvent {
                center_mile: end - 1.5,
                half_length_miles: 3.0,
                start_hour: i.start_hour,
                duration_hours: i.duration_hours,
                speed_factor: i.capacity_factor,
                drift_mph: 1.0,
            });
        }
        DayScenario { level, events, floor: self.min_speed_factor }
    }

    /// Explicit faults plus the random whole-day ones.
    pub fn fault_schedule(&self) -> Vec<Fault> {
        let mut out = self.faults.clone();
        if self.fault_rate > 0.0 {
            let mut rng = self.rng(0, 0xfff0);
            for day in 0..self.days {
                for det in self.layout.detectors() {
                    if rng.random::<f64>() < self.fault_rate {
                        let kind = match rng.random_range(0..3) {
                            0 => FaultKind::Stuck { flow: None, occupancy: None },
                            1 => FaultKind::HangingOn,
                            _ => FaultKind::HangingOff,
                        };
                        out.push(Fault { detector: det, day, onset_seconds: 0.0, kind });
                    }
                }
            }
        }
        out
    }

    fn free_flow_speed(&self, det: DetectorRef) -> f64 {
        self.free_flow_mph.unwrap_or_else(|| self.free_flow.for_detector(det, self.layout.lanes(det.station as usize)))
    }
}

fn rush_from_config(kv: &KeyValues, p: &str, mut r: RushHour) -> Result<RushHour, SynthError> {
    let key = |k: &str| format!("{p}.{k}");
    r.center = kv.get_or(&key("center"), r.center)?;
    r.center_sd = kv.get_or(&key("center_sd"), r.center_sd)?;
    r.half_length_miles = kv.get_or(&key("half_miles"), r.half_length_miles)?;
    if let Some(m) = kv.get_with(&key("start"), parse_clock)? {
        r.start_hour = m / 60.0;
    }
    r.start_sd_hours = kv.get_or(&key("start_sd_min"), r.start_sd_hours * 60.0)? / 60.0;
    r.duration_hours = kv.get_or(&key("duration_min"), r.duration_hours * 60.0)? / 60.0;
    r.duration_sd_hours = kv.get_or(&key("duration_sd_min"), r.duration_sd_hours * 60.0)? / 60.0;
    r.speed_factor = kv.get_or(&key("speed_factor"), r.speed_factor)?;
    r.speed_factor_sd = kv.get_or(&key("speed_factor_sd"), r.speed_factor_sd)?;
    r.drift_mph = kv.get_or(&key("drift_mph"), r.drift_mph)?;
    r.probability = kv.get_or(&key("probability"), r.probability)?;
    Ok(r)
}

fn parse_length(s: &str) -> Result<LengthDist, String> {
    match parse_list::<f64>(s)?.as_slice() {
        [m, sd] => Ok(LengthDist { mean_ft: *m, sd_ft: *sd }),
        _ => Err("expected mean,sd in feet".into()),
    }
}

/// `segment,day,HH:MM,duration_min,capacity_factor` entries separated by `;`.
fn parse_incidents(s: &str) -> Result<Vec<Incident>, String> {
    s.split(';')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|e| {
            let f: Vec<&str> = e.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(format!("incident `{e}` needs 5 fields"));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| format!("bad number `{}`", f[i]));
            Ok(Incident {
                segment: f[0].parse().map_err(|_| format!("bad segment `{}`", f[0]))?,
                day: f[1].parse().map_err(|_| format!("bad day `{}`", f[1]))?,
                start_hour: parse_clock(f[2])? / 60.0,
                duration_hours: num(3)? / 60.0,
                capacity_factor: num(4)?,
            })
        })
        .collect()
}

/// `station:lane,day,type[,HH:MM][,param...]` entries separated by `;`.
///
/// Parameters: `stuck` takes optional flow and occupancy, `chattering` an
/// optional probability and maximum factor.
pub fn parse_faults(s: &str) -> Result<Vec<Fault>, SynthError> {
    let mut out = Vec::new();
    for e in s.split(';').map(str::trim).filter(|x| !x.is_empty()) {
        let bad = |r: &str| SynthError::Config(ConfigError::bad("faults", e, r));
        let f: Vec<&str> = e.split(',').map(str::trim).collect();
        if f.len() < 3 {
            return Err(bad("expected station:lane,day,type"));
        }
        let (st, ln) = f[0].split_once(':').ok_or_else(|| bad("detector must be station:lane"))?;
        let detector = DetectorRef::new(st.parse().map_err(|_| bad("bad station"))?, ln.parse().map_err(|_| bad("bad lane"))?);
        let day = f[1].parse().map_err(|_| bad("bad day"))?;
        let mut rest = &f[3..];
        let mut onset_seconds = 0.0;
        if let Some(t) = rest.first().filter(|t| t.contains(':')) {
            onset_seconds = parse_clock(t).map_err(|r| bad(&r))? * 60.0;
            rest = &rest[1..];
        }
        let p: Vec<f64> = rest.iter().map(|x| x.parse::<f64>().map_err(|_| bad("bad parameter"))).collect::<Result<_, _>>()?;
        let kind = match f[2] {
            "stuck" => FaultKind::Stuck { flow: p.first().map(|&q| q as u32), occupancy: p.get(1).copied() },
            "hanging_on" => FaultKind::HangingOn,
            "hanging_off" => FaultKind::HangingOff,
            "chattering" => FaultKind::Chattering {
                probability: p.first().copied().unwrap_or(0.3),
                max_factor: p.get(1).copied().unwrap_or(4.0),
            },
            "missing" => FaultKind::Missing,
            other => return Err(SynthError::UnknownFaultType(other.into())),
        };
        out.push(Fault { detector, day, onset_seconds, kind });
    }
    Ok(out)
}

/// One day's draw of the speed field.
#[derive(Debug, Clone, PartialEq)]
pub struct DayScenario {
    /// Free-flow level multiplier for the whole day.
    pub level: f64,
    pub events: Vec<CongestionEvent>,
    floor: f64,
}

impl DayScenario {
    pub fn speed_factor(&self, x: f64, hour: f64) -> f64 {
        let f: f64 = self.events.iter().map(|e| e.factor(x, hour)).product();
        (self.level * f).max(self.floor)
    }
}

/// Lane index within a day's slot-major detector arrays.
#[derive(Debug, Clone)]
struct DetIndex {
    offsets: Vec<usize>,
    lanes: Vec<usize>,
    count: usize,
}

impl DetIndex {
    fn new(layout: &CorridorLayout) -> Self {
        let lanes: Vec<usize> = layout.stations().iter().map(|s| s.lanes).collect();
        let mut offsets = Vec::with_capacity(lanes.len());
        let mut n = 0;
        for &l in &lanes {
            offsets.push(n);
            n += l;
        }
        Self { offsets, lanes, count: n }
    }

    #[inline]
    fn at(&self, station: usize, lane: usize) -> usize {
        self.offsets[station - 1] + lane.min(self.lanes[station - 1]) - 1
    }
}

/// Lane speeds (mph) for one day at base resolution, slot-major.
struct DayField<'a> {
    mph: Vec<f64>,
    slots: usize,
    slot_s: f64,
    idx: &'a DetIndex,
}

impl DayField<'_> {
    #[inline]
    fn speed(&self, t: f64, station: usize, lane: usize) -> f64 {
        let s = ((t / self.slot_s).floor().max(0.0) as usize).min(self.slots - 1);
        self.mph[s * self.idx.count + self.idx.at(station, lane)]
    }
}

fn build_field<'a>(cfg: &WorldConfig, sc: &DayScenario, idx: &'a DetIndex) -> DayField<'a> {
    let slots = cfg.slots_per_day();
    let slot_s = cfg.base_seconds as f64;
    let mut mph = Vec::with_capacity(slots * idx.count);
    for t in 0..slots {
        let hour = (t as f64 + 0.5) * slot_s / 3600.0;
        for (i, st) in cfg.layout.stations().iter().enumerate() {
            let f = sc.speed_factor(st.postmile, hour);
            for l in 1..=st.lanes {
                mph.push(cfg.free_flow_speed(DetectorRef::new(i as u32 + 1, l as u16)) * f);
            }
        }
    }
    DayField { mph, slots, slot_s, idx }
}

/// A vehicle's passages: time after midnight (s) and speed (mph) at each
/// station, in station order.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrace {
    pub day: usize,
    pub lane: usize,
    pub length_ft: f64,
    pub passages: Vec<(f64, f64)>,
}

impl VehicleTrace {
    /// Corridor transit time in seconds.
    pub fn transit_seconds(&self) -> f64 {
        self.passages.last().map_or(0.0, |l| l.0) - self.passages.first().map_or(0.0, |f| f.0)
    }
}

/// Replays a vehicle entering station 1 at `t0`, calling `f(station, t, mph)`
/// at each station.
fn replay(layout: &CorridorLayout, field: &DayField, lane: usize, t0: f64, mut f: impl FnMut(usize, f64, f64)) {
    let mut t = t0;
    let n = layout.len();
    for i in 1..=n {
        f(i, t, field.speed(t, i, lane));
        if i == n {
            break;
        }
        let mut rem = layout.segment_length(i);
        while rem > 0.0 {
            let v = 0.5 * (field.speed(t, i, lane) + field.speed(t, i + 1, lane));
            let slot = (t / field.slot_s).floor();
            let t_end = if slot < 0.0 || slot as usize >= field.slots - 1 { f64::INFINITY } else { (slot + 1.0) * field.slot_s };
            let dt = rem / v * 3600.0;
            if t + dt <= t_end {
                t += dt;
                rem = 0.0;
            } else {
                rem -= v * (t_end - t) / 3600.0;
                t = t_end;
            }
        }
    }
}

/// Entry times at station 1 and lengths for one lane-day, in entry order.
fn entries(cfg: &WorldConfig, day: usize, lane: usize) -> Vec<(f64, f64)> {
    let mut rng = cfg.rng(day, lane as u64);
    let slot_s = cfg.base_seconds as f64;
    let first = -(cfg.pre_roll_minutes * 60.0 / slot_s).ceil() as i64;
    let last = cfg.slots_per_day() as i64;
    let scale = cfg.lane_demand.get(lane - 1).copied().unwrap_or(1.0);
    let car = Normal::new(cfg.mix.car.mean_ft, cfg.mix.car.sd_ft).expect("validated");
    let truck = Normal::new(cfg.mix.truck.mean_ft, cfg.mix.truck.sd_ft).expect("validated");
    let mut out = Vec::new();
    let mut carry = 0.0;
    let mut times = Vec::new();
    for s in first..last {
        let start = s as f64 * slot_s;
        let hour = (start + 0.5 * slot_s) / 3600.0;
        let lambda = cfg.demand.at(hour) * scale * slot_s / 3600.0;
        times.clear();
        match cfg.arrivals {
            ArrivalProcess::Poisson => {
                let n = if lambda > 0.0 { Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize } else { 0 };
                times.extend((0..n).map(|_| start + rng.random::<f64>() * slot_s));
                times.sort_by(f64::total_cmp);
            }
            ArrivalProcess::Regular => {
                let expect = lambda + carry;
                let n = expect.floor() as usize;
                carry = expect - n as f64;
                times.extend((0..n).map(|j| start + (j as f64 + 0.5) / n as f64 * slot_s));
            }
        }
        let p_truck = cfg.mix.truck_fraction(hour, lane);
        for &t in &times {
            let is_truck = p_truck > 0.0 && rng.random::<f64>() < p_truck;
            let len = if is_truck { truck.sample(&mut rng) } else { car.sample(&mut rng) };
            out.push((t, len.max(5.0)));
        }
    }
    out
}

/// Per-day detector counts and on-time, slot-major.
struct Accum {
    flow: Vec<u32>,
    on_time: Vec<f64>,
    slots: usize,
    slot_s: f64,
    dets: usize,
}

impl Accum {
    fn new(slots: usize, slot_s: f64, dets: usize) -> Self {
        Self { flow: vec![0; slots * dets], on_time: vec![0.0; slots * dets], slots, slot_s, dets }
    }

    /// Counts a passage in the slot where it starts and spreads the on-time
    /// over the slots it covers.
    fn add(&mut self, det: usize, t: f64, on: f64) {
        let day = self.slots as f64 * self.slot_s;
        if t >= 0.0 && t < day {
            self.flow[(t / self.slot_s) as usize * self.dets + det] += 1;
        }
        let (mut a, b) = (t.max(0.0), (t + on).min(day));
        while a < b {
            let s = (a / self.slot_s) as usize;
            let end = ((s + 1) as f64 * self.slot_s).min(b);
            self.on_time[s * self.dets + det] += end - a;
            a = end;
        }
    }
}

fn simulate_day(cfg: &WorldConfig, idx: &DetIndex, day: usize, mut trace: Option<&mut Vec<VehicleTrace>>) -> (Vec<LoopSample>, Vec<f64>) {
    let sc = cfg.scenario(day);
    let field = build_field(cfg, &sc, idx);
    let mut acc = Accum::new(field.slots, field.slot_s, idx.count);
    let max_lanes = cfg.layout.max_lanes();
    for lane in 1..=max_lanes {
        for (t0, len) in entries(cfg, day, lane) {
            let mut passages = trace.as_ref().map(|_| Vec::with_capacity(cfg.layout.len()));
            replay(&cfg.layout, &field, lane, t0, |i, t, v| {
                acc.add(idx.at(i, lane), t, len / mph_to_fps(v));
                if let Some(p) = passages.as_mut() {
                    p.push((t, v));
                }
            });
            if let (Some(out), Some(passages)) = (trace.as_deref_mut(), passages) {
                if passages.iter().any(|p| p.0 >= 0.0 && p.0 < SECONDS_PER_DAY as f64) {
                    out.push(VehicleTrace { day, lane, length_ft: len, passages });
                }
            }
        }
    }
    let day_start = cfg.origin_epoch + day as i64 * SECONDS_PER_DAY;
    let mut samples = Vec::with_capacity(acc.flow.len());
    for t in 0..acc.slots {
        for (i, st) in cfg.layout.stations().iter().enumerate() {
            for l in 1..=st.lanes {
                let j = t * idx.count + idx.at(i + 1, l);
                samples.push(LoopSample {
                    timestamp: day_start + (t as f64 * acc.slot_s) as i64,
                    occupancy: (acc.on_time[j] / acc.slot_s).min(1.0),
                    detector: DetectorRef::new(i as u32 + 1, l as u16),
                    flow_count: acc.flow[j],
                });
            }
        }
    }
    (samples, field.mph)
}

/// Ground truth for every stage.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub layout: CorridorLayout,
    pub base_seconds: u32,
    /// Lane speeds at base resolution.
    pub truth: VelocityField,
    pub scenarios: Vec<DayScenario>,
    /// Samples after fault injection, ordered by time then detector.
    pub samples: Vec<LoopSample>,
    /// One label per (day, slot, detector) in the same order as the clean
    /// samples.
    pub labels: Vec<FaultLabel>,
    /// Vehicle passages per detector-day before faults.
    pub vehicle_counts: Vec<u64>,
}

/// The speed field and every vehicle's passages. Meant for small worlds.
#[derive(Debug, Clone)]
pub struct World {
    pub truth: VelocityField,
    pub scenarios: Vec<DayScenario>,
    pub vehicles: Vec<VehicleTrace>,
}

fn truth_field(cfg: &WorldConfig, speeds: &[Vec<f64>]) -> VelocityField {
    let lanes: Vec<usize> = cfg.layout.stations().iter().map(|s| s.lanes).collect();
    let mut f = VelocityField::new(cfg.origin_epoch, cfg.days, cfg.base_seconds, lanes).expect("validated");
    let dets = cfg.layout.detectors();
    let idx = DetIndex::new(&cfg.layout);
    for (d, mph) in speeds.iter().enumerate() {
        for t in 0..cfg.slots_per_day() {
            for det in &dets {
                let v = mph[t * idx.count + idx.at(det.station as usize, det.lane as usize)];
                f.set(d, t, *det, v, SpeedProvenance::Measured);
            }
        }
    }
    f
}

pub fn generate_world(cfg: &WorldConfig, exec: Exec) -> Result<World, SynthError> {
    cfg.validate()?;
    let idx = DetIndex::new(&cfg.layout);
    let per_day = exec.map_range(cfg.days, |d| {
        let mut v = Vec::new();
        let (_, mph) = simulate_day(cfg, &idx, d, Some(&mut v));
        (v, mph)
    });
    let mut vehicles = Vec::new();
    let mut speeds = Vec::new();
    for (v, mph) in per_day {
        vehicles.extend(v);
        speeds.push(mph);
    }
    Ok(World { truth: truth_field(cfg, &speeds), scenarios: (0..cfg.days).map(|d| cfg.scenario(d)).collect(), vehicles })
}

/// Renders passages into base-interval samples for every detector and slot,
/// ordered by day, slot, station and lane.
pub fn render_samples(vehicles: &[VehicleTrace], layout: &CorridorLayout, origin_epoch: i64, days: usize, base_seconds: u32) -> Vec<LoopSample> {
    let idx = DetIndex::new(layout);
    let slots = (SECONDS_PER_DAY / base_seconds as i64) as usize;
    let mut acc: Vec<Accum> = (0..days).map(|_| Accum::new(slots, base_seconds as f64, idx.count)).collect();
    for v in vehicles {
        for (i, &(t, mph)) in v.passages.iter().enumerate() {
            acc[v.day].add(idx.at(i + 1, v.lane), t, v.length_ft / mph_to_fps(mph));
        }
    }
    let mut out = Vec::with_capacity(days * slots * idx.count);
    for (d, a) in acc.iter().enumerate() {
        for t in 0..slots {
            for det in layout.detectors() {
                let j = t * idx.count + idx.at(det.station as usize, det.lane as usize);
                out.push(LoopSample {
                    timestamp: origin_epoch + d as i64 * SECONDS_PER_DAY + (t as i64) * base_seconds as i64,
                    occupancy: (a.on_time[j] / a.slot_s).min(1.0),
                    detector: det,
                    flow_count: a.flow[j],
                });
            }
        }
    }
    out
}

/// Applies faults to samples. Returns one entry per input sample: the
/// corrupted sample (or `None` when dropped) and its truth label. Random
/// draws come from per-detector-day streams of `seed`, so the result does
/// not depend on input order.
pub fn inject_faults(
    samples: &[LoopSample],
    faults: &[Fault],
    origin_epoch: i64,
    missing_fraction: f64,
    seed: u64,
) -> Vec<(Option<LoopSample>, FaultLabel)> {
    use std::collections::HashMap;
    let day_of = |s: &LoopSample| (s.timestamp - origin_epoch).div_euclid(SECONDS_PER_DAY) as usize;
    let mut by_key: HashMap<(DetectorRef, usize), &Fault> = HashMap::new();
    for f in faults {
        by_key.entry((f.detector, f.day)).or_insert(f);
    }
    // value at onset for stuck faults without explicit values
    let mut frozen: HashMap<(DetectorRef, usize), (i64, u32, f64)> = HashMap::new();
    for s in samples {
        let key = (s.detector, day_of(s));
        if let Some(f) = by_key.get(&key) {
            if matches!(f.kind, FaultKind::Stuck { .. }) {
                let tod = s.timestamp - origin_epoch - key.1 as i64 * SECONDS_PER_DAY;
                if tod as f64 >= f.onset_seconds {
                    let e = frozen.entry(key).or_insert((tod, s.flow_count, s.occupancy));
                    if tod < e.0 {
                        *e = (tod, s.flow_count, s.occupancy);
                    }
                }
            }
        }
    }
    samples
        .iter()
        .map(|s| {
            let day = day_of(s);
            let tod = (s.timestamp - origin_epoch - day as i64 * SECONDS_PER_DAY) as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa17);
            rng.set_stream(((day as u64) << 40) | ((s.detector.station as u64) << 20) | s.detector.lane as u64);
            rng.set_word_pos(8 * (tod as u128));
            let mut out = *s;
            let label = match by_key.get(&(s.detector, day)).filter(|f| tod >= f.onset_seconds) {
                None => FaultLabel::Clean,
                Some(f) => {
                    match f.kind {
                        FaultKind::Stuck { flow, occupancy } => {
                            let base = frozen.get(&(s.detector, day)).copied().unwrap_or((0, 0, 0.0));
                            out.flow_count = flow.unwrap_or(base.1);
                            out.occupancy = occupancy.unwrap_or(base.2).clamp(0.0, 1.0);
                        }
                        FaultKind::HangingOn => {
                            out.flow_count = 0;
                            out.occupancy = 0.8 + 0.2 * s.occupancy;
                        }
                        FaultKind::HangingOff => {
                            out.flow_count = 0;
                            out.occupancy = 0.0;
                        }
                        FaultKind::Chattering { probability, max_factor } => {
                            if rng.random::<f64>() < probability {
                                let k = 2.0 + rng.random::<f64>() * (max_factor - 2.0).max(0.0);
                                out.flow_count = (s.flow_count as f64 * k).round() as u32;
                            }
                        }
                        FaultKind::Missing => return (None, FaultLabel::Missing),
                    }
                    f.kind.label()
                }
            };
            if missing_fraction > 0.0 && rng.random::<f64>() < missing_fraction {
                return (None, FaultLabel::Missing);
            }
            (Some(out), label)
        })
        .collect()
}

/// Generates the full synthetic data set without keeping vehicle traces.
pub fn simulate(cfg: &WorldConfig, exec: Exec) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let idx = DetIndex::new(&cfg.layout);
    let per_day = exec.map_range(cfg.days, |d| simulate_day(cfg, &idx, d, None));
    let mut clean = Vec::with_capacity(per_day.iter().map(|p| p.0.len()).sum());
    let mut speeds = Vec::with_capacity(cfg.days);
    let mut vehicle_counts = vec![0u64; cfg.days * idx.count];
    for (d, (s, mph)) in per_day.into_iter().enumerate() {
        for x in &s {
            vehicle_counts[d * idx.count + idx.at(x.detector.station as usize, x.detector.lane as usize)] += x.flow_count as u64;
        }
        clean.extend(s);
        speeds.push(mph);
    }
    let schedule = cfg.fault_schedule();
    let injected = inject_faults(&clean, &schedule, cfg.origin_epoch, cfg.missing_fraction, cfg.seed);
    let labels = injected.iter().map(|x| x.1).collect();
    let samples = injected.into_iter().filter_map(|x| x.0).collect();
    Ok(SynthOutput {
        layout: cfg.layout.clone(),
        base_seconds: cfg.base_seconds,
        truth: truth_field(cfg, &speeds),
        scenarios: (0..cfg.days).map(|d| cfg.scenario(d)).collect(),
        samples,
        labels,
        vehicle_counts,
    })
}

impl SynthOutput {
    /// Label of a detector at a base slot.
    pub fn label(&self, day: usize, slot: usize, det: DetectorRef) -> FaultLabel {
        let idx = DetIndex::new(&self.layout);
        self.labels[(day * self.truth.slots_per_day() + slot) * idx.count + idx.at(det.station as usize, det.lane as usize)]
    }

    /// Truth averaged to a coarser slot that is a multiple of the base.
    pub fn truth_at(&self, slot_seconds: u32) -> Result<VelocityField, ModelError> {
        if slot_seconds % self.base_seconds != 0 {
            return Err(ModelError::Shape(format!("{slot_seconds} s is not a multiple of {} s", self.base_seconds)));
        }
        let r = (slot_seconds / self.base_seconds) as usize;
        let t = &self.truth;
        let mut out = VelocityField::new(t.origin_epoch(), t.days(), slot_seconds, t.lane_counts().to_vec())?;
        let dets = self.layout.detectors();
        for d in 0..t.days() {
            for s in 0..out.slots_per_day() {
                for det in &dets {
                    let v = (s * r..(s + 1) * r).map(|b| t.get(d, b, *det)).sum::<f64>() / r as f64;
                    out.set(d, s, *det, v, SpeedProvenance::Measured);
                }
            }
        }
        Ok(out)
    }

    /// `station,lane,day,slot,true_speed_mph,fault_label`.
    pub fn write_truth<W: Write>(&self, w: W) -> io::Result<()> {
        let mut w = io::BufWriter::new(w);
        writeln!(w, "station,lane,day,slot,true_speed_mph,fault_label")?;
        let dets = self.layout.detectors();
        let mut i = 0;
        for d in 0..self.truth.days() {
            for t in 0..self.truth.slots_per_day() {
                for det in &dets {
                    writeln!(w, "{},{},{},{},{:.4},{}", det.station, det.lane, d, t, self.truth.get(d, t, *det), self.labels[i])?;
                    i += 1;
                }
            }
        }
        w.flush()
    }
}
