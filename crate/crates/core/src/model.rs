//! Domain types shared by every stage of the pipeline.
//!
//! Occupancy is always a fraction in `[0, 1]`, flows are vehicle counts per
//! slot, positions are postmiles and speeds are miles per hour.

use std::fmt;

use thiserror::Error;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const FEET_PER_MILE: f64 = 5280.0;

/// Miles per hour to feet per second.
pub fn mph_to_fps(mph: f64) -> f64 {
    mph * FEET_PER_MILE / 3600.0
}

pub fn fps_to_mph(fps: f64) -> f64 {
    fps * 3600.0 / FEET_PER_MILE
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("occupancy {0} outside [0, 1]")]
    OccupancyOutOfRange(f64),
    #[error("negative flow count {0}")]
    NegativeFlow(i64),
    #[error("unknown detector station {station} lane {lane}")]
    UnknownDetector { station: i64, lane: i64 },
    #[error("postmiles must be strictly increasing (station {0})")]
    NonIncreasingPostmile(usize),
    #[error("station {0} has no lanes")]
    NoLanes(usize),
    #[error("corridor has no stations")]
    EmptyLayout,
    #[error("grid dimension mismatch: {0}")]
    Shape(String),
}

/// One loop detector: 1-based station index along the corridor and 1-based lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DetectorRef {
    pub station: u32,
    pub lane: u16,
}

impl DetectorRef {
    pub fn new(station: u32, lane: u16) -> Self {
        Self { station, lane }
    }
}

impl fmt::Display for DetectorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.station, self.lane)
    }
}

/// A single base-interval reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSample {
    pub timestamp: i64,
    pub occupancy: f64,
    pub detector: DetectorRef,
    pub flow_count: u32,
}

/// Checks raw parsed fields against the corridor and builds a sample.
pub fn validate_sample(
    layout: &CorridorLayout,
    station: i64,
    lane: i64,
    timestamp: i64,
    flow: i64,
    occupancy: f64,
) -> Result<LoopSample, ModelError> {
    if !(0.0..=1.0).contains(&occupancy) {
        return Err(ModelError::OccupancyOutOfRange(occupancy));
    }
    if flow < 0 {
        return Err(ModelError::NegativeFlow(flow));
    }
    let known = station >= 1
        && (station as usize) <= layout.len()
        && lane >= 1
        && (lane as usize) <= layout.lanes(station as usize);
    if !known {
        return Err(ModelError::UnknownDetector { station, lane });
    }
    Ok(LoopSample {
        timestamp,
        occupancy,
        detector: DetectorRef::new(station as u32, lane as u16),
        flow_count: u32::try_from(flow).map_err(|_| ModelError::NegativeFlow(flow))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Station {
    pub postmile: f64,
    pub lanes: usize,
}

/// Ordered stations along one direction of a freeway.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorLayout {
    stations: Vec<Station>,
}

impl CorridorLayout {
    pub fn new(stations: Vec<Station>) -> Result<Self, ModelError> {
        if stations.is_empty() {
            return Err(ModelError::EmptyLayout);
        }
        for (i, s) in stations.iter().enumerate() {
            if s.lanes == 0 {
                return Err(ModelError::NoLanes(i + 1));
            }
            if i > 0 && !(s.postmile > stations[i - 1].postmile) {
                return Err(ModelError::NonIncreasingPostmile(i + 1));
            }
        }
        Ok(Self { stations })
    }

    /// Evenly spaced stations with a uniform lane count.
    pub fn uniform(count: usize, start: f64, length_miles: f64, lanes: usize) -> Result<Self, ModelError> {
        let step = if count > 1 { length_miles / (count - 1) as f64 } else { 0.0 };
        Self::new(
            (0..count)
                .map(|i| Station { postmile: start + step * i as f64, lanes })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    /// Station by 1-based index.
    pub fn station(&self, station: usize) -> &Station {
        &self.stations[station - 1]
    }

    pub fn postmile(&self, station: usize) -> f64 {
        self.station(station).postmile
    }

    pub fn lanes(&self, station: usize) -> usize {
        self.station(station).lanes
    }

    pub fn max_lanes(&self) -> usize {
        self.stations.iter().map(|s| s.lanes).max().unwrap_or(0)
    }

    pub fn detector_count(&self) -> usize {
        self.stations.iter().map(|s| s.lanes).sum()
    }

    /// Distance in miles from station `i` to station `i + 1`.
    pub fn segment_length(&self, station: usize) -> f64 {
        self.postmile(station + 1) - self.postmile(station)
    }

    /// All detectors in corridor order.
    pub fn detectors(&self) -> Vec<DetectorRef> {
        self.stations
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (1..=s.lanes).map(move |l| DetectorRef::new(i as u32 + 1, l as u16)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[repr(u8)]
pub enum HealthFlag {
    #[default]
    Good = 0,
    Malfunctioning = 1,
    Missing = 2,
}

impl HealthFlag {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Good),
            1 => Some(Self::Malfunctioning),
            2 => Some(Self::Missing),
            _ => None,
        }
    }
}

/// Where a cell's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum CellSource {
    #[default]
    Observed,
    /// No reading exists for this cell.
    Absent,
    Neighbor,
    History,
    Corridor,
}

impl CellSource {
    pub fn is_imputed(self) -> bool {
        matches!(self, Self::Neighbor | Self::History | Self::Corridor)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Observed => "observed",
            Self::Absent => "absent",
            Self::Neighbor => "neighbor",
            Self::History => "history",
            Self::Corridor => "corridor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "observed" => Self::Observed,
            "absent" => Self::Absent,
            "neighbor" => Self::Neighbor,
            "history" => Self::History,
            "corridor" => Self::Corridor,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cell {
    pub flow: f64,
    pub occupancy: f64,
    pub health: HealthFlag,
    pub source: CellSource,
}

impl Cell {
    pub const MISSING: Cell = Cell {
        flow: 0.0,
        occupancy: 0.0,
        health: HealthFlag::Missing,
        source: CellSource::Absent,
    };

    pub fn observed(flow: f64, occupancy: f64) -> Self {
        Self { flow, occupancy, health: HealthFlag::Good, source: CellSource::Observed }
    }

    /// A usable value: a good reading or an imputed replacement.
    pub fn has_value(&self) -> bool {
        match self.source {
            CellSource::Observed => self.health == HealthFlag::Good,
            CellSource::Absent => false,
            _ => true,
        }
    }

    pub fn is_good(&self) -> bool {
        self.health == HealthFlag::Good && self.source == CellSource::Observed
    }
}

/// Day of week, 0 = Sunday.
pub fn day_of_week(day_start_epoch: i64) -> u8 {
    // 1970-01-01 was a Thursday.
    ((day_start_epoch.div_euclid(SECONDS_PER_DAY) + 4).rem_euclid(7)) as u8
}

/// Dense day x slot x station x lane array.
///
/// Stations with fewer lanes than the corridor maximum leave their trailing
/// lane cells permanently `Missing`; they are never addressed through the
/// layout-aware iterators.
#[derive(Debug, Clone, PartialEq)]
pub struct DataGrid {
    origin_epoch: i64,
    days: usize,
    slots_per_day: usize,
    slot_seconds: u32,
    lanes: Vec<usize>,
    max_lanes: usize,
    cells: Vec<Cell>,
}

impl DataGrid {
    pub fn new(origin_epoch: i64, days: usize, slot_seconds: u32, lanes: Vec<usize>) -> Result<Self, ModelError> {
        if slot_seconds == 0 || SECONDS_PER_DAY % slot_seconds as i64 != 0 {
            return Err(ModelError::Shape(format!("slot of {slot_seconds} s does not divide a day")));
        }
        if lanes.is_empty() {
            return Err(ModelError::EmptyLayout);
        }
        let slots_per_day = (SECONDS_PER_DAY / slot_seconds as i64) as usize;
        let max_lanes = lanes.iter().copied().max().unwrap_or(0);
        let n = days * slots_per_day * lanes.len() * max_lanes;
        Ok(Self {
            origin_epoch,
            days,
            slots_per_day,
            slot_seconds,
            lanes,
            max_lanes,
            cells: vec![Cell::MISSING; n],
        })
    }

    pub fn for_layout(layout: &CorridorLayout, origin_epoch: i64, days: usize, slot_seconds: u32) -> Result<Self, ModelError> {
        Self::new(origin_epoch, days, slot_seconds, layout.stations().iter().map(|s| s.lanes).collect())
    }

    /// Same shape, every cell missing.
    pub fn empty_like(&self) -> Self {
        Self { cells: vec![Cell::MISSING; self.cells.len()], ..self.clone_shape() }
    }

    fn clone_shape(&self) -> Self {
        Self {
            origin_epoch: self.origin_epoch,
            days: self.days,
            slots_per_day: self.slots_per_day,
            slot_seconds: self.slot_seconds,
            lanes: self.lanes.clone(),
            max_lanes: self.max_lanes,
            cells: Vec::new(),
        }
    }

    pub fn origin_epoch(&self) -> i64 {
        self.origin_epoch
    }
    pub fn days(&self) -> usize {
        self.days
    }
    pub fn slots_per_day(&self) -> usize {
        self.slots_per_day
    }
    pub fn slot_seconds(&self) -> u32 {
        self.slot_seconds
    }
    pub fn stations(&self) -> usize {
        self.lanes.len()
    }
    pub fn max_lanes(&self) -> usize {
        self.max_lanes
    }
    pub fn lane_counts(&self) -> &[usize] {
        &self.lanes
    }
    /// Lane count of a 1-based station.
    pub fn lanes(&self, station: usize) -> usize {
        self.lanes[station - 1]
    }

    pub fn day_start(&self, day: usize) -> i64 {
        self.origin_epoch + day as i64 * SECONDS_PER_DAY
    }

    pub fn day_of_week(&self, day: usize) -> u8 {
        day_of_week(self.day_start(day))
    }

    pub fn detectors(&self) -> Vec<DetectorRef> {
        self.lanes
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| (1..=n).map(move |l| DetectorRef::new(i as u32 + 1, l as u16)))
            .collect()
    }

    #[inline]
    pub fn index(&self, day: usize, slot: usize, det: DetectorRef) -> usize {
        let s = det.station as usize - 1;
        let l = det.lane as usize - 1;
        debug_assert!(day < self.days && slot < self.slots_per_day && s < self.lanes.len() && l < self.max_lanes);
        ((day * self.slots_per_day + slot) * self.lanes.len() + s) * self.max_lanes + l
    }

    #[inline]
    pub fn get(&self, day: usize, slot: usize, det: DetectorRef) -> &Cell {
        &self.cells[self.index(day, slot, det)]
    }

    #[inline]
    pub fn get_mut(&mut self, day: usize, slot: usize, det: DetectorRef) -> &mut Cell {
        let i = self.index(day, slot, det);
        &mut self.cells[i]
    }

    pub fn set(&mut self, day: usize, slot: usize, det: DetectorRef, cell: Cell) {
        *self.get_mut(day, slot, det) = cell;
    }

    /// Cells of one day, laid out slot-major.
    pub fn day_cells(&self, day: usize) -> &[Cell] {
        let n = self.slots_per_day * self.lanes.len() * self.max_lanes;
        &self.cells[day * n..(day + 1) * n]
    }

    pub fn day_cells_mut(&mut self, day: usize) -> &mut [Cell] {
        let n = self.slots_per_day * self.lanes.len() * self.max_lanes;
        &mut self.cells[day * n..(day + 1) * n]
    }

    /// Mutable per-day chunks, for day-partitioned writers.
    pub fn days_mut(&mut self) -> std::slice::ChunksMut<'_, Cell> {
        let n = self.slots_per_day * self.lanes.len() * self.max_lanes;
        self.cells.chunks_mut(n.max(1))
    }

    /// Offset of a (slot, detector) cell inside a day chunk.
    #[inline]
    pub fn day_offset(&self, slot: usize, det: DetectorRef) -> usize {
        (slot * self.lanes.len() + det.station as usize - 1) * self.max_lanes + det.lane as usize - 1
    }

    /// One detector-day as a slot-ordered series.
    pub fn series(&self, day: usize, det: DetectorRef) -> Vec<Cell> {
        (0..self.slots_per_day).map(|t| *self.get(day, t, det)).collect()
    }

    /// Iterates (day, slot, detector, cell) over layout-valid cells only.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, DetectorRef, &Cell)> + '_ {
        let dets = self.detectors();
        (0..self.days).flat_map(move |d| {
            let dets = dets.clone();
            (0..self.slots_per_day)
                .flat_map(move |t| dets.clone().into_iter().map(move |det| (d, t, det)))
        })
        .map(move |(d, t, det)| (d, t, det, self.get(d, t, det)))
    }

    pub fn count_health(&self, flag: HealthFlag) -> usize {
        self.iter().filter(|(_, _, _, c)| c.health == flag).count()
    }

    /// True when every layout-valid cell carries a usable value.
    pub fn is_complete(&self) -> bool {
        self.iter().all(|(_, _, _, c)| c.has_value())
    }

    /// Keeps only the listed days, in order.
    pub fn select_days(&self, days: &[usize]) -> Self {
        let mut out = self.clone_shape();
        out.days = days.len();
        for &d in days {
            out.cells.extend_from_slice(self.day_cells(d));
        }
        out
    }
}

/// Per-cell speed provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum SpeedProvenance {
    /// Ground truth or a directly measured speed.
    Measured,
    Preliminary,
    #[default]
    Filtered,
    /// Filtered, but the underlying flow/occupancy cell was imputed.
    Imputed,
}

impl SpeedProvenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Measured => "measured",
            Self::Preliminary => "preliminary",
            Self::Filtered => "filtered",
            Self::Imputed => "imputed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "measured" => Self::Measured,
            "preliminary" => Self::Preliminary,
            "filtered" => Self::Filtered,
            "imputed" => Self::Imputed,
            _ => return None,
        })
    }
}

/// Per-lane speeds in mph over days x slots x stations; absent lanes are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    origin_epoch: i64,
    days: usize,
    slots_per_day: usize,
    slot_seconds: u32,
    lanes: Vec<usize>,
    max_lanes: usize,
    mph: Vec<f64>,
    provenance: Vec<SpeedProvenance>,
}

impl VelocityField {
    pub fn new(origin_epoch: i64, days: usize, slot_seconds: u32, lanes: Vec<usize>) -> Result<Self, ModelError> {
        if slot_seconds == 0 || SECONDS_PER_DAY % slot_seconds as i64 != 0 {
            return Err(ModelError::Shape(format!("slot of {slot_seconds} s does not divide a day")));
        }
        let slots_per_day = (SECONDS_PER_DAY / slot_seconds as i64) as usize;
        let max_lanes = lanes.iter().copied().max().unwrap_or(0);
        let n = days * slots_per_day * lanes.len() * max_lanes;
        Ok(Self {
            origin_epoch,
            days,
            slots_per_day,
            slot_seconds,
            lanes,
            max_lanes,
            mph: vec![f64::NAN; n],
            provenance: vec![SpeedProvenance::default(); n],
        })
    }

    pub fn like_grid(grid: &DataGrid) -> Self {
        Self::new(grid.origin_epoch(), grid.days(), grid.slot_seconds(), grid.lane_counts().to_vec())
            .expect("grid shape already validated")
    }

    pub fn origin_epoch(&self) -> i64 {
        self.origin_epoch
    }
    pub fn days(&self) -> usize {
        self.days
    }
    pub fn slots_per_day(&self) -> usize {
        self.slots_per_day
    }
    pub fn slot_seconds(&self) -> u32 {
        self.slot_seconds
    }
    pub fn stations(&self) -> usize {
        self.lanes.len()
    }
    pub fn lane_counts(&self) -> &[usize] {
        &self.lanes
    }
    pub fn lanes(&self, station: usize) -> usize {
        self.lanes[station - 1]
    }

    #[inline]
    fn index(&self, day: usize, slot: usize, det: DetectorRef) -> usize {
        ((day * self.slots_per_day + slot) * self.lanes.len() + det.station as usize - 1) * self.max_lanes
            + det.lane as usize
            - 1
    }

    pub fn get(&self, day: usize, slot: usize, det: DetectorRef) -> f64 {
        self.mph[self.index(day, slot, det)]
    }

    pub fn provenance(&self, day: usize, slot: usize, det: DetectorRef) -> SpeedProvenance {
        self.provenance[self.index(day, slot, det)]
    }

    pub fn set(&mut self, day: usize, slot: usize, det: DetectorRef, mph: f64, prov: SpeedProvenance) {
        let i = self.index(day, slot, det);
        self.mph[i] = mph;
        self.provenance[i] = prov;
    }

    /// Station speed: arithmetic mean over the station's lanes.
    pub fn station_speed(&self, day: usize, slot: usize, station: usize) -> f64 {
        let n = self.lanes[station - 1];
        let base = self.index(day, slot, DetectorRef::new(station as u32, 1));
        self.mph[base..base + n].iter().sum::<f64>() / n as f64
    }

    /// Station-level speeds for one day.
    pub fn station_day(&self, day: usize) -> StationSpeeds {
        let stations = self.lanes.len();
        let mut mph = Vec::with_capacity(self.slots_per_day * stations);
        for t in 0..self.slots_per_day {
            for s in 1..=stations {
                mph.push(self.station_speed(day, t, s));
            }
        }
        StationSpeeds { slot_seconds: self.slot_seconds, slots: self.slots_per_day, stations, mph }
    }

    /// Writes one detector-day from a slot-ordered series.
    pub fn set_series(&mut self, day: usize, det: DetectorRef, values: &[(f64, SpeedProvenance)]) {
        for (t, &(v, p)) in values.iter().enumerate() {
            self.set(day, t, det, v, p);
        }
    }
}

/// Station-level speed snapshot of a single day, slot-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSpeeds {
    pub slot_seconds: u32,
    pub slots: usize,
    pub stations: usize,
    pub mph: Vec<f64>,
}

impl StationSpeeds {
    pub fn new(slot_seconds: u32, slots: usize, stations: usize, fill: f64) -> Self {
        Self { slot_seconds, slots, stations, mph: vec![fill; slots * stations] }
    }

    /// Speed at a slot for a 1-based station.
    #[inline]
    pub fn at(&self, slot: usize, station: usize) -> f64 {
        self.mph[slot * self.stations + station - 1]
    }

    #[inline]
    pub fn set(&mut self, slot: usize, station: usize, mph: f64) {
        self.mph[slot * self.stations + station - 1] = mph;
    }
}

/// Realized and current-status travel times for one origin/destination pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TravelTimeSeries {
    pub origin: usize,
    pub destination: usize,
    /// Slot length in minutes.
    pub slot_minutes: f64,
    /// Slot-of-day index of the first departure slot.
    pub first_slot: usize,
    pub days: Vec<DayTravel>,
}

/// One day's trajectories, indexed by departure slot offset from `first_slot`.
/// Undefined entries are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DayTravel {
    pub day: usize,
    pub realized: Vec<f64>,
    pub current_status: Vec<f64>,
}

impl TravelTimeSeries {
    pub fn len(&self) -> usize {
        self.days.first().map_or(0, |d| d.realized.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Departure time in minutes after midnight of a series position.
    pub fn minute_of(&self, pos: usize) -> f64 {
        (self.first_slot + pos) as f64 * self.slot_minutes
    }

    /// Nearest series position for a time of day in minutes.
    pub fn position_of(&self, minute: f64) -> Option<usize> {
        let p = (minute / self.slot_minutes).round() as i64 - self.first_slot as i64;
        (p >= 0 && (p as usize) < self.len()).then_some(p as usize)
    }
}
