//! Raw sample parsing, dense grid assembly and slot aggregation.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::io::{comment_pairs, expect_fields, for_each_record, parse_field, FormatError};
use crate::model::{
    validate_sample, Cell, CellSource, CorridorLayout, DataGrid, DetectorRef, HealthFlag, LoopSample, ModelError,
    SECONDS_PER_DAY,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable source: {0}")]
    UnreadableSource(#[from] io::Error),
    #[error("empty day range")]
    EmptyDayRange,
    #[error("target slot of {target} s is not a whole multiple of the {base} s base interval")]
    MisalignedSlot { base: u32, target: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectorDayCounts {
    pub parsed: usize,
    pub rejected: usize,
    pub duplicate: usize,
    pub missing: usize,
}

/// Line accounting for one ingest run. `parsed + rejected == total`;
/// duplicates are a subset of the rejected lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub total: usize,
    pub parsed: usize,
    pub rejected: usize,
    pub duplicates: usize,
    /// Keyed by detector and UTC epoch day.
    pub per_detector_day: BTreeMap<(DetectorRef, i64), DetectorDayCounts>,
}

impl IngestReport {
    /// Records the missing-cell count of every detector-day of a built grid.
    pub fn add_missing(&mut self, grid: &DataGrid) {
        for d in 0..grid.days() {
            let key_day = grid.day_start(d).div_euclid(SECONDS_PER_DAY);
            for det in grid.detectors() {
                let missing = (0..grid.slots_per_day())
                    .filter(|&t| grid.get(d, t, det).health == HealthFlag::Missing)
                    .count();
                self.per_detector_day.entry((det, key_day)).or_default().missing = missing;
            }
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "station,lane,epoch_day,parsed,rejected,duplicate,missing")?;
        for ((det, day), c) in &self.per_detector_day {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                det.station, det.lane, day, c.parsed, c.rejected, c.duplicate, c.missing
            )?;
        }
        writeln!(w, "# total={} parsed={} rejected={} duplicates={}", self.total, self.parsed, self.rejected, self.duplicates)
    }
}

/// Parses `station,lane,epoch_seconds,flow_count,occupancy` lines.
///
/// Malformed or invalid lines are counted and skipped. The returned samples
/// are stably sorted by (detector, timestamp); of several lines with the same
/// detector and timestamp only the first one in input order is kept.
pub fn parse_samples<R: BufRead>(reader: R, layout: &CorridorLayout) -> Result<(Vec<LoopSample>, IngestReport), IngestError> {
    let mut report = IngestReport::default();
    let mut samples = Vec::new();
    let result = for_each_record(
        reader,
        |_| {},
        |_, f| {
            report.total += 1;
            match parse_line(f, layout) {
                Some(s) => samples.push(s),
                None => {
                    report.rejected += 1;
                    if let Some((det, ts)) = detector_and_time(f, layout) {
                        report.per_detector_day.entry((det, ts.div_euclid(SECONDS_PER_DAY))).or_default().rejected += 1;
                    }
                }
            }
            Ok(())
        },
    );
    match result {
        Ok(()) => {}
        Err(FormatError::Io(e)) => return Err(IngestError::UnreadableSource(e)),
        Err(e) => return Err(e.into()),
    }

    samples.sort_by_key(|s| (s.detector, s.timestamp));
    let mut kept: Vec<LoopSample> = Vec::with_capacity(samples.len());
    for s in samples {
        let day = s.timestamp.div_euclid(SECONDS_PER_DAY);
        let counts = report.per_detector_day.entry((s.detector, day)).or_default();
        if kept.last().is_some_and(|k| k.detector == s.detector && k.timestamp == s.timestamp) {
            report.duplicates += 1;
            report.rejected += 1;
            counts.duplicate += 1;
            counts.rejected += 1;
        } else {
            counts.parsed += 1;
            kept.push(s);
        }
    }
    report.parsed = kept.len();
    Ok((kept, report))
}

fn parse_line(f: &[&str], layout: &CorridorLayout) -> Option<LoopSample> {
    if f.len() != 5 {
        return None;
    }
    let station: i64 = f[0].parse().ok()?;
    let lane: i64 = f[1].parse().ok()?;
    let ts: i64 = f[2].parse().ok()?;
    let flow: i64 = f[3].parse().ok()?;
    let occ: f64 = f[4].parse().ok()?;
    validate_sample(layout, station, lane, ts, flow, occ).ok()
}

fn detector_and_time(f: &[&str], layout: &CorridorLayout) -> Option<(DetectorRef, i64)> {
    let station: usize = f.first()?.parse().ok()?;
    let lane: usize = f.get(1)?.parse().ok()?;
    let ts: i64 = f.get(2)?.parse().ok()?;
    (station >= 1 && station <= layout.len() && lane >= 1 && lane <= layout.lanes(station))
        .then(|| (DetectorRef::new(station as u32, lane as u16), ts))
}

/// Days covered by a grid. `origin_epoch` is the start of day 0 and may carry
/// a fixed UTC offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayRange {
    pub origin_epoch: i64,
    pub days: usize,
}

impl DayRange {
    /// Smallest range of whole days (shifted by `utc_offset` seconds) that
    /// covers every sample.
    pub fn covering(samples: &[LoopSample], utc_offset: i64) -> Option<Self> {
        let lo = samples.iter().map(|s| s.timestamp).min()?;
        let hi = samples.iter().map(|s| s.timestamp).max()?;
        let first = (lo + utc_offset).div_euclid(SECONDS_PER_DAY);
        let last = (hi + utc_offset).div_euclid(SECONDS_PER_DAY);
        Some(Self { origin_epoch: first * SECONDS_PER_DAY - utc_offset, days: (last - first + 1) as usize })
    }
}

/// Counters from grid assembly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub placed: usize,
    pub out_of_range: usize,
    /// Samples landing in an already-filled cell after slot flooring.
    pub collisions: usize,
}

/// Places samples on a dense grid; cells without a sample stay `Missing`.
pub fn build_grid(
    samples: &[LoopSample],
    layout: &CorridorLayout,
    range: DayRange,
    base_interval: u32,
) -> Result<(DataGrid, BuildStats), IngestError> {
    if range.days == 0 {
        return Err(IngestError::EmptyDayRange);
    }
    let mut grid = DataGrid::for_layout(layout, range.origin_epoch, range.days, base_interval)?;
    let mut stats = BuildStats::default();
    let span = range.days as i64 * SECONDS_PER_DAY;
    for s in samples {
        let rel = s.timestamp - range.origin_epoch;
        if rel < 0 || rel >= span {
            stats.out_of_range += 1;
            continue;
        }
        let day = (rel / SECONDS_PER_DAY) as usize;
        let slot = ((rel % SECONDS_PER_DAY) / base_interval as i64) as usize;
        let cell = grid.get_mut(day, slot, s.detector);
        if cell.source != CellSource::Absent {
            stats.collisions += 1;
            continue;
        }
        *cell = Cell::observed(s.flow_count as f64, s.occupancy);
        stats.placed += 1;
    }
    Ok((grid, stats))
}

/// Aggregates to a coarser slot.
///
/// Flow is summed and occupancy averaged over the sub-intervals. A target
/// cell becomes `Missing` when at least `missing_limit` of its sub-intervals
/// are missing; otherwise, with some sub-intervals missing, the flow sum is
/// scaled up to the full slot. A surviving cell is `Malfunctioning` if any
/// present sub-interval is.
pub fn aggregate(grid: &DataGrid, target_slot: u32, missing_limit: usize) -> Result<DataGrid, IngestError> {
    let base = grid.slot_seconds();
    if target_slot == 0 || target_slot % base != 0 || SECONDS_PER_DAY % target_slot as i64 != 0 {
        return Err(IngestError::MisalignedSlot { base, target: target_slot });
    }
    let ratio = (target_slot / base) as usize;
    if ratio == 1 {
        return Ok(grid.clone());
    }
    let limit = missing_limit.max(1);
    let mut out = DataGrid::new(grid.origin_epoch(), grid.days(), target_slot, grid.lane_counts().to_vec())?;
    let dets = grid.detectors();
    for d in 0..grid.days() {
        for t in 0..out.slots_per_day() {
            for &det in &dets {
                let subs = (t * ratio..(t + 1) * ratio).map(|u| grid.get(d, u, det));
                out.set(d, t, det, combine(subs, ratio, limit));
            }
        }
    }
    Ok(out)
}

fn combine<'a>(subs: impl Iterator<Item = &'a Cell>, ratio: usize, limit: usize) -> Cell {
    let mut missing = 0;
    let mut present = 0;
    let mut flow = 0.0;
    let mut occ = 0.0;
    let mut health = HealthFlag::Good;
    let mut source = CellSource::Observed;
    for c in subs {
        if c.health == HealthFlag::Missing && !c.source.is_imputed() {
            missing += 1;
            continue;
        }
        present += 1;
        flow += c.flow;
        occ += c.occupancy;
        if c.health == HealthFlag::Malfunctioning {
            health = HealthFlag::Malfunctioning;
        }
        source = source.max(c.source);
    }
    if missing >= limit || present == 0 {
        return Cell::MISSING;
    }
    Cell {
        flow: flow * ratio as f64 / present as f64,
        occupancy: (occ / present as f64).clamp(0.0, 1.0),
        health,
        source,
    }
}

/// Writes the grid CSV `day_index,slot_index,station,lane,flow,occupancy,health`.
///
/// Shape metadata goes in a leading comment. Once any cell has been imputed,
/// an eighth `source` column records where each value came from.
pub fn write_grid<W: Write>(grid: &DataGrid, w: W) -> io::Result<()> {
    let mut w = io::BufWriter::with_capacity(1 << 20, w);
    let lanes: Vec<String> = grid.lane_counts().iter().map(|l| l.to_string()).collect();
    writeln!(
        w,
        "# loopgrid-grid origin_epoch={} days={} slot_seconds={} lanes={}",
        grid.origin_epoch(),
        grid.days(),
        grid.slot_seconds(),
        lanes.join(",")
    )?;
    let with_source = grid.iter().any(|(_, _, _, c)| c.source.is_imputed());
    if with_source {
        writeln!(w, "day_index,slot_index,station,lane,flow,occupancy,health,source")?;
    } else {
        writeln!(w, "day_index,slot_index,station,lane,flow,occupancy,health")?;
    }
    let dets = grid.detectors();
    for d in 0..grid.days() {
        for t in 0..grid.slots_per_day() {
            for &det in &dets {
                let c = grid.get(d, t, det);
                write!(w, "{},{},{},{},{},{},{}", d, t, det.station, det.lane, c.flow, c.occupancy, c.health.code())?;
                if with_source {
                    writeln!(w, ",{}", c.source.as_str())?;
                } else {
                    writeln!(w)?;
                }
            }
        }
    }
    w.flush()
}

/// Reads a grid written by [`write_grid`]. Without the metadata comment the
/// shape is inferred from the largest indices present, with origin 0.
pub fn read_grid<R: BufRead>(reader: R) -> Result<DataGrid, IngestError> {
    let meta: RefCell<Option<(i64, usize, u32, Vec<usize>)>> = RefCell::new(None);
    let meta_err: RefCell<Option<String>> = RefCell::new(None);
    let mut rows: Vec<(usize, usize, DetectorRef, Cell)> = Vec::new();
    let mut grid: Option<DataGrid> = None;
    for_each_record(
        reader,
        |c| {
            if c.starts_with("loopgrid-grid") {
                let mut origin = 0;
                let mut days = 0;
                let mut slot = 0;
                let mut lanes = Vec::new();
                for (k, v) in comment_pairs(c) {
                    match k {
                        "origin_epoch" => origin = v.parse().unwrap_or(0),
                        "days" => days = v.parse().unwrap_or(0),
                        "slot_seconds" => slot = v.parse().unwrap_or(0),
                        "lanes" => lanes = v.split(',').filter_map(|x| x.parse().ok()).collect(),
                        _ => {}
                    }
                }
                if days == 0 || slot == 0 || lanes.is_empty() {
                    *meta_err.borrow_mut() = Some("incomplete grid metadata".into());
                }
                *meta.borrow_mut() = Some((origin, days, slot, lanes));
            }
        },
        |line, f| {
            if f.len() != 7 && f.len() != 8 {
                expect_fields(line, f, 7)?;
            }
            let day: usize = parse_field(line, f, 0, "day_index")?;
            let slot: usize = parse_field(line, f, 1, "slot_index")?;
            let station: u32 = parse_field(line, f, 2, "station")?;
            let lane: u16 = parse_field(line, f, 3, "lane")?;
            let flow: f64 = parse_field(line, f, 4, "flow")?;
            let occupancy: f64 = parse_field(line, f, 5, "occupancy")?;
            let code: u8 = parse_field(line, f, 6, "health")?;
            let health = HealthFlag::from_code(code).ok_or_else(|| FormatError::bad(line, "health must be 0, 1 or 2"))?;
            let source = match f.get(7) {
                Some(s) => CellSource::parse(s).ok_or_else(|| FormatError::bad(line, format!("unknown source `{s}`")))?,
                None if health == HealthFlag::Missing => CellSource::Absent,
                None => CellSource::Observed,
            };
            let det = DetectorRef::new(station, lane);
            let cell = Cell { flow, occupancy, health, source };
            if grid.is_none() {
                if let Some((origin, days, slot_s, lanes)) = &*meta.borrow() {
                    if meta_err.borrow().is_none() {
                        grid = Some(
                            DataGrid::new(*origin, *days, *slot_s, lanes.clone())
                                .map_err(|e| FormatError::Invalid(e.to_string()))?,
                        );
                    }
                }
            }
            match grid.as_mut() {
                Some(g) => {
                    let ok = day < g.days()
                        && slot < g.slots_per_day()
                        && station >= 1
                        && station as usize <= g.stations()
                        && lane >= 1
                        && lane as usize <= g.lanes(station as usize);
                    if !ok {
                        return Err(FormatError::bad(line, "cell outside the declared grid shape"));
                    }
                    g.set(day, slot, det, cell);
                }
                None => rows.push((day, slot, det, cell)),
            }
            Ok(())
        },
    )?;
    if let Some(e) = meta_err.into_inner() {
        return Err(FormatError::Invalid(e).into());
    }
    if let Some(g) = grid {
        return Ok(g);
    }
    if let Some((origin, days, slot, lanes)) = meta.into_inner() {
        return Ok(DataGrid::new(origin, days, slot, lanes)?);
    }
    infer_grid(rows)
}

fn infer_grid(rows: Vec<(usize, usize, DetectorRef, Cell)>) -> Result<DataGrid, IngestError> {
    if rows.is_empty() {
        return Err(IngestError::EmptyDayRange);
    }
    let days = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let slots = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    if SECONDS_PER_DAY as usize % slots != 0 {
        return Err(FormatError::Invalid(format!("{slots} slots per day do not divide a day")).into());
    }
    let stations = rows.iter().map(|r| r.2.station as usize).max().unwrap_or(0);
    let mut lanes = vec![1; stations];
    for r in &rows {
        let s = r.2.station as usize - 1;
        lanes[s] = lanes[s].max(r.2.lane as usize);
    }
    let mut g = DataGrid::new(0, days, (SECONDS_PER_DAY as usize / slots) as u32, lanes)?;
    for (d, t, det, c) in rows {
        g.set(d, t, det, c);
    }
    Ok(g)
}

/// Reads the corridor layout CSV `station,postmile_miles,lane_count`.
pub fn read_layout<R: BufRead>(reader: R) -> Result<CorridorLayout, IngestError> {
    let mut rows: Vec<(usize, f64, usize)> = Vec::new();
    for_each_record(
        reader,
        |_| {},
        |line, f| {
            expect_fields(line, f, 3)?;
            rows.push((
                parse_field(line, f, 0, "station")?,
                parse_field(line, f, 1, "postmile_miles")?,
                parse_field(line, f, 2, "lane_count")?,
            ));
            Ok(())
        },
    )?;
    rows.sort_by_key(|r| r.0);
    for (i, r) in rows.iter().enumerate() {
        if r.0 != i + 1 {
            return Err(FormatError::Invalid(format!("layout stations must be numbered 1..S, found {}", r.0)).into());
        }
    }
    Ok(CorridorLayout::new(
        rows.into_iter().map(|(_, postmile, lanes)| crate::model::Station { postmile, lanes }).collect(),
    )?)
}

pub fn write_layout<W: Write>(layout: &CorridorLayout, mut w: W) -> io::Result<()> {
    writeln!(w, "station,postmile_miles,lane_count")?;
    for (i, s) in layout.stations().iter().enumerate() {
        writeln!(w, "{},{},{}", i + 1, s.postmile, s.lanes)?;
    }
    Ok(())
}

/// Writes samples in the ingest CSV format.
pub fn write_samples<W: Write>(samples: &[LoopSample], w: &mut W) -> io::Result<()> {
    for s in samples {
        writeln!(w, "{},{},{},{},{:.6}", s.detector.station, s.detector.lane, s.timestamp, s.flow_count, s.occupancy)?;
    }
    Ok(())
}
