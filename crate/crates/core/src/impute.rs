//! Filling bad and missing cells from same-station neighbour lanes.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::exec::Exec;
use crate::io::{expect_fields, for_each_record, parse_field, FormatError};
use crate::model::{Cell, CellSource, DataGrid, DetectorRef};
use crate::statkit::{median, wls_fit, Line};

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("station {0} has no usable lane pair")]
    NoCleanData(u32),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quantity {
    Flow,
    Occupancy,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Flow => "flow",
            Quantity::Occupancy => "occ",
        }
    }

    fn of(self, c: &Cell) -> f64 {
        match self {
            Quantity::Flow => c.flow,
            Quantity::Occupancy => c.occupancy,
        }
    }
}

/// Regression of `target` on `neighbor` for one quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFit {
    pub target: DetectorRef,
    pub neighbor: DetectorRef,
    pub quantity: Quantity,
    pub line: Line,
    pub n: usize,
    pub resid_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputeConfig {
    pub min_pairs: usize,
    pub lane_capacity_vph: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self { min_pairs: 50, lane_capacity_vph: 4000.0 }
    }
}

/// Usable pair regressions, sorted by (target, quantity, neighbour).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairwiseModel {
    pairs: Vec<PairFit>,
    /// Stations where no pair reached the minimum sample count.
    pub unpaired_stations: Vec<u32>,
}

impl PairwiseModel {
    pub fn from_pairs(mut pairs: Vec<PairFit>) -> Self {
        pairs.sort_by_key(|p| (p.target, p.quantity, p.neighbor));
        Self { pairs, unpaired_stations: Vec::new() }
    }

    pub fn pairs(&self) -> &[PairFit] {
        &self.pairs
    }

    pub fn for_target(&self, target: DetectorRef, q: Quantity) -> &[PairFit] {
        let lo = self.pairs.partition_point(|p| (p.target, p.quantity) < (target, q));
        let hi = self.pairs.partition_point(|p| (p.target, p.quantity) <= (target, q));
        &self.pairs[lo..hi]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "station,lane_i,lane_j,quantity,alpha0,alpha1,n,resid_sd")?;
        for p in &self.pairs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                p.target.station,
                p.target.lane,
                p.neighbor.lane,
                p.quantity.as_str(),
                p.line.intercept,
                p.line.slope,
                p.n,
                p.resid_sd
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, ImputeError> {
        let mut pairs = Vec::new();
        for_each_record(
            r,
            |_| {},
            |line, f| {
                expect_fields(line, f, 8)?;
                let station: u32 = parse_field(line, f, 0, "station")?;
                let quantity = match f[3] {
                    "flow" => Quantity::Flow,
                    "occ" => Quantity::Occupancy,
                    other => return Err(FormatError::bad(line, format!("unknown quantity `{other}`"))),
                };
                pairs.push(PairFit {
                    target: DetectorRef::new(station, parse_field(line, f, 1, "lane_i")?),
                    neighbor: DetectorRef::new(station, parse_field(line, f, 2, "lane_j")?),
                    quantity,
                    line: Line { intercept: parse_field(line, f, 4, "alpha0")?, slope: parse_field(line, f, 5, "alpha1")? },
                    n: parse_field(line, f, 6, "n")?,
                    resid_sd: parse_field(line, f, 7, "resid_sd")?,
                });
                Ok(())
            },
        )?;
        Ok(Self::from_pairs(pairs))
    }
}

/// Least-squares fits for every ordered lane pair at one station, using only
/// times where both cells hold good observations.
pub fn fit_station(grid: &DataGrid, station: usize, min_pairs: usize) -> Result<Vec<PairFit>, ImputeError> {
    let lanes = grid.lanes(station);
    let mut out = Vec::new();
    for li in 1..=lanes {
        for lj in (1..=lanes).filter(|&l| l != li) {
            let ti = DetectorRef::new(station as u32, li as u16);
            let tj = DetectorRef::new(station as u32, lj as u16);
            let mut flow = Vec::new();
            let mut occ = Vec::new();
            for d in 0..grid.days() {
                for t in 0..grid.slots_per_day() {
                    let (a, b) = (grid.get(d, t, ti), grid.get(d, t, tj));
                    if a.is_good() && b.is_good() {
                        flow.push((b.flow, a.flow));
                        occ.push((b.occupancy, a.occupancy));
                    }
                }
            }
            if flow.len() < min_pairs.max(2) {
                continue;
            }
            for (quantity, pts) in [(Quantity::Flow, flow), (Quantity::Occupancy, occ)] {
                let Ok(line) = wls_fit(&pts, &vec![1.0; pts.len()]) else { continue };
                let ss: f64 = pts.iter().map(|&(x, y)| (y - line.eval(x)).powi(2)).sum();
                let resid_sd = (ss / (pts.len() - 2).max(1) as f64).sqrt();
                out.push(PairFit { target: ti, neighbor: tj, quantity, line, n: pts.len(), resid_sd });
            }
        }
    }
    if out.is_empty() {
        return Err(ImputeError::NoCleanData(station as u32));
    }
    Ok(out)
}

pub fn fit_pairwise(grid: &DataGrid, min_pairs: usize, exec: Exec) -> PairwiseModel {
    let fits = exec.map_range(grid.stations(), |s| fit_station(grid, s + 1, min_pairs));
    let mut pairs = Vec::new();
    let mut unpaired = Vec::new();
    for (s, f) in fits.into_iter().enumerate() {
        match f {
            Ok(v) => pairs.extend(v),
            Err(_) => unpaired.push(s as u32 + 1),
        }
    }
    let mut m = PairwiseModel::from_pairs(pairs);
    m.unpaired_stations = unpaired;
    m
}

/// Mean good flow and occupancy per (detector, day of week, slot), with an
/// all-days mean per (detector, slot) behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryTable {
    detectors: Vec<DetectorRef>,
    slots: usize,
    /// Indexed `[det][dow 0..7, 7 = all days][slot]`: (sum flow, sum occ, n).
    acc: Vec<(f64, f64, u32)>,
}

impl HistoryTable {
    pub fn from_grid(grid: &DataGrid) -> Self {
        let detectors = grid.detectors();
        let slots = grid.slots_per_day();
        let mut acc = vec![(0.0, 0.0, 0u32); detectors.len() * 8 * slots];
        for d in 0..grid.days() {
            let dow = grid.day_of_week(d) as usize;
            for (j, &det) in detectors.iter().enumerate() {
                for t in 0..slots {
                    let c = grid.get(d, t, det);
                    if c.is_good() {
                        for k in [dow, 7] {
                            let e = &mut acc[(j * 8 + k) * slots + t];
                            e.0 += c.flow;
                            e.1 += c.occupancy;
                            e.2 += 1;
                        }
                    }
                }
            }
        }
        Self { detectors, slots, acc }
    }

    /// `(flow, occupancy)` mean for the stratum, or `None` without history.
    pub fn mean(&self, det: DetectorRef, dow: u8, slot: usize) -> Option<(f64, f64)> {
        let j = self.detectors.binary_search(&det).ok()?;
        if slot >= self.slots {
            return None;
        }
        [dow as usize, 7].iter().find_map(|&k| {
            let (f, o, n) = self.acc[(j * 8 + k) * self.slots + slot];
            (n > 0).then(|| (f / n as f64, o / n as f64))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Imputed {
    pub flow: f64,
    pub occupancy: f64,
    pub source: CellSource,
}

fn corridor_median(grid: &DataGrid, day: usize, slot: usize, q: Quantity) -> Option<f64> {
    let v: Vec<f64> = grid
        .detectors()
        .into_iter()
        .map(|det| grid.get(day, slot, det))
        .filter(|c| c.is_good())
        .map(|c| q.of(c))
        .collect();
    median(&v)
}

fn impute_quantity(
    grid: &DataGrid,
    model: &PairwiseModel,
    history: Option<&HistoryTable>,
    day: usize,
    slot: usize,
    det: DetectorRef,
    q: Quantity,
) -> (f64, CellSource) {
    let regressed: Vec<f64> = model
        .for_target(det, q)
        .iter()
        .filter_map(|p| {
            let c = grid.get(day, slot, p.neighbor);
            c.is_good().then(|| p.line.eval(q.of(c)))
        })
        .collect();
    if let Some(m) = median(&regressed) {
        return (m, CellSource::Neighbor);
    }
    if let Some((f, o)) = history.and_then(|h| h.mean(det, grid.day_of_week(day), slot)) {
        return (if q == Quantity::Flow { f } else { o }, CellSource::History);
    }
    (corridor_median(grid, day, slot, q).unwrap_or(0.0), CellSource::Corridor)
}

/// Replacement values for one cell: the median of neighbour-lane
/// regressions, else the historical stratum mean, else the corridor median
/// at that slot. The source is the weaker path of the two quantities.
pub fn impute_cell(
    grid: &DataGrid,
    model: &PairwiseModel,
    history: Option<&HistoryTable>,
    day: usize,
    slot: usize,
    det: DetectorRef,
    cfg: &ImputeConfig,
) -> Imputed {
    let (f, sf) = impute_quantity(grid, model, history, day, slot, det, Quantity::Flow);
    let (o, so) = impute_quantity(grid, model, history, day, slot, det, Quantity::Occupancy);
    let cap = cfg.lane_capacity_vph * grid.slot_seconds() as f64 / 3600.0;
    Imputed { flow: f.clamp(0.0, cap), occupancy: o.clamp(0.0, 1.0), source: sf.max(so) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImputeReport {
    pub good: usize,
    pub neighbor: usize,
    pub history: usize,
    pub corridor: usize,
}

impl ImputeReport {
    pub fn total(&self) -> usize {
        self.good + self.neighbor + self.history + self.corridor
    }

    pub fn imputed(&self) -> usize {
        self.neighbor + self.history + self.corridor
    }

    fn count(&mut self, s: CellSource) {
        match s {
            CellSource::Neighbor => self.neighbor += 1,
            CellSource::History => self.history += 1,
            CellSource::Corridor => self.corridor += 1,
            _ => self.good += 1,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "path,cells")?;
        for (k, v) in [("good", self.good), ("neighbor", self.neighbor), ("history", self.history), ("corridor", self.corridor)] {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    }
}

/// Fills every cell without a usable value. Flags are kept; the cell source
/// records the imputation path. Already imputed cells are left alone.
pub fn impute_grid(
    grid: &DataGrid,
    model: &PairwiseModel,
    history: Option<&HistoryTable>,
    cfg: &ImputeConfig,
    exec: Exec,
) -> (DataGrid, ImputeReport) {
    let dets = grid.detectors();
    let per_day = exec.map_range(grid.days(), |d| {
        let mut fills = Vec::new();
        for t in 0..grid.slots_per_day() {
            for &det in &dets {
                if !grid.get(d, t, det).has_value() {
                    fills.push((t, det, impute_cell(grid, model, history, d, t, det, cfg)));
                }
            }
        }
        fills
    });
    let mut out = grid.clone();
    for (d, fills) in per_day.into_iter().enumerate() {
        for (t, det, v) in fills {
            let c = out.get_mut(d, t, det);
            c.flow = v.flow;
            c.occupancy = v.occupancy;
            c.source = v.source;
        }
    }
    let mut report = ImputeReport::default();
    for (_, _, _, c) in out.iter() {
        report.count(c.source);
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HealthFlag;
    use proptest::prelude::*;

    fn two_lane_grid(days: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> DataGrid {
        let mut g = DataGrid::new(961_372_800, days, 300, vec![2]).unwrap();
        for d in 0..days {
            for t in 0..288 {
                let x = f(d, t);
                g.set(d, t, DetectorRef::new(1, 2), Cell::observed(x.0, x.1));
                g.set(d, t, DetectorRef::new(1, 1), Cell::observed(0.8 * x.0 + 3.0, x.1));
            }
        }
        g
    }

    fn lane(l: u16) -> DetectorRef {
        DetectorRef::new(1, l)
    }

    #[test]
    fn exact_linear_recovery() {
        let g = two_lane_grid(1, |_, t| ((t % 50) as f64, 0.001 * (t % 90) as f64));
        let m = fit_pairwise(&g, 50, Exec::Sequential);
        let p = m.for_target(lane(1), Quantity::Flow)[0];
        assert!((p.line.intercept - 3.0).abs() < 1e-9);
        assert!((p.line.slope - 0.8).abs() < 1e-9);
        let p = m.for_target(lane(1), Quantity::Occupancy)[0];
        assert!(p.line.intercept.abs() < 1e-9 && (p.line.slope - 1.0).abs() < 1e-9);
        assert_eq!(p.n, 288);
    }

    #[test]
    fn noisy_pair_matches_normal_equations() {
        let g = two_lane_grid(1, |_, t| ((t * 7 % 31) as f64, 0.01));
        let mut g = g;
        for t in 0..288 {
            g.get_mut(0, t, lane(1)).flow += ((t * 13 % 17) as f64 - 8.0) * 0.3;
        }
        let p = fit_station(&g, 1, 50).unwrap().into_iter().find(|p| p.target == lane(1) && p.quantity == Quantity::Flow).unwrap();
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for t in 0..288 {
            let x = g.get(0, t, lane(2)).flow;
            let y = g.get(0, t, lane(1)).flow;
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        let n = 288.0;
        let det = n * sxx - sx * sx;
        let a = (sy * sxx - sx * sxy) / det;
        let b = (n * sxy - sx * sy) / det;
        assert!((p.line.intercept - a).abs() < 1e-9 && (p.line.slope - b).abs() < 1e-9);
    }

    #[test]
    fn no_clean_data() {
        let mut g = two_lane_grid(1, |_, t| (t as f64, 0.1));
        for t in 0..250 {
            g.get_mut(0, t, lane(2)).health = HealthFlag::Malfunctioning;
        }
        assert!(matches!(fit_station(&g, 1, 50), Err(ImputeError::NoCleanData(1))));
        assert_eq!(fit_pairwise(&g, 50, Exec::Sequential).unpaired_stations, vec![1]);
    }

    fn line(a: f64, b: f64) -> Line {
        Line { intercept: a, slope: b }
    }

    #[test]
    fn median_of_neighbours() {
        let mut g = DataGrid::new(0, 1, 300, vec![4]).unwrap();
        let d = |l| DetectorRef::new(1, l);
        for l in 2..=4 {
            g.set(0, 0, d(l), Cell::observed(100.0, 0.1));
        }
        g.set(0, 0, d(1), Cell::MISSING);
        let mut pairs = Vec::new();
        for (l, a) in [(2, -5.0), (3, 0.0), (4, 10.0)] {
            for q in [Quantity::Flow, Quantity::Occupancy] {
                pairs.push(PairFit { target: d(1), neighbor: d(l), quantity: q, line: line(a, 1.0), n: 60, resid_sd: 0.0 });
            }
        }
        let m = PairwiseModel::from_pairs(pairs);
        let v = impute_cell(&g, &m, None, 0, 0, d(1), &ImputeConfig::default());
        assert_eq!(v.flow, 100.0);
        assert_eq!(v.source, CellSource::Neighbor);
        // Occupancy regressions give {-4.9, 0.1, 10.1}; the median survives clamping.
        assert!((v.occupancy - 0.1).abs() < 1e-12);

        let single = PairwiseModel::from_pairs(vec![PairFit { target: d(1), neighbor: d(2), quantity: Quantity::Flow, line: line(0.0, 1.0), n: 60, resid_sd: 0.0 }]);
        assert_eq!(impute_cell(&g, &single, None, 0, 0, d(1), &ImputeConfig::default()).flow, 100.0);
    }

    #[test]
    fn history_fallback() {
        // Two Mondays with flows 40 and 45 at slot 10; the third day is the target.
        let mut hist = DataGrid::new(961_372_800, 15, 300, vec![2]).unwrap();
        for (d, f) in [(0, 40.0), (7, 45.0)] {
            hist.set(d, 10, lane(1), Cell::observed(f, 0.1));
        }
        let h = HistoryTable::from_grid(&hist);
        let mut g = hist.select_days(&[14]);
        g.set(0, 10, lane(1), Cell::MISSING);
        g.set(0, 10, lane(2), Cell::MISSING);
        let v = impute_cell(&g, &PairwiseModel::default(), Some(&h), 0, 10, lane(1), &ImputeConfig::default());
        assert_eq!(v.flow, 42.5);
        assert_eq!(v.source, CellSource::History);

        g.set(0, 10, lane(2), Cell::observed(12.0, 0.05));
        let v = impute_cell(&g, &PairwiseModel::default(), None, 0, 10, lane(1), &ImputeConfig::default());
        assert_eq!((v.flow, v.source), (12.0, CellSource::Corridor));
    }

    #[test]
    fn grid_counts() {
        let g = two_lane_grid(2, |d, t| ((t % 40 + d) as f64, 0.002 * (t % 40) as f64));
        let m = fit_pairwise(&g, 50, Exec::Sequential);
        let (same, r) = impute_grid(&g, &m, None, &ImputeConfig::default(), Exec::Sequential);
        assert_eq!(same, g);
        assert_eq!(r.imputed(), 0);

        let mut h = g.clone();
        h.set(1, 33, lane(1), Cell::MISSING);
        let (done, r) = impute_grid(&h, &m, None, &ImputeConfig::default(), Exec::Parallel);
        assert_eq!(r.neighbor, 1);
        assert_eq!(r.total(), 2 * 288 * 2);
        let c = done.get(1, 33, lane(1));
        assert_eq!(c.health, HealthFlag::Missing);
        assert!((c.flow - g.get(1, 33, lane(1)).flow).abs() < 1e-9);
        let (again, _) = impute_grid(&done, &m, None, &ImputeConfig::default(), Exec::Sequential);
        assert_eq!(again, done);
    }

    #[test]
    fn model_csv_round_trip() {
        let g = two_lane_grid(1, |_, t| ((t % 50) as f64, 0.001 * (t % 90) as f64));
        let m = fit_pairwise(&g, 50, Exec::Sequential);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(PairwiseModel::read_csv(buf.as_slice()).unwrap().pairs(), m.pairs());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn imputation_invariants(
            seed in prop::collection::vec((0.0f64..40.0, 0.0f64..0.5, 0u8..10), 288 * 3),
            coefs in prop::collection::vec((-20.0f64..20.0, -2.0f64..2.0), 6),
        ) {
            let mut g = DataGrid::new(0, 1, 300, vec![3]).unwrap();
            for t in 0..288 {
                for l in 1..=3u16 {
                    let (f, o, m) = seed[t * 3 + l as usize - 1];
                    let c = match m { 0 => Cell::MISSING, 1 => Cell { health: HealthFlag::Malfunctioning, ..Cell::observed(f, o) }, _ => Cell::observed(f, o) };
                    g.set(0, t, DetectorRef::new(1, l), c);
                }
            }
            let mut pairs = Vec::new();
            let mut k = 0;
            for i in 1..=3u16 {
                for j in (1..=3u16).filter(|&j| j != i) {
                    for q in [Quantity::Flow, Quantity::Occupancy] {
                        let (a, b) = coefs[k % 6];
                        k += 1;
                        pairs.push(PairFit { target: DetectorRef::new(1, i), neighbor: DetectorRef::new(1, j), quantity: q, line: line(a, b), n: 100, resid_sd: 1.0 });
                    }
                }
            }
            let m = PairwiseModel::from_pairs(pairs);
            let cfg = ImputeConfig::default();
            let (out, r) = impute_grid(&g, &m, None, &cfg, Exec::Sequential);
            prop_assert_eq!(r.total(), 288 * 3);
            for (d, t, det, c) in out.iter() {
                prop_assert!(c.has_value());
                prop_assert!((0.0..=1.0).contains(&c.occupancy) && c.flow >= 0.0);
                let orig = g.get(d, t, det);
                if orig.has_value() {
                    prop_assert_eq!(c, orig);
                } else if c.source == CellSource::Neighbor {
                    let vals: Vec<f64> = m.for_target(det, Quantity::Flow).iter()
                        .filter(|p| g.get(d, t, p.neighbor).is_good())
                        .map(|p| p.line.eval(g.get(d, t, p.neighbor).flow)).collect();
                    if !vals.is_empty() {
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
                        prop_assert!(c.flow >= lo - 1e-12 && c.flow <= hi + 1e-12);
                    }
                }
            }
            let (again, _) = impute_grid(&out, &m, None, &cfg, Exec::Sequential);
            prop_assert_eq!(again, out);
        }
    }
}
