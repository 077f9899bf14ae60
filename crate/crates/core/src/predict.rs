//! Corridor travel times and their prediction.
//!
//! Realized trip times come from walking a point vehicle through the station
//! speed field; the current-status time freezes the field at the departure
//! slot. Predictors: historical mean, current status, varying-coefficient
//! regression, a low-rank Gaussian conditional mean, and nearest-neighbour
//! days. All travel times are in minutes.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::exec::Exec;
use crate::io::{comment_pairs, expect_fields, for_each_record, parse_field, FormatError};
use crate::model::{CorridorLayout, DayTravel, StationSpeeds, TravelTimeSeries, VelocityField};
use crate::statkit::{conditional_mean_at, fit_truncated_gaussian, gaussian_weight, wls_fit, Ridge, StatError, TruncatedGaussianModel};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("trip runs past the last available slot")]
    FieldExhausted,
    #[error("no usable speed at station {station}, slot {slot}")]
    MissingVelocity { station: usize, slot: usize },
    #[error("empty day set")]
    EmptyDaySet,
    #[error("degenerate design at slot {0}")]
    DegenerateDesign(usize),
    #[error("({tau_min} min, {delta_min} min) is outside the fitted grid")]
    OutsideGrid { tau_min: f64, delta_min: f64 },
    #[error("empty distance window")]
    EmptyWindow,
    #[error("insufficient history: need {need} days, got {got}")]
    InsufficientHistory { need: usize, got: usize },
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("metric m1 needs the station speed field")]
    SpeedsRequired,
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Station speeds (mph) by slot of day; stations are 1-based.
pub trait SpeedLookup {
    fn slots(&self) -> usize;
    fn slot_seconds(&self) -> f64;
    fn mph(&self, slot: usize, station: usize) -> f64;
}

impl SpeedLookup for StationSpeeds {
    fn slots(&self) -> usize {
        self.slots
    }
    fn slot_seconds(&self) -> f64 {
        self.slot_seconds as f64
    }
    fn mph(&self, slot: usize, station: usize) -> f64 {
        self.at(slot, station)
    }
}

fn check_route(layout: &CorridorLayout, a: usize, b: usize) -> Result<(), PredictError> {
    if a == 0 || b > layout.len() || a > b {
        return Err(PredictError::InvalidRoute(format!("{a} -> {b} on a corridor of {} stations", layout.len())));
    }
    Ok(())
}

fn segment_speed<S: SpeedLookup>(field: &S, slot: usize, i: usize) -> Result<f64, PredictError> {
    let v = 0.5 * (field.mph(slot, i) + field.mph(slot, i + 1));
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(PredictError::MissingVelocity { station: i, slot })
    }
}

/// Trip time from station `a` to `b` departing `depart_seconds` after
/// midnight. Within each segment the speed is the mean of its two end
/// stations at the current slot; the vehicle advances to the next segment
/// or slot boundary, whichever comes first.
pub fn travel_time_walk<S: SpeedLookup>(
    field: &S,
    layout: &CorridorLayout,
    a: usize,
    b: usize,
    depart_seconds: f64,
) -> Result<f64, PredictError> {
    check_route(layout, a, b)?;
    let slot_s = field.slot_seconds();
    let mut t = depart_seconds;
    for i in a..b {
        let mut rem = layout.segment_length(i);
        while rem > 0.0 {
            let slot = (t / slot_s).floor();
            if slot < 0.0 || slot as usize >= field.slots() {
                return Err(PredictError::FieldExhausted);
            }
            let slot = slot as usize;
            let v = segment_speed(field, slot, i)?;
            let t_end = (slot + 1) as f64 * slot_s;
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
    Ok((t - depart_seconds) / 60.0)
}

/// Frozen-field trip time at `slot`: the sum of `2 u_i / (v_i + v_{i+1})`.
pub fn current_status<S: SpeedLookup>(field: &S, layout: &CorridorLayout, a: usize, b: usize, slot: usize) -> Result<f64, PredictError> {
    check_route(layout, a, b)?;
    let mut hours = 0.0;
    for i in a..b {
        hours += layout.segment_length(i) / segment_speed(field, slot, i)?;
    }
    Ok(hours * 60.0)
}

/// Departure window in slots of day, `[first, last)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub first: usize,
    pub last: usize,
}

/// Realized and current-status series for every day of a field. Trips that
/// run off the end of the day are NaN.
pub fn compute_series(
    field: &VelocityField,
    layout: &CorridorLayout,
    a: usize,
    b: usize,
    window: Window,
    exec: Exec,
) -> Result<TravelTimeSeries, PredictError> {
    check_route(layout, a, b)?;
    let slot_s = field.slot_seconds() as f64;
    let days = exec.map_range(field.days(), |d| -> Result<DayTravel, PredictError> {
        let speeds = field.station_day(d);
        let mut realized = Vec::with_capacity(window.last - window.first);
        let mut current = Vec::with_capacity(window.last - window.first);
        for slot in window.first..window.last {
            realized.push(match travel_time_walk(&speeds, layout, a, b, slot as f64 * slot_s) {
                Ok(v) => v,
                Err(PredictError::FieldExhausted) => f64::NAN,
                Err(e) => return Err(e),
            });
            current.push(current_status(&speeds, layout, a, b, slot)?);
        }
        Ok(DayTravel { day: d, realized, current_status: current })
    });
    Ok(TravelTimeSeries {
        origin: a,
        destination: b,
        slot_minutes: slot_s / 60.0,
        first_slot: window.first,
        days: days.into_iter().collect::<Result<_, _>>()?,
    })
}

/// Mean realized time at a series position over the given days.
pub fn historical_mean(series: &TravelTimeSeries, days: &[usize], pos: usize) -> Result<f64, PredictError> {
    let v: Vec<f64> = days.iter().map(|&d| series.days[d].realized[pos]).filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Err(PredictError::EmptyDaySet);
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Arrival-indexed series: position `p` holds the trip time of the trip
/// arriving at the start of slot `p`, interpolated linearly between the two
/// departures that bracket that arrival. Current-status values are kept.
pub fn arrival_series(series: &TravelTimeSeries) -> TravelTimeSeries {
    let mut out = series.clone();
    for day in &mut out.days {
        let dep = series.days.iter().find(|d| d.day == day.day).expect("same days");
        day.realized = (0..series.len()).map(|p| arrival_time_at(series, &dep.realized, series.minute_of(p))).collect();
    }
    out
}

/// Trip time for arrival at `arrive_min`, or NaN when no departure in the
/// window arrives by then.
pub fn arrival_time_at(series: &TravelTimeSeries, realized: &[f64], arrive_min: f64) -> f64 {
    let arr = |p: usize| series.minute_of(p) + realized[p];
    let Some(p) = (0..realized.len()).rev().find(|&p| realized[p].is_finite() && arr(p) <= arrive_min) else {
        return f64::NAN;
    };
    match realized.get(p + 1) {
        Some(&next) if next.is_finite() && arr(p + 1) > arr(p) => {
            let f = (arrive_min - arr(p)) / (arr(p + 1) - arr(p));
            realized[p] + f * (next - realized[p])
        }
        _ => realized[p],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coef {
    pub alpha: f64,
    pub beta: f64,
    /// Kish effective sample size of the kernel weights.
    pub n_eff: f64,
}

/// Intercept and slope at (departure position, horizon) nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientGrid {
    pub slot_minutes: f64,
    pub first_slot: usize,
    /// Fitted departure positions, ascending.
    pub positions: Vec<usize>,
    /// Horizons in minutes, ascending.
    pub deltas: Vec<f64>,
    pub sigma_min: f64,
    /// Row-major over (position, delta).
    pub coefs: Vec<Coef>,
}

impl CoefficientGrid {
    pub fn at(&self, i: usize, j: usize) -> &Coef {
        &self.coefs[i * self.deltas.len() + j]
    }

    /// Nearest node within half a node spacing of `(tau_min, delta_min)`.
    pub fn lookup(&self, tau_min: f64, delta_min: f64) -> Result<&Coef, PredictError> {
        let outside = || PredictError::OutsideGrid { tau_min, delta_min };
        let minutes: Vec<f64> = self.positions.iter().map(|&p| (self.first_slot + p) as f64 * self.slot_minutes).collect();
        let i = nearest(&minutes, tau_min, self.slot_minutes).ok_or_else(outside)?;
        let j = nearest(&self.deltas, delta_min, 1.0).ok_or_else(outside)?;
        Ok(self.at(i, j))
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header: &str) -> io::Result<()> {
        writeln!(
            w,
            "# coefficients {header} slot_minutes={} first_slot={} sigma_min={}",
            self.slot_minutes, self.first_slot, self.sigma_min
        )?;
        writeln!(w, "t_slot,delta_min,alpha,beta,n_eff")?;
        for (i, &p) in self.positions.iter().enumerate() {
            for (j, &d) in self.deltas.iter().enumerate() {
                let c = self.at(i, j);
                writeln!(w, "{},{},{},{},{}", self.first_slot + p, d, c.alpha, c.beta, c.n_eff)?;
            }
        }
        Ok(())
    }

    /// Reads a grid and the `key=value` pairs of its header comment.
    pub fn read_csv<R: BufRead>(r: R) -> Result<(Self, BTreeMap<String, String>), PredictError> {
        let mut meta = BTreeMap::new();
        let mut rows: Vec<(usize, f64, Coef)> = Vec::new();
        for_each_record(
            r,
            |c| {
                if c.starts_with("coefficients") {
                    meta.extend(comment_pairs(c).map(|(k, v)| (k.to_string(), v.to_string())));
                }
            },
            |line, f| {
                expect_fields(line, f, 5)?;
                rows.push((
                    parse_field(line, f, 0, "t_slot")?,
                    parse_field(line, f, 1, "delta_min")?,
                    Coef {
                        alpha: parse_field(line, f, 2, "alpha")?,
                        beta: parse_field(line, f, 3, "beta")?,
                        n_eff: parse_field(line, f, 4, "n_eff")?,
                    },
                ));
                Ok(())
            },
        )?;
        let get = |k: &str| meta.get(k).and_then(|v: &String| v.parse::<f64>().ok());
        let slot_minutes = get("slot_minutes").unwrap_or(5.0);
        let first_slot = get("first_slot").unwrap_or(0.0) as usize;
        let sigma_min = get("sigma_min").unwrap_or(f64::NAN);
        let mut slots: Vec<usize> = rows.iter().map(|r| r.0).collect();
        slots.sort_unstable();
        slots.dedup();
        let mut deltas: Vec<f64> = rows.iter().map(|r| r.1).collect();
        deltas.sort_by(f64::total_cmp);
        deltas.dedup();
        if slots.first().is_some_and(|&s| s < first_slot) || slots.len() * deltas.len() != rows.len() {
            return Err(FormatError::Invalid("coefficient grid is not rectangular".into()).into());
        }
        let mut coefs = vec![Coef { alpha: f64::NAN, beta: f64::NAN, n_eff: 0.0 }; rows.len()];
        for (s, d, c) in rows {
            let i = slots.binary_search(&s).expect("collected above");
            let j = deltas.iter().position(|&x| x == d).expect("collected above");
            coefs[i * deltas.len() + j] = c;
        }
        let positions = slots.into_iter().map(|s| s - first_slot).collect();
        Ok((Self { slot_minutes, first_slot, positions, deltas, sigma_min, coefs }, meta))
    }
}

fn nearest(nodes: &[f64], x: f64, default_spacing: f64) -> Option<usize> {
    let i = (0..nodes.len()).min_by(|&i, &j| (nodes[i] - x).abs().total_cmp(&(nodes[j] - x).abs()))?;
    let spacing = if nodes.len() > 1 {
        nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    } else {
        default_spacing
    };
    ((nodes[i] - x).abs() <= 0.5 * spacing + 1e-9).then_some(i)
}

/// Kernel-weighted least squares of `T_d(s)` on `T*_d(t)` over all days `d`
/// and response slots `s`, with Gaussian weights `K(t + delta - s)`, at every
/// requested (position, horizon) node.
pub fn fit_varying_coefficients(
    series: &TravelTimeSeries,
    days: &[usize],
    positions: &[usize],
    deltas: &[f64],
    sigma_min: f64,
    exec: Exec,
) -> Result<CoefficientGrid, PredictError> {
    if days.len() < 2 {
        return Err(PredictError::InsufficientHistory { need: 2, got: days.len() });
    }
    let nd = deltas.len();
    let coefs = exec.map_range(positions.len() * nd, |i| {
        fit_node(series, days, positions[i / nd], deltas[i % nd], sigma_min)
    });
    Ok(CoefficientGrid {
        slot_minutes: series.slot_minutes,
        first_slot: series.first_slot,
        positions: positions.to_vec(),
        deltas: deltas.to_vec(),
        sigma_min,
        coefs: coefs.into_iter().collect::<Result<_, _>>()?,
    })
}

fn fit_node(series: &TravelTimeSeries, days: &[usize], pos: usize, delta: f64, sigma: f64) -> Result<Coef, PredictError> {
    let target = series.minute_of(pos) + delta;
    let kernel: Vec<f64> = (0..series.len()).map(|s| gaussian_weight(target - series.minute_of(s), sigma)).collect();
    let mut pts = Vec::with_capacity(days.len() * series.len());
    let mut w = Vec::with_capacity(pts.capacity());
    for &d in days {
        let day = &series.days[d];
        let x = day.current_status[pos];
        if !x.is_finite() {
            continue;
        }
        for (s, &y) in day.realized.iter().enumerate() {
            if y.is_finite() && kernel[s] > 0.0 {
                pts.push((x, y));
                w.push(kernel[s]);
            }
        }
    }
    let line = wls_fit(&pts, &w).map_err(|_| PredictError::DegenerateDesign(series.first_slot + pos))?;
    let (s1, s2) = w.iter().fold((0.0, 0.0), |(a, b), x| (a + x, b + x * x));
    Ok(Coef { alpha: line.intercept, beta: line.slope, n_eff: s1 * s1 / s2 })
}

/// `alpha + beta * T*` at the nearest fitted node.
pub fn predict_regression(grid: &CoefficientGrid, tau_min: f64, delta_min: f64, tstar: f64) -> Result<f64, PredictError> {
    let c = grid.lookup(tau_min, delta_min)?;
    Ok(c.alpha + c.beta * tstar)
}

/// Trip minutes for the arrival at `tau + delta`, and the implied departure
/// time in minutes after midnight.
pub fn predict_arrival(grid: &CoefficientGrid, tau_min: f64, delta_min: f64, tstar: f64) -> Result<(f64, f64), PredictError> {
    let trip = predict_regression(grid, tau_min, delta_min, tstar)?;
    Ok((trip, tau_min + delta_min - trip))
}

/// Vector `(T_d(.), T*_d(.))` of a day, or `None` if any entry is undefined.
pub fn day_vector(day: &DayTravel) -> Option<Vec<f64>> {
    let v: Vec<f64> = day.realized.iter().chain(&day.current_status).copied().collect();
    v.iter().all(|x| x.is_finite()).then_some(v)
}

pub fn fit_pca(series: &TravelTimeSeries, days: &[usize], rank: usize, ridge: Ridge) -> Result<TruncatedGaussianModel, PredictError> {
    let vecs: Vec<Vec<f64>> = days.iter().filter_map(|&d| day_vector(&series.days[d])).collect();
    Ok(fit_truncated_gaussian(&vecs, rank.min(2 * series.len()), ridge)?)
}

/// Latest departure position whose trip has completed by `tau_min`.
pub fn last_completed(series: &TravelTimeSeries, day: &DayTravel, tau_min: f64) -> Option<usize> {
    (0..series.len()).rev().find(|&p| day.realized[p].is_finite() && series.minute_of(p) + day.realized[p] <= tau_min + 1e-9)
}

/// Conditional mean of `T_e` at position `tau_pos + delta_slots` given the
/// completed trips and the current-status values up to `tau_pos`. Without a
/// completed trip only the current-status block is used.
pub fn predict_pca(
    model: &TruncatedGaussianModel,
    series: &TravelTimeSeries,
    day: &DayTravel,
    tau_pos: usize,
    delta_slots: usize,
) -> Result<f64, PredictError> {
    let l = series.len();
    let target = tau_pos + delta_slots;
    if target >= l || model.dim() != 2 * l {
        return Err(PredictError::OutsideGrid { tau_min: series.minute_of(tau_pos), delta_min: delta_slots as f64 * series.slot_minutes });
    }
    let mut observed = Vec::new();
    let mut values = Vec::new();
    if let Some(tp) = last_completed(series, day, series.minute_of(tau_pos)) {
        for p in 0..=tp {
            observed.push(p);
            values.push(day.realized[p]);
        }
    }
    for p in 0..=tau_pos {
        if day.current_status[p].is_finite() {
            observed.push(l + p);
            values.push(day.current_status[p]);
        }
    }
    Ok(conditional_mean_at(model, &observed, &values, &[target])?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Absolute speed differences over the stations of the route.
    M1,
    /// Euclidean distance of current-status trajectories.
    #[default]
    M2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnConfig {
    pub metric: Metric,
    pub window_min: f64,
    pub k: usize,
}

impl Default for NnConfig {
    fn default() -> Self {
        Self { metric: Metric::M2, window_min: 20.0, k: 2 }
    }
}

/// Series positions in `(tau - w, tau]`.
fn window_positions(series: &TravelTimeSeries, tau_pos: usize, window_min: f64) -> std::ops::RangeInclusive<usize> {
    let n = ((window_min / series.slot_minutes).ceil() as usize).max(1);
    (tau_pos + 1).saturating_sub(n)..=tau_pos
}

/// `m2`: Euclidean distance of the current-status values in the window.
pub fn nn_distance_m2(series: &TravelTimeSeries, d: &DayTravel, e: &DayTravel, tau_pos: usize, window_min: f64) -> Result<f64, PredictError> {
    let mut s = 0.0;
    let mut n = 0;
    for p in window_positions(series, tau_pos, window_min) {
        let (x, y) = (e.current_status.get(p), d.current_status.get(p));
        if let (Some(x), Some(y)) = (x, y) {
            if x.is_finite() && y.is_finite() {
                s += (x - y).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(PredictError::EmptyWindow);
    }
    Ok(s.sqrt())
}

/// `m1`: summed absolute speed differences over stations `a..=b` and the
/// slots of the window ending at `tau_slot`.
pub fn nn_distance_m1<S: SpeedLookup>(d: &S, e: &S, a: usize, b: usize, tau_slot: usize, window_min: f64) -> Result<f64, PredictError> {
    let n = ((window_min * 60.0 / d.slot_seconds()).ceil() as usize).max(1);
    let lo = (tau_slot + 1).saturating_sub(n);
    if tau_slot >= d.slots().min(e.slots()) {
        return Err(PredictError::EmptyWindow);
    }
    let mut s = 0.0;
    for t in lo..=tau_slot {
        for i in a..=b {
            s += (e.mph(t, i) - d.mph(t, i)).abs();
        }
    }
    Ok(s)
}

/// Mean target of the `k` closest candidates `(day, distance, target)`;
/// equal distances go to the lower day index. Candidates with an undefined
/// target are skipped.
pub fn predict_nn(candidates: &[(usize, f64, f64)], k: usize) -> Result<f64, PredictError> {
    let mut c: Vec<&(usize, f64, f64)> = candidates.iter().filter(|c| c.2.is_finite() && c.1.is_finite()).collect();
    if k == 0 || c.len() < k {
        return Err(PredictError::InsufficientHistory { need: k.max(1), got: c.len() });
    }
    c.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    Ok(c[..k].iter().map(|x| x.2).sum::<f64>() / k as f64)
}

/// Trip time over the ordered waypoints: each leg departs when the previous
/// one arrives. `leg(from, to, depart_min)` predicts a single leg.
pub fn compose_route<F>(waypoints: &[usize], depart_min: f64, mut leg: F) -> Result<f64, PredictError>
where
    F: FnMut(usize, usize, f64) -> Result<f64, PredictError>,
{
    if waypoints.len() < 2 {
        return Err(PredictError::InvalidRoute("a route needs at least two waypoints".into()));
    }
    let mut t = depart_min;
    for w in waypoints.windows(2) {
        t += if w[0] == w[1] { 0.0 } else { leg(w[0], w[1], t)? };
    }
    Ok(t - depart_min)
}

/// A prediction method that can be refitted on a subset of days.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn fit(&self, series: &TravelTimeSeries, train: &[usize], plan: &EvalPlan) -> Result<Box<dyn Fitted>, PredictError>;
}

pub trait Fitted: Send {
    fn predict(&self, series: &TravelTimeSeries, day: &DayTravel, tau_pos: usize, delta_slots: usize) -> Result<f64, PredictError>;
}

/// Evaluation nodes: departure positions and horizons in slots.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub taus: Vec<usize>,
    pub deltas: Vec<usize>,
}

pub struct Historical;

struct HistoricalFit {
    mean: Vec<f64>,
}

impl Predictor for Historical {
    fn name(&self) -> String {
        "historical".into()
    }
    fn fit(&self, series: &TravelTimeSeries, train: &[usize], _: &EvalPlan) -> Result<Box<dyn Fitted>, PredictError> {
        let mean = (0..series.len()).map(|p| historical_mean(series, train, p).unwrap_or(f64::NAN)).collect();
        Ok(Box::new(HistoricalFit { mean }))
    }
}

impl Fitted for HistoricalFit {
    fn predict(&self, _: &TravelTimeSeries, _: &DayTravel, tau_pos: usize, delta_slots: usize) -> Result<f64, PredictError> {
        self.mean.get(tau_pos + delta_slots).copied().filter(|v| v.is_finite()).ok_or(PredictError::EmptyDaySet)
    }
}

pub struct CurrentStatus;

struct CurrentStatusFit;

impl Predictor for CurrentStatus {
    fn name(&self) -> String {
        "current".into()
    }
    fn fit(&self, _: &TravelTimeSeries, _: &[usize], _: &EvalPlan) -> Result<Box<dyn Fitted>, PredictError> {
        Ok(Box::new(CurrentStatusFit))
    }
}

impl Fitted for CurrentStatusFit {
    fn predict(&self, _: &TravelTimeSeries, day: &DayTravel, tau_pos: usize, _: usize) -> Result<f64, PredictError> {
        Ok(day.current_status[tau_pos])
    }
}

pub struct Regression {
    pub sigma_min: f64,
}

struct RegressionFit(CoefficientGrid);

impl Predictor for Regression {
    fn name(&self) -> String {
        "regression".into()
    }
    fn fit(&self, series: &TravelTimeSeries, train: &[usize], plan: &EvalPlan) -> Result<Box<dyn Fitted>, PredictError> {
        let deltas: Vec<f64> = plan.deltas.iter().map(|&d| d as f64 * series.slot_minutes).collect();
        let grid = fit_varying_coefficients(series, train, &plan.taus, &deltas, self.sigma_min, Exec::Sequential)?;
        Ok(Box::new(RegressionFit(grid)))
    }
}

impl Fitted for RegressionFit {
    fn predict(&self, series: &TravelTimeSeries, day: &DayTravel, tau_pos: usize, delta_slots: usize) -> Result<f64, PredictError> {
        predict_regression(&self.0, series.minute_of(tau_pos), delta_slots as f64 * series.slot_minutes, day.current_status[tau_pos])
    }
}

pub struct Pca {
    pub rank: usize,
    pub ridge: Ridge,
}

struct PcaFit(TruncatedGaussianModel);

impl Predictor for Pca {
    fn name(&self) -> String {
        "pca".into()
    }
    fn fit(&self, series: &TravelTimeSeries, train: &[usize], _: &EvalPlan) -> Result<Box<dyn Fitted>, PredictError> {
        Ok(Box::new(PcaFit(fit_pca(series, train, self.rank, self.ridge)?)))
    }
}

impl Fitted for PcaFit {
    fn predict(&self, series: &TravelTimeSeries, day: &DayTravel, tau_pos: usize, delta_slots: usize) -> Result<f64, PredictError> {
        predict_pca(&self.0, series, day, tau_pos, delta_slots)
    }
}

/// Nearest-neighbour days. Metric `m1` needs the per-day station speeds of
/// the field the series was computed from.
pub struct NearestNeighbors {
    pub cfg: NnConfig,
    pub speeds: Option<Arc<Vec<StationSpeeds>>>,
}

impl NearestNeighbors {
    pub fn m2(cfg: NnConfig) -> Self {
        Self { cfg: NnConfig { metric: Metric::M2, ..cfg }, speeds: None }
    }

    pub fn m1(cfg: NnConfig, field: &VelocityField) -> Self {
        let speeds = (0..field.days()).map(|d| field.station_day(d)).collect();
        Self { cfg: NnConfig { metric: Metric::M1, ..cfg }, speeds: Some(Arc::new(speeds)) }
    }
}

struct NnFit {
    train: Vec<usize>,
    cfg: NnConfig,
    speeds: Option<Arc<Vec<StationSpeeds>>>,
}

impl Predictor for NearestNeighbors {
    fn name(&self) -> String {
        "nn".into()
    }
    fn fit(&self, _: &TravelTimeSeries, train: &[usize], _: &EvalPlan) -> Result<Box<dyn Fitted>, PredictError> {
        if self.cfg.metric == Metric::M1 && self.speeds.is_none() {
            return Err(PredictError::SpeedsRequired);
        }
        Ok(Box::new(NnFit { train: train.to_vec(), cfg: self.cfg, speeds: self.speeds.clone() }))
    }
}

impl Fitted for NnFit {
    fn predict(&self, series: &TravelTimeSeries, day: &DayTravel, tau_pos: usize, delta_slots: usize) -> Result<f64, PredictError> {
        let target = tau_pos + delta_slots;
        let (a, b) = (series.origin, series.destination);
        let cands = self
            .train
            .iter()
            .map(|&d| {
                let h = &series.days[d];
                let dist = match (self.cfg.metric, &self.speeds) {
                    (Metric::M1, Some(sp)) => {
                        nn_distance_m1(&sp[h.day], &sp[day.day], a.min(b), a.max(b), series.first_slot + tau_pos, self.cfg.window_min)?
                    }
                    _ => nn_distance_m2(series, h, day, tau_pos, self.cfg.window_min)?,
                };
                Ok((h.day, dist, h.realized.get(target).copied().unwrap_or(f64::NAN)))
            })
            .collect::<Result<Vec<_>, PredictError>>()?;
        predict_nn(&cands, self.cfg.k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseRow {
    pub method: String,
    pub tau_min: f64,
    pub delta_min: f64,
    pub rmse: f64,
    /// Held-out days that contributed.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RmseTable {
    pub rows: Vec<RmseRow>,
}

impl RmseTable {
    pub fn get(&self, method: &str, tau_min: f64, delta_min: f64) -> Option<&RmseRow> {
        self.rows.iter().find(|r| r.method == method && r.tau_min == tau_min && r.delta_min == delta_min)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "method,tau,delta,rmse_min")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.method, r.tau_min, r.delta_min, r.rmse)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, PredictError> {
        let mut rows = Vec::new();
        for_each_record(
            r,
            |_| {},
            |line, f| {
                expect_fields(line, f, 4)?;
                rows.push(RmseRow {
                    method: f[0].to_string(),
                    tau_min: parse_field(line, f, 1, "tau")?,
                    delta_min: parse_field(line, f, 2, "delta")?,
                    rmse: parse_field(line, f, 3, "rmse_min")?,
                    n: 0,
                });
                Ok(())
            },
        )?;
        Ok(Self { rows })
    }
}

/// Leave-one-day-out RMSE for every method and evaluation node. Each fold
/// refits every method on the remaining days only; folds run in parallel.
pub fn evaluate_loo(series: &TravelTimeSeries, methods: &[&dyn Predictor], plan: &EvalPlan, exec: Exec) -> Result<RmseTable, PredictError> {
    let nd = series.days.len();
    if nd < 3 {
        return Err(PredictError::InsufficientHistory { need: 3, got: nd });
    }
    let nodes = plan.taus.len() * plan.deltas.len();
    // errs[fold][method][node] = squared error or NaN
    let errs = exec.map_range(nd, |held| -> Vec<Vec<f64>> {
        let train: Vec<usize> = (0..nd).filter(|&d| d != held).collect();
        let day = &series.days[held];
        methods
            .iter()
            .map(|m| {
                let Ok(fit) = m.fit(series, &train, plan) else { return vec![f64::NAN; nodes] };
                let mut out = Vec::with_capacity(nodes);
                for &tau in &plan.taus {
                    for &delta in &plan.deltas {
                        let truth = day.realized.get(tau + delta).copied().unwrap_or(f64::NAN);
                        let e = match fit.predict(series, day, tau, delta) {
                            Ok(p) if truth.is_finite() && p.is_finite() => (p - truth).powi(2),
                            _ => f64::NAN,
                        };
                        out.push(e);
                    }
                }
                out
            })
            .collect()
    });
    let mut rows = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        let name = m.name();
        for (ti, &tau) in plan.taus.iter().enumerate() {
            for (di, &delta) in plan.deltas.iter().enumerate() {
                let node = ti * plan.deltas.len() + di;
                let v: Vec<f64> = errs.iter().map(|f| f[mi][node]).filter(|e| e.is_finite()).collect();
                let rmse = if v.is_empty() { f64::NAN } else { (v.iter().sum::<f64>() / v.len() as f64).sqrt() };
                rows.push(RmseRow {
                    method: name.clone(),
                    tau_min: series.minute_of(tau),
                    delta_min: delta as f64 * series.slot_minutes,
                    rmse,
                    n: v.len(),
                });
            }
        }
    }
    Ok(RmseTable { rows })
}

pub fn write_series<W: Write>(series: &TravelTimeSeries, w: W) -> io::Result<()> {
    let mut w = io::BufWriter::new(w);
    writeln!(w, "# traveltimes slot_minutes={} first_slot={}", series.slot_minutes, series.first_slot)?;
    writeln!(w, "origin,destination,day,slot,T_min,Tstar_min")?;
    for d in &series.days {
        for p in 0..series.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                series.origin,
                series.destination,
                d.day,
                series.first_slot + p,
                d.realized[p],
                d.current_status[p]
            )?;
        }
    }
    w.flush()
}

pub fn read_series<R: BufRead>(r: R) -> Result<TravelTimeSeries, PredictError> {
    let mut slot_minutes = 5.0;
    let mut rows: Vec<(usize, usize, usize, usize, f64, f64)> = Vec::new();
    for_each_record(
        r,
        |c| {
            if c.starts_with("traveltimes") {
                for (k, v) in comment_pairs(c) {
                    if k == "slot_minutes" {
                        slot_minutes = v.parse().unwrap_or(5.0);
                    }
                }
            }
        },
        |line, f| {
            expect_fields(line, f, 6)?;
            rows.push((
                parse_field(line, f, 0, "origin")?,
                parse_field(line, f, 1, "destination")?,
                parse_field(line, f, 2, "day")?,
                parse_field(line, f, 3, "slot")?,
                parse_field(line, f, 4, "T_min")?,
                parse_field(line, f, 5, "Tstar_min")?,
            ));
            Ok(())
        },
    )?;
    let first = rows.first().ok_or_else(|| FormatError::Invalid("no travel-time rows".into()))?;
    let (origin, destination) = (first.0, first.1);
    let first_slot = rows.iter().map(|r| r.3).min().unwrap_or(0);
    let len = rows.iter().map(|r| r.3).max().unwrap_or(0) + 1 - first_slot;
    let mut days: BTreeMap<usize, DayTravel> = BTreeMap::new();
    for r in rows {
        if (r.0, r.1) != (origin, destination) {
            return Err(FormatError::Invalid("travel-time file mixes routes".into()).into());
        }
        let d = days.entry(r.2).or_insert_with(|| DayTravel { day: r.2, realized: vec![f64::NAN; len], current_status: vec![f64::NAN; len] });
        d.realized[r.3 - first_slot] = r.4;
        d.current_status[r.3 - first_slot] = r.5;
    }
    Ok(TravelTimeSeries { origin, destination, slot_minutes, first_slot, days: days.into_values().collect() })
}

/// One output line of the prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub origin: usize,
    pub destination: usize,
    pub arrive: bool,
    pub slot: usize,
    pub delta_min: f64,
    pub method: String,
    pub predicted_min: f64,
}

impl PredictionRecord {
    pub const HEADER: &'static str = "origin,destination,depart_or_arrive,slot,delta_min,method,predicted_min";

    pub fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.origin,
            self.destination,
            if self.arrive { "A" } else { "D" },
            self.slot,
            self.delta_min,
            self.method,
            self.predicted_min
        )
    }
}
