//! Subcommand implementations. Artifact names are fixed relative to the
//! data directory.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use loopgrid::config::{format_clock, parse_clock, parse_list};
use loopgrid::impute::{fit_pairwise, impute_grid, HistoryTable};
use loopgrid::ingest::{aggregate, build_grid, parse_samples, read_grid, read_layout, write_grid, write_layout, write_samples, DayRange};
use loopgrid::model::{CorridorLayout, DataGrid, HealthFlag, VelocityField};
use loopgrid::predict::{
    arrival_series, compute_series, evaluate_loo, fit_varying_coefficients, predict_arrival, read_series, write_series, CurrentStatus,
    EvalPlan, Historical, Metric, NearestNeighbors, Pca, PredictionRecord, Predictor, Regression, RmseTable, Window,
};
use loopgrid::quality::{assign_flags, score_grid};
use loopgrid::synth::simulate;
use loopgrid::velocity::{estimate_field, fit_profile, read_field, write_field, MeanLengthProfile};
use loopgrid::{Exec, TravelTimeSeries};

use crate::settings::{parse_methods, PipelineConfig};
use crate::{plot, CliError, Command};

pub const SAMPLES: &str = "samples.csv";
pub const LAYOUT: &str = "layout.csv";
pub const TRUTH: &str = "truth.csv";
pub const GRID: &str = "grid.csv";
pub const INGEST_REPORT: &str = "ingest_report.csv";
pub const HEALTH: &str = "health.csv";
pub const GRID_FLAGGED: &str = "grid_flagged.csv";
pub const PAIRS: &str = "pairs.csv";
pub const GRID_IMPUTED: &str = "grid_imputed.csv";
pub const IMPUTE_REPORT: &str = "impute_report.csv";
pub const MU: &str = "mu.csv";
pub const VELOCITY: &str = "velocity.csv";
pub const TRAVELTIMES: &str = "traveltimes.csv";
pub const COEFFICIENTS: &str = "coefficients.csv";
pub const ARRIVAL_COEFFICIENTS: &str = "arrival_coefficients.csv";
pub const RMSE: &str = "rmse.csv";

pub struct Context {
    pub cfg: PipelineConfig,
    pub dir: PathBuf,
    pub exec: Exec,
}

impl Context {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn open(&self, name: &str) -> Result<BufReader<File>, CliError> {
        open_path(&self.path(name))
    }

    pub fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::new("cli", "Io", format!("{}: {e}", self.dir.display())))?;
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| CliError::new("cli", "Io", format!("{}: {e}", p.display())))?;
        Ok(BufWriter::with_capacity(1 << 20, f))
    }

    pub fn layout(&self) -> Result<CorridorLayout, CliError> {
        read_layout(self.open(LAYOUT)?).map_err(|e| CliError::from_error("ingest", e))
    }

    pub fn grid(&self, name: &str) -> Result<DataGrid, CliError> {
        read_grid(self.open(name)?).map_err(|e| CliError::from_error("ingest", e))
    }

    pub fn field(&self) -> Result<VelocityField, CliError> {
        read_field(self.open(VELOCITY)?).map_err(|e| CliError::from_error("velocity", e))
    }

    pub fn profile(&self) -> Result<MeanLengthProfile, CliError> {
        MeanLengthProfile::read_csv(self.open(MU)?).map_err(|e| CliError::from_error("velocity", e))
    }

    pub fn series(&self) -> Result<TravelTimeSeries, CliError> {
        read_series(self.open(TRAVELTIMES)?).map_err(|e| CliError::from_error("predict", e))
    }

    pub fn rmse(&self) -> Result<RmseTable, CliError> {
        RmseTable::read_csv(self.open(RMSE)?).map_err(|e| CliError::from_error("predict", e))
    }
}

pub fn open_path(p: &Path) -> Result<BufReader<File>, CliError> {
    File::open(p)
        .map(|f| BufReader::with_capacity(1 << 20, f))
        .map_err(|e| CliError::new("cli", "MissingInput", format!("{}: {e}", p.display())))
}

pub fn io_err(e: std::io::Error) -> CliError {
    CliError::new("cli", "Io", e)
}

pub fn dispatch(ctx: &Context, cmd: &Command) -> Result<String, CliError> {
    match cmd {
        Command::Synth => synth(ctx),
        Command::Ingest { input, layout } => ingest(ctx, input.as_deref(), layout.as_deref()),
        Command::Health => health(ctx),
        Command::Impute => impute(ctx),
        Command::FitMu => fit_mu(ctx),
        Command::Speed => speed(ctx),
        Command::Traveltime { from, to } => traveltime(ctx, *from, *to),
        Command::FitPredictors { delta } => fit_predictors(ctx, delta.as_deref()),
        Command::Predict { from, to, depart, arrive, delta, method, day } => {
            let req = PredictRequest {
                from: *from,
                to: *to,
                time: match (depart, arrive) {
                    (Some(t), _) => TripTime::Depart(parse_clock(t).map_err(CliError::bad_args)?),
                    (None, Some(t)) => TripTime::Arrive(parse_clock(t).map_err(CliError::bad_args)?),
                    (None, None) => return Err(CliError::bad_args("one of --depart or --arrive is required")),
                },
                delta_min: *delta,
                method: method.clone(),
                day: *day,
            };
            predict(ctx, &req).map(|r| format!("{}\n{}\n", PredictionRecord::HEADER, r.line()))
        }
        Command::Eval { methods, delta } => eval(ctx, methods.as_deref(), delta.as_deref()),
        Command::Plot { figure, station, lane, day, svg } => plot::emit(ctx, figure, *station, *lane, *day, *svg),
    }
}

pub fn synth(ctx: &Context) -> Result<String, CliError> {
    let out = simulate(&ctx.cfg.world, ctx.exec).map_err(|e| CliError::from_error("synth", e))?;
    write_layout(&out.layout, ctx.create(LAYOUT)?).map_err(io_err)?;
    let mut w = ctx.create(SAMPLES)?;
    writeln!(w, "station,lane,epoch_seconds,flow_count,occupancy").map_err(io_err)?;
    write_samples(&out.samples, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    out.write_truth(ctx.create(TRUTH)?).map_err(io_err)?;
    Ok(format!(
        "synth: {} samples, {} days, {} stations, base interval {} s -> {}\n",
        out.samples.len(),
        ctx.cfg.world.days,
        out.layout.len(),
        out.base_seconds,
        ctx.dir.display()
    ))
}

pub fn ingest(ctx: &Context, input: Option<&Path>, layout: Option<&Path>) -> Result<String, CliError> {
    let err = |e| CliError::from_error("ingest", e);
    let layout = match layout {
        Some(p) => read_layout(open_path(p)?).map_err(err)?,
        None => ctx.layout()?,
    };
    let reader = match input {
        Some(p) => open_path(p)?,
        None => ctx.open(SAMPLES)?,
    };
    let (samples, mut report) = parse_samples(reader, &layout).map_err(err)?;
    let range = DayRange::covering(&samples, ctx.cfg.utc_offset_seconds).ok_or_else(|| CliError::new("ingest", "EmptyDayRange", "no valid samples"))?;
    let base = ctx.cfg.world.base_seconds;
    let (grid, stats) = build_grid(&samples, &layout, range, base).map_err(err)?;
    let grid = if ctx.cfg.slot_seconds == base { grid } else { aggregate(&grid, ctx.cfg.slot_seconds, ctx.cfg.missing_subinterval_limit).map_err(err)? };
    report.add_missing(&grid);
    write_grid(&grid, ctx.create(GRID)?).map_err(io_err)?;
    report.write_csv(ctx.create(INGEST_REPORT)?).map_err(io_err)?;
    Ok(format!(
        "ingest: {} lines, {} parsed, {} rejected ({} duplicates), {} collisions; grid {} days x {} slots, {} missing cells\n",
        report.total,
        report.parsed,
        report.rejected,
        report.duplicates,
        stats.collisions,
        grid.days(),
        grid.slots_per_day(),
        grid.count_health(HealthFlag::Missing)
    ))
}

pub fn health(ctx: &Context) -> Result<String, CliError> {
    let grid = ctx.grid(GRID)?;
    let table = score_grid(&grid, &ctx.cfg.dsa, ctx.exec);
    let region = if ctx.cfg.washington { Some(ctx.cfg.region()?) } else { None };
    let flagged = assign_flags(&grid, &table, ctx.cfg.detection, region.as_ref());
    table.write_csv(ctx.create(HEALTH)?).map_err(io_err)?;
    write_grid(&flagged, ctx.create(GRID_FLAGGED)?).map_err(io_err)?;
    Ok(format!(
        "health: {} of {} detector-days bad; {} malfunctioning and {} missing cells\n",
        table.bad_count(),
        table.days * table.detectors.len(),
        flagged.count_health(HealthFlag::Malfunctioning),
        flagged.count_health(HealthFlag::Missing)
    ))
}

pub fn impute(ctx: &Context) -> Result<String, CliError> {
    let grid = ctx.grid(GRID_FLAGGED)?;
    let model = fit_pairwise(&grid, ctx.cfg.impute.min_pairs, ctx.exec);
    let hist = ctx.cfg.impute_history.then(|| HistoryTable::from_grid(&grid));
    let (out, rep) = impute_grid(&grid, &model, hist.as_ref(), &ctx.cfg.impute, ctx.exec);
    model.write_csv(ctx.create(PAIRS)?).map_err(io_err)?;
    write_grid(&out, ctx.create(GRID_IMPUTED)?).map_err(io_err)?;
    rep.write_csv(ctx.create(IMPUTE_REPORT)?).map_err(io_err)?;
    Ok(format!(
        "impute: {} cells imputed ({} neighbor, {} history, {} corridor), {} pair fits\n",
        rep.imputed(),
        rep.neighbor,
        rep.history,
        rep.corridor,
        model.pairs().len()
    ))
}

pub fn fit_mu(ctx: &Context) -> Result<String, CliError> {
    let grid = ctx.grid(GRID_IMPUTED)?;
    let prof = fit_profile(&grid, &ctx.cfg.free_flow, &ctx.cfg.mu, ctx.exec).map_err(|e| CliError::from_error("velocity", e))?;
    prof.write_csv(ctx.create(MU)?).map_err(io_err)?;
    Ok(format!("fit-mu: {} detector/day-of-week curves\n", prof.len()))
}

pub fn speed(ctx: &Context) -> Result<String, CliError> {
    let grid = ctx.grid(GRID_IMPUTED)?;
    let prof = ctx.profile()?;
    let field = estimate_field(&grid, &prof, &ctx.cfg.free_flow, &ctx.cfg.velocity, ctx.exec).map_err(|e| CliError::from_error("velocity", e))?;
    write_field(&field, ctx.create(VELOCITY)?).map_err(io_err)?;
    Ok(format!("speed: {} days x {} slots x {} stations\n", field.days(), field.slots_per_day(), field.stations()))
}

fn window(cfg: &PipelineConfig, slot_seconds: u32) -> Window {
    let slot_min = slot_seconds as f64 / 60.0;
    Window { first: (cfg.window_start_min / slot_min).ceil() as usize, last: (cfg.window_end_min / slot_min).ceil() as usize }
}

fn route_series(ctx: &Context, field: &VelocityField, layout: &CorridorLayout, a: usize, b: usize) -> Result<TravelTimeSeries, CliError> {
    compute_series(field, layout, a, b, window(&ctx.cfg, field.slot_seconds()), ctx.exec).map_err(|e| CliError::from_error("predict", e))
}

pub fn traveltime(ctx: &Context, from: Option<usize>, to: Option<usize>) -> Result<String, CliError> {
    let layout = ctx.layout()?;
    let field = ctx.field()?;
    let (a0, b0) = ctx.cfg.route(layout.len());
    let (a, b) = (from.unwrap_or(a0), to.unwrap_or(b0));
    let series = route_series(ctx, &field, &layout, a, b)?;
    write_series(&series, ctx.create(TRAVELTIMES)?).map_err(io_err)?;
    let v: Vec<f64> = series.days.iter().flat_map(|d| d.realized.iter().copied()).filter(|x| x.is_finite()).collect();
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(format!("traveltime: {a}->{b}, {} days x {} departures, mean {:.2} min\n", series.days.len(), series.len(), mean))
}

fn minutes_list(s: Option<&str>, default: &[f64]) -> Result<Vec<f64>, CliError> {
    match s {
        Some(s) => parse_list(s).map_err(CliError::bad_args),
        None => Ok(default.to_vec()),
    }
}

pub fn fit_predictors(ctx: &Context, delta: Option<&str>) -> Result<String, CliError> {
    let series = ctx.series()?;
    let deltas = minutes_list(delta, &ctx.cfg.deltas_min)?;
    let days: Vec<usize> = (0..series.days.len()).collect();
    let positions: Vec<usize> = (0..series.len()).collect();
    let err = |e| CliError::from_error("predict", e);
    let grid = fit_varying_coefficients(&series, &days, &positions, &deltas, ctx.cfg.sigma_min, ctx.exec).map_err(err)?;
    let header = format!("origin={} destination={} response=departure", series.origin, series.destination);
    grid.write_csv(ctx.create(COEFFICIENTS)?, &header).map_err(io_err)?;
    let arr = arrival_series(&series);
    let agrid = fit_varying_coefficients(&arr, &days, &positions, &deltas, ctx.cfg.sigma_min, ctx.exec).map_err(err)?;
    let header = format!("origin={} destination={} response=arrival", series.origin, series.destination);
    agrid.write_csv(ctx.create(ARRIVAL_COEFFICIENTS)?, &header).map_err(io_err)?;
    Ok(format!("fit-predictors: {} nodes x {} horizons, sigma {} min, {} days\n", positions.len(), deltas.len(), ctx.cfg.sigma_min, days.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TripTime {
    Depart(f64),
    Arrive(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictRequest {
    pub from: Option<usize>,
    pub to: Option<usize>,
    pub time: TripTime,
    pub delta_min: f64,
    pub method: String,
    pub day: Option<usize>,
}

fn build_methods<'a>(ctx: &Context, names: &[String], field: Option<&VelocityField>) -> Result<Vec<Box<dyn Predictor + 'a>>, CliError> {
    names
        .iter()
        .map(|m| -> Result<Box<dyn Predictor>, CliError> {
            Ok(match m.as_str() {
                "historical" => Box::new(Historical),
                "current" => Box::new(CurrentStatus),
                "regression" => Box::new(Regression { sigma_min: ctx.cfg.sigma_min }),
                "pca" => Box::new(Pca { rank: ctx.cfg.pca_rank, ridge: ctx.cfg.pca_ridge }),
                "nn" => match (ctx.cfg.nn.metric, field) {
                    (Metric::M1, Some(f)) => Box::new(NearestNeighbors::m1(ctx.cfg.nn, f)),
                    (Metric::M1, None) => return Err(CliError::new("predict", "MissingInput", "nn.metric = m1 needs velocity.csv")),
                    (Metric::M2, _) => Box::new(NearestNeighbors::m2(ctx.cfg.nn)),
                },
                other => return Err(CliError::bad_args(format!("unknown method `{other}`"))),
            })
        })
        .collect()
}

/// Series for the requested route: the stored one if it matches, otherwise
/// computed from the velocity field.
fn series_for(ctx: &Context, from: Option<usize>, to: Option<usize>) -> Result<(TravelTimeSeries, Option<VelocityField>), CliError> {
    let stored = ctx.series().ok();
    let wanted = |s: &TravelTimeSeries| from.is_none_or(|a| a == s.origin) && to.is_none_or(|b| b == s.destination);
    let need_field = ctx.cfg.nn.metric == Metric::M1;
    match stored {
        Some(s) if wanted(&s) && !need_field => Ok((s, None)),
        stored => {
            let layout = ctx.layout()?;
            let field = ctx.field()?;
            let (a0, b0) = match &stored {
                Some(s) => (s.origin, s.destination),
                None => ctx.cfg.route(layout.len()),
            };
            let s = route_series(ctx, &field, &layout, from.unwrap_or(a0), to.unwrap_or(b0))?;
            Ok((s, Some(field)))
        }
    }
}

fn position(series: &TravelTimeSeries, minute: f64, what: &str) -> Result<usize, CliError> {
    series
        .position_of(minute)
        .ok_or_else(|| CliError::new("predict", "OutsideGrid", format!("{what} {} is outside the departure window", format_clock(minute))))
}

/// One prediction for day `day` using the other days as history. A departure
/// request predicts the trip leaving at the given time from data available
/// `delta_min` earlier; an arrival request does the same for the trip that
/// arrives at the given time.
pub fn predict(ctx: &Context, req: &PredictRequest) -> Result<PredictionRecord, CliError> {
    if req.delta_min < 0.0 {
        return Err(CliError::bad_args("--delta must be non-negative"));
    }
    let (series, field) = series_for(ctx, req.from, req.to)?;
    let nd = series.days.len();
    let day = req.day.unwrap_or(nd.saturating_sub(1));
    if day >= nd || nd < 2 {
        return Err(CliError::bad_args(format!("day {day} is not in the {nd}-day series")));
    }
    let train: Vec<usize> = (0..nd).filter(|&d| d != day).collect();
    let delta_slots = (req.delta_min / series.slot_minutes).round() as usize;
    let delta_min = delta_slots as f64 * series.slot_minutes;
    let e = &series.days[day];
    let err = |e| CliError::from_error("predict", e);
    match req.time {
        TripTime::Depart(t) => {
            let target = position(&series, t, "departure")?;
            let tau = target.checked_sub(delta_slots).ok_or_else(|| CliError::new("predict", "OutsideGrid", "horizon reaches before the window"))?;
            let methods = build_methods(ctx, std::slice::from_ref(&req.method), field.as_ref())?;
            let plan = EvalPlan { taus: vec![tau], deltas: vec![delta_slots] };
            let fit = methods[0].fit(&series, &train, &plan).map_err(err)?;
            let v = fit.predict(&series, e, tau, delta_slots).map_err(err)?;
            Ok(PredictionRecord { origin: series.origin, destination: series.destination, arrive: false, slot: series.first_slot + target, delta_min, method: req.method.clone(), predicted_min: v })
        }
        TripTime::Arrive(t) => {
            if req.method != "regression" {
                return Err(CliError::bad_args("arrival-time prediction is available for the regression method only"));
            }
            let target = position(&series, t, "arrival")?;
            let tau = target.checked_sub(delta_slots).ok_or_else(|| CliError::new("predict", "OutsideGrid", "horizon reaches before the window"))?;
            let arr = arrival_series(&series);
            let grid = fit_varying_coefficients(&arr, &train, &[tau], &[delta_min], ctx.cfg.sigma_min, Exec::Sequential).map_err(err)?;
            let (trip, _) = predict_arrival(&grid, series.minute_of(tau), delta_min, e.current_status[tau]).map_err(err)?;
            Ok(PredictionRecord { origin: series.origin, destination: series.destination, arrive: true, slot: series.first_slot + target, delta_min, method: req.method.clone(), predicted_min: trip })
        }
    }
}

pub fn eval(ctx: &Context, methods: Option<&str>, delta: Option<&str>) -> Result<String, CliError> {
    let names = match methods {
        Some(s) => parse_methods(s).map_err(CliError::bad_args)?,
        None => ctx.cfg.methods.clone(),
    };
    let field = if ctx.cfg.nn.metric == Metric::M1 && names.iter().any(|m| m == "nn") { Some(ctx.field()?) } else { None };
    let series = match &field {
        Some(f) => {
            let stored = ctx.series()?;
            route_series(ctx, f, &ctx.layout()?, stored.origin, stored.destination)?
        }
        None => ctx.series()?,
    };
    let deltas = minutes_list(delta, &ctx.cfg.deltas_min)?;
    let to_slots = |m: f64, what: &str| -> Result<usize, CliError> {
        let s = m / series.slot_minutes;
        if m < 0.0 || (s - s.round()).abs() > 1e-9 {
            return Err(CliError::bad_args(format!("{what} {m} min is not a whole number of slots")));
        }
        Ok(s.round() as usize)
    };
    let deltas: Vec<usize> = deltas.iter().map(|&d| to_slots(d, "horizon")).collect::<Result<_, _>>()?;
    let mut taus = Vec::new();
    for &t in &ctx.cfg.taus_min {
        taus.push(position(&series, t, "evaluation time")?);
    }
    let methods = build_methods(ctx, &names, field.as_ref())?;
    let refs: Vec<&dyn Predictor> = methods.iter().map(|m| m.as_ref()).collect();
    let plan = EvalPlan { taus, deltas };
    let table = evaluate_loo(&series, &refs, &plan, ctx.exec).map_err(|e| CliError::from_error("predict", e))?;
    table.write_csv(ctx.create(RMSE)?).map_err(io_err)?;
    let mut s = String::from("eval:");
    for m in &names {
        for &d in &plan.deltas {
            let dm = d as f64 * series.slot_minutes;
            let v: Vec<f64> = table.rows.iter().filter(|r| &r.method == m && r.delta_min == dm && r.rmse.is_finite()).map(|r| r.rmse).collect();
            let _ = write!(s, " {m}@{dm}={:.3}", v.iter().sum::<f64>() / v.len().max(1) as f64);
        }
    }
    s.push('\n');
    Ok(s)
}
