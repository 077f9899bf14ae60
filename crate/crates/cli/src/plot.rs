//! Data series behind the figures, as `series,x,y` CSV, with an optional
//! bare-bones SVG line chart.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use loopgrid::model::{mph_to_fps, DetectorRef, VelocityField};
use loopgrid::velocity::{estimate_series, free_flow_points, DowClasses, Estimator, VelocityConfig};

use crate::commands::{io_err, Context, GRID_IMPUTED, TRUTH};
use crate::CliError;

/// Points of one named series.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub id: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl Figure {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {} x={} y={}", self.id, self.x_label, self.y_label)?;
        writeln!(w, "series,x,y")?;
        for s in &self.series {
            for (x, y) in &s.points {
                writeln!(w, "{},{},{}", s.name, x, y)?;
            }
        }
        w.flush()
    }

    pub fn write_svg<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        const W: f64 = 800.0;
        const H: f64 = 450.0;
        const M: f64 = 50.0;
        const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"];
        let pts = self.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let (xs, ys) = ((x1 - x0).max(1e-9), (y1 - y0).max(1e-9));
        let px = |x: f64| M + (x - x0) / xs * (W - 2.0 * M);
        let py = |y: f64| H - M - (y - y0) / ys * (H - 2.0 * M);
        writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#)?;
        writeln!(w, r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * M, H - 2.0 * M)?;
        writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle">{} ({:.3} .. {:.3})</text>"#, W / 2.0, H - 15.0, self.x_label, x0, x1)?;
        writeln!(w, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{} ({:.3} .. {:.3})</text>"#, H / 2.0, H / 2.0, self.y_label, y0, y1)?;
        for (i, s) in self.series.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            let path: Vec<String> = s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            writeln!(w, r#"<polyline fill="none" stroke="{c}" stroke-width="1" points="{}"/>"#, path.join(" "))?;
            writeln!(w, r#"<text x="{}" y="{}" fill="{c}">{}</text>"#, W - M + 5.0, M + 14.0 * (i as f64 + 1.0), s.name)?;
        }
        writeln!(w, "</svg>")?;
        w.flush()
    }
}

fn missing(what: &str) -> impl FnOnce(CliError) -> CliError + '_ {
    move |e| if e.kind == "MissingInput" { CliError::new("plot", "MissingUpstream", format!("{what}: {}", e.message)) } else { e }
}

pub fn emit(ctx: &Context, figure: &str, station: u32, lane: u16, day: usize, svg: bool) -> Result<String, CliError> {
    let det = DetectorRef::new(station, lane);
    let fig = match figure {
        "fig3" => fig3(ctx, det, day)?,
        "fig4" => fig4(ctx, det, day)?,
        "fig5" => estimate_vs_truth(ctx, det, day, Estimator::Preliminary, "fig5")?,
        "fig6" => estimate_vs_truth(ctx, det, day, Estimator::Filtered, "fig6")?,
        "fig10" => fig10(ctx)?,
        "fig11" => rmse_figure(ctx, "fig11", 0.0, &["historical", "current", "regression"])?,
        "fig12" => rmse_figure(ctx, "fig12", 0.0, &["pca", "nn", "regression"])?,
        "fig13" => rmse_figure(ctx, "fig13", 60.0, &["historical", "current", "regression"])?,
        "fig14" => rmse_figure(ctx, "fig14", 60.0, &["pca", "nn", "regression"])?,
        other => return Err(CliError::bad_args(format!("unknown figure `{other}`"))),
    };
    let name = format!("plot_{figure}.csv");
    fig.write_csv(ctx.create(&name)?).map_err(io_err)?;
    if svg {
        fig.write_svg(ctx.create(&format!("plot_{figure}.svg"))?).map_err(io_err)?;
    }
    let n: usize = fig.series.iter().map(|s| s.points.len()).sum();
    Ok(format!("plot: {figure}, {} series, {n} points -> {name}\n", fig.series.len()))
}

/// True lane speeds of one detector-day averaged to `slot_seconds`.
pub fn read_truth_series(ctx: &Context, det: DetectorRef, day: usize, slot_seconds: u32) -> Result<Vec<f64>, CliError> {
    let r = ctx.open(TRUTH)?;
    let mut by_slot: BTreeMap<usize, f64> = BTreeMap::new();
    let prefix = format!("{},{},{},", det.station, det.lane, day);
    for line in r.lines() {
        let line = line.map_err(io_err)?;
        if let Some(rest) = line.strip_prefix(&prefix) {
            let mut f = rest.split(',');
            let slot: usize = f.next().and_then(|x| x.parse().ok()).ok_or_else(|| CliError::new("plot", "Format", "bad truth row"))?;
            let v: f64 = f.next().and_then(|x| x.parse().ok()).ok_or_else(|| CliError::new("plot", "Format", "bad truth row"))?;
            by_slot.insert(slot, v);
        }
    }
    if by_slot.is_empty() {
        return Err(CliError::new("plot", "MissingUpstream", format!("no truth rows for detector {det} on day {day}")));
    }
    let base_slots = by_slot.keys().max().copied().unwrap_or(0) + 1;
    let base = (86_400 / base_slots) as u32;
    let ratio = (slot_seconds / base.max(1)).max(1) as usize;
    Ok((0..base_slots / ratio)
        .map(|s| (s * ratio..(s + 1) * ratio).filter_map(|b| by_slot.get(&b)).sum::<f64>() / ratio as f64)
        .collect())
}

fn hours(slot: usize, slot_seconds: u32) -> f64 {
    slot as f64 * slot_seconds as f64 / 3600.0
}

fn fig3(ctx: &Context, det: DetectorRef, day: usize) -> Result<Figure, CliError> {
    let grid = ctx.grid(GRID_IMPUTED).map_err(missing("fig3 needs the imputed grid"))?;
    let slot_s = grid.slot_seconds();
    let speeds = match read_truth_series(ctx, det, day, slot_s) {
        Ok(v) => v,
        Err(_) => {
            let f: VelocityField = ctx.field().map_err(missing("fig3 needs truth.csv or velocity.csv"))?;
            (0..f.slots_per_day()).map(|t| f.get(day, t, det)).collect()
        }
    };
    let mut velocity = Series { name: "velocity_mph".into(), points: Vec::new() };
    let mut length = Series { name: "length_ft".into(), points: Vec::new() };
    for (t, c) in grid.series(day, det).iter().enumerate() {
        let x = hours(t, slot_s);
        let v = speeds.get(t).copied().unwrap_or(f64::NAN);
        velocity.points.push((x, v));
        if c.flow > 0.0 && c.occupancy > 0.0 {
            length.points.push((x, mph_to_fps(v) * c.occupancy * slot_s as f64 / c.flow));
        }
    }
    Ok(Figure { id: "fig3".into(), x_label: "hour".into(), y_label: "mph | feet".into(), series: vec![velocity, length] })
}

fn fig4(ctx: &Context, det: DetectorRef, day: usize) -> Result<Figure, CliError> {
    let grid = ctx.grid(GRID_IMPUTED).map_err(missing("fig4 needs the imputed grid"))?;
    let prof = ctx.profile().map_err(missing("fig4 needs mu.csv"))?;
    let dow = grid.day_of_week(day);
    let curve = prof.curve(det, dow).ok_or_else(|| CliError::new("plot", "MissingUpstream", format!("no mean-length curve for {det}")))?;
    let same = |d: usize| {
        let o = grid.day_of_week(d);
        o == dow || (ctx.cfg.mu.dow == DowClasses::Weekdays && (1..=5).contains(&o) && (1..=5).contains(&dow))
    };
    let mut obs = Vec::new();
    for d in (0..grid.days()).filter(|&d| same(d)) {
        for (t, c) in grid.series(d, det).iter().enumerate() {
            if c.has_value() {
                obs.push((t, c.flow, c.occupancy));
            }
        }
    }
    let v_ff = ctx.cfg.free_flow.for_detector(det, grid.lanes(det.station as usize));
    let slot_s = grid.slot_seconds();
    let pts = free_flow_points(&obs, curve.alpha, v_ff, slot_s as f64);
    Ok(Figure {
        id: "fig4".into(),
        x_label: "hour".into(),
        y_label: "feet".into(),
        series: vec![
            Series { name: "points".into(), points: pts.iter().map(|&(t, y)| (hours(t as usize, slot_s), y)).collect() },
            Series { name: "loess".into(), points: curve.mu.iter().enumerate().map(|(t, &m)| (hours(t, slot_s), m)).collect() },
        ],
    })
}

fn estimate_vs_truth(ctx: &Context, det: DetectorRef, day: usize, est: Estimator, id: &str) -> Result<Figure, CliError> {
    let grid = ctx.grid(GRID_IMPUTED).map_err(missing("needs the imputed grid"))?;
    let prof = ctx.profile().map_err(missing("needs mu.csv"))?;
    if day >= grid.days() {
        return Err(CliError::bad_args(format!("day {day} is not in the grid")));
    }
    let curve = prof.curve(det, grid.day_of_week(day)).ok_or_else(|| CliError::new("plot", "MissingUpstream", format!("no mean-length curve for {det}")))?;
    let v_ff = ctx.cfg.free_flow.for_detector(det, grid.lanes(det.station as usize));
    let cfg = VelocityConfig { estimator: est, ..ctx.cfg.velocity };
    let slot_s = grid.slot_seconds();
    let estimate = estimate_series(&grid, day, det, curve, v_ff, &cfg);
    let truth = read_truth_series(ctx, det, day, slot_s).map_err(missing("needs truth.csv"))?;
    Ok(Figure {
        id: id.into(),
        x_label: "hour".into(),
        y_label: "mph".into(),
        series: vec![
            Series { name: "estimate".into(), points: estimate.iter().enumerate().map(|(t, e)| (hours(t, slot_s), e.0)).collect() },
            Series { name: "truth".into(), points: truth.iter().enumerate().map(|(t, &v)| (hours(t, slot_s), v)).collect() },
        ],
    })
}

fn fig10(ctx: &Context) -> Result<Figure, CliError> {
    let s = ctx.series().map_err(missing("fig10 needs traveltimes.csv"))?;
    let series = s
        .days
        .iter()
        .map(|d| Series { name: format!("day{}", d.day), points: (0..s.len()).map(|p| (s.minute_of(p) / 60.0, d.realized[p])).collect() })
        .collect();
    Ok(Figure { id: "fig10".into(), x_label: "departure hour".into(), y_label: "minutes".into(), series })
}

fn rmse_figure(ctx: &Context, id: &str, delta: f64, methods: &[&str]) -> Result<Figure, CliError> {
    let table = ctx.rmse().map_err(missing("needs rmse.csv"))?;
    let series = methods
        .iter()
        .map(|m| Series {
            name: m.to_string(),
            points: table.rows.iter().filter(|r| r.method == *m && (r.delta_min - delta).abs() < 1e-9).map(|r| (r.tau_min / 60.0, r.rmse)).collect(),
        })
        .collect();
    Ok(Figure { id: id.into(), x_label: "hour".into(), y_label: "RMSE minutes".into(), series })
}
