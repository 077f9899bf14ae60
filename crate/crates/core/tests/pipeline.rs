use std::collections::BTreeSet;

use loopgrid::impute::{fit_pairwise, impute_grid, HistoryTable, ImputeConfig};
use loopgrid::ingest::{aggregate, build_grid, parse_samples, write_samples, DayRange};
use loopgrid::predict::{
    compute_series, evaluate_loo, nn_distance_m1, EvalPlan, Historical, NearestNeighbors, NnConfig, Predictor, Regression,
    CurrentStatus, Window,
};
use loopgrid::quality::{assign_flags, score_grid, AcceptanceRegion, DetectionMode, DsaThresholds, Verdict};
use loopgrid::synth::{simulate, WorldConfig};
use loopgrid::velocity::{estimate_field, fit_profile, FreeFlowTable, MuConfig, VelocityConfig};
use loopgrid::{DataGrid, DetectorRef, Exec, HealthFlag, LoopSample, TravelTimeSeries, VelocityField};

struct Run {
    faulty: BTreeSet<(usize, DetectorRef)>,
    flagged: DataGrid,
    imputed: DataGrid,
    field: VelocityField,
    truth: VelocityField,
    series: TravelTimeSeries,
    bad: BTreeSet<(usize, DetectorRef)>,
}

fn world() -> WorldConfig {
    let mut w = WorldConfig::corridor(10, 0.0, 8.0, 3).unwrap();
    w.days = 8;
    w.seed = 11;
    w.fault_rate = 0.05;
    w.missing_fraction = 0.01;
    w
}

fn run(exec: Exec) -> Run {
    let w = world();
    let out = simulate(&w, exec).unwrap();
    let mut csv = Vec::new();
    write_samples(&out.samples, &mut csv).unwrap();
    let (samples, report) = parse_samples(csv.as_slice(), &out.layout).unwrap();
    assert_eq!(samples.len(), out.samples.len());
    let key = |s: &LoopSample| (s.detector, s.timestamp);
    let (mut x, mut y) = (samples.clone(), out.samples.clone());
    x.sort_by_key(key);
    y.sort_by_key(key);
    for (a, b) in x.iter().zip(&y) {
        assert_eq!((a.detector, a.timestamp, a.flow_count), (b.detector, b.timestamp, b.flow_count));
        assert!((a.occupancy - b.occupancy).abs() <= 5e-7);
    }
    assert_eq!(report.rejected, 0);

    let range = DayRange::covering(&samples, 0).unwrap();
    let (base, _) = build_grid(&samples, &out.layout, range, w.base_seconds).unwrap();
    let grid = aggregate(&base, 300, 1).unwrap();
    let table = score_grid(&grid, &DsaThresholds::default(), exec);
    let flagged = assign_flags(&grid, &table, DetectionMode::Offline, Some(&AcceptanceRegion::for_slot(300)));
    let model = fit_pairwise(&flagged, 50, exec);
    let hist = HistoryTable::from_grid(&flagged);
    let (imputed, _) = impute_grid(&flagged, &model, Some(&hist), &ImputeConfig::default(), exec);
    let ff = FreeFlowTable::default();
    let profile = fit_profile(&imputed, &ff, &MuConfig::default(), exec).unwrap();
    let field = estimate_field(&imputed, &profile, &ff, &VelocityConfig::default(), exec).unwrap();
    let series = compute_series(&field, &out.layout, 1, 10, Window { first: 60, last: 252 }, exec).unwrap();
    Run {
        faulty: w.fault_schedule().iter().map(|f| (f.day, f.detector)).collect(),
        bad: table.iter().filter(|(_, _, s)| s.verdict == Verdict::Bad).map(|(d, det, _)| (d, det)).collect(),
        flagged,
        imputed,
        field,
        truth: out.truth_at(300).unwrap(),
        series,
    }
}

#[test]
fn small_world_end_to_end() {
    let r = run(Exec::Parallel);
    assert!(!r.faulty.is_empty());
    let caught = r.faulty.iter().filter(|x| r.bad.contains(x)).count();
    assert!(caught * 10 >= r.faulty.len() * 9, "caught {caught} of {}", r.faulty.len());
    for &(d, det) in &r.bad {
        assert!(r.flagged.series(d, det).iter().all(|c| c.health != HealthFlag::Good));
    }
    assert!(r.imputed.is_complete());

    let mut se = 0.0;
    let mut n = 0.0;
    for (d, t, det, _) in r.imputed.iter() {
        se += (r.field.get(d, t, det) - r.truth.get(d, t, det)).powi(2);
        n += 1.0;
    }
    let field_rmse = (se / n).sqrt();
    assert!(field_rmse < 8.0, "field RMSE {field_rmse} mph");

    let truth_series = compute_series(&r.truth, &world().layout, 1, 10, Window { first: 60, last: 252 }, Exec::Parallel).unwrap();
    let (mut err, mut cnt) = (0.0, 0.0);
    for (a, b) in r.series.days.iter().zip(&truth_series.days) {
        for (x, y) in a.realized.iter().zip(&b.realized) {
            err += (x - y).abs() / y;
            cnt += 1.0;
        }
    }
    assert!(err / cnt < 0.1, "mean relative trip-time error {}", err / cnt);
}

#[test]
fn execution_modes_agree() {
    let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
    assert_eq!(a.imputed, b.imputed);
    assert_eq!(a.field, b.field);
    assert_eq!(a.series, b.series);
}

#[test]
fn loo_historical_matches_recomputation() {
    let s = run(Exec::Parallel).series;
    let plan = EvalPlan { taus: vec![12, 48, 96], deltas: vec![0, 12] };
    let methods: Vec<&dyn Predictor> = vec![&Historical, &CurrentStatus, &Regression { sigma_min: 10.0 }];
    let table = evaluate_loo(&s, &methods, &plan, Exec::Parallel).unwrap();
    assert_eq!(table.rows.len(), 3 * 3 * 2);
    for &tau in &plan.taus {
        for &delta in &plan.deltas {
            let target = tau + delta;
            let n = s.days.len();
            let mut se = 0.0;
            for e in 0..n {
                let others: f64 = (0..n).filter(|&d| d != e).map(|d| s.days[d].realized[target]).sum();
                se += (others / (n - 1) as f64 - s.days[e].realized[target]).powi(2);
            }
            let oracle = (se / n as f64).sqrt();
            let row = table.get("historical", s.minute_of(tau), delta as f64 * s.slot_minutes).unwrap();
            assert!((row.rmse - oracle).abs() < 1e-9, "tau {tau} delta {delta}: {} vs {oracle}", row.rmse);
            let cur = table.get("current", s.minute_of(tau), delta as f64 * s.slot_minutes).unwrap();
            let cur_oracle = (s.days.iter().map(|d| (d.current_status[tau] - d.realized[target]).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!((cur.rmse - cur_oracle).abs() < 1e-9);
        }
    }
}

#[test]
fn nearest_neighbours_on_speeds() {
    let r = run(Exec::Parallel);
    let s = &r.series;
    let (tau, delta, window) = (60usize, 6usize, 20.0);
    let days = |d: usize| r.field.station_day(d);

    let brute = |d: usize, e: usize| {
        let slot = s.first_slot + tau;
        let mut sum = 0.0;
        for t in slot - 3..=slot {
            for i in 1..=10 {
                sum += (r.field.station_speed(e, t, i) - r.field.station_speed(d, t, i)).abs();
            }
        }
        sum
    };
    for d in 0..3 {
        let m = nn_distance_m1(&days(d), &days(5), 1, 10, s.first_slot + tau, window).unwrap();
        assert!((m - brute(d, 5)).abs() < 1e-9);
        assert_eq!(m, nn_distance_m1(&days(5), &days(d), 1, 10, s.first_slot + tau, window).unwrap());
    }
    assert_eq!(nn_distance_m1(&days(2), &days(2), 1, 10, s.first_slot + tau, window).unwrap(), 0.0);

    let nn = NearestNeighbors::m1(NnConfig { k: 2, window_min: window, ..Default::default() }, &r.field);
    let held = 7;
    let train: Vec<usize> = (0..7).collect();
    let plan = EvalPlan { taus: vec![tau], deltas: vec![delta] };
    let fit = nn.fit(s, &train, &plan).unwrap();
    let got = fit.predict(s, &s.days[held], tau, delta).unwrap();
    let mut ranked: Vec<(f64, usize)> = train.iter().map(|&d| (brute(d, held), d)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let oracle = (s.days[ranked[0].1].realized[tau + delta] + s.days[ranked[1].1].realized[tau + delta]) / 2.0;
    assert!((got - oracle).abs() < 1e-12);

    let unfitted = NearestNeighbors { cfg: NnConfig { metric: loopgrid::predict::Metric::M1, ..Default::default() }, speeds: None };
    assert!(unfitted.fit(s, &train, &plan).is_err());
}
