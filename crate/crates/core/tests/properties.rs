use loopgrid::ingest::{aggregate, build_grid, DayRange};
use loopgrid::synth::{simulate, DailyProfile, LengthDist, WorldConfig};
use loopgrid::velocity::{estimate_field, fit_profile, FreeFlowTable, MuConfig, VelocityConfig};
use loopgrid::Exec;
use proptest::prelude::*;

fn tiny(seed: u64, demand: f64) -> WorldConfig {
    let mut w = WorldConfig::corridor(3, 0.0, 2.0, 2).unwrap();
    w.days = 2;
    w.seed = seed;
    w.demand = DailyProfile::constant(demand);
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn grid_flow_equals_vehicle_passages(seed in 0u64..1000, demand in 50.0f64..1500.0) {
        let w = tiny(seed, demand);
        let out = simulate(&w, Exec::default()).unwrap();
        let range = DayRange::covering(&out.samples, 0).unwrap();
        let (grid, _) = build_grid(&out.samples, &out.layout, range, w.base_seconds).unwrap();
        let grid = aggregate(&grid, 300, 1).unwrap();
        let dets = grid.detectors();
        for d in 0..grid.days() {
            for (i, det) in dets.iter().enumerate() {
                let total: f64 = grid.series(d, *det).iter().map(|c| c.flow).sum();
                prop_assert_eq!(total as u64, out.vehicle_counts[d * dets.len() + i]);
            }
        }
    }

    #[test]
    fn free_flow_world_speed_recovered(seed in 0u64..1000, v in 45.0f64..80.0, len in 14.0f64..30.0) {
        let mut w = tiny(seed, 900.0);
        w.base_seconds = 300;
        w.rush_hours.clear();
        w.incident_rate = 0.0;
        w.level_sd = 0.0;
        w.free_flow_mph = Some(v);
        w.mix.car = LengthDist { mean_ft: len, sd_ft: 0.0 };
        w.mix.trucks = DailyProfile::constant(0.0);
        let out = simulate(&w, Exec::default()).unwrap();
        let range = DayRange::covering(&out.samples, 0).unwrap();
        let (grid, _) = build_grid(&out.samples, &out.layout, range, 300).unwrap();
        let mut table = FreeFlowTable::default();
        for s in 1..=3 {
            table.overrides.insert(s, vec![v, v]);
        }
        let mu = MuConfig { min_points: 10, ..Default::default() };
        let profile = fit_profile(&grid, &table, &mu, Exec::default()).unwrap();
        let field = estimate_field(&grid, &profile, &table, &VelocityConfig::default(), Exec::default()).unwrap();
        for (d, t, det, _) in grid.iter() {
            let got = field.get(d, t, det);
            prop_assert!((got / v - 1.0).abs() < 0.02, "day {} slot {} {}: {} vs {}", d, t, det, got, v);
        }
    }
}
