//! Pipeline settings read from flat `key = value` text.

use loopgrid::config::{parse_clock, parse_list, ConfigError, KeyValues};
use loopgrid::predict::{Metric, NnConfig};
use loopgrid::quality::{AcceptanceRegion, DetectionMode, DsaThresholds};
use loopgrid::statkit::{LoessParams, Ridge};
use loopgrid::synth::WorldConfig;
use loopgrid::velocity::{DowClasses, Estimator, FilterConfig, FreeFlowTable, InitPolicy, MuConfig, VelocityConfig};
use loopgrid::impute::ImputeConfig;

use crate::CliError;

pub const ALL_METHODS: [&str; 5] = ["historical", "current", "regression", "pca", "nn"];

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub slot_seconds: u32,
    pub utc_offset_seconds: i64,
    pub missing_subinterval_limit: usize,
    pub dsa: DsaThresholds,
    pub detection: DetectionMode,
    pub washington: bool,
    pub washington_capacity_vph: f64,
    pub washington_k_break: f64,
    pub impute: ImputeConfig,
    pub impute_history: bool,
    pub free_flow: FreeFlowTable,
    pub mu: MuConfig,
    pub velocity: VelocityConfig,
    /// 0 means the last station.
    pub route_from: usize,
    pub route_to: usize,
    /// Departure window `[start, end)` in minutes of day.
    pub window_start_min: f64,
    pub window_end_min: f64,
    pub deltas_min: Vec<f64>,
    pub taus_min: Vec<f64>,
    pub sigma_min: f64,
    pub pca_rank: usize,
    pub pca_ridge: Ridge,
    pub nn: NnConfig,
    pub methods: Vec<String>,
}

impl PipelineConfig {
    pub fn defaults() -> Self {
        Self::from_kv(&KeyValues::default()).expect("defaults are valid")
    }

    /// Reads every known key and rejects the rest.
    pub fn from_kv(kv: &KeyValues) -> Result<Self, CliError> {
        let world = WorldConfig::from_config(kv, None).map_err(|e| CliError::new("synth", "Config", e))?;
        let c = Self::pipeline_keys(kv, world).map_err(|e| CliError::new("config", "BadValue", e))?;
        kv.reject_unused().map_err(|e| CliError::new("config", "UnknownKey", e))?;
        Ok(c)
    }

    fn pipeline_keys(kv: &KeyValues, world: WorldConfig) -> Result<Self, ConfigError> {
        let dd = DsaThresholds::default();
        let dsa = DsaThresholds {
            s1_frac: kv.get_or("dsa.s1_frac", dd.s1_frac)?,
            s2_frac: kv.get_or("dsa.s2_frac", dd.s2_frac)?,
            s3_frac: kv.get_or("dsa.s3_frac", dd.s3_frac)?,
            s4_low: kv.get_or("dsa.s4_low", dd.s4_low)?,
            k_star: kv.get_or("dsa.k_star", dd.k_star)?,
            bin_width: kv.get_or("dsa.bin_width", dd.bin_width)?,
        };
        let detection = kv
            .get_with("detection", |s| match s {
                "offline" => Ok(DetectionMode::Offline),
                "realtime" => Ok(DetectionMode::Realtime),
                _ => Err("expected offline or realtime".into()),
            })?
            .unwrap_or_default();
        let di = ImputeConfig::default();
        let impute = ImputeConfig {
            min_pairs: kv.get_or("impute.min_pairs", di.min_pairs)?,
            lane_capacity_vph: kv.get_or("impute.capacity_vph", di.lane_capacity_vph)?,
        };
        let mut free_flow = FreeFlowTable::default();
        for (st, v) in kv.with_prefix("ff.") {
            let key = format!("ff.{st}");
            let station: u32 = st.parse().map_err(|_| ConfigError::bad(&key, &v, "expected ff.<station>"))?;
            free_flow.overrides.insert(station, parse_list(&v).map_err(|r| ConfigError::bad(&key, &v, r))?);
        }
        let dm = MuConfig::default();
        let mu = MuConfig {
            percentile: kv.get_or("mu.percentile", dm.percentile)?,
            loess: LoessParams {
                span: kv.get_or("mu.span", dm.loess.span)?,
                degree: kv.get_or("mu.degree", dm.loess.degree)?,
            },
            dow: kv
                .get_with("mu.dow", |s| match s {
                    "separate" => Ok(DowClasses::Separate),
                    "weekdays" => Ok(DowClasses::Weekdays),
                    _ => Err("expected separate or weekdays".into()),
                })?
                .unwrap_or(dm.dow),
            min_points: kv.get_or("mu.min_points", dm.min_points)?,
        };
        let velocity = VelocityConfig {
            filter: FilterConfig {
                c: kv.get_or("filter.c", FilterConfig::default().c)?,
                init: kv
                    .get_with("filter.init", |s| match s {
                        "free_flow" => Ok(InitPolicy::FreeFlow),
                        "first" => Ok(InitPolicy::FirstObservation),
                        _ => Err("expected free_flow or first".into()),
                    })?
                    .unwrap_or_default(),
            },
            estimator: kv
                .get_with("estimator", |s| Estimator::parse(s).ok_or_else(|| "expected filtered, preliminary or coifman".into()))?
                .unwrap_or_default(),
        };
        let pca_ridge = kv
            .get_with("pca.ridge", |s| match s {
                "residual" => Ok(Ridge::Residual),
                "auto" => Ok(Ridge::Auto),
                x => x.parse::<f64>().map(Ridge::Fixed).map_err(|_| "expected residual, auto or a number".into()),
            })?
            .unwrap_or(Ridge::Residual);
        let dn = NnConfig::default();
        let nn = NnConfig {
            metric: kv
                .get_with("nn.metric", |s| match s {
                    "m1" => Ok(Metric::M1),
                    "m2" => Ok(Metric::M2),
                    _ => Err("expected m1 or m2".into()),
                })?
                .unwrap_or(dn.metric),
            window_min: kv.get_or("nn.window_min", dn.window_min)?,
            k: kv.get_or("nn.k", dn.k)?,
        };
        let clock = |key: &str, default: f64| -> Result<f64, ConfigError> { Ok(kv.get_with(key, parse_clock)?.unwrap_or(default)) };
        let taus = kv
            .get_with("taus", |s| s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(parse_clock).collect::<Result<Vec<_>, _>>())?
            .unwrap_or_else(|| (6..=19).map(|h| h as f64 * 60.0).collect());
        let methods: Vec<String> = match kv.raw("methods") {
            Some(s) => parse_methods(s).map_err(|r| ConfigError::bad("methods", s, r))?,
            None => ALL_METHODS.iter().map(|m| m.to_string()).collect(),
        };
        let c = Self {
            slot_seconds: kv.get_or("slot_seconds", 300)?,
            utc_offset_seconds: kv.get_or::<i64>("utc_offset_min", 0)? * 60,
            missing_subinterval_limit: kv.get_or("missing_subinterval_limit", 1)?,
            dsa,
            detection,
            washington: kv.get_or("washington", true)?,
            washington_capacity_vph: kv.get_or("washington.capacity_vph", 4000.0)?,
            washington_k_break: kv.get_or("washington.k_break", 0.12)?,
            impute,
            impute_history: kv.get_or("impute.history", true)?,
            free_flow,
            mu,
            velocity,
            route_from: kv.get_or("route.from", 1)?,
            route_to: kv.get_or("route.to", 0)?,
            window_start_min: clock("window.start", 5.0 * 60.0)?,
            window_end_min: clock("window.end", 21.0 * 60.0)?,
            deltas_min: kv.get_with("deltas", parse_list)?.unwrap_or_else(|| vec![0.0, 60.0]),
            taus_min: taus,
            sigma_min: kv.get_or("regression.sigma_min", 10.0)?,
            pca_rank: kv.get_or("pca.rank", 4)?,
            pca_ridge,
            nn,
            methods,
            world,
        };
        if c.slot_seconds == 0 || 86_400 % c.slot_seconds != 0 {
            return Err(ConfigError::bad("slot_seconds", &c.slot_seconds.to_string(), "must divide a day"));
        }
        if c.window_end_min <= c.window_start_min {
            return Err(ConfigError::bad("window.end", &c.window_end_min.to_string(), "must be after window.start"));
        }
        if c.sigma_min <= 0.0 {
            return Err(ConfigError::bad("regression.sigma_min", &c.sigma_min.to_string(), "must be positive"));
        }
        Ok(c)
    }

    pub fn region(&self) -> Result<AcceptanceRegion, CliError> {
        let cap = self.washington_capacity_vph * self.slot_seconds as f64 / 3600.0;
        AcceptanceRegion::new(0.9, cap, 1.0, 0.05, vec![(0.0, 0.0)], vec![(0.0, 1.0), (self.washington_k_break, cap)])
            .map_err(|e| CliError::new("quality", "InvalidRegion", e))
    }

    /// Route endpoints with 0 resolved to the last station.
    pub fn route(&self, stations: usize) -> (usize, usize) {
        let r = |s: usize| if s == 0 { stations } else { s };
        (r(self.route_from), r(self.route_to))
    }
}

pub fn parse_methods(s: &str) -> Result<Vec<String>, String> {
    let v: Vec<String> = s.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect();
    if v.is_empty() {
        return Err("no methods given".into());
    }
    match v.iter().find(|m| !ALL_METHODS.contains(&m.as_str())) {
        Some(m) => Err(format!("unknown method `{m}`")),
        None => Ok(v),
    }
}
