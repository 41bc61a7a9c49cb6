//! Stage functions shared by the CLI and the in-memory driver.
//!
//! Per-device work (stops, home, visits, evacuation flags) runs in parallel;
//! results are collected in device order and every aggregate is keyed by
//! ordered maps, so output does not depend on the number of workers.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evacuation::{self, QuadrantAssignment, TractEvacuation};
use crate::ingest::{CbgRecord, DeviceTrace, PoiRecord};
use crate::metrics::{self, IncomeStrata, PreparednessRecord};
use crate::stats::{self, CorrelationResult};
use crate::synth::Scenario;
use crate::trajectory::{self, CbgLocator, HomeAssignment, Stop, StopParams};
use crate::visits::{self, DailyVisitCount, PoiCategory, PoiIndex, VisitEvent, VisitParams, VisitRecord, VisitTable};

pub fn stop_params(cfg: &PipelineConfig) -> StopParams {
    StopParams {
        radius_m: cfg.thresholds.stop_radius_m,
        max_gap_s: cfg.thresholds.stop_max_gap_s,
        min_dwell_s: cfg.thresholds.stop_min_dwell_s,
    }
}

pub fn visit_params(cfg: &PipelineConfig) -> VisitParams {
    VisitParams {
        min_dwell_s: cfg.thresholds.visit_min_dwell_s,
        point_poi_radius_m: cfg.thresholds.point_poi_radius_m,
    }
}

/// Runs `f` on a pool with `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Everything derived from one device's trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceOutcome {
    pub home: HomeAssignment,
    /// Empty unless stops were requested.
    pub stops: Vec<Stop>,
    pub events: Vec<VisitEvent>,
    /// `Some(flag)` when the device has a home and was observed in the window.
    pub evac_base: Option<bool>,
    pub evac_prep: Option<bool>,
}

impl DeviceOutcome {
    pub fn device_id(&self) -> &str {
        &self.home.device_id
    }
}

/// Shared read-only state for per-device analysis.
pub struct DeviceAnalyzer<'a> {
    cfg: &'a PipelineConfig,
    locator: CbgLocator<'a>,
    pois: Option<PoiIndex<'a>>,
}

impl<'a> DeviceAnalyzer<'a> {
    /// Without POIs, visit events are left empty.
    pub fn new(cfg: &'a PipelineConfig, cbgs: &'a [CbgRecord], pois: Option<&'a [PoiRecord]>) -> Self {
        DeviceAnalyzer {
            cfg,
            locator: CbgLocator::new(cbgs),
            pois: pois.map(|p| PoiIndex::new(p, cfg.thresholds.point_poi_radius_m)),
        }
    }

    pub fn stops(&self, trace: &DeviceTrace) -> Vec<Stop> {
        let mut stops = trajectory::detect_stops(&trace.device_id, &trace.pings, stop_params(self.cfg));
        trajectory::assign_stop_cbgs(&mut stops, &self.locator);
        stops
    }

    pub fn analyze(&self, trace: &DeviceTrace, keep_stops: bool) -> DeviceOutcome {
        let stops = self.stops(trace);
        self.from_stops(&trace.device_id, stops, keep_stops)
    }

    pub fn from_stops(&self, device_id: &str, stops: Vec<Stop>, keep_stops: bool) -> DeviceOutcome {
        let tz = self.cfg.time_zone;
        let home = trajectory::infer_home(device_id, &stops, self.cfg.study().instants(tz));
        let events = match &self.pois {
            Some(index) => {
                visits::visit_events(device_id, &stops, index, &self.cfg.categories, visit_params(self.cfg), tz)
            }
            None => Vec::new(),
        };
        let (evac_base, evac_prep) = evacuation_flags(self.cfg, &stops, home.home_cbg.as_deref());
        DeviceOutcome {
            home,
            stops: if keep_stops { stops } else { Vec::new() },
            events,
            evac_base,
            evac_prep,
        }
    }
}

/// Evacuation flags for the baseline and preparation windows; `None` where
/// the device has no home or no stop overlapping the window.
pub fn evacuation_flags(cfg: &PipelineConfig, stops: &[Stop], home: Option<&str>) -> (Option<bool>, Option<bool>) {
    let tz = cfg.time_zone;
    let flag = |window: crate::config::DateWindow| {
        let w = window.instants(tz);
        if !trajectory::observed_in(stops, w) {
            return None;
        }
        let device_id = stops.first().map_or("", |s| s.device_id.as_str());
        trajectory::detect_evacuation(device_id, stops, home, w).ok().map(|f| f.evacuated)
    };
    (flag(cfg.evac_baseline), flag(cfg.evac_prep()))
}

pub fn analyze_traces(analyzer: &DeviceAnalyzer<'_>, traces: &[DeviceTrace], keep_stops: bool) -> Vec<DeviceOutcome> {
    traces.par_iter().map(|t| analyzer.analyze(t, keep_stops)).collect()
}

/// Generates and analyzes each agent of a scenario without materializing all
/// pings at once. Outcomes come back sorted by device id.
pub fn analyze_scenario(analyzer: &DeviceAnalyzer<'_>, scenario: &Scenario, keep_stops: bool) -> Vec<DeviceOutcome> {
    let mut out: Vec<DeviceOutcome> =
        scenario.agents.par_iter().map(|a| analyzer.analyze(&scenario.trace(a), keep_stops)).collect();
    out.sort_by(|a, b| a.device_id().cmp(b.device_id()));
    out
}

pub fn visit_table(outcomes: &[DeviceOutcome]) -> VisitTable {
    outcomes
        .par_iter()
        .fold(VisitTable::default, |mut table, o| {
            for e in &o.events {
                table.add(o.home.home_cbg.as_deref(), e);
            }
            table
        })
        .reduce(VisitTable::default, VisitTable::merge)
}

/// Daily counts over the baseline and preparation dates plus the
/// preparedness records derived from them.
pub fn preparedness(records: &[VisitRecord], cfg: &PipelineConfig) -> (Vec<DailyVisitCount>, Vec<PreparednessRecord>) {
    let daily = visits::daily_counts(records, &cfg.visit_dates());
    let prep = metrics::compute_preparedness(
        &daily,
        cfg.baseline,
        cfg.prep,
        cfg.landfall,
        cfg.thresholds.min_daily_visits,
    );
    (daily, prep)
}

/// Per-device `(home_cbg, base flag, prep flag)` rows reduced to tract rates.
pub fn tract_evacuation<'a>(
    flags: impl IntoIterator<Item = (&'a str, Option<bool>, Option<bool>)> + Clone,
) -> Vec<TractEvacuation> {
    let base = evacuation::evac_rates(flags.clone().into_iter().filter_map(|(h, b, _)| b.map(|b| (h, b))));
    let prep = evacuation::evac_rates(flags.into_iter().filter_map(|(h, _, p)| p.map(|p| (h, p))));
    evacuation::tract_evacuation(&base, &prep)
}

pub fn outcome_flags(outcomes: &[DeviceOutcome]) -> Vec<(&str, Option<bool>, Option<bool>)> {
    outcomes
        .iter()
        .filter_map(|o| o.home.home_cbg.as_deref().map(|h| (h, o.evac_base, o.evac_prep)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub quadrants: Vec<QuadrantAssignment>,
    pub hotspots: BTreeSet<String>,
    pub strata: Option<IncomeStrata>,
}

/// Quadrants, hotspots and, when incomes are available, income strata.
/// Too little data for quadrants or strata is logged and yields empty
/// results rather than an error.
pub fn classify(
    tracts: &[TractEvacuation],
    prep: &[PreparednessRecord],
    cbgs: &[CbgRecord],
    income_groups: Option<usize>,
) -> Classification {
    let changes: BTreeMap<String, f64> =
        tracts.iter().filter_map(|t| t.change.map(|c| (t.tract.clone(), c))).collect();
    let quadrants = match evacuation::classify_quadrants(&changes, prep) {
        Ok(q) => q,
        Err(e) => {
            warn!("quadrant classification skipped: {e}");
            Vec::new()
        }
    };
    let hotspots = evacuation::hotspots(&quadrants);
    let strata = income_groups.and_then(|n| match metrics::stratify_by_income(prep, cbgs, n) {
        Ok(s) => Some(s),
        Err(e) => {
            warn!("income stratification skipped: {e}");
            None
        }
    });
    Classification { quadrants, hotspots, strata }
}

/// Spearman correlation between extent and proactivity across CBGs, per
/// category. Categories with degenerate input map to `None`.
pub fn correlate(prep: &[PreparednessRecord]) -> BTreeMap<PoiCategory, Option<CorrelationResult>> {
    PoiCategory::ALL
        .into_iter()
        .map(|cat| {
            let rows: Vec<&PreparednessRecord> = prep.iter().filter(|r| r.category == cat).collect();
            let x: Vec<f64> = rows.iter().map(|r| r.extent).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.proactivity as f64).collect();
            let result = match stats::spearman(&x, &y) {
                Ok(r) => Some(r),
                Err(e) => {
                    warn!("{cat}: correlation undefined: {e}");
                    None
                }
            };
            (cat, result)
        })
        .collect()
}
