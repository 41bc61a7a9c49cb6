//! Pipeline configuration: a TOML file with `[paths]`, `[windows]`,
//! `[thresholds]`, `[categories]` and `[run]` sections. Every key has a
//! default except the input paths a stage actually needs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use chrono_tz::Tz;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::visits::{CategoryMap, PoiCategory};

/// Inclusive range of local calendar dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::Config(format!("window end {end} precedes start {start}")));
        }
        Ok(DateWindow { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        d >= self.start && d <= self.end
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> {
        let end = self.end;
        self.start.iter_days().take_while(move |d| *d <= end)
    }

    pub fn len_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }

    /// Half-open UTC interval from local midnight of `start` to local
    /// midnight after `end`.
    pub fn instants(&self, tz: Tz) -> TimeWindow {
        TimeWindow {
            start: local_midnight(tz, self.start),
            end: local_midnight(tz, self.end + Duration::days(1)),
        }
    }
}

/// Half-open interval `[start, end)` of UTC instants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeWindow {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        t >= self.start && t < self.end
    }

    /// Overlap of `[a, b]` with the window, in seconds.
    pub fn overlap_secs(&self, a: DateTime<Utc>, b: DateTime<Utc>) -> i64 {
        let lo = a.max(self.start);
        let hi = b.min(self.end);
        (hi - lo).num_seconds().max(0)
    }
}

pub fn local_midnight(tz: Tz, date: NaiveDate) -> DateTime<Utc> {
    let naive = date.and_hms_opt(0, 0, 0).expect("midnight exists");
    tz.from_local_datetime(&naive)
        .earliest()
        .unwrap_or_else(|| tz.from_utc_datetime(&naive))
        .with_timezone(&Utc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    FailFast,
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct InputPaths {
    pub pings: Option<PathBuf>,
    pub pois: Option<PathBuf>,
    pub footprints: Option<PathBuf>,
    pub cbgs: Option<PathBuf>,
    pub income: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub stop_radius_m: f64,
    pub stop_max_gap_s: i64,
    pub stop_min_dwell_s: i64,
    pub visit_min_dwell_s: i64,
    pub poi_match_radius_m: f64,
    pub point_poi_radius_m: f64,
    pub min_daily_visits: u32,
    pub income_groups: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            stop_radius_m: 100.0,
            stop_max_gap_s: 1800,
            stop_min_dwell_s: 300,
            visit_min_dwell_s: 300,
            poi_match_radius_m: 50.0,
            point_poi_radius_m: 50.0,
            min_daily_visits: 5,
            income_groups: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub paths: InputPaths,
    pub baseline: DateWindow,
    pub prep: DateWindow,
    pub landfall: NaiveDate,
    pub evac_baseline: DateWindow,
    /// Days appended to the preparation window when detecting evacuations,
    /// so an absence starting near landfall can exceed 24 h.
    pub evac_lookahead_days: i64,
    pub time_zone: Tz,
    pub thresholds: Thresholds,
    pub categories: CategoryMap,
    pub parse_mode: ParseMode,
    pub workers: usize,
    /// SHA-256 of the config file bytes; empty for programmatic configs.
    pub digest: String,
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: InputPaths::default(),
            baseline: DateWindow { start: date(2017, 8, 1), end: date(2017, 8, 14) },
            prep: DateWindow { start: date(2017, 8, 20), end: date(2017, 8, 25) },
            landfall: date(2017, 8, 25),
            evac_baseline: DateWindow { start: date(2017, 7, 9), end: date(2017, 8, 5) },
            evac_lookahead_days: 1,
            time_zone: chrono_tz::America::Chicago,
            thresholds: Thresholds::default(),
            categories: CategoryMap::default(),
            parse_mode: ParseMode::FailFast,
            workers: 0,
            digest: String::new(),
        }
    }
}

impl PipelineConfig {
    /// Window used for evacuation detection during preparation.
    pub fn evac_prep(&self) -> DateWindow {
        DateWindow {
            start: self.prep.start,
            end: self.prep.end + Duration::days(self.evac_lookahead_days),
        }
    }

    /// Every date that any stage looks at; pings outside are dropped.
    pub fn study(&self) -> DateWindow {
        let start = self.baseline.start.min(self.evac_baseline.start).min(self.prep.start);
        let end = self.baseline.end.max(self.evac_baseline.end).max(self.evac_prep().end);
        DateWindow { start, end }
    }

    /// Dates for which daily visit counts are materialized.
    pub fn visit_dates(&self) -> Vec<NaiveDate> {
        let mut dates: Vec<NaiveDate> = self.baseline.dates().chain(self.prep.dates()).collect();
        dates.sort();
        dates.dedup();
        dates
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline.end < self.baseline.start {
            return Err(Error::Config("baseline window is empty".into()));
        }
        if self.baseline.end >= self.prep.start {
            return Err(Error::Config(format!(
                "baseline window ({} .. {}) must precede the preparation window starting {}",
                self.baseline.start, self.baseline.end, self.prep.start
            )));
        }
        if self.landfall < self.prep.start || self.landfall != self.prep.end {
            return Err(Error::Config(format!(
                "landfall {} must close the preparation window starting {}",
                self.landfall, self.prep.start
            )));
        }
        if self.evac_baseline.end < self.evac_baseline.start {
            return Err(Error::Config("evacuation baseline window is empty".into()));
        }
        if self.evac_lookahead_days < 0 {
            return Err(Error::Config("evac_lookahead_days must be non-negative".into()));
        }
        let t = &self.thresholds;
        let positive = [
            ("stop_radius_m", t.stop_radius_m),
            ("stop_max_gap_s", t.stop_max_gap_s as f64),
            ("stop_min_dwell_s", t.stop_min_dwell_s as f64),
            ("visit_min_dwell_s", t.visit_min_dwell_s as f64),
            ("poi_match_radius_m", t.poi_match_radius_m),
            ("point_poi_radius_m", t.point_poi_radius_m),
            ("min_daily_visits", t.min_daily_visits as f64),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if t.income_groups < 2 {
            return Err(Error::Config("income_groups must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut cfg = PipelineConfig::from_toml(text, base)?;
        cfg.digest = hex::encode(Sha256::digest(&bytes));
        Ok(cfg)
    }

    /// Parses TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = PipelineConfig::default();
        let resolve = |p: Option<PathBuf>| p.map(|p| if p.is_absolute() { p } else { base_dir.join(p) });
        cfg.paths = InputPaths {
            pings: resolve(raw.paths.pings),
            pois: resolve(raw.paths.pois),
            footprints: resolve(raw.paths.footprints),
            cbgs: resolve(raw.paths.cbgs),
            income: resolve(raw.paths.income),
        };

        let w = raw.windows;
        let baseline_start = w.baseline_start.unwrap_or(cfg.baseline.start);
        let baseline_end = w.baseline_end.unwrap_or(cfg.baseline.end);
        cfg.baseline = DateWindow::new(baseline_start, baseline_end)?;
        let prep_start = w.prep_start.unwrap_or(cfg.prep.start);
        cfg.landfall = w.landfall_date.unwrap_or(cfg.landfall);
        if cfg.landfall < prep_start {
            return Err(Error::Config(format!("landfall {} precedes prep_start {prep_start}", cfg.landfall)));
        }
        cfg.prep = DateWindow::new(prep_start, cfg.landfall)?;
        cfg.evac_baseline = DateWindow::new(
            w.evac_baseline_start.unwrap_or(cfg.evac_baseline.start),
            w.evac_baseline_end.unwrap_or(cfg.evac_baseline.end),
        )?;
        cfg.evac_lookahead_days = w.evac_lookahead_days.unwrap_or(cfg.evac_lookahead_days);
        if let Some(tz) = w.time_zone {
            cfg.time_zone = tz.parse().map_err(|_| Error::Config(format!("unknown time zone {tz}")))?;
        }

        let t = raw.thresholds;
        let d = Thresholds::default();
        cfg.thresholds = Thresholds {
            stop_radius_m: t.stop_radius_m.unwrap_or(d.stop_radius_m),
            stop_max_gap_s: t.stop_max_gap_s.unwrap_or(d.stop_max_gap_s),
            stop_min_dwell_s: t.stop_min_dwell_s.unwrap_or(d.stop_min_dwell_s),
            visit_min_dwell_s: t.visit_min_dwell_s.unwrap_or(d.visit_min_dwell_s),
            poi_match_radius_m: t.poi_match_radius_m.unwrap_or(d.poi_match_radius_m),
            point_poi_radius_m: t.point_poi_radius_m.unwrap_or(d.point_poi_radius_m),
            min_daily_visits: t.min_daily_visits.unwrap_or(d.min_daily_visits),
            income_groups: t.income_groups.unwrap_or(d.income_groups),
        };

        if !raw.categories.is_empty() {
            let mut prefixes = BTreeMap::new();
            for (key, codes) in raw.categories {
                let cat = PoiCategory::from_key(&key)
                    .ok_or_else(|| Error::Config(format!("unknown category {key} in [categories]")))?;
                prefixes.insert(cat, codes);
            }
            for cat in PoiCategory::ALL {
                prefixes.entry(cat).or_insert_with(|| CategoryMap::default().prefixes(cat).to_vec());
            }
            cfg.categories = CategoryMap::new(prefixes)?;
        }

        cfg.parse_mode = if raw.run.lenient.unwrap_or(false) { ParseMode::Lenient } else { ParseMode::FailFast };
        cfg.workers = raw.run.workers.unwrap_or(0);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Path of a required input, or a configuration error naming the key.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "pings" => &self.paths.pings,
            "pois" => &self.paths.pois,
            "footprints" => &self.paths.footprints,
            "cbgs" => &self.paths.cbgs,
            "income" => &self.paths.income,
            _ => &None,
        };
        p.as_deref().ok_or_else(|| Error::Config(format!("paths.{key} is required for this stage")))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    paths: RawPaths,
    #[serde(default)]
    windows: RawWindows,
    #[serde(default)]
    thresholds: RawThresholds,
    #[serde(default)]
    categories: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    run: RawRun,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    pings: Option<PathBuf>,
    pois: Option<PathBuf>,
    footprints: Option<PathBuf>,
    cbgs: Option<PathBuf>,
    income: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWindows {
    baseline_start: Option<NaiveDate>,
    baseline_end: Option<NaiveDate>,
    prep_start: Option<NaiveDate>,
    landfall_date: Option<NaiveDate>,
    evac_baseline_start: Option<NaiveDate>,
    evac_baseline_end: Option<NaiveDate>,
    evac_lookahead_days: Option<i64>,
    time_zone: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThresholds {
    stop_radius_m: Option<f64>,
    stop_max_gap_s: Option<i64>,
    stop_min_dwell_s: Option<i64>,
    visit_min_dwell_s: Option<i64>,
    poi_match_radius_m: Option<f64>,
    point_poi_radius_m: Option<f64>,
    min_daily_visits: Option<u32>,
    income_groups: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    lenient: Option<bool>,
    workers: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.baseline.len_days(), 14);
        assert_eq!(cfg.prep.len_days(), 6);
        assert_eq!(cfg.study(), DateWindow { start: date(2017, 7, 9), end: date(2017, 8, 26) });
        assert_eq!(cfg.visit_dates().len(), 20);
    }

    #[test]
    fn parses_sections_and_resolves_paths() {
        let text = r#"
[paths]
pings = "pings.csv"
cbgs = "/abs/cbgs.geojson"

[windows]
baseline_start = "2017-08-01"
baseline_end = "2017-08-14"
prep_start = "2017-08-20"
landfall_date = "2017-08-25"
time_zone = "UTC"

[thresholds]
min_daily_visits = 3

[categories]
grocery = ["4451", "4452"]

[run]
lenient = true
workers = 4
"#;
        let cfg = PipelineConfig::from_toml(text, Path::new("/data")).unwrap();
        assert_eq!(cfg.paths.pings.as_deref(), Some(Path::new("/data/pings.csv")));
        assert_eq!(cfg.paths.cbgs.as_deref(), Some(Path::new("/abs/cbgs.geojson")));
        assert_eq!(cfg.time_zone, chrono_tz::UTC);
        assert_eq!(cfg.thresholds.min_daily_visits, 3);
        assert_eq!(cfg.categories.lookup("445299"), Some(PoiCategory::Grocery));
        assert_eq!(cfg.categories.lookup("446110"), Some(PoiCategory::Pharmacy));
        assert_eq!(cfg.parse_mode, ParseMode::Lenient);
        assert_eq!(cfg.workers, 4);
    }

    #[test]
    fn baseline_after_prep_rejected() {
        let text = "[windows]\nbaseline_start = \"2017-08-21\"\nbaseline_end = \"2017-08-22\"\n";
        let err = PipelineConfig::from_toml(text, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("[thresholds]\nstop_radius = 5\n", Path::new(".")).is_err());
        assert!(PipelineConfig::from_toml("[categories]\nbakery = [\"3118\"]\n", Path::new(".")).is_err());
    }

    #[test]
    fn non_positive_threshold_rejected() {
        assert!(PipelineConfig::from_toml("[thresholds]\nstop_radius_m = 0\n", Path::new(".")).is_err());
    }

    #[test]
    fn local_day_boundaries() {
        let tz = chrono_tz::America::Chicago;
        let w = DateWindow { start: date(2017, 8, 20), end: date(2017, 8, 20) }.instants(tz);
        // CDT is UTC-5 in August.
        assert_eq!(w.start.to_rfc3339(), "2017-08-20T05:00:00+00:00");
        assert_eq!((w.end - w.start).num_hours(), 24);
    }
}
