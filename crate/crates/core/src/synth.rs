//! Seeded agent-based scenario generator with planted ground truth.
//!
//! CBGs are laid out as a square grid of cells, each with one POI per
//! category. Agents sleep at a fixed home point every night, make Poisson
//! numbers of POI trips during the day, and some relocate to a neighbouring
//! cell for a few days (evacuations). Every random draw comes from a ChaCha
//! stream keyed by the agent's global index, so output is identical
//! regardless of how generation is parallelized.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Utc};
use chrono_tz::Tz;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use crate::config::{DateWindow, PipelineConfig, TimeWindow};
use crate::error::{Error, Result};
use crate::geo::{self, GeoPoint, GeoPolygon};
use crate::ingest::{format_timestamp, CbgRecord, DeviceTrace, Ping, PoiRecord};
use crate::visits::PoiCategory;

/// Cell-relative POI positions, one per category.
const POI_OFFSETS: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
const FOOTPRINT_HALF_SIDE: f64 = 0.0003;
const JITTER_DEG: f64 = 0.00005;
const TRIP_SLOTS: i64 = 10;
const TRIP_FIRST_MINUTE: i64 = 7 * 60;
const TRIP_SLOT_MINUTES: i64 = 70;
const TRIP_DWELL_MINUTES: i64 = 30;
const NIGHT_START_HOUR: u32 = 20;
const NIGHT_HOURS: i64 = 10;

pub fn naics_for(cat: PoiCategory) -> &'static str {
    match cat {
        PoiCategory::Grocery => "445110",
        PoiCategory::Pharmacy => "446110",
        PoiCategory::GasStation => "447110",
        PoiCategory::HomeImprovement => "444110",
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surge {
    pub multiplier: f64,
    pub day: NaiveDate,
}

/// Planted behaviour for a contiguous range of CBG indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CbgGroup {
    pub name: String,
    pub first_cbg: usize,
    pub count: usize,
    pub surge: BTreeMap<PoiCategory, Surge>,
    pub evac_fraction: f64,
    pub base_evac_fraction: f64,
}

impl CbgGroup {
    fn contains(&self, cbg: usize) -> bool {
        cbg >= self.first_cbg && cbg < self.first_cbg + self.count
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_cbgs: usize,
    pub agents_per_cbg: usize,
    pub cbgs_per_tract: usize,
    pub origin: GeoPoint,
    pub cell_deg: f64,
    pub ping_interval_s: i64,
    pub base_visit_rate: BTreeMap<PoiCategory, f64>,
    /// Explicit groups, checked in order; CBGs outside every group use
    /// `default_group`.
    pub groups: Vec<CbgGroup>,
    pub default_group: CbgGroup,
    pub evac_duration_h: i64,
    pub income_range: (f64, f64),
    /// Windows shared with the pipeline configuration.
    pub pipeline: PipelineConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        let surge_day = NaiveDate::from_ymd_opt(2017, 8, 22).unwrap();
        ScenarioConfig {
            seed: 1,
            n_cbgs: 16,
            agents_per_cbg: 50,
            cbgs_per_tract: 1,
            origin: GeoPoint { lon: -95.6, lat: 29.6 },
            cell_deg: 0.01,
            ping_interval_s: 600,
            base_visit_rate: PoiCategory::ALL.into_iter().map(|c| (c, 0.5)).collect(),
            groups: Vec::new(),
            default_group: CbgGroup {
                name: "default".into(),
                first_cbg: 0,
                count: usize::MAX,
                surge: PoiCategory::ALL.into_iter().map(|c| (c, Surge { multiplier: 1.0, day: surge_day })).collect(),
                evac_fraction: 0.0,
                base_evac_fraction: 0.0,
            },
            evac_duration_h: 72,
            income_range: (25_000.0, 150_000.0),
            pipeline,
        }
    }
}

impl ScenarioConfig {
    pub fn group_of(&self, cbg: usize) -> &CbgGroup {
        self.groups.iter().find(|g| g.contains(cbg)).unwrap_or(&self.default_group)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_cbgs == 0 || self.agents_per_cbg == 0 {
            return err("n_cbgs and agents_per_cbg must be positive".into());
        }
        if self.cbgs_per_tract == 0 || self.cbgs_per_tract > 9 {
            return err("cbgs_per_tract must be between 1 and 9".into());
        }
        if self.n_cbgs.div_ceil(self.cbgs_per_tract) > 999_899 {
            return err("too many tracts for 6-digit tract codes".into());
        }
        if !(self.cell_deg > 0.004 && self.cell_deg <= 0.1) {
            return err(format!("cell_deg {} must be in (0.004, 0.1]", self.cell_deg));
        }
        let cols = grid_cols(self.n_cbgs) as f64;
        let far = GeoPoint::new(self.origin.lon + cols * self.cell_deg, self.origin.lat + cols * self.cell_deg);
        if GeoPoint::new(self.origin.lon, self.origin.lat).is_err() || far.is_err() {
            return err("grid does not fit in valid coordinates".into());
        }
        if self.ping_interval_s <= 0 || self.ping_interval_s > 1800 {
            return err("ping_interval_s must be in 1..=1800".into());
        }
        if self.evac_duration_h <= 24 {
            return err("evac_duration_h must exceed 24".into());
        }
        if self.base_visit_rate.values().any(|&r| !r.is_finite() || r < 0.0) {
            return err("visit rates must be non-negative".into());
        }
        for g in self.groups.iter().chain(std::iter::once(&self.default_group)) {
            for (cat, s) in &g.surge {
                if !s.multiplier.is_finite() || s.multiplier < 0.0 {
                    return err(format!("group {}: {cat} multiplier must be >= 0", g.name));
                }
                if !self.pipeline.prep.contains(s.day) {
                    return err(format!("group {}: {cat} surge day {} outside preparation window", g.name, s.day));
                }
            }
            for f in [g.evac_fraction, g.base_evac_fraction] {
                if !(0.0..=1.0).contains(&f) {
                    return err(format!("group {}: evacuation fractions must be in [0, 1]", g.name));
                }
            }
            if (g.evac_fraction > 0.0 || g.base_evac_fraction > 0.0) && self.n_cbgs < 2 {
                return err("evacuation needs at least two CBGs".into());
            }
        }
        self.pipeline.validate()
    }

    fn surge(&self, cbg: usize, cat: PoiCategory) -> Surge {
        let g = self.group_of(cbg);
        g.surge.get(&cat).or_else(|| self.default_group.surge.get(&cat)).copied().unwrap_or(Surge {
            multiplier: 1.0,
            day: self.pipeline.prep.start,
        })
    }

    /// Visit-rate multiplier for a day. Inside the preparation window the
    /// surge day gets `m` and every other day `min(m, 1)`, so the largest
    /// expected change over the window is `m - 1` for any `m`.
    pub fn multiplier(&self, cbg: usize, cat: PoiCategory, day: NaiveDate) -> f64 {
        if !self.pipeline.prep.contains(day) {
            return 1.0;
        }
        let s = self.surge(cbg, cat);
        if day == s.day {
            s.multiplier
        } else {
            s.multiplier.min(1.0)
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ScenarioConfig::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = ScenarioConfig::default();
        // Reuse the pipeline parser for the windows section.
        let windows = toml::to_string(&toml::Table::from_iter([(
            "windows".to_string(),
            toml::Value::Table(raw.windows.clone()),
        )]))
        .map_err(|e| Error::Config(e.to_string()))?;
        cfg.pipeline = PipelineConfig::from_toml(&windows, Path::new("."))?;

        cfg.seed = raw.seed.unwrap_or(cfg.seed);
        cfg.n_cbgs = raw.n_cbgs.unwrap_or(cfg.n_cbgs);
        cfg.agents_per_cbg = raw.agents_per_cbg.unwrap_or(cfg.agents_per_cbg);
        cfg.cbgs_per_tract = raw.cbgs_per_tract.unwrap_or(cfg.cbgs_per_tract);
        cfg.origin = GeoPoint {
            lon: raw.origin_lon.unwrap_or(cfg.origin.lon),
            lat: raw.origin_lat.unwrap_or(cfg.origin.lat),
        };
        cfg.cell_deg = raw.cell_deg.unwrap_or(cfg.cell_deg);
        cfg.ping_interval_s = raw.ping_interval_s.unwrap_or(cfg.ping_interval_s);
        cfg.evac_duration_h = raw.evac_duration_h.unwrap_or(cfg.evac_duration_h);
        if let Some(rates) = raw.visit_rates {
            cfg.base_visit_rate = PoiCategory::ALL.into_iter().map(|c| (c, 0.0)).collect();
            for (k, v) in rates {
                let cat = PoiCategory::from_key(&k).ok_or_else(|| Error::Config(format!("unknown category {k}")))?;
                cfg.base_visit_rate.insert(cat, v);
            }
        }
        let prep_start = cfg.pipeline.prep.start;
        let default_day = NaiveDate::from_ymd_opt(2017, 8, 22).filter(|d| cfg.pipeline.prep.contains(*d)).unwrap_or(prep_start);
        let defaults = raw.defaults.unwrap_or_default();
        cfg.default_group = defaults.resolve("default", 0, usize::MAX, None, default_day)?;
        cfg.groups = raw
            .groups
            .unwrap_or_default()
            .into_iter()
            .map(|g| {
                let (name, first, count) = (g.name.clone(), g.first_cbg, g.count);
                g.settings.resolve(&name, first, count, Some(&cfg.default_group), default_day)
            })
            .collect::<Result<_>>()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    seed: Option<u64>,
    n_cbgs: Option<usize>,
    agents_per_cbg: Option<usize>,
    cbgs_per_tract: Option<usize>,
    origin_lon: Option<f64>,
    origin_lat: Option<f64>,
    cell_deg: Option<f64>,
    ping_interval_s: Option<i64>,
    evac_duration_h: Option<i64>,
    #[serde(default)]
    windows: toml::Table,
    visit_rates: Option<BTreeMap<String, f64>>,
    defaults: Option<RawGroupSettings>,
    groups: Option<Vec<RawGroup>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroup {
    name: String,
    first_cbg: usize,
    count: usize,
    #[serde(flatten)]
    settings: RawGroupSettings,
}

#[derive(Debug, Default, Deserialize)]
struct RawGroupSettings {
    multiplier: Option<f64>,
    surge_day: Option<NaiveDate>,
    evac_fraction: Option<f64>,
    base_evac_fraction: Option<f64>,
    #[serde(default)]
    categories: BTreeMap<String, RawSurge>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSurge {
    multiplier: Option<f64>,
    surge_day: Option<NaiveDate>,
}

impl RawGroupSettings {
    fn resolve(
        self,
        name: &str,
        first_cbg: usize,
        count: usize,
        parent: Option<&CbgGroup>,
        default_day: NaiveDate,
    ) -> Result<CbgGroup> {
        let mut surge = BTreeMap::new();
        for cat in PoiCategory::ALL {
            let inherited = parent.and_then(|p| p.surge.get(&cat).copied());
            let mut s = Surge {
                multiplier: self.multiplier.or(inherited.map(|s| s.multiplier)).unwrap_or(1.0),
                day: self.surge_day.or(inherited.map(|s| s.day)).unwrap_or(default_day),
            };
            if let Some(over) = self.categories.get(cat.key()) {
                s.multiplier = over.multiplier.unwrap_or(s.multiplier);
                s.day = over.surge_day.unwrap_or(s.day);
            }
            surge.insert(cat, s);
        }
        if let Some(k) = self.categories.keys().find(|k| PoiCategory::from_key(k).is_none()) {
            return Err(Error::Config(format!("group {name}: unknown category {k}")));
        }
        Ok(CbgGroup {
            name: name.to_string(),
            first_cbg,
            count,
            surge,
            evac_fraction: self.evac_fraction.or(parent.map(|p| p.evac_fraction)).unwrap_or(0.0),
            base_evac_fraction: self.base_evac_fraction.or(parent.map(|p| p.base_evac_fraction)).unwrap_or(0.0),
        })
    }
}

/// A relocation away from home: continuous presence at `loc` in `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relocation {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub loc: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPlan {
    pub index: usize,
    pub device_id: String,
    pub cbg: usize,
    pub home: GeoPoint,
    pub base_evacuation: Option<Relocation>,
    pub prep_evacuation: Option<Relocation>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CbgCategoryTruth {
    pub cbg: String,
    pub category: String,
    pub multiplier: f64,
    pub expected_extent: f64,
    /// Only defined when the multiplier exceeds 1.
    pub expected_peak_day: Option<NaiveDate>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CbgTruth {
    pub cbg: String,
    pub tract: String,
    pub group: String,
    pub expected_evac_fraction: f64,
    pub expected_base_evac_fraction: f64,
    pub planted_evacuees: usize,
    pub planted_base_evacuees: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruth {
    pub seed: u64,
    pub cbg_categories: Vec<CbgCategoryTruth>,
    pub cbgs: Vec<CbgTruth>,
    /// device id → true home geoid
    pub homes: BTreeMap<String, String>,
}

/// A generated scenario: geography, POIs and agent plans. Ping traces are
/// produced on demand per agent.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub cbgs: Vec<CbgRecord>,
    pub pois: Vec<PoiRecord>,
    pub agents: Vec<AgentPlan>,
    study: TimeWindow,
}

fn grid_cols(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn rounded_point(lon: f64, lat: f64) -> GeoPoint {
    GeoPoint { lon: round6(lon), lat: round6(lat) }
}

pub fn cbg_geoid(index: usize, cbgs_per_tract: usize) -> String {
    let tract = 100 + index / cbgs_per_tract;
    let bg = index % cbgs_per_tract + 1;
    format!("48201{tract:06}{bg}")
}

fn agent_rng(seed: u64, agent: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((agent as u64) << 2 | purpose);
    rng
}

fn local_instant(tz: Tz, day: NaiveDate, minutes: i64) -> DateTime<Utc> {
    let naive = day.and_time(NaiveTime::MIN) + Duration::minutes(minutes);
    tz.from_local_datetime(&naive)
        .earliest()
        .unwrap_or_else(|| tz.from_utc_datetime(&naive))
        .with_timezone(&Utc)
}

impl Scenario {
    pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
        config.validate()?;
        let cols = grid_cols(config.n_cbgs);
        let cell = config.cell_deg;
        let cell_min = |k: usize| {
            (config.origin.lon + (k % cols) as f64 * cell, config.origin.lat + (k / cols) as f64 * cell)
        };

        let mut income_rng = agent_rng(config.seed, usize::MAX >> 3, 3);
        let mut cbgs = Vec::with_capacity(config.n_cbgs);
        let mut pois = Vec::with_capacity(config.n_cbgs * 5);
        for k in 0..config.n_cbgs {
            let (x0, y0) = cell_min(k);
            let geoid = cbg_geoid(k, config.cbgs_per_tract);
            let income = (income_rng.random_range(config.income_range.0..=config.income_range.1) / 100.0).round() * 100.0;
            cbgs.push(CbgRecord {
                tract_geoid: geoid[..11].to_string(),
                boundary: GeoPolygon::rectangle(x0, y0, x0 + cell, y0 + cell)?,
                geoid,
                median_income: Some(income),
            });
            for (cat, (fx, fy)) in PoiCategory::ALL.into_iter().zip(POI_OFFSETS) {
                let (cx, cy) = (round6(x0 + fx * cell), round6(y0 + fy * cell));
                let footprint = GeoPolygon::rectangle(
                    cx - FOOTPRINT_HALF_SIDE,
                    cy - FOOTPRINT_HALF_SIDE,
                    cx + FOOTPRINT_HALF_SIDE,
                    cy + FOOTPRINT_HALF_SIDE,
                )?;
                pois.push(PoiRecord {
                    place_id: format!("poi-{k:05}-{}", cat.key()),
                    name: format!("{} {k}", cat.key().replace('_', " ")),
                    naics_code: naics_for(cat).to_string(),
                    // Registry point sits ~10 m off the footprint centroid.
                    loc: rounded_point(cx + 0.0001, cy),
                    footprint: Some(footprint),
                });
            }
            // A restaurant nobody visits, without a footprint.
            pois.push(PoiRecord {
                place_id: format!("poi-{k:05}-restaurant"),
                name: format!("restaurant {k}"),
                naics_code: "722511".into(),
                loc: rounded_point(x0 + 0.5 * cell, y0 + 0.5 * cell),
                footprint: None,
            });
        }
        pois.sort_by(|a, b| a.place_id.cmp(&b.place_id));

        let tz = config.pipeline.time_zone;
        let study = config.pipeline.study().instants(tz);
        let evac_base = config.pipeline.evac_baseline;
        // Baseline-period evacuations depart early enough to be back before
        // the visit baseline starts, when the windows allow it.
        let span_days = (i64::from(NIGHT_START_HOUR) + config.evac_duration_h + 23) / 24;
        let latest = (config.pipeline.baseline.start - Duration::days(span_days)).min(evac_base.end);
        let base_last_departure = if latest >= evac_base.start { latest } else { evac_base.end };
        let base_departure_days = DateWindow { start: evac_base.start, end: base_last_departure.max(evac_base.start) };

        let n_agents = config.n_cbgs * config.agents_per_cbg;
        let agents: Vec<AgentPlan> = (0..n_agents)
            .into_par_iter()
            .map(|index| {
                let cbg = index / config.agents_per_cbg;
                let a = index % config.agents_per_cbg;
                let mut rng = agent_rng(config.seed, index, 0);
                let group = config.group_of(cbg);
                let home = interior_point(&mut rng, cell_min(cbg), cell);
                let away_cbg = (cbg + 1) % config.n_cbgs;
                let duration = Duration::hours(config.evac_duration_h);
                let base_evacuation = (rng.random::<f64>() < group.base_evac_fraction).then(|| {
                    let offset = rng.random_range(0..base_departure_days.len_days());
                    let day = base_departure_days.start + Duration::days(offset);
                    let start = local_instant(tz, day, i64::from(NIGHT_START_HOUR) * 60);
                    Relocation { start, end: start + duration, loc: interior_point(&mut rng, cell_min(away_cbg), cell) }
                });
                let prep_evacuation = (rng.random::<f64>() < group.evac_fraction).then(|| {
                    let start = local_instant(tz, config.pipeline.landfall, i64::from(NIGHT_START_HOUR) * 60);
                    Relocation { start, end: start + duration, loc: interior_point(&mut rng, cell_min(away_cbg), cell) }
                });
                AgentPlan {
                    index,
                    device_id: format!("dev-{cbg:05}-{a:05}"),
                    cbg,
                    home,
                    base_evacuation,
                    prep_evacuation,
                }
            })
            .collect();

        Ok(Scenario { config: config.clone(), cbgs, pois, agents, study })
    }

    /// Ping trace of one agent, restricted to the study window.
    pub fn trace(&self, agent: &AgentPlan) -> DeviceTrace {
        let cfg = &self.config;
        let tz = cfg.pipeline.time_zone;
        let mut rng = agent_rng(cfg.seed, agent.index, 1);
        let interval = Duration::seconds(cfg.ping_interval_s);
        let relocations: Vec<Relocation> =
            agent.base_evacuation.iter().chain(agent.prep_evacuation.iter()).copied().collect();
        let away = |t: DateTime<Utc>| relocations.iter().any(|r| t >= r.start && t < r.end);
        let mut pings: Vec<Ping> = Vec::new();
        let jittered = |rng: &mut ChaCha8Rng, p: GeoPoint| {
            rounded_point(
                p.lon + rng.random_range(-JITTER_DEG..=JITTER_DEG),
                p.lat + rng.random_range(-JITTER_DEG..=JITTER_DEG),
            )
        };

        let poi_points: Vec<(PoiCategory, GeoPoint)> = PoiCategory::ALL
            .into_iter()
            .zip(POI_OFFSETS)
            .map(|(cat, (fx, fy))| {
                let cols = grid_cols(cfg.n_cbgs);
                let x0 = cfg.origin.lon + (agent.cbg % cols) as f64 * cfg.cell_deg;
                let y0 = cfg.origin.lat + (agent.cbg / cols) as f64 * cfg.cell_deg;
                (cat, GeoPoint { lon: round6(x0 + fx * cfg.cell_deg), lat: round6(y0 + fy * cfg.cell_deg) })
            })
            .collect();

        for day in cfg.pipeline.study().dates() {
            // Daytime trips.
            let mut trips: Vec<GeoPoint> = Vec::new();
            for &(cat, loc) in &poi_points {
                let rate = cfg.base_visit_rate.get(&cat).copied().unwrap_or(0.0) * cfg.multiplier(agent.cbg, cat, day);
                let n = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize
                } else {
                    0
                };
                trips.extend(std::iter::repeat_n(loc, n));
            }
            let mut slots: Vec<i64> = (0..TRIP_SLOTS).collect();
            for i in (1..slots.len()).rev() {
                slots.swap(i, rng.random_range(0..=i));
            }
            for (loc, slot) in trips.into_iter().zip(slots) {
                let start = local_instant(tz, day, TRIP_FIRST_MINUTE + slot * TRIP_SLOT_MINUTES);
                let end = start + Duration::minutes(TRIP_DWELL_MINUTES);
                let mut t = start;
                while t <= end {
                    let p = jittered(&mut rng, loc);
                    if !away(t) {
                        pings.push(Ping { ts: t, loc: p });
                    }
                    t += interval;
                }
            }
            // Night at home.
            let start = local_instant(tz, day, i64::from(NIGHT_START_HOUR) * 60);
            let end = start + Duration::hours(NIGHT_HOURS);
            let mut t = start;
            while t <= end {
                let p = jittered(&mut rng, agent.home);
                if !away(t) {
                    pings.push(Ping { ts: t, loc: p });
                }
                t += interval;
            }
        }
        for r in &relocations {
            let mut t = r.start;
            while t < r.end {
                pings.push(Ping { ts: t, loc: jittered(&mut rng, r.loc) });
                t += interval;
            }
        }
        pings.retain(|p| self.study.contains(p.ts));
        pings.sort_by_key(|p| p.ts);
        pings.dedup_by_key(|p| p.ts);
        DeviceTrace { device_id: agent.device_id.clone(), pings }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let cfg = &self.config;
        let mut cbg_categories = Vec::new();
        let mut cbgs = Vec::new();
        for (k, rec) in self.cbgs.iter().enumerate() {
            let group = cfg.group_of(k);
            for cat in PoiCategory::ALL {
                let s = cfg.surge(k, cat);
                cbg_categories.push(CbgCategoryTruth {
                    cbg: rec.geoid.clone(),
                    category: cat.key().to_string(),
                    multiplier: s.multiplier,
                    expected_extent: s.multiplier - 1.0,
                    expected_peak_day: (s.multiplier > 1.0).then_some(s.day),
                });
            }
            let members = self.agents.iter().filter(|a| a.cbg == k);
            let (prep, base) = members.fold((0, 0), |(p, b), a| {
                (p + usize::from(a.prep_evacuation.is_some()), b + usize::from(a.base_evacuation.is_some()))
            });
            cbgs.push(CbgTruth {
                cbg: rec.geoid.clone(),
                tract: rec.tract_geoid.clone(),
                group: group.name.clone(),
                expected_evac_fraction: group.evac_fraction,
                expected_base_evac_fraction: group.base_evac_fraction,
                planted_evacuees: prep,
                planted_base_evacuees: base,
            });
        }
        let homes = self.agents.iter().map(|a| (a.device_id.clone(), self.cbgs[a.cbg].geoid.clone())).collect();
        GroundTruth { seed: cfg.seed, cbg_categories, cbgs, homes }
    }

    /// Writes the five input files, the ground truth and a pipeline config
    /// pointing at them. Returns the number of ping rows written.
    pub fn write_files(&self, dir: &Path) -> Result<u64> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        let io = |name: &str| {
            let p = dir.join(name);
            move |e: std::io::Error| Error::io(p, e)
        };

        let mut w = create("pings.csv")?;
        writeln!(w, "device_id,timestamp,lat,lon").map_err(io("pings.csv"))?;
        let mut rows = 0u64;
        // Generate in parallel chunks, write in agent order.
        for chunk in self.agents.chunks(256) {
            let traces: Vec<DeviceTrace> = chunk.par_iter().map(|a| self.trace(a)).collect();
            for t in traces {
                for p in &t.pings {
                    writeln!(w, "{},{},{:.6},{:.6}", t.device_id, format_timestamp(p.ts), p.loc.lat, p.loc.lon)
                        .map_err(io("pings.csv"))?;
                    rows += 1;
                }
            }
        }
        w.flush().map_err(io("pings.csv"))?;

        let mut w = create("pois.csv")?;
        writeln!(w, "place_id,name,naics_code,lat,lon").map_err(io("pois.csv"))?;
        for p in &self.pois {
            writeln!(w, "{},{},{},{:.6},{:.6}", p.place_id, p.name, p.naics_code, p.loc.lat, p.loc.lon)
                .map_err(io("pois.csv"))?;
        }
        w.flush().map_err(io("pois.csv"))?;

        let footprints = geo::feature_collection(
            self.pois
                .iter()
                .filter_map(|p| p.footprint.as_ref().map(|fp| (Map::from_iter([("name".to_string(), json!(p.name))]), fp)))
                .collect(),
        );
        write_json(&dir.join("footprints.geojson"), &footprints)?;

        let boundaries = geo::feature_collection(
            self.cbgs
                .iter()
                .map(|c| (Map::from_iter([("GEOID".to_string(), json!(c.geoid))]), &c.boundary))
                .collect(),
        );
        write_json(&dir.join("cbgs.geojson"), &boundaries)?;

        let mut w = create("income.csv")?;
        writeln!(w, "geoid,median_household_income").map_err(io("income.csv"))?;
        for c in &self.cbgs {
            writeln!(w, "{},{}", c.geoid, c.median_income.unwrap_or_default()).map_err(io("income.csv"))?;
        }
        w.flush().map_err(io("income.csv"))?;

        write_json(&dir.join("ground_truth.json"), &serde_json::to_value(self.ground_truth())?)?;
        std::fs::write(dir.join("pipeline.toml"), self.pipeline_toml()).map_err(io("pipeline.toml"))?;
        Ok(rows)
    }

    /// Pipeline config matching this scenario's windows and output files.
    pub fn pipeline_toml(&self) -> String {
        let p = &self.config.pipeline;
        format!(
            "[paths]\npings = \"pings.csv\"\npois = \"pois.csv\"\nfootprints = \"footprints.geojson\"\n\
             cbgs = \"cbgs.geojson\"\nincome = \"income.csv\"\n\n[windows]\nbaseline_start = \"{}\"\n\
             baseline_end = \"{}\"\nprep_start = \"{}\"\nlandfall_date = \"{}\"\nevac_baseline_start = \"{}\"\n\
             evac_baseline_end = \"{}\"\nevac_lookahead_days = {}\ntime_zone = \"{}\"\n",
            p.baseline.start,
            p.baseline.end,
            p.prep.start,
            p.landfall,
            p.evac_baseline.start,
            p.evac_baseline.end,
            p.evac_lookahead_days,
            p.time_zone.name(),
        )
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Uniform point in the cell interior, at least ~150 m from every POI site
/// and clear of the cell edges.
fn interior_point(rng: &mut ChaCha8Rng, (x0, y0): (f64, f64), cell: f64) -> GeoPoint {
    let margin = 0.05 * cell;
    loop {
        let fx = rng.random_range(margin..cell - margin);
        let fy = rng.random_range(margin..cell - margin);
        let p = rounded_point(x0 + fx, y0 + fy);
        let clear = POI_OFFSETS.iter().chain(std::iter::once(&(0.5, 0.5))).all(|&(ox, oy)| {
            geo::ground_distance(p, GeoPoint { lon: x0 + ox * cell, lat: y0 + oy * cell }) > 150.0
        });
        if clear {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{self, StopParams};

    fn small() -> ScenarioConfig {
        let mut cfg = ScenarioConfig { n_cbgs: 4, agents_per_cbg: 3, seed: 9, ..ScenarioConfig::default() };
        cfg.default_group.evac_fraction = 0.5;
        cfg.default_group.base_evac_fraction = 0.5;
        cfg
    }

    #[test]
    fn deterministic_per_seed() {
        let a = Scenario::generate(&small()).unwrap();
        let b = Scenario::generate(&small()).unwrap();
        assert_eq!(a.agents, b.agents);
        assert_eq!(a.trace(&a.agents[5]), b.trace(&b.agents[5]));
        let other = Scenario::generate(&ScenarioConfig { seed: 10, ..small() }).unwrap();
        assert_ne!(a.agents[0].home, other.agents[0].home);
    }

    #[test]
    fn grid_geography() {
        let s = Scenario::generate(&small()).unwrap();
        assert_eq!(s.cbgs.len(), 4);
        assert_eq!(s.cbgs[0].geoid, "482010001001");
        assert_eq!(s.cbgs[3].geoid, "482010001031");
        assert_eq!(s.pois.len(), 4 * 5);
        for p in s.pois.iter().filter(|p| p.footprint.is_some()) {
            let c = geo::centroid(p.footprint.as_ref().unwrap()).unwrap();
            assert!(geo::ground_distance(c, p.loc) < 50.0);
        }
        assert_eq!(cbg_geoid(5, 3), "482010001013");
    }

    #[test]
    fn traces_sorted_and_in_window() {
        let s = Scenario::generate(&small()).unwrap();
        let study = s.config.pipeline.study().instants(s.config.pipeline.time_zone);
        for a in &s.agents {
            let t = s.trace(a);
            assert!(t.pings.windows(2).all(|w| w[0].ts < w[1].ts));
            assert!(t.pings.iter().all(|p| study.contains(p.ts)));
        }
    }

    #[test]
    fn nightly_home_stops() {
        let s = Scenario::generate(&small()).unwrap();
        let a = &s.agents[0];
        let stops = trajectory::detect_stops(&a.device_id, &s.trace(a).pings, StopParams::default());
        let long: Vec<_> = stops.iter().filter(|st| st.dwell_s == 10 * 3600).collect();
        assert!(long.len() > 30, "{} ten-hour stops", long.len());
        assert!(long.iter().all(|st| geo::ground_distance(st.loc, a.home) < 20.0));
    }

    #[test]
    fn surge_multipliers() {
        let mut cfg = small();
        let d = |day| NaiveDate::from_ymd_opt(2017, 8, day).unwrap();
        cfg.default_group.surge.insert(PoiCategory::Grocery, Surge { multiplier: 2.0, day: d(22) });
        cfg.default_group.surge.insert(PoiCategory::Pharmacy, Surge { multiplier: 0.5, day: d(22) });
        assert_eq!(cfg.multiplier(0, PoiCategory::Grocery, d(22)), 2.0);
        assert_eq!(cfg.multiplier(0, PoiCategory::Grocery, d(21)), 1.0);
        assert_eq!(cfg.multiplier(0, PoiCategory::Grocery, d(10)), 1.0);
        assert_eq!(cfg.multiplier(0, PoiCategory::Pharmacy, d(21)), 0.5);
        assert_eq!(cfg.multiplier(0, PoiCategory::Pharmacy, d(10)), 1.0);
    }

    #[test]
    fn toml_groups() {
        let text = r#"
seed = 3
n_cbgs = 20
agents_per_cbg = 10

[visit_rates]
grocery = 0.5

[defaults]
multiplier = 2.0
surge_day = "2017-08-22"
evac_fraction = 0.3
base_evac_fraction = 0.1

[[groups]]
name = "block"
first_cbg = 0
count = 10
multiplier = 0.5
evac_fraction = 0.01

[groups.categories.pharmacy]
surge_day = "2017-08-24"
"#;
        let cfg = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(cfg.base_visit_rate[&PoiCategory::Grocery], 0.5);
        assert_eq!(cfg.base_visit_rate[&PoiCategory::Pharmacy], 0.0);
        let block = cfg.group_of(3);
        assert_eq!(block.name, "block");
        assert_eq!(block.surge[&PoiCategory::Grocery].multiplier, 0.5);
        assert_eq!(block.surge[&PoiCategory::Pharmacy].day, NaiveDate::from_ymd_opt(2017, 8, 24).unwrap());
        assert_eq!(block.base_evac_fraction, 0.1);
        assert_eq!(cfg.group_of(15).name, "default");
        assert_eq!(cfg.group_of(15).evac_fraction, 0.3);
    }

    #[test]
    fn invalid_configs() {
        assert!(ScenarioConfig::from_toml("n_cbgs = 0").is_err());
        assert!(ScenarioConfig::from_toml("cell_deg = -1.0").is_err());
        assert!(ScenarioConfig::from_toml("[defaults]\nmultiplier = -1.0").is_err());
        assert!(ScenarioConfig::from_toml("[defaults]\nsurge_day = \"2017-09-01\"").is_err());
    }
}
