//! Intermediate and report artifacts: CSV and GeoJSON writers, plus readers
//! for the artifacts that later stages consume.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::config::ParseMode;
use crate::error::{Error, Result};
use crate::evacuation::{EvacRate, Quadrant, QuadrantAssignment, TractEvacuation};
use crate::geo::{self, GeoPoint};
use crate::ingest::{self, format_timestamp, parse_timestamp, CbgRecord};
use crate::metrics::{IncomeStrata, PrepClass, PreparednessRecord};
use crate::stats::CorrelationResult;
use crate::trajectory::{HomeAssignment, Stop};
use crate::visits::{CategoryMap, PoiCategory, VisitRecord};

pub const STOPS: &str = "stops.csv";
pub const HOMES: &str = "homes.csv";
pub const VISITS: &str = "visits.csv";
pub const METRICS: &str = "metrics.csv";
pub const EVACUATION: &str = "evacuation.csv";
pub const QUADRANTS: &str = "quadrants.csv";
pub const QUADRANTS_GEOJSON: &str = "quadrants.geojson";
pub const HOTSPOTS: &str = "hotspots.csv";
pub const INCOME_STRATA: &str = "income_strata.csv";
pub const CORRELATION: &str = "correlation.csv";

const STOPS_HEADER: [&str; 7] = ["device_id", "start", "end", "dwell_s", "lat", "lon", "cbg_geoid"];
const HOMES_HEADER: [&str; 3] = ["device_id", "home_cbg", "home_dwell_s"];
const VISITS_HEADER: [&str; 5] = ["home_cbg", "place_id", "count", "naics_code", "date"];
const METRICS_HEADER: [&str; 6] = ["cbg", "category", "extent", "peak_date", "proactivity", "class"];
const EVACUATION_HEADER: [&str; 8] = [
    "tract",
    "base_evacuated",
    "base_total",
    "base_rate",
    "prep_evacuated",
    "prep_total",
    "prep_rate",
    "evac_change",
];

/// Rows and content digest of a written artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Written {
    pub rows: u64,
    pub bytes: Vec<u8>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

struct CsvOut {
    writer: csv::Writer<Vec<u8>>,
    rows: u64,
}

impl CsvOut {
    fn new(header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(CsvOut { writer, rows: 0 })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        self.rows += 1;
        Ok(())
    }

    fn finish(self) -> Result<Written> {
        let bytes = self.writer.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(Written { rows: self.rows, bytes })
    }
}

pub fn stops_csv<'a>(stops: impl IntoIterator<Item = &'a Stop>) -> Result<Written> {
    let mut out = CsvOut::new(&STOPS_HEADER)?;
    for s in stops {
        out.row([
            s.device_id.clone(),
            format_timestamp(s.start),
            format_timestamp(s.end),
            s.dwell_s.to_string(),
            s.loc.lat.to_string(),
            s.loc.lon.to_string(),
            s.cbg_geoid.clone().unwrap_or_default(),
        ])?;
    }
    out.finish()
}

pub fn homes_csv<'a>(homes: impl IntoIterator<Item = &'a HomeAssignment>) -> Result<Written> {
    let mut out = CsvOut::new(&HOMES_HEADER)?;
    for h in homes {
        let dwell = h.home_cbg.as_ref().and_then(|g| h.total_dwell_by_cbg.get(g));
        out.row([h.device_id.clone(), h.home_cbg.clone().unwrap_or_default(), opt(dwell)])?;
    }
    out.finish()
}

pub fn visits_csv(records: &[VisitRecord]) -> Result<Written> {
    let mut out = CsvOut::new(&VISITS_HEADER)?;
    for r in records {
        out.row([
            r.home_cbg.clone(),
            r.place_id.clone(),
            r.count.to_string(),
            r.naics_code.clone(),
            r.date.to_string(),
        ])?;
    }
    out.finish()
}

pub fn metrics_csv(records: &[PreparednessRecord]) -> Result<Written> {
    let mut out = CsvOut::new(&METRICS_HEADER)?;
    for r in records {
        out.row([
            r.cbg.clone(),
            r.category.key().to_string(),
            r.extent.to_string(),
            r.peak_date.to_string(),
            r.proactivity.to_string(),
            r.class.key().to_string(),
        ])?;
    }
    out.finish()
}

pub fn evacuation_csv(rows: &[TractEvacuation]) -> Result<Written> {
    let mut out = CsvOut::new(&EVACUATION_HEADER)?;
    let parts = |r: &Option<EvacRate>| match r {
        Some(r) => [r.evacuated.to_string(), r.total.to_string(), r.rate.to_string()],
        None => Default::default(),
    };
    for t in rows {
        let [be, bt, br] = parts(&t.base);
        let [pe, pt, pr] = parts(&t.prep);
        out.row([t.tract.clone(), be, bt, br, pe, pt, pr, opt(t.change)])?;
    }
    out.finish()
}

pub fn quadrants_csv(rows: &[QuadrantAssignment]) -> Result<Written> {
    let mut out = CsvOut::new(&["cbg", "category", "evac_change", "extent", "quadrant"])?;
    for q in rows {
        out.row([
            q.cbg.clone(),
            q.category.key().to_string(),
            q.evac_change.to_string(),
            q.extent.to_string(),
            q.quadrant.to_string(),
        ])?;
    }
    out.finish()
}

pub fn hotspots_csv<'a>(cbgs: impl IntoIterator<Item = &'a String>) -> Result<Written> {
    let mut out = CsvOut::new(&["cbg"])?;
    for c in cbgs {
        out.row([c])?;
    }
    out.finish()
}

pub fn income_strata_csv(strata: &IncomeStrata) -> Result<Written> {
    let mut out = CsvOut::new(&[
        "group", "income_min", "income_max", "n_cbgs", "category", "count", "q1", "median", "q3", "mean",
    ])?;
    for g in &strata.groups {
        for (cat, summary) in &g.extents {
            let s = summary.as_ref();
            out.row([
                g.index.to_string(),
                opt(g.income_min),
                opt(g.income_max),
                g.cbgs.len().to_string(),
                cat.key().to_string(),
                s.map_or(0, |s| s.count).to_string(),
                opt(s.map(|s| s.q1)),
                opt(s.map(|s| s.median)),
                opt(s.map(|s| s.q3)),
                opt(s.map(|s| s.mean)),
            ])?;
        }
    }
    out.finish()
}

pub fn correlation_csv(results: &BTreeMap<PoiCategory, Option<CorrelationResult>>) -> Result<Written> {
    let mut out = CsvOut::new(&["category", "coefficient", "p_value", "n"])?;
    for (cat, r) in results {
        out.row([
            cat.key().to_string(),
            opt(r.map(|r| r.coefficient)),
            opt(r.map(|r| r.p_value)),
            opt(r.map(|r| r.n)),
        ])?;
    }
    out.finish()
}

/// One feature per CBG that entered quadrant classification, carrying the
/// per-category quadrant and extent and a hotspot flag.
pub fn quadrants_geojson(
    cbgs: &[CbgRecord],
    rows: &[QuadrantAssignment],
    hotspots: &std::collections::BTreeSet<String>,
) -> Result<Written> {
    let mut props: BTreeMap<&str, Map<String, Value>> = BTreeMap::new();
    for q in rows {
        let p = props.entry(q.cbg.as_str()).or_insert_with(|| {
            Map::from_iter([
                ("GEOID".to_string(), json!(q.cbg)),
                ("evac_change".to_string(), json!(q.evac_change)),
                ("hotspot".to_string(), json!(hotspots.contains(&q.cbg))),
            ])
        });
        p.insert(format!("quadrant_{}", q.category.key()), json!(q.quadrant.to_string()));
        p.insert(format!("extent_{}", q.category.key()), json!(q.extent));
    }
    let features: Vec<(Map<String, Value>, &geo::GeoPolygon)> = cbgs
        .iter()
        .filter_map(|c| props.remove(c.geoid.as_str()).map(|p| (p, &c.boundary)))
        .collect();
    let rows = features.len() as u64;
    let mut bytes = serde_json::to_vec_pretty(&geo::feature_collection(features))?;
    bytes.push(b'\n');
    Ok(Written { rows, bytes })
}

// Readers. Intermediate artifacts are produced by this program, so any
// malformed row is an error.

fn read_rows(
    path: &Path,
    header: &[&str],
    mut f: impl FnMut(&csv::StringRecord) -> std::result::Result<(), String>,
) -> Result<()> {
    let mut reader = ingest::open_csv(path, header)?;
    ingest::for_each_row(path, &mut reader, ParseMode::FailFast, |_, rec| f(rec))?;
    Ok(())
}

fn num<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<T, String> {
    let s = ingest::field(rec, idx, name)?;
    s.parse().map_err(|_| format!("{name}: cannot parse {s:?}"))
}

fn opt_num<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> std::result::Result<Option<T>, String> {
    match ingest::field(rec, idx, name)? {
        "" => Ok(None),
        _ => num(rec, idx, name).map(Some),
    }
}

fn text(rec: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<String, String> {
    ingest::field(rec, idx, name).map(str::to_string)
}

/// Stops grouped by device, in file order.
pub fn read_stops(path: &Path) -> Result<Vec<(String, Vec<Stop>)>> {
    let mut out: Vec<(String, Vec<Stop>)> = Vec::new();
    read_rows(path, &STOPS_HEADER, |rec| {
        let device_id = text(rec, 0, "device_id")?;
        let cbg = text(rec, 6, "cbg_geoid")?;
        let stop = Stop {
            start: parse_timestamp(ingest::field(rec, 1, "start")?)?,
            end: parse_timestamp(ingest::field(rec, 2, "end")?)?,
            dwell_s: num(rec, 3, "dwell_s")?,
            loc: GeoPoint::new(num(rec, 5, "lon")?, num(rec, 4, "lat")?).map_err(|e| e.to_string())?,
            cbg_geoid: (!cbg.is_empty()).then_some(cbg),
            device_id: device_id.clone(),
        };
        match out.last_mut() {
            Some((d, stops)) if *d == device_id => stops.push(stop),
            _ => out.push((device_id, vec![stop])),
        }
        Ok(())
    })?;
    Ok(out)
}

/// Device id → home CBG (`None` for devices without a home).
pub fn read_homes(path: &Path) -> Result<BTreeMap<String, Option<String>>> {
    let mut out = BTreeMap::new();
    let mut dup = None;
    read_rows(path, &HOMES_HEADER, |rec| {
        let device = text(rec, 0, "device_id")?;
        let home = text(rec, 1, "home_cbg")?;
        if out.insert(device.clone(), (!home.is_empty()).then_some(home)).is_some() {
            dup.get_or_insert(device);
        }
        Ok(())
    })?;
    match dup {
        Some(d) => Err(Error::DuplicateKey(format!("device {d} in {}", path.display()))),
        None => Ok(out),
    }
}

pub fn read_visits(path: &Path, categories: &CategoryMap) -> Result<Vec<VisitRecord>> {
    let mut out = Vec::new();
    read_rows(path, &VISITS_HEADER, |rec| {
        let naics_code = text(rec, 3, "naics_code")?;
        let category = categories.lookup(&naics_code).ok_or_else(|| format!("naics_code {naics_code} has no category"))?;
        out.push(VisitRecord {
            home_cbg: text(rec, 0, "home_cbg")?,
            place_id: text(rec, 1, "place_id")?,
            count: num(rec, 2, "count")?,
            naics_code,
            date: num(rec, 4, "date")?,
            category,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<PreparednessRecord>> {
    let mut out = Vec::new();
    read_rows(path, &METRICS_HEADER, |rec| {
        let cat = text(rec, 1, "category")?;
        let class = text(rec, 5, "class")?;
        out.push(PreparednessRecord {
            cbg: text(rec, 0, "cbg")?,
            category: PoiCategory::from_key(&cat).ok_or_else(|| format!("unknown category {cat:?}"))?,
            extent: num(rec, 2, "extent")?,
            peak_date: num(rec, 3, "peak_date")?,
            proactivity: num(rec, 4, "proactivity")?,
            class: PrepClass::from_key(&class).ok_or_else(|| format!("unknown class {class:?}"))?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_evacuation(path: &Path) -> Result<Vec<TractEvacuation>> {
    let mut out = Vec::new();
    read_rows(path, &EVACUATION_HEADER, |rec| {
        let tract = text(rec, 0, "tract")?;
        let rate = |i: usize| -> std::result::Result<Option<EvacRate>, String> {
            let evacuated: Option<u64> = opt_num(rec, i, "evacuated")?;
            let total: Option<u64> = opt_num(rec, i + 1, "total")?;
            let rate: Option<f64> = opt_num(rec, i + 2, "rate")?;
            Ok(match (evacuated, total, rate) {
                (Some(evacuated), Some(total), Some(rate)) => {
                    Some(EvacRate { tract: tract.clone(), evacuated, total, rate })
                }
                (None, None, None) => None,
                _ => return Err("partially filled rate columns".into()),
            })
        };
        out.push(TractEvacuation {
            base: rate(1)?,
            prep: rate(4)?,
            change: opt_num(rec, 7, "evac_change")?,
            tract,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_quadrants(path: &Path) -> Result<Vec<QuadrantAssignment>> {
    let mut out = Vec::new();
    read_rows(path, &["cbg", "category", "evac_change", "extent", "quadrant"], |rec| {
        let cat = text(rec, 1, "category")?;
        let quad = text(rec, 4, "quadrant")?;
        out.push(QuadrantAssignment {
            cbg: text(rec, 0, "cbg")?,
            category: PoiCategory::from_key(&cat).ok_or_else(|| format!("unknown category {cat:?}"))?,
            evac_change: num(rec, 2, "evac_change")?,
            extent: num(rec, 3, "extent")?,
            quadrant: Quadrant::from_key(&quad).ok_or_else(|| format!("unknown quadrant {quad:?}"))?,
        });
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evacuation::Level;
    use chrono::{NaiveDate, TimeZone, Utc};

    fn write(dir: &Path, name: &str, w: &Written) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, &w.bytes).unwrap();
        p
    }

    #[test]
    fn stops_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Utc.with_ymd_and_hms(2017, 8, 1, 1, 2, 3).unwrap();
        let mk = |d: &str, lat: f64, cbg: Option<&str>| Stop {
            device_id: d.into(),
            loc: GeoPoint { lon: -95.123456789012, lat },
            start: t,
            end: t + chrono::Duration::seconds(600),
            dwell_s: 600,
            cbg_geoid: cbg.map(String::from),
        };
        let stops = vec![mk("a", 29.1, Some("482010001001")), mk("a", 0.1 + 0.2, None), mk("b,quoted", 29.3, None)];
        let p = write(dir.path(), STOPS, &stops_csv(&stops).unwrap());
        let back = read_stops(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, stops[..2]);
        assert_eq!(back[1].0, "b,quoted");
    }

    #[test]
    fn metrics_and_evacuation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![PreparednessRecord {
            cbg: "482010001001".into(),
            category: PoiCategory::HomeImprovement,
            extent: 1.0 / 3.0,
            peak_date: NaiveDate::from_ymd_opt(2017, 8, 22).unwrap(),
            proactivity: 3,
            class: PrepClass::ModeratelyPrepared,
        }];
        let p = write(dir.path(), METRICS, &metrics_csv(&recs).unwrap());
        assert_eq!(read_metrics(&p).unwrap(), recs);

        let rate = |e, t| EvacRate { tract: "48201000100".into(), evacuated: e, total: t, rate: e as f64 / t as f64 };
        let rows = vec![
            TractEvacuation { tract: "48201000100".into(), base: Some(rate(1, 3)), prep: Some(rate(2, 7)), change: Some(-1.0 / 7.0) },
            TractEvacuation { tract: "48201000100".into(), base: None, prep: Some(rate(2, 7)), change: None },
        ];
        let p = write(dir.path(), EVACUATION, &evacuation_csv(&rows).unwrap());
        assert_eq!(read_evacuation(&p).unwrap(), rows);
    }

    #[test]
    fn quadrants_round_trip_and_geojson() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![QuadrantAssignment {
            cbg: "482010001001".into(),
            category: PoiCategory::Grocery,
            evac_change: -0.5,
            extent: 0.25,
            quadrant: Quadrant { evac: Level::Low, prep: Level::High },
        }];
        let w = quadrants_csv(&rows).unwrap();
        assert!(String::from_utf8_lossy(&w.bytes).contains("low_evac_high_prep"));
        let p = write(dir.path(), QUADRANTS, &w);
        assert_eq!(read_quadrants(&p).unwrap(), rows);

        let cbg = CbgRecord {
            geoid: "482010001001".into(),
            tract_geoid: "48201000100".into(),
            boundary: geo::GeoPolygon::rectangle(0.0, 0.0, 1.0, 1.0).unwrap(),
            median_income: None,
        };
        let g = quadrants_geojson(&[cbg], &rows, &Default::default()).unwrap();
        assert_eq!(g.rows, 1);
        let v: Value = serde_json::from_slice(&g.bytes).unwrap();
        let props = &v["features"][0]["properties"];
        assert_eq!(props["quadrant_grocery"], "low_evac_high_prep");
        assert_eq!(props["hotspot"], false);
    }

    #[test]
    fn visits_need_known_category() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(VISITS);
        std::fs::write(&p, "home_cbg,place_id,count,naics_code,date\n482010001001,x,2,722511,2017-08-01\n").unwrap();
        assert!(matches!(read_visits(&p, &CategoryMap::default()), Err(Error::Parse { line: 2, .. })));
    }
}
