//! Readers for the five input datasets and the registries built from them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use chrono::{DateTime, SubsecRound, Utc};
use log::warn;

use crate::config::{ParseMode, TimeWindow};
use crate::error::{Error, Result};
use crate::geo::{self, BBox, BBoxIndex, GeoPoint, GeoPolygon};

pub const PING_HEADER: [&str; 4] = ["device_id", "timestamp", "lat", "lon"];
pub const POI_HEADER: [&str; 5] = ["place_id", "name", "naics_code", "lat", "lon"];
pub const INCOME_HEADER: [&str; 2] = ["geoid", "median_household_income"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ping {
    pub ts: DateTime<Utc>,
    pub loc: GeoPoint,
}

/// Time-sorted pings of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTrace {
    pub device_id: String,
    pub pings: Vec<Ping>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PingLoad {
    /// Sorted by device id.
    pub traces: Vec<DeviceTrace>,
    pub rows_read: u64,
    pub dropped_outside_window: u64,
    pub duplicates: u64,
    pub skipped_malformed: u64,
}

impl PingLoad {
    pub fn ping_count(&self) -> usize {
        self.traces.iter().map(|t| t.pings.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiRecord {
    pub place_id: String,
    pub name: String,
    pub naics_code: String,
    pub loc: GeoPoint,
    pub footprint: Option<GeoPolygon>,
}

#[derive(Debug, Clone, Default)]
pub struct PoiRegistry {
    /// Sorted by place id.
    pub pois: Vec<PoiRecord>,
    pub linked: usize,
    pub footprints_read: usize,
    pub skipped_malformed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbgRecord {
    pub geoid: String,
    pub tract_geoid: String,
    pub boundary: GeoPolygon,
    pub median_income: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct CbgSet {
    /// Sorted by geoid.
    pub records: Vec<CbgRecord>,
    pub income_rows_without_boundary: usize,
    pub skipped_malformed: u64,
}

pub(crate) fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header = reader.headers()?.clone();
    let actual: Vec<&str> = header.iter().map(str::trim).collect();
    if actual != expected {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {:?}, found {:?}", expected.join(","), actual.join(",")),
        ));
    }
    Ok(reader)
}

/// Iterates data rows, handing each to `f` with its 1-based line number.
/// Row-level failures abort in fail-fast mode and are counted otherwise.
pub(crate) fn for_each_row(
    path: &Path,
    reader: &mut csv::Reader<File>,
    mode: ParseMode,
    mut f: impl FnMut(u64, &csv::StringRecord) -> std::result::Result<(), String>,
) -> Result<u64> {
    let mut skipped = 0;
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        let outcome = match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => f(record.position().map_or(line, |p| p.line()), &record),
            Err(e) => Err(e.to_string()),
        };
        if let Err(message) = outcome {
            match mode {
                ParseMode::FailFast => {
                    let line = record.position().map_or(line, |p| p.line());
                    return Err(Error::parse(path, line, message));
                }
                ParseMode::Lenient => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        warn!("{}: skipped {skipped} malformed rows", path.display());
    }
    Ok(skipped)
}

pub(crate) fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str) -> std::result::Result<&'a str, String> {
    rec.get(idx).map(str::trim).ok_or_else(|| format!("missing field {name}"))
}

pub(crate) fn parse_f64(rec: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<f64, String> {
    let s = field(rec, idx, name)?;
    s.parse::<f64>().map_err(|_| format!("{name}: not a number: {s:?}"))
}

pub(crate) fn parse_point(rec: &csv::StringRecord, lat_idx: usize, lon_idx: usize) -> std::result::Result<GeoPoint, String> {
    let lat = parse_f64(rec, lat_idx, "lat")?;
    let lon = parse_f64(rec, lon_idx, "lon")?;
    GeoPoint::new(lon, lat).map_err(|e| e.to_string())
}

pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc).trunc_subsecs(0))
        .map_err(|e| format!("timestamp {s:?}: {e}"))
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Loads pings inside `window`, grouped by device and sorted by time.
/// Duplicate `(device_id, timestamp)` rows keep their first occurrence.
pub fn load_pings(path: &Path, window: TimeWindow, mode: ParseMode) -> Result<PingLoad> {
    let mut reader = open_csv(path, &PING_HEADER)?;
    let mut by_device: HashMap<String, Vec<Ping>> = HashMap::new();
    let mut load = PingLoad::default();
    let mut dropped = 0;
    let mut rows = 0;
    load.skipped_malformed = for_each_row(path, &mut reader, mode, |_, rec| {
        let device = field(rec, 0, "device_id")?;
        if device.is_empty() {
            return Err("empty device_id".into());
        }
        let ts = parse_timestamp(field(rec, 1, "timestamp")?)?;
        let loc = parse_point(rec, 2, 3)?;
        rows += 1;
        if !window.contains(ts) {
            dropped += 1;
            return Ok(());
        }
        match by_device.get_mut(device) {
            Some(v) => v.push(Ping { ts, loc }),
            None => {
                by_device.insert(device.to_string(), vec![Ping { ts, loc }]);
            }
        }
        Ok(())
    })?;
    load.rows_read = rows;
    load.dropped_outside_window = dropped;

    let mut traces: Vec<DeviceTrace> = by_device
        .into_iter()
        .map(|(device_id, mut pings)| {
            // Stable: the first occurrence of a timestamp stays first.
            pings.sort_by_key(|p| p.ts);
            let before = pings.len();
            pings.dedup_by_key(|p| p.ts);
            load.duplicates += (before - pings.len()) as u64;
            DeviceTrace { device_id, pings }
        })
        .collect();
    traces.sort_by(|a, b| a.device_id.cmp(&b.device_id));
    load.traces = traces;
    Ok(load)
}

fn valid_naics(code: &str) -> bool {
    code.len() == 6 && code.bytes().all(|b| b.is_ascii_digit())
}

/// Reads the POI CSV and links each POI to the nearest footprint centroid
/// within `match_radius_m`. Each footprint goes to at most one POI: the
/// nearest proposer, ties broken by smaller place id.
pub fn build_poi_registry(
    poi_path: &Path,
    footprints_path: Option<&Path>,
    match_radius_m: f64,
    mode: ParseMode,
) -> Result<PoiRegistry> {
    let mut reader = open_csv(poi_path, &POI_HEADER)?;
    let mut pois: Vec<PoiRecord> = Vec::new();
    let skipped = for_each_row(poi_path, &mut reader, mode, |_, rec| {
        let place_id = field(rec, 0, "place_id")?;
        if place_id.is_empty() {
            return Err("empty place_id".into());
        }
        let naics_code = field(rec, 2, "naics_code")?;
        if !valid_naics(naics_code) {
            return Err(format!("naics_code {naics_code:?} is not 6 digits"));
        }
        pois.push(PoiRecord {
            place_id: place_id.to_string(),
            name: field(rec, 1, "name")?.to_string(),
            naics_code: naics_code.to_string(),
            loc: parse_point(rec, 3, 4)?,
            footprint: None,
        });
        Ok(())
    })?;
    pois.sort_by(|a, b| a.place_id.cmp(&b.place_id));
    if let Some(dup) = pois.windows(2).find(|w| w[0].place_id == w[1].place_id) {
        return Err(Error::DuplicateKey(format!("place_id {}", dup[0].place_id)));
    }

    let footprints: Vec<GeoPolygon> = match footprints_path {
        Some(p) => geo::read_polygon_features(p)?.into_iter().map(|f| f.polygon).collect(),
        None => Vec::new(),
    };
    let links = link_footprints(&pois, &footprints, match_radius_m);
    let linked = links.len();
    for (poi_idx, fp_idx) in links {
        pois[poi_idx].footprint = Some(footprints[fp_idx].clone());
    }
    Ok(PoiRegistry {
        pois,
        linked,
        footprints_read: footprints.len(),
        skipped_malformed: skipped,
    })
}

/// Returns `(poi index, footprint index)` pairs; `pois` must be sorted by
/// place id so that index order is the tie-break order.
pub fn link_footprints(pois: &[PoiRecord], footprints: &[GeoPolygon], match_radius_m: f64) -> Vec<(usize, usize)> {
    // (footprint index, centroid) for footprints with a usable centroid.
    let centroids: Vec<(usize, GeoPoint)> = footprints
        .iter()
        .enumerate()
        .filter_map(|(i, fp)| match geo::centroid(fp) {
            Ok(c) => Some((i, c)),
            Err(e) => {
                warn!("footprint {i} skipped: {e}");
                None
            }
        })
        .collect();
    let boxes: Vec<BBox> = centroids
        .iter()
        .map(|(_, c)| BBox { min_lon: c.lon, min_lat: c.lat, max_lon: c.lon, max_lat: c.lat })
        .collect();
    let cell = (match_radius_m / geo::METERS_PER_DEGREE * 4.0).clamp(1e-4, 1.0);
    let index = BBoxIndex::new(boxes, cell);

    // Each POI proposes its nearest footprint within the radius.
    let mut proposals: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (poi_idx, poi) in pois.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for slot in index.query_bbox(&BBox::around(poi.loc, match_radius_m)) {
            let (fp_idx, c) = centroids[slot];
            let d = geo::ground_distance(poi.loc, c);
            if d <= match_radius_m && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, fp_idx));
            }
        }
        if let Some((d, fp_idx)) = best {
            // Ascending poi order means the first proposer at a given
            // distance has the smaller place id.
            match proposals.get(&fp_idx) {
                Some(&(bd, _)) if bd <= d => {}
                _ => {
                    proposals.insert(fp_idx, (d, poi_idx));
                }
            }
        }
    }
    let mut links: Vec<(usize, usize)> = proposals.into_iter().map(|(fp, (_, poi))| (poi, fp)).collect();
    links.sort_unstable();
    links
}

/// Loads CBG boundaries and left-joins the income table onto them.
pub fn load_cbgs(boundaries_path: &Path, income_path: Option<&Path>, mode: ParseMode) -> Result<CbgSet> {
    let features = geo::read_polygon_features(boundaries_path)?;
    let mut records = Vec::with_capacity(features.len());
    for (idx, f) in features.into_iter().enumerate() {
        let geoid = match f.properties.get("GEOID").and_then(|v| v.as_str()) {
            Some(g) if g.len() == 12 && g.bytes().all(|b| b.is_ascii_digit()) => g.to_string(),
            Some(g) => return Err(Error::parse(boundaries_path, 0, format!("feature {idx}: GEOID {g:?} is not 12 digits"))),
            None => return Err(Error::parse(boundaries_path, 0, format!("feature {idx}: missing string GEOID"))),
        };
        records.push(CbgRecord {
            tract_geoid: geoid[..11].to_string(),
            geoid,
            boundary: f.polygon,
            median_income: None,
        });
    }
    records.sort_by(|a, b| a.geoid.cmp(&b.geoid));
    if let Some(dup) = records.windows(2).find(|w| w[0].geoid == w[1].geoid) {
        return Err(Error::DuplicateKey(format!("GEOID {}", dup[0].geoid)));
    }

    let mut set = CbgSet::default();
    if let Some(income_path) = income_path {
        let mut reader = open_csv(income_path, &INCOME_HEADER)?;
        let mut incomes: BTreeMap<String, Option<f64>> = BTreeMap::new();
        let mut dup: Option<String> = None;
        set.skipped_malformed = for_each_row(income_path, &mut reader, mode, |_, rec| {
            let geoid = field(rec, 0, "geoid")?;
            let raw = field(rec, 1, "median_household_income")?;
            // Blank or negative (ACS sentinel) incomes are missing values.
            let income = if raw.is_empty() {
                None
            } else {
                let v: f64 = raw.parse().map_err(|_| format!("income {raw:?} is not a number"))?;
                (v.is_finite() && v >= 0.0).then_some(v)
            };
            if incomes.insert(geoid.to_string(), income).is_some() && dup.is_none() {
                dup = Some(geoid.to_string());
            }
            Ok(())
        })?;
        if let Some(d) = dup {
            return Err(Error::DuplicateKey(format!("income geoid {d}")));
        }
        let known: HashSet<&str> = records.iter().map(|r| r.geoid.as_str()).collect();
        set.income_rows_without_boundary = incomes.keys().filter(|g| !known.contains(g.as_str())).count();
        if set.income_rows_without_boundary > 0 {
            warn!("{} income rows have no matching CBG boundary", set.income_rows_without_boundary);
        }
        for r in &mut records {
            r.median_income = incomes.get(&r.geoid).copied().flatten();
        }
    }
    set.records = records;
    Ok(set)
}
