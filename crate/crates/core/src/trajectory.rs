//! Stop detection, home inference and evacuation detection for one device.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};

use crate::config::TimeWindow;
use crate::error::{Error, Result};
use crate::geo::{self, BBoxIndex, GeoPoint};
use crate::ingest::{CbgRecord, Ping};

/// Dwell a device needs in one CBG before it counts as home, and the absence
/// length that counts as an evacuation.
pub const ONE_DAY_S: i64 = 86_400;

#[derive(Debug, Clone, PartialEq)]
pub struct Stop {
    pub device_id: String,
    pub loc: GeoPoint,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub dwell_s: i64,
    pub cbg_geoid: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopParams {
    pub radius_m: f64,
    pub max_gap_s: i64,
    pub min_dwell_s: i64,
}

impl Default for StopParams {
    fn default() -> Self {
        StopParams { radius_m: 100.0, max_gap_s: 1800, min_dwell_s: 300 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomeAssignment {
    pub device_id: String,
    pub home_cbg: Option<String>,
    pub total_dwell_by_cbg: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvacuationFlag {
    pub device_id: String,
    pub evacuated: bool,
    pub longest_absence_s: i64,
}

struct Cluster {
    first: DateTime<Utc>,
    last: DateTime<Utc>,
    sum_lon: f64,
    sum_lat: f64,
    n: usize,
}

impl Cluster {
    fn new(p: &Ping) -> Self {
        Cluster { first: p.ts, last: p.ts, sum_lon: p.loc.lon, sum_lat: p.loc.lat, n: 1 }
    }

    fn centroid(&self) -> GeoPoint {
        GeoPoint { lon: self.sum_lon / self.n as f64, lat: self.sum_lat / self.n as f64 }
    }

    fn push(&mut self, p: &Ping) {
        self.last = p.ts;
        self.sum_lon += p.loc.lon;
        self.sum_lat += p.loc.lat;
        self.n += 1;
    }

    fn into_stop(self, device_id: &str, min_dwell_s: i64) -> Option<Stop> {
        let dwell_s = (self.last - self.first).num_seconds();
        (dwell_s >= min_dwell_s).then(|| Stop {
            device_id: device_id.to_string(),
            loc: self.centroid(),
            start: self.first,
            end: self.last,
            dwell_s,
            cbg_geoid: None,
        })
    }
}

/// Sequential spatio-temporal clustering. A ping extends the open cluster
/// when it lies within `radius_m` of the cluster's running centroid and
/// follows the previous ping by at most `max_gap_s`; otherwise the cluster
/// closes and is kept as a stop if it dwelled at least `min_dwell_s`.
pub fn detect_stops(device_id: &str, pings: &[Ping], params: StopParams) -> Vec<Stop> {
    let mut stops = Vec::new();
    let mut iter = pings.iter();
    let Some(first) = iter.next() else {
        return stops;
    };
    let mut cluster = Cluster::new(first);
    for p in iter {
        let gap = (p.ts - cluster.last).num_seconds();
        if gap <= params.max_gap_s && geo::ground_distance(p.loc, cluster.centroid()) <= params.radius_m {
            cluster.push(p);
        } else {
            let done = std::mem::replace(&mut cluster, Cluster::new(p));
            stops.extend(done.into_stop(device_id, params.min_dwell_s));
        }
    }
    stops.extend(cluster.into_stop(device_id, params.min_dwell_s));
    stops
}

/// Point-to-CBG lookup with a bounding-box prefilter. Points on a shared
/// edge resolve to the smallest geoid.
pub struct CbgLocator<'a> {
    cbgs: &'a [CbgRecord],
    index: BBoxIndex,
}

impl<'a> CbgLocator<'a> {
    pub fn new(cbgs: &'a [CbgRecord]) -> Self {
        let index = BBoxIndex::with_auto_cell(cbgs.iter().map(|c| c.boundary.bbox()).collect());
        CbgLocator { cbgs, index }
    }

    pub fn locate(&self, p: GeoPoint) -> Option<&'a CbgRecord> {
        self.index
            .query_point(p)
            .into_iter()
            .map(|i| &self.cbgs[i])
            .filter(|c| geo::point_in_polygon(p, &c.boundary))
            .min_by(|a, b| a.geoid.cmp(&b.geoid))
    }
}

pub fn assign_stop_cbgs(stops: &mut [Stop], locator: &CbgLocator<'_>) {
    for stop in stops {
        stop.cbg_geoid = locator.locate(stop.loc).map(|c| c.geoid.clone());
    }
}

/// Sums window-clipped dwell per CBG; home is the CBG with the largest total
/// if that total exceeds one day. Ties go to the smaller geoid.
pub fn infer_home(device_id: &str, stops: &[Stop], window: TimeWindow) -> HomeAssignment {
    let mut totals: BTreeMap<String, i64> = BTreeMap::new();
    for s in stops {
        let Some(cbg) = &s.cbg_geoid else { continue };
        let secs = window.overlap_secs(s.start, s.end);
        if secs > 0 {
            *totals.entry(cbg.clone()).or_default() += secs;
        }
    }
    // BTreeMap iterates in geoid order, so the first maximum is the smallest geoid.
    let mut best: Option<(&String, i64)> = None;
    for (g, &d) in &totals {
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((g, d));
        }
    }
    let home_cbg = best.filter(|&(_, d)| d > ONE_DAY_S).map(|(g, _)| g.clone());
    HomeAssignment { device_id: device_id.to_string(), home_cbg, total_dwell_by_cbg: totals }
}

/// True if any stop overlaps the window.
pub fn observed_in(stops: &[Stop], window: TimeWindow) -> bool {
    stops.iter().any(|s| s.end > window.start && s.start < window.end)
}

/// Longest contiguous absence from the home CBG within the window. An
/// absence runs from the start of the first away stop to the end of the last
/// away stop before the device is next seen at home. Stops outside every
/// CBG count as away.
pub fn detect_evacuation(
    device_id: &str,
    stops: &[Stop],
    home: Option<&str>,
    window: TimeWindow,
) -> Result<EvacuationFlag> {
    let home = home.ok_or_else(|| Error::NoHome(device_id.to_string()))?;
    let mut longest = 0i64;
    let mut run: Option<(DateTime<Utc>, DateTime<Utc>)> = None;
    for s in stops {
        if !(s.end > window.start && s.start < window.end) {
            continue;
        }
        let (start, end) = (s.start.max(window.start), s.end.min(window.end));
        if s.cbg_geoid.as_deref() == Some(home) {
            if let Some((a, b)) = run.take() {
                longest = longest.max((b - a).num_seconds());
            }
        } else {
            run = Some(match run {
                Some((a, b)) => (a, b.max(end)),
                None => (start, end),
            });
        }
    }
    if let Some((a, b)) = run {
        longest = longest.max((b - a).num_seconds());
    }
    Ok(EvacuationFlag {
        device_id: device_id.to_string(),
        evacuated: longest > ONE_DAY_S,
        longest_absence_s: longest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPolygon;
    use chrono::{Duration, TimeZone};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, 8, 1, 0, 0, 0).unwrap()
    }

    fn ping(min: i64, lon: f64, lat: f64) -> Ping {
        Ping { ts: t0() + Duration::minutes(min), loc: GeoPoint::new(lon, lat).unwrap() }
    }

    /// Independent oracle: split wherever the gap or radius rule breaks, using
    /// a fresh centroid computation per candidate, then filter by dwell.
    fn oracle_stops(pings: &[Ping], p: StopParams) -> Vec<(DateTime<Utc>, DateTime<Utc>)> {
        let mut groups: Vec<Vec<Ping>> = Vec::new();
        for ping in pings {
            let join = groups.last().is_some_and(|g| {
                let n = g.len() as f64;
                let c = GeoPoint {
                    lon: g.iter().map(|q| q.loc.lon).sum::<f64>() / n,
                    lat: g.iter().map(|q| q.loc.lat).sum::<f64>() / n,
                };
                (ping.ts - g.last().unwrap().ts).num_seconds() <= p.max_gap_s
                    && geo::ground_distance(ping.loc, c) <= p.radius_m
            });
            if join {
                groups.last_mut().unwrap().push(*ping);
            } else {
                groups.push(vec![*ping]);
            }
        }
        groups
            .into_iter()
            .map(|g| (g[0].ts, g.last().unwrap().ts))
            .filter(|(a, b)| (*b - *a).num_seconds() >= p.min_dwell_s)
            .collect()
    }

    #[test]
    fn single_place_half_hour() {
        let pings: Vec<Ping> = (0..7).map(|i| ping(i * 5, -95.4, 29.7)).collect();
        let stops = detect_stops("d", &pings, StopParams::default());
        assert_eq!(stops.len(), 1);
        assert_eq!(stops[0].dwell_s, 1800);
        assert!((stops[0].loc.lon + 95.4).abs() < 1e-12 && (stops[0].loc.lat - 29.7).abs() < 1e-12);
    }

    #[test]
    fn gap_splits_clusters() {
        // Pings 0..=3 at 10-min spacing, then a 2 h gap, then three more.
        let mut pings: Vec<Ping> = (0..4).map(|i| ping(i * 10, -95.4, 29.7)).collect();
        pings.extend((0..3).map(|i| ping(30 + 120 + i * 2, -95.4, 29.7)));
        let params = StopParams { radius_m: 100.0, max_gap_s: 1800, min_dwell_s: 300 };
        let stops = detect_stops("d", &pings, params);
        let expected = oracle_stops(&pings, params);
        assert_eq!(expected.len(), 1, "second cluster dwells only 4 min");
        assert_eq!(stops.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(), expected);
        assert_eq!(stops[0].dwell_s, 1800);
        let params = StopParams { min_dwell_s: 240, ..params };
        let stops = detect_stops("d", &pings, params);
        assert_eq!(stops.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(), oracle_stops(&pings, params));
        assert_eq!(stops.len(), 2);
    }

    #[test]
    fn scattered_pings_make_no_stop() {
        let step = 500.0 / geo::METERS_PER_DEGREE;
        let pings: Vec<Ping> = (0..10).map(|i| ping(i * 5, -95.4, 29.0 + i as f64 * step)).collect();
        let params = StopParams { radius_m: 100.0, max_gap_s: 1800, min_dwell_s: 300 };
        assert!(detect_stops("d", &pings, params).is_empty());
    }

    #[test]
    fn empty_input() {
        assert!(detect_stops("d", &[], StopParams::default()).is_empty());
    }

    fn cbg(geoid: &str, x0: f64) -> CbgRecord {
        CbgRecord {
            geoid: geoid.into(),
            tract_geoid: geoid[..11].into(),
            boundary: GeoPolygon::rectangle(x0, 0.0, x0 + 1.0, 1.0).unwrap(),
            median_income: None,
        }
    }

    fn stop_at(lon: f64, lat: f64) -> Stop {
        Stop {
            device_id: "d".into(),
            loc: GeoPoint::new(lon, lat).unwrap(),
            start: t0(),
            end: t0() + Duration::hours(1),
            dwell_s: 3600,
            cbg_geoid: None,
        }
    }

    #[test]
    fn cbg_assignment() {
        // Deliberately unsorted so the tie-break cannot rely on input order.
        let cbgs = vec![cbg("482010001002", 1.0), cbg("482010001001", 0.0)];
        let locator = CbgLocator::new(&cbgs);
        let mut stops = vec![stop_at(0.5, 0.5), stop_at(-5.0, 0.5), stop_at(1.0, 0.5), stop_at(1.5, 0.5)];
        assign_stop_cbgs(&mut stops, &locator);
        let got: Vec<Option<&str>> = stops.iter().map(|s| s.cbg_geoid.as_deref()).collect();
        assert_eq!(got, vec![Some("482010001001"), None, Some("482010001001"), Some("482010001002")]);
    }

    fn dwell(cbg: &str, start_h: i64, hours: i64) -> Stop {
        Stop {
            device_id: "d".into(),
            loc: GeoPoint::new(0.0, 0.0).unwrap(),
            start: t0() + Duration::hours(start_h),
            end: t0() + Duration::hours(start_h + hours),
            dwell_s: hours * 3600,
            cbg_geoid: Some(cbg.into()),
        }
    }

    fn wide_window() -> TimeWindow {
        TimeWindow { start: t0(), end: t0() + Duration::days(30) }
    }

    #[test]
    fn home_requires_more_than_a_day() {
        let stops = vec![dwell("A", 0, 10), dwell("B", 10, 2), dwell("A", 24, 10), dwell("A", 48, 5)];
        let h = infer_home("d", &stops, wide_window());
        assert_eq!(h.home_cbg.as_deref(), Some("A"));
        assert_eq!(h.total_dwell_by_cbg["A"], 25 * 3600);

        let stops = vec![dwell("A", 0, 10), dwell("A", 24, 10), dwell("B", 48, 20)];
        assert_eq!(infer_home("d", &stops, wide_window()).home_cbg, None);

        // Exactly one day is not more than one day.
        let stops = vec![dwell("A", 0, 12), dwell("A", 24, 12)];
        assert_eq!(infer_home("d", &stops, wide_window()).home_cbg, None);
    }

    #[test]
    fn home_tie_goes_to_smaller_geoid() {
        let stops = vec![dwell("B", 0, 15), dwell("A", 15, 15), dwell("B", 30, 15), dwell("A", 45, 15)];
        assert_eq!(infer_home("d", &stops, wide_window()).home_cbg.as_deref(), Some("A"));
        let mut rev = stops.clone();
        rev.reverse();
        assert_eq!(infer_home("d", &rev, wide_window()).home_cbg.as_deref(), Some("A"));
    }

    #[test]
    fn home_dwell_clipped_to_window() {
        let stops = vec![dwell("A", 0, 30)];
        let w = TimeWindow { start: t0() + Duration::hours(10), end: t0() + Duration::days(5) };
        let h = infer_home("d", &stops, w);
        assert_eq!(h.total_dwell_by_cbg["A"], 20 * 3600);
        assert_eq!(h.home_cbg, None);
    }

    #[test]
    fn evacuation_rules() {
        let w = wide_window();
        let home = vec![dwell("H", 0, 10), dwell("H", 24, 10)];
        let f = detect_evacuation("d", &home, Some("H"), w).unwrap();
        assert_eq!((f.evacuated, f.longest_absence_s), (false, 0));

        let away = vec![dwell("H", 0, 10), dwell("N", 12, 30), dwell("H", 44, 10)];
        let f = detect_evacuation("d", &away, Some("H"), w).unwrap();
        assert_eq!((f.evacuated, f.longest_absence_s), (true, 30 * 3600));

        // Two 15 h absences with a home stop between: contiguous reading says
        // no; summing absences would say yes.
        let split = vec![dwell("N", 0, 15), dwell("H", 16, 2), dwell("N", 19, 15)];
        let f = detect_evacuation("d", &split, Some("H"), w).unwrap();
        assert_eq!((f.evacuated, f.longest_absence_s), (false, 15 * 3600));

        // Several away stops in a row form one absence, unassigned stops included.
        let mut multi = vec![dwell("N", 0, 10), dwell("M", 12, 5), dwell("N", 20, 8)];
        multi[1].cbg_geoid = None;
        let f = detect_evacuation("d", &multi, Some("H"), w).unwrap();
        assert_eq!(f.longest_absence_s, 28 * 3600);
        assert!(f.evacuated);

        assert!(matches!(detect_evacuation("d", &away, None, w), Err(Error::NoHome(_))));
    }

    #[test]
    fn evacuation_clipped_to_window() {
        let stops = vec![dwell("N", 0, 48)];
        let w = TimeWindow { start: t0() + Duration::hours(30), end: t0() + Duration::days(5) };
        let f = detect_evacuation("d", &stops, Some("H"), w).unwrap();
        assert_eq!(f.longest_absence_s, 18 * 3600);
        assert!(!f.evacuated);
    }
}
