//! POI visit attribution and the daily home-CBG × category visit table.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::NaiveDate;
use chrono_tz::Tz;

use crate::error::{Error, Result};
use crate::geo::{self, BBox, BBoxIndex};
use crate::ingest::PoiRecord;
use crate::trajectory::Stop;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PoiCategory {
    Grocery,
    Pharmacy,
    GasStation,
    HomeImprovement,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; 4] =
        [PoiCategory::Grocery, PoiCategory::Pharmacy, PoiCategory::GasStation, PoiCategory::HomeImprovement];

    pub fn key(self) -> &'static str {
        match self {
            PoiCategory::Grocery => "grocery",
            PoiCategory::Pharmacy => "pharmacy",
            PoiCategory::GasStation => "gas_station",
            PoiCategory::HomeImprovement => "home_improvement",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        PoiCategory::ALL.into_iter().find(|c| c.key() == key)
    }
}

impl fmt::Display for PoiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// 4-digit NAICS industry-group prefixes per category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMap {
    prefixes: BTreeMap<PoiCategory, Vec<String>>,
    lookup: HashMap<String, PoiCategory>,
}

impl Default for CategoryMap {
    fn default() -> Self {
        let prefixes = [
            (PoiCategory::Grocery, "4451"),
            (PoiCategory::Pharmacy, "4461"),
            (PoiCategory::GasStation, "4471"),
            (PoiCategory::HomeImprovement, "4441"),
        ]
        .into_iter()
        .map(|(c, p)| (c, vec![p.to_string()]))
        .collect();
        CategoryMap::new(prefixes).expect("default prefixes are disjoint")
    }
}

impl CategoryMap {
    pub fn new(prefixes: BTreeMap<PoiCategory, Vec<String>>) -> Result<Self> {
        let mut lookup = HashMap::new();
        for (&cat, codes) in &prefixes {
            for code in codes {
                if code.len() != 4 || !code.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(Error::Config(format!("NAICS prefix {code:?} for {cat} is not 4 digits")));
                }
                if let Some(other) = lookup.insert(code.clone(), cat) {
                    if other != cat {
                        return Err(Error::Config(format!("NAICS prefix {code} assigned to both {other} and {cat}")));
                    }
                }
            }
        }
        Ok(CategoryMap { prefixes, lookup })
    }

    pub fn prefixes(&self, cat: PoiCategory) -> &[String] {
        self.prefixes.get(&cat).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn lookup(&self, naics_code: &str) -> Option<PoiCategory> {
        naics_code.get(..4).and_then(|p| self.lookup.get(p)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisitParams {
    pub min_dwell_s: i64,
    pub point_poi_radius_m: f64,
}

impl Default for VisitParams {
    fn default() -> Self {
        VisitParams { min_dwell_s: 300, point_poi_radius_m: 50.0 }
    }
}

/// Spatial index over a POI registry. Footprint POIs are indexed by their
/// polygon's box, point-only POIs by a box around the buffer radius.
pub struct PoiIndex<'a> {
    pois: &'a [PoiRecord],
    index: BBoxIndex,
    point_radius_m: f64,
}

impl<'a> PoiIndex<'a> {
    pub fn new(pois: &'a [PoiRecord], point_radius_m: f64) -> Self {
        let boxes: Vec<BBox> = pois
            .iter()
            .map(|p| match &p.footprint {
                Some(fp) => fp.bbox(),
                None => BBox::around(p.loc, point_radius_m),
            })
            .collect();
        let cell = (point_radius_m / geo::METERS_PER_DEGREE * 4.0).clamp(1e-4, 1.0);
        PoiIndex { pois, index: BBoxIndex::new(boxes, cell), point_radius_m }
    }

    /// Best POI for a location: footprint containment beats radius match,
    /// then nearer POI point, then smaller place id.
    pub fn best_match(&self, loc: geo::GeoPoint) -> Option<&'a PoiRecord> {
        self.index
            .query_point(loc)
            .into_iter()
            .filter_map(|i| {
                let poi = &self.pois[i];
                let d = geo::ground_distance(loc, poi.loc);
                let rank = match &poi.footprint {
                    Some(fp) if geo::point_in_polygon(loc, fp) => 0u8,
                    Some(_) => return None,
                    None if d <= self.point_radius_m => 1,
                    None => return None,
                };
                Some((rank, d, poi))
            })
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then_with(|| a.2.place_id.cmp(&b.2.place_id)))
            .map(|(_, _, poi)| poi)
    }
}

/// Attributes a stop to a categorized POI, or nothing for stop-bys, stops
/// away from every POI, and POIs outside the four categories.
pub fn attribute_visit<'a>(
    stop: &Stop,
    index: &PoiIndex<'a>,
    categories: &CategoryMap,
    min_dwell_s: i64,
) -> Option<(&'a PoiRecord, PoiCategory)> {
    if stop.dwell_s < min_dwell_s {
        return None;
    }
    let poi = index.best_match(stop.loc)?;
    categories.lookup(&poi.naics_code).map(|c| (poi, c))
}

/// One attributed visit by one device.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct VisitEvent {
    pub device_id: String,
    pub date: NaiveDate,
    pub place_id: String,
    pub naics_code: String,
    pub category: PoiCategory,
}

/// Local calendar date of an instant.
pub fn local_date(t: chrono::DateTime<chrono::Utc>, tz: Tz) -> NaiveDate {
    t.with_timezone(&tz).date_naive()
}

pub fn visit_events(
    device_id: &str,
    stops: &[Stop],
    index: &PoiIndex<'_>,
    categories: &CategoryMap,
    params: VisitParams,
    tz: Tz,
) -> Vec<VisitEvent> {
    stops
        .iter()
        .filter_map(|s| {
            let (poi, category) = attribute_visit(s, index, categories, params.min_dwell_s)?;
            Some(VisitEvent {
                device_id: device_id.to_string(),
                date: local_date(s.start, tz),
                place_id: poi.place_id.clone(),
                naics_code: poi.naics_code.clone(),
                category,
            })
        })
        .collect()
}

/// One row of the home-CBG → POI daily visit table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct VisitRecord {
    pub home_cbg: String,
    pub place_id: String,
    pub date: NaiveDate,
    pub naics_code: String,
    pub category: PoiCategory,
    pub count: u64,
}

/// Partial visit table keyed by `(home_cbg, place_id, date)`. Merging is
/// associative and commutative, so per-worker tables combine to the same
/// result in any order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisitTable {
    rows: BTreeMap<(String, String, NaiveDate), (String, PoiCategory, u64)>,
    pub dropped_homeless: u64,
}

impl VisitTable {
    pub fn add(&mut self, home_cbg: Option<&str>, event: &VisitEvent) {
        let Some(home) = home_cbg else {
            self.dropped_homeless += 1;
            return;
        };
        let entry = self
            .rows
            .entry((home.to_string(), event.place_id.clone(), event.date))
            .or_insert_with(|| (event.naics_code.clone(), event.category, 0));
        entry.2 += 1;
    }

    pub fn merge(mut self, other: VisitTable) -> VisitTable {
        for (k, (naics, cat, n)) in other.rows {
            self.rows.entry(k).or_insert((naics, cat, 0)).2 += n;
        }
        self.dropped_homeless += other.dropped_homeless;
        self
    }

    pub fn into_records(self) -> Vec<VisitRecord> {
        self.rows
            .into_iter()
            .map(|((home_cbg, place_id, date), (naics_code, category, count))| VisitRecord {
                home_cbg,
                place_id,
                date,
                naics_code,
                category,
                count,
            })
            .collect()
    }
}

/// Visits from homed devices in `cbg` to `category` POIs on `date`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct DailyVisitCount {
    pub cbg: String,
    pub category: PoiCategory,
    pub date: NaiveDate,
    pub visits: u64,
}

/// Daily counts for every CBG that appears in `records`, every category, and
/// every date in `dates`, with explicit zeros. Records on other dates are
/// ignored.
pub fn daily_counts(records: &[VisitRecord], dates: &[NaiveDate]) -> Vec<DailyVisitCount> {
    let date_set: BTreeSet<NaiveDate> = dates.iter().copied().collect();
    let cbgs: BTreeSet<&str> = records.iter().map(|r| r.home_cbg.as_str()).collect();
    let mut sums: HashMap<(&str, PoiCategory, NaiveDate), u64> = HashMap::new();
    for r in records.iter().filter(|r| date_set.contains(&r.date)) {
        *sums.entry((r.home_cbg.as_str(), r.category, r.date)).or_default() += r.count;
    }
    let mut out = Vec::with_capacity(cbgs.len() * 4 * date_set.len());
    for cbg in cbgs {
        for category in PoiCategory::ALL {
            for &date in &date_set {
                out.push(DailyVisitCount {
                    cbg: cbg.to_string(),
                    category,
                    date,
                    visits: sums.get(&(cbg, category, date)).copied().unwrap_or(0),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, GeoPolygon};
    use chrono::{Duration, TimeZone, Utc};

    fn poi(id: &str, naics: &str, lon: f64, lat: f64, footprint: bool) -> PoiRecord {
        PoiRecord {
            place_id: id.into(),
            name: id.into(),
            naics_code: naics.into(),
            loc: GeoPoint::new(lon, lat).unwrap(),
            footprint: footprint
                .then(|| GeoPolygon::rectangle(lon - 0.0005, lat - 0.0005, lon + 0.0005, lat + 0.0005).unwrap()),
        }
    }

    fn stop(lon: f64, lat: f64, minutes: i64) -> Stop {
        let start = Utc.with_ymd_and_hms(2017, 8, 21, 15, 0, 0).unwrap();
        Stop {
            device_id: "d".into(),
            loc: GeoPoint::new(lon, lat).unwrap(),
            start,
            end: start + Duration::minutes(minutes),
            dwell_s: minutes * 60,
            cbg_geoid: None,
        }
    }

    #[test]
    fn category_prefixes() {
        let m = CategoryMap::default();
        assert_eq!(m.lookup("445110"), Some(PoiCategory::Grocery));
        assert_eq!(m.lookup("446110"), Some(PoiCategory::Pharmacy));
        assert_eq!(m.lookup("447110"), Some(PoiCategory::GasStation));
        assert_eq!(m.lookup("444110"), Some(PoiCategory::HomeImprovement));
        assert_eq!(m.lookup("722511"), None);
        let mut overlap = BTreeMap::new();
        overlap.insert(PoiCategory::Grocery, vec!["4451".to_string()]);
        overlap.insert(PoiCategory::Pharmacy, vec!["4451".to_string()]);
        assert!(CategoryMap::new(overlap).is_err());
    }

    #[test]
    fn attribution_examples() {
        let cats = CategoryMap::default();
        let grocery = [poi("g", "445110", -95.4, 29.7, true)];
        let idx = PoiIndex::new(&grocery, 50.0);
        let hit = attribute_visit(&stop(-95.4002, 29.7001, 12), &idx, &cats, 300);
        assert_eq!(hit.map(|(p, c)| (p.place_id.as_str(), c)), Some(("g", PoiCategory::Grocery)));
        assert!(attribute_visit(&stop(-95.4002, 29.7001, 2), &idx, &cats, 300).is_none());

        let restaurant = [poi("r", "722511", -95.4, 29.7, true)];
        let idx = PoiIndex::new(&restaurant, 50.0);
        assert!(attribute_visit(&stop(-95.4002, 29.7001, 12), &idx, &cats, 300).is_none());
    }

    #[test]
    fn footprint_beats_radius_then_distance_then_id() {
        let cats = CategoryMap::default();
        // Point POI right at the stop, footprint POI whose polygon contains it.
        let pois = vec![poi("a-point", "446110", -95.4, 29.7, false), poi("b-fp", "445110", -95.4003, 29.7, true)];
        let idx = PoiIndex::new(&pois, 50.0);
        let (p, _) = attribute_visit(&stop(-95.4, 29.7, 10), &idx, &cats, 300).unwrap();
        assert_eq!(p.place_id, "b-fp");

        // Two point POIs: nearer wins.
        let pois = vec![poi("a", "446110", -95.4002, 29.7, false), poi("b", "445110", -95.4001, 29.7, false)];
        let idx = PoiIndex::new(&pois, 50.0);
        assert_eq!(attribute_visit(&stop(-95.4, 29.7, 10), &idx, &cats, 300).unwrap().0.place_id, "b");

        // Equidistant (exactly representable offsets): smaller id wins
        // regardless of registry order.
        let d = 1.0 / 8192.0;
        let mut pois = vec![poi("z", "446110", -95.5 - d, 29.75, false), poi("y", "445110", -95.5 + d, 29.75, false)];
        for _ in 0..2 {
            let idx = PoiIndex::new(&pois, 50.0);
            assert_eq!(attribute_visit(&stop(-95.5, 29.75, 10), &idx, &cats, 300).unwrap().0.place_id, "y");
            pois.reverse();
        }

        // Outside the point buffer.
        let pois = vec![poi("far", "445110", -95.41, 29.7, false)];
        let idx = PoiIndex::new(&pois, 50.0);
        assert!(attribute_visit(&stop(-95.4, 29.7, 10), &idx, &cats, 300).is_none());
    }

    fn event(device: &str, place: &str, cat: PoiCategory, day: u32) -> VisitEvent {
        VisitEvent {
            device_id: device.into(),
            date: NaiveDate::from_ymd_opt(2017, 8, day).unwrap(),
            place_id: place.into(),
            naics_code: "445110".into(),
            category: cat,
        }
    }

    #[test]
    fn aggregation_counts_events() {
        let mut table = VisitTable::default();
        for d in ["d1", "d2", "d3"] {
            table.add(Some("A"), &event(d, "g1", PoiCategory::Grocery, 21));
        }
        for _ in 0..5 {
            table.add(None, &event("nohome", "g1", PoiCategory::Grocery, 21));
        }
        table.add(Some("A"), &event("d1", "gas", PoiCategory::GasStation, 21));
        table.add(Some("A"), &event("d1", "gas", PoiCategory::GasStation, 21));
        assert_eq!(table.dropped_homeless, 5);
        let records = table.into_records();
        let dates: Vec<NaiveDate> = (20..=22).map(|d| NaiveDate::from_ymd_opt(2017, 8, d).unwrap()).collect();
        let daily = daily_counts(&records, &dates);
        assert_eq!(daily.len(), 4 * 3);
        let get = |cat, day| {
            daily
                .iter()
                .find(|r| r.category == cat && r.date == NaiveDate::from_ymd_opt(2017, 8, day).unwrap())
                .unwrap()
                .visits
        };
        assert_eq!(get(PoiCategory::Grocery, 21), 3);
        assert_eq!(get(PoiCategory::GasStation, 21), 2);
        assert_eq!(get(PoiCategory::Grocery, 20), 0);
        assert_eq!(get(PoiCategory::Pharmacy, 22), 0);
    }

    #[test]
    fn merge_is_order_independent() {
        let evs: Vec<(Option<&str>, VisitEvent)> = (0..20)
            .map(|i| {
                let home = if i % 7 == 0 { None } else { Some(if i % 2 == 0 { "A" } else { "B" }) };
                (home, event(&format!("d{i}"), &format!("p{}", i % 3), PoiCategory::Grocery, 20 + (i % 4) as u32))
            })
            .collect();
        let mut whole = VisitTable::default();
        for (h, e) in &evs {
            whole.add(*h, e);
        }
        let (left, right) = evs.split_at(8);
        let mut a = VisitTable::default();
        let mut b = VisitTable::default();
        left.iter().for_each(|(h, e)| a.add(*h, e));
        right.iter().for_each(|(h, e)| b.add(*h, e));
        assert_eq!(b.clone().merge(a.clone()), whole);
        assert_eq!(a.merge(b), whole);
    }
}
