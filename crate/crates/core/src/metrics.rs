//! Weekday baselines, percentage change of visits against them, and the
//! extent / proactivity preparedness metrics derived from the change series.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{Datelike, NaiveDate};
use log::warn;

use crate::config::DateWindow;
use crate::error::{Error, Result};
use crate::ingest::CbgRecord;
use crate::stats;
use crate::visits::{DailyVisitCount, PoiCategory};

/// Expected daily visits per weekday, Monday first. `None` marks a weekday
/// with no representative baseline day.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineProfile {
    pub cbg: String,
    pub category: PoiCategory,
    pub weekday_baseline: [Option<f64>; 7],
}

impl BaselineProfile {
    pub fn for_date(&self, d: NaiveDate) -> Option<f64> {
        self.weekday_baseline[d.weekday().num_days_from_monday() as usize]
    }
}

/// Per weekday, the mean of that weekday's daily counts inside `window`,
/// ignoring days with fewer than `min_daily_visits` visits.
pub fn build_baseline(
    daily: &[DailyVisitCount],
    window: DateWindow,
    min_daily_visits: u32,
) -> BTreeMap<(String, PoiCategory), BaselineProfile> {
    let mut sums: BTreeMap<(String, PoiCategory), [(u64, u32); 7]> = BTreeMap::new();
    for row in daily.iter().filter(|r| window.contains(r.date)) {
        let slot = sums.entry((row.cbg.clone(), row.category)).or_insert([(0, 0); 7]);
        if row.visits >= u64::from(min_daily_visits) {
            let wd = row.date.weekday().num_days_from_monday() as usize;
            slot[wd].0 += row.visits;
            slot[wd].1 += 1;
        }
    }
    sums.into_iter()
        .map(|((cbg, category), slots)| {
            let weekday_baseline = slots.map(|(sum, n)| (n > 0).then(|| sum as f64 / f64::from(n)));
            ((cbg.clone(), category), BaselineProfile { cbg, category, weekday_baseline })
        })
        .collect()
}

/// `(visits - baseline) / baseline`.
pub fn percentage_change(visits: u64, baseline: f64) -> f64 {
    (visits as f64 - baseline) / baseline
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitChangeSeries {
    pub cbg: String,
    pub category: PoiCategory,
    pub changes: BTreeMap<NaiveDate, f64>,
}

/// Percentage-change series over `prep` for every (cbg, category) with a
/// baseline profile. Days whose weekday has no baseline are left out.
pub fn change_series(
    daily: &[DailyVisitCount],
    baselines: &BTreeMap<(String, PoiCategory), BaselineProfile>,
    prep: DateWindow,
) -> Vec<VisitChangeSeries> {
    let mut series: BTreeMap<(String, PoiCategory), BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    for row in daily.iter().filter(|r| prep.contains(r.date)) {
        let key = (row.cbg.clone(), row.category);
        let Some(profile) = baselines.get(&key) else { continue };
        let entry = series.entry(key).or_default();
        if let Some(b) = profile.for_date(row.date) {
            entry.insert(row.date, percentage_change(row.visits, b));
        }
    }
    series
        .into_iter()
        .map(|((cbg, category), changes)| VisitChangeSeries { cbg, category, changes })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PrepClass {
    UnderPrepared,
    ModeratelyPrepared,
    HighlyPrepared,
}

impl PrepClass {
    /// Negative extent is under-prepared, above 1 highly prepared, and the
    /// closed interval [0, 1] moderately prepared.
    pub fn from_extent(extent: f64) -> PrepClass {
        if extent < 0.0 {
            PrepClass::UnderPrepared
        } else if extent <= 1.0 {
            PrepClass::ModeratelyPrepared
        } else {
            PrepClass::HighlyPrepared
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            PrepClass::UnderPrepared => "under_prepared",
            PrepClass::ModeratelyPrepared => "moderately_prepared",
            PrepClass::HighlyPrepared => "highly_prepared",
        }
    }

    pub fn from_key(s: &str) -> Option<PrepClass> {
        [PrepClass::UnderPrepared, PrepClass::ModeratelyPrepared, PrepClass::HighlyPrepared]
            .into_iter()
            .find(|c| c.key() == s)
    }
}

impl fmt::Display for PrepClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparednessRecord {
    pub cbg: String,
    pub category: PoiCategory,
    pub extent: f64,
    pub peak_date: NaiveDate,
    pub proactivity: i64,
    pub class: PrepClass,
}

/// Extent is the largest change; the peak is the earliest date reaching it;
/// proactivity counts whole days from the peak to landfall. Returns `None`
/// when the series has no defined day.
pub fn preparedness_metrics(series: &VisitChangeSeries, landfall: NaiveDate) -> Option<PreparednessRecord> {
    let mut best: Option<(NaiveDate, f64)> = None;
    // Ascending date order: strict `>` keeps the earliest date on ties.
    for (&d, &v) in &series.changes {
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((d, v));
        }
    }
    let (peak_date, extent) = best?;
    Some(PreparednessRecord {
        cbg: series.cbg.clone(),
        category: series.category,
        extent,
        peak_date,
        proactivity: (landfall - peak_date).num_days(),
        class: PrepClass::from_extent(extent),
    })
}

/// Baselines, change series and preparedness records in one call.
pub fn compute_preparedness(
    daily: &[DailyVisitCount],
    baseline_window: DateWindow,
    prep: DateWindow,
    landfall: NaiveDate,
    min_daily_visits: u32,
) -> Vec<PreparednessRecord> {
    let baselines = build_baseline(daily, baseline_window, min_daily_visits);
    change_series(daily, &baselines, prep)
        .iter()
        .filter_map(|s| preparedness_metrics(s, landfall))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtentSummary {
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
}

impl ExtentSummary {
    pub fn of(values: &[f64]) -> Option<ExtentSummary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(ExtentSummary {
            count: v.len(),
            q1: stats::quantile_sorted(&v, 0.25),
            median: stats::quantile_sorted(&v, 0.5),
            q3: stats::quantile_sorted(&v, 0.75),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncomeGroup {
    pub index: usize,
    pub cbgs: Vec<String>,
    pub income_min: Option<f64>,
    pub income_max: Option<f64>,
    pub extents: BTreeMap<PoiCategory, Option<ExtentSummary>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncomeStrata {
    pub groups: Vec<IncomeGroup>,
    /// Some group ended up empty because of tied incomes.
    pub degenerate: bool,
}

/// Splits CBGs that have both an income and at least one preparedness record
/// into `n_groups` quantile bins of income, then summarizes extents per bin
/// and category. A CBG lands in the bin equal to the number of cut points
/// strictly below its income, so tied incomes always share a bin.
pub fn stratify_by_income(records: &[PreparednessRecord], cbgs: &[CbgRecord], n_groups: usize) -> Result<IncomeStrata> {
    if n_groups < 2 {
        return Err(Error::Config("income stratification needs at least 2 groups".into()));
    }
    let with_records: BTreeSet<&str> = records.iter().map(|r| r.cbg.as_str()).collect();
    let incomes: BTreeMap<&str, f64> = cbgs
        .iter()
        .filter(|c| with_records.contains(c.geoid.as_str()))
        .filter_map(|c| c.median_income.map(|i| (c.geoid.as_str(), i)))
        .collect();
    if incomes.len() < n_groups {
        return Err(Error::InsufficientData(format!(
            "{} CBGs with income for {n_groups} income groups",
            incomes.len()
        )));
    }
    let mut sorted: Vec<f64> = incomes.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..n_groups).map(|k| stats::quantile_sorted(&sorted, k as f64 / n_groups as f64)).collect();

    let mut members: Vec<Vec<&str>> = vec![Vec::new(); n_groups];
    for (&geoid, &income) in &incomes {
        let bin = cuts.iter().filter(|&&c| c < income).count();
        members[bin].push(geoid);
    }

    let mut groups = Vec::with_capacity(n_groups);
    for (index, cbg_ids) in members.into_iter().enumerate() {
        let set: BTreeSet<&str> = cbg_ids.iter().copied().collect();
        let mut extents = BTreeMap::new();
        for cat in PoiCategory::ALL {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.category == cat && set.contains(r.cbg.as_str()))
                .map(|r| r.extent)
                .collect();
            extents.insert(cat, ExtentSummary::of(&values));
        }
        let bin_incomes: Vec<f64> = cbg_ids.iter().map(|g| incomes[g]).collect();
        groups.push(IncomeGroup {
            index,
            income_min: bin_incomes.iter().copied().reduce(f64::min),
            income_max: bin_incomes.iter().copied().reduce(f64::max),
            cbgs: cbg_ids.into_iter().map(String::from).collect(),
            extents,
        });
    }
    let degenerate = groups.iter().any(|g| g.cbgs.is_empty());
    if degenerate {
        warn!("income stratification: some income groups are empty (tied incomes)");
    }
    Ok(IncomeStrata { groups, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPolygon;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2017, 8, day).unwrap()
    }

    fn row(cbg: &str, day: u32, visits: u64) -> DailyVisitCount {
        DailyVisitCount { cbg: cbg.into(), category: PoiCategory::Grocery, date: d(day), visits }
    }

    fn baseline_window() -> DateWindow {
        DateWindow { start: d(1), end: d(14) }
    }

    fn tuesday(profile: &BaselineProfile) -> Option<f64> {
        // 2017-08-01 was a Tuesday.
        assert_eq!(d(1).weekday(), chrono::Weekday::Tue);
        profile.for_date(d(1))
    }

    #[test]
    fn weekday_baseline_mean_and_threshold() {
        let b = build_baseline(&[row("A", 1, 10), row("A", 8, 14)], baseline_window(), 5);
        assert_eq!(tuesday(&b[&("A".to_string(), PoiCategory::Grocery)]), Some(12.0));
        let b = build_baseline(&[row("A", 1, 10), row("A", 8, 3)], baseline_window(), 5);
        assert_eq!(tuesday(&b[&("A".to_string(), PoiCategory::Grocery)]), Some(10.0));
        let b = build_baseline(&[row("A", 1, 4), row("A", 8, 3)], baseline_window(), 5);
        assert_eq!(tuesday(&b[&("A".to_string(), PoiCategory::Grocery)]), None);
        // Days outside the window never contribute.
        let b = build_baseline(&[row("A", 1, 10), row("A", 15, 100)], baseline_window(), 5);
        assert_eq!(tuesday(&b[&("A".to_string(), PoiCategory::Grocery)]), Some(10.0));
    }

    #[test]
    fn percentage_change_examples() {
        assert_eq!(percentage_change(15, 10.0), 0.5);
        assert_eq!(percentage_change(10, 10.0), 0.0);
        assert_eq!(percentage_change(4, 8.0), -0.5);
        assert_eq!(percentage_change(0, 5.0), -1.0);
    }

    fn series(values: &[(u32, f64)]) -> VisitChangeSeries {
        VisitChangeSeries {
            cbg: "A".into(),
            category: PoiCategory::Grocery,
            changes: values.iter().map(|&(day, v)| (d(day), v)).collect(),
        }
    }

    #[test]
    fn preparedness_examples() {
        let s = series(&[(20, -0.2), (21, 0.1), (22, 0.6), (23, 0.3), (24, -0.1), (25, 0.2)]);
        let r = preparedness_metrics(&s, d(25)).unwrap();
        assert_eq!((r.extent, r.peak_date, r.proactivity, r.class), (0.6, d(22), 3, PrepClass::ModeratelyPrepared));

        let s = series(&[(20, -0.3), (21, -0.05), (22, -0.6)]);
        assert_eq!(preparedness_metrics(&s, d(25)).unwrap().class, PrepClass::UnderPrepared);

        let s = series(&[(20, 0.2), (21, 1.2), (22, 0.6), (23, 0.3), (24, 1.2), (25, 0.2)]);
        let r = preparedness_metrics(&s, d(25)).unwrap();
        assert_eq!((r.peak_date, r.proactivity, r.class), (d(21), 4, PrepClass::HighlyPrepared));

        let s = series(&[(20, 0.2), (25, 0.9)]);
        assert_eq!(preparedness_metrics(&s, d(25)).unwrap().proactivity, 0);

        assert!(preparedness_metrics(&series(&[]), d(25)).is_none());
    }

    #[test]
    fn class_boundaries() {
        let got: Vec<PrepClass> = [-0.01, 0.0, 0.99, 1.0, 1.01].into_iter().map(PrepClass::from_extent).collect();
        use PrepClass::*;
        assert_eq!(got, vec![UnderPrepared, ModeratelyPrepared, ModeratelyPrepared, ModeratelyPrepared, HighlyPrepared]);
    }

    #[test]
    fn skipped_cells_are_not_zero_filled() {
        // Baseline only on Tuesdays; Aug 22 is the only Tuesday in prep.
        let mut daily = vec![row("A", 1, 10), row("A", 8, 10)];
        daily.extend((20..=25).map(|day| row("A", day, 3)));
        let recs = compute_preparedness(&daily, baseline_window(), DateWindow { start: d(20), end: d(25) }, d(25), 5);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].peak_date, d(22));
        assert_eq!(recs[0].extent, -0.7);
    }

    #[test]
    fn all_cells_skipped_yields_no_record() {
        let mut daily = vec![row("A", 1, 2), row("A", 8, 2)];
        daily.extend((20..=25).map(|day| row("A", day, 30)));
        let recs = compute_preparedness(&daily, baseline_window(), DateWindow { start: d(20), end: d(25) }, d(25), 5);
        assert!(recs.is_empty());
    }

    fn cbg_with_income(i: usize, income: Option<f64>) -> CbgRecord {
        CbgRecord {
            geoid: format!("4820100010{i:02}"),
            tract_geoid: "48201000100".into(),
            boundary: GeoPolygon::rectangle(0.0, 0.0, 1.0, 1.0).unwrap(),
            median_income: income,
        }
    }

    fn record(cbg: &str, extent: f64) -> PreparednessRecord {
        PreparednessRecord {
            cbg: cbg.into(),
            category: PoiCategory::Grocery,
            extent,
            peak_date: d(22),
            proactivity: 3,
            class: PrepClass::from_extent(extent),
        }
    }

    #[test]
    fn income_terciles_balanced() {
        let cbgs: Vec<CbgRecord> = (1..=9).map(|i| cbg_with_income(i, Some(i as f64 * 10_000.0))).collect();
        let recs: Vec<PreparednessRecord> = cbgs.iter().map(|c| record(&c.geoid, 0.5)).collect();
        let strata = stratify_by_income(&recs, &cbgs, 3).unwrap();
        let sizes: Vec<usize> = strata.groups.iter().map(|g| g.cbgs.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3]);
        assert!(!strata.degenerate);
        assert_eq!(strata.groups[0].income_max, Some(30_000.0));
        let s = strata.groups[1].extents[&PoiCategory::Grocery].unwrap();
        assert_eq!((s.count, s.median, s.mean), (3, 0.5, 0.5));
        assert_eq!(strata.groups[1].extents[&PoiCategory::Pharmacy], None);

        let cbgs: Vec<CbgRecord> = (1..=10).map(|i| cbg_with_income(i, Some(i as f64 * 10_000.0))).collect();
        let recs: Vec<PreparednessRecord> = cbgs.iter().map(|c| record(&c.geoid, 0.5)).collect();
        let sizes: Vec<usize> = stratify_by_income(&recs, &cbgs, 3).unwrap().groups.iter().map(|g| g.cbgs.len()).collect();
        assert!(sizes.iter().all(|&s| (3..=4).contains(&s)), "{sizes:?}");
    }

    #[test]
    fn equal_incomes_share_one_bin() {
        let cbgs: Vec<CbgRecord> = (1..=6).map(|i| cbg_with_income(i, Some(50_000.0))).collect();
        let recs: Vec<PreparednessRecord> = cbgs.iter().map(|c| record(&c.geoid, 0.5)).collect();
        let strata = stratify_by_income(&recs, &cbgs, 3).unwrap();
        let sizes: Vec<usize> = strata.groups.iter().map(|g| g.cbgs.len()).collect();
        assert_eq!(sizes, vec![6, 0, 0]);
        assert!(strata.degenerate);
    }

    #[test]
    fn income_less_cbgs_excluded() {
        let mut cbgs: Vec<CbgRecord> = (1..=3).map(|i| cbg_with_income(i, Some(i as f64 * 10_000.0))).collect();
        cbgs.push(cbg_with_income(4, None));
        let recs: Vec<PreparednessRecord> = cbgs.iter().map(|c| record(&c.geoid, 0.5)).collect();
        let strata = stratify_by_income(&recs, &cbgs, 3).unwrap();
        assert_eq!(strata.groups.iter().map(|g| g.cbgs.len()).sum::<usize>(), 3);
        assert!(matches!(stratify_by_income(&recs[..2], &cbgs, 3), Err(Error::InsufficientData(_))));
    }
}
