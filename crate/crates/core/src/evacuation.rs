//! Tract evacuation rates, their change from baseline, the median-split
//! quadrant classification against preparedness extent, and hotspots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;

use crate::error::{Error, Result};
use crate::metrics::PreparednessRecord;
use crate::stats;
use crate::visits::PoiCategory;

pub fn tract_of(cbg_geoid: &str) -> &str {
    &cbg_geoid[..cbg_geoid.len().min(11)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvacRate {
    pub tract: String,
    pub evacuated: u64,
    pub total: u64,
    pub rate: f64,
}

/// Rates per tract from `(home_cbg, evacuated)` pairs of the devices observed
/// in one window. Tracts without devices do not appear.
pub fn evac_rates<'a>(devices: impl IntoIterator<Item = (&'a str, bool)>) -> Vec<EvacRate> {
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (home, evacuated) in devices {
        let c = counts.entry(tract_of(home)).or_default();
        c.1 += 1;
        if evacuated {
            c.0 += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(_, (_, total))| total > 0)
        .map(|(tract, (evacuated, total))| EvacRate {
            tract: tract.to_string(),
            evacuated,
            total,
            rate: evacuated as f64 / total as f64,
        })
        .collect()
}

/// Relative change of the preparation-period rate over the baseline rate;
/// `None` when the baseline rate is zero.
pub fn evac_change(prep_rate: f64, base_rate: f64) -> Option<f64> {
    (base_rate > 0.0).then(|| (prep_rate - base_rate) / base_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TractEvacuation {
    pub tract: String,
    pub base: Option<EvacRate>,
    pub prep: Option<EvacRate>,
    pub change: Option<f64>,
}

/// Joins baseline and preparation rates by tract.
pub fn tract_evacuation(base: &[EvacRate], prep: &[EvacRate]) -> Vec<TractEvacuation> {
    let mut by_tract: BTreeMap<&str, (Option<&EvacRate>, Option<&EvacRate>)> = BTreeMap::new();
    for r in base {
        by_tract.entry(&r.tract).or_default().0 = Some(r);
    }
    for r in prep {
        by_tract.entry(&r.tract).or_default().1 = Some(r);
    }
    let rows: Vec<TractEvacuation> = by_tract
        .into_iter()
        .map(|(tract, (b, p))| TractEvacuation {
            tract: tract.to_string(),
            change: match (b, p) {
                (Some(b), Some(p)) => evac_change(p.rate, b.rate),
                _ => None,
            },
            base: b.cloned(),
            prep: p.cloned(),
        })
        .collect();
    let excluded = rows.iter().filter(|r| r.change.is_none()).count();
    if excluded > 0 {
        warn!("{excluded} tracts lack a usable evacuation baseline and are excluded from quadrants");
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Low,
    High,
}

impl Level {
    /// At or below the median is Low.
    pub fn split(value: f64, median: f64) -> Level {
        if value <= median {
            Level::Low
        } else {
            Level::High
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quadrant {
    pub evac: Level,
    pub prep: Level,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant { evac: Level::Low, prep: Level::Low },
        Quadrant { evac: Level::Low, prep: Level::High },
        Quadrant { evac: Level::High, prep: Level::Low },
        Quadrant { evac: Level::High, prep: Level::High },
    ];

    pub fn is_hotspot_cell(self) -> bool {
        self.evac == Level::Low && self.prep == Level::Low
    }

    pub fn from_key(s: &str) -> Option<Quadrant> {
        Quadrant::ALL.into_iter().find(|q| q.to_string() == s)
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_evac_{}_prep", self.evac.key(), self.prep.key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantAssignment {
    pub cbg: String,
    pub category: PoiCategory,
    pub evac_change: f64,
    pub extent: f64,
    pub quadrant: Quadrant,
}

/// Median split on both axes. CBGs inherit their tract's evacuation change;
/// a CBG enters the analysis when its tract has a change and it has at least
/// one preparedness record. The evacuation median is taken once over all
/// entering CBGs, the extent median per category.
pub fn classify_quadrants(
    evac_changes: &BTreeMap<String, f64>,
    records: &[PreparednessRecord],
) -> Result<Vec<QuadrantAssignment>> {
    let entering: BTreeMap<&str, f64> = records
        .iter()
        .filter_map(|r| evac_changes.get(tract_of(&r.cbg)).map(|&c| (r.cbg.as_str(), c)))
        .collect();
    if entering.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} CBGs have both an evacuation change and a preparedness record",
            entering.len()
        )));
    }
    let evac_values: Vec<f64> = entering.values().copied().collect();
    let evac_median = stats::median(&evac_values)?;

    let mut out = Vec::new();
    for cat in PoiCategory::ALL {
        let mut rows: Vec<&PreparednessRecord> =
            records.iter().filter(|r| r.category == cat && entering.contains_key(r.cbg.as_str())).collect();
        if rows.is_empty() {
            continue;
        }
        rows.sort_by(|a, b| a.cbg.cmp(&b.cbg));
        let extents: Vec<f64> = rows.iter().map(|r| r.extent).collect();
        let prep_median = stats::median(&extents)?;
        for r in rows {
            let evac_change = entering[r.cbg.as_str()];
            out.push(QuadrantAssignment {
                cbg: r.cbg.clone(),
                category: cat,
                evac_change,
                extent: r.extent,
                quadrant: Quadrant {
                    evac: Level::split(evac_change, evac_median),
                    prep: Level::split(r.extent, prep_median),
                },
            });
        }
    }
    Ok(out)
}

/// CBGs that are low/low in every one of the four categories. A CBG missing
/// from any category is not a hotspot.
pub fn hotspots(assignments: &[QuadrantAssignment]) -> BTreeSet<String> {
    let mut per_cat: BTreeMap<PoiCategory, BTreeSet<&str>> =
        PoiCategory::ALL.into_iter().map(|c| (c, BTreeSet::new())).collect();
    for a in assignments.iter().filter(|a| a.quadrant.is_hotspot_cell()) {
        per_cat.get_mut(&a.category).expect("all categories present").insert(&a.cbg);
    }
    let mut sets = per_cat.into_values();
    let first = sets.next().unwrap_or_default();
    sets.fold(first, |acc, s| acc.intersection(&s).copied().collect())
        .into_iter()
        .map(String::from)
        .collect()
}
