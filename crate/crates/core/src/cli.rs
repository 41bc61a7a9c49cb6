//! Command-line front end: argument parsing and stage orchestration.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::artifacts::{self, Written};
use crate::config::{ParseMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::ingest::{self, CbgSet, PoiRegistry};
use crate::manifest::{self, Manifest};
use crate::pipeline::{self, DeviceAnalyzer, DeviceOutcome};
use crate::synth::{Scenario, ScenarioConfig};
use crate::trajectory::Stop;
use crate::visits::{self, PoiIndex, VisitTable};

#[derive(Debug, Parser)]
#[command(name = "prepsignal", version, about = "Hurricane preparedness and evacuation signals from location traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Pipeline config (scenario config for `synth`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory; stages also read earlier artifacts from here.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Skip malformed input rows instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Scenario seed override (synth only).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario with ground truth.
    Synth,
    /// Stops and home CBG assignments.
    Homes,
    /// Home CBG to POI daily visit table.
    Visits,
    /// Preparedness extent and proactivity per CBG and category.
    Metrics,
    /// Evacuation rates per tract.
    Evac,
    /// Evacuation/preparedness quadrants, hotspots and income strata.
    Classify,
    /// Extent vs proactivity rank correlation per category.
    Correlate,
    /// Every stage in one pass.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Homes => "homes",
            Command::Visits => "visits",
            Command::Metrics => "metrics",
            Command::Evac => "evac",
            Command::Classify => "classify",
            Command::Correlate => "correlate",
            Command::All => "all",
        }
    }
}

/// Exit status for an error: 1 for validation problems, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = cli.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    if cli.command == Command::Synth {
        return run_synth(cli, config);
    }
    let mut cfg = PipelineConfig::from_file(config)?;
    if cli.lenient {
        cfg.parse_mode = ParseMode::Lenient;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let mut run = Run { manifest: Manifest::new(cli.command.name(), &cfg.digest), cfg, out: cli.out.clone() };
    let workers = run.cfg.workers;
    pipeline::with_workers(workers, || run.stage(cli.command))??;
    run.manifest.write(&run.out)
}

fn run_synth(cli: &Cli, config: &Path) -> Result<()> {
    let mut scenario_cfg = ScenarioConfig::from_file(config)?;
    if let Some(seed) = cli.seed {
        scenario_cfg.seed = seed;
    }
    let digest = manifest::file_sha256(config)?;
    let mut m = Manifest::new("synth", &digest);
    let workers = cli.workers.unwrap_or(0);
    let (scenario, rows) = pipeline::with_workers(workers, || -> Result<_> {
        let scenario = Scenario::generate(&scenario_cfg)?;
        let rows = scenario.write_files(&cli.out)?;
        Ok((scenario, rows))
    })??;
    m.count("seed", scenario_cfg.seed);
    m.count("agents", scenario.agents.len() as u64);
    m.count("cbgs", scenario.cbgs.len() as u64);
    m.count("pois", scenario.pois.len() as u64);
    m.count("pings", rows);
    for name in ["pings.csv", "pois.csv", "footprints.geojson", "cbgs.geojson", "income.csv", "ground_truth.json", "pipeline.toml"] {
        let path = cli.out.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        m.output(name, &bytes, None);
    }
    m.write(&cli.out)
}

/// `(device_id, home_cbg, stops)` rebuilt from stage artifacts.
type StagedDevice = (String, Option<String>, Vec<Stop>);

struct Run {
    cfg: PipelineConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn stage(&mut self, command: Command) -> Result<()> {
        match command {
            Command::Synth => unreachable!("handled before config parsing"),
            Command::Homes => self.homes(),
            Command::Visits => self.visits(),
            Command::Metrics => self.metrics(),
            Command::Evac => self.evac(),
            Command::Classify => self.classify(),
            Command::Correlate => self.correlate(),
            Command::All => self.all(),
        }
    }

    fn input(&mut self, key: &str) -> Result<PathBuf> {
        let path = self.cfg.require(key)?.to_path_buf();
        self.manifest.input(&path)?;
        Ok(path)
    }

    /// An optional input: absent from the config or missing on disk yields
    /// `None` and a warning.
    fn optional_input(&mut self, key: &str) -> Result<Option<PathBuf>> {
        match self.cfg.require(key) {
            Ok(p) if p.exists() => {
                let p = p.to_path_buf();
                self.manifest.input(&p)?;
                Ok(Some(p))
            }
            Ok(p) => {
                self.manifest.warn(format!("{key} file {} not found", p.display()));
                Ok(None)
            }
            Err(_) => Ok(None),
        }
    }

    /// An artifact written by an earlier stage into the output directory.
    fn artifact(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        if !path.exists() {
            return Err(Error::Config(format!(
                "{} not found; run the stage that produces it first",
                path.display()
            )));
        }
        self.manifest.input(&path)?;
        Ok(path)
    }

    fn emit(&mut self, name: &str, w: Written) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, &w.bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.output(name, &w.bytes, Some(w.rows));
        Ok(())
    }

    fn load_cbgs(&mut self, with_income: bool) -> Result<CbgSet> {
        let boundaries = self.input("cbgs")?;
        let income = if with_income { self.optional_input("income")? } else { None };
        let set = ingest::load_cbgs(&boundaries, income.as_deref(), self.cfg.parse_mode)?;
        self.manifest.count("cbgs", set.records.len() as u64);
        self.manifest.count("cbgs_skipped_malformed", set.skipped_malformed);
        if with_income {
            self.manifest.count("income_rows_without_boundary", set.income_rows_without_boundary as u64);
        }
        Ok(set)
    }

    fn load_pois(&mut self) -> Result<PoiRegistry> {
        let pois = self.input("pois")?;
        let footprints = self.optional_input("footprints")?;
        let reg = ingest::build_poi_registry(
            &pois,
            footprints.as_deref(),
            self.cfg.thresholds.poi_match_radius_m,
            self.cfg.parse_mode,
        )?;
        self.manifest.count("pois", reg.pois.len() as u64);
        self.manifest.count("pois_skipped_malformed", reg.skipped_malformed);
        self.manifest.count("footprints", reg.footprints_read as u64);
        self.manifest.count("footprints_linked", reg.linked as u64);
        Ok(reg)
    }

    fn load_traces(&mut self) -> Result<Vec<ingest::DeviceTrace>> {
        let path = self.input("pings")?;
        let window = self.cfg.study().instants(self.cfg.time_zone);
        let load = ingest::load_pings(&path, window, self.cfg.parse_mode)?;
        self.manifest.count("ping_rows_read", load.rows_read);
        self.manifest.count("pings_outside_window", load.dropped_outside_window);
        self.manifest.count("pings_duplicate", load.duplicates);
        self.manifest.count("pings_skipped_malformed", load.skipped_malformed);
        self.manifest.count("pings", load.ping_count() as u64);
        self.manifest.count("devices", load.traces.len() as u64);
        Ok(load.traces)
    }

    fn emit_device_outputs(&mut self, outcomes: &[DeviceOutcome]) -> Result<()> {
        let stops: Vec<&Stop> = outcomes.iter().flat_map(|o| &o.stops).collect();
        self.manifest.count("stops", stops.len() as u64);
        self.manifest.count("homed_devices", outcomes.iter().filter(|o| o.home.home_cbg.is_some()).count() as u64);
        self.emit(artifacts::STOPS, artifacts::stops_csv(stops)?)?;
        self.emit(artifacts::HOMES, artifacts::homes_csv(outcomes.iter().map(|o| &o.home))?)
    }

    fn emit_visits(&mut self, table: VisitTable) -> Result<Vec<visits::VisitRecord>> {
        self.manifest.count("visits_dropped_homeless", table.dropped_homeless);
        let records = table.into_records();
        self.manifest.count("visit_events", records.iter().map(|r| r.count).sum());
        self.emit(artifacts::VISITS, artifacts::visits_csv(&records)?)?;
        Ok(records)
    }

    fn emit_metrics(&mut self, records: &[visits::VisitRecord]) -> Result<Vec<crate::metrics::PreparednessRecord>> {
        let (daily, prep) = pipeline::preparedness(records, &self.cfg);
        self.manifest.count("daily_counts", daily.len() as u64);
        self.emit(artifacts::METRICS, artifacts::metrics_csv(&prep)?)?;
        Ok(prep)
    }

    fn emit_classification(
        &mut self,
        tracts: &[crate::evacuation::TractEvacuation],
        prep: &[crate::metrics::PreparednessRecord],
    ) -> Result<()> {
        let cbgs = self.load_cbgs(true)?;
        let has_income = cbgs.records.iter().any(|c| c.median_income.is_some());
        if !has_income {
            self.manifest.warn("no income data; income stratification skipped");
        }
        let groups = has_income.then_some(self.cfg.thresholds.income_groups);
        let c = pipeline::classify(tracts, prep, &cbgs.records, groups);
        if c.quadrants.is_empty() {
            self.manifest.warn("too few CBGs with evacuation and preparedness data for quadrants");
        }
        self.manifest.count("hotspots", c.hotspots.len() as u64);
        self.emit(artifacts::QUADRANTS, artifacts::quadrants_csv(&c.quadrants)?)?;
        self.emit(
            artifacts::QUADRANTS_GEOJSON,
            artifacts::quadrants_geojson(&cbgs.records, &c.quadrants, &c.hotspots)?,
        )?;
        self.emit(artifacts::HOTSPOTS, artifacts::hotspots_csv(&c.hotspots)?)?;
        if let Some(strata) = &c.strata {
            if strata.degenerate {
                self.manifest.warn("an income group is empty because of tied incomes");
            }
            self.emit(artifacts::INCOME_STRATA, artifacts::income_strata_csv(strata)?)?;
        }
        Ok(())
    }

    fn homes(&mut self) -> Result<()> {
        let cbgs = self.load_cbgs(false)?;
        let traces = self.load_traces()?;
        let analyzer = DeviceAnalyzer::new(&self.cfg, &cbgs.records, None);
        let outcomes = pipeline::analyze_traces(&analyzer, &traces, true);
        self.emit_device_outputs(&outcomes)
    }

    fn staged_devices(&mut self) -> Result<Vec<StagedDevice>> {
        let stops_path = self.artifact(artifacts::STOPS)?;
        let homes_path = self.artifact(artifacts::HOMES)?;
        let mut homes = artifacts::read_homes(&homes_path)?;
        let mut stops: std::collections::BTreeMap<String, Vec<Stop>> =
            artifacts::read_stops(&stops_path)?.into_iter().collect();
        let mut out = Vec::with_capacity(homes.len());
        for (device, home) in std::mem::take(&mut homes) {
            let s = stops.remove(&device).unwrap_or_default();
            out.push((device, home, s));
        }
        if let Some(device) = stops.keys().next() {
            return Err(Error::Config(format!("device {device} has stops but no row in {}", artifacts::HOMES)));
        }
        Ok(out)
    }

    fn visits(&mut self) -> Result<()> {
        let devices = self.staged_devices()?;
        let reg = self.load_pois()?;
        let index = PoiIndex::new(&reg.pois, self.cfg.thresholds.point_poi_radius_m);
        let params = pipeline::visit_params(&self.cfg);
        let (cats, tz) = (&self.cfg.categories, self.cfg.time_zone);
        use rayon::prelude::*;
        let table = devices
            .par_iter()
            .fold(VisitTable::default, |mut table, (device, home, stops)| {
                for e in visits::visit_events(device, stops, &index, cats, params, tz) {
                    table.add(home.as_deref(), &e);
                }
                table
            })
            .reduce(VisitTable::default, VisitTable::merge);
        self.emit_visits(table).map(drop)
    }

    fn metrics(&mut self) -> Result<()> {
        let path = self.artifact(artifacts::VISITS)?;
        let records = artifacts::read_visits(&path, &self.cfg.categories)?;
        self.emit_metrics(&records).map(drop)
    }

    fn evac(&mut self) -> Result<()> {
        let devices = self.staged_devices()?;
        use rayon::prelude::*;
        let flags: Vec<(Option<bool>, Option<bool>)> = devices
            .par_iter()
            .map(|(_, home, stops)| pipeline::evacuation_flags(&self.cfg, stops, home.as_deref()))
            .collect();
        let rows: Vec<(&str, Option<bool>, Option<bool>)> = devices
            .iter()
            .zip(flags)
            .filter_map(|((_, home, _), (b, p))| home.as_deref().map(|h| (h, b, p)))
            .collect();
        let tracts = pipeline::tract_evacuation(rows);
        self.emit(artifacts::EVACUATION, artifacts::evacuation_csv(&tracts)?)
    }

    fn classify(&mut self) -> Result<()> {
        let metrics = self.artifact(artifacts::METRICS)?;
        let evac = self.artifact(artifacts::EVACUATION)?;
        let prep = artifacts::read_metrics(&metrics)?;
        let tracts = artifacts::read_evacuation(&evac)?;
        self.emit_classification(&tracts, &prep)
    }

    fn correlate(&mut self) -> Result<()> {
        let metrics = self.artifact(artifacts::METRICS)?;
        let prep = artifacts::read_metrics(&metrics)?;
        self.emit(artifacts::CORRELATION, artifacts::correlation_csv(&pipeline::correlate(&prep))?)
    }

    fn all(&mut self) -> Result<()> {
        let cbgs = self.load_cbgs(false)?;
        let reg = self.load_pois()?;
        let traces = self.load_traces()?;
        let analyzer = DeviceAnalyzer::new(&self.cfg, &cbgs.records, Some(&reg.pois));
        let outcomes = pipeline::analyze_traces(&analyzer, &traces, true);
        drop(traces);
        self.emit_device_outputs(&outcomes)?;
        let records = self.emit_visits(pipeline::visit_table(&outcomes))?;
        let prep = self.emit_metrics(&records)?;
        let tracts = pipeline::tract_evacuation(pipeline::outcome_flags(&outcomes));
        self.emit(artifacts::EVACUATION, artifacts::evacuation_csv(&tracts)?)?;
        self.emit_classification(&tracts, &prep)?;
        self.emit(artifacts::CORRELATION, artifacts::correlation_csv(&pipeline::correlate(&prep))?)
    }
}
