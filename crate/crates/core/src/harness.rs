//! Experiment orchestration: plans, single runs, threshold sweeps and
//! plot-ready exports.
//!
//! Every table is plain text, one record per line, tab-separated, with `#`
//! header lines. The first header lines carry the code version and the hash
//! of the resolved run configuration, so any file can be traced back to the
//! manifest that produced it.
//!
//! A run directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `turns.tsv` | per-turn observables (only with `detail`) |
//! | `lifetimes.tsv` | `event_index`, `lifetime_turns` |
//! | `intervals.tsv` | lifetimes with start turn, good and money qualification |
//! | `mfdfa_fluctuations.tsv` | `q`, `s`, `F_q` |
//! | `mfdfa_hurst.tsv` | `q`, `h`, `r2` |
//! | `mfdfa_spectrum.tsv`, `wtmm_spectrum.tsv` | `series`, `q`, `alpha`, `f` |
//! | `wtmm_tau.tsv` | `q`, `tau`, `r2` |
//! | `wtmm_field.tsv` | `s`, `n`, `T` (only with `detail`) |
//! | `manifest.json` | [`RunManifest`] |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{mean, shuffle, std_dev, Method, SingularitySpectrum};
use crate::error::{Error, Result};
use crate::mfdfa::{self, MfdfaConfig, MfdfaResult};
use crate::model::{init_world, sha256_hex, ModelConfig};
use crate::observer::{LifetimeSeries, MoneyCriteria, MoneyObserver};
use crate::wtmm::{self, WtmmConfig, WtmmResult};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));
/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MONEYFRAC_OUT";
/// Runs ending with fewer events are flagged under-sampled.
pub const MIN_EVENTS_FLOOR: usize = 256;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TURNS_FILE: &str = "turns.tsv";
pub const LIFETIMES_FILE: &str = "lifetimes.tsv";
pub const INTERVALS_FILE: &str = "intervals.tsv";
pub const MFDFA_FLUCTUATIONS_FILE: &str = "mfdfa_fluctuations.tsv";
pub const MFDFA_HURST_FILE: &str = "mfdfa_hurst.tsv";
pub const MFDFA_SPECTRUM_FILE: &str = "mfdfa_spectrum.tsv";
pub const WTMM_TAU_FILE: &str = "wtmm_tau.tsv";
pub const WTMM_SPECTRUM_FILE: &str = "wtmm_spectrum.tsv";
pub const WTMM_FIELD_FILE: &str = "wtmm_field.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Base model configuration; `thresh` and `seed` are overridden per run.
    pub model: ModelConfig,
    pub thresh_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub min_lifetime_events: usize,
    pub criteria: MoneyCriteria,
    pub mfdfa: MfdfaConfig,
    pub wtmm: WtmmConfig,
    pub output_dir: PathBuf,
    /// Concurrent runs; 0 uses every available core.
    pub workers: usize,
    /// Write the per-turn table and the wavelet coefficient matrix.
    pub detail: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            thresh_list: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5],
            seeds: (0..20).collect(),
            min_lifetime_events: 1024,
            criteria: MoneyCriteria::default(),
            mfdfa: MfdfaConfig::default(),
            wtmm: WtmmConfig::default(),
            output_dir: default_output_root(),
            workers: 0,
            detail: true,
        }
    }
}

/// `$MONEYFRAC_OUT`, or `out` in the working directory.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.thresh_list.is_empty() {
            return Err(Error::Config("thresh_list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.min_lifetime_events < MIN_EVENTS_FLOOR {
            return Err(Error::Config(format!(
                "min_lifetime_events must be at least {MIN_EVENTS_FLOOR}, got {}",
                self.min_lifetime_events
            )));
        }
        for &thresh in &self.thresh_list {
            ModelConfig { thresh, ..self.model.clone() }.validate()?;
        }
        self.wtmm.validate()?;
        if self.mfdfa.poly_order == 0 || self.mfdfa.q_grid.is_empty() {
            return Err(Error::Config("invalid MFDFA configuration".into()));
        }
        Ok(())
    }

    /// Resolved configuration of one `(thresh, seed)` run.
    pub fn run_spec(&self, thresh: f64, seed: u64) -> RunSpec {
        RunSpec {
            model: ModelConfig {
                thresh,
                seed,
                ..self.model.clone()
            },
            min_lifetime_events: self.min_lifetime_events,
            criteria: self.criteria,
            mfdfa: self.mfdfa.clone(),
            wtmm: self.wtmm.clone(),
            shuffle_seed: shuffle_seed_for(seed),
            detail: self.detail,
        }
    }

    pub fn run_dir(&self, thresh: f64, seed: u64) -> PathBuf {
        self.output_dir.join("runs").join(run_dir_name(thresh, seed))
    }
}

pub fn shuffle_seed_for(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

pub fn run_dir_name(thresh: f64, seed: u64) -> String {
    format!("thresh-{thresh:.2}-seed-{seed}")
}

/// Reads a plan from TOML or JSON, chosen by extension (TOML otherwise).
pub fn load_plan(path: &Path) -> Result<ExperimentPlan> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Everything needed to reproduce one run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub min_lifetime_events: usize,
    pub criteria: MoneyCriteria,
    pub mfdfa: MfdfaConfig,
    pub wtmm: WtmmConfig,
    pub shuffle_seed: u64,
    pub detail: bool,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.min_lifetime_events < MIN_EVENTS_FLOOR {
            return Err(Error::Config(format!(
                "min_lifetime_events must be at least {MIN_EVENTS_FLOOR}, got {}",
                self.min_lifetime_events
            )));
        }
        self.wtmm.validate()
    }

    /// SHA-256 of the code version and the canonical JSON of the spec.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(sha256_hex(format!("{CODE_VERSION}\n{json}").as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: RunSpec,
    pub code_version: String,
    pub config_hash: String,
    pub turns_simulated: u64,
    pub events: usize,
    pub qualified_events: usize,
    pub under_sampled: bool,
    /// Checksum of the world state after the last turn.
    pub final_checksum: String,
    /// Output kind to file name, relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub stage_seconds: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Tab-separated table writer with `#` headers.
struct Table {
    out: BufWriter<File>,
}

impl Table {
    fn create(path: &Path, preamble: &[String], columns: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "# {}", columns.join("\t"))?;
        Ok(Self { out })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join("\t"))?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn preamble(spec: &RunSpec, hash: &str, what: &str) -> Vec<String> {
    let m = &spec.model;
    vec![
        format!("{what} ({CODE_VERSION})"),
        format!("config_hash: {hash}"),
        format!(
            "n_agents: {} thresh: {} seed: {} max_turns: {} unmet_demand: {:?}",
            m.n_agents, m.thresh, m.seed, m.max_turns, m.unmet_demand
        ),
    ]
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

/// Simulates until `min_lifetime_events` lifetimes are closed or `max_turns`
/// is reached, writing the per-turn table (with `detail`), the lifetime
/// tables and the manifest into `dir`.
pub fn run_single(spec: &RunSpec, dir: &Path) -> Result<(RunManifest, LifetimeSeries)> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let hash = spec.hash()?;
    let started = Instant::now();

    let mut world = init_world(&spec.model)?;
    let mut observer = MoneyObserver::new(spec.criteria);
    let mut turns = if spec.detail {
        Some(Table::create(
            &dir.join(TURNS_FILE),
            &preamble(spec, &hash, "per-turn observables"),
            &[
                "turn",
                "argmax_good",
                "v_max",
                "total_trade_units",
                "exchanged_units_of_argmax",
                "units_produced",
                "units_consumed",
                "money_supply",
                "switched",
            ],
        )?)
    } else {
        None
    };
    while observer.event_count() < spec.min_lifetime_events && world.turn < spec.model.max_turns {
        world.run_turn()?;
        let (obs, switched) = observer.observe(&world);
        if let Some(table) = turns.as_mut() {
            table.row(&[
                obs.turn.to_string(),
                obs.argmax_good.to_string(),
                obs.v_max.to_string(),
                obs.total_trade_units.to_string(),
                obs.exchanged_units_of_argmax.to_string(),
                obs.units_produced.to_string(),
                obs.units_consumed.to_string(),
                obs.money_supply.to_string(),
                u8::from(switched).to_string(),
            ])?;
        }
    }
    if let Some(table) = turns {
        table.finish()?;
    }
    let series = observer.finish(spec.model.thresh, spec.model.n_agents, spec.model.seed);

    let mut outputs = BTreeMap::new();
    if spec.detail {
        outputs.insert("turns".to_string(), TURNS_FILE.to_string());
    }
    write_lifetimes(&dir.join(LIFETIMES_FILE), spec, &hash, &series)?;
    outputs.insert("lifetimes".to_string(), LIFETIMES_FILE.to_string());
    write_intervals(&dir.join(INTERVALS_FILE), spec, &hash, &series)?;
    outputs.insert("intervals".to_string(), INTERVALS_FILE.to_string());

    let under_sampled = series.len() < MIN_EVENTS_FLOOR;
    let mut warnings = Vec::new();
    if under_sampled {
        warnings.push(format!(
            "under-sampled: {} lifetimes after {} turns",
            series.len(),
            world.turn
        ));
    }
    let manifest = RunManifest {
        spec: spec.clone(),
        code_version: CODE_VERSION.to_string(),
        config_hash: hash,
        turns_simulated: world.turn,
        events: series.len(),
        qualified_events: series.qualified_count(),
        under_sampled,
        final_checksum: world.checksum()?,
        outputs,
        stage_seconds: BTreeMap::from([("simulate".to_string(), started.elapsed().as_secs_f64())]),
        warnings,
    };
    manifest.save(dir)?;
    Ok((manifest, series))
}

fn write_lifetimes(path: &Path, spec: &RunSpec, hash: &str, series: &LifetimeSeries) -> Result<()> {
    let mut table = Table::create(
        path,
        &preamble(spec, hash, "money lifetimes"),
        &["event_index", "lifetime_turns"],
    )?;
    for (i, interval) in series.intervals.iter().enumerate() {
        table.row(&[i.to_string(), interval.turns.to_string()])?;
    }
    table.finish()
}

fn write_intervals(path: &Path, spec: &RunSpec, hash: &str, series: &LifetimeSeries) -> Result<()> {
    let mut table = Table::create(
        path,
        &preamble(spec, hash, "lifetime intervals with money qualification"),
        &["event_index", "start_turn", "lifetime_turns", "good", "qualifies"],
    )?;
    for (i, interval) in series.intervals.iter().enumerate() {
        table.row(&[
            i.to_string(),
            interval.start_turn.to_string(),
            interval.turns.to_string(),
            interval.good.to_string(),
            u8::from(interval.qualifies).to_string(),
        ])?;
    }
    table.finish()
}

/// Both estimators on one series and on its shuffled surrogate.
#[derive(Debug, Clone)]
pub struct SeriesAnalysis {
    pub mfdfa: Result<MfdfaResult, String>,
    pub mfdfa_shuffled: Result<MfdfaResult, String>,
    pub wtmm: Result<WtmmResult, String>,
    pub wtmm_shuffled: Result<WtmmResult, String>,
}

impl SeriesAnalysis {
    pub fn run(x: &[f64], mfdfa_cfg: &MfdfaConfig, wtmm_cfg: &WtmmConfig, shuffle_seed: u64) -> Self {
        let shuffled = shuffle(x, shuffle_seed);
        let text = |e: Error| e.to_string();
        Self {
            mfdfa: mfdfa::analyze(x, mfdfa_cfg).map_err(text),
            mfdfa_shuffled: mfdfa::analyze(&shuffled, mfdfa_cfg).map_err(text),
            wtmm: wtmm::analyze(x, wtmm_cfg).map_err(text),
            wtmm_shuffled: wtmm::analyze(&shuffled, wtmm_cfg).map_err(text),
        }
    }

    pub fn spectra(&self, method: Method) -> (Option<&SingularitySpectrum>, Option<&SingularitySpectrum>) {
        match method {
            Method::Mfdfa => (
                self.mfdfa.as_ref().ok().map(|r| &r.spectrum),
                self.mfdfa_shuffled.as_ref().ok().map(|r| &r.spectrum),
            ),
            Method::Wtmm => (
                self.wtmm.as_ref().ok().map(|r| &r.spectrum),
                self.wtmm_shuffled.as_ref().ok().map(|r| &r.spectrum),
            ),
        }
    }

    pub fn errors(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut note = |label: &str, e: Option<&String>| {
            if let Some(e) = e {
                out.push(format!("{label}: {e}"));
            }
        };
        note("mfdfa", self.mfdfa.as_ref().err());
        note("mfdfa shuffled", self.mfdfa_shuffled.as_ref().err());
        note("wtmm", self.wtmm.as_ref().err());
        note("wtmm shuffled", self.wtmm_shuffled.as_ref().err());
        out
    }
}

/// Decades spanned by the scales entering the q = 2 fit.
pub fn mfdfa_fit_decades(result: &MfdfaResult, fit_range: Option<(usize, usize)>) -> Option<f64> {
    let set = &result.fluctuations;
    let iq = set.q_grid.iter().position(|&q| (q - 2.0).abs() < 1e-12)?;
    let (lo, hi) = fit_range.unwrap_or((0, usize::MAX));
    let used: Vec<usize> = set
        .scales
        .iter()
        .zip(&set.values[iq])
        .filter(|(&s, v)| s >= lo && s <= hi && v.is_some())
        .map(|(&s, _)| s)
        .collect();
    let (first, last) = (used.first()?, used.last()?);
    Some((*last as f64 / *first as f64).log10())
}

/// Runs both estimators on the run's lifetimes and writes their tables.
pub fn analyze_run(spec: &RunSpec, dir: &Path, series: &LifetimeSeries) -> Result<SeriesAnalysis> {
    let hash = spec.hash()?;
    let analysis = SeriesAnalysis::run(&series.as_f64(), &spec.mfdfa, &spec.wtmm, spec.shuffle_seed);
    write_analysis(spec, &hash, dir, &analysis)?;
    Ok(analysis)
}

fn write_analysis(spec: &RunSpec, hash: &str, dir: &Path, analysis: &SeriesAnalysis) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if let Ok(r) = &analysis.mfdfa {
        let shuffled = analysis.mfdfa_shuffled.as_ref().ok().map(|s| &s.spectrum);
        let header = preamble(spec, hash, "MFDFA");
        written.extend(write_mfdfa_tables(r, shuffled, &header, dir)?);
    }
    if let Ok(r) = &analysis.wtmm {
        let shuffled = analysis.wtmm_shuffled.as_ref().ok().map(|s| &s.spectrum);
        let header = preamble(spec, hash, "WTMM");
        written.extend(write_wtmm_tables(r, shuffled, &header, dir, spec.detail)?);
    }
    Ok(written)
}

fn write_field(path: &Path, preamble: &[String], field: &wtmm::WaveletField) -> Result<()> {
    let mut t = Table::create(path, preamble, &["s", "n", "T"])?;
    for (is, row) in field.coefficients.iter().enumerate() {
        let s = field.scales[is].to_string();
        for (n, v) in row.iter().enumerate() {
            t.row(&[s.clone(), n.to_string(), v.to_string()])?;
        }
    }
    t.finish()
}

/// Simulation followed by analysis, with the manifest updated to list every
/// output.
pub fn run_pipeline(spec: &RunSpec, dir: &Path) -> Result<(RunManifest, LifetimeSeries, SeriesAnalysis)> {
    let (mut manifest, series) = run_single(spec, dir)?;
    let started = Instant::now();
    let analysis = SeriesAnalysis::run(&series.as_f64(), &spec.mfdfa, &spec.wtmm, spec.shuffle_seed);
    for path in write_analysis(spec, &manifest.config_hash, dir, &analysis)? {
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            manifest.outputs.insert(name.trim_end_matches(".tsv").to_string(), name.to_string());
        }
    }
    manifest.stage_seconds.insert("analyze".to_string(), started.elapsed().as_secs_f64());
    manifest.warnings.extend(analysis.errors());
    manifest.save(dir)?;
    Ok((manifest, series, analysis))
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub thresh: f64,
    pub seed: u64,
    pub method: Method,
    pub delta_alpha: Option<f64>,
    pub delta_alpha_shuffled: Option<f64>,
    pub alpha_at_max_f: Option<f64>,
    pub alpha_at_max_f_shuffled: Option<f64>,
    /// MFDFA only: `max h - min h` over the q grid.
    pub h_range: Option<f64>,
    /// MFDFA only: r² of the q = 2 fit and the decades of scale it spans.
    pub q2_r2: Option<f64>,
    pub fit_decades: Option<f64>,
    pub events: usize,
    pub max_lifetime: Option<u64>,
    pub median_lifetime: Option<f64>,
    pub under_sampled: bool,
    pub error: Option<String>,
}

const SWEEP_COLUMNS: [&str; 15] = [
    "thresh",
    "seed",
    "method",
    "delta_alpha",
    "delta_alpha_shuffled",
    "alpha_at_max_f",
    "alpha_at_max_f_shuffled",
    "h_range",
    "q2_r2",
    "fit_decades",
    "events",
    "max_lifetime",
    "median_lifetime",
    "under_sampled",
    "error",
];

impl SweepRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.thresh.to_string(),
            self.seed.to_string(),
            self.method.to_string(),
            fmt_opt(self.delta_alpha),
            fmt_opt(self.delta_alpha_shuffled),
            fmt_opt(self.alpha_at_max_f),
            fmt_opt(self.alpha_at_max_f_shuffled),
            fmt_opt(self.h_range),
            fmt_opt(self.q2_r2),
            fmt_opt(self.fit_decades),
            self.events.to_string(),
            self.max_lifetime.map_or_else(|| "nan".into(), |v| v.to_string()),
            fmt_opt(self.median_lifetime),
            u8::from(self.under_sampled).to_string(),
            self.error.clone().unwrap_or_else(|| "-".into()).replace(['\t', '\n'], " "),
        ]
    }

    fn parse(line: &str, line_no: usize) -> Result<Self> {
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = |message: String| Error::Parse { line: line_no, message };
        if parts.len() != SWEEP_COLUMNS.len() {
            return Err(bad(format!("expected {} fields, found {}", SWEEP_COLUMNS.len(), parts.len())));
        }
        let num = |i: usize| -> Result<Option<f64>> {
            match parts[i] {
                "nan" => Ok(None),
                s => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| bad(format!("{}: {e}", SWEEP_COLUMNS[i]))),
            }
        };
        let int = |i: usize| -> Result<u64> {
            parts[i].parse::<u64>().map_err(|e| bad(format!("{}: {e}", SWEEP_COLUMNS[i])))
        };
        let method = match parts[2] {
            "mfdfa" => Method::Mfdfa,
            "wtmm" => Method::Wtmm,
            other => return Err(bad(format!("unknown method {other:?}"))),
        };
        Ok(Self {
            thresh: num(0)?.ok_or_else(|| bad("thresh is nan".into()))?,
            seed: int(1)?,
            method,
            delta_alpha: num(3)?,
            delta_alpha_shuffled: num(4)?,
            alpha_at_max_f: num(5)?,
            alpha_at_max_f_shuffled: num(6)?,
            h_range: num(7)?,
            q2_r2: num(8)?,
            fit_decades: num(9)?,
            events: int(10)? as usize,
            max_lifetime: if parts[11] == "nan" { None } else { Some(int(11)?) },
            median_lifetime: num(12)?,
            under_sampled: parts[13] == "1",
            error: (parts[14] != "-").then(|| parts[14].to_string()),
        })
    }
}

fn median(values: &mut [u64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    })
}

fn sweep_rows(spec: &RunSpec, outcome: &Result<(RunManifest, LifetimeSeries, SeriesAnalysis)>) -> Vec<SweepRow> {
    let (thresh, seed) = (spec.model.thresh, spec.model.seed);
    [Method::Mfdfa, Method::Wtmm]
        .into_iter()
        .map(|method| {
            let mut row = SweepRow {
                thresh,
                seed,
                method,
                delta_alpha: None,
                delta_alpha_shuffled: None,
                alpha_at_max_f: None,
                alpha_at_max_f_shuffled: None,
                h_range: None,
                q2_r2: None,
                fit_decades: None,
                events: 0,
                max_lifetime: None,
                median_lifetime: None,
                under_sampled: true,
                error: None,
            };
            let (manifest, series, analysis) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    row.error = Some(e.to_string());
                    return row;
                }
            };
            let mut lifetimes = series.lifetimes();
            row.events = manifest.events;
            row.under_sampled = manifest.under_sampled;
            row.max_lifetime = lifetimes.iter().copied().max();
            row.median_lifetime = median(&mut lifetimes);
            let (original, shuffled) = analysis.spectra(method);
            row.delta_alpha = original.map(SingularitySpectrum::width);
            row.alpha_at_max_f = original.and_then(SingularitySpectrum::alpha_at_max_f);
            row.delta_alpha_shuffled = shuffled.map(SingularitySpectrum::width);
            row.alpha_at_max_f_shuffled = shuffled.and_then(SingularitySpectrum::alpha_at_max_f);
            let errors: Vec<String> = match method {
                Method::Mfdfa => {
                    if let Ok(r) = &analysis.mfdfa {
                        let (lo, hi) = r.hurst.h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &h| {
                            (lo.min(h), hi.max(h))
                        });
                        row.h_range = Some(hi - lo);
                        row.q2_r2 = r.hurst.fit_at(2.0).map(|f| f.r2);
                        row.fit_decades = mfdfa_fit_decades(r, spec.mfdfa.fit_range);
                    }
                    [analysis.mfdfa.as_ref().err(), analysis.mfdfa_shuffled.as_ref().err()]
                        .into_iter()
                        .flatten()
                        .cloned()
                        .collect()
                }
                Method::Wtmm => [analysis.wtmm.as_ref().err(), analysis.wtmm_shuffled.as_ref().err()]
                    .into_iter()
                    .flatten()
                    .cloned()
                    .collect(),
            };
            if !errors.is_empty() {
                row.error = Some(errors.join("; "));
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub manifests: Vec<RunManifest>,
    /// `(thresh, seed, error)` for runs that did not complete.
    pub failures: Vec<(f64, u64, String)>,
    pub table: PathBuf,
}

impl SweepReport {
    pub fn under_sampled(&self) -> usize {
        self.manifests.iter().filter(|m| m.under_sampled).count()
    }

    pub fn analysis_failures(&self) -> usize {
        self.failures.len() + self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Every `(thresh, seed)` pair of the plan through [`run_pipeline`], up to
/// `workers` at a time. A failing run is recorded and the sweep continues.
pub fn run_sweep(plan: &ExperimentPlan) -> Result<SweepReport> {
    plan.validate()?;
    fs::create_dir_all(&plan.output_dir)?;
    let jobs: Vec<(f64, u64)> = plan
        .thresh_list
        .iter()
        .flat_map(|&t| plan.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<(RunSpec, Result<(RunManifest, LifetimeSeries, SeriesAnalysis)>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(thresh, seed)| {
                let spec = plan.run_spec(thresh, seed);
                let outcome = run_pipeline(&spec, &plan.run_dir(thresh, seed));
                (spec, outcome)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut manifests = Vec::new();
    let mut failures = Vec::new();
    for (spec, outcome) in &outcomes {
        rows.extend(sweep_rows(spec, outcome));
        match outcome {
            Ok((manifest, _, _)) => manifests.push(manifest.clone()),
            Err(e) => failures.push((spec.model.thresh, spec.model.seed, e.to_string())),
        }
    }
    let table = plan.output_dir.join(SWEEP_FILE);
    write_sweep(&table, plan, &rows)?;
    Ok(SweepReport {
        rows,
        manifests,
        failures,
        table,
    })
}

/// Hash of the plan as a whole, for sweep-level headers.
pub fn plan_hash(plan: &ExperimentPlan) -> Result<String> {
    let mut plan = plan.clone();
    plan.output_dir = PathBuf::new();
    plan.workers = 0;
    let json = serde_json::to_string(&plan)?;
    Ok(sha256_hex(format!("{CODE_VERSION}\n{json}").as_bytes()))
}

fn write_sweep(path: &Path, plan: &ExperimentPlan, rows: &[SweepRow]) -> Result<()> {
    let preamble = vec![
        format!("threshold sweep ({CODE_VERSION})"),
        format!("config_hash: {}", plan_hash(plan)?),
        format!(
            "n_agents: {} seeds: {} thresh_list: {:?} min_lifetime_events: {}",
            plan.model.n_agents,
            plan.seeds.len(),
            plan.thresh_list,
            plan.min_lifetime_events
        ),
    ];
    let mut t = Table::create(path, &preamble, &SWEEP_COLUMNS)?;
    for row in rows {
        t.row(&row.fields())?;
    }
    t.finish()
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        rows.push(SweepRow::parse(&line, i + 1)?);
    }
    Ok(rows)
}

/// Seed statistics of Δα for one `(thresh, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub thresh: f64,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub mean_shuffled: f64,
}

/// One row per `(thresh, method)`, in first-seen order. Seeds without a
/// width are left out of the statistics; a cell with none has `n = 0` and
/// NaN moments.
pub fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(f64, Method)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(t, m)| t == r.thresh && m == r.method) {
            keys.push((r.thresh, r.method));
        }
    }
    keys.into_iter()
        .map(|(thresh, method)| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.thresh == thresh && r.method == method).collect();
            let widths: Vec<f64> = cell.iter().filter_map(|r| r.delta_alpha).collect();
            let shuffled: Vec<f64> = cell.iter().filter_map(|r| r.delta_alpha_shuffled).collect();
            let moment = |v: &[f64], f: fn(&[f64]) -> f64| if v.is_empty() { f64::NAN } else { f(v) };
            AggregateRow {
                thresh,
                method,
                mean: moment(&widths, mean),
                std: if widths.len() < 2 { 0.0 } else { std_dev(&widths) },
                n: widths.len(),
                mean_shuffled: moment(&shuffled, mean),
            }
        })
        .collect()
}

/// Where [`export_figures`] reads from.
#[derive(Debug, Clone, Default)]
pub struct ExportSource {
    /// A run directory for the per-run figures.
    pub run_dir: Option<PathBuf>,
    /// A sweep table for the threshold figure.
    pub sweep_table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportFailure {
    pub figure: &'static str,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExportReport {
    pub written: Vec<PathBuf>,
    pub failures: Vec<ExportFailure>,
}

/// Figure file name and the run output it is taken from.
pub const RUN_FIGURES: [(&str, &str); 6] = [
    ("fig1.tsv", TURNS_FILE),
    ("fig2.tsv", LIFETIMES_FILE),
    ("fig3.tsv", MFDFA_FLUCTUATIONS_FILE),
    ("fig4.tsv", MFDFA_SPECTRUM_FILE),
    ("fig5.tsv", WTMM_FIELD_FILE),
    ("fig6.tsv", WTMM_SPECTRUM_FILE),
];
pub const SWEEP_FIGURE: &str = "fig7.tsv";

/// Writes the figure tables available from `source` into `out`. Each
/// missing input is reported on its own; the others are still written.
pub fn export_figures(source: &ExportSource, out: &Path) -> Result<ExportReport> {
    fs::create_dir_all(out)?;
    let mut report = ExportReport::default();
    if let Some(run_dir) = &source.run_dir {
        for (figure, input) in RUN_FIGURES {
            let from = run_dir.join(input);
            let to = out.join(figure);
            match fs::copy(&from, &to) {
                Ok(_) => report.written.push(to),
                Err(e) => report.failures.push(ExportFailure {
                    figure,
                    path: from,
                    reason: e.to_string(),
                }),
            }
        }
    }
    if let Some(table) = &source.sweep_table {
        match read_sweep(table).and_then(|rows| write_fig7(&out.join(SWEEP_FIGURE), table, &rows)) {
            Ok(path) => report.written.push(path),
            Err(e) => report.failures.push(ExportFailure {
                figure: SWEEP_FIGURE,
                path: table.clone(),
                reason: e.to_string(),
            }),
        }
    }
    if source.run_dir.is_none() && source.sweep_table.is_none() {
        return Err(Error::Config("nothing to export: give a run directory or a sweep table".into()));
    }
    Ok(report)
}

fn write_fig7(path: &Path, source: &Path, rows: &[SweepRow]) -> Result<PathBuf> {
    let hash = read_header_hash(source)?.unwrap_or_else(|| "-".into());
    let preamble = vec![
        format!("seed-averaged spectrum widths ({CODE_VERSION})"),
        format!("config_hash: {hash}"),
    ];
    let mut t = Table::create(path, &preamble, &["thresh", "method", "delta_alpha_mean", "delta_alpha_std", "n", "delta_alpha_shuffled_mean"])?;
    for a in aggregate(rows) {
        t.row(&[
            a.thresh.to_string(),
            a.method.to_string(),
            a.mean.to_string(),
            a.std.to_string(),
            a.n.to_string(),
            a.mean_shuffled.to_string(),
        ])?;
    }
    t.finish()?;
    Ok(path.to_path_buf())
}

/// The `config_hash` header value of a table, if present.
pub fn read_header_hash(path: &Path) -> Result<Option<String>> {
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        let Some(header) = line.strip_prefix('#') else { break };
        if let Some(hash) = header.trim().strip_prefix("config_hash:") {
            return Ok(Some(hash.trim().to_string()));
        }
    }
    Ok(None)
}

/// Numeric series from text: one value per line, or the lifetime table
/// format, whose second column is taken. Blank and `#` lines are skipped.
pub fn parse_series(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty()).collect();
        let field = match fields.len() {
            1 => fields[0],
            _ => fields[1],
        };
        let value: f64 = field.parse().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("{field:?}: {e}"),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("non-finite value {field}"),
            });
        }
        out.push(value);
    }
    Ok(out)
}

pub fn read_series(path: &Path) -> Result<Vec<f64>> {
    parse_series(&fs::read_to_string(path)?)
}

/// One value per line with `#` headers.
pub fn format_series(header: &[String], values: &[f64]) -> String {
    let mut out = String::new();
    for line in header {
        let _ = writeln!(out, "# {line}");
    }
    for v in values {
        let _ = writeln!(out, "{v}");
    }
    out
}

/// Writes `q, s, F_q`, `q, h, r2` and the spectrum tables. A shuffled
/// spectrum, when given, is appended to the spectrum table.
pub fn write_mfdfa_tables(
    result: &MfdfaResult,
    shuffled: Option<&SingularitySpectrum>,
    header: &[String],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut t = Table::create(&dir.join(MFDFA_FLUCTUATIONS_FILE), header, &["q", "s", "F_q"])?;
    let set = &result.fluctuations;
    for (iq, &q) in set.q_grid.iter().enumerate() {
        for (is, &s) in set.scales.iter().enumerate() {
            if let Some(f) = set.values[iq][is] {
                t.row(&[q.to_string(), s.to_string(), f.to_string()])?;
            }
        }
    }
    t.finish()?;
    let mut t = Table::create(&dir.join(MFDFA_HURST_FILE), header, &["q", "h", "r2"])?;
    for ((q, h), fit) in result.hurst.q_grid.iter().zip(&result.hurst.h).zip(&result.hurst.fits) {
        t.row(&[q.to_string(), h.to_string(), fit.r2.to_string()])?;
    }
    t.finish()?;
    write_spectrum_table(&dir.join(MFDFA_SPECTRUM_FILE), header, &result.spectrum, shuffled)?;
    Ok([MFDFA_FLUCTUATIONS_FILE, MFDFA_HURST_FILE, MFDFA_SPECTRUM_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect())
}

/// Writes `q, tau, r2`, the spectrum tables and optionally the `s, n, T`
/// coefficient matrix.
pub fn write_wtmm_tables(
    result: &WtmmResult,
    shuffled: Option<&SingularitySpectrum>,
    header: &[String],
    dir: &Path,
    with_field: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut t = Table::create(&dir.join(WTMM_TAU_FILE), header, &["q", "tau", "r2"])?;
    let p = &result.partition;
    for ((q, tau), fit) in p.q_grid.iter().zip(&p.tau).zip(&p.fits) {
        t.row(&[q.to_string(), tau.to_string(), fit.r2.to_string()])?;
    }
    t.finish()?;
    write_spectrum_table(&dir.join(WTMM_SPECTRUM_FILE), header, &result.spectrum, shuffled)?;
    let mut files = vec![dir.join(WTMM_TAU_FILE), dir.join(WTMM_SPECTRUM_FILE)];
    if with_field {
        write_field(&dir.join(WTMM_FIELD_FILE), header, &result.field)?;
        files.push(dir.join(WTMM_FIELD_FILE));
    }
    Ok(files)
}

fn write_spectrum_table(
    path: &Path,
    header: &[String],
    original: &SingularitySpectrum,
    shuffled: Option<&SingularitySpectrum>,
) -> Result<()> {
    let mut t = Table::create(path, header, &["series", "q", "alpha", "f"])?;
    for (label, spectrum) in [("original", Some(original)), ("shuffled", shuffled)] {
        for p in spectrum.iter().flat_map(|s| &s.points) {
            t.row(&[label.to_string(), p.q.to_string(), p.alpha.to_string(), p.f.to_string()])?;
        }
    }
    t.finish()
}
