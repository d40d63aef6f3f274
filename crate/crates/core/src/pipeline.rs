//! Configuration-driven runner: estimate → lw → calibrate → decompose.
//!
//! Stages talk to each other only through files in the output directory,
//! so any stage can be rerun on its own. Every run writes
//! `manifest.json`, also when a stage fails.
//!
//! Seeds: each stage uses `mix_seed(master, fnv1a64(stage_name))`
//! (splitmix64 finalizer over the FNV-1a hash of the name), so changing
//! one stage's work never shifts another stage's random numbers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    self, calibrate_sequence, moment_rows_from_pairs, moment_vector, CalibrationSettings, MomentVector,
};
use crate::decomposition::{self, DecompositionResult};
use crate::error::{Error, Result};
use crate::estimators::{self, ira_rows, EstimateRecord, ParticipationScope, TrendRecord};
use crate::lw::{self, LwOptions, LwRecord, LwSpec};
use crate::model::{QuantileMap, Role, RoleMaps};
use crate::population::{
    build_pairs, load_microdata, IncomeWindow, MicrodataSchema, PairRecord, PairTable, Population,
};
use crate::ranking::{rank_pairs, PairSpec};
use crate::synth::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Estimate,
    Lw,
    Calibrate,
    Decompose,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Estimate, Stage::Lw, Stage::Calibrate, Stage::Decompose];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Estimate => "estimate",
            Stage::Lw => "lw",
            Stage::Calibrate => "calibrate",
            Stage::Decompose => "decompose",
        }
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed of a named stage derived from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    mix_seed(master, fnv1a64(stage))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub microdata: Option<PathBuf>,
    pub schema: MicrodataSchema,
    /// Calibration targets (`cohort beta1..beta5`) used instead of
    /// moments computed from the microdata.
    pub moments: Option<PathBuf>,
    /// Directory of `<cohort>_<role>.tsv` quantile maps used instead of
    /// maps fitted to the microdata.
    pub maps_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowsConfig {
    pub child: IncomeWindow,
    pub parent: IncomeWindow,
}

impl Default for WindowsConfig {
    fn default() -> Self {
        WindowsConfig {
            child: IncomeWindow::child_default(),
            parent: IncomeWindow::parent_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipationConfig {
    pub threshold: f64,
    pub scope: ParticipationScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    /// Pair types, e.g. `all`, `son-father`, `daughter-mother`.
    pub specs: Vec<String>,
    /// Rank children within cohort × sex.
    pub rerank_by_gender: bool,
    pub ige: bool,
    pub participation: Option<ParticipationConfig>,
    /// Trend ranges `[start, end]`; empty means the full cohort range.
    pub trend_ranges: Vec<[i32; 2]>,
    /// Spec pairs whose trends are tested for equality.
    pub compare: Vec<[String; 2]>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            specs: PairSpec::standard().iter().map(|s| s.label()).collect(),
            rerank_by_gender: true,
            ige: true,
            participation: None,
            trend_ranges: Vec::new(),
            compare: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LwConfig {
    /// `son-father`, `daughter-father:flipped`, ...
    pub specs: Vec<String>,
    pub token_threshold: f64,
    pub education: bool,
    pub occupation: bool,
}

impl Default for LwConfig {
    fn default() -> Self {
        let o = LwOptions::default();
        LwConfig {
            specs: vec![LwSpec::SON_FATHER.key(), LwSpec::DAUGHTER_FATHER.key()],
            token_threshold: o.token_threshold,
            education: o.education,
            occupation: o.occupation,
        }
    }
}

impl LwConfig {
    fn options(&self) -> LwOptions {
        LwOptions {
            token_threshold: self.token_threshold,
            education: self.education,
            occupation: self.occupation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub n_sim: usize,
    pub max_iters: usize,
    pub step_size: f64,
    pub fd_step: f64,
    pub tolerance: f64,
    pub patience: usize,
    pub weights: [f64; 5],
    pub optimizer: calibration::Optimizer,
    /// Knots kept per fitted quantile map.
    pub map_knots: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        let s = CalibrationSettings::default();
        CalibrateConfig {
            n_sim: s.n_sim,
            max_iters: s.max_iters,
            step_size: s.step_size,
            fd_step: s.fd_step,
            tolerance: s.tolerance,
            patience: s.patience,
            weights: s.weights,
            optimizer: s.optimizer,
            map_knots: 2000,
        }
    }
}

impl CalibrateConfig {
    pub fn settings(&self, seed: u64) -> CalibrationSettings {
        CalibrationSettings {
            n_sim: self.n_sim,
            max_iters: self.max_iters,
            step_size: self.step_size,
            fd_step: self.fd_step,
            tolerance: self.tolerance,
            patience: self.patience,
            seed,
            weights: self.weights,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    /// Ranges `[start, end]`; empty means the full cohort range.
    pub ranges: Vec<[i32; 2]>,
    /// Baseline cohort; defaults to each range's first cohort.
    pub baseline: Option<i32>,
    /// Families per simulated cohort; defaults to `calibrate.n_sim`.
    pub n_sim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    /// First and last child cohort.
    pub cohorts: [i32; 2],
    pub input: InputConfig,
    pub windows: WindowsConfig,
    pub estimate: EstimateConfig,
    pub lw: LwConfig,
    pub calibrate: CalibrateConfig,
    pub decompose: DecomposeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            stages: Stage::ALL.to_vec(),
            cohorts: [1962, 1979],
            input: InputConfig::default(),
            windows: WindowsConfig::default(),
            estimate: EstimateConfig::default(),
            lw: LwConfig::default(),
            calibrate: CalibrateConfig::default(),
            decompose: DecomposeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, ignoring `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let canonical = PipelineConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn cohort_range(&self) -> std::ops::RangeInclusive<i32> {
        self.cohorts[0]..=self.cohorts[1]
    }

    fn ranges(&self, given: &[[i32; 2]]) -> Vec<std::ops::RangeInclusive<i32>> {
        if given.is_empty() {
            vec![self.cohort_range()]
        } else {
            given.iter().map(|r| r[0]..=r[1]).collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.cohorts[0] > self.cohorts[1] {
            return bad(format!("empty cohort range {:?}", self.cohorts));
        }
        if self.stages.is_empty() {
            return bad("no stages selected".into());
        }
        for s in &self.estimate.specs {
            if PairSpec::parse(s).is_none() {
                return bad(format!("unknown pair spec {s:?}"));
            }
        }
        for [a, b] in &self.estimate.compare {
            if !self.estimate.specs.contains(a) || !self.estimate.specs.contains(b) {
                return bad(format!("compare [{a}, {b}] names a spec that is not estimated"));
            }
        }
        for s in &self.lw.specs {
            if LwSpec::parse(s).is_none() {
                return bad(format!("unknown LW spec {s:?}"));
            }
        }
        for r in self.estimate.trend_ranges.iter().chain(&self.decompose.ranges) {
            if r[0] >= r[1] {
                return bad(format!("range {r:?} must have start < end"));
            }
        }
        if let Some(p) = &self.estimate.participation {
            if !(p.threshold >= 0.0) {
                return bad("participation threshold must be >= 0".into());
            }
        }
        self.calibrate.settings(0).validate()?;
        if self.calibrate.map_knots < 2 {
            return bad("calibrate.map_knots must be >= 2".into());
        }
        let needs_microdata = self.stages.iter().any(|s| match s {
            Stage::Estimate | Stage::Lw => true,
            Stage::Calibrate => self.input.moments.is_none() || self.input.maps_dir.is_none(),
            Stage::Decompose => false,
        });
        match &self.input.microdata {
            Some(p) if !p.exists() => return bad(format!("microdata file {} does not exist", p.display())),
            None if needs_microdata => return bad("input.microdata is required by the selected stages".into()),
            _ => {}
        }
        for p in [&self.input.moments, &self.input.maps_dir].into_iter().flatten() {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
    NotSelected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
    pub config: PipelineConfig,
}

impl Manifest {
    pub fn succeeded(&self) -> bool {
        self.failed_stage.is_none()
    }
}

#[derive(Default)]
struct StageOutput {
    outputs: Vec<String>,
    notes: Vec<String>,
}

impl StageOutput {
    fn file(&mut self, dir: &Path, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        dir.join(name)
    }
}

/// Loaded microdata and pairs, built lazily and shared by stages.
struct Data {
    pop: Population,
    pairs: PairTable,
}

struct Runner<'a> {
    config: &'a PipelineConfig,
    out: &'a Path,
    data: Option<Data>,
}

impl Runner<'_> {
    fn data(&mut self) -> Result<&Data> {
        if self.data.is_none() {
            let path = self
                .config
                .input
                .microdata
                .as_ref()
                .ok_or_else(|| Error::Config("input.microdata is not set".into()))?;
            let pop = load_microdata(path, &self.config.input.schema)?;
            let pairs = build_pairs(
                &pop,
                self.config.cohort_range(),
                self.config.windows.child,
                self.config.windows.parent,
            )?;
            log::info!(
                "loaded {} persons, {} pairs ({} excluded)",
                pop.len(),
                pairs.pairs.len(),
                pairs.exclusions.total()
            );
            self.data = Some(Data { pop, pairs });
        }
        Ok(self.data.as_ref().unwrap())
    }

    fn cohorts(&self) -> Vec<i32> {
        self.config.cohort_range().collect()
    }

    fn estimate(&mut self, so: &mut StageOutput) -> Result<()> {
        let cfg = self.config.estimate.clone();
        let cohorts = self.cohorts();
        let trend_ranges = self.config.ranges(&cfg.trend_ranges);
        let data = self.data()?;
        let ex = data.pairs.exclusions;
        so.notes.push(format!(
            "pairs {} of {} candidates; no parent {}, child income missing {}, parent income missing {}",
            data.pairs.pairs.len(),
            ex.candidates,
            ex.no_parent,
            ex.child_income_missing,
            ex.parent_income_missing
        ));
        let filtered;
        let pairs: &[PairRecord] = match cfg.participation {
            Some(p) => {
                filtered = estimators::participation_filter(&data.pairs.pairs, p.threshold, p.scope);
                so.notes.push(format!(
                    "participation filter kept {} of {} pairs",
                    filtered.len(),
                    data.pairs.pairs.len()
                ));
                &filtered
            }
            None => &data.pairs.pairs,
        };
        let specs: Vec<PairSpec> = cfg.specs.iter().map(|s| PairSpec::parse(s).unwrap()).collect();
        let per_spec: Vec<(PairSpec, Vec<EstimateRecord>, Vec<EstimateRecord>)> = specs
            .par_iter()
            .map(|&spec| -> Result<_> {
                let table = rank_pairs(pairs, spec, cfg.rerank_by_gender)?;
                let label = spec.label();
                let mut ira = Vec::new();
                let mut ige = Vec::new();
                for &c in &cohorts {
                    let rows = table.cohort(c);
                    if rows.is_empty() {
                        continue;
                    }
                    ira.push(ira_rows(&rows, c, &label)?);
                    if cfg.ige {
                        let cp: Vec<&PairRecord> = pairs.iter().filter(|p| p.child_cohort == c).collect();
                        match estimators::ige(&cp, spec, c) {
                            Ok(e) => ige.push(e),
                            Err(e) => log::warn!("ige {label} {c}: {e}"),
                        }
                    }
                }
                Ok((spec, ira, ige))
            })
            .collect::<Result<_>>()?;

        let mut rows = Vec::new();
        let mut trends: Vec<(String, TrendRecord)> = Vec::new();
        let mut by_label: BTreeMap<String, Vec<EstimateRecord>> = BTreeMap::new();
        for (spec, ira, ige) in &per_spec {
            rows.extend(ira.iter().map(|e| ("ira".to_string(), e.clone())));
            rows.extend(ige.iter().map(|e| ("ige".to_string(), e.clone())));
            for r in &trend_ranges {
                for (name, series) in [("ira", ira), ("ige", ige)] {
                    if series.iter().filter(|e| r.contains(&e.cohort)).count() >= 2 {
                        let mut t = estimators::trend_fit(series, r.clone())?;
                        t.spec_label = spec.label();
                        trends.push((name.to_string(), t));
                    }
                }
            }
            by_label.insert(spec.label(), ira.clone());
        }
        for [a, b] in &cfg.compare {
            for r in &trend_ranges {
                let cmp = estimators::trend_equality(&by_label[a], &by_label[b], r.clone())?;
                for t in trends.iter_mut().filter(|(n, t)| {
                    n == "ira"
                        && t.start == *r.start()
                        && t.end == *r.end()
                        && (t.spec_label == *a || t.spec_label == *b)
                }) {
                    t.1.p_equal_trends = Some(cmp.p_equal_trends);
                }
                so.notes.push(format!(
                    "trend {b} minus {a} over {}-{}: {:.4} (se {:.4}, p {:.4})",
                    r.start(),
                    r.end(),
                    cmp.difference_x100,
                    cmp.se_difference_x100,
                    cmp.p_equal_trends
                ));
            }
        }
        estimators::write_estimates_tsv(&so.file(self.out, "estimates.tsv"), &rows)?;
        estimators::write_trends_tsv(&so.file(self.out, "trends.tsv"), &trends)?;
        Ok(())
    }

    fn lw(&mut self, so: &mut StageOutput) -> Result<()> {
        let cfg = self.config.lw.clone();
        let options = cfg.options();
        let cohorts = self.cohorts();
        let ranges = self.config.ranges(&self.config.estimate.trend_ranges);
        let data = self.data()?;
        let specs: Vec<LwSpec> = cfg.specs.iter().map(|s| LwSpec::parse(s).unwrap()).collect();
        let jobs: Vec<(LwSpec, i32)> = specs
            .iter()
            .flat_map(|&s| cohorts.iter().map(move |&c| (s, c)))
            .collect();
        let results: Vec<(LwSpec, i32, Result<LwRecord>)> = jobs
            .par_iter()
            .map(|&(spec, c)| {
                let pairs = data.pairs.cohort(c);
                (spec, c, lw::lw_cohort(&data.pop, &pairs, spec, &options, c))
            })
            .collect();
        let mut records = Vec::new();
        for (spec, c, r) in results {
            match r {
                Ok(r) => records.push(r),
                Err(e) => so.notes.push(format!("lw {} {c}: {e}", spec.key())),
            }
        }
        let mut trends = Vec::new();
        for spec in &specs {
            let series: Vec<EstimateRecord> = records
                .iter()
                .filter(|r| r.spec_label == spec.label() && r.direction == spec.direction())
                .map(|r| r.estimate.clone())
                .collect();
            for r in &ranges {
                if series.iter().filter(|e| r.contains(&e.cohort)).count() >= 2 {
                    let mut t = estimators::trend_fit(&series, r.clone())?;
                    t.spec_label = spec.key();
                    trends.push(("lw".to_string(), t));
                }
            }
        }
        lw::write_lw_tsv(&so.file(self.out, "lw.tsv"), &records)?;
        estimators::write_trends_tsv(&so.file(self.out, "lw_trends.tsv"), &trends)?;
        Ok(())
    }

    fn observed_maps(&mut self, cohort: i32, knots: usize) -> Result<RoleMaps> {
        let data = self.data()?;
        let pairs = data.pairs.cohort(cohort);
        let mut fathers = BTreeMap::new();
        let mut mothers = BTreeMap::new();
        let mut sons = Vec::new();
        let mut daughters = Vec::new();
        for p in &pairs {
            if let (Some(i), Some(v)) = (p.father, p.father_income) {
                fathers.insert(i, v);
            }
            if let (Some(i), Some(v)) = (p.mother, p.mother_income) {
                mothers.insert(i, v);
            }
            match p.child_sex {
                Some(crate::population::Sex::Male) => sons.push(p.child_income),
                Some(crate::population::Sex::Female) => daughters.push(p.child_income),
                None => {}
            }
        }
        let fit = |v: &[f64], role: &str| -> Result<QuantileMap> {
            if v.is_empty() {
                return Err(Error::TooFewObservations {
                    what: format!("{role} earnings in cohort {cohort}"),
                    needed: 1,
                    got: 0,
                });
            }
            Ok(QuantileMap::fit(v)?.resample(knots))
        };
        let f: Vec<f64> = fathers.into_values().collect();
        let m: Vec<f64> = mothers.into_values().collect();
        Ok(RoleMaps::new(
            fit(&f, "father")?,
            fit(&m, "mother")?,
            fit(&sons, "son")?,
            fit(&daughters, "daughter")?,
        ))
    }

    fn calibrate(&mut self, so: &mut StageOutput, seed: u64) -> Result<()> {
        let cfg = self.config.calibrate.clone();
        let cohorts = self.cohorts();
        let maps_dir = self.out.join("maps");
        std::fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;

        let targets: Vec<(i32, MomentVector)> = match &self.config.input.moments {
            Some(path) => calibration::read_moments_tsv(path)?
                .into_iter()
                .filter(|(c, _)| self.config.cohort_range().contains(c))
                .collect(),
            None => {
                let data = self.data()?;
                let mut t = Vec::new();
                for &c in &cohorts {
                    let pairs = data.pairs.cohort(c);
                    if pairs.is_empty() {
                        continue;
                    }
                    match moment_vector(&moment_rows_from_pairs(&pairs)) {
                        Ok(m) => t.push((c, m)),
                        Err(e) => so.notes.push(format!("moments {c}: {e}")),
                    }
                }
                t
            }
        };
        if targets.is_empty() {
            return Err(Error::Invalid("no cohort has calibration targets".into()));
        }
        calibration::write_moments_tsv(&so.file(self.out, "moments.tsv"), &targets)?;

        let mut maps = BTreeMap::new();
        for (c, _) in &targets {
            let m = match &self.config.input.maps_dir {
                Some(dir) => RoleMaps::read_dir(dir, &c.to_string())?,
                None => self.observed_maps(*c, cfg.map_knots)?,
            };
            m.write_dir(&maps_dir, &c.to_string())?;
            for role in Role::ALL {
                so.outputs.push(format!("maps/{c}_{}.tsv", role.name()));
            }
            maps.insert(*c, m);
        }
        let settings = cfg.settings(seed);
        let chain = calibrate_sequence(
            &targets,
            &|c| maps.get(&c).cloned().ok_or(Error::MissingYear(c)),
            &settings,
            mix_seed(seed, 1),
        )?;
        let failed = chain.iter().filter(|c| c.result.is_err()).count();
        if failed > 0 {
            so.notes.push(format!("{failed} cohort(s) failed to calibrate"));
        }
        calibration::write_calibration_tsv(&so.file(self.out, "calibrated.tsv"), &chain)?;
        calibration::write_trace_tsv(&so.file(self.out, "calibration_trace.tsv"), &chain)?;
        Ok(())
    }

    fn decompose(&mut self, so: &mut StageOutput, seed: u64) -> Result<()> {
        let cfg = &self.config.decompose;
        let calibrated = self.out.join("calibrated.tsv");
        if !calibrated.exists() {
            return Err(Error::Config(format!(
                "{} is missing; run the calibrate stage first",
                calibrated.display()
            )));
        }
        let chain = calibration::read_params_tsv(&calibrated)?;
        let maps_dir = self.out.join("maps");
        let mut maps = BTreeMap::new();
        for (c, _) in &chain {
            maps.insert(*c, RoleMaps::read_dir(&maps_dir, &c.to_string())?);
        }
        let estimates_path = self.out.join("estimates.tsv");
        let observed: Option<Vec<EstimateRecord>> = if estimates_path.exists() {
            Some(
                estimators::read_estimates_tsv(&estimates_path)?
                    .into_iter()
                    .filter(|(name, e)| name == "ira" && e.spec_label == "all")
                    .map(|(_, e)| e)
                    .collect(),
            )
        } else {
            None
        };
        let n = cfg.n_sim.unwrap_or(self.config.calibrate.n_sim);
        let map_fn = |c: i32| maps.get(&c).cloned().ok_or(Error::MissingYear(c));
        let mut results: Vec<DecompositionResult> = Vec::new();
        for r in self.config.ranges(&cfg.ranges) {
            let observed = observed.as_ref().filter(|o| !o.is_empty()).map(|o| {
                o.iter()
                    .filter(|e| chain.iter().any(|(c, _)| *c == e.cohort))
                    .cloned()
                    .collect::<Vec<_>>()
            });
            let res = decomposition::decompose(&chain, &map_fn, n, seed, observed.as_deref(), r.clone(), cfg.baseline)?;
            let name = format!("beta_tilde_{}.tsv", res.label());
            decomposition::write_beta_tilde_tsv(&so.file(self.out, &name), &res)?;
            results.push(res);
        }
        decomposition::write_decomposition_tsv(&so.file(self.out, "decomposition.tsv"), &results)?;
        Ok(())
    }
}

fn write_manifest(out: &Path, manifest: &Manifest) -> Result<()> {
    let path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Runs the selected stages in order. The manifest is written in every
/// case; the returned error (if any) is the first stage failure.
pub fn run_pipeline(config: &PipelineConfig) -> (Manifest, Result<()>) {
    let mut manifest = Manifest {
        tool: "mobility".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: config.hash().unwrap_or_default(),
        seed: config.seed,
        stages: Vec::new(),
        failed_stage: None,
        config: config.clone(),
    };
    let out = config.output_dir.clone();
    if let Err(e) = std::fs::create_dir_all(&out) {
        let err = Error::io(&out, e);
        manifest.failed_stage = Some("setup".into());
        return (manifest, Err(err));
    }
    let mut result = config.validate();
    if result.is_err() {
        manifest.failed_stage = Some("setup".into());
    }
    let mut runner = Runner {
        config,
        out: &out,
        data: None,
    };
    for stage in Stage::ALL {
        let seed = stage_seed(config.seed, stage.name());
        let mut record = StageRecord {
            name: stage.name().into(),
            status: StageStatus::NotSelected,
            seed,
            outputs: Vec::new(),
            notes: Vec::new(),
            error: None,
        };
        if config.stages.contains(&stage) {
            if result.is_err() {
                record.status = StageStatus::Skipped;
            } else {
                log::info!("stage {}", stage.name());
                let mut so = StageOutput::default();
                let r = match stage {
                    Stage::Estimate => runner.estimate(&mut so),
                    Stage::Lw => runner.lw(&mut so),
                    Stage::Calibrate => runner.calibrate(&mut so, seed),
                    Stage::Decompose => runner.decompose(&mut so, seed),
                };
                record.outputs = so.outputs;
                record.notes = so.notes;
                match r {
                    Ok(()) => record.status = StageStatus::Ok,
                    Err(e) => {
                        record.status = StageStatus::Failed;
                        record.error = Some(e.to_string());
                        manifest.failed_stage = Some(stage.name().into());
                        result = Err(e);
                    }
                }
            }
        }
        manifest.stages.push(record);
    }
    if let Err(e) = write_manifest(&out, &manifest) {
        if result.is_ok() {
            result = Err(e);
        }
    }
    (manifest, result)
}
