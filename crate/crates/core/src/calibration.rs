//! Simulated method of moments.
//!
//! Five rank-association slopes pin down (ψ, κ, α, φ^M, φ^D):
//!
//! | moment | outcome rank | regressor rank        |
//! |--------|--------------|-----------------------|
//! | β₁     | father       | mother (ventile mid)  |
//! | β₂     | father       | son                   |
//! | β₃     | father       | daughter              |
//! | β₄     | mother       | son                   |
//! | β₅     | mother       | daughter              |
//!
//! The same base draws are reused at every parameter evaluation (common
//! random numbers), so the loss is a deterministic function of the
//! parameters and finite-difference derivatives are stable.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix5, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{simulate_with_draws, BaseDraws, ModelParams, Param, Role, RoleMaps, SimPopulation};
use crate::population::{PairRecord, Sex};
use crate::ranking::{percentile_ranks, ventile_midpoint, ventile_of_rank};
use crate::stats;

/// The five calibration slopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentVector(pub [f64; 5]);

impl MomentVector {
    pub const NAMES: [&'static str; 5] = [
        "father_on_mother_ventile",
        "father_on_son",
        "father_on_daughter",
        "mother_on_son",
        "mother_on_daughter",
    ];

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Weighted squared distance to `other`.
    pub fn distance(&self, other: &MomentVector, weights: &[f64; 5]) -> f64 {
        (0..5).map(|i| weights[i] * (self.0[i] - other.0[i]).powi(2)).sum()
    }
}

/// One child with the earnings of both parents (when known).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentRow {
    pub father: Option<f64>,
    pub mother: Option<f64>,
    pub child: f64,
    pub child_sex: Sex,
}

/// Rows from observed pairs; pairs with unknown child sex are skipped.
pub fn moment_rows_from_pairs(pairs: &[&PairRecord]) -> Vec<MomentRow> {
    pairs
        .iter()
        .filter_map(|p| {
            Some(MomentRow {
                father: p.father_income,
                mother: p.mother_income,
                child: p.child_income,
                child_sex: p.child_sex?,
            })
        })
        .collect()
}

/// Two rows per simulated family: the son's, then the daughter's.
pub fn moment_rows_from_sim(pop: &SimPopulation) -> Vec<MomentRow> {
    let f = pop.earnings(Role::Father);
    let m = pop.earnings(Role::Mother);
    let s = pop.earnings(Role::Son);
    let d = pop.earnings(Role::Daughter);
    let mut rows = Vec::with_capacity(2 * pop.len());
    for i in 0..pop.len() {
        for (child, child_sex) in [(s[i], Sex::Male), (d[i], Sex::Female)] {
            rows.push(MomentRow {
                father: Some(f[i]),
                mother: Some(m[i]),
                child,
                child_sex,
            });
        }
    }
    rows
}

/// Ranks of the `Some` entries; `None` stays `None`.
fn ranks_of(values: &[Option<f64>]) -> Result<Vec<Option<f64>>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let mut r = percentile_ranks(&present)?.into_iter();
    Ok(values.iter().map(|v| v.map(|_| r.next().unwrap())).collect())
}

/// Computes the moment vector. Every role is ranked among all rows that
/// carry it; sons and daughters are ranked separately.
pub fn moment_vector(rows: &[MomentRow]) -> Result<MomentVector> {
    let father: Vec<Option<f64>> = rows.iter().map(|r| r.father).collect();
    let mother: Vec<Option<f64>> = rows.iter().map(|r| r.mother).collect();
    let son: Vec<Option<f64>> = rows
        .iter()
        .map(|r| (r.child_sex == Sex::Male).then_some(r.child))
        .collect();
    let daughter: Vec<Option<f64>> = rows
        .iter()
        .map(|r| (r.child_sex == Sex::Female).then_some(r.child))
        .collect();
    let ((rf, rm), (rs, rd)) = rayon::join(
        || rayon::join(|| ranks_of(&father), || ranks_of(&mother)),
        || rayon::join(|| ranks_of(&son), || ranks_of(&daughter)),
    );
    let (rf, rm, rs, rd) = (rf?, rm?, rs?, rd?);

    let slope = |y: &[Option<f64>], x: &[Option<f64>], ventile: bool, eq: usize| -> Result<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = x
            .iter()
            .zip(y)
            .filter_map(|(x, y)| {
                let x = x.as_ref()?;
                let x = if ventile {
                    ventile_midpoint(ventile_of_rank(*x))
                } else {
                    *x
                };
                Some((x, (*y)?))
            })
            .unzip();
        let fit = stats::fit_line(
            &xs,
            &ys,
            &format!("moment equation {eq} ({})", MomentVector::NAMES[eq - 1]),
        )?;
        Ok(fit.slope)
    };
    Ok(MomentVector([
        slope(&rf, &rm, true, 1)?,
        slope(&rf, &rs, false, 2)?,
        slope(&rf, &rd, false, 3)?,
        slope(&rm, &rs, false, 4)?,
        slope(&rm, &rd, false, 5)?,
    ]))
}

pub fn simulated_moments(params: &ModelParams, maps: &RoleMaps, draws: &Arc<BaseDraws>) -> Result<MomentVector> {
    let pop = simulate_with_draws(params, maps, draws)?;
    moment_vector(&moment_rows_from_sim(&pop))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Damped Gauss-Newton (Levenberg-Marquardt) on the moment gaps.
    GaussNewton,
    /// Projected steepest descent with backtracking.
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub n_sim: usize,
    pub max_iters: usize,
    /// Initial damping (Gauss-Newton) or initial step length (gradient
    /// descent).
    pub step_size: f64,
    pub fd_step: f64,
    /// Stop once the loss falls below this.
    pub tolerance: f64,
    /// Stop after this many iterations with relative improvement < 1e-3.
    pub patience: usize,
    pub seed: u64,
    pub weights: [f64; 5],
    pub optimizer: Optimizer,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            n_sim: 100_000,
            max_iters: 200,
            step_size: 1e-3,
            fd_step: 1e-3,
            tolerance: 1e-8,
            patience: 10,
            seed: 0x5eed,
            weights: [1.0; 5],
            optimizer: Optimizer::GaussNewton,
        }
    }
}

impl CalibrationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_sim < 1000 {
            return Err(Error::Config(format!("n_sim must be >= 1000 (got {})", self.n_sim)));
        }
        if !(self.tolerance > 0.0) || !(self.fd_step > 0.0) || !(self.step_size > 0.0) {
            return Err(Error::Config(
                "tolerance, fd_step and step_size must be positive".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("moment weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub params: ModelParams,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibratedParams {
    pub params: ModelParams,
    pub fit_distance: f64,
    pub moments: MomentVector,
    pub iterations: usize,
    pub converged: bool,
    /// Best-seen point after each iteration.
    pub trace: Vec<TraceEntry>,
}

fn project(v: [f64; 5]) -> [f64; 5] {
    let mut out = v;
    for (x, p) in out.iter_mut().zip(Param::ALL) {
        let (lo, hi) = p.bounds();
        *x = x.clamp(lo, hi);
    }
    out
}

/// Draws a starting point from the interior of the parameter box.
pub fn random_init(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = [0.0; 5];
    for (x, p) in v.iter_mut().zip(Param::ALL) {
        *x = match p {
            Param::Psi | Param::Kappa | Param::Alpha => rng.random_range(0.05..0.95),
            Param::PhiM | Param::PhiD => rng.random_range(0.1..1.5),
        };
    }
    ModelParams::from_array(v)
}

/// Loss evaluator bound to fixed targets, maps and base draws.
pub struct Objective<'a> {
    pub targets: MomentVector,
    pub maps: &'a RoleMaps,
    pub draws: Arc<BaseDraws>,
    pub weights: [f64; 5],
}

impl Objective<'_> {
    pub fn moments(&self, v: &[f64; 5]) -> Result<MomentVector> {
        simulated_moments(&ModelParams::from_array(*v), self.maps, &self.draws)
    }

    pub fn loss(&self, v: &[f64; 5]) -> Result<f64> {
        Ok(self.moments(v)?.distance(&self.targets, &self.weights))
    }

    /// Finite-difference Jacobian of the moments; central where the box
    /// allows, one-sided at the bounds.
    fn jacobian(&self, v: &[f64; 5], h: f64) -> Result<Matrix5<f64>> {
        let cols: Vec<Result<[f64; 5]>> = (0..5)
            .into_par_iter()
            .map(|j| {
                let (lo, hi) = Param::ALL[j].bounds();
                let mut up = *v;
                let mut down = *v;
                up[j] = (v[j] + h).min(hi);
                down[j] = (v[j] - h).max(lo);
                let (mu, md) = rayon::join(|| self.moments(&up), || self.moments(&down));
                let (mu, md) = (mu?, md?);
                let width = up[j] - down[j];
                Ok(std::array::from_fn(|i| (mu.0[i] - md.0[i]) / width))
            })
            .collect();
        let mut jac = Matrix5::zeros();
        for (j, col) in cols.into_iter().enumerate() {
            let col = col?;
            for i in 0..5 {
                jac[(i, j)] = col[i];
            }
        }
        Ok(jac)
    }
}

fn trace_dump(trace: &[TraceEntry]) -> String {
    trace
        .iter()
        .map(|t| format!("{}:{:?}:{}", t.iteration, t.params.to_array(), t.distance))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Calibrates one cohort starting from `init`.
pub fn calibrate_cohort(
    targets: &MomentVector,
    init: &ModelParams,
    settings: &CalibrationSettings,
    maps: &RoleMaps,
) -> Result<CalibratedParams> {
    let draws = Arc::new(BaseDraws::generate(settings.n_sim, settings.seed));
    calibrate_with_draws(targets, init, settings, maps, &draws)
}

/// As [`calibrate_cohort`] with caller-supplied base draws.
pub fn calibrate_with_draws(
    targets: &MomentVector,
    init: &ModelParams,
    settings: &CalibrationSettings,
    maps: &RoleMaps,
    draws: &Arc<BaseDraws>,
) -> Result<CalibratedParams> {
    settings.validate()?;
    if !targets.is_finite() {
        return Err(Error::Invalid(format!("non-finite target moments {:?}", targets.0)));
    }
    init.validate()?;
    let objective = Objective {
        targets: *targets,
        maps,
        draws: Arc::clone(draws),
        weights: settings.weights,
    };
    let weights = Vector5::from_column_slice(&settings.weights);

    let mut theta = project(init.to_array());
    let mut moments = objective.moments(&theta)?;
    let mut loss = moments.distance(targets, &settings.weights);
    let mut trace = vec![TraceEntry {
        iteration: 0,
        params: ModelParams::from_array(theta),
        distance: loss,
    }];
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: 0,
            trace: trace_dump(&trace),
        });
    }
    let mut damping = settings.step_size;
    let mut stall = 0;
    let mut iterations = 0;
    while loss > settings.tolerance && iterations < settings.max_iters {
        iterations += 1;
        let jac = objective.jacobian(&theta, settings.fd_step)?;
        let resid = Vector5::from_iterator((0..5).map(|i| moments.0[i] - targets.0[i]));
        let wj = Matrix5::from_fn(|i, j| weights[i] * jac[(i, j)]);
        let grad = jac.transpose() * resid.component_mul(&weights);
        let jtj = jac.transpose() * wj;

        let mut accepted = None;
        for _ in 0..12 {
            let step = match settings.optimizer {
                Optimizer::GaussNewton => {
                    let mut a = jtj;
                    for d in 0..5 {
                        a[(d, d)] += damping * jtj[(d, d)].max(1e-12) + 1e-12;
                    }
                    match a.lu().solve(&(-grad)) {
                        Some(s) => s,
                        None => {
                            damping *= 4.0;
                            continue;
                        }
                    }
                }
                Optimizer::GradientDescent => -grad * damping,
            };
            let cand = project(std::array::from_fn(|i| theta[i] + step[i]));
            if cand == theta {
                break;
            }
            let m = objective.moments(&cand)?;
            let l = m.distance(targets, &settings.weights);
            if !l.is_finite() {
                trace.push(TraceEntry {
                    iteration: iterations,
                    params: ModelParams::from_array(cand),
                    distance: l,
                });
                return Err(Error::NonFiniteLoss {
                    iteration: iterations,
                    trace: trace_dump(&trace),
                });
            }
            if l < loss {
                accepted = Some((cand, m, l));
                break;
            }
            damping = match settings.optimizer {
                Optimizer::GaussNewton => damping * 4.0,
                Optimizer::GradientDescent => damping * 0.5,
            };
        }
        let Some((cand, m, l)) = accepted else {
            log::debug!("calibration: no descent step found at iteration {iterations}");
            break;
        };
        let rel = (loss - l) / loss;
        theta = cand;
        moments = m;
        loss = l;
        damping = match settings.optimizer {
            Optimizer::GaussNewton => (damping / 3.0).max(1e-9),
            Optimizer::GradientDescent => damping * 2.0,
        };
        trace.push(TraceEntry {
            iteration: iterations,
            params: ModelParams::from_array(theta),
            distance: loss,
        });
        if rel < 1e-3 {
            stall += 1;
            if stall >= settings.patience {
                break;
            }
        } else {
            stall = 0;
        }
    }
    Ok(CalibratedParams {
        params: ModelParams::from_array(theta),
        fit_distance: loss,
        moments,
        iterations,
        converged: loss <= settings.tolerance,
        trace,
    })
}

/// Outcome of one cohort in a warm-started chain.
#[derive(Debug, Clone)]
pub struct CohortCalibration {
    pub cohort: i32,
    pub result: std::result::Result<CalibratedParams, String>,
}

impl CohortCalibration {
    pub fn params(&self) -> Option<&ModelParams> {
        self.result.as_ref().ok().map(|c| &c.params)
    }
}

/// Calibrates cohorts in order. The first cohort starts from
/// `random_init(init_seed)`; each later one from the last successful
/// cohort's parameters. All cohorts share one set of base draws.
pub fn calibrate_sequence(
    targets: &[(i32, MomentVector)],
    maps: &dyn Fn(i32) -> Result<RoleMaps>,
    settings: &CalibrationSettings,
    init_seed: u64,
) -> Result<Vec<CohortCalibration>> {
    settings.validate()?;
    if targets.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Invalid("cohort targets must be strictly ordered".into()));
    }
    let draws = Arc::new(BaseDraws::generate(settings.n_sim, settings.seed));
    let mut start = random_init(init_seed);
    let mut out = Vec::with_capacity(targets.len());
    for (cohort, target) in targets {
        let result = maps(*cohort).and_then(|m| calibrate_with_draws(target, &start, settings, &m, &draws));
        match &result {
            Ok(c) => {
                log::info!(
                    "cohort {cohort}: distance {:.3e} after {} iterations",
                    c.fit_distance,
                    c.iterations
                );
                start = c.params;
            }
            Err(e) => log::warn!("cohort {cohort}: calibration failed: {e}"),
        }
        out.push(CohortCalibration {
            cohort: *cohort,
            result: result.map_err(|e| e.to_string()),
        });
    }
    Ok(out)
}

pub fn write_moments_tsv(path: &Path, rows: &[(i32, MomentVector)]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "cohort\tbeta1\tbeta2\tbeta3\tbeta4\tbeta5").map_err(io)?;
    for (c, m) in rows {
        let [a, b, cc, d, e] = m.0;
        writeln!(w, "{c}\t{a}\t{b}\t{cc}\t{d}\t{e}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_moments_tsv(path: &Path) -> Result<Vec<(i32, MomentVector)>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<(i32, f64, f64, f64, f64, f64)>() {
        let (c, a, b, cc, d, e) = row.map_err(|e| Error::csv(path, e))?;
        out.push((c, MomentVector([a, b, cc, d, e])));
    }
    Ok(out)
}

/// Writes the calibrated chain; failed cohorts keep their row with empty
/// parameters and the error in `status`.
pub fn write_calibration_tsv(path: &Path, rows: &[CohortCalibration]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "cohort\tpsi\tkappa\talpha\tphi_m\tphi_d\tfit_distance\titerations\tconverged\tstatus"
    )
    .map_err(io)?;
    for row in rows {
        match &row.result {
            Ok(c) => {
                let p = c.params;
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\tok",
                    row.cohort, p.psi, p.kappa, p.alpha, p.phi_m, p.phi_d, c.fit_distance, c.iterations, c.converged
                )
                .map_err(io)?;
            }
            Err(e) => {
                let msg = e.replace(['\t', '\n'], " ");
                writeln!(w, "{}\t\t\t\t\t\t\t\t\tfailed: {msg}", row.cohort).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads `cohort psi kappa alpha phi_m phi_d ...` rows, skipping rows
/// without parameters.
pub fn read_params_tsv(path: &Path) -> Result<Vec<(i32, ModelParams)>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cohort_col = col("cohort")?;
    let param_cols: Vec<usize> = Param::ALL.iter().map(|p| col(p.name())).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let cell = |c: usize| rec.get(c).unwrap_or("").trim();
        if param_cols.iter().any(|&c| cell(c).is_empty()) {
            continue;
        }
        let cohort: i32 = cell(cohort_col).parse().map_err(|_| Error::Parse {
            row: i + 1,
            column: "cohort".into(),
            message: "not an integer".into(),
        })?;
        let mut v = [0.0; 5];
        for (k, &c) in param_cols.iter().enumerate() {
            v[k] = cell(c).parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: Param::ALL[k].name().into(),
                message: "not a number".into(),
            })?;
        }
        let p = ModelParams::from_array(v);
        p.validate()?;
        out.push((cohort, p));
    }
    Ok(out)
}

pub fn write_trace_tsv(path: &Path, rows: &[CohortCalibration]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "cohort\titeration\tpsi\tkappa\talpha\tphi_m\tphi_d\tdistance").map_err(io)?;
    for row in rows {
        if let Ok(c) = &row.result {
            for t in &c.trace {
                let p = t.params;
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    row.cohort, t.iteration, p.psi, p.kappa, p.alpha, p.phi_m, p.phi_d, t.distance
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}
