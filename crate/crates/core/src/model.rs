//! Latent-skill family simulator.
//!
//! Fathers draw a standard-normal skill; mothers' skills mix the father's
//! skill with independent noise (assortative mating ψ). Sons and daughters
//! inherit a weighted parental mix (transmission κ, same-gender weight α)
//! plus one shared family noise draw. Each role's earnings index blends
//! its skill with a non-inheritable draw according to the normalized skill
//! return φ̃, and an empirical quantile map turns the index into earnings.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::norm_cdf;

/// Upper bound on φ^M and φ^D.
pub const PHI_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Father,
    Mother,
    Son,
    Daughter,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Father, Role::Mother, Role::Son, Role::Daughter];

    pub fn name(self) -> &'static str {
        match self {
            Role::Father => "father",
            Role::Mother => "mother",
            Role::Son => "son",
            Role::Daughter => "daughter",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// The five calibrated parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Param {
    Psi,
    Kappa,
    Alpha,
    PhiM,
    PhiD,
}

impl Param {
    pub const ALL: [Param; 5] = [Param::Psi, Param::Kappa, Param::Alpha, Param::PhiM, Param::PhiD];

    pub fn name(self) -> &'static str {
        match self {
            Param::Psi => "psi",
            Param::Kappa => "kappa",
            Param::Alpha => "alpha",
            Param::PhiM => "phi_m",
            Param::PhiD => "phi_d",
        }
    }

    pub fn parse(name: &str) -> Result<Param> {
        Param::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            Param::Psi | Param::Kappa | Param::Alpha => (0.0, 1.0),
            Param::PhiM | Param::PhiD => (0.0, PHI_MAX),
        }
    }
}

/// Model parameters. `phi_f` and `phi_s` are normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub psi: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub phi_f: f64,
    pub phi_m: f64,
    pub phi_s: f64,
    pub phi_d: f64,
}

impl ModelParams {
    pub fn new(psi: f64, kappa: f64, alpha: f64, phi_m: f64, phi_d: f64) -> Result<Self> {
        let p = ModelParams {
            psi,
            kappa,
            alpha,
            phi_f: 1.0,
            phi_m,
            phi_s: 1.0,
            phi_d,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for param in Param::ALL {
            let v = self.get(param);
            let (lo, hi) = param.bounds();
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::InvalidParams(format!(
                    "{} = {v} outside [{lo}, {hi}]",
                    param.name()
                )));
            }
        }
        if !(self.phi_f > 0.0 && self.phi_s > 0.0) {
            return Err(Error::InvalidParams("phi_f and phi_s must be positive".into()));
        }
        Ok(())
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Psi => self.psi,
            Param::Kappa => self.kappa,
            Param::Alpha => self.alpha,
            Param::PhiM => self.phi_m,
            Param::PhiD => self.phi_d,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::Psi => self.psi = v,
            Param::Kappa => self.kappa = v,
            Param::Alpha => self.alpha = v,
            Param::PhiM => self.phi_m = v,
            Param::PhiD => self.phi_d = v,
        }
    }

    pub fn with(mut self, p: Param, v: f64) -> Self {
        self.set(p, v);
        self
    }

    pub fn to_array(&self) -> [f64; 5] {
        Param::ALL.map(|p| self.get(p))
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        let mut p = ModelParams {
            psi: 0.0,
            kappa: 0.0,
            alpha: 0.0,
            phi_f: 1.0,
            phi_m: 0.0,
            phi_s: 1.0,
            phi_d: 0.0,
        };
        for (param, x) in Param::ALL.into_iter().zip(v) {
            p.set(param, x);
        }
        p
    }

    /// Γ⁰ = √(ψ² + (1−ψ)²).
    pub fn gamma0(&self) -> f64 {
        (self.psi * self.psi + (1.0 - self.psi) * (1.0 - self.psi)).sqrt()
    }

    /// Model-implied corr(x^F, x^M) = ψ/Γ⁰.
    pub fn mating_corr(&self) -> f64 {
        self.psi / self.gamma0()
    }

    /// Variance of the parental mix α·x^F + (1−α)·x^M (same for either
    /// child by symmetry).
    pub fn mix_variance(&self) -> f64 {
        let a = self.alpha;
        a * a + (1.0 - a) * (1.0 - a) + 2.0 * a * (1.0 - a) * self.mating_corr()
    }

    /// Γ¹ = √(κ²·w + (1−κ)²).
    pub fn gamma1(&self) -> f64 {
        let k = self.kappa;
        (k * k * self.mix_variance() + (1.0 - k) * (1.0 - k)).sqrt()
    }

    /// φ̃ of a role: φ normalized by the larger φ of its generation.
    pub fn phi_tilde(&self, role: Role) -> Result<f64> {
        let (own, other_max) = match role {
            Role::Father => (self.phi_f, self.phi_f.max(self.phi_m)),
            Role::Mother => (self.phi_m, self.phi_f.max(self.phi_m)),
            Role::Son => (self.phi_s, self.phi_s.max(self.phi_d)),
            Role::Daughter => (self.phi_d, self.phi_s.max(self.phi_d)),
        };
        if other_max <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "skill returns of the {} generation are all zero",
                role.name()
            )));
        }
        Ok(own / other_max)
    }

    /// Closed-form corr(x^S, x^F) (equals corr(x^D, x^M)).
    pub fn son_father_skill_corr(&self) -> f64 {
        let r = self.mating_corr();
        self.kappa * (self.alpha + (1.0 - self.alpha) * r) / self.gamma1()
    }

    /// Closed-form corr(x^S, x^D) with one shared family draw.
    pub fn sibling_skill_corr(&self) -> f64 {
        let a = self.alpha;
        let k = self.kappa;
        let cov_mix = 2.0 * a * (1.0 - a) + (a * a + (1.0 - a) * (1.0 - a)) * self.mating_corr();
        (k * k * cov_mix + (1.0 - k) * (1.0 - k)) / (self.gamma1() * self.gamma1())
    }
}

/// Monotone map from a standard-normal index to earnings: the index is
/// sent through Φ and then through a piecewise-linear empirical quantile
/// function, clamped to the end knots.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    probs: Vec<f64>,
    values: Vec<f64>,
}

impl QuantileMap {
    /// Knots at probabilities `(i + 0.5)/n` over the sorted sample.
    pub fn fit(sample: &[f64]) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::Invalid("quantile map needs a non-empty sample".into()));
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quantile map sample".into()));
        }
        let mut values = sample.to_vec();
        values.sort_unstable_by(f64::total_cmp);
        let n = values.len() as f64;
        let probs = (0..values.len()).map(|i| (i as f64 + 0.5) / n).collect();
        Ok(QuantileMap { probs, values })
    }

    /// Builds a map from explicit knots; probabilities must be strictly
    /// increasing in (0, 1) and values non-decreasing.
    pub fn from_knots(probs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.len() != values.len() {
            return Err(Error::Invalid("quantile knots must be non-empty and paired".into()));
        }
        let ok_p = probs.windows(2).all(|w| w[0] < w[1]) && probs.iter().all(|p| (0.0..=1.0).contains(p));
        let ok_v = values.windows(2).all(|w| w[0] <= w[1]) && values.iter().all(|v| v.is_finite());
        if !ok_p || !ok_v {
            return Err(Error::Invalid("quantile knots are not monotone".into()));
        }
        Ok(QuantileMap { probs, values })
    }

    /// Re-expresses the map on `k` equally spaced knots. Maps with at most
    /// `k` knots are returned unchanged.
    pub fn resample(&self, k: usize) -> QuantileMap {
        if self.probs.len() <= k || k == 0 {
            return self.clone();
        }
        let probs: Vec<f64> = (0..k).map(|j| (j as f64 + 0.5) / k as f64).collect();
        let values = probs.iter().map(|&p| self.eval_prob(p)).collect();
        QuantileMap { probs, values }
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.probs, &self.values)
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn eval_prob(&self, p: f64) -> f64 {
        let n = self.probs.len();
        if p <= self.probs[0] {
            return self.values[0];
        }
        if p >= self.probs[n - 1] {
            return self.values[n - 1];
        }
        let hi = self.probs.partition_point(|&q| q <= p);
        let lo = hi - 1;
        let (p0, p1) = (self.probs[lo], self.probs[hi]);
        let (v0, v1) = (self.values[lo], self.values[hi]);
        if v0 == v1 {
            return v0;
        }
        v0 + (p - p0) / (p1 - p0) * (v1 - v0)
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.eval_prob(norm_cdf(z))
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(w, "probability\tearnings").map_err(io)?;
        for (p, v) in self.probs.iter().zip(&self.values) {
            writeln!(w, "{p}\t{v}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let mut probs = Vec::new();
        let mut values = Vec::new();
        for row in r.deserialize::<(f64, f64)>() {
            let (p, v) = row.map_err(|e| Error::csv(path, e))?;
            probs.push(p);
            values.push(v);
        }
        QuantileMap::from_knots(probs, values)
    }
}

/// One quantile map per role.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleMaps {
    maps: [QuantileMap; 4],
}

impl RoleMaps {
    pub fn new(father: QuantileMap, mother: QuantileMap, son: QuantileMap, daughter: QuantileMap) -> Self {
        RoleMaps {
            maps: [father, mother, son, daughter],
        }
    }

    /// Standard-normal identity-like maps: every role maps the index to
    /// the same strictly increasing earnings curve.
    pub fn uniform(map: QuantileMap) -> Self {
        RoleMaps::new(map.clone(), map.clone(), map.clone(), map)
    }

    pub fn get(&self, role: Role) -> &QuantileMap {
        &self.maps[role.slot()]
    }

    pub fn resample(&self, k: usize) -> RoleMaps {
        RoleMaps {
            maps: self.maps.clone().map(|m| m.resample(k)),
        }
    }

    /// Files `<prefix>_<role>.tsv` under `dir`.
    pub fn write_dir(&self, dir: &Path, prefix: &str) -> Result<()> {
        for role in Role::ALL {
            self.get(role)
                .write_tsv(&dir.join(format!("{prefix}_{}.tsv", role.name())))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path, prefix: &str) -> Result<Self> {
        let read = |role: Role| QuantileMap::read_tsv(&dir.join(format!("{prefix}_{}.tsv", role.name())));
        Ok(RoleMaps::new(
            read(Role::Father)?,
            read(Role::Mother)?,
            read(Role::Son)?,
            read(Role::Daughter)?,
        ))
    }
}

/// Families per random stream. Each block draws from its own ChaCha
/// stream, so draws do not depend on how blocks are spread over threads.
const BLOCK: usize = 4096;

/// The parameter-free standard-normal draws of a simulated population.
/// Reusing one `BaseDraws` across parameter values gives common random
/// numbers. Each column is moment-matched to sample mean 0 and variance 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDraws {
    pub seed: u64,
    pub x_f: Vec<f64>,
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    /// Non-inheritable draws ε, indexed by role.
    pub eps: [Vec<f64>; 4],
}

impl BaseDraws {
    pub fn generate(n: usize, seed: u64) -> Self {
        let blocks: Vec<[Vec<f64>; 7]> = (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                let len = BLOCK.min(n - b * BLOCK);
                let mut cols: [Vec<f64>; 7] = Default::default();
                for c in cols.iter_mut() {
                    c.reserve(len);
                }
                for _ in 0..len {
                    for c in cols.iter_mut() {
                        c.push(StandardNormal.sample(&mut rng));
                    }
                }
                cols
            })
            .collect();
        let mut cols: [Vec<f64>; 7] = Default::default();
        for c in cols.iter_mut() {
            c.reserve(n);
        }
        for block in blocks {
            for (dst, src) in cols.iter_mut().zip(block) {
                dst.extend(src);
            }
        }
        for c in cols.iter_mut() {
            standardize(c);
        }
        let [x_f, u0, u1, e_f, e_m, e_s, e_d] = cols;
        BaseDraws {
            seed,
            x_f,
            u0,
            u1,
            eps: [e_f, e_m, e_s, e_d],
        }
    }

    pub fn len(&self) -> usize {
        self.x_f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_f.is_empty()
    }
}

fn standardize(col: &mut [f64]) {
    if col.len() < 2 {
        return;
    }
    let m = crate::stats::mean(col);
    let sd = crate::stats::variance(col).sqrt();
    for v in col.iter_mut() {
        *v = (*v - m) / sd;
    }
}

/// x^M = (ψ·x^F + (1−ψ)·u⁰)/Γ⁰.
fn mother_skills(psi: f64, x_f: &[f64], u0: &[f64]) -> Vec<f64> {
    let g0 = (psi * psi + (1.0 - psi) * (1.0 - psi)).sqrt();
    x_f.iter()
        .zip(u0)
        .map(|(f, u)| (psi * f + (1.0 - psi) * u) / g0)
        .collect()
}

/// Father and mother skills for `n` families.
pub fn draw_parental_skills(psi: f64, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::InvalidParams(format!("psi = {psi} outside [0, 1]")));
    }
    let draws = BaseDraws::generate(n, seed);
    let x_m = mother_skills(psi, &draws.x_f, &draws.u0);
    Ok((draws.x_f, x_m))
}

fn child_skills(params: &ModelParams, x_f: &[f64], x_m: &[f64], u1: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (k, a) = (params.kappa, params.alpha);
    let g1 = params.gamma1();
    assert!(g1 > 0.0, "Γ¹ must be positive for valid parameters");
    let son = (0..x_f.len())
        .map(|i| (k * (a * x_f[i] + (1.0 - a) * x_m[i]) + (1.0 - k) * u1[i]) / g1)
        .collect();
    let daughter = (0..x_f.len())
        .map(|i| (k * (a * x_m[i] + (1.0 - a) * x_f[i]) + (1.0 - k) * u1[i]) / g1)
        .collect();
    (son, daughter)
}

/// Son and daughter skills sharing one family draw u¹ (taken from the
/// `seed` stream). Γ¹ uses the model-implied parental correlation.
pub fn transmit_skills(params: &ModelParams, x_f: &[f64], x_m: &[f64], seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    if x_f.len() != x_m.len() {
        return Err(Error::Invalid("parental skill vectors differ in length".into()));
    }
    let u1 = BaseDraws::generate(x_f.len(), seed).u1;
    Ok(child_skills(params, x_f, x_m, &u1))
}

/// φ̃·x + (1−φ̃)·ε for one role.
pub fn earnings_index(params: &ModelParams, skills: &[f64], noise: &[f64], role: Role) -> Result<Vec<f64>> {
    let w = params.phi_tilde(role)?;
    Ok(skills.iter().zip(noise).map(|(x, e)| w * x + (1.0 - w) * e).collect())
}

pub fn fit_quantile_map(sample: &[f64]) -> Result<QuantileMap> {
    QuantileMap::fit(sample)
}

/// A simulated population: one father, mother, son and daughter per
/// family.
#[derive(Debug, Clone)]
pub struct SimPopulation {
    pub params: ModelParams,
    pub draws: Arc<BaseDraws>,
    /// Latent skills by role.
    pub skills: [Vec<f64>; 4],
    /// Earnings indices by role.
    pub index: [Vec<f64>; 4],
    /// Mapped earnings by role.
    pub earnings: [Vec<f64>; 4],
    /// Joint parental earnings y^F + y^M.
    pub parent_joint: Vec<f64>,
}

impl SimPopulation {
    pub fn seed(&self) -> u64 {
        self.draws.seed
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn skills(&self, role: Role) -> &[f64] {
        &self.skills[role.slot()]
    }

    #[allow(clippy::should_implement_trait)]
    pub fn index(&self, role: Role) -> &[f64] {
        &self.index[role.slot()]
    }

    pub fn earnings(&self, role: Role) -> &[f64] {
        &self.earnings[role.slot()]
    }

    pub fn noise(&self, role: Role) -> &[f64] {
        &self.draws.eps[role.slot()]
    }
}

fn map_values(map: &QuantileMap, index: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; index.len()];
    out.par_chunks_mut(BLOCK)
        .zip(index.par_chunks(BLOCK))
        .for_each(|(o, z)| {
            for (o, z) in o.iter_mut().zip(z) {
                *o = map.eval(*z);
            }
        });
    out
}

/// Simulates from fixed base draws.
pub fn simulate_with_draws(params: &ModelParams, maps: &RoleMaps, draws: &Arc<BaseDraws>) -> Result<SimPopulation> {
    params.validate()?;
    let x_f = draws.x_f.clone();
    let x_m = mother_skills(params.psi, &x_f, &draws.u0);
    let (x_s, x_d) = child_skills(params, &x_f, &x_m, &draws.u1);
    let skills = [x_f, x_m, x_s, x_d];
    let mut index: [Vec<f64>; 4] = Default::default();
    let mut earnings: [Vec<f64>; 4] = Default::default();
    for role in Role::ALL {
        let s = role.slot();
        index[s] = earnings_index(params, &skills[s], &draws.eps[s], role)?;
        earnings[s] = map_values(maps.get(role), &index[s]);
    }
    let parent_joint = earnings[0].iter().zip(&earnings[1]).map(|(f, m)| f + m).collect();
    Ok(SimPopulation {
        params: *params,
        draws: Arc::clone(draws),
        skills,
        index,
        earnings,
        parent_joint,
    })
}

/// Simulates `n` families; deterministic in `(params, maps, n, seed)`.
pub fn simulate_population(params: &ModelParams, maps: &RoleMaps, n: usize, seed: u64) -> Result<SimPopulation> {
    let draws = Arc::new(BaseDraws::generate(n, seed));
    simulate_with_draws(params, maps, &draws)
}
