//! Synthetic microdata with a known generating process.
//!
//! Each simulated family becomes four persons: a father born 30 years and
//! a mother born 28 years before the children, a son and a daughter. Model
//! earnings are written as constant incomes over the default windows
//! (parents at child ages 17-19, children at own ages 35-37), rounded to
//! cents, so the pair builder recovers them exactly. Education and
//! occupation load on the person's latent skill with configurable
//! strength; a loading of 0 makes them pure noise.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{simulate_population, ModelParams, QuantileMap, Role, RoleMaps, SimPopulation};
use crate::population::{PersonRecord, Population, Sex, OCC_MISSING};
use crate::stats::{norm_cdf, norm_quantile};

/// Parent age relative to the children.
pub const FATHER_AGE_GAP: i32 = 30;
pub const MOTHER_AGE_GAP: i32 = 28;

/// Lognormal earnings with a point mass at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarningsShape {
    pub zero_share: f64,
    pub median: f64,
    pub sigma: f64,
}

impl EarningsShape {
    /// Quantile map on `knots` equally spaced probabilities.
    pub fn to_map(&self, knots: usize) -> Result<QuantileMap> {
        if !(0.0..1.0).contains(&self.zero_share) || !(self.median > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::Invalid(format!("bad earnings shape {self:?}")));
        }
        let probs: Vec<f64> = (0..knots).map(|i| (i as f64 + 0.5) / knots as f64).collect();
        let values = probs
            .iter()
            .map(|&p| {
                if p <= self.zero_share {
                    0.0
                } else {
                    let q = (p - self.zero_share) / (1.0 - self.zero_share);
                    self.median * (self.sigma * norm_quantile(q)).exp()
                }
            })
            .collect();
        QuantileMap::from_knots(probs, values)
    }
}

/// Earnings shapes per role used when no empirical maps are given.
pub fn default_shapes() -> [EarningsShape; 4] {
    [
        EarningsShape {
            zero_share: 0.03,
            median: 30_000.0,
            sigma: 0.6,
        },
        EarningsShape {
            zero_share: 0.25,
            median: 18_000.0,
            sigma: 0.7,
        },
        EarningsShape {
            zero_share: 0.03,
            median: 32_000.0,
            sigma: 0.6,
        },
        EarningsShape {
            zero_share: 0.10,
            median: 25_000.0,
            sigma: 0.6,
        },
    ]
}

pub fn maps_from_shapes(shapes: &[EarningsShape; 4], knots: usize) -> Result<RoleMaps> {
    Ok(RoleMaps::new(
        shapes[0].to_map(knots)?,
        shapes[1].to_map(knots)?,
        shapes[2].to_map(knots)?,
        shapes[3].to_map(knots)?,
    ))
}

pub fn default_maps() -> RoleMaps {
    maps_from_shapes(&default_shapes(), 2000).expect("default shapes are valid")
}

/// How strongly the auxiliary proxies track latent skill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyLoadings {
    /// Correlation of the education signal with skill, in [0, 1].
    pub education: f64,
    /// Correlation of the occupation signal with skill, in [0, 1].
    pub occupation: f64,
    /// Probability that a person's occupation is recorded as missing.
    pub occupation_missing: f64,
}

impl Default for ProxyLoadings {
    fn default() -> Self {
        ProxyLoadings {
            education: 0.5,
            occupation: 0.5,
            occupation_missing: 0.05,
        }
    }
}

impl ProxyLoadings {
    pub const NOISE: ProxyLoadings = ProxyLoadings {
        education: 0.0,
        occupation: 0.0,
        occupation_missing: 0.05,
    };

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if ok(self.education) && ok(self.occupation) && ok(self.occupation_missing) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("proxy loadings outside [0, 1]: {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Planted parameters per child cohort.
    pub chain: Vec<(i32, ModelParams)>,
    /// Families per cohort.
    pub families: usize,
    pub seed: u64,
    pub proxies: ProxyLoadings,
}

/// splitmix64 finalizer.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Simulation seed of one cohort.
pub fn cohort_seed(seed: u64, cohort: i32) -> u64 {
    mix_seed(seed, cohort as u64)
}

fn cents(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

struct ProxyDraws {
    rng: ChaCha8Rng,
    loadings: ProxyLoadings,
}

impl ProxyDraws {
    fn signal(&mut self, skill: f64, loading: f64) -> f64 {
        let e: f64 = self.rng.sample(StandardNormal);
        loading * skill + (1.0 - loading * loading).sqrt() * e
    }

    fn education(&mut self, skill: f64) -> f64 {
        let s = self.signal(skill, self.loadings.education);
        ((12.0 + 2.5 * s).max(0.0) * 10.0).round() / 10.0
    }

    fn occupation(&mut self, skill: f64) -> u8 {
        let s = self.signal(skill, self.loadings.occupation);
        let missing = self.rng.random::<f64>() < self.loadings.occupation_missing;
        if missing {
            OCC_MISSING
        } else {
            ((norm_cdf(s) * 10.0).floor() as u8).min(9)
        }
    }
}

fn push_family(out: &mut Vec<PersonRecord>, pop: &SimPopulation, i: usize, cohort: i32, proxies: &mut ProxyDraws) {
    let father_id = format!("c{cohort}-{i}-f");
    let mother_id = format!("c{cohort}-{i}-m");
    let specs = [
        (
            Role::Father,
            father_id.clone(),
            cohort - FATHER_AGE_GAP,
            Sex::Male,
            cohort + 17,
        ),
        (
            Role::Mother,
            mother_id.clone(),
            cohort - MOTHER_AGE_GAP,
            Sex::Female,
            cohort + 17,
        ),
        (Role::Son, format!("c{cohort}-{i}-s"), cohort, Sex::Male, cohort + 35),
        (
            Role::Daughter,
            format!("c{cohort}-{i}-d"),
            cohort,
            Sex::Female,
            cohort + 35,
        ),
    ];
    for (role, id, birth, sex, first_year) in specs {
        let mut p = PersonRecord::new(id, birth, Some(sex));
        let y = cents(pop.earnings(role)[i]);
        for year in first_year..first_year + 3 {
            p.incomes.insert(year, y);
        }
        let skill = pop.skills(role)[i];
        p.education_years = Some(proxies.education(skill));
        p.occupation_group = Some(proxies.occupation(skill));
        if matches!(role, Role::Son | Role::Daughter) {
            p.father_id = Some(father_id.clone());
            p.mother_id = Some(mother_id.clone());
        }
        out.push(p);
    }
}

/// Builds the synthetic population in memory.
pub fn synthesize(spec: &SynthSpec, maps: &dyn Fn(i32) -> Result<RoleMaps>) -> Result<Population> {
    spec.proxies.validate()?;
    if spec.families == 0 || spec.chain.is_empty() {
        return Err(Error::Invalid(
            "synthetic spec needs at least one cohort and family".into(),
        ));
    }
    let mut persons = Vec::with_capacity(4 * spec.families * spec.chain.len());
    let mut years = Vec::new();
    for (cohort, params) in &spec.chain {
        let seed = cohort_seed(spec.seed, *cohort);
        let pop = simulate_population(params, &maps(*cohort)?, spec.families, seed)?;
        let mut proxies = ProxyDraws {
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5052_4f58)),
            loadings: spec.proxies,
        };
        for i in 0..spec.families {
            push_family(&mut persons, &pop, i, *cohort, &mut proxies);
        }
        years.extend((cohort + 17..cohort + 20).chain(cohort + 35..cohort + 38));
    }
    years.sort_unstable();
    years.dedup();
    Population::new(persons, years)
}

/// Path of the ground-truth file written next to `out`.
pub fn truth_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".truth.tsv");
    out.with_file_name(name)
}

/// Writes the microdata CSV and its ground-truth sidecar; returns the
/// sidecar path.
pub fn generate_synthetic(spec: &SynthSpec, maps: &dyn Fn(i32) -> Result<RoleMaps>, out: &Path) -> Result<PathBuf> {
    let pop = synthesize(spec, maps)?;
    crate::population::write_microdata(&pop, out, &Default::default())?;
    let truth = truth_path(out);
    write_truth(&truth, spec)?;
    Ok(truth)
}

/// Sidecar columns: cohort, the five free parameters, families, seed and
/// proxy loadings. Readable with `calibration::read_params_tsv`.
pub fn write_truth(path: &Path, spec: &SynthSpec) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "cohort\tpsi\tkappa\talpha\tphi_m\tphi_d\tfamilies\tseed\teducation_loading\toccupation_loading\toccupation_missing"
    )
    .map_err(io)?;
    for (c, p) in &spec.chain {
        writeln!(
            w,
            "{c}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.psi,
            p.kappa,
            p.alpha,
            p.phi_m,
            p.phi_d,
            spec.families,
            spec.seed,
            spec.proxies.education,
            spec.proxies.occupation,
            spec.proxies.occupation_missing
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
