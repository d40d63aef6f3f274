//! Lubotsky-Wittenberg aggregation of several noisy proxies of one latent
//! status.
//!
//! With proxies `x_j` (column 0 is the anchor, parent log income) and an
//! outcome `y`:
//!
//! * `ρ_j = cov(y, x_j) / cov(y, x_0)`, so `ρ_0 = 1`;
//! * `b` are the multiple-OLS coefficients of `y` on all proxies;
//! * `β_LW = Σ ρ_j b_j`;
//! * the status index is `(1/β_LW) Σ b_j x_j`, then percentile-ranked.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{ira, EstimateRecord};
use crate::population::{PairRecord, Population, Sex, OCC_MISSING};
use crate::ranking::{percentile_ranks, PairSpec, ParentSide};
use crate::stats::{self, KahanSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyBlock {
    Income,
    Education,
    Occupation,
    Other,
}

impl ProxyBlock {
    pub fn name(self) -> &'static str {
        match self {
            ProxyBlock::Income => "income",
            ProxyBlock::Education => "education",
            ProxyBlock::Occupation => "occupation",
            ProxyBlock::Other => "other",
        }
    }
}

/// Log income with zero earners set to `ln(threshold / 100)`.
pub fn token_log(income: f64, threshold: f64) -> f64 {
    if income > 0.0 {
        income.ln()
    } else {
        (threshold / 100.0).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ProxyColumn {
    label: String,
    block: ProxyBlock,
    values: Vec<f64>,
}

/// Proxy columns for one set of individuals; column 0 is the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMatrix {
    columns: Vec<ProxyColumn>,
    /// Occupation code used as the omitted reference level, if any.
    occupation_reference: Option<u8>,
}

impl ProxyMatrix {
    pub fn new(anchor_label: &str, anchor: Vec<f64>) -> Result<Self> {
        let mut m = ProxyMatrix {
            columns: Vec::new(),
            occupation_reference: None,
        };
        m.push_column(anchor_label, ProxyBlock::Income, anchor)?;
        Ok(m)
    }

    pub fn push_column(&mut self, label: &str, block: ProxyBlock, values: Vec<f64>) -> Result<()> {
        if let Some(first) = self.columns.first() {
            if values.len() != first.values.len() {
                return Err(Error::Invalid(format!(
                    "proxy {label} has {} rows, expected {}",
                    values.len(),
                    first.values.len()
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("proxy {label}")));
        }
        if self.columns.iter().any(|c| c.label == label) {
            return Err(Error::Invalid(format!("duplicate proxy label {label}")));
        }
        self.columns.push(ProxyColumn {
            label: label.to_string(),
            block,
            values,
        });
        Ok(())
    }

    /// Adds indicators for occupation codes 0..=10 (`None` counts as
    /// 10). The missing category is the omitted reference; when nobody is
    /// missing, the most populous group is. Codes nobody holds get no
    /// column.
    pub fn push_occupation(&mut self, groups: &[Option<u8>]) -> Result<()> {
        let mut counts = [0usize; OCC_MISSING as usize + 1];
        let codes: Vec<u8> = groups.iter().map(|g| g.unwrap_or(OCC_MISSING)).collect();
        for &c in &codes {
            if c > OCC_MISSING {
                return Err(Error::Invalid(format!("occupation code {c} outside 0..=10")));
            }
            counts[c as usize] += 1;
        }
        let reference = if counts[OCC_MISSING as usize] > 0 {
            OCC_MISSING
        } else {
            // largest group, smallest code on ties
            (0..=OCC_MISSING).rev().max_by_key(|&c| counts[c as usize]).unwrap()
        };
        for code in 0..=OCC_MISSING {
            if code == reference || counts[code as usize] == 0 {
                continue;
            }
            let col = codes.iter().map(|&c| if c == code { 1.0 } else { 0.0 }).collect();
            self.push_column(&format!("occ_{code}"), ProxyBlock::Occupation, col)?;
        }
        self.occupation_reference = Some(reference);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.columns[0].values.len()
    }

    pub fn n_proxies(&self) -> usize {
        self.columns.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.label.clone()).collect()
    }

    pub fn blocks(&self) -> Vec<ProxyBlock> {
        self.columns.iter().map(|c| c.block).collect()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j].values
    }

    pub fn occupation_reference(&self) -> Option<u8> {
        self.occupation_reference
    }

    /// Replaces column `j` by `scale * x + shift`.
    pub fn rescale_column(&mut self, j: usize, scale: f64, shift: f64) {
        for v in &mut self.columns[j].values {
            *v = scale * *v + shift;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LWFit {
    pub labels: Vec<String>,
    pub blocks: Vec<ProxyBlock>,
    pub rho: Vec<f64>,
    pub b: Vec<f64>,
    pub beta_lw: f64,
    pub index_ranks: Vec<f64>,
}

/// ρ and multiple-OLS coefficients of `outcome` on the proxies.
pub fn lw_weights(outcome: &[f64], proxies: &ProxyMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if outcome.len() != proxies.rows() {
        return Err(Error::Invalid(format!(
            "outcome has {} rows, proxies {}",
            outcome.len(),
            proxies.rows()
        )));
    }
    if outcome.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lw outcome".into()));
    }
    let anchor = proxies.column(0);
    let c0 = stats::covariance(outcome, anchor);
    let scale = (stats::variance(outcome) * stats::variance(anchor)).sqrt();
    if !(c0.abs() > 1e-12 * scale) {
        return Err(Error::UninformativeAnchor);
    }
    let rho: Vec<f64> = (0..proxies.n_proxies())
        .map(|j| stats::covariance(outcome, proxies.column(j)) / c0)
        .collect();
    let cols: Vec<&[f64]> = (0..proxies.n_proxies()).map(|j| proxies.column(j)).collect();
    let fit = stats::fit_multiple(&cols, &proxies.labels(), outcome)?;
    Ok((rho, fit.coefficients))
}

/// `β_LW = Σ ρ_j b_j`.
pub fn lw_beta(rho: &[f64], b: &[f64]) -> f64 {
    let mut s = KahanSum::new();
    for (r, b) in rho.iter().zip(b) {
        s.add(r * b);
    }
    s.total()
}

fn index_values(beta_lw: f64, b: &[f64], proxies: &ProxyMatrix) -> Result<Vec<f64>> {
    if beta_lw == 0.0 || !beta_lw.is_finite() {
        return Err(Error::IndexUndefined);
    }
    Ok((0..proxies.rows())
        .map(|i| {
            let mut s = KahanSum::new();
            for (j, bj) in b.iter().enumerate() {
                s.add(proxies.column(j)[i] * bj);
            }
            s.total() / beta_lw
        })
        .collect())
}

/// Percentile ranks of the status index `(1/β_LW) Σ b_j x_j`.
pub fn lw_index_ranks(fit: &LWFit, proxies: &ProxyMatrix) -> Result<Vec<f64>> {
    percentile_ranks(&index_values(fit.beta_lw, &fit.b, proxies)?)
}

/// Weights, aggregate coefficient and index ranks in one pass.
pub fn lw_fit(outcome: &[f64], proxies: &ProxyMatrix) -> Result<LWFit> {
    let (rho, b) = lw_weights(outcome, proxies)?;
    let beta_lw = lw_beta(&rho, &b);
    let index_ranks = percentile_ranks(&index_values(beta_lw, &b, proxies)?)?;
    Ok(LWFit {
        labels: proxies.labels(),
        blocks: proxies.blocks(),
        rho,
        b,
        beta_lw,
        index_ranks,
    })
}

/// Child income ranks regressed on parental index ranks.
pub fn lw_rank_association(
    child_ranks: &[f64],
    index_ranks: &[f64],
    cohort: i32,
    label: &str,
) -> Result<EstimateRecord> {
    ira(child_ranks, index_ranks, cohort, label)
}

/// Parent rank regressed on child rank.
pub fn flip_regression(parent_ranks: &[f64], child_ranks: &[f64], cohort: i32, label: &str) -> Result<EstimateRecord> {
    ira(parent_ranks, child_ranks, cohort, label)
}

/// `ρ_j b_j / β_LW` summed within each proxy block.
pub fn proxy_contributions(fit: &LWFit) -> Result<BTreeMap<ProxyBlock, f64>> {
    if fit.beta_lw == 0.0 || !fit.beta_lw.is_finite() {
        return Err(Error::IndexUndefined);
    }
    let mut sums: BTreeMap<ProxyBlock, KahanSum> = BTreeMap::new();
    for ((r, b), block) in fit.rho.iter().zip(&fit.b).zip(&fit.blocks) {
        sums.entry(*block).or_default().add(r * b / fit.beta_lw);
    }
    Ok(sums.into_iter().map(|(k, v)| (k, v.total())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LwOptions {
    /// Participation constant; zero earners get `ln(threshold / 100)`.
    pub token_threshold: f64,
    pub education: bool,
    pub occupation: bool,
}

impl Default for LwOptions {
    fn default() -> Self {
        LwOptions {
            token_threshold: 10_000.0,
            education: true,
            occupation: true,
        }
    }
}

/// Which pair type to analyze and which side is proxied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LwSpec {
    pub child_sex: Sex,
    pub parent: ParentSide,
    /// Proxy the child instead of the parent; the parent's log income is
    /// then the outcome and parent ranks are regressed on child index
    /// ranks.
    pub flipped: bool,
}

impl LwSpec {
    pub const SON_FATHER: LwSpec = LwSpec {
        child_sex: Sex::Male,
        parent: ParentSide::Father,
        flipped: false,
    };
    pub const DAUGHTER_FATHER: LwSpec = LwSpec {
        child_sex: Sex::Female,
        parent: ParentSide::Father,
        flipped: true,
    };

    pub fn pair_spec(&self) -> PairSpec {
        PairSpec {
            child_sex: Some(self.child_sex),
            parent: self.parent,
        }
    }

    pub fn label(&self) -> String {
        self.pair_spec().label()
    }

    pub fn direction(&self) -> &'static str {
        if self.flipped {
            "flipped"
        } else {
            "forward"
        }
    }

    /// Parses `son-father`, or `daughter-father:flipped`.
    pub fn parse(s: &str) -> Option<LwSpec> {
        let (label, flipped) = match s.split_once(':') {
            Some((l, "flipped")) => (l, true),
            Some((l, "forward")) => (l, false),
            Some(_) => return None,
            None => (s, false),
        };
        let spec = PairSpec::parse(label)?;
        if spec.parent == ParentSide::Joint {
            return None;
        }
        Some(LwSpec {
            child_sex: spec.child_sex?,
            parent: spec.parent,
            flipped,
        })
    }

    pub fn key(&self) -> String {
        if self.flipped {
            format!("{}:flipped", self.label())
        } else {
            self.label()
        }
    }
}

/// LW results for one cohort and pair type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LwRecord {
    pub spec_label: String,
    pub direction: String,
    pub fit: LWFit,
    /// Rank association using the index ranks.
    pub estimate: EstimateRecord,
    /// The same regression with plain income ranks.
    pub ira: EstimateRecord,
    pub contributions: BTreeMap<ProxyBlock, f64>,
    /// Pairs dropped for a missing education record.
    pub dropped_missing_education: usize,
}

/// Runs LW on the pairs of one cohort.
pub fn lw_cohort(
    pop: &Population,
    pairs: &[&PairRecord],
    spec: LwSpec,
    options: &LwOptions,
    cohort: i32,
) -> Result<LwRecord> {
    let persons = pop.persons();
    let mut dropped = 0;
    let mut rows = Vec::new();
    for p in pairs {
        if p.child_sex != Some(spec.child_sex) {
            continue;
        }
        let (parent_idx, parent_income) = match spec.parent {
            ParentSide::Father => (p.father, p.father_income),
            ParentSide::Mother => (p.mother, p.mother_income),
            ParentSide::Joint => return Err(Error::Invalid("LW needs a single parent".into())),
        };
        let (Some(parent_idx), Some(parent_income)) = (parent_idx, parent_income) else {
            continue;
        };
        let proxied = if spec.flipped { p.child } else { parent_idx };
        if options.education && persons[proxied].education_years.is_none() {
            dropped += 1;
            continue;
        }
        rows.push((p.child_income, parent_income, proxied));
    }
    let label = spec.label();
    let t = options.token_threshold;
    let (proxied_income, outcome_income): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .map(|&(c, par, _)| if spec.flipped { (c, par) } else { (par, c) })
        .unzip();
    let mut proxies = ProxyMatrix::new("log_income", proxied_income.iter().map(|&v| token_log(v, t)).collect())?;
    if options.education {
        let edu = rows
            .iter()
            .map(|r| persons[r.2].education_years.expect("filtered above"))
            .collect();
        proxies.push_column("education", ProxyBlock::Education, edu)?;
    }
    if options.occupation {
        let occ: Vec<Option<u8>> = rows.iter().map(|r| persons[r.2].occupation_group).collect();
        proxies.push_occupation(&occ)?;
    }
    let outcome: Vec<f64> = outcome_income.iter().map(|&v| token_log(v, t)).collect();
    let fit = lw_fit(&outcome, &proxies)?;
    let outcome_ranks = percentile_ranks(&outcome_income)?;
    let income_ranks = percentile_ranks(&proxied_income)?;
    // forward: outcome is the child; flipped: outcome is the parent
    let estimate = lw_rank_association(&outcome_ranks, &fit.index_ranks, cohort, &label)?;
    let ira_est = if spec.flipped {
        flip_regression(&outcome_ranks, &income_ranks, cohort, &label)?
    } else {
        ira(&outcome_ranks, &income_ranks, cohort, &label)?
    };
    let contributions = proxy_contributions(&fit)?;
    Ok(LwRecord {
        spec_label: label,
        direction: spec.direction().to_string(),
        fit,
        estimate,
        ira: ira_est,
        contributions,
        dropped_missing_education: dropped,
    })
}

/// Columns: cohort, spec, direction, n, beta_lw, slope, se, ira_slope and
/// one contribution column per proxy block.
pub fn write_lw_tsv(path: &Path, records: &[LwRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "cohort\tspec\tdirection\tn\tbeta_lw\tslope\tse\tira_slope\tcontrib_income\tcontrib_education\tcontrib_occupation"
    )
    .map_err(io)?;
    for r in records {
        let c = |b: ProxyBlock| r.contributions.get(&b).map_or(String::new(), |v| v.to_string());
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.estimate.cohort,
            r.spec_label,
            r.direction,
            r.estimate.n,
            r.fit.beta_lw,
            r.estimate.slope,
            r.estimate.se_slope,
            r.ira.slope,
            c(ProxyBlock::Income),
            c(ProxyBlock::Education),
            c(ProxyBlock::Occupation)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
