//! Regression-based mobility estimators and descriptive statistics.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{PairRecord, PersonRecord, Sex, OCC_MISSING};
use crate::ranking::{PairSpec, ParentSide, RankedPair};
use crate::stats::{self, LineFit};

/// One cohort-level regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub spec_label: String,
    pub cohort: i32,
    pub slope: f64,
    pub intercept: f64,
    pub se_slope: f64,
    pub n: usize,
}

impl EstimateRecord {
    fn from_fit(fit: LineFit, cohort: i32, spec_label: &str) -> Self {
        EstimateRecord {
            spec_label: spec_label.to_string(),
            cohort,
            slope: fit.slope,
            intercept: fit.intercept,
            se_slope: fit.se_slope,
            n: fit.n,
        }
    }
}

/// Rank-rank slope: OLS of child rank on parent rank.
pub fn ira(child_ranks: &[f64], parent_ranks: &[f64], cohort: i32, spec_label: &str) -> Result<EstimateRecord> {
    let fit = stats::fit_line(parent_ranks, child_ranks, &format!("{spec_label} {cohort}"))?;
    Ok(EstimateRecord::from_fit(fit, cohort, spec_label))
}

/// `ira` over the rows of one cohort.
pub fn ira_rows(rows: &[&RankedPair], cohort: i32, spec_label: &str) -> Result<EstimateRecord> {
    let c: Vec<f64> = rows.iter().map(|r| r.child_rank).collect();
    let p: Vec<f64> = rows.iter().map(|r| r.parent_rank).collect();
    ira(&c, &p, cohort, spec_label)
}

/// Log-log elasticity with zero incomes excluded.
pub fn ige(pairs: &[&PairRecord], spec: PairSpec, cohort: i32) -> Result<EstimateRecord> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs
        .iter()
        .filter(|p| spec.matches(p))
        .filter_map(|p| {
            let parent = spec.parent_income(p)?;
            (parent > 0.0 && p.child_income > 0.0).then(|| (parent.ln(), p.child_income.ln()))
        })
        .unzip();
    let label = spec.label();
    if x.len() < 2 {
        return Err(Error::TooFewObservations {
            what: format!("ige {label} {cohort} (positive-income pairs)"),
            needed: 2,
            got: x.len(),
        });
    }
    let fit = stats::fit_line(&x, &y, &format!("ige {label} {cohort}"))?;
    Ok(EstimateRecord::from_fit(fit, cohort, &label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipationScope {
    Child,
    /// The given parental income (joint, father, or mother).
    Parent(ParentSide),
    Both(ParentSide),
}

/// Keeps pairs whose scoped incomes strictly exceed `threshold`. A pair
/// lacking the scoped parental income is dropped. Ranks must be
/// recomputed on the result.
pub fn participation_filter(pairs: &[PairRecord], threshold: f64, scope: ParticipationScope) -> Vec<PairRecord> {
    let parent_ok = |p: &PairRecord, side: ParentSide| {
        let v = match side {
            ParentSide::Joint => Some(p.parent_income),
            ParentSide::Father => p.father_income,
            ParentSide::Mother => p.mother_income,
        };
        v.is_some_and(|v| v > threshold)
    };
    pairs
        .iter()
        .filter(|p| match scope {
            ParticipationScope::Child => p.child_income > threshold,
            ParticipationScope::Parent(side) => parent_ok(p, side),
            ParticipationScope::Both(side) => p.child_income > threshold && parent_ok(p, side),
        })
        .cloned()
        .collect()
}

/// Linear trend through cohort-level slopes, reported ×100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRecord {
    pub spec_label: String,
    pub start: i32,
    pub end: i32,
    pub slope_x100: f64,
    pub se_x100: f64,
    pub p_equal_trends: Option<f64>,
}

fn in_range<'a>(estimates: &'a [EstimateRecord], range: &RangeInclusive<i32>) -> Vec<&'a EstimateRecord> {
    estimates.iter().filter(|e| range.contains(&e.cohort)).collect()
}

/// OLS of slope on cohort year within `range`, HC1 standard error.
pub fn trend_fit(estimates: &[EstimateRecord], range: RangeInclusive<i32>) -> Result<TrendRecord> {
    let pts = in_range(estimates, &range);
    let label = pts.first().map_or_else(String::new, |e| e.spec_label.clone());
    if pts.len() < 2 {
        return Err(Error::TooFewObservations {
            what: format!("trend {label}"),
            needed: 2,
            got: pts.len(),
        });
    }
    let x: Vec<f64> = pts.iter().map(|e| e.cohort as f64).collect();
    let y: Vec<f64> = pts.iter().map(|e| e.slope).collect();
    let fit = stats::fit_line(&x, &y, &format!("trend {label}"))?;
    Ok(TrendRecord {
        spec_label: label,
        start: *range.start(),
        end: *range.end(),
        slope_x100: fit.slope * 100.0,
        se_x100: fit.se_slope * 100.0,
        p_equal_trends: None,
    })
}

/// Trend of a plain `(year, value)` series, ×100.
pub fn series_trend(series: &BTreeMap<i32, f64>, range: RangeInclusive<i32>, label: &str) -> Result<TrendRecord> {
    let est: Vec<EstimateRecord> = series
        .iter()
        .map(|(&cohort, &slope)| EstimateRecord {
            spec_label: label.to_string(),
            cohort,
            slope,
            intercept: 0.0,
            se_slope: 0.0,
            n: 0,
        })
        .collect();
    trend_fit(&est, range)
}

/// Result of testing two trends for equality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendComparison {
    pub first: TrendRecord,
    pub second: TrendRecord,
    /// (second − first) trend, ×100.
    pub difference_x100: f64,
    pub se_difference_x100: f64,
    pub p_equal_trends: f64,
}

/// Stacks two estimate series and regresses slope on
/// `[1, t, D, D·t]` (D = second-series indicator, t centered at the range
/// start); the HC1 t-test on the interaction gives the p-value.
pub fn trend_equality(
    first: &[EstimateRecord],
    second: &[EstimateRecord],
    range: RangeInclusive<i32>,
) -> Result<TrendComparison> {
    let a = in_range(first, &range);
    let b = in_range(second, &range);
    let t0 = *range.start() as f64;
    let mut design = Vec::with_capacity(a.len() + b.len());
    let mut y = Vec::with_capacity(a.len() + b.len());
    for (d, pts) in [(0.0, &a), (1.0, &b)] {
        for e in pts.iter() {
            let t = e.cohort as f64 - t0;
            design.push(vec![1.0, t, d, d * t]);
            y.push(e.slope);
        }
    }
    let (beta, cov) = stats::ols_hc1(&design, &y)?;
    let se = cov[(3, 3)].max(0.0).sqrt();
    let df = (y.len() - 4) as f64;
    let p = if se > 0.0 {
        stats::two_sided_p(beta[3] / se, df)
    } else if beta[3].abs() < 1e-15 {
        1.0
    } else {
        0.0
    };
    let mut first_t = trend_fit(first, range.clone())?;
    let mut second_t = trend_fit(second, range)?;
    first_t.p_equal_trends = Some(p);
    second_t.p_equal_trends = Some(p);
    Ok(TrendComparison {
        first: first_t,
        second: second_t,
        difference_x100: beta[3] * 100.0,
        se_difference_x100: se * 100.0,
        p_equal_trends: p,
    })
}

/// Duncan dissimilarity `½ Σ |f_o − m_o|` between two share vectors.
pub fn duncan_index(female_shares: &[f64], male_shares: &[f64]) -> Result<f64> {
    if female_shares.len() != male_shares.len() {
        return Err(Error::ShareLengthMismatch(female_shares.len(), male_shares.len()));
    }
    for (gender, shares) in [("female", female_shares), ("male", male_shares)] {
        let s = stats::sum(shares.iter().copied());
        if (s - 1.0).abs() > 1e-9 || shares.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::SharesNotNormalized {
                gender: gender.to_string(),
                sum: s,
            });
        }
    }
    Ok(0.5 * stats::sum(female_shares.iter().zip(male_shares).map(|(f, m)| (f - m).abs())))
}

/// Occupation shares over groups `0..10`, ignoring the missing code.
/// Returns `None` when nobody has an observed occupation.
pub fn occupation_shares<'a>(persons: impl IntoIterator<Item = &'a PersonRecord>) -> Option<Vec<f64>> {
    let mut counts = [0usize; OCC_MISSING as usize];
    for p in persons {
        if let Some(g) = p.occupation_group.filter(|g| *g < OCC_MISSING) {
            counts[g as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Duncan index by year, with values normalized by the base year.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegregationSeries {
    pub values: BTreeMap<i32, f64>,
    pub base_year: i32,
    pub normalized: BTreeMap<i32, f64>,
}

impl SegregationSeries {
    pub fn new(values: BTreeMap<i32, f64>, base_year: i32) -> Result<Self> {
        let base = *values.get(&base_year).ok_or(Error::MissingYear(base_year))?;
        if base == 0.0 {
            return Err(Error::Invalid(format!(
                "segregation index is zero in base year {base_year}"
            )));
        }
        let normalized = values.iter().map(|(&y, &d)| (y, d / base)).collect();
        Ok(SegregationSeries {
            values,
            base_year,
            normalized,
        })
    }
}

/// Full-time employment rates by gender with a definitional break.
#[derive(Debug, Clone, PartialEq)]
pub struct FullTimeSeries {
    pub rates: BTreeMap<Sex, BTreeMap<i32, f64>>,
    pub break_year: i32,
}

impl FullTimeSeries {
    pub fn corrected(&self, fit_window: RangeInclusive<i32>) -> Result<FullTimeSeries> {
        let mut rates = BTreeMap::new();
        for (&sex, series) in &self.rates {
            rates.insert(sex, fulltime_correction(series, self.break_year, fit_window.clone())?);
        }
        Ok(FullTimeSeries {
            rates,
            break_year: self.break_year,
        })
    }
}

/// Splices a series across a break: the break year is replaced by the
/// linear fit of the `fit_window` rates extrapolated to it, and later
/// years are rescaled so their distance from 1 shrinks by the ratio of
/// fitted to observed non-full-time shares at the break.
pub fn fulltime_correction(
    series: &BTreeMap<i32, f64>,
    break_year: i32,
    fit_window: RangeInclusive<i32>,
) -> Result<BTreeMap<i32, f64>> {
    if *fit_window.end() >= break_year {
        return Err(Error::Invalid(format!(
            "fit window must precede the break year {break_year}"
        )));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for year in fit_window {
        let v = *series.get(&year).ok_or(Error::MissingYear(year))?;
        x.push(year as f64);
        y.push(v);
    }
    let fit = stats::fit_line(&x, &y, "pre-break full-time rates")?;
    let fitted = fit.intercept + fit.slope * break_year as f64;
    let observed = *series.get(&break_year).ok_or(Error::MissingYear(break_year))?;
    if observed == 1.0 {
        return Err(Error::DegenerateBreakLevel);
    }
    let ratio = (1.0 - fitted) / (1.0 - observed);
    Ok(series
        .iter()
        .map(|(&t, &r)| {
            let v = if t < break_year {
                r
            } else if t == break_year {
                fitted
            } else {
                1.0 - (1.0 - r) * ratio
            };
            (t, v)
        })
        .collect())
}

/// Occupation-group counts in two cohort windows.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationCell {
    pub group: u8,
    pub count_before: usize,
    pub count_after: usize,
    pub mean_education: Option<f64>,
}

/// One plot-ready row of the composition-shift analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftRow {
    pub group: u8,
    pub share_before: f64,
    pub share_after: f64,
    pub delta_share: f64,
    pub mean_education: f64,
    /// Regression weight: mean group size over the two windows.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupationalShift {
    pub rows: Vec<ShiftRow>,
    /// Size-weighted OLS slope of Δshare on mean education.
    pub slope: f64,
    pub intercept: f64,
    pub dropped_groups: Vec<u8>,
}

pub fn occupational_shift(cells: &[OccupationCell]) -> Result<OccupationalShift> {
    let total_before: usize = cells.iter().map(|c| c.count_before).sum();
    let total_after: usize = cells.iter().map(|c| c.count_after).sum();
    if total_before == 0 || total_after == 0 {
        return Err(Error::Invalid("an occupation window is empty".into()));
    }
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for c in cells {
        let edu = match c.mean_education {
            Some(e) if c.count_before + c.count_after > 0 => e,
            _ => {
                dropped.push(c.group);
                continue;
            }
        };
        let before = c.count_before as f64 / total_before as f64;
        let after = c.count_after as f64 / total_after as f64;
        rows.push(ShiftRow {
            group: c.group,
            share_before: before,
            share_after: after,
            delta_share: after - before,
            mean_education: edu,
            size: 0.5 * (c.count_before + c.count_after) as f64,
        });
    }
    if !dropped.is_empty() {
        log::info!("occupational shift: dropped empty groups {dropped:?}");
    }
    let (slope, intercept) = shift_regression(&rows)?;
    Ok(OccupationalShift {
        rows,
        slope,
        intercept,
        dropped_groups: dropped,
    })
}

/// Size-weighted OLS of Δshare on mean education.
pub fn shift_regression(rows: &[ShiftRow]) -> Result<(f64, f64)> {
    let x: Vec<f64> = rows.iter().map(|r| r.mean_education).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.delta_share).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.size).collect();
    if rows.len() < 2 {
        return Err(Error::DegenerateRegressor(format!(
            "occupational shift ({} group)",
            rows.len()
        )));
    }
    let fit = stats::fit_line_weighted(&x, &y, Some(&w), "occupational shift")?;
    Ok((fit.slope, fit.intercept))
}

/// Counts occupation groups of two person sets, with mean education
/// taken from the later set.
pub fn occupation_cells<'a>(
    before: impl IntoIterator<Item = &'a PersonRecord>,
    after: impl IntoIterator<Item = &'a PersonRecord>,
) -> Vec<OccupationCell> {
    let n = OCC_MISSING as usize;
    let mut cb = vec![0usize; n];
    let mut ca = vec![0usize; n];
    let mut edu_sum = vec![0.0; n];
    let mut edu_n = vec![0usize; n];
    for p in before {
        if let Some(g) = p.occupation_group.filter(|g| *g < OCC_MISSING) {
            cb[g as usize] += 1;
        }
    }
    for p in after {
        if let Some(g) = p.occupation_group.filter(|g| *g < OCC_MISSING) {
            ca[g as usize] += 1;
            if let Some(e) = p.education_years {
                edu_sum[g as usize] += e;
                edu_n[g as usize] += 1;
            }
        }
    }
    (0..n)
        .map(|g| OccupationCell {
            group: g as u8,
            count_before: cb[g],
            count_after: ca[g],
            mean_education: (edu_n[g] > 0).then(|| edu_sum[g] / edu_n[g] as f64),
        })
        .collect()
}

fn tsv_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes `estimator spec_label cohort slope intercept se n` rows.
pub fn write_estimates_tsv(path: &Path, rows: &[(String, EstimateRecord)]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "estimator\tspec_label\tcohort\tslope\tintercept\tse\tn").map_err(io)?;
    for (estimator, e) in rows {
        writeln!(
            w,
            "{estimator}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.spec_label, e.cohort, e.slope, e.intercept, e.se_slope, e.n
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_estimates_tsv(path: &Path) -> Result<Vec<(String, EstimateRecord)>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    #[derive(Deserialize)]
    struct Row {
        estimator: String,
        spec_label: String,
        cohort: i32,
        slope: f64,
        intercept: f64,
        se: f64,
        n: usize,
    }
    let mut out = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        out.push((
            row.estimator,
            EstimateRecord {
                spec_label: row.spec_label,
                cohort: row.cohort,
                slope: row.slope,
                intercept: row.intercept,
                se_slope: row.se,
                n: row.n,
            },
        ));
    }
    Ok(out)
}

/// Writes `estimator spec_label start end slope_x100 se_x100 p_equal_trends`.
pub fn write_trends_tsv(path: &Path, rows: &[(String, TrendRecord)]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "estimator\tspec_label\tstart\tend\tslope_x100\tse_x100\tp_equal_trends"
    )
    .map_err(io)?;
    for (estimator, t) in rows {
        writeln!(
            w,
            "{estimator}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.spec_label,
            t.start,
            t.end,
            t.slope_x100,
            t.se_x100,
            opt(t.p_equal_trends)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
