//! One-at-a-time counterfactual attribution of simulated rank-association
//! trends to model parameters.
//!
//! `β̃_t` is the slope of pooled child rank (sons and daughters ranked
//! together) on the rank of joint parental earnings in a population
//! simulated at cohort `t`'s parameters. `β̃^b_t` repeats this with
//! parameter `b` pinned to its baseline-cohort value. All runs share one
//! set of base draws, so factual and counterfactual series differ only
//! through the pinned parameter. The contribution of `b` is
//! `trend(β̃) − trend(β̃^b)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{series_trend, trend_fit, EstimateRecord};
use crate::model::{simulate_with_draws, BaseDraws, ModelParams, Param, Role, RoleMaps, SimPopulation};
use crate::ranking::percentile_ranks;
use crate::stats;

pub type Chain = [(i32, ModelParams)];

/// Pooled child rank on joint parental rank.
pub fn pooled_beta_tilde(pop: &SimPopulation) -> Result<f64> {
    let n = pop.len();
    let mut children = Vec::with_capacity(2 * n);
    children.extend_from_slice(pop.earnings(Role::Son));
    children.extend_from_slice(pop.earnings(Role::Daughter));
    let (child_ranks, parent_ranks) =
        rayon::join(|| percentile_ranks(&children), || percentile_ranks(&pop.parent_joint));
    let (child_ranks, parent_ranks) = (child_ranks?, parent_ranks?);
    let mut x = Vec::with_capacity(2 * n);
    x.extend_from_slice(&parent_ranks);
    x.extend_from_slice(&parent_ranks);
    Ok(stats::fit_line(&x, &child_ranks, "pooled child on joint parental rank")?.slope)
}

fn beta_tilde_series(
    chain: &Chain,
    maps: &(dyn Fn(i32) -> Result<RoleMaps> + Sync),
    draws: &Arc<BaseDraws>,
) -> Result<BTreeMap<i32, f64>> {
    chain
        .iter()
        .map(|(cohort, params)| {
            let pop = simulate_with_draws(params, &maps(*cohort)?, draws)?;
            Ok((*cohort, pooled_beta_tilde(&pop)?))
        })
        .collect()
}

/// β̃ for every cohort of the chain, one population of `n` families per
/// cohort, all from the base draws of `seed`.
pub fn simulated_trend(
    chain: &Chain,
    maps: &(dyn Fn(i32) -> Result<RoleMaps> + Sync),
    n: usize,
    seed: u64,
) -> Result<BTreeMap<i32, f64>> {
    let draws = Arc::new(BaseDraws::generate(n, seed));
    beta_tilde_series(chain, maps, &draws)
}

/// The chain with `fixed` pinned to its value at `baseline`.
pub fn counterfactual_chain(chain: &Chain, fixed: Param, baseline: i32) -> Result<Vec<(i32, ModelParams)>> {
    let base = chain
        .iter()
        .find(|(c, _)| *c == baseline)
        .ok_or_else(|| Error::Invalid(format!("baseline cohort {baseline} not in chain")))?
        .1;
    let v = base.get(fixed);
    Ok(chain.iter().map(|(c, p)| (*c, p.with(fixed, v))).collect())
}

/// β̃^b for one pinned parameter, named as in `Param::name`.
pub fn counterfactual_trend(
    chain: &Chain,
    fixed: &str,
    baseline: i32,
    maps: &(dyn Fn(i32) -> Result<RoleMaps> + Sync),
    n: usize,
    seed: u64,
) -> Result<BTreeMap<i32, f64>> {
    let param = Param::parse(fixed)?;
    let draws = Arc::new(BaseDraws::generate(n, seed));
    beta_tilde_series(&counterfactual_chain(chain, param, baseline)?, maps, &draws)
}

/// Trend attribution over one cohort range; trends are ×100.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionResult {
    pub start: i32,
    pub end: i32,
    pub baseline: i32,
    /// Trend in observed β_t, when observed estimates were supplied.
    pub observed_trend_x100: Option<f64>,
    pub simulated_trend_x100: f64,
    pub beta_tilde: BTreeMap<i32, f64>,
    pub beta_tilde_fixed: BTreeMap<Param, BTreeMap<i32, f64>>,
    pub contributions_x100: BTreeMap<Param, f64>,
    /// trend(β̃) minus the sum of contributions; not forced to zero.
    pub residual_x100: f64,
}

impl DecompositionResult {
    pub fn label(&self) -> String {
        format!("{}-{}", self.start, self.end)
    }
}

fn restrict(series: &BTreeMap<i32, f64>, range: &RangeInclusive<i32>) -> BTreeMap<i32, f64> {
    series.range(range.clone()).map(|(k, v)| (*k, *v)).collect()
}

/// Combines factual and counterfactual series into trend attributions.
pub fn attribute_trend(
    observed: Option<&[EstimateRecord]>,
    beta_tilde: &BTreeMap<i32, f64>,
    fixed: &BTreeMap<Param, BTreeMap<i32, f64>>,
    range: RangeInclusive<i32>,
    baseline: i32,
) -> Result<DecompositionResult> {
    let bt = restrict(beta_tilde, &range);
    let cohorts: Vec<i32> = bt.keys().copied().collect();
    let check = |what: &str, other: Vec<i32>| -> Result<()> {
        if other != cohorts {
            return Err(Error::CohortMismatch(format!(
                "{what} covers cohorts {other:?}, simulated series {cohorts:?}"
            )));
        }
        Ok(())
    };
    let observed_trend_x100 = match observed {
        Some(est) => {
            let mut c: Vec<i32> = est.iter().map(|e| e.cohort).filter(|c| range.contains(c)).collect();
            c.sort_unstable();
            check("observed estimates", c)?;
            Some(trend_fit(est, range.clone())?.slope_x100)
        }
        None => None,
    };
    let simulated = series_trend(&bt, range.clone(), "beta_tilde")?.slope_x100;
    let mut contributions = BTreeMap::new();
    let mut fixed_out = BTreeMap::new();
    for (param, series) in fixed {
        let s = restrict(series, &range);
        check(&format!("counterfactual {}", param.name()), s.keys().copied().collect())?;
        let t = series_trend(&s, range.clone(), param.name())?.slope_x100;
        contributions.insert(*param, simulated - t);
        fixed_out.insert(*param, s);
    }
    let explained = stats::sum(contributions.values().copied());
    Ok(DecompositionResult {
        start: *range.start(),
        end: *range.end(),
        baseline,
        observed_trend_x100,
        simulated_trend_x100: simulated,
        beta_tilde: bt,
        beta_tilde_fixed: fixed_out,
        contributions_x100: contributions,
        residual_x100: simulated - explained,
    })
}

/// Full decomposition of one range: β̃ plus one counterfactual per
/// parameter (run in parallel), all on shared base draws.
pub fn decompose(
    chain: &Chain,
    maps: &(dyn Fn(i32) -> Result<RoleMaps> + Sync),
    n: usize,
    seed: u64,
    observed: Option<&[EstimateRecord]>,
    range: RangeInclusive<i32>,
    baseline: Option<i32>,
) -> Result<DecompositionResult> {
    let sub: Vec<(i32, ModelParams)> = chain.iter().filter(|(c, _)| range.contains(c)).copied().collect();
    if sub.len() < 2 {
        return Err(Error::TooFewObservations {
            what: format!("decomposition {}-{}", range.start(), range.end()),
            needed: 2,
            got: sub.len(),
        });
    }
    let baseline = baseline.unwrap_or(sub[0].0);
    let draws = Arc::new(BaseDraws::generate(n, seed));
    let factual = beta_tilde_series(&sub, maps, &draws)?;
    let fixed: Vec<(Param, BTreeMap<i32, f64>)> = Param::ALL
        .par_iter()
        .map(|&p| {
            let cf = counterfactual_chain(&sub, p, baseline)?;
            Ok((p, beta_tilde_series(&cf, maps, &draws)?))
        })
        .collect::<Result<_>>()?;
    attribute_trend(observed, &factual, &fixed.into_iter().collect(), range, baseline)
}

/// Rows `trend_beta`, `trend_beta_tilde`, `due_<param>`, `residual`; one
/// column per range.
pub fn write_decomposition_tsv(path: &Path, results: &[DecompositionResult]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    let mut header = String::from("row");
    for r in results {
        header.push('\t');
        header.push_str(&r.label());
    }
    writeln!(w, "{header}").map_err(io)?;
    let mut line = |name: &str, get: &dyn Fn(&DecompositionResult) -> Option<f64>| -> Result<()> {
        let mut s = name.to_string();
        for r in results {
            s.push('\t');
            if let Some(v) = get(r) {
                s.push_str(&v.to_string());
            }
        }
        writeln!(w, "{s}").map_err(io)
    };
    line("trend_beta", &|r| r.observed_trend_x100)?;
    line("trend_beta_tilde", &|r| Some(r.simulated_trend_x100))?;
    for p in Param::ALL {
        line(&format!("due_{}", p.name()), &|r| r.contributions_x100.get(&p).copied())?;
    }
    line("residual", &|r| Some(r.residual_x100))?;
    w.flush().map_err(io)
}

/// Per-cohort β̃ and counterfactual series of one range.
pub fn write_beta_tilde_tsv(path: &Path, result: &DecompositionResult) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    let mut header = String::from("cohort\tbeta_tilde");
    for p in result.beta_tilde_fixed.keys() {
        header.push_str(&format!("\tfixed_{}", p.name()));
    }
    writeln!(w, "{header}").map_err(io)?;
    for (c, v) in &result.beta_tilde {
        let mut s = format!("{c}\t{v}");
        for series in result.beta_tilde_fixed.values() {
            s.push('\t');
            if let Some(x) = series.get(c) {
                s.push_str(&x.to_string());
            }
        }
        writeln!(w, "{s}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::default_maps;

    fn flat_chain(p: ModelParams) -> Vec<(i32, ModelParams)> {
        (1962..=1966).map(|c| (c, p)).collect()
    }

    fn sweden_1962() -> ModelParams {
        ModelParams::new(0.289, 0.257, 0.632, 0.368, 0.591).unwrap()
    }

    #[test]
    fn flat_chain_gives_flat_series_and_zero_attributions() {
        let maps = |_| Ok(default_maps());
        let r = decompose(&flat_chain(sweden_1962()), &maps, 20_000, 5, None, 1962..=1966, None).unwrap();
        let first = r.beta_tilde[&1962];
        assert!(r.beta_tilde.values().all(|&v| v == first));
        assert_eq!(r.simulated_trend_x100.abs(), 0.0);
        for v in r.contributions_x100.values() {
            assert_eq!(*v, 0.0);
        }
        assert_eq!(r.residual_x100, 0.0);
    }

    #[test]
    fn pinning_an_unchanged_parameter_is_identity() {
        let maps = |_| Ok(default_maps());
        let chain: Vec<(i32, ModelParams)> = (1962..=1965)
            .map(|c| (c, sweden_1962().with(Param::PhiM, 0.368 + 0.02 * (c - 1962) as f64)))
            .collect();
        let factual = simulated_trend(&chain, &maps, 10_000, 9).unwrap();
        let pinned = counterfactual_trend(&chain, "kappa", 1962, &maps, 10_000, 9).unwrap();
        assert_eq!(factual, pinned);
        let phi = counterfactual_trend(&chain, "phi_m", 1962, &maps, 10_000, 9).unwrap();
        assert_eq!(phi[&1962], factual[&1962]);
        assert_ne!(phi[&1965], factual[&1965]);
        assert!(matches!(
            counterfactual_trend(&chain, "gamma", 1962, &maps, 10_000, 9),
            Err(Error::UnknownParameter(_))
        ));
    }

    #[test]
    fn counterfactual_chain_only_touches_pinned_parameter() {
        let chain: Vec<(i32, ModelParams)> = (0..4)
            .map(|i| {
                let t = i as f64;
                (
                    1970 + i,
                    ModelParams::new(0.2 + 0.01 * t, 0.3 - 0.01 * t, 0.6, 0.4 + 0.05 * t, 0.6 + 0.04 * t).unwrap(),
                )
            })
            .collect();
        for p in Param::ALL {
            let cf = counterfactual_chain(&chain, p, 1970).unwrap();
            for ((c0, a), (c1, b)) in chain.iter().zip(&cf) {
                assert_eq!(c0, c1);
                for q in Param::ALL {
                    if q == p {
                        assert_eq!(b.get(q), chain[0].1.get(q));
                    } else {
                        assert_eq!(a.get(q).to_bits(), b.get(q).to_bits());
                    }
                }
            }
        }
        assert!(counterfactual_chain(&chain, Param::Psi, 1960).is_err());
    }

    #[test]
    fn attribution_arithmetic_and_order_independence() {
        let bt: BTreeMap<i32, f64> = (0..5).map(|i| (2000 + i, 0.2 + 0.004 * i as f64)).collect();
        let mk = |slope: f64| -> BTreeMap<i32, f64> { (0..5).map(|i| (2000 + i, 0.2 + slope * i as f64)).collect() };
        let fixed_a: BTreeMap<Param, BTreeMap<i32, f64>> = [(Param::PhiM, mk(0.001)), (Param::Kappa, mk(0.004))]
            .into_iter()
            .collect();
        let fixed_b: BTreeMap<Param, BTreeMap<i32, f64>> = [(Param::Kappa, mk(0.004)), (Param::PhiM, mk(0.001))]
            .into_iter()
            .collect();
        let obs: Vec<EstimateRecord> = (0..5)
            .map(|i| EstimateRecord {
                spec_label: "all".into(),
                cohort: 2000 + i,
                slope: 0.2 + 0.005 * i as f64,
                intercept: 0.0,
                se_slope: 0.0,
                n: 10,
            })
            .collect();
        let a = attribute_trend(Some(&obs), &bt, &fixed_a, 2000..=2004, 2000).unwrap();
        let b = attribute_trend(Some(&obs), &bt, &fixed_b, 2000..=2004, 2000).unwrap();
        assert_eq!(a, b);
        assert!((a.simulated_trend_x100 - 0.4).abs() < 1e-12);
        assert!((a.observed_trend_x100.unwrap() - 0.5).abs() < 1e-12);
        assert!((a.contributions_x100[&Param::PhiM] - 0.3).abs() < 1e-12);
        assert!(a.contributions_x100[&Param::Kappa].abs() < 1e-12);
        assert!((a.residual_x100 - 0.1).abs() < 1e-12);

        let short = &obs[..4];
        assert!(matches!(
            attribute_trend(Some(short), &bt, &fixed_a, 2000..=2004, 2000),
            Err(Error::CohortMismatch(_))
        ));
    }

    #[test]
    fn tables_write() {
        let maps = |_| Ok(default_maps());
        let chain: Vec<(i32, ModelParams)> = (1962..=1964)
            .map(|c| (c, sweden_1962().with(Param::PhiD, 0.591 + 0.03 * (c - 1962) as f64)))
            .collect();
        let r = decompose(&chain, &maps, 5_000, 1, None, 1962..=1964, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("decomposition.tsv");
        write_decomposition_tsv(&p, std::slice::from_ref(&r)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let rows: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(
            rows,
            [
                "row",
                "trend_beta",
                "trend_beta_tilde",
                "due_psi",
                "due_kappa",
                "due_alpha",
                "due_phi_m",
                "due_phi_d",
                "residual"
            ]
        );
        assert!(text.starts_with("row\t1962-1964\n"));
        let q = dir.path().join("beta_tilde.tsv");
        write_beta_tilde_tsv(&q, &r).unwrap();
        assert_eq!(std::fs::read_to_string(&q).unwrap().lines().count(), 4);
    }
}
