//! Percentile ranks on a 0-100 scale with midrank tie handling.
//!
//! Within a group of `n` values, the value at average ordinal position
//! `m` (1-based, ties share their mean position) gets rank
//! `100 * (m - 0.5) / n`. Ranks in every group average exactly 50.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{PairRecord, Sex};

/// Midrank percentile ranks of one group.
pub fn percentile_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("rank input ({v})")));
    }
    Ok(ranks_unchecked(values))
}

fn ranks_unchecked(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_unstable_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]));
    let mut ranks = vec![0.0; n];
    let scale = 100.0 / n as f64;
    let mut start = 0;
    while start < n {
        let v = values[order[start] as usize];
        let mut end = start + 1;
        // -0.0 and 0.0 tie
        while end < n && values[order[end] as usize] == v {
            end += 1;
        }
        // positions start+1..=end, mean = (start + end + 1) / 2
        let mid = (start + end + 1) as f64 / 2.0;
        let r = scale * (mid - 0.5);
        for &i in &order[start..end] {
            ranks[i as usize] = r;
        }
        start = end;
    }
    ranks
}

/// Ranks computed separately within each group label.
pub fn grouped_percentile_ranks<K: Eq + Hash>(values: &[f64], groups: &[K]) -> Result<Vec<f64>> {
    assert_eq!(values.len(), groups.len(), "values and group labels differ in length");
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("rank input ({v})")));
    }
    let mut members: HashMap<&K, Vec<usize>> = HashMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut out = vec![0.0; values.len()];
    for idx in members.values() {
        let vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        for (r, &i) in ranks_unchecked(&vals).into_iter().zip(idx) {
            out[i] = r;
        }
    }
    Ok(out)
}

/// Ventile (1..=20) of a 0-100 rank.
pub fn ventile_of_rank(rank: f64) -> u8 {
    ((rank / 5.0).ceil() as i64).clamp(1, 20) as u8
}

/// Midpoint of a ventile on the 0-100 rank scale.
pub fn ventile_midpoint(v: u8) -> f64 {
    5.0 * v as f64 - 2.5
}

pub fn ventiles<K: Eq + Hash>(values: &[f64], groups: &[K]) -> Result<Vec<u8>> {
    Ok(grouped_percentile_ranks(values, groups)?
        .into_iter()
        .map(ventile_of_rank)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentSide {
    /// Mean of available parents' incomes.
    Joint,
    Father,
    Mother,
}

/// Which children and which parental income a regression uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairSpec {
    pub child_sex: Option<Sex>,
    pub parent: ParentSide,
}

impl PairSpec {
    pub const ALL: PairSpec = PairSpec {
        child_sex: None,
        parent: ParentSide::Joint,
    };

    pub fn label(&self) -> String {
        let child = match self.child_sex {
            None => "child",
            Some(Sex::Male) => "son",
            Some(Sex::Female) => "daughter",
        };
        match (self.child_sex, self.parent) {
            (None, ParentSide::Joint) => "all".to_string(),
            (_, ParentSide::Joint) => format!("{child}-parents"),
            (_, ParentSide::Father) => format!("{child}-father"),
            (_, ParentSide::Mother) => format!("{child}-mother"),
        }
    }

    pub fn parse(label: &str) -> Option<PairSpec> {
        let (child, parent) = if label == "all" {
            ("child", "parents")
        } else {
            label.split_once('-')?
        };
        let child_sex = match child {
            "child" => None,
            "son" => Some(Sex::Male),
            "daughter" => Some(Sex::Female),
            _ => return None,
        };
        let parent = match parent {
            "parents" => ParentSide::Joint,
            "father" => ParentSide::Father,
            "mother" => ParentSide::Mother,
            _ => return None,
        };
        Some(PairSpec { child_sex, parent })
    }

    /// The four gender-specific pair types plus the pooled one.
    pub fn standard() -> Vec<PairSpec> {
        let mut v = vec![PairSpec::ALL];
        for sex in [Sex::Male, Sex::Female] {
            for parent in [ParentSide::Father, ParentSide::Mother] {
                v.push(PairSpec {
                    child_sex: Some(sex),
                    parent,
                });
            }
        }
        v
    }

    pub fn parent_income(&self, p: &PairRecord) -> Option<f64> {
        match self.parent {
            ParentSide::Joint => Some(p.parent_income),
            ParentSide::Father => p.father_income,
            ParentSide::Mother => p.mother_income,
        }
    }

    pub fn matches(&self, p: &PairRecord) -> bool {
        self.child_sex.is_none_or(|s| p.child_sex == Some(s)) && self.parent_income(p).is_some()
    }
}

/// Child and parent percentile ranks of one pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedPair {
    /// Index into the source pair slice.
    pub pair: usize,
    pub child_rank: f64,
    pub parent_rank: f64,
    pub cohort: i32,
    pub group_key: String,
}

#[derive(Debug, Clone, Default)]
pub struct RankedTable {
    pub rows: Vec<RankedPair>,
    /// Rows dropped because the sex needed for re-ranking was unknown.
    pub excluded_missing_sex: usize,
}

impl RankedTable {
    pub fn child_ranks(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.child_rank).collect()
    }

    pub fn parent_ranks(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.parent_rank).collect()
    }

    pub fn cohort(&self, cohort: i32) -> Vec<&RankedPair> {
        self.rows.iter().filter(|r| r.cohort == cohort).collect()
    }
}

/// Ranks the pairs selected by `spec`.
///
/// Children are ranked within cohort, or within cohort × child sex when
/// `rerank_children` is set. A parent's income is ranked within cohort
/// among all pairs that carry that parental income (fathers among
/// fathers, mothers among mothers). Ranking happens over the full cohort
/// before the spec's subset is taken.
pub fn rank_pairs(pairs: &[PairRecord], spec: PairSpec, rerank_children: bool) -> Result<RankedTable> {
    let mut excluded = 0;
    // child ranks
    let mut child_idx = Vec::new();
    let mut child_keys = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if rerank_children {
            match p.child_sex {
                Some(s) => child_keys.push((p.child_cohort, Some(s))),
                None => {
                    excluded += 1;
                    continue;
                }
            }
        } else {
            child_keys.push((p.child_cohort, None));
        }
        child_idx.push(i);
    }
    let child_vals: Vec<f64> = child_idx.iter().map(|&i| pairs[i].child_income).collect();
    let child_r = grouped_percentile_ranks(&child_vals, &child_keys)?;
    let mut child_rank = vec![None; pairs.len()];
    for (r, &i) in child_r.into_iter().zip(&child_idx) {
        child_rank[i] = Some(r);
    }

    // parent ranks
    let parent_idx: Vec<usize> = (0..pairs.len())
        .filter(|&i| spec.parent_income(&pairs[i]).is_some())
        .collect();
    let parent_vals: Vec<f64> = parent_idx
        .iter()
        .map(|&i| spec.parent_income(&pairs[i]).unwrap())
        .collect();
    let parent_keys: Vec<i32> = parent_idx.iter().map(|&i| pairs[i].child_cohort).collect();
    let parent_r = grouped_percentile_ranks(&parent_vals, &parent_keys)?;
    let mut parent_rank = vec![None; pairs.len()];
    for (r, &i) in parent_r.into_iter().zip(&parent_idx) {
        parent_rank[i] = Some(r);
    }

    let label = spec.label();
    let rows = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| spec.matches(p))
        .filter_map(|(i, p)| {
            Some(RankedPair {
                pair: i,
                child_rank: child_rank[i]?,
                parent_rank: parent_rank[i]?,
                cohort: p.child_cohort,
                group_key: label.clone(),
            })
        })
        .collect();
    Ok(RankedTable {
        rows,
        excluded_missing_sex: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankDimension {
    Child,
    Parent(ParentSide),
}

/// Re-ranks within cohort × gender cells along one dimension. For
/// `Child`, children are ranked within cohort × child sex against the
/// joint parental rank; rows with unknown child sex are dropped and
/// counted. For `Parent`, the chosen parent's income is ranked among
/// parents of that gender, and children are ranked within cohort.
pub fn rerank_by_gender(pairs: &[PairRecord], dimension: RankDimension) -> Result<RankedTable> {
    match dimension {
        RankDimension::Child => rank_pairs(pairs, PairSpec::ALL, true),
        RankDimension::Parent(side) => rank_pairs(
            pairs,
            PairSpec {
                child_sex: None,
                parent: side,
            },
            false,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-3)
    }

    #[test]
    fn midrank_examples() {
        assert!(close(
            &percentile_ranks(&[10.0, 20.0, 30.0]).unwrap(),
            &[16.667, 50.0, 83.333]
        ));
        // tied pair shares midrank 1.5 -> 100 * 1.0 / 3
        assert!(close(
            &percentile_ranks(&[5.0, 5.0, 9.0]).unwrap(),
            &[33.333, 33.333, 83.333]
        ));
    }

    #[test]
    fn zeros_tie_at_bottom() {
        let r = percentile_ranks(&[0.0, 7.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, vec![37.5, 87.5, 37.5, 37.5]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(percentile_ranks(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ventile_edges() {
        assert_eq!(ventile_of_rank(0.05), 1);
        assert_eq!(ventile_of_rank(100.0), 20);
        assert_eq!(ventile_of_rank(5.0), 1);
        assert_eq!(ventile_of_rank(5.01), 2);
    }

    #[test]
    fn grouped_ranks_are_independent() {
        let v = [1.0, 100.0, 2.0, 200.0];
        let g = ["a", "b", "a", "b"];
        assert_eq!(grouped_percentile_ranks(&v, &g).unwrap(), vec![25.0, 25.0, 75.0, 75.0]);
    }

    fn pair(cohort: i32, sex: Option<Sex>, child: f64, father: Option<f64>) -> PairRecord {
        PairRecord {
            child: 0,
            father: father.map(|_| 0),
            mother: None,
            child_cohort: cohort,
            child_sex: sex,
            child_income: child,
            father_income: father,
            mother_income: None,
            parent_income: father.unwrap_or(0.0),
            partial_window: false,
        }
    }

    #[test]
    fn all_male_rerank_matches_cohort_ranking() {
        let pairs: Vec<_> = (0..10)
            .map(|i| pair(1960, Some(Sex::Male), (i * 7 % 10) as f64, Some(i as f64)))
            .collect();
        let a = rank_pairs(&pairs, PairSpec::ALL, true).unwrap();
        let b = rank_pairs(&pairs, PairSpec::ALL, false).unwrap();
        assert_eq!(a.child_ranks(), b.child_ranks());
    }

    #[test]
    fn disjoint_gender_supports_each_span_full_range() {
        let mut pairs = Vec::new();
        for i in 0..10 {
            pairs.push(pair(1960, Some(Sex::Male), 1000.0 + i as f64, Some(1.0)));
            pairs.push(pair(1960, Some(Sex::Female), i as f64, Some(2.0)));
        }
        let t = rerank_by_gender(&pairs, RankDimension::Child).unwrap();
        for sex in [Sex::Male, Sex::Female] {
            let r: Vec<f64> = t
                .rows
                .iter()
                .filter(|r| pairs[r.pair].child_sex == Some(sex))
                .map(|r| r.child_rank)
                .collect();
            let lo = r.iter().cloned().fold(f64::MAX, f64::min);
            let hi = r.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(lo, 5.0);
            assert_eq!(hi, 95.0);
        }
    }

    #[test]
    fn missing_sex_excluded_with_count() {
        let pairs = vec![
            pair(1960, Some(Sex::Male), 1.0, Some(1.0)),
            pair(1960, None, 2.0, Some(2.0)),
            pair(1960, Some(Sex::Male), 3.0, Some(3.0)),
        ];
        let t = rerank_by_gender(&pairs, RankDimension::Child).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.excluded_missing_sex, 1);
    }

    #[test]
    fn spec_labels_round_trip() {
        for s in PairSpec::standard() {
            assert_eq!(PairSpec::parse(&s.label()), Some(s));
        }
        assert_eq!(PairSpec::parse("nonsense"), None);
    }

    proptest! {
        #[test]
        fn ranks_average_fifty(values in prop::collection::vec(-1e6f64..1e6, 1..200)) {
            let r = percentile_ranks(&values).unwrap();
            let m = crate::stats::mean(&r);
            prop_assert!((m - 50.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|&x| (0.0..=100.0).contains(&x)));
        }

        #[test]
        fn ranks_invariant_to_increasing_transform(
            values in prop::collection::vec(-5.0f64..5.0, 1..200),
            sigma in 0.5f64..3.0,
        ) {
            let transformed: Vec<f64> = values.iter().map(|v| (v / sigma).exp()).collect();
            prop_assert_eq!(percentile_ranks(&values).unwrap(), percentile_ranks(&transformed).unwrap());
        }

        #[test]
        fn reranking_preserves_within_cell_order(
            incomes in prop::collection::vec((0u32..50, any::<bool>()), 2..100),
        ) {
            let pairs: Vec<_> = incomes
                .iter()
                .map(|&(v, male)| pair(1970, Some(if male { Sex::Male } else { Sex::Female }), v as f64, Some(1.0)))
                .collect();
            let t = rerank_by_gender(&pairs, RankDimension::Child).unwrap();
            for a in &t.rows {
                for b in &t.rows {
                    let (pa, pb) = (&pairs[a.pair], &pairs[b.pair]);
                    if pa.child_sex == pb.child_sex && pa.child_income < pb.child_income {
                        prop_assert!(a.child_rank < b.child_rank);
                    }
                }
            }
        }
    }
}
