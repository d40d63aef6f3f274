//! Person-level microdata, parent-child pair construction and windowed
//! income averages.
//!
//! Input is a UTF-8, comma-separated file with a header row. Required
//! columns are `person_id`, `birth_year`, `sex` (`M`/`F`, empty for
//! unknown) and one `inc_<year>` column per income year. Optional columns
//! are `edu_years`, `occ_group` (0..=10, 10 = none/missing), `father_id`,
//! `mother_id`, and the residency span `res_from`/`res_to`. An empty income
//! cell means no income record for that year.

use std::collections::{BTreeMap, HashMap};
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }
}

/// Occupation code used for "no occupation / missing".
pub const OCC_MISSING: u8 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub person_id: String,
    pub birth_year: i32,
    pub sex: Option<Sex>,
    /// Year to non-negative income. Absent years have no income record.
    pub incomes: BTreeMap<i32, f64>,
    pub education_years: Option<f64>,
    pub occupation_group: Option<u8>,
    pub father_id: Option<String>,
    pub mother_id: Option<String>,
    /// Declared residency span; `None` means the full data span.
    pub residency: Option<(i32, i32)>,
}

impl PersonRecord {
    pub fn new(person_id: impl Into<String>, birth_year: i32, sex: Option<Sex>) -> Self {
        PersonRecord {
            person_id: person_id.into(),
            birth_year,
            sex,
            incomes: BTreeMap::new(),
            education_years: None,
            occupation_group: None,
            father_id: None,
            mother_id: None,
            residency: None,
        }
    }
}

/// Column names of the microdata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicrodataSchema {
    pub person_id: String,
    pub birth_year: String,
    pub sex: String,
    pub income_prefix: String,
    pub education: String,
    pub occupation: String,
    pub father_id: String,
    pub mother_id: String,
    pub residency_from: String,
    pub residency_to: String,
    pub min_birth_year: i32,
    pub max_birth_year: i32,
}

impl Default for MicrodataSchema {
    fn default() -> Self {
        MicrodataSchema {
            person_id: "person_id".into(),
            birth_year: "birth_year".into(),
            sex: "sex".into(),
            income_prefix: "inc_".into(),
            education: "edu_years".into(),
            occupation: "occ_group".into(),
            father_id: "father_id".into(),
            mother_id: "mother_id".into(),
            residency_from: "res_from".into(),
            residency_to: "res_to".into(),
            min_birth_year: 1800,
            max_birth_year: 2100,
        }
    }
}

/// An immutable table of persons with an id index.
#[derive(Debug, Clone)]
pub struct Population {
    persons: Vec<PersonRecord>,
    index: HashMap<String, usize>,
    income_years: Vec<i32>,
}

impl Population {
    /// Builds a population; `income_years` is the set of income columns
    /// (the data span). Years present in records but not listed are added.
    pub fn new(persons: Vec<PersonRecord>, income_years: Vec<i32>) -> Result<Self> {
        let mut index = HashMap::with_capacity(persons.len());
        let mut years: Vec<i32> = income_years;
        for (i, p) in persons.iter().enumerate() {
            if index.insert(p.person_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.person_id.clone()));
            }
            years.extend(p.incomes.keys().copied());
        }
        years.sort_unstable();
        years.dedup();
        Ok(Population {
            persons,
            index,
            income_years: years,
        })
    }

    pub fn persons(&self) -> &[PersonRecord] {
        &self.persons
    }

    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PersonRecord> {
        self.index.get(id).map(|&i| &self.persons[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn income_years(&self) -> &[i32] {
        &self.income_years
    }

    /// First and last year covered by income columns.
    pub fn data_span(&self) -> Option<(i32, i32)> {
        Some((*self.income_years.first()?, *self.income_years.last()?))
    }
}

fn parse_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Loads person records. Row numbers in errors count data rows from 1.
pub fn load_microdata(path: &Path, schema: &MicrodataSchema) -> Result<Population> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));

    let id_col = need(&schema.person_id)?;
    let by_col = need(&schema.birth_year)?;
    let sex_col = need(&schema.sex)?;
    let mut income_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(schema.income_prefix.as_str()) {
            let year: i32 = rest
                .parse()
                .map_err(|_| parse_err(0, h, "income column suffix is not a year"))?;
            income_cols.push((i, year));
        }
    }
    if income_cols.is_empty() {
        return Err(Error::MissingColumn(format!("{}<year>", schema.income_prefix)));
    }
    let edu_col = find(&schema.education);
    let occ_col = find(&schema.occupation);
    let father_col = find(&schema.father_id);
    let mother_col = find(&schema.mother_id);
    let res_from_col = find(&schema.residency_from);
    let res_to_col = find(&schema.residency_to);

    let mut persons = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::csv(path, e))?;
        let cell = |c: usize| record.get(c).unwrap_or("").trim();
        let opt_cell = |c: Option<usize>| c.map(&cell).filter(|s| !s.is_empty());

        let person_id = cell(id_col);
        if person_id.is_empty() {
            return Err(parse_err(row, &schema.person_id, "empty identifier"));
        }
        let birth_year: i32 = cell(by_col)
            .parse()
            .map_err(|_| parse_err(row, &schema.birth_year, "not an integer year"))?;
        if birth_year < schema.min_birth_year || birth_year > schema.max_birth_year {
            return Err(parse_err(
                row,
                &schema.birth_year,
                format!(
                    "{birth_year} outside [{}, {}]",
                    schema.min_birth_year, schema.max_birth_year
                ),
            ));
        }
        let sex = match cell(sex_col) {
            "M" | "m" => Some(Sex::Male),
            "F" | "f" => Some(Sex::Female),
            "" => None,
            other => return Err(parse_err(row, &schema.sex, format!("unknown sex `{other}`"))),
        };
        let mut person = PersonRecord::new(person_id, birth_year, sex);
        for &(c, year) in &income_cols {
            let raw = cell(c);
            if raw.is_empty() {
                continue;
            }
            let col = &headers[c];
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(row, col, format!("`{raw}` is not a number")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(row, col, format!("income {raw} must be finite and >= 0")));
            }
            person.incomes.insert(year, v);
        }
        if let Some(raw) = opt_cell(edu_col) {
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(row, &schema.education, format!("`{raw}` is not a number")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(row, &schema.education, "must be finite and >= 0"));
            }
            person.education_years = Some(v);
        }
        if let Some(raw) = opt_cell(occ_col) {
            let v: u8 = raw
                .parse()
                .ok()
                .filter(|v| *v <= OCC_MISSING)
                .ok_or_else(|| parse_err(row, &schema.occupation, format!("`{raw}` not in 0..=10")))?;
            person.occupation_group = Some(v);
        }
        person.father_id = opt_cell(father_col).map(str::to_string);
        person.mother_id = opt_cell(mother_col).map(str::to_string);
        let res_year = |c: Option<usize>, name: &str| -> Result<Option<i32>> {
            opt_cell(c)
                .map(|raw| raw.parse().map_err(|_| parse_err(row, name, "not an integer year")))
                .transpose()
        };
        let from = res_year(res_from_col, &schema.residency_from)?;
        let to = res_year(res_to_col, &schema.residency_to)?;
        person.residency = match (from, to) {
            (None, None) => None,
            (Some(a), Some(b)) if a <= b => Some((a, b)),
            _ => {
                return Err(parse_err(
                    row,
                    &schema.residency_from,
                    "residency span needs both ends with from <= to",
                ))
            }
        };
        persons.push(person);
    }
    let years = income_cols.iter().map(|&(_, y)| y).collect();
    let pop = Population::new(persons, years)?;
    log::info!("loaded {} person records from {}", pop.len(), path.display());
    Ok(pop)
}

fn format_num(v: f64) -> String {
    format!("{v}")
}

/// Writes a population in the microdata schema. Residency columns are
/// emitted only when some person declares a span.
pub fn write_microdata(pop: &Population, path: &Path, schema: &MicrodataSchema) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let with_residency = pop.persons.iter().any(|p| p.residency.is_some());
    let mut header: Vec<String> = vec![schema.person_id.clone(), schema.birth_year.clone(), schema.sex.clone()];
    header.extend(pop.income_years.iter().map(|y| format!("{}{y}", schema.income_prefix)));
    header.extend([
        schema.education.clone(),
        schema.occupation.clone(),
        schema.father_id.clone(),
        schema.mother_id.clone(),
    ]);
    if with_residency {
        header.push(schema.residency_from.clone());
        header.push(schema.residency_to.clone());
    }
    writer.write_record(&header).map_err(|e| Error::csv(path, e))?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for p in &pop.persons {
        row.clear();
        row.push(p.person_id.clone());
        row.push(p.birth_year.to_string());
        row.push(p.sex.map_or(String::new(), |s| s.code().to_string()));
        for y in &pop.income_years {
            row.push(p.incomes.get(y).map_or(String::new(), |v| format_num(*v)));
        }
        row.push(p.education_years.map_or(String::new(), format_num));
        row.push(p.occupation_group.map_or(String::new(), |o| o.to_string()));
        row.push(p.father_id.clone().unwrap_or_default());
        row.push(p.mother_id.clone().unwrap_or_default());
        if with_residency {
            row.push(p.residency.map_or(String::new(), |r| r.0.to_string()));
            row.push(p.residency.map_or(String::new(), |r| r.1.to_string()));
        }
        writer.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowAnchor {
    /// Ages are counted from the child's birth year.
    ChildAge,
    /// Ages are counted from the person's own birth year.
    OwnAge,
}

/// Age window `center_age ± half_width` for income averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncomeWindow {
    pub anchor: WindowAnchor,
    pub center_age: i32,
    pub half_width: i32,
}

impl IncomeWindow {
    pub fn new(anchor: WindowAnchor, center_age: i32, half_width: i32) -> Result<Self> {
        if half_width < 0 || center_age <= 0 {
            return Err(Error::Invalid(format!(
                "income window needs center_age > 0 and half_width >= 0 (got {center_age} ± {half_width})"
            )));
        }
        Ok(IncomeWindow {
            anchor,
            center_age,
            half_width,
        })
    }

    /// Child earnings at own ages 35-37.
    pub fn child_default() -> Self {
        IncomeWindow {
            anchor: WindowAnchor::OwnAge,
            center_age: 36,
            half_width: 1,
        }
    }

    /// Parent earnings at child ages 17-19.
    pub fn parent_default() -> Self {
        IncomeWindow {
            anchor: WindowAnchor::ChildAge,
            center_age: 18,
            half_width: 1,
        }
    }

    /// Calendar years covered for a person born in `own_birth` whose child
    /// (when relevant) was born in `child_birth`.
    pub fn years(&self, own_birth: i32, child_birth: i32) -> RangeInclusive<i32> {
        let base = match self.anchor {
            WindowAnchor::ChildAge => child_birth,
            WindowAnchor::OwnAge => own_birth,
        };
        let c = base + self.center_age;
        (c - self.half_width)..=(c + self.half_width)
    }
}

/// A windowed income average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowAverage {
    pub value: f64,
    pub resident_years: usize,
    pub window_years: usize,
}

impl WindowAverage {
    /// True when the person was resident in only part of the window.
    pub fn partial(&self) -> bool {
        self.resident_years < self.window_years
    }
}

/// Mean income over the resident years of `window`. Resident years
/// without an income record contribute 0. A year with an income record
/// counts as resident even outside the declared span. Returns `None` when
/// the person is resident in no window year.
pub fn average_income(
    person: &PersonRecord,
    window: &[i32],
    data_span: Option<(i32, i32)>,
) -> Result<Option<WindowAverage>> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let span = person.residency.or(data_span);
    let mut total = stats::KahanSum::new();
    let mut resident = 0usize;
    for year in window {
        match person.incomes.get(year) {
            Some(v) => {
                total.add(*v);
                resident += 1;
            }
            None => {
                if span.is_some_and(|(a, b)| (a..=b).contains(year)) {
                    resident += 1;
                }
            }
        }
    }
    if resident == 0 {
        return Ok(None);
    }
    Ok(Some(WindowAverage {
        value: total.total() / resident as f64,
        resident_years: resident,
        window_years: window.len(),
    }))
}

/// One child with resolved averaged incomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub child: usize,
    pub father: Option<usize>,
    pub mother: Option<usize>,
    pub child_cohort: i32,
    pub child_sex: Option<Sex>,
    pub child_income: f64,
    pub father_income: Option<f64>,
    pub mother_income: Option<f64>,
    /// Mean of the available parents' averages.
    pub parent_income: f64,
    /// Some window average used fewer than all window years.
    pub partial_window: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExclusionReport {
    pub candidates: usize,
    pub no_parent: usize,
    pub child_income_missing: usize,
    pub parent_income_missing: usize,
}

impl ExclusionReport {
    pub fn total(&self) -> usize {
        self.no_parent + self.child_income_missing + self.parent_income_missing
    }
}

#[derive(Debug, Clone)]
pub struct PairTable {
    pub pairs: Vec<PairRecord>,
    pub exclusions: ExclusionReport,
}

impl PairTable {
    pub fn cohorts(&self) -> Vec<i32> {
        let mut c: Vec<i32> = self.pairs.iter().map(|p| p.child_cohort).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn cohort(&self, cohort: i32) -> Vec<&PairRecord> {
        self.pairs.iter().filter(|p| p.child_cohort == cohort).collect()
    }
}

/// Forms parent-child pairs for every person born in `cohorts`. Parent
/// links come from each child's `father_id`/`mother_id`; a link to an id
/// not present in the population is an error.
pub fn build_pairs(
    pop: &Population,
    cohorts: RangeInclusive<i32>,
    child_window: IncomeWindow,
    parent_window: IncomeWindow,
) -> Result<PairTable> {
    let span = pop.data_span();
    let mut report = ExclusionReport::default();
    let mut pairs = Vec::new();
    let resolve = |child: &PersonRecord, link: &Option<String>| -> Result<Option<usize>> {
        match link {
            None => Ok(None),
            Some(id) => pop.position(id).map(Some).ok_or_else(|| Error::UnknownLink {
                child: child.person_id.clone(),
                parent: id.clone(),
            }),
        }
    };
    for (ci, child) in pop.persons().iter().enumerate() {
        if !cohorts.contains(&child.birth_year) {
            continue;
        }
        report.candidates += 1;
        let father = resolve(child, &child.father_id)?;
        let mother = resolve(child, &child.mother_id)?;
        if father.is_none() && mother.is_none() {
            report.no_parent += 1;
            continue;
        }
        let cohort = child.birth_year;
        let child_years: Vec<i32> = child_window.years(cohort, cohort).collect();
        let Some(child_avg) = average_income(child, &child_years, span)? else {
            report.child_income_missing += 1;
            continue;
        };
        let parent_avg = |idx: Option<usize>| -> Result<Option<WindowAverage>> {
            let Some(i) = idx else { return Ok(None) };
            let p = &pop.persons()[i];
            let years: Vec<i32> = parent_window.years(p.birth_year, cohort).collect();
            average_income(p, &years, span)
        };
        let f = parent_avg(father)?;
        let m = parent_avg(mother)?;
        let parent_income = match (f, m) {
            (Some(f), Some(m)) => 0.5 * (f.value + m.value),
            (Some(x), None) | (None, Some(x)) => x.value,
            (None, None) => {
                report.parent_income_missing += 1;
                continue;
            }
        };
        let partial = child_avg.partial() || f.is_some_and(|a| a.partial()) || m.is_some_and(|a| a.partial());
        pairs.push(PairRecord {
            child: ci,
            father: if f.is_some() { father } else { None },
            mother: if m.is_some() { mother } else { None },
            child_cohort: cohort,
            child_sex: child.sex,
            child_income: child_avg.value,
            father_income: f.map(|a| a.value),
            mother_income: m.map(|a| a.value),
            parent_income,
            partial_window: partial,
        });
    }
    log::info!(
        "built {} pairs from {} candidates ({} excluded)",
        pairs.len(),
        report.candidates,
        report.total()
    );
    Ok(PairTable {
        pairs,
        exclusions: report,
    })
}
