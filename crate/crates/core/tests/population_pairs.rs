use mobility::model::ModelParams;
use mobility::population::{build_pairs, load_microdata, write_microdata, IncomeWindow, PersonRecord, Population, Sex};
use mobility::synth::{default_maps, generate_synthetic, ProxyLoadings, SynthSpec};

fn spec(families: usize, seed: u64) -> SynthSpec {
    let p = ModelParams::new(0.131, 0.301, 0.580, 0.286, 0.511).unwrap();
    SynthSpec {
        chain: vec![(1951, p), (1952, p)],
        families,
        seed,
        proxies: ProxyLoadings::default(),
    }
}

#[test]
fn synthetic_file_round_trips_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pop.csv");
    let maps = default_maps();
    generate_synthetic(&spec(300, 4), &|_| Ok(maps.clone()), &path).unwrap();
    let pop = load_microdata(&path, &Default::default()).unwrap();
    assert_eq!(pop.len(), 2 * 300 * 4);
    let again = dir.path().join("again.csv");
    write_microdata(&pop, &again, &Default::default()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    let reloaded = load_microdata(&again, &Default::default()).unwrap();
    assert_eq!(pop.persons(), reloaded.persons());
}

#[test]
fn exclusion_report_conserves_pairs() {
    // 1,000 children; some lose both parents, some lose their income history.
    let mut persons = Vec::new();
    for i in 0..1000 {
        let mut f = PersonRecord::new(format!("f{i}"), 1930, Some(Sex::Male));
        let mut m = PersonRecord::new(format!("m{i}"), 1932, Some(Sex::Female));
        let mut c = PersonRecord::new(
            format!("c{i}"),
            1960,
            Some(if i % 2 == 0 { Sex::Male } else { Sex::Female }),
        );
        for y in 1977..=1979 {
            if i % 7 != 0 {
                f.incomes.insert(y, 100.0 + i as f64);
            }
            m.incomes.insert(y, 50.0);
        }
        if i % 11 == 0 {
            // emigrated before the window
            c.residency = Some((1960, 1980));
        } else {
            for y in 1995..=1997 {
                c.incomes.insert(y, 200.0 + i as f64);
            }
        }
        if i % 13 != 0 {
            c.father_id = Some(f.person_id.clone());
            if i % 7 != 0 {
                c.mother_id = Some(m.person_id.clone());
            }
        }
        persons.extend([f, m, c]);
    }
    let pop = Population::new(persons, (1977..=1997).collect()).unwrap();
    let table = build_pairs(
        &pop,
        1960..=1960,
        IncomeWindow::child_default(),
        IncomeWindow::parent_default(),
    )
    .unwrap();
    let ex = table.exclusions;
    assert_eq!(ex.candidates, 1000);
    assert_eq!(ex.candidates - ex.total(), table.pairs.len());
    assert!(ex.no_parent > 0 && ex.child_income_missing > 0, "{ex:?}");
    // father present but never earning: counts zeros, pair kept
    let zero_father = table.pairs.iter().find(|p| p.father_income == Some(0.0));
    assert!(zero_father.is_some());
}

#[test]
fn committed_fixture_loads() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic_n10.csv");
    let pop = load_microdata(&path, &Default::default()).unwrap();
    assert_eq!(pop.len(), 10 * 4);
    let truth = mobility::calibration::read_params_tsv(&mobility::synth::truth_path(&path)).unwrap();
    assert_eq!(truth.len(), 1);
    let pairs = build_pairs(
        &pop,
        1951..=1951,
        IncomeWindow::child_default(),
        IncomeWindow::parent_default(),
    )
    .unwrap();
    assert_eq!(pairs.pairs.len(), 20);
}
