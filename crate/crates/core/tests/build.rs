//! Builds the synthetic cohort fixture and checks every count against the
//! values derived by hand from its construction rules.

use std::collections::BTreeMap;

use ecg_icd::build::{build_dataset, BuildInputs, BuildOptions};
use ecg_icd::cohort::{DiscardReason, IngestMode, Site};
use ecg_icd::dataset::{Phase, ScenarioSpec, Split};
use ecg_icd::signal::TARGET_FS;
use ecg_icd::synth::write_cohort_fixture;

fn build(dir: &std::path::Path, seed: u64) -> ecg_icd::build::BuildOutput {
    let files = write_cohort_fixture(dir).unwrap();
    let inputs = BuildInputs {
        records: dir.join(files.records),
        ed_stays: dir.join(files.ed_stays),
        admissions: dir.join(files.admissions),
        ed_diagnoses: dir.join(files.ed_diagnoses),
        hosp_diagnoses: dir.join(files.hosp_diagnoses),
        mapping: dir.join(files.mapping),
    };
    let out = dir.join("out");
    build_dataset(&inputs, &BuildOptions { threshold: 12, seed, mode: IngestMode::Strict }, &out).unwrap()
}

#[test]
fn fixture_counts_match_construction() {
    let tmp = tempfile::tempdir().unwrap();
    let out = build(tmp.path(), 0);
    let s = &out.summary;
    // 20 a + 6 b (s%3) + 5 c (s%4) + 4 d (s%5) recordings.
    assert_eq!(s.records_in, 35);
    // d recordings fall outside every stay; stay 30007 has no diagnoses.
    assert_eq!(s.discards, BTreeMap::from([(DiscardReason::Unlinked, 4), (DiscardReason::EmptyDiagnoses, 1)]));
    assert_eq!(s.stats.samples, 30);
    assert_eq!(s.stats.patients, 19);
    // Combined-source counts: the I48 family and R07 family on the 12 odd-subject
    // ED records, the I21 family and I10 on 18 admitted records, E11 family on 11.
    let codes: Vec<&str> = out.manifest.label_set.codes().iter().map(|c| c.as_str()).collect();
    assert_eq!(codes, ["I10", "I21", "I210", "I2109", "I48", "I489", "I4891", "R07", "R079"]);
    // Per patient: nine with one ECG, nine with two, subject 12 with three.
    assert_eq!(s.stats.median_ecgs_per_patient, 2.0);
    assert_eq!(s.stats.median_codes_per_record, 4.0);
    assert_eq!(s.stats.ed_source_ratio, 12.0 / 30.0);
    assert_eq!(s.stats.zero_rows, 0);
    assert_eq!(s.stats.chapter_distribution["IX"], 108.0 / 132.0);
    assert_eq!(s.stats.chapter_distribution["XVIII"], 24.0 / 132.0);
    assert_eq!((s.fill.interpolated, s.fill.zero_filled, s.fill.all_missing_leads), (10, 5020, 1));
    assert_eq!(s.ingest.unmappable_icd9 + s.ingest.malformed_codes, 0);
    assert_eq!(out.folds.folds.len(), 19);

    let ds = out.manifest.to_dataset(&tmp.path().join("out")).unwrap();
    let sites = |site| ds.records().iter().filter(|r| r.site == site).count();
    assert_eq!((sites(Site::Ed), sites(Site::Hosp)), (25, 5));
    // Even ED records carry their admission and hence a hospital label source.
    let r04a = ds.records().iter().position(|r| r.record_id == "r04a").unwrap();
    assert_eq!(ds.record(r04a).hosp_admission, Some(20004));
    let ed2ed: ScenarioSpec = "T(ED2ED)-E(ED2ED)".parse().unwrap();
    assert_eq!(ds.apply_scenario(&ed2ed, Phase::Train).len(), 25);
    let ed2hosp: ScenarioSpec = "T(ED2HOSP)-E(ED2HOSP)".parse().unwrap();
    assert_eq!(ds.apply_scenario(&ed2hosp, Phase::Train).len(), 13);
    // 10 s at 500 Hz becomes 1000 samples at 100 Hz.
    let sig = ds.signal(0).unwrap();
    assert_eq!((sig.n_leads(), sig.len(), sig.fs()), (12, 1000, TARGET_FS));
    let view = ds.view();
    let held_out: usize = [Split::Validation, Split::Test].iter().map(|&sp| view.split(sp).len()).sum();
    assert!(held_out > 0 && held_out < 30);
}

#[test]
fn rebuild_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (x, y) = (build(a.path(), 5), build(b.path(), 5));
    assert_eq!(serde_json::to_string(&x.manifest).unwrap(), serde_json::to_string(&y.manifest).unwrap());
    assert_eq!(x.folds, y.folds);
    for r in &x.manifest.records {
        let fa = std::fs::read(a.path().join("out").join(&r.signal)).unwrap();
        let fb = std::fs::read(b.path().join("out").join(&r.signal)).unwrap();
        assert_eq!(fa, fb);
    }
}

#[test]
fn missing_mapping_is_reported_as_io() {
    let tmp = tempfile::tempdir().unwrap();
    let files = write_cohort_fixture(tmp.path()).unwrap();
    let d = tmp.path();
    let inputs = BuildInputs {
        records: d.join(files.records),
        ed_stays: d.join(files.ed_stays),
        admissions: d.join(files.admissions),
        ed_diagnoses: d.join(files.ed_diagnoses),
        hosp_diagnoses: d.join(files.hosp_diagnoses),
        mapping: d.join("nope.tsv"),
    };
    let err = build_dataset(&inputs, &BuildOptions { threshold: 1, seed: 0, mode: IngestMode::Strict }, &d.join("out")).err().unwrap();
    assert!(err.is_io());
    assert!(err.to_string().contains("nope.tsv"));
}
