//! Synthetic data with known ground truth: a planted-signature labeled
//! dataset for learning checks, and a small MIMIC-style cohort fixture for
//! exercising the build pipeline end to end.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{DiagnosisSet, RecordDiagnoses, Site, StayKind};
use crate::dataset::{assign_folds, build_matrix, DatasetError, LabeledDataset, RecordMeta, SignalRef};
use crate::icd::{IcdCode, LabelSet};
use crate::signal::{self, default_lead_names, CleanEcg, ManifestRow, RawEcg, SignalError};

/// Label vocabulary of the planted dataset; label `j` lives on lead `j`.
pub const PLANTED_CODES: [&str; 8] = ["E11", "I10", "I21", "I48", "I50", "J44", "N18", "R07"];

/// Burst geometry in samples. `BURST_PERIOD + BURST_LEN` equals the default
/// crop length, so every 250-sample window holds one complete burst.
pub const BURST_LEN: usize = 50;
pub const BURST_PERIOD: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_records: usize,
    pub n_leads: usize,
    pub len: usize,
    pub prevalence: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig { n_records: 512, n_leads: 12, len: 1000, prevalence: 0.3, amplitude: 1.0, noise: 0.2, seed: 0 }
    }
}

/// Frequency in Hz of the burst carried by label `j`.
pub fn burst_freq(j: usize) -> f64 {
    4.0 + j as f64
}

/// Adds Hann-windowed sinusoid bursts of `freq` every `BURST_PERIOD`
/// samples, starting at `offset`.
fn add_bursts(lead: &mut [f64], freq: f64, amplitude: f64, offset: usize) {
    let mut start = offset;
    while start < lead.len() {
        for k in 0..BURST_LEN.min(lead.len() - start) {
            let w = 0.5 - 0.5 * (2.0 * PI * k as f64 / (BURST_LEN - 1) as f64).cos();
            lead[start + k] += amplitude * w * (2.0 * PI * freq * k as f64 / signal::TARGET_FS).sin();
        }
        start += BURST_PERIOD;
    }
}

/// One record: label bits and the 100 Hz waveform. Leads without a label
/// of their own carry distractor bursts at an unused frequency.
fn planted_record(cfg: &PlantedConfig, rng: &mut ChaCha8Rng) -> (Vec<bool>, CleanEcg) {
    let n_labels = PLANTED_CODES.len();
    let labels: Vec<bool> = (0..n_labels).map(|_| rng.gen_bool(cfg.prevalence)).collect();
    let normal = Normal::new(0.0, cfg.noise).expect("noise is finite and non-negative");
    let mut samples: Vec<Vec<f64>> = (0..cfg.n_leads).map(|_| (0..cfg.len).map(|_| normal.sample(rng)).collect()).collect();
    for (j, &on) in labels.iter().enumerate() {
        if on && j < cfg.n_leads {
            add_bursts(&mut samples[j], burst_freq(j), cfg.amplitude, rng.gen_range(0..BURST_PERIOD));
        }
    }
    for lead in samples.iter_mut().skip(n_labels) {
        if rng.gen_bool(0.5) {
            add_bursts(lead, burst_freq(n_labels + 4), cfg.amplitude, rng.gen_range(0..BURST_PERIOD));
        }
    }
    (labels, CleanEcg { leads: default_lead_names(cfg.n_leads), samples })
}

/// Planted-signature dataset: every record is an ED record of its own
/// subject with an ED label source; folds are assigned by subject.
pub fn planted_dataset(cfg: &PlantedConfig) -> Result<LabeledDataset, DatasetError> {
    let base = NaiveDate::from_ymd_opt(2150, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time");
    let subject = |i: usize| cfg.seed.wrapping_mul(1_000_000).wrapping_add(i as u64 + 1);
    let folds = assign_folds((0..cfg.n_records).map(subject), cfg.seed);
    let generated: Vec<(Vec<bool>, CleanEcg)> = (0..cfg.n_records)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            planted_record(cfg, &mut rng)
        })
        .collect();
    let codes: Vec<IcdCode> = PLANTED_CODES.iter().map(|c| IcdCode::icd10(c).expect("valid code")).collect();
    let mut records = Vec::with_capacity(cfg.n_records);
    let mut dx = BTreeMap::new();
    for (i, (labels, ecg)) in generated.into_iter().enumerate() {
        let sid = subject(i);
        let record_id = format!("planted-{}-{i:05}", cfg.seed);
        let meta = RecordMeta {
            record_id: record_id.clone(),
            subject_id: sid,
            ecg_time: base + Duration::minutes(i as i64),
            site: Site::Ed,
            ed_stay: Some(sid),
            hosp_admission: None,
            fold: folds.fold(sid).ok_or(DatasetError::UnassignedSubject(sid))?,
        };
        let set = DiagnosisSet {
            record_id: record_id.clone(),
            codes: codes.iter().zip(&labels).filter(|(_, &on)| on).map(|(c, _)| c.clone()).collect(),
            source: StayKind::Ed,
        };
        dx.insert(record_id, RecordDiagnoses { ed: Some(set), hosp: None });
        records.push((meta, SignalRef::InMemory(Arc::new(ecg))));
    }
    build_matrix(records, &dx, LabelSet::from_codes(codes, 0))
}

/// Subjects in the cohort fixture.
pub const FIXTURE_SUBJECTS: u64 = 20;
/// Source rate and duration of fixture waveforms.
pub const FIXTURE_FS: f64 = 500.0;
pub const FIXTURE_SECONDS: usize = 10;

/// Paths written by [`write_cohort_fixture`], relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureFiles {
    pub records: PathBuf,
    pub ed_stays: PathBuf,
    pub admissions: PathBuf,
    pub ed_diagnoses: PathBuf,
    pub hosp_diagnoses: PathBuf,
    pub mapping: PathBuf,
}

fn day(s: u64) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2150, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time") + Duration::days(s as i64)
}

fn stamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%d %H:%M:%S").to_string()
}

/// Fixture waveform: lead-dependent sinusoids with a few planted gaps.
fn fixture_wave(s: u64, tag: char) -> RawEcg {
    let n = FIXTURE_SECONDS * FIXTURE_FS as usize;
    let mut samples: Vec<Vec<f64>> = (0..12)
        .map(|l| (0..n).map(|t| 0.5 * (2.0 * PI * (1.0 + l as f64 * 0.25) * t as f64 / FIXTURE_FS + s as f64).sin()).collect())
        .collect();
    match (s, tag) {
        (1, 'a') => samples[0][100..110].iter_mut().for_each(|v| *v = f64::NAN),
        (2, 'a') => samples[11].iter_mut().for_each(|v| *v = f64::NAN),
        (3, 'a') => samples[5][..20].iter_mut().for_each(|v| *v = f64::NAN),
        _ => {}
    }
    RawEcg::new(default_lead_names(12), samples, FIXTURE_FS).expect("fixture waveform is rectangular")
}

fn write_table(path: &Path, text: &str) -> Result<(), SignalError> {
    fs::write(path, text).map_err(|source| SignalError::Io { path: path.display().to_string(), source })
}

/// Writes a deterministic 20-subject cohort with MIMIC-style tables.
///
/// Subject `s` (id `10000+s`) has ED stay `30000+s` on day `s`, 08:00–16:00.
/// Even subjects are admitted (`20000+s`) at 15:00 for three days. ECGs:
/// `a` at 09:00 for everyone, `b` at 09:30 when `s%3==0`, `c` on day `s+1`
/// inside the admission when `s%4==0`, and `d` twenty days later (unlinked)
/// when `s%5==0`. Stay `30007` has no diagnoses. ED codes are `I4891` (odd)
/// or ICD-9 `42731` (even) plus `R079`; admissions carry `I2109`, `I10`,
/// and `E119` when `s%4==0`. Three waveforms carry gaps: an interior gap of
/// 10 samples, a fully missing lead, and a 20-sample leading gap.
pub fn write_cohort_fixture(dir: &Path) -> Result<FixtureFiles, SignalError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| SignalError::Io { path: p.display().to_string(), source }
    };
    let wave_dir = dir.join("waveforms");
    fs::create_dir_all(&wave_dir).map_err(io(&wave_dir))?;
    let mut edstays = String::from("subject_id,stay_id,hadm_id,intime,outtime\n");
    let mut admissions = String::from("subject_id,hadm_id,admittime,dischtime,deathtime\n");
    let mut ed_dx = String::from("stay_id,seq_num,icd_code,icd_version\n");
    let mut hosp_dx = String::from("hadm_id,seq_num,icd_code,icd_version\n");
    let mut rows = Vec::new();
    for s in 1..=FIXTURE_SUBJECTS {
        let (sid, stay, hadm) = (10000 + s, 30000 + s, 20000 + s);
        let d = day(s);
        let admitted = s % 2 == 0;
        let hadm_col = if admitted { hadm.to_string() } else { String::new() };
        edstays.push_str(&format!(
            "{sid},{stay},{hadm_col},{},{}\n",
            stamp(d + Duration::hours(8)),
            stamp(d + Duration::hours(16))
        ));
        if admitted {
            admissions.push_str(&format!("{sid},{hadm},{},{},\n", stamp(d + Duration::hours(15)), stamp(d + Duration::days(3) + Duration::hours(12))));
            hosp_dx.push_str(&format!("{hadm},1,I2109,10\n{hadm},2,I10,10\n"));
            if s % 4 == 0 {
                hosp_dx.push_str(&format!("{hadm},3,E119,10\n"));
            }
        }
        if s != 7 {
            let first = if s % 2 == 1 { "I4891,10" } else { "42731,9" };
            ed_dx.push_str(&format!("{stay},1,{first}\n{stay},2,R079,10\n"));
        }
        let mut ecgs = vec![('a', d + Duration::hours(9))];
        if s % 3 == 0 {
            ecgs.push(('b', d + Duration::minutes(9 * 60 + 30)));
        }
        if s % 4 == 0 {
            ecgs.push(('c', d + Duration::days(1) + Duration::hours(10)));
        }
        if s % 5 == 0 {
            ecgs.push(('d', d + Duration::days(20) + Duration::hours(10)));
        }
        for (tag, t) in ecgs {
            let record_id = format!("r{s:02}{tag}");
            let wave = fixture_wave(s, tag);
            let rel = PathBuf::from("waveforms").join(format!("{record_id}.ecg1"));
            signal::save_binary(&dir.join(&rel), &wave)?;
            rows.push(ManifestRow {
                record_id,
                subject_id: sid,
                ecg_time: stamp(t),
                fs: FIXTURE_FS,
                n_samples: wave.len(),
                path: rel.display().to_string(),
            });
        }
    }
    let files = FixtureFiles {
        records: "records.csv".into(),
        ed_stays: "edstays.csv".into(),
        admissions: "admissions.csv".into(),
        ed_diagnoses: "ed_diagnosis.csv".into(),
        hosp_diagnoses: "hosp_diagnosis.csv".into(),
        mapping: "icd9_to_icd10.tsv".into(),
    };
    signal::write_manifest(&dir.join(&files.records), &rows)?;
    write_table(&dir.join(&files.ed_stays), &edstays)?;
    write_table(&dir.join(&files.admissions), &admissions)?;
    write_table(&dir.join(&files.ed_diagnoses), &ed_dx)?;
    write_table(&dir.join(&files.hosp_diagnoses), &hosp_dx)?;
    write_table(&dir.join(&files.mapping), "# icd9\ticd10\n42731\tI480\n")?;
    Ok(files)
}
