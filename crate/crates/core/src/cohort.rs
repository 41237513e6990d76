//! Links ECG recordings to ED stays and hospital admissions by timestamp
//! containment and resolves which discharge diagnosis set labels each one.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icd::{self, IcdCode, IcdError, IcdVersion, MappingTable};

pub const MAX_ED_CODES: usize = 9;
pub const MAX_HOSP_CODES: usize = 39;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{file} row {row}: {msg}")]
    Table { file: String, row: usize, msg: String },
    #[error("bad timestamp {0:?}")]
    Timestamp(String),
    #[error(transparent)]
    Icd(#[from] IcdError),
}

pub fn parse_time(s: &str) -> Result<NaiveDateTime, CohortError> {
    let s = s.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    Err(CohortError::Timestamp(s.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StayKind {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "HOSP")]
    Hosp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "HOSP")]
    Hosp,
    #[serde(rename = "NONE")]
    None,
}

/// An ED stay or a hospital admission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StayInterval {
    pub subject_id: u64,
    pub id: u64,
    pub kind: StayKind,
    pub in_time: NaiveDateTime,
    pub out_time: NaiveDateTime,
    /// For ED stays: the admission recorded in the stay table, if any.
    pub hadm_id: Option<u64>,
}

impl StayInterval {
    fn contains(&self, t: NaiveDateTime) -> bool {
        self.in_time <= t && t <= self.out_time
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linkage {
    pub record_id: String,
    pub ed_stay: Option<u64>,
    pub hosp_admission: Option<u64>,
    pub site: Site,
}

impl Linkage {
    /// Key used by the first-ECG-per-stay filter.
    pub fn stay_key(&self) -> Option<(StayKind, u64)> {
        match self.site {
            Site::Ed => self.ed_stay.map(|s| (StayKind::Ed, s)),
            Site::Hosp => self.hosp_admission.map(|h| (StayKind::Hosp, h)),
            Site::None => None,
        }
    }
}

/// Counters for rows skipped while loading tables and for ambiguous links.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub inverted_intervals: usize,
    pub overlapping_ed: usize,
    pub overlapping_hosp: usize,
}

#[derive(Debug, Default)]
struct SubjectIntervals {
    ed: Vec<StayInterval>,
    hosp: Vec<StayInterval>,
}

/// Per-subject interval index.
#[derive(Debug, Default)]
pub struct Linker {
    subjects: HashMap<u64, SubjectIntervals>,
    admissions_by_id: HashMap<u64, (u64, NaiveDateTime, NaiveDateTime)>,
    pub stats: LinkStats,
}

impl Linker {
    /// Intervals with `in_time > out_time` are dropped and counted.
    pub fn new(ed_stays: Vec<StayInterval>, admissions: Vec<StayInterval>) -> Self {
        let mut linker = Linker::default();
        for s in ed_stays.into_iter().chain(admissions) {
            if s.in_time > s.out_time {
                linker.stats.inverted_intervals += 1;
                continue;
            }
            if s.kind == StayKind::Hosp {
                linker
                    .admissions_by_id
                    .insert(s.id, (s.subject_id, s.in_time, s.out_time));
            }
            let entry = linker.subjects.entry(s.subject_id).or_default();
            match s.kind {
                StayKind::Ed => entry.ed.push(s),
                StayKind::Hosp => entry.hosp.push(s),
            }
        }
        for e in linker.subjects.values_mut() {
            e.ed.sort_by_key(|s| (s.in_time, s.id));
            e.hosp.sort_by_key(|s| (s.in_time, s.id));
        }
        linker
    }

    /// Among intervals containing `t`, the one with the latest `in_time`
    /// (ties: larger id). Returns the pick and whether it was ambiguous.
    fn containing(list: &[StayInterval], t: NaiveDateTime) -> (Option<&StayInterval>, bool) {
        let mut hits = list.iter().filter(|s| s.contains(t));
        let first = hits.next();
        let mut best = first;
        let mut ambiguous = false;
        for h in hits {
            ambiguous = true;
            best = Some(h);
        }
        (best, ambiguous)
    }

    /// Sites an ECG: ED when inside an ED stay, else HOSP when inside an
    /// admission, else NONE. ED records also carry the subsequent admission.
    pub fn link_record(&mut self, record_id: &str, subject_id: u64, ecg_time: NaiveDateTime) -> Linkage {
        let (linkage, overlap_ed, overlap_hosp) = self.link_pure(record_id, subject_id, ecg_time);
        if overlap_ed {
            self.stats.overlapping_ed += 1;
        }
        if overlap_hosp {
            self.stats.overlapping_hosp += 1;
        }
        linkage
    }

    fn link_pure(&self, record_id: &str, subject_id: u64, t: NaiveDateTime) -> (Linkage, bool, bool) {
        let mut linkage = Linkage {
            record_id: record_id.to_string(),
            ed_stay: None,
            hosp_admission: None,
            site: Site::None,
        };
        let Some(subj) = self.subjects.get(&subject_id) else {
            return (linkage, false, false);
        };
        let (ed, overlap_ed) = Self::containing(&subj.ed, t);
        let (hosp, overlap_hosp) = Self::containing(&subj.hosp, t);
        if overlap_ed {
            log::warn!("record {record_id}: several ED stays contain the ECG time");
        }
        if overlap_hosp {
            log::warn!("record {record_id}: several admissions contain the ECG time");
        }
        if let Some(stay) = ed {
            linkage.site = Site::Ed;
            linkage.ed_stay = Some(stay.id);
            linkage.hosp_admission = self.admission_for_stay(subj, stay, hosp);
        } else if let Some(adm) = hosp {
            linkage.site = Site::Hosp;
            linkage.hosp_admission = Some(adm.id);
        }
        (linkage, overlap_ed, overlap_hosp)
    }

    /// Stay-table `hadm_id` first; otherwise an admission containing the ECG,
    /// otherwise the earliest admission starting during the ED stay.
    fn admission_for_stay(
        &self,
        subj: &SubjectIntervals,
        stay: &StayInterval,
        containing: Option<&StayInterval>,
    ) -> Option<u64> {
        if let Some(h) = stay.hadm_id {
            if self
                .admissions_by_id
                .get(&h)
                .is_some_and(|(sid, _, _)| *sid == stay.subject_id)
            {
                return Some(h);
            }
        }
        if let Some(a) = containing {
            return Some(a.id);
        }
        subj.hosp
            .iter()
            .find(|a| stay.in_time <= a.in_time && a.in_time <= stay.out_time)
            .map(|a| a.id)
    }

    /// Links a batch in parallel; output order follows input order.
    pub fn link_all(&mut self, records: &[(String, u64, NaiveDateTime)]) -> Vec<Linkage> {
        let results: Vec<(Linkage, bool, bool)> = records
            .par_iter()
            .map(|(rid, sid, t)| self.link_pure(rid, *sid, *t))
            .collect();
        results
            .into_iter()
            .map(|(l, oe, oh)| {
                self.stats.overlapping_ed += oe as usize;
                self.stats.overlapping_hosp += oh as usize;
                l
            })
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct EdStayRow {
    subject_id: u64,
    stay_id: u64,
    hadm_id: Option<u64>,
    intime: String,
    outtime: String,
}

#[derive(Debug, Deserialize)]
struct AdmissionRow {
    subject_id: u64,
    hadm_id: u64,
    admittime: String,
    dischtime: Option<String>,
    deathtime: Option<String>,
}

fn table_err(file: &str, row: usize, msg: impl ToString) -> CohortError {
    CohortError::Table {
        file: file.to_string(),
        row,
        msg: msg.to_string(),
    }
}

fn non_empty(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

/// Reads `edstays.csv (subject_id,stay_id,hadm_id,intime,outtime)`.
pub fn read_ed_stays<R: Read>(r: R, name: &str) -> Result<Vec<StayInterval>, CohortError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<EdStayRow>().enumerate() {
        let row = row.map_err(|e| table_err(name, i + 2, e))?;
        out.push(StayInterval {
            subject_id: row.subject_id,
            id: row.stay_id,
            kind: StayKind::Ed,
            in_time: parse_time(&row.intime).map_err(|e| table_err(name, i + 2, e))?,
            out_time: parse_time(&row.outtime).map_err(|e| table_err(name, i + 2, e))?,
            hadm_id: row.hadm_id,
        });
    }
    Ok(out)
}

/// Reads `admissions.csv (subject_id,hadm_id,admittime,dischtime,deathtime)`.
/// The death time stands in for a missing discharge time.
pub fn read_admissions<R: Read>(r: R, name: &str) -> Result<Vec<StayInterval>, CohortError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<AdmissionRow>().enumerate() {
        let row = row.map_err(|e| table_err(name, i + 2, e))?;
        let end = non_empty(&row.dischtime)
            .or(non_empty(&row.deathtime))
            .ok_or_else(|| table_err(name, i + 2, "neither dischtime nor deathtime"))?;
        out.push(StayInterval {
            subject_id: row.subject_id,
            id: row.hadm_id,
            kind: StayKind::Hosp,
            in_time: parse_time(&row.admittime).map_err(|e| table_err(name, i + 2, e))?,
            out_time: parse_time(end).map_err(|e| table_err(name, i + 2, e))?,
            hadm_id: Some(row.hadm_id),
        });
    }
    Ok(out)
}

/// Diagnosis rows keyed by stay_id (ED) or hadm_id (hospital), in `seq_num`
/// order.
#[derive(Debug, Clone, Default)]
pub struct DiagnosisTable {
    rows: HashMap<u64, Vec<(u32, String, IcdVersion)>>,
}

impl DiagnosisTable {
    pub fn insert(&mut self, key: u64, seq_num: u32, code: &str, version: IcdVersion) {
        let list = self.rows.entry(key).or_default();
        list.push((seq_num, code.to_string(), version));
        list.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    }

    pub fn get(&self, key: u64) -> &[(u32, String, IcdVersion)] {
        self.rows.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reads `diagnosis.csv (stay_id|hadm_id,seq_num,icd_code,icd_version)`.
    /// The key column is the first column, whichever of the two names it has.
    pub fn read<R: Read>(r: R, name: &str) -> Result<Self, CohortError> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(|e| table_err(name, 1, e))?.clone();
        let col = |n: &str| headers.iter().position(|h| h.trim() == n);
        let key_col = col("stay_id")
            .or_else(|| col("hadm_id"))
            .ok_or_else(|| table_err(name, 1, "missing stay_id/hadm_id column"))?;
        let seq_col = col("seq_num").ok_or_else(|| table_err(name, 1, "missing seq_num column"))?;
        let code_col = col("icd_code").ok_or_else(|| table_err(name, 1, "missing icd_code column"))?;
        let ver_col = col("icd_version").ok_or_else(|| table_err(name, 1, "missing icd_version column"))?;
        let mut table = DiagnosisTable::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| table_err(name, i + 2, e))?;
            let field = |c: usize| rec.get(c).unwrap_or("").trim();
            let key: u64 = field(key_col).parse().map_err(|e| table_err(name, i + 2, e))?;
            let seq: u32 = field(seq_col).parse().map_err(|e| table_err(name, i + 2, e))?;
            let ver = IcdVersion::from_column(field(ver_col)).map_err(|e| table_err(name, i + 2, e))?;
            table.insert(key, seq, field(code_col), ver);
        }
        Ok(table)
    }
}

/// Normalized, ancestor-expanded diagnoses of one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisSet {
    pub record_id: String,
    pub codes: BTreeSet<IcdCode>,
    pub source: StayKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Unlinked,
    EmptyDiagnoses,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Labeled(DiagnosisSet),
    Discard(DiscardReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IngestMode {
    /// Any malformed or unmappable code aborts with an error.
    #[default]
    Strict,
    /// Bad codes are skipped and counted.
    Permissive,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub malformed_codes: usize,
    pub unmappable_icd9: usize,
    pub oversized_ed_sets: usize,
    pub oversized_hosp_sets: usize,
}

impl IngestStats {
    pub fn merge(&mut self, o: &IngestStats) {
        self.malformed_codes += o.malformed_codes;
        self.unmappable_icd9 += o.unmappable_icd9;
        self.oversized_ed_sets += o.oversized_ed_sets;
        self.oversized_hosp_sets += o.oversized_hosp_sets;
    }
}

/// Both candidate diagnosis sets of one record, before precedence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordDiagnoses {
    pub ed: Option<DiagnosisSet>,
    pub hosp: Option<DiagnosisSet>,
}

impl RecordDiagnoses {
    /// Hospital diagnoses take precedence over ED diagnoses.
    pub fn combined(&self) -> Option<&DiagnosisSet> {
        self.hosp.as_ref().or(self.ed.as_ref())
    }
}

/// Diagnosis lookup bundle shared by all records.
pub struct DiagnosisSources<'a> {
    pub ed: &'a DiagnosisTable,
    pub hosp: &'a DiagnosisTable,
    pub mapping: &'a MappingTable,
    pub mode: IngestMode,
}

impl DiagnosisSources<'_> {
    fn expand(
        &self,
        record_id: &str,
        rows: &[(u32, String, IcdVersion)],
        source: StayKind,
        stats: &mut IngestStats,
    ) -> Result<Option<DiagnosisSet>, IcdError> {
        if rows.is_empty() {
            return Ok(None);
        }
        let limit = match source {
            StayKind::Ed => MAX_ED_CODES,
            StayKind::Hosp => MAX_HOSP_CODES,
        };
        if rows.len() > limit {
            match source {
                StayKind::Ed => stats.oversized_ed_sets += 1,
                StayKind::Hosp => stats.oversized_hosp_sets += 1,
            }
        }
        let mut normalized = Vec::new();
        for (_, raw, ver) in rows {
            match icd::normalize(raw, *ver, self.mapping) {
                Ok(codes) => normalized.extend(codes),
                Err(e) if self.mode == IngestMode::Permissive => match e {
                    IcdError::UnmappableIcd9(_) => stats.unmappable_icd9 += 1,
                    _ => stats.malformed_codes += 1,
                },
                Err(e) => return Err(e),
            }
        }
        let codes = icd::expand_all(&normalized);
        if codes.is_empty() {
            return Ok(None);
        }
        Ok(Some(DiagnosisSet {
            record_id: record_id.to_string(),
            codes,
            source,
        }))
    }

    /// Both ED and hospital sets for a linked record.
    pub fn record_diagnoses(
        &self,
        linkage: &Linkage,
        stats: &mut IngestStats,
    ) -> Result<RecordDiagnoses, IcdError> {
        let ed = match linkage.ed_stay {
            Some(s) => self.expand(&linkage.record_id, self.ed.get(s), StayKind::Ed, stats)?,
            None => None,
        };
        let hosp = match linkage.hosp_admission {
            Some(h) => self.expand(&linkage.record_id, self.hosp.get(h), StayKind::Hosp, stats)?,
            None => None,
        };
        Ok(RecordDiagnoses { ed, hosp })
    }

    /// Picks the hospital set when present, otherwise the ED set.
    pub fn resolve_diagnoses(
        &self,
        linkage: &Linkage,
        stats: &mut IngestStats,
    ) -> Result<Resolution, IcdError> {
        if linkage.site == Site::None {
            return Ok(Resolution::Discard(DiscardReason::Unlinked));
        }
        let both = self.record_diagnoses(linkage, stats)?;
        Ok(match both.combined() {
            Some(set) => Resolution::Labeled(set.clone()),
            None => Resolution::Discard(DiscardReason::EmptyDiagnoses),
        })
    }
}

pub fn read_ed_stays_path(path: &Path) -> Result<Vec<StayInterval>, CohortError> {
    let f = std::fs::File::open(path).map_err(|e| table_err(&path.display().to_string(), 0, e))?;
    read_ed_stays(f, &path.display().to_string())
}

pub fn read_admissions_path(path: &Path) -> Result<Vec<StayInterval>, CohortError> {
    let f = std::fs::File::open(path).map_err(|e| table_err(&path.display().to_string(), 0, e))?;
    read_admissions(f, &path.display().to_string())
}

pub fn read_diagnoses_path(path: &Path) -> Result<DiagnosisTable, CohortError> {
    let f = std::fs::File::open(path).map_err(|e| table_err(&path.display().to_string(), 0, e))?;
    DiagnosisTable::read(f, &path.display().to_string())
}
