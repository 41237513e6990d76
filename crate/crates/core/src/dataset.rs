//! Fold assignment, labeled matrices, first-ECG evaluation filtering and
//! T(A2B)-E(C2D) scenario views.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{RecordDiagnoses, Site, StayKind};
use crate::icd::{chapter_of, Chapter, IcdCode, LabelSet};
use crate::signal::{self, CleanEcg};

pub const N_FOLDS: u8 = 10;
pub const VAL_FOLD: u8 = 9;
pub const TEST_FOLD: u8 = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("diagnosis set for unknown record {0:?}")]
    UnknownRecord(String),
    #[error("subject {0} has no fold assignment")]
    UnassignedSubject(u64),
    #[error("cannot parse scenario {0:?}: expected T(A2B)-E(C2D) with A..D in ALL, ED, HOSP")]
    ScenarioParse(String),
    #[error("fold file row {row}: {msg}")]
    FoldFile { row: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Signal(#[from] signal::SignalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn of_fold(fold: u8) -> Split {
        match fold {
            VAL_FOLD => Split::Validation,
            TEST_FOLD => Split::Test,
            _ => Split::Train,
        }
    }
}

/// Patient-level fold map. Folds 1–8 train, 9 validation, 10 test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: BTreeMap<u64, u8>,
    pub seed: u64,
}

/// Balanced shuffling: subjects are sorted, shuffled with a ChaCha8 stream
/// seeded from `seed` (Fisher–Yates via `SliceRandom::shuffle`), then dealt
/// round-robin into folds 1..=10. Fold sizes differ by at most one.
pub fn assign_folds<I: IntoIterator<Item = u64>>(subjects: I, seed: u64) -> FoldAssignment {
    let mut subjects: Vec<u64> = subjects.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let folds = subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, (i % N_FOLDS as usize) as u8 + 1))
        .collect();
    FoldAssignment { folds, seed }
}

impl FoldAssignment {
    pub fn fold(&self, subject: u64) -> Option<u8> {
        self.folds.get(&subject).copied()
    }

    pub fn histogram(&self) -> [usize; N_FOLDS as usize] {
        let mut h = [0; N_FOLDS as usize];
        for f in self.folds.values() {
            h[(*f - 1) as usize] += 1;
        }
        h
    }

    /// `subject_id,fold` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject_id,fold\n");
        for (subj, fold) in &self.folds {
            s.push_str(&format!("{subj},{fold}\n"));
        }
        s
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self, DatasetError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut folds = BTreeMap::new();
        for (i, rec) in rdr.deserialize::<(u64, u8)>().enumerate() {
            let (subj, fold) = rec.map_err(|e| DatasetError::FoldFile { row: i + 2, msg: e.to_string() })?;
            if !(1..=N_FOLDS).contains(&fold) {
                return Err(DatasetError::FoldFile { row: i + 2, msg: format!("fold {fold} out of range") });
            }
            if folds.insert(subj, fold).is_some() {
                return Err(DatasetError::FoldFile { row: i + 2, msg: format!("duplicate subject {subj}") });
            }
        }
        Ok(FoldAssignment { folds, seed })
    }
}

/// ECG subset or label source selector in scenario strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    All,
    Ed,
    Hosp,
}

impl Subset {
    fn token(self) -> &'static str {
        match self {
            Subset::All => "ALL",
            Subset::Ed => "ED",
            Subset::Hosp => "HOSP",
        }
    }

    fn parse(s: &str) -> Option<Subset> {
        match s {
            "ALL" => Some(Subset::All),
            "ED" => Some(Subset::Ed),
            "HOSP" => Some(Subset::Hosp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScenarioSpec {
    pub train_subset: Subset,
    pub train_labels: Subset,
    pub eval_subset: Subset,
    pub eval_labels: Subset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

impl ScenarioSpec {
    pub const MAIN: ScenarioSpec = ScenarioSpec {
        train_subset: Subset::Ed,
        train_labels: Subset::All,
        eval_subset: Subset::Ed,
        eval_labels: Subset::All,
    };

    pub fn for_phase(&self, phase: Phase) -> (Subset, Subset) {
        match phase {
            Phase::Train => (self.train_subset, self.train_labels),
            Phase::Eval => (self.eval_subset, self.eval_labels),
        }
    }
}

fn parse_pair(s: &str) -> Option<(Subset, Subset)> {
    let (a, b) = s.split_once('2')?;
    Some((Subset::parse(a)?, Subset::parse(b)?))
}

impl FromStr for ScenarioSpec {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DatasetError::ScenarioParse(s.to_string());
        let rest = s.trim().strip_prefix("T(").ok_or_else(err)?;
        let (train, rest) = rest.split_once(")-E(").ok_or_else(err)?;
        let eval = rest.strip_suffix(')').ok_or_else(err)?;
        let (train_subset, train_labels) = parse_pair(train).ok_or_else(err)?;
        let (eval_subset, eval_labels) = parse_pair(eval).ok_or_else(err)?;
        Ok(ScenarioSpec {
            train_subset,
            train_labels,
            eval_subset,
            eval_labels,
        })
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "T({}2{})-E({}2{})",
            self.train_subset.token(),
            self.train_labels.token(),
            self.eval_subset.token(),
            self.eval_labels.token()
        )
    }
}

impl Serialize for ScenarioSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ScenarioSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Column-major bit-packed binary matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words = rows.div_ceil(64);
        BitMatrix { rows, cols, words, data: vec![0; words * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        (self.data[c * self.words + r / 64] >> (r % 64)) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize) {
        self.data[c * self.words + r / 64] |= 1 << (r % 64);
    }

    pub fn column_count(&self, c: usize) -> usize {
        self.data[c * self.words..(c + 1) * self.words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }
}

/// Where a record's preprocessed waveform lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SignalRef {
    #[serde(skip)]
    InMemory(Arc<CleanEcg>),
    /// `ECG1` binary cache file at 100 Hz.
    Cached(PathBuf),
}

impl SignalRef {
    pub fn load(&self) -> Result<Arc<CleanEcg>, DatasetError> {
        match self {
            SignalRef::InMemory(s) => Ok(Arc::clone(s)),
            SignalRef::Cached(path) => {
                let raw = signal::load_payload(path, signal::TARGET_FS)?;
                Ok(Arc::new(CleanEcg { leads: raw.leads, samples: raw.samples }))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub record_id: String,
    pub subject_id: u64,
    pub ecg_time: NaiveDateTime,
    pub site: Site,
    pub ed_stay: Option<u64>,
    pub hosp_admission: Option<u64>,
    pub fold: u8,
}

impl RecordMeta {
    /// stay_id for ED records, hadm_id for hospital records.
    pub fn stay_key(&self) -> Option<(StayKind, u64)> {
        match self.site {
            Site::Ed => self.ed_stay.map(|s| (StayKind::Ed, s)),
            Site::Hosp => self.hosp_admission.map(|h| (StayKind::Hosp, h)),
            Site::None => None,
        }
    }

    pub fn split(&self) -> Split {
        Split::of_fold(self.fold)
    }
}

/// Records × labels, one bit matrix per label source. The default (`ALL`)
/// labels of a record are its hospital row when it has one, otherwise its
/// ED row.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    records: Vec<RecordMeta>,
    signals: Vec<SignalRef>,
    label_set: LabelSet,
    ed_y: BitMatrix,
    hosp_y: BitMatrix,
    has_ed: Vec<bool>,
    has_hosp: Vec<bool>,
}

/// Which diagnosis set supplies the targets.
pub type LabelSource = Subset;

/// Assembles the label matrices. Every diagnosis entry must belong to one
/// of `records`; records without an entry carry no label source.
pub fn build_matrix(
    records: Vec<(RecordMeta, SignalRef)>,
    diagnoses: &BTreeMap<String, RecordDiagnoses>,
    label_set: LabelSet,
) -> Result<LabeledDataset, DatasetError> {
    let index: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, (r, _))| (r.record_id.as_str(), i))
        .collect();
    if let Some(unknown) = diagnoses.keys().find(|k| !index.contains_key(k.as_str())) {
        return Err(DatasetError::UnknownRecord(unknown.clone()));
    }
    let n = records.len();
    let cols = label_set.len();
    let rows: Vec<(Option<Vec<usize>>, Option<Vec<usize>>)> = records
        .par_iter()
        .map(|(r, _)| {
            let cols_of = |codes: &BTreeSet<IcdCode>| codes.iter().filter_map(|c| label_set.column(c)).collect();
            match diagnoses.get(&r.record_id) {
                Some(d) => (d.ed.as_ref().map(|s| cols_of(&s.codes)), d.hosp.as_ref().map(|s| cols_of(&s.codes))),
                None => (None, None),
            }
        })
        .collect();
    let mut ed_y = BitMatrix::zeros(n, cols);
    let mut hosp_y = BitMatrix::zeros(n, cols);
    let mut has_ed = vec![false; n];
    let mut has_hosp = vec![false; n];
    for (i, (ed, hosp)) in rows.into_iter().enumerate() {
        if let Some(cs) = ed {
            has_ed[i] = true;
            cs.into_iter().for_each(|j| ed_y.set(i, j));
        }
        if let Some(cs) = hosp {
            has_hosp[i] = true;
            cs.into_iter().for_each(|j| hosp_y.set(i, j));
        }
    }
    let (records, signals) = records.into_iter().unzip();
    Ok(LabeledDataset { records, signals, label_set, ed_y, hosp_y, has_ed, has_hosp })
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RecordMeta] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &RecordMeta {
        &self.records[i]
    }

    pub fn signal_ref(&self, i: usize) -> &SignalRef {
        &self.signals[i]
    }

    pub fn signal(&self, i: usize) -> Result<Arc<CleanEcg>, DatasetError> {
        self.signals[i].load()
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn has_source(&self, i: usize, source: LabelSource) -> bool {
        match source {
            Subset::All => self.has_ed[i] || self.has_hosp[i],
            Subset::Ed => self.has_ed[i],
            Subset::Hosp => self.has_hosp[i],
        }
    }

    /// Label bit under `source`; false when the record lacks that source.
    pub fn label(&self, i: usize, j: usize, source: LabelSource) -> bool {
        match source {
            Subset::All if self.has_hosp[i] => self.hosp_y.get(i, j),
            Subset::All | Subset::Ed => self.has_ed[i] && self.ed_y.get(i, j),
            Subset::Hosp => self.has_hosp[i] && self.hosp_y.get(i, j),
        }
    }

    /// Source of the precedence-combined label set.
    pub fn combined_source(&self, i: usize) -> Option<StayKind> {
        if self.has_hosp[i] {
            Some(StayKind::Hosp)
        } else if self.has_ed[i] {
            Some(StayKind::Ed)
        } else {
            None
        }
    }

    /// True when no label-set column is positive under the combined source.
    pub fn is_zero_row(&self, i: usize) -> bool {
        (0..self.label_set.len()).all(|j| !self.label(i, j, Subset::All))
    }

    /// View over every record with the combined label source.
    pub fn view(&self) -> DatasetView<'_> {
        DatasetView { parent: self, rows: (0..self.len()).collect(), source: Subset::All }
    }

    /// Scenario filter for one phase: ECG subset by site, then records that
    /// carry the requested label source.
    pub fn apply_scenario(&self, spec: &ScenarioSpec, phase: Phase) -> DatasetView<'_> {
        let (subset, source) = spec.for_phase(phase);
        let rows = (0..self.len())
            .filter(|&i| {
                let site = self.records[i].site;
                let site_ok = match subset {
                    Subset::All => site != Site::None,
                    Subset::Ed => site == Site::Ed,
                    Subset::Hosp => site == Site::Hosp,
                };
                site_ok && self.has_source(i, source)
            })
            .collect();
        DatasetView { parent: self, rows, source }
    }
}

/// Index view into a [`LabeledDataset`]; never copies waveforms.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    parent: &'a LabeledDataset,
    rows: Vec<usize>,
    source: LabelSource,
}

impl<'a> DatasetView<'a> {
    pub fn parent(&self) -> &'a LabeledDataset {
        self.parent
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn source(&self) -> LabelSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.parent.label_set.len()
    }

    pub fn record(&self, k: usize) -> &'a RecordMeta {
        &self.parent.records[self.rows[k]]
    }

    pub fn signal(&self, k: usize) -> Result<Arc<CleanEcg>, DatasetError> {
        self.parent.signal(self.rows[k])
    }

    pub fn label(&self, k: usize, j: usize) -> bool {
        self.parent.label(self.rows[k], j, self.source)
    }

    pub fn label_row(&self, k: usize) -> Vec<f64> {
        (0..self.n_labels()).map(|j| if self.label(k, j) { 1.0 } else { 0.0 }).collect()
    }

    /// Dense 0/1 matrix, rows × labels.
    pub fn dense_labels(&self) -> Vec<Vec<u8>> {
        (0..self.len())
            .map(|k| (0..self.n_labels()).map(|j| self.label(k, j) as u8).collect())
            .collect()
    }

    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_labels()];
        for k in 0..self.len() {
            for (j, c) in counts.iter_mut().enumerate() {
                *c += self.label(k, j) as usize;
            }
        }
        counts
    }

    pub fn filter<F: Fn(&RecordMeta) -> bool>(&self, keep: F) -> DatasetView<'a> {
        DatasetView {
            parent: self.parent,
            rows: self.rows.iter().copied().filter(|&i| keep(&self.parent.records[i])).collect(),
            source: self.source,
        }
    }

    pub fn split(&self, split: Split) -> DatasetView<'a> {
        self.filter(|r| r.split() == split)
    }

    /// Validation and test rows are reduced to the earliest ECG per
    /// (subject, stay key); ties go to the smallest record_id. Training rows
    /// pass through unchanged.
    pub fn eval_view(&self) -> DatasetView<'a> {
        let mut first: HashMap<(u64, Option<(StayKind, u64)>), usize> = HashMap::new();
        for &i in &self.rows {
            let r = &self.parent.records[i];
            if r.split() == Split::Train {
                continue;
            }
            let key = (r.subject_id, r.stay_key());
            first
                .entry(key)
                .and_modify(|best| {
                    let b = &self.parent.records[*best];
                    if (r.ecg_time, &r.record_id) < (b.ecg_time, &b.record_id) {
                        *best = i;
                    }
                })
                .or_insert(i);
        }
        let keep: BTreeSet<usize> = first.into_values().collect();
        DatasetView {
            parent: self.parent,
            rows: self
                .rows
                .iter()
                .copied()
                .filter(|&i| self.parent.records[i].split() == Split::Train || keep.contains(&i))
                .collect(),
            source: self.source,
        }
    }

    pub fn subjects(&self) -> BTreeSet<u64> {
        self.rows.iter().map(|&i| self.parent.records[i].subject_id).collect()
    }
}

/// Summary statistics written by the build command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub patients: usize,
    pub labels: usize,
    pub median_ecgs_per_patient: f64,
    pub median_codes_per_record: f64,
    pub ed_source_ratio: f64,
    pub zero_rows: usize,
    pub chapter_distribution: BTreeMap<String, f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl DatasetView<'_> {
    /// Counts for the view. The chapter distribution is the share of positive
    /// label cells falling into each chapter.
    pub fn stats(&self) -> DatasetStats {
        let ls = &self.parent.label_set;
        let mut per_patient: BTreeMap<u64, usize> = BTreeMap::new();
        let mut codes_per_record = Vec::with_capacity(self.len());
        let mut ed_source = 0usize;
        let mut zero_rows = 0usize;
        let counts = self.column_counts();
        for k in 0..self.len() {
            let i = self.rows[k];
            *per_patient.entry(self.parent.records[i].subject_id).or_default() += 1;
            let n_pos = (0..ls.len()).filter(|&j| self.label(k, j)).count();
            codes_per_record.push(n_pos as f64);
            zero_rows += (n_pos == 0) as usize;
            let src = match self.source {
                Subset::All => self.parent.combined_source(i),
                Subset::Ed => Some(StayKind::Ed),
                Subset::Hosp => Some(StayKind::Hosp),
            };
            ed_source += (src == Some(StayKind::Ed)) as usize;
        }
        let mut chapters: BTreeMap<Chapter, usize> = BTreeMap::new();
        for (j, code) in ls.codes().iter().enumerate() {
            if let Ok(ch) = chapter_of(code) {
                *chapters.entry(ch).or_default() += counts[j];
            }
        }
        let total: usize = chapters.values().sum();
        DatasetStats {
            samples: self.len(),
            patients: per_patient.len(),
            labels: ls.len(),
            median_ecgs_per_patient: median(per_patient.values().map(|&c| c as f64).collect()),
            median_codes_per_record: median(codes_per_record),
            ed_source_ratio: if self.is_empty() { 0.0 } else { ed_source as f64 / self.len() as f64 },
            zero_rows,
            chapter_distribution: chapters
                .into_iter()
                .map(|(c, n)| (c.roman().to_string(), if total == 0 { 0.0 } else { n as f64 / total as f64 }))
                .collect(),
        }
    }
}

/// Serialized form of a built dataset: the reproducibility contract between
/// `build`, `train` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub scenario: Option<ScenarioSpec>,
    pub label_set: LabelSet,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(flatten)]
    pub meta: RecordMeta,
    pub signal: PathBuf,
    pub ed_codes: Option<Vec<IcdCode>>,
    pub hosp_codes: Option<Vec<IcdCode>>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))?;
        m.label_set.rebuild_index();
        Ok(m)
    }

    /// Rebuilds the labeled dataset; relative signal paths resolve against
    /// `base`.
    pub fn to_dataset(&self, base: &Path) -> Result<LabeledDataset, DatasetError> {
        use crate::cohort::DiagnosisSet;
        let mut records = Vec::with_capacity(self.records.len());
        let mut dx = BTreeMap::new();
        for r in &self.records {
            let path = if r.signal.is_absolute() { r.signal.clone() } else { base.join(&r.signal) };
            records.push((r.meta.clone(), SignalRef::Cached(path)));
            let mk = |codes: &Option<Vec<IcdCode>>, source| {
                codes.as_ref().map(|c| DiagnosisSet {
                    record_id: r.meta.record_id.clone(),
                    codes: c.iter().cloned().collect(),
                    source,
                })
            };
            dx.insert(
                r.meta.record_id.clone(),
                RecordDiagnoses { ed: mk(&r.ed_codes, StayKind::Ed), hosp: mk(&r.hosp_codes, StayKind::Hosp) },
            );
        }
        build_matrix(records, &dx, self.label_set.clone())
    }
}
