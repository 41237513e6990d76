//! Dataset construction from raw tables: link ECGs to stays, resolve and
//! expand diagnoses, select the label set, assign folds and cache the
//! preprocessed waveforms.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    self, parse_time, CohortError, DiagnosisSources, DiscardReason, IngestMode, IngestStats, LinkStats, Linker, Resolution,
};
use crate::dataset::{assign_folds, DatasetError, DatasetManifest, DatasetStats, FoldAssignment, ManifestRecord, RecordMeta};
use crate::icd::{self, IcdError, MappingTable};
use crate::signal::{self, FillReport, SignalError};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("input file {0} does not exist")]
    MissingInput(PathBuf),
    #[error(transparent)]
    Icd(#[from] IcdError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("record {record_id}: {source}")]
    Record {
        record_id: String,
        #[source]
        source: SignalError,
    },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

impl BuildError {
    /// True for failures to read or write files, as opposed to bad content.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            BuildError::MissingInput(_)
                | BuildError::Icd(IcdError::Io { .. })
                | BuildError::Signal(SignalError::Io { .. })
                | BuildError::Record { source: SignalError::Io { .. }, .. }
                | BuildError::Dataset(DatasetError::Io { .. })
        )
    }
}

/// Raw input tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildInputs {
    /// Record manifest CSV; payload paths resolve against its directory.
    pub records: PathBuf,
    pub ed_stays: PathBuf,
    pub admissions: PathBuf,
    pub ed_diagnoses: PathBuf,
    pub hosp_diagnoses: PathBuf,
    pub mapping: PathBuf,
}

impl BuildInputs {
    pub fn paths(&self) -> [&Path; 6] {
        [&self.records, &self.ed_stays, &self.admissions, &self.ed_diagnoses, &self.hosp_diagnoses, &self.mapping]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Minimum number of labeled records carrying a code.
    pub threshold: usize,
    pub seed: u64,
    pub mode: IngestMode,
}

/// Counters reported next to the dataset statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub stats: DatasetStats,
    pub records_in: usize,
    pub discards: BTreeMap<DiscardReason, usize>,
    pub ingest: IngestStats,
    pub link: LinkStats,
    pub fill: FillReport,
}

pub struct BuildOutput {
    pub manifest: DatasetManifest,
    pub folds: FoldAssignment,
    pub summary: BuildSummary,
}

/// Directory, relative to the output directory, holding cached waveforms.
pub const SIGNAL_DIR: &str = "signals";

/// Runs the whole construction. Preprocessed waveforms are written to
/// `out_dir/signals/<record_id>.ecg1`; manifest paths are relative to
/// `out_dir`.
pub fn build_dataset(inputs: &BuildInputs, opts: &BuildOptions, out_dir: &Path) -> Result<BuildOutput, BuildError> {
    if let Some(p) = inputs.paths().into_iter().find(|p| !p.exists()) {
        return Err(BuildError::MissingInput(p.to_path_buf()));
    }
    let mapping = MappingTable::load(&inputs.mapping)?;
    let rows = signal::read_manifest(&inputs.records)?;
    let mut linker = Linker::new(cohort::read_ed_stays_path(&inputs.ed_stays)?, cohort::read_admissions_path(&inputs.admissions)?);
    let ed_dx = cohort::read_diagnoses_path(&inputs.ed_diagnoses)?;
    let hosp_dx = cohort::read_diagnoses_path(&inputs.hosp_diagnoses)?;
    let sources = DiagnosisSources { ed: &ed_dx, hosp: &hosp_dx, mapping: &mapping, mode: opts.mode };

    let mut keyed = Vec::with_capacity(rows.len());
    for r in &rows {
        keyed.push((r.record_id.clone(), r.subject_id, parse_time(&r.ecg_time)?));
    }
    let linkages = linker.link_all(&keyed);

    let mut ingest = IngestStats::default();
    let mut discards: BTreeMap<DiscardReason, usize> = BTreeMap::new();
    let mut kept = Vec::new();
    for ((row, key), linkage) in rows.iter().zip(&keyed).zip(&linkages) {
        match sources.resolve_diagnoses(linkage, &mut ingest)? {
            Resolution::Discard(reason) => *discards.entry(reason).or_default() += 1,
            Resolution::Labeled(_) => {
                let both = sources.record_diagnoses(linkage, &mut IngestStats::default())?;
                kept.push((row, key.2, linkage, both));
            }
        }
    }

    let combined: Vec<&icd::IcdCode> =
        kept.iter().flat_map(|(_, _, _, d)| d.combined().map(|s| s.codes.iter()).into_iter().flatten()).collect();
    let label_set = icd::select_label_set(combined, opts.threshold)?;
    let subjects: BTreeSet<u64> = kept.iter().map(|(r, ..)| r.subject_id).collect();
    let folds = assign_folds(subjects, opts.seed);

    let base = inputs.records.parent().unwrap_or(Path::new("."));
    let sig_dir = out_dir.join(SIGNAL_DIR);
    std::fs::create_dir_all(&sig_dir)
        .map_err(|source| SignalError::Io { path: sig_dir.display().to_string(), source })?;
    let fills: Vec<FillReport> = kept
        .par_iter()
        .map(|(row, ..)| {
            let wrap = |source| BuildError::Record { record_id: row.record_id.clone(), source };
            let raw = signal::load_payload(&base.join(&row.path), row.fs).map_err(wrap)?;
            if raw.len() != row.n_samples {
                return Err(wrap(SignalError::Format(format!("payload has {} samples, manifest says {}", raw.len(), row.n_samples))));
            }
            let (clean, report) = signal::preprocess(&raw).map_err(wrap)?;
            signal::save_binary(&sig_dir.join(signal_file(&row.record_id)), &clean.into_raw()).map_err(wrap)?;
            Ok(report)
        })
        .collect::<Result<_, BuildError>>()?;
    let mut fill = FillReport::default();
    fills.into_iter().for_each(|f| fill.merge(f));

    let records = kept
        .into_iter()
        .map(|(row, time, linkage, both)| {
            let fold = folds.fold(row.subject_id).ok_or(DatasetError::UnassignedSubject(row.subject_id))?;
            Ok(ManifestRecord {
                meta: RecordMeta {
                    record_id: row.record_id.clone(),
                    subject_id: row.subject_id,
                    ecg_time: time,
                    site: linkage.site,
                    ed_stay: linkage.ed_stay,
                    hosp_admission: linkage.hosp_admission,
                    fold,
                },
                signal: Path::new(SIGNAL_DIR).join(signal_file(&row.record_id)),
                ed_codes: both.ed.map(|s| s.codes.into_iter().collect()),
                hosp_codes: both.hosp.map(|s| s.codes.into_iter().collect()),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let manifest = DatasetManifest { version: MANIFEST_VERSION, seed: opts.seed, scenario: None, label_set, records };
    let stats = manifest.to_dataset(out_dir)?.view().stats();
    let summary = BuildSummary { stats, records_in: rows.len(), discards, ingest, link: linker.stats.clone(), fill };
    Ok(BuildOutput { manifest, folds, summary })
}

fn signal_file(record_id: &str) -> String {
    format!("{record_id}.ecg1")
}
