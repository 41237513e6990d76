//! Subcommand bodies. Every output except `metadata/*.json` is a pure
//! function of the resolved config and the inputs.

use std::collections::HashMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ecg_icd::build::{build_dataset, MANIFEST_VERSION, SIGNAL_DIR};
use ecg_icd::dataset::{DatasetManifest, DatasetView, LabeledDataset, ManifestRecord, Phase, Split, Subset};
use ecg_icd::eval::{
    self, chapter_macro, coverage_table, evaluate, mcc_matrix, paired_significance, top_correlations, CoverageDirection,
    EvalReport, Matrix, PredictionMatrix,
};
use ecg_icd::icd::{Descriptions, IcdCode, CHAPTER_RANGES};
use ecg_icd::models::{ModelCheckpoint, Network};
use ecg_icd::signal::{self, CleanEcg};
use ecg_icd::synth::{self, PlantedConfig};
use ecg_icd::trainer::{self, TrainLogEntry};
use serde::Serialize;
use serde_json::json;

use crate::config::{EvalSection, RunConfig};
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write(path, text)
}

/// Writes a table through one of the core CSV writers.
fn write_table<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), eval::EvalError>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write(path, buf)
}

/// Wall-clock facts kept apart from the reproducible outputs.
fn write_metadata(dir: &Path, command: &str, started: Instant, extra: serde_json::Value) -> Result<(), CliError> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "command": command,
        "finished_unix": now,
        "elapsed_ms": started.elapsed().as_millis() as u64,
        "version": env!("CARGO_PKG_VERSION"),
        "details": extra,
    });
    write_json(&dir.join("metadata").join(format!("{command}.json")), &meta)
}

fn snapshot_config(cfg: &RunConfig) -> Result<(), CliError> {
    write(&cfg.run_dir().join("config.toml"), cfg.to_toml()?)
}

fn load_dataset(dir: &Path) -> Result<LabeledDataset, CliError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::io(&path, "no manifest; run `ecg-icd build` first"));
    }
    Ok(DatasetManifest::load(&path)?.to_dataset(dir)?)
}

fn load_descriptions(cfg: &RunConfig) -> Result<Option<Descriptions>, CliError> {
    let Some(path) = cfg.inputs.as_ref().and_then(|i| i.descriptions.as_ref()) else {
        return Ok(None);
    };
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Descriptions::from_reader(BufReader::new(f)).map(Some).map_err(|e| CliError::io(path, e))
}

pub fn build(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let dir = cfg.run_dir();
    let out = build_dataset(&cfg.build_inputs()?, &cfg.build_options(), &dir)?;
    let mut manifest = out.manifest;
    manifest.scenario = Some(cfg.scenario);
    manifest.save(&dir.join(MANIFEST_FILE))?;
    write(&dir.join("folds.csv"), out.folds.to_csv())?;
    write_json(&dir.join("label_set.json"), &manifest.label_set)?;
    write_json(&dir.join("stats.json"), &out.summary)?;
    snapshot_config(cfg)?;
    let s = &out.summary.stats;
    println!(
        "built {} samples from {} patients, {} labels (fingerprint {})",
        s.samples,
        s.patients,
        s.labels,
        manifest.label_set.fingerprint()
    );
    for (reason, n) in &out.summary.discards {
        println!("discarded {n} records: {reason:?}");
    }
    write_metadata(&dir, "build", started, json!({}))
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    train_loss: f64,
    val_macro_auroc: Option<f64>,
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let dir = cfg.run_dir();
    let ds = load_dataset(&dir)?;
    if ds.is_empty() {
        return Err(CliError::Data("the dataset has no records".into()));
    }
    let in_leads = ds.signal(0)?.n_leads();
    let model_cfg = cfg.model_config(in_leads, ds.label_set().len());
    let outcome = trainer::train(&model_cfg, &cfg.train, &ds, &cfg.scenario, |e: &TrainLogEntry| {
        log::info!("epoch {}: loss {:.5}, val macro AUROC {:?}", e.epoch, e.train_loss, e.val_macro_auroc);
    })?;
    let ck = &outcome.checkpoint;
    let ck_path = dir.join(CHECKPOINT_FILE);
    write(&ck_path, ck.to_bytes()?)?;
    let mut log_text = String::new();
    for e in &outcome.log {
        let line = LogLine { epoch: e.epoch, train_loss: e.train_loss, val_macro_auroc: e.val_macro_auroc };
        log_text.push_str(&serde_json::to_string(&line).map_err(|e| CliError::Data(e.to_string()))?);
        log_text.push('\n');
    }
    write(&dir.join("train_log.jsonl"), log_text)?;
    snapshot_config(cfg)?;
    match ck.val_macro_auroc {
        Some(a) => println!("selected epoch {} of {}, validation macro AUROC {a:.4}", ck.epoch, cfg.train.epochs),
        None => println!("selected epoch {} of {}, validation macro AUROC undefined", ck.epoch, cfg.train.epochs),
    }
    let wall: Vec<u64> = outcome.log.iter().map(|e| e.wall_ms).collect();
    write_metadata(&dir, "train", started, json!({ "epoch_wall_ms": wall }))
}

/// Test-split records of the evaluation phase, first ECG per stay.
fn eval_records<'a>(ds: &'a LabeledDataset, cfg: &RunConfig) -> Result<DatasetView<'a>, CliError> {
    let view = ds.apply_scenario(&cfg.scenario, Phase::Eval).split(Split::Test).eval_view();
    if view.is_empty() {
        return Err(CliError::Data(format!("no test records under scenario {}", cfg.scenario)));
    }
    Ok(view)
}

fn load_checkpoint(path: &Path, ds: &LabeledDataset) -> Result<ModelCheckpoint, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let ck = ModelCheckpoint::from_bytes(&bytes)?;
    let want = ds.label_set().fingerprint();
    if ck.label_fingerprint != want {
        return Err(CliError::LabelSetMismatch { checkpoint: ck.label_fingerprint, dataset: want });
    }
    Ok(ck)
}

fn score_checkpoint(path: &Path, ds: &LabeledDataset, view: &DatasetView<'_>) -> Result<Matrix<f64>, CliError> {
    let ck = load_checkpoint(path, ds)?;
    let net = Network::new(&ck.config).map_err(|e| CliError::Data(e.to_string()))?;
    let signals: Vec<Arc<CleanEcg>> = (0..view.len()).map(|k| view.signal(k)).collect::<Result<_, _>>()?;
    Ok(trainer::score_records(&net, &ck.params, &signals, ck.config.input_len)?)
}

/// Reads `record_id,<code>...` scores and reorders them to `ids` × `codes`.
fn read_predictions(path: &Path, ids: &[String], codes: &[IcdCode]) -> Result<Matrix<f64>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(f);
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col: HashMap<&str, usize> = header.iter().enumerate().skip(1).map(|(i, h)| (h, i)).collect();
    let cols = codes
        .iter()
        .map(|c| col.get(c.as_str()).copied().ok_or_else(|| bad(format!("no column for label {c}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let vals = cols
            .iter()
            .map(|&c| rec.get(c).unwrap_or("").trim().parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 2))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.insert(rec[0].to_string(), vals);
    }
    let data = ids
        .iter()
        .map(|id| rows.remove(id).ok_or_else(|| bad(format!("no scores for record {id}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Matrix::from_flat(ids.len(), codes.len(), data.concat())?)
}

fn write_predictions(path: &Path, p: &PredictionMatrix) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| CliError::Data(e.to_string());
    let mut header = vec!["record_id".to_string()];
    header.extend(p.labels.iter().map(|c| c.to_string()));
    wr.write_record(&header).map_err(e)?;
    for (r, id) in p.record_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(p.scores.row(r).iter().map(|v| v.to_string()));
        wr.write_record(&row).map_err(e)?;
    }
    write(path, wr.into_inner().map_err(|x| CliError::Data(x.to_string()))?)
}

/// Scores from a checkpoint, or from a predictions CSV when the path ends
/// in `.csv`.
fn scores_from(path: &Path, ds: &LabeledDataset, view: &DatasetView<'_>, ids: &[String]) -> Result<Matrix<f64>, CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_predictions(path, ids, ds.label_set().codes())
    } else {
        score_checkpoint(path, ds, view)
    }
}

fn threshold_tag(t: f64) -> String {
    format!("{:03}", (t * 100.0).round() as i64)
}

/// Coverage and per-chapter tables derived from a report.
pub fn write_report_tables(report: &EvalReport, eval: &EvalSection, dir: &Path) -> Result<(), CliError> {
    for &t in &eval.coverage {
        let rows = coverage_table(report, t, CoverageDirection::Above);
        write_table(&dir.join(format!("coverage_above_{}.csv", threshold_tag(t))), |w| eval::write_coverage_csv(w, &rows))?;
    }
    for &t in &eval.below {
        let rows = coverage_table(report, t, CoverageDirection::Below);
        write_table(&dir.join(format!("coverage_below_{}.csv", threshold_tag(t))), |w| eval::write_coverage_csv(w, &rows))?;
    }
    let chapters = chapter_macro(report);
    write_table(&dir.join("chapters.csv"), |w| eval::write_chapter_csv(w, &chapters))
}

fn ids_of(view: &DatasetView<'_>) -> Vec<String> {
    (0..view.len()).map(|k| view.record(k).record_id.clone()).collect()
}

pub fn evaluate_run(cfg: &RunConfig, checkpoint: Option<PathBuf>, scores: Option<PathBuf>) -> Result<(), CliError> {
    let started = Instant::now();
    let dir = cfg.run_dir();
    let ds = load_dataset(&dir)?;
    let view = eval_records(&ds, cfg)?;
    let ids = ids_of(&view);
    let source = scores.or(checkpoint).unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let p = scores_from(&source, &ds, &view, &ids)?;
    let pm = PredictionMatrix::new(ids, ds.label_set().codes().to_vec(), p)?;
    let y = Matrix::from_rows(&view.dense_labels())?;
    let desc = load_descriptions(cfg)?;
    let report = evaluate(&pm, &y, &cfg.bootstrap(), desc.as_ref())?;

    write_json(&dir.join("report.json"), &report)?;
    write_table(&dir.join("report.csv"), |w| report.write_csv(w))?;
    write_predictions(&dir.join(PREDICTIONS_FILE), &pm)?;
    let tables = dir.join("tables");
    write_report_tables(&report, &cfg.eval, &tables)?;
    let mcc = mcc_matrix(&y);
    let top = top_correlations(&pm.labels, &mcc, cfg.eval.top_mcc);
    let mut wr = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| CliError::Data(e.to_string());
    wr.write_record(["code_a", "code_b", "mcc"]).map_err(e)?;
    for (a, b, m) in &top {
        wr.write_record([a.to_string(), b.to_string(), format!("{m:.6}")]).map_err(e)?;
    }
    write(&tables.join("mcc_top.csv"), wr.into_inner().map_err(|x| CliError::Data(x.to_string()))?)?;
    let m = &report.macro_auroc;
    let scenario_row = format!(
        "scenario,n_records,n_labels,n_skipped,macro_auroc,ci_low,ci_high\n{},{},{},{},{:.6},{:.6},{:.6}\n",
        cfg.scenario,
        report.n_records,
        report.labels.len(),
        report.skipped.len(),
        m.point,
        m.low,
        m.high
    );
    write(&tables.join("scenario.csv"), scenario_row)?;
    snapshot_config(cfg)?;
    println!(
        "{}: macro AUROC {:.4} [{:.4}, {:.4}] on {} records, {} labels skipped",
        cfg.scenario,
        m.point,
        m.low,
        m.high,
        report.n_records,
        report.skipped.len()
    );
    write_metadata(&dir, "eval", started, json!({ "scores": source.display().to_string() }))
}

pub fn compare(cfg: &RunConfig, a: &Path, b: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let dir = cfg.run_dir();
    let ds = load_dataset(&dir)?;
    let view = eval_records(&ds, cfg)?;
    let ids = ids_of(&view);
    let codes = ds.label_set().codes().to_vec();
    let pa = PredictionMatrix::new(ids.clone(), codes.clone(), scores_from(a, &ds, &view, &ids)?)?;
    let sb = scores_from(b, &ds, &view, &ids)?;
    let pb = PredictionMatrix::new(ids, codes, sb)?;
    let y = Matrix::from_rows(&view.dense_labels())?;
    let report = paired_significance(&pa, &pb, &y, &cfg.bootstrap())?;
    write_table(&dir.join("tables").join("paired.csv"), |w| eval::write_paired_csv(w, &report))?;
    write_json(&dir.join("paired.json"), &report)?;
    let m = &report.macro_diff;
    println!(
        "macro AUROC difference {:+.4} [{:+.4}, {:+.4}]; A better on {} labels, B better on {}",
        m.diff, m.low, m.high, report.a_better, report.b_better
    );
    write_metadata(&dir, "compare", started, json!({ "a": a.display().to_string(), "b": b.display().to_string() }))
}

/// Tables from an existing per-code report CSV, e.g. published values.
pub fn tables(report: &Path, eval: &EvalSection, out: &Path) -> Result<(), CliError> {
    let f = std::fs::File::open(report).map_err(|e| CliError::io(report, e))?;
    let report = EvalReport::from_csv(f)?;
    write_report_tables(&report, eval, out)
}

pub fn dump_chapters(json_out: bool) -> Result<(), CliError> {
    if json_out {
        let rows: Vec<_> = CHAPTER_RANGES
            .iter()
            .map(|r| json!({ "chapter": r.chapter.roman(), "first": r.first, "last": r.last, "title": r.title }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows).map_err(|e| CliError::Data(e.to_string()))?);
        return Ok(());
    }
    let mut wr = csv::Writer::from_writer(std::io::stdout());
    let e = |e: csv::Error| CliError::IoOther(e.to_string());
    wr.write_record(["chapter", "first", "last", "title"]).map_err(e)?;
    for r in CHAPTER_RANGES {
        wr.write_record([r.chapter.roman(), r.first, r.last, r.title]).map_err(e)?;
    }
    wr.flush().map_err(|x| CliError::IoOther(x.to_string()))
}

const COHORT_CONFIG: &str = r#"# Run over the synthetic 20-subject cohort.
name = "fixture"
out_dir = "run"
scenario = "T(ALL2ALL)-E(ALL2ALL)"

[inputs]
records = "{records}"
ed_stays = "{ed_stays}"
admissions = "{admissions}"
ed_diagnoses = "{ed_diagnoses}"
hosp_diagnoses = "{hosp_diagnoses}"
mapping = "{mapping}"

[build]
threshold = 12

[model]
family = "S4"
preset = "tiny"

[train]
epochs = 2
batch_size = 8

[eval]
n_boot = 200
"#;

/// Writes the cohort tables plus a `run.toml` that builds them.
pub fn synth_cohort(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let files = synth::write_cohort_fixture(out)?;
    let mut text = COHORT_CONFIG.to_string();
    for (key, p) in [
        ("{records}", &files.records),
        ("{ed_stays}", &files.ed_stays),
        ("{admissions}", &files.admissions),
        ("{ed_diagnoses}", &files.ed_diagnoses),
        ("{hosp_diagnoses}", &files.hosp_diagnoses),
        ("{mapping}", &files.mapping),
    ] {
        text = text.replace(key, &p.display().to_string());
    }
    write(&out.join("run.toml"), text)?;
    println!("wrote cohort fixture and run.toml to {}", out.display());
    Ok(())
}

// Lives inside the run directory, hence `out_dir = ".."`.
const PLANTED_CONFIG: &str = r#"# Run over a planted-signal dataset.
name = "{name}"
out_dir = ".."

[model]
family = "S4"
preset = "tiny"

[train]
lr = 0.005
epochs = 5
batch_size = 8

[eval]
n_boot = 200
"#;

/// Writes a planted-signature dataset in built form plus a `run.toml`,
/// ready for `train`.
pub fn synth_planted(cfg: &PlantedConfig, run_dir: &Path) -> Result<(), CliError> {
    let ds = synth::planted_dataset(cfg)?;
    let codes = ds.label_set().codes();
    let mut records = Vec::with_capacity(ds.len());
    for (i, meta) in ds.records().iter().enumerate() {
        let rel = PathBuf::from(SIGNAL_DIR).join(format!("{}.ecg1", meta.record_id));
        let path = run_dir.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        signal::save_binary(&path, &CleanEcg::clone(&*ds.signal(i)?).into_raw())?;
        let on = codes.iter().enumerate().filter(|&(j, _)| ds.label(i, j, Subset::Ed)).map(|(_, c)| c.clone()).collect();
        records.push(ManifestRecord { meta: meta.clone(), signal: rel, ed_codes: Some(on), hosp_codes: None });
    }
    let manifest = DatasetManifest { version: MANIFEST_VERSION, seed: cfg.seed, scenario: None, label_set: ds.label_set().clone(), records };
    manifest.save(&run_dir.join(MANIFEST_FILE))?;
    write_json(&run_dir.join("label_set.json"), &manifest.label_set)?;
    let name = run_dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| CliError::Config("--out must end in a run name".into()))?;
    write(&run_dir.join("run.toml"), PLANTED_CONFIG.replace("{name}", name))?;
    println!("wrote {} planted records with {} labels to {}", ds.len(), codes.len(), run_dir.display());
    Ok(())
}
