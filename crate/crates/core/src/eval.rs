//! Evaluation statistics: rank-based AUROC, macro AUROC, bootstrap
//! confidence intervals, paired bootstrap significance, crop averaging,
//! coverage tables, prevalence and label-correlation (MCC) analysis.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icd::{chapter_of, Chapter, Descriptions, IcdCode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no label has both classes present")]
    AllUndefined,
    #[error("record of length {len} is shorter than one crop of {crop}")]
    BadLength { len: usize, crop: usize },
    #[error("non-finite score at row {row}, label {col}")]
    NonFinite { row: usize, col: usize },
    #[error("report csv: {0}")]
    Csv(String),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, EvalError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(EvalError::ShapeMismatch("ragged rows".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, EvalError> {
        if data.len() != rows * cols {
            return Err(EvalError::ShapeMismatch(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Keeps the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix<T> {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            data.extend(cols.iter().map(|&c| self.get(r, c)));
        }
        Matrix { rows: self.rows, cols: cols.len(), data }
    }
}

pub type LabelMatrix = Matrix<u8>;

/// Model scores for the evaluation records.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub record_ids: Vec<String>,
    pub labels: Vec<IcdCode>,
    pub scores: Matrix<f64>,
}

impl PredictionMatrix {
    pub fn new(record_ids: Vec<String>, labels: Vec<IcdCode>, scores: Matrix<f64>) -> Result<Self, EvalError> {
        if scores.rows() != record_ids.len() || scores.cols() != labels.len() {
            return Err(EvalError::ShapeMismatch(format!(
                "scores {}x{} vs {} records, {} labels",
                scores.rows(),
                scores.cols(),
                record_ids.len(),
                labels.len()
            )));
        }
        for r in 0..scores.rows() {
            for c in 0..scores.cols() {
                if !scores.get(r, c).is_finite() {
                    return Err(EvalError::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(PredictionMatrix { record_ids, labels, scores })
    }
}

fn check_shapes(p: &Matrix<f64>, y: &LabelMatrix) -> Result<(), EvalError> {
    if p.rows() != y.rows() || p.cols() != y.cols() {
        return Err(EvalError::ShapeMismatch(format!(
            "scores {}x{} vs labels {}x{}",
            p.rows(),
            p.cols(),
            y.rows(),
            y.cols()
        )));
    }
    Ok(())
}

/// Scores sorted ascending, grouped into runs of equal score.
#[derive(Debug, Clone)]
pub struct RankedColumn {
    order: Vec<u32>,
    /// Start offsets of tie groups in `order`, plus a final sentinel.
    groups: Vec<u32>,
}

impl RankedColumn {
    pub fn new(scores: &[f64]) -> Self {
        let mut order: Vec<u32> = (0..scores.len() as u32).collect();
        order.sort_by(|&a, &b| scores[a as usize].total_cmp(&scores[b as usize]).then(a.cmp(&b)));
        let mut groups = Vec::new();
        for (k, &i) in order.iter().enumerate() {
            if k == 0 || scores[i as usize] != scores[order[k - 1] as usize] {
                groups.push(k as u32);
            }
        }
        groups.push(order.len() as u32);
        RankedColumn { order, groups }
    }

    /// Mann–Whitney AUROC with per-row multiplicities `weights` (all ones for
    /// the plain statistic). Ties get half credit. `None` when either class
    /// has zero weight.
    pub fn auroc_weighted(&self, labels: &[u8], weights: Option<&[u32]>) -> Option<f64> {
        let w = |i: usize| weights.map_or(1.0, |w| w[i] as f64);
        let mut neg_below = 0.0;
        let mut pos_total = 0.0;
        let mut numerator = 0.0;
        for g in self.groups.windows(2) {
            let (mut p, mut n) = (0.0, 0.0);
            for &i in &self.order[g[0] as usize..g[1] as usize] {
                let i = i as usize;
                if labels[i] != 0 {
                    p += w(i);
                } else {
                    n += w(i);
                }
            }
            numerator += p * (neg_below + 0.5 * n);
            neg_below += n;
            pos_total += p;
        }
        let denom = pos_total * neg_below;
        (denom > 0.0).then(|| numerator / denom)
    }
}

/// Rank-based AUROC; `None` when only one class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auroc: length mismatch");
    RankedColumn::new(scores).auroc_weighted(labels, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAuroc {
    pub value: f64,
    pub per_label: Vec<Option<f64>>,
    /// Column indices excluded because they are single-class.
    pub skipped: Vec<usize>,
}

/// Unweighted mean of the defined per-label AUROCs.
pub fn macro_auroc(p: &Matrix<f64>, y: &LabelMatrix) -> Result<MacroAuroc, EvalError> {
    check_shapes(p, y)?;
    let per_label: Vec<Option<f64>> = (0..p.cols())
        .into_par_iter()
        .map(|c| auroc(&p.column(c), &y.column(c)))
        .collect();
    let skipped: Vec<usize> = per_label.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect();
    let value = mean_defined(&per_label).ok_or(EvalError::AllUndefined)?;
    Ok(MacroAuroc { value, per_label, skipped })
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let (s, n) = v.iter().flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Quantiles of the bootstrap distribution.
    #[default]
    Percentile,
    /// Reflected quantiles: `2·point − q(1−α/2)`, `2·point − q(α/2)`.
    Basic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub alpha: f64,
    pub seed: u64,
    pub method: CiMethod,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { n_boot: 1000, alpha: 0.05, seed: 0, method: CiMethod::Percentile }
    }
}

/// Multiplicity vector of one bootstrap resample: `n` row draws with
/// replacement from a ChaCha8 stream keyed by (seed, iteration).
pub fn resample_counts(n: usize, seed: u64, iteration: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.gen_range(0..n)] += 1;
    }
    counts
}

/// Evaluates `stat` on `n_boot` resamples produced by `resampler`. Runs in
/// parallel; the output is in iteration order regardless of thread count.
pub fn bootstrap_distribution_with<R, F>(n_boot: usize, resampler: R, stat: F) -> Vec<Vec<Option<f64>>>
where
    R: Fn(u64) -> Vec<u32> + Sync,
    F: Fn(&[u32]) -> Vec<Option<f64>> + Sync,
{
    (0..n_boot as u64).into_par_iter().map(|b| stat(&resampler(b))).collect()
}

pub fn bootstrap_distribution<F>(n_rows: usize, cfg: &BootstrapConfig, stat: F) -> Vec<Vec<Option<f64>>>
where
    F: Fn(&[u32]) -> Vec<Option<f64>> + Sync,
{
    let seed = cfg.seed;
    bootstrap_distribution_with(cfg.n_boot, move |b| resample_counts(n_rows, seed, b), stat)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
}

/// Confidence interval from the defined draws of a bootstrap distribution.
/// Falls back to a degenerate interval when no draw is defined.
pub fn summarize(point: f64, draws: impl Iterator<Item = f64>, cfg: &BootstrapConfig) -> Interval {
    let mut v: Vec<f64> = draws.collect();
    if v.is_empty() {
        return Interval { point, low: point, high: point };
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let ql = quantile_sorted(&v, cfg.alpha / 2.0);
    let qh = quantile_sorted(&v, 1.0 - cfg.alpha / 2.0);
    match cfg.method {
        CiMethod::Percentile => Interval { point, low: ql, high: qh },
        CiMethod::Basic => Interval { point, low: 2.0 * point - qh, high: 2.0 * point - ql },
    }
}

/// Bootstrap CI of a single-label AUROC.
pub fn bootstrap_auroc_ci(scores: &[f64], labels: &[u8], cfg: &BootstrapConfig) -> Option<Interval> {
    let ranked = RankedColumn::new(scores);
    let point = ranked.auroc_weighted(labels, None)?;
    let dist = bootstrap_distribution(scores.len(), cfg, |w| vec![ranked.auroc_weighted(labels, Some(w))]);
    Some(summarize(point, dist.into_iter().filter_map(|d| d[0]), cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub code: IcdCode,
    pub description: String,
    pub auroc: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub prevalence: f64,
    pub n_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<LabelReport>,
    pub macro_auroc: Interval,
    pub skipped: Vec<IcdCode>,
    pub n_records: usize,
    pub seed: u64,
    pub n_boot: usize,
    pub ci_method: CiMethod,
}

/// Column statistics shared by the bootstrap routines.
struct Prepared {
    ranked: Vec<RankedColumn>,
    labels: Vec<Vec<u8>>,
}

impl Prepared {
    fn new(p: &Matrix<f64>, y: &LabelMatrix) -> Self {
        let ranked = (0..p.cols()).into_par_iter().map(|c| RankedColumn::new(&p.column(c))).collect();
        let labels = (0..y.cols()).map(|c| y.column(c)).collect();
        Prepared { ranked, labels }
    }

    fn per_label(&self, w: Option<&[u32]>) -> Vec<Option<f64>> {
        self.ranked.iter().zip(&self.labels).map(|(r, l)| r.auroc_weighted(l, w)).collect()
    }
}

/// Per-label and macro AUROC with bootstrap CIs.
pub fn evaluate(
    p: &PredictionMatrix,
    y: &LabelMatrix,
    cfg: &BootstrapConfig,
    descriptions: Option<&Descriptions>,
) -> Result<EvalReport, EvalError> {
    check_shapes(&p.scores, y)?;
    let prep = Prepared::new(&p.scores, y);
    let point = prep.per_label(None);
    let macro_point = mean_defined(&point).ok_or(EvalError::AllUndefined)?;
    let n_labels = point.len();
    let dist = bootstrap_distribution(y.rows(), cfg, |w| {
        let mut v = prep.per_label(Some(w));
        v.push(mean_defined(&v));
        v
    });
    let prev = prevalence(y);
    let labels = (0..n_labels)
        .map(|j| {
            let ci = point[j].map(|a| summarize(a, dist.iter().filter_map(|d| d[j]), cfg));
            LabelReport {
                code: p.labels[j].clone(),
                description: descriptions.map(|d| d.get(&p.labels[j]).to_string()).unwrap_or_default(),
                auroc: point[j],
                ci_low: ci.map(|c| c.low),
                ci_high: ci.map(|c| c.high),
                prevalence: prev[j],
                n_pos: (0..y.rows()).filter(|&r| y.get(r, j) != 0).count(),
            }
        })
        .collect();
    Ok(EvalReport {
        labels,
        macro_auroc: summarize(macro_point, dist.iter().filter_map(|d| d[n_labels]), cfg),
        skipped: (0..n_labels).filter(|&j| point[j].is_none()).map(|j| p.labels[j].clone()).collect(),
        n_records: y.rows(),
        seed: cfg.seed,
        n_boot: cfg.n_boot,
        ci_method: cfg.method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub diff: f64,
    pub low: f64,
    pub high: f64,
    pub significant: bool,
}

impl PairedDiff {
    fn from_interval(iv: Interval) -> Self {
        PairedDiff {
            diff: iv.point,
            low: iv.low,
            high: iv.high,
            significant: !(iv.low <= 0.0 && 0.0 <= iv.high),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedLabel {
    pub code: IcdCode,
    /// `None` for single-class labels.
    pub result: Option<PairedDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub labels: Vec<PairedLabel>,
    pub macro_diff: PairedDiff,
    /// Labels where A is significantly better (diff CI entirely above zero).
    pub a_better: usize,
    pub b_better: usize,
    pub seed: u64,
    pub n_boot: usize,
}

/// Bootstrap of AUROC(A) − AUROC(B) using the same resampled rows for both.
pub fn paired_significance(
    a: &PredictionMatrix,
    b: &PredictionMatrix,
    y: &LabelMatrix,
    cfg: &BootstrapConfig,
) -> Result<PairedReport, EvalError> {
    check_shapes(&a.scores, y)?;
    check_shapes(&b.scores, y)?;
    if a.record_ids != b.record_ids || a.labels != b.labels {
        return Err(EvalError::ShapeMismatch("prediction matrices differ in records or labels".into()));
    }
    let pa = Prepared::new(&a.scores, y);
    let pb = Prepared::new(&b.scores, y);
    let diff_of = |w: Option<&[u32]>| -> Vec<Option<f64>> {
        let ra = pa.per_label(w);
        let rb = pb.per_label(w);
        let mut d: Vec<Option<f64>> = ra.iter().zip(&rb).map(|(x, y)| Some((*x)? - (*y)?)).collect();
        d.push(match (mean_defined(&ra), mean_defined(&rb)) {
            (Some(x), Some(y)) => Some(x - y),
            _ => None,
        });
        d
    };
    let point = diff_of(None);
    let n_labels = a.labels.len();
    let macro_point = point[n_labels].ok_or(EvalError::AllUndefined)?;
    let dist = bootstrap_distribution(y.rows(), cfg, |w| diff_of(Some(w)));
    let labels: Vec<PairedLabel> = (0..n_labels)
        .map(|j| PairedLabel {
            code: a.labels[j].clone(),
            result: point[j]
                .map(|d| PairedDiff::from_interval(summarize(d, dist.iter().filter_map(|x| x[j]), cfg))),
        })
        .collect();
    let count = |pred: fn(&PairedDiff) -> bool| {
        labels.iter().filter(|l| l.result.as_ref().is_some_and(|r| r.significant && pred(r))).count()
    };
    Ok(PairedReport {
        a_better: count(|r| r.low > 0.0),
        b_better: count(|r| r.high < 0.0),
        macro_diff: PairedDiff::from_interval(summarize(macro_point, dist.iter().filter_map(|x| x[n_labels]), cfg)),
        labels,
        seed: cfg.seed,
        n_boot: cfg.n_boot,
    })
}

/// Anything that maps a batch of `leads × crop_len` crops to per-label
/// probabilities.
pub trait Scorer {
    fn n_labels(&self) -> usize;
    fn predict_proba(&self, crops: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>>;
}

/// Crop start offsets used for test-time averaging. Lengths that are not a
/// multiple of `crop_len` use `floor(len / crop_len)` crops from the start.
pub fn crop_starts(len: usize, crop_len: usize) -> Result<Vec<usize>, EvalError> {
    if crop_len == 0 || len < crop_len {
        return Err(EvalError::BadLength { len, crop: crop_len });
    }
    if !len.is_multiple_of(crop_len) {
        log::warn!("record length {len} is not a multiple of {crop_len}; using {} crops", len / crop_len);
    }
    Ok((0..len / crop_len).map(|k| k * crop_len).collect())
}

/// Mean of the model's probabilities over the non-overlapping crops.
pub fn crop_average<S: Scorer + ?Sized>(model: &S, record: &[Vec<f64>], crop_len: usize) -> Result<Vec<f64>, EvalError> {
    let len = record.first().map_or(0, Vec::len);
    let starts = crop_starts(len, crop_len)?;
    let crops: Vec<Vec<Vec<f64>>> = starts
        .iter()
        .map(|&s| record.iter().map(|lead| lead[s..s + crop_len].to_vec()).collect())
        .collect();
    let probs = model.predict_proba(&crops);
    let mut mean = vec![0.0; model.n_labels()];
    for p in &probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let k = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

pub fn prevalence(y: &LabelMatrix) -> Vec<f64> {
    let n = y.rows().max(1) as f64;
    (0..y.cols())
        .map(|c| (0..y.rows()).filter(|&r| y.get(r, c) != 0).count() as f64 / n)
        .collect()
}

/// Pairwise Matthews correlation between label columns; `None` where a
/// marginal is degenerate.
pub fn mcc_matrix(y: &LabelMatrix) -> Vec<Vec<Option<f64>>> {
    let n = y.rows();
    let words = n.div_ceil(64);
    let cols: Vec<Vec<u64>> = (0..y.cols())
        .map(|c| {
            let mut bits = vec![0u64; words];
            for r in 0..n {
                if y.get(r, c) != 0 {
                    bits[r / 64] |= 1 << (r % 64);
                }
            }
            bits
        })
        .collect();
    let ones: Vec<u64> = cols.iter().map(|b| b.iter().map(|w| w.count_ones() as u64).sum()).collect();
    let nf = n as f64;
    (0..cols.len())
        .into_par_iter()
        .map(|a| {
            (0..cols.len())
                .map(|b| {
                    let n11 = cols[a].iter().zip(&cols[b]).map(|(x, y)| (x & y).count_ones() as u64).sum::<u64>() as f64;
                    let (na, nb) = (ones[a] as f64, ones[b] as f64);
                    let n10 = na - n11;
                    let n01 = nb - n11;
                    let n00 = nf - n11 - n10 - n01;
                    let denom = na * (nf - na) * nb * (nf - nb);
                    (denom > 0.0).then(|| ((n11 * n00 - n10 * n01) / denom.sqrt()).clamp(-1.0, 1.0))
                })
                .collect()
        })
        .collect()
}

/// Label pairs ranked by |MCC|, strongest first, upper triangle only.
pub fn top_correlations(codes: &[IcdCode], mcc: &[Vec<Option<f64>>], k: usize) -> Vec<(IcdCode, IcdCode, f64)> {
    let mut pairs: Vec<(IcdCode, IcdCode, f64)> = Vec::new();
    for a in 0..codes.len() {
        for b in a + 1..codes.len() {
            if let Some(m) = mcc[a][b] {
                pairs.push((codes[a].clone(), codes[b].clone(), m));
            }
        }
    }
    pairs.sort_by(|x, y| y.2.abs().total_cmp(&x.2.abs()).then_with(|| (&x.0, &x.1).cmp(&(&y.0, &y.1))));
    pairs.truncate(k);
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageDirection {
    /// AUROC strictly above the threshold.
    Above,
    /// AUROC strictly below the threshold.
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub chapter: Chapter,
    pub code3: IcdCode,
    pub covered: usize,
    pub total: usize,
    pub prevalence: f64,
    pub description: String,
}

impl CoverageRow {
    /// Category with at least 75% of its members covered.
    pub fn is_majority(&self) -> bool {
        4 * self.covered >= 3 * self.total
    }
}

/// Groups report labels by 3-character category and counts members whose
/// AUROC passes the threshold. Rows are ordered by chapter, prevalence
/// (descending), then code.
pub fn coverage_table(report: &EvalReport, threshold: f64, direction: CoverageDirection) -> Vec<CoverageRow> {
    let mut groups: BTreeMap<IcdCode, Vec<&LabelReport>> = BTreeMap::new();
    for l in &report.labels {
        groups.entry(l.code.category()).or_default().push(l);
    }
    let mut rows: Vec<CoverageRow> = groups
        .into_iter()
        .filter_map(|(code3, members)| {
            let chapter = chapter_of(&code3).ok()?;
            let covered = members
                .iter()
                .filter(|l| match (l.auroc, direction) {
                    (Some(a), CoverageDirection::Above) => a > threshold,
                    (Some(a), CoverageDirection::Below) => a < threshold,
                    (None, _) => false,
                })
                .count();
            let head = members.iter().find(|l| l.code == code3);
            let prevalence = head
                .map(|l| l.prevalence)
                .unwrap_or_else(|| members.iter().map(|l| l.prevalence).fold(0.0, f64::max));
            let description = head.map(|l| l.description.clone()).unwrap_or_default();
            Some(CoverageRow { chapter, code3, covered, total: members.len(), prevalence, description })
        })
        .collect();
    rows.sort_by(|a, b| {
        a.chapter
            .cmp(&b.chapter)
            .then(b.prevalence.total_cmp(&a.prevalence))
            .then_with(|| a.code3.cmp(&b.code3))
    });
    rows
}

/// Macro AUROC per chapter over the defined labels of that chapter.
pub fn chapter_macro(report: &EvalReport) -> BTreeMap<Chapter, (f64, usize)> {
    let mut acc: BTreeMap<Chapter, (f64, usize)> = BTreeMap::new();
    for l in &report.labels {
        if let (Some(a), Ok(ch)) = (l.auroc, chapter_of(&l.code)) {
            let e = acc.entry(ch).or_default();
            e.0 += a;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(c, (s, n))| (c, (s / n as f64, n))).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// `code,description,auroc,ci_low,ci_high,prevalence,n_pos`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wr = csv::Writer::from_writer(w);
        let e = |e: csv::Error| EvalError::Csv(e.to_string());
        wr.write_record(["code", "description", "auroc", "ci_low", "ci_high", "prevalence", "n_pos"]).map_err(e)?;
        for l in &self.labels {
            wr.write_record([
                l.code.to_string(),
                l.description.clone(),
                opt(l.auroc),
                opt(l.ci_low),
                opt(l.ci_high),
                format!("{:.6}", l.prevalence),
                l.n_pos.to_string(),
            ])
            .map_err(e)?;
        }
        wr.flush().map_err(|x| EvalError::Csv(x.to_string()))
    }

    /// Reads per-label rows in the `write_csv` layout. CI and n_pos columns
    /// may be empty; lines starting with `#` are skipped. The macro estimate
    /// is recomputed from the rows.
    pub fn from_csv<R: Read>(r: R) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let parse = |s: &str, row: usize| -> Result<Option<f64>, EvalError> {
            let s = s.trim();
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| EvalError::Csv(format!("row {row}: {e}")))
            }
        };
        let mut labels = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| EvalError::Csv(e.to_string()))?;
            let row = i + 2;
            if rec.len() < 6 {
                return Err(EvalError::Csv(format!("row {row}: expected at least 6 columns")));
            }
            let code = IcdCode::icd10(rec[0].trim()).map_err(|e| EvalError::Csv(format!("row {row}: {e}")))?;
            labels.push(LabelReport {
                code,
                description: rec[1].to_string(),
                auroc: parse(&rec[2], row)?,
                ci_low: parse(&rec[3], row)?,
                ci_high: parse(&rec[4], row)?,
                prevalence: parse(&rec[5], row)?.unwrap_or(0.0),
                n_pos: rec.get(6).and_then(|s| s.trim().parse().ok()).unwrap_or(0),
            });
        }
        let aurocs: Vec<Option<f64>> = labels.iter().map(|l| l.auroc).collect();
        let m = mean_defined(&aurocs).unwrap_or(f64::NAN);
        Ok(EvalReport {
            skipped: labels.iter().filter(|l| l.auroc.is_none()).map(|l| l.code.clone()).collect(),
            labels,
            macro_auroc: Interval { point: m, low: m, high: m },
            n_records: 0,
            seed: 0,
            n_boot: 0,
            ci_method: CiMethod::Percentile,
        })
    }
}

/// `chapter,code,coverage,prevalence,description`, mirroring the published
/// coverage tables.
pub fn write_coverage_csv<W: Write>(w: W, rows: &[CoverageRow]) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| EvalError::Csv(e.to_string());
    wr.write_record(["chapter", "code", "coverage", "prevalence", "description"]).map_err(e)?;
    for r in rows {
        wr.write_record([
            r.chapter.roman().to_string(),
            r.code3.to_string(),
            format!("{}/{}", r.covered, r.total),
            format!("{:.3}", r.prevalence),
            r.description.clone(),
        ])
        .map_err(e)?;
    }
    wr.flush().map_err(|x| EvalError::Csv(x.to_string()))
}

/// `chapter,title,macro_auroc,n_labels` plot data.
pub fn write_chapter_csv<W: Write>(w: W, per_chapter: &BTreeMap<Chapter, (f64, usize)>) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| EvalError::Csv(e.to_string());
    wr.write_record(["chapter", "title", "macro_auroc", "n_labels"]).map_err(e)?;
    for (c, (m, n)) in per_chapter {
        wr.write_record([c.roman().to_string(), c.title().to_string(), format!("{m:.6}"), n.to_string()])
            .map_err(e)?;
    }
    wr.flush().map_err(|x| EvalError::Csv(x.to_string()))
}

/// `code,diff,ci_low,ci_high,significant`, with a final `MACRO` row.
pub fn write_paired_csv<W: Write>(w: W, report: &PairedReport) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| EvalError::Csv(e.to_string());
    wr.write_record(["code", "diff", "ci_low", "ci_high", "significant"]).map_err(e)?;
    let fmt = |code: String, r: Option<&PairedDiff>| -> Vec<String> {
        match r {
            Some(r) => vec![code, format!("{:.6}", r.diff), format!("{:.6}", r.low), format!("{:.6}", r.high), r.significant.to_string()],
            None => vec![code, String::new(), String::new(), String::new(), String::new()],
        }
    };
    for l in &report.labels {
        wr.write_record(fmt(l.code.to_string(), l.result.as_ref())).map_err(e)?;
    }
    wr.write_record(fmt("MACRO".into(), Some(&report.macro_diff))).map_err(e)?;
    wr.flush().map_err(|x| EvalError::Csv(x.to_string()))
}

/// Upper-triangle `code_a,code_b,mcc` rows.
pub fn write_mcc_csv<W: Write>(w: W, codes: &[IcdCode], mcc: &[Vec<Option<f64>>]) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| EvalError::Csv(e.to_string());
    wr.write_record(["code_a", "code_b", "mcc"]).map_err(e)?;
    for a in 0..codes.len() {
        for b in a + 1..codes.len() {
            wr.write_record([codes[a].to_string(), codes[b].to_string(), opt(mcc[a][b])]).map_err(e)?;
        }
    }
    wr.flush().map_err(|x| EvalError::Csv(x.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pairwise(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let (mut num, mut np, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..scores.len() {
            if labels[i] == 1 {
                np += 1.0;
            } else {
                nn += 1.0;
            }
        }
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (np > 0.0 && nn > 0.0).then(|| num / (np * nn))
    }

    fn c(s: &str) -> IcdCode {
        IcdCode::icd10(s).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]), Some(1.0));
        assert_eq!(auroc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.2], &[1, 1]), None);
        assert_eq!(auroc(&[0.1, 0.2], &[0, 0]), None);
    }

    #[test]
    fn auroc_matches_pairwise_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(2..80);
            let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.4) as u8).collect();
            match (auroc(&s, &y), pairwise(&s, &y)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn weighted_auroc_equals_expanded_sample() {
        let s = [0.3, 0.1, 0.3, 0.9, 0.5];
        let y = [1u8, 0, 0, 1, 0];
        let w = [2u32, 1, 0, 3, 2];
        let mut es = Vec::new();
        let mut ey = Vec::new();
        for i in 0..5 {
            for _ in 0..w[i] {
                es.push(s[i]);
                ey.push(y[i]);
            }
        }
        let a = RankedColumn::new(&s).auroc_weighted(&y, Some(&w)).unwrap();
        assert!((a - pairwise(&es, &ey).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn macro_examples() {
        let p = Matrix::from_rows(&[vec![0.9, 0.1, 0.5], vec![0.1, 0.2, 0.5], vec![0.8, 0.3, 0.5], vec![0.2, 0.4, 0.5]]).unwrap();
        let y = Matrix::from_rows(&[vec![1, 1, 1], vec![0, 0, 1], vec![1, 1, 1], vec![0, 0, 1]]).unwrap();
        let m = macro_auroc(&p, &y).unwrap();
        assert_eq!(m.per_label, vec![Some(1.0), Some(0.25), None]);
        assert_eq!(m.value, 0.625);
        assert_eq!(m.skipped, vec![2]);
        let y1 = Matrix::from_rows(&[vec![1u8], vec![1]]).unwrap();
        let p1 = Matrix::from_rows(&[vec![0.5], vec![0.2]]).unwrap();
        assert!(matches!(macro_auroc(&p1, &y1), Err(EvalError::AllUndefined)));
    }

    #[test]
    fn identity_resample_returns_point() {
        let s = [0.2, 0.7, 0.4, 0.9];
        let y = [0u8, 1, 0, 1];
        let ranked = RankedColumn::new(&s);
        let point = ranked.auroc_weighted(&y, None).unwrap();
        let dist = bootstrap_distribution_with(1, |_| vec![1; 4], |w| vec![ranked.auroc_weighted(&y, Some(w))]);
        let iv = summarize(point, dist.into_iter().filter_map(|d| d[0]), &BootstrapConfig { n_boot: 1, ..Default::default() });
        assert_eq!((iv.low, iv.point, iv.high), (point, point, point));
    }

    #[test]
    fn degenerate_distribution_gives_zero_width() {
        let iv = bootstrap_auroc_ci(&[0.9, 0.8, 0.1, 0.2, 0.85, 0.05], &[1, 1, 0, 0, 1, 0], &BootstrapConfig { n_boot: 200, ..Default::default() }).unwrap();
        assert_eq!((iv.low, iv.point, iv.high), (1.0, 1.0, 1.0));
    }

    #[test]
    fn resample_counts_sum_and_determinism() {
        let a = resample_counts(50, 9, 3);
        assert_eq!(a.iter().sum::<u32>(), 50);
        assert_eq!(a, resample_counts(50, 9, 3));
        assert_ne!(a, resample_counts(50, 9, 4));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.125), 1.5);
        let cfg = BootstrapConfig { method: CiMethod::Basic, alpha: 0.5, ..Default::default() };
        let iv = summarize(3.0, v.into_iter(), &cfg);
        assert_eq!((iv.low, iv.high), (2.0, 4.0));
    }

    #[test]
    fn mcc_examples() {
        let y = Matrix::from_rows(&[vec![1, 1, 0, 1], vec![1, 0, 0, 1], vec![0, 1, 1, 1], vec![0, 0, 1, 1]]).unwrap();
        let m = mcc_matrix(&y);
        assert_eq!(m[0][0], Some(1.0));
        assert_eq!(m[0][2], Some(-1.0));
        assert_eq!(m[0][1], Some(0.0));
        assert_eq!(m[1][0], m[0][1]);
        assert_eq!(m[3][0], None);
    }

    #[test]
    fn prevalence_examples() {
        let y = Matrix::from_rows(&[vec![1, 1], vec![1, 0], vec![1, 0], vec![1, 0]]).unwrap();
        assert_eq!(prevalence(&y), vec![1.0, 0.25]);
    }

    fn label(code: &str, a: Option<f64>, prev: f64) -> LabelReport {
        LabelReport { code: c(code), description: String::new(), auroc: a, ci_low: None, ci_high: None, prevalence: prev, n_pos: 0 }
    }

    fn report(labels: Vec<LabelReport>) -> EvalReport {
        EvalReport { labels, macro_auroc: Interval { point: 0.0, low: 0.0, high: 0.0 }, skipped: vec![], n_records: 0, seed: 0, n_boot: 0, ci_method: CiMethod::Percentile }
    }

    #[test]
    fn coverage_counting_and_order() {
        let r = report(vec![
            label("I48", Some(0.95), 0.15),
            label("I481", Some(0.97), 0.05),
            label("I489", Some(0.85), 0.1),
            label("E11", Some(0.5), 0.2),
            label("A41", None, 0.01),
            label("I21", Some(0.91), 0.03),
        ]);
        let rows = coverage_table(&r, 0.9, CoverageDirection::Above);
        let summary: Vec<(String, usize, usize)> = rows.iter().map(|r| (r.code3.to_string(), r.covered, r.total)).collect();
        assert_eq!(
            summary,
            vec![("A41".into(), 0, 1), ("E11".into(), 0, 1), ("I48".into(), 2, 3), ("I21".into(), 1, 1)]
        );
        assert_eq!(rows.iter().map(|r| r.total).sum::<usize>(), 6);
        let all = coverage_table(&r, 0.0, CoverageDirection::Above);
        assert!(all.iter().filter(|r| r.code3.as_str() != "A41").all(|r| r.covered == r.total));
        let below = coverage_table(&r, 0.7, CoverageDirection::Below);
        assert_eq!(below.iter().find(|r| r.code3.as_str() == "E11").unwrap().covered, 1);
    }

    struct Fixed(Vec<Vec<f64>>);

    impl Scorer for Fixed {
        fn n_labels(&self) -> usize {
            1
        }
        fn predict_proba(&self, crops: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
            assert_eq!(crops.len(), self.0.len());
            self.0.clone()
        }
    }

    #[test]
    fn crop_average_arithmetic() {
        let rec = vec![vec![0.0; 1000]];
        let m = Fixed(vec![vec![0.2], vec![0.4], vec![0.6], vec![0.8]]);
        let avg = crop_average(&m, &rec, 250).unwrap();
        assert!((avg[0] - 0.5).abs() < 1e-15);
        assert_eq!(crop_starts(1100, 250).unwrap(), vec![0, 250, 500, 750]);
        assert!(crop_starts(200, 250).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let r = report(vec![label("I48", Some(0.95), 0.152), label("A41", None, 0.01)]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("code,description,auroc,ci_low,ci_high,prevalence,n_pos\n"));
        let back = EvalReport::from_csv(buf.as_slice()).unwrap();
        assert_eq!(back.labels[0].auroc, Some(0.95));
        assert_eq!(back.labels[1].auroc, None);
        assert_eq!(back.skipped, vec![c("A41")]);
    }
}
