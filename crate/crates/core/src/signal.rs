//! Waveform preprocessing: missing-value repair, resampling to 100 Hz and
//! amplitude clipping, plus the record manifest and payload formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TARGET_FS: f64 = 100.0;
pub const CLIP_MV: f64 = 3.0;

pub const STANDARD_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

const BINARY_MAGIC: &[u8; 4] = b"ECG1";

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("signal has no samples")]
    EmptySignal,
    #[error("signal has no leads")]
    NoLeads,
    #[error("lead {lead} has {got} samples, expected {expected}")]
    RaggedLeads {
        lead: usize,
        got: usize,
        expected: usize,
    },
    #[error("sampling rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("missing values remain in lead {0}; run fill_missing first")]
    MissingValues(usize),
    #[error("bad payload: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SignalError + '_ {
    move |source| SignalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A multi-lead recording in millivolts. Missing samples are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEcg {
    pub leads: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub fs: f64,
}

impl RawEcg {
    pub fn new(leads: Vec<String>, samples: Vec<Vec<f64>>, fs: f64) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::NoLeads);
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(SignalError::BadRate(fs));
        }
        let n = samples[0].len();
        for (i, s) in samples.iter().enumerate() {
            if s.len() != n {
                return Err(SignalError::RaggedLeads {
                    lead: i,
                    got: s.len(),
                    expected: n,
                });
            }
        }
        let leads = if leads.len() == samples.len() {
            leads
        } else {
            default_lead_names(samples.len())
        };
        Ok(RawEcg { leads, samples, fs })
    }

    pub fn n_leads(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fs
    }
}

pub fn default_lead_names(n: usize) -> Vec<String> {
    if n == STANDARD_LEADS.len() {
        STANDARD_LEADS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("lead{i}")).collect()
    }
}

/// A preprocessed record: finite, 100 Hz, |v| ≤ 3 mV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanEcg {
    pub leads: Vec<String>,
    pub samples: Vec<Vec<f64>>,
}

impl CleanEcg {
    pub fn fs(&self) -> f64 {
        TARGET_FS
    }

    pub fn n_leads(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_raw(self) -> RawEcg {
        RawEcg {
            leads: self.leads,
            samples: self.samples,
            fs: TARGET_FS,
        }
    }
}

/// Counters produced by [`fill_missing`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillReport {
    pub interpolated: usize,
    pub zero_filled: usize,
    pub all_missing_leads: usize,
}

impl FillReport {
    pub fn merge(&mut self, other: FillReport) {
        self.interpolated += other.interpolated;
        self.zero_filled += other.zero_filled;
        self.all_missing_leads += other.all_missing_leads;
    }
}

/// Fills one lead in place.
fn fill_lead(x: &mut [f64], report: &mut FillReport) {
    let finite: Vec<usize> = (0..x.len()).filter(|&i| x[i].is_finite()).collect();
    let (Some(&first), Some(&last)) = (finite.first(), finite.last()) else {
        report.all_missing_leads += 1;
        report.zero_filled += x.len();
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    };
    for v in &mut x[..first] {
        *v = 0.0;
        report.zero_filled += 1;
    }
    for v in &mut x[last + 1..] {
        *v = 0.0;
        report.zero_filled += 1;
    }
    for w in finite.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a > 1 {
            let (ya, yb) = (x[a], x[b]);
            let span = (b - a) as f64;
            for i in a + 1..b {
                let frac = (i - a) as f64 / span;
                x[i] = ya + (yb - ya) * frac;
                report.interpolated += 1;
            }
        }
    }
}

/// Interior gaps are linearly interpolated, boundary gaps become zero.
/// A lead with no finite sample becomes all zeros and is counted.
pub fn fill_missing(sig: &RawEcg) -> (RawEcg, FillReport) {
    let mut out = sig.clone();
    let mut report = FillReport::default();
    for lead in &mut out.samples {
        fill_lead(lead, &mut report);
    }
    (out, report)
}

pub fn resampled_len(n: usize, fs_in: f64, fs_out: f64) -> usize {
    (n as f64 * fs_out / fs_in).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResampleOptions {
    /// Low-pass the input with a windowed-sinc FIR before downsampling.
    pub anti_alias: bool,
}

/// Linear interpolation on the output time grid `t_k = k / fs_out`.
pub fn resample(sig: &RawEcg, fs_out: f64) -> Result<RawEcg, SignalError> {
    resample_with(sig, fs_out, ResampleOptions::default())
}

pub fn resample_with(
    sig: &RawEcg,
    fs_out: f64,
    opts: ResampleOptions,
) -> Result<RawEcg, SignalError> {
    if !(fs_out.is_finite() && fs_out > 0.0) {
        return Err(SignalError::BadRate(fs_out));
    }
    let n = sig.len();
    if n == 0 {
        return Err(SignalError::EmptySignal);
    }
    for (i, lead) in sig.samples.iter().enumerate() {
        if lead.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::MissingValues(i));
        }
    }
    if fs_out == sig.fs {
        return Ok(sig.clone());
    }
    let m = resampled_len(n, sig.fs, fs_out);
    let ratio = sig.fs / fs_out;
    let samples = sig
        .samples
        .iter()
        .map(|lead| {
            let filtered;
            let src: &[f64] = if opts.anti_alias && fs_out < sig.fs {
                filtered = lowpass(lead, 0.5 * fs_out / sig.fs);
                &filtered
            } else {
                lead
            };
            (0..m)
                .map(|k| {
                    let pos = k as f64 * ratio;
                    let i = pos.floor() as usize;
                    if i + 1 >= n {
                        return src[n - 1];
                    }
                    let frac = pos - i as f64;
                    if frac == 0.0 {
                        src[i]
                    } else {
                        src[i] + (src[i + 1] - src[i]) * frac
                    }
                })
                .collect()
        })
        .collect();
    Ok(RawEcg {
        leads: sig.leads.clone(),
        samples,
        fs: fs_out,
    })
}

/// Zero-phase Hamming-windowed sinc low-pass; `cutoff` in cycles/sample.
/// Edges are handled by clamping to the boundary sample.
fn lowpass(x: &[f64], cutoff: f64) -> Vec<f64> {
    let half = ((4.0 / cutoff).ceil() as usize).max(4);
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let k = i as f64 - half as f64;
            let sinc = if k == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * k).sin() / (std::f64::consts::PI * k)
            };
            let w = 0.54
                - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (2 * half) as f64).cos();
            sinc * w
        })
        .collect();
    let norm: f64 = taps.iter().sum();
    let n = x.len() as isize;
    (0..n)
        .map(|t| {
            taps.iter()
                .enumerate()
                .map(|(i, w)| {
                    let j = (t + i as isize - half as isize).clamp(0, n - 1);
                    w * x[j as usize]
                })
                .sum::<f64>()
                / norm
        })
        .collect()
}

pub fn clip(sig: &RawEcg, limit: f64) -> RawEcg {
    let mut out = sig.clone();
    for lead in &mut out.samples {
        for v in lead.iter_mut() {
            *v = v.clamp(-limit, limit);
        }
    }
    out
}

/// `fill_missing → resample(100 Hz) → clip(3 mV)`.
pub fn preprocess(sig: &RawEcg) -> Result<(CleanEcg, FillReport), SignalError> {
    preprocess_with(sig, ResampleOptions::default())
}

pub fn preprocess_with(
    sig: &RawEcg,
    opts: ResampleOptions,
) -> Result<(CleanEcg, FillReport), SignalError> {
    if sig.is_empty() {
        return Err(SignalError::EmptySignal);
    }
    let (filled, report) = fill_missing(sig);
    let resampled = resample_with(&filled, TARGET_FS, opts)?;
    let clipped = clip(&resampled, CLIP_MV);
    Ok((
        CleanEcg {
            leads: clipped.leads,
            samples: clipped.samples,
        },
        report,
    ))
}

/// One row of the record manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub record_id: String,
    pub subject_id: u64,
    pub ecg_time: String,
    pub fs: f64,
    pub n_samples: usize,
    pub path: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, SignalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| SignalError::Format(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| SignalError::Format(format!("{} row {}: {e}", path.display(), i + 2))))
        .collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), SignalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SignalError::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| SignalError::Format(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the little-endian `ECG1` binary payload (lead-major f32).
pub fn write_binary<W: Write>(mut w: W, sig: &RawEcg) -> std::io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(sig.n_leads() as u32).to_le_bytes())?;
    w.write_all(&(sig.len() as u32).to_le_bytes())?;
    w.write_all(&(sig.fs as f32).to_le_bytes())?;
    for lead in &sig.samples {
        for v in lead {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<RawEcg, SignalError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|e| SignalError::Format(format!("short header: {e}")))?;
    if &header[..4] != BINARY_MAGIC {
        return Err(SignalError::Format("bad magic, expected ECG1".into()));
    }
    let n_leads = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let n_samples = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let fs = f32::from_le_bytes(header[12..16].try_into().unwrap()) as f64;
    let mut buf = vec![0u8; n_leads * n_samples * 4];
    r.read_exact(&mut buf)
        .map_err(|e| SignalError::Format(format!("truncated payload: {e}")))?;
    let samples = buf
        .chunks_exact(n_samples * 4)
        .map(|lead| {
            lead.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        })
        .collect();
    RawEcg::new(default_lead_names(n_leads), samples, fs)
}

/// CSV payload: header row of lead names, one column per lead, empty cell =
/// missing sample.
pub fn read_csv_payload<R: Read>(r: R, fs: f64) -> Result<RawEcg, SignalError> {
    let mut rdr = csv::Reader::from_reader(r);
    let leads: Vec<String> = rdr
        .headers()
        .map_err(|e| SignalError::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut samples = vec![Vec::new(); leads.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| SignalError::Format(format!("row {}: {e}", row + 2)))?;
        for (i, field) in rec.iter().enumerate() {
            let v = if field.trim().is_empty() {
                f64::NAN
            } else {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| SignalError::Format(format!("row {} col {}: {e}", row + 2, i + 1)))?
            };
            samples[i].push(v);
        }
    }
    RawEcg::new(leads, samples, fs)
}

pub fn write_csv_payload<W: Write>(w: W, sig: &RawEcg) -> Result<(), SignalError> {
    let mut wr = csv::Writer::from_writer(w);
    let fmt = |e: csv::Error| SignalError::Format(e.to_string());
    wr.write_record(&sig.leads).map_err(fmt)?;
    for t in 0..sig.len() {
        let row: Vec<String> = sig
            .samples
            .iter()
            .map(|l| if l[t].is_finite() { l[t].to_string() } else { String::new() })
            .collect();
        wr.write_record(&row).map_err(fmt)?;
    }
    wr.flush().map_err(|e| SignalError::Format(e.to_string()))
}

/// Loads a payload by extension: `.csv` uses the CSV layout with the given
/// rate, anything else is read as `ECG1` binary.
pub fn load_payload(path: &Path, fs: f64) -> Result<RawEcg, SignalError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_csv_payload(reader, fs)
    } else {
        read_binary(reader)
    }
}

pub fn save_binary(path: &Path, sig: &RawEcg) -> Result<(), SignalError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_binary(&mut w, sig).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
