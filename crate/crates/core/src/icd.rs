//! ICD code normalization, ICD-9 → ICD-10 mapping, ancestor expansion,
//! chapter classification and label vocabulary selection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IcdError {
    #[error("ICD-9 code {0:?} is not present in the mapping table")]
    UnmappableIcd9(String),
    #[error("malformed ICD code {0:?}")]
    MalformedCode(String),
    #[error("code {0:?} is not covered by any ICD-10 chapter range")]
    OutOfRange(String),
    #[error("no code reaches the selection threshold of {0}")]
    EmptyLabelSet(usize),
    #[error("mapping table line {line}: {msg}")]
    MappingFormat { line: usize, msg: String },
    #[error("unknown ICD version {0:?}")]
    UnknownVersion(String),
    #[error("io error reading {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IcdVersion {
    Icd9,
    Icd10,
}

impl IcdVersion {
    /// Parses the MIMIC `icd_version` column (`9` / `10`).
    pub fn from_column(s: &str) -> Result<Self, IcdError> {
        match s.trim() {
            "9" | "ICD9" | "icd9" => Ok(IcdVersion::Icd9),
            "10" | "ICD10" | "icd10" => Ok(IcdVersion::Icd10),
            other => Err(IcdError::UnknownVersion(other.to_string())),
        }
    }
}

/// A normalized diagnosis code: uppercase, no dot, 3 to 5 characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IcdCode {
    text: String,
    version: IcdVersion,
}

impl IcdCode {
    /// Validates an already-normalized ICD-10 string.
    pub fn icd10(text: &str) -> Result<Self, IcdError> {
        if is_icd10_grammar(text) && !text.ends_with('X') {
            Ok(IcdCode {
                text: text.to_string(),
                version: IcdVersion::Icd10,
            })
        } else {
            Err(IcdError::MalformedCode(text.to_string()))
        }
    }

    pub fn icd9(text: &str) -> Result<Self, IcdError> {
        if is_icd9_grammar(text) {
            Ok(IcdCode {
                text: text.to_string(),
                version: IcdVersion::Icd9,
            })
        } else {
            Err(IcdError::MalformedCode(text.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn version(&self) -> IcdVersion {
        self.version
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    /// The 3-character category this code belongs to.
    pub fn category(&self) -> IcdCode {
        IcdCode {
            text: self.text[..3].to_string(),
            version: self.version,
        }
    }

    fn prefix(&self, n: usize) -> IcdCode {
        IcdCode {
            text: self.text[..n].to_string(),
            version: self.version,
        }
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for IcdCode {
    type Err = IcdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IcdCode::icd10(s)
    }
}

impl Serialize for IcdCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for IcdCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        IcdCode::icd10(&s).map_err(serde::de::Error::custom)
    }
}

fn is_icd10_grammar(s: &str) -> bool {
    let b = s.as_bytes();
    if !(3..=5).contains(&b.len()) {
        return false;
    }
    b[0].is_ascii_uppercase()
        && b[1].is_ascii_digit()
        && b[2..]
            .iter()
            .all(|c| c.is_ascii_digit() || c.is_ascii_uppercase())
}

fn is_icd9_grammar(s: &str) -> bool {
    let b = s.as_bytes();
    if !(3..=5).contains(&b.len()) {
        return false;
    }
    match b[0] {
        b'0'..=b'9' => b.iter().all(u8::is_ascii_digit),
        b'V' => b[1..].iter().all(u8::is_ascii_digit),
        // E-codes have a four character stem (E800-E999).
        b'E' => b.len() >= 4 && b[1..].iter().all(u8::is_ascii_digit),
        _ => false,
    }
}

/// Uppercases and removes dots and whitespace.
fn canonical_text(raw: &str) -> String {
    raw.chars()
        .filter(|c| *c != '.' && !c.is_whitespace())
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

/// Truncates to five characters, then strips trailing `X` placeholders.
fn normalize_icd10_text(raw: &str) -> Result<IcdCode, IcdError> {
    let mut text = canonical_text(raw);
    text.truncate(5);
    while text.ends_with('X') {
        text.pop();
    }
    IcdCode::icd10(&text).map_err(|_| IcdError::MalformedCode(raw.to_string()))
}

/// ICD-9 → ICD-10 lookup. Keys are dot-free uppercase ICD-9 codes; each key
/// maps to every target listed for it, in file order.
#[derive(Debug, Clone, Default)]
pub struct MappingTable {
    entries: HashMap<String, Vec<String>>,
}

impl MappingTable {
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, IcdError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut table = MappingTable::default();
        for (i, (src, dst)) in pairs.into_iter().enumerate() {
            table.insert(src, dst, i + 1)?;
        }
        Ok(table)
    }

    /// Reads the `icd9_code<TAB>icd10_code` format. `#` lines and blank lines
    /// are skipped.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, IcdError> {
        let mut table = MappingTable::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| IcdError::MappingFormat {
                line: i + 1,
                msg: e.to_string(),
            })?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = trimmed.split('\t');
            let (Some(src), Some(dst), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(IcdError::MappingFormat {
                    line: i + 1,
                    msg: "expected exactly two tab-separated columns".into(),
                });
            };
            table.insert(src, dst, i + 1)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, IcdError> {
        let file = std::fs::File::open(path).map_err(|e| IcdError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    fn insert(&mut self, src: &str, dst: &str, line: usize) -> Result<(), IcdError> {
        let key = canonical_text(src);
        if !is_icd9_grammar(&key) {
            return Err(IcdError::MappingFormat {
                line,
                msg: format!("malformed ICD-9 code {src:?}"),
            });
        }
        let target = canonical_text(dst);
        normalize_icd10_text(&target).map_err(|_| IcdError::MappingFormat {
            line,
            msg: format!("malformed ICD-10 target {dst:?}"),
        })?;
        let targets = self.entries.entry(key).or_default();
        if !targets.contains(&target) {
            targets.push(target);
        }
        Ok(())
    }

    pub fn get(&self, icd9: &str) -> Option<&[String]> {
        self.entries.get(&canonical_text(icd9)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Normalizes a raw code to a list of ICD-10 codes.
///
/// ICD-10 input yields exactly one code. ICD-9 input yields every mapped
/// target, each normalized, de-duplicated and in table order.
pub fn normalize(
    raw: &str,
    version: IcdVersion,
    table: &MappingTable,
) -> Result<Vec<IcdCode>, IcdError> {
    if raw.trim().is_empty() {
        return Err(IcdError::MalformedCode(raw.to_string()));
    }
    match version {
        IcdVersion::Icd10 => Ok(vec![normalize_icd10_text(raw)?]),
        IcdVersion::Icd9 => {
            let key = canonical_text(raw);
            if !is_icd9_grammar(&key) {
                return Err(IcdError::MalformedCode(raw.to_string()));
            }
            let targets = table
                .get(&key)
                .ok_or_else(|| IcdError::UnmappableIcd9(raw.to_string()))?;
            let mut out: Vec<IcdCode> = Vec::with_capacity(targets.len());
            for t in targets {
                let code = normalize_icd10_text(t)?;
                if !out.contains(&code) {
                    out.push(code);
                }
            }
            Ok(out)
        }
    }
}

/// `{code}` plus its 4- and 3-character prefixes.
pub fn expand_ancestors(code: &IcdCode) -> BTreeSet<IcdCode> {
    let mut out = BTreeSet::new();
    let n = code.len();
    if n >= 5 {
        out.insert(code.prefix(4));
    }
    if n >= 4 {
        out.insert(code.prefix(3));
    }
    out.insert(code.clone());
    out
}

/// Ancestor closure of a whole diagnosis list, de-duplicated.
pub fn expand_all<'a, I>(codes: I) -> BTreeSet<IcdCode>
where
    I: IntoIterator<Item = &'a IcdCode>,
{
    let mut out = BTreeSet::new();
    for c in codes {
        out.extend(expand_ancestors(c));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Chapter {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
    IX,
    X,
    XI,
    XII,
    XIII,
    XIV,
    XV,
    XVI,
    XVII,
    XVIII,
    XIX,
    XX,
    XXI,
    XXII,
}

/// One row of the compiled chapter table.
#[derive(Debug, Clone, Copy)]
pub struct ChapterRange {
    pub chapter: Chapter,
    /// Inclusive 3-character bounds compared lexicographically. Upper bounds
    /// ending in `Z` absorb letter-suffixed categories such as `O9A`.
    pub first: &'static str,
    pub last: &'static str,
    pub title: &'static str,
}

// Tabular-list ranges widened so the letter-digit space has no gaps.
pub const CHAPTER_RANGES: &[ChapterRange] = &[
    ChapterRange { chapter: Chapter::I, first: "A00", last: "B9Z", title: "Certain infectious and parasitic diseases" },
    ChapterRange { chapter: Chapter::II, first: "C00", last: "D4Z", title: "Neoplasms" },
    ChapterRange { chapter: Chapter::III, first: "D50", last: "D9Z", title: "Diseases of the blood and blood-forming organs and certain disorders involving the immune mechanism" },
    ChapterRange { chapter: Chapter::IV, first: "E00", last: "E9Z", title: "Endocrine, nutritional and metabolic diseases" },
    ChapterRange { chapter: Chapter::V, first: "F00", last: "F9Z", title: "Mental, behavioral and neurodevelopmental disorders" },
    ChapterRange { chapter: Chapter::VI, first: "G00", last: "G9Z", title: "Diseases of the nervous system" },
    ChapterRange { chapter: Chapter::VII, first: "H00", last: "H5Z", title: "Diseases of the eye and adnexa" },
    ChapterRange { chapter: Chapter::VIII, first: "H60", last: "H9Z", title: "Diseases of the ear and mastoid process" },
    ChapterRange { chapter: Chapter::IX, first: "I00", last: "I9Z", title: "Diseases of the circulatory system" },
    ChapterRange { chapter: Chapter::X, first: "J00", last: "J9Z", title: "Diseases of the respiratory system" },
    ChapterRange { chapter: Chapter::XI, first: "K00", last: "K9Z", title: "Diseases of the digestive system" },
    ChapterRange { chapter: Chapter::XII, first: "L00", last: "L9Z", title: "Diseases of the skin and subcutaneous tissue" },
    ChapterRange { chapter: Chapter::XIII, first: "M00", last: "M9Z", title: "Diseases of the musculoskeletal system and connective tissue" },
    ChapterRange { chapter: Chapter::XIV, first: "N00", last: "N9Z", title: "Diseases of the genitourinary system" },
    ChapterRange { chapter: Chapter::XV, first: "O00", last: "O9Z", title: "Pregnancy, childbirth and the puerperium" },
    ChapterRange { chapter: Chapter::XVI, first: "P00", last: "P9Z", title: "Certain conditions originating in the perinatal period" },
    ChapterRange { chapter: Chapter::XVII, first: "Q00", last: "Q9Z", title: "Congenital malformations, deformations and chromosomal abnormalities" },
    ChapterRange { chapter: Chapter::XVIII, first: "R00", last: "R9Z", title: "Symptoms, signs and abnormal clinical and laboratory findings, not elsewhere classified" },
    ChapterRange { chapter: Chapter::XIX, first: "S00", last: "T9Z", title: "Injury, poisoning and certain other consequences of external causes" },
    ChapterRange { chapter: Chapter::XXII, first: "U00", last: "U9Z", title: "Codes for special purposes" },
    ChapterRange { chapter: Chapter::XX, first: "V00", last: "Y9Z", title: "External causes of morbidity" },
    ChapterRange { chapter: Chapter::XXI, first: "Z00", last: "Z9Z", title: "Factors influencing health status and contact with health services" },
];

impl Chapter {
    pub const ALL: [Chapter; 22] = [
        Chapter::I,
        Chapter::II,
        Chapter::III,
        Chapter::IV,
        Chapter::V,
        Chapter::VI,
        Chapter::VII,
        Chapter::VIII,
        Chapter::IX,
        Chapter::X,
        Chapter::XI,
        Chapter::XII,
        Chapter::XIII,
        Chapter::XIV,
        Chapter::XV,
        Chapter::XVI,
        Chapter::XVII,
        Chapter::XVIII,
        Chapter::XIX,
        Chapter::XX,
        Chapter::XXI,
        Chapter::XXII,
    ];

    pub fn roman(self) -> &'static str {
        match self {
            Chapter::I => "I",
            Chapter::II => "II",
            Chapter::III => "III",
            Chapter::IV => "IV",
            Chapter::V => "V",
            Chapter::VI => "VI",
            Chapter::VII => "VII",
            Chapter::VIII => "VIII",
            Chapter::IX => "IX",
            Chapter::X => "X",
            Chapter::XI => "XI",
            Chapter::XII => "XII",
            Chapter::XIII => "XIII",
            Chapter::XIV => "XIV",
            Chapter::XV => "XV",
            Chapter::XVI => "XVI",
            Chapter::XVII => "XVII",
            Chapter::XVIII => "XVIII",
            Chapter::XIX => "XIX",
            Chapter::XX => "XX",
            Chapter::XXI => "XXI",
            Chapter::XXII => "XXII",
        }
    }

    pub fn ranges(self) -> impl Iterator<Item = &'static ChapterRange> {
        CHAPTER_RANGES.iter().filter(move |r| r.chapter == self)
    }

    pub fn title(self) -> &'static str {
        self.ranges().next().map(|r| r.title).unwrap_or("")
    }
}

impl fmt::Display for Chapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

fn chapter_of_prefix(prefix: &str) -> Option<Chapter> {
    CHAPTER_RANGES
        .iter()
        .find(|r| r.first <= prefix && prefix <= r.last)
        .map(|r| r.chapter)
}

pub fn chapter_of(code: &IcdCode) -> Result<Chapter, IcdError> {
    if code.version() != IcdVersion::Icd10 {
        return Err(IcdError::OutOfRange(code.to_string()));
    }
    chapter_of_prefix(&code.as_str()[..3]).ok_or_else(|| IcdError::OutOfRange(code.to_string()))
}

/// Training vocabulary: codes in lexicographic order with a column index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    codes: Vec<IcdCode>,
    threshold: usize,
    #[serde(skip)]
    index: HashMap<IcdCode, usize>,
}

impl LabelSet {
    /// Builds a label set from an explicit code list (sorted and de-duplicated).
    pub fn from_codes<I: IntoIterator<Item = IcdCode>>(codes: I, threshold: usize) -> Self {
        let codes: Vec<IcdCode> = codes
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        LabelSet {
            codes,
            threshold,
            index,
        }
    }

    pub fn codes(&self) -> &[IcdCode] {
        &self.codes
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn column(&self, code: &IcdCode) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn contains(&self, code: &IcdCode) -> bool {
        self.index.contains_key(code)
    }

    /// Stable content hash used to check checkpoint/manifest compatibility.
    pub fn fingerprint(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        for c in &self.codes {
            h.update(c.as_str().as_bytes());
            h.update(b"\n");
        }
        format!("{:08x}-{}", h.finalize(), self.codes.len())
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let mut ls: LabelSet = serde_json::from_str(s)?;
        ls.rebuild_index();
        Ok(ls)
    }
}

/// Occurrence counts of each code over an annotation stream.
pub fn count_codes<'a, I>(annotations: I) -> BTreeMap<IcdCode, usize>
where
    I: IntoIterator<Item = &'a IcdCode>,
{
    let mut counts = BTreeMap::new();
    for c in annotations {
        *counts.entry(c.clone()).or_insert(0) += 1;
    }
    counts
}

/// Keeps every code occurring at least `threshold` times.
///
/// The stream is expected to hold one entry per (record, code) pair after
/// ancestor expansion.
pub fn select_label_set<'a, I>(annotations: I, threshold: usize) -> Result<LabelSet, IcdError>
where
    I: IntoIterator<Item = &'a IcdCode>,
{
    let counts = count_codes(annotations);
    let selected: Vec<IcdCode> = counts
        .into_iter()
        .filter(|(_, n)| *n >= threshold)
        .map(|(c, _)| c)
        .collect();
    if selected.is_empty() {
        return Err(IcdError::EmptyLabelSet(threshold));
    }
    Ok(LabelSet::from_codes(selected, threshold))
}

/// Optional `code<TAB>description` table used when rendering reports.
#[derive(Debug, Clone, Default)]
pub struct Descriptions(HashMap<String, String>);

impl Descriptions {
    pub fn from_reader<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut map = HashMap::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((code, desc)) = line.split_once('\t') {
                map.insert(canonical_text(code), desc.trim().to_string());
            }
        }
        Ok(Descriptions(map))
    }

    pub fn insert(&mut self, code: &str, desc: &str) {
        self.0.insert(canonical_text(code), desc.to_string());
    }

    pub fn get(&self, code: &IcdCode) -> &str {
        self.0.get(code.as_str()).map(String::as_str).unwrap_or("")
    }
}
