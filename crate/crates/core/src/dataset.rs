//! ODIR-style metadata ingestion, binary filtering, eye pairing and stratified splits.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides the configured image root.
pub const IMAGE_ROOT_ENV: &str = "FUNDUS_IMAGE_ROOT";

pub const COL_ID: &str = "ID";
pub const COL_AGE: &str = "Patient Age";
pub const COL_SEX: &str = "Patient Sex";
pub const COL_LEFT_IMAGE: &str = "Left-Fundus";
pub const COL_RIGHT_IMAGE: &str = "Right-Fundus";
pub const COL_LEFT_KEYWORDS: &str = "Left-Diagnostic Keywords";
pub const COL_RIGHT_KEYWORDS: &str = "Right-Diagnostic Keywords";

pub const COLUMNS: [&str; 7] = [
    COL_ID,
    COL_AGE,
    COL_SEX,
    COL_LEFT_IMAGE,
    COL_RIGHT_IMAGE,
    COL_LEFT_KEYWORDS,
    COL_RIGHT_KEYWORDS,
];

const NORMAL_PHRASE: &str = "normal fundus";
const CATARACT_WORD: &str = "cataract";
/// Image-quality remarks that are not diagnoses.
const QUALITY_REMARKS: [&str; 3] = ["lens dust", "low image quality", "image offset"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal = 0,
    Cataract = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Label> {
        match i {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Cataract),
            other => Err(Error::Input(format!("label {other} is not 0 or 1"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Cataract => "cataract",
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Label> {
        Label::from_index(v as usize)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: Option<u32>,
    pub gender: Gender,
    pub left_image: String,
    pub right_image: String,
    pub left_keywords: Vec<String>,
    pub right_keywords: Vec<String>,
}

/// A data row that could not become a record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reject {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub patient_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Metadata {
    pub records: Vec<PatientRecord>,
    pub rejects: Vec<Reject>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image_path: PathBuf,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DualEyeSample {
    pub left_path: PathBuf,
    pub right_path: PathBuf,
    pub label: Label,
}

pub trait Labeled {
    fn label(&self) -> Label;
}

impl Labeled for LabeledSample {
    fn label(&self) -> Label {
        self.label
    }
}

impl Labeled for DualEyeSample {
    fn label(&self) -> Label {
        self.label
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub seed: u64,
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: usize,
    pub cataract: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.normal + self.cataract
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Normal => self.normal,
            Label::Cataract => self.cataract,
        }
    }
}

/// Splits a keyword cell on ASCII and full-width commas and semicolons.
pub fn parse_keywords(cell: &str) -> Vec<String> {
    cell.split([',', '，', ';', '；'])
        .map(|k| k.trim().to_lowercase())
        .filter(|k| !k.is_empty())
        .collect()
}

fn parse_gender(s: &str) -> Gender {
    match s.trim().to_lowercase().as_str() {
        "male" | "m" => Gender::Male,
        "female" | "f" => Gender::Female,
        _ => Gender::Unknown,
    }
}

/// Reads ODIR-layout metadata; unusable rows go to `rejects` with a reason.
pub fn load_metadata(csv_path: &Path) -> Result<Metadata> {
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    load_metadata_from_reader(file)
}

pub fn load_metadata_from_reader(reader: impl Read) -> Result<Metadata> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}').trim() == name)
            .ok_or_else(|| Error::MissingColumn { column: name.to_string() })
    };
    let idx: Vec<usize> = COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let [i_id, i_age, i_sex, i_li, i_ri, i_lk, i_rk] = idx[..] else {
        unreachable!()
    };
    let mut out = Metadata::default();
    let mut seen = HashSet::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = n + 1;
        let cell = |i: usize| row.get(i).unwrap_or("").trim();
        let id = cell(i_id).to_string();
        let mut reject = |reason: String| {
            log::warn!("metadata reject row={row_no} id={id:?} reason={reason:?}");
            out.rejects.push(Reject {
                row: row_no,
                patient_id: id.clone(),
                reason,
            });
        };
        if id.is_empty() {
            reject("empty patient id".into());
            continue;
        }
        if cell(i_li).is_empty() || cell(i_ri).is_empty() {
            reject("missing image reference".into());
            continue;
        }
        let (lk, rk) = (parse_keywords(cell(i_lk)), parse_keywords(cell(i_rk)));
        if lk.is_empty() || rk.is_empty() {
            reject("missing diagnostic keywords".into());
            continue;
        }
        if !seen.insert(id.clone()) {
            reject("duplicate patient id".into());
            continue;
        }
        out.records.push(PatientRecord {
            patient_id: id.clone(),
            age: cell(i_age).parse().ok(),
            gender: parse_gender(cell(i_sex)),
            left_image: cell(i_li).to_string(),
            right_image: cell(i_ri).to_string(),
            left_keywords: lk,
            right_keywords: rk,
        });
    }
    Ok(out)
}

/// Binary label of one eye, or the reason it is not usable.
///
/// Normal: every keyword is "normal fundus" or an image-quality remark, and
/// "normal fundus" is present. Cataract: some keyword mentions cataract.
/// An eye satisfying both or neither is ambiguous.
pub fn eye_label(keywords: &[String]) -> std::result::Result<Label, String> {
    let kws: Vec<String> = keywords.iter().map(|k| k.trim().to_lowercase()).collect();
    let cataract = kws.iter().any(|k| k.contains(CATARACT_WORD));
    let has_normal = kws.iter().any(|k| k == NORMAL_PHRASE);
    let only_normal = kws
        .iter()
        .all(|k| k == NORMAL_PHRASE || QUALITY_REMARKS.contains(&k.as_str()));
    match (has_normal, cataract) {
        (true, true) => Err("matches both normal and cataract".into()),
        (false, true) => Ok(Label::Cataract),
        (true, false) if only_normal => Ok(Label::Normal),
        _ => Err(format!("non-target diagnosis: {}", kws.join(", "))),
    }
}

/// Either-eye rule: the pair is cataract when at least one eye is.
pub fn fuse_labels(left: Label, right: Label) -> Label {
    if left == Label::Cataract || right == Label::Cataract {
        Label::Cataract
    } else {
        Label::Normal
    }
}

/// One sample per eye whose keywords map unambiguously to a target class.
pub fn filter_binary(records: &[PatientRecord]) -> Vec<LabeledSample> {
    let mut out = Vec::new();
    for r in records {
        for (side, image, kws) in [
            ("left", &r.left_image, &r.left_keywords),
            ("right", &r.right_image, &r.right_keywords),
        ] {
            match eye_label(kws) {
                Ok(label) => out.push(LabeledSample {
                    image_path: PathBuf::from(image),
                    label,
                }),
                Err(reason) => log::debug!("eye dropped id={} side={side} reason={reason:?}", r.patient_id),
            }
        }
    }
    out
}

/// One pair per patient whose two eyes both have a target label.
pub fn build_dual_eye_samples(records: &[PatientRecord]) -> Vec<DualEyeSample> {
    let mut out = Vec::new();
    for r in records {
        match (eye_label(&r.left_keywords), eye_label(&r.right_keywords)) {
            (Ok(l), Ok(rr)) => out.push(DualEyeSample {
                left_path: PathBuf::from(&r.left_image),
                right_path: PathBuf::from(&r.right_image),
                label: fuse_labels(l, rr),
            }),
            (l, rr) => {
                let reason = [l.err(), rr.err()].into_iter().flatten().collect::<Vec<_>>().join("; ");
                log::debug!("pair dropped id={} reason={reason:?}", r.patient_id);
            }
        }
    }
    out
}

pub fn class_distribution<T: Labeled>(samples: &[T]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for s in samples {
        match s.label() {
            Label::Normal => c.normal += 1,
            Label::Cataract => c.cataract += 1,
        }
    }
    c
}

/// Per-class train size: `floor(ratio * n)`, kept within `[1, n - 1]`.
pub fn train_count(ratio: f64, n: usize) -> usize {
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n.saturating_sub(1).max(1))
}

/// Seeded per-class split. Each subset keeps the input order.
pub fn stratified_split<T: Labeled + Clone>(samples: &[T], ratio: f64, seed: u64) -> Result<SplitResult<T>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let counts = class_distribution(samples);
    for label in [Label::Normal, Label::Cataract] {
        let n = counts.get(label);
        if n < 2 {
            return Err(Error::Stratification {
                class: label.name(),
                count: n,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; samples.len()];
    for label in [Label::Normal, Label::Cataract] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label() == label).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..train_count(ratio, idx.len())] {
            in_train[i] = true;
        }
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (s, t) in samples.iter().zip(in_train) {
        if t {
            train.push(s.clone());
        } else {
            validation.push(s.clone());
        }
    }
    Ok(SplitResult {
        train,
        validation,
        seed,
        ratio,
    })
}

/// The configured root, unless the override variable is set and non-empty.
pub fn resolve_image_root(configured: &Path) -> PathBuf {
    match std::env::var_os(IMAGE_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    path: String,
    label: u8,
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    left: String,
    right: String,
    label: u8,
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// `path,label` manifest.
pub fn write_sample_manifest(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let mut w = writer(path)?;
    for s in samples {
        w.serialize(SampleRow {
            path: path_text(&s.image_path),
            label: s.label.into(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sample_manifest(path: &Path) -> Result<Vec<LabeledSample>> {
    let mut r = reader(path)?;
    r.deserialize::<SampleRow>()
        .map(|row| {
            let row = row?;
            Ok(LabeledSample {
                image_path: PathBuf::from(row.path),
                label: Label::try_from(row.label)?,
            })
        })
        .collect()
}

/// `left,right,label` manifest.
pub fn write_pair_manifest(path: &Path, pairs: &[DualEyeSample]) -> Result<()> {
    let mut w = writer(path)?;
    for s in pairs {
        w.serialize(PairRow {
            left: path_text(&s.left_path),
            right: path_text(&s.right_path),
            label: s.label.into(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pair_manifest(path: &Path) -> Result<Vec<DualEyeSample>> {
    let mut r = reader(path)?;
    r.deserialize::<PairRow>()
        .map(|row| {
            let row = row?;
            Ok(DualEyeSample {
                left_path: PathBuf::from(row.left),
                right_path: PathBuf::from(row.right),
                label: Label::try_from(row.label)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kw(s: &str) -> Vec<String> {
        parse_keywords(s)
    }

    #[test]
    fn keyword_rules() {
        assert_eq!(eye_label(&kw("normal fundus")), Ok(Label::Normal));
        assert_eq!(eye_label(&kw("Normal Fundus ，lens dust")), Ok(Label::Normal));
        assert_eq!(eye_label(&kw("cataract")), Ok(Label::Cataract));
        assert_eq!(eye_label(&kw("mild nonproliferative retinopathy，cataract")), Ok(Label::Cataract));
        assert!(eye_label(&kw("moderate non proliferative retinopathy")).is_err());
        assert!(eye_label(&kw("normal fundus, cataract")).is_err());
        assert!(eye_label(&kw("normal fundus, drusen")).is_err());
        assert!(eye_label(&kw("lens dust")).is_err());
    }

    #[test]
    fn train_count_floors_and_clamps() {
        assert_eq!(train_count(0.8, 2873), 2298);
        assert_eq!(train_count(0.8, 293), 234);
        assert_eq!(train_count(0.5, 4), 2);
        assert_eq!(train_count(0.29, 100), 29);
        assert_eq!(train_count(0.99, 2), 1);
        assert_eq!(train_count(0.01, 2), 1);
    }
}
