//! Labeled image manifests: CSV loading, split integrity, class counts and
//! the real + synthetic merge.
//!
//! Manifest files are UTF-8 CSV with the fixed header
//! `record_id,patient_id,path,label,source,view`. Image paths are relative
//! to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::ops::Add;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 6] = ["record_id", "patient_id", "path", "label", "source", "view"];

/// Prefix that namespaces synthetic record and patient ids.
pub const SYNTHETIC_PREFIX: &str = "syn:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Negative, Label::Positive];

    /// Class index used by models: negative = 0, positive = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Negative
        } else {
            Label::Positive
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "real" => Ok(Source::Real),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    PA,
    AP,
    #[serde(rename = "unknown")]
    Unknown,
}

impl View {
    fn as_str(self) -> &'static str {
        match self {
            View::PA => "PA",
            View::AP => "AP",
            View::Unknown => "unknown",
        }
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "PA" => Ok(View::PA),
            "AP" => Ok(View::AP),
            "unknown" => Ok(View::Unknown),
            other => Err(format!("unknown view {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub record_id: String,
    pub patient_id: String,
    /// Resolved location of the image file.
    pub path: PathBuf,
    pub label: Label,
    pub source: Source,
    pub view: Option<View>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.positive + self.negative
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Positive => self.positive,
            Label::Negative => self.negative,
        }
    }
}

impl Add for ClassCounts {
    type Output = ClassCounts;

    fn add(self, rhs: ClassCounts) -> ClassCounts {
        ClassCounts {
            positive: self.positive + rhs.positive,
            negative: self.negative + rhs.negative,
        }
    }
}

/// An ordered, immutable collection of records belonging to one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    name: String,
    split: Split,
    records: Vec<ImageRecord>,
}

impl Manifest {
    /// Builds a manifest, rejecting duplicate record ids.
    pub fn new(name: impl Into<String>, split: Split, records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate record_id {:?}", r.record_id)));
            }
        }
        Ok(Manifest {
            name: name.into(),
            split,
            records,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labels of every record, in manifest order.
    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// The sub-manifest holding only records of `label`.
    pub fn filter_label(&self, label: Label) -> Manifest {
        Manifest {
            name: format!("{}[{}]", self.name, label),
            split: self.split,
            records: self.records.iter().filter(|r| r.label == label).cloned().collect(),
        }
    }

    /// Writes the manifest as CSV, with image paths relative to the output
    /// file's directory.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = manifest_dir(path)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            let rel = relative_path(&r.path, &base);
            let rel = rel.to_string_lossy().replace('\\', "/");
            let patient = if r.patient_id == r.record_id {
                ""
            } else {
                r.patient_id.as_str()
            };
            w.write_record([
                r.record_id.as_str(),
                patient,
                rel.as_str(),
                r.label.as_str(),
                r.source.as_str(),
                r.view.map(View::as_str).unwrap_or(""),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Load {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

fn manifest_dir(path: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
    Ok(normalize(abs.parent().unwrap_or(Path::new("/"))))
}

/// Lexically removes `.` and `..` components.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// `target` expressed relative to the directory `base`; both absolute.
fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return target.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

/// Parses a manifest CSV. Image files are not opened.
pub fn load_manifest(path: &Path, split: Split) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = manifest_dir(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let parse_err = |row: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| parse_err(0, "missing header".into()))?
        .map_err(|e| parse_err(0, e.to_string()))?;
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(parse_err(0, format!("header must be {}", MANIFEST_HEADER.join(","))));
    }
    let mut records = Vec::new();
    for (i, row) in rows.enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| parse_err(row_no, e.to_string()))?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(parse_err(
                row_no,
                format!("expected {} columns, found {}", MANIFEST_HEADER.len(), row.len()),
            ));
        }
        let record_id = row[0].to_string();
        if record_id.is_empty() {
            return Err(parse_err(row_no, "empty record_id".into()));
        }
        let patient_id = if row[1].is_empty() {
            record_id.clone()
        } else {
            row[1].to_string()
        };
        let label = row[3].parse().map_err(|e| parse_err(row_no, e))?;
        let source = row[4].parse().map_err(|e| parse_err(row_no, e))?;
        let view = if row[5].is_empty() {
            None
        } else {
            Some(row[5].parse().map_err(|e| parse_err(row_no, e))?)
        };
        records.push(ImageRecord {
            record_id,
            patient_id,
            path: normalize(&base.join(&row[2])),
            label,
            source,
            view,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Manifest::new(name, split, records)
}

pub fn class_counts(m: &Manifest) -> ClassCounts {
    m.records.iter().fold(ClassCounts::default(), |mut acc, r| {
        match r.label {
            Label::Positive => acc.positive += 1,
            Label::Negative => acc.negative += 1,
        }
        acc
    })
}

/// Patient ids present in both manifests, in order of first appearance in `a`.
pub fn check_disjoint(a: &Manifest, b: &Manifest) -> Vec<String> {
    let in_b: HashSet<&str> = b.records.iter().map(|r| r.patient_id.as_str()).collect();
    let mut reported = HashSet::new();
    a.records
        .iter()
        .map(|r| r.patient_id.as_str())
        .filter(|p| in_b.contains(p) && reported.insert(*p))
        .map(str::to_string)
        .collect()
}

fn namespaced(id: &str) -> String {
    if id.starts_with(SYNTHETIC_PREFIX) {
        id.to_string()
    } else {
        format!("{SYNTHETIC_PREFIX}{id}")
    }
}

/// Concatenates a real training manifest with a synthetic one. Synthetic
/// record and patient ids are namespaced with `syn:`.
pub fn merge(real: &Manifest, synthetic: &Manifest) -> Result<Manifest> {
    if real.split != Split::Train || synthetic.split != Split::Train {
        return Err(Error::usage(format!(
            "merge needs two train manifests, got {} and {}",
            real.split, synthetic.split
        )));
    }
    if let Some(r) = synthetic.records.iter().find(|r| r.source != Source::Synthetic) {
        return Err(Error::usage(format!(
            "record {:?} in the synthetic manifest is not marked synthetic",
            r.record_id
        )));
    }
    let mut records = real.records.clone();
    records.extend(synthetic.records.iter().map(|r| ImageRecord {
        record_id: namespaced(&r.record_id),
        patient_id: namespaced(&r.patient_id),
        ..r.clone()
    }));
    let real_patients: HashSet<&str> = real.records.iter().map(|r| r.patient_id.as_str()).collect();
    if let Some(r) = records[real.len()..]
        .iter()
        .find(|r| real_patients.contains(r.patient_id.as_str()))
    {
        return Err(Error::Integrity(format!(
            "synthetic patient id {:?} collides with a real patient",
            r.patient_id
        )));
    }
    if synthetic.is_empty() {
        return Manifest::new(real.name.clone(), Split::Train, records);
    }
    Manifest::new(format!("{}+{}", real.name, synthetic.name), Split::Train, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, patient: &str, label: Label, source: Source) -> ImageRecord {
        ImageRecord {
            record_id: id.into(),
            patient_id: patient.into(),
            path: PathBuf::from(format!("/data/{id}.png")),
            label,
            source,
            view: None,
        }
    }

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "record_id,patient_id,path,label,source,view\n\
             a,p1,img/a.png,positive,real,PA\n\
             b,,img/b.png,negative,real,AP\n\
             c,p3,img/c.png,negative,real,\n",
        );
        let m = load_manifest(&p, Split::Train).unwrap();
        assert_eq!(m.len(), 3);
        let ids: Vec<_> = m.records().iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(m.records()[1].patient_id, "b");
        assert_eq!(m.records()[0].view, Some(View::PA));
        assert_eq!(m.records()[2].view, None);
        assert!(m.records()[0].path.ends_with("img/a.png"));
        assert!(m.records()[0].path.is_absolute());
    }

    #[test]
    fn unknown_label_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "record_id,patient_id,path,label,source,view\n\
             a,p1,a.png,positive,real,PA\n\
             b,p2,b.png,covid,real,PA\n",
        );
        match load_manifest(&p, Split::Train).unwrap_err() {
            Error::Parse { row, reason, .. } => {
                assert_eq!(row, 2);
                assert!(reason.contains("covid"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_column_count_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "record_id,patient_id,path,label,source,view\na,p1,a.png,positive\n",
        );
        assert!(matches!(
            load_manifest(&p, Split::Train),
            Err(Error::Parse { row: 1, .. })
        ));
        let p = write(dir.path(), "id,path,label\n");
        assert!(matches!(
            load_manifest(&p, Split::Train),
            Err(Error::Parse { row: 0, .. })
        ));
    }

    #[test]
    fn duplicate_ids_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "record_id,patient_id,path,label,source,view\na,,a.png,positive,real,PA\na,,b.png,negative,real,PA\n",
        );
        assert!(matches!(load_manifest(&p, Split::Train), Err(Error::Integrity(_))));
        assert!(matches!(
            load_manifest(&dir.path().join("nope.csv"), Split::Train),
            Err(Error::Load { .. })
        ));
    }

    #[test]
    fn empty_manifest_counts_zero() {
        let m = Manifest::new("e", Split::Test, vec![]).unwrap();
        assert_eq!(class_counts(&m), ClassCounts::default());
    }

    #[test]
    fn disjointness() {
        let a = Manifest::new(
            "a",
            Split::Train,
            vec![
                rec("1", "p1", Label::Positive, Source::Real),
                rec("2", "p2", Label::Negative, Source::Real),
            ],
        )
        .unwrap();
        let b = Manifest::new(
            "b",
            Split::Test,
            vec![
                rec("3", "p2", Label::Positive, Source::Real),
                rec("4", "p3", Label::Negative, Source::Real),
            ],
        )
        .unwrap();
        assert_eq!(check_disjoint(&a, &b), vec!["p2".to_string()]);
        assert_eq!(check_disjoint(&a, &a), vec!["p1".to_string(), "p2".to_string()]);
        let c = Manifest::new("c", Split::Test, vec![rec("9", "p9", Label::Positive, Source::Real)]).unwrap();
        assert!(check_disjoint(&a, &c).is_empty());
    }

    #[test]
    fn merge_namespaces_and_checks_split() {
        let real = Manifest::new("real", Split::Train, vec![rec("x", "x", Label::Positive, Source::Real)]).unwrap();
        let syn = Manifest::new(
            "syn",
            Split::Train,
            vec![rec("x", "x", Label::Negative, Source::Synthetic)],
        )
        .unwrap();
        let merged = merge(&real, &syn).unwrap();
        assert_eq!(merged.records()[1].record_id, "syn:x");
        assert_eq!(merged.records()[1].patient_id, "syn:x");
        let empty = Manifest::new("none", Split::Train, vec![]).unwrap();
        assert_eq!(merge(&real, &empty).unwrap(), real);
        let test_syn = Manifest::new("syn", Split::Test, vec![]).unwrap();
        assert!(matches!(merge(&real, &test_syn), Err(Error::Usage(_))));
        let not_syn = Manifest::new("syn", Split::Train, vec![rec("y", "y", Label::Negative, Source::Real)]).unwrap();
        assert!(matches!(merge(&real, &not_syn), Err(Error::Usage(_))));
        let clash = Manifest::new(
            "real",
            Split::Train,
            vec![rec("syn:x", "q", Label::Positive, Source::Real)],
        )
        .unwrap();
        assert!(matches!(merge(&clash, &syn), Err(Error::Integrity(_))));
    }

    fn arb_manifest(prefix: &'static str) -> impl Strategy<Value = Manifest> {
        prop::collection::vec((any::<bool>(), 0u8..6, any::<bool>()), 0..12).prop_map(move |rows| {
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(i, (pos, patient, pa))| ImageRecord {
                    record_id: format!("{prefix}{i}"),
                    patient_id: format!("p{patient}"),
                    path: PathBuf::from(format!("/root/imgs/{prefix}{i}.png")),
                    label: if pos { Label::Positive } else { Label::Negative },
                    source: Source::Real,
                    view: Some(if pa { View::PA } else { View::AP }),
                })
                .collect();
            Manifest::new(prefix, Split::Train, records).unwrap()
        })
    }

    proptest! {
        #[test]
        fn merge_adds_counts(a in arb_manifest("a"), b in arb_manifest("b")) {
            let syn_records = b.records().iter().map(|r| ImageRecord {
                source: Source::Synthetic,
                ..r.clone()
            }).collect();
            let syn = Manifest::new("b", Split::Train, syn_records).unwrap();
            let merged = merge(&a, &syn).unwrap();
            prop_assert_eq!(class_counts(&merged), class_counts(&a) + class_counts(&syn));
        }

        #[test]
        fn disjoint_is_symmetric(a in arb_manifest("a"), b in arb_manifest("b")) {
            let ab: HashSet<String> = check_disjoint(&a, &b).into_iter().collect();
            let ba: HashSet<String> = check_disjoint(&b, &a).into_iter().collect();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn write_then_load_is_identity(a in arb_manifest("a")) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("out.csv");
            a.write(&path).unwrap();
            let back = load_manifest(&path, Split::Train).unwrap();
            prop_assert_eq!(back.records(), a.records());
        }
    }
}
