//! Domain types shared across the crate: dermoscopic patterns, 7-bit pattern
//! vectors and validated multi-rater annotation datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The seven dermoscopic BCC patterns, in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pattern {
    PigmentNetwork,
    Ulceration,
    OvoidNests,
    Multiglobules,
    MapleLeafLike,
    SpokeWheel,
    ArborizingTelangiectasia,
}

impl Pattern {
    pub const COUNT: usize = 7;

    pub const ALL: [Pattern; 7] = [
        Pattern::PigmentNetwork,
        Pattern::Ulceration,
        Pattern::OvoidNests,
        Pattern::Multiglobules,
        Pattern::MapleLeafLike,
        Pattern::SpokeWheel,
        Pattern::ArborizingTelangiectasia,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Pattern> {
        Self::ALL.get(index).copied()
    }

    /// Short code used as CSV column header (`pn`, `u`, `on`, ...).
    pub fn code(self) -> &'static str {
        match self {
            Pattern::PigmentNetwork => "pn",
            Pattern::Ulceration => "u",
            Pattern::OvoidNests => "on",
            Pattern::Multiglobules => "mg",
            Pattern::MapleLeafLike => "ml",
            Pattern::SpokeWheel => "sw",
            Pattern::ArborizingTelangiectasia => "at",
        }
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            Pattern::PigmentNetwork => "PN",
            Pattern::Ulceration => "U",
            Pattern::OvoidNests => "ON",
            Pattern::Multiglobules => "MG",
            Pattern::MapleLeafLike => "ML",
            Pattern::SpokeWheel => "SW",
            Pattern::ArborizingTelangiectasia => "AT",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Pattern::PigmentNetwork => "Pigment Network",
            Pattern::Ulceration => "Ulceration",
            Pattern::OvoidNests => "Ovoid Nests",
            Pattern::Multiglobules => "Multiglobules",
            Pattern::MapleLeafLike => "Maple Leaf-like",
            Pattern::SpokeWheel => "Spoke Wheel",
            Pattern::ArborizingTelangiectasia => "Arborizing Telangiectasia",
        }
    }

    /// Pigment network is the only negative criterion.
    pub fn is_negative_criterion(self) -> bool {
        self == Pattern::PigmentNetwork
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbreviation())
    }
}

/// Presence vector over [`Pattern::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct PatternVector([bool; 7]);

impl PatternVector {
    pub const EMPTY: PatternVector = PatternVector([false; 7]);

    pub fn new(bits: [bool; 7]) -> Self {
        PatternVector(bits)
    }

    /// Builds a vector from the low 7 bits of `mask`; bit `i` is pattern `i`.
    pub fn from_mask(mask: u8) -> Self {
        let mut bits = [false; 7];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = mask & (1 << i) != 0;
        }
        PatternVector(bits)
    }

    pub fn to_mask(self) -> u8 {
        self.0
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &b)| if b { acc | (1 << i) } else { acc })
    }

    /// Parses a sequence of `0`/`1` tokens.
    pub fn from_digits<S: AsRef<str>>(digits: &[S]) -> Result<Self, VectorError> {
        if digits.len() != Pattern::COUNT {
            return Err(VectorError::BadLength(digits.len()));
        }
        let mut bits = [false; 7];
        for (bit, token) in bits.iter_mut().zip(digits) {
            *bit = match token.as_ref().trim() {
                "0" => false,
                "1" => true,
                other => return Err(VectorError::NonBinary(other.to_string())),
            };
        }
        Ok(PatternVector(bits))
    }

    pub fn bits(&self) -> &[bool; 7] {
        &self.0
    }

    pub fn get(&self, pattern: Pattern) -> bool {
        self.0[pattern.index()]
    }

    pub fn set(&mut self, pattern: Pattern, present: bool) {
        self.0[pattern.index()] = present;
    }

    pub fn with(mut self, pattern: Pattern, present: bool) -> Self {
        self.set(pattern, present);
        self
    }

    pub fn present(&self) -> impl Iterator<Item = Pattern> + '_ {
        Pattern::ALL.into_iter().filter(|p| self.get(*p))
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn digits(&self) -> [u8; 7] {
        self.0.map(u8::from)
    }
}

impl fmt::Display for PatternVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.digits().iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Accepts `"0101101"`, `"0 1 0 1 1 0 1"`, `"[0 1 0 1 1 0 1]"` or comma separated digits.
impl FromStr for PatternVector {
    type Err = VectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        let tokens: Vec<String> = if inner.contains(|c: char| c == ' ' || c == ',') {
            inner
                .split(|c: char| c == ' ' || c == ',')
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect()
        } else {
            inner.chars().map(|c| c.to_string()).collect()
        };
        Self::from_digits(&tokens)
    }
}

impl Serialize for PatternVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.digits().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PatternVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let digits = Vec::<u8>::deserialize(deserializer)?;
        let tokens: Vec<String> = digits.iter().map(u8::to_string).collect();
        PatternVector::from_digits(&tokens).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VectorError {
    #[error("expected 7 label digits, found {0}")]
    BadLength(usize),
    #[error("label digit must be 0 or 1, found {0:?}")]
    NonBinary(String),
}

/// Clinical explanation group of a pattern vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiagnosisGroup {
    NoPattern,
    PigmentNetworkOnly,
    BccPattern,
}

impl DiagnosisGroup {
    pub const ALL: [DiagnosisGroup; 3] = [
        DiagnosisGroup::NoPattern,
        DiagnosisGroup::PigmentNetworkOnly,
        DiagnosisGroup::BccPattern,
    ];

    /// Row label used in metric tables.
    pub fn row_label(self) -> &'static str {
        match self {
            DiagnosisGroup::NoPattern => "All 0's",
            DiagnosisGroup::PigmentNetworkOnly => "Pigment Network",
            DiagnosisGroup::BccPattern => "BCC pattern detection",
        }
    }
}

/// One rater's labels for one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub rater_id: String,
    pub labels: PatternVector,
}

/// Unvalidated ingestion row; `row` is the 1-based data row number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub row: usize,
    pub image_id: String,
    pub rater_id: String,
    pub digits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("duplicate annotation for image {image:?} by rater {rater:?}")]
    DuplicateAnnotation { image: String, rater: String },
    #[error("row {row}: expected 7 label digits, found {found}")]
    BadVectorLength { row: usize, found: usize },
    #[error("row {row}: label digit must be 0 or 1, found {value:?}")]
    NonBinaryValue { row: usize, value: String },
    #[error("row {row}: empty identifier")]
    EmptyIdentifier { row: usize },
}

/// Validated multi-rater annotation set. Sparse: not every rater has to label
/// every image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationDataset {
    records: Vec<AnnotationRecord>,
    images: BTreeSet<String>,
    raters: BTreeSet<String>,
}

impl AnnotationDataset {
    pub fn from_records(records: Vec<AnnotationRecord>) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        let mut images = BTreeSet::new();
        let mut raters = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.image_id.is_empty() || r.rater_id.is_empty() {
                return Err(DatasetError::EmptyIdentifier { row: i + 1 });
            }
            if !seen.insert((r.image_id.as_str(), r.rater_id.as_str())) {
                return Err(DatasetError::DuplicateAnnotation {
                    image: r.image_id.clone(),
                    rater: r.rater_id.clone(),
                });
            }
            images.insert(r.image_id.clone());
            raters.insert(r.rater_id.clone());
        }
        Ok(AnnotationDataset {
            records,
            images,
            raters,
        })
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn images(&self) -> &BTreeSet<String> {
        &self.images
    }

    pub fn raters(&self) -> &BTreeSet<String> {
        &self.raters
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labels grouped by image, then rater, both in sorted id order.
    pub fn by_image(&self) -> BTreeMap<&str, BTreeMap<&str, PatternVector>> {
        let mut out: BTreeMap<&str, BTreeMap<&str, PatternVector>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.image_id.as_str())
                .or_default()
                .insert(r.rater_id.as_str(), r.labels);
        }
        out
    }
}

/// Validates parsed rows into an [`AnnotationDataset`].
pub fn validate_dataset(raw: Vec<RawRecord>) -> Result<AnnotationDataset, DatasetError> {
    let mut records = Vec::with_capacity(raw.len());
    for r in raw {
        let labels = PatternVector::from_digits(&r.digits).map_err(|e| match e {
            VectorError::BadLength(found) => DatasetError::BadVectorLength { row: r.row, found },
            VectorError::NonBinary(value) => DatasetError::NonBinaryValue { row: r.row, value },
        })?;
        if r.image_id.trim().is_empty() || r.rater_id.trim().is_empty() {
            return Err(DatasetError::EmptyIdentifier { row: r.row });
        }
        records.push(AnnotationRecord {
            image_id: r.image_id,
            rater_id: r.rater_id,
            labels,
        });
    }
    AnnotationDataset::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(row: usize, image: &str, rater: &str, digits: &str) -> RawRecord {
        RawRecord {
            row,
            image_id: image.into(),
            rater_id: rater.into(),
            digits: digits.chars().map(|c| c.to_string()).collect(),
        }
    }

    #[test]
    fn validates_well_formed_rows() {
        let ds = validate_dataset(vec![
            raw(1, "img1", "r1", "0101101"),
            raw(2, "img1", "r2", "1000000"),
            raw(3, "img2", "r1", "0000000"),
        ])
        .unwrap();
        assert_eq!(ds.records().len(), 3);
        assert_eq!(ds.images().len(), 2);
        assert_eq!(ds.raters().len(), 2);
    }

    #[test]
    fn rejects_duplicate_pair() {
        let err = validate_dataset(vec![
            raw(1, "img1", "r1", "0101101"),
            raw(2, "img1", "r1", "0000000"),
        ])
        .unwrap_err();
        assert_eq!(
            err,
            DatasetError::DuplicateAnnotation {
                image: "img1".into(),
                rater: "r1".into()
            }
        );
    }

    #[test]
    fn rejects_short_vector() {
        let err = validate_dataset(vec![raw(4, "img1", "r1", "010110")]).unwrap_err();
        assert_eq!(err, DatasetError::BadVectorLength { row: 4, found: 6 });
    }

    #[test]
    fn rejects_non_binary_digit() {
        let err = validate_dataset(vec![raw(2, "img1", "r1", "0102101")]).unwrap_err();
        assert_eq!(
            err,
            DatasetError::NonBinaryValue {
                row: 2,
                value: "2".into()
            }
        );
    }

    #[test]
    fn pattern_order_is_fixed() {
        assert_eq!(Pattern::ALL[0], Pattern::PigmentNetwork);
        for (i, p) in Pattern::ALL.iter().enumerate() {
            assert_eq!(p.index(), i);
            assert_eq!(Pattern::from_index(i), Some(*p));
        }
        let negatives: Vec<_> = Pattern::ALL
            .iter()
            .filter(|p| p.is_negative_criterion())
            .collect();
        assert_eq!(negatives, vec![&Pattern::PigmentNetwork]);
    }

    #[test]
    fn parses_textual_forms() {
        let expected = PatternVector::from_mask(0b1011010);
        for s in ["0101101", "0 1 0 1 1 0 1", "[0 1 0 1 1 0 1]", "0,1,0,1,1,0,1"] {
            assert_eq!(s.parse::<PatternVector>().unwrap(), expected, "{s}");
        }
        assert_eq!(expected.to_string(), "[0 1 0 1 1 0 1]");
    }

    #[test]
    fn mask_round_trip_all_vectors() {
        for m in 0u8..128 {
            let v = PatternVector::from_mask(m);
            assert_eq!(v.to_mask(), m);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<PatternVector>(&json).unwrap(), v);
            assert_eq!(v.to_string().parse::<PatternVector>().unwrap(), v);
        }
    }
}
