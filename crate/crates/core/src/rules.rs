//! Clinical decision rules mapping pattern vectors to a BCC diagnosis.
//!
//! No pattern means no BCC, pigment network alone is a negative criterion, and
//! any of the six BCC-positive patterns means BCC. Positive patterns take
//! precedence when pigment network co-occurs with them.

use serde::{Deserialize, Serialize};

use crate::model::{DiagnosisGroup, Pattern, PatternVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "BCC")]
    Bcc,
    #[serde(rename = "NonBCC")]
    NonBcc,
}

impl Diagnosis {
    pub fn is_bcc(self) -> bool {
        self == Diagnosis::Bcc
    }

    pub fn from_bool(bcc: bool) -> Self {
        if bcc {
            Diagnosis::Bcc
        } else {
            Diagnosis::NonBcc
        }
    }
}

fn has_positive_pattern(v: &PatternVector) -> bool {
    v.present().any(|p| !p.is_negative_criterion())
}

pub fn binary_of(v: &PatternVector) -> Diagnosis {
    Diagnosis::from_bool(has_positive_pattern(v))
}

pub fn group_of(v: &PatternVector) -> DiagnosisGroup {
    if has_positive_pattern(v) {
        DiagnosisGroup::BccPattern
    } else if v.get(Pattern::PigmentNetwork) {
        DiagnosisGroup::PigmentNetworkOnly
    } else {
        DiagnosisGroup::NoPattern
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub diagnosis: Diagnosis,
    pub group: DiagnosisGroup,
    pub present_patterns: Vec<Pattern>,
}

pub fn explain(v: &PatternVector) -> Explanation {
    Explanation {
        diagnosis: binary_of(v),
        group: group_of(v),
        present_patterns: v.present().collect(),
    }
}
