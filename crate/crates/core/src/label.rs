use std::fmt;

use serde::{Deserialize, Serialize};

/// Binary answer to "is this solder joint defective?". Positive is `Defective`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonDefective,
    Defective,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NonDefective, Label::Defective];

    /// 0 for non-defective, 1 for defective; also the row/column index used by trust matrices.
    pub fn index(self) -> usize {
        match self {
            Label::NonDefective => 0,
            Label::Defective => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::NonDefective),
            1 => Some(Label::Defective),
            _ => None,
        }
    }

    pub fn is_defective(self) -> bool {
        self == Label::Defective
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::NonDefective => "non_defective",
            Label::Defective => "defective",
        })
    }
}
