use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Binary proxy sex group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    M,
    F,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::M, Group::F];

    /// Class index used by the sex heads.
    pub fn index(self) -> usize {
        match self {
            Group::M => 0,
            Group::F => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::M => "M",
            Group::F => "F",
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::M => Group::F,
            Group::F => Group::M,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "M" => Ok(Group::M),
            "F" => Ok(Group::F),
            other => Err(format!("unknown group '{other}' (expected M or F)")),
        }
    }
}
