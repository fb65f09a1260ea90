use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// One of the nine anatomical scalp regions electrodes are grouped into.
///
/// The declaration order is the canonical region axis of every pooled tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionId {
    Prefrontal,
    Frontal,
    FrontoCentral,
    Central,
    Temporal,
    CentroParietal,
    Parietal,
    ParietoOccipital,
    Occipital,
}

impl RegionId {
    pub const COUNT: usize = 9;

    pub const ALL: [RegionId; 9] = [
        RegionId::Prefrontal,
        RegionId::Frontal,
        RegionId::FrontoCentral,
        RegionId::Central,
        RegionId::Temporal,
        RegionId::CentroParietal,
        RegionId::Parietal,
        RegionId::ParietoOccipital,
        RegionId::Occipital,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<RegionId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionId::Prefrontal => "prefrontal",
            RegionId::Frontal => "frontal",
            RegionId::FrontoCentral => "fronto-central",
            RegionId::Central => "central",
            RegionId::Temporal => "temporal",
            RegionId::CentroParietal => "centro-parietal",
            RegionId::Parietal => "parietal",
            RegionId::ParietoOccipital => "parieto-occipital",
            RegionId::Occipital => "occipital",
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionId {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        RegionId::ALL
            .iter()
            .copied()
            .find(|r| {
                let n: String = r.name().chars().filter(|c| *c != '-').collect();
                n == norm
            })
            .ok_or_else(|| DataError::InvalidConfig(format!("unknown region '{s}'")))
    }
}

// Site prefixes, matched case-insensitively against the letter part of a label.
const PREFIXES: &[(&str, RegionId)] = &[
    ("fp", RegionId::Prefrontal),
    ("af", RegionId::Prefrontal),
    ("f", RegionId::Frontal),
    ("fc", RegionId::FrontoCentral),
    ("ft", RegionId::FrontoCentral),
    ("c", RegionId::Central),
    ("t", RegionId::Temporal),
    ("tp", RegionId::Temporal),
    ("cp", RegionId::CentroParietal),
    ("p", RegionId::Parietal),
    ("po", RegionId::ParietoOccipital),
    ("o", RegionId::Occipital),
    ("i", RegionId::Occipital),
];

/// Splits a 10–20/10–10 label into its site letters and position suffix.
///
/// The suffix is either a run of digits or a single midline `z`.
pub(crate) fn split_label(name: &str) -> Option<(String, &str)> {
    if name.is_empty() || !name.is_ascii() {
        return None;
    }
    let lower = name.to_ascii_lowercase();
    let (letters, suffix) = if let Some(stripped) = lower.strip_suffix('z') {
        (stripped.to_string(), &name[name.len() - 1..])
    } else {
        let cut = lower
            .find(|c: char| c.is_ascii_digit())
            .unwrap_or(lower.len());
        let (l, d) = name.split_at(cut);
        if d.is_empty() || !d.chars().all(|c| c.is_ascii_digit()) || l.ends_with(['z', 'Z']) {
            return None;
        }
        (l.to_ascii_lowercase(), d)
    };
    if letters.is_empty() || !letters.chars().all(|c| c.is_ascii_alphabetic()) {
        return None;
    }
    Some((letters, suffix))
}

/// Maps an electrode label to its region by the longest matching site prefix.
pub fn assign_region(name: &str) -> Result<RegionId, DataError> {
    let unknown = || DataError::UnknownSite(name.to_string());
    let (letters, _) = split_label(name).ok_or_else(unknown)?;
    PREFIXES
        .iter()
        .filter(|(p, _)| letters.starts_with(p))
        .max_by_key(|(p, _)| p.len())
        .map(|&(_, r)| r)
        .ok_or_else(unknown)
}
