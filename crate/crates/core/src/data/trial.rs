use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DataError, Montage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cohort {
    A,
    B,
    C,
    D,
    E,
}

impl Cohort {
    pub const ALL: [Cohort; 5] = [Cohort::A, Cohort::B, Cohort::C, Cohort::D, Cohort::E];
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Cohort {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Cohort::A),
            "B" | "b" => Ok(Cohort::B),
            "C" | "c" => Ok(Cohort::C),
            "D" | "d" => Ok(Cohort::D),
            "E" | "e" => Ok(Cohort::E),
            other => Err(DataError::InvalidConfig(format!("unknown cohort '{other}'"))),
        }
    }
}

/// Identity of one trial: `participant/day/trial_index`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrialKey {
    pub participant: String,
    pub day: u32,
    pub trial_index: u32,
}

impl TrialKey {
    pub fn new(participant: impl Into<String>, day: u32, trial_index: u32) -> Self {
        Self {
            participant: participant.into(),
            day,
            trial_index,
        }
    }
}

impl fmt::Display for TrialKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.participant, self.day, self.trial_index)
    }
}

impl FromStr for TrialKey {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::InvalidConfig(format!("malformed trial key '{s}'"));
        let mut parts = s.rsplitn(3, '/');
        let trial_index = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let day = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let participant = parts.next().filter(|p| !p.is_empty()).ok_or_else(bad)?;
        Ok(Self::new(participant, day, trial_index))
    }
}

/// One recorded run: a channel-by-sample matrix of microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub key: TrialKey,
    pub cohort: Cohort,
    pub fs: f64,
    pub samples: Array2<f64>,
}

impl Trial {
    pub fn new(key: TrialKey, cohort: Cohort, fs: f64, samples: Array2<f64>) -> Result<Self, DataError> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(DataError::Consistency(format!("trial {key}: sampling rate {fs} not positive")));
        }
        if samples.ncols() == 0 || samples.nrows() == 0 {
            return Err(DataError::Consistency(format!("trial {key}: empty sample matrix")));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Consistency(format!(
                "trial {key}: non-finite sample at flat index {pos}"
            )));
        }
        if !(1..=5).contains(&key.day) {
            return Err(DataError::Consistency(format!("trial {key}: day must be 1..=5")));
        }
        Ok(Self {
            key,
            cohort,
            fs,
            samples,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub participant: String,
    pub cohort: Cohort,
    pub day: u32,
    pub trial_index: u32,
    pub score: f64,
}

impl LabelRecord {
    pub fn key(&self) -> TrialKey {
        TrialKey::new(self.participant.clone(), self.day, self.trial_index)
    }
}

/// Per-(participant, day) behavioral metrics, keyed by metric name.
pub type Behavioral = BTreeMap<(String, u32), BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub montage: Montage,
    pub trials: Vec<Trial>,
    pub labels: Vec<LabelRecord>,
    pub behavioral: Option<Behavioral>,
    label_index: HashMap<TrialKey, usize>,
}

impl TrialSet {
    /// Validates the cross references: one label per trial, no orphans, shared montage.
    pub fn new(
        montage: Montage,
        trials: Vec<Trial>,
        labels: Vec<LabelRecord>,
        behavioral: Option<Behavioral>,
    ) -> Result<Self, DataError> {
        let mut label_index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if !l.score.is_finite() {
                return Err(DataError::Consistency(format!("label {} has non-finite score", l.key())));
            }
            if label_index.insert(l.key(), i).is_some() {
                return Err(DataError::Consistency(format!("duplicate label for {}", l.key())));
            }
        }
        let mut trial_keys = BTreeSet::new();
        for t in &trials {
            if t.n_channels() != montage.n_channels() {
                return Err(DataError::Consistency(format!(
                    "trial {} has {} channels but montage {} has {}",
                    t.key,
                    t.n_channels(),
                    montage.name,
                    montage.n_channels()
                )));
            }
            if !trial_keys.insert(t.key.clone()) {
                return Err(DataError::Consistency(format!("duplicate trial {}", t.key)));
            }
            match label_index.get(&t.key) {
                None => {
                    return Err(DataError::Consistency(format!("trial {} has no label", t.key)));
                }
                Some(&i) if labels[i].cohort != t.cohort => {
                    return Err(DataError::Consistency(format!(
                        "trial {} cohort {} disagrees with label cohort {}",
                        t.key, t.cohort, labels[i].cohort
                    )));
                }
                Some(_) => {}
            }
        }
        if let Some(orphan) = labels.iter().find(|l| !trial_keys.contains(&l.key())) {
            return Err(DataError::Consistency(format!(
                "label {} has no matching trial",
                orphan.key()
            )));
        }
        Ok(Self {
            montage,
            trials,
            labels,
            behavioral,
            label_index,
        })
    }

    pub fn label(&self, key: &TrialKey) -> Option<&LabelRecord> {
        self.label_index.get(key).map(|&i| &self.labels[i])
    }

    pub fn score(&self, key: &TrialKey) -> f64 {
        self.label(key).expect("validated trial set").score
    }

    /// Distinct participants in ascending id order.
    pub fn participants(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.trials.iter().map(|t| t.key.participant.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn participants_in(&self, cohorts: &[Cohort]) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .trials
            .iter()
            .filter(|t| cohorts.contains(&t.cohort))
            .map(|t| t.key.participant.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn cohort_of(&self, participant: &str) -> Option<Cohort> {
        self.trials
            .iter()
            .find(|t| t.key.participant == participant)
            .map(|t| t.cohort)
    }

    /// Returns a copy with every score replaced through `f(label_position, old_score)`.
    pub fn with_scores(&self, mut f: impl FnMut(usize, f64) -> f64) -> Result<Self, DataError> {
        let labels = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| LabelRecord {
                score: f(i, l.score),
                ..l.clone()
            })
            .collect();
        Self::new(self.montage.clone(), self.trials.clone(), labels, self.behavioral.clone())
    }
}
