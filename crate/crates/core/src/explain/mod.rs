//! Owen-value attribution of a frozen pipeline's output to electrodes, with
//! regions as the coalition structure, plus relevance aggregation and
//! topomap export.

mod game;
mod owen;
mod relevance;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use dashmap::DashMap;
use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

pub use game::ChannelGame;
pub use owen::{owen_exact, owen_sampled, shapley_bruteforce, MAX_BLOCKS, MAX_BLOCK_SIZE, MAX_PLAYERS};
pub use relevance::{
    aggregate_relevance, read_relevance_json, render_topomap, write_relevance_csv, ElectrodeRelevance, GroupBy,
    RelevanceMap,
};

use crate::data::{Montage, RegionId};
use crate::estimators::EstimatorError;
use crate::features::FeatureError;
use crate::preprocess::WindowTensor;

/// A set of players (electrode indices) as a bitmask.
pub type Coalition = u64;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("channel index {index} out of range for {channels} channels")]
    BadChannelIndex { index: usize, channels: usize },
    #[error("evaluation budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("no attributions for group {0}")]
    EmptyGroup(String),
    #[error("invalid partition: {0}")]
    InvalidTree(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("pipeline returned non-finite output for coalition {0:#x}")]
    NonFinite(Coalition),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

/// What a switched-off electrode is replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Zero,
    ChannelMean,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Zero => "zero",
            Baseline::ChannelMean => "channel_mean",
        })
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Baseline::Zero),
            "channel_mean" | "mean" => Ok(Baseline::ChannelMean),
            other => Err(format!("unknown baseline '{other}' (expected zero or channel_mean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSpec {
    pub off_set: BTreeSet<usize>,
    pub baseline: Baseline,
}

impl MaskSpec {
    pub fn new(off: impl IntoIterator<Item = usize>, baseline: Baseline) -> Self {
        Self {
            off_set: off.into_iter().collect(),
            baseline,
        }
    }
}

/// Replaces the switched-off channels of every window by the baseline.
pub fn mask_apply(w: &WindowTensor, spec: &MaskSpec) -> Result<WindowTensor, ExplainError> {
    let channels = w.n_channels();
    if let Some(&index) = spec.off_set.iter().find(|&&c| c >= channels) {
        return Err(ExplainError::BadChannelIndex { index, channels });
    }
    let mut out = w.clone();
    for &c in &spec.off_set {
        for t in 0..out.data.len_of(Axis(0)) {
            let mut row = out.data.slice_mut(s![t, c, ..]);
            let fill = match spec.baseline {
                Baseline::Zero => 0.0,
                Baseline::ChannelMean => row.mean().unwrap_or(0.0),
            };
            row.fill(fill);
        }
    }
    Ok(out)
}

type Eval<'a> = Box<dyn Fn(Coalition) -> Result<f64, ExplainError> + Send + Sync + 'a>;

/// A memoized characteristic function `v(S)` over `n` players.
///
/// Each coalition is evaluated at most once, also under concurrent queries.
pub struct ValueFunction<'a> {
    n: usize,
    f: Eval<'a>,
    memo: DashMap<Coalition, f64>,
    evaluations: AtomicUsize,
}

impl<'a> ValueFunction<'a> {
    pub fn new(n: usize, f: impl Fn(Coalition) -> Result<f64, ExplainError> + Send + Sync + 'a) -> Self {
        assert!(n <= 64, "at most 64 players");
        Self {
            n,
            f: Box::new(f),
            memo: DashMap::new(),
            evaluations: AtomicUsize::new(0),
        }
    }

    /// `v(S) = pipeline(mask_apply(w, complement(S)))`, evaluated literally.
    pub fn masked(
        w: &'a WindowTensor,
        baseline: Baseline,
        pipeline: impl Fn(&WindowTensor) -> Result<f64, ExplainError> + Send + Sync + 'a,
    ) -> Result<Self, ExplainError> {
        let n = w.n_channels();
        if n > MAX_PLAYERS {
            return Err(ExplainError::BudgetExceeded(format!("{n} channels, at most {MAX_PLAYERS}")));
        }
        Ok(Self::new(n, move |s| {
            let off = (0..n).filter(|&c| s & (1 << c) == 0);
            pipeline(&mask_apply(w, &MaskSpec::new(off, baseline))?)
        }))
    }

    pub fn n_players(&self) -> usize {
        self.n
    }

    pub fn all(&self) -> Coalition {
        if self.n == 64 {
            u64::MAX
        } else {
            (1u64 << self.n) - 1
        }
    }

    pub fn value(&self, s: Coalition) -> Result<f64, ExplainError> {
        if let Some(v) = self.memo.get(&s) {
            return Ok(*v);
        }
        let v = *self.memo.entry(s).or_try_insert_with(|| {
            self.evaluations.fetch_add(1, Ordering::Relaxed);
            let v = (self.f)(s)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ExplainError::NonFinite(s))
            }
        })?;
        Ok(v)
    }

    /// Distinct coalitions evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

/// One coalition block (a region) and its leaf players.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub label: String,
    pub members: Vec<usize>,
}

/// Two-level hierarchy: root → blocks → leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionTree {
    blocks: Vec<Block>,
    n_leaves: usize,
}

impl PartitionTree {
    /// Every leaf `0..n_leaves` must appear in exactly one block. Empty blocks are dropped.
    pub fn new(blocks: Vec<Block>, n_leaves: usize) -> Result<Self, ExplainError> {
        let mut seen = vec![false; n_leaves];
        for b in &blocks {
            for &i in &b.members {
                if i >= n_leaves {
                    return Err(ExplainError::InvalidTree(format!("leaf {i} in block {} out of range", b.label)));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(ExplainError::InvalidTree(format!("leaf {i} appears twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(ExplainError::InvalidTree(format!("leaf {i} is in no block")));
        }
        let blocks = blocks.into_iter().filter(|b| !b.members.is_empty()).collect();
        Ok(Self { blocks, n_leaves })
    }

    /// The nine scalp regions with the montage's electrodes as leaves.
    pub fn from_montage(montage: &Montage) -> Self {
        let blocks = RegionId::ALL
            .iter()
            .map(|&r| Block {
                label: r.name().to_string(),
                members: montage.region_members(r).to_vec(),
            })
            .collect();
        Self::new(blocks, montage.n_channels()).expect("montage regions partition the channels")
    }

    pub fn singletons(n: usize) -> Self {
        let blocks = (0..n)
            .map(|i| Block {
                label: i.to_string(),
                members: vec![i],
            })
            .collect();
        Self { blocks, n_leaves: n }
    }

    pub fn one_block(n: usize) -> Self {
        Self::new(
            vec![Block {
                label: "all".into(),
                members: (0..n).collect(),
            }],
            n,
        )
        .expect("valid")
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributionMode {
    Exact,
    Sampled { n_permutations: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Signed Owen value per electrode, in model-output units.
    pub phi: Vec<f64>,
    /// Standard error per electrode (sampled mode only).
    pub std_err: Option<Vec<f64>>,
    pub base_value: f64,
    pub full_value: f64,
    pub mode: AttributionMode,
    pub evaluations: usize,
}
