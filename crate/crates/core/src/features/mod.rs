//! Per-second embeddings behind a provider abstraction, Welch band powers, and
//! spatial/temporal pooling down to a flat feature vector.

mod emb1;
mod provider;
mod psd;
mod rpc;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use emb1::{read_emb1, write_emb1};
pub use provider::{EmbeddingProvider, PrecomputedProvider, ToySpectralProvider, TOY_BINS};
pub use psd::{band_powers, psd_features, Band, BANDS};
pub use rpc::{serve_embrpc, Endpoint, ExternalProvider, DEFAULT_TIMEOUT, PROTO};

use crate::data::{Montage, RegionId, TrialKey};
use crate::preprocess::{Provenance, WindowTensor, N_WINDOWS, WINDOW_SAMPLES};

/// Embedding width shared by both foundation encoders.
pub const EMBED_DIM: usize = 200;
/// Samples in one encoder input second at 200 Hz.
pub const SECOND_SAMPLES: usize = 200;
/// Disjoint one-second slices per 16-second window.
pub const SLICES_PER_WINDOW: usize = WINDOW_SAMPLES / SECOND_SAMPLES;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("provider failed at window {window}{}: {reason}", channel.map(|c| format!(", channel {c}")).unwrap_or_default())]
    ProviderFailure {
        window: usize,
        channel: Option<usize>,
        reason: String,
    },
    #[error("no stored embedding for trial {0}")]
    MissingEmbedding(TrialKey),
    #[error("{file}: malformed at offset {offset}: {reason}")]
    Format {
        file: String,
        offset: u64,
        reason: String,
    },
    #[error("cannot reach embedding server {0}")]
    Connect(String),
    #[error("embedding server did not answer within {0:?}")]
    Timeout(std::time::Duration),
    #[error("embedding protocol violation: {0}")]
    Protocol(String),
    #[error("provider {0} only serves stored trial embeddings")]
    Unsupported(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("montage has no electrode in region {0}")]
    EmptyRegion(RegionId),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `[N_T × N_E × N_d]` trial embedding, stored at f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Array3<f32>,
    pub provider: String,
    pub provenance: Provenance,
}

impl FeatureTensor {
    pub fn n_channels(&self) -> usize {
        self.data.dim().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    GroupAvg,
    Intersection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    Global,
    Mean,
    MeanStd,
}

impl SpatialMode {
    pub const ALL: [SpatialMode; 2] = [SpatialMode::GroupAvg, SpatialMode::Intersection];
}

impl TemporalMode {
    pub const ALL: [TemporalMode; 3] = [TemporalMode::Global, TemporalMode::Mean, TemporalMode::MeanStd];

    /// Flat feature length for `N_d`-wide embeddings.
    pub fn len(self, dim: usize) -> usize {
        let per_step = RegionId::COUNT * dim;
        match self {
            TemporalMode::Global => N_WINDOWS * per_step,
            TemporalMode::Mean => per_step,
            TemporalMode::MeanStd => 2 * per_step,
        }
    }
}

impl fmt::Display for SpatialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialMode::GroupAvg => "group_avg",
            SpatialMode::Intersection => "intersection",
        })
    }
}

impl fmt::Display for TemporalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemporalMode::Global => "global",
            TemporalMode::Mean => "mean",
            TemporalMode::MeanStd => "mean_std",
        })
    }
}

impl FromStr for SpatialMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "group_avg" | "groupavg" | "group" => Ok(SpatialMode::GroupAvg),
            "intersection" => Ok(SpatialMode::Intersection),
            _ => Err(format!("unknown spatial pooling '{s}' (group_avg, intersection)")),
        }
    }
}

impl FromStr for TemporalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "global" => Ok(TemporalMode::Global),
            "mean" => Ok(TemporalMode::Mean),
            "mean_std" | "meanstd" => Ok(TemporalMode::MeanStd),
            _ => Err(format!("unknown temporal pooling '{s}' (global, mean, mean_std)")),
        }
    }
}

/// `[N_T × 9 × N_d]` region features.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledTensor {
    pub data: Array3<f64>,
    pub spatial_mode: SpatialMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub data: Vec<f64>,
    pub temporal_mode: TemporalMode,
}

/// Candidate representatives per region for intersection pooling, in priority order.
pub const INTERSECTION_SITES: [(RegionId, &[&str]); 9] = [
    (RegionId::Prefrontal, &["Fpz"]),
    (RegionId::Frontal, &["Fz"]),
    (RegionId::FrontoCentral, &["FCz", "FC1"]),
    (RegionId::Central, &["Cz"]),
    (RegionId::Temporal, &["T7"]),
    (RegionId::CentroParietal, &["CPz", "CP1"]),
    (RegionId::Parietal, &["Pz"]),
    (RegionId::ParietoOccipital, &["POz", "PO3"]),
    (RegionId::Occipital, &["Oz"]),
];

/// Mean embedding of each channel of one `[N_E × 3200]` window over its 16 seconds.
pub fn embed_window(
    provider: &dyn EmbeddingProvider,
    window: ArrayView2<f64>,
) -> Result<Array2<f64>, FeatureError> {
    let rows: Vec<Vec<f64>> = window.rows().into_iter().map(|r| r.to_vec()).collect();
    let groups: Vec<Vec<&[f64]>> = rows
        .iter()
        .map(|r| r.chunks_exact(SECOND_SAMPLES).collect())
        .collect();
    let out = provider.embed_groups(&groups)?;
    let dim = provider.dim();
    let mut h = Array2::zeros((rows.len(), dim));
    for (e, v) in out.into_iter().enumerate() {
        if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
            return Err(FeatureError::Protocol(format!(
                "channel {e}: embedding of length {} or non-finite",
                v.len()
            )));
        }
        h.row_mut(e).assign(&ndarray::Array1::from(v));
    }
    Ok(h)
}

/// Embeds every window of a trial; stored embeddings are returned as-is.
pub fn embed_trial(provider: &dyn EmbeddingProvider, w: &WindowTensor) -> Result<FeatureTensor, FeatureError> {
    let n_e = w.n_channels();
    let expected = (N_WINDOWS, n_e, EMBED_DIM);
    if provider.dim() != EMBED_DIM {
        return Err(FeatureError::Shape {
            expected: format!("dim {EMBED_DIM}"),
            got: format!("dim {}", provider.dim()),
        });
    }
    if let Some(stored) = provider.stored(&w.provenance.key) {
        let data = stored?;
        if data.dim() != expected {
            return Err(FeatureError::Shape {
                expected: format!("{expected:?}"),
                got: format!("{:?}", data.dim()),
            });
        }
        return Ok(FeatureTensor {
            data,
            provider: provider.id().to_string(),
            provenance: w.provenance.clone(),
        });
    }
    let per_window: Vec<Result<Array2<f64>, FeatureError>> = (0..N_WINDOWS)
        .into_par_iter()
        .map(|t| {
            embed_window(provider, w.data.index_axis(Axis(0), t)).map_err(|e| match e {
                FeatureError::ProviderFailure { channel, reason, .. } => FeatureError::ProviderFailure {
                    window: t,
                    channel,
                    reason,
                },
                other => FeatureError::ProviderFailure {
                    window: t,
                    channel: None,
                    reason: other.to_string(),
                },
            })
        })
        .collect();
    let mut data = Array3::zeros(expected);
    for (t, h) in per_window.into_iter().enumerate() {
        data.slice_mut(s![t, .., ..]).assign(&h?.mapv(|v| v as f32));
    }
    Ok(FeatureTensor {
        data,
        provider: provider.id().to_string(),
        provenance: w.provenance.clone(),
    })
}

/// Channel indices used per region, in region order, for the given mode.
pub fn spatial_selection(montage: &Montage, mode: SpatialMode) -> Result<Vec<Vec<usize>>, FeatureError> {
    RegionId::ALL
        .iter()
        .map(|&r| {
            let members = montage.region_members(r);
            if members.is_empty() {
                return Err(FeatureError::EmptyRegion(r));
            }
            Ok(match mode {
                SpatialMode::GroupAvg => members.to_vec(),
                SpatialMode::Intersection => {
                    let sites = INTERSECTION_SITES[r.index()].1;
                    let pick = sites
                        .iter()
                        .find_map(|s| montage.index_of(s))
                        .unwrap_or(members[0]);
                    vec![pick]
                }
            })
        })
        .collect()
}

/// Averages (or selects) electrode features into the nine regions.
pub fn pool_spatial(h: &FeatureTensor, montage: &Montage, mode: SpatialMode) -> Result<PooledTensor, FeatureError> {
    let (n_t, n_e, dim) = h.data.dim();
    if montage.n_channels() != n_e {
        return Err(FeatureError::Shape {
            expected: format!("{} channels ({})", montage.n_channels(), montage.name),
            got: format!("{n_e} channels"),
        });
    }
    let selection = spatial_selection(montage, mode)?;
    let mut data = Array3::zeros((n_t, RegionId::COUNT, dim));
    for t in 0..n_t {
        for (r, chans) in selection.iter().enumerate() {
            let mut acc = vec![0.0f64; dim];
            for &c in chans {
                for (a, &v) in acc.iter_mut().zip(h.data.slice(s![t, c, ..])) {
                    *a += v as f64;
                }
            }
            let k = chans.len() as f64;
            for (d, a) in acc.into_iter().enumerate() {
                data[[t, r, d]] = a / k;
            }
        }
    }
    Ok(PooledTensor { data, spatial_mode: mode })
}

/// Collapses the window axis: flatten in (t, region, d) order, mean, or mean then population std.
pub fn pool_temporal(p: &PooledTensor, mode: TemporalMode) -> FeatureVector {
    let (n_t, n_r, dim) = p.data.dim();
    let data = match mode {
        TemporalMode::Global => p.data.iter().copied().collect(),
        TemporalMode::Mean | TemporalMode::MeanStd => {
            // Moments of the offsets from window 0, so constant series come out exact.
            let first: Vec<f64> = p.data.slice(s![0, .., ..]).iter().copied().collect();
            let mut shift = vec![0.0; n_r * dim];
            let mut sq = vec![0.0; n_r * dim];
            for t in 0..n_t {
                for (((a, q), &v), f) in shift.iter_mut().zip(sq.iter_mut()).zip(p.data.slice(s![t, .., ..]).iter()).zip(&first) {
                    *a += v - f;
                    *q += (v - f) * (v - f);
                }
            }
            let n = n_t as f64;
            let mut out: Vec<f64> = first.iter().zip(&shift).map(|(f, a)| f + a / n).collect();
            if mode == TemporalMode::MeanStd {
                out.extend(shift.iter().zip(&sq).map(|(a, q)| (q / n - (a / n) * (a / n)).max(0.0).sqrt()));
            }
            out
        }
    };
    FeatureVector { data, temporal_mode: mode }
}

/// Spatial then temporal pooling of a trial embedding.
pub fn pool(
    h: &FeatureTensor,
    montage: &Montage,
    spatial: SpatialMode,
    temporal: TemporalMode,
) -> Result<FeatureVector, FeatureError> {
    Ok(pool_temporal(&pool_spatial(h, montage, spatial)?, temporal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cohort, TrialKey};
    use proptest::prelude::*;

    fn provenance() -> Provenance {
        Provenance {
            key: TrialKey::new("P01", 1, 0),
            cohort: Cohort::A,
            cropped: false,
            padded: false,
        }
    }

    fn windows(n_e: usize, f: impl Fn(usize, usize, usize) -> f64) -> WindowTensor {
        let data = Array3::from_shape_fn((N_WINDOWS, n_e, WINDOW_SAMPLES), |(t, e, i)| f(t, e, i));
        WindowTensor::new(data, provenance()).unwrap()
    }

    struct Constant(Vec<f64>);

    impl EmbeddingProvider for Constant {
        fn id(&self) -> &str {
            "constant"
        }
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn embed_second(&self, _x: &[f64]) -> Result<Vec<f64>, FeatureError> {
            Ok(self.0.clone())
        }
    }

    fn tensor(n_e: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureTensor {
        FeatureTensor {
            data: Array3::from_shape_fn((N_WINDOWS, n_e, EMBED_DIM), |(t, e, d)| f(t, e, d)),
            provider: "test".into(),
            provenance: provenance(),
        }
    }

    #[test]
    fn constant_provider_gives_constant_features() {
        let c: Vec<f64> = (0..EMBED_DIM).map(|d| d as f64 * 0.25 - 3.0).collect();
        let h = embed_trial(&Constant(c.clone()), &windows(4, |t, e, i| (t + e + i) as f64)).unwrap();
        assert_eq!(h.data.dim(), (10, 4, 200));
        for t in 0..N_WINDOWS {
            for e in 0..4 {
                for d in 0..EMBED_DIM {
                    assert_eq!(h.data[[t, e, d]], c[d] as f32);
                }
            }
        }
    }

    #[test]
    fn wrong_dim_is_rejected() {
        let err = embed_trial(&Constant(vec![0.0; 128]), &windows(2, |_, _, _| 0.0)).unwrap_err();
        assert!(matches!(err, FeatureError::Shape { .. }));
    }

    #[test]
    fn shape_chain_for_shipped_layouts() {
        let provider = ToySpectralProvider::new(5);
        for n_e in [26, 28, 32] {
            let montage = Montage::for_channel_count(n_e).unwrap();
            let w = windows(n_e, |t, e, i| ((i as f64) * 0.05 * (e + 1) as f64 + t as f64).sin());
            let h = embed_trial(&provider, &w).unwrap();
            assert_eq!(h.data.dim(), (10, n_e, 200));
            assert_eq!(h.data.len(), 2000 * n_e);
            for spatial in SpatialMode::ALL {
                let p = pool_spatial(&h, &montage, spatial).unwrap();
                assert_eq!(p.data.dim(), (10, 9, 200));
                for temporal in TemporalMode::ALL {
                    let v = pool_temporal(&p, temporal);
                    assert_eq!(v.data.len(), temporal.len(EMBED_DIM));
                }
            }
        }
        assert_eq!(TemporalMode::Global.len(200), 18_000);
        assert_eq!(TemporalMode::Mean.len(200), 1_800);
        assert_eq!(TemporalMode::MeanStd.len(200), 3_600);
    }

    #[test]
    fn identical_electrodes_pool_to_same_feature() {
        let montage = Montage::shipped("cap32").unwrap();
        let h = tensor(32, |t, _, d| (t * 1000 + d) as f32 * 0.01);
        let p = pool_spatial(&h, &montage, SpatialMode::GroupAvg).unwrap();
        for t in 0..N_WINDOWS {
            for r in 0..9 {
                for d in 0..EMBED_DIM {
                    assert_eq!(p.data[[t, r, d]], h.data[[t, 0, d]] as f64);
                }
            }
        }
    }

    #[test]
    fn intersection_representatives() {
        let cap32 = Montage::shipped("cap32").unwrap();
        let sel = spatial_selection(&cap32, SpatialMode::Intersection).unwrap();
        let names: Vec<&str> = sel.iter().map(|c| cap32.electrodes[c[0]].name.as_str()).collect();
        assert_eq!(names, ["Fpz", "Fz", "FC1", "Cz", "T7", "CP1", "Pz", "POz", "Oz"]);
        for n in [26, 28] {
            let m = Montage::for_channel_count(n).unwrap();
            assert_eq!(spatial_selection(&m, SpatialMode::Intersection).unwrap().len(), 9);
        }
    }

    #[test]
    fn singleton_region_modes_agree() {
        let montage = Montage::from_labels("mini", &["Fpz", "Fz", "FC1", "Cz", "T7", "CP1", "Pz", "POz", "Oz", "F3"]).unwrap();
        let h = tensor(10, |t, e, d| (t + 3 * e) as f32 + d as f32 * 1e-3);
        let a = pool_spatial(&h, &montage, SpatialMode::GroupAvg).unwrap();
        let b = pool_spatial(&h, &montage, SpatialMode::Intersection).unwrap();
        for r in RegionId::ALL {
            if montage.region_members(r).len() == 1 {
                assert_eq!(a.data.slice(s![.., r.index(), ..]), b.data.slice(s![.., r.index(), ..]));
            }
        }
        assert_ne!(a.data.slice(s![.., RegionId::Frontal.index(), ..]), b.data.slice(s![.., RegionId::Frontal.index(), ..]));
    }

    #[test]
    fn channel_count_must_match_montage() {
        let montage = Montage::shipped("cap28").unwrap();
        let err = pool_spatial(&tensor(32, |_, _, _| 0.0), &montage, SpatialMode::GroupAvg).unwrap_err();
        assert!(matches!(err, FeatureError::Shape { .. }));
    }

    #[test]
    fn temporal_pooling_arithmetic() {
        let mut data = Array3::from_elem((N_WINDOWS, 9, EMBED_DIM), 0.5);
        for t in 0..N_WINDOWS {
            data[[t, 4, 7]] = if t % 2 == 0 { 1.0 } else { 3.0 };
        }
        let p = PooledTensor { data, spatial_mode: SpatialMode::GroupAvg };
        let mean = pool_temporal(&p, TemporalMode::Mean).data;
        let ms = pool_temporal(&p, TemporalMode::MeanStd).data;
        let at = 4 * EMBED_DIM + 7;
        assert_eq!(mean[at], 2.0);
        assert_eq!(ms[at], 2.0);
        assert_eq!(ms[1800 + at], 1.0);
        assert_eq!(mean[0], 0.5);
        assert_eq!(ms[1800], 0.0);
        let g = pool_temporal(&p, TemporalMode::Global).data;
        assert_eq!(g[3 * 1800 + at], 3.0);
    }

    #[test]
    fn time_constant_input_has_zero_std() {
        let p = PooledTensor {
            data: Array3::from_shape_fn((N_WINDOWS, 9, EMBED_DIM), |(_, r, d)| (r * 7 + d) as f64 * 0.1),
            spatial_mode: SpatialMode::GroupAvg,
        };
        let mean = pool_temporal(&p, TemporalMode::Mean).data;
        for (m, v) in mean.iter().zip(p.data.slice(s![3, .., ..]).iter()) {
            assert!((m - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
        let ms = pool_temporal(&p, TemporalMode::MeanStd).data;
        assert!(ms[1800..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_names_parse() {
        for m in SpatialMode::ALL {
            assert_eq!(m.to_string().parse::<SpatialMode>().unwrap(), m);
        }
        for m in TemporalMode::ALL {
            assert_eq!(m.to_string().parse::<TemporalMode>().unwrap(), m);
        }
        assert!("median".parse::<TemporalMode>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn group_avg_ignores_order_within_region(seed in 0u64..1000, swap in 0usize..9) {
            let montage = Montage::shipped("cap32").unwrap();
            let h = tensor(32, |t, e, d| (((t * 131 + e * 17 + d) as u64 ^ seed) % 97) as f32 * 0.37);
            let region = RegionId::from_index(swap).unwrap();
            let members = montage.region_members(region);
            prop_assume!(members.len() >= 2);
            let (a, b) = (members[0], members[members.len() - 1]);
            // Swap the electrode labels and the data columns together.
            let mut electrodes = montage.electrodes.clone();
            electrodes.swap(a, b);
            let permuted = Montage::new("perm", electrodes).unwrap();
            let mut h2 = h.clone();
            for t in 0..N_WINDOWS {
                for d in 0..EMBED_DIM {
                    h2.data.swap([t, a, d], [t, b, d]);
                }
            }
            let p1 = pool_spatial(&h, &montage, SpatialMode::GroupAvg).unwrap();
            let p2 = pool_spatial(&h2, &permuted, SpatialMode::GroupAvg).unwrap();
            prop_assert_eq!(p1.data, p2.data);
        }

        #[test]
        fn mean_std_halves_are_consistent(vals in proptest::collection::vec(-5.0f64..5.0, N_WINDOWS)) {
            let mut data = Array3::zeros((N_WINDOWS, 9, EMBED_DIM));
            for (t, v) in vals.iter().enumerate() {
                data[[t, 0, 0]] = *v;
            }
            let p = PooledTensor { data, spatial_mode: SpatialMode::GroupAvg };
            let ms = pool_temporal(&p, TemporalMode::MeanStd).data;
            let m = vals.iter().sum::<f64>() / 10.0;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 10.0).sqrt();
            prop_assert!((ms[0] - m).abs() < 1e-12);
            prop_assert!((ms[1800] - sd).abs() < 1e-12);
            prop_assert!(ms[1800] >= 0.0);
        }
    }
}
