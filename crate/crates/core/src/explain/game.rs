use ndarray::{s, Array2, Array3};

use super::{mask_apply, Baseline, Coalition, ExplainError, MaskSpec, ValueFunction, MAX_PLAYERS};
use crate::data::Montage;
use crate::estimators::Model;
use crate::features::{
    embed_trial, pool_temporal, spatial_selection, EmbeddingProvider, FeatureError, FeatureTensor, PooledTensor,
    SpatialMode, TemporalMode,
};
use crate::preprocess::WindowTensor;

/// Largest region whose pooled blocks are tabulated for every on/off pattern.
const TABLE_LIMIT: usize = 12;

/// The embed → pool → predict pipeline of one trial as a game over electrodes.
///
/// Encoders embed each channel-second independently, so a masked channel's
/// embedding is the embedding of its baseline signal. Both versions are
/// computed once; a coalition then only selects, per electrode, which one
/// enters pooling.
pub struct ChannelGame<'m> {
    model: &'m Model,
    on: FeatureTensor,
    off: FeatureTensor,
    selection: Vec<Vec<usize>>,
    // Per region: pooled [N_T × dim] block for each on/off pattern of its members.
    tables: Vec<Option<Vec<Array2<f64>>>>,
    spatial: SpatialMode,
    temporal: TemporalMode,
    n: usize,
}

impl<'m> ChannelGame<'m> {
    pub fn new(
        provider: &dyn EmbeddingProvider,
        model: &'m Model,
        montage: &Montage,
        spatial: SpatialMode,
        temporal: TemporalMode,
        w: &WindowTensor,
        baseline: Baseline,
    ) -> Result<Self, ExplainError> {
        let n = w.n_channels();
        if n > MAX_PLAYERS {
            return Err(ExplainError::BudgetExceeded(format!("{n} channels, at most {MAX_PLAYERS}")));
        }
        if provider.stored(&w.provenance.key).is_some() {
            return Err(FeatureError::Unsupported(provider.id().to_string()).into());
        }
        let on = embed_trial(provider, w)?;
        let off = embed_trial(provider, &mask_apply(w, &MaskSpec::new(0..n, baseline))?)?;
        let selection = spatial_selection(montage, spatial)?;
        let mut game = Self {
            model,
            on,
            off,
            selection,
            tables: Vec::new(),
            spatial,
            temporal,
            n,
        };
        game.tables = (0..game.selection.len())
            .map(|r| {
                let k = game.selection[r].len();
                (k <= TABLE_LIMIT).then(|| (0..1usize << k).map(|t| game.region_block(r, t)).collect())
            })
            .collect();
        Ok(game)
    }

    pub fn n_players(&self) -> usize {
        self.n
    }

    /// Mean over region `r`'s selected electrodes; bit `j` of `pattern` switches member `j` on.
    fn region_block(&self, r: usize, pattern: usize) -> Array2<f64> {
        let (n_t, _, dim) = self.on.data.dim();
        let chans = &self.selection[r];
        let mut out = Array2::zeros((n_t, dim));
        for t in 0..n_t {
            let mut acc = vec![0.0f64; dim];
            for (j, &c) in chans.iter().enumerate() {
                let src = if pattern & (1 << j) != 0 { &self.on } else { &self.off };
                for (a, &v) in acc.iter_mut().zip(src.data.slice(s![t, c, ..])) {
                    *a += v as f64;
                }
            }
            let k = chans.len() as f64;
            for (o, a) in out.row_mut(t).iter_mut().zip(acc) {
                *o = a / k;
            }
        }
        out
    }

    fn pooled(&self, s: Coalition) -> PooledTensor {
        let (n_t, _, dim) = self.on.data.dim();
        let mut data = Array3::zeros((n_t, self.selection.len(), dim));
        for (r, chans) in self.selection.iter().enumerate() {
            let pattern = chans
                .iter()
                .enumerate()
                .filter(|(_, &c)| s & (1 << c) != 0)
                .fold(0usize, |p, (j, _)| p | (1 << j));
            let block = match &self.tables[r] {
                Some(t) => t[pattern].clone(),
                None => self.region_block(r, pattern),
            };
            data.slice_mut(s![.., r, ..]).assign(&block);
        }
        PooledTensor {
            data,
            spatial_mode: self.spatial,
        }
    }

    /// Model output with exactly the electrodes in `s` unmasked.
    pub fn value(&self, s: Coalition) -> Result<f64, ExplainError> {
        let x = pool_temporal(&self.pooled(s), self.temporal);
        Ok(self.model.predict_one(&x.data)?)
    }

    pub fn value_function(&self) -> ValueFunction<'_> {
        ValueFunction::new(self.n, move |s| self.value(s))
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_windows;
    use super::super::{owen_exact, PartitionTree};
    use super::*;
    use crate::data::{Montage, TrialKey};
    use crate::estimators::{fit, DnnConfig, EstimatorKind, Hyper};
    use crate::features::{pool, PrecomputedProvider, ToySpectralProvider};
    use ndarray::Array2;

    fn small_montage() -> Montage {
        Montage::from_labels(
            "mini",
            &["Fp1", "Fz", "FC1", "Cz", "T7", "CP1", "Pz", "PO3", "Oz", "F3", "C4", "O1"],
        )
        .unwrap()
    }

    fn trained(kind: EstimatorKind, hyper: Hyper, temporal: TemporalMode) -> (Montage, ToySpectralProvider, Model) {
        let montage = small_montage();
        let provider = ToySpectralProvider::new(5);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let w = random_windows(montage.n_channels(), 100 + i);
                let h = embed_trial(&provider, &w).unwrap();
                pool(&h, &montage, SpatialMode::GroupAvg, temporal).unwrap().data
            })
            .collect();
        let d = rows[0].len();
        let x = Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap();
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let cfg = DnnConfig {
            epochs: 5,
            ..DnnConfig::default()
        };
        let model = fit(kind, hyper, x.view(), &y, &cfg).unwrap();
        (montage, provider, model)
    }

    #[test]
    fn fast_game_matches_literal_masking() {
        let (montage, provider, model) = trained(EstimatorKind::Linear, Hyper::Lambda(0.0), TemporalMode::Mean);
        let w = random_windows(montage.n_channels(), 1);
        for baseline in [Baseline::Zero, Baseline::ChannelMean] {
            let game = ChannelGame::new(&provider, &model, &montage, SpatialMode::GroupAvg, TemporalMode::Mean, &w, baseline)
                .unwrap();
            let literal = ValueFunction::masked(&w, baseline, |x| {
                let h = embed_trial(&provider, x)?;
                let f = pool(&h, &montage, SpatialMode::GroupAvg, TemporalMode::Mean)?;
                Ok(model.predict_one(&f.data)?)
            })
            .unwrap();
            for s in [0u64, 0xfff, 0b1, 0b1010_0110_0101, 0b0111_1000_0000] {
                let (a, b) = (game.value(s).unwrap(), literal.value(s).unwrap());
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{s:#x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn efficiency_holds_for_every_head() {
        for (kind, hyper) in [
            (EstimatorKind::Linear, Hyper::Lambda(0.5)),
            (EstimatorKind::Dnn, Hyper::Lr(5e-4)),
            (EstimatorKind::Svr, Hyper::Fixed),
        ] {
            let (montage, provider, model) = trained(kind, hyper, TemporalMode::Mean);
            let w = random_windows(montage.n_channels(), 77);
            let game = ChannelGame::new(&provider, &model, &montage, SpatialMode::GroupAvg, TemporalMode::Mean, &w, Baseline::Zero)
                .unwrap();
            let v = game.value_function();
            let r = owen_exact(&v, &PartitionTree::from_montage(&montage)).unwrap();
            let total: f64 = r.phi.iter().sum();
            let scale = r.full_value.abs().max(1.0);
            assert!((total - (r.full_value - r.base_value)).abs() <= 1e-6 * scale, "{kind}");
            assert!(r.phi.iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn intersection_leaves_unselected_electrodes_at_zero() {
        let (montage, provider, _) = trained(EstimatorKind::Linear, Hyper::Lambda(0.0), TemporalMode::Mean);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let w = random_windows(montage.n_channels(), 200 + i);
                pool(&embed_trial(&provider, &w).unwrap(), &montage, SpatialMode::Intersection, TemporalMode::Mean)
                    .unwrap()
                    .data
            })
            .collect();
        let x = Array2::from_shape_vec((8, rows[0].len()), rows.concat()).unwrap();
        let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let model = fit(EstimatorKind::Linear, Hyper::Lambda(0.0), x.view(), &y, &DnnConfig::default()).unwrap();
        let w = random_windows(montage.n_channels(), 3);
        let game =
            ChannelGame::new(&provider, &model, &montage, SpatialMode::Intersection, TemporalMode::Mean, &w, Baseline::Zero)
                .unwrap();
        let r = owen_exact(&game.value_function(), &PartitionTree::from_montage(&montage)).unwrap();
        for name in ["F3", "C4", "O1"] {
            assert_eq!(r.phi[montage.index_of(name).unwrap()], 0.0, "{name}");
        }
    }

    #[test]
    fn stored_embeddings_cannot_be_attributed() {
        let (montage, _, model) = trained(EstimatorKind::Linear, Hyper::Lambda(0.0), TemporalMode::Mean);
        let w = random_windows(montage.n_channels(), 3);
        let stored = PrecomputedProvider::from_records(
            "pre",
            [(TrialKey::new("P01", 1, 0), ndarray::Array3::zeros((10, montage.n_channels(), 200)))],
        );
        assert!(matches!(
            ChannelGame::new(&stored, &model, &montage, SpatialMode::GroupAvg, TemporalMode::Mean, &w, Baseline::Zero),
            Err(ExplainError::Feature(FeatureError::Unsupported(_)))
        ));
    }
}
