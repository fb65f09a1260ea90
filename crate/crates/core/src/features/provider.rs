use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{read_emb1, FeatureError, EMBED_DIM, SECOND_SAMPLES};
use crate::data::TrialKey;

/// Spectrum bins kept by the toy provider (`rfft` of 200 samples).
pub const TOY_BINS: usize = SECOND_SAMPLES / 2 + 1;

/// A per-second, per-channel encoder.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Embeds one second (200 samples at 200 Hz) of a single channel.
    fn embed_second(&self, x: &[f64]) -> Result<Vec<f64>, FeatureError>;

    fn embed_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>, FeatureError> {
        xs.iter().map(|x| self.embed_second(x)).collect()
    }

    /// Mean embedding of each group of seconds. All seconds go out as one batch.
    fn embed_groups(&self, groups: &[Vec<&[f64]>]) -> Result<Vec<Vec<f64>>, FeatureError> {
        let flat: Vec<&[f64]> = groups.iter().flatten().copied().collect();
        let out = self.embed_batch(&flat)?;
        if out.len() != flat.len() {
            return Err(FeatureError::Protocol(format!(
                "asked for {} embeddings, got {}",
                flat.len(),
                out.len()
            )));
        }
        let mut it = out.into_iter();
        Ok(groups
            .iter()
            .map(|g| {
                let mut acc = vec![0.0; self.dim()];
                for v in it.by_ref().take(g.len()) {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= g.len() as f64);
                acc
            })
            .collect())
    }

    /// Trial-level embeddings that bypass `embed_second`, if the provider stores them.
    fn stored(&self, _key: &TrialKey) -> Option<Result<Array3<f32>, FeatureError>> {
        None
    }
}

/// Deterministic stand-in encoder: log-magnitude spectrum through a fixed random projection.
pub struct ToySpectralProvider {
    id: String,
    fft: Arc<dyn Fft<f64>>,
    // Row-major [EMBED_DIM × TOY_BINS], unit-norm columns.
    projection: Vec<f64>,
}

impl ToySpectralProvider {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut projection: Vec<f64> = (0..EMBED_DIM * TOY_BINS)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for j in 0..TOY_BINS {
            let norm = (0..EMBED_DIM)
                .map(|i| projection[i * TOY_BINS + j].powi(2))
                .sum::<f64>()
                .sqrt();
            for i in 0..EMBED_DIM {
                projection[i * TOY_BINS + j] /= norm;
            }
        }
        Self {
            id: format!("toy-spectral:{seed}"),
            fft: FftPlanner::new().plan_fft_forward(SECOND_SAMPLES),
            projection,
        }
    }

    /// `log(1 + |rfft(x)|)`, 101 bins.
    pub fn log_spectrum(&self, x: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if x.len() != SECOND_SAMPLES {
            return Err(FeatureError::Shape {
                expected: format!("{SECOND_SAMPLES} samples"),
                got: format!("{} samples", x.len()),
            });
        }
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[..TOY_BINS].iter().map(|c| c.norm().ln_1p()).collect())
    }

    fn project(&self, spec: &[f64]) -> Vec<f64> {
        self.projection
            .chunks_exact(TOY_BINS)
            .map(|row| row.iter().zip(spec).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl EmbeddingProvider for ToySpectralProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed_second(&self, x: &[f64]) -> Result<Vec<f64>, FeatureError> {
        Ok(self.project(&self.log_spectrum(x)?))
    }

    // The projection is linear, so averaging spectra first gives the same mean embedding.
    fn embed_groups(&self, groups: &[Vec<&[f64]>]) -> Result<Vec<Vec<f64>>, FeatureError> {
        groups
            .iter()
            .map(|g| {
                let mut acc = vec![0.0; TOY_BINS];
                for x in g {
                    for (a, b) in acc.iter_mut().zip(self.log_spectrum(x)?) {
                        *a += b;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= g.len() as f64);
                Ok(self.project(&acc))
            })
            .collect()
    }
}

/// Serves embeddings computed elsewhere and stored in an EMB1 file.
pub struct PrecomputedProvider {
    id: String,
    records: HashMap<TrialKey, Array3<f32>>,
}

impl PrecomputedProvider {
    pub fn open(path: &Path) -> Result<Self, FeatureError> {
        let records = read_emb1(path)?.into_iter().collect();
        Ok(Self {
            id: format!("precomputed:{}", path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()),
            records,
        })
    }

    pub fn from_records(id: &str, records: impl IntoIterator<Item = (TrialKey, Array3<f32>)>) -> Self {
        Self {
            id: id.to_string(),
            records: records.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed_second(&self, _x: &[f64]) -> Result<Vec<f64>, FeatureError> {
        Err(FeatureError::Unsupported(self.id.clone()))
    }

    fn stored(&self, key: &TrialKey) -> Option<Result<Array3<f32>, FeatureError>> {
        Some(
            self.records
                .get(key)
                .cloned()
                .ok_or_else(|| FeatureError::MissingEmbedding(key.clone())),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::write_emb1;
    use crate::preprocess::N_WINDOWS;
    use std::f64::consts::PI;

    fn sine(f: f64) -> Vec<f64> {
        (0..SECOND_SAMPLES).map(|i| (2.0 * PI * f * i as f64 / 200.0).sin()).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn zero_signal_embeds_to_zero() {
        let p = ToySpectralProvider::new(1);
        assert!(p.embed_second(&[0.0; 200]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_for_seed() {
        let x = sine(13.0);
        let a = ToySpectralProvider::new(9).embed_second(&x).unwrap();
        let b = ToySpectralProvider::new(9).embed_second(&x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let c = ToySpectralProvider::new(10).embed_second(&x).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn distinct_spectra_separate() {
        let p = ToySpectralProvider::new(3);
        let a = p.embed_second(&sine(10.0)).unwrap();
        let b = p.embed_second(&sine(40.0)).unwrap();
        assert!(cosine(&a, &b) < 0.5, "{}", cosine(&a, &b));
    }

    #[test]
    fn columns_are_unit_norm() {
        let p = ToySpectralProvider::new(4);
        for j in [0, 50, 100] {
            let n: f64 = (0..EMBED_DIM).map(|i| p.projection[i * TOY_BINS + j].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn group_mean_matches_per_second_mean() {
        let p = ToySpectralProvider::new(2);
        let xs: Vec<Vec<f64>> = (0..4).map(|k| sine(5.0 + 7.0 * k as f64)).collect();
        let group: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let fast = p.embed_groups(&[group.clone()]).unwrap().remove(0);
        let slow: Vec<f64> = (0..EMBED_DIM)
            .map(|d| group.iter().map(|x| p.embed_second(x).unwrap()[d]).sum::<f64>() / 4.0)
            .collect();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn precomputed_round_trip_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.emb1");
        let key = TrialKey::new("P02", 3, 1);
        let data = Array3::from_shape_fn((N_WINDOWS, 3, EMBED_DIM), |(t, e, d)| (t * 7 + e) as f32 - d as f32 * 0.125);
        write_emb1(&path, &[(key.clone(), data.clone())]).unwrap();
        let p = PrecomputedProvider::open(&path).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.stored(&key).unwrap().unwrap(), data);
        let other = TrialKey::new("P02", 3, 2);
        assert!(matches!(p.stored(&other), Some(Err(FeatureError::MissingEmbedding(k))) if k == other));
        assert!(matches!(p.embed_second(&[0.0; 200]), Err(FeatureError::Unsupported(_))));
    }
}
