//! `MDL1` container: magic, kind tag, standardizer, kind-specific payload and
//! a trailing CRC32 of everything before it. All numbers are little-endian.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{DnnConfig, DnnModel, EstimatorError, EstimatorKind, LinearModel, Model, Standardizer, SvrModel};

const MAGIC: &[u8; 4] = b"MDL1";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> EstimatorError {
        EstimatorError::Format {
            file: self.file.clone(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], EstimatorError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, EstimatorError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, EstimatorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, EstimatorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, EstimatorError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, EstimatorError> {
        if (self.bytes.len() - self.pos) / 8 < n {
            return Err(self.err(format!("truncated array of {n} values")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Serializes a model to bytes.
pub fn write_model(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u8(model.kind().tag());
    let st = model.standardizer();
    w.u32(st.dim());
    w.f64s(&st.mean);
    w.f64s(&st.std);
    match model {
        Model::Linear(m) => {
            w.f64(m.lambda);
            w.f64(m.b);
            w.f64(m.target_mean);
            w.f64(m.target_std);
            w.u32(m.sweeps);
            w.f64s(&m.w);
        }
        Model::Dnn(m) => {
            w.u32(m.hidden_dim());
            w.u8(m.config.hidden.is_some() as u8);
            w.f64(m.target_mean);
            w.f64(m.target_std);
            w.f64(m.config.lr);
            w.u32(m.config.epochs);
            w.u32(m.config.batch_size);
            w.u64(m.config.seed);
            w.f64s(m.w1.iter());
            for a in [&m.b1, &m.gamma, &m.beta, &m.running_mean, &m.running_var, &m.w2] {
                w.f64s(a.iter());
            }
            w.f64(m.b2);
        }
        Model::Svr(m) => {
            w.f64(m.c);
            w.f64(m.epsilon);
            w.f64(m.gamma);
            w.f64(m.bias);
            w.u32(m.coef.len());
            w.f64s(&m.coef);
            w.f64s(m.support.iter());
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

/// Parses bytes produced by [`write_model`]. `file` only labels errors.
pub fn read_model(bytes: &[u8], file: &str) -> Result<Model, EstimatorError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        file: file.to_string(),
    };
    if bytes.len() < 4 + 1 + 4 + 4 || &bytes[..4] != MAGIC {
        return Err(r.err("bad magic, expected MDL1"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        r.pos = bytes.len() - 4;
        return Err(r.err("CRC32 mismatch"));
    }
    r.bytes = body;
    r.take(4)?;
    let tag = r.u8()?;
    let d = r.u32()?;
    let standardizer = Standardizer {
        mean: r.f64s(d)?,
        std: r.f64s(d)?,
    };
    let model = match tag {
        t if t == EstimatorKind::Linear.tag() => {
            let lambda = r.f64()?;
            let b = r.f64()?;
            let target_mean = r.f64()?;
            let target_std = r.f64()?;
            let sweeps = r.u32()?;
            let w = r.f64s(d)?;
            Model::Linear(LinearModel {
                w,
                b,
                lambda,
                standardizer,
                target_mean,
                target_std,
                sweeps,
            })
        }
        t if t == EstimatorKind::Dnn.tag() => {
            let h = r.u32()?;
            let explicit = r.u8()? != 0;
            let target_mean = r.f64()?;
            let target_std = r.f64()?;
            let lr = r.f64()?;
            let epochs = r.u32()?;
            let batch_size = r.u32()?;
            let seed = r.u64()?;
            let w1 = Array2::from_shape_vec((h, d), r.f64s(h * d)?).map_err(|e| r.err(e.to_string()))?;
            let mut vecs = Vec::new();
            for _ in 0..6 {
                vecs.push(Array1::from(r.f64s(h)?));
            }
            let b2 = r.f64()?;
            let mut it = vecs.into_iter();
            let mut next = || it.next().unwrap();
            Model::Dnn(DnnModel {
                standardizer,
                target_mean,
                target_std,
                w1,
                b1: next(),
                gamma: next(),
                beta: next(),
                running_mean: next(),
                running_var: next(),
                w2: next(),
                b2,
                config: DnnConfig {
                    lr,
                    epochs,
                    batch_size,
                    seed,
                    hidden: explicit.then_some(h),
                },
            })
        }
        t if t == EstimatorKind::Svr.tag() => {
            let c = r.f64()?;
            let epsilon = r.f64()?;
            let gamma = r.f64()?;
            let bias = r.f64()?;
            let n = r.u32()?;
            let coef = r.f64s(n)?;
            let support = Array2::from_shape_vec((n, d), r.f64s(n * d)?).map_err(|e| r.err(e.to_string()))?;
            Model::Svr(SvrModel {
                standardizer,
                support,
                coef,
                bias,
                gamma,
                c,
                epsilon,
            })
        }
        other => {
            r.pos = 4;
            return Err(r.err(format!("unknown model kind tag {other}")));
        }
    };
    if r.pos != body.len() {
        return Err(r.err("trailing bytes before checksum"));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), EstimatorError> {
    fs::write(path, write_model(model)).map_err(|e| EstimatorError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_model(path: &Path) -> Result<Model, EstimatorError> {
    let bytes = fs::read(path).map_err(|e| EstimatorError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_model(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{fit, Hyper};
    use rand::{Rng, SeedableRng};

    fn models() -> (Array2<f64>, Vec<Model>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((24, 9), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<f64> = (0..24).map(|i| x[[i, 0]] - 0.5 * x[[i, 4]] + 0.1 * (i as f64).sin()).collect();
        let cfg = DnnConfig {
            epochs: 4,
            ..DnnConfig::default()
        };
        let ms = vec![
            fit(EstimatorKind::Linear, Hyper::Lambda(0.0), x.view(), &y, &cfg).unwrap(),
            fit(EstimatorKind::Dnn, Hyper::Lr(1e-4), x.view(), &y, &cfg).unwrap(),
            fit(EstimatorKind::Svr, Hyper::Fixed, x.view(), &y, &cfg).unwrap(),
        ];
        (x, ms)
    }

    #[test]
    fn round_trip_preserves_models_and_predictions() {
        let (x, ms) = models();
        let dir = tempfile::tempdir().unwrap();
        for m in ms {
            let path = dir.path().join(format!("{}.mdl", m.kind()));
            save_model(&m, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.predict(x.view()).unwrap(), m.predict(x.view()).unwrap());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let (_, ms) = models();
        let mut bytes = write_model(&ms[0]);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match read_model(&bytes, "m") {
            Err(EstimatorError::Format { reason, .. }) => assert!(reason.contains("CRC")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_model(b"MDL2xxxxxxxxxxxxx", "m"), Err(EstimatorError::Format { offset: 0, .. })));
        let mut bad_tag = write_model(&ms[2]);
        bad_tag[4] = 9;
        let n = bad_tag.len() - 4;
        let crc = crc32fast::hash(&bad_tag[..n]);
        bad_tag[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(read_model(&bad_tag, "m"), Err(EstimatorError::Format { offset: 4, .. })));
    }

    #[test]
    fn layout_starts_with_magic_and_tag() {
        let (_, ms) = models();
        let b = write_model(&ms[1]);
        assert_eq!(&b[..4], b"MDL1");
        assert_eq!(b[4], 2);
        assert_eq!(u32::from_le_bytes(b[5..9].try_into().unwrap()), 9);
    }
}
