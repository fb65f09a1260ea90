use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::trial::{Behavioral, Cohort, LabelRecord, Trial, TrialKey, TrialSet};
use super::{DataError, Montage};

const CLT1_MAGIC: &[u8; 4] = b"CLT1";
const CLT1_HEADER: usize = 4 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTrial {
    pub participant: String,
    pub cohort: Cohort,
    pub day: u32,
    pub trial_index: u32,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub montage: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavioral: Option<String>,
    pub trials: Vec<ManifestTrial>,
}

/// Serializes a channel-major sample matrix in the CLT1 layout. Samples are stored as f32.
pub fn write_clt1(path: &Path, samples: &Array2<f64>, fs: f64) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(CLT1_HEADER + samples.len() * 4);
    buf.extend_from_slice(CLT1_MAGIC);
    buf.extend_from_slice(&(samples.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(samples.ncols() as u64).to_le_bytes());
    buf.extend_from_slice(&(fs as f32).to_le_bytes());
    for row in samples.rows() {
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| DataError::io(path, e))?;
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Reads a CLT1 file, returning `(samples [channels × n], fs)`.
pub fn read_clt1(path: &Path) -> Result<(Array2<f64>, f64), DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.len() < CLT1_HEADER {
        return Err(DataError::format(path, bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != CLT1_MAGIC {
        return Err(DataError::format(path, 0, "bad magic, expected CLT1"));
    }
    let channels = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let fs = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    if channels == 0 || n == 0 {
        return Err(DataError::format(path, 4, "zero channels or samples"));
    }
    if !(fs.is_finite() && fs > 0.0) {
        return Err(DataError::format(path, 16, format!("invalid sampling rate {fs}")));
    }
    let expected = (channels as u64)
        .checked_mul(n)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(CLT1_HEADER as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(DataError::format(
            path,
            CLT1_HEADER as u64,
            format!(
                "payload length {} does not match {channels} channels × {n} samples",
                bytes.len() - CLT1_HEADER
            ),
        ));
    }
    let n = n as usize;
    let mut data = Vec::with_capacity(channels * n);
    for (i, chunk) in bytes[CLT1_HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DataError::format(
                path,
                (CLT1_HEADER + 4 * i) as u64,
                "non-finite sample",
            ));
        }
        data.push(v as f64);
    }
    Ok((Array2::from_shape_vec((channels, n), data).unwrap(), fs))
}

fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, DataError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["participant", "cohort", "day", "trial_index", "score"];
    if headers.iter().map(str::trim).ne(expected) {
        return Err(DataError::format(
            path,
            0,
            format!("header must be {}", expected.join(",")),
        ));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

fn read_behavioral(path: &Path) -> Result<Behavioral, DataError> {
    #[derive(Deserialize)]
    struct Row {
        participant: String,
        day: u32,
        metric: String,
        value: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out: Behavioral = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: Row = row.map_err(|e| csv_error(path, e))?;
        out.entry((row.participant, row.day))
            .or_default()
            .insert(row.metric, row.value);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::io(path, io),
        kind => DataError::format(path, offset, format!("{kind:?}")),
    }
}

/// Loads and validates a dataset from its JSON manifest. Relative paths resolve
/// against the manifest's directory.
pub fn load_trialset(manifest_path: &Path) -> Result<TrialSet, DataError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| DataError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        DataError::format(manifest_path, e.column() as u64, e.to_string())
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let montage = Montage::load(&base.join(&manifest.montage))?;
    let labels = read_labels(&base.join(&manifest.labels))?;
    let behavioral = manifest
        .behavioral
        .as_ref()
        .map(|b| read_behavioral(&base.join(b)))
        .transpose()?;
    let trials = manifest
        .trials
        .iter()
        .map(|entry| {
            let path = base.join(&entry.file);
            let (samples, fs) = read_clt1(&path)?;
            let key = TrialKey::new(entry.participant.clone(), entry.day, entry.trial_index);
            if samples.nrows() != montage.n_channels() {
                return Err(DataError::Consistency(format!(
                    "{}: trial {key} declares {} channels but montage {} has {}",
                    path.display(),
                    samples.nrows(),
                    montage.name,
                    montage.n_channels()
                )));
            }
            Trial::new(key, entry.cohort, fs, samples)
        })
        .collect::<Result<Vec<_>, _>>()?;
    TrialSet::new(montage, trials, labels, behavioral)
}

pub(crate) fn trial_file_name(key: &TrialKey) -> String {
    format!("{}_d{}_t{:03}.clt", key.participant, key.day, key.trial_index)
}

/// Writes `ts` under `dir` (created if needed) and returns the manifest path.
pub fn write_trialset(ts: &TrialSet, dir: &Path) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let montage_path = dir.join("montage.json");
    fs::write(&montage_path, ts.montage.to_json()).map_err(|e| DataError::io(&montage_path, e))?;

    let labels_path = dir.join("labels.csv");
    {
        let mut w = csv::Writer::from_path(&labels_path).map_err(|e| csv_error(&labels_path, e))?;
        for l in &ts.labels {
            w.serialize(l).map_err(|e| csv_error(&labels_path, e))?;
        }
        w.flush().map_err(|e| DataError::io(&labels_path, e))?;
    }

    let behavioral = match &ts.behavioral {
        Some(b) => {
            let path = dir.join("behavioral.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
            w.write_record(["participant", "day", "metric", "value"])
                .map_err(|e| csv_error(&path, e))?;
            for ((p, day), metrics) in b {
                for (metric, value) in metrics {
                    w.serialize((p, day, metric, value)).map_err(|e| csv_error(&path, e))?;
                }
            }
            w.flush().map_err(|e| DataError::io(&path, e))?;
            Some("behavioral.csv".to_string())
        }
        None => None,
    };

    let trials_dir = dir.join("trials");
    fs::create_dir_all(&trials_dir).map_err(|e| DataError::io(&trials_dir, e))?;
    let mut entries = Vec::with_capacity(ts.trials.len());
    for t in &ts.trials {
        let name = format!("trials/{}", trial_file_name(&t.key));
        write_clt1(&dir.join(&name), &t.samples, t.fs)?;
        entries.push(ManifestTrial {
            participant: t.key.participant.clone(),
            cohort: t.cohort,
            day: t.key.day,
            trial_index: t.key.trial_index,
            file: name,
        });
    }
    let manifest = Manifest {
        montage: "montage.json".into(),
        labels: "labels.csv".into(),
        behavioral,
        trials: entries,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| DataError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set() -> TrialSet {
        let montage = Montage::shipped("cap32").unwrap();
        let mut trials = Vec::new();
        let mut labels = Vec::new();
        for idx in 0..2u32 {
            let samples = Array2::from_shape_fn((32, 50), |(c, s)| ((c * 50 + s) as f32 * 0.25 - idx as f32) as f64);
            let key = TrialKey::new("P01", 1, idx);
            trials.push(Trial::new(key, Cohort::D, 500.0, samples).unwrap());
            labels.push(LabelRecord {
                participant: "P01".into(),
                cohort: Cohort::D,
                day: 1,
                trial_index: idx,
                score: 0.1 + idx as f64 / 3.0,
            });
        }
        let mut b = Behavioral::new();
        b.entry(("P01".into(), 1)).or_default().insert("blink_duration".into(), 0.19);
        TrialSet::new(montage, trials, labels, Some(b)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ts = small_set();
        let manifest = write_trialset(&ts, dir.path()).unwrap();
        let back = load_trialset(&manifest).unwrap();
        assert_eq!(back.trials.len(), 2);
        assert_eq!(back.montage.n_channels(), 32);
        assert_eq!(back, ts);
    }

    #[test]
    fn channel_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ts = small_set();
        let manifest = write_trialset(&ts, dir.path()).unwrap();
        let file = dir.path().join("trials").join(trial_file_name(&ts.trials[0].key));
        write_clt1(&file, &Array2::zeros((28, 50)), 500.0).unwrap();
        let err = load_trialset(&manifest).unwrap_err();
        assert!(matches!(err, DataError::Consistency(_)), "{err}");
    }

    #[test]
    fn orphan_label_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ts = small_set();
        let manifest_path = write_trialset(&ts, dir.path()).unwrap();
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
        manifest.trials.pop();
        fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_trialset(&manifest_path).unwrap_err();
        assert!(matches!(err, DataError::Consistency(_)));
        assert!(err.to_string().contains("P01/1/1"), "{err}");
    }

    #[test]
    fn clt1_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.clt");
        write_clt1(&p, &Array2::from_elem((2, 3), 1.5), 200.0).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CLT1");
        assert_eq!(bytes.len(), 20 + 2 * 3 * 4);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);

        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_clt1(&p), Err(DataError::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_clt1(&p), Err(DataError::Format { offset: 0, .. })));
        assert!(matches!(read_clt1(&dir.path().join("missing")), Err(DataError::Io { .. })));
    }

    #[test]
    fn missing_label_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_trialset(&small_set(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("labels.csv")).unwrap();
        match load_trialset(&manifest) {
            Err(DataError::Io { path, .. }) => assert!(path.ends_with("labels.csv")),
            other => panic!("{other:?}"),
        }
    }
}
