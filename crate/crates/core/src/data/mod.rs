//! Raw recordings, labels, and the preprocessing chain that turns them into
//! normalized two-channel windows.

mod quantile;
mod resample;
mod store;
mod synth;
mod windows;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use quantile::{fit_quantile_map, QuantileMap, DEFAULT_N_QUANTILES};
pub use resample::{fir_lowpass, resample, ResampleConfig};
pub use store::{preprocess, PreprocessConfig, Preprocessed, WindowRecord};
pub use synth::{synth_cohort, write_cohort, SynthCohort, SynthConfig};
pub use windows::{extract_window, make_windows, window_count, window_starts, WindowConfig, WindowSample};

/// Sampling rate of the wrist device.
pub const DEVICE_RATE_HZ: f64 = 62.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub t_ms: i64,
    pub accel: [f64; 3],
    pub gyro: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<RawSample>,
}

impl RawRecording {
    pub fn new(subject_id: impl Into<String>, sample_rate_hz: f64, samples: Vec<RawSample>) -> Result<Self> {
        let rec = Self {
            subject_id: subject_id.into(),
            sample_rate_hz,
            samples,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Data(format!(
                "{}: sample rate {} must be positive",
                self.subject_id, self.sample_rate_hz
            )));
        }
        if let Some(i) = self.samples.windows(2).position(|w| w[1].t_ms <= w[0].t_ms) {
            return Err(Error::Data(format!(
                "{}: timestamps not strictly increasing at row {}",
                self.subject_id,
                i + 1
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Reads `t_ms,ax,ay,az,gx,gy,gz` rows.
    pub fn read_csv(path: impl AsRef<Path>, subject_id: &str, sample_rate_hz: f64) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
        let headers = reader.headers()?.clone();
        let expected = ["t_ms", "ax", "ay", "az", "gx", "gy", "gz"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Data(format!(
                "{}: expected header {}, got {}",
                path.display(),
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut samples = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let field = |i: usize| -> Result<f64> {
                record[i].trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{}: row {}: bad value `{}` in column {}",
                        path.display(),
                        row + 1,
                        &record[i],
                        expected[i]
                    ))
                })
            };
            let t_ms = record[0].trim().parse::<i64>().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}: bad timestamp `{}`",
                    path.display(),
                    row + 1,
                    &record[0]
                ))
            })?;
            samples.push(RawSample {
                t_ms,
                accel: [field(1)?, field(2)?, field(3)?],
                gyro: [field(4)?, field(5)?, field(6)?],
            });
        }
        Self::new(subject_id, sample_rate_hz, samples)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "t_ms,ax,ay,az,gx,gy,gz").map_err(io)?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                s.t_ms, s.accel[0], s.accel[1], s.accel[2], s.gyro[0], s.gyro[1], s.gyro[2]
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Euclidean norms of the accelerometer and gyroscope vectors per sample.
pub fn euclidean_norms(rec: &RawRecording) -> [Vec<f64>; 2] {
    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [
        rec.samples.iter().map(|s| norm(&s.accel)).collect(),
        rec.samples.iter().map(|s| norm(&s.gyro)).collect(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteLabel {
    pub minute_index: u32,
    pub label: i32,
}

/// Per-subject minute labels keyed by minute index.
pub type LabelTable = BTreeMap<String, BTreeMap<u32, i32>>;

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    subject_id: String,
    minute_index: u32,
    label: i32,
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelTable> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let mut table = LabelTable::new();
    for row in reader.deserialize() {
        let row: LabelRow = row?;
        if !(-4..=4).contains(&row.label) {
            return Err(Error::Data(format!(
                "{}: label {} for {} minute {} outside [-4, 4]",
                path.display(),
                row.label,
                row.subject_id,
                row.minute_index
            )));
        }
        let minutes = table.entry(row.subject_id.clone()).or_default();
        if minutes.insert(row.minute_index, row.label).is_some() {
            return Err(Error::Data(format!(
                "{}: duplicate label for {} minute {}",
                path.display(),
                row.subject_id,
                row.minute_index
            )));
        }
    }
    Ok(table)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelTable) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    for (subject, minutes) in labels {
        for (&minute_index, &label) in minutes {
            w.serialize(LabelRow {
                subject_id: subject.clone(),
                minute_index,
                label,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Pd,
    Control,
}

impl Group {
    /// Binary target for the pretraining task.
    pub fn target(self) -> i32 {
        match self {
            Group::Pd => 1,
            Group::Control => 0,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Pd => "pd",
            Group::Control => "control",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pd" => Ok(Group::Pd),
            "control" => Ok(Group::Control),
            other => Err(Error::Data(format!("unknown cohort group `{other}`"))),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CohortRow {
    subject_id: String,
    group: Group,
}

pub fn read_cohort(path: impl AsRef<Path>) -> Result<BTreeMap<String, Group>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let row: CohortRow = row?;
        if out.insert(row.subject_id.clone(), row.group).is_some() {
            return Err(Error::Data(format!(
                "{}: subject {} listed twice",
                path.display(),
                row.subject_id
            )));
        }
    }
    Ok(out)
}

pub fn write_cohort_csv(path: impl AsRef<Path>, cohort: &BTreeMap<String, Group>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    for (subject_id, &group) in cohort {
        w.serialize(CohortRow {
            subject_id: subject_id.clone(),
            group,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-class sample weights.
pub type ClassWeights = BTreeMap<i32, f64>;

/// Inverse-frequency weights `w_c = N / (K n_c)` over the `K` classes present,
/// so the mean per-sample weight is 1. Absent classes have no entry and
/// therefore weight 0.
pub fn class_weights(labels: &[i32]) -> ClassWeights {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    let k = counts.len() as f64;
    counts.into_iter().map(|(c, nc)| (c, n / (k * nc as f64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(t_ms: i64, accel: [f64; 3], gyro: [f64; 3]) -> RawSample {
        RawSample { t_ms, accel, gyro }
    }

    #[test]
    fn norm_examples() {
        let rec = RawRecording::new(
            "s",
            62.5,
            vec![
                sample(0, [3.0, 4.0, 0.0], [0.0; 3]),
                sample(16, [0.0; 3], [1.0, 2.0, 2.0]),
            ],
        )
        .unwrap();
        let [a, g] = euclidean_norms(&rec);
        assert_eq!(a, vec![5.0, 0.0]);
        assert_eq!(g, vec![0.0, 3.0]);
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
        // Rotation from a random unit quaternion.
        let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.iter_mut().for_each(|v| *v /= n);
        let [w, x, y, z] = q;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    #[test]
    fn norms_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rot = |m: &[[f64; 3]; 3], v: [f64; 3]| -> [f64; 3] {
            std::array::from_fn(|i| (0..3).map(|j| m[i][j] * v[j]).sum())
        };
        for _ in 0..50 {
            let m = random_rotation(&mut rng);
            let samples: Vec<RawSample> = (0..100)
                .map(|i| {
                    let a = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
                    let g = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
                    sample(i * 16, a, g)
                })
                .collect();
            let rotated: Vec<RawSample> = samples
                .iter()
                .map(|s| sample(s.t_ms, rot(&m, s.accel), rot(&m, s.gyro)))
                .collect();
            let a = euclidean_norms(&RawRecording::new("s", 62.5, samples).unwrap());
            let b = euclidean_norms(&RawRecording::new("s", 62.5, rotated).unwrap());
            for c in 0..2 {
                for (x, y) in a[c].iter().zip(&b[c]) {
                    assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(
            class_weights(&[0; 5].iter().chain(&[1; 5]).copied().collect::<Vec<_>>()),
            ClassWeights::from([(0, 1.0), (1, 1.0)])
        );
        let mut labels = vec![0; 9];
        labels.push(1);
        let w = class_weights(&labels);
        assert!((w[&0] - 10.0 / 18.0).abs() < 1e-12);
        assert!((w[&1] - 5.0).abs() < 1e-12);
        assert_eq!(class_weights(&[3, 3, 3]), ClassWeights::from([(3, 1.0)]));
    }

    #[test]
    fn timestamps_must_increase() {
        let bad = RawRecording::new(
            "s",
            62.5,
            vec![sample(5, [0.0; 3], [0.0; 3]), sample(5, [0.0; 3], [0.0; 3])],
        );
        assert!(matches!(bad, Err(Error::Data(_))));
        assert!(RawRecording::new("s", 0.0, vec![]).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RawRecording::new(
            "s01",
            62.5,
            vec![
                sample(0, [1.0, -2.5, 9.81], [0.1, 0.2, -0.3]),
                sample(16, [0.0; 3], [0.0; 3]),
            ],
        )
        .unwrap();
        let path = dir.path().join("s01.csv");
        rec.write_csv(&path).unwrap();
        assert_eq!(RawRecording::read_csv(&path, "s01", 62.5).unwrap(), rec);

        let mut labels = LabelTable::new();
        labels.entry("s01".into()).or_default().insert(0, -3);
        labels.entry("s01".into()).or_default().insert(1, 4);
        let lp = dir.path().join("labels.csv");
        write_labels(&lp, &labels).unwrap();
        assert_eq!(read_labels(&lp).unwrap(), labels);

        let cohort = BTreeMap::from([("s01".to_string(), Group::Pd), ("c01".to_string(), Group::Control)]);
        let cp = dir.path().join("cohort.csv");
        write_cohort_csv(&cp, &cohort).unwrap();
        assert_eq!(read_cohort(&cp).unwrap(), cohort);
    }

    #[test]
    fn malformed_inputs_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        std::fs::write(&p, "subject_id,minute_index,label\ns,0,5\n").unwrap();
        assert!(read_labels(&p).unwrap_err().is_data_error());
        std::fs::write(&p, "subject_id,minute_index,label\ns,0,1\ns,0,2\n").unwrap();
        assert!(read_labels(&p).unwrap_err().is_data_error());
        let r = dir.path().join("r.csv");
        std::fs::write(&r, "t_ms,ax,ay,az,gx,gy,gz\n0,1,2,x,4,5,6\n").unwrap();
        assert!(RawRecording::read_csv(&r, "r", 62.5).unwrap_err().is_data_error());
        assert!(RawRecording::read_csv(dir.path().join("missing.csv"), "m", 62.5)
            .unwrap_err()
            .is_data_error());
    }
}
