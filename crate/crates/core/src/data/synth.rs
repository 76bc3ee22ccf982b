//! Synthetic cohort generator standing in for the clinical recordings.
//!
//! Every subject follows a latent motor state on `-4..=4`, one value per
//! minute. Negative states lower movement energy and add a 4-6 Hz tremor to
//! the accelerometer, positive states add 1-4 Hz jerk bursts to both sensors
//! at a rate proportional to the state. Controls stay at state 0.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{write_cohort_csv, write_labels, Group, LabelTable, RawRecording, RawSample, DEVICE_RATE_HZ};
use crate::error::{Error, Result};

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Labeled patients (the evaluation cohort).
    pub subjects: usize,
    pub minutes: usize,
    pub seed: u64,
    /// Unlabeled subjects for pretraining, a mix of patients and controls.
    pub pretrain_subjects: usize,
    pub pretrain_minutes: usize,
    pub control_fraction: f64,
    pub transition_prob: f64,
    /// Accelerometer and gyroscope noise floor at unit subject scale.
    pub accel_noise: f64,
    pub gyro_noise: f64,
    /// Tremor amplitude per unit of negative state, m/s^2.
    pub tremor_amplitude: f64,
    /// Burst onsets per second per unit of positive state.
    pub burst_rate: f64,
    /// Fractional loss of baseline movement energy per unit of negative state.
    pub slowing: f64,
}

impl SynthConfig {
    pub fn new(subjects: usize, minutes: usize, seed: u64) -> Self {
        Self {
            subjects,
            minutes,
            seed,
            pretrain_subjects: subjects,
            pretrain_minutes: minutes.min(60),
            control_fraction: 0.5,
            transition_prob: 0.15,
            accel_noise: 0.3,
            gyro_noise: 0.1,
            tremor_amplitude: 0.25,
            burst_rate: 0.08,
            slowing: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub recordings: Vec<RawRecording>,
    /// Minute labels of the labeled patients only.
    pub labels: LabelTable,
    pub cohort: BTreeMap<String, Group>,
}

/// Bounded random walk on `-4..=4` starting at 0. Each minute moves one step
/// with probability `p`; a step from `s != 0` goes toward 0 with probability
/// `0.5 + |s| / 10`.
pub fn state_walk(minutes: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<i32> {
    let mut s = 0i32;
    let mut out = Vec::with_capacity(minutes);
    for _ in 0..minutes {
        out.push(s);
        if rng.random::<f64>() < p {
            let toward = if s == 0 {
                rng.random::<bool>()
            } else {
                rng.random::<f64>() < 0.5 + s.abs() as f64 / 10.0
            };
            let step = if s == 0 {
                if toward {
                    1
                } else {
                    -1
                }
            } else if toward {
                -s.signum()
            } else {
                s.signum()
            };
            s = (s + step).clamp(-4, 4);
        }
    }
    out
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

struct Burst {
    start: usize,
    len: usize,
    freq: f64,
    amp: f64,
    accel_axis: [f64; 3],
    gyro_axis: [f64; 3],
}

/// Raw 62.5 Hz signal for the given per-minute states.
pub fn synth_subject(id: &str, states: &[i32], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<RawRecording> {
    let gain = rng.random_range(0.85..1.15);
    let floor = rng.random_range(0.8..1.2);
    let tremor_freq = rng.random_range(4.0..6.0);
    let tremor_phase = rng.random_range(0.0..2.0 * PI);
    let gravity = unit_vector(rng).map(|v| v * GRAVITY);
    let tremor_axis = unit_vector(rng);

    let per_minute = (60.0 * DEVICE_RATE_HZ) as usize;
    let n = states.len() * per_minute;
    let rho: f64 = 0.95;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut ar = [0.0f64; 6];
    let mut bursts: Vec<Burst> = Vec::new();
    let mut samples = Vec::with_capacity(n);

    for i in 0..n {
        let s = states[i / per_minute];
        let t = i as f64 / DEVICE_RATE_HZ;
        for v in ar.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = rho * *v + innovation * z;
        }
        let activity = if s < 0 { 1.0 - cfg.slowing * (-s) as f64 } else { 1.0 };
        let mut accel: [f64; 3] =
            std::array::from_fn(|k| gravity[k] + cfg.accel_noise * floor * gain * activity * ar[k]);
        let mut gyro: [f64; 3] = std::array::from_fn(|k| cfg.gyro_noise * floor * gain * activity * ar[3 + k]);

        if s < 0 {
            let a = cfg.tremor_amplitude * gain * (-s) as f64 * (2.0 * PI * tremor_freq * t + tremor_phase).sin();
            for k in 0..3 {
                accel[k] += a * tremor_axis[k];
            }
        }
        if s > 0 && rng.random::<f64>() < cfg.burst_rate * s as f64 / DEVICE_RATE_HZ {
            let seconds = rng.random_range(1.0..3.0);
            bursts.push(Burst {
                start: i,
                len: (seconds * DEVICE_RATE_HZ) as usize,
                freq: rng.random_range(1.0..4.0),
                amp: gain * rng.random_range(0.5..1.5),
                accel_axis: unit_vector(rng),
                gyro_axis: unit_vector(rng),
            });
        }
        bursts.retain(|b| i < b.start + b.len);
        for b in &bursts {
            let tau = (i - b.start) as f64;
            let envelope = (PI * tau / b.len as f64).sin().powi(2);
            let wave = b.amp * envelope * (2.0 * PI * b.freq * tau / DEVICE_RATE_HZ).sin();
            for k in 0..3 {
                accel[k] += 2.0 * wave * b.accel_axis[k];
                gyro[k] += 1.5 * wave * b.gyro_axis[k];
            }
        }
        samples.push(RawSample {
            t_ms: (i as f64 * 1000.0 / DEVICE_RATE_HZ).round() as i64,
            accel,
            gyro,
        });
    }
    RawRecording::new(id, DEVICE_RATE_HZ, samples)
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    let width = n.to_string().len().max(2);
    (1..=n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

pub fn synth_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    if cfg.subjects < 2 {
        return Err(Error::Config(format!("need at least 2 subjects, got {}", cfg.subjects)));
    }
    let mut out = SynthCohort {
        recordings: Vec::new(),
        labels: LabelTable::new(),
        cohort: BTreeMap::new(),
    };
    for (i, id) in ids("pd", cfg.subjects).into_iter().enumerate() {
        let mut rng = subject_rng(cfg.seed, i as u64);
        let states = state_walk(cfg.minutes, cfg.transition_prob, &mut rng);
        out.recordings.push(synth_subject(&id, &states, cfg, &mut rng)?);
        out.labels.insert(
            id.clone(),
            states.iter().enumerate().map(|(m, &s)| (m as u32, s)).collect(),
        );
        out.cohort.insert(id, Group::Pd);
    }
    for (i, id) in ids("aux", cfg.pretrain_subjects).into_iter().enumerate() {
        let mut rng = subject_rng(cfg.seed, (cfg.subjects + i) as u64);
        let f = cfg.control_fraction;
        let group = if ((i + 1) as f64 * f).floor() > (i as f64 * f).floor() {
            Group::Control
        } else {
            Group::Pd
        };
        let states = match group {
            Group::Pd => state_walk(cfg.pretrain_minutes, cfg.transition_prob, &mut rng),
            Group::Control => vec![0; cfg.pretrain_minutes],
        };
        out.recordings.push(synth_subject(&id, &states, cfg, &mut rng)?);
        out.cohort.insert(id, group);
    }
    Ok(out)
}

/// Writes `raw/<id>.csv`, `labels.csv`, and `cohort.csv` under `dir`.
pub fn write_cohort(dir: impl AsRef<Path>, cohort: &SynthCohort) -> Result<()> {
    let dir = dir.as_ref();
    let raw = dir.join("raw");
    fs::create_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
    for rec in &cohort.recordings {
        rec.write_csv(raw.join(format!("{}.csv", rec.subject_id)))?;
    }
    write_labels(dir.join("labels.csv"), &cohort.labels)?;
    write_cohort_csv(dir.join("cohort.csv"), &cohort.cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::euclidean_norms;

    fn variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = SynthConfig::new(2, 3, 11);
        cfg.pretrain_subjects = 2;
        cfg.pretrain_minutes = 2;
        let a = synth_cohort(&cfg).unwrap();
        let b = synth_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.recordings.len(), 4);
        assert_eq!(a.labels.len(), 2);
        assert_eq!(a.recordings[0].len(), 3 * 3750);
        let groups: Vec<Group> = a.cohort.values().copied().collect();
        assert!(groups.contains(&Group::Control) && groups.contains(&Group::Pd));
        cfg.seed = 12;
        assert_ne!(synth_cohort(&cfg).unwrap(), a);
        assert!(synth_cohort(&SynthConfig::new(1, 3, 0)).is_err());
    }

    #[test]
    fn dyskinetic_minutes_have_larger_gyro_variance() {
        let cfg = SynthConfig::new(2, 0, 0);
        let mut rng = subject_rng(3, 0);
        let states: Vec<i32> = (0..80).map(|m| if m % 2 == 0 { 0 } else { 4 }).collect();
        let rec = synth_subject("s", &states, &cfg, &mut rng).unwrap();
        let [_, gyro] = euclidean_norms(&rec);
        let vars: Vec<f64> = gyro.chunks(3750).map(variance).collect();
        let (mut wins, mut pairs) = (0, 0);
        for a in vars.iter().skip(1).step_by(2) {
            for b in vars.iter().step_by(2) {
                pairs += 1;
                wins += (a > b) as usize;
            }
        }
        assert!(wins as f64 / pairs as f64 >= 0.99, "{wins}/{pairs}");
    }

    #[test]
    fn label_histogram_mode_is_zero() {
        let mut hist = BTreeMap::<i32, usize>::new();
        for i in 0..20 {
            let mut rng = subject_rng(21, i);
            for s in state_walk(300, 0.15, &mut rng) {
                *hist.entry(s).or_default() += 1;
            }
        }
        let (&mode, _) = hist.iter().max_by_key(|(_, &n)| n).unwrap();
        assert_eq!(mode, 0);
        assert!(hist.len() >= 5, "{hist:?}");
        let total: usize = hist.values().sum();
        assert!(hist[&0] as f64 / (total as f64) < 0.6, "imbalanced but not degenerate");
    }

    #[test]
    fn writes_expected_layout() {
        let mut cfg = SynthConfig::new(2, 2, 1);
        cfg.pretrain_subjects = 2;
        cfg.pretrain_minutes = 2;
        let cohort = synth_cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), &cohort).unwrap();
        for id in ["pd01", "pd02", "aux01", "aux02"] {
            assert!(dir.path().join("raw").join(format!("{id}.csv")).exists());
        }
        let labels = crate::data::read_labels(dir.path().join("labels.csv")).unwrap();
        assert_eq!(labels, cohort.labels);
    }
}
