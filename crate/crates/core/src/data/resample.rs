use std::f64::consts::PI;

use super::{RawRecording, RawSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleConfig {
    pub target_hz: f64,
    pub taps: usize,
    /// Low-pass cutoff as a fraction of the target rate.
    pub cutoff_ratio: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            target_hz: 20.0,
            taps: 101,
            cutoff_ratio: 0.45,
        }
    }
}

/// Hamming-windowed sinc low-pass taps with unit DC gain.
pub fn fir_lowpass(taps: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate_hz;
    let mid = (taps as f64 - 1.0) / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let n = i as f64 - mid;
            let sinc = if n == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * n).sin() / (PI * n)
            };
            let window = if taps > 1 {
                0.54 - 0.46 * (2.0 * PI * i as f64 / (taps as f64 - 1.0)).cos()
            } else {
                1.0
            };
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Zero-phase application of an odd-length FIR with edge-replicated padding.
fn filter(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    let half = taps.len() / 2;
    let n = signal.len() as isize;
    (0..signal.len())
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(j, h)| {
                    let k = (i as isize + j as isize - half as isize).clamp(0, n - 1);
                    h * signal[k as usize]
                })
                .sum()
        })
        .collect()
}

/// Low-pass filters every axis, then linearly interpolates onto a uniform
/// grid at `target_hz` starting at the first timestamp.
pub fn resample(rec: &RawRecording, cfg: &ResampleConfig) -> Result<RawRecording> {
    if !(cfg.target_hz > 0.0 && cfg.target_hz < rec.sample_rate_hz) {
        return Err(Error::Config(format!(
            "target rate {} Hz must be positive and below the source rate {} Hz",
            cfg.target_hz, rec.sample_rate_hz
        )));
    }
    if cfg.taps.is_multiple_of(2) {
        return Err(Error::Config(format!("filter length {} must be odd", cfg.taps)));
    }
    if rec.len() < cfg.taps {
        return Err(Error::TooShort {
            got: rec.len(),
            need: cfg.taps,
        });
    }
    let taps = fir_lowpass(cfg.taps, cfg.cutoff_ratio * cfg.target_hz, rec.sample_rate_hz);
    let axes: Vec<Vec<f64>> = (0..6)
        .map(|a| {
            let raw: Vec<f64> = rec
                .samples
                .iter()
                .map(|s| if a < 3 { s.accel[a] } else { s.gyro[a - 3] })
                .collect();
            filter(&raw, &taps)
        })
        .collect();

    let t: Vec<f64> = rec.samples.iter().map(|s| s.t_ms as f64).collect();
    let t0 = t[0];
    let t_end = *t.last().expect("non-empty recording");
    let step_ms = 1000.0 / cfg.target_hz;
    let n_out = ((t_end - t0) / step_ms).floor() as usize + 1;
    let mut out = Vec::with_capacity(n_out);
    let mut j = 0;
    for k in 0..n_out {
        let tk = t0 + k as f64 * step_ms;
        while j + 2 < t.len() && t[j + 1] <= tk {
            j += 1;
        }
        let (ta, tb) = (t[j], t[j + 1]);
        let frac = ((tk - ta) / (tb - ta)).clamp(0.0, 1.0);
        let v: Vec<f64> = axes.iter().map(|x| x[j] + frac * (x[j + 1] - x[j])).collect();
        out.push(RawSample {
            t_ms: tk.round() as i64,
            accel: [v[0], v[1], v[2]],
            gyro: [v[3], v[4], v[5]],
        });
    }
    RawRecording::new(rec.subject_id.clone(), cfg.target_hz, out)
}
