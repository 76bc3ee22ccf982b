use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub rate_hz: f64,
    pub window_s: f64,
    pub overlap: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            rate_hz: 20.0,
            window_s: 60.0,
            overlap: 0.8,
        }
    }
}

impl WindowConfig {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        (self.window_s * self.rate_hz).round() as usize
    }

    pub fn stride(&self) -> usize {
        ((1.0 - self.overlap) * self.window_s * self.rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() == 0 || self.stride() == 0 || !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("invalid window configuration {self:?}")));
        }
        Ok(())
    }
}

/// `floor((n - len) / stride) + 1` for `n >= len`, else 0.
pub fn window_count(n_samples: usize, cfg: &WindowConfig) -> usize {
    if n_samples < cfg.len() {
        0
    } else {
        (n_samples - cfg.len()) / cfg.stride() + 1
    }
}

pub fn window_starts(n_samples: usize, cfg: &WindowConfig) -> Vec<usize> {
    (0..window_count(n_samples, cfg)).map(|i| i * cfg.stride()).collect()
}

/// One labeled input window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub subject_id: String,
    pub start_s: f64,
    /// `[2, len]`: accelerometer norm and gyroscope norm.
    pub x: Tensor,
    pub label: i32,
}

/// Windows over a `[accel_norm, gyro_norm]` series, each labeled with the
/// minute containing its center. Windows whose center minute is unlabeled
/// are dropped.
pub fn make_windows(
    subject_id: &str,
    norms: &[Vec<f64>; 2],
    minute_labels: &BTreeMap<u32, i32>,
    cfg: &WindowConfig,
) -> Result<Vec<WindowSample>> {
    cfg.validate()?;
    if norms[0].len() != norms[1].len() {
        return Err(Error::dim("time", "channels differ in length"));
    }
    let len = cfg.len();
    let mut out = Vec::new();
    for start in window_starts(norms[0].len(), cfg) {
        let Some(label) = center_label(start, minute_labels, cfg) else {
            continue;
        };
        out.push(WindowSample {
            subject_id: subject_id.to_string(),
            start_s: start as f64 / cfg.rate_hz,
            x: extract_window(&norms[0], &norms[1], start, len)?,
            label,
        });
    }
    Ok(out)
}

/// Label of the minute containing the center of the window at `start`.
pub(crate) fn center_label(start: usize, minute_labels: &BTreeMap<u32, i32>, cfg: &WindowConfig) -> Option<i32> {
    let center_s = (start as f64 + cfg.len() as f64 / 2.0) / cfg.rate_hz;
    let minute = (center_s / 60.0).floor() as u32;
    minute_labels.get(&minute).copied()
}

pub fn extract_window(a: &[f64], b: &[f64], start: usize, len: usize) -> Result<Tensor> {
    if start + len > a.len() || start + len > b.len() {
        return Err(Error::dim(
            "time",
            format!("window [{start}, {}) past series end", start + len),
        ));
    }
    let mut data = Vec::with_capacity(2 * len);
    data.extend_from_slice(&a[start..start + len]);
    data.extend_from_slice(&b[start..start + len]);
    Tensor::new(&[2, len], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(seconds: usize) -> [Vec<f64>; 2] {
        let n = seconds * 20;
        [
            (0..n).map(|i| i as f64).collect(),
            (0..n).map(|i| -(i as f64)).collect(),
        ]
    }

    fn all_minutes(n: u32, label: i32) -> BTreeMap<u32, i32> {
        (0..n).map(|m| (m, label)).collect()
    }

    #[test]
    fn counts() {
        let cfg = WindowConfig::default();
        assert_eq!((cfg.len(), cfg.stride()), (1200, 240));
        let w = make_windows("s", &series(360), &all_minutes(6, 0), &cfg).unwrap();
        assert_eq!(w.len(), 26);
        assert!(make_windows("s", &series(59), &all_minutes(1, 0), &cfg)
            .unwrap()
            .is_empty());
        for (i, s) in w.iter().enumerate() {
            assert_eq!(s.start_s, 12.0 * i as f64);
            assert_eq!(s.x.shape(), &[2, 1200]);
            assert_eq!(s.x.data()[0], (240 * i) as f64);
        }
    }

    #[test]
    fn center_minute_rule() {
        let cfg = WindowConfig::default();
        let labels = BTreeMap::from([(0, -2), (1, 3), (2, 1)]);
        let w = make_windows("s", &series(180), &labels, &cfg).unwrap();
        let at48 = w.iter().find(|s| s.start_s == 48.0).unwrap();
        assert_eq!(at48.label, 3);
        assert_eq!(w[0].label, -2);
    }

    #[test]
    fn unlabeled_minutes_drop_windows() {
        let cfg = WindowConfig::default();
        let labels = BTreeMap::from([(0, 1), (2, 1)]);
        let w = make_windows("s", &series(180), &labels, &cfg).unwrap();
        // centers in [60, 120) belong to the missing minute 1
        assert!(w.iter().all(|s| !(60.0..120.0).contains(&(s.start_s + 30.0))));
        assert_eq!(w.len(), 11 - 5);
    }
}
