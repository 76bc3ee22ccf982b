use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::windows::center_label;
use super::{
    euclidean_norms, resample, window_starts, Group, LabelTable, RawRecording, ResampleConfig, WindowConfig,
    DEVICE_RATE_HZ,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub source_hz: f64,
    pub target_hz: f64,
    pub taps: usize,
    pub cutoff_ratio: f64,
    pub window_s: f64,
    pub overlap: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let r = ResampleConfig::default();
        let w = WindowConfig::default();
        Self {
            source_hz: DEVICE_RATE_HZ,
            target_hz: r.target_hz,
            taps: r.taps,
            cutoff_ratio: r.cutoff_ratio,
            window_s: w.window_s,
            overlap: w.overlap,
        }
    }
}

impl PreprocessConfig {
    pub fn resample(&self) -> ResampleConfig {
        ResampleConfig {
            target_hz: self.target_hz,
            taps: self.taps,
            cutoff_ratio: self.cutoff_ratio,
        }
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            rate_hz: self.target_hz,
            window_s: self.window_s,
            overlap: self.overlap,
        }
    }
}

/// Manifest entry for one window. Labeled subjects carry a motor label;
/// subjects without minute labels only carry their cohort group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub subject_id: String,
    /// First sample index into the subject's norm series.
    pub start: usize,
    pub start_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i32>,
    pub group: Group,
}

/// Resampled norm series per subject and the window manifest over them.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub config: PreprocessConfig,
    pub series: BTreeMap<String, [Vec<f64>; 2]>,
    pub windows: Vec<WindowRecord>,
    pub cohort: BTreeMap<String, Group>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: PreprocessConfig,
    cohort: BTreeMap<String, Group>,
}

/// Reads every subject of `cohort` from `raw_dir/<id>.csv` and preprocesses
/// it.
pub fn preprocess(
    raw_dir: &Path,
    labels: &LabelTable,
    cohort: &BTreeMap<String, Group>,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed> {
    let mut recordings = Vec::with_capacity(cohort.len());
    for id in cohort.keys() {
        let path = raw_dir.join(format!("{id}.csv"));
        log::info!("reading {}", path.display());
        recordings.push(RawRecording::read_csv(&path, id, cfg.source_hz)?);
    }
    Preprocessed::from_recordings(&recordings, labels, cohort, cfg)
}

impl Preprocessed {
    pub fn from_recordings(
        recordings: &[RawRecording],
        labels: &LabelTable,
        cohort: &BTreeMap<String, Group>,
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        let wcfg = cfg.window();
        wcfg.validate()?;
        if let Some(id) = labels.keys().find(|id| !cohort.contains_key(*id)) {
            return Err(Error::Data(format!(
                "labeled subject {id} missing from the cohort table"
            )));
        }
        let mut out = Self {
            config: *cfg,
            series: BTreeMap::new(),
            windows: Vec::new(),
            cohort: cohort.clone(),
        };
        for rec in recordings {
            let id = &rec.subject_id;
            let group = *cohort
                .get(id)
                .ok_or_else(|| Error::Data(format!("recording {id} missing from the cohort table")))?;
            let low = resample(rec, &cfg.resample())?;
            let norms = euclidean_norms(&low);
            let minutes = labels.get(id);
            for start in window_starts(norms[0].len(), &wcfg) {
                let label = match minutes {
                    Some(m) => match center_label(start, m, &wcfg) {
                        Some(l) => Some(l),
                        None => continue,
                    },
                    None => None,
                };
                out.windows.push(WindowRecord {
                    subject_id: id.clone(),
                    start,
                    start_s: start as f64 / wcfg.rate_hz,
                    label,
                    group,
                });
            }
            out.series.insert(id.clone(), norms);
        }
        out.windows
            .sort_by(|a, b| a.subject_id.cmp(&b.subject_id).then(a.start.cmp(&b.start)));
        Ok(out)
    }

    pub fn window_len(&self) -> usize {
        self.config.window().len()
    }

    /// Subjects with at least one labeled window, sorted.
    pub fn labeled_subjects(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .windows
            .iter()
            .filter(|w| w.label.is_some())
            .map(|w| &w.subject_id)
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Subjects without motor labels; they form the pretraining cohort.
    pub fn pretrain_subjects(&self) -> Vec<String> {
        let labeled: BTreeSet<String> = self.labeled_subjects().into_iter().collect();
        self.series
            .keys()
            .filter(|id| !labeled.contains(*id))
            .cloned()
            .collect()
    }

    pub fn labeled_windows<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a WindowRecord> + 'a {
        self.windows
            .iter()
            .filter(move |w| w.subject_id == subject && w.label.is_some())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let series_dir = dir.join("series");
        fs::create_dir_all(&series_dir).map_err(|e| Error::io(&series_dir, e))?;
        for (id, [a, g]) in &self.series {
            let mut data = a.clone();
            data.extend_from_slice(g);
            Tensor::new(&[2, a.len()], data)?.save(series_dir.join(format!("{id}.bin")))?;
        }
        let path = dir.join("windows.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &self.windows {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let meta = Meta {
            config: self.config,
            cohort: self.cohort.clone(),
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        let path = dir.join("windows.jsonl");
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut windows = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                windows.push(serde_json::from_str::<WindowRecord>(&line)?);
            }
        }
        let mut series = BTreeMap::new();
        for id in meta.cohort.keys() {
            let p = dir.join("series").join(format!("{id}.bin"));
            if !p.exists() {
                continue;
            }
            let t = Tensor::load(&p)?;
            if t.rank() != 2 || t.shape()[0] != 2 {
                return Err(Error::Data(format!("{}: expected a [2, T] series", p.display())));
            }
            let n = t.shape()[1];
            let data = t.into_data();
            series.insert(id.clone(), [data[..n].to_vec(), data[n..].to_vec()]);
        }
        let len = meta.config.window().len();
        for w in &windows {
            let s = series
                .get(&w.subject_id)
                .ok_or_else(|| Error::Data(format!("window references unknown subject {}", w.subject_id)))?;
            if w.start + len > s[0].len() {
                return Err(Error::Data(format!(
                    "window at {} of {} runs past the series end",
                    w.start, w.subject_id
                )));
            }
        }
        Ok(Self {
            config: meta.config,
            series,
            windows,
            cohort: meta.cohort,
        })
    }
}
