use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FoldPlan;
use crate::error::{Error, Result};

/// A pipeline stage that consumes samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainQuantileFit,
    PretrainBatches,
    QuantileFit,
    ClassWeights,
    TrainBatches,
    Validation,
    TestPrediction,
}

impl Stage {
    /// Stages whose inputs shape the model or its preprocessing.
    pub fn fits(self) -> bool {
        !matches!(self, Stage::Validation | Stage::TestPrediction)
    }
}

/// Which subjects' samples flowed into one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub subjects: Vec<String>,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub entries: Vec<ProvenanceEntry>,
}

impl Audit {
    pub fn record(
        &mut self,
        stage: Stage,
        fold: Option<usize>,
        subjects: impl IntoIterator<Item = String>,
        samples: usize,
    ) {
        let subjects: BTreeSet<String> = subjects.into_iter().collect();
        self.entries.push(ProvenanceEntry {
            stage,
            fold,
            subjects: subjects.into_iter().collect(),
            samples,
        });
    }

    pub fn extend(&mut self, other: Audit) {
        self.entries.extend(other.entries);
    }

    /// Every fitting stage of a fold excludes the fold's test subject, and
    /// fold-independent stages exclude every test subject.
    pub fn check(&self, folds: &[FoldPlan]) -> Result<()> {
        let all_tests: BTreeSet<&str> = folds.iter().map(|f| f.test_subject.as_str()).collect();
        for e in self.entries.iter().filter(|e| e.stage.fits()) {
            let leaked: Vec<&String> = match e.fold {
                Some(id) => {
                    let plan = folds
                        .iter()
                        .find(|f| f.fold_id == id)
                        .ok_or_else(|| Error::Contract(format!("audit entry for unknown fold {id}")))?;
                    e.subjects.iter().filter(|s| **s == plan.test_subject).collect()
                }
                None => e.subjects.iter().filter(|s| all_tests.contains(s.as_str())).collect(),
            };
            if !leaked.is_empty() {
                return Err(Error::Contract(format!(
                    "leakage: {:?} of fold {:?} used test subjects {leaked:?}",
                    e.stage, e.fold
                )));
            }
        }
        for plan in folds {
            let seen = |stage: Stage| {
                self.entries
                    .iter()
                    .any(|e| e.stage == stage && e.fold == Some(plan.fold_id))
            };
            for stage in [Stage::QuantileFit, Stage::ClassWeights, Stage::TrainBatches] {
                if !seen(stage) {
                    return Err(Error::Contract(format!(
                        "fold {} has no provenance for {stage:?}",
                        plan.fold_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { entries })
    }
}
