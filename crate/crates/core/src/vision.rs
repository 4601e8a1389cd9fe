//! Image feature providers: precomputed vectors from a text file, or the
//! deterministic synthetic encoder used to generate paired corpora.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{synthetic_features, InstructionSample};
use crate::kg_schema::Triplet;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no image features for sample {0}")]
    MissingFeatures(String),
    #[error("features for {id} have length {got}, expected {expected}")]
    Dim { id: String, expected: usize, got: usize },
    #[error("feature file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = FeatureError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
enum Backing {
    File(BTreeMap<String, Vec<f64>>),
    Synthetic {
        findings: BTreeMap<String, Vec<Triplet>>,
        noise_sigma: f64,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    FileBacked,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSource {
    d_vis: usize,
    backing: Backing,
}

impl FeatureSource {
    /// In-memory vectors keyed by sample id.
    pub fn from_map(d_vis: usize, index: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (id, v) in &index {
            if v.len() != d_vis {
                return Err(FeatureError::Dim {
                    id: id.clone(),
                    expected: d_vis,
                    got: v.len(),
                });
            }
        }
        Ok(Self {
            d_vis,
            backing: Backing::File(index),
        })
    }

    /// Synthetic encoder over the findings of `samples`.
    pub fn synthetic(samples: &[InstructionSample], d_vis: usize, noise_sigma: f64, seed: u64) -> Self {
        let findings = samples
            .iter()
            .map(|s| (s.id.clone(), s.output_triplets.triplets.clone()))
            .collect();
        Self {
            d_vis,
            backing: Backing::Synthetic {
                findings,
                noise_sigma,
                seed,
            },
        }
    }

    pub fn kind(&self) -> FeatureKind {
        match self.backing {
            Backing::File(_) => FeatureKind::FileBacked,
            Backing::Synthetic { .. } => FeatureKind::Synthetic,
        }
    }

    pub fn d_vis(&self) -> usize {
        self.d_vis
    }

    pub fn len(&self) -> usize {
        match &self.backing {
            Backing::File(m) => m.len(),
            Backing::Synthetic { findings, .. } => findings.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features_for(&self, sample_id: &str) -> Result<Vec<f64>> {
        let missing = || FeatureError::MissingFeatures(sample_id.to_string());
        match &self.backing {
            Backing::File(m) => m.get(sample_id).cloned().ok_or_else(missing),
            Backing::Synthetic {
                findings,
                noise_sigma,
                seed,
            } => {
                let t = findings.get(sample_id).ok_or_else(missing)?;
                Ok(synthetic_features(t, sample_id, self.d_vis, *noise_sigma, *seed))
            }
        }
    }

    /// Fill `image_features` of every sample from this source.
    pub fn attach(&self, samples: &mut [InstructionSample]) -> Result<()> {
        for s in samples {
            s.image_features = Some(self.features_for(&s.id)?);
        }
        Ok(())
    }

    /// Header `d_vis=<int>`, then one `id v1 v2 ...` line per sample with
    /// values written as 32-bit floats.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let d_vis: usize = header
            .trim()
            .strip_prefix("d_vis=")
            .and_then(|v| v.parse().ok())
            .ok_or(FeatureError::Format {
                line: 1,
                msg: format!("expected d_vis=<int>, found {header:?}"),
            })?;
        let mut index = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(id) = parts.next() else { continue };
            let values = parts
                .map(|v| v.parse::<f32>().map(f64::from))
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| FeatureError::Format {
                    line: i + 2,
                    msg: e.to_string(),
                })?;
            if values.len() != d_vis {
                return Err(FeatureError::Dim {
                    id: id.to_string(),
                    expected: d_vis,
                    got: values.len(),
                });
            }
            index.insert(id.to_string(), values);
        }
        Self::from_map(d_vis, index)
    }

    pub fn save(&self, path: &Path, ids: &[String]) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "d_vis={}", self.d_vis)?;
        for id in ids {
            write!(out, "{id}")?;
            for v in self.features_for(id)? {
                write!(out, " {}", v as f32)?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}
