//! Multimodal clip-feature datasets: in-memory types, the synthetic
//! generator, the on-disk feature format and the k-shot target split.

mod io;
mod split;
mod synth;

pub use io::{load_features, load_pool, read_feature_file, write_dataset, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION, MANIFEST_HEADER};
pub use split::{sample_kshot, SOURCE_TEST_FRACTION};
pub use synth::{generate_pool, generate_synthetic, SynthConfig, SynthPreset};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    /// Class index used by the domain discriminators.
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// One video: paired RGB and flow clip features (`T x d_in` each).
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub rgb: Matrix,
    pub flow: Matrix,
    pub label: usize,
    pub domain: Domain,
}

impl MultimodalSample {
    pub fn clips(&self) -> usize {
        self.rgb.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub source_train: Vec<MultimodalSample>,
    /// Held-out source videos, used only for shift analysis.
    pub source_test: Vec<MultimodalSample>,
    /// Exactly `k` labelled videos of every class.
    pub target_train: Vec<MultimodalSample>,
    pub target_test: Vec<MultimodalSample>,
    pub classes: usize,
    pub k: usize,
}

impl DatasetSplit {
    /// Splits a pool of source and target videos: target videos by
    /// [`sample_kshot`], source videos into train and a held-out
    /// [`SOURCE_TEST_FRACTION`] per class.
    pub fn from_pool(pool: Vec<MultimodalSample>, classes: usize, k: usize, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyDataset("no samples in pool".into()));
        }
        let (source, target): (Vec<_>, Vec<_>) = pool.into_iter().partition(|s| s.domain == Domain::Source);
        if target.is_empty() {
            return Err(Error::EmptyDataset("no target-domain samples".into()));
        }
        if source.is_empty() {
            return Err(Error::EmptyDataset("no source-domain samples".into()));
        }
        let (target_train, target_test) = sample_kshot(&target, k, seed)?;
        let (source_train, source_test) = split::holdout(&source, SOURCE_TEST_FRACTION, seed ^ 0x5eed);
        let split = DatasetSplit {
            source_train,
            source_test,
            target_train,
            target_test,
            classes,
            k,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut counts = vec![0usize; self.classes];
        for s in &self.target_train {
            *counts
                .get_mut(s.label)
                .ok_or_else(|| Error::Config(format!("label {} >= {} classes", s.label, self.classes)))? += 1;
        }
        if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n != self.k) {
            return Err(Error::Sampling {
                class: c,
                available: n,
                required: self.k,
            });
        }
        let train_ids: HashSet<&str> = self.target_train.iter().map(|s| s.id.as_str()).collect();
        if let Some(s) = self.target_test.iter().find(|s| train_ids.contains(s.id.as_str())) {
            return Err(Error::State(format!("sample {} is in both target train and test", s.id)));
        }
        for s in self.all() {
            if s.label >= self.classes {
                return Err(Error::Config(format!("sample {} has label {} >= {}", s.id, s.label, self.classes)));
            }
            if s.rgb.rows() != s.flow.rows() {
                return Err(Error::load(&s.id, "rgb and flow clip counts differ"));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &MultimodalSample> {
        self.source_train
            .iter()
            .chain(&self.source_test)
            .chain(&self.target_train)
            .chain(&self.target_test)
    }
}

/// A batch of videos stacked row-wise: `B*T x d_in` per modality.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Matrix,
    pub flow: Matrix,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
    pub clips: usize,
}

impl Batch {
    pub fn from_samples(samples: &[&MultimodalSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
        let clips = first.clips();
        for s in samples {
            if s.rgb.shape() != first.rgb.shape() || s.flow.shape() != first.flow.shape() {
                return Err(Error::dim("batch", first.rgb.shape(), s.rgb.shape()));
            }
        }
        let rgb: Vec<&Matrix> = samples.iter().map(|s| &s.rgb).collect();
        let flow: Vec<&Matrix> = samples.iter().map(|s| &s.flow).collect();
        Ok(Batch {
            rgb: Matrix::vstack(&rgb)?,
            flow: Matrix::vstack(&flow)?,
            labels: samples.iter().map(|s| s.label).collect(),
            domains: samples.iter().map(|s| s.domain).collect(),
            clips,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
