//! Dataset containers, class splits, episode sampling and synthetic data.

mod io;
mod sampler;
mod synth;

pub use io::{
    load_feature_set, read_csv, read_fsle, save_feature_set, write_csv, write_fsle, FsleFile,
    FSLE_MAGIC, FSLE_VERSION,
};
pub use sampler::{sample_episode, Episode, EpisodeIndices, EpisodeSpec, LabeledSet};
pub use synth::{synth_gaussian_dataset, synth_image_dataset, GaussianSynthConfig, ImageSynthConfig};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Labeled feature vectors with a contiguous `0..C` class-id space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Original class names, indexed by class id, when the source used other ids.
    pub class_names: Option<Vec<String>>,
    pub source: String,
}

impl FeatureSet {
    pub fn new(features: Matrix, labels: Vec<usize>, source: impl Into<String>) -> Result<Self> {
        let set = Self {
            features,
            labels,
            class_names: None,
            source: source.into(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Build from arbitrary integer labels, remapping them to `0..C` in
    /// ascending order. Original ids are kept as class names if the remap is not
    /// the identity.
    pub fn from_raw_labels(features: Matrix, raw: &[i64], source: impl Into<String>) -> Result<Self> {
        let distinct: BTreeSet<i64> = raw.iter().copied().collect();
        let map: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let identity = distinct.iter().enumerate().all(|(i, &l)| l == i as i64);
        let labels = raw.iter().map(|l| map[l]).collect();
        let mut set = Self::new(features, labels, source)?;
        if !identity {
            set.class_names = Some(distinct.iter().map(|l| l.to_string()).collect());
        }
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if n == 0 {
            return Err(Error::EmptySet("feature set has no rows".into()));
        }
        if self.labels.len() != n {
            return Err(Error::ShapeError(format!(
                "{} labels for {n} feature rows",
                self.labels.len()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::InvalidInput("feature set contains non-finite values".into()));
        }
        let c = self.num_classes();
        let present: BTreeSet<usize> = self.labels.iter().copied().collect();
        if present.len() != c {
            return Err(Error::InvalidLabel(format!(
                "class ids are not contiguous: {} distinct ids, max {}",
                present.len(),
                c - 1
            )));
        }
        if let Some(names) = &self.class_names {
            if names.len() != c {
                return Err(Error::ShapeError(format!(
                    "{} class names for {c} classes",
                    names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Row indices of every class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Rows belonging to `classes`, relabeled `0..classes.len()` in the given order.
    pub fn subset(&self, classes: &[usize]) -> Result<FeatureSet> {
        let c = self.num_classes();
        let mut remap = vec![None; c];
        for (new, &old) in classes.iter().enumerate() {
            if old >= c {
                return Err(Error::InvalidLabel(format!("class {old} not in dataset of {c} classes")));
            }
            if remap[old].is_some() {
                return Err(Error::InvalidConfig(format!("class {old} listed twice")));
            }
            remap[old] = Some(new);
        }
        let rows: Vec<usize> = (0..self.len()).filter(|&i| remap[self.labels[i]].is_some()).collect();
        let labels = rows.iter().map(|&i| remap[self.labels[i]].unwrap()).collect();
        let class_names = Some(
            classes
                .iter()
                .map(|&old| match &self.class_names {
                    Some(names) => names[old].clone(),
                    None => old.to_string(),
                })
                .collect(),
        );
        let set = FeatureSet {
            features: self.features.select_rows(&rows),
            labels,
            class_names,
            source: format!("{}[subset]", self.source),
        };
        set.validate()?;
        Ok(set)
    }
}

/// Disjoint base / validation / novel class partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: Vec<usize>,
    #[serde(default)]
    pub val_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Base,
    Val,
    Novel,
}

impl SplitSpec {
    pub fn new(base: Vec<usize>, val: Vec<usize>, novel: Vec<usize>) -> Result<Self> {
        let split = Self {
            base_classes: base,
            val_classes: val,
            novel_classes: novel,
        };
        split.validate(None)?;
        Ok(split)
    }

    /// Consecutive ranges: the first `base` ids, then `val`, then `novel`.
    pub fn contiguous(base: usize, val: usize, novel: usize) -> Self {
        Self {
            base_classes: (0..base).collect(),
            val_classes: (base..base + val).collect(),
            novel_classes: (base + val..base + val + novel).collect(),
        }
    }

    /// Checks pairwise disjointness and, given a class count, that every id exists.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (part, ids) in [
            ("base", &self.base_classes),
            ("val", &self.val_classes),
            ("novel", &self.novel_classes),
        ] {
            for &id in ids {
                if let Some(prev) = seen.insert(id, part) {
                    return Err(Error::InvalidConfig(format!(
                        "class {id} appears in both {prev} and {part} splits"
                    )));
                }
                if let Some(c) = num_classes {
                    if id >= c {
                        return Err(Error::InvalidConfig(format!(
                            "{part} split names class {id}, dataset has {c} classes"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, set: &FeatureSet, part: SplitPart) -> Result<FeatureSet> {
        self.validate(Some(set.num_classes()))?;
        let classes = match part {
            SplitPart::Base => &self.base_classes,
            SplitPart::Val => &self.val_classes,
            SplitPart::Novel => &self.novel_classes,
        };
        set.subset(classes)
    }
}
