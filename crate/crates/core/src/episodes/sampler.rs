use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::episodes::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::{sample_normal, Matrix, RngStream};

/// Shape of an N-way K-shot episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class.
    #[serde(default = "default_queries")]
    pub q_query: usize,
    /// Auxiliary unlabeled examples per class; 0 for purely transductive episodes.
    #[serde(default)]
    pub m_unlabeled: usize,
    /// Explicit per-class query counts, by position in the drawn class order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<Vec<usize>>,
    /// When set, each class's examples are split once (dataset order) into a
    /// labeled head of this fraction and an unlabeled tail. Support and query are
    /// drawn from the head, auxiliary examples from the tail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_fraction: Option<f64>,
    /// Scale of a per-episode non-negative offset added to every feature of the
    /// episode, simulating task-level distribution drift. 0 disables it.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub task_shift: f64,
}

fn default_queries() -> usize {
    15
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self::new(5, 1, 15)
    }
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Self {
        Self {
            n_way,
            k_shot,
            q_query,
            m_unlabeled: 0,
            imbalance: None,
            labeled_fraction: None,
            task_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::InvalidConfig(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(Error::InvalidConfig("k_shot must be >= 1".into()));
        }
        if let Some(counts) = &self.imbalance {
            if counts.len() != self.n_way {
                return Err(Error::InvalidConfig(format!(
                    "imbalance lists {} query counts for {} classes",
                    counts.len(),
                    self.n_way
                )));
            }
        }
        if let Some(f) = self.labeled_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidConfig(format!("labeled_fraction must be in (0,1), got {f}")));
            }
        }
        if !(self.task_shift >= 0.0 && self.task_shift.is_finite()) {
            return Err(Error::InvalidConfig("task_shift must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Query count for the class drawn at `position`.
    pub fn queries_at(&self, position: usize) -> usize {
        match &self.imbalance {
            Some(counts) => counts[position],
            None => self.q_query,
        }
    }

    fn max_queries(&self) -> usize {
        match &self.imbalance {
            Some(counts) => counts.iter().copied().max().unwrap_or(0),
            None => self.q_query,
        }
    }

    /// (labeled pool, unlabeled pool) of one class under this spec.
    fn pools<'a>(&self, indices: &'a [usize]) -> (&'a [usize], &'a [usize]) {
        match self.labeled_fraction {
            Some(f) => {
                let head = ((indices.len() as f64) * f).floor() as usize;
                indices.split_at(head)
            }
            None => (indices, &[]),
        }
    }

    fn check_class(&self, class: usize, indices: &[usize], queries: usize) -> Result<()> {
        let (labeled, unlabeled) = self.pools(indices);
        let (available, required) = if self.labeled_fraction.is_some() {
            if unlabeled.len() < self.m_unlabeled {
                (unlabeled.len(), self.m_unlabeled)
            } else {
                (labeled.len(), self.k_shot + queries)
            }
        } else {
            (indices.len(), self.k_shot + queries + self.m_unlabeled)
        };
        if available < required {
            return Err(Error::InfeasibleEpisode {
                class,
                available,
                required,
            });
        }
        Ok(())
    }

    /// Checks that every class of `set` could serve at any position of an episode.
    pub fn check_feasible(&self, set: &FeatureSet) -> Result<()> {
        self.validate()?;
        let c = set.num_classes();
        if self.n_way > c {
            return Err(Error::InvalidConfig(format!(
                "{}-way episodes from a dataset of {c} classes",
                self.n_way
            )));
        }
        for (class, indices) in set.class_indices().iter().enumerate() {
            self.check_class(class, indices, self.max_queries())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::empty(dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Dataset row indices that made up an episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeIndices {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// One N-way K-shot task with labels remapped to `0..n_way`.
///
/// Unlabeled labels are kept for scoring pseudo-label quality; inference never
/// sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    /// Dataset class id of each episode class.
    pub class_ids: Vec<usize>,
    pub support: LabeledSet,
    pub query: LabeledSet,
    pub unlabeled: LabeledSet,
    pub indices: EpisodeIndices,
}

/// Draw one episode. Classes are drawn without replacement, then per class the
/// support, query and unlabeled examples, all distinct.
pub fn sample_episode(set: &FeatureSet, spec: &EpisodeSpec, stream: RngStream) -> Result<Episode> {
    spec.validate()?;
    let by_class = set.class_indices();
    if spec.n_way > by_class.len() {
        return Err(Error::InvalidConfig(format!(
            "{}-way episodes from a dataset of {} classes",
            spec.n_way,
            by_class.len()
        )));
    }
    let mut rng = stream.rng();
    let classes = index::sample(&mut rng, by_class.len(), spec.n_way).into_vec();

    let mut idx = EpisodeIndices::default();
    let (mut s_lab, mut q_lab, mut u_lab) = (Vec::new(), Vec::new(), Vec::new());
    for (pos, &class) in classes.iter().enumerate() {
        let queries = spec.queries_at(pos);
        let pool = &by_class[class];
        spec.check_class(class, pool, queries)?;
        let (labeled, unlabeled) = spec.pools(pool);
        let labeled_take = if spec.labeled_fraction.is_some() {
            spec.k_shot + queries
        } else {
            spec.k_shot + queries + spec.m_unlabeled
        };
        let drawn: Vec<usize> = index::sample(&mut rng, labeled.len(), labeled_take)
            .into_iter()
            .map(|i| labeled[i])
            .collect();
        idx.support.extend_from_slice(&drawn[..spec.k_shot]);
        idx.query.extend_from_slice(&drawn[spec.k_shot..spec.k_shot + queries]);
        s_lab.extend(std::iter::repeat_n(pos, spec.k_shot));
        q_lab.extend(std::iter::repeat_n(pos, queries));
        if spec.labeled_fraction.is_some() {
            let aux = index::sample(&mut rng, unlabeled.len(), spec.m_unlabeled)
                .into_iter()
                .map(|i| unlabeled[i]);
            idx.unlabeled.extend(aux);
        } else {
            idx.unlabeled.extend_from_slice(&drawn[spec.k_shot + queries..]);
        }
        u_lab.extend(std::iter::repeat_n(pos, spec.m_unlabeled));
    }

    let mut support = set.features.select_rows(&idx.support);
    let mut query = set.features.select_rows(&idx.query);
    let mut unlabeled = set.features.select_rows(&idx.unlabeled);
    if spec.task_shift > 0.0 {
        let shift: Vec<f64> = (0..set.dim())
            .map(|_| sample_normal(&mut rng).abs() * spec.task_shift)
            .collect();
        for m in [&mut support, &mut query, &mut unlabeled] {
            for i in 0..m.nrows() {
                for (v, s) in m.row_mut(i).iter_mut().zip(&shift) {
                    *v += s;
                }
            }
        }
    }

    Ok(Episode {
        n_way: spec.n_way,
        class_ids: classes,
        support: LabeledSet {
            features: support,
            labels: s_lab,
        },
        query: LabeledSet {
            features: query,
            labels: q_lab,
        },
        unlabeled: LabeledSet {
            features: unlabeled,
            labels: u_lab,
        },
        indices: idx,
    })
}
