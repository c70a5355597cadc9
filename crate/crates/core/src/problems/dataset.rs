use crate::error::{Error, Result};

/// Per-sample supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Labels { labels: Vec<usize>, classes: usize },
}

/// Row-major feature matrix plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    targets: Targets,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, targets: Targets) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::invalid("features", "length is not a multiple of dim"));
        }
        let n = features.len() / dim;
        if n == 0 {
            return Err(Error::invalid("features", "dataset must hold at least one sample"));
        }
        match &targets {
            Targets::Real(b) if b.len() != n => {
                return Err(Error::invalid("targets", "one target per sample required"))
            }
            Targets::Labels { labels, classes } => {
                if labels.len() != n {
                    return Err(Error::invalid("targets", "one label per sample required"));
                }
                if *classes == 0 || labels.iter().any(|&y| y >= *classes) {
                    return Err(Error::invalid("targets", "label outside [0, classes)"));
                }
            }
            _ => {}
        }
        Ok(Self {
            features,
            dim,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Labels { classes, .. } => Some(classes),
            Targets::Real(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Copies the given samples into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("indices", format!("sample {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Real(b) => Targets::Real(indices.iter().map(|&i| b[i]).collect()),
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        };
        Dataset::new(features, self.dim, targets)
    }
}
