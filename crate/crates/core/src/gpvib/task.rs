use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TaskKind {
    Regression,
    Classification { n_classes: usize },
}

impl TaskKind {
    /// Number of latent GP functions: 1 for regression, `N` for classification.
    pub fn n_outputs(self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification { n_classes } => n_classes,
        }
    }
}

/// One episode: a support set to adapt on and a query set to score.
///
/// Targets are stored as reals; for classification they hold the integer
/// labels `0..N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub x_support: Matrix,
    pub y_support: Vec<f64>,
    pub x_query: Matrix,
    pub y_query: Vec<f64>,
    pub kind: TaskKind,
}

impl Task {
    pub fn new(x_support: Matrix, y_support: Vec<f64>, x_query: Matrix, y_query: Vec<f64>, kind: TaskKind) -> Result<Self> {
        if x_support.rows() != y_support.len() || x_query.rows() != y_query.len() {
            return Err(Error::DimensionMismatch(format!(
                "support {}x{} with {} targets, query {}x{} with {} targets",
                x_support.rows(),
                x_support.cols(),
                y_support.len(),
                x_query.rows(),
                x_query.cols(),
                y_query.len()
            )));
        }
        if x_support.cols() != x_query.cols() {
            return Err(Error::DimensionMismatch(format!(
                "support inputs have {} columns, query inputs {}",
                x_support.cols(),
                x_query.cols()
            )));
        }
        if !x_support.is_finite() || !x_query.is_finite() || !y_support.iter().chain(&y_query).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("task data".into()));
        }
        let task = Self { x_support, y_support, x_query, y_query, kind };
        if let TaskKind::Classification { n_classes } = kind {
            if n_classes == 0 {
                return Err(Error::Invalid("classification needs at least one class".into()));
            }
            labels(&task.y_support, n_classes)?;
            labels(&task.y_query, n_classes)?;
        }
        Ok(task)
    }

    pub fn n_support(&self) -> usize {
        self.y_support.len()
    }

    pub fn n_query(&self) -> usize {
        self.y_query.len()
    }

    pub fn input_dim(&self) -> usize {
        self.x_support.cols()
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.kind {
            TaskKind::Classification { n_classes } => Some(n_classes),
            TaskKind::Regression => None,
        }
    }

    pub fn support_labels(&self) -> Result<Vec<usize>> {
        labels(&self.y_support, self.kind.n_outputs())
    }

    pub fn query_labels(&self) -> Result<Vec<usize>> {
        labels(&self.y_query, self.kind.n_outputs())
    }

    /// The first `k` support points (same query set).
    pub fn truncate_support(&self, k: usize) -> Self {
        let k = k.min(self.n_support());
        let idx: Vec<usize> = (0..k).collect();
        Self {
            x_support: self.x_support.select_rows(&idx),
            y_support: self.y_support[..k].to_vec(),
            x_query: self.x_query.clone(),
            y_query: self.y_query.clone(),
            kind: self.kind,
        }
    }
}

/// Interprets real targets as class labels in `0..n_classes`.
pub fn labels(y: &[f64], n_classes: usize) -> Result<Vec<usize>> {
    y.iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Invalid(format!("class label {v} is not a non-negative integer")));
            }
            let l = v as usize;
            if l >= n_classes {
                return Err(Error::LabelOutOfRange { label: l, n_classes });
            }
            Ok(l)
        })
        .collect()
}
