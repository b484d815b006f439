use crate::error::{Error, Result};

/// Dense feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    id: String,
    num_features: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
    class_index: Vec<Vec<usize>>,
    sparse: Option<SparseRows>,
}

/// Compressed rows, kept when most features are exactly zero (MNIST pixels).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SparseRows {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl SparseRows {
    pub fn row(&self, n: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[n]..self.row_ptr[n + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }
}

const SPARSE_DENSITY: f64 = 0.3;

impl Dataset {
    /// Build a dataset from row-major features (`labels.len()` rows).
    pub fn new(
        id: impl Into<String>,
        features: Vec<f64>,
        num_features: usize,
        labels: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_features == 0 || num_classes == 0 {
            return Err(Error::Data(
                "dataset needs at least one feature and one class".into(),
            ));
        }
        if features.len() != labels.len() * num_features {
            return Err(Error::Data(format!(
                "feature buffer holds {} values, expected {} rows x {} features",
                features.len(),
                labels.len(),
                num_features
            )));
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature in row {}",
                bad / num_features
            )));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (n, &y) in labels.iter().enumerate() {
            let slot = class_index.get_mut(y as usize).ok_or_else(|| {
                Error::Data(format!(
                    "label {y} at row {n} is outside [0, {num_classes})"
                ))
            })?;
            slot.push(n);
        }
        let nnz = features.iter().filter(|v| **v != 0.0).count();
        let sparse = (!features.is_empty()
            && (nnz as f64) < SPARSE_DENSITY * features.len() as f64)
            .then(|| {
                let mut row_ptr = Vec::with_capacity(labels.len() + 1);
                let mut cols = Vec::with_capacity(nnz);
                let mut vals = Vec::with_capacity(nnz);
                row_ptr.push(0);
                for row in features.chunks_exact(num_features) {
                    for (p, &v) in row.iter().enumerate() {
                        if v != 0.0 {
                            cols.push(p as u32);
                            vals.push(v);
                        }
                    }
                    row_ptr.push(cols.len());
                }
                SparseRows {
                    row_ptr,
                    cols,
                    vals,
                }
            });
        Ok(Self {
            id: id.into(),
            num_features,
            num_classes,
            features,
            labels,
            class_index,
            sparse,
        })
    }

    pub(crate) fn sparse(&self) -> Option<&SparseRows> {
        self.sparse.as_ref()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.features[n * self.num_features..(n + 1) * self.num_features]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Example indices for each class; together they partition `0..len()`.
    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    /// New dataset restricted to `indices` (in the given order).
    pub fn select(&self, id: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &n in indices {
            if n >= self.len() {
                return Err(Error::Range {
                    index: n,
                    len: self.len(),
                });
            }
            features.extend_from_slice(self.row(n));
            labels.push(self.labels[n]);
        }
        Self::new(id, features, self.num_features, labels, self.num_classes)
    }

    pub(crate) fn check_subset(&self, subset: Option<&[usize]>) -> Result<()> {
        if let Some(idx) = subset {
            if let Some(&bad) = idx.iter().find(|&&n| n >= self.len()) {
                return Err(Error::Range {
                    index: bad,
                    len: self.len(),
                });
            }
        }
        Ok(())
    }
}
