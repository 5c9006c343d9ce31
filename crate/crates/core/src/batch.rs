//! Column-partitioned batches: one feature matrix plus per-column domain and
//! (possibly missing) class labels, with the index lists the objectives need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Which domain a column belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Source, Domain::Target];

    fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// A feature matrix (one sample per column) together with its partition into
/// `k` classes and two domains. Labeled columns appear in exactly one class
/// list; unlabeled columns appear only in the whole-batch view.
///
/// The partition is immutable; [`PartitionedBatch::with_features`] re-uses it
/// with a new feature matrix (e.g. embeddings recomputed after a training
/// step).
#[derive(Debug, Clone)]
pub struct PartitionedBatch {
    z: Mat,
    domain: Vec<Domain>,
    label: Vec<Option<usize>>,
    k: usize,
    class_cols: Vec<Vec<usize>>,
    class_domain_cols: Vec<[Vec<usize>; 2]>,
    unlabeled_cols: Vec<usize>,
}

impl PartitionedBatch {
    /// Builds a batch, checking that lengths agree and labels are in range.
    pub fn new(z: Mat, domain: Vec<Domain>, label: Vec<Option<usize>>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Partition("class count k must be >= 1".to_string()));
        }
        let n = z.cols();
        if domain.len() != n || label.len() != n {
            return Err(Error::Partition(format!(
                "feature matrix has {n} columns but {} domain tags and {} labels",
                domain.len(),
                label.len()
            )));
        }
        let mut class_cols = vec![Vec::new(); k];
        let mut class_domain_cols = vec![[Vec::new(), Vec::new()]; k];
        let mut unlabeled_cols = Vec::new();
        for j in 0..n {
            match label[j] {
                Some(c) => {
                    if c >= k {
                        return Err(Error::Partition(format!(
                            "column {j} has label {c}, outside 0..{k}"
                        )));
                    }
                    class_cols[c].push(j);
                    class_domain_cols[c][domain[j].index()].push(j);
                }
                None => unlabeled_cols.push(j),
            }
        }
        Ok(PartitionedBatch {
            z,
            domain,
            label,
            k,
            class_cols,
            class_domain_cols,
            unlabeled_cols,
        })
    }

    /// Same partition over a new feature matrix with the same column count.
    pub fn with_features(&self, z: Mat) -> Result<Self> {
        if z.cols() != self.z.cols() {
            return Err(Error::Partition(format!(
                "replacement features have {} columns, batch has {}",
                z.cols(),
                self.z.cols()
            )));
        }
        Ok(PartitionedBatch {
            z,
            domain: self.domain.clone(),
            label: self.label.clone(),
            k: self.k,
            class_cols: self.class_cols.clone(),
            class_domain_cols: self.class_domain_cols.clone(),
            unlabeled_cols: self.unlabeled_cols.clone(),
        })
    }

    pub fn features(&self) -> &Mat {
        &self.z
    }

    /// Number of columns.
    pub fn n(&self) -> usize {
        self.z.cols()
    }

    /// Feature dimension (rows).
    pub fn dim(&self) -> usize {
        self.z.rows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domain
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.label
    }

    pub fn n_in_domain(&self, d: Domain) -> usize {
        self.domain.iter().filter(|&&x| x == d).count()
    }

    /// Columns labeled with class `c` (both domains, ascending by position).
    pub fn class_cols(&self, c: usize) -> &[usize] {
        &self.class_cols[c]
    }

    /// Columns labeled with class `c` within one domain.
    pub fn class_domain_cols(&self, c: usize, d: Domain) -> &[usize] {
        &self.class_domain_cols[c][d.index()]
    }

    /// Columns with no label.
    pub fn unlabeled_cols(&self) -> &[usize] {
        &self.unlabeled_cols
    }

    /// Submatrix of the columns labeled with class `c`.
    pub fn class_mat(&self, c: usize) -> Result<Mat> {
        self.z.select_cols(&self.class_cols[c])
    }

    /// Submatrix of the columns labeled with class `c` in domain `d`.
    pub fn class_domain_mat(&self, c: usize, d: Domain) -> Result<Mat> {
        self.z.select_cols(&self.class_domain_cols[c][d.index()])
    }

    /// Submatrix of all columns in domain `d` (labeled or not).
    pub fn domain_mat(&self, d: Domain) -> Result<Mat> {
        let cols: Vec<usize> = (0..self.n()).filter(|&j| self.domain[j] == d).collect();
        self.z.select_cols(&cols)
    }
}
