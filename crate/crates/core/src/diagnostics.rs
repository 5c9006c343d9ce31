//! Quantitative geometry measures of learned embeddings: scatter-based
//! discriminability, principal-angle alignment between class subspaces, the
//! similarity of samples to their class's dominant singular directions, and
//! the co-regularization weight sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{Domain, PartitionedBatch};
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::svd::{orthonormal_basis, principal_angle_cosines, svd};
use crate::trainer::{train, TrainConfig};

/// Guard against division by zero in scatter ratios.
const SCATTER_EPS: f64 = 1e-12;

/// Columns with norm below this are excluded from direction similarity.
const ZERO_COLUMN_TOL: f64 = 1e-12;

/// Singular-direction similarity of one class, split by labeling status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSimilarity {
    pub class: usize,
    /// Weighted cosine of correctly labeled columns (absent when none).
    pub correct: Option<f64>,
    /// Weighted cosine of incorrectly labeled columns (absent when none).
    pub incorrect: Option<f64>,
    /// Columns dropped for having (numerically) zero norm.
    pub zero_norm_excluded: usize,
}

/// Scatter, angle, and similarity measures of one embedding snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Between-class scatter, `trace(S_b) / n` on the target embedding.
    pub inter_scatter: f64,
    /// Within-class scatter, `trace(S_w) / n` on the target embedding.
    pub intra_scatter: f64,
    /// `inter_scatter / (intra_scatter + 1e-12)`.
    pub discriminant: f64,
    /// Mean principal-angle cosine between the whole source and target
    /// embedding subspaces (absent if either embedding is numerically zero).
    pub mean_p_angle_cos: Option<f64>,
    /// Mean over classes of the source-target principal-angle cosine
    /// (the diagonal of `pairwise_cos_matrix` averaged).
    pub mean_c_angle_cos: Option<f64>,
    /// Entry `(i, j)`: mean principal-angle cosine between source class `i`
    /// and target class `j`; `None` where a block is empty.
    pub pairwise_cos_matrix: Vec<Vec<Option<f64>>>,
    /// Per-class dominant-direction similarity; empty when the caller has no
    /// correctness mask to offer.
    pub dominant_similarity: Vec<ClassSimilarity>,
}

/// Trace-normalized within/between scatter of labeled columns:
/// `intra = trace(S_w)/n`, `inter = trace(S_b)/n`, and their ratio.
///
/// Classes are inferred from the labels; a single class gives
/// `inter = 0` by definition.
pub fn lda_measures(z: &Mat, labels: &[usize]) -> Result<(f64, f64, f64)> {
    if labels.len() != z.cols() {
        return Err(Error::Dimension(format!(
            "{} labels for {} columns",
            labels.len(),
            z.cols()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "scatter of an empty set is undefined".to_string(),
        ));
    }
    let k = labels.iter().max().unwrap() + 1;
    let d = z.rows();
    let n = z.cols() as f64;

    let mut class_sum = vec![vec![0.0; d]; k];
    let mut class_count = vec![0usize; k];
    let mut grand = vec![0.0; d];
    for (j, &c) in labels.iter().enumerate() {
        for (i, &v) in z.col(j).iter().enumerate() {
            class_sum[c][i] += v;
            grand[i] += v;
        }
        class_count[c] += 1;
    }
    for g in &mut grand {
        *g /= n;
    }
    let class_mean: Vec<Vec<f64>> = class_sum
        .iter()
        .zip(&class_count)
        .map(|(s, &cnt)| {
            if cnt == 0 {
                vec![0.0; d]
            } else {
                s.iter().map(|v| v / cnt as f64).collect()
            }
        })
        .collect();

    let mut intra = 0.0;
    for (j, &c) in labels.iter().enumerate() {
        intra += z
            .col(j)
            .iter()
            .zip(&class_mean[c])
            .map(|(v, m)| (v - m) * (v - m))
            .sum::<f64>();
    }
    let mut inter = 0.0;
    for (mean, &cnt) in class_mean.iter().zip(&class_count) {
        if cnt == 0 {
            continue;
        }
        inter += cnt as f64
            * mean
                .iter()
                .zip(&grand)
                .map(|(m, g)| (m - g) * (m - g))
                .sum::<f64>();
    }
    intra /= n;
    inter /= n;
    Ok((inter, intra, inter / (intra + SCATTER_EPS)))
}

/// Mean principal-angle cosine between the column spaces of two matrices,
/// `None` when either space is zero-dimensional at `rel_tol`.
fn mean_angle_cos(a: &Mat, b: &Mat, rel_tol: f64) -> Result<Option<f64>> {
    if a.cols() == 0 || b.cols() == 0 {
        return Ok(None);
    }
    let qa = orthonormal_basis(a, rel_tol)?;
    let qb = orthonormal_basis(b, rel_tol)?;
    if qa.cols() == 0 || qb.cols() == 0 {
        return Ok(None);
    }
    let cos = principal_angle_cosines(&qa, &qb)?;
    Ok(Some(cos.iter().sum::<f64>() / cos.len() as f64))
}

/// Pairwise subspace alignment: entry `(i, j)` is the mean principal-angle
/// cosine between source class `i` and target class `j`; empty blocks give
/// `None` entries rather than zeros.
pub fn principal_angle_matrix(
    batch: &PartitionedBatch,
    rel_tol: f64,
) -> Result<Vec<Vec<Option<f64>>>> {
    let k = batch.k();
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let zi_s = batch.class_domain_mat(i, Domain::Source)?;
        let mut row = Vec::with_capacity(k);
        for j in 0..k {
            let zj_t = batch.class_domain_mat(j, Domain::Target)?;
            row.push(mean_angle_cos(&zi_s, &zj_t, rel_tol)?);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Mean over classes of the source-target principal-angle cosine — the
/// average of the diagonal of [`principal_angle_matrix`]. Errors when no
/// class has both domain blocks.
pub fn classwise_domain_angle(batch: &PartitionedBatch, rel_tol: f64) -> Result<f64> {
    let matrix = principal_angle_matrix(batch, rel_tol)?;
    let diag: Vec<f64> = (0..batch.k()).filter_map(|c| matrix[c][c]).collect();
    if diag.is_empty() {
        return Err(Error::Partition(
            "no class has samples in both domains".to_string(),
        ));
    }
    Ok(diag.iter().sum::<f64>() / diag.len() as f64)
}

/// Singular-value-weighted similarity of a class's columns to its dominant
/// singular directions, split into correctly and incorrectly labeled groups.
///
/// For each left singular vector `u_j`, the group score is the mean of
/// `|cos(u_j, column)|` over the group's unit-normalized columns; the result
/// weights those scores by `sigma_j / sum(sigma)`. A group with no columns
/// (after excluding zero-norm ones) reports `None`.
pub fn dominant_direction_similarity(
    z_class: &Mat,
    correct_mask: &[bool],
) -> Result<(Option<f64>, Option<f64>, usize)> {
    if correct_mask.len() != z_class.cols() {
        return Err(Error::Dimension(format!(
            "{} mask entries for {} columns",
            correct_mask.len(),
            z_class.cols()
        )));
    }
    if z_class.cols() == 0 {
        return Ok((None, None, 0));
    }
    let dec = svd(z_class)?;
    let sigma_total: f64 = dec.sigma.iter().sum();
    if sigma_total <= 0.0 {
        return Err(Error::InvalidArgument(
            "direction similarity of a zero matrix is undefined".to_string(),
        ));
    }

    let mut excluded = 0;
    let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (j, &correct) in correct_mask.iter().enumerate() {
        if mat::norm(z_class.col(j)) <= ZERO_COLUMN_TOL {
            excluded += 1;
            log::warn!("direction similarity: column {j} has zero norm, excluded");
            continue;
        }
        groups[usize::from(!correct)].push(j);
    }

    let score = |cols: &[usize]| -> Option<f64> {
        if cols.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for (sj, &sigma) in dec.sigma.iter().enumerate() {
            let u = dec.u.col(sj);
            let mean_cos = cols
                .iter()
                .map(|&j| {
                    let col = z_class.col(j);
                    (mat::dot(u, col) / mat::norm(col)).abs()
                })
                .sum::<f64>()
                / cols.len() as f64;
            total += sigma / sigma_total * mean_cos;
        }
        Some(total)
    };
    Ok((score(&groups[0]), score(&groups[1]), excluded))
}

/// Assembles the full report from source/target embeddings and labels.
///
/// `correct_mask` marks which target columns carry the right label (present
/// only when ground truth exists); it drives the per-class dominant-direction
/// split, with target columns grouped by the labels given here.
pub fn build_report(
    z_source: &Mat,
    y_source: &[usize],
    z_target: &Mat,
    y_target: &[usize],
    k: usize,
    rel_tol: f64,
    correct_mask: Option<&[bool]>,
) -> Result<DiagnosticsReport> {
    let (inter_scatter, intra_scatter, discriminant) = lda_measures(z_target, y_target)?;

    let z = Mat::concat_cols(&[z_source, z_target])?;
    let mut domain = vec![Domain::Source; z_source.cols()];
    domain.extend(std::iter::repeat(Domain::Target).take(z_target.cols()));
    let label: Vec<Option<usize>> = y_source
        .iter()
        .chain(y_target)
        .map(|&c| Some(c))
        .collect();
    let batch = PartitionedBatch::new(z, domain, label, k)?;

    let pairwise_cos_matrix = principal_angle_matrix(&batch, rel_tol)?;
    let diag: Vec<f64> = (0..k).filter_map(|c| pairwise_cos_matrix[c][c]).collect();
    let mean_c_angle_cos = if diag.is_empty() {
        None
    } else {
        Some(diag.iter().sum::<f64>() / diag.len() as f64)
    };
    let mean_p_angle_cos = mean_angle_cos(z_source, z_target, rel_tol)?;

    let mut dominant_similarity = Vec::new();
    if let Some(mask) = correct_mask {
        if mask.len() != z_target.cols() {
            return Err(Error::Dimension(format!(
                "{} mask entries for {} target columns",
                mask.len(),
                z_target.cols()
            )));
        }
        for c in 0..k {
            let cols: Vec<usize> = (0..z_target.cols()).filter(|&j| y_target[j] == c).collect();
            if cols.is_empty() {
                dominant_similarity.push(ClassSimilarity {
                    class: c,
                    correct: None,
                    incorrect: None,
                    zero_norm_excluded: 0,
                });
                continue;
            }
            let z_class = z_target.select_cols(&cols)?;
            let class_mask: Vec<bool> = cols.iter().map(|&j| mask[j]).collect();
            let (correct, incorrect, zero_norm_excluded) =
                dominant_direction_similarity(&z_class, &class_mask)?;
            dominant_similarity.push(ClassSimilarity {
                class: c,
                correct,
                incorrect,
                zero_norm_excluded,
            });
        }
    }

    Ok(DiagnosticsReport {
        inter_scatter,
        intra_scatter,
        discriminant,
        mean_p_angle_cos,
        mean_c_angle_cos,
        pairwise_cos_matrix,
        dominant_similarity,
    })
}

/// One grid point of a co-regularization sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Ratio `lambda = lambda_tb / lambda_db` this run used.
    pub lambda: f64,
    pub target_accuracy: Option<f64>,
    /// Transferability loss of the last epoch.
    pub final_loss_tb: Option<f64>,
    /// Discriminability loss of the last epoch.
    pub final_loss_db: Option<f64>,
    /// Failure message when this run aborted; other rows are unaffected.
    pub error: Option<String>,
}

/// Trains once per grid value of `lambda = lambda_tb / lambda_db`, holding
/// `lambda_db` and everything else (data, seed) fixed. Rows come back in
/// grid order; individual failures are recorded, not propagated. Runs
/// execute in parallel on the ambient thread pool.
pub fn lambda_sweep(
    bundle: &DatasetBundle,
    base_cfg: &TrainConfig,
    lambda_grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument(
            "the sweep grid must not be empty".to_string(),
        ));
    }
    base_cfg.validate()?;
    if base_cfg.lambda_db <= 0.0 {
        return Err(Error::InvalidArgument(
            "a sweep over lambda = lambda_tb / lambda_db needs lambda_db > 0".to_string(),
        ));
    }
    if let Some(&bad) = lambda_grid.iter().find(|&&l| !(l.is_finite() && l >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "grid value {bad} is not a non-negative real"
        )));
    }

    let rows: Vec<SweepRow> = lambda_grid
        .par_iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda_tb: lambda * base_cfg.lambda_db,
                ..base_cfg.clone()
            };
            match train(bundle, &cfg) {
                Ok((_, report)) => {
                    let last = report.records.last();
                    SweepRow {
                        lambda,
                        target_accuracy: report.final_target_accuracy,
                        final_loss_tb: last.map(|r| r.loss_tb),
                        final_loss_db: last.map(|r| r.loss_db),
                        error: None,
                    }
                }
                Err(e) => SweepRow {
                    lambda,
                    target_accuracy: None,
                    final_loss_tb: None,
                    final_loss_db: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(rows)
}
