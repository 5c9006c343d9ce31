//! Nuclear-norm transferability/discriminability objectives, their
//! subgradients, and the closed-form bounds they obey.
//!
//! For a batch with per-class submatrices `Z_i` (split into source/target
//! halves `Z_i^s`, `Z_i^t`) and whole-batch matrix `Z`:
//!
//! * transferability: `L_TB = sum_i ( |Z_i^s|* + |Z_i^t|* - |Z_i|* )`,
//!   maximized when each class's source and target spans coincide;
//! * discriminability: `L_DB = sum_i |Z_i|* - |Z|*`, minimized (to zero)
//!   when class spans are mutually orthogonal;
//! * combined: `L_GO = lambda_db * L_DB - lambda_tb * L_TB`, to be minimized.
//!
//! `|.|*` is the nuclear norm. Rank-based counterparts of the first two serve
//! as integer sanity checks. Per-class terms are accumulated in ascending
//! class order so results are bit-stable.

use serde::{Deserialize, Serialize};

use crate::batch::{Domain, PartitionedBatch};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::svd::{numerical_rank, svd};

/// `2 - sqrt(2)`, the per-dimension constant in the transferability bound.
const TWO_MINUS_SQRT2: f64 = 2.0 - std::f64::consts::SQRT_2;

/// Weights and numerical knobs for the geometric objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoConfig {
    /// Weight of the transferability term (>= 0).
    pub lambda_tb: f64,
    /// Weight of the discriminability term (>= 0).
    pub lambda_db: f64,
    /// Spectral-norm scale used when evaluating the theoretical bounds.
    /// Never enforced on embeddings during training.
    pub alpha: f64,
    /// Relative threshold for numerical rank decisions.
    pub rel_tol: f64,
}

impl Default for GoConfig {
    fn default() -> Self {
        GoConfig {
            lambda_tb: 1.0,
            lambda_db: 1.0,
            alpha: 1.0,
            rel_tol: 1e-10,
        }
    }
}

/// Weighting regime of the combined objective, classified by the ratio
/// `lambda = lambda_tb / lambda_db` with thresholds at `0` and `1 + sqrt(2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `lambda = 0`: only discriminability is optimized.
    DiscriminabilityOnly,
    /// `0 < lambda <= 1 + sqrt(2)`: both terms matter.
    Balance,
    /// `lambda > 1 + sqrt(2)` (including `lambda_db = 0`): transferability
    /// dominates and can collapse class structure.
    TransferabilityDominant,
}

impl GoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tb >= 0.0 && self.lambda_db >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_tb and lambda_db must be >= 0 (got {}, {})",
                self.lambda_tb, self.lambda_db
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be > 0 (got {})",
                self.alpha
            )));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rel_tol must be > 0 (got {})",
                self.rel_tol
            )));
        }
        Ok(())
    }

    /// `lambda_tb / lambda_db`; `None` when both are zero or the ratio is
    /// infinite (`lambda_db = 0`).
    pub fn lambda_ratio(&self) -> Option<f64> {
        if self.lambda_db > 0.0 {
            Some(self.lambda_tb / self.lambda_db)
        } else {
            None
        }
    }

    pub fn regime(&self) -> Regime {
        if self.lambda_tb == 0.0 {
            Regime::DiscriminabilityOnly
        } else {
            match self.lambda_ratio() {
                Some(l) if l <= 1.0 + std::f64::consts::SQRT_2 => Regime::Balance,
                _ => Regime::TransferabilityDominant,
            }
        }
    }
}

/// How to treat classes that are too thin for a meaningful per-class
/// transferability term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbClassPolicy {
    /// Error when a class is missing from either domain (the objectives'
    /// documented contract).
    Strict,
    /// Skip (and record) the transferability term of classes with fewer than
    /// `min_cols_per_domain` columns in either domain, and the
    /// discriminability term of empty classes. Used inside training epochs
    /// where pseudo-label selection may thin a class out.
    SkipThin { min_cols_per_domain: usize },
}

/// Losses, subgradient, and bookkeeping from one evaluation of the combined
/// objective on a batch.
#[derive(Debug, Clone)]
pub struct GoTerms {
    pub loss_tb: f64,
    pub loss_db: f64,
    /// `lambda_db * loss_db - lambda_tb * loss_tb`.
    pub loss_go: f64,
    /// Subgradient of `loss_go` with respect to the feature matrix.
    pub grad: Mat,
    /// Classes whose transferability term was skipped under
    /// [`TbClassPolicy::SkipThin`].
    pub skipped_tb_classes: Vec<usize>,
    /// Classes whose discriminability term was skipped (empty classes).
    pub skipped_db_classes: Vec<usize>,
    /// Per-class transferability terms (`None` for skipped classes), in
    /// class order. Sums to `loss_tb`.
    pub per_class_tb: Vec<Option<f64>>,
    /// Per-class `max(|Z_c^s|_sigma, |Z_c^t|_sigma)`, available for classes
    /// whose transferability term was evaluated. Feeds bound-slack reports.
    pub class_sigma_max: Vec<Option<f64>>,
    /// Largest singular value of the whole batch (an upper bound on every
    /// block spectral norm).
    pub batch_sigma_max: f64,
}

/// Nuclear norm, its subgradient `U_r V_r^T`, and the largest singular value
/// from one decomposition.
fn nuclear_with_grad(m: &Mat, rel_tol: f64) -> Result<(f64, Mat, f64)> {
    let dec = svd(m)?;
    let r = dec.rank(m.rows(), m.cols(), rel_tol);
    let value = dec.sigma.iter().sum();
    let sigma_max = dec.sigma.first().copied().unwrap_or(0.0);
    let idx: Vec<usize> = (0..r).collect();
    let grad = dec
        .u
        .select_cols(&idx)?
        .matmul(&dec.v.select_cols(&idx)?.transpose())?;
    Ok((value, grad, sigma_max))
}

/// Subgradient of the nuclear norm: `U_r V_r^T` with `r` the numerical rank
/// at `rel_tol`. At the zero matrix this returns the zero matrix, a valid
/// subgradient choice.
pub fn grad_nuclear(m: &Mat, rel_tol: f64) -> Result<Mat> {
    Ok(nuclear_with_grad(m, rel_tol)?.1)
}

/// Evaluates the combined objective and its subgradient in one pass.
///
/// Every per-class decomposition feeds both the loss and the gradient, so the
/// two are always consistent — including which classes were skipped.
pub fn eval_go(batch: &PartitionedBatch, cfg: &GoConfig, policy: TbClassPolicy) -> Result<GoTerms> {
    cfg.validate()?;
    let z = batch.features();
    let mut grad = Mat::zeros(batch.dim(), batch.n());
    let mut loss_tb = 0.0;
    let mut loss_db = 0.0;
    let mut skipped_tb_classes = Vec::new();
    let mut skipped_db_classes = Vec::new();
    let mut per_class_tb = vec![None; batch.k()];
    let mut class_sigma_max = vec![None; batch.k()];

    for c in 0..batch.k() {
        let cols = batch.class_cols(c);
        if cols.is_empty() {
            match policy {
                TbClassPolicy::Strict => {
                    return Err(Error::Partition(format!("class {c} has no columns")));
                }
                TbClassPolicy::SkipThin { .. } => {
                    skipped_db_classes.push(c);
                    skipped_tb_classes.push(c);
                    continue;
                }
            }
        }

        // Discriminability: + |Z_c|* (gradient coefficient +lambda_db).
        let class_mat = batch.class_mat(c)?;
        let (class_nuc, class_grad, _) = nuclear_with_grad(&class_mat, cfg.rel_tol)?;
        loss_db += class_nuc;
        if cfg.lambda_db != 0.0 {
            grad.scatter_add_cols(cols, &class_grad, cfg.lambda_db)?;
        }

        // Transferability: + |Z_c^s|* + |Z_c^t|* - |Z_c|*, entering loss_go
        // with weight -lambda_tb.
        let s_cols = batch.class_domain_cols(c, Domain::Source);
        let t_cols = batch.class_domain_cols(c, Domain::Target);
        let thin = match policy {
            TbClassPolicy::Strict => {
                if s_cols.is_empty() || t_cols.is_empty() {
                    return Err(Error::Partition(format!(
                        "class {c} is missing a domain (source: {}, target: {})",
                        s_cols.len(),
                        t_cols.len()
                    )));
                }
                false
            }
            TbClassPolicy::SkipThin {
                min_cols_per_domain,
            } => s_cols.len() < min_cols_per_domain || t_cols.len() < min_cols_per_domain,
        };
        if thin {
            skipped_tb_classes.push(c);
            continue;
        }

        let (s_nuc, s_grad, s_sig) =
            nuclear_with_grad(&batch.class_domain_mat(c, Domain::Source)?, cfg.rel_tol)?;
        let (t_nuc, t_grad, t_sig) =
            nuclear_with_grad(&batch.class_domain_mat(c, Domain::Target)?, cfg.rel_tol)?;
        loss_tb += s_nuc + t_nuc - class_nuc;
        per_class_tb[c] = Some(s_nuc + t_nuc - class_nuc);
        class_sigma_max[c] = Some(s_sig.max(t_sig));
        if cfg.lambda_tb != 0.0 {
            grad.scatter_add_cols(s_cols, &s_grad, -cfg.lambda_tb)?;
            grad.scatter_add_cols(t_cols, &t_grad, -cfg.lambda_tb)?;
            grad.scatter_add_cols(cols, &class_grad, cfg.lambda_tb)?;
        }
    }

    // Whole-batch term: - |Z|* over every column, labeled or not.
    let (batch_nuc, batch_grad, batch_sigma_max) = nuclear_with_grad(z, cfg.rel_tol)?;
    loss_db -= batch_nuc;
    if cfg.lambda_db != 0.0 {
        grad.add_assign_scaled(&batch_grad, -cfg.lambda_db)?;
    }

    Ok(GoTerms {
        loss_tb,
        loss_db,
        loss_go: cfg.lambda_db * loss_db - cfg.lambda_tb * loss_tb,
        grad,
        skipped_tb_classes,
        skipped_db_classes,
        per_class_tb,
        class_sigma_max,
        batch_sigma_max,
    })
}

/// Transferability loss under the strict per-class contract.
pub fn loss_tb(batch: &PartitionedBatch) -> Result<f64> {
    Ok(eval_go(batch, &GoConfig::default(), TbClassPolicy::Strict)?.loss_tb)
}

/// Discriminability loss under the strict per-class contract. Unlabeled
/// columns contribute only to the whole-batch nuclear norm.
pub fn loss_db(batch: &PartitionedBatch) -> Result<f64> {
    // The strict check for loss_db is only that classes are non-empty;
    // missing domains are fine. Evaluate with a permissive transferability
    // policy, then verify the classes were not empty.
    let terms = eval_go(
        batch,
        &GoConfig::default(),
        TbClassPolicy::SkipThin {
            min_cols_per_domain: usize::MAX,
        },
    )?;
    if let Some(&c) = terms.skipped_db_classes.first() {
        return Err(Error::Partition(format!("class {c} has no columns")));
    }
    Ok(terms.loss_db)
}

/// Combined objective `lambda_db * L_DB - lambda_tb * L_TB` under the strict
/// contract.
pub fn loss_go(batch: &PartitionedBatch, cfg: &GoConfig) -> Result<f64> {
    Ok(eval_go(batch, cfg, TbClassPolicy::Strict)?.loss_go)
}

/// Subgradient of [`loss_go`] with respect to the feature matrix.
pub fn grad_loss_go(batch: &PartitionedBatch, cfg: &GoConfig) -> Result<Mat> {
    Ok(eval_go(batch, cfg, TbClassPolicy::Strict)?.grad)
}

/// Rank-based transferability criterion
/// `sum_i rank(Z_i^s) + rank(Z_i^t) - rank(Z_i)`.
pub fn rank_tb_criterion(batch: &PartitionedBatch, rel_tol: f64) -> Result<i64> {
    let mut total = 0i64;
    for c in 0..batch.k() {
        let s_cols = batch.class_domain_cols(c, Domain::Source);
        let t_cols = batch.class_domain_cols(c, Domain::Target);
        if s_cols.is_empty() || t_cols.is_empty() {
            return Err(Error::Partition(format!(
                "class {c} is missing a domain (source: {}, target: {})",
                s_cols.len(),
                t_cols.len()
            )));
        }
        let rs = numerical_rank(&batch.class_domain_mat(c, Domain::Source)?, rel_tol)?;
        let rt = numerical_rank(&batch.class_domain_mat(c, Domain::Target)?, rel_tol)?;
        let rc = numerical_rank(&batch.class_mat(c)?, rel_tol)?;
        total += rs as i64 + rt as i64 - rc as i64;
    }
    Ok(total)
}

/// Rank-based discriminability criterion `sum_i rank(Z_i) - rank(Z)`.
pub fn rank_db_criterion(batch: &PartitionedBatch, rel_tol: f64) -> Result<i64> {
    let mut total = 0i64;
    for c in 0..batch.k() {
        if batch.class_cols(c).is_empty() {
            return Err(Error::Partition(format!("class {c} has no columns")));
        }
        total += numerical_rank(&batch.class_mat(c)?, rel_tol)? as i64;
    }
    total -= numerical_rank(batch.features(), rel_tol)? as i64;
    Ok(total)
}

/// Upper bound `(2 - sqrt(2)) * alpha * d` on one class's transferability
/// term when both domain submatrices have spectral norm at most `alpha` and
/// embedding dimension `d`. Equality requires both nuclear norms to reach
/// `alpha * d`, which forces the two spans to coincide.
pub fn tb_upper_bound(alpha: f64, d: usize) -> f64 {
    TWO_MINUS_SQRT2 * alpha * d as f64
}

/// Lower bound on the normalized combined objective
/// `L_GO / lambda_db` as a function of `lambda = lambda_tb / lambda_db`,
/// under domain-wise spectral norm at most `alpha` and embedding dimension
/// `d`, with `k` classes:
///
/// * `lambda = 0`: `0`;
/// * `0 < lambda <= 1 + sqrt(2)`: `(sqrt(2) - 2) * alpha * lambda * d`;
/// * `lambda > 1 + sqrt(2)`:
///   `(((sqrt(2) - 2) * lambda + sqrt(2)) * sqrt(k) - sqrt(2)) * alpha * d`.
///
/// The two expressions agree at `lambda = 1 + sqrt(2)` for every `k`.
pub fn go_lower_bound(lambda: f64, alpha: f64, d: usize, k: usize) -> f64 {
    let sqrt2 = std::f64::consts::SQRT_2;
    let d = d as f64;
    if lambda == 0.0 {
        0.0
    } else if lambda <= 1.0 + sqrt2 {
        (sqrt2 - 2.0) * alpha * lambda * d
    } else {
        (((sqrt2 - 2.0) * lambda + sqrt2) * (k as f64).sqrt() - sqrt2) * alpha * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Step for finite-difference checks of nuclear-norm subgradients.
    const FD_STEP: f64 = 1e-6;
    /// Relative agreement required between analytic and FD derivatives when
    /// singular gaps are healthy.
    const FD_RTOL: f64 = 1e-5;
    /// Directional-derivative agreement for the combined objective.
    const GO_FD_RTOL: f64 = 1e-4;

    fn two_minus_sqrt2() -> f64 {
        2.0 - std::f64::consts::SQRT_2
    }

    /// Batch with one class: source = target = I_2.
    fn identity_pair_batch() -> PartitionedBatch {
        let z = Mat::from_cols(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        PartitionedBatch::new(
            z,
            vec![
                Domain::Source,
                Domain::Source,
                Domain::Target,
                Domain::Target,
            ],
            vec![Some(0); 4],
            1,
        )
        .unwrap()
    }

    #[test]
    fn loss_tb_identical_domains_reach_per_class_maximum() {
        // |I|* + |I|* - |[I I]|* = 2 + 2 - 2 sqrt(2).
        let got = loss_tb(&identity_pair_batch()).unwrap();
        let want = 4.0 - 2.0 * std::f64::consts::SQRT_2;
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        // Which equals d * (2 - sqrt(2)) = the bound at alpha = 1, d = 2.
        assert!((got - 2.0 * two_minus_sqrt2()).abs() <= 1e-9);
    }

    #[test]
    fn loss_tb_orthogonal_domains_is_zero() {
        let z = Mat::from_cols(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = PartitionedBatch::new(
            z,
            vec![Domain::Source, Domain::Target],
            vec![Some(0), Some(0)],
            1,
        )
        .unwrap();
        assert!(loss_tb(&batch).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn loss_tb_requires_both_domains() {
        let z = Mat::identity(2);
        let batch = PartitionedBatch::new(
            z,
            vec![Domain::Source, Domain::Source],
            vec![Some(0), Some(0)],
            1,
        )
        .unwrap();
        assert!(matches!(loss_tb(&batch), Err(Error::Partition(_))));
    }

    #[test]
    fn loss_db_orthogonal_classes_is_zero() {
        let z = Mat::from_cols(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = PartitionedBatch::new(
            z,
            vec![Domain::Source, Domain::Source],
            vec![Some(0), Some(1)],
            2,
        )
        .unwrap();
        assert!(loss_db(&batch).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn loss_db_identical_classes_is_positive() {
        // Z_1 = Z_2 = [e1]: 1 + 1 - sqrt(2).
        let z = Mat::from_cols(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let batch = PartitionedBatch::new(
            z,
            vec![Domain::Source, Domain::Source],
            vec![Some(0), Some(1)],
            2,
        )
        .unwrap();
        let got = loss_db(&batch).unwrap();
        assert!((got - two_minus_sqrt2()).abs() <= 1e-9);
    }

    #[test]
    fn loss_db_counts_unlabeled_columns_in_batch_norm() {
        // Labeled [e1] plus unlabeled [e2]: |Z_1|* - |Z|* = 1 - 2 = -1.
        let z = Mat::from_cols(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = PartitionedBatch::new(
            z,
            vec![Domain::Source, Domain::Target],
            vec![Some(0), None],
            1,
        )
        .unwrap();
        assert!((loss_db(&batch).unwrap() + 1.0).abs() <= 1e-9);
    }

    /// The two-class witness: per-class private orthonormal frames, source
    /// equal to target. Discriminability is exactly zero and each class's
    /// transferability term is maximal.
    fn orthogonal_equal_witness() -> PartitionedBatch {
        let z = Mat::from_cols(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        PartitionedBatch::new(
            z,
            vec![
                Domain::Source,
                Domain::Target,
                Domain::Source,
                Domain::Target,
            ],
            vec![Some(0), Some(0), Some(1), Some(1)],
            2,
        )
        .unwrap()
    }

    #[test]
    fn loss_go_two_class_witness() {
        let cfg = GoConfig::default();
        let got = loss_go(&orthogonal_equal_witness(), &cfg).unwrap();
        let want = -2.0 * two_minus_sqrt2();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }

    #[test]
    fn loss_go_reduces_to_db_when_lambda_tb_is_zero() {
        let batch = orthogonal_equal_witness();
        let cfg = GoConfig {
            lambda_tb: 0.0,
            lambda_db: 2.5,
            ..GoConfig::default()
        };
        let got = loss_go(&batch, &cfg).unwrap();
        let db = loss_db(&batch).unwrap();
        assert!((got - 2.5 * db).abs() <= 1e-12);
    }

    #[test]
    fn losses_match_independent_per_term_recomputation() {
        // Oracle: extract every submatrix and sum nuclear norms directly.
        use crate::svd::nuclear_norm;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d = 4;
        let k = 3;
        let per = 3; // columns per class per domain
        let n = k * per * 2 + 2; // plus two unlabeled target columns
        let z = Mat::standard_normal(d, n, &mut rng);
        let mut domains = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            for _ in 0..per {
                domains.push(Domain::Source);
                labels.push(Some(c));
            }
            for _ in 0..per {
                domains.push(Domain::Target);
                labels.push(Some(c));
            }
        }
        domains.extend([Domain::Target, Domain::Target]);
        labels.extend([None, None]);
        let batch = PartitionedBatch::new(z, domains, labels, k).unwrap();

        let mut tb_oracle = 0.0;
        let mut db_oracle = 0.0;
        for c in 0..k {
            let zs = batch.class_domain_mat(c, Domain::Source).unwrap();
            let zt = batch.class_domain_mat(c, Domain::Target).unwrap();
            let zc = batch.class_mat(c).unwrap();
            tb_oracle += nuclear_norm(&zs).unwrap() + nuclear_norm(&zt).unwrap()
                - nuclear_norm(&zc).unwrap();
            db_oracle += nuclear_norm(&zc).unwrap();
        }
        db_oracle -= nuclear_norm(batch.features()).unwrap();

        assert!((loss_tb(&batch).unwrap() - tb_oracle).abs() <= 1e-9);
        assert!((loss_db(&batch).unwrap() - db_oracle).abs() <= 1e-9);
        let cfg = GoConfig {
            lambda_tb: 0.7,
            lambda_db: 1.3,
            ..GoConfig::default()
        };
        let go = loss_go(&batch, &cfg).unwrap();
        assert!((go - (1.3 * db_oracle - 0.7 * tb_oracle)).abs() <= 1e-9);
    }

    #[test]
    fn rank_criteria_trivial_cases() {
        // One class, identical identity domains: 2 + 2 - 2 = 2.
        assert_eq!(rank_tb_criterion(&identity_pair_batch(), 1e-10).unwrap(), 2);

        // Orthogonal single-column domains: 1 + 1 - 2 = 0.
        let z = Mat::from_cols(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = PartitionedBatch::new(
            z,
            vec![Domain::Source, Domain::Target],
            vec![Some(0), Some(0)],
            1,
        )
        .unwrap();
        assert_eq!(rank_tb_criterion(&batch, 1e-10).unwrap(), 0);
    }

    #[test]
    fn rank_db_with_shared_direction_matches_construction() {
        // Three classes, each spanned by one shared and one private
        // direction: sum rank(Z_i) = 6, rank(Z) = 1 + 3 = 4.
        let d = 5;
        let shared = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let mut cols = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3usize {
            let mut private = vec![0.0; d];
            private[c + 1] = 1.0;
            cols.push(shared.clone());
            cols.push(private);
            labels.extend([Some(c), Some(c)]);
        }
        let z = Mat::from_cols(&cols).unwrap();
        let batch = PartitionedBatch::new(z, vec![Domain::Source; 6], labels, 3).unwrap();
        assert_eq!(rank_db_criterion(&batch, 1e-10).unwrap(), 6 - 4);
    }

    #[test]
    fn grad_nuclear_of_full_rank_identity_is_identity() {
        let g = grad_nuclear(&Mat::identity(3), 1e-10).unwrap();
        assert!(g.sub(&Mat::identity(3)).unwrap().max_abs() <= 1e-12);

        let diag = Mat::from_cols(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = grad_nuclear(&diag, 1e-10).unwrap();
        assert!(g.sub(&Mat::identity(2)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn grad_nuclear_matches_finite_differences() {
        // Well-conditioned seeded matrix: entry-wise central differences of
        // the nuclear norm are the oracle.
        use crate::svd::nuclear_norm;
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let m = Mat::standard_normal(4, 7, &mut rng);
        let dec = svd(&m).unwrap();
        let min_gap = dec
            .sigma
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::INFINITY, f64::min)
            .min(*dec.sigma.last().unwrap());
        assert!(min_gap > 1e-3, "seed produced a degenerate spectrum");

        let g = grad_nuclear(&m, 1e-10).unwrap();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let mut plus = m.clone();
                plus.set(i, j, m.get(i, j) + FD_STEP);
                let mut minus = m.clone();
                minus.set(i, j, m.get(i, j) - FD_STEP);
                let fd = (nuclear_norm(&plus).unwrap() - nuclear_norm(&minus).unwrap())
                    / (2.0 * FD_STEP);
                let denom = fd.abs().max(1.0);
                assert!(
                    (fd - g.get(i, j)).abs() / denom <= FD_RTOL,
                    "entry ({i},{j}): fd {fd} vs analytic {}",
                    g.get(i, j)
                );
            }
        }
    }

    /// Builds a random fully-labeled batch with `per` columns per class and
    /// domain plus `extra` unlabeled target columns.
    fn random_batch(
        d: usize,
        k: usize,
        per: usize,
        extra: usize,
        rng: &mut ChaCha8Rng,
    ) -> PartitionedBatch {
        let n = k * per * 2 + extra;
        let z = Mat::standard_normal(d, n, rng);
        let mut domains = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            for _ in 0..per {
                domains.push(Domain::Source);
                labels.push(Some(c));
            }
            for _ in 0..per {
                domains.push(Domain::Target);
                labels.push(Some(c));
            }
        }
        for _ in 0..extra {
            domains.push(Domain::Target);
            labels.push(None);
        }
        PartitionedBatch::new(z, domains, labels, k).unwrap()
    }

    #[test]
    fn grad_loss_go_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let cfg = GoConfig {
            lambda_tb: 0.8,
            lambda_db: 1.2,
            ..GoConfig::default()
        };
        for trial in 0..5 {
            let batch = random_batch(3, 2, 3, 2, &mut rng);
            let g = grad_loss_go(&batch, &cfg).unwrap();
            let dir = Mat::standard_normal(batch.dim(), batch.n(), &mut rng);
            let dir = dir.scaled(1.0 / dir.frob_norm());

            let mut plus = batch.features().clone();
            plus.add_assign_scaled(&dir, FD_STEP).unwrap();
            let mut minus = batch.features().clone();
            minus.add_assign_scaled(&dir, -FD_STEP).unwrap();
            let lp = loss_go(&batch.with_features(plus).unwrap(), &cfg).unwrap();
            let lm = loss_go(&batch.with_features(minus).unwrap(), &cfg).unwrap();
            let fd = (lp - lm) / (2.0 * FD_STEP);

            let analytic: f64 = g
                .data()
                .iter()
                .zip(dir.data())
                .map(|(&a, &b)| a * b)
                .sum();
            assert!(
                (fd - analytic).abs() / fd.abs().max(1.0) <= GO_FD_RTOL,
                "trial {trial}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn grad_loss_go_unlabeled_columns_only_see_batch_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let batch = random_batch(3, 2, 2, 2, &mut rng);
        let cfg = GoConfig::default();
        let g = grad_loss_go(&batch, &cfg).unwrap();
        let batch_grad = grad_nuclear(batch.features(), cfg.rel_tol).unwrap();
        for &j in batch.unlabeled_cols() {
            for i in 0..batch.dim() {
                let want = -cfg.lambda_db * batch_grad.get(i, j);
                assert!((g.get(i, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn skip_policy_drops_thin_classes_consistently() {
        // Class 1 has a single target column: its transferability term must
        // be skipped at min 2, and loss/grad must agree on that.
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let d = 3;
        let z = Mat::standard_normal(d, 7, &mut rng);
        let domains = vec![
            Domain::Source,
            Domain::Source,
            Domain::Target,
            Domain::Target,
            Domain::Source,
            Domain::Source,
            Domain::Target,
        ];
        let labels = vec![
            Some(0),
            Some(0),
            Some(0),
            Some(0),
            Some(1),
            Some(1),
            Some(1),
        ];
        let batch = PartitionedBatch::new(z, domains, labels, 2).unwrap();

        let cfg = GoConfig::default();
        let strict = eval_go(&batch, &cfg, TbClassPolicy::Strict).unwrap();
        let skipped = eval_go(
            &batch,
            &cfg,
            TbClassPolicy::SkipThin {
                min_cols_per_domain: 2,
            },
        )
        .unwrap();

        assert!(strict.skipped_tb_classes.is_empty());
        assert_eq!(skipped.skipped_tb_classes, vec![1]);
        // Class 0 terms agree; class 1's TB term is present only in strict.
        let zs = batch.class_domain_mat(1, Domain::Source).unwrap();
        let zt = batch.class_domain_mat(1, Domain::Target).unwrap();
        let zc = batch.class_mat(1).unwrap();
        use crate::svd::nuclear_norm;
        let class1_tb = nuclear_norm(&zs).unwrap() + nuclear_norm(&zt).unwrap()
            - nuclear_norm(&zc).unwrap();
        assert!((strict.loss_tb - skipped.loss_tb - class1_tb).abs() <= 1e-9);
        assert!((strict.loss_db - skipped.loss_db).abs() <= 1e-12);
    }

    #[test]
    fn bounds_match_closed_forms() {
        let s2 = std::f64::consts::SQRT_2;
        assert!((tb_upper_bound(1.0, 3) - 3.0 * (2.0 - s2)).abs() <= 1e-12);
        assert!((tb_upper_bound(2.0, 1) - 2.0 * (2.0 - s2)).abs() <= 1e-12);

        assert_eq!(go_lower_bound(0.0, 1.0, 5, 3), 0.0);
        assert!((go_lower_bound(1.0, 1.0, 2, 7) - (s2 - 2.0) * 2.0).abs() <= 1e-12);
        let want = (((s2 - 2.0) * 3.0 + s2) * 2.0 - s2) * 2.0;
        assert!((go_lower_bound(3.0, 1.0, 2, 4) - want).abs() <= 1e-12);

        // Continuity at the regime boundary, independent of k.
        for k in [1usize, 2, 5, 9] {
            let at = go_lower_bound(1.0 + s2, 1.0, 4, k);
            let above = go_lower_bound(1.0 + s2 + 1e-12, 1.0, 4, k);
            assert!((at - above).abs() <= 1e-9, "k={k}: {at} vs {above}");
        }
    }

    #[test]
    fn witness_attains_go_lower_bound() {
        // Two classes, orthogonal one-dimensional frames, source = target,
        // ambient dimension k * 1 = 2: the bound with d = 2 is attained.
        let batch = orthogonal_equal_witness();
        let cfg = GoConfig::default();
        let go = loss_go(&batch, &cfg).unwrap() / cfg.lambda_db;
        let bound = go_lower_bound(1.0, 1.0, batch.dim(), batch.k());
        assert!((go - bound).abs() <= 1e-8, "{go} vs bound {bound}");
    }

    #[test]
    fn regime_classification() {
        let mk = |tb: f64, db: f64| GoConfig {
            lambda_tb: tb,
            lambda_db: db,
            ..GoConfig::default()
        };
        assert_eq!(mk(0.0, 1.0).regime(), Regime::DiscriminabilityOnly);
        assert_eq!(mk(1.0, 1.0).regime(), Regime::Balance);
        assert_eq!(
            mk(1.0 + std::f64::consts::SQRT_2, 1.0).regime(),
            Regime::Balance
        );
        assert_eq!(mk(3.0, 1.0).regime(), Regime::TransferabilityDominant);
        assert_eq!(mk(1.0, 0.0).regime(), Regime::TransferabilityDominant);
        assert_eq!(mk(0.0, 0.0).regime(), Regime::DiscriminabilityOnly);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = GoConfig {
            lambda_tb: -1.0,
            ..GoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GoConfig {
            alpha: 0.0,
            ..GoConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
