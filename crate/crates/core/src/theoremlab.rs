//! Monte Carlo and constructive verification of the rank and nuclear-norm
//! facts the geometric objectives rest on: the concatenation rank sandwich
//! `max(r_A, r_B) <= rank[A,B] <= r_A + r_B`, the transferability ceiling
//! `(2 - sqrt(2)) * alpha * d`, nuclear-norm subadditivity under column
//! concatenation, and the three-regime lower bound on the normalized
//! combined objective.
//!
//! Each check runs randomized trials plus explicit equality-witness
//! constructions and reports violation counts, the worst slack seen, and
//! witness residuals. All randomness derives deterministically from a master
//! seed (per-trial seeds are split off with a SplitMix64 finalizer), so
//! reports are reproducible even though trials run in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{Domain, PartitionedBatch};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::objectives::{go_lower_bound, loss_go, tb_upper_bound, GoConfig};
use crate::svd::{
    nuclear_norm, numerical_rank, orthonormal_basis, principal_angle_cosines, spectral_norm,
};

/// Rank decisions in the sandwich check use this relative threshold.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Slack below `-TB_BOUND_TOL` counts as a transferability-bound violation.
pub const TB_BOUND_TOL: f64 = 1e-8;

/// Slack below `-SUBADDITIVITY_TOL` counts as a subadditivity violation.
pub const SUBADDITIVITY_TOL: f64 = 1e-9;

/// Slack below `-GO_BOUND_TOL` counts as a combined-bound violation.
pub const GO_BOUND_TOL: f64 = 1e-6;

/// Equality witnesses must reproduce their analytic values this closely.
pub const WITNESS_RESIDUAL_TOL: f64 = 1e-6;

/// Random spectral norms are drawn from `alpha * uniform(SPECTRAL_FLOOR, 1)`
/// so trials exercise both the interior and the boundary of the ball.
const SPECTRAL_FLOOR: f64 = 0.2;

/// Outcome of one verification check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    /// Which bound this covers: `rank_bounds`, `transfer_upper_bound`,
    /// `concat_subadditivity`, or `combined_lower_bound`.
    pub check: String,
    /// Randomized trials run (witness constructions included).
    pub trials: usize,
    /// Trials whose slack fell below `-tolerance`.
    pub violations: usize,
    /// Smallest slack seen; nonnegative iff the bound held with room.
    pub worst_slack: f64,
    /// Violation threshold used by the count.
    pub tolerance: f64,
    /// Absolute residuals of the equality-witness constructions.
    pub witness_residuals: Vec<f64>,
    /// Grid of `lambda = lambda_tb / lambda_db` (combined bound only).
    pub lambda_grid: Vec<f64>,
    /// Spectral-ball radius of the ensemble.
    pub alpha: f64,
    /// Largest embedding dimension the ensemble draws.
    pub d: usize,
    /// Classes (combined bound) or concatenated blocks (other checks).
    pub k: usize,
    /// Master seed the per-trial streams were split from.
    pub seed: u64,
}

impl TrialReport {
    /// Zero violations and every witness within [`WITNESS_RESIDUAL_TOL`].
    pub fn passed(&self) -> bool {
        self.violations == 0
            && self
                .witness_residuals
                .iter()
                .all(|&r| r <= WITNESS_RESIDUAL_TOL)
    }
}

/// Trial counts and ensemble parameters of the standard verification run,
/// shared by the command-line `verify` and the acceptance suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyDefaults {
    pub rank_trials: usize,
    pub rank_max_dim: usize,
    pub transfer_trials: usize,
    pub subadditivity_trials: usize,
    pub combined_trials_per_lambda: usize,
    /// Spectral-ball radius for the transfer and combined ensembles.
    pub alpha: f64,
    /// Maximum embedding dimension for the transfer ensemble.
    pub transfer_max_dim: usize,
    /// Embedding dimension of the combined-bound ensemble.
    pub combined_dim: usize,
    /// Classes in the combined-bound ensemble.
    pub combined_classes: usize,
    /// `lambda` grid for the combined bound; spans all three regimes.
    pub lambda_grid: Vec<f64>,
}

impl Default for VerifyDefaults {
    fn default() -> Self {
        VerifyDefaults {
            rank_trials: 10_000,
            rank_max_dim: 6,
            transfer_trials: 100_000,
            subadditivity_trials: 100_000,
            combined_trials_per_lambda: 10_000,
            alpha: 1.0,
            transfer_max_dim: 6,
            combined_dim: 6,
            combined_classes: 3,
            lambda_grid: vec![0.0, 0.5, 1.0, 1.0 + std::f64::consts::SQRT_2, 5.0],
        }
    }
}

/// Runs every check under the given defaults and master seed, in the fixed
/// order rank / transfer / subadditivity / combined.
pub fn run_all(defaults: &VerifyDefaults, seed: u64) -> Result<Vec<TrialReport>> {
    Ok(vec![
        verify_rank_bounds(defaults.rank_trials, defaults.rank_max_dim, seed)?,
        verify_transfer_upper_bound(
            defaults.transfer_trials,
            defaults.alpha,
            defaults.transfer_max_dim,
            seed,
        )?,
        verify_concat_subadditivity(defaults.subadditivity_trials, seed)?,
        verify_combined_lower_bound(
            defaults.combined_trials_per_lambda,
            defaults.alpha,
            defaults.combined_dim,
            defaults.combined_classes,
            &defaults.lambda_grid,
            seed,
        )?,
    ])
}

/// SplitMix64 finalizer; decorrelates per-trial seeds split from one master.
fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard-normal matrix rescaled to spectral norm
/// `alpha * uniform(SPECTRAL_FLOOR, 1)`.
fn random_spectral_ball(
    rows: usize,
    cols: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Mat> {
    let m = Mat::standard_normal(rows, cols, rng);
    let target = alpha * rng.gen_range(SPECTRAL_FLOOR..=1.0);
    let s = spectral_norm(&m)?;
    if s <= 0.0 {
        return Ok(m);
    }
    Ok(m.scaled(target / s))
}

/// Random matrix of rank `r` (almost surely) whose column space lies in the
/// coordinate axes `[axis0, axis0 + r)` of an `ambient`-dimensional space.
fn axis_aligned_rank(
    ambient: usize,
    axis0: usize,
    r: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Mat> {
    let core = Mat::standard_normal(r, cols, rng);
    let embedded: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut v = vec![0.0; ambient];
            v[axis0..axis0 + r].copy_from_slice(core.col(j));
            v
        })
        .collect();
    Mat::from_cols(&embedded)
}

/// Runs `trials` independent slack computations in parallel and folds them
/// into `(violations, worst_slack)`; the fold is order-independent, so the
/// result is deterministic.
fn run_trials<F>(trials: usize, tolerance: f64, seed: u64, trial: F) -> Result<(usize, f64)>
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64> + Sync,
{
    let slacks = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t));
            trial(&mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    let violations = slacks.iter().filter(|&&s| s < -tolerance).count();
    let worst = slacks.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((violations, worst))
}

fn require_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::InvalidArgument(
            "at least one trial is required".to_string(),
        ));
    }
    Ok(())
}

fn require_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spectral radius alpha must be positive and finite, got {alpha}"
        )));
    }
    Ok(())
}

/// Checks `max(r_A, r_B) <= rank[A, B] <= r_A + r_B` on random low-rank
/// products (ranks measured, not assumed), plus the two equality
/// constructions: disjoint coordinate bases reach the upper end, nested
/// bases the lower end.
pub fn verify_rank_bounds(trials: usize, max_dim: usize, seed: u64) -> Result<TrialReport> {
    require_trials(trials)?;
    if max_dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "rank trials need ambient dimension at least 2, got {max_dim}"
        )));
    }

    let low_rank = |rows: usize, rng: &mut ChaCha8Rng| -> Result<Mat> {
        let r = rng.gen_range(1..=rows);
        let cols = rng.gen_range(r..=r + 3);
        Mat::standard_normal(rows, r, rng).matmul(&Mat::standard_normal(r, cols, rng))
    };
    let (violations, mut worst_slack) = run_trials(trials, 0.0, seed, |rng| {
        let rows = rng.gen_range(2..=max_dim);
        let a = low_rank(rows, rng)?;
        let b = low_rank(rows, rng)?;
        let ra = numerical_rank(&a, RANK_REL_TOL)?;
        let rb = numerical_rank(&b, RANK_REL_TOL)?;
        let rab = numerical_rank(&Mat::concat_cols(&[&a, &b])?, RANK_REL_TOL)?;
        let lower = rab as f64 - ra.max(rb) as f64;
        let upper = (ra + rb) as f64 - rab as f64;
        Ok(lower.min(upper))
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut witness_residuals = Vec::new();

    // Disjoint bases: A spans the first half of the axes, B the second;
    // the concatenation rank must be the sum.
    let ra = max_dim / 2;
    let rb = max_dim - ra;
    let a = axis_aligned_rank(max_dim, 0, ra, ra + 2, &mut rng)?;
    let b = axis_aligned_rank(max_dim, ra, rb, rb + 2, &mut rng)?;
    let ra_meas = numerical_rank(&a, RANK_REL_TOL)?;
    let rb_meas = numerical_rank(&b, RANK_REL_TOL)?;
    let rab = numerical_rank(&Mat::concat_cols(&[&a, &b])?, RANK_REL_TOL)?;
    witness_residuals.push((rab as f64 - (ra_meas + rb_meas) as f64).abs());

    // Nested bases: B's columns are combinations of A's, so the
    // concatenation adds nothing.
    let nested = a.matmul(&Mat::standard_normal(a.cols(), 3, &mut rng))?;
    let rab = numerical_rank(&Mat::concat_cols(&[&a, &nested])?, RANK_REL_TOL)?;
    witness_residuals.push((rab as f64 - ra_meas as f64).abs());

    worst_slack = worst_slack.min(-witness_residuals.iter().cloned().fold(0.0, f64::max));
    Ok(TrialReport {
        check: "rank_bounds".to_string(),
        trials: trials + 2,
        violations,
        worst_slack,
        tolerance: 0.0,
        witness_residuals,
        lambda_grid: Vec::new(),
        alpha: 1.0,
        d: max_dim,
        k: 2,
        seed,
    })
}

/// Checks `|A|_* + |B|_* - |[A, B]|_* <= (2 - sqrt(2)) * alpha * d` for
/// random pairs in the spectral `alpha`-ball (the bound is evaluated at the
/// pair's measured spectral radius, which is the tighter test), plus the
/// equality witness `A = B = alpha * Q` for an orthonormal `d`-frame `Q`,
/// which must attain the bound and align the two column spaces exactly.
pub fn verify_transfer_upper_bound(
    trials: usize,
    alpha: f64,
    max_dim: usize,
    seed: u64,
) -> Result<TrialReport> {
    require_trials(trials)?;
    require_alpha(alpha)?;
    if max_dim == 0 {
        return Err(Error::InvalidArgument(
            "embedding dimension must be at least 1".to_string(),
        ));
    }

    let (violations, mut worst_slack) = run_trials(trials, TB_BOUND_TOL, seed, |rng| {
        let d = rng.gen_range(1..=max_dim);
        let n = rng.gen_range(d..=2 * d + 2);
        let m = rng.gen_range(d..=2 * d + 2);
        let a = random_spectral_ball(d, n, alpha, rng)?;
        let b = random_spectral_ball(d, m, alpha, rng)?;
        let observed = spectral_norm(&a)?.max(spectral_norm(&b)?);
        let expr =
            nuclear_norm(&a)? + nuclear_norm(&b)? - nuclear_norm(&Mat::concat_cols(&[&a, &b])?)?;
        Ok(tb_upper_bound(observed, d) - expr)
    })?;

    // Witness: a random orthonormal frame scaled to the ball boundary,
    // used for both sides.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let square = Mat::standard_normal(max_dim, max_dim, &mut rng);
    let q = orthonormal_basis(&square, RANK_REL_TOL)?;
    let a = q.scaled(alpha);
    let expr = 2.0 * nuclear_norm(&a)? - nuclear_norm(&Mat::concat_cols(&[&a, &a])?)?;
    let value_residual = (tb_upper_bound(alpha, max_dim) - expr).abs();
    let cos = principal_angle_cosines(&q, &q)?;
    let min_cos = cos.iter().copied().fold(f64::INFINITY, f64::min);
    let angle_residual = (1.0 - min_cos).max(0.0);
    worst_slack = worst_slack.min(-value_residual);

    Ok(TrialReport {
        check: "transfer_upper_bound".to_string(),
        trials: trials + 1,
        violations,
        worst_slack,
        tolerance: TB_BOUND_TOL,
        witness_residuals: vec![value_residual, angle_residual],
        lambda_grid: Vec::new(),
        alpha,
        d: max_dim,
        k: 2,
        seed,
    })
}

/// Checks `|[A, B]|_* <= |A|_* + |B|_*` on random pairs and that the gap
/// closes for constructions with orthogonal column spaces.
pub fn verify_concat_subadditivity(trials: usize, seed: u64) -> Result<TrialReport> {
    require_trials(trials)?;
    const MAX_ROWS: usize = 6;
    const MAX_COLS: usize = 8;
    const ORTHO_WITNESSES: usize = 10;

    let (violations, mut worst_slack) = run_trials(trials, SUBADDITIVITY_TOL, seed, |rng| {
        let rows = rng.gen_range(1..=MAX_ROWS);
        let a = random_spectral_ball(rows, rng.gen_range(1..=MAX_COLS), 1.0, rng)?;
        let b = random_spectral_ball(rows, rng.gen_range(1..=MAX_COLS), 1.0, rng)?;
        Ok(nuclear_norm(&a)? + nuclear_norm(&b)? - nuclear_norm(&Mat::concat_cols(&[&a, &b])?)?)
    })?;

    // Orthogonal column spaces: disjoint coordinate spans give gap zero.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut witness_residuals = Vec::with_capacity(ORTHO_WITNESSES);
    for _ in 0..ORTHO_WITNESSES {
        let ra = rng.gen_range(1..=MAX_ROWS / 2);
        let rb = rng.gen_range(1..=MAX_ROWS - ra);
        let a = axis_aligned_rank(MAX_ROWS, 0, ra, ra + 2, &mut rng)?;
        let b = axis_aligned_rank(MAX_ROWS, ra, rb, rb + 2, &mut rng)?;
        let gap =
            nuclear_norm(&a)? + nuclear_norm(&b)? - nuclear_norm(&Mat::concat_cols(&[&a, &b])?)?;
        witness_residuals.push(gap.abs());
    }
    worst_slack = worst_slack.min(-witness_residuals.iter().cloned().fold(0.0, f64::max));

    Ok(TrialReport {
        check: "concat_subadditivity".to_string(),
        trials: trials + ORTHO_WITNESSES,
        violations,
        worst_slack,
        tolerance: SUBADDITIVITY_TOL,
        witness_residuals,
        lambda_grid: Vec::new(),
        alpha: 1.0,
        d: MAX_ROWS,
        k: 2,
        seed,
    })
}

/// Random labeled two-domain batch in `R^d` with `k` classes, each domain
/// rescaled into the spectral `alpha`-ball. Every class gets at least two
/// columns per domain and each domain at least `d` columns in total.
fn random_two_domain_batch(
    d: usize,
    k: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PartitionedBatch> {
    let floor = 2.max(d.div_ceil(k));
    let counts = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..k).map(|_| rng.gen_range(floor..=floor + 3)).collect()
    };
    let src_counts = counts(rng);
    let tgt_counts = counts(rng);
    let n_s: usize = src_counts.iter().sum();
    let n_t: usize = tgt_counts.iter().sum();

    let zs = random_spectral_ball(d, n_s, alpha, rng)?;
    let zt = random_spectral_ball(d, n_t, alpha, rng)?;
    let z = Mat::concat_cols(&[&zs, &zt])?;

    let mut domain = vec![Domain::Source; n_s];
    domain.extend(std::iter::repeat(Domain::Target).take(n_t));
    let mut label = Vec::with_capacity(n_s + n_t);
    for counts in [&src_counts, &tgt_counts] {
        for (c, &cnt) in counts.iter().enumerate() {
            label.extend(std::iter::repeat(Some(c)).take(cnt));
        }
    }
    PartitionedBatch::new(z, domain, label, k)
}

/// The balance-regime equality witness: the `d` coordinate axes are split
/// into `k` contiguous nonempty frames, and class `c`'s source and target
/// blocks are both `alpha` times its frame. Classes are mutually
/// orthogonal, each class's domains span the same subspace, and the frames
/// jointly fill the space, so the normalized combined objective equals
/// `(sqrt(2) - 2) * alpha * lambda * d` exactly (and `0` at `lambda = 0`).
fn balance_witness(d: usize, k: usize, alpha: f64) -> Result<PartitionedBatch> {
    let base = d / k;
    let extra = d % k;
    let mut cols = Vec::with_capacity(2 * d);
    let mut domain = Vec::with_capacity(2 * d);
    let mut label = Vec::with_capacity(2 * d);
    for dom in Domain::BOTH {
        let mut axis = 0;
        for c in 0..k {
            let width = base + usize::from(c < extra);
            for offset in 0..width {
                let mut v = vec![0.0; d];
                v[axis + offset] = alpha;
                cols.push(v);
                domain.push(dom);
                label.push(Some(c));
            }
            axis += width;
        }
    }
    PartitionedBatch::new(Mat::from_cols(&cols)?, domain, label, k)
}

/// Checks the three-regime lower bound on the normalized combined objective
/// for every `lambda` in the grid, on random batches (at the measured
/// spectral radius) and on the balance witness. For `lambda` in `[0,
/// 1 + sqrt(2)]` the witness must attain the bound; its absolute residual is
/// recorded per grid point.
pub fn verify_combined_lower_bound(
    trials_per_lambda: usize,
    alpha: f64,
    d: usize,
    k: usize,
    lambda_grid: &[f64],
    seed: u64,
) -> Result<TrialReport> {
    require_trials(trials_per_lambda)?;
    require_alpha(alpha)?;
    if d == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "embedding dimension and class count must be at least 1".to_string(),
        ));
    }
    if d < k {
        return Err(Error::InvalidArgument(format!(
            "the balance witness needs one private axis per class: \
             embedding dimension {d} cannot host {k} orthogonal class frames"
        )));
    }
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument(
            "the lambda grid must not be empty".to_string(),
        ));
    }
    if let Some(&bad) = lambda_grid.iter().find(|&&l| !(l.is_finite() && l >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "lambda grid value {bad} is not a non-negative real"
        )));
    }

    let balance_edge = 1.0 + std::f64::consts::SQRT_2;
    let mut violations = 0;
    let mut worst_slack = f64::INFINITY;
    let mut witness_residuals = Vec::new();

    for (li, &lambda) in lambda_grid.iter().enumerate() {
        // lambda_db = 1 makes loss_go the normalized objective directly.
        let cfg = GoConfig {
            lambda_tb: lambda,
            lambda_db: 1.0,
            ..GoConfig::default()
        };
        let (v, w) = run_trials(
            trials_per_lambda,
            GO_BOUND_TOL,
            derive_seed(seed, 1 + li as u64),
            |rng| {
                let batch = random_two_domain_batch(d, k, alpha, rng)?;
                let observed = spectral_norm(&batch.domain_mat(Domain::Source)?)?
                    .max(spectral_norm(&batch.domain_mat(Domain::Target)?)?);
                let value = loss_go(&batch, &cfg)?;
                Ok(value - go_lower_bound(lambda, observed, d, k))
            },
        )?;
        violations += v;
        worst_slack = worst_slack.min(w);

        let witness = balance_witness(d, k, alpha)?;
        let slack = loss_go(&witness, &cfg)? - go_lower_bound(lambda, alpha, d, k);
        if slack < -GO_BOUND_TOL {
            violations += 1;
        }
        worst_slack = worst_slack.min(slack);
        if lambda <= balance_edge {
            witness_residuals.push(slack.abs());
        }
    }

    Ok(TrialReport {
        check: "combined_lower_bound".to_string(),
        trials: lambda_grid.len() * (trials_per_lambda + 1),
        violations,
        worst_slack,
        tolerance: GO_BOUND_TOL,
        witness_residuals,
        lambda_grid: lambda_grid.to_vec(),
        alpha,
        d,
        k,
        seed,
    })
}
