//! Two-stage training loop: a warm-up phase that aligns the domains globally
//! under source supervision, then the main phase that shapes per-class
//! geometry with pseudo-labeled target columns.
//!
//! Both stage functions accept a [`TrainView`], which carries no target
//! ground truth; accuracy-style metrics that need the truth are filled in by
//! an [`EpochObserver`] supplied by the caller (see [`train`]), so no code
//! path inside a stage can read labels it should not have.
//!
//! Scaling conventions: the classification loss is the mean cross-entropy
//! over source columns and the mean prediction entropy over target columns.
//! The geometric terms are computed (and recorded) as raw batch nuclear
//! norms — they are set functions of the embedding, not per-sample sums —
//! but the optimizer follows them divided by the number of batch columns,
//! so their per-column pull stays commensurate with the task losses as the
//! batch grows. The transferability reward grows linearly in the embedding
//! scale, so left alone the optimizer would inflate the scale forever; an
//! embedding ridge (`lambda_norm`) softly enforces the bounded spectral
//! ball the geometric analysis assumes, and a decoupled weight decay keeps
//! the parameters themselves tame.

use serde::{Deserialize, Serialize};

use crate::batch::PartitionedBatch;
use crate::data::{assemble_batch, BatchSelection, TrainView};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{
    adam_step, backward, forward, loss_source_ce, loss_target_entropy, AdamHyper, AdamState,
    ForwardTrace, MlpParams, ParamGrads,
};
use crate::objectives::{eval_go, go_lower_bound, tb_upper_bound, GoConfig, TbClassPolicy};
use crate::svd::svd;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Classes thinner than this many columns per domain are skipped by the
/// per-class transferability term during training epochs.
pub const MIN_CLASS_COLS_FOR_TB: usize = 2;

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Warm-up epochs (source supervision + global alignment).
    pub t_warm: usize,
    /// Main-stage epochs (pseudo-labeled per-class geometry).
    pub t_adapt: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Decoupled weight decay on weight matrices (biases excluded): after
    /// every optimizer step each weight matrix is multiplied by
    /// `1 - lr * weight_decay`. The transferability reward grows linearly
    /// with the embedding scale, so an undecayed run inflates its weights
    /// without limit; the decay pins the scale at an equilibrium and leaves
    /// only the angular geometry to optimize.
    pub weight_decay: f64,
    /// Weight of the transferability term.
    pub lambda_tb: f64,
    /// Weight of the discriminability term.
    pub lambda_db: f64,
    /// Weight of the target prediction-entropy term (main stage only).
    pub lambda_t: f64,
    /// Weight of the mean squared embedding column norm, added in both
    /// stages. The geometric analysis assumes features inside a spectral
    /// ball of finite radius; this ridge enforces that ball softly, since
    /// the transferability reward alone would push the embedding scale to
    /// infinity and drown the angular structure the bounds describe.
    pub lambda_norm: f64,
    /// Pseudo-label confidence threshold, in (0, 1).
    pub tau: f64,
    /// Column selection per epoch.
    pub batch: BatchSelection,
    /// Epochs between pseudo-label refreshes (>= 1).
    pub refresh_period: usize,
    /// Hidden layer widths of the feature extractor.
    pub hidden_dims: Vec<usize>,
    /// Embedding dimension the geometric terms act on.
    pub embed_dim: usize,
    /// Seed for parameter init and batch subsampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_warm: 50,
            t_adapt: 1200,
            lr: 2e-2,
            weight_decay: 1e-3,
            lambda_tb: 1.0,
            lambda_db: 1.0,
            lambda_t: 2e-2,
            lambda_norm: 1.5e-2,
            tau: 0.8,
            batch: BatchSelection::Full,
            refresh_period: 1,
            hidden_dims: vec![32],
            embed_dim: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be in (0, 1), got {}",
                self.tau
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_tb", self.lambda_tb),
            ("lambda_db", self.lambda_db),
            ("lambda_t", self.lambda_t),
            ("lambda_norm", self.lambda_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        if self.lr * self.weight_decay >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "lr * weight_decay must stay below 1 for the decay step to \
                 shrink rather than flip weights, got {}",
                self.lr * self.weight_decay
            )));
        }
        if self.refresh_period == 0 {
            return Err(Error::InvalidArgument(
                "refresh_period must be >= 1".to_string(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "embed_dim must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Extractor layer widths, input to embedding.
    fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }

    fn go_config(&self) -> GoConfig {
        GoConfig {
            lambda_tb: self.lambda_tb,
            lambda_db: self.lambda_db,
            ..GoConfig::default()
        }
    }
}

/// Which training phase produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    WarmUp,
    Goal,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::WarmUp => "warm-up",
            Stage::Goal => "goal",
        }
    }
}

/// Losses and metrics from one epoch.
///
/// Loss fields are deterministic functions of the data, config, and seed;
/// `selection_accuracy` and `target_accuracy` come from the caller's
/// [`EpochObserver`] and stay `None` when no ground truth exists. Bound
/// slacks compare the measured geometric losses against their closed-form
/// limits; the main-stage slack may dip below zero only because unlabeled
/// columns enter the whole-batch norm, which the bound's hypothesis excludes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// Global epoch index across both stages, 0-based.
    pub epoch: usize,
    /// Mean source cross-entropy.
    pub loss_ce_source: f64,
    /// Mean target prediction entropy (main stage only).
    pub loss_entropy_target: Option<f64>,
    /// Raw batch-level transferability value (sums over columns, not means).
    pub loss_tb: f64,
    /// Raw batch-level discriminability value (sums over columns, not means).
    pub loss_db: f64,
    /// `lambda_db * loss_db - lambda_tb * loss_tb`, raw batch level.
    pub loss_go: f64,
    /// Per-column objective the optimizer steps on: the mean task losses
    /// plus `loss_go` and the embedding ridge, both divided by the number
    /// of batch columns.
    pub loss_total: f64,
    /// `(2 - sqrt(2)) * alpha * d - loss_tb` with measured `alpha`; for the
    /// main stage, the minimum such slack over evaluated classes.
    pub tb_bound_slack: Option<f64>,
    /// `loss_go / lambda_db - go_lower_bound(...)` with measured `alpha`.
    pub go_bound_slack: Option<f64>,
    /// Fraction of target columns whose confidence cleared `tau`.
    pub selection_rate: Option<f64>,
    /// Fraction of selected pseudo-labels matching the ground truth.
    pub selection_accuracy: Option<f64>,
    /// Accuracy of the current model on the full target set.
    pub target_accuracy: Option<f64>,
}

/// Full history of a run plus the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub final_source_accuracy: Option<f64>,
    pub final_target_accuracy: Option<f64>,
    /// Where the trained parameters were saved, when they were.
    pub checkpoint: Option<String>,
}

impl RunReport {
    fn new(config: TrainConfig) -> RunReport {
        RunReport {
            config,
            records: Vec::new(),
            final_source_accuracy: None,
            final_target_accuracy: None,
            checkpoint: None,
        }
    }

    /// Records from one stage, in order.
    pub fn stage_records(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

/// Per-epoch context handed to an [`EpochObserver`].
pub struct EpochInfo<'a> {
    pub stage: Stage,
    pub epoch: usize,
    pub model: &'a MlpParams,
    /// Current pseudo-labels (main stage only).
    pub pseudo_labels: Option<&'a [usize]>,
    /// Current selection mask (main stage only).
    pub selection_mask: Option<&'a [bool]>,
}

/// Callback that may enrich each epoch's record — typically with
/// ground-truth metrics the stages themselves must not compute.
pub trait EpochObserver {
    fn on_epoch(&mut self, info: &EpochInfo<'_>, record: &mut EpochRecord);
}

/// Observer that adds nothing.
pub struct NoopObserver;

impl EpochObserver for NoopObserver {
    fn on_epoch(&mut self, _info: &EpochInfo<'_>, _record: &mut EpochRecord) {}
}

/// Fills truth-based fields from held-out target labels.
struct TruthObserver<'a> {
    x_target: &'a Mat,
    y_target: &'a [usize],
}

impl EpochObserver for TruthObserver<'_> {
    fn on_epoch(&mut self, info: &EpochInfo<'_>, record: &mut EpochRecord) {
        if let (Some(pseudo), Some(mask)) = (info.pseudo_labels, info.selection_mask) {
            let selected = mask.iter().filter(|&&m| m).count();
            if selected > 0 {
                let hits = pseudo
                    .iter()
                    .zip(mask)
                    .zip(self.y_target)
                    .filter(|((&p, &m), &t)| m && p == t)
                    .count();
                record.selection_accuracy = Some(hits as f64 / selected as f64);
            }
        }
        if let Ok(acc) = evaluate(info.model, self.x_target, self.y_target) {
            record.target_accuracy = Some(acc);
        }
    }
}

/// Argmax labels and a confidence mask from a column-stochastic probability
/// matrix. Ties pick the lowest class index; a column is selected when its
/// maximum strictly exceeds `tau`.
pub fn assign_pseudo_labels(probs: &Mat, tau: f64) -> Result<(Vec<usize>, Vec<bool>)> {
    if !tau.is_finite() {
        return Err(Error::InvalidArgument("tau must be finite".to_string()));
    }
    const COLUMN_SUM_TOL: f64 = 1e-6;
    let mut labels = Vec::with_capacity(probs.cols());
    let mut mask = Vec::with_capacity(probs.cols());
    for j in 0..probs.cols() {
        let col = probs.col(j);
        let sum: f64 = col.iter().sum();
        if !(sum - 1.0).abs().le(&COLUMN_SUM_TOL) || col.iter().any(|&p| !(0.0..=1.0 + COLUMN_SUM_TOL).contains(&p)) {
            return Err(Error::InvalidArgument(format!(
                "column {j} is not a probability vector (sum {sum})"
            )));
        }
        let (best, best_p) = col
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bp), (i, &p)| {
                if p > bp {
                    (i, p)
                } else {
                    (bi, bp)
                }
            });
        labels.push(best);
        mask.push(best_p > tau);
    }
    Ok((labels, mask))
}

/// Fraction of columns whose argmax prediction matches `labels`.
pub fn evaluate(params: &MlpParams, x: &Mat, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.cols() {
        return Err(Error::Dimension(format!(
            "{} labels for {} columns",
            labels.len(),
            x.cols()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty set".to_string(),
        ));
    }
    let trace = forward(params, x)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(j, &truth)| argmax(trace.probs.col(j)) == truth)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn argmax(col: &[f64]) -> usize {
    col.iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bp), (i, &p)| {
            if p > bp {
                (i, p)
            } else {
                (bi, bp)
            }
        })
        .0
}

/// One-hot label matrix for the source block of a batch (the first columns,
/// which are guaranteed labeled by construction).
fn source_one_hot(batch: &PartitionedBatch, n_source: usize) -> Mat {
    Mat::from_fn(batch.k(), n_source, |c, j| {
        if batch.labels()[j] == Some(c) {
            1.0
        } else {
            0.0
        }
    })
}

/// Scales every gradient tensor by `c` in place.
fn scale_grads(grads: &mut ParamGrads, c: f64) {
    for g in &mut grads.g_weights {
        for v in g.data_mut() {
            *v *= c;
        }
    }
    for b in &mut grads.g_biases {
        for v in b.iter_mut() {
            *v *= c;
        }
    }
    for v in grads.h_weight.data_mut() {
        *v *= c;
    }
    for v in grads.h_bias.iter_mut() {
        *v *= c;
    }
}

/// Nuclear norm, subgradient, and largest singular value in one pass.
fn nuclear_parts(m: &Mat, rel_tol: f64) -> Result<(f64, Mat, f64)> {
    let dec = svd(m)?;
    let r = dec.rank(m.rows(), m.cols(), rel_tol);
    let idx: Vec<usize> = (0..r).collect();
    let grad = dec
        .u
        .select_cols(&idx)?
        .matmul(&dec.v.select_cols(&idx)?.transpose())?;
    Ok((
        dec.sigma.iter().sum(),
        grad,
        dec.sigma.first().copied().unwrap_or(0.0),
    ))
}

/// Adds the gradient of the embedding ridge `lambda_norm * ||Z||_F^2` to a
/// raw geometric subgradient, returning the combined gradient and the raw
/// penalty value.
fn add_scale_ridge(mut grad: Mat, z: &Mat, lambda_norm: f64) -> Result<(Mat, f64)> {
    if lambda_norm == 0.0 {
        return Ok((grad, 0.0));
    }
    grad.add_assign_scaled(z, 2.0 * lambda_norm)?;
    let sq_fro = crate::mat::norm(z.data()).powi(2);
    Ok((grad, lambda_norm * sq_fro))
}

fn abort(stage: Stage, epoch: usize, reason: String) -> Error {
    Error::TrainingAbort {
        stage: stage.name(),
        epoch,
        reason,
    }
}

/// Losses and embedding gradient of the warm-up objective
/// `mean CE + lambda_db * L_DB(source classes) - lambda_tb * L_TB(domains)`,
/// where the transferability term compares whole domains rather than
/// per-class blocks.
struct WarmTerms {
    loss_tb_global: f64,
    loss_db_source: f64,
    grad: Mat,
    sigma_max: f64,
}

fn warm_go_terms(batch: &PartitionedBatch, cfg: &TrainConfig) -> Result<WarmTerms> {
    let go = cfg.go_config();
    let z = batch.features();
    let source_cols: Vec<usize> = (0..batch.n())
        .filter(|&j| batch.domains()[j] == crate::batch::Domain::Source)
        .collect();
    let target_cols: Vec<usize> = (0..batch.n())
        .filter(|&j| batch.domains()[j] == crate::batch::Domain::Target)
        .collect();
    if source_cols.is_empty() || target_cols.is_empty() {
        return Err(Error::Partition(
            "warm-up needs at least one column per domain".to_string(),
        ));
    }

    let (s_nuc, s_grad, s_sig) = nuclear_parts(&z.select_cols(&source_cols)?, go.rel_tol)?;
    let (t_nuc, t_grad, t_sig) = nuclear_parts(&z.select_cols(&target_cols)?, go.rel_tol)?;
    let (all_nuc, all_grad, _) = nuclear_parts(z, go.rel_tol)?;
    let loss_tb_global = s_nuc + t_nuc - all_nuc;

    let mut grad = Mat::zeros(z.rows(), z.cols());
    if cfg.lambda_tb != 0.0 {
        grad.scatter_add_cols(&source_cols, &s_grad, -cfg.lambda_tb)?;
        grad.scatter_add_cols(&target_cols, &t_grad, -cfg.lambda_tb)?;
        grad.add_assign_scaled(&all_grad, cfg.lambda_tb)?;
    }

    let mut loss_db_source = -s_nuc;
    for c in 0..batch.k() {
        let cols = batch.class_domain_cols(c, crate::batch::Domain::Source);
        if cols.is_empty() {
            continue;
        }
        let (c_nuc, c_grad, _) = nuclear_parts(&z.select_cols(cols)?, go.rel_tol)?;
        loss_db_source += c_nuc;
        if cfg.lambda_db != 0.0 {
            grad.scatter_add_cols(cols, &c_grad, cfg.lambda_db)?;
        }
    }
    if cfg.lambda_db != 0.0 {
        grad.scatter_add_cols(&source_cols, &s_grad, -cfg.lambda_db)?;
    }

    Ok(WarmTerms {
        loss_tb_global,
        loss_db_source,
        grad,
        sigma_max: s_sig.max(t_sig),
    })
}

/// Forward pass, task losses, and the parameter step shared by both stages.
///
/// `go_grad` is the subgradient of the raw geometric terms with respect to
/// the embedding; it is injected below the classifier, which only ever
/// receives the task gradient. The step follows the per-column objective
/// `mean CE + lambda_t * mean entropy + L_GO / n_batch`, so the geometric
/// pull per column is commensurate with the task losses; afterwards every
/// weight matrix shrinks by the decoupled decay factor `1 - lr *
/// weight_decay` (running the decay through the adaptive moments instead
/// would let large geometric gradients normalize it away).
#[allow(clippy::too_many_arguments)]
fn step_params(
    model: &mut MlpParams,
    adam: &mut AdamState,
    trace: &ForwardTrace,
    batch: &PartitionedBatch,
    n_source: usize,
    go_grad: &Mat,
    lambda_t: f64,
    lr: f64,
    weight_decay: f64,
) -> Result<(f64, Option<f64>)> {
    let n_target = batch.n() - n_source;
    let y = source_one_hot(batch, n_source);
    let ce_mean = loss_source_ce(trace, &y)? / n_source as f64;
    let ent_mean = if n_target > 0 && lambda_t != 0.0 {
        Some(loss_target_entropy(trace, n_source)? / n_target as f64)
    } else {
        None
    };

    // `backward` differentiates summed task losses; rescale so the step
    // follows the means reported above: pass (n_s / n_batch) * go_grad and
    // lambda_t * n_s / n_t, then divide everything by n_s.
    let ns = n_source as f64;
    let lambda_t_eff = if n_target > 0 {
        lambda_t * ns / n_target as f64
    } else {
        0.0
    };
    let go_scale = ns / batch.n() as f64;
    let mut grads = backward(model, trace, &y, &go_grad.scaled(go_scale), lambda_t_eff)?;
    scale_grads(&mut grads, 1.0 / ns);
    adam_step(
        model,
        &grads,
        adam,
        &AdamHyper {
            lr,
            ..AdamHyper::default()
        },
    )?;
    if weight_decay != 0.0 {
        let shrink = 1.0 - lr * weight_decay;
        for layer in &mut model.g_layers {
            for v in layer.weight.data_mut() {
                *v *= shrink;
            }
        }
        for v in model.h_weight.data_mut() {
            *v *= shrink;
        }
    }
    Ok((ce_mean, ent_mean))
}

/// Runs `t_warm` epochs of the warm-up objective, appending one record per
/// epoch. The model and optimizer state advance in place.
pub fn warm_up_stage(
    model: &mut MlpParams,
    adam: &mut AdamState,
    view: &TrainView<'_>,
    cfg: &TrainConfig,
    report: &mut RunReport,
    observer: &mut dyn EpochObserver,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let epoch_base = report.records.len();
    // No pseudo-labels yet: every target column rides along unlabeled.
    let no_labels = vec![0usize; view.n_target()];
    let no_mask = vec![false; view.n_target()];
    for e in 0..cfg.t_warm {
        let epoch = epoch_base + e;
        let batch = assemble_batch(view, &no_labels, &no_mask, cfg.batch, rng)?;
        let n_source = batch.n() - batch.unlabeled_cols().len();
        let trace = forward(model, batch.features())?;
        if !trace.z().is_finite() {
            return Err(abort(
                Stage::WarmUp,
                epoch,
                "embedding went non-finite; the parameters diverged".to_string(),
            ));
        }
        let zbatch = batch.with_features(trace.z().clone())?;
        let terms = warm_go_terms(&zbatch, cfg)?;
        let (go_grad, scale_pen) = add_scale_ridge(terms.grad, trace.z(), cfg.lambda_norm)?;

        let loss_go = cfg.lambda_db * terms.loss_db_source - cfg.lambda_tb * terms.loss_tb_global;
        let (ce_mean, _) = step_params(
            model,
            adam,
            &trace,
            &batch,
            n_source,
            &go_grad,
            0.0,
            cfg.lr,
            cfg.weight_decay,
        )?;
        let loss_total = ce_mean + (loss_go + scale_pen) / batch.n() as f64;
        if !loss_total.is_finite() {
            return Err(abort(
                Stage::WarmUp,
                epoch,
                format!(
                    "non-finite loss (ce {ce_mean}, tb {}, db {})",
                    terms.loss_tb_global, terms.loss_db_source
                ),
            ));
        }

        let mut record = EpochRecord {
            stage: Stage::WarmUp,
            epoch,
            loss_ce_source: ce_mean,
            loss_entropy_target: None,
            loss_tb: terms.loss_tb_global,
            loss_db: terms.loss_db_source,
            loss_go,
            loss_total,
            tb_bound_slack: Some(
                tb_upper_bound(terms.sigma_max, trace.z().rows()) - terms.loss_tb_global,
            ),
            go_bound_slack: None,
            selection_rate: None,
            selection_accuracy: None,
            target_accuracy: None,
        };
        observer.on_epoch(
            &EpochInfo {
                stage: Stage::WarmUp,
                epoch,
                model,
                pseudo_labels: None,
                selection_mask: None,
            },
            &mut record,
        );
        report.records.push(record);
    }
    Ok(())
}

/// Runs `t_adapt` epochs of the pseudo-labeled geometric objective,
/// refreshing pseudo-labels every `refresh_period` epochs.
pub fn goal_stage(
    model: &mut MlpParams,
    adam: &mut AdamState,
    view: &TrainView<'_>,
    cfg: &TrainConfig,
    report: &mut RunReport,
    observer: &mut dyn EpochObserver,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let epoch_base = report.records.len();
    let go_cfg = cfg.go_config();
    let policy = TbClassPolicy::SkipThin {
        min_cols_per_domain: MIN_CLASS_COLS_FOR_TB,
    };
    let mut pseudo: Vec<usize> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    for e in 0..cfg.t_adapt {
        let epoch = epoch_base + e;
        if e % cfg.refresh_period == 0 {
            let trace_t = forward(model, view.x_target())?;
            if !trace_t.probs.is_finite() {
                return Err(abort(
                    Stage::Goal,
                    epoch,
                    "target predictions went non-finite; the parameters diverged".to_string(),
                ));
            }
            let (p, m) = assign_pseudo_labels(&trace_t.probs, cfg.tau)?;
            pseudo = p;
            mask = m;
            if mask.iter().all(|&s| !s) {
                return Err(abort(
                    Stage::Goal,
                    epoch,
                    format!(
                        "no target column cleared the confidence threshold tau = {}; \
                         lower tau or extend the warm-up",
                        cfg.tau
                    ),
                ));
            }
        }
        let batch = assemble_batch(view, &pseudo, &mask, cfg.batch, rng)?;
        let n_source = batch
            .domains()
            .iter()
            .filter(|&&d| d == crate::batch::Domain::Source)
            .count();
        let trace = forward(model, batch.features())?;
        if !trace.z().is_finite() {
            return Err(abort(
                Stage::Goal,
                epoch,
                "embedding went non-finite; the parameters diverged".to_string(),
            ));
        }
        let zbatch = batch.with_features(trace.z().clone())?;
        let terms = eval_go(&zbatch, &go_cfg, policy)?;
        let (go_grad, scale_pen) = add_scale_ridge(terms.grad.clone(), trace.z(), cfg.lambda_norm)?;

        let (ce_mean, ent_mean) = step_params(
            model,
            adam,
            &trace,
            &batch,
            n_source,
            &go_grad,
            cfg.lambda_t,
            cfg.lr,
            cfg.weight_decay,
        )?;
        let loss_total = ce_mean
            + cfg.lambda_t * ent_mean.unwrap_or(0.0)
            + (terms.loss_go + scale_pen) / batch.n() as f64;
        if !loss_total.is_finite() {
            return Err(abort(
                Stage::Goal,
                epoch,
                format!(
                    "non-finite loss (ce {ce_mean}, entropy {ent_mean:?}, tb {}, db {})",
                    terms.loss_tb, terms.loss_db
                ),
            ));
        }

        let d = trace.z().rows();
        let tb_bound_slack = terms
            .per_class_tb
            .iter()
            .zip(&terms.class_sigma_max)
            .filter_map(|(tb, sig)| Some(tb_upper_bound((*sig)?, d) - (*tb)?))
            .min_by(f64::total_cmp);
        let go_bound_slack = (cfg.lambda_db > 0.0).then(|| {
            terms.loss_go / cfg.lambda_db
                - go_lower_bound(
                    cfg.lambda_tb / cfg.lambda_db,
                    terms.batch_sigma_max,
                    d,
                    batch.k(),
                )
        });

        let selected = mask.iter().filter(|&&s| s).count();
        let mut record = EpochRecord {
            stage: Stage::Goal,
            epoch,
            loss_ce_source: ce_mean,
            loss_entropy_target: ent_mean,
            loss_tb: terms.loss_tb,
            loss_db: terms.loss_db,
            loss_go: terms.loss_go,
            loss_total,
            tb_bound_slack,
            go_bound_slack,
            selection_rate: Some(selected as f64 / view.n_target() as f64),
            selection_accuracy: None,
            target_accuracy: None,
        };
        observer.on_epoch(
            &EpochInfo {
                stage: Stage::Goal,
                epoch,
                model,
                pseudo_labels: Some(&pseudo),
                selection_mask: Some(&mask),
            },
            &mut record,
        );
        report.records.push(record);
    }
    Ok(())
}

/// Full run: fresh model, warm-up stage, main stage, final evaluation.
/// Deterministic per `(bundle, cfg)`; ground-truth target labels feed only
/// the report's accuracy fields, never the stages.
pub fn train(bundle: &crate::data::DatasetBundle, cfg: &TrainConfig) -> Result<(MlpParams, RunReport)> {
    cfg.validate()?;
    let view = bundle.train_view();
    let mut model = MlpParams::new_seeded(&cfg.dims(view.ambient_dim()), view.k(), cfg.seed)?;
    let mut adam = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut report = RunReport::new(cfg.clone());

    let result = match bundle.y_target_true() {
        Some(y_true) => {
            let mut obs = TruthObserver {
                x_target: bundle.x_target(),
                y_target: y_true,
            };
            warm_up_stage(&mut model, &mut adam, &view, cfg, &mut report, &mut obs, &mut rng)
                .and_then(|()| {
                    goal_stage(&mut model, &mut adam, &view, cfg, &mut report, &mut obs, &mut rng)
                })
        }
        None => {
            let mut obs = NoopObserver;
            warm_up_stage(&mut model, &mut adam, &view, cfg, &mut report, &mut obs, &mut rng)
                .and_then(|()| {
                    goal_stage(&mut model, &mut adam, &view, cfg, &mut report, &mut obs, &mut rng)
                })
        }
    };
    result?;

    report.final_source_accuracy = Some(evaluate(&model, view.x_source(), view.y_source())?);
    if let Some(y_true) = bundle.y_target_true() {
        report.final_target_accuracy = Some(evaluate(&model, bundle.x_target(), y_true)?);
    }
    Ok((model, report))
}
