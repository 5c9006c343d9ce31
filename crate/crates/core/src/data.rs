//! Synthetic two-domain clustered datasets.
//!
//! The generator draws `k` well-separated class centers on a sphere, samples
//! Gaussian clusters around them for the source domain, and produces the
//! target domain by pushing the centers through a fixed affine domain-shift
//! map (rotation in a random 2-plane, per-axis scaling, translation) before
//! adding fresh noise. The shift is deliberately linear so that a small
//! feature extractor can undo it, while still being large enough that a
//! source-only classifier measurably fails on the target domain.
//!
//! Bundles persist as diffable text: one CSV per feature matrix (one sample
//! per row), one CSV per label column, and a JSON manifest tying them
//! together.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{Domain, PartitionedBatch};
use crate::error::{Error, Result};
use crate::mat::{self, Mat};

/// Pairwise class-center separation enforced by [`generate_synthetic`],
/// in units of the within-class noise level.
pub const MIN_CENTER_SEPARATION_SIGMAS: f64 = 4.0;

/// Center draws attempted before giving up on the separation constraint.
const MAX_CENTER_DRAWS: usize = 10_000;

/// Manifest filename inside a bundle directory.
const MANIFEST_FILE: &str = "manifest.json";
const SOURCE_FEATURES_FILE: &str = "source_features.csv";
const SOURCE_LABELS_FILE: &str = "source_labels.csv";
const TARGET_FEATURES_FILE: &str = "target_features.csv";
const TARGET_LABELS_FILE: &str = "target_labels.csv";

/// Parameters of the synthetic generator.
///
/// The domain-shift map sends a point `x` to `S · R(θ) · x + t`, where
/// `R(θ)` rotates by `rotation_radians` inside a seeded random 2-plane,
/// `S` scales each axis by a factor drawn uniformly between 1 and
/// `axis_scale_max`, and `t` is a seeded random direction of length
/// `translation_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Number of classes.
    pub k: usize,
    /// Ambient feature dimension of the generated samples.
    pub ambient_dim: usize,
    /// Samples per class per domain.
    pub n_per_class_per_domain: usize,
    /// Radius of the sphere the class centers are drawn on.
    pub center_scale: f64,
    /// Standard deviation of the isotropic within-class noise.
    pub noise_sigma: f64,
    /// Rotation angle of the domain shift, in radians, within `[0, π]`.
    pub rotation_radians: f64,
    /// Length of the domain-shift translation vector.
    pub translation_scale: f64,
    /// Upper end of the per-axis scaling factors (1.0 disables scaling).
    pub axis_scale_max: f64,
    /// Seed for every random draw the generator makes.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            k: 3,
            ambient_dim: 20,
            n_per_class_per_domain: 100,
            center_scale: 5.0,
            noise_sigma: 1.4,
            rotation_radians: std::f64::consts::FRAC_PI_6,
            translation_scale: 9.0,
            axis_scale_max: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Checks counts, noise level, and shift parameters.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.ambient_dim == 0 || self.n_per_class_per_domain == 0 {
            return Err(Error::InvalidArgument(
                "class count, ambient dimension, and samples per class must all be >= 1"
                    .to_string(),
            ));
        }
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("noise_sigma", self.noise_sigma),
            ("rotation_radians", self.rotation_radians),
            ("translation_scale", self.translation_scale),
            ("axis_scale_max", self.axis_scale_max),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite")));
            }
        }
        if self.center_scale <= 0.0 {
            return Err(Error::InvalidArgument(
                "center_scale must be positive".to_string(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument(
                "noise_sigma must be non-negative".to_string(),
            ));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.rotation_radians) {
            return Err(Error::InvalidArgument(format!(
                "rotation angle {} is outside [0, pi]",
                self.rotation_radians
            )));
        }
        if self.translation_scale < 0.0 {
            return Err(Error::InvalidArgument(
                "translation_scale must be non-negative".to_string(),
            ));
        }
        if self.axis_scale_max <= 0.0 {
            return Err(Error::InvalidArgument(
                "axis_scale_max must be positive".to_string(),
            ));
        }
        if self.rotation_radians > 0.0 && self.ambient_dim < 2 {
            return Err(Error::InvalidArgument(
                "a rotation plane needs ambient dimension >= 2".to_string(),
            ));
        }
        Ok(())
    }
}

/// A two-domain dataset: labeled source samples, target samples, and the
/// target ground truth kept only for evaluation.
///
/// Training code never sees `y_target_true`; the trainer's stage functions
/// accept a [`TrainView`], which omits it by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    x_source: Mat,
    y_source: Vec<usize>,
    x_target: Mat,
    y_target_true: Option<Vec<usize>>,
    k: usize,
    generator: Option<SyntheticSpec>,
}

impl DatasetBundle {
    /// Builds a bundle, checking label ranges, source class coverage, and
    /// matching dimensions.
    pub fn new(
        x_source: Mat,
        y_source: Vec<usize>,
        x_target: Mat,
        y_target_true: Option<Vec<usize>>,
        k: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "class count k must be >= 1".to_string(),
            ));
        }
        if x_source.rows() != x_target.rows() {
            return Err(Error::Dimension(format!(
                "source features have {} rows, target features {}",
                x_source.rows(),
                x_target.rows()
            )));
        }
        if y_source.len() != x_source.cols() {
            return Err(Error::Dimension(format!(
                "{} source labels for {} source columns",
                y_source.len(),
                x_source.cols()
            )));
        }
        if let Some(y) = &y_target_true {
            if y.len() != x_target.cols() {
                return Err(Error::Dimension(format!(
                    "{} target labels for {} target columns",
                    y.len(),
                    x_target.cols()
                )));
            }
            if let Some(&bad) = y.iter().find(|&&c| c >= k) {
                return Err(Error::InvalidArgument(format!(
                    "target label {bad} outside 0..{k}"
                )));
            }
        }
        let mut seen = vec![false; k];
        for &c in &y_source {
            if c >= k {
                return Err(Error::InvalidArgument(format!(
                    "source label {c} outside 0..{k}"
                )));
            }
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Partition(format!(
                "class {missing} has no source samples"
            )));
        }
        if !x_source.is_finite() || !x_target.is_finite() {
            return Err(Error::NonFinite("dataset features".to_string()));
        }
        Ok(DatasetBundle {
            x_source,
            y_source,
            x_target,
            y_target_true,
            k,
            generator: None,
        })
    }

    pub fn x_source(&self) -> &Mat {
        &self.x_source
    }

    pub fn y_source(&self) -> &[usize] {
        &self.y_source
    }

    pub fn x_target(&self) -> &Mat {
        &self.x_target
    }

    /// Ground-truth target labels, present only for evaluation.
    pub fn y_target_true(&self) -> Option<&[usize]> {
        self.y_target_true.as_deref()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Ambient feature dimension.
    pub fn ambient_dim(&self) -> usize {
        self.x_source.rows()
    }

    /// The spec that generated this bundle, when it came from
    /// [`generate_synthetic`] (persisted through save/load).
    pub fn generator(&self) -> Option<&SyntheticSpec> {
        self.generator.as_ref()
    }

    /// The bundle minus ground-truth target labels; the only form training
    /// code accepts.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            x_source: &self.x_source,
            y_source: &self.y_source,
            x_target: &self.x_target,
            k: self.k,
        }
    }
}

/// Borrowed view of a bundle without ground-truth target labels.
///
/// Stage functions in the trainer take this type rather than
/// [`DatasetBundle`], so no code path inside a training loop can read the
/// target ground truth.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    x_source: &'a Mat,
    y_source: &'a [usize],
    x_target: &'a Mat,
    k: usize,
}

impl<'a> TrainView<'a> {
    pub fn x_source(&self) -> &'a Mat {
        self.x_source
    }

    pub fn y_source(&self) -> &'a [usize] {
        self.y_source
    }

    pub fn x_target(&self) -> &'a Mat {
        self.x_target
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_source(&self) -> usize {
        self.x_source.cols()
    }

    pub fn n_target(&self) -> usize {
        self.x_target.cols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.x_source.rows()
    }
}

/// How [`assemble_batch`] picks columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSelection {
    /// Every source column, every target column; unselected target columns
    /// appear unlabeled.
    Full,
    /// Per class and domain, at most this many columns sampled without
    /// replacement, plus up to `k` times this many unselected target columns
    /// as the unlabeled block.
    Balanced { per_class_per_domain: usize },
}

/// Draws a dataset from the spec. Deterministic per seed: rotation plane,
/// scaling factors, translation direction, and every noise sample follow a
/// fixed draw schedule.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let d = spec.ambient_dim;
    let k = spec.k;
    let n = spec.n_per_class_per_domain;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let centers = draw_separated_centers(spec, &mut rng)?;

    // The shift map's own randomness is drawn up front so that changing the
    // angle or scale values never shifts the noise stream.
    let (plane_u, plane_v) = if d >= 2 {
        let u = unit_vector(d, &mut rng);
        let v = orthonormal_complement(&u, &mut rng);
        (u, v)
    } else {
        (vec![0.0; d], vec![0.0; d])
    };
    let translation_dir = unit_vector(d, &mut rng);
    let lo = spec.axis_scale_max.min(1.0);
    let hi = spec.axis_scale_max.max(1.0);
    let axis_scale: Vec<f64> = (0..d).map(|_| rng.gen_range(lo..=hi)).collect();

    let shifted_centers: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            let mut x = rotate_in_plane(c, &plane_u, &plane_v, spec.rotation_radians);
            for (i, xi) in x.iter_mut().enumerate() {
                *xi *= axis_scale[i];
                *xi += spec.translation_scale * translation_dir[i];
            }
            x
        })
        .collect();

    let mut x_source = Mat::zeros(d, k * n);
    let mut y_source = Vec::with_capacity(k * n);
    for c in 0..k {
        for j in 0..n {
            let col = x_source.col_mut(c * n + j);
            for (i, v) in col.iter_mut().enumerate() {
                *v = centers[c][i] + spec.noise_sigma * mat::standard_normal(&mut rng);
            }
            y_source.push(c);
        }
    }
    let mut x_target = Mat::zeros(d, k * n);
    let mut y_target = Vec::with_capacity(k * n);
    for c in 0..k {
        for j in 0..n {
            let col = x_target.col_mut(c * n + j);
            for (i, v) in col.iter_mut().enumerate() {
                *v = shifted_centers[c][i] + spec.noise_sigma * mat::standard_normal(&mut rng);
            }
            y_target.push(c);
        }
    }

    let mut bundle = DatasetBundle::new(x_source, y_source, x_target, Some(y_target), k)?;
    bundle.generator = Some(spec.clone());
    Ok(bundle)
}

/// Class centers on the sphere of radius `center_scale`, redrawn until each
/// pair is at least [`MIN_CENTER_SEPARATION_SIGMAS`] noise widths apart.
fn draw_separated_centers(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let min_gap = MIN_CENTER_SEPARATION_SIGMAS * spec.noise_sigma;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.k);
    let mut draws = 0;
    while centers.len() < spec.k {
        draws += 1;
        if draws > MAX_CENTER_DRAWS {
            return Err(Error::InvalidArgument(format!(
                "could not place {} centers at pairwise distance >= {min_gap:.3} \
                 on a sphere of radius {}; lower noise_sigma or raise center_scale",
                spec.k, spec.center_scale
            )));
        }
        let cand: Vec<f64> = unit_vector(spec.ambient_dim, rng)
            .into_iter()
            .map(|v| v * spec.center_scale)
            .collect();
        let far_enough = centers.iter().all(|c| {
            let gap2: f64 = c
                .iter()
                .zip(&cand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            gap2.sqrt() >= min_gap
        });
        if far_enough {
            centers.push(cand);
        }
    }
    Ok(centers)
}

/// A uniformly random unit vector (isotropic Gaussian, normalized).
fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| mat::standard_normal(rng)).collect();
        let norm = mat::norm(&v);
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A unit vector orthogonal to `u` (Gram-Schmidt against a fresh draw).
fn orthonormal_complement(u: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v = unit_vector(u.len(), rng);
        let proj = mat::dot(u, &v);
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi -= proj * ui;
        }
        let norm = mat::norm(&v);
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Rotates `x` by `theta` in the plane spanned by the orthonormal pair
/// `(u, v)`, leaving the orthogonal complement fixed.
fn rotate_in_plane(x: &[f64], u: &[f64], v: &[f64], theta: f64) -> Vec<f64> {
    if theta == 0.0 {
        return x.to_vec();
    }
    let xu = mat::dot(x, u);
    let xv = mat::dot(x, v);
    let (sin, cos) = theta.sin_cos();
    x.iter()
        .enumerate()
        .map(|(i, &xi)| {
            xi + (cos - 1.0) * (xu * u[i] + xv * v[i]) + sin * (xu * v[i] - xv * u[i])
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    k: usize,
    ambient_dim: usize,
    n_source: usize,
    n_target: usize,
    has_target_labels: bool,
    generator: Option<SyntheticSpec>,
}

const MANIFEST_VERSION: u32 = 1;

/// Writes a bundle into `dir` as CSV files plus a JSON manifest. Floats are
/// written in shortest round-trip form, so a save/load cycle is exact.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        k: bundle.k,
        ambient_dim: bundle.ambient_dim(),
        n_source: bundle.x_source.cols(),
        n_target: bundle.x_target.cols(),
        has_target_labels: bundle.y_target_true.is_some(),
        generator: bundle.generator.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization failed: {e}")))?;
    fs::write(&manifest_path, text)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    write_features_csv(&dir.join(SOURCE_FEATURES_FILE), &bundle.x_source)?;
    write_labels_csv(&dir.join(SOURCE_LABELS_FILE), &bundle.y_source)?;
    write_features_csv(&dir.join(TARGET_FEATURES_FILE), &bundle.x_target)?;
    if let Some(y) = &bundle.y_target_true {
        write_labels_csv(&dir.join(TARGET_LABELS_FILE), y)?;
    }
    Ok(())
}

/// Reads a bundle previously written by [`save_bundle`], re-validating the
/// manifest against the CSV contents.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Parse {
            path: manifest_path.display().to_string(),
            line: 0,
            message: format!(
                "unsupported format version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            ),
        });
    }

    let x_source = read_features_csv(
        &dir.join(SOURCE_FEATURES_FILE),
        manifest.ambient_dim,
        manifest.n_source,
    )?;
    let y_source = read_labels_csv(&dir.join(SOURCE_LABELS_FILE), manifest.n_source, manifest.k)?;
    let x_target = read_features_csv(
        &dir.join(TARGET_FEATURES_FILE),
        manifest.ambient_dim,
        manifest.n_target,
    )?;
    let y_target = if manifest.has_target_labels {
        Some(read_labels_csv(
            &dir.join(TARGET_LABELS_FILE),
            manifest.n_target,
            manifest.k,
        )?)
    } else {
        None
    };

    let mut bundle = DatasetBundle::new(x_source, y_source, x_target, y_target, manifest.k)?;
    bundle.generator = manifest.generator;
    Ok(bundle)
}

fn write_features_csv(path: &Path, x: &Mat) -> Result<()> {
    let mut text = String::new();
    let header: Vec<String> = (0..x.rows()).map(|i| format!("x{i}")).collect();
    text.push_str(&header.join(","));
    text.push('\n');
    for j in 0..x.cols() {
        let col = x.col(j);
        for (i, v) in col.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            let _ = write!(text, "{v}");
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_labels_csv(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::from("label\n");
    for c in labels {
        let _ = writeln!(text, "{c}");
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_features_csv(path: &Path, dim: usize, expected_rows: usize) -> Result<Mat> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header row".to_string()))?;
    let header_fields = header.split(',').count();
    if header_fields != dim {
        return Err(parse_err(
            1,
            format!("header names {header_fields} columns, manifest says {dim}"),
        ));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(expected_rows);
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut col = Vec::with_capacity(dim);
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|e| {
                parse_err(idx + 1, format!("bad floating-point field {field:?}: {e}"))
            })?;
            col.push(v);
        }
        if col.len() != dim {
            return Err(parse_err(
                idx + 1,
                format!("row has {} fields, expected {dim}", col.len()),
            ));
        }
        cols.push(col);
    }
    if cols.len() != expected_rows {
        return Err(parse_err(
            cols.len() + 1,
            format!(
                "file holds {} samples, manifest says {expected_rows}",
                cols.len()
            ),
        ));
    }
    Mat::from_cols(&cols)
}

fn read_labels_csv(path: &Path, expected_rows: usize, k: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header row".to_string()))?;
    if header.trim() != "label" {
        return Err(parse_err(1, format!("expected header \"label\", got {header:?}")));
    }
    let mut labels = Vec::with_capacity(expected_rows);
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let c: usize = line
            .trim()
            .parse()
            .map_err(|e| parse_err(idx + 1, format!("bad label {line:?}: {e}")))?;
        if c >= k {
            return Err(parse_err(
                idx + 1,
                format!("label {c} is outside 0..{k} declared by the manifest"),
            ));
        }
        labels.push(c);
    }
    if labels.len() != expected_rows {
        return Err(parse_err(
            labels.len() + 1,
            format!(
                "file holds {} labels, the feature file {expected_rows} samples",
                labels.len()
            ),
        ));
    }
    Ok(labels)
}

/// Builds a [`PartitionedBatch`] over raw inputs: source columns first with
/// ground-truth labels, then target columns labeled by `pseudo_labels` where
/// `selection_mask` is true and unlabeled elsewhere.
///
/// `Balanced` mode subsamples each (class, domain) list without replacement
/// using `rng`; `Full` mode ignores `rng` and is deterministic.
pub fn assemble_batch(
    view: &TrainView,
    pseudo_labels: &[usize],
    selection_mask: &[bool],
    selection: BatchSelection,
    rng: &mut ChaCha8Rng,
) -> Result<PartitionedBatch> {
    let k = view.k();
    let n_t = view.n_target();
    if pseudo_labels.len() != n_t || selection_mask.len() != n_t {
        return Err(Error::InvalidArgument(format!(
            "{} pseudo-labels and {} mask entries for {n_t} target columns",
            pseudo_labels.len(),
            selection_mask.len()
        )));
    }
    for (j, (&c, &sel)) in pseudo_labels.iter().zip(selection_mask).enumerate() {
        if sel && c >= k {
            return Err(Error::InvalidArgument(format!(
                "selected target column {j} has pseudo-label {c}, outside 0..{k}"
            )));
        }
    }

    let mut source_by_class = vec![Vec::new(); k];
    for (j, &c) in view.y_source().iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidArgument(format!(
                "source label {c} outside 0..{k}"
            )));
        }
        source_by_class[c].push(j);
    }
    if let Some(missing) = source_by_class.iter().position(|l| l.is_empty()) {
        return Err(Error::Partition(format!(
            "class {missing} has no source samples"
        )));
    }
    let mut target_by_class = vec![Vec::new(); k];
    let mut unselected = Vec::new();
    for j in 0..n_t {
        if selection_mask[j] {
            target_by_class[pseudo_labels[j]].push(j);
        } else {
            unselected.push(j);
        }
    }

    let (source_idx, target_idx, unlabeled_idx) = match selection {
        BatchSelection::Full => (
            (0..view.n_source()).collect::<Vec<_>>(),
            target_by_class.concat(),
            unselected,
        ),
        BatchSelection::Balanced {
            per_class_per_domain: m,
        } => {
            if m == 0 {
                return Err(Error::InvalidArgument(
                    "balanced batches need per_class_per_domain >= 1".to_string(),
                ));
            }
            let mut source_idx = Vec::new();
            let mut target_idx = Vec::new();
            for c in 0..k {
                source_idx.extend(sample_without_replacement(&source_by_class[c], m, rng));
                target_idx.extend(sample_without_replacement(&target_by_class[c], m, rng));
            }
            let unlabeled = sample_without_replacement(&unselected, k * m, rng);
            (source_idx, target_idx, unlabeled)
        }
    };

    let x_s = view.x_source().select_cols(&source_idx)?;
    let x_t = view
        .x_target()
        .select_cols(&[target_idx.clone(), unlabeled_idx.clone()].concat())?;
    let z = Mat::concat_cols(&[&x_s, &x_t])?;

    let mut domain = vec![Domain::Source; source_idx.len()];
    domain.extend(std::iter::repeat(Domain::Target).take(target_idx.len() + unlabeled_idx.len()));
    let mut label: Vec<Option<usize>> = source_idx
        .iter()
        .map(|&j| Some(view.y_source()[j]))
        .collect();
    label.extend(target_idx.iter().map(|&j| Some(pseudo_labels[j])));
    label.extend(std::iter::repeat(None).take(unlabeled_idx.len()));

    PartitionedBatch::new(z, domain, label, k)
}

/// Up to `m` elements of `pool` without replacement, returned in ascending
/// order so the batch layout is a function of the chosen set alone.
fn sample_without_replacement(pool: &[usize], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= m {
        return pool.to_vec();
    }
    let mut chosen: Vec<usize> = pool.choose_multiple(rng, m).copied().collect();
    chosen.sort_unstable();
    chosen
}
