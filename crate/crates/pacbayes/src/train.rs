//! Training objectives and the SGD loop that minimizes a risk certificate.
//!
//! Every objective is a certificate-shaped function of two quantities, the
//! sampled batch loss `p` and the divergence budget `K`, so each SGD step
//! combines the two gradient flows as
//!
//! ```text
//! direction = c_loss * grad(batch loss)
//!           + eta * c_kl * (1/n) * grad(divergence)
//! ```
//!
//! where `(c_loss, c_kl)` are the objective's partial derivatives at the
//! current `(p, K)` and `eta` rescales the divergence side. Three bound
//! families are supported, each in a plain and a rescaled ("tilde")
//! variant:
//!
//! * `f_pbq` / `tf_pbq`: the quadratic-in-`sqrt` relaxation, closed form;
//! * `f_rts` / `tf_rts`: the tighter square-root relaxation, closed form;
//! * `f_mb` / `tf_mb`: the numerically inverted kl bound, with the slope
//!   of the constraint taken through implicit differentiation.
//!
//! The tilde variants train the bounded cross-entropy as a surrogate for
//! the zero-one loss: the batch loss is rescaled by a rolling estimate of
//! the ratio between the two before the coefficients are evaluated, so
//! the optimizer follows a path shaped like the zero-one certificate
//! while still differentiating through the surrogate.

use std::collections::HashMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atlas::fmt_f64;
use crate::data::{load_idx, synthetic_blobs, Dataset};
use crate::error::{Error, Result};
use crate::grad::{
    implicit_coeffs, surrogate_coeffs, GradientSplit, SlopeEstimator,
};
use crate::kl::{kl_inverse, ComplexityBudget};
use crate::net::{
    init_prior, Architecture, GaussianPosterior, LossKind, NoiseDraws, ParamGrads,
};

/// Rolling window (in batches) for the surrogate-to-target slope.
pub const SLOPE_WINDOW: usize = 100;
/// Bisection tolerance for per-batch inversions inside the training loop.
pub const MB_INVERSION_TOL: f64 = 1e-10;
/// RNG stream for training-time noise; stream 0 seeds the prior and
/// streams from [`crate::cert::MC_STREAM_BASE`] up are certification draws.
pub const TRAIN_NOISE_STREAM: u64 = 1;

/// Batch loss is clamped into this interval before coefficients are
/// evaluated, keeping every objective differentiable at the edges.
const P_FLOOR: f64 = 1e-8;
const P_CEIL: f64 = 1.0 - 1e-6;

/// The three certificate shapes an objective can follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundFamily {
    /// Quadratic-in-`sqrt` relaxation, closed-form partials.
    Pbq,
    /// Square-root relaxation, closed-form partials.
    Rts,
    /// Numerically inverted kl bound, implicit partials.
    InvertedKl,
}

/// A training objective: a bound family, optionally driven through the
/// rescaled surrogate loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveKind {
    pub family: BoundFamily,
    pub surrogate: bool,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        ObjectiveKind { family: BoundFamily::Pbq, surrogate: false },
        ObjectiveKind { family: BoundFamily::Rts, surrogate: false },
        ObjectiveKind { family: BoundFamily::InvertedKl, surrogate: false },
        ObjectiveKind { family: BoundFamily::Pbq, surrogate: true },
        ObjectiveKind { family: BoundFamily::Rts, surrogate: true },
        ObjectiveKind { family: BoundFamily::InvertedKl, surrogate: true },
    ];

    pub fn parse(s: &str) -> Result<Self> {
        let kind = match s {
            "f_pbq" => ObjectiveKind { family: BoundFamily::Pbq, surrogate: false },
            "f_rts" => ObjectiveKind { family: BoundFamily::Rts, surrogate: false },
            "f_mb" => ObjectiveKind { family: BoundFamily::InvertedKl, surrogate: false },
            "tf_pbq" => ObjectiveKind { family: BoundFamily::Pbq, surrogate: true },
            "tf_rts" => ObjectiveKind { family: BoundFamily::Rts, surrogate: true },
            "tf_mb" => ObjectiveKind { family: BoundFamily::InvertedKl, surrogate: true },
            other => {
                return Err(Error::invalid(format!(
                    "unknown objective `{other}` (expected one of f_pbq, f_rts, f_mb, \
                     tf_pbq, tf_rts, tf_mb)"
                )))
            }
        };
        Ok(kind)
    }

    pub fn name(self) -> &'static str {
        match (self.family, self.surrogate) {
            (BoundFamily::Pbq, false) => "f_pbq",
            (BoundFamily::Rts, false) => "f_rts",
            (BoundFamily::InvertedKl, false) => "f_mb",
            (BoundFamily::Pbq, true) => "tf_pbq",
            (BoundFamily::Rts, true) => "tf_rts",
            (BoundFamily::InvertedKl, true) => "tf_mb",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a training run needs besides the dataset itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub sigma0: f64,
    pub objective: ObjectiveKind,
    /// Scale on the divergence side of the step direction.
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Confidence budget of the main certificate.
    pub delta: f64,
    /// Confidence budget of the Monte Carlo loss estimate.
    pub delta_mc: f64,
    pub mc_samples: usize,
    pub p_min: f64,
    /// Number of training examples the certificate is stated over.
    pub n_train: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::new(vec![784, 100, 10]).expect("static sizes"),
            sigma0: 0.04,
            objective: ObjectiveKind { family: BoundFamily::InvertedKl, surrogate: true },
            eta: 1.0,
            epochs: 20,
            batch_size: 250,
            learning_rate: 0.005,
            momentum: 0.9,
            seed: 0,
            delta: 0.025,
            delta_mc: 0.01,
            mc_samples: 10_000,
            p_min: 1e-4,
            n_train: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma0.is_finite() || self.sigma0 <= 0.0 {
            return Err(Error::config("sigma0", "must be positive"));
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(Error::config("eta", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.n_train < 8 {
            return Err(Error::config("n_train", "must be at least 8"));
        }
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return Err(Error::config(
                "batch_size",
                format!("must sit in 1..={}", self.n_train),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must sit in [0, 1)"));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 || self.delta >= 1.0 {
            return Err(Error::config("delta", "must sit in (0, 1)"));
        }
        if !self.delta_mc.is_finite() || self.delta_mc <= 0.0 || self.delta_mc >= 1.0 {
            return Err(Error::config("delta_mc", "must sit in (0, 1)"));
        }
        if self.delta + self.delta_mc >= 1.0 {
            return Err(Error::config(
                "delta_mc",
                "delta + delta_mc must stay below 1",
            ));
        }
        if self.mc_samples < 100 {
            return Err(Error::config("mc_samples", "must be at least 100"));
        }
        let classes = self.arch.output_dim();
        if !self.p_min.is_finite() || self.p_min <= 0.0 || self.p_min >= 1.0 / classes as f64 {
            return Err(Error::config(
                "p_min",
                format!("must sit in (0, 1/{classes})"),
            ));
        }
        Ok(())
    }
}

/// Where the dataset comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// Generated class-prototype blobs; the class count follows the
    /// network output width.
    Synthetic { noise_sd: f64, seed: u64 },
    /// IDX image/label files on disk.
    Idx { images: PathBuf, labels: PathBuf },
}

impl DataSpec {
    pub fn synthetic(noise_sd: f64, seed: u64) -> Result<Self> {
        if !noise_sd.is_finite() || noise_sd < 0.0 {
            return Err(Error::config("data_noise", "must be >= 0"));
        }
        Ok(DataSpec::Synthetic { noise_sd, seed })
    }
}

/// A parsed run description: hyperparameters plus data source.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub data: DataSpec,
}

impl RunSpec {
    /// Materializes the dataset this run trains and certifies on.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSpec::Synthetic { noise_sd, seed } => synthetic_blobs(
                self.train.n_train,
                self.train.arch.input_dim(),
                self.train.arch.output_dim(),
                *noise_sd,
                *seed,
            ),
            DataSpec::Idx { images, labels } => {
                let ds = load_idx(images, labels)?;
                if ds.dim() != self.train.arch.input_dim() {
                    return Err(Error::invalid(format!(
                        "dataset has {} features per example, network expects {}",
                        ds.dim(),
                        self.train.arch.input_dim()
                    )));
                }
                Ok(ds)
            }
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_arch(value: &str) -> Result<Architecture> {
    let sizes = value
        .split(',')
        .map(|s| parse_value::<usize>("arch", s.trim()))
        .collect::<Result<Vec<_>>>()?;
    Architecture::new(sizes).map_err(|e| Error::config("arch", e.to_string()))
}

/// Parses the `key = value` run description format. Lines starting with
/// `#` and blank lines are skipped; every key has a default except the
/// IDX paths, which are required once `data = idx` is chosen. Unknown
/// and duplicate keys are errors.
pub fn parse_run_spec(text: &str) -> Result<RunSpec> {
    let mut raw: HashMap<String, String> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if raw.insert(key.clone(), value).is_some() {
            return Err(Error::config(key, "duplicate key"));
        }
    }

    let mut take = |key: &str| raw.remove(key);
    let mut config = TrainConfig::default();
    if let Some(v) = take("arch") {
        config.arch = parse_arch(&v)?;
    }
    if let Some(v) = take("sigma0") {
        config.sigma0 = parse_value("sigma0", &v)?;
    }
    if let Some(v) = take("objective") {
        config.objective =
            ObjectiveKind::parse(&v).map_err(|e| Error::config("objective", e.to_string()))?;
    }
    if let Some(v) = take("eta") {
        config.eta = parse_value("eta", &v)?;
    }
    if let Some(v) = take("epochs") {
        config.epochs = parse_value("epochs", &v)?;
    }
    if let Some(v) = take("batch_size") {
        config.batch_size = parse_value("batch_size", &v)?;
    }
    if let Some(v) = take("learning_rate") {
        config.learning_rate = parse_value("learning_rate", &v)?;
    }
    if let Some(v) = take("momentum") {
        config.momentum = parse_value("momentum", &v)?;
    }
    if let Some(v) = take("seed") {
        config.seed = parse_value("seed", &v)?;
    }
    if let Some(v) = take("delta") {
        config.delta = parse_value("delta", &v)?;
    }
    if let Some(v) = take("delta_mc") {
        config.delta_mc = parse_value("delta_mc", &v)?;
    }
    if let Some(v) = take("mc_samples") {
        config.mc_samples = parse_value("mc_samples", &v)?;
    }
    if let Some(v) = take("p_min") {
        config.p_min = parse_value("p_min", &v)?;
    }
    if let Some(v) = take("n_train") {
        config.n_train = parse_value("n_train", &v)?;
    }

    let data_kind = take("data").unwrap_or_else(|| "synthetic".to_string());
    let data_noise = take("data_noise");
    let data_seed = take("data_seed");
    let idx_images = take("idx_images");
    let idx_labels = take("idx_labels");
    let data = match data_kind.as_str() {
        "synthetic" => {
            let noise = match data_noise {
                Some(v) => parse_value("data_noise", &v)?,
                None => 0.35,
            };
            let seed = match data_seed {
                Some(v) => parse_value("data_seed", &v)?,
                None => 7,
            };
            if idx_images.is_some() || idx_labels.is_some() {
                return Err(Error::config(
                    "idx_images",
                    "only meaningful with data = idx",
                ));
            }
            DataSpec::synthetic(noise, seed)?
        }
        "idx" => {
            if data_noise.is_some() || data_seed.is_some() {
                return Err(Error::config(
                    "data_noise",
                    "only meaningful with data = synthetic",
                ));
            }
            let images = idx_images
                .ok_or_else(|| Error::config("idx_images", "required when data = idx"))?;
            let labels = idx_labels
                .ok_or_else(|| Error::config("idx_labels", "required when data = idx"))?;
            DataSpec::Idx {
                images: PathBuf::from(images),
                labels: PathBuf::from(labels),
            }
        }
        other => {
            return Err(Error::config(
                "data",
                format!("unknown source `{other}` (expected synthetic or idx)"),
            ))
        }
    };

    if let Some(unknown) = raw.keys().min() {
        return Err(Error::config(unknown.clone(), "unknown key"));
    }

    let spec = RunSpec { train: config, data };
    spec.train.validate()?;
    Ok(spec)
}

/// Reads and parses a run description file.
pub fn load_run_spec(path: &Path) -> Result<RunSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_run_spec(&text)
}

/// Partial derivatives of one bound family with respect to `(p, K)`,
/// evaluated at a point. For the inverted kl family this solves the
/// constraint numerically first.
pub fn objective_split(family: BoundFamily, p: f64, k: f64) -> Result<GradientSplit> {
    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
        return Err(Error::invalid(format!("p = {p} is outside (0, 1)")));
    }
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::invalid(format!("k = {k} must be positive")));
    }
    match family {
        BoundFamily::Pbq => {
            let a = (p + k / 2.0).sqrt();
            let b = (k / 2.0).sqrt();
            let u = a + b;
            Ok(GradientSplit {
                loss_coeff: u / a,
                kl_coeff: 0.5 * u * (1.0 / a + 1.0 / b),
            })
        }
        BoundFamily::Rts => Ok(GradientSplit {
            loss_coeff: 1.0 + (k / (2.0 * p)).sqrt(),
            kl_coeff: 1.0 + (p / (2.0 * k)).sqrt(),
        }),
        BoundFamily::InvertedKl => {
            let q = kl_inverse(p, k, MB_INVERSION_TOL)?;
            implicit_coeffs(p, q)
        }
    }
}

/// Everything one optimization step produces besides the update itself.
pub struct StepOutcome {
    pub direction: ParamGrads,
    /// Batch mean of the surrogate loss under the sampled noise.
    pub batch_xe: f64,
    /// Batch mean of the zero-one loss under the same noise.
    pub batch_01: f64,
    /// Coefficients actually applied (slope already folded in).
    pub split: GradientSplit,
    /// Complexity term `K` at the current posterior.
    pub complexity: f64,
    /// Slope estimate used this step; 1 for plain objectives.
    pub slope: f64,
    /// Loss value the coefficients were evaluated at, after rescaling
    /// and clamping.
    pub p_effective: f64,
    /// True when the inverted family hit its degenerate-separation guard
    /// and fell back to a pure divergence-descent step.
    pub fallback: bool,
}

/// Computes the step direction for one batch under one noise draw.
///
/// The slope estimator is always fed the fresh `(zero-one, surrogate)`
/// pair first, so the slope used already reflects this batch.
pub fn step_direction(
    post: &GaussianPosterior,
    inputs: ArrayView2<f64>,
    labels: &[u8],
    noise: &NoiseDraws,
    config: &TrainConfig,
    estimator: &mut SlopeEstimator,
) -> Result<StepOutcome> {
    let bw = post.backward(inputs, labels, noise, LossKind::BoundedXe, config.p_min)?;
    estimator.update(bw.zero_one, bw.loss)?;
    let surrogate = config.objective.surrogate;
    let slope = if surrogate {
        estimator.current_slope().unwrap_or(1.0)
    } else {
        1.0
    };
    let p_effective = (slope * bw.loss).clamp(P_FLOOR, P_CEIL);

    let kl_div = post.gaussian_kl();
    let budget = ComplexityBudget::new(kl_div, config.n_train as u64, config.delta)?;
    let complexity = budget.complexity_term();

    let mut fallback = false;
    let split = match config.objective.family {
        BoundFamily::Pbq | BoundFamily::Rts => {
            let mut s = objective_split(config.objective.family, p_effective, complexity)?;
            s.loss_coeff *= slope;
            s
        }
        BoundFamily::InvertedKl => {
            let solved = kl_inverse(p_effective, complexity, MB_INVERSION_TOL).and_then(|q| {
                if surrogate {
                    surrogate_coeffs(p_effective, q, slope)
                } else {
                    implicit_coeffs(p_effective, q)
                }
            });
            match solved {
                Ok(s) => s,
                Err(Error::DegenerateSeparation { .. }) => {
                    // The constraint is too flat to differentiate through;
                    // shrink the divergence instead and move on.
                    fallback = true;
                    GradientSplit {
                        loss_coeff: 0.0,
                        kl_coeff: 1.0,
                    }
                }
                Err(e) => return Err(e),
            }
        }
    };

    let direction = ParamGrads::linear_combination(
        split.loss_coeff,
        &bw.loss_grads,
        config.eta * split.kl_coeff / config.n_train as f64,
        &bw.kl_grads,
    );
    Ok(StepOutcome {
        direction,
        batch_xe: bw.loss,
        batch_01: bw.zero_one,
        split,
        complexity,
        slope,
        p_effective,
        fallback,
    })
}

/// One epoch summary. The `cert_*` columns are training-path proxies:
/// the numerically inverted bound applied to the epoch's mean sampled
/// losses at the end-of-epoch divergence. The certified values come from
/// the separate Monte Carlo certification pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub emp_xe: f64,
    pub emp_01: f64,
    pub kl_over_n: f64,
    pub slope: f64,
    pub cert_xe: f64,
    pub cert_01: f64,
}

/// A finished training run.
pub struct TrainRun {
    pub posterior: GaussianPosterior,
    pub history: Vec<HistoryRow>,
    /// Count of steps that hit the degenerate-separation fallback.
    pub fallback_steps: usize,
}

fn gather_batch(data: &Dataset, idx: &[usize]) -> (Array2<f64>, Vec<u8>) {
    let features = data.features();
    let mut x = Array2::zeros((idx.len(), data.dim()));
    let mut labels = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        x.row_mut(row).assign(&features.row(i));
        labels.push(data.labels()[i]);
    }
    (x, labels)
}

/// Runs SGD with momentum on the configured objective. Uses the first
/// `n_train` rows of `data`; identical inputs produce identical runs,
/// including the history, bit for bit.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainRun> {
    config.validate()?;
    if data.len() < config.n_train {
        return Err(Error::invalid(format!(
            "dataset has {} examples but n_train = {}",
            data.len(),
            config.n_train
        )));
    }
    if data.dim() != config.arch.input_dim() {
        return Err(Error::invalid(format!(
            "dataset has {} features per example, network expects {}",
            data.dim(),
            config.arch.input_dim()
        )));
    }
    let classes = config.arch.output_dim();
    if let Some(max) = data.labels()[..config.n_train].iter().copied().max() {
        if usize::from(max) >= classes {
            return Err(Error::invalid(format!(
                "label {max} out of range for {classes} classes"
            )));
        }
    }

    let n = config.n_train;
    let mut post = init_prior(config.arch.clone(), config.sigma0, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_NOISE_STREAM);
    let mut estimator = SlopeEstimator::new(SLOPE_WINDOW)?;
    let mut velocity = ParamGrads::zeros(&config.arch);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut fallback_steps = 0usize;

    for epoch in 1..=config.epochs {
        indices.shuffle(&mut rng);
        let mut xe_sum = 0.0;
        let mut zo_sum = 0.0;
        for batch in indices.chunks(config.batch_size) {
            let (x, labels) = gather_batch(data, batch);
            let noise = NoiseDraws::standard(&config.arch, &mut rng);
            let outcome = step_direction(&post, x.view(), &labels, &noise, config, &mut estimator)?;
            if outcome.fallback {
                fallback_steps += 1;
            }
            velocity.scale(config.momentum);
            velocity.axpy(1.0, &outcome.direction);
            post.apply_update(&velocity, -config.learning_rate);
            xe_sum += outcome.batch_xe * batch.len() as f64;
            zo_sum += outcome.batch_01 * batch.len() as f64;
        }
        let emp_xe = xe_sum / n as f64;
        let emp_01 = zo_sum / n as f64;
        let kl_div = post.gaussian_kl();
        let k = ComplexityBudget::new(kl_div, n as u64, config.delta)?.complexity_term();
        let cert_xe = kl_inverse(emp_xe.clamp(0.0, 1.0), k, MB_INVERSION_TOL)?.min(1.0);
        let cert_01 = kl_inverse(emp_01.clamp(0.0, 1.0), k, MB_INVERSION_TOL)?.min(1.0);
        history.push(HistoryRow {
            epoch,
            emp_xe,
            emp_01,
            kl_over_n: kl_div / n as f64,
            slope: estimator.current_slope().unwrap_or(1.0),
            cert_xe,
            cert_01,
        });
    }

    Ok(TrainRun {
        posterior: post,
        history,
        fallback_steps,
    })
}

/// Writes history rows as CSV with header
/// `epoch,emp_xe,emp_01,kl_over_n,slope,cert_xe,cert_01`.
pub fn write_history_csv<W: Write>(rows: &[HistoryRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "epoch,emp_xe,emp_01,kl_over_n,slope,cert_xe,cert_01")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            fmt_f64(r.emp_xe),
            fmt_f64(r.emp_01),
            fmt_f64(r.kl_over_n),
            fmt_f64(r.slope),
            fmt_f64(r.cert_xe),
            fmt_f64(r.cert_01),
        )?;
    }
    Ok(())
}
