//! SGD training with a step-decayed learning rate, the α sweep, and
//! evaluation against a dense truth map.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::adjoint::{gradcheck, gradient, GradcheckReport};
use crate::data_synth::{augment, gen_scene, sample_labels, LabelBudget, SceneSpec};
use crate::error::{Error, Result};
use crate::loss_metrics::{iou, softmax_xent, ClassMap, IoUReport};
use crate::network::{forward, predict_classes, select, NetworkParams, SelectionSet};
use crate::regularizer::{RegularizerKind, RegularizerSpec};
use crate::tensor::{Activation, ConvKernelStack, FeatureField};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub augmentation: bool,
    pub regularizer: RegularizerSpec,
    pub width: usize,
    /// Number of residual steps (interior 3×3 layers).
    pub steps: usize,
    pub activation: Activation,
    pub step_size: f64,
    pub eval_every: usize,
    /// Multiplier on the initial weight scale; 0 gives all-zero parameters.
    pub init_scale: f64,
    /// Global gradient-norm cap applied before each update; 0 disables it.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 250,
            lr0: 0.01,
            decay_factor: 0.5,
            decay_every: 100,
            seed: 0,
            augmentation: true,
            regularizer: RegularizerSpec::none(),
            width: 32,
            steps: 10,
            activation: Activation::Tanh,
            step_size: 1.0,
            eval_every: 25,
            init_scale: 1.0,
            clip_norm: 10.0,
        }
    }
}

const CONFIG_KEYS: [&str; 15] = [
    "iterations",
    "lr0",
    "decay_factor",
    "decay_every",
    "seed",
    "augmentation",
    "regularizer",
    "alpha",
    "width",
    "steps",
    "activation",
    "h",
    "eval_every",
    "init_scale",
    "clip_norm",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return bad(format!("lr0 must be finite and >= 0, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 || self.eval_every == 0 {
            return bad("decay_every and eval_every must be positive".into());
        }
        if self.width == 0 {
            return bad("width must be positive".into());
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return bad(format!("h must be finite and >= 0, got {}", self.step_size));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return bad(format!("init_scale must be finite and >= 0, got {}", self.init_scale));
        }
        if !self.clip_norm.is_finite() || self.clip_norm < 0.0 {
            return bad(format!("clip_norm must be finite and >= 0, got {}", self.clip_norm));
        }
        self.regularizer.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Learning rate used at 0-based iteration `iter`.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((iter / self.decay_every) as i32)
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut c = self.clone();
        c.regularizer = if alpha == 0.0 && self.regularizer.kind == RegularizerKind::None {
            RegularizerSpec::none()
        } else {
            RegularizerSpec {
                kind: RegularizerKind::QuadraticSmoother,
                alpha,
            }
        };
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            seen.push(key);
            let err = |e: &dyn std::fmt::Display| Error::Config(format!("line {}: {key}: {e}", lineno + 1));
            match key {
                "iterations" => cfg.iterations = value.parse().map_err(|e| err(&e))?,
                "lr0" => cfg.lr0 = value.parse().map_err(|e| err(&e))?,
                "decay_factor" => cfg.decay_factor = value.parse().map_err(|e| err(&e))?,
                "decay_every" => cfg.decay_every = value.parse().map_err(|e| err(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| err(&e))?,
                "augmentation" => {
                    cfg.augmentation = match value {
                        "true" | "on" | "1" => true,
                        "false" | "off" | "0" => false,
                        other => return Err(err(&format!("expected on/off, got '{other}'"))),
                    }
                }
                "regularizer" => cfg.regularizer.kind = value.parse().map_err(|e: Error| err(&e))?,
                "alpha" => cfg.regularizer.alpha = value.parse().map_err(|e| err(&e))?,
                "width" => cfg.width = value.parse().map_err(|e| err(&e))?,
                "steps" => cfg.steps = value.parse().map_err(|e| err(&e))?,
                "activation" => cfg.activation = value.parse().map_err(|e: Error| err(&e))?,
                "h" => cfg.step_size = value.parse().map_err(|e| err(&e))?,
                "eval_every" => cfg.eval_every = value.parse().map_err(|e| err(&e))?,
                "init_scale" => cfg.init_scale = value.parse().map_err(|e| err(&e))?,
                "clip_norm" => cfg.clip_norm = value.parse().map_err(|e| err(&e))?,
                _ => unreachable!(),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "iterations = {}", self.iterations).unwrap();
        writeln!(s, "lr0 = {:?}", self.lr0).unwrap();
        writeln!(s, "decay_factor = {:?}", self.decay_factor).unwrap();
        writeln!(s, "decay_every = {}", self.decay_every).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "augmentation = {}", self.augmentation).unwrap();
        writeln!(s, "regularizer = {}", self.regularizer.kind).unwrap();
        writeln!(s, "alpha = {:?}", self.regularizer.alpha).unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "steps = {}", self.steps).unwrap();
        writeln!(s, "activation = {}", self.activation).unwrap();
        writeln!(s, "h = {:?}", self.step_size).unwrap();
        writeln!(s, "eval_every = {}", self.eval_every).unwrap();
        writeln!(s, "init_scale = {:?}", self.init_scale).unwrap();
        writeln!(s, "clip_norm = {:?}", self.clip_norm).unwrap();
        s
    }
}

/// Gaussian kernels with standard deviation `scale / √(in·kh·kw)`.
pub fn init_params(config: &TrainConfig, input_channels: usize, num_classes: usize) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |out: usize, inp: usize, k: usize| -> Result<ConvKernelStack> {
        let mut stack = ConvKernelStack::zeros(out, inp, k, k);
        if config.init_scale > 0.0 {
            let std = config.init_scale / ((inp * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
            for w in stack.weights_mut() {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(stack)
    };
    let lift = draw(config.width, input_channels, 1)?;
    let layers = (0..config.steps)
        .map(|_| draw(config.width, config.width, 3))
        .collect::<Result<Vec<_>>>()?;
    let project = draw(num_classes, config.width, 1)?;
    NetworkParams::new(config.step_size, lift, layers, project, config.activation)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub learning_rate: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub loss: f64,
    /// Unscaled regularizer value `R(Q y_n)`.
    pub regularizer: f64,
    pub objective: f64,
    pub val_loss: Option<f64>,
    pub val_miou: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Training stopped at this 0-based iteration; params are the last finite ones.
    Diverged { iteration: usize },
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunStatus::Completed => f.write_str("ok"),
            RunStatus::Diverged { iteration } => write!(f, "diverged@{iteration}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<IterationRecord>,
    pub status: RunStatus,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "lr", "grad_norm", "loss", "regularizer", "objective", "val_loss", "val_miou"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.history {
            w.write_record([
                r.iteration.to_string(),
                format!("{:?}", r.learning_rate),
                format!("{:?}", r.grad_norm),
                format!("{:?}", r.loss),
                format!("{:?}", r.regularizer),
                format!("{:?}", r.objective),
                opt(r.val_loss),
                opt(r.val_miou),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Validation loss and mIoU of `params` on the un-augmented data.
pub fn validation_scores(params: &NetworkParams, data: &FeatureField, val: &SelectionSet) -> Result<(f64, f64)> {
    let out = forward(params, data)?.output;
    let (loss, _) = softmax_xent(&select(&out, val)?)?;
    let truth = val.to_class_map(data.height(), data.width())?;
    let report = iou(&predict_classes(&out), &truth)?;
    Ok((loss, report.miou))
}

/// Runs `config.iterations` SGD steps. Each step draws one global
/// augmentation of the scene and takes a full gradient step on it.
pub fn train(
    config: &TrainConfig,
    data: &FeatureField,
    train_labels: &SelectionSet,
    val_labels: &SelectionSet,
    num_classes: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    train_labels.validate(data.height(), data.width(), num_classes)?;
    val_labels.validate(data.height(), data.width(), num_classes)?;
    let params = init_params(config, data.channels(), num_classes)?;
    train_from(config, params, data, train_labels, val_labels)
}

/// Same as [`train`] but starting from given parameters.
pub fn train_from(
    config: &TrainConfig,
    mut params: NetworkParams,
    data: &FeatureField,
    train_labels: &SelectionSet,
    val_labels: &SelectionSet,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut history = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let result = if config.augmentation {
            let (d, q, _) = augment(data, train_labels, config.seed, iter as u64);
            gradient(&params, &d, &q, &config.regularizer)
        } else {
            gradient(&params, data, train_labels, &config.regularizer)
        };
        let bundle = match result {
            Ok(b) if b.objective.is_finite() && b.grads.is_finite() => b,
            Ok(_) | Err(Error::NumericalOverflow { .. }) => {
                return Ok(TrainOutcome {
                    params,
                    history,
                    status: RunStatus::Diverged { iteration: iter },
                })
            }
            Err(e) => return Err(e),
        };
        let norm = bundle.grads.norm();
        let step = if config.clip_norm > 0.0 && norm > config.clip_norm {
            config.learning_rate(iter) * config.clip_norm / norm
        } else {
            config.learning_rate(iter)
        };
        let mut next = params.clone();
        for (k, g) in next.kernels_mut().zip(bundle.grads.kernels()) {
            k.axpy(-step, g)?;
        }
        let (val_loss, val_miou) = if (iter + 1) % config.eval_every == 0 || iter + 1 == config.iterations {
            if val_labels.is_empty() {
                (None, None)
            } else {
                match validation_scores(&next, data, val_labels) {
                    Ok((l, m)) => (Some(l), Some(m)),
                    Err(Error::NumericalOverflow { .. }) => (Some(f64::INFINITY), None),
                    Err(e) => return Err(e),
                }
            }
        } else {
            (None, None)
        };
        history.push(IterationRecord {
            iteration: iter,
            learning_rate: config.learning_rate(iter),
            grad_norm: norm,
            loss: bundle.loss,
            regularizer: bundle.regularizer,
            objective: bundle.objective,
            val_loss,
            val_miou,
        });
        if !next.is_finite() {
            return Ok(TrainOutcome {
                params,
                history,
                status: RunStatus::Diverged { iteration: iter },
            });
        }
        params = next;
    }
    Ok(TrainOutcome {
        params,
        history,
        status: RunStatus::Completed,
    })
}

/// Forward pass, arg-max classes and IoU against `truth`.
pub fn evaluate(params: &NetworkParams, data: &FeatureField, truth: &ClassMap) -> Result<(IoUReport, ClassMap)> {
    if truth.height() != data.height() || truth.width() != data.width() {
        return Err(Error::Dimension(format!(
            "data is {}x{}, truth is {}x{}",
            data.height(),
            data.width(),
            truth.height(),
            truth.width()
        )));
    }
    let out = forward(params, data)?.output;
    let pred = predict_classes(&out);
    Ok((iou(&pred, truth)?, pred))
}

/// Everything a sweep needs: the scene, its dense truth and the label split.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub data: FeatureField,
    pub truth: ClassMap,
    pub train: SelectionSet,
    pub val: SelectionSet,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub alpha: f64,
    pub seed: u64,
    pub train_loss: f64,
    pub val_miou: f64,
    pub test_miou: f64,
    pub wall_seconds: f64,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub median_val_miou: Option<f64>,
    pub median_test_miou: Option<f64>,
    pub completed: usize,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    /// Sorted by `(alpha, seed)`.
    pub records: Vec<SweepRecord>,
    /// One entry per distinct alpha, ascending.
    pub summary: Vec<AlphaSummary>,
    /// Arg-max of the seed-median validation mIoU; ties go to the smaller alpha.
    pub alpha_star: Option<f64>,
}

impl SweepResult {
    pub fn summary_for(&self, alpha: f64) -> Option<&AlphaSummary> {
        self.summary.iter().find(|s| s.alpha == alpha)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "seed", "train_loss", "val_miou", "test_miou", "status"])?;
        for r in &self.records {
            w.write_record([
                format!("{:?}", r.alpha),
                r.seed.to_string(),
                format!("{:?}", r.train_loss),
                format!("{:?}", r.val_miou),
                format!("{:?}", r.test_miou),
                r.status.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::from("alpha\tmedian_val_miou\tmedian_test_miou\tcompleted\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for a in &self.summary {
            writeln!(
                s,
                "{:e}\t{}\t{}\t{}",
                a.alpha,
                fmt(a.median_val_miou),
                fmt(a.median_test_miou),
                a.completed
            )
            .unwrap();
        }
        match self.alpha_star {
            Some(a) => writeln!(s, "alpha_star = {a:e}").unwrap(),
            None => writeln!(s, "alpha_star = none (every run diverged)").unwrap(),
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn run_one(base: &TrainConfig, alpha: f64, seed: u64, exp: &Experiment) -> Result<SweepRecord> {
    let cfg = base.with_alpha(alpha).with_seed(seed);
    let start = Instant::now();
    let outcome = train(&cfg, &exp.data, &exp.train, &exp.val, exp.num_classes)?;
    let (val_miou, test_miou) = match outcome.status {
        RunStatus::Completed => {
            let (_, val) = validation_scores(&outcome.params, &exp.data, &exp.val)?;
            let (report, _) = evaluate(&outcome.params, &exp.data, &exp.truth)?;
            (val, report.miou)
        }
        RunStatus::Diverged { .. } => (f64::NAN, f64::NAN),
    };
    Ok(SweepRecord {
        alpha,
        seed,
        train_loss: outcome.final_loss().unwrap_or(f64::NAN),
        val_miou,
        test_miou,
        wall_seconds: start.elapsed().as_secs_f64(),
        status: outcome.status,
    })
}

/// Trains one run per `(alpha, seed)` pair, in parallel across runs.
pub fn sweep(base: &TrainConfig, alphas: &[f64], seeds: &[u64], exp: &Experiment) -> Result<SweepResult> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha and one seed".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !a.is_finite() || **a < 0.0) {
        return Err(Error::Config(format!("alpha {a} must be finite and >= 0")));
    }
    if exp.val.is_empty() {
        return Err(Error::Config("sweep needs validation labels".into()));
    }
    base.validate()?;
    let jobs: Vec<(f64, u64)> = alphas.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let mut records = jobs
        .par_iter()
        .map(|&(a, s)| run_one(base, a, s, exp))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|x, y| x.alpha.total_cmp(&y.alpha).then(x.seed.cmp(&y.seed)));

    let mut distinct: Vec<f64> = alphas.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let summary: Vec<AlphaSummary> = distinct
        .iter()
        .map(|&alpha| {
            let done: Vec<&SweepRecord> = records
                .iter()
                .filter(|r| r.alpha == alpha && r.status == RunStatus::Completed)
                .collect();
            let mut val: Vec<f64> = done.iter().map(|r| r.val_miou).collect();
            let mut test: Vec<f64> = done.iter().map(|r| r.test_miou).collect();
            AlphaSummary {
                alpha,
                median_val_miou: median(&mut val),
                median_test_miou: median(&mut test),
                completed: done.len(),
            }
        })
        .collect();
    let mut alpha_star: Option<(f64, f64)> = None;
    for s in &summary {
        if let Some(m) = s.median_val_miou {
            if alpha_star.is_none_or(|(_, best)| m > best) {
                alpha_star = Some((s.alpha, m));
            }
        }
    }
    Ok(SweepResult {
        records,
        summary,
        alpha_star: alpha_star.map(|(a, _)| a),
    })
}

/// Finite-difference check on a small seeded problem: 8×8 three-band
/// scene, two classes, width 4, two Tanh residual steps, 20 labels.
pub fn gradcheck_fixture(seed: u64, alpha: f64, coordinates: usize, fd_step: f64) -> Result<GradcheckReport> {
    let spec = SceneSpec::with_generated_signatures(seed, 8, 8, 3, 2, 3, 0.5);
    let (data, truth) = gen_scene(&spec)?;
    let (q, _) = sample_labels(
        &truth,
        &LabelBudget {
            n_train: 20,
            n_val: 0,
            seed,
        },
    )?;
    let config = TrainConfig {
        width: 4,
        steps: 2,
        activation: Activation::Tanh,
        seed,
        ..TrainConfig::default()
    }
    .with_alpha(alpha);
    let params = init_params(&config, data.channels(), 2)?;
    gradcheck(&params, &data, &q, &config.regularizer, fd_step, coordinates, seed)
}
