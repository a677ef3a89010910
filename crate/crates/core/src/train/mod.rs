//! Pair sampling, the optimizer schedule and the pretraining loop.

mod optim;

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use optim::Adam;

use crate::adaptive::{solve_weights, LossWeights, TaskSignals};
use crate::checkpoint;
use crate::dataset::{PairDataset, PairedExample};
use crate::error::{Error, Result};
use crate::eval::{labeled_pairs, matching_accuracy};
use crate::image::apply_patch_mask;
use crate::model::{assemble_input, Model, MultimodalInput, TaskLosses};
use crate::tensor::Graph;
use crate::text::apply_wwm_mask;

pub const TASK_NAMES: [&str; 3] = ["mlm", "mpm", "tia"];

/// How the three task losses are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Per-batch closed-form weights from the current losses.
    Adaptive,
    /// `1/3` each.
    Fixed,
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Adaptive => "adaptive",
            Weighting::Fixed => "fixed",
        })
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Weighting::Adaptive),
            "fixed" => Ok(Weighting::Fixed),
            other => Err(Error::arg(format!("weighting must be adaptive or fixed, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Negatives per positive.
    pub negative_ratio: f64,
    pub text_mask_prob: f64,
    pub patch_mask_prob: f64,
    pub seed: u64,
    pub weighting: Weighting,
    /// Steps between validation evaluations; 0 disables validation.
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

impl TrainConfig {
    /// CPU-sized schedule: batch 16, lr 1e-3, 100 warmup of 2,000 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 100,
            total_steps: 2_000,
            negative_ratio: 1.0,
            text_mask_prob: 0.15,
            patch_mask_prob: 0.10,
            seed: 0,
            weighting: Weighting::Adaptive,
            eval_interval: 250,
            patience: 5,
        }
    }

    /// Large-scale schedule: batch 64, lr 2e-5, 5,000 warmup steps.
    pub fn paper() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 2e-5,
            warmup_steps: 5_000,
            total_steps: 50_000,
            eval_interval: 1_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::arg("batch_size must be at least 2"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::arg(format!(
                "warmup_steps {} exceed total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        for (name, p) in [("text_mask_prob", self.text_mask_prob), ("patch_mask_prob", self.patch_mask_prob)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::arg(format!("{name} {p} outside [0, 1)")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::arg(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be finite and nonnegative"));
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_epsilon >= 0.0) {
            return Err(Error::arg("weight_decay and adam_epsilon must be nonnegative"));
        }
        if !(self.negative_ratio >= 0.0 && self.negative_ratio.is_finite()) {
            return Err(Error::arg("negative_ratio must be finite and nonnegative"));
        }
        let (positives, _) = self.batch_split();
        if positives == 0 {
            return Err(Error::arg("negative_ratio leaves no positive example in a batch"));
        }
        Ok(())
    }

    /// `(positives, negatives)` per batch.
    pub fn batch_split(&self) -> (usize, usize) {
        let negatives = (self.batch_size as f64 * self.negative_ratio / (1.0 + self.negative_ratio)).round() as usize;
        let negatives = negatives.min(self.batch_size);
        (self.batch_size - negatives, negatives)
    }

    /// Sets one field from its `key = value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::arg(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "negative_ratio" => self.negative_ratio = parse(key, value)?,
            "text_mask_prob" => self.text_mask_prob = parse(key, value)?,
            "patch_mask_prob" => self.patch_mask_prob = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "weighting" => self.weighting = value.parse()?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            _ => return Err(Error::arg(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in declaration order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_epsilon", self.adam_epsilon.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("negative_ratio", self.negative_ratio.to_string()),
            ("text_mask_prob", self.text_mask_prob.to_string()),
            ("patch_mask_prob", self.patch_mask_prob.to_string()),
            ("seed", self.seed.to_string()),
            ("weighting", self.weighting.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("patience", self.patience.to_string()),
        ]
    }
}

/// Linear warmup from 0 to the base rate, then linear decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let base = config.learning_rate;
    let (warmup, total) = (config.warmup_steps, config.total_steps);
    if step < warmup {
        base * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        base * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Positives first, then negatives whose image comes from a different,
/// uniformly drawn product.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &PairDataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<PairedExample>> {
    let n = dataset.len();
    let (positives, negatives) = config.batch_split();
    if n == 0 || (negatives > 0 && n < 2) {
        return Err(Error::arg(format!("need at least 2 products to sample pairs, have {n}")));
    }
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..positives {
        let i = rng.random_range(0..n);
        batch.push(PairedExample { text: i, image: i, label: true });
    }
    for _ in 0..negatives {
        let text = rng.random_range(0..n);
        // Uniform over the other n − 1 products.
        let mut image = rng.random_range(0..n - 1);
        if image >= text {
            image += 1;
        }
        batch.push(PairedExample { text, image, label: false });
    }
    Ok(batch)
}

/// Masks both modalities of every pair (negatives too, so masking carries
/// no label information) and lays out model inputs.
pub fn prepare_batch<R: Rng + ?Sized>(
    dataset: &PairDataset,
    pairs: &[PairedExample],
    model: &Model,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<MultimodalInput>> {
    pairs
        .iter()
        .map(|pair| {
            let text = apply_wwm_mask(&dataset.products[pair.text].text, config.text_mask_prob, rng);
            let patches = apply_patch_mask(&dataset.products[pair.image].patches, config.patch_mask_prob, rng);
            assemble_input(&text, &patches, pair.label, &model.config)
        })
        .collect()
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub losses: TaskLosses,
    pub weights: LossWeights,
    pub lr: f64,
}

/// Where a parameter snapshot is written if a loss turns non-finite.
#[derive(Clone, Debug, Default)]
pub struct SnapshotPolicy {
    pub dir: Option<PathBuf>,
}

impl SnapshotPolicy {
    fn capture(&self, model: &Model, step: usize) -> String {
        match &self.dir {
            None => "not written (no snapshot directory)".into(),
            Some(dir) => {
                let path = dir.join(format!("nonfinite-step{step}.ckpt"));
                match checkpoint::save(model, &path) {
                    Ok(()) => path.display().to_string(),
                    Err(e) => format!("failed to write {}: {e}", path.display()),
                }
            }
        }
    }
}

/// Forward, weight, backward and one Adam update at schedule position
/// `step`.
pub fn train_step(
    model: &mut Model,
    batch: &[MultimodalInput],
    optimizer: &mut Adam,
    config: &TrainConfig,
    step: usize,
    snapshots: &SnapshotPolicy,
) -> Result<StepRecord> {
    let mut g = Graph::new();
    let nodes = model.losses(&mut g, batch)?;
    let losses = TaskLosses {
        mlm: g.scalar(nodes.mlm),
        mpm: g.scalar(nodes.mpm),
        tia: g.scalar(nodes.tia),
    };
    if let Some(i) = losses.as_array().iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss {
            task: TASK_NAMES[i],
            step,
            snapshot: snapshots.capture(model, step),
        });
    }
    let weights = match config.weighting {
        Weighting::Fixed => LossWeights::uniform(3),
        Weighting::Adaptive => {
            let signals = TaskSignals::from_losses(&losses.as_array())?;
            let w = solve_weights(&signals);
            debug_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            debug_assert!(w.as_slice().iter().all(|&x| x >= 0.0));
            debug_assert!(crate::adaptive::stationarity_residual(&signals, &w) <= 1e-10);
            w
        }
    };
    let w = weights.as_slice();
    let total = g.weighted_sum(&[(nodes.mlm, w[0]), (nodes.mpm, w[1]), (nodes.tia, w[2])])?;
    let grads = g.backward(total);
    let grads = g.param_grads(&grads, &model.params);
    let lr = lr_schedule(step, config);
    optimizer.update(&mut model.params, &grads, lr)?;
    Ok(StepRecord { step, losses, weights, lr })
}

/// Validation progress reported to an observer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    /// Matching accuracy in percent.
    pub accuracy: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    /// Parameters at the best validation evaluation, or the final
    /// parameters when validation is disabled.
    pub model: Model,
    pub log: Vec<StepRecord>,
    pub evaluations: Vec<EvalPoint>,
    pub stopped_early: bool,
}

impl TrainingOutcome {
    pub fn steps(&self) -> usize {
        self.log.len()
    }
}

/// Stream derivation so that sampling, masking and validation draws never
/// share a generator.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const SAMPLING_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

/// Trains until `total_steps` or until validation matching accuracy fails to
/// improve for `patience` consecutive evaluations.
pub fn run_training(
    model: Model,
    train: &PairDataset,
    validation: &PairDataset,
    config: &TrainConfig,
    snapshots: &SnapshotPolicy,
    observer: &mut dyn FnMut(&EvalPoint),
) -> Result<TrainingOutcome> {
    config.validate()?;
    let mut model = model;
    let mut optimizer = Adam::new(
        &model.params,
        config.beta1,
        config.beta2,
        config.adam_epsilon,
        config.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, SAMPLING_STREAM));
    let validate = config.eval_interval > 0 && !validation.is_empty();
    let val_pairs = if validate {
        let mut vrng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, VALIDATION_STREAM));
        labeled_pairs(validation, &mut vrng)?
    } else {
        Vec::new()
    };

    let mut log = Vec::with_capacity(config.total_steps);
    let mut evaluations = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for step in 0..config.total_steps {
        let pairs = sample_batch(train, config, &mut rng)?;
        let batch = prepare_batch(train, &pairs, &model, config, &mut rng)?;
        log.push(train_step(&mut model, &batch, &mut optimizer, config, step, snapshots)?);

        let done = step + 1;
        if validate && (done % config.eval_interval == 0 || done == config.total_steps) {
            let accuracy = matching_accuracy(&model, validation, &val_pairs)?;
            let improved = best.as_ref().is_none_or(|(b, _)| accuracy > *b);
            if improved {
                best = Some((accuracy, model.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            let point = EvalPoint { step: done, accuracy, improved };
            observer(&point);
            evaluations.push(point);
            if stale >= config.patience && config.patience > 0 {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainingOutcome {
        model: best.map(|(_, m)| m).unwrap_or(model),
        log,
        evaluations,
        stopped_early,
    })
}

pub const LOG_HEADER: &str = "step,l_mlm,l_mpm,l_tia,w_mlm,w_mpm,w_tia,lr";

/// Per-step trajectory as CSV. Floats use the shortest round-trip form.
pub fn log_csv(log: &[StepRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in log {
        let w = r.weights.as_slice();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.losses.mlm, r.losses.mpm, r.losses.tia, w[0], w[1], w[2], r.lr
        );
    }
    out
}
