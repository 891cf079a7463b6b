//! Softmax cross-entropy training with momentum SGD, plus the adversarial
//! fine-tuning loop.
//!
//! Everything is seeded and single-threaded: the same config on the same
//! data produces bit-identical weights on every run. Gradients are averaged
//! over each mini-batch in sample order, and the parameter update is
//! v = momentum * v - lr * g; w += v.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{resolve_attack_epsilon, run_attack, AttackConfig, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{predict_label, Classifier, MlpClassifier};
use crate::robustness::rho_adv;
use crate::tensor::{Activation, DenseTensor, GradientTape, Layer};

/// Numerically stable softmax (shift by the max logit).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// -log softmax(logits)[y], computed without forming the softmax.
pub fn cross_entropy_loss(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_sum: f64 = logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    m + log_sum - logits[y]
}

/// Gradient of the cross-entropy loss with respect to the logits:
/// softmax(logits) - onehot(y). This is the seed vector fed to backprop for
/// both training and the fast gradient sign attack.
pub fn softmax_cross_entropy_gradient(logits: &[f64], y: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[y] -= 1.0;
    g
}

/// Gradients of a scalar loss with respect to every layer's weight and bias,
/// given the tape of the forward pass and the loss gradient at the logits.
/// Returned in layer order as (weight gradient, bias gradient) pairs.
pub fn parameter_gradients(
    tape: &GradientTape<'_>,
    logit_seed: &[f64],
) -> Result<Vec<(DenseTensor, DenseTensor)>> {
    if logit_seed.len() != tape.num_outputs() {
        return Err(Error::dimension_mismatch(format!(
            "seed length {} does not match {} outputs",
            logit_seed.len(),
            tape.num_outputs()
        )));
    }
    let layer_count = tape.layer_count();
    let mut grads: Vec<(DenseTensor, DenseTensor)> = Vec::with_capacity(layer_count);
    let mut delta = logit_seed.to_vec();
    for l in (0..layer_count).rev() {
        let z = tape.pre_activation(l);
        let a_in = tape.layer_input(l);
        let activation = tape.layer_activation(l);
        for (dv, &zv) in delta.iter_mut().zip(z.iter()) {
            *dv *= activation.derivative(zv);
        }
        let out = delta.len();
        let inner = a_in.len();
        let mut dw = vec![0.0; out * inner];
        for r in 0..out {
            let dr = delta[r];
            for (c, &av) in a_in.iter().enumerate() {
                dw[r * inner + c] = dr * av;
            }
        }
        let db = DenseTensor::from_parts(vec![out], delta.clone());
        grads.push((DenseTensor::from_parts(vec![out, inner], dw), db));
        delta = tape.backprop_through_weight(l, &delta);
    }
    grads.reverse();
    Ok(grads)
}

/// Layer widths of a fully connected architecture, output layer included:
/// "fc:500,150,10" means two ReLU hidden layers and a 10-class output. The
/// final width must equal the dataset's class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub sizes: Vec<usize>,
}

impl ArchSpec {
    pub fn parse(text: &str) -> Result<ArchSpec> {
        let body = text.trim().strip_prefix("fc:").ok_or_else(|| {
            Error::invalid_argument(format!(
                "architecture '{text}' not understood (expected fc:SIZE,...,CLASSES)"
            ))
        })?;
        let mut sizes = Vec::new();
        for part in body.split(',') {
            let size: usize = part.trim().parse().map_err(|_| {
                Error::invalid_argument(format!("layer size '{part}' is not a positive integer"))
            })?;
            if size == 0 {
                return Err(Error::invalid_argument("layer sizes must be positive"));
            }
            sizes.push(size);
        }
        if sizes.is_empty() {
            return Err(Error::invalid_argument(
                "architecture needs at least the output width (fc:CLASSES)",
            ));
        }
        Ok(ArchSpec { sizes })
    }

    /// Widths of the ReLU layers, i.e. everything before the output layer.
    pub fn hidden(&self) -> &[usize] {
        &self.sizes[..self.sizes.len() - 1]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

impl std::fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "fc:")?;
        for (i, h) in self.sizes.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{h}")?;
        }
        Ok(())
    }
}

/// Optimizer and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Multiplier on the fan-in-scaled uniform init range.
    pub weight_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            weight_init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is allowed as the degenerate no-op optimizer.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid_argument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid_argument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_argument("batch size must be at least 1"));
        }
        if !(self.weight_init_scale.is_finite() && self.weight_init_scale > 0.0) {
            return Err(Error::invalid_argument(format!(
                "weight init scale must be finite and positive, got {}",
                self.weight_init_scale
            )));
        }
        Ok(())
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches, measured pre-update.
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Fraction of `data` the model labels correctly.
pub fn accuracy<C: Classifier + ?Sized>(f: &C, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid_argument("accuracy needs a non-empty dataset"));
    }
    let mut right = 0usize;
    for s in data.samples() {
        if predict_label(f, &s.x)? == s.y {
            right += 1;
        }
    }
    Ok(right as f64 / data.len() as f64)
}

/// Fresh network: ReLU hidden layers of the given sizes, identity output.
/// Weights are uniform on +/- scale/sqrt(fan_in); biases start at zero.
pub fn init_model(
    input_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    seed: u64,
    scale: f64,
) -> Result<MlpClassifier> {
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::invalid_argument(
            "model needs positive input dimension and class count",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(num_classes);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 1..dims.len() {
        let fan_in = dims[i - 1];
        let limit = scale / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..dims[i] * fan_in)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let activation = if i + 1 == dims.len() {
            Activation::Identity
        } else {
            Activation::Relu
        };
        layers.push(Layer::new(
            DenseTensor::from_parts(vec![dims[i], fan_in], w),
            DenseTensor::zeros(vec![dims[i]]),
            activation,
        )?);
    }
    MlpClassifier::new(layers)
}

struct Velocities {
    per_layer: Vec<(DenseTensor, DenseTensor)>,
}

impl Velocities {
    fn zeros(model: &MlpClassifier) -> Self {
        Velocities {
            per_layer: model
                .layers()
                .iter()
                .map(|l| {
                    (
                        DenseTensor::zeros(l.weight().shape().to_vec()),
                        DenseTensor::zeros(l.bias().shape().to_vec()),
                    )
                })
                .collect(),
        }
    }
}

/// One pass over the data in the given order. Returns the mean pre-update
/// loss across all samples.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut MlpClassifier,
    data: &Dataset,
    order: &[usize],
    lr: f64,
    momentum: f64,
    batch_size: usize,
    velocities: &mut Velocities,
    epoch: usize,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    for batch in order.chunks(batch_size) {
        let mut grad_acc: Vec<(DenseTensor, DenseTensor)> = model
            .layers()
            .iter()
            .map(|l| {
                (
                    DenseTensor::zeros(l.weight().shape().to_vec()),
                    DenseTensor::zeros(l.bias().shape().to_vec()),
                )
            })
            .collect();
        let mut batch_loss = 0.0;
        for &i in batch {
            let s = &data.samples()[i];
            let (logits, tape) = model.forward(&s.x)?;
            batch_loss += cross_entropy_loss(logits.data(), s.y);
            let seed = softmax_cross_entropy_gradient(logits.data(), s.y);
            let grads = parameter_gradients(&tape, &seed)?;
            for ((acc_w, acc_b), (gw, gb)) in grad_acc.iter_mut().zip(&grads) {
                acc_w.add_scaled(gw, 1.0)?;
                acc_b.add_scaled(gb, 1.0)?;
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        loss_sum += batch_loss;
        let scale = 1.0 / batch.len() as f64;
        for (layer, ((vw, vb), (gw, gb))) in model
            .layers_mut()
            .iter_mut()
            .zip(velocities.per_layer.iter_mut().zip(grad_acc.iter()))
        {
            vw.scale(momentum);
            vw.add_scaled(gw, -lr * scale)?;
            vb.scale(momentum);
            vb.add_scaled(gb, -lr * scale)?;
            layer.weight_mut().add_scaled(vw, 1.0)?;
            layer.bias_mut().add_scaled(vb, 1.0)?;
        }
    }
    Ok(loss_sum / order.len() as f64)
}

/// Trains a fresh network on `data`. `eval` adds a per-epoch test accuracy
/// column to the stats. Bit-identical across reruns with the same inputs.
pub fn train(
    arch: &ArchSpec,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(MlpClassifier, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid_argument("training needs a non-empty dataset"));
    }
    if data.num_classes() < 2 {
        return Err(Error::invalid_argument("training needs at least 2 classes"));
    }
    if arch.sizes.is_empty() || arch.output_dim() != data.num_classes() {
        return Err(Error::invalid_argument(format!(
            "architecture output width must equal the dataset's {} classes (got {arch})",
            data.num_classes()
        )));
    }
    let mut model = init_model(
        data.input_dim(),
        arch.hidden(),
        data.num_classes(),
        cfg.seed,
        cfg.weight_init_scale,
    )?;
    let stats = fit(&mut model, data, eval, cfg, cfg.epochs, cfg.learning_rate, cfg.seed)?;
    Ok((model, stats))
}

/// Shared SGD driver for initial training and fine-tuning.
fn fit(
    model: &mut MlpClassifier,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    epochs: usize,
    lr: f64,
    shuffle_seed: u64,
) -> Result<Vec<EpochStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut velocities = Velocities::zeros(model);
    let mut stats = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let loss = run_epoch(
            model,
            data,
            &order,
            lr,
            cfg.momentum,
            cfg.batch_size,
            &mut velocities,
            epoch,
        )?;
        let train_accuracy = accuracy(model, data)?;
        let test_accuracy = eval.map(|e| accuracy(model, e)).transpose()?;
        stats.push(EpochStats {
            epoch,
            loss,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok(stats)
}

/// Outcome counts from building an adversarially perturbed training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvSetStats {
    /// Samples replaced by x + alpha * r.
    pub perturbed: usize,
    /// Samples kept clean because the attack did not flip the label.
    pub kept_not_fooled: usize,
    /// Samples kept clean because the attack failed numerically.
    pub kept_failed: usize,
    /// Mean l2 norm of the applied (already magnified) perturbations.
    pub mean_applied_norm2: f64,
}

/// Replaces each sample's features with x + alpha * r(x), where r is the
/// perturbation the attack would apply (for DeepFool that includes the
/// overshoot, so alpha = 1 reproduces the attack's own adversarial example).
/// Labels and ids are kept: the set teaches the model its own mistakes under
/// the original ground truth. Samples the attack cannot fool (or fails on)
/// pass through unchanged. No clipping is applied; the emitted norms scale
/// exactly linearly in alpha.
pub fn build_adversarial_set<C: Classifier + ?Sized>(
    f: &C,
    data: &Dataset,
    spec: &AttackSpec,
    alpha: f64,
) -> Result<(Dataset, AdvSetStats)> {
    if !(alpha.is_finite() && alpha >= 1.0) {
        return Err(Error::invalid_argument(format!(
            "alpha must be finite and at least 1, got {alpha}"
        )));
    }
    let resolved = resolve_attack_epsilon(f, data, spec)?;
    // FGS and the oracle already return the perturbation they apply; the
    // DeepFool family stores the pre-overshoot sum.
    let overshoot_scale = match &resolved {
        AttackSpec::Deepfool { config } => 1.0 + config.overshoot,
        _ => 1.0,
    };
    let mut features = Vec::with_capacity(data.len());
    let mut perturbed = 0usize;
    let mut kept_not_fooled = 0usize;
    let mut kept_failed = 0usize;
    let mut norm_sum = 0.0;
    for s in data.samples() {
        match run_attack(f, &s.x, s.y, &resolved) {
            Ok(res) if res.fooled => {
                let mut x = s.x.clone();
                x.add_scaled(&res.perturbation, alpha * overshoot_scale)?;
                norm_sum += alpha * res.norm2_overshoot;
                perturbed += 1;
                features.push(x);
            }
            Ok(_) => {
                kept_not_fooled += 1;
                features.push(s.x.clone());
            }
            Err(Error::DegenerateGradient(_)) => {
                kept_failed += 1;
                features.push(s.x.clone());
            }
            Err(other) => return Err(other),
        }
    }
    let set = data.with_features(features)?;
    let stats = AdvSetStats {
        perturbed,
        kept_not_fooled,
        kept_failed,
        mean_applied_norm2: if perturbed > 0 {
            norm_sum / perturbed as f64
        } else {
            0.0
        },
    };
    Ok((set, stats))
}

/// Fine-tuning settings. The learning rate is the base config's rate times
/// `lr_factor`; momentum, batch size, and init are inherited or irrelevant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub extra_epochs: usize,
    pub lr_factor: f64,
    /// Attack settings used to measure the robustness trace after each
    /// epoch (always DeepFool, l2).
    pub eval_attack: AttackConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            extra_epochs: 5,
            lr_factor: 0.5,
            eval_attack: AttackConfig::default(),
        }
    }
}

/// One point of the fine-tuning trace. Epoch 0 is the starting model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePoint {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// l2 robustness estimate on the held-out evaluation subset.
    pub rho_adv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrace {
    pub points: Vec<FinetunePoint>,
}

/// Offset added to the base seed for the fine-tuning shuffle stream, so it
/// does not replay the original training order.
const FINETUNE_SEED_OFFSET: u64 = 1_000_003;

/// Continues training `model` on `train_set` (typically an adversarially
/// perturbed copy of the original training data) for a few epochs at a
/// reduced learning rate, measuring the robustness estimate on `rho_eval`
/// after every epoch. Momentum restarts from zero.
pub fn finetune(
    model: &MlpClassifier,
    train_set: &Dataset,
    rho_eval: &Dataset,
    test_set: Option<&Dataset>,
    base: &TrainConfig,
    cfg: &FinetuneConfig,
) -> Result<(MlpClassifier, FinetuneTrace)> {
    base.validate()?;
    if cfg.extra_epochs == 0 {
        return Err(Error::invalid_argument("fine-tuning needs at least 1 extra epoch"));
    }
    if !(cfg.lr_factor.is_finite() && cfg.lr_factor > 0.0) {
        return Err(Error::invalid_argument(format!(
            "lr_factor must be finite and positive, got {}",
            cfg.lr_factor
        )));
    }
    if train_set.is_empty() || rho_eval.is_empty() {
        return Err(Error::invalid_argument(
            "fine-tuning needs non-empty training and evaluation sets",
        ));
    }
    let mut tuned = model.clone();
    let lr = base.learning_rate * cfg.lr_factor;
    let mut points = Vec::with_capacity(cfg.extra_epochs + 1);
    points.push(FinetunePoint {
        epoch: 0,
        loss: None,
        train_accuracy: Some(accuracy(&tuned, train_set)?),
        test_accuracy: test_set.map(|t| accuracy(&tuned, t)).transpose()?,
        rho_adv: rho_adv(&tuned, rho_eval, &cfg.eval_attack)?,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(base.seed.wrapping_add(FINETUNE_SEED_OFFSET));
    let mut velocities = Velocities::zeros(&tuned);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.extra_epochs {
        order.shuffle(&mut rng);
        let loss = run_epoch(
            &mut tuned,
            train_set,
            &order,
            lr,
            base.momentum,
            base.batch_size,
            &mut velocities,
            epoch,
        )?;
        points.push(FinetunePoint {
            epoch,
            loss: Some(loss),
            train_accuracy: Some(accuracy(&tuned, train_set)?),
            test_accuracy: test_set.map(|t| accuracy(&tuned, t)).transpose()?,
            rho_adv: rho_adv(&tuned, rho_eval, &cfg.eval_attack)?,
        });
    }
    Ok((tuned, FinetuneTrace { points }))
}

/// One row of a training or fine-tuning trace file. Optional cells
/// serialize as empty CSV fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub rho_adv: Option<f64>,
}

impl From<&EpochStats> for TraceRow {
    fn from(s: &EpochStats) -> Self {
        TraceRow {
            epoch: s.epoch,
            loss: Some(s.loss),
            train_acc: Some(s.train_accuracy),
            test_acc: s.test_accuracy,
            rho_adv: None,
        }
    }
}

impl From<&FinetunePoint> for TraceRow {
    fn from(p: &FinetunePoint) -> Self {
        TraceRow {
            epoch: p.epoch,
            loss: p.loss,
            train_acc: p.train_accuracy,
            test_acc: p.test_accuracy,
            rho_adv: Some(p.rho_adv),
        }
    }
}

/// Writes a trace as CSV with `#` provenance comment lines above the header,
/// mirroring the robustness report format.
pub fn write_trace_csv(
    path: &std::path::Path,
    provenance: &[(&str, String)],
    rows: &[TraceRow],
) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (key, value) in provenance {
        writeln!(out, "# {key}: {value}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back the rows of a trace CSV (comments skipped).
pub fn read_trace_csv(path: &std::path::Path) -> Result<Vec<TraceRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}
