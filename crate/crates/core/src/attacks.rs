//! Minimal-perturbation attacks.
//!
//! The main algorithm is DeepFool: at each iterate the classifier's decision
//! boundaries are linearized around the current point, the closest linearized
//! boundary is computed in closed form, and the point is moved onto it. The
//! summed step is returned as the perturbation estimate; a final overshoot
//! factor (1 + eta) is applied once when checking whether the label actually
//! flipped, never inside the loop.
//!
//! Also here: an exact closed-form oracle for affine classifiers, the fast
//! gradient sign baseline with its target-rate epsilon search, and a
//! penalized gradient-descent oracle used as a slow near-optimal reference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{predict_label, AffineClassifier, Classifier};
use crate::tensor::{argmax, DenseTensor};
use crate::training::softmax_cross_entropy_gradient;

/// Steps whose p-norm falls below this scale-adjusted threshold mean the
/// iterate sits on a decision boundary up to rounding; the loop stops there
/// and lets the overshoot check decide the outcome. Without this, an exact
/// boundary landing (for example on affine models) can spin on steps the
/// size of floating-point noise.
const BOUNDARY_TOLERANCE: f64 = 1e-11;

/// Shared knobs for all perturbation searches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Overshoot eta applied once to the summed perturbation.
    pub overshoot: f64,
    /// Hard cap on linearization steps.
    pub max_iterations: usize,
    /// Norm order being minimized; 1 <= p, `inf` allowed.
    #[serde(with = "norm_order_serde")]
    pub p: f64,
    /// Gradient rows with dual norm below this are excluded as degenerate.
    pub grad_tolerance: f64,
    /// Optional clamp applied to the final adversarial point only.
    pub clip: Option<(f64, f64)>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            overshoot: 0.02,
            max_iterations: 50,
            p: 2.0,
            grad_tolerance: 1e-12,
            clip: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.overshoot.is_finite() && self.overshoot >= 0.0) {
            return Err(Error::invalid_argument(format!(
                "overshoot must be finite and non-negative, got {}",
                self.overshoot
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid_argument("max_iterations must be at least 1"));
        }
        if self.p.is_nan() || self.p < 1.0 {
            return Err(Error::invalid_argument(format!(
                "norm order must satisfy p >= 1, got {}",
                self.p
            )));
        }
        if !(self.grad_tolerance.is_finite() && self.grad_tolerance > 0.0) {
            return Err(Error::invalid_argument(format!(
                "grad_tolerance must be finite and positive, got {}",
                self.grad_tolerance
            )));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid_argument(format!(
                    "clip range ({lo}, {hi}) is not a finite ordered pair"
                )));
            }
        }
        Ok(())
    }
}

/// Serializes the norm order as a number, or the string "inf" for the
/// supremum norm (JSON has no literal for infinity).
mod norm_order_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &f64, s: S) -> Result<S::Ok, S::Error> {
        if p.is_finite() {
            s.serialize_f64(*p)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" => Ok(f64::INFINITY),
                other => Err(serde::de::Error::custom(format!(
                    "norm order must be a number or \"inf\", got \"{other}\""
                ))),
            },
        }
    }
}

/// Parses a norm order from CLI text: a float or "inf".
pub fn parse_norm_order(text: &str) -> Result<f64> {
    let t = text.trim().to_ascii_lowercase();
    if t == "inf" || t == "infinity" {
        return Ok(f64::INFINITY);
    }
    let p: f64 = t
        .parse()
        .map_err(|_| Error::invalid_argument(format!("norm order '{text}' is not a number or 'inf'")))?;
    if p.is_nan() || p < 1.0 {
        return Err(Error::invalid_argument(format!(
            "norm order must satisfy p >= 1, got {p}"
        )));
    }
    Ok(p)
}

/// Outcome of one perturbation search on one input.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Raw summed perturbation, before overshoot.
    pub perturbation: DenseTensor,
    /// Linearization steps taken (or schedule stages for the oracle).
    pub iterations: usize,
    pub original_label: usize,
    pub adversarial_label: usize,
    /// True when the label at the overshot (and clipped) point differs from
    /// the original label.
    pub fooled: bool,
    pub norm2_raw: f64,
    pub norm2_overshoot: f64,
    pub norm_inf_raw: f64,
    pub norm_inf_overshoot: f64,
    pub wall_time_ms: f64,
}

impl AttackResult {
    /// The point the `fooled` flag was evaluated at: x + (1 + eta) r, clipped.
    pub fn adversarial_input(&self, x: &DenseTensor, cfg: &AttackConfig) -> Result<DenseTensor> {
        overshoot_point(x, &self.perturbation, cfg)
    }
}

/// x + (1 + eta) r, clamped to the configured range if any.
fn overshoot_point(x: &DenseTensor, r: &DenseTensor, cfg: &AttackConfig) -> Result<DenseTensor> {
    let mut out = x.clone();
    out.add_scaled(r, 1.0 + cfg.overshoot)?;
    if let Some((lo, hi)) = cfg.clip {
        for v in out.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// -1, 0, or +1. Exactly-zero values stay zero (unlike `f64::signum`).
#[inline]
fn sign3(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Assembles an `AttackResult` once the labels at the overshot point are
/// known. Overshoot scales norms exactly, so the overshoot columns are
/// computed from the raw ones.
fn assemble_result(
    perturbation: DenseTensor,
    iterations: usize,
    original_label: usize,
    adversarial_label: usize,
    cfg: &AttackConfig,
    started: Instant,
) -> AttackResult {
    let norm2_raw = perturbation.norm_l2();
    let norm_inf_raw = perturbation.norm_linf();
    AttackResult {
        fooled: adversarial_label != original_label,
        adversarial_label,
        original_label,
        iterations,
        norm2_raw,
        norm2_overshoot: (1.0 + cfg.overshoot) * norm2_raw,
        norm_inf_raw,
        norm_inf_overshoot: (1.0 + cfg.overshoot) * norm_inf_raw,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        perturbation,
    }
}

/// Builds the result for label-based (argmax) attacks.
fn finish_multiclass<C: Classifier + ?Sized>(
    f: &C,
    x: &DenseTensor,
    perturbation: DenseTensor,
    iterations: usize,
    original_label: usize,
    cfg: &AttackConfig,
    started: Instant,
) -> Result<AttackResult> {
    let x_adv = overshoot_point(x, &perturbation, cfg)?;
    let adversarial_label = predict_label(f, &x_adv)?;
    Ok(assemble_result(
        perturbation,
        iterations,
        original_label,
        adversarial_label,
        cfg,
        started,
    ))
}

/// Binary decision rule for 1- and 2-output models: the score is the lone
/// logit (1 output) or logit 1 minus logit 0 (2 outputs); positive score
/// means label 1.
fn binary_score(logits: &[f64]) -> f64 {
    match logits.len() {
        1 => logits[0],
        _ => logits[1] - logits[0],
    }
}

fn binary_label(logits: &[f64]) -> usize {
    usize::from(binary_score(logits) > 0.0)
}

/// DeepFool for binary classifiers (one score whose sign is the decision).
///
/// Accepts models with 1 or 2 outputs. Each step projects the iterate onto
/// the linearized zero level set of the score; the loop ends when the sign
/// flips, the boundary is reached up to rounding, or `max_iterations` steps
/// were taken. `origin` optionally declares which label the input is being
/// attacked from; if the model already disagrees with it, the zero
/// perturbation is returned with zero iterations.
pub fn deepfool_binary<C: Classifier + ?Sized>(
    f: &C,
    x: &DenseTensor,
    origin: Option<usize>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let started = Instant::now();
    let c = f.num_classes();
    if c > 2 {
        return Err(Error::invalid_argument(format!(
            "binary attack needs a model with 1 or 2 outputs, got {c}"
        )));
    }
    let logits0 = f.logits(x)?;
    let label0 = binary_label(logits0.data());
    if let Some(declared) = origin {
        if declared > 1 {
            return Err(Error::invalid_argument(format!(
                "binary origin label must be 0 or 1, got {declared}"
            )));
        }
        if declared != label0 {
            // Already on the requested side of the boundary.
            return Ok(assemble_result(
                DenseTensor::zeros(vec![x.len()]),
                0,
                declared,
                label0,
                cfg,
                started,
            ));
        }
    }

    let mut x_i = x.clone();
    let mut r_total = DenseTensor::zeros(vec![x.len()]);
    let mut iterations = 0;
    loop {
        let (logits, tape) = f.forward(&x_i)?;
        if binary_label(logits.data()) != label0 {
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
        let score = binary_score(logits.data());
        let grad = if c == 1 {
            tape.input_gradient(0)?
        } else {
            tape.input_gradient_from(&[-1.0, 1.0])?
        };
        let (_, step) = deepfool_step_lp(&[score], &[grad], cfg.p, cfg.grad_tolerance)?;
        let dist = step.norm_lp(cfg.p)?;
        if dist <= BOUNDARY_TOLERANCE * (1.0 + x_i.norm_l2()) {
            break;
        }
        x_i.add_scaled(&step, 1.0)?;
        r_total.add_scaled(&step, 1.0)?;
        iterations += 1;
    }

    let x_adv = overshoot_point(x, &r_total, cfg)?;
    let adversarial_label = binary_label(f.logits(&x_adv)?.data());
    Ok(assemble_result(
        r_total,
        iterations,
        label0,
        adversarial_label,
        cfg,
        started,
    ))
}

/// DeepFool for multiclass classifiers.
///
/// Per iteration, for every class k other than the original one, the score
/// gap f_k - f_k0 and its input gradient are formed from one taped forward
/// pass; the class whose linearized boundary is closest in the configured
/// norm wins, and the closed-form step onto that boundary is taken. The loop
/// stops when the argmax leaves the original class, when the boundary is
/// reached up to rounding, or at `max_iterations`.
pub fn deepfool_multiclass<C: Classifier + ?Sized>(
    f: &C,
    x: &DenseTensor,
    origin: Option<usize>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let started = Instant::now();
    let c = f.num_classes();
    if c < 2 {
        return Err(Error::invalid_argument(
            "multiclass attack needs a model with at least 2 outputs",
        ));
    }
    let logits0 = f.logits(x)?;
    let predicted = argmax(logits0.data());
    let k0 = match origin {
        None => predicted,
        Some(k) => {
            if k >= c {
                return Err(Error::IndexOutOfBounds(format!("origin label {k} of {c} classes")));
            }
            k
        }
    };
    if k0 != predicted {
        return finish_multiclass(f, x, DenseTensor::zeros(vec![x.len()]), 0, k0, cfg, started);
    }

    let mut x_i = x.clone();
    let mut r_total = DenseTensor::zeros(vec![x.len()]);
    let mut iterations = 0;
    loop {
        let (logits, tape) = f.forward(&x_i)?;
        if argmax(logits.data()) != k0 {
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
        let grad_k0 = tape.input_gradient(k0)?;
        let mut gaps = Vec::with_capacity(c - 1);
        let mut grad_gaps = Vec::with_capacity(c - 1);
        for k in 0..c {
            if k == k0 {
                continue;
            }
            let mut gk = tape.input_gradient(k)?;
            gk.add_scaled(&grad_k0, -1.0)?;
            gaps.push(logits.data()[k] - logits.data()[k0]);
            grad_gaps.push(gk);
        }
        let (_, step) = deepfool_step_lp(&gaps, &grad_gaps, cfg.p, cfg.grad_tolerance)?;
        let dist = step.norm_lp(cfg.p)?;
        if dist <= BOUNDARY_TOLERANCE * (1.0 + x_i.norm_l2()) {
            break;
        }
        x_i.add_scaled(&step, 1.0)?;
        r_total.add_scaled(&step, 1.0)?;
        iterations += 1;
    }

    finish_multiclass(f, x, r_total, iterations, k0, cfg, started)
}

/// Closed-form step onto the nearest linearized boundary in the l2 norm.
///
/// `gaps[k]` is the signed score gap of candidate class k relative to the
/// current class; `grad_gaps[k]` its input gradient. Candidates whose
/// gradient norm falls below `tau` are excluded; if all are excluded the
/// gradient is degenerate. Returns the winning candidate index and the step.
pub fn deepfool_step_l2(
    gaps: &[f64],
    grad_gaps: &[DenseTensor],
    tau: f64,
) -> Result<(usize, DenseTensor)> {
    if gaps.is_empty() || gaps.len() != grad_gaps.len() {
        return Err(Error::dimension_mismatch(format!(
            "{} gaps with {} gradients",
            gaps.len(),
            grad_gaps.len()
        )));
    }
    let mut best: Option<(usize, f64, f64)> = None; // (index, ratio, norm)
    for (k, (gap, w)) in gaps.iter().zip(grad_gaps).enumerate() {
        let norm = w.norm_l2();
        if norm < tau {
            continue;
        }
        let ratio = gap.abs() / norm;
        if best.is_none_or(|(_, r, _)| ratio < r) {
            best = Some((k, ratio, norm));
        }
    }
    let (k, _, norm) = best.ok_or_else(|| {
        Error::DegenerateGradient(format!(
            "all {} boundary gradients have norm below {tau}",
            gaps.len()
        ))
    })?;
    let mut step = grad_gaps[k].clone();
    step.scale(-gaps[k] / (norm * norm));
    if step.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateGradient(
            "step overflowed; gradient norm too small for this gap".into(),
        ));
    }
    Ok((k, step))
}

/// Closed-form step onto the nearest linearized boundary in the lp norm,
/// 1 <= p <= infinity, via the dual norm q = p / (p - 1).
///
/// The step satisfies w.r = -gap (it lands exactly on the linearized
/// boundary) and ||r||_p = |gap| / ||w||_q, the lp point-to-hyperplane
/// distance. p = 2 reduces to `deepfool_step_l2`; p = infinity spreads the
/// step across all coordinates via sign(w); p = 1 concentrates it on the
/// single coordinate with the largest |w|.
pub fn deepfool_step_lp(
    gaps: &[f64],
    grad_gaps: &[DenseTensor],
    p: f64,
    tau: f64,
) -> Result<(usize, DenseTensor)> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::invalid_argument(format!(
            "norm order must satisfy p >= 1, got {p}"
        )));
    }
    if gaps.is_empty() || gaps.len() != grad_gaps.len() {
        return Err(Error::dimension_mismatch(format!(
            "{} gaps with {} gradients",
            gaps.len(),
            grad_gaps.len()
        )));
    }
    let q = if p == 1.0 {
        f64::INFINITY
    } else if p == f64::INFINITY {
        1.0
    } else {
        p / (p - 1.0)
    };
    let mut best: Option<(usize, f64, f64)> = None; // (index, ratio, dual norm)
    for (k, (gap, w)) in gaps.iter().zip(grad_gaps).enumerate() {
        let dual = w.norm_lp(q)?;
        if dual < tau {
            continue;
        }
        let ratio = gap.abs() / dual;
        if best.is_none_or(|(_, r, _)| ratio < r) {
            best = Some((k, ratio, dual));
        }
    }
    let (k, _, dual) = best.ok_or_else(|| {
        Error::DegenerateGradient(format!(
            "all {} boundary gradients have dual norm below {tau}",
            gaps.len()
        ))
    })?;
    let w = &grad_gaps[k];
    let gap = gaps[k];
    let mut step;
    if p == 1.0 {
        // All mass on the most influential coordinate (lowest index on ties).
        let mut j_best = 0;
        for (j, v) in w.data().iter().enumerate().skip(1) {
            if v.abs() > w.data()[j_best].abs() {
                j_best = j;
            }
        }
        step = DenseTensor::zeros(vec![w.len()]);
        step.data_mut()[j_best] = -gap / w.data()[j_best];
    } else if p == f64::INFINITY {
        let magnitude = gap.abs() / dual;
        let dir = -sign3(gap);
        let data: Vec<f64> = w.data().iter().map(|&v| dir * magnitude * sign3(v)).collect();
        step = DenseTensor::from_parts(vec![w.len()], data);
    } else {
        // r_j = -gap / ||w||_q^q * |w_j|^(q-1) sign(w_j)
        let scale = -gap / dual.powf(q);
        let data: Vec<f64> = w
            .data()
            .iter()
            .map(|&v| scale * v.abs().powf(q - 1.0) * sign3(v))
            .collect();
        step = DenseTensor::from_parts(vec![w.len()], data);
    }
    if step.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateGradient(
            "step overflowed; gradient dual norm too small for this gap".into(),
        ));
    }
    Ok((k, step))
}

/// Exact minimal l2 perturbation for an affine classifier, in closed form.
///
/// Each competing class defines a hyperplane where its score ties the
/// current best; the answer is the projection onto the nearest one. Serves
/// as the ground-truth reference the iterative attack must match on affine
/// models.
pub fn affine_exact_oracle(
    f: &AffineClassifier,
    x: &DenseTensor,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let started = Instant::now();
    let logits = f.logits(x)?;
    let c = f.num_classes();
    let n = f.input_dim();
    let k0 = argmax(logits.data());
    let w0 = f.class_weight(k0)?.to_vec();
    let mut best: Option<(usize, f64)> = None; // (class, distance)
    for k in 0..c {
        if k == k0 {
            continue;
        }
        let wk = f.class_weight(k)?;
        let mut norm_sq = 0.0;
        for j in 0..n {
            let d = wk[j] - w0[j];
            norm_sq += d * d;
        }
        let norm = norm_sq.sqrt();
        if norm < cfg.grad_tolerance {
            continue;
        }
        let gap = logits.data()[k] - logits.data()[k0];
        let dist = gap.abs() / norm;
        if best.is_none_or(|(_, d)| dist < d) {
            best = Some((k, dist));
        }
    }
    let (l, _) = best.ok_or_else(|| {
        Error::DegenerateGradient("all class weight differences are below tolerance".into())
    })?;
    let wl = f.class_weight(l)?;
    let gap = logits.data()[l] - logits.data()[k0];
    let mut norm_sq = 0.0;
    for j in 0..n {
        let d = wl[j] - w0[j];
        norm_sq += d * d;
    }
    let data: Vec<f64> = (0..n).map(|j| -gap / norm_sq * (wl[j] - w0[j])).collect();
    let r = DenseTensor::from_parts(vec![n], data);
    finish_multiclass(f, x, r, 1, k0, cfg, started)
}

/// Fast gradient sign perturbation: epsilon * sign of the gradient of the
/// softmax cross-entropy loss at the true label. Coordinates with an exactly
/// zero gradient contribute zero.
pub fn fast_gradient_sign<C: Classifier + ?Sized>(
    f: &C,
    x: &DenseTensor,
    y: usize,
    epsilon: f64,
) -> Result<DenseTensor> {
    if f.num_classes() < 2 {
        return Err(Error::invalid_argument(
            "sign attack needs a model with at least 2 outputs",
        ));
    }
    if y >= f.num_classes() {
        return Err(Error::IndexOutOfBounds(format!(
            "label {y} of {} classes",
            f.num_classes()
        )));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::invalid_argument(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    let (logits, tape) = f.forward(x)?;
    let seed = softmax_cross_entropy_gradient(logits.data(), y);
    let grad = tape.input_gradient_from(&seed)?;
    let data: Vec<f64> = grad.data().iter().map(|&g| epsilon * sign3(g)).collect();
    Ok(DenseTensor::from_parts(vec![x.len()], data))
}

/// Result of the target-rate epsilon search for the sign attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSearch {
    /// Smallest tested epsilon whose misclassification rate met the target.
    pub epsilon: f64,
    /// Rate measured at that epsilon.
    pub misclassification_rate: f64,
    /// False when even `epsilon_max` missed the target (the best effort
    /// `epsilon_max` is then reported).
    pub reached: bool,
}

/// Misclassification rate of the sign attack at strength `epsilon`, given
/// precomputed per-sample sign directions.
fn sign_attack_rate<C: Classifier + ?Sized>(
    f: &C,
    samples: &[(&DenseTensor, usize, DenseTensor)],
    epsilon: f64,
) -> Result<f64> {
    let mut wrong = 0usize;
    for (x, y, direction) in samples {
        let mut pt = (*x).clone();
        pt.add_scaled(direction, epsilon)?;
        if predict_label(f, &pt)? != *y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / samples.len() as f64)
}

/// Finds the smallest epsilon at which the sign attack misclassifies at
/// least `target_rate` of the dataset (labels are the true ones).
///
/// Strategy: bracket by checking 0 and `epsilon_max`, tighten with 30
/// bisection rounds, then walk a `grid_steps`-point grid across the final
/// bracket from below and return the first epsilon meeting the target. The
/// sign direction of each sample does not depend on epsilon, so directions
/// are computed once.
pub fn fgs_epsilon_search<C: Classifier + ?Sized>(
    f: &C,
    data: &crate::data::Dataset,
    target_rate: f64,
    epsilon_max: f64,
    grid_steps: usize,
) -> Result<EpsilonSearch> {
    if data.is_empty() {
        return Err(Error::invalid_argument("epsilon search needs a non-empty dataset"));
    }
    if !(target_rate > 0.0 && target_rate <= 1.0) {
        return Err(Error::invalid_argument(format!(
            "target rate must be in (0, 1], got {target_rate}"
        )));
    }
    if !(epsilon_max.is_finite() && epsilon_max > 0.0) {
        return Err(Error::invalid_argument(format!(
            "epsilon_max must be finite and positive, got {epsilon_max}"
        )));
    }
    if grid_steps == 0 {
        return Err(Error::invalid_argument("grid_steps must be at least 1"));
    }
    let samples: Vec<(&DenseTensor, usize, DenseTensor)> = data
        .samples()
        .iter()
        .map(|s| {
            let unit = fast_gradient_sign(f, &s.x, s.y, 1.0)?;
            Ok((&s.x, s.y, unit))
        })
        .collect::<Result<Vec<_>>>()?;

    let rate0 = sign_attack_rate(f, &samples, 0.0)?;
    if rate0 >= target_rate {
        return Ok(EpsilonSearch {
            epsilon: 0.0,
            misclassification_rate: rate0,
            reached: true,
        });
    }
    let rate_max = sign_attack_rate(f, &samples, epsilon_max)?;
    if rate_max < target_rate {
        return Ok(EpsilonSearch {
            epsilon: epsilon_max,
            misclassification_rate: rate_max,
            reached: false,
        });
    }

    // Invariant: rate(lo) < target <= rate(hi).
    let mut lo = 0.0;
    let mut hi = epsilon_max;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if sign_attack_rate(f, &samples, mid)? >= target_rate {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let step = (hi - lo) / grid_steps as f64;
    for i in 1..=grid_steps {
        let eps = lo + step * i as f64;
        let rate = sign_attack_rate(f, &samples, eps)?;
        if rate >= target_rate {
            return Ok(EpsilonSearch {
                epsilon: eps,
                misclassification_rate: rate,
                reached: true,
            });
        }
    }
    // rate(hi) met the target, and hi is the last grid point; rounding is
    // the only way to get here.
    let rate = sign_attack_rate(f, &samples, hi)?;
    Ok(EpsilonSearch {
        epsilon: hi,
        misclassification_rate: rate,
        reached: true,
    })
}

/// Returns a copy of `spec` with an unresolved sign-attack epsilon filled in
/// by the target-rate search over `data`; the search budget defaults to the
/// dataset's dynamic range (declared, or observed when none is declared).
/// Every other spec passes through unchanged.
pub fn resolve_attack_epsilon<C: Classifier + ?Sized>(
    f: &C,
    data: &crate::data::Dataset,
    spec: &AttackSpec,
) -> Result<AttackSpec> {
    let mut resolved = spec.clone();
    if let AttackSpec::FastGradientSign {
        epsilon,
        target_rate,
        epsilon_max,
        grid_steps,
    } = &mut resolved
    {
        if epsilon.is_none() {
            let budget = match epsilon_max {
                Some(m) => *m,
                None => {
                    let (lo, hi) = data
                        .feature_range()
                        .or_else(|| observed_feature_range(data))
                        .ok_or_else(|| {
                            Error::invalid_argument(
                                "dataset has no feature spread to derive an epsilon budget \
                                 from; pass an explicit epsilon_max",
                            )
                        })?;
                    hi - lo
                }
            };
            if budget <= 0.0 {
                return Err(Error::invalid_argument(
                    "epsilon budget is zero (constant features); pass an explicit epsilon_max",
                ));
            }
            let search = fgs_epsilon_search(f, data, *target_rate, budget, *grid_steps)?;
            *epsilon = Some(search.epsilon);
            *epsilon_max = Some(budget);
        }
    }
    Ok(resolved)
}

/// Smallest and largest feature value actually present, None for empty data
/// or when the extremes coincide.
fn observed_feature_range(data: &crate::data::Dataset) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in data.samples() {
        for &v in s.x.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo < hi).then_some((lo, hi))
}

/// Decreasing penalty weights for `penalized_oracle`, spanning tight to
/// loose norm regularization.
pub fn default_penalty_schedule() -> Vec<f64> {
    vec![10.0, 3.0, 1.0, 0.3, 0.1, 0.03, 0.01, 0.003]
}

const ORACLE_STEPS_PER_STAGE: usize = 60;
const ORACLE_MARGIN: f64 = 1e-3;
/// Stages allowed to pass without improving the best crossing by at least
/// 1% before the schedule is cut short. Counting starts at the first flip;
/// until then every stage runs, since only lower penalties can free the
/// hinge term.
const ORACLE_STAGNANT_STAGES: usize = 1;
const ORACLE_STAGNANT_FACTOR: f64 = 0.99;

/// Smallest scale in (0, 1] at which `x + scale * r` leaves class `k0`,
/// found by bisection. Requires that scale 1 already flips.
fn minimal_flip_scale<C: Classifier + ?Sized>(
    f: &C,
    x: &DenseTensor,
    r: &DenseTensor,
    k0: usize,
) -> Result<f64> {
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let mut pt = x.clone();
        pt.add_scaled(r, mid)?;
        if predict_label(f, &pt)? != k0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Gradient-descent reference attack: minimizes
/// gamma * ||r||^2 + max(0, f_k0(x + r) - max_{k != k0} f_k(x + r) + margin)
/// over a decreasing `schedule` of gamma values, warm-starting each stage
/// from the last. Slow but close to optimal; used to calibrate how tight the
/// fast attack's perturbations are.
///
/// The returned `iterations` counts schedule stages actually run; the
/// schedule is cut short once further stages stop improving the best
/// crossing. Overshoot is not applied: the descent already crosses the
/// boundary, so the reported point is x + r itself.
pub fn penalized_oracle<C: Classifier + ?Sized>(
    f: &C,
    x: &DenseTensor,
    schedule: &[f64],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let started = Instant::now();
    if schedule.is_empty() {
        return Err(Error::invalid_argument("penalty schedule must not be empty"));
    }
    if schedule.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(Error::invalid_argument("penalty weights must be finite and positive"));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid_argument("penalty schedule must strictly decrease"));
    }
    let c = f.num_classes();
    if c < 2 {
        return Err(Error::invalid_argument(
            "penalized oracle needs a model with at least 2 outputs",
        ));
    }
    let k0 = predict_label(f, x)?;
    let n = x.len();

    let mut r = DenseTensor::zeros(vec![n]);
    let mut best: Option<DenseTensor> = None;
    let base_step = 0.05 * (1.0 + x.norm_l2());
    // Geometric decay reaching 1e-3 of the base step by the stage's end.
    let decay = (1e-3f64).powf(1.0 / (ORACLE_STEPS_PER_STAGE.max(2) - 1) as f64);

    let consider = |candidate: &DenseTensor, best: &mut Option<DenseTensor>| {
        if best.as_ref().is_none_or(|b| candidate.norm_l2() < b.norm_l2()) {
            *best = Some(candidate.clone());
        }
    };

    let mut stages_run = 0;
    let mut stagnant = 0;
    for &gamma in schedule {
        stages_run += 1;
        let best_before = best.as_ref().map(|b| b.norm_l2());
        let mut step_size = base_step;
        for _ in 0..ORACLE_STEPS_PER_STAGE {
            let mut pt = x.clone();
            pt.add_scaled(&r, 1.0)?;
            let (logits, tape) = f.forward(&pt)?;
            let mut runner = usize::MAX;
            for k in 0..c {
                if k == k0 {
                    continue;
                }
                if runner == usize::MAX || logits.data()[k] > logits.data()[runner] {
                    runner = k;
                }
            }
            let hinge = logits.data()[k0] - logits.data()[runner] + ORACLE_MARGIN;
            // hinge < margin means the gap is negative: the trajectory is on
            // the far side right now. The descent may wander back, so record
            // the crossing immediately rather than waiting for stage end.
            if hinge < ORACLE_MARGIN {
                consider(&r, &mut best);
            }
            // Objective gradient: 2 gamma r, plus the score-gap gradient
            // while the hinge is active.
            let mut grad = r.clone();
            grad.scale(2.0 * gamma);
            if hinge > 0.0 {
                let mut seed = vec![0.0; c];
                seed[k0] = 1.0;
                seed[runner] = -1.0;
                grad.add_scaled(&tape.input_gradient_from(&seed)?, 1.0)?;
            }
            let gnorm = grad.norm_l2();
            if gnorm > 1e-15 {
                r.add_scaled(&grad, -step_size / gnorm)?;
            }
            step_size *= decay;
        }
        // Stage end may sit past the boundary too; the polish below shrinks
        // whatever minimum survived.
        let mut pt = x.clone();
        pt.add_scaled(&r, 1.0)?;
        if predict_label(f, &pt)? != k0 {
            consider(&r, &mut best);
        }
        match (best_before, best.as_ref().map(|b| b.norm_l2())) {
            (Some(prev), Some(now)) if now >= ORACLE_STAGNANT_FACTOR * prev => {
                stagnant += 1;
                if stagnant >= ORACLE_STAGNANT_STAGES {
                    break;
                }
            }
            (_, Some(_)) => stagnant = 0,
            _ => {}
        }
    }

    // Shrink the best crossing along its own ray to the flip threshold.
    if let Some(b) = &mut best {
        let scale = minimal_flip_scale(f, x, b, k0)?;
        b.scale(scale);
    }
    let (perturbation, fooled_hint) = match best {
        Some(b) => (b, true),
        None => (r, false),
    };
    let adv = {
        let mut pt = x.clone();
        pt.add_scaled(&perturbation, 1.0)?;
        if let Some((lo, hi)) = cfg.clip {
            for v in pt.data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
        pt
    };
    let adversarial_label = predict_label(f, &adv)?;
    let norm2_raw = perturbation.norm_l2();
    let norm_inf_raw = perturbation.norm_linf();
    let _ = fooled_hint;
    Ok(AttackResult {
        fooled: adversarial_label != k0,
        adversarial_label,
        original_label: k0,
        iterations: stages_run,
        norm2_raw,
        norm2_overshoot: norm2_raw,
        norm_inf_raw,
        norm_inf_overshoot: norm_inf_raw,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        perturbation,
    })
}

/// Which attack to run, with its parameters. The serialized form is embedded
/// in reports so results stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum AttackSpec {
    Deepfool {
        #[serde(default)]
        config: AttackConfig,
    },
    FastGradientSign {
        /// Fixed strength; when absent it is resolved by `fgs_epsilon_search`
        /// against the evaluation dataset before any per-sample run.
        epsilon: Option<f64>,
        #[serde(default = "default_target_rate")]
        target_rate: f64,
        /// Search budget; defaults to the dataset's feature range span.
        epsilon_max: Option<f64>,
        #[serde(default = "default_grid_steps")]
        grid_steps: usize,
    },
    PenalizedOracle {
        #[serde(default = "default_penalty_schedule")]
        schedule: Vec<f64>,
        #[serde(default)]
        config: AttackConfig,
    },
}

fn default_target_rate() -> f64 {
    0.9
}

fn default_grid_steps() -> usize {
    100
}

impl AttackSpec {
    pub fn deepfool_default() -> Self {
        AttackSpec::Deepfool {
            config: AttackConfig::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Deepfool { .. } => "deepfool",
            AttackSpec::FastGradientSign { .. } => "fgs",
            AttackSpec::PenalizedOracle { .. } => "penalized_oracle",
        }
    }

    /// Parses CLI names: "deepfool", "fgs", "fgs:<epsilon>", "oracle",
    /// "penalized_oracle", "none".
    pub fn parse(text: &str) -> Result<Option<AttackSpec>> {
        let t = text.trim();
        if t.eq_ignore_ascii_case("none") {
            return Ok(None);
        }
        if t.eq_ignore_ascii_case("deepfool") {
            return Ok(Some(AttackSpec::deepfool_default()));
        }
        if t.eq_ignore_ascii_case("oracle") || t.eq_ignore_ascii_case("penalized_oracle") {
            return Ok(Some(AttackSpec::PenalizedOracle {
                schedule: default_penalty_schedule(),
                config: AttackConfig::default(),
            }));
        }
        if let Some(rest) = t.strip_prefix("fgs") {
            let epsilon = match rest.strip_prefix(':') {
                None if rest.is_empty() => None,
                Some(v) => {
                    let eps: f64 = v.trim().parse().map_err(|_| {
                        Error::invalid_argument(format!("fgs epsilon '{v}' is not a number"))
                    })?;
                    if !(eps.is_finite() && eps >= 0.0) {
                        return Err(Error::invalid_argument(format!(
                            "fgs epsilon must be finite and non-negative, got {eps}"
                        )));
                    }
                    Some(eps)
                }
                None => {
                    return Err(Error::invalid_argument(format!("unknown attack '{text}'")));
                }
            };
            return Ok(Some(AttackSpec::FastGradientSign {
                epsilon,
                target_rate: default_target_rate(),
                epsilon_max: None,
                grid_steps: default_grid_steps(),
            }));
        }
        Err(Error::invalid_argument(format!(
            "unknown attack '{text}' (expected deepfool, fgs[:eps], oracle, or none)"
        )))
    }

    /// The attack configuration this variant carries, if any.
    pub fn config(&self) -> Option<&AttackConfig> {
        match self {
            AttackSpec::Deepfool { config } => Some(config),
            AttackSpec::PenalizedOracle { config, .. } => Some(config),
            AttackSpec::FastGradientSign { .. } => None,
        }
    }

    pub fn config_mut(&mut self) -> Option<&mut AttackConfig> {
        match self {
            AttackSpec::Deepfool { config } => Some(config),
            AttackSpec::PenalizedOracle { config, .. } => Some(config),
            AttackSpec::FastGradientSign { .. } => None,
        }
    }
}

/// Runs the attack described by `spec` on one sample. For the sign attack
/// the epsilon must already be resolved.
pub fn run_attack<C: Classifier + ?Sized>(
    f: &C,
    x: &DenseTensor,
    y_true: usize,
    spec: &AttackSpec,
) -> Result<AttackResult> {
    match spec {
        AttackSpec::Deepfool { config } => {
            if f.num_classes() == 1 {
                deepfool_binary(f, x, None, config)
            } else {
                deepfool_multiclass(f, x, None, config)
            }
        }
        AttackSpec::PenalizedOracle { schedule, config } => {
            penalized_oracle(f, x, schedule, config)
        }
        AttackSpec::FastGradientSign { epsilon, .. } => {
            let started = Instant::now();
            let eps = epsilon.ok_or_else(|| {
                Error::invalid_argument(
                    "sign attack epsilon is unresolved; run the epsilon search first",
                )
            })?;
            let r = fast_gradient_sign(f, x, y_true, eps)?;
            let original_label = predict_label(f, x)?;
            let mut pt = x.clone();
            pt.add_scaled(&r, 1.0)?;
            let adversarial_label = predict_label(f, &pt)?;
            let norm2_raw = r.norm_l2();
            let norm_inf_raw = r.norm_linf();
            Ok(AttackResult {
                fooled: adversarial_label != original_label,
                adversarial_label,
                original_label,
                iterations: 1,
                norm2_raw,
                norm2_overshoot: norm2_raw,
                norm_inf_raw,
                norm_inf_overshoot: norm_inf_raw,
                wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
                perturbation: r,
            })
        }
    }
}
