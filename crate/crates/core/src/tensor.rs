//! Dense f64 tensors and the forward/backward kernel for layered models.
//!
//! Everything here is deliberately small: row-major flat storage, eager shape
//! checks, no broadcasting, and only the primitives layered classifiers need
//! (matrix-vector products, bias adds, pointwise activations). The forward
//! pass records a `GradientTape` so gradients with respect to the input can
//! be replayed without re-deriving the network by hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative at `z`. The ReLU subgradient at exactly 0 is defined as 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Row-major dense tensor of f64 values.
///
/// Invariants: every dimension is >= 1, `data.len()` equals the product of
/// the dimensions, and all entries are finite when constructed through `new`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Validating constructor for externally supplied data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid_argument("tensor shape must not be empty"));
        }
        if let Some(dim) = shape.iter().find(|&&d| d == 0) {
            return Err(Error::invalid_argument(format!(
                "tensor dimensions must be positive, got {dim} in {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dimension_mismatch(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor data at flat index {pos}")));
        }
        Ok(DenseTensor { shape, data })
    }

    /// One-dimensional tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        DenseTensor::new(vec![data.len()], data)
    }

    /// Internal constructor for values we computed ourselves. Skips the
    /// finiteness scan; shape consistency is still the caller's contract.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        DenseTensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        DenseTensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element of a rank-2 tensor. Panics on rank != 2 misuse; bounds are the
    /// caller's responsibility in inner loops.
    #[inline]
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// lp norm for 1 <= p <= infinity.
    pub fn norm_lp(&self, p: f64) -> Result<f64> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::invalid_argument(format!(
                "norm order must satisfy p >= 1, got {p}"
            )));
        }
        if p == f64::INFINITY {
            Ok(self.norm_linf())
        } else if p == 1.0 {
            Ok(self.norm_l1())
        } else if p == 2.0 {
            Ok(self.norm_l2())
        } else {
            Ok(self
                .data
                .iter()
                .map(|v| v.abs().powf(p))
                .sum::<f64>()
                .powf(1.0 / p))
        }
    }

    pub fn dot(&self, other: &DenseTensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dimension_mismatch(format!(
                "dot of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    /// self += alpha * other, in place.
    pub fn add_scaled(&mut self, other: &DenseTensor, alpha: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dimension_mismatch(format!(
                "add_scaled of shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }
}

/// One affine layer plus activation: a = act(W x + b).
///
/// `weight` has shape [out, in] (row per output unit); `bias` has shape [out].
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: DenseTensor,
    bias: DenseTensor,
    activation: Activation,
}

impl Layer {
    pub fn new(weight: DenseTensor, bias: DenseTensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::dimension_mismatch(format!(
                "layer weight must be rank 2, got shape {:?}",
                weight.shape()
            )));
        }
        if bias.shape().len() != 1 || bias.len() != weight.shape()[0] {
            return Err(Error::dimension_mismatch(format!(
                "layer bias shape {:?} does not match weight rows {}",
                bias.shape(),
                weight.shape()[0]
            )));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &DenseTensor {
        &self.weight
    }

    pub fn bias(&self) -> &DenseTensor {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn weight_mut(&mut self) -> &mut DenseTensor {
        &mut self.weight
    }

    pub(crate) fn bias_mut(&mut self) -> &mut DenseTensor {
        &mut self.bias
    }
}

/// y = W x, with W of shape [out, in]. Fixed left-to-right summation order so
/// repeated runs are bit-identical.
fn matvec(weight: &DenseTensor, x: &[f64]) -> Vec<f64> {
    let out = weight.shape()[0];
    let inner = weight.shape()[1];
    let w = weight.data();
    let mut y = vec![0.0; out];
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * inner..(r + 1) * inner];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x.iter()) {
            acc += wv * xv;
        }
        *yr = acc;
    }
    y
}

/// y = W^T d, with W of shape [out, in].
fn matvec_transpose(weight: &DenseTensor, d: &[f64]) -> Vec<f64> {
    let out = weight.shape()[0];
    let inner = weight.shape()[1];
    let w = weight.data();
    let mut y = vec![0.0; inner];
    for r in 0..out {
        let row = &w[r * inner..(r + 1) * inner];
        let dr = d[r];
        for (yc, wv) in y.iter_mut().zip(row.iter()) {
            *yc += dr * wv;
        }
    }
    y
}

/// Validates that consecutive layers chain and that `x` feeds the first one.
fn check_chain(layers: &[Layer], x: &DenseTensor) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid_argument("model must have at least one layer"));
    }
    if x.shape().len() != 1 {
        return Err(Error::dimension_mismatch(format!(
            "input must be rank 1, got shape {:?}",
            x.shape()
        )));
    }
    if x.len() != layers[0].in_dim() {
        return Err(Error::dimension_mismatch(format!(
            "input length {} does not match layer 0 input dimension {}",
            x.len(),
            layers[0].in_dim()
        )));
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::dimension_mismatch(format!(
                "layer {} output dimension {} does not match layer {} input dimension {}",
                i,
                pair[0].out_dim(),
                i + 1,
                pair[1].in_dim()
            )));
        }
    }
    Ok(())
}

/// Everything the backward pass needs, captured during one forward pass.
///
/// Holds pre-activations and activations per layer plus a borrow of the
/// layers themselves, so no weights are copied.
#[derive(Debug)]
pub struct GradientTape<'m> {
    layers: &'m [Layer],
    input: DenseTensor,
    pre_activations: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
}

fn run_forward(layers: &[Layer], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pre_activations = Vec::with_capacity(layers.len());
    let mut activations = Vec::with_capacity(layers.len());
    let mut current = x.to_vec();
    for layer in layers {
        let mut z = matvec(layer.weight(), &current);
        for (zv, bv) in z.iter_mut().zip(layer.bias().data().iter()) {
            *zv += bv;
        }
        let a: Vec<f64> = z.iter().map(|&v| layer.activation().apply(v)).collect();
        pre_activations.push(z);
        current = a.clone();
        activations.push(a);
    }
    (pre_activations, activations)
}

/// Runs the layers on `x` and returns the logits plus a tape for gradients.
pub fn forward<'m>(layers: &'m [Layer], x: &DenseTensor) -> Result<(DenseTensor, GradientTape<'m>)> {
    check_chain(layers, x)?;
    let (pre_activations, activations) = run_forward(layers, x.data());
    let logits = DenseTensor::from_parts(
        vec![activations.last().unwrap().len()],
        activations.last().unwrap().clone(),
    );
    let tape = GradientTape {
        layers,
        input: x.clone(),
        pre_activations,
        activations,
    };
    Ok((logits, tape))
}

/// Forward pass without recording a tape.
pub fn forward_logits(layers: &[Layer], x: &DenseTensor) -> Result<DenseTensor> {
    check_chain(layers, x)?;
    let (_, activations) = run_forward(layers, x.data());
    let last = activations.into_iter().next_back().unwrap();
    Ok(DenseTensor::from_parts(vec![last.len()], last))
}

impl<'m> GradientTape<'m> {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().unwrap()
    }

    pub fn num_outputs(&self) -> usize {
        self.logits().len()
    }

    pub fn input(&self) -> &DenseTensor {
        &self.input
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Activation vector feeding layer `l` (the network input for l = 0).
    pub fn layer_input(&self, l: usize) -> &[f64] {
        if l == 0 {
            self.input.data()
        } else {
            &self.activations[l - 1]
        }
    }

    pub fn pre_activation(&self, l: usize) -> &[f64] {
        &self.pre_activations[l]
    }

    pub fn layer_activation(&self, l: usize) -> Activation {
        self.layers[l].activation()
    }

    /// W_l^T delta. The caller is responsible for having already applied the
    /// activation derivative mask to `delta`; this is the weight half of one
    /// backward layer step, used when parameter gradients also need the
    /// masked delta itself.
    pub fn backprop_through_weight(&self, l: usize, delta: &[f64]) -> Vec<f64> {
        matvec_transpose(self.layers[l].weight(), delta)
    }

    /// Recomputes the forward pass from the stored input. Uses the same code
    /// path as `forward`, so the result is bit-identical to the taped logits.
    pub fn replay(&self) -> DenseTensor {
        let (_, activations) = run_forward(self.layers, self.input.data());
        let last = activations.into_iter().next_back().unwrap();
        DenseTensor::from_parts(vec![last.len()], last)
    }

    /// Gradient of sum_k seed[k] * logit_k with respect to the input.
    ///
    /// This is the reverse-mode core: one backward sweep per seed vector.
    pub fn input_gradient_from(&self, seed: &[f64]) -> Result<DenseTensor> {
        if seed.len() != self.num_outputs() {
            return Err(Error::dimension_mismatch(format!(
                "seed length {} does not match {} outputs",
                seed.len(),
                self.num_outputs()
            )));
        }
        let mut delta = seed.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let z = &self.pre_activations[l];
            for (dv, zv) in delta.iter_mut().zip(z.iter()) {
                *dv *= layer.activation().derivative(*zv);
            }
            delta = matvec_transpose(layer.weight(), &delta);
        }
        Ok(DenseTensor::from_parts(vec![delta.len()], delta))
    }

    /// Gradient of logit `class_index` with respect to the input.
    pub fn input_gradient(&self, class_index: usize) -> Result<DenseTensor> {
        if class_index >= self.num_outputs() {
            return Err(Error::IndexOutOfBounds(format!(
                "class index {} with {} outputs",
                class_index,
                self.num_outputs()
            )));
        }
        let mut seed = vec![0.0; self.num_outputs()];
        seed[class_index] = 1.0;
        self.input_gradient_from(&seed)
    }

    /// Jacobian of the logits with respect to the input, shape [c, n].
    /// Row k equals `input_gradient(k)`.
    pub fn input_jacobian(&self) -> Result<DenseTensor> {
        let c = self.num_outputs();
        let n = self.input.len();
        let mut data = Vec::with_capacity(c * n);
        for k in 0..c {
            let row = self.input_gradient(k)?;
            data.extend_from_slice(row.data());
        }
        Ok(DenseTensor::from_parts(vec![c, n], data))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(rows: usize, cols: usize, act: Activation, rng: &mut ChaCha8Rng) -> Layer {
        let w: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect();
        Layer::new(
            DenseTensor::new(vec![rows, cols], w).unwrap(),
            DenseTensor::new(vec![rows], b).unwrap(),
            act,
        )
        .unwrap()
    }

    fn random_net(dims: &[usize], rng: &mut ChaCha8Rng) -> Vec<Layer> {
        let mut layers = Vec::new();
        for i in 1..dims.len() {
            let act = if i + 1 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(layer(dims[i], dims[i - 1], act, rng));
        }
        layers
    }

    /// Straight-line recomputation used as the forward oracle: no shared
    /// helpers, just the textbook loops.
    #[allow(clippy::needless_range_loop)]
    fn naive_forward(layers: &[Layer], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in layers {
            let out = layer.out_dim();
            let inner = layer.in_dim();
            let mut next = vec![0.0; out];
            for r in 0..out {
                let mut acc = layer.bias().data()[r];
                for c in 0..inner {
                    acc += layer.weight().data()[r * inner + c] * a[c];
                }
                next[r] = match layer.activation() {
                    Activation::Identity => acc,
                    Activation::Relu => acc.max(0.0),
                };
            }
            a = next;
        }
        a
    }

    /// Central finite difference of logit `k` in coordinate `j`.
    fn fd_gradient(layers: &[Layer], x: &[f64], k: usize, j: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fp = naive_forward(layers, &xp)[k];
        let fm = naive_forward(layers, &xm)[k];
        (fp - fm) / (2.0 * h)
    }

    /// True when some ReLU pre-activation sits close enough to 0 that a
    /// finite-difference probe would straddle the kink.
    #[allow(clippy::needless_range_loop)]
    fn near_relu_kink(layers: &[Layer], x: &[f64], h: f64) -> bool {
        let mut a = x.to_vec();
        for layer in layers {
            let z = {
                let mut z = vec![0.0; layer.out_dim()];
                for r in 0..layer.out_dim() {
                    let mut acc = layer.bias().data()[r];
                    for c in 0..layer.in_dim() {
                        acc += layer.weight().data()[r * layer.in_dim() + c] * a[c];
                    }
                    z[r] = acc;
                }
                z
            };
            if layer.activation() == Activation::Relu {
                // Loose bound: input perturbations of size h can move a
                // pre-activation by at most ||w_row||_1 * h per layer.
                let slack = 1e3 * h;
                if z.iter().any(|v| v.abs() < slack) {
                    return true;
                }
                a = z.iter().map(|&v| v.max(0.0)).collect();
            } else {
                a = z;
            }
        }
        false
    }

    #[test]
    fn construction_validates_shape_and_data() {
        assert!(DenseTensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            DenseTensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            DenseTensor::new(vec![0], vec![]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            DenseTensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            DenseTensor::new(vec![2], vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn forward_matches_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dims in [vec![3, 4], vec![5, 8, 3], vec![6, 10, 7, 4], vec![4, 9, 9, 9, 2]] {
            let layers = random_net(&dims, &mut rng);
            for _ in 0..20 {
                let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
                let xt = DenseTensor::from_vec(x.clone()).unwrap();
                let (logits, tape) = forward(&layers, &xt).unwrap();
                let expected = naive_forward(&layers, &x);
                for (got, want) in logits.data().iter().zip(expected.iter()) {
                    assert_relative_eq!(got, want, max_relative = 1e-12);
                }
                // Replay must be bit-identical, not merely close.
                assert_eq!(tape.replay().data(), logits.data());
                assert_eq!(forward_logits(&layers, &xt).unwrap().data(), logits.data());
            }
        }
    }

    #[test]
    fn forward_rejects_shape_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = random_net(&[3, 4, 2], &mut rng);
        let bad = DenseTensor::from_vec(vec![1.0, 2.0]).unwrap();
        let err = forward(&layers, &bad).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));

        // A broken chain is reported with the offending layer index.
        let mut broken = random_net(&[3, 4, 2], &mut rng);
        broken[1] = layer(2, 5, Activation::Identity, &mut rng);
        let x = DenseTensor::from_vec(vec![0.0, 0.0, 0.0]).unwrap();
        let err = forward(&broken, &x).unwrap_err();
        match err {
            Error::DimensionMismatch(msg) => assert!(msg.contains("layer 0"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for dims in [vec![4, 3], vec![5, 12, 4], vec![6, 10, 8, 3]] {
            let layers = random_net(&dims, &mut rng);
            let mut checked = 0;
            while checked < 25 {
                let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
                if near_relu_kink(&layers, &x, h) {
                    continue;
                }
                let xt = DenseTensor::from_vec(x.clone()).unwrap();
                let (_, tape) = forward(&layers, &xt).unwrap();
                let k = rng.random_range(0..*dims.last().unwrap());
                let grad = tape.input_gradient(k).unwrap();
                for j in 0..dims[0] {
                    let fd = fd_gradient(&layers, &x, k, j, h);
                    let denom = fd.abs().max(grad.data()[j].abs()).max(1e-8);
                    assert!(
                        (fd - grad.data()[j]).abs() / denom < 1e-5,
                        "gradient mismatch at dims {dims:?} k={k} j={j}: analytic {} vs fd {fd}",
                        grad.data()[j]
                    );
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn jacobian_rows_equal_per_class_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = random_net(&[5, 9, 4], &mut rng);
        let x = DenseTensor::from_vec((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, tape) = forward(&layers, &x).unwrap();
        let jac = tape.input_jacobian().unwrap();
        assert_eq!(jac.shape(), &[4, 5]);
        for k in 0..4 {
            let row = tape.input_gradient(k).unwrap();
            assert_eq!(&jac.data()[k * 5..(k + 1) * 5], row.data());
        }
    }

    #[test]
    fn gradient_seed_is_linear() {
        // Backprop of a combined seed equals the same linear combination of
        // per-class gradients, exactly in the identity case and to rounding
        // otherwise.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let layers = random_net(&[4, 7, 3], &mut rng);
        let x = DenseTensor::from_vec(vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let (_, tape) = forward(&layers, &x).unwrap();
        let seed = [0.5, -2.0, 1.5];
        let combined = tape.input_gradient_from(&seed).unwrap();
        let mut manual = DenseTensor::zeros(vec![4]);
        for (k, s) in seed.iter().enumerate() {
            manual
                .add_scaled(&tape.input_gradient(k).unwrap(), *s)
                .unwrap();
        }
        for (a, b) in combined.data().iter().zip(manual.data().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // One unit, weight 1, bias 0: pre-activation is exactly 0 at x = 0.
        let l = Layer::new(
            DenseTensor::new(vec![1, 1], vec![1.0]).unwrap(),
            DenseTensor::new(vec![1], vec![0.0]).unwrap(),
            Activation::Relu,
        )
        .unwrap();
        let x = DenseTensor::from_vec(vec![0.0]).unwrap();
        let (_, tape) = forward(std::slice::from_ref(&l), &x).unwrap();
        let g = tape.input_gradient(0).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn norms_agree_on_known_values() {
        let t = DenseTensor::from_vec(vec![3.0, -4.0]).unwrap();
        assert_eq!(t.norm_l2(), 5.0);
        assert_eq!(t.norm_l1(), 7.0);
        assert_eq!(t.norm_linf(), 4.0);
        assert_eq!(t.norm_lp(f64::INFINITY).unwrap(), 4.0);
        assert_relative_eq!(t.norm_lp(2.0).unwrap(), 5.0);
        assert!(t.norm_lp(0.5).is_err());
    }

    proptest! {
        #[test]
        fn lp_norms_interpolate_between_l1_and_linf(
            values in proptest::collection::vec(-10.0f64..10.0, 1..12),
            p in 1.0f64..20.0,
        ) {
            let t = DenseTensor::from_vec(values).unwrap();
            let lp = t.norm_lp(p).unwrap();
            prop_assert!(lp <= t.norm_l1() + 1e-9);
            prop_assert!(lp >= t.norm_linf() - 1e-9);
        }

        #[test]
        fn argmax_prefers_lowest_index_on_ties(
            values in proptest::collection::vec(-5.0f64..5.0, 1..8),
            dup in 0usize..8,
        ) {
            let mut v = values.clone();
            let i = dup % v.len();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v[i] = m;
            let best = argmax(&v);
            prop_assert!(v[best] == m);
            prop_assert!(v[..best].iter().all(|&x| x < m));
        }
    }
}
