//! Fully-connected softmax classifier with analytic gradients.
//!
//! Parameters are stored as one flat vector. Each layer contributes its
//! weight matrix (row-major, one row per output unit) followed by its bias
//! vector, so a layer with `fan_in` inputs and `fan_out` outputs occupies
//! `fan_in * fan_out + fan_out` consecutive entries.

use std::borrow::Borrow;
use std::ops::{Deref, DerefMut};

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::scalar::Scalar;
use crate::seed;

/// Flat parameter vector of fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T>(Vec<T>);

impl<T: Scalar> Params<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Params<T>) {
        debug_assert_eq!(self.len(), other.len());
        for (a, &b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += alpha * b;
        }
    }
}

impl<T> Deref for Params<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Params<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

/// One labeled example. `duration_s` only matters to false-alarm accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample<T> {
    pub features: Vec<T>,
    pub label: usize,
    pub duration_s: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    /// ReLU takes subgradient 0 at the kink.
    fn derivative_from_output<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
        }
    }
}

/// Layer sizes `[input, hidden..., classes]` plus the hidden nonlinearity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec")]
pub struct ModelSpec {
    layer_dims: Vec<usize>,
    activation: Activation,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelSpec {
    layer_dims: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = crate::Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        ModelSpec::new(raw.layer_dims, raw.activation)
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(config_err(format!("model needs at least input and output dims, got {layer_dims:?}")));
        }
        if layer_dims.contains(&0) {
            return Err(config_err(format!("layer dims must be positive, got {layer_dims:?}")));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(config_err("softmax output needs at least 2 classes"));
        }
        Ok(Self { layer_dims, activation })
    }

    pub fn relu(layer_dims: Vec<usize>) -> Result<Self> {
        Self::new(layer_dims, Activation::Relu)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.layer_dims.windows(2).map(move |w| {
            let layer = Layer { fan_in: w[0], fan_out: w[1], offset };
            offset += w[0] * w[1] + w[1];
            layer
        })
    }

    /// Glorot-uniform weights, zero biases. Pure function of `(self, seed)`.
    pub fn xavier_init<T: Scalar>(&self, seed: u64) -> Params<T> {
        let mut rng = seed::rng(seed);
        let mut w = Params::zeros(self.param_count());
        for layer in self.layers() {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for x in &mut w[layer.offset..layer.bias_offset()] {
                *x = T::of(dist.sample(&mut rng));
            }
        }
        w
    }

    fn check_params<T: Scalar>(&self, w: &Params<T>) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(usage_err(format!(
                "parameter vector has length {}, model expects {}",
                w.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_example<T: Scalar>(&self, ex: &LabeledExample<T>) -> Result<()> {
        if ex.features.len() != self.input_dim() {
            return Err(usage_err(format!(
                "feature length {} does not match model input dim {}",
                ex.features.len(),
                self.input_dim()
            )));
        }
        if ex.label >= self.class_count() {
            return Err(usage_err(format!("label {} out of range for {} classes", ex.label, self.class_count())));
        }
        Ok(())
    }

    /// Returns the activations of every layer: the input, each hidden layer's
    /// output, and finally the raw logits.
    fn trace<T: Scalar>(&self, w: &Params<T>, features: &[T]) -> Vec<Vec<T>> {
        let n_layers = self.layer_dims.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(features.to_vec());
        for (l, layer) in self.layers().enumerate() {
            let input = &acts[l];
            let weights = &w[layer.offset..layer.bias_offset()];
            let biases = &w[layer.bias_offset()..layer.bias_offset() + layer.fan_out];
            let last = l + 1 == n_layers;
            let out = weights
                .chunks_exact(layer.fan_in)
                .zip(biases)
                .map(|(row, &b)| {
                    let z = row.iter().zip(input).fold(b, |acc, (&wi, &xi)| acc + wi * xi);
                    if last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// Class probabilities for one feature vector.
    pub fn forward<T: Scalar>(&self, w: &Params<T>, features: &[T]) -> Result<Vec<T>> {
        self.check_params(w)?;
        if features.len() != self.input_dim() {
            return Err(usage_err(format!(
                "feature length {} does not match model input dim {}",
                features.len(),
                self.input_dim()
            )));
        }
        let acts = self.trace(w, features);
        Ok(softmax(acts.last().unwrap()))
    }
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln Σ exp(z)` computed around the maximum.
pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln()
}

/// A differentiable classifier the federated protocol can train.
///
/// `loss` is the mean cross-entropy over the batch and `loss_and_gradient`
/// returns it together with its gradient with respect to every parameter.
pub trait Classifier<T: Scalar>: Sync {
    fn param_count(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn probabilities(&self, w: &Params<T>, features: &[T]) -> Result<Vec<T>>;
    fn loss<E: Borrow<LabeledExample<T>>>(&self, w: &Params<T>, batch: &[E]) -> Result<T>;
    fn loss_and_gradient<E: Borrow<LabeledExample<T>>>(&self, w: &Params<T>, batch: &[E]) -> Result<(T, Params<T>)>;

    fn gradient<E: Borrow<LabeledExample<T>>>(&self, w: &Params<T>, batch: &[E]) -> Result<Params<T>> {
        Ok(self.loss_and_gradient(w, batch)?.1)
    }
}

impl<T: Scalar> Classifier<T> for ModelSpec {
    fn param_count(&self) -> usize {
        ModelSpec::param_count(self)
    }

    fn input_dim(&self) -> usize {
        ModelSpec::input_dim(self)
    }

    fn class_count(&self) -> usize {
        ModelSpec::class_count(self)
    }

    fn probabilities(&self, w: &Params<T>, features: &[T]) -> Result<Vec<T>> {
        self.forward(w, features)
    }

    fn loss<E: Borrow<LabeledExample<T>>>(&self, w: &Params<T>, batch: &[E]) -> Result<T> {
        self.check_params(w)?;
        if batch.is_empty() {
            return Err(usage_err("loss of an empty batch"));
        }
        let mut total = T::zero();
        for ex in batch {
            let ex = ex.borrow();
            self.check_example(ex)?;
            let acts = self.trace(w, &ex.features);
            let logits = acts.last().unwrap();
            total += log_sum_exp(logits) - logits[ex.label];
        }
        Ok(total / T::of_usize(batch.len()))
    }

    fn loss_and_gradient<E: Borrow<LabeledExample<T>>>(&self, w: &Params<T>, batch: &[E]) -> Result<(T, Params<T>)> {
        self.check_params(w)?;
        if batch.is_empty() {
            return Err(usage_err("gradient of an empty batch"));
        }
        let layers: Vec<Layer> = self.layers().collect();
        let mut grad = Params::zeros(w.len());
        let mut total = T::zero();
        for ex in batch {
            let ex = ex.borrow();
            self.check_example(ex)?;
            let acts = self.trace(w, &ex.features);
            let logits = acts.last().unwrap();
            total += log_sum_exp(logits) - logits[ex.label];

            // dL/dz at the output is p - onehot(y).
            let mut delta = softmax(logits);
            delta[ex.label] -= T::one();

            for (l, layer) in layers.iter().enumerate().rev() {
                let input = &acts[l];
                let (wo, bo) = (layer.offset, layer.bias_offset());
                for (j, &d) in delta.iter().enumerate() {
                    let row = &mut grad[wo + j * layer.fan_in..wo + (j + 1) * layer.fan_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grad[bo + j] += d;
                }
                if l == 0 {
                    break;
                }
                let weights = &w[wo..bo];
                let mut prev = vec![T::zero(); layer.fan_in];
                for (j, &d) in delta.iter().enumerate() {
                    let row = &weights[j * layer.fan_in..(j + 1) * layer.fan_in];
                    for (p, &wij) in prev.iter_mut().zip(row) {
                        *p += wij * d;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= self.activation.derivative_from_output(a);
                }
                delta = prev;
            }
        }
        let n = T::of_usize(batch.len());
        for g in grad.iter_mut() {
            *g /= n;
        }
        Ok((total / n, grad))
    }
}

/// Largest relative disagreement between the analytic gradient and central
/// differences `(loss(w + h e_j) - loss(w - h e_j)) / 2h` over all coordinates.
/// Relative error uses the denominator `max(|a|, |b|, 1e-8)`.
pub fn finite_difference_check<T, M, E>(model: &M, w: &Params<T>, batch: &[E], h: T) -> Result<T>
where
    T: Scalar,
    M: Classifier<T>,
    E: Borrow<LabeledExample<T>>,
{
    if !(h > T::zero()) {
        return Err(usage_err("finite-difference step must be positive"));
    }
    let analytic = model.gradient(w, batch)?;
    let floor = T::of(1e-8);
    let two_h = h + h;
    let mut probe = w.clone();
    let mut worst = T::zero();
    for j in 0..w.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let up = model.loss(&probe, batch)?;
        probe[j] = orig - h;
        let down = model.loss(&probe, batch)?;
        probe[j] = orig;
        let numeric = (up - down) / two_h;
        let a = analytic[j];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn ex(features: Vec<f64>, label: usize) -> LabeledExample<f64> {
        LabeledExample { features, label, duration_s: 1.0 }
    }

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Vec<LabeledExample<f64>> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| {
                let f = (0..spec.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
                ex(f, rng.random_range(0..spec.class_count()))
            })
            .collect()
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::relu(vec![3]).is_err());
        assert!(ModelSpec::relu(vec![3, 1]).is_err());
        assert!(ModelSpec::relu(vec![3, 0, 2]).is_err());
        assert!(ModelSpec::relu(vec![3, 2]).is_ok());
        let parsed: std::result::Result<ModelSpec, _> = serde_json::from_str(r#"{"layer_dims":[4,1]}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn parameter_count() {
        assert_eq!(ModelSpec::relu(vec![4, 8, 2]).unwrap().param_count(), 58);
        assert_eq!(ModelSpec::relu(vec![2, 3]).unwrap().param_count(), 9);
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let spec = ModelSpec::relu(vec![2, 3]).unwrap();
        let w: Params<f64> = spec.xavier_init(7);
        let bound = (6.0f64 / 5.0).sqrt();
        assert!((bound - 1.0954).abs() < 1e-4);
        assert!(w[..6].iter().all(|x| x.abs() <= bound));
        assert!(w[..6].iter().any(|&x| x != 0.0));
        assert!(w[6..].iter().all(|&x| x == 0.0));
        assert_eq!(w, spec.xavier_init::<f64>(7));
        assert_ne!(w, spec.xavier_init::<f64>(8));
    }

    #[test]
    fn xavier_uses_per_layer_bounds() {
        let spec = ModelSpec::relu(vec![100, 4, 2]).unwrap();
        let w: Params<f64> = spec.xavier_init(1);
        let b0 = (6.0f64 / 104.0).sqrt();
        let b1 = (6.0f64 / 6.0).sqrt();
        assert!(w[..400].iter().all(|x| x.abs() <= b0));
        assert!(w[404..412].iter().any(|x| x.abs() > b0));
        assert!(w[404..412].iter().all(|x| x.abs() <= b1));
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let spec = ModelSpec::relu(vec![3, 4, 2]).unwrap();
        let w = Params::zeros(spec.param_count());
        assert_eq!(spec.forward(&w, &[1.0, -5.0, 2.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0f64, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p[0] > p[1]);
        assert!((p[0] + p[1] - 1.0).abs() <= 1e-12);
        let p = softmax(&[-1000.0f64, -1001.0]);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0f64, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let spec = ModelSpec::relu(vec![3, 2]).unwrap();
        let w = Params::<f64>::zeros(spec.param_count());
        assert!(spec.forward(&w, &[1.0]).is_err());
        assert!(spec.forward(&Params::<f64>::zeros(3), &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn loss_values() {
        let spec = ModelSpec::relu(vec![2, 2]).unwrap();
        let zero = Params::<f64>::zeros(spec.param_count());
        let batch = random_batch(&spec, 9, 3);
        let l = spec.loss(&zero, &batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        // Class 0 driven by a huge bias: probability rounds to 1, loss to 0.
        let mut w = zero.clone();
        w[4] = 800.0;
        let l = spec.loss(&w, &[ex(vec![0.3, 0.1], 0)]).unwrap();
        assert_eq!(l, 0.0);

        let empty: Vec<LabeledExample<f64>> = vec![];
        assert!(spec.loss(&zero, &empty).is_err());
        assert!(spec.gradient(&zero, &empty).is_err());
        assert!(spec.loss(&zero, &[ex(vec![0.0, 0.0], 2)]).is_err());
    }

    #[test]
    fn loss_decomposes_over_batch_union() {
        let spec = ModelSpec::relu(vec![3, 5, 3]).unwrap();
        let w: Params<f64> = spec.xavier_init(11);
        let a = random_batch(&spec, 7, 1);
        let b = random_batch(&spec, 12, 2);
        let joined: Vec<_> = a.iter().chain(b.iter()).collect();
        let lhs = spec.loss(&w, &joined).unwrap();
        let rhs = (7.0 * spec.loss(&w, &a).unwrap() + 12.0 * spec.loss(&w, &b).unwrap()) / 19.0;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn output_bias_gradient_vanishes_for_balanced_batch_at_zero() {
        let spec = ModelSpec::relu(vec![2, 3, 2]).unwrap();
        let w = Params::<f64>::zeros(spec.param_count());
        let batch = vec![ex(vec![1.0, 2.0], 0), ex(vec![-1.0, 0.5], 1), ex(vec![0.0, 3.0], 1), ex(vec![2.0, 2.0], 0)];
        let g = spec.gradient(&w, &batch).unwrap();
        let out_bias = spec.param_count() - 2;
        assert_eq!(g[out_bias], 0.0);
        assert_eq!(g[out_bias + 1], 0.0);
    }

    #[test]
    fn duplicated_example_has_same_gradient() {
        let spec = ModelSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        let w: Params<f64> = spec.xavier_init(5);
        let single = random_batch(&spec, 1, 9);
        let repeated = vec![single[0].clone(); 6];
        let g1 = spec.gradient(&w, &single).unwrap();
        let g6 = spec.gradient(&w, &repeated).unwrap();
        for (a, b) in g1.iter().zip(g6.iter()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (i, act) in [Activation::Relu, Activation::Tanh].into_iter().enumerate() {
            let spec = ModelSpec::new(vec![4, 6, 3], act).unwrap();
            let mut w: Params<f64> = spec.xavier_init(20 + i as u64);
            let mut rng = seed::rng(99);
            for x in w.iter_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
            let batch = random_batch(&spec, 10, 30 + i as u64);
            let err = finite_difference_check(&spec, &w, &batch, 1e-5).unwrap();
            assert!(err < 1e-5, "{act:?}: {err}");
            let err_half = finite_difference_check(&spec, &w, &batch, 0.5e-5).unwrap();
            assert!(err_half <= 4.0 * err.max(1e-9), "{err_half} vs {err}");
        }
    }

    #[test]
    fn dead_units_give_exact_zero_gradients() {
        let spec = ModelSpec::relu(vec![2, 2, 2]).unwrap();
        let mut w: Params<f64> = spec.xavier_init(4);
        // Unit 0 of the hidden layer gets a large negative bias and never fires.
        w[4] = -100.0;
        let batch = random_batch(&spec, 5, 2);
        let g = spec.gradient(&w, &batch).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        let err = finite_difference_check(&spec, &w, &batch, 1e-5).unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let spec = ModelSpec::relu(vec![2, 2]).unwrap();
        let w = Params::<f64>::zeros(6);
        let batch = random_batch(&spec, 2, 1);
        assert!(finite_difference_check(&spec, &w, &batch, 0.0).is_err());
    }

    #[test]
    fn f32_forward_is_normalized() {
        let spec = ModelSpec::relu(vec![3, 4, 2]).unwrap();
        let w: Params<f32> = spec.xavier_init(3);
        let p = spec.forward(&w, &[0.5f32, -1.0, 2.0]).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
